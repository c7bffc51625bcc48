//! Per-track hierarchical appearance memory with a shared mixture of experts.
//!
//! A [`MemoryBank`] holds up to `n_m` embeddings: the first half is a
//! confidence-ranked identity store (SIM), the second a FIFO of recent
//! observations (DIM). At query time the router picks the `K_r` slots most
//! similar to the query from both halves, a gated selector attends over
//! them, and the result is blended with the shared-expert response.

use std::collections::VecDeque;

use ndarray::{Array1, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::rng::normal;
use crate::vector::{cosine, dot, softmax};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemorySlot {
    pub embedding: Vec<f64>,
    pub confidence: f64,
    pub frame: u64,
}

impl MemorySlot {
    pub fn new(embedding: Vec<f64>, confidence: f64, frame: u64) -> Self {
        Self {
            embedding,
            confidence: confidence.clamp(0.0, 1.0),
            frame,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MemoryBank {
    capacity: usize,
    sim: Vec<MemorySlot>,
    dim: VecDeque<MemorySlot>,
}

impl MemoryBank {
    /// `capacity` is `n_m`; it must be even and positive.
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 || capacity % 2 != 0 {
            return Err(Error::config(format!(
                "memory capacity must be even and positive, got {capacity}"
            )));
        }
        Ok(Self {
            capacity,
            sim: Vec::with_capacity(capacity / 2),
            dim: VecDeque::with_capacity(capacity / 2),
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn half(&self) -> usize {
        self.capacity / 2
    }

    /// Stable identity slots, highest confidence first.
    pub fn stable(&self) -> &[MemorySlot] {
        &self.sim
    }

    /// Recent slots, oldest first.
    pub fn dynamic(&self) -> impl Iterator<Item = &MemorySlot> {
        self.dim.iter()
    }

    pub fn len(&self) -> usize {
        self.sim.len() + self.dim.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// All slots, SIM first then DIM.
    pub fn slots(&self) -> impl Iterator<Item = &MemorySlot> {
        self.sim.iter().chain(self.dim.iter())
    }

    /// Hierarchical admission: confident observations compete for a SIM
    /// place, everything else (including SIM losers) goes to the DIM FIFO.
    pub fn admit(&mut self, slot: MemorySlot, theta_sim: f64) {
        let half = self.half();
        if slot.confidence >= theta_sim {
            if self.sim.len() < half {
                self.insert_sim(slot);
                return;
            }
            let weakest = self.sim.last().map_or(f64::INFINITY, |s| s.confidence);
            if slot.confidence > weakest {
                self.sim.pop();
                self.insert_sim(slot);
                return;
            }
        }
        if self.dim.len() == half {
            self.dim.pop_front();
        }
        self.dim.push_back(slot);
    }

    fn insert_sim(&mut self, slot: MemorySlot) {
        // after any equal-confidence slots, so earlier keyframes win ties
        let pos = self
            .sim
            .partition_point(|s| s.confidence >= slot.confidence);
        self.sim.insert(pos, slot);
    }
}

/// The `K_r` slots most similar to `q`, most similar first.
///
/// Ties on similarity prefer higher confidence, then the older frame.
pub fn route<'a>(q: &[f64], bank: &'a MemoryBank, k_r: usize) -> Vec<&'a MemorySlot> {
    let mut scored: Vec<(f64, &MemorySlot)> =
        bank.slots().map(|s| (cosine(q, &s.embedding), s)).collect();
    scored.sort_by(|a, b| {
        b.0.total_cmp(&a.0)
            .then_with(|| b.1.confidence.total_cmp(&a.1.confidence))
            .then_with(|| a.1.frame.cmp(&b.1.frame))
    });
    scored.into_iter().take(k_r).map(|(_, s)| s).collect()
}

/// Two-layer feed-forward expert: `w2 · relu(w1 · x + b1) + b2`.
#[derive(Debug, Clone, PartialEq)]
pub struct Expert {
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
}

impl Expert {
    /// An expert computing the identity map, via `x = relu(x) - relu(-x)`.
    pub fn identity(dim: usize) -> Self {
        let mut w1 = Array2::zeros((2 * dim, dim));
        let mut w2 = Array2::zeros((dim, 2 * dim));
        for i in 0..dim {
            w1[(i, i)] = 1.0;
            w1[(dim + i, i)] = -1.0;
            w2[(i, i)] = 1.0;
            w2[(i, dim + i)] = -1.0;
        }
        Self {
            w1,
            b1: Array1::zeros(2 * dim),
            w2,
            b2: Array1::zeros(dim),
        }
    }

    pub fn dim(&self) -> usize {
        self.w1.ncols()
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        let x = Array1::from(x.to_vec());
        let hidden = (self.w1.dot(&x) + &self.b1).mapv(|v| v.max(0.0));
        (self.w2.dot(&hidden) + &self.b2).to_vec()
    }
}

/// Shared mixture-of-experts and fusion settings.
#[derive(Debug, Clone, PartialEq)]
pub struct MoeParams {
    pub experts: Vec<Expert>,
    pub keys: Vec<Vec<f64>>,
    /// Weight of the shared expert response against the personalized memory
    /// retrieval.
    pub lambda: f64,
    /// Router width.
    pub k_r: usize,
    pub temperature: f64,
}

impl MoeParams {
    pub fn dim(&self) -> usize {
        self.keys.first().map_or(0, Vec::len)
    }

    pub fn validate(&self) -> Result<()> {
        if self.experts.is_empty() || self.experts.len() != self.keys.len() {
            return Err(Error::config("need at least one expert and one key per expert"));
        }
        let dim = self.dim();
        if self
            .experts
            .iter()
            .any(|e| e.dim() != dim || e.w2.nrows() != dim)
            || self.keys.iter().any(|k| k.len() != dim)
        {
            return Err(Error::config("expert and key dimensions disagree"));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::config(format!("lambda {} outside [0, 1]", self.lambda)));
        }
        if self.k_r == 0 {
            return Err(Error::config("router width K_r must be positive"));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::config("temperature must be positive"));
        }
        Ok(())
    }

    /// Identity experts with near-identity perturbations and Gaussian keys,
    /// deterministic in `seed`.
    pub fn seeded(dim: usize, n_experts: usize, perturbation: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut experts = Vec::with_capacity(n_experts);
        let mut keys = Vec::with_capacity(n_experts);
        for _ in 0..n_experts {
            let mut e = Expert::identity(dim);
            let scale = perturbation / (dim as f64).sqrt();
            e.w1.mapv_inplace(|w| w + scale * normal(&mut rng));
            e.w2.mapv_inplace(|w| w + scale * normal(&mut rng));
            experts.push(e);
            keys.push((0..dim).map(|_| normal(&mut rng)).collect());
        }
        Self {
            experts,
            keys,
            lambda: 0.5,
            k_r: 4,
            temperature: 1.0,
        }
    }

    pub fn write_to(&self, store: &mut ParamStore, prefix: &str) {
        for (k, e) in self.experts.iter().enumerate() {
            store.insert_matrix(&format!("{prefix}.expert{k}.w1"), &e.w1);
            store.insert_vector(&format!("{prefix}.expert{k}.b1"), e.b1.as_slice().unwrap());
            store.insert_matrix(&format!("{prefix}.expert{k}.w2"), &e.w2);
            store.insert_vector(&format!("{prefix}.expert{k}.b2"), e.b2.as_slice().unwrap());
            store.insert_vector(&format!("{prefix}.key{k}"), &self.keys[k]);
        }
        store.insert_vector(&format!("{prefix}.lambda"), &[self.lambda]);
        store.insert_vector(&format!("{prefix}.k_r"), &[self.k_r as f64]);
        store.insert_vector(&format!("{prefix}.temperature"), &[self.temperature]);
    }

    pub fn read_from(store: &ParamStore, prefix: &str) -> Result<Self> {
        let mut experts = Vec::new();
        let mut keys = Vec::new();
        let mut k = 0;
        while store.contains(&format!("{prefix}.expert{k}.w1")) {
            experts.push(Expert {
                w1: store.matrix(&format!("{prefix}.expert{k}.w1"))?,
                b1: Array1::from(store.vector(&format!("{prefix}.expert{k}.b1"))?),
                w2: store.matrix(&format!("{prefix}.expert{k}.w2"))?,
                b2: Array1::from(store.vector(&format!("{prefix}.expert{k}.b2"))?),
            });
            keys.push(store.vector(&format!("{prefix}.key{k}"))?);
            k += 1;
        }
        let p = Self {
            experts,
            keys,
            lambda: store.scalar(&format!("{prefix}.lambda"))?,
            k_r: store.scalar(&format!("{prefix}.k_r"))? as usize,
            temperature: store.scalar(&format!("{prefix}.temperature"))?,
        };
        p.validate()?;
        Ok(p)
    }
}

/// Routing weights `α` over the experts for query `q`.
pub fn routing_weights(q: &[f64], p: &MoeParams) -> Vec<f64> {
    let scale = (q.len() as f64).sqrt() * p.temperature;
    let scores: Vec<f64> = p.keys.iter().map(|k| dot(q, k) / scale).collect();
    softmax(&scores)
}

/// Shared expert response `Σ α_k E_k(q)`.
pub fn moe_forward(q: &[f64], p: &MoeParams) -> Vec<f64> {
    let alpha = routing_weights(q, p);
    let mut out = vec![0.0; q.len()];
    for (a, e) in alpha.iter().zip(&p.experts) {
        for (o, y) in out.iter_mut().zip(e.forward(q)) {
            *o += a * y;
        }
    }
    out
}

/// Returned by [`gated_select`] when there is nothing to attend over.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ColdMemory;

/// Soft attention over `slots` by cosine similarity to `q`.
pub fn gated_select(
    slots: &[&MemorySlot],
    q: &[f64],
    temperature: f64,
) -> std::result::Result<Vec<f64>, ColdMemory> {
    if slots.is_empty() {
        return Err(ColdMemory);
    }
    let scores: Vec<f64> = slots
        .iter()
        .map(|s| cosine(q, &s.embedding) / temperature)
        .collect();
    let weights = softmax(&scores);
    let mut out = vec![0.0; q.len()];
    for (w, s) in weights.iter().zip(slots) {
        for (o, e) in out.iter_mut().zip(&s.embedding) {
            *o += w * e;
        }
    }
    Ok(out)
}

/// `λ·f_sh + (1 − λ)·f_pl`.
pub fn fuse_embeddings(f_sh: &[f64], f_pl: &[f64], lambda: f64) -> Result<Vec<f64>> {
    if f_sh.len() != f_pl.len() {
        return Err(Error::input(format!(
            "embedding lengths differ ({} vs {})",
            f_sh.len(),
            f_pl.len()
        )));
    }
    Ok(f_sh
        .iter()
        .zip(f_pl)
        .map(|(s, p)| lambda * s + (1.0 - lambda) * p)
        .collect())
}

/// Memory-enhanced embedding for a track whose latest appearance is `q`.
pub fn enhance(bank: &MemoryBank, q: &[f64], p: &MoeParams) -> Vec<f64> {
    enhance_with_lambda(bank, q, p, p.lambda)
}

pub(crate) fn enhance_with_lambda(
    bank: &MemoryBank,
    q: &[f64],
    p: &MoeParams,
    lambda: f64,
) -> Vec<f64> {
    let shared = moe_forward(q, p);
    let routed = route(q, bank, p.k_r);
    let personal = gated_select(&routed, q, p.temperature).unwrap_or_else(|ColdMemory| q.to_vec());
    fuse_embeddings(&shared, &personal, lambda).expect("query and memory share a dimension")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn slot(conf: f64, frame: u64) -> MemorySlot {
        MemorySlot::new(vec![conf, 1.0 - conf], conf, frame)
    }

    #[test]
    fn admit_confident_slot_to_sim() {
        let mut bank = MemoryBank::new(8).unwrap();
        bank.admit(slot(0.9, 1), 0.7);
        assert_eq!(bank.stable().len(), 1);
        assert_eq!(bank.dynamic().count(), 0);
    }

    #[test]
    fn eviction_guard_routes_weak_slot_to_dim() {
        let mut bank = MemoryBank::new(8).unwrap();
        for (i, c) in [0.95, 0.9, 0.8, 0.75].into_iter().enumerate() {
            bank.admit(slot(c, i as u64), 0.7);
        }
        let before: Vec<f64> = bank.stable().iter().map(|s| s.confidence).collect();
        bank.admit(slot(0.7, 9), 0.7);
        let after: Vec<f64> = bank.stable().iter().map(|s| s.confidence).collect();
        assert_eq!(before, after);
        assert_eq!(bank.dynamic().map(|s| s.frame).collect::<Vec<_>>(), vec![9]);

        bank.admit(slot(0.85, 10), 0.7);
        let after: Vec<f64> = bank.stable().iter().map(|s| s.confidence).collect();
        assert_eq!(after, vec![0.95, 0.9, 0.85, 0.8]);
    }

    #[test]
    fn dim_is_fifo() {
        let mut bank = MemoryBank::new(4).unwrap();
        for f in 0..5 {
            bank.admit(slot(0.1, f), 0.7);
        }
        assert_eq!(bank.dynamic().map(|s| s.frame).collect::<Vec<_>>(), vec![3, 4]);
    }

    #[test]
    fn odd_capacity_rejected() {
        assert!(MemoryBank::new(7).is_err());
        assert!(MemoryBank::new(0).is_err());
    }

    #[test]
    fn route_edge_cases() {
        let bank = MemoryBank::new(8).unwrap();
        assert!(route(&[1.0, 0.0], &bank, 4).is_empty());
        let mut bank = MemoryBank::new(8).unwrap();
        bank.admit(MemorySlot::new(vec![0.0, 1.0], 0.9, 3), 0.7);
        let r = route(&[1.0, 0.0], &bank, 4);
        assert_eq!(r.len(), 1);
        assert_eq!(r[0].frame, 3);
    }

    #[test]
    fn route_tie_break() {
        let mut bank = MemoryBank::new(8).unwrap();
        bank.admit(MemorySlot::new(vec![1.0, 0.0], 0.2, 5), 0.7);
        bank.admit(MemorySlot::new(vec![2.0, 0.0], 0.2, 4), 0.7);
        bank.admit(MemorySlot::new(vec![3.0, 0.0], 0.9, 6), 0.7);
        let r = route(&[1.0, 0.0], &bank, 3);
        let frames: Vec<u64> = r.iter().map(|s| s.frame).collect();
        assert_eq!(frames, vec![6, 4, 5]);
    }

    fn two_identical_keys() -> MoeParams {
        let mut p = MoeParams::seeded(3, 2, 0.3, 1);
        p.keys[1] = p.keys[0].clone();
        p
    }

    #[test]
    fn symmetric_routing() {
        let p = two_identical_keys();
        let q = [0.3, -0.2, 0.9];
        let a = routing_weights(&q, &p);
        assert_eq!(a, vec![0.5, 0.5]);
        let out = moe_forward(&q, &p);
        let e0 = p.experts[0].forward(&q);
        let e1 = p.experts[1].forward(&q);
        for i in 0..3 {
            assert!((out[i] - 0.5 * (e0[i] + e1[i])).abs() < 1e-12);
        }
    }

    #[test]
    fn single_expert() {
        let p = MoeParams::seeded(3, 1, 0.3, 2);
        let q = [0.1, 0.5, -0.4];
        assert_eq!(routing_weights(&q, &p), vec![1.0]);
        assert_eq!(moe_forward(&q, &p), p.experts[0].forward(&q));
    }

    #[test]
    fn closed_form_softmax() {
        // q·key / (sqrt(4)·1) = ln 2 for key 0 and 0 for key 1
        let mut p = MoeParams::seeded(4, 2, 0.0, 3);
        let ln2 = std::f64::consts::LN_2;
        p.keys[0] = vec![2.0 * ln2, 0.0, 0.0, 0.0];
        p.keys[1] = vec![0.0; 4];
        let a = routing_weights(&[1.0, 0.0, 0.0, 0.0], &p);
        assert!((a[0] - 2.0 / 3.0).abs() < 1e-9);
        assert!((a[1] - 1.0 / 3.0).abs() < 1e-9);
    }

    #[test]
    fn identity_expert_is_identity() {
        let e = Expert::identity(5);
        let x = [0.3, -1.2, 0.0, 4.5, -0.1];
        assert_eq!(e.forward(&x), x.to_vec());
    }

    #[test]
    fn gated_select_cases() {
        assert_eq!(gated_select(&[], &[1.0], 1.0), Err(ColdMemory));
        let s = MemorySlot::new(vec![0.2, 0.7], 0.5, 0);
        assert_eq!(gated_select(&[&s], &[1.0, 0.0], 1.0).unwrap(), vec![0.2, 0.7]);
        let a = MemorySlot::new(vec![1.0, 0.0], 0.5, 0);
        let b = MemorySlot::new(vec![0.0, 1.0], 0.5, 1);
        let out = gated_select(&[&a, &b], &[1.0, 0.0], 1e-6).unwrap();
        assert!((out[0] - 1.0).abs() < 1e-6 && out[1].abs() < 1e-6);
    }

    #[test]
    fn fuse_boundaries() {
        let sh = [1.0, -2.0, 3.5];
        let pl = [-0.5, 0.25, 7.0];
        assert_eq!(fuse_embeddings(&sh, &pl, 1.0).unwrap(), sh.to_vec());
        assert_eq!(fuse_embeddings(&sh, &pl, 0.0).unwrap(), pl.to_vec());
        assert_eq!(
            fuse_embeddings(&[1.0, 0.0, 0.0], &[0.0, 1.0, 0.0], 0.5).unwrap(),
            vec![0.5, 0.5, 0.0]
        );
        assert!(fuse_embeddings(&[1.0], &[1.0, 2.0], 0.5).is_err());
    }

    #[test]
    fn enhance_cold_start_and_fixed_point() {
        let mut p = MoeParams::seeded(3, 4, 0.3, 9);
        let q = vec![0.4, -0.3, 0.8];
        p.lambda = 0.0;
        assert_eq!(enhance(&MemoryBank::new(8).unwrap(), &q, &p), q);

        p.experts = vec![Expert::identity(3); 4];
        let mut bank = MemoryBank::new(8).unwrap();
        bank.admit(MemorySlot::new(q.clone(), 0.9, 0), 0.7);
        for lambda in [0.0, 0.3, 0.5, 1.0] {
            p.lambda = lambda;
            let out = enhance(&bank, &q, &p);
            for i in 0..3 {
                assert!((out[i] - q[i]).abs() < 1e-12);
            }
        }
    }
}
