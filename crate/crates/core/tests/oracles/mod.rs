//! Brute-force reference implementations shared by the integration tests.
//!
//! Nothing here calls into the library's algorithms; only its data types
//! are used.

#![allow(dead_code)]

use std::collections::BTreeMap;

use ndarray::Array2;
use panotrack::memory::MemorySlot;
use panotrack::metrics::{Labeled, Sequence};
use panotrack::PanoBox;
use rand::Rng;

/// Sums `c[i][p[i]]` in row order.
pub fn row_order_total(c: &Array2<f64>, pairs: &[(usize, usize)]) -> f64 {
    let mut sorted = pairs.to_vec();
    sorted.sort_unstable();
    sorted.iter().fold(0.0, |acc, &(i, j)| acc + c[(i, j)])
}

/// Visits every permutation of `p[k..]`.
pub fn permute(p: &mut Vec<usize>, k: usize, f: &mut impl FnMut(&[usize])) {
    if k == p.len() {
        f(p);
        return;
    }
    for i in k..p.len() {
        p.swap(k, i);
        permute(p, k + 1, f);
        p.swap(k, i);
    }
}

/// Minimum permutation total of a square matrix.
pub fn brute_min_cost(c: &Array2<f64>) -> f64 {
    let n = c.nrows();
    assert_eq!(n, c.ncols());
    let mut perm: Vec<usize> = (0..n).collect();
    let mut best = f64::INFINITY;
    permute(&mut perm, 0, &mut |p| {
        let pairs: Vec<(usize, usize)> = p.iter().copied().enumerate().collect();
        best = best.min(row_order_total(c, &pairs));
    });
    best
}

/// Best partial one-to-one matching by exhaustive search: most pairs among
/// `allowed`, then lowest total of `cost`.
pub fn best_matching(
    rows: usize,
    cols: usize,
    allowed: &dyn Fn(usize, usize) -> bool,
    cost: &dyn Fn(usize, usize) -> f64,
) -> Vec<(usize, usize)> {
    fn go(
        i: usize,
        rows: usize,
        cols: usize,
        used: &mut Vec<bool>,
        cur: &mut Vec<(usize, usize)>,
        best: &mut (usize, f64, Vec<(usize, usize)>),
        allowed: &dyn Fn(usize, usize) -> bool,
        cost: &dyn Fn(usize, usize) -> f64,
    ) {
        if i == rows {
            let total: f64 = cur.iter().map(|&(a, b)| cost(a, b)).sum();
            if cur.len() > best.0 || (cur.len() == best.0 && total < best.1) {
                *best = (cur.len(), total, cur.clone());
            }
            return;
        }
        go(i + 1, rows, cols, used, cur, best, allowed, cost);
        for j in 0..cols {
            if !used[j] && allowed(i, j) {
                used[j] = true;
                cur.push((i, j));
                go(i + 1, rows, cols, used, cur, best, allowed, cost);
                cur.pop();
                used[j] = false;
            }
        }
    }
    let mut best = (0, f64::INFINITY, Vec::new());
    go(0, rows, cols, &mut vec![false; cols], &mut Vec::new(), &mut best, allowed, cost);
    best.2
}

/// Same as [`best_matching`] but maximizing the total of `score`.
pub fn best_matching_max(
    rows: usize,
    cols: usize,
    allowed: &dyn Fn(usize, usize) -> bool,
    score: &dyn Fn(usize, usize) -> f64,
) -> Vec<(usize, usize)> {
    best_matching(rows, cols, allowed, &|i, j| -score(i, j))
}

pub const RASTER_CELLS: usize = 100_000;

fn covers_cyclic(lo: f64, w: f64, x: f64) -> bool {
    (-1..=1).any(|k| {
        let y = x + k as f64;
        lo <= y && y < lo + w
    })
}

fn covers_linear(lo: f64, h: f64, x: f64) -> bool {
    lo <= x && x < lo + h
}

/// Counts cells of an `n`-cell axis whose centers lie in `a`, in `b`, and in both.
fn axis_counts(n: usize, a: &dyn Fn(f64) -> bool, b: &dyn Fn(f64) -> bool) -> (u64, u64, u64) {
    let (mut ca, mut cb, mut both) = (0, 0, 0);
    for i in 0..n {
        let x = (i as f64 + 0.5) / n as f64;
        let (ia, ib) = (a(x), b(x));
        ca += ia as u64;
        cb += ib as u64;
        both += (ia && ib) as u64;
    }
    (ca, cb, both)
}

/// IoU by counting raster cells on a `RASTER_CELLS`² grid over the unit
/// cylinder.
pub fn raster_iou(a: &PanoBox, b: &PanoBox) -> f64 {
    let n = RASTER_CELLS;
    let (au, bu) = (a.cu() - a.w() / 2.0, b.cu() - b.w() / 2.0);
    let (av, bv) = (a.cv() - a.h() / 2.0, b.cv() - b.h() / 2.0);
    let (ua, ub, uboth) = axis_counts(
        n,
        &|x| covers_cyclic(au, a.w(), x),
        &|x| covers_cyclic(bu, b.w(), x),
    );
    let (va, vb, vboth) = axis_counts(
        n,
        &|x| covers_linear(av, a.h(), x),
        &|x| covers_linear(bv, b.h(), x),
    );
    let inter = (uboth * vboth) as f64;
    let union = (ua * va + ub * vb) as f64 - inter;
    if union == 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Analytic IoU on the cylinder, summing the overlap of `a` with shifted
/// copies of `b`.
pub fn analytic_iou(a: &PanoBox, b: &PanoBox) -> f64 {
    let (a0, b0) = (a.cu() - a.w() / 2.0, b.cu() - b.w() / 2.0);
    let ou: f64 = (-2..=2)
        .map(|k| {
            let lo = a0.max(b0 + k as f64);
            let hi = (a0 + a.w()).min(b0 + b.w() + k as f64);
            (hi - lo).max(0.0)
        })
        .sum();
    let lo = (a.cv() - a.h() / 2.0).max(b.cv() - b.h() / 2.0);
    let hi = (a.cv() + a.h() / 2.0).min(b.cv() + b.h() / 2.0);
    let ov = (hi - lo).max(0.0);
    let inter = ou * ov;
    let union = a.w() * a.h() + b.w() * b.h() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Random box kept inside the vertical range, any azimuth.
pub fn random_box(rng: &mut impl Rng, min_side: f64, max_side: f64) -> PanoBox {
    let w = rng.random_range(min_side..max_side);
    let h = rng.random_range(min_side..max_side);
    let cu = rng.random_range(0.0..1.0);
    let cv = rng.random_range(h / 2.0..1.0 - h / 2.0);
    PanoBox::new(cu, cv, w, h).unwrap()
}

/// HOTA, DetA and AssA by exhaustive per-frame matching at every α.
///
/// Each true positive contributes the association IoU of its own
/// (gt id, pred id) pair, averaged over all true positives.
pub fn brute_hota(gt: &Sequence, pred: &Sequence) -> (f64, f64, f64) {
    assert_eq!(gt.len(), pred.len());
    let frames: Vec<(&[Labeled], &[Labeled])> =
        (0..gt.len()).map(|f| (&gt.frames()[f][..], &pred.frames()[f][..])).collect();
    let n_gt: usize = frames.iter().map(|(g, _)| g.len()).sum();
    let n_pred: usize = frames.iter().map(|(_, p)| p.len()).sum();
    if n_gt + n_pred == 0 {
        return (1.0, 1.0, 1.0);
    }
    let mut gc: BTreeMap<u64, f64> = BTreeMap::new();
    let mut pc: BTreeMap<u64, f64> = BTreeMap::new();
    let mut s: BTreeMap<(u64, u64), f64> = BTreeMap::new();
    let ious: Vec<Vec<Vec<f64>>> = frames
        .iter()
        .map(|(g, p)| {
            g.iter()
                .map(|a| p.iter().map(|b| analytic_iou(&a.bbox, &b.bbox)).collect())
                .collect()
        })
        .collect();
    for ((g, p), iou) in frames.iter().zip(&ious) {
        for a in g.iter() {
            *gc.entry(a.id).or_default() += 1.0;
        }
        for b in p.iter() {
            *pc.entry(b.id).or_default() += 1.0;
        }
        for i in 0..g.len() {
            for j in 0..p.len() {
                if iou[i][j] <= 0.0 {
                    continue;
                }
                let row: f64 = iou[i].iter().sum();
                let col: f64 = (0..g.len()).map(|k| iou[k][j]).sum();
                *s.entry((g[i].id, p[j].id)).or_default() += iou[i][j] / (row + col - iou[i][j]);
            }
        }
    }
    let align = |g: u64, p: u64| -> f64 {
        s.get(&(g, p)).map_or(0.0, |&v| v / (gc[&g] + pc[&p] - v))
    };

    let (mut hota, mut deta, mut assa) = (0.0, 0.0, 0.0);
    for k in 1..=19 {
        let alpha = k as f64 / 20.0;
        let mut tps: Vec<(u64, u64)> = Vec::new();
        for ((g, p), iou) in frames.iter().zip(&ious) {
            let m = best_matching_max(
                g.len(),
                p.len(),
                &|i, j| iou[i][j] >= alpha - 1e-12,
                &|i, j| align(g[i].id, p[j].id) * iou[i][j],
            );
            tps.extend(m.iter().map(|&(i, j)| (g[i].id, p[j].id)));
        }
        let tp = tps.len() as f64;
        let fn_ = n_gt as f64 - tp;
        let fp = n_pred as f64 - tp;
        let d = tp / (tp + fn_ + fp);
        let a = if tps.is_empty() {
            0.0
        } else {
            tps.iter()
                .map(|&(g, p)| {
                    let tpa = tps.iter().filter(|&&c| c == (g, p)).count() as f64;
                    tpa / (gc[&g] + pc[&p] - tpa)
                })
                .sum::<f64>()
                / tp
        };
        hota += (d * a).sqrt();
        deta += d;
        assa += a;
    }
    (hota / 19.0, deta / 19.0, assa / 19.0)
}

/// Small random ground truth and a noisy prediction with identity switches,
/// misses and false positives.
pub fn random_small_case(rng: &mut impl Rng, max_ids: usize, max_frames: usize) -> (Sequence, Sequence) {
    let n_ids = rng.random_range(1..=max_ids);
    let n_frames = rng.random_range(1..=max_frames);
    let tracks: Vec<(f64, f64, f64, f64, f64)> = (0..n_ids)
        .map(|_| {
            let w = rng.random_range(0.05..0.2);
            let h = rng.random_range(0.1..0.3);
            (
                rng.random_range(0.0..1.0),
                rng.random_range(h / 2.0..1.0 - h / 2.0),
                w,
                h,
                rng.random_range(-0.03..0.03),
            )
        })
        .collect();
    let mut labels: Vec<u64> = (1..=n_ids as u64 + 2).collect();
    shuffle(rng, &mut labels);
    let switch_at = rng.random_range(0..=n_frames);
    let mut after = labels.clone();
    shuffle(rng, &mut after);

    let mut gt = Vec::with_capacity(n_frames);
    let mut pred = Vec::with_capacity(n_frames);
    for f in 0..n_frames {
        let mut g = Vec::new();
        let mut p = Vec::new();
        for (k, &(cu, cv, w, h, v)) in tracks.iter().enumerate() {
            if rng.random_bool(0.15) {
                continue;
            }
            let b = PanoBox::new(cu + v * f as f64, cv, w, h).unwrap();
            g.push(Labeled::new(k as u64 + 1, b));
            if rng.random_bool(0.2) {
                continue;
            }
            let id = if f < switch_at { labels[k] } else { after[k] };
            let jb = PanoBox::new(
                b.cu() + rng.random_range(-0.3..0.3) * w,
                b.cv() + rng.random_range(-0.1..0.1) * h,
                w * rng.random_range(0.8..1.2),
                h * rng.random_range(0.9..1.1),
            )
            .unwrap();
            p.push(Labeled::new(id, jb));
        }
        if rng.random_bool(0.2) {
            p.push(Labeled::new(99, random_box(rng, 0.05, 0.2)));
        }
        gt.push(g);
        pred.push(p);
    }
    (Sequence::new(gt).unwrap(), Sequence::new(pred).unwrap())
}

pub fn shuffle<T>(rng: &mut impl Rng, v: &mut [T]) {
    for i in (1..v.len()).rev() {
        let j = rng.random_range(0..=i);
        v.swap(i, j);
    }
}

fn oracle_cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Top-`k` slots by rank, where a slot's rank is the number of slots that
/// beat it on (similarity, confidence, earlier frame).
pub fn route_oracle(q: &[f64], slots: &[MemorySlot], k: usize) -> Vec<MemorySlot> {
    let sim: Vec<f64> = slots.iter().map(|s| oracle_cosine(q, &s.embedding)).collect();
    let beats = |a: usize, b: usize| {
        sim[a] > sim[b]
            || (sim[a] == sim[b]
                && (slots[a].confidence > slots[b].confidence
                    || (slots[a].confidence == slots[b].confidence && slots[a].frame < slots[b].frame)))
    };
    let mut ranked: Vec<(usize, usize)> = (0..slots.len())
        .map(|i| ((0..slots.len()).filter(|&j| beats(j, i)).count(), i))
        .collect();
    ranked.sort_unstable();
    ranked
        .into_iter()
        .filter(|&(r, _)| r < k)
        .map(|(_, i)| slots[i].clone())
        .collect()
}

/// Step-by-step replay of hierarchical admission with plain vectors.
#[derive(Debug, Clone)]
pub struct ReplayBank {
    pub capacity: usize,
    /// In admission order.
    pub sim: Vec<MemorySlot>,
    /// Oldest first.
    pub dim: Vec<MemorySlot>,
}

impl ReplayBank {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity,
            sim: Vec::new(),
            dim: Vec::new(),
        }
    }

    pub fn admit(&mut self, s: MemorySlot, theta: f64) {
        let half = self.capacity / 2;
        if s.confidence >= theta {
            if self.sim.len() < half {
                self.sim.push(s);
                return;
            }
            let mut weakest = 0;
            for (i, x) in self.sim.iter().enumerate() {
                if x.confidence <= self.sim[weakest].confidence {
                    weakest = i;
                }
            }
            if s.confidence > self.sim[weakest].confidence {
                self.sim.remove(weakest);
                self.sim.push(s);
                return;
            }
        }
        self.dim.push(s);
        if self.dim.len() > half {
            self.dim.remove(0);
        }
    }

    /// SIM by descending confidence, admission order among equals.
    pub fn sim_sorted(&self) -> Vec<MemorySlot> {
        let mut v = self.sim.clone();
        v.sort_by(|a, b| b.confidence.partial_cmp(&a.confidence).unwrap());
        v
    }
}

pub fn fixture_box(cu: f64) -> PanoBox {
    PanoBox::new(cu, 0.5, 0.04, 0.2).unwrap()
}

/// One object moving slowly across frames, labelled by `id_of(frame)`.
pub fn single_track(n: usize, id_of: impl Fn(usize) -> u64) -> Sequence {
    Sequence::new(
        (0..n)
            .map(|k| vec![Labeled::new(id_of(k), fixture_box(0.1 + 0.01 * k as f64))])
            .collect(),
    )
    .unwrap()
}

/// Identity F1 by trying every one-to-one map from ground-truth ids to
/// predicted ids.
pub fn brute_idf1(gt: &Sequence, pred: &Sequence, thresh: f64) -> f64 {
    let gids: Vec<u64> = gt.ids().into_iter().collect();
    let pids: Vec<u64> = pred.ids().into_iter().collect();
    let n_gt = gt.box_count() as f64;
    let n_pred = pred.box_count() as f64;
    if n_gt + n_pred == 0.0 {
        return 1.0;
    }
    let co = |g: u64, p: u64| -> f64 {
        (0..gt.len())
            .filter(|&f| {
                let a = gt.frames()[f].iter().find(|l| l.id == g);
                let b = pred.frames()[f].iter().find(|l| l.id == p);
                matches!((a, b), (Some(a), Some(b)) if analytic_iou(&a.bbox, &b.bbox) >= thresh)
            })
            .count() as f64
    };
    let m = best_matching_max(gids.len(), pids.len(), &|_, _| true, &|i, j| co(gids[i], pids[j]));
    let idtp: f64 = m.iter().map(|&(i, j)| co(gids[i], pids[j])).sum();
    2.0 * idtp / (n_gt + n_pred)
}
