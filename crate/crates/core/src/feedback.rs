//! Entropy accounting for detection feedback, track instances, and the
//! deterministic detection-claiming operator.

use std::f64::consts::TAU;

use ndarray::Array2;
use rand::Rng;

use crate::assignment::min_cost_assignment;
use crate::association::AssociationConfig;
use crate::detection::Detection;
use crate::error::{Error, Result};
use crate::geometry::PanoBox;
use crate::kalman::{kalman_predict, ProcessNoise};
use crate::memory::{enhance, MoeParams};
use crate::rng::normal;
use crate::tracker::{TrackId, TrackState, Tracklet};
use crate::vector::cosine;

const MASS_TOLERANCE: f64 = 1e-9;

fn check_mass<'a>(values: impl IntoIterator<Item = &'a f64>) -> Result<()> {
    let mut total = 0.0;
    for &v in values {
        if !(v >= 0.0) || !v.is_finite() {
            return Err(Error::input(format!("probability {v} is not a non-negative real")));
        }
        total += v;
    }
    if (total - 1.0).abs() > MASS_TOLERANCE {
        return Err(Error::input(format!("probability mass is {total}, not 1")));
    }
    Ok(())
}

fn plogp(p: f64) -> f64 {
    if p > 0.0 {
        p * libm::log(p)
    } else {
        0.0
    }
}

/// Shannon entropy in nats.
pub fn entropy(p: &[f64]) -> Result<f64> {
    check_mass(p)?;
    Ok((-p.iter().map(|&v| plogp(v)).sum::<f64>()).max(0.0))
}

/// Row sums of a joint table whose rows index `x`.
pub fn x_marginal(joint: &Array2<f64>) -> Vec<f64> {
    joint.rows().into_iter().map(|r| r.sum()).collect()
}

/// Column sums of a joint table whose columns index `y`.
pub fn y_marginal(joint: &Array2<f64>) -> Vec<f64> {
    joint.columns().into_iter().map(|c| c.sum()).collect()
}

/// `H(x | y)` in nats for a joint table with rows indexing `x` and columns `y`.
pub fn conditional_entropy(joint: &Array2<f64>) -> Result<f64> {
    check_mass(joint.iter())?;
    let py = y_marginal(joint);
    let mut h = 0.0;
    for ((_, j), &p) in joint.indexed_iter() {
        if p > 0.0 {
            h -= p * libm::log(p / py[j]);
        }
    }
    Ok(h.max(0.0))
}

/// Entropy reduction `Σ_t [H(x_t) − H(x_t | y_{t−1})]` over a sequence of
/// per-frame joints.
pub fn feedback_gain(joints: &[Array2<f64>]) -> Result<f64> {
    if joints.is_empty() {
        return Err(Error::input("feedback gain needs at least one frame"));
    }
    let mut gain = 0.0;
    for joint in joints {
        let hc = conditional_entropy(joint)?;
        let hx = entropy(&x_marginal(joint))?;
        gain += hx - hc;
    }
    Ok(gain)
}

/// A per-track query: appearance feature plus predicted anchor box.
#[derive(Debug, Clone, PartialEq)]
pub struct FlexiTrackInstance {
    pub track_id: TrackId,
    pub feature: Vec<f64>,
    pub anchor: PanoBox,
    pub anchor_enc: Vec<f64>,
    pub score: f64,
}

impl FlexiTrackInstance {
    /// Builds an instance whose anchor encoding matches the feature width.
    pub fn new(track_id: TrackId, feature: Vec<f64>, anchor: PanoBox, score: f64) -> Self {
        let anchor_enc = encode_anchor(&anchor, feature.len());
        Self {
            track_id,
            feature,
            anchor,
            anchor_enc,
            score,
        }
    }

    pub fn dim(&self) -> usize {
        self.feature.len()
    }
}

/// Sinusoidal encoding of `(cu, cv, w, h)` into `dim` values.
///
/// Component `i` encodes coordinate `(i / 2) mod 4` at frequency
/// `i / 8 + 1`, as a sine for even `i` and a cosine for odd `i`. Every
/// frequency is an integer, so the encoding is periodic in `cu`.
pub fn encode_anchor(b: &PanoBox, dim: usize) -> Vec<f64> {
    let coords = b.to_array();
    (0..dim)
        .map(|i| {
            let freq = (i / 8 + 1) as f64;
            let phase = TAU * freq * coords[(i / 2) % 4];
            if i % 2 == 0 {
                libm::sin(phase)
            } else {
                libm::cos(phase)
            }
        })
        .collect()
}

/// Adds Gaussian noise to the feature (`σ_x`, absolute) and the anchor
/// (`σ_y`, relative to box size; sizes are perturbed log-normally), then
/// re-encodes the anchor.
pub fn perturb<R: Rng + ?Sized>(
    inst: &FlexiTrackInstance,
    sigma_x: f64,
    sigma_y: f64,
    rng: &mut R,
) -> FlexiTrackInstance {
    let mut out = inst.clone();
    if sigma_x > 0.0 {
        for v in &mut out.feature {
            *v += sigma_x * normal(rng);
        }
    }
    if sigma_y > 0.0 {
        let b = &inst.anchor;
        let mut n = [0.0f64; 4];
        for v in &mut n {
            *v = normal(rng);
        }
        out.anchor = PanoBox::clamped(
            b.cu() + sigma_y * b.w() * n[0],
            b.cv() + sigma_y * b.h() * n[1],
            b.w() * libm::exp(sigma_y * n[2]),
            b.h() * libm::exp(sigma_y * n[3]),
        );
        out.anchor_enc = encode_anchor(&out.anchor, out.feature.len());
    }
    out
}

/// Instances for every live track, after advancing each Kalman state one
/// frame. With `moe = None` the feature is the track's latest embedding;
/// otherwise it is the memory-enhanced embedding.
pub fn make_instances(
    tracks: &[Tracklet],
    noise: &ProcessNoise,
    moe: Option<&MoeParams>,
) -> Vec<FlexiTrackInstance> {
    tracks
        .iter()
        .filter(|t| t.state != TrackState::Removed)
        .map(|t| {
            let anchor = kalman_predict(&t.kalman, noise).to_box();
            instance_at(t, anchor, moe)
        })
        .collect()
}

/// Same as [`make_instances`] for tracks whose state is already predicted.
pub(crate) fn instances_from_predicted(
    tracks: &[Tracklet],
    moe: Option<&MoeParams>,
) -> Vec<FlexiTrackInstance> {
    tracks
        .iter()
        .filter(|t| t.state != TrackState::Removed)
        .map(|t| instance_at(t, t.kalman.to_box(), moe))
        .collect()
}

fn instance_at(t: &Tracklet, anchor: PanoBox, moe: Option<&MoeParams>) -> FlexiTrackInstance {
    let feature = match moe {
        Some(p) if !t.last_embedding.is_empty() && p.dim() == t.last_embedding.len() => {
            enhance(&t.bank, &t.last_embedding, p)
        }
        _ => t.last_embedding.clone(),
    };
    FlexiTrackInstance::new(t.id, feature, anchor, t.last_score)
}

/// A detection claimed by a track instance.
#[derive(Debug, Clone, PartialEq)]
pub struct Claim {
    pub track_id: TrackId,
    /// Index into the frame's detection list.
    pub index: usize,
    pub detection: Detection,
    pub similarity: f64,
    /// Detection score times similarity.
    pub score: f64,
}

/// A detection no instance claimed.
#[derive(Debug, Clone, PartialEq)]
pub struct Unclaimed {
    pub index: usize,
    pub detection: Detection,
    pub score: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ClaimedDetections {
    pub claimed: Vec<Claim>,
    pub unclaimed: Vec<Unclaimed>,
}

impl ClaimedDetections {
    pub fn len(&self) -> usize {
        self.claimed.len() + self.unclaimed.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Instance-by-detection similarity `w_iou·IoU + w_app·(1 + cos)/2`.
pub fn claim_similarity(
    instances: &[FlexiTrackInstance],
    detections: &[Detection],
    weights: &AssociationConfig,
) -> Array2<f64> {
    Array2::from_shape_fn((instances.len(), detections.len()), |(i, j)| {
        let iou = weights.geometry.iou(&instances[i].anchor, &detections[j].bbox);
        let cos = cosine(&instances[i].feature, &detections[j].embedding);
        weights.similarity(iou, cos)
    })
}

/// Optimal one-to-one pairing of instances with detections; pairs whose
/// similarity reaches `gate` are claimed, everything else stays unclaimed.
pub fn claim_detections(
    instances: &[FlexiTrackInstance],
    detections: &[Detection],
    gate: f64,
    weights: &AssociationConfig,
) -> ClaimedDetections {
    let sim = claim_similarity(instances, detections, weights);
    let mut owner: Vec<Option<(usize, f64)>> = vec![None; detections.len()];
    if !instances.is_empty() && !detections.is_empty() {
        let costs = sim.mapv(|s| 1.0 - s);
        for (i, a) in min_cost_assignment(&costs).into_iter().enumerate() {
            if let Some(j) = a {
                let s = sim[(i, j)];
                if s >= gate {
                    owner[j] = Some((i, s));
                }
            }
        }
    }
    let mut out = ClaimedDetections::default();
    for (j, (d, o)) in detections.iter().zip(owner).enumerate() {
        match o {
            Some((i, s)) => out.claimed.push(Claim {
                track_id: instances[i].track_id,
                index: j,
                detection: d.clone(),
                similarity: s,
                score: (d.score * s).clamp(0.0, 1.0),
            }),
            None => out.unclaimed.push(Unclaimed {
                index: j,
                detection: d.clone(),
                score: d.score,
            }),
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn entropy_examples() {
        assert_eq!(entropy(&[1.0, 0.0]).unwrap(), 0.0);
        assert!((entropy(&[0.5, 0.5]).unwrap() - 2f64.ln()).abs() < 1e-12);
        assert!((entropy(&[0.125; 8]).unwrap() - 8f64.ln()).abs() < 1e-12);
        assert!(entropy(&[0.5, 0.6]).is_err());
        assert!(entropy(&[1.5, -0.5]).is_err());
    }

    #[test]
    fn conditional_entropy_examples() {
        let h = conditional_entropy(&array![[0.4, 0.1], [0.1, 0.4]]).unwrap();
        assert!((h - 0.5004).abs() < 5e-5, "{h}");
        assert_eq!(conditional_entropy(&array![[0.0, 0.5], [0.5, 0.0]]).unwrap(), 0.0);
        let indep = array![[0.3 * 0.6, 0.3 * 0.4], [0.7 * 0.6, 0.7 * 0.4]];
        let hx = entropy(&[0.3, 0.7]).unwrap();
        assert!((conditional_entropy(&indep).unwrap() - hx).abs() < 1e-12);
    }

    #[test]
    fn feedback_gain_examples() {
        assert!(feedback_gain(&[]).is_err());
        let perm = Array2::from_shape_fn((4, 4), |(i, j)| if (i + 1) % 4 == j { 0.25 } else { 0.0 });
        let g = feedback_gain(&vec![perm; 5]).unwrap();
        assert!((g - 5.0 * 4f64.ln()).abs() < 1e-12);
        let indep = Array2::from_elem((3, 3), 1.0 / 9.0);
        assert!(feedback_gain(&[indep]).unwrap().abs() < 1e-12);
    }

    #[test]
    fn anchor_encoding_is_periodic_in_azimuth() {
        let a = encode_anchor(&PanoBox::new(0.0, 0.5, 0.1, 0.1).unwrap(), 32);
        let b = encode_anchor(&PanoBox::new(1.0 - 1e-12, 0.5, 0.1, 0.1).unwrap(), 32);
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn zero_sigma_perturb_is_identity() {
        let b = PanoBox::new(0.3, 0.4, 0.1, 0.2).unwrap();
        let inst = FlexiTrackInstance::new(TrackId(3), vec![0.1, -0.2, 0.3, 0.4], b, 0.8);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(perturb(&inst, 0.0, 0.0, &mut rng), inst);
    }

    #[test]
    fn perturb_is_seeded() {
        let b = PanoBox::new(0.3, 0.4, 0.1, 0.2).unwrap();
        let inst = FlexiTrackInstance::new(TrackId(3), vec![0.0; 16], b, 0.8);
        let a = perturb(&inst, 0.1, 0.1, &mut ChaCha8Rng::seed_from_u64(9));
        let c = perturb(&inst, 0.1, 0.1, &mut ChaCha8Rng::seed_from_u64(9));
        assert_eq!(a, c);
        assert_ne!(a, inst);
    }

    #[test]
    fn claim_trivial_cases() {
        let cfg = AssociationConfig::default();
        let b = PanoBox::new(0.5, 0.5, 0.1, 0.1).unwrap();
        let d = vec![Detection::new(b, 0.9, vec![1.0, 0.0])];
        let c = claim_detections(&[], &d, 0.5, &cfg);
        assert!(c.claimed.is_empty());
        assert_eq!(c.unclaimed.len(), 1);

        let inst = FlexiTrackInstance::new(TrackId(1), vec![1.0, 0.0], b, 0.9);
        let c = claim_detections(&[inst], &d, 0.5, &cfg);
        assert_eq!(c.claimed.len(), 1);
        assert!((c.claimed[0].similarity - 1.0).abs() < 1e-12);
        assert!((c.claimed[0].score - 0.9).abs() < 1e-12);
    }
}
