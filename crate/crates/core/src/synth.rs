//! Synthetic panoramic sequences with ground truth, noisy detections and
//! identity-conditioned embeddings.
//!
//! All randomness comes from ChaCha8 streams keyed by the scenario seed:
//! stream 0 drives target motion, stream 1 drives detections, and ego noise
//! for frame `t` uses stream `1000 + t`. ChaCha8 output is specified
//! bit-for-bit, so sequences are identical on every platform.

use std::f64::consts::TAU;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::detection::Detection;
use crate::error::{Error, Result};
use crate::geometry::{cyclic_iou, wrap_unit, PanoBox};
use crate::metrics::{Labeled, Sequence};
use crate::rng::{normal, poisson};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum MotionRegime {
    #[default]
    Smooth,
    /// Vertical oscillation of the camera.
    Gait,
    /// Camera pitch oscillation, shearing boxes by azimuth.
    Pitch,
}

impl FromStr for MotionRegime {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "smooth" => Ok(Self::Smooth),
            "gait" => Ok(Self::Gait),
            "pitch" => Ok(Self::Pitch),
            _ => Err(Error::config(format!("unknown motion regime `{s}`"))),
        }
    }
}

impl fmt::Display for MotionRegime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Smooth => "smooth",
            Self::Gait => "gait",
            Self::Pitch => "pitch",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub n_targets: usize,
    pub seq_len: usize,
    pub regime: MotionRegime,
    pub gait_amplitude: f64,
    /// Cycles per frame.
    pub gait_frequency: f64,
    pub pitch_amplitude: f64,
    pub pitch_frequency: f64,
    /// Random jitter added to the ego oscillation.
    pub ego_jitter: f64,
    /// Azimuth speed range, turns per frame.
    pub speed_min: f64,
    pub speed_max: f64,
    /// Per-frame random-walk step on azimuth speed.
    pub speed_walk: f64,
    /// Start every target at this azimuth instead of a random one.
    pub start_azimuth: Option<f64>,
    /// Box width and height at unit depth.
    pub base_width: f64,
    pub base_height: f64,
    pub depth_min: f64,
    pub depth_max: f64,
    pub p_miss: f64,
    /// Expected clutter detections per frame.
    pub clutter_rate: f64,
    /// Box jitter relative to box size.
    pub jitter_sigma: f64,
    pub score_min: f64,
    pub score_max: f64,
    pub clutter_score_max: f64,
    /// A target whose IoU with a nearer one exceeds this is hidden.
    pub occlusion_iou: f64,
    /// Score factor for partially occluded targets.
    pub partial_dim: f64,
    pub embed_dim: usize,
    /// Expected norm of the per-detection embedding noise.
    pub embed_noise: f64,
    /// Shared embedding shift per unit distance from the horizon.
    pub distortion_gain: f64,
    /// With `false`, all embeddings are zero.
    pub appearance: bool,
    pub seed: u64,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            n_targets: 12,
            seq_len: 600,
            regime: MotionRegime::Smooth,
            gait_amplitude: 0.02,
            gait_frequency: 0.1,
            pitch_amplitude: 0.03,
            pitch_frequency: 0.05,
            ego_jitter: 0.002,
            speed_min: 0.0005,
            speed_max: 0.004,
            speed_walk: 0.0002,
            start_azimuth: None,
            base_width: 0.06,
            base_height: 0.3,
            depth_min: 1.0,
            depth_max: 3.0,
            p_miss: 0.1,
            clutter_rate: 1.0,
            jitter_sigma: 0.05,
            score_min: 0.55,
            score_max: 1.0,
            clutter_score_max: 0.45,
            occlusion_iou: 0.6,
            partial_dim: 0.5,
            embed_dim: 32,
            embed_noise: 0.8,
            distortion_gain: 1.0,
            appearance: true,
            seed: 7,
        }
    }
}

impl ScenarioConfig {
    /// The occlusion-heavy benchmark scenario for one seed.
    pub fn occlusion(seed: u64) -> Self {
        Self {
            regime: MotionRegime::Gait,
            seed,
            ..Self::default()
        }
    }

    /// One target circling the cylinder `turns` times over `frames` frames
    /// with exact detections and no appearance.
    pub fn seam_circuit(turns: f64, frames: usize) -> Self {
        let speed = turns / frames as f64;
        Self {
            n_targets: 1,
            seq_len: frames,
            regime: MotionRegime::Smooth,
            ego_jitter: 0.0,
            speed_min: speed,
            speed_max: speed,
            speed_walk: 0.0,
            start_azimuth: Some(0.5),
            depth_min: 1.0,
            depth_max: 1.0,
            p_miss: 0.0,
            clutter_rate: 0.0,
            jitter_sigma: 0.0,
            score_min: 0.9,
            score_max: 0.9,
            embed_noise: 0.0,
            distortion_gain: 0.0,
            appearance: false,
            ..Self::default()
        }
    }

    /// Exact detections: no misses, clutter, jitter or embedding noise.
    pub fn noiseless(mut self) -> Self {
        self.p_miss = 0.0;
        self.clutter_rate = 0.0;
        self.jitter_sigma = 0.0;
        self.embed_noise = 0.0;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let nonneg = [
            ("gait_amplitude", self.gait_amplitude),
            ("gait_frequency", self.gait_frequency),
            ("pitch_amplitude", self.pitch_amplitude),
            ("pitch_frequency", self.pitch_frequency),
            ("ego_jitter", self.ego_jitter),
            ("speed_min", self.speed_min),
            ("speed_walk", self.speed_walk),
            ("clutter_rate", self.clutter_rate),
            ("jitter_sigma", self.jitter_sigma),
            ("embed_noise", self.embed_noise),
            ("distortion_gain", self.distortion_gain),
        ];
        for (name, v) in nonneg {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::config(format!("{name} must be a non-negative real")));
            }
        }
        if self.seq_len == 0 {
            return Err(Error::config("seq_len must be at least 1"));
        }
        if self.speed_max < self.speed_min {
            return Err(Error::config("speed_max is below speed_min"));
        }
        if !(self.depth_min > 0.0 && self.depth_max >= self.depth_min) {
            return Err(Error::config("depth range must be positive and ordered"));
        }
        if !(self.base_width > 0.0 && self.base_width <= 1.0 && self.base_height > 0.0) {
            return Err(Error::config("base box size out of range"));
        }
        for (name, v) in [
            ("p_miss", self.p_miss),
            ("score_min", self.score_min),
            ("score_max", self.score_max),
            ("clutter_score_max", self.clutter_score_max),
            ("occlusion_iou", self.occlusion_iou),
            ("partial_dim", self.partial_dim),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::config(format!("{name} must lie in [0, 1]")));
            }
        }
        if self.score_max < self.score_min {
            return Err(Error::config("score_max is below score_min"));
        }
        if self.appearance && self.embed_dim == 0 {
            return Err(Error::config("embed_dim must be positive"));
        }
        Ok(())
    }
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// Camera ego-motion at frame `t`: `(vertical offset, pitch)`.
pub fn ego_noise(t: u64, cfg: &ScenarioConfig) -> (f64, f64) {
    let osc = |a: f64, f: f64| a * libm::sin(TAU * (f * t as f64).fract());
    match cfg.regime {
        MotionRegime::Smooth => (0.0, 0.0),
        MotionRegime::Gait | MotionRegime::Pitch => {
            let mut rng = stream(cfg.seed, 1000 + t);
            let (n1, n2) = (normal(&mut rng), normal(&mut rng));
            let j = cfg.ego_jitter;
            if cfg.regime == MotionRegime::Gait {
                (osc(cfg.gait_amplitude, cfg.gait_frequency) + j * n1, 0.1 * j * n2)
            } else {
                (0.1 * j * n1, osc(cfg.pitch_amplitude, cfg.pitch_frequency) + j * n2)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSequence {
    pub gt: Sequence,
    /// `detections[k]` belongs to frame `k + 1`.
    pub detections: Vec<Vec<Detection>>,
    /// True target id of each detection; `None` for clutter.
    pub truth: Vec<Vec<Option<u64>>>,
}

impl SyntheticSequence {
    pub fn frames(&self) -> impl Iterator<Item = (u64, &[Detection])> {
        self.detections
            .iter()
            .enumerate()
            .map(|(k, d)| (k as u64 + 1, d.as_slice()))
    }
}

struct Target {
    cu: f64,
    speed: f64,
    cv: f64,
    depth: f64,
    mean: Vec<f64>,
}

fn unit_vector(dim: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| normal(rng)).collect();
        let n = crate::vector::norm(&v);
        if n > 1e-9 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

pub fn generate(cfg: &ScenarioConfig) -> Result<SyntheticSequence> {
    cfg.validate()?;
    let mut motion = stream(cfg.seed, 0);
    let mut noise = stream(cfg.seed, 1);
    let dim = if cfg.appearance { cfg.embed_dim } else { 0 };
    let shared = unit_vector(dim.max(1), &mut motion);

    let mut targets: Vec<Target> = (0..cfg.n_targets)
        .map(|_| {
            let cu = cfg
                .start_azimuth
                .unwrap_or_else(|| motion.random::<f64>());
            let sign = if motion.random::<bool>() || cfg.start_azimuth.is_some() {
                1.0
            } else {
                -1.0
            };
            let speed = sign * (cfg.speed_min + (cfg.speed_max - cfg.speed_min) * motion.random::<f64>());
            let cv = 0.45 + 0.1 * motion.random::<f64>();
            let depth = cfg.depth_min + (cfg.depth_max - cfg.depth_min) * motion.random::<f64>();
            let mean = if dim > 0 {
                unit_vector(dim, &mut motion)
            } else {
                Vec::new()
            };
            Target {
                cu,
                speed,
                cv,
                depth,
                mean,
            }
        })
        .collect();

    let mut gt_frames = Vec::with_capacity(cfg.seq_len);
    let mut det_frames = Vec::with_capacity(cfg.seq_len);
    let mut truth_frames = Vec::with_capacity(cfg.seq_len);
    for t in 1..=cfg.seq_len as u64 {
        if t > 1 {
            for tg in &mut targets {
                if cfg.speed_walk > 0.0 {
                    let walked = tg.speed + cfg.speed_walk * normal(&mut motion);
                    let mag = walked.abs().clamp(cfg.speed_min, cfg.speed_max);
                    tg.speed = mag * tg.speed.signum();
                }
                tg.cu = wrap_unit(tg.cu + tg.speed);
                if cfg.speed_walk > 0.0 {
                    tg.cv = (tg.cv + 0.2 * cfg.speed_walk * normal(&mut motion)).clamp(0.4, 0.6);
                    let d = tg.depth * (1.0 + 0.5 * cfg.speed_walk * normal(&mut motion));
                    tg.depth = d.clamp(cfg.depth_min, cfg.depth_max);
                }
            }
        }
        let (dz, pitch) = ego_noise(t, cfg);
        let boxes: Vec<PanoBox> = targets
            .iter()
            .map(|tg| {
                let cv = tg.cv + dz + pitch * libm::cos(TAU * tg.cu);
                PanoBox::clamped(
                    tg.cu,
                    cv,
                    (cfg.base_width / tg.depth).min(1.0),
                    (cfg.base_height / tg.depth).min(1.0),
                )
            })
            .collect();

        // Nearest first; a target hidden behind a nearer visible one drops out.
        let mut order: Vec<usize> = (0..targets.len()).collect();
        order.sort_by(|&a, &b| targets[a].depth.total_cmp(&targets[b].depth).then(a.cmp(&b)));
        let mut visible: Vec<usize> = Vec::new();
        let mut dim_factor = vec![1.0; targets.len()];
        for &i in &order {
            let worst = visible
                .iter()
                .map(|&j| cyclic_iou(&boxes[i], &boxes[j]))
                .fold(0.0, f64::max);
            if worst > cfg.occlusion_iou {
                continue;
            }
            if worst > 0.1 {
                dim_factor[i] = cfg.partial_dim;
            }
            visible.push(i);
        }
        visible.sort_unstable();

        let gt: Vec<Labeled> = visible
            .iter()
            .map(|&i| Labeled::new(i as u64 + 1, boxes[i]))
            .collect();

        let mut dets: Vec<(Detection, Option<u64>)> = Vec::new();
        for &i in &visible {
            if noise.random::<f64>() < cfg.p_miss {
                continue;
            }
            let b = boxes[i];
            let bbox = if cfg.jitter_sigma > 0.0 {
                let j = cfg.jitter_sigma;
                PanoBox::clamped(
                    b.cu() + j * b.w() * normal(&mut noise),
                    b.cv() + j * b.h() * normal(&mut noise),
                    b.w() * libm::exp(j * normal(&mut noise)),
                    b.h() * libm::exp(j * normal(&mut noise)),
                )
            } else {
                b
            };
            let base = cfg.score_min + (cfg.score_max - cfg.score_min) * noise.random::<f64>();
            let score = (base * dim_factor[i]).clamp(0.0, 1.0);
            let embedding = if dim > 0 {
                let sigma = cfg.embed_noise / (dim as f64).sqrt();
                let shift = cfg.distortion_gain * (b.cv() - 0.5).abs();
                targets[i]
                    .mean
                    .iter()
                    .zip(&shared)
                    .map(|(m, s)| m + sigma * normal(&mut noise) + shift * s)
                    .collect()
            } else {
                Vec::new()
            };
            dets.push((Detection::new(bbox, score, embedding), Some(i as u64 + 1)));
        }
        if cfg.clutter_rate > 0.0 {
            let n = poisson(&mut noise, cfg.clutter_rate);
            for _ in 0..n {
                let depth =
                    cfg.depth_min + (cfg.depth_max - cfg.depth_min) * noise.random::<f64>();
                let bbox = PanoBox::clamped(
                    noise.random::<f64>(),
                    0.3 + 0.4 * noise.random::<f64>(),
                    cfg.base_width / depth,
                    cfg.base_height / depth,
                );
                let score = cfg.clutter_score_max * noise.random::<f64>();
                let embedding = if dim > 0 {
                    unit_vector(dim, &mut noise)
                } else {
                    Vec::new()
                };
                dets.push((Detection::new(bbox, score, embedding), None));
            }
        }
        // Fisher-Yates so detection order carries no identity.
        for k in (1..dets.len()).rev() {
            let j = noise.random_range(0..=k);
            dets.swap(k, j);
        }
        let (d, tr): (Vec<Detection>, Vec<Option<u64>>) = dets.into_iter().unzip();
        gt_frames.push(gt);
        det_frames.push(d);
        truth_frames.push(tr);
    }

    Ok(SyntheticSequence {
        gt: Sequence::new(gt_frames)?,
        detections: det_frames,
        truth: truth_frames,
    })
}
