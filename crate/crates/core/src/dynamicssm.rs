//! Distortion-aware feature refinement block for panoramic feature maps.
//!
//! Four stages, each a pure function on `(C, H, W)` maps:
//!
//! 1. [`estimate_distortion_scale`]: per-location distortion field `D` and
//!    sigmoid scale prior `S` from 1×1 linear maps.
//! 2. [`dynamic_modulate`]: gain `1 + D⊙S`, then fixed 3×3 mean mixing.
//!    Columns wrap (the panorama's azimuth); rows use edge reflection.
//! 3. [`multi_directional`]: average of scalar-state selective scans along
//!    up to four directions.
//! 4. [`fuse`]: channel projection of `residual + Z*`.
//!
//! The scan keeps one scalar state per channel:
//! `Δ = softplus(P_Δ x + b_Δ)`, `h ← exp(a⊙Δ)⊙h + Δ⊙(P_B x)`, `y = P_C h`.

use ndarray::{Array1, Array2, Array3, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::rng::normal;

/// Feature tensor of shape `(C, H, W)`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap(pub Array3<f64>);

impl FeatureMap {
    pub fn new(data: Array3<f64>) -> Result<Self> {
        let (c, h, w) = data.dim();
        if c == 0 || h == 0 || w == 0 {
            return Err(Error::input("feature map dimensions must be positive"));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::input("feature map has non-finite entries"));
        }
        Ok(Self(data))
    }

    pub fn zeros(c: usize, h: usize, w: usize) -> Self {
        Self(Array3::zeros((c, h, w)))
    }

    pub fn constant(c: usize, h: usize, w: usize, v: f64) -> Self {
        Self(Array3::from_elem((c, h, w), v))
    }

    pub fn dim(&self) -> (usize, usize, usize) {
        self.0.dim()
    }

    pub fn channels(&self) -> usize {
        self.0.dim().0
    }
}

/// Per-location affine map over channels (a 1×1 convolution).
#[derive(Debug, Clone, PartialEq)]
pub struct LinearMap {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl LinearMap {
    pub fn identity(c: usize) -> Self {
        Self {
            weight: Array2::eye(c),
            bias: Array1::zeros(c),
        }
    }

    pub fn zeros(c: usize) -> Self {
        Self {
            weight: Array2::zeros((c, c)),
            bias: Array1::zeros(c),
        }
    }

    fn seeded(c: usize, std: f64, rng: &mut ChaCha8Rng) -> Self {
        Self {
            weight: Array2::from_shape_fn((c, c), |_| std * normal(rng)),
            bias: Array1::zeros(c),
        }
    }

    fn check(&self, c: usize, what: &str) -> Result<()> {
        if self.weight.dim() != (c, c) || self.bias.len() != c {
            return Err(Error::config(format!(
                "{what}: expected {c}x{c} weights, got {:?} with bias {}",
                self.weight.dim(),
                self.bias.len()
            )));
        }
        Ok(())
    }

    fn apply(&self, f: &Array3<f64>) -> Array3<f64> {
        let (c, h, w) = f.dim();
        let flat = f
            .to_shape((c, h * w))
            .expect("contiguous feature map")
            .to_owned();
        let mut out = self.weight.dot(&flat);
        for (mut row, b) in out.axis_iter_mut(Axis(0)).zip(self.bias.iter()) {
            row.mapv_inplace(|v| v + b);
        }
        out.into_shape_with_order((c, h, w)).expect("same element count")
    }

    fn write_to(&self, store: &mut ParamStore, name: &str) {
        store.insert_matrix(&format!("{name}.weight"), &self.weight);
        store.insert_vector(&format!("{name}.bias"), self.bias.as_slice().unwrap());
    }

    fn read_from(store: &ParamStore, name: &str) -> Result<Self> {
        Ok(Self {
            weight: store.matrix(&format!("{name}.weight"))?,
            bias: Array1::from(store.vector(&format!("{name}.bias"))?),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EstimatorWeights {
    pub distortion: LinearMap,
    pub scale: LinearMap,
}

/// Distortion field `D` and scale prior `S ∈ (0, 1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct DistortionScalePair {
    pub distortion: Array3<f64>,
    pub scale: Array3<f64>,
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + libm::exp(-x))
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        libm::log1p(libm::exp(x))
    }
}

pub fn estimate_distortion_scale(
    f: &FeatureMap,
    est: &EstimatorWeights,
) -> Result<DistortionScalePair> {
    let c = f.channels();
    est.distortion.check(c, "distortion estimator")?;
    est.scale.check(c, "scale estimator")?;
    Ok(DistortionScalePair {
        distortion: est.distortion.apply(&f.0),
        scale: est.scale.apply(&f.0).mapv(sigmoid),
    })
}

/// Row index under edge reflection (`-1 → 0`, `H → H-1`).
#[inline]
fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let mut i = i;
    while i < 0 || i >= n {
        i = if i < 0 { -i - 1 } else { 2 * n - i - 1 };
    }
    i as usize
}

#[inline]
fn wrap(i: isize, n: usize) -> usize {
    i.rem_euclid(n as isize) as usize
}

/// 3×3 mean filter with wrapped columns and reflected rows.
pub fn smooth3x3(g: &Array3<f64>) -> Array3<f64> {
    let (c, h, w) = g.dim();
    let mut out = Array3::zeros((c, h, w));
    for ch in 0..c {
        for r in 0..h {
            for col in 0..w {
                let mut acc = 0.0;
                for dr in -1..=1isize {
                    let rr = reflect(r as isize + dr, h);
                    for dc in -1..=1isize {
                        acc += g[(ch, rr, wrap(col as isize + dc, w))];
                    }
                }
                out[(ch, r, col)] = acc / 9.0;
            }
        }
    }
    out
}

/// Distortion-aware refinement `Z = mix3x3(f ⊙ (1 + D⊙S))`.
pub fn dynamic_modulate(ds: &DistortionScalePair, f: &FeatureMap) -> Result<FeatureMap> {
    if ds.distortion.dim() != f.dim() || ds.scale.dim() != f.dim() {
        return Err(Error::input("distortion/scale shape differs from features"));
    }
    let mut gained = f.0.clone();
    ndarray::Zip::from(&mut gained)
        .and(&ds.distortion)
        .and(&ds.scale)
        .for_each(|g, &d, &s| *g *= 1.0 + d * s);
    Ok(FeatureMap(smooth3x3(&gained)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScanDirection {
    LeftToRight,
    RightToLeft,
    TopToBottom,
    BottomToTop,
}

impl ScanDirection {
    /// Fixed order used by [`multi_directional`].
    pub const ORDER: [ScanDirection; 4] = [
        ScanDirection::LeftToRight,
        ScanDirection::RightToLeft,
        ScanDirection::TopToBottom,
        ScanDirection::BottomToTop,
    ];

    pub fn reversed(self) -> Self {
        match self {
            ScanDirection::LeftToRight => ScanDirection::RightToLeft,
            ScanDirection::RightToLeft => ScanDirection::LeftToRight,
            ScanDirection::TopToBottom => ScanDirection::BottomToTop,
            ScanDirection::BottomToTop => ScanDirection::TopToBottom,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SsmParams {
    /// Per-channel decay, strictly negative.
    pub a: Vec<f64>,
    pub delta_proj: LinearMap,
    pub b_proj: Array2<f64>,
    pub c_proj: Array2<f64>,
    /// Number of scan directions: 1, 2 or 4.
    pub directions: usize,
}

impl SsmParams {
    pub fn validate(&self, c: usize) -> Result<()> {
        if self.a.len() != c || self.a.iter().any(|&a| !(a < 0.0)) {
            return Err(Error::config("decay `a` must hold one negative value per channel"));
        }
        if !matches!(self.directions, 1 | 2 | 4) {
            return Err(Error::config(format!(
                "scan directions must be 1, 2 or 4, got {}",
                self.directions
            )));
        }
        self.delta_proj.check(c, "delta projection")?;
        if self.b_proj.dim() != (c, c) || self.c_proj.dim() != (c, c) {
            return Err(Error::config("B/C projections must be CxC"));
        }
        Ok(())
    }

    fn write_to(&self, store: &mut ParamStore) {
        store.insert_vector("ssm.a", &self.a);
        self.delta_proj.write_to(store, "ssm.delta");
        store.insert_matrix("ssm.b", &self.b_proj);
        store.insert_matrix("ssm.c", &self.c_proj);
        store.insert_vector("ssm.directions", &[self.directions as f64]);
    }

    fn read_from(store: &ParamStore) -> Result<Self> {
        Ok(Self {
            a: store.vector("ssm.a")?,
            delta_proj: LinearMap::read_from(store, "ssm.delta")?,
            b_proj: store.matrix("ssm.b")?,
            c_proj: store.matrix("ssm.c")?,
            directions: store.scalar("ssm.directions")? as usize,
        })
    }
}

/// Runs the recurrence over one sequence of channel vectors, writing outputs
/// in visiting order.
fn scan_line(
    p: &SsmParams,
    inputs: impl Iterator<Item = (usize, Vec<f64>)>,
    out: &mut dyn FnMut(usize, &[f64]),
) {
    let c = p.a.len();
    let mut state = vec![0.0; c];
    let mut y = vec![0.0; c];
    for (pos, x) in inputs {
        for k in 0..c {
            let mut pre = p.delta_proj.bias[k];
            let mut drive = 0.0;
            for j in 0..c {
                pre += p.delta_proj.weight[(k, j)] * x[j];
                drive += p.b_proj[(k, j)] * x[j];
            }
            let delta = softplus(pre);
            state[k] = libm::exp(p.a[k] * delta) * state[k] + delta * drive;
        }
        for k in 0..c {
            let mut acc = 0.0;
            for j in 0..c {
                acc += p.c_proj[(k, j)] * state[j];
            }
            y[k] = acc;
        }
        out(pos, &y);
    }
}

/// Selective scan of `z` along one direction.
pub fn directional_scan(z: &FeatureMap, direction: ScanDirection, p: &SsmParams) -> FeatureMap {
    let (c, h, w) = z.dim();
    let src = &z.0;
    let mut out = Array3::zeros((c, h, w));
    let column = |r: usize, col: usize| -> Vec<f64> { (0..c).map(|k| src[(k, r, col)]).collect() };
    match direction {
        ScanDirection::LeftToRight | ScanDirection::RightToLeft => {
            for r in 0..h {
                let order: Vec<usize> = if direction == ScanDirection::LeftToRight {
                    (0..w).collect()
                } else {
                    (0..w).rev().collect()
                };
                scan_line(p, order.into_iter().map(|col| (col, column(r, col))), &mut |col, y| {
                    for k in 0..c {
                        out[(k, r, col)] = y[k];
                    }
                });
            }
        }
        ScanDirection::TopToBottom | ScanDirection::BottomToTop => {
            for col in 0..w {
                let order: Vec<usize> = if direction == ScanDirection::TopToBottom {
                    (0..h).collect()
                } else {
                    (0..h).rev().collect()
                };
                scan_line(p, order.into_iter().map(|r| (r, column(r, col))), &mut |r, y| {
                    for k in 0..c {
                        out[(k, r, col)] = y[k];
                    }
                });
            }
        }
    }
    FeatureMap(out)
}

/// `Z* = (1/L) Σ_d scan_d(z)` over the first `L` directions of
/// [`ScanDirection::ORDER`].
pub fn multi_directional(z: &FeatureMap, p: &SsmParams) -> FeatureMap {
    let mut dirs = ScanDirection::ORDER[..p.directions.clamp(1, 4)].iter();
    let first = *dirs.next().expect("at least one direction");
    let mut acc = directional_scan(z, first, p).0;
    for &d in dirs {
        acc += &directional_scan(z, d, p).0;
    }
    if p.directions > 1 {
        acc.mapv_inplace(|v| v / p.directions as f64);
    }
    FeatureMap(acc)
}

/// Channel projection of `residual + z_star`.
pub fn fuse(residual: &FeatureMap, z_star: &FeatureMap, weights: &LinearMap) -> Result<FeatureMap> {
    if residual.dim() != z_star.dim() {
        return Err(Error::config("residual and refined maps differ in shape"));
    }
    weights.check(residual.channels(), "fusion")?;
    Ok(FeatureMap(weights.apply(&(&residual.0 + &z_star.0))))
}

/// Full four-stage block with its parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct DynamicSsmBlock {
    pub estimator: EstimatorWeights,
    pub ssm: SsmParams,
    /// Residual branch applied to the input before fusion.
    pub residual: LinearMap,
    pub fuse: LinearMap,
}

impl DynamicSsmBlock {
    /// Deterministic small-weight initialization.
    pub fn seeded(channels: usize, directions: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let std = 0.5 / (channels as f64).sqrt();
        let distortion = LinearMap::seeded(channels, std, &mut rng);
        let scale = LinearMap::seeded(channels, std, &mut rng);
        let delta_proj = LinearMap::seeded(channels, std, &mut rng);
        let b_proj = LinearMap::seeded(channels, std, &mut rng).weight;
        let c_proj = LinearMap::seeded(channels, std, &mut rng).weight;
        Self {
            estimator: EstimatorWeights { distortion, scale },
            ssm: SsmParams {
                a: vec![-1.0; channels],
                delta_proj,
                b_proj,
                c_proj,
                directions,
            },
            residual: LinearMap::identity(channels),
            fuse: LinearMap::identity(channels),
        }
    }

    pub fn channels(&self) -> usize {
        self.ssm.a.len()
    }

    pub fn forward(&self, f: &FeatureMap) -> Result<FeatureMap> {
        let c = f.channels();
        self.ssm.validate(c)?;
        self.residual.check(c, "residual branch")?;
        let ds = estimate_distortion_scale(f, &self.estimator)?;
        let z = dynamic_modulate(&ds, f)?;
        let z_star = multi_directional(&z, &self.ssm);
        let residual = FeatureMap(self.residual.apply(&f.0));
        fuse(&residual, &z_star, &self.fuse)
    }

    pub fn to_store(&self) -> ParamStore {
        let mut store = ParamStore::new();
        self.estimator.distortion.write_to(&mut store, "est.distortion");
        self.estimator.scale.write_to(&mut store, "est.scale");
        self.ssm.write_to(&mut store);
        self.residual.write_to(&mut store, "residual");
        self.fuse.write_to(&mut store, "fuse");
        store
    }

    pub fn from_store(store: &ParamStore) -> Result<Self> {
        let block = Self {
            estimator: EstimatorWeights {
                distortion: LinearMap::read_from(store, "est.distortion")?,
                scale: LinearMap::read_from(store, "est.scale")?,
            },
            ssm: SsmParams::read_from(store)?,
            residual: LinearMap::read_from(store, "residual")?,
            fuse: LinearMap::read_from(store, "fuse")?,
        };
        block.ssm.validate(block.channels())?;
        Ok(block)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_features_give_half_scale() {
        let f = FeatureMap::zeros(3, 4, 5);
        let est = EstimatorWeights {
            distortion: LinearMap::zeros(3),
            scale: LinearMap::zeros(3),
        };
        let ds = estimate_distortion_scale(&f, &est).unwrap();
        assert!(ds.distortion.iter().all(|&v| v == 0.0));
        assert!(ds.scale.iter().all(|&v| v == 0.5));
    }

    #[test]
    fn identity_estimator_passes_constant() {
        let f = FeatureMap::constant(2, 3, 3, 0.7);
        let est = EstimatorWeights {
            distortion: LinearMap::identity(2),
            scale: LinearMap::zeros(2),
        };
        let ds = estimate_distortion_scale(&f, &est).unwrap();
        assert!(ds.distortion.iter().all(|&v| v == 0.7));
    }

    #[test]
    fn estimator_shape_mismatch_is_config_error() {
        let f = FeatureMap::zeros(3, 2, 2);
        let est = EstimatorWeights {
            distortion: LinearMap::zeros(4),
            scale: LinearMap::zeros(3),
        };
        assert!(estimate_distortion_scale(&f, &est).unwrap_err().is_config());
    }

    #[test]
    fn single_cell_modulation() {
        let f = FeatureMap::constant(1, 1, 1, 2.0);
        let ds = DistortionScalePair {
            distortion: Array3::from_elem((1, 1, 1), 0.5),
            scale: Array3::from_elem((1, 1, 1), 0.4),
        };
        let z = dynamic_modulate(&ds, &f).unwrap();
        assert!((z.0[(0, 0, 0)] - 2.0 * 1.2).abs() < 1e-15);
    }

    #[test]
    fn reflection_indices() {
        assert_eq!(reflect(-1, 4), 0);
        assert_eq!(reflect(4, 4), 3);
        assert_eq!(reflect(-1, 1), 0);
        assert_eq!(reflect(1, 1), 0);
        assert_eq!(wrap(-1, 5), 4);
        assert_eq!(wrap(5, 5), 0);
    }

    fn params(c: usize, directions: usize) -> SsmParams {
        SsmParams {
            a: vec![-1.0; c],
            delta_proj: LinearMap::identity(c),
            b_proj: Array2::eye(c),
            c_proj: Array2::eye(c),
            directions,
        }
    }

    #[test]
    fn zero_input_is_fixed_point() {
        let z = FeatureMap::zeros(2, 3, 4);
        for d in ScanDirection::ORDER {
            let y = directional_scan(&z, d, &params(2, 1));
            assert!(y.0.iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn directions_validation() {
        assert!(params(2, 3).validate(2).is_err());
        let mut p = params(2, 4);
        p.a[1] = 0.0;
        assert!(p.validate(2).is_err());
        assert!(params(2, 2).validate(2).is_ok());
    }

    #[test]
    fn block_params_round_trip() {
        let b = DynamicSsmBlock::seeded(3, 4, 11);
        let text = b.to_store().to_text();
        let back = DynamicSsmBlock::from_store(&ParamStore::parse(&text).unwrap()).unwrap();
        assert_eq!(back, b);
    }
}
