//! Constant-velocity Kalman filter over `[cu, cv, w, h]` with a wrapping
//! azimuth component.

use nalgebra::{SMatrix, SVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{wrap_unit, Geometry, PanoBox};

pub type StateVector = SVector<f64, 8>;
pub type StateCovariance = SMatrix<f64, 8, 8>;
type MeasurementMatrix = SMatrix<f64, 4, 8>;

/// Process noise standard deviations, per frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProcessNoise {
    pub position: f64,
    pub velocity: f64,
}

impl Default for ProcessNoise {
    fn default() -> Self {
        Self {
            position: 4e-3,
            velocity: 5e-4,
        }
    }
}

/// Measurement noise standard deviation, shared by all four box components.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeasurementNoise {
    pub std: f64,
}

impl Default for MeasurementNoise {
    fn default() -> Self {
        Self { std: 1e-2 }
    }
}

/// Kalman state `[cu, cv, w, h, d_cu, d_cv, d_w, d_h]` with covariance.
#[derive(Debug, Clone, PartialEq)]
pub struct CyclicKalmanState {
    pub mean: StateVector,
    pub covariance: StateCovariance,
}

fn measurement_matrix() -> MeasurementMatrix {
    let mut h = MeasurementMatrix::zeros();
    for i in 0..4 {
        h[(i, i)] = 1.0;
    }
    h
}

fn symmetrize(p: &mut StateCovariance) {
    let t = p.transpose();
    *p = (*p + t) * 0.5;
}

impl CyclicKalmanState {
    /// Starts a track at `b` with zero velocity.
    pub fn from_box(b: &PanoBox) -> Self {
        Self::with_velocity(b, [0.0; 4])
    }

    pub fn with_velocity(b: &PanoBox, velocity: [f64; 4]) -> Self {
        let [cu, cv, w, h] = b.to_array();
        let mean = StateVector::from_column_slice(&[
            cu,
            cv,
            w,
            h,
            velocity[0],
            velocity[1],
            velocity[2],
            velocity[3],
        ]);
        let pos_var = 1e-4;
        let vel_var = 1e-4;
        let mut covariance = StateCovariance::zeros();
        for i in 0..4 {
            covariance[(i, i)] = pos_var;
            covariance[(i + 4, i + 4)] = vel_var;
        }
        Self { mean, covariance }
    }

    /// Box at the current mean, clamped into the valid domain.
    pub fn to_box(&self) -> PanoBox {
        PanoBox::clamped(self.mean[0], self.mean[1], self.mean[2], self.mean[3])
    }

    pub fn predict(&self, noise: &ProcessNoise) -> Self {
        kalman_predict(self, noise)
    }

    pub fn update(&self, z: &PanoBox, noise: &MeasurementNoise) -> Result<Self> {
        kalman_update(self, z, noise)
    }
}

/// Constant-velocity propagation by one frame.
pub fn kalman_predict(state: &CyclicKalmanState, noise: &ProcessNoise) -> CyclicKalmanState {
    let mut f = StateCovariance::identity();
    for i in 0..4 {
        f[(i, i + 4)] = 1.0;
    }
    let mut q = StateCovariance::zeros();
    for i in 0..4 {
        q[(i, i)] = noise.position * noise.position;
        q[(i + 4, i + 4)] = noise.velocity * noise.velocity;
    }
    let mut mean = f * state.mean;
    mean[0] = wrap_unit(mean[0]);
    let mut covariance = f * state.covariance * f.transpose() + q;
    symmetrize(&mut covariance);
    CyclicKalmanState { mean, covariance }
}

/// Measurement update; the azimuth innovation is the wrapped displacement.
pub fn kalman_update(
    state: &CyclicKalmanState,
    z: &PanoBox,
    noise: &MeasurementNoise,
) -> Result<CyclicKalmanState> {
    kalman_update_with(state, z, noise, Geometry::Cyclic)
}

/// Measurement update under an explicit azimuth topology.
pub fn kalman_update_with(
    state: &CyclicKalmanState,
    z: &PanoBox,
    noise: &MeasurementNoise,
    geometry: Geometry,
) -> Result<CyclicKalmanState> {
    let zv = z.to_array();
    if zv.iter().any(|x| !x.is_finite()) {
        return Err(Error::input("non-finite measurement"));
    }
    let h = measurement_matrix();
    let r = SMatrix::<f64, 4, 4>::identity() * (noise.std * noise.std);
    let innovation = SVector::<f64, 4>::from_column_slice(&[
        geometry.azimuth_delta(zv[0], state.mean[0]),
        zv[1] - state.mean[1],
        zv[2] - state.mean[2],
        zv[3] - state.mean[3],
    ]);
    let p = &state.covariance;
    let s = h * p * h.transpose() + r;
    let s_inv = s
        .try_inverse()
        .ok_or_else(|| Error::input("singular innovation covariance"))?;
    let gain = p * h.transpose() * s_inv;

    let mut mean = state.mean + gain * innovation;
    mean[0] = wrap_unit(mean[0]);

    // Joseph form keeps the posterior symmetric positive definite.
    let i_kh = StateCovariance::identity() - gain * h;
    let mut covariance = i_kh * p * i_kh.transpose() + gain * r * gain.transpose();
    symmetrize(&mut covariance);
    Ok(CyclicKalmanState { mean, covariance })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn state(cu: f64, d_cu: f64) -> CyclicKalmanState {
        CyclicKalmanState::with_velocity(
            &PanoBox::new(cu, 0.5, 0.05, 0.2).unwrap(),
            [d_cu, 0.0, 0.0, 0.0],
        )
    }

    #[test]
    fn predict_wraps_across_seam() {
        let s = state(0.99, 0.02).predict(&ProcessNoise::default());
        assert!((s.mean[0] - 0.01).abs() < 1e-12);
    }

    #[test]
    fn predict_zero_velocity_grows_covariance() {
        let s0 = state(0.4, 0.0);
        let s1 = s0.predict(&ProcessNoise::default());
        assert_eq!(s1.mean[0], 0.4);
        assert_eq!(s1.mean[1], 0.5);
        for i in 0..8 {
            assert!(s1.covariance[(i, i)] > s0.covariance[(i, i)]);
        }
    }

    #[test]
    fn ten_predicts_make_a_full_loop() {
        let mut s = state(0.0, 0.1);
        for _ in 0..10 {
            s = s.predict(&ProcessNoise::default());
        }
        // 10 x 0.1 accumulates rounding; either side of the seam is "0"
        assert!(crate::geometry::wrap_delta(s.mean[0], 0.0).abs() < 1e-12);
    }

    #[test]
    fn update_with_predicted_box_keeps_mean() {
        let s = state(0.3, 0.01).predict(&ProcessNoise::default());
        let z = s.to_box();
        let post = s.update(&z, &MeasurementNoise::default()).unwrap();
        for i in 0..8 {
            assert!((post.mean[i] - s.mean[i]).abs() < 1e-9);
            assert!(post.covariance[(i, i)] <= s.covariance[(i, i)]);
        }
        assert!(post.covariance[(0, 0)] < s.covariance[(0, 0)]);
    }

    #[test]
    fn update_uses_wrapped_innovation() {
        let s = state(0.99, 0.0);
        let z = PanoBox::new(0.01, 0.5, 0.05, 0.2).unwrap();
        let post = s.update(&z, &MeasurementNoise::default()).unwrap();
        // moved forward across the seam, not backwards through the panorama
        let moved = crate::geometry::wrap_delta(post.mean[0], 0.99);
        assert!(moved > 0.0 && moved <= 0.02);
        assert!((0.0..1.0).contains(&post.mean[0]));
    }

    #[test]
    fn covariance_stays_symmetric() {
        let mut s = state(0.2, 0.03);
        for k in 0..40 {
            s = s.predict(&ProcessNoise::default());
            let z = PanoBox::new(0.2 + 0.03 * (k + 1) as f64, 0.5, 0.05, 0.2).unwrap();
            s = s.update(&z, &MeasurementNoise::default()).unwrap();
            for i in 0..8 {
                assert!(s.covariance[(i, i)] > 0.0);
                for j in 0..8 {
                    assert!((s.covariance[(i, j)] - s.covariance[(j, i)]).abs() < 1e-9);
                }
            }
        }
    }
}
