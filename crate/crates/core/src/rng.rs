//! Samplers built only from uniform draws, IEEE arithmetic and the pure-Rust
//! `libm` functions, so every platform produces the same bits.

use rand::Rng;

/// Standard normal draw by Box-Muller, one uniform pair per sample.
pub fn normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    let u1 = 1.0 - rng.random::<f64>();
    let u2 = rng.random::<f64>();
    libm::sqrt(-2.0 * libm::log(u1)) * libm::cos(std::f64::consts::TAU * u2)
}

/// Poisson draw by multiplying uniforms, in chunks of rate at most 16.
pub fn poisson<R: Rng + ?Sized>(rng: &mut R, rate: f64) -> u64 {
    const CHUNK: f64 = 16.0;
    let mut left = rate.max(0.0);
    let mut count = 0;
    while left > 0.0 {
        let lam = left.min(CHUNK);
        left -= lam;
        let limit = libm::exp(-lam);
        let mut p = rng.random::<f64>();
        while p > limit {
            count += 1;
            p *= rng.random::<f64>();
        }
    }
    count
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn moments(xs: &[f64]) -> (f64, f64) {
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        (mean, var)
    }

    #[test]
    fn normal_moments() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let xs: Vec<f64> = (0..100_000).map(|_| normal(&mut rng)).collect();
        let (m, v) = moments(&xs);
        assert!(m.abs() < 0.02, "{m}");
        assert!((v - 1.0).abs() < 0.02, "{v}");
    }

    #[test]
    fn poisson_moments() {
        for rate in [0.3, 1.0, 5.0, 40.0] {
            let mut rng = ChaCha8Rng::seed_from_u64(2);
            let xs: Vec<f64> = (0..50_000).map(|_| poisson(&mut rng, rate) as f64).collect();
            let (m, v) = moments(&xs);
            assert!((m - rate).abs() < 0.05 * rate.max(1.0), "{rate}: {m}");
            assert!((v - rate).abs() < 0.1 * rate.max(1.0), "{rate}: {v}");
        }
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        assert_eq!(poisson(&mut rng, 0.0), 0);
    }
}
