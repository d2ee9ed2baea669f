//! Weight initialization.

use ndarray::ArrayD;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Kaiming (He) normal initialization: N(0, sqrt(2 / fan_in)).
///
/// Samples via Box-Muller on the seeded stream so initialization is
/// reproducible across platforms.
pub fn kaiming_normal(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> ArrayD<f32> {
    let std = (2.0 / fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    let mut data = Vec::with_capacity(n);
    while data.len() < n {
        let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
        let u2: f64 = rng.gen_range(0.0..1.0);
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        data.push((r * theta.cos() * std) as f32);
        if data.len() < n {
            data.push((r * theta.sin() * std) as f32);
        }
    }
    ArrayD::from_shape_vec(shape.to_vec(), data).unwrap()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn statistics_match_fan_in() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let w = kaiming_normal(&mut rng, &[64, 128], 128);
        let n = w.len() as f64;
        let mean = w.iter().map(|&v| v as f64).sum::<f64>() / n;
        let var = w.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
        let expected = 2.0 / 128.0;
        assert!(mean.abs() < 0.01, "mean {mean}");
        assert!((var - expected).abs() / expected < 0.1, "var {var}");
    }

    #[test]
    fn seeded_and_deterministic() {
        let a = kaiming_normal(&mut ChaCha8Rng::seed_from_u64(5), &[10, 10], 10);
        let b = kaiming_normal(&mut ChaCha8Rng::seed_from_u64(5), &[10, 10], 10);
        assert_eq!(a, b);
    }
}
