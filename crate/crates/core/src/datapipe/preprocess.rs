use rand::Rng;

use crate::ndtensor::Tensor;
use crate::{Error, Result};

/// Boundary margin of the logit map.
pub const LOGIT_ALPHA: f64 = 0.05;

/// `pixel + u` with `u ~ Uniform[0, 1)` drawn independently per component.
pub fn dequantize(pixels: &Tensor, rng: &mut impl Rng) -> Tensor {
    let data = pixels.data().iter().map(|&p| p + rng.random::<f64>()).collect();
    Tensor::new(pixels.shape().to_vec(), data).expect("same shape")
}

/// Deterministic dequantization to the cell centre, `pixel + 0.5`.
pub fn dequantize_center(pixels: &Tensor) -> Tensor {
    pixels.map(|p| p + 0.5)
}

/// `u = logit(alpha + (1 - alpha) * x / 256)` with its per-sample
/// log-determinant `sum_i [ln(1-alpha) - ln 256 - ln p_i - ln(1-p_i)]`.
pub fn logit_transform(x: &Tensor) -> Result<(Tensor, Tensor)> {
    if let Some(&bad) = x.data().iter().find(|&&v| !(0.0..256.0).contains(&v)) {
        return Err(Error::Input(format!("logit transform input {bad} outside [0, 256)")));
    }
    let a = LOGIT_ALPHA;
    let n = x.batch();
    let k = x.per_sample();
    let const_term = (1.0 - a).ln() - 256f64.ln();
    let mut u = Vec::with_capacity(x.numel());
    let mut log_det = vec![0.0; n];
    for (i, &v) in x.data().iter().enumerate() {
        let p = a + (1.0 - a) * v / 256.0;
        u.push((p / (1.0 - p)).ln());
        log_det[i / k] += const_term - p.ln() - (1.0 - p).ln();
    }
    Ok((Tensor::new(x.shape().to_vec(), u)?, Tensor::new(vec![n], log_det)?))
}

/// Exact inverse of [`logit_transform`].
pub fn inverse_logit(u: &Tensor) -> Tensor {
    let a = LOGIT_ALPHA;
    u.map(|v| {
        let p = 1.0 / (1.0 + (-v).exp());
        (p - a) / (1.0 - a) * 256.0
    })
}

/// Display mapping from continuous pixel space: floor, clamp to `[0, 255]`.
pub fn pixels_from_continuous(x: &Tensor) -> Vec<u8> {
    x.data()
        .iter()
        .map(|&v| if v.is_nan() { 0 } else { v.floor().clamp(0.0, 255.0) as u8 })
        .collect()
}

/// Negative log-likelihood in bits per dimension, including the
/// preprocessing log-determinant. Uniform noise on `[0, 256)^D` scores 8.
pub fn bits_per_dim(log_lik_u: f64, logit_log_det: f64, dims: usize) -> f64 {
    -(log_lik_u + logit_log_det) / (dims as f64 * std::f64::consts::LN_2)
}

/// Reverse the width axis of every sample of `[N, H, W, C]` whose flag is set.
pub fn horizontal_flip(x: &Tensor, apply: &[bool]) -> Result<Tensor> {
    let s = x.shape();
    if s.len() != 4 || apply.len() != s[0] {
        return Err(Error::Input(format!(
            "flip expects [N, H, W, C] with one flag per sample, got {s:?} and {} flags",
            apply.len()
        )));
    }
    let (h, w, c) = (s[1], s[2], s[3]);
    let mut out = x.clone();
    let src = x.data();
    let dst = out.data_mut();
    for (n, &flip) in apply.iter().enumerate() {
        if !flip {
            continue;
        }
        for i in 0..h {
            for j in 0..w {
                let from = ((n * h + i) * w + (w - 1 - j)) * c;
                let to = ((n * h + i) * w + j) * c;
                dst[to..to + c].copy_from_slice(&src[from..from + c]);
            }
        }
    }
    Ok(out)
}

/// One fair coin per sample.
pub fn random_flips(n: usize, rng: &mut impl Rng) -> Vec<bool> {
    (0..n).map(|_| rng.random_bool(0.5)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn jitter_stays_in_cell() {
        let px = Tensor::from_fn(&[4, 2, 2, 1], |i| (i * 17 % 256) as f64);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = dequantize(&px, &mut rng);
        for (a, b) in px.data().iter().zip(x.data()) {
            assert!(*b >= *a && *b < a + 1.0);
        }
        let mut rng2 = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(dequantize(&px, &mut rng2), x);
    }

    #[test]
    fn jitter_mean_is_half() {
        let n = 100_000;
        let px = Tensor::zeros(&[n, 1, 1, 1]);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mean = dequantize(&px, &mut rng).sum() / n as f64;
        // sd of the mean of U[0,1) draws
        let sigma = (1.0f64 / 12.0 / n as f64).sqrt();
        assert!((mean - 0.5).abs() < 3.0 * sigma, "mean {mean}");
    }

    #[test]
    fn logit_reference_values() {
        let x = Tensor::new(vec![1, 2], vec![0.0, 128.0]).unwrap();
        let (u, _) = logit_transform(&x).unwrap();
        assert!((u.data()[0] - (0.05f64 / 0.95).ln()).abs() < 1e-12);
        assert!((u.data()[0] + 2.94444).abs() < 1e-5);
        assert!((u.data()[1] - (0.525f64 / 0.475).ln()).abs() < 1e-12);
        assert!((u.data()[1] - 0.10008).abs() < 1e-5);
    }

    #[test]
    fn logit_log_det_matches_numeric_derivative() {
        let x = Tensor::from_fn(&[3, 5], |i| (i as f64 * 37.3) % 255.0 + 0.3);
        let (_, ld) = logit_transform(&x).unwrap();
        let h = 1e-5;
        for s in 0..3 {
            let mut numeric = 0.0;
            for j in 0..5 {
                let v = x.data()[s * 5 + j];
                let f = |v: f64| {
                    let p = LOGIT_ALPHA + (1.0 - LOGIT_ALPHA) * v / 256.0;
                    (p / (1.0 - p)).ln()
                };
                numeric += ((f(v + h) - f(v - h)) / (2.0 * h)).ln();
            }
            assert!((ld.data()[s] - numeric).abs() < 1e-6);
        }
    }

    #[test]
    fn logit_rejects_out_of_range() {
        assert!(logit_transform(&Tensor::new(vec![1, 1], vec![256.0]).unwrap()).is_err());
        assert!(logit_transform(&Tensor::new(vec![1, 1], vec![-0.1]).unwrap()).is_err());
    }

    #[test]
    fn logit_inverts() {
        let x = Tensor::from_fn(&[2, 8], |i| i as f64 * 15.9 + 0.01);
        let (u, _) = logit_transform(&x).unwrap();
        assert!(inverse_logit(&u).max_abs_diff(&x).unwrap() < 1e-9);
    }

    #[test]
    fn uniform_density_is_eight_bits() {
        let d = 12;
        let ll = -(d as f64) * 256f64.ln();
        assert!((bits_per_dim(ll, 0.0, d) - 8.0).abs() < 1e-12);
        // doubling the density removes exactly one bit in total
        let doubled = bits_per_dim(ll + 2f64.ln(), 0.0, d);
        assert!(((8.0 - doubled) * d as f64 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn flip_reverses_width() {
        let x = Tensor::new(vec![1, 1, 2, 1], vec![3.0, 9.0]).unwrap();
        let y = horizontal_flip(&x, &[true]).unwrap();
        assert_eq!(y.data(), &[9.0, 3.0]);
        assert_eq!(horizontal_flip(&y, &[true]).unwrap(), x);
        assert_eq!(horizontal_flip(&x, &[false]).unwrap(), x);
    }

    #[test]
    fn flip_is_involution_on_random_batches() {
        let x = Tensor::from_fn(&[3, 4, 5, 2], |i| (i as f64).sin());
        let flags = [true, false, true];
        let y = horizontal_flip(&x, &flags).unwrap();
        assert_eq!(horizontal_flip(&y, &flags).unwrap(), x);
    }

    #[test]
    fn pixel_mapping_clamps() {
        let x = Tensor::new(vec![4], vec![-3.0, 0.7, 254.99, 300.0]).unwrap();
        assert_eq!(pixels_from_continuous(&x), vec![0, 0, 254, 255]);
    }
}
