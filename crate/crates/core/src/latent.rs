//! Latent-space manipulations of a trained flow.
//!
//! Inputs and outputs here live in model space (after preprocessing); use
//! [`pixels_to_model`] and [`model_to_pixels`] at the edges.

use std::f64::consts::FRAC_PI_4;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::datapipe::{dequantize_center, inverse_logit, logit_transform, pixels_from_continuous};
use crate::flow::{FlowModel, Latent};
use crate::ndtensor::Tensor;
use crate::{Error, Result};

/// Fractions of latent dimensions kept by default in [`compress`].
pub const DEFAULT_KEEP_FRACTIONS: [f64; 5] = [1.0, 0.5, 0.25, 0.125, 0.0625];

/// Deterministic preprocessing for manipulation: cell-centre dequantization
/// followed by the logit map.
pub fn pixels_to_model(pixels: &Tensor) -> Result<Tensor> {
    Ok(logit_transform(&dequantize_center(pixels))?.0)
}

/// Inverse logit, floor and clamp to 8-bit.
pub fn model_to_pixels(u: &Tensor) -> Vec<u8> {
    pixels_from_continuous(&inverse_logit(u))
}

/// The default manifold grid: every multiple of pi/4 for both angles.
pub fn default_angles() -> Vec<f64> {
    (0..8).map(|k| k as f64 * FRAC_PI_4).collect()
}

/// `cos(phi) (cos(phi') z1 + sin(phi') z2) + sin(phi) (cos(phi') z3 + sin(phi') z4)`
pub fn manifold_point(z: [&Tensor; 4], phi: f64, phi_p: f64) -> Result<Tensor> {
    let (a, b) = (phi.cos(), phi.sin());
    let (c, d) = (phi_p.cos(), phi_p.sin());
    let w = [a * c, a * d, b * c, b * d];
    let mut out = z[0].map(|v| w[0] * v);
    for (k, zk) in z.iter().enumerate().skip(1) {
        out = out.zip_map(zk, |acc, v| acc + w[k] * v)?;
    }
    Ok(out)
}

/// Decode the manifold spanned by the codes of four inputs `[4, H, W, C]`.
/// Returns `[phis.len() * phi_primes.len(), H, W, C]`, row-major in `phi`.
pub fn interpolate(
    model: &FlowModel,
    inputs: &Tensor,
    phis: &[f64],
    phi_primes: &[f64],
    cond: Option<&Tensor>,
) -> Result<Tensor> {
    if inputs.rank() != 4 || inputs.batch() != 4 {
        return Err(Error::Input(format!(
            "interpolation needs exactly four inputs, got shape {:?}",
            inputs.shape()
        )));
    }
    let (latent, _) = model.encode(inputs, cond)?;
    let flat = latent.to_flat();
    let codes: Vec<Tensor> = (0..4).map(|i| flat.sample(i)).collect();
    let mut points = Vec::with_capacity(phis.len() * phi_primes.len());
    for &phi in phis {
        for &phi_p in phi_primes {
            points.push(manifold_point([&codes[0], &codes[1], &codes[2], &codes[3]], phi, phi_p)?);
        }
    }
    let grid = Tensor::stack(&points)?;
    let shapes: Vec<[usize; 3]> = latent
        .parts
        .iter()
        .map(|p| [p.shape()[1], p.shape()[2], p.shape()[3]])
        .collect();
    let grid_cond = cond.map(|c| repeat_rows(&c.sample(0), points.len()));
    model.decode(&Latent::from_flat(&grid, &shapes)?, grid_cond.as_ref())
}

fn repeat_rows(row: &Tensor, n: usize) -> Tensor {
    let k = row.numel();
    Tensor::from_fn(&[n, k], |i| row.data()[i % k])
}

/// Fractions reachable by keeping whole scales, coarsest first, ascending.
pub fn achievable_fractions(model: &FlowModel) -> Vec<f64> {
    let sizes: Vec<usize> = model.factored_shapes().iter().map(|s| s.iter().product()).collect();
    let total: usize = sizes.iter().sum();
    let mut out = vec![0.0];
    let mut kept = 0;
    for s in sizes.iter().rev() {
        kept += s;
        out.push(kept as f64 / total as f64);
    }
    out
}

/// Number of coarsest scales that make up `fraction` of the latent dims.
fn scales_for_fraction(model: &FlowModel, fraction: f64) -> Result<usize> {
    let achievable = achievable_fractions(model);
    achievable
        .iter()
        .position(|&f| (f - fraction).abs() < 1e-9)
        .ok_or_else(|| {
            Error::Input(format!(
                "keep fraction {fraction} is not achievable with this scale structure; achievable: {achievable:?}"
            ))
        })
}

/// For every fraction, keep the coarsest latents that make up that fraction
/// of the dimensions, resample the rest from the prior, and decode. Returns
/// one `[N, H, W, C]` tensor per fraction.
pub fn compress(
    model: &FlowModel,
    inputs: &Tensor,
    fractions: &[f64],
    seed: u64,
    cond: Option<&Tensor>,
) -> Result<Vec<Tensor>> {
    let counts = fractions
        .iter()
        .map(|&f| scales_for_fraction(model, f))
        .collect::<Result<Vec<_>>>()?;
    let (latent, _) = model.encode(inputs, cond)?;
    let shapes = model.factored_shapes();
    let n = inputs.batch();
    let levels = shapes.len();
    counts
        .iter()
        .enumerate()
        .map(|(i, &keep)| {
            let fresh = Latent::sample_prior(n, &shapes, seed.wrapping_add(i as u64));
            let parts = (0..levels)
                .map(|j| {
                    if j >= levels - keep {
                        latent.parts[j].clone()
                    } else {
                        fresh.parts[j].clone()
                    }
                })
                .collect();
            model.decode(&Latent { parts }, cond)
        })
        .collect()
}

/// Samples at `factor` times the training resolution.
pub fn extrapolate(model: &FlowModel, factor: usize, n: usize, seed: u64, cond: Option<&Tensor>) -> Result<Tensor> {
    if factor == 0 {
        return Err(Error::Input("extrapolation factor must be at least 1".into()));
    }
    let cfg = model.config();
    let (h, w) = (cfg.height * factor, cfg.width * factor);
    // validates the whole shape chain before any decoding
    let shapes = cfg.level_shapes(h, w)?;
    let dims: usize = cfg.factored_shapes(h, w)?.iter().map(|s| s.iter().product::<usize>()).sum();
    debug_assert_eq!(dims, h * w * cfg.channels);
    debug_assert_eq!(shapes.len(), cfg.levels);
    model.sample_at(h, w, n, seed, cond)
}

/// `g(f(x; y); y')`.
pub fn attribute_transfer(model: &FlowModel, inputs: &Tensor, y: &Tensor, y_new: &Tensor) -> Result<Tensor> {
    if model.config().cond_dim == 0 {
        return Err(Error::Config("attribute transfer needs a conditional model (cond_dim > 0)".into()));
    }
    if y.shape() != y_new.shape() {
        return Err(Error::Input(format!(
            "attribute shapes differ: {:?} vs {:?}",
            y.shape(),
            y_new.shape()
        )));
    }
    let (latent, _) = model.encode(inputs, Some(y))?;
    model.decode(&latent, Some(y_new))
}

/// Rows of `y` shuffled within the batch.
pub fn shuffle_attributes(y: &Tensor, seed: u64) -> Tensor {
    let n = y.batch();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let rows: Vec<Tensor> = order.iter().map(|&i| y.sample(i)).collect();
    Tensor::stack(&rows).expect("same row shapes")
}
