//! Space-to-channel reshuffle: each 2x2xC block becomes one 1x1x4C pixel.
//!
//! Sub-pixel order is top-left, top-right, bottom-left, bottom-right, each
//! carrying its C channels contiguously.

use std::rc::Rc;

use super::{Bijection, FlowCtx};
use crate::ndtensor::{Tensor, Var};
use crate::{Error, Result};

fn check_even(shape: &[usize]) -> Result<()> {
    if shape.len() != 4 {
        return Err(Error::Input(format!("squeeze expects [N, H, W, C], got {shape:?}")));
    }
    if shape[1] % 2 != 0 || shape[2] % 2 != 0 {
        return Err(Error::Input(format!(
            "squeeze needs even spatial extents, got {}x{}",
            shape[1], shape[2]
        )));
    }
    Ok(())
}

/// Source index (into the unsqueezed tensor) of every squeezed element.
pub fn squeeze_index(n: usize, h: usize, w: usize, c: usize) -> Vec<usize> {
    let (h2, w2, c4) = (h / 2, w / 2, 4 * c);
    let mut idx = Vec::with_capacity(n * h * w * c);
    for b in 0..n {
        for i in 0..h2 {
            for j in 0..w2 {
                for q in 0..4 {
                    let (y, x) = (2 * i + q / 2, 2 * j + q % 2);
                    for ch in 0..c {
                        idx.push(((b * h + y) * w + x) * c + ch);
                    }
                }
            }
        }
    }
    debug_assert_eq!(idx.len(), n * h2 * w2 * c4);
    idx
}

/// Inverse permutation of [`squeeze_index`], indexed by unsqueezed position.
pub fn unsqueeze_index(n: usize, h: usize, w: usize, c: usize) -> Vec<usize> {
    let fwd = squeeze_index(n, h, w, c);
    let mut inv = vec![0; fwd.len()];
    for (dst, &src) in fwd.iter().enumerate() {
        inv[src] = dst;
    }
    inv
}

pub fn squeeze_tensor(x: &Tensor) -> Result<Tensor> {
    let s = x.shape();
    check_even(s)?;
    let idx = squeeze_index(s[0], s[1], s[2], s[3]);
    let data = idx.iter().map(|&i| x.data()[i]).collect();
    Ok(Tensor::new(vec![s[0], s[1] / 2, s[2] / 2, 4 * s[3]], data)?)
}

pub fn unsqueeze_tensor(x: &Tensor) -> Result<Tensor> {
    let s = x.shape();
    if s.len() != 4 || s[3] % 4 != 0 {
        return Err(Error::Input(format!("unsqueeze expects channels divisible by 4, got {s:?}")));
    }
    let (h, w, c) = (2 * s[1], 2 * s[2], s[3] / 4);
    let idx = unsqueeze_index(s[0], h, w, c);
    let data = idx.iter().map(|&i| x.data()[i]).collect();
    Ok(Tensor::new(vec![s[0], h, w, c], data)?)
}

pub fn squeeze<'t>(x: Var<'t>) -> Result<Var<'t>> {
    let s = x.shape();
    check_even(&s)?;
    let idx = squeeze_index(s[0], s[1], s[2], s[3]);
    Ok(x.gather(Rc::new(idx), vec![s[0], s[1] / 2, s[2] / 2, 4 * s[3]])?)
}

pub fn unsqueeze<'t>(x: Var<'t>) -> Result<Var<'t>> {
    let s = x.shape();
    if s.len() != 4 || s[3] % 4 != 0 {
        return Err(Error::Input(format!("unsqueeze expects channels divisible by 4, got {s:?}")));
    }
    let (h, w, c) = (2 * s[1], 2 * s[2], s[3] / 4);
    let idx = unsqueeze_index(s[0], h, w, c);
    Ok(x.gather(Rc::new(idx), vec![s[0], h, w, c])?)
}

/// Squeeze as a volume-preserving bijection (log-det 0).
#[derive(Debug, Clone, Copy, Default)]
pub struct Squeeze;

impl Bijection for Squeeze {
    fn forward<'t>(&self, ctx: &mut FlowCtx<'_, 't>, x: Var<'t>) -> Result<(Var<'t>, Var<'t>)> {
        let n = x.value().batch();
        Ok((squeeze(x)?, ctx.tape.constant(Tensor::zeros(&[n]))))
    }

    fn inverse<'t>(&self, _ctx: &mut FlowCtx<'_, 't>, y: Var<'t>) -> Result<Var<'t>> {
        unsqueeze(y)
    }
}
