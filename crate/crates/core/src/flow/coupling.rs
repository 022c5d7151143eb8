use super::{Bijection, FlowCtx, Mask, MaskKind};
use crate::ndtensor::{Tensor, Var};
use crate::{Error, Result};

/// Computes the scale `s` and translation `t` of a coupling from the masked
/// input. Both outputs have the full input shape; values at pass-through
/// positions are ignored.
pub trait Conditioner {
    fn condition<'t>(&self, ctx: &mut FlowCtx<'_, 't>, masked: Var<'t>) -> Result<(Var<'t>, Var<'t>)>;
}

/// Input-independent `s` and `t`. Turns a coupling into a fixed affine map
/// on its non-pass-through coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConstantConditioner {
    pub s: f64,
    pub t: f64,
}

impl Conditioner for ConstantConditioner {
    fn condition<'t>(&self, ctx: &mut FlowCtx<'_, 't>, masked: Var<'t>) -> Result<(Var<'t>, Var<'t>)> {
        let shape = masked.shape();
        Ok((
            ctx.tape.constant(Tensor::full(&shape, self.s)),
            ctx.tape.constant(Tensor::full(&shape, self.t)),
        ))
    }
}

#[derive(Debug, Clone)]
enum MaskSource {
    /// Rebuilt for whatever spatial size the input has.
    Adaptive { kind: MaskKind, parity: u8 },
    Fixed(Mask),
}

/// Affine coupling `y = x * exp(s(b*x) * (1-b)) + t(b*x) * (1-b)`.
///
/// Positions where the mask is 1 are copied bit-exactly; the log-determinant
/// is the sum of `s` over positions where the mask is 0.
#[derive(Debug, Clone)]
pub struct CouplingLayer<C> {
    pub name: String,
    mask: MaskSource,
    pub conditioner: C,
}

impl<C: Conditioner> CouplingLayer<C> {
    pub fn new(name: impl Into<String>, kind: MaskKind, parity: u8, conditioner: C) -> Self {
        Self {
            name: name.into(),
            mask: MaskSource::Adaptive {
                kind,
                parity: parity & 1,
            },
            conditioner,
        }
    }

    pub fn with_mask(name: impl Into<String>, mask: Mask, conditioner: C) -> Self {
        Self {
            name: name.into(),
            mask: MaskSource::Fixed(mask),
            conditioner,
        }
    }

    pub fn mask_kind(&self) -> MaskKind {
        match &self.mask {
            MaskSource::Adaptive { kind, .. } => *kind,
            MaskSource::Fixed(m) => m.kind,
        }
    }

    pub fn parity(&self) -> u8 {
        match &self.mask {
            MaskSource::Adaptive { parity, .. } => *parity,
            MaskSource::Fixed(m) => m.parity,
        }
    }

    /// The mask gating an `[H, W, C]` input.
    pub fn mask_for(&self, h: usize, w: usize, c: usize) -> Result<Mask> {
        match &self.mask {
            MaskSource::Adaptive { kind, parity } => Mask::for_shape(*kind, *parity, h, w, c),
            MaskSource::Fixed(m) => Ok(m.clone()),
        }
    }

    /// `(s * (1 - b), t * (1 - b))` for the given input.
    fn gated_params<'t>(
        &self,
        ctx: &mut FlowCtx<'_, 't>,
        input: Var<'t>,
    ) -> Result<(Var<'t>, Var<'t>)> {
        let shape = input.shape();
        if shape.len() != 4 {
            return Err(Error::Input(format!(
                "coupling `{}` expects [N, H, W, C], got {shape:?}",
                self.name
            )));
        }
        let mask = self.mask_for(shape[1], shape[2], shape[3])?;
        let b = mask.batch_pattern(&shape)?;
        let complement = b.map(|v| 1.0 - v);
        let b = ctx.tape.constant(b);
        let complement = ctx.tape.constant(complement);
        let masked = input.mul(b)?;
        let (s, t) = self.conditioner.condition(ctx, masked)?;
        if s.shape() != shape || t.shape() != shape {
            return Err(Error::Input(format!(
                "coupling `{}`: conditioner produced {:?}/{:?} for input {shape:?}",
                self.name,
                s.shape(),
                t.shape()
            )));
        }
        for (label, v) in [("scale", &s), ("translation", &t)] {
            if !v.value().all_finite() {
                return Err(Error::divergence(
                    format!("coupling `{}`", self.name),
                    format!("non-finite {label} output"),
                ));
            }
        }
        Ok((s.mul(complement)?, t.mul(complement)?))
    }
}

impl<C: Conditioner> Bijection for CouplingLayer<C> {
    fn forward<'t>(&self, ctx: &mut FlowCtx<'_, 't>, x: Var<'t>) -> Result<(Var<'t>, Var<'t>)> {
        let (s, t) = self.gated_params(ctx, x)?;
        let y = x.mul(s.exp())?.add(t)?;
        Ok((y, s.sum_per_sample()?))
    }

    fn inverse<'t>(&self, ctx: &mut FlowCtx<'_, 't>, y: Var<'t>) -> Result<Var<'t>> {
        // b*y == b*x, so the conditioner sees the same input as in forward
        let (s, t) = self.gated_params(ctx, y)?;
        Ok(y.sub(t)?.mul(s.neg().exp())?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::{make_channel_mask, FlowCtx, Mode, StatsStore};
    use crate::ndtensor::{ParamStore, Tape};

    fn apply<C: Conditioner>(layer: &CouplingLayer<C>, x: Tensor) -> (Tensor, Tensor, Tensor) {
        let params = ParamStore::new();
        let stats = StatsStore::new();
        let tape = Tape::new();
        let mut ctx = FlowCtx::new(&tape, &params, &stats, Mode::Eval, None);
        let xv = tape.constant(x);
        let (y, ld) = layer.forward(&mut ctx, xv).unwrap();
        let back = layer.inverse(&mut ctx, y).unwrap();
        let out = (
            (*y.value()).clone(),
            (*ld.value()).clone(),
            (*back.value()).clone(),
        );
        out
    }

    #[test]
    fn zero_conditioner_is_identity() {
        let layer = CouplingLayer::new(
            "c",
            MaskKind::Checkerboard,
            0,
            ConstantConditioner { s: 0.0, t: 0.0 },
        );
        let x = Tensor::from_fn(&[2, 4, 4, 2], |i| (i as f64 * 0.37).sin());
        let (y, ld, _) = apply(&layer, x.clone());
        assert_eq!(y, x);
        assert!(ld.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn two_dim_hand_example() {
        let layer = CouplingLayer::with_mask(
            "c",
            make_channel_mask(2, 0).unwrap(),
            ConstantConditioner {
                s: 2f64.ln(),
                t: 3.0,
            },
        );
        let x = Tensor::new(vec![1, 1, 1, 2], vec![1.0, 2.0]).unwrap();
        let (y, ld, back) = apply(&layer, x.clone());
        assert_eq!(y.data()[0], 1.0);
        assert!((y.data()[1] - 7.0).abs() < 1e-15);
        assert!((ld.data()[0] - 2f64.ln()).abs() < 1e-15);
        assert!(back.max_abs_diff(&x).unwrap() < 1e-15);
    }

    #[test]
    fn constant_shift_inverse_subtracts() {
        let c = 1.75;
        let layer = CouplingLayer::new(
            "c",
            MaskKind::Checkerboard,
            1,
            ConstantConditioner { s: 0.0, t: c },
        );
        let x = Tensor::from_fn(&[1, 2, 2, 1], |i| i as f64);
        let (y, _, back) = apply(&layer, x.clone());
        // parity 1: (0,0) and (1,1) pass through, the off-diagonal is shifted
        assert_eq!(y.data(), &[0.0, 1.0 + c, 2.0 + c, 3.0]);
        assert_eq!(back, x);
    }
}
