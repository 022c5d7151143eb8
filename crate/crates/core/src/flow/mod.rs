//! Bijections and the multi-scale flow model.
//!
//! Every bijection maps a batch `[N, H, W, C]` to a batch of the same number
//! of scalars and reports a per-sample log-determinant `[N]`. Composition
//! sums log-determinants in application order; inversion applies the
//! component inverses in reverse order.

mod batchnorm;
mod coupling;
mod mask;
mod model;
mod squeeze;

pub use batchnorm::{
    BatchNormBijection, BatchNormConfig, RunningStats, StatUpdate, StatsId, StatsStore,
};
pub use coupling::{Conditioner, ConstantConditioner, CouplingLayer};
pub use mask::{make_channel_mask, make_checkerboard_mask, Mask, MaskKind};
pub use model::{FlowLayer, FlowModel, Latent, ModelConfig};
pub use squeeze::{squeeze, squeeze_tensor, unsqueeze, unsqueeze_tensor, Squeeze};

pub(crate) use batchnorm::normalize;

use crate::ndtensor::{ParamStore, Tape, Tensor, Var};
use crate::Result;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics blended into the running averages; updates are
    /// collected in [`FlowCtx::updates`].
    Train,
    /// Frozen running statistics; every sample is transformed independently.
    Eval,
}

/// Everything a bijection needs besides its input.
pub struct FlowCtx<'a, 't> {
    pub tape: &'t Tape,
    pub params: &'a ParamStore,
    pub stats: &'a StatsStore,
    pub mode: Mode,
    /// Per-sample conditioning vectors `[N, k]`.
    pub cond: Option<&'a Tensor>,
    pub updates: Vec<StatUpdate>,
}

impl<'a, 't> FlowCtx<'a, 't> {
    pub fn new(
        tape: &'t Tape,
        params: &'a ParamStore,
        stats: &'a StatsStore,
        mode: Mode,
        cond: Option<&'a Tensor>,
    ) -> Self {
        Self {
            tape,
            params,
            stats,
            mode,
            cond,
            updates: Vec::new(),
        }
    }
}

pub trait Bijection {
    /// Output and per-sample log|det J|.
    fn forward<'t>(&self, ctx: &mut FlowCtx<'_, 't>, x: Var<'t>) -> Result<(Var<'t>, Var<'t>)>;

    fn inverse<'t>(&self, ctx: &mut FlowCtx<'_, 't>, y: Var<'t>) -> Result<Var<'t>>;
}

/// Apply `layers` in order, summing their log-determinants left to right.
pub fn compose_forward<'t, B: Bijection>(
    layers: &[B],
    ctx: &mut FlowCtx<'_, 't>,
    x: Var<'t>,
) -> Result<(Var<'t>, Var<'t>)> {
    let mut h = x;
    let mut total: Option<Var<'t>> = None;
    for layer in layers {
        let (y, ld) = layer.forward(ctx, h)?;
        h = y;
        total = Some(match total {
            Some(acc) => acc.add(ld)?,
            None => ld,
        });
    }
    let total = match total {
        Some(t) => t,
        None => ctx.tape.constant(Tensor::zeros(&[x.value().batch()])),
    };
    Ok((h, total))
}

/// Apply the inverses of `layers` last to first.
pub fn compose_inverse<'t, B: Bijection>(
    layers: &[B],
    ctx: &mut FlowCtx<'_, 't>,
    z: Var<'t>,
) -> Result<Var<'t>> {
    layers.iter().rev().try_fold(z, |h, layer| layer.inverse(ctx, h))
}

/// `sum_j log N(z_j; 0, 1)` per sample of `[N, ...]`.
pub fn standard_normal_log_density<'t>(z: Var<'t>) -> Result<Var<'t>> {
    let d = z.value().per_sample() as f64;
    Ok(z
        .square()
        .sum_per_sample()?
        .scale(-0.5)
        .add_scalar(-0.5 * d * (2.0 * std::f64::consts::PI).ln()))
}
