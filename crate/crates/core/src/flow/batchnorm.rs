//! Moving-average batch normalization, both as a bijection on the flow's
//! activations and as a plain normalizer inside the conditioners.
//!
//! In training mode the statistics used are
//! `mean = rho * running_mean + (1 - rho) * batch_mean` (likewise for the
//! variance), with gradients flowing only through the batch part. These
//! blended values become the new running statistics once the step is
//! committed. Evaluation mode uses the running statistics alone, which makes
//! the transform a fixed per-channel affine map.

use serde::{Deserialize, Serialize};

use super::{Bijection, FlowCtx, Mode};
use crate::ndtensor::{Tensor, Var};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct StatsId(pub usize);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunningStats {
    pub name: String,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// All running statistics of a model, addressed by [`StatsId`].
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StatsStore {
    entries: Vec<RunningStats>,
}

/// Running statistics computed during a training-mode forward pass, not yet
/// committed to the store.
#[derive(Debug, Clone, PartialEq)]
pub struct StatUpdate {
    pub id: StatsId,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl StatsStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Register `channels` statistics initialized to mean 0, variance 1.
    pub fn add(&mut self, name: impl Into<String>, channels: usize) -> StatsId {
        self.entries.push(RunningStats {
            name: name.into(),
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
        });
        StatsId(self.entries.len() - 1)
    }

    pub fn get(&self, id: StatsId) -> &RunningStats {
        &self.entries[id.0]
    }

    pub fn get_mut(&mut self, id: StatsId) -> &mut RunningStats {
        &mut self.entries[id.0]
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &RunningStats> {
        self.entries.iter()
    }

    pub fn apply(&mut self, updates: &[StatUpdate]) {
        for u in updates {
            let e = &mut self.entries[u.id.0];
            e.mean.clone_from(&u.mean);
            e.var.clone_from(&u.var);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BatchNormConfig {
    pub momentum: f64,
    pub eps: f64,
}

impl Default for BatchNormConfig {
    fn default() -> Self {
        Self {
            momentum: 0.99,
            eps: 1e-5,
        }
    }
}

/// Normalize `[N, ..., C]` per channel. Returns the output and the
/// `variance + eps` vector that was used.
pub(crate) fn normalize<'t>(
    ctx: &mut FlowCtx<'_, 't>,
    x: Var<'t>,
    id: StatsId,
    cfg: BatchNormConfig,
) -> Result<(Var<'t>, Var<'t>)> {
    let running = ctx.stats.get(id);
    let c = *x.shape().last().unwrap_or(&0);
    if running.mean.len() != c {
        return Err(Error::Input(format!(
            "batch norm `{}` tracks {} channels, input has {c}",
            running.name,
            running.mean.len()
        )));
    }
    let (mean, var) = match ctx.mode {
        Mode::Train => {
            let n = x.value().batch();
            if n < 2 {
                return Err(Error::Input(format!(
                    "batch norm `{}` needs a batch of at least 2 in training mode, got {n}",
                    running.name
                )));
            }
            let rho = cfg.momentum;
            let batch_mean = x.mean_channels()?;
            let batch_var = x.sub(batch_mean)?.square().mean_channels()?;
            let lag_mean = ctx.tape.constant(vec_tensor(running.mean.iter().map(|m| rho * m)));
            let lag_var = ctx.tape.constant(vec_tensor(running.var.iter().map(|v| rho * v)));
            let mean = lag_mean.add(batch_mean.scale(1.0 - rho))?;
            let var = lag_var.add(batch_var.scale(1.0 - rho))?;
            ctx.updates.push(StatUpdate {
                id,
                mean: mean.value().data().to_vec(),
                var: var.value().data().to_vec(),
            });
            (mean, var)
        }
        Mode::Eval => (
            ctx.tape.constant(vec_tensor(running.mean.iter().copied())),
            ctx.tape.constant(vec_tensor(running.var.iter().copied())),
        ),
    };
    let var_eps = var.add_scalar(cfg.eps);
    let y = x.sub(mean)?.mul(var_eps.powf(-0.5)?)?;
    Ok((y, var_eps))
}

fn vec_tensor(values: impl Iterator<Item = f64>) -> Tensor {
    let data: Vec<f64> = values.collect();
    Tensor::new(vec![data.len()], data).expect("non-empty statistics")
}

/// Per-channel batch normalization as a bijection.
///
/// Log-determinant per sample is `-1/2 * H * W * sum_c ln(var_c + eps)`.
/// The inverse always uses the running statistics.
#[derive(Debug, Clone)]
pub struct BatchNormBijection {
    pub name: String,
    pub stats: StatsId,
    pub config: BatchNormConfig,
}

impl BatchNormBijection {
    pub fn new(name: impl Into<String>, stats: StatsId, config: BatchNormConfig) -> Self {
        Self {
            name: name.into(),
            stats,
            config,
        }
    }
}

impl Bijection for BatchNormBijection {
    fn forward<'t>(&self, ctx: &mut FlowCtx<'_, 't>, x: Var<'t>) -> Result<(Var<'t>, Var<'t>)> {
        let shape = x.shape();
        let n = shape[0];
        let positions: usize = shape[1..shape.len() - 1].iter().product();
        let (y, var_eps) = normalize(ctx, x, self.stats, self.config)?;
        let per_sample = var_eps.ln()?.sum().scale(-0.5 * positions as f64);
        let log_det = ctx.tape.constant(Tensor::ones(&[n])).mul(per_sample)?;
        Ok((y, log_det))
    }

    fn inverse<'t>(&self, ctx: &mut FlowCtx<'_, 't>, y: Var<'t>) -> Result<Var<'t>> {
        let running = ctx.stats.get(self.stats);
        let eps = self.config.eps;
        let std = ctx
            .tape
            .constant(vec_tensor(running.var.iter().map(|v| (v + eps).sqrt())));
        let mean = ctx.tape.constant(vec_tensor(running.mean.iter().copied()));
        Ok(y.mul(std)?.add(mean)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ndtensor::{ParamStore, Tape};

    fn run_forward(
        stats: &StatsStore,
        bn: &BatchNormBijection,
        mode: Mode,
        x: Tensor,
    ) -> (Tensor, Tensor, Vec<StatUpdate>) {
        let params = ParamStore::new();
        let tape = Tape::new();
        let mut ctx = FlowCtx::new(&tape, &params, stats, mode, None);
        let xv = tape.constant(x);
        let (y, ld) = bn.forward(&mut ctx, xv).unwrap();
        let (y, ld) = ((*y.value()).clone(), (*ld.value()).clone());
        (y, ld, ctx.updates)
    }

    #[test]
    fn eval_log_det_single_dim() {
        let mut stats = StatsStore::new();
        let id = stats.add("bn", 1);
        stats.get_mut(id).var[0] = 3.0;
        let bn = BatchNormBijection::new("bn", id, BatchNormConfig { momentum: 0.9, eps: 1e-5 });
        let x = Tensor::new(vec![3, 1, 1, 1], vec![0.5, -1.0, 2.0]).unwrap();
        let (_, ld, updates) = run_forward(&stats, &bn, Mode::Eval, x);
        assert!(updates.is_empty());
        let want = -0.5 * 3.00001f64.ln();
        for &v in ld.data() {
            assert!((v - want).abs() < 1e-15);
        }
    }

    #[test]
    fn standardized_batch_is_nearly_unchanged() {
        let mut stats = StatsStore::new();
        let id = stats.add("bn", 1);
        let bn = BatchNormBijection::new("bn", id, BatchNormConfig { momentum: 0.0, eps: 1e-12 });
        // mean 0, population variance 1
        let x = Tensor::new(vec![4, 1, 1, 1], vec![1.0, -1.0, 1.0, -1.0]).unwrap();
        let (y, ld, updates) = run_forward(&stats, &bn, Mode::Train, x.clone());
        assert!(y.max_abs_diff(&x).unwrap() < 1e-9);
        assert!(ld.max_abs() < 1e-9);
        assert_eq!(updates.len(), 1);
    }

    #[test]
    fn train_mode_rejects_single_sample() {
        let mut stats = StatsStore::new();
        let id = stats.add("bn", 2);
        let bn = BatchNormBijection::new("bn", id, BatchNormConfig::default());
        let params = ParamStore::new();
        let tape = Tape::new();
        let mut ctx = FlowCtx::new(&tape, &params, &stats, Mode::Train, None);
        let x = tape.constant(Tensor::zeros(&[1, 1, 1, 2]));
        assert!(matches!(bn.forward(&mut ctx, x), Err(Error::Input(_))));
    }

    #[test]
    fn moving_average_unrolls() {
        let mut stats = StatsStore::new();
        let id = stats.add("bn", 1);
        let bn = BatchNormBijection::new("bn", id, BatchNormConfig { momentum: 0.9, eps: 1e-5 });
        // every batch has mean exactly 1
        let x = Tensor::new(vec![2, 1, 1, 1], vec![0.5, 1.5]).unwrap();
        for t in 1..=50 {
            let (_, _, updates) = run_forward(&stats, &bn, Mode::Train, x.clone());
            stats.apply(&updates);
            let want = 1.0 - 0.9f64.powi(t);
            assert!((stats.get(id).mean[0] - want).abs() < 1e-14, "t={t}");
        }
    }
}
