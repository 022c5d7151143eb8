use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{
    standard_normal_log_density, BatchNormBijection, BatchNormConfig, Bijection, CouplingLayer,
    FlowCtx, MaskKind, Mode, StatUpdate, StatsStore, Squeeze,
};
use crate::conditioner::{ConditionerConfig, ResidualConditioner};
use crate::ndtensor::{ParamId, ParamStore, Tape, Tensor, Var};
use crate::{Error, Result};

/// Topology of a multi-scale flow.
///
/// Every scale but the last runs `couplings_per_stage` checkerboard couplings,
/// a squeeze, `couplings_per_stage` channel-wise couplings, and then factors
/// out the first half of the channels. The last scale runs `final_couplings`
/// couplings with `final_mask`. Conditioner width doubles at every scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub levels: usize,
    pub couplings_per_stage: usize,
    pub final_couplings: usize,
    pub final_mask: MaskKind,
    pub num_blocks: usize,
    pub hidden: usize,
    pub kernel_size: usize,
    /// Insert a batch-norm bijection after every coupling and normalize
    /// inside the conditioners.
    pub batch_norm: bool,
    pub bn_momentum: f64,
    pub bn_eps: f64,
    /// Attribute vector length for conditional models (0 = unconditional).
    pub cond_dim: usize,
}

impl ModelConfig {
    /// Image model with the standard per-scale block.
    pub fn image(height: usize, width: usize, channels: usize, levels: usize) -> Self {
        Self {
            height,
            width,
            channels,
            levels,
            couplings_per_stage: 3,
            final_couplings: 4,
            final_mask: MaskKind::Checkerboard,
            num_blocks: 2,
            hidden: 16,
            kernel_size: 3,
            batch_norm: true,
            bn_momentum: BatchNormConfig::default().momentum,
            bn_eps: BatchNormConfig::default().eps,
            cond_dim: 0,
        }
    }

    /// Flow over plain vectors, stored as `1 x 1 x dim` images with
    /// alternating channel masks, 1x1 kernels and no batch normalization.
    pub fn vector(dim: usize, couplings: usize) -> Self {
        Self {
            height: 1,
            width: 1,
            channels: dim,
            levels: 1,
            couplings_per_stage: 0,
            final_couplings: couplings,
            final_mask: MaskKind::Channelwise,
            num_blocks: 2,
            hidden: 64,
            kernel_size: 1,
            batch_norm: false,
            bn_momentum: BatchNormConfig::default().momentum,
            bn_eps: BatchNormConfig::default().eps,
            cond_dim: 0,
        }
    }

    pub fn dims(&self) -> usize {
        self.height * self.width * self.channels
    }

    pub fn bn_config(&self) -> Option<BatchNormConfig> {
        self.batch_norm.then_some(BatchNormConfig {
            momentum: self.bn_momentum,
            eps: self.bn_eps,
        })
    }

    /// Spatial extents must be multiples of this.
    pub fn spatial_divisor(&self) -> usize {
        let squeezes = self.levels.saturating_sub(1);
        match self.final_mask {
            MaskKind::Checkerboard => 1 << (squeezes + 1),
            MaskKind::Channelwise => 1 << squeezes,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.levels == 0 {
            return fail("levels must be at least 1".into());
        }
        if self.height == 0 || self.width == 0 || self.channels == 0 {
            return fail("input extents must be positive".into());
        }
        if self.hidden == 0 || self.kernel_size % 2 == 0 {
            return fail(format!(
                "hidden must be positive and kernel_size odd (hidden={}, kernel_size={})",
                self.hidden, self.kernel_size
            ));
        }
        if self.final_couplings == 0 {
            return fail("final_couplings must be at least 1".into());
        }
        if self.levels > 1 && self.couplings_per_stage == 0 {
            return fail("couplings_per_stage must be positive when levels > 1".into());
        }
        if self.batch_norm && !(self.bn_momentum >= 0.0 && self.bn_momentum < 1.0 && self.bn_eps > 0.0) {
            return fail(format!(
                "batch norm needs momentum in [0, 1) and eps > 0 (momentum={}, eps={})",
                self.bn_momentum, self.bn_eps
            ));
        }
        self.level_shapes(self.height, self.width).map(|_| ())
    }

    /// Input shape `[H, W, C]` seen by each scale for an input of `h x w`.
    pub fn level_shapes(&self, h: usize, w: usize) -> Result<Vec<[usize; 3]>> {
        let d = self.spatial_divisor();
        if h % d != 0 || w % d != 0 {
            return Err(Error::Config(format!(
                "spatial extent {h}x{w} is not divisible by {d} as {} level(s) require",
                self.levels
            )));
        }
        let mut shapes = Vec::with_capacity(self.levels);
        let (mut h, mut w, mut c) = (h, w, self.channels);
        for _ in 0..self.levels - 1 {
            shapes.push([h, w, c]);
            h /= 2;
            w /= 2;
            c *= 2;
        }
        shapes.push([h, w, c]);
        if self.final_mask == MaskKind::Channelwise && c % 2 != 0 {
            return Err(Error::Config(format!(
                "channel-wise final couplings need an even channel count, got {c}"
            )));
        }
        if self.final_mask == MaskKind::Checkerboard && h * w < 2 {
            return Err(Error::Config("checkerboard couplings need at least two pixels".into()));
        }
        Ok(shapes)
    }

    /// Shapes `[H, W, C]` of z^(1) .. z^(L) for an input of `h x w`.
    pub fn factored_shapes(&self, h: usize, w: usize) -> Result<Vec<[usize; 3]>> {
        let levels = self.level_shapes(h, w)?;
        let last = levels.len() - 1;
        Ok(levels
            .iter()
            .enumerate()
            .map(|(i, &[h, w, c])| if i < last { [h / 2, w / 2, 2 * c] } else { [h, w, c] })
            .collect())
    }
}

#[derive(Debug, Clone)]
pub enum FlowLayer {
    Coupling(CouplingLayer<ResidualConditioner>),
    BatchNorm(BatchNormBijection),
    Squeeze(Squeeze),
}

impl FlowLayer {
    pub fn name(&self) -> &str {
        match self {
            FlowLayer::Coupling(c) => &c.name,
            FlowLayer::BatchNorm(b) => &b.name,
            FlowLayer::Squeeze(_) => "squeeze",
        }
    }
}

impl Bijection for FlowLayer {
    fn forward<'t>(&self, ctx: &mut FlowCtx<'_, 't>, x: Var<'t>) -> Result<(Var<'t>, Var<'t>)> {
        match self {
            FlowLayer::Coupling(c) => c.forward(ctx, x),
            FlowLayer::BatchNorm(b) => b.forward(ctx, x),
            FlowLayer::Squeeze(s) => s.forward(ctx, x),
        }
    }

    fn inverse<'t>(&self, ctx: &mut FlowCtx<'_, 't>, y: Var<'t>) -> Result<Var<'t>> {
        match self {
            FlowLayer::Coupling(c) => c.inverse(ctx, y),
            FlowLayer::BatchNorm(b) => b.inverse(ctx, y),
            FlowLayer::Squeeze(s) => s.inverse(ctx, y),
        }
    }
}

/// Factored latent variables `z^(1) .. z^(L)`, finest scale first.
#[derive(Debug, Clone, PartialEq)]
pub struct Latent {
    pub parts: Vec<Tensor>,
}

impl Latent {
    pub fn batch(&self) -> usize {
        self.parts[0].batch()
    }

    pub fn dims(&self) -> usize {
        self.parts.iter().map(|p| p.per_sample()).sum()
    }

    /// Per-sample concatenation `[N, D]`.
    pub fn to_flat(&self) -> Tensor {
        let n = self.batch();
        let d = self.dims();
        let mut data = Vec::with_capacity(n * d);
        for s in 0..n {
            for p in &self.parts {
                let k = p.per_sample();
                data.extend_from_slice(&p.data()[s * k..(s + 1) * k]);
            }
        }
        Tensor::new(vec![n, d], data).expect("latent dims")
    }

    pub fn from_flat(flat: &Tensor, shapes: &[[usize; 3]]) -> Result<Self> {
        let n = flat.batch();
        let d: usize = shapes.iter().map(|s| s.iter().product::<usize>()).sum();
        if flat.shape() != [n, d] {
            return Err(Error::Input(format!(
                "flat latent {:?} does not match {d} factored dims",
                flat.shape()
            )));
        }
        let mut offset = 0;
        let mut parts = Vec::with_capacity(shapes.len());
        for &[h, w, c] in shapes {
            let k = h * w * c;
            let mut data = Vec::with_capacity(n * k);
            for s in 0..n {
                data.extend_from_slice(&flat.data()[s * d + offset..s * d + offset + k]);
            }
            parts.push(Tensor::new(vec![n, h, w, c], data)?);
            offset += k;
        }
        Ok(Self { parts })
    }

    /// Draw every part from the standard normal prior.
    pub fn sample_prior(n: usize, shapes: &[[usize; 3]], seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let parts = shapes
            .iter()
            .map(|&[h, w, c]| Tensor::from_fn(&[n, h, w, c], |_| StandardNormal.sample(&mut rng)))
            .collect();
        Self { parts }
    }
}

/// The composed multi-scale bijection with a standard normal prior.
#[derive(Debug, Clone)]
pub struct FlowModel {
    config: ModelConfig,
    scales: Vec<Vec<FlowLayer>>,
    params: ParamStore,
    stats: StatsStore,
}

impl FlowModel {
    /// Build with freshly initialized parameters. Every coupling starts as the
    /// identity.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let mut stats = StatsStore::new();
        let shapes = config.level_shapes(config.height, config.width)?;
        let bn = config.bn_config();
        let mut scales = Vec::with_capacity(config.levels);

        for (level, &[_, _, c]) in shapes.iter().enumerate() {
            let is_final = level + 1 == config.levels;
            let hidden = config.hidden << level;
            let mut layers = Vec::new();
            let mut add_coupling = |layers: &mut Vec<FlowLayer>,
                                    params: &mut ParamStore,
                                    stats: &mut StatsStore,
                                    idx: usize,
                                    kind: MaskKind,
                                    parity: u8,
                                    channels: usize|
             -> Result<()> {
                let name = format!("s{level}.coupling{idx}");
                let net = ResidualConditioner::build(
                    &format!("{name}.net"),
                    ConditionerConfig {
                        channels,
                        cond_dim: config.cond_dim,
                        hidden,
                        num_blocks: config.num_blocks,
                        kernel_size: config.kernel_size,
                        norm: bn,
                    },
                    params,
                    stats,
                    &mut rng,
                )?;
                layers.push(FlowLayer::Coupling(CouplingLayer::new(name, kind, parity, net)));
                if let Some(bn) = bn {
                    let bn_name = format!("s{level}.bn{idx}");
                    let id = stats.add(bn_name.clone(), channels);
                    layers.push(FlowLayer::BatchNorm(BatchNormBijection::new(bn_name, id, bn)));
                }
                Ok(())
            };

            if is_final {
                for j in 0..config.final_couplings {
                    add_coupling(&mut layers, &mut params, &mut stats, j, config.final_mask, (j % 2) as u8, c)?;
                }
            } else {
                let k = config.couplings_per_stage;
                for j in 0..k {
                    add_coupling(&mut layers, &mut params, &mut stats, j, MaskKind::Checkerboard, (j % 2) as u8, c)?;
                }
                layers.push(FlowLayer::Squeeze(Squeeze));
                for j in 0..k {
                    add_coupling(
                        &mut layers,
                        &mut params,
                        &mut stats,
                        k + j,
                        MaskKind::Channelwise,
                        (j % 2) as u8,
                        4 * c,
                    )?;
                }
            }
            scales.push(layers);
        }
        Ok(Self {
            config,
            scales,
            params,
            stats,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn stats(&self) -> &StatsStore {
        &self.stats
    }

    pub fn stats_mut(&mut self) -> &mut StatsStore {
        &mut self.stats
    }

    pub fn scales(&self) -> &[Vec<FlowLayer>] {
        &self.scales
    }

    pub fn apply_updates(&mut self, updates: &[StatUpdate]) {
        self.stats.apply(updates);
    }

    pub fn factored_shapes(&self) -> Vec<[usize; 3]> {
        self.config
            .factored_shapes(self.config.height, self.config.width)
            .expect("validated at construction")
    }

    /// Every L2-regularized parameter of every conditioner.
    pub fn weight_scale_params(&self) -> Vec<ParamId> {
        self.couplings()
            .flat_map(|c| c.conditioner.weight_scale_params())
            .collect()
    }

    pub fn couplings(&self) -> impl Iterator<Item = &CouplingLayer<ResidualConditioner>> {
        self.scales.iter().flatten().filter_map(|l| match l {
            FlowLayer::Coupling(c) => Some(c),
            _ => None,
        })
    }

    pub fn ctx<'a, 't>(&'a self, tape: &'t Tape, mode: Mode, cond: Option<&'a Tensor>) -> FlowCtx<'a, 't> {
        FlowCtx::new(tape, &self.params, &self.stats, mode, cond)
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        if shape.len() != 4 || shape[3] != self.config.channels {
            return Err(Error::Input(format!(
                "model expects [N, H, W, {}], got {shape:?}",
                self.config.channels
            )));
        }
        self.config.level_shapes(shape[1], shape[2]).map(|_| ())
    }

    /// `x -> (z^(1) .. z^(L), log|det J|)`. Log-determinants are summed in
    /// layer order across all scales.
    pub fn forward<'t>(&self, ctx: &mut FlowCtx<'_, 't>, x: Var<'t>) -> Result<(Vec<Var<'t>>, Var<'t>)> {
        self.check_input(&x.shape())?;
        let mut h = x;
        let mut parts = Vec::with_capacity(self.scales.len());
        let mut total: Option<Var<'t>> = None;
        for (i, layers) in self.scales.iter().enumerate() {
            for layer in layers {
                let (y, ld) = layer.forward(ctx, h)?;
                h = y;
                total = Some(match total {
                    Some(acc) => acc.add(ld)?,
                    None => ld,
                });
            }
            if i + 1 < self.scales.len() {
                let c = *h.shape().last().unwrap();
                parts.push(h.slice_channels(0, c / 2)?);
                h = h.slice_channels(c / 2, c / 2)?;
            } else {
                parts.push(h);
            }
        }
        let total = total.unwrap_or_else(|| ctx.tape.constant(Tensor::zeros(&[x.value().batch()])));
        Ok((parts, total))
    }

    /// `(z^(1) .. z^(L)) -> x`. Batch norms use their running statistics.
    pub fn inverse<'t>(&self, ctx: &mut FlowCtx<'_, 't>, parts: &[Var<'t>]) -> Result<Var<'t>> {
        if parts.len() != self.scales.len() {
            return Err(Error::Input(format!(
                "expected {} latent parts, got {}",
                self.scales.len(),
                parts.len()
            )));
        }
        let mut h: Option<Var<'t>> = None;
        for (i, layers) in self.scales.iter().enumerate().rev() {
            let mut cur = match h {
                None => parts[i],
                Some(deeper) => parts[i].concat_channels(deeper)?,
            };
            for layer in layers.iter().rev() {
                cur = layer.inverse(ctx, cur)?;
            }
            h = Some(cur);
        }
        Ok(h.expect("at least one scale"))
    }

    /// Per-sample `log p_X(x) = sum_j log N(z_j) + log|det J|`.
    pub fn log_prob<'t>(&self, ctx: &mut FlowCtx<'_, 't>, x: Var<'t>) -> Result<Var<'t>> {
        let (parts, log_det) = self.forward(ctx, x)?;
        let mut total = log_det;
        for z in parts {
            total = standard_normal_log_density(z)?.add(total)?;
        }
        Ok(total)
    }

    /// Evaluation-mode log-density of each sample of `x`.
    pub fn log_likelihood(&self, x: &Tensor, cond: Option<&Tensor>) -> Result<Tensor> {
        let tape = Tape::new();
        let mut ctx = self.ctx(&tape, Mode::Eval, cond);
        let lp = self.log_prob(&mut ctx, tape.constant(x.clone()))?;
        let lp = (*lp.value()).clone();
        if !lp.all_finite() {
            return Err(Error::divergence("log_likelihood", "non-finite log-density"));
        }
        Ok(lp)
    }

    /// Evaluation-mode latent code and log-determinant of `x`.
    pub fn encode(&self, x: &Tensor, cond: Option<&Tensor>) -> Result<(Latent, Tensor)> {
        let tape = Tape::new();
        let mut ctx = self.ctx(&tape, Mode::Eval, cond);
        let (parts, ld) = self.forward(&mut ctx, tape.constant(x.clone()))?;
        Ok((
            Latent {
                parts: parts.iter().map(|p| (*p.value()).clone()).collect(),
            },
            (*ld.value()).clone(),
        ))
    }

    pub fn decode(&self, latent: &Latent, cond: Option<&Tensor>) -> Result<Tensor> {
        let tape = Tape::new();
        let mut ctx = self.ctx(&tape, Mode::Eval, cond);
        let parts: Vec<_> = latent.parts.iter().map(|p| tape.constant(p.clone())).collect();
        let x = self.inverse(&mut ctx, &parts)?;
        let x = (*x.value()).clone();
        if !x.all_finite() {
            return Err(Error::divergence("decode", "non-finite sample"));
        }
        Ok(x)
    }

    /// `n` exact samples at the training resolution.
    pub fn sample(&self, n: usize, seed: u64, cond: Option<&Tensor>) -> Result<Tensor> {
        self.sample_at(self.config.height, self.config.width, n, seed, cond)
    }

    /// `n` samples at an arbitrary (suitably divisible) resolution.
    pub fn sample_at(&self, h: usize, w: usize, n: usize, seed: u64, cond: Option<&Tensor>) -> Result<Tensor> {
        let shapes = self.config.factored_shapes(h, w)?;
        self.decode(&Latent::sample_prior(n, &shapes, seed), cond)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dimension_conservation() {
        for (h, levels) in [(4, 1), (8, 2), (16, 3), (32, 5)] {
            let cfg = ModelConfig::image(h, h, 1, levels);
            let shapes = cfg.factored_shapes(h, h).unwrap();
            let total: usize = shapes.iter().map(|s| s.iter().product::<usize>()).sum();
            assert_eq!(total, h * h, "h={h} levels={levels}");
            assert_eq!(shapes.len(), levels);
        }
    }

    #[test]
    fn indivisible_extent_rejected() {
        let cfg = ModelConfig::image(6, 6, 1, 2);
        assert!(matches!(FlowModel::new(cfg, 0), Err(Error::Config(_))));
    }

    #[test]
    fn hidden_width_doubles_per_scale() {
        let mut cfg = ModelConfig::image(8, 8, 1, 2);
        cfg.hidden = 4;
        let model = FlowModel::new(cfg, 0).unwrap();
        let widths: Vec<_> = model.couplings().map(|c| c.conditioner.config().hidden).collect();
        assert_eq!(widths, [vec![4; 6], vec![8; 4]].concat());
    }

    #[test]
    fn parities_alternate_within_stages() {
        let model = FlowModel::new(ModelConfig::image(8, 8, 1, 2), 0).unwrap();
        let layout: Vec<_> = model.couplings().map(|c| (c.mask_kind(), c.parity())).collect();
        use MaskKind::*;
        assert_eq!(
            layout,
            vec![
                (Checkerboard, 0),
                (Checkerboard, 1),
                (Checkerboard, 0),
                (Channelwise, 0),
                (Channelwise, 1),
                (Channelwise, 0),
                (Checkerboard, 0),
                (Checkerboard, 1),
                (Checkerboard, 0),
                (Checkerboard, 1),
            ]
        );
    }

    #[test]
    fn latent_flat_roundtrip() {
        let shapes = vec![[2, 2, 2], [2, 2, 2]];
        let lat = Latent::sample_prior(3, &shapes, 9);
        let back = Latent::from_flat(&lat.to_flat(), &shapes).unwrap();
        assert_eq!(lat, back);
    }
}
