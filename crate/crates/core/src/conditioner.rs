//! Residual convolutional networks computing a coupling's scale and translation.
//!
//! Layout of one conditioner:
//!
//! ```text
//! input (masked data, optionally with constant attribute maps appended)
//!   -> conv_in
//!   -> residual block x num_blocks: h + conv(relu(bn(conv(relu(bn(h))))))
//!   -> relu(bn(h))
//!   -> head_s -> tanh -> * learned scale   = s
//!   -> head_t                              = t
//! ```
//!
//! Every convolution is weight-normalized: kernel = g * v / |v| per output
//! channel. The heads start with `g = 0` and zero bias, so a fresh
//! conditioner returns `s = t = 0` and its coupling is the identity.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::flow::{normalize, BatchNormConfig, Conditioner, FlowCtx, StatsId, StatsStore};
use crate::ndtensor::{ParamId, ParamKind, ParamStore, Tape, Tensor, Var};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConditionerConfig {
    /// Data channels of the coupling input (and of `s`, `t`).
    pub channels: usize,
    /// Length of the attribute vector concatenated as constant feature maps.
    pub cond_dim: usize,
    pub hidden: usize,
    pub num_blocks: usize,
    pub kernel_size: usize,
    /// `None` disables the normalization layers inside the trunk.
    pub norm: Option<BatchNormConfig>,
}

#[derive(Debug, Clone)]
struct WnConv {
    v: ParamId,
    g: ParamId,
    bias: ParamId,
}

impl WnConv {
    #[allow(clippy::too_many_arguments)]
    fn build(
        name: &str,
        params: &mut ParamStore,
        rng: &mut impl Rng,
        k: usize,
        cin: usize,
        cout: usize,
        g_init: f64,
    ) -> Result<Self> {
        let v = Tensor::from_fn(&[k, k, cin, cout], |_| rng.sample(StandardNormal));
        Ok(Self {
            v: params.add(format!("{name}.v"), ParamKind::Direction, v)?,
            g: params.add(format!("{name}.g"), ParamKind::WeightScale, Tensor::full(&[cout], g_init))?,
            bias: params.add(format!("{name}.b"), ParamKind::Bias, Tensor::zeros(&[cout]))?,
        })
    }

    fn apply<'t>(&self, tape: &'t Tape, params: &ParamStore, x: Var<'t>) -> Result<Var<'t>> {
        let kernel = tape.param(params, self.v).weight_norm(tape.param(params, self.g))?;
        Ok(x.conv2d(kernel)?.add(tape.param(params, self.bias))?)
    }
}

#[derive(Debug, Clone)]
struct ResBlock {
    norm_a: Option<StatsId>,
    conv_a: WnConv,
    norm_b: Option<StatsId>,
    conv_b: WnConv,
}

#[derive(Debug, Clone)]
pub struct ResidualConditioner {
    pub name: String,
    config: ConditionerConfig,
    conv_in: WnConv,
    blocks: Vec<ResBlock>,
    norm_out: Option<StatsId>,
    head_s: WnConv,
    head_t: WnConv,
    scale: ParamId,
}

impl ResidualConditioner {
    pub fn build(
        name: &str,
        config: ConditionerConfig,
        params: &mut ParamStore,
        stats: &mut StatsStore,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let ConditionerConfig {
            channels,
            cond_dim,
            hidden,
            num_blocks,
            kernel_size: k,
            norm,
        } = config;
        if channels == 0 || hidden == 0 || k % 2 == 0 {
            return Err(Error::Config(format!(
                "conditioner `{name}`: channels and hidden must be positive and the kernel odd \
                 (channels={channels}, hidden={hidden}, kernel={k})"
            )));
        }
        let mut add_norm = |label: String| norm.map(|_| stats.add(label, hidden));
        let conv_in = WnConv::build(&format!("{name}.in"), params, rng, k, channels + cond_dim, hidden, 1.0)?;
        let mut blocks = Vec::with_capacity(num_blocks);
        for b in 0..num_blocks {
            let base = format!("{name}.block{b}");
            let norm_a = add_norm(format!("{base}.norm_a"));
            let conv_a = WnConv::build(&format!("{base}.conv_a"), params, rng, k, hidden, hidden, 1.0)?;
            let norm_b = add_norm(format!("{base}.norm_b"));
            let conv_b = WnConv::build(&format!("{base}.conv_b"), params, rng, k, hidden, hidden, 1.0)?;
            blocks.push(ResBlock {
                norm_a,
                conv_a,
                norm_b,
                conv_b,
            });
        }
        let norm_out = add_norm(format!("{name}.norm_out"));
        let head_s = WnConv::build(&format!("{name}.head_s"), params, rng, k, hidden, channels, 0.0)?;
        let head_t = WnConv::build(&format!("{name}.head_t"), params, rng, k, hidden, channels, 0.0)?;
        let scale = params.add(
            format!("{name}.s_scale"),
            ParamKind::OutputScale,
            Tensor::ones(&[channels]),
        )?;
        Ok(Self {
            name: name.to_string(),
            config,
            conv_in,
            blocks,
            norm_out,
            head_s,
            head_t,
            scale,
        })
    }

    pub fn config(&self) -> &ConditionerConfig {
        &self.config
    }

    /// The magnitudes of every weight-normalized kernel plus the learned
    /// scale of the `s` head: the set targeted by the L2 penalty.
    pub fn weight_scale_params(&self) -> Vec<ParamId> {
        let mut ids = vec![self.conv_in.g];
        for b in &self.blocks {
            ids.push(b.conv_a.g);
            ids.push(b.conv_b.g);
        }
        ids.extend([self.head_s.g, self.head_t.g, self.scale]);
        ids
    }

    pub fn all_params(&self) -> Vec<ParamId> {
        let mut ids = Vec::new();
        let mut conv = |c: &WnConv| ids.extend([c.v, c.g, c.bias]);
        conv(&self.conv_in);
        for b in &self.blocks {
            conv(&b.conv_a);
            conv(&b.conv_b);
        }
        conv(&self.head_s);
        conv(&self.head_t);
        ids.push(self.scale);
        ids
    }

    fn norm_relu<'t>(&self, ctx: &mut FlowCtx<'_, 't>, h: Var<'t>, id: Option<StatsId>) -> Result<Var<'t>> {
        let h = match (id, self.config.norm) {
            (Some(id), Some(cfg)) => normalize(ctx, h, id, cfg)?.0,
            _ => h,
        };
        Ok(h.relu())
    }
}

impl Conditioner for ResidualConditioner {
    fn condition<'t>(&self, ctx: &mut FlowCtx<'_, 't>, masked: Var<'t>) -> Result<(Var<'t>, Var<'t>)> {
        let shape = masked.shape();
        if shape.len() != 4 || shape[3] != self.config.channels {
            return Err(Error::Input(format!(
                "conditioner `{}` expects [N, H, W, {}], got {shape:?}",
                self.name, self.config.channels
            )));
        }
        let (tape, params) = (ctx.tape, ctx.params);
        let input = match (self.config.cond_dim, ctx.cond) {
            (0, _) => masked,
            (k, Some(cond)) if cond.shape() == [shape[0], k] => {
                masked.concat_channels(tape.constant(attribute_maps(cond, shape[1], shape[2])))?
            }
            (k, other) => {
                return Err(Error::Input(format!(
                    "conditioner `{}` needs attributes of shape [{}, {k}], got {:?}",
                    self.name,
                    shape[0],
                    other.map(|c| c.shape().to_vec())
                )))
            }
        };
        let mut h = self.conv_in.apply(tape, params, input)?;
        for b in &self.blocks {
            let r = self.norm_relu(ctx, h, b.norm_a)?;
            let r = b.conv_a.apply(tape, params, r)?;
            let r = self.norm_relu(ctx, r, b.norm_b)?;
            let r = b.conv_b.apply(tape, params, r)?;
            h = h.add(r)?;
        }
        let h = self.norm_relu(ctx, h, self.norm_out)?;
        let s = self
            .head_s
            .apply(tape, params, h)?
            .tanh()
            .mul(tape.param(params, self.scale))?;
        let t = self.head_t.apply(tape, params, h)?;
        Ok((s, t))
    }
}

/// Broadcast `[N, k]` attributes to constant `[N, H, W, k]` feature maps.
pub fn attribute_maps(cond: &Tensor, h: usize, w: usize) -> Tensor {
    let (n, k) = (cond.shape()[0], cond.shape()[1]);
    let mut data = Vec::with_capacity(n * h * w * k);
    for s in 0..n {
        let row = &cond.data()[s * k..(s + 1) * k];
        for _ in 0..h * w {
            data.extend_from_slice(row);
        }
    }
    Tensor::new(vec![n, h, w, k], data).expect("attribute map shape")
}

/// `lambda * sum_p |p|^2` over the given parameters.
pub fn l2_penalty<'t>(tape: &'t Tape, params: &ParamStore, ids: &[ParamId], lambda: f64) -> Result<Var<'t>> {
    let mut total: Option<Var<'t>> = None;
    for &id in ids {
        let sq = tape.param(params, id).square().sum();
        total = Some(match total {
            Some(acc) => acc.add(sq)?,
            None => sq,
        });
    }
    Ok(match total {
        Some(t) => t.scale(lambda),
        None => tape.constant(Tensor::scalar(0.0)),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::Mode;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn build(cond_dim: usize) -> (ResidualConditioner, ParamStore, StatsStore) {
        let mut params = ParamStore::new();
        let mut stats = StatsStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let net = ResidualConditioner::build(
            "net",
            ConditionerConfig {
                channels: 2,
                cond_dim,
                hidden: 4,
                num_blocks: 2,
                kernel_size: 3,
                norm: Some(BatchNormConfig::default()),
            },
            &mut params,
            &mut stats,
            &mut rng,
        )
        .unwrap();
        (net, params, stats)
    }

    fn run(net: &ResidualConditioner, params: &ParamStore, stats: &StatsStore, x: Tensor) -> (Tensor, Tensor) {
        let tape = Tape::new();
        let mut ctx = FlowCtx::new(&tape, params, stats, Mode::Eval, None);
        let (s, t) = net.condition(&mut ctx, tape.constant(x)).unwrap();
        let out = ((*s.value()).clone(), (*t.value()).clone());
        out
    }

    #[test]
    fn fresh_heads_output_zero() {
        let (net, params, stats) = build(0);
        let x = Tensor::from_fn(&[2, 4, 4, 2], |i| (i as f64).cos() * 3.0);
        let (s, t) = run(&net, &params, &stats, x);
        assert_eq!(s.max_abs(), 0.0);
        assert_eq!(t.max_abs(), 0.0);
    }

    #[test]
    fn scale_params_exclude_biases() {
        let (net, params, _) = build(0);
        let ids = net.weight_scale_params();
        assert!(!ids.is_empty());
        for id in ids {
            let kind = params.get(id).kind;
            assert!(matches!(kind, ParamKind::WeightScale | ParamKind::OutputScale));
        }
    }

    #[test]
    fn rejects_wrong_channel_count() {
        let (net, params, stats) = build(0);
        let tape = Tape::new();
        let mut ctx = FlowCtx::new(&tape, &params, &stats, Mode::Eval, None);
        let x = tape.constant(Tensor::zeros(&[1, 2, 2, 3]));
        assert!(net.condition(&mut ctx, x).is_err());
    }

    #[test]
    fn missing_attributes_rejected() {
        let (net, params, stats) = build(3);
        let tape = Tape::new();
        let mut ctx = FlowCtx::new(&tape, &params, &stats, Mode::Eval, None);
        let x = tape.constant(Tensor::zeros(&[1, 2, 2, 2]));
        assert!(net.condition(&mut ctx, x).is_err());
    }

    #[test]
    fn attribute_maps_are_constant_per_sample() {
        let cond = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let m = attribute_maps(&cond, 2, 3);
        assert_eq!(m.shape(), &[2, 2, 3, 2]);
        assert!(m.sample(0).data().chunks(2).all(|c| c == [1.0, 0.0]));
        assert!(m.sample(1).data().chunks(2).all(|c| c == [0.0, 1.0]));
    }

    #[test]
    fn zero_penalty_for_zero_scales() {
        let (net, mut params, _) = build(0);
        let ids = net.weight_scale_params();
        for &id in &ids {
            params.get_mut(id).tensor = Tensor::zeros(params.get(id).tensor.shape());
        }
        let tape = Tape::new();
        let p = l2_penalty(&tape, &params, &ids, 5e-5).unwrap();
        assert_eq!(p.item().unwrap(), 0.0);
    }
}
