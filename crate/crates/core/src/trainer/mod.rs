//! Maximum-likelihood training.
//!
//! The optimized objective is the batch mean of `-log p_U(u)` plus an L2
//! penalty on the conditioners' weight scales. Reported numbers exclude the
//! penalty and include the logit log-determinant, so they are likelihoods of
//! the dequantized pixels (or of the raw points for vector data).

mod adam;
mod checkpoint;

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use adam::{adam_step, clip_global_norm, AdamConfig, AdamState};
pub use checkpoint::{config_hash, Checkpoint, SavedParam, CHECKPOINT_FORMAT, CHECKPOINT_VERSION};

use crate::conditioner::l2_penalty;
use crate::datapipe::{dequantize, horizontal_flip, logit_transform, random_flips, ImageDataset, LabeledDataset};
use crate::flow::{FlowModel, ModelConfig, Mode, StatUpdate};
use crate::ndtensor::{Tape, Tensor, Var};
use crate::{Error, Result};

const LN_2: f64 = std::f64::consts::LN_2;
/// Stream reserved for the validation jitter.
const EVAL_STREAM: u64 = u64::MAX;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub batch_size: usize,
    pub max_steps: u64,
    pub adam: AdamConfig,
    pub l2: f64,
    pub clip_norm: f64,
    pub seed: u64,
    /// Steps between metrics rows and checkpoints.
    pub eval_interval: u64,
    pub eval_batch: usize,
    /// Random horizontal flips of training images.
    pub flip: bool,
    /// Write real elapsed seconds in the metrics log instead of 0.
    pub record_wallclock: bool,
}

impl TrainConfig {
    pub fn new(model: ModelConfig) -> Self {
        Self {
            model,
            batch_size: 64,
            max_steps: 1000,
            adam: AdamConfig::default(),
            l2: 5e-5,
            clip_norm: 100.0,
            seed: 0,
            eval_interval: 100,
            eval_batch: 256,
            flip: true,
            record_wallclock: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let fail = |m: String| Err(Error::Config(m));
        if self.batch_size < 2 {
            return fail(format!("batch_size must be at least 2, got {}", self.batch_size));
        }
        if self.max_steps == 0 || self.eval_interval == 0 || self.eval_batch == 0 {
            return fail("max_steps, eval_interval and eval_batch must be positive".into());
        }
        let a = &self.adam;
        if !(a.lr > 0.0 && (0.0..1.0).contains(&a.beta1) && (0.0..1.0).contains(&a.beta2) && a.eps > 0.0) {
            return fail(format!("invalid Adam settings {a:?}"));
        }
        if !(self.l2 >= 0.0) || !(self.clip_norm > 0.0) {
            return fail(format!("l2 must be >= 0 and clip_norm > 0 (got {}, {})", self.l2, self.clip_norm));
        }
        let m = self.model.bn_momentum;
        if !(0.0..1.0).contains(&m) {
            return fail(format!("bn_momentum must lie in [0, 1), got {m}"));
        }
        Ok(())
    }
}

/// A training or validation source.
#[derive(Debug, Clone)]
pub enum TrainData {
    Images(ImageDataset),
    Labeled(LabeledDataset),
    /// Real vectors `[n, d]`, fed to the model as `[n, 1, 1, d]`.
    Points(Tensor),
}

/// A model-ready batch.
#[derive(Debug, Clone)]
pub struct Batch {
    pub x: Tensor,
    /// Per-sample log-determinant of the preprocessing map (zero for points).
    pub pre_log_det: Tensor,
    pub cond: Option<Tensor>,
}

impl TrainData {
    pub fn len(&self) -> usize {
        match self {
            Self::Images(d) => d.len(),
            Self::Labeled(d) => d.images.len(),
            Self::Points(p) => p.batch(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Shape of one sample as `[H, W, C]`.
    pub fn sample_shape(&self) -> [usize; 3] {
        match self {
            Self::Images(d) => [d.height, d.width, d.channels],
            Self::Labeled(d) => [d.images.height, d.images.width, d.images.channels],
            Self::Points(p) => [1, 1, p.per_sample()],
        }
    }

    pub fn cond_dim(&self) -> usize {
        match self {
            Self::Labeled(d) => d.num_attributes(),
            _ => 0,
        }
    }

    /// Check that samples fit `model`.
    pub fn check_fits(&self, model: &ModelConfig) -> Result<()> {
        let [h, w, c] = self.sample_shape();
        if [h, w, c] != [model.height, model.width, model.channels] {
            return Err(Error::Config(format!(
                "data samples are {h}x{w}x{c} but the model expects {}x{}x{}",
                model.height, model.width, model.channels
            )));
        }
        if self.cond_dim() != model.cond_dim {
            return Err(Error::Config(format!(
                "data has {} attributes but the model expects {}",
                self.cond_dim(),
                model.cond_dim
            )));
        }
        if self.is_empty() {
            return Err(Error::Config("dataset is empty".into()));
        }
        Ok(())
    }

    /// Jittered, optionally flipped, logit-transformed batch of `indices`.
    pub fn batch(&self, indices: &[usize], rng: &mut ChaCha8Rng, flip: bool) -> Result<Batch> {
        let (pixels, cond) = match self {
            Self::Points(p) => {
                let d = p.per_sample();
                let data = indices.iter().flat_map(|&i| p.data()[i * d..(i + 1) * d].iter().copied()).collect();
                return Ok(Batch {
                    x: Tensor::new(vec![indices.len(), 1, 1, d], data)?,
                    pre_log_det: Tensor::zeros(&[indices.len()]),
                    cond: None,
                });
            }
            Self::Images(d) => (d.batch(indices), None),
            Self::Labeled(d) => (d.images.batch(indices), Some(d.attribute_batch(indices))),
        };
        let mut x = dequantize(&pixels, rng);
        if flip {
            x = horizontal_flip(&x, &random_flips(indices.len(), rng))?;
        }
        let (u, ld) = logit_transform(&x)?;
        Ok(Batch {
            x: u,
            pre_log_det: ld,
            cond,
        })
    }
}

/// Objective of one batch, still attached to its tape.
pub struct Loss<'t> {
    /// `mean(-log p_U) + penalty`, the differentiated scalar.
    pub objective: Var<'t>,
    /// Per-sample `log p_U(u)`.
    pub log_prob: Tensor,
    pub penalty: f64,
    pub updates: Vec<StatUpdate>,
}

/// Build the regularized objective of `batch` on `tape`.
pub fn nll_loss<'t>(model: &FlowModel, tape: &'t Tape, batch: &Batch, mode: Mode, l2: f64) -> Result<Loss<'t>> {
    let mut ctx = model.ctx(tape, mode, batch.cond.as_ref());
    let lp = model.log_prob(&mut ctx, tape.constant(batch.x.clone()))?;
    let nll = lp.mean().neg();
    let penalty = l2_penalty(tape, model.params(), &model.weight_scale_params(), l2)?;
    let objective = nll.add(penalty)?;
    let log_prob = (*lp.value()).clone();
    if !log_prob.all_finite() {
        return Err(Error::divergence("log_prob", "non-finite log-density"));
    }
    Ok(Loss {
        objective,
        log_prob,
        penalty: penalty.item()?,
        updates: std::mem::take(&mut ctx.updates),
    })
}

/// Mean negative log-likelihood per dimension in nats, preprocessing included.
pub fn nats_per_dim(log_prob: &Tensor, pre_log_det: &Tensor, dims: usize) -> f64 {
    let n = log_prob.numel() as f64;
    -(log_prob.sum() + pre_log_det.sum()) / (n * dims as f64)
}

/// Validation bits per dimension in evaluation mode with a fixed jitter
/// stream derived from `seed`. Deterministic.
pub fn evaluate_bpd(model: &FlowModel, data: &TrainData, seed: u64, eval_batch: usize) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(EVAL_STREAM);
    let dims = model.config().dims();
    let mut total = 0.0;
    let all: Vec<usize> = (0..data.len()).collect();
    for chunk in all.chunks(eval_batch.max(1)) {
        let batch = data.batch(chunk, &mut rng, false)?;
        let lp = model.log_likelihood(&batch.x, batch.cond.as_ref())?;
        total += lp.sum() + batch.pre_log_det.sum();
    }
    Ok(-total / (data.len() as f64 * dims as f64 * LN_2))
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub step: u64,
    /// Mean training NLL (nats/dim) over the steps since the previous row.
    pub train_nll: f64,
    pub val_bpd: f64,
    pub wallclock: f64,
}

pub const METRICS_HEADER: &str = "step,train_nll,val_bpd,wallclock";

impl MetricsRow {
    pub fn to_csv_line(&self) -> String {
        format!("{},{:?},{:?},{:?}", self.step, self.train_nll, self.val_bpd, self.wallclock)
    }
}

/// Parse a metrics log written by [`Trainer::run`].
pub fn read_metrics(path: impl AsRef<Path>) -> Result<Vec<MetricsRow>> {
    let mut r = csv::Reader::from_path(path)?;
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let field = |i: usize| rec.get(i).unwrap_or("").trim().to_string();
        let num = |i: usize| field(i).parse::<f64>().map_err(|e| Error::Input(format!("metrics column {i}: {e}")));
        rows.push(MetricsRow {
            step: field(0).parse().map_err(|e| Error::Input(format!("metrics step: {e}")))?,
            train_nll: num(1)?,
            val_bpd: num(2)?,
            wallclock: num(3)?,
        });
    }
    Ok(rows)
}

/// Where a run writes its artifacts.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub dir: PathBuf,
}

impl RunOutput {
    pub fn new(dir: impl Into<PathBuf>) -> Result<Self> {
        let dir = dir.into();
        fs::create_dir_all(&dir)?;
        Ok(Self { dir })
    }

    pub fn metrics_path(&self) -> PathBuf {
        self.dir.join("metrics.csv")
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.dir.join("checkpoint.json")
    }
}

/// Outcome of [`Trainer::run`].
#[derive(Debug, Clone)]
pub struct TrainReport {
    pub rows: Vec<MetricsRow>,
    pub final_step: u64,
}

/// Owns the model and optimizer of one run.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub config: TrainConfig,
    pub model: FlowModel,
    pub adam: AdamState,
    pub step: u64,
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let model = FlowModel::new(config.model.clone(), config.seed)?;
        let adam = AdamState::new(model.params(), config.adam);
        Ok(Self {
            config,
            model,
            adam,
            step: 0,
        })
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        ckpt.config.validate()?;
        Ok(Self {
            config: ckpt.config.clone(),
            model: ckpt.model()?,
            adam: ckpt.adam.clone(),
            step: ckpt.step,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::capture(&self.config, self.step, &self.model, &self.adam)
    }

    /// Generator for the batch of update number `step + 1`. A pure function of
    /// `(seed, step)`, which makes resumed runs replay exactly.
    fn step_rng(&self, step: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        rng.set_stream(step);
        rng
    }

    fn draw_batch(&self, data: &TrainData, step: u64) -> Result<Batch> {
        let mut rng = self.step_rng(step);
        let n = data.len();
        let indices: Vec<usize> = if n >= self.config.batch_size {
            index::sample(&mut rng, n, self.config.batch_size).into_vec()
        } else {
            (0..self.config.batch_size).map(|_| rng.random_range(0..n)).collect()
        };
        let flip = self.config.flip && !matches!(data, TrainData::Points(_));
        data.batch(&indices, &mut rng, flip)
    }

    /// Training NLL (nats/dim) of the next batch without updating anything.
    pub fn peek_train_nll(&self, data: &TrainData) -> Result<f64> {
        let batch = self.draw_batch(data, self.step)?;
        let tape = Tape::new();
        let loss = nll_loss(&self.model, &tape, &batch, Mode::Train, self.config.l2)?;
        Ok(nats_per_dim(&loss.log_prob, &batch.pre_log_det, self.config.model.dims()))
    }

    /// One Adam update. Returns the batch NLL in nats/dim measured before the
    /// update. On error the trainer is left untouched.
    pub fn train_step(&mut self, data: &TrainData) -> Result<f64> {
        let batch = self.draw_batch(data, self.step)?;
        let (mut grads, nll, updates) = {
            let tape = Tape::new();
            let loss = nll_loss(&self.model, &tape, &batch, Mode::Train, self.config.l2)?;
            let objective = loss.objective.item()?;
            if !objective.is_finite() {
                return Err(Error::divergence("objective", format!("loss is {objective}")));
            }
            let grads = tape.backward(loss.objective)?;
            let nll = nats_per_dim(&loss.log_prob, &batch.pre_log_det, self.config.model.dims());
            (grads, nll, loss.updates)
        };
        clip_global_norm(&mut grads, self.config.clip_norm);
        let mut params = self.model.params().clone();
        let mut adam = self.adam.clone();
        adam_step(&mut adam, &mut params, &grads)?;
        *self.model.params_mut() = params;
        self.adam = adam;
        self.model.apply_updates(&updates);
        self.step += 1;
        Ok(nll)
    }

    /// Train until `max_steps`, logging a metrics row at step 0 (fresh runs
    /// only), every `eval_interval` steps, and at the end. With `out`, rows
    /// are appended to `metrics.csv` and a checkpoint is written at each row.
    /// On divergence the last good checkpoint is kept and the error returned.
    pub fn run(&mut self, train: &TrainData, valid: &TrainData, out: Option<&RunOutput>) -> Result<TrainReport> {
        train.check_fits(&self.config.model)?;
        valid.check_fits(&self.config.model)?;
        let started = Instant::now();
        let mut rows = Vec::new();
        let mut metrics = match out {
            Some(o) => {
                let path = o.metrics_path();
                let fresh = self.step == 0 || !path.exists();
                let mut f = OpenOptions::new()
                    .create(true)
                    .write(true)
                    .append(!fresh)
                    .truncate(fresh)
                    .open(&path)?;
                if fresh {
                    writeln!(f, "{METRICS_HEADER}")?;
                }
                Some(f)
            }
            None => None,
        };
        let mut emit = |trainer: &Self, train_nll: f64, rows: &mut Vec<MetricsRow>| -> Result<()> {
            let val_bpd = evaluate_bpd(&trainer.model, valid, trainer.config.seed, trainer.config.eval_batch)?;
            let row = MetricsRow {
                step: trainer.step,
                train_nll,
                val_bpd,
                wallclock: if trainer.config.record_wallclock {
                    started.elapsed().as_secs_f64()
                } else {
                    0.0
                },
            };
            if let (Some(f), Some(o)) = (metrics.as_mut(), out) {
                writeln!(f, "{}", row.to_csv_line())?;
                f.flush()?;
                trainer.checkpoint().save(o.checkpoint_path())?;
            }
            rows.push(row);
            Ok(())
        };

        if self.step == 0 {
            let nll = self.peek_train_nll(train)?;
            emit(self, nll, &mut rows)?;
        }
        let mut window = (0.0, 0u64);
        while self.step < self.config.max_steps {
            let nll = match self.train_step(train) {
                Ok(nll) => nll,
                Err(e) => {
                    // the failed step left the trainer untouched
                    if let (Error::Divergence { .. }, Some(o)) = (&e, out) {
                        self.checkpoint().save(o.checkpoint_path())?;
                    }
                    return Err(e);
                }
            };
            window = (window.0 + nll, window.1 + 1);
            if self.step % self.config.eval_interval == 0 || self.step == self.config.max_steps {
                emit(self, window.0 / window.1 as f64, &mut rows)?;
                window = (0.0, 0);
            }
        }
        Ok(TrainReport {
            rows,
            final_step: self.step,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datapipe::{sprite_corpus, Toy2D, Toy2DKind};
    use rand_distr::{Distribution, StandardNormal};

    fn toy_config() -> TrainConfig {
        let mut model = ModelConfig::vector(2, 4);
        model.hidden = 8;
        let mut cfg = TrainConfig::new(model);
        cfg.batch_size = 32;
        cfg.max_steps = 20;
        cfg.eval_interval = 10;
        cfg
    }

    fn toy_data(seed: u64, n: usize) -> TrainData {
        TrainData::Points(Toy2D::new(Toy2DKind::GaussianMixture, seed).sample(n).unwrap())
    }

    #[test]
    fn identity_model_loss_is_gaussian_entropy() {
        let model = FlowModel::new(ModelConfig::vector(4, 2), 0).unwrap();
        let n = 20_000;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::from_fn(&[n, 1, 1, 4], |_| StandardNormal.sample(&mut rng));
        let batch = Batch {
            x,
            pre_log_det: Tensor::zeros(&[n]),
            cond: None,
        };
        let tape = Tape::new();
        let loss = nll_loss(&model, &tape, &batch, Mode::Eval, 0.0).unwrap();
        let expected = 2.0 * (2.0 * std::f64::consts::PI).ln() + 2.0;
        // sd of the sample-mean NLL is sqrt(D/2 / n)
        assert!((loss.objective.item().unwrap() - expected).abs() < 4.0 * (2.0 / n as f64).sqrt());
    }

    #[test]
    fn identity_model_bpd_on_uniform_pixels() {
        let mut cfg = ModelConfig::image(8, 8, 1, 2);
        cfg.hidden = 4;
        let model = FlowModel::new(cfg, 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let pixels: Vec<u8> = (0..2000 * 64).map(|_| rng.random()).collect();
        let data = TrainData::Images(ImageDataset::new(8, 8, 1, pixels).unwrap());
        let bpd = evaluate_bpd(&model, &data, 0, 500).unwrap();

        // midpoint rule for E[-ln N(u) - ln|du/dx|] with x ~ U[0, 256)
        let k = 256 * 256;
        let grid = Tensor::from_fn(&[1, 1, 1, k], |i| (i as f64 + 0.5) * 256.0 / k as f64);
        let (u, ld) = logit_transform(&grid).unwrap();
        let half_ln_2pi = 0.5 * (2.0 * std::f64::consts::PI).ln();
        let nll: f64 = u.data().iter().map(|v| half_ln_2pi + 0.5 * v * v).sum::<f64>() - ld.data()[0];
        let expected = nll / k as f64 / std::f64::consts::LN_2;
        assert!((expected - 8.53).abs() < 0.01, "{expected}");
        assert!((bpd - expected).abs() < 0.03, "{bpd} vs {expected}");
    }

    #[test]
    fn zero_l2_adds_nothing() {
        let model = FlowModel::new(toy_config().model, 0).unwrap();
        let batch = toy_data(0, 8).batch(&(0..8).collect::<Vec<_>>(), &mut ChaCha8Rng::seed_from_u64(0), false).unwrap();
        let tape = Tape::new();
        let loss = nll_loss(&model, &tape, &batch, Mode::Train, 0.0).unwrap();
        assert_eq!(loss.penalty, 0.0);
        assert_eq!(loss.objective.item().unwrap(), -loss.log_prob.sum() / 8.0);
    }

    #[test]
    fn objective_decomposes() {
        let model = FlowModel::new(toy_config().model, 0).unwrap();
        let batch = toy_data(0, 8).batch(&(0..8).collect::<Vec<_>>(), &mut ChaCha8Rng::seed_from_u64(0), false).unwrap();
        let tape = Tape::new();
        let loss = nll_loss(&model, &tape, &batch, Mode::Train, 5e-5).unwrap();
        assert!(loss.penalty > 0.0);
        let direct = -loss.log_prob.sum() / 8.0 + loss.penalty;
        assert!((loss.objective.item().unwrap() - direct).abs() < 1e-12);
    }

    #[test]
    fn runs_are_deterministic() {
        let data = toy_data(1, 256);
        let valid = toy_data(2, 64);
        let a = Trainer::new(toy_config()).unwrap().run(&data, &valid, None).unwrap();
        let b = Trainer::new(toy_config()).unwrap().run(&data, &valid, None).unwrap();
        assert_eq!(a.rows, b.rows);
        assert_eq!(a.rows.iter().map(|r| r.step).collect::<Vec<_>>(), vec![0, 10, 20]);
    }

    #[test]
    fn checkpoint_roundtrip_is_bitwise() {
        let data = toy_data(1, 128);
        let mut t = Trainer::new(toy_config()).unwrap();
        for _ in 0..3 {
            t.train_step(&data).unwrap();
        }
        let back = Checkpoint::from_json(&t.checkpoint().to_json().unwrap()).unwrap();
        let model = back.model().unwrap();
        let x = toy_data(9, 16);
        let batch = x.batch(&(0..16).collect::<Vec<_>>(), &mut ChaCha8Rng::seed_from_u64(0), false).unwrap();
        let a = t.model.log_likelihood(&batch.x, None).unwrap();
        let b = model.log_likelihood(&batch.x, None).unwrap();
        assert_eq!(a.data(), b.data());
        assert_eq!(back.adam, t.adam);
    }

    #[test]
    fn tampered_hash_rejected() {
        let t = Trainer::new(toy_config()).unwrap();
        let mut ck = t.checkpoint();
        ck.config_hash.replace_range(0..1, if ck.config_hash.starts_with('0') { "1" } else { "0" });
        assert!(matches!(Checkpoint::from_json(&ck.to_json().unwrap()), Err(Error::Checkpoint(_))));
        let mut ck = t.checkpoint();
        ck.config.model.hidden += 1;
        assert!(matches!(Checkpoint::from_json(&ck.to_json().unwrap()), Err(Error::Checkpoint(_))));
        let mut ck = t.checkpoint();
        ck.version = 2;
        assert!(matches!(Checkpoint::from_json(&ck.to_json().unwrap()), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn resume_matches_uninterrupted_run() {
        let dir = tempfile::tempdir().unwrap();
        let data = toy_data(1, 256);
        let valid = toy_data(2, 64);
        let full = Trainer::new(toy_config()).unwrap().run(&data, &valid, None).unwrap();

        let out = RunOutput::new(dir.path()).unwrap();
        let mut half = toy_config();
        half.max_steps = 10;
        Trainer::new(half).unwrap().run(&data, &valid, Some(&out)).unwrap();
        let mut ck = Checkpoint::load(out.checkpoint_path()).unwrap();
        ck.config.max_steps = 20;
        let mut resumed = Trainer::from_checkpoint(&ck).unwrap();
        resumed.run(&data, &valid, Some(&out)).unwrap();
        assert_eq!(read_metrics(out.metrics_path()).unwrap(), full.rows);
    }

    #[test]
    fn image_batches_are_logit_space() {
        let d = TrainData::Images(sprite_corpus(10, 8, 1, 0).unwrap());
        let b = d.batch(&[0, 3, 5], &mut ChaCha8Rng::seed_from_u64(0), true).unwrap();
        assert_eq!(b.x.shape(), &[3, 8, 8, 1]);
        assert_eq!(b.pre_log_det.shape(), &[3]);
        let bound = (0.975f64 / 0.025).ln();
        assert!(b.x.data().iter().all(|u| u.abs() <= bound));
    }

    #[test]
    fn validation_rejects_bad_settings() {
        let mut c = toy_config();
        c.batch_size = 1;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        let mut c = toy_config();
        c.model.bn_momentum = 1.0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn loss_gradient_matches_finite_differences() {
        let mut cfg = ModelConfig::image(4, 4, 1, 1);
        cfg.hidden = 2;
        cfg.num_blocks = 1;
        cfg.final_couplings = 2;
        let mut model = FlowModel::new(cfg, 5).unwrap();
        // move away from the identity initialization
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for (_, p) in model.params_mut().iter_mut() {
            for v in p.tensor.data_mut() {
                *v += 0.3 * rng.random_range(-1.0..1.0);
            }
        }
        let data = TrainData::Images(sprite_corpus(4, 4, 1, 2).unwrap());
        let batch = data.batch(&[0, 1, 2, 3], &mut ChaCha8Rng::seed_from_u64(0), false).unwrap();
        let objective = |m: &FlowModel| {
            let tape = Tape::new();
            nll_loss(m, &tape, &batch, Mode::Train, 1e-2).unwrap().objective.item().unwrap()
        };
        let grads = {
            let tape = Tape::new();
            let loss = nll_loss(&model, &tape, &batch, Mode::Train, 1e-2).unwrap();
            tape.backward(loss.objective).unwrap()
        };
        let h = 1e-6;
        let mut checked = 0;
        let ids: Vec<_> = model.params().ids().collect();
        for id in ids {
            let analytic = grads.param(id, model.params());
            for k in (0..analytic.numel()).step_by(3) {
                let orig = model.params().get(id).tensor.data()[k];
                model.params_mut().get_mut(id).tensor.data_mut()[k] = orig + h;
                let up = objective(&model);
                model.params_mut().get_mut(id).tensor.data_mut()[k] = orig - h;
                let down = objective(&model);
                model.params_mut().get_mut(id).tensor.data_mut()[k] = orig;
                let numeric = (up - down) / (2.0 * h);
                let a = analytic.data()[k];
                let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-3);
                assert!(rel < 1e-3, "{} [{k}]: analytic {a}, numeric {numeric}", model.params().get(id).name);
                checked += 1;
            }
        }
        assert!(checked > 50);
    }
}
