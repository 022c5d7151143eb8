use std::fs;
use std::path::{Path, PathBuf};

use nvp_core::datapipe::{
    labeled_sprites, read_points_csv, sprite_corpus, write_points_csv, ImageDataset, LabeledDataset, Toy2D,
    Toy2DKind,
};
use nvp_core::latent::{
    attribute_transfer, compress, default_angles, extrapolate, interpolate, model_to_pixels, pixels_to_model,
    shuffle_attributes,
};
use nvp_core::trainer::{evaluate_bpd, AdamConfig, Checkpoint, RunOutput, TrainConfig, TrainData, Trainer};
use nvp_core::{Error, FlowModel, ModelConfig, Result, Tensor};

use crate::config::RunConfig;
use crate::grid::write_grid;

/// Resolved inputs of one invocation.
pub struct Invocation {
    pub cfg: RunConfig,
    /// Directory that relative data paths are resolved against.
    pub base: PathBuf,
    pub out: PathBuf,
    pub checkpoint: Option<PathBuf>,
}

impl Invocation {
    fn path(&self, p: &str) -> PathBuf {
        let p = Path::new(p);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base.join(p)
        }
    }

    fn checkpoint_path(&self) -> PathBuf {
        self.checkpoint.clone().unwrap_or_else(|| self.out.join("checkpoint.json"))
    }

    fn load_checkpoint(&self) -> Result<Checkpoint> {
        let path = self.checkpoint_path();
        if !path.exists() {
            return Err(Error::Input(format!("checkpoint {} does not exist", path.display())));
        }
        Checkpoint::load(path)
    }

    fn out_dir(&self) -> Result<&Path> {
        fs::create_dir_all(&self.out)?;
        Ok(&self.out)
    }
}

fn load_split(inv: &Invocation, data: &str, labels: Option<&str>) -> Result<TrainData> {
    let path = inv.path(data);
    if !path.exists() {
        return Err(Error::Input(format!("dataset {} does not exist", path.display())));
    }
    if path.extension().is_some_and(|e| e == "csv") {
        return Ok(TrainData::Points(read_points_csv(&path)?));
    }
    Ok(match labels {
        Some(l) => TrainData::Labeled(LabeledDataset::load(&path, inv.path(l))?),
        None => TrainData::Images(ImageDataset::load(&path)?),
    })
}

fn split_tail(data: TrainData, k: usize) -> Result<(TrainData, TrainData)> {
    let n = data.len();
    if k < 2 || k >= n {
        return Err(Error::Config(format!("cannot hold out {k} of {n} samples for validation")));
    }
    let cut = n - k;
    Ok(match data {
        TrainData::Images(d) => (TrainData::Images(d.subset(0..cut)), TrainData::Images(d.subset(cut..n))),
        TrainData::Labeled(d) => (TrainData::Labeled(d.subset(0..cut)), TrainData::Labeled(d.subset(cut..n))),
        TrainData::Points(p) => {
            let d = p.per_sample();
            let (a, b) = p.data().split_at(cut * d);
            (
                TrainData::Points(Tensor::new(vec![cut, d], a.to_vec())?),
                TrainData::Points(Tensor::new(vec![k, d], b.to_vec())?),
            )
        }
    })
}

/// Training and validation splits named by the configuration.
pub fn load_data(inv: &Invocation) -> Result<(TrainData, TrainData)> {
    let cfg = &inv.cfg;
    let data = cfg.data.as_deref().ok_or_else(|| Error::Config("`data` is not set".into()))?;
    if let Some(kind) = data.strip_prefix("toy:") {
        let kind: Toy2DKind = kind.parse()?;
        let train = Toy2D::new(kind, cfg.seed).sample(cfg.toy_samples)?;
        let valid = Toy2D::new(kind, cfg.seed.wrapping_add(1)).sample(cfg.toy_valid_samples)?;
        return Ok((TrainData::Points(train), TrainData::Points(valid)));
    }
    let full = load_split(inv, data, cfg.labels.as_deref())?;
    match &cfg.valid_data {
        Some(v) => Ok((full, load_split(inv, v, cfg.valid_labels.as_deref())?)),
        None => {
            let k = ((full.len() as f64 * cfg.valid_fraction).round() as usize).max(2);
            split_tail(full, k)
        }
    }
}

pub fn model_config(cfg: &RunConfig, data: &TrainData) -> ModelConfig {
    let [h, w, c] = data.sample_shape();
    let mut m = match data {
        TrainData::Points(_) => {
            let mut m = ModelConfig::vector(c, cfg.final_couplings);
            m.hidden = cfg.hidden.unwrap_or(64);
            m.kernel_size = cfg.kernel_size.unwrap_or(1);
            m.batch_norm = cfg.batch_norm.unwrap_or(false);
            m
        }
        _ => {
            let mut m = ModelConfig::image(h, w, c, cfg.levels);
            m.couplings_per_stage = cfg.couplings_per_stage;
            m.final_couplings = cfg.final_couplings;
            m.final_mask = cfg.final_mask;
            m.hidden = cfg.hidden.unwrap_or(16);
            m.kernel_size = cfg.kernel_size.unwrap_or(3);
            m.batch_norm = cfg.batch_norm.unwrap_or(true);
            m
        }
    };
    m.num_blocks = cfg.num_blocks;
    m.bn_momentum = cfg.bn_momentum;
    m.bn_eps = cfg.bn_eps;
    m.cond_dim = data.cond_dim();
    m
}

pub fn train_config(cfg: &RunConfig, model: ModelConfig) -> TrainConfig {
    TrainConfig {
        model,
        batch_size: cfg.batch_size,
        max_steps: cfg.max_steps,
        adam: AdamConfig {
            lr: cfg.lr,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.adam_eps,
        },
        l2: cfg.l2,
        clip_norm: cfg.clip_norm,
        seed: cfg.seed,
        eval_interval: cfg.eval_interval,
        eval_batch: cfg.eval_batch,
        flip: cfg.flip,
        record_wallclock: cfg.record_wallclock,
    }
}

pub fn train(inv: &Invocation) -> Result<String> {
    let (train, valid) = load_data(inv)?;
    let out = RunOutput::new(inv.out_dir()?)?;
    let mut trainer = match &inv.checkpoint {
        Some(_) => {
            let mut t = Trainer::from_checkpoint(&inv.load_checkpoint()?)?;
            t.config.max_steps = inv.cfg.max_steps;
            t
        }
        None => Trainer::new(train_config(&inv.cfg, model_config(&inv.cfg, &train)))?,
    };
    let report = trainer.run(&train, &valid, Some(&out))?;
    let msg = match report.rows.last() {
        Some(r) => format!("step {} train_nll {:?} val_bpd {:?}", r.step, r.train_nll, r.val_bpd),
        None => format!("already at step {}", report.final_step),
    };
    Ok(msg)
}

pub fn eval(inv: &Invocation) -> Result<String> {
    let ck = inv.load_checkpoint()?;
    let model = ck.model()?;
    let (_, valid) = load_data(inv)?;
    valid.check_fits(model.config())?;
    let bpd = evaluate_bpd(&model, &valid, ck.config.seed, ck.config.eval_batch)?;
    let line = format!("val_bpd {bpd:?}");
    fs::write(inv.out_dir()?.join("eval.txt"), format!("{line}\n"))?;
    Ok(line)
}

fn image_dims(model: &FlowModel) -> Result<[usize; 3]> {
    let c = model.config();
    if c.height == 1 && c.width == 1 {
        return Err(Error::Config("this command needs an image model".into()));
    }
    Ok([c.height, c.width, c.channels])
}

fn split_images(pixels: &[u8], per: usize) -> Vec<Vec<u8>> {
    pixels.chunks(per).map(<[u8]>::to_vec).collect()
}

/// Attribute rows cycling through every combination of `k` bits.
fn attribute_cycle(n: usize, k: usize) -> Tensor {
    Tensor::from_fn(&[n, k], |i| {
        let (row, bit) = (i / k, i % k);
        ((row % (1 << k)) >> bit & 1) as f64
    })
}

fn cond_for(model: &FlowModel, n: usize) -> Option<Tensor> {
    let k = model.config().cond_dim;
    (k > 0).then(|| attribute_cycle(n, k))
}

pub fn sample(inv: &Invocation) -> Result<String> {
    let model = inv.load_checkpoint()?.model()?;
    let cfg = &inv.cfg;
    let out = inv.out_dir()?;
    let cond = cond_for(&model, cfg.n);
    let x = model.sample(cfg.n, cfg.seed, cond.as_ref())?;
    let mc = model.config();
    if mc.height == 1 && mc.width == 1 {
        let path = out.join("samples.csv");
        write_points_csv(&path, &x.reshape(&[cfg.n, mc.channels])?)?;
        return Ok(format!("wrote {}", path.display()));
    }
    let [h, w, c] = image_dims(&model)?;
    let path = out.join("samples.png");
    write_grid(&path, &split_images(&model_to_pixels(&x), h * w * c), h, w, c, cfg.grid_cols)?;
    Ok(format!("wrote {}", path.display()))
}

/// Pixels and attributes of validation items `indices`.
fn pick_inputs(inv: &Invocation, indices: &[usize]) -> Result<(Tensor, Option<Tensor>)> {
    let (_, valid) = load_data(inv)?;
    if let Some(&bad) = indices.iter().find(|&&i| i >= valid.len()) {
        return Err(Error::Config(format!(
            "input index {bad} out of range for {} validation samples",
            valid.len()
        )));
    }
    match valid {
        TrainData::Images(d) => Ok((d.batch(indices), None)),
        TrainData::Labeled(d) => Ok((d.images.batch(indices), Some(d.attribute_batch(indices)))),
        TrainData::Points(_) => Err(Error::Config("this command needs image data".into())),
    }
}

pub fn interpolate_cmd(inv: &Invocation) -> Result<String> {
    let model = inv.load_checkpoint()?.model()?;
    let [h, w, c] = image_dims(&model)?;
    let cfg = &inv.cfg;
    if cfg.inputs.len() != 4 {
        return Err(Error::Config(format!(
            "interpolation needs exactly four inputs, got {}",
            cfg.inputs.len()
        )));
    }
    let (pixels, cond) = pick_inputs(inv, &cfg.inputs)?;
    let angles = cfg.angles.clone().unwrap_or_else(default_angles);
    let grid = interpolate(&model, &pixels_to_model(&pixels)?, &angles, &angles, cond.as_ref())?;
    let path = inv.out_dir()?.join("interpolate.png");
    write_grid(&path, &split_images(&model_to_pixels(&grid), h * w * c), h, w, c, angles.len())?;
    Ok(format!("wrote {} ({}x{} grid)", path.display(), angles.len(), angles.len()))
}

pub fn compress_cmd(inv: &Invocation) -> Result<String> {
    let model = inv.load_checkpoint()?.model()?;
    let [h, w, c] = image_dims(&model)?;
    let cfg = &inv.cfg;
    let (pixels, cond) = pick_inputs(inv, &cfg.inputs)?;
    let outs = compress(&model, &pixels_to_model(&pixels)?, &cfg.fractions, cfg.seed, cond.as_ref())?;
    let per = h * w * c;
    let originals = split_images(&pixels.data().iter().map(|&v| v as u8).collect::<Vec<_>>(), per);
    let decoded: Vec<Vec<Vec<u8>>> = outs.iter().map(|o| split_images(&model_to_pixels(o), per)).collect();
    let mut cells = Vec::new();
    for (i, orig) in originals.into_iter().enumerate() {
        cells.push(orig);
        cells.extend(decoded.iter().map(|d| d[i].clone()));
    }
    let path = inv.out_dir()?.join("compress.png");
    write_grid(&path, &cells, h, w, c, 1 + cfg.fractions.len())?;
    Ok(format!("wrote {}", path.display()))
}

pub fn extrapolate_cmd(inv: &Invocation) -> Result<String> {
    let model = inv.load_checkpoint()?.model()?;
    let [h, w, c] = image_dims(&model)?;
    let cfg = &inv.cfg;
    let cond = cond_for(&model, cfg.n);
    let x = extrapolate(&model, cfg.factor, cfg.n, cfg.seed, cond.as_ref())?;
    let (bh, bw) = (h * cfg.factor, w * cfg.factor);
    let path = inv.out_dir()?.join("extrapolate.png");
    write_grid(&path, &split_images(&model_to_pixels(&x), bh * bw * c), bh, bw, c, cfg.grid_cols)?;
    Ok(format!("wrote {} ({bh}x{bw} samples)", path.display()))
}

pub fn attr_transfer_cmd(inv: &Invocation) -> Result<String> {
    let model = inv.load_checkpoint()?.model()?;
    if model.config().cond_dim == 0 {
        return Err(Error::Config("attr-transfer needs a checkpoint trained with labels".into()));
    }
    let [h, w, c] = image_dims(&model)?;
    let cfg = &inv.cfg;
    let (pixels, cond) = pick_inputs(inv, &(0..cfg.n).collect::<Vec<_>>())?;
    let y = cond.ok_or_else(|| Error::Config("attr-transfer needs labeled data".into()))?;
    let y_new = shuffle_attributes(&y, cfg.seed);
    let x_new = attribute_transfer(&model, &pixels_to_model(&pixels)?, &y, &y_new)?;
    let per = h * w * c;
    let mut cells = split_images(&pixels.data().iter().map(|&v| v as u8).collect::<Vec<_>>(), per);
    cells.extend(split_images(&model_to_pixels(&x_new), per));
    let out = inv.out_dir()?;
    let path = out.join("attr_transfer.png");
    write_grid(&path, &cells, h, w, c, cfg.n)?;
    let k = y.shape()[1];
    let mut table = String::from("index,original,new\n");
    for i in 0..cfg.n {
        let bits = |t: &Tensor| t.data()[i * k..(i + 1) * k].iter().map(|v| (*v as u8).to_string()).collect::<String>();
        table.push_str(&format!("{i},{},{}\n", bits(&y), bits(&y_new)));
    }
    fs::write(out.join("attr_transfer.csv"), table)?;
    Ok(format!("wrote {}", path.display()))
}

pub fn generate(inv: &Invocation) -> Result<String> {
    let cfg = &inv.cfg;
    let out = inv.out_dir()?;
    let valid_seed = cfg.seed.wrapping_add(1_000_003);
    if let Some(kind) = cfg.kind.strip_prefix("toy:") {
        let kind: Toy2DKind = kind.parse()?;
        write_points_csv(out.join("train.csv"), &Toy2D::new(kind, cfg.seed).sample(cfg.count)?)?;
        write_points_csv(out.join("valid.csv"), &Toy2D::new(kind, valid_seed).sample(cfg.valid_count)?)?;
        return Ok(format!("wrote train.csv and valid.csv to {}", out.display()));
    }
    match cfg.kind.as_str() {
        "sprites" => {
            sprite_corpus(cfg.count, cfg.size, cfg.channels, cfg.seed)?.save(out.join("train.nvpd"))?;
            sprite_corpus(cfg.valid_count, cfg.size, cfg.channels, valid_seed)?.save(out.join("valid.nvpd"))?;
        }
        "labeled-sprites" => {
            for (name, n, seed) in [("train", cfg.count, cfg.seed), ("valid", cfg.valid_count, valid_seed)] {
                let d = labeled_sprites(n, cfg.size, cfg.channels, seed)?;
                d.images.save(out.join(format!("{name}.nvpd")))?;
                d.save_attributes(out.join(format!("{name}_labels.csv")))?;
            }
        }
        other => {
            return Err(Error::Config(format!(
                "unknown kind `{other}` (expected sprites, labeled-sprites or toy:<density>)"
            )))
        }
    }
    Ok(format!("wrote {} datasets to {}", cfg.kind, out.display()))
}
