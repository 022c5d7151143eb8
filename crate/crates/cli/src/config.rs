//! Flat `key = value` run configuration.
//!
//! Blank lines and lines starting with `#` are ignored. Every key is optional;
//! unknown keys and unparsable values are configuration errors. Overrides
//! given on the command line are applied after the file.
//!
//! | key | default | meaning |
//! |-----|---------|---------|
//! | `data` | - | training data: `.nvpd` images, `.csv` points, or `toy:<kind>` |
//! | `labels` | - | attribute CSV for `data`; makes the model conditional |
//! | `valid_data`, `valid_labels` | - | validation split; otherwise held out from `data` |
//! | `valid_fraction` | 0.1 | held-out share when `valid_data` is absent |
//! | `toy_samples`, `toy_valid_samples` | 10000, 2000 | sizes of generated toy splits |
//! | `seed` | 0 | master seed (`--seed` overrides) |
//! | `levels` | 2 | scales of an image model |
//! | `couplings_per_stage` | 3 | couplings per mask type in non-final scales |
//! | `final_couplings` | 4 | couplings in the last scale |
//! | `final_mask` | checkerboard | `checkerboard` or `channelwise` |
//! | `hidden` | 16 (images), 64 (points) | conditioner width at the first scale |
//! | `num_blocks` | 2 | residual blocks per conditioner |
//! | `kernel_size` | 3 | odd conditioner kernel size (1 for points) |
//! | `batch_norm` | true (images), false (points) | batch normalization |
//! | `bn_momentum`, `bn_eps` | 0.99, 1e-5 | |
//! | `batch_size`, `max_steps` | 64, 1000 | |
//! | `lr`, `beta1`, `beta2`, `adam_eps` | 1e-3, 0.9, 0.999, 1e-8 | Adam |
//! | `l2`, `clip_norm` | 5e-5, 100 | weight-scale penalty and gradient clipping |
//! | `eval_interval`, `eval_batch` | 100, 256 | |
//! | `flip`, `record_wallclock` | true, false | |
//! | `n`, `grid_cols` | 16, 8 | sample count and grid width |
//! | `inputs` | 0,1,2,3 | dataset indices used by manipulations |
//! | `angles` | 8 multiples of pi/4 | interpolation angles (radians) |
//! | `fractions` | 1,0.5,0.25,0.125,0.0625 | compression keep fractions |
//! | `factor` | 2 | extrapolation factor |
//! | `kind`, `count`, `valid_count`, `size`, `channels` | sprites, 2000, 400, 8, 1 | `generate` |

use std::fs;
use std::path::Path;
use std::str::FromStr;

use nvp_core::flow::MaskKind;
use nvp_core::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub data: Option<String>,
    pub labels: Option<String>,
    pub valid_data: Option<String>,
    pub valid_labels: Option<String>,
    pub valid_fraction: f64,
    pub toy_samples: usize,
    pub toy_valid_samples: usize,
    pub seed: u64,

    pub levels: usize,
    pub couplings_per_stage: usize,
    pub final_couplings: usize,
    pub final_mask: MaskKind,
    pub hidden: Option<usize>,
    pub num_blocks: usize,
    pub kernel_size: Option<usize>,
    pub batch_norm: Option<bool>,
    pub bn_momentum: f64,
    pub bn_eps: f64,

    pub batch_size: usize,
    pub max_steps: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub l2: f64,
    pub clip_norm: f64,
    pub eval_interval: u64,
    pub eval_batch: usize,
    pub flip: bool,
    pub record_wallclock: bool,

    pub n: usize,
    pub grid_cols: usize,
    pub inputs: Vec<usize>,
    pub angles: Option<Vec<f64>>,
    pub fractions: Vec<f64>,
    pub factor: usize,

    pub kind: String,
    pub count: usize,
    pub valid_count: usize,
    pub size: usize,
    pub channels: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            data: None,
            labels: None,
            valid_data: None,
            valid_labels: None,
            valid_fraction: 0.1,
            toy_samples: 10_000,
            toy_valid_samples: 2_000,
            seed: 0,
            levels: 2,
            couplings_per_stage: 3,
            final_couplings: 4,
            final_mask: MaskKind::Checkerboard,
            hidden: None,
            num_blocks: 2,
            kernel_size: None,
            batch_norm: None,
            bn_momentum: 0.99,
            bn_eps: 1e-5,
            batch_size: 64,
            max_steps: 1000,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            l2: 5e-5,
            clip_norm: 100.0,
            eval_interval: 100,
            eval_batch: 256,
            flip: true,
            record_wallclock: false,
            n: 16,
            grid_cols: 8,
            inputs: vec![0, 1, 2, 3],
            angles: None,
            fractions: nvp_core::latent::DEFAULT_KEEP_FRACTIONS.to_vec(),
            factor: 2,
            kind: "sprites".into(),
            count: 2000,
            valid_count: 400,
            size: 8,
            channels: 1,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value
        .parse()
        .map_err(|e| Error::Config(format!("`{key}`: cannot parse `{value}`: {e}")))
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>>
where
    T::Err: std::fmt::Display,
{
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse(key, s))
        .collect()
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg = Self::default();
        cfg.apply_text(&text)?;
        Ok(cfg)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            self.apply_pair(line)
                .map_err(|e| Error::Config(format!("line {}: {e}", lineno + 1)))?;
        }
        Ok(())
    }

    /// Apply one `key=value` assignment.
    pub fn apply_pair(&mut self, pair: &str) -> Result<()> {
        let (key, value) = pair
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("expected key=value, got `{pair}`")))?;
        self.set(key.trim(), value.trim())
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let opt = |v: &str| (!v.is_empty()).then(|| v.to_string());
        match key {
            "data" => self.data = opt(v),
            "labels" => self.labels = opt(v),
            "valid_data" => self.valid_data = opt(v),
            "valid_labels" => self.valid_labels = opt(v),
            "valid_fraction" => self.valid_fraction = parse(key, v)?,
            "toy_samples" => self.toy_samples = parse(key, v)?,
            "toy_valid_samples" => self.toy_valid_samples = parse(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            "levels" => self.levels = parse(key, v)?,
            "couplings_per_stage" => self.couplings_per_stage = parse(key, v)?,
            "final_couplings" => self.final_couplings = parse(key, v)?,
            "final_mask" => {
                self.final_mask = match v {
                    "checkerboard" => MaskKind::Checkerboard,
                    "channelwise" | "channel" => MaskKind::Channelwise,
                    other => return Err(Error::Config(format!("`final_mask`: unknown mask `{other}`"))),
                }
            }
            "hidden" => self.hidden = Some(parse(key, v)?),
            "num_blocks" => self.num_blocks = parse(key, v)?,
            "kernel_size" => self.kernel_size = Some(parse(key, v)?),
            "batch_norm" => self.batch_norm = Some(parse(key, v)?),
            "bn_momentum" => self.bn_momentum = parse(key, v)?,
            "bn_eps" => self.bn_eps = parse(key, v)?,
            "batch_size" => self.batch_size = parse(key, v)?,
            "max_steps" => self.max_steps = parse(key, v)?,
            "lr" => self.lr = parse(key, v)?,
            "beta1" => self.beta1 = parse(key, v)?,
            "beta2" => self.beta2 = parse(key, v)?,
            "adam_eps" => self.adam_eps = parse(key, v)?,
            "l2" => self.l2 = parse(key, v)?,
            "clip_norm" => self.clip_norm = parse(key, v)?,
            "eval_interval" => self.eval_interval = parse(key, v)?,
            "eval_batch" => self.eval_batch = parse(key, v)?,
            "flip" => self.flip = parse(key, v)?,
            "record_wallclock" => self.record_wallclock = parse(key, v)?,
            "n" => self.n = parse(key, v)?,
            "grid_cols" => self.grid_cols = parse(key, v)?,
            "inputs" => self.inputs = parse_list(key, v)?,
            "angles" => self.angles = Some(parse_list(key, v)?),
            "fractions" => self.fractions = parse_list(key, v)?,
            "factor" => self.factor = parse(key, v)?,
            "kind" => self.kind = v.to_string(),
            "count" => self.count = parse(key, v)?,
            "valid_count" => self.valid_count = parse(key, v)?,
            "size" => self.size = parse(key, v)?,
            "channels" => self.channels = parse(key, v)?,
            other => return Err(Error::Config(format!("unknown key `{other}`"))),
        }
        Ok(())
    }

    /// Range checks that do not depend on the data.
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.valid_fraction > 0.0 && self.valid_fraction < 1.0) {
            return fail("valid_fraction must lie in (0, 1)");
        }
        if self.n == 0 || self.grid_cols == 0 {
            return fail("n and grid_cols must be positive");
        }
        if self.fractions.iter().any(|f| !(0.0..=1.0).contains(f)) {
            return fail("fractions must lie in [0, 1]");
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_and_lists() {
        let mut c = RunConfig::default();
        c.apply_text("# comment\n\nlevels = 3\ninputs = 4, 5,6,7\nflip=false\nfinal_mask = channelwise\n")
            .unwrap();
        assert_eq!(c.levels, 3);
        assert_eq!(c.inputs, vec![4, 5, 6, 7]);
        assert!(!c.flip);
        assert_eq!(c.final_mask, MaskKind::Channelwise);
    }

    #[test]
    fn overrides_win() {
        let mut c = RunConfig::default();
        c.apply_text("max_steps = 10").unwrap();
        c.apply_pair("max_steps=20").unwrap();
        assert_eq!(c.max_steps, 20);
    }

    #[test]
    fn bad_input_is_config_error() {
        let mut c = RunConfig::default();
        assert!(matches!(c.apply_text("nonsense = 1"), Err(Error::Config(_))));
        assert!(matches!(c.apply_text("levels = two"), Err(Error::Config(_))));
        assert!(matches!(c.apply_pair("levels"), Err(Error::Config(_))));
    }
}
