//! Run configuration: every tunable with a documented default, loadable
//! from a plain-text `key = value` file. Unknown keys fail fast.
//! Precedence is defaults < config file < command-line overrides, realized
//! by applying `set` calls in that order.

use crate::encoder::EncoderConfig;
use crate::error::{Result, SpmixError};
use crate::eval::ProbeConfig;
use crate::imaging::AugmentationPolicy;
use crate::saliency::RatioOrder;
use crate::train::{AdamWConfig, TrainConfig, Variant};
use std::path::Path;

#[derive(Clone, Debug)]
pub struct RunConfig {
    pub alpha: f64,
    pub grid: usize,
    pub windows: Vec<usize>,
    pub noise: f64,
    pub key_momentum: f64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub eps: f64,
    pub temperature: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub variant: Variant,
    pub input_size: usize,
    pub token_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub proj_dim: usize,
    pub stem_c1: usize,
    pub stem_c2: usize,
    pub mlp_ratio: usize,
    pub use_pos_emb: bool,
    pub ratio_order: RatioOrder,
    pub mixup_beta: f64,
    pub many_min: usize,
    pub few_max: usize,
    pub probe_epochs: usize,
    pub probe_lr: f64,
    pub crop_scale_min: f64,
    pub crop_scale_max: f64,
    pub hflip_prob: f64,
    pub jitter: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            alpha: 0.8,
            grid: 8,
            windows: vec![9, 25, 49],
            noise: 0.1,
            key_momentum: 0.99,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            weight_decay: 0.1,
            eps: 1e-8,
            temperature: 0.2,
            batch_size: 32,
            epochs: 30,
            seed: 0,
            variant: Variant::Spmix,
            input_size: 64,
            token_dim: 64,
            depth: 2,
            heads: 4,
            proj_dim: 32,
            stem_c1: 8,
            stem_c2: 16,
            mlp_ratio: 2,
            use_pos_emb: true,
            ratio_order: RatioOrder::ClipFirst,
            mixup_beta: 1.0,
            many_min: 1000,
            few_max: 200,
            probe_epochs: 300,
            probe_lr: 0.5,
            crop_scale_min: 0.6,
            crop_scale_max: 1.0,
            hflip_prob: 0.5,
            jitter: 0.2,
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| SpmixError::config(format!("invalid value '{value}' for key '{key}'")))
}

impl RunConfig {
    /// Sets one key; the single parsing path for files and flag overrides.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        match key {
            "alpha" => self.alpha = parse(key, value)?,
            "grid" => self.grid = parse(key, value)?,
            "windows" => {
                self.windows = value
                    .split(',')
                    .map(|w| parse("windows", w.trim()))
                    .collect::<Result<Vec<usize>>>()?;
            }
            "noise" => self.noise = parse(key, value)?,
            "key_momentum" => self.key_momentum = parse(key, value)?,
            "lr" => self.lr = parse(key, value)?,
            "beta1" => self.beta1 = parse(key, value)?,
            "beta2" => self.beta2 = parse(key, value)?,
            "weight_decay" => self.weight_decay = parse(key, value)?,
            "eps" => self.eps = parse(key, value)?,
            "temperature" => self.temperature = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "epochs" => self.epochs = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "variant" => self.variant = value.parse()?,
            "input_size" => self.input_size = parse(key, value)?,
            "token_dim" => self.token_dim = parse(key, value)?,
            "depth" => self.depth = parse(key, value)?,
            "heads" => self.heads = parse(key, value)?,
            "proj_dim" => self.proj_dim = parse(key, value)?,
            "stem_c1" => self.stem_c1 = parse(key, value)?,
            "stem_c2" => self.stem_c2 = parse(key, value)?,
            "mlp_ratio" => self.mlp_ratio = parse(key, value)?,
            "use_pos_emb" => self.use_pos_emb = parse(key, value)?,
            "ratio_order" => self.ratio_order = value.parse()?,
            "mixup_beta" => self.mixup_beta = parse(key, value)?,
            "many_min" => self.many_min = parse(key, value)?,
            "few_max" => self.few_max = parse(key, value)?,
            "probe_epochs" => self.probe_epochs = parse(key, value)?,
            "probe_lr" => self.probe_lr = parse(key, value)?,
            "crop_scale_min" => self.crop_scale_min = parse(key, value)?,
            "crop_scale_max" => self.crop_scale_max = parse(key, value)?,
            "hflip_prob" => self.hflip_prob = parse(key, value)?,
            "jitter" => self.jitter = parse(key, value)?,
            other => {
                return Err(SpmixError::config(format!(
                    "unknown configuration key '{other}'"
                )))
            }
        }
        Ok(())
    }

    /// Applies a `key = value` file (# comments, blank lines allowed).
    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path).map_err(|e| SpmixError::io(path, e))?;
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(SpmixError::config(format!(
                    "{}:{}: expected 'key = value', got '{raw}'",
                    path.display(),
                    lineno + 1
                )));
            };
            self.set(key.trim(), value)?;
        }
        Ok(())
    }

    pub fn encoder_config(&self) -> EncoderConfig {
        EncoderConfig {
            input_size: self.input_size,
            grid: self.grid,
            token_dim: self.token_dim,
            depth: self.depth,
            heads: self.heads,
            proj_dim: self.proj_dim,
            stem_channels: (self.stem_c1, self.stem_c2),
            mlp_ratio: self.mlp_ratio,
            use_pos_emb: self.use_pos_emb,
        }
    }

    pub fn augment_policy(&self) -> AugmentationPolicy {
        AugmentationPolicy {
            crop_scale: (self.crop_scale_min, self.crop_scale_max),
            hflip_prob: self.hflip_prob,
            jitter: self.jitter,
            seed: self.seed,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            variant: self.variant,
            epochs: self.epochs,
            batch_size: self.batch_size,
            seed: self.seed,
            optimizer: AdamWConfig {
                lr: self.lr,
                beta1: self.beta1,
                beta2: self.beta2,
                eps: self.eps,
                weight_decay: self.weight_decay,
            },
            temperature: self.temperature,
            alpha: self.alpha,
            noise_amplitude: self.noise,
            windows: self.windows.clone(),
            ratio_order: self.ratio_order,
            key_momentum: self.key_momentum,
            mixup_beta: self.mixup_beta,
            augment: self.augment_policy(),
        }
    }

    pub fn probe_config(&self) -> ProbeConfig {
        ProbeConfig {
            epochs: self.probe_epochs,
            lr: self.probe_lr,
            seed: self.seed,
        }
    }

    /// Every resolved key, one per line, for run logs.
    pub fn summary(&self) -> String {
        let order = match self.ratio_order {
            RatioOrder::ClipFirst => "clip_first",
            RatioOrder::AverageFirst => "average_first",
        };
        format!(
            "alpha = {}\ngrid = {}\nwindows = {}\nnoise = {}\nkey_momentum = {}\nlr = {}\n\
             beta1 = {}\nbeta2 = {}\nweight_decay = {}\neps = {}\ntemperature = {}\n\
             batch_size = {}\nepochs = {}\nseed = {}\nvariant = {}\ninput_size = {}\n\
             token_dim = {}\ndepth = {}\nheads = {}\nproj_dim = {}\nstem_c1 = {}\n\
             stem_c2 = {}\nmlp_ratio = {}\nuse_pos_emb = {}\nratio_order = {}\n\
             mixup_beta = {}\nmany_min = {}\nfew_max = {}\nprobe_epochs = {}\n\
             probe_lr = {}\ncrop_scale_min = {}\ncrop_scale_max = {}\nhflip_prob = {}\njitter = {}",
            self.alpha,
            self.grid,
            self.windows
                .iter()
                .map(usize::to_string)
                .collect::<Vec<_>>()
                .join(","),
            self.noise,
            self.key_momentum,
            self.lr,
            self.beta1,
            self.beta2,
            self.weight_decay,
            self.eps,
            self.temperature,
            self.batch_size,
            self.epochs,
            self.seed,
            self.variant,
            self.input_size,
            self.token_dim,
            self.depth,
            self.heads,
            self.proj_dim,
            self.stem_c1,
            self.stem_c2,
            self.mlp_ratio,
            self.use_pos_emb,
            order,
            self.mixup_beta,
            self.many_min,
            self.few_max,
            self.probe_epochs,
            self.probe_lr,
            self.crop_scale_min,
            self.crop_scale_max,
            self.hflip_prob,
            self.jitter,
        )
    }
}
