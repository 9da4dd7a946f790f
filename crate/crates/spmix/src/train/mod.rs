//! Representation training: variant dispatch (CE baselines, vanilla mixup,
//! patch-only, saliency-only, full SPMix), batch assembly, and the epoch
//! loop wiring saliency ratios, feature mixup, the query/key encoders, the
//! supervised contrastive loss, AdamW, and the key momentum update.

mod adamw;
mod sampler;
mod scl;

pub use adamw::{AdamW, AdamWConfig};
pub use sampler::{sample_balanced_batch, shuffled_epoch_order, BatchItem};
pub use scl::{scl_loss, supcon_pool_loss, SCLBatch};

use crate::dataset::LoadedDataset;
use crate::encoder::{
    encode_mixed_batch, encode_pooled, image_batch, init_encoder_params, EncoderConfig,
    EncoderPair, ParamStore,
};
use crate::error::{Result, SpmixError};
use crate::imaging::{augment_view, AugmentationPolicy, ImageTensor};
use crate::mixup::{build_mixed_pair, ratio_tensor_batch};
use crate::saliency::{PatchRatioGrid, RatioOrder, RatioPipeline};
use crate::tensor::{detached_row_max, Graph, Tensor};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution};

/// Training variants: the Table-2 grid (patch-based mixup x saliency
/// guidance) plus the cross-entropy baselines.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    Ce,
    CeResample,
    VanillaMixup,
    PatchOnly,
    SaliencyOnly,
    Spmix,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::Ce,
        Variant::CeResample,
        Variant::VanillaMixup,
        Variant::PatchOnly,
        Variant::SaliencyOnly,
        Variant::Spmix,
    ];

    /// The four rows of the ablation grid, in (patch, saliency) order:
    /// (no, no), (yes, no), (no, yes), (yes, yes).
    pub const ABLATION_GRID: [Variant; 4] = [
        Variant::VanillaMixup,
        Variant::PatchOnly,
        Variant::SaliencyOnly,
        Variant::Spmix,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Variant::Ce => "ce",
            Variant::CeResample => "ce-resample",
            Variant::VanillaMixup => "vanilla-mixup",
            Variant::PatchOnly => "patch-only",
            Variant::SaliencyOnly => "saliency-only",
            Variant::Spmix => "spmix",
        }
    }

    pub fn uses_scl(&self) -> bool {
        !matches!(self, Variant::Ce | Variant::CeResample)
    }

    pub fn patch_based(&self) -> bool {
        matches!(self, Variant::PatchOnly | Variant::Spmix)
    }

    pub fn saliency_guided(&self) -> bool {
        matches!(self, Variant::SaliencyOnly | Variant::Spmix)
    }
}

impl std::str::FromStr for Variant {
    type Err = SpmixError;
    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .iter()
            .find(|v| v.name() == s)
            .copied()
            .ok_or_else(|| {
                SpmixError::config(format!(
                    "unknown variant '{s}' (expected one of ce, ce-resample, vanilla-mixup, patch-only, saliency-only, spmix)"
                ))
            })
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub variant: Variant,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub optimizer: AdamWConfig,
    pub temperature: f64,
    pub alpha: f64,
    pub noise_amplitude: f64,
    pub windows: Vec<usize>,
    pub ratio_order: RatioOrder,
    pub key_momentum: f64,
    /// Beta(a, a) shape for the vanilla/patch-only random ratios.
    pub mixup_beta: f64,
    pub augment: AugmentationPolicy,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            variant: Variant::Spmix,
            epochs: 30,
            batch_size: 32,
            seed: 0,
            optimizer: AdamWConfig::default(),
            temperature: 0.2,
            alpha: 0.8,
            noise_amplitude: 0.1,
            windows: crate::saliency::DEFAULT_WINDOWS.to_vec(),
            ratio_order: RatioOrder::ClipFirst,
            key_momentum: 0.99,
            mixup_beta: 1.0,
            augment: AugmentationPolicy::default(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct EpochStats {
    pub epoch: usize,
    pub mean_loss: f64,
    pub mean_grad_norm: f64,
}

impl EpochStats {
    /// Deterministic metrics-log line (wall time is logged separately to
    /// stderr so reruns stay byte-identical).
    pub fn log_line(&self) -> String {
        format!(
            "epoch={} loss={:.9} grad_norm={:.9}",
            self.epoch, self.mean_loss, self.mean_grad_norm
        )
    }
}

pub struct TrainOutcome {
    /// Trained query-side parameters (plus `head.*` for CE variants).
    pub params: ParamStore,
    /// Key-network parameters for SCL variants.
    pub key_params: Option<ParamStore>,
    pub history: Vec<EpochStats>,
}

/// Softmax cross-entropy over `[B, K]` logits with integer labels,
/// averaged over the batch.
pub fn cross_entropy_loss(g: &mut Graph, logits: &Tensor, labels: &[usize]) -> Result<Tensor> {
    if logits.ndim() != 2 || logits.shape()[0] != labels.len() {
        return Err(SpmixError::contract(format!(
            "logits {:?} do not match {} labels",
            logits.shape(),
            labels.len()
        )));
    }
    let (b, k) = (logits.shape()[0], logits.shape()[1]);
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(SpmixError::contract(format!(
            "label {bad} out of range for {k} classes"
        )));
    }
    let shift = detached_row_max(logits);
    let shifted = g.sub(logits, &shift)?;
    let exp = g.exp(&shifted)?;
    let denom = g.sum_axis(&exp, 1, true)?;
    let log_denom = g.log(&denom)?;
    let log_prob = g.sub(&shifted, &log_denom)?;
    let mut one_hot = vec![0.0; b * k];
    for (i, &l) in labels.iter().enumerate() {
        one_hot[i * k + l] = 1.0;
    }
    let picked = g.mul(&log_prob, &Tensor::from_parts(vec![b, k], one_hot, false))?;
    let total = g.sum_all(&picked)?;
    g.mul_scalar(&total, -1.0 / b as f64)
}

/// One prepared slot of an SCL batch: both operand views plus ratio grids.
struct PreparedSlot {
    tail1: ImageTensor,
    tail2: ImageTensor,
    head1: ImageTensor,
    head2: ImageTensor,
    r1: PatchRatioGrid,
    r2: PatchRatioGrid,
    label: usize,
}

fn beta_draw(beta: f64, rng: &mut ChaCha8Rng) -> f64 {
    if beta <= 0.0 {
        return 1.0;
    }
    let dist = Beta::new(beta, beta).expect("valid beta shape");
    dist.sample(rng)
}

fn prepare_slot(
    ds: &LoadedDataset,
    item: &BatchItem,
    cfg: &TrainConfig,
    enc: &EncoderConfig,
    rng: &mut ChaCha8Rng,
) -> Result<PreparedSlot> {
    let grid = enc.grid;
    let tail = &ds.images[item.sample];
    let label = ds.labels[item.sample];
    let Some(partner) = item.partner else {
        // head-class sample: two plain views, identity ratios
        let tail1 = augment_view(tail, &cfg.augment, rng)?;
        let tail2 = augment_view(tail, &cfg.augment, rng)?;
        return Ok(PreparedSlot {
            head1: tail1.clone(),
            head2: tail2.clone(),
            tail1,
            tail2,
            r1: PatchRatioGrid::constant(grid, 1.0),
            r2: PatchRatioGrid::constant(grid, 1.0),
            label,
        });
    };
    let head = &ds.images[partner];
    match cfg.variant {
        Variant::Spmix | Variant::SaliencyOnly => {
            let pipeline_grid = if cfg.variant.patch_based() { grid } else { 1 };
            let pipeline = RatioPipeline {
                windows: cfg.windows.clone(),
                noise_amplitude: cfg.noise_amplitude,
                grid: pipeline_grid,
                alpha: cfg.alpha,
                order: cfg.ratio_order,
            };
            let pair = build_mixed_pair(tail, head, &cfg.augment, &pipeline, rng)?;
            let (r1, r2) = if cfg.variant.patch_based() {
                (pair.ratios1, pair.ratios2)
            } else {
                // one scalar saliency ratio broadcast over the token grid
                (
                    PatchRatioGrid::constant(grid, pair.ratios1.at(0, 0)),
                    PatchRatioGrid::constant(grid, pair.ratios2.at(0, 0)),
                )
            };
            Ok(PreparedSlot {
                tail1: pair.tail_view1,
                tail2: pair.tail_view2,
                head1: pair.head_view1,
                head2: pair.head_view2,
                r1,
                r2,
                label,
            })
        }
        Variant::VanillaMixup | Variant::PatchOnly => {
            let tail1 = augment_view(tail, &cfg.augment, rng)?;
            let tail2 = augment_view(tail, &cfg.augment, rng)?;
            let head1 = augment_view(head, &cfg.augment, rng)?;
            let head2 = augment_view(head, &cfg.augment, rng)?;
            let draw_grid = |rng: &mut ChaCha8Rng| {
                if cfg.variant.patch_based() {
                    let ratios: Vec<f64> =
                        (0..grid * grid).map(|_| beta_draw(cfg.mixup_beta, rng)).collect();
                    PatchRatioGrid::new(grid, 1.0, ratios)
                } else {
                    Ok(PatchRatioGrid::constant(grid, beta_draw(cfg.mixup_beta, rng)))
                }
            };
            let r1 = draw_grid(rng)?;
            let r2 = draw_grid(rng)?;
            Ok(PreparedSlot {
                tail1,
                tail2,
                head1,
                head2,
                r1,
                r2,
                label,
            })
        }
        Variant::Ce | Variant::CeResample => Err(SpmixError::contract(
            "CE variants do not build mixed pairs".to_string(),
        )),
    }
}

fn scl_step(
    ds: &LoadedDataset,
    pair: &mut EncoderPair,
    opt: &mut AdamW,
    enc: &EncoderConfig,
    cfg: &TrainConfig,
    is_head: &[bool],
    rng: &mut ChaCha8Rng,
    diag: &str,
) -> Result<(f64, f64)> {
    let plan = sample_balanced_batch(&ds.by_class, is_head, cfg.batch_size, rng)?;
    let mut slots = Vec::with_capacity(plan.len());
    for item in &plan {
        slots.push(prepare_slot(ds, item, cfg, enc, rng)?);
    }
    let labels: Vec<usize> = slots.iter().map(|s| s.label).collect();
    let t1: Vec<&ImageTensor> = slots.iter().map(|s| &s.tail1).collect();
    let t2: Vec<&ImageTensor> = slots.iter().map(|s| &s.tail2).collect();
    let h1: Vec<&ImageTensor> = slots.iter().map(|s| &s.head1).collect();
    let h2: Vec<&ImageTensor> = slots.iter().map(|s| &s.head2).collect();
    let r1: Vec<PatchRatioGrid> = slots.iter().map(|s| s.r1.clone()).collect();
    let r2: Vec<PatchRatioGrid> = slots.iter().map(|s| s.r2.clone()).collect();

    let mut g = Graph::new();
    let x_t1 = image_batch(&t1)?;
    let x_h1 = image_batch(&h1)?;
    let rt1 = ratio_tensor_batch(&r1)?;
    let z_query = encode_mixed_batch(&mut g, &x_t1, &x_h1, &rt1, &pair.query, enc)?;

    let x_t2 = image_batch(&t2)?;
    let x_h2 = image_batch(&h2)?;
    let rt2 = ratio_tensor_batch(&r2)?;
    let z_key = encode_mixed_batch(&mut g, &x_t2, &x_h2, &rt2, &pair.key, enc)?;

    let loss = scl_loss(&mut g, &z_query, &z_key, &labels, cfg.temperature)?;
    let loss_value = loss.item();
    if !loss_value.is_finite() {
        return Err(SpmixError::Numeric(format!(
            "non-finite SCL loss {loss_value} at {diag}"
        )));
    }
    g.backward(&loss)?;
    let grad_norm = opt.step(&mut pair.query)?;
    pair.momentum_update()?;
    pair.query.zero_grads();
    Ok((loss_value, grad_norm))
}

fn ce_step(
    ds: &LoadedDataset,
    params: &mut ParamStore,
    opt: &mut AdamW,
    enc: &EncoderConfig,
    cfg: &TrainConfig,
    batch_indices: &[usize],
    rng: &mut ChaCha8Rng,
    diag: &str,
) -> Result<(f64, f64)> {
    let mut views = Vec::with_capacity(batch_indices.len());
    let mut labels = Vec::with_capacity(batch_indices.len());
    for &i in batch_indices {
        views.push(augment_view(&ds.images[i], &cfg.augment, rng)?);
        labels.push(ds.labels[i]);
    }
    let refs: Vec<&ImageTensor> = views.iter().collect();
    let mut g = Graph::new();
    let x = image_batch(&refs)?;
    let pooled = encode_pooled(&mut g, &x, params, enc)?;
    let logits = {
        let w = params.expect("head.w")?;
        let b = params.expect("head.b")?;
        let y = g.matmul(&pooled, w)?;
        g.add(&y, b)?
    };
    let loss = cross_entropy_loss(&mut g, &logits, &labels)?;
    let loss_value = loss.item();
    if !loss_value.is_finite() {
        return Err(SpmixError::Numeric(format!(
            "non-finite CE loss {loss_value} at {diag}"
        )));
    }
    g.backward(&loss)?;
    let grad_norm = opt.step(params)?;
    params.zero_grads();
    Ok((loss_value, grad_norm))
}

/// Full training run. Deterministic for a fixed config and seed.
pub fn train(
    ds: &LoadedDataset,
    is_head: &[bool],
    enc: &EncoderConfig,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    enc.validate()?;
    if ds.is_empty() {
        return Err(SpmixError::config("training set is empty"));
    }
    if cfg.batch_size < 2 {
        return Err(SpmixError::config("batch size must be >= 2"));
    }
    if is_head.len() != ds.class_count() {
        return Err(SpmixError::contract(format!(
            "head flags length {} does not match {} classes",
            is_head.len(),
            ds.class_count()
        )));
    }
    let steps = (ds.len() / cfg.batch_size).max(1);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut history = Vec::with_capacity(cfg.epochs);

    if cfg.variant.uses_scl() {
        let mut pair = EncoderPair::new(enc, cfg.seed, cfg.key_momentum)?;
        let mut opt = AdamW::new(cfg.optimizer.clone());
        for epoch in 0..cfg.epochs {
            let (mut loss_sum, mut norm_sum) = (0.0, 0.0);
            for step in 0..steps {
                let diag = format!(
                    "variant={} epoch={epoch} step={step}",
                    cfg.variant.name()
                );
                let (loss, norm) =
                    scl_step(ds, &mut pair, &mut opt, enc, cfg, is_head, &mut rng, &diag)?;
                loss_sum += loss;
                norm_sum += norm;
            }
            history.push(EpochStats {
                epoch,
                mean_loss: loss_sum / steps as f64,
                mean_grad_norm: norm_sum / steps as f64,
            });
        }
        Ok(TrainOutcome {
            params: pair.query,
            key_params: Some(pair.key),
            history,
        })
    } else {
        let mut params = init_encoder_params(enc, cfg.seed)?;
        params.insert(
            "head.w",
            Tensor::zeros(&[enc.token_dim, ds.class_count()]).requires_grad(true),
        );
        params.insert(
            "head.b",
            Tensor::zeros(&[ds.class_count()]).requires_grad(true),
        );
        let mut opt = AdamW::new(cfg.optimizer.clone());
        for epoch in 0..cfg.epochs {
            let (mut loss_sum, mut norm_sum) = (0.0, 0.0);
            let order: Vec<usize> = match cfg.variant {
                Variant::Ce => shuffled_epoch_order(ds.len(), &mut rng),
                _ => sample_balanced_batch(&ds.by_class, is_head, steps * cfg.batch_size, &mut rng)?
                    .into_iter()
                    .map(|item| item.sample)
                    .collect(),
            };
            for step in 0..steps {
                let batch = &order[step * cfg.batch_size..(step + 1) * cfg.batch_size];
                let diag = format!(
                    "variant={} epoch={epoch} step={step}",
                    cfg.variant.name()
                );
                let (loss, norm) =
                    ce_step(ds, &mut params, &mut opt, enc, cfg, batch, &mut rng, &diag)?;
                loss_sum += loss;
                norm_sum += norm;
            }
            history.push(EpochStats {
                epoch,
                mean_loss: loss_sum / steps as f64,
                mean_grad_norm: norm_sum / steps as f64,
            });
        }
        Ok(TrainOutcome {
            params,
            key_params: None,
            history,
        })
    }
}
