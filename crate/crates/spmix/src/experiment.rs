//! End-to-end experiment runs (train -> probe -> eval) and the ablation
//! grid over variants and seeds, with medians. Runs are independent and
//! execute in parallel on the global rayon pool; each run is internally
//! deterministic for its seed.

use crate::config::RunConfig;
use crate::dataset::{partition_subsets, LoadedDataset, Manifest, SubsetPartition};
use crate::error::{Result, SpmixError};
use crate::eval::{evaluate, extract_features, linear_probe, MetricsReport};
use crate::train::{train, EpochStats, TrainOutcome, Variant};
use rayon::prelude::*;
use std::path::Path;
use std::sync::Once;

static POOL_INIT: Once = Once::new();

/// Caps rayon worker parallelism from `SPMIX_THREADS` (0 or unset = auto).
/// Safe to call repeatedly; only the first call configures the pool.
pub fn init_thread_pool() {
    POOL_INIT.call_once(|| {
        if let Ok(v) = std::env::var("SPMIX_THREADS") {
            if let Ok(n) = v.trim().parse::<usize>() {
                if n > 0 {
                    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
                }
            }
        }
    });
}

/// Datasets and partition shared across an ablation's runs.
pub struct ExperimentData {
    pub train: LoadedDataset,
    pub test: LoadedDataset,
    pub partition: SubsetPartition,
    pub head_flags: Vec<bool>,
}

impl ExperimentData {
    /// Loads train/test manifests (paths relative to `root`) and derives the
    /// Many/Medium/Few partition from the counts manifest (typically the
    /// overall, pre-split dataset).
    pub fn load(
        root: &Path,
        train_manifest: &Manifest,
        test_manifest: &Manifest,
        counts_manifest: &Manifest,
        cfg: &RunConfig,
    ) -> Result<Self> {
        let names = train_manifest.class_names();
        if test_manifest.class_names() != names || counts_manifest.class_names() != names {
            return Err(SpmixError::config(
                "train/test/counts manifests disagree on the class set".to_string(),
            ));
        }
        let partition = partition_subsets(counts_manifest, cfg.many_min, cfg.few_max)?;
        let head_flags = partition.head_flags();
        if !head_flags.iter().any(|&h| h) {
            return Err(SpmixError::config(format!(
                "no class reaches many_min={} in the counts manifest; no heads to donate backgrounds",
                cfg.many_min
            )));
        }
        let train = LoadedDataset::load(train_manifest, root, cfg.input_size)?;
        let test = LoadedDataset::load(test_manifest, root, cfg.input_size)?;
        Ok(ExperimentData {
            train,
            test,
            partition,
            head_flags,
        })
    }
}

/// Outcome of one (variant, seed) run.
pub struct ExperimentRun {
    pub variant: Variant,
    pub seed: u64,
    pub report: MetricsReport,
    pub history: Vec<EpochStats>,
}

/// Trains the representation, fits the probe on frozen train features, and
/// evaluates on the balanced test set.
pub fn run_one(
    data: &ExperimentData,
    cfg: &RunConfig,
    variant: Variant,
    seed: u64,
) -> Result<ExperimentRun> {
    let enc = cfg.encoder_config();
    let mut tc = cfg.train_config();
    tc.variant = variant;
    tc.seed = seed;
    tc.augment.seed = seed;
    let outcome: TrainOutcome = train(&data.train, &data.head_flags, &enc, &tc)?;

    let features = extract_features(&data.train, &outcome.params, &enc, 64)?;
    let mut pc = cfg.probe_config();
    pc.seed = seed;
    let (clf, _probe_losses) =
        linear_probe(&features, &data.train.labels, data.train.class_count(), &pc)?;
    let report = evaluate(&clf, &data.test, &outcome.params, &enc, &data.partition)?;
    Ok(ExperimentRun {
        variant,
        seed,
        report,
        history: outcome.history,
    })
}

/// Median of a set of optional metrics; `None` entries are skipped.
fn median(values: &mut Vec<f64>) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    values.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = values.len();
    Some(if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    })
}

/// Median metrics across seeds for one variant.
#[derive(Clone, Debug)]
pub struct VariantSummary {
    pub variant: Variant,
    pub many_acc: Option<f64>,
    pub medium_acc: Option<f64>,
    pub few_acc: Option<f64>,
    pub total_acc: f64,
    pub macro_f1: f64,
}

pub struct AblationTable {
    pub runs: Vec<ExperimentRun>,
    pub summaries: Vec<VariantSummary>,
}

/// Runs every (variant, seed) combination in parallel and aggregates
/// per-variant medians, preserving the requested variant order.
pub fn run_ablation(
    data: &ExperimentData,
    cfg: &RunConfig,
    variants: &[Variant],
    seeds: &[u64],
) -> Result<AblationTable> {
    init_thread_pool();
    if variants.is_empty() || seeds.is_empty() {
        return Err(SpmixError::config("ablation needs variants and seeds"));
    }
    let jobs: Vec<(Variant, u64)> = variants
        .iter()
        .flat_map(|&v| seeds.iter().map(move |&s| (v, s)))
        .collect();
    let mut runs: Vec<ExperimentRun> = jobs
        .par_iter()
        .map(|&(variant, seed)| run_one(data, cfg, variant, seed))
        .collect::<Result<Vec<_>>>()?;
    // parallel collection preserves job order; keep it canonical anyway
    runs.sort_by_key(|r| {
        (
            variants.iter().position(|&v| v == r.variant).unwrap_or(usize::MAX),
            r.seed,
        )
    });

    let summaries = variants
        .iter()
        .map(|&variant| {
            let of = |f: &dyn Fn(&MetricsReport) -> Option<f64>| {
                let mut vals: Vec<f64> = runs
                    .iter()
                    .filter(|r| r.variant == variant)
                    .filter_map(|r| f(&r.report))
                    .collect();
                median(&mut vals)
            };
            VariantSummary {
                variant,
                many_acc: of(&|r| r.many_acc),
                medium_acc: of(&|r| r.medium_acc),
                few_acc: of(&|r| r.few_acc),
                total_acc: of(&|r| Some(r.total_acc)).unwrap_or(f64::NAN),
                macro_f1: of(&|r| Some(r.macro_f1)).unwrap_or(f64::NAN),
            }
        })
        .collect();
    Ok(AblationTable { runs, summaries })
}

fn mark(on: bool) -> &'static str {
    if on {
        "yes"
    } else {
        "no "
    }
}

fn pct(v: Option<f64>) -> String {
    match v {
        Some(a) => format!("{:6.2}", a * 100.0),
        None => "   n/a".to_string(),
    }
}

impl AblationTable {
    /// Per-run rows followed by the Table-2-shaped median grid
    /// (patch-based mixup x saliency guidance).
    pub fn render(&self) -> String {
        let mut out = String::new();
        out.push_str("variant        seed   Many    Med     Few    Total   F1\n");
        for run in &self.runs {
            out.push_str(&format!(
                "{:<14} {:<5} {}  {}  {}  {}  {}\n",
                run.variant.name(),
                run.seed,
                pct(run.report.many_acc),
                pct(run.report.medium_acc),
                pct(run.report.few_acc),
                pct(Some(run.report.total_acc)),
                pct(Some(run.report.macro_f1)),
            ));
        }
        out.push('\n');
        out.push_str("medians over seeds\n");
        out.push_str("patch  saliency  variant        Many    Med     Few    Total   F1\n");
        for s in &self.summaries {
            let (patch, sal) = if s.variant.uses_scl() {
                (mark(s.variant.patch_based()), mark(s.variant.saliency_guided()))
            } else {
                ("-  ", "-  ")
            };
            out.push_str(&format!(
                "{:<6} {:<9} {:<14} {}  {}  {}  {}  {}\n",
                patch,
                sal,
                s.variant.name(),
                pct(s.many_acc),
                pct(s.medium_acc),
                pct(s.few_acc),
                pct(Some(s.total_acc)),
                pct(Some(s.macro_f1)),
            ));
        }
        out
    }

    pub fn summary_for(&self, variant: Variant) -> Option<&VariantSummary> {
        self.summaries.iter().find(|s| s.variant == variant)
    }
}
