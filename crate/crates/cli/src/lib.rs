//! Subcommand definitions and runners for the `spmix` binary.
//!
//! Every run resolves its configuration as defaults < config file < flags,
//! logs the resolved config and seed to stderr, and writes data products
//! only to files. Reruns with the same seed produce byte-identical outputs.

use clap::{Args, Parser, Subcommand};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use spmix::config::RunConfig;
use spmix::dataset::{
    csv_to_manifest, generate_synthetic_lt, partition_subsets, split_dataset, split_paths,
    LoadedDataset, Manifest, SyntheticConfig,
};
use spmix::encoder::{init_encoder_params, ParamStore};
use spmix::error::{Result, SpmixError};
use spmix::eval::{evaluate, extract_features, linear_probe, LinearClassifier};
use spmix::experiment::{run_ablation, ExperimentData};
use spmix::imaging::{load_image, save_image, ImageTensor};
use spmix::mixup::mix_images;
use spmix::saliency::{
    minmax_normalize, patch_ratios, static_saliency, save_saliency, PatchRatioGrid, RatioPipeline,
    SaliencyMap,
};
use spmix::tensor::{load_checkpoint, save_checkpoint};
use spmix::train::{train, Variant};
use std::path::{Path, PathBuf};
use std::time::Instant;

#[derive(Parser)]
#[command(
    name = "spmix",
    version,
    about = "Saliency-guided patch-based mixup for long-tailed image classification"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

/// Flags shared by commands that resolve a full run configuration.
#[derive(Args, Debug, Default)]
pub struct ConfigArgs {
    /// Plain-text `key = value` configuration file (unknown keys are errors)
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Random seed driving every stochastic choice of the run
    #[arg(long)]
    pub seed: Option<u64>,
    /// Mixup-ratio clip threshold in (0, 1]
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Patch grid side (tokens per image side)
    #[arg(long)]
    pub grid: Option<usize>,
    /// Comma-separated odd center-surround window sizes
    #[arg(long)]
    pub windows: Option<String>,
    /// Uniform noise amplitude added to merged saliency
    #[arg(long)]
    pub noise: Option<f64>,
    /// Key-encoder momentum in [0, 1)
    #[arg(long)]
    pub key_momentum: Option<f64>,
    /// Training variant: ce, ce-resample, vanilla-mixup, patch-only,
    /// saliency-only, or spmix
    #[arg(long)]
    pub variant: Option<String>,
    /// Training epochs
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Batch size (minimum 2)
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// AdamW learning rate
    #[arg(long)]
    pub lr: Option<f64>,
    /// Many-subset threshold on class counts
    #[arg(long)]
    pub many_min: Option<usize>,
    /// Few-subset threshold on class counts
    #[arg(long)]
    pub few_max: Option<usize>,
}

impl ConfigArgs {
    pub fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        if let Some(path) = &self.config {
            cfg.apply_file(path)?;
        }
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = self.alpha {
            cfg.alpha = v;
        }
        if let Some(v) = self.grid {
            cfg.grid = v;
        }
        if let Some(v) = &self.windows {
            cfg.set("windows", v)?;
        }
        if let Some(v) = self.noise {
            cfg.noise = v;
        }
        if let Some(v) = self.key_momentum {
            cfg.key_momentum = v;
        }
        if let Some(v) = &self.variant {
            cfg.set("variant", v)?;
        }
        if let Some(v) = self.epochs {
            cfg.epochs = v;
        }
        if let Some(v) = self.batch_size {
            cfg.batch_size = v;
        }
        if let Some(v) = self.lr {
            cfg.lr = v;
        }
        if let Some(v) = self.many_min {
            cfg.many_min = v;
        }
        if let Some(v) = self.few_max {
            cfg.few_max = v;
        }
        Ok(cfg)
    }
}

#[derive(Subcommand)]
pub enum Command {
    /// Split a manifest into train/val/test at 7:1:2 with balanced val/test
    Split {
        /// Input manifest (`path<TAB>class` lines)
        #[arg(long)]
        manifest: PathBuf,
        /// Directory receiving train.tsv, val.tsv, test.tsv
        #[arg(long)]
        out_dir: PathBuf,
        /// Shuffle seed
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Generate the synthetic long-tailed dataset (PNGs + manifest.tsv)
    GenSynthetic {
        #[arg(long)]
        out_dir: PathBuf,
        /// Per-class sample counts, most frequent first
        #[arg(long, default_value = "500,200,80,30,10")]
        counts: String,
        /// Square image side in pixels
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Compute center-surround saliency maps (and optional ratio grids)
    Saliency {
        /// Input image(s), PNG or JPEG
        #[arg(long = "in", required = true)]
        input: Vec<PathBuf>,
        /// Output map path (single input only)
        #[arg(long)]
        out: Option<PathBuf>,
        /// Output directory (multi-input; files named <stem>_saliency.png)
        #[arg(long)]
        out_dir: Option<PathBuf>,
        /// Also write an input|map side-by-side composite
        #[arg(long, default_value_t = false)]
        composite: bool,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Write image-level mixed samples + a new manifest for inspection
    Augment {
        /// Source manifest; paths resolve relative to its directory
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        /// Number of mixed samples to produce
        #[arg(long, default_value_t = 16)]
        count: usize,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Train the representation (SCL variants or CE baselines)
    Train {
        /// Training manifest; paths resolve relative to its directory
        #[arg(long)]
        train_manifest: PathBuf,
        /// Manifest supplying per-class counts for the Many/Medium/Few
        /// partition (defaults to the training manifest)
        #[arg(long)]
        counts_manifest: Option<PathBuf>,
        /// Output directory: encoder.spmx, config.resolved, metrics.log
        #[arg(long)]
        out_dir: PathBuf,
        /// Write the class-balanced augmented dataset to
        /// <out-dir>/materialized for inspection and exit without training
        #[arg(long, default_value_t = false)]
        materialize: bool,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Fit the class-balanced linear probe on frozen features
    Probe {
        /// Encoder checkpoint from `train`
        #[arg(long)]
        encoder: PathBuf,
        #[arg(long)]
        train_manifest: PathBuf,
        /// Output probe checkpoint path
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Evaluate encoder + probe on a balanced test manifest
    Eval {
        #[arg(long)]
        encoder: PathBuf,
        #[arg(long)]
        probe: PathBuf,
        #[arg(long)]
        test_manifest: PathBuf,
        /// Manifest supplying counts for the subset partition
        /// (defaults to the test manifest)
        #[arg(long)]
        counts_manifest: Option<PathBuf>,
        /// Output directory: report.txt (table) and report.kv
        #[arg(long)]
        out_dir: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Run the variant grid end to end and emit the comparison table
    Ablate {
        /// Dataset directory holding manifest.tsv, train.tsv, test.tsv
        #[arg(long)]
        data_dir: PathBuf,
        /// Comma-separated variants (default: the Table-2 grid)
        #[arg(long, default_value = "vanilla-mixup,patch-only,saliency-only,spmix")]
        variants: String,
        /// Number of seeds; runs use seeds 1..=N
        #[arg(long, default_value_t = 3)]
        seeds: u64,
        #[arg(long)]
        out_dir: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Convert an ISIC-style one-hot label CSV to the manifest format
    ConvertCsv {
        #[arg(long)]
        csv: PathBuf,
        /// Image filename extension appended to the image ids
        #[arg(long, default_value = "jpg")]
        extension: String,
        #[arg(long)]
        out: PathBuf,
    },
}

fn ensure_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| SpmixError::io(path, e))
}

fn manifest_root(manifest_path: &Path) -> PathBuf {
    manifest_path
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| SpmixError::io(path, e))
}

fn log_config(cfg: &RunConfig, context: &str) {
    eprintln!("[{context}] resolved configuration (seed {}):", cfg.seed);
    for line in cfg.summary().lines() {
        eprintln!("[{context}]   {line}");
    }
}

pub fn run(cli: Cli) -> Result<()> {
    spmix::experiment::init_thread_pool();
    match cli.command {
        Command::Split { manifest, out_dir, seed } => run_split(&manifest, &out_dir, seed),
        Command::GenSynthetic { out_dir, counts, size, seed } => {
            run_gen_synthetic(&out_dir, &counts, size, seed)
        }
        Command::Saliency { input, out, out_dir, composite, cfg } => {
            run_saliency(&input, out.as_deref(), out_dir.as_deref(), composite, &cfg)
        }
        Command::Augment { manifest, out_dir, count, cfg } => {
            run_augment(&manifest, &out_dir, count, &cfg)
        }
        Command::Train { train_manifest, counts_manifest, out_dir, materialize, cfg } => {
            run_train(&train_manifest, counts_manifest.as_deref(), &out_dir, materialize, &cfg)
        }
        Command::Probe { encoder, train_manifest, out, cfg } => {
            run_probe(&encoder, &train_manifest, &out, &cfg)
        }
        Command::Eval { encoder, probe, test_manifest, counts_manifest, out_dir, cfg } => {
            run_eval(&encoder, &probe, &test_manifest, counts_manifest.as_deref(), &out_dir, &cfg)
        }
        Command::Ablate { data_dir, variants, seeds, out_dir, cfg } => {
            run_ablate(&data_dir, &variants, seeds, &out_dir, &cfg)
        }
        Command::ConvertCsv { csv, extension, out } => {
            let manifest = csv_to_manifest(&csv, &extension)?;
            manifest.save(&out)?;
            eprintln!("[convert-csv] wrote {} records to {}", manifest.len(), out.display());
            Ok(())
        }
    }
}

fn run_split(manifest_path: &Path, out_dir: &Path, seed: u64) -> Result<()> {
    let manifest = Manifest::load(manifest_path)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (train, val, test) = split_dataset(&manifest, &mut rng)?;
    ensure_dir(out_dir)?;
    let (train_path, val_path, test_path) = split_paths(out_dir);
    train.save(&train_path)?;
    val.save(&val_path)?;
    test.save(&test_path)?;
    eprintln!(
        "[split] seed {seed}: {} train / {} val / {} test records",
        train.len(),
        val.len(),
        test.len()
    );
    Ok(())
}

fn run_gen_synthetic(out_dir: &Path, counts: &str, size: usize, seed: u64) -> Result<()> {
    let counts: Vec<usize> = counts
        .split(',')
        .map(|c| {
            c.trim()
                .parse()
                .map_err(|_| SpmixError::config(format!("bad count '{c}'")))
        })
        .collect::<Result<_>>()?;
    ensure_dir(out_dir)?;
    let cfg = SyntheticConfig::new(counts, size, seed)?;
    let (manifest, _) = generate_synthetic_lt(&cfg, out_dir)?;
    eprintln!(
        "[gen-synthetic] seed {seed}: wrote {} images across {} classes to {}",
        manifest.len(),
        manifest.class_names().len(),
        out_dir.display()
    );
    Ok(())
}

fn side_by_side(images: &[&ImageTensor]) -> Result<ImageTensor> {
    let h = images[0].height();
    let c = images[0].channels();
    let total_w: usize = images.iter().map(|i| i.width()).sum();
    let mut data = vec![0.0; h * total_w * c];
    let mut x_off = 0;
    for img in images {
        for y in 0..h {
            for x in 0..img.width() {
                for ch in 0..c {
                    data[(y * total_w + x_off + x) * c + ch] = img.pixel(y, x, ch);
                }
            }
        }
        x_off += img.width();
    }
    ImageTensor::new(h, total_w, c, data)
}

fn run_saliency(
    inputs: &[PathBuf],
    out: Option<&Path>,
    out_dir: Option<&Path>,
    composite: bool,
    args: &ConfigArgs,
) -> Result<()> {
    let cfg = args.resolve()?;
    log_config(&cfg, "saliency");
    if out.is_some() && inputs.len() != 1 {
        return Err(SpmixError::config(
            "--out requires exactly one --in; use --out-dir for several".to_string(),
        ));
    }
    if out.is_none() && out_dir.is_none() {
        return Err(SpmixError::config("one of --out or --out-dir is required".to_string()));
    }
    if let Some(dir) = out_dir {
        ensure_dir(dir)?;
    }
    for input in inputs {
        let image = load_image(input, None)?.ensure_channels(3)?;
        let raw = static_saliency(&image, &cfg.windows)?;
        let map = minmax_normalize(&raw);
        let stem = input
            .file_stem()
            .map(|s| s.to_string_lossy().to_string())
            .unwrap_or_else(|| "image".to_string());
        let map_path = match (out, out_dir) {
            (Some(path), _) => path.to_path_buf(),
            (None, Some(dir)) => dir.join(format!("{stem}_saliency.png")),
            _ => unreachable!(),
        };
        save_saliency(&map, &map_path)?;
        eprintln!("[saliency] {} -> {}", input.display(), map_path.display());
        let aux_dir = map_path.parent().map(Path::to_path_buf).unwrap_or_default();
        if composite {
            let map_img = saliency_to_image(&map)?;
            let panel = side_by_side(&[&image, &map_img])?;
            let path = aux_dir.join(format!("{stem}_composite.png"));
            save_image(&panel, &path)?;
            eprintln!("[saliency] composite -> {}", path.display());
        }
        // ratio grid rendered as a grayscale PNG (value = ratio)
        let ratios = patch_ratios(&map, cfg.grid, cfg.alpha, cfg.ratio_order)?;
        let grid_img = ratio_grid_to_image(&ratios, image.height(), image.width());
        let path = aux_dir.join(format!("{stem}_ratios.png"));
        save_image(&grid_img, &path)?;
        eprintln!("[saliency] ratio grid -> {}", path.display());
    }
    Ok(())
}

fn saliency_to_image(map: &SaliencyMap) -> Result<ImageTensor> {
    let gray: Vec<f64> = map.values().iter().map(|v| v.clamp(0.0, 1.0)).collect();
    ImageTensor::new(map.height(), map.width(), 1, gray)?.ensure_channels(3)
}

fn ratio_grid_to_image(ratios: &PatchRatioGrid, height: usize, width: usize) -> ImageTensor {
    let g = ratios.grid();
    let (bh, bw) = (height / g, width / g);
    let mut img = ImageTensor::filled(height, width, 1, 0.0);
    for y in 0..height {
        for x in 0..width {
            let r = ratios.at((y / bh).min(g - 1), (x / bw).min(g - 1));
            img_set(&mut img, y, x, r);
        }
    }
    img
}

fn img_set(img: &mut ImageTensor, y: usize, x: usize, v: f64) {
    // single-channel write helper
    let w = img.width();
    let data_index = y * w + x;
    let mut data = img.data().to_vec();
    data[data_index] = v;
    *img = ImageTensor::new(img.height(), w, 1, data).expect("in range");
}

fn run_augment(manifest_path: &Path, out_dir: &Path, count: usize, args: &ConfigArgs) -> Result<()> {
    let cfg = args.resolve()?;
    log_config(&cfg, "augment");
    let manifest = Manifest::load(manifest_path)?;
    let root = manifest_root(manifest_path);
    let ds = LoadedDataset::load(&manifest, &root, cfg.input_size)?;
    let partition = partition_subsets(&manifest, cfg.many_min, cfg.few_max)?;
    let heads = partition.head_flags();
    let head_pool: Vec<usize> = (0..ds.len()).filter(|&i| heads[ds.labels[i]]).collect();
    let tail_pool: Vec<usize> = (0..ds.len()).filter(|&i| !heads[ds.labels[i]]).collect();
    if head_pool.is_empty() || tail_pool.is_empty() {
        return Err(SpmixError::config(
            "augment needs at least one head class and one tail class".to_string(),
        ));
    }
    ensure_dir(&out_dir.join("panels"))?;
    ensure_dir(&out_dir.join("mixed"))?;
    let pipeline = RatioPipeline {
        windows: cfg.windows.clone(),
        noise_amplitude: cfg.noise,
        grid: cfg.grid,
        alpha: cfg.alpha,
        order: cfg.ratio_order,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut entries = Vec::new();
    for i in 0..count {
        let tail_idx = tail_pool[rng.random_range(0..tail_pool.len())];
        let head_idx = head_pool[rng.random_range(0..head_pool.len())];
        let tail = &ds.images[tail_idx];
        let head = &ds.images[head_idx];
        let ratios = pipeline.ratios_for_pair(tail, head, &mut rng)?;
        let mixed = mix_images(tail, head, &ratios)?;
        let rel = format!("mixed/sample_{i:04}.png");
        save_image(&mixed, &out_dir.join(&rel))?;
        let panel = side_by_side(&[tail, head, &mixed])?;
        save_image(&panel, &out_dir.join(format!("panels/sample_{i:04}.png")))?;
        entries.push((rel, ds.class_names[ds.labels[tail_idx]].clone()));
    }
    Manifest::new(entries)?.save(&out_dir.join("manifest.tsv"))?;
    eprintln!("[augment] wrote {count} mixed samples to {}", out_dir.display());
    Ok(())
}

/// Writes the class-balanced augmented dataset to disk for inspection:
/// every class is brought up to the majority count, tail classes by
/// image-level SPMix against random head partners.
fn materialize_balanced(
    ds: &LoadedDataset,
    heads: &[bool],
    cfg: &RunConfig,
    out_dir: &Path,
) -> Result<()> {
    let head_pool: Vec<usize> = (0..ds.len()).filter(|&i| heads[ds.labels[i]]).collect();
    if head_pool.is_empty() {
        return Err(SpmixError::config("no head class to donate backgrounds".to_string()));
    }
    let target = ds.by_class.iter().map(Vec::len).max().unwrap();
    let pipeline = RatioPipeline {
        windows: cfg.windows.clone(),
        noise_amplitude: cfg.noise,
        grid: cfg.grid,
        alpha: cfg.alpha,
        order: cfg.ratio_order,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut entries = Vec::new();
    for (class, members) in ds.by_class.iter().enumerate() {
        let class_name = &ds.class_names[class];
        let dir = out_dir.join(class_name);
        ensure_dir(&dir)?;
        for slot in 0..target {
            let source = members[slot % members.len()];
            let rel = format!("{class_name}/sample_{slot:04}.png");
            let image = if slot < members.len() || heads[class] {
                ds.images[source].clone()
            } else {
                let partner = head_pool[rng.random_range(0..head_pool.len())];
                let ratios =
                    pipeline.ratios_for_pair(&ds.images[source], &ds.images[partner], &mut rng)?;
                mix_images(&ds.images[source], &ds.images[partner], &ratios)?
            };
            save_image(&image, &out_dir.join(&rel))?;
            entries.push((rel, class_name.clone()));
        }
    }
    Manifest::new(entries)?.save(&out_dir.join("manifest.tsv"))?;
    Ok(())
}

fn run_train(
    train_manifest: &Path,
    counts_manifest: Option<&Path>,
    out_dir: &Path,
    materialize: bool,
    args: &ConfigArgs,
) -> Result<()> {
    let cfg = args.resolve()?;
    log_config(&cfg, "train");
    let manifest = Manifest::load(train_manifest)?;
    let root = manifest_root(train_manifest);
    let counts = match counts_manifest {
        Some(path) => Manifest::load(path)?,
        None => manifest.clone(),
    };
    if counts.class_names() != manifest.class_names() {
        return Err(SpmixError::config(
            "counts manifest classes differ from the training manifest".to_string(),
        ));
    }
    let partition = partition_subsets(&counts, cfg.many_min, cfg.few_max)?;
    let heads = partition.head_flags();
    let ds = LoadedDataset::load(&manifest, &root, cfg.input_size)?;
    ensure_dir(out_dir)?;

    if materialize {
        let dir = out_dir.join("materialized");
        materialize_balanced(&ds, &heads, &cfg, &dir)?;
        eprintln!(
            "[train] --materialize: balanced dataset written to {}; exiting without training",
            dir.display()
        );
        return Ok(());
    }

    let enc = cfg.encoder_config();
    let tc = cfg.train_config();
    let started = Instant::now();
    let mut log_lines = String::new();
    let outcome = {
        let out = train(&ds, &heads, &enc, &tc)?;
        for stats in &out.history {
            log_lines.push_str(&stats.log_line());
            log_lines.push('\n');
            eprintln!(
                "[train] {} wall={:.2}s",
                stats.log_line(),
                started.elapsed().as_secs_f64()
            );
        }
        out
    };
    write_text(&out_dir.join("metrics.log"), &log_lines)?;
    write_text(&out_dir.join("config.resolved"), &format!("{}\n", cfg.summary()))?;
    save_checkpoint(&out_dir.join("encoder.spmx"), outcome.params.entries())?;
    if let Some(key) = &outcome.key_params {
        save_checkpoint(&out_dir.join("encoder_key.spmx"), key.entries())?;
    }
    eprintln!(
        "[train] done in {:.1}s: {}",
        started.elapsed().as_secs_f64(),
        out_dir.join("encoder.spmx").display()
    );
    Ok(())
}

fn load_params(path: &Path) -> Result<ParamStore> {
    let entries = load_checkpoint(path)?;
    let mut store = ParamStore::new();
    for (name, tensor) in entries {
        store.insert(name, tensor.requires_grad(false));
    }
    Ok(store)
}

fn run_probe(encoder: &Path, train_manifest: &Path, out: &Path, args: &ConfigArgs) -> Result<()> {
    let cfg = args.resolve()?;
    log_config(&cfg, "probe");
    let params = load_params(encoder)?;
    let manifest = Manifest::load(train_manifest)?;
    let ds = LoadedDataset::load(&manifest, &manifest_root(train_manifest), cfg.input_size)?;
    let enc = cfg.encoder_config();
    let features = extract_features(&ds, &params, &enc, 64)?;
    let (clf, losses) = linear_probe(&features, &ds.labels, ds.class_count(), &cfg.probe_config())?;
    if let (Some(first), Some(last)) = (losses.first(), losses.last()) {
        eprintln!("[probe] loss {first:.6} -> {last:.6} over {} epochs", losses.len());
    }
    save_checkpoint(out, clf.to_params().entries())?;
    eprintln!("[probe] wrote {}", out.display());
    Ok(())
}

fn run_eval(
    encoder: &Path,
    probe: &Path,
    test_manifest: &Path,
    counts_manifest: Option<&Path>,
    out_dir: &Path,
    args: &ConfigArgs,
) -> Result<()> {
    let cfg = args.resolve()?;
    log_config(&cfg, "eval");
    let params = load_params(encoder)?;
    let clf = LinearClassifier::from_params(&load_params(probe)?)?;
    let manifest = Manifest::load(test_manifest)?;
    let counts = match counts_manifest {
        Some(path) => Manifest::load(path)?,
        None => manifest.clone(),
    };
    if counts.class_names() != manifest.class_names() {
        return Err(SpmixError::config(
            "counts manifest classes differ from the test manifest".to_string(),
        ));
    }
    let partition = partition_subsets(&counts, cfg.many_min, cfg.few_max)?;
    let ds = LoadedDataset::load(&manifest, &manifest_root(test_manifest), cfg.input_size)?;
    let report = evaluate(&clf, &ds, &params, &cfg.encoder_config(), &partition)?;
    ensure_dir(out_dir)?;
    write_text(&out_dir.join("report.txt"), &format!("{}\n", report.to_table()))?;
    write_text(&out_dir.join("report.kv"), &report.to_kv())?;
    eprintln!("[eval]\n{}", report.to_table());
    Ok(())
}

fn run_ablate(
    data_dir: &Path,
    variants: &str,
    seeds: u64,
    out_dir: &Path,
    args: &ConfigArgs,
) -> Result<()> {
    let cfg = args.resolve()?;
    log_config(&cfg, "ablate");
    let variants: Vec<Variant> = variants
        .split(',')
        .map(|v| v.trim().parse())
        .collect::<Result<_>>()?;
    if seeds == 0 {
        return Err(SpmixError::config("--seeds must be >= 1".to_string()));
    }
    let seed_list: Vec<u64> = (1..=seeds).collect();
    let counts_manifest = Manifest::load(&data_dir.join("manifest.tsv"))?;
    let train_manifest = Manifest::load(&data_dir.join("train.tsv"))?;
    let test_manifest = Manifest::load(&data_dir.join("test.tsv"))?;
    let data = ExperimentData::load(data_dir, &train_manifest, &test_manifest, &counts_manifest, &cfg)?;
    let started = Instant::now();
    let table = run_ablation(&data, &cfg, &variants, &seed_list)?;
    ensure_dir(out_dir)?;
    write_text(&out_dir.join("ablation.txt"), &table.render())?;
    for run in &table.runs {
        let name = format!("metrics_{}_{}.kv", run.variant.name(), run.seed);
        write_text(&out_dir.join(name), &run.report.to_kv())?;
    }
    eprintln!(
        "[ablate] {} runs in {:.1}s\n{}",
        table.runs.len(),
        started.elapsed().as_secs_f64(),
        table.render()
    );
    Ok(())
}

/// Quick sanity check used by the probe path: the encoder checkpoint must
/// contain the stem; catches swapped encoder/probe arguments early.
pub fn validate_encoder_store(store: &ParamStore) -> Result<()> {
    store.expect("stem.conv1.w").map(|_| ())
}

/// Re-exported for tests: deterministic parameter init shared with the lib.
pub fn reference_params(seed: u64) -> Result<ParamStore> {
    init_encoder_params(&RunConfig::default().encoder_config(), seed)
}
