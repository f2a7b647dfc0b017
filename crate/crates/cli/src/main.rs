use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;
use simtrans::checkpoint::Checkpoint;
use simtrans::config::{Ablation, TrainConfig};
use simtrans::heatmap;
use simtrans::pgm::GrayImage;
use simtrans::synth::{self, Dataset, GenerateOptions, Sample, Split, MANIFEST};
use simtrans::train::{self, AblationTable, OutputFiles};
use simtrans::Error;

/// Structure-aware vision transformer on synthetic fine-grained data.
#[derive(Parser)]
#[command(name = "simtrans", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    Gen(GenArgs),
    /// Train a model and write its checkpoint and CSV logs.
    Train(TrainArgs),
    /// Report top-1 accuracy of a checkpoint.
    Eval(EvalArgs),
    /// Export attention heatmaps of one structure layer as PGM files.
    Attnmap(AttnmapArgs),
    /// Train the four component ablations and tabulate their accuracy.
    Ablate(AblateArgs),
}

#[derive(Args)]
struct GenArgs {
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(long, default_value_t = 8, value_parser = clap::value_parser!(u64).range(2..))]
    classes: u64,
    /// Training images.
    #[arg(long, default_value_t = 1600)]
    train: usize,
    /// Test images.
    #[arg(long, default_value_t = 400)]
    test: usize,
    /// Image side in pixels.
    #[arg(long, default_value_t = 64)]
    size: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum Switch {
    On,
    Off,
}

impl From<Switch> for bool {
    fn from(s: Switch) -> bool {
        matches!(s, Switch::On)
    }
}

/// Flags that override the configuration file, which overrides the defaults.
#[derive(Args)]
struct Overrides {
    /// `key = value` configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Structure modules on the last N layers [default: 3].
    #[arg(long, value_name = "N")]
    sil_layers: Option<usize>,
    /// Multi-level cls features [default: on].
    #[arg(long)]
    mfb: Option<Switch>,
    /// Contrastive loss [default: on].
    #[arg(long)]
    contrastive: Option<Switch>,
    /// Hard-negative margin of the contrastive loss [default: 0.3].
    #[arg(long)]
    alpha: Option<f64>,
    /// Initial learning rate after warmup [default: 0.01].
    #[arg(long)]
    lr: Option<f64>,
    /// SGD momentum [default: 0.9].
    #[arg(long)]
    momentum: Option<f64>,
    /// Total optimizer steps [default: 3000].
    #[arg(long)]
    steps: Option<usize>,
    /// Linear warmup steps [default: 150].
    #[arg(long)]
    warmup: Option<usize>,
    /// Batch size [default: 16].
    #[arg(long)]
    batch: Option<usize>,
    /// Seed for initialization and data order [default: 0].
    #[arg(long)]
    seed: Option<u64>,
}

impl Overrides {
    fn resolve(&self) -> Result<TrainConfig, Error> {
        let mut cfg = match &self.config {
            Some(path) => TrainConfig::load(path)?,
            None => TrainConfig::default(),
        };
        if let Some(v) = self.sil_layers {
            cfg.sil_layer_count = v;
        }
        if let Some(v) = self.mfb {
            cfg.mfb_enabled = v.into();
        }
        if let Some(v) = self.contrastive {
            cfg.contrastive_enabled = v.into();
        }
        if let Some(v) = self.alpha {
            cfg.alpha = v;
        }
        if let Some(v) = self.lr {
            cfg.lr_init = v;
        }
        if let Some(v) = self.momentum {
            cfg.momentum = v;
        }
        if let Some(v) = self.steps {
            cfg.total_steps = v;
        }
        if let Some(v) = self.warmup {
            cfg.warmup_steps = v;
        }
        if let Some(v) = self.batch {
            cfg.batch_size = v;
        }
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset directory with `train/` and `test/` splits.
    #[arg(long)]
    data: PathBuf,
    /// Output directory for the checkpoint and logs.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// Dataset directory (its `test/` split is used) or a split directory.
    #[arg(long)]
    data: PathBuf,
}

#[derive(Args)]
struct AttnmapArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// Input PGM image.
    #[arg(long)]
    image: PathBuf,
    /// 1-based layer carrying a structure module.
    #[arg(long)]
    layer: usize,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long)]
    data: PathBuf,
    /// Number of seeds per configuration (seeds 0..k).
    #[arg(long, default_value_t = 3)]
    seeds: u64,
    /// Where to write the CSV table [default: <data>/ablation.csv].
    #[arg(long)]
    csv: Option<PathBuf>,
    /// Train the four configurations concurrently.
    #[arg(long)]
    parallel: bool,
    #[command(flatten)]
    overrides: Overrides,
}

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Io(_) | Error::Format { .. } => 3,
        Error::NonFiniteLoss { .. } | Error::Numeric(_) => 4,
        Error::Config(_) | Error::Contract(_) | Error::Dimension { .. } => 2,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Gen(a) => gen(a),
        Command::Train(a) => train_cmd(a),
        Command::Eval(a) => eval(a),
        Command::Attnmap(a) => attnmap(a),
        Command::Ablate(a) => ablate(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn gen(a: GenArgs) -> Result<(), Error> {
    let opts = GenerateOptions {
        seed: a.seed,
        classes: a.classes as usize,
        train: a.train,
        test: a.test,
        size: a.size,
        ..GenerateOptions::default()
    };
    let data = synth::generate(&opts)?;
    data.save(&a.out)?;
    let baseline = synth::centroid_baseline(&data);
    println!("dataset: {}", a.out.display());
    println!("classes: {}", data.classes);
    println!("train: {} images, per class {:?}", data.train.len(), data.train.class_counts(data.classes));
    println!("test: {} images, per class {:?}", data.test.len(), data.test.class_counts(data.classes));
    println!("image size: {0}x{0}", a.size);
    println!("nearest-centroid pixel baseline: {:.4}", baseline);
    Ok(())
}

fn train_cmd(a: TrainArgs) -> Result<(), Error> {
    let cfg = a.overrides.resolve()?;
    let data = Dataset::load(&a.data)?;
    info!(
        "training {} steps: structure layers {}, multi-level {}, contrastive {}",
        cfg.total_steps, cfg.sil_layer_count, cfg.mfb_enabled, cfg.contrastive_enabled
    );
    let out = train::train(&cfg, &data, Some(&a.out))?;
    println!("test accuracy: {:.4}", out.final_accuracy());
    println!("checkpoint: {}", a.out.join(OutputFiles::CHECKPOINT).display());
    println!("elapsed: {:.1}s", out.elapsed.as_secs_f64());
    Ok(())
}

fn load_split(path: &Path) -> Result<Split, Error> {
    if path.join(MANIFEST).exists() {
        Split::load(path)
    } else {
        Split::load(&path.join("test"))
    }
}

fn eval(a: EvalArgs) -> Result<(), Error> {
    let ckpt = Checkpoint::load(&a.ckpt)?;
    let split = load_split(&a.data)?;
    let acc = train::evaluate(&ckpt, &split)?;
    println!("accuracy: {acc:.4} ({} images)", split.len());
    Ok(())
}

fn attnmap(a: AttnmapArgs) -> Result<(), Error> {
    let ckpt = Checkpoint::load(&a.ckpt)?;
    let image = GrayImage::load(&a.image)?;
    let tensor = Sample { image, label: 0 }.to_tensor();
    let maps = heatmap::attention_maps(&ckpt, &tensor, a.layer)?;
    fs::create_dir_all(&a.out)?;
    let raw = a.out.join(format!("attn_layer{}_raw.pgm", a.layer));
    let kept = a.out.join(format!("attn_layer{}_thresholded.pgm", a.layer));
    maps.raw.save(&raw)?;
    maps.thresholded.save(&kept)?;
    println!(
        "layer {}: reference patch {}, {} of {} patches above mean",
        a.layer,
        maps.filtered.reference,
        maps.filtered.support(),
        maps.filtered.a.len()
    );
    println!("wrote {} and {}", raw.display(), kept.display());
    Ok(())
}

fn ablate(a: AblateArgs) -> Result<(), Error> {
    let base = a.overrides.resolve()?;
    let data = Dataset::load(&a.data)?;
    let seeds: Vec<u64> = (0..a.seeds).collect();
    let table = if a.parallel {
        let rows = std::thread::scope(|s| {
            let handles: Vec<_> = Ablation::ALL
                .iter()
                .map(|&ab| {
                    let (base, data, seeds) = (&base, &data, &seeds);
                    s.spawn(move || train::run_ablation(base, data, seeds, &[ab]))
                })
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("ablation thread panicked"))
                .collect::<Result<Vec<_>, Error>>()
        })?;
        AblationTable {
            seeds: seeds.clone(),
            rows: rows.into_iter().flat_map(|t| t.rows).collect(),
        }
    } else {
        train::run_ablation(&base, &data, &seeds, &Ablation::ALL)?
    };
    print!("{}", table.to_table());
    println!("observed ordering (best first): {}", table.observed_ordering().join(" > "));
    let csv = a.csv.unwrap_or_else(|| a.data.join("ablation.csv"));
    fs::write(&csv, table.to_csv())?;
    println!("csv: {}", csv.display());
    Ok(())
}
