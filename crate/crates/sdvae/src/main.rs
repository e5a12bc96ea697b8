//! Command-line front end: training, evaluation, exports, a quick
//! gradient self-check, and small hyperparameter grids.
//!
//! Exit codes: 0 success, 2 usage/config error, 3 numeric failure,
//! 4 I/O error.

use clap::{Args, Parser, Subcommand};
use sdvae::autodiff::{finite_difference_check, AdError, Tape};
use sdvae::data::{
    export_latents, export_reconstructions, load_idx_dataset, make_synthetic, masked_re_mean,
    DataError, Dataset, SyntheticSpec,
};
use sdvae::distributions::NoiseSource;
use sdvae::model::{
    sdvae1_loss, sdvae2_loss, unlabeled_loss, Arch, Batch, EncoderKind, LatentMask, ModelParams,
    NoiseBundle, ReconKind,
};
use sdvae::trainer::{error_rate, metrics_to_jsonl, train, TrainError, TrainingConfig};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "sdvae", version, about = "Semi-supervised disentangled VAE")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a model and write metrics, checkpoint and resolved config.
    Train(TrainArgs),
    /// Report the classification error of a checkpoint on a dataset.
    Eval(EvalArgs),
    /// Write a CSV of per-example v probabilities and u means.
    ExportLatents(ExportArgs),
    /// Write a CSV of reconstructions, optionally masking a latent.
    ExportRecon(ExportReconArgs),
    /// Finite-difference self-check of the objective gradients.
    Gradcheck,
    /// Train over a grid of labeled counts and seeds, print a table.
    Grid(GridArgs),
}

#[derive(Args, Clone)]
struct DataArgs {
    /// IDX image file; omit to use the synthetic corpus.
    #[arg(long)]
    images: Option<PathBuf>,
    /// IDX label file.
    #[arg(long)]
    labels: Option<PathBuf>,
    /// Held-out IDX image file.
    #[arg(long)]
    test_images: Option<PathBuf>,
    /// Held-out IDX label file.
    #[arg(long)]
    test_labels: Option<PathBuf>,
    /// Synthetic corpus: class count.
    #[arg(long, default_value_t = 4)]
    k: usize,
    /// Synthetic corpus: square image side.
    #[arg(long, default_value_t = 8)]
    size: usize,
    /// Synthetic corpus: pixel flip probability.
    #[arg(long, default_value_t = 0.1)]
    corruption: f64,
    #[arg(long, default_value_t = 2000)]
    n_train: usize,
    #[arg(long, default_value_t = 500)]
    n_test: usize,
    /// Seed for the synthetic corpus (independent of the training seed).
    #[arg(long, default_value_t = 0)]
    data_seed: u64,
}

#[derive(Args)]
struct TrainArgs {
    /// TOML training configuration; flags below override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory; defaults to $SDVAE_OUT_ROOT/<name> or ./runs/<name>.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Run name used for the default output directory.
    #[arg(long, default_value = "run")]
    name: String,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    labeled_count: Option<usize>,
    #[arg(long)]
    variant: Option<String>,
    #[arg(long)]
    flow_length: Option<usize>,
    #[command(flatten)]
    data: DataArgs,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    data: DataArgs,
}

#[derive(Args)]
struct ExportArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    data: DataArgs,
}

#[derive(Args)]
struct ExportReconArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// none, mask-u or mask-v.
    #[arg(long, default_value = "none")]
    mask: String,
    #[command(flatten)]
    data: DataArgs,
}

#[derive(Args)]
struct GridArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Comma-separated labeled counts.
    #[arg(long, default_value = "100,600,1000,3000")]
    labeled: String,
    /// Comma-separated seeds.
    #[arg(long, default_value = "0,1,2")]
    seeds: String,
    #[arg(long)]
    epochs: Option<usize>,
    #[command(flatten)]
    data: DataArgs,
}

#[derive(Debug)]
enum CliError {
    Usage(String),
    Numeric(String),
    Io(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Numeric(_) => 3,
            CliError::Io(_) => 4,
        }
    }
    fn msg(&self) -> &str {
        match self {
            CliError::Usage(m) | CliError::Numeric(m) | CliError::Io(m) => m,
        }
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        match e {
            DataError::Io(_) => CliError::Io(e.to_string()),
            DataError::Model(_) => CliError::Numeric(e.to_string()),
            _ => CliError::Usage(e.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Config(_) => CliError::Usage(e.to_string()),
            _ => CliError::Numeric(e.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

fn load_data(args: &DataArgs, threshold: f64) -> Result<(Dataset, Option<Dataset>), CliError> {
    match (&args.images, &args.labels) {
        (Some(im), Some(lb)) => {
            let train = load_idx_dataset(im, lb, threshold)?;
            let test = match (&args.test_images, &args.test_labels) {
                (Some(ti), Some(tl)) => Some(load_idx_dataset(ti, tl, threshold)?),
                (None, None) => None,
                _ => {
                    return Err(CliError::Usage(
                        "--test-images and --test-labels must be given together".into(),
                    ))
                }
            };
            Ok((train, test))
        }
        (None, None) => {
            let spec = SyntheticSpec {
                k: args.k,
                h: args.size,
                w: args.size,
                corruption: args.corruption,
                n_train: args.n_train,
                n_test: args.n_test,
                seed: args.data_seed,
            };
            let (tr, te, _) = make_synthetic(&spec)?;
            Ok((tr, Some(te)))
        }
        _ => Err(CliError::Usage(
            "--images and --labels must be given together".into(),
        )),
    }
}

fn load_config(path: &Option<PathBuf>) -> Result<TrainingConfig, CliError> {
    match path {
        Some(p) => {
            let text = std::fs::read_to_string(p)?;
            toml::from_str(&text).map_err(|e| CliError::Usage(format!("bad config {p:?}: {e}")))
        }
        None => Ok(TrainingConfig::default()),
    }
}

fn out_dir(explicit: &Option<PathBuf>, name: &str) -> PathBuf {
    if let Some(p) = explicit {
        return p.clone();
    }
    let root = std::env::var_os("SDVAE_OUT_ROOT")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("runs"));
    root.join(name)
}

fn run_train(args: &TrainArgs) -> Result<(), CliError> {
    let mut cfg = load_config(&args.config)?;
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if let Some(e) = args.epochs {
        cfg.epochs = e;
    }
    if let Some(lr) = args.lr {
        cfg.lr = lr;
    }
    if let Some(lc) = args.labeled_count {
        cfg.labeled_count = lc;
    }
    if let Some(fl) = args.flow_length {
        cfg.flow_length = fl;
    }
    if let Some(v) = &args.variant {
        cfg.variant = match v.as_str() {
            "sdvae1" => sdvae::trainer::Variant::Sdvae1,
            "sdvae2" => sdvae::trainer::Variant::Sdvae2,
            other => return Err(CliError::Usage(format!("unknown variant {other}"))),
        };
    }
    let (train_ds, test_ds) = load_data(&args.data, cfg.binarize_threshold)?;
    let k = train_ds.num_classes().max(args.data.k);
    let dir = out_dir(&args.out, &args.name);
    std::fs::create_dir_all(&dir)?;
    let resolved = toml::to_string_pretty(&cfg)
        .map_err(|e| CliError::Usage(format!("could not serialize config: {e}")))?;
    std::fs::write(dir.join("config.toml"), resolved)?;

    let outcome = train(&cfg, &train_ds, k, test_ds.as_ref())?;
    std::fs::write(dir.join("metrics.jsonl"), metrics_to_jsonl(&outcome.metrics))?;
    outcome
        .model
        .save(&dir.join("checkpoint.ckpt"))
        .map_err(|e| CliError::Io(e.to_string()))?;
    if let Some(epoch) = outcome.diverged {
        return Err(CliError::Numeric(format!(
            "training diverged at epoch {epoch}; last good checkpoint written to {dir:?}"
        )));
    }
    if let Some(m) = outcome.metrics.last() {
        println!(
            "epoch {} loss {:.4} train_err {:.4} test_err {}",
            m.epoch,
            m.loss,
            m.train_err,
            m.test_err.map_or("n/a".into(), |e| format!("{e:.4}")),
        );
    }
    println!("artifacts in {}", dir.display());
    Ok(())
}

fn load_checkpoint(path: &Path) -> Result<ModelParams, CliError> {
    ModelParams::load(path).map_err(|e| match e {
        sdvae::model::CheckpointError::Io(io) => CliError::Io(io.to_string()),
        other => CliError::Usage(other.to_string()),
    })
}

fn run_eval(args: &EvalArgs) -> Result<(), CliError> {
    let model = load_checkpoint(&args.checkpoint)?;
    let (ds, test) = load_data(&args.data, 0.5)?;
    let target = test.unwrap_or(ds);
    let err = error_rate(&model, &target.x, &target.labels, target.n)?;
    let re = masked_re_mean(&model, &target, LatentMask::None)?;
    println!("n {} error {:.4} mean_re {:.4}", target.n, err, re);
    Ok(())
}

fn parse_mask(s: &str) -> Result<LatentMask, CliError> {
    match s {
        "none" => Ok(LatentMask::None),
        "mask-u" => Ok(LatentMask::MaskU),
        "mask-v" => Ok(LatentMask::MaskV),
        other => Err(CliError::Usage(format!(
            "unknown mask {other}; expected none, mask-u or mask-v"
        ))),
    }
}

fn run_export_latents(args: &ExportArgs) -> Result<(), CliError> {
    let model = load_checkpoint(&args.checkpoint)?;
    let (ds, test) = load_data(&args.data, 0.5)?;
    let target = test.unwrap_or(ds);
    export_latents(&args.out, &model, &target)?;
    println!("wrote {} rows to {}", target.n, args.out.display());
    Ok(())
}

fn run_export_recon(args: &ExportReconArgs) -> Result<(), CliError> {
    let model = load_checkpoint(&args.checkpoint)?;
    let mask = parse_mask(&args.mask)?;
    let (ds, test) = load_data(&args.data, 0.5)?;
    let target = test.unwrap_or(ds);
    export_reconstructions(&args.out, &model, &target, mask)?;
    println!("wrote {} rows to {}", target.n, args.out.display());
    Ok(())
}

fn run_gradcheck() -> Result<(), CliError> {
    // a 4-pixel, two-class, two-dimensional-u instance of each objective
    let arch = Arch {
        dim_x: 4,
        dim_u: 2,
        k: 2,
        enc_hidden: vec![5],
        dec_hidden: vec![4],
        flow_length: 1,
        encoder: EncoderKind::Mlp,
        conv: None,
        dropout: 0.0,
        recon: ReconKind::Bernoulli,
    };
    let model0 = ModelParams::new(arch, 11).map_err(|e| CliError::Numeric(e.to_string()))?;
    let batch = Batch::new(
        vec![1.0, 0.0, 1.0, 1.0, 0.0, 1.0, 0.0, 0.0, 1.0, 1.0, 0.0, 1.0],
        3,
        4,
        vec![Some(1), None, None],
    );
    let mut src = NoiseSource::new(5);
    let mut noise = NoiseBundle::draw(&mut src, &model0.arch, 3, true);
    let cfg = TrainingConfig::default().objective();
    let point = model0.get_flat();
    // pin the sample and the stopped-gradient coefficient at the base point
    let frozen_coeff: Vec<f64> = {
        let mut tape = Tape::new();
        let bound = model0.bind(&mut tape);
        let base = sdvae2_loss(&mut tape, &model0, &bound, &batch, &noise, &cfg)
            .map_err(|e| CliError::Numeric(e.to_string()))?;
        noise.v_forced = Some(base.v_sample.clone());
        base.reward
            .iter()
            .zip(&base.baseline)
            .map(|(r, b)| cfg.beta1 * r - b)
            .collect()
    };
    let mut worst = 0.0f64;
    for variant in ["sdvae1", "sdvae2", "unlabeled"] {
        let batch = if variant == "unlabeled" {
            Batch::new(batch.x.clone(), 3, 4, vec![None, None, None])
        } else {
            batch.clone()
        };
        let report = finite_difference_check(
            |p| {
                let mut m = model0.clone();
                m.set_flat(p);
                let mut tape = Tape::new();
                let bound = m.bind(&mut tape);
                let loss = match variant {
                    "sdvae1" => sdvae1_loss(&mut tape, &m, &bound, &batch, &noise, &cfg),
                    "sdvae2" => sdvae::model::sdvae2_loss_frozen(
                        &mut tape,
                        &m,
                        &bound,
                        &batch,
                        &noise,
                        &cfg,
                        &frozen_coeff,
                    ),
                    _ => unlabeled_loss(&mut tape, &m, &bound, &batch, &noise, &cfg),
                }
                .map_err(|_| AdError::NonDeterministic)?;
                tape.backward(loss.total)?;
                Ok((loss.total_value, m.collect_grads(&tape, &bound).concat()))
            },
            &point,
            1e-6,
        )
        .map_err(|e| CliError::Numeric(e.to_string()))?;
        println!("{variant}: max rel err {:.3e}", report.max_rel_err);
        worst = worst.max(report.max_rel_err);
    }
    if worst >= 1e-5 {
        return Err(CliError::Numeric(format!(
            "gradient check failed: max rel err {worst:.3e} >= 1e-5"
        )));
    }
    println!("gradcheck ok");
    Ok(())
}

fn parse_list<T: std::str::FromStr>(s: &str, what: &str) -> Result<Vec<T>, CliError> {
    s.split(',')
        .map(|p| {
            p.trim()
                .parse::<T>()
                .map_err(|_| CliError::Usage(format!("bad {what} entry {p:?}")))
        })
        .collect()
}

fn run_grid(args: &GridArgs) -> Result<(), CliError> {
    let base = load_config(&args.config)?;
    let labeled: Vec<usize> = parse_list(&args.labeled, "labeled count")?;
    let seeds: Vec<u64> = parse_list(&args.seeds, "seed")?;
    let (train_ds, test_ds) = load_data(&args.data, base.binarize_threshold)?;
    let k = train_ds.num_classes().max(args.data.k);
    let dir = args.out.clone().unwrap_or_else(|| out_dir(&None, "grid"));
    std::fs::create_dir_all(&dir)?;
    println!("labeled seed test_err");
    for &lc in &labeled {
        for &seed in &seeds {
            let mut cfg = base.clone();
            cfg.labeled_count = lc;
            cfg.seed = seed;
            if let Some(e) = args.epochs {
                cfg.epochs = e;
            }
            let outcome = train(&cfg, &train_ds, k, test_ds.as_ref())?;
            let err = outcome
                .metrics
                .last()
                .and_then(|m| m.test_err)
                .unwrap_or(f64::NAN);
            println!("{lc} {seed} {err:.4}");
            let sub = dir.join(format!("l{lc}_s{seed}"));
            std::fs::create_dir_all(&sub)?;
            std::fs::write(sub.join("metrics.jsonl"), metrics_to_jsonl(&outcome.metrics))?;
            outcome
                .model
                .save(&sub.join("checkpoint.ckpt"))
                .map_err(|e| CliError::Io(e.to_string()))?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.cmd {
        Cmd::Train(a) => run_train(a),
        Cmd::Eval(a) => run_eval(a),
        Cmd::ExportLatents(a) => run_export_latents(a),
        Cmd::ExportRecon(a) => run_export_recon(a),
        Cmd::Gradcheck => run_gradcheck(),
        Cmd::Grid(a) => run_grid(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.msg());
            ExitCode::from(e.code())
        }
    }
}
