//! `zsad`: generate synthetic data, train, run inference, evaluate, and
//! gradient-check the prompt-tuned dual-encoder anomaly detector.
//!
//! Exit codes: 0 success, 2 usage/input errors, 1 runtime failures.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use zsad_core::checkpoint::{load_checkpoint, save_checkpoint};
use zsad_core::config::RunConfig;
use zsad_core::data::{gen_synthetic, make_captions, Category, DatasetManifest};
use zsad_core::error::Error;
use zsad_core::eval::evaluate;
use zsad_core::gradcheck::{gradcheck_full_loss, DEFAULT_STEP, PASS_THRESHOLD};
use zsad_core::model::Model;
use zsad_core::pgm::{load_pgm, save_pgm};
use zsad_core::training::{train, Optimizer};
use zsad_core::vocab::Vocabulary;

#[derive(Parser)]
#[command(name = "zsad", version, about = "Zero-shot anomaly detection on a toy dual encoder")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic shape dataset with defect masks.
    ///
    /// Images render one jittered shape (intensity 0.8) on a 0.35 gray
    /// background plus Gaussian pixel noise (sigma 0.05). Abnormal samples
    /// add one contrasting blob 5-8 px across (0.05 on bright ground, 0.95
    /// on dark); the blob's exact footprint becomes the mask, stored as
    /// {0, 255} in the PGM file.
    GenData(GenDataArgs),
    /// Train prompts and projection on a manifest; writes a checkpoint.
    Train(TrainArgs),
    /// Score one image: anomaly map as PGM plus a scalar score.
    Infer(InferArgs),
    /// Evaluate a checkpoint on a test manifest.
    Eval(EvalArgs),
    /// Check analytic gradients of the full loss against finite differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct GenDataArgs {
    /// Output directory for images, masks, and manifest.json.
    #[arg(long)]
    out: PathBuf,
    /// Shape family: squares, disks, or bars.
    #[arg(long)]
    category: String,
    #[arg(long, default_value_t = 4)]
    n_normal: usize,
    #[arg(long, default_value_t = 4)]
    n_abnormal: usize,
    /// Square image side in pixels.
    #[arg(long, default_value_t = 64)]
    size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct TrainArgs {
    /// key=value config file; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    train_manifest: Option<PathBuf>,
    #[arg(long)]
    out_checkpoint: Option<PathBuf>,
    /// Loss log CSV path; defaults to <out-checkpoint>.loss.csv.
    #[arg(long)]
    loss_csv: Option<PathBuf>,
    /// Overrides both the weight-init and shuffling seeds from the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Print the effective configuration and exit.
    #[arg(long, default_value_t = false)]
    dump_config: bool,
}

#[derive(Args)]
struct InferArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Grayscale PGM input matching the configured image size.
    #[arg(long)]
    image: PathBuf,
    /// Category name substituted into the caption templates.
    #[arg(long)]
    category: String,
    /// Anomaly map output (PGM, round(255 * score) per pixel).
    #[arg(long)]
    out_map: PathBuf,
    /// Optional file receiving the printed score line.
    #[arg(long)]
    out_score: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    test_manifest: PathBuf,
    /// Directory receiving report.json and report.txt.
    #[arg(long)]
    out_report: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Image side for the check; must be a positive multiple of 8.
    #[arg(long, default_value_t = 32)]
    size: usize,
}

fn cmd_gen_data(args: &GenDataArgs) -> Result<(), Error> {
    let category: Category = args.category.parse()?;
    let manifest = gen_synthetic(
        category,
        args.n_normal,
        args.n_abnormal,
        args.size,
        args.seed,
        &args.out,
    )?;
    println!(
        "wrote {} records to {}",
        manifest.records.len(),
        args.out.join("manifest.json").display()
    );
    Ok(())
}

fn cmd_train(args: &TrainArgs) -> Result<(), Error> {
    let mut config = match &args.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = args.seed {
        config.model.seed = seed;
        config.train.seed = seed;
    }
    if args.dump_config {
        print!("{}", config.to_text());
        return Ok(());
    }
    let manifest_path = args
        .train_manifest
        .as_ref()
        .ok_or_else(|| Error::usage("--train-manifest is required".to_string()))?;
    let out_checkpoint = args
        .out_checkpoint
        .as_ref()
        .ok_or_else(|| Error::usage("--out-checkpoint is required".to_string()))?;

    let manifest = DatasetManifest::load(manifest_path)?;
    let mut model = Model::new(config.model.clone(), Vocabulary::builtin())?;
    let mut optimizer = Optimizer::new();
    let log = train(&mut model, &mut optimizer, &manifest, &config.train)?;
    save_checkpoint(&model, &optimizer, &config, out_checkpoint)?;

    let csv_path = args
        .loss_csv
        .clone()
        .unwrap_or_else(|| PathBuf::from(format!("{}.loss.csv", out_checkpoint.display())));
    log.write_csv(&csv_path)?;

    for (epoch, mean) in log.epoch_means.iter().enumerate() {
        println!("epoch {epoch}: mean loss {mean:.6}");
    }
    println!("checkpoint {} loss-log {}", out_checkpoint.display(), csv_path.display());
    Ok(())
}

fn cmd_infer(args: &InferArgs) -> Result<(), Error> {
    let (model, _optimizer, config) = load_checkpoint(&args.checkpoint)?;
    let image = load_pgm(&args.image)?;
    // Captions follow the default manifest templates.
    let manifest = DatasetManifest::new();
    let captions = make_captions(&args.category, &manifest)?;
    let output = model.infer(&image, &captions)?;
    save_pgm(&output.aggregated_map, &args.out_map)?;
    let line = format!("{:.6}", output.image_score);
    println!("{line}");
    if let Some(path) = &args.out_score {
        std::fs::write(path, format!("{line}\n"))
            .map_err(|e| Error::io(format!("writing {}", path.display()), e))?;
    }
    let _ = config;
    Ok(())
}

fn cmd_eval(args: &EvalArgs) -> Result<(), Error> {
    let (model, _optimizer, config) = load_checkpoint(&args.checkpoint)?;
    let manifest = DatasetManifest::load(&args.test_manifest)?;
    let report = evaluate(&model, &manifest, &config.digest())?;
    std::fs::create_dir_all(&args.out_report)
        .map_err(|e| Error::io(format!("creating {}", args.out_report.display()), e))?;
    let json_path = args.out_report.join("report.json");
    let text_path = args.out_report.join("report.txt");
    std::fs::write(&json_path, report.to_json())
        .map_err(|e| Error::io(format!("writing {}", json_path.display()), e))?;
    std::fs::write(&text_path, report.to_text())
        .map_err(|e| Error::io(format!("writing {}", text_path.display()), e))?;
    print!("{}", report.to_text());
    Ok(())
}

fn cmd_gradcheck(args: &GradcheckArgs) -> Result<bool, Error> {
    let report = gradcheck_full_loss(args.size, args.seed, DEFAULT_STEP)?;
    println!(
        "max relative error {:.6e} over {} coordinates (threshold {PASS_THRESHOLD:e})",
        report.max_rel_error, report.coordinates
    );
    for (name, err) in &report.per_param {
        println!("  {name}: {err:.6e}");
    }
    println!("{}", if report.passed() { "PASS" } else { "FAIL" });
    Ok(report.passed())
}

fn run(cli: &Cli) -> Result<bool, Error> {
    match &cli.command {
        Command::GenData(args) => cmd_gen_data(args).map(|()| true),
        Command::Train(args) => cmd_train(args).map(|()| true),
        Command::Infer(args) => cmd_infer(args).map(|()| true),
        Command::Eval(args) => cmd_eval(args).map(|()| true),
        Command::Gradcheck(args) => cmd_gradcheck(args),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_usage() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
