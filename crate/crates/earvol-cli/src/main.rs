//! `pipeline` — command-line front end.
//!
//! ```text
//! pipeline run      --config <file> [--overlays]
//! pipeline train    --stage <eargate|auribox|ehmasker> --config <file> [--cv|--final]
//! pipeline evaluate --pred <csv> --gt <csv> [--out <dir>]
//! pipeline phantom  --n <k> --seed <s> --out <dir>
//! ```
//!
//! Exit codes: 0 success, 1 configuration/run error, 2 finished with
//! warnings.

use clap::{Args, Parser, Subcommand};
use earvol::phantom::{phantom_cohort, CohortConfig};
use earvol::pipeline::{
    cmd_evaluate, cmd_train, run_pipeline, PipelineConfig, Stage, TrainMode,
};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "pipeline",
    about = "Volumetric inner-ear fluid quantification from paired MRI stacks"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the full inference pipeline over a dataset root.
    Run(RunArgs),
    /// Train one stage and write its checkpoints + fold tables.
    Train(TrainArgs),
    /// Compare a run report against ground truth.
    Evaluate(EvaluateArgs),
    /// Generate a synthetic phantom cohort with analytic ground truth.
    Phantom(PhantomArgs),
}

#[derive(Args)]
struct RunArgs {
    /// Pipeline config file (flat key=value).
    #[arg(long)]
    config: PathBuf,
    /// Also write per-slice QC overlays (boxes + mask contours).
    #[arg(long)]
    overlays: bool,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    /// Stage to train: eargate, auribox, or ehmasker.
    #[arg(long)]
    stage: String,
    /// Patient-level cross validation (model comparison).
    #[arg(long, conflicts_with = "final_mode")]
    cv: bool,
    /// Final 80/20 retraining for deployment (default).
    #[arg(long = "final", conflicts_with = "cv")]
    final_mode: bool,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Run-report CSV produced by `pipeline run`.
    #[arg(long)]
    pred: PathBuf,
    /// Ground-truth CSV (`patient_id,ear,v_vest_mm3,v_endo_mm3,elr_percent`).
    #[arg(long)]
    gt: PathBuf,
    /// Output directory for the comparison tables and chart
    /// (defaults next to the prediction file).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct PhantomArgs {
    /// Number of patients.
    #[arg(long, default_value_t = 20)]
    n: usize,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    /// Destination dataset root.
    #[arg(long)]
    out: PathBuf,
    /// Base noise sigma (SPACE-like; REAL-IR doubles it).
    #[arg(long, default_value_t = 0.02)]
    noise: f64,
    /// Annotated slices per ear for segmentation training (3-6).
    #[arg(long, default_value_t = 4)]
    annot_slices: usize,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(1)
        }
    }
}

fn dispatch(cli: Cli) -> anyhow::Result<ExitCode> {
    match cli.command {
        Command::Run(args) => {
            let mut cfg = PipelineConfig::from_file(&args.config)?;
            if args.overlays {
                cfg.overlays = true;
            }
            let report = run_pipeline(&cfg)?;
            for t in &report.timings {
                log::info!("stage {:<12} {:8.2}s", t.stage, t.seconds);
            }
            let csv = cfg.output_dir.join("reports").join("ear_reports.csv");
            println!("{} ear reports -> {}", report.reports.len(), csv.display());
            let n_warn: usize = report.reports.iter().map(|r| r.warnings.len()).sum();
            if report.has_warnings() {
                println!("finished with {n_warn} warning(s); see the warnings column");
                return Ok(ExitCode::from(2));
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Train(args) => {
            let cfg = PipelineConfig::from_file(&args.config)?;
            let stage = Stage::parse(&args.stage)
                .ok_or_else(|| anyhow::anyhow!("unknown stage {}", args.stage))?;
            let mode = if args.cv {
                TrainMode::CrossValidation
            } else {
                TrainMode::Final
            };
            let outcome = cmd_train(stage, &cfg, mode)?;
            for line in &outcome.summary {
                println!("{line}");
            }
            for t in &outcome.tables {
                println!("table -> {}", t.display());
            }
            for c in &outcome.checkpoints {
                println!("checkpoint -> {}", c.display());
            }
            println!("trained {} in {:.1}s", stage.tag(), outcome.seconds);
            Ok(ExitCode::SUCCESS)
        }
        Command::Evaluate(args) => {
            let out = args
                .out
                .clone()
                .or_else(|| args.pred.parent().map(PathBuf::from))
                .unwrap_or_else(|| PathBuf::from("."));
            let summary = cmd_evaluate(&args.pred, &args.gt, &out)?;
            println!(
                "mean |ELR error| {:.2} pp over {} ears",
                summary.mean_abs_elr_error_pp,
                summary.rows.len()
            );
            println!(
                "VSI (means): vestibule {:.2}%, endolymph {:.2}%",
                summary.vsi_vestibule, summary.vsi_endolymph
            );
            Ok(ExitCode::SUCCESS)
        }
        Command::Phantom(args) => {
            let cohort = CohortConfig {
                n_patients: args.n,
                seed: args.seed,
                noise_sigma: args.noise,
                annot_slices: args.annot_slices,
                ..Default::default()
            };
            let summary = phantom_cohort(&cohort, &args.out)?;
            // ready-to-edit config template pointing at the new dataset
            let mut cfg = PipelineConfig::with_roots(&args.out, &args.out.join("out"));
            cfg.seed = args.seed;
            desk_scale_profile(&mut cfg);
            let conf_path = args.out.join("pipeline.conf");
            cfg.write_file(&conf_path)?;
            println!(
                "wrote {} patients under {} (ground_truth.csv + labels/centroids/annotations)",
                summary.patients.len(),
                summary.root.display()
            );
            println!("config template -> {}", conf_path.display());
            Ok(ExitCode::SUCCESS)
        }
    }
}

/// Training profile sized for CPU-only phantom cohorts; architecture and
/// thresholds keep their shipped defaults.
fn desk_scale_profile(cfg: &mut PipelineConfig) {
    cfg.train.eargate.input_size = 64;
    cfg.train.eargate.max_epochs = 8;
    cfg.train.eargate.slices_per_class = 6;
    cfg.train.eargate.batch_size = 16;
    cfg.train.auribox.input_size = 160;
    cfg.train.auribox.max_epochs = 12;
    cfg.train.auribox.lr = 0.01;
    cfg.train.auribox.augment = "light".into();
    cfg.train.ehmasker.max_epochs = 12;
    cfg.train.ehmasker.lr = 3e-4;
    cfg.train.ehmasker.batch_size = 8;
}
