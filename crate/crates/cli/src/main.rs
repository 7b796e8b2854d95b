use std::path::{Path, PathBuf};
use std::process::ExitCode;

use avmoe::corruption::CorruptionPreset;
use avmoe::diagnostics::gradcheck_suite;
use avmoe::metrics::{read_table, write_table};
use avmoe::model::Model;
use avmoe::streams::GeneratorConfig;
use avmoe::train::{
    self, eval_group_load_vs_snr, eval_pairs, evaluate_ter, group_load_table, DataConfig, MetricsReport,
    TrainConfig,
};
use avmoe::Error;
use clap::{Parser, Subcommand};

const EXIT_CONFIG: u8 = 2;
const EXIT_NUMERIC: u8 = 3;

#[derive(Parser)]
#[command(name = "avmoe", version, about = "Audio-visual mixture-of-experts toy trainer")]
struct Cli {
    /// Overrides the run seed (takes precedence over AVMOE_SEED).
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a training job described by a JSON config.
    Train {
        config: PathBuf,
        /// Output directory; defaults to `runs/<config stem>`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on held-out synthetic pairs.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// clean, train-default, eval-fullnoise or supervised-noise.
        #[arg(long, default_value = "eval-fullnoise")]
        preset: String,
        /// Comma-separated SNRs (dB) for the group-load curve.
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
        snr_sweep: Option<Vec<f64>>,
        #[arg(long, default_value_t = 32)]
        pairs: usize,
        #[arg(long, default_value_t = 8)]
        tokens: usize,
    },
    /// Finite-difference check of every differentiable operation.
    Gradcheck {
        /// Restrict to one module: numeric, moe or losses.
        #[arg(long)]
        module: Option<String>,
        #[arg(long, default_value_t = 3)]
        seeds: u64,
    },
    /// Summarize a finished run and emit plot-ready tables.
    Report {
        #[arg(long)]
        run_dir: PathBuf,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Divergence { .. } | Error::NonFinite { .. } => EXIT_NUMERIC,
        Error::Config(_) | Error::Json(_) | Error::Io(_) | Error::Parse { .. } | Error::Unsupported(_) => {
            EXIT_CONFIG
        }
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.cmd {
        Command::Train { config, out } => run_train(&config, out, cli.seed),
        Command::Eval {
            checkpoint,
            preset,
            snr_sweep,
            pairs,
            tokens,
        } => run_eval(&checkpoint, &preset, snr_sweep, pairs, tokens, cli.seed.unwrap_or(0)),
        Command::Gradcheck { module, seeds } => run_gradcheck(module.as_deref(), seeds),
        Command::Report { run_dir } => run_report(&run_dir),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn run_train(path: &Path, out: Option<PathBuf>, seed: Option<u64>) -> avmoe::Result<()> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
    let mut cfg: TrainConfig =
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    cfg.apply_env_seed()?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    let dir = out.unwrap_or_else(|| {
        let stem = path.file_stem().map_or("run".into(), |s| s.to_string_lossy().into_owned());
        PathBuf::from("runs").join(stem)
    });
    let run = train::train(&cfg)?;
    train::write_run(&dir, &cfg, &run)?;
    let last = run.steps.last().expect("at least one step");
    println!("steps {} final total {:.6}", run.steps.len(), last.total);
    for (name, ter) in &run.report.ter {
        println!("ter {name} {ter:.4}");
    }
    println!("wrote {}", dir.display());
    Ok(())
}

fn run_eval(
    checkpoint: &Path,
    preset: &str,
    snr_sweep: Option<Vec<f64>>,
    pairs: usize,
    tokens: usize,
    seed: u64,
) -> avmoe::Result<()> {
    let model = Model::load(checkpoint)?;
    let preset = CorruptionPreset::by_name(preset)?;
    let cfg = model.cfg();
    let data = DataConfig {
        generator: GeneratorConfig {
            vocab: cfg.vocab,
            frames_per_token: cfg.frames_per_token,
            dim_audio: cfg.dim_audio,
            dim_video: cfg.dim_video,
            ..GeneratorConfig::default()
        },
        tokens,
    };
    let held_out = eval_pairs(&data, seed, pairs)?;
    let ter = evaluate_ter(&model, &held_out, &data.generator, &preset, seed)?;
    println!("ter {} {ter:.4}", preset.name);
    if let Some(snrs) = snr_sweep {
        let curve = eval_group_load_vs_snr(&model, &snrs, &held_out, &data.generator, seed)?;
        print!("{}", group_load_table(&curve)?.to_csv_string());
    }
    Ok(())
}

fn run_gradcheck(module: Option<&str>, seeds: u64) -> avmoe::Result<()> {
    let results = gradcheck_suite(module, seeds, 1e-4)?;
    let mut worst = 0.0f64;
    for r in &results {
        println!("{:<8} {:<28} {:.3e}", r.module, r.name, r.max_error);
        worst = worst.max(r.max_error);
    }
    println!("checked {} operations, worst {worst:.3e}", results.len());
    if worst < 1e-4 {
        Ok(())
    } else {
        Err(Error::NonFinite {
            coordinate: 0,
            detail: format!("gradient mismatch {worst:.3e} exceeds 1e-4"),
        })
    }
}

const REQUIRED_KEYS: [&str; 5] = ["loss_curves", "expert_load", "group_load_vs_snr", "flops", "ter"];

fn run_report(dir: &Path) -> avmoe::Result<()> {
    let text = std::fs::read_to_string(dir.join(train::SUMMARY_FILE))?;
    let value: serde_json::Value = serde_json::from_str(&text)?;
    for key in REQUIRED_KEYS {
        if value.get(key).is_none() {
            return Err(Error::Config(format!("summary lacks `{key}`")));
        }
    }
    let report: MetricsReport = serde_json::from_value(value)?;
    let steps = read_table(&dir.join(train::STEPS_FILE))?;
    if steps.len() != report.steps {
        return Err(Error::Config(format!(
            "steps.csv has {} rows, summary says {}",
            steps.len(),
            report.steps
        )));
    }
    write_table(&train::report_table(&report)?, &dir.join(train::REPORT_FILE))?;
    println!("regime {:?}, {} steps", report.regime, report.steps);
    if let Some(total) = report.loss_curves.get("total").and_then(|c| c.last()) {
        println!("final total loss {total:.6}");
    }
    for (name, ter) in &report.ter {
        println!("ter {name} {ter:.4}");
    }
    if let Some(gl) = &report.group_load {
        println!(
            "group load audio-only {:?} video-only {:?} av {:?}",
            gl.audio_only, gl.video_only, gl.audio_visual
        );
    }
    println!(
        "flops activated/dense {:.4}, feature distance {:.4}, balance cv {:.4}",
        report.flops.ratio, report.feature_distance, report.balance_cv
    );
    println!("wrote {}", dir.join(train::REPORT_FILE).display());
    Ok(())
}
