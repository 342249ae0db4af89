use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::error;
use volrecon_core::metrics::MetricReport;
use volrecon_core::pipeline::{preset, run_pipeline, run_sweep, ExperimentConfig, SweepAxis, PRESETS};
use volrecon_core::Error;

const EXIT_CONFIG: u8 = 2;
const EXIT_STAGE: u8 = 3;

#[derive(Parser)]
#[command(name = "volrecon", version, about = "Axial super-resolution of projection stacks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// JSON experiment config.
    #[arg(long, conflicts_with = "preset")]
    config: Option<PathBuf>,
    /// Start from a named preset (see `preset list`).
    #[arg(long)]
    preset: Option<String>,
    /// Override a field, e.g. `--set diffusion.guidance.gamma=0.3`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Output directory; shorthand for `--set output_dir=...`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the ground-truth phantom.
    Phantom(ConfigArgs),
    /// Project the phantom into an axial stack.
    Acquire(ConfigArgs),
    /// Fit the implicit field to the stack.
    TrainInr(ConfigArgs),
    /// Train the conditional denoiser.
    TrainDiff(ConfigArgs),
    /// Reconstruct the full-resolution volume.
    Reconstruct(ConfigArgs),
    /// Run every stage and print the metric table.
    Evaluate(ConfigArgs),
    /// Run one pipeline per value of a scalar parameter.
    Sweep {
        #[command(flatten)]
        config: ConfigArgs,
        /// One of step_length, gamma, w.
        #[arg(long)]
        axis: String,
        #[arg(long, value_delimiter = ',', num_args = 1..)]
        values: Vec<f64>,
    },
    /// Inspect shipped presets.
    Preset {
        #[command(subcommand)]
        action: PresetAction,
    },
}

#[derive(Subcommand)]
enum PresetAction {
    List,
    /// Print a preset as JSON.
    Show { name: String },
}

fn resolve(args: &ConfigArgs) -> Result<ExperimentConfig, Error> {
    let base = match (&args.config, &args.preset) {
        (Some(path), _) => ExperimentConfig::load(path)?,
        (None, Some(name)) => preset(name).ok_or_else(|| Error::Config(format!("unknown preset `{name}`")))?,
        (None, None) => ExperimentConfig::default(),
    };
    let mut overrides = args.overrides.clone();
    if let Some(out) = &args.out {
        overrides.push(format!("output_dir={}", serde_json::to_string(out).unwrap()));
    }
    let cfg = base.with_overrides(&overrides)?;
    cfg.validate()?;
    Ok(cfg)
}

fn print_table(label: &str, report: &MetricReport) {
    println!("{:<18} | SSIM↑  | PSNR↑ | DICE↑", "method");
    println!("{:<18} | {}", label, report.summary_row());
    if report.infinite_psnr_slices > 0 {
        println!("({} slices with identical reconstruction excluded from mean PSNR)", report.infinite_psnr_slices);
    }
}

fn stage(args: &ConfigArgs, until: &str) -> Result<(), Error> {
    let cfg = resolve(args)?;
    let out = run_pipeline(&cfg, Some(until))?;
    for s in &out.skipped {
        println!("stage {s}: cached");
    }
    for s in &out.executed {
        println!("stage {s}: done");
    }
    if let Some(report) = &out.report {
        print_table(&format!("{:?}", cfg.method).to_lowercase(), report);
    }
    println!("artifacts in {}", cfg.output_dir.display());
    Ok(())
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Phantom(a) => stage(&a, "phantom"),
        Command::Acquire(a) => stage(&a, "acquire"),
        Command::TrainInr(a) => stage(&a, "train-inr"),
        Command::TrainDiff(a) => stage(&a, "train-diff"),
        Command::Reconstruct(a) => stage(&a, "reconstruct"),
        Command::Evaluate(a) => stage(&a, "evaluate"),
        Command::Sweep { config, axis, values } => {
            let cfg = resolve(&config)?;
            let axis = SweepAxis::parse(&axis)?;
            let rep = run_sweep(&cfg, axis, &values)?;
            println!("{:<12} | SSIM↑  | PSNR↑ | DICE↑", axis.name());
            for row in &rep.rows {
                match (&row.report, &row.error) {
                    (Some(r), _) => println!("{:<12} | {}", row.value, r.summary_row()),
                    (None, e) => println!("{:<12} | failed: {}", row.value, e.as_deref().unwrap_or("unknown")),
                }
            }
            println!("csv: {}", rep.csv.display());
            for p in &rep.plots {
                println!("plot: {}", p.display());
            }
            Ok(())
        }
        Command::Preset { action: PresetAction::List } => {
            for (name, about) in PRESETS {
                println!("{name:<18} {about}");
            }
            Ok(())
        }
        Command::Preset { action: PresetAction::Show { name } } => {
            let cfg = preset(&name).ok_or_else(|| Error::Config(format!("unknown preset `{name}`")))?;
            println!("{}", serde_json::to_string_pretty(&cfg).unwrap());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e @ Error::Config(_)) => {
            error!("{e}");
            ExitCode::from(EXIT_CONFIG)
        }
        Err(e) => {
            error!("{e}");
            ExitCode::from(EXIT_STAGE)
        }
    }
}
