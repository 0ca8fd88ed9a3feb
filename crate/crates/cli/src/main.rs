use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use pccforge::config::RunConfig;
use pccforge::data::{read_cloud, write_cloud};
use pccforge::pipeline::{self, StageReport};
use pccforge::Error;

#[derive(Parser)]
#[command(name = "pccforge", version, about = "Two-stage point cloud completion")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML run configuration; missing keys take their defaults.
    #[arg(long, short, global = true)]
    config: Option<PathBuf>,
    /// Override a configuration key, e.g. `--set cref_epochs=2`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// More log output (-v info, -vv debug).
    #[arg(long, short, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic dataset and its manifest.
    Dataset,
    /// Train the diffusion coarse generator.
    TrainDcg {
        /// Continue from the saved checkpoint.
        #[arg(long)]
        resume: bool,
    },
    /// Train the refiner on cached or freshly generated coarse clouds.
    TrainCref {
        #[arg(long)]
        resume: bool,
    },
    /// Complete one partial cloud (.xyz, .txt or .ply).
    Complete {
        input: PathBuf,
        /// Output file; defaults to `<output_dir>/<stem>.completed.xyz`.
        #[arg(long, short)]
        output: Option<PathBuf>,
        /// Also write the coarse generator output next to the result.
        #[arg(long)]
        emit_coarse: bool,
        /// Also write the similarity heatmap CSV next to the result.
        #[arg(long)]
        heatmap: bool,
    },
    /// Score the test split and write per-sample and summary reports.
    Evaluate {
        /// Directory with `<sample id>.xyz|.ply` predictions to score instead
        /// of running the trained models.
        #[arg(long)]
        predictions: Option<PathBuf>,
    },
}

struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Config(_) => 1,
            _ => 2,
        };
        Failure { code, message: e.to_string() }
    }
}

fn load_config(common: &Common) -> Result<RunConfig, Failure> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::load(path).map_err(|e| match e {
            Error::Io { .. } => Failure { code: 1, message: e.to_string() },
            other => other.into(),
        })?,
        None => RunConfig::default(),
    };
    cfg.set_all(common.overrides.iter().map(String::as_str))?;
    Ok(cfg)
}

fn print_stage(name: &str, r: &StageReport) {
    println!(
        "{name}: steps {}..{}, final loss {:.6}, checkpoint {}, trace {}",
        r.first_step,
        r.last_step,
        r.final_loss,
        r.checkpoint.display(),
        r.trace_file.display()
    );
    for (step, cd) in &r.validation {
        println!("  validation {step}: cd {cd:.6}");
    }
}

fn sibling(output: &Path, suffix: &str) -> PathBuf {
    let stem = output.file_stem().and_then(|s| s.to_str()).unwrap_or("cloud");
    let stem = stem.strip_suffix(".completed").unwrap_or(stem);
    output.with_file_name(format!("{stem}.{suffix}"))
}

fn run(cli: Cli) -> Result<(), Failure> {
    let cfg = load_config(&cli.common)?;
    pipeline::write_effective_config(&cfg)?;
    log::info!("seed {}", cfg.seed);
    match cli.command {
        Command::Dataset => {
            let m = pipeline::run_dataset(&cfg)?;
            let test = m.records.iter().filter(|r| r.split == pccforge::data::Split::Test).count();
            println!(
                "wrote {} records ({} train, {test} test) to {}",
                m.records.len(),
                m.records.len() - test,
                cfg.dataset_dir.display()
            );
        }
        Command::TrainDcg { resume } => print_stage("train-dcg", &pipeline::run_train_dcg(&cfg, resume)?),
        Command::TrainCref { resume } => print_stage("train-cref", &pipeline::run_train_cref(&cfg, resume)?),
        Command::Complete { input, output, emit_coarse, heatmap } => {
            let partial = read_cloud(&input)?;
            let stem = input.file_stem().and_then(|s| s.to_str()).unwrap_or("cloud").to_string();
            let output = output.unwrap_or_else(|| cfg.output_dir.join(format!("{stem}.completed.xyz")));
            let c = pipeline::complete(&cfg, &partial, &stem)?;
            write_cloud(&output, &c.refined)?;
            println!("wrote {} points to {}", c.refined.len(), output.display());
            if emit_coarse {
                let path = sibling(&output, "coarse.xyz");
                write_cloud(&path, &c.coarse)?;
                println!("wrote coarse cloud to {}", path.display());
            }
            if heatmap {
                let path = sibling(&output, "heatmap.csv");
                std::fs::write(&path, pipeline::heatmap_csv(&c)?).map_err(|e| Failure {
                    code: 2,
                    message: format!("{}: {e}", path.display()),
                })?;
                println!("wrote similarity heatmap to {}", path.display());
            }
        }
        Command::Evaluate { predictions } => {
            let eval = pipeline::run_evaluate(&cfg, predictions.as_deref())?;
            println!("scored {} samples; reports in {}", eval.rows.len(), cfg.output_dir.display());
            if !eval.missing.is_empty() {
                return Err(Failure {
                    code: 2,
                    message: format!("missing files:\n  {}", eval.missing.join("\n  ")),
                });
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let level = match cli.common.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
