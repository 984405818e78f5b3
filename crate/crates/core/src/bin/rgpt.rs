use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use rgpt_core::data::read_instances_jsonl;
use rgpt_core::harness::gradsuite::{run_gradcheck, GradModule};
use rgpt_core::harness::sweep::{sweep, to_csv, to_json, SweepAxis};
use rgpt_core::harness::synthetic::generate_synthetic;
use rgpt_core::harness::train::{evaluate, prepare_all, prepare_data, MetricsReport};
use rgpt_core::harness::{run_experiment, ExperimentConfig};
use rgpt_core::memory::{build_memory, BankDims};
use rgpt_core::model::{load_params, save_params, Model};
use rgpt_core::{Error, Result};

/// Retrieval-augmented prompting for incomplete multimodal classification.
#[derive(Parser)]
#[command(name = "rgpt", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct ConfigArgs {
    /// Configuration file of key=value lines.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides applied after the file, as key=value.
    #[arg(value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(path) => ExperimentConfig::from_file(path)?,
            None => ExperimentConfig::default(),
        };
        cfg.apply_overrides(&self.overrides)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Build a memory bank file from complete instances.
    BuildMemory {
        /// `synthetic`, or a JSON-lines file of instances.
        #[arg(long, default_value = "synthetic")]
        data: String,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Train one configuration; writes params.bin, metrics.json and loss.csv.
    Train {
        #[arg(long, default_value = "out")]
        out_dir: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Evaluate saved parameters on the configuration's test split.
    Eval {
        #[arg(long)]
        params: PathBuf,
        #[arg(long, default_value = "out")]
        out_dir: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Train and evaluate once per value of one axis.
    Sweep {
        /// missing_rate, k or variant.
        #[arg(long)]
        axis: String,
        /// Comma-separated values.
        #[arg(long, value_delimiter = ',')]
        values: Vec<String>,
        #[arg(long, default_value = "out")]
        out_dir: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Finite-difference gradient checks on a small configuration.
    Gradcheck {
        /// all, generator, prompter, head or pipeline.
        #[arg(long, default_value = "all")]
        module: String,
        /// Maximum accepted relative error.
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
    },
}

fn write(path: &Path, contents: &str) -> Result<()> {
    std::fs::write(path, contents)?;
    Ok(())
}

fn write_report(dir: &Path, report: &MetricsReport) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let json = serde_json::to_string_pretty(report).map_err(|e| Error::Format {
        offset: 0,
        reason: e.to_string(),
    })?;
    write(&dir.join("metrics.json"), &(json + "\n"))?;
    let mut loss = String::from("epoch,loss\n");
    for (i, l) in report.loss_curve.iter().enumerate() {
        loss.push_str(&format!("{},{l}\n", i + 1));
    }
    write(&dir.join("loss.csv"), &loss)?;
    write(
        &dir.join("timing.json"),
        &format!("{{\"wall_clock_secs\": {:.3}}}\n", report.wall_clock_secs),
    )
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::BuildMemory { data, out, cfg } => {
            let cfg = cfg.load()?;
            let (model, _) = Model::new(cfg.model_config())?;
            let instances = if data == "synthetic" {
                let ds = generate_synthetic(&cfg.data, &cfg.model, cfg.seed)?;
                ds.train.into_iter().chain(ds.val).collect()
            } else {
                read_instances_jsonl(&std::fs::read_to_string(&data)?, cfg.model.n)?
            };
            let dims = BankDims {
                n: cfg.model.n,
                m: cfg.model.m,
                d: cfg.model.d,
                classes: cfg.model.classes,
            };
            let bank = build_memory(&model.encoders, &instances, dims)?;
            bank.save(&out)?;
            println!("wrote {} entries to {}", bank.len(), out.display());
        }
        Command::Train { out_dir, cfg } => {
            let cfg = cfg.load()?;
            let outcome = run_experiment(&cfg)?;
            write_report(&out_dir, &outcome.report)?;
            save_params(&outcome.store, out_dir.join("params.bin"))?;
            println!(
                "acc={:.4} auroc={} f1_micro={:.4} f1_sample={:.4}",
                outcome.report.accuracy,
                outcome.report.auroc.map_or("n/a".into(), |v| format!("{v:.4}")),
                outcome.report.f1_micro,
                outcome.report.f1_sample
            );
        }
        Command::Eval { params, out_dir, cfg } => {
            let cfg = cfg.load()?;
            let (model, mut store) = Model::new(cfg.model_config())?;
            load_params(&mut store, &params)?;
            let data = prepare_data(&cfg, &model)?;
            let test = prepare_all(&model, &data.bank, &data.test)?;
            let mut report = evaluate(&model, &store, &test)?;
            report.seed = cfg.seed;
            report.config = cfg.to_pairs();
            write_report(&out_dir, &report)?;
            println!("acc={:.4}", report.accuracy);
        }
        Command::Sweep {
            axis,
            values,
            out_dir,
            cfg,
        } => {
            let cfg = cfg.load()?;
            let axis: SweepAxis = axis.parse()?;
            let cells = sweep(&cfg, axis, &values)?;
            std::fs::create_dir_all(&out_dir)?;
            let csv = to_csv(&cells);
            write(&out_dir.join("sweep.csv"), &csv)?;
            write(&out_dir.join("sweep.json"), &(to_json(&cells) + "\n"))?;
            print!("{csv}");
            for c in cells.iter().filter(|c| c.error.is_some()) {
                eprintln!("cell {} failed: {}", c.axis_value, c.error.as_deref().unwrap_or(""));
            }
        }
        Command::Gradcheck { module, tolerance } => {
            let modules = GradModule::parse_list(&module)?;
            let cfg = rgpt_core::harness::gradsuite::gradcheck_config();
            let mut worst: f64 = 0.0;
            for (m, r) in run_gradcheck(&cfg, &modules)? {
                println!(
                    "{m:<10} coords={:<5} max_rel_err={:.3e} worst={}[{}]",
                    r.coordinates,
                    r.max_relative_error,
                    r.worst_param.as_deref().unwrap_or("-"),
                    r.worst_index
                );
                worst = worst.max(r.max_relative_error);
            }
            if worst >= tolerance {
                return Err(Error::Numerics(rgpt_core::numerics::NumericsError::Internal(format!(
                    "gradient check error {worst:.3e} exceeds {tolerance:.1e}"
                ))));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
