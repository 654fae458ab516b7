use std::io::{self, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use ssmixer::alloc::{tune_allocator, CountingAlloc};
use ssmixer::bench::{self, BenchOptions, Component};
use ssmixer::data::{self, TsSpec};
use ssmixer::experiment::{self, ExperimentConfig, Flow};
use ssmixer::verify::{self, Selection};
use ssmixer::{audit, HarnessError, Result};

#[global_allocator]
static ALLOC: CountingAlloc = CountingAlloc;

#[derive(Parser)]
#[command(name = "ssmixer", version, about = "Selective state-space mixer toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum DataKind {
    Ts,
    Img,
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    Tsm2Desk,
    Vim2Desk,
    Vim2Tiny,
}

#[derive(Subcommand)]
enum Command {
    /// Run numerical checks and print a CSV report; exits nonzero on any failure.
    Verify {
        /// scan | grad | reduce | count | causal | props | all
        #[arg(long, default_value = "all")]
        suite: Selection,
    },
    /// Write a synthetic dataset.
    GenData {
        #[arg(long, value_enum)]
        kind: DataKind,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Series: number of variates.
        #[arg(long, default_value_t = 7)]
        variates: usize,
        /// Series: number of timesteps.
        #[arg(long, default_value_t = 1600)]
        len: usize,
        /// Images: number of classes.
        #[arg(long, default_value_t = 3)]
        classes: usize,
        #[arg(long, default_value_t = 600)]
        train: usize,
        #[arg(long, default_value_t = 300)]
        val: usize,
    },
    /// Train from a JSON experiment config and write a run directory.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Overrides `out_dir` in the config.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate a checkpoint (next to its config.json) on a data directory.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Time a mixer over a doubling size ladder.
    Bench {
        #[arg(long)]
        component: Component,
        #[arg(long, default_value = "1024:65536")]
        sizes: String,
        #[arg(long, default_value_t = 5)]
        reps: usize,
    },
    /// Learnable-scalar breakdown of a model.
    Params {
        #[arg(long, conflicts_with = "preset")]
        config: Option<PathBuf>,
        #[arg(long, value_enum)]
        preset: Option<Preset>,
        /// Name segments to group by.
        #[arg(long, default_value_t = 2)]
        depth: usize,
    },
    /// Print a preset experiment config as JSON.
    Preset {
        #[arg(value_enum)]
        name: Preset,
    },
}

fn preset(p: Preset) -> ExperimentConfig {
    match p {
        Preset::Tsm2Desk => ExperimentConfig::tsm2_desk(),
        Preset::Vim2Desk => ExperimentConfig::vim2_desk(),
        Preset::Vim2Tiny => ExperimentConfig {
            model: experiment::ModelConfig::Vim2(ssmixer_core::vim2::Vim2Config::tiny()),
            ..ExperimentConfig::vim2_desk()
        },
    }
}

fn csv_out<T: serde::Serialize>(rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_writer(io::stdout().lock());
    for r in rows {
        w.serialize(r).map_err(|e| HarnessError::Invalid(e.to_string()))?;
    }
    w.flush().map_err(|e| HarnessError::Invalid(e.to_string()))
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Verify { suite } => {
            let results = verify::run(suite)?;
            verify::write_report(io::stdout().lock(), &results)?;
            Ok(results.iter().all(|r| r.passed()))
        }
        Command::GenData { kind, seed, out, variates, len, classes, train, val } => {
            match kind {
                DataKind::Ts => {
                    let spec = TsSpec { variates, len, ..TsSpec::default() };
                    data::write_series(&out, &data::gen_synthetic_ts(&spec, seed)?)?;
                }
                DataKind::Img => {
                    let mut rng = ssmixer_core::SplitMix64::new(seed);
                    let tr = data::gen_toy_images(classes, train, rng.next_u64())?;
                    let va = data::gen_toy_images(classes, val, rng.next_u64())?;
                    data::write_images(&out, &tr, &va)?;
                }
            }
            eprintln!("wrote {}", out.display());
            Ok(true)
        }
        Command::Train { config, out } => {
            let cfg = ExperimentConfig::load(&config)?;
            let dir = out
                .or_else(|| cfg.out_dir.clone())
                .ok_or_else(|| HarnessError::Invalid("no output directory: pass --out or set out_dir".into()))?;
            let trained = experiment::train(&cfg, |r| {
                eprintln!(
                    "epoch {:>4}  train {:.6}  val {:.6}  metric {:.4}  baseline {:.4}",
                    r.epoch, r.train_loss, r.val_loss, r.val_metric, r.baseline
                );
                Flow::Continue
            })?;
            experiment::write_run(&dir, &cfg, &trained)?;
            eprintln!("wrote {}", dir.display());
            Ok(true)
        }
        Command::Eval { ckpt, data } => {
            let mut out = io::stdout().lock();
            let io_err = |e: io::Error| HarnessError::Invalid(e.to_string());
            writeln!(out, "metric,value").map_err(io_err)?;
            for (name, v) in experiment::eval_checkpoint(&ckpt, &data)? {
                writeln!(out, "{name},{v}").map_err(io_err)?;
            }
            Ok(true)
        }
        Command::Bench { component, sizes, reps } => {
            let sizes = bench::parse_sizes(&sizes)?;
            let rows = bench::run(component, &sizes, &BenchOptions { reps, ..BenchOptions::default() })?;
            csv_out(&rows)?;
            Ok(true)
        }
        Command::Params { config, preset: p, depth } => {
            let model = match (config, p) {
                (Some(path), _) => ExperimentConfig::load(&path)?.model,
                (None, Some(p)) => preset(p).model,
                (None, None) => return Err(HarnessError::Invalid("pass --config or --preset".into())),
            };
            let (rows, total) = audit::audit(&model, depth)?;
            csv_out(&rows)?;
            eprintln!("total learnable scalars: {total}");
            Ok(true)
        }
        Command::Preset { name } => {
            let json = serde_json::to_string_pretty(&preset(name)).map_err(|e| HarnessError::Invalid(e.to_string()))?;
            println!("{json}");
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    tune_allocator();
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
