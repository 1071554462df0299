//! `ldul`: command-line front end of the experiment runner.
//!
//! Every subcommand reads an optional TOML config; `--set key.path=value`
//! overrides any config key, and the dedicated flags are shorthands for the
//! most common ones. Exit codes: 0 success, 2 config error, 3 numeric
//! failure, 1 anything else.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use ldul::datasets::{read_points_csv, write_pgm, write_points_csv};
use ldul::lab::config::{self, ExperimentConfig, ExperimentKind};
use ldul::lab::plot::emit_plot;
use ldul::lab::report::read_csv;
use ldul::lab::{RunControl, Session};
use ldul::nets::DataKind;
use ldul::{Error, Result};

#[derive(Parser)]
#[command(name = "ldul", version, about = "Desk-scale unlearnable-sample laboratory")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct Common {
    /// Experiment config (TOML); defaults apply when omitted.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set unlearn.budget_255=8`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Comma-separated seeds.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    /// Output directory.
    #[arg(long, short)]
    output: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Train (or reuse) the denoiser and export the dataset.
    TrainDm(Common),
    /// Clean personalization of every identity, per seed.
    Personalize(Common),
    /// Craft unlearnable samples for every identity, per seed.
    Craft(Common),
    /// Apply the configured attack to a points CSV.
    Attack {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        input: PathBuf,
        #[arg(long = "to")]
        to: PathBuf,
    },
    /// Craft, personalize and score with the `main` pipeline.
    Eval(Common),
    /// Run a named experiment.
    Run {
        /// feasible-region | budget-ablation | steps-ablation | purify-sweep | main
        experiment: String,
        #[command(flatten)]
        common: Common,
        /// Stop after this many new units (resume by rerunning).
        #[arg(long)]
        stop_after: Option<usize>,
    },
    /// Render an SVG line chart from a metrics CSV.
    Plot {
        #[arg(long)]
        csv: PathBuf,
        #[arg(long, default_value = "sweep_value")]
        x: String,
        /// Comma-separated metric columns.
        #[arg(long, value_delimiter = ',', required = true)]
        y: Vec<String>,
        #[arg(long = "to")]
        to: PathBuf,
    },
}

fn load_config(common: &Common, experiment: Option<ExperimentKind>) -> Result<ExperimentConfig> {
    let text = match &common.config {
        Some(p) => std::fs::read_to_string(p)?,
        None => String::new(),
    };
    let mut overrides = Vec::new();
    if let Some(kind) = experiment {
        overrides.push(format!("experiment=\"{}\"", kind.name()));
    }
    overrides.extend(common.overrides.iter().cloned());
    if let Some(seeds) = &common.seeds {
        let list: Vec<String> = seeds.iter().map(u64::to_string).collect();
        overrides.push(format!("seeds=[{}]", list.join(",")));
    }
    if let Some(out) = &common.output {
        overrides.push(format!("output={}", toml::Value::String(out.display().to_string())));
    }
    let mut cfg = config::parse(&text, &overrides)?;
    if common.output.is_none() && common.config.is_none() {
        if let Some(kind) = experiment {
            cfg.output = ExperimentConfig::for_experiment(kind).output;
        }
    }
    Ok(cfg)
}

fn export_dataset(s: &Session) -> Result<()> {
    let dir = s.dir.join("dataset");
    std::fs::create_dir_all(&dir)?;
    match s.dataset.shape.kind {
        DataKind::Points => {
            write_points_csv(&dir.join("class_pool.csv"), &s.dataset.class_pool, Some(&s.dataset.class_labels))?;
            for id in &s.dataset.identities {
                write_points_csv(&dir.join(format!("{}.csv", id.id)), &id.samples, None)?;
                write_points_csv(&dir.join(format!("{}-reference.csv", id.id)), &id.reference, None)?;
            }
        }
        DataKind::Images => {
            let e = s.dataset.shape.extent;
            for id in &s.dataset.identities {
                for r in 0..id.samples.rows() {
                    write_pgm(&dir.join(format!("{}-{r}.pgm", id.id)), id.samples.row(r), e)?;
                }
            }
        }
    }
    Ok(())
}

fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::TrainDm(c) => {
            let s = Session::open(load_config(&c, None)?)?;
            export_dataset(&s)?;
            println!("{}", s.dir.join("dm.ckpt").display());
        }
        Command::Personalize(c) => {
            let s = Session::open(load_config(&c, None)?)?;
            for &seed in &s.cfg.seeds {
                let b = s.baseline(seed)?;
                for id in &s.dataset.identities {
                    let d = b.scorer.baseline(&id.id, seed).unwrap_or(f64::NAN);
                    println!("seed {seed} {}: baseline distance {d:.6}", id.id);
                }
            }
        }
        Command::Craft(c) => {
            let s = Session::open(load_config(&c, None)?)?;
            let u = &s.cfg.unlearn;
            for &seed in &s.cfg.seeds {
                let b = s.baseline(seed)?;
                let crafted = s.craft(seed, u.budget_255, u.k, &b, "main")?;
                println!(
                    "seed {seed}: feasible {} violation {:.3e} lambda {:.3}",
                    crafted.feasible, crafted.violation, crafted.lambda
                );
            }
            println!("samples in {}", s.dir.join("samples").display());
        }
        Command::Attack { common, input, to } => {
            let s = Session::open(load_config(&common, None)?)?;
            if s.dataset.shape.kind != DataKind::Points {
                return Err(Error::Mode {
                    expected: "points",
                    got: "images",
                });
            }
            let x = read_points_csv(&input)?;
            let seed = s.cfg.seeds[0];
            let y = s.cfg.attack.apply(&x, &s.model, &s.dm, &s.schedule, seed)?;
            write_points_csv(&to, &y, None)?;
            println!("{} -> {}", s.cfg.attack.describe(), to.display());
        }
        Command::Eval(c) => {
            let s = Session::open(load_config(&c, Some(ExperimentKind::Main))?)?;
            let out = s.run(&RunControl::default())?;
            print!("{}", String::from_utf8_lossy(&std::fs::read(&out.csv)?));
        }
        Command::Run {
            experiment,
            common,
            stop_after,
        } => {
            let kind = ExperimentKind::parse(&experiment)?;
            let s = Session::open(load_config(&common, Some(kind))?)?;
            let out = s.run(&RunControl { stop_after })?;
            println!("{} rows -> {}", out.records.len(), out.csv.display());
        }
        Command::Plot { csv, x, y, to } => {
            let rows = read_csv(&csv)?;
            let keys: Vec<&str> = y.iter().map(String::as_str).collect();
            emit_plot(&rows, &x, &keys, &to)?;
            println!("{}", to.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
