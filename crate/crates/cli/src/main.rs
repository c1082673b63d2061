use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Child, Command, ExitCode};

use clap::{Parser, Subcommand};
use iaqd_core::data::{self, GeneratorConfig, Protocol};
use iaqd_core::trainer::{self, ExperimentConfig, RunOptions};
use iaqd_core::types::Strategy;
use iaqd_core::Error;

mod report;
mod svg;

#[derive(Parser, Debug)]
#[command(name = "iaqd", version, about = "Incremental set-prediction detection lab")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Generate a synthetic glyph dataset directory.
    GenData {
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        scenes: usize,
        #[arg(long)]
        categories: usize,
        #[arg(long, default_value_t = 64)]
        image_size: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run a multi-phase experiment into a run directory.
    Train {
        /// Flat JSON config; flags override its values.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_parser = parse_protocol)]
        protocol: Option<Protocol>,
        #[arg(long, value_parser = parse_strategy)]
        strategy: Option<Strategy>,
        #[arg(long)]
        seed: Option<u64>,
        /// Comma-separated seeds; each runs as a child process into OUT/seed_<s>.
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
        /// Child runs executed at once with --seeds.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        #[arg(long)]
        skip_er: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Re-evaluate a phase snapshot of a run on its test set.
    Eval {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        phase: usize,
    },
    /// Recompute match churn, related queries and overall IoU for a run.
    Diagnose {
        #[arg(long)]
        run: PathBuf,
    },
    /// Compare runs: All/Old/New tables and plots.
    Report {
        #[arg(long, num_args = 1.., required = true)]
        runs: Vec<PathBuf>,
        #[arg(long, default_value = "report")]
        out: PathBuf,
    },
}

fn parse_protocol(s: &str) -> Result<Protocol, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_strategy(s: &str) -> Result<Strategy, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let line = serde_json::json!({ "error": e.kind(), "message": e.to_string() });
            eprintln!("{line}");
            ExitCode::from(1)
        }
    }
}

fn run(cmd: Cmd) -> iaqd_core::Result<()> {
    match cmd {
        Cmd::GenData {
            seed,
            scenes,
            categories,
            image_size,
            out,
        } => {
            let generator = GeneratorConfig {
                image_size,
                ..GeneratorConfig::default()
            };
            let set = data::generate_dataset_with(seed, scenes, categories, &generator)?;
            let manifest = data::write_dataset(&out, &set, seed, categories, &generator, None, None)?;
            println!("{}", serde_json::json!({ "scenes": manifest.num_scenes, "checksum": manifest.checksum }));
            Ok(())
        }
        Cmd::Train {
            config,
            protocol,
            strategy,
            seed,
            seeds,
            jobs,
            skip_er,
            out,
        } => {
            let mut cfg = match &config {
                Some(path) => serde_json::from_slice::<ExperimentConfig>(&fs::read(path)?)?,
                None => ExperimentConfig::default(),
            };
            if let Some(p) = protocol {
                cfg.protocol = p;
            }
            if let Some(s) = strategy {
                cfg.train.strategy = s;
            }
            if let Some(s) = seed {
                cfg.train.seed = s;
            }
            cfg.train.skip_er |= skip_er;
            cfg.validate()?;
            if seeds.is_empty() {
                train_one(&cfg, &out)
            } else {
                fan_out(&cfg, &seeds, jobs.max(1), &out)
            }
        }
        Cmd::Eval { run, phase } => {
            let (_, report) = trainer::evaluate_run_phase(&run, phase)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
            Ok(())
        }
        Cmd::Diagnose { run } => {
            let dir = run.join("diagnostics");
            fs::create_dir_all(&dir)?;
            for (t, d) in trainer::diagnose_run(&run)? {
                fs::write(dir.join(format!("phase_{t}.json")), serde_json::to_string_pretty(&d)? + "\n")?;
                fs::write(dir.join(format!("churn_phase_{t}.svg")), report::churn_svg(&d))?;
                println!(
                    "{}",
                    serde_json::json!({
                        "phase": t,
                        "churn_max": d.churn_max,
                        "related_total": d.related_totals,
                        "overall_iou": d.overall_iou.mean,
                    })
                );
            }
            Ok(())
        }
        Cmd::Report { runs, out } => {
            let table = report::write_report(&runs, &out)?;
            print!("{table}");
            Ok(())
        }
    }
}

fn train_one(cfg: &ExperimentConfig, out: &Path) -> iaqd_core::Result<()> {
    let summary = trainer::run_experiment(cfg, out, &RunOptions::default())?;
    for m in &summary.phases {
        println!(
            "{}",
            serde_json::json!({
                "phase": m.phase,
                "strategy": m.strategy,
                "ap_all": m.report.ap_all,
                "ap_old": m.report.ap_old,
                "ap_new": m.report.ap_new,
            })
        );
    }
    Ok(())
}

/// Runs one child process per seed, at most `jobs` at a time. Each child gets
/// the fully resolved config, so its run directory is self-describing.
fn fan_out(cfg: &ExperimentConfig, seeds: &[u64], jobs: usize, out: &Path) -> iaqd_core::Result<()> {
    fs::create_dir_all(out)?;
    let exe = std::env::current_exe()?;
    let mut pending: Vec<u64> = seeds.iter().rev().copied().collect();
    let mut running: Vec<(u64, Child)> = Vec::new();
    let mut failed = Vec::new();
    while !pending.is_empty() || !running.is_empty() {
        while running.len() < jobs {
            let Some(seed) = pending.pop() else { break };
            let mut child_cfg = cfg.clone();
            child_cfg.train.seed = seed;
            let cfg_path = out.join(format!("seed_{seed}.config.json"));
            fs::write(&cfg_path, serde_json::to_string_pretty(&child_cfg)? + "\n")?;
            let child = Command::new(&exe)
                .arg("train")
                .arg("--config")
                .arg(&cfg_path)
                .arg("--out")
                .arg(out.join(format!("seed_{seed}")))
                .spawn()?;
            running.push((seed, child));
        }
        let (seed, mut child) = running.remove(0);
        if !child.wait()?.success() {
            failed.push(seed);
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Error::Io(std::io::Error::other(format!("child runs failed for seeds {failed:?}"))))
    }
}
