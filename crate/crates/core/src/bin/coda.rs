use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use coda_core::config::{EvalNet, RunConfig};
use coda_core::engine::checkpoint::read_meta;
use coda_core::run::{
    ablate, evaluate_checkpoint, load_eval_data, new_run_dir, seed_range_study, train_in_dir, verify, AblationAxis,
    RunError, TrainData,
};
use coda_core::scenegen::{build_dataset, read_manifest, TRAIN_MANIFEST};
use coda_core::severity::{severity_histogram, SeverityConfig};

#[derive(Parser)]
#[command(
    name = "coda",
    version,
    about = "Chain-of-domain adaptation with severity-aware prompts on a synthetic benchmark"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Render the synthetic benchmark.
    GenData {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output directory (default: the config's data_dir).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train one run.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Override the number of iterations; stage budgets scale along.
        #[arg(long)]
        iters: Option<u64>,
    },
    /// Evaluate a checkpoint on the held-out split.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value = "data")]
        data: PathBuf,
        #[arg(long)]
        no_savpt: bool,
        #[arg(long, value_parser = parse_net, default_value = "teacher")]
        net: EvalNet,
        /// Refuse checkpoints trained under a different config.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Severity class counts per scene for the training manifest.
    SeverityScan {
        #[arg(long, default_value = "data")]
        data: PathBuf,
        #[arg(long, default_value_t = 0.5)]
        sigma: f64,
        #[arg(long, default_value_t = 0.38)]
        tau: f64,
    },
    /// One run per value along an ablation axis.
    Ablate {
        axis: AblationAxis,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        parallel: bool,
    },
    /// Final mIoU range across seeds per strategy.
    RangeStudy {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        parallel: bool,
    },
    /// Check a run directory's report → checkpoint → config hashes.
    Verify { run_dir: PathBuf },
}

fn parse_net(s: &str) -> Result<EvalNet, String> {
    match s {
        "student" => Ok(EvalNet::Student),
        "teacher" => Ok(EvalNet::Teacher),
        _ => Err(format!("unknown net `{s}`")),
    }
}

fn load_config(path: Option<&Path>) -> Result<RunConfig, RunError> {
    match path {
        Some(p) => Ok(RunConfig::load(p)?),
        None => Ok(RunConfig::default()),
    }
}

fn print_json<T: serde::Serialize>(v: &T) {
    println!("{}", serde_json::to_string_pretty(v).expect("serializable"));
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let line = serde_json::json!({ "error": e.kind(), "message": e.to_string() });
            eprintln!("{line}");
            ExitCode::from(1)
        }
    }
}

fn dispatch(cmd: Cmd) -> Result<(), RunError> {
    match cmd {
        Cmd::GenData { config, out } => {
            let cfg = load_config(config.as_deref())?;
            let out = out.unwrap_or(cfg.data_dir.clone());
            let m = build_dataset(&cfg.dataset, &out)?;
            print_json(&serde_json::json!({ "data_dir": out, "train_samples": m.len() }));
        }
        Cmd::Train { config, data, iters } => {
            let mut cfg = load_config(config.as_deref())?;
            if let Some(n) = iters {
                cfg = cfg.with_iters(n);
            }
            cfg.validate()?;
            let data_dir = data.unwrap_or(cfg.data_dir.clone());
            let train = TrainData::load(&data_dir)?;
            let eval = load_eval_data(&data_dir)?;
            let dir = new_run_dir(None, &cfg.hash())?;
            eprintln!("run dir {}", dir.display());
            let total = cfg.train.iters;
            let s = train_in_dir(&cfg, &train, &eval, &dir, |h| {
                if (h.t + 1) % 100 == 0 || h.t + 1 == total {
                    eprintln!(
                        "iter {:>6}/{total} stage {:<5} L_S {:.4} L_T {:.4} L_FD {:.5}",
                        h.t + 1,
                        h.stage.name(),
                        h.l_s,
                        h.l_t,
                        h.l_fd
                    );
                }
            })?;
            print_json(&serde_json::json!({
                "run_dir": s.dir,
                "config_hash": s.config_hash,
                "miou": s.report.overall.miou,
            }));
        }
        Cmd::Eval {
            ckpt,
            data,
            no_savpt,
            net,
            config,
        } => {
            if let Some(p) = config {
                let want = RunConfig::load(&p)?.hash();
                let got = read_meta(&ckpt)?.config_hash;
                if want != got {
                    return Err(RunError::HashMismatch(format!(
                        "checkpoint config hash {got} != {want}"
                    )));
                }
            }
            let eval = load_eval_data(&data)?;
            print_json(&evaluate_checkpoint(&ckpt, &eval, net, !no_savpt)?);
        }
        Cmd::SeverityScan { data, sigma, tau } => {
            let sev = SeverityConfig::new(sigma, tau).map_err(|e| RunError::Other(e.to_string()))?;
            let m = read_manifest(&data.join(TRAIN_MANIFEST))?;
            print_json(&severity_histogram(&m, &sev).map_err(|e| RunError::Other(e.to_string()))?);
        }
        Cmd::Ablate {
            axis,
            config,
            data,
            parallel,
        } => {
            let cfg = load_config(config.as_deref())?;
            let data_dir = data.unwrap_or(cfg.data_dir.clone());
            let train = TrainData::load(&data_dir)?;
            let eval = load_eval_data(&data_dir)?;
            print_json(&ablate(&cfg, axis, &train, &eval, None, parallel));
        }
        Cmd::RangeStudy { config, data, parallel } => {
            let cfg = load_config(config.as_deref())?;
            let data_dir = data.unwrap_or(cfg.data_dir.clone());
            let train = TrainData::load(&data_dir)?;
            let eval = load_eval_data(&data_dir)?;
            print_json(&seed_range_study(&cfg, &train, &eval, None, parallel)?);
        }
        Cmd::Verify { run_dir } => print_json(&verify(&run_dir)?),
    }
    Ok(())
}
