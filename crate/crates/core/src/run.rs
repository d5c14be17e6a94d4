//! Training runs on disk: data loading, the stepping loop, run directories,
//! ablations, the multi-seed range study and artifact verification.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::config::{ConfigError, EvalNet, RunConfig};
use crate::engine::checkpoint::{read_meta, CheckpointError};
use crate::engine::{load_checkpoint, save_checkpoint, EngineError, StepStats, TrainState};
use crate::eval::{evaluate, EvalError, EvalReport, SeedRangeReport, SeedResult, StrategyRow};
use crate::scenegen::{load_manifest, Domain, ImageSample, SceneError};
use crate::scenegen::{read_manifest, EVAL_MANIFEST, TRAIN_MANIFEST};
use crate::scheduler::{
    sample_source_batch, sample_target_batch, strategy_select, Pools, SchedulerError, Stage, StageBudgets, TraceEntry,
};

pub const CONFIG_FILE: &str = "config.json";
pub const HISTORY_FILE: &str = "history.jsonl";
pub const TRACE_FILE: &str = "trace.jsonl";
pub const CHECKPOINT_FILE: &str = "final.coda";
pub const REPORT_FILE: &str = "report.json";
pub const RUN_DIR_ENV: &str = "CODA_RUN_DIR";

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Scene(#[from] SceneError),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Scheduler(#[from] SchedulerError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("io {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("hash mismatch: {0}")]
    HashMismatch(String),
    #[error("{0}")]
    Other(String),
}

impl RunError {
    /// Short machine-readable category.
    pub fn kind(&self) -> &'static str {
        match self {
            RunError::Config(_) => "config",
            RunError::Scene(_) => "data",
            RunError::Engine(_) => "train",
            RunError::Checkpoint(_) => "checkpoint",
            RunError::Scheduler(_) => "scheduler",
            RunError::Eval(_) => "eval",
            RunError::Io { .. } => "io",
            RunError::HashMismatch(_) => "hash_mismatch",
            RunError::Other(_) => "other",
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> RunError + '_ {
    move |source| RunError::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<(), RunError> {
    fs::write(path, bytes).map_err(io_err(path))
}

pub fn sha256_file(path: &Path) -> Result<String, RunError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Training samples with their domain pools.
pub struct TrainData {
    pub samples: Vec<ImageSample>,
    pub pools: Pools,
}

impl TrainData {
    pub fn new(samples: Vec<ImageSample>) -> Self {
        let mut pools = Pools::default();
        for (i, s) in samples.iter().enumerate() {
            match s.domain {
                Domain::Source => pools.source.push(i),
                Domain::M1 => pools.m1.push(i),
                Domain::M2 => pools.m2.push(i),
                Domain::Target => pools.target.push(i),
            }
        }
        TrainData { samples, pools }
    }

    pub fn load(data_dir: &Path) -> Result<Self, RunError> {
        Ok(Self::new(load_manifest(&read_manifest(
            &data_dir.join(TRAIN_MANIFEST),
        )?)?))
    }
}

pub fn load_eval_data(data_dir: &Path) -> Result<Vec<ImageSample>, RunError> {
    Ok(load_manifest(&read_manifest(&data_dir.join(EVAL_MANIFEST))?)?)
}

/// One metric-history line. Contains no wall-clock data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistoryLine {
    pub t: u64,
    pub stage: Stage,
    pub l_s: f32,
    pub l_t: f32,
    pub l_fd: f32,
    pub total: f32,
    pub q: Vec<f32>,
    pub active: [bool; 2],
}

impl HistoryLine {
    fn new(stage: Stage, s: &StepStats) -> Self {
        HistoryLine {
            t: s.iter,
            stage,
            l_s: s.l_s,
            l_t: s.l_t,
            l_fd: s.l_fd,
            total: s.total,
            q: s.q.clone(),
            active: s.route.active,
        }
    }
}

pub struct StepRecord {
    pub history: HistoryLine,
    pub trace: TraceEntry,
}

pub struct Trainer<'a> {
    pub state: TrainState,
    pub budgets: StageBudgets,
    pub strategy: crate::scheduler::Strategy,
    data: &'a TrainData,
}

impl<'a> Trainer<'a> {
    pub fn new(cfg: &RunConfig, data: &'a TrainData) -> Result<Self, RunError> {
        cfg.validate()?;
        let mut state = TrainState::new(&cfg.model, cfg.train.clone(), cfg.seed)?;
        state.config_hash = cfg.hash();
        Ok(Self::resume(cfg, data, state))
    }

    pub fn resume(cfg: &RunConfig, data: &'a TrainData, state: TrainState) -> Self {
        Trainer {
            state,
            budgets: cfg.budgets,
            strategy: cfg.strategy,
            data,
        }
    }

    pub fn done(&self) -> bool {
        self.state.iter >= self.state.cfg.iters
    }

    pub fn step(&mut self) -> Result<StepRecord, RunError> {
        let t = self.state.iter;
        let stage = strategy_select(self.strategy, self.budgets)(t);
        let cfg = &self.state.cfg;
        let (nt, ns) = (cfg.target_batch, cfg.source_batch);
        let ti = sample_target_batch(stage, &self.data.pools, nt, &mut self.state.rng)?;
        let si = sample_source_batch(&self.data.pools, ns, &mut self.state.rng)?;
        let pick = |idx: &[usize]| idx.iter().map(|&i| self.data.samples[i].clone()).collect::<Vec<_>>();
        let (target, source) = (pick(&ti), pick(&si));
        let stats = self.state.train_step(&source, &target)?;
        Ok(StepRecord {
            history: HistoryLine::new(stage, &stats),
            trace: TraceEntry {
                t,
                stage,
                batch_ids: target.iter().chain(&source).map(|s| s.id.clone()).collect(),
            },
        })
    }
}

/// `<root>/<hash[..12]>-<unix seconds>`; `root` defaults to `CODA_RUN_DIR`
/// or `./runs`.
pub fn new_run_dir(root: Option<&Path>, hash: &str) -> Result<PathBuf, RunError> {
    let root = match root {
        Some(r) => r.to_path_buf(),
        None => std::env::var_os(RUN_DIR_ENV)
            .map(PathBuf::from)
            .unwrap_or_else(|| PathBuf::from("runs")),
    };
    let secs = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    let mut dir = root.join(format!("{}-{secs}", &hash[..12]));
    let mut n = 1;
    while dir.exists() {
        dir = root.join(format!("{}-{secs}-{n}", &hash[..12]));
        n += 1;
    }
    fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    Ok(dir)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunSummary {
    pub dir: PathBuf,
    pub config_hash: String,
    pub report: EvalReport,
    pub l_s: Vec<f32>,
}

fn jsonl<T: Serialize>(out: &mut impl Write, v: &T, path: &Path) -> Result<(), RunError> {
    serde_json::to_writer(&mut *out, v).map_err(|e| RunError::Other(e.to_string()))?;
    out.write_all(b"\n").map_err(io_err(path))
}

/// Train from scratch (or from `resume`) into `dir`, writing the config
/// snapshot, stage trace, metric history, checkpoints and the final report.
pub fn train_in_dir(
    cfg: &RunConfig,
    data: &TrainData,
    eval: &[ImageSample],
    dir: &Path,
    mut on_step: impl FnMut(&HistoryLine),
) -> Result<RunSummary, RunError> {
    let mut trainer = Trainer::new(cfg, data)?;
    write_file(&dir.join(CONFIG_FILE), cfg.to_json().as_bytes())?;
    let (hp, tp) = (dir.join(HISTORY_FILE), dir.join(TRACE_FILE));
    let mut history = std::io::BufWriter::new(fs::File::create(&hp).map_err(io_err(&hp))?);
    let mut trace = std::io::BufWriter::new(fs::File::create(&tp).map_err(io_err(&tp))?);
    let mut l_s = Vec::with_capacity(cfg.train.iters as usize);
    while !trainer.done() {
        let rec = trainer.step()?;
        jsonl(&mut history, &rec.history, &hp)?;
        jsonl(&mut trace, &rec.trace, &tp)?;
        l_s.push(rec.history.l_s);
        on_step(&rec.history);
        let t = trainer.state.iter;
        if cfg.checkpoint_every > 0 && t % cfg.checkpoint_every == 0 && t < cfg.train.iters {
            save_checkpoint(&trainer.state, &dir.join(format!("iter-{t:06}.coda")))?;
        }
    }
    history.flush().map_err(io_err(&hp))?;
    trace.flush().map_err(io_err(&tp))?;
    let ck = dir.join(CHECKPOINT_FILE);
    save_checkpoint(&trainer.state, &ck)?;
    let report = report_for(&trainer.state, &ck, eval, cfg.eval_net, true)?;
    write_file(
        &dir.join(REPORT_FILE),
        serde_json::to_string_pretty(&report).unwrap().as_bytes(),
    )?;
    Ok(RunSummary {
        dir: dir.to_path_buf(),
        config_hash: cfg.hash(),
        report,
        l_s,
    })
}

/// Evaluate a state that was saved at `ckpt`, stamping the report with
/// the config hash and checkpoint digest.
pub fn report_for(
    state: &TrainState,
    ckpt: &Path,
    eval: &[ImageSample],
    net: EvalNet,
    savpt: bool,
) -> Result<EvalReport, RunError> {
    let model = match net {
        EvalNet::Student => &state.student,
        EvalNet::Teacher => &state.teacher,
    };
    let mut report = evaluate(model, eval, savpt.then_some(&state.cfg.severity))?;
    report.config_hash = state.config_hash.clone();
    report.checkpoint_sha256 = sha256_file(ckpt)?;
    Ok(report)
}

pub fn evaluate_checkpoint(
    ckpt: &Path,
    eval: &[ImageSample],
    net: EvalNet,
    savpt: bool,
) -> Result<EvalReport, RunError> {
    let state = load_checkpoint(ckpt)?;
    report_for(&state, ckpt, eval, net, savpt)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AblationAxis {
    Tau,
    Placement,
    Init,
    CodIters,
}

impl std::str::FromStr for AblationAxis {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "tau" => Ok(AblationAxis::Tau),
            "placement" => Ok(AblationAxis::Placement),
            "init" => Ok(AblationAxis::Init),
            "cod-iters" => Ok(AblationAxis::CodIters),
            _ => Err(format!("unknown ablation axis `{s}`")),
        }
    }
}

/// Config variants for an ablation axis, labelled by their value.
pub fn ablation_variants(cfg: &RunConfig, axis: AblationAxis) -> Vec<(String, RunConfig)> {
    let a = &cfg.ablation;
    let with = |f: &dyn Fn(&mut RunConfig)| {
        let mut c = cfg.clone();
        f(&mut c);
        c
    };
    match axis {
        AblationAxis::Tau => a
            .taus
            .iter()
            .map(|&t| (format!("{t}"), with(&|c| c.train.severity.tau = t)))
            .collect(),
        AblationAxis::Placement => a
            .placements
            .iter()
            .map(|&p| {
                (
                    serde_json::to_value(p).unwrap().as_str().unwrap().to_string(),
                    with(&|c| c.model.prompt.placement = p),
                )
            })
            .collect(),
        AblationAxis::Init => a
            .inits
            .iter()
            .map(|&i| {
                (
                    serde_json::to_value(i).unwrap().as_str().unwrap().to_string(),
                    with(&|c| c.model.prompt.init = i),
                )
            })
            .collect(),
        AblationAxis::CodIters => a
            .cod_iters
            .iter()
            .map(|&(m1, m2)| {
                (
                    format!("{m1}/{m2}"),
                    with(&|c| {
                        c.budgets.m1_iters = m1;
                        c.budgets.m2_iters = m2;
                    }),
                )
            })
            .collect(),
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AblationEntry {
    pub value: String,
    pub config_hash: String,
    pub run_dir: Option<PathBuf>,
    pub report: Option<EvalReport>,
    pub error: Option<String>,
}

fn run_one(
    cfg: &RunConfig,
    data: &TrainData,
    eval: &[ImageSample],
    root: Option<&Path>,
) -> Result<RunSummary, RunError> {
    cfg.validate()?;
    let dir = new_run_dir(root, &cfg.hash())?;
    train_in_dir(cfg, data, eval, &dir, |_| {})
}

/// Independent runs, sequential or one thread each.
pub fn run_many(
    cfgs: &[RunConfig],
    data: &TrainData,
    eval: &[ImageSample],
    root: Option<&Path>,
    parallel: bool,
) -> Vec<Result<RunSummary, RunError>> {
    if !parallel {
        return cfgs.iter().map(|c| run_one(c, data, eval, root)).collect();
    }
    std::thread::scope(|s| {
        let handles: Vec<_> = cfgs
            .iter()
            .map(|c| s.spawn(move || run_one(c, data, eval, root)))
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().unwrap_or_else(|_| Err(RunError::Other("run panicked".into()))))
            .collect()
    })
}

pub fn ablate(
    cfg: &RunConfig,
    axis: AblationAxis,
    data: &TrainData,
    eval: &[ImageSample],
    root: Option<&Path>,
    parallel: bool,
) -> Vec<AblationEntry> {
    let variants = ablation_variants(cfg, axis);
    let cfgs: Vec<RunConfig> = variants.iter().map(|(_, c)| c.clone()).collect();
    variants
        .into_iter()
        .zip(run_many(&cfgs, data, eval, root, parallel))
        .map(|((value, c), r)| match r {
            Ok(s) => AblationEntry {
                value,
                config_hash: c.hash(),
                run_dir: Some(s.dir),
                report: Some(s.report),
                error: None,
            },
            Err(e) => AblationEntry {
                value,
                config_hash: c.hash(),
                run_dir: None,
                report: None,
                error: Some(e.to_string()),
            },
        })
        .collect()
}

/// Full training per (strategy, seed); failed runs are kept as markers.
pub fn seed_range_study(
    cfg: &RunConfig,
    data: &TrainData,
    eval: &[ImageSample],
    root: Option<&Path>,
    parallel: bool,
) -> Result<SeedRangeReport, RunError> {
    if cfg.range_seeds.len() < 2 {
        return Err(RunError::Config(ConfigError::Invalid(
            "range study needs at least two seeds".into(),
        )));
    }
    let mut cfgs = vec![];
    for &strategy in &cfg.range_strategies {
        for &seed in &cfg.range_seeds {
            cfgs.push(RunConfig {
                seed,
                strategy,
                ..cfg.clone()
            });
        }
    }
    let mut results = run_many(&cfgs, data, eval, root, parallel).into_iter();
    let rows = cfg
        .range_strategies
        .iter()
        .map(|s| {
            let runs = cfg
                .range_seeds
                .iter()
                .map(|&seed| match results.next().expect("one result per run") {
                    Ok(r) => SeedResult {
                        seed,
                        miou: Some(r.report.overall.miou),
                        error: None,
                    },
                    Err(e) => SeedResult {
                        seed,
                        miou: None,
                        error: Some(e.to_string()),
                    },
                })
                .collect();
            StrategyRow::new(s.name(), runs)
        })
        .collect();
    Ok(SeedRangeReport { rows })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Verified {
    pub config_hash: String,
    pub checkpoint_sha256: String,
}

/// Check the report → checkpoint → config chain inside a run directory.
pub fn verify(dir: &Path) -> Result<Verified, RunError> {
    let cfg = RunConfig::load(&dir.join(CONFIG_FILE))?;
    let rp = dir.join(REPORT_FILE);
    let text = fs::read_to_string(&rp).map_err(io_err(&rp))?;
    let report: EvalReport =
        serde_json::from_str(&text).map_err(|e| RunError::Other(format!("{}: {e}", rp.display())))?;
    let ck = dir.join(CHECKPOINT_FILE);
    let digest = sha256_file(&ck)?;
    if digest != report.checkpoint_sha256 {
        return Err(RunError::HashMismatch(format!(
            "report names checkpoint {} but {} hashes to {digest}",
            report.checkpoint_sha256,
            ck.display()
        )));
    }
    let meta = read_meta(&ck)?;
    let hash = cfg.hash();
    for (what, h) in [("checkpoint", &meta.config_hash), ("report", &report.config_hash)] {
        if *h != hash {
            return Err(RunError::HashMismatch(format!(
                "{what} config hash {h} != config.json hash {hash}"
            )));
        }
    }
    Ok(Verified {
        config_hash: hash,
        checkpoint_sha256: digest,
    })
}
