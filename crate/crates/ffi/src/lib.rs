//! C ABI over `coda-core`.
//!
//! Every handle is opaque and owned by the caller once returned; release it
//! with the matching `_free`. Every fallible call returns a [`CodaStatus`]
//! and, on failure, leaves a message readable through
//! [`coda_last_error_message`] on the same thread. Panics never cross the
//! boundary.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::sync::Arc;

use coda_core::config::RunConfig;
use coda_core::engine::{load_checkpoint, save_checkpoint, TrainState};
use coda_core::eval::evaluate;
use coda_core::model::Model;
use coda_core::run::{load_eval_data, RunError, TrainData, Trainer};
use coda_core::scenegen::{generate_samples, Domain, ImageSample, Scene};
use coda_core::scheduler::Stage;
use coda_core::segnet::predict;
use coda_core::severity::{classify, SeverityClass, SeverityConfig};
use coda_core::tensor::Tensor;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CodaStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Config = 4,
    Data = 5,
    Checkpoint = 6,
    Training = 7,
    Evaluation = 8,
    Panic = 9,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CodaStage {
    M1 = 0,
    M2 = 1,
    Mixed = 2,
}

/// Losses of one training step.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct CodaStepStats {
    /// Iteration index of the step just taken.
    pub iter: u64,
    /// A `CodaStage` value.
    pub stage: u32,
    pub l_s: f32,
    pub l_t: f32,
    pub l_fd: f32,
    pub total: f32,
}

/// Run configuration.
pub struct CodaConfig(RunConfig);

/// Training and evaluation samples.
pub struct CodaDataset(Arc<(TrainData, Vec<ImageSample>)>);

/// A training run in progress.
pub struct CodaTrainer {
    cfg: RunConfig,
    data: Arc<(TrainData, Vec<ImageSample>)>,
    state: Option<TrainState>,
}

/// Network weights plus the severity threshold used for routing.
pub struct CodaModel {
    model: Model,
    severity: SeverityConfig,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

struct Fail(CodaStatus, String);

impl From<RunError> for Fail {
    fn from(e: RunError) -> Self {
        let code = match e {
            RunError::Config(_) | RunError::Scheduler(_) => CodaStatus::Config,
            RunError::Scene(_) => CodaStatus::Data,
            RunError::Engine(_) => CodaStatus::Training,
            RunError::Checkpoint(_) | RunError::HashMismatch(_) => CodaStatus::Checkpoint,
            RunError::Eval(_) => CodaStatus::Evaluation,
            RunError::Io { .. } => CodaStatus::Io,
            RunError::Other(_) => CodaStatus::Training,
        };
        Fail(code, e.to_string())
    }
}

fn invalid(msg: impl Into<String>) -> Fail {
    Fail(CodaStatus::InvalidArgument, msg.into())
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> CodaStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => CodaStatus::Ok,
        Ok(Err(Fail(code, msg))) => {
            set_error(&msg);
            code
        }
        Err(_) => {
            set_error("panic inside coda");
            CodaStatus::Panic
        }
    }
}

unsafe fn get<'a, T>(p: *const T, what: &str) -> Result<&'a T, Fail> {
    p.as_ref()
        .ok_or_else(|| Fail(CodaStatus::NullPointer, format!("{what} is null")))
}

unsafe fn get_mut<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Fail> {
    p.as_mut()
        .ok_or_else(|| Fail(CodaStatus::NullPointer, format!("{what} is null")))
}

unsafe fn path_arg(p: *const c_char) -> Result<PathBuf, Fail> {
    if p.is_null() {
        return Err(Fail(CodaStatus::NullPointer, "path is null".into()));
    }
    let s = CStr::from_ptr(p).to_str().map_err(|_| invalid("path is not UTF-8"))?;
    Ok(PathBuf::from(s))
}

unsafe fn put<T>(out: *mut *mut T, v: T) -> Result<(), Fail> {
    if out.is_null() {
        return Err(Fail(CodaStatus::NullPointer, "out is null".into()));
    }
    *out = Box::into_raw(Box::new(v));
    Ok(())
}

unsafe fn free<T>(p: *mut T) {
    if !p.is_null() {
        drop(Box::from_raw(p));
    }
}

/// Message of the last failed call on this thread. Valid until the next
/// call into the library from this thread.
#[no_mangle]
pub extern "C" fn coda_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

#[no_mangle]
pub extern "C" fn coda_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

#[no_mangle]
pub unsafe extern "C" fn coda_config_default(out: *mut *mut CodaConfig) -> CodaStatus {
    guard(|| put(out, CodaConfig(RunConfig::default())))
}

/// Parse and validate a JSON run configuration.
#[no_mangle]
pub unsafe extern "C" fn coda_config_from_json(json: *const c_char, out: *mut *mut CodaConfig) -> CodaStatus {
    guard(|| {
        if json.is_null() {
            return Err(Fail(CodaStatus::NullPointer, "json is null".into()));
        }
        let text = CStr::from_ptr(json)
            .to_str()
            .map_err(|_| invalid("json is not UTF-8"))?;
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| Fail(CodaStatus::Config, e.to_string()))?;
        cfg.validate().map_err(|e| Fail(CodaStatus::Config, e.to_string()))?;
        put(out, CodaConfig(cfg))
    })
}

#[no_mangle]
pub unsafe extern "C" fn coda_config_load(path: *const c_char, out: *mut *mut CodaConfig) -> CodaStatus {
    guard(|| {
        let cfg = RunConfig::load(&path_arg(path)?).map_err(|e| Fail(CodaStatus::Config, e.to_string()))?;
        put(out, CodaConfig(cfg))
    })
}

/// Set the iteration count; stage budgets scale along.
#[no_mangle]
pub unsafe extern "C" fn coda_config_set_iters(cfg: *mut CodaConfig, iters: u64) -> CodaStatus {
    guard(|| {
        let c = get_mut(cfg, "cfg")?;
        if iters == 0 {
            return Err(invalid("iters must be positive"));
        }
        c.0 = c.0.with_iters(iters);
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn coda_config_set_seed(cfg: *mut CodaConfig, seed: u64) -> CodaStatus {
    guard(|| {
        get_mut(cfg, "cfg")?.0.seed = seed;
        Ok(())
    })
}

/// Write the 64-hex-digit config hash plus a NUL into `buf` (`len` ≥ 65).
#[no_mangle]
pub unsafe extern "C" fn coda_config_hash(cfg: *const CodaConfig, buf: *mut c_char, len: usize) -> CodaStatus {
    guard(|| {
        let h = get(cfg, "cfg")?.0.hash();
        if buf.is_null() {
            return Err(Fail(CodaStatus::NullPointer, "buf is null".into()));
        }
        if len < h.len() + 1 {
            return Err(invalid(format!("buffer of {len} bytes, need {}", h.len() + 1)));
        }
        let dst = std::slice::from_raw_parts_mut(buf.cast::<u8>(), h.len() + 1);
        dst[..h.len()].copy_from_slice(h.as_bytes());
        dst[h.len()] = 0;
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn coda_config_free(cfg: *mut CodaConfig) {
    free(cfg)
}

/// Generate the synthetic benchmark described by `cfg` in memory.
#[no_mangle]
pub unsafe extern "C" fn coda_dataset_generate(cfg: *const CodaConfig, out: *mut *mut CodaDataset) -> CodaStatus {
    guard(|| {
        let c = get(cfg, "cfg")?;
        let (train, eval) = generate_samples(&c.0.dataset).map_err(|e| Fail(CodaStatus::Data, e.to_string()))?;
        put(out, CodaDataset(Arc::new((TrainData::new(train), eval))))
    })
}

/// Load a dataset directory written by `coda gen-data`.
#[no_mangle]
pub unsafe extern "C" fn coda_dataset_load(dir: *const c_char, out: *mut *mut CodaDataset) -> CodaStatus {
    guard(|| {
        let dir = path_arg(dir)?;
        let train = TrainData::load(&dir)?;
        let eval = load_eval_data(&dir)?;
        put(out, CodaDataset(Arc::new((train, eval))))
    })
}

#[no_mangle]
pub unsafe extern "C" fn coda_dataset_sizes(ds: *const CodaDataset, train: *mut usize, eval: *mut usize) -> CodaStatus {
    guard(|| {
        let d = get(ds, "dataset")?;
        if train.is_null() || eval.is_null() {
            return Err(Fail(CodaStatus::NullPointer, "out is null".into()));
        }
        *train = d.0 .0.samples.len();
        *eval = d.0 .1.len();
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn coda_dataset_free(ds: *mut CodaDataset) {
    free(ds)
}

/// Start a run. The trainer keeps its own reference to the dataset.
#[no_mangle]
pub unsafe extern "C" fn coda_trainer_new(
    cfg: *const CodaConfig,
    ds: *const CodaDataset,
    out: *mut *mut CodaTrainer,
) -> CodaStatus {
    guard(|| {
        let (c, d) = (get(cfg, "cfg")?, get(ds, "dataset")?);
        let state = Trainer::new(&c.0, &d.0 .0)?.state;
        put(
            out,
            CodaTrainer {
                cfg: c.0.clone(),
                data: d.0.clone(),
                state: Some(state),
            },
        )
    })
}

/// Continue a run from a checkpoint saved with [`coda_trainer_save`].
#[no_mangle]
pub unsafe extern "C" fn coda_trainer_resume(
    cfg: *const CodaConfig,
    ds: *const CodaDataset,
    checkpoint: *const c_char,
    out: *mut *mut CodaTrainer,
) -> CodaStatus {
    guard(|| {
        let (c, d) = (get(cfg, "cfg")?, get(ds, "dataset")?);
        let state = load_checkpoint(&path_arg(checkpoint)?).map_err(RunError::from)?;
        if state.config_hash != c.0.hash() {
            return Err(Fail(
                CodaStatus::Checkpoint,
                "checkpoint was written under a different config".into(),
            ));
        }
        put(
            out,
            CodaTrainer {
                cfg: c.0.clone(),
                data: d.0.clone(),
                state: Some(state),
            },
        )
    })
}

#[no_mangle]
pub unsafe extern "C" fn coda_trainer_done(tr: *const CodaTrainer, done: *mut bool) -> CodaStatus {
    guard(|| {
        let t = get(tr, "trainer")?;
        let st = t
            .state
            .as_ref()
            .ok_or_else(|| Fail(CodaStatus::Training, "trainer is poisoned".into()))?;
        if done.is_null() {
            return Err(Fail(CodaStatus::NullPointer, "done is null".into()));
        }
        *done = st.iter >= st.cfg.iters;
        Ok(())
    })
}

/// One optimization step. `stats` may be null.
#[no_mangle]
pub unsafe extern "C" fn coda_trainer_step(tr: *mut CodaTrainer, stats: *mut CodaStepStats) -> CodaStatus {
    guard(|| {
        let t = get_mut(tr, "trainer")?;
        let state = t
            .state
            .take()
            .ok_or_else(|| Fail(CodaStatus::Training, "trainer is poisoned".into()))?;
        let mut trainer = Trainer::resume(&t.cfg, &t.data.0, state);
        if trainer.done() {
            t.state = Some(trainer.state);
            return Err(Fail(CodaStatus::Training, "run already complete".into()));
        }
        let rec = trainer.step();
        t.state = Some(trainer.state);
        let h = rec?.history;
        if let Some(s) = stats.as_mut() {
            *s = CodaStepStats {
                iter: h.t,
                stage: match h.stage {
                    Stage::M1 => CodaStage::M1,
                    Stage::M2 => CodaStage::M2,
                    Stage::Mixed => CodaStage::Mixed,
                } as u32,
                l_s: h.l_s,
                l_t: h.l_t,
                l_fd: h.l_fd,
                total: h.total,
            };
        }
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn coda_trainer_save(tr: *const CodaTrainer, path: *const c_char) -> CodaStatus {
    guard(|| {
        let t = get(tr, "trainer")?;
        let st = t
            .state
            .as_ref()
            .ok_or_else(|| Fail(CodaStatus::Training, "trainer is poisoned".into()))?;
        save_checkpoint(st, &path_arg(path)?).map_err(RunError::from)?;
        Ok(())
    })
}

/// Copy of the current teacher network.
#[no_mangle]
pub unsafe extern "C" fn coda_trainer_model(tr: *const CodaTrainer, out: *mut *mut CodaModel) -> CodaStatus {
    guard(|| {
        let t = get(tr, "trainer")?;
        let st = t
            .state
            .as_ref()
            .ok_or_else(|| Fail(CodaStatus::Training, "trainer is poisoned".into()))?;
        put(
            out,
            CodaModel {
                model: st.teacher.clone(),
                severity: st.cfg.severity,
            },
        )
    })
}

#[no_mangle]
pub unsafe extern "C" fn coda_trainer_free(tr: *mut CodaTrainer) {
    free(tr)
}

/// Teacher network of a checkpoint.
#[no_mangle]
pub unsafe extern "C" fn coda_model_load(checkpoint: *const c_char, out: *mut *mut CodaModel) -> CodaStatus {
    guard(|| {
        let st = load_checkpoint(&path_arg(checkpoint)?).map_err(RunError::from)?;
        put(
            out,
            CodaModel {
                model: st.teacher,
                severity: st.cfg.severity,
            },
        )
    })
}

unsafe fn rgb_arg(rgb: *const f32, h: usize, w: usize) -> Result<Tensor, Fail> {
    if rgb.is_null() {
        return Err(Fail(CodaStatus::NullPointer, "rgb is null".into()));
    }
    if h == 0 || w == 0 {
        return Err(invalid("empty image"));
    }
    let data = std::slice::from_raw_parts(rgb, 3 * h * w).to_vec();
    if data.iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(invalid("rgb values must lie in [0,1]"));
    }
    Tensor::new(vec![3, h, w], data).map_err(|e| invalid(e.to_string()))
}

/// Per-pixel class ids for a planar RGB image (`3*h*w` floats in `[0,1]`,
/// channel-major). `labels` receives `h*w` bytes. With `savpt` the image is
/// routed through its severity branch; without, the plain network runs.
#[no_mangle]
pub unsafe extern "C" fn coda_model_predict(
    m: *const CodaModel,
    rgb: *const f32,
    h: usize,
    w: usize,
    savpt: bool,
    labels: *mut u8,
) -> CodaStatus {
    guard(|| {
        let m = get(m, "model")?;
        let image = rgb_arg(rgb, h, w)?;
        let size = m.model.cfg.image_size;
        if h != size || w != size {
            return Err(invalid(format!("model expects {size}x{size}, got {h}x{w}")));
        }
        if labels.is_null() {
            return Err(Fail(CodaStatus::NullPointer, "labels is null".into()));
        }
        let img = ImageSample {
            id: String::new(),
            image,
            label: None,
            domain: Domain::Target,
            scene: Scene::Clean,
        };
        let logits = m
            .model
            .logits(&img, savpt.then_some(&m.severity))
            .map_err(|e| Fail(CodaStatus::Evaluation, e.to_string()))?;
        let pred = predict(&logits).swap_remove(0);
        std::slice::from_raw_parts_mut(labels, h * w).copy_from_slice(&pred);
        Ok(())
    })
}

/// Overall mIoU in `[0,1]` on the dataset's evaluation split.
#[no_mangle]
pub unsafe extern "C" fn coda_model_evaluate(
    m: *const CodaModel,
    ds: *const CodaDataset,
    savpt: bool,
    miou: *mut f64,
) -> CodaStatus {
    guard(|| {
        let (m, d) = (get(m, "model")?, get(ds, "dataset")?);
        if miou.is_null() {
            return Err(Fail(CodaStatus::NullPointer, "miou is null".into()));
        }
        let r = evaluate(&m.model, &d.0 .1, savpt.then_some(&m.severity)).map_err(RunError::from)?;
        *miou = r.overall.miou;
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn coda_model_free(m: *mut CodaModel) {
    free(m)
}

/// `*high` is true when the share of luma pixels below `sigma` exceeds `tau`.
#[no_mangle]
pub unsafe extern "C" fn coda_severity_classify(
    rgb: *const f32,
    h: usize,
    w: usize,
    sigma: f64,
    tau: f64,
    high: *mut bool,
) -> CodaStatus {
    guard(|| {
        let image = rgb_arg(rgb, h, w)?;
        let cfg = SeverityConfig::new(sigma, tau).map_err(|e| invalid(e.to_string()))?;
        if high.is_null() {
            return Err(Fail(CodaStatus::NullPointer, "high is null".into()));
        }
        *high = classify(&image, &cfg) == SeverityClass::High;
        Ok(())
    })
}
