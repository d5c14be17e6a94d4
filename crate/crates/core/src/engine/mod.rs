//! Student/teacher self-training: EMA teacher, pseudo-labels, the three-term
//! objective and the optimizer step, plus checkpointing.

pub mod checkpoint;
pub mod loss;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointError};
pub use loss::{cross_entropy, loss_fd, loss_source, loss_target, pseudo_label, PseudoLabel};

use crate::model::{forward_branch, BoundBranch, Model, ModelConfig, ModelError};
use crate::params::ParamSet;
use crate::rng::{labels, Stream};
use crate::savpt::{route_and_freeze, BranchRoute, BRANCHES};
use crate::scenegen::ImageSample;
use crate::segnet::{self, is_encoder_param};
use crate::severity::SeverityConfig;
use crate::tensor::{AdamState, AdamW, OptimError, Tape, Tensor, TensorError, Var};

#[derive(Debug, Error)]
pub enum EngineError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Optim(#[from] OptimError),
    #[error("non-finite loss: L_S={l_s} L_T={l_t} L_FD={l_fd}")]
    NonFiniteLoss { l_s: f32, l_t: f32, l_fd: f32 },
    #[error("ema: {0}")]
    Ema(String),
    #[error("empty {0} batch")]
    EmptyBatch(&'static str),
    #[error("source sample `{0}` has no label")]
    MissingLabel(String),
    #[error("no parameter or optimizer state named `{0}`")]
    UnknownParam(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub iters: u64,
    pub source_batch: usize,
    pub target_batch: usize,
    /// Decoder, head, prompts and adapters.
    pub lr: f32,
    pub lr_encoder: f32,
    pub warmup_frac: f64,
    pub ema_alpha: f64,
    pub p_thresh: f32,
    pub lambda_fd: f32,
    pub optimizer: AdamW,
    pub severity: SeverityConfig,
    /// Train target images through the severity branches.
    pub savpt: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            iters: 2000,
            source_batch: 2,
            target_batch: 2,
            lr: 1e-2,
            lr_encoder: 1e-3,
            warmup_frac: 0.05,
            ema_alpha: 0.99,
            p_thresh: 0.968,
            lambda_fd: 0.005,
            optimizer: AdamW::default(),
            severity: SeverityConfig::default(),
            savpt: true,
        }
    }
}

impl TrainConfig {
    pub fn warmup_iters(&self) -> u64 {
        ((self.warmup_frac * self.iters as f64).ceil() as u64).max(1)
    }

    /// Linear warm-up, then constant.
    pub fn lr_at(&self, t: u64, encoder: bool) -> f32 {
        let base = if encoder { self.lr_encoder } else { self.lr };
        let f = ((t + 1) as f64 / self.warmup_iters() as f64).min(1.0);
        (base as f64 * f) as f32
    }
}

/// Everything needed to continue a run bit-exactly.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub cfg: TrainConfig,
    pub seed: u64,
    pub config_hash: String,
    pub student: Model,
    pub teacher: Model,
    /// Encoder weights at initialization, for the feature-distance term.
    pub frozen_encoder: ParamSet,
    pub moments: IndexMap<String, AdamState>,
    pub iter: u64,
    /// Batch sampling stream, owned by the loop.
    pub rng: Stream,
}

/// Gradients keyed by qualified parameter name; only parameters that took
/// part in the step appear.
pub type Grads = IndexMap<String, Tensor>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepStats {
    pub iter: u64,
    pub l_s: f32,
    pub l_t: f32,
    /// Unweighted; the objective uses `lambda_fd · l_fd`.
    pub l_fd: f32,
    pub total: f32,
    pub q: Vec<f32>,
    pub route: BranchRoute,
}

/// Layer-norm gains and shifts are exempt from weight decay.
/// Backbone-rate parameters: encoder convs plus the prompts and adapters
/// that sit on the encoder's input and bottleneck.
pub fn uses_encoder_lr(name: &str) -> bool {
    match name.split_once('.') {
        Some(("segnet", rest)) => is_encoder_param(rest),
        Some(("prompt" | "adapter", _)) => true,
        _ => false,
    }
}

pub fn is_norm_param(name: &str) -> bool {
    name.contains(".ln.")
}

pub fn ema_update(teacher: &mut Model, student: &Model, alpha: f64) -> Result<(), EngineError> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(EngineError::Ema(format!("alpha {alpha} outside [0,1]")));
    }
    let src = student.tensors();
    let mut dst = teacher.tensors_mut();
    if src.len() != dst.len() {
        return Err(EngineError::Ema(format!(
            "{} teacher tensors vs {} student",
            dst.len(),
            src.len()
        )));
    }
    for ((tn, t), (sn, s)) in dst.iter_mut().zip(&src) {
        if tn != sn || t.shape() != s.shape() {
            return Err(EngineError::Ema(format!(
                "`{tn}` {:?} vs `{sn}` {:?}",
                t.shape(),
                s.shape()
            )));
        }
        for (a, &b) in t.data_mut().iter_mut().zip(s.data()) {
            *a = (alpha * *a as f64 + (1.0 - alpha) * b as f64) as f32;
        }
    }
    Ok(())
}

/// `[N,3,H,W]` from a batch of same-sized images.
pub fn stack(batch: &[ImageSample]) -> Result<Tensor, TensorError> {
    let (h, w) = (batch[0].height(), batch[0].width());
    let mut data = Vec::with_capacity(batch.len() * 3 * h * w);
    for s in batch {
        if s.height() != h || s.width() != w {
            return Err(TensorError::ShapeMismatch {
                op: "stack",
                lhs: vec![3, h, w],
                rhs: s.image.shape().to_vec(),
            });
        }
        data.extend_from_slice(s.image.data());
    }
    Tensor::new(vec![batch.len(), 3, h, w], data)
}

fn source_labels(batch: &[ImageSample]) -> Result<Vec<usize>, EngineError> {
    let mut out = vec![];
    for s in batch {
        let l = s
            .label
            .as_ref()
            .ok_or_else(|| EngineError::MissingLabel(s.id.clone()))?;
        out.extend(l.data.iter().map(|&c| c as usize));
    }
    Ok(out)
}

impl TrainState {
    pub fn new(model_cfg: &ModelConfig, cfg: TrainConfig, seed: u64) -> Result<Self, EngineError> {
        let student = Model::init(model_cfg, seed)?;
        let mut frozen_encoder = ParamSet::new();
        for (n, t) in student.segnet.iter().filter(|(n, _)| is_encoder_param(n)) {
            frozen_encoder.insert(n, t.clone());
        }
        let moments = student
            .tensors()
            .into_iter()
            .map(|(n, t)| (n, AdamState::new(t.numel())))
            .collect();
        Ok(TrainState {
            cfg,
            seed,
            config_hash: String::new(),
            teacher: student.clone(),
            student,
            frozen_encoder,
            moments,
            iter: 0,
            rng: Stream::new(seed, labels::SAMPLING),
        })
    }

    fn savpt(&self) -> Option<&SeverityConfig> {
        self.cfg.savpt.then_some(&self.cfg.severity)
    }

    /// Teacher pseudo-labels on a frozen tape.
    pub fn pseudo_labels(&self, target: &[ImageSample]) -> Result<Vec<PseudoLabel>, EngineError> {
        target
            .iter()
            .map(|img| {
                Ok(pseudo_label(
                    &self.teacher.logits(img, self.savpt())?,
                    self.cfg.p_thresh,
                ))
            })
            .collect()
    }

    /// Forward and backward for one step without touching any parameter.
    pub fn compute_grads(
        &self,
        source: &[ImageSample],
        target: &[ImageSample],
    ) -> Result<(Grads, StepStats), EngineError> {
        if source.is_empty() {
            return Err(EngineError::EmptyBatch("source"));
        }
        if target.is_empty() {
            return Err(EngineError::EmptyBatch("target"));
        }
        let mut route = route_and_freeze(target, &self.cfg.severity);
        if !self.cfg.savpt {
            route.active = [false; 2];
        }
        let pls = self.pseudo_labels(target)?;

        let mut tape = Tape::new();
        let p = self.student.segnet.bind(&mut tape, true);
        let fz = self.frozen_encoder.bind(&mut tape, false);

        let xs = tape.constant(stack(source)?);
        let out_s = segnet::forward::<ModelError>(&mut tape, &p, xs, None)?;
        let l_s = loss_source(&mut tape, out_s.logits, &source_labels(source)?)?;
        let frozen = segnet::encode(&mut tape, &fz, xs).map_err(ModelError::from)?;
        let l_fd = loss_fd(&mut tape, out_s.bottleneck, frozen.bottleneck)?;

        let mut bound: [Option<BoundBranch<'_>>; 2] = [None, None];
        let mut l_t: Option<Var> = None;
        for (i, img) in target.iter().enumerate() {
            let x = tape.constant(img.nchw());
            let logits = if self.cfg.savpt {
                let b = route.classes[i];
                if bound[b.index()].is_none() {
                    bound[b.index()] = Some(self.student.bind_branch(&mut tape, b, true));
                }
                forward_branch(&mut tape, &p, bound[b.index()].as_ref().unwrap(), x)?.logits
            } else {
                segnet::forward::<ModelError>(&mut tape, &p, x, None)?.logits
            };
            let li = loss_target(&mut tape, logits, &pls[i])?;
            l_t = Some(match l_t {
                Some(acc) => tape.add(acc, li)?,
                None => li,
            });
        }
        let l_t = tape.scale(l_t.expect("non-empty target"), 1.0 / target.len() as f32);
        let fd_w = tape.scale(l_fd, self.cfg.lambda_fd);
        let st = tape.add(l_s, l_t)?;
        let total = tape.add(st, fd_w)?;

        let val = |v: Var| tape.value(v).item();
        let stats = StepStats {
            iter: self.iter,
            l_s: val(l_s),
            l_t: val(l_t),
            l_fd: val(l_fd),
            total: val(total),
            q: pls.iter().map(|pl| pl.q).collect(),
            route,
        };
        if !stats.total.is_finite() {
            return Err(EngineError::NonFiniteLoss {
                l_s: stats.l_s,
                l_t: stats.l_t,
                l_fd: stats.l_fd,
            });
        }
        tape.backward(total)?;

        let mut grads = Grads::new();
        for (n, v) in p.iter() {
            if let Some(g) = tape.grad(v) {
                grads.insert(format!("segnet.{n}"), g);
            }
        }
        for b in BRANCHES {
            if let Some(bb) = &bound[b.index()] {
                for (group, set) in [("prompt", &bb.prompts), ("adapter", &bb.adapter)] {
                    for (n, v) in set.iter() {
                        if let Some(g) = tape.grad(v) {
                            grads.insert(format!("{group}.{}.{n}", b.name()), g);
                        }
                    }
                }
            }
        }
        Ok((grads, stats))
    }

    /// One AdamW step on every parameter in `grads`, then the EMA update.
    pub fn apply_update(&mut self, grads: &Grads) -> Result<(), EngineError> {
        let t = self.iter;
        for (name, g) in grads {
            let lr = self.cfg.lr_at(t, uses_encoder_lr(name));
            let state = self
                .moments
                .get_mut(name)
                .ok_or_else(|| EngineError::UnknownParam(name.clone()))?;
            let param = self
                .student
                .get_mut(name)
                .ok_or_else(|| EngineError::UnknownParam(name.clone()))?;
            let opt = if is_norm_param(name) {
                AdamW {
                    weight_decay: 0.0,
                    ..self.cfg.optimizer
                }
            } else {
                self.cfg.optimizer
            };
            opt.step(name, param.data_mut(), g.data(), state, lr)?;
        }
        ema_update(&mut self.teacher, &self.student, self.cfg.ema_alpha)?;
        self.iter += 1;
        Ok(())
    }

    pub fn train_step(&mut self, source: &[ImageSample], target: &[ImageSample]) -> Result<StepStats, EngineError> {
        let (grads, stats) = self.compute_grads(source, target)?;
        self.apply_update(&grads)?;
        Ok(stats)
    }
}
