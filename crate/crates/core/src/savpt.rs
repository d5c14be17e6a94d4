//! Severity-aware visual prompts and feature adapters, kept as two
//! parameter branches (high / low severity) with identical starting values.

use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::params::{he_uniform, xavier_uniform, Bound, ParamError, ParamSet};
use crate::rng::Stream;
use crate::scenegen::{Domain, ImageSample};
use crate::severity::{classify, SeverityClass, SeverityConfig};
use crate::tensor::{Tape, Tensor, TensorError, Var};

pub const BRANCHES: [SeverityClass; 2] = [SeverityClass::High, SeverityClass::Low];
pub const LN_EPS: f32 = 1e-5;

#[derive(Debug, Error)]
pub enum SavptError {
    #[error("prompt patch {patch}px does not fit a {h}x{w} image ({reason})")]
    PatchFit {
        patch: usize,
        h: usize,
        w: usize,
        reason: &'static str,
    },
    #[error("prompts apply to target-side images only, got {0:?}")]
    Domain(Domain),
    #[error("adapter width {expected} does not match feature channels {got}")]
    Width { expected: usize, got: usize },
    #[error("adapter reduction {r} does not divide width {dim}")]
    Reduction { dim: usize, r: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Param(#[from] ParamError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Placement {
    #[default]
    CornerCenter,
    Padding,
    Random,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PromptInit {
    #[default]
    Zeros,
    Ones,
    Uniform01,
    Normal01,
}

impl std::str::FromStr for Placement {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        serde_json::from_value(serde_json::Value::String(s.to_string())).map_err(|_| format!("unknown placement `{s}`"))
    }
}

impl std::str::FromStr for PromptInit {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        serde_json::from_value(serde_json::Value::String(s.to_string())).map_err(|_| format!("unknown init `{s}`"))
    }
}

/// Counts reads of branch parameters. Cloning copies the current count.
#[derive(Debug, Default)]
pub struct AccessCounter(AtomicU64);

impl AccessCounter {
    pub fn get(&self) -> u64 {
        self.0.load(Ordering::Relaxed)
    }
    pub fn reset(&self) {
        self.0.store(0, Ordering::Relaxed)
    }
    fn hit(&self) {
        self.0.fetch_add(1, Ordering::Relaxed);
    }
}

impl Clone for AccessCounter {
    fn clone(&self) -> Self {
        AccessCounter(AtomicU64::new(self.get()))
    }
}

/// One prompt tensor and where its top-left corner lands.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Footprint {
    pub name: String,
    pub y: usize,
    pub x: usize,
    pub h: usize,
    pub w: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PromptConfig {
    pub placement: Placement,
    pub init: PromptInit,
    /// Patch side (or frame width under `padding`).
    pub patch: usize,
}

impl PromptConfig {
    pub fn for_image(size: usize) -> Self {
        PromptConfig {
            placement: Placement::CornerCenter,
            init: PromptInit::Zeros,
            patch: (size / 8).max(1),
        }
    }
}

/// Footprints for `placement` on an `h×w` image.
pub fn layout(cfg: &PromptConfig, h: usize, w: usize, rng: &mut Stream) -> Result<Vec<Footprint>, SavptError> {
    let p = cfg.patch;
    let fit = |reason| SavptError::PatchFit { patch: p, h, w, reason };
    if p == 0 {
        return Err(fit("zero size"));
    }
    if p > h || p > w {
        return Err(fit("patch larger than image"));
    }
    let fp = |i: usize, y, x, ph, pw| Footprint {
        name: format!("p{i}"),
        y,
        x,
        h: ph,
        w: pw,
    };
    Ok(match cfg.placement {
        Placement::CornerCenter => {
            if 3 * p > h || 3 * p > w {
                return Err(fit("corner and center patches would overlap"));
            }
            vec![
                fp(0, 0, 0, p, p),
                fp(1, 0, w - p, p, p),
                fp(2, h - p, 0, p, p),
                fp(3, h - p, w - p, p, p),
                fp(4, (h - p) / 2, (w - p) / 2, p, p),
            ]
        }
        Placement::Padding => {
            if 2 * p >= h || 2 * p >= w {
                return Err(fit("frame covers the whole image"));
            }
            vec![
                fp(0, 0, 0, p, w),
                fp(1, h - p, 0, p, w),
                fp(2, p, 0, h - 2 * p, p),
                fp(3, p, w - p, h - 2 * p, p),
            ]
        }
        Placement::Random => (0..5)
            .map(|i| fp(i, rng.below(h - p + 1), rng.below(w - p + 1), p, p))
            .collect(),
    })
}

fn init_tensor(init: PromptInit, shape: &[usize], rng: &mut Stream) -> Tensor {
    match init {
        PromptInit::Zeros => Tensor::zeros(shape),
        PromptInit::Ones => Tensor::full(shape, 1.0),
        PromptInit::Uniform01 => Tensor::from_fn(shape, |_| rng.uniform()),
        PromptInit::Normal01 => Tensor::from_fn(shape, |_| rng.normal()),
    }
}

/// Pixel prompts for both branches.
#[derive(Clone, Debug)]
pub struct PromptBank {
    pub cfg: PromptConfig,
    pub footprints: Vec<Footprint>,
    branches: [ParamSet; 2],
    reads: AccessCounter,
}

impl PromptBank {
    pub fn new(
        cfg: PromptConfig,
        h: usize,
        w: usize,
        init_rng: &mut Stream,
        placement_rng: &mut Stream,
    ) -> Result<Self, SavptError> {
        let footprints = layout(&cfg, h, w, placement_rng)?;
        let mut set = ParamSet::new();
        for f in &footprints {
            set.insert(f.name.clone(), init_tensor(cfg.init, &[3, f.h, f.w], init_rng));
        }
        Ok(PromptBank {
            cfg,
            footprints,
            branches: [set.clone(), set],
            reads: AccessCounter::default(),
        })
    }

    /// Read a branch for a forward pass; counted.
    pub fn branch(&self, b: SeverityClass) -> &ParamSet {
        self.reads.hit();
        &self.branches[b.index()]
    }

    pub fn reads(&self) -> &AccessCounter {
        &self.reads
    }

    /// Uncounted access for persistence and optimizer updates.
    pub fn branches_raw(&self) -> &[ParamSet; 2] {
        &self.branches
    }

    pub fn branches_raw_mut(&mut self) -> &mut [ParamSet; 2] {
        &mut self.branches
    }
}

fn check_domain(d: Domain) -> Result<(), SavptError> {
    match d {
        Domain::Source => Err(SavptError::Domain(d)),
        _ => Ok(()),
    }
}

/// `clamp(img + placed patches, 0, 1)` on a plain image. Pixels outside the
/// footprints are copied untouched.
pub fn apply_prompts(img: &ImageSample, branch: SeverityClass, bank: &PromptBank) -> Result<ImageSample, SavptError> {
    check_domain(img.domain)?;
    let (h, w) = (img.height(), img.width());
    let set = bank.branch(branch);
    let mut out = img.clone();
    let mut touched = vec![false; h * w];
    let data = out.image.data_mut();
    for f in &bank.footprints {
        if f.y + f.h > h || f.x + f.w > w {
            return Err(SavptError::PatchFit {
                patch: bank.cfg.patch,
                h,
                w,
                reason: "footprint outside image",
            });
        }
        let p = set.get(&f.name)?.data();
        for c in 0..3 {
            for y in 0..f.h {
                for x in 0..f.w {
                    let i = (c * h + f.y + y) * w + f.x + x;
                    data[i] += p[(c * f.h + y) * f.w + x];
                    touched[(f.y + y) * w + f.x + x] = true;
                }
            }
        }
    }
    for c in 0..3 {
        for (i, &t) in touched.iter().enumerate() {
            if t {
                let v = &mut data[c * h * w + i];
                *v = v.clamp(0.0, 1.0);
            }
        }
    }
    Ok(out)
}

/// Tape version of [`apply_prompts`] on a `[1,3,H,W]` image.
pub fn apply_prompts_tape(
    tape: &mut Tape,
    img: Var,
    prompts: &Bound,
    footprints: &[Footprint],
) -> Result<Var, SavptError> {
    let shape = tape.shape(img).to_vec();
    let (h, w) = (shape[2], shape[3]);
    let mut acc = img;
    for f in footprints {
        if f.y + f.h > h || f.x + f.w > w {
            return Err(SavptError::PatchFit {
                patch: f.h.max(f.w),
                h,
                w,
                reason: "footprint outside image",
            });
        }
        let p = prompts.get(&f.name)?;
        let p4 = tape.reshape(p, &[1, 3, f.h, f.w])?;
        let placed = tape.place(p4, &shape, &[0, 0, f.y, f.x])?;
        acc = tape.add(acc, placed)?;
    }
    Ok(tape.clamp(acc, 0.0, 1.0))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdapterConfig {
    pub dim: usize,
    pub reduction: usize,
}

impl Default for AdapterConfig {
    fn default() -> Self {
        AdapterConfig { dim: 64, reduction: 4 }
    }
}

/// Bottleneck adapter, single-head spatial attention and layer norm for
/// both branches.
#[derive(Clone, Debug)]
pub struct AdapterParams {
    pub cfg: AdapterConfig,
    branches: [ParamSet; 2],
    reads: AccessCounter,
}

impl AdapterParams {
    /// The up-projection and the attention output projection start at zero,
    /// so every residual path begins as the identity.
    pub fn new(cfg: AdapterConfig, rng: &mut Stream) -> Result<Self, SavptError> {
        let (d, r) = (cfg.dim, cfg.reduction);
        if r == 0 || d % r != 0 {
            return Err(SavptError::Reduction { dim: d, r });
        }
        let m = d / r;
        let mut p = ParamSet::new();
        p.insert("down.w", he_uniform(&[d, m], d, rng));
        p.insert("down.b", Tensor::zeros(&[m]));
        p.insert("up.w", Tensor::zeros(&[m, d]));
        p.insert("up.b", Tensor::zeros(&[d]));
        for n in ["q", "k", "v"] {
            p.insert(format!("{n}.w"), xavier_uniform(&[d, d], d, d, rng));
            p.insert(format!("{n}.b"), Tensor::zeros(&[d]));
        }
        p.insert("o.w", Tensor::zeros(&[d, d]));
        p.insert("o.b", Tensor::zeros(&[d]));
        p.insert("ln.g", Tensor::full(&[d], 1.0));
        p.insert("ln.b", Tensor::zeros(&[d]));
        Ok(AdapterParams {
            cfg,
            branches: [p.clone(), p],
            reads: AccessCounter::default(),
        })
    }

    pub fn branch(&self, b: SeverityClass) -> &ParamSet {
        self.reads.hit();
        &self.branches[b.index()]
    }

    pub fn reads(&self) -> &AccessCounter {
        &self.reads
    }

    pub fn branches_raw(&self) -> &[ParamSet; 2] {
        &self.branches
    }

    pub fn branches_raw_mut(&mut self) -> &mut [ParamSet; 2] {
        &mut self.branches
    }
}

fn linear(tape: &mut Tape, p: &Bound, name: &str, x: Var) -> Result<Var, SavptError> {
    let w = p.get(&format!("{name}.w"))?;
    let b = p.get(&format!("{name}.b"))?;
    let y = tape.matmul(x, w)?;
    Ok(tape.add(y, b)?)
}

/// `LN(Att(Adapter(F)))` on an `[N,C,H,W]` feature, applied per image over
/// its `H·W` spatial tokens.
pub fn apply_adapter(tape: &mut Tape, feat: Var, p: &Bound) -> Result<Var, SavptError> {
    let s = tape.shape(feat).to_vec();
    if s.len() != 4 {
        return Err(TensorError::InvalidShape {
            op: "apply_adapter",
            shape: s,
            reason: "expected NCHW".into(),
        }
        .into());
    }
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    let dim = tape.shape(p.get("ln.g")?)[0];
    if dim != c {
        return Err(SavptError::Width { expected: dim, got: c });
    }
    let mut outs = Vec::with_capacity(n);
    for i in 0..n {
        let one = if n == 1 {
            feat
        } else {
            tape.slice(feat, &[i..i + 1, 0..c, 0..h, 0..w])?
        };
        let flat = tape.reshape(one, &[c, h * w])?;
        let tokens = tape.transpose(flat)?;
        let down = linear(tape, p, "down", tokens)?;
        let act = tape.gelu(down);
        let up = linear(tape, p, "up", act)?;
        let a = tape.add(tokens, up)?;
        let q = linear(tape, p, "q", a)?;
        let k = linear(tape, p, "k", a)?;
        let v = linear(tape, p, "v", a)?;
        let att = tape.scaled_dot_attention(q, k, v)?;
        let o = linear(tape, p, "o", att)?;
        let z = tape.add(a, o)?;
        let (g, b) = (p.get("ln.g")?, p.get("ln.b")?);
        let y = tape.layer_norm(z, Some(g), Some(b), LN_EPS)?;
        let back = tape.transpose(y)?;
        outs.push(tape.reshape(back, &[1, c, h, w])?);
    }
    if n == 1 {
        Ok(outs[0])
    } else {
        Ok(tape.concat(&outs, 0)?)
    }
}

/// Severity assignment for a target-side batch.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BranchRoute {
    pub classes: Vec<SeverityClass>,
    /// Indexed by [`SeverityClass::index`]; a branch is trainable this step
    /// only if at least one image was routed to it.
    pub active: [bool; 2],
}

impl BranchRoute {
    pub fn is_active(&self, b: SeverityClass) -> bool {
        self.active[b.index()]
    }
}

pub fn route_and_freeze(batch: &[ImageSample], cfg: &SeverityConfig) -> BranchRoute {
    let classes: Vec<SeverityClass> = batch.iter().map(|s| classify(&s.image, cfg)).collect();
    let mut active = [false; 2];
    for c in &classes {
        active[c.index()] = true;
    }
    BranchRoute { classes, active }
}
