//! The adapted network: segmentation weights plus both severity branches.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::params::{Bound, ParamError, ParamSet};
use crate::rng::{labels, Stream};
use crate::savpt::{
    apply_adapter, apply_prompts_tape, AdapterConfig, AdapterParams, PromptBank, PromptConfig, SavptError, BRANCHES,
};
use crate::scenegen::{Domain, ImageSample};
use crate::segnet::{self, SegNetError};
use crate::severity::{classify, SeverityClass, SeverityConfig};
use crate::tensor::{Tape, Tensor, TensorError, Var};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    SegNet(#[from] SegNetError),
    #[error(transparent)]
    Savpt(#[from] SavptError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Param(#[from] ParamError),
    #[error("parameter `{name}` has shape {got:?}, expected {expected:?}")]
    Shape {
        name: String,
        got: Vec<usize>,
        expected: Vec<usize>,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub image_size: usize,
    pub prompt: PromptConfig,
    pub adapter: AdapterConfig,
}

impl ModelConfig {
    pub fn for_image(size: usize) -> Self {
        ModelConfig {
            image_size: size,
            prompt: PromptConfig::for_image(size),
            adapter: AdapterConfig::default(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Model {
    pub cfg: ModelConfig,
    pub segnet: ParamSet,
    pub prompts: PromptBank,
    pub adapters: AdapterParams,
}

/// Tape handles for one severity branch.
pub struct BoundBranch<'a> {
    pub prompts: Bound,
    pub adapter: Bound,
    pub footprints: &'a [crate::savpt::Footprint],
}

impl Model {
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self, ModelError> {
        let root = Stream::new(seed, labels::INIT);
        let segnet = segnet::init(&mut root.split("segnet"));
        let adapters = AdapterParams::new(cfg.adapter.clone(), &mut root.split("adapter"))?;
        let prompts = PromptBank::new(
            cfg.prompt.clone(),
            cfg.image_size,
            cfg.image_size,
            &mut root.split("prompt"),
            &mut Stream::new(seed, labels::PLACEMENT),
        )?;
        Ok(Model {
            cfg: cfg.clone(),
            segnet,
            prompts,
            adapters,
        })
    }

    /// Every tensor under its qualified name, in a fixed order. Does not
    /// touch the branch access counters.
    pub fn tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = self.segnet.iter().map(|(n, t)| (format!("segnet.{n}"), t)).collect();
        for b in BRANCHES {
            for (n, t) in self.prompts.branches_raw()[b.index()].iter() {
                out.push((format!("prompt.{}.{n}", b.name()), t));
            }
        }
        for b in BRANCHES {
            for (n, t) in self.adapters.branches_raw()[b.index()].iter() {
                out.push((format!("adapter.{}.{n}", b.name()), t));
            }
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out: Vec<(String, &mut Tensor)> = self
            .segnet
            .iter_mut()
            .map(|(n, t)| (format!("segnet.{n}"), t))
            .collect();
        let [ph, pl] = self.prompts.branches_raw_mut();
        for (b, set) in [(SeverityClass::High, ph), (SeverityClass::Low, pl)] {
            for (n, t) in set.iter_mut() {
                out.push((format!("prompt.{}.{n}", b.name()), t));
            }
        }
        let [ah, al] = self.adapters.branches_raw_mut();
        for (b, set) in [(SeverityClass::High, ah), (SeverityClass::Low, al)] {
            for (n, t) in set.iter_mut() {
                out.push((format!("adapter.{}.{n}", b.name()), t));
            }
        }
        out
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        let (group, rest) = name.split_once('.')?;
        if group == "segnet" {
            return self.segnet.get_mut(rest);
        }
        let (branch, local) = rest.split_once('.')?;
        let idx = match branch {
            "high" => 0,
            "low" => 1,
            _ => return None,
        };
        match group {
            "prompt" => self.prompts.branches_raw_mut()[idx].get_mut(local),
            "adapter" => self.adapters.branches_raw_mut()[idx].get_mut(local),
            _ => None,
        }
    }

    pub fn numel(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn bind_branch(&self, tape: &mut Tape, b: SeverityClass, requires_grad: bool) -> BoundBranch<'_> {
        BoundBranch {
            prompts: self.prompts.branch(b).bind(tape, requires_grad),
            adapter: self.adapters.branch(b).bind(tape, requires_grad),
            footprints: &self.prompts.footprints,
        }
    }

    /// Logits `[1,K,H,W]` for one image. With `savpt` set, target-side
    /// images go through their severity branch; otherwise (and for source
    /// images) the plain network runs and no branch parameter is read.
    pub fn logits(&self, img: &ImageSample, savpt: Option<&SeverityConfig>) -> Result<Tensor, ModelError> {
        let mut tape = Tape::frozen();
        let p = self.segnet.bind(&mut tape, false);
        let x = tape.constant(img.nchw());
        let out = match savpt {
            Some(sev) if img.domain != Domain::Source => {
                let branch = self.bind_branch(&mut tape, classify(&img.image, sev), false);
                forward_branch(&mut tape, &p, &branch, x)?.logits
            }
            _ => segnet::forward::<ModelError>(&mut tape, &p, x, None)?.logits,
        };
        Ok(tape.value(out).clone())
    }
}

/// Prompted input through the network with the branch adapter at the
/// bottleneck. `x` is a single `[1,3,H,W]` image.
pub fn forward_branch(
    tape: &mut Tape,
    p: &Bound,
    branch: &BoundBranch<'_>,
    x: Var,
) -> Result<segnet::SegOutput, ModelError> {
    let prompted = apply_prompts_tape(tape, x, &branch.prompts, branch.footprints)?;
    let mut hook = |t: &mut Tape, f: Var| -> Result<Var, ModelError> { Ok(apply_adapter(t, f, &branch.adapter)?) };
    segnet::forward(tape, p, prompted, Some(&mut hook))
}
