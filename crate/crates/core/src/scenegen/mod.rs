//! Procedural benchmark: labeled clean scenes, weather corruptions, SSIM
//! candidate selection and the on-disk dataset.

mod corrupt;
mod dataset;
mod render;
mod ssim;

pub use corrupt::{corrupt, CorruptionParams};
pub use dataset::{
    build_dataset, generate_samples, load_manifest, load_sample, read_manifest, DatasetConfig, Manifest, ManifestEntry,
    EVAL_MANIFEST, TRAIN_MANIFEST,
};
pub use render::{render_clean, SceneSpec};
pub use ssim::{generate_intermediate, select_by_ssim, ssim, Intermediate};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::imageio::ImageIoError;
use crate::tensor::Tensor;

pub const NUM_CLASSES: usize = 5;
pub const CLASS_NAMES: [&str; NUM_CLASSES] = ["sky", "road", "building", "vegetation", "obstacle"];

pub mod class {
    pub const SKY: u8 = 0;
    pub const ROAD: u8 = 1;
    pub const BUILDING: u8 = 2;
    pub const VEGETATION: u8 = 3;
    pub const OBSTACLE: u8 = 4;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Source,
    M1,
    M2,
    Target,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scene {
    Clean,
    Fog,
    Rain,
    Snow,
    Night,
}

impl Scene {
    pub const ADVERSE: [Scene; 4] = [Scene::Fog, Scene::Rain, Scene::Snow, Scene::Night];

    pub fn name(self) -> &'static str {
        match self {
            Scene::Clean => "clean",
            Scene::Fog => "fog",
            Scene::Rain => "rain",
            Scene::Snow => "snow",
            Scene::Night => "night",
        }
    }
}

impl std::str::FromStr for Scene {
    type Err = SceneError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "clean" => Ok(Scene::Clean),
            "fog" => Ok(Scene::Fog),
            "rain" => Ok(Scene::Rain),
            "snow" => Ok(Scene::Snow),
            "night" => Ok(Scene::Night),
            other => Err(SceneError::UnknownKind(other.to_string())),
        }
    }
}

#[derive(Debug, Error)]
pub enum SceneError {
    #[error("invalid scene spec: {0}")]
    InvalidSpec(String),
    #[error("unknown corruption kind `{0}`")]
    UnknownKind(String),
    #[error("pixel values outside [0,1] in `{0}`")]
    OutOfRange(String),
    #[error("ssim: shape mismatch {0:?} vs {1:?}")]
    ShapeMismatch(Vec<usize>, Vec<usize>),
    #[error("n_candidates must be at least 1")]
    NoCandidates,
    #[error("intermediate generation expects a target-domain image, got {0:?}")]
    NotTarget(Domain),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error(transparent)]
    Image(#[from] ImageIoError),
    #[error("manifest {path} line {line}: {msg}")]
    Manifest { path: String, line: usize, msg: String },
    #[error("sample `{id}`: {msg}")]
    Sample { id: String, msg: String },
}

/// Per-pixel class ids, row-major `H×W`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    pub h: usize,
    pub w: usize,
    pub data: Vec<u8>,
}

/// One image flowing through the pipeline. `image` is `[3,H,W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageSample {
    pub id: String,
    pub image: Tensor,
    pub label: Option<LabelMap>,
    pub domain: Domain,
    pub scene: Scene,
}

impl ImageSample {
    pub fn height(&self) -> usize {
        self.image.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.image.shape()[2]
    }

    pub fn in_unit_range(&self) -> bool {
        self.image.data().iter().all(|v| (0.0..=1.0).contains(v))
    }

    /// Batch-of-one NCHW tensor.
    pub fn nchw(&self) -> Tensor {
        let s = self.image.shape();
        self.image.clone().reshaped(&[1, s[0], s[1], s[2]]).expect("same numel")
    }
}
