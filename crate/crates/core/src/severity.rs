//! Severity perception: an image is high-severity when the share of its
//! grayscale pixels darker than `sigma` exceeds `tau`.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scenegen::{load_sample, Manifest, SceneError};
use crate::tensor::Tensor;

/// ITU-R BT.601 luma weights.
pub const LUMA: [f64; 3] = [0.299, 0.587, 0.114];

#[derive(Debug, Error)]
pub enum SeverityError {
    #[error("sigma {0} outside [0,1]")]
    Sigma(f64),
    #[error("tau {0} outside [0,1]")]
    Tau(f64),
    #[error(transparent)]
    Scene(#[from] SceneError),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeverityConfig {
    pub sigma: f64,
    pub tau: f64,
}

impl Default for SeverityConfig {
    fn default() -> Self {
        Self { sigma: 0.5, tau: 0.38 }
    }
}

impl SeverityConfig {
    pub fn new(sigma: f64, tau: f64) -> Result<Self, SeverityError> {
        let c = Self { sigma, tau };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<(), SeverityError> {
        if !(0.0..=1.0).contains(&self.sigma) {
            return Err(SeverityError::Sigma(self.sigma));
        }
        if !(0.0..=1.0).contains(&self.tau) {
            return Err(SeverityError::Tau(self.tau));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SeverityClass {
    High,
    Low,
}

impl SeverityClass {
    pub fn index(self) -> usize {
        match self {
            SeverityClass::High => 0,
            SeverityClass::Low => 1,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            SeverityClass::High => "high",
            SeverityClass::Low => "low",
        }
    }
}

/// `[3,H,W]` RGB in `[0,1]` to an `H×W` luma map in `[0,1]`.
pub fn grayscale(img: &Tensor) -> Vec<f32> {
    let s = img.shape();
    let plane = s[1] * s[2];
    let d = img.data();
    (0..plane)
        .map(|i| {
            let y = LUMA[0] * d[i] as f64 + LUMA[1] * d[plane + i] as f64 + LUMA[2] * d[2 * plane + i] as f64;
            (y as f32).clamp(0.0, 1.0)
        })
        .collect()
}

/// Fraction of luma pixels strictly below `sigma`.
pub fn severe_ratio(gray: &[f32], sigma: f64) -> f64 {
    let severe = gray.iter().filter(|&&g| (g as f64) < sigma).count();
    severe as f64 / gray.len() as f64
}

pub fn classify(img: &Tensor, cfg: &SeverityConfig) -> SeverityClass {
    if severe_ratio(&grayscale(img), cfg.sigma) > cfg.tau {
        SeverityClass::High
    } else {
        SeverityClass::Low
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeverityCounts {
    pub high: usize,
    pub low: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeverityHistogram {
    pub sigma: f64,
    pub tau: f64,
    pub total: usize,
    pub scenes: BTreeMap<String, SeverityCounts>,
}

/// Classify every image listed in `manifest`, counting per scene tag.
pub fn severity_histogram(manifest: &Manifest, cfg: &SeverityConfig) -> Result<SeverityHistogram, SeverityError> {
    cfg.validate()?;
    let mut scenes: BTreeMap<String, SeverityCounts> = BTreeMap::new();
    for e in &manifest.entries {
        let x = load_sample(&manifest.root, e)?;
        let slot = scenes.entry(e.scene.name().to_string()).or_default();
        match classify(&x.image, cfg) {
            SeverityClass::High => slot.high += 1,
            SeverityClass::Low => slot.low += 1,
        }
    }
    Ok(SeverityHistogram {
        sigma: cfg.sigma,
        tau: cfg.tau,
        total: manifest.len(),
        scenes,
    })
}

/// Debug visualization: severe pixels purple, the rest green, as P6 bytes.
pub fn severity_map_ppm(img: &Tensor, sigma: f64) -> Vec<u8> {
    let s = img.shape();
    let (h, w) = (s[1], s[2]);
    let gray = grayscale(img);
    let mut vis = Tensor::zeros(&[3, h, w]);
    let d = vis.data_mut();
    for (i, &g) in gray.iter().enumerate() {
        let rgb = if (g as f64) < sigma {
            [0.55, 0.2, 0.7]
        } else {
            [0.3, 0.8, 0.35]
        };
        for c in 0..3 {
            d[c * h * w + i] = rgb[c];
        }
    }
    crate::imageio::encode_ppm(&vis)
}
