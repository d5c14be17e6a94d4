use serde::{Deserialize, Serialize};

use super::{ImageSample, Scene, SceneError};
use crate::imageio::quantize;
use crate::rng::Stream;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorruptionParams {
    pub kind: Scene,
    /// In `[0,1]`; zero is the identity.
    pub intensity: f32,
    pub seed: u64,
}

/// Apply a weather corruption. The label is carried through unchanged and
/// the output is 8-bit quantized. Pure in `(img, p)`.
pub fn corrupt(img: &ImageSample, p: &CorruptionParams) -> Result<ImageSample, SceneError> {
    if p.kind == Scene::Clean {
        return Err(SceneError::UnknownKind("clean".into()));
    }
    if !(0.0..=1.0).contains(&p.intensity) {
        return Err(SceneError::InvalidSpec(format!(
            "intensity {} outside [0,1]",
            p.intensity
        )));
    }
    if !img.in_unit_range() {
        return Err(SceneError::OutOfRange(img.id.clone()));
    }
    let mut out = img.clone();
    out.scene = p.kind;
    if p.intensity == 0.0 {
        return Ok(out);
    }
    let (h, w) = (img.height(), img.width());
    let plane = h * w;
    let a = p.intensity;
    let mut rng = Stream::new(p.seed, &format!("corruption/{}", p.kind.name()));
    let d = out.image.data_mut();
    match p.kind {
        Scene::Fog => {
            // Distant rows (top of frame) are foggier.
            for y in 0..h {
                let far = 1.0 - y as f32 / (h - 1).max(1) as f32;
                let blend = a * (0.3 + 0.5 * far);
                for c in 0..3 {
                    for v in &mut d[c * plane + y * w..c * plane + (y + 1) * w] {
                        *v += (1.0 - *v) * blend;
                    }
                }
            }
        }
        Scene::Rain => {
            let dim = 1.0 - 0.2 * a;
            d.iter_mut().for_each(|v| *v *= dim);
            let streaks = (a * h as f32 * 0.75).round() as usize;
            let len = ((h as f32 / 64.0) * 8.0).max(3.0) as usize;
            let alpha = 0.45 + 0.3 * a;
            for _ in 0..streaks {
                let (x0, y0) = (rng.below(w), rng.below(h));
                for k in 0..len {
                    let (y, x) = (y0 + k, x0 + k / 3);
                    if y >= h || x >= w {
                        break;
                    }
                    for (c, tint) in [0.85f32, 0.85, 0.9].iter().enumerate() {
                        let v = &mut d[c * plane + y * w + x];
                        *v += (tint - *v) * alpha;
                    }
                }
            }
        }
        Scene::Snow => {
            // One draw per pixel regardless of intensity, so the flake set
            // grows monotonically with intensity.
            let haze = 0.25 * a;
            for i in 0..plane {
                let flake = rng.uniform() < 0.12 * a;
                let blend = if flake { 0.9 } else { haze };
                for c in 0..3 {
                    let v = &mut d[c * plane + i];
                    *v += (1.0 - *v) * blend;
                }
            }
        }
        Scene::Night => {
            let gamma = 2.5 * a + 1.0;
            let sigma = 0.05 * a;
            for v in d.iter_mut() {
                *v = (v.powf(gamma) + sigma * rng.normal()).clamp(0.0, 1.0);
            }
        }
        Scene::Clean => unreachable!(),
    }
    d.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    quantize(&mut out.image);
    Ok(out)
}
