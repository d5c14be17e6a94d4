use serde::{Deserialize, Serialize};

use super::{class, Domain, ImageSample, LabelMap, Scene, SceneError};
use crate::imageio::quantize;
use crate::rng::Stream;
use crate::tensor::Tensor;

/// Layout of one synthetic street scene.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub seed: u64,
    pub size: usize,
    /// Horizon row as a fraction of the image height.
    pub horizon: f32,
    pub buildings: usize,
    pub obstacles: usize,
}

impl SceneSpec {
    /// Layout parameters drawn from `seed`.
    pub fn random(seed: u64, size: usize) -> Self {
        let mut s = Stream::new(seed, "scene-layout");
        Self {
            seed,
            size,
            horizon: s.uniform_range(0.38, 0.55),
            buildings: 1 + s.below(4),
            obstacles: 1 + s.below(3),
        }
    }

    pub fn validate(&self) -> Result<(), SceneError> {
        if self.size < 16 || self.size % 4 != 0 {
            return Err(SceneError::InvalidSpec(format!(
                "size {} must be >= 16 and divisible by 4",
                self.size
            )));
        }
        if !(0.0..=1.0).contains(&self.horizon) {
            return Err(SceneError::InvalidSpec(format!(
                "horizon {} outside [0,1]",
                self.horizon
            )));
        }
        Ok(())
    }
}

fn jitter(s: &mut Stream, base: [f32; 3], amount: f32) -> [f32; 3] {
    let shift = s.uniform_range(-amount, amount);
    base.map(|c| (c + shift + s.uniform_range(-amount, amount) * 0.5).clamp(0.0, 1.0))
}

/// Render a clean labeled scene. Deterministic in `spec`; pixels are
/// 8-bit quantized.
pub fn render_clean(spec: &SceneSpec) -> Result<ImageSample, SceneError> {
    spec.validate()?;
    let n = spec.size;
    let mut rng = Stream::new(spec.seed, "scene-render");
    let hz = ((spec.horizon * n as f32).round() as usize).min(n);
    let mut label = vec![class::SKY; n * n];

    // Ground: vegetation below the horizon, a perspective road on top.
    let center = n as f32 * rng.uniform_range(0.35, 0.65);
    let top_half = n as f32 * rng.uniform_range(0.03, 0.08);
    let bottom_half = n as f32 * rng.uniform_range(0.3, 0.5);
    let road_half = |y: usize| {
        let f = if n > hz { (y - hz) as f32 / (n - hz) as f32 } else { 0.0 };
        top_half + f * (bottom_half - top_half)
    };
    for y in hz..n {
        let half = road_half(y);
        for x in 0..n {
            let dx = (x as f32 + 0.5 - center).abs();
            label[y * n + x] = if dx <= half { class::ROAD } else { class::VEGETATION };
        }
    }

    // Buildings stand on the horizon and only ever cover sky.
    let mut windows = vec![false; n * n];
    for _ in 0..spec.buildings {
        if hz == 0 {
            break;
        }
        let bw = ((n as f32 * rng.uniform_range(0.1, 0.3)) as usize).max(2);
        let bh = ((hz as f32 * rng.uniform_range(0.3, 0.9)) as usize).max(1);
        let x0 = rng.below(n.saturating_sub(bw).max(1));
        for y in hz - bh..hz {
            for x in x0..(x0 + bw).min(n) {
                label[y * n + x] = class::BUILDING;
                windows[y * n + x] = (y % 4 == 1) && ((x - x0) % 4 == 1 || (x - x0) % 4 == 2);
            }
        }
    }

    // Obstacles sit on the road, scaled with depth.
    for _ in 0..spec.obstacles {
        if hz + 2 >= n {
            break;
        }
        let y1 = hz + 2 + rng.below(n - hz - 2);
        let f = (y1 - hz) as f32 / (n - hz) as f32;
        let size = (2.0 + f * n as f32 * 0.15).round() as usize;
        let half = road_half(y1);
        let x_c = center + rng.uniform_range(-0.7, 0.7) * half;
        let x0 = (x_c - size as f32 / 2.0).max(0.0) as usize;
        let y0 = y1.saturating_sub(size).max(hz);
        for y in y0..y1 {
            for x in x0..(x0 + size).min(n) {
                label[y * n + x] = class::OBSTACLE;
            }
        }
    }

    let sky = jitter(&mut rng, [0.55, 0.75, 0.95], 0.05);
    let road = jitter(&mut rng, [0.55, 0.55, 0.57], 0.05);
    let building = jitter(&mut rng, [0.72, 0.56, 0.45], 0.08);
    let vegetation = jitter(&mut rng, [0.35, 0.7, 0.3], 0.05);
    let obstacle = if rng.uniform() < 0.5 {
        jitter(&mut rng, [0.9, 0.2, 0.12], 0.05)
    } else {
        jitter(&mut rng, [0.95, 0.82, 0.15], 0.05)
    };

    let mut data = vec![0.0f32; 3 * n * n];
    for y in 0..n {
        for x in 0..n {
            let i = y * n + x;
            let mut rgb = match label[i] {
                class::SKY => {
                    let lift = 0.15 * (y as f32 / hz.max(1) as f32);
                    sky.map(|c| c + lift)
                }
                class::ROAD => road,
                class::BUILDING if windows[i] => building.map(|c| c * 0.45),
                class::BUILDING => building,
                class::VEGETATION => vegetation,
                _ => obstacle,
            };
            let tex = rng.uniform_range(-0.04, 0.04);
            for (c, v) in rgb.iter_mut().enumerate() {
                data[c * n * n + i] = (*v + tex).clamp(0.0, 1.0);
            }
        }
    }
    let mut image = Tensor::new(vec![3, n, n], data).expect("shape matches");
    quantize(&mut image);
    Ok(ImageSample {
        id: format!("scene-{}", spec.seed),
        image,
        label: Some(LabelMap {
            h: n,
            w: n,
            data: label,
        }),
        domain: Domain::Source,
        scene: Scene::Clean,
    })
}
