//! Windowed SSIM on BT.601 grayscale and the candidate selection that picks
//! the most structurally similar image.

use super::{corrupt, CorruptionParams, Domain, ImageSample, Scene, SceneError};
use crate::rng::Stream;
use crate::severity::grayscale;
use crate::tensor::Tensor;

const WINDOW: usize = 8;
const K1: f64 = 0.01;
const K2: f64 = 0.03;

fn gray_plane(t: &Tensor) -> Result<(Vec<f64>, usize, usize), SceneError> {
    let s = t.shape();
    match s.len() {
        3 if s[0] == 3 => Ok((grayscale(t).into_iter().map(f64::from).collect(), s[1], s[2])),
        3 if s[0] == 1 => Ok((t.data().iter().map(|&v| f64::from(v)).collect(), s[1], s[2])),
        2 => Ok((t.data().iter().map(|&v| f64::from(v)).collect(), s[0], s[1])),
        _ => Err(SceneError::ShapeMismatch(s.to_vec(), vec![3, 0, 0])),
    }
}

/// Mean SSIM over all 8×8 windows (stride 1), dynamic range 1.0.
/// Colour inputs `[3,H,W]` are converted to grayscale first.
pub fn ssim(a: &Tensor, b: &Tensor) -> Result<f64, SceneError> {
    if a.shape() != b.shape() {
        return Err(SceneError::ShapeMismatch(a.shape().to_vec(), b.shape().to_vec()));
    }
    let (ga, h, w) = gray_plane(a)?;
    let (gb, _, _) = gray_plane(b)?;
    let win = WINDOW.min(h).min(w);
    if win == 0 {
        return Err(SceneError::ShapeMismatch(a.shape().to_vec(), vec![WINDOW, WINDOW]));
    }
    let c1 = K1 * K1;
    let c2 = K2 * K2;
    let n = (win * win) as f64;
    let mut total = 0.0f64;
    let mut count = 0usize;
    for y0 in 0..=h - win {
        for x0 in 0..=w - win {
            let (mut sa, mut sb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for y in y0..y0 + win {
                for x in x0..x0 + win {
                    let (u, v) = (ga[y * w + x], gb[y * w + x]);
                    sa += u;
                    sb += v;
                    saa += u * u;
                    sbb += v * v;
                    sab += u * v;
                }
            }
            let (ma, mb) = (sa / n, sb / n);
            let va = saa / n - ma * ma;
            let vb = sbb / n - mb * mb;
            let cov = sab / n - ma * mb;
            let num = (2.0 * (ma * mb) + c1) * (2.0 * cov + c2);
            let den = (ma * ma + mb * mb + c1) * (va + vb + c2);
            total += num / den;
            count += 1;
        }
    }
    Ok((total / count as f64).clamp(-1.0, 1.0))
}

/// Index of the candidate with the highest SSIM against `reference`
/// (ties go to the lowest index) and every candidate's score.
pub fn select_by_ssim(reference: &Tensor, candidates: &[Tensor]) -> Result<(usize, Vec<f64>), SceneError> {
    if candidates.is_empty() {
        return Err(SceneError::NoCandidates);
    }
    let scores = candidates
        .iter()
        .map(|c| ssim(reference, c))
        .collect::<Result<Vec<_>, _>>()?;
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s > scores[best] {
            best = i;
        }
    }
    Ok((best, scores))
}

#[derive(Clone, Debug)]
pub struct Intermediate {
    pub sample: ImageSample,
    pub chosen: usize,
    pub intensities: Vec<f32>,
    pub scores: Vec<f64>,
}

/// Corrupt `img_t` at `n_candidates` low random intensities and keep the
/// candidate closest to it by SSIM, tagged as an M1 sample.
pub fn generate_intermediate(
    img_t: &ImageSample,
    kind: Scene,
    n_candidates: usize,
    stream: &mut Stream,
) -> Result<Intermediate, SceneError> {
    if n_candidates < 1 {
        return Err(SceneError::NoCandidates);
    }
    if img_t.domain != Domain::Target {
        return Err(SceneError::NotTarget(img_t.domain));
    }
    let mut intensities = Vec::with_capacity(n_candidates);
    let mut candidates = Vec::with_capacity(n_candidates);
    for _ in 0..n_candidates {
        let intensity = stream.uniform_range(0.1, 0.4);
        let seed = stream.next_u64();
        intensities.push(intensity);
        candidates.push(corrupt(img_t, &CorruptionParams { kind, intensity, seed })?);
    }
    let images: Vec<Tensor> = candidates.iter().map(|c| c.image.clone()).collect();
    let (chosen, scores) = select_by_ssim(&img_t.image, &images)?;
    let mut sample = candidates.swap_remove(chosen);
    sample.domain = Domain::M1;
    sample.id = format!("{}-gen", img_t.id);
    Ok(Intermediate {
        sample,
        chosen,
        intensities,
        scores,
    })
}
