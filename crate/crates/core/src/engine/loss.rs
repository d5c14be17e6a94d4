//! Loss terms and pseudo-labels.

use serde::{Deserialize, Serialize};

use crate::segnet::predict;
use crate::tensor::{Tape, Tensor, TensorError, Var};

/// Mean per-pixel `-log softmax(logits)[label]` over `[N,K,H,W]` logits.
pub fn cross_entropy(tape: &mut Tape, logits: Var, labels: &[usize]) -> Result<Var, TensorError> {
    let lsm = tape.log_softmax(logits, 1)?;
    let picked = tape.pick_class(lsm, labels)?;
    let m = tape.mean(picked);
    Ok(tape.scale(m, -1.0))
}

/// Supervised source term.
pub fn loss_source(tape: &mut Tape, logits: Var, labels: &[usize]) -> Result<Var, TensorError> {
    cross_entropy(tape, logits, labels)
}

/// Teacher labels for one target image and the confident-pixel fraction.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PseudoLabel {
    pub labels: Vec<u8>,
    pub q: f32,
}

impl PseudoLabel {
    pub fn labels_usize(&self) -> Vec<usize> {
        self.labels.iter().map(|&c| c as usize).collect()
    }
}

/// From teacher logits `[1,K,H,W]`: argmax labels and the fraction of
/// pixels whose max softmax probability is at least `p_thresh`.
pub fn pseudo_label(logits: &Tensor, p_thresh: f32) -> PseudoLabel {
    let s = logits.shape();
    let (k, hw) = (s[1], s[2] * s[3]);
    let d = logits.data();
    let mut confident = 0usize;
    for p in 0..hw {
        let max = (0..k).map(|c| d[c * hw + p]).fold(f32::NEG_INFINITY, f32::max);
        let z: f32 = (0..k).map(|c| (d[c * hw + p] - max).exp()).sum();
        if 1.0 / z >= p_thresh {
            confident += 1;
        }
    }
    PseudoLabel {
        labels: predict(logits).swap_remove(0),
        q: confident as f32 / hw as f32,
    }
}

/// `q · CE(logits, Ŷ)` for one image.
pub fn loss_target(tape: &mut Tape, logits: Var, pl: &PseudoLabel) -> Result<Var, TensorError> {
    let ce = cross_entropy(tape, logits, &pl.labels_usize())?;
    Ok(tape.scale(ce, pl.q))
}

/// Mean squared distance between student and frozen bottleneck features.
pub fn loss_fd(tape: &mut Tape, student: Var, frozen: Var) -> Result<Var, TensorError> {
    let d = tape.sub(student, frozen)?;
    let sq = tape.mul(d, d)?;
    Ok(tape.mean(sq))
}
