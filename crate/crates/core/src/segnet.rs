//! Small fully convolutional encoder–decoder with U-Net skips. The encoder
//! bottleneck (stride 8, 64 channels, normalized over channels at every
//! position) is the hook point for adapters.

use thiserror::Error;

use crate::params::{he_uniform, Bound, ParamError, ParamSet};
use crate::rng::Stream;
use crate::scenegen::NUM_CLASSES;
use crate::tensor::{Tape, Tensor, TensorError, Var};

pub const WIDTHS: [usize; 3] = [16, 32, 64];
pub const BOTTLENECK_STRIDE: usize = 8;
pub const NORM_EPS: f32 = 1e-5;

#[derive(Debug, Error)]
pub enum SegNetError {
    #[error("input {h}x{w} is not divisible by {BOTTLENECK_STRIDE}")]
    InputSize { h: usize, w: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Param(#[from] ParamError),
}

/// `(name, [out, in, k, k])` for every conv layer.
pub fn layer_shapes() -> Vec<(&'static str, [usize; 4])> {
    let [a, b, c] = WIDTHS;
    vec![
        ("enc1", [a, 3, 3, 3]),
        ("enc2", [b, a, 3, 3]),
        ("enc3", [c, b, 3, 3]),
        ("dec1", [b, c + b, 3, 3]),
        ("dec2", [a, b + a, 3, 3]),
        ("head", [NUM_CLASSES, a + a, 1, 1]),
    ]
}

/// He-uniform weights and zero biases.
pub fn init(rng: &mut Stream) -> ParamSet {
    let mut p = ParamSet::new();
    for (name, shape) in layer_shapes() {
        let fan_in = shape[1] * shape[2] * shape[3];
        p.insert(format!("{name}.w"), he_uniform(&shape, fan_in, rng));
        p.insert(format!("{name}.b"), Tensor::zeros(&[shape[0]]));
    }
    p
}

pub fn is_encoder_param(name: &str) -> bool {
    name.starts_with("enc")
}

/// Encoder activations kept for the decoder skips.
#[derive(Clone, Copy, Debug)]
pub struct Encoded {
    pub full: Var,
    pub half: Var,
    pub quarter: Var,
    pub bottleneck: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct SegOutput {
    /// `[N,K,H,W]`
    pub logits: Var,
    /// `[N,64,H/8,W/8]`, before any hook.
    pub bottleneck: Var,
}

fn conv(tape: &mut Tape, p: &Bound, name: &str, x: Var, pad: usize) -> Result<Var, SegNetError> {
    let w = p.get(&format!("{name}.w"))?;
    let b = p.get(&format!("{name}.b"))?;
    Ok(tape.conv2d(x, w, Some(b), 1, pad)?)
}

/// Zero-mean, unit-variance over channels at each position of `[N,C,H,W]`,
/// without affine parameters.
pub fn channel_norm(tape: &mut Tape, x: Var, eps: f32) -> Result<Var, TensorError> {
    let s = tape.shape(x).to_vec();
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    let mut outs = Vec::with_capacity(n);
    for i in 0..n {
        let one = if n == 1 {
            x
        } else {
            tape.slice(x, &[i..i + 1, 0..c, 0..h, 0..w])?
        };
        let flat = tape.reshape(one, &[c, h * w])?;
        let rows = tape.transpose(flat)?;
        let normed = tape.layer_norm(rows, None, None, eps)?;
        let back = tape.transpose(normed)?;
        outs.push(tape.reshape(back, &[1, c, h, w])?);
    }
    if n == 1 {
        Ok(outs[0])
    } else {
        tape.concat(&outs, 0)
    }
}

pub fn encode(tape: &mut Tape, p: &Bound, x: Var) -> Result<Encoded, SegNetError> {
    let s = tape.shape(x);
    let (h, w) = (s[2], s[3]);
    if h % BOTTLENECK_STRIDE != 0 || w % BOTTLENECK_STRIDE != 0 {
        return Err(SegNetError::InputSize { h, w });
    }
    let c1 = conv(tape, p, "enc1", x, 1)?;
    let full = tape.gelu(c1);
    let half = tape.downsample_avg(full, 2)?;
    let c2 = conv(tape, p, "enc2", half, 1)?;
    let e2 = tape.gelu(c2);
    let quarter = tape.downsample_avg(e2, 2)?;
    let c3 = conv(tape, p, "enc3", quarter, 1)?;
    let e3 = tape.gelu(c3);
    let pooled = tape.downsample_avg(e3, 2)?;
    let bottleneck = channel_norm(tape, pooled, NORM_EPS)?;
    Ok(Encoded {
        full,
        half,
        quarter,
        bottleneck,
    })
}

pub fn decode(tape: &mut Tape, p: &Bound, enc: &Encoded, bottleneck: Var) -> Result<Var, SegNetError> {
    let u1 = tape.upsample_nearest(bottleneck, 2)?;
    let k1 = tape.concat(&[u1, enc.quarter], 1)?;
    let c1 = conv(tape, p, "dec1", k1, 1)?;
    let d1 = tape.gelu(c1);
    let u2 = tape.upsample_nearest(d1, 2)?;
    let k2 = tape.concat(&[u2, enc.half], 1)?;
    let c2 = conv(tape, p, "dec2", k2, 1)?;
    let d2 = tape.gelu(c2);
    let u3 = tape.upsample_nearest(d2, 2)?;
    let k3 = tape.concat(&[u3, enc.full], 1)?;
    conv(tape, p, "head", k3, 0)
}

/// Full forward. `hook`, when given, replaces the bottleneck before decoding.
pub fn forward<E: From<SegNetError>>(
    tape: &mut Tape,
    p: &Bound,
    x: Var,
    hook: Option<&mut dyn FnMut(&mut Tape, Var) -> Result<Var, E>>,
) -> Result<SegOutput, E> {
    let enc = encode(tape, p, x)?;
    let feat = match hook {
        Some(h) => h(tape, enc.bottleneck)?,
        None => enc.bottleneck,
    };
    let logits = decode(tape, p, &enc, feat)?;
    Ok(SegOutput {
        logits,
        bottleneck: enc.bottleneck,
    })
}

/// Per-pixel argmax over the class axis of `[N,K,H,W]` logits; ties go to
/// the lowest class id. Returns one `H×W` map per image.
pub fn predict(logits: &Tensor) -> Vec<Vec<u8>> {
    let s = logits.shape();
    let (n, k, hw) = (s[0], s[1], s[2] * s[3]);
    let d = logits.data();
    (0..n)
        .map(|ni| {
            (0..hw)
                .map(|p| {
                    let mut best = 0;
                    for c in 1..k {
                        if d[(ni * k + c) * hw + p] > d[(ni * k + best) * hw + p] {
                            best = c;
                        }
                    }
                    best as u8
                })
                .collect()
        })
        .collect()
}
