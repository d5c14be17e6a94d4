//! Naive f64 reference implementations used as test oracles. Written
//! independently of the library kernels: plain nested loops, no im2col, no
//! blocking.

#![allow(dead_code)]

pub mod grad;

use std::collections::HashMap;
use std::ops::Range;

use coda_core::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct R {
    pub shape: Vec<usize>,
    pub d: Vec<f64>,
}

pub fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

pub fn unravel(mut i: usize, shape: &[usize]) -> Vec<usize> {
    let mut idx = vec![0; shape.len()];
    for a in (0..shape.len()).rev() {
        idx[a] = i % shape[a];
        i /= shape[a];
    }
    idx
}

impl R {
    pub fn new(shape: &[usize], d: Vec<f64>) -> R {
        assert_eq!(shape.iter().product::<usize>(), d.len());
        R {
            shape: shape.to_vec(),
            d,
        }
    }
    pub fn zeros(shape: &[usize]) -> R {
        R::new(shape, vec![0.0; shape.iter().product()])
    }
    pub fn from_tensor(t: &Tensor) -> R {
        R::new(t.shape(), t.data().iter().map(|&v| v as f64).collect())
    }
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(self.shape.clone(), self.d.iter().map(|&v| v as f32).collect()).unwrap()
    }
    pub fn at(&self, idx: &[usize]) -> f64 {
        let s = strides(&self.shape);
        self.d[idx.iter().zip(&s).map(|(i, s)| i * s).sum::<usize>()]
    }
    pub fn map(&self, f: impl Fn(f64) -> f64) -> R {
        R::new(&self.shape, self.d.iter().map(|&v| f(v)).collect())
    }
}

fn bcast(a: &R, b: &R, f: impl Fn(f64, f64) -> f64) -> R {
    let rank = a.shape.len().max(b.shape.len());
    let pad = |s: &[usize]| {
        let mut v = vec![1; rank - s.len()];
        v.extend_from_slice(s);
        v
    };
    let (sa, sb) = (pad(&a.shape), pad(&b.shape));
    let out: Vec<usize> = (0..rank).map(|i| sa[i].max(sb[i])).collect();
    let n = out.iter().product();
    let get = |x: &R, sx: &[usize], idx: &[usize]| {
        let j: Vec<usize> = idx.iter().zip(sx).map(|(&i, &s)| if s == 1 { 0 } else { i }).collect();
        let st = strides(sx);
        x.d[j.iter().zip(&st).map(|(i, s)| i * s).sum::<usize>()]
    };
    let d = (0..n)
        .map(|i| {
            let idx = unravel(i, &out);
            f(get(a, &sa, &idx), get(b, &sb, &idx))
        })
        .collect();
    R::new(&out, d)
}

pub fn add(a: &R, b: &R) -> R {
    bcast(a, b, |x, y| x + y)
}
pub fn sub(a: &R, b: &R) -> R {
    bcast(a, b, |x, y| x - y)
}
pub fn mul(a: &R, b: &R) -> R {
    bcast(a, b, |x, y| x * y)
}
pub fn scale(a: &R, c: f64) -> R {
    a.map(|v| v * c)
}

pub fn matmul(a: &R, b: &R) -> R {
    let (m, k, n) = (a.shape[0], a.shape[1], b.shape[1]);
    assert_eq!(b.shape[0], k);
    let mut out = R::zeros(&[m, n]);
    for i in 0..m {
        for j in 0..n {
            let mut s = 0.0;
            for p in 0..k {
                s += a.d[i * k + p] * b.d[p * n + j];
            }
            out.d[i * n + j] = s;
        }
    }
    out
}

pub fn conv2d(x: &R, w: &R, b: Option<&R>, stride: usize, pad: usize) -> R {
    let (n, c, h, wd) = (x.shape[0], x.shape[1], x.shape[2], x.shape[3]);
    let (o, kh, kw) = (w.shape[0], w.shape[2], w.shape[3]);
    assert_eq!(w.shape[1], c);
    let ho = (h + 2 * pad - kh) / stride + 1;
    let wo = (wd + 2 * pad - kw) / stride + 1;
    let mut out = R::zeros(&[n, o, ho, wo]);
    for ni in 0..n {
        for oi in 0..o {
            for y in 0..ho {
                for xx in 0..wo {
                    let mut s = b.map_or(0.0, |b| b.d[oi]);
                    for ci in 0..c {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (y * stride + ky) as isize - pad as isize;
                                let ix = (xx * stride + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                let xi = ((ni * c + ci) * h + iy as usize) * wd + ix as usize;
                                s += x.d[xi] * w.d[((oi * c + ci) * kh + ky) * kw + kx];
                            }
                        }
                    }
                    out.d[((ni * o + oi) * ho + y) * wo + xx] = s;
                }
            }
        }
    }
    out
}

pub fn relu(x: &R) -> R {
    x.map(|v| v.max(0.0))
}

pub fn gelu(x: &R) -> R {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    x.map(|v| 0.5 * v * (1.0 + (c * (v + 0.044715 * v * v * v)).tanh()))
}

pub fn clamp(x: &R, lo: f64, hi: f64) -> R {
    x.map(|v| v.clamp(lo, hi))
}

fn along_axis(x: &R, axis: usize, f: impl Fn(&[f64]) -> Vec<f64>) -> R {
    let outer: usize = x.shape[..axis].iter().product();
    let len = x.shape[axis];
    let inner: usize = x.shape[axis + 1..].iter().product();
    let mut out = x.clone();
    for o in 0..outer {
        for i in 0..inner {
            let line: Vec<f64> = (0..len).map(|a| x.d[(o * len + a) * inner + i]).collect();
            for (a, v) in f(&line).into_iter().enumerate() {
                out.d[(o * len + a) * inner + i] = v;
            }
        }
    }
    out
}

pub fn softmax(x: &R, axis: usize) -> R {
    along_axis(x, axis, |l| {
        let m = l.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = l.iter().map(|v| (v - m).exp()).sum();
        l.iter().map(|v| (v - m).exp() / z).collect()
    })
}

pub fn log_softmax(x: &R, axis: usize) -> R {
    along_axis(x, axis, |l| {
        let m = l.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lz = l.iter().map(|v| (v - m).exp()).sum::<f64>().ln() + m;
        l.iter().map(|v| v - lz).collect()
    })
}

pub fn layer_norm(x: &R, g: Option<&R>, b: Option<&R>, eps: f64) -> R {
    let axis = x.shape.len() - 1;
    let n = x.shape[axis];
    along_axis(x, axis, |l| {
        let mean = l.iter().sum::<f64>() / n as f64;
        let var = l.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
        l.iter()
            .enumerate()
            .map(|(i, v)| {
                let y = (v - mean) / (var + eps).sqrt();
                y * g.map_or(1.0, |g| g.d[i]) + b.map_or(0.0, |b| b.d[i])
            })
            .collect()
    })
}

/// Normalize over axis 1 of NCHW, no affine.
pub fn channel_norm(x: &R, eps: f64) -> R {
    let c = x.shape[1] as f64;
    along_axis(x, 1, |l| {
        let mean = l.iter().sum::<f64>() / c;
        let var = l.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / c;
        l.iter().map(|v| (v - mean) / (var + eps).sqrt()).collect()
    })
}

pub fn sum(x: &R) -> R {
    R::new(&[1], vec![x.d.iter().sum()])
}

pub fn mean(x: &R) -> R {
    R::new(&[1], vec![x.d.iter().sum::<f64>() / x.d.len() as f64])
}

pub fn upsample(x: &R, f: usize) -> R {
    let (n, c, h, w) = (x.shape[0], x.shape[1], x.shape[2], x.shape[3]);
    let mut out = R::zeros(&[n, c, h * f, w * f]);
    for i in 0..out.d.len() {
        let idx = unravel(i, &out.shape);
        out.d[i] = x.at(&[idx[0], idx[1], idx[2] / f, idx[3] / f]);
    }
    out
}

pub fn downsample(x: &R, f: usize) -> R {
    let (n, c, h, w) = (x.shape[0], x.shape[1], x.shape[2], x.shape[3]);
    let mut out = R::zeros(&[n, c, h / f, w / f]);
    for i in 0..out.d.len() {
        let idx = unravel(i, &out.shape);
        let mut s = 0.0;
        for dy in 0..f {
            for dx in 0..f {
                s += x.at(&[idx[0], idx[1], idx[2] * f + dy, idx[3] * f + dx]);
            }
        }
        out.d[i] = s / (f * f) as f64;
    }
    out
}

pub fn concat(xs: &[&R], axis: usize) -> R {
    let mut shape = xs[0].shape.clone();
    shape[axis] = xs.iter().map(|x| x.shape[axis]).sum();
    let mut out = R::zeros(&shape);
    for i in 0..out.d.len() {
        let mut idx = unravel(i, &shape);
        let mut a = idx[axis];
        for x in xs {
            if a < x.shape[axis] {
                idx[axis] = a;
                out.d[i] = x.at(&idx);
                break;
            }
            a -= x.shape[axis];
        }
    }
    out
}

pub fn slice(x: &R, ranges: &[Range<usize>]) -> R {
    let shape: Vec<usize> = ranges.iter().map(|r| r.end - r.start).collect();
    let mut out = R::zeros(&shape);
    for i in 0..out.d.len() {
        let idx: Vec<usize> = unravel(i, &shape)
            .iter()
            .zip(ranges)
            .map(|(i, r)| i + r.start)
            .collect();
        out.d[i] = x.at(&idx);
    }
    out
}

pub fn place(x: &R, shape: &[usize], offset: &[usize]) -> R {
    let mut out = R::zeros(shape);
    let st = strides(shape);
    for i in 0..x.d.len() {
        let idx = unravel(i, &x.shape);
        let j: usize = idx.iter().zip(offset).zip(&st).map(|((a, o), s)| (a + o) * s).sum();
        out.d[j] = x.d[i];
    }
    out
}

pub fn reshape(x: &R, shape: &[usize]) -> R {
    R::new(shape, x.d.clone())
}

pub fn transpose(x: &R) -> R {
    let (r, c) = (x.shape[0], x.shape[1]);
    let mut out = R::zeros(&[c, r]);
    for i in 0..r {
        for j in 0..c {
            out.d[j * r + i] = x.d[i * c + j];
        }
    }
    out
}

pub fn attention(q: &R, k: &R, v: &R) -> R {
    let d = q.shape[1] as f64;
    let scores = scale(&matmul(q, &transpose(k)), 1.0 / d.sqrt());
    matmul(&softmax(&scores, 1), v)
}

pub fn pick_class(x: &R, labels: &[usize]) -> R {
    let (n, _, h, w) = (x.shape[0], x.shape[1], x.shape[2], x.shape[3]);
    let mut out = R::zeros(&[n, h, w]);
    for i in 0..out.d.len() {
        let idx = unravel(i, &out.shape);
        out.d[i] = x.at(&[idx[0], labels[i], idx[1], idx[2]]);
    }
    out
}

pub type P = HashMap<String, R>;

pub fn params(set: &coda_core::params::ParamSet) -> P {
    set.iter().map(|(n, t)| (n.to_string(), R::from_tensor(t))).collect()
}

fn conv_layer(p: &P, name: &str, x: &R, pad: usize) -> R {
    conv2d(x, &p[&format!("{name}.w")], Some(&p[&format!("{name}.b")]), 1, pad)
}

/// Segmentation network forward: `(logits, bottleneck before hook)`.
pub fn segnet(p: &P, x: &R, hook: Option<&dyn Fn(&R) -> R>) -> (R, R) {
    let full = gelu(&conv_layer(p, "enc1", x, 1));
    let half = downsample(&full, 2);
    let e2 = gelu(&conv_layer(p, "enc2", &half, 1));
    let quarter = downsample(&e2, 2);
    let e3 = gelu(&conv_layer(p, "enc3", &quarter, 1));
    let bneck = channel_norm(&downsample(&e3, 2), 1e-5);
    let feat = hook.map_or(bneck.clone(), |h| h(&bneck));
    let d1 = gelu(&conv_layer(p, "dec1", &concat(&[&upsample(&feat, 2), &quarter], 1), 1));
    let d2 = gelu(&conv_layer(p, "dec2", &concat(&[&upsample(&d1, 2), &half], 1), 1));
    let logits = conv_layer(p, "head", &concat(&[&upsample(&d2, 2), &full], 1), 0);
    (logits, bneck)
}

fn linear(p: &P, name: &str, x: &R) -> R {
    add(&matmul(x, &p[&format!("{name}.w")]), &p[&format!("{name}.b")])
}

/// Adapter, residual attention and layer norm on a `[1,C,H,W]` feature.
pub fn adapter(p: &P, feat: &R) -> R {
    let (c, h, w) = (feat.shape[1], feat.shape[2], feat.shape[3]);
    let tokens = transpose(&reshape(feat, &[c, h * w]));
    let a = add(&tokens, &linear(p, "up", &gelu(&linear(p, "down", &tokens))));
    let att = attention(&linear(p, "q", &a), &linear(p, "k", &a), &linear(p, "v", &a));
    let z = add(&a, &linear(p, "o", &att));
    let y = layer_norm(&z, Some(&p["ln.g"]), Some(&p["ln.b"]), 1e-5);
    reshape(&transpose(&y), &[1, c, h, w])
}

/// `clamp(x + Σ placed prompts, 0, 1)` on `[1,3,H,W]`.
pub fn prompts(p: &P, footprints: &[coda_core::savpt::Footprint], x: &R) -> R {
    let mut acc = x.clone();
    for f in footprints {
        let patch = reshape(&p[&f.name], &[1, 3, f.h, f.w]);
        acc = add(&acc, &place(&patch, &x.shape, &[0, 0, f.y, f.x]));
    }
    clamp(&acc, 0.0, 1.0)
}

/// Mean cross-entropy over `[N,K,H,W]` logits.
pub fn cross_entropy(logits: &R, labels: &[usize]) -> f64 {
    let picked = pick_class(&log_softmax(logits, 1), labels);
    -picked.d.iter().sum::<f64>() / picked.d.len() as f64
}

/// Max over elements of `|a − n| / max(|a|, |n|, floor)`.
pub fn max_rel_err(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(0.0, f64::max)
}
