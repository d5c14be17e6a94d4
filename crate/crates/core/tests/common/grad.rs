//! Finite-difference harness: central differences on the f64 reference
//! against the tape's f32 analytic gradients.

use super::R;
use coda_core::model::{forward_branch, Model, ModelConfig};
use coda_core::rng::Stream;
use coda_core::savpt::{PromptConfig, PromptInit};
use coda_core::severity::SeverityClass;
use coda_core::tensor::{Tape, Tensor, Var};

pub const SEEDS: u64 = 20;
pub const H: f64 = 1e-3;
pub const TOL: f64 = 1e-3;
// Below this magnitude errors are compared absolutely. The attention key
// bias gradient is identically zero; the f32 tape leaves up to ~1e-7 of
// round-off there.
pub const FLOOR: f64 = 1e-4;

fn rand_t(shape: &[usize], lo: f32, hi: f32, rng: &mut Stream) -> Tensor {
    Tensor::from_fn(shape, |_| rng.uniform_range(lo, hi))
}

/// Values in `±[gap, 1]`, away from the kink at zero.
fn away_from_zero(shape: &[usize], gap: f32, rng: &mut Stream) -> Tensor {
    Tensor::from_fn(shape, |_| {
        let m = rng.uniform_range(gap, 1.0);
        if rng.uniform() < 0.5 {
            -m
        } else {
            m
        }
    })
}

/// Analytic gradient of `Σ r ⊙ f(x)` w.r.t. every input, then compare with
/// central differences of the reference at `elems` sampled positions per
/// input (all positions when `None`). Returns the worst relative error.
fn check(
    inputs: &[Tensor],
    elems: Option<usize>,
    rng: &mut Stream,
    f_tape: &dyn Fn(&mut Tape, &[Var]) -> Var,
    f_ref: &dyn Fn(&[R]) -> R,
) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = f_tape(&mut tape, &vars);
    let r = rand_t(tape.shape(out), -1.0, 1.0, rng);
    let rv = tape.constant(r.clone());
    let prod = tape.mul(out, rv).unwrap();
    let loss = tape.sum(prod);
    tape.backward(loss).unwrap();

    let rr = R::from_tensor(&r);
    let refs: Vec<R> = inputs.iter().map(R::from_tensor).collect();
    let eval = |xs: &[R]| -> f64 { f_ref(xs).d.iter().zip(&rr.d).map(|(a, b)| a * b).sum() };
    let fwd = f_ref(&refs);
    let got = R::from_tensor(tape.value(out));
    for (a, b) in got.d.iter().zip(&fwd.d) {
        assert!((a - b).abs() <= 1e-4 * (1.0 + b.abs()), "forward disagrees: {a} vs {b}");
    }

    let mut worst: f64 = 0.0;
    for (j, v) in vars.iter().enumerate() {
        let g = tape
            .grad(*v)
            .map(|g| R::from_tensor(&g))
            .unwrap_or_else(|| R::zeros(inputs[j].shape()));
        let n = refs[j].d.len();
        let idx: Vec<usize> = match elems {
            Some(k) if k < n => (0..k).map(|_| rng.below(n)).collect(),
            _ => (0..n).collect(),
        };
        let mut xs = refs.clone();
        let (mut an, mut nu) = (vec![], vec![]);
        for i in idx {
            let x0 = xs[j].d[i];
            xs[j].d[i] = x0 + H;
            let up = eval(&xs);
            xs[j].d[i] = x0 - H;
            let dn = eval(&xs);
            xs[j].d[i] = x0;
            an.push(g.d[i]);
            nu.push((up - dn) / (2.0 * H));
        }
        worst = worst.max(super::max_rel_err(&an, &nu, FLOOR));
    }
    worst
}

/// Worst relative error of `case` over all seeds.
pub fn over_seeds(name: &str, case: fn(&mut Stream) -> f64) -> f64 {
    let mut worst: f64 = 0.0;
    for seed in 0..SEEDS {
        let mut rng = Stream::new(seed, name);
        worst = worst.max(case(&mut rng));
    }
    worst
}

macro_rules! grad_case {
    ($test:ident, |$rng:ident| [$($inp:expr),* $(,)?], |$tape:ident, $v:ident| $tbody:expr, |$x:ident| $rbody:expr) => {
        pub fn $test($rng: &mut Stream) -> f64 {
            let inputs = vec![$($inp),*];
            check(
                &inputs,
                None,
                $rng,
                &|$tape: &mut Tape, $v: &[Var]| $tbody,
                &|$x: &[R]| $rbody,
            )
        }
    };
}

grad_case!(
    add_broadcast,
    |g| [rand_t(&[2, 3, 4], -1.0, 1.0, g), rand_t(&[4], -1.0, 1.0, g)],
    |t, v| t.add(v[0], v[1]).unwrap(),
    |x| super::add(&x[0], &x[1])
);
grad_case!(
    sub_broadcast,
    |g| [rand_t(&[2, 3], -1.0, 1.0, g), rand_t(&[2, 1], -1.0, 1.0, g)],
    |t, v| t.sub(v[0], v[1]).unwrap(),
    |x| super::sub(&x[0], &x[1])
);
grad_case!(
    mul_same_and_broadcast,
    |g| [rand_t(&[3, 4], -1.0, 1.0, g), rand_t(&[1, 4], -1.0, 1.0, g)],
    |t, v| {
        let a = t.mul(v[0], v[0]).unwrap();
        t.mul(a, v[1]).unwrap()
    },
    |x| super::mul(&super::mul(&x[0], &x[0]), &x[1])
);
grad_case!(
    scale,
    |g| [rand_t(&[5], -1.0, 1.0, g)],
    |t, v| t.scale(v[0], -2.5),
    |x| super::scale(&x[0], -2.5)
);
grad_case!(
    matmul,
    |g| [rand_t(&[3, 5], -1.0, 1.0, g), rand_t(&[5, 4], -1.0, 1.0, g)],
    |t, v| t.matmul(v[0], v[1]).unwrap(),
    |x| super::matmul(&x[0], &x[1])
);
grad_case!(
    conv2d_pad1,
    |g| [
        rand_t(&[2, 3, 6, 5], -1.0, 1.0, g),
        rand_t(&[4, 3, 3, 3], -0.5, 0.5, g),
        rand_t(&[4], -1.0, 1.0, g)
    ],
    |t, v| t.conv2d(v[0], v[1], Some(v[2]), 1, 1).unwrap(),
    |x| super::conv2d(&x[0], &x[1], Some(&x[2]), 1, 1)
);
grad_case!(
    conv2d_stride2,
    |g| [rand_t(&[1, 2, 7, 6], -1.0, 1.0, g), rand_t(&[3, 2, 3, 2], -0.5, 0.5, g)],
    |t, v| t.conv2d(v[0], v[1], None, 2, 0).unwrap(),
    |x| super::conv2d(&x[0], &x[1], None, 2, 0)
);
grad_case!(
    conv2d_pointwise,
    |g| [
        rand_t(&[2, 4, 3, 3], -1.0, 1.0, g),
        rand_t(&[5, 4, 1, 1], -0.5, 0.5, g),
        rand_t(&[5], -1.0, 1.0, g)
    ],
    |t, v| t.conv2d(v[0], v[1], Some(v[2]), 1, 0).unwrap(),
    |x| super::conv2d(&x[0], &x[1], Some(&x[2]), 1, 0)
);
grad_case!(relu, |g| [away_from_zero(&[3, 7], 0.01, g)], |t, v| t.relu(v[0]), |x| {
    super::relu(&x[0])
});
grad_case!(gelu, |g| [rand_t(&[3, 7], -3.0, 3.0, g)], |t, v| t.gelu(v[0]), |x| {
    super::gelu(&x[0])
});
grad_case!(
    clamp,
    |g| [Tensor::from_fn(&[3, 7], |_| {
        let u = g.uniform();
        if u < 0.3 {
            g.uniform_range(-0.5, 0.19)
        } else if u < 0.7 {
            g.uniform_range(0.21, 0.79)
        } else {
            g.uniform_range(0.81, 1.5)
        }
    })],
    |t, v| t.clamp(v[0], 0.2, 0.8),
    |x| super::clamp(&x[0], 0.2, 0.8)
);
grad_case!(
    softmax,
    |g| [rand_t(&[2, 4, 3], -2.0, 2.0, g)],
    |t, v| t.softmax(v[0], 1).unwrap(),
    |x| super::softmax(&x[0], 1)
);
grad_case!(
    log_softmax,
    |g| [rand_t(&[2, 5, 3], -2.0, 2.0, g)],
    |t, v| t.log_softmax(v[0], 1).unwrap(),
    |x| super::log_softmax(&x[0], 1)
);
grad_case!(
    layer_norm_affine,
    |g| [
        rand_t(&[5, 6], -2.0, 2.0, g),
        rand_t(&[6], 0.5, 1.5, g),
        rand_t(&[6], -1.0, 1.0, g)
    ],
    |t, v| t.layer_norm(v[0], Some(v[1]), Some(v[2]), 1e-5).unwrap(),
    |x| super::layer_norm(&x[0], Some(&x[1]), Some(&x[2]), 1e-5)
);
grad_case!(
    layer_norm_plain,
    |g| [rand_t(&[2, 3, 4], -2.0, 2.0, g)],
    |t, v| t.layer_norm(v[0], None, None, 1e-5).unwrap(),
    |x| super::layer_norm(&x[0], None, None, 1e-5)
);
grad_case!(mean, |g| [rand_t(&[3, 4], -1.0, 1.0, g)], |t, v| t.mean(v[0]), |x| {
    super::mean(&x[0])
});
grad_case!(sum, |g| [rand_t(&[3, 4], -1.0, 1.0, g)], |t, v| t.sum(v[0]), |x| {
    super::sum(&x[0])
});
grad_case!(
    upsample,
    |g| [rand_t(&[1, 2, 3, 3], -1.0, 1.0, g)],
    |t, v| t.upsample_nearest(v[0], 2).unwrap(),
    |x| super::upsample(&x[0], 2)
);
grad_case!(
    downsample,
    |g| [rand_t(&[2, 2, 4, 6], -1.0, 1.0, g)],
    |t, v| t.downsample_avg(v[0], 2).unwrap(),
    |x| super::downsample(&x[0], 2)
);
grad_case!(
    concat,
    |g| [rand_t(&[1, 2, 3, 3], -1.0, 1.0, g), rand_t(&[1, 3, 3, 3], -1.0, 1.0, g)],
    |t, v| t.concat(&[v[0], v[1]], 1).unwrap(),
    |x| super::concat(&[&x[0], &x[1]], 1)
);
grad_case!(
    slice,
    |g| [rand_t(&[2, 4, 5], -1.0, 1.0, g)],
    |t, v| t.slice(v[0], &[1..2, 0..3, 2..5]).unwrap(),
    |x| super::slice(&x[0], &[1..2, 0..3, 2..5])
);
grad_case!(
    place,
    |g| [rand_t(&[2, 3], -1.0, 1.0, g)],
    |t, v| t.place(v[0], &[4, 5], &[1, 2]).unwrap(),
    |x| super::place(&x[0], &[4, 5], &[1, 2])
);
grad_case!(
    reshape_transpose,
    |g| [rand_t(&[2, 3, 2], -1.0, 1.0, g)],
    |t, v| {
        let r = t.reshape(v[0], &[6, 2]).unwrap();
        t.transpose(r).unwrap()
    },
    |x| super::transpose(&super::reshape(&x[0], &[6, 2]))
);
grad_case!(
    attention,
    |g| [
        rand_t(&[4, 3], -1.0, 1.0, g),
        rand_t(&[5, 3], -1.0, 1.0, g),
        rand_t(&[5, 2], -1.0, 1.0, g)
    ],
    |t, v| t.scaled_dot_attention(v[0], v[1], v[2]).unwrap(),
    |x| super::attention(&x[0], &x[1], &x[2])
);

pub fn pick_class(g: &mut Stream) -> f64 {
    let labels: Vec<usize> = (0..18).map(|_| g.below(5)).collect();
    let inputs = vec![rand_t(&[2, 5, 3, 3], -1.0, 1.0, g)];
    let l2 = labels.clone();
    check(&inputs, None, g, &move |t, v| t.pick_class(v[0], &l2).unwrap(), &|x| {
        super::pick_class(&x[0], &labels)
    })
}

pub fn cross_entropy_loss(g: &mut Stream) -> f64 {
    let labels: Vec<usize> = (0..8).map(|_| g.below(5)).collect();
    let inputs = vec![rand_t(&[2, 5, 2, 2], -2.0, 2.0, g)];
    let l2 = labels.clone();
    check(
        &inputs,
        None,
        g,
        &move |t, v| coda_core::engine::cross_entropy(t, v[0], &l2).unwrap(),
        &|x| R::new(&[1], vec![super::cross_entropy(&x[0], &labels)]),
    )
}

/// Prompts, segmentation net and adapter together on a 16×16 image, with
/// every parameter randomized so no residual path is trivially zero.
pub fn segnet_adapter_composite(g: &mut Stream) -> f64 {
    let size = 16;
    let mut cfg = ModelConfig::for_image(size);
    cfg.prompt = PromptConfig {
        init: PromptInit::Zeros,
        patch: 2,
        ..cfg.prompt
    };
    cfg.adapter.dim = 64;
    {
        let mut model = Model::init(&cfg, g.next_u64()).unwrap();
        for (name, t) in model.tensors_mut() {
            let fan: usize = t.shape().iter().skip(1).product::<usize>().max(t.shape()[0]);
            let b = if name.starts_with("prompt") {
                0.05
            } else {
                (3.0 / fan as f32).sqrt()
            };
            let off = if name.ends_with("ln.g") { 1.0 } else { 0.0 };
            for v in t.data_mut() {
                *v = off + g.uniform_range(-b, b);
            }
        }
        let branch = SeverityClass::High;
        let seg_names: Vec<String> = model.segnet.iter().map(|(n, _)| n.to_string()).collect();
        let pr_names: Vec<String> = model.prompts.branches_raw()[0]
            .iter()
            .map(|(n, _)| n.to_string())
            .collect();
        let ad_names: Vec<String> = model.adapters.branches_raw()[0]
            .iter()
            .map(|(n, _)| n.to_string())
            .collect();
        let footprints = model.prompts.footprints.clone();

        let mut inputs = vec![rand_t(&[1, 3, size, size], 0.2, 0.8, g)];
        inputs.extend(model.segnet.iter().map(|(_, t)| t.clone()));
        inputs.extend(model.prompts.branch(branch).iter().map(|(_, t)| t.clone()));
        inputs.extend(model.adapters.branch(branch).iter().map(|(_, t)| t.clone()));
        let (ns, np) = (seg_names.len(), pr_names.len());

        let tape_fn = |t: &mut Tape, v: &[Var]| -> Var {
            let p = bind_from(&seg_names, &v[1..1 + ns]);
            let prompts = bind_from(&pr_names, &v[1 + ns..1 + ns + np]);
            let adapter = bind_from(&ad_names, &v[1 + ns + np..]);
            let bb = coda_core::model::BoundBranch {
                prompts,
                adapter,
                footprints: &footprints,
            };
            forward_branch(t, &p, &bb, v[0]).unwrap().logits
        };
        let ref_fn = |x: &[R]| -> R {
            let pick =
                |names: &[String], xs: &[R]| -> super::P { names.iter().cloned().zip(xs.iter().cloned()).collect() };
            let ps = pick(&seg_names, &x[1..1 + ns]);
            let pp = pick(&pr_names, &x[1 + ns..1 + ns + np]);
            let pa = pick(&ad_names, &x[1 + ns + np..]);
            let prompted = super::prompts(&pp, &footprints, &x[0]);
            let hook = |f: &R| super::adapter(&pa, f);
            super::segnet(&ps, &prompted, Some(&hook)).0
        };
        check(&inputs, Some(3), g, &tape_fn, &ref_fn)
    }
}

fn bind_from(names: &[String], vars: &[Var]) -> coda_core::params::Bound {
    coda_core::params::Bound::from_pairs(names.iter().cloned().zip(vars.iter().copied()))
}

pub type Case = fn(&mut Stream) -> f64;

pub const CASES: &[(&str, Case)] = &[
    ("add_broadcast", add_broadcast),
    ("sub_broadcast", sub_broadcast),
    ("mul_same_and_broadcast", mul_same_and_broadcast),
    ("scale", scale),
    ("matmul", matmul),
    ("conv2d_pad1", conv2d_pad1),
    ("conv2d_stride2", conv2d_stride2),
    ("conv2d_pointwise", conv2d_pointwise),
    ("relu", relu),
    ("gelu", gelu),
    ("clamp", clamp),
    ("softmax", softmax),
    ("log_softmax", log_softmax),
    ("layer_norm_affine", layer_norm_affine),
    ("layer_norm_plain", layer_norm_plain),
    ("mean", mean),
    ("sum", sum),
    ("upsample", upsample),
    ("downsample", downsample),
    ("concat", concat),
    ("slice", slice),
    ("place", place),
    ("reshape_transpose", reshape_transpose),
    ("attention", attention),
    ("pick_class", pick_class),
    ("cross_entropy_loss", cross_entropy_loss),
    ("segnet_adapter_composite", segnet_adapter_composite),
];
