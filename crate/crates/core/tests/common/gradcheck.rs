//! Randomized finite-difference checks of every differentiable op and of the
//! full masked-distillation pipeline through a sampled subnet.

use ofat::distillation::{distill_loss, sample_mask, L1Reduction, MaskSpec};
use ofat::numerics::gradcheck::compare;
use ofat::numerics::rng::streams;
use ofat::numerics::{Graph, Real, Rng, Tensor, Var};
use ofat::supernet::{
    build_supernet, sample_subnet, touched_extents, SearchSpace, SubnetConfig, SubnetRunner,
    SupernetModel,
};
use ofat::Result;

use super::rand_tensor;

/// Acceptance threshold on the norm-relative error.
#[cfg(not(feature = "f64"))]
pub const TOL: f64 = 1e-3;
#[cfg(feature = "f64")]
pub const TOL: f64 = 1e-6;

// Central-difference steps. At 32 bits the rounding of a forward pass swamps
// a 1e-3 difference when the gradient is small, so wider steps are used with
// Richardson extrapolation. Each is where rounding and truncation error cross
// over on a seed sweep. Kinked ops and L1 targets keep their inputs far from
// the kinks. The 64-bit build uses 1e-4 everywhere, where truncation after
// extrapolation is negligible and rounding stays far below its tolerance.

/// Input features of the composed pipeline; also the plain step for L1 checks.
#[cfg(not(feature = "f64"))]
pub const STEP: Real = 5e-2;
#[cfg(feature = "f64")]
pub const STEP: Real = 1e-4;

/// Single ops.
#[cfg(not(feature = "f64"))]
pub const OP_STEP: Real = 2e-2;
#[cfg(feature = "f64")]
pub const OP_STEP: Real = 1e-4;

/// Weights of the composed pipeline, whose initial scale is small.
#[cfg(not(feature = "f64"))]
pub const WEIGHT_STEP: Real = 1.5e-2;
#[cfg(feature = "f64")]
pub const WEIGHT_STEP: Real = 1e-4;

pub type OpFn = Box<dyn Fn(&mut Graph, Var) -> Result<Var>>;

pub struct Op {
    pub name: &'static str,
    pub make: fn(&mut Rng) -> (Tensor, OpFn),
}

fn dim(rng: &mut Rng, lo: usize, hi: usize) -> usize {
    lo + rng.below(hi - lo + 1)
}

/// `sum(y * r)` for a fixed pseudo-random `r`, so every output element matters.
fn contract(g: &mut Graph, y: Var, seed: u64) -> Result<Var> {
    let shape = g.value(y).shape().to_vec();
    let r = rand_tensor(&mut Rng::new(seed, streams::PROBE), &shape, 1.0);
    let r = g.constant(r);
    let p = g.mul(y, r)?;
    Ok(g.sum(p))
}

fn away_from_zero(rng: &mut Rng, shape: &[usize]) -> Tensor {
    let mut t = rand_tensor(rng, shape, 1.0);
    for v in t.data_mut() {
        *v = v.signum() * (0.2 + v.abs());
    }
    t
}

/// Rows with standard deviation at least 0.5. Normalizing a nearly constant
/// row is ill-conditioned against a 32-bit difference step.
fn spread_rows(rng: &mut Rng, shape: &[usize]) -> Tensor {
    let mut t = rand_tensor(rng, shape, 1.0);
    let d = shape[shape.len() - 1];
    for row in t.data_mut().chunks_mut(d) {
        let mean = row.iter().sum::<Real>() / d as Real;
        let sd = (row.iter().map(|v| (v - mean) * (v - mean)).sum::<Real>() / d as Real).sqrt();
        if sd < 0.5 {
            let k = 0.5 / sd.max(1e-3);
            row.iter_mut().for_each(|v| *v = mean + (*v - mean) * k);
        }
    }
    t
}

macro_rules! op {
    ($name:expr, |$rng:ident| $body:block) => {
        Op {
            name: $name,
            make: |$rng: &mut Rng| -> (Tensor, OpFn) { $body },
        }
    };
}

pub fn ops() -> Vec<Op> {
    vec![
        op!("matmul.lhs", |rng| {
            let (m, k, n) = (dim(rng, 2, 5), dim(rng, 2, 6), dim(rng, 2, 5));
            let b = rand_tensor(rng, &[k, n], 1.0);
            (
                rand_tensor(rng, &[m, k], 1.0),
                Box::new(move |g, x| {
                    let b = g.constant(b.clone());
                    let y = g.matmul(x, b)?;
                    Ok(y)
                }),
            )
        }),
        op!("matmul.rhs", |rng| {
            let (m, k, n) = (dim(rng, 2, 5), dim(rng, 2, 6), dim(rng, 2, 5));
            let a = rand_tensor(rng, &[m, k], 1.0);
            (
                rand_tensor(rng, &[k, n], 1.0),
                Box::new(move |g, x| {
                    let a = g.constant(a.clone());
                    let y = g.matmul(a, x)?;
                    Ok(y)
                }),
            )
        }),
        op!("transpose", |rng| {
            let shape = [dim(rng, 2, 5), dim(rng, 2, 5)];
            (
                rand_tensor(rng, &shape, 1.0),
                Box::new(move |g, x| {
                    let y = g.transpose(x)?;
                    Ok(y)
                }),
            )
        }),
        op!("add", |rng| {
            let shape = [dim(rng, 2, 4), dim(rng, 2, 5)];
            let c = rand_tensor(rng, &shape, 1.0);
            (
                rand_tensor(rng, &shape, 1.0),
                Box::new(move |g, x| {
                    let c = g.constant(c.clone());
                    let y = g.add(x, c)?;
                    let y = g.add(y, x)?;
                    Ok(y)
                }),
            )
        }),
        op!("sub", |rng| {
            let shape = [dim(rng, 2, 4), dim(rng, 2, 5)];
            let c = rand_tensor(rng, &shape, 1.0);
            (
                rand_tensor(rng, &shape, 1.0),
                Box::new(move |g, x| {
                    let c = g.constant(c.clone());
                    let y = g.sub(c, x)?;
                    Ok(y)
                }),
            )
        }),
        op!("mul", |rng| {
            let shape = [dim(rng, 2, 4), dim(rng, 2, 5)];
            let c = rand_tensor(rng, &shape, 1.0);
            (
                rand_tensor(rng, &shape, 1.0),
                Box::new(move |g, x| {
                    let c = g.constant(c.clone());
                    let y = g.mul(x, c)?;
                    let y = g.mul(y, x)?;
                    Ok(y)
                }),
            )
        }),
        op!("add_bias.x", |rng| {
            let (t, d) = (dim(rng, 2, 4), dim(rng, 2, 5));
            let b = rand_tensor(rng, &[d], 1.0);
            (
                rand_tensor(rng, &[t, d], 1.0),
                Box::new(move |g, x| {
                    let b = g.constant(b.clone());
                    let y = g.add_bias(x, b)?;
                    Ok(y)
                }),
            )
        }),
        op!("add_bias.bias", |rng| {
            let (t, d) = (dim(rng, 2, 4), dim(rng, 2, 5));
            let a = rand_tensor(rng, &[t, d], 1.0);
            (
                rand_tensor(rng, &[d], 1.0),
                Box::new(move |g, x| {
                    let a = g.constant(a.clone());
                    let y = g.add_bias(a, x)?;
                    Ok(y)
                }),
            )
        }),
        op!("scale", |rng| {
            let shape = [dim(rng, 2, 4), dim(rng, 2, 5)];
            let c = rng.uniform_range(-3.0, 3.0) as Real;
            (
                rand_tensor(rng, &shape, 1.0),
                Box::new(move |g, x| {
                    let y = g.scale(x, c);
                    Ok(y)
                }),
            )
        }),
        op!("abs", |rng| {
            let shape = [dim(rng, 2, 4), dim(rng, 2, 5)];
            (
                away_from_zero(rng, &shape),
                Box::new(move |g, x| {
                    let y = g.abs(x);
                    Ok(y)
                }),
            )
        }),
        op!("gelu", |rng| {
            let shape = [dim(rng, 4, 8)];
            (
                rand_tensor(rng, &shape, 2.0),
                Box::new(move |g, x| {
                    let y = g.gelu(x);
                    Ok(y)
                }),
            )
        }),
        op!("softmax_lastdim", |rng| {
            let shape = [dim(rng, 2, 4), dim(rng, 2, 6)];
            (
                rand_tensor(rng, &shape, 1.0),
                Box::new(move |g, x| {
                    let y = g.softmax_lastdim(x);
                    Ok(y)
                }),
            )
        }),
        op!("layer_norm.x", |rng| {
            let (t, d) = (dim(rng, 2, 4), dim(rng, 4, 8));
            let (ga, be) = (rand_tensor(rng, &[d], 1.0), rand_tensor(rng, &[d], 1.0));
            (
                spread_rows(rng, &[t, d]),
                Box::new(move |g, x| {
                    let (ga, be) = (g.constant(ga.clone()), g.constant(be.clone()));
                    let y = g.layer_norm(x, ga, be, 1e-5)?;
                    Ok(y)
                }),
            )
        }),
        op!("layer_norm.gain", |rng| {
            let (t, d) = (dim(rng, 2, 4), dim(rng, 4, 8));
            let (a, be) = (rand_tensor(rng, &[t, d], 1.0), rand_tensor(rng, &[d], 1.0));
            (
                rand_tensor(rng, &[d], 1.0),
                Box::new(move |g, x| {
                    let (a, be) = (g.constant(a.clone()), g.constant(be.clone()));
                    let y = g.layer_norm(a, x, be, 1e-5)?;
                    Ok(y)
                }),
            )
        }),
        op!("layer_norm.bias", |rng| {
            let (t, d) = (dim(rng, 2, 4), dim(rng, 4, 8));
            let (a, ga) = (rand_tensor(rng, &[t, d], 1.0), rand_tensor(rng, &[d], 1.0));
            (
                rand_tensor(rng, &[d], 1.0),
                Box::new(move |g, x| {
                    let (a, ga) = (g.constant(a.clone()), g.constant(ga.clone()));
                    let y = g.layer_norm(a, ga, x, 1e-5)?;
                    Ok(y)
                }),
            )
        }),
        op!("standardize_lastdim", |rng| {
            let shape = [dim(rng, 2, 4), dim(rng, 4, 8)];
            (
                spread_rows(rng, &shape),
                Box::new(move |g, x| {
                    let y = g.standardize_lastdim(x, 1e-5)?;
                    Ok(y)
                }),
            )
        }),
        op!("grouped_conv1d.x", |rng| {
            let (t, groups, gs, k) = (
                dim(rng, 2, 6),
                dim(rng, 2, 3),
                dim(rng, 1, 2),
                2 * rng.below(3) + 1,
            );
            let c = groups * gs;
            let w = rand_tensor(rng, &[c, gs, k], 0.7);
            let b = rand_tensor(rng, &[c], 1.0);
            (
                rand_tensor(rng, &[t, c], 1.0),
                Box::new(move |g, x| {
                    let (w, b) = (g.constant(w.clone()), g.constant(b.clone()));
                    let y = g.grouped_conv1d(x, w, b, groups)?;
                    Ok(y)
                }),
            )
        }),
        op!("grouped_conv1d.weight", |rng| {
            let (t, groups, gs, k) = (
                dim(rng, 2, 6),
                dim(rng, 2, 3),
                dim(rng, 1, 2),
                2 * rng.below(3) + 1,
            );
            let c = groups * gs;
            let a = rand_tensor(rng, &[t, c], 1.0);
            let b = rand_tensor(rng, &[c], 1.0);
            (
                rand_tensor(rng, &[c, gs, k], 0.7),
                Box::new(move |g, x| {
                    let (a, b) = (g.constant(a.clone()), g.constant(b.clone()));
                    let y = g.grouped_conv1d(a, x, b, groups)?;
                    Ok(y)
                }),
            )
        }),
        op!("grouped_conv1d.bias", |rng| {
            let (t, groups, gs, k) = (
                dim(rng, 2, 6),
                dim(rng, 2, 3),
                dim(rng, 1, 2),
                2 * rng.below(3) + 1,
            );
            let c = groups * gs;
            let a = rand_tensor(rng, &[t, c], 1.0);
            let w = rand_tensor(rng, &[c, gs, k], 0.7);
            (
                rand_tensor(rng, &[c], 1.0),
                Box::new(move |g, x| {
                    let (a, w) = (g.constant(a.clone()), g.constant(w.clone()));
                    let y = g.grouped_conv1d(a, w, x, groups)?;
                    Ok(y)
                }),
            )
        }),
        op!("slice_prefix", |rng| {
            let shape = [dim(rng, 2, 4), dim(rng, 2, 5), dim(rng, 2, 3)];
            let d = rng.below(3);
            let n = 1 + rng.below(shape[d]);
            (
                rand_tensor(rng, &shape, 1.0),
                Box::new(move |g, x| {
                    let y = g.slice_prefix(x, d, n)?;
                    Ok(y)
                }),
            )
        }),
        op!("slice_range", |rng| {
            let shape = [dim(rng, 2, 4), dim(rng, 2, 6)];
            let d = rng.below(2);
            let start = rng.below(shape[d]);
            let len = 1 + rng.below(shape[d] - start);
            (
                rand_tensor(rng, &shape, 1.0),
                Box::new(move |g, x| {
                    let y = g.slice_range(x, d, start, len)?;
                    Ok(y)
                }),
            )
        }),
        op!("concat", |rng| {
            let (t, d) = (dim(rng, 2, 4), dim(rng, 2, 4));
            let along = rng.below(2);
            let other_shape = if along == 0 {
                [dim(rng, 2, 3), d]
            } else {
                [t, dim(rng, 2, 3)]
            };
            let other = rand_tensor(rng, &other_shape, 1.0);
            (
                rand_tensor(rng, &[t, d], 1.0),
                Box::new(move |g, x| {
                    let o = g.constant(other.clone());
                    let y = g.concat(&[x, o, x], along)?;
                    Ok(y)
                }),
            )
        }),
        op!("gather_rows", |rng| {
            let (t, d) = (dim(rng, 2, 6), dim(rng, 2, 4));
            let rows: Vec<usize> = (0..dim(rng, 2, 5)).map(|_| rng.below(t)).collect();
            (
                rand_tensor(rng, &[t, d], 1.0),
                Box::new(move |g, x| {
                    let y = g.gather_rows(x, &rows)?;
                    Ok(y)
                }),
            )
        }),
        op!("mask_rows.x", |rng| {
            let (t, d) = (dim(rng, 2, 6), dim(rng, 2, 4));
            let fill = rand_tensor(rng, &[d], 1.0);
            let rows: Vec<usize> = (0..t).filter(|_| rng.uniform() < 0.5).collect();
            (
                rand_tensor(rng, &[t, d], 1.0),
                Box::new(move |g, x| {
                    let f = g.constant(fill.clone());
                    let y = g.mask_rows(x, f, &rows)?;
                    Ok(y)
                }),
            )
        }),
        op!("mask_rows.fill", |rng| {
            let (t, d) = (dim(rng, 2, 6), dim(rng, 2, 4));
            let a = rand_tensor(rng, &[t, d], 1.0);
            let rows: Vec<usize> = (0..t).filter(|_| rng.uniform() < 0.5).collect();
            (
                rand_tensor(rng, &[d], 1.0),
                Box::new(move |g, x| {
                    let a = g.constant(a.clone());
                    let y = g.mask_rows(a, x, &rows)?;
                    Ok(y)
                }),
            )
        }),
        op!("sum", |rng| {
            let shape = [dim(rng, 2, 4), dim(rng, 2, 5)];
            (
                rand_tensor(rng, &shape, 1.0),
                Box::new(move |g, x| {
                    let y = g.mul(x, x)?;
                    Ok(g.sum(y))
                }),
            )
        }),
        op!("mean", |rng| {
            let shape = [dim(rng, 2, 4), dim(rng, 2, 5)];
            (
                rand_tensor(rng, &shape, 1.0),
                Box::new(move |g, x| {
                    let y = g.mul(x, x)?;
                    Ok(g.mean(y))
                }),
            )
        }),
    ]
}

/// Worst norm-relative error of `op` over `trials` random draws.
///
/// The op output is contracted with a fixed random tensor. The numeric side
/// does that contraction in f64 and Richardson-extrapolates two central
/// differences, so neither the scalar's rounding nor the step's truncation
/// error dominates at 32 bits.
pub fn check_op(op: &Op, trials: usize, seed: u64) -> f64 {
    let mut rng = Rng::new(seed, streams::PROBE);
    let mut worst = 0.0f64;
    for _ in 0..trials {
        let (x, f) = (op.make)(&mut rng);
        let s = rng.next_u64();
        let fail = |e: ofat::Error| -> ! { panic!("{}: {e}", op.name) };

        let mut g = Graph::new();
        let leaf = g.param(x.clone());
        let y = f(&mut g, leaf).unwrap_or_else(|e| fail(e));
        let shape = g.value(y).shape().to_vec();
        let loss = contract(&mut g, y, s).unwrap_or_else(|e| fail(e));
        g.backward(loss).unwrap_or_else(|e| fail(e));
        let autodiff = g
            .grad(leaf)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(x.shape()));

        let r = rand_tensor(&mut Rng::new(s, streams::PROBE), &shape, 1.0);
        let value = |p: &Tensor| -> f64 {
            let mut g = Graph::new();
            let v = g.constant(p.clone());
            let y = f(&mut g, v).unwrap_or_else(|e| fail(e));
            g.value(y)
                .data()
                .iter()
                .zip(r.data())
                .map(|(&a, &b)| a as f64 * b as f64)
                .sum()
        };
        let mut probe = x.clone();
        let mut diff = |i: usize, h: Real| -> f64 {
            let orig = probe.data()[i];
            probe.data_mut()[i] = orig + h;
            let fp = value(&probe);
            probe.data_mut()[i] = orig - h;
            let fm = value(&probe);
            probe.data_mut()[i] = orig;
            (fp - fm) / ((orig + h) as f64 - (orig - h) as f64)
        };
        let mut numeric = Tensor::zeros(x.shape());
        for i in 0..x.numel() {
            let (wide, narrow) = (diff(i, OP_STEP), diff(i, OP_STEP / 2.0));
            numeric.data_mut()[i] = ((4.0 * narrow - wide) / 3.0) as Real;
        }
        worst = worst.max(compare(autodiff, numeric).max_rel_err);
    }
    worst
}

/// Targets at least 1 away from the student's masked output in every element,
/// so no difference step reaches an L1 kink.
fn margin_targets(
    model: &SupernetModel,
    config: &SubnetConfig,
    x: &Tensor,
    mask: &[usize],
    rng: &mut Rng,
) -> Tensor {
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let (out, _) = model
        .view(config)
        .unwrap()
        .run(&mut g, xv, Some(mask), false)
        .unwrap();
    let mut targets = rand_tensor(rng, g.value(out.head_out).shape(), 0.5);
    for (t, &o) in targets
        .data_mut()
        .iter_mut()
        .zip(g.value(out.head_out).data())
    {
        *t = o + t.signum() * (1.0 + t.abs());
    }
    targets
}

fn pipeline_mask() -> MaskSpec {
    MaskSpec {
        p: 0.5,
        span_length: 2,
        ..MaskSpec::default()
    }
}

/// Mean masked L1 distance of `head` to `targets`, summed in f64 so the
/// numeric side of a check is not rounded to 32 bits.
fn masked_l1_f64(head: &Tensor, targets: &Tensor, mask: &[usize]) -> f64 {
    let total: f64 = mask
        .iter()
        .flat_map(|&r| head.row(r).iter().zip(targets.row(r)))
        .map(|(&a, &b)| (a as f64 - b as f64).abs())
        .sum();
    total / (mask.len() * head.last_dim()) as f64
}

/// Richardson extrapolation of central differences at `h` and `h / 2`, which
/// cancels the h^2 truncation term. `f` evaluates at `x + delta`.
fn richardson(mut f: impl FnMut(Real) -> f64, h: Real) -> f64 {
    let mut central = |h: Real| (f(h) - f(-h)) / (h as f64 * 2.0);
    let (wide, narrow) = (central(h), central(h / 2.0));
    (4.0 * narrow - wide) / 3.0
}

/// Input-feature gradient of the masked distillation loss through a random
/// subnet of a small supernet.
pub fn check_pipeline_input(trials: usize, seed: u64) -> f64 {
    let space = SearchSpace::desk_small();
    let model = build_supernet(&space, &mut Rng::new(seed, streams::INIT)).unwrap();
    let mut rng = Rng::new(seed, streams::PROBE);
    let mut worst = 0.0f64;
    for _ in 0..trials {
        let config = sample_subnet(&space, &mut rng);
        let t = dim(&mut rng, 3, 8);
        let x = rand_tensor(&mut rng, &[t, space.frontend_dim], 1.0);
        let mask = sample_mask(t, &pipeline_mask(), &mut rng).unwrap();
        let targets = margin_targets(&model, &config, &x, &mask, &mut rng);
        let view = model.view(&config).unwrap();

        let mut g = Graph::new();
        let leaf = g.param(x.clone());
        let (out, _) = view.run(&mut g, leaf, Some(&mask), false).unwrap();
        let loss = distill_loss(&mut g, out.head_out, &targets, &mask, L1Reduction::Mean).unwrap();
        g.backward(loss).unwrap();
        let autodiff = g.grad(leaf).cloned().unwrap();

        let mut probe = x.clone();
        let mut numeric = Tensor::zeros(x.shape());
        for i in 0..x.numel() {
            let orig = probe.data()[i];
            numeric.data_mut()[i] = richardson(
                |h| {
                    probe.data_mut()[i] = orig + h;
                    let mut g = Graph::new();
                    let v = g.constant(probe.clone());
                    let (out, _) = view.run(&mut g, v, Some(&mask), false).unwrap();
                    probe.data_mut()[i] = orig;
                    masked_l1_f64(g.value(out.head_out), &targets, &mask)
                },
                STEP,
            ) as Real;
        }
        worst = worst.max(compare(autodiff, numeric).max_rel_err);
    }
    worst
}

/// Weight gradients of the same pipeline, spot-checked on random touched
/// elements of every kind of store tensor. The error scale of each tensor is
/// the infinity norm of its full autodiff gradient.
pub fn check_pipeline_weights(trials: usize, seed: u64) -> f64 {
    const NAMES: [&str; 10] = [
        "input_proj.weight",
        "mask_embedding",
        "pos_conv.weight",
        "blocks.0.ln1.gain",
        "blocks.0.attn.q.weight",
        "blocks.0.attn.v.bias",
        "blocks.1.attn.out.weight",
        "blocks.1.ffn.fc1.weight",
        "final_norm.bias",
        "head.weight",
    ];
    let space = SearchSpace::desk_small();
    let mut model = build_supernet(&space, &mut Rng::new(seed, streams::INIT)).unwrap();
    let mut rng = Rng::new(seed ^ 0x5eed, streams::PROBE);
    let mut worst = 0.0f64;
    for _ in 0..trials {
        let mut config = sample_subnet(&space, &mut rng);
        while config.depth < 2 {
            config = sample_subnet(&space, &mut rng);
        }
        let t = dim(&mut rng, 3, 8);
        let x = rand_tensor(&mut rng, &[t, space.frontend_dim], 1.0);
        let mask = sample_mask(t, &pipeline_mask(), &mut rng).unwrap();
        let targets = margin_targets(&model, &config, &x, &mask, &mut rng);
        let loss_of = |m: &SupernetModel, grads: bool| {
            let mut g = Graph::new();
            let xv = g.constant(x.clone());
            let view = m.view(&config).unwrap();
            let (out, bound) = view.run(&mut g, xv, Some(&mask), grads).unwrap();
            let l = distill_loss(&mut g, out.head_out, &targets, &mask, L1Reduction::Mean).unwrap();
            let value = masked_l1_f64(g.value(out.head_out), &targets, &mask);
            if !grads {
                return (value, Vec::new());
            }
            g.backward(l).unwrap();
            let gs = bound
                .leaves
                .iter()
                .map(|(n, v)| (n.clone(), g.grad(*v).cloned()))
                .collect::<Vec<_>>();
            (value, gs)
        };
        let (_, grads) = loss_of(&model, true);
        let extents = touched_extents(&space, &config);
        for name in NAMES {
            let grad = grads
                .iter()
                .find(|(n, _)| n == name)
                .and_then(|(_, g)| g.clone())
                .unwrap_or_else(|| panic!("no gradient for {name}"));
            let ext = &extents.iter().find(|(n, _)| n == name).unwrap().1;
            let idx = Tensor::prefix_box_indices(grad.shape(), ext);
            let scale = grad
                .data()
                .iter()
                .fold(0.0f64, |m, &v| m.max((v as f64).abs()))
                .max(1e-6);
            for _ in 0..4 {
                let i = idx[rng.below(idx.len())];
                let orig = model.params()[name].data()[i];
                // rounding noise differs between nearby steps, so average three
                let numeric = [0.8, 1.0, 1.25]
                    .iter()
                    .map(|&k| {
                        richardson(
                            |h| {
                                model.params_mut()[name].data_mut()[i] = orig + h;
                                let (v, _) = loss_of(&model, false);
                                model.params_mut()[name].data_mut()[i] = orig;
                                v
                            },
                            WEIGHT_STEP * k,
                        )
                    })
                    .sum::<f64>()
                    / 3.0;
                let err = (numeric - grad.data()[i] as f64).abs() / scale;
                worst = worst.max(err);
            }
        }
    }
    worst
}
