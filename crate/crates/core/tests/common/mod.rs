#![allow(dead_code)]

pub mod gradcheck;

use std::collections::BTreeSet;

use ofat::distillation::{DistillConfig, TeacherModel, TeacherSpec};
use ofat::numerics::rng::streams;
use ofat::numerics::{Real, Rng, Tensor};
use ofat::supernet::{ParamSet, SearchSpace};
use ofat::training::{make_split, Dataset, TrainConfig};

pub fn rand_tensor(rng: &mut Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| (rng.normal() * scale) as Real).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Small teacher, data split and configs for fast end-to-end tests.
pub struct Fixture {
    pub space: SearchSpace,
    pub teacher: TeacherModel,
    pub train: Dataset,
    pub val: Dataset,
    pub distill: DistillConfig,
    pub cfg: TrainConfig,
}

pub fn fixture(seed: u64, steps: usize) -> Fixture {
    let space = SearchSpace::desk_small();
    let distill = DistillConfig {
        k: 2,
        teacher: TeacherSpec {
            embed_dim: space.teacher_dim,
            heads: 4,
            ffn_ratio: 2.0,
            depth: 2,
        },
        ..DistillConfig::default()
    };
    let teacher = TeacherModel::build(
        &space,
        &distill.teacher,
        &mut Rng::new(seed, streams::TEACHER),
    )
    .unwrap();
    let (train, val) = make_split(seed, 6, 3, 128).unwrap();
    let cfg = TrainConfig {
        stage: 1,
        steps,
        batch_size: 2,
        sequence_length: 24,
        warmup_steps: steps / 10,
        seed,
        ..TrainConfig::default()
    };
    Fixture {
        space,
        teacher,
        train,
        val,
        distill,
        cfg,
    }
}

/// Outputs of [`reference_forward`], all `[t, width]` row-major.
pub struct Reference {
    pub final_out: Vec<f64>,
    pub hidden: Vec<Vec<f64>>,
    pub head_out: Vec<f64>,
}

fn get(p: &ParamSet, name: &str) -> Vec<f64> {
    p.get(name)
        .unwrap_or_else(|| panic!("missing {name}"))
        .data()
        .iter()
        .map(|&v| v as f64)
        .collect()
}

fn dense(x: &[f64], t: usize, w: &[f64], b: &[f64], fin: usize, fout: usize) -> Vec<f64> {
    let mut y = vec![0.0; t * fout];
    for r in 0..t {
        for o in 0..fout {
            let mut acc = b[o];
            for i in 0..fin {
                acc += x[r * fin + i] * w[i * fout + o];
            }
            y[r * fout + o] = acc;
        }
    }
    y
}

fn norm(x: &[f64], d: usize, gain: &[f64], bias: &[f64]) -> Vec<f64> {
    let mut y = vec![0.0; x.len()];
    for (yr, xr) in y.chunks_mut(d).zip(x.chunks(d)) {
        let mean = xr.iter().sum::<f64>() / d as f64;
        let var = xr.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
        let rs = 1.0 / (var + 1e-5).sqrt();
        for i in 0..d {
            yr[i] = (xr[i] - mean) * rs * gain[i] + bias[i];
        }
    }
    y
}

fn gelu(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (c * (x + 0.044715 * x * x * x)).tanh())
}

/// A plain fixed-width pre-norm Transformer written with loops in f64. It
/// reads weights of exactly the shapes a standalone model holds and shares no
/// code with the engine.
pub fn reference_forward(
    params: &ParamSet,
    heads: &[usize],
    head_dim: usize,
    groups: usize,
    features: &Tensor,
    mask: Option<&[usize]>,
) -> Reference {
    let t = features.rows();
    let fd = features.last_dim();
    let x: Vec<f64> = features.data().iter().map(|&v| v as f64).collect();
    let e = params["input_proj.bias"].numel();
    let mut h = dense(
        &x,
        t,
        &get(params, "input_proj.weight"),
        &get(params, "input_proj.bias"),
        fd,
        e,
    );
    if let Some(rows) = mask {
        let m = get(params, "mask_embedding");
        for &r in rows {
            h[r * e..(r + 1) * e].copy_from_slice(&m);
        }
    }

    let cw = get(params, "pos_conv.weight");
    let cb = get(params, "pos_conv.bias");
    let k = params["pos_conv.weight"].shape()[2];
    let gs = e / groups;
    let pad = (k / 2) as isize;
    let mut pos = vec![0.0; t * e];
    for tau in 0..t {
        for o in 0..e {
            let g0 = (o / gs) * gs;
            let mut acc = cb[o];
            for j in 0..k {
                let src = tau as isize + j as isize - pad;
                if src < 0 || src >= t as isize {
                    continue;
                }
                for i in 0..gs {
                    acc += cw[(o * gs + i) * k + j] * h[src as usize * e + g0 + i];
                }
            }
            pos[tau * e + o] = gelu(acc);
        }
    }
    for (a, p) in h.iter_mut().zip(&pos) {
        *a += p;
    }

    let mut hidden = Vec::new();
    for (l, &nh) in heads.iter().enumerate() {
        let p = |leaf: &str| get(params, &format!("blocks.{l}.{leaf}"));
        let a_dim = nh * head_dim;
        let x1 = norm(&h, e, &p("ln1.gain"), &p("ln1.bias"));
        let q = dense(&x1, t, &p("attn.q.weight"), &p("attn.q.bias"), e, a_dim);
        let kk = dense(&x1, t, &p("attn.k.weight"), &p("attn.k.bias"), e, a_dim);
        let v = dense(&x1, t, &p("attn.v.weight"), &p("attn.v.bias"), e, a_dim);
        let mut ctx = vec![0.0; t * a_dim];
        let scale = 1.0 / (head_dim as f64).sqrt();
        for hd in 0..nh {
            let off = hd * head_dim;
            for i in 0..t {
                let scores: Vec<f64> = (0..t)
                    .map(|j| {
                        (0..head_dim)
                            .map(|c| q[i * a_dim + off + c] * kk[j * a_dim + off + c])
                            .sum::<f64>()
                            * scale
                    })
                    .collect();
                let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let ex: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
                let z: f64 = ex.iter().sum();
                for c in 0..head_dim {
                    ctx[i * a_dim + off + c] =
                        (0..t).map(|j| ex[j] / z * v[j * a_dim + off + c]).sum();
                }
            }
        }
        let att = dense(
            &ctx,
            t,
            &p("attn.out.weight"),
            &p("attn.out.bias"),
            a_dim,
            e,
        );
        for (a, b) in h.iter_mut().zip(&att) {
            *a += b;
        }
        let f = p("ffn.fc1.bias").len();
        let x2 = norm(&h, e, &p("ln2.gain"), &p("ln2.bias"));
        let mut u = dense(&x2, t, &p("ffn.fc1.weight"), &p("ffn.fc1.bias"), e, f);
        u.iter_mut().for_each(|v| *v = gelu(*v));
        let y = dense(&u, t, &p("ffn.fc2.weight"), &p("ffn.fc2.bias"), f, e);
        for (a, b) in h.iter_mut().zip(&y) {
            *a += b;
        }
        hidden.push(h.clone());
    }
    let final_out = norm(
        &h,
        e,
        &get(params, "final_norm.gain"),
        &get(params, "final_norm.bias"),
    );
    let td = params["head.bias"].numel();
    let head_out = dense(
        &final_out,
        t,
        &get(params, "head.weight"),
        &get(params, "head.bias"),
        e,
        td,
    );
    Reference {
        final_out,
        hidden,
        head_out,
    }
}

pub fn max_abs_diff(a: &Tensor, b: &[f64]) -> f64 {
    assert_eq!(a.numel(), b.len());
    a.data()
        .iter()
        .zip(b)
        .map(|(&x, y)| (x as f64 - y).abs())
        .fold(0.0, f64::max)
}

/// Number of distinct subnets found by enumerating every per-layer assignment.
pub fn brute_force(space: &SearchSpace) -> u64 {
    // enumerate every per-layer assignment explicitly
    let per_layer: Vec<(usize, f64)> = space
        .head_choices
        .iter()
        .flat_map(|&h| space.ffn_ratios.iter().map(move |&r| (h, r)))
        .collect();
    let mut seen = BTreeSet::new();
    for &e in &space.embed_dims {
        for &d in &space.depths {
            let mut idx = vec![0usize; d];
            loop {
                let key: Vec<String> = idx
                    .iter()
                    .map(|&i| format!("{}:{}", per_layer[i].0, per_layer[i].1))
                    .collect();
                seen.insert(format!("{e}/{d}/{}", key.join(",")));
                let mut pos = 0;
                while pos < d && idx[pos] + 1 == per_layer.len() {
                    idx[pos] = 0;
                    pos += 1;
                }
                if pos == d {
                    break;
                }
                idx[pos] += 1;
            }
        }
    }
    seen.len() as u64
}
