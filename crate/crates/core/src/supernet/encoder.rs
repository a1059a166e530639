//! The pre-norm Transformer encoder shared by supernet views and standalone models.

use indexmap::IndexMap;

use crate::error::{config_err, Result};
use crate::numerics::{Graph, Real, Var, LN_EPS};
use crate::supernet::params::{block_name, ParamSet};

/// Graph nodes produced by one encoder pass.
#[derive(Clone, Debug)]
pub struct EncoderOutput {
    /// Final-norm output, `[t, embed]`.
    pub final_out: Var,
    /// Block outputs after the FFN residual, one per layer.
    pub hidden: Vec<Var>,
    /// Prediction head output, `[t, teacher_dim]`.
    pub head_out: Var,
}

/// Leaves a model placed on a graph, by store name, plus the views the encoder reads.
pub struct Bound {
    pub leaves: Vec<(String, Var)>,
    pub(crate) views: IndexMap<String, Var>,
}

/// Put every tensor named in `extents` on the graph and slice it to its prefix box.
pub(crate) fn bind(
    g: &mut Graph,
    store: &ParamSet,
    extents: &[(String, Vec<usize>)],
    trainable: bool,
) -> Result<Bound> {
    let mut leaves = Vec::with_capacity(extents.len());
    let mut views = IndexMap::with_capacity(extents.len());
    for (name, ext) in extents {
        let t = store
            .get(name)
            .ok_or_else(|| config_err(format!("weight store has no tensor `{name}`")))?;
        let leaf = if trainable {
            g.param(t.clone())
        } else {
            g.constant(t.clone())
        };
        let mut v = leaf;
        for (dim, &n) in ext.iter().enumerate() {
            v = g.slice_prefix(v, dim, n)?;
        }
        leaves.push((name.clone(), leaf));
        views.insert(name.clone(), v);
    }
    Ok(Bound { leaves, views })
}

pub(crate) struct Dims<'a> {
    pub head_dim: usize,
    pub groups: usize,
    pub heads: &'a [usize],
}

fn linear(g: &mut Graph, x: Var, w: &IndexMap<String, Var>, prefix: &str) -> Result<Var> {
    let y = g.matmul(x, w[&format!("{prefix}.weight")])?;
    g.add_bias(y, w[&format!("{prefix}.bias")])
}

fn attention(
    g: &mut Graph,
    x: Var,
    w: &IndexMap<String, Var>,
    layer: usize,
    heads: usize,
    head_dim: usize,
) -> Result<Var> {
    let q = linear(g, x, w, &block_name(layer, "attn.q"))?;
    let k = linear(g, x, w, &block_name(layer, "attn.k"))?;
    let v = linear(g, x, w, &block_name(layer, "attn.v"))?;
    let scale = 1.0 / (head_dim as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = g.slice_range(q, 1, h * head_dim, head_dim)?;
        let kh = g.slice_range(k, 1, h * head_dim, head_dim)?;
        let vh = g.slice_range(v, 1, h * head_dim, head_dim)?;
        let kt = g.transpose(kh)?;
        let scores = g.matmul(qh, kt)?;
        let scores = g.scale(scores, scale as Real);
        let probs = g.softmax_lastdim(scores);
        outs.push(g.matmul(probs, vh)?);
    }
    let cat = g.concat(&outs, 1)?;
    linear(g, cat, w, &block_name(layer, "attn.out"))
}

fn layer_norm(g: &mut Graph, x: Var, w: &IndexMap<String, Var>, prefix: &str) -> Result<Var> {
    g.layer_norm(
        x,
        w[&format!("{prefix}.gain")],
        w[&format!("{prefix}.bias")],
        LN_EPS,
    )
}

/// Input projection, optional masking, positional conv, blocks, final norm, head.
pub(crate) fn encode(
    g: &mut Graph,
    bound: &Bound,
    dims: &Dims<'_>,
    features: Var,
    mask: Option<&[usize]>,
) -> Result<EncoderOutput> {
    let w = &bound.views;
    let mut h = linear(g, features, w, "input_proj")?;
    if let Some(rows) = mask {
        if !rows.is_empty() {
            h = g.mask_rows(h, w["mask_embedding"], rows)?;
        }
    }
    let pos = g.grouped_conv1d(h, w["pos_conv.weight"], w["pos_conv.bias"], dims.groups)?;
    let pos = g.gelu(pos);
    h = g.add(h, pos)?;

    let mut hidden = Vec::with_capacity(dims.heads.len());
    for (l, &heads) in dims.heads.iter().enumerate() {
        let a = layer_norm(g, h, w, &block_name(l, "ln1"))?;
        let a = attention(g, a, w, l, heads, dims.head_dim)?;
        h = g.add(h, a)?;
        let f = layer_norm(g, h, w, &block_name(l, "ln2"))?;
        let f = linear(g, f, w, &block_name(l, "ffn.fc1"))?;
        let f = g.gelu(f);
        let f = linear(g, f, w, &block_name(l, "ffn.fc2"))?;
        h = g.add(h, f)?;
        hidden.push(h);
    }
    let final_out = layer_norm(g, h, w, "final_norm")?;
    let head_out = linear(g, final_out, w, "head")?;
    Ok(EncoderOutput {
        final_out,
        hidden,
        head_out,
    })
}
