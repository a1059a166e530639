use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::numerics::Tensor;
use crate::supernet::space::{SearchSpace, SubnetConfig};

/// Named tensors in a stable order.
pub type ParamSet = IndexMap<String, Tensor>;

pub(crate) fn block_name(layer: usize, leaf: &str) -> String {
    format!("blocks.{layer}.{leaf}")
}

/// Parameter names and shapes of the frozen frontend.
pub fn frontend_shapes(space: &SearchSpace) -> Vec<(String, Vec<usize>)> {
    let f = &space.frontend;
    let mut out = Vec::new();
    let mut cin = 1;
    for (i, l) in f.layers.iter().enumerate() {
        out.push((
            format!("frontend.{i}.weight"),
            vec![l.channels, cin, l.kernel],
        ));
        if f.bias {
            out.push((format!("frontend.{i}.bias"), vec![l.channels]));
        }
        if i == 0 && f.first_layer_norm {
            out.push(("frontend.norm.gain".into(), vec![l.channels]));
            out.push(("frontend.norm.bias".into(), vec![l.channels]));
        }
        cin = l.channels;
    }
    out
}

/// Trainable tensors an architecture of the given dimensions owns, with their
/// shapes. Evaluated at the maximal dimensions this is the supernet store;
/// evaluated at a subnet it gives the prefix box each store entry is sliced to.
fn encoder_shapes(
    space: &SearchSpace,
    embed: usize,
    depth: usize,
    attn: impl Fn(usize) -> usize,
    ffn: impl Fn(usize) -> usize,
) -> Vec<(String, Vec<usize>)> {
    let e = embed;
    let mut out = vec![
        ("input_proj.weight".to_string(), vec![space.frontend_dim, e]),
        ("input_proj.bias".to_string(), vec![e]),
        ("mask_embedding".to_string(), vec![e]),
        (
            "pos_conv.weight".to_string(),
            vec![e, e / space.conv_groups, space.conv_kernel],
        ),
        ("pos_conv.bias".to_string(), vec![e]),
    ];
    for l in 0..depth {
        let (a, f) = (attn(l), ffn(l));
        for (leaf, shape) in [
            ("ln1.gain", vec![e]),
            ("ln1.bias", vec![e]),
            ("attn.q.weight", vec![e, a]),
            ("attn.q.bias", vec![a]),
            ("attn.k.weight", vec![e, a]),
            ("attn.k.bias", vec![a]),
            ("attn.v.weight", vec![e, a]),
            ("attn.v.bias", vec![a]),
            ("attn.out.weight", vec![a, e]),
            ("attn.out.bias", vec![e]),
            ("ln2.gain", vec![e]),
            ("ln2.bias", vec![e]),
            ("ffn.fc1.weight", vec![e, f]),
            ("ffn.fc1.bias", vec![f]),
            ("ffn.fc2.weight", vec![f, e]),
            ("ffn.fc2.bias", vec![e]),
        ] {
            out.push((block_name(l, leaf), shape));
        }
    }
    out.extend([
        ("final_norm.gain".to_string(), vec![e]),
        ("final_norm.bias".to_string(), vec![e]),
        ("head.weight".to_string(), vec![e, space.teacher_dim]),
        ("head.bias".to_string(), vec![space.teacher_dim]),
    ]);
    out
}

/// Shapes of the maximal weight store (frontend excluded).
pub fn supernet_shapes(space: &SearchSpace) -> Vec<(String, Vec<usize>)> {
    encoder_shapes(
        space,
        space.max_embed(),
        space.max_depth(),
        |_| space.max_attn(),
        |_| space.max_ffn(),
    )
}

/// Prefix box of every store entry touched by `config` (frontend excluded).
pub fn touched_extents(space: &SearchSpace, config: &SubnetConfig) -> Vec<(String, Vec<usize>)> {
    encoder_shapes(
        space,
        config.embed_dim,
        config.depth,
        |l| config.attn_dim(l, space.head_dim),
        |l| config.ffn_hidden(l),
    )
}

/// Copy the prefix boxes of `config` out of a maximal store.
pub(crate) fn slice_store(store: &ParamSet, extents: &[(String, Vec<usize>)]) -> Result<ParamSet> {
    let mut out = ParamSet::with_capacity(extents.len());
    for (name, ext) in extents {
        let full = store.get(name).ok_or_else(|| {
            crate::error::Error::Format(format!("weight store has no tensor `{name}`"))
        })?;
        out.insert(name.clone(), full.prefix_box(ext)?);
    }
    Ok(out)
}

/// Parameter total with a per-component breakdown.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamCount {
    pub total: u64,
    pub by_component: IndexMap<String, u64>,
    pub includes_frontend: bool,
    pub includes_head: bool,
}

/// Closed-form parameter count of `config`.
///
/// Per layer with embed `d`, attention width `a` and FFN width `f`:
/// QKV `3(da + a)`, output `ad + d`, FFN `df + f + fd + d`, two layer norms `4d`.
/// Around the blocks: input projection, positional conv `d (d/G) k + d`,
/// final norm `2d`, mask embedding `d`, and optionally the frontend and the
/// prediction head `d t + t`.
pub fn count_params(
    space: &SearchSpace,
    config: &SubnetConfig,
    includes_frontend: bool,
    includes_head: bool,
) -> Result<ParamCount> {
    config.validate(space)?;
    let d = config.embed_dim as u64;
    let hd = space.head_dim as u64;
    let mut blocks = 0u64;
    for l in 0..config.depth {
        let a = config.heads[l] as u64 * hd;
        let f = config.ffn_hidden(l) as u64;
        blocks += 3 * (d * a + a) + (a * d + d) + (d * f + f + f * d + d) + 4 * d;
    }
    let g = space.conv_groups as u64;
    let k = space.conv_kernel as u64;
    let t = space.teacher_dim as u64;
    let mut by = IndexMap::new();
    if includes_frontend {
        by.insert("frontend".to_string(), space.frontend.param_count());
    }
    by.insert("input_proj".to_string(), space.frontend_dim as u64 * d + d);
    by.insert("pos_conv".to_string(), d * (d / g) * k + d);
    by.insert("blocks".to_string(), blocks);
    by.insert("final_norm".to_string(), 2 * d);
    by.insert("mask_embedding".to_string(), d);
    if includes_head {
        by.insert("prediction_head".to_string(), d * t + t);
    }
    Ok(ParamCount {
        total: by.values().sum(),
        by_component: by,
        includes_frontend,
        includes_head,
    })
}
