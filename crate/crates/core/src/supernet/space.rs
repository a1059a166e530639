use std::fmt;
use std::str::FromStr;

use num_bigint::BigUint;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, Error, Result};
use crate::numerics::Rng;

/// One strided convolution of the frozen downsampling frontend.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvLayerSpec {
    pub channels: usize,
    pub kernel: usize,
    pub stride: usize,
}

/// Frozen convolutional frontend turning raw samples into frame features.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FrontendSpec {
    pub layers: Vec<ConvLayerSpec>,
    /// Per-layer bias vectors.
    #[serde(default)]
    pub bias: bool,
    /// Per-channel normalization over time after the first layer (gain + bias).
    #[serde(default)]
    pub first_layer_norm: bool,
}

impl FrontendSpec {
    pub fn total_stride(&self) -> usize {
        self.layers.iter().map(|l| l.stride).product()
    }

    pub fn out_channels(&self) -> usize {
        self.layers.last().map(|l| l.channels).unwrap_or(1)
    }

    /// Frames produced for `samples` input samples.
    pub fn output_len(&self, samples: usize) -> usize {
        self.layers
            .iter()
            .fold(samples, |len, l| len.div_ceil(l.stride))
    }

    pub fn param_count(&self) -> u64 {
        let mut cin = 1u64;
        let mut total = 0u64;
        for (i, l) in self.layers.iter().enumerate() {
            let cout = l.channels as u64;
            total += cin * cout * l.kernel as u64;
            if self.bias {
                total += cout;
            }
            if i == 0 && self.first_layer_norm {
                total += 2 * cout;
            }
            cin = cout;
        }
        total
    }

    /// Seven-layer 512-channel extractor with a 320x total stride.
    pub fn paper_scale() -> Self {
        let mut layers = vec![ConvLayerSpec {
            channels: 512,
            kernel: 10,
            stride: 5,
        }];
        layers.extend((0..4).map(|_| ConvLayerSpec {
            channels: 512,
            kernel: 3,
            stride: 2,
        }));
        layers.extend((0..2).map(|_| ConvLayerSpec {
            channels: 512,
            kernel: 2,
            stride: 2,
        }));
        Self {
            layers,
            bias: false,
            first_layer_norm: true,
        }
    }

    /// Two strided layers, total stride 4.
    pub fn desk(frontend_dim: usize) -> Self {
        Self {
            layers: vec![
                ConvLayerSpec {
                    channels: 16,
                    kernel: 4,
                    stride: 2,
                },
                ConvLayerSpec {
                    channels: frontend_dim,
                    kernel: 4,
                    stride: 2,
                },
            ],
            bias: true,
            first_layer_norm: false,
        }
    }
}

/// The variable dimensions of a supernet and the fixed dimensions around them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SearchSpace {
    pub embed_dims: Vec<usize>,
    pub head_choices: Vec<usize>,
    pub ffn_ratios: Vec<f64>,
    pub depths: Vec<usize>,
    /// Per-head width; attention width is always `head_dim * heads`.
    pub head_dim: usize,
    /// Group count of the positional convolution.
    pub conv_groups: usize,
    /// Kernel of the positional convolution. Must be odd to build a model;
    /// even values are accepted for parameter counting only.
    pub conv_kernel: usize,
    pub frontend_dim: usize,
    pub teacher_dim: usize,
    pub frontend: FrontendSpec,
}

fn strictly_increasing<T: PartialOrd>(v: &[T]) -> bool {
    v.windows(2).all(|w| w[0] < w[1])
}

impl SearchSpace {
    pub fn validate(&self) -> Result<()> {
        if self.embed_dims.is_empty()
            || self.head_choices.is_empty()
            || self.ffn_ratios.is_empty()
            || self.depths.is_empty()
        {
            return Err(config_err("every choice set must be non-empty"));
        }
        if !strictly_increasing(&self.embed_dims)
            || !strictly_increasing(&self.head_choices)
            || !strictly_increasing(&self.ffn_ratios)
            || !strictly_increasing(&self.depths)
        {
            return Err(config_err("choice sets must be strictly increasing"));
        }
        if self.embed_dims[0] == 0 || self.head_choices[0] == 0 || self.depths[0] == 0 {
            return Err(config_err("dimensions must be positive"));
        }
        if !self.ffn_ratios.iter().all(|r| r.is_finite() && *r > 0.0) {
            return Err(config_err("ffn ratios must be positive"));
        }
        if self.head_dim == 0 || self.frontend_dim == 0 || self.teacher_dim == 0 {
            return Err(config_err(
                "head_dim, frontend_dim and teacher_dim must be positive",
            ));
        }
        if self.conv_groups == 0 {
            return Err(config_err("conv_groups must be positive"));
        }
        if let Some(d) = self.embed_dims.iter().find(|&&d| d % self.conv_groups != 0) {
            return Err(config_err(format!(
                "embed dim {d} is not divisible by conv_groups {}",
                self.conv_groups
            )));
        }
        if self.conv_kernel == 0 {
            return Err(config_err("conv_kernel must be positive"));
        }
        if self.frontend.layers.is_empty()
            || self
                .frontend
                .layers
                .iter()
                .any(|l| l.channels == 0 || l.kernel == 0 || l.stride == 0)
        {
            return Err(config_err(
                "frontend needs at least one non-degenerate layer",
            ));
        }
        if self.frontend.out_channels() != self.frontend_dim {
            return Err(config_err(format!(
                "frontend emits {} channels but frontend_dim is {}",
                self.frontend.out_channels(),
                self.frontend_dim
            )));
        }
        for d in &self.embed_dims {
            for r in &self.ffn_ratios {
                if ffn_hidden(*r, *d) == 0 {
                    return Err(config_err(format!(
                        "ffn ratio {r} gives no hidden units at {d}"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn max_embed(&self) -> usize {
        *self.embed_dims.last().unwrap()
    }

    pub fn max_heads(&self) -> usize {
        *self.head_choices.last().unwrap()
    }

    pub fn max_depth(&self) -> usize {
        *self.depths.last().unwrap()
    }

    pub fn max_ratio(&self) -> f64 {
        *self.ffn_ratios.last().unwrap()
    }

    pub fn max_attn(&self) -> usize {
        self.max_heads() * self.head_dim
    }

    pub fn max_ffn(&self) -> usize {
        ffn_hidden(self.max_ratio(), self.max_embed())
    }

    /// Small supernet: embed {256,384,512}, heads {4,6,8}, ratio {3,3.5,4}, depth {10,11,12}.
    pub fn paper_small() -> Self {
        Self {
            embed_dims: vec![256, 384, 512],
            head_choices: vec![4, 6, 8],
            ffn_ratios: vec![3.0, 3.5, 4.0],
            depths: vec![10, 11, 12],
            ..Self::paper_common()
        }
    }

    /// Base supernet: embed {512,640,768}, heads {8,10,12}, ratio {3.5,4}, depth {12}.
    pub fn paper_base() -> Self {
        Self {
            embed_dims: vec![512, 640, 768],
            head_choices: vec![8, 10, 12],
            ffn_ratios: vec![3.5, 4.0],
            depths: vec![12],
            ..Self::paper_common()
        }
    }

    fn paper_common() -> Self {
        Self {
            embed_dims: vec![],
            head_choices: vec![],
            ffn_ratios: vec![],
            depths: vec![],
            head_dim: 64,
            conv_groups: 16,
            conv_kernel: 128,
            frontend_dim: 512,
            teacher_dim: 768,
            frontend: FrontendSpec::paper_scale(),
        }
    }

    /// Scaled-down analog of the small supernet for CPU training.
    pub fn desk_small() -> Self {
        Self {
            embed_dims: vec![32, 48, 64],
            head_choices: vec![4, 6, 8],
            ffn_ratios: vec![3.0, 3.5, 4.0],
            depths: vec![2, 3, 4],
            ..Self::desk_common()
        }
    }

    /// Scaled-down analog of the base supernet.
    pub fn desk_base() -> Self {
        Self {
            embed_dims: vec![48, 56, 64],
            head_choices: vec![6, 7, 8],
            ffn_ratios: vec![3.5, 4.0],
            depths: vec![4],
            ..Self::desk_common()
        }
    }

    fn desk_common() -> Self {
        Self {
            embed_dims: vec![],
            head_choices: vec![],
            ffn_ratios: vec![],
            depths: vec![],
            head_dim: 8,
            conv_groups: 4,
            conv_kernel: 7,
            frontend_dim: 32,
            teacher_dim: 64,
            frontend: FrontendSpec::desk(32),
        }
    }

    /// Space containing exactly `config`'s uniform choices.
    pub fn singleton(&self, embed: usize, heads: usize, ratio: f64, depth: usize) -> Self {
        Self {
            embed_dims: vec![embed],
            head_choices: vec![heads],
            ffn_ratios: vec![ratio],
            depths: vec![depth],
            ..self.clone()
        }
    }
}

/// FFN hidden width: `round(ratio * embed)` with halves rounded up.
pub fn ffn_hidden(ratio: f64, embed: usize) -> usize {
    (ratio * embed as f64 + 0.5).floor() as usize
}

/// A concrete architecture: global embed dim and depth, per-layer heads and FFN ratio.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SubnetConfig {
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: Vec<usize>,
    pub ffn_ratios: Vec<f64>,
}

impl SubnetConfig {
    pub fn uniform(embed_dim: usize, depth: usize, heads: usize, ratio: f64) -> Self {
        Self {
            embed_dim,
            depth,
            heads: vec![heads; depth],
            ffn_ratios: vec![ratio; depth],
        }
    }

    pub fn validate(&self, space: &SearchSpace) -> Result<()> {
        if !space.embed_dims.contains(&self.embed_dim) {
            return Err(config_err(format!(
                "embed dim {} not in {:?}",
                self.embed_dim, space.embed_dims
            )));
        }
        if !space.depths.contains(&self.depth) {
            return Err(config_err(format!(
                "depth {} not in {:?}",
                self.depth, space.depths
            )));
        }
        if self.heads.len() != self.depth || self.ffn_ratios.len() != self.depth {
            return Err(config_err(format!(
                "depth {} needs {0} head and ratio entries, got {} and {}",
                self.depth,
                self.heads.len(),
                self.ffn_ratios.len()
            )));
        }
        if let Some(h) = self.heads.iter().find(|h| !space.head_choices.contains(h)) {
            return Err(config_err(format!(
                "head count {h} not in {:?}",
                space.head_choices
            )));
        }
        if let Some(r) = self
            .ffn_ratios
            .iter()
            .find(|r| !space.ffn_ratios.contains(r))
        {
            return Err(config_err(format!(
                "ffn ratio {r} not in {:?}",
                space.ffn_ratios
            )));
        }
        Ok(())
    }

    pub fn ffn_hidden(&self, layer: usize) -> usize {
        ffn_hidden(self.ffn_ratios[layer], self.embed_dim)
    }

    pub fn attn_dim(&self, layer: usize, head_dim: usize) -> usize {
        self.heads[layer] * head_dim
    }

    /// Elementwise `self <= other`: every touched weight of `self` is touched by `other`.
    pub fn is_nested_in(&self, other: &SubnetConfig) -> bool {
        self.embed_dim <= other.embed_dim
            && self.depth <= other.depth
            && (0..self.depth).all(|l| {
                self.heads[l] <= other.heads[l] && self.ffn_ratios[l] <= other.ffn_ratios[l]
            })
    }

    /// Named presets.
    ///
    /// * `max` / `a_largest`: all maxima.
    /// * `min`: all minima.
    /// * `a_base` / `a_small`: middle embed dim, middle head count, largest FFN
    ///   ratio, full depth. In the paper-scale base space this is the
    ///   640-embed, 10-head, 2560-FFN, 12-layer network; in the paper-scale
    ///   small space it is the 384-embed, 6-head, 1536-FFN, 12-layer one.
    pub fn preset(name: &str, space: &SearchSpace) -> Option<Self> {
        let mid = |v: &[usize]| v[(v.len() - 1) / 2];
        match name {
            "max" | "a_largest" => Some(max_subnet(space)),
            "min" => Some(min_subnet(space)),
            "a_base" | "a_small" => Some(Self::uniform(
                mid(&space.embed_dims),
                space.max_depth(),
                mid(&space.head_choices),
                space.max_ratio(),
            )),
            _ => None,
        }
    }

    /// Parse a preset name or `embed=64,depth=3,heads=4-6-8,ffn=3-3.5-4`.
    /// A single `heads` or `ffn` value is repeated across all layers.
    pub fn parse_spec(spec: &str, space: &SearchSpace) -> Result<Self> {
        if let Some(c) = Self::preset(spec.trim(), space) {
            c.validate(space)?;
            return Ok(c);
        }
        let c: SubnetConfig = spec.parse()?;
        c.validate(space)?;
        Ok(c)
    }

    pub fn heads_string(&self) -> String {
        join_dash(self.heads.iter().map(|h| h.to_string()))
    }

    pub fn ratios_string(&self) -> String {
        join_dash(self.ffn_ratios.iter().map(|r| r.to_string()))
    }
}

fn join_dash(it: impl Iterator<Item = String>) -> String {
    it.collect::<Vec<_>>().join("-")
}

impl fmt::Display for SubnetConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "embed={},depth={},heads={},ffn={}",
            self.embed_dim,
            self.depth,
            self.heads_string(),
            self.ratios_string()
        )
    }
}

impl FromStr for SubnetConfig {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut embed = None;
        let mut depth = None;
        let mut heads: Option<Vec<usize>> = None;
        let mut ratios: Option<Vec<f64>> = None;
        let bad = |what: &str| config_err(format!("bad subnet spec `{s}`: {what}"));
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let (k, v) = part
                .split_once('=')
                .ok_or_else(|| bad("expected key=value"))?;
            match k.trim() {
                "embed" => embed = Some(v.trim().parse().map_err(|_| bad("embed"))?),
                "depth" => depth = Some(v.trim().parse().map_err(|_| bad("depth"))?),
                "heads" => {
                    heads = Some(
                        v.split('-')
                            .map(|x| x.trim().parse())
                            .collect::<std::result::Result<_, _>>()
                            .map_err(|_| bad("heads"))?,
                    )
                }
                "ffn" => {
                    ratios = Some(
                        v.split('-')
                            .map(|x| x.trim().parse())
                            .collect::<std::result::Result<_, _>>()
                            .map_err(|_| bad("ffn"))?,
                    )
                }
                other => return Err(bad(&format!("unknown key `{other}`"))),
            }
        }
        let embed_dim = embed.ok_or_else(|| bad("missing embed"))?;
        let depth = depth.ok_or_else(|| bad("missing depth"))?;
        let heads = widen(heads.ok_or_else(|| bad("missing heads"))?, depth);
        let ffn_ratios = widen(ratios.ok_or_else(|| bad("missing ffn"))?, depth);
        Ok(Self {
            embed_dim,
            depth,
            heads,
            ffn_ratios,
        })
    }
}

fn widen<T: Copy>(v: Vec<T>, depth: usize) -> Vec<T> {
    if v.len() == 1 {
        vec![v[0]; depth]
    } else {
        v
    }
}

/// Uniform draw: embed dim and depth globally, heads and ratio independently per layer.
pub fn sample_subnet(space: &SearchSpace, rng: &mut Rng) -> SubnetConfig {
    let embed_dim = *rng.choose(&space.embed_dims);
    let depth = *rng.choose(&space.depths);
    let mut heads = Vec::with_capacity(depth);
    let mut ffn_ratios = Vec::with_capacity(depth);
    for _ in 0..depth {
        heads.push(*rng.choose(&space.head_choices));
        ffn_ratios.push(*rng.choose(&space.ffn_ratios));
    }
    SubnetConfig {
        embed_dim,
        depth,
        heads,
        ffn_ratios,
    }
}

/// `sum over depths d of |embed| * (|heads| * |ratios|)^d`.
pub fn count_subnets(space: &SearchSpace) -> BigUint {
    let per_layer = BigUint::from(space.head_choices.len() * space.ffn_ratios.len());
    let embed = BigUint::from(space.embed_dims.len());
    space
        .depths
        .iter()
        .map(|&d| &embed * per_layer.pow(d as u32))
        .sum()
}

pub fn min_subnet(space: &SearchSpace) -> SubnetConfig {
    SubnetConfig::uniform(
        space.embed_dims[0],
        space.depths[0],
        space.head_choices[0],
        space.ffn_ratios[0],
    )
}

pub fn max_subnet(space: &SearchSpace) -> SubnetConfig {
    SubnetConfig::uniform(
        space.max_embed(),
        space.max_depth(),
        space.max_heads(),
        space.max_ratio(),
    )
}
