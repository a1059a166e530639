//! Masked distillation from a frozen teacher.
//!
//! Targets are the average of the teacher's top-k block outputs, each
//! standardized per time step. The student sees span-masked input and is scored
//! by the L1 distance to the targets at the masked steps only.

use serde::{Deserialize, Serialize};

use crate::error::{config_err, Error, Result};
use crate::numerics::{standardize_raw, Graph, Real, Rng, Tensor, Var, LN_EPS};
use crate::supernet::{
    build_supernet, max_subnet, Checkpoint, CheckpointMeta, Role, SearchSpace, StandaloneModel,
    SubnetConfig, SubnetRunner,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TargetConfig {
    /// Number of top teacher layers averaged.
    #[serde(default = "default_k")]
    pub k: usize,
}

fn default_k() -> usize {
    8
}

impl Default for TargetConfig {
    fn default() -> Self {
        Self { k: default_k() }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskConvention {
    /// `p` is the fraction of frames masked.
    Fraction,
    /// `p` is the per-frame probability of starting a span.
    SpanStart,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum L1Reduction {
    /// Per-step distance averaged over features.
    Mean,
    /// Per-step distance summed over features.
    Sum,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaskSpec {
    #[serde(default = "default_p")]
    pub p: f64,
    #[serde(default = "default_span")]
    pub span_length: usize,
    #[serde(default = "default_convention")]
    pub convention: MaskConvention,
}

fn default_p() -> f64 {
    0.65
}
fn default_span() -> usize {
    10
}
fn default_convention() -> MaskConvention {
    MaskConvention::Fraction
}

impl Default for MaskSpec {
    fn default() -> Self {
        Self {
            p: default_p(),
            span_length: default_span(),
            convention: default_convention(),
        }
    }
}

impl MaskSpec {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.p) {
            return Err(config_err(format!(
                "mask probability {} outside [0, 1]",
                self.p
            )));
        }
        if self.span_length == 0 {
            return Err(config_err("mask span length must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct MaskResult {
    pub masked_input: Tensor,
    /// Sorted, distinct.
    pub mask_indices: Vec<usize>,
}

/// Sorted masked time steps for a sequence of `t` frames.
///
/// `Fraction`: span starts are visited in a random order and each span (clipped
/// at `t`) is added while the covered count stays at most `ceil(p * t)`; the
/// span that would overshoot is cut short, so exactly `ceil(p * t)` frames are
/// masked. `SpanStart`: `floor(p * t / span + u)` starts (at least one when
/// `p > 0`) drawn without replacement from `[0, t - span]`, windows unioned.
pub fn sample_mask(t: usize, spec: &MaskSpec, rng: &mut Rng) -> Result<Vec<usize>> {
    spec.validate()?;
    if t == 0 {
        return Err(Error::Contract("cannot mask an empty sequence".into()));
    }
    if spec.p == 0.0 {
        return Ok(Vec::new());
    }
    let span = spec.span_length;
    let mut covered = vec![false; t];
    match spec.convention {
        MaskConvention::Fraction => {
            let target = ((spec.p * t as f64).ceil() as usize).clamp(1, t);
            let mut starts: Vec<usize> = (0..t).collect();
            rng.shuffle(&mut starts);
            let mut n = 0;
            for s in starts {
                if n == target {
                    break;
                }
                for c in covered.iter_mut().take((s + span).min(t)).skip(s) {
                    if n == target {
                        break;
                    }
                    if !*c {
                        *c = true;
                        n += 1;
                    }
                }
            }
        }
        MaskConvention::SpanStart => {
            let positions = t.saturating_sub(span) + 1;
            let want = (spec.p * t as f64 / span as f64 + rng.uniform()).floor() as usize;
            let want = want.clamp(1, positions);
            let mut starts: Vec<usize> = (0..positions).collect();
            rng.shuffle(&mut starts);
            for &s in &starts[..want] {
                covered[s..(s + span).min(t)]
                    .iter_mut()
                    .for_each(|c| *c = true);
            }
        }
    }
    Ok((0..t).filter(|&i| covered[i]).collect())
}

/// Everything the distillation objective and the teacher need, as one config section.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DistillConfig {
    #[serde(default = "default_p")]
    pub p: f64,
    #[serde(default = "default_span")]
    pub span_length: usize,
    #[serde(default = "default_convention")]
    pub mask_convention: MaskConvention,
    #[serde(default = "default_k")]
    pub k: usize,
    #[serde(default = "default_reduction")]
    pub l1_reduction: L1Reduction,
    /// Steps of masked feature regression run on a fresh teacher (0 = none).
    #[serde(default)]
    pub teacher_warmup_steps: usize,
    #[serde(default = "default_warmup_lr")]
    pub teacher_warmup_lr: f64,
    #[serde(default)]
    pub teacher: TeacherSpec,
}

fn default_reduction() -> L1Reduction {
    L1Reduction::Mean
}
fn default_warmup_lr() -> f64 {
    2e-3
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            p: default_p(),
            span_length: default_span(),
            mask_convention: default_convention(),
            k: default_k(),
            l1_reduction: default_reduction(),
            teacher_warmup_steps: 0,
            teacher_warmup_lr: default_warmup_lr(),
            teacher: TeacherSpec::default(),
        }
    }
}

impl DistillConfig {
    pub fn mask_spec(&self) -> MaskSpec {
        MaskSpec {
            p: self.p,
            span_length: self.span_length,
            convention: self.mask_convention,
        }
    }

    pub fn target_config(&self) -> TargetConfig {
        TargetConfig { k: self.k }
    }

    pub fn validate(&self) -> Result<()> {
        self.mask_spec().validate()?;
        if self.k == 0 || self.k > self.teacher.depth {
            return Err(config_err(format!(
                "top-k {} must lie in 1..={} (teacher depth)",
                self.k, self.teacher.depth
            )));
        }
        if !(self.teacher_warmup_lr.is_finite() && self.teacher_warmup_lr > 0.0) {
            return Err(config_err("teacher warm-up learning rate must be positive"));
        }
        Ok(())
    }
}

/// Replace the sampled span-masked rows of `x` by `mask_embedding`.
pub fn apply_mask(
    x: &Tensor,
    spec: &MaskSpec,
    mask_embedding: &Tensor,
    rng: &mut Rng,
) -> Result<MaskResult> {
    if x.rank() != 2 || mask_embedding.shape() != [x.shape()[1]] {
        return Err(Error::Dimension(format!(
            "mask embedding {:?} does not match input {:?}",
            mask_embedding.shape(),
            x.shape()
        )));
    }
    let mask_indices = sample_mask(x.rows(), spec, rng)?;
    let d = x.last_dim();
    let mut masked_input = x.clone();
    for &i in &mask_indices {
        masked_input.data_mut()[i * d..(i + 1) * d].copy_from_slice(mask_embedding.data());
    }
    Ok(MaskResult {
        masked_input,
        mask_indices,
    })
}

/// Average of the top `cfg.k` layers, each standardized per time step.
pub fn compute_targets(hidden: &[Tensor], cfg: &TargetConfig) -> Result<Tensor> {
    if cfg.k == 0 || cfg.k > hidden.len() {
        return Err(config_err(format!(
            "top-k of {} requested from {} teacher layers",
            cfg.k,
            hidden.len()
        )));
    }
    let top = &hidden[hidden.len() - cfg.k..];
    let shape = top[0].shape().to_vec();
    if shape.len() != 2 || top.iter().any(|h| h.shape() != shape.as_slice()) {
        return Err(Error::Dimension(
            "teacher layers must share one [t, d] shape".into(),
        ));
    }
    let d = shape[1];
    let mut acc = vec![0.0f64; top[0].numel()];
    for h in top {
        let (z, _) = standardize_raw(h.data(), d, LN_EPS);
        acc.iter_mut().zip(&z).for_each(|(a, &v)| *a += v as f64);
    }
    let k = cfg.k as f64;
    Tensor::new(shape, acc.into_iter().map(|a| (a / k) as Real).collect())
}

fn check_mask(t: usize, mask: &[usize]) -> Result<()> {
    if mask.is_empty() {
        return Err(Error::Contract(
            "distillation loss needs at least one masked step".into(),
        ));
    }
    if let Some(&i) = mask.iter().find(|&&i| i >= t) {
        return Err(Error::Dimension(format!(
            "masked step {i} out of range for {t} steps"
        )));
    }
    Ok(())
}

/// `(1/|M|) sum_{i in M} dist(targets_i, student_i)` on the graph, with the per
/// step L1 distance reduced over features by `reduction`.
pub fn distill_loss(
    g: &mut Graph,
    student: Var,
    targets: &Tensor,
    mask: &[usize],
    reduction: L1Reduction,
) -> Result<Var> {
    let shape = g.value(student).shape().to_vec();
    if shape != targets.shape() {
        return Err(Error::Dimension(format!(
            "student output {shape:?} vs targets {:?}",
            targets.shape()
        )));
    }
    check_mask(shape[0], mask)?;
    let tv = g.constant(targets.clone());
    let s = g.gather_rows(student, mask)?;
    let t = g.gather_rows(tv, mask)?;
    let diff = g.sub(s, t)?;
    let a = g.abs(diff);
    let m = g.mean(a);
    Ok(match reduction {
        L1Reduction::Mean => m,
        L1Reduction::Sum => g.scale(m, shape[1] as Real),
    })
}

/// Value of [`distill_loss`] on plain tensors.
pub fn distill_loss_value(
    student: &Tensor,
    targets: &Tensor,
    mask: &[usize],
    reduction: L1Reduction,
) -> Result<Real> {
    let mut g = Graph::new();
    let s = g.constant(student.clone());
    let l = distill_loss(&mut g, s, targets, mask, reduction)?;
    g.value(l).item()
}

/// Teacher architecture. Its embed dim is the student's target width.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TeacherSpec {
    pub embed_dim: usize,
    pub heads: usize,
    pub ffn_ratio: f64,
    pub depth: usize,
}

impl Default for TeacherSpec {
    fn default() -> Self {
        Self {
            embed_dim: 64,
            heads: 8,
            ffn_ratio: 4.0,
            depth: 8,
        }
    }
}

/// A frozen fixed-architecture Transformer with the student's frontend.
///
/// Its own prediction head maps to the frontend width and is only used by the
/// optional warm-up regression.
#[derive(Clone, Debug)]
pub struct TeacherModel {
    model: StandaloneModel,
}

impl TeacherModel {
    /// Seed-initialized teacher for a student living in `student_space`.
    pub fn build(student_space: &SearchSpace, spec: &TeacherSpec, rng: &mut Rng) -> Result<Self> {
        if spec.embed_dim != student_space.teacher_dim {
            return Err(config_err(format!(
                "teacher embed dim {} differs from the student target width {}",
                spec.embed_dim, student_space.teacher_dim
            )));
        }
        let mut space =
            student_space.singleton(spec.embed_dim, spec.heads, spec.ffn_ratio, spec.depth);
        space.teacher_dim = space.frontend_dim;
        let supernet = build_supernet(&space, rng)?;
        Ok(Self {
            model: supernet.extract_subnet(&max_subnet(&space))?,
        })
    }

    pub fn model(&self) -> &StandaloneModel {
        &self.model
    }

    pub(crate) fn model_mut(&mut self) -> &mut StandaloneModel {
        &mut self.model
    }

    pub fn space(&self) -> &SearchSpace {
        self.model.space()
    }

    pub fn depth(&self) -> usize {
        self.model.config().depth
    }

    pub fn embed_dim(&self) -> usize {
        self.model.config().embed_dim
    }

    pub fn frontend(&self, samples: &[Real]) -> Result<Tensor> {
        self.model.frontend(samples)
    }

    /// Block outputs on unmasked frontend features.
    pub fn hidden(&self, features: &Tensor) -> Result<Vec<Tensor>> {
        Ok(self.model.forward_features(features, true)?.hidden)
    }

    pub fn targets_from_features(&self, features: &Tensor, cfg: &TargetConfig) -> Result<Tensor> {
        compute_targets(&self.hidden(features)?, cfg)
    }

    pub fn to_checkpoint(
        &self,
        seed: u64,
        config_digest: Option<String>,
        provenance: &str,
    ) -> Result<Checkpoint> {
        self.model.to_checkpoint(CheckpointMeta {
            role: Role::Teacher,
            space: self.space().clone(),
            subnet: Some(self.model.config().clone()),
            stage: None,
            seed,
            config_digest,
            provenance: provenance.into(),
        })
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let meta = ck.meta()?;
        if meta.role != Role::Teacher {
            return Err(Error::Format(format!(
                "expected a teacher checkpoint, found role {:?}",
                meta.role
            )));
        }
        Ok(Self {
            model: StandaloneModel::from_checkpoint(ck)?,
        })
    }

    /// Fixed architecture of this teacher.
    pub fn config(&self) -> &SubnetConfig {
        self.model.config()
    }
}

/// Contextualized targets for raw samples: frontend, every teacher block on the
/// unmasked input, then [`compute_targets`]. Nothing is recorded for gradients.
pub fn teacher_targets(
    teacher: &TeacherModel,
    samples: &[Real],
    cfg: &TargetConfig,
) -> Result<Tensor> {
    let features = teacher.frontend(samples)?;
    teacher.targets_from_features(&features, cfg)
}
