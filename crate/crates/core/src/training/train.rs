use std::fmt::Write as _;
use std::path::PathBuf;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::distillation::{
    distill_loss, sample_mask, DistillConfig, L1Reduction, MaskSpec, TargetConfig, TeacherModel,
};
use crate::error::{config_err, Error, Result};
use crate::numerics::{rng::streams, standardize_raw, Graph, Real, Rng, Tensor, LN_EPS};
use crate::search::{evaluate_subnet, EvalSet};
use crate::supernet::params::frontend_shapes;
use crate::supernet::{
    build_supernet, max_subnet, sample_subnet, touched_extents, Checkpoint, CheckpointMeta,
    ParamSet, Role, SearchSpace, SubnetConfig, SubnetRunner, SupernetModel,
};
use crate::training::data::Dataset;
use crate::training::optim::{lr_at, Adam, AdamConfig};

/// Initialization of the supernet at the start of stage 2.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OfaInit {
    /// Continue from the stage-1 supernet (the two-stage recipe).
    Stage1Weights,
    /// Copy every same-named, same-shaped tensor of an outside checkpoint,
    /// typically the teacher itself.
    PretrainedExternal,
    /// Fresh seeded initialization.
    Random,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "d_stage")]
    pub stage: u8,
    #[serde(default = "d_steps")]
    pub steps: usize,
    #[serde(default = "d_batch")]
    pub batch_size: usize,
    /// Frames per training crop.
    #[serde(default = "d_seq")]
    pub sequence_length: usize,
    #[serde(default = "d_lr")]
    pub learning_rate: f64,
    #[serde(default = "d_warmup")]
    pub warmup_steps: usize,
    #[serde(default = "d_betas")]
    pub adam_betas: [f64; 2],
    #[serde(default = "d_eps")]
    pub adam_eps: f64,
    #[serde(default)]
    pub weight_decay: f64,
    /// Taken from the run-level seed.
    #[serde(skip)]
    pub seed: u64,
    #[serde(default)]
    pub init_checkpoint: Option<PathBuf>,
    #[serde(default = "d_init")]
    pub ofa_init: OfaInit,
    /// Synthetic training sequences.
    #[serde(default = "d_ntrain")]
    pub n_train: usize,
    /// Synthetic validation sequences.
    #[serde(default = "d_nval")]
    pub n_val: usize,
    /// Raw samples per synthetic sequence.
    #[serde(default = "d_len")]
    pub sample_length: usize,
}

fn d_stage() -> u8 {
    1
}
fn d_steps() -> usize {
    400
}
fn d_batch() -> usize {
    4
}
fn d_seq() -> usize {
    64
}
fn d_lr() -> f64 {
    2e-3
}
fn d_warmup() -> usize {
    40
}
fn d_betas() -> [f64; 2] {
    [0.9, 0.98]
}
fn d_eps() -> f64 {
    1e-6
}
fn d_init() -> OfaInit {
    OfaInit::Stage1Weights
}
fn d_ntrain() -> usize {
    64
}
fn d_nval() -> usize {
    16
}
fn d_len() -> usize {
    256
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            stage: d_stage(),
            steps: d_steps(),
            batch_size: d_batch(),
            sequence_length: d_seq(),
            learning_rate: d_lr(),
            warmup_steps: d_warmup(),
            adam_betas: d_betas(),
            adam_eps: d_eps(),
            weight_decay: 0.0,
            seed: 0,
            init_checkpoint: None,
            ofa_init: d_init(),
            n_train: d_ntrain(),
            n_val: d_nval(),
            sample_length: d_len(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(config_err(m));
        if !(self.stage == 1 || self.stage == 2) {
            return bad(format!("stage must be 1 or 2, got {}", self.stage));
        }
        if self.steps == 0 {
            return bad("steps must be positive".into());
        }
        if self.warmup_steps > self.steps {
            return bad(format!(
                "warmup_steps {} exceeds steps {}",
                self.warmup_steps, self.steps
            ));
        }
        if self.batch_size == 0 || self.sequence_length == 0 {
            return bad("batch_size and sequence_length must be positive".into());
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return bad(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            ));
        }
        if self.adam_betas.iter().any(|b| !(0.0..1.0).contains(b)) {
            return bad(format!(
                "adam_betas must lie in [0, 1), got {:?}",
                self.adam_betas
            ));
        }
        if !(self.adam_eps > 0.0) || !(self.weight_decay >= 0.0) {
            return bad("adam_eps must be positive and weight_decay non-negative".into());
        }
        if self.n_train == 0 || self.n_val == 0 || self.sample_length == 0 {
            return bad("n_train, n_val and sample_length must be positive".into());
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            beta1: self.adam_betas[0],
            beta2: self.adam_betas[1],
            eps: self.adam_eps,
            weight_decay: self.weight_decay,
        }
    }
}

/// One frontend-feature sequence and the regression target for every frame.
#[derive(Clone, Debug)]
pub struct Example {
    pub features: Tensor,
    pub targets: Tensor,
}

/// Frontend features and teacher targets, computed once per sequence.
#[derive(Clone, Debug)]
pub struct TrainCache {
    pub examples: Vec<Example>,
}

impl TrainCache {
    /// Contextualized teacher targets.
    pub fn distill(teacher: &TeacherModel, data: &Dataset, cfg: &TargetConfig) -> Result<Self> {
        data.require_usable("training")?;
        let examples = data
            .sequences
            .iter()
            .map(|s| {
                let features = teacher.frontend(s)?;
                let targets = teacher.targets_from_features(&features, cfg)?;
                Ok(Example { features, targets })
            })
            .collect::<Result<_>>()?;
        Ok(Self { examples })
    }

    /// Per-step standardized frontend features, the teacher warm-up target.
    pub fn pretext(teacher: &TeacherModel, data: &Dataset) -> Result<Self> {
        data.require_usable("training")?;
        let examples = data
            .sequences
            .iter()
            .map(|s| {
                let features = teacher.frontend(s)?;
                let d = features.last_dim();
                let (z, _) = standardize_raw(features.data(), d, LN_EPS);
                let targets = Tensor::new(features.shape().to_vec(), z)?;
                Ok(Example { features, targets })
            })
            .collect::<Result<_>>()?;
        Ok(Self { examples })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainRecord {
    pub step: usize,
    pub loss: f64,
    pub grad_norm: f64,
    pub lr: f64,
    pub config: SubnetConfig,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub records: Vec<TrainRecord>,
}

pub const LOG_HEADER: &str = "step,loss,grad_norm,lr,embed,depth,heads,ffn_ratios";

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mut s = String::from(LOG_HEADER);
        s.push('\n');
        for r in &self.records {
            let _ = writeln!(
                s,
                "{},{:e},{:e},{:e},{},{},{},{}",
                r.step,
                r.loss,
                r.grad_norm,
                r.lr,
                r.config.embed_dim,
                r.config.depth,
                r.config.heads_string(),
                r.config.ratios_string()
            );
        }
        s
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next() != Some(LOG_HEADER) {
            return Err(Error::Format("training log header mismatch".into()));
        }
        let mut records = Vec::new();
        for (i, line) in lines.enumerate().filter(|(_, l)| !l.is_empty()) {
            let bad = || Error::Format(format!("training log line {}: `{line}`", i + 2));
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 8 {
                return Err(bad());
            }
            let num = |k: usize| f[k].parse::<f64>().map_err(|_| bad());
            let config: SubnetConfig =
                format!("embed={},depth={},heads={},ffn={}", f[4], f[5], f[6], f[7])
                    .parse()
                    .map_err(|_| bad())?;
            records.push(TrainRecord {
                step: f[0].parse().map_err(|_| bad())?,
                loss: num(1)?,
                grad_norm: num(2)?,
                lr: num(3)?,
                config,
            });
        }
        Ok(Self { records })
    }
}

/// How each step chooses its architecture.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Sampling {
    /// Always the largest subnet.
    Largest,
    /// A fresh uniform draw per step.
    Random,
}

/// What one optimizer step did.
#[derive(Clone, Debug)]
pub struct StepReport {
    pub record: TrainRecord,
    /// Batch-mean gradient of every bound tensor, at full store shape.
    pub grads: IndexMap<String, Tensor>,
    pub extents: Vec<(String, Vec<usize>)>,
}

/// Single-threaded step-at-a-time trainer of a supernet.
///
/// Randomness comes from four streams of the configured seed: subnet sampling,
/// batch composition, and masking each own one, so changing the sampler never
/// changes which crops or masks a step sees.
pub struct Trainer {
    model: SupernetModel,
    cache: TrainCache,
    cfg: TrainConfig,
    mask: MaskSpec,
    reduction: L1Reduction,
    sampling: Sampling,
    adam: Adam,
    sample_rng: Rng,
    batch_rng: Rng,
    mask_rng: Rng,
    step: usize,
    log: TrainLog,
}

pub struct TrainOutcome {
    pub model: SupernetModel,
    pub log: TrainLog,
}

impl TrainOutcome {
    pub fn checkpoint(
        &self,
        stage: u8,
        seed: u64,
        config_digest: Option<String>,
        provenance: &str,
    ) -> Result<Checkpoint> {
        self.model.to_checkpoint(CheckpointMeta {
            role: Role::Supernet,
            space: self.model.space().clone(),
            subnet: None,
            stage: Some(stage),
            seed,
            config_digest,
            provenance: provenance.into(),
        })
    }
}

impl Trainer {
    pub fn new(
        model: SupernetModel,
        cache: TrainCache,
        cfg: &TrainConfig,
        mask: &MaskSpec,
        reduction: L1Reduction,
        sampling: Sampling,
    ) -> Result<Self> {
        cfg.validate()?;
        mask.validate()?;
        if mask.p == 0.0 {
            return Err(config_err("training needs a positive mask probability"));
        }
        if cache.examples.is_empty() {
            return Err(config_err("no training examples"));
        }
        let td = model.space().teacher_dim;
        if let Some(e) = cache.examples.iter().find(|e| e.targets.last_dim() != td) {
            return Err(Error::Dimension(format!(
                "targets are {} wide, the prediction head is {td}",
                e.targets.last_dim()
            )));
        }
        let seed = cfg.seed;
        Ok(Self {
            model,
            cache,
            cfg: cfg.clone(),
            mask: mask.clone(),
            reduction,
            sampling,
            adam: Adam::new(cfg.adam()),
            sample_rng: Rng::new(seed, streams::SAMPLE),
            batch_rng: Rng::new(seed, streams::BATCH),
            mask_rng: Rng::new(seed, streams::MASK),
            step: 0,
            log: TrainLog::default(),
        })
    }

    pub fn model(&self) -> &SupernetModel {
        &self.model
    }

    pub fn log(&self) -> &TrainLog {
        &self.log
    }

    pub fn steps_done(&self) -> usize {
        self.step
    }

    pub fn adam(&self) -> &Adam {
        &self.adam
    }

    pub fn step(&mut self) -> Result<StepReport> {
        let step = self.step;
        let space = self.model.space().clone();
        let config = match self.sampling {
            Sampling::Largest => max_subnet(&space),
            Sampling::Random => sample_subnet(&space, &mut self.sample_rng),
        };
        let extents = touched_extents(&space, &config);
        let view = self.model.view(&config)?;
        let batch = self.cfg.batch_size;
        let mut grads: IndexMap<String, Tensor> = IndexMap::new();
        let mut loss_sum = 0.0f64;
        for _ in 0..batch {
            let ex = &self.cache.examples[self.batch_rng.below(self.cache.examples.len())];
            let frames = ex.features.rows();
            let len = self.cfg.sequence_length.min(frames);
            let off = self.batch_rng.below(frames - len + 1);
            let feats = crop(&ex.features, off, len)?;
            let targets = crop(&ex.targets, off, len)?;
            let mask = sample_mask(len, &self.mask, &mut self.mask_rng)?;

            let mut g = Graph::new();
            let x = g.constant(feats);
            let (out, bound) = view.run(&mut g, x, Some(&mask), true)?;
            let loss = distill_loss(&mut g, out.head_out, &targets, &mask, self.reduction)?;
            loss_sum += g.value(loss).item()? as f64;
            g.backward_scaled(loss, 1.0 / batch as Real)?;
            for (name, leaf) in &bound.leaves {
                let Some(gr) = g.take_grad(*leaf) else {
                    continue;
                };
                match grads.get_mut(name) {
                    Some(acc) => acc
                        .data_mut()
                        .iter_mut()
                        .zip(gr.data())
                        .for_each(|(a, b)| *a += b),
                    None => {
                        grads.insert(name.clone(), gr);
                    }
                }
            }
        }
        let loss = loss_sum / batch as f64;
        let grad_norm = grads
            .values()
            .flat_map(|t| t.data())
            .map(|&v| (v as f64) * (v as f64))
            .sum::<f64>()
            .sqrt();
        if !loss.is_finite() || !grad_norm.is_finite() {
            return Err(Error::Divergence {
                step,
                detail: format!("loss {loss}, gradient norm {grad_norm}, subnet {config}"),
            });
        }
        let lr = lr_at(
            step,
            self.cfg.learning_rate,
            self.cfg.warmup_steps,
            self.cfg.steps,
        );
        self.adam
            .step(self.model.params_mut(), &grads, &extents, lr)?;
        let record = TrainRecord {
            step,
            loss,
            grad_norm,
            lr,
            config,
        };
        self.log.records.push(record.clone());
        self.step += 1;
        Ok(StepReport {
            record,
            grads,
            extents,
        })
    }

    /// Run the remaining configured steps.
    pub fn run(mut self) -> Result<TrainOutcome> {
        while self.step < self.cfg.steps {
            self.step()?;
        }
        Ok(TrainOutcome {
            model: self.model,
            log: self.log,
        })
    }
}

fn crop(t: &Tensor, off: usize, len: usize) -> Result<Tensor> {
    let d = t.last_dim();
    if off == 0 && len == t.rows() {
        return Ok(t.clone());
    }
    Tensor::new(vec![len, d], t.data()[off * d..(off + len) * d].to_vec())
}

/// Freshly initialized student sharing the teacher's frozen frontend.
pub fn init_student(
    space: &SearchSpace,
    seed: u64,
    teacher: &TeacherModel,
) -> Result<SupernetModel> {
    let mut model = build_supernet(space, &mut Rng::new(seed, streams::INIT))?;
    model.adopt_frontend(teacher.space(), teacher.model().params())?;
    Ok(model)
}

/// Stage 1: distill the largest architecture from scratch.
pub fn stage1_train(
    cfg: &TrainConfig,
    space: &SearchSpace,
    teacher: &TeacherModel,
    data: &Dataset,
    distill: &DistillConfig,
) -> Result<TrainOutcome> {
    if cfg.stage != 1 {
        return Err(config_err(format!(
            "stage1_train called with stage {}",
            cfg.stage
        )));
    }
    let model = init_student(space, cfg.seed, teacher)?;
    let cache = TrainCache::distill(teacher, data, &distill.target_config())?;
    Trainer::new(
        model,
        cache,
        cfg,
        &distill.mask_spec(),
        distill.l1_reduction,
        Sampling::Largest,
    )?
    .run()
}

/// Where stage 2 gets its starting weights; must agree with `TrainConfig::ofa_init`.
#[derive(Clone, Copy)]
pub enum Stage2Init<'a> {
    Stage1(&'a SupernetModel),
    External(&'a ParamSet),
    Random,
}

/// Copy every tensor of `src` whose name and shape match a store entry.
/// Frontend tensors are left alone. Returns the number copied.
pub fn copy_matching(model: &mut SupernetModel, src: &ParamSet) -> usize {
    let frontend: Vec<String> = frontend_shapes(model.space())
        .into_iter()
        .map(|(n, _)| n)
        .collect();
    let mut copied = 0;
    for (name, t) in model.params_mut().iter_mut() {
        if frontend.contains(name) {
            continue;
        }
        if let Some(s) = src.get(name) {
            if s.shape() == t.shape() {
                *t = s.clone();
                copied += 1;
            }
        }
    }
    copied
}

/// Stage 2: once-for-all training, one uniformly sampled subnet per step.
pub fn stage2_train(
    cfg: &TrainConfig,
    space: &SearchSpace,
    teacher: &TeacherModel,
    data: &Dataset,
    distill: &DistillConfig,
    init: Stage2Init<'_>,
) -> Result<TrainOutcome> {
    if cfg.stage != 2 {
        return Err(config_err(format!(
            "stage2_train called with stage {}",
            cfg.stage
        )));
    }
    let model = match (cfg.ofa_init, init) {
        (OfaInit::Stage1Weights, Stage2Init::Stage1(m)) => {
            if m.space() != space {
                return Err(config_err(
                    "stage-1 supernet was trained on a different space",
                ));
            }
            let mut m = m.clone();
            m.adopt_frontend(teacher.space(), teacher.model().params())?;
            m
        }
        (OfaInit::PretrainedExternal, Stage2Init::External(src)) => {
            let mut m = init_student(space, cfg.seed, teacher)?;
            if copy_matching(&mut m, src) == 0 {
                return Err(config_err(
                    "external checkpoint shares no tensor with the supernet",
                ));
            }
            m
        }
        (OfaInit::Random, Stage2Init::Random) => init_student(space, cfg.seed, teacher)?,
        (want, _) => {
            return Err(config_err(format!(
                "ofa_init = {want:?} needs a matching initialization source"
            )))
        }
    };
    let cache = TrainCache::distill(teacher, data, &distill.target_config())?;
    Trainer::new(
        model,
        cache,
        cfg,
        &distill.mask_spec(),
        distill.l1_reduction,
        Sampling::Random,
    )?
    .run()
}

/// Brief masked regression of the teacher onto its own standardized frontend
/// features, so its layers carry sequence context before it is frozen.
pub fn warm_up_teacher(
    teacher: &mut TeacherModel,
    data: &Dataset,
    cfg: &TrainConfig,
    mask: &MaskSpec,
) -> Result<TrainLog> {
    let model =
        SupernetModel::from_parts(teacher.space().clone(), teacher.model().params().clone())?;
    let cache = TrainCache::pretext(teacher, data)?;
    let out = Trainer::new(
        model,
        cache,
        cfg,
        mask,
        L1Reduction::Mean,
        Sampling::Largest,
    )?
    .run()?;
    *teacher.model_mut().params_mut() = out.model.params().clone();
    Ok(out.log)
}

/// Seed-initialized teacher (its own stream of `template.seed`), warmed up on
/// `data` for `distill.teacher_warmup_steps` steps when that is positive.
pub fn build_teacher(
    space: &SearchSpace,
    distill: &DistillConfig,
    template: &TrainConfig,
    data: Option<&Dataset>,
) -> Result<TeacherModel> {
    let mut rng = Rng::new(template.seed, streams::TEACHER);
    let mut teacher = TeacherModel::build(space, &distill.teacher, &mut rng)?;
    let steps = distill.teacher_warmup_steps;
    if steps > 0 {
        let data = data.ok_or_else(|| config_err("teacher warm-up needs training data"))?;
        let cfg = TrainConfig {
            stage: 1,
            steps,
            warmup_steps: steps / 10,
            learning_rate: distill.teacher_warmup_lr,
            ..template.clone()
        };
        warm_up_teacher(&mut teacher, data, &cfg, &distill.mask_spec())?;
    }
    Ok(teacher)
}

/// Masked regression loss of the teacher on its own standardized frontend
/// features, with masks from the evaluation stream of `seed`.
pub fn teacher_pretext_loss(
    teacher: &TeacherModel,
    data: &Dataset,
    mask: &MaskSpec,
    seed: u64,
) -> Result<f64> {
    let cache = TrainCache::pretext(teacher, data)?;
    let mut rng = Rng::new(seed, streams::EVAL_MASK);
    let masks = cache
        .examples
        .iter()
        .map(|e| sample_mask(e.features.rows(), mask, &mut rng))
        .collect::<Result<_>>()?;
    let eval = EvalSet {
        examples: cache.examples,
        masks,
    };
    evaluate_subnet(teacher.model(), &eval, L1Reduction::Mean)
}
