//! Budgeted random search over a trained supernet.
//!
//! Candidates are rejection-sampled from the same uniform sampler used in
//! training, so the budget filters the training distribution instead of
//! reshaping it. Every candidate is scored with the masked distillation loss on
//! a validation set whose masks are drawn once and shared by all candidates.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::distillation::{distill_loss, sample_mask, DistillConfig, L1Reduction, TeacherModel};
use crate::error::{config_err, Error, Result};
use crate::numerics::{rng::streams, Graph, Rng};
use crate::supernet::{
    count_params, max_subnet, min_subnet, sample_subnet, SearchSpace, SubnetConfig, SubnetRunner,
    SupernetModel,
};
use crate::training::{Dataset, Example};

/// Attempts allowed per requested candidate before giving up.
pub const ATTEMPT_FACTOR: usize = 100;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SearchBudget {
    pub max_params: u64,
    #[serde(default = "d_candidates")]
    pub n_candidates: usize,
    /// Validation sequences scored per candidate, taken from the front.
    #[serde(default = "d_eval")]
    pub eval_batches: usize,
    /// Taken from the run-level seed.
    #[serde(skip)]
    pub seed: u64,
    #[serde(default)]
    pub includes_frontend: bool,
    #[serde(default = "d_true")]
    pub includes_head: bool,
}

fn d_candidates() -> usize {
    1000
}
fn d_eval() -> usize {
    4
}
fn d_true() -> bool {
    true
}

impl SearchBudget {
    pub fn params_of(&self, space: &SearchSpace, config: &SubnetConfig) -> Result<u64> {
        Ok(count_params(space, config, self.includes_frontend, self.includes_head)?.total)
    }

    pub fn validate(&self, space: &SearchSpace) -> Result<()> {
        if self.n_candidates == 0 || self.eval_batches == 0 {
            return Err(config_err("n_candidates and eval_batches must be positive"));
        }
        let floor = self.params_of(space, &min_subnet(space))?;
        if self.max_params < floor {
            return Err(config_err(format!(
                "budget of {} parameters is below the smallest subnet ({floor})",
                self.max_params
            )));
        }
        Ok(())
    }
}

/// Validation sequences with teacher targets and one fixed mask each.
#[derive(Clone, Debug)]
pub struct EvalSet {
    pub examples: Vec<Example>,
    pub masks: Vec<Vec<usize>>,
}

impl EvalSet {
    /// The first `limit` sequences of `data` (all when `None`), masks drawn from
    /// the evaluation stream of `seed`.
    pub fn new(
        teacher: &TeacherModel,
        data: &Dataset,
        distill: &DistillConfig,
        seed: u64,
        limit: Option<usize>,
    ) -> Result<Self> {
        data.require_usable("validation")?;
        let mask = distill.mask_spec();
        if mask.p == 0.0 {
            return Err(config_err("evaluation needs a positive mask probability"));
        }
        let cfg = distill.target_config();
        let n = limit.unwrap_or(data.len()).min(data.len());
        let mut rng = Rng::new(seed, streams::EVAL_MASK);
        let mut examples = Vec::with_capacity(n);
        let mut masks = Vec::with_capacity(n);
        for s in &data.sequences[..n] {
            let features = teacher.frontend(s)?;
            let targets = teacher.targets_from_features(&features, &cfg)?;
            masks.push(sample_mask(features.rows(), &mask, &mut rng)?);
            examples.push(Example { features, targets });
        }
        Ok(Self { examples, masks })
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }
}

/// Mean masked distillation loss of one architecture over `eval`. No weights change.
pub fn evaluate_subnet<R: SubnetRunner + ?Sized>(
    runner: &R,
    eval: &EvalSet,
    reduction: L1Reduction,
) -> Result<f64> {
    if eval.is_empty() {
        return Err(config_err("empty evaluation set"));
    }
    let mut total = 0.0f64;
    for (ex, mask) in eval.examples.iter().zip(&eval.masks) {
        let mut g = Graph::new();
        let x = g.constant(ex.features.clone());
        let (out, _) = runner.run(&mut g, x, Some(mask), false)?;
        let loss = distill_loss(&mut g, out.head_out, &ex.targets, mask, reduction)?;
        total += g.value(loss).item()? as f64;
    }
    Ok(total / eval.len() as f64)
}

/// Loss of `config` as a view of `model`.
pub fn evaluate_config(
    model: &SupernetModel,
    config: &SubnetConfig,
    eval: &EvalSet,
    reduction: L1Reduction,
) -> Result<f64> {
    evaluate_subnet(&model.view(config)?, eval, reduction)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Candidate {
    /// Position in the accepted sample stream; breaks loss ties.
    pub index: usize,
    pub config: SubnetConfig,
    pub params: u64,
    pub loss: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SearchResult {
    /// Sorted by ascending loss, ties by index.
    pub ranked: Vec<Candidate>,
    pub min_bound: Candidate,
    pub max_bound: Candidate,
    pub budget: SearchBudget,
    pub attempts: usize,
}

impl SearchResult {
    pub fn best(&self) -> &Candidate {
        &self.ranked[0]
    }

    pub fn acceptance_rate(&self) -> f64 {
        self.ranked.len() as f64 / self.attempts as f64
    }

    pub fn median_loss(&self) -> f64 {
        self.ranked[(self.ranked.len() - 1) / 2].loss
    }

    /// Lowest loss among candidates within `max_params`.
    pub fn best_under(&self, max_params: u64) -> Option<&Candidate> {
        self.ranked.iter().find(|c| c.params <= max_params)
    }
}

/// Accepted configs and the attempt count, without evaluating anything.
pub fn sample_candidates(
    space: &SearchSpace,
    budget: &SearchBudget,
) -> Result<(Vec<SubnetConfig>, usize)> {
    budget.validate(space)?;
    let mut rng = Rng::new(budget.seed, streams::SEARCH);
    let cap = ATTEMPT_FACTOR * budget.n_candidates;
    let mut accepted = Vec::with_capacity(budget.n_candidates);
    let mut attempts = 0;
    while accepted.len() < budget.n_candidates {
        if attempts == cap {
            return Err(Error::BudgetInfeasible {
                requested: budget.n_candidates,
                accepted: accepted.len(),
                attempts,
                rate: accepted.len() as f64 / attempts as f64,
            });
        }
        attempts += 1;
        let c = sample_subnet(space, &mut rng);
        if budget.params_of(space, &c)? <= budget.max_params {
            accepted.push(c);
        }
    }
    Ok((accepted, attempts))
}

/// Score `configs` in parallel on `workers` threads (1 = in place).
pub fn score_all(
    model: &SupernetModel,
    configs: &[SubnetConfig],
    eval: &EvalSet,
    reduction: L1Reduction,
    workers: usize,
) -> Result<Vec<f64>> {
    let one = |c: &SubnetConfig| evaluate_config(model, c, eval, reduction);
    if workers <= 1 {
        return configs.iter().map(one).collect();
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| config_err(format!("worker pool: {e}")))?;
    pool.install(|| configs.par_iter().map(one).collect())
}

/// Rejection-sample `n_candidates` budget-respecting subnets, score each, rank
/// them, and score the smallest and largest subnets as bounds.
pub fn random_search(
    model: &SupernetModel,
    budget: &SearchBudget,
    eval: &EvalSet,
    reduction: L1Reduction,
    workers: usize,
) -> Result<SearchResult> {
    let space = model.space();
    let (configs, attempts) = sample_candidates(space, budget)?;
    let losses = score_all(model, &configs, eval, reduction, workers)?;
    let mut ranked = Vec::with_capacity(configs.len());
    for (index, (config, loss)) in configs.into_iter().zip(losses).enumerate() {
        let params = budget.params_of(space, &config)?;
        if params > budget.max_params {
            return Err(Error::Contract(format!(
                "candidate {config} exceeds the budget"
            )));
        }
        ranked.push(Candidate {
            index,
            config,
            params,
            loss,
        });
    }
    ranked.sort_by(|a, b| a.loss.total_cmp(&b.loss).then(a.index.cmp(&b.index)));
    let bound = |config: SubnetConfig| -> Result<Candidate> {
        Ok(Candidate {
            index: usize::MAX,
            params: budget.params_of(space, &config)?,
            loss: evaluate_config(model, &config, eval, reduction)?,
            config,
        })
    };
    Ok(SearchResult {
        ranked,
        min_bound: bound(min_subnet(space))?,
        max_bound: bound(max_subnet(space))?,
        budget: budget.clone(),
        attempts,
    })
}

pub const SCATTER_HEADER: &str = "params,loss,embed,depth,tag";

#[derive(Clone, Debug, PartialEq)]
pub struct ScatterRow {
    pub params: u64,
    pub loss: f64,
    pub embed: usize,
    pub depth: usize,
    pub tag: String,
}

/// Ranked candidates tagged `candidate`, then the `min` and `max` bounds.
pub fn report_scatter(result: &SearchResult) -> String {
    let mut s = String::from(SCATTER_HEADER);
    s.push('\n');
    let rows = result
        .ranked
        .iter()
        .map(|c| (c, "candidate"))
        .chain([(&result.min_bound, "min"), (&result.max_bound, "max")]);
    for (c, tag) in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{tag}",
            c.params, c.loss, c.config.embed_dim, c.config.depth
        );
    }
    s
}

pub fn parse_scatter(text: &str) -> Result<Vec<ScatterRow>> {
    let mut lines = text.lines();
    if lines.next() != Some(SCATTER_HEADER) {
        return Err(Error::Format("scatter CSV header mismatch".into()));
    }
    lines
        .filter(|l| !l.is_empty())
        .map(|line| {
            let bad = || Error::Format(format!("scatter CSV row `{line}`"));
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 5 {
                return Err(bad());
            }
            Ok(ScatterRow {
                params: f[0].parse().map_err(|_| bad())?,
                loss: f[1].parse().map_err(|_| bad())?,
                embed: f[2].parse().map_err(|_| bad())?,
                depth: f[3].parse().map_err(|_| bad())?,
                tag: f[4].to_string(),
            })
        })
        .collect()
}

/// Structured summary stored next to the scatter CSV.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchSummary {
    pub best: String,
    pub best_params: u64,
    pub best_loss: f64,
    pub min_subnet_loss: f64,
    pub max_subnet_loss: f64,
    pub max_params: u64,
    pub n_candidates: usize,
    pub attempts: usize,
    pub acceptance_rate: f64,
    pub seed: u64,
    pub config_digest: Option<String>,
}

impl SearchSummary {
    pub fn new(result: &SearchResult, config_digest: Option<String>) -> Self {
        let best = result.best();
        Self {
            best: best.config.to_string(),
            best_params: best.params,
            best_loss: best.loss,
            min_subnet_loss: result.min_bound.loss,
            max_subnet_loss: result.max_bound.loss,
            max_params: result.budget.max_params,
            n_candidates: result.ranked.len(),
            attempts: result.attempts,
            acceptance_rate: result.acceptance_rate(),
            seed: result.budget.seed,
            config_digest,
        }
    }
}
