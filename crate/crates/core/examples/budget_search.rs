//! Random search for the best subnet under a parameter budget.
//!
//! A briefly trained supernet is scored on held-out masked distillation loss;
//! the ranking, the budget frontier and the scatter CSV are printed.
//!
//! ```text
//! cargo run --release --example budget_search -- [MAX_PARAMS] [CANDIDATES]
//! ```

use ofat::distillation::DistillConfig;
use ofat::search::{random_search, report_scatter, EvalSet, SearchBudget};
use ofat::supernet::{count_params, max_subnet, min_subnet, SearchSpace};
use ofat::training::{
    build_teacher, make_split, stage1_train, stage2_train, OfaInit, Stage2Init, TrainConfig,
};

fn main() -> ofat::Result<()> {
    let mut args = std::env::args()
        .skip(1)
        .map(|a| a.parse::<u64>().expect("integer argument"));
    let max_params = args.next().unwrap_or(150_000);
    let n_candidates = args.next().unwrap_or(200) as usize;
    let seed = 2;

    let space = SearchSpace::desk_small();
    let distill = DistillConfig::default();
    let (train, val) = make_split(seed, 32, 8, 256)?;
    let c1 = TrainConfig {
        steps: 60,
        warmup_steps: 6,
        seed,
        ..TrainConfig::default()
    };
    let teacher = build_teacher(&space, &distill, &c1, None)?;
    let s1 = stage1_train(&c1, &space, &teacher, &train, &distill)?;
    let c2 = TrainConfig {
        stage: 2,
        ofa_init: OfaInit::Stage1Weights,
        ..c1.clone()
    };
    let model = stage2_train(
        &c2,
        &space,
        &teacher,
        &train,
        &distill,
        Stage2Init::Stage1(&s1.model),
    )?
    .model;

    let floor = count_params(&space, &min_subnet(&space), false, true)?.total;
    let top = count_params(&space, &max_subnet(&space), false, true)?.total;
    println!("space spans {floor}..{top} parameters, budget {max_params}");

    let budget = SearchBudget {
        max_params,
        n_candidates,
        eval_batches: 4,
        seed,
        includes_frontend: false,
        includes_head: true,
    };
    let eval = EvalSet::new(&teacher, &val, &distill, seed, Some(budget.eval_batches))?;
    let workers = std::thread::available_parallelism().map_or(1, |n| n.get());
    let result = random_search(&model, &budget, &eval, distill.l1_reduction, workers)?;

    println!(
        "{} candidates, acceptance rate {:.2}, median loss {:.4}",
        result.ranked.len(),
        result.acceptance_rate(),
        result.median_loss()
    );
    println!("top 5:");
    for c in result.ranked.iter().take(5) {
        println!("  {:.4} {:>8}  {}", c.loss, c.params, c.config);
    }
    println!(
        "bounds: min {:.4}, max {:.4}",
        result.min_bound.loss, result.max_bound.loss
    );
    println!("best under each tenth of the budget:");
    for tenth in 1..=10 {
        let cap = max_params * tenth / 10;
        if let Some(c) = result.best_under(cap) {
            println!("  <= {cap:>8}: {:.4} ({} params)", c.loss, c.params);
        }
    }
    let csv = report_scatter(&result);
    println!("\nscatter head:");
    for line in csv.lines().take(4) {
        println!("  {line}");
    }
    Ok(())
}
