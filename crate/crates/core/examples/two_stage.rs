//! Two-stage supernet training against a single-stage baseline.
//!
//! Stage 1 trains only the largest subnet; stage 2 starts from it and samples
//! a random subnet per step. The baseline runs stage 2 from random weights.
//! All three are scored on the same middle-sized subnet.
//!
//! ```text
//! cargo run --release --example two_stage -- [STAGE1_STEPS] [STAGE2_STEPS] [SEED]
//! ```

use std::time::Instant;

use ofat::distillation::DistillConfig;
use ofat::search::{evaluate_config, EvalSet};
use ofat::supernet::{max_subnet, SearchSpace, SubnetConfig};
use ofat::training::{
    build_teacher, make_split, stage1_train, stage2_train, OfaInit, Stage2Init, TrainConfig,
    TrainLog,
};

fn arg(i: usize, default: u64) -> u64 {
    std::env::args()
        .nth(i)
        .map(|a| a.parse().expect("arguments are integers"))
        .unwrap_or(default)
}

fn quarters(log: &TrainLog) -> String {
    let l = &log.records;
    let n = l.len();
    (0..4)
        .map(|q| {
            let part = &l[q * n / 4..(q + 1) * n / 4];
            format!(
                "{:.4}",
                part.iter().map(|r| r.loss).sum::<f64>() / part.len().max(1) as f64
            )
        })
        .collect::<Vec<_>>()
        .join(" ")
}

fn main() -> ofat::Result<()> {
    let (s1, s2, seed) = (arg(1, 300) as usize, arg(2, 300) as usize, arg(3, 1));
    let space = SearchSpace::desk_small();
    let distill = DistillConfig::default();
    let (train, val) = make_split(seed, 64, 16, 256)?;
    let c1 = TrainConfig {
        steps: s1,
        warmup_steps: s1 / 10,
        seed,
        ..TrainConfig::default()
    };
    let t = Instant::now();
    let teacher = build_teacher(&space, &distill, &c1, None)?;
    let eval = EvalSet::new(&teacher, &val, &distill, seed, None)?;

    let st1 = stage1_train(&c1, &space, &teacher, &train, &distill)?;
    println!("stage 1 done  {:.1}s", t.elapsed().as_secs_f64());
    let c2 = TrainConfig {
        stage: 2,
        steps: s2,
        warmup_steps: s2 / 10,
        ofa_init: OfaInit::Stage1Weights,
        ..c1.clone()
    };
    let full = stage2_train(
        &c2,
        &space,
        &teacher,
        &train,
        &distill,
        Stage2Init::Stage1(&st1.model),
    )?;
    println!("stage 2 done  {:.1}s", t.elapsed().as_secs_f64());
    let c3 = TrainConfig {
        ofa_init: OfaInit::Random,
        ..c2.clone()
    };
    let rand = stage2_train(&c3, &space, &teacher, &train, &distill, Stage2Init::Random)?;
    println!("baseline done {:.1}s\n", t.elapsed().as_secs_f64());

    let r = distill.l1_reduction;
    let mid = SubnetConfig::preset("a_small", &space).unwrap();
    let max = max_subnet(&space);
    println!(
        "{:<14} {:>10} {:>10}  training loss by quarter",
        "", "a_small", "max"
    );
    for (name, out) in [
        ("stage 1 only", &st1),
        ("two-stage", &full),
        ("random init", &rand),
    ] {
        println!(
            "{name:<14} {:>10.4} {:>10.4}  {}",
            evaluate_config(&out.model, &mid, &eval, r)?,
            evaluate_config(&out.model, &max, &eval, r)?,
            quarters(&out.log)
        );
    }
    Ok(())
}
