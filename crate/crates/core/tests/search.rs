mod common;

use common::fixture;
use ofat::distillation::L1Reduction;
use ofat::search::{
    evaluate_config, evaluate_subnet, parse_scatter, random_search, report_scatter,
    sample_candidates, EvalSet, SearchBudget, SearchResult, SearchSummary,
};
use ofat::supernet::{count_params, max_subnet, min_subnet, SupernetModel};
use ofat::training::init_student;
use ofat::Error;

struct Setup {
    model: SupernetModel,
    eval: EvalSet,
    top: u64,
    floor: u64,
}

fn setup(seed: u64) -> Setup {
    let fx = fixture(seed, 1);
    let model = init_student(&fx.space, seed, &fx.teacher).unwrap();
    let eval = EvalSet::new(&fx.teacher, &fx.val, &fx.distill, seed, None).unwrap();
    let top = count_params(&fx.space, &max_subnet(&fx.space), false, true)
        .unwrap()
        .total;
    let floor = count_params(&fx.space, &min_subnet(&fx.space), false, true)
        .unwrap()
        .total;
    Setup {
        model,
        eval,
        top,
        floor,
    }
}

fn budget(max_params: u64, n: usize, seed: u64) -> SearchBudget {
    SearchBudget {
        max_params,
        n_candidates: n,
        eval_batches: 3,
        seed,
        includes_frontend: false,
        includes_head: true,
    }
}

fn search(s: &Setup, b: &SearchBudget, workers: usize) -> SearchResult {
    random_search(&s.model, b, &s.eval, L1Reduction::Mean, workers).unwrap()
}

#[test]
fn ranking_is_sorted_within_budget_and_reproducible() {
    let s = setup(1);
    let b = budget((s.floor + s.top) / 2, 40, 1);
    let r = search(&s, &b, 1);
    assert_eq!(r.ranked.len(), 40);
    assert!(r.ranked.windows(2).all(|w| w[0].loss <= w[1].loss));
    assert!(r.ranked.iter().all(|c| c.params <= b.max_params));
    assert!(r.best().loss <= r.median_loss());
    assert!(r.attempts >= 40 && r.acceptance_rate() <= 1.0);
    assert_eq!(r, search(&s, &b, 1));
    assert_eq!(r, search(&s, &b, 3));
}

#[test]
fn best_under_is_monotone_in_the_budget() {
    let s = setup(2);
    let r = search(&s, &budget(s.top, 60, 2), 1);
    let mut last = f64::INFINITY;
    for step in 0..=10 {
        let cap = s.floor + (s.top - s.floor) * step / 10;
        if let Some(c) = r.best_under(cap) {
            assert!(c.params <= cap);
            assert!(c.loss <= last);
            last = c.loss;
        }
    }
    assert_eq!(r.best_under(s.top).unwrap(), r.best());
}

#[test]
fn bounds_are_the_extreme_subnets() {
    let s = setup(3);
    let r = search(&s, &budget(s.top, 10, 3), 1);
    let space = s.model.space();
    assert_eq!(r.min_bound.config, min_subnet(space));
    assert_eq!(r.max_bound.config, max_subnet(space));
    assert_eq!((r.min_bound.params, r.max_bound.params), (s.floor, s.top));
    let direct = evaluate_config(&s.model, &max_subnet(space), &s.eval, L1Reduction::Mean).unwrap();
    assert_eq!(r.max_bound.loss, direct);
}

#[test]
fn supernet_and_extracted_scores_agree() {
    let s = setup(4);
    let r = search(&s, &budget(s.top, 12, 4), 1);
    let space = s.model.space();
    for c in &r.ranked {
        let extracted = s.model.extract_subnet(&c.config).unwrap();
        let loss = evaluate_subnet(&extracted, &s.eval, L1Reduction::Mean).unwrap();
        assert!(
            (loss - c.loss).abs() <= 1e-6 * c.loss.abs().max(1.0),
            "{}",
            c.config
        );
        assert_eq!(
            extracted.param_count(),
            c.params + space.frontend.param_count()
        );
    }
}

#[test]
fn scatter_has_candidates_then_bounds_and_reparses() {
    let s = setup(5);
    let r = search(&s, &budget(s.top, 15, 5), 1);
    let csv = report_scatter(&r);
    let rows = parse_scatter(&csv).unwrap();
    assert_eq!(rows.len(), 17);
    assert_eq!(csv.lines().count(), 18);
    for (row, c) in rows.iter().zip(&r.ranked) {
        assert_eq!(row.tag, "candidate");
        assert_eq!((row.params, row.loss), (c.params, c.loss));
        assert_eq!((row.embed, row.depth), (c.config.embed_dim, c.config.depth));
    }
    assert_eq!(rows[15].tag, "min");
    assert_eq!(rows[16].tag, "max");
    assert!(parse_scatter("loss,params\n").is_err());

    let summary = SearchSummary::new(&r, Some("abc".into()));
    assert_eq!(summary.best, r.best().config.to_string());
    let json = serde_json::to_string(&summary).unwrap();
    assert_eq!(
        serde_json::from_str::<SearchSummary>(&json).unwrap(),
        summary
    );
}

#[test]
fn infeasible_budgets_are_reported() {
    let s = setup(6);
    let space = s.model.space();
    assert!(matches!(
        sample_candidates(space, &budget(s.floor - 1, 5, 6)),
        Err(Error::Config(_))
    ));
    let err = sample_candidates(space, &budget(s.floor, 20, 6))
        .err()
        .unwrap();
    match err {
        Error::BudgetInfeasible {
            requested,
            accepted,
            attempts,
            ..
        } => {
            assert_eq!(requested, 20);
            assert!(accepted < 20);
            assert_eq!(attempts, 2000);
        }
        other => panic!("{other}"),
    }
}

#[test]
fn different_seeds_draw_different_candidates() {
    let s = setup(7);
    let space = s.model.space();
    let (a, _) = sample_candidates(space, &budget(s.top, 30, 1)).unwrap();
    let (b, _) = sample_candidates(space, &budget(s.top, 30, 2)).unwrap();
    assert_ne!(a, b);
}
