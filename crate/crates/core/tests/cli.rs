use std::path::Path;
use std::process::Command;

use ofat::cli::{exit_code, main_with};
use ofat::search::parse_scatter;
use ofat::training::TrainLog;

const TINY: &str = r#"
seed = 5

[space]
embed_dims = [16, 24]
head_choices = [2, 3]
ffn_ratios = [2.0, 3.0]
depths = [1, 2]
head_dim = 8
conv_groups = 4
conv_kernel = 5
frontend_dim = 16
teacher_dim = 32

[[space.frontend.layers]]
channels = 16
kernel = 4
stride = 4

[train]
steps = 6
batch_size = 2
sequence_length = 16
warmup_steps = 2
n_train = 4
n_val = 2
sample_length = 96

[distill]
k = 2

[distill.teacher]
embed_dim = 32
heads = 4
ffn_ratio = 2.0
depth = 2

[search]
max_params = 60000
n_candidates = 12
eval_batches = 2
"#;

fn run(args: &[&str]) -> (i32, String, String) {
    let mut out = Vec::new();
    let mut err = Vec::new();
    let argv = std::iter::once("ofat").chain(args.iter().copied());
    let code = main_with(argv, &mut out, &mut err);
    (
        code,
        String::from_utf8(out).unwrap(),
        String::from_utf8(err).unwrap(),
    )
}

fn p(dir: &Path, name: &str) -> String {
    dir.join(name).to_string_lossy().into_owned()
}

#[test]
fn counts_match_the_published_spaces() {
    let (code, out, _) = run(&["count", "--space", "paper_small", "--subnets"]);
    assert_eq!(code, 0);
    assert_eq!(out.trim(), "subnets: 951892141473");
    let (_, out, _) = run(&["count", "--space", "paper_base", "--subnets"]);
    assert_eq!(out.trim(), "subnets: 6530347008");
    let (code, out, _) = run(&[
        "count",
        "--space",
        "paper_base",
        "--params",
        "--subnet-spec",
        "max",
        "--with-frontend",
        "--no-head",
    ]);
    assert_eq!(code, 0);
    assert!(out.starts_with("params: 94370560\n"), "{out}");
    let (_, out, _) = run(&[
        "count",
        "--space",
        "desk_small",
        "--params",
        "--subnet-spec",
        "min",
    ]);
    assert!(out.starts_with("params: 26336\n"), "{out}");
}

#[test]
fn usage_and_config_errors_exit_with_two() {
    let (code, out, _) = run(&["--help"]);
    assert_eq!(code, 0);
    for sub in [
        "gen-data",
        "init-teacher",
        "train",
        "search",
        "extract",
        "count",
        "eval",
    ] {
        assert!(out.contains(sub), "{sub} missing from help");
    }
    assert_eq!(run(&["frobnicate"]).0, 2);
    assert_eq!(run(&["train", "--stage", "3", "--out", "x"]).0, 2);
    let (code, _, err) = run(&["count", "--space", "nope"]);
    assert_eq!(code, 2);
    assert!(err.contains("unknown space"));
    let (code, _, err) = run(&["count", "--config", "/no/such/config.toml"]);
    assert_eq!(code, 2);
    assert!(
        err.starts_with("error: configuration error: ") && err.contains("/no/such/config.toml"),
        "{err}"
    );
    let (code, _, _) = run(&[
        "count",
        "--space",
        "desk_small",
        "--params",
        "--subnet-spec",
        "embed=7",
    ]);
    assert_eq!(code, 2);
}

#[test]
fn error_kinds_map_to_exit_codes() {
    let infeasible = ofat::Error::BudgetInfeasible {
        requested: 10,
        accepted: 1,
        attempts: 1000,
        rate: 0.001,
    };
    assert_eq!(exit_code(&infeasible), 4);
    assert_eq!(exit_code(&ofat::Error::Config("x".into())), 2);
    assert_eq!(exit_code(&ofat::Error::Format("x".into())), 3);
}

#[test]
fn binary_reports_exit_codes() {
    let bin = env!("CARGO_BIN_EXE_ofat");
    let ok = Command::new(bin)
        .args(["count", "--space", "desk_small"])
        .output()
        .unwrap();
    assert!(ok.status.success());
    assert_eq!(String::from_utf8_lossy(&ok.stdout).trim(), "subnets: 22113");
    let bad = Command::new(bin)
        .args(["count", "--space", "nope"])
        .output()
        .unwrap();
    assert_eq!(bad.status.code(), Some(2));
}

#[test]
fn whole_pipeline_in_a_scratch_directory() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = p(d, "tiny.toml");
    std::fs::write(&cfg, TINY).unwrap();
    let teacher = p(d, "teacher.ofat");
    let train = p(d, "train.ofad");
    let val = p(d, "val.ofad");

    let (code, _, err) = run(&["gen-data", "--config", &cfg, "--out", &p(d, "")]);
    assert_eq!(code, 0, "{err}");
    assert!(d.join("train.ofad").exists() && d.join("val.ofad.meta.json").exists());

    let (code, _, err) = run(&[
        "init-teacher",
        "--config",
        &cfg,
        "--out",
        &teacher,
        "--data",
        &train,
    ]);
    assert_eq!(code, 0, "{err}");

    let common = [
        "--config",
        cfg.as_str(),
        "--teacher",
        teacher.as_str(),
        "--data",
        train.as_str(),
    ];
    let s1 = p(d, "s1.ofat");
    let mut args = vec!["train", "--stage", "1", "--out", &s1];
    args.extend(common);
    let (code, _, err) = run(&args);
    assert_eq!(code, 0, "{err}");
    let log = std::fs::read_to_string(format!("{s1}.log.csv")).unwrap();
    assert_eq!(TrainLog::from_csv(&log).unwrap().records.len(), 6);

    let s2 = p(d, "s2.ofat");
    let mut args = vec!["train", "--stage", "2", "--out", &s2];
    args.extend(common);
    let (code, _, err) = run(&args);
    assert_eq!(code, 2, "stage 2 without --init must be rejected");
    assert!(err.contains("init"), "{err}");
    args.extend(["--init", s1.as_str()]);
    let (code, _, err) = run(&args);
    assert_eq!(code, 0, "{err}");

    let scatter = p(d, "scatter.csv");
    let search_args = |budget: &'static str| {
        let mut a = vec![
            "search",
            "--config",
            &cfg,
            "--checkpoint",
            &s2,
            "--out",
            &scatter,
        ];
        a.extend([
            "--teacher",
            &teacher,
            "--data",
            &val,
            "--max-params",
            budget,
        ]);
        a.iter().map(|s| s.to_string()).collect::<Vec<_>>()
    };
    let a = search_args("60000");
    let (code, out, err) = run(&a.iter().map(String::as_str).collect::<Vec<_>>());
    assert_eq!(code, 0, "{err}");
    assert!(out.contains("best: "));
    let rows = parse_scatter(&std::fs::read_to_string(&scatter).unwrap()).unwrap();
    assert_eq!(rows.len(), 14);
    assert!(d.join("scatter.csv.summary.json").exists());

    let a = search_args("100");
    let (code, _, err) = run(&a.iter().map(String::as_str).collect::<Vec<_>>());
    assert_eq!(code, 2, "{err}");

    let sub = p(d, "sub.ofat");
    let spec = "embed=16,depth=1,heads=2,ffn=2";
    let (code, out, err) = run(&[
        "extract",
        "--checkpoint",
        &s2,
        "--subnet-spec",
        spec,
        "--out",
        &sub,
    ]);
    assert_eq!(code, 0, "{err}");
    assert!(out.contains("max abs diff vs supernet 0e0"), "{out}");

    let (_, a, _) = run(&[
        "eval",
        "--config",
        &cfg,
        "--checkpoint",
        &sub,
        "--data",
        &val,
        "--teacher",
        &teacher,
    ]);
    let (_, b, _) = run(&[
        "eval",
        "--config",
        &cfg,
        "--checkpoint",
        &s2,
        "--subnet-spec",
        spec,
        "--data",
        &val,
        "--teacher",
        &teacher,
    ]);
    assert!(a.starts_with("loss "), "{a}");
    assert_eq!(a, b);
    let (code, _, _) = run(&[
        "eval",
        "--config",
        &cfg,
        "--checkpoint",
        &s2,
        "--data",
        &val,
        "--teacher",
        &teacher,
    ]);
    assert_eq!(code, 2);
}
