//! The `ofat` command line.
//!
//! Exit codes: 0 success, 2 configuration error, 3 runtime error or training
//! divergence, 4 infeasible search budget.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::config::{hex_digest, RunConfig, Sidecar};
use crate::distillation::TeacherModel;
use crate::error::{config_err, Error, Result};
use crate::numerics::{rng::streams, Real, Rng};
use crate::search::{evaluate_subnet, random_search, report_scatter, EvalSet, SearchSummary};
use crate::supernet::{
    count_params, count_subnets, Checkpoint, CheckpointMeta, Role, StandaloneModel, SubnetConfig,
    SubnetRunner, SupernetModel,
};
use crate::training::{
    build_teacher, make_split, stage1_train, stage2_train, Dataset, OfaInit, Stage2Init,
    TrainConfig,
};

#[derive(Debug, Parser)]
#[command(
    name = "ofat",
    version,
    about = "Once-for-all Transformer supernets: train, search, extract"
)]
pub struct Cli {
    /// Threads for search evaluation. 1 keeps every command single-threaded.
    #[arg(long, global = true, env = "OFAT_WORKERS", default_value_t = 1)]
    pub workers: usize,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct ConfigArg {
    /// Run configuration (TOML). Omitted sections take their defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

impl ConfigArg {
    fn load(&self) -> Result<RunConfig> {
        match &self.config {
            Some(p) => RunConfig::load(p),
            None => Ok(RunConfig::default()),
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write the synthetic train and validation datasets.
    GenData {
        #[command(flatten)]
        config: ConfigArg,
        /// Output directory; defaults to the directories in `[paths]`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Build (and optionally warm up) the frozen teacher.
    InitTeacher {
        #[command(flatten)]
        config: ConfigArg,
        /// Teacher checkpoint path; defaults to `paths.teacher`.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Training data for the warm-up; defaults to `paths.train_data`.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Run training stage 1 (largest subnet) or 2 (random subnet per step).
    Train {
        #[command(flatten)]
        config: ConfigArg,
        /// 1 trains the largest subnet only; 2 samples a subnet per step.
        #[arg(long, value_parser = clap::value_parser!(u8).range(1..=2))]
        stage: u8,
        /// Stage-2 initialization checkpoint (stage-1 supernet or external).
        #[arg(long)]
        init: Option<PathBuf>,
        /// Supernet checkpoint to write. The log goes to `<out>.log.csv`.
        #[arg(long)]
        out: PathBuf,
        /// Teacher checkpoint; defaults to `paths.teacher`.
        #[arg(long)]
        teacher: Option<PathBuf>,
        /// Training data; defaults to `paths.train_data`.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Budgeted random search; writes the scatter CSV and `<out>.summary.json`.
    Search {
        #[command(flatten)]
        config: ConfigArg,
        /// Trained supernet checkpoint.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Overrides `search.max_params`.
        #[arg(long)]
        max_params: Option<u64>,
        /// Scatter CSV to write.
        #[arg(long)]
        out: PathBuf,
        /// Teacher checkpoint; defaults to `paths.teacher`.
        #[arg(long)]
        teacher: Option<PathBuf>,
        /// Validation data; defaults to `paths.val_data`.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Copy one subnet out of a supernet into a standalone checkpoint.
    Extract {
        /// Supernet checkpoint.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Preset (`a_base`, `a_small`, `min`, `max`) or `embed=..,depth=..,heads=..,ffn=..`.
        #[arg(long)]
        subnet_spec: String,
        /// Standalone subnet checkpoint to write.
        #[arg(long)]
        out: PathBuf,
    },
    /// Exact subnet or parameter counts for the configured space.
    Count {
        #[command(flatten)]
        config: ConfigArg,
        /// Named space instead of the config's: paper_small, paper_base, desk_small, desk_base.
        #[arg(long)]
        space: Option<String>,
        /// Count the architectures in the space.
        #[arg(long, conflicts_with = "params")]
        subnets: bool,
        /// Count the parameters of `--subnet-spec`.
        #[arg(long, requires = "subnet_spec")]
        params: bool,
        /// Preset or explicit spec, as for `extract`.
        #[arg(long)]
        subnet_spec: Option<String>,
        /// Count the frozen frontend too.
        #[arg(long)]
        with_frontend: bool,
        /// Leave out the prediction head.
        #[arg(long)]
        no_head: bool,
    },
    /// Validation distillation loss of one subnet.
    Eval {
        #[command(flatten)]
        config: ConfigArg,
        /// Supernet or extracted subnet checkpoint.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Required for supernets; ignored for extracted subnets.
        #[arg(long)]
        subnet_spec: Option<String>,
        /// Dataset to score on.
        #[arg(long)]
        data: PathBuf,
        /// Teacher checkpoint; defaults to `paths.teacher`.
        #[arg(long)]
        teacher: Option<PathBuf>,
    },
}

/// Process exit code for an error.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) => 2,
        Error::BudgetInfeasible { .. } => 4,
        _ => 3,
    }
}

/// Parse `args` (program name first) and run, writing reports to `out`.
/// Returns the exit code; usage errors print clap's message and return 2.
pub fn main_with<I, S>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            if e.use_stderr() {
                let _ = write!(err, "{e}");
                return 2;
            }
            let _ = write!(out, "{e}");
            return 0;
        }
    };
    match run(&cli, out) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            exit_code(&e)
        }
    }
}

pub fn run(cli: &Cli, out: &mut dyn Write) -> Result<()> {
    match &cli.command {
        Command::GenData { config, out: dir } => gen_data(&config.load()?, dir.as_deref(), out),
        Command::InitTeacher {
            config,
            out: path,
            data,
        } => {
            let cfg = config.load()?;
            let path = path.clone().unwrap_or(cfg.paths.teacher.clone());
            init_teacher(&cfg, &path, data.as_deref(), out)
        }
        Command::Train {
            config,
            stage,
            init,
            out: path,
            teacher,
            data,
        } => {
            let cfg = config.load()?;
            train(
                &cfg,
                *stage,
                init.as_deref(),
                path,
                teacher.as_deref(),
                data.as_deref(),
                out,
            )
        }
        Command::Search {
            config,
            checkpoint,
            max_params,
            out: path,
            teacher,
            data,
        } => {
            let cfg = config.load()?;
            let a = SearchArgs {
                checkpoint,
                max_params: *max_params,
                out: path,
                teacher: teacher.as_deref(),
                data: data.as_deref(),
                workers: cli.workers,
            };
            search(&cfg, &a, out)
        }
        Command::Extract {
            checkpoint,
            subnet_spec,
            out: path,
        } => extract(checkpoint, subnet_spec, path, out),
        Command::Count {
            config,
            space,
            subnets,
            params,
            subnet_spec,
            with_frontend,
            no_head,
        } => {
            let cfg = config.load()?;
            let space = match space.as_deref() {
                None => cfg.space.clone(),
                Some(name) => named_space(name)?,
            };
            if *subnets || !*params {
                writeln!(out, "subnets: {}", count_subnets(&space))?;
            }
            if *params {
                let spec = subnet_spec.as_deref().expect("clap enforces --subnet-spec");
                let c = SubnetConfig::parse_spec(spec, &space)?;
                let n = count_params(&space, &c, *with_frontend, !*no_head)?;
                writeln!(out, "params: {}", n.total)?;
                for (k, v) in &n.by_component {
                    writeln!(out, "  {k}: {v}")?;
                }
            }
            Ok(())
        }
        Command::Eval {
            config,
            checkpoint,
            subnet_spec,
            data,
            teacher,
        } => {
            let cfg = config.load()?;
            eval(
                &cfg,
                checkpoint,
                subnet_spec.as_deref(),
                data,
                teacher.as_deref(),
                out,
            )
        }
    }
}

pub fn named_space(name: &str) -> Result<crate::supernet::SearchSpace> {
    use crate::supernet::SearchSpace as S;
    Ok(match name {
        "paper_small" => S::paper_small(),
        "paper_base" => S::paper_base(),
        "desk_small" => S::desk_small(),
        "desk_base" => S::desk_base(),
        other => return Err(config_err(format!("unknown space `{other}`"))),
    })
}

fn gen_data(cfg: &RunConfig, dir: Option<&Path>, out: &mut dyn Write) -> Result<()> {
    let t = &cfg.train;
    let (train, val) = make_split(cfg.seed, t.n_train, t.n_val, t.sample_length)?;
    let (tp, vp) = match dir {
        Some(d) => (d.join("train.ofad"), d.join("val.ofad")),
        None => (cfg.paths.train_data.clone(), cfg.paths.val_data.clone()),
    };
    for (ds, path, kind) in [(&train, &tp, "train"), (&val, &vp, "validation")] {
        ensure_parent(path)?;
        ds.save(path)?;
        let car = Sidecar::write(path, &format!("dataset/{kind}"), cfg)?;
        writeln!(
            out,
            "{kind}: {} ({} sequences) sha256={}",
            path.display(),
            ds.len(),
            car.file_digest
        )?;
    }
    Ok(())
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(p) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(p)?;
    }
    Ok(())
}

fn load_dataset(path: &Path, what: &str) -> Result<Dataset> {
    let ds = Dataset::load(path).map_err(|e| match e {
        Error::Io(io) => config_err(format!("cannot read {what} data {}: {io}", path.display())),
        other => other,
    })?;
    ds.require_usable(what)?;
    Ok(ds)
}

fn load_teacher(path: &Path) -> Result<TeacherModel> {
    let ck = Checkpoint::load(path).map_err(|e| match e {
        Error::Io(io) => config_err(format!("cannot read teacher {}: {io}", path.display())),
        other => other,
    })?;
    TeacherModel::from_checkpoint(&ck)
}

/// Fresh teacher for `cfg`, warmed up on `data` when the config asks for it.
pub fn teacher_for(cfg: &RunConfig, data: Option<&Dataset>) -> Result<TeacherModel> {
    build_teacher(&cfg.space, &cfg.distill, &cfg.train_config(), data)
}

fn init_teacher(
    cfg: &RunConfig,
    path: &Path,
    data: Option<&Path>,
    out: &mut dyn Write,
) -> Result<()> {
    let ds = if cfg.distill.teacher_warmup_steps > 0 {
        Some(load_dataset(
            data.unwrap_or(&cfg.paths.train_data),
            "training",
        )?)
    } else {
        None
    };
    let teacher = teacher_for(cfg, ds.as_ref())?;
    let ck = teacher.to_checkpoint(
        cfg.seed,
        Some(cfg.digest()),
        &format!(
            "init-teacher warmup_steps={}",
            cfg.distill.teacher_warmup_steps
        ),
    )?;
    ensure_parent(path)?;
    ck.save(path)?;
    writeln!(
        out,
        "teacher: {} ({}) sha256={}",
        path.display(),
        teacher.config(),
        hex_digest(&ck.to_bytes()?)
    )?;
    Ok(())
}

fn train(
    cfg: &RunConfig,
    stage: u8,
    init: Option<&Path>,
    path: &Path,
    teacher: Option<&Path>,
    data: Option<&Path>,
    out: &mut dyn Write,
) -> Result<()> {
    let tcfg = TrainConfig {
        stage,
        ..cfg.train_config()
    };
    tcfg.validate()?;
    let init = init.map(Path::to_path_buf).or(tcfg.init_checkpoint.clone());
    let init_ck = match (stage, tcfg.ofa_init, &init) {
        (1, _, _) | (_, OfaInit::Random, _) => None,
        (_, _, None) => {
            return Err(config_err(format!(
                "stage 2 with ofa_init = {:?} needs --init or train.init_checkpoint",
                tcfg.ofa_init
            )))
        }
        (_, _, Some(p)) => Some(Checkpoint::load(p)?),
    };
    let teacher = load_teacher(teacher.unwrap_or(&cfg.paths.teacher))?;
    let data = load_dataset(data.unwrap_or(&cfg.paths.train_data), "training")?;
    let outcome = if stage == 1 {
        stage1_train(&tcfg, &cfg.space, &teacher, &data, &cfg.distill)?
    } else {
        match (tcfg.ofa_init, init_ck) {
            (OfaInit::Stage1Weights, Some(ck)) => {
                let m = SupernetModel::from_checkpoint(&ck)?;
                stage2_train(
                    &tcfg,
                    &cfg.space,
                    &teacher,
                    &data,
                    &cfg.distill,
                    Stage2Init::Stage1(&m),
                )?
            }
            (OfaInit::PretrainedExternal, Some(ck)) => {
                let p = ck.params();
                stage2_train(
                    &tcfg,
                    &cfg.space,
                    &teacher,
                    &data,
                    &cfg.distill,
                    Stage2Init::External(&p),
                )?
            }
            _ => stage2_train(
                &tcfg,
                &cfg.space,
                &teacher,
                &data,
                &cfg.distill,
                Stage2Init::Random,
            )?,
        }
    };
    let ck = outcome.checkpoint(
        stage,
        cfg.seed,
        Some(cfg.digest()),
        &format!("train stage {stage}"),
    )?;
    ensure_parent(path)?;
    ck.save(path)?;
    let log_path = with_suffix(path, ".log.csv");
    fs::write(&log_path, outcome.log.to_csv())?;
    Sidecar::write(&log_path, "train-log", cfg)?;
    let last = outcome.log.records.last().expect("steps > 0");
    writeln!(
        out,
        "stage {stage}: {} steps, final loss {:.6}, checkpoint {}, log {}",
        outcome.log.records.len(),
        last.loss,
        path.display(),
        log_path.display()
    )?;
    Ok(())
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

struct SearchArgs<'a> {
    checkpoint: &'a Path,
    max_params: Option<u64>,
    out: &'a Path,
    teacher: Option<&'a Path>,
    data: Option<&'a Path>,
    workers: usize,
}

fn search(cfg: &RunConfig, a: &SearchArgs<'_>, out: &mut dyn Write) -> Result<()> {
    let budget = cfg.search_budget(a.max_params)?;
    budget.validate(&cfg.space)?;
    let model = SupernetModel::from_checkpoint(&Checkpoint::load(a.checkpoint)?)?;
    if model.space() != &cfg.space {
        return Err(config_err("checkpoint space differs from the config space"));
    }
    let teacher = load_teacher(a.teacher.unwrap_or(&cfg.paths.teacher))?;
    let val = load_dataset(a.data.unwrap_or(&cfg.paths.val_data), "validation")?;
    let eval = EvalSet::new(
        &teacher,
        &val,
        &cfg.distill,
        cfg.seed,
        Some(budget.eval_batches),
    )?;
    let result = random_search(&model, &budget, &eval, cfg.distill.l1_reduction, a.workers)?;
    ensure_parent(a.out)?;
    fs::write(a.out, report_scatter(&result))?;
    Sidecar::write(a.out, "search-scatter", cfg)?;
    let summary = SearchSummary::new(&result, Some(cfg.digest()));
    let sp = with_suffix(a.out, ".summary.json");
    fs::write(
        &sp,
        serde_json::to_string_pretty(&summary).expect("summary serializes") + "\n",
    )?;
    writeln!(
        out,
        "budget: max_params={} candidates={}",
        budget.max_params, budget.n_candidates
    )?;
    writeln!(
        out,
        "best: {} params={} loss={:.6}",
        summary.best, summary.best_params, summary.best_loss
    )?;
    writeln!(
        out,
        "bounds: min loss={:.6} max loss={:.6}; acceptance rate {:.4}",
        summary.min_subnet_loss, summary.max_subnet_loss, summary.acceptance_rate
    )?;
    writeln!(out, "wrote {} and {}", a.out.display(), sp.display())?;
    Ok(())
}

/// Max abs difference between a supernet view and its extraction on a seeded probe.
pub fn extraction_gap(
    model: &SupernetModel,
    sub: &StandaloneModel,
    config: &SubnetConfig,
) -> Result<Real> {
    let mut rng = Rng::new(0, streams::PROBE);
    let samples: Vec<Real> = (0..256)
        .map(|_| rng.uniform_range(-1.0, 1.0) as Real)
        .collect();
    let a = model.forward_raw(config, &samples, false)?;
    let b = sub.forward_raw(&samples, false)?;
    a.head_out.max_abs_diff(&b.head_out)
}

fn extract(checkpoint: &Path, spec: &str, path: &Path, out: &mut dyn Write) -> Result<()> {
    let ck = Checkpoint::load(checkpoint)?;
    let meta = ck.meta()?;
    let model = SupernetModel::from_checkpoint(&ck)?;
    let config = SubnetConfig::parse_spec(spec, model.space())?;
    let sub = model.extract_subnet(&config)?;
    let gap = extraction_gap(&model, &sub, &config)?;
    let ck_out = sub.to_checkpoint(CheckpointMeta {
        role: Role::Subnet,
        space: model.space().clone(),
        subnet: Some(config.clone()),
        stage: meta.stage,
        seed: meta.seed,
        config_digest: meta.config_digest,
        provenance: format!("extract {config} from {}", checkpoint.display()),
    })?;
    ensure_parent(path)?;
    ck_out.save(path)?;
    if gap > 1e-6 {
        return Err(Error::Contract(format!(
            "extracted subnet deviates from the supernet view by {gap:e}"
        )));
    }
    writeln!(
        out,
        "extracted {config}: {} tensors, {} parameters, max abs diff vs supernet {gap:e}",
        sub.params().len(),
        sub.param_count()
    )?;
    Ok(())
}

fn eval(
    cfg: &RunConfig,
    checkpoint: &Path,
    spec: Option<&str>,
    data: &Path,
    teacher: Option<&Path>,
    out: &mut dyn Write,
) -> Result<()> {
    let ck = Checkpoint::load(checkpoint)?;
    let teacher = load_teacher(teacher.unwrap_or(&cfg.paths.teacher))?;
    let val = load_dataset(data, "validation")?;
    let eval = EvalSet::new(&teacher, &val, &cfg.distill, cfg.seed, None)?;
    let r = cfg.distill.l1_reduction;
    match ck.meta()?.role {
        Role::Supernet => {
            let model = SupernetModel::from_checkpoint(&ck)?;
            let spec =
                spec.ok_or_else(|| config_err("evaluating a supernet needs --subnet-spec"))?;
            let config = SubnetConfig::parse_spec(spec, model.space())?;
            let loss = evaluate_subnet(&model.view(&config)?, &eval, r)?;
            writeln!(out, "loss {loss:.9} subnet {config}")?;
        }
        Role::Subnet => {
            let model = StandaloneModel::from_checkpoint(&ck)?;
            let loss = evaluate_subnet(&model, &eval, r)?;
            writeln!(out, "loss {loss:.9} subnet {}", model.config())?;
        }
        Role::Teacher => {
            return Err(config_err(
                "cannot evaluate a teacher checkpoint as a student",
            ))
        }
    }
    Ok(())
}
