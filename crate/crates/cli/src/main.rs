use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};

use recoverbench::config::Config;
use recoverbench::fault::ErrorKind;
use recoverbench::harness::{
    self, Agent, Bench, Budgets, EvalReport, Generated, Pipeline, PolicyAgent, Report,
};
use recoverbench::labeler::{LabelConfig, LabelSummary};
use recoverbench::policy::Policy;
use recoverbench::sim::TaskId;
use recoverbench::store::{self, Episode, EpisodeKind};
use recoverbench::value;

#[derive(Args, Clone)]
struct Common {
    /// TOML configuration file; defaults apply for missing keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Base seed for data streams and training.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory or file.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Args, Clone, Default)]
struct TrainFlags {
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    sigma: Option<f64>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long = "history-w")]
    history_w: Option<usize>,
}

#[derive(Args, Clone, Default)]
struct Selection {
    /// Restrict to these tasks (repeatable).
    #[arg(long = "task")]
    tasks: Vec<TaskId>,
    /// Restrict to these error types (repeatable).
    #[arg(long = "error")]
    errors: Vec<ErrorKind>,
    /// Trials per evaluation cell.
    #[arg(long)]
    trials: Option<usize>,
}

#[derive(Clone, Copy, ValueEnum)]
enum AgentKind {
    Policy,
    Oracle,
    Random,
}

#[derive(Subcommand)]
enum Cmd {
    /// Expert demonstrations.
    GenNominal {
        #[command(flatten)]
        sel: Selection,
        /// Seeds per task.
        #[arg(long)]
        n: Option<usize>,
    },
    /// Interception episodes with scripted recovery.
    GenRecovery {
        #[command(flatten)]
        sel: Selection,
        /// Seeds per task and error type.
        #[arg(long)]
        n: Option<usize>,
        /// Expert dataset used for step budgets; regenerated when absent.
        #[arg(long)]
        nominal: Option<PathBuf>,
    },
    /// Policy rollouts with planner takeover on failure.
    CollectInduced {
        #[command(flatten)]
        sel: Selection,
        #[arg(long)]
        policy: PathBuf,
        /// Rollouts per task.
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        nominal: Option<PathBuf>,
    },
    /// Trains the progress model on successful demonstrations.
    TrainValue {
        #[arg(long, required = true)]
        data: Vec<PathBuf>,
    },
    /// Attaches value labels to every frame.
    Label {
        #[arg(long, required = true)]
        data: Vec<PathBuf>,
        /// Value checkpoint with its reference cluster.
        #[arg(long)]
        value: PathBuf,
        #[arg(long)]
        alpha: Option<f64>,
    },
    /// Imitation with optional recovery data (plain imitation without it).
    TrainRai {
        #[arg(long, required = true)]
        expert: Vec<PathBuf>,
        #[arg(long)]
        recovery: Vec<PathBuf>,
        /// Train on whole recovery episodes with raw histories.
        #[arg(long)]
        no_reset: bool,
        #[command(flatten)]
        train: TrainFlags,
    },
    /// Value-conditioned fine-tuning on labeled data.
    TrainVcr {
        #[arg(long)]
        init: PathBuf,
        #[arg(long, required = true)]
        data: Vec<PathBuf>,
        #[command(flatten)]
        train: TrainFlags,
    },
    /// Evaluates one agent under the standard and adversarial conditions.
    Eval {
        #[command(flatten)]
        sel: Selection,
        #[arg(long, value_enum, default_value = "policy")]
        agent: AgentKind,
        #[arg(long)]
        policy: Option<PathBuf>,
        /// Value input fed to the policy.
        #[arg(long, default_value_t = 1.0)]
        v: f64,
        #[arg(long)]
        nominal: Option<PathBuf>,
        /// Skip the adversarial condition.
        #[arg(long)]
        standard_only: bool,
    },
    /// Baseline, recovery-aware and value-conditioned models compared end to end.
    Compare {
        #[command(flatten)]
        sel: Selection,
        #[command(flatten)]
        train: TrainFlags,
    },
    /// Value-conditioned models over nested recovery-data tiers.
    Scaling {
        #[command(flatten)]
        sel: Selection,
        #[command(flatten)]
        train: TrainFlags,
    },
    /// History-reset, value-input and decay-rate ablations.
    Ablate {
        #[command(flatten)]
        sel: Selection,
        #[command(flatten)]
        train: TrainFlags,
    },
    /// Dataset statistics after a manifest consistency check.
    Stats {
        #[arg(long, required = true)]
        data: Vec<PathBuf>,
    },
    /// Re-renders a JSON report as CSV tables.
    Report {
        #[arg(long)]
        input: PathBuf,
    },
}

#[derive(Parser)]
#[command(name = "recoverbench", version, about = "Failure-injection data generation, recovery-aware training and evaluation")]
struct Top {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    cmd: Cmd,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let top = match Top::try_parse() {
        Ok(t) => t,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(top.common, top.cmd) {
        Ok(out) => {
            let text = serde_json::to_string_pretty(&out).unwrap_or_default();
            // A closed stdout (e.g. piped into `head`) is not a failure.
            let _ = writeln!(std::io::stdout().lock(), "{text}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            let (kind, message) = match e.downcast_ref::<recoverbench::Error>() {
                // Library errors already render their source.
                Some(inner) => (inner.kind(), inner.to_string()),
                None => ("runtime", format!("{e:#}")),
            };
            let msg = json!({ "error": { "kind": kind, "message": message } });
            eprintln!("{msg}");
            ExitCode::from(1)
        }
    }
}

fn load_config(c: &Common) -> anyhow::Result<Config> {
    let mut cfg = match &c.config {
        Some(p) => Config::load(p)?,
        None => Config::default(),
    };
    if let Some(s) = c.seed {
        cfg = cfg.with_seed(s);
    }
    Ok(cfg)
}

fn apply_selection(cfg: &mut Config, sel: &Selection) {
    if !sel.tasks.is_empty() {
        cfg.harness.tasks = sel.tasks.clone();
    }
    if !sel.errors.is_empty() {
        cfg.harness.errors = sel.errors.clone();
    }
    if let Some(t) = sel.trials {
        cfg.harness.trials = t;
        cfg.harness.value_trials = t;
    }
}

fn apply_train(cfg: &mut Config, f: &TrainFlags, imitation: bool, finetune: bool) {
    let mut targets = Vec::new();
    if imitation {
        targets.push(&mut cfg.train);
    }
    if finetune {
        targets.push(&mut cfg.vcr);
    }
    for tc in targets {
        if let Some(v) = f.lambda {
            tc.lambda = v;
        }
        if let Some(v) = f.sigma {
            tc.sigma = v;
        }
        if let Some(v) = f.steps {
            tc.steps = v;
        }
        if let Some(v) = f.lr {
            tc.lr = v;
        }
    }
    if let Some(w) = f.history_w {
        cfg.policy.history_w = w;
    }
}

fn out_path(c: &Common) -> anyhow::Result<&Path> {
    c.out.as_deref().ok_or_else(|| anyhow!("--out is required for this command"))
}

fn read_all(dirs: &[PathBuf]) -> anyhow::Result<Vec<Episode>> {
    let mut all = Vec::new();
    for d in dirs {
        all.extend(store::read_dataset(d).with_context(|| format!("reading {}", d.display()))?);
    }
    Ok(all)
}

fn budgets(bench: &Bench, nominal: Option<&Path>) -> anyhow::Result<Budgets> {
    let expert = match nominal {
        Some(dir) => store::read_dataset(dir)?,
        None => bench.expert_dataset()?.episodes,
    };
    Ok(Budgets::from_episodes(&expert)?)
}

fn write_generated(g: &Generated, out: &Path) -> anyhow::Result<Value> {
    store::write_episodes(&g.episodes, out)?;
    let stats = store::StatsReport::from_episodes(&g.episodes);
    Ok(json!({
        "out": out,
        "written": g.episodes.len(),
        "skipped": g.skipped,
        "stats": stats,
    }))
}

fn write_report(r: &Report, out: &Path) -> anyhow::Result<Value> {
    r.write(out)?;
    Ok(json!({ "out": out, "summary": r.summary }))
}

fn run(common: Common, cmd: Cmd) -> anyhow::Result<Value> {
    let mut cfg = load_config(&common)?;
    match cmd {
        Cmd::GenNominal { sel, n } => {
            apply_selection(&mut cfg, &sel);
            if let Some(n) = n {
                cfg.harness.n_expert = n;
            }
            let bench = Bench::new(cfg)?;
            write_generated(&bench.expert_dataset()?, out_path(&common)?)
        }
        Cmd::GenRecovery { sel, n, nominal } => {
            apply_selection(&mut cfg, &sel);
            if let Some(n) = n {
                cfg.harness.n_recovery = n;
            }
            let bench = Bench::new(cfg)?;
            let b = budgets(&bench, nominal.as_deref())?;
            let g = bench.recovery_dataset(1, &b)?;
            write_generated(&g, out_path(&common)?)
        }
        Cmd::CollectInduced { sel, policy, n, nominal } => {
            apply_selection(&mut cfg, &sel);
            if let Some(n) = n {
                cfg.harness.n_induced = n;
            }
            let bench = Bench::new(cfg)?;
            let b = budgets(&bench, nominal.as_deref())?;
            let p = Policy::load(&policy)?;
            let agent = PolicyAgent::new("policy", &p, 1.0);
            let hc = bench.harness();
            let g = bench.collect_policy_induced(&agent, &hc.tasks, hc.induced_seeds(), &b)?;
            write_generated(&g, out_path(&common)?)
        }
        Cmd::TrainValue { data } => {
            cfg.validate()?;
            let eps = read_all(&data)?;
            let (model, cluster, rep) = harness::train_value(&cfg, &eps)?;
            let success: Vec<Episode> = eps.into_iter().filter(|e| e.kind == EpisodeKind::NominalSuccess).collect();
            let rho = model.alignment_spearman(&success)?;
            let out = out_path(&common)?;
            value::save_checkpoint(out, &model, Some(&cluster))?;
            Ok(json!({
                "out": out,
                "initial_loss": rep.initial_loss,
                "final_loss": rep.final_loss,
                "train_spearman": rho,
            }))
        }
        Cmd::Label { data, value: ckpt, alpha } => {
            let lc = LabelConfig {
                alpha: alpha.unwrap_or(cfg.labeler.alpha),
                ..cfg.labeler.clone()
            };
            lc.validate()?;
            let (model, cluster) = value::load_checkpoint(&ckpt)?;
            let cluster = cluster.ok_or_else(|| anyhow!("{} has no reference cluster", ckpt.display()))?;
            let labeled = harness::label_total(&lc, &model, &cluster, &read_all(&data)?)?;
            let out = out_path(&common)?;
            store::write_episodes(&labeled, out)?;
            Ok(json!({ "out": out, "summary": LabelSummary::from_episodes(&labeled) }))
        }
        Cmd::TrainRai { expert, recovery, no_reset, train } => {
            apply_train(&mut cfg, &train, true, false);
            cfg.validate()?;
            let ex = read_all(&expert)?;
            let (p, rep) = if recovery.is_empty() {
                harness::train_sft(&cfg, &ex)?
            } else {
                harness::train_phase1(&cfg, &ex, &read_all(&recovery)?, !no_reset)?
            };
            let out = out_path(&common)?;
            p.save(out)?;
            Ok(json!({ "out": out, "initial_loss": rep.initial_loss, "final_loss": rep.final_loss }))
        }
        Cmd::TrainVcr { init, data, train } => {
            apply_train(&mut cfg, &train, false, true);
            cfg.validate()?;
            let base = Policy::load(&init)?;
            if train.history_w.is_some_and(|w| w != base.cfg.history_w) {
                bail!("--history-w differs from the initial checkpoint's window {}", base.cfg.history_w);
            }
            let labeled = read_all(&data)?;
            let (p, rep) = harness::train_full(&cfg, &base, &labeled)?;
            let out = out_path(&common)?;
            p.save(out)?;
            Ok(json!({ "out": out, "initial_loss": rep.initial_loss, "final_loss": rep.final_loss }))
        }
        Cmd::Eval { sel, agent, policy, v, nominal, standard_only } => {
            apply_selection(&mut cfg, &sel);
            let bench = Bench::new(cfg)?;
            let b = budgets(&bench, nominal.as_deref())?;
            let loaded = match (agent, &policy) {
                (AgentKind::Policy, Some(path)) => Some(Policy::load(path)?),
                (AgentKind::Policy, None) => bail!("--policy is required with --agent policy"),
                _ => None,
            };
            let oracle = bench.oracle();
            let random = bench.random();
            let pa = loaded.as_ref().map(|p| PolicyAgent::new("policy", p, v));
            let a: &dyn Agent = match agent {
                AgentKind::Policy => pa.as_ref().expect("policy loaded"),
                AgentKind::Oracle => &oracle,
                AgentKind::Random => &random,
            };
            let hc = bench.harness();
            let range = hc.eval_seeds(hc.trials);
            hc.check_seed_hygiene(&range)?;
            let seeds: Vec<u64> = range.collect();
            let proto = bench.protocol(&b);
            let mut cells: Vec<EvalReport> = Vec::new();
            for &task in &hc.tasks {
                cells.push(proto.run(a, task, None, &seeds)?);
                if !standard_only {
                    for &kind in &hc.errors {
                        cells.push(proto.run(a, task, Some(kind), &seeds)?);
                    }
                }
            }
            let mut prov = std::collections::BTreeMap::new();
            prov.insert("t_max".to_string(), serde_json::to_value(&b.t_max)?);
            if let Some(p) = &policy {
                prov.insert("policy".to_string(), json!(p));
            }
            let r = Report {
                name: "eval".into(),
                config: bench.cfg.clone(),
                provenance: prov,
                cells,
                summary: Vec::new(),
            }
            .summarize();
            write_report(&r, out_path(&common)?)
        }
        Cmd::Compare { sel, train } => suite(&common, cfg, &sel, &train, harness::run_main),
        Cmd::Scaling { sel, train } => suite(&common, cfg, &sel, &train, harness::run_scaling),
        Cmd::Ablate { sel, train } => suite(&common, cfg, &sel, &train, harness::run_ablations),
        Cmd::Stats { data } => {
            let mut per = Vec::new();
            for d in &data {
                let s = store::dataset_stats(d)?;
                eprint!("{}:\n{}", d.display(), s.table());
                per.push(json!({ "data": d, "stats": s }));
            }
            Ok(Value::from(per))
        }
        Cmd::Report { input } => {
            let bytes = std::fs::read(&input).with_context(|| format!("reading {}", input.display()))?;
            let r: Report = serde_json::from_slice(&bytes).with_context(|| format!("parsing {}", input.display()))?;
            let out = match &common.out {
                Some(o) => o.clone(),
                None => input.parent().map(Path::to_path_buf).unwrap_or_default(),
            };
            eprint!("{}", r.summary_csv());
            write_report(&r, &out)
        }
    }
}

fn suite(
    common: &Common,
    mut cfg: Config,
    sel: &Selection,
    train: &TrainFlags,
    run: fn(&Pipeline) -> recoverbench::Result<Report>,
) -> anyhow::Result<Value> {
    apply_selection(&mut cfg, sel);
    apply_train(&mut cfg, train, true, true);
    let out = out_path(common)?.to_path_buf();
    let bench = Bench::new(cfg)?;
    let pipeline = Pipeline::build(&bench)?;
    write_report(&run(&pipeline)?, &out)
}
