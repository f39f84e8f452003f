//! `opa`: generate instances, train and evaluate assignment policies, solve
//! days offline and recount reported metrics.
//!
//! Exit codes: 0 success, 1 other failure, 2 missing input file, 3 training
//! failure, 4 offline solver budget exceeded, 5 invalid configuration.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::anyhow;
use clap::{Args, Parser, Subcommand};
use opa_core::baselines::{self, BaselineError, ProportionTable};
use opa_core::datagen::{self, GenConfig, GenError};
use opa_core::env::ShapingWeights;
use opa_core::experiment::{self, ExperimentConfig, ExperimentError, Policy, PolicyName};
use opa_core::model::ModelError;
use opa_core::nets::{ActorParams, RewardNetParams};
use opa_core::oracle::{self, OracleError, OracleTier};
use opa_core::ppo::{self, DualState, TrainConfig, TrainError};
use opa_core::recount;

const EXIT_OTHER: u8 = 1;
const EXIT_MISSING: u8 = 2;
const EXIT_TRAIN: u8 = 3;
const EXIT_BUDGET: u8 = 4;
const EXIT_CONFIG: u8 = 5;

#[derive(Parser)]
#[command(name = "opa", version, about = "Online parcel assignment experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic instances.
    Gen(GenArgs),
    /// Train a PPO policy on one day, or fit the Proportion table on history days.
    Train(TrainArgs),
    /// Evaluate one policy on one day.
    Eval(EvalArgs),
    /// Run the full protocol: train on day T, evaluate on the following days.
    Bench(BenchArgs),
    /// Solve one day offline.
    Solve(SolveArgs),
    /// Recompute reported metrics from rollout logs.
    Recount(RecountArgs),
}

#[derive(Args)]
struct TrainOverrides {
    #[arg(long)]
    episodes: Option<usize>,
    #[arg(long)]
    lambda_cap: Option<f64>,
    #[arg(long)]
    lambda_prop: Option<f64>,
    #[arg(long)]
    clip_eps: Option<f64>,
}

impl TrainOverrides {
    fn apply(&self, cfg: &mut TrainConfig) {
        if let Some(e) = self.episodes {
            cfg.episodes = e;
        }
        if let Some(l) = self.lambda_cap {
            cfg.shaping.capacity = l;
        }
        if let Some(l) = self.lambda_prop {
            cfg.shaping.proportion = l;
        }
        if let Some(e) = self.clip_eps {
            cfg.clip_eps = e;
        }
    }
}

#[derive(Args)]
struct GenArgs {
    /// Generator config (TOML); defaults to the desk-scale benchmark.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Write a history of this many days over one catalog.
    #[arg(long)]
    days: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long, default_value = "ppo-opa")]
    policy: PolicyName,
    /// Training day (PPO policies).
    #[arg(long)]
    instance: Option<PathBuf>,
    /// Historical days (Proportion).
    #[arg(long, num_args = 1..)]
    history: Vec<PathBuf>,
    /// Training config (TOML); defaults to the desk profile.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = "auto")]
    oracle_tier: OracleTier,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    overrides: TrainOverrides,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    policy: PolicyName,
    #[arg(long)]
    instance: PathBuf,
    /// Actor parameters for PPO policies.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Fitted table for the Proportion policy.
    #[arg(long)]
    table: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "auto")]
    oracle_tier: OracleTier,
    /// Act greedily on the actor's probabilities instead of sampling.
    #[arg(long)]
    argmax: bool,
    #[arg(long, default_value_t = baselines::DEFAULT_PDO_ETA_SCALE)]
    eta_scale: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct BenchArgs {
    /// Experiment config (TOML); defaults to the desk-scale benchmark.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Replace the configured seeds; repeatable.
    #[arg(long)]
    seed: Vec<u64>,
    /// Replace the configured policies; repeatable.
    #[arg(long)]
    policy: Vec<PolicyName>,
    #[arg(long)]
    oracle_tier: Option<OracleTier>,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    overrides: TrainOverrides,
}

#[derive(Args)]
struct SolveArgs {
    #[arg(long)]
    instance: PathBuf,
    #[arg(long, default_value = "auto")]
    oracle_tier: OracleTier,
    #[arg(long, default_value_t = oracle::DEFAULT_BUDGET as u64)]
    budget: u64,
    #[arg(long, default_value_t = oracle::DEFAULT_BOUND_ITERATIONS)]
    iterations: usize,
    /// Solution file to write.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct RecountArgs {
    /// Verify every report.tsv below this directory.
    #[arg(long, conflicts_with_all = ["instance", "log"])]
    dir: Option<PathBuf>,
    #[arg(long, requires = "log")]
    instance: Option<PathBuf>,
    #[arg(long, requires = "instance")]
    log: Option<PathBuf>,
}

struct Failure {
    code: u8,
    error: anyhow::Error,
}

impl Failure {
    fn new(code: u8, error: impl Into<anyhow::Error>) -> Self {
        Self { code, error: error.into() }
    }
}

fn experiment_code(e: &ExperimentError) -> u8 {
    match e {
        ExperimentError::MissingFile(_) => EXIT_MISSING,
        ExperimentError::Config(_) | ExperimentError::Gen(GenError::Config(_)) | ExperimentError::Train(TrainError::Config(_)) => {
            EXIT_CONFIG
        }
        ExperimentError::Train(_) | ExperimentError::Baseline(BaselineError::NoHistory) => EXIT_TRAIN,
        ExperimentError::Oracle(OracleError::BudgetExceeded { .. }) => EXIT_BUDGET,
        ExperimentError::Model(ModelError::Io(io)) if io.kind() == std::io::ErrorKind::NotFound => EXIT_MISSING,
        _ => EXIT_OTHER,
    }
}

impl From<ExperimentError> for Failure {
    fn from(e: ExperimentError) -> Self {
        Self::new(experiment_code(&e), e)
    }
}

impl From<TrainError> for Failure {
    fn from(e: TrainError) -> Self {
        ExperimentError::from(e).into()
    }
}

impl From<OracleError> for Failure {
    fn from(e: OracleError) -> Self {
        ExperimentError::from(e).into()
    }
}

impl From<GenError> for Failure {
    fn from(e: GenError) -> Self {
        ExperimentError::from(e).into()
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Self::new(EXIT_OTHER, e)
    }
}

type CmdResult = Result<(), Failure>;

fn require(path: &Path) -> Result<&Path, Failure> {
    if path.exists() {
        Ok(path)
    } else {
        Err(ExperimentError::MissingFile(path.to_path_buf()).into())
    }
}

fn gen(args: GenArgs) -> CmdResult {
    let mut cfg: GenConfig = match &args.config {
        Some(p) => experiment::load_toml(p)?,
        None => GenConfig::default(),
    };
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    let days = match args.days {
        Some(n) => datagen::generate_history(&cfg, n)?,
        None => vec![datagen::generate(&cfg)?],
    };
    std::fs::create_dir_all(&args.out)?;
    for d in &days {
        let path = args.out.join(format!("{}.txt", d.label()));
        d.save(&path).map_err(ExperimentError::from)?;
        println!("{}\t{} parcels", path.display(), d.m());
    }
    Ok(())
}

fn train(args: TrainArgs) -> CmdResult {
    std::fs::create_dir_all(&args.out)?;
    if args.policy == PolicyName::Proportion {
        if args.history.is_empty() {
            return Err(Failure::new(EXIT_CONFIG, anyhow!("--history is required for the proportion policy")));
        }
        let history = args.history.iter().map(|p| experiment::load_instance(p)).collect::<Result<Vec<_>, _>>()?;
        let table = baselines::fit_proportions(&history, args.oracle_tier, oracle::DEFAULT_BUDGET, oracle::DEFAULT_BOUND_ITERATIONS)
            .map_err(ExperimentError::from)?;
        let path = args.out.join("proportions.tsv");
        table.save(&path).map_err(ExperimentError::from)?;
        println!("{}\t{} parcel types", path.display(), table.entries.len());
        return Ok(());
    }
    if !matches!(args.policy, PolicyName::PpoOpa | PolicyName::PpoPd) {
        return Err(Failure::new(EXIT_CONFIG, anyhow!("policy {} has nothing to train", args.policy)));
    }
    let path = args.instance.as_deref().ok_or_else(|| Failure::new(EXIT_CONFIG, anyhow!("--instance is required")))?;
    let instance = experiment::load_instance(path)?;
    let mut cfg: TrainConfig = match &args.config {
        Some(p) => experiment::load_toml(p)?,
        None => TrainConfig::desk(),
    };
    args.overrides.apply(&mut cfg);
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    cfg.net = cfg.net.with_vocabulary(&instance);
    // PPO-PD prices constraints through its duals instead of shaping.
    let dual = (args.policy == PolicyName::PpoPd).then(|| {
        cfg.shaping = ShapingWeights::NONE;
        DualState::new(&instance, cfg.dual_step)
    });
    let (actor_path, reward_path) = (args.out.join("actor.json"), args.out.join("reward_net.json"));
    let mut checkpoint = |m: &ppo::EpisodeMetrics, actor: &ActorParams, net: &RewardNetParams| -> ppo::Result<()> {
        actor.save(&actor_path)?;
        net.save(&reward_path)?;
        log::info!("episode {}: average cost {:.3}, violation rate {:.4}", m.episode, m.average_cost, m.violation_rate);
        Ok(())
    };
    let outcome = ppo::train_with(&instance, &cfg, dual, &mut checkpoint)?;
    ppo::write_train_log(args.out.join("train_log.tsv"), &outcome.metrics)?;
    let last = outcome.metrics.last().expect("at least one episode");
    println!("{}\taverage cost {:.4}\tviolation rate {:.6}", actor_path.display(), last.average_cost, last.violation_rate);
    Ok(())
}

fn eval(args: EvalArgs) -> CmdResult {
    let instance = experiment::load_instance(&args.instance)?;
    let cfg = ExperimentConfig {
        policies: vec![args.policy],
        oracle_tier: args.oracle_tier,
        pdo_eta_scale: args.eta_scale,
        ppo_argmax: args.argmax,
        ..Default::default()
    };
    let actor;
    let table;
    let policy = match args.policy {
        PolicyName::Greedy => Policy::Greedy,
        PolicyName::Pdo => Policy::Pdo { eta_scale: args.eta_scale },
        PolicyName::Proportion => {
            let p = args.table.as_deref().ok_or_else(|| Failure::new(EXIT_CONFIG, anyhow!("--table is required")))?;
            table = ProportionTable::load(require(p)?).map_err(ExperimentError::from)?;
            Policy::Proportion(&table)
        }
        PolicyName::PpoOpa | PolicyName::PpoPd => {
            let p = args.checkpoint.as_deref().ok_or_else(|| Failure::new(EXIT_CONFIG, anyhow!("--checkpoint is required")))?;
            actor = ActorParams::load(require(p)?).map_err(TrainError::from)?;
            Policy::Ppo { actor: &actor, argmax: args.argmax }
        }
    };
    let day = experiment::evaluate_day(&cfg, &[(args.policy, policy)], args.seed, 0, &instance)?;
    experiment::write_day_to(&args.out, &day)?;
    print!("{}", experiment::report_table(&day));
    Ok(())
}

fn bench(args: BenchArgs) -> CmdResult {
    let mut cfg = match &args.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if !args.seed.is_empty() {
        cfg.seeds = args.seed.clone();
    }
    if !args.policy.is_empty() {
        cfg.policies = args.policy.clone();
    }
    if let Some(t) = args.oracle_tier {
        cfg.oracle_tier = t;
    }
    args.overrides.apply(&mut cfg.train);
    let days = experiment::run(&cfg, &args.out)?;
    for d in &days {
        println!("seed {}", d.seed);
        print!("{}", experiment::report_table(d));
    }
    Ok(())
}

fn solve(args: SolveArgs) -> CmdResult {
    let instance = experiment::load_instance(&args.instance)?;
    let sol = oracle::solve(&instance, args.oracle_tier, args.budget as u128, args.iterations)?;
    if let Some(out) = &args.out {
        oracle::save_solution(out, &instance, &sol)?;
    }
    let r = sol.reference(instance.m());
    println!(
        "{}\tobjective {:.4}\tbound {:.4}\tfeasible {}\texact {}\treference average cost {:.4}",
        instance.label(),
        sol.objective,
        sol.bound,
        sol.feasible,
        sol.exact,
        r.average_cost
    );
    Ok(())
}

fn recount_cmd(args: RecountArgs) -> CmdResult {
    let other = |e: recount::RecountError| Failure::new(EXIT_OTHER, e);
    if let Some(dir) = &args.dir {
        let checks = recount::verify_tree(require(dir)?).map_err(other)?;
        if checks.is_empty() {
            return Err(Failure::new(EXIT_OTHER, anyhow!("no report.tsv below {}", dir.display())));
        }
        let mut bad = 0;
        for c in &checks {
            let status = if c.mismatches.is_empty() { "ok" } else { "MISMATCH" };
            println!(
                "{status}\t{}\t{}\t{:.4}\t{:.6}\t{}",
                c.report.display(),
                c.algorithm,
                c.recount.average_cost,
                c.recount.violation_rate,
                c.mismatches.join("; ")
            );
            bad += usize::from(!c.mismatches.is_empty());
        }
        if bad > 0 {
            return Err(Failure::new(EXIT_OTHER, anyhow!("{bad} of {} rows differ from the recount", checks.len())));
        }
        println!("all {} rows reproduced", checks.len());
        return Ok(());
    }
    let (Some(inst), Some(log)) = (&args.instance, &args.log) else {
        return Err(Failure::new(EXIT_CONFIG, anyhow!("give --dir, or --instance with --log")));
    };
    let instance = experiment::load_instance(inst)?;
    let text = std::fs::read_to_string(require(log)?)?;
    let r = recount::recount(&instance, &recount::parse_log(&text).map_err(other)?).map_err(other)?;
    println!(
        "parcels {}\ttotal cost {:?}\taverage cost {:?}\tviolations {}\tviolation rate {:?}",
        r.parcels, r.total_cost, r.average_cost, r.violation_count, r.violation_rate
    );
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Gen(a) => gen(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Bench(a) => bench(a),
        Command::Solve(a) => solve(a),
        Command::Recount(a) => recount_cmd(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}
