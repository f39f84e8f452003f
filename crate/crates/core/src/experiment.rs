//! Benchmark protocol: train on day T, evaluate every policy on the
//! following days, compare against the offline reference and write one
//! report per evaluation day.

use std::fmt::{self, Write as _};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::baselines::{self, BaselineError, DualPrices, ProportionTable};
use crate::datagen::{self, GenConfig, GenError};
use crate::env::{self, Env, EnvError, LogRecord, Report, ShapingWeights};
use crate::model::{Instance, ModelError};
use crate::nets::ActorParams;
use crate::oracle::{self, OfflineSolution, OracleError, OracleTier, Reference, ReferenceKind};
use crate::ppo::{self, DualState, TrainConfig, TrainError};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("missing file {0}")]
    MissingFile(PathBuf),
    #[error("invalid experiment config: {0}")]
    Config(String),
    #[error("training failed: {0}")]
    Train(#[from] TrainError),
    #[error("offline solver: {0}")]
    Oracle(#[from] OracleError),
    #[error("policy does not fit instance {instance}: {message}")]
    Mismatch { instance: String, message: String },
    #[error("training day {0} is also an evaluation day")]
    Leakage(String),
    #[error(transparent)]
    Gen(#[from] GenError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Baseline(#[from] BaselineError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, ExperimentError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PolicyName {
    PpoOpa,
    PpoPd,
    Proportion,
    Pdo,
    Greedy,
}

impl PolicyName {
    pub const ALL: [PolicyName; 5] = [Self::PpoOpa, Self::PpoPd, Self::Proportion, Self::Pdo, Self::Greedy];

    /// Row label in reports.
    pub fn label(self) -> &'static str {
        match self {
            Self::PpoOpa => "PPO-OPA",
            Self::PpoPd => "PPO-PD",
            Self::Proportion => "Proportion",
            Self::Pdo => "PDO",
            Self::Greedy => "Greedy",
        }
    }

    pub fn slug(self) -> &'static str {
        match self {
            Self::PpoOpa => "ppo-opa",
            Self::PpoPd => "ppo-pd",
            Self::Proportion => "proportion",
            Self::Pdo => "pdo",
            Self::Greedy => "greedy",
        }
    }

    pub fn from_label(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|p| p.label() == s)
    }
}

impl fmt::Display for PolicyName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.slug())
    }
}

impl FromStr for PolicyName {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Self::ALL.into_iter().find(|p| p.slug() == s).ok_or_else(|| format!("unknown policy {s:?} (ppo-opa, ppo-pd, proportion, pdo, greedy)"))
    }
}

/// A ready-to-run policy.
#[derive(Debug, Clone, Copy)]
pub enum Policy<'a> {
    Greedy,
    Proportion(&'a ProportionTable),
    /// Duals start at zero on every day; the day's volume is given.
    Pdo { eta_scale: f64 },
    /// Samples from the actor unless `argmax`.
    Ppo { actor: &'a ActorParams, argmax: bool },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub report: Report,
    pub records: Vec<LogRecord>,
}

fn check_vocabulary(actor: &ActorParams, instance: &Instance) -> Result<()> {
    let cfg = actor.config();
    let (locs, provs) = (instance.location_names().len(), instance.provider_names().len());
    if locs > cfg.n_locations || provs > cfg.n_providers {
        return Err(ExperimentError::Mismatch {
            instance: instance.label().to_string(),
            message: format!(
                "instance has {locs} locations and {provs} providers, actor knows {} and {}",
                cfg.n_locations, cfg.n_providers
            ),
        });
    }
    Ok(())
}

/// One full rollout of `policy`. Randomness comes only from `seed`.
pub fn evaluate(policy: Policy<'_>, instance: &Instance, seed: u64, weights: ShapingWeights) -> Result<Evaluation> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut duals = match policy {
        Policy::Pdo { eta_scale } => Some(DualPrices::new(instance, eta_scale, instance.m())?),
        Policy::Ppo { actor, .. } => {
            check_vocabulary(actor, instance)?;
            None
        }
        _ => None,
    };
    let (mut env, mut obs) = Env::reset(instance, weights);
    let mut records = Vec::with_capacity(instance.m());
    while let Some(parcel) = env.current_parcel() {
        let action = match policy {
            Policy::Greedy => baselines::greedy_assign(instance, parcel),
            Policy::Proportion(table) => baselines::proportion_assign(table, instance, parcel, &mut rng),
            Policy::Pdo { .. } => baselines::pdo_assign(duals.as_ref().expect("pdo duals"), instance, parcel),
            Policy::Ppo { actor, argmax } => {
                let probs = actor.probabilities(&obs).map_err(TrainError::from)?;
                if argmax {
                    let mut best = 0;
                    for (j, &p) in probs.iter().enumerate() {
                        if p > probs[best] {
                            best = j;
                        }
                    }
                    best
                } else {
                    ppo::sample_index(&probs, &mut rng)
                }
            }
        };
        let t = env.state().t;
        let out = env.step(action)?;
        let assignment = env.state().assignment_log.last().expect("step logs the assignment");
        records.push(LogRecord::new(t, instance, assignment, &out.reward));
        if let Some(d) = duals.as_mut() {
            baselines::pdo_update(d, instance, env.state());
        }
        match out.next {
            Some(o) => obs = o,
            None => break,
        }
    }
    Ok(Evaluation { report: env.finalize()?, records })
}

/// Explicit instance files instead of generated days.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InstanceFiles {
    pub train: PathBuf,
    pub eval: Vec<PathBuf>,
    #[serde(default)]
    pub history: Vec<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// One full protocol run per seed. With generated data each seed is a
    /// separate synthetic world.
    pub seeds: Vec<u64>,
    pub generator: GenConfig,
    pub instances: Option<InstanceFiles>,
    /// Days before T used to fit the Proportion baseline.
    pub history_days: usize,
    pub eval_days: usize,
    pub policies: Vec<PolicyName>,
    pub oracle_tier: OracleTier,
    pub oracle_budget: u64,
    pub bound_iterations: usize,
    pub train: TrainConfig,
    pub pdo_eta_scale: f64,
    pub ppo_argmax: bool,
    /// Weights of the shaping terms recorded in evaluation logs.
    pub log_shaping: ShapingWeights,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seeds: vec![0],
            generator: GenConfig::default(),
            instances: None,
            history_days: 30,
            eval_days: 3,
            policies: PolicyName::ALL.to_vec(),
            oracle_tier: OracleTier::Auto,
            oracle_budget: oracle::DEFAULT_BUDGET as u64,
            bound_iterations: oracle::DEFAULT_BOUND_ITERATIONS,
            train: TrainConfig::desk(),
            pdo_eta_scale: baselines::DEFAULT_PDO_ETA_SCALE,
            ppo_argmax: false,
            log_shaping: ShapingWeights::default(),
        }
    }
}

/// Read a TOML config file.
pub fn load_toml<T: serde::de::DeserializeOwned>(path: impl AsRef<Path>) -> Result<T> {
    let path = path.as_ref();
    if !path.exists() {
        return Err(ExperimentError::MissingFile(path.to_path_buf()));
    }
    let text = std::fs::read_to_string(path)?;
    toml::from_str(&text).map_err(|e| ExperimentError::Config(format!("{}: {e}", path.display())))
}

impl ExperimentConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let cfg: Self = load_toml(path)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(ExperimentError::Config(m.to_string()));
        if self.policies.is_empty() {
            return bad("at least one policy is required");
        }
        if self.seeds.is_empty() {
            return bad("at least one seed is required");
        }
        match &self.instances {
            Some(files) if files.eval.is_empty() => return bad("at least one evaluation day is required"),
            None if self.eval_days == 0 => return bad("at least one evaluation day is required"),
            _ => {}
        }
        if self.policies.contains(&PolicyName::Proportion) && self.instances.as_ref().map_or(self.history_days, |f| f.history.len()) == 0 {
            return bad("the proportion policy needs history days");
        }
        if !(self.pdo_eta_scale >= 0.0) {
            return bad("pdo_eta_scale must be non-negative");
        }
        self.train.validate()?;
        self.generator.validate()?;
        Ok(())
    }
}

/// Instances of one protocol run.
#[derive(Debug, Clone)]
pub struct Days {
    pub history: Vec<Instance>,
    pub train: Instance,
    pub eval: Vec<Instance>,
}

pub fn load_instance(path: &Path) -> Result<Instance> {
    if !path.exists() {
        return Err(ExperimentError::MissingFile(path.to_path_buf()));
    }
    Ok(Instance::load(path)?)
}

/// Generated days come from one history: `history_days` days, then T,
/// then the evaluation days.
pub fn prepare_days(cfg: &ExperimentConfig, seed: u64) -> Result<Days> {
    let days = match &cfg.instances {
        Some(files) => Days {
            history: files.history.iter().map(|p| load_instance(p)).collect::<Result<_>>()?,
            train: load_instance(&files.train)?,
            eval: files.eval.iter().map(|p| load_instance(p)).collect::<Result<_>>()?,
        },
        None => {
            let gen = GenConfig { seed, ..cfg.generator.clone() };
            let mut all = datagen::generate_history(&gen, cfg.history_days + 1 + cfg.eval_days)?;
            let eval = all.split_off(cfg.history_days + 1);
            let train = all.pop().expect("history has the training day");
            Days { history: all, train, eval }
        }
    };
    check_leakage(&days)?;
    Ok(days)
}

pub fn check_leakage(days: &Days) -> Result<()> {
    for e in &days.eval {
        if e.label() == days.train.label() || e == &days.train {
            return Err(ExperimentError::Leakage(days.train.label().to_string()));
        }
    }
    Ok(())
}

/// Trained and fitted policy parameters of one run.
#[derive(Debug, Clone, Default)]
pub struct Trained {
    pub ppo_opa: Option<ppo::TrainOutcome>,
    pub ppo_pd: Option<ppo::TrainOutcome>,
    pub proportion: Option<ProportionTable>,
}

pub fn prepare_policies(cfg: &ExperimentConfig, days: &Days, seed: u64) -> Result<Trained> {
    let mut out = Trained::default();
    let train_cfg = TrainConfig {
        seed: cfg.train.seed.wrapping_add(seed),
        net: cfg.train.net.clone().with_vocabulary(&days.train),
        ..cfg.train.clone()
    };
    if cfg.policies.contains(&PolicyName::PpoOpa) {
        log::info!("seed {seed}: training PPO-OPA on {}", days.train.label());
        out.ppo_opa = Some(ppo::train(&days.train, &train_cfg)?);
    }
    if cfg.policies.contains(&PolicyName::PpoPd) {
        log::info!("seed {seed}: training PPO-PD on {}", days.train.label());
        let dual = DualState::new(&days.train, train_cfg.dual_step);
        out.ppo_pd = Some(ppo::train_ppo_pd(&days.train, &train_cfg, dual)?);
    }
    if cfg.policies.contains(&PolicyName::Proportion) {
        log::info!("seed {seed}: fitting proportions on {} days", days.history.len());
        out.proportion =
            Some(baselines::fit_proportions(&days.history, cfg.oracle_tier, cfg.oracle_budget as u128, cfg.bound_iterations)?);
    }
    Ok(out)
}

/// One report row.
#[derive(Debug, Clone, PartialEq)]
pub struct Row {
    pub policy: PolicyName,
    pub report: Report,
    pub gap: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct DayResult {
    pub seed: u64,
    pub instance: Instance,
    pub solution: OfflineSolution,
    pub reference: Option<Reference>,
    pub rows: Vec<Row>,
    pub logs: Vec<Vec<LogRecord>>,
}

impl DayResult {
    pub fn row(&self, p: PolicyName) -> Option<&Row> {
        self.rows.iter().find(|r| r.policy == p)
    }
}

fn eval_seed(seed: u64, day: usize, policy: PolicyName) -> u64 {
    let p = PolicyName::ALL.iter().position(|&q| q == policy).unwrap() as u64;
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ ((day as u64) << 8) ^ p
}

impl Trained {
    /// The policies of `cfg.policies`, in order. Panics if one of them was
    /// not prepared.
    pub fn policies(&self, cfg: &ExperimentConfig) -> Vec<(PolicyName, Policy<'_>)> {
        cfg.policies
            .iter()
            .map(|&name| {
                let p = match name {
                    PolicyName::Greedy => Policy::Greedy,
                    PolicyName::Pdo => Policy::Pdo { eta_scale: cfg.pdo_eta_scale },
                    PolicyName::Proportion => Policy::Proportion(self.proportion.as_ref().expect("proportions fitted")),
                    PolicyName::PpoOpa => Policy::Ppo { actor: &self.ppo_opa.as_ref().expect("trained").actor, argmax: cfg.ppo_argmax },
                    PolicyName::PpoPd => Policy::Ppo { actor: &self.ppo_pd.as_ref().expect("trained").actor, argmax: cfg.ppo_argmax },
                };
                (name, p)
            })
            .collect()
    }
}

/// Solve `instance` offline and evaluate each policy on it.
pub fn evaluate_day(
    cfg: &ExperimentConfig,
    policies: &[(PolicyName, Policy<'_>)],
    seed: u64,
    day: usize,
    instance: &Instance,
) -> Result<DayResult> {
    let solution = oracle::solve(instance, cfg.oracle_tier, cfg.oracle_budget as u128, cfg.bound_iterations)?;
    let reference = Some(solution.reference(instance.m())).filter(|r| r.average_cost.is_finite() && r.average_cost > 0.0);
    let mut rows = Vec::new();
    let mut logs = Vec::new();
    for &(name, policy) in policies {
        let ev = evaluate(policy, instance, eval_seed(seed, day, name), cfg.log_shaping)?;
        let gap = reference.map(|r| oracle::ip_gap(ev.report.average_cost, r.average_cost)).transpose()?;
        rows.push(Row { policy: name, report: ev.report, gap });
        logs.push(ev.records);
    }
    Ok(DayResult { seed, instance: instance.clone(), solution, reference, rows, logs })
}

pub const REPORT_HEADER: &str =
    "day\talgorithm\tparcels\taverage_cost\tip_gap\tviolation_rate\tviolation_count\treference_average_cost\treference_kind\tlog";

fn reference_kind_slug(kind: ReferenceKind) -> &'static str {
    match kind {
        ReferenceKind::Optimum => "optimum",
        ReferenceKind::LowerBound => "lower-bound",
    }
}

pub fn log_file_name(p: PolicyName) -> String {
    format!("logs/{}.tsv", p.slug())
}

/// Machine-readable report; floats are written in round-trip form.
pub fn report_tsv(day: &DayResult) -> String {
    let mut s = String::new();
    writeln!(s, "{REPORT_HEADER}").unwrap();
    let (ref_cost, ref_kind) = match day.reference {
        Some(r) => (format!("{:?}", r.average_cost), reference_kind_slug(r.kind)),
        None => ("NA".to_string(), "none"),
    };
    for r in &day.rows {
        let gap = r.gap.map_or("NA".to_string(), |g| format!("{g:?}"));
        writeln!(
            s,
            "{}\t{}\t{}\t{:?}\t{gap}\t{:?}\t{}\t{ref_cost}\t{ref_kind}\t{}",
            day.instance.label(),
            r.policy.label(),
            r.report.parcels_assigned,
            r.report.average_cost,
            r.report.violation_rate,
            r.report.violation_count,
            log_file_name(r.policy),
        )
        .unwrap();
    }
    s
}

/// Human-readable table with the columns of the paper-style summary.
pub fn report_table(day: &DayResult) -> String {
    let mut s = String::new();
    let gap_title = day.reference.map_or("IP Gap", |r| if r.kind == ReferenceKind::Optimum { "IP Gap" } else { "Gap vs LB" });
    match day.reference {
        Some(r) => writeln!(s, "Day {}: {} parcels, reference {:.3} ({})", day.instance.label(), day.instance.m(), r.average_cost, r.kind.label()),
        None => writeln!(s, "Day {}: {} parcels, no feasible offline solution", day.instance.label(), day.instance.m()),
    }
    .unwrap();
    writeln!(s, "{:<12} {:>14} {:>12} {:>16}", "Algorithm", "Average Cost", gap_title, "Violation Rate").unwrap();
    for r in &day.rows {
        let gap = r.gap.map_or("n/a".to_string(), |g| format!("{:.4}%", 100.0 * g));
        writeln!(s, "{:<12} {:>14.3} {:>12} {:>15.2}%", r.policy.label(), r.report.average_cost, gap, 100.0 * r.report.violation_rate).unwrap();
    }
    s
}

pub fn day_dir(out: &Path, seed: u64, label: &str) -> PathBuf {
    out.join(format!("seed-{seed}")).join(label)
}

pub fn write_day(out: &Path, day: &DayResult) -> Result<()> {
    write_day_to(&day_dir(out, day.seed, day.instance.label()), day)
}

/// Instance, offline solution, logs and both report forms into `dir`.
pub fn write_day_to(dir: &Path, day: &DayResult) -> Result<()> {
    std::fs::create_dir_all(dir.join("logs"))?;
    day.instance.save(dir.join("instance.txt"))?;
    oracle::save_solution(dir.join("solution.txt"), &day.instance, &day.solution)?;
    for (r, log) in day.rows.iter().zip(&day.logs) {
        env::write_log(dir.join(log_file_name(r.policy)), log)?;
    }
    std::fs::write(dir.join("report.tsv"), report_tsv(day))?;
    std::fs::write(dir.join("report.txt"), report_table(day))?;
    Ok(())
}

pub fn write_trained(out: &Path, seed: u64, trained: &Trained) -> Result<()> {
    let dir = out.join(format!("seed-{seed}"));
    std::fs::create_dir_all(&dir)?;
    for (name, outcome) in [(PolicyName::PpoOpa, &trained.ppo_opa), (PolicyName::PpoPd, &trained.ppo_pd)] {
        if let Some(o) = outcome {
            let d = dir.join(name.slug());
            std::fs::create_dir_all(&d)?;
            o.actor.save(d.join("actor.json")).map_err(TrainError::from)?;
            o.reward_net.save(d.join("reward_net.json")).map_err(TrainError::from)?;
            ppo::write_train_log(d.join("train_log.tsv"), &o.metrics)?;
        }
    }
    if let Some(t) = &trained.proportion {
        t.save(dir.join("proportions.tsv"))?;
    }
    Ok(())
}

pub const SUMMARY_HEADER: &str = "seed\tday\talgorithm\taverage_cost\tip_gap\tviolation_rate";

pub fn summary_tsv(days: &[DayResult]) -> String {
    let mut s = String::new();
    writeln!(s, "{SUMMARY_HEADER}").unwrap();
    for d in days {
        for r in &d.rows {
            let gap = r.gap.map_or("NA".to_string(), |g| format!("{g:.6}"));
            writeln!(s, "{}\t{}\t{}\t{:.4}\t{gap}\t{:.6}", d.seed, d.instance.label(), r.policy.label(), r.report.average_cost, r.report.violation_rate).unwrap();
        }
    }
    s
}

/// Full protocol for one seed; nothing is written.
pub fn run_seed(cfg: &ExperimentConfig, seed: u64) -> Result<(Trained, Vec<DayResult>)> {
    let days = prepare_days(cfg, seed)?;
    let trained = prepare_policies(cfg, &days, seed)?;
    let results = days
        .eval
        .par_iter()
        .enumerate()
        .map(|(i, inst)| evaluate_day(cfg, &trained.policies(cfg), seed, i, inst))
        .collect::<Result<Vec<_>>>()?;
    Ok((trained, results))
}

/// Run every seed and write reports, logs and trained parameters to `out`.
pub fn run(cfg: &ExperimentConfig, out: &Path) -> Result<Vec<DayResult>> {
    cfg.validate()?;
    std::fs::create_dir_all(out)?;
    let mut all = Vec::new();
    for &seed in &cfg.seeds {
        let (trained, days) = run_seed(cfg, seed)?;
        write_trained(out, seed, &trained)?;
        for d in &days {
            write_day(out, d)?;
            log::info!("\n{}", report_table(d));
        }
        all.extend(days);
    }
    std::fs::write(out.join("summary.tsv"), summary_tsv(&all))?;
    Ok(all)
}
