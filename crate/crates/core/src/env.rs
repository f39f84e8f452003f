//! The online assignment MDP: constraint bookkeeping, shaped reward,
//! observation featurization and end-of-day metrics.
//!
//! The state tracks cumulative hub usage and, for every proportion
//! constraint, how many parcels of its OD pair were seen and how many of
//! those went to its provider. The policy never learns the day's volume `m`;
//! it only sees the current parcel and the constraint state folded into the
//! per-route feature rows.

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::Path;

use thiserror::Error;

use crate::model::{ConstraintKind, Instance, Parcel, RouteId};

#[derive(Debug, Error, PartialEq)]
pub enum EnvError {
    #[error("step {t}: action {action} is not a real candidate")]
    InvalidAction { t: usize, action: usize },
    #[error("episode already ended")]
    EpisodeOver,
    #[error("episode has not ended (t = {t}, m = {m})")]
    NotFinished { t: usize, m: usize },
}

/// λ weights of the capacity and proportion shaping terms.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ShapingWeights {
    pub capacity: f64,
    pub proportion: f64,
}

impl Default for ShapingWeights {
    fn default() -> Self {
        Self { capacity: 10.0, proportion: 300.0 }
    }
}

impl ShapingWeights {
    pub const NONE: Self = Self { capacity: 0.0, proportion: 0.0 };
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct PropCounter {
    /// Parcels of the constraint's OD pair observed so far.
    pub seen: u32,
    /// Of those, parcels assigned to the constraint's provider.
    pub target: u32,
}

impl PropCounter {
    /// Current share, defined as 0 before any matching parcel arrived.
    pub fn share(&self) -> f64 {
        self.target as f64 / self.seen.max(1) as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Assignment {
    pub parcel: usize,
    pub candidate: usize,
    pub route: RouteId,
    pub cost: f64,
}

/// Live constraint status `s_t`.
#[derive(Debug, Clone, PartialEq)]
pub struct EnvState {
    pub t: usize,
    /// Cumulative parcels routed through each hub, indexed by hub.
    pub hub_used: Vec<u32>,
    /// Indexed by constraint; entries of capacity constraints stay zero.
    pub prop_counters: Vec<PropCounter>,
    pub assignment_log: Vec<Assignment>,
}

impl EnvState {
    pub fn initial(instance: &Instance) -> Self {
        Self {
            t: 0,
            hub_used: vec![0; instance.hub_names().len()],
            prop_counters: vec![PropCounter::default(); instance.constraints().len()],
            assignment_log: Vec::with_capacity(instance.m()),
        }
    }

    /// Rebuild all counters from scratch by replaying the assignment log.
    pub fn replay(instance: &Instance, log: &[Assignment]) -> Self {
        let mut state = Self::initial(instance);
        for a in log {
            state.apply(instance, &instance.parcels()[a.parcel], a.candidate);
        }
        state
    }

    fn apply(&mut self, instance: &Instance, parcel: &Parcel, action: usize) {
        let cand = parcel.candidates[action];
        let route = instance.route(cand.route);
        for h in &route.hubs {
            self.hub_used[h.index()] += 1;
        }
        for &k in instance.proportions_of_od(parcel.od()) {
            let c = &mut self.prop_counters[k];
            c.seen += 1;
            if let ConstraintKind::Proportion { provider, .. } = instance.constraints()[k].kind {
                if route.provider == provider {
                    c.target += 1;
                }
            }
        }
        self.assignment_log.push(Assignment { parcel: parcel.id, candidate: action, route: cand.route, cost: cand.cost });
        self.t += 1;
    }

    pub fn is_done(&self, instance: &Instance) -> bool {
        self.t >= instance.m()
    }
}

/// Unweighted shaping term of constraint `k` in the current state.
///
/// Capacity: `exp(-h/U)` with `h` the cumulative usage. Proportion: positive
/// below the band, negative above, zero inside.
pub fn shaping(state: &EnvState, instance: &Instance, k: usize) -> f64 {
    match instance.constraints()[k].kind {
        ConstraintKind::Capacity { hub, upper } => (-(state.hub_used[hub.index()] as f64) / upper as f64).exp(),
        ConstraintKind::Proportion { p_lower, p_upper, .. } => {
            let p = state.prop_counters[k].share();
            if p < p_lower {
                p_lower - p
            } else if p > p_upper {
                -(p - p_upper)
            } else {
                0.0
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RewardBreakdown {
    pub reward: f64,
    pub cost: f64,
    /// λ-weighted shaping term per touched constraint.
    pub terms: Vec<(usize, f64)>,
}

/// `-c + Σ λ_kind f_k` over the constraints the chosen route touches,
/// evaluated on the state before the assignment.
pub fn reward(
    state: &EnvState,
    instance: &Instance,
    parcel: &Parcel,
    action: usize,
    weights: ShapingWeights,
) -> Result<RewardBreakdown, EnvError> {
    let cand = parcel.candidates.get(action).ok_or(EnvError::InvalidAction { t: state.t, action })?;
    let mut total = -cand.cost;
    let mut terms = Vec::new();
    for &k in instance.constraints_of_route(cand.route) {
        let lambda = if instance.constraints()[k].is_capacity() { weights.capacity } else { weights.proportion };
        let term = lambda * shaping(state, instance, k);
        total += term;
        terms.push((k, term));
    }
    Ok(RewardBreakdown { reward: total, cost: cand.cost, terms })
}

pub const PARCEL_FEATURES: usize = 2;
pub const ROUTE_FEATURES: usize = 5;
/// Band deviations are a few hundredths; rescale them to order one.
pub const PROPORTION_FEATURE_UNIT: f64 = 0.05;
pub const PROPORTION_FEATURE_CLAMP: f64 = 4.0;

/// Featurized incoming parcel `o_t`, padded to `N_R` route slots.
///
/// Categorical slots hold `index + 1`; 0 is reserved for padding so that
/// fictitious rows are entirely zero.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    /// Normalized weight, candidate count over `N_R`.
    pub parcel: [f64; PARCEL_FEATURES],
    pub origin: usize,
    pub destination: usize,
    /// Per slot: cost over the instance's max cost, cost above the parcel's
    /// cheapest candidate (scaled), max and mean utilization of the
    /// capacity-constrained hubs on the route, summed proportion deviation in
    /// units of `PROPORTION_FEATURE_UNIT`, clamped to `±PROPORTION_FEATURE_CLAMP`.
    pub routes: Vec<[f64; ROUTE_FEATURES]>,
    pub providers: Vec<usize>,
    pub mask: Vec<bool>,
}

impl Observation {
    pub fn n_slots(&self) -> usize {
        self.mask.len()
    }
}

/// Instance-level normalization constants for featurization.
#[derive(Debug, Clone, Copy)]
pub struct Featurizer {
    n_slots: usize,
    max_cost: f64,
    max_weight: f64,
    spread_scale: f64,
}

impl Featurizer {
    pub fn new(instance: &Instance) -> Self {
        let max_cost = instance.max_candidate_cost();
        let max_weight = instance.parcels().iter().map(|p| p.weight).fold(1e-12, f64::max);
        let spread: f64 = instance
            .parcels()
            .iter()
            .map(|p| {
                let (lo, hi) = p
                    .candidates
                    .iter()
                    .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), c| (lo.min(c.cost), hi.max(c.cost)));
                hi - lo
            })
            .sum::<f64>()
            / instance.m() as f64;
        Self { n_slots: instance.n_r_max(), max_cost, max_weight, spread_scale: spread.max(1e-3 * max_cost) }
    }

    pub fn observe(&self, state: &EnvState, instance: &Instance, parcel: &Parcel) -> Observation {
        let n = self.n_slots.max(parcel.candidates.len());
        let mut routes = vec![[0.0; ROUTE_FEATURES]; n];
        let mut providers = vec![0; n];
        let mut mask = vec![false; n];
        let cheapest = parcel.candidates.iter().map(|c| c.cost).fold(f64::INFINITY, f64::min);
        for (j, c) in parcel.candidates.iter().enumerate() {
            let route = instance.route(c.route);
            let (mut max_u, mut sum_u, mut n_u, mut dev) = (0.0f64, 0.0, 0usize, 0.0);
            for &k in instance.constraints_of_route(c.route) {
                match instance.constraints()[k].kind {
                    ConstraintKind::Capacity { hub, upper } => {
                        let u = state.hub_used[hub.index()] as f64 / upper as f64;
                        max_u = max_u.max(u);
                        sum_u += u;
                        n_u += 1;
                    }
                    ConstraintKind::Proportion { .. } => dev += shaping(state, instance, k),
                }
            }
            routes[j] = [
                c.cost / self.max_cost,
                (c.cost - cheapest) / self.spread_scale,
                max_u,
                if n_u > 0 { sum_u / n_u as f64 } else { 0.0 },
                (dev / PROPORTION_FEATURE_UNIT).clamp(-PROPORTION_FEATURE_CLAMP, PROPORTION_FEATURE_CLAMP),
            ];
            providers[j] = route.provider.index() + 1;
            mask[j] = true;
        }
        Observation {
            parcel: [parcel.weight / self.max_weight, parcel.candidates.len() as f64 / n as f64],
            origin: parcel.origin.index() + 1,
            destination: parcel.destination.index() + 1,
            routes,
            providers,
            mask,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub reward: RewardBreakdown,
    /// `None` once the last parcel has been assigned.
    pub next: Option<Observation>,
}

/// One rollout over an immutable instance.
#[derive(Debug, Clone)]
pub struct Env<'a> {
    instance: &'a Instance,
    state: EnvState,
    weights: ShapingWeights,
    featurizer: Featurizer,
}

impl<'a> Env<'a> {
    pub fn reset(instance: &'a Instance, weights: ShapingWeights) -> (Self, Observation) {
        let env = Self { instance, state: EnvState::initial(instance), weights, featurizer: Featurizer::new(instance) };
        let obs = env.observe();
        (env, obs)
    }

    pub fn instance(&self) -> &'a Instance {
        self.instance
    }

    pub fn state(&self) -> &EnvState {
        &self.state
    }

    pub fn is_done(&self) -> bool {
        self.state.is_done(self.instance)
    }

    /// The parcel awaiting assignment, if any.
    pub fn current_parcel(&self) -> Option<&'a Parcel> {
        self.instance.parcels().get(self.state.t)
    }

    fn observe(&self) -> Observation {
        let parcel = &self.instance.parcels()[self.state.t];
        self.featurizer.observe(&self.state, self.instance, parcel)
    }

    pub fn step(&mut self, action: usize) -> Result<StepOutcome, EnvError> {
        let parcel = self.current_parcel().ok_or(EnvError::EpisodeOver)?;
        let reward = reward(&self.state, self.instance, parcel, action, self.weights)?;
        self.state.apply(self.instance, parcel, action);
        let next = (!self.is_done()).then(|| self.observe());
        Ok(StepOutcome { reward, next })
    }

    pub fn finalize(&self) -> Result<Report, EnvError> {
        finalize(&self.state, self.instance)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConstraintOutcome {
    pub id: String,
    /// Final hub count for capacity, final share for proportion.
    pub value: f64,
    pub violating: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    pub parcels_assigned: usize,
    pub total_cost: f64,
    pub average_cost: f64,
    pub violation_count: usize,
    pub violation_rate: f64,
    pub constraints: Vec<ConstraintOutcome>,
}

/// Round `x` up, ignoring float noise of order 1e-9.
pub(crate) fn ceil_count(x: f64) -> usize {
    (x - 1e-9).ceil().max(0.0) as usize
}

/// End-of-day metrics.
///
/// Capacity: the chronologically last `max(0, count - U)` parcels through
/// the hub violate. Proportion: with final share `p` over `n` parcels of the
/// OD pair, `ceil((p - p_hi) n)` of the latest provider assignments violate
/// when above the band, `ceil((p_lo - p) n)` of the latest non-provider
/// assignments when below. A parcel flagged by several constraints counts
/// once.
pub fn finalize(state: &EnvState, instance: &Instance) -> Result<Report, EnvError> {
    if !state.is_done(instance) {
        return Err(EnvError::NotFinished { t: state.t, m: instance.m() });
    }
    let log = &state.assignment_log;
    let total_cost: f64 = log.iter().map(|a| a.cost).sum();
    let mut flagged = vec![false; instance.m()];
    let mut outcomes = Vec::with_capacity(instance.constraints().len());
    for (k, spec) in instance.constraints().iter().enumerate() {
        let (value, violating) = match spec.kind {
            ConstraintKind::Capacity { hub, upper } => {
                let count = state.hub_used[hub.index()];
                let over = count.saturating_sub(upper) as usize;
                let hits = log.iter().rev().filter(|a| instance.route(a.route).hubs.contains(&hub));
                for a in hits.take(over) {
                    flagged[a.parcel] = true;
                }
                (count as f64, over)
            }
            ConstraintKind::Proportion { origin, destination, provider, p_lower, p_upper } => {
                let c = state.prop_counters[k];
                let p = c.share();
                let n = c.seen as f64;
                let in_od = |a: &&Assignment| instance.parcels()[a.parcel].od() == (origin, destination);
                let on_provider = |a: &Assignment| instance.route(a.route).provider == provider;
                let over = if p > p_upper {
                    let v = ceil_count((p - p_upper) * n);
                    for a in log.iter().rev().filter(in_od).filter(|a| on_provider(a)).take(v) {
                        flagged[a.parcel] = true;
                    }
                    v
                } else if p < p_lower {
                    let v = ceil_count((p_lower - p) * n);
                    for a in log.iter().rev().filter(in_od).filter(|a| !on_provider(a)).take(v) {
                        flagged[a.parcel] = true;
                    }
                    v
                } else {
                    0
                };
                (p, over)
            }
        };
        outcomes.push(ConstraintOutcome { id: spec.id.clone(), value, violating });
    }
    let violation_count = flagged.iter().filter(|&&f| f).count();
    let m = log.len();
    Ok(Report {
        parcels_assigned: m,
        total_cost,
        average_cost: total_cost / m as f64,
        violation_count,
        violation_rate: violation_count as f64 / instance.m() as f64,
        constraints: outcomes,
    })
}

/// One line of a rollout log.
#[derive(Debug, Clone, PartialEq)]
pub struct LogRecord {
    pub t: usize,
    pub parcel: usize,
    pub route: String,
    pub cost: f64,
    pub reward: f64,
    /// (constraint id, λ-weighted shaping term).
    pub terms: Vec<(String, f64)>,
}

pub const LOG_HEADER: &str = "t\tparcel\troute\tcost\treward\tshaping";

impl LogRecord {
    pub fn new(t: usize, instance: &Instance, a: &Assignment, r: &RewardBreakdown) -> Self {
        Self {
            t,
            parcel: a.parcel,
            route: instance.route(a.route).id.clone(),
            cost: a.cost,
            reward: r.reward,
            terms: r.terms.iter().map(|&(k, v)| (instance.constraints()[k].id.clone(), v)).collect(),
        }
    }

    /// Tab separated; shaping terms as `id=value` joined by `;`, `-` if none.
    pub fn to_line(&self) -> String {
        let mut s = format!("{}\t{}\t{}\t{:?}\t{:?}\t", self.t, self.parcel, self.route, self.cost, self.reward);
        if self.terms.is_empty() {
            s.push('-');
        }
        for (i, (id, v)) in self.terms.iter().enumerate() {
            if i > 0 {
                s.push(';');
            }
            let _ = write!(s, "{id}={v:?}");
        }
        s
    }
}

pub fn write_log(path: impl AsRef<Path>, records: &[LogRecord]) -> std::io::Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(out, "{LOG_HEADER}")?;
    for r in records {
        writeln!(out, "{}", r.to_line())?;
    }
    out.flush()
}
