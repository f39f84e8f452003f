//! Comparison policies: greedy cheapest route, historical route proportions
//! and primal-dual pricing with linear pacing.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;
use thiserror::Error;

use crate::env::EnvState;
use crate::model::{ConstraintKind, Instance, Parcel};
use crate::oracle::{self, OracleTier};

#[derive(Debug, Error)]
pub enum BaselineError {
    #[error("no historical day could be solved")]
    NoHistory,
    #[error("total volume must be positive")]
    NoVolume,
    #[error("proportion table line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, BaselineError>;

/// Cheapest candidate; ties go to the lexicographically smaller route id.
pub fn greedy_assign(instance: &Instance, parcel: &Parcel) -> usize {
    let mut best = 0;
    for (j, c) in parcel.candidates.iter().enumerate().skip(1) {
        let b = &parcel.candidates[best];
        if c.cost < b.cost || (c.cost == b.cost && instance.route(c.route).id < instance.route(b.route).id) {
            best = j;
        }
    }
    best
}

/// Parcel type: OD names and the sorted candidate route ids.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct TypeKey {
    pub origin: String,
    pub destination: String,
    pub routes: Vec<String>,
}

impl TypeKey {
    pub fn of(instance: &Instance, parcel: &Parcel) -> Self {
        let mut routes: Vec<String> = parcel.candidates.iter().map(|c| instance.route(c.route).id.clone()).collect();
        routes.sort();
        Self {
            origin: instance.location_names()[parcel.origin.index()].clone(),
            destination: instance.location_names()[parcel.destination.index()].clone(),
            routes,
        }
    }
}

/// Route frequencies per parcel type, aligned with `TypeKey::routes`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ProportionTable {
    pub entries: BTreeMap<TypeKey, Vec<f64>>,
}

pub const PROPORTION_HEADER: &str = "origin\tdestination\troutes\tprobabilities";

impl ProportionTable {
    /// Pool per-type route counts over the given assignments.
    pub fn from_assignments<'a>(days: impl IntoIterator<Item = (&'a Instance, &'a [usize])>) -> Self {
        let mut counts: BTreeMap<TypeKey, Vec<f64>> = BTreeMap::new();
        for (instance, assignment) in days {
            for (p, &a) in instance.parcels().iter().zip(assignment) {
                let key = TypeKey::of(instance, p);
                let chosen = &instance.route(p.candidates[a].route).id;
                let slot = key.routes.iter().position(|r| r == chosen).expect("chosen route is a candidate");
                let n = key.routes.len();
                counts.entry(key).or_insert_with(|| vec![0.0; n])[slot] += 1.0;
            }
        }
        for v in counts.values_mut() {
            let total: f64 = v.iter().sum();
            v.iter_mut().for_each(|x| *x /= total);
        }
        Self { entries: counts }
    }

    /// Probabilities over the parcel's candidates in their own order;
    /// uniform for unseen types.
    pub fn probabilities(&self, instance: &Instance, parcel: &Parcel) -> Vec<f64> {
        let key = TypeKey::of(instance, parcel);
        match self.entries.get(&key) {
            Some(v) => parcel
                .candidates
                .iter()
                .map(|c| {
                    let id = &instance.route(c.route).id;
                    v[key.routes.iter().position(|r| r == id).expect("same route set")]
                })
                .collect(),
            None => vec![1.0 / parcel.candidates.len() as f64; parcel.candidates.len()],
        }
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        writeln!(s, "{PROPORTION_HEADER}").unwrap();
        for (k, v) in &self.entries {
            let probs: Vec<String> = v.iter().map(|p| format!("{p:?}")).collect();
            writeln!(s, "{}\t{}\t{}\t{}", k.origin, k.destination, k.routes.join(","), probs.join(",")).unwrap();
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, h)) if h.trim_end() == PROPORTION_HEADER => {}
            _ => return Err(BaselineError::Parse { line: 1, message: "missing header".into() }),
        }
        for (i, line) in lines {
            let err = |message: &str| BaselineError::Parse { line: i + 1, message: message.into() };
            if line.trim().is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 4 {
                return Err(err("expected 4 fields"));
            }
            let routes: Vec<String> = f[2].split(',').map(str::to_string).collect();
            let probs: Vec<f64> = f[3].split(',').map(|p| p.parse::<f64>().map_err(|_| err("bad probability"))).collect::<Result<_>>()?;
            if probs.len() != routes.len() || probs.iter().any(|&p| !(0.0..=1.0).contains(&p)) {
                return Err(err("probabilities do not match routes"));
            }
            if (probs.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
                return Err(err("probabilities must sum to 1"));
            }
            entries.insert(TypeKey { origin: f[0].into(), destination: f[1].into(), routes }, probs);
        }
        Ok(Self { entries })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }
}

/// Solve every historical day offline and pool the route choices. Days the
/// oracle cannot solve feasibly are skipped.
pub fn fit_proportions(history: &[Instance], tier: OracleTier, budget: u128, iterations: usize) -> Result<ProportionTable> {
    let mut solved = Vec::new();
    for day in history {
        match oracle::solve(day, tier, budget, iterations) {
            Ok(sol) if sol.feasible => solved.push((day, sol.assignment)),
            Ok(_) => log::warn!("skipping day {}: no feasible offline solution", day.label()),
            Err(e) => log::warn!("skipping day {}: {e}", day.label()),
        }
    }
    if solved.is_empty() {
        return Err(BaselineError::NoHistory);
    }
    Ok(ProportionTable::from_assignments(solved.iter().map(|(d, a)| (*d, a.as_slice()))))
}

/// Sample a candidate from the type's historical frequencies.
pub fn proportion_assign(table: &ProportionTable, instance: &Instance, parcel: &Parcel, rng: &mut impl Rng) -> usize {
    let probs = table.probabilities(instance, parcel);
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut last = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > 0.0 {
            acc += p;
            last = i;
            if u < acc {
                return i;
            }
        }
    }
    last
}

/// Dual prices of the primal-dual baseline.
///
/// Capacity constraints use an upper multiplier paced against `U·t/m`.
/// Proportion constraints use upper and lower multipliers against
/// `p^U·n̂` and `p^L·n̂`, with `n̂` the running OD count.
#[derive(Debug, Clone, PartialEq)]
pub struct DualPrices {
    pub upper: Vec<f64>,
    pub lower: Vec<f64>,
    /// Step size per constraint.
    pub eta: Vec<f64>,
    /// Known total volume of the day.
    pub m: usize,
}

pub const DEFAULT_PDO_ETA_SCALE: f64 = 0.02;

impl DualPrices {
    /// Step `η_k = eta_scale · mean candidate cost / U_k` for capacity and
    /// `eta_scale · mean candidate cost` for proportion constraints (whose
    /// excess is measured relative to the running target).
    pub fn new(instance: &Instance, eta_scale: f64, m: usize) -> Result<Self> {
        let mean = instance.mean_candidate_cost();
        let eta = instance
            .constraints()
            .iter()
            .map(|c| match c.kind {
                ConstraintKind::Capacity { upper, .. } => eta_scale * mean / upper as f64,
                ConstraintKind::Proportion { .. } => eta_scale * mean,
            })
            .collect();
        Self::with_steps(instance, eta, m)
    }

    pub fn with_steps(instance: &Instance, eta: Vec<f64>, m: usize) -> Result<Self> {
        if m == 0 {
            return Err(BaselineError::NoVolume);
        }
        let k = instance.constraints().len();
        assert_eq!(eta.len(), k, "one step size per constraint");
        Ok(Self { upper: vec![0.0; k], lower: vec![0.0; k], eta, m })
    }

    fn price(&self, k: usize) -> f64 {
        self.upper[k] - self.lower[k]
    }
}

/// Reduced-cost argmin; ties by cost, then route id.
pub fn pdo_assign(duals: &DualPrices, instance: &Instance, parcel: &Parcel) -> usize {
    let reduced = |j: usize| {
        let c = parcel.candidates[j];
        c.cost + instance.constraints_of_route(c.route).iter().map(|&k| duals.price(k)).sum::<f64>()
    };
    let mut best = 0;
    let mut best_r = reduced(0);
    for j in 1..parcel.candidates.len() {
        let r = reduced(j);
        let (c, b) = (&parcel.candidates[j], &parcel.candidates[best]);
        let better = r < best_r
            || (r == best_r && (c.cost < b.cost || (c.cost == b.cost && instance.route(c.route).id < instance.route(b.route).id)));
        if better {
            best = j;
            best_r = r;
        }
    }
    best
}

/// Subgradient step after an assignment, with `state` already containing it.
pub fn pdo_update(duals: &mut DualPrices, instance: &Instance, state: &EnvState) {
    let t = state.t as f64;
    let m = duals.m as f64;
    for (k, c) in instance.constraints().iter().enumerate() {
        match c.kind {
            ConstraintKind::Capacity { hub, upper } => {
                let excess = state.hub_used[hub.index()] as f64 - upper as f64 * t / m;
                duals.upper[k] = (duals.upper[k] + duals.eta[k] * excess).max(0.0);
            }
            ConstraintKind::Proportion { p_lower, p_upper, .. } => {
                let pc = state.prop_counters[k];
                if pc.seen == 0 {
                    continue;
                }
                let (n, hit) = (pc.seen as f64, pc.target as f64);
                duals.upper[k] = (duals.upper[k] + duals.eta[k] * (hit - p_upper * n) / n).max(0.0);
                duals.lower[k] = (duals.lower[k] + duals.eta[k] * (p_lower * n - hit) / n).max(0.0);
            }
        }
    }
}
