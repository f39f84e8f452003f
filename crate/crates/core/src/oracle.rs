//! Offline solvers for the full-information assignment problem: exact
//! pruned enumeration for tiny instances and a Lagrangian lower bound with a
//! repaired primal incumbent for larger ones.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use thiserror::Error;

use crate::model::{ConstraintKind, Instance, LocationId, RouteId};

#[derive(Debug, Error)]
pub enum OracleError {
    #[error("search space of {size} combinations exceeds the budget of {budget}")]
    BudgetExceeded { size: u128, budget: u128 },
    #[error("assignment covers {found} parcels, expected {expected}")]
    Incomplete { expected: usize, found: usize },
    #[error("parcel {parcel} has no candidate {candidate}")]
    BadCandidate { parcel: usize, candidate: usize },
    #[error("reference cost must be positive, got {0}")]
    NonPositiveReference(f64),
    #[error("solution file line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, OracleError>;

pub const DEFAULT_BUDGET: u128 = 1_000_000;
pub const DEFAULT_BOUND_ITERATIONS: usize = 300;

/// Tolerance on count comparisons against fractional proportion bounds.
const COUNT_EPS: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct OfflineSolution {
    /// Candidate index per parcel; empty when no assignment is available.
    pub assignment: Vec<usize>,
    pub objective: f64,
    pub feasible: bool,
    /// Lower bound on the optimum; equals `objective` for exact solutions.
    pub bound: f64,
    pub exact: bool,
}

impl OfflineSolution {
    fn infeasible(exact: bool) -> Self {
        Self { assignment: Vec::new(), objective: f64::INFINITY, feasible: false, bound: f64::INFINITY, exact }
    }

    /// Average cost to compare online policies against: the optimum when
    /// exact, the lower bound otherwise.
    pub fn reference(&self, m: usize) -> Reference {
        if self.exact {
            Reference { average_cost: self.objective / m as f64, kind: ReferenceKind::Optimum }
        } else {
            Reference { average_cost: self.bound / m as f64, kind: ReferenceKind::LowerBound }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReferenceKind {
    Optimum,
    LowerBound,
}

impl ReferenceKind {
    pub fn label(self) -> &'static str {
        match self {
            ReferenceKind::Optimum => "IP gap",
            ReferenceKind::LowerBound => "gap vs lower bound",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Reference {
    pub average_cost: f64,
    pub kind: ReferenceKind,
}

/// `(alg − ref) / ref`; negative when the policy undercuts the reference.
pub fn ip_gap(alg_average_cost: f64, reference_average_cost: f64) -> Result<f64> {
    if reference_average_cost <= 0.0 || !reference_average_cost.is_finite() {
        return Err(OracleError::NonPositiveReference(reference_average_cost));
    }
    Ok((alg_average_cost - reference_average_cost) / reference_average_cost)
}

/// Per-constraint allowed count range with the offline (known) denominators.
#[derive(Debug, Clone, Copy)]
struct CountRange {
    lo: f64,
    hi: f64,
}

fn count_ranges(instance: &Instance) -> Vec<CountRange> {
    instance
        .constraints()
        .iter()
        .map(|c| match c.kind {
            ConstraintKind::Capacity { upper, .. } => CountRange { lo: 0.0, hi: upper as f64 },
            ConstraintKind::Proportion { origin, destination, p_lower, p_upper, .. } => {
                let n = instance.od_volume((origin, destination)) as f64;
                CountRange { lo: p_lower * n, hi: p_upper * n }
            }
        })
        .collect()
}

fn within(count: f64, r: CountRange) -> bool {
    count <= r.hi + COUNT_EPS && count >= r.lo - COUNT_EPS
}

/// Per-constraint counts of an assignment: parcels through the hub for
/// capacity, parcels on the constraint's provider for proportion.
fn constraint_counts(instance: &Instance, assignment: &[usize]) -> Vec<f64> {
    let mut counts = vec![0.0; instance.constraints().len()];
    for (p, &a) in instance.parcels().iter().zip(assignment) {
        for &k in instance.constraints_of_route(p.candidates[a].route) {
            counts[k] += 1.0;
        }
    }
    counts
}

fn validate_assignment(instance: &Instance, assignment: &[usize]) -> Result<()> {
    if assignment.len() != instance.m() {
        return Err(OracleError::Incomplete { expected: instance.m(), found: assignment.len() });
    }
    for (p, &a) in instance.parcels().iter().zip(assignment) {
        if a >= p.candidates.len() {
            return Err(OracleError::BadCandidate { parcel: p.id, candidate: a });
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Feasibility {
    pub feasible: bool,
    /// Ids of violated constraints, in instance order.
    pub violated: Vec<String>,
}

/// Recount every constraint from scratch, with proportion denominators equal
/// to the full-day OD volume.
pub fn check_feasible(instance: &Instance, assignment: &[usize]) -> Result<Feasibility> {
    validate_assignment(instance, assignment)?;
    let counts = constraint_counts(instance, assignment);
    let ranges = count_ranges(instance);
    let violated: Vec<String> = instance
        .constraints()
        .iter()
        .enumerate()
        .filter(|&(k, _)| !within(counts[k], ranges[k]))
        .map(|(_, c)| c.id.clone())
        .collect();
    Ok(Feasibility { feasible: violated.is_empty(), violated })
}

pub fn assignment_cost(instance: &Instance, assignment: &[usize]) -> f64 {
    instance.parcels().iter().zip(assignment).map(|(p, &a)| p.candidates[a].cost).sum()
}

/// Parcels sharing OD, candidate routes and (rounded) costs.
struct Group {
    parcels: Vec<usize>,
    costs: Vec<f64>,
    /// Constraints touched by each candidate.
    touches: Vec<Vec<usize>>,
}

fn group_parcels(instance: &Instance) -> Vec<Group> {
    type Key = (LocationId, LocationId, Vec<(RouteId, i64)>);
    let mut groups: BTreeMap<Key, Vec<usize>> = BTreeMap::new();
    for p in instance.parcels() {
        let sig = p.candidates.iter().map(|c| (c.route, (c.cost * 1e9).round() as i64)).collect();
        groups.entry((p.origin, p.destination, sig)).or_default().push(p.id);
    }
    let mut out: Vec<Group> = groups
        .into_values()
        .map(|parcels| {
            let first = &instance.parcels()[parcels[0]];
            Group {
                costs: first.candidates.iter().map(|c| c.cost).collect(),
                touches: first.candidates.iter().map(|c| instance.constraints_of_route(c.route).to_vec()).collect(),
                parcels,
            }
        })
        .collect();
    // lowest parcel id first keeps the search order stable
    out.sort_by_key(|g| g.parcels[0]);
    out
}

fn binomial(n: u128, k: u128) -> u128 {
    let k = k.min(n - k);
    let mut r: u128 = 1;
    for i in 0..k {
        r = r.saturating_mul(n - i) / (i + 1);
    }
    r
}

/// Number of distinct group compositions the exact search may visit.
pub fn search_space(instance: &Instance) -> u128 {
    group_parcels(instance)
        .iter()
        .map(|g| {
            let (n, k) = (g.parcels.len() as u128, g.costs.len() as u128);
            binomial(n + k - 1, k - 1)
        })
        .fold(1u128, |a, b| a.saturating_mul(b))
}

struct Search<'a> {
    groups: &'a [Group],
    ranges: Vec<CountRange>,
    is_capacity: Vec<bool>,
    /// Per group, per constraint: parcels in groups `g..` that could still
    /// add to the constraint's count.
    reach: Vec<Vec<f64>>,
    /// Per group: cheapest possible cost of groups `g..`.
    min_rest: Vec<f64>,
    counts: Vec<f64>,
    split: Vec<Vec<usize>>,
    best_cost: f64,
    best_split: Option<Vec<Vec<usize>>>,
}

impl Search<'_> {
    fn lower_ok(&self, g: usize) -> bool {
        self.counts.iter().enumerate().all(|(k, &c)| self.is_capacity[k] || c + self.reach[g][k] >= self.ranges[k].lo - COUNT_EPS)
    }

    fn group(&mut self, g: usize, cost: f64) {
        if cost + self.min_rest[g] >= self.best_cost {
            return;
        }
        if !self.lower_ok(g) {
            return;
        }
        if g == self.groups.len() {
            self.best_cost = cost;
            self.best_split = Some(self.split.clone());
            return;
        }
        let n = self.groups[g].parcels.len();
        self.split[g] = vec![0; self.groups[g].costs.len()];
        self.candidate(g, 0, n, cost);
    }

    /// Distribute `left` parcels of group `g` over candidates `j..`.
    fn candidate(&mut self, g: usize, j: usize, left: usize, cost: f64) {
        let k_cands = self.groups[g].costs.len();
        if j + 1 == k_cands {
            if self.add(g, j, left) {
                let c = cost + left as f64 * self.groups[g].costs[j];
                self.group(g + 1, c);
            }
            self.remove(g, j, left);
            return;
        }
        for c in (0..=left).rev() {
            if self.add(g, j, c) {
                let next = cost + c as f64 * self.groups[g].costs[j];
                self.candidate(g, j + 1, left - c, next);
            }
            self.remove(g, j, c);
        }
    }

    /// Apply `c` parcels on candidate `j`; false when an upper limit breaks.
    fn add(&mut self, g: usize, j: usize, c: usize) -> bool {
        self.split[g][j] = c;
        let mut ok = true;
        for &k in &self.groups[g].touches[j] {
            self.counts[k] += c as f64;
            ok &= self.counts[k] <= self.ranges[k].hi + COUNT_EPS;
        }
        ok
    }

    fn remove(&mut self, g: usize, j: usize, c: usize) {
        self.split[g][j] = 0;
        for &k in &self.groups[g].touches[j] {
            self.counts[k] -= c as f64;
        }
    }
}

/// Exact optimum by enumerating per-group compositions with capacity,
/// proportion and cost pruning.
pub fn solve_exact(instance: &Instance, budget: u128) -> Result<OfflineSolution> {
    let size = search_space(instance);
    if size > budget {
        return Err(OracleError::BudgetExceeded { size, budget });
    }
    let groups = group_parcels(instance);
    let n_k = instance.constraints().len();
    let mut reach = vec![vec![0.0; n_k]; groups.len() + 1];
    let mut min_rest = vec![0.0; groups.len() + 1];
    for g in (0..groups.len()).rev() {
        let mut row = reach[g + 1].clone();
        let mut touched: Vec<usize> = groups[g].touches.iter().flatten().copied().collect();
        touched.sort_unstable();
        touched.dedup();
        for k in touched {
            row[k] += groups[g].parcels.len() as f64;
        }
        reach[g] = row;
        let cheapest = groups[g].costs.iter().copied().fold(f64::INFINITY, f64::min);
        min_rest[g] = min_rest[g + 1] + cheapest * groups[g].parcels.len() as f64;
    }
    let mut search = Search {
        groups: &groups,
        ranges: count_ranges(instance),
        is_capacity: instance.constraints().iter().map(|c| c.is_capacity()).collect(),
        reach,
        min_rest,
        counts: vec![0.0; n_k],
        split: vec![Vec::new(); groups.len()],
        best_cost: f64::INFINITY,
        best_split: None,
    };
    search.group(0, 0.0);
    let Some(split) = search.best_split else {
        return Ok(OfflineSolution::infeasible(true));
    };
    let mut assignment = vec![0; instance.m()];
    for (g, counts) in groups.iter().zip(&split) {
        let mut ids = g.parcels.iter();
        for (j, &c) in counts.iter().enumerate() {
            for &p in ids.by_ref().take(c) {
                assignment[p] = j;
            }
        }
    }
    let objective = assignment_cost(instance, &assignment);
    Ok(OfflineSolution { assignment, objective, feasible: true, bound: objective, exact: true })
}

/// Cheapest candidate per parcel, ties by lower route id.
pub fn cheapest_assignment(instance: &Instance) -> Vec<usize> {
    instance
        .parcels()
        .iter()
        .map(|p| {
            let mut best = 0;
            for (j, c) in p.candidates.iter().enumerate().skip(1) {
                let b = &p.candidates[best];
                if c.cost < b.cost || (c.cost == b.cost && instance.route(c.route).id < instance.route(b.route).id) {
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// Lagrangian multipliers: one upper multiplier per constraint, plus a
/// lower one for proportion constraints.
#[derive(Debug, Clone, PartialEq)]
pub struct Multipliers {
    pub upper: Vec<f64>,
    pub lower: Vec<f64>,
}

struct Relaxation<'a> {
    instance: &'a Instance,
    ranges: Vec<CountRange>,
}

impl Relaxation<'_> {
    fn price(&self, mu: &Multipliers, k: usize) -> f64 {
        mu.upper[k] - mu.lower[k]
    }

    /// Relaxed minimizer, its Lagrangian value and the subgradient.
    fn evaluate(&self, mu: &Multipliers) -> (Vec<usize>, f64, Vec<f64>, Vec<f64>) {
        let inst = self.instance;
        let mut value = 0.0;
        let mut x = Vec::with_capacity(inst.m());
        for p in inst.parcels() {
            let mut best = (f64::INFINITY, 0usize);
            for (j, c) in p.candidates.iter().enumerate() {
                let reduced = c.cost + inst.constraints_of_route(c.route).iter().map(|&k| self.price(mu, k)).sum::<f64>();
                if reduced < best.0 {
                    best = (reduced, j);
                }
            }
            value += best.0;
            x.push(best.1);
        }
        let counts = constraint_counts(inst, &x);
        let mut g_up = vec![0.0; counts.len()];
        let mut g_lo = vec![0.0; counts.len()];
        for (k, r) in self.ranges.iter().enumerate() {
            value -= mu.upper[k] * r.hi - mu.lower[k] * r.lo;
            g_up[k] = counts[k] - r.hi;
            g_lo[k] = r.lo - counts[k];
        }
        (x, value, g_up, g_lo)
    }
}

/// Move parcels off violated constraints at the smallest cost increase
/// without breaking any other constraint, then take every remaining
/// cost-reducing move that keeps feasibility.
pub fn repair(instance: &Instance, assignment: &mut [usize]) -> bool {
    let ranges = count_ranges(instance);
    let mut counts = constraint_counts(instance, assignment);
    let parcels = instance.parcels();
    // A move may not push any other count past its bounds.
    let admissible = |counts: &[f64], from: RouteId, to: RouteId| -> bool {
        let (rf, rt) = (instance.constraints_of_route(from), instance.constraints_of_route(to));
        rt.iter().filter(|k| !rf.contains(k)).all(|&k| counts[k] + 1.0 <= ranges[k].hi + COUNT_EPS)
            && rf.iter().filter(|k| !rt.contains(k)).all(|&k| counts[k] - 1.0 >= ranges[k].lo - COUNT_EPS)
    };
    let apply = |counts: &mut [f64], from: RouteId, to: RouteId| {
        for &k in instance.constraints_of_route(from) {
            counts[k] -= 1.0;
        }
        for &k in instance.constraints_of_route(to) {
            counts[k] += 1.0;
        }
    };
    for _round in 0..8 {
        let mut changed = false;
        for k in 0..ranges.len() {
            let over = counts[k] > ranges[k].hi + COUNT_EPS;
            let under = counts[k] < ranges[k].lo - COUNT_EPS;
            if !over && !under {
                continue;
            }
            // moves that take a parcel out of (over) or into (under) k
            let mut moves: Vec<(f64, usize, usize)> = Vec::new();
            for (i, p) in parcels.iter().enumerate() {
                let cur = p.candidates[assignment[i]];
                let in_k = instance.constraints_of_route(cur.route).contains(&k);
                if in_k != over {
                    continue;
                }
                for (j, c) in p.candidates.iter().enumerate() {
                    if instance.constraints_of_route(c.route).contains(&k) != in_k {
                        moves.push((c.cost - cur.cost, i, j));
                    }
                }
            }
            moves.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
            for (_, i, j) in moves {
                let still = if over { counts[k] > ranges[k].hi + COUNT_EPS } else { counts[k] < ranges[k].lo - COUNT_EPS };
                if !still {
                    break;
                }
                let p = &parcels[i];
                let from = p.candidates[assignment[i]].route;
                let to = p.candidates[j].route;
                // the parcel may have moved already
                if instance.constraints_of_route(from).contains(&k) != over {
                    continue;
                }
                if admissible(&counts, from, to) {
                    apply(&mut counts, from, to);
                    assignment[i] = j;
                    changed = true;
                }
            }
        }
        if !changed {
            break;
        }
    }
    let feasible = counts.iter().zip(&ranges).all(|(&c, &r)| within(c, r));
    if feasible {
        // improvement pass: cheaper candidates that keep every count in range
        for (i, p) in parcels.iter().enumerate() {
            let mut order: Vec<usize> = (0..p.candidates.len()).collect();
            order.sort_by(|&a, &b| p.candidates[a].cost.total_cmp(&p.candidates[b].cost).then(a.cmp(&b)));
            for j in order {
                let cur = p.candidates[assignment[i]];
                let c = p.candidates[j];
                if c.cost >= cur.cost {
                    break;
                }
                let (from, to) = (cur.route, c.route);
                let ok = instance
                    .constraints_of_route(to)
                    .iter()
                    .filter(|k| !instance.constraints_of_route(from).contains(k))
                    .all(|&k| counts[k] + 1.0 <= ranges[k].hi + COUNT_EPS)
                    && instance
                        .constraints_of_route(from)
                        .iter()
                        .filter(|k| !instance.constraints_of_route(to).contains(k))
                        .all(|&k| counts[k] - 1.0 >= ranges[k].lo - COUNT_EPS);
                if ok {
                    apply(&mut counts, from, to);
                    assignment[i] = j;
                    break;
                }
            }
        }
    }
    feasible
}

#[derive(Debug, Clone, PartialEq)]
pub struct BoundTrace {
    pub solution: OfflineSolution,
    pub multipliers: Multipliers,
    /// Lagrangian value at every evaluated multiplier vector.
    pub values: Vec<f64>,
}

/// Subgradient ascent on the Lagrangian dual.
///
/// Steps follow Polyak's rule against the best repaired incumbent, with the
/// step factor halved after 20 iterations without improvement; while no
/// incumbent exists the step is `η0/√s` along the normalized subgradient with
/// `η0` the mean candidate cost.
pub fn solve_bound(instance: &Instance, iterations: usize) -> OfflineSolution {
    solve_bound_traced(instance, iterations).solution
}

pub fn solve_bound_traced(instance: &Instance, iterations: usize) -> BoundTrace {
    let relax = Relaxation { instance, ranges: count_ranges(instance) };
    let n_k = instance.constraints().len();
    let mut mu = Multipliers { upper: vec![0.0; n_k], lower: vec![0.0; n_k] };
    let eta0 = instance.mean_candidate_cost();
    let mut theta = 2.0;
    let mut since_improvement = 0;
    let mut best_bound = f64::NEG_INFINITY;
    let mut best_mu = mu.clone();
    let mut incumbent: Option<(f64, Vec<usize>)> = None;
    let mut values = Vec::with_capacity(iterations + 1);

    let consider = |x: &[usize], incumbent: &mut Option<(f64, Vec<usize>)>| {
        let mut y = x.to_vec();
        if repair(instance, &mut y) {
            let c = assignment_cost(instance, &y);
            if incumbent.as_ref().is_none_or(|(b, _)| c < *b) {
                *incumbent = Some((c, y));
            }
        }
    };

    for s in 0..=iterations {
        let (x, value, g_up, g_lo) = relax.evaluate(&mu);
        values.push(value);
        if value > best_bound + 1e-12 * value.abs().max(1.0) {
            best_bound = value;
            best_mu = mu.clone();
            since_improvement = 0;
        } else {
            since_improvement += 1;
            if since_improvement >= 20 {
                theta /= 2.0;
                since_improvement = 0;
            }
        }
        if s == 0 || s % 10 == 0 || s == iterations {
            consider(&x, &mut incumbent);
        }
        if s == iterations {
            break;
        }
        // projected subgradient: a component with zero multiplier and a
        // negative direction cannot move
        let proj = |m: f64, g: f64| if m <= 0.0 && g < 0.0 { 0.0 } else { g };
        let d_up: Vec<f64> = mu.upper.iter().zip(&g_up).map(|(&m, &g)| proj(m, g)).collect();
        let d_lo: Vec<f64> = mu.lower.iter().zip(&g_lo).enumerate().map(|(k, (&m, &g))| if instance.constraints()[k].is_capacity() { 0.0 } else { proj(m, g) }).collect();
        let norm2: f64 = d_up.iter().chain(&d_lo).map(|g| g * g).sum();
        if norm2 == 0.0 {
            // relaxed minimizer is feasible and complementary: optimal
            break;
        }
        let step = match &incumbent {
            Some((ub, _)) if *ub > value => theta * (ub - value) / norm2,
            _ => eta0 / ((s + 1) as f64).sqrt() / norm2.sqrt(),
        };
        for k in 0..n_k {
            mu.upper[k] = (mu.upper[k] + step * d_up[k]).max(0.0);
            mu.lower[k] = (mu.lower[k] + step * d_lo[k]).max(0.0);
        }
    }
    let solution = match incumbent {
        Some((objective, assignment)) => OfflineSolution { assignment, objective, feasible: true, bound: best_bound.min(objective), exact: false },
        None => {
            // keep the relaxed minimizer of the best multipliers as the
            // (infeasible) primal answer
            let (x, _, _, _) = relax.evaluate(&best_mu);
            OfflineSolution { objective: assignment_cost(instance, &x), assignment: x, feasible: false, bound: best_bound, exact: false }
        }
    };
    BoundTrace { solution, multipliers: best_mu, values }
}

/// Which offline solver to use.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OracleTier {
    Exact,
    Bound,
    /// Exact when the search space fits the budget, bound otherwise.
    Auto,
}

impl std::str::FromStr for OracleTier {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "exact" => Ok(Self::Exact),
            "bound" => Ok(Self::Bound),
            "auto" => Ok(Self::Auto),
            _ => Err(format!("unknown oracle tier {s:?} (exact, bound, auto)")),
        }
    }
}

pub fn solve(instance: &Instance, tier: OracleTier, budget: u128, iterations: usize) -> Result<OfflineSolution> {
    match tier {
        OracleTier::Exact => solve_exact(instance, budget),
        OracleTier::Bound => Ok(solve_bound(instance, iterations)),
        OracleTier::Auto => match solve_exact(instance, budget) {
            Err(OracleError::BudgetExceeded { .. }) => Ok(solve_bound(instance, iterations)),
            other => other,
        },
    }
}

/// Summary block followed by one `parcel route` line per parcel.
pub fn solution_to_text(instance: &Instance, sol: &OfflineSolution) -> String {
    let mut s = String::new();
    writeln!(s, "opa-solution v1").unwrap();
    writeln!(s, "instance {}", instance.label()).unwrap();
    writeln!(s, "objective {:?}", sol.objective).unwrap();
    writeln!(s, "bound {:?}", sol.bound).unwrap();
    writeln!(s, "feasible {}", sol.feasible).unwrap();
    writeln!(s, "exact {}", sol.exact).unwrap();
    writeln!(s, "assignments {}", sol.assignment.len()).unwrap();
    for (p, &a) in instance.parcels().iter().zip(&sol.assignment) {
        writeln!(s, "{} {}", p.id, instance.route(p.candidates[a].route).id).unwrap();
    }
    s
}

pub fn save_solution(path: impl AsRef<Path>, instance: &Instance, sol: &OfflineSolution) -> Result<()> {
    std::fs::write(path, solution_to_text(instance, sol))?;
    Ok(())
}

pub fn parse_solution(instance: &Instance, text: &str) -> Result<OfflineSolution> {
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim()));
    let err = |line: usize, message: String| OracleError::Parse { line, message };
    let mut field = |name: &str| -> Result<(usize, String)> {
        let (n, l) = lines.next().ok_or_else(|| err(0, format!("missing {name}")))?;
        let rest = l.strip_prefix(name).ok_or_else(|| err(n, format!("expected {name}")))?;
        Ok((n, rest.trim().to_string()))
    };
    let (n, magic) = field("opa-solution")?;
    if magic != "v1" {
        return Err(err(n, "unsupported version".into()));
    }
    field("instance")?;
    let num = |(n, v): (usize, String)| v.parse::<f64>().map_err(|e| err(n, e.to_string()));
    let objective = num(field("objective")?)?;
    let bound = num(field("bound")?)?;
    let flag = |(n, v): (usize, String)| v.parse::<bool>().map_err(|e| err(n, e.to_string()));
    let feasible = flag(field("feasible")?)?;
    let exact = flag(field("exact")?)?;
    let (n, count) = field("assignments")?;
    let count: usize = count.parse().map_err(|_| err(n, "bad count".into()))?;
    let mut assignment = Vec::with_capacity(count);
    for expected in 0..count {
        let (n, l) = lines.next().ok_or_else(|| err(0, "truncated assignment list".into()))?;
        let mut parts = l.split_whitespace();
        let id: usize = parts.next().and_then(|t| t.parse().ok()).ok_or_else(|| err(n, "bad parcel id".into()))?;
        let route = parts.next().ok_or_else(|| err(n, "missing route".into()))?;
        if id != expected || id >= instance.m() {
            return Err(err(n, format!("expected parcel {expected}")));
        }
        let j = instance.parcels()[id]
            .candidates
            .iter()
            .position(|c| instance.route(c.route).id == route)
            .ok_or_else(|| err(n, format!("route {route} is not a candidate of parcel {id}")))?;
        assignment.push(j);
    }
    Ok(OfflineSolution { assignment, objective, feasible, bound, exact })
}
