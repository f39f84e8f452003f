//! One test per acceptance criterion. Each prints a single
//! `criterion N (...): PASS|FAIL detail` line before asserting.

use std::collections::{BTreeMap, HashMap};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use opa_core::baselines::{greedy_assign, pdo_assign, pdo_update, DualPrices};
use opa_core::datagen::{self, GenConfig};
use opa_core::env::{reward, shaping, Env, EnvState, PropCounter, ShapingWeights};
use opa_core::experiment::{evaluate_day, ExperimentConfig, Policy, PolicyName};
use opa_core::model::{ConstraintKind, Instance};
use opa_core::nets::gradcheck::{jitter, random_observation, tiny_config};
use opa_core::nets::{ActorParams, RewardNetParams};
use opa_core::neural::ParamSet;
use opa_core::oracle::{self, OracleTier};
use opa_core::ppo::{self, clip_objective, clip_term, BatchStep};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn verdict(n: usize, name: &str, pass: bool, detail: &str) {
    let status = if pass { "PASS" } else { "FAIL" };
    // Written to the real stdout so the line survives output capture.
    let mut out = std::io::stdout().lock();
    writeln!(out, "criterion {n} ({name}): {status} {detail}").unwrap();
    assert!(pass, "criterion {n} ({name}) failed: {detail}");
}

// ---------------------------------------------------------------- 1

/// Largest `|fd - an| - (rel·max(|fd|,|an|) + abs)` over every scalar.
fn fd_excess<P: ParamSet>(params: &P, analytic: &P, f: impl Fn(&P) -> f64) -> f64 {
    let (h, rel, abs) = (1e-5, 1e-4, 1e-6);
    let an: Vec<f64> = analytic.tensors().into_iter().flat_map(|t| t.to_vec()).collect();
    let mut p = params.clone();
    let sizes: Vec<usize> = p.tensors().iter().map(|t| t.len()).collect();
    let mut k = 0;
    let mut worst = f64::NEG_INFINITY;
    for (t, &len) in sizes.iter().enumerate() {
        for j in 0..len {
            let x = p.tensors()[t][j];
            p.tensors_mut()[t][j] = x + h;
            let up = f(&p);
            p.tensors_mut()[t][j] = x - h;
            let down = f(&p);
            p.tensors_mut()[t][j] = x;
            let fd = (up - down) / (2.0 * h);
            worst = worst.max((fd - an[k]).abs() - (rel * fd.abs().max(an[k].abs()) + abs));
            k += 1;
        }
    }
    worst
}

#[test]
fn criterion_01_gradient_fidelity() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let (mut actor_fail, mut reward_fail) = (0, 0);
    let mut worst = f64::NEG_INFINITY;
    for i in 0..100 {
        let mut cfg = tiny_config(4, 3);
        let mut actor = ActorParams::new(&cfg, &mut rng);
        jitter(&mut actor, &mut rng);
        let obs = random_observation(&cfg, &mut rng);
        let u: Vec<f64> = (0..obs.n_slots()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let (grads, _) = actor.backward(&obs, &u).unwrap();
        let e = fd_excess(&actor, &grads, |p| p.probabilities(&obs).unwrap().iter().zip(&u).map(|(a, b)| a * b).sum());
        worst = worst.max(e);
        actor_fail += usize::from(e > 0.0);

        cfg.normalized_attention = i % 2 == 1;
        let mut net = RewardNetParams::new(&cfg, &mut rng);
        jitter(&mut net, &mut rng);
        let obs = random_observation(&cfg, &mut rng);
        let (grads, _) = net.backward(&obs, 1.0).unwrap();
        let e = fd_excess(&net, &grads, |p| p.value(&obs).unwrap());
        worst = worst.max(e);
        reward_fail += usize::from(e > 0.0);
    }
    let elapsed = start.elapsed();
    let pass = actor_fail == 0 && reward_fail == 0 && elapsed < Duration::from_secs(60);
    verdict(
        1,
        "gradient fidelity",
        pass,
        &format!("actor failures {actor_fail}/100, reward failures {reward_fail}/100, worst excess {worst:.3e}, {elapsed:.1?}"),
    );
}

// ---------------------------------------------------------------- 2

const SHAPING_INSTANCE: &str = "opa-instance v1\nlabel shaping\nmax_candidates 2\nhubs 2 H G\nlocations 3 A B C\n\
providers 2 P Q\nroutes 3\nrc A B Q H\nrp A B P G\nrf A C Q G\nconstraints 2\ncapacity cap-H H 4\n\
proportion prop-AB-P A B P 0.3 0.7\nparcels 2\n0 A B 1.0 rc:5.0 rp:2.0\n1 A C 1.0 rf:3.0\n";

#[test]
fn criterion_02_reward_formula() {
    let inst = Instance::parse(SHAPING_INSTANCE).unwrap();
    let w = ShapingWeights { capacity: 10.0, proportion: 300.0 };
    let mut state = EnvState::initial(&inst);
    let mut cases: Vec<(&str, f64, f64)> = Vec::new();

    cases.push(("capacity h=0", shaping(&state, &inst, 0), 1.0));
    state.hub_used[0] = 4;
    cases.push(("capacity h=U", shaping(&state, &inst, 0), (-1.0f64).exp()));
    state.hub_used[0] = 0;
    for (seen, target, want) in [(10, 2, 0.1), (10, 8, -0.1), (10, 5, 0.0)] {
        state.prop_counters[1] = PropCounter { seen, target };
        cases.push(("proportion band", shaping(&state, &inst, 1), want));
    }

    state.prop_counters[1] = PropCounter { seen: 10, target: 5 };
    let p0 = &inst.parcels()[0];
    cases.push(("cost 5 on free hub", reward(&state, &inst, p0, 0, w).unwrap().reward, 5.0));
    cases.push(("route without constraints", reward(&state, &inst, &inst.parcels()[1], 0, w).unwrap().reward, -3.0));
    state.prop_counters[1] = PropCounter { seen: 10, target: 8 };
    cases.push(("cost 2 above band", reward(&state, &inst, p0, 1, w).unwrap().reward, -32.0));

    let bad: Vec<String> = cases
        .iter()
        .filter(|(_, got, want)| (got - want).abs() > 1e-12)
        .map(|(name, got, want)| format!("{name}: {got} vs {want}"))
        .collect();
    verdict(2, "reward formula", bad.is_empty(), &format!("{} cases, mismatches {:?}", cases.len(), bad));
}

// ---------------------------------------------------------------- 3

/// Counters recomputed from the assignment log alone.
fn recount_counters(inst: &Instance, state: &EnvState) -> (Vec<u32>, Vec<(u32, u32)>) {
    let mut hubs = vec![0u32; inst.hub_names().len()];
    let mut props = vec![(0u32, 0u32); inst.constraints().len()];
    for a in &state.assignment_log {
        let route = inst.route(a.route);
        for h in &route.hubs {
            hubs[h.index()] += 1;
        }
        let parcel = &inst.parcels()[a.parcel];
        for (k, c) in inst.constraints().iter().enumerate() {
            if let ConstraintKind::Proportion { origin, destination, provider, .. } = c.kind {
                if parcel.origin == origin && parcel.destination == destination {
                    props[k].0 += 1;
                    props[k].1 += u32::from(route.provider == provider);
                }
            }
        }
    }
    (hubs, props)
}

/// Uniformly random rollout; returns a fingerprint and the number of
/// conservation failures.
fn random_rollout(inst: &Instance, seed: u64) -> (Vec<(usize, u64)>, usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut env, _) = Env::reset(inst, ShapingWeights::default());
    let mut trace = Vec::new();
    let mut failures = 0;
    while let Some(parcel) = env.current_parcel() {
        let action = rng.random_range(0..parcel.candidates.len());
        let out = env.step(action).unwrap();
        let state = env.state();
        let (hubs, props) = recount_counters(inst, state);
        let live: Vec<(u32, u32)> = state.prop_counters.iter().map(|c| (c.seen, c.target)).collect();
        let shaped: f64 = out.reward.terms.iter().map(|t| t.1).sum();
        if hubs != state.hub_used || props != live || (out.reward.reward + out.reward.cost - shaped).abs() > 1e-9 {
            failures += 1;
        }
        trace.push((action, out.reward.reward.to_bits()));
    }
    let mut seen = vec![0; inst.m()];
    for a in &env.state().assignment_log {
        seen[a.parcel] += 1;
    }
    failures += seen.iter().filter(|&&c| c != 1).count();
    (trace, failures)
}

#[test]
fn criterion_03_environment_conservation() {
    let instances: Vec<Instance> = (0..20)
        .map(|s| {
            let cfg = GenConfig { seed: 900 + s, n_parcels: 60, n_hubs: 6, n_od_pairs: 6, n_providers: 3, ..GenConfig::default() };
            datagen::generate(&cfg).unwrap()
        })
        .collect();
    let (mut failures, mut nondeterministic) = (0, 0);
    for r in 0..1000u64 {
        let inst = &instances[(r % 20) as usize];
        let (a, fa) = random_rollout(inst, r);
        let (b, _) = random_rollout(inst, r);
        failures += fa;
        nondeterministic += usize::from(a != b);
    }
    // The training rollout path as well.
    let inst = &instances[0];
    let cfg = tiny_config(inst.location_names().len(), inst.provider_names().len());
    let actor = ActorParams::new(&cfg, &mut ChaCha8Rng::seed_from_u64(3));
    for worker in 0..5 {
        let a = ppo::rollout(&actor, inst, ShapingWeights::default(), 11, worker).unwrap();
        let b = ppo::rollout(&actor, inst, ShapingWeights::default(), 11, worker).unwrap();
        nondeterministic += usize::from(format!("{a:?}") != format!("{b:?}"));
    }
    verdict(
        3,
        "environment conservation",
        failures == 0 && nondeterministic == 0,
        &format!("1000 rollouts, counter/assignment failures {failures}, non-identical reruns {nondeterministic}"),
    );
}

// ---------------------------------------------------------------- 4

#[test]
fn criterion_04_ppo_identities() {
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let cfg = tiny_config(4, 3);
    let mut actor = ActorParams::new(&cfg, &mut rng);
    jitter(&mut actor, &mut rng);
    let eps = 0.2;
    let observations: Vec<_> = (0..100).map(|_| random_observation(&cfg, &mut rng)).collect();
    let batch: Vec<BatchStep<'_>> = observations
        .iter()
        .map(|obs| {
            let probs = actor.probabilities(obs).unwrap();
            let valid: Vec<usize> = (0..obs.n_slots()).filter(|&i| obs.mask[i]).collect();
            let action = valid[rng.random_range(0..valid.len())];
            BatchStep { obs, action, behavior_log_prob: probs[action].ln(), advantage: rng.random_range(-2.0..2.0) }
        })
        .collect();

    let (objective, _) = clip_objective(&actor, &batch, eps).unwrap();
    let mean_adv = batch.iter().map(|s| s.advantage).sum::<f64>() / batch.len() as f64;
    let identity = objective == mean_adv;

    let mut moved = actor.clone();
    jitter(&mut moved, &mut rng);
    let (mut outside, mut clipped) = (0, 0);
    let mut terms = Vec::new();
    for s in &batch {
        let ratio = (moved.probabilities(s.obs).unwrap()[s.action].ln() - s.behavior_log_prob).exp();
        let a = s.advantage;
        let term = clip_term(ratio, a, eps);
        let candidates = [ratio * a, (1.0 - eps) * a, (1.0 + eps) * a];
        let lo = candidates.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = candidates.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        // The ratio is capped from above only.
        let expected = if ratio > 1.0 + eps { (1.0 + eps) * a } else { ratio * a };
        if term < lo || term > hi || term != expected {
            outside += 1;
        }
        clipped += usize::from(ratio > 1.0 + eps);
        terms.push(term);
    }
    let (moved_objective, _) = clip_objective(&moved, &batch, eps).unwrap();
    let mean_terms = terms.iter().sum::<f64>() / terms.len() as f64;
    let consistent = (moved_objective - mean_terms).abs() <= 1e-12;
    verdict(
        4,
        "PPO identities",
        identity && outside == 0 && consistent,
        &format!(
            "L at behavior {objective} vs mean advantage {mean_adv}; {outside}/100 terms outside envelope ({clipped} clipped); perturbed objective matches per-step mean: {consistent}"
        ),
    );
}

// ---------------------------------------------------------------- 5

struct TinyRoute {
    od: usize,
    provider: usize,
    hubs: Vec<usize>,
}

struct Tiny {
    routes: Vec<TinyRoute>,
    /// Per parcel: OD index and (route index, cost) candidates.
    parcels: Vec<(usize, Vec<(usize, f64)>)>,
    capacity: Vec<(usize, u32)>,
    /// (od, provider, lower, upper)
    proportion: Vec<(usize, usize, f64, f64)>,
}

const ODS: [(&str, &str); 2] = [("A", "B"), ("A", "C")];

impl Tiny {
    fn random(rng: &mut impl Rng) -> Self {
        let mut routes = Vec::new();
        for od in 0..2 {
            for provider in 0..2 {
                for _ in 0..2 {
                    let first = rng.random_range(0..3);
                    let mut hubs = vec![first];
                    if rng.random_bool(0.5) {
                        hubs.push((first + 1 + rng.random_range(0..2)) % 3);
                    }
                    routes.push(TinyRoute { od, provider, hubs });
                }
            }
        }
        let n = rng.random_range(2..=10);
        let parcels = (0..n)
            .map(|_| {
                let od = rng.random_range(0..2);
                let mut pool: Vec<usize> = (0..routes.len()).filter(|&r| routes[r].od == od).collect();
                let k = rng.random_range(1..=3);
                let mut cands = Vec::new();
                for _ in 0..k {
                    let r = pool.remove(rng.random_range(0..pool.len()));
                    cands.push((r, (rng.random_range(5.0..15.0f64) * 100.0).round() / 100.0));
                }
                (od, cands)
            })
            .collect();
        let mut capacity = Vec::new();
        for h in 0..3 {
            if rng.random_bool(0.7) {
                capacity.push((h, rng.random_range(1..=n as u32)));
            }
        }
        let proportion = if rng.random_bool(0.5) {
            let lo = (rng.random_range(0.0..0.4f64) * 100.0).round() / 100.0;
            let hi = (rng.random_range(lo + 0.2..1.0f64) * 100.0).round() / 100.0;
            vec![(0, 0, lo, hi)]
        } else {
            vec![]
        };
        Self { routes, parcels, capacity, proportion }
    }

    fn to_text(&self) -> String {
        let widest = self.parcels.iter().map(|p| p.1.len()).max().unwrap_or(1);
        let mut s = format!("opa-instance v1\nlabel tiny\nmax_candidates {widest}\nhubs 3 H0 H1 H2\nlocations 3 A B C\nproviders 2 P0 P1\n");
        s += &format!("routes {}\n", self.routes.len());
        for (i, r) in self.routes.iter().enumerate() {
            let hubs: Vec<String> = r.hubs.iter().map(|h| format!("H{h}")).collect();
            s += &format!("r{i} {} {} P{} {}\n", ODS[r.od].0, ODS[r.od].1, r.provider, hubs.join(","));
        }
        s += &format!("constraints {}\n", self.capacity.len() + self.proportion.len());
        for &(h, u) in &self.capacity {
            s += &format!("capacity cap{h} H{h} {u}\n");
        }
        for &(od, p, lo, hi) in &self.proportion {
            s += &format!("proportion prop{od} {} {} P{p} {lo:?} {hi:?}\n", ODS[od].0, ODS[od].1);
        }
        s += &format!("parcels {}\n", self.parcels.len());
        for (i, (od, cands)) in self.parcels.iter().enumerate() {
            s += &format!("{i} {} {} 1.0", ODS[*od].0, ODS[*od].1);
            for (r, c) in cands {
                s += &format!(" r{r}:{c:?}");
            }
            s.push('\n');
        }
        s
    }

    fn feasible(&self, choice: &[usize]) -> bool {
        let mut used = [0u32; 3];
        for (p, &j) in self.parcels.iter().zip(choice) {
            for &h in &self.routes[p.1[j].0].hubs {
                used[h] += 1;
            }
        }
        if self.capacity.iter().any(|&(h, u)| used[h] > u) {
            return false;
        }
        self.proportion.iter().all(|&(od, prov, lo, hi)| {
            let n = self.parcels.iter().filter(|p| p.0 == od).count() as f64;
            let hit =
                self.parcels.iter().zip(choice).filter(|(p, &j)| p.0 == od && self.routes[p.1[j].0].provider == prov).count() as f64;
            hit >= lo * n - 1e-9 && hit <= hi * n + 1e-9
        })
    }

    /// Plain enumeration of every assignment.
    fn brute_force(&self) -> Option<f64> {
        let mut choice = vec![0; self.parcels.len()];
        let mut best: Option<f64> = None;
        loop {
            if self.feasible(&choice) {
                let cost: f64 = self.parcels.iter().zip(&choice).map(|(p, &j)| p.1[j].1).sum();
                best = Some(best.map_or(cost, |b: f64| b.min(cost)));
            }
            let mut i = 0;
            loop {
                if i == choice.len() {
                    return best;
                }
                choice[i] += 1;
                if choice[i] < self.parcels[i].1.len() {
                    break;
                }
                choice[i] = 0;
                i += 1;
            }
        }
    }
}

#[test]
fn criterion_05_oracle_correctness() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(505);
    let (mut exact_ok, mut bound_valid, mut bound_tight) = (0, 0, 0);
    let mut worst_gap: f64 = 0.0;
    for _ in 0..50 {
        let (tiny, optimum) = loop {
            let t = Tiny::random(&mut rng);
            if let Some(opt) = t.brute_force() {
                break (t, opt);
            }
        };
        let inst = Instance::parse(&tiny.to_text()).unwrap();
        let exact = oracle::solve_exact(&inst, oracle::DEFAULT_BUDGET).unwrap();
        let own_cost: f64 = tiny.parcels.iter().zip(&exact.assignment).map(|(p, &j)| p.1[j].1).sum();
        if exact.feasible && (exact.objective - optimum).abs() <= 1e-9 && tiny.feasible(&exact.assignment) && (own_cost - optimum).abs() <= 1e-9 {
            exact_ok += 1;
        }
        let bound = oracle::solve_bound(&inst, oracle::DEFAULT_BOUND_ITERATIONS).bound;
        bound_valid += usize::from(bound <= optimum + 1e-9);
        let gap = (optimum - bound) / optimum;
        worst_gap = worst_gap.max(gap);
        bound_tight += usize::from(gap <= 0.05);
    }
    let elapsed = start.elapsed();
    let pass = exact_ok == 50 && bound_valid == 50 && bound_tight >= 45 && elapsed < Duration::from_secs(120);
    verdict(
        5,
        "oracle correctness",
        pass,
        &format!(
            "exact matches {exact_ok}/50, bound <= optimum {bound_valid}/50, bound within 5% {bound_tight}/50 (worst {:.2}%), {elapsed:.1?}",
            100.0 * worst_gap
        ),
    );
}

// ---------------------------------------------------------------- 6

fn without_constraints(day: &Instance) -> Instance {
    Instance::new(
        format!("{}-free", day.label()),
        day.hub_names().to_vec(),
        day.location_names().to_vec(),
        day.provider_names().to_vec(),
        day.routes().to_vec(),
        vec![],
        day.parcels().to_vec(),
    )
    .unwrap()
}

#[test]
fn criterion_06_baseline_reductions() {
    let mut differing = 0;
    let mut decisions = 0;
    for seed in 0..3 {
        let day = datagen::generate(&GenConfig { seed, ..GenConfig::default() }).unwrap();
        let k = day.constraints().len();
        let mut duals = DualPrices::with_steps(&day, vec![0.0; k], day.m()).unwrap();
        let (mut env, _) = Env::reset(&day, ShapingWeights::NONE);
        while let Some(parcel) = env.current_parcel() {
            let a = pdo_assign(&duals, &day, parcel);
            differing += usize::from(a != greedy_assign(&day, parcel));
            decisions += 1;
            env.step(a).unwrap();
            pdo_update(&mut duals, &day, env.state());
        }
    }

    let cfg = ExperimentConfig { policies: vec![PolicyName::Greedy], oracle_tier: OracleTier::Auto, ..Default::default() };
    let policies = [(PolicyName::Greedy, Policy::Greedy)];
    let mut free_days: Vec<Instance> = (0..20)
        .map(|s| {
            let mut rng = ChaCha8Rng::seed_from_u64(600 + s);
            without_constraints(&Instance::parse(&Tiny::random(&mut rng).to_text()).unwrap())
        })
        .collect();
    free_days.push(without_constraints(&datagen::generate(&GenConfig { seed: 5, ..GenConfig::default() }).unwrap()));
    let mut nonzero = Vec::new();
    for (i, day) in free_days.iter().enumerate() {
        let result = evaluate_day(&cfg, &policies, 0, i, day).unwrap();
        let gap = result.row(PolicyName::Greedy).unwrap().gap;
        if gap != Some(0.0) {
            nonzero.push(format!("{}: {gap:?}", day.label()));
        }
    }
    verdict(
        6,
        "baseline reductions",
        differing == 0 && nonzero.is_empty(),
        &format!(
            "zero-dual PDO differs from greedy on {differing}/{decisions} parcels; non-zero greedy gaps on {}/{} constraint-free days {nonzero:?}",
            nonzero.len(),
            free_days.len()
        ),
    );
}

// ---------------------------------------------------------------- 7, 8, 9, 10

struct ReportRow {
    seed: u64,
    algorithm: String,
    parcels: f64,
    average_cost: f64,
    gap: Option<f64>,
    violation_count: f64,
    reference: Option<f64>,
    reference_kind: String,
}

struct BenchRun {
    out: PathBuf,
    elapsed: Duration,
    success: bool,
    stderr: String,
    rows: Vec<ReportRow>,
}

fn read_reports(out: &Path) -> Vec<ReportRow> {
    let mut rows = Vec::new();
    let Ok(seeds) = std::fs::read_dir(out) else { return rows };
    let mut seed_dirs: Vec<PathBuf> = seeds.map(|e| e.unwrap().path()).filter(|p| p.is_dir()).collect();
    seed_dirs.sort();
    for seed_dir in seed_dirs {
        let seed: u64 = seed_dir.file_name().unwrap().to_str().unwrap().trim_start_matches("seed-").parse().unwrap();
        let mut days: Vec<PathBuf> = std::fs::read_dir(&seed_dir).unwrap().map(|e| e.unwrap().path()).collect();
        days.sort();
        for day in days {
            let Ok(text) = std::fs::read_to_string(day.join("report.tsv")) else { continue };
            let mut lines = text.lines();
            let header: Vec<&str> = lines.next().unwrap().split('\t').collect();
            let col = |name: &str| header.iter().position(|h| *h == name).unwrap();
            let num = |s: &str| if s == "NA" { None } else { Some(s.parse::<f64>().unwrap()) };
            for line in lines {
                let f: Vec<&str> = line.split('\t').collect();
                rows.push(ReportRow {
                    seed,
                    algorithm: f[col("algorithm")].to_string(),
                    parcels: num(f[col("parcels")]).unwrap(),
                    average_cost: num(f[col("average_cost")]).unwrap(),
                    gap: num(f[col("ip_gap")]),
                    violation_count: num(f[col("violation_count")]).unwrap(),
                    reference: num(f[col("reference_average_cost")]),
                    reference_kind: f[col("reference_kind")].to_string(),
                });
            }
        }
    }
    rows
}

fn run_bench(name: &str, config: &str) -> BenchRun {
    let root = Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance");
    std::fs::create_dir_all(&root).unwrap();
    let out = root.join(name);
    let _ = std::fs::remove_dir_all(&out);
    let cfg = root.join(format!("{name}.toml"));
    std::fs::write(&cfg, config).unwrap();
    let start = Instant::now();
    let result = Command::new(env!("CARGO_BIN_EXE_opa"))
        .args(["bench", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()])
        .env("RUST_LOG", "warn")
        .output()
        .expect("run opa bench");
    let elapsed = start.elapsed();
    BenchRun {
        rows: read_reports(&out),
        out,
        elapsed,
        success: result.status.success(),
        stderr: String::from_utf8_lossy(&result.stderr).into_owned(),
    }
}

const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

fn default_bench() -> &'static BenchRun {
    static RUN: OnceLock<BenchRun> = OnceLock::new();
    RUN.get_or_init(|| {
        run_bench("default", "seeds = [0, 1, 2, 3, 4]\npolicies = [\"ppo-opa\", \"proportion\", \"pdo\", \"greedy\"]\n")
    })
}

fn capacity_bench() -> &'static BenchRun {
    static RUN: OnceLock<BenchRun> = OnceLock::new();
    RUN.get_or_init(|| {
        run_bench(
            "capacity-only",
            "seeds = [0, 1, 2, 3, 4]\nhistory_days = 0\npolicies = [\"pdo\", \"greedy\"]\n[generator]\nproportion_fraction = 0.0\n",
        )
    })
}

/// Pooled over a seed's evaluation days: (average cost, violation rate,
/// reference average cost).
#[derive(Debug, Clone, Copy)]
struct Pooled {
    cost: f64,
    violation: f64,
    reference: f64,
}

fn pooled(run: &BenchRun, seed: u64, algorithm: &str) -> Option<Pooled> {
    let rows: Vec<&ReportRow> = run.rows.iter().filter(|r| r.seed == seed && r.algorithm == algorithm).collect();
    if rows.is_empty() {
        return None;
    }
    let parcels: f64 = rows.iter().map(|r| r.parcels).sum();
    Some(Pooled {
        cost: rows.iter().map(|r| r.average_cost * r.parcels).sum::<f64>() / parcels,
        violation: rows.iter().map(|r| r.violation_count).sum::<f64>() / parcels,
        reference: rows.iter().map(|r| r.reference.unwrap_or(f64::NAN) * r.parcels).sum::<f64>() / parcels,
    })
}

fn require_run(n: usize, name: &str, run: &BenchRun) {
    if !run.success {
        verdict(n, name, false, &format!("bench failed: {}", run.stderr.lines().last().unwrap_or("")));
    }
}

/// First and last mean return of a training log.
fn learning_curve(path: &Path) -> Option<(f64, f64)> {
    let text = std::fs::read_to_string(path).ok()?;
    let mut lines = text.lines();
    let col = lines.next()?.split('\t').position(|h| h == "mean_return")?;
    let values: Vec<f64> = lines.map(|l| l.split('\t').nth(col).unwrap().parse().unwrap()).collect();
    Some((*values.first()?, *values.last()?))
}

#[test]
fn criterion_07_learning_sanity() {
    let name = "learning sanity";
    let run = default_bench();
    require_run(7, name, run);
    let (mut below_greedy, mut near_bound, mut improved) = (0, 0, 0);
    let mut details = Vec::new();
    for seed in SEEDS {
        let (Some(ppo), Some(greedy)) = (pooled(run, seed, "PPO-OPA"), pooled(run, seed, "Greedy")) else {
            details.push(format!("seed {seed}: missing rows"));
            continue;
        };
        let gap = (ppo.cost - ppo.reference) / ppo.reference;
        below_greedy += usize::from(ppo.violation < greedy.violation);
        near_bound += usize::from(gap <= 0.05);
        let curve = learning_curve(&run.out.join(format!("seed-{seed}")).join(PolicyName::PpoOpa.slug()).join("train_log.tsv"));
        improved += usize::from(curve.is_some_and(|(first, last)| last > first));
        details.push(format!(
            "seed {seed}: viol {:.4}% vs greedy {:.4}%, gap vs bound {:.3}%",
            100.0 * ppo.violation,
            100.0 * greedy.violation,
            100.0 * gap
        ));
    }
    let kinds: Vec<&str> =
        run.rows.iter().filter(|r| r.algorithm == "PPO-OPA").map(|r| r.reference_kind.as_str()).collect();
    let against_bound = kinds.iter().all(|k| *k == "lower-bound");
    let fast = run.elapsed < Duration::from_secs(15 * 60);
    let pass = below_greedy >= 4 && near_bound == SEEDS.len() && against_bound && fast;
    verdict(
        7,
        name,
        pass,
        &format!(
            "violations below greedy on {below_greedy}/5, within 5% of the bound on {near_bound}/5, return improved on {improved}/5, bench {:.1?}; {}",
            run.elapsed,
            details.join("; ")
        ),
    );
}

#[test]
fn criterion_08_direction_vs_proportion() {
    let name = "direction vs Proportion";
    let run = default_bench();
    require_run(8, name, run);
    let mut dominates = 0;
    let mut details = Vec::new();
    for seed in SEEDS {
        let (Some(ppo), Some(prop)) = (pooled(run, seed, "PPO-OPA"), pooled(run, seed, "Proportion")) else {
            details.push(format!("seed {seed}: missing rows"));
            continue;
        };
        let ok = ppo.cost <= prop.cost && ppo.violation <= prop.violation;
        dominates += usize::from(ok);
        details.push(format!(
            "seed {seed} {}: cost {:.4} vs {:.4}, viol {:.4}% vs {:.4}%",
            if ok { "ok" } else { "no" },
            ppo.cost,
            prop.cost,
            100.0 * ppo.violation,
            100.0 * prop.violation
        ));
    }
    verdict(8, name, dominates >= 3, &format!("dominates or ties on {dominates}/5; {}", details.join("; ")));
}

#[test]
fn criterion_09_pdo_near_optimality() {
    let name = "PDO near-optimality";
    let run = capacity_bench();
    require_run(9, name, run);
    let pdo: Vec<&ReportRow> = run.rows.iter().filter(|r| r.algorithm == "PDO").collect();
    let mut per_seed: BTreeMap<u64, f64> = BTreeMap::new();
    for r in &pdo {
        let g = r.gap.unwrap_or(f64::INFINITY);
        let e = per_seed.entry(r.seed).or_insert(f64::NEG_INFINITY);
        *e = e.max(g);
    }
    let bound_only = pdo.iter().all(|r| r.reference_kind == "lower-bound");
    let pass = per_seed.len() == SEEDS.len() && per_seed.values().all(|&g| g < 0.02) && bound_only;
    let detail: Vec<String> = per_seed.iter().map(|(s, g)| format!("seed {s} worst gap {:.3}%", 100.0 * g)).collect();
    verdict(9, name, pass, &format!("{} day rows, reference is the lower bound: {bound_only}; {}", pdo.len(), detail.join(", ")));
}

#[test]
fn criterion_10_recount_oracle() {
    let name = "recount oracle";
    let mut details = Vec::new();
    let mut pass = true;
    for run in [default_bench(), capacity_bench()] {
        require_run(10, name, run);
        let out = Command::new(env!("CARGO_BIN_EXE_opa"))
            .args(["recount", "--dir", run.out.to_str().unwrap()])
            .output()
            .expect("run opa recount");
        let stdout = String::from_utf8_lossy(&out.stdout);
        let expected = format!("all {} rows reproduced", run.rows.len());
        let ok = out.status.success() && stdout.contains(&expected) && !run.rows.is_empty();
        pass &= ok;
        let mismatches: HashMap<&str, usize> =
            stdout.lines().filter(|l| l.contains("MISMATCH")).fold(HashMap::new(), |mut m, l| {
                *m.entry(l.split('\t').next().unwrap_or(l)).or_default() += 1;
                m
            });
        details.push(format!(
            "{}: {} rows, reproduced {ok}, mismatching reports {}",
            run.out.file_name().unwrap().to_string_lossy(),
            run.rows.len(),
            mismatches.len()
        ));
    }
    verdict(10, name, pass, &details.join("; "));
}
