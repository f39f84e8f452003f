//! Synthetic instance generator.
//!
//! A generated world is a fixed *catalog* (hubs with per-leg costs, OD pairs,
//! routes, parcel types and constraints) from which any number of days of
//! parcels are sampled. Every day of a history shares the catalog, so route
//! ids, hub membership and constraint bounds line up across days.
//!
//! Capacity bounds are calibrated against the expected hub load under
//! uniform-random assignment: the cheapest `hot_hub_fraction` of hubs get
//! `U = load / capacity_tightness`, the rest `U = load / slack_tightness`.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{
    Candidate, ConstraintKind, ConstraintSpec, HubId, Instance, LocationId, ModelError, Parcel, ProviderId, Route,
    RouteId,
};

#[derive(Debug, Error)]
pub enum GenError {
    #[error("invalid generator config: {0}")]
    Config(String),
    #[error("generated instance is invalid: {0}")]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CostModel {
    /// Mean base cost of one hub leg.
    pub leg_cost: f64,
    /// Relative spread of per-hub leg costs around `leg_cost`.
    pub leg_spread: f64,
    /// Cost multiplier per kg: `base * (1 + weight_factor * weight)`.
    pub weight_factor: f64,
    /// Sigma of the multiplicative lognormal per-(parcel, route) noise.
    pub noise_scale: f64,
}

impl Default for CostModel {
    fn default() -> Self {
        Self { leg_cost: 50.0, leg_spread: 0.02, weight_factor: 0.01, noise_scale: 0.01 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenConfig {
    pub seed: u64,
    pub n_parcels: usize,
    pub n_hubs: usize,
    pub n_od_pairs: usize,
    pub n_providers: usize,
    /// Inclusive (min, max) candidate count per parcel.
    pub routes_per_parcel: (usize, usize),
    pub hubs_per_route: usize,
    /// Distinct candidate sets each OD pair draws its parcels from.
    pub route_sets_per_od: usize,
    pub cost_model: CostModel,
    /// Expected uniform-assignment load over `U_k` for the cheapest hubs.
    pub capacity_tightness: f64,
    pub hot_hub_fraction: f64,
    /// Same ratio for the remaining hubs.
    pub slack_tightness: f64,
    /// Fraction of OD pairs carrying a proportion constraint.
    pub proportion_fraction: f64,
    /// Range `p_lower` is drawn from.
    pub p_lower: (f64, f64),
    /// Range `p_upper` is drawn from.
    pub p_upper: (f64, f64),
    /// Relative day-to-day volume variation of histories.
    pub volume_variation: f64,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            n_parcels: 10_000,
            n_hubs: 20,
            n_od_pairs: 40,
            n_providers: 4,
            routes_per_parcel: (2, 4),
            hubs_per_route: 2,
            route_sets_per_od: 3,
            cost_model: CostModel::default(),
            capacity_tightness: 1.2,
            hot_hub_fraction: 0.3,
            slack_tightness: 0.6,
            proportion_fraction: 0.25,
            p_lower: (0.15, 0.3),
            p_upper: (0.55, 0.75),
            volume_variation: 0.2,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<(), GenError> {
        let bad = |m: &str| Err(GenError::Config(m.to_string()));
        if self.n_parcels == 0
            || self.n_hubs == 0
            || self.n_od_pairs == 0
            || self.n_providers == 0
            || self.hubs_per_route == 0
            || self.route_sets_per_od == 0
        {
            return bad("all counts must be at least 1");
        }
        let (lo, hi) = self.routes_per_parcel;
        if lo == 0 || lo > hi {
            return bad("routes_per_parcel must satisfy 1 <= min <= max");
        }
        if !(self.capacity_tightness > 0.0 && self.slack_tightness > 0.0) {
            return bad("tightness must be positive");
        }
        let unit = |x: f64| (0.0..=1.0).contains(&x);
        if !unit(self.hot_hub_fraction) || !unit(self.proportion_fraction) || !unit(self.volume_variation) {
            return bad("fractions must lie in [0, 1]");
        }
        for (a, b) in [self.p_lower, self.p_upper] {
            if !unit(a) || !unit(b) || a > b {
                return bad("p bound ranges must be ordered sub-intervals of [0, 1]");
            }
        }
        let cm = &self.cost_model;
        if !(cm.leg_cost > 0.0) || !(0.0..1.0).contains(&cm.leg_spread) || cm.weight_factor < 0.0 || cm.noise_scale < 0.0
        {
            return bad("cost model parameters out of range");
        }
        if self.hubs_per_route > self.n_hubs {
            return bad("hubs_per_route exceeds n_hubs");
        }
        let constructible = (0..self.hubs_per_route).fold(self.n_providers as f64, |acc, i| acc * (self.n_hubs - i) as f64);
        if hi as f64 > constructible {
            return bad("routes_per_parcel.max exceeds the number of constructible routes per OD pair");
        }
        let n_locations = locations_for(self.n_od_pairs);
        if n_locations * (n_locations - 1) < self.n_od_pairs {
            return bad("too many OD pairs");
        }
        Ok(())
    }
}

/// Smallest location count with at least `n_od` ordered pairs.
fn locations_for(n_od: usize) -> usize {
    let mut n = 2;
    while n * (n - 1) < n_od {
        n += 1;
    }
    n
}

struct ParcelType {
    od: usize,
    routes: Vec<RouteId>,
    weight: f64,
}

/// Day-independent part of a generated world.
struct Catalog {
    hubs: Vec<String>,
    locations: Vec<String>,
    providers: Vec<String>,
    routes: Vec<Route>,
    route_base: Vec<f64>,
    ods: Vec<(LocationId, LocationId)>,
    types: Vec<ParcelType>,
    constraints: Vec<ConstraintSpec>,
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

impl Catalog {
    fn build(cfg: &GenConfig) -> Result<Self, GenError> {
        cfg.validate()?;
        let mut rng = stream_rng(cfg.seed, 0);
        let cm = &cfg.cost_model;

        let hubs: Vec<String> = (0..cfg.n_hubs).map(|i| format!("H{i:02}")).collect();
        let leg: Vec<f64> = (0..cfg.n_hubs)
            .map(|_| cm.leg_cost * (1.0 + cm.leg_spread * rng.random_range(-1.0..=1.0)))
            .collect();
        let n_loc = locations_for(cfg.n_od_pairs);
        let locations: Vec<String> = (0..n_loc).map(|i| format!("L{i:02}")).collect();
        let providers: Vec<String> = (0..cfg.n_providers).map(|i| format!("P{i}")).collect();

        let all_pairs: Vec<(usize, usize)> =
            (0..n_loc).flat_map(|o| (0..n_loc).filter(move |&d| d != o).map(move |d| (o, d))).collect();
        let mut picked: Vec<usize> = sample(&mut rng, all_pairs.len(), cfg.n_od_pairs).into_vec();
        picked.sort_unstable();
        let ods: Vec<(LocationId, LocationId)> = picked
            .iter()
            .map(|&i| (LocationId(all_pairs[i].0 as u32), LocationId(all_pairs[i].1 as u32)))
            .collect();

        let (_, max_routes) = cfg.routes_per_parcel;
        let constructible =
            (0..cfg.hubs_per_route).fold(cfg.n_providers as f64, |acc, i| acc * (cfg.n_hubs - i) as f64);
        let per_od = ((max_routes + 1) as f64).min(constructible) as usize;

        let mut routes = Vec::new();
        let mut route_base = Vec::new();
        let mut od_routes: Vec<Vec<RouteId>> = Vec::with_capacity(ods.len());
        for (oi, &(o, d)) in ods.iter().enumerate() {
            let mut mine: Vec<RouteId> = Vec::new();
            while mine.len() < per_od {
                let provider = ProviderId(rng.random_range(0..cfg.n_providers) as u32);
                let hub_seq: Vec<HubId> =
                    sample(&mut rng, cfg.n_hubs, cfg.hubs_per_route).iter().map(|h| HubId(h as u32)).collect();
                let dup = mine.iter().any(|r| {
                    let r = &routes[r.index()] as &Route;
                    r.provider == provider && r.hubs == hub_seq
                });
                if dup {
                    continue;
                }
                let id = RouteId(routes.len() as u32);
                route_base.push(hub_seq.iter().map(|h| leg[h.index()]).sum::<f64>());
                routes.push(Route {
                    id: format!("R{oi:03}-{}", mine.len()),
                    origin: o,
                    destination: d,
                    provider,
                    hubs: hub_seq,
                });
                mine.push(id);
            }
            od_routes.push(mine);
        }

        let mut types = Vec::new();
        for (oi, mine) in od_routes.iter().enumerate() {
            let od_weight = rng.random_range(0.5..1.5);
            for _ in 0..cfg.route_sets_per_od {
                let size = rng.random_range(cfg.routes_per_parcel.0..=cfg.routes_per_parcel.1).min(mine.len());
                let mut set: Vec<RouteId> = sample(&mut rng, mine.len(), size).iter().map(|i| mine[i]).collect();
                set.sort_unstable();
                types.push(ParcelType { od: oi, routes: set, weight: od_weight / cfg.route_sets_per_od as f64 });
            }
        }
        let total_w: f64 = types.iter().map(|t| t.weight).sum();
        for t in &mut types {
            t.weight /= total_w;
        }

        // Capacity calibration against the expected uniform-assignment load.
        let mut load = vec![0.0; cfg.n_hubs];
        for t in &types {
            let share = t.weight * cfg.n_parcels as f64 / t.routes.len() as f64;
            for r in &t.routes {
                for h in &routes[r.index()].hubs {
                    load[h.index()] += share;
                }
            }
        }
        let mut by_cost: Vec<usize> = (0..cfg.n_hubs).collect();
        by_cost.sort_by(|&a, &b| leg[a].total_cmp(&leg[b]));
        let n_hot = (cfg.hot_hub_fraction * cfg.n_hubs as f64).round() as usize;
        let mut tightness = vec![cfg.slack_tightness; cfg.n_hubs];
        for &h in &by_cost[..n_hot] {
            tightness[h] = cfg.capacity_tightness;
        }
        let mut constraints = Vec::new();
        for h in 0..cfg.n_hubs {
            if load[h] > 0.0 {
                let upper = (load[h] / tightness[h]).round().max(1.0) as u32;
                constraints.push(ConstraintSpec {
                    id: format!("cap-{}", hubs[h]),
                    kind: ConstraintKind::Capacity { hub: HubId(h as u32), upper },
                });
            }
        }

        let n_prop = (cfg.proportion_fraction * ods.len() as f64).round() as usize;
        let mut prop_ods: Vec<usize> = sample(&mut rng, ods.len(), n_prop).into_vec();
        prop_ods.sort_unstable();
        for oi in prop_ods {
            let mine = &od_routes[oi];
            let provider = routes[mine[rng.random_range(0..mine.len())].index()].provider;
            // Share of this OD's volume that can reach / avoid the provider.
            let (mut can_hit, mut can_avoid, mut total) = (0.0, 0.0, 0.0);
            for t in types.iter().filter(|t| t.od == oi) {
                total += t.weight;
                if t.routes.iter().any(|r| routes[r.index()].provider == provider) {
                    can_hit += t.weight;
                }
                if t.routes.iter().any(|r| routes[r.index()].provider != provider) {
                    can_avoid += t.weight;
                }
            }
            let (can_hit, can_avoid) = (can_hit / total, can_avoid / total);
            let mut p_lower = rng.random_range(cfg.p_lower.0..=cfg.p_lower.1);
            let mut p_upper = rng.random_range(cfg.p_upper.0..=cfg.p_upper.1);
            // Keep the offline problem satisfiable in expectation.
            p_lower = p_lower.min(0.8 * can_hit);
            p_upper = p_upper.max(1.0 - 0.8 * can_avoid).max(p_lower);
            let (o, d) = ods[oi];
            constraints.push(ConstraintSpec {
                id: format!("prop-{}-{}-{}", locations[o.index()], locations[d.index()], providers[provider.index()]),
                kind: ConstraintKind::Proportion { origin: o, destination: d, provider, p_lower, p_upper },
            });
        }

        Ok(Self { hubs, locations, providers, routes, route_base, ods, types, constraints })
    }

    fn sample_day(&self, cfg: &GenConfig, label: String, m: usize, rng: &mut ChaCha8Rng) -> Result<Instance, GenError> {
        let cm = &cfg.cost_model;
        let weight_dist = LogNormal::new(1.0, 0.6).expect("valid lognormal");
        let noise = Normal::new(0.0, 1.0).expect("valid normal");
        let cumulative: Vec<f64> = self
            .types
            .iter()
            .scan(0.0, |acc, t| {
                *acc += t.weight;
                Some(*acc)
            })
            .collect();
        let mut parcels = Vec::with_capacity(m);
        for id in 0..m {
            let u: f64 = rng.random();
            let ti = cumulative.partition_point(|&c| c <= u).min(self.types.len() - 1);
            let ty = &self.types[ti];
            let weight: f64 = weight_dist.sample(rng);
            let weight = (weight * 1000.0).round() / 1000.0;
            let candidates = ty
                .routes
                .iter()
                .map(|&r| {
                    let z: f64 = noise.sample(rng);
                    let cost = self.route_base[r.index()] * (1.0 + cm.weight_factor * weight) * (cm.noise_scale * z).exp();
                    Candidate { route: r, cost }
                })
                .collect();
            let (o, d) = self.ods[ty.od];
            parcels.push(Parcel { id, origin: o, destination: d, weight, candidates });
        }
        Ok(Instance::new(
            label,
            self.hubs.clone(),
            self.locations.clone(),
            self.providers.clone(),
            self.routes.clone(),
            self.constraints.clone(),
            parcels,
        )?)
    }
}

/// One day with exactly `n_parcels` parcels.
pub fn generate(cfg: &GenConfig) -> Result<Instance, GenError> {
    let catalog = Catalog::build(cfg)?;
    let mut rng = stream_rng(cfg.seed, 1);
    catalog.sample_day(cfg, format!("synthetic-s{}", cfg.seed), cfg.n_parcels, &mut rng)
}

/// `n_days` days over one catalog; day volumes vary by up to
/// `±volume_variation` around `n_parcels`.
pub fn generate_history(cfg: &GenConfig, n_days: usize) -> Result<Vec<Instance>, GenError> {
    if n_days == 0 {
        return Err(GenError::Config("n_days must be at least 1".into()));
    }
    let catalog = Catalog::build(cfg)?;
    (0..n_days)
        .map(|d| {
            let mut rng = stream_rng(cfg.seed, 2 + d as u64);
            let v = cfg.volume_variation;
            let factor = if v > 0.0 { rng.random_range(1.0 - v..=1.0 + v) } else { 1.0 };
            let m = ((cfg.n_parcels as f64 * factor).round() as usize).max(1);
            catalog.sample_day(cfg, format!("synthetic-s{}-d{d:02}", cfg.seed), m, &mut rng)
        })
        .collect()
}
