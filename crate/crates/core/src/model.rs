//! Core domain types: routes, parcels, constraints and the instance that ties
//! them together, plus the plain-text instance file format.
//!
//! # Instance file format
//!
//! Line oriented, whitespace separated. Blank lines and lines starting with
//! `#` are ignored. Identifiers are opaque tokens without whitespace, `,` or
//! `:`. Real values are written with Rust's shortest round-trip formatting so
//! a save/load cycle is lossless.
//!
//! ```text
//! opa-instance v1
//! label <free text until end of line>
//! max_candidates <N_R>
//! hubs <n> <hub>...
//! locations <n> <location>...
//! providers <n> <provider>...
//! routes <n>
//! <route> <origin> <destination> <provider> <hub>[,<hub>...]     (n lines)
//! constraints <n>
//! capacity <id> <hub> <upper>                                     (or)
//! proportion <id> <origin> <destination> <provider> <p_lo> <p_hi>
//! parcels <m>
//! <id> <origin> <destination> <weight> <route>:<cost> [<route>:<cost>...]
//! ```
//!
//! Parcel ids must run `0..m` in file order since the id is the arrival step.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("invalid instance: {0}")]
    Invalid(String),
    #[error("route index {0} does not resolve in the route table")]
    UnresolvedRoute(usize),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, ModelError>;

macro_rules! index_newtype {
    ($(#[$m:meta])* $name:ident) => {
        $(#[$m])*
        #[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
        pub struct $name(pub u32);

        impl $name {
            #[inline]
            pub fn index(self) -> usize {
                self.0 as usize
            }
        }
    };
}

index_newtype!(
    /// Index into [`Instance::hub_names`].
    HubId
);
index_newtype!(
    /// Index into [`Instance::location_names`].
    LocationId
);
index_newtype!(
    /// Index into [`Instance::provider_names`].
    ProviderId
);
index_newtype!(
    /// Index into [`Instance::routes`].
    RouteId
);

#[derive(Debug, Clone, PartialEq)]
pub struct Route {
    pub id: String,
    pub origin: LocationId,
    pub destination: LocationId,
    pub provider: ProviderId,
    pub hubs: Vec<HubId>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Candidate {
    pub route: RouteId,
    pub cost: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Parcel {
    /// Arrival ordinal, equal to the time step at which the parcel shows up.
    pub id: usize,
    pub origin: LocationId,
    pub destination: LocationId,
    pub weight: f64,
    pub candidates: Vec<Candidate>,
}

impl Parcel {
    pub fn od(&self) -> (LocationId, LocationId) {
        (self.origin, self.destination)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ConstraintKind {
    /// At most `upper` parcels may traverse `hub` (lower bound is zero).
    Capacity { hub: HubId, upper: u32 },
    /// The share of parcels of an OD pair served by `provider` must stay in
    /// `[p_lower, p_upper]`.
    Proportion {
        origin: LocationId,
        destination: LocationId,
        provider: ProviderId,
        p_lower: f64,
        p_upper: f64,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConstraintSpec {
    pub id: String,
    pub kind: ConstraintKind,
}

impl ConstraintSpec {
    pub fn is_capacity(&self) -> bool {
        matches!(self.kind, ConstraintKind::Capacity { .. })
    }
}

/// One day of parcels together with the route catalog and constraints.
///
/// Immutable after construction. Lookup tables derived from the public data
/// (route to constraint membership, OD to proportion constraints) are built
/// once in [`Instance::new`].
#[derive(Debug, Clone, PartialEq)]
pub struct Instance {
    label: String,
    hub_names: Vec<String>,
    location_names: Vec<String>,
    provider_names: Vec<String>,
    routes: Vec<Route>,
    constraints: Vec<ConstraintSpec>,
    parcels: Vec<Parcel>,
    n_r_max: usize,
    route_constraints: Vec<Vec<usize>>,
    od_proportions: HashMap<(LocationId, LocationId), Vec<usize>>,
    capacity_of_hub: Vec<Option<usize>>,
}

fn check_token(kind: &str, name: &str) -> Result<()> {
    if name.is_empty() || name.chars().any(|c| c.is_whitespace() || c == ',' || c == ':') {
        return Err(ModelError::Invalid(format!("{kind} name {name:?} is not a valid token")));
    }
    Ok(())
}

fn check_unique(kind: &str, names: &[String]) -> Result<()> {
    let mut seen = HashMap::with_capacity(names.len());
    for name in names {
        check_token(kind, name)?;
        if seen.insert(name.as_str(), ()).is_some() {
            return Err(ModelError::Invalid(format!("duplicate {kind} {name:?}")));
        }
    }
    Ok(())
}

impl Instance {
    pub fn new(
        label: impl Into<String>,
        hub_names: Vec<String>,
        location_names: Vec<String>,
        provider_names: Vec<String>,
        routes: Vec<Route>,
        constraints: Vec<ConstraintSpec>,
        parcels: Vec<Parcel>,
    ) -> Result<Self> {
        let label = label.into();
        if label.contains('\n') {
            return Err(ModelError::Invalid("label must be a single line".into()));
        }
        check_unique("hub", &hub_names)?;
        check_unique("location", &location_names)?;
        check_unique("provider", &provider_names)?;
        let route_ids: Vec<String> = routes.iter().map(|r| r.id.clone()).collect();
        check_unique("route", &route_ids)?;
        let constraint_ids: Vec<String> = constraints.iter().map(|c| c.id.clone()).collect();
        check_unique("constraint", &constraint_ids)?;

        let n_hubs = hub_names.len();
        let n_loc = location_names.len();
        let n_prov = provider_names.len();
        for r in &routes {
            if r.hubs.is_empty() {
                return Err(ModelError::Invalid(format!("route {} traverses no hub", r.id)));
            }
            if r.hubs.iter().any(|h| h.index() >= n_hubs)
                || r.origin.index() >= n_loc
                || r.destination.index() >= n_loc
                || r.provider.index() >= n_prov
            {
                return Err(ModelError::Invalid(format!("route {} has a dangling reference", r.id)));
            }
        }
        let mut capacity_of_hub = vec![None; n_hubs];
        for (k, c) in constraints.iter().enumerate() {
            match &c.kind {
                ConstraintKind::Capacity { hub, upper } => {
                    if hub.index() >= n_hubs {
                        return Err(ModelError::Invalid(format!("constraint {} names an unknown hub", c.id)));
                    }
                    if *upper < 1 {
                        return Err(ModelError::Invalid(format!("constraint {}: capacity must be at least 1", c.id)));
                    }
                    if capacity_of_hub[hub.index()].replace(k).is_some() {
                        return Err(ModelError::Invalid(format!("hub {} has two capacity constraints", hub_names[hub.index()])));
                    }
                }
                ConstraintKind::Proportion { origin, destination, provider, p_lower, p_upper } => {
                    if origin.index() >= n_loc || destination.index() >= n_loc || provider.index() >= n_prov {
                        return Err(ModelError::Invalid(format!("constraint {} has a dangling reference", c.id)));
                    }
                    if !(0.0..=1.0).contains(p_lower) || !(0.0..=1.0).contains(p_upper) || p_lower > p_upper {
                        return Err(ModelError::Invalid(format!("constraint {}: need 0 <= p_lower <= p_upper <= 1", c.id)));
                    }
                }
            }
        }
        if parcels.is_empty() {
            return Err(ModelError::Invalid("m ≥ 1 required".into()));
        }
        let mut n_r_max = 0;
        for (t, p) in parcels.iter().enumerate() {
            if p.id != t {
                return Err(ModelError::Invalid(format!("parcel at position {t} has id {}", p.id)));
            }
            if p.candidates.is_empty() {
                return Err(ModelError::Invalid(format!("parcel {t} has no candidate route")));
            }
            if !(p.weight >= 0.0 && p.weight.is_finite()) {
                return Err(ModelError::Invalid(format!("parcel {t} has an invalid weight")));
            }
            if p.origin.index() >= n_loc || p.destination.index() >= n_loc {
                return Err(ModelError::Invalid(format!("parcel {t} has a dangling location")));
            }
            for (j, c) in p.candidates.iter().enumerate() {
                let route = routes.get(c.route.index()).ok_or(ModelError::UnresolvedRoute(c.route.index()))?;
                if (route.origin, route.destination) != p.od() {
                    return Err(ModelError::Invalid(format!("parcel {t}: route {} serves another OD pair", route.id)));
                }
                if !(c.cost >= 0.0 && c.cost.is_finite()) {
                    return Err(ModelError::Invalid(format!("parcel {t}: invalid cost")));
                }
                if p.candidates[..j].iter().any(|o| o.route == c.route) {
                    return Err(ModelError::Invalid(format!("parcel {t}: route {} listed twice", route.id)));
                }
            }
            n_r_max = n_r_max.max(p.candidates.len());
        }

        let mut route_constraints = vec![Vec::new(); routes.len()];
        let mut od_proportions: HashMap<(LocationId, LocationId), Vec<usize>> = HashMap::new();
        for (k, c) in constraints.iter().enumerate() {
            match &c.kind {
                ConstraintKind::Capacity { hub, .. } => {
                    for (r, route) in routes.iter().enumerate() {
                        if route.hubs.contains(hub) {
                            route_constraints[r].push(k);
                        }
                    }
                }
                ConstraintKind::Proportion { origin, destination, provider, .. } => {
                    od_proportions.entry((*origin, *destination)).or_default().push(k);
                    for (r, route) in routes.iter().enumerate() {
                        if route.origin == *origin && route.destination == *destination && route.provider == *provider {
                            route_constraints[r].push(k);
                        }
                    }
                }
            }
        }

        Ok(Self {
            label,
            hub_names,
            location_names,
            provider_names,
            routes,
            constraints,
            parcels,
            n_r_max,
            route_constraints,
            od_proportions,
            capacity_of_hub,
        })
    }

    pub fn label(&self) -> &str {
        &self.label
    }
    pub fn hub_names(&self) -> &[String] {
        &self.hub_names
    }
    pub fn location_names(&self) -> &[String] {
        &self.location_names
    }
    pub fn provider_names(&self) -> &[String] {
        &self.provider_names
    }
    pub fn routes(&self) -> &[Route] {
        &self.routes
    }
    pub fn route(&self, id: RouteId) -> &Route {
        &self.routes[id.index()]
    }
    pub fn constraints(&self) -> &[ConstraintSpec] {
        &self.constraints
    }
    pub fn parcels(&self) -> &[Parcel] {
        &self.parcels
    }
    /// Total parcel volume `m`.
    pub fn m(&self) -> usize {
        self.parcels.len()
    }
    /// Maximum candidate count over all parcels (`N_R`).
    pub fn n_r_max(&self) -> usize {
        self.n_r_max
    }

    /// Constraint indices whose consumption a route increments.
    pub fn constraints_of_route(&self, route: RouteId) -> &[usize] {
        &self.route_constraints[route.index()]
    }

    /// Proportion constraints whose denominator counts parcels of this OD pair.
    pub fn proportions_of_od(&self, od: (LocationId, LocationId)) -> &[usize] {
        self.od_proportions.get(&od).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn capacity_constraint_of_hub(&self, hub: HubId) -> Option<usize> {
        self.capacity_of_hub[hub.index()]
    }

    pub fn route_by_name(&self, name: &str) -> Option<RouteId> {
        self.routes.iter().position(|r| r.id == name).map(|i| RouteId(i as u32))
    }

    /// Largest candidate cost in the instance (at least 1e-12).
    pub fn max_candidate_cost(&self) -> f64 {
        self.parcels
            .iter()
            .flat_map(|p| p.candidates.iter().map(|c| c.cost))
            .fold(1e-12, f64::max)
    }

    pub fn mean_candidate_cost(&self) -> f64 {
        let (sum, n) = self
            .parcels
            .iter()
            .flat_map(|p| p.candidates.iter().map(|c| c.cost))
            .fold((0.0, 0usize), |(s, n), c| (s + c, n + 1));
        sum / n as f64
    }

    /// Number of parcels per OD pair, i.e. the offline `n_k` of each
    /// proportion constraint.
    pub fn od_volume(&self, od: (LocationId, LocationId)) -> usize {
        self.parcels.iter().filter(|p| p.od() == od).count()
    }

    /// Load an instance from the text format described in the module docs.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let join = |names: &[String]| names.join(" ");
        let _ = writeln!(out, "opa-instance v1");
        let _ = writeln!(out, "label {}", self.label);
        let _ = writeln!(out, "max_candidates {}", self.n_r_max);
        let _ = writeln!(out, "hubs {} {}", self.hub_names.len(), join(&self.hub_names));
        let _ = writeln!(out, "locations {} {}", self.location_names.len(), join(&self.location_names));
        let _ = writeln!(out, "providers {} {}", self.provider_names.len(), join(&self.provider_names));
        let _ = writeln!(out, "routes {}", self.routes.len());
        for r in &self.routes {
            let hubs: Vec<&str> = r.hubs.iter().map(|h| self.hub_names[h.index()].as_str()).collect();
            let _ = writeln!(
                out,
                "{} {} {} {} {}",
                r.id,
                self.location_names[r.origin.index()],
                self.location_names[r.destination.index()],
                self.provider_names[r.provider.index()],
                hubs.join(",")
            );
        }
        let _ = writeln!(out, "constraints {}", self.constraints.len());
        for c in &self.constraints {
            match &c.kind {
                ConstraintKind::Capacity { hub, upper } => {
                    let _ = writeln!(out, "capacity {} {} {}", c.id, self.hub_names[hub.index()], upper);
                }
                ConstraintKind::Proportion { origin, destination, provider, p_lower, p_upper } => {
                    let _ = writeln!(
                        out,
                        "proportion {} {} {} {} {:?} {:?}",
                        c.id,
                        self.location_names[origin.index()],
                        self.location_names[destination.index()],
                        self.provider_names[provider.index()],
                        p_lower,
                        p_upper
                    );
                }
            }
        }
        let _ = writeln!(out, "parcels {}", self.parcels.len());
        for p in &self.parcels {
            let _ = write!(
                out,
                "{} {} {} {:?}",
                p.id,
                self.location_names[p.origin.index()],
                self.location_names[p.destination.index()],
                p.weight
            );
            for c in &p.candidates {
                let _ = write!(out, " {}:{:?}", self.routes[c.route.index()].id, c.cost);
            }
            out.push('\n');
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        Parser::new(text).parse()
    }
}

/// Candidate routes of parcel `i` that count toward constraint `k`.
///
/// Capacity: candidates traversing the constrained hub. Proportion: candidates
/// run by the constrained provider, and only when the parcel's OD pair is the
/// constraint's.
pub fn routes_touching_constraint(instance: &Instance, k: usize, parcel: &Parcel) -> Result<Vec<RouteId>> {
    let spec = instance
        .constraints()
        .get(k)
        .ok_or_else(|| ModelError::Invalid(format!("constraint index {k} out of range")))?;
    let mut out = Vec::new();
    for c in &parcel.candidates {
        let route = instance.routes().get(c.route.index()).ok_or(ModelError::UnresolvedRoute(c.route.index()))?;
        let hit = match &spec.kind {
            ConstraintKind::Capacity { hub, .. } => route.hubs.contains(hub),
            ConstraintKind::Proportion { origin, destination, provider, .. } => {
                parcel.od() == (*origin, *destination) && route.provider == *provider
            }
        };
        if hit {
            out.push(c.route);
        }
    }
    Ok(out)
}

struct Parser<'a> {
    lines: std::iter::Peekable<std::iter::Enumerate<std::str::Lines<'a>>>,
    last_line: usize,
}

fn perr<T>(line: usize, message: impl Into<String>) -> Result<T> {
    Err(ModelError::Parse { line, message: message.into() })
}

impl<'a> Parser<'a> {
    fn new(text: &'a str) -> Self {
        Self { lines: text.lines().enumerate().peekable(), last_line: 0 }
    }

    /// Next meaningful line as (1-based number, trimmed content).
    fn next(&mut self) -> Result<(usize, &'a str)> {
        for (i, raw) in self.lines.by_ref() {
            let line = raw.trim();
            self.last_line = i + 1;
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            return Ok((i + 1, line));
        }
        perr(self.last_line + 1, "unexpected end of file")
    }

    fn keyword(&mut self, key: &str) -> Result<(usize, &'a str)> {
        let (n, line) = self.next()?;
        match line.split_once(char::is_whitespace) {
            Some((k, rest)) if k == key => Ok((n, rest.trim())),
            None if line == key => Ok((n, "")),
            _ => perr(n, format!("expected `{key}`")),
        }
    }

    fn count(n: usize, s: &str) -> Result<usize> {
        s.parse().or_else(|_| perr(n, format!("expected a count, found {s:?}")))
    }

    fn name_table(&mut self, key: &str) -> Result<(Vec<String>, HashMap<String, u32>)> {
        let (n, rest) = self.keyword(key)?;
        let mut it = rest.split_whitespace();
        let count = Self::count(n, it.next().unwrap_or(""))?;
        let names: Vec<String> = it.map(str::to_string).collect();
        if names.len() != count {
            return perr(n, format!("{key}: declared {count} names, found {}", names.len()));
        }
        let mut map = HashMap::new();
        for (i, name) in names.iter().enumerate() {
            if map.insert(name.clone(), i as u32).is_some() {
                return perr(n, format!("duplicate name {name:?}"));
            }
        }
        Ok((names, map))
    }

    fn parse(mut self) -> Result<Instance> {
        let (n, header) = self.next()?;
        if header != "opa-instance v1" {
            return perr(n, "missing `opa-instance v1` header");
        }
        let (_, label) = self.keyword("label")?;
        let label = label.to_string();
        let (nr_line, nr) = self.keyword("max_candidates")?;
        let declared_nr = Self::count(nr_line, nr)?;
        let (hubs, hub_ix) = self.name_table("hubs")?;
        let (locs, loc_ix) = self.name_table("locations")?;
        let (provs, prov_ix) = self.name_table("providers")?;

        let lookup = |map: &HashMap<String, u32>, what: &str, s: &str, n: usize| -> Result<u32> {
            map.get(s).copied().ok_or_else(|| ModelError::Parse { line: n, message: format!("unknown {what} {s:?}") })
        };

        let (n, rest) = self.keyword("routes")?;
        let n_routes = Self::count(n, rest)?;
        let mut routes = Vec::with_capacity(n_routes);
        let mut route_ix: HashMap<String, u32> = HashMap::new();
        for _ in 0..n_routes {
            let (n, line) = self.next()?;
            let f: Vec<&str> = line.split_whitespace().collect();
            if f.len() != 5 {
                return perr(n, "route record needs 5 fields");
            }
            let hubs = f[4]
                .split(',')
                .map(|h| lookup(&hub_ix, "hub", h, n).map(HubId))
                .collect::<Result<Vec<_>>>()?;
            if route_ix.insert(f[0].to_string(), routes.len() as u32).is_some() {
                return perr(n, format!("duplicate route {:?}", f[0]));
            }
            routes.push(Route {
                id: f[0].to_string(),
                origin: LocationId(lookup(&loc_ix, "location", f[1], n)?),
                destination: LocationId(lookup(&loc_ix, "location", f[2], n)?),
                provider: ProviderId(lookup(&prov_ix, "provider", f[3], n)?),
                hubs,
            });
        }

        let (n, rest) = self.keyword("constraints")?;
        let n_cons = Self::count(n, rest)?;
        let mut constraints = Vec::with_capacity(n_cons);
        let real = |s: &str, n: usize| -> Result<f64> {
            s.parse::<f64>().or_else(|_| perr(n, format!("expected a number, found {s:?}")))
        };
        for _ in 0..n_cons {
            let (n, line) = self.next()?;
            let f: Vec<&str> = line.split_whitespace().collect();
            let kind = match f.first().copied() {
                Some("capacity") if f.len() == 4 => ConstraintKind::Capacity {
                    hub: HubId(lookup(&hub_ix, "hub", f[2], n)?),
                    upper: f[3].parse().or_else(|_| perr(n, "capacity bound must be an integer"))?,
                },
                Some("proportion") if f.len() == 7 => ConstraintKind::Proportion {
                    origin: LocationId(lookup(&loc_ix, "location", f[2], n)?),
                    destination: LocationId(lookup(&loc_ix, "location", f[3], n)?),
                    provider: ProviderId(lookup(&prov_ix, "provider", f[4], n)?),
                    p_lower: real(f[5], n)?,
                    p_upper: real(f[6], n)?,
                },
                _ => return perr(n, "malformed constraint record"),
            };
            constraints.push(ConstraintSpec { id: f[1].to_string(), kind });
        }

        let (n, rest) = self.keyword("parcels")?;
        let m = Self::count(n, rest)?;
        if m == 0 {
            return perr(n, "m ≥ 1 required");
        }
        let mut parcels = Vec::with_capacity(m);
        let mut observed_nr = 0;
        for t in 0..m {
            let (n, line) = self.next()?;
            let f: Vec<&str> = line.split_whitespace().collect();
            if f.len() < 5 {
                return perr(n, "parcel record needs id, origin, destination, weight and at least one candidate");
            }
            let id: usize = f[0].parse().or_else(|_| perr(n, "parcel id must be an integer"))?;
            if id != t {
                return perr(n, format!("expected parcel id {t}, found {id}"));
            }
            let candidates = f[4..]
                .iter()
                .map(|tok| {
                    let (r, c) = tok.split_once(':').ok_or_else(|| ModelError::Parse {
                        line: n,
                        message: format!("candidate {tok:?} is not route:cost"),
                    })?;
                    Ok(Candidate { route: RouteId(lookup(&route_ix, "route", r, n)?), cost: real(c, n)? })
                })
                .collect::<Result<Vec<_>>>()?;
            if candidates.len() > declared_nr {
                return perr(n, format!("{} candidates exceed declared max_candidates {declared_nr}", candidates.len()));
            }
            observed_nr = observed_nr.max(candidates.len());
            parcels.push(Parcel {
                id,
                origin: LocationId(lookup(&loc_ix, "location", f[1], n)?),
                destination: LocationId(lookup(&loc_ix, "location", f[2], n)?),
                weight: real(f[3], n)?,
                candidates,
            });
        }
        if observed_nr != declared_nr {
            return perr(nr_line, format!("declared max_candidates {declared_nr} but the largest candidate list has {observed_nr}"));
        }
        if let Ok((n, _)) = self.next() {
            return perr(n, "trailing content after the last parcel");
        }
        Instance::new(label, hubs, locs, provs, routes, constraints, parcels)
    }
}
