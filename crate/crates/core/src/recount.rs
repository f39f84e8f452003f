//! Metric recomputation from a rollout log, written without the environment
//! so that emitted reports can be checked against a second code path.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::model::{ConstraintKind, Instance};

#[derive(Debug, Error, PartialEq)]
pub enum RecountError {
    #[error("log line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("log line {line}: parcel {parcel} {message}")]
    Mismatch { line: usize, parcel: usize, message: String },
    #[error("log covers {found} of {expected} parcels")]
    Incomplete { expected: usize, found: usize },
    #[error("{path}: {message}")]
    File { path: PathBuf, message: String },
}

/// The columns of a log line the recount relies on.
#[derive(Debug, Clone, PartialEq)]
pub struct LogEntry {
    pub t: usize,
    pub parcel: usize,
    pub route: String,
    pub cost: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Recount {
    pub parcels: usize,
    pub total_cost: f64,
    pub average_cost: f64,
    pub violation_count: usize,
    pub violation_rate: f64,
}

pub fn parse_log(text: &str) -> Result<Vec<LogEntry>, RecountError> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if i == 0 {
            if !line.starts_with("t\tparcel\troute\tcost") {
                return Err(RecountError::Parse { line: 1, message: "unexpected header".into() });
            }
            continue;
        }
        if line.is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() < 4 {
            return Err(RecountError::Parse { line: line_no, message: "too few columns".into() });
        }
        let bad = |what: &str| RecountError::Parse { line: line_no, message: format!("bad {what}") };
        out.push(LogEntry {
            t: cols[0].parse().map_err(|_| bad("t"))?,
            parcel: cols[1].parse().map_err(|_| bad("parcel"))?,
            route: cols[2].to_string(),
            cost: cols[3].parse().map_err(|_| bad("cost"))?,
        });
    }
    Ok(out)
}

pub fn recount(instance: &Instance, log: &[LogEntry]) -> Result<Recount, RecountError> {
    let m = instance.m();
    let route_of: HashMap<&str, usize> = instance.routes().iter().enumerate().map(|(i, r)| (r.id.as_str(), i)).collect();
    let mut seen = vec![false; m];
    let mut chosen = Vec::with_capacity(log.len());
    for (i, e) in log.iter().enumerate() {
        let line = i + 2;
        let mismatch = |message: &str| RecountError::Mismatch { line, parcel: e.parcel, message: message.into() };
        if e.t != i {
            return Err(RecountError::Parse { line, message: format!("step {} out of order", e.t) });
        }
        let parcel = instance.parcels().get(e.parcel).ok_or_else(|| mismatch("does not exist"))?;
        if std::mem::replace(&mut seen[e.parcel], true) {
            return Err(mismatch("assigned twice"));
        }
        let r = *route_of.get(e.route.as_str()).ok_or_else(|| mismatch("uses an unknown route"))?;
        let cand = parcel.candidates.iter().find(|c| c.route.index() == r).ok_or_else(|| mismatch("route is not a candidate"))?;
        if cand.cost != e.cost {
            return Err(mismatch("logged cost differs from the instance"));
        }
        chosen.push(r);
    }
    if log.len() != m {
        return Err(RecountError::Incomplete { expected: m, found: log.len() });
    }

    let routes = instance.routes();
    let mut flagged = vec![false; m];
    // Mark the last `n` log positions matching `pred`.
    let mut flag_last = |n: usize, pred: &dyn Fn(usize) -> bool| {
        let mut left = n;
        for pos in (0..log.len()).rev() {
            if left == 0 {
                break;
            }
            if pred(pos) {
                flagged[log[pos].parcel] = true;
                left -= 1;
            }
        }
    };
    for c in instance.constraints() {
        match c.kind {
            ConstraintKind::Capacity { hub, upper } => {
                let through = |pos: usize| routes[chosen[pos]].hubs.contains(&hub);
                let load = (0..log.len()).filter(|&p| through(p)).count();
                flag_last(load.saturating_sub(upper as usize), &through);
            }
            ConstraintKind::Proportion { origin, destination, provider, p_lower, p_upper } => {
                let in_od = |pos: usize| {
                    let p = &instance.parcels()[log[pos].parcel];
                    p.origin == origin && p.destination == destination
                };
                let n = (0..log.len()).filter(|&p| in_od(p)).count();
                if n == 0 {
                    continue;
                }
                let on = |pos: usize| in_od(pos) && routes[chosen[pos]].provider == provider;
                let off = |pos: usize| in_od(pos) && routes[chosen[pos]].provider != provider;
                let hits = (0..log.len()).filter(|&p| on(p)).count();
                let share = hits as f64 / n as f64;
                // shortfalls below 1e-9 of a parcel are float noise
                let count = |x: f64| (x - 1e-9).ceil().max(0.0) as usize;
                if share > p_upper {
                    flag_last(count((share - p_upper) * n as f64), &on);
                } else if share < p_lower {
                    flag_last(count((p_lower - share) * n as f64), &off);
                }
            }
        }
    }

    let total_cost: f64 = log.iter().map(|e| e.cost).sum();
    let violation_count = flagged.into_iter().filter(|&f| f).count();
    Ok(Recount {
        parcels: m,
        total_cost,
        average_cost: total_cost / m as f64,
        violation_count,
        violation_rate: violation_count as f64 / m as f64,
    })
}

/// Result of checking one report row against its log.
#[derive(Debug, Clone, PartialEq)]
pub struct RowCheck {
    pub report: PathBuf,
    pub algorithm: String,
    pub recount: Recount,
    /// Empty when every reported number is reproduced exactly.
    pub mismatches: Vec<String>,
}

fn file_err(path: &Path, message: impl ToString) -> RecountError {
    RecountError::File { path: path.to_path_buf(), message: message.to_string() }
}

fn read(path: &Path) -> Result<String, RecountError> {
    std::fs::read_to_string(path).map_err(|e| file_err(path, e))
}

/// Check every row of a `report.tsv` against the logs it references and the
/// `instance.txt` beside it.
pub fn verify_report(path: &Path) -> Result<Vec<RowCheck>, RecountError> {
    let dir = path.parent().unwrap_or(Path::new("."));
    let instance_path = dir.join("instance.txt");
    let instance = Instance::parse(&read(&instance_path)?).map_err(|e| file_err(&instance_path, e))?;
    let text = read(path)?;
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().ok_or_else(|| file_err(path, "empty report"))?.split('\t').collect();
    let col = |name: &str| header.iter().position(|h| *h == name).ok_or_else(|| file_err(path, format!("missing column {name}")));
    let (c_alg, c_parcels, c_avg, c_gap, c_rate, c_count, c_ref, c_log) = (
        col("algorithm")?,
        col("parcels")?,
        col("average_cost")?,
        col("ip_gap")?,
        col("violation_rate")?,
        col("violation_count")?,
        col("reference_average_cost")?,
        col("log")?,
    );
    let mut out = Vec::new();
    for line in lines.filter(|l| !l.is_empty()) {
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != header.len() {
            return Err(file_err(path, format!("row has {} fields, header {}", f.len(), header.len())));
        }
        let num = |i: usize| f[i].parse::<f64>().map_err(|_| file_err(path, format!("bad number {:?}", f[i])));
        let log_path = dir.join(f[c_log]);
        let r = recount(&instance, &parse_log(&read(&log_path)?)?)?;
        let mut mismatches = Vec::new();
        if f[c_parcels] != r.parcels.to_string() {
            mismatches.push(format!("parcels {} != {}", f[c_parcels], r.parcels));
        }
        let avg = num(c_avg)?;
        if avg != r.average_cost {
            mismatches.push(format!("average cost {avg:?} != {:?}", r.average_cost));
        }
        let rate = num(c_rate)?;
        if rate != r.violation_rate {
            mismatches.push(format!("violation rate {rate:?} != {:?}", r.violation_rate));
        }
        if f[c_count] != r.violation_count.to_string() {
            mismatches.push(format!("violation count {} != {}", f[c_count], r.violation_count));
        }
        match (f[c_gap], f[c_ref]) {
            ("NA", "NA") => {}
            (_, "NA") | ("NA", _) => mismatches.push("gap and reference disagree on availability".into()),
            _ => {
                let (gap, reference) = (num(c_gap)?, num(c_ref)?);
                let expected = (r.average_cost - reference) / reference;
                if gap != expected {
                    mismatches.push(format!("gap {gap:?} != {expected:?}"));
                }
            }
        }
        out.push(RowCheck { report: path.to_path_buf(), algorithm: f[c_alg].to_string(), recount: r, mismatches });
    }
    Ok(out)
}

/// All `report.tsv` files below `root`, in path order.
pub fn find_reports(root: &Path) -> Result<Vec<PathBuf>, RecountError> {
    let mut found = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).map_err(|e| file_err(&d, e))? {
            let p = entry.map_err(|e| file_err(&d, e))?.path();
            if p.is_dir() {
                stack.push(p);
            } else if p.file_name().is_some_and(|n| n == "report.tsv") {
                found.push(p);
            }
        }
    }
    found.sort();
    Ok(found)
}

pub fn verify_tree(root: &Path) -> Result<Vec<RowCheck>, RecountError> {
    let mut all = Vec::new();
    for p in find_reports(root)? {
        all.extend(verify_report(&p)?);
    }
    Ok(all)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{Env, LogRecord, ShapingWeights};
    use crate::oracle::tests::{hand_instance, random_tiny};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rollout_log(inst: &Instance, actions: impl Fn(usize, usize) -> usize) -> (String, crate::env::Report) {
        let (mut env, _) = Env::reset(inst, ShapingWeights::default());
        let mut lines = vec![crate::env::LOG_HEADER.to_string()];
        while let Some(p) = env.current_parcel() {
            let t = env.state().t;
            let a = actions(t, p.candidates.len());
            let out = env.step(a).unwrap();
            let a = env.state().assignment_log.last().unwrap().clone();
            lines.push(LogRecord::new(t, inst, &a, &out.reward).to_line());
        }
        (lines.join("\n"), env.finalize().unwrap())
    }

    #[test]
    fn hand_instance_greedy() {
        let inst = hand_instance();
        let (text, _) = rollout_log(&inst, |_, _| 0);
        let r = recount(&inst, &parse_log(&text).unwrap()).unwrap();
        assert_eq!((r.total_cost, r.violation_count, r.violation_rate), (2.0, 1, 0.5));
    }

    #[test]
    fn agrees_with_env_on_random_rollouts() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..200 {
            let inst = random_tiny(&mut rng);
            let picks: Vec<usize> = (0..inst.m()).map(|_| rng.random_range(0..8)).collect();
            let (text, report) = rollout_log(&inst, |t, n| picks[t] % n);
            let r = recount(&inst, &parse_log(&text).unwrap()).unwrap();
            assert_eq!(r.total_cost, report.total_cost);
            assert_eq!(r.average_cost, report.average_cost);
            assert_eq!(r.violation_count, report.violation_count);
            assert_eq!(r.violation_rate, report.violation_rate);
        }
    }

    #[test]
    fn rejects_tampered_logs() {
        let inst = hand_instance();
        let (text, _) = rollout_log(&inst, |_, _| 0);
        let log = parse_log(&text).unwrap();
        let mut dup = log.clone();
        dup[1].parcel = 0;
        assert!(matches!(recount(&inst, &dup), Err(RecountError::Mismatch { .. })));
        let mut cost = log.clone();
        cost[0].cost += 1.0;
        assert!(matches!(recount(&inst, &cost), Err(RecountError::Mismatch { .. })));
        let mut route = log.clone();
        route[0].route = "r1p".into();
        assert!(matches!(recount(&inst, &route), Err(RecountError::Mismatch { .. })));
        assert!(matches!(recount(&inst, &log[..1]), Err(RecountError::Incomplete { .. })));
        assert!(parse_log("bogus\n").is_err());
    }

    #[test]
    fn verifies_written_reports() {
        use crate::experiment::{evaluate_day, write_day, ExperimentConfig, PolicyName, Trained};
        let inst = hand_instance();
        let cfg = ExperimentConfig { policies: vec![PolicyName::Greedy, PolicyName::Pdo], ..Default::default() };
        let day = evaluate_day(&cfg, &Trained::default().policies(&cfg), 0, 0, &inst).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_day(dir.path(), &day).unwrap();
        let checks = verify_tree(dir.path()).unwrap();
        assert_eq!(checks.len(), 2);
        assert!(checks.iter().all(|c| c.mismatches.is_empty()), "{checks:?}");
        assert_eq!(checks[0].recount.violation_rate, 0.5);

        let report = find_reports(dir.path()).unwrap().remove(0);
        let text = std::fs::read_to_string(&report).unwrap();
        std::fs::write(&report, text.replace("\t0.5\t", "\t0.25\t")).unwrap();
        let checks = verify_report(&report).unwrap();
        assert!(!checks[0].mismatches.is_empty());
    }
}
