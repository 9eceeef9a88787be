//! Multi-replica serving simulator.
//!
//! Requests arrive as a Poisson process and are routed round-robin, so each
//! replica evolves independently. A replica runs one thing at a time:
//! a queued prefill (which always wins over decode) or one decode turn for the
//! next active request. Prefill time is the pipelined single-request plan for
//! the chosen recompute config; each decode turn costs `decode_cost`.
//!
//! A request emits its first token when prefill finishes and then
//! `output_len` more tokens, so on an idle replica E2E = TTFT + m·c_d.

use std::collections::VecDeque;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::RecomputeConfig;
use crate::profiler::{select_by_quality_target, ParetoFrontier, QUALITY_TOLERANCE};
use crate::sched::{estimate_ttft, CostModel, ScheduledRequest};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkloadSpec {
    /// Mean arrivals per time unit.
    pub rate: f64,
    pub duration: f64,
    pub context_len: usize,
    /// Tokens decoded after the first one.
    pub output_len: usize,
    pub seed: u64,
    pub pair_id: String,
}

impl WorkloadSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.rate.is_finite() && self.rate > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "arrival rate must be positive, got {}",
                self.rate
            )));
        }
        if !(self.duration.is_finite() && self.duration >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "duration must be non-negative, got {}",
                self.duration
            )));
        }
        if self.output_len == 0 {
            return Err(Error::InvalidArgument("output length must be at least 1".into()));
        }
        Ok(())
    }

    pub fn with_rate(&self, rate: f64) -> Self {
        WorkloadSpec { rate, ..self.clone() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Arrival {
    pub id: u64,
    pub time: f64,
}

/// Poisson arrivals in `[0, duration)`.
///
/// Gaps are unit-rate exponentials scaled by `1/rate`, so for a fixed seed
/// the arrival times at two rates differ only by a constant factor.
pub fn generate_workload(spec: &WorkloadSpec) -> Result<Vec<Arrival>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut out = Vec::new();
    let mut t = 0.0f64;
    loop {
        let u: f64 = rng.gen();
        t += -(1.0 - u).ln() / spec.rate;
        if t >= spec.duration {
            return Ok(out);
        }
        out.push(Arrival {
            id: out.len() as u64,
            time: t,
        });
    }
}

/// Round-robin replica for the `sequence`-th request.
pub fn route(sequence: u64, replicas: usize) -> usize {
    assert!(replicas >= 1, "at least one replica");
    (sequence % replicas as u64) as usize
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterSpec {
    pub replicas: usize,
    pub decode_cost: f64,
    pub cost: CostModel,
    pub n_layers: usize,
    pub model: String,
}

impl ClusterSpec {
    pub fn validate(&self) -> Result<()> {
        if self.replicas == 0 {
            return Err(Error::InvalidArgument("at least one replica is required".into()));
        }
        if !(self.decode_cost.is_finite() && self.decode_cost > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "decode cost must be positive, got {}",
                self.decode_cost
            )));
        }
        if self.n_layers == 0 {
            return Err(Error::InvalidArgument("n_layers must be positive".into()));
        }
        self.cost.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SloPolicy {
    /// TTFT budget.
    pub slo: f64,
    pub q_min: f64,
    pub adapt: bool,
}

impl SloPolicy {
    pub fn validate(&self) -> Result<()> {
        if !(self.slo.is_finite() && self.slo > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "SLO must be positive, got {}",
                self.slo
            )));
        }
        if !(0.0..=1.0).contains(&self.q_min) {
            return Err(Error::InvalidArgument(format!(
                "q_min must be in [0, 1], got {}",
                self.q_min
            )));
        }
        Ok(())
    }
}

/// Where per-request recompute configs come from.
#[derive(Debug, Clone, Copy)]
pub enum Selection<'a> {
    /// Same config for every request, e.g. full prefill.
    Fixed(&'a RecomputeConfig),
    /// Profiled frontier; adaptive when the policy says so, else the
    /// smallest-k entry reaching `q_min`.
    Profiled(&'a ParetoFrontier),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Choice {
    pub config: RecomputeConfig,
    pub quality: Option<f64>,
    /// No qualifying config met the SLO on an idle replica.
    pub flagged: bool,
}

fn probe(config: &RecomputeConfig, n_layers: usize) -> ScheduledRequest {
    ScheduledRequest {
        id: 0,
        arrival: 0.0,
        model: String::new(),
        config: config.clone(),
        n_layers,
    }
}

/// Picks a config for a request starting prefill with `queue_depth` others waiting.
///
/// Loaded: smallest-k entry with quality ≥ `q_min`. Idle: largest-k such entry
/// whose standalone TTFT fits the SLO, else the smallest-k one (flagged).
/// Recompute-all when no entry reaches `q_min`.
pub fn adapt_config(
    queue_depth: usize,
    frontier: &ParetoFrontier,
    policy: &SloPolicy,
    cost: &CostModel,
) -> Result<Choice> {
    let n_layers = frontier.n_layers();
    let qualifying: Vec<_> = frontier
        .entries
        .iter()
        .filter(|e| e.quality + QUALITY_TOLERANCE >= policy.q_min)
        .collect();
    let Some(&smallest) = qualifying.first() else {
        let full = frontier.recompute_all();
        return Ok(Choice {
            config: full.config.clone(),
            quality: Some(full.quality),
            flagged: false,
        });
    };
    let pick = |e: &crate::profiler::FrontierEntry, flagged| Choice {
        config: e.config.clone(),
        quality: Some(e.quality),
        flagged,
    };
    if queue_depth > 0 {
        return Ok(pick(smallest, false));
    }
    for e in qualifying.iter().rev() {
        if estimate_ttft(&probe(&e.config, n_layers), cost)? <= policy.slo {
            return Ok(pick(e, false));
        }
    }
    Ok(pick(smallest, true))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RequestRecord {
    pub id: u64,
    pub arrival: f64,
    pub replica: usize,
    pub config_k: usize,
    pub quality: Option<f64>,
    pub flagged: bool,
    pub ttft: f64,
    /// Gaps between consecutive tokens after the first.
    pub tbt: Vec<f64>,
    pub e2e: f64,
}

impl RequestRecord {
    pub fn mean_tbt(&self) -> f64 {
        self.tbt.iter().sum::<f64>() / self.tbt.len() as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub count: usize,
    pub mean: f64,
    pub median: f64,
    pub p90: f64,
}

/// Nearest-rank quantile: the value of rank `ceil(q·n)` (1-based) in sorted order.
pub fn nearest_rank(sorted: &[f64], q: f64) -> f64 {
    let rank = ((q * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len());
    sorted[rank - 1]
}

pub fn aggregate(values: &[f64]) -> Result<Summary> {
    if values.is_empty() {
        return Err(Error::InvalidArgument("no data to aggregate".into()));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    Ok(Summary {
        count: sorted.len(),
        mean: sorted.iter().sum::<f64>() / sorted.len() as f64,
        median: nearest_rank(&sorted, 0.5),
        p90: nearest_rank(&sorted, 0.9),
    })
}

/// Fraction of `ttfts` above `slo`; 0 for an empty slice.
pub fn violation_rate(ttfts: &[f64], slo: f64) -> f64 {
    if ttfts.is_empty() {
        return 0.0;
    }
    ttfts.iter().filter(|&&t| t > slo).count() as f64 / ttfts.len() as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub rate: f64,
    pub generated: usize,
    pub completed: usize,
    pub in_flight: usize,
    pub flagged: usize,
    pub ttft: Option<Summary>,
    pub tbt: Option<Summary>,
    pub e2e: Option<Summary>,
    pub violation_rate: f64,
    #[serde(skip)]
    pub records: Vec<RequestRecord>,
}

impl RunMetrics {
    pub fn p90_ttft(&self) -> f64 {
        self.ttft.map_or(0.0, |s| s.p90)
    }
}

struct Active {
    index: usize,
    remaining: usize,
    last_token: f64,
    tbt: Vec<f64>,
}

struct Pending {
    first_token: f64,
    choice: Choice,
}

/// Event loop for one replica; returns the record of every finished request in
/// completion order.
fn run_replica(
    arrivals: &[Arrival],
    replica: usize,
    workload: &WorkloadSpec,
    cluster: &ClusterSpec,
    policy: &SloPolicy,
    selection: Selection<'_>,
) -> Result<Vec<RequestRecord>> {
    let static_choice = match selection {
        Selection::Fixed(config) => Choice {
            config: config.clone(),
            quality: None,
            flagged: false,
        },
        Selection::Profiled(frontier) => {
            let e = select_by_quality_target(frontier, policy.q_min);
            Choice {
                config: e.config.clone(),
                quality: Some(e.quality),
                flagged: false,
            }
        }
    };
    let static_ttft = estimate_ttft(&probe(&static_choice.config, cluster.n_layers), &cluster.cost)?;

    let mut pending: Vec<Option<Pending>> = (0..arrivals.len()).map(|_| None).collect();
    let mut records = Vec::with_capacity(arrivals.len());
    let mut active: VecDeque<Active> = VecDeque::new();
    let mut next = 0usize;
    let mut t = 0.0f64;
    loop {
        if next < arrivals.len() && arrivals[next].time <= t {
            let depth = arrivals[next + 1..].iter().take_while(|a| a.time <= t).count();
            let (choice, duration) = match selection {
                Selection::Profiled(frontier) if policy.adapt => {
                    let c = adapt_config(depth, frontier, policy, &cluster.cost)?;
                    let d = estimate_ttft(&probe(&c.config, cluster.n_layers), &cluster.cost)?;
                    (c, d)
                }
                _ => (static_choice.clone(), static_ttft),
            };
            t += duration;
            pending[next] = Some(Pending { first_token: t, choice });
            active.push_back(Active {
                index: next,
                remaining: workload.output_len,
                last_token: t,
                tbt: Vec::with_capacity(workload.output_len),
            });
            next += 1;
        } else if let Some(mut a) = active.pop_front() {
            t += cluster.decode_cost;
            a.tbt.push(t - a.last_token);
            a.last_token = t;
            a.remaining -= 1;
            if a.remaining > 0 {
                active.push_back(a);
                continue;
            }
            let arrival = arrivals[a.index];
            let p = pending[a.index].take().expect("prefill precedes decode");
            records.push(RequestRecord {
                id: arrival.id,
                arrival: arrival.time,
                replica,
                config_k: p.choice.config.recomputed_layer_count(),
                quality: p.choice.quality,
                flagged: p.choice.flagged,
                ttft: p.first_token - arrival.time,
                tbt: a.tbt,
                e2e: t - arrival.time,
            });
        } else if next < arrivals.len() {
            t = arrivals[next].time;
        } else {
            return Ok(records);
        }
    }
}

/// Runs one workload to completion; requests finishing after `horizon` count
/// as in flight and are excluded from the aggregates.
pub fn simulate(
    workload: &WorkloadSpec,
    cluster: &ClusterSpec,
    policy: &SloPolicy,
    selection: Selection<'_>,
    horizon: Option<f64>,
) -> Result<RunMetrics> {
    workload.validate()?;
    cluster.validate()?;
    policy.validate()?;
    match selection {
        Selection::Fixed(config) => config.validate(cluster.n_layers)?,
        Selection::Profiled(frontier) => {
            frontier.validate()?;
            if frontier.n_layers() != cluster.n_layers {
                return Err(Error::DimensionMismatch {
                    expected: cluster.n_layers,
                    got: frontier.n_layers(),
                });
            }
        }
    }
    let arrivals = generate_workload(workload)?;
    let mut per_replica: Vec<Vec<Arrival>> = vec![Vec::new(); cluster.replicas];
    for a in &arrivals {
        per_replica[route(a.id, cluster.replicas)].push(*a);
    }
    let mut records = Vec::with_capacity(arrivals.len());
    for (replica, list) in per_replica.iter().enumerate() {
        records.extend(run_replica(list, replica, workload, cluster, policy, selection)?);
    }
    if let Some(h) = horizon {
        records.retain(|r| r.arrival + r.e2e <= h);
    }
    records.sort_by_key(|r| r.id);

    let ttfts: Vec<f64> = records.iter().map(|r| r.ttft).collect();
    let tbts: Vec<f64> = records.iter().flat_map(|r| r.tbt.iter().copied()).collect();
    let e2es: Vec<f64> = records.iter().map(|r| r.e2e).collect();
    Ok(RunMetrics {
        rate: workload.rate,
        generated: arrivals.len(),
        completed: records.len(),
        in_flight: arrivals.len() - records.len(),
        flagged: records.iter().filter(|r| r.flagged).count(),
        ttft: aggregate(&ttfts).ok(),
        tbt: aggregate(&tbts).ok(),
        e2e: aggregate(&e2es).ok(),
        violation_rate: violation_rate(&ttfts, policy.slo),
        records,
    })
}

/// One simulation per rate, run in parallel, returned in `rates` order.
pub fn sweep_rates(
    rates: &[f64],
    workload: &WorkloadSpec,
    cluster: &ClusterSpec,
    policy: &SloPolicy,
    selection: Selection<'_>,
) -> Result<Vec<RunMetrics>> {
    rates
        .par_iter()
        .map(|&rate| simulate(&workload.with_rate(rate), cluster, policy, selection, None))
        .collect()
}

/// Highest swept rate whose p90 TTFT meets the SLO.
pub fn sustained_throughput(runs: &[RunMetrics], slo: f64) -> Option<f64> {
    runs.iter()
        .filter(|r| r.ttft.is_some_and(|s| s.p90 <= slo))
        .map(|r| r.rate)
        .max_by(f64::total_cmp)
}

/// Largest rate up to which p90 TTFT stays within `factor` times its value at
/// the lowest swept rate. `runs` must be sorted by rate.
pub fn knee(runs: &[RunMetrics], factor: f64) -> Option<f64> {
    let base = runs.iter().find_map(|r| r.ttft)?.p90;
    let mut last = None;
    for r in runs {
        match r.ttft {
            Some(s) if s.p90 > factor * base => break,
            _ => last = Some(r.rate),
        }
    }
    last
}

pub const METRICS_HEADER: &str = "lambda,request_id,arrival,ttft,mean_tbt,e2e,config_k,replica";
const METRICS_VERSION_LINE: &str = "# kvbridge-metrics v1";

/// Per-request rows of every run.
pub fn metrics_csv(runs: &[RunMetrics]) -> String {
    let mut out = format!("{METRICS_VERSION_LINE}\n{METRICS_HEADER}\n");
    for run in runs {
        for r in &run.records {
            out += &format!(
                "{},{},{},{},{},{},{},{}\n",
                run.rate,
                r.id,
                r.arrival,
                r.ttft,
                r.mean_tbt(),
                r.e2e,
                r.config_k,
                r.replica
            );
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub lambda: f64,
    pub request_id: u64,
    pub arrival: f64,
    pub ttft: f64,
    pub mean_tbt: f64,
    pub e2e: f64,
    pub config_k: usize,
    pub replica: usize,
}

/// Reads `metrics_csv` output back; the version line and header are required.
pub fn parse_metrics_csv(text: &str, origin: &str) -> Result<Vec<MetricsRow>> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, METRICS_VERSION_LINE)) => {}
        Some((_, other)) if other.starts_with("# kvbridge-metrics") => {
            return Err(Error::parse(
                format!("{origin}:1"),
                format!("unsupported metrics version {other:?}"),
            ));
        }
        _ => {
            return Err(Error::parse(
                format!("{origin}:1"),
                "missing \"# kvbridge-metrics v1\" line",
            ))
        }
    }
    match lines.next() {
        Some((_, METRICS_HEADER)) => {}
        Some((i, other)) => {
            return Err(Error::parse(
                format!("{origin}:{}", i + 1),
                format!("expected header {METRICS_HEADER:?}, found {other:?}"),
            ))
        }
        None => return Err(Error::parse(format!("{origin}:2"), "missing header")),
    }
    let mut rows = Vec::new();
    for (i, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let at = format!("{origin}:{}", i + 1);
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 8 {
            return Err(Error::parse(at, format!("expected 8 fields, found {}", fields.len())));
        }
        let f = |j: usize| -> Result<f64> {
            fields[j]
                .parse()
                .map_err(|_| Error::parse(at.clone(), format!("field {} is not a number: {:?}", j + 1, fields[j])))
        };
        let u = |j: usize| -> Result<u64> {
            fields[j].parse().map_err(|_| {
                Error::parse(
                    at.clone(),
                    format!("field {} is not an integer: {:?}", j + 1, fields[j]),
                )
            })
        };
        rows.push(MetricsRow {
            lambda: f(0)?,
            request_id: u(1)?,
            arrival: f(2)?,
            ttft: f(3)?,
            mean_tbt: f(4)?,
            e2e: f(5)?,
            config_k: u(6)? as usize,
            replica: u(7)? as usize,
        });
    }
    Ok(rows)
}
