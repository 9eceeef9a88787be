//! Timelines for loading sender caches and recomputing layers.
//!
//! Three strategies are planned over one shared link and one compute
//! resource per receiver model:
//!
//! - `naive`: requests run one at a time; each transfers its E caches, then
//!   every KV layer, then recomputes.
//! - `reuse-only`: as `naive`, but only the reused layers' KV is transferred.
//! - `pipelined`: the link is a FIFO of per-layer jobs shared by all
//!   requests; a group's recompute starts as soon as its E cache has arrived
//!   while reused KV keeps streaming in.

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{CacheKind, Error, Result};
use crate::model::{ModelConfig, RecomputeConfig};

/// Bytes of one layer's cache of `kind` over `positions` positions.
pub fn bytes_of(kind: CacheKind, positions: usize, config: &ModelConfig) -> usize {
    match kind {
        CacheKind::Kv => 2 * config.n_kv_heads * config.head_dim * 4 * positions,
        CacheKind::E => config.d_model * 4 * positions,
    }
}

/// Per-layer transfer and compute costs.
///
/// Transfer time is `bytes / link_bandwidth`. In unit mode every transfer and
/// every layer recompute costs exactly 1 and the anchor pass is free.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostModel {
    pub link_bandwidth: f64,
    pub kv_layer_bytes: f64,
    pub e_layer_bytes: f64,
    /// Time to recompute one layer over the reuse window.
    pub layer_compute_time: f64,
    /// Time for the last input position to pass one layer.
    pub anchor_layer_time: f64,
    pub unit_mode: bool,
}

impl CostModel {
    pub fn unit() -> Self {
        CostModel {
            link_bandwidth: 1.0,
            kv_layer_bytes: 1.0,
            e_layer_bytes: 1.0,
            layer_compute_time: 1.0,
            anchor_layer_time: 0.0,
            unit_mode: true,
        }
    }

    /// Constant per-layer times; bandwidth is normalized to 1 so byte counts equal times.
    pub fn per_layer(kv_time: f64, e_time: f64, compute_time: f64, anchor_layer_time: f64) -> Self {
        CostModel {
            link_bandwidth: 1.0,
            kv_layer_bytes: kv_time,
            e_layer_bytes: e_time,
            layer_compute_time: compute_time,
            anchor_layer_time,
            unit_mode: false,
        }
    }

    /// Costs derived from a model shape and a reuse window of `positions` tokens.
    pub fn from_model(config: &ModelConfig, positions: usize, link_bandwidth: f64, compute_per_position: f64) -> Self {
        CostModel {
            link_bandwidth,
            kv_layer_bytes: bytes_of(CacheKind::Kv, positions, config) as f64,
            e_layer_bytes: bytes_of(CacheKind::E, positions, config) as f64,
            layer_compute_time: compute_per_position * positions as f64,
            anchor_layer_time: compute_per_position,
            unit_mode: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("link_bandwidth", self.link_bandwidth),
            ("kv_layer_bytes", self.kv_layer_bytes),
            ("e_layer_bytes", self.e_layer_bytes),
            ("layer_compute_time", self.layer_compute_time),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::InvalidArgument(format!(
                    "cost model {name} must be positive, got {v}"
                )));
            }
        }
        if !(self.anchor_layer_time.is_finite() && self.anchor_layer_time >= 0.0) {
            return Err(Error::InvalidArgument("anchor_layer_time must be non-negative".into()));
        }
        if self.unit_mode && *self != CostModel::unit() {
            return Err(Error::InvalidArgument("unit mode requires all unit costs".into()));
        }
        Ok(())
    }

    pub fn kv_transfer_time(&self) -> f64 {
        self.kv_layer_bytes / self.link_bandwidth
    }

    pub fn e_transfer_time(&self) -> f64 {
        self.e_layer_bytes / self.link_bandwidth
    }

    pub fn anchor_time(&self, n_layers: usize) -> f64 {
        self.anchor_layer_time * n_layers as f64
    }
}

/// One prefill to plan.
#[derive(Debug, Clone, PartialEq)]
pub struct ScheduledRequest {
    pub id: u64,
    pub arrival: f64,
    pub model: String,
    pub config: RecomputeConfig,
    pub n_layers: usize,
}

impl ScheduledRequest {
    pub fn reused_layers(&self) -> Vec<usize> {
        self.config.reused_layers(self.n_layers)
    }

    fn validate(&self) -> Result<()> {
        if !(self.arrival.is_finite() && self.arrival >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "request {} has arrival {}",
                self.id, self.arrival
            )));
        }
        if self.n_layers == 0 {
            return Err(Error::InvalidArgument(format!("request {} has no layers", self.id)));
        }
        self.config.validate(self.n_layers)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Strategy {
    Naive,
    ReuseOnly,
    Pipelined,
}

impl Strategy {
    pub const ALL: [Strategy; 3] = [Strategy::Naive, Strategy::ReuseOnly, Strategy::Pipelined];
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "naive" => Ok(Strategy::Naive),
            "reuse-only" | "reuse_only" => Ok(Strategy::ReuseOnly),
            "pipelined" => Ok(Strategy::Pipelined),
            other => Err(Error::InvalidArgument(format!(
                "unknown strategy {other:?} (expected naive, reuse-only or pipelined)"
            ))),
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Strategy::Naive => "naive",
            Strategy::ReuseOnly => "reuse-only",
            Strategy::Pipelined => "pipelined",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Resource {
    Link,
    Compute(String),
}

impl fmt::Display for Resource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Resource::Link => f.write_str("link"),
            Resource::Compute(model) => write!(f, "compute({model})"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EventLabel {
    ETransfer(usize),
    KvTransfer(usize),
    Recompute(usize),
    /// Last input position through every layer.
    Anchor,
}

impl EventLabel {
    pub fn is_transfer(&self) -> bool {
        matches!(self, EventLabel::ETransfer(_) | EventLabel::KvTransfer(_))
    }
}

impl fmt::Display for EventLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EventLabel::ETransfer(l) => write!(f, "E-transfer({l})"),
            EventLabel::KvTransfer(l) => write!(f, "KV-transfer({l})"),
            EventLabel::Recompute(l) => write!(f, "recompute({l})"),
            EventLabel::Anchor => f.write_str("anchor"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Event {
    pub request: u64,
    pub resource: Resource,
    pub label: EventLabel,
    pub start: f64,
    pub end: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RequestTiming {
    pub id: u64,
    pub arrival: f64,
    pub ready: f64,
}

impl RequestTiming {
    pub fn ttft(&self) -> f64 {
        self.ready - self.arrival
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Timeline {
    pub events: Vec<Event>,
    pub requests: Vec<RequestTiming>,
}

impl Timeline {
    pub fn total_ttft(&self) -> f64 {
        self.requests.iter().map(RequestTiming::ttft).sum()
    }

    pub fn ttft_of(&self, id: u64) -> Option<f64> {
        self.requests.iter().find(|r| r.id == id).map(RequestTiming::ttft)
    }

    pub fn events_on<'a>(&'a self, resource: &'a Resource) -> impl Iterator<Item = &'a Event> + 'a {
        self.events.iter().filter(move |e| &e.resource == resource)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("# kvbridge-timeline v1\nrequest,resource,label,start,end\n");
        for e in &self.events {
            out += &format!("{},{},{},{},{}\n", e.request, e.resource, e.label, e.start, e.end);
        }
        out
    }
}

struct Builder<'a> {
    cost: &'a CostModel,
    events: Vec<Event>,
}

impl Builder<'_> {
    fn push(&mut self, request: u64, resource: Resource, label: EventLabel, start: f64, duration: f64) -> f64 {
        let end = start + duration;
        self.events.push(Event {
            request,
            resource,
            label,
            start,
            end,
        });
        end
    }

    /// One request with no overlap between its phases, starting at `t`.
    fn serial(&mut self, r: &ScheduledRequest, mut t: f64, transfer_all: bool) -> f64 {
        let cost = self.cost;
        for layer in r.config.transition_layers() {
            t = self.push(
                r.id,
                Resource::Link,
                EventLabel::ETransfer(layer),
                t,
                cost.e_transfer_time(),
            );
        }
        let kv_layers: Vec<usize> = if transfer_all {
            (0..r.n_layers).collect()
        } else {
            r.reused_layers()
        };
        for layer in kv_layers {
            t = self.push(
                r.id,
                Resource::Link,
                EventLabel::KvTransfer(layer),
                t,
                cost.kv_transfer_time(),
            );
        }
        let compute = Resource::Compute(r.model.clone());
        for group in r.config.groups() {
            for layer in group.start..=group.end {
                t = self.push(
                    r.id,
                    compute.clone(),
                    EventLabel::Recompute(layer),
                    t,
                    cost.layer_compute_time,
                );
            }
        }
        self.push(r.id, compute, EventLabel::Anchor, t, cost.anchor_time(r.n_layers))
    }
}

/// Plans `requests` (sorted by arrival) under `strategy`.
pub fn plan(strategy: Strategy, requests: &[ScheduledRequest], cost: &CostModel) -> Result<Timeline> {
    cost.validate()?;
    for r in requests {
        r.validate()?;
    }
    if requests.windows(2).any(|w| w[1].arrival < w[0].arrival) {
        return Err(Error::InvalidArgument("requests must be sorted by arrival".into()));
    }
    let mut b = Builder {
        cost,
        events: Vec::new(),
    };
    let mut timings = Vec::with_capacity(requests.len());
    match strategy {
        Strategy::Naive | Strategy::ReuseOnly => {
            let mut free = 0.0f64;
            for r in requests {
                let ready = b.serial(r, free.max(r.arrival), strategy == Strategy::Naive);
                free = ready;
                timings.push(RequestTiming {
                    id: r.id,
                    arrival: r.arrival,
                    ready,
                });
            }
        }
        Strategy::Pipelined => {
            let mut link_free = 0.0f64;
            let mut compute_free: HashMap<&str, f64> = HashMap::new();
            for r in requests {
                // E transfers go first: recompute is blocked on them.
                let mut e_ready: HashMap<usize, f64> = HashMap::new();
                let mut transfers_done = r.arrival;
                for layer in r.config.transition_layers() {
                    let start = link_free.max(r.arrival);
                    link_free = b.push(
                        r.id,
                        Resource::Link,
                        EventLabel::ETransfer(layer),
                        start,
                        cost.e_transfer_time(),
                    );
                    e_ready.insert(layer, link_free);
                    transfers_done = link_free;
                }
                for layer in r.reused_layers() {
                    let start = link_free.max(r.arrival);
                    link_free = b.push(
                        r.id,
                        Resource::Link,
                        EventLabel::KvTransfer(layer),
                        start,
                        cost.kv_transfer_time(),
                    );
                    transfers_done = link_free;
                }
                let compute = Resource::Compute(r.model.clone());
                let mut t = compute_free
                    .get(r.model.as_str())
                    .copied()
                    .unwrap_or(0.0)
                    .max(r.arrival);
                for group in r.config.groups() {
                    if let Some(&arrived) = e_ready.get(&group.start) {
                        t = t.max(arrived);
                    }
                    for layer in group.start..=group.end {
                        t = b.push(
                            r.id,
                            compute.clone(),
                            EventLabel::Recompute(layer),
                            t,
                            cost.layer_compute_time,
                        );
                    }
                }
                let ready = b.push(
                    r.id,
                    compute,
                    EventLabel::Anchor,
                    t.max(transfers_done),
                    cost.anchor_time(r.n_layers),
                );
                compute_free.insert(r.model.as_str(), ready);
                timings.push(RequestTiming {
                    id: r.id,
                    arrival: r.arrival,
                    ready,
                });
            }
        }
    }
    Ok(Timeline {
        events: b.events,
        requests: timings,
    })
}

/// TTFT of `request` alone on an idle link and compute resource.
pub fn estimate_ttft(request: &ScheduledRequest, cost: &CostModel) -> Result<f64> {
    let timeline = plan(Strategy::Pipelined, std::slice::from_ref(request), cost)?;
    Ok(timeline.requests[0].ttft())
}

/// Scenario file: a cost model plus requests to plan.
#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub cost: CostModel,
    pub requests: Vec<ScheduledRequest>,
}

const SCENARIO_VERSION: u32 = 1;

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ScenarioFile {
    version: u32,
    cost: CostSpec,
    #[serde(default)]
    requests: Vec<RequestSpec>,
}

/// `[cost]` table of scenario and run-configuration files.
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(tag = "mode", rename_all = "kebab-case", deny_unknown_fields)]
pub enum CostSpec {
    Unit,
    PerLayer {
        kv_time: f64,
        e_time: f64,
        compute_time: f64,
        #[serde(default)]
        anchor_layer_time: f64,
    },
    Bytes {
        bandwidth: f64,
        positions: usize,
        compute_per_position: f64,
        d_model: usize,
        n_kv_heads: usize,
        head_dim: usize,
    },
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RequestSpec {
    id: u64,
    arrival: f64,
    model: String,
    layers: usize,
    #[serde(default)]
    groups: Vec<(usize, usize)>,
}

impl CostSpec {
    pub fn to_cost_model(&self) -> CostModel {
        match *self {
            CostSpec::Unit => CostModel::unit(),
            CostSpec::PerLayer {
                kv_time,
                e_time,
                compute_time,
                anchor_layer_time,
            } => CostModel::per_layer(kv_time, e_time, compute_time, anchor_layer_time),
            CostSpec::Bytes {
                bandwidth,
                positions,
                compute_per_position,
                d_model,
                n_kv_heads,
                head_dim,
            } => {
                let shape = ModelConfig {
                    d_model,
                    n_kv_heads,
                    head_dim,
                    ..ModelConfig::default()
                };
                CostModel::from_model(&shape, positions, bandwidth, compute_per_position)
            }
        }
    }
}

impl Scenario {
    pub fn parse(text: &str, origin: &str) -> Result<Self> {
        let file: ScenarioFile = toml::from_str(text).map_err(|e| Error::parse(origin, e.to_string()))?;
        if file.version != SCENARIO_VERSION {
            return Err(Error::parse(
                origin,
                format!("version: unsupported scenario version {}", file.version),
            ));
        }
        let cost = file.cost.to_cost_model();
        cost.validate()
            .map_err(|e| Error::parse(origin, format!("cost: {e}")))?;
        let mut requests = Vec::with_capacity(file.requests.len());
        for (i, r) in file.requests.into_iter().enumerate() {
            let config = RecomputeConfig::from_ranges(r.groups)
                .map_err(|e| Error::parse(origin, format!("requests[{i}].groups: {e}")))?;
            let request = ScheduledRequest {
                id: r.id,
                arrival: r.arrival,
                model: r.model,
                config,
                n_layers: r.layers,
            };
            request
                .validate()
                .map_err(|e| Error::parse(origin, format!("requests[{i}]: {e}")))?;
            requests.push(request);
        }
        requests.sort_by(|a, b| a.arrival.total_cmp(&b.arrival).then(a.id.cmp(&b.id)));
        Ok(Scenario { cost, requests })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        Self::parse(&text, &path.display().to_string())
    }

    /// Two 10-layer receivers under unit costs: model A recomputes layers 3..=9
    /// from t=0, model B recomputes 0..=2 from t=2.
    pub fn two_model_example() -> Self {
        Self::parse(TWO_MODEL_EXAMPLE, "two_models_unit.toml").expect("bundled scenario parses")
    }
}

pub const TWO_MODEL_EXAMPLE: &str = include_str!("../scenarios/two_models_unit.toml");

#[cfg(test)]
mod tests {
    use super::*;

    fn req(id: u64, arrival: f64, model: &str, layers: usize, groups: &[(usize, usize)]) -> ScheduledRequest {
        ScheduledRequest {
            id,
            arrival,
            model: model.into(),
            config: RecomputeConfig::from_ranges(groups.iter().copied()).unwrap(),
            n_layers: layers,
        }
    }

    #[test]
    fn byte_formulas() {
        let c = ModelConfig {
            n_kv_heads: 1,
            head_dim: 16,
            d_model: 64,
            ..ModelConfig::default()
        };
        assert_eq!(bytes_of(CacheKind::Kv, 100, &c), 12800);
        assert_eq!(bytes_of(CacheKind::E, 100, &c), 25600);
        let mha = ModelConfig { n_kv_heads: 4, ..c };
        let ratio = bytes_of(CacheKind::E, 7, &mha) as f64 / bytes_of(CacheKind::Kv, 7, &mha) as f64;
        assert_eq!(ratio, 0.5);
    }

    #[test]
    fn two_model_example_totals() {
        let s = Scenario::two_model_example();
        let naive = plan(Strategy::Naive, &s.requests, &s.cost).unwrap();
        assert_eq!(naive.ttft_of(0), Some(18.0));
        assert_eq!(naive.requests[1].ready, 31.0);
        assert_eq!(naive.total_ttft(), 47.0);
        let reuse = plan(Strategy::ReuseOnly, &s.requests, &s.cost).unwrap();
        assert_eq!(reuse.ttft_of(0), Some(11.0));
        assert_eq!(reuse.requests[1].ready, 21.0);
        assert_eq!(reuse.total_ttft(), 30.0);
        let piped = plan(Strategy::Pipelined, &s.requests, &s.cost).unwrap();
        assert_eq!(piped.ttft_of(0), Some(8.0));
        assert_eq!(piped.ttft_of(1), Some(9.0));
        assert_eq!(piped.total_ttft(), 17.0);
    }

    #[test]
    fn pipelined_event_times() {
        let s = Scenario::two_model_example();
        let t = plan(Strategy::Pipelined, &s.requests, &s.cost).unwrap();
        let find = |request: u64, label: EventLabel| {
            t.events
                .iter()
                .find(|e| e.request == request && e.label == label)
                .map(|e| (e.start, e.end))
                .unwrap()
        };
        assert_eq!(find(0, EventLabel::ETransfer(3)), (0.0, 1.0));
        assert_eq!(find(0, EventLabel::Recompute(3)), (1.0, 2.0));
        assert_eq!(find(0, EventLabel::Recompute(9)), (7.0, 8.0));
        assert_eq!(find(0, EventLabel::KvTransfer(0)), (1.0, 2.0));
        assert_eq!(find(0, EventLabel::KvTransfer(2)), (3.0, 4.0));
        assert_eq!(find(1, EventLabel::Recompute(0)), (2.0, 3.0));
        assert_eq!(find(1, EventLabel::Recompute(2)), (4.0, 5.0));
        assert_eq!(find(1, EventLabel::KvTransfer(3)), (4.0, 5.0));
        assert_eq!(find(1, EventLabel::KvTransfer(9)), (10.0, 11.0));
        assert!(t.events.iter().all(|e| e.label != EventLabel::ETransfer(0)));
    }

    #[test]
    fn estimate_cases() {
        let cost = CostModel::unit();
        let a = req(0, 0.0, "A", 10, &[(3, 9)]);
        assert_eq!(estimate_ttft(&a, &cost).unwrap(), 8.0);
        let reuse_all = req(0, 5.0, "A", 10, &[]);
        assert_eq!(estimate_ttft(&reuse_all, &cost).unwrap(), 10.0);
        let full = req(0, 0.0, "A", 10, &[(0, 9)]);
        let t = plan(Strategy::Pipelined, std::slice::from_ref(&full), &cost).unwrap();
        assert_eq!(t.total_ttft(), 10.0);
        assert!(t.events.iter().all(|e| !e.label.is_transfer()));
    }

    #[test]
    fn anchor_is_zero_width_in_unit_mode() {
        let s = Scenario::two_model_example();
        let t = plan(Strategy::Pipelined, &s.requests, &s.cost).unwrap();
        for e in &t.events {
            if e.label == EventLabel::Anchor {
                assert_eq!(e.start, e.end);
            } else {
                assert!(e.end > e.start);
            }
        }
    }

    #[test]
    fn rejects_invalid_requests() {
        let cost = CostModel::unit();
        assert!(plan(Strategy::Naive, &[req(0, 0.0, "A", 4, &[(2, 5)])], &cost).is_err());
        let unsorted = [req(0, 3.0, "A", 4, &[]), req(1, 1.0, "A", 4, &[])];
        assert!(plan(Strategy::Pipelined, &unsorted, &cost).is_err());
        assert!("fast".parse::<Strategy>().is_err());
        assert_eq!("reuse-only".parse::<Strategy>().unwrap(), Strategy::ReuseOnly);
        let bad = CostModel {
            link_bandwidth: 0.0,
            ..CostModel::unit()
        };
        assert!(plan(Strategy::Naive, &[], &bad).is_err());
    }

    #[test]
    fn csv_output() {
        let s = Scenario::two_model_example();
        let csv = plan(Strategy::Naive, &s.requests, &s.cost).unwrap().to_csv();
        let mut lines = csv.lines();
        assert_eq!(lines.next(), Some("# kvbridge-timeline v1"));
        assert_eq!(lines.next(), Some("request,resource,label,start,end"));
        assert_eq!(lines.next(), Some("0,link,E-transfer(3),0,1"));
    }

    #[test]
    fn scenario_parse_errors_have_locations() {
        let err = Scenario::parse("version = 1\n[cost]\nmode = \"warp\"\n", "s.toml").unwrap_err();
        assert!(err.to_string().starts_with("s.toml"), "{err}");
        assert!(
            err.to_string().contains("line 2") || err.to_string().contains("line 3"),
            "{err}"
        );
        let err = Scenario::parse("version = 9\n[cost]\nmode = \"unit\"\n", "s.toml").unwrap_err();
        assert!(err.to_string().contains("version"));
        let text = "version = 1\n[cost]\nmode = \"unit\"\n[[requests]]\nid = 0\narrival = 0\nmodel = \"A\"\nlayers = 4\ngroups = [[3, 4]]\n";
        let err = Scenario::parse(text, "s.toml").unwrap_err();
        assert!(err.to_string().contains("requests[0]"), "{err}");
    }

    #[test]
    fn bytes_mode_scenario() {
        let text = "version = 1\n[cost]\nmode = \"bytes\"\nbandwidth = 1000.0\npositions = 100\ncompute_per_position = 0.5\nd_model = 64\nn_kv_heads = 1\nhead_dim = 16\n";
        let s = Scenario::parse(text, "b.toml").unwrap();
        assert_eq!(s.cost.kv_transfer_time(), 12.8);
        assert_eq!(s.cost.e_transfer_time(), 25.6);
        assert_eq!(s.cost.layer_compute_time, 50.0);
        assert_eq!(s.cost.anchor_time(10), 5.0);
    }
}
