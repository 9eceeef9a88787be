//! Offline profiling of a sender/receiver pair.
//!
//! Every contiguous run of `g`-layer blocks is evaluated as a recompute
//! config on a training set; the resulting points are reduced to a
//! cumulative-max Pareto frontier keyed by recomputed-layer count, from which
//! a serving config is picked by quality floor or by layer budget.

use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{
    decode_mixed, full_prefill, partial_prefill, reference_decode, reuse_layers_prefill, Agreement, ModelWeights,
    PrefillOutput, RecomputeConfig, TokenSequence,
};
use crate::store::HASH_FN;

/// Relative quality drop tolerated by [`select_by_quality_floor`] by default.
pub const DEFAULT_FLOOR_DELTA: f64 = 0.05;
/// Slack for float comparisons against the floor.
pub const QUALITY_TOLERANCE: f64 = 1e-9;

const PROFILE_FORMAT: &str = "kvbridge-profile";
const PROFILE_VERSION: u32 = 1;
const FRONTIER_RULE: &str = "cumulative-max";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfilePoint {
    pub config: RecomputeConfig,
    pub k: usize,
    pub quality: f64,
}

impl ProfilePoint {
    fn start(&self) -> usize {
        self.config.groups().first().map_or(0, |g| g.start)
    }
}

/// All contiguous runs of whole `granularity`-sized blocks over `n_layers`.
/// The last block is shorter when `granularity` does not divide `n_layers`.
pub fn enumerate_groups(n_layers: usize, granularity: usize) -> Result<Vec<RecomputeConfig>> {
    if granularity == 0 || granularity > n_layers {
        return Err(Error::InvalidArgument(format!(
            "granularity {granularity} outside 1..={n_layers}"
        )));
    }
    let blocks = n_layers.div_ceil(granularity);
    let mut out = Vec::with_capacity(blocks * (blocks + 1) / 2);
    for first in 0..blocks {
        for last in first..blocks {
            let start = first * granularity;
            let end = ((last + 1) * granularity).min(n_layers) - 1;
            out.push(RecomputeConfig::single(start, end)?);
        }
    }
    Ok(out)
}

struct PreparedInput {
    tokens: TokenSequence,
    sender: PrefillOutput,
    reference: Vec<u32>,
}

/// A model pair with its training inputs pre-run: the sender's caches and
/// the receiver's own greedy output are computed once per input.
pub struct PairEvaluator<'a> {
    pub sender: &'a ModelWeights,
    pub receiver: &'a ModelWeights,
    pub horizon: usize,
    inputs: Vec<PreparedInput>,
}

impl<'a> PairEvaluator<'a> {
    pub fn new(
        sender: &'a ModelWeights,
        receiver: &'a ModelWeights,
        train_set: &[TokenSequence],
        horizon: usize,
    ) -> Result<Self> {
        if train_set.is_empty() {
            return Err(Error::InvalidArgument("training set is empty".into()));
        }
        if horizon == 0 {
            return Err(Error::InvalidArgument("agreement horizon must be at least 1".into()));
        }
        if sender.config.n_layers != receiver.config.n_layers
            || sender.config.kv_dim() != receiver.config.kv_dim()
            || sender.config.d_model != receiver.config.d_model
        {
            return Err(Error::ShapeMismatch("sender and receiver architectures differ".into()));
        }
        let inputs = train_set
            .par_iter()
            .map(|tokens| {
                Ok(PreparedInput {
                    tokens: tokens.clone(),
                    sender: full_prefill(sender, tokens)?,
                    reference: reference_decode(receiver, tokens, horizon)?.0,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(PairEvaluator {
            sender,
            receiver,
            horizon,
            inputs,
        })
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn n_layers(&self) -> usize {
        self.receiver.n_layers()
    }

    /// Agreement of `config` on training input `index`.
    pub fn agreement(&self, index: usize, config: &RecomputeConfig) -> Result<Agreement> {
        let input = &self.inputs[index];
        let mixed = partial_prefill(self.receiver, &input.tokens, config, &input.sender)?;
        let decoded = decode_mixed(self.receiver, mixed, self.horizon)?;
        Ok(Agreement::between(&input.reference, decoded.ids()))
    }

    /// Mean agreement of `config` over the training set.
    pub fn quality(&self, config: &RecomputeConfig) -> Result<f64> {
        let total = (0..self.inputs.len())
            .map(|i| self.agreement(i, config).map(|a| a.score))
            .sum::<Result<f64>>()?;
        Ok(total / self.inputs.len() as f64)
    }

    /// Per-layer quality drop when only that layer's KV comes from the sender
    /// and everything else is computed by the receiver.
    pub fn layer_sensitivity(&self) -> Result<Vec<f64>> {
        (0..self.n_layers())
            .map(|layer| {
                let mut total = 0.0;
                for input in &self.inputs {
                    let mixed = reuse_layers_prefill(self.receiver, &input.tokens, &input.sender, &[layer])?;
                    let decoded = decode_mixed(self.receiver, mixed, self.horizon)?;
                    total += Agreement::between(&input.reference, decoded.ids()).score;
                }
                Ok(1.0 - total / self.inputs.len() as f64)
            })
            .collect()
    }

    pub fn evaluate(&self, config: &RecomputeConfig) -> Result<ProfilePoint> {
        Ok(ProfilePoint {
            config: config.clone(),
            k: config.recomputed_layer_count(),
            quality: self.quality(config)?,
        })
    }
}

/// Mean agreement of one config over `train_set`.
pub fn evaluate_config(
    sender: &ModelWeights,
    receiver: &ModelWeights,
    config: &RecomputeConfig,
    train_set: &[TokenSequence],
    horizon: usize,
) -> Result<ProfilePoint> {
    PairEvaluator::new(sender, receiver, train_set, horizon)?.evaluate(config)
}

/// Evaluates every enumerated group; points come back sorted by (k, start).
pub fn sweep(evaluator: &PairEvaluator<'_>, granularity: usize) -> Result<Vec<ProfilePoint>> {
    let configs = enumerate_groups(evaluator.n_layers(), granularity)?;
    let mut points = configs
        .par_iter()
        .map(|c| evaluator.evaluate(c))
        .collect::<Result<Vec<_>>>()?;
    points.sort_by_key(|p| (p.k, p.start()));
    Ok(points)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrontierEntry {
    pub k: usize,
    pub quality: f64,
    pub config: RecomputeConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParetoFrontier {
    pub entries: Vec<FrontierEntry>,
    pub baseline_quality: f64,
    pub floor_delta: f64,
}

impl ParetoFrontier {
    pub fn n_layers(&self) -> usize {
        self.entries.last().map_or(0, |e| e.k)
    }

    /// Re-checks the structural invariants.
    pub fn validate(&self) -> Result<()> {
        let origin = "frontier";
        let last = self
            .entries
            .last()
            .ok_or_else(|| Error::parse(origin, "frontier has no entries"))?;
        for (i, e) in self.entries.iter().enumerate() {
            if e.k != e.config.recomputed_layer_count() {
                return Err(Error::parse(
                    origin,
                    format!(
                        "frontier[{i}].k = {} but its config recomputes {} layers",
                        e.k,
                        e.config.recomputed_layer_count()
                    ),
                ));
            }
            if !(0.0..=1.0).contains(&e.quality) {
                return Err(Error::parse(
                    origin,
                    format!("frontier[{i}].quality {} outside [0, 1]", e.quality),
                ));
            }
            if i > 0 {
                let prev = &self.entries[i - 1];
                if e.k <= prev.k {
                    return Err(Error::parse(
                        origin,
                        format!("frontier[{i}].k = {} does not increase over {}", e.k, prev.k),
                    ));
                }
                if e.quality < prev.quality {
                    return Err(Error::parse(
                        origin,
                        format!("frontier[{i}].quality {} decreases from {}", e.quality, prev.quality),
                    ));
                }
            }
        }
        if !last.config.is_recompute_all(last.k) {
            return Err(Error::parse(origin, "last frontier entry must recompute every layer"));
        }
        Ok(())
    }

    pub fn recompute_all(&self) -> &FrontierEntry {
        self.entries.last().expect("validated frontier is non-empty")
    }
}

/// Cumulative-max frontier. An entry is kept where the best quality seen so
/// far strictly improves; the recompute-all point always closes the frontier.
pub fn build_frontier(points: &[ProfilePoint]) -> Result<ParetoFrontier> {
    if points.is_empty() {
        return Err(Error::InvalidArgument("no profile points".into()));
    }
    let mut sorted: Vec<&ProfilePoint> = points.iter().collect();
    sorted.sort_by(|a, b| {
        a.k.cmp(&b.k)
            .then(b.quality.total_cmp(&a.quality))
            .then(a.start().cmp(&b.start()))
    });
    let n_layers = sorted.last().unwrap().k;
    let full = sorted
        .iter()
        .filter(|p| p.k == n_layers && p.config.is_recompute_all(n_layers))
        .max_by(|a, b| a.quality.total_cmp(&b.quality))
        .ok_or_else(|| Error::InvalidArgument("profile points do not include the recompute-all config".into()))?;
    let baseline_quality = full.quality;

    let mut entries: Vec<FrontierEntry> = Vec::new();
    let mut best = f64::NEG_INFINITY;
    for p in sorted.iter().filter(|p| p.k < n_layers) {
        if p.quality > best {
            best = p.quality;
            entries.push(FrontierEntry {
                k: p.k,
                quality: p.quality,
                config: p.config.clone(),
            });
        }
    }
    let closing = baseline_quality.max(best);
    entries.push(FrontierEntry {
        k: n_layers,
        quality: closing,
        config: full.config.clone(),
    });
    Ok(ParetoFrontier {
        entries,
        baseline_quality,
        floor_delta: DEFAULT_FLOOR_DELTA,
    })
}

/// Smallest-k config whose quality is within `delta` (relative) of the baseline.
pub fn select_by_quality_floor(frontier: &ParetoFrontier, delta: f64) -> RecomputeConfig {
    let floor = (1.0 - delta) * frontier.baseline_quality;
    frontier
        .entries
        .iter()
        .find(|e| e.quality + QUALITY_TOLERANCE >= floor)
        .unwrap_or_else(|| frontier.recompute_all())
        .config
        .clone()
}

/// Smallest-k config reaching an absolute quality target, or recompute-all.
pub fn select_by_quality_target(frontier: &ParetoFrontier, target: f64) -> &FrontierEntry {
    frontier
        .entries
        .iter()
        .find(|e| e.quality + QUALITY_TOLERANCE >= target)
        .unwrap_or_else(|| frontier.recompute_all())
}

/// Largest-k frontier config recomputing at most `budget` layers; full reuse if none.
pub fn select_by_layer_budget(frontier: &ParetoFrontier, budget: usize) -> RecomputeConfig {
    frontier
        .entries
        .iter()
        .rev()
        .find(|e| e.k <= budget)
        .map(|e| e.config.clone())
        .unwrap_or_default()
}

/// Identity and shape of the profiled pair.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairInfo {
    pub sender_id: String,
    pub receiver_id: String,
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_kv_heads: usize,
}

impl PairInfo {
    pub fn of(sender: &ModelWeights, receiver: &ModelWeights) -> Self {
        let c = &receiver.config;
        PairInfo {
            sender_id: sender.id().to_string(),
            receiver_id: receiver.id().to_string(),
            n_layers: c.n_layers,
            d_model: c.d_model,
            n_heads: c.n_heads,
            n_kv_heads: c.n_kv_heads,
        }
    }
}

/// Persisted profiling result.
#[derive(Debug, Clone, PartialEq)]
pub struct Profile {
    pub pair: PairInfo,
    pub granularity: usize,
    pub horizon: usize,
    pub hash_fn: String,
    pub points: Vec<ProfilePoint>,
    pub frontier: ParetoFrontier,
}

impl Profile {
    pub fn new(
        pair: PairInfo,
        granularity: usize,
        horizon: usize,
        points: Vec<ProfilePoint>,
        floor_delta: f64,
    ) -> Result<Self> {
        let mut frontier = build_frontier(&points)?;
        frontier.floor_delta = floor_delta;
        Ok(Profile {
            pair,
            granularity,
            horizon,
            hash_fn: HASH_FN.to_string(),
            points,
            frontier,
        })
    }

    /// Rejects a profile recorded for a different pair or layer count.
    pub fn check_compatible(&self, pair: &PairInfo) -> Result<()> {
        if self.pair != *pair {
            return Err(Error::InvalidArgument(format!(
                "profile was recorded for {} -> {} ({} layers), serving {} -> {} ({} layers)",
                self.pair.sender_id,
                self.pair.receiver_id,
                self.pair.n_layers,
                pair.sender_id,
                pair.receiver_id,
                pair.n_layers
            )));
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        let file = ProfileFile {
            format: PROFILE_FORMAT.to_string(),
            version: PROFILE_VERSION,
            pair: self.pair.clone(),
            granularity: self.granularity,
            horizon: self.horizon,
            hash_fn: self.hash_fn.clone(),
            frontier_rule: FRONTIER_RULE.to_string(),
            floor_delta: self.frontier.floor_delta,
            baseline_quality: self.frontier.baseline_quality,
            points: self
                .points
                .iter()
                .map(RangeRow::from_point)
                .collect::<Result<_>>()
                .expect("single-group points"),
            frontier: self
                .frontier
                .entries
                .iter()
                .map(RangeRow::from_entry)
                .collect::<Result<_>>()
                .expect("single-group frontier"),
        };
        serde_json::to_string_pretty(&file).expect("profile serializes") + "\n"
    }

    pub fn from_json(text: &str, origin: &str) -> Result<Self> {
        let file: ProfileFile = serde_json::from_str(text).map_err(|e| Error::parse(origin, e.to_string()))?;
        if file.format != PROFILE_FORMAT {
            return Err(Error::parse(
                origin,
                format!("format: expected {PROFILE_FORMAT:?}, got {:?}", file.format),
            ));
        }
        if file.version != PROFILE_VERSION {
            return Err(Error::parse(
                origin,
                format!("version: unsupported profile version {}", file.version),
            ));
        }
        if file.frontier_rule != FRONTIER_RULE {
            return Err(Error::parse(
                origin,
                format!("frontier_rule: unsupported {:?}", file.frontier_rule),
            ));
        }
        let l = file.pair.n_layers;
        let to_point = |field: &str, i: usize, r: &RangeRow| -> Result<ProfilePoint> {
            if r.a > r.b || r.b >= l {
                return Err(Error::parse(
                    origin,
                    format!("{field}[{i}]: range [{}, {}] invalid for {l} layers", r.a, r.b),
                ));
            }
            if r.k != r.b - r.a + 1 {
                return Err(Error::parse(
                    origin,
                    format!("{field}[{i}].k = {} does not match range [{}, {}]", r.k, r.a, r.b),
                ));
            }
            Ok(ProfilePoint {
                config: RecomputeConfig::single(r.a, r.b)?,
                k: r.k,
                quality: r.quality,
            })
        };
        let points = file
            .points
            .iter()
            .enumerate()
            .map(|(i, r)| to_point("points", i, r))
            .collect::<Result<Vec<_>>>()?;
        let entries = file
            .frontier
            .iter()
            .enumerate()
            .map(|(i, r)| {
                to_point("frontier", i, r).map(|p| FrontierEntry {
                    k: p.k,
                    quality: p.quality,
                    config: p.config,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let frontier = ParetoFrontier {
            entries,
            baseline_quality: file.baseline_quality,
            floor_delta: file.floor_delta,
        };
        frontier.validate().map_err(|e| match e {
            Error::Parse { message, .. } => Error::parse(origin, message),
            other => other,
        })?;
        if frontier.n_layers() != l {
            return Err(Error::parse(
                origin,
                format!("frontier ends at k = {} but pair has {l} layers", frontier.n_layers()),
            ));
        }
        Ok(Profile {
            pair: file.pair,
            granularity: file.granularity,
            horizon: file.horizon,
            hash_fn: file.hash_fn,
            points,
            frontier,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        Self::from_json(&text, &path.display().to_string())
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ProfileFile {
    format: String,
    version: u32,
    pair: PairInfo,
    granularity: usize,
    horizon: usize,
    hash_fn: String,
    frontier_rule: String,
    floor_delta: f64,
    baseline_quality: f64,
    points: Vec<RangeRow>,
    frontier: Vec<RangeRow>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RangeRow {
    a: usize,
    b: usize,
    k: usize,
    quality: f64,
}

impl RangeRow {
    fn new(config: &RecomputeConfig, k: usize, quality: f64) -> Result<Self> {
        match config.groups() {
            [g] => Ok(RangeRow {
                a: g.start,
                b: g.end,
                k,
                quality,
            }),
            _ => Err(Error::InvalidRecomputeConfig(format!(
                "{config} is not a single contiguous group"
            ))),
        }
    }

    fn from_point(p: &ProfilePoint) -> Result<Self> {
        Self::new(&p.config, p.k, p.quality)
    }

    fn from_entry(e: &FrontierEntry) -> Result<Self> {
        Self::new(&e.config, e.k, e.quality)
    }
}

/// Plain `a,b,k,quality` rows for plotting the sweep.
pub fn points_csv(points: &[ProfilePoint]) -> String {
    let mut out = String::from("a,b,k,quality\n");
    for p in points {
        let g = p.config.groups()[0];
        out += &format!("{},{},{},{}\n", g.start, g.end, p.k, p.quality);
    }
    out
}
