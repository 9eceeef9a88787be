use std::fs;
use std::path::Path;

use anyhow::{Context, Result};
use kvbridge::model::RecomputeConfig;
use kvbridge::profiler::{PairInfo, Profile};
use kvbridge::sim::{
    knee, metrics_csv, sustained_throughput, sweep_rates, ClusterSpec, RunMetrics, Selection, SloPolicy, WorkloadSpec,
};
use serde::Serialize;

use crate::config::{RunConfig, SelectionMode};

/// p90 TTFT growth over its low-load value that marks the knee.
const KNEE_FACTOR: f64 = 2.0;

#[derive(Serialize)]
struct SummaryFile<'a> {
    format: &'static str,
    version: u32,
    pair: &'a PairInfo,
    selection: &'static str,
    adapt: bool,
    slo: f64,
    q_min: f64,
    knee_factor: f64,
    knee: Option<f64>,
    sustained_throughput: Option<f64>,
    runs: &'a [RunMetrics],
}

pub fn run(config: &RunConfig, out: &Path) -> Result<()> {
    let (sender, receiver) = config.build_pair()?;
    let pair = PairInfo::of(&sender, &receiver);
    let s = &config.serve;
    let profile_path = match &s.profile {
        Some(p) => config.resolve(p),
        None => out.join("profile.json"),
    };
    let profile = Profile::load(&profile_path).with_context(|| {
        format!(
            "loading profile {} (run `kvbridge profile` first)",
            profile_path.display()
        )
    })?;
    profile
        .check_compatible(&pair)
        .with_context(|| format!("profile {} does not match the configured pair", profile_path.display()))?;

    let n_layers = config.model.n_layers;
    let workload = WorkloadSpec {
        rate: s.rates[0],
        duration: s.duration,
        context_len: s.context_len,
        output_len: s.output_len,
        seed: config.seed,
        pair_id: format!("{}->{}", pair.sender_id, pair.receiver_id),
    };
    let cluster = ClusterSpec {
        replicas: s.replicas,
        decode_cost: s.decode_cost,
        cost: s.cost.to_cost_model(),
        n_layers,
        model: pair.receiver_id.clone(),
    };
    let policy = SloPolicy {
        slo: s.slo,
        q_min: s.q_min,
        adapt: s.adapt,
    };
    let full = RecomputeConfig::recompute_all(n_layers);
    let (selection, label) = match s.selection {
        SelectionMode::Profile => (Selection::Profiled(&profile.frontier), "profile"),
        SelectionMode::Full => (Selection::Fixed(&full), "full"),
    };
    let runs = sweep_rates(&s.rates, &workload, &cluster, &policy, selection)?;

    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let csv_path = out.join("metrics.csv");
    fs::write(&csv_path, metrics_csv(&runs)).with_context(|| format!("writing {}", csv_path.display()))?;
    let summary = SummaryFile {
        format: "kvbridge-serve-summary",
        version: 1,
        pair: &pair,
        selection: label,
        adapt: s.adapt,
        slo: s.slo,
        q_min: s.q_min,
        knee_factor: KNEE_FACTOR,
        knee: knee(&runs, KNEE_FACTOR),
        sustained_throughput: sustained_throughput(&runs, s.slo),
        runs: &runs,
    };
    let json_path = out.join("summary.json");
    fs::write(&json_path, serde_json::to_string_pretty(&summary)? + "\n")
        .with_context(|| format!("writing {}", json_path.display()))?;

    println!(
        "{:>8} {:>6} {:>10} {:>10} {:>10} {:>9} {:>7}",
        "lambda", "done", "ttft_p50", "ttft_p90", "e2e_p90", "slo_viol", "flagged"
    );
    for r in &runs {
        let (p50, p90) = r.ttft.map_or((f64::NAN, f64::NAN), |t| (t.median, t.p90));
        let e2e = r.e2e.map_or(f64::NAN, |e| e.p90);
        println!(
            "{:>8} {:>6} {:>10.3} {:>10.3} {:>10.3} {:>9.3} {:>7}",
            r.rate, r.completed, p50, p90, e2e, r.violation_rate, r.flagged
        );
    }
    println!(
        "knee: {}  sustained throughput: {}",
        fmt_rate(summary.knee),
        fmt_rate(summary.sustained_throughput)
    );
    println!("wrote {} and {}", csv_path.display(), json_path.display());
    Ok(())
}

fn fmt_rate(rate: Option<f64>) -> String {
    rate.map_or_else(|| "none".to_string(), |r| r.to_string())
}
