//! Re-aggregates a metrics CSV per arrival rate and writes gnuplot data files.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use kvbridge::sim::{aggregate, parse_metrics_csv, MetricsRow, Summary};

pub struct RateSummary {
    pub lambda: f64,
    pub ttft: Summary,
    pub mean_tbt: Summary,
    pub e2e: Summary,
}

/// Per-rate summaries in ascending rate order.
pub fn summarize(rows: &[MetricsRow]) -> Result<Vec<RateSummary>> {
    let mut by_rate: BTreeMap<u64, Vec<&MetricsRow>> = BTreeMap::new();
    for r in rows {
        // rates are positive, so the bit pattern orders like the value
        by_rate.entry(r.lambda.to_bits()).or_default().push(r);
    }
    by_rate
        .into_iter()
        .map(|(bits, rows)| {
            let column = |f: fn(&MetricsRow) -> f64| rows.iter().map(|r| f(r)).collect::<Vec<_>>();
            Ok(RateSummary {
                lambda: f64::from_bits(bits),
                ttft: aggregate(&column(|r| r.ttft))?,
                mean_tbt: aggregate(&column(|r| r.mean_tbt))?,
                e2e: aggregate(&column(|r| r.e2e))?,
            })
        })
        .collect()
}

type Column = fn(&RateSummary) -> &Summary;

fn data_file(title: &str, summaries: &[RateSummary], pick: Column) -> String {
    let mut out = format!("# kvbridge-report v1 {title}\n# lambda count mean median p90\n");
    for s in summaries {
        let m = pick(s);
        writeln!(out, "{} {} {} {} {}", s.lambda, m.count, m.mean, m.median, m.p90).unwrap();
    }
    out
}

pub fn run(input: &Path, out: &Path) -> Result<()> {
    let text = fs::read_to_string(input).with_context(|| format!("reading {}", input.display()))?;
    let rows = parse_metrics_csv(&text, &input.display().to_string())?;
    if rows.is_empty() {
        bail!("no data: {} contains no request rows", input.display());
    }
    let summaries = summarize(&rows)?;

    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let files: [(&str, Column); 3] = [("ttft", |s| &s.ttft), ("tbt", |s| &s.mean_tbt), ("e2e", |s| &s.e2e)];
    for (name, pick) in files {
        let path = out.join(format!("{name}.dat"));
        fs::write(&path, data_file(name, &summaries, pick)).with_context(|| format!("writing {}", path.display()))?;
    }

    println!("{} requests over {} arrival rates", rows.len(), summaries.len());
    println!(
        "{:>8} {:>6} {:>10} {:>10} {:>10} {:>10} {:>10}",
        "lambda", "count", "ttft_mean", "ttft_p50", "ttft_p90", "tbt_mean", "e2e_p90"
    );
    for s in &summaries {
        println!(
            "{:>8} {:>6} {:>10.4} {:>10.4} {:>10.4} {:>10.4} {:>10.4}",
            s.lambda, s.ttft.count, s.ttft.mean, s.ttft.median, s.ttft.p90, s.mean_tbt.mean, s.e2e.p90
        );
    }
    println!("wrote ttft.dat, tbt.dat, e2e.dat to {}", out.display());
    Ok(())
}
