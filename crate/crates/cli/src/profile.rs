use std::fs;
use std::path::Path;

use anyhow::{Context, Result};
use kvbridge::profiler::{points_csv, select_by_quality_floor, sweep, PairEvaluator, PairInfo, Profile};

use crate::config::RunConfig;

pub fn run(config: &RunConfig, out: &Path) -> Result<()> {
    let (sender, receiver) = config.build_pair()?;
    let inputs = config.load_dataset()?;
    let p = &config.profile;
    let evaluator = PairEvaluator::new(&sender, &receiver, &inputs, p.horizon)?;
    let points = sweep(&evaluator, p.granularity)?;
    let profile = Profile::new(
        PairInfo::of(&sender, &receiver),
        p.granularity,
        p.horizon,
        points,
        p.floor_delta,
    )?;

    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let artifact = out.join("profile.json");
    profile
        .save(&artifact)
        .with_context(|| format!("writing {}", artifact.display()))?;
    let csv = out.join("points.csv");
    fs::write(&csv, points_csv(&profile.points)).with_context(|| format!("writing {}", csv.display()))?;

    println!(
        "profiled {} configs: {} -> {}, {} layers, g={}, {} inputs",
        profile.points.len(),
        profile.pair.sender_id,
        profile.pair.receiver_id,
        profile.pair.n_layers,
        p.granularity,
        inputs.len()
    );
    println!("frontier (k, quality, groups):");
    for e in &profile.frontier.entries {
        println!("  {:>3}  {:.4}  {}", e.k, e.quality, e.config);
    }
    let chosen = select_by_quality_floor(&profile.frontier, p.floor_delta);
    println!(
        "quality floor {:.0}%: {} ({} layers recomputed)",
        100.0 * p.floor_delta,
        chosen,
        chosen.recomputed_layer_count()
    );
    println!("wrote {} and {}", artifact.display(), csv.display());
    Ok(())
}
