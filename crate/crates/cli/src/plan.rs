use std::fs;
use std::path::Path;

use anyhow::{Context, Result};
use kvbridge::sched::{plan, Scenario, Strategy};

pub fn run(strategy: Strategy, scenario: Option<&Path>, out: &Path) -> Result<()> {
    let scenario = match scenario {
        Some(path) => Scenario::load(path)?,
        None => Scenario::two_model_example(),
    };
    let timeline = plan(strategy, &scenario.requests, &scenario.cost)?;

    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let path = out.join(format!("timeline-{strategy}.csv"));
    fs::write(&path, timeline.to_csv()).with_context(|| format!("writing {}", path.display()))?;

    for r in &timeline.requests {
        println!(
            "request {}: arrival {} ready {} ttft {}",
            r.id,
            r.arrival,
            r.ready,
            r.ttft()
        );
    }
    println!("total TTFT ({strategy}): {}", timeline.total_ttft());
    Ok(())
}
