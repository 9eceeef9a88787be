use kvbridge::model::RecomputeConfig;
use kvbridge::profiler::{FrontierEntry, ParetoFrontier};
use kvbridge::sched::CostModel;
use kvbridge::sim::{adapt_config, route, simulate, sweep_rates, ClusterSpec, Selection, SloPolicy, WorkloadSpec};
use proptest::prelude::*;

fn cluster(n_layers: usize) -> ClusterSpec {
    ClusterSpec {
        replicas: 2,
        decode_cost: 0.1,
        cost: CostModel::per_layer(0.1, 0.2, 1.0, 0.0),
        n_layers,
        model: "receiver".into(),
    }
}

fn workload(rate: f64, seed: u64) -> WorkloadSpec {
    WorkloadSpec {
        rate,
        duration: 400.0,
        context_len: 48,
        output_len: 6,
        seed,
        pair_id: "pair".into(),
    }
}

/// Suffix groups `[L-k, L-1]` with qualities rising in k.
fn frontier(n_layers: usize, entries: &[(usize, f64)]) -> ParetoFrontier {
    let mut entries: Vec<FrontierEntry> = entries
        .iter()
        .map(|&(k, quality)| FrontierEntry {
            k,
            quality,
            config: if k == 0 {
                RecomputeConfig::empty()
            } else {
                RecomputeConfig::single(n_layers - k, n_layers - 1).unwrap()
            },
        })
        .collect();
    let best = entries.iter().map(|e| e.quality).fold(0.0, f64::max);
    entries.push(FrontierEntry {
        k: n_layers,
        quality: best.max(1.0),
        config: RecomputeConfig::recompute_all(n_layers),
    });
    ParetoFrontier {
        entries,
        baseline_quality: 1.0,
        floor_delta: 0.05,
    }
}

#[test]
fn p90_ttft_grows_with_rate() {
    let rates: Vec<f64> = (1..=12).map(|i| f64::from(i) / 10.0).collect();
    let policy = SloPolicy {
        slo: 10.0,
        q_min: 0.0,
        adapt: false,
    };
    for config in [
        RecomputeConfig::recompute_all(8),
        RecomputeConfig::single(5, 7).unwrap(),
    ] {
        let runs = sweep_rates(
            &rates,
            &workload(0.1, 3),
            &cluster(8),
            &policy,
            Selection::Fixed(&config),
        )
        .unwrap();
        for w in runs.windows(2) {
            assert!(
                w[1].p90_ttft() >= w[0].p90_ttft(),
                "{config}: {} -> {}",
                w[0].rate,
                w[1].rate
            );
        }
    }
}

#[test]
fn adaptation_never_raises_violations() {
    let f = frontier(8, &[(2, 0.6), (3, 0.92), (5, 0.97)]);
    let full = RecomputeConfig::recompute_all(8);
    for rate in [0.1, 0.3, 0.6, 1.0] {
        let fixed = SloPolicy {
            slo: 9.0,
            q_min: 0.9,
            adapt: false,
        };
        let adaptive = SloPolicy { adapt: true, ..fixed };
        let w = workload(rate, 17);
        let base = simulate(&w, &cluster(8), &fixed, Selection::Fixed(&full), None).unwrap();
        let adapted = simulate(&w, &cluster(8), &adaptive, Selection::Profiled(&f), None).unwrap();
        assert!(adapted.violation_rate <= base.violation_rate, "λ={rate}");
    }
}

#[test]
fn identical_seeds_identical_metrics() {
    let f = frontier(8, &[(2, 0.95)]);
    let policy = SloPolicy {
        slo: 6.0,
        q_min: 0.9,
        adapt: true,
    };
    let a = simulate(&workload(0.7, 5), &cluster(8), &policy, Selection::Profiled(&f), None).unwrap();
    let b = simulate(&workload(0.7, 5), &cluster(8), &policy, Selection::Profiled(&f), None).unwrap();
    assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
    assert_eq!(a.records, b.records);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn routing_stays_balanced(replicas in 1usize..9, n in 0u64..200) {
        let mut counts = vec![0u64; replicas];
        for i in 0..n {
            counts[route(i, replicas)] += 1;
            let (lo, hi) = (counts.iter().min().unwrap(), counts.iter().max().unwrap());
            prop_assert!(hi - lo <= 1);
        }
    }

    #[test]
    fn adaptive_choices_meet_quality_floor(
        qualities in proptest::collection::vec(0.0f64..1.0, 1..5),
        q_min in 0.0f64..1.0,
        slo in 0.5f64..12.0,
        depth in 0usize..3,
    ) {
        let mut sorted = qualities.clone();
        sorted.sort_by(f64::total_cmp);
        sorted.dedup();
        let entries: Vec<(usize, f64)> = sorted.iter().enumerate().map(|(i, &q)| (i + 1, q)).collect();
        let f = frontier(8, &entries);
        let policy = SloPolicy { slo, q_min, adapt: true };
        let choice = adapt_config(depth, &f, &policy, &CostModel::unit()).unwrap();
        prop_assert!(choice.quality.unwrap() >= q_min);
        if depth > 0 {
            let smallest = f.entries.iter().find(|e| e.quality >= q_min).unwrap();
            prop_assert_eq!(choice.config.recomputed_layer_count(), smallest.k);
        }
    }

    #[test]
    fn horizon_conserves_requests(rate in 0.05f64..2.0, seed in 0u64..1000, horizon in 10.0f64..500.0) {
        let policy = SloPolicy { slo: 8.0, q_min: 0.0, adapt: false };
        let full = RecomputeConfig::recompute_all(8);
        let m = simulate(&workload(rate, seed), &cluster(8), &policy, Selection::Fixed(&full), Some(horizon)).unwrap();
        prop_assert_eq!(m.completed + m.in_flight, m.generated);
        prop_assert!((0.0..=1.0).contains(&m.violation_rate));
        for r in &m.records {
            prop_assert!(r.e2e >= r.ttft);
            prop_assert!(r.arrival + r.e2e <= horizon);
            prop_assert_eq!(r.tbt.len(), 6);
        }
    }
}
