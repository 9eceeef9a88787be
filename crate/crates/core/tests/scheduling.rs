use std::collections::HashMap;

use kvbridge::model::{ModelConfig, RecomputeConfig};
use kvbridge::sched::{
    estimate_ttft, plan, CostModel, EventLabel, Resource, ScheduledRequest, Strategy as Plan, Timeline,
};
use proptest::prelude::*;

fn config_strategy(n_layers: usize) -> impl Strategy<Value = RecomputeConfig> {
    proptest::collection::vec((0..n_layers, 0..n_layers), 0..4)
        .prop_map(|pairs| RecomputeConfig::from_ranges(pairs.into_iter().map(|(a, b)| (a.min(b), a.max(b)))).unwrap())
}

fn request_strategy() -> impl Strategy<Value = (usize, u32, usize, RecomputeConfig)> {
    (4usize..=16).prop_flat_map(|n| (Just(n), 0u32..=80, 0usize..3, config_strategy(n)))
}

prop_compose! {
    fn scenario()(
        raw in proptest::collection::vec(request_strategy(), 1..7),
        bandwidth_exp in 8u32..=16,
        compute in 1u32..=64,
        positions in 8usize..=128,
        n_kv_heads in prop_oneof![Just(1usize), Just(2), Just(4)],
    ) -> (Vec<ScheduledRequest>, CostModel) {
        let shape = ModelConfig { n_kv_heads, ..ModelConfig::default() };
        let cost = CostModel::from_model(&shape, positions, f64::from(1u32 << bandwidth_exp), f64::from(compute) / 1024.0);
        let mut requests: Vec<ScheduledRequest> = raw
            .into_iter()
            .map(|(n_layers, arrival, model, config)| ScheduledRequest {
                id: 0,
                arrival: f64::from(arrival) / 4.0,
                model: ["A", "B", "C"][model].to_string(),
                config,
                n_layers,
            })
            .collect();
        requests.sort_by(|a, b| a.arrival.total_cmp(&b.arrival));
        for (i, r) in requests.iter_mut().enumerate() {
            r.id = i as u64;
        }
        (requests, cost)
    }
}

fn assert_exclusive(t: &Timeline, resource: &Resource) -> Result<(), TestCaseError> {
    let mut events: Vec<_> = t.events_on(resource).collect();
    events.sort_by(|a, b| a.start.total_cmp(&b.start).then(a.end.total_cmp(&b.end)));
    for w in events.windows(2) {
        prop_assert!(w[1].start >= w[0].end, "{resource} overlaps: {:?} / {:?}", w[0], w[1]);
    }
    Ok(())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn pipelined_dominates((requests, cost) in scenario()) {
        let total = |s| plan(s, &requests, &cost).unwrap().total_ttft();
        let (naive, reuse, piped) = (total(Plan::Naive), total(Plan::ReuseOnly), total(Plan::Pipelined));
        prop_assert!(piped <= reuse, "pipelined {piped} > reuse-only {reuse}");
        prop_assert!(reuse <= naive, "reuse-only {reuse} > naive {naive}");
    }

    #[test]
    fn timelines_are_physical((requests, cost) in scenario()) {
        for strategy in Plan::ALL {
            let t = plan(strategy, &requests, &cost).unwrap();
            assert_exclusive(&t, &Resource::Link)?;
            for model in ["A", "B", "C"] {
                assert_exclusive(&t, &Resource::Compute(model.to_string()))?;
            }
            let ready: HashMap<u64, f64> = t.requests.iter().map(|r| (r.id, r.ready)).collect();
            for e in &t.events {
                let r = &requests[e.request as usize];
                prop_assert!(e.start >= r.arrival, "{strategy}: event before arrival");
                prop_assert!(e.end <= ready[&e.request], "{strategy}: event after first token");
                prop_assert!(e.end > e.start || e.label == EventLabel::Anchor);
            }
            for r in &requests {
                for layer in r.config.transition_layers() {
                    let find = |label| t.events.iter().find(|e| e.request == r.id && e.label == label).unwrap();
                    prop_assert!(find(EventLabel::Recompute(layer)).start >= find(EventLabel::ETransfer(layer)).end);
                }
            }
        }
    }

    #[test]
    fn transferred_bytes_are_conserved((requests, cost) in scenario()) {
        for strategy in Plan::ALL {
            let t = plan(strategy, &requests, &cost).unwrap();
            let mut expected = 0.0;
            for r in &requests {
                let kv_layers = match strategy {
                    Plan::Naive => r.n_layers,
                    _ => r.reused_layers().len(),
                };
                expected += kv_layers as f64 * cost.kv_layer_bytes + r.config.transition_layers().len() as f64 * cost.e_layer_bytes;
            }
            let moved: f64 = t
                .events_on(&Resource::Link)
                .map(|e| (e.end - e.start) * cost.link_bandwidth)
                .sum();
            prop_assert_eq!(moved, expected);
        }
    }

    #[test]
    fn lone_request_matches_estimate((requests, cost) in scenario()) {
        let first = &requests[0];
        let t = plan(Plan::Pipelined, std::slice::from_ref(first), &cost).unwrap();
        prop_assert_eq!(t.total_ttft(), estimate_ttft(first, &cost).unwrap());
    }
}
