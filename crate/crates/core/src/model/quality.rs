//! Output-quality proxy and the alternative reuse strategies it is used to compare.

use super::cache::KvCache;
use super::config::TokenSequence;
use super::engine::{
    check_kv_shape, decode_greedy, full_prefill, partial_prefill, CacheSource, MixedPrefill, PrefillOutput, Runner,
};
use super::recompute::RecomputeConfig;
use super::weights::ModelWeights;
use crate::error::{CacheKind, Error, Result};

/// Default number of greedy tokens compared by the agreement score.
pub const DEFAULT_HORIZON: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Agreement {
    /// Fraction of the horizon where both decode streams emit the same token.
    pub score: f64,
    /// First index where the streams differ, if any.
    pub first_divergence: Option<usize>,
}

impl Agreement {
    pub fn between(reference: &[u32], candidate: &[u32]) -> Self {
        let horizon = reference.len().max(1);
        let matches = reference.iter().zip(candidate).filter(|(a, b)| a == b).count();
        Agreement {
            score: matches as f64 / horizon as f64,
            first_divergence: reference.iter().zip(candidate).position(|(a, b)| a != b),
        }
    }
}

/// Greedy tokens the receiver produces on its own.
pub fn reference_decode(receiver: &ModelWeights, tokens: &TokenSequence, horizon: usize) -> Result<TokenSequence> {
    let mut out = full_prefill(receiver, tokens)?;
    decode_greedy(receiver, &mut out.kv, &out.logits, horizon)
}

/// Decodes `horizon` greedy tokens from a mixed prefill.
pub fn decode_mixed(receiver: &ModelWeights, mut mixed: MixedPrefill, horizon: usize) -> Result<TokenSequence> {
    decode_greedy(receiver, &mut mixed.kv, &mixed.logits, horizon)
}

/// Agreement between receiver decoding over the mixed cache built with
/// `config` and receiver decoding after its own full prefill.
pub fn agreement_score(
    sender: &ModelWeights,
    receiver: &ModelWeights,
    tokens: &TokenSequence,
    config: &RecomputeConfig,
    horizon: usize,
) -> Result<Agreement> {
    if horizon == 0 {
        return Err(Error::InvalidArgument("agreement horizon must be at least 1".into()));
    }
    let reference = reference_decode(receiver, tokens, horizon)?;
    let sender_out = full_prefill(sender, tokens)?;
    let mixed = partial_prefill(receiver, tokens, config, &sender_out)?;
    let candidate = decode_mixed(receiver, mixed, horizon)?;
    Ok(Agreement::between(reference.ids(), candidate.ids()))
}

/// Positions chosen by the token-selective baseline: the `⌈ratio · window⌉`
/// largest layer-0 K+V deviations, lowest position first on ties. Returned ascending.
pub fn select_positions(deviation: &[f32], ratio: f64) -> Vec<usize> {
    let take = ((ratio * deviation.len() as f64).ceil() as usize).min(deviation.len());
    let mut order: Vec<usize> = (0..deviation.len()).collect();
    order.sort_by(|&a, &b| deviation[b].total_cmp(&deviation[a]).then(a.cmp(&b)));
    let mut chosen = order[..take].to_vec();
    chosen.sort_unstable();
    chosen
}

/// Result of [`token_selective_prefill`].
#[derive(Debug, Clone, PartialEq)]
pub struct SelectivePrefill {
    pub mixed: MixedPrefill,
    /// Layer-0 deviation of each reuse-window position.
    pub deviation: Vec<f32>,
    /// Recomputed positions, ascending.
    pub selected: Vec<usize>,
}

/// One-pass token-selective reuse baseline.
///
/// The receiver computes layer-0 K/V over the reuse window, ranks positions
/// by their distance from the sender's layer-0 K/V, and recomputes only the
/// top fraction at every layer. Unselected positions keep the sender's K/V
/// everywhere.
pub fn token_selective_prefill(
    receiver: &ModelWeights,
    tokens: &TokenSequence,
    sender: &impl CacheSource,
    ratio: f64,
) -> Result<SelectivePrefill> {
    tokens.validate(&receiver.config)?;
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "selection ratio {ratio} outside (0, 1]"
        )));
    }
    let c = &receiver.config;
    let ids = tokens.ids();
    let window = ids.len() - 1;

    let mut kv = KvCache::empty(c.n_layers, c.n_kv_heads, c.head_dim);
    for l in 0..c.n_layers {
        let layer = sender.kv_layer(l).ok_or(Error::CacheMiss {
            layer: l,
            kind: CacheKind::Kv,
        })?;
        check_kv_shape(&layer, c.n_kv_heads, c.head_dim, l)?;
        kv.layers[l] = layer.prefix(window)?;
    }

    let mut runner = Runner::new(receiver);
    let deviation: Vec<f32> = (0..window)
        .map(|p| {
            let x = runner.embed(ids[p]);
            let (k, v) = runner.project_kv(0, &x, p);
            let sender0 = &kv.layers[0];
            let sq: f32 = k
                .iter()
                .zip(sender0.key(p))
                .chain(v.iter().zip(sender0.value(p)))
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            sq.sqrt()
        })
        .collect();
    let selected = select_positions(&deviation, ratio);

    let mut hidden: Vec<Vec<f32>> = selected.iter().map(|&p| runner.embed(ids[p])).collect();
    for (l, cache) in kv.layers.iter_mut().enumerate() {
        for (row, &p) in hidden.iter_mut().zip(&selected) {
            runner.layer_row(l, row, p, cache, true);
        }
    }
    let logits = runner.step(ids[window], window, &mut kv);
    Ok(SelectivePrefill {
        mixed: MixedPrefill { kv, logits },
        deviation,
        selected,
    })
}

/// Receiver prefill that recomputes the whole hidden stream but attends over
/// the sender's K/V at the `reused` layers (and exposes those entries to decode).
///
/// Used to measure each layer's sensitivity to reuse in isolation.
pub fn reuse_layers_prefill(
    receiver: &ModelWeights,
    tokens: &TokenSequence,
    sender: &PrefillOutput,
    reused: &[usize],
) -> Result<MixedPrefill> {
    tokens.validate(&receiver.config)?;
    let c = &receiver.config;
    let ids = tokens.ids();
    let window = ids.len() - 1;
    let mut kv = KvCache::empty(c.n_layers, c.n_kv_heads, c.head_dim);
    for &l in reused {
        let layer = sender.kv.layers.get(l).ok_or(Error::CacheMiss {
            layer: l,
            kind: CacheKind::Kv,
        })?;
        kv.layers[l] = layer.prefix(window)?;
    }
    let mut runner = Runner::new(receiver);
    let mut hidden: Vec<Vec<f32>> = ids[..window].iter().map(|&t| runner.embed(t)).collect();
    for (l, cache) in kv.layers.iter_mut().enumerate() {
        let write = !reused.contains(&l);
        for (p, row) in hidden.iter_mut().enumerate() {
            runner.layer_row(l, row, p, cache, write);
        }
    }
    let logits = runner.step(ids[window], window, &mut kv);
    Ok(MixedPrefill { kv, logits })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::config::{ModelConfig, PerturbationSpec};
    use crate::model::engine::argmax;
    use crate::model::weights::build_model;

    fn tokens(n: usize, seed: u32) -> TokenSequence {
        TokenSequence((0..n as u32).map(|i| (i * 53 + seed * 17 + 1) % 128).collect())
    }

    fn max_abs(a: &[f32], b: &[f32]) -> f32 {
        a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f32::max)
    }

    #[test]
    fn agreement_counts_matches() {
        let a = Agreement::between(&[1, 2, 3, 4], &[1, 2, 9, 4]);
        assert_eq!(a.score, 0.75);
        assert_eq!(a.first_divergence, Some(2));
        let a = Agreement::between(&[1, 2], &[1, 2]);
        assert_eq!(a.score, 1.0);
        assert_eq!(a.first_divergence, None);
    }

    #[test]
    fn identity_pair_agrees_fully() {
        let m = build_model(&ModelConfig::default(), None).unwrap();
        let t = tokens(24, 1);
        for config in [RecomputeConfig::empty(), RecomputeConfig::single(2, 5).unwrap()] {
            let a = agreement_score(&m, &m, &t, &config, 16).unwrap();
            assert_eq!(a.score, 1.0);
        }
        assert!(agreement_score(&m, &m, &t, &RecomputeConfig::empty(), 0).is_err());
    }

    #[test]
    fn recompute_all_agrees_fully_on_perturbed_pair() {
        let config = ModelConfig::default();
        let sender = build_model(&config, None).unwrap();
        let receiver = build_model(&config, Some(&PerturbationSpec::on_layers(8, &[4, 5], 1.0, 2))).unwrap();
        let a = agreement_score(
            &sender,
            &receiver,
            &tokens(24, 2),
            &RecomputeConfig::recompute_all(8),
            16,
        )
        .unwrap();
        assert_eq!(a.score, 1.0);
    }

    #[test]
    fn selection_ties_prefer_low_positions() {
        assert_eq!(select_positions(&[0.0; 5], 0.4), vec![0, 1]);
        assert_eq!(select_positions(&[1.0, 3.0, 2.0, 3.0], 0.5), vec![1, 3]);
        assert_eq!(select_positions(&[1.0, 3.0, 2.0], 0.1), vec![1]);
        assert_eq!(select_positions(&[1.0, 3.0, 2.0], 1.0), vec![0, 1, 2]);
    }

    #[test]
    fn token_selective_full_ratio_matches_full_prefill() {
        let config = ModelConfig::default();
        let sender = build_model(&config, None).unwrap();
        let receiver = build_model(&config, Some(&PerturbationSpec::on_layers(8, &[4, 5], 1.0, 2))).unwrap();
        let t = tokens(20, 3);
        let s = full_prefill(&sender, &t).unwrap();
        let r = full_prefill(&receiver, &t).unwrap();
        let out = token_selective_prefill(&receiver, &t, &s, 1.0).unwrap();
        assert!(max_abs(&out.mixed.logits, &r.logits) <= 1e-5);
        assert_eq!(out.selected.len(), 19);
    }

    #[test]
    fn token_selective_identity_pair() {
        let m = build_model(&ModelConfig::default(), None).unwrap();
        let t = tokens(20, 4);
        let full = full_prefill(&m, &t).unwrap();
        for ratio in [0.05, 0.3, 0.7] {
            let out = token_selective_prefill(&m, &t, &full, ratio).unwrap();
            assert!(out.deviation.iter().all(|&d| d == 0.0));
            let k = (ratio * 19.0).ceil() as usize;
            assert_eq!(out.selected, (0..k).collect::<Vec<_>>());
            assert!(max_abs(&out.mixed.logits, &full.logits) <= 1e-5);
            assert_eq!(argmax(&out.mixed.logits), argmax(&full.logits));
        }
        assert!(token_selective_prefill(&m, &t, &full, 0.0).is_err());
    }

    #[test]
    fn reuse_nothing_is_full_prefill() {
        let m = build_model(&ModelConfig::default(), None).unwrap();
        let t = tokens(16, 5);
        let full = full_prefill(&m, &t).unwrap();
        let out = reuse_layers_prefill(&m, &t, &full, &[]).unwrap();
        assert_eq!(out.logits, full.logits);
        let out = reuse_layers_prefill(&m, &t, &full, &[3]).unwrap();
        assert!(max_abs(&out.logits, &full.logits) <= 1e-5);
    }
}
