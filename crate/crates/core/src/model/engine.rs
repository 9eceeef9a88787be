//! Prefill and decode for the toy transformer.
//!
//! Every path (full prefill, partial prefill, token-selective prefill, decode)
//! pushes single rows through [`Runner::layer_row`], so two paths that feed a
//! layer the same hidden row and the same cached entries produce bitwise
//! identical outputs.

use std::borrow::Cow;
use std::collections::BTreeMap;

use super::cache::{ECache, KvCache, LayerKvCache};
use super::config::TokenSequence;
use super::recompute::RecomputeConfig;
use super::weights::ModelWeights;
use crate::error::{CacheKind, Error, Result};

const ROPE_BASE: f32 = 10_000.0;
const NORM_EPS: f32 = 1e-5;

/// Sender-side caches a receiver reads during partial prefill.
pub trait CacheSource {
    fn kv_layer(&self, layer: usize) -> Option<Cow<'_, LayerKvCache>>;
    fn e_layer(&self, layer: usize) -> Option<Cow<'_, ECache>>;
}

/// Output of a full prefill.
#[derive(Debug, Clone, PartialEq)]
pub struct PrefillOutput {
    /// KV over all `n` positions.
    pub kv: KvCache,
    /// Hidden states entering each layer over the reuse window `0..n-1`.
    pub e: Vec<ECache>,
    /// Logits of the first generated token.
    pub logits: Vec<f32>,
}

impl CacheSource for PrefillOutput {
    fn kv_layer(&self, layer: usize) -> Option<Cow<'_, LayerKvCache>> {
        self.kv.layers.get(layer).map(Cow::Borrowed)
    }

    fn e_layer(&self, layer: usize) -> Option<Cow<'_, ECache>> {
        self.e.get(layer).map(Cow::Borrowed)
    }
}

/// Sparse sender caches, e.g. what survived serving-mode storage.
#[derive(Debug, Clone, Default)]
pub struct SenderCaches {
    pub kv: BTreeMap<usize, LayerKvCache>,
    pub e: BTreeMap<usize, ECache>,
}

impl SenderCaches {
    /// Keeps all KV layers and E only at `e_layers`.
    pub fn from_prefill(prefill: &PrefillOutput, e_layers: &[usize]) -> Self {
        SenderCaches {
            kv: prefill.kv.layers.iter().cloned().enumerate().collect(),
            e: e_layers
                .iter()
                .filter_map(|&l| prefill.e.get(l).map(|e| (l, e.clone())))
                .collect(),
        }
    }
}

impl CacheSource for SenderCaches {
    fn kv_layer(&self, layer: usize) -> Option<Cow<'_, LayerKvCache>> {
        self.kv.get(&layer).map(Cow::Borrowed)
    }

    fn e_layer(&self, layer: usize) -> Option<Cow<'_, ECache>> {
        self.e.get(&layer).map(Cow::Borrowed)
    }
}

/// Mixed cache and first-token logits produced by a receiver.
#[derive(Debug, Clone, PartialEq)]
pub struct MixedPrefill {
    pub kv: KvCache,
    pub logits: Vec<f32>,
}

/// Index of the largest logit, lowest id on ties.
pub fn argmax(logits: &[f32]) -> u32 {
    let mut best = 0;
    for (i, &x) in logits.iter().enumerate().skip(1) {
        if x > logits[best] {
            best = i;
        }
    }
    best as u32
}

struct Scratch {
    normed: Vec<f32>,
    q: Vec<f32>,
    k: Vec<f32>,
    v: Vec<f32>,
    attn: Vec<f32>,
    proj: Vec<f32>,
    ff: Vec<f32>,
    scores: Vec<f32>,
}

/// Borrowed model plus rotary tables and scratch buffers.
pub(crate) struct Runner<'a> {
    pub(crate) model: &'a ModelWeights,
    inv_freq: Vec<f32>,
    s: Scratch,
}

impl<'a> Runner<'a> {
    pub(crate) fn new(model: &'a ModelWeights) -> Self {
        let c = &model.config;
        let half = c.head_dim / 2;
        let inv_freq = (0..half)
            .map(|i| ROPE_BASE.powf(-(2.0 * i as f32) / c.head_dim as f32))
            .collect();
        Runner {
            model,
            inv_freq,
            s: Scratch {
                normed: vec![0.0; c.d_model],
                q: vec![0.0; c.q_dim()],
                k: vec![0.0; c.kv_dim()],
                v: vec![0.0; c.kv_dim()],
                attn: vec![0.0; c.q_dim()],
                proj: vec![0.0; c.d_model],
                ff: vec![0.0; c.d_ff],
                scores: Vec::with_capacity(c.max_seq),
            },
        }
    }

    pub(crate) fn embed(&self, token: u32) -> Vec<f32> {
        self.model.embed.row(token as usize).to_vec()
    }

    fn rope(inv_freq: &[f32], x: &mut [f32], head_dim: usize, pos: usize) {
        for head in x.chunks_exact_mut(head_dim) {
            for (i, &f) in inv_freq.iter().enumerate() {
                let (sin, cos) = (pos as f32 * f).sin_cos();
                let (a, b) = (head[2 * i], head[2 * i + 1]);
                head[2 * i] = a * cos - b * sin;
                head[2 * i + 1] = a * sin + b * cos;
            }
        }
    }

    /// Key and value of `x` (the hidden row entering `layer`) at `pos`.
    pub(crate) fn project_kv(&mut self, layer: usize, x: &[f32], pos: usize) -> (Vec<f32>, Vec<f32>) {
        let lw = &self.model.layers[layer];
        rms_norm(x, &lw.attn_norm, &mut self.s.normed);
        lw.wk.vec_mul(&self.s.normed, &mut self.s.k);
        lw.wv.vec_mul(&self.s.normed, &mut self.s.v);
        Self::rope(&self.inv_freq, &mut self.s.k, self.model.config.head_dim, pos);
        (self.s.k.clone(), self.s.v.clone())
    }

    /// Runs one position through one pre-norm block, in place.
    ///
    /// With `write_kv` the row's own key/value is stored at `pos` before
    /// attending; otherwise `cache` must already hold an entry there.
    /// Attention covers cached positions `0..=pos`.
    pub(crate) fn layer_row(
        &mut self,
        layer: usize,
        x: &mut [f32],
        pos: usize,
        cache: &mut LayerKvCache,
        write_kv: bool,
    ) {
        let c = &self.model.config;
        let lw = &self.model.layers[layer];
        let s = &mut self.s;

        rms_norm(x, &lw.attn_norm, &mut s.normed);
        lw.wq.vec_mul(&s.normed, &mut s.q);
        Self::rope(&self.inv_freq, &mut s.q, c.head_dim, pos);
        if write_kv {
            lw.wk.vec_mul(&s.normed, &mut s.k);
            lw.wv.vec_mul(&s.normed, &mut s.v);
            Self::rope(&self.inv_freq, &mut s.k, c.head_dim, pos);
            cache.set(pos, &s.k, &s.v);
        }
        debug_assert!(cache.positions() > pos);

        let scale = 1.0 / (c.head_dim as f32).sqrt();
        let group = c.group_size();
        for h in 0..c.n_heads {
            let kv_off = (h / group) * c.head_dim;
            let q = &s.q[h * c.head_dim..(h + 1) * c.head_dim];
            s.scores.clear();
            let mut max = f32::NEG_INFINITY;
            for t in 0..=pos {
                let k = &cache.key(t)[kv_off..kv_off + c.head_dim];
                let score = dot(q, k) * scale;
                max = max.max(score);
                s.scores.push(score);
            }
            let mut denom = 0.0;
            for score in s.scores.iter_mut() {
                *score = (*score - max).exp();
                denom += *score;
            }
            let out = &mut s.attn[h * c.head_dim..(h + 1) * c.head_dim];
            out.fill(0.0);
            for (t, &w) in s.scores.iter().enumerate() {
                let v = &cache.value(t)[kv_off..kv_off + c.head_dim];
                let w = w / denom;
                for (o, &vi) in out.iter_mut().zip(v) {
                    *o += w * vi;
                }
            }
        }
        lw.wo.vec_mul(&s.attn, &mut s.proj);
        for (xi, p) in x.iter_mut().zip(&s.proj) {
            *xi += p;
        }

        rms_norm(x, &lw.ffn_norm, &mut s.normed);
        lw.w_up.vec_mul(&s.normed, &mut s.ff);
        for f in s.ff.iter_mut() {
            *f = silu(*f);
        }
        lw.w_down.vec_mul(&s.ff, &mut s.proj);
        for (xi, p) in x.iter_mut().zip(&s.proj) {
            *xi += p;
        }
    }

    pub(crate) fn logits(&mut self, x: &[f32]) -> Vec<f32> {
        rms_norm(x, &self.model.final_norm, &mut self.s.normed);
        let mut out = vec![0.0; self.model.config.vocab_size];
        self.model.unembed.vec_mul(&self.s.normed, &mut out);
        out
    }

    /// Pushes `token` at `pos` through every layer, appending its KV, and
    /// returns the next-token logits.
    pub(crate) fn step(&mut self, token: u32, pos: usize, kv: &mut KvCache) -> Vec<f32> {
        let mut x = self.embed(token);
        for (l, cache) in kv.layers.iter_mut().enumerate() {
            self.layer_row(l, &mut x, pos, cache, true);
        }
        self.logits(&x)
    }
}

fn rms_norm(x: &[f32], gain: &[f32], out: &mut [f32]) {
    let mean_sq = x.iter().map(|v| v * v).sum::<f32>() / x.len() as f32;
    let inv = 1.0 / (mean_sq + NORM_EPS).sqrt();
    for ((o, &v), &g) in out.iter_mut().zip(x).zip(gain) {
        *o = v * inv * g;
    }
}

fn silu(x: f32) -> f32 {
    x / (1.0 + (-x).exp())
}

fn dot(a: &[f32], b: &[f32]) -> f32 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn flatten(rows: &[Vec<f32>]) -> Vec<f32> {
    rows.iter().flat_map(|r| r.iter().copied()).collect()
}

/// Processes the whole context with `model`, recording KV at every position
/// and the E cache of every layer over the reuse window.
pub fn full_prefill(model: &ModelWeights, tokens: &TokenSequence) -> Result<PrefillOutput> {
    tokens.validate(&model.config)?;
    let c = &model.config;
    let ids = tokens.ids();
    let window = ids.len() - 1;
    let mut runner = Runner::new(model);
    let mut kv = KvCache::empty(c.n_layers, c.n_kv_heads, c.head_dim);
    let mut hidden: Vec<Vec<f32>> = ids[..window].iter().map(|&t| runner.embed(t)).collect();
    let mut e = Vec::with_capacity(c.n_layers);
    for (l, cache) in kv.layers.iter_mut().enumerate() {
        e.push(ECache {
            layer: l,
            d_model: c.d_model,
            hidden: flatten(&hidden),
        });
        for (p, row) in hidden.iter_mut().enumerate() {
            runner.layer_row(l, row, p, cache, true);
        }
    }
    let logits = runner.step(ids[window], window, &mut kv);
    Ok(PrefillOutput { kv, e, logits })
}

/// Receiver prefill reusing sender KV outside the configured groups.
///
/// Each group `[a, b]` is recomputed over the reuse window starting from the
/// token embeddings (`a == 0`) or the sender's E cache at layer `a`. The last
/// input position is then run through every layer against the mixed cache.
pub fn partial_prefill(
    receiver: &ModelWeights,
    tokens: &TokenSequence,
    config: &RecomputeConfig,
    sender: &impl CacheSource,
) -> Result<MixedPrefill> {
    tokens.validate(&receiver.config)?;
    let c = &receiver.config;
    config.validate(c.n_layers)?;
    let ids = tokens.ids();
    let window = ids.len() - 1;

    // Gather every sender input first so a miss fails before any compute.
    let mut reused: Vec<Option<LayerKvCache>> = vec![None; c.n_layers];
    let mut seeds: BTreeMap<usize, ECache> = BTreeMap::new();
    for (l, slot) in reused.iter_mut().enumerate() {
        if !config.is_recomputed(l) {
            let kv = sender.kv_layer(l).ok_or(Error::CacheMiss {
                layer: l,
                kind: CacheKind::Kv,
            })?;
            check_kv_shape(&kv, c.n_kv_heads, c.head_dim, l)?;
            *slot = Some(kv.prefix(window)?);
        } else if l > 0 && config.group_of(l).map(|g| g.start) == Some(l) {
            let e = sender.e_layer(l).ok_or(Error::CacheMiss {
                layer: l,
                kind: CacheKind::E,
            })?;
            if e.d_model != c.d_model || e.positions() < window {
                return Err(Error::ShapeMismatch(format!(
                    "E cache at layer {l} covers {} positions of width {}, need {window} of width {}",
                    e.positions(),
                    e.d_model,
                    c.d_model
                )));
            }
            seeds.insert(l, e.into_owned());
        }
    }

    let mut runner = Runner::new(receiver);
    let mut kv = KvCache::empty(c.n_layers, c.n_kv_heads, c.head_dim);
    for (l, slot) in reused.into_iter().enumerate() {
        if let Some(cache) = slot {
            kv.layers[l] = cache;
        }
    }
    for group in config.groups() {
        let mut hidden: Vec<Vec<f32>> = if group.start == 0 {
            ids[..window].iter().map(|&t| runner.embed(t)).collect()
        } else {
            let e = &seeds[&group.start];
            (0..window).map(|p| e.row(p).to_vec()).collect()
        };
        for l in group.start..=group.end {
            let cache = &mut kv.layers[l];
            for (p, row) in hidden.iter_mut().enumerate() {
                runner.layer_row(l, row, p, cache, true);
            }
        }
    }
    let logits = runner.step(ids[window], window, &mut kv);
    Ok(MixedPrefill { kv, logits })
}

pub(crate) fn check_kv_shape(kv: &LayerKvCache, n_kv_heads: usize, head_dim: usize, layer: usize) -> Result<()> {
    if kv.n_kv_heads != n_kv_heads || kv.head_dim != head_dim {
        return Err(Error::ShapeMismatch(format!(
            "KV cache at layer {layer} has {}x{} heads, receiver expects {n_kv_heads}x{head_dim}",
            kv.n_kv_heads, kv.head_dim
        )));
    }
    Ok(())
}

/// Greedy decoding of `steps` tokens; every emitted token is fed back, so
/// the cache grows by `steps` positions.
pub fn decode_greedy(
    model: &ModelWeights,
    cache: &mut KvCache,
    last_logits: &[f32],
    steps: usize,
) -> Result<TokenSequence> {
    let c = &model.config;
    if steps == 0 {
        return Err(Error::InvalidArgument("decode needs at least one step".into()));
    }
    if cache.n_layers() != c.n_layers {
        return Err(Error::ShapeMismatch(format!(
            "cache has {} layers, model has {}",
            cache.n_layers(),
            c.n_layers
        )));
    }
    let start = cache.positions();
    if start == 0 {
        return Err(Error::DegenerateInput("decode needs a non-empty cache".into()));
    }
    if start + steps > c.max_seq {
        return Err(Error::SequenceTooLong {
            len: start + steps,
            max_seq: c.max_seq,
        });
    }
    if last_logits.len() != c.vocab_size {
        return Err(Error::ShapeMismatch(format!(
            "logits of length {}, vocabulary {}",
            last_logits.len(),
            c.vocab_size
        )));
    }
    let mut runner = Runner::new(model);
    let mut out = Vec::with_capacity(steps);
    let mut logits = last_logits.to_vec();
    for i in 0..steps {
        let token = argmax(&logits);
        out.push(token);
        logits = runner.step(token, start + i, cache);
    }
    Ok(TokenSequence(out))
}
