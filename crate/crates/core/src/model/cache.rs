//! Per-layer KV and E caches.
//!
//! Keys and values are held position-major (`[position][kv_head][head_dim]`)
//! so prefill and decode can append one position at a time. [`LayerKvCache::to_head_major`]
//! produces the `[kv_head][position][head_dim]` layout used on disk.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Keys and values of one layer over a run of positions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerKvCache {
    pub n_kv_heads: usize,
    pub head_dim: usize,
    pub keys: Vec<f32>,
    pub values: Vec<f32>,
}

impl LayerKvCache {
    pub fn empty(n_kv_heads: usize, head_dim: usize) -> Self {
        LayerKvCache {
            n_kv_heads,
            head_dim,
            keys: Vec::new(),
            values: Vec::new(),
        }
    }

    pub fn row_width(&self) -> usize {
        self.n_kv_heads * self.head_dim
    }

    pub fn positions(&self) -> usize {
        self.keys.len() / self.row_width()
    }

    pub fn key(&self, pos: usize) -> &[f32] {
        let w = self.row_width();
        &self.keys[pos * w..(pos + 1) * w]
    }

    pub fn value(&self, pos: usize) -> &[f32] {
        let w = self.row_width();
        &self.values[pos * w..(pos + 1) * w]
    }

    /// Writes position `pos`, appending when `pos == positions()`.
    pub fn set(&mut self, pos: usize, key: &[f32], value: &[f32]) {
        let w = self.row_width();
        let n = self.positions();
        assert!(pos <= n, "kv write at {pos} leaves a gap after {n} positions");
        if pos == n {
            self.keys.extend_from_slice(key);
            self.values.extend_from_slice(value);
        } else {
            self.keys[pos * w..(pos + 1) * w].copy_from_slice(key);
            self.values[pos * w..(pos + 1) * w].copy_from_slice(value);
        }
    }

    /// First `positions` entries.
    pub fn prefix(&self, positions: usize) -> Result<Self> {
        if positions > self.positions() {
            return Err(Error::ShapeMismatch(format!(
                "need {positions} cached positions, have {}",
                self.positions()
            )));
        }
        let w = self.row_width();
        Ok(LayerKvCache {
            n_kv_heads: self.n_kv_heads,
            head_dim: self.head_dim,
            keys: self.keys[..positions * w].to_vec(),
            values: self.values[..positions * w].to_vec(),
        })
    }

    pub fn byte_size(&self) -> usize {
        (self.keys.len() + self.values.len()) * 4
    }

    /// Keys then values, each laid out `[kv_head][position][head_dim]`.
    pub fn to_head_major(&self) -> Vec<f32> {
        let n = self.positions();
        let mut out = Vec::with_capacity(self.keys.len() * 2);
        for src in [&self.keys, &self.values] {
            for h in 0..self.n_kv_heads {
                for p in 0..n {
                    let start = p * self.row_width() + h * self.head_dim;
                    out.extend_from_slice(&src[start..start + self.head_dim]);
                }
            }
        }
        out
    }

    pub fn from_head_major(n_kv_heads: usize, head_dim: usize, positions: usize, data: &[f32]) -> Result<Self> {
        let half = n_kv_heads * positions * head_dim;
        if data.len() != 2 * half {
            return Err(Error::ShapeMismatch(format!(
                "expected {} floats for {positions} positions, got {}",
                2 * half,
                data.len()
            )));
        }
        let mut cache = LayerKvCache::empty(n_kv_heads, head_dim);
        for (dst, src) in [(&mut cache.keys, &data[..half]), (&mut cache.values, &data[half..])] {
            dst.resize(half, 0.0);
            for h in 0..n_kv_heads {
                for p in 0..positions {
                    let from = (h * positions + p) * head_dim;
                    let to = (p * n_kv_heads + h) * head_dim;
                    dst[to..to + head_dim].copy_from_slice(&src[from..from + head_dim]);
                }
            }
        }
        Ok(cache)
    }
}

/// KV caches for every layer of a model, all over the same positions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KvCache {
    pub layers: Vec<LayerKvCache>,
}

impl KvCache {
    pub fn empty(n_layers: usize, n_kv_heads: usize, head_dim: usize) -> Self {
        KvCache {
            layers: (0..n_layers)
                .map(|_| LayerKvCache::empty(n_kv_heads, head_dim))
                .collect(),
        }
    }

    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    /// Common position count; panics if layers disagree.
    pub fn positions(&self) -> usize {
        let n = self.layers.first().map_or(0, LayerKvCache::positions);
        assert!(
            self.layers.iter().all(|l| l.positions() == n),
            "layers hold different position counts"
        );
        n
    }

    pub fn byte_size(&self) -> usize {
        self.layers.iter().map(LayerKvCache::byte_size).sum()
    }
}

/// Hidden states entering `layer`, one `d_model` row per position.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ECache {
    pub layer: usize,
    pub d_model: usize,
    pub hidden: Vec<f32>,
}

impl ECache {
    pub fn positions(&self) -> usize {
        self.hidden.len() / self.d_model
    }

    pub fn row(&self, pos: usize) -> &[f32] {
        &self.hidden[pos * self.d_model..(pos + 1) * self.d_model]
    }

    pub fn byte_size(&self) -> usize {
        self.hidden.len() * 4
    }
}
