//! Deterministic weight generation for the toy transformer.
//!
//! Every tensor is drawn from its own ChaCha stream keyed by the base seed and
//! the tensor's position in the model, so a variant only has to regenerate the
//! noise for the layers it perturbs.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::config::{ModelConfig, PerturbationSpec};
use crate::error::Result;

/// Scale of each block's contribution to the residual stream.
const RESIDUAL_GAIN: f32 = 0.3;
/// Spread of the unembedding, sets how peaked the next-token distribution is.
const LOGIT_GAIN: f32 = 4.0;

/// Row-major `[rows, cols]` matrix used as `x · W` for a row vector `x` of length `rows`.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f32>,
}

impl Matrix {
    fn gaussian(rows: usize, cols: usize, std: f32, rng: &mut ChaCha8Rng) -> Self {
        let data = (0..rows * cols)
            .map(|_| {
                let z: f32 = StandardNormal.sample(rng);
                z * std
            })
            .collect();
        Matrix { rows, cols, data }
    }

    /// `out = x · W`.
    pub fn vec_mul(&self, x: &[f32], out: &mut [f32]) {
        debug_assert_eq!(x.len(), self.rows);
        debug_assert_eq!(out.len(), self.cols);
        out.fill(0.0);
        for (i, &xi) in x.iter().enumerate() {
            let row = &self.data[i * self.cols..(i + 1) * self.cols];
            for (o, &w) in out.iter_mut().zip(row) {
                *o += xi * w;
            }
        }
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub attn_norm: Vec<f32>,
    pub wq: Matrix,
    pub wk: Matrix,
    pub wv: Matrix,
    pub wo: Matrix,
    pub ffn_norm: Vec<f32>,
    pub w_up: Matrix,
    pub w_down: Matrix,
}

impl LayerWeights {
    fn tensors_mut(&mut self) -> [&mut Vec<f32>; 8] {
        [
            &mut self.attn_norm,
            &mut self.wq.data,
            &mut self.wk.data,
            &mut self.wv.data,
            &mut self.wo.data,
            &mut self.ffn_norm,
            &mut self.w_up.data,
            &mut self.w_down.data,
        ]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelWeights {
    pub config: ModelConfig,
    pub embed: Matrix,
    pub layers: Vec<LayerWeights>,
    pub final_norm: Vec<f32>,
    pub unembed: Matrix,
    id: String,
}

impl ModelWeights {
    /// Identifier used to key this model's caches.
    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn with_id(mut self, id: impl Into<String>) -> Self {
        self.id = id.into();
        self
    }

    pub fn n_layers(&self) -> usize {
        self.config.n_layers
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn stream(seed: u64, domain: u64, index: u64) -> ChaCha8Rng {
    let key = splitmix64(splitmix64(seed ^ domain.rotate_left(32)) ^ index);
    ChaCha8Rng::seed_from_u64(key)
}

const BASE_DOMAIN: u64 = 0xB45E;
const NOISE_DOMAIN: u64 = 0x0015_E000;

/// Builds the base model, or a variant when `perturbation` is given.
pub fn build_model(config: &ModelConfig, perturbation: Option<&PerturbationSpec>) -> Result<ModelWeights> {
    config.validate()?;
    if let Some(p) = perturbation {
        p.validate(config.n_layers)?;
    }
    let seed = config.base_seed;
    let d = config.d_model;
    let inv_sqrt = |n: usize| 1.0 / (n as f32).sqrt();

    let embed = Matrix::gaussian(config.vocab_size, d, 1.0, &mut stream(seed, BASE_DOMAIN, 0));
    let mut layers = Vec::with_capacity(config.n_layers);
    for l in 0..config.n_layers {
        let base = 16 * (l as u64 + 1);
        let rng = |t: u64| stream(seed, BASE_DOMAIN, base + t);
        layers.push(LayerWeights {
            attn_norm: vec![1.0; d],
            wq: Matrix::gaussian(d, config.q_dim(), inv_sqrt(d), &mut rng(1)),
            wk: Matrix::gaussian(d, config.kv_dim(), inv_sqrt(d), &mut rng(2)),
            wv: Matrix::gaussian(d, config.kv_dim(), inv_sqrt(d), &mut rng(3)),
            wo: Matrix::gaussian(config.q_dim(), d, RESIDUAL_GAIN * inv_sqrt(config.q_dim()), &mut rng(4)),
            ffn_norm: vec![1.0; d],
            w_up: Matrix::gaussian(d, config.d_ff, inv_sqrt(d), &mut rng(6)),
            w_down: Matrix::gaussian(config.d_ff, d, RESIDUAL_GAIN * inv_sqrt(config.d_ff), &mut rng(7)),
        });
    }
    let unembed = Matrix::gaussian(
        d,
        config.vocab_size,
        LOGIT_GAIN * inv_sqrt(d),
        &mut stream(seed, BASE_DOMAIN, 1),
    );

    let mut id = format!("base-{seed}");
    if let Some(p) = perturbation.filter(|p| !p.is_zero()) {
        for (l, (layer, &eps)) in layers.iter_mut().zip(&p.eps).enumerate() {
            if eps == 0.0 {
                continue;
            }
            for (t, tensor) in layer.tensors_mut().into_iter().enumerate() {
                let mut rng = stream(p.noise_seed, NOISE_DOMAIN, 16 * l as u64 + t as u64);
                add_scaled_noise(tensor, eps, &mut rng);
            }
        }
        id = format!("variant-{seed}-{}-{:016x}", p.noise_seed, eps_digest(&p.eps));
    }

    Ok(ModelWeights {
        config: config.clone(),
        embed,
        layers,
        final_norm: vec![1.0; d],
        unembed,
        id,
    })
}

/// Adds zero-mean Gaussian noise with standard deviation `eps · rms(tensor)`.
fn add_scaled_noise(tensor: &mut [f32], eps: f32, rng: &mut ChaCha8Rng) {
    let mean_sq = tensor.iter().map(|&w| f64::from(w) * f64::from(w)).sum::<f64>() / tensor.len() as f64;
    let scale = eps * mean_sq.sqrt() as f32;
    for w in tensor.iter_mut() {
        let z: f32 = StandardNormal.sample(rng);
        *w += z * scale;
    }
}

fn eps_digest(eps: &[f32]) -> u64 {
    eps.iter()
        .fold(0xCBF2_9CE4_8422_2325, |acc, e| splitmix64(acc ^ u64::from(e.to_bits())))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn config() -> ModelConfig {
        ModelConfig::default()
    }

    #[test]
    fn determinism() {
        let a = build_model(&config(), None).unwrap();
        let b = build_model(&config(), None).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn zero_perturbation_is_base() {
        let base = build_model(&config(), None).unwrap();
        let zero = build_model(&config(), Some(&PerturbationSpec::zeros(8, 3))).unwrap();
        assert_eq!(base.layers, zero.layers);
        assert_eq!(base.embed, zero.embed);
        assert_eq!(base.id(), zero.id());
    }

    #[test]
    fn only_perturbed_layers_change() {
        let base = build_model(&config(), None).unwrap();
        let spec = PerturbationSpec {
            eps: vec![0.0, 0.0, 0.0, 0.0, 0.5, 0.5, 0.0, 0.0],
            noise_seed: 11,
        };
        let variant = build_model(&config(), Some(&spec)).unwrap();
        for l in 0..8 {
            let same = base.layers[l] == variant.layers[l];
            assert_eq!(same, l != 4 && l != 5, "layer {l}");
        }
        // every tensor of a perturbed layer differs
        let (b, v) = (&base.layers[4], &variant.layers[4]);
        assert_ne!(b.wq, v.wq);
        assert_ne!(b.wk, v.wk);
        assert_ne!(b.w_down, v.w_down);
        assert_ne!(b.attn_norm, v.attn_norm);
        assert_eq!(base.embed, variant.embed);
        assert_eq!(base.unembed, variant.unembed);
        assert_ne!(base.id(), variant.id());
    }

    #[test]
    fn noise_scales_with_rms() {
        let base = build_model(&config(), None).unwrap();
        let spec = PerturbationSpec::on_layers(8, &[2], 0.5, 5);
        let variant = build_model(&config(), Some(&spec)).unwrap();
        let rms = |v: &[f32]| (v.iter().map(|x| x * x).sum::<f32>() / v.len() as f32).sqrt();
        let diff: Vec<f32> = base.layers[2]
            .wq
            .data
            .iter()
            .zip(&variant.layers[2].wq.data)
            .map(|(a, b)| b - a)
            .collect();
        let ratio = rms(&diff) / rms(&base.layers[2].wq.data);
        assert!((ratio - 0.5).abs() < 0.05, "ratio {ratio}");
    }

    #[test]
    fn perturbation_length_mismatch() {
        let spec = PerturbationSpec::zeros(3, 0);
        assert!(build_model(&config(), Some(&spec)).is_err());
    }
}
