//! Run configuration: one TOML file shared by `profile` and `serve`.
//!
//! Every section is optional. Relative paths resolve against the directory
//! holding the configuration file.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use kvbridge::dataset;
use kvbridge::model::{build_model, ModelConfig, ModelWeights, PerturbationSpec, TokenSequence};
use kvbridge::sched::CostSpec;
use serde::Deserialize;

const CONFIG_VERSION: u32 = 1;

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub version: u32,
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub pair: PairSection,
    #[serde(default)]
    pub dataset: DatasetSection,
    #[serde(default)]
    pub profile: ProfileSection,
    #[serde(default)]
    pub serve: ServeSection,
    #[serde(skip)]
    base_dir: PathBuf,
}

/// Sender and receiver are the base model plus optional per-layer noise.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PairSection {
    pub sender_eps: Option<Vec<f32>>,
    #[serde(default)]
    pub sender_noise_seed: u64,
    pub receiver_eps: Option<Vec<f32>>,
    #[serde(default)]
    pub receiver_noise_seed: u64,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSection {
    /// Defaults to the run seed.
    pub seed: Option<u64>,
    pub count: usize,
    pub length: usize,
    /// Token-id files; when non-empty they replace the synthetic corpus.
    pub files: Vec<PathBuf>,
}

impl Default for DatasetSection {
    fn default() -> Self {
        DatasetSection {
            seed: None,
            count: 8,
            length: 48,
            files: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProfileSection {
    pub granularity: usize,
    pub horizon: usize,
    pub floor_delta: f64,
}

impl Default for ProfileSection {
    fn default() -> Self {
        ProfileSection {
            granularity: 2,
            horizon: 32,
            floor_delta: 0.05,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SelectionMode {
    /// Configs come from the profiled frontier.
    Profile,
    /// Every request recomputes all layers.
    Full,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ServeSection {
    pub rates: Vec<f64>,
    pub duration: f64,
    pub context_len: usize,
    pub output_len: usize,
    pub replicas: usize,
    pub decode_cost: f64,
    pub cost: CostSpec,
    pub slo: f64,
    pub q_min: f64,
    pub adapt: bool,
    pub selection: SelectionMode,
    /// Defaults to `profile.json` in the output directory.
    pub profile: Option<PathBuf>,
}

impl Default for ServeSection {
    fn default() -> Self {
        ServeSection {
            rates: vec![0.1, 0.2, 0.4, 0.8],
            duration: 1000.0,
            context_len: 48,
            output_len: 8,
            replicas: 4,
            decode_cost: 0.1,
            cost: CostSpec::PerLayer {
                kv_time: 0.1,
                e_time: 0.2,
                compute_time: 1.0,
                anchor_layer_time: 0.0,
            },
            slo: 12.0,
            q_min: 0.9,
            adapt: true,
            selection: SelectionMode::Profile,
            profile: None,
        }
    }
}

fn default_seed() -> u64 {
    7
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let mut config: RunConfig = toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        config.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        config
            .validate()
            .with_context(|| format!("invalid run configuration {}", path.display()))?;
        Ok(config)
    }

    /// Defaults only, for commands run without `--config`.
    pub fn defaults() -> Self {
        let config: RunConfig = toml::from_str("version = 1").expect("defaults parse");
        config.validate().expect("defaults are valid");
        config
    }

    fn validate(&self) -> Result<()> {
        ensure!(
            self.version == CONFIG_VERSION,
            "unsupported run configuration version {} (expected {CONFIG_VERSION})",
            self.version
        );
        self.model.validate()?;
        for (name, eps, seed) in [
            ("sender_eps", &self.pair.sender_eps, self.pair.sender_noise_seed),
            ("receiver_eps", &self.pair.receiver_eps, self.pair.receiver_noise_seed),
        ] {
            if let Some(eps) = eps {
                perturbation(eps, seed)
                    .validate(self.model.n_layers)
                    .with_context(|| format!("pair.{name}"))?;
            }
        }
        let d = &self.dataset;
        if d.files.is_empty() {
            ensure!(d.count >= 1, "dataset.count must be at least 1");
            ensure!(
                (2..=self.model.max_seq).contains(&d.length),
                "dataset.length must be in [2, {}]",
                self.model.max_seq
            );
        }
        let p = &self.profile;
        ensure!(p.granularity >= 1, "profile.granularity must be at least 1");
        ensure!(p.horizon >= 1, "profile.horizon must be at least 1");
        ensure!(
            (0.0..1.0).contains(&p.floor_delta),
            "profile.floor_delta must be in [0, 1)"
        );
        let s = &self.serve;
        ensure!(!s.rates.is_empty(), "serve.rates must not be empty");
        ensure!(
            s.rates.iter().all(|r| r.is_finite() && *r > 0.0),
            "serve.rates must be positive"
        );
        ensure!(
            s.rates.windows(2).all(|w| w[0] < w[1]),
            "serve.rates must be strictly increasing"
        );
        ensure!(
            s.duration.is_finite() && s.duration > 0.0,
            "serve.duration must be positive"
        );
        ensure!(s.output_len >= 1, "serve.output_len must be at least 1");
        ensure!(s.replicas >= 1, "serve.replicas must be at least 1");
        ensure!(
            s.decode_cost.is_finite() && s.decode_cost > 0.0,
            "serve.decode_cost must be positive"
        );
        ensure!(s.slo.is_finite() && s.slo > 0.0, "serve.slo must be positive");
        ensure!((0.0..=1.0).contains(&s.q_min), "serve.q_min must be in [0, 1]");
        s.cost.to_cost_model().validate().context("serve.cost")?;
        Ok(())
    }

    pub fn resolve(&self, path: &Path) -> PathBuf {
        if path.is_absolute() {
            path.to_path_buf()
        } else {
            self.base_dir.join(path)
        }
    }

    pub fn build_pair(&self) -> Result<(ModelWeights, ModelWeights)> {
        let build = |eps: &Option<Vec<f32>>, seed: u64| -> Result<ModelWeights> {
            let spec = eps.as_ref().map(|e| perturbation(e, seed));
            Ok(build_model(&self.model, spec.as_ref())?)
        };
        let sender = build(&self.pair.sender_eps, self.pair.sender_noise_seed)?;
        let receiver = build(&self.pair.receiver_eps, self.pair.receiver_noise_seed)?;
        Ok((sender, receiver))
    }

    pub fn load_dataset(&self) -> Result<Vec<TokenSequence>> {
        let d = &self.dataset;
        let inputs = if d.files.is_empty() {
            dataset::synthetic(d.seed.unwrap_or(self.seed), d.count, d.length, self.model.vocab_size)
        } else {
            d.files
                .iter()
                .map(|f| {
                    let path = self.resolve(f);
                    dataset::read_token_file(&path).with_context(|| format!("reading {}", path.display()))
                })
                .collect::<Result<_>>()?
        };
        for (i, t) in inputs.iter().enumerate() {
            if let Err(e) = t.validate(&self.model) {
                bail!("dataset input {i}: {e}");
            }
        }
        Ok(inputs)
    }
}

fn perturbation(eps: &[f32], noise_seed: u64) -> PerturbationSpec {
    PerturbationSpec {
        eps: eps.to_vec(),
        noise_seed,
    }
}
