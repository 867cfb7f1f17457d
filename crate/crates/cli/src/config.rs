//! Flat `section.key=value` run configuration.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use dreamstate::diffusion::{DiTConfig, DiffusionSchedule};
use dreamstate::hybrid::HybridConfig;
use dreamstate::optim::SgdConfig;
use dreamstate::rwkv::RwkvConfig;

pub const SEED_ENV: &str = "DREAMSTATE_SEED";

trait ConfigValue: Sized {
    fn parse_value(s: &str) -> Result<Self, String>;
    fn render(&self) -> String;
}

macro_rules! from_str_value {
    ($($t:ty),*) => {$(
        impl ConfigValue for $t {
            fn parse_value(s: &str) -> Result<Self, String> {
                s.parse().map_err(|e| format!("{e}"))
            }
            fn render(&self) -> String {
                self.to_string()
            }
        }
    )*};
}
from_str_value!(usize, u64, f64, String);

impl ConfigValue for PathBuf {
    fn parse_value(s: &str) -> Result<Self, String> {
        Ok(PathBuf::from(s))
    }
    fn render(&self) -> String {
        self.display().to_string()
    }
}

impl<T: ConfigValue> ConfigValue for Option<T> {
    fn parse_value(s: &str) -> Result<Self, String> {
        if s.is_empty() {
            Ok(None)
        } else {
            T::parse_value(s).map(Some)
        }
    }
    fn render(&self) -> String {
        self.as_ref().map(T::render).unwrap_or_default()
    }
}

impl ConfigValue for Vec<String> {
    fn parse_value(s: &str) -> Result<Self, String> {
        Ok(s.split(',')
            .map(|p| p.trim().to_string())
            .filter(|p| !p.is_empty())
            .collect())
    }
    fn render(&self) -> String {
        self.join(",")
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DiffusionSection {
    pub steps: usize,
    pub beta_1: f64,
    pub beta_t: f64,
    pub patch_size: usize,
    pub depth: usize,
    pub width: usize,
    pub n_heads: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct HybridSection {
    pub lambda_1: f64,
    pub lambda_2: f64,
    pub gen_steps: usize,
    pub alpha_init: f64,
    /// Defaults to the last layer.
    pub layer: Option<usize>,
    pub patch_size: usize,
    pub depth: usize,
    pub width: usize,
    pub n_heads: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainingSection {
    pub steps: u64,
    pub batch_size: usize,
    pub seq_len: usize,
    pub lr: f64,
    pub momentum: f64,
    /// Global gradient-norm cap; 0 disables clipping.
    pub clip: f64,
    pub seed: Option<u64>,
    pub log_every: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DataSection {
    pub categories: Vec<String>,
    pub per_category: usize,
    pub corpus_seed: u64,
    /// Defaults to the last layer.
    pub layer_index: Option<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PathsSection {
    pub corpus: Option<PathBuf>,
    pub dataset: Option<PathBuf>,
    pub lm_checkpoint: Option<PathBuf>,
    pub dit_checkpoint: Option<PathBuf>,
    pub hybrid_checkpoint: Option<PathBuf>,
    pub output: PathBuf,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: RwkvConfig,
    pub diffusion: DiffusionSection,
    pub hybrid: HybridSection,
    pub training: TrainingSection,
    pub data: DataSection,
    pub paths: PathsSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: RwkvConfig::default(),
            diffusion: DiffusionSection {
                steps: 200,
                beta_1: 1e-4,
                beta_t: 0.02,
                patch_size: 4,
                depth: 6,
                width: 128,
                n_heads: 4,
            },
            hybrid: HybridSection {
                lambda_1: 1.0,
                lambda_2: 0.1,
                gen_steps: 4,
                alpha_init: 0.9,
                layer: None,
                patch_size: 4,
                depth: 6,
                width: 128,
                n_heads: 4,
            },
            training: TrainingSection {
                steps: 1000,
                batch_size: 8,
                seq_len: 64,
                lr: 3e-4,
                momentum: 0.9,
                clip: 1.0,
                seed: None,
                log_every: 50,
            },
            data: DataSection {
                categories: dreamstate::state_pipeline::persona_categories()
                    .iter()
                    .map(|s| s.to_string())
                    .collect(),
                per_category: 40,
                corpus_seed: 0,
                layer_index: None,
            },
            paths: PathsSection {
                corpus: None,
                dataset: None,
                lm_checkpoint: None,
                dit_checkpoint: None,
                hybrid_checkpoint: None,
                output: PathBuf::from("runs"),
            },
        }
    }
}

macro_rules! config_keys {
    ($($key:literal => $($field:ident).+;)*) => {
        impl RunConfig {
            /// Every key, in file order.
            pub const KEYS: &'static [&'static str] = &[$($key),*];

            /// Sets one `section.key` from its text form.
            pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
                let value = value.trim();
                match key.trim() {
                    $($key => {
                        self.$($field).+ = ConfigValue::parse_value(value)
                            .map_err(|e| anyhow::anyhow!("bad value '{value}' for {key}: {e}"))?;
                    })*
                    other => bail!("unknown config key '{other}'"),
                }
                Ok(())
            }

            pub fn entries(&self) -> Vec<(&'static str, String)> {
                vec![$(($key, ConfigValue::render(&self.$($field).+))),*]
            }
        }
    };
}

config_keys! {
    "model.vocab_size" => model.vocab_size;
    "model.d_model" => model.d_model;
    "model.n_heads" => model.n_heads;
    "model.head_dim" => model.head_dim;
    "model.n_layers" => model.n_layers;
    "model.context_len" => model.context_len;
    "diffusion.steps" => diffusion.steps;
    "diffusion.beta_1" => diffusion.beta_1;
    "diffusion.beta_t" => diffusion.beta_t;
    "diffusion.patch_size" => diffusion.patch_size;
    "diffusion.depth" => diffusion.depth;
    "diffusion.width" => diffusion.width;
    "diffusion.n_heads" => diffusion.n_heads;
    "hybrid.lambda_1" => hybrid.lambda_1;
    "hybrid.lambda_2" => hybrid.lambda_2;
    "hybrid.gen_steps" => hybrid.gen_steps;
    "hybrid.alpha_init" => hybrid.alpha_init;
    "hybrid.layer" => hybrid.layer;
    "hybrid.patch_size" => hybrid.patch_size;
    "hybrid.depth" => hybrid.depth;
    "hybrid.width" => hybrid.width;
    "hybrid.n_heads" => hybrid.n_heads;
    "training.steps" => training.steps;
    "training.batch_size" => training.batch_size;
    "training.seq_len" => training.seq_len;
    "training.lr" => training.lr;
    "training.momentum" => training.momentum;
    "training.clip" => training.clip;
    "training.seed" => training.seed;
    "training.log_every" => training.log_every;
    "data.categories" => data.categories;
    "data.per_category" => data.per_category;
    "data.corpus_seed" => data.corpus_seed;
    "data.layer_index" => data.layer_index;
    "paths.corpus" => paths.corpus;
    "paths.dataset" => paths.dataset;
    "paths.lm_checkpoint" => paths.lm_checkpoint;
    "paths.dit_checkpoint" => paths.dit_checkpoint;
    "paths.hybrid_checkpoint" => paths.hybrid_checkpoint;
    "paths.output" => paths.output;
}

impl RunConfig {
    /// Applies `key=value` lines; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .with_context(|| format!("line {}: expected key=value", n + 1))?;
            self.set(k, v).with_context(|| format!("line {}", n + 1))?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text =
            std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let mut cfg = RunConfig::default();
        cfg.apply_text(&text)
            .with_context(|| format!("in {}", path.display()))?;
        Ok(cfg)
    }

    pub fn to_text(&self) -> String {
        self.entries()
            .into_iter()
            .map(|(k, v)| format!("{k}={v}\n"))
            .collect()
    }

    /// Seed from the config, else `DREAMSTATE_SEED`, else 0.
    pub fn resolve_seed(&mut self) -> Result<u64> {
        if let Some(s) = self.training.seed {
            return Ok(s);
        }
        let seed = match std::env::var(SEED_ENV) {
            Ok(v) => v
                .trim()
                .parse()
                .with_context(|| format!("{SEED_ENV}={v} is not an unsigned integer"))?,
            Err(_) => 0,
        };
        self.training.seed = Some(seed);
        Ok(seed)
    }

    pub fn seed(&self) -> u64 {
        self.training.seed.unwrap_or(0)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.schedule()?;
        self.state_dit()?.validate()?;
        self.param_dit()?.validate()?;
        self.hybrid_config()?.validate(&self.model)?;
        if self.training.batch_size == 0 || self.training.seq_len == 0 {
            bail!("training.batch_size and training.seq_len must be positive");
        }
        if self.training.lr.is_nan()
            || self.training.lr <= 0.0
            || !(0.0..1.0).contains(&self.training.momentum)
            || self.training.clip < 0.0
        {
            bail!("need lr > 0, momentum in [0, 1) and clip >= 0");
        }
        if let Some(l) = self.data.layer_index {
            if l >= self.model.n_layers {
                bail!("data.layer_index {l} out of range");
            }
        }
        Ok(())
    }

    pub fn schedule(&self) -> Result<DiffusionSchedule> {
        let d = &self.diffusion;
        Ok(DiffusionSchedule::linear(d.steps, d.beta_1, d.beta_t)?)
    }

    pub fn state_dit(&self) -> Result<DiTConfig> {
        let d = &self.diffusion;
        Ok(DiTConfig {
            patch_size: d.patch_size,
            depth: d.depth,
            width: d.width,
            n_heads: d.n_heads,
            cond_dim: self.model.d_model,
            input_len: self.model.state_len(),
        })
    }

    pub fn param_dit(&self) -> Result<DiTConfig> {
        let h = &self.hybrid;
        Ok(DiTConfig {
            patch_size: h.patch_size,
            depth: h.depth,
            width: h.width,
            n_heads: h.n_heads,
            cond_dim: self.model.d_model,
            input_len: dreamstate::hybrid::theta_len(&self.model),
        })
    }

    pub fn hybrid_config(&self) -> Result<HybridConfig> {
        let h = &self.hybrid;
        Ok(HybridConfig {
            lambda_1: h.lambda_1,
            lambda_2: h.lambda_2,
            gen_steps: h.gen_steps,
            alpha_init: h.alpha_init,
            layer: h.layer.unwrap_or(self.model.n_layers - 1),
            ..HybridConfig::for_model(&self.model)
        })
    }

    pub fn sgd(&self) -> SgdConfig {
        SgdConfig {
            lr: self.training.lr,
            momentum: self.training.momentum,
            clip_norm: (self.training.clip > 0.0).then_some(self.training.clip),
        }
    }

    pub fn layer_index(&self) -> usize {
        self.data.layer_index.unwrap_or(self.model.n_layers - 1)
    }
}
