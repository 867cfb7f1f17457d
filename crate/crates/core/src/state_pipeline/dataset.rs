use std::path::Path;

use sha2::{Digest, Sha256};

use super::corpus::PromptCorpus;
use super::flatten::flatten_state;
use super::tokenize::tokenize;
use crate::binio::{write_atomic, Reader, Writer};
use crate::error::{Error, Result};
use crate::rwkv::{forward, RwkvConfig, RwkvWeights};

pub const DATASET_MAGIC: &[u8; 8] = b"DSSTATE1";
pub const DATASET_VERSION: u32 = 1;

/// Smallest standard deviation used when standardizing.
pub const STD_FLOOR: f64 = 1e-8;

/// One extracted (prompt, condition, final state) sample.
#[derive(Clone, Debug, PartialEq)]
pub struct StateRecord {
    pub record_id: u64,
    pub category: String,
    pub prompt_text: String,
    /// Mean of the prompt's token embeddings.
    pub condition: Vec<f64>,
    pub s_flat: Vec<f64>,
    pub layer_index: usize,
}

/// Per-dimension affine map to zero mean and unit variance.
#[derive(Clone, Debug, PartialEq)]
pub struct Normalization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalization {
    /// Population moments of `rows`; standard deviations are floored at
    /// [`STD_FLOOR`].
    pub fn fit<'a>(rows: impl IntoIterator<Item = &'a [f64]>) -> Result<Self> {
        let rows: Vec<&[f64]> = rows.into_iter().collect();
        let first = rows
            .first()
            .ok_or_else(|| Error::invalid("cannot fit normalization to no data"))?;
        let dim = first.len();
        if rows.iter().any(|r| r.len() != dim) {
            return Err(Error::invalid("rows of unequal length"));
        }
        let n = rows.len() as f64;
        let mut mean = vec![0.0; dim];
        for r in &rows {
            for (m, x) in mean.iter_mut().zip(*r) {
                *m += x;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; dim];
        for r in &rows {
            for ((v, x), m) in var.iter_mut().zip(*r).zip(&mean) {
                *v += (x - m) * (x - m);
            }
        }
        let std = var.iter().map(|v| (v / n).sqrt().max(STD_FLOOR)).collect();
        Ok(Normalization { mean, std })
    }

    pub fn identity(dim: usize) -> Self {
        Normalization {
            mean: vec![0.0; dim],
            std: vec![1.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn standardize(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(&self.mean)
            .zip(&self.std)
            .map(|((v, m), s)| (v - m) / s)
            .collect()
    }

    pub fn destandardize(&self, z: &[f64]) -> Vec<f64> {
        z.iter()
            .zip(&self.mean)
            .zip(&self.std)
            .map(|((v, m), s)| v * s + m)
            .collect()
    }
}

/// Identifies the model and layer a dataset was extracted from.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetFingerprint {
    pub n_heads: u32,
    pub head_dim: u32,
    pub n_layers: u32,
    pub layer_index: u32,
    pub model_hash: [u8; 32],
}

impl DatasetFingerprint {
    pub fn new(cfg: &RwkvConfig, weights: &RwkvWeights, layer_index: usize) -> Self {
        DatasetFingerprint {
            n_heads: cfg.n_heads as u32,
            head_dim: cfg.head_dim as u32,
            n_layers: cfg.n_layers as u32,
            layer_index: layer_index as u32,
            model_hash: model_hash(cfg, weights),
        }
    }

    pub fn describe(&self) -> String {
        let hash: String = self.model_hash[..8]
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect();
        format!(
            "h{}xd{}/l{}@{}/{}",
            self.n_heads, self.head_dim, self.n_layers, self.layer_index, hash
        )
    }
}

/// SHA-256 over the config and every named weight tensor.
pub fn model_hash(cfg: &RwkvConfig, weights: &RwkvWeights) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(cfg.fingerprint().as_bytes());
    weights.for_each("", &mut |name, t| {
        h.update(name.as_bytes());
        for d in t.shape() {
            h.update((*d as u64).to_le_bytes());
        }
        for v in t.data() {
            h.update(v.to_le_bytes());
        }
    });
    h.finalize().into()
}

#[derive(Clone, Debug, PartialEq)]
pub struct StateDataset {
    pub records: Vec<StateRecord>,
    pub normalization: Normalization,
    pub fingerprint: DatasetFingerprint,
}

impl StateDataset {
    pub fn state_len(&self) -> usize {
        self.normalization.dim()
    }

    pub fn cond_dim(&self) -> usize {
        self.records.first().map_or(0, |r| r.condition.len())
    }

    pub fn categories(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for r in &self.records {
            if !out.contains(&r.category) {
                out.push(r.category.clone());
            }
        }
        out
    }

    pub fn standardized(&self, i: usize) -> Vec<f64> {
        self.normalization.standardize(&self.records[i].s_flat)
    }

    pub fn check_fingerprint(&self, expected: &DatasetFingerprint) -> Result<()> {
        if &self.fingerprint != expected {
            return Err(Error::Fingerprint {
                expected: expected.describe(),
                found: self.fingerprint.describe(),
            });
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new();
        let fp = &self.fingerprint;
        w.bytes(DATASET_MAGIC)
            .u32(DATASET_VERSION)
            .u32(fp.n_heads)
            .u32(fp.head_dim)
            .u32(fp.n_layers)
            .u32(fp.layer_index)
            .bytes(&fp.model_hash)
            .u64(self.records.len() as u64);
        for r in &self.records {
            w.u64(r.record_id)
                .str(&r.category)
                .str(&r.prompt_text)
                .u32(r.layer_index as u32)
                .f64s(&r.condition)
                .f64s(&r.s_flat);
        }
        w.f64s(&self.normalization.mean)
            .f64s(&self.normalization.std);
        w.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        if r.take(8)? != DATASET_MAGIC {
            return Err(Error::Format("not a state dataset (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != DATASET_VERSION {
            return Err(Error::Format(format!(
                "unsupported dataset version {version}"
            )));
        }
        let n_heads = r.u32()?;
        let head_dim = r.u32()?;
        let n_layers = r.u32()?;
        let layer_index = r.u32()?;
        let mut model_hash = [0u8; 32];
        model_hash.copy_from_slice(r.take(32)?);
        let fingerprint = DatasetFingerprint {
            n_heads,
            head_dim,
            n_layers,
            layer_index,
            model_hash,
        };
        let count = r.u64()?;
        let state_len = (n_heads * head_dim * head_dim) as usize;
        let mut records = Vec::new();
        for _ in 0..count {
            let rec = StateRecord {
                record_id: r.u64()?,
                category: r.str()?,
                prompt_text: r.str()?,
                layer_index: r.u32()? as usize,
                condition: r.f64s()?,
                s_flat: r.f64s()?,
            };
            if rec.s_flat.len() != state_len || rec.layer_index != layer_index as usize {
                return Err(Error::Format(format!(
                    "record {} does not match the dataset fingerprint",
                    rec.record_id
                )));
            }
            records.push(rec);
        }
        let normalization = Normalization {
            mean: r.f64s()?,
            std: r.f64s()?,
        };
        r.expect_end()?;
        if normalization.mean.len() != state_len || normalization.std.len() != state_len {
            return Err(Error::Format("normalization length mismatch".into()));
        }
        Ok(StateDataset {
            records,
            normalization,
            fingerprint,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        StateDataset::from_bytes(&bytes)
    }
}

/// Mean of the embedding rows of `tokens`.
pub fn prompt_condition(weights: &RwkvWeights, tokens: &[usize]) -> Vec<f64> {
    let (_, d) = weights.embedding.dims2().expect("embedding matrix");
    let mut c = vec![0.0; d];
    for &t in tokens {
        for (acc, x) in c
            .iter_mut()
            .zip(&weights.embedding.data()[t * d..(t + 1) * d])
        {
            *acc += x;
        }
    }
    c.iter_mut().for_each(|v| *v /= tokens.len() as f64);
    c
}

/// Runs every prompt and keeps layer `layer_index`'s final state.
///
/// Returns the dataset and the number of prompts skipped because they
/// tokenized to nothing.
pub fn extract_states(
    cfg: &RwkvConfig,
    weights: &RwkvWeights,
    corpus: &PromptCorpus,
    layer_index: usize,
) -> Result<(StateDataset, usize)> {
    if corpus.is_empty() {
        return Err(Error::invalid("cannot extract states from an empty corpus"));
    }
    if layer_index >= cfg.n_layers {
        return Err(Error::invalid(format!(
            "layer {layer_index} out of range for {} layers",
            cfg.n_layers
        )));
    }
    weights.check(cfg)?;
    let mut records = Vec::with_capacity(corpus.len());
    let mut skipped = 0;
    for entry in corpus.entries() {
        let tokens = tokenize(&entry.prompt, cfg.context_len);
        if tokens.is_empty() {
            skipped += 1;
            continue;
        }
        let (_, states) = forward(cfg, weights, &tokens)?;
        records.push(StateRecord {
            record_id: records.len() as u64,
            category: entry.category.clone(),
            prompt_text: entry.prompt.clone(),
            condition: prompt_condition(weights, &tokens),
            s_flat: flatten_state(&states[layer_index]),
            layer_index,
        });
    }
    if skipped > 0 {
        log::warn!("skipped {skipped} prompts with no tokens");
    }
    if records.is_empty() {
        return Err(Error::invalid("no prompt produced any tokens"));
    }
    let normalization = Normalization::fit(records.iter().map(|r| r.s_flat.as_slice()))?;
    Ok((
        StateDataset {
            records,
            normalization,
            fingerprint: DatasetFingerprint::new(cfg, weights, layer_index),
        },
        skipped,
    ))
}
