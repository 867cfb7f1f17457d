//! Resumable trainers and the glue between config, corpus and checkpoints.

use std::collections::BTreeMap;

use anyhow::{bail, Result};
use dreamstate::diffusion::{dit_train_step, DiT, DiTConfig, DiffusionSchedule};
use dreamstate::hybrid::{
    joint_train_step, HybridParams, JointLosses, ParamNormalizer, StepOptions,
};
use dreamstate::optim::Sgd;
use dreamstate::rng::{seeded, Rng, RngState};
use dreamstate::rwkv::{lm_train_step, sample_batch, RwkvConfig, RwkvWeights};
use dreamstate::state_pipeline::{
    persona_corpus, tokenize, Normalization, PromptCorpus, StateDataset,
};
use dreamstate::Tensor;
use rand::Rng as _;

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;

/// Corpus from `paths.corpus` if set, else the built-in persona prompts.
pub fn load_corpus(cfg: &RunConfig) -> Result<PromptCorpus> {
    match &cfg.paths.corpus {
        Some(p) => Ok(PromptCorpus::load(p)?),
        None => {
            let cats: Vec<&str> = cfg.data.categories.iter().map(String::as_str).collect();
            Ok(persona_corpus(
                &cats,
                cfg.data.per_category,
                cfg.data.corpus_seed,
            )?)
        }
    }
}

pub fn token_corpus(model: &RwkvConfig, corpus: &PromptCorpus) -> Vec<Vec<usize>> {
    corpus
        .entries()
        .iter()
        .map(|e| tokenize(&e.prompt, model.context_len))
        .filter(|t| t.len() >= 2)
        .collect()
}

fn export_tree(
    out: &mut BTreeMap<String, Tensor>,
    visit: impl FnOnce(&mut dyn FnMut(&str, &Tensor)),
) {
    visit(&mut |name, t| {
        out.insert(name.to_string(), t.clone());
    });
}

/// Overwrites every leaf visited with the same-named checkpoint tensor.
fn import_tree(
    ck: &Checkpoint,
    visit: impl FnOnce(&mut dyn FnMut(&str, &mut Tensor)),
) -> Result<()> {
    let mut failure = None;
    visit(&mut |name, t| {
        if failure.is_some() {
            return;
        }
        match ck.tensor(name) {
            Ok(src) if src.shape() == t.shape() => *t = src.clone(),
            Ok(src) => {
                failure = Some(anyhow::anyhow!(
                    "tensor '{name}' has shape {:?}, expected {:?}",
                    src.shape(),
                    t.shape()
                ))
            }
            Err(e) => failure = Some(e.into()),
        }
    });
    failure.map_or(Ok(()), Err)
}

fn placeholder_rng() -> Rng {
    seeded(0)
}

pub fn lm_fingerprint(model: &RwkvConfig) -> String {
    format!("lm|{}", model.fingerprint())
}

/// Loads just the language model out of an LM or hybrid checkpoint.
pub fn load_lm_weights(model: &RwkvConfig, ck: &Checkpoint) -> Result<RwkvWeights> {
    let hybrid = format!("hybrid|{}|", model.fingerprint());
    if ck.fingerprint != lm_fingerprint(model) && !ck.fingerprint.starts_with(&hybrid) {
        return Err(dreamstate::Error::Fingerprint {
            expected: lm_fingerprint(model),
            found: ck.fingerprint.clone(),
        }
        .into());
    }
    let mut w = RwkvWeights::init(model, &mut placeholder_rng())?;
    import_tree(ck, |f| w.for_each_mut("lm.", f))?;
    Ok(w)
}

pub struct LmTrainer {
    pub model: RwkvConfig,
    pub weights: RwkvWeights,
    pub opt: Sgd,
    pub rng: Rng,
    pub step: u64,
    pub batch_size: usize,
    pub seq_len: usize,
}

impl LmTrainer {
    pub fn new(cfg: &RunConfig, seed: u64) -> Result<Self> {
        let mut rng = seeded(seed);
        let weights = RwkvWeights::init(&cfg.model, &mut rng)?;
        Ok(LmTrainer {
            model: cfg.model.clone(),
            weights,
            opt: Sgd::new(cfg.sgd()),
            rng,
            step: 0,
            batch_size: cfg.training.batch_size,
            seq_len: cfg.training.seq_len,
        })
    }

    pub fn fingerprint(&self) -> String {
        lm_fingerprint(&self.model)
    }

    pub fn step(&mut self, corpus: &[Vec<usize>]) -> Result<f64> {
        let batch = sample_batch(corpus, self.batch_size, self.seq_len, &mut self.rng)?;
        let loss = lm_train_step(
            &self.model,
            &mut self.weights,
            &mut self.opt,
            &batch,
            self.step,
        )?;
        self.step += 1;
        Ok(loss)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut tensors = BTreeMap::new();
        export_tree(&mut tensors, |f| self.weights.for_each("lm.", f));
        Checkpoint {
            fingerprint: self.fingerprint(),
            tensors,
            optimizer: self.opt.velocity().clone(),
            step: self.step,
            rng: RngState::capture(&self.rng),
        }
    }

    pub fn from_checkpoint(cfg: &RunConfig, ck: &Checkpoint) -> Result<Self> {
        let mut t = LmTrainer::new(cfg, 0)?;
        ck.check_fingerprint(&t.fingerprint())?;
        t.weights = load_lm_weights(&cfg.model, ck)?;
        t.opt.set_velocity(ck.optimizer.clone());
        t.rng = ck.rng.restore();
        t.step = ck.step;
        Ok(t)
    }
}

/// Per-dimension standardization of the prompt conditions. Mean byte
/// embeddings of different prompts are nearly parallel, so the DiT sees them
/// z-scored.
pub fn condition_normalization(ds: &StateDataset) -> Result<Normalization> {
    Ok(Normalization::fit(
        ds.records.iter().map(|r| r.condition.as_slice()),
    )?)
}

/// Standardized states and conditions, ready for DiT batches.
pub struct DitData {
    pub x0: Vec<Vec<f64>>,
    pub cond: Vec<Vec<f64>>,
}

impl DitData {
    pub fn from_dataset(ds: &StateDataset) -> Result<Self> {
        let cn = condition_normalization(ds)?;
        Ok(DitData {
            x0: (0..ds.records.len()).map(|i| ds.standardized(i)).collect(),
            cond: ds
                .records
                .iter()
                .map(|r| cn.standardize(&r.condition))
                .collect(),
        })
    }
}

pub fn schedule_fingerprint(s: &DiffusionSchedule) -> String {
    format!("T{}:{:e}:{:e}", s.steps(), s.beta(1), s.beta(s.steps()))
}

pub struct DitTrainer {
    pub dit: DiT,
    pub schedule: DiffusionSchedule,
    pub normalization: Normalization,
    pub cond_normalization: Normalization,
    pub dataset_fingerprint: String,
    pub opt: Sgd,
    pub rng: Rng,
    pub step: u64,
    pub batch_size: usize,
}

impl DitTrainer {
    pub fn new(cfg: &RunConfig, ds: &StateDataset, seed: u64) -> Result<Self> {
        let dit_cfg = cfg.state_dit()?;
        check_dataset(&dit_cfg, ds)?;
        let mut rng = seeded(seed);
        Ok(DitTrainer {
            dit: DiT::new(dit_cfg, &mut rng)?,
            schedule: cfg.schedule()?,
            normalization: ds.normalization.clone(),
            cond_normalization: condition_normalization(ds)?,
            dataset_fingerprint: ds.fingerprint.describe(),
            opt: Sgd::new(cfg.sgd()),
            rng,
            step: 0,
            batch_size: cfg.training.batch_size,
        })
    }

    pub fn fingerprint(&self) -> String {
        format!(
            "state-dit|{}|{}|{}",
            self.dit.config.fingerprint(),
            schedule_fingerprint(&self.schedule),
            self.dataset_fingerprint
        )
    }

    pub fn step(&mut self, data: &DitData) -> Result<f64> {
        if data.x0.is_empty() {
            bail!("no training states");
        }
        let idx: Vec<usize> = (0..self.batch_size)
            .map(|_| self.rng.random_range(0..data.x0.len()))
            .collect();
        let batch: Vec<(&[f64], &[f64])> = idx
            .iter()
            .map(|&i| (data.x0[i].as_slice(), data.cond[i].as_slice()))
            .collect();
        let loss = dit_train_step(
            &mut self.dit,
            &self.schedule,
            &mut self.opt,
            &batch,
            &mut self.rng,
            self.step,
        )?;
        self.step += 1;
        Ok(loss)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut tensors = BTreeMap::new();
        export_tree(&mut tensors, |f| self.dit.weights.for_each("dit.", f));
        export_norm(&mut tensors, "norm", &self.normalization);
        export_norm(&mut tensors, "cond", &self.cond_normalization);
        Checkpoint {
            fingerprint: self.fingerprint(),
            tensors,
            optimizer: self.opt.velocity().clone(),
            step: self.step,
            rng: RngState::capture(&self.rng),
        }
    }

    pub fn from_checkpoint(cfg: &RunConfig, ds: &StateDataset, ck: &Checkpoint) -> Result<Self> {
        let mut t = DitTrainer::new(cfg, ds, 0)?;
        ck.check_fingerprint(&t.fingerprint())?;
        t.dit = load_state_dit(cfg, ck)?.dit;
        t.opt.set_velocity(ck.optimizer.clone());
        t.rng = ck.rng.restore();
        t.step = ck.step;
        Ok(t)
    }
}

fn check_dataset(dit: &DiTConfig, ds: &StateDataset) -> Result<()> {
    if ds.records.is_empty() {
        bail!("dataset has no records");
    }
    if ds.state_len() != dit.input_len || ds.cond_dim() != dit.cond_dim {
        bail!(
            "dataset has states of length {} with {}-dim conditions; the model config expects {} and {}",
            ds.state_len(),
            ds.cond_dim(),
            dit.input_len,
            dit.cond_dim
        );
    }
    Ok(())
}

fn export_norm(out: &mut BTreeMap<String, Tensor>, prefix: &str, n: &Normalization) {
    out.insert(format!("{prefix}.mean"), Tensor::from_vec(n.mean.clone()));
    out.insert(format!("{prefix}.std"), Tensor::from_vec(n.std.clone()));
}

fn import_norm(ck: &Checkpoint, prefix: &str, dim: usize) -> Result<Normalization> {
    let n = Normalization {
        mean: ck.tensor(&format!("{prefix}.mean"))?.data().to_vec(),
        std: ck.tensor(&format!("{prefix}.std"))?.data().to_vec(),
    };
    if n.dim() != dim || n.std.len() != dim {
        bail!("checkpoint normalization '{prefix}' has the wrong length");
    }
    Ok(n)
}

/// State DiT with the state and condition normalizations it was trained under.
pub struct StateDit {
    pub dit: DiT,
    pub norm: Normalization,
    pub cond_norm: Normalization,
}

pub fn load_state_dit(cfg: &RunConfig, ck: &Checkpoint) -> Result<StateDit> {
    if !ck.fingerprint.starts_with("state-dit|") {
        bail!("'{}' is not a state DiT checkpoint", ck.fingerprint);
    }
    let dit_cfg = cfg.state_dit()?;
    let expected = format!(
        "state-dit|{}|{}|",
        dit_cfg.fingerprint(),
        schedule_fingerprint(&cfg.schedule()?)
    );
    if !ck.fingerprint.starts_with(&expected) {
        return Err(dreamstate::Error::Fingerprint {
            expected,
            found: ck.fingerprint.clone(),
        }
        .into());
    }
    let mut dit = DiT::new(dit_cfg, &mut placeholder_rng())?;
    import_tree(ck, |f| dit.weights.for_each_mut("dit.", f))?;
    let norm = import_norm(ck, "norm", dit.config.input_len)?;
    let cond_norm = import_norm(ck, "cond", dit.config.cond_dim)?;
    Ok(StateDit {
        dit,
        norm,
        cond_norm,
    })
}

pub struct HybridTrainer {
    pub model: RwkvConfig,
    pub weights: RwkvWeights,
    pub hybrid: HybridParams,
    pub schedule: DiffusionSchedule,
    pub opt: Sgd,
    pub rng: Rng,
    pub step: u64,
    pub batch_size: usize,
    pub seq_len: usize,
    pub options: StepOptions,
}

impl HybridTrainer {
    /// Starts from `base` weights when given, else from a fresh model.
    pub fn new(cfg: &RunConfig, base: Option<RwkvWeights>, seed: u64) -> Result<Self> {
        let mut rng = seeded(seed);
        let weights = match base {
            Some(w) => {
                w.check(&cfg.model)?;
                w
            }
            None => RwkvWeights::init(&cfg.model, &mut rng)?,
        };
        let hybrid =
            HybridParams::new(&cfg.model, cfg.hybrid_config()?, cfg.param_dit()?, &mut rng)?;
        Ok(HybridTrainer {
            model: cfg.model.clone(),
            weights,
            hybrid,
            schedule: cfg.schedule()?,
            opt: Sgd::new(cfg.sgd()),
            rng,
            step: 0,
            batch_size: cfg.training.batch_size,
            seq_len: cfg.training.seq_len,
            options: StepOptions::default(),
        })
    }

    pub fn fingerprint(&self) -> String {
        hybrid_fingerprint(
            &self.model,
            &self.hybrid.param_dit.config,
            &self.schedule,
            self.hybrid.config.layer,
        )
    }

    pub fn step(&mut self, corpus: &[Vec<usize>]) -> Result<JointLosses> {
        let batch = sample_batch(corpus, self.batch_size, self.seq_len, &mut self.rng)?;
        let losses = joint_train_step(
            &self.model,
            &mut self.weights,
            &mut self.hybrid,
            &self.schedule,
            &mut self.opt,
            &batch,
            &mut self.rng,
            self.step,
            self.options,
        )?;
        self.step += 1;
        Ok(losses)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut tensors = BTreeMap::new();
        export_tree(&mut tensors, |f| self.weights.for_each("lm.", f));
        export_tree(&mut tensors, |f| {
            self.hybrid.param_dit.weights.for_each("pdit.", f)
        });
        tensors.insert(
            "hybrid.alpha_logit".into(),
            Tensor::from_vec(vec![self.hybrid.alpha_logit]),
        );
        let n = &self.hybrid.normalizer;
        tensors.insert(
            "hybrid.normalizer".into(),
            Tensor::from_vec(vec![n.mean, n.std, n.count as f64]),
        );
        Checkpoint {
            fingerprint: self.fingerprint(),
            tensors,
            optimizer: self.opt.velocity().clone(),
            step: self.step,
            rng: RngState::capture(&self.rng),
        }
    }

    pub fn from_checkpoint(cfg: &RunConfig, ck: &Checkpoint) -> Result<Self> {
        let mut t = HybridTrainer::new(cfg, None, 0)?;
        ck.check_fingerprint(&t.fingerprint())?;
        let (weights, hybrid) = load_hybrid(cfg, ck)?;
        t.weights = weights;
        t.hybrid = hybrid;
        t.opt.set_velocity(ck.optimizer.clone());
        t.rng = ck.rng.restore();
        t.step = ck.step;
        Ok(t)
    }
}

pub fn hybrid_fingerprint(
    model: &RwkvConfig,
    pdit: &DiTConfig,
    s: &DiffusionSchedule,
    layer: usize,
) -> String {
    format!(
        "hybrid|{}|{}|{}|layer{layer}",
        model.fingerprint(),
        pdit.fingerprint(),
        schedule_fingerprint(s)
    )
}

pub fn load_hybrid(cfg: &RunConfig, ck: &Checkpoint) -> Result<(RwkvWeights, HybridParams)> {
    let hc = cfg.hybrid_config()?;
    let pdit = cfg.param_dit()?;
    ck.check_fingerprint(&hybrid_fingerprint(
        &cfg.model,
        &pdit,
        &cfg.schedule()?,
        hc.layer,
    ))?;
    let mut weights = RwkvWeights::init(&cfg.model, &mut placeholder_rng())?;
    import_tree(ck, |f| weights.for_each_mut("lm.", f))?;
    let mut hybrid = HybridParams::new(&cfg.model, hc, pdit, &mut placeholder_rng())?;
    import_tree(ck, |f| hybrid.param_dit.weights.for_each_mut("pdit.", f))?;
    let a = ck.tensor("hybrid.alpha_logit")?.data();
    let n = ck.tensor("hybrid.normalizer")?.data();
    if a.len() != 1 || n.len() != 3 {
        bail!("malformed hybrid scalars in checkpoint");
    }
    hybrid.alpha_logit = a[0];
    hybrid.normalizer = ParamNormalizer {
        mean: n[0],
        std: n[1],
        count: n[2] as u64,
    };
    Ok((weights, hybrid))
}
