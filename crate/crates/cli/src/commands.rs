//! Subcommand implementations.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use dreamstate::analysis::{
    cluster_metrics, csv_string, fmt_f64, pca_projection, projection_rows, scatter_svg, silhouette,
    tsne_project, TsneParams,
};
use dreamstate::diffusion::{
    ddpm_sample, interpolate_noise, structured_noise, DiT, NoiseSpec, SamplerMode,
};
use dreamstate::hybrid::hybrid_logits;
use dreamstate::rng::{normal_vec, seeded};
use dreamstate::rwkv::{forward, generate, lm_loss, InitialState, RwkvWeights};
use dreamstate::state_pipeline::{
    detokenize, extract_states, prompt_condition, tokenize, unflatten_state, DatasetFingerprint,
    Normalization, StateDataset, StateRecord,
};

use crate::checkpoint::Checkpoint;
use crate::cli::{Cli, Command, GenArgs, Method, ModelArgs, NoiseArgs, TrainArgs};
use crate::config::RunConfig;
use crate::pipeline::{
    load_corpus, load_hybrid, load_lm_weights, load_state_dit, token_corpus, DitData, DitTrainer,
    HybridTrainer, LmTrainer, StateDit,
};
use crate::run_dir::RunDir;

/// Config file, then `--set` overrides, then `--seed`, then the seed fallbacks.
pub fn resolve_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    for kv in &cli.set {
        let (k, v) = kv
            .split_once('=')
            .with_context(|| format!("--set expects KEY=VALUE, got '{kv}'"))?;
        cfg.set(k, v)?;
    }
    if let Some(s) = cli.seed {
        cfg.training.seed = Some(s);
    }
    cfg.resolve_seed()?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn execute(cli: &Cli) -> Result<PathBuf> {
    let cfg = resolve_config(cli)?;
    let mut run = RunDir::create(
        &cfg.paths.output,
        cli.run_dir.as_deref(),
        cli.command.name(),
        cfg.seed(),
    )?;
    run.write_text("config.txt", &cfg.to_text())?;
    match &cli.command {
        Command::TrainLm(args) => train_lm(&cfg, args, &mut run)?,
        Command::ExtractStates { lm } => extract(&cfg, lm.as_deref(), &mut run)?,
        Command::TrainStateDit { dataset, train } => {
            train_state_dit(&cfg, dataset.as_deref(), train, &mut run)?
        }
        Command::SampleState {
            prompt,
            deterministic,
            models,
            noise,
            gen,
        } => sample_state(&cfg, prompt, *deterministic, models, noise, gen, &mut run)?,
        Command::Interpolate {
            prompt_a,
            prompt_b,
            lambdas,
            models,
            noise,
            gen,
        } => interpolate(
            &cfg,
            [prompt_a, prompt_b],
            lambdas,
            models,
            noise,
            gen,
            &mut run,
        )?,
        Command::TrainHybrid { lm, train } => train_hybrid(&cfg, lm.as_deref(), train, &mut run)?,
        Command::Analyze {
            dataset,
            method,
            perplexity,
            iterations,
        } => analyze(
            &cfg,
            dataset.as_deref(),
            *method,
            *perplexity,
            *iterations,
            &mut run,
        )?,
        Command::Eval { lm, hybrid } => eval(&cfg, lm.as_deref(), hybrid.as_deref(), &mut run)?,
    }
    run.finish()?;
    Ok(run.path)
}

fn need<'a>(flag: Option<&'a Path>, fallback: &'a Option<PathBuf>, what: &str) -> Result<&'a Path> {
    flag.or(fallback.as_deref())
        .with_context(|| format!("no {what} given (pass the flag or set it in the config)"))
}

fn steps_for(cfg: &RunConfig, args: &TrainArgs) -> u64 {
    args.steps.unwrap_or(cfg.training.steps)
}

fn log_progress(cfg: &RunConfig, step: u64, what: &str) {
    if cfg.training.log_every > 0 && step.is_multiple_of(cfg.training.log_every) {
        log::info!("step {step}: {what}");
    }
}

fn write_csv(run: &mut RunDir, name: &str, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let text = csv_string(header, rows)?;
    run.write_text(name, &text)?;
    Ok(())
}

fn save_checkpoint(run: &mut RunDir, name: &str, ck: &Checkpoint) -> Result<()> {
    ck.save(&run.file(name))?;
    run.add(name);
    run.set_fingerprint(ck.fingerprint.clone());
    Ok(())
}

fn train_lm(cfg: &RunConfig, args: &TrainArgs, run: &mut RunDir) -> Result<()> {
    let corpus = token_corpus(&cfg.model, &load_corpus(cfg)?);
    let mut t = match &args.resume {
        Some(p) => LmTrainer::from_checkpoint(cfg, &Checkpoint::load(p)?)?,
        None => LmTrainer::new(cfg, cfg.seed())?,
    };
    let mut rows = Vec::new();
    for _ in 0..steps_for(cfg, args) {
        let step = t.step;
        let loss = t.step(&corpus)?;
        log_progress(cfg, step, &format!("lm loss {loss:.4}"));
        rows.push(vec![step.to_string(), fmt_f64(loss)]);
    }
    save_checkpoint(run, "lm.ckpt", &t.to_checkpoint())?;
    write_csv(run, "lm_losses.csv", &["step", "lm_loss"], &rows)
}

fn load_lm(cfg: &RunConfig, flag: Option<&Path>) -> Result<RwkvWeights> {
    let p = need(
        flag,
        &cfg.paths.lm_checkpoint,
        "language model checkpoint (--lm)",
    )?;
    let ck = Checkpoint::load(p)?;
    load_lm_weights(&cfg.model, &ck)
}

fn extract(cfg: &RunConfig, lm: Option<&Path>, run: &mut RunDir) -> Result<()> {
    let weights = load_lm(cfg, lm)?;
    let corpus = load_corpus(cfg)?;
    let (ds, skipped) = extract_states(&cfg.model, &weights, &corpus, cfg.layer_index())?;
    log::info!(
        "extracted {} states ({skipped} prompts skipped)",
        ds.records.len()
    );
    ds.save(&run.file("states.dsstate"))?;
    run.add("states.dsstate");
    corpus.save(&run.file("corpus.tsv"))?;
    run.add("corpus.tsv");
    run.set_fingerprint(ds.fingerprint.describe());
    Ok(())
}

fn load_dataset(cfg: &RunConfig, flag: Option<&Path>) -> Result<StateDataset> {
    let p = need(flag, &cfg.paths.dataset, "state dataset (--dataset)")?;
    Ok(StateDataset::load(p)?)
}

fn train_state_dit(
    cfg: &RunConfig,
    dataset: Option<&Path>,
    args: &TrainArgs,
    run: &mut RunDir,
) -> Result<()> {
    let ds = load_dataset(cfg, dataset)?;
    let data = DitData::from_dataset(&ds)?;
    let mut t = match &args.resume {
        Some(p) => DitTrainer::from_checkpoint(cfg, &ds, &Checkpoint::load(p)?)?,
        None => DitTrainer::new(cfg, &ds, cfg.seed())?,
    };
    let mut rows = Vec::new();
    for _ in 0..steps_for(cfg, args) {
        let step = t.step;
        let loss = t.step(&data)?;
        log_progress(cfg, step, &format!("diffusion loss {loss:.4}"));
        rows.push(vec![step.to_string(), fmt_f64(loss)]);
    }
    save_checkpoint(run, "dit.ckpt", &t.to_checkpoint())?;
    write_csv(run, "dit_losses.csv", &["step", "diffusion_loss"], &rows)
}

/// Everything needed to turn a prompt into a sampled state.
pub struct StateSampler {
    pub cfg: RunConfig,
    pub weights: RwkvWeights,
    pub dit: DiT,
    pub norm: Normalization,
    pub cond_norm: Normalization,
    pub fingerprint: DatasetFingerprint,
}

impl StateSampler {
    pub fn load(cfg: &RunConfig, models: &ModelArgs) -> Result<Self> {
        let weights = load_lm(cfg, models.lm.as_deref())?;
        let p = need(
            models.dit.as_deref(),
            &cfg.paths.dit_checkpoint,
            "state DiT checkpoint (--dit)",
        )?;
        let ck = Checkpoint::load(p)?;
        let StateDit {
            dit,
            norm,
            cond_norm,
        } = load_state_dit(cfg, &ck)?;
        let fingerprint = DatasetFingerprint::new(&cfg.model, &weights, cfg.layer_index());
        if !ck
            .fingerprint
            .ends_with(&format!("|{}", fingerprint.describe()))
        {
            bail!(
                "state DiT was trained on states of another model ({}); this language model is {}",
                ck.fingerprint,
                fingerprint.describe()
            );
        }
        Ok(StateSampler {
            cfg: cfg.clone(),
            weights,
            dit,
            norm,
            cond_norm,
            fingerprint,
        })
    }

    pub fn condition(&self, prompt: &str) -> Result<(Vec<usize>, Vec<f64>)> {
        let tokens = tokenize(prompt, self.cfg.model.context_len);
        if tokens.is_empty() {
            bail!("prompt is empty");
        }
        let c = prompt_condition(&self.weights, &tokens);
        Ok((tokens, c))
    }

    pub fn noise(&self, seed: u64, args: &NoiseArgs) -> Result<Vec<f64>> {
        let spec = NoiseSpec {
            mode: args.noise,
            strength: args.noise_strength,
        };
        Ok(structured_noise(
            seed,
            spec,
            self.dit.config.input_len,
            self.dit.config.patch_size,
        )?)
    }

    /// Raw (de-standardized) state for the raw condition `c` from starting
    /// noise `x_t`.
    pub fn sample(&self, c: &[f64], x_t: &[f64], mode: SamplerMode, seed: u64) -> Result<Vec<f64>> {
        if c.len() != self.cond_norm.dim() {
            bail!(
                "condition has length {}, expected {}",
                c.len(),
                self.cond_norm.dim()
            );
        }
        let schedule = self.cfg.schedule()?;
        let mut rng = seeded(seed);
        Ok(ddpm_sample(
            &self.dit,
            &schedule,
            &self.cond_norm.standardize(c),
            &self.norm,
            Some(x_t),
            mode,
            &mut rng,
        )?)
    }

    pub fn generate(
        &self,
        tokens: &[usize],
        s_flat: &[f64],
        gen: &GenArgs,
        seed: u64,
    ) -> Result<String> {
        let m = &self.cfg.model;
        let layer = self.cfg.layer_index();
        let state = unflatten_state(s_flat, m.n_heads, m.head_dim, layer)?;
        let init = InitialState {
            layer,
            state: &state,
        };
        let mut rng = seeded(seed);
        let out = generate(
            m,
            &self.weights,
            tokens,
            Some(&init),
            gen.generate,
            gen.temperature,
            &mut rng,
        )?;
        Ok(detokenize(&out))
    }

    pub fn record(
        &self,
        id: u64,
        category: &str,
        prompt: &str,
        c: Vec<f64>,
        s_flat: Vec<f64>,
    ) -> StateRecord {
        StateRecord {
            record_id: id,
            category: category.to_string(),
            prompt_text: prompt.to_string(),
            condition: c,
            s_flat,
            layer_index: self.cfg.layer_index(),
        }
    }

    pub fn dataset(&self, records: Vec<StateRecord>) -> StateDataset {
        StateDataset {
            records,
            normalization: self.norm.clone(),
            fingerprint: self.fingerprint.clone(),
        }
    }
}

/// Seed of the ancestral sampler's per-step noise, kept apart from the
/// starting-noise seed.
fn sampler_seed(seed: u64) -> u64 {
    seed ^ 0x5eed_0001
}

fn generation_seed(seed: u64) -> u64 {
    seed ^ 0x5eed_0002
}

fn sample_state(
    cfg: &RunConfig,
    prompt: &str,
    deterministic: bool,
    models: &ModelArgs,
    noise: &NoiseArgs,
    gen: &GenArgs,
    run: &mut RunDir,
) -> Result<()> {
    let s = StateSampler::load(cfg, models)?;
    let seed = cfg.seed();
    let (tokens, c) = s.condition(prompt)?;
    let x_t = s.noise(seed, noise)?;
    let mode = if deterministic {
        SamplerMode::Deterministic
    } else {
        SamplerMode::Ancestral
    };
    let state = s.sample(&c, &x_t, mode, sampler_seed(seed))?;
    let text = s.generate(&tokens, &state, gen, generation_seed(seed))?;
    let ds = s.dataset(vec![s.record(0, "sampled", prompt, c, state)]);
    ds.save(&run.file("state.dsstate"))?;
    run.add("state.dsstate");
    run.write_text("generation.txt", &format!("{text}\n"))?;
    run.set_fingerprint(ds.fingerprint.describe());
    println!("{text}");
    Ok(())
}

/// Condition for interpolation weight `lambda`; the endpoints are exact.
pub fn lerp_condition(a: &[f64], b: &[f64], lambda: f64) -> Vec<f64> {
    if lambda == 0.0 {
        return a.to_vec();
    }
    if lambda == 1.0 {
        return b.to_vec();
    }
    a.iter()
        .zip(b)
        .map(|(x, y)| (1.0 - lambda) * x + lambda * y)
        .collect()
}

/// Starting-noise seed of prompt B; prompt A uses the run seed itself.
pub fn second_noise_seed(seed: u64) -> u64 {
    seed.wrapping_add(1)
}

fn interpolate(
    cfg: &RunConfig,
    prompts: [&String; 2],
    lambdas: &[f64],
    models: &ModelArgs,
    noise: &NoiseArgs,
    gen: &GenArgs,
    run: &mut RunDir,
) -> Result<()> {
    if lambdas.is_empty() {
        bail!("no interpolation weights given");
    }
    if let Some(l) = lambdas.iter().find(|l| !(0.0..=1.0).contains(*l)) {
        bail!("lambda {l} outside [0, 1]");
    }
    let s = StateSampler::load(cfg, models)?;
    let seed = cfg.seed();
    let (tok_a, c_a) = s.condition(prompts[0])?;
    let (tok_b, c_b) = s.condition(prompts[1])?;
    let n_a = s.noise(seed, noise)?;
    let n_b = s.noise(second_noise_seed(seed), noise)?;
    let mut records = Vec::new();
    let mut rows = Vec::new();
    for (i, &lambda) in lambdas.iter().enumerate() {
        let x_t = interpolate_noise(&n_a, &n_b, lambda)?;
        let c = lerp_condition(&c_a, &c_b, lambda);
        let state = s.sample(&c, &x_t, SamplerMode::Deterministic, sampler_seed(seed))?;
        // generation continues whichever prompt is nearer
        let tokens = if lambda <= 0.5 { &tok_a } else { &tok_b };
        let text = s.generate(tokens, &state, gen, generation_seed(seed))?;
        println!("lambda={lambda}: {text}");
        rows.push(vec![fmt_f64(lambda), text]);
        let label = format!("lambda={lambda}");
        let prompt = if lambda == 0.0 {
            prompts[0].as_str()
        } else if lambda == 1.0 {
            prompts[1].as_str()
        } else {
            label.as_str()
        };
        records.push(s.record(i as u64, "sampled", prompt, c, state));
    }
    let ds = s.dataset(records);
    ds.save(&run.file("states.dsstate"))?;
    run.add("states.dsstate");
    write_csv(run, "generations.csv", &["lambda", "generation"], &rows)?;
    run.set_fingerprint(ds.fingerprint.describe());
    Ok(())
}

fn train_hybrid(
    cfg: &RunConfig,
    lm: Option<&Path>,
    args: &TrainArgs,
    run: &mut RunDir,
) -> Result<()> {
    let corpus = token_corpus(&cfg.model, &load_corpus(cfg)?);
    let mut t = match (&args.resume, lm) {
        (Some(p), _) => HybridTrainer::from_checkpoint(cfg, &Checkpoint::load(p)?)?,
        (None, Some(p)) => {
            let base = load_lm_weights(&cfg.model, &Checkpoint::load(p)?)?;
            HybridTrainer::new(cfg, Some(base), cfg.seed())?
        }
        (None, None) => HybridTrainer::new(cfg, None, cfg.seed())?,
    };
    let mut rows = Vec::new();
    for _ in 0..steps_for(cfg, args) {
        let step = t.step;
        let l = t.step(&corpus)?;
        log_progress(
            cfg,
            step,
            &format!(
                "lm {:.4} param-diffusion {:.4} alpha {:.4}",
                l.lm,
                l.pdiff,
                t.hybrid.alpha()
            ),
        );
        rows.push(vec![
            step.to_string(),
            fmt_f64(l.lm),
            fmt_f64(l.pdiff),
            fmt_f64(l.total),
        ]);
    }
    save_checkpoint(run, "hybrid.ckpt", &t.to_checkpoint())?;
    write_csv(run, "hybrid_losses.csv", &HYBRID_LOSS_HEADER, &rows)
}

pub const HYBRID_LOSS_HEADER: [&str; 4] = ["step", "lm_loss", "pdiff_loss", "total_loss"];

fn analyze(
    cfg: &RunConfig,
    dataset: Option<&Path>,
    method: Method,
    perplexity: f64,
    iterations: usize,
    run: &mut RunDir,
) -> Result<()> {
    let ds = load_dataset(cfg, dataset)?;
    let vectors: Vec<Vec<f64>> = ds.records.iter().map(|r| r.s_flat.clone()).collect();
    let labels: Vec<String> = ds.records.iter().map(|r| r.category.clone()).collect();
    let proj = match method {
        Method::Pca => pca_projection(&vectors, &labels)?,
        Method::Tsne => tsne_project(
            &vectors,
            &labels,
            TsneParams {
                perplexity,
                iterations,
                seed: cfg.seed(),
            },
        )?,
    };
    let report = cluster_metrics(&vectors, &labels)?;
    let proj_sil = silhouette(&proj.rows(), &labels)?;
    let fp = ds.fingerprint.describe();
    let desc = format!("seed={} fingerprint={fp}", cfg.seed());
    let svg = scatter_svg(
        &proj,
        &format!("{method:?} of {} states", vectors.len()),
        &desc,
    )?;
    run.write_text("projection.svg", &svg)?;
    write_csv(
        run,
        "projection.csv",
        &["category", "x", "y"],
        &projection_rows(&proj),
    )?;
    let metrics = [
        ("projection_silhouette", proj_sil),
        ("state_silhouette", report.silhouette),
        ("probe_accuracy", report.probe_accuracy),
        ("within_category_cosine", report.within_category_cosine),
        ("cross_category_cosine", report.cross_category_cosine),
    ];
    let rows: Vec<Vec<String>> = metrics
        .iter()
        .map(|(k, v)| vec![k.to_string(), fmt_f64(*v)])
        .collect();
    write_csv(run, "metrics.csv", &["metric", "value"], &rows)?;
    for (k, v) in metrics {
        println!("{k}={v:.4}");
    }
    run.set_fingerprint(fp);
    Ok(())
}

/// Token-weighted perplexity of `logits_for` over every corpus sequence.
fn perplexity(
    corpus: &[Vec<usize>],
    mut logits_for: impl FnMut(usize, &[usize]) -> Result<dreamstate::Tensor>,
) -> Result<f64> {
    let (mut nll, mut count) = (0.0, 0usize);
    for (i, seq) in corpus.iter().enumerate() {
        let n = seq.len() - 1;
        let logits = logits_for(i, &seq[..n])?;
        nll += lm_loss(&logits, &seq[1..])? * n as f64;
        count += n;
    }
    if count == 0 {
        bail!("corpus has no sequence to score");
    }
    Ok((nll / count as f64).exp())
}

fn eval(cfg: &RunConfig, lm: Option<&Path>, hybrid: Option<&Path>, run: &mut RunDir) -> Result<()> {
    let hp = need(
        hybrid,
        &cfg.paths.hybrid_checkpoint,
        "hybrid checkpoint (--hybrid)",
    )?;
    let hck = Checkpoint::load(hp)?;
    let (hw, hparams) = load_hybrid(cfg, &hck)?;
    let static_w = match lm.or(cfg.paths.lm_checkpoint.as_deref()) {
        Some(p) => load_lm_weights(&cfg.model, &Checkpoint::load(p)?)?,
        None => hw.clone(),
    };
    let corpus = token_corpus(&cfg.model, &load_corpus(cfg)?);
    let schedule = cfg.schedule()?;
    let m = &cfg.model;
    let ppl_static = perplexity(&corpus, |_, t| Ok(forward(m, &static_w, t)?.0))?;
    let mut rng = seeded(cfg.seed());
    let noise: Vec<Vec<f64>> = corpus
        .iter()
        .map(|_| normal_vec(hparams.param_dit.config.input_len, &mut rng))
        .collect();
    let ppl_hybrid = perplexity(&corpus, |i, t| {
        Ok(hybrid_logits(
            m, &hw, &hparams, &schedule, t, &noise[i], None,
        )?)
    })?;
    let rows = vec![
        vec!["static".to_string(), fmt_f64(ppl_static)],
        vec!["hybrid".to_string(), fmt_f64(ppl_hybrid)],
    ];
    write_csv(run, "eval.csv", &["model", "perplexity"], &rows)?;
    println!("static perplexity {ppl_static:.4}");
    println!(
        "hybrid perplexity {ppl_hybrid:.4} (alpha {:.4})",
        hparams.alpha()
    );
    run.set_fingerprint(hck.fingerprint.clone());
    Ok(())
}
