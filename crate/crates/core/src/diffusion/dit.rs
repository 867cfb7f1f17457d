//! Diffusion transformer over a flat vector cut into fixed-size patches.

use rand::Rng;

use crate::error::{Error, Result};
use crate::numcore::{Graph, Tensor, Var};
use crate::params::param_tree;

const LN_EPS: f64 = 1e-6;
/// Init scale of the modulation and output projections.
const ADA_STD: f64 = 0.02;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DiTConfig {
    pub patch_size: usize,
    pub depth: usize,
    pub width: usize,
    pub n_heads: usize,
    pub cond_dim: usize,
    pub input_len: usize,
}

impl DiTConfig {
    /// Default sizes for a given flattened input and condition length.
    pub fn for_input(input_len: usize, cond_dim: usize) -> Self {
        DiTConfig {
            patch_size: 4,
            depth: 6,
            width: 128,
            n_heads: 4,
            cond_dim,
            input_len,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let DiTConfig {
            patch_size,
            depth,
            width,
            n_heads,
            cond_dim,
            input_len,
        } = *self;
        if [patch_size, depth, width, n_heads, cond_dim, input_len].contains(&0) {
            return Err(Error::invalid("DiT sizes must be positive"));
        }
        if input_len % patch_size != 0 {
            return Err(Error::invalid(format!(
                "patch size {patch_size} does not divide input length {input_len}"
            )));
        }
        if width % n_heads != 0 {
            return Err(Error::invalid(format!(
                "width {width} not divisible by {n_heads} heads"
            )));
        }
        if width % 2 != 0 {
            return Err(Error::invalid(
                "width must be even for the timestep embedding",
            ));
        }
        Ok(())
    }

    pub fn n_patches(&self) -> usize {
        self.input_len / self.patch_size
    }

    pub fn head_width(&self) -> usize {
        self.width / self.n_heads
    }

    pub fn fingerprint(&self) -> String {
        format!(
            "dit:p{}:d{}:w{}:h{}:c{}:n{}",
            self.patch_size, self.depth, self.width, self.n_heads, self.cond_dim, self.input_len
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DiTBlock<T = Tensor> {
    /// Shift, scale and gate for attention and MLP, stacked `6W x W`.
    pub ada_w: T,
    pub ada_b: T,
    pub qkv_w: T,
    /// Query and value biases; a key bias cannot change the attention.
    pub q_b: T,
    pub v_b: T,
    pub proj_w: T,
    pub proj_b: T,
    pub fc1_w: T,
    pub fc1_b: T,
    pub fc2_w: T,
    pub fc2_b: T,
}

param_tree!(DiTBlock {
    ada_w,
    ada_b,
    qkv_w,
    q_b,
    v_b,
    proj_w,
    proj_b,
    fc1_w,
    fc1_b,
    fc2_w,
    fc2_b,
});

#[derive(Clone, Debug, PartialEq)]
pub struct DiTWeights<T = Tensor> {
    pub patch_w: T,
    pub patch_b: T,
    pub pos: T,
    pub t_w1: T,
    pub t_b1: T,
    pub t_w2: T,
    pub t_b2: T,
    pub c_w: T,
    pub c_b: T,
    pub final_ada_w: T,
    pub final_ada_b: T,
    pub final_w: T,
    pub final_b: T,
    pub blocks: Vec<DiTBlock<T>>,
}

param_tree!(DiTWeights {
    patch_w, patch_b, pos, t_w1, t_b1, t_w2, t_b2, c_w, c_b,
    final_ada_w, final_ada_b, final_w, final_b
} lists { blocks: DiTBlock });

fn lin<R: Rng + ?Sized>(out: usize, inp: usize, rng: &mut R) -> Tensor {
    Tensor::randn(&[out, inp], 1.0 / (inp as f64).sqrt(), rng)
}

fn sinusoid(pos: f64, width: usize) -> Vec<f64> {
    let half = width / 2;
    let mut out = vec![0.0; width];
    for i in 0..half {
        let freq = (-(10000f64.ln()) * i as f64 / half as f64).exp();
        out[i] = (pos * freq).cos();
        out[half + i] = (pos * freq).sin();
    }
    out
}

/// Sinusoidal embedding of a diffusion timestep.
pub fn timestep_embedding(t: usize, width: usize) -> Tensor {
    Tensor::row(sinusoid(t as f64, width))
}

impl DiTWeights {
    pub fn init<R: Rng + ?Sized>(cfg: &DiTConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let w = cfg.width;
        let p = cfg.patch_size;
        let mlp = 4 * w;
        let zeros = |n: usize| Tensor::zeros(&[1, n]);
        let patch_w = lin(w, p, rng);
        let t_w1 = lin(w, w, rng);
        let t_w2 = lin(w, w, rng);
        let c_w = lin(w, cfg.cond_dim, rng);
        let mut blocks = Vec::with_capacity(cfg.depth);
        for _ in 0..cfg.depth {
            let qkv_w = lin(3 * w, w, rng);
            let proj_w = lin(w, w, rng);
            let fc1_w = lin(mlp, w, rng);
            let fc2_w = lin(w, mlp, rng);
            blocks.push(DiTBlock {
                ada_w: Tensor::randn(&[6 * w, w], ADA_STD, &mut *rng),
                ada_b: zeros(6 * w),
                qkv_w,
                q_b: zeros(w),
                v_b: zeros(w),
                proj_w,
                proj_b: zeros(w),
                fc1_w,
                fc1_b: zeros(mlp),
                fc2_w,
                fc2_b: zeros(w),
            });
        }
        let pos_data = (0..cfg.n_patches())
            .flat_map(|i| sinusoid(i as f64, w))
            .collect();
        Ok(DiTWeights {
            patch_w,
            patch_b: zeros(w),
            pos: Tensor::new(vec![cfg.n_patches(), w], pos_data)?,
            t_w1,
            t_b1: zeros(w),
            t_w2,
            t_b2: zeros(w),
            c_w,
            c_b: zeros(w),
            final_ada_w: Tensor::randn(&[2 * w, w], ADA_STD, &mut *rng),
            final_ada_b: zeros(2 * w),
            final_w: Tensor::randn(&[p, w], ADA_STD, &mut *rng),
            final_b: zeros(p),
            blocks,
        })
    }

    pub fn check(&self, cfg: &DiTConfig) -> Result<()> {
        let reference = DiTWeights::init(cfg, &mut crate::rng::seeded(0))?;
        if reference.blocks.len() != self.blocks.len() {
            return Err(Error::invalid(format!(
                "DiT has {} blocks, config wants {}",
                self.blocks.len(),
                cfg.depth
            )));
        }
        let mut shapes = Vec::new();
        reference.for_each("", &mut |n, t| {
            shapes.push((n.to_string(), t.shape().to_vec()))
        });
        let mut i = 0;
        let mut bad = None;
        self.for_each("", &mut |n, t| {
            if bad.is_none() && t.shape() != shapes[i].1.as_slice() {
                bad = Some(format!("{n}: {:?} vs {:?}", t.shape(), shapes[i].1));
            }
            i += 1;
        });
        match bad {
            Some(msg) => Err(Error::invalid(format!(
                "DiT weight shape mismatch at {msg}"
            ))),
            None => Ok(()),
        }
    }
}

/// `x W^T + b` for a row-stacked input.
fn linear(g: &mut Graph, x: Var, w: Var, b: Var) -> Result<Var> {
    let wt = g.transpose(w)?;
    let y = g.matmul(x, wt)?;
    g.add_row(y, b)
}

fn modulate(g: &mut Graph, x: Var, shift: Var, scale: Var) -> Result<Var> {
    let n = g.layer_norm_rows(x, LN_EPS)?;
    let s = g.add_scalar(scale, 1.0);
    let y = g.mul_row(n, s)?;
    g.add_row(y, shift)
}

fn chunks(g: &mut Graph, v: Var, n: usize, width: usize) -> Result<Vec<Var>> {
    (0..n)
        .map(|i| g.slice(v, (0, 1), (i * width, (i + 1) * width)))
        .collect()
}

fn attention(g: &mut Graph, cfg: &DiTConfig, x: Var, b: &DiTBlock<Var>) -> Result<Var> {
    let w = cfg.width;
    let dh = cfg.head_width();
    let rows = cfg.n_patches();
    let wt = g.transpose(b.qkv_w)?;
    let qkv = g.matmul(x, wt)?;
    let mut heads = Vec::with_capacity(cfg.n_heads);
    for h in 0..cfg.n_heads {
        let cols = (h * dh, (h + 1) * dh);
        let q = g.slice(qkv, (0, rows), cols)?;
        let qb = g.slice(b.q_b, (0, 1), cols)?;
        let q = g.add_row(q, qb)?;
        let k = g.slice(qkv, (0, rows), (w + cols.0, w + cols.1))?;
        let v = g.slice(qkv, (0, rows), (2 * w + cols.0, 2 * w + cols.1))?;
        let vb = g.slice(b.v_b, (0, 1), cols)?;
        let v = g.add_row(v, vb)?;
        let kt = g.transpose(k)?;
        let scores = g.matmul(q, kt)?;
        let scores = g.scale(scores, 1.0 / (dh as f64).sqrt());
        let att = g.softmax_rows(scores)?;
        heads.push(g.matmul(att, v)?);
    }
    let o = if heads.len() == 1 {
        heads[0]
    } else {
        g.concat_cols(&heads)?
    };
    linear(g, o, b.proj_w, b.proj_b)
}

/// Noise prediction for `x_t` (a `1 x input_len` row) at timestep `t` under
/// condition `c` (`1 x cond_dim`).
pub fn dit_forward_graph(
    g: &mut Graph,
    cfg: &DiTConfig,
    w: &DiTWeights<Var>,
    x_t: Var,
    t: usize,
    c: Var,
) -> Result<Var> {
    if g.shape(x_t) != [1, cfg.input_len] {
        return Err(Error::shape(
            "dit_forward",
            g.shape(x_t),
            &[1, cfg.input_len],
        ));
    }
    if g.shape(c) != [1, cfg.cond_dim] {
        return Err(Error::shape(
            "dit_forward condition",
            g.shape(c),
            &[1, cfg.cond_dim],
        ));
    }
    let width = cfg.width;
    let patches = g.reshape(x_t, &[cfg.n_patches(), cfg.patch_size])?;
    let h = linear(g, patches, w.patch_w, w.patch_b)?;
    let mut h = g.add(h, w.pos)?;

    let temb = g.constant(timestep_embedding(t, width));
    let te = linear(g, temb, w.t_w1, w.t_b1)?;
    let te = g.silu(te);
    let te = linear(g, te, w.t_w2, w.t_b2)?;
    let ce = linear(g, c, w.c_w, w.c_b)?;
    let cond = g.add(te, ce)?;
    let cond = g.silu(cond);

    for b in &w.blocks {
        let mods = linear(g, cond, b.ada_w, b.ada_b)?;
        let m = chunks(g, mods, 6, width)?;
        let x = modulate(g, h, m[0], m[1])?;
        let a = attention(g, cfg, x, b)?;
        let a = g.mul_row(a, m[2])?;
        h = g.add(h, a)?;
        let x = modulate(g, h, m[3], m[4])?;
        let f = linear(g, x, b.fc1_w, b.fc1_b)?;
        let f = g.gelu(f);
        let f = linear(g, f, b.fc2_w, b.fc2_b)?;
        let f = g.mul_row(f, m[5])?;
        h = g.add(h, f)?;
    }

    let mods = linear(g, cond, w.final_ada_w, w.final_ada_b)?;
    let m = chunks(g, mods, 2, width)?;
    let x = modulate(g, h, m[0], m[1])?;
    let out = linear(g, x, w.final_w, w.final_b)?;
    g.reshape(out, &[1, cfg.input_len])
}

/// Anything that predicts the noise in `x_t`.
pub trait Denoiser {
    fn input_len(&self) -> usize;
    fn predict(&self, x_t: &[f64], t: usize, c: &[f64]) -> Result<Vec<f64>>;
}

#[derive(Clone, Debug, PartialEq)]
pub struct DiT {
    pub config: DiTConfig,
    pub weights: DiTWeights,
}

impl DiT {
    pub fn new<R: Rng + ?Sized>(config: DiTConfig, rng: &mut R) -> Result<Self> {
        let weights = DiTWeights::init(&config, rng)?;
        Ok(DiT { config, weights })
    }
}

impl Denoiser for DiT {
    fn input_len(&self) -> usize {
        self.config.input_len
    }

    fn predict(&self, x_t: &[f64], t: usize, c: &[f64]) -> Result<Vec<f64>> {
        dit_forward(&self.config, &self.weights, x_t, t, c)
    }
}

pub fn dit_forward(
    cfg: &DiTConfig,
    w: &DiTWeights,
    x_t: &[f64],
    t: usize,
    c: &[f64],
) -> Result<Vec<f64>> {
    if x_t.len() != cfg.input_len {
        return Err(Error::shape("dit_forward", &[x_t.len()], &[cfg.input_len]));
    }
    if c.len() != cfg.cond_dim {
        return Err(Error::shape(
            "dit_forward condition",
            &[c.len()],
            &[cfg.cond_dim],
        ));
    }
    let mut g = Graph::new();
    let bound = w.bind(&mut g, false);
    let x = g.constant(Tensor::row(x_t.to_vec()));
    let cv = g.constant(Tensor::row(c.to_vec()));
    let out = dit_forward_graph(&mut g, cfg, &bound, x, t, cv)?;
    Ok(g.value(out).data().to_vec())
}
