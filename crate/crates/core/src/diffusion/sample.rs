use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::dit::Denoiser;
use super::schedule::DiffusionSchedule;
use crate::error::{Error, Result};
use crate::rng::normal_vec;
use crate::state_pipeline::Normalization;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SamplerMode {
    /// `sigma_t^2 = beta_t`.
    Ancestral,
    /// `sigma_t = 0`: a pure function of the starting noise.
    Deterministic,
}

fn start_noise<R: Rng + ?Sized>(
    len: usize,
    initial: Option<&[f64]>,
    rng: &mut R,
) -> Result<Vec<f64>> {
    match initial {
        Some(x) if x.len() != len => Err(Error::shape(
            "ddpm_sample initial noise",
            &[x.len()],
            &[len],
        )),
        Some(x) => Ok(x.to_vec()),
        None => Ok(normal_vec(len, rng)),
    }
}

/// Reverse chain from `x_T` to `x_0` in standardized space.
pub fn ddpm_sample_standardized<D: Denoiser + ?Sized, R: Rng + ?Sized>(
    den: &D,
    schedule: &DiffusionSchedule,
    c: &[f64],
    initial_noise: Option<&[f64]>,
    mode: SamplerMode,
    rng: &mut R,
) -> Result<Vec<f64>> {
    let mut x = start_noise(den.input_len(), initial_noise, rng)?;
    for t in (1..=schedule.steps()).rev() {
        let eps = den.predict(&x, t, c)?;
        let beta = schedule.beta(t);
        let coef = beta / (1.0 - schedule.alpha_bar(t)).sqrt();
        let inv = 1.0 / (1.0 - beta).sqrt();
        for (xi, e) in x.iter_mut().zip(&eps) {
            *xi = inv * (*xi - coef * e);
        }
        if mode == SamplerMode::Ancestral && t > 1 {
            let sigma = beta.sqrt();
            for xi in x.iter_mut() {
                let z: f64 = StandardNormal.sample(rng);
                *xi += sigma * z;
            }
        }
    }
    Ok(x)
}

/// Sample mapped back through the dataset normalization.
pub fn ddpm_sample<D: Denoiser + ?Sized, R: Rng + ?Sized>(
    den: &D,
    schedule: &DiffusionSchedule,
    c: &[f64],
    norm: &Normalization,
    initial_noise: Option<&[f64]>,
    mode: SamplerMode,
    rng: &mut R,
) -> Result<Vec<f64>> {
    if norm.dim() != den.input_len() {
        return Err(Error::shape(
            "ddpm_sample normalization",
            &[norm.dim()],
            &[den.input_len()],
        ));
    }
    let z = ddpm_sample_standardized(den, schedule, c, initial_noise, mode, rng)?;
    Ok(norm.destandardize(&z))
}

/// `k` evenly spaced timesteps ending at `T`, ascending.
pub fn strided_timesteps(steps: usize, k: usize) -> Result<Vec<usize>> {
    if k == 0 || k > steps {
        return Err(Error::invalid(format!(
            "need 1 <= K <= T, got K={k}, T={steps}"
        )));
    }
    Ok((1..=k).map(|i| (i * steps + k / 2) / k).collect())
}

/// Deterministic reverse pass visiting only `k` strided timesteps. With
/// `k == T` it is the full deterministic sampler.
pub fn sample_strided<D: Denoiser + ?Sized>(
    den: &D,
    schedule: &DiffusionSchedule,
    c: &[f64],
    x_t: &[f64],
    k: usize,
) -> Result<Vec<f64>> {
    if x_t.len() != den.input_len() {
        return Err(Error::shape(
            "sample_strided",
            &[x_t.len()],
            &[den.input_len()],
        ));
    }
    let taus = strided_timesteps(schedule.steps(), k)?;
    let mut x = x_t.to_vec();
    for i in (0..taus.len()).rev() {
        let t = taus[i];
        let prev = if i == 0 { 0 } else { taus[i - 1] };
        let ab = schedule.alpha_bar(t);
        let beta = if prev + 1 == t {
            schedule.beta(t)
        } else {
            1.0 - ab / schedule.alpha_bar(prev)
        };
        let eps = den.predict(&x, t, c)?;
        let coef = beta / (1.0 - ab).sqrt();
        let inv = 1.0 / (1.0 - beta).sqrt();
        for (xi, e) in x.iter_mut().zip(&eps) {
            *xi = inv * (*xi - coef * e);
        }
    }
    Ok(x)
}
