use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::rng::{normal_vec, seeded};

/// Below this angle (radians) interpolation falls back to a linear blend.
pub const SLERP_MIN_ANGLE: f64 = 1e-6;
/// Moving-average window at full lowpass strength.
pub const LOWPASS_MAX_WINDOW: usize = 16;

fn norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Spherical interpolation between two noise vectors.
pub fn interpolate_noise(a: &[f64], b: &[f64], lambda: f64) -> Result<Vec<f64>> {
    if a.len() != b.len() {
        return Err(Error::shape("interpolate_noise", &[a.len()], &[b.len()]));
    }
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::invalid(format!("lambda {lambda} outside [0, 1]")));
    }
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return Err(Error::invalid(
            "cannot interpolate an all-zero noise vector",
        ));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let omega = (dot / (na * nb)).clamp(-1.0, 1.0).acos();
    if omega < SLERP_MIN_ANGLE {
        return Ok(a
            .iter()
            .zip(b)
            .map(|(x, y)| (1.0 - lambda) * x + lambda * y)
            .collect());
    }
    let s = omega.sin();
    let (wa, wb) = (
        ((1.0 - lambda) * omega).sin() / s,
        (lambda * omega).sin() / s,
    );
    Ok(a.iter().zip(b).map(|(x, y)| wa * x + wb * y).collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NoiseMode {
    Iid,
    Lowpass,
    Tiled,
}

impl FromStr for NoiseMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "iid" => Ok(NoiseMode::Iid),
            "lowpass" => Ok(NoiseMode::Lowpass),
            "tiled" => Ok(NoiseMode::Tiled),
            other => Err(Error::invalid(format!(
                "unknown noise mode '{other}' (expected iid, lowpass or tiled)"
            ))),
        }
    }
}

impl fmt::Display for NoiseMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            NoiseMode::Iid => "iid",
            NoiseMode::Lowpass => "lowpass",
            NoiseMode::Tiled => "tiled",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NoiseSpec {
    pub mode: NoiseMode,
    pub strength: f64,
}

/// Window used by lowpass noise at a given strength.
pub fn lowpass_window(strength: f64) -> usize {
    1 + (strength * (LOWPASS_MAX_WINDOW - 1) as f64).round() as usize
}

/// Starting noise with unit per-element variance and optional structure.
pub fn structured_noise(
    seed: u64,
    spec: NoiseSpec,
    len: usize,
    patch_size: usize,
) -> Result<Vec<f64>> {
    if !(0.0..=1.0).contains(&spec.strength) {
        return Err(Error::invalid(format!(
            "strength {} outside [0, 1]",
            spec.strength
        )));
    }
    if len == 0 || patch_size == 0 || !len.is_multiple_of(patch_size) {
        return Err(Error::invalid(format!(
            "noise length {len} must be a positive multiple of patch size {patch_size}"
        )));
    }
    let mut rng = seeded(seed);
    match spec.mode {
        NoiseMode::Iid => Ok(normal_vec(len, &mut rng)),
        NoiseMode::Lowpass => {
            let w = lowpass_window(spec.strength).min(len);
            let z = normal_vec(len, &mut rng);
            // circular average of w iid normals has variance exactly 1/w
            let gain = (w as f64).sqrt() / w as f64;
            Ok((0..len)
                .map(|i| gain * (0..w).map(|j| z[(i + j) % len]).sum::<f64>())
                .collect())
        }
        NoiseMode::Tiled => {
            let tile = normal_vec(patch_size, &mut rng);
            let iid = normal_vec(len, &mut rng);
            let (a, b) = (spec.strength.sqrt(), (1.0 - spec.strength).sqrt());
            Ok((0..len)
                .map(|i| a * tile[i % patch_size] + b * iid[i])
                .collect())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn endpoints_and_orthogonal_midpoint() {
        let a = vec![1.0, 0.0, 0.0];
        let b = vec![0.0, 1.0, 0.0];
        assert_eq!(interpolate_noise(&a, &b, 0.0).unwrap(), a);
        let end = interpolate_noise(&a, &b, 1.0).unwrap();
        assert!(end.iter().zip(&b).all(|(x, y)| (x - y).abs() < 1e-15));
        let mid = interpolate_noise(&a, &b, 0.5).unwrap();
        let r = 1.0 / 2f64.sqrt();
        assert!((mid[0] - r).abs() < 1e-15 && (mid[1] - r).abs() < 1e-15 && mid[2] == 0.0);
    }

    #[test]
    fn collinear_inputs_blend_linearly() {
        let a = vec![1.0, 2.0];
        let b = vec![3.0, 6.0];
        let m = interpolate_noise(&a, &b, 0.25).unwrap();
        assert_eq!(m, vec![1.5, 3.0]);
        assert!(interpolate_noise(&a, &[0.0, 0.0], 0.5).is_err());
        assert!(interpolate_noise(&a, &[1.0], 0.5).is_err());
        assert!(interpolate_noise(&a, &b, 1.5).is_err());
    }

    proptest! {
        #[test]
        fn slerp_keeps_unit_norm(
            a in proptest::collection::vec(-1.0f64..1.0, 6),
            b in proptest::collection::vec(-1.0f64..1.0, 6),
            lambda in 0.0f64..=1.0,
        ) {
            let (na, nb) = (norm(&a), norm(&b));
            prop_assume!(na > 1e-3 && nb > 1e-3);
            let ua: Vec<f64> = a.iter().map(|x| x / na).collect();
            let ub: Vec<f64> = b.iter().map(|x| x / nb).collect();
            let dot: f64 = ua.iter().zip(&ub).map(|(x, y)| x * y).sum();
            prop_assume!(dot.abs() < 1.0 - 1e-9);
            let m = interpolate_noise(&ua, &ub, lambda).unwrap();
            prop_assert!((norm(&m) - 1.0).abs() <= 1e-9);
        }
    }

    #[test]
    fn structured_noise_is_seeded() {
        let spec = NoiseSpec {
            mode: NoiseMode::Lowpass,
            strength: 0.5,
        };
        assert_eq!(
            structured_noise(3, spec, 32, 4).unwrap(),
            structured_noise(3, spec, 32, 4).unwrap()
        );
        assert_ne!(
            structured_noise(3, spec, 32, 4).unwrap(),
            structured_noise(4, spec, 32, 4).unwrap()
        );
        assert!("pink".parse::<NoiseMode>().is_err());
        assert_eq!("tiled".parse::<NoiseMode>().unwrap(), NoiseMode::Tiled);
        assert!(structured_noise(
            0,
            NoiseSpec {
                mode: NoiseMode::Iid,
                strength: 1.2
            },
            8,
            4
        )
        .is_err());
    }

    #[test]
    fn zero_strength_is_iid() {
        // with zero strength each mode reduces to plain normals (windows of one, blend weight zero)
        assert_eq!(lowpass_window(0.0), 1);
        let lp = structured_noise(
            5,
            NoiseSpec {
                mode: NoiseMode::Lowpass,
                strength: 0.0,
            },
            16,
            4,
        )
        .unwrap();
        assert_eq!(lp, normal_vec(16, &mut seeded(5)));
        let tiled = structured_noise(
            5,
            NoiseSpec {
                mode: NoiseMode::Tiled,
                strength: 0.0,
            },
            16,
            4,
        )
        .unwrap();
        let mut rng = seeded(5);
        let _tile = normal_vec(4, &mut rng);
        assert_eq!(tiled, normal_vec(16, &mut rng));
    }

    #[test]
    fn full_strength_tiling_is_periodic() {
        let x = structured_noise(
            9,
            NoiseSpec {
                mode: NoiseMode::Tiled,
                strength: 1.0,
            },
            32,
            4,
        )
        .unwrap();
        for i in 4..32 {
            assert_eq!(x[i], x[i - 4]);
        }
    }

    #[test]
    fn lowpass_has_unit_variance() {
        let len = 32;
        let draws = 10_000;
        let spec = NoiseSpec {
            mode: NoiseMode::Lowpass,
            strength: 0.7,
        };
        let mut sum = vec![0.0; len];
        let mut sq = vec![0.0; len];
        for seed in 0..draws {
            let x = structured_noise(seed, spec, len, 4).unwrap();
            for i in 0..len {
                sum[i] += x[i];
                sq[i] += x[i] * x[i];
            }
        }
        for i in 0..len {
            let m = sum[i] / draws as f64;
            let var = sq[i] / draws as f64 - m * m;
            assert!((var - 1.0).abs() < 0.05, "element {i} variance {var}");
        }
    }
}
