//! Synthetic imbalanced volumes: ellipsoid foreground on a smoothly biased,
//! noisy background.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use super::deform::DeformSpec;
use super::TrainError;
use crate::volgrid::{BinaryMask, Dims, Spacing, Volume};

/// Attempts at drawing blobs before a spec is declared infeasible.
pub const MAX_ATTEMPTS: usize = 200;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SynthSpec {
    pub dims: Dims,
    /// Upper bound on the foreground fraction of every mask.
    pub max_fg_fraction: f64,
    /// Inclusive range of ellipsoid counts.
    pub blob_count: (usize, usize),
    /// Range of ellipsoid semi-axes, in voxels.
    pub blob_radius: (f64, f64),
    /// Intensity added inside the foreground.
    pub contrast: f64,
    /// Standard deviation of the additive Gaussian noise.
    pub noise: f64,
    /// Peak amplitude of the smooth additive bias field.
    pub bias: f64,
    pub deform: DeformSpec,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            dims: Dims::cube(32),
            max_fg_fraction: 0.02,
            blob_count: (1, 2),
            blob_radius: (3.0, 5.0),
            contrast: 1.0,
            noise: 1.0,
            bias: 0.5,
            deform: DeformSpec::default(),
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<(), TrainError> {
        let d = self.dims;
        let fail = |m: String| Err(TrainError::Config(m));
        if d.is_empty() || d.nx % 4 != 0 || d.ny % 4 != 0 || d.nz % 4 != 0 {
            return fail(format!("grid {d} must be non-empty and divisible by 4"));
        }
        if !(self.max_fg_fraction > 0.0 && self.max_fg_fraction < 0.5) {
            return fail(format!("foreground fraction {} outside (0, 0.5)", self.max_fg_fraction));
        }
        let (lo, hi) = self.blob_count;
        if lo == 0 || lo > hi {
            return fail(format!("blob count range {lo}..={hi} is empty"));
        }
        let (rlo, rhi) = self.blob_radius;
        if !(rlo > 0.0 && rlo <= rhi && rhi.is_finite()) {
            return fail(format!("blob radius range {rlo}..{rhi} is invalid"));
        }
        if self.noise < 0.0 || self.bias < 0.0 || !self.contrast.is_finite() || self.contrast <= 0.0 {
            return fail("noise and bias must be non-negative and contrast positive".into());
        }
        self.deform.validate()
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        Self { seed, ..self.clone() }
    }
}

fn draw_mask(spec: &SynthSpec, rng: &mut ChaCha8Rng) -> Vec<bool> {
    let d = spec.dims;
    let mut mask = vec![false; d.len()];
    let count = rng.gen_range(spec.blob_count.0..=spec.blob_count.1);
    for _ in 0..count {
        let r: [f64; 3] = std::array::from_fn(|_| rng.gen_range(spec.blob_radius.0..=spec.blob_radius.1));
        let c: [f64; 3] = std::array::from_fn(|a| {
            let n = d.as_array()[a] as f64;
            let margin = r[a].min(n / 2.0 - 0.5);
            rng.gen_range(margin..=(n - 1.0 - margin))
        });
        for (i, m) in mask.iter_mut().enumerate() {
            let (x, y, z) = d.coords(i);
            let q = [x as f64, y as f64, z as f64];
            let s: f64 = (0..3).map(|a| ((q[a] - c[a]) / r[a]).powi(2)).sum();
            if s <= 1.0 {
                *m = true;
            }
        }
    }
    mask
}

/// Sum of three random low-frequency cosines, scaled to peak `amplitude`.
fn bias_field(d: Dims, amplitude: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let waves: Vec<([f64; 3], f64)> = (0..3)
        .map(|_| {
            let f = std::array::from_fn(|_| rng.gen_range(-1.0..=1.0));
            (f, rng.gen_range(0.0..2.0 * PI))
        })
        .collect();
    let ext = d.as_array();
    (0..d.len())
        .map(|i| {
            let (x, y, z) = d.coords(i);
            let q = [x, y, z];
            let s: f64 = waves
                .iter()
                .map(|(f, phase)| {
                    let arg: f64 = (0..3).map(|a| f[a] * q[a] as f64 / ext[a] as f64).sum();
                    (2.0 * PI * arg + phase).cos()
                })
                .sum();
            amplitude * s / 3.0
        })
        .collect()
}

/// Deterministic per `spec.seed`.
pub fn gen_synthetic_case(spec: &SynthSpec) -> Result<(Volume, BinaryMask), TrainError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let d = spec.dims;
    let limit = (spec.max_fg_fraction * d.len() as f64).floor() as usize;
    let mask = (0..MAX_ATTEMPTS)
        .map(|_| draw_mask(spec, &mut rng))
        .find(|m| {
            let n = m.iter().filter(|&&v| v).count();
            n > 0 && n <= limit
        })
        .ok_or_else(|| TrainError::InfeasibleSpec(format!(
            "no blob layout within {MAX_ATTEMPTS} attempts kept the foreground at or below {} of {d}",
            spec.max_fg_fraction
        )))?;
    let bias = if spec.bias > 0.0 {
        bias_field(d, spec.bias, &mut rng)
    } else {
        vec![0.0; d.len()]
    };
    let data = mask
        .iter()
        .zip(&bias)
        .map(|(&m, &b)| {
            let n: f64 = if spec.noise > 0.0 {
                spec.noise * Distribution::<f64>::sample(&StandardNormal, &mut rng)
            } else {
                0.0
            };
            (spec.contrast * m as u8 as f64 + b + n) as f32
        })
        .collect();
    let image = Volume::new(d, Spacing::UNIT, data).expect("length matches dims");
    let truth = BinaryMask::from_bools(d, Spacing::UNIT, &mask).expect("length matches dims");
    Ok((image, truth))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clean_image_thresholds_back_to_truth() {
        let spec = SynthSpec {
            noise: 0.0,
            bias: 0.0,
            seed: 4,
            ..SynthSpec::default()
        };
        let (img, truth) = gen_synthetic_case(&spec).unwrap();
        let back = BinaryMask::threshold(&img, spec.contrast as f32 / 2.0);
        assert_eq!(back.volume().data(), truth.volume().data());
    }

    #[test]
    fn same_seed_same_pair() {
        let spec = SynthSpec { seed: 11, ..SynthSpec::default() };
        let (a, m) = gen_synthetic_case(&spec).unwrap();
        let (b, n) = gen_synthetic_case(&spec).unwrap();
        assert_eq!(a.data(), b.data());
        assert_eq!(m.volume().data(), n.volume().data());
        let (c, _) = gen_synthetic_case(&spec.with_seed(12)).unwrap();
        assert_ne!(a.data(), c.data());
    }

    #[test]
    fn infeasible_spec_is_reported() {
        let spec = SynthSpec {
            blob_radius: (20.0, 20.0),
            ..SynthSpec::default()
        };
        assert!(matches!(gen_synthetic_case(&spec), Err(TrainError::InfeasibleSpec(_))));
    }

    #[test]
    fn rejects_bad_grids() {
        let spec = SynthSpec {
            dims: Dims::new(30, 32, 32),
            ..SynthSpec::default()
        };
        assert!(gen_synthetic_case(&spec).is_err());
    }
}
