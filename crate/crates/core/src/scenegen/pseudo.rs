use std::f64::consts::TAU;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::render::{DenseSample, Provenance};
use crate::error::{Error, Result};

/// Magnitudes of the simulated pseudo-label errors.
#[derive(Clone, Debug, PartialEq)]
pub struct PseudoNoise {
    /// RMS of the multiplicative depth field around 1.
    pub depth_sigma: f64,
    /// RMS of the additive perturbation applied to each normal component.
    pub normal_sigma: f64,
}

impl Default for PseudoNoise {
    fn default() -> Self {
        Self {
            depth_sigma: 0.05,
            normal_sigma: 0.05,
        }
    }
}

const WAVES: usize = 4;
/// Highest spatial frequency, in cycles per image side.
const MAX_CYCLES: f64 = 1.5;
/// The depth factor never drops below this, keeping depth positive.
const MIN_FACTOR: f64 = 0.5;

/// Random sum of low-frequency plane waves scaled to unit RMS over the image.
fn smooth_field(rng: &mut impl Rng, h: usize, w: usize) -> Vec<f64> {
    let waves: Vec<[f64; 4]> = (0..WAVES)
        .map(|_| {
            [
                StandardNormal.sample(rng),
                rng.gen_range(-MAX_CYCLES..MAX_CYCLES),
                rng.gen_range(-MAX_CYCLES..MAX_CYCLES),
                rng.gen_range(0.0..TAU),
            ]
        })
        .collect();
    let mut f = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let (u, v) = ((x as f64 + 0.5) / w as f64, (y as f64 + 0.5) / h as f64);
            f.push(
                waves
                    .iter()
                    .map(|[a, fx, fy, phase]| a * (TAU * (fx * u + fy * v) + phase).cos())
                    .sum::<f64>(),
            );
        }
    }
    let mean = f.iter().sum::<f64>() / f.len() as f64;
    let rms = (f.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / f.len() as f64).sqrt();
    if rms > 0.0 {
        f.iter_mut().for_each(|v| *v = (*v - mean) / rms);
    }
    f
}

/// Simulate a pseudo-labelled sample: depth times a smooth `1 ± σ` field,
/// normals perturbed by smooth fields and renormalized. RGB, matte and mask
/// are unchanged.
pub fn make_pseudo_labeled(
    mut sample: DenseSample,
    rng: &mut impl Rng,
    noise: &PseudoNoise,
) -> Result<DenseSample> {
    if !(noise.depth_sigma >= 0.0 && noise.normal_sigma >= 0.0)
        || !noise.depth_sigma.is_finite()
        || !noise.normal_sigma.is_finite()
    {
        return Err(Error::Config(format!("pseudo-label noise must be finite and >= 0, got {noise:?}")));
    }
    sample.provenance = Provenance::Pseudo;
    let (h, w) = (sample.height, sample.width);
    if noise.depth_sigma > 0.0 {
        let field = smooth_field(rng, h, w);
        for (d, f) in sample.depth.iter_mut().zip(&field) {
            let factor = (1.0 + noise.depth_sigma * f).max(MIN_FACTOR);
            *d = (f64::from(*d) * factor) as f32;
        }
    }
    if noise.normal_sigma > 0.0 {
        let fields: Vec<Vec<f64>> = (0..3).map(|_| smooth_field(rng, h, w)).collect();
        for i in 0..h * w {
            if !sample.mask[i] {
                continue;
            }
            let n = &mut sample.normal[3 * i..3 * i + 3];
            let p = [0, 1, 2].map(|k| f64::from(n[k]) + noise.normal_sigma * fields[k][i]);
            let norm = p.iter().map(|v| v * v).sum::<f64>().sqrt();
            for k in 0..3 {
                n[k] = (p[k] / norm) as f32;
            }
        }
    }
    Ok(sample)
}
