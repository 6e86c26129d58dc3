//! Noise schedules and the forward (noising) diffusion process.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Default β range for the linear schedule.
pub const LINEAR_BETA_START: f64 = 1e-4;
pub const LINEAR_BETA_END: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ScheduleKind {
    /// β linearly spaced over `[start, end]`.
    LinearBeta { start: f64, end: f64 },
}

impl Default for ScheduleKind {
    fn default() -> Self {
        ScheduleKind::LinearBeta {
            start: LINEAR_BETA_START,
            end: LINEAR_BETA_END,
        }
    }
}

impl ScheduleKind {
    /// Linear β with the default endpoints rescaled by `1000 / T`, so that
    /// short schedules still end near pure noise. Identical to the default
    /// range at `T = 1000`.
    pub fn linear_scaled(num_timesteps: usize) -> Self {
        let scale = 1000.0 / num_timesteps.max(1) as f64;
        ScheduleKind::LinearBeta {
            start: LINEAR_BETA_START * scale,
            end: (LINEAR_BETA_END * scale).min(0.999),
        }
    }

    /// Parse a schedule name for a schedule of `num_timesteps` steps.
    pub fn parse(name: &str, num_timesteps: usize) -> Result<Self> {
        match name {
            "linear-beta" | "linear" => Ok(Self::default()),
            "linear-beta-scaled" | "scaled" => Ok(Self::linear_scaled(num_timesteps)),
            other => Err(Error::Config(format!("unknown schedule kind {other:?}"))),
        }
    }
}

/// Cumulative signal-retention coefficients `alpha_bar[t]`.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    pub fn new(kind: ScheduleKind, num_timesteps: usize) -> Result<Self> {
        if num_timesteps < 2 {
            return Err(Error::Config(format!(
                "noise schedule needs at least 2 timesteps, got {num_timesteps}"
            )));
        }
        match kind {
            ScheduleKind::LinearBeta { start, end } => {
                if !(0.0 < start && start < end && end < 1.0) {
                    return Err(Error::Config(format!(
                        "linear beta range must satisfy 0 < start < end < 1, got [{start}, {end}]"
                    )));
                }
                let last = (num_timesteps - 1) as f64;
                let mut acc = 1.0;
                let alpha_bar = (0..num_timesteps)
                    .map(|t| {
                        let beta = start + (end - start) * t as f64 / last;
                        acc *= 1.0 - beta;
                        acc
                    })
                    .collect();
                Ok(Self { alpha_bar })
            }
        }
    }

    /// Build a schedule from explicit coefficients, which must lie in `(0, 1]`
    /// and decrease strictly.
    pub fn from_alpha_bar(alpha_bar: Vec<f64>) -> Result<Self> {
        if alpha_bar.len() < 2 {
            return Err(Error::Config(
                "noise schedule needs at least 2 timesteps".into(),
            ));
        }
        if alpha_bar.iter().any(|&a| !(a > 0.0 && a <= 1.0)) {
            return Err(Error::Config("alpha_bar values must lie in (0, 1]".into()));
        }
        if alpha_bar.windows(2).any(|w| w[1] >= w[0]) {
            return Err(Error::Config(
                "alpha_bar must be strictly decreasing".into(),
            ));
        }
        Ok(Self { alpha_bar })
    }

    pub fn num_timesteps(&self) -> usize {
        self.alpha_bar.len()
    }

    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        self.alpha_bar.get(t).copied().ok_or(Error::TimestepRange {
            t,
            num_timesteps: self.alpha_bar.len(),
        })
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    /// Signal-to-noise ratio `alpha_bar / (1 - alpha_bar)`.
    pub fn snr(&self, t: usize) -> Result<f64> {
        let a = self.alpha_bar(t)?;
        Ok(a / (1.0 - a))
    }
}

/// `sqrt(alpha_bar) * z + sqrt(1 - alpha_bar) * eps`, elementwise.
pub fn forward_noise(z: &[f32], t: usize, eps: &[f32], sched: &NoiseSchedule) -> Result<Vec<f32>> {
    if z.len() != eps.len() {
        return Err(Error::Shape(format!(
            "clean tensor has {} values, noise has {}",
            z.len(),
            eps.len()
        )));
    }
    let a = sched.alpha_bar(t)?;
    let (signal, noise) = (a.sqrt(), (1.0 - a).sqrt());
    Ok(z.iter()
        .zip(eps)
        .map(|(&z, &e)| (signal * f64::from(z) + noise * f64::from(e)) as f32)
        .collect())
}

/// Batched [`forward_noise`] with one timestep per batch item.
pub fn forward_noise_batch(
    z: &Tensor,
    timesteps: &[usize],
    eps: &Tensor,
    sched: &NoiseSchedule,
) -> Result<Tensor> {
    z.same_shape(eps)?;
    if timesteps.len() != z.batch() {
        return Err(Error::Shape(format!(
            "{} timesteps for a batch of {}",
            timesteps.len(),
            z.batch()
        )));
    }
    let mut out = Vec::with_capacity(z.len());
    for (n, &t) in timesteps.iter().enumerate() {
        out.extend(forward_noise(z.item(n), t, eps.item(n), sched)?);
    }
    Tensor::from_vec(z.shape(), out)
}

/// Draw `count` timesteps independently and uniformly from `[0, T)`.
pub fn sample_timesteps<R: Rng + ?Sized>(
    rng: &mut R,
    sched: &NoiseSchedule,
    count: usize,
) -> Result<Vec<usize>> {
    if count == 0 {
        return Err(Error::Config("timestep count must be at least 1".into()));
    }
    let t_max = sched.num_timesteps();
    Ok((0..count).map(|_| rng.gen_range(0..t_max)).collect())
}

/// Mean squared error between predicted and true noise.
pub fn teacher_denoise_loss(eps_pred: &[f32], eps: &[f32]) -> Result<f64> {
    Ok(teacher_denoise_loss_with_grad(eps_pred, eps)?.0)
}

/// [`teacher_denoise_loss`] and its gradient with respect to `eps_pred`.
pub fn teacher_denoise_loss_with_grad(eps_pred: &[f32], eps: &[f32]) -> Result<(f64, Vec<f32>)> {
    if eps_pred.len() != eps.len() || eps.is_empty() {
        return Err(Error::Shape(format!(
            "prediction has {} values, target has {}",
            eps_pred.len(),
            eps.len()
        )));
    }
    let n = eps.len() as f64;
    let mut sum = 0.0;
    let grad = eps_pred
        .iter()
        .zip(eps)
        .map(|(&p, &e)| {
            let d = f64::from(p) - f64::from(e);
            sum += d * d;
            (2.0 * d / n) as f32
        })
        .collect();
    Ok((sum / n, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    #[test]
    fn linear_schedule_values() {
        let s = NoiseSchedule::new(ScheduleKind::default(), 1000).unwrap();
        assert!((s.alpha_bar(0).unwrap() - 0.9999).abs() < 1e-15);
        assert!(s.alpha_bar(0).unwrap() > 0.99);
        assert!(s.alpha_bar(999).unwrap() < 0.05);

        let s = NoiseSchedule::new(ScheduleKind::default(), 2).unwrap();
        assert!((s.alpha_bar(1).unwrap() - 0.9999 * 0.98).abs() < 1e-12);
        assert!((s.alpha_bar(1).unwrap() - 0.979902).abs() < 1e-12);
    }

    #[test]
    fn scaled_schedule_matches_default_at_1000() {
        let a = NoiseSchedule::new(ScheduleKind::linear_scaled(1000), 1000).unwrap();
        let b = NoiseSchedule::new(ScheduleKind::default(), 1000).unwrap();
        assert_eq!(a, b);
        assert!(ScheduleKind::parse("cosine", 10).is_err());
        assert_eq!(
            ScheduleKind::parse("linear-beta", 10).unwrap(),
            ScheduleKind::default()
        );
    }

    #[test]
    fn schedule_rejects_single_step() {
        assert!(matches!(
            NoiseSchedule::new(ScheduleKind::default(), 1),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn desk_schedule_invariants() {
        let s = NoiseSchedule::new(ScheduleKind::linear_scaled(100), 100).unwrap();
        assert!(s.alpha_bar(0).unwrap() > 0.99);
        assert!(s.alpha_bar(99).unwrap() < 0.05);
        for t in 1..100 {
            assert!(s.alpha_bar(t).unwrap() < s.alpha_bar(t - 1).unwrap());
            assert!(s.snr(t).unwrap() < s.snr(t - 1).unwrap());
        }
    }

    #[test]
    fn forward_noise_examples() {
        let clean = NoiseSchedule::from_alpha_bar(vec![1.0, 0.25, 1e-300]).unwrap();
        let z = [0.3f32, -1.2];
        let eps = [2.0f32, 0.7];
        assert_eq!(forward_noise(&z, 0, &eps, &clean).unwrap(), z.to_vec());
        let out = forward_noise(&[1.0, 1.0], 1, &[0.0, 2.0], &clean).unwrap();
        assert!((out[0] - 0.5).abs() < 1e-7);
        assert!((out[1] - 2.232_050_8).abs() < 1e-6);
        let out = forward_noise(&z, 2, &eps, &clean).unwrap();
        for (o, e) in out.iter().zip(eps) {
            assert!((o - e).abs() < 1e-6);
        }
    }

    #[test]
    fn forward_noise_errors() {
        let s = NoiseSchedule::new(ScheduleKind::default(), 10).unwrap();
        assert!(matches!(
            forward_noise(&[1.0], 0, &[1.0, 2.0], &s),
            Err(Error::Shape(_))
        ));
        assert!(matches!(
            forward_noise(&[1.0], 10, &[1.0], &s),
            Err(Error::TimestepRange { t: 10, .. })
        ));
    }

    #[test]
    fn timestep_sampling() {
        let s = NoiseSchedule::from_alpha_bar(vec![1.0, 0.5]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let ts = sample_timesteps(&mut rng, &s, 64).unwrap();
        assert!(ts.iter().all(|&t| t < 2));
        let s100 = NoiseSchedule::new(ScheduleKind::default(), 100).unwrap();
        let a = sample_timesteps(&mut ChaCha8Rng::seed_from_u64(5), &s100, 16).unwrap();
        let b = sample_timesteps(&mut ChaCha8Rng::seed_from_u64(5), &s100, 16).unwrap();
        assert_eq!(a, b);
        assert!(sample_timesteps(&mut rng, &s100, 0).is_err());
    }

    #[test]
    fn denoise_loss_examples() {
        let eps = [0.5f32, -1.0, 2.0];
        assert_eq!(teacher_denoise_loss(&eps, &eps).unwrap(), 0.0);
        let shifted: Vec<f32> = eps.iter().map(|e| e + 1.0).collect();
        assert!((teacher_denoise_loss(&shifted, &eps).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(
            teacher_denoise_loss(&[0.0, 0.0], &[3.0, 4.0]).unwrap(),
            12.5
        );
        assert!(teacher_denoise_loss(&[0.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn forward_noise_is_linear() {
        let s = NoiseSchedule::new(ScheduleKind::default(), 100).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let z: Vec<f32> = (0..64).map(|_| StandardNormal.sample(&mut rng)).collect();
        let e: Vec<f32> = (0..64).map(|_| StandardNormal.sample(&mut rng)).collect();
        let a = -2.5f32;
        let za: Vec<f32> = z.iter().map(|v| a * v).collect();
        let ea: Vec<f32> = e.iter().map(|v| a * v).collect();
        for t in [0, 33, 99] {
            let lhs = forward_noise(&za, t, &ea, &s).unwrap();
            let rhs = forward_noise(&z, t, &e, &s).unwrap();
            for (l, r) in lhs.iter().zip(rhs) {
                assert!((l - a * r).abs() <= 1e-5 * (1.0 + l.abs()));
            }
        }
    }
}
