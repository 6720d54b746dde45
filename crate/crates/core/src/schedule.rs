//! Noise schedule construction, forward noising, and the reverse sampling step.

use crate::error::{Error, Result};
use crate::Image;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

/// Precomputed variance tables for a diffusion process of `t_total` steps.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NoiseSchedule {
    pub t_total: usize,
    pub betas: Vec<f64>,
    pub alphas: Vec<f64>,
    pub alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    /// Linear beta schedule from `beta_start` to `beta_end` inclusive.
    pub fn linear(t_total: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if t_total < 1 {
            return Err(Error::InvalidSchedule("step count must be at least 1".into()));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::InvalidSchedule(format!(
                "betas must satisfy 0 < start <= end < 1, got [{beta_start}, {beta_end}]"
            )));
        }
        let betas: Vec<f64> = if t_total == 1 {
            vec![beta_start]
        } else {
            (0..t_total)
                .map(|i| {
                    beta_start + (beta_end - beta_start) * i as f64 / (t_total - 1) as f64
                })
                .collect()
        };
        Self::from_betas(betas)
    }

    /// Build tables from explicit betas.
    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() {
            return Err(Error::InvalidSchedule("empty beta sequence".into()));
        }
        if betas.iter().any(|&b| !(b > 0.0 && b < 1.0)) {
            return Err(Error::InvalidSchedule("all betas must lie in (0,1)".into()));
        }
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bars = Vec::with_capacity(betas.len());
        let mut prod = 1.0;
        for &a in &alphas {
            prod *= a;
            alpha_bars.push(prod);
        }
        Ok(Self {
            t_total: betas.len(),
            betas,
            alphas,
            alpha_bars,
        })
    }

    /// Desk-scale default: 200 steps, betas from 1e-4 to 0.02.
    pub fn default_desk() -> Self {
        Self::linear(200, 1e-4, 0.02).expect("default schedule is valid")
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t >= self.t_total {
            return Err(Error::TimestepOutOfRange {
                t,
                max: self.t_total,
            });
        }
        Ok(())
    }

    /// Closed-form forward noising: sqrt(abar_t) x0 + sqrt(1 - abar_t) eps.
    pub fn q_sample(&self, x0: &Image, t: usize, eps: &Image) -> Result<Image> {
        self.check_t(t)?;
        if x0.shape() != eps.shape() {
            return Err(Error::shape(x0.shape(), eps.shape()));
        }
        let ab = self.alpha_bars[t];
        Ok(x0 * ab.sqrt() + eps * (1.0 - ab).sqrt())
    }

    /// One ancestral reverse step. Adds fresh noise scaled by sqrt(beta_t)
    /// for t > 0 and is deterministic at t = 0.
    pub fn reverse_step<R: Rng>(
        &self,
        x_t: &Image,
        eps_hat: &Image,
        t: usize,
        rng: &mut R,
    ) -> Result<Image> {
        self.check_t(t)?;
        if x_t.shape() != eps_hat.shape() {
            return Err(Error::shape(x_t.shape(), eps_hat.shape()));
        }
        let beta = self.betas[t];
        let coef = beta / (1.0 - self.alpha_bars[t]).sqrt();
        let mut out = (x_t - &(eps_hat * coef)) / self.alphas[t].sqrt();
        if t > 0 {
            let sigma = beta.sqrt();
            for v in out.iter_mut() {
                let z: f64 = rng.sample(StandardNormal);
                *v += sigma * z;
            }
        }
        Ok(out)
    }

    /// Subsequence schedule for sampling in fewer steps. Returns the reduced
    /// schedule together with the original timestep each reduced index maps to.
    pub fn respace(&self, steps: usize) -> Result<(NoiseSchedule, Vec<usize>)> {
        if steps < 1 || steps > self.t_total {
            return Err(Error::InvalidSchedule(format!(
                "respace steps must lie in [1, {}], got {steps}",
                self.t_total
            )));
        }
        // evenly spaced original timesteps, always ending at t_total - 1
        let map: Vec<usize> = (0..steps)
            .map(|i| {
                if steps == 1 {
                    self.t_total - 1
                } else {
                    i * (self.t_total - 1) / (steps - 1)
                }
            })
            .collect();
        let mut betas = Vec::with_capacity(steps);
        let mut prev_ab = 1.0;
        for &orig in &map {
            let ab = self.alpha_bars[orig];
            betas.push((1.0 - ab / prev_ab).clamp(1e-12, 0.999_999));
            prev_ab = ab;
        }
        Ok((NoiseSchedule::from_betas(betas)?, map))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn single_step_tables() {
        let s = NoiseSchedule::linear(1, 0.1, 0.1).unwrap();
        assert_eq!(s.betas, vec![0.1]);
        assert!((s.alpha_bars[0] - 0.9).abs() < 1e-12);
    }

    #[test]
    fn four_step_tables() {
        let s = NoiseSchedule::linear(4, 0.1, 0.4).unwrap();
        let want_betas = [0.1, 0.2, 0.3, 0.4];
        let want_bars = [0.9, 0.72, 0.504, 0.3024];
        for i in 0..4 {
            assert!((s.betas[i] - want_betas[i]).abs() < 1e-12, "beta[{i}]");
            assert!((s.alpha_bars[i] - want_bars[i]).abs() < 1e-12, "abar[{i}]");
        }
    }

    #[test]
    fn long_schedule_monotone_and_small() {
        let s = NoiseSchedule::linear(1000, 1e-4, 0.02).unwrap();
        for t in 1..1000 {
            assert!(s.alpha_bars[t] < s.alpha_bars[t - 1]);
        }
        assert!(s.alpha_bars[999] < 0.01);
    }

    #[test]
    fn rejects_bad_parameters() {
        assert!(NoiseSchedule::linear(0, 0.1, 0.2).is_err());
        assert!(NoiseSchedule::linear(10, 0.0, 0.2).is_err());
        assert!(NoiseSchedule::linear(10, 0.3, 0.2).is_err());
        assert!(NoiseSchedule::linear(10, 0.1, 1.0).is_err());
    }

    #[test]
    fn q_sample_zero_noise() {
        let s = NoiseSchedule::linear(4, 0.1, 0.4).unwrap();
        let x0 = Array3::from_elem((1, 2, 2), 0.5);
        let eps = Array3::zeros((1, 2, 2));
        let out = s.q_sample(&x0, 2, &eps).unwrap();
        let want = 0.5 * s.alpha_bars[2].sqrt();
        for &v in out.iter() {
            assert!((v - want).abs() < 1e-12);
        }
    }

    #[test]
    fn q_sample_identity_limit() {
        let s = NoiseSchedule::linear(4, 1e-9, 1e-9).unwrap();
        let x0 = Array3::from_shape_fn((1, 3, 3), |(_, y, x)| (y * 3 + x) as f64 / 10.0);
        let eps = Array3::from_elem((1, 3, 3), 1.0);
        let out = s.q_sample(&x0, 3, &eps).unwrap();
        for (a, b) in out.iter().zip(x0.iter()) {
            assert!((a - b).abs() < 1e-3);
        }
    }

    #[test]
    fn q_sample_monte_carlo_moments() {
        let s = NoiseSchedule::default_desk();
        let t = 120;
        let x0 = Array3::zeros((1, 1, 1));
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let n = 10_000;
        let mut sum = 0.0;
        let mut sumsq = 0.0;
        for _ in 0..n {
            let eps = Array3::from_elem((1, 1, 1), rng.sample::<f64, _>(StandardNormal));
            let v = s.q_sample(&x0, t, &eps).unwrap()[[0, 0, 0]];
            sum += v;
            sumsq += v * v;
        }
        let mean = sum / n as f64;
        let var = sumsq / n as f64 - mean * mean;
        let want = 1.0 - s.alpha_bars[t];
        assert!(mean.abs() < 0.05, "mean {mean}");
        assert!((var - want).abs() / want < 0.02, "var {var} want {want}");
    }

    #[test]
    fn reverse_step_t0_deterministic() {
        let s = NoiseSchedule::default_desk();
        let x = Array3::from_elem((1, 2, 2), 0.3);
        let e = Array3::from_elem((1, 2, 2), 0.1);
        let mut r1 = ChaCha8Rng::seed_from_u64(1);
        let mut r2 = ChaCha8Rng::seed_from_u64(999);
        let a = s.reverse_step(&x, &e, 0, &mut r1).unwrap();
        let b = s.reverse_step(&x, &e, 0, &mut r2).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn single_step_inversion() {
        let s = NoiseSchedule::linear(1, 0.1, 0.1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x0 = Array3::from_shape_fn((2, 4, 4), |_| rng.sample::<f64, _>(StandardNormal));
        let eps = Array3::from_shape_fn((2, 4, 4), |_| rng.sample::<f64, _>(StandardNormal));
        let x1 = s.q_sample(&x0, 0, &eps).unwrap();
        let rec = s.reverse_step(&x1, &eps, 0, &mut rng).unwrap();
        for (a, b) in rec.iter().zip(x0.iter()) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn reverse_step_seeded_determinism() {
        let s = NoiseSchedule::default_desk();
        let x = Array3::from_elem((1, 4, 4), 0.2);
        let e = Array3::from_elem((1, 4, 4), -0.1);
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(11);
            s.reverse_step(&x, &e, 50, &mut rng).unwrap()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn respace_endpoints_and_tables() {
        let s = NoiseSchedule::default_desk();
        let (r, map) = s.respace(50).unwrap();
        assert_eq!(r.t_total, 50);
        assert_eq!(map[0], 0);
        assert_eq!(map[49], 199);
        // reduced cumulative products agree with the original at mapped steps
        for (i, &orig) in map.iter().enumerate() {
            assert!((r.alpha_bars[i] - s.alpha_bars[orig]).abs() < 1e-9);
        }
        // full respace is the identity
        let (full, full_map) = s.respace(200).unwrap();
        assert_eq!(full_map, (0..200).collect::<Vec<_>>());
        for t in 0..200 {
            assert!((full.alpha_bars[t] - s.alpha_bars[t]).abs() < 1e-12);
        }
    }

    proptest! {
        #[test]
        fn alpha_bars_strictly_decrease(
            t in 2usize..64,
            start in 1e-6f64..0.3,
            span in 0.0f64..0.5,
        ) {
            let end = (start + span).min(0.9);
            let s = NoiseSchedule::linear(t, start, end).unwrap();
            for i in 1..t {
                prop_assert!(s.alpha_bars[i] < s.alpha_bars[i - 1]);
            }
            prop_assert_eq!(s.betas.len(), t);
            prop_assert_eq!(s.alphas.len(), t);
        }
    }
}
