//! Linear variance schedule and the closed-form diffusion quantities.

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scene::SceneTensor;

/// Per-step diffusion constants, 1-indexed by convention: index `t - 1` holds
/// the values for step `t`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DiffusionSchedule {
    pub steps: usize,
    pub beta: Vec<f64>,
    pub alpha: Vec<f64>,
    pub alpha_bar: Vec<f64>,
    /// Sampling standard deviation sqrt(1 - alpha_t) = sqrt(beta_t).
    pub sigma: Vec<f64>,
}

/// Linear beta schedule from `beta1` to `beta_t_final` over `steps` steps.
pub fn make_schedule(steps: usize, beta1: f64, beta_t_final: f64) -> Result<DiffusionSchedule> {
    if steps < 2 {
        return Err(Error::Config("schedule needs at least 2 steps".into()));
    }
    if !(0.0 < beta1 && beta1 < beta_t_final && beta_t_final < 1.0) {
        return Err(Error::Config(format!(
            "require 0 < beta1 < betaT < 1, got ({beta1}, {beta_t_final})"
        )));
    }
    let mut beta = Vec::with_capacity(steps);
    let mut alpha = Vec::with_capacity(steps);
    let mut alpha_bar = Vec::with_capacity(steps);
    let mut sigma = Vec::with_capacity(steps);
    let mut prod = 1.0;
    for t in 1..=steps {
        let b = beta1 + (t - 1) as f64 * (beta_t_final - beta1) / (steps - 1) as f64;
        let a = 1.0 - b;
        prod *= a;
        beta.push(b);
        alpha.push(a);
        alpha_bar.push(prod);
        sigma.push(b.sqrt());
    }
    Ok(DiffusionSchedule {
        steps,
        beta,
        alpha,
        alpha_bar,
        sigma,
    })
}

impl DiffusionSchedule {
    pub fn default_t200() -> Self {
        make_schedule(200, 1e-4, 0.02).expect("default schedule parameters are valid")
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t < 1 || t > self.steps {
            return Err(Error::Contract(format!(
                "step {t} out of range 1..={}",
                self.steps
            )));
        }
        Ok(())
    }

    /// Closed-form forward marginal: `x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps`.
    pub fn q_sample(&self, x0: &SceneTensor, t: usize, eps: &Array2<f64>) -> Result<SceneTensor> {
        self.check_t(t)?;
        let ab = self.alpha_bar[t - 1];
        let values = &x0.values * ab.sqrt() + eps * (1.0 - ab).sqrt();
        Ok(SceneTensor { values })
    }

    /// Invert the forward marginal given the (predicted) noise:
    /// `x0 = (x_t - sqrt(1 - abar_t) eps) / sqrt(abar_t)`.
    pub fn predict_x0(&self, xt: &SceneTensor, t: usize, eps_hat: &Array2<f64>) -> Result<SceneTensor> {
        self.check_t(t)?;
        let ab = self.alpha_bar[t - 1];
        let values = (&xt.values - &(eps_hat * (1.0 - ab).sqrt())) / ab.sqrt();
        Ok(SceneTensor { values })
    }

    /// Reverse-step mean in the epsilon parameterization:
    /// `mu = (x_t - beta_t / sqrt(1 - abar_t) * eps) / sqrt(alpha_t)`.
    pub fn eps_mean(&self, xt: &SceneTensor, t: usize, eps_hat: &Array2<f64>) -> Result<Array2<f64>> {
        self.check_t(t)?;
        let a = self.alpha[t - 1];
        let ab = self.alpha_bar[t - 1];
        Ok((&xt.values - &(eps_hat * ((1.0 - a) / (1.0 - ab).sqrt()))) / a.sqrt())
    }

    /// Posterior mean `mu~(x0, x_t)` used when guidance perturbs the clean
    /// estimate.
    pub fn posterior_mean(&self, x0: &SceneTensor, xt: &SceneTensor, t: usize) -> Result<Array2<f64>> {
        self.check_t(t)?;
        let a = self.alpha[t - 1];
        let b = self.beta[t - 1];
        let ab = self.alpha_bar[t - 1];
        let ab_prev = if t >= 2 { self.alpha_bar[t - 2] } else { 1.0 };
        let c0 = ab_prev.sqrt() * b / (1.0 - ab);
        let ct = a.sqrt() * (1.0 - ab_prev) / (1.0 - ab);
        Ok(&x0.values * c0 + &xt.values * ct)
    }

    /// One ancestral step given the mean. No noise is added at t = 1.
    pub fn step_from_mean(
        &self,
        mean: Array2<f64>,
        t: usize,
        rng: &mut impl Rng,
    ) -> Result<SceneTensor> {
        self.check_t(t)?;
        if t == 1 {
            return Ok(SceneTensor { values: mean });
        }
        let sigma = self.sigma[t - 1];
        let noise = normal_matrix(rng, mean.nrows(), mean.ncols());
        Ok(SceneTensor {
            values: mean + noise * sigma,
        })
    }
}

/// Standard normal sample via Box-Muller on the uniform source, keeping the
/// crate independent of rand_distr.
pub fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    loop {
        let u1: f64 = rng.gen::<f64>();
        let u2: f64 = rng.gen::<f64>();
        if u1 > f64::MIN_POSITIVE {
            return (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
        }
    }
}

pub fn normal_matrix(rng: &mut impl Rng, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| standard_normal(rng))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    // High-precision reference for the cumulative product at t = 200,
    // computed with 40-digit arithmetic.
    const ALPHA_BAR_200: f64 = 0.1321827542506178;

    #[test]
    fn endpoints() {
        let s = DiffusionSchedule::default_t200();
        assert_eq!(s.beta[0], 1e-4);
        assert_relative_eq!(s.beta[199], 0.02, epsilon = 1e-15);
        assert_relative_eq!(s.alpha_bar[0], 0.9999, epsilon = 1e-15);
        assert_relative_eq!(s.alpha_bar[199], ALPHA_BAR_200, epsilon = 1e-12);
    }

    #[test]
    fn cumulative_product_matches_reverse_order_evaluation() {
        // same product accumulated in the opposite order: an independent
        // floating-point path agreeing to 1e-12 rules out indexing slips
        let s = DiffusionSchedule::default_t200();
        let mut prod = 1.0;
        for t in (1..=200).rev() {
            prod *= 1.0 - (1e-4 + (t - 1) as f64 * (0.02 - 1e-4) / 199.0);
        }
        assert_relative_eq!(s.alpha_bar[199], prod, epsilon = 1e-12);
    }

    #[test]
    fn sigma_is_sqrt_beta() {
        let s = DiffusionSchedule::default_t200();
        for t in 0..s.steps {
            assert_relative_eq!(s.sigma[t], s.beta[t].sqrt(), epsilon = 1e-15);
        }
    }

    #[test]
    fn bad_configs_rejected() {
        assert!(make_schedule(1, 1e-4, 0.02).is_err());
        assert!(make_schedule(10, 0.0, 0.02).is_err());
        assert!(make_schedule(10, 0.02, 1e-4).is_err());
        assert!(make_schedule(10, 1e-4, 1.0).is_err());
    }

    #[test]
    fn q_sample_predict_x0_round_trip() {
        let s = DiffusionSchedule::default_t200();
        let mut rng = ChaCha12Rng::seed_from_u64(11);
        for _ in 0..50 {
            let x0 = SceneTensor {
                values: normal_matrix(&mut rng, 4, 5),
            };
            let eps = normal_matrix(&mut rng, 4, 5);
            let t = rng.gen_range(1..=200);
            let xt = s.q_sample(&x0, t, &eps).unwrap();
            let back = s.predict_x0(&xt, t, &eps).unwrap();
            let err = (&back.values - &x0.values)
                .iter()
                .fold(0.0f64, |m, v| m.max(v.abs()));
            assert!(err <= 1e-9, "round trip error {err} at t={t}");
        }
    }

    #[test]
    fn reverse_mean_forms_agree() {
        // direct noise-parameterized mean vs the posterior mean evaluated at
        // the implied clean sample; algebraically identical
        let s = DiffusionSchedule::default_t200();
        let mut rng = ChaCha12Rng::seed_from_u64(12);
        for _ in 0..1000 {
            let xt = SceneTensor {
                values: normal_matrix(&mut rng, 3, 4),
            };
            let eps = normal_matrix(&mut rng, 3, 4);
            let t = rng.gen_range(1..=200);
            let direct = s.eps_mean(&xt, t, &eps).unwrap();
            let x0 = s.predict_x0(&xt, t, &eps).unwrap();
            let posterior = s.posterior_mean(&x0, &xt, t).unwrap();
            let err = (&direct - &posterior)
                .iter()
                .fold(0.0f64, |m, v| m.max(v.abs()));
            assert!(err <= 1e-9, "mean forms differ by {err} at t={t}");
        }
    }

    #[test]
    fn q_sample_moments_match_closed_form() {
        let s = DiffusionSchedule::default_t200();
        let mut rng = ChaCha12Rng::seed_from_u64(13);
        let t = 120;
        let x0 = SceneTensor {
            values: Array2::from_elem((1, 1), 0.7),
        };
        let n = 20_000;
        let mut sum = 0.0;
        let mut sum_sq = 0.0;
        for _ in 0..n {
            let eps = normal_matrix(&mut rng, 1, 1);
            let v = s.q_sample(&x0, t, &eps).unwrap().values[[0, 0]];
            sum += v;
            sum_sq += v * v;
        }
        let mean = sum / n as f64;
        let var = sum_sq / n as f64 - mean * mean;
        let ab = s.alpha_bar[t - 1];
        assert_relative_eq!(mean, 0.7 * ab.sqrt(), epsilon = 0.02);
        assert_relative_eq!(var, 1.0 - ab, epsilon = 0.03);
    }

    #[test]
    fn final_step_is_deterministic() {
        let s = DiffusionSchedule::default_t200();
        let mean = Array2::from_elem((2, 2), 0.5);
        let mut a = ChaCha12Rng::seed_from_u64(1);
        let mut b = ChaCha12Rng::seed_from_u64(2);
        let xa = s.step_from_mean(mean.clone(), 1, &mut a).unwrap();
        let xb = s.step_from_mean(mean.clone(), 1, &mut b).unwrap();
        assert_eq!(xa.values, xb.values);
        assert_eq!(xa.values, mean);
    }

    #[test]
    fn noisy_step_adds_schedule_scaled_noise() {
        let s = DiffusionSchedule::default_t200();
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        let mean = Array2::zeros((1, 1));
        let t = 150;
        let n = 20_000;
        let mut sum_sq = 0.0;
        for _ in 0..n {
            let v = s.step_from_mean(mean.clone(), t, &mut rng).unwrap().values[[0, 0]];
            sum_sq += v * v;
        }
        let var = sum_sq / n as f64;
        assert_relative_eq!(var, s.beta[t - 1], epsilon = 0.002);
    }

    #[test]
    fn out_of_range_step_rejected() {
        let s = DiffusionSchedule::default_t200();
        let x = SceneTensor {
            values: Array2::zeros((1, 1)),
        };
        let eps = Array2::zeros((1, 1));
        assert!(s.q_sample(&x, 0, &eps).is_err());
        assert!(s.q_sample(&x, 201, &eps).is_err());
    }

    #[test]
    fn standard_normal_moments() {
        let mut rng = ChaCha12Rng::seed_from_u64(77);
        let n = 100_000;
        let mut sum = 0.0;
        let mut sum_sq = 0.0;
        for _ in 0..n {
            let v = standard_normal(&mut rng);
            sum += v;
            sum_sq += v * v;
        }
        assert!((sum / n as f64).abs() < 0.02);
        assert_relative_eq!(sum_sq / n as f64, 1.0, epsilon = 0.02);
    }
}
