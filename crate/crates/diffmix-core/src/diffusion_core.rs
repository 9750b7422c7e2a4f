//! Diffusion mathematics: noise schedule, forward process, training
//! losses, reverse-step statistics and classifier-free guidance algebra.
//!
//! Steps are 1-based: `t` runs over [1, T], with the convention
//! `alpha_bar(0) = 1`. All math here is f64; the denoiser network runs in
//! f32 and converts at its boundary.

use ndarray::ArrayD;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DiffusionError {
    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),
    #[error("shape mismatch: {left:?} vs {right:?}")]
    ShapeMismatch { left: Vec<usize>, right: Vec<usize> },
    #[error("step {t} out of range [1, {t_max}]")]
    StepOutOfRange { t: usize, t_max: usize },
}

fn check_shape(a: &ArrayD<f64>, b: &ArrayD<f64>) -> Result<(), DiffusionError> {
    if a.shape() != b.shape() {
        return Err(DiffusionError::ShapeMismatch {
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        });
    }
    Ok(())
}

/// Per-step sampling variance choice for ancestral sampling.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum VarianceMode {
    /// sigma_t^2 = posterior variance (the "small" fixed choice).
    FixedSmall,
    /// sigma_t^2 = beta_t (the "large" fixed choice).
    FixedLarge,
    /// Interpolated from the network's v output (the default).
    Learned,
}

/// Beta/alpha tables for a T-step linear variance schedule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
    posterior_variance: Vec<f64>,
    /// log posterior variance with the t=1 slot clipped to the t=2 value
    /// (posterior variance at t=1 is exactly 0, whose log is undefined);
    /// falls back to log beta_1 when T = 1.
    posterior_log_variance_clipped: Vec<f64>,
    beta_start: f64,
    beta_end: f64,
}

impl NoiseSchedule {
    pub fn t_count(&self) -> usize {
        self.beta.len()
    }

    pub fn beta_start(&self) -> f64 {
        self.beta_start
    }

    pub fn beta_end(&self) -> f64 {
        self.beta_end
    }

    fn check_t(&self, t: usize) -> Result<(), DiffusionError> {
        if t < 1 || t > self.t_count() {
            return Err(DiffusionError::StepOutOfRange { t, t_max: self.t_count() });
        }
        Ok(())
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t - 1]
    }

    /// alpha_bar(t) with alpha_bar(0) = 1.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bar[t - 1]
        }
    }

    /// Posterior variance beta_tilde_t = beta_t (1 - alpha_bar_{t-1}) / (1 - alpha_bar_t).
    pub fn posterior_variance(&self, t: usize) -> f64 {
        self.posterior_variance[t - 1]
    }

    pub fn posterior_log_variance_clipped(&self, t: usize) -> f64 {
        self.posterior_log_variance_clipped[t - 1]
    }

    /// Fixed per-step sampling std for the sigma_t I covariance form.
    pub fn sigma(&self, t: usize, mode: VarianceMode) -> f64 {
        match mode {
            VarianceMode::FixedSmall => self.posterior_variance(t).sqrt(),
            VarianceMode::FixedLarge | VarianceMode::Learned => self.beta(t).sqrt(),
        }
    }

    /// Model log-variance exp-interpolation between log beta_t (v=1) and
    /// log beta_tilde_t (v=0), using the clipped table so t=1 stays finite.
    pub fn model_log_variance(&self, t: usize, v: f64) -> f64 {
        v * self.beta(t).ln() + (1.0 - v) * self.posterior_log_variance_clipped(t)
    }
}

/// Builds a linear beta schedule over T steps with all derived tables.
pub fn build_schedule(
    t_count: usize,
    beta_start: f64,
    beta_end: f64,
) -> Result<NoiseSchedule, DiffusionError> {
    if t_count < 1 {
        return Err(DiffusionError::InvalidSchedule("T must be at least 1".into()));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(DiffusionError::InvalidSchedule(format!(
            "need 0 < beta_start <= beta_end < 1, got [{beta_start}, {beta_end}]"
        )));
    }
    let beta: Vec<f64> = if t_count == 1 {
        vec![beta_start]
    } else {
        (0..t_count)
            .map(|i| {
                beta_start + (beta_end - beta_start) * i as f64 / (t_count - 1) as f64
            })
            .collect()
    };
    let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
    let mut alpha_bar = Vec::with_capacity(t_count);
    let mut acc = 1.0f64;
    for &a in &alpha {
        acc *= a;
        alpha_bar.push(acc);
    }
    let posterior_variance: Vec<f64> = (1..=t_count)
        .map(|t| {
            let prev = if t == 1 { 1.0 } else { alpha_bar[t - 2] };
            beta[t - 1] * (1.0 - prev) / (1.0 - alpha_bar[t - 1])
        })
        .collect();
    let posterior_log_variance_clipped: Vec<f64> = (0..t_count)
        .map(|i| {
            let v = if i == 0 {
                if t_count > 1 {
                    posterior_variance[1]
                } else {
                    beta[0]
                }
            } else {
                posterior_variance[i]
            };
            v.ln()
        })
        .collect();
    Ok(NoiseSchedule {
        beta,
        alpha,
        alpha_bar,
        posterior_variance,
        posterior_log_variance_clipped,
        beta_start,
        beta_end,
    })
}

/// Fills a tensor with standard normal draws.
pub fn standard_normal<R: Rng>(shape: &[usize], rng: &mut R) -> ArrayD<f64> {
    ArrayD::from_shape_simple_fn(shape.to_vec(), || rng.sample(StandardNormal))
}

/// Closed-form marginal draw: sqrt(alpha_bar_t) y0 + sqrt(1 - alpha_bar_t) eps.
pub fn q_sample(
    y0: &ArrayD<f64>,
    t: usize,
    eps: &ArrayD<f64>,
    sched: &NoiseSchedule,
) -> Result<ArrayD<f64>, DiffusionError> {
    sched.check_t(t)?;
    check_shape(y0, eps)?;
    let ab = sched.alpha_bar(t);
    Ok(y0 * ab.sqrt() + eps * (1.0 - ab).sqrt())
}

/// Single forward step: draws from N(sqrt(1 - beta_t) y_prev, beta_t I).
pub fn forward_step<R: Rng>(
    y_prev: &ArrayD<f64>,
    t: usize,
    sched: &NoiseSchedule,
    rng: &mut R,
) -> Result<ArrayD<f64>, DiffusionError> {
    sched.check_t(t)?;
    let b = sched.beta(t);
    let noise = standard_normal(y_prev.shape(), rng);
    Ok(y_prev * (1.0 - b).sqrt() + noise * b.sqrt())
}

/// Predicted noise and variance-interpolation coefficient for one noisy
/// input. Shapes match the noisy input; v lies in [0, 1] elementwise.
#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserOutput {
    pub eps_hat: ArrayD<f64>,
    pub v: ArrayD<f64>,
}

impl DenoiserOutput {
    pub fn validate_against(&self, input: &ArrayD<f64>) -> Result<(), DiffusionError> {
        check_shape(&self.eps_hat, input)?;
        check_shape(&self.v, input)?;
        if self.v.iter().any(|x| !x.is_finite()) {
            return Err(DiffusionError::InvalidSchedule(
                "non-finite variance coefficient".into(),
            ));
        }
        Ok(())
    }
}

/// Mean squared error between the injected and the predicted noise.
pub fn simple_loss(eps: &ArrayD<f64>, out: &DenoiserOutput) -> Result<f64, DiffusionError> {
    check_shape(eps, &out.eps_hat)?;
    let n = eps.len() as f64;
    let sum: f64 = eps
        .iter()
        .zip(out.eps_hat.iter())
        .map(|(&a, &b)| (a - b) * (a - b))
        .sum();
    Ok(sum / n)
}

/// Analytic gradient of [`simple_loss`] with respect to eps_hat:
/// 2 (eps_hat - eps) / N.
pub fn simple_loss_grad(
    eps: &ArrayD<f64>,
    out: &DenoiserOutput,
) -> Result<ArrayD<f64>, DiffusionError> {
    check_shape(eps, &out.eps_hat)?;
    let n = eps.len() as f64;
    Ok((&out.eps_hat - eps) * (2.0 / n))
}

/// True posterior mean of q(y_{t-1} | y_t, y0).
fn posterior_mean(y0: &ArrayD<f64>, y_t: &ArrayD<f64>, t: usize, sched: &NoiseSchedule) -> ArrayD<f64> {
    let ab = sched.alpha_bar(t);
    let ab_prev = sched.alpha_bar(t - 1);
    let b = sched.beta(t);
    let coef0 = ab_prev.sqrt() * b / (1.0 - ab);
    let coef_t = sched.alpha(t).sqrt() * (1.0 - ab_prev) / (1.0 - ab);
    y0 * coef0 + y_t * coef_t
}

/// Model mean mu_theta computed from the predicted noise.
fn model_mean(y_t: &ArrayD<f64>, t: usize, eps_hat: &ArrayD<f64>, sched: &NoiseSchedule) -> ArrayD<f64> {
    let ab = sched.alpha_bar(t);
    let b = sched.beta(t);
    (y_t - &(eps_hat * (b / (1.0 - ab).sqrt()))) / sched.alpha(t).sqrt()
}

fn normal_cdf(z: f64) -> f64 {
    0.5 * (1.0 + libm::erf(z / std::f64::consts::SQRT_2))
}

/// Per-element discretized Gaussian log-likelihood of x under N(mu, var)
/// with 256 uniform bins over [-1, 1]. Returns (nll, d_nll / d_log_var).
fn discretized_gaussian_nll(x: f64, mu: f64, log_var: f64) -> (f64, f64) {
    let sigma = (0.5 * log_var).exp();
    let inv = 1.0 / sigma;
    let half_bin = 1.0 / 255.0;
    let z_hi = (x + half_bin - mu) * inv;
    let z_lo = (x - half_bin - mu) * inv;
    let phi = |z: f64| (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt();

    // Edge bins absorb the tails.
    let (p, dp_dsigma) = if x < -0.999 {
        let p = normal_cdf(z_hi);
        (p, -phi(z_hi) * z_hi * inv)
    } else if x > 0.999 {
        let p = 1.0 - normal_cdf(z_lo);
        (p, phi(z_lo) * z_lo * inv)
    } else {
        let p = normal_cdf(z_hi) - normal_cdf(z_lo);
        (p, (phi(z_lo) * z_lo - phi(z_hi) * z_hi) * inv)
    };
    let p_safe = p.max(1e-12);
    let nll = -p_safe.ln();
    // d nll / d log_var = -(1/p) dp/dsigma * dsigma/dlogvar, dsigma/dlogvar = sigma/2.
    let grad = if p > 1e-12 { -(dp_dsigma / p_safe) * (sigma * 0.5) } else { 0.0 };
    (nll, grad)
}

/// Variational term for step t: mean elementwise KL between the true
/// posterior q(y_{t-1} | y_t, y0) and p_theta(y_{t-1} | y_t), in nats.
/// The model variance interpolates exp(v log beta_t + (1-v) log beta_tilde_t)
/// and the model mean treats eps_hat as constant (no gradient flows through
/// it). At t = 1 this is the discretized negative log-likelihood of y0.
pub fn vlb_term(
    y0: &ArrayD<f64>,
    y_t: &ArrayD<f64>,
    t: usize,
    out: &DenoiserOutput,
    sched: &NoiseSchedule,
) -> Result<f64, DiffusionError> {
    vlb_term_with_grad_v(y0, y_t, t, out, sched).map(|(value, _)| value)
}

/// [`vlb_term`] plus its elementwise gradient with respect to v (the only
/// trainable path: the mean is frozen, matching learned-variance training).
pub fn vlb_term_with_grad_v(
    y0: &ArrayD<f64>,
    y_t: &ArrayD<f64>,
    t: usize,
    out: &DenoiserOutput,
    sched: &NoiseSchedule,
) -> Result<(f64, ArrayD<f64>), DiffusionError> {
    sched.check_t(t)?;
    check_shape(y0, y_t)?;
    out.validate_against(y_t)?;

    let n = y0.len() as f64;
    let mu_p = model_mean(y_t, t, &out.eps_hat, sched);
    // d log_var / d v is constant across elements for a given t.
    let dlogvar_dv = sched.beta(t).ln() - sched.posterior_log_variance_clipped(t);
    let mut grad = ArrayD::<f64>::zeros(y0.raw_dim());
    let mut total = 0.0f64;

    if t == 1 {
        for (i, ((&x, &mu), &v)) in y0.iter().zip(mu_p.iter()).zip(out.v.iter()).enumerate() {
            let log_var = sched.model_log_variance(t, v);
            let (nll, dnll_dlogvar) = discretized_gaussian_nll(x, mu, log_var);
            total += nll;
            grad.as_slice_mut().unwrap()[i] = dnll_dlogvar * dlogvar_dv / n;
        }
    } else {
        let mu_q = posterior_mean(y0, y_t, t, sched);
        let var_q = sched.posterior_variance(t);
        let log_var_q = var_q.ln();
        for (i, ((&mq, &mp), &v)) in mu_q.iter().zip(mu_p.iter()).zip(out.v.iter()).enumerate() {
            let log_var_p = sched.model_log_variance(t, v);
            let delta = mq - mp;
            // KL(N(mq, vq) || N(mp, vp)) in nats.
            let kl = 0.5
                * (log_var_p - log_var_q
                    + (var_q + delta * delta) * (-log_var_p).exp()
                    - 1.0);
            total += kl;
            let dkl_dlogvar =
                0.5 - 0.5 * (var_q + delta * delta) * (-log_var_p).exp();
            grad.as_slice_mut().unwrap()[i] = dkl_dlogvar * dlogvar_dv / n;
        }
    }
    Ok((total / n, grad))
}

/// Classifier-free guidance: eps_cond + s (eps_cond - eps_uncond).
pub fn guided_eps(
    eps_cond: &ArrayD<f64>,
    eps_uncond: &ArrayD<f64>,
    s: f64,
) -> Result<ArrayD<f64>, DiffusionError> {
    check_shape(eps_cond, eps_uncond)?;
    if s < 0.0 {
        return Err(DiffusionError::InvalidSchedule(format!(
            "guidance scale must be non-negative, got {s}"
        )));
    }
    Ok(eps_cond + &((eps_cond - eps_uncond) * s))
}

/// Reverse-step statistics: model mean mu_theta and elementwise variance
/// Sigma_theta = exp(v log beta_t + (1-v) log beta_tilde_t).
pub fn reverse_step_stats(
    y_t: &ArrayD<f64>,
    t: usize,
    eps_hat: &ArrayD<f64>,
    v: &ArrayD<f64>,
    sched: &NoiseSchedule,
) -> Result<(ArrayD<f64>, ArrayD<f64>), DiffusionError> {
    sched.check_t(t)?;
    check_shape(y_t, eps_hat)?;
    check_shape(y_t, v)?;
    let mean = model_mean(y_t, t, eps_hat, sched);
    let log_beta = sched.beta(t).ln();
    let post = sched.posterior_variance(t);
    let log_post_clipped = sched.posterior_log_variance_clipped(t);
    let variance = v.mapv(|vi| {
        if post > 0.0 {
            (vi * log_beta + (1.0 - vi) * post.ln()).exp()
        } else {
            // t = 1: beta_tilde is exactly 0; use the clipped log so the
            // interpolation stays finite for every v.
            (vi * log_beta + (1.0 - vi) * log_post_clipped).exp()
        }
    });
    Ok((mean, variance))
}

/// One ancestral reverse step (test oracle; production sampling is DDIM).
pub fn ancestral_step<R: Rng>(
    y_t: &ArrayD<f64>,
    t: usize,
    out: &DenoiserOutput,
    sched: &NoiseSchedule,
    mode: VarianceMode,
    rng: &mut R,
) -> Result<ArrayD<f64>, DiffusionError> {
    let (mean, learned_var) = reverse_step_stats(y_t, t, &out.eps_hat, &out.v, sched)?;
    if t == 1 {
        return Ok(mean);
    }
    let noise = standard_normal(y_t.shape(), rng);
    let stepped = match mode {
        VarianceMode::Learned => mean + noise * learned_var.mapv(f64::sqrt),
        fixed => mean + noise * sched.sigma(t, fixed),
    };
    Ok(stepped)
}
