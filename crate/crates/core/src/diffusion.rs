//! Variance-preserving diffusion: schedule, forward noising, `z0`
//! reconstruction from a noise estimate, the combined training loss and
//! ancestral reverse sampling.

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::scalar::Scalar;

/// Linear beta schedule with cumulative products. Steps are indexed `1..=T`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ScheduleRepr", into = "ScheduleRepr")]
pub struct NoiseSchedule {
    beta1: f64,
    beta_t: f64,
    beta: Vec<f64>,
    alpha_bar: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct ScheduleRepr {
    #[serde(rename = "T")]
    t: usize,
    beta1: f64,
    #[serde(rename = "betaT")]
    beta_t: f64,
}

impl TryFrom<ScheduleRepr> for NoiseSchedule {
    type Error = Error;
    fn try_from(r: ScheduleRepr) -> Result<Self> {
        make_linear_schedule(r.t, r.beta1, r.beta_t)
    }
}

impl From<NoiseSchedule> for ScheduleRepr {
    fn from(s: NoiseSchedule) -> Self {
        ScheduleRepr {
            t: s.steps(),
            beta1: s.beta1,
            beta_t: s.beta_t,
        }
    }
}

pub fn make_linear_schedule(steps: usize, beta1: f64, beta_t: f64) -> Result<NoiseSchedule> {
    if steps == 0 {
        return Err(Error::invalid("schedule needs at least one step"));
    }
    if !(beta1 > 0.0 && beta1 <= beta_t && beta_t < 1.0) {
        return Err(Error::invalid(format!(
            "need 0 < beta1 <= betaT < 1, got beta1={beta1}, betaT={beta_t}"
        )));
    }
    let beta: Vec<f64> = (0..steps)
        .map(|i| {
            if steps == 1 {
                beta1
            } else {
                beta1 + (beta_t - beta1) * i as f64 / (steps - 1) as f64
            }
        })
        .collect();
    let alpha_bar: Vec<f64> = beta
        .iter()
        .scan(1.0, |acc, b| {
            *acc *= 1.0 - b;
            Some(*acc)
        })
        .collect();
    if alpha_bar.windows(2).any(|w| w[1] >= w[0]) || alpha_bar.iter().any(|&a| !(a > 0.0 && a < 1.0)) {
        return Err(Error::Numeric("alpha_bar is not strictly decreasing in (0, 1)".into()));
    }
    Ok(NoiseSchedule {
        beta1,
        beta_t,
        beta,
        alpha_bar,
    })
}

impl NoiseSchedule {
    /// The 1000-step schedule used for the math checks.
    pub fn standard() -> Self {
        make_linear_schedule(1000, 1e-4, 0.02).expect("valid constants")
    }

    /// Short schedule for the toy denoiser. The endpoints are the standard
    /// ones rescaled by 1000/50 so the chain still ends near pure noise.
    pub fn toy() -> Self {
        make_linear_schedule(50, 2e-3, 0.4).expect("valid constants")
    }

    pub fn steps(&self) -> usize {
        self.beta.len()
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t - 1]
    }

    /// `alpha_bar_t`; `alpha_bar(0)` is 1.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bar[t - 1]
        }
    }

    pub fn betas(&self) -> &[f64] {
        &self.beta
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    fn check_step(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(Error::invalid(format!("step {t} outside 1..={}", self.steps())));
        }
        Ok(())
    }
}

fn check_len(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::invalid(format!("tensor length mismatch: {a} vs {b}")));
    }
    Ok(())
}

/// `sqrt(alpha_bar_t) z0 + sqrt(1 - alpha_bar_t) eps`.
pub fn forward_sample<T: Scalar>(z0: &[T], t: usize, eps: &[T], sched: &NoiseSchedule) -> Result<Vec<T>> {
    check_len(z0.len(), eps.len())?;
    sched.check_step(t)?;
    let ab = sched.alpha_bar(t);
    let (a, b) = (T::of(ab.sqrt()), T::of((1.0 - ab).sqrt()));
    Ok(z0.iter().zip(eps).map(|(&z, &e)| a * z + b * e).collect())
}

/// `(zt - sqrt(1 - alpha_bar_t) eps_hat) / sqrt(alpha_bar_t)`.
pub fn reconstruct_z0<T: Scalar>(zt: &[T], eps_hat: &[T], t: usize, sched: &NoiseSchedule) -> Result<Vec<T>> {
    check_len(zt.len(), eps_hat.len())?;
    sched.check_step(t)?;
    let ab = sched.alpha_bar(t);
    let (a, b) = (T::of(ab.sqrt()), T::of((1.0 - ab).sqrt()));
    Ok(zt.iter().zip(eps_hat).map(|(&z, &e)| (z - b * e) / a).collect())
}

/// Mean squared error, accumulated in `f64`.
pub fn mse<T: Scalar>(a: &[T], b: &[T]) -> Result<f64> {
    check_len(a.len(), b.len())?;
    if a.is_empty() {
        return Err(Error::invalid("mean of an empty tensor"));
    }
    Ok(a.iter().zip(b).map(|(&x, &y)| (x.f64() - y.f64()).powi(2)).sum::<f64>() / a.len() as f64)
}

pub fn loss_noise<T: Scalar>(eps: &[T], eps_hat: &[T]) -> Result<f64> {
    mse(eps, eps_hat)
}

pub fn loss_z0<T: Scalar>(z0: &[T], z0_hat: &[T]) -> Result<f64> {
    mse(z0, z0_hat)
}

/// Loss terms of one training example.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct DiffLoss {
    pub noise: f64,
    pub z0: f64,
}

impl DiffLoss {
    pub fn total(&self) -> f64 {
        self.noise + self.z0
    }
}

/// `L_z0 + L_noise` with unit weights, plus the gradient w.r.t. `eps_hat`.
pub fn loss_diff<T: Scalar>(
    batch: &LatentBatch<T>,
    eps_hat: &[T],
    sched: &NoiseSchedule,
) -> Result<(DiffLoss, Vec<T>)> {
    let z0_hat = reconstruct_z0(&batch.zt, eps_hat, batch.t, sched)?;
    let loss = DiffLoss {
        noise: loss_noise(&batch.eps, eps_hat)?,
        z0: loss_z0(&batch.z0, &z0_hat)?,
    };
    let ab = sched.alpha_bar(batch.t);
    let n = eps_hat.len() as f64;
    // d z0_hat / d eps_hat = -sqrt((1 - ab) / ab)
    let dz = -((1.0 - ab) / ab).sqrt();
    let grad = eps_hat
        .iter()
        .zip(&batch.eps)
        .zip(z0_hat.iter().zip(&batch.z0))
        .map(|((&eh, &e), (&zh, &z))| T::of(2.0 / n * ((eh.f64() - e.f64()) + dz * (zh.f64() - z.f64()))))
        .collect();
    Ok((loss, grad))
}

/// One training example: clean signal, step, noise and the noised signal.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentBatch<T> {
    pub z0: Vec<T>,
    pub t: usize,
    pub eps: Vec<T>,
    pub zt: Vec<T>,
}

impl<T: Scalar> LatentBatch<T> {
    pub fn new(z0: Vec<T>, t: usize, eps: Vec<T>, sched: &NoiseSchedule) -> Result<Self> {
        let zt = forward_sample(&z0, t, &eps, sched)?;
        Ok(LatentBatch { z0, t, eps, zt })
    }

    /// Draws `t` uniformly in `1..=T` and unit Gaussian noise from `seed`.
    pub fn draw(z0: Vec<T>, sched: &NoiseSchedule, seed: u64) -> Result<Self> {
        use rand::Rng;
        let mut r = rng::stream(seed, 0);
        let t = r.random_range(1..=sched.steps());
        let eps = gaussian(z0.len(), &mut r);
        Self::new(z0, t, eps, sched)
    }
}

pub(crate) fn gaussian<T: Scalar>(n: usize, r: &mut impl rand::Rng) -> Vec<T> {
    (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(r);
            T::of(z)
        })
        .collect()
}

/// Ancestral DDPM step from `zt` to `z_{t-1}`; `noise` is ignored at `t = 1`.
pub fn ddpm_reverse_step<T: Scalar>(
    zt: &[T],
    eps_hat: &[T],
    t: usize,
    sched: &NoiseSchedule,
    noise: &[T],
) -> Result<Vec<T>> {
    sched.check_step(t)?;
    check_len(zt.len(), eps_hat.len())?;
    if t > 1 {
        check_len(zt.len(), noise.len())?;
    }
    let beta = sched.beta(t);
    let ab = sched.alpha_bar(t);
    let ab_prev = sched.alpha_bar(t - 1);
    let coef = beta / (1.0 - ab).sqrt();
    let scale = 1.0 / (1.0 - beta).sqrt();
    let sigma = if t > 1 {
        (beta * (1.0 - ab_prev) / (1.0 - ab)).sqrt()
    } else {
        0.0
    };
    Ok(zt
        .iter()
        .zip(eps_hat)
        .enumerate()
        .map(|(i, (&z, &e))| {
            let mu = (z.f64() - coef * e.f64()) * scale;
            let n = if t > 1 { noise[i].f64() } else { 0.0 };
            T::of(mu + sigma * n)
        })
        .collect())
}

/// Noise predictor driven by the reverse chain.
pub trait Denoiser<T, C: ?Sized> {
    fn predict_noise(&self, zt: &[T], t: usize, cond: &C) -> Result<Vec<T>>;
}

impl<T, C: ?Sized, F> Denoiser<T, C> for F
where
    F: Fn(&[T], usize, &C) -> Result<Vec<T>>,
{
    fn predict_noise(&self, zt: &[T], t: usize, cond: &C) -> Result<Vec<T>> {
        self(zt, t, cond)
    }
}

/// Wraps a denoiser so the implied z0 estimate stays within `[-bound, bound]`.
///
/// The clamped estimate is turned back into a noise prediction, so the
/// reverse step sees the same posterior mean as a sampler that clips z0 directly.
pub struct ClipDenoised<'a, D> {
    pub inner: &'a D,
    pub sched: &'a NoiseSchedule,
    pub bound: f64,
}

impl<T: Scalar, C: ?Sized, D: Denoiser<T, C>> Denoiser<T, C> for ClipDenoised<'_, D> {
    fn predict_noise(&self, zt: &[T], t: usize, cond: &C) -> Result<Vec<T>> {
        let eps = self.inner.predict_noise(zt, t, cond)?;
        check_len(zt.len(), eps.len())?;
        let ab = self.sched.alpha_bar(t);
        let (sa, sb) = (ab.sqrt(), (1.0 - ab).sqrt());
        Ok(zt
            .iter()
            .zip(&eps)
            .map(|(&z, &e)| {
                let x0 = ((z.f64() - sb * e.f64()) / sa).clamp(-self.bound, self.bound);
                T::of((z.f64() - sa * x0) / sb)
            })
            .collect())
    }
}

/// Initial state of [`sample_loop`]: unit Gaussian from stream 0 of `seed`.
pub fn initial_noise<T: Scalar>(len: usize, seed: u64) -> Vec<T> {
    gaussian(len, &mut rng::stream(seed, 0))
}

/// Step noise of [`sample_loop`] at step `t`: stream `t` of `seed`.
pub fn step_noise<T: Scalar>(len: usize, seed: u64, t: usize) -> Vec<T> {
    gaussian(len, &mut rng::stream(seed, t as u64))
}

/// Runs the reverse chain `t = T..1` from seeded pure noise.
pub fn sample_loop<T: Scalar, C: ?Sized>(
    denoiser: &impl Denoiser<T, C>,
    cond: &C,
    len: usize,
    sched: &NoiseSchedule,
    seed: u64,
) -> Result<Vec<T>> {
    let mut z = initial_noise(len, seed);
    for t in (1..=sched.steps()).rev() {
        let eps_hat = denoiser.predict_noise(&z, t, cond)?;
        let noise = if t > 1 { step_noise(len, seed, t) } else { Vec::new() };
        z = ddpm_reverse_step(&z, &eps_hat, t, sched, &noise)?;
        if z.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!(
                "reverse chain produced non-finite values at step {t}"
            )));
        }
    }
    Ok(z)
}
