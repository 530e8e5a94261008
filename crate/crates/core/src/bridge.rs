//! Paired-data Schrödinger bridge between the pre-quantized embedding `x0`
//! and the first-layer code embedding `x1`.
//!
//! With zero linear drift and a Dirac start, the intermediate state given both
//! endpoints is Gaussian:
//!
//! ```text
//! x_t ~ N( σ̄²/(σ̄²+σ²)·x0 + σ²/(σ̄²+σ²)·x1 ,  σ²σ̄²/(σ̄²+σ²)·I )
//! σ²(t) = ∫₀ᵗ β,   σ̄²(t) = ∫ₜ¹ β
//! ```
//!
//! A denoiser is trained to predict `(x_t − x0)/σ(t)`, and samples are drawn
//! backward from `x1` with the Gaussian posterior `p(x_s | x̂0, x_t)`.

use ndarray::{Array2, Zip};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Grid resolution used by default (`t ∈ {0, 1/1000, …, 1}`).
pub const DEFAULT_STEPS: usize = 1000;
pub const DEFAULT_BETA_PEAK: f64 = 0.3;
pub const DEFAULT_BETA_MIN: f64 = 1e-4;
/// NFE values swept in reports.
pub const NFE_SWEEP: [usize; 5] = [1, 4, 7, 16, 32];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub beta_peak: f64,
    pub beta_min: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            steps: DEFAULT_STEPS,
            beta_peak: DEFAULT_BETA_PEAK,
            beta_min: DEFAULT_BETA_MIN,
        }
    }
}

/// Piecewise-constant β on the intervals `((k−1)/T, k/T]` with exact
/// cumulative sums on the grid.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    beta: Vec<f64>,
    sigma2: Vec<f64>,
    sigma2_bar: Vec<f64>,
}

impl NoiseSchedule {
    /// Triangular β: `beta_min` at both ends rising linearly to `beta_peak` at
    /// `t = 1/2`, evaluated at interval midpoints.
    pub fn symmetric(steps: usize, beta_peak: f64, beta_min: f64) -> Result<Self> {
        if steps < 2 {
            return Err(Error::invalid(format!("schedule needs at least 2 steps, got {steps}")));
        }
        if !(beta_peak.is_finite() && beta_peak > 0.0) || !(beta_min.is_finite() && beta_min >= 0.0) {
            return Err(Error::invalid("beta_peak must be positive and beta_min non-negative"));
        }
        if beta_min > beta_peak {
            return Err(Error::invalid("beta_min exceeds beta_peak"));
        }
        // Integer form of 1 − |2m − 1| with m = (k − ½)/T keeps β(k) = β(T+1−k) bitwise.
        let t = steps as i64;
        let beta = (1..=t)
            .map(|k| {
                let u = t - (2 * k - 1 - t).abs();
                beta_min + (beta_peak - beta_min) * u as f64 / t as f64
            })
            .collect();
        Self::from_betas(beta)
    }

    pub fn from_config(cfg: &ScheduleConfig) -> Result<Self> {
        Self::symmetric(cfg.steps, cfg.beta_peak, cfg.beta_min)
    }

    pub fn from_betas(beta: Vec<f64>) -> Result<Self> {
        if beta.len() < 2 {
            return Err(Error::invalid("schedule needs at least 2 steps"));
        }
        if beta.iter().any(|b| !(b.is_finite() && *b >= 0.0)) {
            return Err(Error::invalid("betas must be finite and non-negative"));
        }
        let t = beta.len();
        let inc: Vec<f64> = beta.iter().map(|b| b / t as f64).collect();
        let mut sigma2 = vec![0.0; t + 1];
        for k in 1..=t {
            sigma2[k] = sigma2[k - 1] + inc[k - 1];
        }
        // Summed from the end with the same recurrence, so a symmetric β gives
        // σ̄²(1 − t) = σ²(t) exactly.
        let mut sigma2_bar = vec![0.0; t + 1];
        for k in (0..t).rev() {
            sigma2_bar[k] = sigma2_bar[k + 1] + inc[k];
        }
        if sigma2[t] <= 0.0 {
            return Err(Error::invalid("schedule has zero total variance"));
        }
        Ok(Self {
            beta,
            sigma2,
            sigma2_bar,
        })
    }

    /// Number of grid intervals `T`.
    pub fn steps(&self) -> usize {
        self.beta.len()
    }

    pub fn time(&self, k: usize) -> f64 {
        k as f64 / self.steps() as f64
    }

    /// Grid index of `t`, or an error if `t` is not (within 1e−9) on the grid.
    pub fn grid_index(&self, t: f64) -> Result<usize> {
        let x = t * self.steps() as f64;
        let k = x.round();
        if !(0.0..=self.steps() as f64).contains(&k) || (x - k).abs() > 1e-9 * self.steps() as f64 {
            return Err(Error::invalid(format!("t = {t} is not on the {}-step grid", self.steps())));
        }
        Ok(k as usize)
    }

    pub fn beta(&self) -> &[f64] {
        &self.beta
    }

    pub fn sigma2(&self, k: usize) -> f64 {
        self.sigma2[k]
    }

    pub fn sigma2_bar(&self, k: usize) -> f64 {
        self.sigma2_bar[k]
    }

    pub fn sigma(&self, k: usize) -> f64 {
        self.sigma2[k].sqrt()
    }

    pub fn total_variance(&self) -> f64 {
        self.sigma2[self.steps()]
    }

    /// `(w0, w1, var)` of the bridge marginal at grid index `k`.
    pub fn marginal(&self, k: usize) -> (f64, f64, f64) {
        let s2 = self.sigma2[k];
        let sb2 = self.sigma2_bar[k];
        let denom = s2 + sb2;
        (sb2 / denom, s2 / denom, s2 * sb2 / denom)
    }

    /// `k,t,beta,sigma2,sigma2_bar` rows; β is reported as 0 at `k = 0`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("k,t,beta,sigma2,sigma2_bar\n");
        for k in 0..=self.steps() {
            let b = if k == 0 { 0.0 } else { self.beta[k - 1] };
            out.push_str(&format!(
                "{k},{:.6},{:.9e},{:.9e},{:.9e}\n",
                self.time(k),
                b,
                self.sigma2[k],
                self.sigma2_bar[k]
            ));
        }
        out
    }

    /// Stable digest of the β values.
    pub fn fingerprint(&self) -> String {
        let bytes: Vec<u8> = self.beta.iter().flat_map(|b| b.to_le_bytes()).collect();
        crate::sha256_hex(&bytes)
    }
}

fn check_same_shape(a: &Array2<f64>, b: &Array2<f64>) -> Result<()> {
    Error::check_dim(a.nrows(), b.nrows())?;
    Error::check_dim(a.ncols(), b.ncols())
}

fn check_index(sched: &NoiseSchedule, k: usize) -> Result<()> {
    if k > sched.steps() {
        return Err(Error::OutOfRange {
            index: k,
            limit: sched.steps() + 1,
        });
    }
    Ok(())
}

/// Draws `x_t` from the bridge marginal at grid index `k`.
pub fn sample_xt(
    x0: &Array2<f64>,
    x1: &Array2<f64>,
    k: usize,
    sched: &NoiseSchedule,
    rng: &mut impl Rng,
) -> Result<Array2<f64>> {
    check_same_shape(x0, x1)?;
    check_index(sched, k)?;
    let (w0, w1, var) = sched.marginal(k);
    let sd = var.sqrt();
    let mut out = Array2::<f64>::zeros(x0.raw_dim());
    if sd > 0.0 {
        Zip::from(&mut out).and(x0).and(x1).for_each(|o, &a, &b| {
            let n: f64 = rng.sample(StandardNormal);
            *o = w0 * a + w1 * b + sd * n;
        });
    } else {
        Zip::from(&mut out).and(x0).and(x1).for_each(|o, &a, &b| *o = w0 * a + w1 * b);
    }
    Ok(out)
}

/// Regression target `(x_t − x0)/σ(t)`; undefined at `k = 0`.
pub fn sb_target(xt: &Array2<f64>, x0: &Array2<f64>, k: usize, sched: &NoiseSchedule) -> Result<Array2<f64>> {
    check_same_shape(xt, x0)?;
    check_index(sched, k)?;
    let sigma = sched.sigma(k);
    if k == 0 || sigma <= 0.0 {
        return Err(Error::invalid("bridge target is undefined where sigma(t) = 0"));
    }
    Ok((xt - x0) / sigma)
}

/// Noise-prediction network used by the backward sampler.
pub trait Denoiser {
    /// Predicted `(x − x0)/σ(t_k)` for state `x` at grid index `k`, conditioned on `x1`.
    fn predict(&self, x: &Array2<f64>, x1: &Array2<f64>, k: usize) -> Result<Array2<f64>>;
}

impl<D: Denoiser + ?Sized> Denoiser for &D {
    fn predict(&self, x: &Array2<f64>, x1: &Array2<f64>, k: usize) -> Result<Array2<f64>> {
        (**self).predict(x, x1, k)
    }
}

/// Denoiser that knows the true `x0`; its predictions are exact targets.
#[derive(Debug, Clone)]
pub struct OracleDenoiser<'a> {
    pub x0: Array2<f64>,
    pub schedule: &'a NoiseSchedule,
}

impl Denoiser for OracleDenoiser<'_> {
    fn predict(&self, x: &Array2<f64>, _x1: &Array2<f64>, k: usize) -> Result<Array2<f64>> {
        sb_target(x, &self.x0, k, self.schedule)
    }
}

/// One draw of `(k, x_t, target)` for the training objective, with `k`
/// uniform on `{1, …, T}`.
#[derive(Debug, Clone)]
pub struct TrainingPoint {
    pub k: usize,
    pub xt: Array2<f64>,
    pub target: Array2<f64>,
}

pub fn draw_training_point(
    x0: &Array2<f64>,
    x1: &Array2<f64>,
    sched: &NoiseSchedule,
    rng: &mut impl Rng,
) -> Result<TrainingPoint> {
    let k = rng.random_range(1..=sched.steps());
    let xt = sample_xt(x0, x1, k, sched, rng)?;
    let target = sb_target(&xt, x0, k, sched)?;
    Ok(TrainingPoint { k, xt, target })
}

/// Mean squared error between the denoiser output and the bridge target at
/// one random grid time.
pub fn sb_loss(
    denoiser: &dyn Denoiser,
    x0: &Array2<f64>,
    x1: &Array2<f64>,
    sched: &NoiseSchedule,
    rng: &mut impl Rng,
) -> Result<f64> {
    let p = draw_training_point(x0, x1, sched, rng)?;
    let pred = denoiser.predict(&p.xt, x1, p.k)?;
    check_same_shape(&pred, &p.target)?;
    let diff = &pred - &p.target;
    Ok(diff.iter().map(|v| v * v).sum::<f64>() / diff.len() as f64)
}

/// Grid indices `0 = k_0 < k_1 < … < k_nfe = T` evenly subsampled.
pub fn step_indices(nfe: usize, steps: usize) -> Result<Vec<usize>> {
    if nfe == 0 || nfe > steps {
        return Err(Error::OutOfRange {
            index: nfe,
            limit: steps + 1,
        });
    }
    Ok((0..=nfe).map(|j| j * steps / nfe).collect())
}

/// Backward sampling from `x1` to an estimate of `x0` in `nfe` denoiser calls.
pub fn ddpm_backward(
    denoiser: &dyn Denoiser,
    x1: &Array2<f64>,
    nfe: usize,
    sched: &NoiseSchedule,
    rng: &mut impl Rng,
) -> Result<Array2<f64>> {
    ddpm_backward_traced(denoiser, x1, nfe, sched, rng, |_, _| {})
}

/// As [`ddpm_backward`], calling `observe(k, state)` after each step with the
/// grid index the state now sits at.
pub fn ddpm_backward_traced(
    denoiser: &dyn Denoiser,
    x1: &Array2<f64>,
    nfe: usize,
    sched: &NoiseSchedule,
    rng: &mut impl Rng,
    mut observe: impl FnMut(usize, &Array2<f64>),
) -> Result<Array2<f64>> {
    let grid = step_indices(nfe, sched.steps())?;
    let mut x = x1.clone();
    for w in grid.windows(2).rev() {
        let (ks, kt) = (w[0], w[1]);
        let eps = denoiser.predict(&x, x1, kt)?;
        check_same_shape(&eps, &x)?;
        let sigma_t = sched.sigma(kt);
        let x0_hat = &x - &(eps * sigma_t);
        let s2_t = sched.sigma2(kt);
        let s2_s = sched.sigma2(ks);
        let alpha2 = s2_t - s2_s;
        if ks == 0 {
            x = x0_hat;
        } else if alpha2 > 0.0 {
            let var = s2_s * alpha2 / s2_t;
            let sd = var.sqrt();
            let a = alpha2 / s2_t;
            let b = s2_s / s2_t;
            Zip::from(&mut x).and(&x0_hat).for_each(|xv, &h| {
                let n: f64 = rng.sample(StandardNormal);
                *xv = a * h + b * *xv + sd * n;
            });
        }
        // alpha2 == 0: flat β on this stretch, the posterior is a point mass at x
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("backward sampler state"));
        }
        observe(ks, &x);
    }
    Ok(x)
}
