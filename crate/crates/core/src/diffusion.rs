//! Forward diffusion process and the conversions between epsilon prediction,
//! denoiser prediction and score.
//!
//! With `x_t = a_t x_0 + sigma_t eps`, the three coordinates are related by
//! `f = (x_t - sigma_t eps) / a_t` and `score = (a_t f - x_t) / sigma_t^2 = -eps / sigma_t`.

use ndarray::{Array2, ArrayView2, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    /// Betas linear in `sqrt(beta)`; the Stable Diffusion convention.
    ScaledLinear,
    Linear,
}

impl ScheduleKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            ScheduleKind::ScaledLinear => "scaled_linear",
            ScheduleKind::Linear => "linear",
        }
    }
}

/// Identifies a schedule in checkpoint headers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleFingerprint {
    pub kind: ScheduleKind,
    pub steps: usize,
    pub beta_min: f64,
    pub beta_max: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    kind: ScheduleKind,
    beta_min: f64,
    beta_max: f64,
    a: Vec<f64>,
    sigma: Vec<f64>,
}

pub fn make_schedule(
    steps: usize,
    kind: ScheduleKind,
    beta_min: f64,
    beta_max: f64,
) -> Result<NoiseSchedule> {
    NoiseSchedule::new(steps, kind, beta_min, beta_max)
}

impl NoiseSchedule {
    pub fn new(steps: usize, kind: ScheduleKind, beta_min: f64, beta_max: f64) -> Result<Self> {
        if steps < 2 {
            return Err(Error::config(format!("schedule needs at least 2 steps, got {steps}")));
        }
        if !(beta_min > 0.0 && beta_min <= beta_max && beta_max < 1.0) {
            return Err(Error::config(format!(
                "schedule betas must satisfy 0 < beta_min <= beta_max < 1, got [{beta_min}, {beta_max}]"
            )));
        }
        let last = (steps - 1) as f64;
        let beta = |s: usize| -> f64 {
            let frac = s as f64 / last;
            match kind {
                ScheduleKind::Linear => beta_min + frac * (beta_max - beta_min),
                ScheduleKind::ScaledLinear => {
                    let (lo, hi) = (beta_min.sqrt(), beta_max.sqrt());
                    let r = lo + frac * (hi - lo);
                    r * r
                }
            }
        };
        let mut a = Vec::with_capacity(steps);
        let mut sigma = Vec::with_capacity(steps);
        let mut alpha_bar = 1.0;
        for s in 0..steps {
            alpha_bar *= 1.0 - beta(s);
            a.push(alpha_bar.sqrt());
            sigma.push((1.0 - alpha_bar).sqrt());
        }
        Ok(Self {
            kind,
            beta_min,
            beta_max,
            a,
            sigma,
        })
    }

    /// Default: scaled-linear, 1000 steps, beta in [0.00085, 0.012].
    pub fn stable_diffusion() -> Self {
        Self::new(1000, ScheduleKind::ScaledLinear, 0.00085, 0.012).expect("valid constants")
    }

    pub fn steps(&self) -> usize {
        self.a.len()
    }

    pub fn kind(&self) -> ScheduleKind {
        self.kind
    }

    pub fn a(&self, t: usize) -> f64 {
        self.a[t]
    }

    pub fn sigma(&self, t: usize) -> f64 {
        self.sigma[t]
    }

    pub fn alphas(&self) -> &[f64] {
        &self.a
    }

    pub fn sigmas(&self) -> &[f64] {
        &self.sigma
    }

    /// `sigma_t / a_t`, the inverse square root of the signal-to-noise ratio.
    pub fn noise_ratio(&self, t: usize) -> f64 {
        self.sigma[t] / self.a[t]
    }

    pub fn fingerprint(&self) -> ScheduleFingerprint {
        ScheduleFingerprint {
            kind: self.kind,
            steps: self.steps(),
            beta_min: self.beta_min,
            beta_max: self.beta_max,
        }
    }

    pub fn check_time(&self, t: usize) -> Result<()> {
        if t >= self.steps() {
            return Err(Error::input(format!(
                "time index {t} outside schedule range 0..{}",
                self.steps()
            )));
        }
        Ok(())
    }

    /// Overwrites the coefficients at `t`. Used to exercise the singular paths
    /// of the conversion algebra; the result is no longer variance preserving.
    pub fn with_coefficients_at(mut self, t: usize, a: f64, sigma: f64) -> Result<Self> {
        self.check_time(t)?;
        self.a[t] = a;
        self.sigma[t] = sigma;
        Ok(self)
    }
}

/// `0 <= t_min <= t_init <= t_max < T`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TimeRange {
    pub t_min: usize,
    pub t_init: usize,
    pub t_max: usize,
}

impl Default for TimeRange {
    fn default() -> Self {
        Self {
            t_min: 20,
            t_init: 625,
            t_max: 979,
        }
    }
}

impl TimeRange {
    pub fn validate(&self, sched: &NoiseSchedule) -> Result<()> {
        if !(self.t_min <= self.t_init && self.t_init <= self.t_max && self.t_max < sched.steps()) {
            return Err(Error::config(format!(
                "time range must satisfy 0 <= t_min <= t_init <= t_max < {}, got ({}, {}, {})",
                sched.steps(),
                self.t_min,
                self.t_init,
                self.t_max
            )));
        }
        Ok(())
    }
}

fn check_len(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::config(format!(
            "vector length mismatch: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    Ok(())
}

fn nonzero_a(sched: &NoiseSchedule, t: usize) -> Result<f64> {
    sched.check_time(t)?;
    let a = sched.a(t);
    if a == 0.0 {
        return Err(Error::Singularity(format!("a_t = 0 at t = {t}")));
    }
    Ok(a)
}

fn nonzero_sigma(sched: &NoiseSchedule, t: usize) -> Result<f64> {
    sched.check_time(t)?;
    let s = sched.sigma(t);
    if s == 0.0 {
        return Err(Error::Singularity(format!("sigma_t = 0 at t = {t}")));
    }
    Ok(s)
}

/// `x_t = a_t x0 + sigma_t eps`.
pub fn forward_diffuse(sched: &NoiseSchedule, x0: &[f64], t: usize, eps: &[f64]) -> Result<Vec<f64>> {
    sched.check_time(t)?;
    check_len(x0, eps)?;
    let (a, s) = (sched.a(t), sched.sigma(t));
    Ok(x0.iter().zip(eps).map(|(x, e)| a * x + s * e).collect())
}

pub fn eps_to_denoiser(sched: &NoiseSchedule, x_t: &[f64], t: usize, eps_hat: &[f64]) -> Result<Vec<f64>> {
    check_len(x_t, eps_hat)?;
    let a = nonzero_a(sched, t)?;
    let s = sched.sigma(t);
    Ok(x_t.iter().zip(eps_hat).map(|(x, e)| (x - s * e) / a).collect())
}

pub fn denoiser_to_eps(sched: &NoiseSchedule, x_t: &[f64], t: usize, f_hat: &[f64]) -> Result<Vec<f64>> {
    check_len(x_t, f_hat)?;
    let s = nonzero_sigma(sched, t)?;
    let a = sched.a(t);
    Ok(x_t.iter().zip(f_hat).map(|(x, f)| (x - a * f) / s).collect())
}

/// `(a_t f - x_t) / sigma_t^2`.
pub fn score_from_denoiser(sched: &NoiseSchedule, x_t: &[f64], t: usize, f_hat: &[f64]) -> Result<Vec<f64>> {
    check_len(x_t, f_hat)?;
    let s = nonzero_sigma(sched, t)?;
    let a = sched.a(t);
    let s2 = s * s;
    Ok(x_t.iter().zip(f_hat).map(|(x, f)| (a * f - x) / s2).collect())
}

/// `-eps / sigma_t`.
pub fn score_from_eps(sched: &NoiseSchedule, t: usize, eps_hat: &[f64]) -> Result<Vec<f64>> {
    let s = nonzero_sigma(sched, t)?;
    Ok(eps_hat.iter().map(|e| -e / s).collect())
}

/// Score of `q(x_t | x) = N(a_t x, sigma_t^2 I)` with respect to `x_t`.
pub fn forward_conditional_score(sched: &NoiseSchedule, x: &[f64], x_t: &[f64], t: usize) -> Result<Vec<f64>> {
    check_len(x, x_t)?;
    let s = nonzero_sigma(sched, t)?;
    let a = sched.a(t);
    let s2 = s * s;
    Ok(x.iter().zip(x_t).map(|(x, xt)| (a * x - xt) / s2).collect())
}

fn check_batch(x: ArrayView2<f64>, y: ArrayView2<f64>, t: &[usize]) -> Result<()> {
    if x.dim() != y.dim() || t.len() != x.nrows() {
        return Err(Error::config("batch shape mismatch"));
    }
    Ok(())
}

/// Batched `x_t = a_t x0 + sigma_t eps` with per-row time indices.
pub fn forward_diffuse_batch(
    sched: &NoiseSchedule,
    x0: ArrayView2<f64>,
    t: &[usize],
    eps: ArrayView2<f64>,
) -> Result<Array2<f64>> {
    check_batch(x0, eps, t)?;
    let mut out = Array2::zeros(x0.raw_dim());
    for (i, &ti) in t.iter().enumerate() {
        sched.check_time(ti)?;
        let (a, s) = (sched.a(ti), sched.sigma(ti));
        Zip::from(out.row_mut(i))
            .and(x0.row(i))
            .and(eps.row(i))
            .for_each(|o, &x, &e| *o = a * x + s * e);
    }
    Ok(out)
}

/// Batched epsilon-to-denoiser conversion.
pub fn eps_to_denoiser_batch(
    sched: &NoiseSchedule,
    x_t: ArrayView2<f64>,
    t: &[usize],
    eps: ArrayView2<f64>,
) -> Result<Array2<f64>> {
    check_batch(x_t, eps, t)?;
    let mut out = Array2::zeros(x_t.raw_dim());
    for (i, &ti) in t.iter().enumerate() {
        let a = nonzero_a(sched, ti)?;
        let s = sched.sigma(ti);
        Zip::from(out.row_mut(i))
            .and(x_t.row(i))
            .and(eps.row(i))
            .for_each(|o, &x, &e| *o = (x - s * e) / a);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn default_schedule_calibration_at_t_init() {
        let s = NoiseSchedule::stable_diffusion();
        let r = s.noise_ratio(625);
        assert!((r - 2.5).abs() <= 0.1, "sigma/a at 625 = {r}");
    }

    #[test]
    fn variance_preserving_and_monotone() {
        for kind in [ScheduleKind::ScaledLinear, ScheduleKind::Linear] {
            let s = NoiseSchedule::new(1000, kind, 1e-4, 0.02).unwrap();
            for t in 0..s.steps() {
                let (a, sg) = (s.a(t), s.sigma(t));
                assert!((a * a + sg * sg - 1.0).abs() <= 1e-12);
                assert!(a > 0.0 && a <= 1.0 && (0.0..1.0).contains(&sg));
                if t > 0 {
                    assert!(a <= s.a(t - 1) && sg >= s.sigma(t - 1));
                }
            }
            assert!(s.a(0) > 0.99);
        }
    }

    #[test]
    fn linear_terminal_ratio_matches_log_space_product() {
        let s = NoiseSchedule::new(1000, ScheduleKind::Linear, 1e-4, 0.02).unwrap();
        // independent route: ln(alpha_bar) accumulated with ln_1p
        let log_ab: f64 = (0..1000)
            .map(|i| (-(1e-4 + i as f64 / 999.0 * (0.02 - 1e-4))).ln_1p())
            .sum();
        let ab = log_ab.exp();
        let expected = ((1.0 - ab) / ab).sqrt();
        let got = s.noise_ratio(999);
        assert!(got > 100.0, "terminal ratio {got}");
        assert!((got - expected).abs() / expected < 1e-9, "{got} vs {expected}");
    }

    #[test]
    fn invalid_schedules_rejected() {
        assert!(NoiseSchedule::new(1, ScheduleKind::Linear, 0.1, 0.2).is_err());
        assert!(NoiseSchedule::new(10, ScheduleKind::Linear, 0.0, 0.2).is_err());
        assert!(NoiseSchedule::new(10, ScheduleKind::Linear, 0.3, 0.2).is_err());
        assert!(NoiseSchedule::new(10, ScheduleKind::Linear, 0.1, 1.0).is_err());
    }

    #[test]
    fn time_range_validation() {
        let s = NoiseSchedule::stable_diffusion();
        assert!(TimeRange::default().validate(&s).is_ok());
        let bad = TimeRange {
            t_min: 30,
            t_init: 20,
            t_max: 40,
        };
        assert!(bad.validate(&s).is_err());
        let late = TimeRange {
            t_min: 0,
            t_init: 0,
            t_max: 1000,
        };
        assert!(late.validate(&s).is_err());
    }

    fn toy(a: f64, sigma: f64) -> NoiseSchedule {
        NoiseSchedule::stable_diffusion()
            .with_coefficients_at(5, a, sigma)
            .unwrap()
    }

    #[test]
    fn forward_diffuse_examples() {
        let s = toy(0.8, 0.6);
        assert_eq!(forward_diffuse(&s, &[1.0, 0.0], 5, &[0.0, 1.0]).unwrap(), vec![0.8, 0.6]);
        assert_eq!(forward_diffuse(&s, &[2.0, -1.0], 5, &[0.0, 0.0]).unwrap(), vec![1.6, -0.8]);
        let sd = NoiseSchedule::stable_diffusion();
        let x = forward_diffuse(&sd, &[1.0, 2.0], 0, &[0.3, -0.2]).unwrap();
        assert!(close(&x, &[1.0, 2.0], 0.02));
    }

    #[test]
    fn conversion_examples() {
        let s = toy(0.8, 0.6);
        let f = eps_to_denoiser(&s, &[0.8, 0.6], 5, &[0.0, 1.0]).unwrap();
        assert!(close(&f, &[1.0, 0.0], 1e-15));
        let f0 = eps_to_denoiser(&s, &[0.8, 0.6], 5, &[0.0, 0.0]).unwrap();
        assert!(close(&f0, &[1.0, 0.75], 1e-15));
        let sc = score_from_denoiser(&s, &[0.8, 0.6], 5, &f0).unwrap();
        assert!(close(&sc, &[0.0, 0.0], 1e-15));
    }

    #[test]
    fn singular_coefficients_reported() {
        let s = toy(0.8, 0.0);
        assert!(matches!(denoiser_to_eps(&s, &[1.0], 5, &[1.0]), Err(Error::Singularity(_))));
        assert!(matches!(score_from_denoiser(&s, &[1.0], 5, &[1.0]), Err(Error::Singularity(_))));
        assert!(matches!(
            forward_conditional_score(&s, &[1.0], &[1.0], 5),
            Err(Error::Singularity(_))
        ));
        let z = toy(0.0, 1.0);
        assert!(matches!(eps_to_denoiser(&z, &[1.0], 5, &[1.0]), Err(Error::Singularity(_))));
    }

    #[test]
    fn bijection_and_score_routes_agree() {
        let s = NoiseSchedule::stable_diffusion();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let tr = TimeRange::default();
        for _ in 0..2000 {
            let t = rng.random_range(tr.t_min..=tr.t_max);
            let x: Vec<f64> = (0..3).map(|_| rng.random_range(-5.0..5.0)).collect();
            let e: Vec<f64> = (0..3).map(|_| rng.random_range(-3.0..3.0)).collect();
            let f = eps_to_denoiser(&s, &x, t, &e).unwrap();
            let back = denoiser_to_eps(&s, &x, t, &f).unwrap();
            assert!(close(&back, &e, 1e-12));
            let via_f = score_from_denoiser(&s, &x, t, &f).unwrap();
            let via_e = score_from_eps(&s, t, &e).unwrap();
            // relative to the score magnitude, which grows like 1/sigma^2
            let scale = 1.0 + via_e.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            assert!(close(&via_f, &via_e, 1e-12 * scale));
        }
    }

    #[test]
    fn forward_conditional_score_examples() {
        let s = NoiseSchedule::stable_diffusion();
        let t = 300;
        let x = [0.4, -1.1];
        let eps = [0.7, 0.2];
        let xt = forward_diffuse(&s, &x, t, &eps).unwrap();
        let sc = forward_conditional_score(&s, &x, &xt, t).unwrap();
        let expected: Vec<f64> = eps.iter().map(|e| -e / s.sigma(t)).collect();
        assert!(close(&sc, &expected, 1e-12));
        let at: Vec<f64> = x.iter().map(|v| v * s.a(t)).collect();
        assert!(close(&forward_conditional_score(&s, &x, &at, t).unwrap(), &[0.0, 0.0], 0.0));
    }

    #[test]
    fn forward_conditional_score_is_gradient_of_log_pdf() {
        let s = NoiseSchedule::stable_diffusion();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let t = rng.random_range(20..980);
            let x: Vec<f64> = (0..2).map(|_| rng.random_range(-3.0..3.0)).collect();
            let xt: Vec<f64> = (0..2).map(|_| rng.random_range(-3.0..3.0)).collect();
            let (a, sg) = (s.a(t), s.sigma(t));
            let logpdf = |y: &[f64]| -> f64 {
                y.iter().zip(&x).map(|(yi, xi)| -(yi - a * xi).powi(2) / (2.0 * sg * sg)).sum()
            };
            let sc = forward_conditional_score(&s, &x, &xt, t).unwrap();
            for j in 0..2 {
                let h = 1e-5;
                let mut p = xt.clone();
                let mut m = xt.clone();
                p[j] += h;
                m[j] -= h;
                let fd = (logpdf(&p) - logpdf(&m)) / (2.0 * h);
                assert!((fd - sc[j]).abs() <= 1e-6 * (1.0 + sc[j].abs()), "{fd} vs {}", sc[j]);
            }
        }
    }
}
