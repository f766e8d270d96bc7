//! Conditional isotropic Gaussian mixtures with exact noisy marginals.
//!
//! Under `x_t = a_t x_0 + sigma_t eps`, a component `N(mu, s^2 I)` becomes
//! `N(a_t mu, (a_t^2 s^2 + sigma_t^2) I)`, so scores, posterior means and
//! condition posteriors all have closed forms.

use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::diffusion::{forward_conditional_score, NoiseSchedule};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Component {
    pub weight: f64,
    pub mean: Vec<f64>,
    pub std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConditionMixture {
    pub components: Vec<Component>,
}

/// Uniform prior over conditions; each condition is its own mixture.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixtureWorld {
    pub dim: usize,
    pub conditions: Vec<ConditionMixture>,
}

impl MixtureWorld {
    pub fn new(dim: usize, conditions: Vec<ConditionMixture>) -> Result<Self> {
        let w = Self { dim, conditions };
        w.validate()?;
        Ok(w)
    }

    /// Four conditions in 2-D. Condition `c` has equal-weight components at
    /// angles `c * pi/4` and `c * pi/4 + pi` on the radius-4 circle, std 0.3.
    pub fn default_world() -> Self {
        let conditions = (0..4)
            .map(|c| {
                let base = c as f64 * std::f64::consts::FRAC_PI_4;
                ConditionMixture {
                    components: [base, base + std::f64::consts::PI]
                        .iter()
                        .map(|&ang| Component {
                            weight: 0.5,
                            mean: vec![4.0 * ang.cos(), 4.0 * ang.sin()],
                            std: 0.3,
                        })
                        .collect(),
                }
            })
            .collect();
        Self::new(2, conditions).expect("default world is valid")
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(Error::config("world.dim must be positive"));
        }
        if self.conditions.is_empty() {
            return Err(Error::config("world.conditions must not be empty"));
        }
        for (c, cond) in self.conditions.iter().enumerate() {
            if cond.components.is_empty() {
                return Err(Error::config(format!("world.conditions[{c}] has no components")));
            }
            let mut total = 0.0;
            for (k, comp) in cond.components.iter().enumerate() {
                let at = format!("world.conditions[{c}].components[{k}]");
                if !(comp.weight > 0.0) {
                    return Err(Error::config(format!("{at}.weight must be positive")));
                }
                if comp.mean.len() != self.dim {
                    return Err(Error::config(format!(
                        "{at}.mean has length {}, expected {}",
                        comp.mean.len(),
                        self.dim
                    )));
                }
                if !(comp.std > 0.0) {
                    return Err(Error::config(format!("{at}.std must be positive")));
                }
                total += comp.weight;
            }
            if (total - 1.0).abs() > 1e-12 {
                return Err(Error::config(format!(
                    "world.conditions[{c}] weights sum to {total}, expected 1"
                )));
            }
        }
        Ok(())
    }

    pub fn num_conditions(&self) -> usize {
        self.conditions.len()
    }

    fn check_condition(&self, c: usize) -> Result<()> {
        if c >= self.conditions.len() {
            return Err(Error::input(format!(
                "condition {c} out of range 0..{}",
                self.conditions.len()
            )));
        }
        Ok(())
    }

    fn check_point(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.dim {
            return Err(Error::config(format!(
                "point has dimension {}, world has {}",
                x.len(),
                self.dim
            )));
        }
        Ok(())
    }
}

/// A component after diffusion to noise level `(a, sigma)`.
struct Noised<'a> {
    log_weight: f64,
    mean: &'a [f64],
    std2: f64,
    var: f64,
}

fn noised(world: &MixtureWorld, c: Option<usize>, a: f64, sigma: f64) -> Result<Vec<Noised<'_>>> {
    let conds: Vec<usize> = match c {
        Some(c) => {
            world.check_condition(c)?;
            vec![c]
        }
        None => (0..world.num_conditions()).collect(),
    };
    let prior = -(conds.len() as f64).ln();
    Ok(conds
        .into_iter()
        .flat_map(|ci| world.conditions[ci].components.iter())
        .map(|k| Noised {
            log_weight: k.weight.ln() + prior,
            mean: &k.mean,
            std2: k.std * k.std,
            var: a * a * k.std * k.std + sigma * sigma,
        })
        .collect())
}

fn log_gauss(x: &[f64], mean: &[f64], a: f64, var: f64) -> f64 {
    let d = x.len() as f64;
    let sq: f64 = x.iter().zip(mean).map(|(xi, mi)| (xi - a * mi).powi(2)).sum();
    -0.5 * d * (2.0 * std::f64::consts::PI * var).ln() - 0.5 * sq / var
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Component log-joint terms and normalized responsibilities.
fn responsibilities(comps: &[Noised<'_>], x: &[f64], a: f64) -> Result<(f64, Vec<f64>)> {
    let logs: Vec<f64> = comps
        .iter()
        .map(|k| k.log_weight + log_gauss(x, k.mean, a, k.var))
        .collect();
    let lse = log_sum_exp(&logs);
    if !lse.is_finite() {
        return Err(Error::numeric("responsibilities", "all components underflowed"));
    }
    Ok((lse, logs.iter().map(|l| (l - lse).exp()).collect()))
}

pub fn sample_data<R: Rng + ?Sized>(
    world: &MixtureWorld,
    c: usize,
    n: usize,
    rng: &mut R,
) -> Result<Array2<f64>> {
    world.check_condition(c)?;
    let comps = &world.conditions[c].components;
    let mut out = Array2::zeros((n, world.dim));
    for mut row in out.outer_iter_mut() {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut pick = comps.len() - 1;
        for (k, comp) in comps.iter().enumerate() {
            acc += comp.weight;
            if u < acc {
                pick = k;
                break;
            }
        }
        let comp = &comps[pick];
        for (j, v) in row.iter_mut().enumerate() {
            let z: f64 = StandardNormal.sample(rng);
            *v = comp.mean[j] + comp.std * z;
        }
    }
    Ok(out)
}

/// Exact `ln p(x_t | c)`, or `ln p(x_t)` when `c` is `None`.
pub fn oracle_log_density(
    world: &MixtureWorld,
    sched: &NoiseSchedule,
    x_t: &[f64],
    t: usize,
    c: Option<usize>,
) -> Result<f64> {
    world.check_point(x_t)?;
    sched.check_time(t)?;
    let a = sched.a(t);
    let comps = noised(world, c, a, sched.sigma(t))?;
    Ok(responsibilities(&comps, x_t, a)?.0)
}

/// Exact `grad ln p(x_t | c)`; `c = None` gives the class-marginal score.
pub fn oracle_score(
    world: &MixtureWorld,
    sched: &NoiseSchedule,
    x_t: &[f64],
    t: usize,
    c: Option<usize>,
) -> Result<Vec<f64>> {
    world.check_point(x_t)?;
    sched.check_time(t)?;
    let a = sched.a(t);
    let comps = noised(world, c, a, sched.sigma(t))?;
    let (_, r) = responsibilities(&comps, x_t, a)?;
    let mut out = vec![0.0; world.dim];
    for (k, rk) in comps.iter().zip(&r) {
        for j in 0..world.dim {
            out[j] += rk * (a * k.mean[j] - x_t[j]) / k.var;
        }
    }
    Ok(out)
}

/// Exact posterior mean `E[x_0 | x_t, c]`.
pub fn oracle_denoiser(
    world: &MixtureWorld,
    sched: &NoiseSchedule,
    x_t: &[f64],
    t: usize,
    c: Option<usize>,
) -> Result<Vec<f64>> {
    world.check_point(x_t)?;
    sched.check_time(t)?;
    let a = sched.a(t);
    let comps = noised(world, c, a, sched.sigma(t))?;
    let (_, r) = responsibilities(&comps, x_t, a)?;
    let mut out = vec![0.0; world.dim];
    for (k, rk) in comps.iter().zip(&r) {
        let gain = a * k.std2 / k.var;
        for j in 0..world.dim {
            out[j] += rk * (k.mean[j] + gain * (x_t[j] - a * k.mean[j]));
        }
    }
    Ok(out)
}

/// Noise that the exact denoiser implies: `-sigma_t * score`.
pub fn oracle_eps(
    world: &MixtureWorld,
    sched: &NoiseSchedule,
    x_t: &[f64],
    t: usize,
    c: Option<usize>,
) -> Result<Vec<f64>> {
    let s = sched.sigma(t);
    Ok(oracle_score(world, sched, x_t, t, c)?
        .into_iter()
        .map(|v| -s * v)
        .collect())
}

/// `score(x_t) + kappa * (score(x_t | c) - score(x_t))`, evaluated as
/// `(1 - kappa) * uncond + kappa * cond` so that `kappa` in `{0, 1}` is exact.
pub fn oracle_cfg_score(
    world: &MixtureWorld,
    sched: &NoiseSchedule,
    x_t: &[f64],
    t: usize,
    c: usize,
    kappa: f64,
) -> Result<Vec<f64>> {
    if !(kappa >= 0.0) {
        return Err(Error::input(format!("guidance scale must be >= 0, got {kappa}")));
    }
    let cond = oracle_score(world, sched, x_t, t, Some(c))?;
    let uncond = oracle_score(world, sched, x_t, t, None)?;
    Ok(uncond
        .iter()
        .zip(&cond)
        .map(|(u, c)| (1.0 - kappa) * u + kappa * c)
        .collect())
}

/// Bayes posterior `p(c | x_0)` under the uniform class prior.
pub fn condition_posterior(world: &MixtureWorld, x0: &[f64]) -> Result<Vec<f64>> {
    world.check_point(x0)?;
    let logs = (0..world.num_conditions())
        .map(|c| {
            let comps = noised(world, Some(c), 1.0, 0.0)?;
            Ok(responsibilities(&comps, x0, 1.0)?.0)
        })
        .collect::<Result<Vec<f64>>>()?;
    let lse = log_sum_exp(&logs);
    Ok(logs.iter().map(|l| (l - lse).exp()).collect())
}

/// Test vector fields `u` for the third score identity.
#[derive(Debug, Clone, PartialEq)]
pub enum TestField {
    Zero,
    /// `u(x) = A x` with `A` given row-major.
    Linear(Vec<Vec<f64>>),
    /// `u(x) = grad ln p(x | c)` at the same noise level.
    OracleScore,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Identity3Report {
    pub lhs_estimate: f64,
    pub rhs_estimate: f64,
    pub rel_error: f64,
}

/// Monte Carlo check of
/// `E_{p(x_t|c)}[u^T grad ln p(x_t|c)] = E_{q(x_t|x_0) p(x_0|c)}[u^T grad ln q(x_t|x_0)]`.
///
/// Both sides share the same `(x_0, x_t)` draws.
pub fn verify_identity3<R: Rng + ?Sized>(
    world: &MixtureWorld,
    sched: &NoiseSchedule,
    t: usize,
    c: usize,
    field: &TestField,
    n: usize,
    rng: &mut R,
) -> Result<Identity3Report> {
    if n < 1000 {
        return Err(Error::config(format!("identity check needs n >= 1000, got {n}")));
    }
    sched.check_time(t)?;
    if let TestField::Linear(m) = field {
        if m.len() != world.dim || m.iter().any(|r| r.len() != world.dim) {
            return Err(Error::config("linear test field must be dim x dim"));
        }
    }
    let x0s = sample_data(world, c, n, rng)?;
    let (a, s) = (sched.a(t), sched.sigma(t));
    let mut lhs = 0.0;
    let mut rhs = 0.0;
    let mut xt = vec![0.0; world.dim];
    for x0 in x0s.outer_iter() {
        for j in 0..world.dim {
            let e: f64 = StandardNormal.sample(rng);
            xt[j] = a * x0[j] + s * e;
        }
        let score = oracle_score(world, sched, &xt, t, Some(c))?;
        let u: Vec<f64> = match field {
            TestField::Zero => vec![0.0; world.dim],
            TestField::Linear(m) => m
                .iter()
                .map(|row| row.iter().zip(&xt).map(|(r, x)| r * x).sum())
                .collect(),
            TestField::OracleScore => score.clone(),
        };
        let fwd = forward_conditional_score(sched, x0.as_slice().expect("row-major"), &xt, t)?;
        lhs += u.iter().zip(&score).map(|(p, q)| p * q).sum::<f64>();
        rhs += u.iter().zip(&fwd).map(|(p, q)| p * q).sum::<f64>();
    }
    lhs /= n as f64;
    rhs /= n as f64;
    let scale = lhs.abs().max(rhs.abs());
    let rel_error = if scale == 0.0 { 0.0 } else { (lhs - rhs).abs() / scale };
    Ok(Identity3Report {
        lhs_estimate: lhs,
        rhs_estimate: rhs,
        rel_error,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn single(mean: Vec<f64>, std: f64) -> MixtureWorld {
        MixtureWorld::new(
            mean.len(),
            vec![ConditionMixture {
                components: vec![Component { weight: 1.0, mean, std }],
            }],
        )
        .unwrap()
    }

    fn random_world(rng: &mut ChaCha8Rng, conds: usize, comps: usize) -> MixtureWorld {
        let conditions = (0..conds)
            .map(|_| {
                let raw: Vec<f64> = (0..comps).map(|_| rng.random_range(0.2..1.0)).collect();
                let total: f64 = raw.iter().sum();
                let mut components: Vec<Component> = raw
                    .iter()
                    .map(|w| Component {
                        weight: w / total,
                        mean: vec![rng.random_range(-4.0..4.0), rng.random_range(-4.0..4.0)],
                        std: rng.random_range(0.2..1.0),
                    })
                    .collect();
                let sum: f64 = components.iter().map(|k| k.weight).sum();
                components[0].weight += 1.0 - sum;
                ConditionMixture { components }
            })
            .collect();
        MixtureWorld::new(2, conditions).unwrap()
    }

    #[test]
    fn validation_errors() {
        let bad_weights = MixtureWorld {
            dim: 1,
            conditions: vec![ConditionMixture {
                components: vec![Component {
                    weight: 0.6,
                    mean: vec![0.0],
                    std: 1.0,
                }],
            }],
        };
        assert!(bad_weights.validate().is_err());
        let mut bad_dim = MixtureWorld::default_world();
        bad_dim.conditions[1].components[0].mean.push(0.0);
        assert!(bad_dim.validate().is_err());
        let mut bad_std = MixtureWorld::default_world();
        bad_std.conditions[2].components[1].std = 0.0;
        assert!(bad_std.validate().is_err());
    }

    #[test]
    fn sample_mean_of_standard_normal() {
        let w = single(vec![0.0, 0.0], 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = sample_data(&w, 0, 100_000, &mut rng).unwrap();
        for j in 0..2 {
            let m = x.column(j).mean().unwrap();
            assert!(m.abs() < 0.02, "coordinate {j} mean {m}");
        }
    }

    #[test]
    fn symmetric_pair_splits_half_planes() {
        let w = MixtureWorld::new(
            2,
            vec![ConditionMixture {
                components: vec![
                    Component { weight: 0.5, mean: vec![3.0, 0.0], std: 1.0 },
                    Component { weight: 0.5, mean: vec![-3.0, 0.0], std: 1.0 },
                ],
            }],
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = sample_data(&w, 0, 10_000, &mut rng).unwrap();
        let frac = x.column(0).iter().filter(|&&v| v > 0.0).count() as f64 / 1e4;
        assert!((frac - 0.5).abs() < 0.02, "{frac}");
    }

    #[test]
    fn vanishing_std_samples_sit_on_means() {
        let mut w = MixtureWorld::default_world();
        for cond in &mut w.conditions {
            for k in &mut cond.components {
                k.std = 1e-300;
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = sample_data(&w, 2, 50, &mut rng).unwrap();
        for row in x.outer_iter() {
            let hit = w.conditions[2]
                .components
                .iter()
                .any(|k| k.mean.iter().zip(row.iter()).all(|(m, v)| m == v));
            assert!(hit);
        }
    }

    #[test]
    fn unit_marginal_score() {
        let w = single(vec![0.0, 0.0], 1.0);
        let s = NoiseSchedule::stable_diffusion();
        let sc = oracle_score(&w, &s, &[1.0, 0.0], 400, Some(0)).unwrap();
        assert!((sc[0] + 1.0).abs() < 1e-12 && sc[1].abs() < 1e-15);
    }

    #[test]
    fn symmetric_midpoint_score_vanishes_along_axis() {
        let w = MixtureWorld::new(
            2,
            vec![ConditionMixture {
                components: vec![
                    Component { weight: 0.5, mean: vec![2.0, 0.0], std: 0.5 },
                    Component { weight: 0.5, mean: vec![-2.0, 0.0], std: 0.5 },
                ],
            }],
        )
        .unwrap();
        let s = NoiseSchedule::stable_diffusion();
        let sc = oracle_score(&w, &s, &[0.0, 0.7], 200, Some(0)).unwrap();
        assert!(sc[0].abs() < 1e-15);
    }

    #[test]
    fn score_matches_log_density_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let w = random_world(&mut rng, 1, 3);
        let s = NoiseSchedule::stable_diffusion();
        for _ in 0..200 {
            let t = rng.random_range(0..1000);
            let x = vec![rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0)];
            for c in [Some(0), None] {
                let sc = oracle_score(&w, &s, &x, t, c).unwrap();
                for j in 0..2 {
                    let h = 1e-5;
                    let mut p = x.clone();
                    let mut m = x.clone();
                    p[j] += h;
                    m[j] -= h;
                    let fd = (oracle_log_density(&w, &s, &p, t, c).unwrap()
                        - oracle_log_density(&w, &s, &m, t, c).unwrap())
                        / (2.0 * h);
                    assert!((fd - sc[j]).abs() <= 1e-6 * (1.0 + sc[j].abs()), "{fd} vs {}", sc[j]);
                }
            }
        }
    }

    #[test]
    fn far_inputs_stay_finite() {
        let w = MixtureWorld::default_world();
        let s = NoiseSchedule::stable_diffusion();
        // 40 * 0.3 away from every mean at t = 0
        let x = [16.0, 9.0];
        for c in [Some(0), Some(3), None] {
            let sc = oracle_score(&w, &s, &x, 0, c).unwrap();
            let f = oracle_denoiser(&w, &s, &x, 0, c).unwrap();
            assert!(sc.iter().chain(&f).all(|v| v.is_finite()));
        }
        let far = [1e4, -1e4];
        assert!(oracle_score(&w, &s, &far, 0, None).unwrap().iter().all(|v| v.is_finite()));
        assert!(condition_posterior(&w, &far).unwrap().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn denoiser_limits() {
        let s = NoiseSchedule::stable_diffusion();
        // tiny component std: posterior mean collapses onto the weighted means
        let mut w = MixtureWorld::default_world();
        for cond in &mut w.conditions {
            for k in &mut cond.components {
                k.std = 1e-9;
            }
        }
        let x = [0.3, 0.1];
        let t = 600;
        let f = oracle_denoiser(&w, &s, &x, t, Some(1)).unwrap();
        let comps = noised(&w, Some(1), s.a(t), s.sigma(t)).unwrap();
        let (_, r) = responsibilities(&comps, &x, s.a(t)).unwrap();
        for j in 0..2 {
            let expected: f64 = comps.iter().zip(&r).map(|(k, rk)| rk * k.mean[j]).sum();
            assert!((f[j] - expected).abs() < 1e-9);
        }
        // no noise: posterior mean is x_t / a_t
        let quiet = s.clone().with_coefficients_at(10, 0.8, 0.0).unwrap();
        let w = MixtureWorld::default_world();
        let f = oracle_denoiser(&w, &quiet, &x, 10, Some(0)).unwrap();
        assert!((f[0] - x[0] / 0.8).abs() < 1e-12 && (f[1] - x[1] / 0.8).abs() < 1e-12);
    }

    #[test]
    fn identity_one_dual_routes() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let s = NoiseSchedule::stable_diffusion();
        for world in [MixtureWorld::default_world(), random_world(&mut rng, 3, 3)] {
            for _ in 0..300 {
                let t = rng.random_range(20..=979);
                let c = rng.random_range(0..world.num_conditions());
                let x = vec![rng.random_range(-6.0..6.0), rng.random_range(-6.0..6.0)];
                let f = oracle_denoiser(&world, &s, &x, t, Some(c)).unwrap();
                let sc = oracle_score(&world, &s, &x, t, Some(c)).unwrap();
                for j in 0..2 {
                    let via_score = (x[j] + s.sigma(t).powi(2) * sc[j]) / s.a(t);
                    assert!((via_score - f[j]).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn cfg_score_reductions() {
        let w = MixtureWorld::default_world();
        let s = NoiseSchedule::stable_diffusion();
        let x = [1.0, -0.5];
        let t = 500;
        let cond = oracle_score(&w, &s, &x, t, Some(2)).unwrap();
        let uncond = oracle_score(&w, &s, &x, t, None).unwrap();
        assert_eq!(oracle_cfg_score(&w, &s, &x, t, 2, 1.0).unwrap(), cond);
        assert_eq!(oracle_cfg_score(&w, &s, &x, t, 2, 0.0).unwrap(), uncond);
        let one = single(vec![1.0, 1.0], 0.5);
        let a = oracle_cfg_score(&one, &s, &x, t, 0, 0.3).unwrap();
        let b = oracle_cfg_score(&one, &s, &x, t, 0, 5.0).unwrap();
        for (p, q) in a.iter().zip(&b) {
            assert!((p - q).abs() < 1e-12);
        }
        assert!(oracle_cfg_score(&w, &s, &x, t, 0, -1.0).is_err());
    }

    #[test]
    fn posterior_examples() {
        let w = MixtureWorld::default_world();
        let mean = w.conditions[3].components[0].mean.clone();
        let p = condition_posterior(&w, &mean).unwrap();
        assert!(p[3] >= 0.999, "{p:?}");
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let mirrored = MixtureWorld::new(
            2,
            vec![
                ConditionMixture {
                    components: vec![Component { weight: 1.0, mean: vec![1.5, 0.4], std: 0.7 }],
                },
                ConditionMixture {
                    components: vec![Component { weight: 1.0, mean: vec![-1.5, 0.4], std: 0.7 }],
                },
            ],
        )
        .unwrap();
        let p = condition_posterior(&mirrored, &[0.0, -2.0]).unwrap();
        assert!((p[0] - 0.5).abs() < 1e-15 && (p[1] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn identity_three_zero_field() {
        let w = MixtureWorld::default_world();
        let s = NoiseSchedule::stable_diffusion();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let r = verify_identity3(&w, &s, 500, 0, &TestField::Zero, 1000, &mut rng).unwrap();
        assert_eq!((r.lhs_estimate, r.rhs_estimate, r.rel_error), (0.0, 0.0, 0.0));
        assert!(verify_identity3(&w, &s, 500, 0, &TestField::Zero, 999, &mut rng).is_err());
    }

    #[test]
    fn identity_three_stein_linear_field() {
        let w = single(vec![0.0, 0.0], 1.0);
        let s = NoiseSchedule::stable_diffusion();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let id = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        let r = verify_identity3(&w, &s, 500, 0, &TestField::Linear(id), 200_000, &mut rng).unwrap();
        // Stein: E[x^T (-x)] = -d for a unit-variance marginal
        assert!((r.lhs_estimate + 2.0).abs() < 0.05, "{r:?}");
        assert!(r.rel_error <= 0.05, "{r:?}");
    }

    #[test]
    fn identity_three_score_field_random_world() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let w = random_world(&mut rng, 1, 3);
        let s = NoiseSchedule::stable_diffusion();
        let r = verify_identity3(&w, &s, 500, 0, &TestField::OracleScore, 200_000, &mut rng).unwrap();
        assert!(r.rel_error <= 0.05, "{r:?}");
    }
}
