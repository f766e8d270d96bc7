//! Numerical verification battery shared by the `verify` subcommand and the
//! acceptance harness.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::diffusion::{denoiser_to_eps, eps_to_denoiser, forward_diffuse, NoiseSchedule, TimeRange};
use crate::distill::{psi_loss, standard_normal, theta_loss, LossNets, ThetaBatch};
use crate::error::{Error, Result};
use crate::guidance::GuidanceScales;
use crate::nn::{net_grad, Arch, DenoiserNet, EmaState, Param, ParamSet};
use crate::oracle::{
    oracle_denoiser, oracle_score, sample_data, verify_identity3, Component, ConditionMixture, MixtureWorld,
    TestField,
};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub measured: f64,
    pub tolerance: f64,
    pub passed: bool,
    /// Set when the check could not be evaluated.
    pub error: Option<String>,
}

impl CheckResult {
    /// Passes iff `measured <= tolerance`.
    pub fn at_most(name: &str, measured: f64, tolerance: f64) -> Self {
        Self {
            name: name.to_string(),
            measured,
            tolerance,
            passed: measured <= tolerance,
            error: None,
        }
    }

    pub fn errored(name: &str, tolerance: f64, err: &Error) -> Self {
        Self {
            name: name.to_string(),
            measured: f64::NAN,
            tolerance,
            passed: false,
            error: Some(err.to_string()),
        }
    }

    fn from_result(name: &str, tolerance: f64, r: Result<f64>) -> Self {
        match r {
            Ok(v) => Self::at_most(name, v, tolerance),
            Err(e) => Self::errored(name, tolerance, &e),
        }
    }
}

/// `|sigma/a at t_init - 2.5|`.
pub fn schedule_calibration(sched: &NoiseSchedule, t_init: usize) -> Result<f64> {
    sched.check_time(t_init)?;
    Ok((sched.noise_ratio(t_init) - 2.5).abs())
}

fn random_point<R: Rng + ?Sized>(rng: &mut R, d: usize, half_width: f64) -> Vec<f64> {
    (0..d).map(|_| rng.random_range(-half_width..half_width)).collect()
}

/// Max abs gap between the posterior-mean denoiser and the score route
/// `(x_t + sigma^2 score) / a` over `n` random `(x_t, t, c)`.
pub fn identity_posterior_mean(
    world: &MixtureWorld,
    sched: &NoiseSchedule,
    range: &TimeRange,
    n: usize,
    seed: u64,
) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..n {
        let t = rng.random_range(range.t_min..=range.t_max);
        let c = rng.random_range(0..world.num_conditions());
        let x = random_point(&mut rng, world.dim, 6.0);
        let f = oracle_denoiser(world, sched, &x, t, Some(c))?;
        let sc = oracle_score(world, sched, &x, t, Some(c))?;
        let (a, s) = (sched.a(t), sched.sigma(t));
        for j in 0..world.dim {
            worst = worst.max(((x[j] + s * s * sc[j]) / a - f[j]).abs());
        }
    }
    Ok(worst)
}

/// The generator-side identity with a known mixture standing in for the
/// generator: the residual `x_g - E[x_g | x_t]` is orthogonal to bounded
/// functions of `x_t`. Returns the Monte Carlo correlation
/// `|E[(x_g - f(x_t))^T tanh(x_t)]| / E[|x_g - f(x_t)| |tanh(x_t)|]`.
pub fn identity_generator_mean(
    generator: &MixtureWorld,
    sched: &NoiseSchedule,
    t: usize,
    n: usize,
    seed: u64,
) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (a, s) = (sched.a(t), sched.sigma(t));
    let (mut num, mut den) = (0.0, 0.0);
    for i in 0..n {
        let c = i % generator.num_conditions();
        let xg = sample_data(generator, c, 1, &mut rng)?;
        let eps = standard_normal(&mut rng, 1, generator.dim);
        let xt: Vec<f64> = (0..generator.dim).map(|j| a * xg[[0, j]] + s * eps[[0, j]]).collect();
        let f = oracle_denoiser(generator, sched, &xt, t, Some(c))?;
        for j in 0..generator.dim {
            let r = xg[[0, j]] - f[j];
            let u = xt[j].tanh();
            num += r * u;
            den += (r * u).abs();
        }
    }
    Ok(if den == 0.0 { 0.0 } else { num.abs() / den })
}

/// Worst relative error of the third identity at `t` over conditions.
pub fn identity_stein(
    world: &MixtureWorld,
    sched: &NoiseSchedule,
    t: usize,
    field: &TestField,
    n: usize,
    seed: u64,
) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for c in 0..world.num_conditions() {
        let r = verify_identity3(world, sched, t, c, field, n, &mut rng)?;
        worst = worst.max(r.rel_error);
    }
    Ok(worst)
}

/// Max relative round-trip error of the epsilon/denoiser conversions.
pub fn bijection_roundtrip(sched: &NoiseSchedule, n: usize, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for t in (0..sched.steps()).step_by((sched.steps() / n.max(1)).max(1)) {
        let x0 = random_point(&mut rng, 2, 5.0);
        let eps = random_point(&mut rng, 2, 3.0);
        let xt = forward_diffuse(sched, &x0, t, &eps)?;
        let f = eps_to_denoiser(sched, &xt, t, &eps)?;
        let e2 = denoiser_to_eps(sched, &xt, t, &f)?;
        for j in 0..2 {
            let scale = x0[j].abs().max(1.0);
            worst = worst.max((f[j] - x0[j]).abs() / scale / (1.0 + sched.noise_ratio(t)));
            worst = worst.max((e2[j] - eps[j]).abs() / eps[j].abs().max(1.0));
        }
    }
    Ok(worst)
}

fn check_arch(num_conditions: usize) -> Arch {
    Arch {
        input_dim: 2,
        hidden: vec![12, 12],
        time_embed_dim: 8,
        num_conditions,
        cond_embed_dim: 4,
    }
}

/// A small network with every parameter, including the zero-initialized head,
/// moved to a random value.
pub fn random_net(num_conditions: usize, seed: u64, spread: f64) -> Result<DenoiserNet> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut net = DenoiserNet::new(check_arch(num_conditions), &mut rng)?;
    for p in net.params.iter_mut() {
        p.value.mapv_inplace(|v| v + rng.random_range(-spread..spread));
    }
    Ok(net)
}

fn rel_err(fd: f64, an: f64) -> f64 {
    (fd - an).abs() / fd.abs().max(an.abs()).max(1e-6)
}

/// Central differences of `f` over every `stride`-th parameter.
fn fd_worst<F>(params: &ParamSet, grads: &ParamSet, stride: usize, h: f64, mut f: F) -> Result<f64>
where
    F: FnMut(&ParamSet) -> Result<f64>,
{
    let mut worst: f64 = 0.0;
    let mut probe = params.clone();
    for pi in 0..params.len() {
        let len = params.get(pi).len();
        for idx in (0..len).step_by(stride) {
            let orig = params.get(pi).as_slice().expect("standard layout")[idx];
            probe.get_mut(pi).as_slice_mut().expect("standard layout")[idx] = orig + h;
            let up = f(&probe)?;
            probe.get_mut(pi).as_slice_mut().expect("standard layout")[idx] = orig - h;
            let down = f(&probe)?;
            probe.get_mut(pi).as_slice_mut().expect("standard layout")[idx] = orig;
            let an = grads.get(pi).as_slice().expect("standard layout")[idx];
            worst = worst.max(rel_err((up - down) / (2.0 * h), an));
        }
    }
    Ok(worst)
}

fn with_params(net: &DenoiserNet, params: &ParamSet) -> DenoiserNet {
    DenoiserNet {
        arch: net.arch.clone(),
        params: params.clone(),
    }
}

/// Max relative error of reverse-mode gradients against central differences
/// for the epsilon-regression loss and the guided fake-score loss.
pub fn network_loss_gradients(sched: &NoiseSchedule, seed: u64) -> Result<f64> {
    let net = random_net(3, seed, 0.3)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
    let n = 5;
    let x = standard_normal(&mut rng, n, 2) * 2.0;
    let target = standard_normal(&mut rng, n, 2);
    let t: Vec<usize> = (0..n).map(|_| rng.random_range(0..sched.steps())).collect();
    let c: Vec<usize> = (0..n).map(|i| [0, 1, 2, 3, 1][i]).collect();
    let mse = |out: ndarray::ArrayView2<f64>| {
        let diff = &out - &target;
        let loss = diff.iter().map(|v| v * v).sum::<f64>() / n as f64;
        (loss, diff * (2.0 / n as f64))
    };
    let g = net_grad(&net, x.view(), &t, &c, mse)?;
    let mut worst = fd_worst(&net.params, &g.params, 1, 1e-6, |p| {
        let out = with_params(&net, p).forward(x.view(), &t, &c)?;
        Ok(mse(out.view()).0)
    })?;
    // fake-score objective with guidance, rows with the empty condition allowed
    let x_g = standard_normal(&mut rng, n, 2);
    let eps = standard_normal(&mut rng, n, 2);
    let kappa1 = 1.7;
    let base = psi_loss(&net, sched, kappa1, x_g.view(), &c, &t, eps.view(), true)?;
    let grads = base.grads.expect("grads requested");
    worst = worst.max(fd_worst(&net.params, &grads, 1, 1e-6, |p| {
        psi_loss(&with_params(&net, p), sched, kappa1, x_g.view(), &c, &t, eps.view(), false).map(|l| l.loss)
    })?);
    Ok(worst)
}

fn theta_batch(seed: u64, n: usize, num_conditions: usize, range: &TimeRange) -> ThetaBatch {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ThetaBatch {
        z: standard_normal(&mut rng, n, 2),
        c: (0..n).map(|_| rng.random_range(0..num_conditions)).collect(),
        t: (0..n).map(|_| rng.random_range(range.t_min..=range.t_max)).collect(),
        eps: standard_normal(&mut rng, n, 2),
    }
}

/// Max relative error of the generator-loss gradient against central
/// differences in every generator parameter. The normalizers are held at
/// their unperturbed values, matching their treatment as constants.
pub fn generator_loss_gradient(sched: &NoiseSchedule, range: &TimeRange, seed: u64) -> Result<f64> {
    let phi = random_net(4, seed, 0.3)?;
    let psi = random_net(4, seed + 1, 0.3)?;
    let theta = random_net(4, seed + 2, 0.3)?;
    let batch = theta_batch(seed + 3, 6, 4, range);
    let scales = GuidanceScales {
        kappa1: 1.5,
        kappa2: 1.3,
        kappa3: 0.6,
        kappa4: 2.5,
    };
    let alpha = 1.2;
    let base = theta_loss(
        LossNets { phi: &phi, psi: &psi, theta: &theta },
        sched,
        &scales,
        alpha,
        range.t_init,
        &batch,
        true,
        None,
    )?;
    let grads = base.grads.expect("grads requested");
    fd_worst(&theta.params, &grads, 1, 1e-5, |p| {
        let th = with_params(&theta, p);
        theta_loss(
            LossNets { phi: &phi, psi: &psi, theta: &th },
            sched,
            &scales,
            alpha,
            range.t_init,
            &batch,
            false,
            Some(&base.omega),
        )
        .map(|l| l.loss)
    })
}

/// Max `|loss|` of the generator objective with the fake network equal to the
/// teacher and `kappa2 = kappa4`, over `n` random inputs.
pub fn structural_zero(sched: &NoiseSchedule, range: &TimeRange, n: usize, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let phi = random_net(4, seed, 0.3)?;
    let mut worst: f64 = 0.0;
    let per_batch = 50;
    for b in 0..n.div_ceil(per_batch) {
        let theta = random_net(4, seed + 100 + b as u64, 0.3)?;
        let k = rng.random_range(0.0..5.0);
        let scales = GuidanceScales {
            kappa1: rng.random_range(0.0..5.0),
            kappa2: k,
            kappa3: rng.random_range(0.0..5.0),
            kappa4: k,
        };
        let batch = theta_batch(rng.random(), per_batch.min(n - b * per_batch), 4, range);
        let l = theta_loss(
            LossNets { phi: &phi, psi: &phi, theta: &theta },
            sched,
            &scales,
            1.0,
            range.t_init,
            &batch,
            false,
            None,
        )?;
        worst = worst.max(l.loss.abs());
    }
    Ok(worst)
}

/// Max relative gap between the weighted and the analytically cancelled
/// generator loss over random networks and inputs.
pub fn omega_cancellation(sched: &NoiseSchedule, range: &TimeRange, trials: usize, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for i in 0..trials {
        let s = seed + 10 * i as u64;
        let phi = random_net(4, s, 0.3)?;
        let psi = random_net(4, s + 1, 0.3)?;
        let theta = random_net(4, s + 2, 0.3)?;
        let scales = GuidanceScales {
            kappa1: 1.0,
            kappa2: rng.random_range(0.5..4.0),
            kappa3: rng.random_range(0.5..4.0),
            kappa4: rng.random_range(0.5..4.0),
        };
        let batch = theta_batch(s + 3, 64, 4, range);
        let l = theta_loss(
            LossNets { phi: &phi, psi: &psi, theta: &theta },
            sched,
            &scales,
            1.0,
            range.t_init,
            &batch,
            false,
            None,
        )?;
        worst = worst.max((l.loss - l.loss_simplified).abs() / l.loss.abs().max(1.0));
    }
    Ok(worst)
}

/// `|w - 0.5|` where `w` is the weight left on the initial shadow after one
/// half-life of images in equal batches toward a constant target.
pub fn ema_half_life(half_life_images: u64, batch: u64) -> Result<f64> {
    if batch == 0 || !half_life_images.is_multiple_of(batch) {
        return Err(Error::config("half-life must be a whole number of batches"));
    }
    let one = ParamSet::new(vec![Param {
        name: "w".into(),
        value: Array2::ones((1, 1)),
    }])?;
    let target = ParamSet::zeros_like(&one);
    let mut ema = EmaState::new(&one, half_life_images as f64)?;
    for _ in 0..half_life_images / batch {
        ema.update(&target, batch)?;
    }
    Ok((ema.shadow.get(0)[[0, 0]] - 0.5).abs())
}

/// A three-component, two-condition world used as a stand-in generator.
pub fn generator_stand_in() -> MixtureWorld {
    let comp = |w: f64, m: [f64; 2], s: f64| Component {
        weight: w,
        mean: m.to_vec(),
        std: s,
    };
    MixtureWorld::new(
        2,
        vec![
            ConditionMixture {
                components: vec![comp(0.5, [1.0, 2.0], 0.5), comp(0.3, [-2.0, 0.5], 0.8), comp(0.2, [0.0, -3.0], 0.3)],
            },
            ConditionMixture {
                components: vec![comp(0.6, [3.0, -1.0], 0.4), comp(0.4, [-1.0, -1.0], 1.2)],
            },
        ],
    )
    .expect("valid stand-in world")
}

/// Every check with its tolerance.
pub fn run_battery(world: &MixtureWorld, sched: &NoiseSchedule, range: &TimeRange, seed: u64) -> Vec<CheckResult> {
    let identity = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
    let lin = if world.dim == 2 {
        TestField::Linear(identity)
    } else {
        TestField::Linear(
            (0..world.dim)
                .map(|i| (0..world.dim).map(|j| f64::from(u8::from(i == j))).collect())
                .collect(),
        )
    };
    vec![
        CheckResult::from_result("schedule_calibration", 0.1, schedule_calibration(sched, range.t_init)),
        CheckResult::from_result(
            "identity_posterior_mean",
            1e-9,
            identity_posterior_mean(world, sched, range, 1000, seed),
        ),
        CheckResult::from_result(
            "identity_posterior_mean_generator",
            1e-9,
            identity_posterior_mean(&generator_stand_in(), sched, range, 1000, seed + 1),
        ),
        CheckResult::from_result(
            "identity_generator_orthogonality",
            5e-2,
            identity_generator_mean(&generator_stand_in(), sched, 500, 20_000, seed + 2),
        ),
        CheckResult::from_result(
            "identity_stein_linear",
            5e-2,
            identity_stein(world, sched, 500, &lin, 200_000, seed + 3),
        ),
        CheckResult::from_result(
            "identity_stein_score",
            5e-2,
            identity_stein(world, sched, 500, &TestField::OracleScore, 200_000, seed + 4),
        ),
        CheckResult::from_result("bijection_roundtrip", 1e-9, bijection_roundtrip(sched, 1000, seed + 5)),
        CheckResult::from_result("gradient_network_losses", 1e-4, network_loss_gradients(sched, seed + 6)),
        CheckResult::from_result(
            "gradient_generator_loss",
            1e-4,
            generator_loss_gradient(sched, range, seed + 7),
        ),
        CheckResult::from_result("structural_zero", 1e-10, structural_zero(sched, range, 1000, seed + 8)),
        CheckResult::from_result("omega_cancellation", 1e-12, omega_cancellation(sched, range, 20, seed + 9)),
        CheckResult::from_result("ema_half_life", 1e-12, ema_half_life(50_000, 250)),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn battery_passes_on_default_world() {
        let world = MixtureWorld::default_world();
        let sched = NoiseSchedule::stable_diffusion();
        let results = run_battery(&world, &sched, &TimeRange::default(), 0);
        for r in &results {
            assert!(r.passed, "{r:?}");
        }
        assert_eq!(results.len(), 12);
    }

    #[test]
    fn zero_sigma_breaks_bijection_cleanly() {
        let sched = NoiseSchedule::stable_diffusion().with_coefficients_at(0, 1.0, 0.0).unwrap();
        let err = bijection_roundtrip(&sched, 1000, 0).unwrap_err();
        assert!(matches!(err, Error::Singularity(_)), "{err}");
    }

    #[test]
    fn ema_half_life_requires_whole_batches() {
        assert!(ema_half_life(1000, 256).is_err());
        assert!(ema_half_life(1024, 256).unwrap() <= 1e-12);
    }
}
