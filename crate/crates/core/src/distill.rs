//! Teacher pretraining and the alternating fake-score / generator loop.
//!
//! Each distillation step first fits the fake score network `psi` to the
//! generator's noisy samples, then moves the one-step generator `theta` along
//! the guided score-identity loss. The teacher `phi` never changes.

use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::diffusion::{eps_to_denoiser_batch, forward_diffuse_batch, NoiseSchedule, TimeRange};
use crate::error::{Error, Result};
use crate::guidance::{BranchEval, GuidanceScales};
use crate::nn::{adam_step, AdamConfig, AdamState, Arch, DenoiserNet, EmaState, GradMode, ParamSet};
use crate::oracle::{oracle_eps, sample_data, MixtureWorld};

pub const OMEGA_FLOOR: f64 = 1e-8;

pub(crate) fn standard_normal<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || StandardNormal.sample(rng))
}

/// One row per entry of `conds`, each drawn from its condition's mixture.
pub fn sample_conditional_batch<R: Rng + ?Sized>(
    world: &MixtureWorld,
    conds: &[usize],
    rng: &mut R,
) -> Result<Array2<f64>> {
    let mut out = Array2::zeros((conds.len(), world.dim));
    for (i, &c) in conds.iter().enumerate() {
        out.row_mut(i).assign(&sample_data(world, c, 1, rng)?.row(0));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TeacherConfig {
    pub steps: u64,
    pub batch: usize,
    pub lr: f64,
    pub adam: AdamConfig,
    pub dropout_rate: f64,
}

#[derive(Debug, Clone)]
pub struct TeacherRun {
    pub net: DenoiserNet,
    pub losses: Vec<f64>,
    pub holdout_loss: f64,
}

/// Epsilon-prediction regression on world samples with condition dropout.
///
/// `on_step(step, loss)` is called after every update.
pub fn teacher_pretrain<R, F>(
    world: &MixtureWorld,
    sched: &NoiseSchedule,
    arch: Arch,
    cfg: &TeacherConfig,
    rng: &mut R,
    mut on_step: F,
) -> Result<TeacherRun>
where
    R: Rng + ?Sized,
    F: FnMut(u64, f64),
{
    if !(0.0..=1.0).contains(&cfg.dropout_rate) {
        return Err(Error::config("teacher dropout_rate must lie in [0, 1]"));
    }
    if cfg.batch == 0 {
        return Err(Error::config("teacher batch must be positive"));
    }
    if arch.input_dim != world.dim || arch.num_conditions != world.num_conditions() {
        return Err(Error::config("architecture does not match the world's dimension and conditions"));
    }
    cfg.adam.validate()?;
    let mut net = DenoiserNet::new(arch, rng)?;
    let mut opt = AdamState::new(&net.params, cfg.adam);
    let empty = net.arch.empty_condition();
    let mut losses = Vec::with_capacity(cfg.steps as usize);
    for step in 1..=cfg.steps {
        let b = teacher_batch(world, sched, cfg.batch, rng)?;
        let c_in: Vec<usize> = b
            .cond
            .iter()
            .map(|&c| if rng.random::<f64>() < cfg.dropout_rate { empty } else { c })
            .collect();
        let (pred, cache) = net.forward_cached(b.x_t.view(), &b.t, &c_in)?;
        let (loss, grad) = mse_per_sample(pred.view(), b.eps.view());
        if !loss.is_finite() {
            return Err(Error::Training {
                step,
                detail: "teacher loss is not finite".into(),
            });
        }
        let back = net.backward(&cache, grad.view(), GradMode::ParamsAndInput)?;
        adam_step(&mut net.params, back.params.as_ref().expect("param grads"), &mut opt, cfg.lr)
            .map_err(|e| Error::Training {
                step,
                detail: e.to_string(),
            })?;
        losses.push(loss);
        on_step(step, loss);
    }
    let hold = teacher_batch(world, sched, 4096, rng)?;
    let pred = net.forward(hold.x_t.view(), &hold.t, &hold.cond)?;
    let holdout_loss = mse_per_sample(pred.view(), hold.eps.view()).0;
    Ok(TeacherRun {
        net,
        losses,
        holdout_loss,
    })
}

struct NoisyBatch {
    cond: Vec<usize>,
    t: Vec<usize>,
    eps: Array2<f64>,
    x_t: Array2<f64>,
}

fn teacher_batch<R: Rng + ?Sized>(
    world: &MixtureWorld,
    sched: &NoiseSchedule,
    n: usize,
    rng: &mut R,
) -> Result<NoisyBatch> {
    let cond: Vec<usize> = (0..n).map(|_| rng.random_range(0..world.num_conditions())).collect();
    let x0 = sample_conditional_batch(world, &cond, rng)?;
    let t: Vec<usize> = (0..n).map(|_| rng.random_range(0..sched.steps())).collect();
    let eps = standard_normal(rng, n, world.dim);
    let x_t = forward_diffuse_batch(sched, x0.view(), &t, eps.view())?;
    Ok(NoisyBatch { cond, t, eps, x_t })
}

/// Mean over rows of the per-row squared error, and its gradient.
fn mse_per_sample(pred: ArrayView2<f64>, target: ArrayView2<f64>) -> (f64, Array2<f64>) {
    let n = pred.nrows() as f64;
    let diff = &pred - &target;
    let loss = diff.iter().map(|v| v * v).sum::<f64>() / n;
    (loss, diff * (2.0 / n))
}

/// `mean || eps_net(x_t, t, c) - oracle_eps(x_t, t, c) ||^2 / d` on fresh
/// conditional world samples with `t` uniform over `times`.
pub fn eps_error_vs_oracle<R: Rng + ?Sized>(
    net: &DenoiserNet,
    world: &MixtureWorld,
    sched: &NoiseSchedule,
    times: std::ops::Range<usize>,
    n: usize,
    rng: &mut R,
) -> Result<f64> {
    let cond: Vec<usize> = (0..n).map(|_| rng.random_range(0..world.num_conditions())).collect();
    let x0 = sample_conditional_batch(world, &cond, rng)?;
    let t: Vec<usize> = (0..n).map(|_| rng.random_range(times.clone())).collect();
    let eps = standard_normal(rng, n, world.dim);
    let x_t = forward_diffuse_batch(sched, x0.view(), &t, eps.view())?;
    let pred = net.forward(x_t.view(), &t, &cond)?;
    let mut total = 0.0;
    for i in 0..n {
        let oracle = oracle_eps(world, sched, x_t.row(i).as_slice().expect("row"), t[i], Some(cond[i]))?;
        total += pred.row(i).iter().zip(&oracle).map(|(p, o)| (p - o).powi(2)).sum::<f64>();
    }
    Ok(total / (n as f64 * world.dim as f64))
}

/// `x_g = f_theta(sigma_{t_init} z, t_init, c)`; the input is not scaled by `a`.
pub fn generate_one_step(
    theta: &DenoiserNet,
    sched: &NoiseSchedule,
    z: ArrayView2<f64>,
    c: &[usize],
    t_init: usize,
) -> Result<Array2<f64>> {
    Ok(Generated::new(theta, sched, z, c, t_init)?.x_g)
}

struct Generated {
    x_g: Array2<f64>,
    cache: crate::nn::ForwardCache,
    t_init: usize,
}

impl Generated {
    fn new(
        theta: &DenoiserNet,
        sched: &NoiseSchedule,
        z: ArrayView2<f64>,
        c: &[usize],
        t_init: usize,
    ) -> Result<Self> {
        sched.check_time(t_init)?;
        if c.contains(&theta.arch.empty_condition()) {
            return Err(Error::input("one-step generation requires a non-empty condition"));
        }
        let x_in = z.mapv(|v| v * sched.sigma(t_init));
        let t = vec![t_init; c.len()];
        let (eps, cache) = theta.forward_cached(x_in.view(), &t, c)?;
        let x_g = eps_to_denoiser_batch(sched, x_in.view(), &t, eps.view())?;
        Ok(Self { x_g, cache, t_init })
    }

    /// Parameter gradient of the generator for `dL/dx_g`.
    fn backward(&self, theta: &DenoiserNet, sched: &NoiseSchedule, grad_xg: ArrayView2<f64>) -> Result<ParamSet> {
        let k = -sched.sigma(self.t_init) / sched.a(self.t_init);
        let grad_eps = grad_xg.mapv(|v| v * k);
        let back = theta.backward(&self.cache, grad_eps.view(), GradMode::ParamsAndInput)?;
        Ok(back.params.expect("param grads"))
    }
}

/// `omega = (sigma^4 / a^2) * d / max(||x_g - f_phi||_1, floor)` for one sample.
/// The denominator is treated as a constant by every gradient in this module.
pub fn omega_weight(sched: &NoiseSchedule, t: usize, x_g: &[f64], f_phi_k4: &[f64]) -> f64 {
    let (a, s) = (sched.a(t), sched.sigma(t));
    l1_normalizer(x_g, f_phi_k4) * s.powi(4) / (a * a)
}

/// `d / max(||x_g - f||_1, floor)`.
fn l1_normalizer(x_g: &[f64], f: &[f64]) -> f64 {
    let l1: f64 = x_g.iter().zip(f).map(|(x, y)| (x - y).abs()).sum();
    let denom = if l1 < OMEGA_FLOOR {
        log::warn!("generator loss normalizer {l1:e} clamped to {OMEGA_FLOOR:e}");
        OMEGA_FLOOR
    } else {
        l1
    };
    x_g.len() as f64 / denom
}

/// Result of a fake-score loss evaluation.
#[derive(Debug, Clone)]
pub struct PsiLoss {
    pub loss: f64,
    pub grads: Option<ParamSet>,
}

/// `mean_i || eps_{psi, kappa1}(x_t, t, c) - eps ||^2` with `x_t = a x_g + sigma eps`.
/// `x_g` is a constant; rows with the empty condition are unguided.
pub fn psi_loss(
    psi: &DenoiserNet,
    sched: &NoiseSchedule,
    kappa1: f64,
    x_g: ArrayView2<f64>,
    c: &[usize],
    t: &[usize],
    eps: ArrayView2<f64>,
    with_grad: bool,
) -> Result<PsiLoss> {
    let x_t = forward_diffuse_batch(sched, x_g, t, eps)?;
    let br = BranchEval::new(psi, x_t.view(), t, c, kappa1 != 1.0, true)?;
    let pred = br.combine(kappa1);
    let (loss, grad) = mse_per_sample(pred.view(), eps);
    let grads = if with_grad {
        let (p, _) = br.backward(psi, &[(kappa1, grad.view())], GradMode::ParamsAndInput)?;
        p
    } else {
        None
    };
    Ok(PsiLoss { loss, grads })
}

/// Networks the generator loss reads.
#[derive(Clone, Copy)]
pub struct LossNets<'a> {
    pub phi: &'a DenoiserNet,
    pub psi: &'a DenoiserNet,
    pub theta: &'a DenoiserNet,
}

/// Inputs that fully determine one generator-loss evaluation.
#[derive(Debug, Clone)]
pub struct ThetaBatch {
    pub z: Array2<f64>,
    pub c: Vec<usize>,
    pub t: Vec<usize>,
    pub eps: Array2<f64>,
}

#[derive(Debug, Clone)]
pub struct ThetaLoss {
    /// `mean_i omega_i (a^2 / sigma^4) [A^T B + (1 - alpha) ||A||^2]`, with
    /// `A = f_{phi,k4} - f_{psi,k2}` and `B = f_{psi,k3} - x_g`.
    pub loss: f64,
    /// Same quantity with the `sigma^4 / a^2` factors cancelled analytically.
    pub loss_simplified: f64,
    /// Same quantity written in epsilon coordinates.
    pub loss_eps_form: f64,
    pub omega: Vec<f64>,
    pub grads: Option<ParamSet>,
}

/// Generator loss and, if requested, its gradient in `theta`.
///
/// The gradient flows through `x_g` directly and through `x_t` into the frozen
/// teacher and fake networks. The `omega` normalizers are constants; passing
/// `frozen_omega` replaces them (used by finite-difference checks).
pub fn theta_loss(
    nets: LossNets<'_>,
    sched: &NoiseSchedule,
    guidance: &GuidanceScales,
    alpha: f64,
    t_init: usize,
    batch: &ThetaBatch,
    with_grad: bool,
    frozen_omega: Option<&[f64]>,
) -> Result<ThetaLoss> {
    let n = batch.c.len();
    let d = nets.theta.arch.input_dim;
    let gen = Generated::new(nets.theta, sched, batch.z.view(), &batch.c, t_init)?;
    let x_g = &gen.x_g;
    let x_t = forward_diffuse_batch(sched, x_g.view(), &batch.t, batch.eps.view())?;
    let GuidanceScales {
        kappa2: k2,
        kappa3: k3,
        kappa4: k4,
        ..
    } = *guidance;

    let phi_br = BranchEval::new(nets.phi, x_t.view(), &batch.t, &batch.c, k4 != 1.0, false)?;
    let psi_br = BranchEval::new(
        nets.psi,
        x_t.view(),
        &batch.t,
        &batch.c,
        k2 != 1.0 || k3 != 1.0,
        false,
    )?;
    let e_phi4 = phi_br.combine(k4);
    let e_psi2 = psi_br.combine(k2);
    let e_psi3 = psi_br.combine(k3);
    let f_phi4 = eps_to_denoiser_batch(sched, x_t.view(), &batch.t, e_phi4.view())?;
    let f_psi2 = eps_to_denoiser_batch(sched, x_t.view(), &batch.t, e_psi2.view())?;
    let f_psi3 = eps_to_denoiser_batch(sched, x_t.view(), &batch.t, e_psi3.view())?;

    let omega: Vec<f64> = match frozen_omega {
        Some(w) => {
            if w.len() != n {
                return Err(Error::config("frozen omega has wrong length"));
            }
            w.to_vec()
        }
        None => (0..n)
            .map(|i| {
                omega_weight(
                    sched,
                    batch.t[i],
                    x_g.row(i).as_slice().expect("row"),
                    f_phi4.row(i).as_slice().expect("row"),
                )
            })
            .collect(),
    };

    let a_fac = &f_phi4 - &f_psi2;
    let b_fac = &f_psi3 - x_g;
    let mut loss = 0.0;
    let mut loss_simplified = 0.0;
    let mut loss_eps_form = 0.0;
    // per-row weight multiplying the bracket, already divided by n
    let mut w = Array1::zeros(n);
    for i in 0..n {
        let (a, s) = (sched.a(batch.t[i]), sched.sigma(batch.t[i]));
        let ai = a_fac.row(i);
        let bi = b_fac.row(i);
        let bracket = ai.dot(&bi) + (1.0 - alpha) * ai.dot(&ai);
        let wi = omega[i] * a * a / s.powi(4);
        loss += wi * bracket;
        w[i] = wi / n as f64;
        let norm = match frozen_omega {
            Some(_) => wi,
            None => l1_normalizer(
                x_g.row(i).as_slice().expect("row"),
                f_phi4.row(i).as_slice().expect("row"),
            ),
        };
        loss_simplified += norm * bracket;
        let de = &e_psi2.row(i) - &e_phi4.row(i);
        let re = &batch.eps.row(i) - &e_psi3.row(i);
        let de2 = de.dot(&de);
        loss_eps_form += omega[i] / (s * s) * (de.dot(&re) + (1.0 - alpha) * de2);
    }
    loss /= n as f64;
    loss_simplified /= n as f64;
    loss_eps_form /= n as f64;

    let grads = if with_grad {
        // dL/dA and dL/dB
        let mut g_a = &b_fac + &(&a_fac * (2.0 * (1.0 - alpha)));
        let mut g_b = a_fac.clone();
        for (i, wi) in w.iter().enumerate() {
            g_a.row_mut(i).mapv_inplace(|v| v * wi);
            g_b.row_mut(i).mapv_inplace(|v| v * wi);
        }
        // F = (x_t - sigma E) / a  =>  dL/dE = -(sigma/a) dL/dF, dL/dx_t += dL/dF / a
        let mut g_e_phi4 = Array2::zeros((n, d));
        let mut g_e_psi2 = Array2::zeros((n, d));
        let mut g_e_psi3 = Array2::zeros((n, d));
        let mut g_xt = Array2::zeros((n, d));
        for i in 0..n {
            let (a, s) = (sched.a(batch.t[i]), sched.sigma(batch.t[i]));
            let r = s / a;
            Zip::from(g_e_phi4.row_mut(i))
                .and(g_e_psi2.row_mut(i))
                .and(g_e_psi3.row_mut(i))
                .and(g_xt.row_mut(i))
                .and(g_a.row(i))
                .and(g_b.row(i))
                .for_each(|ep4, ep2, ep3, gx, &ga, &gb| {
                    *ep4 = -r * ga;
                    *ep2 = r * ga;
                    *ep3 = -r * gb;
                    // f_phi4 contributes +g_a, f_psi2 -g_a, f_psi3 +g_b
                    *gx = gb / a;
                });
        }
        let (_, dx_phi) = phi_br.backward(nets.phi, &[(k4, g_e_phi4.view())], GradMode::InputOnly)?;
        let (_, dx_psi) = psi_br.backward(
            nets.psi,
            &[(k2, g_e_psi2.view()), (k3, g_e_psi3.view())],
            GradMode::InputOnly,
        )?;
        g_xt += &dx_phi;
        g_xt += &dx_psi;
        // x_t = a x_g + sigma eps, and B depends on x_g directly
        let mut g_xg = -g_b;
        for i in 0..n {
            let a = sched.a(batch.t[i]);
            g_xg.row_mut(i).scaled_add(a, &g_xt.row(i));
        }
        Some(gen.backward(nets.theta, sched, g_xg.view())?)
    } else {
        None
    };

    Ok(ThetaLoss {
        loss,
        loss_simplified,
        loss_eps_form,
        omega,
        grads,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DistillConfig {
    pub guidance: GuidanceScales,
    pub time_range: TimeRange,
    pub batch: usize,
    pub lr_psi: f64,
    pub lr_theta: f64,
    pub adam: AdamConfig,
    pub alpha: f64,
    pub dropout_rate: f64,
    pub ema_half_life_images: f64,
    pub image_budget: u64,
    pub grad_clip: Option<f64>,
    pub seed: u64,
}

impl DistillConfig {
    pub fn new(guidance: GuidanceScales, seed: u64) -> Self {
        Self {
            guidance,
            time_range: TimeRange::default(),
            batch: 256,
            lr_psi: 1e-4,
            lr_theta: 1e-4,
            adam: AdamConfig::default(),
            alpha: 1.0,
            dropout_rate: 0.1,
            ema_half_life_images: 500_000.0,
            image_budget: 256 * 5000,
            grad_clip: None,
            seed,
        }
    }

    pub fn validate(&self, sched: &NoiseSchedule) -> Result<()> {
        self.guidance.validate()?;
        self.time_range.validate(sched)?;
        self.adam.validate()?;
        if self.batch == 0 {
            return Err(Error::config("distill.batch must be positive"));
        }
        if !(0.0..=1.0).contains(&self.dropout_rate) {
            return Err(Error::config("distill.dropout_rate must lie in [0, 1]"));
        }
        if self.image_budget == 0 {
            return Err(Error::config("distill.image_budget must be positive"));
        }
        if !(self.alpha >= 0.0) {
            return Err(Error::config("distill.alpha must be >= 0"));
        }
        if !(self.lr_psi > 0.0 && self.lr_theta > 0.0) {
            return Err(Error::config("distill learning rates must be positive"));
        }
        if self.ema_half_life_images <= 0.0 {
            return Err(Error::config("distill.ema_half_life_images must be positive"));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return Err(Error::config("distill.grad_clip must be positive when set"));
            }
        }
        Ok(())
    }

    /// Number of steps needed to spend the image budget.
    pub fn total_steps(&self) -> u64 {
        self.image_budget.div_ceil(self.batch as u64)
    }
}

/// Live distillation state. The teacher is private and only readable.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistillState {
    phi: DenoiserNet,
    pub psi: DenoiserNet,
    pub psi_opt: AdamState,
    pub theta: DenoiserNet,
    pub theta_opt: AdamState,
    pub ema_theta: EmaState,
    pub step: u64,
    pub images_seen: u64,
    pub rng: ChaCha8Rng,
}

/// Copies the teacher into both the fake score network and the generator.
pub fn init_from_teacher(phi: &DenoiserNet, cfg: &DistillConfig) -> Result<DistillState> {
    cfg.adam.validate()?;
    Ok(DistillState {
        phi: phi.clone(),
        psi: phi.clone(),
        psi_opt: AdamState::new(&phi.params, cfg.adam),
        theta: phi.clone(),
        theta_opt: AdamState::new(&phi.params, cfg.adam),
        ema_theta: EmaState::new(&phi.params, cfg.ema_half_life_images)?,
        step: 0,
        images_seen: 0,
        rng: ChaCha8Rng::seed_from_u64(cfg.seed),
    })
}

impl DistillState {
    pub fn phi(&self) -> &DenoiserNet {
        &self.phi
    }

    /// The EMA generator as a standalone network.
    pub fn ema_generator(&self) -> DenoiserNet {
        DenoiserNet {
            arch: self.theta.arch.clone(),
            params: self.ema_theta.shadow.clone(),
        }
    }

    fn nets(&self) -> LossNets<'_> {
        LossNets {
            phi: &self.phi,
            psi: &self.psi,
            theta: &self.theta,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StepMetrics {
    pub step: u64,
    pub images_seen: u64,
    pub psi_loss: f64,
    pub theta_loss: f64,
    pub omega_mean: f64,
}

/// Inputs of a batch whose loss was not finite.
#[derive(Debug, Clone, Serialize)]
pub struct BatchDump {
    pub step: u64,
    pub phase: &'static str,
    pub z: Vec<Vec<f64>>,
    pub c: Vec<usize>,
    pub t: Vec<usize>,
    pub eps: Vec<Vec<f64>>,
}

#[derive(Debug)]
pub struct StepFailure {
    pub error: Error,
    pub dump: Option<BatchDump>,
}

impl From<Error> for StepFailure {
    fn from(error: Error) -> Self {
        Self { error, dump: None }
    }
}

fn rows(a: &Array2<f64>) -> Vec<Vec<f64>> {
    a.outer_iter().map(|r| r.to_vec()).collect()
}

fn sample_times<R: Rng + ?Sized>(rng: &mut R, tr: &TimeRange, n: usize) -> Vec<usize> {
    (0..n).map(|_| rng.random_range(tr.t_min..=tr.t_max)).collect()
}

/// The condition draw of the fake-score phase: uniform with empty-condition
/// replacement at `dropout_rate`. Returns `(true, replaced)` conditions.
pub fn draw_psi_conditions<R: Rng + ?Sized>(
    rng: &mut R,
    num_conditions: usize,
    dropout_rate: f64,
    n: usize,
) -> (Vec<usize>, Vec<usize>) {
    let real: Vec<usize> = (0..n).map(|_| rng.random_range(0..num_conditions)).collect();
    let replaced = real
        .iter()
        .map(|&c| if rng.random::<f64>() < dropout_rate { num_conditions } else { c })
        .collect();
    (real, replaced)
}

fn clip(grads: &mut ParamSet, limit: Option<f64>) {
    if let Some(l) = limit {
        grads.clip_values(l);
    }
}

/// One fake-score update followed by one generator update and an EMA update.
pub fn distill_step(
    state: &mut DistillState,
    sched: &NoiseSchedule,
    cfg: &DistillConfig,
) -> std::result::Result<StepMetrics, StepFailure> {
    let n = cfg.batch;
    let d = state.theta.arch.input_dim;
    let num_c = state.theta.arch.num_conditions;
    let t_init = cfg.time_range.t_init;
    let step = state.step + 1;

    // fake score phase
    let z = standard_normal(&mut state.rng, n, d);
    let (c_real, c_psi) = draw_psi_conditions(&mut state.rng, num_c, cfg.dropout_rate, n);
    let t = sample_times(&mut state.rng, &cfg.time_range, n);
    let eps = standard_normal(&mut state.rng, n, d);
    let dump = |error: Error| StepFailure {
        error,
        dump: Some(BatchDump {
            step,
            phase: "psi",
            z: rows(&z),
            c: c_psi.clone(),
            t: t.clone(),
            eps: rows(&eps),
        }),
    };
    let x_g = generate_one_step(&state.theta, sched, z.view(), &c_real, t_init).map_err(dump)?;
    let psi = psi_loss(
        &state.psi,
        sched,
        cfg.guidance.kappa1,
        x_g.view(),
        &c_psi,
        &t,
        eps.view(),
        true,
    )
    .map_err(dump)?;
    if !psi.loss.is_finite() {
        return Err(dump(Error::Training {
            step,
            detail: "fake score loss is not finite".into(),
        }));
    }
    let mut g = psi.grads.expect("grads requested");
    clip(&mut g, cfg.grad_clip);
    adam_step(&mut state.psi.params, &g, &mut state.psi_opt, cfg.lr_psi).map_err(dump)?;

    // generator phase
    let batch = ThetaBatch {
        z: standard_normal(&mut state.rng, n, d),
        c: (0..n).map(|_| state.rng.random_range(0..num_c)).collect(),
        t: sample_times(&mut state.rng, &cfg.time_range, n),
        eps: standard_normal(&mut state.rng, n, d),
    };
    let dump = |error: Error| StepFailure {
        error,
        dump: Some(BatchDump {
            step,
            phase: "theta",
            z: rows(&batch.z),
            c: batch.c.clone(),
            t: batch.t.clone(),
            eps: rows(&batch.eps),
        }),
    };
    let th = theta_loss(
        state.nets(),
        sched,
        &cfg.guidance,
        cfg.alpha,
        t_init,
        &batch,
        true,
        None,
    )
    .map_err(dump)?;
    if !th.loss.is_finite() {
        return Err(dump(Error::Training {
            step,
            detail: "generator loss is not finite".into(),
        }));
    }
    let mut g = th.grads.expect("grads requested");
    clip(&mut g, cfg.grad_clip);
    adam_step(&mut state.theta.params, &g, &mut state.theta_opt, cfg.lr_theta).map_err(dump)?;
    state.ema_theta.update(&state.theta.params, n as u64)?;

    state.step = step;
    state.images_seen += n as u64;
    Ok(StepMetrics {
        step,
        images_seen: state.images_seen,
        psi_loss: psi.loss,
        theta_loss: th.loss,
        omega_mean: th.omega.iter().sum::<f64>() / n as f64,
    })
}

/// Draws `n` generator samples for condition `c`.
pub fn sample_generator<R: Rng + ?Sized>(
    theta: &DenoiserNet,
    sched: &NoiseSchedule,
    t_init: usize,
    c: usize,
    n: usize,
    rng: &mut R,
) -> Result<Array2<f64>> {
    let z = standard_normal(rng, n, theta.arch.input_dim);
    generate_one_step(theta, sched, z.view(), &vec![c; n], t_init)
}

/// Mean squared row norm, used by the zero-predictor baseline.
pub fn mean_sq_norm(a: ArrayView2<f64>) -> f64 {
    a.map_axis(Axis(1), |r| r.dot(&r)).mean().unwrap_or(0.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::guidance::{strategy_preset, Strategy};

    fn small_arch() -> Arch {
        Arch {
            input_dim: 2,
            hidden: vec![16, 16],
            time_embed_dim: 8,
            num_conditions: 4,
            cond_embed_dim: 4,
        }
    }

    fn perturbed(net: &DenoiserNet, seed: u64, scale: f64) -> DenoiserNet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out = net.clone();
        for p in out.params.iter_mut() {
            p.value.mapv_inplace(|v| v + rng.random_range(-scale..scale));
        }
        out
    }

    fn random_batch(seed: u64, n: usize) -> ThetaBatch {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ThetaBatch {
            z: standard_normal(&mut rng, n, 2),
            c: (0..n).map(|_| rng.random_range(0..4)).collect(),
            t: (0..n).map(|_| rng.random_range(20..=979)).collect(),
            eps: standard_normal(&mut rng, n, 2),
        }
    }

    fn teacher() -> DenoiserNet {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        perturbed(&DenoiserNet::new(small_arch(), &mut rng).unwrap(), 100, 0.2)
    }

    #[test]
    fn omega_formula_example() {
        let s = NoiseSchedule::stable_diffusion().with_coefficients_at(3, 1.0, 1.0).unwrap();
        let w = omega_weight(&s, 3, &[1.0, 2.0], &[-1.0, 0.0]);
        assert_eq!(w, 0.5);
    }

    #[test]
    fn omega_denominator_clamped() {
        let s = NoiseSchedule::stable_diffusion();
        let w = omega_weight(&s, 500, &[0.5, 0.5], &[0.5, 0.5]);
        let expected = s.sigma(500).powi(4) / s.a(500).powi(2) * 2.0 / OMEGA_FLOOR;
        assert!((w - expected).abs() <= 1e-6 * expected && w.is_finite());
    }

    #[test]
    fn psi_loss_examples() {
        let phi = teacher();
        let s = NoiseSchedule::stable_diffusion();
        let b = random_batch(1, 8);
        // kappa1 = 1 coincides with the plain denoising loss
        let x_t = forward_diffuse_batch(&s, b.z.view(), &b.t, b.eps.view()).unwrap();
        let pred = phi.forward(x_t.view(), &b.t, &b.c).unwrap();
        let plain = mse_per_sample(pred.view(), b.eps.view()).0;
        let l = psi_loss(&phi, &s, 1.0, b.z.view(), &b.c, &b.t, b.eps.view(), false).unwrap();
        assert_eq!(l.loss, plain);
        // fresh zero-head network predicts 0: one sample with eps = (1, 0)
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let zero = DenoiserNet::new(small_arch(), &mut rng).unwrap();
        let eps = ndarray::array![[1.0, 0.0]];
        let l = psi_loss(&zero, &s, 1.7, ndarray::array![[0.3, 0.1]].view(), &[2], &[400], eps.view(), false)
            .unwrap();
        assert_eq!(l.loss, 1.0);
    }

    #[test]
    fn psi_loss_vanishes_when_prediction_is_exact() {
        // zero-head network with output bias equal to the injected noise
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut net = DenoiserNet::new(small_arch(), &mut rng).unwrap();
        net.params.find_mut("out.bias").unwrap().assign(&ndarray::array![[0.4, -1.3]]);
        let s = NoiseSchedule::stable_diffusion();
        let eps = ndarray::array![[0.4, -1.3], [0.4, -1.3]];
        let x_g = ndarray::array![[1.0, 2.0], [-3.0, 0.5]];
        let l = psi_loss(&net, &s, 2.0, x_g.view(), &[0, 4], &[100, 800], eps.view(), true).unwrap();
        assert_eq!(l.loss, 0.0);
        assert!(l.grads.unwrap().iter().all(|p| p.value.iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn structural_zero_when_fake_equals_teacher() {
        let phi = teacher();
        let theta = perturbed(&phi, 4, 0.1);
        let s = NoiseSchedule::stable_diffusion();
        for (seed, kappa) in [(5, 1.0), (6, 1.5), (7, 4.5)] {
            let scales = GuidanceScales {
                kappa1: 1.0,
                kappa2: kappa,
                kappa3: 2.0,
                kappa4: kappa,
            };
            let b = random_batch(seed, 32);
            let nets = LossNets { phi: &phi, psi: &phi, theta: &theta };
            let l = theta_loss(nets, &s, &scales, 1.0, 625, &b, false, None).unwrap();
            assert!(l.loss.abs() <= 1e-10, "{}", l.loss);
        }
    }

    #[test]
    fn second_factor_zero_when_fake_reproduces_sample() {
        // psi guided output equals x_g exactly: zero-init psi predicts eps = 0,
        // so f_psi = x_t / a; choose eps = 0 and that equals x_g.
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let psi = DenoiserNet::new(small_arch(), &mut rng).unwrap();
        let phi = teacher();
        let theta = perturbed(&phi, 9, 0.1);
        let s = NoiseSchedule::stable_diffusion();
        let mut b = random_batch(10, 16);
        b.eps.fill(0.0);
        let scales = GuidanceScales { kappa1: 1.0, kappa2: 1.3, kappa3: 1.3, kappa4: 2.0 };
        let l = theta_loss(LossNets { phi: &phi, psi: &psi, theta: &theta }, &s, &scales, 1.0, 625, &b, false, None)
            .unwrap();
        assert!(l.loss.abs() <= 1e-10, "{}", l.loss);
    }

    #[test]
    fn three_loss_forms_agree() {
        let phi = teacher();
        let psi = perturbed(&phi, 11, 0.2);
        let theta = perturbed(&phi, 12, 0.2);
        let s = NoiseSchedule::stable_diffusion();
        for (seed, alpha) in [(13, 1.0), (14, 1.2)] {
            let b = random_batch(seed, 64);
            let scales = strategy_preset(Strategy::Lsg, 2.0).unwrap();
            let l = theta_loss(LossNets { phi: &phi, psi: &psi, theta: &theta }, &s, &scales, alpha, 625, &b, false, None)
                .unwrap();
            let tol = 1e-12 * l.loss.abs().max(1.0);
            assert!((l.loss - l.loss_simplified).abs() <= tol, "{} {}", l.loss, l.loss_simplified);
            assert!((l.loss - l.loss_eps_form).abs() <= 1e-9 * l.loss.abs().max(1.0));
        }
    }

    #[test]
    fn generator_gradient_matches_central_differences() {
        let phi = teacher();
        let psi = perturbed(&phi, 15, 0.2);
        let theta = perturbed(&phi, 16, 0.2);
        let s = NoiseSchedule::stable_diffusion();
        let b = random_batch(17, 6);
        let scales = GuidanceScales { kappa1: 1.5, kappa2: 1.2, kappa3: 0.7, kappa4: 2.5 };
        let nets = LossNets { phi: &phi, psi: &psi, theta: &theta };
        let base = theta_loss(nets, &s, &scales, 1.1, 625, &b, true, None).unwrap();
        let grads = base.grads.clone().unwrap();
        let h = 1e-5;
        let mut worst: f64 = 0.0;
        for pi in 0..theta.params.len() {
            let len = theta.params.get(pi).len();
            for idx in (0..len).step_by(3) {
                let eval = |delta: f64| {
                    let mut th = theta.clone();
                    th.params.get_mut(pi).as_slice_mut().unwrap()[idx] += delta;
                    let nets = LossNets { phi: &phi, psi: &psi, theta: &th };
                    theta_loss(nets, &s, &scales, 1.1, 625, &b, false, Some(&base.omega))
                        .unwrap()
                        .loss
                };
                let fd = (eval(h) - eval(-h)) / (2.0 * h);
                let an = grads.get(pi).as_slice().unwrap()[idx];
                let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-7);
                worst = worst.max(rel);
            }
        }
        assert!(worst <= 1e-4, "max relative error {worst}");
    }

    #[test]
    fn generation_rules() {
        let phi = teacher();
        let s = NoiseSchedule::stable_diffusion();
        let z = ndarray::Array2::zeros((2, 2));
        assert!(matches!(
            generate_one_step(&phi, &s, z.view(), &[0, 4], 625),
            Err(Error::Input(_))
        ));
        let a = generate_one_step(&phi, &s, z.view(), &[1, 2], 625).unwrap();
        let b = generate_one_step(&phi, &s, z.view(), &[1, 2], 625).unwrap();
        assert_eq!(a, b);
        // z = 0 gives f_phi(0, t_init, c)
        let eps = phi.forward(z.view(), &[625, 625], &[1, 2]).unwrap();
        let f = eps_to_denoiser_batch(&s, z.view(), &[625, 625], eps.view()).unwrap();
        assert_eq!(a, f);
    }

    #[test]
    fn init_copies_are_independent() {
        let phi = teacher();
        let cfg = DistillConfig::new(GuidanceScales::uniform(1.5), 0);
        let mut st = init_from_teacher(&phi, &cfg).unwrap();
        assert_eq!(st.psi, phi);
        assert_eq!(st.theta, phi);
        assert_eq!(st.ema_theta.shadow, phi.params);
        st.psi.params.get_mut(1)[[0, 0]] += 1.0;
        assert_eq!(st.phi(), &phi);
        assert_ne!(st.psi, phi);
    }

    #[test]
    fn dropout_fraction_matches_rate() {
        let mut rng = ChaCha8Rng::seed_from_u64(20);
        let (_, c) = draw_psi_conditions(&mut rng, 4, 0.1, 10_000);
        let frac = c.iter().filter(|&&v| v == 4).count() as f64 / 1e4;
        assert!((frac - 0.1).abs() <= 0.01, "{frac}");
    }

    #[test]
    fn steps_keep_teacher_frozen_and_first_loss_zero() {
        let phi = teacher();
        let s = NoiseSchedule::stable_diffusion();
        let mut cfg = DistillConfig::new(GuidanceScales::uniform(1.5), 3);
        cfg.batch = 16;
        cfg.ema_half_life_images = 500.0;
        let mut st = init_from_teacher(&phi, &cfg).unwrap();
        let checksum = phi.params.checksum();
        // with psi = phi the generator loss starts at exactly 0, but the
        // fake-score update of the same step moves psi first, so evaluate it directly
        let b = random_batch(21, 16);
        let l0 = theta_loss(st.nets(), &s, &cfg.guidance, 1.0, 625, &b, false, None).unwrap();
        assert!(l0.loss.abs() <= 1e-10);
        for _ in 0..5 {
            let m = distill_step(&mut st, &s, &cfg).unwrap();
            assert!(m.psi_loss.is_finite() && m.theta_loss.is_finite() && m.omega_mean > 0.0);
        }
        assert_eq!(st.phi().params.checksum(), checksum);
        assert_eq!(st.step, 5);
        assert_eq!(st.images_seen, 80);
        assert_eq!(st.ema_theta.images_seen, 80);
    }

    #[test]
    fn distill_is_deterministic() {
        let phi = teacher();
        let s = NoiseSchedule::stable_diffusion();
        let mut cfg = DistillConfig::new(GuidanceScales::uniform(2.0), 4);
        cfg.batch = 8;
        let run = || {
            let mut st = init_from_teacher(&phi, &cfg).unwrap();
            for _ in 0..3 {
                distill_step(&mut st, &s, &cfg).unwrap();
            }
            st
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn teacher_zero_steps_predicts_zero() {
        let world = MixtureWorld::default_world();
        let s = NoiseSchedule::stable_diffusion();
        let cfg = TeacherConfig {
            steps: 0,
            batch: 16,
            lr: 1e-3,
            adam: AdamConfig::default(),
            dropout_rate: 0.1,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let run = teacher_pretrain(&world, &s, small_arch(), &cfg, &mut rng, |_, _| {}).unwrap();
        assert!(run.losses.is_empty());
        // zero predictor against unit noise: E||eps||^2 = d
        assert!((run.holdout_loss - 2.0).abs() < 0.15, "{}", run.holdout_loss);
    }

    #[test]
    fn teacher_with_full_dropout_never_trains_conditions() {
        let world = MixtureWorld::default_world();
        let s = NoiseSchedule::stable_diffusion();
        let cfg = TeacherConfig {
            steps: 20,
            batch: 16,
            lr: 1e-3,
            adam: AdamConfig::default(),
            dropout_rate: 1.0,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let init = DenoiserNet::new(small_arch(), &mut ChaCha8Rng::seed_from_u64(6)).unwrap();
        let run = teacher_pretrain(&world, &s, small_arch(), &cfg, &mut rng, |_, _| {}).unwrap();
        let before = init.params.find("cond_embed").unwrap();
        let after = run.net.params.find("cond_embed").unwrap();
        for c in 0..4 {
            assert_eq!(before.row(c), after.row(c));
        }
        assert_ne!(before.row(4), after.row(4));
    }
}
