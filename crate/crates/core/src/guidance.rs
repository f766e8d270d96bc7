//! Classifier-free guidance on denoiser networks and the guidance-strategy presets.

use std::fmt;
use std::str::FromStr;

use ndarray::{Array2, ArrayView2, Zip};
use serde::{Deserialize, Serialize};

use crate::diffusion::{eps_to_denoiser_batch, NoiseSchedule};
use crate::error::{Error, Result};
use crate::nn::{DenoiserNet, ForwardCache, GradMode, ParamSet};

/// Where guidance is injected: `kappa1` trains the fake score network, `kappa2`
/// and `kappa3` are its two evaluations in the generator loss, `kappa4` is the
/// teacher's evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GuidanceScales {
    pub kappa1: f64,
    pub kappa2: f64,
    pub kappa3: f64,
    pub kappa4: f64,
}

impl GuidanceScales {
    pub const NONE: GuidanceScales = GuidanceScales {
        kappa1: 1.0,
        kappa2: 1.0,
        kappa3: 1.0,
        kappa4: 1.0,
    };

    pub fn uniform(kappa: f64) -> Self {
        Self {
            kappa1: kappa,
            kappa2: kappa,
            kappa3: kappa,
            kappa4: kappa,
        }
    }

    pub fn as_array(&self) -> [f64; 4] {
        [self.kappa1, self.kappa2, self.kappa3, self.kappa4]
    }

    pub fn validate(&self) -> Result<()> {
        for (i, k) in self.as_array().iter().enumerate() {
            if !(k.is_finite() && *k >= 0.0) {
                return Err(Error::config(format!(
                    "guidance.kappa{} must be a finite non-negative number, got {k}",
                    i + 1
                )));
            }
        }
        if self.kappa1 == 1.0 && self.kappa2 == self.kappa3 && self.kappa2 > 1.0 {
            log::warn!(
                "kappa1 = 1 with kappa2 = kappa3 = {} > 1 converges slowly in ablations",
                self.kappa2
            );
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    NoCfg,
    Long,
    Short,
    SimplestLsg,
    Lsg,
}

impl Strategy {
    pub const ALL: [Strategy; 5] = [
        Strategy::NoCfg,
        Strategy::Long,
        Strategy::Short,
        Strategy::SimplestLsg,
        Strategy::Lsg,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Strategy::NoCfg => "no_cfg",
            Strategy::Long => "long",
            Strategy::Short => "short",
            Strategy::SimplestLsg => "simplest_lsg",
            Strategy::Lsg => "lsg",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .iter()
            .copied()
            .find(|st| st.as_str() == s)
            .ok_or_else(|| {
                Error::config(format!(
                    "unknown strategy `{s}` (expected one of no_cfg, long, short, simplest_lsg, lsg)"
                ))
            })
    }
}

/// Maps a named strategy and its scale to the four guidance scales.
///
/// | strategy       | scales                     | valid kappa |
/// |----------------|----------------------------|-------------|
/// | `no_cfg`       | (1, 1, 1, 1)               | ignored     |
/// | `long`         | (1, 1, 1, k)               | k >= 1      |
/// | `short`        | (1, k, k, 1)               | 0 < k < 1   |
/// | `simplest_lsg` | (k, 1, 1, 1)               | k >= 1      |
/// | `lsg`          | (k, k, k, k)               | k >= 1      |
pub fn strategy_preset(strategy: Strategy, kappa: f64) -> Result<GuidanceScales> {
    let at_least_one = |k: f64| {
        if k.is_finite() && k >= 1.0 {
            Ok(())
        } else {
            Err(Error::config(format!(
                "strategy {strategy} requires kappa >= 1, got {kappa}"
            )))
        }
    };
    let scales = match strategy {
        Strategy::NoCfg => GuidanceScales::NONE,
        Strategy::Long => {
            at_least_one(kappa)?;
            GuidanceScales {
                kappa4: kappa,
                ..GuidanceScales::NONE
            }
        }
        Strategy::Short => {
            if !(kappa > 0.0 && kappa < 1.0) {
                return Err(Error::config(format!(
                    "strategy short requires 0 < kappa < 1, got {kappa}"
                )));
            }
            GuidanceScales {
                kappa2: kappa,
                kappa3: kappa,
                ..GuidanceScales::NONE
            }
        }
        Strategy::SimplestLsg => {
            at_least_one(kappa)?;
            GuidanceScales {
                kappa1: kappa,
                ..GuidanceScales::NONE
            }
        }
        Strategy::Lsg => {
            at_least_one(kappa)?;
            GuidanceScales::uniform(kappa)
        }
    };
    Ok(scales)
}

/// `uncond + kappa * (cond - uncond)`, computed as `(1 - kappa) * uncond + kappa * cond`.
pub fn cfg_combine(out_cond: &[f64], out_uncond: &[f64], kappa: f64) -> Result<Vec<f64>> {
    if out_cond.len() != out_uncond.len() {
        return Err(Error::config("cfg_combine: branch lengths differ"));
    }
    Ok(out_cond
        .iter()
        .zip(out_uncond)
        .map(|(c, u)| combine(*c, *u, kappa))
        .collect())
}

#[inline]
fn combine(c: f64, u: f64, kappa: f64) -> f64 {
    (1.0 - kappa) * u + kappa * c
}

#[derive(Debug, Clone, PartialEq)]
pub struct GuidedOutput {
    pub f: Vec<f64>,
    pub eps: Vec<f64>,
    /// Network evaluations spent; 1 when `kappa == 1`, otherwise 2.
    pub net_evals: usize,
}

/// Guided prediction of a single point in both coordinates.
///
/// Guidance is combined in epsilon space and converted to the denoiser
/// coordinate through the schedule, so the pair is always bijection-consistent.
pub fn guided_eval(
    net: &DenoiserNet,
    sched: &NoiseSchedule,
    x_t: &[f64],
    t: usize,
    c: usize,
    kappa: f64,
) -> Result<GuidedOutput> {
    sched.check_time(t)?;
    let x = ArrayView2::from_shape((1, x_t.len()), x_t)
        .map_err(|e| Error::config(e.to_string()))?;
    let branches = BranchEval::new(net, x, &[t], &[c], kappa != 1.0, false)?;
    let eps = branches.combine(kappa);
    let f = eps_to_denoiser_batch(sched, x, &[t], eps.view())?;
    Ok(GuidedOutput {
        f: f.row(0).to_vec(),
        eps: eps.row(0).to_vec(),
        net_evals: branches.net_evals(),
    })
}

/// Conditional and (optionally) empty-condition evaluations of one network on
/// one batch, kept with their caches so the same pair can be combined at
/// several scales and differentiated once.
#[derive(Debug, Clone)]
pub struct BranchEval {
    pub cond: Array2<f64>,
    cond_cache: ForwardCache,
    pub uncond: Option<Array2<f64>>,
    uncond_cache: Option<ForwardCache>,
}

impl BranchEval {
    /// Evaluates `net(x, t, c)` and, if `need_uncond`, `net(x, t, empty)`.
    ///
    /// Rows whose condition already is the empty index are only allowed when
    /// `allow_empty` is set; their guided output equals the empty branch for
    /// every scale.
    pub fn new(
        net: &DenoiserNet,
        x: ArrayView2<f64>,
        t: &[usize],
        c: &[usize],
        need_uncond: bool,
        allow_empty: bool,
    ) -> Result<Self> {
        let empty = net.arch.empty_condition();
        if need_uncond && !allow_empty && c.contains(&empty) {
            return Err(Error::input(
                "guidance with kappa != 1 needs a non-empty condition",
            ));
        }
        let (cond, cond_cache) = net.forward_cached(x, t, c)?;
        let (uncond, uncond_cache) = if need_uncond {
            let nulls = vec![empty; c.len()];
            let (u, cache) = net.forward_cached(x, t, &nulls)?;
            (Some(u), Some(cache))
        } else {
            (None, None)
        };
        Ok(Self {
            cond,
            cond_cache,
            uncond,
            uncond_cache,
        })
    }

    pub fn net_evals(&self) -> usize {
        1 + usize::from(self.uncond.is_some())
    }

    /// Guided epsilon at scale `kappa`.
    pub fn combine(&self, kappa: f64) -> Array2<f64> {
        match &self.uncond {
            None => {
                debug_assert!(kappa == 1.0, "empty branch was not evaluated");
                self.cond.clone()
            }
            Some(u) => {
                let mut out = Array2::zeros(self.cond.raw_dim());
                Zip::from(&mut out)
                    .and(&self.cond)
                    .and(u)
                    .for_each(|o, &c, &u| *o = combine(c, u, kappa));
                out
            }
        }
    }

    /// Back-propagates `dL/d(eps_kappa)` for each `(kappa, grad)` pair. Returns
    /// parameter gradients (in `ParamsAndInput` mode) and `dL/dx`.
    pub fn backward(
        &self,
        net: &DenoiserNet,
        grads: &[(f64, ArrayView2<f64>)],
        mode: GradMode,
    ) -> Result<(Option<ParamSet>, Array2<f64>)> {
        let shape = self.cond.raw_dim();
        let mut g_cond = Array2::zeros(shape);
        let mut g_uncond = Array2::zeros(shape);
        for (kappa, g) in grads {
            g_cond.scaled_add(*kappa, g);
            if self.uncond.is_some() {
                g_uncond.scaled_add(1.0 - kappa, g);
            } else if *kappa != 1.0 {
                return Err(Error::input("empty branch was not evaluated for kappa != 1"));
            }
        }
        let back = net.backward(&self.cond_cache, g_cond.view(), mode)?;
        let mut params = back.params;
        let mut dx = back.input;
        if let Some(cache) = &self.uncond_cache {
            let b = net.backward(cache, g_uncond.view(), mode)?;
            dx += &b.input;
            if let (Some(p), Some(q)) = (params.as_mut(), b.params.as_ref()) {
                p.add_scaled(q, 1.0)?;
            }
        }
        Ok((params, dx))
    }
}
