//! Run configuration: a TOML file with nested sections, every optional field
//! defaulted, validated field by field, and echoed back fully resolved.

use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::diffusion::{NoiseSchedule, ScheduleKind, TimeRange};
use crate::distill::{DistillConfig, TeacherConfig};
use crate::guidance::{strategy_preset, GuidanceScales, Strategy};
use crate::metrics::EvalConfig;
use crate::nn::{AdamConfig, Arch};
use crate::oracle::{ConditionMixture, MixtureWorld};

/// Environment variable that overrides the output directory of the file.
pub const OUT_ENV: &str = "SIDLAB_OUT";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FieldError {
    pub field: String,
    pub message: String,
}

impl fmt::Display for FieldError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.field, self.message)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfigErrors(pub Vec<FieldError>);

impl fmt::Display for ConfigErrors {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let lines: Vec<String> = self.0.iter().map(|e| e.to_string()).collect();
        write!(f, "{}", lines.join("\n"))
    }
}

impl std::error::Error for ConfigErrors {}

impl From<ConfigErrors> for crate::Error {
    fn from(e: ConfigErrors) -> Self {
        crate::Error::Config(e.to_string())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleSpec {
    pub kind: ScheduleKind,
    pub steps: usize,
    pub beta_min: f64,
    pub beta_max: f64,
}

impl Default for ScheduleSpec {
    fn default() -> Self {
        Self {
            kind: ScheduleKind::ScaledLinear,
            steps: 1000,
            beta_min: 0.00085,
            beta_max: 0.012,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchSpec {
    pub hidden: Vec<usize>,
    pub time_embed_dim: usize,
    pub cond_embed_dim: usize,
}

impl Default for ArchSpec {
    fn default() -> Self {
        let a = Arch::new(2, 1);
        Self {
            hidden: a.hidden,
            time_embed_dim: a.time_embed_dim,
            cond_embed_dim: a.cond_embed_dim,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GuidanceSpec {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub strategy: Option<Strategy>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kappa: Option<f64>,
    pub kappa1: f64,
    pub kappa2: f64,
    pub kappa3: f64,
    pub kappa4: f64,
}

impl GuidanceSpec {
    pub fn scales(&self) -> GuidanceScales {
        GuidanceScales {
            kappa1: self.kappa1,
            kappa2: self.kappa2,
            kappa3: self.kappa3,
            kappa4: self.kappa4,
        }
    }

    pub fn from_preset(strategy: Strategy, kappa: f64) -> crate::Result<Self> {
        let s = strategy_preset(strategy, kappa)?;
        Ok(Self {
            strategy: Some(strategy),
            kappa: Some(kappa),
            kappa1: s.kappa1,
            kappa2: s.kappa2,
            kappa3: s.kappa3,
            kappa4: s.kappa4,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerSpec {
    pub lr_teacher: f64,
    pub lr_psi: f64,
    pub lr_theta: f64,
    pub betas: [f64; 2],
    pub teacher_betas: [f64; 2],
    pub eps: f64,
}

impl Default for OptimizerSpec {
    fn default() -> Self {
        Self {
            lr_teacher: 1e-3,
            lr_psi: 1e-4,
            lr_theta: 1e-4,
            betas: [0.0, 0.999],
            teacher_betas: [0.9, 0.999],
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingSpec {
    pub batch: usize,
    pub teacher_batch: usize,
    pub teacher_steps: u64,
    /// Fake images processed by distillation.
    pub image_budget: u64,
    pub dropout_rate: f64,
    pub ema_half_life_images: f64,
    pub alpha: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grad_clip: Option<f64>,
    /// Steps between checkpoint writes (0: only at the end).
    pub checkpoint_every: u64,
    /// Steps between evaluation snapshots (0: none).
    pub eval_every: u64,
}

impl Default for TrainingSpec {
    fn default() -> Self {
        Self {
            batch: 256,
            teacher_batch: 256,
            teacher_steps: 20_000,
            image_budget: 256 * 5000,
            dropout_rate: 0.1,
            ema_half_life_images: 500_000.0,
            alpha: 1.0,
            grad_clip: None,
            checkpoint_every: 1000,
            eval_every: 0,
        }
    }
}

/// Fully resolved configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub world: MixtureWorld,
    pub schedule: ScheduleSpec,
    pub arch: ArchSpec,
    pub time_range: TimeRange,
    pub guidance: GuidanceSpec,
    pub optimizer: OptimizerSpec,
    pub training: TrainingSpec,
    pub eval: EvalConfig,
}

// Raw file layout: every field optional so missing and invalid fields can be
// reported together.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    seed: Option<u64>,
    out_dir: Option<PathBuf>,
    world: Option<RawWorld>,
    schedule: Option<RawSchedule>,
    arch: Option<RawArch>,
    time_range: Option<RawTimeRange>,
    guidance: Option<RawGuidance>,
    optimizer: Option<RawOptimizer>,
    training: Option<RawTraining>,
    eval: Option<RawEval>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawWorld {
    preset: Option<String>,
    dim: Option<usize>,
    conditions: Option<Vec<ConditionMixture>>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSchedule {
    kind: Option<ScheduleKind>,
    steps: Option<usize>,
    beta_min: Option<f64>,
    beta_max: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawArch {
    hidden: Option<Vec<usize>>,
    time_embed_dim: Option<usize>,
    cond_embed_dim: Option<usize>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawTimeRange {
    t_min: Option<usize>,
    t_init: Option<usize>,
    t_max: Option<usize>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawGuidance {
    strategy: Option<String>,
    kappa: Option<f64>,
    kappa1: Option<f64>,
    kappa2: Option<f64>,
    kappa3: Option<f64>,
    kappa4: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawOptimizer {
    lr_teacher: Option<f64>,
    lr_psi: Option<f64>,
    lr_theta: Option<f64>,
    betas: Option<[f64; 2]>,
    teacher_betas: Option<[f64; 2]>,
    eps: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawTraining {
    batch: Option<usize>,
    teacher_batch: Option<usize>,
    teacher_steps: Option<u64>,
    image_budget: Option<u64>,
    dropout_rate: Option<f64>,
    ema_half_life_images: Option<f64>,
    alpha: Option<f64>,
    grad_clip: Option<f64>,
    checkpoint_every: Option<u64>,
    eval_every: Option<u64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawEval {
    n_per_condition: Option<usize>,
    n_proj: Option<usize>,
    seed: Option<u64>,
}

/// Values given on the command line; they win over the file.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub out_dir: Option<PathBuf>,
    pub seed: Option<u64>,
    pub teacher_steps: Option<u64>,
    pub image_budget: Option<u64>,
    pub strategy: Option<Strategy>,
    pub kappa: Option<f64>,
}

struct Collector(Vec<FieldError>);

impl Collector {
    fn push(&mut self, field: &str, message: impl Into<String>) {
        self.0.push(FieldError {
            field: field.to_string(),
            message: message.into(),
        });
    }

    fn check(&mut self, ok: bool, field: &str, message: &str) {
        if !ok {
            self.push(field, message);
        }
    }
}

fn positive(v: f64) -> bool {
    v.is_finite() && v > 0.0
}

/// Parses TOML text. `env_out` is the value of [`OUT_ENV`], if set.
pub fn parse_config(text: &str, overrides: &Overrides, env_out: Option<&Path>) -> Result<RunConfig, ConfigErrors> {
    let raw: RawConfig = toml::from_str(text).map_err(|e| {
        let field = e
            .span()
            .map_or_else(|| "<file>".to_string(), |s| format!("<file> bytes {}..{}", s.start, s.end));
        ConfigErrors(vec![FieldError {
            field,
            message: e.message().to_string(),
        }])
    })?;
    resolve(raw, overrides, env_out)
}

/// Reads and parses a config file.
pub fn load_config(path: &Path, overrides: &Overrides) -> Result<RunConfig, ConfigErrors> {
    let text = std::fs::read_to_string(path).map_err(|e| {
        ConfigErrors(vec![FieldError {
            field: "<file>".into(),
            message: format!("cannot read {}: {e}", path.display()),
        }])
    })?;
    let env_out = std::env::var_os(OUT_ENV).map(PathBuf::from);
    parse_config(&text, overrides, env_out.as_deref())
}

fn resolve(raw: RawConfig, ov: &Overrides, env_out: Option<&Path>) -> Result<RunConfig, ConfigErrors> {
    let mut errs = Collector(Vec::new());

    let world = match raw.world {
        None => {
            errs.push("world", "required field is missing");
            None
        }
        Some(w) => resolve_world(w, &mut errs),
    };

    let sd = ScheduleSpec::default();
    let rs = raw.schedule.unwrap_or_default();
    let schedule = ScheduleSpec {
        kind: rs.kind.unwrap_or(sd.kind),
        steps: rs.steps.unwrap_or(sd.steps),
        beta_min: rs.beta_min.unwrap_or(sd.beta_min),
        beta_max: rs.beta_max.unwrap_or(sd.beta_max),
    };
    let sched = match NoiseSchedule::new(schedule.steps, schedule.kind, schedule.beta_min, schedule.beta_max) {
        Ok(s) => Some(s),
        Err(e) => {
            errs.push("schedule", e.to_string());
            None
        }
    };

    let ad = ArchSpec::default();
    let ra = raw.arch.unwrap_or_default();
    let arch = ArchSpec {
        hidden: ra.hidden.unwrap_or(ad.hidden),
        time_embed_dim: ra.time_embed_dim.unwrap_or(ad.time_embed_dim),
        cond_embed_dim: ra.cond_embed_dim.unwrap_or(ad.cond_embed_dim),
    };
    errs.check(
        !arch.hidden.is_empty() && arch.hidden.iter().all(|&h| h > 0),
        "arch.hidden",
        "must list at least one positive layer width",
    );
    errs.check(
        arch.time_embed_dim > 0 && arch.time_embed_dim.is_multiple_of(2),
        "arch.time_embed_dim",
        "must be a positive even number",
    );
    errs.check(arch.cond_embed_dim > 0, "arch.cond_embed_dim", "must be positive");

    let td = TimeRange::default();
    let rt = raw.time_range.unwrap_or_default();
    let time_range = TimeRange {
        t_min: rt.t_min.unwrap_or(td.t_min),
        t_init: rt.t_init.unwrap_or(td.t_init),
        t_max: rt.t_max.unwrap_or(td.t_max),
    };
    if let Some(s) = &sched {
        if let Err(e) = time_range.validate(s) {
            errs.push("time_range", e.to_string());
        }
    }

    let guidance = resolve_guidance(raw.guidance.unwrap_or_default(), ov, &mut errs);

    let od = OptimizerSpec::default();
    let ro = raw.optimizer.unwrap_or_default();
    let optimizer = OptimizerSpec {
        lr_teacher: ro.lr_teacher.unwrap_or(od.lr_teacher),
        lr_psi: ro.lr_psi.unwrap_or(od.lr_psi),
        lr_theta: ro.lr_theta.unwrap_or(od.lr_theta),
        betas: ro.betas.unwrap_or(od.betas),
        teacher_betas: ro.teacher_betas.unwrap_or(od.teacher_betas),
        eps: ro.eps.unwrap_or(od.eps),
    };
    for (name, v) in [
        ("optimizer.lr_teacher", optimizer.lr_teacher),
        ("optimizer.lr_psi", optimizer.lr_psi),
        ("optimizer.lr_theta", optimizer.lr_theta),
        ("optimizer.eps", optimizer.eps),
    ] {
        errs.check(positive(v), name, "must be a positive number");
    }
    for (name, b) in [("optimizer.betas", optimizer.betas), ("optimizer.teacher_betas", optimizer.teacher_betas)] {
        errs.check(
            b.iter().all(|v| (0.0..1.0).contains(v)),
            name,
            "both entries must lie in [0, 1)",
        );
    }

    let trd = TrainingSpec::default();
    let rr = raw.training.unwrap_or_default();
    let training = TrainingSpec {
        batch: rr.batch.unwrap_or(trd.batch),
        teacher_batch: rr.teacher_batch.unwrap_or(trd.teacher_batch),
        teacher_steps: ov.teacher_steps.or(rr.teacher_steps).unwrap_or(trd.teacher_steps),
        image_budget: ov.image_budget.or(rr.image_budget).unwrap_or(trd.image_budget),
        dropout_rate: rr.dropout_rate.unwrap_or(trd.dropout_rate),
        ema_half_life_images: rr.ema_half_life_images.unwrap_or(trd.ema_half_life_images),
        alpha: rr.alpha.unwrap_or(trd.alpha),
        grad_clip: rr.grad_clip.or(trd.grad_clip),
        checkpoint_every: rr.checkpoint_every.unwrap_or(trd.checkpoint_every),
        eval_every: rr.eval_every.unwrap_or(trd.eval_every),
    };
    errs.check(training.batch > 0, "training.batch", "must be positive");
    errs.check(training.teacher_batch > 0, "training.teacher_batch", "must be positive");
    errs.check(training.image_budget > 0, "training.image_budget", "must be positive");
    errs.check(
        (0.0..=1.0).contains(&training.dropout_rate),
        "training.dropout_rate",
        "must lie in [0, 1]",
    );
    errs.check(
        positive(training.ema_half_life_images),
        "training.ema_half_life_images",
        "must be positive",
    );
    errs.check(
        training.alpha.is_finite() && training.alpha >= 0.0,
        "training.alpha",
        "must be >= 0",
    );
    if let Some(c) = training.grad_clip {
        errs.check(positive(c), "training.grad_clip", "must be positive when set");
    }

    let ed = EvalConfig::default();
    let re = raw.eval.unwrap_or_default();
    let eval = EvalConfig {
        n_per_condition: re.n_per_condition.unwrap_or(ed.n_per_condition),
        n_proj: re.n_proj.unwrap_or(ed.n_proj),
        seed: re.seed.unwrap_or(ed.seed),
    };
    errs.check(eval.n_per_condition >= 3, "eval.n_per_condition", "must be at least 3");
    errs.check(eval.n_proj >= 1, "eval.n_proj", "must be at least 1");

    let out_dir = ov
        .out_dir
        .clone()
        .or_else(|| env_out.map(Path::to_path_buf))
        .or(raw.out_dir)
        .unwrap_or_else(|| PathBuf::from("runs"));

    if !errs.0.is_empty() {
        return Err(ConfigErrors(errs.0));
    }
    Ok(RunConfig {
        seed: ov.seed.or(raw.seed).unwrap_or(0),
        out_dir,
        world: world.expect("no errors implies a world"),
        schedule,
        arch,
        time_range,
        guidance: guidance.expect("no errors implies guidance"),
        optimizer,
        training,
        eval,
    })
}

fn resolve_world(w: RawWorld, errs: &mut Collector) -> Option<MixtureWorld> {
    match (w.preset, w.conditions) {
        (Some(_), Some(_)) => {
            errs.push("world", "give either `preset` or `conditions`, not both");
            None
        }
        (Some(p), None) => {
            if p != "default" {
                errs.push("world.preset", format!("unknown preset `{p}` (expected `default`)"));
                return None;
            }
            if w.dim.is_some_and(|d| d != 2) {
                errs.push("world.dim", "the default preset is two-dimensional");
                return None;
            }
            Some(MixtureWorld::default_world())
        }
        (None, Some(conditions)) => {
            let Some(dim) = w.dim else {
                errs.push("world.dim", "required when `conditions` are given");
                return None;
            };
            let world = MixtureWorld { dim, conditions };
            match world.validate() {
                Ok(()) => Some(world),
                Err(e) => {
                    errs.push("world.conditions", e.to_string());
                    None
                }
            }
        }
        (None, None) => {
            errs.push("world", "needs `preset` or `conditions`");
            None
        }
    }
}

fn resolve_guidance(g: RawGuidance, ov: &Overrides, errs: &mut Collector) -> Option<GuidanceSpec> {
    let strategy_name = ov.strategy.map(|s| s.as_str().to_string()).or(g.strategy);
    let kappa = ov.kappa.or(g.kappa);
    let explicit = [g.kappa1, g.kappa2, g.kappa3, g.kappa4];
    let n_explicit = explicit.iter().filter(|k| k.is_some()).count();
    if n_explicit != 0 && n_explicit != 4 {
        errs.push("guidance", "give all of kappa1..kappa4 or none of them");
        return None;
    }
    let strategy = match strategy_name.as_deref().map(str::parse::<Strategy>) {
        None => None,
        Some(Ok(s)) => Some(s),
        Some(Err(e)) => {
            errs.push("guidance.strategy", e.to_string());
            return None;
        }
    };
    let spec = match (strategy, n_explicit) {
        (Some(s), _) => {
            let k = kappa.unwrap_or(if s == Strategy::NoCfg { 1.0 } else { 1.5 });
            match GuidanceSpec::from_preset(s, k) {
                Ok(spec) => spec,
                Err(e) => {
                    errs.push("guidance.kappa", e.to_string());
                    return None;
                }
            }
        }
        (None, 4) => {
            if kappa.is_some() {
                errs.push("guidance.kappa", "only meaningful together with a strategy");
                return None;
            }
            GuidanceSpec {
                strategy: None,
                kappa: None,
                kappa1: g.kappa1.expect("counted"),
                kappa2: g.kappa2.expect("counted"),
                kappa3: g.kappa3.expect("counted"),
                kappa4: g.kappa4.expect("counted"),
            }
        }
        (None, _) => GuidanceSpec::from_preset(Strategy::Lsg, kappa.unwrap_or(1.5)).ok()?,
    };
    if strategy.is_some() && n_explicit == 4 {
        let given = [g.kappa1, g.kappa2, g.kappa3, g.kappa4].map(|k| k.expect("counted"));
        if given != spec.scales().as_array() {
            errs.push("guidance", "explicit kappa1..kappa4 disagree with the strategy preset");
            return None;
        }
    }
    if let Err(e) = spec.scales().validate() {
        errs.push("guidance", e.to_string());
        return None;
    }
    Some(spec)
}

impl RunConfig {
    pub fn schedule(&self) -> crate::Result<NoiseSchedule> {
        NoiseSchedule::new(
            self.schedule.steps,
            self.schedule.kind,
            self.schedule.beta_min,
            self.schedule.beta_max,
        )
    }

    pub fn arch(&self) -> Arch {
        Arch {
            input_dim: self.world.dim,
            hidden: self.arch.hidden.clone(),
            time_embed_dim: self.arch.time_embed_dim,
            num_conditions: self.world.num_conditions(),
            cond_embed_dim: self.arch.cond_embed_dim,
        }
    }

    pub fn teacher_config(&self) -> TeacherConfig {
        TeacherConfig {
            steps: self.training.teacher_steps,
            batch: self.training.teacher_batch,
            lr: self.optimizer.lr_teacher,
            adam: AdamConfig {
                beta1: self.optimizer.teacher_betas[0],
                beta2: self.optimizer.teacher_betas[1],
                eps: self.optimizer.eps,
            },
            dropout_rate: self.training.dropout_rate,
        }
    }

    pub fn distill_config(&self) -> DistillConfig {
        DistillConfig {
            guidance: self.guidance.scales(),
            time_range: self.time_range,
            batch: self.training.batch,
            lr_psi: self.optimizer.lr_psi,
            lr_theta: self.optimizer.lr_theta,
            adam: AdamConfig {
                beta1: self.optimizer.betas[0],
                beta2: self.optimizer.betas[1],
                eps: self.optimizer.eps,
            },
            alpha: self.training.alpha,
            dropout_rate: self.training.dropout_rate,
            ema_half_life_images: self.training.ema_half_life_images,
            image_budget: self.training.image_budget,
            grad_clip: self.training.grad_clip,
            seed: self.seed,
        }
    }

    pub fn to_toml(&self) -> crate::Result<String> {
        toml::to_string(self).map_err(|e| crate::Error::config(format!("cannot serialize config: {e}")))
    }
}
