//! Command-line front end. `run` parses arguments, dispatches, and maps
//! errors to exit codes.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checks::{run_battery, CheckResult};
use crate::config::{load_config, Overrides, RunConfig};
use crate::distill::{
    distill_step, eps_error_vs_oracle, init_from_teacher, teacher_pretrain, DistillConfig, DistillState,
};
use crate::error::Error;
use crate::guidance::Strategy;
use crate::metrics::{
    evaluate_generator, evaluate_samples, reference_samples, svg_line_chart, sweep_cells, trace_series,
    tradeoff_sweep, write_sweep_csv, write_sweep_rows, EvalReport, Metric, RowLabel, SweepRow, SweepSpec,
    SWEEP_HEADER,
};
use crate::nn::{load_net_checked, save_net, Counters, DenoiserNet};

pub const EXIT_OK: i32 = 0;
pub const EXIT_VERIFY_FAILED: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_TRAINING: i32 = 3;

pub const METRICS_HEADER: &str = "step,images_seen,psi_loss,theta_loss,omega_mean,kappa1,kappa2,kappa3,kappa4,seed";
pub const STATE_FILE: &str = "distill_state.json";

#[derive(Debug, Parser)]
#[command(name = "sidlab", version, about = "One-step generator distillation on Gaussian-mixture worlds")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args, Clone)]
pub struct Common {
    /// TOML run configuration.
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory (overrides SIDLAB_OUT and the file).
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train the teacher on world samples.
    Pretrain {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        steps: Option<u64>,
    },
    /// Distill the teacher into a one-step generator.
    Distill {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        teacher: PathBuf,
        #[arg(long)]
        strategy: Option<Strategy>,
        #[arg(long)]
        kappa: Option<f64>,
        /// Fake-image budget.
        #[arg(long)]
        budget: Option<u64>,
        /// Continue from the saved state in the output directory.
        #[arg(long)]
        resume: bool,
        /// Stop (with a checkpoint) once this many steps are done.
        #[arg(long)]
        stop_after: Option<u64>,
    },
    /// Run the numerical verification battery.
    Verify {
        #[command(flatten)]
        common: Common,
        /// Force sigma_t = 0 at this step before the checks.
        #[arg(long)]
        inject_zero_sigma: Option<usize>,
    },
    /// Score a generator checkpoint against fresh world samples.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        theta: Option<PathBuf>,
        /// Score a world sample set against itself instead of a generator.
        #[arg(long)]
        data_vs_data: bool,
    },
    /// Distill once per strategy, scale and seed, and tabulate the results.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        teacher: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "lsg")]
        strategies: Vec<Strategy>,
        #[arg(long, value_delimiter = ',', default_value = "1.5")]
        kappas: Vec<f64>,
        #[arg(long, value_delimiter = ',', default_value = "0")]
        seeds: Vec<u64>,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        #[arg(long)]
        budget: Option<u64>,
        /// Evaluate the raw generator instead of its moving average.
        #[arg(long)]
        raw_theta: bool,
    },
}

/// Command failure with its exit code.
#[derive(Debug)]
pub struct Failure {
    pub code: i32,
    pub message: String,
}

impl Failure {
    fn new(code: i32, message: impl Into<String>) -> Self {
        Self {
            code,
            message: message.into(),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Config(_) | Error::Checkpoint(_) | Error::Io(_) | Error::Input(_) => EXIT_CONFIG,
            Error::Training { .. } | Error::Numeric { .. } | Error::Singularity(_) => EXIT_TRAINING,
        };
        Failure::new(code, e.to_string())
    }
}

type CmdResult = std::result::Result<(), Failure>;

fn resolve(common: &Common, mut ov: Overrides) -> std::result::Result<RunConfig, Failure> {
    ov.out_dir = common.out.clone();
    ov.seed = common.seed;
    load_config(&common.config, &ov).map_err(|e| Failure::new(EXIT_CONFIG, format!("invalid configuration:\n{e}")))
}

/// Writes `resolved_<cmd>.toml` unless that is the input file itself.
fn write_resolved(cfg: &RunConfig, cmd: &str, input: &Path) -> std::result::Result<(), Failure> {
    fs::create_dir_all(&cfg.out_dir).map_err(Error::from)?;
    let path = cfg.out_dir.join(format!("resolved_{cmd}.toml"));
    if let (Ok(a), Ok(b)) = (fs::canonicalize(&path), fs::canonicalize(input)) {
        if a == b {
            return Ok(());
        }
    }
    fs::write(&path, cfg.to_toml()?).map_err(Error::from)?;
    Ok(())
}

/// Entry point; returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    let result = match cli.command {
        Command::Pretrain { common, steps } => cmd_pretrain(&common, steps),
        Command::Distill {
            common,
            teacher,
            strategy,
            kappa,
            budget,
            resume,
            stop_after,
        } => cmd_distill(
            &common,
            &teacher,
            Overrides {
                strategy,
                kappa,
                image_budget: budget,
                ..Default::default()
            },
            resume,
            stop_after,
        ),
        Command::Verify {
            common,
            inject_zero_sigma,
        } => cmd_verify(&common, inject_zero_sigma),
        Command::Eval {
            common,
            theta,
            data_vs_data,
        } => cmd_eval(&common, theta.as_deref(), data_vs_data),
        Command::Sweep {
            common,
            teacher,
            strategies,
            kappas,
            seeds,
            jobs,
            budget,
            raw_theta,
        } => cmd_sweep(&common, &teacher, &strategies, &kappas, &seeds, jobs, budget, raw_theta),
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(f) => {
            eprintln!("error: {}", f.message);
            f.code
        }
    }
}

fn csv_writer(path: &Path) -> std::result::Result<csv::Writer<fs::File>, Failure> {
    let file = fs::File::create(path).map_err(Error::from)?;
    Ok(csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(file))
}

fn csv_fail(e: csv::Error) -> Failure {
    Failure::from(Error::Io(std::io::Error::other(e)))
}

pub fn cmd_pretrain(common: &Common, steps: Option<u64>) -> CmdResult {
    let cfg = resolve(
        common,
        Overrides {
            teacher_steps: steps,
            ..Default::default()
        },
    )?;
    write_resolved(&cfg, "pretrain", &common.config)?;
    let sched = cfg.schedule()?;
    let tcfg = cfg.teacher_config();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut log = csv_writer(&cfg.out_dir.join("teacher_loss.csv"))?;
    log.write_record(["step", "loss"]).map_err(csv_fail)?;
    let mut io_err = None;
    let run = teacher_pretrain(&cfg.world, &sched, cfg.arch(), &tcfg, &mut rng, |step, loss| {
        if io_err.is_none() {
            if let Err(e) = log.write_record([step.to_string(), loss.to_string()]) {
                io_err = Some(e);
            }
        }
        if step % 1000 == 0 {
            log::info!("teacher step {step} loss {loss:.5}");
        }
    })?;
    if let Some(e) = io_err {
        return Err(csv_fail(e));
    }
    log.flush().map_err(Error::from)?;
    let counters = Counters {
        step: tcfg.steps,
        images_seen: tcfg.steps * tcfg.batch as u64,
    };
    save_net(&cfg.out_dir.join("teacher.ckpt"), &run.net, "teacher", &sched.fingerprint(), counters)?;
    let mut eval_rng = ChaCha8Rng::seed_from_u64(cfg.eval.seed);
    let err = eps_error_vs_oracle(&run.net, &cfg.world, &sched, 0..sched.steps(), 4096, &mut eval_rng)?;
    println!(
        "teacher: {} steps, held-out loss {:.5}, epsilon error vs oracle {:.5}",
        tcfg.steps, run.holdout_loss, err
    );
    Ok(())
}

/// What `--resume` reads back.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ResumeFile {
    pub config: DistillConfig,
    pub state: DistillState,
}

fn load_teacher(cfg: &RunConfig, path: &Path) -> std::result::Result<DenoiserNet, Failure> {
    let sched = cfg.schedule()?;
    let (net, _) = load_net_checked(path, &sched.fingerprint())?;
    if net.arch != cfg.arch() {
        return Err(Failure::new(
            EXIT_CONFIG,
            format!(
                "teacher architecture {:?} does not match the configured {:?}",
                net.arch,
                cfg.arch()
            ),
        ));
    }
    Ok(net)
}

fn save_distill(out: &Path, cfg: &RunConfig, dcfg: &DistillConfig, state: &DistillState) -> CmdResult {
    let sched = cfg.schedule()?;
    let fp = sched.fingerprint();
    let counters = Counters {
        step: state.step,
        images_seen: state.images_seen,
    };
    save_net(&out.join("psi.ckpt"), &state.psi, "psi", &fp, counters)?;
    save_net(&out.join("theta.ckpt"), &state.theta, "theta", &fp, counters)?;
    save_net(&out.join("theta_ema.ckpt"), &state.ema_generator(), "theta_ema", &fp, counters)?;
    let resume = ResumeFile {
        config: dcfg.clone(),
        state: state.clone(),
    };
    let text = serde_json::to_string(&resume).map_err(|e| Error::Checkpoint(e.to_string()))?;
    // write-then-rename so an interrupted save leaves the previous state intact
    let tmp = out.join(format!("{STATE_FILE}.tmp"));
    fs::write(&tmp, text + "\n").map_err(Error::from)?;
    fs::rename(&tmp, out.join(STATE_FILE)).map_err(Error::from)?;
    Ok(())
}

/// Keeps the header and the first `steps` data lines of a metrics CSV.
fn truncate_metrics(path: &Path, steps: u64) -> std::result::Result<Vec<u8>, Failure> {
    let file = fs::File::open(path).map_err(Error::from)?;
    let mut kept = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        if i as u64 > steps {
            break;
        }
        kept.extend_from_slice(line.map_err(Error::from)?.as_bytes());
        kept.push(b'\n');
    }
    Ok(kept)
}

/// Snapshot lines up to and including `step` (the steps column).
fn keep_snapshots_through(path: &Path, step: u64) -> std::result::Result<String, Failure> {
    let text = fs::read_to_string(path).map_err(Error::from)?;
    let mut kept = String::new();
    for (i, line) in text.lines().enumerate() {
        let keep = i == 0
            || line
                .split(',')
                .nth(6)
                .and_then(|s| s.parse::<u64>().ok())
                .is_some_and(|s| s <= step);
        if keep {
            kept.push_str(line);
            kept.push('\n');
        }
    }
    Ok(kept)
}

fn metrics_line(m: &crate::distill::StepMetrics, dcfg: &DistillConfig) -> String {
    let k = dcfg.guidance.as_array();
    format!(
        "{},{},{},{},{},{},{},{},{},{}\n",
        m.step, m.images_seen, m.psi_loss, m.theta_loss, m.omega_mean, k[0], k[1], k[2], k[3], dcfg.seed
    )
}

fn snapshot_row(
    cfg: &RunConfig,
    dcfg: &DistillConfig,
    state: &DistillState,
) -> std::result::Result<SweepRow, Failure> {
    let sched = cfg.schedule()?;
    let report = evaluate_generator(
        &cfg.world,
        &sched,
        &state.ema_generator(),
        dcfg.time_range.t_init,
        &cfg.eval,
        dcfg.guidance.as_array(),
    )?;
    Ok(SweepRow {
        label: cfg.guidance.strategy.map_or(RowLabel::Baseline, RowLabel::Cell),
        kappa: cfg.guidance.kappa.unwrap_or(dcfg.guidance.kappa4),
        scales: dcfg.guidance,
        seed: dcfg.seed,
        steps: state.step,
        images_seen: state.images_seen,
        report: Ok(report),
    })
}

pub fn cmd_distill(
    common: &Common,
    teacher_path: &Path,
    ov: Overrides,
    resume: bool,
    stop_after: Option<u64>,
) -> CmdResult {
    let cfg = resolve(common, ov)?;
    let sched = cfg.schedule()?;
    let dcfg = cfg.distill_config();
    dcfg.validate(&sched)?;
    let teacher = load_teacher(&cfg, teacher_path)?;
    write_resolved(&cfg, "distill", &common.config)?;
    let out = cfg.out_dir.clone();
    let metrics_path = out.join("metrics.csv");

    let mut state = if resume {
        let text = fs::read_to_string(out.join(STATE_FILE)).map_err(Error::from)?;
        let saved: ResumeFile =
            serde_json::from_str(&text).map_err(|e| Error::Checkpoint(format!("unreadable state file: {e}")))?;
        if saved.config != dcfg {
            return Err(Failure::new(EXIT_CONFIG, "saved state was produced with a different configuration"));
        }
        if saved.state.phi() != &teacher {
            return Err(Failure::new(EXIT_CONFIG, "saved state was produced from a different teacher"));
        }
        let kept = truncate_metrics(&metrics_path, saved.state.step)?;
        fs::write(&metrics_path, kept).map_err(Error::from)?;
        saved.state
    } else {
        fs::write(&metrics_path, format!("{METRICS_HEADER}\n")).map_err(Error::from)?;
        init_from_teacher(&teacher, &dcfg)?
    };
    let mut metrics = fs::OpenOptions::new()
        .append(true)
        .open(&metrics_path)
        .map_err(Error::from)?;

    let snapshots_path = out.join("eval_snapshots.csv");
    if cfg.training.eval_every > 0 {
        let kept = if resume && snapshots_path.exists() {
            keep_snapshots_through(&snapshots_path, state.step)?
        } else {
            format!("{}\n", SWEEP_HEADER.join(","))
        };
        fs::write(&snapshots_path, kept).map_err(Error::from)?;
    }

    let total = dcfg.total_steps();
    let limit = stop_after.map_or(total, |s| s.min(total));
    let mut pending = String::new();
    while state.step < limit {
        let m = match distill_step(&mut state, &sched, &dcfg) {
            Ok(m) => m,
            Err(f) => {
                metrics.write_all(pending.as_bytes()).map_err(Error::from)?;
                let dump_path = out.join("failure_dump.json");
                if let Some(d) = &f.dump {
                    let text = serde_json::to_string_pretty(d).map_err(|e| Error::Checkpoint(e.to_string()))?;
                    fs::write(&dump_path, text).map_err(Error::from)?;
                }
                return Err(Failure::new(
                    EXIT_TRAINING,
                    format!("{}; batch dump written to {}", f.error, dump_path.display()),
                ));
            }
        };
        pending.push_str(&metrics_line(&m, &dcfg));
        if m.step % 100 == 0 {
            log::info!(
                "step {} psi_loss {:.5} theta_loss {:.5} omega_mean {:.4}",
                m.step,
                m.psi_loss,
                m.theta_loss,
                m.omega_mean
            );
        }
        if cfg.training.eval_every > 0 && m.step % cfg.training.eval_every == 0 {
            let row = snapshot_row(&cfg, &dcfg, &state)?;
            let file = fs::OpenOptions::new()
                .append(true)
                .open(&snapshots_path)
                .map_err(Error::from)?;
            write_sweep_rows(file, &[row], false)?;
        }
        let every = cfg.training.checkpoint_every;
        if every > 0 && m.step % every == 0 && m.step < limit {
            metrics.write_all(pending.as_bytes()).map_err(Error::from)?;
            pending.clear();
            save_distill(&out, &cfg, &dcfg, &state)?;
        }
    }
    metrics.write_all(pending.as_bytes()).map_err(Error::from)?;
    metrics.flush().map_err(Error::from)?;
    save_distill(&out, &cfg, &dcfg, &state)?;
    println!("distill: {} steps, {} images", state.step, state.images_seen);
    Ok(())
}

fn print_checks(results: &[CheckResult]) {
    println!("{:<36} {:>14} {:>12}  result", "check", "measured", "tolerance");
    for r in results {
        let status = if r.passed { "PASS" } else { "FAIL" };
        let measured = match &r.error {
            Some(_) => "error".to_string(),
            None => format!("{:.3e}", r.measured),
        };
        println!("{:<36} {:>14} {:>12.1e}  {}", r.name, measured, r.tolerance, status);
        if let Some(e) = &r.error {
            println!("    {e}");
        }
    }
}

pub fn cmd_verify(common: &Common, inject_zero_sigma: Option<usize>) -> CmdResult {
    let cfg = resolve(common, Overrides::default())?;
    write_resolved(&cfg, "verify", &common.config)?;
    let mut sched = cfg.schedule()?;
    if let Some(t) = inject_zero_sigma {
        sched = sched.with_coefficients_at(t, 1.0, 0.0)?;
    }
    let results = run_battery(&cfg.world, &sched, &cfg.time_range, cfg.seed);
    print_checks(&results);
    let mut w = csv_writer(&cfg.out_dir.join("verify_report.csv"))?;
    w.write_record(["check", "measured", "tolerance", "passed", "error"])
        .map_err(csv_fail)?;
    for r in &results {
        w.write_record([
            r.name.clone(),
            r.measured.to_string(),
            r.tolerance.to_string(),
            r.passed.to_string(),
            r.error.clone().unwrap_or_default(),
        ])
        .map_err(csv_fail)?;
    }
    w.flush().map_err(Error::from)?;
    let failed: Vec<String> = results
        .iter()
        .filter(|r| !r.passed)
        .map(|r| match &r.error {
            Some(e) => format!("{} ({e})", r.name),
            None => format!("{} (measured {:e} > {:e})", r.name, r.measured, r.tolerance),
        })
        .collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::new(EXIT_VERIFY_FAILED, format!("failed checks: {}", failed.join(", "))))
    }
}

fn write_eval_csv(path: &Path, report: &EvalReport) -> CmdResult {
    let mut w = csv_writer(path)?;
    w.write_record([
        "condition",
        "n_generated",
        "n_reference",
        "sliced_w2",
        "gaussian_frechet",
        "alignment_score",
        "seed",
    ])
    .map_err(csv_fail)?;
    for m in report.per_condition.iter().chain([&report.pooled]) {
        w.write_record([
            m.condition.map_or("all".to_string(), |c| c.to_string()),
            m.n_generated.to_string(),
            m.n_reference.to_string(),
            m.sliced_w2.to_string(),
            m.gaussian_frechet.to_string(),
            m.alignment_score.to_string(),
            report.seed.to_string(),
        ])
        .map_err(csv_fail)?;
    }
    w.flush().map_err(Error::from)?;
    Ok(())
}

pub fn cmd_eval(common: &Common, theta: Option<&Path>, data_vs_data: bool) -> CmdResult {
    let cfg = resolve(common, Overrides::default())?;
    let sched = cfg.schedule()?;
    let report = match (theta, data_vs_data) {
        (_, true) => {
            let r = reference_samples(&cfg.world, cfg.eval.n_per_condition, cfg.eval.seed)?;
            evaluate_samples(&cfg.world, &r, &r, cfg.eval.n_proj, cfg.eval.seed, [1.0; 4])?
        }
        (Some(path), false) => {
            let net = load_teacher(&cfg, path)?;
            evaluate_generator(
                &cfg.world,
                &sched,
                &net,
                cfg.time_range.t_init,
                &cfg.eval,
                cfg.guidance.scales().as_array(),
            )?
        }
        (None, false) => return Err(Failure::new(EXIT_CONFIG, "eval needs --theta or --data-vs-data")),
    };
    write_resolved(&cfg, "eval", &common.config)?;
    write_eval_csv(&cfg.out_dir.join("eval.csv"), &report)?;
    for m in report.per_condition.iter().chain([&report.pooled]) {
        println!(
            "condition {:>3}  n {:>6}  sliced_w2 {:.5}  gaussian_frechet {:.5}  alignment {:.4}",
            m.condition.map_or("all".to_string(), |c| c.to_string()),
            m.n_generated,
            m.sliced_w2,
            m.gaussian_frechet,
            m.alignment_score
        );
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
pub fn cmd_sweep(
    common: &Common,
    teacher_path: &Path,
    strategies: &[Strategy],
    kappas: &[f64],
    seeds: &[u64],
    jobs: usize,
    budget: Option<u64>,
    raw_theta: bool,
) -> CmdResult {
    let cfg = resolve(
        common,
        Overrides {
            image_budget: budget,
            ..Default::default()
        },
    )?;
    let sched = cfg.schedule()?;
    let teacher = load_teacher(&cfg, teacher_path)?;
    let cells = sweep_cells(strategies, kappas)?;
    write_resolved(&cfg, "sweep", &common.config)?;
    let spec = SweepSpec {
        cells,
        seeds: seeds.to_vec(),
        distill: cfg.distill_config(),
        eval: cfg.eval,
        snapshot_every: cfg.training.eval_every,
        use_ema: !raw_theta,
        jobs: jobs.max(1),
    };
    let result = tradeoff_sweep(&cfg.world, &teacher, &sched, &spec)?;
    let out = &cfg.out_dir;
    write_sweep_csv(fs::File::create(out.join("sweep.csv")).map_err(Error::from)?, &result.rows)?;
    write_sweep_csv(fs::File::create(out.join("sweep_trace.csv")).map_err(Error::from)?, &result.trace)?;
    for metric in Metric::ALL {
        let svg = svg_line_chart(
            &format!("{} (pooled, mean over seeds)", metric.as_str()),
            "images seen",
            metric.as_str(),
            &trace_series(&result.trace, metric),
        );
        fs::write(out.join(format!("sweep_{}.svg", metric.as_str())), svg).map_err(Error::from)?;
    }
    let failed = result.failed_runs();
    println!("sweep: {} runs, {} failed", result.cell_runs(), failed);
    if failed > 0 && failed >= result.cell_runs() {
        return Err(Failure::new(EXIT_TRAINING, "every sweep run failed"));
    }
    Ok(())
}
