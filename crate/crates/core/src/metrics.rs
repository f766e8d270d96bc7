//! Sample-based evaluation: distribution match, condition adherence, and the
//! guidance-strategy sweep.

use std::fmt::Write as _;
use std::io::Write;

use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::diffusion::NoiseSchedule;
use crate::distill::{distill_step, init_from_teacher, sample_generator, standard_normal, DistillConfig};
use crate::error::{Error, Result};
use crate::guidance::{strategy_preset, GuidanceScales, Strategy};
use crate::nn::DenoiserNet;
use crate::oracle::{condition_posterior, sample_data, MixtureWorld};

pub const SWEEP_HEADER: [&str; 12] = [
    "strategy",
    "kappa1",
    "kappa2",
    "kappa3",
    "kappa4",
    "seed",
    "steps",
    "images_seen",
    "condition",
    "sliced_w2",
    "gaussian_frechet",
    "alignment_score",
];

fn check_samples(a: ArrayView2<f64>, min_rows: usize, what: &str) -> Result<()> {
    if a.nrows() < min_rows || a.ncols() == 0 {
        return Err(Error::input(format!(
            "{what} needs at least {min_rows} samples, got {}x{}",
            a.nrows(),
            a.ncols()
        )));
    }
    if a.iter().any(|v| !v.is_finite()) {
        return Err(Error::numeric(what, "samples contain non-finite values"));
    }
    Ok(())
}

/// Seeded unit directions, one per row.
pub fn projection_directions(d: usize, n_proj: usize, seed: u64) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut dirs = standard_normal(&mut rng, n_proj, d);
    for mut row in dirs.outer_iter_mut() {
        let norm = row.dot(&row).sqrt();
        row.mapv_inplace(|v| v / norm);
    }
    dirs
}

/// Squared W2 distance between two 1-D empirical measures given sorted
/// samples. Quantile functions are integrated exactly over the merged grid,
/// whose breakpoints are kept as integers in units of `1 / (n m)`.
fn w2_sq_sorted(a: &[f64], b: &[f64]) -> f64 {
    let (n, m) = (a.len(), b.len());
    let scale = (n * m) as f64;
    let (mut i, mut j, mut prev) = (0, 0, 0usize);
    let mut total = 0.0;
    while i < n && j < m {
        let (qa, qb) = ((i + 1) * m, (j + 1) * n);
        let next = qa.min(qb);
        total += (next - prev) as f64 / scale * (a[i] - b[j]).powi(2);
        prev = next;
        if qa == next {
            i += 1;
        }
        if qb == next {
            j += 1;
        }
    }
    total
}

/// Mean over `n_proj` seeded directions of the squared 1-D W2 distance of
/// the projected samples.
pub fn sliced_w2(a: ArrayView2<f64>, b: ArrayView2<f64>, n_proj: usize, seed: u64) -> Result<f64> {
    check_samples(a, 2, "sliced_w2 first set")?;
    check_samples(b, 2, "sliced_w2 second set")?;
    if a.ncols() != b.ncols() {
        return Err(Error::input("sliced_w2 sets differ in dimension"));
    }
    if n_proj == 0 {
        return Err(Error::config("sliced_w2 needs at least one projection"));
    }
    let dirs = projection_directions(a.ncols(), n_proj, seed);
    let pa = a.dot(&dirs.t());
    let pb = b.dot(&dirs.t());
    let sorted = |col: ndarray::ArrayView1<f64>| {
        let mut v = col.to_vec();
        v.sort_by(f64::total_cmp);
        v
    };
    let total: f64 = (0..n_proj)
        .map(|k| w2_sq_sorted(&sorted(pa.column(k)), &sorted(pb.column(k))))
        .sum();
    Ok(total / n_proj as f64)
}

fn mean_cov(a: ArrayView2<f64>) -> (Array1<f64>, Array2<f64>) {
    let n = a.nrows() as f64;
    let mu = a.mean_axis(Axis(0)).expect("nonempty");
    let centered = &a - &mu;
    let cov = centered.t().dot(&centered) / (n - 1.0);
    (mu, cov)
}

fn to_dmatrix(a: &Array2<f64>) -> DMatrix<f64> {
    DMatrix::from_fn(a.nrows(), a.ncols(), |i, j| a[[i, j]])
}

fn regularize_if_singular(cov: &mut Array2<f64>, what: &str) {
    let eig = SymmetricEigen::new(to_dmatrix(cov));
    let min = eig.eigenvalues.min();
    let scale = eig.eigenvalues.max().abs().max(1.0);
    if min <= 1e-12 * scale {
        log::warn!("{what} covariance is singular (min eigenvalue {min:e}); adding 1e-8 I");
        for i in 0..cov.nrows() {
            cov[[i, i]] += 1e-8;
        }
    }
}

fn sym_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(m.clone());
    let vals = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose()
}

/// `Tr((S_a S_b)^{1/2})` for symmetric positive semi-definite inputs.
pub fn trace_sqrt_product(sa: &Array2<f64>, sb: &Array2<f64>) -> f64 {
    if sa.nrows() == 2 {
        // S_a S_b is similar to an SPD matrix M with Tr sqrt(M) = sqrt(Tr M + 2 sqrt(det M))
        let p = sa.dot(sb);
        let tr = p[[0, 0]] + p[[1, 1]];
        let det_a = sa[[0, 0]] * sa[[1, 1]] - sa[[0, 1]] * sa[[1, 0]];
        let det_b = sb[[0, 0]] * sb[[1, 1]] - sb[[0, 1]] * sb[[1, 0]];
        let det = (det_a * det_b).max(0.0);
        return (tr + 2.0 * det.sqrt()).max(0.0).sqrt();
    }
    let ra = sym_sqrt(&to_dmatrix(sa));
    let inner = &ra * to_dmatrix(sb) * &ra;
    let inner = (&inner + inner.transpose()) * 0.5;
    SymmetricEigen::new(inner).eigenvalues.iter().map(|v| v.max(0.0).sqrt()).sum()
}

/// Frechet distance between Gaussian fits of the two sample sets.
pub fn gaussian_frechet(a: ArrayView2<f64>, b: ArrayView2<f64>) -> Result<f64> {
    let d = a.ncols();
    check_samples(a, d + 1, "gaussian_frechet first set")?;
    check_samples(b, d + 1, "gaussian_frechet second set")?;
    if b.ncols() != d {
        return Err(Error::input("gaussian_frechet sets differ in dimension"));
    }
    let (mu_a, mut sa) = mean_cov(a);
    let (mu_b, mut sb) = mean_cov(b);
    regularize_if_singular(&mut sa, "first");
    regularize_if_singular(&mut sb, "second");
    Ok(frechet_from_moments(&mu_a, &sa, &mu_b, &sb))
}

pub fn frechet_from_moments(mu_a: &Array1<f64>, sa: &Array2<f64>, mu_b: &Array1<f64>, sb: &Array2<f64>) -> f64 {
    let dm = mu_a - mu_b;
    let tr = sa.diag().sum() + sb.diag().sum() - 2.0 * trace_sqrt_product(sa, sb);
    (dm.dot(&dm) + tr).max(0.0)
}

/// Mean Bayes posterior of condition `c` over the samples.
pub fn alignment_score(world: &MixtureWorld, samples: ArrayView2<f64>, c: usize) -> Result<f64> {
    check_samples(samples, 1, "alignment_score")?;
    if c >= world.num_conditions() {
        return Err(Error::input(format!("condition {c} out of range")));
    }
    let mut total = 0.0;
    for row in samples.outer_iter() {
        total += condition_posterior(world, &row.to_vec())?[c];
    }
    Ok(total / samples.nrows() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConditionMetrics {
    /// `None` for the pooled row.
    pub condition: Option<usize>,
    pub n_generated: usize,
    pub n_reference: usize,
    pub sliced_w2: f64,
    pub gaussian_frechet: f64,
    pub alignment_score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub per_condition: Vec<ConditionMetrics>,
    pub pooled: ConditionMetrics,
    pub seed: u64,
    pub kappa: [f64; 4],
}

impl EvalReport {
    pub fn condition(&self, c: usize) -> &ConditionMetrics {
        &self.per_condition[c]
    }

    pub fn validate(&self) -> Result<()> {
        for m in self.per_condition.iter().chain([&self.pooled]) {
            let ok = [m.sliced_w2, m.gaussian_frechet, m.alignment_score]
                .iter()
                .all(|v| v.is_finite() && *v >= 0.0)
                && m.alignment_score <= 1.0 + 1e-12;
            if !ok {
                return Err(Error::numeric("eval_report", format!("invalid metrics {m:?}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    pub n_per_condition: usize,
    pub n_proj: usize,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            n_per_condition: 20_000,
            n_proj: 128,
            seed: 12345,
        }
    }
}

/// Compares `generated[c]` with `reference[c]` per condition and pooled.
pub fn evaluate_samples(
    world: &MixtureWorld,
    generated: &[Array2<f64>],
    reference: &[Array2<f64>],
    n_proj: usize,
    seed: u64,
    kappa: [f64; 4],
) -> Result<EvalReport> {
    if generated.len() != world.num_conditions() || reference.len() != generated.len() {
        return Err(Error::input("one sample set per condition is required"));
    }
    let metrics = |c: Option<usize>, g: ArrayView2<f64>, r: ArrayView2<f64>, align: f64| -> Result<ConditionMetrics> {
        Ok(ConditionMetrics {
            condition: c,
            n_generated: g.nrows(),
            n_reference: r.nrows(),
            sliced_w2: sliced_w2(g, r, n_proj, seed)?,
            gaussian_frechet: gaussian_frechet(g, r)?,
            alignment_score: align,
        })
    };
    let mut per_condition = Vec::with_capacity(generated.len());
    for (c, (g, r)) in generated.iter().zip(reference).enumerate() {
        let align = alignment_score(world, g.view(), c)?;
        per_condition.push(metrics(Some(c), g.view(), r.view(), align)?);
    }
    fn views(sets: &[Array2<f64>]) -> Vec<ArrayView2<'_, f64>> {
        sets.iter().map(|s| s.view()).collect()
    }
    let g_all = ndarray::concatenate(Axis(0), &views(generated)).map_err(|e| Error::input(e.to_string()))?;
    let r_all = ndarray::concatenate(Axis(0), &views(reference)).map_err(|e| Error::input(e.to_string()))?;
    let total: usize = generated.iter().map(|g| g.nrows()).sum();
    let align_all = per_condition
        .iter()
        .map(|m| m.alignment_score * m.n_generated as f64)
        .sum::<f64>()
        / total as f64;
    let pooled = metrics(None, g_all.view(), r_all.view(), align_all)?;
    let report = EvalReport {
        per_condition,
        pooled,
        seed,
        kappa,
    };
    report.validate()?;
    Ok(report)
}

/// Fresh world samples for every condition, drawn from `seed`.
pub fn reference_samples(world: &MixtureWorld, n: usize, seed: u64) -> Result<Vec<Array2<f64>>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..world.num_conditions()).map(|c| sample_data(world, c, n, &mut rng)).collect()
}

/// Samples the one-step generator for each condition and scores it against
/// fresh world samples.
pub fn evaluate_generator(
    world: &MixtureWorld,
    sched: &NoiseSchedule,
    theta: &DenoiserNet,
    t_init: usize,
    cfg: &EvalConfig,
    kappa: [f64; 4],
) -> Result<EvalReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x9e37_79b9_7f4a_7c15);
    let generated = (0..world.num_conditions())
        .map(|c| sample_generator(theta, sched, t_init, c, cfg.n_per_condition, &mut rng))
        .collect::<Result<Vec<_>>>()?;
    let reference = reference_samples(world, cfg.n_per_condition, cfg.seed)?;
    evaluate_samples(world, &generated, &reference, cfg.n_proj, cfg.seed, kappa)
}

/// One cell of a sweep: a strategy at one scale.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepCell {
    pub strategy: Strategy,
    pub kappa: f64,
    pub scales: GuidanceScales,
}

/// Expands strategies and scales into valid cells, sorted by strategy then
/// scale. `no_cfg` yields a single cell. Invalid pairs are an error.
pub fn sweep_cells(strategies: &[Strategy], kappas: &[f64]) -> Result<Vec<SweepCell>> {
    let mut cells = Vec::new();
    let mut strategies = strategies.to_vec();
    strategies.sort();
    strategies.dedup();
    for s in strategies {
        if s == Strategy::NoCfg {
            cells.push(SweepCell {
                strategy: s,
                kappa: 1.0,
                scales: GuidanceScales::NONE,
            });
            continue;
        }
        let mut ks = kappas.to_vec();
        ks.sort_by(f64::total_cmp);
        ks.dedup();
        for k in ks {
            cells.push(SweepCell {
                strategy: s,
                kappa: k,
                scales: strategy_preset(s, k)?,
            });
        }
    }
    Ok(cells)
}

#[derive(Debug, Clone)]
pub struct SweepSpec {
    pub cells: Vec<SweepCell>,
    pub seeds: Vec<u64>,
    /// Template; guidance and seed are replaced per run.
    pub distill: DistillConfig,
    pub eval: EvalConfig,
    /// Evaluate every this many steps in addition to the end (0 disables).
    pub snapshot_every: u64,
    pub use_ema: bool,
    pub jobs: usize,
}

/// Label of a sweep row's strategy column.
#[derive(Debug, Clone, PartialEq)]
pub enum RowLabel {
    Baseline,
    Cell(Strategy),
}

impl RowLabel {
    pub fn as_str(&self) -> &'static str {
        match self {
            RowLabel::Baseline => "baseline",
            RowLabel::Cell(s) => s.as_str(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub label: RowLabel,
    pub kappa: f64,
    pub scales: GuidanceScales,
    pub seed: u64,
    pub steps: u64,
    pub images_seen: u64,
    /// `Err` holds the failure message of an aborted run.
    pub report: std::result::Result<EvalReport, String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepResult {
    /// Baseline first, then cells in order, seeds inner.
    pub rows: Vec<SweepRow>,
    /// Periodic snapshots of every run.
    pub trace: Vec<SweepRow>,
}

impl SweepResult {
    pub fn failed_runs(&self) -> usize {
        self.rows.iter().filter(|r| r.report.is_err()).count()
    }

    pub fn cell_runs(&self) -> usize {
        self.rows.iter().filter(|r| r.label != RowLabel::Baseline).count()
    }
}

struct RunOutput {
    last: SweepRow,
    trace: Vec<SweepRow>,
}

fn run_cell(
    world: &MixtureWorld,
    teacher: &DenoiserNet,
    sched: &NoiseSchedule,
    spec: &SweepSpec,
    cell: SweepCell,
    seed: u64,
) -> RunOutput {
    let mut cfg = spec.distill.clone();
    cfg.guidance = cell.scales;
    cfg.seed = seed;
    let row = |steps, images, report| SweepRow {
        label: RowLabel::Cell(cell.strategy),
        kappa: cell.kappa,
        scales: cell.scales,
        seed,
        steps,
        images_seen: images,
        report,
    };
    let mut trace = Vec::new();
    let mut state = match init_from_teacher(teacher, &cfg) {
        Ok(s) => s,
        Err(e) => {
            return RunOutput {
                last: row(0, 0, Err(e.to_string())),
                trace,
            }
        }
    };
    let eval_now = |state: &crate::distill::DistillState| {
        let net = if spec.use_ema {
            state.ema_generator()
        } else {
            state.theta.clone()
        };
        evaluate_generator(world, sched, &net, cfg.time_range.t_init, &spec.eval, cell.scales.as_array())
            .map_err(|e| e.to_string())
    };
    let total = cfg.total_steps();
    for _ in 0..total {
        if let Err(f) = distill_step(&mut state, sched, &cfg) {
            log::warn!(
                "sweep cell {} kappa {} seed {} failed: {}",
                cell.strategy,
                cell.kappa,
                seed,
                f.error
            );
            return RunOutput {
                last: row(state.step, state.images_seen, Err(f.error.to_string())),
                trace,
            };
        }
        if spec.snapshot_every > 0 && state.step % spec.snapshot_every == 0 && state.step < total {
            trace.push(row(state.step, state.images_seen, eval_now(&state)));
        }
    }
    let last = row(state.step, state.images_seen, eval_now(&state));
    trace.push(last.clone());
    RunOutput { last, trace }
}

/// Distills once per cell and seed from the same teacher and evaluates each
/// result. A baseline row per seed evaluates the generator at initialization.
pub fn tradeoff_sweep(
    world: &MixtureWorld,
    teacher: &DenoiserNet,
    sched: &NoiseSchedule,
    spec: &SweepSpec,
) -> Result<SweepResult> {
    spec.distill.validate(sched)?;
    if spec.seeds.is_empty() || spec.cells.is_empty() {
        return Err(Error::config("sweep needs at least one seed and one cell"));
    }
    let mut rows = Vec::new();
    for &seed in &spec.seeds {
        let report = evaluate_generator(
            world,
            sched,
            teacher,
            spec.distill.time_range.t_init,
            &spec.eval,
            GuidanceScales::NONE.as_array(),
        )
        .map_err(|e| e.to_string());
        rows.push(SweepRow {
            label: RowLabel::Baseline,
            kappa: 1.0,
            scales: GuidanceScales::NONE,
            seed,
            steps: 0,
            images_seen: 0,
            report,
        });
    }
    let jobs: Vec<(SweepCell, u64)> = spec
        .cells
        .iter()
        .flat_map(|&c| spec.seeds.iter().map(move |&s| (c, s)))
        .collect();
    let outputs: Vec<RunOutput> = if spec.jobs > 1 {
        use rayon::prelude::*;
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(spec.jobs)
            .build()
            .map_err(|e| Error::config(format!("cannot build worker pool: {e}")))?;
        pool.install(|| {
            jobs.par_iter()
                .map(|&(c, s)| run_cell(world, teacher, sched, spec, c, s))
                .collect()
        })
    } else {
        jobs.iter()
            .map(|&(c, s)| {
                log::info!("sweep cell {} kappa {} seed {}", c.strategy, c.kappa, s);
                run_cell(world, teacher, sched, spec, c, s)
            })
            .collect()
    };
    let mut trace = Vec::new();
    for out in outputs {
        rows.push(out.last);
        trace.extend(out.trace);
    }
    Ok(SweepResult { rows, trace })
}

fn fmt_f64(v: f64) -> String {
    format!("{v}")
}

/// Writes rows in the fixed sweep schema, one line per condition plus a
/// pooled line (`condition = all`). Failed runs get one `failed` line.
pub fn write_sweep_csv<W: Write>(out: W, rows: &[SweepRow]) -> Result<()> {
    write_sweep_rows(out, rows, true)
}

/// As [`write_sweep_csv`], optionally without the header line.
pub fn write_sweep_rows<W: Write>(out: W, rows: &[SweepRow], header: bool) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(out);
    let csv_err = |e: csv::Error| Error::Io(std::io::Error::other(e));
    if header {
        w.write_record(SWEEP_HEADER).map_err(csv_err)?;
    }
    for r in rows {
        let k = r.scales.as_array();
        let mut base = vec![
            r.label.as_str().to_string(),
            fmt_f64(k[0]),
            fmt_f64(k[1]),
            fmt_f64(k[2]),
            fmt_f64(k[3]),
            r.seed.to_string(),
            r.steps.to_string(),
            r.images_seen.to_string(),
        ];
        match &r.report {
            Err(_) => {
                base.extend(["failed".to_string(), String::new(), String::new(), String::new()]);
                w.write_record(&base).map_err(csv_err)?;
            }
            Ok(rep) => {
                for m in rep.per_condition.iter().chain([&rep.pooled]) {
                    let mut rec = base.clone();
                    rec.push(m.condition.map_or("all".to_string(), |c| c.to_string()));
                    rec.push(fmt_f64(m.sliced_w2));
                    rec.push(fmt_f64(m.gaussian_frechet));
                    rec.push(fmt_f64(m.alignment_score));
                    w.write_record(&rec).map_err(csv_err)?;
                }
            }
        }
    }
    w.flush()?;
    Ok(())
}

/// Metric columns for which plots are drawn.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Metric {
    SlicedW2,
    GaussianFrechet,
    AlignmentScore,
}

impl Metric {
    pub const ALL: [Metric; 3] = [Metric::SlicedW2, Metric::GaussianFrechet, Metric::AlignmentScore];

    pub fn as_str(&self) -> &'static str {
        match self {
            Metric::SlicedW2 => "sliced_w2",
            Metric::GaussianFrechet => "gaussian_frechet",
            Metric::AlignmentScore => "alignment_score",
        }
    }

    pub fn of(&self, m: &ConditionMetrics) -> f64 {
        match self {
            Metric::SlicedW2 => m.sliced_w2,
            Metric::GaussianFrechet => m.gaussian_frechet,
            Metric::AlignmentScore => m.alignment_score,
        }
    }
}

pub fn median(values: &mut [f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    values.sort_by(f64::total_cmp);
    let n = values.len();
    Some(if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
}

/// Pooled metric against images seen, averaged over seeds, one series per
/// strategy and scale.
pub fn trace_series(trace: &[SweepRow], metric: Metric) -> Vec<Series> {
    let mut out: Vec<Series> = Vec::new();
    let mut keyed: Vec<(String, u64, Vec<f64>)> = Vec::new();
    for r in trace {
        let Ok(rep) = &r.report else { continue };
        let label = format!("{} k={}", r.label.as_str(), r.kappa);
        let v = metric.of(&rep.pooled);
        match keyed.iter_mut().find(|(l, x, _)| *l == label && *x == r.images_seen) {
            Some((_, _, vs)) => vs.push(v),
            None => keyed.push((label, r.images_seen, vec![v])),
        }
    }
    for (label, x, vs) in keyed {
        let y = vs.iter().sum::<f64>() / vs.len() as f64;
        match out.iter_mut().find(|s| s.label == label) {
            Some(s) => s.points.push((x as f64, y)),
            None => out.push(Series {
                label,
                points: vec![(x as f64, y)],
            }),
        }
    }
    for s in &mut out {
        s.points.sort_by(|a, b| a.0.total_cmp(&b.0));
    }
    out
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

const PALETTE: [&str; 8] = [
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f",
];

/// A plain SVG line chart.
pub fn svg_line_chart(title: &str, x_label: &str, y_label: &str, series: &[Series]) -> String {
    let (w, h) = (720.0, 440.0);
    let (l, r, t, b) = (70.0, 190.0, 40.0, 50.0);
    let pts = series.iter().flat_map(|s| s.points.iter().copied());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for (x, y) in pts.filter(|(x, y)| x.is_finite() && y.is_finite()) {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if !x0.is_finite() {
        (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
    }
    if x1 - x0 <= 0.0 {
        x1 = x0 + 1.0;
    }
    if y1 - y0 <= 0.0 {
        y1 = y0 + 1.0;
    }
    let px = |x: f64| l + (x - x0) / (x1 - x0) * (w - l - r);
    let py = |y: f64| h - b - (y - y0) / (y1 - y0) * (h - t - b);
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#
    );
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{}" y="24" font-family="sans-serif" font-size="16" text-anchor="middle">{}</text>"#,
        (w - r + l) / 2.0,
        xml_escape(title)
    );
    let _ = writeln!(
        s,
        r#"<line x1="{l}" y1="{0}" x2="{1}" y2="{0}" stroke="black"/><line x1="{l}" y1="{t}" x2="{l}" y2="{0}" stroke="black"/>"#,
        h - b,
        w - r
    );
    for i in 0..=4 {
        let f = i as f64 / 4.0;
        let (xv, yv) = (x0 + f * (x1 - x0), y0 + f * (y1 - y0));
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" font-family="sans-serif" font-size="11" text-anchor="middle">{}</text>"#,
            px(xv),
            h - b + 16.0,
            format_tick(xv)
        );
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" font-family="sans-serif" font-size="11" text-anchor="end">{}</text>"#,
            l - 6.0,
            py(yv) + 4.0,
            format_tick(yv)
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{:.1}" y="{:.1}" font-family="sans-serif" font-size="12" text-anchor="middle">{}</text>"#,
        (w - r + l) / 2.0,
        h - 12.0,
        xml_escape(x_label)
    );
    let _ = writeln!(
        s,
        r#"<text x="16" y="{:.1}" font-family="sans-serif" font-size="12" text-anchor="middle" transform="rotate(-90 16 {:.1})">{}</text>"#,
        (h - b + t) / 2.0,
        (h - b + t) / 2.0,
        xml_escape(y_label)
    );
    for (i, ser) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let path: Vec<String> = ser
            .points
            .iter()
            .filter(|(x, y)| x.is_finite() && y.is_finite())
            .map(|&(x, y)| format!("{:.2},{:.2}", px(x), py(y)))
            .collect();
        let _ = writeln!(
            s,
            r#"<polyline fill="none" stroke="{color}" stroke-width="2" points="{}"/>"#,
            path.join(" ")
        );
        let ly = t + 16.0 * i as f64;
        let _ = writeln!(
            s,
            r#"<line x1="{0}" y1="{ly}" x2="{1}" y2="{ly}" stroke="{color}" stroke-width="2"/><text x="{2}" y="{3}" font-family="sans-serif" font-size="11">{4}</text>"#,
            w - r + 10.0,
            w - r + 30.0,
            w - r + 35.0,
            ly + 4.0,
            xml_escape(&ser.label)
        );
    }
    s.push_str("</svg>\n");
    s
}

fn format_tick(v: f64) -> String {
    if v.abs() >= 1e4 {
        format!("{v:.0}")
    } else {
        format!("{v:.3}")
    }
}
