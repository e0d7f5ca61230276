//! Reproducible experiment runs. Each run returns an [`ExperimentReport`] of
//! CSV tables plus pass/fail checks; CSV contents depend only on the config.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use nalgebra::DVector;
use rand::RngCore;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linear_model::{least_squares_solution, scale_invariant_solution, OverdeterminedSystem};
use crate::mdp_sim::{outlier_chain, random_doubly_stochastic_mrp, true_value, FeatureMap};
use crate::rng;
use crate::total_projections::{solve_seeded, Mode, SolveTrace, SolverConfig, StepRule};
use crate::value_estimators::{
    check_error_bound, mc_fixed_point, normalized_mc_solve, normalized_td0_solve, td0_fixed_point_bruteforce,
    td0_fixed_point_tensor, EstimatorConfig,
};

/// Bumped whenever a CSV layout changes.
/// Per-repetition error vectors of the two fits.
type ErrorPair = (DVector<f64>, DVector<f64>);

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    Outlier,
    Steps,
    Momentum,
    Rl,
}

impl ExperimentKind {
    pub fn name(self) -> &'static str {
        match self {
            Self::Outlier => "outlier",
            Self::Steps => "steps",
            Self::Momentum => "momentum",
            Self::Rl => "rl",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: ExperimentKind,
    /// States (or equations).
    pub m: usize,
    /// Features (or unknowns).
    pub n: usize,
    pub mu: f64,
    pub sigma: f64,
    pub p_outlier: f64,
    pub r: f64,
    pub gamma: f64,
    /// Solver for `steps` and `momentum`; variants override the step rule
    /// and momentum.
    pub solver: SolverConfig,
    pub betas: Vec<f64>,
    pub mc: EstimatorConfig,
    pub td: EstimatorConfig,
    /// Largest accepted distance to an analytic fixed point.
    pub tolerance: f64,
    /// Error threshold used for convergence and ordering checks.
    pub threshold: f64,
    /// Keep every `trace_every`-th record of long stochastic traces.
    pub trace_every: usize,
    pub repetitions: usize,
    pub seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self::new(ExperimentKind::Outlier)
    }
}

impl ExperimentConfig {
    /// Defaults for one experiment.
    pub fn new(kind: ExperimentKind) -> Self {
        let base = Self {
            experiment: kind,
            m: 20,
            n: 1,
            mu: 1.0,
            sigma: 0.05,
            p_outlier: 5.0,
            r: 1.0,
            gamma: 0.5,
            solver: SolverConfig {
                p: 0.51,
                beta: 0.0,
                epsilon_guard: 1e-12,
                max_iters: 300,
                mode: Mode::Batch,
                step_rule: StepRule::CurvatureStep,
                ..SolverConfig::default()
            },
            betas: vec![0.0, 0.3, 0.5, 0.7, 0.9],
            mc: EstimatorConfig {
                solver: SolverConfig { p: 1.0, beta: 0.5, max_iters: 2000, ..SolverConfig::default() },
                episode_len: 200,
            },
            td: EstimatorConfig {
                solver: SolverConfig { p: 0.85, beta: 0.5, max_iters: 200_000, ..SolverConfig::default() },
                episode_len: 2,
            },
            tolerance: 0.05,
            threshold: 1e-6,
            trace_every: 100,
            repetitions: 1000,
            seed: 0,
        };
        match kind {
            ExperimentKind::Outlier => base,
            ExperimentKind::Steps => Self { m: 20, n: 5, repetitions: 1, ..base },
            ExperimentKind::Momentum => Self {
                m: 20,
                n: 5,
                repetitions: 10,
                solver: SolverConfig { max_iters: 1000, step_rule: StepRule::FixedAlpha(1.0), ..base.solver },
                ..base
            },
            ExperimentKind::Rl => Self { m: 10, n: 3, repetitions: 5, ..base },
        }
    }

    /// Parses a JSON config; absent fields take the defaults of the named
    /// experiment.
    pub fn from_json(text: &str) -> Result<Self> {
        let value: serde_json::Value = serde_json::from_str(text)?;
        let kind = match value.get("experiment") {
            Some(k) => serde_json::from_value(k.clone())?,
            None => ExperimentKind::Outlier,
        };
        let mut merged = serde_json::to_value(Self::new(kind))?;
        merge(&mut merged, value);
        let cfg: Self = serde_json::from_value(merged)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidInput(msg));
        if self.repetitions == 0 {
            return bad("repetitions must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.gamma) {
            return bad(format!("gamma = {} outside [0, 1)", self.gamma));
        }
        if self.trace_every == 0 {
            return bad("trace_every must be at least 1".into());
        }
        if !(self.threshold > 0.0 && self.tolerance > 0.0) {
            return bad("threshold and tolerance must be positive".into());
        }
        match self.experiment {
            ExperimentKind::Outlier => {
                if self.m < 2 {
                    return bad(format!("outlier chain needs m >= 2, got {}", self.m));
                }
                if !(self.sigma >= 0.0) || !self.mu.is_finite() || !self.p_outlier.is_finite() || !self.r.is_finite()
                {
                    return bad("outlier parameters must be finite with sigma >= 0".into());
                }
                if self.mu == 0.0 {
                    return bad("mu = 0 gives the outlier a zero feature".into());
                }
            }
            ExperimentKind::Steps | ExperimentKind::Momentum | ExperimentKind::Rl => {
                if self.n == 0 || self.m < self.n {
                    return bad(format!("need m >= n >= 1, got m = {}, n = {}", self.m, self.n));
                }
            }
        }
        match self.experiment {
            ExperimentKind::Steps | ExperimentKind::Momentum => self.solver.validate()?,
            ExperimentKind::Rl => {
                self.mc.validate()?;
                self.td.validate()?;
            }
            ExperimentKind::Outlier => {}
        }
        if self.experiment == ExperimentKind::Momentum
            && (self.betas.is_empty() || self.betas.iter().any(|b| !(0.0..1.0).contains(b)))
        {
            return bad("betas must be a nonempty list in [0, 1)".into());
        }
        Ok(())
    }
}

fn merge(base: &mut serde_json::Value, over: serde_json::Value) {
    match (base, over) {
        (serde_json::Value::Object(b), serde_json::Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// A named CSV table.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub name: String,
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new(name: &str, header: &[&str]) -> Self {
        Self { name: name.into(), header: header.iter().map(|h| h.to_string()).collect(), rows: Vec::new() }
    }

    pub fn push(&mut self, row: Vec<String>) {
        self.rows.push(row);
    }

    /// Column values by header name.
    pub fn column(&self, name: &str) -> Option<Vec<&str>> {
        let j = self.header.iter().position(|h| h == name)?;
        Some(self.rows.iter().map(|r| r[j].as_str()).collect())
    }

    /// Every row has one field per column and no field is empty or `NaN`.
    pub fn validate(&self) -> Result<()> {
        for (i, row) in self.rows.iter().enumerate() {
            if row.len() != self.header.len() {
                return Err(Error::InvalidInput(format!(
                    "{}: row {i} has {} fields for {} columns",
                    self.name,
                    row.len(),
                    self.header.len()
                )));
            }
            if row.iter().any(|f| f.is_empty() || f.eq_ignore_ascii_case("nan")) {
                return Err(Error::InvalidInput(format!("{}: row {i} has a missing value", self.name)));
            }
        }
        Ok(())
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        self.validate()?;
        let mut wtr = csv::Writer::from_writer(writer);
        wtr.write_record(&self.header)?;
        for row in &self.rows {
            wtr.write_record(row)?;
        }
        wtr.flush()?;
        Ok(())
    }
}

fn num(x: f64) -> String {
    format!("{x:e}")
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    fn new(name: impl Into<String>, passed: bool, detail: impl Into<String>) -> Self {
        Self { name: name.into(), passed, detail: detail.into() }
    }
}

#[derive(Debug, Clone)]
pub struct ExperimentReport {
    pub config: ExperimentConfig,
    pub tables: Vec<Table>,
    pub summary: BTreeMap<String, f64>,
    pub checks: Vec<Check>,
    pub wall_time_s: f64,
}

#[derive(Serialize)]
struct Meta<'a> {
    schema_version: u32,
    experiment: &'static str,
    wall_time_s: f64,
    passed: bool,
    checks: &'a [Check],
}

impl ExperimentReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn table(&self, name: &str) -> Option<&Table> {
        self.tables.iter().find(|t| t.name == name)
    }

    pub fn summary_value(&self, key: &str) -> Option<f64> {
        self.summary.get(key).copied()
    }

    /// Writes `<table>.csv` for every table plus `summary.csv`, `checks.csv`
    /// and `config.json`, all deterministic, and `meta.json` with the wall
    /// time. Returns the written paths.
    pub fn write(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        std::fs::create_dir_all(dir)?;
        let mut summary = Table::new("summary", &["key", "value"]);
        for (k, v) in &self.summary {
            summary.push(vec![k.clone(), num(*v)]);
        }
        let mut checks = Table::new("checks", &["name", "passed", "detail"]);
        for c in &self.checks {
            checks.push(vec![c.name.clone(), u8::from(c.passed).to_string(), c.detail.clone()]);
        }
        let mut written = Vec::new();
        for table in self.tables.iter().chain([&summary, &checks]) {
            let path = dir.join(format!("{}.csv", table.name));
            table.write_csv(File::create(&path)?)?;
            written.push(path);
        }
        let path = dir.join("config.json");
        serde_json::to_writer_pretty(File::create(&path)?, &self.config)?;
        written.push(path);
        let meta = Meta {
            schema_version: SCHEMA_VERSION,
            experiment: self.config.experiment.name(),
            wall_time_s: self.wall_time_s,
            passed: self.passed(),
            checks: &self.checks,
        };
        let path = dir.join("meta.json");
        serde_json::to_writer_pretty(File::create(&path)?, &meta)?;
        written.push(path);
        Ok(written)
    }
}

/// Dispatches on `cfg.experiment`.
pub fn run(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    match cfg.experiment {
        ExperimentKind::Outlier => run_outlier_experiment(cfg),
        ExperimentKind::Steps => run_step_comparison(cfg),
        ExperimentKind::Momentum => run_momentum_comparison(cfg),
        ExperimentKind::Rl => run_rl_estimators(cfg),
    }
}

fn finish(
    cfg: &ExperimentConfig,
    start: Instant,
    tables: Vec<Table>,
    summary: BTreeMap<String, f64>,
    checks: Vec<Check>,
) -> Result<ExperimentReport> {
    for t in &tables {
        t.validate()?;
    }
    Ok(ExperimentReport { config: cfg.clone(), tables, summary, checks, wall_time_s: start.elapsed().as_secs_f64() })
}

/// Outlier chain, repeated over independent feature draws. Errors are
/// reported as `V_s − φ_s w`, averaged per state over repetitions.
pub fn run_outlier_experiment(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    let start = Instant::now();
    let cfg = &ExperimentConfig { experiment: ExperimentKind::Outlier, ..cfg.clone() };
    cfg.validate()?;
    let m = cfg.m;
    let per_rep: Vec<(DVector<f64>, DVector<f64>)> = (0..cfg.repetitions)
        .into_par_iter()
        .map(|rep| {
            let mut rng = rng::stream(cfg.seed, rep as u64);
            let (mrp, f) = outlier_chain(m, cfg.mu, cfg.sigma, cfg.p_outlier, cfg.r, cfg.gamma, &mut rng)?;
            let v = true_value(&mrp)?;
            let sys = OverdeterminedSystem::new(f.phi().clone(), v.clone(), None)?;
            let ours = &v - f.phi() * scale_invariant_solution(&sys)?;
            let ls = &v - f.phi() * least_squares_solution(&sys)?;
            Ok((ours, ls))
        })
        .collect::<Result<_>>()?;

    let reps = cfg.repetitions as f64;
    let mut mean_ours = DVector::zeros(m);
    let mut mean_ls = DVector::zeros(m);
    for (o, l) in &per_rep {
        mean_ours += o;
        mean_ls += l;
    }
    mean_ours /= reps;
    mean_ls /= reps;
    let sd = |mean: &DVector<f64>, pick: fn(&ErrorPair) -> &DVector<f64>| {
        let denom = (reps - 1.0).max(1.0);
        DVector::from_fn(m, |s, _| {
            (per_rep.iter().map(|r| (pick(r)[s] - mean[s]).powi(2)).sum::<f64>() / denom).sqrt()
        })
    };
    let sd_ours = sd(&mean_ours, |r| &r.0);
    let sd_ls = sd(&mean_ls, |r| &r.1);

    let mut table = Table::new("outlier_errors", &["state", "mean_err_ours", "mean_err_ls", "sd_ours", "sd_ls"]);
    for s in 0..m {
        table.push(vec![s.to_string(), num(mean_ours[s]), num(mean_ls[s]), num(sd_ours[s]), num(sd_ls[s])]);
    }
    let inner = (m - 1) as f64;
    let mut summary = BTreeMap::new();
    summary.insert("ours_non_outlier".into(), mean_ours.rows(0, m - 1).sum() / inner);
    summary.insert("ls_non_outlier".into(), mean_ls.rows(0, m - 1).sum() / inner);
    summary.insert("ours_outlier".into(), mean_ours[m - 1]);
    summary.insert("ls_outlier".into(), mean_ls[m - 1]);
    let checks = vec![Check::new(
        "finite_errors",
        mean_ours.iter().chain(mean_ls.iter()).all(|x| x.is_finite()),
        "all mean errors finite",
    )];
    finish(cfg, start, vec![table], summary, checks)
}

fn random_system(cfg: &ExperimentConfig, rep: usize) -> Result<OverdeterminedSystem> {
    let mut rng = rng::stream(cfg.seed, rep as u64);
    loop {
        let sys = OverdeterminedSystem::random_uniform(cfg.m, cfg.n, &mut rng)?;
        if scale_invariant_solution(&sys).is_ok() {
            return Ok(sys);
        }
    }
}

/// First iteration whose error is at most `threshold`.
fn first_hit(trace: &SolveTrace, threshold: f64) -> Option<usize> {
    trace.records.iter().find(|r| r.err.is_some_and(|e| e <= threshold)).map(|r| r.k)
}

const TRACE_HEADER: [&str; 8] = ["rep", "variant", "k", "err", "g", "theta", "alpha", "skipped"];

fn push_trace(table: &mut Table, rep: usize, variant: &str, trace: &SolveTrace, every: usize) {
    for r in trace.records.iter().filter(|r| r.k % every == 0 || r.k == 1) {
        table.push(vec![
            rep.to_string(),
            variant.into(),
            r.k.to_string(),
            r.err.map(num).unwrap_or_else(|| "inf".into()),
            num(r.g),
            r.theta.map(num).unwrap_or_else(|| "none".into()),
            num(r.alpha),
            u8::from(r.skipped).to_string(),
        ]);
    }
}

/// Batch solves of random uniform systems with plain Total Projections
/// (`α = 1`), the curvature step, and the curvature step with momentum.
pub fn run_step_comparison(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    let start = Instant::now();
    let cfg = &ExperimentConfig { experiment: ExperimentKind::Steps, ..cfg.clone() };
    cfg.validate()?;
    let base = SolverConfig { mode: Mode::Batch, ..cfg.solver.clone() };
    let momentum_beta = if base.beta > 0.0 { base.beta } else { 0.5 };
    let variants = [
        ("plain", SolverConfig { step_rule: StepRule::FixedAlpha(1.0), beta: 0.0, ..base.clone() }),
        ("curvature", SolverConfig { step_rule: StepRule::CurvatureStep, beta: 0.0, ..base.clone() }),
        ("curvature_momentum", SolverConfig { step_rule: StepRule::CurvatureStep, beta: momentum_beta, ..base }),
    ];
    let runs: Vec<Vec<SolveTrace>> = (0..cfg.repetitions)
        .into_par_iter()
        .map(|rep| {
            let sys = random_system(cfg, rep)?;
            let w_star = scale_invariant_solution(&sys)?;
            variants
                .iter()
                .map(|(_, v)| solve_seeded(&sys, v, None, Some(&w_star)).map(|(_, t)| t))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;

    let mut table = Table::new("step_traces", &TRACE_HEADER);
    let mut hits = Table::new("step_hits", &["rep", "variant", "first_k_below_threshold", "final_err"]);
    let mut checks = Vec::new();
    let mut summary = BTreeMap::new();
    for (rep, traces) in runs.iter().enumerate() {
        for ((name, _), trace) in variants.iter().zip(traces) {
            push_trace(&mut table, rep, name, trace, 1);
            let hit = first_hit(trace, cfg.threshold);
            let final_err = trace.errors().last().copied().unwrap_or(f64::INFINITY);
            hits.push(vec![
                rep.to_string(),
                name.to_string(),
                hit.map_or_else(|| "never".into(), |k| k.to_string()),
                num(final_err),
            ]);
            checks.push(Check::new(
                format!("rep{rep}_{name}_converges"),
                hit.is_some(),
                format!("final error {final_err:e}"),
            ));
            if rep == 0 {
                summary.insert(format!("{name}_first_hit"), hit.map_or(f64::INFINITY, |k| k as f64));
            }
        }
        let curv = traces[1].errors();
        let monotone = curv.windows(2).all(|w| w[1] <= w[0] * (1.0 + 1e-12));
        checks.push(Check::new(format!("rep{rep}_curvature_monotone"), monotone, "batch curvature trace"));
        let plain = first_hit(&traces[0], cfg.threshold);
        let mom = first_hit(&traces[2], cfg.threshold);
        let faster = matches!((mom, plain), (Some(a), Some(b)) if a < b) || (mom.is_some() && plain.is_none());
        checks.push(Check::new(
            format!("rep{rep}_momentum_faster_than_plain"),
            faster,
            format!("{mom:?} vs {plain:?}"),
        ));
    }
    finish(cfg, start, vec![table, hits], summary, checks)
}

/// Heavy-ball β sweep in batch mode, averaged over random uniform systems.
pub fn run_momentum_comparison(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    let start = Instant::now();
    let cfg = &ExperimentConfig { experiment: ExperimentKind::Momentum, ..cfg.clone() };
    cfg.validate()?;
    let runs: Vec<Vec<Vec<f64>>> = (0..cfg.repetitions)
        .into_par_iter()
        .map(|rep| {
            let sys = random_system(cfg, rep)?;
            let w_star = scale_invariant_solution(&sys)?;
            let e0 = w_star.norm();
            cfg.betas
                .iter()
                .map(|&beta| {
                    let solver = SolverConfig { beta, mode: Mode::Batch, ..cfg.solver.clone() };
                    let (_, trace) = solve_seeded(&sys, &solver, None, Some(&w_star))?;
                    Ok(std::iter::once(e0).chain(trace.errors()).collect())
                })
                .collect::<Result<Vec<Vec<f64>>>>()
        })
        .collect::<Result<_>>()?;

    let iters = cfg.solver.max_iters;
    let reps = cfg.repetitions as f64;
    let mut table = Table::new("momentum_traces", &["beta", "k", "mean_err"]);
    let mut summary = BTreeMap::new();
    let mut checks = Vec::new();
    for (b, beta) in cfg.betas.iter().enumerate() {
        let mean: Vec<f64> = (0..=iters).map(|k| runs.iter().map(|r| r[b][k]).sum::<f64>() / reps).collect();
        for (k, e) in mean.iter().enumerate() {
            table.push(vec![num(*beta), k.to_string(), num(*e)]);
        }
        let last = *mean.last().expect("at least the start");
        summary.insert(format!("beta_{beta}_final_mean_err"), last);
        let worst = mean.iter().cloned().fold(0.0, f64::max);
        checks.push(Check::new(
            format!("beta_{beta}_converges"),
            last <= cfg.threshold && worst.is_finite(),
            format!("final mean error {last:e}, peak {worst:e}"),
        ));
    }
    finish(cfg, start, vec![table], summary, checks)
}

struct RlRun {
    mc_dist: f64,
    td_dist: f64,
    oracle_gap: f64,
    bound: crate::value_estimators::BoundReport,
    mc_trace: SolveTrace,
    td_trace: SolveTrace,
    degenerate: usize,
}

/// Normalized MC and TD(0) on random doubly stochastic chains, compared with
/// their analytic fixed points, plus the TD(0) error bound.
pub fn run_rl_estimators(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    let start = Instant::now();
    let cfg = &ExperimentConfig { experiment: ExperimentKind::Rl, ..cfg.clone() };
    cfg.validate()?;
    let runs: Vec<RlRun> = (0..cfg.repetitions)
        .into_par_iter()
        .map(|rep| {
            let mut rng = rng::stream(cfg.seed, rep as u64);
            let mrp = random_doubly_stochastic_mrp(cfg.m, cfg.gamma, &mut rng)?;
            let f = FeatureMap::random_uniform(cfg.m, cfg.n, &mut rng)?;
            let mut mc_cfg = cfg.mc.clone();
            mc_cfg.solver.seed = rng.next_u64();
            let mut td_cfg = cfg.td.clone();
            td_cfg.solver.seed = rng.next_u64();
            let mc = normalized_mc_solve(&mrp, &f, &mc_cfg)?;
            let td = normalized_td0_solve(&mrp, &f, &td_cfg)?;
            let w_m = mc_fixed_point(&mrp, &f)?;
            let w_n = td0_fixed_point_bruteforce(&mrp, &f)?;
            let w_t = td0_fixed_point_tensor(&mrp, &f)?;
            Ok(RlRun {
                mc_dist: (&mc.w - w_m).norm(),
                td_dist: (&td.w - &w_n).norm(),
                oracle_gap: (w_t - w_n).amax(),
                bound: check_error_bound(&mrp, &f)?,
                mc_trace: mc.trace,
                td_trace: td.trace,
                degenerate: td.degenerate_pairs,
            })
        })
        .collect::<Result<_>>()?;

    let mut results = Table::new(
        "rl_results",
        &[
            "rep",
            "mc_dist",
            "td_dist",
            "tensor_vs_bruteforce",
            "bound_lhs",
            "bound_rhs",
            "bound_holds",
            "td_residual_n",
            "td_residual_l",
            "lhs_rowscaled",
            "rhs_rowscaled",
            "degenerate_pairs",
        ],
    );
    let mut traces = Table::new("rl_traces", &TRACE_HEADER);
    let mut checks = Vec::new();
    for (rep, r) in runs.iter().enumerate() {
        let b = &r.bound;
        results.push(vec![
            rep.to_string(),
            num(r.mc_dist),
            num(r.td_dist),
            num(r.oracle_gap),
            num(b.lhs),
            num(b.rhs),
            u8::from(b.holds).to_string(),
            num(b.td_residual_n),
            num(b.td_residual_l),
            num(b.lhs_rowscaled),
            num(b.rhs_rowscaled),
            r.degenerate.to_string(),
        ]);
        push_trace(&mut traces, rep, "mc", &r.mc_trace, cfg.trace_every);
        push_trace(&mut traces, rep, "td0", &r.td_trace, cfg.trace_every);
        checks.push(Check::new(format!("rep{rep}_mc_within_tolerance"), r.mc_dist <= cfg.tolerance, num(r.mc_dist)));
        checks.push(Check::new(format!("rep{rep}_td_within_tolerance"), r.td_dist <= cfg.tolerance, num(r.td_dist)));
        checks.push(Check::new(format!("rep{rep}_tensor_matches_loops"), r.oracle_gap <= 1e-9, num(r.oracle_gap)));
        checks.push(Check::new(
            format!("rep{rep}_error_bound"),
            b.holds,
            format!("lhs {:e} rhs {:e}", b.lhs, b.rhs),
        ));
    }
    let mut summary = BTreeMap::new();
    let reps = runs.len() as f64;
    summary.insert("mean_mc_dist".into(), runs.iter().map(|r| r.mc_dist).sum::<f64>() / reps);
    summary.insert("mean_td_dist".into(), runs.iter().map(|r| r.td_dist).sum::<f64>() / reps);
    summary.insert("bound_holds_fraction".into(), runs.iter().filter(|r| r.bound.holds).count() as f64 / reps);
    finish(cfg, start, vec![results, traces], summary, checks)
}
