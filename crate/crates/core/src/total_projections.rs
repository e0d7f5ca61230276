//! The Total Projections solver.
//!
//! Each iteration averages the projections of the current iterate onto a
//! batch of hyperplanes (`TP`), scales that direction with either a fixed
//! step or the curvature step `η_k‖TP‖/‖ΔTP‖`, and adds heavy-ball momentum:
//!
//! ```text
//! w_{k+1} = w_k − α_k TP_k(w_k) + β (w_k − w_{k−1})
//! ```
//!
//! In batch mode the batch is the whole system with its weights `d`, so `TP`
//! is exactly the gradient of [`normalized_error`]. In stochastic mode `τ`
//! rows are drawn i.i.d. with probabilities `d` and averaged uniformly.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linear_model::{normalized_error, OverdeterminedSystem, WeightVector};
use crate::rng::{self, SeededRng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Batch,
    Stochastic,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepRule {
    /// `α_k = η_k ‖TP‖/‖ΔTP‖` with `η_k = 1/k^p`.
    CurvatureStep,
    FixedAlpha(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverConfig {
    /// Exponent of the decay `η_k = 1/k^p`, in `(0.5, 1]`.
    pub p: f64,
    /// Heavy-ball multiplier, in `[0, 1)`.
    pub beta: f64,
    /// Gradient steps are skipped when `‖ΔTP‖` falls below this.
    pub epsilon_guard: f64,
    /// Rows per stochastic batch.
    pub tau: usize,
    pub max_iters: usize,
    pub mode: Mode,
    pub step_rule: StepRule,
    pub seed: u64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            p: 1.0,
            beta: 0.5,
            epsilon_guard: 1e-6,
            tau: 1,
            max_iters: 1000,
            mode: Mode::Stochastic,
            step_rule: StepRule::CurvatureStep,
            seed: 0,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.p > 0.5 && self.p <= 1.0) {
            return Err(Error::InvalidInput(format!("p = {} outside (0.5, 1]", self.p)));
        }
        if !(self.beta >= 0.0 && self.beta < 1.0) {
            return Err(Error::InvalidInput(format!("beta = {} outside [0, 1)", self.beta)));
        }
        if !(self.epsilon_guard > 0.0) {
            return Err(Error::InvalidInput("epsilon_guard must be positive".into()));
        }
        if self.tau == 0 {
            return Err(Error::InvalidInput("tau must be at least 1".into()));
        }
        if let StepRule::FixedAlpha(a) = self.step_rule {
            if !(a > 0.0 && a < 2.0) {
                return Err(Error::InvalidInput(format!("fixed alpha = {a} outside (0, 2)")));
            }
        }
        Ok(())
    }

    /// `η_k = 1/k^p`.
    pub fn eta(&self, k: usize) -> f64 {
        (k as f64).powf(-self.p)
    }
}

/// Current and previous iterate; `k` starts at 1.
#[derive(Debug, Clone, PartialEq)]
pub struct IterateState {
    pub w: WeightVector,
    pub w_prev: WeightVector,
    pub k: usize,
}

impl IterateState {
    /// Starts at `w0` with no momentum (`w_prev = w0`).
    pub fn new(w0: WeightVector) -> Self {
        Self { w_prev: w0.clone(), w: w0, k: 1 }
    }
}

/// A set of hyperplanes `(φ_i, ṽ_i)` with averaging weights `c_i`.
#[derive(Debug, Clone, PartialEq)]
pub struct RowBatch {
    rows: Vec<DVector<f64>>,
    targets: Vec<f64>,
    coeffs: Vec<f64>,
}

impl RowBatch {
    /// Uniformly averaged batch (`c_i = 1/τ`).
    pub fn new(rows: Vec<DVector<f64>>, targets: Vec<f64>) -> Result<Self> {
        let tau = rows.len();
        Self::with_coefficients(rows, targets, vec![1.0 / tau.max(1) as f64; tau])
    }

    pub fn with_coefficients(
        rows: Vec<DVector<f64>>,
        targets: Vec<f64>,
        coeffs: Vec<f64>,
    ) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::InvalidInput("empty batch".into()));
        }
        if targets.len() != rows.len() || coeffs.len() != rows.len() {
            return Err(Error::DimensionMismatch("batch rows/targets/weights differ".into()));
        }
        let n = rows[0].len();
        if rows.iter().any(|r| r.len() != n) {
            return Err(Error::DimensionMismatch("batch rows of different length".into()));
        }
        if rows.iter().any(|r| r.norm() == 0.0) {
            return Err(Error::InvalidInput("zero row in batch".into()));
        }
        Ok(Self { rows, targets, coeffs })
    }

    /// Every row of `sys`, weighted by `d`.
    pub fn full(sys: &OverdeterminedSystem) -> Self {
        Self {
            rows: (0..sys.nrows()).map(|i| sys.row(i)).collect(),
            targets: sys.targets().iter().copied().collect(),
            coeffs: sys.weights().iter().copied().collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.rows[0].len()
    }

    /// `Σ c_i φ_iφ_iᵀ/‖φ_i‖²`.
    pub fn projection_operator(&self) -> DMatrix<f64> {
        let n = self.dim();
        let mut a = DMatrix::zeros(n, n);
        for (phi, c) in self.rows.iter().zip(&self.coeffs) {
            a.ger(c / phi.norm_squared(), phi, phi, 1.0);
        }
        a
    }
}

/// `TP(w) = Σ c_i ((φ_iᵀw − ṽ_i)/‖φ_i‖²) φ_i`.
pub fn tp_update(batch: &RowBatch, w: &WeightVector) -> WeightVector {
    let mut out = DVector::zeros(w.len());
    for ((phi, v), c) in batch.rows.iter().zip(&batch.targets).zip(&batch.coeffs) {
        let r = (phi.dot(w) - v) / phi.norm_squared();
        out.axpy(c * r, phi, 1.0);
    }
    out
}

/// `ΔTP(w) = TP(w − TP(w)) − TP(w)`.
///
/// For this affine field it equals `−A·TP(w)` with `A` the batch
/// [`RowBatch::projection_operator`].
pub fn delta_tp(batch: &RowBatch, w: &WeightVector) -> WeightVector {
    let tp = tp_update(batch, w);
    tp_update(batch, &(w - &tp)) - tp
}

/// Osculating-circle radius `θ = ‖TP‖²/‖ΔTP‖`.
pub fn curvature_step(batch: &RowBatch, w: &WeightVector, epsilon_guard: f64) -> Result<f64> {
    let tp = tp_update(batch, w);
    let dtp = delta_tp(batch, w);
    let norm = dtp.norm();
    if !(norm >= epsilon_guard) {
        return Err(Error::StepUndefined { norm });
    }
    Ok(tp.norm_squared() / norm)
}

/// What happened during one [`step`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepInfo {
    pub theta: Option<f64>,
    /// Effective multiplier of `TP` (zero when skipped).
    pub alpha: f64,
    pub skipped: bool,
}

/// One heavy-ball Total Projections update.
///
/// If the curvature step is undefined the gradient term is dropped, the
/// momentum term is still applied and `skipped` is set.
pub fn step(state: &IterateState, batch: &RowBatch, cfg: &SolverConfig) -> (IterateState, StepInfo) {
    let tp = tp_update(batch, &state.w);
    let info = match cfg.step_rule {
        StepRule::FixedAlpha(alpha) => StepInfo { theta: None, alpha, skipped: false },
        StepRule::CurvatureStep => match curvature_step(batch, &state.w, cfg.epsilon_guard) {
            Ok(theta) => {
                let tp_norm = tp.norm();
                StepInfo {
                    theta: Some(theta),
                    alpha: cfg.eta(state.k) * theta / tp_norm,
                    skipped: false,
                }
            }
            Err(_) => StepInfo { theta: None, alpha: 0.0, skipped: true },
        },
    };
    let momentum = (&state.w - &state.w_prev) * cfg.beta;
    let mut next = &state.w + momentum;
    if !info.skipped {
        next.axpy(-info.alpha, &tp, 1.0);
    }
    let state = IterateState { w_prev: state.w.clone(), w: next, k: state.k + 1 };
    (state, info)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceRecord {
    /// Number of steps taken; the other fields describe `w_k`.
    pub k: usize,
    /// `‖w_k − w*‖` when a reference solution was supplied.
    pub err: Option<f64>,
    /// Objective at `w_k`.
    pub g: f64,
    pub theta: Option<f64>,
    pub alpha: f64,
    pub skipped: bool,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct SolveTrace {
    pub records: Vec<TraceRecord>,
}

impl SolveTrace {
    pub const CSV_HEADER: [&'static str; 6] = ["k", "err", "g", "theta", "alpha", "skipped"];

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn skipped(&self) -> usize {
        self.records.iter().filter(|r| r.skipped).count()
    }

    pub fn errors(&self) -> Vec<f64> {
        self.records.iter().filter_map(|r| r.err).collect()
    }

    pub fn objective(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.g).collect()
    }

    /// `k,err,g,theta,alpha,skipped`; missing values are empty fields.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(writer);
        wtr.write_record(Self::CSV_HEADER)?;
        let opt = |x: Option<f64>| x.map(|v| format!("{v:e}")).unwrap_or_default();
        for r in &self.records {
            wtr.write_record([
                r.k.to_string(),
                opt(r.err),
                format!("{:e}", r.g),
                opt(r.theta),
                format!("{:e}", r.alpha),
                u8::from(r.skipped).to_string(),
            ])?;
        }
        wtr.flush()?;
        Ok(())
    }
}

/// Produces the batch for each iteration.
pub trait RowSampler {
    fn sample(&mut self, sys: &OverdeterminedSystem) -> RowBatch;
}

/// Batch mode: every row, weighted by `d`.
#[derive(Debug, Default, Clone, Copy)]
pub struct FullSampler;

impl RowSampler for FullSampler {
    fn sample(&mut self, sys: &OverdeterminedSystem) -> RowBatch {
        RowBatch::full(sys)
    }
}

/// Draws `τ` rows i.i.d. with probability `d_i` by inverse CDF.
#[derive(Debug, Clone)]
pub struct ProportionalSampler {
    cdf: Vec<f64>,
    tau: usize,
    rng: SeededRng,
}

impl ProportionalSampler {
    pub fn new(weights: &DVector<f64>, tau: usize, rng: SeededRng) -> Self {
        let mut acc = 0.0;
        let mut cdf: Vec<f64> = weights
            .iter()
            .map(|d| {
                acc += d;
                acc
            })
            .collect();
        if let Some(last) = cdf.last_mut() {
            *last = f64::INFINITY;
        }
        Self { cdf, tau, rng }
    }

    pub fn draw_index(&mut self) -> usize {
        // weights sum to one; the last bucket is open-ended against rounding
        let u: f64 = self.rng.random::<f64>();
        self.cdf.partition_point(|&c| c <= u)
    }
}

impl RowSampler for ProportionalSampler {
    fn sample(&mut self, sys: &OverdeterminedSystem) -> RowBatch {
        let idx: Vec<usize> = (0..self.tau).map(|_| self.draw_index()).collect();
        let rows = idx.iter().map(|&i| sys.row(i)).collect();
        let targets = idx.iter().map(|&i| sys.targets()[i]).collect();
        RowBatch::new(rows, targets).expect("system rows are nonzero")
    }
}

/// Runs `cfg.max_iters` steps, asking `next_batch` for each iteration's batch
/// and recording `objective` at every iterate. Stops early if `next_batch`
/// returns `None`.
pub fn drive<B, G>(
    cfg: &SolverConfig,
    w0: WeightVector,
    w_star: Option<&WeightVector>,
    mut next_batch: B,
    objective: G,
) -> (WeightVector, SolveTrace)
where
    B: FnMut(usize) -> Option<RowBatch>,
    G: Fn(&WeightVector) -> f64,
{
    let mut state = IterateState::new(w0);
    let mut trace = SolveTrace { records: Vec::with_capacity(cfg.max_iters) };
    for _ in 0..cfg.max_iters {
        let Some(batch) = next_batch(state.k) else { break };
        let (next, info) = step(&state, &batch, cfg);
        state = next;
        trace.records.push(TraceRecord {
            k: state.k - 1,
            err: w_star.map(|ws| (&state.w - ws).norm()),
            g: objective(&state.w),
            theta: info.theta,
            alpha: info.alpha,
            skipped: info.skipped,
        });
    }
    (state.w, trace)
}

/// Solves `sys` under the scale-invariant criterion with the given sampler.
pub fn solve<S: RowSampler>(
    sys: &OverdeterminedSystem,
    cfg: &SolverConfig,
    sampler: &mut S,
    w0: Option<WeightVector>,
    w_star: Option<&WeightVector>,
) -> Result<(WeightVector, SolveTrace)> {
    cfg.validate()?;
    let w0 = w0.unwrap_or_else(|| DVector::zeros(sys.ncols()));
    if w0.len() != sys.ncols() {
        return Err(Error::DimensionMismatch(format!(
            "start vector has length {}, system has {} columns",
            w0.len(),
            sys.ncols()
        )));
    }
    if let Some(ws) = w_star {
        if ws.len() != sys.ncols() {
            return Err(Error::DimensionMismatch("reference solution length".into()));
        }
    }
    Ok(drive(cfg, w0, w_star, |_| Some(sampler.sample(sys)), |w| normalized_error(sys, w)))
}

/// [`solve`] with the sampler implied by `cfg.mode` and `cfg.seed`.
pub fn solve_seeded(
    sys: &OverdeterminedSystem,
    cfg: &SolverConfig,
    w0: Option<WeightVector>,
    w_star: Option<&WeightVector>,
) -> Result<(WeightVector, SolveTrace)> {
    match cfg.mode {
        Mode::Batch => solve(sys, cfg, &mut FullSampler, w0, w_star),
        Mode::Stochastic => {
            let mut sampler = ProportionalSampler::new(sys.weights(), cfg.tau, rng::seeded(cfg.seed));
            solve(sys, cfg, &mut sampler, w0, w_star)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linear_model::scale_invariant_solution;

    fn v(x: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(x)
    }

    fn toy_batch() -> RowBatch {
        RowBatch::new(vec![v(&[2.0]), v(&[1.0])], vec![1.0, 2.0]).unwrap()
    }

    fn toy() -> OverdeterminedSystem {
        OverdeterminedSystem::from_rows(&[vec![2.0], vec![1.0]], &[1.0, 2.0]).unwrap()
    }

    #[test]
    fn tp_examples() {
        let b = toy_batch();
        assert!((tp_update(&b, &v(&[0.0]))[0] + 1.25).abs() < 1e-15);
        assert!(tp_update(&b, &v(&[1.25]))[0].abs() < 1e-15);
        let consistent = RowBatch::new(vec![v(&[1.0, 1.0]), v(&[1.0, -1.0])], vec![2.0, 0.0]).unwrap();
        assert_eq!(tp_update(&consistent, &v(&[1.0, 1.0])).norm(), 0.0);
    }

    #[test]
    fn delta_tp_examples() {
        let b = toy_batch();
        // TP(w − TP(w)) − TP(w) = −A·TP(w) with A = 1 in one dimension
        assert!((delta_tp(&b, &v(&[0.0]))[0] - 1.25).abs() < 1e-15);
        assert_eq!(delta_tp(&b, &v(&[1.25]))[0], 0.0);

        let single = RowBatch::new(vec![v(&[3.0, 4.0])], vec![2.0]).unwrap();
        let w = v(&[1.0, -2.0]);
        let tp = tp_update(&single, &w);
        assert!((delta_tp(&single, &w) + &tp).norm() < 1e-15);
    }

    #[test]
    fn delta_tp_matches_projection_operator() {
        let b = RowBatch::new(
            vec![v(&[1.0, 2.0, 0.5]), v(&[-1.0, 0.3, 2.0]), v(&[0.2, 0.2, -1.0])],
            vec![0.5, -1.0, 2.0],
        )
        .unwrap();
        let w = v(&[0.3, -0.7, 1.1]);
        let lhs = delta_tp(&b, &w);
        let rhs = -(b.projection_operator() * tp_update(&b, &w));
        assert!((lhs - rhs).norm() < 1e-14);
    }

    #[test]
    fn curvature_step_examples() {
        let b = toy_batch();
        assert!((curvature_step(&b, &v(&[0.0]), 1e-6).unwrap() - 1.25).abs() < 1e-15);
        assert!(matches!(
            curvature_step(&b, &v(&[1.25]), 1e-6),
            Err(Error::StepUndefined { .. })
        ));

        // one hyperplane: θ = ‖TP‖ and the η = 1 step lands on the plane
        let single = RowBatch::new(vec![v(&[3.0, 4.0])], vec![2.0]).unwrap();
        let w = v(&[1.0, -2.0]);
        let theta = curvature_step(&single, &w, 1e-6).unwrap();
        assert!((theta - tp_update(&single, &w).norm()).abs() < 1e-14);
        let cfg = SolverConfig { beta: 0.0, ..Default::default() };
        let (next, info) = step(&IterateState::new(w), &single, &cfg);
        assert!(!info.skipped);
        assert!((v(&[3.0, 4.0]).dot(&next.w) - 2.0).abs() < 1e-14);
    }

    #[test]
    fn fixed_alpha_one_reaches_toy_minimizer() {
        let cfg = SolverConfig { beta: 0.0, step_rule: StepRule::FixedAlpha(1.0), ..Default::default() };
        let full = RowBatch::full(&toy());
        let (next, _) = step(&IterateState::new(v(&[0.0])), &full, &cfg);
        assert!((next.w[0] - 1.25).abs() < 1e-15);
        assert_eq!(next.k, 2);
        assert_eq!(next.w_prev[0], 0.0);
    }

    #[test]
    fn fixed_point_is_stationary() {
        let cfg = SolverConfig { beta: 0.0, ..Default::default() };
        let full = RowBatch::full(&toy());
        let start = IterateState::new(v(&[1.25]));
        let (next, info) = step(&start, &full, &cfg);
        assert!(info.skipped);
        assert_eq!(next.w, start.w);
    }

    #[test]
    fn momentum_matches_hand_unrolled_steps() {
        let cfg = SolverConfig {
            beta: 0.5,
            step_rule: StepRule::FixedAlpha(0.5),
            ..Default::default()
        };
        let b = toy_batch();
        let s0 = IterateState::new(v(&[0.0]));
        let (s1, _) = step(&s0, &b, &cfg);
        let (s2, _) = step(&s1, &b, &cfg);
        // TP(w) = w − 1.25 on this batch
        let w1 = 0.0 - 0.5 * (0.0 - 1.25);
        let w2 = w1 - 0.5 * (w1 - 1.25) + 0.5 * (w1 - 0.0);
        assert!((s1.w[0] - w1).abs() < 1e-15);
        assert!((s2.w[0] - w2).abs() < 1e-15);
    }

    #[test]
    fn skipped_step_keeps_momentum() {
        let cfg = SolverConfig { beta: 0.5, ..Default::default() };
        let full = RowBatch::full(&toy());
        let state = IterateState { w: v(&[1.25]), w_prev: v(&[1.0]), k: 3 };
        let (next, info) = step(&state, &full, &cfg);
        assert!(info.skipped);
        assert!((next.w[0] - 1.375).abs() < 1e-15);
    }

    #[test]
    fn config_validation() {
        assert!(SolverConfig::default().validate().is_ok());
        for bad in [
            SolverConfig { p: 0.5, ..Default::default() },
            SolverConfig { p: 1.1, ..Default::default() },
            SolverConfig { beta: 1.0, ..Default::default() },
            SolverConfig { epsilon_guard: 0.0, ..Default::default() },
            SolverConfig { tau: 0, ..Default::default() },
            SolverConfig { step_rule: StepRule::FixedAlpha(2.0), ..Default::default() },
        ] {
            assert!(bad.validate().is_err(), "{bad:?}");
        }
    }

    #[test]
    fn stochastic_toy_converges_to_scale_invariant_solution() {
        let cfg = SolverConfig { max_iters: 10_000, seed: 7, ..Default::default() };
        let (w, trace) = solve_seeded(&toy(), &cfg, None, Some(&v(&[1.25]))).unwrap();
        assert_eq!(trace.len(), 10_000);
        assert!((w[0] - 1.25).abs() < 0.05, "w = {}", w[0]);
    }

    #[test]
    fn batch_fixed_alpha_on_square_system() {
        let sys = OverdeterminedSystem::from_rows(&[vec![2.0, 1.0], vec![1.0, 3.0]], &[1.0, -2.0])
            .unwrap();
        let exact = scale_invariant_solution(&sys).unwrap();
        let cfg = SolverConfig {
            beta: 0.0,
            mode: Mode::Batch,
            step_rule: StepRule::FixedAlpha(1.0),
            max_iters: 200,
            ..Default::default()
        };
        let (w, trace) = solve_seeded(&sys, &cfg, None, None).unwrap();
        assert!((w - exact).norm() < 1e-10);
        let g = trace.objective();
        let positive: Vec<f64> = g.iter().copied().take_while(|&x| x > 1e-28).collect();
        assert!(positive.len() > 10);
        assert!(positive.windows(2).all(|p| p[1] < p[0]));
    }

    #[test]
    fn proportional_sampler_frequencies() {
        let d = v(&[0.1, 0.6, 0.3]);
        let mut s = ProportionalSampler::new(&d, 1, rng::seeded(3));
        let mut counts = [0usize; 3];
        for _ in 0..100_000 {
            counts[s.draw_index()] += 1;
        }
        for (c, p) in counts.iter().zip(d.iter()) {
            assert!((*c as f64 / 1e5 - p).abs() < 0.01);
        }
    }

    #[test]
    fn trace_csv_layout() {
        let cfg = SolverConfig { max_iters: 3, mode: Mode::Batch, ..Default::default() };
        let (_, trace) = solve_seeded(&toy(), &cfg, None, Some(&v(&[1.25]))).unwrap();
        let mut buf = Vec::new();
        trace.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some("k,err,g,theta,alpha,skipped"));
        assert_eq!(lines.count(), 3);
    }
}
