//! Normalized Monte Carlo and normalized TD(0) policy evaluation, their
//! analytic fixed points, and the TD(0) error bound check.
//!
//! Both estimators reuse the Total Projections step: Monte Carlo treats each
//! first-visit return as a hyperplane `φ_sᵀw = Ṽ_s`, TD(0) treats each
//! transition as `(φ_s − γφ_{s'})ᵀw = R_{ss'}` and normalizes it to
//! `L_{ss'}ᵀw = ρ_{ss'}` with `L` a unit vector.

use std::collections::HashSet;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;
use crate::linear_model::{
    least_squares_solution, normalized_error, scale_invariant_solution, OverdeterminedSystem, WeightVector,
};
use crate::mdp_sim::{
    expected_one_step_reward, sample_trajectory, stationary_distribution, true_value, FeatureMap,
    MarkovRewardProcess, Start, Trajectory,
};
use crate::rng;
use crate::tensor_ops::{
    build_probability_tensor, mode_p_multiply, mode_p_vector, slice_contract_product, slice_transform_product,
    transpose, Tensor3,
};
use crate::total_projections::{drive, step, IterateState, RowBatch, SolveTrace, SolverConfig, StepInfo};

/// Feature differences shorter than this are treated as zero.
pub const DEGENERATE_TOL: f64 = 1e-12;

/// Solver settings plus the episode length used by the estimators. Each
/// solver iteration consumes one episode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EstimatorConfig {
    #[serde(flatten)]
    pub solver: SolverConfig,
    pub episode_len: usize,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        Self { solver: SolverConfig::default(), episode_len: 200 }
    }
}

impl EstimatorConfig {
    pub fn validate(&self) -> Result<()> {
        self.solver.validate()?;
        if self.episode_len < 2 {
            return Err(Error::InvalidInput(format!("episode length {} below 2", self.episode_len)));
        }
        Ok(())
    }
}

/// First-visit discounted returns `(s, Ṽ_s)`, in order of first occurrence.
///
/// Returns are accumulated backwards, `G ← R_{i+1} + γG`; a state visited
/// more than once keeps the return from its earliest visit.
pub fn first_visit_mc_targets(trajectory: &Trajectory, gamma: f64) -> Vec<(usize, f64)> {
    let mut returns = vec![0.0; trajectory.len()];
    let mut g = 0.0;
    for i in (0..trajectory.len()).rev() {
        g = trajectory.rewards[i] + gamma * g;
        returns[i] = g;
    }
    let mut seen = HashSet::new();
    trajectory
        .states
        .iter()
        .zip(returns)
        .filter(|(s, _)| seen.insert(**s))
        .map(|(s, g)| (*s, g))
        .collect()
}

fn mc_batch(targets: &[(usize, f64)], features: &FeatureMap) -> Result<RowBatch> {
    if let Some(&(s, _)) = targets.iter().find(|(s, _)| *s >= features.n_states()) {
        return Err(Error::InvalidInput(format!("state {s} has no feature row")));
    }
    RowBatch::new(
        targets.iter().map(|(s, _)| features.feature(*s)).collect(),
        targets.iter().map(|(_, v)| *v).collect(),
    )
}

/// One heavy-ball Total Projections step on a batch of first-visit targets,
/// each weighted `1/τ`.
pub fn normalized_mc_step(
    state: &IterateState,
    targets: &[(usize, f64)],
    features: &FeatureMap,
    cfg: &SolverConfig,
) -> Result<(IterateState, StepInfo)> {
    if targets.is_empty() {
        return Err(Error::InvalidInput("no Monte Carlo targets".into()));
    }
    Ok(step(state, &mc_batch(targets, features)?, cfg))
}

#[derive(Debug, Clone, PartialEq)]
pub struct McEstimate {
    pub w: WeightVector,
    pub trace: SolveTrace,
    pub episodes: usize,
}

/// The system `Φw ≈ V` weighted by the stationary distribution, whose
/// scale-invariant solution is the Monte Carlo fixed point.
pub fn mc_induced_system(mrp: &MarkovRewardProcess, features: &FeatureMap) -> Result<OverdeterminedSystem> {
    check_sizes(mrp, features)?;
    let v = true_value(mrp)?;
    let pi = stationary_distribution(mrp.p())?;
    OverdeterminedSystem::new(features.phi().clone(), v, Some(pi.pi().clone()))
}

/// `w^M = (ΦᵀNDNΦ)⁻¹ΦᵀNDN V` with `D = diag(π)` and `N = diag(1/‖φ_s‖)`.
pub fn mc_fixed_point(mrp: &MarkovRewardProcess, features: &FeatureMap) -> Result<WeightVector> {
    scale_invariant_solution(&mc_induced_system(mrp, features)?)
}

fn check_sizes(mrp: &MarkovRewardProcess, features: &FeatureMap) -> Result<()> {
    if mrp.n_states() != features.n_states() {
        return Err(Error::DimensionMismatch(format!(
            "{} states but {} feature rows",
            mrp.n_states(),
            features.n_states()
        )));
    }
    Ok(())
}

/// Runs `cfg.solver.max_iters` episodes of length `cfg.episode_len`, each
/// started from the stationary distribution, with one step per episode.
/// The trace error is measured against [`mc_fixed_point`].
pub fn normalized_mc_solve(
    mrp: &MarkovRewardProcess,
    features: &FeatureMap,
    cfg: &EstimatorConfig,
) -> Result<McEstimate> {
    cfg.validate()?;
    let sys = mc_induced_system(mrp, features)?;
    let w_star = scale_invariant_solution(&sys)?;
    let pi = sys.weights().clone();
    let mut rng = rng::seeded(cfg.solver.seed);
    let mut failure = None;
    let mut episodes = 0;
    let (w, trace) = drive(
        &cfg.solver,
        DVector::zeros(features.dim()),
        Some(&w_star),
        |_| {
            let batch = sample_trajectory(mrp, Start::Distribution(&pi), cfg.episode_len, &mut rng)
                .and_then(|t| mc_batch(&first_visit_mc_targets(&t, mrp.gamma()), features));
            episodes += 1;
            batch.map_err(|e| failure = Some(e)).ok()
        },
        |w| normalized_error(&sys, w),
    );
    match failure {
        Some(e) => Err(e),
        None => Ok(McEstimate { w, trace, episodes }),
    }
}

/// A normalized transition: `L = Δφ/‖Δφ‖`, `ρ = R/‖Δφ‖` with
/// `Δφ = φ_s − γφ_{s'}`.
#[derive(Debug, Clone, PartialEq)]
pub struct TdPairSample {
    pub from: usize,
    pub to: usize,
    pub l: DVector<f64>,
    pub rho: f64,
}

/// Builds the normalized sample of transition `s → s'` with reward `reward`.
pub fn td_pair(features: &FeatureMap, s: usize, s2: usize, reward: f64, gamma: f64) -> Result<TdPairSample> {
    let delta = features.feature(s) - features.feature(s2) * gamma;
    let norm = delta.norm();
    if !(norm >= DEGENERATE_TOL) {
        return Err(Error::DegeneratePair { from: s, to: s2 });
    }
    Ok(TdPairSample { from: s, to: s2, l: delta / norm, rho: reward / norm })
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TdPairs {
    pub samples: Vec<TdPairSample>,
    /// Distinct pairs dropped because `‖Δφ‖` vanished.
    pub degenerate: usize,
}

/// The distinct pairs `(S_i, S_{i+1})` of consecutive listed states, each at
/// its first occurrence. The move into the terminal state is not used, so a
/// trajectory of length 2 yields exactly one pair.
pub fn td_pair_stream(trajectory: &Trajectory, features: &FeatureMap, gamma: f64) -> TdPairs {
    let mut seen = HashSet::new();
    let mut out = TdPairs::default();
    for (s, s2, r) in trajectory.transitions().take(trajectory.len().saturating_sub(1)) {
        if !seen.insert((s, s2)) {
            continue;
        }
        match td_pair(features, s, s2, r, gamma) {
            Ok(sample) => out.samples.push(sample),
            Err(_) => out.degenerate += 1,
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct TdEstimate {
    pub w: WeightVector,
    pub trace: SolveTrace,
    pub episodes: usize,
    pub degenerate_pairs: usize,
}

/// Episodes drawn in a row without a usable pair before giving up.
const MAX_EMPTY_EPISODES: usize = 1000;

/// Stochastic normalized TD(0): every episode contributes its distinct
/// transitions as one batch, `U = (1/τ) Σ (L_iᵀw − ρ_i) L_i`. The trace error
/// is measured against [`td0_fixed_point_bruteforce`] when that exists.
pub fn normalized_td0_solve(
    mrp: &MarkovRewardProcess,
    features: &FeatureMap,
    cfg: &EstimatorConfig,
) -> Result<TdEstimate> {
    cfg.validate()?;
    check_sizes(mrp, features)?;
    let pi = stationary_distribution(mrp.p())?;
    let w_star = td0_fixed_point_bruteforce(mrp, features).ok();
    let objective = td0_objective(mrp, features, pi.pi())?;
    let gamma = mrp.gamma();
    let mut rng = rng::seeded(cfg.solver.seed);
    let mut failure = None;
    let mut episodes = 0;
    let mut degenerate = 0;
    let (w, trace) = drive(
        &cfg.solver,
        DVector::zeros(features.dim()),
        w_star.as_ref(),
        |_| {
            for _ in 0..MAX_EMPTY_EPISODES {
                let traj = match sample_trajectory(mrp, Start::Distribution(pi.pi()), cfg.episode_len, &mut rng) {
                    Ok(t) => t,
                    Err(e) => {
                        failure = Some(e);
                        return None;
                    }
                };
                episodes += 1;
                let pairs = td_pair_stream(&traj, features, gamma);
                degenerate += pairs.degenerate;
                if pairs.samples.is_empty() {
                    continue;
                }
                let (rows, targets) = pairs.samples.into_iter().map(|p| (p.l, p.rho)).unzip();
                return RowBatch::new(rows, targets).map_err(|e| failure = Some(e)).ok();
            }
            failure = Some(Error::InvalidInput(format!(
                "{MAX_EMPTY_EPISODES} episodes in a row without a non-degenerate transition"
            )));
            None
        },
        |w| objective(w),
    );
    match failure {
        Some(e) => Err(e),
        None => Ok(TdEstimate { w, trace, episodes, degenerate_pairs: degenerate }),
    }
}

/// Expected normalized squared TD error `½ Σ π_s P_{ss'} (L_{ss'}ᵀw − ρ_{ss'})²`
/// over the non-degenerate reachable pairs.
fn td0_objective(
    mrp: &MarkovRewardProcess,
    features: &FeatureMap,
    pi: &DVector<f64>,
) -> Result<impl Fn(&WeightVector) -> f64> {
    let mut terms = Vec::new();
    for s in 0..mrp.n_states() {
        for s2 in 0..mrp.n_states() {
            let p = mrp.p()[(s, s2)];
            if p > 0.0 {
                if let Ok(t) = td_pair(features, s, s2, mrp.r()[(s, s2)], mrp.gamma()) {
                    terms.push((pi[s] * p, t.l, t.rho));
                }
            }
        }
    }
    Ok(move |w: &WeightVector| 0.5 * terms.iter().map(|(c, l, rho)| c * (l.dot(w) - rho).powi(2)).sum::<f64>())
}

/// `Σ π_s P_{ss'} L Lᵀ` and `Σ π_s P_{ss'} ρ L` by explicit loops.
pub fn td0_normal_equations(
    mrp: &MarkovRewardProcess,
    features: &FeatureMap,
    pi: &DVector<f64>,
) -> Result<(DMatrix<f64>, DVector<f64>)> {
    check_sizes(mrp, features)?;
    let n = features.dim();
    let mut a = DMatrix::zeros(n, n);
    let mut b = DVector::zeros(n);
    for s in 0..mrp.n_states() {
        for s2 in 0..mrp.n_states() {
            let p = mrp.p()[(s, s2)];
            if p == 0.0 {
                continue;
            }
            let t = td_pair(features, s, s2, mrp.r()[(s, s2)], mrp.gamma())?;
            let c = pi[s] * p;
            a.ger(c, &t.l, &t.l, 1.0);
            b.axpy(c * t.rho, &t.l, 1.0);
        }
    }
    Ok((a, b))
}

/// `w^N` from the double-sum normal equations.
pub fn td0_fixed_point_bruteforce(mrp: &MarkovRewardProcess, features: &FeatureMap) -> Result<WeightVector> {
    let pi = stationary_distribution(mrp.p())?;
    let (a, b) = td0_normal_equations(mrp, features, pi.pi())?;
    linalg::solve_square(&a, &b)
}

/// The tensors `𝓛` (fibers `L_{ss'}`) and `𝓡` (`ρ_{ss'}`); unreachable
/// pairs are zero.
pub fn td0_tensors(mrp: &MarkovRewardProcess, features: &FeatureMap) -> Result<(Tensor3, DMatrix<f64>)> {
    check_sizes(mrp, features)?;
    let m = mrp.n_states();
    let n = features.dim();
    let mut l = Tensor3::zeros([m, m, n]);
    let mut rho = DMatrix::zeros(m, m);
    for s in 0..m {
        for s2 in 0..m {
            if mrp.p()[(s, s2)] == 0.0 {
                continue;
            }
            let t = td_pair(features, s, s2, mrp.r()[(s, s2)], mrp.gamma())?;
            for k in 0..n {
                l[(s, s2, k)] = t.l[k];
            }
            rho[(s, s2)] = t.rho;
        }
    }
    Ok((l, rho))
}

/// The two sides of the tensor form of the TD(0) fixed point:
/// `(𝓛ᵀ ẍ 𝒫 ẍ 𝓛) ×₁ D` summed over the first mode, and `(𝓛ᵀ ẍ 𝒫 ⋊̈ 𝓡)ᵀ π`.
pub fn td0_tensor_system(mrp: &MarkovRewardProcess, features: &FeatureMap) -> Result<(DMatrix<f64>, DVector<f64>)> {
    let (l, rho) = td0_tensors(mrp, features)?;
    let pi = stationary_distribution(mrp.p())?;
    let p = build_probability_tensor(mrp.p())?;
    let lp = slice_transform_product(&transpose(&l), &p)?;
    let lpl = slice_transform_product(&lp, &l)?;
    let weighted = mode_p_multiply(&lpl, &pi.d(), 1)?;
    let ones = DVector::from_element(mrp.n_states(), 1.0);
    let lhs = mode_p_vector(&weighted, &ones, 1)?;
    let rhs = slice_contract_product(&lp, &rho)?.transpose() * pi.pi();
    Ok((lhs, rhs))
}

/// `w^N` through the tensor products.
pub fn td0_fixed_point_tensor(mrp: &MarkovRewardProcess, features: &FeatureMap) -> Result<WeightVector> {
    let (a, b) = td0_tensor_system(mrp, features)?;
    linalg::solve_square(&a, &b)
}

/// `‖x‖_D = √(Σ π_s x_s²)`.
pub fn d_norm(x: &DVector<f64>, pi: &DVector<f64>) -> f64 {
    x.iter().zip(pi.iter()).map(|(xi, p)| p * xi * xi).sum::<f64>().sqrt()
}

/// `𝒩_{ss'} = 1/‖φ_s − γφ_{s'}‖`. Degenerate pairs that the chain never
/// takes are left at zero; reachable ones are an error.
pub fn inverse_distance_matrix(mrp: &MarkovRewardProcess, features: &FeatureMap) -> Result<DMatrix<f64>> {
    check_sizes(mrp, features)?;
    let m = mrp.n_states();
    let mut out = DMatrix::zeros(m, m);
    for s in 0..m {
        for s2 in 0..m {
            let norm = (features.feature(s) - features.feature(s2) * mrp.gamma()).norm();
            if norm >= DEGENERATE_TOL {
                out[(s, s2)] = 1.0 / norm;
            } else if mrp.p()[(s, s2)] > 0.0 {
                return Err(Error::DegeneratePair { from: s, to: s2 });
            }
        }
    }
    Ok(out)
}

/// Both sides of `‖𝒩(V^N − V)‖_D ≤ ‖𝒩(V^L − V)‖_D/(1 − γ)` plus the
/// intermediate quantities of its derivation.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BoundReport {
    pub lhs: f64,
    pub rhs: f64,
    pub holds: bool,
    /// `‖𝒩(V^N − γPV^N − R̄)‖_D`.
    pub td_residual_n: f64,
    /// `‖𝒩(V^L − γPV^L − R̄)‖_D`.
    pub td_residual_l: f64,
    /// Sides with `𝒩` acting as the row-averaged scaling `Σ_{s'} P_{ss'}𝒩_{ss'}`.
    pub lhs_rowscaled: f64,
    pub rhs_rowscaled: f64,
    /// Largest violation of the value-matrix identities checked on the way.
    pub identity_residual: f64,
}

/// Evaluates the TD(0) error bound with `𝒩` as an `m×m` matrix acting on
/// value vectors, `V^N = Φw^N` and `V^L` the `π`-weighted least-squares fit.
pub fn check_error_bound(mrp: &MarkovRewardProcess, features: &FeatureMap) -> Result<BoundReport> {
    check_sizes(mrp, features)?;
    let m = mrp.n_states();
    let gamma = mrp.gamma();
    let p = mrp.p();
    let pi = stationary_distribution(p)?;
    let pi = pi.pi();
    let v = true_value(mrp)?;
    let rbar = expected_one_step_reward(mrp);
    let nmat = inverse_distance_matrix(mrp, features)?;

    let w_n = td0_fixed_point_tensor(mrp, features)?;
    let sys = OverdeterminedSystem::new(features.phi().clone(), v.clone(), Some(pi.clone()))?;
    let w_l = least_squares_solution(&sys)?;
    let v_n = features.phi() * &w_n;
    let v_l = features.phi() * &w_l;

    // value matrices 𝒱 = V·1ᵀ and the reward identity
    let ones = DVector::from_element(m, 1.0);
    let vmat = &v * ones.transpose();
    let rbar_loop = DVector::from_fn(m, |s, _| (0..m).map(|s2| mrp.r()[(s, s2)] * p[(s, s2)]).sum());
    let identity_residual = [
        (&rbar - rbar_loop).amax(),
        (p.component_mul(&vmat) * &ones - &v).amax(),
        (p.component_mul(&vmat.transpose()) * &ones - p * &v).amax(),
        (&v - (&rbar + p * &v * gamma)).amax(),
    ]
    .into_iter()
    .fold(0.0, f64::max);
    let scale = 1.0 + v.amax();
    if identity_residual > 1e-9 * scale {
        return Err(Error::InvalidInput(format!(
            "value-matrix identities violated by {identity_residual:e}"
        )));
    }

    let lhs = d_norm(&(&nmat * (&v_n - &v)), pi);
    let rhs = d_norm(&(&nmat * (&v_l - &v)), pi) / (1.0 - gamma);
    let td_res = |x: &DVector<f64>| d_norm(&(&nmat * (x - p * x * gamma - &rbar)), pi);
    let row_scale = p.component_mul(&nmat) * &ones;
    let lhs_rowscaled = d_norm(&row_scale.component_mul(&(&v_n - &v)), pi);
    let rhs_rowscaled = d_norm(&row_scale.component_mul(&(&v_l - &v)), pi) / (1.0 - gamma);
    Ok(BoundReport {
        lhs,
        rhs,
        holds: lhs <= rhs + 1e-12 * (1.0 + rhs),
        td_residual_n: td_res(&v_n),
        td_residual_l: td_res(&v_l),
        lhs_rowscaled,
        rhs_rowscaled,
        identity_residual,
    })
}
