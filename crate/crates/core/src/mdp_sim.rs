//! Markov reward processes under a fixed policy: the induced chain, its
//! stationary distribution, exact values and trajectory sampling.

use std::fs::File;
use std::io::{BufReader, Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;

/// Tolerance on row sums of a transition matrix.
pub const STOCHASTIC_TOL: f64 = 1e-9;
pub const STATIONARY_RESIDUAL: f64 = 1e-12;
pub const STATIONARY_MAX_SWEEPS: usize = 1_000_000;

/// Checks that `p` is square with nonnegative rows summing to one.
pub fn check_stochastic(p: &DMatrix<f64>) -> Result<()> {
    if p.nrows() != p.ncols() || p.nrows() == 0 {
        return Err(Error::DimensionMismatch(format!(
            "transition matrix is {}x{}",
            p.nrows(),
            p.ncols()
        )));
    }
    for (i, row) in p.row_iter().enumerate() {
        let ok = row.iter().all(|x| x.is_finite() && *x >= 0.0) && (row.sum() - 1.0).abs() <= STOCHASTIC_TOL;
        if !ok {
            return Err(Error::NotStochastic { row: i });
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct MarkovRewardProcess {
    p: DMatrix<f64>,
    r: DMatrix<f64>,
    gamma: f64,
}

impl MarkovRewardProcess {
    pub fn new(p: DMatrix<f64>, r: DMatrix<f64>, gamma: f64) -> Result<Self> {
        check_stochastic(&p)?;
        if r.shape() != p.shape() {
            return Err(Error::DimensionMismatch(format!(
                "reward matrix is {}x{}, transitions are {}x{}",
                r.nrows(),
                r.ncols(),
                p.nrows(),
                p.ncols()
            )));
        }
        if r.iter().any(|x| !x.is_finite()) {
            return Err(Error::InvalidInput("non-finite reward".into()));
        }
        if !(0.0..1.0).contains(&gamma) {
            return Err(Error::InvalidInput(format!("gamma = {gamma} outside [0, 1)")));
        }
        Ok(Self { p, r, gamma })
    }

    pub fn p(&self) -> &DMatrix<f64> {
        &self.p
    }

    pub fn r(&self) -> &DMatrix<f64> {
        &self.r
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn n_states(&self) -> usize {
        self.p.nrows()
    }

    /// Largest absolute transition reward.
    pub fn r_max(&self) -> f64 {
        self.r.iter().fold(0.0_f64, |a, x| a.max(x.abs()))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StationaryDistribution {
    pi: DVector<f64>,
}

impl StationaryDistribution {
    pub fn pi(&self) -> &DVector<f64> {
        &self.pi
    }

    /// `D = diag(π)`.
    pub fn d(&self) -> DMatrix<f64> {
        DMatrix::from_diagonal(&self.pi)
    }
}

/// Power iteration `π ← πP` from the uniform vector until `‖πP − π‖₁ ≤ 1e−12`.
pub fn stationary_distribution(p: &DMatrix<f64>) -> Result<StationaryDistribution> {
    check_stochastic(p)?;
    let m = p.nrows();
    let pt = p.transpose();
    let mut pi = DVector::from_element(m, 1.0 / m as f64);
    let mut residual = f64::INFINITY;
    for _ in 0..STATIONARY_MAX_SWEEPS {
        let mut next = &pt * &pi;
        next /= next.sum();
        residual = (&next - &pi).lp_norm(1);
        pi = next;
        if residual <= STATIONARY_RESIDUAL {
            if pi.iter().any(|x| *x <= 0.0) {
                return Err(Error::InvalidInput("stationary distribution has zero entries".into()));
            }
            return Ok(StationaryDistribution { pi });
        }
    }
    Err(Error::NoConvergence { iterations: STATIONARY_MAX_SWEEPS, residual })
}

/// `R̄_s = Σ_{s'} P_{ss'} R_{ss'}`.
pub fn expected_one_step_reward(mrp: &MarkovRewardProcess) -> DVector<f64> {
    mrp.p.component_mul(&mrp.r).column_sum()
}

/// Solves `(I − γP)V = R̄`.
pub fn true_value(mrp: &MarkovRewardProcess) -> Result<DVector<f64>> {
    let m = mrp.n_states();
    let a = DMatrix::identity(m, m) - &mrp.p * mrp.gamma;
    linalg::solve_square(&a, &expected_one_step_reward(mrp))
}

/// Feature matrix with row `s` equal to `φ_sᵀ`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    phi: DMatrix<f64>,
}

impl FeatureMap {
    pub fn new(phi: DMatrix<f64>) -> Result<Self> {
        if phi.ncols() == 0 || phi.nrows() == 0 {
            return Err(Error::DimensionMismatch("empty feature matrix".into()));
        }
        if phi.iter().any(|x| !x.is_finite()) {
            return Err(Error::InvalidInput("non-finite feature".into()));
        }
        if let Some(s) = (0..phi.nrows()).find(|&s| phi.row(s).norm() == 0.0) {
            return Err(Error::InvalidInput(format!("state {s} has a zero feature vector")));
        }
        Ok(Self { phi })
    }

    pub fn phi(&self) -> &DMatrix<f64> {
        &self.phi
    }

    pub fn n_states(&self) -> usize {
        self.phi.nrows()
    }

    pub fn dim(&self) -> usize {
        self.phi.ncols()
    }

    /// `φ_s` as a column vector.
    pub fn feature(&self, s: usize) -> DVector<f64> {
        self.phi.row(s).transpose()
    }

    /// Uniform entries in `[−1, 1]`, redrawn until the matrix has full
    /// column rank.
    pub fn random_uniform<R: Rng + ?Sized>(m: usize, n: usize, rng: &mut R) -> Result<Self> {
        if m < n || n == 0 {
            return Err(Error::InvalidInput(format!("{m} states cannot carry {n} independent features")));
        }
        loop {
            let phi = DMatrix::from_fn(m, n, |_, _| rng.random_range(-1.0..=1.0));
            if linalg::condition_number(&phi) < 1e6 {
                return Self::new(phi);
            }
        }
    }
}

/// `S₀,R₁,S₁,…,S_{T−1},R_T`. The state reached by the last reward is kept in
/// `terminal` so every reward has both endpoints.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub states: Vec<usize>,
    pub rewards: Vec<f64>,
    pub terminal: usize,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    /// Transition `i` as `(S_i, S_{i+1}, R_{i+1})`.
    pub fn transition(&self, i: usize) -> (usize, usize, f64) {
        let next = self.states.get(i + 1).copied().unwrap_or(self.terminal);
        (self.states[i], next, self.rewards[i])
    }

    pub fn transitions(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        (0..self.len()).map(|i| self.transition(i))
    }
}

#[derive(Debug, Clone, Copy)]
pub enum Start<'a> {
    State(usize),
    Distribution(&'a DVector<f64>),
}

fn draw_from<R: Rng + ?Sized>(probs: impl IntoIterator<Item = f64>, rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut last = 0;
    for (i, p) in probs.into_iter().enumerate() {
        acc += p;
        if p > 0.0 {
            last = i;
        }
        if u < acc {
            return i;
        }
    }
    // rounding left u above the total mass
    last
}

/// Samples `T` states and rewards along the chain.
pub fn sample_trajectory<R: Rng + ?Sized>(
    mrp: &MarkovRewardProcess,
    start: Start<'_>,
    t: usize,
    rng: &mut R,
) -> Result<Trajectory> {
    if t < 2 {
        return Err(Error::InvalidInput(format!("trajectory length {t} below 2")));
    }
    let m = mrp.n_states();
    let mut s = match start {
        Start::State(s) if s < m => s,
        Start::State(s) => return Err(Error::InvalidInput(format!("start state {s} out of range"))),
        Start::Distribution(d) if d.len() == m => draw_from(d.iter().copied(), rng),
        Start::Distribution(d) => {
            return Err(Error::DimensionMismatch(format!("start distribution of length {}", d.len())))
        }
    };
    let mut states = Vec::with_capacity(t);
    let mut rewards = Vec::with_capacity(t);
    for _ in 0..t {
        let next = draw_from(mrp.p.row(s).iter().copied(), rng);
        states.push(s);
        rewards.push(mrp.r[(s, next)]);
        s = next;
    }
    Ok(Trajectory { states, rewards, terminal: s })
}

/// The outlier chain: uniform transitions, constant reward, one feature per
/// state drawn from `Normal(μ, σ)` except the last state, fixed at `p·μ`.
pub fn outlier_chain<R: Rng + ?Sized>(
    m: usize,
    mu: f64,
    sigma: f64,
    p_outlier: f64,
    r: f64,
    gamma: f64,
    rng: &mut R,
) -> Result<(MarkovRewardProcess, FeatureMap)> {
    if m < 2 {
        return Err(Error::InvalidInput(format!("outlier chain needs m >= 2, got {m}")));
    }
    if !(sigma >= 0.0) {
        return Err(Error::InvalidInput(format!("sigma = {sigma} is negative")));
    }
    let normal = Normal::new(mu, sigma).map_err(|e| Error::InvalidInput(e.to_string()))?;
    let mut phi = DMatrix::zeros(m, 1);
    for s in 0..m - 1 {
        phi[(s, 0)] = normal.sample(rng);
    }
    phi[(m - 1, 0)] = p_outlier * mu;
    let mrp = MarkovRewardProcess::new(
        DMatrix::from_element(m, m, 1.0 / m as f64),
        DMatrix::from_element(m, m, r),
        gamma,
    )?;
    Ok((mrp, FeatureMap::new(phi)?))
}

/// Dense chain with positive transition weights drawn uniformly from
/// `[0.05, 1]` and rewards from `[0, 1]`.
pub fn random_mrp<R: Rng + ?Sized>(m: usize, gamma: f64, rng: &mut R) -> Result<MarkovRewardProcess> {
    let mut p = DMatrix::from_fn(m, m, |_, _| rng.random_range(0.05..=1.0));
    for mut row in p.row_iter_mut() {
        let s = row.sum();
        row /= s;
    }
    let r = DMatrix::from_fn(m, m, |_, _| rng.random_range(0.0..=1.0));
    MarkovRewardProcess::new(p, r, gamma)
}

/// Dense doubly stochastic chain (uniform stationary distribution), built by
/// Sinkhorn balancing of a positive random matrix.
pub fn random_doubly_stochastic_mrp<R: Rng + ?Sized>(
    m: usize,
    gamma: f64,
    rng: &mut R,
) -> Result<MarkovRewardProcess> {
    let mut p = DMatrix::from_fn(m, m, |_, _| rng.random_range(0.05..=1.0));
    for _ in 0..10_000 {
        for mut col in p.column_iter_mut() {
            let s = col.sum();
            col /= s;
        }
        for mut row in p.row_iter_mut() {
            let s = row.sum();
            row /= s;
        }
        let col_err = p.row_sum().iter().map(|c: &f64| (c - 1.0).abs()).fold(0.0, f64::max);
        if col_err < 1e-14 {
            break;
        }
    }
    let r = DMatrix::from_fn(m, m, |_, _| rng.random_range(0.0..=1.0));
    MarkovRewardProcess::new(p, r, gamma)
}

/// Metadata stored beside the matrix files of a saved instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceMeta {
    pub m: usize,
    pub n: usize,
    pub gamma: f64,
    pub seed: u64,
}

pub fn write_matrix_csv<W: Write>(mat: &DMatrix<f64>, writer: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    wtr.write_record((0..mat.ncols()).map(|j| format!("c{j}")))?;
    for row in mat.row_iter() {
        wtr.write_record(row.iter().map(|x| format!("{x:e}")))?;
    }
    wtr.flush()?;
    Ok(())
}

pub fn read_matrix_csv<R: Read>(reader: R) -> Result<DMatrix<f64>> {
    let mut rdr = csv::Reader::from_reader(reader);
    let ncols = rdr.headers()?.len();
    let mut data = Vec::new();
    let mut nrows = 0;
    for rec in rdr.records() {
        let rec = rec?;
        if rec.len() != ncols {
            return Err(Error::DimensionMismatch(format!("row {nrows} has {} fields", rec.len())));
        }
        for f in rec.iter() {
            data.push(
                f.trim()
                    .parse::<f64>()
                    .map_err(|e| Error::InvalidInput(format!("bad number {f:?}: {e}")))?,
            );
        }
        nrows += 1;
    }
    Ok(DMatrix::from_row_slice(nrows, ncols, &data))
}

/// Writes `P.csv`, `R.csv`, `Phi.csv` and `meta.json` into `dir`.
pub fn save_instance(
    dir: &Path,
    mrp: &MarkovRewardProcess,
    features: &FeatureMap,
    seed: u64,
) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    write_matrix_csv(&mrp.p, File::create(dir.join("P.csv"))?)?;
    write_matrix_csv(&mrp.r, File::create(dir.join("R.csv"))?)?;
    write_matrix_csv(&features.phi, File::create(dir.join("Phi.csv"))?)?;
    let meta = InstanceMeta { m: mrp.n_states(), n: features.dim(), gamma: mrp.gamma, seed };
    serde_json::to_writer_pretty(File::create(dir.join("meta.json"))?, &meta)?;
    Ok(())
}

pub fn load_instance(dir: &Path) -> Result<(MarkovRewardProcess, FeatureMap, InstanceMeta)> {
    let open = |name: &str| -> Result<BufReader<File>> { Ok(BufReader::new(File::open(dir.join(name))?)) };
    let meta: InstanceMeta = serde_json::from_reader(open("meta.json")?)?;
    let p = read_matrix_csv(open("P.csv")?)?;
    let r = read_matrix_csv(open("R.csv")?)?;
    let phi = read_matrix_csv(open("Phi.csv")?)?;
    if p.nrows() != meta.m || phi.shape() != (meta.m, meta.n) {
        return Err(Error::DimensionMismatch("instance files disagree with meta.json".into()));
    }
    Ok((MarkovRewardProcess::new(p, r, meta.gamma)?, FeatureMap::new(phi)?, meta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    #[test]
    fn stationary_examples() {
        let u = DMatrix::from_element(4, 4, 0.25);
        let pi = stationary_distribution(&u).unwrap();
        assert!(pi.pi().iter().all(|x| (x - 0.25).abs() < 1e-12));

        let p = DMatrix::from_row_slice(2, 2, &[0.9, 0.1, 0.5, 0.5]);
        let pi = stationary_distribution(&p).unwrap();
        assert!((pi.pi()[0] - 5.0 / 6.0).abs() < 1e-10);
        assert!((pi.pi()[1] - 1.0 / 6.0).abs() < 1e-10);

        let mrp = random_doubly_stochastic_mrp(6, 0.5, &mut seeded(3)).unwrap();
        let pi = stationary_distribution(mrp.p()).unwrap();
        assert!(pi.pi().iter().all(|x| (x - 1.0 / 6.0).abs() < 1e-9));
    }

    #[test]
    fn periodic_chain_does_not_converge() {
        // bipartite {0, 2} / {1}: the uniform start oscillates forever
        let p = DMatrix::from_row_slice(3, 3, &[0., 1., 0., 0.5, 0., 0.5, 0., 1., 0.]);
        assert!(matches!(stationary_distribution(&p), Err(Error::NoConvergence { .. })));
        let bad = DMatrix::from_row_slice(2, 2, &[0.5, 0.6, 0.5, 0.5]);
        assert!(matches!(stationary_distribution(&bad), Err(Error::NotStochastic { row: 0 })));
    }

    #[test]
    fn one_step_reward_examples() {
        let p = DMatrix::from_row_slice(2, 2, &[0.5, 0.5, 1.0, 0.0]);
        let r = DMatrix::from_row_slice(2, 2, &[1.0, 3.0, 2.0, 0.0]);
        let mrp = MarkovRewardProcess::new(p.clone(), r, 0.5).unwrap();
        assert_eq!(expected_one_step_reward(&mrp).as_slice(), &[2.0, 2.0]);

        let c = MarkovRewardProcess::new(p.clone(), DMatrix::from_element(2, 2, 3.0), 0.5).unwrap();
        assert_eq!(expected_one_step_reward(&c).as_slice(), &[3.0, 3.0]);
        let z = MarkovRewardProcess::new(p, DMatrix::zeros(2, 2), 0.5).unwrap();
        assert_eq!(expected_one_step_reward(&z).as_slice(), &[0.0, 0.0]);
    }

    #[test]
    fn true_value_examples() {
        let mrp = MarkovRewardProcess::new(
            DMatrix::from_element(5, 5, 0.2),
            DMatrix::from_element(5, 5, 1.0),
            0.5,
        )
        .unwrap();
        let v = true_value(&mrp).unwrap();
        assert!(v.iter().all(|x| (x - 2.0).abs() < 1e-12));

        let mrp = random_mrp(4, 0.0, &mut seeded(1)).unwrap();
        assert!((true_value(&mrp).unwrap() - expected_one_step_reward(&mrp)).norm() < 1e-14);

        let mrp = random_mrp(4, 0.8, &mut seeded(2)).unwrap();
        let rbar = expected_one_step_reward(&mrp);
        let mut series = DVector::zeros(4);
        let mut term = rbar.clone();
        for _ in 0..=200 {
            series += &term;
            term = mrp.p() * term * mrp.gamma();
        }
        assert!((true_value(&mrp).unwrap() - series).amax() < 1e-8);
    }

    #[test]
    fn trajectory_shapes() {
        let absorbing = MarkovRewardProcess::new(
            DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 1.0]),
            DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 2.0]),
            0.5,
        )
        .unwrap();
        let t = sample_trajectory(&absorbing, Start::State(1), 5, &mut seeded(0)).unwrap();
        assert_eq!(t.states, vec![1; 5]);
        assert_eq!(t.rewards, vec![2.0; 5]);

        let cycle = MarkovRewardProcess::new(
            DMatrix::from_row_slice(3, 3, &[0., 1., 0., 0., 0., 1., 1., 0., 0.]),
            DMatrix::zeros(3, 3),
            0.5,
        )
        .unwrap();
        let t = sample_trajectory(&cycle, Start::State(0), 7, &mut seeded(0)).unwrap();
        assert_eq!(t.states, vec![0, 1, 2, 0, 1, 2, 0]);
        assert_eq!(t.terminal, 1);
        assert!(sample_trajectory(&cycle, Start::State(0), 1, &mut seeded(0)).is_err());
    }

    #[test]
    fn rewards_follow_transitions() {
        let mrp = random_mrp(5, 0.5, &mut seeded(8)).unwrap();
        let t = sample_trajectory(&mrp, Start::State(0), 500, &mut seeded(9)).unwrap();
        for (s, s2, r) in t.transitions() {
            assert!(mrp.p()[(s, s2)] > 0.0);
            assert_eq!(r, mrp.r()[(s, s2)]);
        }
    }

    #[test]
    fn long_run_frequencies_match_stationary() {
        let mrp = random_mrp(5, 0.5, &mut seeded(4)).unwrap();
        let pi = stationary_distribution(mrp.p()).unwrap();
        let t = sample_trajectory(&mrp, Start::Distribution(pi.pi()), 1_000_000, &mut seeded(5)).unwrap();
        let mut freq = DVector::zeros(5);
        for &s in &t.states {
            freq[s] += 1.0;
        }
        freq /= t.len() as f64;
        let tv = 0.5 * (freq - pi.pi()).lp_norm(1);
        assert!(tv < 1e-2, "total variation {tv}");
    }

    #[test]
    fn outlier_chain_layout() {
        let (mrp, f) = outlier_chain(20, 1.0, 0.05, 5.0, 1.0, 0.5, &mut seeded(0)).unwrap();
        assert_eq!(f.phi().shape(), (20, 1));
        assert_eq!(f.phi()[(19, 0)], 5.0);
        assert!(mrp.p().iter().all(|x| *x == 0.05));
        let (_, f0) = outlier_chain(6, 2.0, 0.0, 3.0, 1.0, 0.5, &mut seeded(0)).unwrap();
        assert!((0..5).all(|s| f0.phi()[(s, 0)] == 2.0));
        assert_eq!(f0.phi()[(5, 0)], 6.0);
        assert!(outlier_chain(1, 1.0, 0.05, 5.0, 1.0, 0.5, &mut seeded(0)).is_err());
    }

    #[test]
    fn instance_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = seeded(6);
        let mrp = random_mrp(4, 0.7, &mut rng).unwrap();
        let f = FeatureMap::random_uniform(4, 2, &mut rng).unwrap();
        save_instance(dir.path(), &mrp, &f, 6).unwrap();
        let (mrp2, f2, meta) = load_instance(dir.path()).unwrap();
        assert_eq!(mrp2, mrp);
        assert_eq!(f2, f);
        assert_eq!(meta, InstanceMeta { m: 4, n: 2, gamma: 0.7, seed: 6 });
    }

    #[test]
    fn invalid_processes_rejected() {
        let p = DMatrix::from_element(2, 2, 0.5);
        assert!(MarkovRewardProcess::new(p.clone(), DMatrix::zeros(2, 2), 1.0).is_err());
        assert!(MarkovRewardProcess::new(p.clone(), DMatrix::zeros(3, 3), 0.5).is_err());
        assert!(FeatureMap::new(DMatrix::from_row_slice(2, 1, &[1.0, 0.0])).is_err());
    }
}
