//! Overdetermined systems `Φw = V` with positive row weights, the two error
//! criteria defined on them, and their closed-form minimizers.
//!
//! The least-squares criterion weights every residual by `d_i`; the
//! scale-invariant criterion weights the squared *distance to the hyperplane*
//! `φ_iᵀw = V_i`, which does not change when an equation is multiplied by a
//! nonzero constant.

use std::io::{Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::error::{Error, Result};
use crate::linalg;

/// Weight vector `w ∈ ℝⁿ`.
pub type WeightVector = DVector<f64>;

/// The system `Φw = V` together with positive row weights `d` (stored
/// normalized to sum to one).
#[derive(Debug, Clone, PartialEq)]
pub struct OverdeterminedSystem {
    phi: DMatrix<f64>,
    targets: DVector<f64>,
    weights: DVector<f64>,
}

/// Diagonal of `N`, with `N_ii = 1/‖φ_i‖₂`.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizationMatrix {
    diag: DVector<f64>,
}

impl NormalizationMatrix {
    pub fn diagonal(&self) -> &DVector<f64> {
        &self.diag
    }

    pub fn to_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_diagonal(&self.diag)
    }
}

impl OverdeterminedSystem {
    /// Builds a system, validating shapes and normalizing `weights`.
    /// `None` selects uniform weights `1/m`.
    pub fn new(
        phi: DMatrix<f64>,
        targets: DVector<f64>,
        weights: Option<DVector<f64>>,
    ) -> Result<Self> {
        let (m, n) = phi.shape();
        if n == 0 || m < n {
            return Err(Error::DimensionMismatch(format!(
                "need m >= n >= 1, got m = {m}, n = {n}"
            )));
        }
        if targets.len() != m {
            return Err(Error::DimensionMismatch(format!(
                "{m} rows but {} targets",
                targets.len()
            )));
        }
        if phi.iter().chain(targets.iter()).any(|x| !x.is_finite()) {
            return Err(Error::InvalidInput("non-finite entry in system".into()));
        }
        for (i, row) in phi.row_iter().enumerate() {
            if row.norm() == 0.0 {
                return Err(Error::InvalidInput(format!("row {i} of Phi is zero")));
            }
        }
        let weights = match weights {
            None => DVector::from_element(m, 1.0 / m as f64),
            Some(d) => {
                if d.len() != m {
                    return Err(Error::DimensionMismatch(format!(
                        "{m} rows but {} weights",
                        d.len()
                    )));
                }
                if d.iter().any(|&x| !(x > 0.0) || !x.is_finite()) {
                    return Err(Error::InvalidInput("row weights must be positive".into()));
                }
                let total = d.sum();
                d / total
            }
        };
        Ok(Self { phi, targets, weights })
    }

    /// Row-major convenience constructor with uniform weights.
    pub fn from_rows(rows: &[Vec<f64>], targets: &[f64]) -> Result<Self> {
        let n = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != n) {
            return Err(Error::DimensionMismatch("ragged rows".into()));
        }
        let flat: Vec<f64> = rows.iter().flatten().copied().collect();
        Self::new(
            DMatrix::from_row_slice(rows.len(), n, &flat),
            DVector::from_column_slice(targets),
            None,
        )
    }

    /// Entries of `Φ` and `V` drawn uniformly from `[-1, 1]`, uniform weights.
    pub fn random_uniform<R: Rng + ?Sized>(m: usize, n: usize, rng: &mut R) -> Result<Self> {
        let phi = DMatrix::from_fn(m, n, |_, _| rng.random_range(-1.0..=1.0));
        let targets = DVector::from_fn(m, |_, _| rng.random_range(-1.0..=1.0));
        Self::new(phi, targets, None)
    }

    pub fn phi(&self) -> &DMatrix<f64> {
        &self.phi
    }

    pub fn targets(&self) -> &DVector<f64> {
        &self.targets
    }

    pub fn weights(&self) -> &DVector<f64> {
        &self.weights
    }

    pub fn nrows(&self) -> usize {
        self.phi.nrows()
    }

    pub fn ncols(&self) -> usize {
        self.phi.ncols()
    }

    /// `φ_i` as a column vector.
    pub fn row(&self, i: usize) -> DVector<f64> {
        self.phi.row(i).transpose()
    }

    pub fn normalization(&self) -> NormalizationMatrix {
        NormalizationMatrix {
            diag: DVector::from_iterator(
                self.nrows(),
                self.phi.row_iter().map(|r| 1.0 / r.norm()),
            ),
        }
    }

    /// Copy with equation `i` replaced by `(c·φ_i, c·V_i)`.
    pub fn rescale_row(&self, i: usize, c: f64) -> Result<Self> {
        if c == 0.0 || !c.is_finite() {
            return Err(Error::InvalidInput("row scale must be finite and nonzero".into()));
        }
        if i >= self.nrows() {
            return Err(Error::InvalidInput(format!("row {i} out of range")));
        }
        let mut out = self.clone();
        out.phi.row_mut(i).scale_mut(c);
        out.targets[i] *= c;
        Ok(out)
    }

    /// Signed distance `(φ_iᵀw − V_i)/‖φ_i‖₂`. Panics if `i` is out of range.
    pub fn hyperplane_distance(&self, w: &WeightVector, i: usize) -> f64 {
        let row = self.phi.row(i);
        (row.dot(&w.transpose()) - self.targets[i]) / row.norm()
    }

    /// Reads the `phi_0..phi_{n-1},v,d` CSV layout. A missing `d` column
    /// means uniform weights.
    pub fn read_csv<P: AsRef<Path>>(path: P) -> Result<Self> {
        Self::from_csv_reader(std::fs::File::open(path)?)
    }

    pub fn from_csv_reader<R: Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
        let headers = rdr.headers()?.clone();
        let n = headers.iter().take_while(|h| h.starts_with("phi_")).count();
        for (j, h) in headers.iter().take(n).enumerate() {
            if h != format!("phi_{j}") {
                return Err(Error::InvalidInput(format!("unexpected column {h:?}")));
            }
        }
        let rest: Vec<&str> = headers.iter().skip(n).collect();
        let has_d = match rest.as_slice() {
            ["v"] => false,
            ["v", "d"] => true,
            _ => {
                return Err(Error::InvalidInput(
                    "expected header phi_0..phi_{n-1},v,d".into(),
                ))
            }
        };
        let mut phi = Vec::new();
        let mut v = Vec::new();
        let mut d = Vec::new();
        for (line, record) in rdr.records().enumerate() {
            let record = record?;
            let values: Vec<f64> = record
                .iter()
                .map(|s| {
                    s.parse::<f64>().map_err(|_| {
                        Error::InvalidInput(format!("row {}: cannot parse {s:?}", line + 1))
                    })
                })
                .collect::<Result<_>>()?;
            if values.len() != headers.len() {
                return Err(Error::InvalidInput(format!("row {} has wrong arity", line + 1)));
            }
            phi.extend_from_slice(&values[..n]);
            v.push(values[n]);
            if has_d {
                d.push(values[n + 1]);
            }
        }
        let m = v.len();
        Self::new(
            DMatrix::from_row_slice(m, n, &phi),
            DVector::from_vec(v),
            has_d.then(|| DVector::from_vec(d)),
        )
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(writer);
        let mut header: Vec<String> = (0..self.ncols()).map(|j| format!("phi_{j}")).collect();
        header.push("v".into());
        header.push("d".into());
        wtr.write_record(&header)?;
        for i in 0..self.nrows() {
            let mut rec: Vec<String> = self.phi.row(i).iter().map(|x| x.to_string()).collect();
            rec.push(self.targets[i].to_string());
            rec.push(self.weights[i].to_string());
            wtr.write_record(&rec)?;
        }
        wtr.flush()?;
        Ok(())
    }
}

/// Signed distance of `w` to hyperplane `i`.
pub fn hyperplane_distance(sys: &OverdeterminedSystem, w: &WeightVector, i: usize) -> f64 {
    sys.hyperplane_distance(w, i)
}

/// The scale-invariant objective `G(w) = ½ Σ d_i δ_i(w)²`.
///
/// The ½ makes `∇G` equal to the full-system Total Projections direction and
/// bounds the Hessian by the identity.
pub fn normalized_error(sys: &OverdeterminedSystem, w: &WeightVector) -> f64 {
    0.5 * (0..sys.nrows())
        .map(|i| sys.weights[i] * sys.hyperplane_distance(w, i).powi(2))
        .sum::<f64>()
}

/// Weighted sum of squared residuals `Σ d_i (φ_iᵀw − V_i)²`.
pub fn least_squares_error(sys: &OverdeterminedSystem, w: &WeightVector) -> f64 {
    let r = &sys.phi * w - &sys.targets;
    r.iter().zip(sys.weights.iter()).map(|(ri, di)| di * ri * ri).sum()
}

/// `w^L = (ΦᵀDΦ)⁻¹ΦᵀDV`, computed as a QR solve of `D^{1/2}Φ w ≈ D^{1/2}V`.
pub fn least_squares_solution(sys: &OverdeterminedSystem) -> Result<WeightVector> {
    let sqrt_d = sys.weights.map(f64::sqrt);
    let a = DMatrix::from_fn(sys.nrows(), sys.ncols(), |i, j| sqrt_d[i] * sys.phi[(i, j)]);
    let b = sys.targets.component_mul(&sqrt_d);
    linalg::lstsq(&a, &b)
}

/// `w^M = (ΦᵀNDNΦ)⁻¹ΦᵀNDN V`: least squares on the row-normalized system.
pub fn scale_invariant_solution(sys: &OverdeterminedSystem) -> Result<WeightVector> {
    let scale = sys
        .normalization()
        .diag
        .component_mul(&sys.weights.map(f64::sqrt));
    let a = DMatrix::from_fn(sys.nrows(), sys.ncols(), |i, j| scale[i] * sys.phi[(i, j)]);
    let b = sys.targets.component_mul(&scale);
    linalg::lstsq(&a, &b)
}

/// `Σ d_i φ_iφ_iᵀ/‖φ_i‖²`, the (constant) Hessian of [`normalized_error`].
pub fn normalized_hessian(sys: &OverdeterminedSystem) -> DMatrix<f64> {
    let n = sys.ncols();
    let mut h = DMatrix::zeros(n, n);
    for i in 0..sys.nrows() {
        let phi = sys.row(i);
        let scale = sys.weights[i] / phi.norm_squared();
        h.ger(scale, &phi, &phi, 1.0);
    }
    h
}
