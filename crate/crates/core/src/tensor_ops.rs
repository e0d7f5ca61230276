//! Dense order-3 tensors and the slice/mode transforming product family.
//!
//! Indices are zero-based in code; modes are numbered 1, 2, 3 as in the
//! usual Kolda–Bader notation. A *slice* `A(i₁)` is the `I₂×I₃` matrix at a
//! fixed first index, a *fiber* `A(i₁,i₂)` is the mode-3 vector at a fixed
//! leading index pair.

use std::ops::{Index, IndexMut};

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor3 {
    dims: [usize; 3],
    data: Vec<f64>,
}

impl Tensor3 {
    pub fn zeros(dims: [usize; 3]) -> Self {
        Self { dims, data: vec![0.0; dims.iter().product()] }
    }

    pub fn from_fn<F: FnMut(usize, usize, usize) -> f64>(dims: [usize; 3], mut f: F) -> Self {
        let mut data = Vec::with_capacity(dims.iter().product());
        for i in 0..dims[0] {
            for j in 0..dims[1] {
                for k in 0..dims[2] {
                    data.push(f(i, j, k));
                }
            }
        }
        Self { dims, data }
    }

    /// Row-major storage in `(i₁, i₂, i₃)` order.
    pub fn from_vec(dims: [usize; 3], data: Vec<f64>) -> Result<Self> {
        if data.len() != dims.iter().product::<usize>() {
            return Err(Error::DimensionMismatch(format!(
                "{} values for a {}x{}x{} tensor",
                data.len(),
                dims[0],
                dims[1],
                dims[2]
            )));
        }
        if data.iter().any(|x| !x.is_finite()) {
            return Err(Error::InvalidInput("non-finite tensor entry".into()));
        }
        Ok(Self { dims, data })
    }

    /// Stacks equally sized matrices as the slices `A(i₁)`.
    pub fn from_slices(slices: &[DMatrix<f64>]) -> Result<Self> {
        let (r, c) = slices.first().map_or((0, 0), |s| s.shape());
        if slices.iter().any(|s| s.shape() != (r, c)) {
            return Err(Error::DimensionMismatch("slices differ in shape".into()));
        }
        Ok(Self::from_fn([slices.len(), r, c], |i, j, k| slices[i][(j, k)]))
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    fn offset(&self, i: usize, j: usize, k: usize) -> usize {
        debug_assert!(i < self.dims[0] && j < self.dims[1] && k < self.dims[2]);
        (i * self.dims[1] + j) * self.dims[2] + k
    }

    /// Slice `A(i₁)` as an `I₂×I₃` matrix.
    pub fn slice(&self, i: usize) -> DMatrix<f64> {
        DMatrix::from_fn(self.dims[1], self.dims[2], |j, k| self[(i, j, k)])
    }

    /// Mode-3 fiber `A(i₁, i₂, ·)`.
    pub fn fiber(&self, i: usize, j: usize) -> DVector<f64> {
        let start = self.offset(i, j, 0);
        DVector::from_column_slice(&self.data[start..start + self.dims[2]])
    }
}

impl Index<(usize, usize, usize)> for Tensor3 {
    type Output = f64;

    fn index(&self, (i, j, k): (usize, usize, usize)) -> &f64 {
        &self.data[self.offset(i, j, k)]
    }
}

impl IndexMut<(usize, usize, usize)> for Tensor3 {
    fn index_mut(&mut self, (i, j, k): (usize, usize, usize)) -> &mut f64 {
        let o = self.offset(i, j, k);
        &mut self.data[o]
    }
}

/// A rearrangement of the three modes, written as a sequence of
/// transpositions applied left to right.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct IndexPermutation {
    transpositions: Vec<(usize, usize)>,
}

impl IndexPermutation {
    pub fn identity() -> Self {
        Self::default()
    }

    /// Swap of modes `a` and `b` (1-based).
    pub fn transposition(a: usize, b: usize) -> Result<Self> {
        Self::identity().then(a, b)
    }

    pub fn then(mut self, a: usize, b: usize) -> Result<Self> {
        if !(1..=3).contains(&a) || !(1..=3).contains(&b) {
            return Err(Error::InvalidInput(format!("transposition ({a}, {b}) outside modes 1..3")));
        }
        self.transpositions.push((a, b));
        Ok(self)
    }

    pub fn inverse(&self) -> Self {
        Self { transpositions: self.transpositions.iter().rev().copied().collect() }
    }

    /// `map[t]` is the input mode that becomes output mode `t` (0-based).
    pub fn mapping(&self) -> [usize; 3] {
        let mut map = [0, 1, 2];
        for &(a, b) in &self.transpositions {
            map.swap(a - 1, b - 1);
        }
        map
    }
}

/// `A^R`: relocates entries so that output mode `t` is input mode `R(t)`.
pub fn permute(a: &Tensor3, perm: &IndexPermutation) -> Tensor3 {
    let map = perm.mapping();
    let dims = [a.dims[map[0]], a.dims[map[1]], a.dims[map[2]]];
    Tensor3::from_fn(dims, |i, j, k| {
        let out = [i, j, k];
        let mut src = [0; 3];
        for t in 0..3 {
            src[map[t]] = out[t];
        }
        a[(src[0], src[1], src[2])]
    })
}

/// `Aᵀ`: swap of the last two modes.
pub fn transpose(a: &Tensor3) -> Tensor3 {
    permute(a, &IndexPermutation::transposition(2, 3).expect("valid modes"))
}

/// A matrix `T(i₁,i₂) ∈ ℝ^{I₃×J}` for every leading index pair: the order-4
/// operand of the mode transforming product.
#[derive(Debug, Clone, PartialEq)]
pub struct FiberTransformer {
    lead: [usize; 2],
    shape: (usize, usize),
    mats: Vec<DMatrix<f64>>,
}

impl FiberTransformer {
    pub fn from_fn<F: FnMut(usize, usize) -> DMatrix<f64>>(lead: [usize; 2], mut f: F) -> Result<Self> {
        let mut mats = Vec::with_capacity(lead[0] * lead[1]);
        for i in 0..lead[0] {
            for j in 0..lead[1] {
                mats.push(f(i, j));
            }
        }
        let shape = mats.first().map_or((0, 0), |m| m.shape());
        if mats.iter().any(|m| m.shape() != shape) {
            return Err(Error::DimensionMismatch("transformer matrices differ in shape".into()));
        }
        Ok(Self { lead, shape, mats })
    }

    pub fn get(&self, i: usize, j: usize) -> &DMatrix<f64> {
        &self.mats[i * self.lead[1] + j]
    }
}

/// Result of [`mode_transform_product`]: a tensor, or a matrix when every
/// transformer has a single column.
#[derive(Debug, Clone, PartialEq)]
pub enum ModeProduct {
    Tensor(Tensor3),
    Contracted(DMatrix<f64>),
}

/// `A ẋ T`: each fiber `A(i₁,i₂)ᵀ` is multiplied by its own matrix `T(i₁,i₂)`.
pub fn mode_transform_product(a: &Tensor3, t: &FiberTransformer) -> Result<ModeProduct> {
    let [i1, i2, i3] = a.dims;
    if t.lead != [i1, i2] || t.shape.0 != i3 {
        return Err(Error::DimensionMismatch(format!(
            "tensor {i1}x{i2}x{i3} against transformer {:?} of {}x{} matrices",
            t.lead, t.shape.0, t.shape.1
        )));
    }
    let j = t.shape.1;
    let out = Tensor3::from_fn([i1, i2, j], |p, q, r| {
        let m = t.get(p, q);
        (0..i3).map(|k| a[(p, q, k)] * m[(k, r)]).sum()
    });
    if j == 1 {
        Ok(ModeProduct::Contracted(DMatrix::from_fn(i1, i2, |p, q| out[(p, q, 0)])))
    } else {
        Ok(ModeProduct::Tensor(out))
    }
}

/// `A ẍ T`: slice `i₁` of the result is `A(i₁)·T(i₁)`.
pub fn slice_transform_product(a: &Tensor3, t: &Tensor3) -> Result<Tensor3> {
    let [i1, i2, i3] = a.dims;
    if t.dims[0] != i1 || t.dims[1] != i3 {
        return Err(Error::DimensionMismatch(format!(
            "slice product of {:?} with {:?}",
            a.dims, t.dims
        )));
    }
    let j = t.dims[2];
    let mut out = Tensor3::zeros([i1, i2, j]);
    for s in 0..i1 {
        let prod = a.slice(s) * t.slice(s);
        for p in 0..i2 {
            for q in 0..j {
                out[(s, p, q)] = prod[(p, q)];
            }
        }
    }
    Ok(out)
}

/// `A ⋊̈ t`: row `i₁` of the result is `A(i₁)·t(i₁,·)ᵀ`.
pub fn slice_contract_product(a: &Tensor3, t: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let [i1, i2, i3] = a.dims;
    if t.shape() != (i1, i3) {
        return Err(Error::DimensionMismatch(format!(
            "slice contraction of {:?} with a {}x{} matrix",
            a.dims,
            t.nrows(),
            t.ncols()
        )));
    }
    let mut out = DMatrix::zeros(i1, i2);
    for s in 0..i1 {
        let row = a.slice(s) * t.row(s).transpose();
        out.row_mut(s).copy_from(&row.transpose());
    }
    Ok(out)
}

/// Mode-`p` matrix product `A ×_p M` (`M` is `J×I_p`).
pub fn mode_p_multiply(a: &Tensor3, m: &DMatrix<f64>, p: usize) -> Result<Tensor3> {
    if !(1..=3).contains(&p) {
        return Err(Error::InvalidInput(format!("mode {p} of an order-3 tensor")));
    }
    let ax = p - 1;
    if m.ncols() != a.dims[ax] {
        return Err(Error::DimensionMismatch(format!(
            "mode-{p} product needs {} columns, matrix has {}",
            a.dims[ax],
            m.ncols()
        )));
    }
    let mut dims = a.dims;
    dims[ax] = m.nrows();
    Ok(Tensor3::from_fn(dims, |i, j, k| {
        let idx = [i, j, k];
        (0..a.dims[ax])
            .map(|l| {
                let mut src = idx;
                src[ax] = l;
                m[(idx[ax], l)] * a[(src[0], src[1], src[2])]
            })
            .sum()
    }))
}

/// Mode-`p` product of a matrix: `M·A` for `p = 1`, `A·Mᵀ` for `p = 2`.
pub fn mode_p_multiply_matrix(a: &DMatrix<f64>, m: &DMatrix<f64>, p: usize) -> Result<DMatrix<f64>> {
    match p {
        1 if m.ncols() == a.nrows() => Ok(m * a),
        2 if m.ncols() == a.ncols() => Ok(a * m.transpose()),
        1 | 2 => Err(Error::DimensionMismatch(format!(
            "mode-{p} product of {}x{} with {}x{}",
            a.nrows(),
            a.ncols(),
            m.nrows(),
            m.ncols()
        ))),
        _ => Err(Error::InvalidInput(format!("mode {p} of a matrix"))),
    }
}

/// Mode-`p` vector product `A ×̄_p v`, contracting mode `p`. The remaining
/// two modes keep their order.
pub fn mode_p_vector(a: &Tensor3, v: &DVector<f64>, p: usize) -> Result<DMatrix<f64>> {
    if !(1..=3).contains(&p) {
        return Err(Error::InvalidInput(format!("mode {p} of an order-3 tensor")));
    }
    let ax = p - 1;
    if v.len() != a.dims[ax] {
        return Err(Error::DimensionMismatch(format!(
            "mode-{p} vector product needs length {}, got {}",
            a.dims[ax],
            v.len()
        )));
    }
    let keep: Vec<usize> = (0..3).filter(|&t| t != ax).collect();
    Ok(DMatrix::from_fn(a.dims[keep[0]], a.dims[keep[1]], |r, c| {
        (0..a.dims[ax])
            .map(|l| {
                let mut src = [0; 3];
                src[keep[0]] = r;
                src[keep[1]] = c;
                src[ax] = l;
                v[l] * a[(src[0], src[1], src[2])]
            })
            .sum()
    }))
}

/// Tensor `𝒫` with diagonal slices `𝒫_s = diag(P_s)`.
pub fn build_probability_tensor(p: &DMatrix<f64>) -> Result<Tensor3> {
    crate::mdp_sim::check_stochastic(p)?;
    let m = p.nrows();
    Ok(Tensor3::from_fn([m, m, m], |s, i, j| if i == j { p[(s, i)] } else { 0.0 }))
}
