//! Entropic optimal transport on (possibly block-sparse) supports.
//!
//! Couplings and cost matrices store values only on an explicit [`Support`];
//! entries outside it are exactly zero and never sampled.

mod blocks;
mod exact;
mod prox;
mod sinkhorn;
mod w2;

use std::io::Write;
use std::path::Path;

use crate::error::{param, shape, Error, Result};
use crate::linalg::{sq_dist, Matrix};
use crate::scalar::{xlogx, Scalar};

pub use blocks::{block_diagonal_support, init_coupling, Embedder, IdentityEmbedder};
pub use exact::exact_ot_small;
pub use prox::{prox_objective, prox_step, prox_step_traced, ProxMove, ProxTrace};
pub use sinkhorn::{default_tolerance, sinkhorn, SinkhornParams};
pub use w2::{subsample_by_mass, w2_distance, W2Params, W2_SUBSAMPLE_CAP};

/// Index set `S ⊆ [n_s] × [n_t]`, stored row-major with a column index.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Support {
    n_s: usize,
    n_t: usize,
    entries: Vec<(usize, usize)>,
    row_start: Vec<usize>,
    col_start: Vec<usize>,
    col_entries: Vec<usize>,
}

impl Support {
    /// Sorts and deduplicates `entries`; rejects out-of-range indices.
    pub fn new(n_s: usize, n_t: usize, mut entries: Vec<(usize, usize)>) -> Result<Self> {
        entries.sort_unstable();
        entries.dedup();
        if let Some(&(i, j)) = entries.iter().find(|(i, j)| *i >= n_s || *j >= n_t) {
            return Err(shape(format!("support entry ({i}, {j}) outside {n_s}x{n_t}")));
        }
        let mut row_start = vec![0usize; n_s + 1];
        let mut col_count = vec![0usize; n_t + 1];
        for &(i, j) in &entries {
            row_start[i + 1] += 1;
            col_count[j + 1] += 1;
        }
        for i in 0..n_s {
            row_start[i + 1] += row_start[i];
        }
        for j in 0..n_t {
            col_count[j + 1] += col_count[j];
        }
        let col_start = col_count.clone();
        let mut fill = col_count;
        let mut col_entries = vec![0usize; entries.len()];
        for (k, &(_, j)) in entries.iter().enumerate() {
            col_entries[fill[j]] = k;
            fill[j] += 1;
        }
        Ok(Self {
            n_s,
            n_t,
            entries,
            row_start,
            col_start,
            col_entries,
        })
    }

    pub fn dense(n_s: usize, n_t: usize) -> Self {
        let entries = (0..n_s).flat_map(|i| (0..n_t).map(move |j| (i, j))).collect();
        Self::new(n_s, n_t, entries).expect("dense support in range")
    }

    pub fn n_source(&self) -> usize {
        self.n_s
    }
    pub fn n_target(&self) -> usize {
        self.n_t
    }
    pub fn entries(&self) -> &[(usize, usize)] {
        &self.entries
    }
    pub fn len(&self) -> usize {
        self.entries.len()
    }
    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
    pub fn is_dense(&self) -> bool {
        self.entries.len() == self.n_s * self.n_t
    }

    /// Entry indices of row `i`.
    pub fn row(&self, i: usize) -> std::ops::Range<usize> {
        self.row_start[i]..self.row_start[i + 1]
    }

    /// Entry indices of column `j`.
    pub fn col(&self, j: usize) -> &[usize] {
        &self.col_entries[self.col_start[j]..self.col_start[j + 1]]
    }

    pub fn position(&self, i: usize, j: usize) -> Option<usize> {
        let r = self.row(i);
        self.entries[r.clone()]
            .binary_search_by_key(&j, |&(_, c)| c)
            .ok()
            .map(|k| r.start + k)
    }
}

fn l1<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).map(|(&x, &y)| (x - y).abs()).sum()
}

/// Marginal feasibility threshold (L1) for a [`Coupling`].
pub fn marginal_tolerance<T: Scalar>() -> T {
    T::of(1e-6).max(T::epsilon() * T::of(1e3))
}

fn check_probability<T: Scalar>(v: &[T], what: &str) -> Result<()> {
    if v.iter().any(|&x| !(x >= T::zero()) || !x.is_finite()) {
        return Err(param(format!("{what} has a negative or non-finite entry")));
    }
    let s: T = v.iter().copied().sum();
    if (s - T::one()).abs() > T::sum_tolerance() {
        return Err(param(format!("{what} sums to {s}, expected 1")));
    }
    Ok(())
}

/// Nonnegative transport plan on a support with fixed marginals.
#[derive(Clone, Debug, PartialEq)]
pub struct Coupling<T> {
    support: Support,
    values: Vec<T>,
    row_marginal: Vec<T>,
    col_marginal: Vec<T>,
}

impl<T: Scalar> Coupling<T> {
    /// Validates nonnegativity and marginal feasibility (L1 within 1e-6).
    pub fn new(support: Support, values: Vec<T>, row_marginal: Vec<T>, col_marginal: Vec<T>) -> Result<Self> {
        let c = Self::from_parts_unchecked(support, values, row_marginal, col_marginal);
        c.validate()?;
        Ok(c)
    }

    pub(crate) fn from_parts_unchecked(
        support: Support,
        values: Vec<T>,
        row_marginal: Vec<T>,
        col_marginal: Vec<T>,
    ) -> Self {
        Self {
            support,
            values,
            row_marginal,
            col_marginal,
        }
    }

    /// The product coupling `p ⊗ q` on the dense support.
    pub fn independent(p: &[T], q: &[T]) -> Result<Self> {
        let support = Support::dense(p.len(), q.len());
        let values = support.entries().iter().map(|&(i, j)| p[i] * q[j]).collect();
        Self::new(support, values, p.to_vec(), q.to_vec())
    }

    pub fn validate(&self) -> Result<()> {
        if self.values.len() != self.support.len() {
            return Err(shape("coupling values do not match support size"));
        }
        if self.row_marginal.len() != self.support.n_source() || self.col_marginal.len() != self.support.n_target() {
            return Err(shape("coupling marginals do not match support shape"));
        }
        if self.values.iter().any(|&v| !(v >= T::zero()) || !v.is_finite()) {
            return Err(param("coupling has a negative or non-finite entry"));
        }
        let tol = marginal_tolerance::<T>();
        let (r, c) = self.marginal_residuals();
        if r > tol || c > tol {
            return Err(Error::Infeasible(format!(
                "coupling marginal residuals {r:e} (rows) and {c:e} (columns) exceed {tol:e}"
            )));
        }
        Ok(())
    }

    pub fn support(&self) -> &Support {
        &self.support
    }
    pub fn values(&self) -> &[T] {
        &self.values
    }
    pub fn row_marginal(&self) -> &[T] {
        &self.row_marginal
    }
    pub fn col_marginal(&self) -> &[T] {
        &self.col_marginal
    }
    pub fn n_source(&self) -> usize {
        self.support.n_source()
    }
    pub fn n_target(&self) -> usize {
        self.support.n_target()
    }

    pub fn get(&self, i: usize, j: usize) -> T {
        self.support.position(i, j).map_or(T::zero(), |k| self.values[k])
    }

    pub fn row_sums(&self) -> Vec<T> {
        (0..self.n_source())
            .map(|i| self.support.row(i).map(|k| self.values[k]).sum())
            .collect()
    }

    pub fn col_sums(&self) -> Vec<T> {
        (0..self.n_target())
            .map(|j| self.support.col(j).iter().map(|&k| self.values[k]).sum())
            .collect()
    }

    /// L1 residuals `(‖Γ1 − p‖₁, ‖Γᵀ1 − q‖₁)`.
    pub fn marginal_residuals(&self) -> (T, T) {
        (
            l1(&self.row_sums(), &self.row_marginal),
            l1(&self.col_sums(), &self.col_marginal),
        )
    }

    /// `⟨Γ, C⟩`; the cost must live on the same support.
    pub fn transport_cost(&self, cost: &CostMatrix<T>) -> Result<T> {
        if cost.support != self.support {
            return Err(shape("cost and coupling supports differ"));
        }
        Ok(self.values.iter().zip(&cost.values).map(|(&g, &c)| g * c).sum())
    }

    /// `H(Γ) = −Σ Γ log Γ`.
    pub fn entropy(&self) -> T {
        -self.values.iter().map(|&v| xlogx(v)).sum::<T>()
    }

    pub fn to_dense(&self) -> Matrix<T> {
        let mut m = Matrix::zeros(self.n_source(), self.n_target());
        for (&(i, j), &v) in self.support.entries().iter().zip(&self.values) {
            m.set(i, j, v);
        }
        m
    }

    /// Sparse triplets `i,j,value` with a header row.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["i", "j", "value"])?;
        for (&(i, j), v) in self.support.entries().iter().zip(&self.values) {
            w.write_record([i.to_string(), j.to_string(), v.to_string()])?;
        }
        w.flush().map_err(|e| Error::io("<coupling csv>", e))?;
        Ok(())
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_csv(std::io::BufWriter::new(f))
    }
}

/// Ground metric on a support, with per-entry visit counts for sampled estimates.
#[derive(Clone, Debug, PartialEq)]
pub struct CostMatrix<T> {
    support: Support,
    values: Vec<T>,
    visit_counts: Vec<u64>,
}

impl<T: Scalar> CostMatrix<T> {
    pub fn new(support: Support, values: Vec<T>) -> Result<Self> {
        let n = support.len();
        Self::with_visits(support, values, vec![0; n])
    }

    pub fn with_visits(support: Support, values: Vec<T>, visit_counts: Vec<u64>) -> Result<Self> {
        if values.len() != support.len() || visit_counts.len() != support.len() {
            return Err(shape("cost values do not match support size"));
        }
        if values.iter().any(|&v| !(v >= T::zero()) || !v.is_finite()) {
            return Err(param("cost entries must be finite and >= 0"));
        }
        Ok(Self {
            support,
            values,
            visit_counts,
        })
    }

    pub fn from_dense(m: &Matrix<T>) -> Result<Self> {
        let support = Support::dense(m.rows(), m.cols());
        let values = support.entries().iter().map(|&(i, j)| m.get(i, j)).collect();
        Self::new(support, values)
    }

    /// `C_ij = ‖x_i − y_j‖²` on `support`.
    pub fn squared_euclidean(support: Support, xs: &Matrix<T>, ys: &Matrix<T>) -> Result<Self> {
        if xs.cols() != ys.cols() {
            return Err(shape("point sets differ in dimension"));
        }
        if xs.rows() != support.n_source() || ys.rows() != support.n_target() {
            return Err(shape("point sets do not match support shape"));
        }
        let values = support
            .entries()
            .iter()
            .map(|&(i, j)| sq_dist(xs.row(i), ys.row(j)))
            .collect();
        Self::new(support, values)
    }

    pub fn support(&self) -> &Support {
        &self.support
    }
    pub fn values(&self) -> &[T] {
        &self.values
    }
    pub fn visit_counts(&self) -> &[u64] {
        &self.visit_counts
    }
    pub fn get(&self, i: usize, j: usize) -> Option<T> {
        self.support.position(i, j).map(|k| self.values[k])
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["i", "j", "value", "visits"])?;
        for (k, &(i, j)) in self.support.entries().iter().enumerate() {
            w.write_record([
                i.to_string(),
                j.to_string(),
                self.values[k].to_string(),
                self.visit_counts[k].to_string(),
            ])?;
        }
        w.flush().map_err(|e| Error::io("<cost csv>", e))?;
        Ok(())
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_csv(std::io::BufWriter::new(f))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn support_indexing() {
        let s = Support::new(3, 2, vec![(2, 1), (0, 0), (0, 1), (0, 0)]).unwrap();
        assert_eq!(s.len(), 3);
        assert_eq!(s.entries(), &[(0, 0), (0, 1), (2, 1)]);
        assert_eq!(s.row(0), 0..2);
        assert_eq!(s.row(1), 2..2);
        assert_eq!(s.col(1), &[1, 2]);
        assert_eq!(s.position(2, 1), Some(2));
        assert_eq!(s.position(1, 1), None);
        assert!(Support::new(2, 2, vec![(2, 0)]).is_err());
    }

    #[test]
    fn independent_coupling_is_feasible() {
        let c = Coupling::independent(&[0.25f64, 0.75], &[0.5, 0.3, 0.2]).unwrap();
        let (r, col) = c.marginal_residuals();
        assert!(r < 1e-15 && col < 1e-15);
        assert!((c.get(1, 2) - 0.15).abs() < 1e-15);
    }

    #[test]
    fn infeasible_coupling_rejected() {
        let s = Support::dense(2, 2);
        assert!(Coupling::new(s.clone(), vec![0.5f64, 0.0, 0.0, 0.4], vec![0.5, 0.5], vec![0.5, 0.5]).is_err());
        assert!(Coupling::new(s, vec![0.6f64, -0.1, -0.1, 0.6], vec![0.5, 0.5], vec![0.5, 0.5]).is_err());
    }

    #[test]
    fn triplet_csv_lists_support_only() {
        let s = Support::new(2, 2, vec![(0, 0), (1, 1)]).unwrap();
        let c = Coupling::new(s, vec![0.5f64, 0.5], vec![0.5, 0.5], vec![0.5, 0.5]).unwrap();
        let mut buf = Vec::new();
        c.write_csv(&mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "i,j,value\n0,0,0.5\n1,1,0.5\n");
    }

    #[test]
    fn cost_validation() {
        assert!(CostMatrix::new(Support::dense(1, 2), vec![1.0f64, -1.0]).is_err());
        assert!(CostMatrix::new(Support::dense(1, 2), vec![1.0f64, f64::NAN]).is_err());
        let xs = Matrix::from_rows(&[vec![0.0f64, 0.0], vec![1.0, 1.0]]).unwrap();
        let c = CostMatrix::squared_euclidean(Support::dense(2, 2), &xs, &xs).unwrap();
        assert_eq!(c.get(0, 1), Some(2.0));
    }
}
