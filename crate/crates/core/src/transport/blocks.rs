//! Block-diagonal supports and the initial coupling.

use crate::error::{param, shape, Result};
use crate::linalg::Matrix;
use crate::scalar::Scalar;
use crate::tasks::LabeledTask;

use super::{sinkhorn, Coupling, CostMatrix, SinkhornParams, Support};

/// Feature map applied before measuring squared Euclidean ground costs.
pub trait Embedder<T>: Send + Sync {
    fn embed(&self, x: &[T]) -> Vec<T>;

    fn embed_all(&self, xs: &Matrix<T>) -> Result<Matrix<T>>
    where
        T: Scalar,
    {
        let rows: Vec<Vec<T>> = xs.iter_rows().map(|r| self.embed(r)).collect();
        let d = rows.first().map_or(0, Vec::len);
        Matrix::with_rows(d, rows.into_iter())
    }
}

#[derive(Clone, Copy, Debug, Default)]
pub struct IdentityEmbedder;

impl<T: Scalar> Embedder<T> for IdentityEmbedder {
    fn embed(&self, x: &[T]) -> Vec<T> {
        x.to_vec()
    }
}

const OVERLAP_EPS: f64 = 1e-12;

/// Block-diagonal support from a 1-D ordering of both point sets.
///
/// Both sides are sorted by `key`. The source order is cut into
/// `b = ceil(max(N_s, N_t) / block_size)` consecutive chunks of near-equal
/// size (clamped to `1..=min(N_s, N_t)`). Each chunk covers an interval of
/// cumulative source mass; a target point joins every block whose mass
/// interval overlaps its own. The support is the union of the aligned block
/// rectangles. This always contains the monotone (north-west corner)
/// coupling, so the restricted transport problem is feasible. With equal
/// uniform masses and `N` divisible by the chunk count the blocks are exact
/// squares.
pub fn block_diagonal_support<T: Scalar>(
    source_keys: &[T],
    target_keys: &[T],
    source_mass: &[T],
    target_mass: &[T],
    block_size: usize,
) -> Result<Support> {
    let (ns, nt) = (source_keys.len(), target_keys.len());
    if block_size == 0 {
        return Err(param("block_size must be >= 1"));
    }
    if ns == 0 || nt == 0 || source_mass.len() != ns || target_mass.len() != nt {
        return Err(shape("keys and masses must be nonempty and equal length"));
    }
    let order = |keys: &[T]| {
        let mut idx: Vec<usize> = (0..keys.len()).collect();
        idx.sort_by(|&a, &b| keys[a].partial_cmp(&keys[b]).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b)));
        idx
    };
    let (so, to) = (order(source_keys), order(target_keys));
    let blocks = ns.max(nt).div_ceil(block_size).clamp(1, ns.min(nt));
    if blocks == 1 {
        return Ok(Support::dense(ns, nt));
    }

    // chunk b of the source order covers so[bounds[b]..bounds[b+1]]
    let bounds: Vec<usize> = (0..=blocks).map(|b| b * ns / blocks).collect();
    let mut cum_s = vec![0.0f64; ns + 1];
    for (r, &i) in so.iter().enumerate() {
        cum_s[r + 1] = cum_s[r] + source_mass[i].f64();
    }
    let mut cum_t = vec![0.0f64; nt + 1];
    for (r, &j) in to.iter().enumerate() {
        cum_t[r + 1] = cum_t[r] + target_mass[j].f64();
    }
    let total_s = cum_s[ns];
    let total_t = cum_t[nt];
    let edges: Vec<f64> = bounds.iter().map(|&b| cum_s[b] / total_s).collect();

    let mut entries = Vec::new();
    for (r, &j) in to.iter().enumerate() {
        let (lo, hi) = (cum_t[r] / total_t, cum_t[r + 1] / total_t);
        let mut hit = false;
        for c in 0..blocks {
            if hi.min(edges[c + 1]) - lo.max(edges[c]) > OVERLAP_EPS {
                entries.extend(so[bounds[c]..bounds[c + 1]].iter().map(|&i| (i, j)));
                hit = true;
            }
        }
        if !hit {
            // zero-mass target point: attach to the block containing its position
            let c = (0..blocks).rfind(|&c| edges[c] <= lo).unwrap_or(0);
            entries.extend(so[bounds[c]..bounds[c + 1]].iter().map(|&i| (i, j)));
        }
    }
    Support::new(ns, nt, entries)
}

/// Initial coupling: entropic OT with ground metric `‖φ(x_s) − φ(x_t)‖²` on a
/// block-diagonal support keyed by the first embedding coordinate.
pub fn init_coupling<T: Scalar>(
    source: &LabeledTask<T>,
    target: &LabeledTask<T>,
    embedder: &dyn Embedder<T>,
    block_size: usize,
    params: &SinkhornParams<T>,
) -> Result<Coupling<T>> {
    let es = embedder.embed_all(source.features())?;
    let et = embedder.embed_all(target.features())?;
    if es.cols() == 0 || es.cols() != et.cols() {
        return Err(shape("embeddings of source and target differ in dimension"));
    }
    let ks: Vec<T> = es.iter_rows().map(|r| r[0]).collect();
    let kt: Vec<T> = et.iter_rows().map(|r| r[0]).collect();
    let support = block_diagonal_support(&ks, &kt, source.mass(), target.mass(), block_size)?;
    let cost = CostMatrix::squared_euclidean(support, &es, &et)?;
    sinkhorn(&cost, source.mass(), target.mass(), params)
}
