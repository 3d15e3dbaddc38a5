use itertools::Itertools;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

use super::{Coupling, CostMatrix};

/// Largest instance [`exact_ot_small`] enumerates.
pub const EXACT_OT_MAX_N: usize = 7;

/// Exact OT for uniform `n × n` problems by enumerating all `n!` permutations
/// (by Birkhoff's theorem an optimum is a permutation). Returns the
/// `(1/n)`-weighted permutation coupling and its cost `⟨Γ, C⟩`.
pub fn exact_ot_small<T: Scalar>(cost: &CostMatrix<T>, p: &[T], q: &[T]) -> Result<(Coupling<T>, T)> {
    let support = cost.support();
    let n = support.n_source();
    if support.n_target() != n || n == 0 || n > EXACT_OT_MAX_N {
        return Err(Error::Unsupported(format!(
            "exact OT needs a square instance with 1 <= n <= {EXACT_OT_MAX_N}, got {}x{}",
            n,
            support.n_target()
        )));
    }
    let uniform = T::one() / T::of_usize(n);
    let tol = T::sum_tolerance();
    if p.len() != n || q.len() != n || p.iter().chain(q).any(|&x| (x - uniform).abs() > tol) {
        return Err(Error::Unsupported("exact OT needs uniform marginals".into()));
    }
    let mut best: Option<(Vec<usize>, T)> = None;
    for perm in (0..n).permutations(n) {
        let mut total = T::zero();
        let mut feasible = true;
        for (i, &j) in perm.iter().enumerate() {
            match cost.get(i, j) {
                Some(c) => total += c,
                None => {
                    feasible = false;
                    break;
                }
            }
        }
        if !feasible {
            continue;
        }
        let total = total * uniform;
        if best.as_ref().is_none_or(|(_, b)| total < *b) {
            best = Some((perm, total));
        }
    }
    let (perm, total) = best.ok_or_else(|| Error::Infeasible("support contains no permutation".into()))?;
    let mut values = vec![T::zero(); support.len()];
    for (i, &j) in perm.iter().enumerate() {
        values[support.position(i, j).expect("feasible entry")] = uniform;
    }
    let coupling = Coupling::new(support.clone(), values, p.to_vec(), q.to_vec())?;
    Ok((coupling, total))
}
