use crate::error::{param, shape, Error, Result};
use crate::scalar::{logsumexp, Scalar};

use super::{check_probability, Coupling, CostMatrix, Support};

#[derive(Clone, Copy, Debug)]
pub struct SinkhornParams<T> {
    pub epsilon: T,
    /// Stop once the L1 row-marginal residual falls below this (columns are
    /// exact after each sweep).
    pub tol: T,
    pub max_iter: usize,
}

/// Default L1 row-residual target, an order of magnitude inside the
/// coupling feasibility tolerance.
pub fn default_tolerance<T: Scalar>() -> T {
    T::of(1e-7).max(T::sum_tolerance())
}

impl<T: Scalar> SinkhornParams<T> {
    pub fn new(epsilon: T) -> Self {
        Self {
            epsilon,
            tol: default_tolerance(),
            max_iter: 200_000,
        }
    }

    pub fn with_tol(mut self, tol: T) -> Self {
        self.tol = tol;
        self
    }

    pub fn with_max_iter(mut self, max_iter: usize) -> Self {
        self.max_iter = max_iter;
        self
    }
}

/// Entropic OT `argmin ⟨Γ,C⟩ − εH(Γ)` over couplings of `p` and `q` on the
/// support of `cost`, solved by log-domain Sinkhorn with ε-annealing.
pub fn sinkhorn<T: Scalar>(cost: &CostMatrix<T>, p: &[T], q: &[T], params: &SinkhornParams<T>) -> Result<Coupling<T>> {
    sinkhorn_raw(cost.support(), cost.values(), p, q, params)
}

/// Accepts arbitrary real or `+inf` costs; `+inf` pins an entry to zero.
pub(crate) fn sinkhorn_raw<T: Scalar>(
    support: &Support,
    cost: &[T],
    p: &[T],
    q: &[T],
    params: &SinkhornParams<T>,
) -> Result<Coupling<T>> {
    let eps = params.epsilon;
    if !(eps > T::zero()) || !eps.is_finite() {
        return Err(param(format!("epsilon must be positive, got {eps}")));
    }
    if !(params.tol > T::zero()) {
        return Err(param("tolerance must be positive"));
    }
    let (n_s, n_t) = (support.n_source(), support.n_target());
    if p.len() != n_s || q.len() != n_t || cost.len() != support.len() {
        return Err(shape(format!(
            "marginals of length {} and {} for a {n_s}x{n_t} support",
            p.len(),
            q.len()
        )));
    }
    check_probability(p, "row marginal")?;
    check_probability(q, "column marginal")?;
    if cost.iter().any(|c| c.is_nan() || *c == T::neg_infinity()) {
        return Err(param("cost entries must be real or +inf"));
    }
    let entries = support.entries();
    for i in 0..n_s {
        if p[i] > T::zero() && !support.row(i).any(|k| cost[k] < T::infinity()) {
            return Err(Error::Infeasible(format!("row {i} has positive mass but no support")));
        }
    }
    for j in 0..n_t {
        if q[j] > T::zero() && !support.col(j).iter().any(|&k| cost[k] < T::infinity()) {
            return Err(Error::Infeasible(format!("column {j} has positive mass but no support")));
        }
    }

    let log_p: Vec<T> = p.iter().map(|&x| x.ln()).collect();
    let log_q: Vec<T> = q.iter().map(|&x| x.ln()).collect();
    let (cmin, cmax) = cost
        .iter()
        .filter(|c| c.is_finite())
        .fold((T::infinity(), T::neg_infinity()), |(lo, hi), &c| (lo.min(c), hi.max(c)));
    let range = if cmax >= cmin { cmax - cmin } else { T::zero() };

    let prob = Problem {
        support,
        cost,
        p,
        q,
        log_p: &log_p,
        log_q: &log_q,
    };
    let mut f = vec![T::zero(); n_s];
    let mut g = vec![T::zero(); n_t];
    let mut iterations = 0usize;
    let half = T::of(0.5);
    let stage_tol = T::of(1e-3).max(params.tol);
    let mut current = range.max(eps);

    loop {
        let last = current <= eps;
        let e = if last { eps } else { current };
        let target_tol = if last { params.tol } else { stage_tol };
        let mut stage_iters = 0usize;
        loop {
            prob.sweep(&mut f, &mut g, e)?;
            iterations += 1;
            stage_iters += 1;
            let mut residual = prob.row_residual(&f, &g, e);
            if residual < target_tol || (!last && stage_iters >= STAGE_ITERS) {
                break;
            }
            if last && stage_iters.is_multiple_of(NEWTON_EVERY) {
                let budget = params.max_iter.saturating_sub(iterations).min(NEWTON_STEPS);
                iterations += prob.newton_polish(&mut g, e, params.tol, budget);
                prob.sweep(&mut f, &mut g, e)?;
                residual = prob.row_residual(&f, &g, e);
                if residual < target_tol {
                    break;
                }
            }
            if iterations >= params.max_iter {
                return Err(Error::NotConverged {
                    iterations,
                    residual: residual.f64(),
                });
            }
        }
        if last {
            break;
        }
        current = (current * half).max(eps);
    }

    let values = entries
        .iter()
        .zip(cost)
        .map(|(&(i, j), &c)| plan_entry(f[i], g[j], c, eps))
        .collect();
    Ok(Coupling::from_parts_unchecked(support.clone(), values, p.to_vec(), q.to_vec()))
}

const STAGE_ITERS: usize = 50;
const NEWTON_EVERY: usize = 10;
const NEWTON_STEPS: usize = 30;

struct Problem<'a, T> {
    support: &'a Support,
    cost: &'a [T],
    p: &'a [T],
    q: &'a [T],
    log_p: &'a [T],
    log_q: &'a [T],
}

impl<T: Scalar> Problem<'_, T> {
    fn row_potential(&self, i: usize, g: &[T], e: T) -> T {
        let entries = self.support.entries();
        if self.p[i] > T::zero() {
            let lse = logsumexp(self.support.row(i).map(|k| (g[entries[k].1] - self.cost[k]) / e));
            e * (self.log_p[i] - lse)
        } else {
            T::neg_infinity()
        }
    }

    fn sweep(&self, f: &mut [T], g: &mut [T], e: T) -> Result<()> {
        let entries = self.support.entries();
        for i in 0..f.len() {
            f[i] = self.row_potential(i, g, e);
            if self.p[i] > T::zero() && !f[i].is_finite() {
                return Err(Error::Infeasible(format!("row {i} lost all support")));
            }
        }
        for j in 0..g.len() {
            g[j] = if self.q[j] > T::zero() {
                let lse = logsumexp(self.support.col(j).iter().map(|&k| (f[entries[k].0] - self.cost[k]) / e));
                if !lse.is_finite() {
                    return Err(Error::Infeasible(format!("column {j} lost all support")));
                }
                e * (self.log_q[j] - lse)
            } else {
                T::neg_infinity()
            };
        }
        Ok(())
    }

    fn row_residual(&self, f: &[T], g: &[T], e: T) -> T {
        let entries = self.support.entries();
        (0..f.len())
            .map(|i| {
                let s: T = self
                    .support
                    .row(i)
                    .map(|k| plan_entry(f[i], g[entries[k].1], self.cost[k], e))
                    .sum();
                (s - self.p[i]).abs()
            })
            .sum()
    }

    /// Plan with exact rows for column potentials `g`, and the semi-dual
    /// objective `Σ q_j g_j − ε Σ p_i lse_i`.
    fn row_exact_plan(&self, g: &[T], e: T) -> (Vec<T>, T) {
        let entries = self.support.entries();
        let mut plan = vec![T::zero(); entries.len()];
        let mut obj: T = g
            .iter()
            .zip(self.q)
            .filter(|(_, &qj)| qj > T::zero())
            .map(|(&gj, &qj)| gj * qj)
            .sum();
        for i in 0..self.p.len() {
            if self.p[i] <= T::zero() {
                continue;
            }
            let fi = self.row_potential(i, g, e);
            if !fi.is_finite() {
                return (plan, T::neg_infinity());
            }
            obj += self.p[i] * (fi - e * self.log_p[i]);
            for k in self.support.row(i) {
                plan[k] = plan_entry(fi, g[entries[k].1], self.cost[k], e);
            }
        }
        (plan, obj)
    }

    /// Column sums of `plan`, the semi-dual gradient `q − colsum` on active
    /// columns, and its L1 norm.
    fn column_gradient(&self, plan: &[T], active: &[bool]) -> (Vec<T>, Vec<T>, T) {
        let mut colsum = vec![T::zero(); self.q.len()];
        for (k, &(_, j)) in self.support.entries().iter().enumerate() {
            colsum[j] += plan[k];
        }
        let grad: Vec<T> = (0..self.q.len())
            .map(|j| if active[j] { self.q[j] - colsum[j] } else { T::zero() })
            .collect();
        let norm = grad.iter().map(|x| x.abs()).sum();
        (colsum, grad, norm)
    }

    /// Newton-CG ascent on the semi-dual in `g`. Returns the number of
    /// Newton steps taken.
    fn newton_polish(&self, g: &mut [T], e: T, tol: T, budget: usize) -> usize {
        let entries = self.support.entries();
        let n_t = g.len();
        let active: Vec<bool> = self.q.iter().map(|&x| x > T::zero()).collect();
        let n_active = T::of_usize(active.iter().filter(|&&a| a).count());
        let (mut plan, mut obj) = self.row_exact_plan(g, e);
        let mut steps = 0;
        while steps < budget {
            let (colsum, grad, gnorm) = self.column_gradient(&plan, &active);
            if gnorm < tol * T::of(0.1) {
                break;
            }
            steps += 1;
            // (−H) v = (colsum ∘ v − Γᵀ((Γ v) / p)) / ε, restricted to active columns
            let apply = |v: &[T]| -> Vec<T> {
                let mut rows = vec![T::zero(); self.p.len()];
                for (k, &(i, j)) in entries.iter().enumerate() {
                    rows[i] += plan[k] * v[j];
                }
                for (r, &pi) in rows.iter_mut().zip(self.p) {
                    *r = if pi > T::zero() { *r / pi } else { T::zero() };
                }
                let mut out: Vec<T> = (0..n_t).map(|j| colsum[j] * v[j]).collect();
                for (k, &(i, j)) in entries.iter().enumerate() {
                    out[j] -= plan[k] * rows[i];
                }
                for j in 0..n_t {
                    out[j] = if active[j] { out[j] / e } else { T::zero() };
                }
                out
            };
            let mut diag = vec![T::zero(); n_t];
            for (k, &(i, j)) in entries.iter().enumerate() {
                if self.p[i] > T::zero() {
                    diag[j] += plan[k] * plan[k] / self.p[i];
                }
            }
            let floor = T::of(1e-12) * colsum.iter().fold(T::zero(), |m, &c| m.max(c)) / e;
            let precond: Vec<T> = (0..n_t)
                .map(|j| {
                    if active[j] {
                        T::one() / ((colsum[j] - diag[j]) / e).max(floor).max(T::min_positive_value())
                    } else {
                        T::zero()
                    }
                })
                .collect();
            let d = pcg(&apply, &grad, &precond, &active, n_active);
            let slope: T = d.iter().zip(&grad).map(|(a, b)| *a * *b).sum();
            if !(slope > T::zero()) {
                break;
            }
            let mut t = T::one();
            let mut accepted = false;
            for _ in 0..40 {
                let trial: Vec<T> = g
                    .iter()
                    .zip(&d)
                    .zip(&active)
                    .map(|((&gj, &dj), &a)| if a { gj + t * dj } else { gj })
                    .collect();
                let (tp, to) = self.row_exact_plan(&trial, e);
                let sufficient = to >= obj + T::of(1e-4) * t * slope;
                // below rounding level the objective cannot rank steps; use the gradient
                let flat = obj - to <= T::of(64.0) * T::epsilon() * obj.abs().max(T::one())
                    && self.column_gradient(&tp, &active).2 < gnorm;
                if to.is_finite() && (sufficient || flat) {
                    g.copy_from_slice(&trial);
                    plan = tp;
                    obj = to;
                    accepted = true;
                    break;
                }
                t *= T::of(0.5);
            }
            if !accepted {
                break;
            }
        }
        steps
    }
}

/// Preconditioned conjugate gradients for the singular system `A x = b` on
/// the active coordinates, with the iterate kept orthogonal to constants.
fn pcg<T: Scalar>(apply: &dyn Fn(&[T]) -> Vec<T>, b: &[T], precond: &[T], active: &[bool], n_active: T) -> Vec<T> {
    let n = b.len();
    let center = |v: &mut [T]| {
        let mean = v.iter().zip(active).filter(|(_, &a)| a).map(|(x, _)| *x).sum::<T>() / n_active;
        for (x, &a) in v.iter_mut().zip(active) {
            if a {
                *x -= mean;
            }
        }
    };
    let mut x = vec![T::zero(); n];
    let mut r = b.to_vec();
    center(&mut r);
    let b_norm = dot_t(&r, &r).sqrt();
    if b_norm == T::zero() {
        return x;
    }
    let mut z: Vec<T> = r.iter().zip(precond).map(|(a, m)| *a * *m).collect();
    center(&mut z);
    let mut dir = z.clone();
    let mut rz = dot_t(&r, &z);
    for _ in 0..(4 * n).max(50) {
        let ad = apply(&dir);
        let denom = dot_t(&dir, &ad);
        if !(denom > T::zero()) {
            break;
        }
        let alpha = rz / denom;
        for k in 0..n {
            x[k] += alpha * dir[k];
            r[k] -= alpha * ad[k];
        }
        if dot_t(&r, &r).sqrt() < T::of(1e-10) * b_norm {
            break;
        }
        z = r.iter().zip(precond).map(|(a, m)| *a * *m).collect();
        center(&mut z);
        let rz_next = dot_t(&r, &z);
        let beta = rz_next / rz;
        rz = rz_next;
        for k in 0..n {
            dir[k] = z[k] + beta * dir[k];
        }
    }
    x
}

fn dot_t<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).map(|(x, y)| *x * *y).sum()
}

#[inline]
fn plan_entry<T: Scalar>(f: T, g: T, c: T, e: T) -> T {
    if f == T::neg_infinity() || g == T::neg_infinity() || c == T::infinity() {
        T::zero()
    } else {
        ((f + g - c) / e).exp()
    }
}
