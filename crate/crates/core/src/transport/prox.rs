//! Proximal coupling update
//! `argmin_Γ ⟨Γ,C⟩ − εH(Γ) + λ‖Γ − Γ_prev‖²_F`.
//!
//! Each inner iteration first tries the fixed-point step
//! `Γ ← sinkhorn_ε(C + 2λ(Γ − Γ_prev))`, whose fixed point is the exact
//! minimizer. The step is kept only if it lowers the objective; otherwise the
//! iterate takes the majorize-minimize step from the KL majorizer
//! `λ‖Γ − Γ_m‖² ≤ 2λ·KL(Γ‖Γ_m)`, which is again an entropic OT problem with
//! regularization `ε + 2λ` and cost `C + 2λ(Γ_m − Γ_prev − log Γ_m)`.
//! The objective is therefore non-increasing across inner iterates.

use crate::error::{param, shape, Result};
use crate::scalar::{xlogx, Scalar};

use super::sinkhorn::sinkhorn_raw;
use super::{Coupling, CostMatrix, SinkhornParams};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ProxMove {
    FixedPoint,
    Majorized,
    Stay,
}

#[derive(Clone, Debug)]
pub struct ProxTrace<T> {
    pub coupling: Coupling<T>,
    /// Objective at `Γ_prev` followed by one value per inner iterate.
    pub objectives: Vec<T>,
    pub moves: Vec<ProxMove>,
}

pub fn prox_objective<T: Scalar>(cost: &CostMatrix<T>, gamma: &Coupling<T>, prev: &Coupling<T>, epsilon: T, lambda: T) -> T {
    let transport: T = gamma.values().iter().zip(cost.values()).map(|(&g, &c)| g * c).sum();
    let neg_entropy: T = gamma.values().iter().map(|&g| xlogx(g)).sum();
    let quad: T = gamma
        .values()
        .iter()
        .zip(prev.values())
        .map(|(&a, &b)| (a - b) * (a - b))
        .sum();
    transport + epsilon * neg_entropy + lambda * quad
}

pub fn prox_step<T: Scalar>(
    cost: &CostMatrix<T>,
    prev: &Coupling<T>,
    epsilon: T,
    lambda: T,
    inner_iters: usize,
    params: &SinkhornParams<T>,
) -> Result<Coupling<T>> {
    prox_step_traced(cost, prev, epsilon, lambda, inner_iters, params).map(|t| t.coupling)
}

pub fn prox_step_traced<T: Scalar>(
    cost: &CostMatrix<T>,
    prev: &Coupling<T>,
    epsilon: T,
    lambda: T,
    inner_iters: usize,
    params: &SinkhornParams<T>,
) -> Result<ProxTrace<T>> {
    if !(lambda >= T::zero()) || !lambda.is_finite() {
        return Err(param(format!("lambda must be finite and >= 0, got {lambda}")));
    }
    if inner_iters == 0 {
        return Err(param("inner_iters must be >= 1"));
    }
    if cost.support() != prev.support() {
        return Err(shape("cost and previous coupling supports differ"));
    }
    let p = prev.row_marginal();
    let q = prev.col_marginal();
    let support = cost.support();
    let two_lambda = lambda + lambda;
    let base = SinkhornParams { epsilon, ..*params };

    let mut current = prev.clone();
    let mut objective = prox_objective(cost, &current, prev, epsilon, lambda);
    let mut objectives = vec![objective];
    let mut moves = Vec::with_capacity(inner_iters);
    for _ in 0..inner_iters {
        let shifted: Vec<T> = cost
            .values()
            .iter()
            .zip(current.values())
            .zip(prev.values())
            .map(|((&c, &g), &gp)| c + two_lambda * (g - gp))
            .collect();
        let candidate = sinkhorn_raw(support, &shifted, p, q, &base)?;
        if lambda == T::zero() {
            objective = prox_objective(cost, &candidate, prev, epsilon, lambda);
            current = candidate;
            objectives.push(objective);
            moves.push(ProxMove::FixedPoint);
            continue;
        }
        let cand_obj = prox_objective(cost, &candidate, prev, epsilon, lambda);
        if cand_obj <= objective {
            current = candidate;
            objective = cand_obj;
            moves.push(ProxMove::FixedPoint);
        } else {
            let majorized: Vec<T> = shifted
                .iter()
                .zip(current.values())
                .map(|(&s, &g)| if g > T::zero() { s - two_lambda * g.ln() } else { T::infinity() })
                .collect();
            let mm_params = SinkhornParams {
                epsilon: epsilon + two_lambda,
                ..*params
            };
            let mm = sinkhorn_raw(support, &majorized, p, q, &mm_params)?;
            let mm_obj = prox_objective(cost, &mm, prev, epsilon, lambda);
            if mm_obj <= objective {
                current = mm;
                objective = mm_obj;
                moves.push(ProxMove::Majorized);
            } else {
                moves.push(ProxMove::Stay);
            }
        }
        objectives.push(objective);
    }
    Ok(ProxTrace {
        coupling: current,
        objectives,
        moves,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::Matrix;
    use crate::rng::seeded;
    use crate::transport::sinkhorn;
    use rand::Rng;

    fn random_instance(rng: &mut crate::rng::Rng64, n: usize) -> (CostMatrix<f64>, Vec<f64>) {
        let rows: Vec<Vec<f64>> = (0..n).map(|_| (0..n).map(|_| rng.random::<f64>()).collect()).collect();
        (CostMatrix::from_dense(&Matrix::from_rows(&rows).unwrap()).unwrap(), vec![1.0 / n as f64; n])
    }

    #[test]
    fn lambda_zero_matches_sinkhorn() {
        let mut rng = seeded(1);
        let (c, u) = random_instance(&mut rng, 5);
        let params = SinkhornParams::new(0.05);
        let plain = sinkhorn(&c, &u, &u, &params).unwrap();
        let prev = Coupling::independent(&u, &u).unwrap();
        let prox = prox_step(&c, &prev, 0.05, 0.0, 3, &params).unwrap();
        assert_eq!(prox, plain);
    }

    #[test]
    fn huge_lambda_stays_at_previous() {
        let mut rng = seeded(2);
        let (c, u) = random_instance(&mut rng, 5);
        let params = SinkhornParams::new(0.05);
        let (c2, _) = random_instance(&mut rng, 5);
        let prev = sinkhorn(&c2, &u, &u, &params).unwrap();
        let out = prox_step(&c, &prev, 0.05, 1e9, 5, &params).unwrap();
        let l1: f64 = out.values().iter().zip(prev.values()).map(|(a, b)| (a - b).abs()).sum();
        assert!(l1 < 1e-3, "{l1}");
        let (r, col) = out.marginal_residuals();
        assert!(r < 1e-6 && col < 1e-6);
    }

    #[test]
    fn objective_monotone_on_random_instances() {
        let mut rng = seeded(3);
        let params = SinkhornParams::new(0.05);
        for trial in 0..20 {
            let (c, u) = random_instance(&mut rng, 5);
            let (c2, _) = random_instance(&mut rng, 5);
            let prev = sinkhorn(&c2, &u, &u, &SinkhornParams::new(0.2)).unwrap();
            let lambda = [0.01, 0.3, 1.0, 10.0, 100.0][trial % 5];
            let trace = prox_step_traced(&c, &prev, 0.05, lambda, 6, &params).unwrap();
            for w in trace.objectives.windows(2) {
                assert!(w[1] <= w[0], "trial {trial}: {:?}", trace.objectives);
            }
            assert!(trace.objectives.last() < trace.objectives.first() || lambda >= 100.0);
        }
    }

    #[test]
    fn fixed_point_converges_to_prox_minimizer_for_small_lambda() {
        let mut rng = seeded(4);
        let (c, u) = random_instance(&mut rng, 4);
        let params = SinkhornParams::new(0.1);
        let prev = Coupling::independent(&u, &u).unwrap();
        let lambda = 0.02;
        let a = prox_step(&c, &prev, 0.1, lambda, 30, &params).unwrap();
        let b = prox_step(&c, &prev, 0.1, lambda, 60, &params).unwrap();
        let d: f64 = a.values().iter().zip(b.values()).map(|(x, y)| (x - y).abs()).sum();
        assert!(d < 1e-8, "{d}");
        // stationarity: Γ = sinkhorn(C + 2λ(Γ − Γ_prev))
        let shifted: Vec<f64> = c
            .values()
            .iter()
            .zip(b.values())
            .zip(prev.values())
            .map(|((c, g), gp)| c + 2.0 * lambda * (g - gp))
            .collect();
        let fp = sinkhorn_raw(c.support(), &shifted, &u, &u, &params).unwrap();
        let d: f64 = fp.values().iter().zip(b.values()).map(|(x, y)| (x - y).abs()).sum();
        assert!(d < 1e-8, "{d}");
    }

    #[test]
    fn rejects_negative_lambda() {
        let mut rng = seeded(5);
        let (c, u) = random_instance(&mut rng, 3);
        let prev = Coupling::independent(&u, &u).unwrap();
        assert!(prox_step(&c, &prev, 0.1, -1.0, 1, &SinkhornParams::new(0.1)).is_err());
        assert!(prox_step(&c, &prev, 0.1, 1.0, 0, &SinkhornParams::new(0.1)).is_err());
    }
}
