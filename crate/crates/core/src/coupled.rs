//! Coupled transfer distance: alternate between training along the
//! displacement interpolation of a coupling and re-solving the coupling
//! against the per-pair Fisher-Rao cost it induced.

use serde::{Deserialize, Serialize};

use crate::error::{param, Error, Result};
use crate::geometry::{fr_row_increments, PathLength, WeightTrajectory};
use crate::net::{at_step, Mlp, TrainConfig};
use crate::rng::{derive_seed, seeded, Rng64};
use crate::scalar::Scalar;
use crate::tasks::{sample_displacement, sample_mixture, InterpolatedBatch, LabeledTask};
use crate::transport::{init_coupling, prox_step, Coupling, CostMatrix, Embedder, IdentityEmbedder, SinkhornParams};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default, bound = "T: Scalar")]
pub struct CoupledConfig<T> {
    pub epsilon: T,
    pub lambda: T,
    pub block_size: usize,
    pub k_max: usize,
    pub rel_tol: T,
    pub prox_inner_iters: usize,
    pub mixup: bool,
    pub train: TrainConfig<T>,
}

impl<T: Scalar> Default for CoupledConfig<T> {
    fn default() -> Self {
        Self {
            epsilon: T::of(0.05),
            lambda: T::one(),
            block_size: 16,
            k_max: 5,
            rel_tol: T::of(0.05),
            prox_inner_iters: 5,
            mixup: false,
            train: TrainConfig::default(),
        }
    }
}

impl<T: Scalar> CoupledConfig<T> {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > T::zero()) || !self.epsilon.is_finite() {
            return Err(param("epsilon must be positive"));
        }
        if !(self.lambda >= T::zero()) || !self.lambda.is_finite() {
            return Err(param("lambda must be finite and >= 0"));
        }
        if self.block_size == 0 || self.k_max == 0 || self.prox_inner_iters == 0 {
            return Err(param("block_size, k_max and prox_inner_iters must be >= 1"));
        }
        if !(self.rel_tol >= T::zero()) {
            return Err(param("rel_tol must be >= 0"));
        }
        self.train.validate()
    }

    pub fn sinkhorn(&self) -> SinkhornParams<T> {
        SinkhornParams::new(self.epsilon)
    }
}

#[derive(Clone, Debug)]
pub struct CoupledReport<T> {
    /// `L_k` for each outer iteration that ran.
    pub per_iteration_distance: Vec<T>,
    /// Coupling that drove the last trajectory.
    pub trajectory_coupling: Coupling<T>,
    /// Coupling after the last proximal update.
    pub final_coupling: Coupling<T>,
    pub final_trajectory: WeightTrajectory<T>,
    pub final_cost: CostMatrix<T>,
    pub final_length: PathLength<T>,
    pub converged: bool,
    pub config: CoupledConfig<T>,
}

impl<T: Scalar> CoupledReport<T> {
    pub fn distance(&self) -> T {
        *self.per_iteration_distance.last().expect("at least one iteration")
    }
}

/// Trains from `w_s` over the grid `τ_m = m / M`, running `inner_steps`
/// updates per grid point on batches from `draw`. Calls `visit` with every
/// batch and its per-row increments between consecutive grid checkpoints.
fn drive<T: Scalar>(
    w_s: &Mlp<T>,
    cfg: &TrainConfig<T>,
    rng: &mut Rng64,
    mut draw: impl FnMut(T, &mut Rng64) -> Result<InterpolatedBatch<T>>,
    mut visit: impl FnMut(&InterpolatedBatch<T>, &[T]),
) -> Result<(WeightTrajectory<T>, PathLength<T>)> {
    cfg.validate()?;
    let m_steps = cfg.steps;
    let mut w = w_s.clone();
    let mut checkpoints = Vec::with_capacity(m_steps + 1);
    checkpoints.push(w.clone());
    let mut increments = Vec::with_capacity(m_steps);
    for m in 0..m_steps {
        let tau = T::of_usize(m) / T::of_usize(m_steps);
        let mut batches = Vec::with_capacity(cfg.inner_steps);
        let start = w.clone();
        for s in 0..cfg.inner_steps {
            let step = m * cfg.inner_steps + s;
            let batch = draw(tau, rng)?;
            let (loss, grad) = w.loss_grad(&batch)?;
            if !loss.is_finite() {
                return Err(Error::Divergence {
                    step,
                    message: "non-finite loss".into(),
                });
            }
            w = w.sgd_step(&grad, cfg.learning_rate).map_err(|e| at_step(e, step))?;
            batches.push(batch);
        }
        let mut sum = T::zero();
        let mut rows = 0usize;
        for batch in &batches {
            let inc = fr_row_increments(&start, &w, &batch.inputs)?;
            sum += inc.iter().copied().sum::<T>();
            rows += inc.len();
            visit(batch, &inc);
        }
        increments.push(sum / T::of_usize(rows));
        checkpoints.push(w.clone());
    }
    let taus = (0..=m_steps).map(|m| T::of_usize(m) / T::of_usize(m_steps)).collect();
    Ok((WeightTrajectory::new(taus, checkpoints)?, PathLength::from_increments(increments)))
}

/// SGD along the displacement interpolation of `coupling`, accumulating the
/// per-pair Fisher-Rao cost. `C_ij` is the mean increment over visits of
/// `(i, j)` times `M`, the integral over `τ ∈ [0, 1]` of the per-pair speed;
/// pairs never visited get the mean of the visited entries.
pub fn run_trajectory<T: Scalar>(
    coupling: &Coupling<T>,
    source: &LabeledTask<T>,
    target: &LabeledTask<T>,
    w_s: &Mlp<T>,
    cfg: &TrainConfig<T>,
    mixup: bool,
    rng: &mut Rng64,
) -> Result<(WeightTrajectory<T>, CostMatrix<T>, PathLength<T>)> {
    let support = coupling.support();
    let mut sums = vec![T::zero(); support.len()];
    let mut visits = vec![0u64; support.len()];
    let (traj, length) = drive(
        w_s,
        cfg,
        rng,
        |tau, rng| sample_displacement(coupling, source, target, tau, cfg.batch_size, rng, mixup),
        |batch, inc| {
            for (pair, &v) in batch.pairs.iter().zip(inc) {
                if let (Some(i), Some(j)) = *pair {
                    let k = support.position(i, j).expect("sampled pair lies on the support");
                    sums[k] += v;
                    visits[k] += 1;
                }
            }
        },
    )?;
    let scale = T::of_usize(cfg.steps);
    let visited: Vec<T> = sums
        .iter()
        .zip(&visits)
        .filter(|(_, &n)| n > 0)
        .map(|(&s, &n)| s / T::of(n as f64) * scale)
        .collect();
    let fill = if visited.is_empty() {
        T::zero()
    } else {
        visited.iter().copied().sum::<T>() / T::of_usize(visited.len())
    };
    let values = sums
        .iter()
        .zip(&visits)
        .map(|(&s, &n)| if n > 0 { s / T::of(n as f64) * scale } else { fill })
        .collect();
    let cost = CostMatrix::with_visits(support.clone(), values, visits)?;
    Ok((traj, cost, length))
}

/// Fisher-Rao length of SGD on the mixture `(1 − τ) p_s + τ p_t`.
pub fn uncoupled_distance<T: Scalar>(
    source: &LabeledTask<T>,
    target: &LabeledTask<T>,
    w_s: &Mlp<T>,
    cfg: &TrainConfig<T>,
    rng: &mut Rng64,
) -> Result<PathLength<T>> {
    let (_, length) = drive(
        w_s,
        cfg,
        rng,
        |tau, rng| sample_mixture(source, target, tau, cfg.batch_size, rng),
        |_, _| {},
    )?;
    Ok(length)
}

/// Coupled transfer distance with an identity embedder for `Γ⁰`.
pub fn coupled_distance<T: Scalar>(
    source: &LabeledTask<T>,
    target: &LabeledTask<T>,
    w_s: &Mlp<T>,
    config: &CoupledConfig<T>,
) -> Result<CoupledReport<T>> {
    coupled_distance_with(source, target, w_s, config, &IdentityEmbedder)
}

pub fn coupled_distance_with<T: Scalar>(
    source: &LabeledTask<T>,
    target: &LabeledTask<T>,
    w_s: &Mlp<T>,
    config: &CoupledConfig<T>,
    embedder: &dyn Embedder<T>,
) -> Result<CoupledReport<T>> {
    config.validate()?;
    let params = config.sinkhorn();
    let mut coupling = init_coupling(source, target, embedder, config.block_size, &params)?;
    let seed = derive_seed(config.train.seed, &["trajectory"]);
    let mut distances: Vec<T> = Vec::with_capacity(config.k_max);
    let mut converged = false;
    let mut last = None;
    for _ in 0..config.k_max {
        let mut rng = seeded(seed);
        let (traj, cost, length) = run_trajectory(&coupling, source, target, w_s, &config.train, config.mixup, &mut rng)?;
        let next = prox_step(&cost, &coupling, config.epsilon, config.lambda, config.prox_inner_iters, &params)?;
        let l = length.total;
        let change = distances.last().map(|&prev: &T| {
            if prev > T::zero() {
                (l - prev).abs() / prev
            } else if l == T::zero() {
                T::zero()
            } else {
                T::infinity()
            }
        });
        distances.push(l);
        let driver = std::mem::replace(&mut coupling, next);
        last = Some((driver, traj, cost, length));
        if change.is_some_and(|c| c < config.rel_tol) {
            converged = true;
            break;
        }
    }
    let (trajectory_coupling, final_trajectory, final_cost, final_length) = last.expect("k_max >= 1");
    Ok(CoupledReport {
        per_iteration_distance: distances,
        trajectory_coupling,
        final_coupling: coupling,
        final_trajectory,
        final_cost,
        final_length,
        converged,
        config: config.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::fit;
    use crate::tasks::{gen_blobs, gen_rings, to_union_label_space};

    fn small_cfg(seed: u64) -> CoupledConfig<f64> {
        CoupledConfig {
            block_size: 8,
            k_max: 3,
            train: TrainConfig {
                learning_rate: 0.1,
                steps: 20,
                inner_steps: 2,
                batch_size: 16,
                seed,
            },
            ..CoupledConfig::default()
        }
    }

    fn pair() -> (LabeledTask<f64>, LabeledTask<f64>, Mlp<f64>) {
        let a = gen_blobs::<f64>(1, 2, 2, 12, 4.0).unwrap();
        let b = gen_rings::<f64>(2, 2, 12, &[1.0, 3.0]).unwrap();
        let (a, b, _) = to_union_label_space(&a, &b).unwrap();
        let net = Mlp::init(&[2, 8, a.num_classes()], 3).unwrap();
        let ws = fit(net, &a, 0.1, 200, 16, &mut seeded(4)).unwrap();
        (a, b, ws)
    }

    #[test]
    fn zero_learning_rate_is_frozen() {
        let (a, b, ws) = pair();
        let mut cfg = small_cfg(1).train;
        cfg.learning_rate = 0.0;
        let g = Coupling::independent(a.mass(), b.mass()).unwrap();
        let (traj, cost, len) = run_trajectory(&g, &a, &b, &ws, &cfg, false, &mut seeded(1)).unwrap();
        assert_eq!(len.total, 0.0);
        assert!(cost.values().iter().all(|&c| c == 0.0));
        assert_eq!(traj.len(), cfg.steps + 1);
        assert_eq!(uncoupled_distance(&a, &b, &ws, &cfg, &mut seeded(1)).unwrap().total, 0.0);
    }

    #[test]
    fn costs_are_finite_and_visits_add_up() {
        let (a, b, ws) = pair();
        let cfg = small_cfg(2).train;
        let g = Coupling::independent(a.mass(), b.mass()).unwrap();
        let (_, cost, len) = run_trajectory(&g, &a, &b, &ws, &cfg, false, &mut seeded(3)).unwrap();
        assert!(cost.values().iter().all(|c| c.is_finite() && *c >= 0.0));
        let total: u64 = cost.visit_counts().iter().sum();
        assert_eq!(total as usize, cfg.total_updates() * cfg.batch_size);
        assert!(len.total > 0.0);
        let unvisited: Vec<f64> = cost
            .values()
            .iter()
            .zip(cost.visit_counts())
            .filter(|(_, &n)| n == 0)
            .map(|(&c, _)| c)
            .collect();
        let visited: Vec<f64> = cost
            .values()
            .iter()
            .zip(cost.visit_counts())
            .filter(|(_, &n)| n > 0)
            .map(|(&c, _)| c)
            .collect();
        let mean = visited.iter().sum::<f64>() / visited.len() as f64;
        assert!(!unvisited.is_empty());
        assert!(unvisited.iter().all(|&c| (c - mean).abs() < 1e-12));
    }

    #[test]
    fn single_iteration_equals_one_trajectory() {
        let (a, b, ws) = pair();
        let mut cfg = small_cfg(5);
        cfg.k_max = 1;
        let rep = coupled_distance(&a, &b, &ws, &cfg).unwrap();
        assert_eq!(rep.per_iteration_distance.len(), 1);
        let g0 = init_coupling(&a, &b, &IdentityEmbedder, cfg.block_size, &cfg.sinkhorn()).unwrap();
        let mut rng = seeded(derive_seed(cfg.train.seed, &["trajectory"]));
        let (_, _, len) = run_trajectory(&g0, &a, &b, &ws, &cfg.train, false, &mut rng).unwrap();
        assert_eq!(rep.distance(), len.total);
        assert_eq!(rep.trajectory_coupling, g0);
        rep.final_coupling.validate().unwrap();
    }

    #[test]
    fn deterministic_and_nonnegative() {
        let (a, b, ws) = pair();
        let cfg = small_cfg(6);
        let r1 = coupled_distance(&a, &b, &ws, &cfg).unwrap();
        let r2 = coupled_distance(&a, &b, &ws, &cfg).unwrap();
        assert_eq!(r1.per_iteration_distance, r2.per_iteration_distance);
        assert_eq!(r1.final_coupling, r2.final_coupling);
        assert!(r1.per_iteration_distance.iter().all(|&d| d >= 0.0));
        if r1.converged {
            let n = r1.per_iteration_distance.len();
            let (x, y) = (r1.per_iteration_distance[n - 2], r1.per_iteration_distance[n - 1]);
            assert!((y - x).abs() / x < cfg.rel_tol);
        }
        let u1 = uncoupled_distance(&a, &b, &ws, &cfg.train, &mut seeded(9)).unwrap();
        let u2 = uncoupled_distance(&a, &b, &ws, &cfg.train, &mut seeded(9)).unwrap();
        assert_eq!(u1, u2);
    }

    #[test]
    fn self_transfer_is_short() {
        let (a, b, ws) = pair();
        let ws = fit(ws, &a, 0.1, 800, 16, &mut seeded(8)).unwrap();
        let cfg = small_cfg(7).train;
        let g_aa = Coupling::independent(a.mass(), a.mass()).unwrap();
        let aa = init_coupling(&a, &a, &IdentityEmbedder, 8, &SinkhornParams::new(0.05)).unwrap_or(g_aa);
        let (_, _, self_len) = run_trajectory(&aa, &a, &a, &ws, &cfg, false, &mut seeded(1)).unwrap();
        let ab = init_coupling(&a, &b, &IdentityEmbedder, 8, &SinkhornParams::new(0.05)).unwrap();
        let (_, _, cross) = run_trajectory(&ab, &a, &b, &ws, &cfg, false, &mut seeded(1)).unwrap();
        assert!(self_len.total < 0.1 * cross.total, "{} vs {}", self_len.total, cross.total);
    }

    #[test]
    fn divergence_names_the_step() {
        let (a, b, ws) = pair();
        let mut cfg = small_cfg(1).train;
        cfg.learning_rate = f64::MAX;
        let g = Coupling::independent(a.mass(), b.mass()).unwrap();
        match run_trajectory(&g, &a, &b, &ws, &cfg, false, &mut seeded(1)) {
            Err(Error::Divergence { step, .. }) => assert!(step < cfg.total_updates()),
            other => panic!("{:?}", other.map(|r| r.2)),
        }
    }

    #[test]
    fn config_validation() {
        let mut c = CoupledConfig::<f64>::default();
        c.validate().unwrap();
        c.epsilon = -1.0;
        assert!(c.validate().is_err());
        let c = CoupledConfig::<f64> {
            k_max: 0,
            ..CoupledConfig::default()
        };
        assert!(c.validate().is_err());
    }
}
