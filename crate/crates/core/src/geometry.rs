//! Fisher-Rao lengths of weight trajectories and related diagnostics.
//!
//! The infinitesimal length between consecutive checkpoints is measured as
//! `E_x sqrt(2 KL(p_w(·|x) ‖ p_{w'}(·|x)))`, which agrees with
//! `sqrt(dwᵀ g(w) dw)` to second order.

use rand::Rng;
use serde::Serialize;

use crate::error::{param, shape, Error, Result};
use crate::linalg::{dot, Matrix};
use crate::net::{kl_from_log_probs, predictive_kl, Mlp};
use crate::rng::{Categorical, Rng64};
use crate::scalar::Scalar;
use crate::tasks::{check_coupling_matches, interpolate_into, LabeledTask};
use crate::transport::Coupling;

/// Checkpoints `w(τ_0), …, w(τ_M)` on a grid `0 = τ_0 < … < τ_M = 1`.
#[derive(Clone, Debug)]
pub struct WeightTrajectory<T> {
    taus: Vec<T>,
    checkpoints: Vec<Mlp<T>>,
}

impl<T: Scalar> WeightTrajectory<T> {
    pub fn new(taus: Vec<T>, checkpoints: Vec<Mlp<T>>) -> Result<Self> {
        if taus.len() != checkpoints.len() {
            return Err(shape("one checkpoint per grid point required"));
        }
        if taus.len() < 2 {
            return Err(param("a trajectory needs at least 2 checkpoints"));
        }
        if taus[0] != T::zero() || *taus.last().expect("nonempty") != T::one() {
            return Err(param("trajectory grid must start at 0 and end at 1"));
        }
        if taus.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(param("trajectory grid must be strictly increasing"));
        }
        if checkpoints.windows(2).any(|w| !w[0].same_architecture(&w[1])) {
            return Err(shape("checkpoints differ in architecture"));
        }
        Ok(Self { taus, checkpoints })
    }

    /// Uniform grid `τ_m = m / (len − 1)`.
    pub fn uniform(checkpoints: Vec<Mlp<T>>) -> Result<Self> {
        let m = checkpoints.len().saturating_sub(1).max(1);
        let taus = (0..checkpoints.len()).map(|k| T::of_usize(k) / T::of_usize(m)).collect();
        Self::new(taus, checkpoints)
    }

    pub fn taus(&self) -> &[T] {
        &self.taus
    }
    pub fn checkpoints(&self) -> &[Mlp<T>] {
        &self.checkpoints
    }
    pub fn len(&self) -> usize {
        self.taus.len()
    }
    pub fn is_empty(&self) -> bool {
        self.taus.is_empty()
    }
    pub fn first(&self) -> &Mlp<T> {
        &self.checkpoints[0]
    }
    pub fn last(&self) -> &Mlp<T> {
        self.checkpoints.last().expect("nonempty")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PathLength<T> {
    pub total: T,
    pub increments: Vec<T>,
}

impl<T: Scalar> PathLength<T> {
    pub fn from_increments(increments: Vec<T>) -> Self {
        let total = increments.iter().copied().sum();
        Self { total, increments }
    }
}

/// Per-row `sqrt(2 KL(p_w(·|x) ‖ p_{w_next}(·|x)))`.
pub fn fr_row_increments<T: Scalar>(w: &Mlp<T>, w_next: &Mlp<T>, xs: &Matrix<T>) -> Result<Vec<T>> {
    let two = T::of(2.0);
    Ok(predictive_kl(w, w_next, xs)?.into_iter().map(|k| (two * k).sqrt()).collect())
}

/// `mean_x sqrt(2 KL(p_w(·|x) ‖ p_{w_next}(·|x)))`.
pub fn fr_increment<T: Scalar>(w: &Mlp<T>, w_next: &Mlp<T>, xs: &Matrix<T>) -> Result<T> {
    if xs.rows() == 0 {
        return Err(param("empty input set"));
    }
    let rows = fr_row_increments(w, w_next, xs)?;
    Ok(rows.iter().copied().sum::<T>() / T::of_usize(rows.len()))
}

/// Left-point Riemann sum of [`fr_increment`] along the trajectory. The
/// sampler receives `(m, τ_m)` and returns the inputs for interval `m`.
pub fn trajectory_length<T: Scalar>(
    traj: &WeightTrajectory<T>,
    mut input_sampler: impl FnMut(usize, T) -> Result<Matrix<T>>,
) -> Result<PathLength<T>> {
    let cps = traj.checkpoints();
    let mut increments = Vec::with_capacity(cps.len() - 1);
    for m in 0..cps.len() - 1 {
        let xs = input_sampler(m, traj.taus()[m])?;
        increments.push(fr_increment(&cps[m], &cps[m + 1], &xs)?);
    }
    Ok(PathLength::from_increments(increments))
}

/// Monte Carlo diagonal of the Fisher information: `x` drawn by task mass,
/// `y ~ p_w(·|x)`, squared per-coordinate gradients of `log p_w(y|x)`.
pub fn diag_fim<T: Scalar>(w: &Mlp<T>, task: &LabeledTask<T>, mc_samples: usize, rng: &mut Rng64) -> Result<Vec<T>> {
    if mc_samples == 0 {
        return Err(param("mc_samples must be >= 1"));
    }
    if task.dim() != w.input_dim() {
        return Err(shape("task and network input dimensions differ"));
    }
    let pick = Categorical::new(task.mass())?;
    let mut acc = vec![T::zero(); w.num_params()];
    for _ in 0..mc_samples {
        let x = task.features().row(pick.sample(rng));
        let probs: Vec<T> = w.log_probs_row(x).into_iter().map(|l| l.exp()).collect();
        let y = Categorical::new(&probs)?.sample(rng);
        for (a, g) in acc.iter_mut().zip(w.grad_log_prob(x, y)) {
            *a += g * g;
        }
    }
    let n = T::of_usize(mc_samples);
    acc.iter_mut().for_each(|a| *a /= n);
    Ok(acc)
}

/// `dwᵀ g(w) dw = E_x Σ_y p_w(y|x) (dw · ∂_w log p_w(y|x))²`, computed exactly
/// over classes with forward-mode directional derivatives.
pub fn fim_quadratic<T: Scalar>(w: &Mlp<T>, dw: &[T], xs: &Matrix<T>) -> Result<T> {
    if dw.len() != w.num_params() {
        return Err(shape(format!("dw has length {}, network has {} weights", dw.len(), w.num_params())));
    }
    if xs.rows() == 0 {
        return Err(param("empty input set"));
    }
    if xs.cols() != w.input_dim() {
        return Err(shape("input dimension mismatch"));
    }
    let mut total = T::zero();
    for x in xs.iter_rows() {
        total += fim_quadratic_row(w, dw, x);
    }
    Ok(total / T::of_usize(xs.rows()))
}

fn fim_quadratic_row<T: Scalar>(w: &Mlp<T>, dw: &[T], x: &[T]) -> T {
    let (logits, tangent) = w.logits_jvp(dw, x);
    let probs: Vec<T> = crate::net::log_softmax(logits).into_iter().map(|l| l.exp()).collect();
    let mean = dot(&probs, &tangent);
    probs
        .iter()
        .zip(&tangent)
        .map(|(&p, &t)| {
            let s = t - mean;
            p * s * s
        })
        .sum()
}

/// Γ-weighted interpolated points at `tau` (no sampling): one row per
/// support entry with positive mass.
pub struct InterpolatedSet<T> {
    pub inputs: Matrix<T>,
    pub labels: Matrix<T>,
    pub weights: Vec<T>,
    pub entries: Vec<usize>,
}

pub fn interpolated_set<T: Scalar>(
    coupling: &Coupling<T>,
    source: &LabeledTask<T>,
    target: &LabeledTask<T>,
    tau: T,
    entries: Option<&[usize]>,
) -> Result<InterpolatedSet<T>> {
    check_coupling_matches(coupling, source, target)?;
    if source.num_classes() != target.num_classes() || source.dim() != target.dim() {
        return Err(shape("tasks must share feature and label spaces"));
    }
    let all: Vec<usize>;
    let entries = match entries {
        Some(e) => e,
        None => {
            all = (0..coupling.values().len()).collect();
            &all
        }
    };
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    let mut weights = Vec::new();
    let mut kept = Vec::new();
    for &k in entries {
        let g = coupling.values()[k];
        if g <= T::zero() {
            continue;
        }
        let (i, j) = coupling.support().entries()[k];
        interpolate_into(&mut xs, source.features().row(i), target.features().row(j), tau);
        interpolate_into(&mut ys, source.labels().row(i), target.labels().row(j), tau);
        weights.push(g);
        kept.push(k);
    }
    let n = weights.len();
    Ok(InterpolatedSet {
        inputs: Matrix::from_vec(n, source.dim(), xs)?,
        labels: Matrix::from_vec(n, source.num_classes(), ys)?,
        weights,
        entries: kept,
    })
}

fn weighted_loss<T: Scalar>(w: &Mlp<T>, set: &InterpolatedSet<T>) -> T {
    let mut total = T::zero();
    let mut mass = T::zero();
    for ((x, y), &g) in set.inputs.iter_rows().zip(set.labels.iter_rows()).zip(&set.weights) {
        let lp = w.log_probs_row(x);
        let ce: T = -lp.iter().zip(y).filter(|(_, &yk)| yk > T::zero()).map(|(&l, &yk)| yk * l).sum::<T>();
        total += g * ce;
        mass += g;
    }
    total / mass
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GapPoint<T> {
    pub tau: T,
    pub train_loss: T,
    pub heldout_loss: T,
}

/// Cross-entropy of `w(τ)` on two disjoint parts of the interpolated
/// distribution. Support entries of Γ are assigned to the held-out part with
/// probability `heldout_fraction`; each part's loss is its exact Γ-weighted
/// average at every grid instant.
pub fn gap_profile<T: Scalar>(
    traj: &WeightTrajectory<T>,
    coupling: &Coupling<T>,
    source: &LabeledTask<T>,
    target: &LabeledTask<T>,
    heldout_fraction: f64,
    rng: &mut Rng64,
) -> Result<Vec<GapPoint<T>>> {
    if !(heldout_fraction > 0.0 && heldout_fraction < 1.0) {
        return Err(param("heldout_fraction must lie in (0, 1)"));
    }
    let mut train = Vec::new();
    let mut held = Vec::new();
    for (k, &g) in coupling.values().iter().enumerate() {
        if g <= T::zero() {
            continue;
        }
        if rng.random::<f64>() < heldout_fraction {
            held.push(k);
        } else {
            train.push(k);
        }
    }
    if train.is_empty() || held.is_empty() {
        return Err(Error::Degenerate("train/held-out split leaves one side empty".into()));
    }
    traj.taus()
        .iter()
        .zip(traj.checkpoints())
        .map(|(&tau, w)| {
            let tr = interpolated_set(coupling, source, target, tau, Some(&train))?;
            let ho = interpolated_set(coupling, source, target, tau, Some(&held))?;
            Ok(GapPoint {
                tau,
                train_loss: weighted_loss(w, &tr),
                heldout_loss: weighted_loss(w, &ho),
            })
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum BoundOutcome<T> {
    /// `exp{−(2K/M²)(ε − 2·length)²}`.
    Bound { value: T, length: T },
    /// `ε` does not exceed `2·length`.
    PreconditionUnmet { required_epsilon: T, length: T },
}

/// Concentration bound on the average generalization gap over `checkpoints`
/// instants, with `Δτ_k sqrt(ẇᵀgẇ)` replaced by the Fisher-Rao increment
/// between consecutive selected checkpoints (expectation over the Γ-weighted
/// interpolated inputs at `τ_k`). A diagnostic, not a certified bound.
pub fn thm1_bound<T: Scalar>(
    traj: &WeightTrajectory<T>,
    coupling: &Coupling<T>,
    source: &LabeledTask<T>,
    target: &LabeledTask<T>,
    epsilon: T,
    checkpoints: usize,
    loss_bound: T,
) -> Result<BoundOutcome<T>> {
    if checkpoints < 1 {
        return Err(param("need at least one checkpoint"));
    }
    if !(loss_bound > T::zero()) {
        return Err(param("loss bound M must be positive"));
    }
    let m = traj.len() - 1;
    if checkpoints > m {
        return Err(param(format!("{checkpoints} checkpoints requested from a {m}-interval trajectory")));
    }
    let idx: Vec<usize> = (0..=checkpoints).map(|k| (k * m + checkpoints / 2) / checkpoints).collect();
    let cps = traj.checkpoints();
    let mut length = T::zero();
    for k in 1..=checkpoints {
        let set = interpolated_set(coupling, source, target, traj.taus()[idx[k]], None)?;
        let (a, b) = (&cps[idx[k - 1]], &cps[idx[k]]);
        let mut acc = T::zero();
        let mut mass = T::zero();
        for (x, &g) in set.inputs.iter_rows().zip(&set.weights) {
            let kl = kl_from_log_probs(&a.log_probs_row(x), &b.log_probs_row(x));
            acc += g * (T::of(2.0) * kl).sqrt();
            mass += g;
        }
        length += acc / mass;
    }
    let two = T::of(2.0);
    if !(epsilon > two * length) {
        return Ok(BoundOutcome::PreconditionUnmet {
            required_epsilon: two * length,
            length,
        });
    }
    let slack = epsilon - two * length;
    let value = (-(two * T::of_usize(checkpoints) / (loss_bound * loss_bound)) * slack * slack).exp();
    Ok(BoundOutcome::Bound { value, length })
}
