use crate::error::{shape, Result};
use crate::linalg::Matrix;
use crate::rng::{seeded, Categorical};
use crate::scalar::Scalar;
use crate::tasks::LabeledTask;

use super::{sinkhorn, CostMatrix, Embedder, SinkhornParams, Support};

/// Point cap per task for the dense W2 baselines.
pub const W2_SUBSAMPLE_CAP: usize = 512;

#[derive(Clone, Copy, Debug)]
pub struct W2Params<T> {
    pub sinkhorn: SinkhornParams<T>,
    pub cap: usize,
    pub seed: u64,
}

impl<T: Scalar> W2Params<T> {
    pub fn new(epsilon: T) -> Self {
        Self {
            sinkhorn: SinkhornParams::new(epsilon),
            cap: W2_SUBSAMPLE_CAP,
            seed: 0,
        }
    }
}

/// At most `cap` rows of `task`. Larger tasks are resampled with replacement
/// in proportion to mass and given uniform weights.
pub fn subsample_by_mass<T: Scalar>(task: &LabeledTask<T>, cap: usize, seed: u64) -> Result<(Matrix<T>, Vec<T>)> {
    if task.len() <= cap {
        return Ok((task.features().clone(), task.mass().to_vec()));
    }
    let pick = Categorical::new(task.mass())?;
    let mut rng = seeded(seed);
    let idx: Vec<usize> = (0..cap).map(|_| pick.sample(&mut rng)).collect();
    Ok((task.features().select_rows(&idx), vec![T::one() / T::of_usize(cap); cap]))
}

/// Entropic `W2 = sqrt(Σ Γ*_ij ‖φ(a_i) − φ(b_j)‖²)` on the dense support.
pub fn w2_distance<T: Scalar>(
    task_a: &LabeledTask<T>,
    task_b: &LabeledTask<T>,
    embedder: &dyn Embedder<T>,
    params: &W2Params<T>,
) -> Result<T> {
    let (xa, ma) = subsample_by_mass(task_a, params.cap, params.seed)?;
    let (xb, mb) = subsample_by_mass(task_b, params.cap, params.seed)?;
    let ea = embedder.embed_all(&xa)?;
    let eb = embedder.embed_all(&xb)?;
    if ea.cols() != eb.cols() {
        return Err(shape("embedded dimensions differ"));
    }
    let cost = CostMatrix::squared_euclidean(Support::dense(ea.rows(), eb.rows()), &ea, &eb)?;
    let plan = sinkhorn(&cost, &ma, &mb, &params.sinkhorn)?;
    Ok(plan.transport_cost(&cost)?.max(T::zero()).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tasks::gen_blobs;
    use crate::transport::IdentityEmbedder;

    fn diameter(t: &LabeledTask<f64>) -> f64 {
        let x = t.features();
        let mut d: f64 = 0.0;
        for a in x.iter_rows() {
            for b in x.iter_rows() {
                d = d.max(crate::linalg::sq_dist(a, b).sqrt());
            }
        }
        d
    }

    #[test]
    fn self_distance_is_small() {
        let t = gen_blobs::<f64>(1, 3, 2, 30, 5.0).unwrap();
        let d = w2_distance(&t, &t, &IdentityEmbedder, &W2Params::new(1e-2)).unwrap();
        assert!(d < 0.05 * diameter(&t), "{d}");
    }

    #[test]
    fn translation_dominates() {
        let a = gen_blobs::<f64>(1, 2, 2, 40, 3.0).unwrap();
        let shift = [6.0, -8.0];
        let b = gen_blobs::<f64>(1, 2, 2, 40, 3.0).unwrap().translated(&shift).unwrap();
        let d = w2_distance(&a, &b, &IdentityEmbedder, &W2Params::new(1e-2)).unwrap();
        assert!((d - 10.0).abs() < 1.0, "{d}");
    }

    #[test]
    fn symmetric() {
        let a = gen_blobs::<f64>(1, 2, 2, 25, 3.0).unwrap();
        let b = gen_blobs::<f64>(2, 3, 2, 15, 4.0).unwrap();
        let p = W2Params::new(1e-2);
        let ab = w2_distance(&a, &b, &IdentityEmbedder, &p).unwrap();
        let ba = w2_distance(&b, &a, &IdentityEmbedder, &p).unwrap();
        assert!((ab - ba).abs() < 1e-6, "{ab} {ba}");
    }

    #[test]
    fn subsample_caps_points() {
        let t = gen_blobs::<f64>(1, 2, 2, 40, 3.0).unwrap();
        let (x, m) = subsample_by_mass(&t, 16, 3).unwrap();
        assert_eq!(x.rows(), 16);
        assert!((m.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let (y, _) = subsample_by_mass(&t, 16, 3).unwrap();
        assert_eq!(x, y);
    }
}
