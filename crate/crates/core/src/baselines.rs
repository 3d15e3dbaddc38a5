//! Reference task distances: fine-tuning length, Task2Vec and embedding W2.

use serde::{Deserialize, Serialize};

use crate::error::{param, Error, Result};
use crate::geometry::diag_fim;
use crate::linalg::norm2;
use crate::net::{at_step, fit, sample_task_batch, Mlp, TrainConfig};
use crate::rng::{derive_seed, seeded, Categorical, Rng64};
use crate::scalar::Scalar;
use crate::tasks::LabeledTask;
use crate::transport::{w2_distance, Embedder, W2Params};

/// Number of accuracy evaluations along a fine-tuning run.
pub const FINETUNE_EVALUATIONS: usize = 20;
/// Fraction of the final accuracy at which fine-tuning is truncated.
pub const FINETUNE_ACCURACY_FRACTION: f64 = 0.95;

/// Supervised training schedule for pretraining and probes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default, bound = "T: Scalar")]
pub struct ProbeConfig<T> {
    pub learning_rate: T,
    pub updates: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl<T: Scalar> Default for ProbeConfig<T> {
    fn default() -> Self {
        Self {
            learning_rate: T::of(0.1),
            updates: 2000,
            batch_size: 32,
            seed: 0,
        }
    }
}

impl<T: Scalar> ProbeConfig<T> {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > T::zero()) || !self.learning_rate.is_finite() {
            return Err(param("probe learning_rate must be positive"));
        }
        if self.batch_size == 0 {
            return Err(param("probe batch_size must be >= 1"));
        }
        Ok(())
    }
}

/// Fresh network with the given architecture trained on `task`. Input and
/// output sizes are taken from the task; `hidden` lists the hidden widths.
pub fn train_network<T: Scalar>(task: &LabeledTask<T>, hidden: &[usize], cfg: &ProbeConfig<T>) -> Result<Mlp<T>> {
    cfg.validate()?;
    let mut sizes = vec![task.dim()];
    sizes.extend_from_slice(hidden);
    sizes.push(task.num_classes());
    let net = Mlp::init(&sizes, derive_seed(cfg.seed, &["init"]))?;
    let mut rng = seeded(derive_seed(cfg.seed, &["sgd"]));
    fit(net, task, cfg.learning_rate, cfg.updates, cfg.batch_size, &mut rng)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FinetuneReport<T> {
    pub distance: T,
    /// Euclidean length of the whole run.
    pub full_length: T,
    /// SGD step at which the length was truncated.
    pub truncation_step: usize,
    pub final_accuracy: T,
    /// `(step, accuracy)` at each evaluation point, starting at step 0.
    pub accuracies: Vec<(usize, T)>,
}

/// Euclidean weight-space length of plain SGD on `target` from `w_s`, up to
/// the first evaluation whose target accuracy reaches 95% of the final one.
pub fn finetune_distance<T: Scalar>(
    target: &LabeledTask<T>,
    w_s: &Mlp<T>,
    cfg: &TrainConfig<T>,
    rng: &mut Rng64,
) -> Result<FinetuneReport<T>> {
    cfg.validate()?;
    let total = cfg.total_updates();
    let interval = total.div_ceil(FINETUNE_EVALUATIONS).max(1);
    let pick = Categorical::new(target.mass())?;
    let mut w = w_s.clone();
    let mut steps = Vec::with_capacity(total);
    let mut accuracies = vec![(0, w.accuracy(target)?)];
    for step in 0..total {
        let (xs, ys) = sample_task_batch(target, &pick, cfg.batch_size, rng)?;
        let (loss, grad) = w.loss_grad_xy(&xs, &ys)?;
        if !loss.is_finite() {
            return Err(Error::Divergence {
                step,
                message: "non-finite loss".into(),
            });
        }
        let next = w.sgd_step(&grad, cfg.learning_rate).map_err(|e| at_step(e, step))?;
        let delta: Vec<T> = next.weights().iter().zip(w.weights()).map(|(&a, &b)| a - b).collect();
        steps.push(norm2(&delta));
        w = next;
        if (step + 1) % interval == 0 || step + 1 == total {
            accuracies.push((step + 1, w.accuracy(target)?));
        }
    }
    let final_accuracy = accuracies.last().expect("nonempty").1;
    let threshold = final_accuracy * T::of(FINETUNE_ACCURACY_FRACTION);
    let truncation_step = accuracies
        .iter()
        .find(|(_, a)| *a >= threshold)
        .map(|&(s, _)| s)
        .unwrap_or(total);
    Ok(FinetuneReport {
        distance: steps[..truncation_step].iter().fold(T::zero(), |acc, &s| acc + s),
        full_length: steps.iter().copied().sum(),
        truncation_step,
        final_accuracy,
        accuracies,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Task2VecResult<T> {
    /// `(1 − cos) / 2`.
    pub distance: T,
    pub cosine: T,
}

/// Cosine distance between diagonal-FIM embeddings of two probes with the
/// same architecture, initialization and SGD seed. The Monte Carlo stream of
/// each task is seeded identically, so the result does not depend on
/// argument order.
pub fn task2vec_distance<T: Scalar>(
    task_a: &LabeledTask<T>,
    task_b: &LabeledTask<T>,
    hidden: &[usize],
    probe: &ProbeConfig<T>,
    mc_samples: usize,
) -> Result<Task2VecResult<T>> {
    let ea = task2vec_embedding(task_a, hidden, probe, mc_samples)?;
    let eb = task2vec_embedding(task_b, hidden, probe, mc_samples)?;
    task2vec_compare(&ea, &eb)
}

/// Diagonal FIM of a probe trained on `task`.
pub fn task2vec_embedding<T: Scalar>(
    task: &LabeledTask<T>,
    hidden: &[usize],
    probe: &ProbeConfig<T>,
    mc_samples: usize,
) -> Result<Vec<T>> {
    let net = train_network(task, hidden, probe)?;
    let mut rng = seeded(derive_seed(probe.seed, &["fim"]));
    diag_fim(&net, task, mc_samples, &mut rng)
}

pub fn task2vec_compare<T: Scalar>(a: &[T], b: &[T]) -> Result<Task2VecResult<T>> {
    if a.len() != b.len() {
        return Err(crate::error::shape("task embeddings differ in length"));
    }
    let (na, nb) = (norm2(a), norm2(b));
    if na == T::zero() || nb == T::zero() {
        return Err(Error::Degenerate("zero Fisher embedding".into()));
    }
    let cosine = (crate::linalg::dot(a, b) / (na * nb)).max(-T::one()).min(T::one());
    Ok(Task2VecResult {
        distance: (T::one() - cosine) / T::of(2.0),
        cosine,
    })
}

/// Penultimate-layer activations of a fixed network.
#[derive(Clone, Debug)]
pub struct PenultimateEmbedder<T> {
    pub net: Mlp<T>,
}

impl<T: Scalar> Embedder<T> for PenultimateEmbedder<T> {
    fn embed(&self, x: &[T]) -> Vec<T> {
        self.net.penultimate(x)
    }
}

pub fn w2_embedding_distance<T: Scalar>(
    task_a: &LabeledTask<T>,
    task_b: &LabeledTask<T>,
    embedder: &dyn Embedder<T>,
    params: &W2Params<T>,
) -> Result<T> {
    w2_distance(task_a, task_b, embedder, params)
}
