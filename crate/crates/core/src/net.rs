//! Feed-forward tanh network with a softmax head.
//!
//! Weights are one flat vector. Layer `l` (fan-in `n_l`, fan-out `n_{l+1}`)
//! contributes its `n_{l+1} × n_l` weight matrix in row-major order followed
//! by its `n_{l+1}` biases; layers are packed input to output.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{param, shape, Error, Result};
use crate::linalg::{argmax, Matrix};
use crate::rng::{seeded, Categorical, Rng64};
use crate::scalar::{logsumexp, Scalar};
use crate::tasks::{InterpolatedBatch, LabeledTask};

/// Identifier written into weight checkpoints.
pub const CHECKPOINT_FORMAT: &str = "taskgeo-mlp-v1";

#[derive(Clone, Debug, PartialEq)]
pub struct Mlp<T> {
    layer_sizes: Vec<usize>,
    weights: Vec<T>,
}

pub fn num_params(layer_sizes: &[usize]) -> usize {
    layer_sizes.windows(2).map(|w| (w[0] + 1) * w[1]).sum()
}

fn check_architecture(layer_sizes: &[usize]) -> Result<()> {
    if layer_sizes.len() < 2 {
        return Err(param("an MLP needs at least an input and an output layer"));
    }
    if layer_sizes.contains(&0) {
        return Err(param("layer sizes must be >= 1"));
    }
    Ok(())
}

#[derive(Clone, Copy)]
struct Layer {
    fan_in: usize,
    fan_out: usize,
    offset: usize,
}

impl Layer {
    #[inline]
    fn bias_offset(&self) -> usize {
        self.offset + self.fan_in * self.fan_out
    }
}

impl<T: Scalar> Mlp<T> {
    /// Uniform init in `[-1/√fan_in, 1/√fan_in]` for weights and biases.
    pub fn init(layer_sizes: &[usize], seed: u64) -> Result<Self> {
        check_architecture(layer_sizes)?;
        let mut rng = seeded(seed);
        let mut weights = Vec::with_capacity(num_params(layer_sizes));
        for w in layer_sizes.windows(2) {
            let scale = 1.0 / (w[0] as f64).sqrt();
            for _ in 0..(w[0] + 1) * w[1] {
                weights.push(T::of(rng.random_range(-scale..=scale)));
            }
        }
        Ok(Self {
            layer_sizes: layer_sizes.to_vec(),
            weights,
        })
    }

    pub fn from_weights(layer_sizes: &[usize], weights: Vec<T>) -> Result<Self> {
        check_architecture(layer_sizes)?;
        let p = num_params(layer_sizes);
        if weights.len() != p {
            return Err(shape(format!("{} weights for an architecture with {p} parameters", weights.len())));
        }
        if weights.iter().any(|w| !w.is_finite()) {
            return Err(param("non-finite weight"));
        }
        Ok(Self {
            layer_sizes: layer_sizes.to_vec(),
            weights,
        })
    }

    pub fn layer_sizes(&self) -> &[usize] {
        &self.layer_sizes
    }
    pub fn weights(&self) -> &[T] {
        &self.weights
    }
    pub fn num_params(&self) -> usize {
        self.weights.len()
    }
    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }
    pub fn num_classes(&self) -> usize {
        *self.layer_sizes.last().expect("nonempty")
    }

    fn layers(&self) -> impl Iterator<Item = Layer> + '_ {
        let mut offset = 0;
        self.layer_sizes.windows(2).map(move |w| {
            let l = Layer {
                fan_in: w[0],
                fan_out: w[1],
                offset,
            };
            offset += (w[0] + 1) * w[1];
            l
        })
    }

    fn n_layers(&self) -> usize {
        self.layer_sizes.len() - 1
    }

    /// Affine map of layer `l` applied to `input`.
    fn affine(&self, layer: Layer, input: &[T], out: &mut Vec<T>) {
        out.clear();
        let w = &self.weights[layer.offset..layer.bias_offset()];
        let b = &self.weights[layer.bias_offset()..layer.bias_offset() + layer.fan_out];
        for r in 0..layer.fan_out {
            let row = &w[r * layer.fan_in..(r + 1) * layer.fan_in];
            let mut acc = b[r];
            for (&wi, &xi) in row.iter().zip(input) {
                acc += wi * xi;
            }
            out.push(acc);
        }
    }

    /// Forward pass keeping every layer's output; the last entry holds logits,
    /// earlier ones tanh activations. `acts[0]` is the input.
    fn forward_trace(&self, x: &[T]) -> Vec<Vec<T>> {
        let mut acts = Vec::with_capacity(self.n_layers() + 1);
        acts.push(x.to_vec());
        let n = self.n_layers();
        for (l, layer) in self.layers().enumerate() {
            let mut z = Vec::with_capacity(layer.fan_out);
            self.affine(layer, &acts[l], &mut z);
            if l + 1 < n {
                z.iter_mut().for_each(|v| *v = v.tanh());
            }
            acts.push(z);
        }
        acts
    }

    pub fn logits(&self, x: &[T]) -> Vec<T> {
        let mut cur = x.to_vec();
        let mut next = Vec::new();
        let n = self.n_layers();
        for (l, layer) in self.layers().enumerate() {
            self.affine(layer, &cur, &mut next);
            if l + 1 < n {
                next.iter_mut().for_each(|v| *v = v.tanh());
            }
            std::mem::swap(&mut cur, &mut next);
        }
        cur
    }

    /// Activations of the last hidden layer (the input itself for a linear model).
    pub fn penultimate(&self, x: &[T]) -> Vec<T> {
        let mut acts = self.forward_trace(x);
        acts.pop();
        acts.pop().expect("input layer")
    }

    fn check_input(&self, cols: usize) -> Result<()> {
        if cols != self.input_dim() {
            return Err(shape(format!("input has {cols} columns, network expects {}", self.input_dim())));
        }
        Ok(())
    }

    pub fn log_probs_row(&self, x: &[T]) -> Vec<T> {
        log_softmax(self.logits(x))
    }

    /// Row-wise `log p_w(y|x)`.
    pub fn log_probs(&self, xs: &Matrix<T>) -> Result<Matrix<T>> {
        self.check_input(xs.cols())?;
        Matrix::with_rows(self.num_classes(), xs.iter_rows().map(|r| self.log_probs_row(r)))
    }

    /// Soft-label cross-entropy `−(1/B) Σ_rows Σ_k y_k log p_k`.
    pub fn loss(&self, xs: &Matrix<T>, ys: &Matrix<T>) -> Result<T> {
        self.check_batch(xs, ys)?;
        let total: T = xs
            .iter_rows()
            .zip(ys.iter_rows())
            .map(|(x, y)| cross_entropy(&self.log_probs_row(x), y))
            .sum();
        Ok(total / T::of_usize(xs.rows()))
    }

    fn check_batch(&self, xs: &Matrix<T>, ys: &Matrix<T>) -> Result<()> {
        self.check_input(xs.cols())?;
        if xs.rows() == 0 {
            return Err(param("empty batch"));
        }
        if ys.rows() != xs.rows() || ys.cols() != self.num_classes() {
            return Err(shape(format!(
                "labels are {}x{}, expected {}x{}",
                ys.rows(),
                ys.cols(),
                xs.rows(),
                self.num_classes()
            )));
        }
        Ok(())
    }

    /// Cross-entropy on an interpolated batch and its exact gradient.
    pub fn loss_grad(&self, batch: &InterpolatedBatch<T>) -> Result<(T, Vec<T>)> {
        self.loss_grad_xy(&batch.inputs, &batch.labels)
    }

    pub fn loss_grad_xy(&self, xs: &Matrix<T>, ys: &Matrix<T>) -> Result<(T, Vec<T>)> {
        self.check_batch(xs, ys)?;
        let scale = T::one() / T::of_usize(xs.rows());
        let mut grad = vec![T::zero(); self.weights.len()];
        let mut loss = T::zero();
        for (x, y) in xs.iter_rows().zip(ys.iter_rows()) {
            loss += self.backprop_row(x, y, scale, &mut grad);
        }
        Ok((loss * scale, grad))
    }

    /// Adds `scale · ∇_w CE(x, y)` into `grad`; returns the unscaled row loss.
    fn backprop_row(&self, x: &[T], y: &[T], scale: T, grad: &mut [T]) -> T {
        let acts = self.forward_trace(x);
        let logits = acts.last().expect("output");
        let lp = log_softmax(logits.clone());
        let row_loss = cross_entropy(&lp, y);
        let mut delta: Vec<T> = lp.iter().zip(y).map(|(&l, &yk)| (l.exp() - yk) * scale).collect();
        let layers: Vec<Layer> = self.layers().collect();
        for (l, layer) in layers.iter().enumerate().rev() {
            let input = &acts[l];
            let wo = layer.offset;
            let bo = layer.bias_offset();
            for r in 0..layer.fan_out {
                let d = delta[r];
                grad[bo + r] += d;
                let g = &mut grad[wo + r * layer.fan_in..wo + (r + 1) * layer.fan_in];
                for (gi, &xi) in g.iter_mut().zip(input) {
                    *gi += d * xi;
                }
            }
            if l == 0 {
                break;
            }
            let w = &self.weights[wo..bo];
            let mut prev = vec![T::zero(); layer.fan_in];
            for r in 0..layer.fan_out {
                let d = delta[r];
                for (pi, &wi) in prev.iter_mut().zip(&w[r * layer.fan_in..(r + 1) * layer.fan_in]) {
                    *pi += wi * d;
                }
            }
            for (pi, &a) in prev.iter_mut().zip(input) {
                *pi *= T::one() - a * a;
            }
            delta = prev;
        }
        row_loss
    }

    /// Gradient of `log p_w(class | x)`.
    pub fn grad_log_prob(&self, x: &[T], class: usize) -> Vec<T> {
        let mut y = vec![T::zero(); self.num_classes()];
        y[class] = T::one();
        let mut grad = vec![T::zero(); self.weights.len()];
        self.backprop_row(x, &y, -T::one(), &mut grad);
        grad
    }

    /// Logits and their directional derivative along `dw` (forward mode).
    pub fn logits_jvp(&self, dw: &[T], x: &[T]) -> (Vec<T>, Vec<T>) {
        let mut a = x.to_vec();
        let mut da = vec![T::zero(); x.len()];
        let n = self.n_layers();
        for (l, layer) in self.layers().enumerate() {
            let mut z = Vec::with_capacity(layer.fan_out);
            let mut dz = Vec::with_capacity(layer.fan_out);
            let bo = layer.bias_offset();
            for r in 0..layer.fan_out {
                let wrow = r * layer.fan_in + layer.offset;
                let mut acc = self.weights[bo + r];
                let mut dacc = dw[bo + r];
                for c in 0..layer.fan_in {
                    let w = self.weights[wrow + c];
                    acc += w * a[c];
                    dacc += dw[wrow + c] * a[c] + w * da[c];
                }
                z.push(acc);
                dz.push(dacc);
            }
            if l + 1 < n {
                for (v, dv) in z.iter_mut().zip(dz.iter_mut()) {
                    let t = v.tanh();
                    *dv *= T::one() - t * t;
                    *v = t;
                }
            }
            a = z;
            da = dz;
        }
        (a, da)
    }

    /// `w − lr · grad`; fails on a non-finite gradient.
    pub fn sgd_step(&self, grad: &[T], learning_rate: T) -> Result<Self> {
        if grad.len() != self.weights.len() {
            return Err(shape(format!("gradient of length {} for {} weights", grad.len(), self.weights.len())));
        }
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::Divergence {
                step: 0,
                message: "non-finite gradient".into(),
            });
        }
        let weights: Vec<T> = self.weights.iter().zip(grad).map(|(&w, &g)| w - learning_rate * g).collect();
        if weights.iter().any(|w| !w.is_finite()) {
            return Err(Error::Divergence {
                step: 0,
                message: "non-finite weights".into(),
            });
        }
        Ok(Self {
            layer_sizes: self.layer_sizes.clone(),
            weights,
        })
    }

    /// Mass-weighted fraction of rows whose predicted class matches the label argmax.
    pub fn accuracy(&self, task: &LabeledTask<T>) -> Result<T> {
        self.check_input(task.dim())?;
        if task.num_classes() != self.num_classes() {
            return Err(shape("task label width differs from network output width"));
        }
        let mut acc = T::zero();
        for ((x, y), &m) in task.features().iter_rows().zip(task.labels().iter_rows()).zip(task.mass()) {
            if argmax(&self.logits(x)) == argmax(y) {
                acc += m;
            }
        }
        Ok(acc)
    }

    pub fn same_architecture(&self, other: &Self) -> bool {
        self.layer_sizes == other.layer_sizes
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            activation: "tanh".into(),
            layer_sizes: self.layer_sizes.clone(),
            weights: self.weights.iter().map(|w| w.f64()).collect(),
        }
    }

    pub fn from_checkpoint(c: &Checkpoint) -> Result<Self> {
        if c.format != CHECKPOINT_FORMAT || c.activation != "tanh" {
            return Err(param(format!("unsupported checkpoint format {:?} / activation {:?}", c.format, c.activation)));
        }
        Self::from_weights(&c.layer_sizes, c.weights.iter().map(|&w| T::of(w)).collect())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let s = serde_json::to_string_pretty(&self.to_checkpoint())?;
        std::fs::write(path, s + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_checkpoint(&serde_json::from_str(&s)?)
    }
}

/// Serialized weights plus architecture descriptor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format: String,
    pub activation: String,
    pub layer_sizes: Vec<usize>,
    pub weights: Vec<f64>,
}

pub fn log_softmax<T: Scalar>(mut z: Vec<T>) -> Vec<T> {
    let lse = logsumexp(z.iter().copied());
    z.iter_mut().for_each(|v| *v -= lse);
    z
}

fn cross_entropy<T: Scalar>(log_p: &[T], y: &[T]) -> T {
    -log_p
        .iter()
        .zip(y)
        .filter(|(_, &yk)| yk > T::zero())
        .map(|(&l, &yk)| yk * l)
        .sum::<T>()
}

/// Categorical `KL(p_a ‖ p_b)` from log-probabilities, clamped at zero.
pub fn kl_from_log_probs<T: Scalar>(la: &[T], lb: &[T]) -> T {
    la.iter()
        .zip(lb)
        .map(|(&a, &b)| if a == T::neg_infinity() { T::zero() } else { a.exp() * (a - b) })
        .sum::<T>()
        .max(T::zero())
}

/// Per-row `KL(p_{w_a}(·|x) ‖ p_{w_b}(·|x))`.
pub fn predictive_kl<T: Scalar>(a: &Mlp<T>, b: &Mlp<T>, xs: &Matrix<T>) -> Result<Vec<T>> {
    if !a.same_architecture(b) {
        return Err(shape("networks differ in architecture"));
    }
    a.check_input(xs.cols())?;
    Ok(xs
        .iter_rows()
        .map(|x| kl_from_log_probs(&a.log_probs_row(x), &b.log_probs_row(x)))
        .collect())
}

/// SGD hyperparameters for one trajectory. `steps` is the number of grid
/// intervals on `[0, 1]`; each grid point runs `inner_steps` minibatch updates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default, bound = "T: Scalar")]
pub struct TrainConfig<T> {
    pub learning_rate: T,
    pub steps: usize,
    pub inner_steps: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl<T: Scalar> Default for TrainConfig<T> {
    fn default() -> Self {
        Self {
            learning_rate: T::of(0.1),
            steps: 200,
            inner_steps: 5,
            batch_size: 16,
            seed: 0,
        }
    }
}

impl<T: Scalar> TrainConfig<T> {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= T::zero()) || !self.learning_rate.is_finite() {
            return Err(param("learning_rate must be finite and >= 0"));
        }
        if self.steps == 0 || self.inner_steps == 0 || self.batch_size == 0 {
            return Err(param("steps, inner_steps and batch_size must be >= 1"));
        }
        Ok(())
    }

    pub fn total_updates(&self) -> usize {
        self.steps * self.inner_steps
    }
}

/// Minibatch of `batch` rows drawn from `task` by mass, with replacement.
pub fn sample_task_batch<T: Scalar>(
    task: &LabeledTask<T>,
    pick: &Categorical,
    batch: usize,
    rng: &mut Rng64,
) -> Result<(Matrix<T>, Matrix<T>)> {
    let idx: Vec<usize> = (0..batch).map(|_| pick.sample(rng)).collect();
    Ok((task.features().select_rows(&idx), task.labels().select_rows(&idx)))
}

/// Plain minibatch SGD on a single task for `updates` steps.
pub fn fit<T: Scalar>(
    mut net: Mlp<T>,
    task: &LabeledTask<T>,
    learning_rate: T,
    updates: usize,
    batch: usize,
    rng: &mut Rng64,
) -> Result<Mlp<T>> {
    if batch == 0 {
        return Err(param("batch size must be >= 1"));
    }
    let pick = Categorical::new(task.mass())?;
    for step in 0..updates {
        let (xs, ys) = sample_task_batch(task, &pick, batch, rng)?;
        let (loss, grad) = net.loss_grad_xy(&xs, &ys)?;
        if !loss.is_finite() {
            return Err(Error::Divergence {
                step,
                message: "non-finite loss".into(),
            });
        }
        net = net.sgd_step(&grad, learning_rate).map_err(|e| at_step(e, step))?;
    }
    Ok(net)
}

pub(crate) fn at_step(e: Error, step: usize) -> Error {
    match e {
        Error::Divergence { message, .. } => Error::Divergence { step, message },
        e => e,
    }
}
