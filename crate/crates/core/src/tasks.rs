//! Labeled classification tasks, synthetic generators, CSV ingestion and
//! samplers for the mixture and displacement-interpolated task families.

use std::path::Path;

use rand::Rng;
use rand_distr::{Beta, Distribution, Normal};

use crate::error::{param, shape, Error, Result};
use crate::linalg::{argmax, Matrix};
use crate::rng::{seeded, Categorical, Rng64};
use crate::scalar::Scalar;
use crate::transport::Coupling;

/// Radial noise standard deviation of [`gen_rings`].
pub const RING_NOISE: f64 = 0.1;

/// Finite weighted dataset with soft labels.
///
/// Every class carries a string identifier. Two tasks share a class exactly
/// when they carry the same identifier; [`to_union_label_space`] relies on
/// this to decide which label coordinates are common.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledTask<T> {
    name: String,
    features: Matrix<T>,
    labels: Matrix<T>,
    mass: Vec<T>,
    class_ids: Vec<String>,
    widened: bool,
}

impl<T: Scalar> LabeledTask<T> {
    /// Builds and validates a task. `mass` defaults to uniform.
    pub fn new(
        name: impl Into<String>,
        features: Matrix<T>,
        labels: Matrix<T>,
        mass: Option<Vec<T>>,
    ) -> Result<Self> {
        let name = name.into();
        let n = features.rows();
        let mass = mass.unwrap_or_else(|| vec![T::one() / T::of_usize(n.max(1)); n]);
        let class_ids = default_class_ids(&name, labels.cols());
        let t = Self {
            name,
            features,
            labels,
            mass,
            class_ids,
            widened: false,
        };
        t.validate()?;
        Ok(t)
    }

    /// Builds a task from integer class labels in `[0, num_classes)`.
    pub fn from_classes(
        name: impl Into<String>,
        features: Matrix<T>,
        classes: &[usize],
        num_classes: usize,
    ) -> Result<Self> {
        if classes.len() != features.rows() {
            return Err(shape(format!(
                "{} labels for {} feature rows",
                classes.len(),
                features.rows()
            )));
        }
        let mut labels = Matrix::zeros(classes.len(), num_classes);
        for (i, &c) in classes.iter().enumerate() {
            if c >= num_classes {
                return Err(param(format!("label {c} out of range [0, {num_classes})")));
            }
            labels.set(i, c, T::one());
        }
        Self::new(name, features, labels, None)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.features.rows();
        if n == 0 {
            return Err(param("task has no rows"));
        }
        if self.features.cols() == 0 {
            return Err(param("task has zero feature dimensions"));
        }
        if self.labels.cols() == 0 {
            return Err(param("task has zero classes"));
        }
        if self.labels.rows() != n || self.mass.len() != n {
            return Err(shape(format!(
                "features have {n} rows, labels {} and mass {}",
                self.labels.rows(),
                self.mass.len()
            )));
        }
        if self.class_ids.len() != self.labels.cols() {
            return Err(shape("class id count differs from label width"));
        }
        let mut ids = self.class_ids.clone();
        ids.sort();
        ids.dedup();
        if ids.len() != self.class_ids.len() {
            return Err(param("class ids must be distinct"));
        }
        let tol = T::sum_tolerance();
        if self.features.as_slice().iter().any(|x| !x.is_finite()) {
            return Err(param("non-finite feature value"));
        }
        for (i, row) in self.labels.iter_rows().enumerate() {
            if row.iter().any(|&v| !(v >= T::zero()) || !v.is_finite()) {
                return Err(param(format!("label row {i} has a negative or non-finite entry")));
            }
            let s: T = row.iter().copied().sum();
            if (s - T::one()).abs() > tol {
                return Err(param(format!("label row {i} sums to {s}")));
            }
        }
        if self.mass.iter().any(|&m| !(m >= T::zero()) || !m.is_finite()) {
            return Err(param("mass has a negative or non-finite entry"));
        }
        let s: T = self.mass.iter().copied().sum();
        if (s - T::one()).abs() > tol {
            return Err(param(format!("mass sums to {s}")));
        }
        Ok(())
    }

    pub fn name(&self) -> &str {
        &self.name
    }
    pub fn features(&self) -> &Matrix<T> {
        &self.features
    }
    pub fn labels(&self) -> &Matrix<T> {
        &self.labels
    }
    pub fn mass(&self) -> &[T] {
        &self.mass
    }
    pub fn class_ids(&self) -> &[String] {
        &self.class_ids
    }
    pub fn len(&self) -> usize {
        self.features.rows()
    }
    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
    pub fn dim(&self) -> usize {
        self.features.cols()
    }
    pub fn num_classes(&self) -> usize {
        self.labels.cols()
    }
    pub fn is_widened(&self) -> bool {
        self.widened
    }

    /// Argmax class per row.
    pub fn hard_labels(&self) -> Vec<usize> {
        self.labels.iter_rows().map(argmax).collect()
    }

    pub fn renamed(mut self, name: impl Into<String>) -> Self {
        self.name = name.into();
        self
    }

    /// Replaces class ids by `"{namespace}#{k}"`.
    pub fn with_label_namespace(mut self, namespace: &str) -> Self {
        self.class_ids = default_class_ids(namespace, self.num_classes());
        self
    }

    pub fn with_class_ids(mut self, ids: Vec<String>) -> Result<Self> {
        self.class_ids = ids;
        self.validate()?;
        Ok(self)
    }

    pub fn with_mass(mut self, mass: Vec<T>) -> Result<Self> {
        self.mass = mass;
        self.validate()?;
        Ok(self)
    }

    /// Adds `offset` to every feature row.
    pub fn translated(mut self, offset: &[T]) -> Result<Self> {
        if offset.len() != self.dim() {
            return Err(shape("offset length differs from feature dimension"));
        }
        for i in 0..self.len() {
            for (x, &o) in self.features.row_mut(i).iter_mut().zip(offset) {
                *x += o;
            }
        }
        Ok(self)
    }

    /// Moves label column `k` to column `perm[k]`. Class ids follow their column.
    pub fn permute_labels(mut self, perm: &[usize]) -> Result<Self> {
        let k = self.num_classes();
        let mut seen = vec![false; k];
        if perm.len() != k || perm.iter().any(|&p| p >= k || std::mem::replace(&mut seen[p], true)) {
            return Err(param("label permutation must be a permutation of 0..K"));
        }
        let mut labels = Matrix::zeros(self.len(), k);
        for i in 0..self.len() {
            for c in 0..k {
                labels.set(i, perm[c], self.labels.get(i, c));
            }
        }
        let mut ids = vec![String::new(); k];
        for c in 0..k {
            ids[perm[c]] = self.class_ids[c].clone();
        }
        self.labels = labels;
        self.class_ids = ids;
        Ok(self)
    }
}

impl<T: Scalar> LabeledTask<T> {
    /// Rows of class `k` are relabeled as class `perm[k]`; class ids keep
    /// their positions, so the task's semantics change.
    pub fn relabeled(self, perm: &[usize]) -> Result<Self> {
        let ids = self.class_ids.clone();
        let name = self.name.clone();
        self.permute_labels(perm)?.with_class_ids(ids).map(|t| t.renamed(name))
    }
}

fn default_class_ids(namespace: &str, k: usize) -> Vec<String> {
    (0..k).map(|c| format!("{namespace}#{c}")).collect()
}

fn normal(mean: f64, std: f64) -> Normal<f64> {
    Normal::new(mean, std).expect("finite normal parameters")
}

/// Isotropic unit-variance Gaussian clusters, one per class. Class means lie
/// on a circle of radius `separation` in the first two coordinates (on the
/// line `±separation` when `dim == 1`).
pub fn gen_blobs<T: Scalar>(
    seed: u64,
    classes: usize,
    dim: usize,
    per_class: usize,
    separation: f64,
) -> Result<LabeledTask<T>> {
    if classes < 2 {
        return Err(param("blobs need at least 2 classes"));
    }
    if per_class == 0 || dim == 0 {
        return Err(param("blobs need per_class >= 1 and dim >= 1"));
    }
    if !(separation > 0.0) || !separation.is_finite() {
        return Err(param("separation must be positive"));
    }
    if dim == 1 && classes > 2 {
        return Err(param("dim = 1 supports only 2 classes"));
    }
    let mut rng = seeded(seed);
    let noise = normal(0.0, 1.0);
    let mut rows = Vec::with_capacity(classes * per_class);
    let mut ys = Vec::with_capacity(classes * per_class);
    for c in 0..classes {
        let mut mean = vec![0.0; dim];
        if dim == 1 {
            mean[0] = if c == 0 { -separation } else { separation };
        } else {
            let angle = 2.0 * std::f64::consts::PI * c as f64 / classes as f64;
            mean[0] = separation * angle.cos();
            mean[1] = separation * angle.sin();
        }
        for _ in 0..per_class {
            rows.push(
                mean.iter()
                    .map(|&m| T::of(m + noise.sample(&mut rng)))
                    .collect::<Vec<T>>(),
            );
            ys.push(c);
        }
    }
    let name = format!("blobs{classes}");
    LabeledTask::from_classes(name, Matrix::from_rows(&rows)?, &ys, classes)
}

/// Concentric annuli in the plane, class `k` at radius `radii[k]` with
/// Gaussian radial noise of standard deviation [`RING_NOISE`].
pub fn gen_rings<T: Scalar>(seed: u64, classes: usize, per_class: usize, radii: &[f64]) -> Result<LabeledTask<T>> {
    if classes < 2 || per_class == 0 {
        return Err(param("rings need at least 2 classes and per_class >= 1"));
    }
    if radii.len() != classes {
        return Err(param(format!("{} radii for {classes} classes", radii.len())));
    }
    if radii.iter().any(|r| !(*r > 0.0) || !r.is_finite()) || radii.windows(2).any(|w| w[1] <= w[0]) {
        return Err(param("radii must be positive and strictly increasing"));
    }
    let mut rng = seeded(seed);
    let noise = normal(0.0, RING_NOISE);
    let mut rows = Vec::with_capacity(classes * per_class);
    let mut ys = Vec::with_capacity(classes * per_class);
    for (c, &r) in radii.iter().enumerate() {
        for _ in 0..per_class {
            let angle = rng.random::<f64>() * 2.0 * std::f64::consts::PI;
            let rad = r + noise.sample(&mut rng);
            rows.push(vec![T::of(rad * angle.cos()), T::of(rad * angle.sin())]);
            ys.push(c);
        }
    }
    LabeledTask::from_classes(format!("rings{classes}"), Matrix::from_rows(&rows)?, &ys, classes)
}

/// Reads a task from `f0,...,f{d-1},label` CSV. The task name is the file stem.
pub fn load_csv<T: Scalar>(path: impl AsRef<Path>) -> Result<LabeledTask<T>> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(file);
    let ingest = |row: usize, message: String| Error::Ingestion {
        path: path.to_path_buf(),
        row,
        message,
    };
    let header = rdr.headers().map_err(|e| ingest(1, e.to_string()))?.clone();
    let width = header.len();
    if width < 2 {
        return Err(ingest(1, "header needs at least one feature and a label column".into()));
    }
    for (k, h) in header.iter().take(width - 1).enumerate() {
        if h.trim() != format!("f{k}") {
            return Err(ingest(1, format!("expected header f{k}, found {h:?}")));
        }
    }
    if header.get(width - 1).map(str::trim) != Some("label") {
        return Err(ingest(1, "last header column must be `label`".into()));
    }
    let d = width - 1;
    let mut rows = Vec::new();
    let mut classes = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line() as usize);
            ingest(line, e.to_string())
        })?;
        let line = rec.position().map_or(rows.len() + 2, |p| p.line() as usize);
        if rec.len() != width {
            return Err(ingest(line, format!("expected {width} fields, found {}", rec.len())));
        }
        let mut feats = Vec::with_capacity(d);
        for k in 0..d {
            let s = rec[k].trim();
            let v: T = s
                .parse()
                .map_err(|_| ingest(line, format!("field f{k}: cannot parse {s:?} as a number")))?;
            if !v.is_finite() {
                return Err(ingest(line, format!("field f{k}: non-finite value")));
            }
            feats.push(v);
        }
        let s = rec[d].trim();
        let label: usize = s
            .parse()
            .map_err(|_| ingest(line, format!("label {s:?} is not a non-negative integer")))?;
        rows.push(feats);
        classes.push(label);
    }
    if rows.is_empty() {
        return Err(Error::NoRows(path.to_path_buf()));
    }
    let k = classes.iter().max().map_or(0, |m| m + 1);
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "task".into());
    LabeledTask::from_classes(name, Matrix::from_rows(&rows)?, &classes, k)
}

/// Writes a task as CSV; soft labels are written as their argmax class.
pub fn write_csv<T: Scalar>(task: &LabeledTask<T>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(file);
    let mut header: Vec<String> = (0..task.dim()).map(|k| format!("f{k}")).collect();
    header.push("label".into());
    w.write_record(&header)?;
    for (row, class) in task.features.iter_rows().zip(task.hard_labels()) {
        let mut rec: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        rec.push(class.to_string());
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Keeps rows whose argmax class is in `class_indices`; labels are re-encoded
/// onto the kept classes in the given order, mass is renormalized.
pub fn subset<T: Scalar>(task: &LabeledTask<T>, class_indices: &[usize]) -> Result<LabeledTask<T>> {
    if task.widened {
        return Err(Error::AlreadyWidened(task.name.clone()));
    }
    let k = task.num_classes();
    if class_indices.is_empty() {
        return Err(param("class selection is empty"));
    }
    let mut seen = vec![false; k];
    for &c in class_indices {
        if c >= k {
            return Err(param(format!("class {c} out of range [0, {k})")));
        }
        if std::mem::replace(&mut seen[c], true) {
            return Err(param(format!("class {c} selected twice")));
        }
    }
    let keep: Vec<usize> = task
        .hard_labels()
        .iter()
        .enumerate()
        .filter(|(_, c)| seen[**c])
        .map(|(i, _)| i)
        .collect();
    if keep.is_empty() {
        return Err(param("no rows belong to the selected classes"));
    }
    let features = task.features.select_rows(&keep);
    let mut labels = Matrix::zeros(keep.len(), class_indices.len());
    for (r, &i) in keep.iter().enumerate() {
        let s: T = class_indices.iter().map(|&c| task.labels.get(i, c)).sum();
        for (nc, &c) in class_indices.iter().enumerate() {
            labels.set(r, nc, task.labels.get(i, c) / s);
        }
    }
    let raw: Vec<T> = keep.iter().map(|&i| task.mass[i]).collect();
    let total: T = raw.iter().copied().sum();
    let mass = if total > T::zero() {
        raw.iter().map(|&m| m / total).collect()
    } else {
        vec![T::one() / T::of_usize(keep.len()); keep.len()]
    };
    let out = LabeledTask {
        name: format!("{}[{}]", task.name, class_indices.iter().map(|c| c.to_string()).collect::<Vec<_>>().join(",")),
        features,
        labels,
        mass,
        class_ids: class_indices.iter().map(|&c| task.class_ids[c].clone()).collect(),
        widened: false,
    };
    out.validate()?;
    Ok(out)
}

/// Embeds both tasks into the union of their class-id sets.
///
/// Source classes occupy the first `K_s` coordinates in their own order;
/// target classes not present in the source follow in target order. With
/// disjoint class ids this is `K_u = K_s + K_t` with source labels in the
/// first `K_s` and target labels in the last `K_t` coordinates.
pub fn to_union_label_space<T: Scalar>(
    source: &LabeledTask<T>,
    target: &LabeledTask<T>,
) -> Result<(LabeledTask<T>, LabeledTask<T>, usize)> {
    let mut out = to_common_label_space(&[source.clone(), target.clone()])?;
    let t = out.pop().expect("two tasks");
    let s = out.pop().expect("two tasks");
    let ku = s.num_classes();
    Ok((s, t, ku))
}

/// Union label space over any number of tasks, classes ordered by first
/// appearance.
pub fn to_common_label_space<T: Scalar>(tasks: &[LabeledTask<T>]) -> Result<Vec<LabeledTask<T>>> {
    let mut union: Vec<String> = Vec::new();
    for t in tasks {
        if t.widened {
            return Err(Error::AlreadyWidened(t.name.clone()));
        }
        for id in &t.class_ids {
            if !union.contains(id) {
                union.push(id.clone());
            }
        }
    }
    let ku = union.len();
    let widen = |t: &LabeledTask<T>| -> LabeledTask<T> {
        let map: Vec<usize> = t
            .class_ids
            .iter()
            .map(|id| union.iter().position(|u| u == id).expect("id in union"))
            .collect();
        let mut labels = Matrix::zeros(t.len(), ku);
        for i in 0..t.len() {
            for (c, &u) in map.iter().enumerate() {
                labels.set(i, u, t.labels.get(i, c));
            }
        }
        LabeledTask {
            name: t.name.clone(),
            features: t.features.clone(),
            labels,
            mass: t.mass.clone(),
            class_ids: union.clone(),
            widened: true,
        }
    };
    Ok(tasks.iter().map(widen).collect())
}

/// Rows drawn from an interpolated task at time `tau`.
#[derive(Clone, Debug)]
pub struct InterpolatedBatch<T> {
    pub inputs: Matrix<T>,
    pub labels: Matrix<T>,
    /// (source index, target index); `None` on the side that was not drawn.
    pub pairs: Vec<(Option<usize>, Option<usize>)>,
    pub lambdas: Vec<T>,
    pub tau: T,
}

impl<T: Scalar> InterpolatedBatch<T> {
    pub fn len(&self) -> usize {
        self.inputs.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Concatenates batches drawn at the same instant.
    pub fn concat(batches: &[InterpolatedBatch<T>]) -> Result<Self> {
        let first = batches.first().ok_or_else(|| param("no batches"))?;
        let d = first.inputs.cols();
        let k = first.labels.cols();
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        let mut pairs = Vec::new();
        let mut lambdas = Vec::new();
        for b in batches {
            if b.inputs.cols() != d || b.labels.cols() != k {
                return Err(shape("batches disagree on width"));
            }
            xs.extend_from_slice(b.inputs.as_slice());
            ys.extend_from_slice(b.labels.as_slice());
            pairs.extend_from_slice(&b.pairs);
            lambdas.extend_from_slice(&b.lambdas);
        }
        let n = pairs.len();
        Ok(Self {
            inputs: Matrix::from_vec(n, d, xs)?,
            labels: Matrix::from_vec(n, k, ys)?,
            pairs,
            lambdas,
            tau: first.tau,
        })
    }
}

fn check_tau<T: Scalar>(tau: T) -> Result<()> {
    if !(tau >= T::zero() && tau <= T::one()) {
        return Err(param(format!("tau = {tau} outside [0, 1]")));
    }
    Ok(())
}

fn check_shared<T: Scalar>(source: &LabeledTask<T>, target: &LabeledTask<T>) -> Result<()> {
    if source.num_classes() != target.num_classes() {
        return Err(shape(format!(
            "label widths differ ({} vs {}); map both tasks into a shared label space first",
            source.num_classes(),
            target.num_classes()
        )));
    }
    if source.dim() != target.dim() {
        return Err(shape(format!("feature dimensions differ ({} vs {})", source.dim(), target.dim())));
    }
    Ok(())
}

/// Draws from `(1 - tau) p_s + tau p_t`: each row comes from the target with
/// probability `tau` and from the source otherwise, mass-weighted within each.
pub fn sample_mixture<T: Scalar>(
    source: &LabeledTask<T>,
    target: &LabeledTask<T>,
    tau: T,
    batch: usize,
    rng: &mut Rng64,
) -> Result<InterpolatedBatch<T>> {
    check_tau(tau)?;
    check_shared(source, target)?;
    if batch == 0 {
        return Err(param("batch size must be >= 1"));
    }
    let cs = Categorical::new(source.mass())?;
    let ct = Categorical::new(target.mass())?;
    let tau64 = tau.f64();
    let (d, k) = (source.dim(), source.num_classes());
    let mut xs = Vec::with_capacity(batch * d);
    let mut ys = Vec::with_capacity(batch * k);
    let mut pairs = Vec::with_capacity(batch);
    let mut lambdas = Vec::with_capacity(batch);
    for _ in 0..batch {
        if rng.random::<f64>() < tau64 {
            let j = ct.sample(rng);
            xs.extend_from_slice(target.features.row(j));
            ys.extend_from_slice(target.labels.row(j));
            pairs.push((None, Some(j)));
            lambdas.push(T::one());
        } else {
            let i = cs.sample(rng);
            xs.extend_from_slice(source.features.row(i));
            ys.extend_from_slice(source.labels.row(i));
            pairs.push((Some(i), None));
            lambdas.push(T::zero());
        }
    }
    Ok(InterpolatedBatch {
        inputs: Matrix::from_vec(batch, d, xs)?,
        labels: Matrix::from_vec(batch, k, ys)?,
        pairs,
        lambdas,
        tau,
    })
}

/// Lower clamp for the mixup Beta shape parameter.
pub const BETA_SHAPE_FLOOR: f64 = 1e-3;

/// Draws pairs `(i, j)` with probability `Γ_ij` and returns the displacement
/// interpolation `((1-λ) x_i + λ x_j, (1-λ) y_i + λ y_j)`.
///
/// `λ = tau` unless `mixup`, in which case `λ ~ Beta(α, 1-α)` per row with
/// `α = clamp(tau, 1e-3, 1 - 1e-3)`.
pub fn sample_displacement<T: Scalar>(
    coupling: &Coupling<T>,
    source: &LabeledTask<T>,
    target: &LabeledTask<T>,
    tau: T,
    batch: usize,
    rng: &mut Rng64,
    mixup: bool,
) -> Result<InterpolatedBatch<T>> {
    check_tau(tau)?;
    check_shared(source, target)?;
    check_coupling_matches(coupling, source, target)?;
    if batch == 0 {
        return Err(param("batch size must be >= 1"));
    }
    let pick = Categorical::new(coupling.values()).map_err(|_| param("coupling has no positive entries"))?;
    let beta = if mixup {
        let a = tau.f64().clamp(BETA_SHAPE_FLOOR, 1.0 - BETA_SHAPE_FLOOR);
        Some(Beta::new(a, 1.0 - a).map_err(|e| param(e.to_string()))?)
    } else {
        None
    };
    let entries = coupling.support().entries();
    let (d, k) = (source.dim(), source.num_classes());
    let mut xs = Vec::with_capacity(batch * d);
    let mut ys = Vec::with_capacity(batch * k);
    let mut pairs = Vec::with_capacity(batch);
    let mut lambdas = Vec::with_capacity(batch);
    for _ in 0..batch {
        let (i, j) = entries[pick.sample(rng)];
        let lam = match &beta {
            Some(b) => T::of(b.sample(rng)),
            None => tau,
        };
        interpolate_into(&mut xs, source.features.row(i), target.features.row(j), lam);
        interpolate_into(&mut ys, source.labels.row(i), target.labels.row(j), lam);
        pairs.push((Some(i), Some(j)));
        lambdas.push(lam);
    }
    Ok(InterpolatedBatch {
        inputs: Matrix::from_vec(batch, d, xs)?,
        labels: Matrix::from_vec(batch, k, ys)?,
        pairs,
        lambdas,
        tau,
    })
}

pub(crate) fn interpolate_into<T: Scalar>(out: &mut Vec<T>, a: &[T], b: &[T], lam: T) {
    let one_minus = T::one() - lam;
    out.extend(a.iter().zip(b).map(|(&x, &y)| one_minus * x + lam * y));
}

pub(crate) fn check_coupling_matches<T: Scalar>(
    coupling: &Coupling<T>,
    source: &LabeledTask<T>,
    target: &LabeledTask<T>,
) -> Result<()> {
    if coupling.n_source() != source.len() || coupling.n_target() != target.len() {
        return Err(shape(format!(
            "coupling is {}x{}, tasks have {} and {} rows",
            coupling.n_source(),
            coupling.n_target(),
            source.len(),
            target.len()
        )));
    }
    let l1 = |a: &[T], b: &[T]| a.iter().zip(b).map(|(&x, &y)| (x - y).abs()).sum::<T>();
    let tol = T::of(1e-6).max(T::sum_tolerance());
    if l1(coupling.row_marginal(), source.mass()) > tol || l1(coupling.col_marginal(), target.mass()) > tol {
        return Err(shape("coupling marginals do not match task masses"));
    }
    Ok(())
}
