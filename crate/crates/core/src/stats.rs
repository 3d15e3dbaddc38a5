//! Distance matrices over task sets and the Mantel permutation test.

use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use itertools::Itertools;
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baselines::{
    finetune_distance, task2vec_compare, task2vec_embedding, train_network, w2_embedding_distance, PenultimateEmbedder,
    ProbeConfig,
};
use crate::coupled::{coupled_distance, uncoupled_distance, CoupledConfig};
use crate::error::{param, shape, Error, Result};
use crate::linalg::Matrix;
use crate::net::Mlp;
use crate::rng::{derive_seed, seeded};
use crate::scalar::Scalar;
use crate::tasks::LabeledTask;
use crate::transport::{w2_distance, IdentityEmbedder, W2Params};

/// Environment variable bounding worker threads.
pub const THREADS_ENV: &str = "TASKGEO_THREADS";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Coupled,
    Uncoupled,
    Finetune,
    Task2vec,
    W2Input,
    W2Embed,
}

impl Method {
    pub const ALL: [Method; 6] = [
        Method::Coupled,
        Method::Uncoupled,
        Method::Finetune,
        Method::Task2vec,
        Method::W2Input,
        Method::W2Embed,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Coupled => "coupled",
            Method::Uncoupled => "uncoupled",
            Method::Finetune => "finetune",
            Method::Task2vec => "task2vec",
            Method::W2Input => "w2_input",
            Method::W2Embed => "w2_embed",
        }
    }

    /// Whether the method's distance is symmetric by construction.
    pub fn is_symmetric(self) -> bool {
        matches!(self, Method::Task2vec | Method::W2Input | Method::W2Embed)
    }

    pub fn needs_source_network(self) -> bool {
        matches!(self, Method::Coupled | Method::Uncoupled | Method::Finetune)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| param(format!("unknown method {s:?}")))
    }
}

/// Every knob of every method. Seeds inside nested configs are overridden
/// by values derived from the run seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default, bound = "T: Scalar")]
pub struct MethodConfig<T> {
    /// Hidden widths of pretrained networks and probes.
    pub hidden: Vec<usize>,
    pub pretrain: ProbeConfig<T>,
    pub coupled: CoupledConfig<T>,
    pub task2vec_mc_samples: usize,
    pub w2_epsilon: T,
    /// Task index whose probe supplies the embedding for `w2_embed`.
    pub embed_reference: usize,
}

impl<T: Scalar> Default for MethodConfig<T> {
    fn default() -> Self {
        Self {
            hidden: vec![32],
            pretrain: ProbeConfig::default(),
            coupled: CoupledConfig::default(),
            task2vec_mc_samples: 1000,
            w2_epsilon: T::of(1e-2),
            embed_reference: 0,
        }
    }
}

impl<T: Scalar> MethodConfig<T> {
    pub fn validate(&self) -> Result<()> {
        if self.hidden.contains(&0) {
            return Err(param("hidden widths must be >= 1"));
        }
        if self.task2vec_mc_samples == 0 {
            return Err(param("task2vec_mc_samples must be >= 1"));
        }
        if !(self.w2_epsilon > T::zero()) {
            return Err(param("w2_epsilon must be positive"));
        }
        self.pretrain.validate()?;
        self.coupled.validate()
    }
}

/// Seed for the pretrained network of `task`.
pub fn pretrain_seed(seed: u64, task: &str) -> u64 {
    derive_seed(seed, &[task, "pretrain"])
}

/// Seed for the ordered pair `(source, target)` under `method`.
pub fn pair_seed(seed: u64, source: &str, target: &str, method: Method) -> u64 {
    derive_seed(seed, &[source, target, method.as_str()])
}

pub fn pretrain<T: Scalar>(task: &LabeledTask<T>, cfg: &MethodConfig<T>, seed: u64) -> Result<Mlp<T>> {
    let probe = ProbeConfig {
        seed: pretrain_seed(seed, task.name()),
        ..cfg.pretrain.clone()
    };
    train_network(task, &cfg.hidden, &probe)
}

/// One distance for an ordered pair. `w_s` is required by the trajectory
/// methods and ignored by the others.
pub fn pair_distance<T: Scalar>(
    method: Method,
    source: &LabeledTask<T>,
    target: &LabeledTask<T>,
    w_s: Option<&Mlp<T>>,
    cfg: &MethodConfig<T>,
    seed: u64,
) -> Result<T> {
    let ps = pair_seed(seed, source.name(), target.name(), method);
    let ws = || w_s.ok_or_else(|| param(format!("method {method} needs a source network")));
    match method {
        Method::Coupled => {
            let mut c = cfg.coupled.clone();
            c.train.seed = ps;
            Ok(coupled_distance(source, target, ws()?, &c)?.distance())
        }
        Method::Uncoupled => Ok(uncoupled_distance(source, target, ws()?, &cfg.coupled.train, &mut seeded(ps))?.total),
        Method::Finetune => Ok(finetune_distance(target, ws()?, &cfg.coupled.train, &mut seeded(ps))?.distance),
        Method::Task2vec => {
            let probe = task2vec_probe(cfg, seed);
            let a = task2vec_embedding(source, &cfg.hidden, &probe, cfg.task2vec_mc_samples)?;
            let b = task2vec_embedding(target, &cfg.hidden, &probe, cfg.task2vec_mc_samples)?;
            Ok(task2vec_compare(&a, &b)?.distance)
        }
        Method::W2Input => w2_distance(source, target, &IdentityEmbedder, &w2_params(cfg, seed)),
        Method::W2Embed => Err(param("w2_embed needs a reference network; use distance_matrix or w2_embedding_distance")),
    }
}

/// Penultimate-layer embedder trained on `reference`, as used by `w2_embed`.
pub fn embedding_probe<T: Scalar>(reference: &LabeledTask<T>, cfg: &MethodConfig<T>, seed: u64) -> Result<PenultimateEmbedder<T>> {
    let probe = ProbeConfig {
        seed: derive_seed(seed, &["w2_embed"]),
        ..cfg.pretrain.clone()
    };
    Ok(PenultimateEmbedder {
        net: train_network(reference, &cfg.hidden, &probe)?,
    })
}

pub(crate) fn task2vec_probe<T: Scalar>(cfg: &MethodConfig<T>, seed: u64) -> ProbeConfig<T> {
    ProbeConfig {
        seed: derive_seed(seed, &["task2vec"]),
        ..cfg.pretrain.clone()
    }
}

pub(crate) fn w2_params<T: Scalar>(cfg: &MethodConfig<T>, seed: u64) -> W2Params<T> {
    W2Params {
        seed: derive_seed(seed, &["w2"]),
        ..W2Params::new(cfg.w2_epsilon)
    }
}

/// Square matrix of distances between named tasks; row is the source.
#[derive(Clone, Debug, PartialEq)]
pub struct DistanceMatrix<T> {
    pub task_names: Vec<String>,
    pub entries: Matrix<T>,
    pub method: String,
}

impl<T: Scalar> DistanceMatrix<T> {
    pub fn new(task_names: Vec<String>, entries: Matrix<T>, method: impl Into<String>) -> Result<Self> {
        let n = task_names.len();
        if entries.rows() != n || entries.cols() != n {
            return Err(shape(format!("{n} names for a {}x{} matrix", entries.rows(), entries.cols())));
        }
        if entries.as_slice().iter().any(|v| !(v.is_finite() && *v >= T::zero())) {
            return Err(param("distance entries must be finite and >= 0"));
        }
        if task_names.iter().duplicates().next().is_some() {
            return Err(param("task names must be unique"));
        }
        Ok(Self {
            task_names,
            entries,
            method: method.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.task_names.len()
    }
    pub fn is_empty(&self) -> bool {
        self.task_names.is_empty()
    }
    pub fn get(&self, i: usize, j: usize) -> T {
        self.entries.get(i, j)
    }

    /// `max |M − Mᵀ|`.
    pub fn asymmetry(&self) -> T {
        let n = self.len();
        (0..n)
            .flat_map(|i| (0..n).map(move |j| (i, j)))
            .map(|(i, j)| (self.get(i, j) - self.get(j, i)).abs())
            .fold(T::zero(), T::max)
    }

    /// Header row `,name_0,…`; each following row starts with its task name.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec![String::new()];
        header.extend(self.task_names.iter().cloned());
        w.write_record(&header)?;
        for (i, name) in self.task_names.iter().enumerate() {
            let mut rec = vec![name.clone()];
            rec.extend(self.entries.row(i).iter().map(|v| v.to_string()));
            w.write_record(&rec)?;
        }
        w.flush().map_err(|e| Error::io("<matrix csv>", e))?;
        Ok(())
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_csv(std::io::BufWriter::new(f))
    }

    /// Reads the CSV layout of [`write_csv`](Self::write_csv); the method is
    /// taken from the file stem.
    pub fn load_csv(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut r = csv::ReaderBuilder::new().has_headers(false).from_reader(f);
        let mut records = r.records();
        let ingest = |row: usize, message: String| Error::Ingestion {
            path: path.to_path_buf(),
            row,
            message,
        };
        let header = records.next().ok_or_else(|| Error::NoRows(path.to_path_buf()))??;
        if header.get(0) != Some("") {
            return Err(ingest(1, "header must start with an empty cell".into()));
        }
        let names: Vec<String> = header.iter().skip(1).map(str::to_string).collect();
        let n = names.len();
        let mut rows = Vec::with_capacity(n);
        for (k, rec) in records.enumerate() {
            let line = k + 2;
            let rec = rec?;
            if rec.len() != n + 1 {
                return Err(ingest(line, format!("expected {} fields, found {}", n + 1, rec.len())));
            }
            if rec.get(0) != Some(names.get(k).map(String::as_str).unwrap_or("")) {
                return Err(ingest(line, "row name does not match header order".into()));
            }
            let vals = rec
                .iter()
                .skip(1)
                .map(|v| v.trim().parse::<T>().map_err(|_| ingest(line, format!("not a number: {v:?}"))))
                .collect::<Result<Vec<T>>>()?;
            rows.push(vals);
        }
        if rows.is_empty() {
            return Err(Error::NoRows(path.to_path_buf()));
        }
        if rows.len() != n {
            return Err(ingest(rows.len() + 1, format!("expected {n} rows, found {}", rows.len())));
        }
        let method = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        Self::new(names, Matrix::from_rows(&rows)?, method)
    }
}

/// Worker count from `TASKGEO_THREADS`; `None` leaves the choice to rayon.
pub fn configured_threads() -> Result<Option<usize>> {
    match std::env::var(THREADS_ENV) {
        Err(_) => Ok(None),
        Ok(v) if v.trim().is_empty() => Ok(None),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(Some(n)),
            _ => Err(Error::Config {
                path: THREADS_ENV.into(),
                message: format!("expected a positive integer, got {v:?}"),
            }),
        },
    }
}

/// Runs `f` inside a pool bounded by `TASKGEO_THREADS`.
pub fn with_pool<R: Send>(f: impl FnOnce() -> R + Send) -> Result<R> {
    let mut b = rayon::ThreadPoolBuilder::new();
    if let Some(n) = configured_threads()? {
        b = b.num_threads(n);
    }
    let pool = b.build().map_err(|e| Error::Internal(e.to_string()))?;
    Ok(pool.install(f))
}

/// Distances for every ordered pair, diagonal included. Tasks must already
/// share one label space.
pub fn distance_matrix<T: Scalar>(
    tasks: &[LabeledTask<T>],
    method: Method,
    cfg: &MethodConfig<T>,
    seed: u64,
) -> Result<DistanceMatrix<T>> {
    if tasks.len() < 2 {
        return Err(param("a distance matrix needs at least 2 tasks"));
    }
    cfg.validate()?;
    let n = tasks.len();
    let names: Vec<String> = tasks.iter().map(|t| t.name().to_string()).collect();
    if names.iter().duplicates().next().is_some() {
        return Err(param("task names must be unique"));
    }
    if tasks.iter().any(|t| t.num_classes() != tasks[0].num_classes() || t.dim() != tasks[0].dim()) {
        return Err(shape("tasks must share feature dimension and label space"));
    }
    let per_task = |i: usize, e: Error| Error::Pair {
        source_task: names[i].clone(),
        target_task: names[i].clone(),
        cause: Box::new(e),
    };
    let pairs: Vec<(usize, usize)> = (0..n).cartesian_product(0..n).collect();
    let values: Vec<Result<T>> = with_pool(|| -> Result<Vec<Result<T>>> {
        let run_pairs = |f: &(dyn Fn(usize, usize) -> Result<T> + Sync)| -> Vec<Result<T>> {
            pairs.par_iter().map(|&(i, j)| f(i, j)).collect()
        };
        Ok(match method {
            Method::Coupled | Method::Uncoupled | Method::Finetune => {
                let nets: Vec<Mlp<T>> = (0..n)
                    .into_par_iter()
                    .map(|i| pretrain(&tasks[i], cfg, seed).map_err(|e| per_task(i, e)))
                    .collect::<Result<_>>()?;
                run_pairs(&|i, j| pair_distance(method, &tasks[i], &tasks[j], Some(&nets[i]), cfg, seed))
            }
            Method::Task2vec => {
                let probe = task2vec_probe(cfg, seed);
                let emb: Vec<Vec<T>> = (0..n)
                    .into_par_iter()
                    .map(|i| {
                        task2vec_embedding(&tasks[i], &cfg.hidden, &probe, cfg.task2vec_mc_samples).map_err(|e| per_task(i, e))
                    })
                    .collect::<Result<_>>()?;
                run_pairs(&|i, j| task2vec_compare(&emb[i], &emb[j]).map(|r| r.distance))
            }
            Method::W2Input => {
                let params = w2_params(cfg, seed);
                run_pairs(&|i, j| w2_distance(&tasks[i], &tasks[j], &IdentityEmbedder, &params))
            }
            Method::W2Embed => {
                let r = cfg.embed_reference;
                if r >= n {
                    return Err(param(format!("embed_reference {r} out of range for {n} tasks")));
                }
                let emb = embedding_probe(&tasks[r], cfg, seed).map_err(|e| per_task(r, e))?;
                let params = w2_params(cfg, seed);
                run_pairs(&|i, j| w2_embedding_distance(&tasks[i], &tasks[j], &emb, &params))
            }
        })
    })??;
    let mut data = Vec::with_capacity(n * n);
    for (&(i, j), v) in pairs.iter().zip(values) {
        data.push(v.map_err(|e| Error::Pair {
            source_task: names[i].clone(),
            target_task: names[j].clone(),
            cause: Box::new(e),
        })?);
    }
    DistanceMatrix::new(names, Matrix::from_vec(n, n, data)?, method.as_str())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct MantelResult<T> {
    pub r: T,
    pub p: T,
    /// Permutations evaluated (n! in exact mode).
    pub permutations: usize,
    pub seed: u64,
    pub exact: bool,
}

/// Largest task count accepted by [`mantel_exact`].
pub const MANTEL_EXACT_MAX_N: usize = 8;

fn off_diagonal_z<T: Scalar>(m: &DistanceMatrix<T>, perm: &[usize], what: &str) -> Result<Vec<T>> {
    let n = m.len();
    let vals: Vec<T> = (0..n)
        .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
        .map(|(i, j)| m.get(perm[i], perm[j]))
        .collect();
    let k = T::of_usize(vals.len());
    let mean = vals.iter().copied().sum::<T>() / k;
    let var = vals.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / k;
    let sd = var.sqrt();
    if !(sd > T::zero()) || sd <= mean.abs() * T::epsilon() * T::of(16.0) {
        return Err(Error::Degenerate(format!("{what} has zero off-diagonal variance")));
    }
    Ok(vals.into_iter().map(|v| (v - mean) / sd).collect())
}

fn check_pair<T: Scalar>(a: &DistanceMatrix<T>, b: &DistanceMatrix<T>) -> Result<usize> {
    if a.task_names != b.task_names {
        return Err(shape("matrices must list the same tasks in the same order"));
    }
    if a.len() < 3 {
        return Err(param("the Mantel test needs n >= 3"));
    }
    Ok(a.len())
}

fn statistic<T: Scalar>(za: &[T], zb: &[T], n: usize) -> T {
    let denom = T::of_usize(n * n - n - 1);
    za.iter().zip(zb).map(|(&x, &y)| x * y).sum::<T>() / denom
}

/// `r = Σ_{i≠j} z_a z_b / (n² − n − 1)` with population z-scores of the
/// off-diagonal entries.
pub fn mantel_r<T: Scalar>(a: &DistanceMatrix<T>, b: &DistanceMatrix<T>) -> Result<T> {
    let n = check_pair(a, b)?;
    let id: Vec<usize> = (0..n).collect();
    Ok(statistic(&off_diagonal_z(a, &id, "A")?, &off_diagonal_z(b, &id, "B")?, n))
}

fn at_least<T: Scalar>(x: T, r: T) -> bool {
    x >= r - T::of(1e-12) * r.abs().max(T::one())
}

/// Sampled permutation test, `p = (1 + #{r_π ≥ r}) / (1 + n_perm)`. Rows and
/// columns of `B` are permuted together; permutation `k` is drawn from a seed
/// derived from `(seed, k)`.
pub fn mantel<T: Scalar>(a: &DistanceMatrix<T>, b: &DistanceMatrix<T>, n_perm: usize, seed: u64) -> Result<MantelResult<T>> {
    if n_perm == 0 {
        return Err(param("n_perm must be >= 1"));
    }
    let n = check_pair(a, b)?;
    let id: Vec<usize> = (0..n).collect();
    let za = off_diagonal_z(a, &id, "A")?;
    let r = statistic(&za, &off_diagonal_z(b, &id, "B")?, n);
    let hits: usize = with_pool(|| {
        (0..n_perm)
            .into_par_iter()
            .map(|k| -> Result<usize> {
                let mut perm = id.clone();
                perm.shuffle(&mut seeded(derive_seed(seed, &["mantel", &k.to_string()])));
                Ok(at_least(statistic(&za, &off_diagonal_z(b, &perm, "B")?, n), r) as usize)
            })
            .collect::<Result<Vec<usize>>>()
    })??
    .into_iter()
    .sum();
    Ok(MantelResult {
        r,
        p: T::of_usize(1 + hits) / T::of_usize(1 + n_perm),
        permutations: n_perm,
        seed,
        exact: false,
    })
}

/// Exact permutation test over all `n!` simultaneous row/column permutations,
/// `p = #{r_π ≥ r} / n!` (the identity included).
pub fn mantel_exact<T: Scalar>(a: &DistanceMatrix<T>, b: &DistanceMatrix<T>) -> Result<MantelResult<T>> {
    let n = check_pair(a, b)?;
    if n > MANTEL_EXACT_MAX_N {
        return Err(Error::Unsupported(format!("exact Mantel test limited to n <= {MANTEL_EXACT_MAX_N}")));
    }
    let id: Vec<usize> = (0..n).collect();
    let za = off_diagonal_z(a, &id, "A")?;
    let r = statistic(&za, &off_diagonal_z(b, &id, "B")?, n);
    let mut hits = 0usize;
    let mut total = 0usize;
    for perm in (0..n).permutations(n) {
        total += 1;
        if at_least(statistic(&za, &off_diagonal_z(b, &perm, "B")?, n), r) {
            hits += 1;
        }
    }
    Ok(MantelResult {
        r,
        p: T::of_usize(hits) / T::of_usize(total),
        permutations: total,
        seed: 0,
        exact: true,
    })
}
