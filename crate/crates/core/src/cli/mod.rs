//! Command-line driver: `gen`, `pretrain`, `dist`, `matrix` and `mantel`.
//!
//! Every run is reproducible from its `report.json`, which embeds the
//! effective configuration. Failures print one JSON object on stderr; usage
//! errors exit with status 2, all other failures with status 1.

pub mod config;
pub mod report;

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use crate::baselines::{finetune_distance, task2vec_compare, task2vec_embedding, w2_embedding_distance};
use crate::coupled::{coupled_distance, uncoupled_distance};
use crate::error::{shape, Error, Result};
use crate::geometry::gap_profile;
use crate::net::Mlp;
use crate::rng::{derive_seed, seeded};
use crate::stats::{
    distance_matrix, embedding_probe, mantel, mantel_exact, pair_seed, pretrain, task2vec_probe, w2_params,
    with_pool, DistanceMatrix, Method,
};
use crate::tasks::{gen_blobs, gen_rings, subset, write_csv, LabeledTask};
use crate::transport::{w2_distance, IdentityEmbedder};

pub use config::{load_tasks, parse_config, parse_config_str, LabelSpace, RunConfig};
pub use report::{write_report, Artifact, Report, REPORT_FORMAT};

/// Share of coupling support entries held out for the generalization-gap profile.
pub const HELDOUT_FRACTION: f64 = 0.2;

#[derive(Parser, Debug)]
#[command(name = "taskgeo", version, about = "Coupled transfer distances between classification tasks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write synthetic task CSVs.
    Gen(GenArgs),
    /// Train and checkpoint the source network.
    Pretrain(PretrainArgs),
    /// One distance for one ordered pair of tasks.
    Dist(DistArgs),
    /// Distances for all ordered pairs of a task list.
    Matrix(MatrixArgs),
    /// Mantel test between two distance-matrix CSVs.
    Mantel(MantelArgs),
}

#[derive(Args, Debug)]
struct Common {
    /// JSON run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(short = 'o', long = "out")]
    out: Option<PathBuf>,
    /// Overwrite existing output files.
    #[arg(long)]
    force: bool,
    #[arg(long, value_enum)]
    label_space: Option<LabelSpace>,
}

impl Common {
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => parse_config(p)?,
            None => RunConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(o) = &self.out {
            cfg.out = Some(o.clone());
        }
        if let Some(l) = self.label_space {
            cfg.label_space = l;
        }
        Ok(cfg)
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Preset {
    Blobs2,
    Blobs3,
    /// `blobs3` together with its two-class subset.
    Blobs3Subset,
    Rings2,
    /// `blobs2` and `rings2`.
    BlobsRings,
    /// `blobs3`, its subset, `rings2` and a translated copy of `blobs3`.
    Grid,
}

#[derive(Args, Debug)]
struct GenArgs {
    #[arg(long, value_enum)]
    preset: Preset,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Points per class; presets default to 100 (two classes) or 60 (three).
    #[arg(long)]
    per_class: Option<usize>,
    #[arg(short = 'o', long = "out")]
    out: PathBuf,
    #[arg(long)]
    force: bool,
}

#[derive(Args, Debug)]
struct PretrainArgs {
    /// Task the network is trained on.
    #[arg(long)]
    src: Option<PathBuf>,
    /// Further tasks whose classes join the label space.
    #[arg(long)]
    tgt: Vec<PathBuf>,
    #[command(flatten)]
    common: Common,
}

#[derive(Args, Debug)]
struct DistArgs {
    #[arg(long)]
    method: Option<Method>,
    #[arg(long)]
    src: Option<PathBuf>,
    #[arg(long)]
    tgt: Option<PathBuf>,
    /// Source network from `pretrain`; trained on the fly when absent.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[command(flatten)]
    common: Common,
}

#[derive(Args, Debug)]
struct MatrixArgs {
    #[arg(long)]
    method: Option<Method>,
    /// Task CSV; repeat for every task.
    #[arg(long = "task")]
    tasks: Vec<PathBuf>,
    #[command(flatten)]
    common: Common,
}

#[derive(Args, Debug)]
struct MantelArgs {
    a: PathBuf,
    b: PathBuf,
    #[arg(long, default_value_t = 1000)]
    perms: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Enumerate all n! permutations.
    #[arg(long)]
    exact: bool,
    /// Also write `report.json` here.
    #[arg(short = 'o', long = "out")]
    out: Option<PathBuf>,
    #[arg(long)]
    force: bool,
}

/// Runs one command line (`argv[0]` is the program name) and returns the
/// process exit status.
pub fn run_command<I, S>(argv: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = write!(stdout, "{}", e.render());
                return 0;
            }
            let err = Error::Usage(e.render().to_string().trim().to_string());
            return fail(&err, stderr);
        }
    };
    match with_pool(|| dispatch(cli.command)).and_then(|r| r) {
        Ok(text) => {
            let _ = writeln!(stdout, "{text}");
            0
        }
        Err(e) => fail(&e, stderr),
    }
}

fn fail(e: &Error, stderr: &mut dyn Write) -> i32 {
    let _ = writeln!(stderr, "{}", error_json(e));
    match e {
        Error::Usage(_) => 2,
        _ => 1,
    }
}

/// One-line JSON rendering of an error: `kind`, `message` and, where known,
/// the offending config path or task pair.
pub fn error_json(e: &Error) -> String {
    let mut v = json!({"kind": e.kind(), "message": e.to_string()});
    match e {
        Error::Config { path, .. } => v["path"] = json!(path),
        Error::Pair {
            source_task,
            target_task,
            cause,
        } => {
            v["source"] = json!(source_task);
            v["target"] = json!(target_task);
            v["cause"] = json!(cause.kind());
        }
        Error::Ingestion { path, row, .. } => {
            v["file"] = json!(path);
            v["row"] = json!(row);
        }
        _ => {}
    }
    v.to_string()
}

fn usage(msg: impl Into<String>) -> Error {
    Error::Usage(msg.into())
}

fn dispatch(cmd: Command) -> Result<String> {
    match cmd {
        Command::Gen(a) => gen(a),
        Command::Pretrain(a) => pretrain_cmd(a),
        Command::Dist(a) => dist(a),
        Command::Matrix(a) => matrix(a),
        Command::Mantel(a) => mantel_cmd(a),
    }
}

fn files_json(command: &str, paths: &[PathBuf]) -> String {
    json!({"command": command, "files": paths}).to_string()
}

fn out_dir(cfg: &RunConfig) -> Result<PathBuf> {
    cfg.out.clone().ok_or_else(|| usage("an output directory is required (-o/--out or `out` in the config)"))
}

fn gen(a: GenArgs) -> Result<String> {
    let seed_for = |name: &str| derive_seed(a.seed, &[name]);
    let two = a.per_class.unwrap_or(100);
    let three = a.per_class.unwrap_or(60);
    let blobs2 = || gen_blobs::<f64>(seed_for("blobs2"), 2, 2, two, 4.0);
    let blobs3 = || gen_blobs::<f64>(seed_for("blobs3"), 3, 2, three, 4.0);
    let rings2 = |n| gen_rings::<f64>(seed_for("rings2"), 2, n, &[1.0, 3.0]);
    let mut tasks: Vec<(&str, LabeledTask<f64>)> = Vec::new();
    match a.preset {
        Preset::Blobs2 => tasks.push(("blobs2", blobs2()?)),
        Preset::Blobs3 => tasks.push(("blobs3", blobs3()?)),
        Preset::Blobs3Subset | Preset::Grid => {
            let full = blobs3()?;
            let sub = subset(&full, &[0, 1])?;
            tasks.push(("blobs3", full.clone()));
            tasks.push(("blobs3-subset", sub));
            if matches!(a.preset, Preset::Grid) {
                tasks.push(("rings2", rings2(three)?));
                tasks.push(("blobs3-shift", full.translated(&[3.0, 3.0])?));
            }
        }
        Preset::Rings2 => tasks.push(("rings2", rings2(two)?)),
        Preset::BlobsRings => {
            tasks.push(("blobs2", blobs2()?));
            tasks.push(("rings2", rings2(two)?));
        }
    }
    let paths: Vec<PathBuf> = tasks.iter().map(|(n, _)| a.out.join(format!("{n}.csv"))).collect();
    if !a.force {
        if let Some(p) = paths.iter().find(|p| p.exists()) {
            return Err(Error::Exists(p.clone()));
        }
    }
    std::fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    for ((_, t), p) in tasks.iter().zip(&paths) {
        write_csv(t, p)?;
    }
    Ok(files_json("gen", &paths))
}

fn load_checkpoint(path: &Path, source: &LabeledTask<f64>) -> Result<Mlp<f64>> {
    let net = Mlp::<f64>::load(path)?;
    if net.input_dim() != source.dim() || net.num_classes() != source.num_classes() {
        return Err(shape(format!(
            "{}: network maps {} inputs to {} classes but the task pair has {} features and {} classes",
            path.display(),
            net.input_dim(),
            net.num_classes(),
            source.dim(),
            source.num_classes()
        )));
    }
    Ok(net)
}

fn pretrain_cmd(a: PretrainArgs) -> Result<String> {
    let mut cfg = a.common.resolve()?;
    if let Some(src) = a.src {
        cfg.tasks = std::iter::once(src).chain(a.tgt).collect();
    } else if !a.tgt.is_empty() {
        return Err(usage("--tgt needs --src"));
    }
    if cfg.tasks.is_empty() {
        return Err(usage("pretrain needs --src (or `tasks` in the config)"));
    }
    let dir = out_dir(&cfg)?;
    let tasks = load_tasks(&cfg.tasks, cfg.label_space)?;
    let task = &tasks[0];
    let net = pretrain(task, &cfg.settings, cfg.seed)?;
    let mut report = Report::new("pretrain", &cfg);
    report.source = Some(task.name().to_string());
    report.details = json!({
        "layer_sizes": net.layer_sizes(),
        "num_params": net.num_params(),
        "train_accuracy": net.accuracy(task)?,
        "train_loss": net.loss(task.features(), task.labels())?,
        "class_ids": task.class_ids(),
    });
    let ckpt = serde_json::to_string_pretty(&net.to_checkpoint())? + "\n";
    let paths = write_report(&report, vec![Artifact::new("checkpoint.json", ckpt.into_bytes())], &dir, a.common.force)?;
    Ok(files_json("pretrain", &paths))
}

fn csv_bytes(header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header)?;
    for r in rows {
        w.write_record(&r)?;
    }
    w.into_inner().map_err(|e| Error::Internal(e.to_string()))
}

fn dist(a: DistArgs) -> Result<String> {
    let mut cfg = a.common.resolve()?;
    if let Some(m) = a.method {
        cfg.method = Some(m);
    }
    let method = cfg
        .method
        .ok_or_else(|| usage("dist needs --method (or `method` in the config)"))?;
    match (a.src, a.tgt) {
        (Some(s), Some(t)) => cfg.tasks = vec![s, t],
        (None, None) => {}
        _ => return Err(usage("--src and --tgt must be given together")),
    }
    if cfg.tasks.len() != 2 {
        return Err(usage(format!("dist needs exactly two tasks, got {}", cfg.tasks.len())));
    }
    let dir = out_dir(&cfg)?;
    let tasks = load_tasks(&cfg.tasks, cfg.label_space)?;
    let (s, t) = (&tasks[0], &tasks[1]);
    let settings = &cfg.settings;
    let seed = cfg.seed;
    let w_s = if method.needs_source_network() {
        Some(match &a.checkpoint {
            Some(p) => load_checkpoint(p, s)?,
            None => pretrain(s, settings, seed)?,
        })
    } else {
        None
    };
    let ws = || w_s.as_ref().expect("source network");
    let ps = pair_seed(seed, s.name(), t.name(), method);
    let mut report = Report::new("dist", &cfg);
    report.source = Some(s.name().to_string());
    report.target = Some(t.name().to_string());
    let mut artifacts = Vec::new();
    let (distance, mut details) = match method {
        Method::Coupled => {
            let mut c = settings.coupled.clone();
            c.train.seed = ps;
            let r = coupled_distance(s, t, ws(), &c)?;
            let gap = gap_profile(
                &r.final_trajectory,
                &r.trajectory_coupling,
                s,
                t,
                HELDOUT_FRACTION,
                &mut seeded(derive_seed(ps, &["gap"])),
            )?;
            let max_gap = gap
                .iter()
                .map(|g| g.heldout_loss - g.train_loss)
                .fold(f64::NEG_INFINITY, f64::max);
            let mut cumulative = 0.0;
            let rows: Vec<Vec<String>> = gap
                .iter()
                .enumerate()
                .map(|(m, g)| {
                    let inc = if m == 0 { 0.0 } else { r.final_length.increments[m - 1] };
                    cumulative += inc;
                    vec![
                        g.tau.to_string(),
                        inc.to_string(),
                        cumulative.to_string(),
                        g.train_loss.to_string(),
                        g.heldout_loss.to_string(),
                    ]
                })
                .collect();
            artifacts.push(Artifact::new(
                "profile.csv",
                csv_bytes(&["tau", "increment", "cumulative_length", "train_loss", "heldout_loss"], rows)?,
            ));
            artifacts.push(Artifact::render("coupling.csv", |b| r.final_coupling.write_csv(b))?);
            artifacts.push(Artifact::render("cost.csv", |b| r.final_cost.write_csv(b))?);
            let (row_res, col_res) = r.final_coupling.marginal_residuals();
            (
                r.distance(),
                json!({
                    "per_iteration_distance": r.per_iteration_distance,
                    "iterations": r.per_iteration_distance.len(),
                    "converged": r.converged,
                    "support_size": r.final_coupling.support().len(),
                    "marginal_residual": row_res.max(col_res),
                    "max_generalization_gap": max_gap,
                    "heldout_fraction": HELDOUT_FRACTION,
                }),
            )
        }
        Method::Uncoupled => {
            let len = uncoupled_distance(s, t, ws(), &settings.coupled.train, &mut seeded(ps))?;
            let mut cumulative = 0.0;
            let m_steps = len.increments.len();
            let rows: Vec<Vec<String>> = std::iter::once(0.0)
                .chain(len.increments.iter().copied())
                .enumerate()
                .map(|(m, inc)| {
                    cumulative += inc;
                    vec![
                        (m as f64 / m_steps as f64).to_string(),
                        inc.to_string(),
                        cumulative.to_string(),
                    ]
                })
                .collect();
            artifacts.push(Artifact::new(
                "profile.csv",
                csv_bytes(&["tau", "increment", "cumulative_length"], rows)?,
            ));
            (len.total, json!({}))
        }
        Method::Finetune => {
            let r = finetune_distance(t, ws(), &settings.coupled.train, &mut seeded(ps))?;
            (r.distance, serde_json::to_value(&r)?)
        }
        Method::Task2vec => {
            let probe = task2vec_probe(settings, seed);
            let ea = task2vec_embedding(s, &settings.hidden, &probe, settings.task2vec_mc_samples)?;
            let eb = task2vec_embedding(t, &settings.hidden, &probe, settings.task2vec_mc_samples)?;
            let r = task2vec_compare(&ea, &eb)?;
            (r.distance, json!({"cosine": r.cosine}))
        }
        Method::W2Input => (w2_distance(s, t, &IdentityEmbedder, &w2_params(settings, seed))?, json!({})),
        Method::W2Embed => {
            let r = settings.embed_reference;
            let reference = tasks
                .get(r)
                .ok_or_else(|| Error::Config {
                    path: "settings.embed_reference".into(),
                    message: format!("{r} is out of range for a task pair"),
                })?;
            let emb = embedding_probe(reference, settings, seed)?;
            let d = w2_embedding_distance(s, t, &emb, &w2_params(settings, seed))?;
            (d, json!({"embed_reference": reference.name()}))
        }
    };
    details["checkpoint"] = json!(a.checkpoint);
    details["pair_seed"] = json!(ps);
    report.distance = Some(distance);
    report.details = details;
    let paths = write_report(&report, artifacts, &dir, a.common.force)?;
    Ok(files_json("dist", &paths))
}

fn matrix(a: MatrixArgs) -> Result<String> {
    let mut cfg = a.common.resolve()?;
    if let Some(m) = a.method {
        cfg.method = Some(m);
    }
    let method = cfg
        .method
        .ok_or_else(|| usage("matrix needs --method (or `method` in the config)"))?;
    if !a.tasks.is_empty() {
        cfg.tasks = a.tasks;
    }
    if cfg.tasks.len() < 2 {
        return Err(usage("matrix needs at least two tasks (--task, repeated)"));
    }
    let dir = out_dir(&cfg)?;
    let tasks = load_tasks(&cfg.tasks, cfg.label_space)?;
    let m = distance_matrix(&tasks, method, &cfg.settings, cfg.seed)?;
    let mut report = Report::new("matrix", &cfg);
    report.details = json!({
        "task_names": m.task_names,
        "entries": m.entries.iter_rows().collect::<Vec<_>>(),
        "asymmetry": m.asymmetry(),
    });
    let csv = Artifact::render("matrix.csv", |b| m.write_csv(b))?;
    let paths = write_report(&report, vec![csv], &dir, a.common.force)?;
    Ok(files_json("matrix", &paths))
}

fn mantel_cmd(a: MantelArgs) -> Result<String> {
    let ma = DistanceMatrix::<f64>::load_csv(&a.a)?;
    let mb = DistanceMatrix::<f64>::load_csv(&a.b)?;
    let r = if a.exact {
        mantel_exact(&ma, &mb)?
    } else {
        mantel(&ma, &mb, a.perms, a.seed)?
    };
    let mut v = serde_json::to_value(r)?;
    v["n"] = json!(ma.len());
    if let Some(dir) = &a.out {
        let cfg = RunConfig {
            tasks: vec![a.a.clone(), a.b.clone()],
            seed: a.seed,
            out: Some(dir.clone()),
            ..RunConfig::default()
        };
        let mut report = Report::new("mantel", &cfg);
        report.details = v.clone();
        write_report(&report, Vec::new(), dir, a.force)?;
    }
    Ok(v.to_string())
}
