//! Acceptance criteria. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any fails. Pass criterion numbers as arguments to run a subset.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use rand::Rng;
use rand_distr::StandardNormal;

use taskgeo::cli::run_command;
use taskgeo::coupled::{coupled_distance, uncoupled_distance, CoupledConfig, CoupledReport};
use taskgeo::geometry::{fim_quadratic, gap_profile, interpolated_set};
use taskgeo::linalg::Matrix;
use taskgeo::net::{predictive_kl, Mlp};
use taskgeo::rng::{derive_seed, seeded, Rng64};
use taskgeo::stats::{distance_matrix, mantel, mantel_exact, mantel_r, pretrain, DistanceMatrix, Method, MethodConfig};
use taskgeo::tasks::{gen_blobs, gen_rings, subset, to_common_label_space, to_union_label_space, LabeledTask};
use taskgeo::transport::{exact_ot_small, sinkhorn, CostMatrix, SinkhornParams, Support};

type Check = (bool, String);
type Criterion = (usize, &'static str, fn() -> Check);

const SEEDS: [u64; 5] = [1, 2, 3, 4, 5];

fn main() {
    let only: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let criteria: [Criterion; 12] = [
        (1, "OT correctness", c1_ot),
        (2, "geometry consistency", c2_geometry),
        (3, "gradient check", c3_gradient),
        (4, "constant-speed geodesic", c4_geodesic),
        (5, "coupled iteration converges", c5_convergence),
        (6, "coupled <= uncoupled", c6_coupled_vs_uncoupled),
        (7, "subset ordering", c7_subset),
        (8, "capacity effect", c8_capacity),
        (9, "generalization-gap profile", c9_gap),
        (10, "Mantel exactness", c10_mantel),
        (11, "structural contrast", c11_structure),
        (12, "determinism", c12_determinism),
    ];
    let mut failed = Vec::new();
    let mut ran = 0;
    for (id, name, f) in criteria {
        if !only.is_empty() && !only.contains(&id) {
            continue;
        }
        ran += 1;
        let t = Instant::now();
        let (pass, detail) = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            (false, format!("panicked: {msg}"))
        });
        let verdict = if pass { "PASS" } else { "FAIL" };
        println!("criterion {id:>2} {verdict} {name}: {detail} ({:.1}s)", t.elapsed().as_secs_f64());
        if !pass {
            failed.push(id);
        }
    }
    println!("acceptance: {}/{ran} criteria passed", ran - failed.len());
    if !failed.is_empty() {
        println!("acceptance: failed {failed:?}");
        std::process::exit(1);
    }
}

fn within(t: Instant, limit: Duration) -> (bool, String) {
    let e = t.elapsed();
    (e < limit, format!("runtime {:.2}s < {}s", e.as_secs_f64(), limit.as_secs()))
}

fn normal(rng: &mut Rng64) -> f64 {
    rng.sample(StandardNormal)
}

fn c1_ot() -> Check {
    let t = Instant::now();
    let mut rng = seeded(101);
    let n = 5;
    let p = vec![1.0 / n as f64; n];
    let mut worst_gap = 0.0f64;
    let mut worst_res = 0.0f64;
    for _ in 0..20 {
        let c = Matrix::from_vec(n, n, (0..n * n).map(|_| rng.random::<f64>()).collect()).unwrap();
        let cost = CostMatrix::from_dense(&c).unwrap();
        let (_, exact) = exact_ot_small(&cost, &p, &p).unwrap();
        let plan = sinkhorn(&cost, &p, &p, &SinkhornParams::new(1e-3)).unwrap();
        let got = plan.transport_cost(&cost).unwrap();
        worst_gap = worst_gap.max((got - exact).abs() / exact);
        let (r, c) = plan.marginal_residuals();
        worst_res = worst_res.max(r.max(c));
    }
    let (fast, rt) = within(t, Duration::from_secs(5));
    (
        worst_gap < 0.01 && worst_res < 1e-6 && fast,
        format!("max relative cost gap {worst_gap:.2e} < 1e-2, max marginal residual {worst_res:.2e} < 1e-6, {rt}"),
    )
}

fn c2_geometry() -> Check {
    let t = Instant::now();
    let sizes = [4, 8, 3];
    let mut rng = seeded(202);
    let mut ratios = Vec::new();
    for k in 0..100u64 {
        let w = Mlp::<f64>::init(&sizes, derive_seed(202, &[&k.to_string()])).unwrap();
        let mut dw: Vec<f64> = (0..w.num_params()).map(|_| normal(&mut rng)).collect();
        let norm = dw.iter().map(|v| v * v).sum::<f64>().sqrt();
        dw.iter_mut().for_each(|v| *v *= 1e-3 / norm);
        let xs = Matrix::from_vec(32, 4, (0..128).map(|_| normal(&mut rng)).collect()).unwrap();
        let shifted: Vec<f64> = w.weights().iter().zip(&dw).map(|(a, b)| a + b).collect();
        let w2 = Mlp::from_weights(&sizes, shifted).unwrap();
        let kl = predictive_kl(&w, &w2, &xs).unwrap();
        let kl_mean = kl.iter().sum::<f64>() / kl.len() as f64;
        let quad = fim_quadratic(&w, &dw, &xs).unwrap();
        ratios.push((2.0 * kl_mean - quad).abs() / quad);
    }
    ratios.sort_by(f64::total_cmp);
    let p95 = ratios[94];
    let (fast, rt) = within(t, Duration::from_secs(10));
    (p95 < 1e-2 && fast, format!("95th percentile |2KL - dw'g dw|/dw'g dw = {p95:.2e} < 1e-2, {rt}"))
}

fn c3_gradient() -> Check {
    let grid: [&[usize]; 5] = [&[1, 2], &[2, 3], &[4, 8, 3], &[2, 32, 4], &[3, 5, 7, 4]];
    let mut rng = seeded(303);
    let mut worst = 0.0f64;
    let h = 1e-5;
    for (a, sizes) in grid.iter().enumerate() {
        let d = sizes[0];
        let k = *sizes.last().unwrap();
        let b = 6;
        let w = Mlp::<f64>::init(sizes, derive_seed(303, &[&a.to_string()])).unwrap();
        let xs = Matrix::from_vec(b, d, (0..b * d).map(|_| normal(&mut rng)).collect()).unwrap();
        let mut ys = Matrix::zeros(b, k);
        for i in 0..b {
            let row: Vec<f64> = (0..k).map(|_| rng.random::<f64>() + 0.05).collect();
            let s: f64 = row.iter().sum();
            for (c, v) in row.iter().enumerate() {
                ys.set(i, c, v / s);
            }
        }
        let (_, grad) = w.loss_grad_xy(&xs, &ys).unwrap();
        for i in 0..w.num_params() {
            let mut plus = w.weights().to_vec();
            let mut minus = plus.clone();
            plus[i] += h;
            minus[i] -= h;
            let lp = Mlp::from_weights(sizes, plus).unwrap().loss(&xs, &ys).unwrap();
            let lm = Mlp::from_weights(sizes, minus).unwrap().loss(&xs, &ys).unwrap();
            let fd = (lp - lm) / (2.0 * h);
            let rel = (grad[i] - fd).abs() / grad[i].abs().max(fd.abs()).max(1e-8);
            worst = worst.max(rel);
        }
    }
    (
        worst < 1e-4,
        format!("max relative error {worst:.2e} < 1e-4 over {} architectures (central differences, h = {h})", grid.len()),
    )
}

fn c4_geodesic() -> Check {
    let mut rng = seeded(404);
    let n = 5;
    let uniform = vec![1.0 / n as f64; n];
    let mut worst = 0.0f64;
    for trial in 0..10 {
        let pts = |rng: &mut Rng64, shift: f64| {
            Matrix::from_vec(n, 2, (0..2 * n).map(|_| normal(rng) + shift).collect()).unwrap()
        };
        let xs = pts(&mut rng, 0.0);
        let ys = pts(&mut rng, 2.0 + trial as f64 * 0.3);
        let to_task = |m: &Matrix<f64>, name: &str| LabeledTask::from_classes(name, m.clone(), &[0; 5], 1).unwrap();
        let (s, t, _) = to_union_label_space(&to_task(&xs, "s"), &to_task(&ys, "t")).unwrap();
        let cost = CostMatrix::squared_euclidean(Support::dense(n, n), &xs, &ys).unwrap();
        let (plan, total) = exact_ot_small(&cost, &uniform, &uniform).unwrap();
        let w_full = total.sqrt();
        for tau in [0.25, 0.5, 0.75] {
            let set = interpolated_set(&plan, &s, &t, tau, None).unwrap();
            let c = CostMatrix::squared_euclidean(Support::dense(n, set.inputs.rows()), &xs, &set.inputs).unwrap();
            let (_, w_tau) = exact_ot_small(&c, &uniform, &set.weights).unwrap();
            worst = worst.max((w_tau.sqrt() - tau * w_full).abs() / (tau * w_full));
        }
    }
    (worst < 0.02, format!("max |W2(p_s, p_tau) - tau W2(p_s, p_t)| / (tau W2) = {worst:.2e} < 0.02"))
}

fn blobs_rings(seed: u64) -> (LabeledTask<f64>, LabeledTask<f64>) {
    let a = gen_blobs::<f64>(seed, 2, 2, 100, 4.0).unwrap();
    let b = gen_rings::<f64>(seed + 100, 2, 100, &[1.0, 3.0]).unwrap();
    let (a, b, _) = to_union_label_space(&a, &b).unwrap();
    (a, b)
}

fn source_net(task: &LabeledTask<f64>, width: usize, seed: u64) -> Mlp<f64> {
    let cfg = MethodConfig::<f64> {
        hidden: vec![width],
        ..MethodConfig::default()
    };
    pretrain(task, &cfg, seed).unwrap()
}

fn coupled_cfg(seed: u64) -> CoupledConfig<f64> {
    let mut c = CoupledConfig::<f64>::default();
    c.train.seed = seed;
    c
}

struct Converged {
    source: LabeledTask<f64>,
    target: LabeledTask<f64>,
    report: CoupledReport<f64>,
    elapsed: Duration,
}

fn converged_run() -> &'static Converged {
    static RUN: OnceLock<Converged> = OnceLock::new();
    RUN.get_or_init(|| {
        let t = Instant::now();
        let (s, tg) = blobs_rings(1);
        let ws = source_net(&s, 32, 1);
        let report = coupled_distance(&s, &tg, &ws, &coupled_cfg(1)).unwrap();
        Converged {
            source: s,
            target: tg,
            report,
            elapsed: t.elapsed(),
        }
    })
}

fn c5_convergence() -> Check {
    let run = converged_run();
    let l = &run.report.per_iteration_distance;
    let first_small = (1..l.len()).find(|&k| (l[k] - l[k - 1]).abs() / l[k - 1] < 0.05).map(|k| k + 1);
    let fast = run.elapsed < Duration::from_secs(300);
    let rounded: Vec<String> = l.iter().map(|v| format!("{v:.3}")).collect();
    (
        first_small.is_some_and(|k| k <= 5) && fast,
        format!(
            "L_k = [{}], relative change < 5% first at k = {}, runtime {:.1}s < 300s",
            rounded.join(", "),
            first_small.map_or("never".into(), |k| k.to_string()),
            run.elapsed.as_secs_f64()
        ),
    )
}

fn c6_coupled_vs_uncoupled() -> Check {
    let mut wins = 0;
    let mut pairs = Vec::new();
    for seed in SEEDS {
        let (s, t) = blobs_rings(seed);
        let ws = source_net(&s, 32, seed);
        let cfg = coupled_cfg(seed);
        let c = coupled_distance(&s, &t, &ws, &cfg).unwrap().distance();
        let u = uncoupled_distance(&s, &t, &ws, &cfg.train, &mut seeded(cfg.train.seed)).unwrap().total;
        wins += (c <= u) as usize;
        pairs.push(format!("{c:.2}/{u:.2}"));
    }
    (wins >= 4, format!("coupled <= uncoupled in {wins}/5 runs (coupled/uncoupled: {})", pairs.join(" ")))
}

fn c7_subset() -> Check {
    let mut wins = 0;
    let mut pairs = Vec::new();
    for seed in SEEDS {
        let full = gen_blobs::<f64>(seed, 3, 2, 60, 4.0).unwrap();
        let sub = subset(&full, &[0, 1]).unwrap();
        let (f, s, _) = to_union_label_space(&full, &sub).unwrap();
        let mut cfg = coupled_cfg(seed);
        cfg.block_size = f.len().max(s.len());
        let d = |a: &LabeledTask<f64>, b: &LabeledTask<f64>| {
            coupled_distance(a, b, &source_net(a, 32, seed), &cfg).unwrap().distance()
        };
        let (to_sub, to_full) = (d(&f, &s), d(&s, &f));
        wins += (to_sub < to_full) as usize;
        pairs.push(format!("{to_sub:.2}/{to_full:.2}"));
    }
    (
        wins >= 4,
        format!("full->subset < subset->full in {wins}/5 runs, dense support (full->sub/sub->full: {})", pairs.join(" ")),
    )
}

fn c8_capacity() -> Check {
    let mut wins = 0;
    let mut pairs = Vec::new();
    for seed in SEEDS {
        let (s, t) = blobs_rings(seed);
        let cfg = coupled_cfg(seed);
        let d = |w: usize| coupled_distance(&s, &t, &source_net(&s, w, seed), &cfg).unwrap().distance();
        let (wide, narrow) = (d(64), d(16));
        wins += (wide < narrow) as usize;
        pairs.push(format!("{wide:.2}/{narrow:.2}"));
    }
    (wins >= 4, format!("width 64 < width 16 in {wins}/5 runs (64/16: {})", pairs.join(" ")))
}

fn c9_gap() -> Check {
    let run = converged_run();
    let r = &run.report;
    let profile = gap_profile(
        &r.final_trajectory,
        &r.trajectory_coupling,
        &run.source,
        &run.target,
        taskgeo::cli::HELDOUT_FRACTION,
        &mut seeded(909),
    )
    .unwrap();
    let (tau, gap) = profile
        .iter()
        .map(|g| (g.tau, g.heldout_loss - g.train_loss))
        .max_by(|a, b| a.1.total_cmp(&b.1))
        .unwrap();
    let limit = 0.5 * (run.source.num_classes() as f64).ln();
    (gap < limit, format!("max gap {gap:.4} at tau = {tau:.3} < 0.5 log K_u = {limit:.4}"))
}

fn matrix(names: &[&str], values: Vec<f64>) -> DistanceMatrix<f64> {
    let n = names.len();
    DistanceMatrix::new(names.iter().map(|s| s.to_string()).collect(), Matrix::from_vec(n, n, values).unwrap(), "m").unwrap()
}

fn c10_mantel() -> Check {
    let names = ["a", "b", "c", "d"];
    let mut rng = seeded(1010);
    let mut v = vec![0.0; 16];
    for i in 0..4 {
        for j in 0..4 {
            if i != j {
                v[i * 4 + j] = 1.0 + rng.random::<f64>();
            }
        }
    }
    let a = matrix(&names, v.clone());
    let r = mantel_r(&a, &a).unwrap();
    let exact = mantel_exact(&a, &a).unwrap();
    let sampled = mantel(&a, &a, 10_000, 7).unwrap();
    let b = matrix(&names, v.iter().map(|x| 3.5 * x + 0.5).collect());
    let c = matrix(&names, v.iter().map(|x| 5.0 - x).collect());
    let r_affine = mantel_r(&a, &b).unwrap();
    let r_anti = mantel_r(&a, &c).unwrap();
    let dr = (r - 12.0 / 11.0).abs();
    let dp = (sampled.p - exact.p).abs();
    let da = (r_affine - r).abs();
    (
        dr < 1e-9 && dp < 0.02 && da < 1e-9 && r_anti < 0.0,
        format!(
            "|r - 12/11| = {dr:.1e}, exact p = {:.4}, sampled p = {:.4} (|dp| = {dp:.4} < 0.02), affine |dr| = {da:.1e}, anti r = {r_anti:.3}",
            exact.p, sampled.p
        ),
    )
}

fn c11_structure() -> Check {
    let seed = 1;
    let a = gen_blobs::<f64>(seed, 3, 2, 60, 4.0).unwrap();
    let b = subset(&a, &[0, 1]).unwrap();
    let c = gen_rings::<f64>(seed + 7, 2, 60, &[1.0, 3.0]).unwrap();
    let d = a.clone().translated(&[3.0, 3.0]).unwrap().renamed("blobs3_shift");
    let tasks = to_common_label_space(&[a, b, c, d]).unwrap();
    let mut cfg = MethodConfig::<f64>::default();
    cfg.coupled.block_size = tasks.iter().map(|t| t.len()).max().unwrap();
    let m = |method| distance_matrix(&tasks, method, &cfg, seed).unwrap();
    let (coupled, ft, t2v, w2) = (m(Method::Coupled), m(Method::Finetune), m(Method::Task2vec), m(Method::W2Input));
    let r_c = mantel_r(&coupled, &ft).unwrap();
    let r_w = mantel_r(&w2, &ft).unwrap();
    let asym = [coupled.asymmetry(), ft.asymmetry(), t2v.asymmetry(), w2.asymmetry()];
    (
        asym[0] > 1e-6 && asym[1] > 1e-6 && asym[2] < 1e-6 && asym[3] < 1e-6 && r_c > r_w,
        format!(
            "|M - M'|inf coupled {:.3} finetune {:.3} task2vec {:.1e} w2 {:.1e}; r(coupled, ft) = {r_c:.3} > r(w2, ft) = {r_w:.3}",
            asym[0], asym[1], asym[2], asym[3]
        ),
    )
}

fn cli(args: &[&str]) {
    let mut out = Vec::new();
    let mut err = Vec::new();
    let code = run_command(std::iter::once("taskgeo").chain(args.iter().copied()), &mut out, &mut err);
    assert_eq!(code, 0, "{args:?}: {}", String::from_utf8_lossy(&err));
}

fn files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(dir).unwrap().to_string_lossy().into_owned();
                out.push((rel, std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn c12_determinism() -> Check {
    let root = tempfile::tempdir().unwrap();
    let tasks = root.path().join("tasks");
    let ts = |n: &str| tasks.join(format!("{n}.csv")).to_string_lossy().into_owned();
    cli(&["gen", "--preset", "grid", "--seed", "12", "--per-class", "30", "-o", &tasks.to_string_lossy()]);
    let cfg = root.path().join("pinned.json");
    std::fs::write(
        &cfg,
        r#"{"seed": 12, "settings": {"hidden": [16], "pretrain": {"updates": 500},
            "coupled": {"k_max": 3, "train": {"steps": 50}}, "task2vec_mc_samples": 200}}"#,
    )
    .unwrap();
    let cfg = cfg.to_string_lossy().into_owned();
    for run in ["run1", "run2"] {
        let o = |sub: &str| root.path().join(run).join(sub).to_string_lossy().into_owned();
        cli(&["pretrain", "--config", &cfg, "--src", &ts("blobs3"), "--tgt", &ts("rings2"), "-o", &o("pretrain")]);
        for m in ["coupled", "uncoupled", "finetune", "task2vec", "w2_input", "w2_embed"] {
            cli(&["dist", "--config", &cfg, "--method", m, "--src", &ts("blobs3"), "--tgt", &ts("rings2"), "-o", &o(m)]);
        }
        let mut args = vec!["matrix", "--config", &cfg, "--method", "coupled"];
        let grid = [ts("blobs3"), ts("blobs3-subset"), ts("rings2"), ts("blobs3-shift")];
        for t in &grid {
            args.extend(["--task", t]);
        }
        let out = o("matrix");
        args.extend(["-o", &out]);
        cli(&args);
        let staged = root.path().join("coupled.csv");
        std::fs::copy(Path::new(&out).join("matrix.csv"), &staged).unwrap();
        let csv = staged.to_string_lossy().into_owned();
        cli(&["mantel", &csv, &csv, "--perms", "200", "--seed", "3", "-o", &o("mantel")]);
    }
    let a = files(&root.path().join("run1"));
    let b = files(&root.path().join("run2"));
    let names: Vec<&String> = a.iter().map(|(n, _)| n).collect();
    let differing: Vec<&str> = a
        .iter()
        .filter(|(n, bytes)| !b.iter().any(|(m, other)| m == n && other == bytes))
        .map(|(n, _)| n.as_str())
        .collect();
    let same = a.len() == b.len() && differing.is_empty() && !a.is_empty();
    let reports = names.iter().filter(|n| n.ends_with("report.json")).count();
    (
        same,
        format!("{} files ({reports} reports) compared across two runs, differing: {differing:?}", a.len()),
    )
}
