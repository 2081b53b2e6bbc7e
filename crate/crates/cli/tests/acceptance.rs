//! Acceptance run. Every criterion prints one PASS or FAIL line to stderr
//! with its runtime; the test fails if any criterion does.
//!
//! The label-efficiency and determinism criteria drive the real `dokt`
//! binary; the rest call the library directly.

use std::cmp::Ordering;
use std::fs;
use std::io::Write;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use dokt_core::diversity::{
    default_l_cap, mcosine, optimize_iota, rank_by_diversity, traceback_objective, traceback_vector, DiversityConfig,
    NeighborSet,
};
use dokt_core::manifest::read_label_rows;
use dokt_core::rng::{seeded_rng, StreamRng};
use dokt_core::sampler::{select_dokt, train_models, RoundConfig, Strategy};
use dokt_core::similarity::population_variance;
use dokt_core::trainer::{train_downstream, DownstreamModel, ProbabilityVector, TrainConfig};
use dokt_core::uncertainty::{
    domain_uncertainty, kl_divergence, max_var, train_uncertainty_head, uncertainty_score, HeadConfig,
    HeadTrainingSet, RankingSign, UncertaintyContext, UncertaintyHead,
};
use dokt_core::{Dataset, Embeddings, Label, Manifest, PoolState, PretextSpace, SampleId};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use tempfile::TempDir;

type Check = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

fn run(name: &str, limit: Duration, f: impl FnOnce() -> Check) -> bool {
    let start = Instant::now();
    let result = match catch_unwind(AssertUnwindSafe(f)) {
        Ok(r) => r,
        Err(panic) => Err(panic
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| panic.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panicked".into())),
    };
    let elapsed = start.elapsed();
    let (ok, detail) = match result {
        Ok(d) if elapsed <= limit => (true, d),
        Ok(d) => (false, format!("{d}; over the {}s limit", limit.as_secs())),
        Err(e) => (false, e),
    };
    let line = format!(
        "{} {name} ({:.1}s / {}s): {detail}\n",
        if ok { "PASS" } else { "FAIL" },
        elapsed.as_secs_f64(),
        limit.as_secs()
    );
    std::io::stderr().write_all(line.as_bytes()).unwrap();
    ok
}

#[test]
fn acceptance() {
    let work = TempDir::new().unwrap();
    let results = [
        run("formula suite", Duration::from_secs(5), formulas),
        run("brute-force oracles", Duration::from_secs(30), oracles),
        run("invariance suite", Duration::from_secs(30), invariance),
        run("gradient checks", Duration::from_secs(10), gradients),
        run("uncertainty-head fidelity", Duration::from_secs(60), || fidelity(work.path())),
        run("label efficiency", Duration::from_secs(600), || label_efficiency(work.path())),
        run("determinism", Duration::from_secs(600), || determinism(work.path())),
    ];
    let failed = results.iter().filter(|&&ok| !ok).count();
    assert_eq!(failed, 0, "{failed} acceptance criteria failed");
}

fn rng(seed: u64) -> StreamRng {
    seeded_rng(seed, "acceptance")
}

fn gaussian(rng: &mut impl Rng, dim: usize) -> Vec<f64> {
    (0..dim).map(|_| StandardNormal.sample(rng)).collect()
}

fn simplex(rng: &mut impl Rng, c: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..c).map(|_| -rng.random::<f64>().max(1e-300).ln()).collect();
    let z: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / z).collect()
}

fn pv(v: &[f64]) -> ProbabilityVector {
    ProbabilityVector::new(v.to_vec()).unwrap()
}

fn close(name: &str, got: f64, want: f64, tol: f64) -> Result<(), String> {
    ensure!((got - want).abs() <= tol, "{name}: got {got}, want {want} ± {tol}");
    Ok(())
}

fn formulas() -> Check {
    for c in 2..=12 {
        for hot in 0..c {
            let mut v = vec![0.0; c];
            v[hot] = 1.0;
            close("one-hot score", uncertainty_score(&pv(&v)), 0.0, 1e-12)?;
        }
        close("maxVar(uniform)", max_var(&pv(&vec![1.0 / c as f64; c])), 0.0, 1e-15)?;
    }
    let mut r = rng(1);
    for _ in 0..1000 {
        let p = simplex(&mut r, 2);
        close("two-class score", uncertainty_score(&pv(&p)), 1.0 - p[0].max(p[1]), 1e-9)?;
    }
    close("S([0.5,0.3,0.2])", uncertainty_score(&pv(&[0.5, 0.3, 0.2])), 0.553571, 1e-6)?;
    let kl = kl_divergence(&pv(&[0.5, 0.5]), &pv(&[0.25, 0.75])).map_err(|e| e.to_string())?;
    close("KL", kl, 0.143841, 1e-6)?;

    let nbrs = |cos: &[f64], ids: &[usize]| NeighborSet {
        ids: ids.iter().map(|&i| SampleId(i)).collect(),
        cosines: cos.to_vec(),
        iota: ids.len(),
    };
    close("mcosine", mcosine(&nbrs(&[1.0, 0.0], &[0, 1])), 0.75, 1e-15)?;
    let pool = PoolState::new(4, [(SampleId(0), Label(0)), (SampleId(1), Label(1)), (SampleId(2), Label(2))], 0)
        .map_err(|e| e.to_string())?;
    let vt = traceback_vector(&nbrs(&[1.0, 0.0], &[0, 1]), &pool, 2).map_err(|e| e.to_string())?;
    ensure!(vt == [1.0, 0.5], "V_t: got {vt:?}");
    let vt = traceback_vector(&nbrs(&[0.6], &[2]), &pool, 3).map_err(|e| e.to_string())?;
    close("V_t weight", vt[2], 0.8, 1e-15)?;
    close("objective", traceback_objective(&[1.0, 0.5], 0.75), 0.0375, 1e-12)?;
    Ok("closed forms and worked examples match".into())
}

fn cos(a: &[f64], b: &[f64]) -> f64 {
    let dot = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(p, q)| p * q).sum::<f64>();
    (dot(a, b) / (dot(a, a).sqrt() * dot(b, b).sqrt())).clamp(-1.0, 1.0)
}

/// Scores every neighbor count from scratch; returns (score, iota).
fn brute_trace(space: &PretextSpace, pool: &PoolState, x: SampleId, c: usize, l_cap: usize) -> (f64, usize) {
    let mut all: Vec<(SampleId, f64)> =
        pool.labeled().keys().map(|&id| (id, cos(space.vector(x), space.vector(id)))).collect();
    all.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    let mut best = (f64::INFINITY, 0);
    for iota in 1..=l_cap.clamp(1, all.len()) {
        let mut vt = vec![0.0; c];
        let mut total = 0.0;
        for &(id, raw) in &all[..iota] {
            let w = (raw + 1.0) / 2.0;
            vt[pool.label_of(id).unwrap().0] += w;
            total += w;
        }
        let n = vt.iter().map(|v| v * v).sum::<f64>().sqrt();
        let score = if n == 0.0 {
            0.0
        } else {
            let u: Vec<f64> = vt.iter().map(|v| v / n).collect();
            let mean = u.iter().sum::<f64>() / c as f64;
            let var = u.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / c as f64;
            var * (total / iota as f64)
        };
        if score < best.0 {
            best = (score, iota);
        }
    }
    best
}

fn random_pool(rng: &mut impl Rng, n: usize, n_labeled: usize, c: usize) -> PoolState {
    let labeled: Vec<(SampleId, Label)> = rand::seq::index::sample(rng, n, n_labeled)
        .into_iter()
        .map(|i| (SampleId(i), Label(rng.random_range(0..c))))
        .collect();
    PoolState::new(n, labeled, n).unwrap()
}

/// Two clusters on an integer grid, so cosines and scores tie often.
fn two_cluster_dataset(rng: &mut impl Rng, n: usize) -> Dataset {
    let (tokens, dim) = (2, 4);
    let mut values = Vec::new();
    let mut truth = Vec::new();
    for _ in 0..n {
        let class = rng.random_range(0..2usize);
        let center = if class == 0 { [3.0, 3.0, 0.0, 0.0] } else { [0.0, 0.0, 3.0, 3.0] };
        let row: Vec<f32> = center.iter().map(|c| c + rng.random_range(-1i32..=1) as f32).collect();
        for _ in 0..tokens {
            values.extend(&row);
        }
        truth.push(Label(class));
    }
    let embeddings = Embeddings::new(n, tokens, dim, values).unwrap();
    Dataset::from_parts(Manifest::new(n, 2, tokens, dim, "e.bin", "l.csv"), embeddings, truth).unwrap()
}

fn oracles() -> Check {
    let mut r = rng(2);
    for instance in 0..100 {
        let n = r.random_range(4..40);
        let dim = r.random_range(2..6);
        let rows: Vec<Vec<f64>> = (0..n)
            .map(|_| loop {
                let row: Vec<f64> = if instance % 2 == 0 {
                    (0..dim).map(|_| r.random_range(-2i32..=2) as f64).collect()
                } else {
                    gaussian(&mut r, dim)
                };
                if row.iter().any(|&v| v != 0.0) {
                    break row;
                }
            })
            .collect();
        let c = r.random_range(2..6);
        let n_labeled = r.random_range(1..n);
        let pool = random_pool(&mut r, n, n_labeled, c);
        let space = PretextSpace::from_rows(&rows).unwrap();
        let l_cap = r.random_range(1..=n_labeled + 2);
        for x in pool.unlabeled_ids() {
            let got = optimize_iota(&space, &pool, x, c, l_cap).map_err(|e| e.to_string())?;
            let want = brute_trace(&space, &pool, x, c, l_cap);
            ensure!((got.s_trace, got.iota) == want, "optimize_iota instance {instance}, {x}: {got:?} vs {want:?}");
        }
    }

    let mut r = rng(4);
    for instance in 0..50u64 {
        let n = r.random_range(30..70);
        let ds = two_cluster_dataset(&mut r, n);
        let n_pool = ds.pool_size();
        let n_labeled = r.random_range(2..n_pool - 1);
        let pool = random_pool(&mut r, n_pool, n_labeled, 2);
        let m = r.random_range(1..=pool.unlabeled().len() + 2);
        let round = r.random_range(1..5);
        let cfg = RoundConfig {
            seed: instance,
            trainer: TrainConfig { epochs: 5, hidden_units: 8, ..Default::default() },
            head: HeadConfig { epochs: 5, hidden_units: 4, mixes_per_sample: 2, ..Default::default() },
            ..Default::default()
        };
        let models = train_models(&ds, &pool, &cfg, round).map_err(|e| e.to_string())?;
        let got = select_dokt(&ds, &pool, &models, &cfg, round, m).map_err(|e| e.to_string())?;

        let ctx = UncertaintyContext {
            embeddings: ds.embeddings(),
            space: ds.space(),
            pool: &pool,
            model: &models.downstream,
            head: &models.head,
            rho: cfg.rho,
            perturbation: true,
            seed: cfg.seed,
            round,
        };
        let l_cap = default_l_cap(pool.labeled().len());
        let mut all: Vec<(SampleId, f64, f64)> = pool
            .unlabeled_ids()
            .into_iter()
            .map(|x| (x, brute_trace(ds.space(), &pool, x, 2, l_cap).0, domain_uncertainty(&ctx, x).unwrap().d_domain))
            .collect();
        all.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap().then(a.0.cmp(&b.0)));
        all.truncate(2 * m);
        all.sort_by(|a, b| match b.2.partial_cmp(&a.2).unwrap() {
            Ordering::Equal => a.0.cmp(&b.0),
            o => o,
        });
        all.truncate(m);
        let want: Vec<SampleId> = all.iter().map(|t| t.0).collect();
        ensure!(got.ids == want, "select_dokt instance {instance}: {:?} vs {want:?}", got.ids);
    }
    Ok("optimize_iota exact on 100 instances, select_dokt exact on 50".into())
}

fn invariance() -> Check {
    let mut r = rng(6);
    let (n, d, c) = (80, 6, 4);
    let rows: Vec<Vec<f64>> = (0..n).map(|_| gaussian(&mut r, d)).collect();
    let pool = random_pool(&mut r, n, 30, c);
    let cfg = DiversityConfig { l_cap: Some(5), ..Default::default() };
    let scores = |space: &PretextSpace| -> Vec<f64> {
        pool.unlabeled_ids().into_iter().map(|x| optimize_iota(space, &pool, x, c, 5).unwrap().s_trace).collect()
    };
    let order = |space: &PretextSpace| -> Vec<SampleId> {
        rank_by_diversity(space, &pool, c, &cfg).unwrap().into_iter().map(|t| t.0).collect()
    };
    let base = PretextSpace::from_rows(&rows).unwrap();
    let (base_scores, base_order) = (scores(&base), order(&base));
    let mut worst: f64 = 0.0;
    for t in 0..20 {
        // Gram-Schmidt on a Gaussian matrix gives a random orthogonal map.
        let mut q: Vec<Vec<f64>> = Vec::new();
        while q.len() < d {
            let mut v = gaussian(&mut r, d);
            for b in &q {
                let p: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
                v.iter_mut().zip(b).for_each(|(x, y)| *x -= p * y);
            }
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 1e-6 {
                q.push(v.into_iter().map(|x| x / norm).collect());
            }
        }
        let moved: Vec<Vec<f64>> = rows
            .iter()
            .map(|row| {
                let scale = r.random_range(0.01..100.0);
                q.iter().map(|qr| scale * qr.iter().zip(row).map(|(a, b)| a * b).sum::<f64>()).collect()
            })
            .collect();
        let space = PretextSpace::from_rows(&moved).unwrap();
        for (a, b) in scores(&space).iter().zip(&base_scores) {
            worst = worst.max((a - b).abs());
        }
        ensure!(worst < 1e-9, "transform {t}: s_trace moved by {worst}");
        ensure!(order(&space) == base_order, "transform {t}: diversity order changed");
    }

    let mut r = rng(7);
    for _ in 0..1000 {
        let c = r.random_range(2..12);
        let (p, q) = (simplex(&mut r, c), simplex(&mut r, c));
        let kl = kl_divergence(&pv(&p), &pv(&q)).unwrap();
        ensure!(kl >= 0.0, "KL {kl} < 0 for {p:?} {q:?}");
    }
    for _ in 0..1000 {
        let c = r.random_range(2..12);
        let m = 1.0 / c as f64 + r.random::<f64>() * (1.0 - 1.0 / c as f64);
        // Split the remainder at random, then move any excess over m into
        // the headroom of the other entries.
        let mut rest: Vec<f64> = simplex(&mut r, c - 1).into_iter().map(|x| x * (1.0 - m)).collect();
        let excess: f64 = rest.iter().map(|&x| (x - m).max(0.0)).sum();
        let room: f64 = rest.iter().map(|&x| (m - x).max(0.0)).sum();
        if excess > 0.0 {
            for x in &mut rest {
                *x = if *x >= m { m } else { *x + excess * (m - *x) / room };
            }
        }
        rest.insert(r.random_range(0..c), m);
        let (mv, var) = (max_var(&pv(&rest)), population_variance(&rest));
        ensure!(mv <= var + 1e-12, "maxVar {mv} > Var {var} for {rest:?}");
    }
    Ok(format!("20 transforms, max s_trace change {worst:.1e}; KL and maxVar bounds on 1000 draws each"))
}

fn finite_difference(params: &mut [f64], mut loss: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    const H: f64 = 1e-5;
    (0..params.len())
        .map(|k| {
            let orig = params[k];
            params[k] = orig + H;
            let up = loss(params);
            params[k] = orig - H;
            let down = loss(params);
            params[k] = orig;
            (up - down) / (2.0 * H)
        })
        .collect()
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let scale = norm(a) + norm(b);
    if scale == 0.0 {
        0.0
    } else {
        norm(&diff) / scale
    }
}

fn gradients() -> Check {
    let mut r = rng(8);
    let mut worst: f64 = 0.0;
    for draw in 0..25u64 {
        let (d, hidden, c) = (r.random_range(2..7), r.random_range(2..9), r.random_range(2..6));
        let model = DownstreamModel::init(d, hidden, c, &mut seeded_rng(draw, "grad"));
        let xs: Vec<Vec<f64>> = (0..r.random_range(1..6)).map(|_| gaussian(&mut r, d)).collect();
        let batch: Vec<(&[f64], Label)> = xs.iter().map(|x| (x.as_slice(), Label(r.random_range(0..c)))).collect();
        let (_, analytic) = model.loss_and_grad(&batch);
        let mut probe = model.clone();
        let numeric = finite_difference(&mut model.parameters().to_vec(), |p| {
            probe.parameters_mut().copy_from_slice(p);
            probe.loss(&batch)
        });
        let err = rel_err(&analytic, &numeric);
        ensure!(err < 1e-4, "cross-entropy draw {draw}: relative error {err}");
        worst = worst.max(err);
    }

    let mut active = 0;
    for sign in [RankingSign::Agreeing, RankingSign::Literal] {
        // A margin above 1 keeps every pair of sigmoid outputs on the active branch.
        let cfg = HeadConfig { margin: 1.5, sign, ..Default::default() };
        for draw in 0..25u64 {
            let d = r.random_range(2..8);
            let head = UncertaintyHead::init(d, r.random_range(2..9), &mut seeded_rng(draw, "grad-head"));
            let (x1, x2) = (gaussian(&mut r, d), gaussian(&mut r, d));
            let pair = [(x1.as_slice(), r.random::<f64>()), (x2.as_slice(), r.random::<f64>())];
            let gap = (head.predict(&x1) - head.predict(&x2)).abs();
            ensure!(gap <= cfg.margin, "ranking draw {draw} landed in the dead zone");
            let (_, analytic) = head.pair_loss_and_grad(pair, &cfg);
            let mut probe = head.clone();
            let numeric = finite_difference(&mut head.parameters().to_vec(), |p| {
                probe.parameters_mut().copy_from_slice(p);
                probe.pair_loss(pair, &cfg)
            });
            let err = rel_err(&analytic, &numeric);
            ensure!(err < 1e-4, "ranking {sign:?} draw {draw}: relative error {err}");
            worst = worst.max(err);
            active += 1;
        }
    }
    Ok(format!("25 cross-entropy and {active} ranking draws, worst relative error {worst:.1e}"))
}

fn dokt() -> Command {
    Command::new(env!("CARGO_BIN_EXE_dokt"))
}

fn dokt_ok(args: &[&str]) -> Result<String, String> {
    let out = dokt().args(args).output().map_err(|e| e.to_string())?;
    ensure!(
        out.status.success(),
        "dokt {} failed: {}",
        args.first().unwrap_or(&""),
        String::from_utf8_lossy(&out.stderr)
    );
    Ok(String::from_utf8_lossy(&out.stdout).into_owned())
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Writes the default synthetic manifest for `seed` and returns its path.
fn synthetic(dir: &Path, seed: u64) -> Result<PathBuf, String> {
    let out = dir.join(format!("synthetic{seed}"));
    dokt_ok(&["gen-synthetic", "--out", path(&out), "--seed", &seed.to_string()])?;
    Ok(out.join("manifest.json"))
}

/// Average ranks, so ties share the mean of their positions.
fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut out = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        for &k in &idx[i..=j] {
            out[k] = (i + j) as f64 / 2.0 + 1.0;
        }
        i = j + 1;
    }
    out
}

fn spearman(a: &[f64], b: &[f64]) -> f64 {
    let (ra, rb) = (ranks(a), ranks(b));
    let n = a.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let cov: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = ra.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = rb.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}

const FIDELITY_LABELED: usize = 300;
const FIDELITY_HELD_OUT: usize = 400;

fn fidelity(work: &Path) -> Check {
    let mut rhos = Vec::new();
    for seed in 0..5u64 {
        let manifest = synthetic(work, seed)?;
        let ds = Dataset::open(&manifest).map_err(|e| e.to_string())?;
        let truth = read_label_rows(&manifest.with_file_name("labels.csv"), ds.n_classes()).map_err(|e| e.to_string())?;
        let mut ids: Vec<SampleId> = (0..ds.pool_size()).map(SampleId).collect();
        ids.shuffle(&mut seeded_rng(seed, "fidelity"));
        let labeled = ids[..FIDELITY_LABELED].iter().map(|id| truth[id.0]);
        let held = &ids[FIDELITY_LABELED..FIDELITY_LABELED + FIDELITY_HELD_OUT];
        let pool = PoolState::new(ds.pool_size(), labeled, 0).map_err(|e| e.to_string())?;

        let tcfg = TrainConfig { seed, ..Default::default() };
        let model = train_downstream(ds.embeddings(), ds.space(), &pool, ds.n_classes(), &tcfg).map_err(|e| e.to_string())?;
        let hcfg = HeadConfig { seed, ..Default::default() };
        let head = train_uncertainty_head(&model, ds.embeddings(), &pool, &hcfg).map_err(|e| e.to_string())?;

        let set = HeadTrainingSet::from_model(&model, ds.embeddings(), held);
        let predicted: Vec<f64> = set.features.iter().map(|f| head.predict(f)).collect();
        rhos.push(spearman(&predicted, &set.targets));
    }
    let shown = rhos.iter().map(|r| format!("{r:.3}")).collect::<Vec<_>>().join(" ");
    ensure!(rhos.iter().all(|&r| r >= 0.8), "Spearman per seed {shown}; need >= 0.8 on all");
    Ok(format!("Spearman per seed {shown}"))
}

/// Traceback neighbor cap used by the benchmark runs.
const BENCH_L_CAP: &str = "10";
const BENCH_STRATEGIES: [Strategy; 4] =
    [Strategy::Random, Strategy::Dokt, Strategy::DoktNoTraceback, Strategy::DoktNoMixing];

fn simulate_args<'a>(manifest: &'a str, out: &'a str, strategies: &'a str, seed: &'a str) -> Vec<&'a str> {
    vec![
        "simulate", "--manifest", manifest, "--out", out, "--strategy", strategies, "--seed", seed,
        "--m", "20", "--rounds", "15", "--initial-fraction", "0.02", "--l-cap", BENCH_L_CAP,
    ]
}

fn label_efficiency(work: &Path) -> Check {
    let reports = work.join("bench");
    let names: Vec<&str> = BENCH_STRATEGIES.iter().map(|s| s.name()).collect();
    let strategies = names.join(",");
    // Each seed draws its own manifest, as in the fidelity check.
    for seed in 0..5u64 {
        let manifest = synthetic(work, seed)?;
        dokt_ok(&simulate_args(path(&manifest), path(&reports), &strategies, &seed.to_string()))?;
    }
    let table = dokt_ok(&["report", "--reports", path(&reports), "--target-strategy", "random"])?;

    let mut counts = std::collections::BTreeMap::new();
    for line in table.lines().skip(1) {
        let cols: Vec<&str> = line.split(',').collect();
        ensure!(cols.len() == 3, "bad report line {line:?}");
        let labels: f64 = cols[1].parse().map_err(|_| format!("{} never reached the target", cols[0]))?;
        counts.insert(cols[0].to_string(), labels);
    }
    let get = |name: &str| counts.get(name).copied().ok_or(format!("no runs for {name}"));
    let (dokt, random) = (get("dokt")?, get("random")?);
    let (no_trace, no_mix) = (get("dokt_no_traceback")?, get("dokt_no_mixing")?);
    let detail = format!(
        "mean labels to target: dokt {dokt}, random {random} (ratio {:.3}), no_traceback {no_trace}, no_mixing {no_mix}",
        dokt / random
    );
    ensure!(dokt <= 0.8 * random, "{detail}; dokt needs <= 0.8x random");
    ensure!(dokt < no_trace && dokt < no_mix, "{detail}; dokt must beat both ablations");
    Ok(detail)
}

fn determinism(work: &Path) -> Check {
    let manifest = synthetic(work, 0)?;
    let (a, b) = (work.join("det_a"), work.join("det_b"));
    for dir in [&a, &b] {
        dokt_ok(&simulate_args(path(&manifest), path(dir), "dokt,random", "0"))?;
    }
    let mut compared = 0;
    for name in ["dokt_seed0.jsonl", "random_seed0.jsonl"] {
        let first = fs::read(a.join(name)).map_err(|e| e.to_string())?;
        ensure!(first == fs::read(b.join(name)).map_err(|e| e.to_string())?, "{name} differs between runs");
        // The benchmark's seed-0 invocation used the same manifest and flags.
        if let Ok(bench) = fs::read(work.join("bench").join(name)) {
            ensure!(first == bench, "{name} differs from the benchmark run");
            compared += 1;
        }
    }
    Ok(format!("report files byte-identical across runs (and to {compared} benchmark files)"))
}
