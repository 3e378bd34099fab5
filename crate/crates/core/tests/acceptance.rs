//! Acceptance criteria, each checked at its stated tolerance. Prints one
//! `PASS`/`FAIL` line per criterion and exits non-zero if any fails.

use std::path::Path;
use std::time::{Duration, Instant};

use medform::align::{sym_contrastive_graph, sym_contrastive_loss, TEMPERATURE_KEY};
use medform::cli::{AlignSummary, Pipeline, ResultRecord, RunConfig};
use medform::clinical_encoder::ClinicalConfig;
use medform::ct_preprocess::{resample, resampled_extent, CtVolume, WindowSpec};
use medform::eval_probe::{auroc, probe_loss_graph};
use medform::mil_pool::{pool, AbmilConfig};
use medform::numerics::{finite_diff_check, l2_normalize_rows, DenseArray, Graph, ParamStore, ParamVars, Rng};
use medform::slice_ssl::{nt_xent_graph, Activation};

type Check = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn normal(rng: &mut Rng, rows: usize, cols: usize) -> DenseArray {
    DenseArray::new(vec![rows, cols], (0..rows * cols).map(|_| rng.normal()).collect()).unwrap()
}

fn unit(rng: &mut Rng, rows: usize, cols: usize) -> DenseArray {
    l2_normalize_rows(&normal(rng, rows, cols), 1e-12).unwrap()
}

fn log_tau(tau: f64) -> DenseArray {
    DenseArray::new(vec![1, 1], vec![tau.ln()]).unwrap()
}

fn gradient_suite() -> Check {
    const TOL: f64 = 1e-4;
    let start = Instant::now();
    let mut worst: Vec<(&str, f64)> = Vec::new();
    let mut track = |name: &'static str, err: f64| -> Result<(), String> {
        match worst.iter_mut().find(|w| w.0 == name) {
            Some(w) => w.1 = w.1.max(err),
            None => worst.push((name, err)),
        }
        ensure(err <= TOL, || format!("{name}: relative error {err:e} > {TOL:e}"))
    };
    for seed in 0..20u64 {
        let mut rng = Rng::new(1000 + seed);

        let mut p = ParamStore::new();
        p.insert("z", normal(&mut rng, 6, 4)).unwrap();
        let err = finite_diff_check(
            |g: &mut Graph, v: &ParamVars| {
                let z = g.l2_normalize_rows(v.get("z")?, 1e-12)?;
                nt_xent_graph(g, z, 0.5)
            },
            &p,
            1e-5,
        )
        .map_err(|e| e.to_string())?;
        track("nt-xent", err)?;

        let mut p = ParamStore::new();
        p.insert("s", normal(&mut rng, 4, 3)).unwrap();
        p.insert("c", normal(&mut rng, 4, 3)).unwrap();
        p.insert(TEMPERATURE_KEY, log_tau(2.0)).unwrap();
        let err = finite_diff_check(
            |g: &mut Graph, v: &ParamVars| {
                let s = g.l2_normalize_rows(v.get("s")?, 1e-12)?;
                let c = g.l2_normalize_rows(v.get("c")?, 1e-12)?;
                sym_contrastive_graph(g, s, c, v.get(TEMPERATURE_KEY)?)
            },
            &p,
            1e-5,
        )
        .map_err(|e| e.to_string())?;
        track("symmetric contrastive", err)?;

        let mil = AbmilConfig { embed_dim: 4, hidden_dim: 5, gated: seed % 2 == 1, max_slices: None };
        let mut p = mil.init_params(5, &mut rng.fork("mil")).unwrap();
        p.insert("head.w", normal(&mut rng, 4, 1)).unwrap();
        let bag = normal(&mut rng, 5, 5);
        let err = finite_diff_check(
            |g: &mut Graph, v: &ParamVars| {
                let x = g.constant(bag.clone());
                let (pooled, _) = mil.pool(g, v, x)?;
                let y = g.matmul(pooled, v.get("head.w")?)?;
                let t = g.tanh(y)?;
                g.sum(t)
            },
            &p,
            1e-5,
        )
        .map_err(|e| e.to_string())?;
        track("abmil pooling", err)?;

        let act = if seed % 2 == 0 { Activation::Tanh } else { Activation::Relu };
        let clin = ClinicalConfig { hidden_dim: 4, activation: act };
        let p = clin.init_params(3, 2, &mut rng.fork("clinical")).unwrap();
        let t = normal(&mut rng, 4, 3);
        let err = finite_diff_check(
            |g: &mut Graph, v: &ParamVars| {
                let x = g.constant(t.clone());
                let c = clin.forward(g, v, x)?;
                let sq = g.mul(c, c)?;
                g.sum(sq)
            },
            &p,
            1e-6,
        )
        .map_err(|e| e.to_string())?;
        track("clinical mlp", err)?;

        let x = normal(&mut rng, 10, 3);
        let targets = DenseArray::from_rows(&(0..10).map(|i| if i % 2 == 0 { vec![1.0, 0.0] } else { vec![0.0, 1.0] }).collect::<Vec<_>>()).unwrap();
        let mut p = ParamStore::new();
        p.insert("probe.w", normal(&mut rng, 3, 1)).unwrap();
        p.insert("probe.b", normal(&mut rng, 1, 1)).unwrap();
        let err = finite_diff_check(|g: &mut Graph, v: &ParamVars| probe_loss_graph(g, v, &x, &targets, 1e-3), &p, 1e-5)
            .map_err(|e| e.to_string())?;
        track("probe loss", err)?;
    }
    let elapsed = start.elapsed();
    ensure(elapsed < Duration::from_secs(60), || format!("took {elapsed:.1?}, limit 60 s"))?;
    let parts: Vec<String> = worst.iter().map(|(n, e)| format!("{n} {e:.1e}")).collect();
    Ok(format!("max rel. error: {}; {elapsed:.1?}", parts.join(", ")))
}

/// Literal double loop over both directions.
fn naive_sym_loss(s: &DenseArray, c: &DenseArray, tau: f64) -> f64 {
    let m = s.shape()[0];
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let mut total = 0.0;
    for i in 0..m {
        let den: f64 = (0..m).map(|j| (tau * dot(s.row(i), c.row(j))).exp()).sum();
        total -= ((tau * dot(s.row(i), c.row(i))).exp() / den).ln();
    }
    for j in 0..m {
        let den: f64 = (0..m).map(|i| (tau * dot(c.row(j), s.row(i))).exp()).sum();
        total -= ((tau * dot(c.row(j), s.row(j))).exp() / den).ln();
    }
    total / (2 * m) as f64
}

fn closed_forms() -> Check {
    let one = DenseArray::from_rows(&[vec![0.6, 0.8]]).unwrap();
    let l1 = sym_contrastive_loss(&one, &one, 10.0).map_err(|e| e.to_string())?;
    ensure(l1 == 0.0, || format!("M=1 gives {l1}, expected exactly 0"))?;

    let eye = DenseArray::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
    let l2 = sym_contrastive_loss(&eye, &eye, 1.0).map_err(|e| e.to_string())?;
    // ln(1 + e^{-1}), evaluated independently.
    let expect2 = (1.0 + (-1.0f64).exp()).ln();
    ensure((l2 - 0.31326).abs() <= 1e-5 && (l2 - expect2).abs() <= 1e-12, || format!("orthonormal M=2 gives {l2}"))?;

    let same = DenseArray::from_rows(&vec![vec![1.0, 0.0, 0.0]; 4]).unwrap();
    let l4 = sym_contrastive_loss(&same, &same, 5.0).map_err(|e| e.to_string())?;
    ensure((l4 - 1.38629).abs() <= 1e-5, || format!("degenerate M=4 gives {l4}, expected ln 4"))?;

    let mut rng = Rng::new(77);
    let mut worst = 0.0f64;
    for trial in 0..100 {
        let m = 1 + trial % 8;
        let d = 2 + trial % 5;
        let (s, c) = (unit(&mut rng, m, d), unit(&mut rng, m, d));
        let tau = 0.1 + 15.0 * rng.uniform();
        let fast = sym_contrastive_loss(&s, &c, tau).map_err(|e| e.to_string())?;
        worst = worst.max((fast - naive_sym_loss(&s, &c, tau)).abs());
    }
    ensure(worst <= 1e-10, || format!("double-loop oracle disagreement {worst:e} > 1e-10"))?;
    Ok(format!("M=1 {l1}, M=2 {l2:.6}, M=4 {l4:.6}; oracle max diff {worst:.1e}"))
}

fn mil_invariance() -> Check {
    let mut rng = Rng::new(2024);
    let mut drift = 0.0f64;
    for trial in 0..1000 {
        let dh = 3 + trial % 5;
        let cfg = AbmilConfig { embed_dim: 4, hidden_dim: 6, gated: trial % 2 == 0, max_slices: None };
        let p = cfg.init_params(dh, &mut rng.fork_indexed("init", trial)).unwrap();
        let n = 1 + rng.below(15);
        let bag = normal(&mut rng, n, dh);
        let mut order: Vec<usize> = (0..n).collect();
        rng.shuffle(&mut order);
        let a = pool("p", &bag, &p, &cfg).map_err(|e| e.to_string())?;
        let b = pool("p", &bag.select_rows(&order).unwrap(), &p, &cfg).map_err(|e| e.to_string())?;
        drift = a.s.iter().zip(&b.s).map(|(x, y)| (x - y).abs()).fold(drift, f64::max);
    }
    ensure(drift <= 1e-9, || format!("permutation drift {drift:e} > 1e-9"))?;

    // Pooling returns the convex combination of mapped rows, so a single row
    // or identical rows must come back as that row's mapping.
    let cfg = AbmilConfig { embed_dim: 4, hidden_dim: 6, gated: true, max_slices: None };
    let p = cfg.init_params(5, &mut rng.fork("fixed")).unwrap();
    let w = p.get("mil.map.weight").unwrap();
    let bias = p.get("mil.map.bias").unwrap();
    let row = normal(&mut rng, 1, 5);
    let mapped: Vec<f64> = (0..4).map(|j| (0..5).map(|i| row.data()[i] * w.data()[i * 4 + j]).sum::<f64>() + bias.data()[j]).collect();
    let mut fixed = 0.0f64;
    for n in [1usize, 2, 7] {
        let bag = DenseArray::from_rows(&vec![row.data().to_vec(); n]).unwrap();
        let v = pool("p", &bag, &p, &cfg).map_err(|e| e.to_string())?;
        fixed = v.s.iter().zip(&mapped).map(|(a, b)| (a - b).abs()).fold(fixed, f64::max);
        let alpha_err = v.alpha.iter().map(|a| (a - 1.0 / n as f64).abs()).fold(0.0, f64::max);
        fixed = fixed.max(alpha_err);
    }
    ensure(fixed <= 1e-12, || format!("fixed-point error {fixed:e} > 1e-12"))?;
    Ok(format!("1000 trials, max drift {drift:.1e}; fixed-point error {fixed:.1e}"))
}

fn preprocessing_oracles() -> Check {
    let dims = [4, 5, 6];
    let n: usize = dims.iter().product();
    let ramp = CtVolume::new("p", dims, [2.5, 0.7, 0.7], (0..n).map(|i| (i % 97) as f64 * 10.37 - 300.0).collect()).unwrap();
    let same = resample(&ramp, [2.5, 0.7, 0.7]).map_err(|e| e.to_string())?;
    ensure(
        same.dims() == dims && same.voxels().iter().zip(ramp.voxels()).all(|(a, b)| a.to_bits() == b.to_bits()),
        || "identity resample is not bit-exact".into(),
    )?;

    let (adims, sp) = ([7usize, 9, 8], [1.7, 0.9, 1.1]);
    let field = |z: f64, y: f64, x: f64| 2.0 * z - 3.0 * y + 5.0 * x + 11.0;
    let mut vox = Vec::new();
    for z in 0..adims[0] {
        for y in 0..adims[1] {
            for x in 0..adims[2] {
                vox.push(field(z as f64 * sp[0], y as f64 * sp[1], x as f64 * sp[2]));
            }
        }
    }
    let affine = CtVolume::new("a", adims, sp, vox).unwrap();
    let target = [1.0, 0.8, 0.8];
    let r = resample(&affine, target).map_err(|e| e.to_string())?;
    let [od, oh, ow] = r.dims();
    let mut worst = 0.0f64;
    let mut interior = 0;
    for z in 0..od {
        for y in 0..oh {
            for x in 0..ow {
                let p = [z as f64 * target[0], y as f64 * target[1], x as f64 * target[2]];
                if (0..3).all(|a| p[a] <= (adims[a] - 1) as f64 * sp[a]) {
                    worst = worst.max((r.get(z, y, x) - field(p[0], p[1], p[2])).abs());
                    interior += 1;
                }
            }
        }
    }
    ensure(interior > 0 && worst <= 1e-9, || format!("affine-field error {worst:e} over {interior} voxels"))?;

    let long = CtVolume::new("l", [100, 1, 1], [2.0, 1.0, 1.0], vec![0.0; 100]).unwrap();
    let up = resample(&long, [1.0, 1.0, 1.0]).map_err(|e| e.to_string())?;
    ensure(up.dims() == [200, 1, 1] && resampled_extent(100, 2.0, 1.0) == 200, || format!("size rule gave {:?}", up.dims()))?;

    for (lo, hi) in [(-1000.0, 400.0), (-150.0, 250.0), (-160.0, 240.0)] {
        let w = WindowSpec::new("w", lo, hi).map_err(|e| e.to_string())?;
        ensure(w.normalize(lo) == 0.0 && w.normalize(hi) == 1.0, || format!("window [{lo}, {hi}] endpoints not exact"))?;
    }
    Ok(format!("identity bit-exact; affine max error {worst:.1e} on {interior} voxels; 100@2.0mm -> 200@1.0mm; window endpoints exact"))
}

fn brute_auroc(scores: &[f64], labels: &[u32]) -> f64 {
    let mut num = 0.0;
    let mut pairs = 0.0;
    for (i, &si) in scores.iter().enumerate() {
        for (j, &sj) in scores.iter().enumerate() {
            if labels[i] == 1 && labels[j] == 0 {
                pairs += 1.0;
                num += if si > sj {
                    1.0
                } else if si == sj {
                    0.5
                } else {
                    0.0
                };
            }
        }
    }
    num / pairs
}

fn auroc_oracle() -> Check {
    let mut rng = Rng::new(99);
    let mut worst = 0.0f64;
    let mut tie_heavy = 0;
    let mut done = 0;
    while done < 1000 {
        let n = 2 + rng.below(40);
        let levels = if done % 2 == 0 { 1 + rng.below(4) } else { 0 };
        let scores: Vec<f64> = (0..n)
            .map(|_| if levels > 0 { rng.below(levels) as f64 * 0.25 } else { rng.normal() })
            .collect();
        let labels: Vec<u32> = (0..n).map(|_| u32::from(rng.bernoulli(0.4))).collect();
        if !labels.contains(&0) || !labels.contains(&1) {
            continue;
        }
        let fast = auroc(&scores, &labels).map_err(|e| e.to_string())?;
        worst = worst.max((fast - brute_auroc(&scores, &labels)).abs());
        tie_heavy += usize::from(levels > 0);
        done += 1;
    }
    ensure(worst <= 1e-12, || format!("disagreement {worst:e} > 1e-12"))?;
    Ok(format!("1000 sets ({tie_heavy} tie-heavy), max diff {worst:.1e}"))
}

/// Artifacts of one full default-config pipeline run.
struct RunOutput {
    results: Vec<ResultRecord>,
    results_bytes: Vec<u8>,
    align: AlignSummary,
    elapsed: Duration,
}

fn run_pipeline(seed: u64, out: &Path) -> Result<RunOutput, String> {
    let mut cfg = RunConfig::with_seed(seed);
    cfg.paths.out_dir = out.to_path_buf();
    let start = Instant::now();
    let pipeline = Pipeline::new(cfg, false);
    pipeline.run_all().map_err(|e| format!("seed {seed}: {e}"))?;
    let elapsed = start.elapsed();
    let results_bytes = std::fs::read(pipeline.layout.results()).map_err(|e| e.to_string())?;
    let results = serde_json::from_slice(&results_bytes).map_err(|e| e.to_string())?;
    let align = serde_json::from_slice(&std::fs::read(pipeline.layout.align_summary()).map_err(|e| e.to_string())?)
        .map_err(|e| e.to_string())?;
    Ok(RunOutput { results, results_bytes, align, elapsed })
}

fn mean_of(runs: &[RunOutput], model: &str, metric: &str, k: Option<usize>) -> Result<f64, String> {
    let mut vals = Vec::new();
    for r in runs {
        let rec = r
            .results
            .iter()
            .find(|x| x.report.model == model && x.report.metric == metric && x.report.k == k)
            .ok_or_else(|| format!("no {model} {metric} k={k:?} in results"))?;
        vals.push(rec.report.mean);
    }
    Ok(vals.iter().sum::<f64>() / vals.len() as f64)
}

const SEEDS: [u64; 5] = [1, 2, 3, 4, 5];

fn table_ordering(runs: &[RunOutput]) -> Check {
    let total: Duration = runs.iter().map(|r| r.elapsed).sum();
    let (ua, ca) = (mean_of(runs, "unimodal", "auroc", None)?, mean_of(runs, "contrastive", "auroc", None)?);
    let (uc, cc) = (mean_of(runs, "unimodal", "acc", None)?, mean_of(runs, "contrastive", "acc", None)?);
    let cat = mean_of(runs, "concatenation", "auroc", None)?;
    let summary = format!(
        "AUROC contrastive {ca:.4} vs unimodal {ua:.4} (concatenation {cat:.4}); ACC {cc:.4} vs {uc:.4}; {} seeds in {total:.1?}",
        runs.len()
    );
    ensure(ca >= ua, || format!("contrastive AUROC below unimodal: {summary}"))?;
    ensure(cc >= uc - 0.02, || format!("contrastive ACC more than 0.02 below unimodal: {summary}"))?;
    ensure(total < Duration::from_secs(600), || format!("runtime over 10 min: {summary}"))?;
    Ok(summary)
}

fn fewshot_trend(runs: &[RunOutput]) -> Check {
    let at = |k| mean_of(runs, "contrastive", "auroc", Some(k));
    let (k1, k5, k10) = (at(1)?, at(5)?, at(10)?);
    let repeats = runs[0]
        .results
        .iter()
        .find(|r| r.report.k == Some(1))
        .map_or(0, |r| r.report.values.len());
    ensure(repeats == 10, || format!("expected R=10 repeats, found {repeats}"))?;
    let summary = format!("contrastive AUROC k=1 {k1:.4}, k=5 {k5:.4}, k=10 {k10:.4}");
    ensure(k10 >= k1, || format!("k=10 below k=1: {summary}"))?;
    Ok(summary)
}

fn beats_chance(runs: &[RunOutput]) -> Check {
    let mut parts = Vec::new();
    for (seed, r) in SEEDS.iter().zip(runs) {
        let bound = (r.align.batch_size as f64).ln() - 0.3;
        ensure(r.align.final_loss < bound, || {
            format!("seed {seed}: final loss {:.4} not below ln M - 0.3 = {bound:.4}", r.align.final_loss)
        })?;
        parts.push(format!("{:.3}", r.align.final_loss));
    }
    let m = runs[0].align.batch_size;
    Ok(format!("final loss [{}] < ln {m} - 0.3 = {:.4}", parts.join(", "), (m as f64).ln() - 0.3))
}

fn determinism(first: &RunOutput, dir: &Path) -> Check {
    let again = run_pipeline(SEEDS[0], dir)?;
    ensure(again.results_bytes == first.results_bytes, || "results JSON differs between identical runs".into())?;
    Ok(format!("seed {}: {} bytes identical across two runs", SEEDS[0], first.results_bytes.len()))
}

fn report(failures: &mut usize, id: usize, name: &str, outcome: Check) {
    match outcome {
        Ok(detail) => println!("PASS  criterion {id}: {name}: {detail}"),
        Err(detail) => {
            *failures += 1;
            println!("FAIL  criterion {id}: {name}: {detail}");
        }
    }
}

fn main() {
    // `cargo test` passes harness flags such as `--list`; there is nothing to list.
    if std::env::args().any(|a| a == "--list") {
        return;
    }
    let mut failures = 0;
    report(&mut failures, 1, "gradient suite", gradient_suite());
    report(&mut failures, 2, "contrastive closed forms", closed_forms());
    report(&mut failures, 3, "MIL invariance", mil_invariance());
    report(&mut failures, 4, "preprocessing oracles", preprocessing_oracles());
    report(&mut failures, 5, "AUROC oracle", auroc_oracle());

    let tmp = tempfile::tempdir().expect("temp dir");
    let runs: Result<Vec<RunOutput>, String> =
        SEEDS.iter().map(|&s| run_pipeline(s, &tmp.path().join(format!("seed{s}")))).collect();
    match runs {
        Ok(runs) => {
            report(&mut failures, 6, "synthetic model ordering", table_ordering(&runs));
            report(&mut failures, 7, "few-shot trend", fewshot_trend(&runs));
            report(&mut failures, 8, "alignment beats chance", beats_chance(&runs));
            report(&mut failures, 9, "determinism", determinism(&runs[0], &tmp.path().join("repeat")));
        }
        Err(e) => {
            for (id, name) in [(6, "synthetic model ordering"), (7, "few-shot trend"), (8, "alignment beats chance"), (9, "determinism")] {
                report(&mut failures, id, name, Err(format!("pipeline failed: {e}")));
            }
        }
    }
    if failures > 0 {
        println!("{failures} acceptance criteria failed");
        std::process::exit(1);
    }
    println!("all acceptance criteria passed");
}
