//! Acceptance suite: one PASS/FAIL line per criterion, all on synthetic data.
//! The latency criterion only warns.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use vrf::bench;
use vrf::index_io::{load_index, save_index};
use vrf::manifest::Manifest;
use vrf::pipeline::Pipeline;
use vrf::tensor_io::{self, Tensor, TensorData};
use vrf::vrf_core::analysis::{self, combined_variance, optimal_weight_correlated, optimal_weight_independent};
use vrf::vrf_core::baselines::{calibrate_threshold, selective_predict, true_positive_rate, OodScorer};
use vrf::vrf_core::ensemble::{ensemble, ose, EnsembleConfig, Space};
use vrf::vrf_core::knn::ExactKnn;
use vrf::vrf_core::outputs::{accuracy, fit_temperature, normalize_features, predict, SplitRole};
use vrf::vrf_core::synth::{generate_dataset, generate_residual_pair, SynthSpec};
use vrf::vrf_core::weighting::{sweep_grid, GridSpec, WeightFunction, WeightKind};
use vrf::vrf_core::zsf::ZsfIndex;
use vrf::vrf_core::Matrix;
use vrf::{synth_io, Error};

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn normal(rng: &mut StdRng) -> f64 {
    let u1: f64 = rng.random_range(f64::EPSILON..1.0);
    let u2: f64 = rng.random();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

fn scan_argmax(row: &[f32]) -> u32 {
    let mut best = 0;
    for j in 1..row.len() {
        if row[j] > row[best] {
            best = j;
        }
    }
    best as u32
}

fn within_budget(elapsed: Duration, budget_s: f64) -> Result<(), String> {
    ensure(elapsed.as_secs_f64() < budget_s, || {
        format!("took {:.2} s, budget {budget_s} s", elapsed.as_secs_f64())
    })
}

fn zsf_oracle() -> Outcome {
    let start = Instant::now();
    let mut rng = StdRng::seed_from_u64(1);
    let mut total = 0;
    for _ in 0..50 {
        let k = rng.random_range(2..=10);
        let spec = SynthSpec {
            n_train: rng.random_range(20..=1000),
            n_val: 10,
            n_id_test: 10,
            n_ood_test: 10,
            n_ood_splits: 1,
            dim: rng.random_range(2..=16),
            num_classes: k,
            seed: rng.random(),
            zsf_fraction: rng.random_range(0.0..0.5),
            ..SynthSpec::default()
        };
        let data = generate_dataset(&spec).map_err(|e| e.to_string())?;
        let t = &data.split("train").unwrap().data;
        let index = ZsfIndex::build(&t.labels, &t.zs.logits, &t.ft.logits, &t.ft.features, 0.1)
            .map_err(|e| e.to_string())?;
        let expected: Vec<u32> = (0..t.len())
            .filter(|&i| {
                let y = t.labels[i];
                scan_argmax(t.ft.logits.row(i)) == y && scan_argmax(t.zs.logits.row(i)) != y
            })
            .map(|i| i as u32)
            .collect();
        ensure(index.source_indices() == &expected[..], || {
            format!("membership differs for spec {spec:?}")
        })?;
        total += expected.len();
    }
    within_budget(start.elapsed(), 5.0)?;
    Ok(format!("50 datasets, {total} members, 0 mismatches, {:.2} s", start.elapsed().as_secs_f64()))
}

fn random_unit(rng: &mut StdRng, rows: usize, dim: usize) -> Matrix<f32> {
    let v: Vec<f32> = (0..rows * dim).map(|_| normal(rng) as f32).collect();
    normalize_features(&Matrix::from_vec(rows, dim, v).unwrap()).unwrap()
}

fn knn_exactness() -> Outcome {
    let start = Instant::now();
    let mut rng = StdRng::seed_from_u64(2);
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let m = rng.random_range(50..=5000);
        let d = rng.random_range(2..=64);
        let k = rng.random_range(1..=50);
        let members = random_unit(&mut rng, m, d);
        let queries = random_unit(&mut rng, 20, d);
        let engine = ExactKnn::new(&members);
        let batch = engine.kth_distances(&queries, k).map_err(|e| e.to_string())?;
        for (qi, q) in queries.iter_rows().enumerate() {
            let mut all: Vec<f64> = members
                .iter_rows()
                .map(|r| r.iter().zip(q).map(|(&a, &b)| (a as f64 - b as f64).powi(2)).sum::<f64>().sqrt())
                .collect();
            all.sort_by(f64::total_cmp);
            let got = batch[qi];
            worst = worst.max((got - all[k - 1]).abs());
            ensure((got - all[k - 1]).abs() <= 1e-6, || format!("M={m} D={d} k={k}: {got} vs {}", all[k - 1]))?;
            ensure((0.0..=2.0).contains(&got), || format!("distance {got} outside [0, 2]"))?;
            let mut prev = 0.0;
            for kk in [1, k.div_ceil(2), k, (k + 1).min(m)] {
                let v = engine.kth_distance(q, kk).map_err(|e| e.to_string())?;
                ensure(v >= prev, || format!("not monotone in k at k={kk}"))?;
                prev = v;
            }
        }
    }
    within_budget(start.elapsed(), 30.0)?;
    Ok(format!("50 instances, max |err| {worst:.2e}, {:.2} s", start.elapsed().as_secs_f64()))
}

fn weight_laws() -> Outcome {
    let mut rng = StdRng::seed_from_u64(3);
    for _ in 0..100 {
        let a = rng.random_range(0.0..2.0);
        let b = rng.random_range(0.01..3.0);
        let w = WeightFunction::sigmoid(a, b).unwrap();
        let mid = w.weight(a).unwrap();
        ensure((mid - 0.5).abs() <= 1e-12, || format!("sigmoid({a}) = {mid}"))?;
        let grid: Vec<f64> = (0..10_000).map(|i| 2.0 * i as f64 / 9_999.0).collect();
        for f in [w, WeightFunction::linear(a, b).unwrap(), WeightFunction::binary(a).unwrap()] {
            let ws = f.weight_batch(&grid).unwrap();
            ensure(ws.windows(2).all(|p| p[1] <= p[0]), || format!("{f} increases somewhere"))?;
        }
    }
    for i in 0..=2000 {
        let d = i as f64 / 1000.0;
        for a in [0.1, 1.0, 1.9] {
            let v = WeightFunction::sigmoid(a, 1e6).unwrap().weight(d).unwrap();
            ensure((v - 0.5).abs() <= 1e-6, || format!("b=1e6 gives {v} at d={d}"))?;
        }
    }
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let n = 50;
        let k = rng.random_range(2..=10);
        let mk = |rng: &mut StdRng| {
            Matrix::from_vec(n, k, (0..n * k).map(|_| rng.random_range(-8.0f32..8.0)).collect()).unwrap()
        };
        let (zs, ft) = (mk(&mut rng), mk(&mut rng));
        let alpha = rng.random_range(0.0..=1.0);
        let c = WeightFunction::constant(alpha).unwrap();
        let weights = c.weight_batch(&vec![1.0; n]).unwrap();
        let vrf = ensemble(Space::Prob, &zs, &ft, &weights).unwrap();
        let base = ose(alpha, &zs, &ft).unwrap();
        for (x, y) in vrf.probs.matrix().as_slice().iter().zip(base.probs.matrix().as_slice()) {
            worst = worst.max((x - y).abs());
        }
        ensure(vrf.predictions == base.predictions, || "constant VRF predictions differ from OSE".into())?;
    }
    ensure(worst <= 1e-7, || format!("constant VRF vs OSE differ by {worst}"))?;
    Ok(format!("midpoint, monotonicity, b=1e6 limit, constant = OSE (max diff {worst:.1e})"))
}

fn grid_argmin(f: impl Fn(f64) -> f64) -> f64 {
    let mut best = (0.0, f64::INFINITY);
    for i in 0..=10_000 {
        let g = i as f64 * 1e-4;
        let v = f(g);
        if v < best.1 {
            best = (g, v);
        }
    }
    best.0
}

fn optimal_weights() -> Outcome {
    let start = Instant::now();
    let mut rng = StdRng::seed_from_u64(4);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let vz: f64 = rng.random_range(0.01..10.0);
        let vf: f64 = rng.random_range(0.01..10.0);
        let c = vz.min(vf) * rng.random_range(-1.0..0.999);
        let indep = |g: f64| (1.0 - g).powi(2) * vz + g * g * vf;
        let corr = |g: f64| indep(g) + 2.0 * g * (1.0 - g) * c;
        let e1 = (optimal_weight_independent(vz, vf).unwrap() - grid_argmin(indep)).abs();
        let e2 = (optimal_weight_correlated(vz, vf, c).ok_or("undefined closed form")? - grid_argmin(corr)).abs();
        worst = worst.max(e1).max(e2);
    }
    ensure(worst <= 2e-4, || format!("closed form off by {worst}"))?;
    within_budget(start.elapsed(), 10.0)?;
    Ok(format!("1000 triples, max |g - g_grid| {worst:.1e}, {:.2} s", start.elapsed().as_secs_f64()))
}

fn variance_prediction() -> Outcome {
    let start = Instant::now();
    let mut notes = Vec::new();
    for (i, &(vz, vf, corr)) in [(1.0, 1.0, 0.0), (3.0, 1.0, 0.0), (2.0, 1.0, 0.35)].iter().enumerate() {
        let (z, f) = generate_residual_pair(100_000, vz, vf, corr, 50 + i as u64).map_err(|e| e.to_string())?;
        let c = corr * (vz * vf).sqrt();
        let g = optimal_weight_correlated(vz, vf, c).unwrap();
        let predicted = combined_variance(g, vz, vf, c);
        let mixed: Vec<f64> = z.iter().zip(&f).map(|(a, b)| g * b + (1.0 - g) * a).collect();
        let mean = mixed.iter().sum::<f64>() / mixed.len() as f64;
        let var = mixed.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / mixed.len() as f64;
        let rel = (var - predicted).abs() / predicted;
        ensure(rel <= 0.03, || format!("({vz},{vf},{corr}): empirical {var} vs predicted {predicted}"))?;
        if corr == 0.0 {
            ensure(var <= vz.min(vf) * 1.01, || format!("({vz},{vf}): {var} above min variance"))?;
        }
        notes.push(format!("{rel:.4}"));
    }
    within_budget(start.elapsed(), 10.0)?;
    Ok(format!("relative errors {}", notes.join(", ")))
}

struct SynthFixture {
    _dir: tempfile::TempDir,
    pipeline: Pipeline,
    index: ZsfIndex,
}

fn fixture() -> Result<SynthFixture, String> {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let manifest = synth_io::generate_to(dir.path(), &SynthSpec::default()).map_err(|e| e.to_string())?;
    let pipeline = Pipeline::new(Manifest::load(&manifest).map_err(|e| e.to_string())?);
    let index = pipeline.build_zsf(0.1).map_err(|e| e.to_string())?;
    Ok(SynthFixture {
        _dir: dir,
        pipeline,
        index,
    })
}

fn ratio_monotone(fx: &SynthFixture) -> Outcome {
    let splits = fx.pipeline.test_splits();
    let curve = fx
        .pipeline
        .ratio_curve(&fx.index, &splits, &analysis::default_bin_centers(), analysis::DEFAULT_HALFWIDTH)
        .map_err(|e| e.to_string())?;
    let (x, y): (Vec<f64>, Vec<f64>) = curve.defined().into_iter().unzip();
    let rho = analysis::spearman(&x, &y).ok_or("fewer than two defined bins")?;
    ensure(rho <= -0.9, || format!("Spearman {rho}"))?;
    Ok(format!("{} defined bins, Spearman {rho:.3}", x.len()))
}

fn frontier_dominance(fx: &SynthFixture) -> Outcome {
    let grid = GridSpec::default();
    let sigmoid: Vec<EnsembleConfig> = sweep_grid(WeightKind::Sigmoid, &grid)
        .unwrap()
        .into_iter()
        .map(EnsembleConfig::new)
        .collect();
    let val = fx.pipeline.manifest().val_name().to_string();
    let sel = fx.pipeline.sweep(&val, Some(&fx.index), &sigmoid).map_err(|e| e.to_string())?.selected;
    let vrf = fx.pipeline.frontier(Some(&fx.index), &[sel.config]).map_err(|e| e.to_string())?.points[0].clone();
    let ose_configs: Vec<EnsembleConfig> = sweep_grid(WeightKind::Constant, &grid)
        .unwrap()
        .into_iter()
        .map(EnsembleConfig::new)
        .collect();
    let ose = fx.pipeline.frontier(None, &ose_configs).map_err(|e| e.to_string())?.points;
    for p in &ose {
        ensure(vrf.id_accuracy >= p.id_accuracy - 0.002 && vrf.ood_mean >= p.ood_mean, || {
            format!(
                "{} (ID {:.4}, OOD {:.4}) not dominated by {} (ID {:.4}, OOD {:.4})",
                p.config.weight_fn, p.id_accuracy, p.ood_mean, sel.config.weight_fn, vrf.id_accuracy, vrf.ood_mean
            )
        })?;
    }
    let best_id = ose.iter().map(|p| p.id_accuracy).fold(0.0, f64::max);
    let best_ood = ose.iter().map(|p| p.ood_mean).fold(0.0, f64::max);
    Ok(format!(
        "{}: ID {:.4} OOD {:.4}; OSE best ID {best_id:.4}, best OOD {best_ood:.4}",
        sel.config.weight_fn, vrf.id_accuracy, vrf.ood_mean
    ))
}

fn selective_prediction(fx: &SynthFixture) -> Outcome {
    let mut rng = StdRng::seed_from_u64(8);
    let scores: Vec<f64> = (0..10_000).map(|_| normal(&mut rng)).collect();
    let lambda = calibrate_threshold(&scores, 0.95).map_err(|e| e.to_string())?;
    let tpr = true_positive_rate(&scores, lambda);
    ensure((0.945..=0.955).contains(&tpr), || format!("TPR {tpr}"))?;

    let p = &fx.pipeline;
    let kinds = vrf::vrf_core::baselines::DetectorKind::ALL;
    for (lambda, tag) in [(f64::INFINITY, "zs"), (f64::NEG_INFINITY, "ft")] {
        let reports = p.baselines(&kinds, 0.95, 0.1, Some(lambda)).map_err(|e| e.to_string())?;
        let id_name = p.manifest().names_with_role(SplitRole::IdTest)[0].to_string();
        let id = p.load(&id_name).map_err(|e| e.to_string())?;
        let logits = if tag == "zs" { &id.zs.logits } else { &id.ft.logits };
        let expected = accuracy(&predict(logits).unwrap(), &id.labels);
        for r in &reports {
            ensure(r.id_acc == expected, || format!("{} at lambda {lambda}: {} vs {expected}", r.detector, r.id_acc))?;
            for (name, acc) in &r.ood_acc {
                let d = p.load(name).map_err(|e| e.to_string())?;
                let logits = if tag == "zs" { &d.zs.logits } else { &d.ft.logits };
                ensure(*acc == accuracy(&predict(logits).unwrap(), &d.labels), || format!("{name} mismatch"))?;
            }
        }
    }

    // Binary weight at `a` vs the kNN detector over the same members at
    // lambda = -a.
    let scorer = OodScorer::Knn(fx.index.clone());
    let mut compared = 0;
    for name in p.test_splits() {
        let data = p.load(&name).map_err(|e| e.to_string())?;
        let distances = p.distances(&fx.index, &data).map_err(|e| e.to_string())?;
        for a in [0.35, 0.55, 0.8] {
            ensure(distances.iter().all(|&d| d != a), || "distance exactly at the threshold".into())?;
            let config = EnsembleConfig::new(WeightFunction::binary(a).unwrap());
            let vrf = p.vrf_pipeline(&name, Some(&fx.index), &config).map_err(|e| e.to_string())?;
            let scores = p.scores(&scorer, &data).map_err(|e| e.to_string())?;
            let sp = selective_predict(&scores, -a, &predict(&data.zs.logits).unwrap(), &predict(&data.ft.logits).unwrap())
                .map_err(|e| e.to_string())?;
            ensure(vrf.predictions == sp, || format!("{name}, a={a}: predictions differ"))?;
            compared += sp.len();
        }
    }
    Ok(format!("TPR {:.2}%, ±inf overrides exact, {compared} routed predictions identical", 100.0 * tpr))
}

fn temperature_recovery() -> Outcome {
    let mut rng = StdRng::seed_from_u64(9);
    let mut found = Vec::new();
    for t_true in [0.5, 1.0, 2.0] {
        let (n, k) = (20_000, 6);
        let mut logits = Vec::with_capacity(n * k);
        let mut labels = Vec::with_capacity(n);
        for _ in 0..n {
            let base: Vec<f64> = (0..k).map(|_| 1.5 * normal(&mut rng)).collect();
            let z: f64 = base.iter().map(|v| v.exp()).sum();
            let mut u = rng.random::<f64>() * z;
            let mut y = k - 1;
            for (j, v) in base.iter().enumerate() {
                u -= v.exp();
                if u < 0.0 {
                    y = j;
                    break;
                }
            }
            labels.push(y as u32);
            logits.extend(base.iter().map(|v| (v * t_true) as f32));
        }
        let m = Matrix::from_vec(n, k, logits).unwrap();
        let t = fit_temperature(&m, &labels).map_err(|e| e.to_string())?.get();
        ensure((t - t_true).abs() <= 0.05, || format!("T* = {t_true}, fitted {t}"))?;
        found.push(format!("{t_true} -> {t:.3}"));
    }
    Ok(found.join(", "))
}

fn latency() -> Outcome {
    let members = bench::random_unit_rows(100_000, 512, 10).map_err(|e| e.to_string())?;
    let queries = bench::random_unit_rows(256, 512, 11).map_err(|e| e.to_string())?;
    let engine = ExactKnn::new(&members);
    let r = bench::run(&engine, &queries, 100, 5, 3).map_err(|e| e.to_string())?;
    let line = format!(
        "batch median {:.3} ms/query ({} kernel), single-query median {:.3} ms",
        r.batch_median_ms, r.kernel, r.single_median_ms
    );
    if r.batch_median_ms < 2.0 {
        Ok(line)
    } else {
        Ok(format!("WARN above 2 ms: {line}"))
    }
}

fn expect_err<T>(r: Result<T, Error>, what: &str, pred: impl Fn(&Error) -> bool) -> Result<(), String> {
    match r {
        Ok(_) => Err(format!("{what}: accepted")),
        Err(e) if pred(e.root()) => Ok(()),
        Err(e) => Err(format!("{what}: unexpected error {e}")),
    }
}

fn round_trips() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let path = |n: &str| dir.path().join(n);
    let mut rng = StdRng::seed_from_u64(12);

    let floats: Vec<f32> = (0..1000 * 512).map(|_| f32::from_bits(rng.random::<u32>() & 0xbfff_ffff)).collect();
    let t = Tensor::new(vec![1000, 512], TensorData::F32(floats)).unwrap();
    tensor_io::write_tensor(&path("a.vrf"), &t).map_err(|e| e.to_string())?;
    let back = tensor_io::read_tensor(&path("a.vrf")).map_err(|e| e.to_string())?;
    ensure(back.encode().unwrap() == t.encode().unwrap(), || "f32 tensor not bitwise equal".into())?;
    for t in [
        Tensor::vector_u32((0..997).collect()),
        Tensor::new(vec![0, 4], TensorData::F32(vec![])).unwrap(),
    ] {
        tensor_io::write_tensor(&path("b.vrf"), &t).map_err(|e| e.to_string())?;
        ensure(tensor_io::read_tensor(&path("b.vrf")).map_err(|e| e.to_string())? == t, || "round trip".into())?;
    }

    let members = random_unit(&mut rng, 300, 16);
    let index = ZsfIndex::from_members(&members, (0..300).map(|i| i * 2).collect(), 5.0).unwrap();
    save_index(&index, &path("idx.vrf")).map_err(|e| e.to_string())?;
    let loaded = load_index(&path("idx.vrf")).map_err(|e| e.to_string())?;
    ensure(loaded.members().as_slice().iter().map(|v| v.to_bits()).eq(index.members().as_slice().iter().map(|v| v.to_bits())), || {
        "index members differ".into()
    })?;
    ensure(loaded.k() == index.k() && loaded.p_percent() == index.p_percent() && loaded.source_indices() == index.source_indices(), || {
        "index metadata differs".into()
    })?;
    let q = random_unit(&mut rng, 100, 16);
    ensure(loaded.distances(&q).unwrap() == index.distances(&q).unwrap(), || "distances differ after reload".into())?;

    let spec = SynthSpec {
        n_train: 300,
        n_val: 50,
        n_id_test: 50,
        n_ood_test: 50,
        ..SynthSpec::default()
    };
    let m1 = synth_io::generate_to(&path("s1"), &spec).map_err(|e| e.to_string())?;
    let m2 = synth_io::generate_to(&path("s2"), &spec).map_err(|e| e.to_string())?;
    ensure(std::fs::read(&m1).unwrap() == std::fs::read(&m2).unwrap(), || "manifests differ between identical runs".into())?;
    let manifest = Manifest::load(&m1).map_err(|e| e.to_string())?;
    for entry in manifest.splits() {
        for f in [&entry.features_zs, &entry.features_ft, &entry.logits_zs, &entry.logits_ft, &entry.labels] {
            let a = std::fs::read(path("s1").join(f)).unwrap();
            let b = std::fs::read(path("s2").join(f)).unwrap();
            ensure(a == b, || format!("{f} differs between identical runs"))?;
        }
    }
    manifest.save(&path("s1/copy.json")).map_err(|e| e.to_string())?;
    let again = Manifest::load(&path("s1/copy.json")).map_err(|e| e.to_string())?;
    ensure(again.doc() == manifest.doc(), || "manifest round trip".into())?;
    ensure(std::fs::read(&m1).unwrap() == std::fs::read(path("s1/copy.json")).unwrap(), || "manifest bytes differ".into())?;

    // Malformed inputs.
    let good = std::fs::read(path("b.vrf")).unwrap();
    let write = |name: &str, bytes: &[u8]| std::fs::write(path(name), bytes).unwrap();
    let mut bad = good.clone();
    bad[..4].copy_from_slice(b"XXXX");
    write("magic.vrf", &bad);
    expect_err(tensor_io::read_tensor(&path("magic.vrf")), "bad magic", |e| matches!(e, Error::BadMagic(_)))?;
    let ten = Tensor::new(vec![10, 10], TensorData::F32(vec![0.5; 100])).unwrap().encode().unwrap();
    write("short.vrf", &ten[..22 + 50 * 4]);
    expect_err(tensor_io::read_tensor(&path("short.vrf")), "truncated", |e| matches!(e, Error::Truncated { .. }))?;
    expect_err(tensor_io::read_header(&path("short.vrf")), "truncated header check", |e| matches!(e, Error::Truncated { .. }))?;
    let mut over = b"VRF1\x01\x02".to_vec();
    over.extend_from_slice(&u64::MAX.to_le_bytes());
    over.extend_from_slice(&3u64.to_le_bytes());
    write("over.vrf", &over);
    expect_err(tensor_io::read_tensor(&path("over.vrf")), "dims overflow", |e| matches!(e, Error::DimsOverflow))?;

    let idx_bytes = std::fs::read(path("idx.vrf")).unwrap();
    std::fs::write(path("idx.vrf"), &idx_bytes[..idx_bytes.len() - 7]).unwrap();
    expect_err(load_index(&path("idx.vrf")), "truncated index", |e| matches!(e, Error::Truncated { .. }))?;

    let doc = std::fs::read_to_string(&m1).unwrap();
    let dup = doc.replacen("\"val\"", "\"train\"", 1);
    std::fs::write(path("s1/dup.json"), dup).unwrap();
    expect_err(Manifest::load(&path("s1/dup.json")), "duplicate split", |e| matches!(e, Error::DuplicateSplit(_)))?;
    let k5 = doc.replacen("\"num_classes\": 10", "\"num_classes\": 5", 1);
    std::fs::write(path("s1/k5.json"), k5).unwrap();
    expect_err(Manifest::load(&path("s1/k5.json")), "class count", |e| matches!(e, Error::DimensionMismatch { .. }))?;
    let extra = doc.replacen("\"num_classes\"", "\"extra\": 1, \"num_classes\"", 1);
    std::fs::write(path("s1/extra.json"), extra).unwrap();
    expect_err(Manifest::load(&path("s1/extra.json")), "unknown key", |e| matches!(e, Error::Json { .. }))?;
    std::fs::remove_file(path("s1").join(&manifest.splits()[1].labels)).unwrap();
    expect_err(Manifest::load(&m1), "missing file", |e| matches!(e, Error::Io { .. }))?;

    Ok("tensors, index, manifests bitwise; 9 malformed inputs rejected with typed errors".into())
}

fn main() -> ExitCode {
    let mut failed = 0;
    let mut report = |id: u32, name: &str, f: &mut dyn FnMut() -> Outcome| {
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            Err(p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_else(|| "panic".into()))
        });
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(msg) => println!("criterion {id:>2} PASS  {name}: {msg} [{secs:.1} s]"),
            Err(msg) => {
                failed += 1;
                println!("criterion {id:>2} FAIL  {name}: {msg} [{secs:.1} s]");
            }
        }
    };
    report(1, "ZSF oracle equivalence", &mut zsf_oracle);
    report(2, "k-NN exactness", &mut knn_exactness);
    report(3, "weight-function laws", &mut weight_laws);
    report(4, "optimal-weight closed forms", &mut optimal_weights);
    report(5, "variance prediction", &mut variance_prediction);
    match fixture() {
        Ok(fx) => {
            report(6, "monotone ratio", &mut || ratio_monotone(&fx));
            report(7, "frontier dominance", &mut || frontier_dominance(&fx));
            report(8, "selective-prediction calibration", &mut || selective_prediction(&fx));
        }
        Err(e) => {
            for (id, name) in [(6, "monotone ratio"), (7, "frontier dominance"), (8, "selective-prediction calibration")] {
                report(id, name, &mut || Err(format!("synthetic fixture: {e}")));
            }
        }
    }
    report(9, "temperature recovery", &mut temperature_recovery);
    report(10, "k-NN latency (soft)", &mut latency);
    report(11, "format round-trips", &mut round_trips);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    }
}
