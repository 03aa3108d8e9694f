//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit if any
//! criterion fails.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::{Duration, Instant};

use cogdiag::alignment::{
    info_nce, load_embeddings_jsonl, write_embeddings_jsonl, AlignmentConfig, EmbeddingSource, EmbeddingTable,
    EmbeddingTables, EntityKind,
};
use cogdiag::cdm::{predict_dina, predict_ncd, Batch, Cdm, ModelConfig, ModelDims, ModelKind};
use cogdiag::dataset::{
    build_q_matrix, split_dataset, DatasetSplit, FrequencyTable, QMatrix, ResponseLog, DEFAULT_COLD_LT,
    DEFAULT_DROPOUT_RATIOS, DEFAULT_WARM_GT,
};
use cogdiag::numerics::{gradient_check, value_and_grad, value_only, GradCheckOptions, Params, Tensor};
use cogdiag::pipeline::{
    auc, compute_metrics, dropout_sweep, evaluate_cold_warm, generate_synthetic, train, AlignContext, AlignMode,
    Subset, SyntheticSpec, TrainConfig,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        pass,
        detail: detail.into(),
    }
}

fn criterion(id: u32, name: &str, f: impl FnOnce() -> Verdict) -> bool {
    let start = Instant::now();
    let v = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
        let msg = e
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_default();
        verdict(false, format!("panicked: {msg}"))
    });
    println!(
        "{} [{id}] {name}: {} ({:.1}s)",
        if v.pass { "PASS" } else { "FAIL" },
        v.detail,
        start.elapsed().as_secs_f64()
    );
    v.pass
}

fn within(start: Instant, limit: Duration) -> bool {
    start.elapsed() < limit
}

fn random_table(kind: EntityKind, n: usize, d: usize, rng: &mut ChaCha8Rng) -> EmbeddingTable {
    let data = (0..n * d).map(|_| rng.random_range(-1.0..1.0)).collect();
    EmbeddingTable::new(
        kind,
        (0..n).map(|i| format!("{}{i}", kind.name())).collect(),
        Tensor::matrix(n, d, data).unwrap(),
        EmbeddingSource::Synthetic,
    )
    .unwrap()
}

fn random_batch(dims: ModelDims, n: usize, rng: &mut ChaCha8Rng) -> Batch {
    let students = (0..n).map(|_| rng.random_range(0..dims.students)).collect();
    let exercises = (0..n).map(|_| rng.random_range(0..dims.exercises)).collect();
    let labels = (0..n).map(|_| f64::from(rng.random_range(0..2u8))).collect();
    let mut q = Tensor::zeros(n, dims.concepts);
    for i in 0..n {
        for _ in 0..rng.random_range(1..=2) {
            let k = rng.random_range(0..dims.concepts);
            q.row_mut(i)[k] = 1.0;
        }
    }
    Batch {
        students,
        exercises,
        labels,
        q_rows: q,
    }
}

/// Moves every block off its initialization so the check sees curvature
/// and no relu unit sits on its kink.
fn spread(params: &mut Params, rng: &mut ChaCha8Rng) {
    for (name, t) in params.iter_mut() {
        let width = if name.starts_with("align.") { 0.15 } else { 1.0 };
        for v in t.data_mut() {
            *v += rng.random_range(-width..width);
        }
    }
}

fn gradient_correctness() -> Verdict {
    let start = Instant::now();
    let mut checked = 0;
    let mut worst: f64 = 0.0;
    let mut failures = Vec::new();
    for kind in ModelKind::ALL {
        for mode in [AlignMode::None, AlignMode::Beh, AlignMode::Sem] {
            for seed in 0..20u64 {
                let mut rng = ChaCha8Rng::seed_from_u64(1000 * seed + 7);
                let dims = ModelDims {
                    students: rng.random_range(3..=10),
                    exercises: rng.random_range(3..=10),
                    concepts: rng.random_range(2..=4),
                };
                let mut config = ModelConfig::new(kind);
                config.mirt_dim = 3;
                config.ncd_hidden = [6, 4];
                let cdm = Cdm::new(config, dims).unwrap();
                let tables = EmbeddingTables {
                    students: random_table(EntityKind::Student, dims.students, 5, &mut rng),
                    exercises: random_table(EntityKind::Exercise, dims.exercises, 5, &mut rng),
                };
                let freq = FrequencyTable {
                    students: (0..dims.students).map(|_| rng.random_range(0..12)).collect(),
                    exercises: (0..dims.exercises).map(|_| rng.random_range(0..12)).collect(),
                };
                let cfg = AlignmentConfig {
                    k: 3,
                    projection_hidden: 6,
                    ..AlignmentConfig::default()
                };
                let ctx = match mode {
                    AlignMode::None => None,
                    m => Some(AlignContext::new(m, &cdm, &cfg, &tables, &freq).unwrap()),
                };
                let mut params = cdm.init_params(&mut rng);
                if let Some(ctx) = &ctx {
                    params.extend(ctx.init_projections(&mut rng));
                }
                spread(&mut params, &mut rng);
                let batch = random_batch(dims, rng.random_range(6..=16), &mut rng);
                let objective = |t: &mut cogdiag::numerics::Tape, n: &cogdiag::numerics::ParamNodes| {
                    let base = cdm.loss(t, n, &batch)?;
                    match &ctx {
                        None => Ok(base),
                        Some(ctx) => {
                            let mut rng = ChaCha8Rng::seed_from_u64(seed);
                            let extra = ctx.loss(t, n, &cdm, &batch, &mut rng)?;
                            t.add(base, extra)
                        }
                    }
                };
                let (_, grads) = value_and_grad(&params, objective).unwrap();
                let report = gradient_check(
                    |p: &Params| value_only(p, objective),
                    &params,
                    &grads,
                    GradCheckOptions::default(),
                )
                .unwrap();
                checked += 1;
                worst = worst.max(report.worst());
                if !report.passed() {
                    failures.push(format!("{kind}/{} seed {seed} ({:.2e})", mode.name(), report.worst()));
                }
            }
        }
    }
    let fast = within(start, Duration::from_secs(60));
    verdict(
        failures.is_empty() && fast,
        format!(
            "{checked} instances, worst relative error {worst:.2e}, {} failures{}{}",
            failures.len(),
            if failures.is_empty() {
                String::new()
            } else {
                format!(" {failures:?}")
            },
            if fast { "" } else { ", over 60 s" }
        ),
    )
}

fn info_nce_loop(anchors: &[Vec<f64>], pos: &[usize], cands: &[Vec<f64>], tau: f64) -> f64 {
    let unit = |v: &[f64]| -> Vec<f64> {
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.iter().map(|x| x / n).collect()
    };
    let cands: Vec<Vec<f64>> = cands.iter().map(|c| unit(c)).collect();
    let mut total = 0.0;
    for (a, &p) in anchors.iter().zip(pos) {
        let a = unit(a);
        let sim = |c: &[f64]| a.iter().zip(c).map(|(x, y)| x * y).sum::<f64>() / tau;
        let mut denom = 0.0;
        for c in &cands {
            denom += sim(c).exp();
        }
        total += -(sim(&cands[p]).exp() / denom).ln();
    }
    total / anchors.len() as f64
}

fn info_nce_oracle() -> Verdict {
    let e = |x: f64| (1.0 + x.exp()).ln();
    let a = Tensor::matrix(1, 2, vec![1.0, 0.0]).unwrap();
    let c = Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
    let w1 = info_nce(&a, &["a"], &c, &["a", "b"], 1.0).unwrap();
    let w2 = info_nce(&a, &["a"], &c, &["a", "b"], 0.5).unwrap();
    let worked = (w1 - e(-1.0)).abs() < 1e-9 && (w2 - e(-2.0)).abs() < 1e-9;

    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let n = rng.random_range(1..=32);
        let m = rng.random_range(1..=n);
        let d = rng.random_range(1..=16);
        let tau = rng.random_range(0.05..2.0);
        let vec = |rng: &mut ChaCha8Rng| -> Vec<f64> {
            loop {
                let v: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
                if v.iter().any(|x| x.abs() > 1e-3) {
                    return v;
                }
            }
        };
        let cands: Vec<Vec<f64>> = (0..n).map(|_| vec(&mut rng)).collect();
        let anchors: Vec<Vec<f64>> = (0..m).map(|_| vec(&mut rng)).collect();
        let pos: Vec<usize> = (0..m).map(|_| rng.random_range(0..n)).collect();
        let ids: Vec<usize> = (0..n).collect();
        let got = info_nce(
            &Tensor::from_rows(&anchors).unwrap(),
            &pos,
            &Tensor::from_rows(&cands).unwrap(),
            &ids,
            tau,
        )
        .unwrap();
        worst = worst.max((got - info_nce_loop(&anchors, &pos, &cands, tau)).abs());
    }
    verdict(
        worked && worst < 1e-9,
        format!("worked values {w1:.6} {w2:.6}; 100 random instances, max |diff| {worst:.2e}"),
    )
}

fn pairwise_auc(scores: &[f64], labels: &[f64]) -> f64 {
    let (mut num, mut den) = (0.0, 0.0);
    for i in 0..scores.len() {
        for j in 0..scores.len() {
            if labels[i] == 1.0 && labels[j] == 0.0 {
                den += 1.0;
                if scores[i] > scores[j] {
                    num += 1.0;
                } else if scores[i] == scores[j] {
                    num += 0.5;
                }
            }
        }
    }
    num / den
}

fn metric_oracles() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut mismatches = 0;
    for case in 0..100 {
        let n = rng.random_range(2..=60);
        let ties = case % 2 == 0;
        let mut labels: Vec<f64> = (0..n).map(|_| f64::from(rng.random_range(0..2u8))).collect();
        labels[0] = 1.0;
        labels[1] = 0.0;
        let scores: Vec<f64> = (0..n)
            .map(|_| {
                if ties {
                    f64::from(rng.random_range(0..5u8)) / 4.0
                } else {
                    rng.random::<f64>()
                }
            })
            .collect();
        if auc(&scores, &labels).unwrap() != pairwise_auc(&scores, &labels) {
            mismatches += 1;
        }
    }
    let m1 = compute_metrics(&[0.6, 0.4], &[1.0, 0.0], 0.5, Subset::All).unwrap();
    let m2 = compute_metrics(&[1.0, 0.0], &[0.0, 1.0], 0.5, Subset::All).unwrap();
    let m3 = compute_metrics(&[0.9, 0.2, 0.6], &[1.0, 0.0, 0.0], 0.5, Subset::All).unwrap();
    let rmse3 = ((0.1f64.powi(2) + 0.2f64.powi(2) + 0.6f64.powi(2)) / 3.0).sqrt();
    let examples = m1.acc == 1.0
        && m2.rmse == 1.0
        && (m3.acc - 2.0 / 3.0).abs() < 1e-12
        && (m3.rmse - rmse3).abs() < 1e-12
        && auc(&[0.9, 0.8, 0.7, 0.1], &[1.0, 0.0, 1.0, 0.0]).unwrap() == 0.75;
    verdict(
        mismatches == 0 && examples,
        format!(
            "{mismatches} AUC mismatches in 100 instances; examples acc {:.4} rmse {:.4} / {:.4} (direct {:.4})",
            m3.acc, m2.rmse, m3.rmse, rmse3
        ),
    )
}

fn classic_dina() -> Verdict {
    const SATURATED: f64 = 60.0;
    let mut worst: f64 = 0.0;
    let mut cases = 0;
    for (slip, guess) in [(-2.0, -1.5), (0.3, -0.7), (-1.0, 1.0), (0.0, 0.0)] {
        let s = 1.0 / (1.0 + f64::exp(-slip));
        let g = 1.0 / (1.0 + f64::exp(-guess));
        for k in 1..=4usize {
            let required: Vec<usize> = (0..k).collect();
            for pattern in 0..(1u32 << k) {
                let logits: Vec<f64> = (0..k)
                    .map(|i| if pattern >> i & 1 == 1 { SATURATED } else { -SATURATED })
                    .collect();
                let eta = f64::from(u8::from(pattern == (1 << k) - 1));
                let classic = (1.0 - s).powf(eta) * g.powf(1.0 - eta);
                let got = predict_dina(&logits, slip, guess, &required).unwrap().value();
                worst = worst.max((got - classic).abs());
                cases += 1;
            }
        }
    }
    verdict(
        worst < 1e-9,
        format!("{cases} mastery patterns, max |diff| {worst:.2e}"),
    )
}

fn reorder(tables: &EmbeddingTables, split: &DatasetSplit) -> EmbeddingTables {
    let text = write_embeddings_jsonl(&[&tables.students, &tables.exercises]).unwrap();
    load_embeddings_jsonl(&text, &split.indices).unwrap()
}

struct Prepared {
    split: DatasetSplit,
    q: QMatrix,
    tables: EmbeddingTables,
}

fn standard(seed: u64) -> Prepared {
    let data = generate_synthetic(&SyntheticSpec::standard(seed)).unwrap();
    let split = split_dataset(&data.logs, [0.8, 0.1, 0.1], seed).unwrap();
    let q = build_q_matrix(&split).unwrap();
    let tables = reorder(&data.embeddings, &split);
    Prepared { split, q, tables }
}

fn ncd_monotonicity() -> Verdict {
    let start = Instant::now();
    let p = standard(0);
    let mut cfg = TrainConfig::new(ModelKind::Ncd, AlignMode::None, 0);
    cfg.patience = cfg.epochs;
    let outcome = train(&cfg, &p.split, &p.q, None, &AlignmentConfig::default()).unwrap();
    let model = &outcome.model;
    let layers = model.model.ncd_layers(&model.params).unwrap();
    let student = &model.params["ncd.student"];
    let difficulty = &model.params["ncd.difficulty"];
    let disc = &model.params["ncd.discrimination"];
    let grid: Vec<f64> = (0..20).map(|i| -6.0 + 12.0 * i as f64 / 19.0).collect();
    let (mut probes, mut violations) = (0, 0);
    let mut worst: f64 = 0.0;
    for e in 0..p.q.n_exercises() {
        let q_row = p.q.row(e);
        for k in p.q.concepts_of(e) {
            for s in (0..p.split.n_students()).step_by(40) {
                let mut row = student.row(s).to_vec();
                let mut prev = None;
                for &x in &grid {
                    row[k] = x;
                    let y = predict_ncd(&row, difficulty.row(e), disc.get(e, 0), q_row, &layers)
                        .unwrap()
                        .value();
                    if let Some(prev) = prev {
                        let step: f64 = y - prev;
                        probes += 1;
                        worst = worst.min(step);
                        if step < 0.0 {
                            violations += 1;
                        }
                    }
                    prev = Some(y);
                }
            }
        }
    }
    let fast = within(start, Duration::from_secs(120));
    verdict(
        violations == 0 && fast && outcome.history.len() == cfg.epochs,
        format!(
            "{} epochs, {probes} grid steps, {violations} decreases (most negative step {worst:.2e})",
            outcome.history.len()
        ),
    )
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn cold_start_benefit() -> Verdict {
    let start = Instant::now();
    let modes = [AlignMode::None, AlignMode::Beh, AlignMode::Sem];
    let mut full = [Vec::new(), Vec::new(), Vec::new()];
    let mut cold = [Vec::new(), Vec::new(), Vec::new()];
    let mut undefined = 0;
    for seed in 0..5u64 {
        let p = standard(seed);
        let freq = FrequencyTable::from_train(&p.split.train, &p.split.indices).unwrap();
        let mut seed_cold = Vec::new();
        let mut seed_full = Vec::new();
        for mode in modes {
            let cfg = TrainConfig::new(ModelKind::Ncd, mode, seed);
            let outcome = train(&cfg, &p.split, &p.q, Some(&p.tables), &AlignmentConfig::default()).unwrap();
            let rows =
                evaluate_cold_warm(&outcome.model, &p.split, &p.q, &freq, DEFAULT_COLD_LT, DEFAULT_WARM_GT).unwrap();
            let get = |s: Subset| rows.iter().find(|m| m.subset == s).and_then(|m| m.auc);
            seed_full.push(get(Subset::All).unwrap());
            seed_cold.push(get(Subset::Cold));
        }
        for i in 0..3 {
            full[i].push(seed_full[i]);
        }
        if seed_cold.iter().all(Option::is_some) {
            for i in 0..3 {
                cold[i].push(seed_cold[i].unwrap());
            }
        } else {
            undefined += 1;
        }
    }
    let f: Vec<f64> = full.iter().map(|v| mean(v)).collect();
    let c: Vec<f64> = cold.iter().map(|v| mean(v)).collect();
    let beh_cold = c[1] >= c[0] + 0.01;
    let sem_cold = c[2] >= c[0];
    let full_ok = f[1] >= f[0] - 0.005 && f[2] >= f[0] - 0.005;
    let fast = within(start, Duration::from_secs(600));
    verdict(
        beh_cold && sem_cold && full_ok && fast && !cold[0].is_empty(),
        format!(
            "cold AUC ncd {:.4} beh {:.4} ({}) sem {:.4} ({}); full AUC ncd {:.4} beh {:.4} sem {:.4} ({}); {} seeds without a two-class cold subset",
            c[0],
            c[1],
            if beh_cold { "≥ ncd + 0.01" } else { "< ncd + 0.01" },
            c[2],
            if sem_cold { "≥ ncd" } else { "< ncd" },
            f[0],
            f[1],
            f[2],
            if full_ok { "within 0.005" } else { "more than 0.005 below" },
            undefined
        ),
    )
}

fn ranks(xs: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..xs.len()).collect();
    order.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut r = vec![0.0; xs.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && xs[order[j + 1]] == xs[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &o in &order[i..=j] {
            r[o] = avg;
        }
        i = j + 1;
    }
    r
}

fn spearman(xs: &[f64], ys: &[f64]) -> f64 {
    let (rx, ry) = (ranks(xs), ranks(ys));
    let (mx, my) = (mean(&rx), mean(&ry));
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    cov / (vx * vy).sqrt()
}

fn dropout_trend() -> Verdict {
    let p = standard(0);
    let seeds: Vec<u64> = (0..5).collect();
    let mut parts = Vec::new();
    let mut pass = true;
    for mode in [AlignMode::None, AlignMode::Beh] {
        let cfg = TrainConfig::new(ModelKind::Ncd, mode, 0);
        let rows = dropout_sweep(
            &cfg,
            &p.split,
            &p.q,
            Some(&p.tables),
            &AlignmentConfig::default(),
            &DEFAULT_DROPOUT_RATIOS,
            &seeds,
        )
        .unwrap();
        let means: Vec<f64> = DEFAULT_DROPOUT_RATIOS
            .iter()
            .map(|&r| {
                mean(
                    &rows
                        .iter()
                        .filter(|x| x.ratio == r)
                        .filter_map(|x| x.metrics.auc)
                        .collect::<Vec<_>>(),
                )
            })
            .collect();
        let rho = spearman(&DEFAULT_DROPOUT_RATIOS, &means);
        pass &= rho <= 0.0;
        let curve: Vec<String> = means.iter().map(|m| format!("{m:.4}")).collect();
        parts.push(format!(
            "{} rho {rho:.2} [{}]",
            if mode == AlignMode::None { "ncd" } else { "ncd-beh" },
            curve.join(" ")
        ));
    }
    verdict(pass, parts.join("; "))
}

fn run_cli(args: &[&str]) -> i32 {
    let mut argv = vec!["cogdiag"];
    argv.extend_from_slice(args);
    cogdiag::cli::run(argv)
}

fn sha256(path: &Path) -> String {
    hex::encode(Sha256::digest(std::fs::read(path).unwrap()))
}

fn end_to_end(dir: &Path) -> (Vec<u8>, String) {
    let d = dir.join("data");
    let r = dir.join("run");
    let (d, r) = (d.to_str().unwrap(), r.to_str().unwrap());
    let emb = format!("{d}/embeddings-llm.jsonl");
    let ckpt = format!("{r}/checkpoint.json");
    let steps: [Vec<&str>; 5] = [
        vec![
            "synth",
            "--out",
            d,
            "--seed",
            "4",
            "--students",
            "60",
            "--exercises",
            "30",
        ],
        vec!["diagnose", "--data", d, "--offline"],
        vec!["embed", "--data", d, "--offline", "--out", &emb],
        vec![
            "train",
            "--data",
            d,
            "--embeddings",
            &emb,
            "--model",
            "ncd",
            "--align",
            "beh",
            "--epochs",
            "5",
            "--seed",
            "4",
            "--out",
            r,
        ],
        vec!["eval", "--checkpoint", &ckpt, "--data", d],
    ];
    for s in &steps {
        assert_eq!(run_cli(s), 0, "step {s:?} failed");
    }
    (
        std::fs::read(dir.join("run/metrics.csv")).unwrap(),
        sha256(&dir.join("run/checkpoint.json")),
    )
}

fn determinism() -> Verdict {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let (ma, ca) = end_to_end(a.path());
    let (mb, cb) = end_to_end(b.path());
    verdict(
        ma == mb && ca == cb,
        format!(
            "metrics.csv {} ({} bytes), checkpoint sha256 {}…",
            if ma == mb { "identical" } else { "differs" },
            ma.len(),
            &ca[..12]
        ),
    )
}

fn logs(n: usize) -> Vec<ResponseLog> {
    (0..n)
        .map(|i| ResponseLog {
            student_id: format!("s{}", i % 7),
            exercise_id: format!("e{}", i % 5),
            concepts: vec!["k".into()],
            correct: i % 3 == 0,
            content: None,
        })
        .collect()
}

fn protocol_fidelity() -> Verdict {
    let mut notes = Vec::new();
    let mut pass = true;
    for n in [10usize, 100, 1000] {
        let s = split_dataset(&logs(n), [0.8, 0.1, 0.1], 1).unwrap();
        let sizes = [s.train.len(), s.valid.len(), s.test.len()];
        let ok = sizes.iter().sum::<usize>() == n
            && [0.8, 0.1, 0.1]
                .iter()
                .zip(sizes)
                .all(|(r, k)| (k as f64 - r * n as f64).abs() < 2.0);
        pass &= ok;
        notes.push(format!("{n}→{sizes:?}"));
    }
    pass &= DEFAULT_COLD_LT == 3 && DEFAULT_WARM_GT == 10;

    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().join("d");
    let r = dir.path().join("r");
    let (d, r) = (d.to_str().unwrap(), r.to_str().unwrap());
    let ckpt = format!("{r}/checkpoint.json");
    assert_eq!(
        run_cli(&["synth", "--out", d, "--students", "40", "--exercises", "20"]),
        0
    );
    assert_eq!(run_cli(&["train", "--data", d, "--epochs", "1", "--out", r]), 0);
    assert_eq!(run_cli(&["eval", "--checkpoint", &ckpt, "--data", d]), 0);
    let read = |name: &str| -> serde_json::Value {
        serde_json::from_str(&std::fs::read_to_string(Path::new(r).join(name)).unwrap()).unwrap()
    };
    let train_cfg = &read("run-manifest.train.json")["config"];
    let eval_cfg = &read("run-manifest.eval.json")["config"];
    let manifest_ok = train_cfg["alpha"] == 0.04
        && train_cfg["beta"] == 0.015
        && train_cfg["lambda"] == 0.2
        && train_cfg["topk"] == 20
        && eval_cfg["cold_lt"] == 3
        && eval_cfg["warm_gt"] == 10;
    pass &= manifest_ok;
    verdict(
        pass,
        format!(
            "splits {}; manifest alpha {} beta {} lambda {} topk {} cold_lt {} warm_gt {}",
            notes.join(" "),
            train_cfg["alpha"],
            train_cfg["beta"],
            train_cfg["lambda"],
            train_cfg["topk"],
            eval_cfg["cold_lt"],
            eval_cfg["warm_gt"]
        ),
    )
}

fn main() {
    let only: Option<u32> = std::env::args().skip(1).find_map(|a| a.parse().ok());
    let criteria: [(u32, &str, fn() -> Verdict); 9] = [
        (1, "gradient correctness", gradient_correctness),
        (2, "InfoNCE oracle", info_nce_oracle),
        (3, "metric oracles", metric_oracles),
        (4, "classic DINA consistency", classic_dina),
        (5, "NCD monotonicity", ncd_monotonicity),
        (6, "cold-start benefit", cold_start_benefit),
        (7, "dropout trend", dropout_trend),
        (8, "determinism", determinism),
        (9, "protocol fidelity", protocol_fidelity),
    ];
    let mut failed = 0;
    for (id, name, f) in criteria {
        if only.is_some_and(|o| o != id) {
            continue;
        }
        if !criterion(id, name, f) {
            failed += 1;
        }
    }
    println!("acceptance: {failed} criteria failed");
    if failed > 0 {
        std::process::exit(1);
    }
}
