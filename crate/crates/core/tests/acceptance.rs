//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit on any failure.

use std::fs;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use asu_core::agemodel::{
    batch_gradient, init_model, mean_loss, ModelSpec, ParameterVector, Sample,
};
use asu_core::demographics_stream::{persist_histogram, process_stream, FaceRecord, StreamConfig};
use asu_core::label_dist::{
    gaussian_label_distribution, kl_loss, kl_loss_gradient, AgeClassSet, LogitVector,
};
use asu_core::metrics::{age_group_accuracy, mae};
use asu_core::netmodel::{dense_bytes, iteration_time, sparse_bytes, speedup_ratio, LinkModel, MB};
use asu_core::ps_core::{partition, train, train_observed, Execution, TrainConfig, TrainOutcome};
use asu_core::synthetic::generate_synthetic;
use asu_core::update_filters::{FilterKind, FilterState};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn check(cond: bool, ok: impl Into<String>, fail: impl Into<String>) -> Outcome {
    if cond {
        Ok(ok.into())
    } else {
        Err(fail.into())
    }
}

fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

fn random_spec(rng: &mut ChaCha8Rng) -> ModelSpec {
    loop {
        let input = rng.random_range(1..=6);
        let hidden: Vec<usize> = (0..rng.random_range(0..=2))
            .map(|_| rng.random_range(1..=8))
            .collect();
        let c = rng.random_range(2..=50);
        let spec = ModelSpec::new(input, hidden, c, rng.random()).unwrap();
        if spec.param_count() <= 300 {
            return spec;
        }
    }
}

fn random_sample(rng: &mut ChaCha8Rng, spec: &ModelSpec) -> Sample {
    let classes = AgeClassSet::with_count(1, spec.c).unwrap();
    let age = rng.random_range(classes.min_age()..=classes.max_age());
    Sample {
        age,
        features: (0..spec.input_dim)
            .map(|_| rng.random_range(-1.0..1.0))
            .collect(),
        label: gaussian_label_distribution(age, rng.random_range(0.3..3.0), &classes).unwrap(),
    }
}

/// Central differences; the floor keeps the relative error meaningful where
/// the true gradient is essentially zero.
const FD_STEP: f64 = 1e-5;
const FD_FLOOR: f64 = 1e-6;

/// Smallest |pre-activation| over the hidden units, from a plain
/// re-implementation of the forward pass (weights row-major, then biases).
fn min_hidden_preactivation(params: &[f64], spec: &ModelSpec, x: &[f64]) -> f64 {
    let dims = spec.layer_dims();
    let mut offset = 0;
    let mut a = x.to_vec();
    let mut min = f64::INFINITY;
    for k in 0..dims.len() - 2 {
        let (fan_in, fan_out) = (dims[k], dims[k + 1]);
        let w = &params[offset..offset + fan_in * fan_out];
        let b = &params[offset + fan_in * fan_out..offset + fan_in * fan_out + fan_out];
        let z: Vec<f64> = (0..fan_out)
            .map(|o| b[o] + (0..fan_in).map(|i| w[o * fan_in + i] * a[i]).sum::<f64>())
            .collect();
        min = z.iter().fold(min, |m, v| m.min(v.abs()));
        a = z.iter().map(|v| v.max(0.0)).collect();
        offset += fan_in * fan_out + fan_out;
    }
    min
}

fn gradient_correctness() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let (mut worst_loss, mut worst_model) = (0.0f64, 0.0f64);
    let instances = 120;
    for _ in 0..instances {
        let spec = random_spec(&mut rng);
        let label_sample = random_sample(&mut rng, &spec);
        let logits: Vec<f64> = (0..spec.c).map(|_| rng.random_range(-4.0..4.0)).collect();
        let g = kl_loss_gradient(
            &label_sample.label,
            &LogitVector::new(logits.clone()).unwrap(),
        )
        .unwrap();
        for j in 0..spec.c {
            let at = |d: f64| {
                let mut z = logits.clone();
                z[j] += d;
                kl_loss(&label_sample.label, &LogitVector::new(z).unwrap()).unwrap()
            };
            let fd = (at(FD_STEP) - at(-FD_STEP)) / (2.0 * FD_STEP);
            worst_loss = worst_loss.max(rel_err(g[j], fd, FD_FLOOR));
        }

        let params = init_model(&spec).unwrap();
        // Keep every sample clear of ReLU kinks so the loss is smooth within the FD step.
        let batch: Vec<Sample> = (0..rng.random_range(1..=4))
            .map(|_| loop {
                let s = random_sample(&mut rng, &spec);
                if min_hidden_preactivation(&params, &spec, &s.features) > 1e-3 {
                    break s;
                }
            })
            .collect();
        let g = batch_gradient(&params, &spec, &batch).unwrap();
        for j in 0..params.len() {
            let at = |d: f64| {
                let mut p = params.clone().into_inner();
                p[j] += d;
                mean_loss(&ParameterVector::new(p).unwrap(), &spec, &batch).unwrap()
            };
            let fd = (at(FD_STEP) - at(-FD_STEP)) / (2.0 * FD_STEP);
            worst_model = worst_model.max(rel_err(g[j], fd, FD_FLOOR));
        }
    }
    let elapsed = start.elapsed();
    let detail = format!(
        "{instances} instances, max rel err loss layer {worst_loss:.2e} (<= 1e-5), model {worst_model:.2e} (<= 1e-4), {:.2}s",
        elapsed.as_secs_f64()
    );
    check(
        worst_loss <= 1e-5 && worst_model <= 1e-4 && elapsed < Duration::from_secs(10),
        detail.clone(),
        detail,
    )
}

fn asu_conservation() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut worst = 0.0f64;
    let trials = 20;
    for _ in 0..trials {
        let dims = rng.random_range(1..64);
        let delta = rng.random_range(0.0..0.5);
        let mut state = FilterState::new(FilterKind::Asu, delta, dims).unwrap();
        let mut pushed = vec![0.0; dims];
        let mut generated = vec![0.0; dims];
        for _ in 0..1000 {
            let u: Vec<f64> = (0..dims).map(|_| rng.random_range(-1.0..1.0)).collect();
            state.push(&u).unwrap().add_into(&mut pushed);
            for (g, x) in generated.iter_mut().zip(&u) {
                *g += x;
            }
        }
        for j in 0..dims {
            worst = worst.max((pushed[j] + state.residual()[j] - generated[j]).abs());
        }
    }
    let detail = format!("{trials} trials x 1000 pushes, max |pushed + residual - generated| = {worst:.2e} (<= 1e-12)");
    check(worst <= 1e-12, detail.clone(), detail)
}

fn synthetic_task(n: usize, input_dim: usize, seed: u64) -> (Vec<Sample>, Vec<Sample>) {
    let classes = AgeClassSet::new(1, 70).unwrap();
    generate_synthetic(n, input_dim, &classes, 1.0, seed).unwrap()
}

fn filter_equivalence() -> Outcome {
    let (train_set, test_set) = synthetic_task(600, 8, 3);
    let base = TrainConfig {
        spec: ModelSpec::new(8, vec![16], 70, 4).unwrap(),
        n_workers: 4,
        filter: FilterKind::Raw,
        delta: 0.0,
        lr: 0.1,
        batch_size: 8,
        max_iterations: 500,
        eval_every: 50,
        seed: 9,
    };
    let runs: Vec<(FilterKind, TrainOutcome)> = FilterKind::ALL
        .iter()
        .map(|&f| {
            let cfg = TrainConfig {
                filter: f,
                ..base.clone()
            };
            (
                f,
                train(&cfg, &train_set, &test_set, Execution::Threaded).unwrap(),
            )
        })
        .collect();
    let (_, raw) = &runs[0];
    let p = base.spec.param_count() as u64;
    for (f, run) in &runs[1..] {
        if run.log.rows.len() != raw.log.rows.len() {
            return Err(format!(
                "{f} log has {} rows, RAW {}",
                run.log.rows.len(),
                raw.log.rows.len()
            ));
        }
        for (a, b) in raw.log.rows.iter().zip(&run.log.rows) {
            let same = a.iteration == b.iteration
                && a.worker_id == b.worker_id
                && a.train_loss.to_bits() == b.train_loss.to_bits()
                && a.drop_fraction.to_bits() == b.drop_fraction.to_bits()
                && a.test_loss.map(f64::to_bits) == b.test_loss.map(f64::to_bits);
            if !same {
                return Err(format!(
                    "{f} diverges from RAW at iteration {} worker {}",
                    a.iteration, a.worker_id
                ));
            }
        }
        if raw
            .params
            .iter()
            .zip(run.params.iter())
            .any(|(a, b)| a.to_bits() != b.to_bits())
        {
            return Err(format!("{f} final parameters differ from RAW"));
        }
    }
    let (_, dsu) = &runs[1];
    let (_, asu) = &runs[2];
    if dsu.log.rows.iter().zip(&asu.log.rows).any(|(a, b)| a != b) {
        return Err("DSU and ASU logs differ".into());
    }
    if raw
        .log
        .rows
        .iter()
        .any(|r| r.push_bytes != dense_bytes(p, 4) || r.pull_bytes != dense_bytes(p, 4))
    {
        return Err("RAW byte columns are not the dense size".into());
    }
    Ok(format!(
        "{} rows: loss, drop and test columns and final params bit-identical across RAW/DSU/ASU; DSU and ASU logs fully identical; RAW byte columns use the dense encoding",
        raw.log.rows.len()
    ))
}

fn concurrency_oracle() -> Outcome {
    let (train_set, test_set) = synthetic_task(400, 6, 5);
    let cfg = TrainConfig {
        spec: ModelSpec::new(6, vec![12], 70, 8).unwrap(),
        n_workers: 4,
        filter: FilterKind::Raw,
        delta: 0.0,
        lr: 0.2,
        batch_size: 8,
        max_iterations: 300,
        eval_every: 100,
        seed: 21,
    };
    let mut trajectory = Vec::new();
    train_observed(&cfg, &train_set, &test_set, Execution::Threaded, |_, p| {
        trajectory.push(p.clone())
    })
    .unwrap();

    // Plain single-threaded SGD on the union of the four worker batches.
    let shards = partition(&train_set, cfg.n_workers, cfg.seed).unwrap();
    let mut params = init_model(&cfg.spec).unwrap().into_inner();
    let mut worst = 0.0f64;
    for (t, observed) in trajectory.iter().enumerate() {
        let mut sum = vec![0.0; params.len()];
        for shard in &shards {
            let len = shard.samples.len();
            let batch: Vec<Sample> = (0..cfg.batch_size)
                .map(|k| shard.samples[(t * cfg.batch_size + k) % len].clone())
                .collect();
            let g = batch_gradient(
                &ParameterVector::new(params.clone()).unwrap(),
                &cfg.spec,
                &batch,
            )
            .unwrap();
            for (s, x) in sum.iter_mut().zip(g.iter()) {
                *s += x;
            }
        }
        for (w, s) in params.iter_mut().zip(&sum) {
            *w -= cfg.lr * (s / cfg.n_workers as f64);
        }
        for (a, b) in params.iter().zip(observed.iter()) {
            worst = worst.max((a - b).abs());
        }
    }
    let sequential = train(&cfg, &train_set, &test_set, Execution::Sequential).unwrap();
    let same_as_sequential = sequential
        .params
        .iter()
        .zip(trajectory.last().unwrap().iter())
        .all(|(a, b)| a.to_bits() == b.to_bits());
    let detail = format!(
        "{} iterations, max |threaded - reference| = {worst:.2e} (<= 1e-12); sequential mode bit-identical: {same_as_sequential}",
        trajectory.len()
    );
    check(
        worst <= 1e-12 && same_as_sequential && trajectory.len() == 300,
        detail.clone(),
        detail,
    )
}

/// Fixed threshold for the model-quality run; the drop rate it produces is measured, not assumed.
const QUALITY_DELTA: f64 = 0.1;

fn model_quality() -> Outcome {
    let start = Instant::now();
    let (train_set, test_set) = synthetic_task(4000, 32, 11);
    let base = TrainConfig {
        spec: ModelSpec::new(32, vec![64], 70, 5).unwrap(),
        n_workers: 4,
        filter: FilterKind::Raw,
        delta: QUALITY_DELTA,
        lr: 0.1,
        batch_size: 16,
        max_iterations: 2000,
        eval_every: 500,
        seed: 1,
    };
    let run = |f: FilterKind| {
        let cfg = TrainConfig {
            filter: f,
            ..base.clone()
        };
        train(&cfg, &train_set, &test_set, Execution::Threaded)
            .unwrap()
            .log
    };
    let (raw, dsu, asu) = (
        run(FilterKind::Raw),
        run(FilterKind::Dsu),
        run(FilterKind::Asu),
    );
    let (raw_t, dsu_t, asu_t) = (
        raw.final_test_loss().unwrap(),
        dsu.final_test_loss().unwrap(),
        asu.final_test_loss().unwrap(),
    );
    let drop = asu.mean_drop_fraction();
    let gap = (asu_t - raw_t).abs() / raw_t;
    let elapsed = start.elapsed();
    let detail = format!(
        "delta {QUALITY_DELTA}: ASU drops {:.1}% (>= 90%), test loss RAW {raw_t:.4} ASU {asu_t:.4} ({:.2}% apart, <= 5%) DSU {dsu_t:.4} (> ASU), {:.1}s",
        100.0 * drop,
        100.0 * gap,
        elapsed.as_secs_f64()
    );
    check(
        drop >= 0.9 && gap <= 0.05 && dsu_t > asu_t && elapsed < Duration::from_secs(300),
        detail.clone(),
        detail,
    )
}

fn byte_accounting() -> Outcome {
    let dense = dense_bytes(135_000_000, 4);
    let entries = (135_000_000.0f64 * 0.012).round() as u64;
    let sparse = sparse_bytes(entries);
    let mb = sparse as f64 / MB;
    let detail = format!("dense {dense} B (= 540,000,000), sparse at 1.2% = {sparse} B = {mb:.2} MB (within 11-15 MB)");
    check(
        dense == 540_000_000 && (11.0..=15.0).contains(&mb),
        detail.clone(),
        detail,
    )
}

fn speedup_ordering() -> Outcome {
    let dense = dense_bytes(135_000_000, 4);
    let sparse = sparse_bytes(1_620_000);
    let byte_ratio = dense as f64 / sparse as f64;
    let mut out = Vec::new();
    let mut ok = true;
    let mut comm_ratio = 0.0;
    for g in [1.0, 10.0] {
        let link = LinkModel::gbps(g);
        let base = iteration_time(2.0, dense, dense, &link).unwrap();
        let cand = iteration_time(2.0, sparse, sparse, &link).unwrap();
        comm_ratio = base.communication_seconds() / cand.communication_seconds();
        ok &= (comm_ratio / byte_ratio - 1.0).abs() < 1e-12;
        out.push(speedup_ratio(&base, &cand).unwrap());
    }
    // The measured 28x and 16x factors must sit below the modelled reduction.
    ok &= comm_ratio > 28.0 && (comm_ratio / 41.5 - 1.0).abs() < 0.01;
    ok &= out[0] > out[1];
    let detail = format!(
        "comm reduction {comm_ratio:.2}x (byte ratio {byte_ratio:.2}, ~41.5, > 28); speedup 1 Gbps {:.3} > 10 Gbps {:.3}",
        out[0], out[1]
    );
    check(ok, detail.clone(), detail)
}

fn metrics() -> Outcome {
    let examples = mae(&[1.0, 2.0], &[1.0, 2.0]).unwrap() == 0.0
        && mae(&[30.0, 40.0], &[25.0, 43.0]).unwrap() == 4.0
        && mae(&[10.0], &[12.0]).unwrap() == 2.0
        && age_group_accuracy(&[20.0, 50.0], &[20.0, 50.0], 5.0).unwrap() == 1.0
        && age_group_accuracy(&[30.0], &[33.0], 5.0).unwrap() == 0.0
        && age_group_accuracy(&[30.0], &[33.0], 10.0).unwrap() == 1.0;
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut monotone = true;
    for _ in 0..1000 {
        let n = rng.random_range(1..100);
        let preds: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..100.0)).collect();
        let truths: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..100.0)).collect();
        let mut prev = 0.0;
        for gap in [1.0, 2.5, 5.0, 10.0, 15.0, 20.0, 40.0, 80.0, 200.0] {
            let a = age_group_accuracy(&preds, &truths, gap).unwrap();
            monotone &= a >= prev;
            prev = a;
        }
    }
    check(
        examples && monotone,
        "unit examples exact; accuracy non-decreasing in gap on 1000 random datasets",
        format!("examples pass: {examples}, monotone: {monotone}"),
    )
}

fn stream_determinism() -> Outcome {
    let (train_set, test_set) = synthetic_task(800, 8, 13);
    let cfg = TrainConfig {
        spec: ModelSpec::new(8, vec![16], 70, 2).unwrap(),
        n_workers: 2,
        filter: FilterKind::Asu,
        delta: 0.01,
        lr: 0.1,
        batch_size: 16,
        max_iterations: 200,
        eval_every: 100,
        seed: 3,
    };
    let model = train(&cfg, &train_set, &test_set, Execution::Threaded)
        .unwrap()
        .params;
    let classes = AgeClassSet::new(1, 70).unwrap();
    let (pool, _) = synthetic_task(2000, 8, 17);
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut t = 0.0f64;
    let records: Vec<FaceRecord> = (0..10_000)
        .map(|i| {
            t += rng.random_range(0.0..0.02);
            let mut features = pool[i % pool.len()].features.clone();
            if i % 997 == 0 {
                features.pop();
            }
            let timestamp = if i % 1499 == 1 { (t - 5.0).max(0.0) } else { t };
            FaceRecord {
                record_id: format!("r{i}"),
                timestamp,
                features,
            }
        })
        .collect();
    let dir = tempfile::tempdir().unwrap();
    let config = StreamConfig {
        interval_seconds: 1.0,
        group_width: 10.0,
        lateness: 0.5,
    };
    let mut files = Vec::new();
    let mut reports = Vec::new();
    for k in 0..2 {
        let report = process_stream(&model, &cfg.spec, &classes, records.clone(), &config).unwrap();
        let path = dir.path().join(format!("hist_{k}.csv"));
        persist_histogram(&report.histogram, &path).unwrap();
        files.push(fs::read(&path).unwrap());
        reports.push(report);
    }
    let r = &reports[0];
    let identical = files[0] == files[1] && reports[0].scores_csv() == reports[1].scores_csv();
    let conserved =
        r.histogram.total() == r.accepted() && r.accepted() + r.rejected.len() as u64 == 10_000;
    let detail = format!(
        "10000 records: {} accepted, {} rejected, histogram total {}, files identical: {identical}",
        r.accepted(),
        r.rejected.len(),
        r.histogram.total()
    );
    check(
        identical && conserved && !r.rejected.is_empty(),
        detail.clone(),
        detail,
    )
}

fn main() -> ExitCode {
    let criteria: [Criterion; 9] = [
        ("gradient correctness", gradient_correctness),
        ("ASU conservation", asu_conservation),
        ("filter equivalence at delta=0", filter_equivalence),
        ("concurrency oracle", concurrency_oracle),
        ("model quality ASU ~ RAW < DSU", model_quality),
        ("byte accounting", byte_accounting),
        ("speedup ordering", speedup_ordering),
        ("metrics", metrics),
        ("stream determinism", stream_determinism),
    ];
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        match f() {
            Ok(detail) => println!("acceptance {}: PASS {name}: {detail}", i + 1),
            Err(detail) => {
                failed += 1;
                println!("acceptance {}: FAIL {name}: {detail}", i + 1);
            }
        }
    }
    println!(
        "acceptance: {} passed, {failed} failed",
        criteria.len() - failed
    );
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
