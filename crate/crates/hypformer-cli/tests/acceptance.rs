//! Acceptance suite: one test per criterion, each printing a PASS/FAIL
//! line. Tests serialize on a global mutex so wall-clock measurements and
//! the heavy randomized sweeps never contend for the CPU.
//!
//! Run with `cargo test --test acceptance -- --nocapture` to see the
//! per-criterion lines.

use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::Mutex;
use std::time::{Duration, Instant};

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use hypformer::attention::{
    focus_map, linear_attention, multi_head, softmax_attention, AttentionKind, AttentionParams, MultiHeadParams,
};
use hypformer::autodiff::Tensor;
use hypformer::blocks::{
    htc_forward, hyp_concat, hyp_positional_encoding, hyp_residual, Activation, HrcSpec,
    HtcParams, Mode, PositionalParams, SpaceFn,
};
use hypformer::data::gen_tree;
use hypformer::geometry::{
    distance, exp_map, lift_euclidean, lorentz_midpoint, lorentz_midpoint_rows, origin,
    project_to_manifold, random_batch, tangent_at, CurvatureParam, LorentzBatch,
};
use hypformer::model::{ablate, AblationVariant, HypformerConfig};

static LOCK: Mutex<()> = Mutex::new(());

fn criterion(number: u32, name: &str, body: impl FnOnce() -> Result<(), String>) {
    let _guard = LOCK.lock().unwrap_or_else(|p| p.into_inner());
    let outcome = body();
    match &outcome {
        Ok(()) => println!("criterion {number} ({name}): PASS"),
        Err(e) => println!("criterion {number} ({name}): FAIL - {e}"),
    }
    if let Err(e) = outcome {
        panic!("criterion {number} ({name}) failed: {e}");
    }
}

fn hypf(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_hypf"))
        .args(args)
        .output()
        .expect("hypf binary runs")
}

fn check(cond: bool, msg: impl Fn() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within(elapsed: Duration, budget_s: u64, what: &str) -> Result<(), String> {
    check(elapsed.as_secs() < budget_s, || {
        format!("{what} took {:?}, budget {budget_s}s", elapsed)
    })
}

/// Criterion 1: 10,000 randomized invocations across every batch-producing
/// operation keep |kappa <x,x>_L - 1| <= 1e-8 with positive time
/// coordinates, in under 30 s.
#[test]
fn criterion_1_manifold_closure() {
    criterion(1, "manifold closure", || {
        let started = Instant::now();
        let mut rng = ChaCha20Rng::seed_from_u64(101);
        let kappas = [-1.0, -2.0, -3.0];
        let mut per_op = [0usize; 17];
        for trial in 0..10_000 {
            let kv = kappas[rng.gen_range(0..3)];
            let k = CurvatureParam::new(kv, false).unwrap();
            let d = 2 + rng.gen_range(0..63usize);
            let n = 1 + rng.gen_range(0..6usize);
            let op = rng.gen_range(0..17usize);
            let scale = 1.2 / (d as f64).sqrt();
            per_op[op] += 1;
            let out: LorentzBatch = match op {
                0 => origin(d, &k).unwrap(),
                1 => {
                    let x = random_batch(n, d, &k, scale, &mut rng);
                    let space =
                        Array2::from_shape_fn((n, d), |_| rng.gen_range(-scale..scale));
                    let u = tangent_at(&x, &Tensor::from_array(space)).unwrap();
                    exp_map(&x, &u).unwrap()
                }
                2 => {
                    let x = random_batch(n, d, &k, scale, &mut rng);
                    let w: Vec<f64> = (0..n).map(|_| rng.gen_range(0.1..2.0)).collect();
                    lorentz_midpoint(&x, &w).unwrap()
                }
                3 => {
                    let x = random_batch(n, d, &k, scale, &mut rng);
                    let w = Array2::from_shape_fn((3, n), |_| rng.gen_range(0.0..1.0));
                    lorentz_midpoint_rows(&x, &Tensor::from_array(w.mapv(|v| v + 0.01)))
                        .unwrap()
                }
                4 => {
                    let s = Array2::from_shape_fn((n, d), |_| rng.gen_range(-2.0..2.0));
                    project_to_manifold(&Tensor::from_array(s), &k)
                }
                5 => {
                    let f =
                        Array2::from_shape_fn((n, d), |_| rng.gen_range(-2.0 * scale..2.0 * scale));
                    lift_euclidean(&Tensor::from_array(f), &k).unwrap()
                }
                6 => {
                    let k2 =
                        CurvatureParam::new(kappas[rng.gen_range(0..3)], false).unwrap();
                    let x = random_batch(n, d, &k, scale, &mut rng);
                    let p = HtcParams::init(d, 1 + d / 2, k.clone(), k2, &mut rng);
                    htc_forward(&x, &p).unwrap()
                }
                7..=10 => {
                    let k2 =
                        CurvatureParam::new(kappas[rng.gen_range(0..3)], false).unwrap();
                    let f = match op {
                        7 => SpaceFn::LayerNorm,
                        8 => SpaceFn::BatchNorm,
                        9 => SpaceFn::Dropout(0.3),
                        _ => SpaceFn::Activation(Activation::Relu),
                    };
                    let x = random_batch(n.max(2), d, &k, scale, &mut rng);
                    let spec = HrcSpec::new(f, d, k.clone(), k2).unwrap();
                    spec.forward(&x, Mode::Train, &mut rng).unwrap()
                }
                11 => {
                    let x = random_batch(n, d, &k, scale, &mut rng);
                    let y = random_batch(n, 1 + d / 2, &k, scale, &mut rng);
                    hyp_concat(&x, &y).unwrap()
                }
                12 => {
                    let x = random_batch(n, d, &k, scale, &mut rng);
                    let params = PositionalParams::init(d, k.clone(), &mut rng);
                    hyp_positional_encoding(&x, &params).unwrap()
                }
                13 => {
                    let x = random_batch(n, d, &k, scale, &mut rng);
                    let y = random_batch(n, d, &k, scale, &mut rng);
                    hyp_residual(&x, &y).unwrap()
                }
                14 | 15 => {
                    let kind = if op == 14 {
                        AttentionKind::Linear
                    } else {
                        AttentionKind::Softmax
                    };
                    let k2 =
                        CurvatureParam::new(kappas[rng.gen_range(0..3)], false).unwrap();
                    let k3 =
                        CurvatureParam::new(kappas[rng.gen_range(0..3)], false).unwrap();
                    let x = random_batch(n, d, &k, scale, &mut rng);
                    let params = AttentionParams::init(
                        d,
                        1 + d / 2,
                        k.clone(),
                        k2,
                        k3,
                        2.0,
                        kind,
                        &mut rng,
                    );
                    match kind {
                        AttentionKind::Linear => linear_attention(&x, &params).unwrap(),
                        AttentionKind::Softmax => softmax_attention(&x, &params).unwrap(),
                    }
                }
                _ => {
                    let x = random_batch(n, d, &k, scale, &mut rng);
                    let mh = MultiHeadParams::init(
                        2,
                        d,
                        1 + d / 2,
                        k.clone(),
                        k.clone(),
                        k.clone(),
                        2.0,
                        AttentionKind::Linear,
                        &mut rng,
                    );
                    multi_head(&x, &mh).unwrap()
                }
            };
            let residual = out.constraint_residual();
            check(residual <= 1e-8, || {
                format!("trial {trial} op {op}: residual {residual} > 1e-8")
            })?;
            check(out.min_time() > 0.0, || {
                format!("trial {trial} op {op}: non-positive time coordinate")
            })?;
        }
        check(per_op.iter().all(|&c| c > 0), || {
            format!("not every operation was exercised: {per_op:?}")
        })?;
        within(started.elapsed(), 30, "closure sweep")
    });
}

/// Criterion 2: the curvature-change scaling z' = sqrt(ka/kb) z satisfies
/// d_kb(z') = sqrt(ka/kb) d_ka(z) within 1e-8 relative and preserves every
/// distance ordering, over 1000 random triples, in under 10 s.
#[test]
fn criterion_2_curvature_scaling_oracle() {
    criterion(2, "curvature scaling", || {
        let started = Instant::now();
        let mut rng = ChaCha20Rng::seed_from_u64(202);
        let grid = [-0.5, -1.0, -2.0, -4.0];
        for trial in 0..1000 {
            let ka = grid[rng.gen_range(0..4)];
            let kb = grid[rng.gen_range(0..4)];
            let (pa, pb) = (
                CurvatureParam::new(ka, false).unwrap(),
                CurvatureParam::new(kb, false).unwrap(),
            );
            let ratio = (ka / kb).sqrt();
            let d = 2 + rng.gen_range(0..8usize);
            let z = random_batch(3, d, &pa, 0.6, &mut rng);
            let zs = LorentzBatch::from_parts(z.data().scale(ratio), pb.clone());

            let triple = |x: &LorentzBatch, i: usize, j: usize| {
                let a = LorentzBatch::from_parts(
                    x.data().select_rows(&[i]),
                    x.curvature().clone(),
                );
                let b = LorentzBatch::from_parts(
                    x.data().select_rows(&[j]),
                    x.curvature().clone(),
                );
                distance(&a, &b).unwrap().item()
            };
            let dij = triple(&z, 0, 1);
            let dik = triple(&z, 0, 2);
            let sij = triple(&zs, 0, 1);
            let sik = triple(&zs, 0, 2);

            for (got, want) in [(sij, ratio * dij), (sik, ratio * dik)] {
                let rel = (got - want).abs() / want.abs().max(1e-300);
                check(rel <= 1e-8, || {
                    format!("trial {trial}: distance scaling off by rel {rel}")
                })?;
            }
            check((dij >= dik) == (sij >= sik), || {
                format!("trial {trial}: ordering not preserved")
            })?;
        }
        within(started.elapsed(), 10, "curvature-scaling oracle")
    });
}

/// Criterion 3: cmd_checkgrad reports max relative error < 1e-4 against
/// central finite differences on every case, in under 2 minutes.
#[test]
fn criterion_3_gradient_suite() {
    criterion(3, "gradient suite", || {
        let started = Instant::now();
        let out = hypf(&["checkgrad", "--seed", "12", "--cases", "all"]);
        check(out.status.success(), || {
            format!(
                "checkgrad exited {:?}: {}",
                out.status.code(),
                String::from_utf8_lossy(&out.stdout)
            )
        })?;
        let text = String::from_utf8_lossy(&out.stdout);
        let mut seen = 0;
        for line in text.lines() {
            let err: f64 = line
                .split("max_rel_err=")
                .nth(1)
                .and_then(|s| s.split_whitespace().next())
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| format!("unparseable checkgrad line `{line}`"))?;
            check(err < 1e-4, || format!("{line}: error above 1e-4"))?;
            seen += 1;
        }
        check(seen == 4, || format!("expected 4 cases, saw {seen}"))?;
        within(started.elapsed(), 120, "gradient suite")
    });
}

/// Criterion 4: the reordered O(N) linear attention equals the explicit
/// O(N^2) normalized form to 1e-10 at N = 16, d' = 8, over 100 seeds.
#[test]
fn criterion_4_linear_attention_exactness() {
    criterion(4, "linear-attention exactness", || {
        let started = Instant::now();
        for seed in 0..100u64 {
            let mut rng = ChaCha20Rng::seed_from_u64(seed);
            let k = CurvatureParam::new(-1.0, false).unwrap();
            let x = random_batch(16, 8, &k, 0.5, &mut rng);
            let params = AttentionParams::init(
                8,
                8,
                k.clone(),
                k.clone(),
                k.clone(),
                2.0,
                AttentionKind::Linear,
                &mut rng,
            );
            let q = htc_forward(&x, params.wq()).unwrap();
            let kk = htc_forward(&x, params.wk()).unwrap();
            let v = htc_forward(&x, params.wv()).unwrap();
            let a = focus_map(&q.space(), params.focus()).value();
            let b = focus_map(&kk.space(), params.focus()).value();
            let vf = focus_map(&v.space(), params.focus()).value();

            // explicit O(N^2) route
            let scores = a.dot(&b.t());
            let num = scores.dot(&vf);
            let den = scores.sum_axis(ndarray::Axis(1));

            // reordered O(N) route (eps_den = 0)
            let kv = b.t().dot(&vf);
            let num2 = a.dot(&kv);
            let den2 = a.dot(&b.sum_axis(ndarray::Axis(0)));

            let mut max_diff = 0.0f64;
            for i in 0..16 {
                max_diff = max_diff.max((den[i] - den2[i]).abs());
                if den[i] > 1e-12 {
                    for j in 0..8 {
                        max_diff =
                            max_diff.max((num[(i, j)] / den[i] - num2[(i, j)] / den2[i]).abs());
                    }
                }
            }
            check(max_diff < 1e-10, || {
                format!("seed {seed}: reordering diff {max_diff}")
            })?;
        }
        within(started.elapsed(), 10, "exactness sweep")
    });
}

struct BenchRow {
    median_ms: Option<f64>,
    peak_bytes: Option<f64>,
}

fn parse_bench(path: &Path) -> Vec<(usize, String, BenchRow)> {
    let text = std::fs::read_to_string(path).expect("bench csv readable");
    text.lines()
        .skip(1)
        .map(|line| {
            let mut parts = line.split(',');
            let n: usize = parts.next().unwrap().parse().unwrap();
            let kind = parts.next().unwrap().to_string();
            let median_ms = parts.next().unwrap().parse().ok();
            let peak_bytes = parts.next().unwrap().parse().ok();
            (
                n,
                kind,
                BenchRow {
                    median_ms,
                    peak_bytes,
                },
            )
        })
        .collect()
}

fn bench_column(
    rows: &[(usize, String, BenchRow)],
    kind: &str,
    field: impl Fn(&BenchRow) -> Option<f64>,
) -> Vec<(usize, Option<f64>)> {
    rows.iter()
        .filter(|(_, k, _)| k == kind)
        .map(|(n, _, r)| (*n, field(r)))
        .collect()
}

/// Consecutive-doubling ratios for the rows present (stop at a skipped
/// entry).
fn doubling_ratios(col: &[(usize, Option<f64>)]) -> Vec<f64> {
    let mut out = Vec::new();
    for w in col.windows(2) {
        let (n0, v0) = &w[0];
        let (n1, v1) = &w[1];
        assert_eq!(n1, &(2 * n0), "n-list must double");
        match (v0, v1) {
            (Some(a), Some(b)) => out.push(b / a),
            _ => break,
        }
    }
    out
}

/// Criterion 5: over N in {1024, 2048, 4096, 8192} at d' = 64, linear
/// attention time doubles by [1.6, 2.6] and softmax by [3.0, 5.0] per
/// step; linear peak bytes grow <= 2.3x and softmax >= 3.2x per doubling;
/// all inside 5 minutes.
#[test]
fn criterion_5_scaling_shape() {
    criterion(5, "scaling shape", || {
        let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
        let csv = dir.path().join("bench.csv");
        let started = Instant::now();
        let out = hypf(&[
            "bench",
            "--attention",
            "both",
            "--n-list",
            "1024,2048,4096,8192",
            "--d",
            "64",
            "--reps",
            "5",
            "--out",
            csv.to_str().unwrap(),
        ]);
        let elapsed = started.elapsed();
        check(out.status.success(), || {
            format!("bench failed: {}", String::from_utf8_lossy(&out.stderr))
        })?;
        within(elapsed, 300, "bench")?;

        let rows = parse_bench(&csv);
        let lin_t = doubling_ratios(&bench_column(&rows, "linear", |r| r.median_ms));
        let soft_t = doubling_ratios(&bench_column(&rows, "softmax", |r| r.median_ms));
        let lin_m = doubling_ratios(&bench_column(&rows, "linear", |r| r.peak_bytes));
        let soft_m = doubling_ratios(&bench_column(&rows, "softmax", |r| r.peak_bytes));

        check(lin_t.len() == 3, || "missing linear rows".into())?;
        for (i, r) in lin_t.iter().enumerate() {
            check((1.6..=2.6).contains(r), || {
                format!("linear time ratio #{i} = {r:.3} outside [1.6, 2.6] ({lin_t:?})")
            })?;
        }
        check(!soft_t.is_empty(), || "missing softmax rows".into())?;
        for (i, r) in soft_t.iter().enumerate() {
            check((3.0..=5.0).contains(r), || {
                format!("softmax time ratio #{i} = {r:.3} outside [3.0, 5.0] ({soft_t:?})")
            })?;
        }
        for (i, r) in lin_m.iter().enumerate() {
            check(*r <= 2.3, || {
                format!("linear memory ratio #{i} = {r:.3} > 2.3 ({lin_m:?})")
            })?;
        }
        for (i, r) in soft_m.iter().enumerate() {
            check(*r >= 3.2, || {
                format!("softmax memory ratio #{i} = {r:.3} < 3.2 ({soft_m:?})")
            })?;
        }
        Ok(())
    });
}

/// Criterion 6: at N = 8192, d' = 64, linear attention's median
/// forward+backward is at most 0.6x softmax's.
#[test]
fn criterion_6_relative_speed() {
    criterion(6, "relative speed", || {
        let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
        let csv = dir.path().join("bench.csv");
        let out = hypf(&[
            "bench",
            "--attention",
            "both",
            "--n-list",
            "8192",
            "--d",
            "64",
            "--reps",
            "5",
            "--out",
            csv.to_str().unwrap(),
        ]);
        check(out.status.success(), || {
            format!("bench failed: {}", String::from_utf8_lossy(&out.stderr))
        })?;
        let rows = parse_bench(&csv);
        let lin = bench_column(&rows, "linear", |r| r.median_ms)[0]
            .1
            .ok_or("linear row missing")?;
        let soft = bench_column(&rows, "softmax", |r| r.median_ms)[0]
            .1
            .ok_or("softmax row missing")?;
        let ratio = lin / soft;
        check(ratio <= 0.6, || {
            format!("linear/softmax = {lin:.1}/{soft:.1} = {ratio:.3} > 0.6")
        })
    });
}

fn tree_dataset_dir(dir: &Path, seed: u64) -> PathBuf {
    let data = dir.join(format!("tree{seed}"));
    let out = hypf(&[
        "gen-tree",
        "--depth",
        "6",
        "--branching",
        "3",
        "--dim",
        "16",
        "--noise",
        "0.5",
        "--seed",
        &seed.to_string(),
        "--out",
        data.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "gen-tree failed");
    data
}

fn run_default_training(dir: &Path, data: &Path, tag: &str) -> (PathBuf, Vec<serde_json::Value>) {
    let config = dir.join(format!("config-{tag}.json"));
    std::fs::write(&config, "{}").unwrap();
    let metrics = dir.join(format!("metrics-{tag}.jsonl"));
    let ckpt = dir.join(format!("model-{tag}.ckpt"));
    let out = hypf(&[
        "train",
        "--config",
        config.to_str().unwrap(),
        "--data",
        data.to_str().unwrap(),
        "--out",
        metrics.to_str().unwrap(),
        "--checkpoint",
        ckpt.to_str().unwrap(),
    ]);
    assert!(
        out.status.success(),
        "train failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    let records = std::fs::read_to_string(&metrics)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    (metrics, records)
}

/// Criterion 7: default config on the depth-6 ternary tree reaches
/// validation accuracy >= 0.90 within 200 epochs and at least halves the
/// training loss, in under 3 minutes.
#[test]
fn criterion_7_end_to_end_learning() {
    criterion(7, "end-to-end learning", || {
        let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
        let data = tree_dataset_dir(dir.path(), 0);
        let started = Instant::now();
        let (_, records) = run_default_training(dir.path(), &data, "c7");
        let elapsed = started.elapsed();

        check(records.len() <= 200, || {
            format!("{} epochs exceeds 200", records.len())
        })?;
        let best_val = records
            .iter()
            .map(|r| r["val_metric"].as_f64().unwrap())
            .fold(f64::NEG_INFINITY, f64::max);
        check(best_val >= 0.90, || {
            format!("best validation accuracy {best_val:.4} < 0.90")
        })?;
        let first = records.first().unwrap()["train_loss"].as_f64().unwrap();
        let last = records.last().unwrap()["train_loss"].as_f64().unwrap();
        check(last < 0.5 * first, || {
            format!("final loss {last:.4} not below half of initial {first:.4}")
        })?;
        within(elapsed, 180, "training")
    });
}

/// Criterion 8: with informative edges, the full model's best validation
/// accuracy is >= the no-graph variant's at matched seeds, 3 of 3.
#[test]
fn criterion_8_ablation_direction() {
    criterion(8, "ablation direction", || {
        let ds = gen_tree(6, 3, 16, 0.5, 0).map_err(|e| e.to_string())?;
        for seed in [0u64, 1, 2] {
            // The criterion-7 protocol with only the seed varied.
            let config = HypformerConfig {
                seed,
                ..Default::default()
            };
            let (full, _) = ablate(config.clone(), &ds, AblationVariant::Full)
                .map_err(|e| e.to_string())?;
            let (no_graph, _) = ablate(config, &ds, AblationVariant::NoGraph)
                .map_err(|e| e.to_string())?;
            check(full.best_val >= no_graph.best_val, || {
                format!(
                    "seed {seed}: full {:.4} < no_graph {:.4}",
                    full.best_val, no_graph.best_val
                )
            })?;
        }
        Ok(())
    });
}

/// Criterion 9: under the criterion-7 protocol with trainable curvature,
/// every logged kappa stays strictly negative and finite.
#[test]
fn criterion_9_curvature_sanity() {
    criterion(9, "curvature sanity", || {
        let ds = gen_tree(6, 3, 16, 0.5, 0).map_err(|e| e.to_string())?;
        let config = HypformerConfig::default();
        check(config.curvature_trainable, || {
            "default config must train curvature".into()
        })?;
        let mut model = hypformer::model::Hypformer::new(config).map_err(|e| e.to_string())?;
        let result = hypformer::model::train(&mut model, &ds).map_err(|e| e.to_string())?;
        for rec in &result.history {
            check(rec.kappa_hidden < 0.0 && rec.kappa_hidden.is_finite(), || {
                format!(
                    "epoch {}: kappa_hidden = {}",
                    rec.epoch, rec.kappa_hidden
                )
            })?;
        }
        for k in model.curvature_values() {
            check(k < 0.0 && k.is_finite(), || format!("final kappa = {k}"))?;
        }
        Ok(())
    });
}

/// Criterion 10: repeating the criterion-7 run with the same seed yields a
/// byte-identical metrics file.
#[test]
fn criterion_10_determinism() {
    criterion(10, "determinism", || {
        let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
        let data = tree_dataset_dir(dir.path(), 0);
        let (m1, _) = run_default_training(dir.path(), &data, "run1");
        let (m2, _) = run_default_training(dir.path(), &data, "run2");
        let a = std::fs::read(&m1).map_err(|e| e.to_string())?;
        let b = std::fs::read(&m2).map_err(|e| e.to_string())?;
        check(a == b, || {
            "metrics files differ between identically-seeded runs".into()
        })
    });
}
