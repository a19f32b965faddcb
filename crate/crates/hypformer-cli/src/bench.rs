//! Scaling benchmark: forward + backward of one attention block over
//! synthetic on-manifold inputs, with wall-clock medians and peak
//! tensor-layer memory from allocation accounting.

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use hypformer::attention::{attention_forward, AttentionKind, AttentionParams};
use hypformer::autodiff::{self, alloc, backward};
use hypformer::geometry::{random_batch, CurvatureParam};

use crate::BenchAttention;
use crate::{fail, now_ms};

/// Peak live NxN tensors on the softmax path is 5 (three forward buffers
/// plus two gradient buffers alive at once); one extra as slack.
fn predicted_softmax_peak(n: usize) -> usize {
    6 * n * n * 8
}

/// Smallest measurable nonzero interval of the monotonic clock.
fn timer_granularity() -> f64 {
    let mut best = f64::INFINITY;
    for _ in 0..1000 {
        let a = Instant::now();
        let mut b = Instant::now();
        while b == a {
            b = Instant::now();
        }
        let dt = (b - a).as_secs_f64() * 1e3;
        if dt > 0.0 && dt < best {
            best = dt;
        }
    }
    best
}

struct BenchCase {
    x: hypformer::geometry::LorentzBatch,
    params: AttentionParams,
}

impl BenchCase {
    fn new(kind: AttentionKind, n: usize, d: usize, seed: u64) -> BenchCase {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let kappa = CurvatureParam::new(-1.0, true).expect("negative curvature");
        let params = AttentionParams::init(
            d,
            d,
            kappa.clone(),
            kappa.clone(),
            kappa.clone(),
            2.0,
            kind,
            &mut rng,
        );
        let x = autodiff::no_grad(|| random_batch(n, d, &kappa, 0.5, &mut rng));
        BenchCase { x, params }
    }

    fn run_once(&self) {
        let out = attention_forward(&self.x, &self.params).expect("bench forward");
        let loss = out.data().mul(out.data()).sum();
        backward(&loss).expect("bench backward");
    }
}

struct BenchResult {
    n: usize,
    median_ms: f64,
    peak_bytes: usize,
}

/// Measure every size of one attention kind, one size at a time: two
/// warmup runs (the second doubles as the peak-memory pass), then `reps`
/// timed runs back to back so each size is measured in a steady state.
/// Each case is built lazily and dropped before the next so one size's
/// buffers never sit inside another size's peak measurement.
fn run_kind(
    kind: AttentionKind,
    sizes: &[usize],
    d: usize,
    reps: usize,
    seed: u64,
) -> Vec<BenchResult> {
    let mut results = Vec::with_capacity(sizes.len());
    for &n in sizes {
        let case = BenchCase::new(kind, n, d, seed);
        case.run_once(); // warmup
        alloc::reset_peak();
        case.run_once();
        let peak_bytes = alloc::peak_bytes();
        let mut times = Vec::with_capacity(reps);
        for _ in 0..reps {
            let t0 = Instant::now();
            case.run_once();
            times.push(t0.elapsed().as_secs_f64() * 1e3);
        }
        times.sort_by(|a, b| a.partial_cmp(b).expect("finite times"));
        results.push(BenchResult {
            n,
            median_ms: times[times.len() / 2],
            peak_bytes,
        });
    }
    results
}

#[allow(clippy::too_many_arguments)]
pub fn cmd_bench(
    attention: BenchAttention,
    n_list: &str,
    d: usize,
    reps: usize,
    out: PathBuf,
    mem_cap_bytes: usize,
    seed: u64,
) -> ExitCode {
    let sizes: Vec<usize> = match n_list
        .split(',')
        .map(|tok| tok.trim().parse::<usize>())
        .collect::<Result<Vec<_>, _>>()
    {
        Ok(v) if !v.is_empty() => v,
        _ => return fail(2, format!("bad --n-list `{n_list}`")),
    };
    if sizes.windows(2).any(|w| w[0] >= w[1]) {
        return fail(2, "--n-list must be strictly ascending");
    }
    if d < 2 || reps < 1 {
        return fail(2, "need --d >= 2 and --reps >= 1");
    }

    // NaN checks cost a full scan per op; benchmarks measure the real
    // kernels.
    autodiff::set_nan_checks(false);

    // Pin the malloc mmap threshold. glibc adapts it dynamically, which
    // makes buffer reuse depend on which sizes ran earlier in the process
    // and skews cross-size timing ratios.
    #[cfg(target_os = "linux")]
    unsafe {
        libc::mallopt(libc::M_MMAP_THRESHOLD, 128 * 1024);
    }

    let kinds: &[AttentionKind] = match attention {
        BenchAttention::Linear => &[AttentionKind::Linear],
        BenchAttention::Softmax => &[AttentionKind::Softmax],
        BenchAttention::Both => &[AttentionKind::Linear, AttentionKind::Softmax],
    };

    let granularity_ms = timer_granularity();
    let started = now_ms();

    // Process-level warmup so the first measured size does not pay for
    // lazy one-time initialization.
    BenchCase::new(AttentionKind::Linear, 128.min(sizes[0]), d, seed).run_once();

    let mut csv = String::from("n,attention,median_ms,peak_bytes\n");
    for &kind in kinds {
        let kind_name = match kind {
            AttentionKind::Linear => "linear",
            AttentionKind::Softmax => "softmax",
        };
        let measured: Vec<usize> = sizes
            .iter()
            .copied()
            .filter(|&n| {
                kind != AttentionKind::Softmax || predicted_softmax_peak(n) <= mem_cap_bytes
            })
            .collect();
        let cases = run_kind(kind, &measured, d, reps, seed);
        let mut results = cases.iter().peekable();
        for n in sizes.iter().copied() {
            match results.peek() {
                Some(case) if case.n == n => {
                    let case = results.next().unwrap();
                    let median = case.median_ms;
                    if n == sizes[0] && median < 100.0 * granularity_ms {
                        return fail(
                            5,
                            format!(
                                "timer resolution {granularity_ms:.6} ms is too coarse for n = {n} ({median:.6} ms)"
                            ),
                        );
                    }
                    eprintln!(
                        "bench: n={n} {kind_name}: median {median:.3} ms, peak {} bytes",
                        case.peak_bytes
                    );
                    csv.push_str(&format!("{n},{kind_name},{median:.3},{}\n", case.peak_bytes));
                }
                _ => {
                    eprintln!(
                        "bench: n={n} {kind_name}: predicted peak {} exceeds cap {mem_cap_bytes}, skipping",
                        predicted_softmax_peak(n)
                    );
                    csv.push_str(&format!("{n},{kind_name},skipped,skipped\n"));
                }
            }
        }
    }
    eprintln!("bench: total wall time {} ms (1 thread)", now_ms() - started);

    if let Err(e) = std::fs::write(&out, csv) {
        return fail(3, format!("cannot write {}: {e}", out.display()));
    }
    ExitCode::SUCCESS
}
