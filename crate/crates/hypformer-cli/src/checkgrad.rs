//! Finite-difference gradient verification over the library's composites.
//!
//! Setting HYPF_CORRUPT_GRAD=1 injects a detached dependency into the
//! first case, the exact bug class this command exists to catch; the run
//! must then exit 1.

use std::process::ExitCode;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use hypformer::attention::{
    attention_forward, AttentionKind, AttentionParams, FocusParams,
};
use hypformer::autodiff::gradcheck::grad_check;
use hypformer::autodiff::Tensor;
use hypformer::blocks::{
    htc_forward, hyp_positional_encoding, hyp_residual, HtcParams, Mode, PositionalParams,
};
use hypformer::data::gen_tree;
use hypformer::geometry::{
    distance, exp_map, lift_euclidean, log_map, lorentz_midpoint, CurvatureParam,
};
use hypformer::model::{loss, normalized_adjacency, Hypformer, HypformerConfig};

const H: f64 = 1e-5;
const THRESHOLD: f64 = 1e-4;

fn randn(rng: &mut ChaCha20Rng, r: usize, c: usize, scale: f64) -> Array2<f64> {
    Array2::from_shape_fn((r, c), |_| rng.gen_range(-scale..scale))
}

fn corrupt_enabled() -> bool {
    std::env::var("HYPF_CORRUPT_GRAD").is_ok_and(|v| v == "1")
}

fn case_geometry(seed: u64) -> f64 {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let k = CurvatureParam::new(-1.3, true).unwrap();
    let a = Tensor::param(randn(&mut rng, 6, 4, 0.5));
    let b = Tensor::param(randn(&mut rng, 6, 4, 0.5));
    let kraw = k.raw().clone();
    let corrupt = corrupt_enabled();

    grad_check(
        |xs| {
            let kp = CurvatureParam::from_raw(xs[2].clone(), true);
            let x = lift_euclidean(&xs[0], &kp).unwrap();
            let y = lift_euclidean(&xs[1], &kp).unwrap();
            let d = distance(&x, &y).unwrap().sum();
            let u = log_map(&x, &y).unwrap();
            let z = exp_map(&x, &u).unwrap();
            let m = lorentz_midpoint(&z, &[0.3, 0.7, 1.0, 0.2, 0.5, 0.9]).unwrap();
            let mut total = d.add(&m.data().sum());
            if corrupt {
                // Detached term: the forward value depends on x but the
                // recorded graph does not.
                total = total.add(&xs[0].detach().sum().scale(0.05));
            }
            total
        },
        &[a, b, kraw],
        H,
    )
}

fn case_blocks(seed: u64) -> f64 {
    let mut rng = ChaCha20Rng::seed_from_u64(seed.wrapping_add(1));
    let k1 = CurvatureParam::new(-1.0, true).unwrap();
    let k2 = CurvatureParam::new(-2.0, true).unwrap();
    let feats = Tensor::param(randn(&mut rng, 5, 3, 0.5));
    let htc = HtcParams::init(3, 4, k1.clone(), k2.clone(), &mut rng);
    let pe = PositionalParams::init(4, k2.clone(), &mut rng);
    let leaves = vec![
        feats,
        htc.weight().clone(),
        htc.bias().clone(),
        pe.htc().weight().clone(),
        pe.htc().bias().clone(),
        k1.raw().clone(),
        k2.raw().clone(),
    ];

    grad_check(
        |xs| {
            let ka = CurvatureParam::from_raw(xs[5].clone(), true);
            let kb = CurvatureParam::from_raw(xs[6].clone(), true);
            let x = lift_euclidean(&xs[0], &ka).unwrap();
            let params = HtcParams::new(xs[1].clone(), xs[2].clone(), ka, kb.clone()).unwrap();
            let h = htc_forward(&x, &params).unwrap();
            let pe_htc =
                HtcParams::new(xs[3].clone(), xs[4].clone(), kb.clone(), kb.clone()).unwrap();
            let pos = PositionalParams::new(pe_htc, 1.0).unwrap();
            let tagged = hyp_positional_encoding(&h, &pos).unwrap();
            let res = hyp_residual(&h, &tagged).unwrap();
            res.data().mul(res.data()).sum()
        },
        &leaves,
        H,
    )
}

fn case_attention(seed: u64) -> f64 {
    let mut worst = 0.0_f64;
    for (i, kind) in [AttentionKind::Linear, AttentionKind::Softmax]
        .into_iter()
        .enumerate()
    {
        let mut rng = ChaCha20Rng::seed_from_u64(seed.wrapping_add(2 + i as u64));
        let k1 = CurvatureParam::new(-1.0, true).unwrap();
        let k2 = CurvatureParam::new(-1.5, true).unwrap();
        let k3 = CurvatureParam::new(-2.0, true).unwrap();
        let params = AttentionParams::init(
            4,
            4,
            k1.clone(),
            k2.clone(),
            k3.clone(),
            2.0,
            kind,
            &mut rng,
        );
        let feats = Tensor::param(randn(&mut rng, 8, 4, 0.5));
        let leaves = vec![
            feats,
            params.wq().weight().clone(),
            params.wk().weight().clone(),
            params.wv().weight().clone(),
            params.psi().clone(),
            params.focus().t_raw().clone(),
            k1.raw().clone(),
            k2.raw().clone(),
            k3.raw().clone(),
        ];
        let err = grad_check(
            |xs| {
                let kp = CurvatureParam::from_raw(xs[6].clone(), true);
                let x = lift_euclidean(&xs[0], &kp).unwrap();
                let out = attention_forward(&x, &params).unwrap();
                out.data().mul(out.data()).sum()
            },
            &leaves,
            H,
        );
        worst = worst.max(err);
    }
    worst
}

fn case_model(seed: u64) -> f64 {
    let ds = gen_tree(2, 2, 4, 0.3, seed).unwrap();
    let config = HypformerConfig {
        d_in: 4,
        d_hidden: 8,
        d_out: 2,
        layers: 1,
        gnn_layers: 1,
        dropout: 0.0,
        seed,
        ..Default::default()
    };
    let mut model = Hypformer::new(config).unwrap();
    let adj = normalized_adjacency(ds.num_nodes(), &ds.edges).unwrap();
    let feats = Tensor::from_array(ds.features.clone());
    let leaves: Vec<Tensor> = model.parameters().into_iter().map(|(_, t)| t).collect();
    let cell = std::cell::RefCell::new(&mut model);
    grad_check(
        |_| {
            let m = cell.borrow_mut();
            let logits = m.forward(&feats, Some(&adj), Mode::Train).unwrap();
            loss(&logits, &ds.labels, &ds.splits.train).unwrap()
        },
        &leaves,
        H,
    )
}

fn case_focus(seed: u64) -> f64 {
    // Focus map alone, away from the relu kink, across the power regimes
    // (fractional, identity, sharpening).
    let mut worst = 0.0_f64;
    for (i, power) in [0.5, 1.0, 2.0, 3.0].into_iter().enumerate() {
        let mut rng = ChaCha20Rng::seed_from_u64(seed.wrapping_add(7 + i as u64));
        let focus = FocusParams::new(power, true).unwrap();
        let e = Tensor::param(Array2::from_shape_fn((6, 5), |_| rng.gen_range(0.2..1.5)));
        let leaves = vec![e, focus.t_raw().clone()];
        let err = grad_check(
            |xs| {
                let out = hypformer::attention::focus_map(&xs[0], &focus);
                out.mul(&out).sum()
            },
            &leaves,
            H,
        );
        worst = worst.max(err);
    }
    worst
}

pub fn cmd_checkgrad(seed: u64, cases: &str) -> ExitCode {
    let selected: Vec<&str> = match cases {
        "all" => vec!["geometry", "blocks", "attention", "model"],
        "geometry" | "blocks" | "attention" | "model" => vec![cases],
        other => return crate::fail(2, format!("unknown case set `{other}`")),
    };

    let mut all_ok = true;
    for case in selected {
        let err = match case {
            "geometry" => case_geometry(seed),
            "blocks" => case_blocks(seed),
            "attention" => case_attention(seed).max(case_focus(seed)),
            "model" => case_model(seed),
            _ => unreachable!(),
        };
        let ok = err < THRESHOLD;
        all_ok &= ok;
        println!(
            "case={case} max_rel_err={err:.3e} {}",
            if ok { "ok" } else { "FAIL" }
        );
    }
    if all_ok {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(1)
    }
}
