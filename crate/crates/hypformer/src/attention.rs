//! Hyperbolic self-attention, quadratic and linear.
//!
//! The softmax path scores query/key pairs by exp(-d^2 / sqrt(d')) with d
//! the Lorentz distance and aggregates values through the Lorentzian
//! midpoint; it materializes the NxN attention map. The linear path slices
//! the space-like coordinates, runs them through the focus map, and
//! reorders the products as Q_s (K_s^T V_s) with a shared denominator, so
//! time and attention state stay O(N d'^2) and O(d'^2).

use rand::Rng;

use crate::autodiff::Tensor;
use crate::blocks::{htc_forward, hyp_concat, recalibrate, HtcParams};
use crate::error::{Error, Result};
use crate::geometry::{normalize_rows_to_manifold, CurvatureParam, LorentzBatch};

/// Focus map hyperparameters: the sharpening power p and the trainable
/// positive scaling t (softplus-parametrized, init 1).
#[derive(Clone, Debug)]
pub struct FocusParams {
    power: f64,
    t_raw: Tensor,
    eps_den: f64,
}

impl FocusParams {
    pub fn new(power: f64, trainable: bool) -> Result<FocusParams> {
        if power <= 0.0 || !power.is_finite() {
            return Err(Error::Domain {
                op: "FocusParams",
                detail: format!("focus power must be positive, got {power}"),
            });
        }
        let raw = ndarray::Array2::from_elem((1, 1), crate::autodiff::softplus_inv(1.0));
        let t_raw = if trainable {
            Tensor::param(raw)
        } else {
            Tensor::from_array(raw)
        };
        Ok(FocusParams {
            power,
            t_raw,
            eps_den: 1e-6,
        })
    }

    /// Override the denominator guard (exactness tests use 0).
    pub fn with_eps_den(mut self, eps_den: f64) -> FocusParams {
        self.eps_den = eps_den;
        self
    }

    pub fn power(&self) -> f64 {
        self.power
    }

    pub fn eps_den(&self) -> f64 {
        self.eps_den
    }

    pub fn t_raw(&self) -> &Tensor {
        &self.t_raw
    }

    /// t > 0 as a graph-connected scalar.
    pub fn t_t(&self) -> Tensor {
        self.t_raw.softplus()
    }
}

/// Non-negative feature map phi(e) = (||e~|| / ||e~^p||) e~^p with
/// e~ = relu(e) / t, applied rowwise. Norm-preserving on nonzero rows;
/// phi(0) = 0.
pub fn focus_map(rows: &Tensor, params: &FocusParams) -> Tensor {
    rows.focus_rows(&params.t_t(), params.power)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttentionKind {
    Linear,
    Softmax,
}

/// Projection + output parameters for one attention block.
///
/// W_Q, W_K, W_V share the curvature pair (kappa_1 -> kappa_2) and the
/// width d'; psi is the bias-free residual map on space-like coordinates;
/// kappa_3 is the output curvature of the linear path.
#[derive(Clone, Debug)]
pub struct AttentionParams {
    wq: HtcParams,
    wk: HtcParams,
    wv: HtcParams,
    psi: Tensor,
    kappa_out: CurvatureParam,
    focus: FocusParams,
    kind: AttentionKind,
}

impl AttentionParams {
    pub fn new(
        wq: HtcParams,
        wk: HtcParams,
        wv: HtcParams,
        psi: Tensor,
        kappa_out: CurvatureParam,
        focus: FocusParams,
        kind: AttentionKind,
    ) -> Result<AttentionParams> {
        let d = wq.output_dim();
        if wk.output_dim() != d || wv.output_dim() != d {
            return Err(Error::ShapeMismatch {
                op: "AttentionParams",
                detail: "Q/K/V projections must share the output width".into(),
            });
        }
        if psi.shape() != (d, d) {
            return Err(Error::ShapeMismatch {
                op: "AttentionParams",
                detail: format!("psi must be {d}x{d}, got {:?}", psi.shape()),
            });
        }
        Ok(AttentionParams {
            wq,
            wk,
            wv,
            psi,
            kappa_out,
            focus,
            kind,
        })
    }

    #[allow(clippy::too_many_arguments)]
    pub fn init<R: Rng>(
        d_in: usize,
        d_model: usize,
        kappa_in: CurvatureParam,
        kappa_mid: CurvatureParam,
        kappa_out: CurvatureParam,
        focus_power: f64,
        kind: AttentionKind,
        rng: &mut R,
    ) -> AttentionParams {
        let mk = |rng: &mut R| {
            HtcParams::init(d_in, d_model, kappa_in.clone(), kappa_mid.clone(), rng)
        };
        let wq = mk(rng);
        let wk = mk(rng);
        let wv = mk(rng);
        let bound = 1.0 / (d_model as f64).sqrt();
        let psi = Tensor::param(ndarray::Array2::from_shape_fn((d_model, d_model), |_| {
            rng.gen_range(-bound..bound)
        }));
        AttentionParams {
            wq,
            wk,
            wv,
            psi,
            kappa_out,
            focus: FocusParams::new(focus_power, true).expect("positive power"),
            kind,
        }
    }

    pub fn kind(&self) -> AttentionKind {
        self.kind
    }

    pub fn wq(&self) -> &HtcParams {
        &self.wq
    }

    pub fn wk(&self) -> &HtcParams {
        &self.wk
    }

    pub fn wv(&self) -> &HtcParams {
        &self.wv
    }

    pub fn psi(&self) -> &Tensor {
        &self.psi
    }

    pub fn focus(&self) -> &FocusParams {
        &self.focus
    }

    pub fn kappa_mid(&self) -> &CurvatureParam {
        self.wq.kappa_out()
    }

    /// Curvature of the block output: kappa_3 for the linear path, kappa_2
    /// for softmax (which never leaves the projection hyperboloid).
    pub fn output_curvature(&self) -> &CurvatureParam {
        match self.kind {
            AttentionKind::Linear => &self.kappa_out,
            AttentionKind::Softmax => self.wq.kappa_out(),
        }
    }

    pub fn model_dim(&self) -> usize {
        self.wq.output_dim()
    }
}

fn project_qkv(
    x: &LorentzBatch,
    params: &AttentionParams,
) -> Result<(LorentzBatch, LorentzBatch, LorentzBatch)> {
    let q = htc_forward(x, &params.wq)?;
    let k = htc_forward(x, &params.wk)?;
    let v = htc_forward(x, &params.wv)?;
    Ok((q, k, v))
}

/// Linear attention: HTC projections, space-like slice, focus map, then
/// Z_s = Q_s (K_s^T V_s) / (Q_s (K_s^T 1) + eps), psi-residual, and
/// time-like calibration onto kappa_3. O(N d'^2) time, O(d'^2) state.
pub fn linear_attention(x: &LorentzBatch, params: &AttentionParams) -> Result<LorentzBatch> {
    if x.is_empty() {
        return Err(Error::EmptyInput {
            op: "linear_attention",
            detail: "attention over zero tokens".into(),
        });
    }
    let (q, k, v) = project_qkv(x, params)?;
    let a = focus_map(&q.space(), &params.focus);
    let b = focus_map(&k.space(), &params.focus);
    let vf = focus_map(&v.space(), &params.focus);

    // K_s^T V_s is d' x d'; K_s^T 1 is the column-sum vector.
    let kv = b.transpose().matmul(&vf);
    let num = a.matmul(&kv);
    let ksum = b.sum_axis0();
    let den = a
        .matmul(&ksum.transpose())
        .add_scalar(params.focus.eps_den);
    let z = num.div(&den);
    let z_res = z.add(&vf.matmul(&params.psi));

    let data = recalibrate(&z_res, params.kappa_mid(), &params.kappa_out);
    Ok(LorentzBatch::from_parts(data, params.kappa_out.clone()))
}

/// Quadratic softmax attention: similarity exp(-d^2 / sqrt(d')) from the
/// Lorentz distance, row-normalized, aggregated by the Lorentzian midpoint.
pub fn softmax_attention(x: &LorentzBatch, params: &AttentionParams) -> Result<LorentzBatch> {
    if x.is_empty() {
        return Err(Error::EmptyInput {
            op: "softmax_attention",
            detail: "attention over zero tokens".into(),
        });
    }
    let (q, k, v) = project_qkv(x, params)?;
    let kappa2 = params.kappa_mid();
    let inner = q.data().pairwise_lorentz_inner(k.data());
    let logits = inner.lorentz_neg_sq_distance(&kappa2.value_t(), params.model_dim());
    let alpha = logits.row_softmax();
    let summed = alpha.matmul(v.data());
    let data = normalize_rows_to_manifold(&summed, kappa2);
    Ok(LorentzBatch::from_parts(data, kappa2.clone()))
}

/// Dispatch on the configured attention kind.
pub fn attention_forward(x: &LorentzBatch, params: &AttentionParams) -> Result<LorentzBatch> {
    match params.kind {
        AttentionKind::Linear => linear_attention(x, params),
        AttentionKind::Softmax => softmax_attention(x, params),
    }
}

/// h parallel full-width attention blocks, combined by hyperbolic
/// concatenation and an HTC back to d'. With h = 1 this is exactly the
/// single attention block.
#[derive(Clone, Debug)]
pub struct MultiHeadParams {
    heads: Vec<AttentionParams>,
    combine: Option<HtcParams>,
}

impl MultiHeadParams {
    pub fn new(heads: Vec<AttentionParams>, combine: Option<HtcParams>) -> Result<MultiHeadParams> {
        if heads.is_empty() {
            return Err(Error::EmptyInput {
                op: "MultiHeadParams",
                detail: "at least one head required".into(),
            });
        }
        if heads.len() > 1 && combine.is_none() {
            return Err(Error::ShapeMismatch {
                op: "MultiHeadParams",
                detail: "h > 1 needs a combining HTC".into(),
            });
        }
        Ok(MultiHeadParams { heads, combine })
    }

    #[allow(clippy::too_many_arguments)]
    pub fn init<R: Rng>(
        h: usize,
        d_in: usize,
        d_model: usize,
        kappa_in: CurvatureParam,
        kappa_mid: CurvatureParam,
        kappa_out: CurvatureParam,
        focus_power: f64,
        kind: AttentionKind,
        rng: &mut R,
    ) -> MultiHeadParams {
        let heads: Vec<AttentionParams> = (0..h.max(1))
            .map(|_| {
                AttentionParams::init(
                    d_in,
                    d_model,
                    kappa_in.clone(),
                    kappa_mid.clone(),
                    kappa_out.clone(),
                    focus_power,
                    kind,
                    rng,
                )
            })
            .collect();
        let combine = (h > 1).then(|| {
            let head_out = heads[0].output_curvature().clone();
            HtcParams::init(d_model * h, d_model, head_out, kappa_out.clone(), rng)
        });
        MultiHeadParams { heads, combine }
    }

    pub fn heads(&self) -> &[AttentionParams] {
        &self.heads
    }

    pub fn combine(&self) -> Option<&HtcParams> {
        self.combine.as_ref()
    }

    pub fn output_curvature(&self) -> &CurvatureParam {
        match &self.combine {
            Some(c) => c.kappa_out(),
            None => self.heads[0].output_curvature(),
        }
    }
}

/// Multi-head forward; h = 1 reduces to the single attention op.
pub fn multi_head(x: &LorentzBatch, params: &MultiHeadParams) -> Result<LorentzBatch> {
    if params.heads.len() == 1 {
        return attention_forward(x, &params.heads[0]);
    }
    let mut outs = params.heads.iter().map(|h| attention_forward(x, h));
    let mut acc = outs.next().expect("non-empty heads")?;
    for out in outs {
        acc = hyp_concat(&acc, &out?)?;
    }
    htc_forward(&acc, params.combine.as_ref().expect("combine for h > 1"))
}
