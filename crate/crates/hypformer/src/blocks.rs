//! Foundational hyperbolic blocks.
//!
//! HTC applies a linear map with bias to the full (d+1)-coordinate vector
//! and recomputes the time coordinate for the target curvature, so it can
//! move a batch between hyperboloids while preserving relative distances.
//! HRC refines only the space-like coordinates (layer norm, batch norm,
//! dropout, activation, concatenation) and recalibrates time afterwards;
//! the causal structure of the frame is untouched.

use ndarray::Array2;
use rand::Rng;
use std::sync::Mutex;

use crate::autodiff::{concat_cols, Tensor};
use crate::error::{Error, Result};
use crate::geometry::{
    normalize_rows_to_manifold, project_to_manifold, CurvatureParam, LorentzBatch,
};

/// Epsilon inside normalization denominators; small enough that the moment
/// oracle (mean 0, var 1 within 1e-7) holds on unit-scale inputs.
const NORM_EPS: f64 = 1e-12;

/// Train/eval switch for dropout and batch norm.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Parameters of one hyperbolic linear transformation with curvature change.
#[derive(Clone, Debug)]
pub struct HtcParams {
    w: Tensor,
    b: Tensor,
    kappa_in: CurvatureParam,
    kappa_out: CurvatureParam,
}

impl HtcParams {
    pub fn new(
        w: Tensor,
        b: Tensor,
        kappa_in: CurvatureParam,
        kappa_out: CurvatureParam,
    ) -> Result<HtcParams> {
        let (wr, wc) = w.shape();
        if wr < 2 || wc < 1 || b.shape() != (1, wc) {
            return Err(Error::ShapeMismatch {
                op: "HtcParams",
                detail: format!("w {:?}, b {:?}", w.shape(), b.shape()),
            });
        }
        let finite = w.with_values(|v| v.iter().all(|x| x.is_finite()))
            && b.with_values(|v| v.iter().all(|x| x.is_finite()));
        if !finite {
            return Err(Error::Domain {
                op: "HtcParams",
                detail: "non-finite parameter".into(),
            });
        }
        Ok(HtcParams {
            w,
            b,
            kappa_in,
            kappa_out,
        })
    }

    /// Fresh parameters: W ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in)), b = 0.
    pub fn init<R: Rng>(
        d_in: usize,
        d_out: usize,
        kappa_in: CurvatureParam,
        kappa_out: CurvatureParam,
        rng: &mut R,
    ) -> HtcParams {
        let fan_in = d_in + 1;
        let bound = 1.0 / (fan_in as f64).sqrt();
        let w = Array2::from_shape_fn((fan_in, d_out), |_| rng.gen_range(-bound..bound));
        HtcParams {
            w: Tensor::param(w),
            b: Tensor::param(Array2::zeros((1, d_out))),
            kappa_in,
            kappa_out,
        }
    }

    /// The curvature-change-only transformation: W = [0; I], b = 0, which
    /// realises z' = sqrt(kappa_in / kappa_out) * z.
    pub fn curvature_change(
        dim: usize,
        kappa_in: CurvatureParam,
        kappa_out: CurvatureParam,
    ) -> HtcParams {
        let mut w = Array2::zeros((dim + 1, dim));
        for j in 0..dim {
            w[(j + 1, j)] = 1.0;
        }
        HtcParams {
            w: Tensor::from_array(w),
            b: Tensor::zeros(1, dim),
            kappa_in,
            kappa_out,
        }
    }

    pub fn weight(&self) -> &Tensor {
        &self.w
    }

    pub fn bias(&self) -> &Tensor {
        &self.b
    }

    pub fn kappa_in(&self) -> &CurvatureParam {
        &self.kappa_in
    }

    pub fn kappa_out(&self) -> &CurvatureParam {
        &self.kappa_out
    }

    pub fn input_dim(&self) -> usize {
        self.w.rows() - 1
    }

    pub fn output_dim(&self) -> usize {
        self.w.cols()
    }
}

/// Time-like recalibration shared by HTC and HRC: wraps space coordinates
/// `f` (produced from a batch at curvature `kin`) onto the `kout`
/// hyperboloid.
pub(crate) fn recalibrate(f: &Tensor, kin: &CurvatureParam, kout: &CurvatureParam) -> Tensor {
    let ratio = kin.abs_t().div(&kout.abs_t());
    let sum_sq = f.rowwise_sum_sq();
    let inv_abs_out = Tensor::ones(1, 1).div(&kout.abs_t());
    let time = sum_sq.mul(&ratio).add(&inv_abs_out).sqrt();
    let space = f.mul(&ratio.sqrt());
    concat_cols(&time, &space)
}

/// Hyperbolic linear transformation: f_t(x) = W^T x + b on the full
/// (d+1)-vector, then time-like recalibration onto the output curvature.
pub fn htc_forward(x: &LorentzBatch, params: &HtcParams) -> Result<LorentzBatch> {
    if !x.curvature().agrees_with(&params.kappa_in) {
        return Err(Error::CurvatureMismatch {
            left: x.curvature().value(),
            right: params.kappa_in.value(),
        });
    }
    if x.dim() != params.input_dim() {
        return Err(Error::ShapeMismatch {
            op: "htc_forward",
            detail: format!(
                "batch dim {} but weight expects {}",
                x.dim(),
                params.input_dim()
            ),
        });
    }
    let f = x.data().matmul(&params.w).add(&params.b);
    let data = recalibrate(&f, &params.kappa_in, &params.kappa_out);
    Ok(LorentzBatch::from_parts(data, params.kappa_out.clone()))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Sigmoid,
}

/// Space-like function tag of an HRC block. `Composed` applies its entries
/// left to right with a single time recalibration at the end.
#[derive(Clone, Debug)]
pub enum SpaceFn {
    Identity,
    LayerNorm,
    BatchNorm,
    Dropout(f64),
    Activation(Activation),
    Composed(Vec<SpaceFn>),
}

/// Fuse two consecutive space-like functions into one HRC application.
pub fn compose(f1: SpaceFn, f2: SpaceFn) -> SpaceFn {
    SpaceFn::Composed(vec![f1, f2])
}

/// Learnable gain/bias for the norm functions.
#[derive(Clone, Debug)]
pub struct NormParams {
    pub gain: Tensor,
    pub bias: Tensor,
}

impl NormParams {
    fn init(dim: usize) -> NormParams {
        NormParams {
            gain: Tensor::param(Array2::ones((1, dim))),
            bias: Tensor::param(Array2::zeros((1, dim))),
        }
    }
}

#[derive(Debug)]
struct RunningStats {
    mean: Array2<f64>,
    var: Array2<f64>,
}

/// One readjustment/refinement block: a space-like function plus the
/// curvature pair for the final time recalibration.
#[derive(Debug)]
pub struct HrcSpec {
    f_r: SpaceFn,
    kappa_in: CurvatureParam,
    kappa_out: CurvatureParam,
    learnables: Option<NormParams>,
    running: Mutex<Option<RunningStats>>,
    momentum: f64,
}

impl HrcSpec {
    pub fn new(
        f_r: SpaceFn,
        dim: usize,
        kappa_in: CurvatureParam,
        kappa_out: CurvatureParam,
    ) -> Result<HrcSpec> {
        fn validate(f: &SpaceFn, dim: usize) -> Result<bool> {
            match f {
                SpaceFn::Dropout(rate) => {
                    if !(0.0..1.0).contains(rate) {
                        return Err(Error::Domain {
                            op: "HrcSpec",
                            detail: format!("dropout rate {rate} outside [0, 1)"),
                        });
                    }
                    Ok(false)
                }
                SpaceFn::LayerNorm | SpaceFn::BatchNorm => {
                    if dim < 2 {
                        return Err(Error::Domain {
                            op: "HrcSpec",
                            detail: format!("normalization needs d >= 2, got {dim}"),
                        });
                    }
                    Ok(true)
                }
                SpaceFn::Composed(list) => {
                    let mut needs = false;
                    for f in list {
                        needs |= validate(f, dim)?;
                    }
                    Ok(needs)
                }
                _ => Ok(false),
            }
        }
        let needs_norm = validate(&f_r, dim)?;
        Ok(HrcSpec {
            f_r,
            kappa_in,
            kappa_out,
            learnables: needs_norm.then(|| NormParams::init(dim)),
            running: Mutex::new(None),
            momentum: 0.9,
        })
    }

    pub fn identity(dim: usize, kappa: CurvatureParam) -> HrcSpec {
        HrcSpec::new(SpaceFn::Identity, dim, kappa.clone(), kappa).expect("identity is valid")
    }

    pub fn layernorm(
        dim: usize,
        kappa_in: CurvatureParam,
        kappa_out: CurvatureParam,
    ) -> Result<HrcSpec> {
        HrcSpec::new(SpaceFn::LayerNorm, dim, kappa_in, kappa_out)
    }

    pub fn batchnorm(
        dim: usize,
        kappa_in: CurvatureParam,
        kappa_out: CurvatureParam,
    ) -> Result<HrcSpec> {
        HrcSpec::new(SpaceFn::BatchNorm, dim, kappa_in, kappa_out)
    }

    pub fn dropout(rate: f64, dim: usize, kappa: CurvatureParam) -> Result<HrcSpec> {
        HrcSpec::new(SpaceFn::Dropout(rate), dim, kappa.clone(), kappa)
    }

    pub fn activation(act: Activation, dim: usize, kappa: CurvatureParam) -> HrcSpec {
        HrcSpec::new(SpaceFn::Activation(act), dim, kappa.clone(), kappa)
            .expect("activation is valid")
    }

    pub fn f_r(&self) -> &SpaceFn {
        &self.f_r
    }

    pub fn kappa_in(&self) -> &CurvatureParam {
        &self.kappa_in
    }

    pub fn kappa_out(&self) -> &CurvatureParam {
        &self.kappa_out
    }

    pub fn learnables(&self) -> Option<&NormParams> {
        self.learnables.as_ref()
    }

    fn apply_space_fn<R: Rng>(&self, f: &SpaceFn, xs: &Tensor, mode: Mode, rng: &mut R) -> Tensor {
        match f {
            SpaceFn::Identity => xs.clone(),
            SpaceFn::Activation(Activation::Relu) => xs.relu(),
            SpaceFn::Activation(Activation::Sigmoid) => xs.sigmoid(),
            SpaceFn::Dropout(rate) => {
                if mode == Mode::Eval || *rate == 0.0 {
                    return xs.clone();
                }
                let keep = 1.0 - rate;
                let (n, d) = xs.shape();
                // Inverted dropout: kept entries are scaled by 1/keep so
                // the eval path is the exact identity.
                let mask = Array2::from_shape_fn((n, d), |_| {
                    if rng.gen::<f64>() < keep {
                        1.0 / keep
                    } else {
                        0.0
                    }
                });
                xs.mul(&Tensor::from_array(mask))
            }
            SpaceFn::LayerNorm => {
                let d = xs.cols();
                let mu = xs.sum_axis1().scale(1.0 / d as f64);
                let centered = xs.sub(&mu);
                let var = centered.mul(&centered).sum_axis1().scale(1.0 / d as f64);
                let normed = centered.div(&var.add_scalar(NORM_EPS).sqrt());
                let np = self.learnables.as_ref().expect("norm learnables");
                normed.mul(&np.gain).add(&np.bias)
            }
            SpaceFn::BatchNorm => {
                let np = self.learnables.as_ref().expect("norm learnables");
                match mode {
                    Mode::Train => {
                        let n = xs.rows();
                        let mu = xs.sum_axis0().scale(1.0 / n as f64);
                        let centered = xs.sub(&mu);
                        let var = centered.mul(&centered).sum_axis0().scale(1.0 / n as f64);
                        let normed = centered.div(&var.add_scalar(NORM_EPS).sqrt());
                        let (mv, vv) = crate::autodiff::no_grad(|| (mu.value(), var.value()));
                        let mut guard = self.running.lock().unwrap();
                        let m = self.momentum;
                        match &mut *guard {
                            Some(stats) => {
                                stats.mean = m * &stats.mean + (1.0 - m) * &mv;
                                stats.var = m * &stats.var + (1.0 - m) * &vv;
                            }
                            None => {
                                // Running stats start at mean 0, var 1.
                                *guard = Some(RunningStats {
                                    mean: (1.0 - m) * &mv,
                                    var: m * Array2::ones(vv.dim()) + (1.0 - m) * &vv,
                                });
                            }
                        }
                        normed.mul(&np.gain).add(&np.bias)
                    }
                    Mode::Eval => {
                        let guard = self.running.lock().unwrap();
                        let (mean, var) = match &*guard {
                            Some(stats) => (stats.mean.clone(), stats.var.clone()),
                            None => (Array2::zeros((1, xs.cols())), Array2::ones((1, xs.cols()))),
                        };
                        let mu = Tensor::from_array(mean);
                        let sd = Tensor::from_array(var).add_scalar(NORM_EPS).sqrt();
                        xs.sub(&mu).div(&sd).mul(&np.gain).add(&np.bias)
                    }
                }
            }
            SpaceFn::Composed(list) => {
                let mut cur = xs.clone();
                for step in list {
                    cur = self.apply_space_fn(step, &cur, mode, rng);
                }
                cur
            }
        }
    }

    /// Apply the space-like function, then recalibrate time onto the
    /// output curvature.
    pub fn forward<R: Rng>(
        &self,
        x: &LorentzBatch,
        mode: Mode,
        rng: &mut R,
    ) -> Result<LorentzBatch> {
        if !x.curvature().agrees_with(&self.kappa_in) {
            return Err(Error::CurvatureMismatch {
                left: x.curvature().value(),
                right: self.kappa_in.value(),
            });
        }
        let s = self.apply_space_fn(&self.f_r, &x.space(), mode, rng);
        let data = recalibrate(&s, &self.kappa_in, &self.kappa_out);
        Ok(LorentzBatch::from_parts(data, self.kappa_out.clone()))
    }
}

/// Free-function alias for [`HrcSpec::forward`].
pub fn hrc_forward<R: Rng>(
    x: &LorentzBatch,
    spec: &HrcSpec,
    mode: Mode,
    rng: &mut R,
) -> Result<LorentzBatch> {
    spec.forward(x, mode, rng)
}

/// Concatenate space-like parts of two batches at the same curvature and
/// recompute the time coordinate.
pub fn hyp_concat(a: &LorentzBatch, b: &LorentzBatch) -> Result<LorentzBatch> {
    if a.len() != b.len() {
        return Err(Error::ShapeMismatch {
            op: "hyp_concat",
            detail: format!("batch sizes {} vs {}", a.len(), b.len()),
        });
    }
    if !a.curvature().agrees_with(b.curvature()) {
        return Err(Error::CurvatureMismatch {
            left: a.curvature().value(),
            right: b.curvature().value(),
        });
    }
    let space = concat_cols(&a.space(), &b.space());
    Ok(project_to_manifold(&space, a.curvature()))
}

/// Positional-encoding parameters: an HTC producing the position vector p
/// plus the mixing magnitude epsilon.
#[derive(Clone, Debug)]
pub struct PositionalParams {
    htc: HtcParams,
    epsilon: f64,
}

impl PositionalParams {
    pub fn new(htc: HtcParams, epsilon: f64) -> Result<PositionalParams> {
        if epsilon <= 0.0 || epsilon.is_nan() {
            return Err(Error::Domain {
                op: "PositionalParams",
                detail: format!("epsilon must be positive, got {epsilon}"),
            });
        }
        Ok(PositionalParams { htc, epsilon })
    }

    pub fn init<R: Rng>(dim: usize, kappa: CurvatureParam, rng: &mut R) -> PositionalParams {
        PositionalParams {
            htc: HtcParams::init(dim, dim, kappa.clone(), kappa, rng),
            epsilon: 1.0,
        }
    }

    pub fn htc(&self) -> &HtcParams {
        &self.htc
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }
}

/// Positional encoding: x~ = (x + eps * p) / sqrt(|kappa <u,u>_L|) with
/// p = HTC(x); the same midpoint normalization as the residual connection.
pub fn hyp_positional_encoding(
    x: &LorentzBatch,
    params: &PositionalParams,
) -> Result<LorentzBatch> {
    let p = htc_forward(x, &params.htc)?;
    if p.dim() != x.dim() {
        return Err(Error::ShapeMismatch {
            op: "hyp_positional_encoding",
            detail: format!("position dim {} vs input dim {}", p.dim(), x.dim()),
        });
    }
    let u = x.data().add(&p.data().scale(params.epsilon));
    let data = normalize_rows_to_manifold(&u, x.curvature());
    Ok(LorentzBatch::from_parts(data, x.curvature().clone()))
}

/// Midpoint-style residual connection: normalize x + y back onto the
/// manifold.
pub fn hyp_residual(x: &LorentzBatch, y: &LorentzBatch) -> Result<LorentzBatch> {
    if x.data().shape() != y.data().shape() {
        return Err(Error::ShapeMismatch {
            op: "hyp_residual",
            detail: format!("{:?} vs {:?}", x.data().shape(), y.data().shape()),
        });
    }
    if !x.curvature().agrees_with(y.curvature()) {
        return Err(Error::CurvatureMismatch {
            left: x.curvature().value(),
            right: y.curvature().value(),
        });
    }
    let u = x.data().add(y.data());
    let data = normalize_rows_to_manifold(&u, x.curvature());
    Ok(LorentzBatch::from_parts(data, x.curvature().clone()))
}
