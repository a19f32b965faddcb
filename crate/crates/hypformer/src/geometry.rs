//! Lorentz-model primitives shared by every layer.
//!
//! A point batch lives on the upper sheet of the hyperboloid
//! `{x : kappa * <x,x>_L = 1, x_t > 0}` with `<x,y>_L = -x_t y_t + x_s . y_s`.
//! Every operation that returns a batch recomputes or preserves the
//! time-like coordinate so the constraint holds to machine precision, and
//! everything is differentiable, including with respect to the curvature.

use ndarray::Array2;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::autodiff::{concat_cols, Tensor};
use crate::error::{Error, Result};

/// Floor for the clamped arcosh argument inside the log map, where the
/// coefficient divides by sqrt(beta^2 - 1).
pub const ARCOSH_EPS: f64 = 1e-12;

/// Floor for midpoint-style denominators.
pub const DENOM_EPS: f64 = 1e-8;

/// Learnable strictly-negative curvature.
///
/// Stored as an unconstrained scalar `raw` with `kappa = -softplus(raw)`,
/// which keeps the curvature negative under any gradient update and smooth
/// in `raw`.
#[derive(Clone, Debug)]
pub struct CurvatureParam {
    raw: Tensor,
    trainable: bool,
}

impl CurvatureParam {
    /// Build from a target curvature value (must be negative).
    pub fn new(kappa: f64, trainable: bool) -> Result<CurvatureParam> {
        if kappa >= 0.0 || !kappa.is_finite() {
            return Err(Error::InvalidCurvature(kappa));
        }
        let raw_value = crate::autodiff::softplus_inv(-kappa);
        let arr = Array2::from_elem((1, 1), raw_value);
        let raw = if trainable {
            Tensor::param(arr)
        } else {
            Tensor::from_array(arr)
        };
        Ok(CurvatureParam { raw, trainable })
    }

    /// Curvature magnitude (1, 2, 3 in the usual search grid) mapped to
    /// kappa = -magnitude.
    pub fn from_magnitude(magnitude: f64, trainable: bool) -> Result<CurvatureParam> {
        CurvatureParam::new(-magnitude, trainable)
    }

    /// Rebuild a parameter around an existing raw tensor (shared storage).
    pub fn from_raw(raw: Tensor, trainable: bool) -> CurvatureParam {
        assert_eq!(raw.shape(), (1, 1), "curvature raw must be scalar");
        CurvatureParam { raw, trainable }
    }

    pub fn trainable(&self) -> bool {
        self.trainable
    }

    /// The unconstrained parameter (what the optimizer updates).
    pub fn raw(&self) -> &Tensor {
        &self.raw
    }

    /// kappa < 0 as a graph-connected 1x1 tensor.
    pub fn value_t(&self) -> Tensor {
        self.raw.softplus().neg()
    }

    /// |kappa| > 0 as a graph-connected 1x1 tensor.
    pub fn abs_t(&self) -> Tensor {
        self.raw.softplus()
    }

    /// Current kappa as a plain float (always negative).
    pub fn value(&self) -> f64 {
        crate::autodiff::no_grad(|| self.value_t().item())
    }

    /// True when two parameters denote the same curvature: shared storage
    /// or values equal to within 1e-12 relative.
    pub fn agrees_with(&self, other: &CurvatureParam) -> bool {
        if self.raw.same_storage(&other.raw) {
            return true;
        }
        let (a, b) = (self.value(), other.value());
        (a - b).abs() <= 1e-12 * a.abs().max(b.abs()).max(1.0)
    }
}

/// N points on a hyperboloid: column 0 is the time-like coordinate,
/// columns 1..=d the space-like coordinates.
#[derive(Clone, Debug)]
pub struct LorentzBatch {
    data: Tensor,
    curvature: CurvatureParam,
}

impl LorentzBatch {
    /// Wrap raw coordinates without checking the constraint. For points
    /// from arbitrary sources prefer [`project_to_manifold`].
    pub fn from_parts(data: Tensor, curvature: CurvatureParam) -> LorentzBatch {
        LorentzBatch { data, curvature }
    }

    pub fn data(&self) -> &Tensor {
        &self.data
    }

    pub fn curvature(&self) -> &CurvatureParam {
        &self.curvature
    }

    pub fn len(&self) -> usize {
        self.data.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Space-like dimensionality d (the batch is N x (d+1)).
    pub fn dim(&self) -> usize {
        self.data.cols() - 1
    }

    pub fn time(&self) -> Tensor {
        self.data.slice_cols(0, 1)
    }

    pub fn space(&self) -> Tensor {
        self.data.slice_cols(1, self.data.cols())
    }

    /// max over rows of |kappa <x,x>_L - 1|.
    pub fn constraint_residual(&self) -> f64 {
        let kappa = self.curvature.value();
        crate::autodiff::no_grad(|| {
            self.data.with_values(|v| {
                let mut worst = 0.0_f64;
                for row in v.rows() {
                    let t = row[0];
                    let s: f64 = row.iter().skip(1).map(|x| x * x).sum();
                    worst = worst.max((kappa * (-t * t + s) - 1.0).abs());
                }
                worst
            })
        })
    }

    /// Smallest time coordinate in the batch.
    pub fn min_time(&self) -> f64 {
        self.data
            .with_values(|v| v.column(0).iter().cloned().fold(f64::INFINITY, f64::min))
    }

    pub fn check_on_manifold(&self, tol: f64) -> Result<()> {
        let r = self.constraint_residual();
        if r > tol {
            return Err(Error::Domain {
                op: "check_on_manifold",
                detail: format!("constraint residual {r} exceeds {tol}"),
            });
        }
        if self.min_time() <= 0.0 {
            return Err(Error::Domain {
                op: "check_on_manifold",
                detail: "non-positive time coordinate".into(),
            });
        }
        Ok(())
    }
}

/// Tangent vectors, one per row, attached to base points.
#[derive(Clone, Debug)]
pub struct TangentBatch {
    data: Tensor,
    base: LorentzBatch,
}

impl TangentBatch {
    pub fn from_parts(data: Tensor, base: LorentzBatch) -> TangentBatch {
        TangentBatch { data, base }
    }

    pub fn data(&self) -> &Tensor {
        &self.data
    }

    pub fn base(&self) -> &LorentzBatch {
        &self.base
    }

    /// max over rows of |<u, x>_L| against the base (a 1-row base is shared).
    pub fn orthogonality_residual(&self) -> f64 {
        crate::autodiff::no_grad(|| {
            self.data.with_values(|u| {
                self.base.data().with_values(|x| {
                    let mut worst = 0.0_f64;
                    for (i, urow) in u.rows().into_iter().enumerate() {
                        let xrow = if x.nrows() == 1 { x.row(0) } else { x.row(i) };
                        let mut dot = -urow[0] * xrow[0];
                        for j in 1..urow.len() {
                            dot += urow[j] * xrow[j];
                        }
                        worst = worst.max(dot.abs());
                    }
                    worst
                })
            })
        })
    }
}

/// Rowwise Lorentzian inner product of two equal-shape coordinate tensors.
pub(crate) fn lorentz_inner_rowwise(a: &Tensor, b: &Tensor) -> Tensor {
    let cols = a.cols();
    let at = a.slice_cols(0, 1);
    let bt = b.slice_cols(0, 1);
    let asp = a.slice_cols(1, cols);
    let bsp = b.slice_cols(1, cols);
    asp.mul(&bsp).sum_axis1().sub(&at.mul(&bt))
}

/// Origin (sqrt(-1/kappa), 0, ..., 0) as a one-row batch.
pub fn origin(dim: usize, kappa: &CurvatureParam) -> Result<LorentzBatch> {
    if dim < 1 {
        return Err(Error::ShapeMismatch {
            op: "origin",
            detail: format!("dimension must be >= 1, got {dim}"),
        });
    }
    // sqrt(-1/kappa) = 1/sqrt(softplus(raw))
    let time = Tensor::ones(1, 1).div(&kappa.abs_t()).sqrt();
    let data = concat_cols(&time, &Tensor::zeros(1, dim));
    Ok(LorentzBatch::from_parts(data, kappa.clone()))
}

/// Rowwise <x_i, y_i>_L for two batches of equal shape.
pub fn lorentz_inner(x: &LorentzBatch, y: &LorentzBatch) -> Result<Tensor> {
    if x.data.shape() != y.data.shape() {
        return Err(Error::ShapeMismatch {
            op: "lorentz_inner",
            detail: format!("{:?} vs {:?}", x.data.shape(), y.data.shape()),
        });
    }
    Ok(lorentz_inner_rowwise(&x.data, &y.data))
}

fn check_same_curvature(x: &LorentzBatch, y: &LorentzBatch) -> Result<()> {
    if !x.curvature.agrees_with(&y.curvature) {
        return Err(Error::CurvatureMismatch {
            left: x.curvature.value(),
            right: y.curvature.value(),
        });
    }
    Ok(())
}

/// Shared exp-map kernel on raw coordinates. `base` may be a single row
/// (broadcast) or one row per tangent vector.
fn exp_map_impl(base: &Tensor, tangent: &Tensor, kappa: &CurvatureParam) -> Tensor {
    let n = tangent.rows();
    let base_full = if base.rows() == n {
        base.clone()
    } else {
        base.broadcast_to(n, base.cols())
    };
    let norm_sq = tangent.lorentz_norm_sq_rows().clamp_min(0.0);
    let sqrt_abs_k = kappa.abs_t().sqrt();
    let arg = norm_sq.sqrt().mul(&sqrt_abs_k);
    // sinh(a)/a with both sides clamped so a zero tangent returns the base
    // point exactly.
    let arg_safe = arg.clamp_min(ARCOSH_EPS);
    let factor = arg_safe.sinh().div(&arg_safe);
    base_full.mul(&arg.cosh()).add(&tangent.mul(&factor))
}

/// Exponential map: project tangent vectors onto the manifold.
pub fn exp_map(x: &LorentzBatch, u: &TangentBatch) -> Result<LorentzBatch> {
    if x.data.shape() != u.data.shape() && x.len() != 1 {
        return Err(Error::ShapeMismatch {
            op: "exp_map",
            detail: format!("{:?} vs {:?}", x.data.shape(), u.data.shape()),
        });
    }
    let min_norm_sq = crate::autodiff::no_grad(|| {
        lorentz_inner_rowwise(&u.data, &u.data)
            .with_values(|v| v.iter().cloned().fold(f64::INFINITY, f64::min))
    });
    if min_norm_sq < -1e-8 {
        return Err(Error::Domain {
            op: "exp_map",
            detail: format!("tangent with <u,u>_L = {min_norm_sq} is not space-like"),
        });
    }
    let data = exp_map_impl(&x.data, &u.data, &x.curvature);
    Ok(LorentzBatch::from_parts(data, x.curvature.clone()))
}

/// Logarithmic map: pull manifold points back to the tangent space at x.
///
/// The arcosh argument is clamped to >= 1 + 1e-12 before use since the
/// coefficient divides by sqrt(beta^2 - 1).
pub fn log_map(x: &LorentzBatch, y: &LorentzBatch) -> Result<TangentBatch> {
    check_same_curvature(x, y)?;
    if x.data.shape() != y.data.shape() {
        return Err(Error::ShapeMismatch {
            op: "log_map",
            detail: format!("{:?} vs {:?}", x.data.shape(), y.data.shape()),
        });
    }
    let inner = lorentz_inner_rowwise(&x.data, &y.data);
    let beta = inner.mul(&x.curvature.value_t()).clamp_min(1.0 + ARCOSH_EPS);
    let denom = beta.mul(&beta).add_scalar(-1.0).sqrt();
    let coef = beta.arcosh().div(&denom);
    let u = y.data.sub(&x.data.mul(&beta)).mul(&coef);
    Ok(TangentBatch::from_parts(u, x.clone()))
}

/// Geodesic distance d = arcosh(kappa <x,y>_L) / sqrt(|kappa|), rowwise.
///
/// The arcosh argument is floored at exactly 1 here (not 1 + 1e-12) so that
/// d(x, x) = 0 holds exactly; nothing divides by sqrt(beta^2 - 1) on this
/// path.
pub fn distance(x: &LorentzBatch, y: &LorentzBatch) -> Result<Tensor> {
    check_same_curvature(x, y)?;
    let inner = lorentz_inner(x, y)?;
    let d = inner
        .mul(&x.curvature.value_t())
        .arcosh()
        .div(&x.curvature.abs_t().sqrt());
    Ok(d)
}

/// Normalize each row of `u` onto the hyperboloid of `kappa`:
/// u_i / max(sqrt(|kappa|) * sqrt(|<u_i,u_i>_L|), 1e-8).
///
/// This is the midpoint renormalization; it lands on the manifold whenever
/// the row is time-like with a positive time coordinate.
pub(crate) fn normalize_rows_to_manifold(u: &Tensor, kappa: &CurvatureParam) -> Tensor {
    let q = u.lorentz_norm_sq_rows().abs().sqrt();
    let denom = q.mul(&kappa.abs_t().sqrt()).clamp_min(DENOM_EPS);
    u.div(&denom)
}

/// Weighted Lorentzian midpoint of all points in the batch (one output row).
pub fn lorentz_midpoint(points: &LorentzBatch, weights: &[f64]) -> Result<LorentzBatch> {
    if weights.len() != points.len() {
        return Err(Error::ShapeMismatch {
            op: "lorentz_midpoint",
            detail: format!("{} weights for {} points", weights.len(), points.len()),
        });
    }
    if weights.iter().any(|&w| w < 0.0) {
        return Err(Error::Domain {
            op: "lorentz_midpoint",
            detail: "negative weight".into(),
        });
    }
    if !weights.iter().any(|&w| w > 0.0) {
        return Err(Error::EmptyInput {
            op: "lorentz_midpoint",
            detail: "all weights are zero".into(),
        });
    }
    let w =
        Tensor::from_array(Array2::from_shape_vec((1, weights.len()), weights.to_vec()).unwrap());
    let s = w.matmul(&points.data);
    let data = normalize_rows_to_manifold(&s, &points.curvature);
    Ok(LorentzBatch::from_parts(data, points.curvature.clone()))
}

/// Batched midpoint: each row of `weights` (M x N, non-negative) produces
/// one output point from the N input points.
pub fn lorentz_midpoint_rows(points: &LorentzBatch, weights: &Tensor) -> Result<LorentzBatch> {
    if weights.cols() != points.len() {
        return Err(Error::ShapeMismatch {
            op: "lorentz_midpoint_rows",
            detail: format!(
                "weight matrix {:?} against {} points",
                weights.shape(),
                points.len()
            ),
        });
    }
    let s = weights.matmul(&points.data);
    let data = normalize_rows_to_manifold(&s, &points.curvature);
    Ok(LorentzBatch::from_parts(data, points.curvature.clone()))
}

/// Recompute the time coordinate for given space coordinates:
/// x_t = sqrt(||x_s||^2 - 1/kappa). Always well-defined for kappa < 0.
pub fn project_to_manifold(space: &Tensor, kappa: &CurvatureParam) -> LorentzBatch {
    let sum_sq = space.mul(space).sum_axis1();
    let inv_abs_k = Tensor::ones(1, 1).div(&kappa.abs_t());
    let time = sum_sq.add(&inv_abs_k).sqrt();
    LorentzBatch::from_parts(concat_cols(&time, space), kappa.clone())
}

/// Lift Euclidean feature rows onto the manifold: form the tangent (0, v)
/// at the origin and apply the exponential map.
pub fn lift_euclidean(features: &Tensor, kappa: &CurvatureParam) -> Result<LorentzBatch> {
    let finite = features.with_values(|v| v.iter().all(|x| x.is_finite()));
    if !finite {
        return Err(Error::Domain {
            op: "lift_euclidean",
            detail: "non-finite feature value".into(),
        });
    }
    let n = features.rows();
    let o = origin(features.cols(), kappa)?;
    let u = concat_cols(&Tensor::zeros(n, 1), features);
    let data = exp_map_impl(o.data(), &u, kappa);
    Ok(LorentzBatch::from_parts(data, kappa.clone()))
}

/// Random on-manifold batch: standard normal features scaled by `scale`,
/// lifted through the exponential map.
pub fn random_batch<R: Rng>(
    n: usize,
    dim: usize,
    kappa: &CurvatureParam,
    scale: f64,
    rng: &mut R,
) -> LorentzBatch {
    let feats = Array2::from_shape_fn((n, dim), |_| {
        let g: f64 = rng.sample(StandardNormal);
        g * scale
    });
    lift_euclidean(&Tensor::from_array(feats), kappa).expect("finite by construction")
}

/// Build a tangent batch at `x` from space components; the time component
/// is solved from the orthogonality condition <u, x>_L = 0.
pub fn tangent_at(x: &LorentzBatch, space: &Tensor) -> Result<TangentBatch> {
    if space.rows() != x.len() || space.cols() != x.dim() {
        return Err(Error::ShapeMismatch {
            op: "tangent_at",
            detail: format!("space {:?} for batch {:?}", space.shape(), x.data.shape()),
        });
    }
    // u_t = (u_s . x_s) / x_t
    let xs = x.space();
    let xt = x.time();
    let ut = space.mul(&xs).sum_axis1().div(&xt);
    Ok(TangentBatch::from_parts(concat_cols(&ut, space), x.clone()))
}
