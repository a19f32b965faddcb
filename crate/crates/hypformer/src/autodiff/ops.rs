//! Forward/backward definitions for every tensor primitive.
//!
//! Naming follows the math, not the call graph: `pairwise_lorentz_inner`,
//! `lorentz_neg_sq_distance` and `row_softmax` are fused primitives so the
//! quadratic attention path keeps only a handful of NxN buffers alive
//! instead of one per elementwise step.

use ndarray::{s, Array2, Axis};

use super::{finish_op, Tensor};

/// Clamp bound for cosh/sinh arguments; keeps exp() finite even in f32.
const HYPER_ARG_MAX: f64 = 80.0;

fn unary(
    op: &'static str,
    x: &Tensor,
    fwd: impl Fn(f64) -> f64,
    dfdx: impl Fn(f64) -> f64 + 'static,
) -> Tensor {
    let values = x.with_values(|v| v.mapv(&fwd));
    let xc = x.clone();
    finish_op(op, values, x.requires_grad(), move |out| {
        Box::new(move || {
            let Some(g) = out.take_grad() else { return };
            let gx = xc.with_values(|v| {
                let mut gx = g;
                gx.zip_mut_with(v, |gi, &xi| *gi *= dfdx(xi));
                gx
            });
            xc.accumulate_grad(gx);
        })
    })
}

/// Unary op whose derivative is a function of the *output* value.
fn unary_by_out(
    op: &'static str,
    x: &Tensor,
    fwd: impl Fn(f64) -> f64,
    dfdy: impl Fn(f64) -> f64 + 'static,
) -> Tensor {
    let values = x.with_values(|v| v.mapv(&fwd));
    let xc = x.clone();
    finish_op(op, values, x.requires_grad(), move |out| {
        Box::new(move || {
            let Some(g) = out.take_grad() else { return };
            let gx = out.with_values(|y| {
                let mut gx = g;
                gx.zip_mut_with(y, |gi, &yi| *gi *= dfdy(yi));
                gx
            });
            xc.accumulate_grad(gx);
        })
    })
}

/// Broadcast `t` (1x1, 1xC, Rx1, or already RxC) up to (rows, cols).
fn broadcast_values(v: &Array2<f64>, rows: usize, cols: usize) -> Array2<f64> {
    match v.dim() {
        (r, c) if r == rows && c == cols => v.clone(),
        (1, 1) => Array2::from_elem((rows, cols), v[(0, 0)]),
        (1, c) if c == cols => {
            let row = v.row(0);
            Array2::from_shape_fn((rows, cols), |(_, j)| row[j])
        }
        (r, 1) if r == rows => {
            let col = v.column(0);
            Array2::from_shape_fn((rows, cols), |(i, _)| col[i])
        }
        other => panic!("cannot broadcast {other:?} to ({rows}, {cols})"),
    }
}

/// Reduce a full (rows, cols) gradient back to the pre-broadcast shape.
fn reduce_to_shape(g: Array2<f64>, shape: (usize, usize)) -> Array2<f64> {
    let (r, c) = shape;
    match (g.nrows() == r, g.ncols() == c) {
        (true, true) => g,
        (false, true) => g.sum_axis(Axis(0)).insert_axis(Axis(0)),
        (true, false) => g.sum_axis(Axis(1)).insert_axis(Axis(1)),
        (false, false) => Array2::from_elem((1, 1), g.sum()),
    }
}

/// View `v` broadcast to (rows, cols) without copying; panics on an
/// incompatible shape (only 1x1, 1xC, Rx1 sources broadcast).
fn broadcast_view(v: &Array2<f64>, rows: usize, cols: usize) -> ndarray::ArrayView2<'_, f64> {
    let (r, c) = v.dim();
    assert!(
        (r == rows || r == 1) && (c == cols || c == 1),
        "cannot broadcast {:?} to ({rows}, {cols})",
        v.dim()
    );
    v.broadcast((rows, cols)).expect("broadcast-compatible")
}

fn binary(
    op: &'static str,
    a: &Tensor,
    b: &Tensor,
    fwd: impl Fn(&ndarray::ArrayView2<f64>, &ndarray::ArrayView2<f64>) -> Array2<f64>,
    bwd: impl Fn(
            &ndarray::ArrayView2<f64>,
            &ndarray::ArrayView2<f64>,
            &Array2<f64>,
        ) -> (Array2<f64>, Array2<f64>)
        + 'static,
) -> Tensor {
    let (ar, ac) = a.shape();
    let (br, bc) = b.shape();
    let rows = ar.max(br);
    let cols = ac.max(bc);
    let values = a.with_values(|av| {
        b.with_values(|bv| {
            fwd(
                &broadcast_view(av, rows, cols),
                &broadcast_view(bv, rows, cols),
            )
        })
    });
    let needs = a.requires_grad() || b.requires_grad();
    let (ac_t, bc_t) = (a.clone(), b.clone());
    finish_op(op, values, needs, move |out| {
        Box::new(move || {
            let Some(g) = out.take_grad() else { return };
            let (rows, cols) = g.dim();
            let (ga, gb) = ac_t.with_values(|av| {
                bc_t.with_values(|bv| {
                    bwd(
                        &broadcast_view(av, rows, cols),
                        &broadcast_view(bv, rows, cols),
                        &g,
                    )
                })
            });
            ac_t.accumulate_grad(reduce_to_shape(ga, ac_t.shape()));
            bc_t.accumulate_grad(reduce_to_shape(gb, bc_t.shape()));
        })
    })
}

impl Tensor {
    pub fn add(&self, other: &Tensor) -> Tensor {
        binary("add", self, other, |a, b| a + b, |_, _, g| (g.clone(), g.clone()))
    }

    pub fn sub(&self, other: &Tensor) -> Tensor {
        binary("sub", self, other, |a, b| a - b, |_, _, g| (g.clone(), -g))
    }

    pub fn mul(&self, other: &Tensor) -> Tensor {
        binary("mul", self, other, |a, b| a * b, |a, b, g| (g * b, g * a))
    }

    /// Elementwise division. Denominators that can vanish must be guarded
    /// at the call site (`add_scalar(eps)` or `clamp_min`).
    pub fn div(&self, other: &Tensor) -> Tensor {
        binary(
            "div",
            self,
            other,
            |a, b| a / b,
            |a, b, g| (g / b, -(g * a) / (b * b)),
        )
    }

    pub fn matmul(&self, other: &Tensor) -> Tensor {
        let (ar, ac) = self.shape();
        let (br, bc) = other.shape();
        assert_eq!(ac, br, "matmul shape mismatch: ({ar},{ac}) x ({br},{bc})");
        let values = self.with_values(|a| other.with_values(|b| a.dot(b)));
        let needs = self.requires_grad() || other.requires_grad();
        let (a_t, b_t) = (self.clone(), other.clone());
        finish_op("matmul", values, needs, move |out| {
            Box::new(move || {
                let Some(g) = out.take_grad() else { return };
                if a_t.requires_grad() {
                    let ga = b_t.with_values(|b| g.dot(&b.t()));
                    a_t.accumulate_grad(ga);
                }
                if b_t.requires_grad() {
                    let gb = a_t.with_values(|a| a.t().dot(&g));
                    b_t.accumulate_grad(gb);
                }
            })
        })
    }

    pub fn transpose(&self) -> Tensor {
        let values = self.with_values(|v| v.t().to_owned());
        let xc = self.clone();
        finish_op("transpose", values, self.requires_grad(), move |out| {
            Box::new(move || {
                let Some(g) = out.take_grad() else { return };
                xc.accumulate_grad(g.t().to_owned());
            })
        })
    }

    pub fn neg(&self) -> Tensor {
        unary("neg", self, |x| -x, |_| -1.0)
    }

    pub fn scale(&self, c: f64) -> Tensor {
        unary("scale", self, move |x| c * x, move |_| c)
    }

    pub fn add_scalar(&self, c: f64) -> Tensor {
        unary("add_scalar", self, move |x| x + c, |_| 1.0)
    }

    /// Elementwise x^p for non-negative x. The derivative is zeroed where
    /// p*x^(p-1) is not finite (x = 0 with p < 1).
    pub fn powf(&self, p: f64) -> Tensor {
        unary(
            "powf",
            self,
            move |x| x.powf(p),
            move |x| {
                let d = p * x.powf(p - 1.0);
                if d.is_finite() {
                    d
                } else {
                    0.0
                }
            },
        )
    }

    pub fn sqrt(&self) -> Tensor {
        unary_by_out("sqrt", self, |x| x.sqrt(), |y| 0.5 / y.max(1e-12))
    }

    pub fn exp(&self) -> Tensor {
        unary_by_out("exp", self, |x| x.exp(), |y| y)
    }

    /// Natural log; the argument is floored at 1e-300 to keep the forward
    /// value finite.
    pub fn ln(&self) -> Tensor {
        unary("ln", self, |x| x.max(1e-300).ln(), |x| 1.0 / x.max(1e-300))
    }

    pub fn relu(&self) -> Tensor {
        // relu'(0) := 0, fixed for determinism.
        unary(
            "relu",
            self,
            |x| x.max(0.0),
            |x| if x > 0.0 { 1.0 } else { 0.0 },
        )
    }

    pub fn sigmoid(&self) -> Tensor {
        unary_by_out("sigmoid", self, sigmoid_f, |y| y * (1.0 - y))
    }

    pub fn softplus(&self) -> Tensor {
        unary("softplus", self, softplus_f, sigmoid_f)
    }

    pub fn cosh(&self) -> Tensor {
        unary(
            "cosh",
            self,
            |x| x.clamp(-HYPER_ARG_MAX, HYPER_ARG_MAX).cosh(),
            |x| {
                if x.abs() <= HYPER_ARG_MAX {
                    x.sinh()
                } else {
                    0.0
                }
            },
        )
    }

    pub fn sinh(&self) -> Tensor {
        unary(
            "sinh",
            self,
            |x| x.clamp(-HYPER_ARG_MAX, HYPER_ARG_MAX).sinh(),
            |x| {
                if x.abs() <= HYPER_ARG_MAX {
                    x.cosh()
                } else {
                    0.0
                }
            },
        )
    }

    /// arcosh with the argument floored at 1 so coincident points give
    /// exactly zero. The gradient is zero in the clamped region and capped
    /// near the boundary.
    pub fn arcosh(&self) -> Tensor {
        unary(
            "arcosh",
            self,
            |x| x.max(1.0).acosh(),
            |x| {
                if x <= 1.0 {
                    0.0
                } else {
                    1.0 / (x * x - 1.0).max(1e-24).sqrt()
                }
            },
        )
    }

    pub fn abs(&self) -> Tensor {
        unary(
            "abs",
            self,
            |x| x.abs(),
            |x| {
                if x > 0.0 {
                    1.0
                } else if x < 0.0 {
                    -1.0
                } else {
                    0.0
                }
            },
        )
    }

    pub fn clamp(&self, lo: f64, hi: f64) -> Tensor {
        unary(
            "clamp",
            self,
            move |x| x.clamp(lo, hi),
            move |x| if x >= lo && x <= hi { 1.0 } else { 0.0 },
        )
    }

    pub fn clamp_min(&self, lo: f64) -> Tensor {
        unary(
            "clamp_min",
            self,
            move |x| x.max(lo),
            move |x| if x >= lo { 1.0 } else { 0.0 },
        )
    }

    pub fn sum(&self) -> Tensor {
        let values = self.with_values(|v| Array2::from_elem((1, 1), v.sum()));
        let xc = self.clone();
        finish_op("sum", values, self.requires_grad(), move |out| {
            Box::new(move || {
                let Some(g) = out.take_grad() else { return };
                let shape = xc.shape();
                xc.accumulate_grad(Array2::from_elem(shape, g[(0, 0)]));
            })
        })
    }

    pub fn mean(&self) -> Tensor {
        let n = self.rows() * self.cols();
        self.sum().scale(1.0 / n as f64)
    }

    /// Column sums: (N, d) -> (1, d).
    pub fn sum_axis0(&self) -> Tensor {
        let values = self.with_values(|v| v.sum_axis(Axis(0)).insert_axis(Axis(0)));
        let xc = self.clone();
        finish_op("sum_axis0", values, self.requires_grad(), move |out| {
            Box::new(move || {
                let Some(g) = out.take_grad() else { return };
                let (rows, cols) = xc.shape();
                xc.accumulate_grad(broadcast_values(&g, rows, cols));
            })
        })
    }

    /// Row sums: (N, d) -> (N, 1).
    pub fn sum_axis1(&self) -> Tensor {
        let values = self.with_values(|v| v.sum_axis(Axis(1)).insert_axis(Axis(1)));
        let xc = self.clone();
        finish_op("sum_axis1", values, self.requires_grad(), move |out| {
            Box::new(move || {
                let Some(g) = out.take_grad() else { return };
                let (rows, cols) = xc.shape();
                xc.accumulate_grad(broadcast_values(&g, rows, cols));
            })
        })
    }

    /// Euclidean norm of each row: (N, d) -> (N, 1).
    pub fn rowwise_norm(&self) -> Tensor {
        let values = self.with_values(|v| {
            let mut out = Array2::zeros((v.nrows(), 1));
            for (i, row) in v.rows().into_iter().enumerate() {
                out[(i, 0)] = row.dot(&row).sqrt();
            }
            out
        });
        let xc = self.clone();
        finish_op("rowwise_norm", values, self.requires_grad(), move |out| {
            Box::new(move || {
                let Some(g) = out.take_grad() else { return };
                let gx = xc.with_values(|v| {
                    out.with_values(|norms| {
                        let mut gx = v.clone();
                        for (i, mut row) in gx.rows_mut().into_iter().enumerate() {
                            let scale = g[(i, 0)] / norms[(i, 0)].max(1e-12);
                            row.mapv_inplace(|x| x * scale);
                        }
                        gx
                    })
                });
                xc.accumulate_grad(gx);
            })
        })
    }

    pub fn broadcast_to(&self, rows: usize, cols: usize) -> Tensor {
        let values = self.with_values(|v| broadcast_values(v, rows, cols));
        let xc = self.clone();
        finish_op("broadcast", values, self.requires_grad(), move |out| {
            Box::new(move || {
                let Some(g) = out.take_grad() else { return };
                xc.accumulate_grad(reduce_to_shape(g, xc.shape()));
            })
        })
    }

    /// Columns `[start, end)` of the tensor.
    pub fn slice_cols(&self, start: usize, end: usize) -> Tensor {
        assert!(start < end && end <= self.cols(), "slice_cols out of range");
        let values = self.with_values(|v| v.slice(s![.., start..end]).to_owned());
        let xc = self.clone();
        finish_op("slice_cols", values, self.requires_grad(), move |out| {
            Box::new(move || {
                let Some(g) = out.take_grad() else { return };
                let (rows, cols) = xc.shape();
                let mut gx = Array2::zeros((rows, cols));
                gx.slice_mut(s![.., start..end]).assign(&g);
                xc.accumulate_grad(gx);
            })
        })
    }

    /// Gather rows by index (duplicates allowed); backward scatter-adds.
    pub fn select_rows(&self, indices: &[usize]) -> Tensor {
        let rows = self.rows();
        for &i in indices {
            assert!(i < rows, "select_rows index {i} out of range {rows}");
        }
        let idx = indices.to_vec();
        let values = self.with_values(|v| {
            let mut out = Array2::zeros((idx.len(), v.ncols()));
            for (k, &i) in idx.iter().enumerate() {
                out.row_mut(k).assign(&v.row(i));
            }
            out
        });
        let xc = self.clone();
        finish_op("select_rows", values, self.requires_grad(), move |out| {
            Box::new(move || {
                let Some(g) = out.take_grad() else { return };
                let (rows, cols) = xc.shape();
                let mut gx = Array2::zeros((rows, cols));
                for (k, &i) in idx.iter().enumerate() {
                    let mut row = gx.row_mut(i);
                    row += &g.row(k);
                }
                xc.accumulate_grad(gx);
            })
        })
    }

    /// Pick one entry per row: out[i, 0] = self[i, indices[i]].
    pub fn select_per_row(&self, indices: &[usize]) -> Tensor {
        assert_eq!(indices.len(), self.rows(), "select_per_row length mismatch");
        let cols = self.cols();
        for &j in indices {
            assert!(j < cols, "select_per_row column {j} out of range {cols}");
        }
        let idx = indices.to_vec();
        let values = self.with_values(|v| {
            let mut out = Array2::zeros((idx.len(), 1));
            for (i, &j) in idx.iter().enumerate() {
                out[(i, 0)] = v[(i, j)];
            }
            out
        });
        let xc = self.clone();
        finish_op("select_per_row", values, self.requires_grad(), move |out| {
            Box::new(move || {
                let Some(g) = out.take_grad() else { return };
                let (rows, cols) = xc.shape();
                let mut gx = Array2::zeros((rows, cols));
                for (i, &j) in idx.iter().enumerate() {
                    gx[(i, j)] = g[(i, 0)];
                }
                xc.accumulate_grad(gx);
            })
        })
    }

    /// Sum of squares of each row (fused): (N, d) -> (N, 1).
    pub fn rowwise_sum_sq(&self) -> Tensor {
        let values = self.with_values(|v| {
            let mut out = Array2::zeros((v.nrows(), 1));
            for (i, row) in v.rows().into_iter().enumerate() {
                out[(i, 0)] = row.dot(&row);
            }
            out
        });
        let xc = self.clone();
        finish_op("rowwise_sum_sq", values, self.requires_grad(), move |out| {
            Box::new(move || {
                let Some(g) = out.take_grad() else { return };
                let gx = xc.with_values(|v| {
                    let mut gx = v.clone();
                    for (i, mut row) in gx.rows_mut().into_iter().enumerate() {
                        let s = 2.0 * g[(i, 0)];
                        row.mapv_inplace(|x| x * s);
                    }
                    gx
                });
                xc.accumulate_grad(gx);
            })
        })
    }

    /// Squared Lorentzian norm of each row (fused):
    /// out_i = -x_i0^2 + sum_{j>=1} x_ij^2, on (N, d+1) coordinates.
    pub fn lorentz_norm_sq_rows(&self) -> Tensor {
        assert!(self.cols() >= 2, "need a time column and space columns");
        let values = self.with_values(|v| {
            let mut out = Array2::zeros((v.nrows(), 1));
            for (i, row) in v.rows().into_iter().enumerate() {
                let mut acc = -row[0] * row[0];
                for &x in row.iter().skip(1) {
                    acc += x * x;
                }
                out[(i, 0)] = acc;
            }
            out
        });
        let xc = self.clone();
        finish_op(
            "lorentz_norm_sq_rows",
            values,
            self.requires_grad(),
            move |out| {
                Box::new(move || {
                    let Some(g) = out.take_grad() else { return };
                    let gx = xc.with_values(|v| {
                        let mut gx = v.clone();
                        for (i, mut row) in gx.rows_mut().into_iter().enumerate() {
                            let s = 2.0 * g[(i, 0)];
                            row[0] *= -s;
                            for x in row.iter_mut().skip(1) {
                                *x *= s;
                            }
                        }
                        gx
                    });
                    xc.accumulate_grad(gx);
                })
            },
        )
    }

    /// Fused focus map: out = (||s|| / max(||s^p||, 1e-30)) * s^p rowwise,
    /// with s = relu(e) / t. `t` is a positive 1x1 tensor and receives a
    /// gradient; `p` is the constant sharpening power. A single pass each
    /// way instead of the eight-op elementwise chain.
    pub fn focus_rows(&self, t: &Tensor, p: f64) -> Tensor {
        assert_eq!(t.shape(), (1, 1), "focus scale t must be scalar");
        let tv = t.item();
        assert!(tv > 0.0, "focus scale must be positive, got {tv}");
        let values = self.with_values(|e| {
            let mut out = Array2::zeros(e.dim());
            for (erow, mut orow) in e.rows().into_iter().zip(out.rows_mut()) {
                let mut r2 = 0.0;
                let mut q2 = 0.0;
                for (j, &x) in erow.iter().enumerate() {
                    let s = x.max(0.0) / tv;
                    let y = s.powf(p);
                    r2 += s * s;
                    q2 += y * y;
                    orow[j] = y;
                }
                let scale = r2.sqrt() / q2.sqrt().max(1e-30);
                orow.mapv_inplace(|y| y * scale);
            }
            out
        });
        let needs = self.requires_grad() || t.requires_grad();
        let (e_t, t_t) = (self.clone(), t.clone());
        finish_op("focus_rows", values, needs, move |out| {
            Box::new(move || {
                let Some(g) = out.take_grad() else { return };
                let tv = t_t.item();
                let mut gt = 0.0;
                let ge = e_t.with_values(|e| {
                    let mut ge = Array2::zeros(e.dim());
                    for ((erow, grow), mut gerow) in
                        e.rows().into_iter().zip(g.rows()).zip(ge.rows_mut())
                    {
                        // Recompute s, y, and the row norms.
                        let d = erow.len();
                        let mut s = vec![0.0f64; d];
                        let mut y = vec![0.0f64; d];
                        let mut r2 = 0.0;
                        let mut q2 = 0.0;
                        for j in 0..d {
                            s[j] = erow[j].max(0.0) / tv;
                            y[j] = s[j].powf(p);
                            r2 += s[j] * s[j];
                            q2 += y[j] * y[j];
                        }
                        let r = r2.sqrt();
                        if r == 0.0 {
                            continue; // zero row: output constant 0
                        }
                        let qq = q2.sqrt();
                        let q = qq.max(1e-30);
                        let clamped = qq < 1e-30;
                        // D = sum_k G_k y_k
                        let mut dd = 0.0;
                        for j in 0..d {
                            dd += grow[j] * y[j];
                        }
                        for j in 0..d {
                            // dL/dy_j = (r/q) G_j - D r y_j / q^3 (unless clamped)
                            let mut gy = (r / q) * grow[j];
                            if !clamped {
                                gy -= dd * r * y[j] / (q * q * q);
                            }
                            // dL/ds_j = gy * p s^(p-1) + (D/q) * s_j / r
                            let dpow = p * s[j].powf(p - 1.0);
                            let mut gs = (dd / q) * s[j] / r;
                            if dpow.is_finite() {
                                gs += gy * dpow;
                            }
                            // chain into e (relu'(0) := 0) and t
                            if erow[j] > 0.0 {
                                gerow[j] = gs / tv;
                            }
                            gt -= gs * s[j] / tv;
                        }
                    }
                    ge
                });
                e_t.accumulate_grad(ge);
                t_t.accumulate_grad(Array2::from_elem((1, 1), gt));
            })
        })
    }

    /// Rowwise maximum as a constant (N, 1) tensor. Gradients do not flow
    /// through it; its only purpose is exponent stabilisation, where the
    /// softmax output is invariant to the subtracted shift.
    pub fn rowwise_max_detached(&self) -> Tensor {
        let values = self.with_values(|v| {
            let mut out = Array2::zeros((v.nrows(), 1));
            for (i, row) in v.rows().into_iter().enumerate() {
                out[(i, 0)] = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            }
            out
        });
        Tensor::from_array(values)
    }

    /// Numerically stable softmax over each row (fused).
    pub fn row_softmax(&self) -> Tensor {
        let values = self.with_values(|v| {
            let mut out = v.clone();
            for mut row in out.rows_mut() {
                let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                row.mapv_inplace(|x| (x - m).exp());
                let s = row.sum();
                row.mapv_inplace(|x| x / s);
            }
            out
        });
        let xc = self.clone();
        finish_op("row_softmax", values, self.requires_grad(), move |out| {
            Box::new(move || {
                let Some(g) = out.take_grad() else { return };
                // dx = y * (g - rowsum(g * y)), worked row by row so no
                // second NxN temporary is ever live.
                let gx = out.with_values(|y| {
                    let mut gx = g;
                    for (mut grow, yrow) in gx.rows_mut().into_iter().zip(y.rows()) {
                        let dot: f64 = grow.iter().zip(yrow.iter()).map(|(a, b)| a * b).sum();
                        grow.zip_mut_with(&yrow, |gi, &yi| *gi = yi * (*gi - dot));
                    }
                    gx
                });
                xc.accumulate_grad(gx);
            })
        })
    }

    /// Pairwise Lorentzian inner products (fused): out[i, j] = <q_i, k_j>_L
    /// with signature (-, +, ..., +) on the leading column.
    pub fn pairwise_lorentz_inner(&self, keys: &Tensor) -> Tensor {
        assert_eq!(
            self.cols(),
            keys.cols(),
            "pairwise_lorentz_inner dimension mismatch"
        );
        let values = self.with_values(|q| {
            keys.with_values(|k| {
                let mut qm = q.clone();
                qm.column_mut(0).mapv_inplace(|x| -x);
                qm.dot(&k.t())
            })
        });
        let needs = self.requires_grad() || keys.requires_grad();
        let (q_t, k_t) = (self.clone(), keys.clone());
        finish_op("pairwise_lorentz_inner", values, needs, move |out| {
            Box::new(move || {
                let Some(g) = out.take_grad() else { return };
                if q_t.requires_grad() {
                    let mut gq = k_t.with_values(|k| g.dot(k));
                    gq.column_mut(0).mapv_inplace(|x| -x);
                    q_t.accumulate_grad(gq);
                }
                if k_t.requires_grad() {
                    let mut gk = q_t.with_values(|q| g.t().dot(q));
                    gk.column_mut(0).mapv_inplace(|x| -x);
                    k_t.accumulate_grad(gk);
                }
            })
        })
    }

    /// Fused similarity exponent for quadratic hyperbolic attention:
    /// out = -d^2 / sqrt(dp) with d = arcosh(kappa * inner) / sqrt(|kappa|),
    /// i.e. out = arcosh^2(max(kappa * inner, 1)) / (kappa * sqrt(dp)).
    ///
    /// `kappa` is a 1x1 tensor holding a negative curvature; it receives a
    /// gradient like any other input.
    pub fn lorentz_neg_sq_distance(&self, kappa: &Tensor, dp: usize) -> Tensor {
        assert_eq!(kappa.shape(), (1, 1), "kappa must be scalar");
        let sd = (dp as f64).sqrt();
        let kv = kappa.item();
        assert!(kv < 0.0, "lorentz_neg_sq_distance needs kappa < 0, got {kv}");
        let values = self.with_values(|inner| {
            inner.mapv(|x| {
                let beta = (kv * x).max(1.0);
                let a = beta.acosh();
                a * a / (kv * sd)
            })
        });
        let needs = self.requires_grad() || kappa.requires_grad();
        let (x_t, k_t) = (self.clone(), kappa.clone());
        finish_op("lorentz_neg_sq_distance", values, needs, move |out| {
            Box::new(move || {
                let Some(g) = out.take_grad() else { return };
                // A(beta) = arcosh^2(max(beta, 1)); A'(beta) -> 2 as beta -> 1+.
                let dsq_dbeta = |beta: f64| -> f64 {
                    if beta <= 1.0 {
                        0.0
                    } else if beta - 1.0 < 1e-10 {
                        2.0
                    } else {
                        2.0 * beta.acosh() / (beta * beta - 1.0).sqrt()
                    }
                };
                let kv = k_t.item();
                if x_t.requires_grad() {
                    let gx = x_t.with_values(|inner| {
                        let mut gx = g.clone();
                        gx.zip_mut_with(inner, |gi, &x| {
                            // d out / d inner = A'(kappa x) / sqrt(dp)
                            *gi *= dsq_dbeta(kv * x) / sd;
                        });
                        gx
                    });
                    x_t.accumulate_grad(gx);
                }
                if k_t.requires_grad() {
                    let gk = x_t.with_values(|inner| {
                        let mut acc = 0.0;
                        for (&x, &gi) in inner.iter().zip(g.iter()) {
                            let beta = kv * x;
                            let a2 = beta.max(1.0).acosh().powi(2);
                            // d out / d kappa = (A'(beta) x kappa - A) / (kappa^2 sqrt(dp))
                            acc += gi * (dsq_dbeta(beta) * x * kv - a2) / (kv * kv * sd);
                        }
                        Array2::from_elem((1, 1), acc)
                    });
                    k_t.accumulate_grad(gk);
                }
            })
        })
    }
}

/// Horizontal concatenation: (N, c1) ++ (N, c2) -> (N, c1 + c2).
pub fn concat_cols(a: &Tensor, b: &Tensor) -> Tensor {
    assert_eq!(a.rows(), b.rows(), "concat_cols row mismatch");
    let c1 = a.cols();
    let values = a.with_values(|av| {
        b.with_values(|bv| {
            ndarray::concatenate(Axis(1), &[av.view(), bv.view()])
                .expect("concat_cols shapes already checked")
        })
    });
    let needs = a.requires_grad() || b.requires_grad();
    let (a_t, b_t) = (a.clone(), b.clone());
    finish_op("concat_cols", values, needs, move |out| {
        Box::new(move || {
            let Some(g) = out.take_grad() else { return };
            let cols = g.ncols();
            a_t.accumulate_grad(g.slice(s![.., 0..c1]).to_owned());
            b_t.accumulate_grad(g.slice(s![.., c1..cols]).to_owned());
        })
    })
}

fn sigmoid_f(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus_f(x: f64) -> f64 {
    // ln(1 + e^x) without overflow for large |x|.
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Inverse of softplus: softplus(softplus_inv(y)) == y for y > 0.
pub fn softplus_inv(y: f64) -> f64 {
    assert!(y > 0.0, "softplus_inv needs a positive argument, got {y}");
    // ln(e^y - 1) = y + ln(1 - e^-y)
    y + (-(-y).exp()).ln_1p()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::backward;
    use approx::assert_relative_eq;
    use ndarray::array;

    #[test]
    fn broadcast_add_row_vector() {
        let x = Tensor::param(array![[1.0, 2.0], [3.0, 4.0]]);
        let b = Tensor::param(array![[10.0, 20.0]]);
        let y = x.add(&b);
        assert_eq!(y.value(), array![[11.0, 22.0], [13.0, 24.0]]);
        backward(&y.sum()).unwrap();
        assert_eq!(b.grad().unwrap(), array![[2.0, 2.0]]);
        assert_eq!(x.grad().unwrap(), array![[1.0, 1.0], [1.0, 1.0]]);
    }

    #[test]
    fn broadcast_div_column_vector() {
        let x = Tensor::param(array![[2.0, 4.0], [9.0, 3.0]]);
        let d = Tensor::param(array![[2.0], [3.0]]);
        let y = x.div(&d);
        assert_eq!(y.value(), array![[1.0, 2.0], [3.0, 1.0]]);
        backward(&y.sum()).unwrap();
        // d(x/c)/dc = -x/c^2, summed over the row
        let gd = d.grad().unwrap();
        assert_relative_eq!(gd[(0, 0)], -(2.0 + 4.0) / 4.0);
        assert_relative_eq!(gd[(1, 0)], -(9.0 + 3.0) / 9.0);
    }

    #[test]
    fn slice_and_concat_are_inverse() {
        let x = Tensor::param(array![[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]]);
        let a = x.slice_cols(0, 1);
        let b = x.slice_cols(1, 3);
        let y = concat_cols(&a, &b);
        assert_eq!(y.value(), x.value());
        backward(&y.mul(&y).sum()).unwrap();
        assert_eq!(x.grad().unwrap(), 2.0 * x.value());
    }

    #[test]
    fn row_softmax_is_row_stochastic_and_stable() {
        let x = Tensor::from_array(array![[1000.0, 1000.0, 999.0], [-3.0, 0.0, 3.0]]);
        let y = x.row_softmax();
        let v = y.value();
        for row in v.rows() {
            assert_relative_eq!(row.sum(), 1.0, epsilon = 1e-12);
            assert!(row.iter().all(|&p| p.is_finite() && p >= 0.0));
        }
    }

    #[test]
    fn pairwise_inner_matches_manual() {
        let q = Tensor::from_array(array![[1.0, 0.0], [2.0_f64.sqrt(), 1.0]]);
        let k = Tensor::from_array(array![[1.0, 0.0], [2.0_f64.sqrt(), -1.0]]);
        let out = q.pairwise_lorentz_inner(&k).value();
        assert_relative_eq!(out[(0, 0)], -1.0, epsilon = 1e-12);
        assert_relative_eq!(out[(1, 1)], -3.0, epsilon = 1e-12);
        assert_relative_eq!(out[(0, 1)], -(2.0_f64.sqrt()), epsilon = 1e-12);
    }

    #[test]
    fn softplus_inv_roundtrip() {
        for y in [0.1, 0.5, 1.0, 2.0, 17.0] {
            assert_relative_eq!(softplus_f(softplus_inv(y)), y, epsilon = 1e-12);
        }
    }

    #[test]
    fn select_per_row_scatters_gradient() {
        let x = Tensor::param(array![[1.0, 2.0], [3.0, 4.0]]);
        let y = x.select_per_row(&[1, 0]);
        assert_eq!(y.value(), array![[2.0], [3.0]]);
        backward(&y.sum()).unwrap();
        assert_eq!(x.grad().unwrap(), array![[0.0, 1.0], [1.0, 0.0]]);
    }

    #[test]
    fn rowwise_max_is_detached() {
        let x = Tensor::param(array![[1.0, 5.0], [2.0, 0.0]]);
        let m = x.rowwise_max_detached();
        assert_eq!(m.value(), array![[5.0], [2.0]]);
        assert!(!m.requires_grad());
    }
}
