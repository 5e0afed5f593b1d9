//! Differentiable operations on [`Graph`] nodes.
//!
//! Convolutions run as im2col + GEMM so the training loop stays usable on a
//! single CPU core. Feature maps are `[C, H, W]`, head activations `[N, K]`,
//! reductions produce 0-dim scalars.

use ndarray::{Array1, Array2, Array3, Array4, ArrayD, ArrayView3, Axis, Ix2, Ix3, Ix4};

use super::graph::{Graph, Var};

fn conv_out_dim(input: usize, k: usize, stride: usize, pad: usize) -> usize {
    (input + 2 * pad - k) / stride + 1
}

/// Reshape through a logical-order copy. `dot` can return arrays with
/// degenerate strides (k=1 or n=1 special cases) that reject the zero-copy
/// reshape.
fn copy_reshape<S, D>(a: &ndarray::ArrayBase<S, D>, shape: &[usize]) -> ArrayD<f64>
where
    S: ndarray::Data<Elem = f64>,
    D: ndarray::Dimension,
{
    ArrayD::from_shape_vec(ndarray::IxDyn(shape), a.iter().copied().collect())
        .expect("copy_reshape element count")
}

fn im2col(
    x: &ArrayView3<f64>,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    hout: usize,
    wout: usize,
) -> Array2<f64> {
    let (cin, h, w) = x.dim();
    let mut cols = Array2::<f64>::zeros((cin * kh * kw, hout * wout));
    for c in 0..cin {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (c * kh + ki) * kw + kj;
                let mut dst = cols.row_mut(row);
                let mut idx = 0;
                for oi in 0..hout {
                    let ii = (oi * stride + ki) as isize - pad as isize;
                    if ii < 0 || ii as usize >= h {
                        idx += wout;
                        continue;
                    }
                    let src_row = x.index_axis(Axis(0), c);
                    let src_row = src_row.index_axis(Axis(0), ii as usize);
                    for oj in 0..wout {
                        let jj = (oj * stride + kj) as isize - pad as isize;
                        if jj >= 0 && (jj as usize) < w {
                            dst[idx] = src_row[jj as usize];
                        }
                        idx += 1;
                    }
                }
            }
        }
    }
    cols
}

fn col2im(
    dcols: &Array2<f64>,
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    hout: usize,
    wout: usize,
) -> Array3<f64> {
    let mut dx = Array3::<f64>::zeros((cin, h, w));
    for c in 0..cin {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (c * kh + ki) * kw + kj;
                let src = dcols.row(row);
                let mut idx = 0;
                for oi in 0..hout {
                    let ii = (oi * stride + ki) as isize - pad as isize;
                    if ii < 0 || ii as usize >= h {
                        idx += wout;
                        continue;
                    }
                    for oj in 0..wout {
                        let jj = (oj * stride + kj) as isize - pad as isize;
                        if jj >= 0 && (jj as usize) < w {
                            dx[[c, ii as usize, jj as usize]] += src[idx];
                        }
                        idx += 1;
                    }
                }
            }
        }
    }
    dx
}

impl Graph {
    /// 2-D convolution: x `[Cin,H,W]`, w `[Cout,Cin,kh,kw]`, b `[Cout]`.
    pub fn conv2d(&self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Var {
        let (out, cols, xdim, wdim) = self.with_value(x, |xv| {
            self.with_value(w, |wv| {
                self.with_value(b, |bv| {
                    let x3 = xv.view().into_dimensionality::<Ix3>().expect("conv2d x");
                    let w4 = wv.view().into_dimensionality::<Ix4>().expect("conv2d w");
                    let (cout, cin, kh, kw) = w4.dim();
                    let (xc, h, wth) = x3.dim();
                    assert_eq!(xc, cin, "conv2d channel mismatch");
                    let hout = conv_out_dim(h, kh, stride, pad);
                    let wout = conv_out_dim(wth, kw, stride, pad);
                    let cols = im2col(&x3, kh, kw, stride, pad, hout, wout);
                    let w_mat = w4
                        .to_shape((cout, cin * kh * kw))
                        .expect("conv2d reshape w")
                        .to_owned();
                    let mut out_mat = w_mat.dot(&cols);
                    for (mut row, &bias) in out_mat.rows_mut().into_iter().zip(bv.iter()) {
                        row += bias;
                    }
                    let out = copy_reshape(&out_mat, &[cout, hout, wout])
                        .into_dimensionality::<Ix3>()
                        .unwrap();
                    (out, cols, (cin, h, wth), (cout, cin, kh, kw))
                })
            })
        });

        let backward = if self.grad_enabled() {
            let w_val = self.value(w);
            let (cin, h, wth) = xdim;
            let (cout, _, kh, kw) = wdim;
            let hout = out.dim().1;
            let wout = out.dim().2;
            Some(Box::new(move |gout: &ArrayD<f64>| {
                let g3 = gout.view().into_dimensionality::<Ix3>().expect("conv2d g");
                let g_mat = g3
                    .to_shape((cout, hout * wout))
                    .expect("conv2d g reshape")
                    .to_owned();
                let w4 = w_val.view().into_dimensionality::<Ix4>().unwrap();
                let w_mat = w4
                    .to_shape((cout, cin * kh * kw))
                    .unwrap()
                    .to_owned();
                let dw = copy_reshape(&g_mat.dot(&cols.t()), &[cout, cin, kh, kw]);
                let db = g_mat.sum_axis(Axis(1));
                let dcols = w_mat.t().dot(&g_mat);
                let dx = col2im(&dcols, cin, h, wth, kh, kw, stride, pad, hout, wout);
                vec![dx.into_dyn(), dw, db.into_dyn()]
            }) as super::graph::BackwardFn)
        } else {
            None
        };
        self.push(out.into_dyn(), vec![x, w, b], backward)
    }

    /// Fully connected layer: x `[N,K]`, w `[K,M]`, b `[M]`.
    pub fn linear(&self, x: Var, w: Var, b: Var) -> Var {
        let out = self.with_value(x, |xv| {
            self.with_value(w, |wv| {
                self.with_value(b, |bv| {
                    let x2 = xv.view().into_dimensionality::<Ix2>().expect("linear x");
                    let w2 = wv.view().into_dimensionality::<Ix2>().expect("linear w");
                    assert_eq!(x2.ncols(), w2.nrows(), "linear shape mismatch");
                    let mut out = x2.dot(&w2);
                    let b1 = bv.view().into_dimensionality::<ndarray::Ix1>().unwrap();
                    for mut row in out.rows_mut() {
                        row += &b1;
                    }
                    out
                })
            })
        });

        let backward = if self.grad_enabled() {
            let x_val = self.value(x);
            let w_val = self.value(w);
            Some(Box::new(move |gout: &ArrayD<f64>| {
                let g2 = gout.view().into_dimensionality::<Ix2>().unwrap();
                let x2 = x_val.view().into_dimensionality::<Ix2>().unwrap();
                let w2 = w_val.view().into_dimensionality::<Ix2>().unwrap();
                let dx = g2.dot(&w2.t());
                let dw = x2.t().dot(&g2);
                let db = g2.sum_axis(Axis(0));
                vec![dx.into_dyn(), dw.into_dyn(), db.into_dyn()]
            }) as super::graph::BackwardFn)
        } else {
            None
        };
        self.push(out.into_dyn(), vec![x, w, b], backward)
    }

    pub fn relu(&self, x: Var) -> Var {
        let out = self.with_value(x, |xv| xv.mapv(|v| v.max(0.0)));
        let backward = if self.grad_enabled() {
            let x_val = self.value(x);
            Some(Box::new(move |gout: &ArrayD<f64>| {
                let mut dx = gout.clone();
                dx.zip_mut_with(&x_val, |g, &v| {
                    if v <= 0.0 {
                        *g = 0.0;
                    }
                });
                vec![dx]
            }) as super::graph::BackwardFn)
        } else {
            None
        };
        self.push(out, vec![x], backward)
    }

    /// Nearest-neighbour resize of `[C,H,W]` to `[C,h2,w2]`.
    pub fn resize_nearest(&self, x: Var, h2: usize, w2: usize) -> Var {
        let (out, hin, win) = self.with_value(x, |xv| {
            let x3 = xv.view().into_dimensionality::<Ix3>().expect("resize x");
            let (c, h, w) = x3.dim();
            let mut out = Array3::<f64>::zeros((c, h2, w2));
            for ci in 0..c {
                for i in 0..h2 {
                    let si = i * h / h2;
                    for j in 0..w2 {
                        let sj = j * w / w2;
                        out[[ci, i, j]] = x3[[ci, si, sj]];
                    }
                }
            }
            (out, h, w)
        });

        let backward = if self.grad_enabled() {
            let c = out.dim().0;
            Some(Box::new(move |gout: &ArrayD<f64>| {
                let g3 = gout.view().into_dimensionality::<Ix3>().unwrap();
                let mut dx = Array3::<f64>::zeros((c, hin, win));
                for ci in 0..c {
                    for i in 0..h2 {
                        let si = i * hin / h2;
                        for j in 0..w2 {
                            let sj = j * win / w2;
                            dx[[ci, si, sj]] += g3[[ci, i, j]];
                        }
                    }
                }
                vec![dx.into_dyn()]
            }) as super::graph::BackwardFn)
        } else {
            None
        };
        self.push(out.into_dyn(), vec![x], backward)
    }

    /// Bilinear crop-and-resize of regions to an `S x S` grid.
    ///
    /// `rois` are `(x, y, w, h)` rectangles in feature-cell units; each output
    /// bin samples one bilinear point at its centre. Feature values sit at
    /// cell centres and border samples clamp.
    pub fn roi_align(&self, x: Var, rois: &[[f64; 4]], out_size: usize) -> Var {
        let n = rois.len();
        let (out, h, w, c) = self.with_value(x, |xv| {
            let x3 = xv.view().into_dimensionality::<Ix3>().expect("roi x");
            let (c, h, w) = x3.dim();
            let mut out = Array4::<f64>::zeros((n, c, out_size, out_size));
            for (ri, roi) in rois.iter().enumerate() {
                for i in 0..out_size {
                    for j in 0..out_size {
                        let (r0, c0, fr, fc) = bilinear_coords(roi, i, j, out_size, h, w);
                        for ci in 0..c {
                            let v00 = x3[[ci, r0, c0]];
                            let v01 = x3[[ci, r0, (c0 + 1).min(w - 1)]];
                            let v10 = x3[[ci, (r0 + 1).min(h - 1), c0]];
                            let v11 = x3[[ci, (r0 + 1).min(h - 1), (c0 + 1).min(w - 1)]];
                            out[[ri, ci, i, j]] = v00 * (1.0 - fr) * (1.0 - fc)
                                + v01 * (1.0 - fr) * fc
                                + v10 * fr * (1.0 - fc)
                                + v11 * fr * fc;
                        }
                    }
                }
            }
            (out, h, w, c)
        });

        let backward = if self.grad_enabled() {
            let rois = rois.to_vec();
            Some(Box::new(move |gout: &ArrayD<f64>| {
                let g4 = gout.view().into_dimensionality::<Ix4>().unwrap();
                let mut dx = Array3::<f64>::zeros((c, h, w));
                for (ri, roi) in rois.iter().enumerate() {
                    for i in 0..out_size {
                        for j in 0..out_size {
                            let (r0, c0, fr, fc) = bilinear_coords(roi, i, j, out_size, h, w);
                            let r1 = (r0 + 1).min(h - 1);
                            let c1 = (c0 + 1).min(w - 1);
                            for ci in 0..c {
                                let g = g4[[ri, ci, i, j]];
                                dx[[ci, r0, c0]] += g * (1.0 - fr) * (1.0 - fc);
                                dx[[ci, r0, c1]] += g * (1.0 - fr) * fc;
                                dx[[ci, r1, c0]] += g * fr * (1.0 - fc);
                                dx[[ci, r1, c1]] += g * fr * fc;
                            }
                        }
                    }
                }
                vec![dx.into_dyn()]
            }) as super::graph::BackwardFn)
        } else {
            None
        };
        self.push(out.into_dyn(), vec![x], backward)
    }

    pub fn reshape(&self, x: Var, shape: &[usize]) -> Var {
        let out = self.with_value(x, |xv| copy_reshape(xv, shape));
        let old_shape: Vec<usize> = self.with_value(x, |xv| xv.shape().to_vec());
        let backward = if self.grad_enabled() {
            Some(Box::new(move |gout: &ArrayD<f64>| {
                vec![copy_reshape(gout, &old_shape)]
            }) as super::graph::BackwardFn)
        } else {
            None
        };
        self.push(out, vec![x], backward)
    }

    /// Gather along axis 0; works for any rank >= 1.
    pub fn select_rows(&self, x: Var, idx: &[usize]) -> Var {
        let (out, in_shape) = self.with_value(x, |xv| {
            let mut out_shape = xv.shape().to_vec();
            out_shape[0] = idx.len();
            let mut out = ArrayD::<f64>::zeros(out_shape);
            for (oi, &i) in idx.iter().enumerate() {
                out.index_axis_mut(Axis(0), oi)
                    .assign(&xv.index_axis(Axis(0), i));
            }
            (out, xv.shape().to_vec())
        });
        let backward = if self.grad_enabled() {
            let idx = idx.to_vec();
            Some(Box::new(move |gout: &ArrayD<f64>| {
                let mut dx = ArrayD::<f64>::zeros(in_shape);
                for (oi, &i) in idx.iter().enumerate() {
                    let mut slot = dx.index_axis_mut(Axis(0), i);
                    slot += &gout.index_axis(Axis(0), oi);
                }
                vec![dx]
            }) as super::graph::BackwardFn)
        } else {
            None
        };
        self.push(out, vec![x], backward)
    }

    /// Concatenate along axis 0; parts must agree on trailing dimensions.
    pub fn concat0(&self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat0 of nothing");
        let (out, lens) = {
            let views: Vec<ArrayD<f64>> = parts.iter().map(|&p| self.value(p)).collect();
            let lens: Vec<usize> = views.iter().map(|v| v.shape()[0]).collect();
            let view_refs: Vec<_> = views.iter().map(|v| v.view()).collect();
            let out = ndarray::concatenate(Axis(0), &view_refs).expect("concat0 shape mismatch");
            (out, lens)
        };
        let backward = if self.grad_enabled() {
            Some(Box::new(move |gout: &ArrayD<f64>| {
                let mut grads = Vec::with_capacity(lens.len());
                let mut offset = 0;
                for &len in &lens {
                    let part = gout
                        .slice_axis(Axis(0), ndarray::Slice::from(offset..offset + len))
                        .to_owned();
                    grads.push(part);
                    offset += len;
                }
                grads
            }) as super::graph::BackwardFn)
        } else {
            None
        };
        self.push(out, parts.to_vec(), backward)
    }

    /// Gather arbitrary elements of a tensor (flattened index order) into a
    /// vector.
    pub fn select_flat(&self, x: Var, idx: &[usize]) -> Var {
        let (out, numel, shape) = self.with_value(x, |xv| {
            let flat: Vec<f64> = xv.iter().copied().collect();
            let out: Array1<f64> = idx.iter().map(|&i| flat[i]).collect();
            (out, flat.len(), xv.shape().to_vec())
        });
        let backward = if self.grad_enabled() {
            let idx = idx.to_vec();
            Some(Box::new(move |gout: &ArrayD<f64>| {
                let mut dx = vec![0.0; numel];
                for (oi, &i) in idx.iter().enumerate() {
                    dx[i] += gout[[oi]];
                }
                vec![Array1::from(dx)
                    .into_shape_with_order(shape.as_slice())
                    .unwrap()
                    .into_dyn()]
            }) as super::graph::BackwardFn)
        } else {
            None
        };
        self.push(out.into_dyn(), vec![x], backward)
    }

    /// Row-wise log-softmax of `[N,K]`.
    pub fn log_softmax_rows(&self, x: Var) -> Var {
        let out = self.with_value(x, |xv| {
            let x2 = xv.view().into_dimensionality::<Ix2>().expect("lsm x");
            let mut out = x2.to_owned();
            for mut row in out.rows_mut() {
                let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse = row.iter().map(|v| (v - m).exp()).sum::<f64>().ln() + m;
                row.mapv_inplace(|v| v - lse);
            }
            out
        });
        let backward = if self.grad_enabled() {
            let out_val = out.clone();
            Some(Box::new(move |gout: &ArrayD<f64>| {
                let g2 = gout.view().into_dimensionality::<Ix2>().unwrap();
                let mut dx = g2.to_owned();
                for (mut drow, (orow, grow)) in dx
                    .rows_mut()
                    .into_iter()
                    .zip(out_val.rows().into_iter().zip(g2.rows()))
                {
                    let gsum: f64 = grow.sum();
                    for (d, &o) in drow.iter_mut().zip(orow.iter()) {
                        *d -= o.exp() * gsum;
                    }
                }
                vec![dx.into_dyn()]
            }) as super::graph::BackwardFn)
        } else {
            None
        };
        self.push(out.into_dyn(), vec![x], backward)
    }

    pub fn exp(&self, x: Var) -> Var {
        let out = self.with_value(x, |xv| xv.mapv(f64::exp));
        let backward = if self.grad_enabled() {
            let out_val = out.clone();
            Some(Box::new(move |gout: &ArrayD<f64>| vec![gout * &out_val])
                as super::graph::BackwardFn)
        } else {
            None
        };
        self.push(out, vec![x], backward)
    }

    pub fn add(&self, a: Var, b: Var) -> Var {
        let out = self.with_value(a, |av| self.with_value(b, |bv| av + bv));
        let backward = if self.grad_enabled() {
            Some(Box::new(move |gout: &ArrayD<f64>| vec![gout.clone(), gout.clone()])
                as super::graph::BackwardFn)
        } else {
            None
        };
        self.push(out, vec![a, b], backward)
    }

    pub fn sub(&self, a: Var, b: Var) -> Var {
        let out = self.with_value(a, |av| self.with_value(b, |bv| av - bv));
        let backward = if self.grad_enabled() {
            Some(Box::new(move |gout: &ArrayD<f64>| vec![gout.clone(), -gout])
                as super::graph::BackwardFn)
        } else {
            None
        };
        self.push(out, vec![a, b], backward)
    }

    pub fn mul(&self, a: Var, b: Var) -> Var {
        let out = self.with_value(a, |av| self.with_value(b, |bv| av * bv));
        let backward = if self.grad_enabled() {
            let a_val = self.value(a);
            let b_val = self.value(b);
            Some(Box::new(move |gout: &ArrayD<f64>| {
                vec![gout * &b_val, gout * &a_val]
            }) as super::graph::BackwardFn)
        } else {
            None
        };
        self.push(out, vec![a, b], backward)
    }

    pub fn add_scalar(&self, x: Var, c: f64) -> Var {
        let out = self.with_value(x, |xv| xv + c);
        let backward = if self.grad_enabled() {
            Some(Box::new(move |gout: &ArrayD<f64>| vec![gout.clone()])
                as super::graph::BackwardFn)
        } else {
            None
        };
        self.push(out, vec![x], backward)
    }

    pub fn scale(&self, x: Var, c: f64) -> Var {
        let out = self.with_value(x, |xv| xv * c);
        let backward = if self.grad_enabled() {
            Some(Box::new(move |gout: &ArrayD<f64>| vec![gout * c])
                as super::graph::BackwardFn)
        } else {
            None
        };
        self.push(out, vec![x], backward)
    }

    pub fn sum_all(&self, x: Var) -> Var {
        let (out, shape) = self.with_value(x, |xv| {
            (ndarray::arr0(xv.sum()).into_dyn(), xv.shape().to_vec())
        });
        let backward = if self.grad_enabled() {
            Some(Box::new(move |gout: &ArrayD<f64>| {
                let g = *gout.first().unwrap();
                vec![ArrayD::from_elem(shape.as_slice(), g)]
            }) as super::graph::BackwardFn)
        } else {
            None
        };
        self.push(out, vec![x], backward)
    }

    /// Mean over all elements. Empty input is a caller bug; loss gates handle
    /// empty sets before reaching here.
    pub fn mean_all(&self, x: Var) -> Var {
        let n = self.with_value(x, |xv| xv.len());
        assert!(n > 0, "mean_all over empty tensor");
        let s = self.sum_all(x);
        self.scale(s, 1.0 / n as f64)
    }

    /// Row sums of `[N,K]` -> `[N]`.
    pub fn sum_rows(&self, x: Var) -> Var {
        let (out, k) = self.with_value(x, |xv| {
            let x2 = xv.view().into_dimensionality::<Ix2>().expect("sum_rows x");
            (x2.sum_axis(Axis(1)), x2.ncols())
        });
        let backward = if self.grad_enabled() {
            Some(Box::new(move |gout: &ArrayD<f64>| {
                let g1 = gout.view().into_dimensionality::<ndarray::Ix1>().unwrap();
                let n = g1.len();
                let mut dx = Array2::<f64>::zeros((n, k));
                for (mut row, &g) in dx.rows_mut().into_iter().zip(g1.iter()) {
                    row.fill(g);
                }
                vec![dx.into_dyn()]
            }) as super::graph::BackwardFn)
        } else {
            None
        };
        self.push(out.into_dyn(), vec![x], backward)
    }

    /// Negative log likelihood rows: `-log_probs[i, target[i]]`.
    pub fn nll_rows(&self, log_probs: Var, targets: &[usize]) -> Var {
        let out = self.with_value(log_probs, |lv| {
            let l2 = lv.view().into_dimensionality::<Ix2>().expect("nll x");
            assert_eq!(l2.nrows(), targets.len());
            let out: Array1<f64> = targets
                .iter()
                .enumerate()
                .map(|(i, &t)| -l2[[i, t]])
                .collect();
            out
        });
        let backward = if self.grad_enabled() {
            let targets = targets.to_vec();
            let (n, k) = self.with_value(log_probs, |lv| {
                let l2 = lv.view().into_dimensionality::<Ix2>().unwrap();
                l2.dim()
            });
            Some(Box::new(move |gout: &ArrayD<f64>| {
                let mut dx = Array2::<f64>::zeros((n, k));
                for (i, &t) in targets.iter().enumerate() {
                    dx[[i, t]] = -gout[[i]];
                }
                vec![dx.into_dyn()]
            }) as super::graph::BackwardFn)
        } else {
            None
        };
        self.push(out.into_dyn(), vec![log_probs], backward)
    }

    /// Elementwise smooth-L1 against a constant target.
    pub fn smooth_l1(&self, pred: Var, target: &ArrayD<f64>, beta: f64) -> Var {
        assert!(beta > 0.0);
        let out = self.with_value(pred, |pv| {
            assert_eq!(pv.shape(), target.shape(), "smooth_l1 shape mismatch");
            let mut out = pv - target;
            out.mapv_inplace(|d| {
                let a = d.abs();
                if a < beta {
                    0.5 * d * d / beta
                } else {
                    a - 0.5 * beta
                }
            });
            out
        });
        let backward = if self.grad_enabled() {
            let diff = self.with_value(pred, |pv| pv - target);
            Some(Box::new(move |gout: &ArrayD<f64>| {
                let mut dx = diff;
                dx.mapv_inplace(|d| (d / beta).clamp(-1.0, 1.0));
                vec![gout * &dx]
            }) as super::graph::BackwardFn)
        } else {
            None
        };
        self.push(out, vec![pred], backward)
    }

    /// Numerically stable binary cross entropy from logits against constant
    /// targets in [0,1]. Elementwise.
    pub fn bce_with_logits(&self, logits: Var, targets: &ArrayD<f64>) -> Var {
        let out = self.with_value(logits, |zv| {
            assert_eq!(zv.shape(), targets.shape(), "bce shape mismatch");
            let mut out = zv.clone();
            out.zip_mut_with(targets, |z, &y| {
                *z = z.max(0.0) - *z * y + (1.0 + (-z.abs()).exp()).ln();
            });
            out
        });
        let backward = if self.grad_enabled() {
            let z_val = self.value(logits);
            let targets = targets.clone();
            Some(Box::new(move |gout: &ArrayD<f64>| {
                let mut dx = z_val;
                dx.zip_mut_with(&targets, |z, &y| {
                    let sig = 1.0 / (1.0 + (-*z).exp());
                    *z = sig - y;
                });
                vec![gout * &dx]
            }) as super::graph::BackwardFn)
        } else {
            None
        };
        self.push(out, vec![logits], backward)
    }
}

fn bilinear_coords(
    roi: &[f64; 4],
    i: usize,
    j: usize,
    out_size: usize,
    h: usize,
    w: usize,
) -> (usize, usize, f64, f64) {
    let [x0, y0, bw, bh] = *roi;
    let yy = y0 + (i as f64 + 0.5) * bh / out_size as f64;
    let xx = x0 + (j as f64 + 0.5) * bw / out_size as f64;
    // values live at cell centres
    let u = (yy - 0.5).clamp(0.0, (h - 1) as f64);
    let v = (xx - 0.5).clamp(0.0, (w - 1) as f64);
    let r0 = u.floor() as usize;
    let c0 = v.floor() as usize;
    let r0 = r0.min(h - 1);
    let c0 = c0.min(w - 1);
    (r0, c0, u - r0 as f64, v - c0 as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{ArrayD, IxDyn};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_arr(shape: &[usize], rng: &mut ChaCha8Rng) -> ArrayD<f64> {
        ArrayD::from_shape_fn(IxDyn(shape), |_| rng.gen_range(-0.5..0.5))
    }

    /// Central finite differences over every coordinate of every input.
    fn gradcheck(
        inputs: &[ArrayD<f64>],
        f: impl Fn(&Graph, &[Var]) -> Var,
        tol: f64,
    ) {
        let eval = |arrays: &[ArrayD<f64>]| -> f64 {
            let g = Graph::no_grad();
            let vars: Vec<Var> = arrays.iter().map(|a| g.leaf(a.clone())).collect();
            let root = f(&g, &vars);
            g.scalar_value(root)
        };

        let g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|a| g.leaf(a.clone())).collect();
        let root = f(&g, &vars);
        let grads = g.backward(root);

        let h = 1e-6;
        for (ii, input) in inputs.iter().enumerate() {
            let analytic = grads.get_or_zeros(vars[ii], input.shape());
            for flat in 0..input.len() {
                let mut plus = inputs.to_vec();
                let mut minus = inputs.to_vec();
                *plus[ii].iter_mut().nth(flat).unwrap() += h;
                *minus[ii].iter_mut().nth(flat).unwrap() -= h;
                let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
                let a = *analytic.iter().nth(flat).unwrap();
                let denom = a.abs().max(fd.abs()).max(1e-6);
                assert!(
                    (a - fd).abs() / denom < tol,
                    "input {ii} coord {flat}: analytic {a} vs fd {fd}"
                );
            }
        }
    }

    #[test]
    fn conv2d_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = rand_arr(&[2, 6, 5], &mut rng);
        let w = rand_arr(&[3, 2, 3, 3], &mut rng);
        let b = rand_arr(&[3], &mut rng);
        gradcheck(&[x, w, b], |g, v| {
            let y = g.conv2d(v[0], v[1], v[2], 2, 1);
            g.sum_all(y)
        }, 1e-4);
    }

    #[test]
    fn conv2d_shapes_use_ceil_arithmetic() {
        let g = Graph::no_grad();
        let x = g.leaf(ArrayD::zeros(IxDyn(&[1, 9, 7])));
        let w = g.leaf(ArrayD::zeros(IxDyn(&[2, 1, 3, 3])));
        let b = g.leaf(ArrayD::zeros(IxDyn(&[2])));
        let y = g.conv2d(x, w, b, 2, 1);
        assert_eq!(g.value(y).shape(), &[2, 5, 4]);
    }

    #[test]
    fn linear_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = rand_arr(&[4, 3], &mut rng);
        let w = rand_arr(&[3, 5], &mut rng);
        let b = rand_arr(&[5], &mut rng);
        gradcheck(&[x, w, b], |g, v| {
            let y = g.linear(v[0], v[1], v[2]);
            let y = g.mul(y, y);
            g.sum_all(y)
        }, 1e-4);
    }

    #[test]
    fn relu_matches_finite_differences_away_from_kink() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut x = rand_arr(&[3, 4], &mut rng);
        x.mapv_inplace(|v| if v.abs() < 0.05 { v + 0.2 } else { v });
        gradcheck(&[x], |g, v| {
            let y = g.relu(v[0]);
            g.sum_all(g.mul(y, y))
        }, 1e-4);
    }

    #[test]
    fn resize_nearest_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = rand_arr(&[2, 3, 4], &mut rng);
        gradcheck(&[x], |g, v| {
            let y = g.resize_nearest(v[0], 6, 7);
            g.sum_all(g.mul(y, y))
        }, 1e-4);
    }

    #[test]
    fn roi_align_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = rand_arr(&[2, 8, 8], &mut rng);
        let rois = vec![[1.2, 0.8, 4.5, 5.0], [0.0, 0.0, 8.0, 8.0]];
        gradcheck(&[x], |g, v| {
            let y = g.roi_align(v[0], &rois, 3);
            g.sum_all(g.mul(y, y))
        }, 1e-4);
    }

    #[test]
    fn roi_align_constant_map_gives_constant_grid() {
        let g = Graph::no_grad();
        let x = g.leaf(ArrayD::from_elem(IxDyn(&[3, 10, 10]), 2.5));
        let y = g.roi_align(x, &[[0.0, 0.0, 10.0, 10.0]], 7);
        let yv = g.value(y);
        assert!(yv.iter().all(|&v| (v - 2.5).abs() < 1e-12));
    }

    #[test]
    fn log_softmax_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = rand_arr(&[3, 4], &mut rng);
        gradcheck(&[x], |g, v| {
            let y = g.log_softmax_rows(v[0]);
            g.sum_all(g.mul(y, y))
        }, 1e-4);
    }

    #[test]
    fn nll_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = rand_arr(&[4, 3], &mut rng);
        gradcheck(&[x], |g, v| {
            let lp = g.log_softmax_rows(v[0]);
            let nll = g.nll_rows(lp, &[0, 2, 1, 1]);
            g.mean_all(nll)
        }, 1e-4);
    }

    #[test]
    fn smooth_l1_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = rand_arr(&[3, 4], &mut rng);
        let target = rand_arr(&[3, 4], &mut rng) * 2.0;
        gradcheck(&[x], |g, v| {
            let y = g.smooth_l1(v[0], &target, 0.111);
            g.sum_all(y)
        }, 1e-3);
    }

    #[test]
    fn bce_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let z = rand_arr(&[6], &mut rng) * 3.0;
        let y = ArrayD::from_shape_fn(IxDyn(&[6]), |_| {
            if rng.gen_bool(0.5) {
                1.0
            } else {
                0.0
            }
        });
        gradcheck(&[z], |g, v| {
            let l = g.bce_with_logits(v[0], &y);
            g.mean_all(l)
        }, 1e-4);
    }

    #[test]
    fn select_and_reshape_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = rand_arr(&[5, 4], &mut rng);
        gradcheck(&[x], |g, v| {
            let rows = g.select_rows(v[0], &[0, 2, 2, 4]);
            let flat = g.select_flat(rows, &[1, 3, 5, 7, 9]);
            let m = g.reshape(flat, &[5, 1]);
            g.sum_all(g.mul(m, m))
        }, 1e-4);
    }

    #[test]
    fn exp_sub_sum_rows_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let a = rand_arr(&[3, 4], &mut rng);
        let b = rand_arr(&[3, 4], &mut rng);
        gradcheck(&[a, b], |g, v| {
            let shifted = g.add_scalar(v[0], 0.3);
            let la = g.log_softmax_rows(shifted);
            let lb = g.log_softmax_rows(v[1]);
            let pa = g.exp(la);
            let d = g.sub(la, lb);
            let prod = g.mul(pa, d);
            let rows = g.sum_rows(prod);
            g.mean_all(rows)
        }, 1e-4);
    }

    #[test]
    fn concat0_and_4d_select_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a = rand_arr(&[2, 2, 3, 3], &mut rng);
        let b = rand_arr(&[1, 2, 3, 3], &mut rng);
        gradcheck(&[a, b], |g, v| {
            let cat = g.concat0(&[v[0], v[1]]);
            let sel = g.select_rows(cat, &[2, 0, 1, 0]);
            g.sum_all(g.mul(sel, sel))
        }, 1e-4);
    }

    #[test]
    fn grad_accumulates_over_shared_subgraphs() {
        let g = Graph::new();
        let x = g.leaf(ndarray::arr1(&[2.0, 3.0]).into_dyn());
        let y = g.mul(x, x);
        let s1 = g.sum_all(y);
        let s2 = g.sum_all(x);
        let total = g.add(s1, s2);
        let grads = g.backward(total);
        let gx = grads.get(x).unwrap();
        // d/dx (x^2 + x) = 2x + 1
        assert_eq!(gx[[0]], 5.0);
        assert_eq!(gx[[1]], 7.0);
    }
}
