//! Shared test support: a 64-bit reference forward implementation of every
//! layer type, independent of the tape (direct convolution instead of
//! im2col, plain loops instead of GEMM), plus a central-finite-difference
//! gradient checker that runs the reference at f64 precision.

#![allow(dead_code)]

pub mod refnn {
    use pointfoot_core::nn::ParameterStore;

    /// Row-major f64 matrix.
    #[derive(Debug, Clone)]
    pub struct Mat {
        pub rows: usize,
        pub cols: usize,
        pub data: Vec<f64>,
    }

    impl Mat {
        pub fn zeros(rows: usize, cols: usize) -> Self {
            Mat {
                rows,
                cols,
                data: vec![0.0; rows * cols],
            }
        }

        pub fn from_f32(rows: usize, cols: usize, data: &[f32]) -> Self {
            assert_eq!(rows * cols, data.len());
            Mat {
                rows,
                cols,
                data: data.iter().map(|v| *v as f64).collect(),
            }
        }

        pub fn at(&self, i: usize, j: usize) -> f64 {
            self.data[i * self.cols + j]
        }
    }

    pub fn param_mat(store: &ParameterStore, name: &str) -> Mat {
        let t = store.value(name);
        Mat::from_f32(t.rows(), t.cols(), t.data())
    }

    pub fn param_vec(store: &ParameterStore, name: &str) -> Vec<f64> {
        store.value(name).data().iter().map(|v| *v as f64).collect()
    }

    pub fn matmul(a: &Mat, b: &Mat) -> Mat {
        assert_eq!(a.cols, b.rows);
        let mut out = Mat::zeros(a.rows, b.cols);
        for i in 0..a.rows {
            for j in 0..b.cols {
                let mut acc = 0.0;
                for k in 0..a.cols {
                    acc += a.at(i, k) * b.at(k, j);
                }
                out.data[i * b.cols + j] = acc;
            }
        }
        out
    }

    pub fn add_bias(x: &Mat, b: &[f64]) -> Mat {
        assert_eq!(x.cols, b.len());
        let mut out = x.clone();
        for i in 0..x.rows {
            for j in 0..x.cols {
                out.data[i * x.cols + j] += b[j];
            }
        }
        out
    }

    pub fn map(x: &Mat, f: impl Fn(f64) -> f64) -> Mat {
        Mat {
            rows: x.rows,
            cols: x.cols,
            data: x.data.iter().map(|v| f(*v)).collect(),
        }
    }

    pub fn elu(x: &Mat) -> Mat {
        map(x, |v| if v > 0.0 { v } else { v.exp() - 1.0 })
    }

    pub fn tanh(x: &Mat) -> Mat {
        map(x, f64::tanh)
    }

    pub fn sigmoid(x: &Mat) -> Mat {
        map(x, |v| 1.0 / (1.0 + (-v).exp()))
    }

    pub fn softmax_rows(x: &Mat) -> Mat {
        let mut out = x.clone();
        for i in 0..x.rows {
            let row = &x.data[i * x.cols..(i + 1) * x.cols];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for j in 0..x.cols {
                let e = (row[j] - mx).exp();
                out.data[i * x.cols + j] = e;
                sum += e;
            }
            for j in 0..x.cols {
                out.data[i * x.cols + j] /= sum;
            }
        }
        out
    }

    /// Dense stack matching `Mlp` parameter naming (`<name>.w<l>` / `.b<l>`),
    /// ELU hidden activations, linear output.
    pub fn mlp_forward(store: &ParameterStore, name: &str, dims: &[usize], x: &Mat) -> Mat {
        let mut h = x.clone();
        for l in 0..dims.len() - 1 {
            let w = param_mat(store, &format!("{name}.w{l}"));
            let b = param_vec(store, &format!("{name}.b{l}"));
            let z = add_bias(&matmul(&h, &w), &b);
            h = if l + 1 == dims.len() - 1 { z } else { elu(&z) };
        }
        h
    }

    /// Direct (non-im2col) 2-D convolution. Channels-last (NHWC) input,
    /// weight (cout x k*k*cin) with (ky, kx, cin) patch order, NHWC output.
    #[allow(clippy::too_many_arguments)]
    pub fn conv2d_direct(
        input: &[f64],
        b: usize,
        cin: usize,
        h: usize,
        w: usize,
        weight: &Mat,
        bias: &[f64],
        kernel: usize,
        stride: usize,
        pad: usize,
    ) -> (Vec<f64>, usize, usize) {
        let cout = weight.rows;
        let ho = (h + 2 * pad - kernel) / stride + 1;
        let wo = (w + 2 * pad - kernel) / stride + 1;
        let mut out = vec![0.0f64; b * ho * wo * cout];
        for bi in 0..b {
            for oy in 0..ho {
                for ox in 0..wo {
                    for co in 0..cout {
                        let mut acc = bias[co];
                        for ky in 0..kernel {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kx in 0..kernel {
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                for ci in 0..cin {
                                    let iv = input
                                        [((bi * h + iy as usize) * w + ix as usize) * cin + ci];
                                    let wv = weight.at(co, (ky * kernel + kx) * cin + ci);
                                    acc += iv * wv;
                                }
                            }
                        }
                        out[((bi * ho + oy) * wo + ox) * cout + co] = acc;
                    }
                }
            }
        }
        (out, ho, wo)
    }

    /// GRU cell matching `GruCell` parameter naming.
    pub fn gru_forward(store: &ParameterStore, name: &str, hidden_dim: usize, x: &Mat, h: &Mat) -> Mat {
        let wx = param_mat(store, &format!("{name}.wx"));
        let bx = param_vec(store, &format!("{name}.bx"));
        let wh_rz = param_mat(store, &format!("{name}.wh_rz"));
        let wh_n = param_mat(store, &format!("{name}.wh_n"));
        let bh_n = param_vec(store, &format!("{name}.bh_n"));
        let xz = add_bias(&matmul(x, &wx), &bx);
        let hz = matmul(h, &wh_rz);
        let hd = hidden_dim;
        let mut out = Mat::zeros(x.rows, hd);
        let hn = add_bias(&matmul(h, &wh_n), &bh_n);
        for i in 0..x.rows {
            for j in 0..hd {
                let xr = xz.at(i, j);
                let xu = xz.at(i, hd + j);
                let xn = xz.at(i, 2 * hd + j);
                let hr = hz.at(i, j);
                let hu = hz.at(i, hd + j);
                let r = 1.0 / (1.0 + (-(xr + hr)).exp());
                let u = 1.0 / (1.0 + (-(xu + hu)).exp());
                let n = (xn + r * hn.at(i, j)).tanh();
                out.data[i * hd + j] = (1.0 - u) * n + u * h.at(i, j);
            }
        }
        out
    }

    /// Scaled dot-product attention (single head).
    pub fn attention(q: &Mat, k: &Mat, v: &Mat) -> Mat {
        let d = q.cols as f64;
        let mut scores = Mat::zeros(q.rows, k.rows);
        for i in 0..q.rows {
            for j in 0..k.rows {
                let mut acc = 0.0;
                for t in 0..q.cols {
                    acc += q.at(i, t) * k.at(j, t);
                }
                scores.data[i * k.rows + j] = acc / d.sqrt();
            }
        }
        let w = softmax_rows(&scores);
        matmul(&w, v)
    }
}

use pointfoot_core::nn::ParameterStore;

/// Central finite difference of `f` w.r.t. one parameter element.
pub fn central_diff(
    store: &mut ParameterStore,
    name: &str,
    idx: usize,
    h: f32,
    f: &mut dyn FnMut(&ParameterStore) -> f64,
) -> f64 {
    let orig = store.value(name).data()[idx];
    store.value_mut(name).data_mut()[idx] = orig + h;
    let fp = f(store);
    store.value_mut(name).data_mut()[idx] = orig - h;
    let fm = f(store);
    store.value_mut(name).data_mut()[idx] = orig;
    (fp - fm) / (2.0 * h as f64)
}

pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub checked: usize,
}

/// Compare analytic grads (already accumulated in the store) against central
/// finite differences of the reference loss `f`. Relative error uses a
/// symmetric denominator with a small floor so near-zero pairs compare
/// absolutely.
pub fn grad_check(
    store: &mut ParameterStore,
    names: &[String],
    h: f32,
    f: &mut dyn FnMut(&ParameterStore) -> f64,
) -> GradCheckReport {
    let mut max_rel = 0.0f64;
    let mut checked = 0usize;
    for name in names {
        let n = store.value(name).len();
        for idx in 0..n {
            let analytic = store.grad(name).data()[idx] as f64;
            let fd = central_diff(store, name, idx, h, f);
            let denom = analytic.abs().max(fd.abs()).max(1e-3);
            let rel = (analytic - fd).abs() / denom;
            if rel > max_rel {
                max_rel = rel;
            }
            checked += 1;
        }
    }
    GradCheckReport {
        max_rel_err: max_rel,
        checked,
    }
}
