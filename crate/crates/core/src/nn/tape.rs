//! Reverse-mode autodiff tape.
//!
//! Forward ops append nodes holding their output value; `backward` walks the
//! node list in reverse, accumulating gradients. Parameter nodes copy their
//! value out of the [`ParameterStore`] at record time and write gradients
//! back on the backward pass, so a tape never borrows the store across the
//! whole forward/backward cycle.

use ndarray::linalg::general_mat_mul;
use ndarray::ArrayView2;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::nn::store::ParameterStore;
use crate::tensor::Tensor;

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Input,
    Param(String),
    Matmul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Min(Var, Var),
    /// (B x N) + row vector (N)
    AddBias(Var, Var),
    /// (B x N) * column (B x 1), broadcast along columns
    MulCol(Var, Var),
    /// (B x N) - row (1 x N)
    SubRow(Var, Var),
    /// (B x N) / row (1 x N)
    DivRow(Var, Var),
    Scale(Var, f32),
    AddScalar(Var),
    Elu(Var),
    Tanh(Var),
    Sigmoid(Var),
    Exp(Var),
    Square(Var),
    Sqrt(Var),
    Clamp(Var, f32, f32),
    Softmax(Var),
    Sum(Var),
    Mean(Var),
    SumCols(Var),
    MeanRows(Var),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize, usize),
    Reshape(Var),
    /// Channels-last (NHWC) convolution.
    Conv2d {
        input: Var,
        weight: Var,
        bias: Var,
        stride: usize,
        pad: usize,
        /// (batch, height, width, channels)
        in_dims: (usize, usize, usize, usize),
        out_dims: (usize, usize, usize, usize),
    },
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Records a forward computation for reverse-mode differentiation.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// GEMM row-chunk size; fixed so results do not depend on core count.
const GEMM_CHUNK: usize = 1024;

/// C(m x n) += alpha * A(m x k) . B(k x n), rows processed in fixed chunks.
pub(crate) fn gemm_nn(alpha: f32, a: &[f32], b: &[f32], c: &mut [f32], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let bv = ArrayView2::from_shape((k, n), b).expect("gemm b view");
    let chunks: Vec<(&[f32], &mut [f32])> = a
        .chunks(GEMM_CHUNK * k)
        .zip(c.chunks_mut(GEMM_CHUNK * n))
        .collect();
    chunks.into_par_iter().for_each(|(ac, cc)| {
        let rows = ac.len() / k;
        let av = ArrayView2::from_shape((rows, k), ac).expect("gemm a view");
        let mut cv =
            ndarray::ArrayViewMut2::from_shape((rows, n), cc).expect("gemm c view");
        general_mat_mul(alpha, &av, &bv, 1.0, &mut cv);
    });
}

/// C(m x n) += alpha * A(m x k) . B(n x k)^T
pub(crate) fn gemm_nt(alpha: f32, a: &[f32], b: &[f32], c: &mut [f32], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(c.len(), m * n);
    let bv = ArrayView2::from_shape((n, k), b).expect("gemm b view");
    let bt = bv.reversed_axes();
    let chunks: Vec<(&[f32], &mut [f32])> = a
        .chunks(GEMM_CHUNK * k)
        .zip(c.chunks_mut(GEMM_CHUNK * n))
        .collect();
    chunks.into_par_iter().for_each(|(ac, cc)| {
        let rows = ac.len() / k;
        let av = ArrayView2::from_shape((rows, k), ac).expect("gemm a view");
        let mut cv =
            ndarray::ArrayViewMut2::from_shape((rows, n), cc).expect("gemm c view");
        general_mat_mul(alpha, &av, &bt, 1.0, &mut cv);
    });
}

/// C(m x n) += alpha * A(k x m)^T . B(k x n)
pub(crate) fn gemm_tn(alpha: f32, a: &[f32], b: &[f32], c: &mut [f32], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let av = ArrayView2::from_shape((k, m), a).expect("gemm a view");
    let at = av.reversed_axes();
    let bv = ArrayView2::from_shape((k, n), b).expect("gemm b view");
    let mut cv = ndarray::ArrayViewMut2::from_shape((m, n), c).expect("gemm c view");
    general_mat_mul(alpha, &at, &bv, 1.0, &mut cv);
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        value.debug_check_finite("tape op");
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// Constant leaf; receives no gradient.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Input)
    }

    /// Leaf bound to a named parameter; its gradient is accumulated into the
    /// store on `backward`.
    pub fn param(&mut self, store: &ParameterStore, name: &str) -> Var {
        let value = store.value(name).clone();
        self.push(value, Op::Param(name.to_string()))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ar, ac) = (self.nodes[a.0].value.rows(), self.nodes[a.0].value.cols());
        let (br, bc) = (self.nodes[b.0].value.rows(), self.nodes[b.0].value.cols());
        if ac != br {
            return Err(Error::ShapeMismatch(format!(
                "matmul {ar}x{ac} . {br}x{bc}"
            )));
        }
        let mut out = vec![0.0f32; ar * bc];
        gemm_nn(
            1.0,
            self.nodes[a.0].value.data(),
            self.nodes[b.0].value.data(),
            &mut out,
            ar,
            ac,
            bc,
        );
        Ok(self.push(
            Tensor::new(vec![ar, bc], out).expect("matmul out"),
            Op::Matmul(a, b),
        ))
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let (r, c) = (self.nodes[x.0].value.rows(), self.nodes[x.0].value.cols());
        let src = self.nodes[x.0].value.data();
        let mut out = vec![0.0f32; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        self.push(
            Tensor::new(vec![c, r], out).expect("transpose out"),
            Op::Transpose(x),
        )
    }

    fn binary_shapes(&self, a: Var, b: Var, what: &str) -> Result<()> {
        let (sa, sb) = (self.nodes[a.0].value.len(), self.nodes[b.0].value.len());
        if sa != sb && sa != 1 && sb != 1 {
            return Err(Error::ShapeMismatch(format!(
                "{what}: {:?} vs {:?}",
                self.nodes[a.0].value.shape(),
                self.nodes[b.0].value.shape()
            )));
        }
        Ok(())
    }

    fn elementwise(
        &mut self,
        a: Var,
        b: Var,
        what: &str,
        f: impl Fn(f32, f32) -> f32,
        op: Op,
    ) -> Result<Var> {
        self.binary_shapes(a, b, what)?;
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let (out_shape, n) = if va.len() >= vb.len() {
            (va.shape().to_vec(), va.len())
        } else {
            (vb.shape().to_vec(), vb.len())
        };
        let mut out = vec![0.0f32; n];
        for (i, o) in out.iter_mut().enumerate() {
            let x = va.data()[if va.len() == 1 { 0 } else { i }];
            let y = vb.data()[if vb.len() == 1 { 0 } else { i }];
            *o = f(x, y);
        }
        Ok(self.push(Tensor::new(out_shape, out).expect("elementwise out"), op))
    }

    /// Elementwise add; either side may be a scalar (broadcast).
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    /// Elementwise minimum; gradient routes to the smaller input (ties to `a`).
    pub fn min(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(a, b, "min", |x, y| x.min(y), Op::Min(a, b))
    }

    /// (B x N) + bias row (N).
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (r, c) = (self.nodes[x.0].value.rows(), self.nodes[x.0].value.cols());
        if self.nodes[bias.0].value.len() != c {
            return Err(Error::ShapeMismatch(format!(
                "add_bias: {:?} + bias {:?}",
                self.nodes[x.0].value.shape(),
                self.nodes[bias.0].value.shape()
            )));
        }
        let xs = self.nodes[x.0].value.data();
        let bs = self.nodes[bias.0].value.data();
        let mut out = vec![0.0f32; r * c];
        for i in 0..r {
            for j in 0..c {
                out[i * c + j] = xs[i * c + j] + bs[j];
            }
        }
        let shape = self.nodes[x.0].value.shape().to_vec();
        Ok(self.push(Tensor::new(shape, out).expect("add_bias out"), Op::AddBias(x, bias)))
    }

    /// (B x N) scaled per row by a (B x 1) column.
    pub fn mul_col(&mut self, x: Var, col: Var) -> Result<Var> {
        let (r, c) = (self.nodes[x.0].value.rows(), self.nodes[x.0].value.cols());
        if self.nodes[col.0].value.len() != r {
            return Err(Error::ShapeMismatch(format!(
                "mul_col: {:?} x col {:?}",
                self.nodes[x.0].value.shape(),
                self.nodes[col.0].value.shape()
            )));
        }
        let xs = self.nodes[x.0].value.data();
        let cs = self.nodes[col.0].value.data();
        let mut out = vec![0.0f32; r * c];
        for i in 0..r {
            for j in 0..c {
                out[i * c + j] = xs[i * c + j] * cs[i];
            }
        }
        let shape = self.nodes[x.0].value.shape().to_vec();
        Ok(self.push(Tensor::new(shape, out).expect("mul_col out"), Op::MulCol(x, col)))
    }

    /// (B x N) - row (1 x N).
    pub fn sub_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (r, c) = (self.nodes[x.0].value.rows(), self.nodes[x.0].value.cols());
        if self.nodes[row.0].value.len() != c {
            return Err(Error::ShapeMismatch(format!(
                "sub_row: {:?} - row {:?}",
                self.nodes[x.0].value.shape(),
                self.nodes[row.0].value.shape()
            )));
        }
        let xs = self.nodes[x.0].value.data();
        let rs = self.nodes[row.0].value.data();
        let mut out = vec![0.0f32; r * c];
        for i in 0..r {
            for j in 0..c {
                out[i * c + j] = xs[i * c + j] - rs[j];
            }
        }
        let shape = self.nodes[x.0].value.shape().to_vec();
        Ok(self.push(Tensor::new(shape, out).expect("sub_row out"), Op::SubRow(x, row)))
    }

    /// (B x N) / row (1 x N).
    pub fn div_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (r, c) = (self.nodes[x.0].value.rows(), self.nodes[x.0].value.cols());
        if self.nodes[row.0].value.len() != c {
            return Err(Error::ShapeMismatch(format!(
                "div_row: {:?} / row {:?}",
                self.nodes[x.0].value.shape(),
                self.nodes[row.0].value.shape()
            )));
        }
        let xs = self.nodes[x.0].value.data();
        let rs = self.nodes[row.0].value.data();
        let mut out = vec![0.0f32; r * c];
        for i in 0..r {
            for j in 0..c {
                out[i * c + j] = xs[i * c + j] / rs[j];
            }
        }
        let shape = self.nodes[x.0].value.shape().to_vec();
        Ok(self.push(Tensor::new(shape, out).expect("div_row out"), Op::DivRow(x, row)))
    }

    pub fn scale(&mut self, x: Var, s: f32) -> Var {
        let out: Vec<f32> = self.nodes[x.0].value.data().iter().map(|v| v * s).collect();
        let shape = self.nodes[x.0].value.shape().to_vec();
        self.push(Tensor::new(shape, out).expect("scale out"), Op::Scale(x, s))
    }

    pub fn add_scalar(&mut self, x: Var, s: f32) -> Var {
        let out: Vec<f32> = self.nodes[x.0].value.data().iter().map(|v| v + s).collect();
        let shape = self.nodes[x.0].value.shape().to_vec();
        self.push(Tensor::new(shape, out).expect("add_scalar out"), Op::AddScalar(x))
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.scale(x, -1.0)
    }

    pub fn elu(&mut self, x: Var) -> Var {
        let out: Vec<f32> = self.nodes[x.0]
            .value
            .data()
            .iter()
            .map(|&v| if v > 0.0 { v } else { v.exp() - 1.0 })
            .collect();
        let shape = self.nodes[x.0].value.shape().to_vec();
        self.push(Tensor::new(shape, out).expect("elu out"), Op::Elu(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let out: Vec<f32> = self.nodes[x.0].value.data().iter().map(|v| v.tanh()).collect();
        let shape = self.nodes[x.0].value.shape().to_vec();
        self.push(Tensor::new(shape, out).expect("tanh out"), Op::Tanh(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out: Vec<f32> = self.nodes[x.0]
            .value
            .data()
            .iter()
            .map(|v| 1.0 / (1.0 + (-v).exp()))
            .collect();
        let shape = self.nodes[x.0].value.shape().to_vec();
        self.push(Tensor::new(shape, out).expect("sigmoid out"), Op::Sigmoid(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let out: Vec<f32> = self.nodes[x.0].value.data().iter().map(|v| v.exp()).collect();
        let shape = self.nodes[x.0].value.shape().to_vec();
        self.push(Tensor::new(shape, out).expect("exp out"), Op::Exp(x))
    }

    pub fn square(&mut self, x: Var) -> Var {
        let out: Vec<f32> = self.nodes[x.0].value.data().iter().map(|v| v * v).collect();
        let shape = self.nodes[x.0].value.shape().to_vec();
        self.push(Tensor::new(shape, out).expect("square out"), Op::Square(x))
    }

    pub fn sqrt(&mut self, x: Var) -> Var {
        let out: Vec<f32> = self.nodes[x.0].value.data().iter().map(|v| v.sqrt()).collect();
        let shape = self.nodes[x.0].value.shape().to_vec();
        self.push(Tensor::new(shape, out).expect("sqrt out"), Op::Sqrt(x))
    }

    /// Gradient is passed through strictly inside (lo, hi) and zero outside.
    pub fn clamp(&mut self, x: Var, lo: f32, hi: f32) -> Var {
        let out: Vec<f32> = self.nodes[x.0]
            .value
            .data()
            .iter()
            .map(|v| v.clamp(lo, hi))
            .collect();
        let shape = self.nodes[x.0].value.shape().to_vec();
        self.push(Tensor::new(shape, out).expect("clamp out"), Op::Clamp(x, lo, hi))
    }

    /// Row-wise stable softmax.
    pub fn softmax(&mut self, x: Var) -> Var {
        let (r, c) = (self.nodes[x.0].value.rows(), self.nodes[x.0].value.cols());
        let xs = self.nodes[x.0].value.data();
        let mut out = vec![0.0f32; r * c];
        for i in 0..r {
            let row = &xs[i * c..(i + 1) * c];
            let mx = row.iter().fold(f32::NEG_INFINITY, |m, v| m.max(*v));
            let mut sum = 0.0f64;
            for j in 0..c {
                let e = (row[j] - mx).exp();
                out[i * c + j] = e;
                sum += e as f64;
            }
            for j in 0..c {
                out[i * c + j] = (out[i * c + j] as f64 / sum) as f32;
            }
        }
        let shape = self.nodes[x.0].value.shape().to_vec();
        self.push(Tensor::new(shape, out).expect("softmax out"), Op::Softmax(x))
    }

    /// Sum of all elements; 64-bit accumulation.
    pub fn sum(&mut self, x: Var) -> Var {
        let s: f64 = self.nodes[x.0].value.data().iter().map(|v| *v as f64).sum();
        self.push(Tensor::scalar(s as f32), Op::Sum(x))
    }

    /// Mean of all elements; 64-bit accumulation.
    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.nodes[x.0].value.len().max(1);
        let s: f64 = self.nodes[x.0].value.data().iter().map(|v| *v as f64).sum();
        self.push(Tensor::scalar((s / n as f64) as f32), Op::Mean(x))
    }

    /// (B x N) -> (B x 1) row sums.
    pub fn sum_cols(&mut self, x: Var) -> Var {
        let (r, c) = (self.nodes[x.0].value.rows(), self.nodes[x.0].value.cols());
        let xs = self.nodes[x.0].value.data();
        let mut out = vec![0.0f32; r];
        for i in 0..r {
            let mut acc = 0.0f64;
            for j in 0..c {
                acc += xs[i * c + j] as f64;
            }
            out[i] = acc as f32;
        }
        self.push(Tensor::new(vec![r, 1], out).expect("sum_cols out"), Op::SumCols(x))
    }

    /// (B x N) -> (1 x N) column means.
    pub fn mean_rows(&mut self, x: Var) -> Var {
        let (r, c) = (self.nodes[x.0].value.rows(), self.nodes[x.0].value.cols());
        let xs = self.nodes[x.0].value.data();
        let mut out = vec![0.0f64; c];
        for i in 0..r {
            for j in 0..c {
                out[j] += xs[i * c + j] as f64;
            }
        }
        let out: Vec<f32> = out.iter().map(|v| (*v / r as f64) as f32).collect();
        self.push(Tensor::new(vec![1, c], out).expect("mean_rows out"), Op::MeanRows(x))
    }

    /// Concatenate along columns; all inputs share the row count.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Usage("concat_cols of zero tensors".into()));
        }
        let r = self.nodes[parts[0].0].value.rows();
        let mut total_c = 0;
        for p in parts {
            if self.nodes[p.0].value.rows() != r {
                return Err(Error::ShapeMismatch(format!(
                    "concat_cols: row mismatch {:?} vs {:?}",
                    self.nodes[parts[0].0].value.shape(),
                    self.nodes[p.0].value.shape()
                )));
            }
            total_c += self.nodes[p.0].value.cols();
        }
        let mut out = vec![0.0f32; r * total_c];
        let mut col0 = 0;
        for p in parts {
            let c = self.nodes[p.0].value.cols();
            let src = self.nodes[p.0].value.data();
            for i in 0..r {
                out[i * total_c + col0..i * total_c + col0 + c]
                    .copy_from_slice(&src[i * c..(i + 1) * c]);
            }
            col0 += c;
        }
        Ok(self.push(
            Tensor::new(vec![r, total_c], out).expect("concat out"),
            Op::ConcatCols(parts.to_vec()),
        ))
    }

    /// Columns lo..hi of a (B x N) tensor.
    pub fn slice_cols(&mut self, x: Var, lo: usize, hi: usize) -> Result<Var> {
        let (r, c) = (self.nodes[x.0].value.rows(), self.nodes[x.0].value.cols());
        if hi > c || lo >= hi {
            return Err(Error::ShapeMismatch(format!(
                "slice_cols {lo}..{hi} of {r}x{c}"
            )));
        }
        let w = hi - lo;
        let xs = self.nodes[x.0].value.data();
        let mut out = vec![0.0f32; r * w];
        for i in 0..r {
            out[i * w..(i + 1) * w].copy_from_slice(&xs[i * c + lo..i * c + hi]);
        }
        Ok(self.push(
            Tensor::new(vec![r, w], out).expect("slice out"),
            Op::SliceCols(x, lo, hi),
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let t = self.nodes[x.0].value.reshaped(shape)?;
        Ok(self.push(t, Op::Reshape(x)))
    }

    /// 2-D convolution, channels-last (NHWC) layout, square kernel, via
    /// im2col + GEMM. `weight` is (C_out x k*k*C_in), `bias` is (C_out).
    pub fn conv2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Var,
        kernel: usize,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let ishape = self.nodes[input.0].value.shape().to_vec();
        if ishape.len() != 4 {
            return Err(Error::ShapeMismatch(format!(
                "conv2d input must be 4-D NHWC, got {ishape:?}"
            )));
        }
        let (b, h, w, cin) = (ishape[0], ishape[1], ishape[2], ishape[3]);
        let wshape = self.nodes[weight.0].value.shape().to_vec();
        let cout = wshape[0];
        if wshape[1] != cin * kernel * kernel {
            return Err(Error::ShapeMismatch(format!(
                "conv2d weight {wshape:?} vs k*k*cin = {}",
                cin * kernel * kernel
            )));
        }
        let ho = (h + 2 * pad - kernel) / stride + 1;
        let wo = (w + 2 * pad - kernel) / stride + 1;
        let col = im2col(
            self.nodes[input.0].value.data(),
            b,
            cin,
            h,
            w,
            kernel,
            stride,
            pad,
            ho,
            wo,
        );
        // col: (B*ho*wo) x (k*k*cin); GEMM lands directly in NHWC order
        let rows = b * ho * wo;
        let kk = cin * kernel * kernel;
        let mut out = vec![0.0f32; rows * cout];
        gemm_nt(
            1.0,
            &col,
            self.nodes[weight.0].value.data(),
            &mut out,
            rows,
            kk,
            cout,
        );
        let bias_v = self.nodes[bias.0].value.data();
        for row in 0..rows {
            for c in 0..cout {
                out[row * cout + c] += bias_v[c];
            }
        }
        Ok(self.push(
            Tensor::new(vec![b, ho, wo, cout], out).expect("conv out"),
            Op::Conv2d {
                input,
                weight,
                bias,
                stride,
                pad,
                in_dims: (b, h, w, cin),
                out_dims: (b, ho, wo, cout),
            },
        ))
    }

    /// Reverse pass from a scalar loss. Gradients of parameter leaves are
    /// accumulated into `store`; every other gradient stays on the tape.
    pub fn backward(&mut self, loss: Var, store: &mut ParameterStore) -> Result<()> {
        if self.nodes.is_empty() {
            return Err(Error::Usage("backward called before any forward op".into()));
        }
        if !self.nodes[loss.0].value.is_scalar() {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f32>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let Some(gy) = grads[idx].take() else { continue };
            // Split borrows: clone op (cheap) to appease the borrow checker.
            let op = self.nodes[idx].op.clone();
            match op {
                Op::Input => {}
                Op::Param(name) => store.grad_accumulate(&name, &gy),
                Op::Matmul(a, b) => {
                    let (m, k) = (self.nodes[a.0].value.rows(), self.nodes[a.0].value.cols());
                    let n = self.nodes[b.0].value.cols();
                    {
                        let ga = grads[a.0].get_or_insert_with(|| vec![0.0; m * k]);
                        let bd = self.nodes[b.0].value.data();
                        gemm_nt(1.0, &gy, bd, ga, m, n, k);
                    }
                    {
                        let gb = grads[b.0].get_or_insert_with(|| vec![0.0; k * n]);
                        let ad = self.nodes[a.0].value.data();
                        gemm_tn(1.0, ad, &gy, gb, k, m, n);
                    }
                }
                Op::Transpose(x) => {
                    let (r, c) = (self.nodes[x.0].value.rows(), self.nodes[x.0].value.cols());
                    let gx = grads[x.0].get_or_insert_with(|| vec![0.0; r * c]);
                    for i in 0..c {
                        for j in 0..r {
                            gx[j * c + i] += gy[i * r + j];
                        }
                    }
                }
                Op::Add(a, b) => {
                    self.acc_broadcast(&mut grads, a, &gy, 1.0);
                    self.acc_broadcast(&mut grads, b, &gy, 1.0);
                }
                Op::Sub(a, b) => {
                    self.acc_broadcast(&mut grads, a, &gy, 1.0);
                    self.acc_broadcast(&mut grads, b, &gy, -1.0);
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (
                        self.nodes[a.0].value.data().to_vec(),
                        self.nodes[b.0].value.data().to_vec(),
                    );
                    let wa: Vec<f32> = gy
                        .iter()
                        .enumerate()
                        .map(|(i, g)| g * vb[if vb.len() == 1 { 0 } else { i }])
                        .collect();
                    let wb: Vec<f32> = gy
                        .iter()
                        .enumerate()
                        .map(|(i, g)| g * va[if va.len() == 1 { 0 } else { i }])
                        .collect();
                    self.acc_broadcast(&mut grads, a, &wa, 1.0);
                    self.acc_broadcast(&mut grads, b, &wb, 1.0);
                }
                Op::Min(a, b) => {
                    let (va, vb) = (
                        self.nodes[a.0].value.data().to_vec(),
                        self.nodes[b.0].value.data().to_vec(),
                    );
                    let pick_a: Vec<f32> = gy
                        .iter()
                        .enumerate()
                        .map(|(i, g)| {
                            let x = va[if va.len() == 1 { 0 } else { i }];
                            let y = vb[if vb.len() == 1 { 0 } else { i }];
                            if x <= y {
                                *g
                            } else {
                                0.0
                            }
                        })
                        .collect();
                    let pick_b: Vec<f32> = gy
                        .iter()
                        .enumerate()
                        .map(|(i, g)| {
                            let x = va[if va.len() == 1 { 0 } else { i }];
                            let y = vb[if vb.len() == 1 { 0 } else { i }];
                            if y < x {
                                *g
                            } else {
                                0.0
                            }
                        })
                        .collect();
                    self.acc_broadcast(&mut grads, a, &pick_a, 1.0);
                    self.acc_broadcast(&mut grads, b, &pick_b, 1.0);
                }
                Op::AddBias(x, bias) => {
                    let (r, c) = (self.nodes[x.0].value.rows(), self.nodes[x.0].value.cols());
                    {
                        let gx = grads[x.0].get_or_insert_with(|| vec![0.0; r * c]);
                        for (g, gyv) in gx.iter_mut().zip(&gy) {
                            *g += gyv;
                        }
                    }
                    {
                        let gb = grads[bias.0].get_or_insert_with(|| vec![0.0; c]);
                        for i in 0..r {
                            for j in 0..c {
                                gb[j] += gy[i * c + j];
                            }
                        }
                    }
                }
                Op::MulCol(x, col) => {
                    let (r, c) = (self.nodes[x.0].value.rows(), self.nodes[x.0].value.cols());
                    let colv = self.nodes[col.0].value.data().to_vec();
                    let xv = self.nodes[x.0].value.data().to_vec();
                    {
                        let gx = grads[x.0].get_or_insert_with(|| vec![0.0; r * c]);
                        for i in 0..r {
                            for j in 0..c {
                                gx[i * c + j] += gy[i * c + j] * colv[i];
                            }
                        }
                    }
                    {
                        let gc = grads[col.0].get_or_insert_with(|| vec![0.0; r]);
                        for i in 0..r {
                            let mut acc = 0.0f32;
                            for j in 0..c {
                                acc += gy[i * c + j] * xv[i * c + j];
                            }
                            gc[i] += acc;
                        }
                    }
                }
                Op::SubRow(x, row) => {
                    let (r, c) = (self.nodes[x.0].value.rows(), self.nodes[x.0].value.cols());
                    {
                        let gx = grads[x.0].get_or_insert_with(|| vec![0.0; r * c]);
                        for (g, gyv) in gx.iter_mut().zip(&gy) {
                            *g += gyv;
                        }
                    }
                    {
                        let gr = grads[row.0].get_or_insert_with(|| vec![0.0; c]);
                        for i in 0..r {
                            for j in 0..c {
                                gr[j] -= gy[i * c + j];
                            }
                        }
                    }
                }
                Op::DivRow(x, row) => {
                    let (r, c) = (self.nodes[x.0].value.rows(), self.nodes[x.0].value.cols());
                    let rowv = self.nodes[row.0].value.data().to_vec();
                    let xv = self.nodes[x.0].value.data().to_vec();
                    {
                        let gx = grads[x.0].get_or_insert_with(|| vec![0.0; r * c]);
                        for i in 0..r {
                            for j in 0..c {
                                gx[i * c + j] += gy[i * c + j] / rowv[j];
                            }
                        }
                    }
                    {
                        let gr = grads[row.0].get_or_insert_with(|| vec![0.0; c]);
                        for i in 0..r {
                            for j in 0..c {
                                gr[j] -= gy[i * c + j] * xv[i * c + j] / (rowv[j] * rowv[j]);
                            }
                        }
                    }
                }
                Op::Scale(x, s) => {
                    let scaled: Vec<f32> = gy.iter().map(|g| g * s).collect();
                    self.acc_broadcast(&mut grads, x, &scaled, 1.0);
                }
                Op::AddScalar(x) => {
                    self.acc_broadcast(&mut grads, x, &gy, 1.0);
                }
                Op::Elu(x) => {
                    let y = self.nodes[idx].value.data().to_vec();
                    let xv = self.nodes[x.0].value.data().to_vec();
                    let gx: Vec<f32> = gy
                        .iter()
                        .enumerate()
                        .map(|(i, g)| if xv[i] > 0.0 { *g } else { g * (y[i] + 1.0) })
                        .collect();
                    self.acc_broadcast(&mut grads, x, &gx, 1.0);
                }
                Op::Tanh(x) => {
                    let y = self.nodes[idx].value.data().to_vec();
                    let gx: Vec<f32> = gy.iter().zip(&y).map(|(g, y)| g * (1.0 - y * y)).collect();
                    self.acc_broadcast(&mut grads, x, &gx, 1.0);
                }
                Op::Sigmoid(x) => {
                    let y = self.nodes[idx].value.data().to_vec();
                    let gx: Vec<f32> = gy.iter().zip(&y).map(|(g, y)| g * y * (1.0 - y)).collect();
                    self.acc_broadcast(&mut grads, x, &gx, 1.0);
                }
                Op::Exp(x) => {
                    let y = self.nodes[idx].value.data().to_vec();
                    let gx: Vec<f32> = gy.iter().zip(&y).map(|(g, y)| g * y).collect();
                    self.acc_broadcast(&mut grads, x, &gx, 1.0);
                }
                Op::Square(x) => {
                    let xv = self.nodes[x.0].value.data().to_vec();
                    let gx: Vec<f32> = gy.iter().zip(&xv).map(|(g, x)| g * 2.0 * x).collect();
                    self.acc_broadcast(&mut grads, x, &gx, 1.0);
                }
                Op::Sqrt(x) => {
                    let y = self.nodes[idx].value.data().to_vec();
                    let gx: Vec<f32> = gy.iter().zip(&y).map(|(g, y)| g * 0.5 / y).collect();
                    self.acc_broadcast(&mut grads, x, &gx, 1.0);
                }
                Op::Clamp(x, lo, hi) => {
                    let xv = self.nodes[x.0].value.data().to_vec();
                    let gx: Vec<f32> = gy
                        .iter()
                        .zip(&xv)
                        .map(|(g, x)| if *x > lo && *x < hi { *g } else { 0.0 })
                        .collect();
                    self.acc_broadcast(&mut grads, x, &gx, 1.0);
                }
                Op::Softmax(x) => {
                    let (r, c) = (self.nodes[x.0].value.rows(), self.nodes[x.0].value.cols());
                    let y = self.nodes[idx].value.data().to_vec();
                    let gx = grads[x.0].get_or_insert_with(|| vec![0.0; r * c]);
                    for i in 0..r {
                        let mut dot = 0.0f64;
                        for j in 0..c {
                            dot += (gy[i * c + j] * y[i * c + j]) as f64;
                        }
                        for j in 0..c {
                            gx[i * c + j] += y[i * c + j] * (gy[i * c + j] - dot as f32);
                        }
                    }
                }
                Op::Sum(x) => {
                    let n = self.nodes[x.0].value.len();
                    let fill = vec![gy[0]; n];
                    self.acc_broadcast(&mut grads, x, &fill, 1.0);
                }
                Op::Mean(x) => {
                    let n = self.nodes[x.0].value.len();
                    let fill = vec![gy[0] / n as f32; n];
                    self.acc_broadcast(&mut grads, x, &fill, 1.0);
                }
                Op::SumCols(x) => {
                    let (r, c) = (self.nodes[x.0].value.rows(), self.nodes[x.0].value.cols());
                    let gx = grads[x.0].get_or_insert_with(|| vec![0.0; r * c]);
                    for i in 0..r {
                        for j in 0..c {
                            gx[i * c + j] += gy[i];
                        }
                    }
                }
                Op::MeanRows(x) => {
                    let (r, c) = (self.nodes[x.0].value.rows(), self.nodes[x.0].value.cols());
                    let gx = grads[x.0].get_or_insert_with(|| vec![0.0; r * c]);
                    for i in 0..r {
                        for j in 0..c {
                            gx[i * c + j] += gy[j] / r as f32;
                        }
                    }
                }
                Op::ConcatCols(parts) => {
                    let total_c: usize = parts
                        .iter()
                        .map(|p| self.nodes[p.0].value.cols())
                        .sum();
                    let r = self.nodes[parts[0].0].value.rows();
                    let mut col0 = 0;
                    for p in &parts {
                        let c = self.nodes[p.0].value.cols();
                        let gp = grads[p.0].get_or_insert_with(|| vec![0.0; r * c]);
                        for i in 0..r {
                            for j in 0..c {
                                gp[i * c + j] += gy[i * total_c + col0 + j];
                            }
                        }
                        col0 += c;
                    }
                }
                Op::SliceCols(x, lo, hi) => {
                    let (r, c) = (self.nodes[x.0].value.rows(), self.nodes[x.0].value.cols());
                    let w = hi - lo;
                    let gx = grads[x.0].get_or_insert_with(|| vec![0.0; r * c]);
                    for i in 0..r {
                        for j in 0..w {
                            gx[i * c + lo + j] += gy[i * w + j];
                        }
                    }
                }
                Op::Reshape(x) => {
                    self.acc_broadcast(&mut grads, x, &gy, 1.0);
                }
                Op::Conv2d {
                    input,
                    weight,
                    bias,
                    stride,
                    pad,
                    in_dims: (b, h, w, cin),
                    out_dims: (_, ho, wo, cout),
                } => {
                    let kernel = (self.nodes[weight.0].value.cols() / cin).integer_sqrt();
                    // NHWC: gy is already (B*ho*wo) x cout
                    let rows = b * ho * wo;
                    let gy2d = &gy;
                    let kk = cin * kernel * kernel;
                    // bias grad: column sums
                    {
                        let gb = grads[bias.0].get_or_insert_with(|| vec![0.0; cout]);
                        for row in 0..rows {
                            for c in 0..cout {
                                gb[c] += gy2d[row * cout + c];
                            }
                        }
                    }
                    // weight grad: gy^T . col -> cout x kk
                    {
                        let col = im2col(
                            self.nodes[input.0].value.data(),
                            b,
                            cin,
                            h,
                            w,
                            kernel,
                            stride,
                            pad,
                            ho,
                            wo,
                        );
                        let gw = grads[weight.0].get_or_insert_with(|| vec![0.0; cout * kk]);
                        gemm_tn(1.0, gy2d, &col, gw, cout, rows, kk);
                    }
                    // input grad: col2im(gy . weight)
                    {
                        let mut gcol = vec![0.0f32; rows * kk];
                        gemm_nn(
                            1.0,
                            gy2d,
                            self.nodes[weight.0].value.data(),
                            &mut gcol,
                            rows,
                            cout,
                            kk,
                        );
                        let gx = grads[input.0]
                            .get_or_insert_with(|| vec![0.0; b * h * w * cin]);
                        col2im_accumulate(&gcol, gx, b, cin, h, w, kernel, stride, pad, ho, wo);
                    }
                }
            }
        }
        Ok(())
    }

    /// Accumulate `delta * scale` into the gradient of node `x`, reducing to a
    /// scalar if the node itself is scalar (broadcast adjoint).
    fn acc_broadcast(&self, grads: &mut [Option<Vec<f32>>], x: Var, delta: &[f32], scale: f32) {
        let n = self.nodes[x.0].value.len();
        let gx = grads[x.0].get_or_insert_with(|| vec![0.0; n]);
        if n == 1 && delta.len() > 1 {
            let mut acc = 0.0f64;
            for d in delta {
                acc += (*d * scale) as f64;
            }
            gx[0] += acc as f32;
        } else {
            debug_assert_eq!(gx.len(), delta.len());
            for (g, d) in gx.iter_mut().zip(delta) {
                *g += d * scale;
            }
        }
    }
}

trait IntegerSqrt {
    fn integer_sqrt(self) -> usize;
}

impl IntegerSqrt for usize {
    fn integer_sqrt(self) -> usize {
        let mut r = (self as f64).sqrt().round() as usize;
        while r * r > self {
            r -= 1;
        }
        while (r + 1) * (r + 1) <= self {
            r += 1;
        }
        r
    }
}

/// NHWC im2col: patch layout (ky, kx, cin) so channel blocks copy
/// contiguously.
#[allow(clippy::too_many_arguments)]
fn im2col(
    input: &[f32],
    b: usize,
    cin: usize,
    h: usize,
    w: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
) -> Vec<f32> {
    let kk = cin * kernel * kernel;
    let mut col = vec![0.0f32; b * ho * wo * kk];
    for bi in 0..b {
        for oy in 0..ho {
            for ox in 0..wo {
                let row = ((bi * ho + oy) * wo + ox) * kk;
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
                        let src = ((bi * h + iy as usize) * w + ix as usize) * cin;
                        let dst = row + (ky * kernel + kx) * cin;
                        col[dst..dst + cin].copy_from_slice(&input[src..src + cin]);
                    }
                }
            }
        }
    }
    col
}

#[allow(clippy::too_many_arguments)]
fn col2im_accumulate(
    col: &[f32],
    out: &mut [f32],
    b: usize,
    cin: usize,
    h: usize,
    w: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
) {
    let kk = cin * kernel * kernel;
    for bi in 0..b {
        for oy in 0..ho {
            for ox in 0..wo {
                let row = ((bi * ho + oy) * wo + ox) * kk;
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
                        let dst = ((bi * h + iy as usize) * w + ix as usize) * cin;
                        let src = row + (ky * kernel + kx) * cin;
                        for c in 0..cin {
                            out[dst + c] += col[src + c];
                        }
                    }
                }
            }
        }
    }
}
