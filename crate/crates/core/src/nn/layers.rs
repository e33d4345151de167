//! Network building blocks on top of the tape: dense stacks, conv layers,
//! a GRU cell, and scaled dot-product attention.

use rand::Rng;

use crate::error::Result;
use crate::nn::init::orthogonal;
use crate::nn::store::ParameterStore;
use crate::nn::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Linear,
    Elu,
    Tanh,
}

fn apply(tape: &mut Tape, act: Activation, x: Var) -> Var {
    match act {
        Activation::Linear => x,
        Activation::Elu => tape.elu(x),
        Activation::Tanh => tape.tanh(x),
    }
}

/// Dense stack; hidden layers use `hidden_act`, the output layer `out_act`.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub name: String,
    pub dims: Vec<usize>,
    pub hidden_act: Activation,
    pub out_act: Activation,
    /// Orthogonal gain of the final layer (small for policy output heads).
    pub out_gain: f32,
}

impl Mlp {
    pub fn new(name: &str, dims: &[usize]) -> Self {
        Mlp {
            name: name.to_string(),
            dims: dims.to_vec(),
            hidden_act: Activation::Elu,
            out_act: Activation::Linear,
            out_gain: 1.0,
        }
    }

    pub fn with_out_gain(mut self, gain: f32) -> Self {
        self.out_gain = gain;
        self
    }

    pub fn layer_count(&self) -> usize {
        self.dims.len() - 1
    }

    fn weight_name(&self, layer: usize) -> String {
        format!("{}.w{}", self.name, layer)
    }

    fn bias_name(&self, layer: usize) -> String {
        format!("{}.b{}", self.name, layer)
    }

    /// Orthogonal weights, zero biases.
    pub fn register(&self, store: &mut ParameterStore, rng: &mut impl Rng) -> Result<()> {
        for l in 0..self.layer_count() {
            let (din, dout) = (self.dims[l], self.dims[l + 1]);
            let gain = if l + 1 == self.layer_count() {
                self.out_gain
            } else {
                1.0
            };
            store.add(&self.weight_name(l), orthogonal(din, dout, gain, rng))?;
            store.add(&self.bias_name(l), Tensor::zeros(&[dout]))?;
        }
        Ok(())
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParameterStore, x: Var) -> Result<Var> {
        let mut h = x;
        for l in 0..self.layer_count() {
            let w = tape.param(store, &self.weight_name(l));
            let b = tape.param(store, &self.bias_name(l));
            let z = tape.matmul(h, w)?;
            let z = tape.add_bias(z, b)?;
            h = if l + 1 == self.layer_count() {
                apply(tape, self.out_act, z)
            } else {
                apply(tape, self.hidden_act, z)
            };
        }
        Ok(h)
    }

    pub fn parameter_names(&self) -> Vec<String> {
        (0..self.layer_count())
            .flat_map(|l| [self.weight_name(l), self.bias_name(l)])
            .collect()
    }
}

/// One 2-D convolution layer (square kernel, NCHW).
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub name: String,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    pub fn new(name: &str, in_channels: usize, out_channels: usize, kernel: usize, stride: usize, pad: usize) -> Self {
        Conv2d {
            name: name.to_string(),
            in_channels,
            out_channels,
            kernel,
            stride,
            pad,
        }
    }

    fn weight_name(&self) -> String {
        format!("{}.w", self.name)
    }

    fn bias_name(&self) -> String {
        format!("{}.b", self.name)
    }

    pub fn register(&self, store: &mut ParameterStore, rng: &mut impl Rng) -> Result<()> {
        let fan_in = self.in_channels * self.kernel * self.kernel;
        store.add(
            &self.weight_name(),
            orthogonal(self.out_channels, fan_in, 1.0, rng),
        )?;
        store.add(&self.bias_name(), Tensor::zeros(&[self.out_channels]))?;
        Ok(())
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParameterStore, x: Var) -> Result<Var> {
        let w = tape.param(store, &self.weight_name());
        let b = tape.param(store, &self.bias_name());
        tape.conv2d(x, w, b, self.kernel, self.stride, self.pad)
    }

    pub fn parameter_names(&self) -> Vec<String> {
        vec![self.weight_name(), self.bias_name()]
    }
}

/// Gated recurrent cell: r/z gates plus candidate with reset-gated state.
#[derive(Debug, Clone)]
pub struct GruCell {
    pub name: String,
    pub input_dim: usize,
    pub hidden_dim: usize,
}

impl GruCell {
    pub fn new(name: &str, input_dim: usize, hidden_dim: usize) -> Self {
        GruCell {
            name: name.to_string(),
            input_dim,
            hidden_dim,
        }
    }

    fn pname(&self, part: &str) -> String {
        format!("{}.{}", self.name, part)
    }

    pub fn register(&self, store: &mut ParameterStore, rng: &mut impl Rng) -> Result<()> {
        let (i, h) = (self.input_dim, self.hidden_dim);
        // input -> [r|z|n] stacked, hidden -> [r|z] stacked, hidden -> n separate
        store.add(&self.pname("wx"), orthogonal(i, 3 * h, 1.0, rng))?;
        store.add(&self.pname("wh_rz"), orthogonal(h, 2 * h, 1.0, rng))?;
        store.add(&self.pname("wh_n"), orthogonal(h, h, 1.0, rng))?;
        store.add(&self.pname("bx"), Tensor::zeros(&[3 * h]))?;
        store.add(&self.pname("bh_n"), Tensor::zeros(&[h]))?;
        Ok(())
    }

    /// (B x input) + (B x hidden) -> new hidden (B x hidden).
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParameterStore,
        x: Var,
        hidden: Var,
    ) -> Result<Var> {
        let h = self.hidden_dim;
        let wx = tape.param(store, &self.pname("wx"));
        let bx = tape.param(store, &self.pname("bx"));
        let wh_rz = tape.param(store, &self.pname("wh_rz"));
        let wh_n = tape.param(store, &self.pname("wh_n"));
        let bh_n = tape.param(store, &self.pname("bh_n"));

        let xz = tape.matmul(x, wx)?;
        let xz = tape.add_bias(xz, bx)?;
        let hz = tape.matmul(hidden, wh_rz)?;

        let xr = tape.slice_cols(xz, 0, h)?;
        let xu = tape.slice_cols(xz, h, 2 * h)?;
        let xn = tape.slice_cols(xz, 2 * h, 3 * h)?;
        let hr = tape.slice_cols(hz, 0, h)?;
        let hu = tape.slice_cols(hz, h, 2 * h)?;

        let r_in = tape.add(xr, hr)?;
        let r = tape.sigmoid(r_in);
        let u_in = tape.add(xu, hu)?;
        let u = tape.sigmoid(u_in);

        let hn = tape.matmul(hidden, wh_n)?;
        let hn = tape.add_bias(hn, bh_n)?;
        let rhn = tape.mul(r, hn)?;
        let n_in = tape.add(xn, rhn)?;
        let n = tape.tanh(n_in);

        // h' = (1 - u) * n + u * h
        let un = tape.mul(u, n)?;
        let n_minus = tape.sub(n, un)?;
        let uh = tape.mul(u, hidden)?;
        tape.add(n_minus, uh)
    }

    pub fn parameter_names(&self) -> Vec<String> {
        ["wx", "wh_rz", "wh_n", "bx", "bh_n"]
            .iter()
            .map(|p| self.pname(p))
            .collect()
    }
}

/// Scaled dot-product attention: softmax(Q K^T / sqrt(d)) V.
/// `query` is (B x d), `keys`/`values` are (n x d)/(n x dv).
pub fn attention_context(
    tape: &mut Tape,
    query: Var,
    keys: Var,
    values: Var,
) -> Result<Var> {
    let d = tape.value(query).cols();
    let kt = tape.transpose(keys);
    let scores = tape.matmul(query, kt)?;
    let scaled = tape.scale(scores, 1.0 / (d as f32).sqrt());
    let weights = tape.softmax(scaled);
    tape.matmul(weights, values)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identity_linear_layer_is_identity_map() {
        let mut store = ParameterStore::new();
        let mlp = Mlp::new("id", &[3, 3]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        mlp.register(&mut store, &mut rng).unwrap();
        // overwrite with the identity
        store
            .copy_value(
                "id.w0",
                &Tensor::matrix(3, 3, vec![1., 0., 0., 0., 1., 0., 0., 0., 1.]).unwrap(),
            )
            .unwrap();
        let mut tape = Tape::new();
        let x = tape.input(Tensor::matrix(2, 3, vec![1., 2., 3., -4., 5., 0.5]).unwrap());
        let y = mlp.forward(&mut tape, &store, x).unwrap();
        assert_eq!(tape.value(y).data(), &[1., 2., 3., -4., 5., 0.5]);
    }

    #[test]
    fn gru_zero_input_zero_state_stays_bounded() {
        let mut store = ParameterStore::new();
        let cell = GruCell::new("g", 4, 6);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        cell.register(&mut store, &mut rng).unwrap();
        let mut tape = Tape::new();
        let x = tape.input(Tensor::zeros(&[2, 4]));
        let h = tape.input(Tensor::zeros(&[2, 6]));
        let h2 = cell.forward(&mut tape, &store, x, h).unwrap();
        for v in tape.value(h2).data() {
            assert!(v.abs() <= 1.0);
        }
    }

    #[test]
    fn attention_uniform_when_keys_equal() {
        let mut tape = Tape::new();
        let q = tape.input(Tensor::matrix(1, 4, vec![0.3, -0.2, 0.9, 0.0]).unwrap());
        let k = tape.input(Tensor::matrix(3, 4, vec![0.5; 12]).unwrap());
        let v = tape.input(Tensor::matrix(3, 2, vec![1., 2., 3., 4., 5., 6.]).unwrap());
        let ctx = attention_context(&mut tape, q, k, v).unwrap();
        let out = tape.value(ctx).data();
        assert!((out[0] - 3.0).abs() < 1e-6);
        assert!((out[1] - 4.0).abs() < 1e-6);
    }
}
