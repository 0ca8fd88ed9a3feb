use rand::Rng;

use super::matrix::{gemm_nn, gemm_nt, gemm_tn, FeatureMatrix};
use super::params::{ParamStore, Tensor};
use crate::error::{Error, Result};

/// Negative-side slope of the leaky rectifier used throughout.
pub const LEAKY_SLOPE: f64 = 0.2;

#[inline]
pub fn leaky_relu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        LEAKY_SLOPE * x
    }
}

#[inline]
pub fn leaky_relu_grad(pre: f64) -> f64 {
    if pre > 0.0 {
        1.0
    } else {
        LEAKY_SLOPE
    }
}

/// Affine map `y = x W + b` with `W` stored `in x out` under `{name}.weight`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Linear {
    pub name: String,
    pub in_dim: usize,
    pub out_dim: usize,
    pub bias: bool,
}

impl Linear {
    pub fn new(name: impl Into<String>, in_dim: usize, out_dim: usize) -> Self {
        Self {
            name: name.into(),
            in_dim,
            out_dim,
            bias: true,
        }
    }

    pub fn without_bias(mut self) -> Self {
        self.bias = false;
        self
    }

    pub fn weight_key(&self) -> String {
        format!("{}.weight", self.name)
    }

    pub fn bias_key(&self) -> String {
        format!("{}.bias", self.name)
    }

    /// Uniform in `+-1/sqrt(fan_in)` for both weight and bias.
    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) {
        let bound = 1.0 / (self.in_dim as f64).sqrt();
        store.insert(
            self.weight_key(),
            Tensor::uniform(&[self.in_dim, self.out_dim], bound, rng),
        );
        if self.bias {
            store.insert(self.bias_key(), Tensor::uniform(&[self.out_dim], bound, rng));
        }
    }

    pub fn init_zero(&self, store: &mut ParamStore) {
        store.insert(self.weight_key(), Tensor::zeros(&[self.in_dim, self.out_dim]));
        if self.bias {
            store.insert(self.bias_key(), Tensor::zeros(&[self.out_dim]));
        }
    }

    pub fn check(&self, store: &ParamStore) -> Result<()> {
        store.expect_shape(&self.weight_key(), &[self.in_dim, self.out_dim])?;
        if self.bias {
            store.expect_shape(&self.bias_key(), &[self.out_dim])?;
        }
        Ok(())
    }

    pub fn weight<'a>(&self, store: &'a ParamStore) -> &'a [f64] {
        &store.tensor(&self.weight_key()).data
    }

    pub fn forward(&self, store: &ParamStore, x: &FeatureMatrix) -> FeatureMatrix {
        assert_eq!(x.cols(), self.in_dim, "input width for `{}`", self.name);
        let mut y = FeatureMatrix::zeros(x.rows(), self.out_dim);
        if self.bias {
            let b = &store.tensor(&self.bias_key()).data;
            for r in 0..x.rows() {
                y.row_mut(r).copy_from_slice(b);
            }
        }
        gemm_nn(
            x.rows(),
            self.in_dim,
            self.out_dim,
            x.data(),
            self.weight(store),
            1.0,
            y.data_mut(),
        );
        y
    }

    /// Accumulates parameter gradients for upstream `dy` at input `x`.
    pub fn backward_params(&self, x: &FeatureMatrix, dy: &FeatureMatrix, grads: &mut ParamStore) {
        let gw = grads.tensor_mut(&self.weight_key());
        gemm_tn(self.in_dim, x.rows(), self.out_dim, x.data(), dy.data(), 1.0, &mut gw.data);
        if self.bias {
            let gb = grads.tensor_mut(&self.bias_key());
            for r in 0..dy.rows() {
                for (g, d) in gb.data.iter_mut().zip(dy.row(r)) {
                    *g += d;
                }
            }
        }
    }

    pub fn backward_input(&self, store: &ParamStore, dy: &FeatureMatrix) -> FeatureMatrix {
        let mut dx = FeatureMatrix::zeros(dy.rows(), self.in_dim);
        gemm_nt(
            dy.rows(),
            self.out_dim,
            self.in_dim,
            dy.data(),
            self.weight(store),
            0.0,
            dx.data_mut(),
        );
        dx
    }

    pub fn backward(
        &self,
        store: &ParamStore,
        x: &FeatureMatrix,
        dy: &FeatureMatrix,
        grads: &mut ParamStore,
    ) -> FeatureMatrix {
        self.backward_params(x, dy, grads);
        self.backward_input(store, dy)
    }
}

/// Layer widths of a multilayer perceptron, input first.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MlpArch {
    pub dims: Vec<usize>,
    /// Apply the rectifier after the final layer too.
    pub activate_last: bool,
}

impl MlpArch {
    pub fn new(dims: &[usize], activate_last: bool) -> Self {
        Self {
            dims: dims.to_vec(),
            activate_last,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Linear>,
    pub activate_last: bool,
}

/// Per-layer inputs and pre-activations saved by [`Mlp::forward_cached`].
#[derive(Clone, Debug)]
pub struct MlpCache {
    inputs: Vec<FeatureMatrix>,
    pre: Vec<FeatureMatrix>,
}

impl Mlp {
    pub fn new(prefix: &str, arch: &MlpArch) -> Self {
        assert!(arch.dims.len() >= 2, "an MLP needs at least one layer");
        let layers = arch
            .dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(format!("{prefix}.{i}"), w[0], w[1]))
            .collect();
        Self {
            layers,
            activate_last: arch.activate_last,
        }
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().unwrap().out_dim
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) {
        for l in &self.layers {
            l.init(store, rng);
        }
    }

    /// Random init with the final layer zeroed, so the network starts at 0.
    pub fn init_zero_last(&self, store: &mut ParamStore, rng: &mut impl Rng) {
        let (last, rest) = self.layers.split_last().unwrap();
        for l in rest {
            l.init(store, rng);
        }
        last.init_zero(store);
    }

    pub fn check(&self, store: &ParamStore) -> Result<()> {
        self.layers.iter().try_for_each(|l| l.check(store))
    }

    fn activates(&self, layer: usize) -> bool {
        layer + 1 < self.layers.len() || self.activate_last
    }

    pub fn forward(&self, store: &ParamStore, x: &FeatureMatrix) -> FeatureMatrix {
        let mut h = x.clone();
        for (i, l) in self.layers.iter().enumerate() {
            h = l.forward(store, &h);
            if self.activates(i) {
                h.data_mut().iter_mut().for_each(|v| *v = leaky_relu(*v));
            }
        }
        h
    }

    pub fn forward_cached(&self, store: &ParamStore, x: &FeatureMatrix) -> (FeatureMatrix, MlpCache) {
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut h = x.clone();
        for (i, l) in self.layers.iter().enumerate() {
            let z = l.forward(store, &h);
            inputs.push(h);
            h = z.clone();
            if self.activates(i) {
                h.data_mut().iter_mut().for_each(|v| *v = leaky_relu(*v));
            }
            pre.push(z);
        }
        (h, MlpCache { inputs, pre })
    }

    /// Accumulates parameter gradients into `grads`; returns `dL/dx`.
    pub fn backward(
        &self,
        store: &ParamStore,
        cache: &MlpCache,
        dy: &FeatureMatrix,
        grads: &mut ParamStore,
    ) -> FeatureMatrix {
        let mut d = dy.clone();
        for (i, l) in self.layers.iter().enumerate().rev() {
            if self.activates(i) {
                for (g, p) in d.data_mut().iter_mut().zip(cache.pre[i].data()) {
                    *g *= leaky_relu_grad(*p);
                }
            }
            l.backward_params(&cache.inputs[i], &d, grads);
            d = l.backward_input(store, &d);
        }
        d
    }
}

/// Runs an MLP of the given architecture whose parameters live under `prefix`.
pub fn mlp_forward(
    params: &ParamStore,
    prefix: &str,
    input: &FeatureMatrix,
    arch: &MlpArch,
) -> Result<FeatureMatrix> {
    let mlp = Mlp::new(prefix, arch);
    mlp.check(params)?;
    if input.cols() != mlp.in_dim() {
        return Err(Error::Shape(format!(
            "input has {} columns, network expects {}",
            input.cols(),
            mlp.in_dim()
        )));
    }
    Ok(mlp.forward(params, input))
}

/// Reverse-mode gradients of [`mlp_forward`]: `(parameter grads, dL/dinput)`.
pub fn mlp_backward(
    params: &ParamStore,
    prefix: &str,
    input: &FeatureMatrix,
    arch: &MlpArch,
    upstream: &FeatureMatrix,
) -> Result<(ParamStore, FeatureMatrix)> {
    let mlp = Mlp::new(prefix, arch);
    mlp.check(params)?;
    if input.cols() != mlp.in_dim() || upstream.cols() != mlp.out_dim() || upstream.rows() != input.rows() {
        return Err(Error::Shape("input/upstream shapes do not fit the network".into()));
    }
    let (_, cache) = mlp.forward_cached(params, input);
    let mut grads = params.zeros_like();
    let dx = mlp.backward(params, &cache, upstream, &mut grads);
    Ok((grads, dx))
}
