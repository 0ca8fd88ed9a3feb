//! Per-point noise predictor conditioned on a time embedding and the shape
//! latent by concatenation.
//!
//! The first layer sees `[x ; time ; z]`. The time/latent half is constant
//! across the points of one shape, so it is computed once per shape and
//! broadcast.

use rand::Rng;

use crate::nn::matrix::{gemm_nn, gemm_tn, FeatureMatrix};
use crate::nn::mlp::{leaky_relu, leaky_relu_grad, Linear, Mlp, MlpArch, MlpCache};
use crate::nn::ParamStore;
use crate::error::{Error, Result};

/// Transformer-style sinusoidal embedding of the integer step `t`.
pub fn time_embedding(t: usize, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let freq = (-(10_000f64.ln()) * i as f64 / half.max(1) as f64).exp();
        let arg = t as f64 * freq;
        out[i] = arg.sin();
        out[half + i] = arg.cos();
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct Denoiser {
    pub in_x: Linear,
    pub in_ctx: Linear,
    pub body: Mlp,
}

#[derive(Clone, Debug)]
pub struct DenoiserCache {
    x: FeatureMatrix,
    ctx: FeatureMatrix,
    groups: Vec<usize>,
    pre0: FeatureMatrix,
    body: MlpCache,
}

impl Denoiser {
    /// `widths` are the hidden widths; the output is 3 channels.
    pub fn new(prefix: &str, ctx_dim: usize, widths: &[usize]) -> Self {
        assert!(!widths.is_empty());
        let mut dims = widths.to_vec();
        dims.push(3);
        Self {
            in_x: Linear::new(format!("{prefix}.in_x"), 3, widths[0]),
            in_ctx: Linear::new(format!("{prefix}.in_ctx"), ctx_dim, widths[0]).without_bias(),
            body: Mlp::new(&format!("{prefix}.body"), &MlpArch::new(&dims, false)),
        }
    }

    pub fn ctx_dim(&self) -> usize {
        self.in_ctx.in_dim
    }

    /// Output layer starts at zero so the initial prediction is `0`.
    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) {
        self.in_x.init(store, rng);
        self.in_ctx.init(store, rng);
        self.body.init_zero_last(store, rng);
    }

    pub fn check(&self, store: &ParamStore) -> Result<()> {
        self.in_x.check(store)?;
        self.in_ctx.check(store)?;
        self.body.check(store)
    }

    /// `x` stacks the points of several shapes; `groups[s]` rows belong to
    /// shape `s`, whose context row is `ctx.row(s)`.
    pub fn forward(
        &self,
        store: &ParamStore,
        x: &FeatureMatrix,
        ctx: &FeatureMatrix,
        groups: &[usize],
    ) -> Result<(FeatureMatrix, DenoiserCache)> {
        if groups.len() != ctx.rows() || groups.iter().sum::<usize>() != x.rows() {
            return Err(Error::Shape("denoiser groups do not match inputs".into()));
        }
        if ctx.cols() != self.ctx_dim() || x.cols() != 3 {
            return Err(Error::Shape(format!(
                "denoiser expects 3 + {} input channels, got {} + {}",
                self.ctx_dim(),
                x.cols(),
                ctx.cols()
            )));
        }
        let width = self.in_x.out_dim;
        let mut shape_term = FeatureMatrix::zeros(ctx.rows(), width);
        gemm_nn(
            ctx.rows(),
            self.ctx_dim(),
            width,
            ctx.data(),
            self.in_ctx.weight(store),
            0.0,
            shape_term.data_mut(),
        );
        let mut pre0 = self.in_x.forward(store, x);
        let mut row = 0;
        for (s, &count) in groups.iter().enumerate() {
            let add = shape_term.row(s).to_vec();
            for r in row..row + count {
                for (p, a) in pre0.row_mut(r).iter_mut().zip(&add) {
                    *p += a;
                }
            }
            row += count;
        }
        let mut h0 = pre0.clone();
        h0.data_mut().iter_mut().for_each(|v| *v = leaky_relu(*v));
        let (out, body) = self.body.forward_cached(store, &h0);
        Ok((
            out,
            DenoiserCache {
                x: x.clone(),
                ctx: ctx.clone(),
                groups: groups.to_vec(),
                pre0,
                body,
            },
        ))
    }

    /// Accumulates parameter gradients; returns `dL/dctx`.
    pub fn backward(
        &self,
        store: &ParamStore,
        cache: &DenoiserCache,
        d_out: &FeatureMatrix,
        grads: &mut ParamStore,
    ) -> FeatureMatrix {
        let mut d0 = self.body.backward(store, &cache.body, d_out, grads);
        for (g, p) in d0.data_mut().iter_mut().zip(cache.pre0.data()) {
            *g *= leaky_relu_grad(*p);
        }
        self.in_x.backward_params(&cache.x, &d0, grads);

        let width = self.in_x.out_dim;
        let mut d_shape = FeatureMatrix::zeros(cache.groups.len(), width);
        let mut row = 0;
        for (s, &count) in cache.groups.iter().enumerate() {
            let acc = d_shape.row_mut(s);
            for r in row..row + count {
                for (a, g) in acc.iter_mut().zip(d0.row(r)) {
                    *a += g;
                }
            }
            row += count;
        }
        let gw = &mut grads.tensor_mut(&self.in_ctx.weight_key()).data;
        gemm_tn(
            self.ctx_dim(),
            cache.groups.len(),
            width,
            cache.ctx.data(),
            d_shape.data(),
            1.0,
            gw,
        );
        self.in_ctx.backward_input(store, &d_shape)
    }
}
