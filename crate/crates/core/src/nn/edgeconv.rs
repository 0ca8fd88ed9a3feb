//! EdgeConv: per point `i`, `max_j lrelu(W [f_i ; f_j - f_i] + b)` over the
//! neighbors `j` of `i`.
//!
//! With a single affine layer the edge pre-activation splits into a point
//! term and a neighbor term, `(W_top - W_bot) f_i + b` plus `W_bot f_j`, and
//! the rectifier is monotone, so the max over neighbors is taken on the
//! neighbor term alone before activation. This is exact, including the
//! gradient (routed to the arg-max neighbor per channel).

use rand::Rng;

use super::matrix::{gemm_nn, gemm_nt, gemm_tn, FeatureMatrix};
use super::mlp::{leaky_relu, leaky_relu_grad, Linear};
use super::params::ParamStore;
use crate::error::{Error, Result};
use crate::geometry::knn_rows;

/// Fixed-degree neighbor lists over the rows of a feature matrix.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Graph {
    pub k: usize,
    /// `rows x k` neighbor row indices.
    pub neighbors: Vec<usize>,
}

impl Graph {
    pub fn new(k: usize, neighbors: Vec<usize>) -> Result<Self> {
        if k == 0 {
            return Err(Error::Size("empty neighborhood in graph".into()));
        }
        if !neighbors.len().is_multiple_of(k) {
            return Err(Error::Shape(format!(
                "{} neighbor entries is not a multiple of k = {k}",
                neighbors.len()
            )));
        }
        Ok(Self { k, neighbors })
    }

    pub fn rows(&self) -> usize {
        self.neighbors.len() / self.k
    }

    pub fn of(&self, row: usize) -> &[usize] {
        &self.neighbors[row * self.k..(row + 1) * self.k]
    }

    /// k-NN graph (self included) computed independently inside each
    /// consecutive block of `block` rows.
    pub fn knn_blocks(features: &FeatureMatrix, block: usize, k: usize) -> Result<Self> {
        if block == 0 || !features.rows().is_multiple_of(block) {
            return Err(Error::Shape(format!(
                "{} rows do not split into blocks of {block}",
                features.rows()
            )));
        }
        let k = k.min(block);
        let dim = features.cols();
        let mut neighbors = Vec::with_capacity(features.rows() * k);
        for start in (0..features.rows()).step_by(block) {
            let slab = &features.data()[start * dim..(start + block) * dim];
            for r in 0..block {
                neighbors.extend(knn_rows(slab, dim, r, k).into_iter().map(|j| j + start));
            }
        }
        Self::new(k, neighbors)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EdgeConv {
    pub linear: Linear,
}

/// Saved state for [`EdgeConv::backward`].
#[derive(Clone, Debug)]
pub struct EdgeConvCache {
    input: FeatureMatrix,
    pre: FeatureMatrix,
    /// Arg-max neighbor row per (row, channel).
    argmax: Vec<u32>,
}

impl EdgeConv {
    pub fn new(name: impl Into<String>, in_dim: usize, out_dim: usize) -> Self {
        Self {
            linear: Linear::new(name, 2 * in_dim, out_dim),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.linear.in_dim / 2
    }

    pub fn out_dim(&self) -> usize {
        self.linear.out_dim
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) {
        self.linear.init(store, rng);
    }

    pub fn check(&self, store: &ParamStore) -> Result<()> {
        self.linear.check(store)
    }

    /// `(W_top - W_bot, W_bot)`, each `in x out`.
    fn split_weights(&self, store: &ParamStore) -> (Vec<f64>, Vec<f64>) {
        let w = self.linear.weight(store);
        let half = self.in_dim() * self.out_dim();
        let (top, bot) = w.split_at(half);
        let diff = top.iter().zip(bot).map(|(t, b)| t - b).collect();
        (diff, bot.to_vec())
    }

    pub fn forward(
        &self,
        store: &ParamStore,
        x: &FeatureMatrix,
        graph: &Graph,
    ) -> Result<(FeatureMatrix, EdgeConvCache)> {
        if x.cols() != self.in_dim() {
            return Err(Error::Shape(format!(
                "edgeconv `{}` expects {} input channels, got {}",
                self.linear.name,
                self.in_dim(),
                x.cols()
            )));
        }
        if graph.rows() != x.rows() {
            return Err(Error::Shape(format!(
                "graph has {} rows for {} feature rows",
                graph.rows(),
                x.rows()
            )));
        }
        let (rows, cin, cout) = (x.rows(), self.in_dim(), self.out_dim());
        let (diff, bot) = self.split_weights(store);
        let bias = &store.tensor(&self.linear.bias_key()).data;

        let mut point_term = FeatureMatrix::zeros(rows, cout);
        for r in 0..rows {
            point_term.row_mut(r).copy_from_slice(bias);
        }
        gemm_nn(rows, cin, cout, x.data(), &diff, 1.0, point_term.data_mut());
        let mut nbr_term = FeatureMatrix::zeros(rows, cout);
        gemm_nn(rows, cin, cout, x.data(), &bot, 0.0, nbr_term.data_mut());

        let mut pre = point_term;
        let mut argmax = vec![0u32; rows * cout];
        for i in 0..rows {
            let nbrs = graph.of(i);
            let am = &mut argmax[i * cout..(i + 1) * cout];
            let mut best: Vec<f64> = nbr_term.row(nbrs[0]).to_vec();
            am.iter_mut().for_each(|a| *a = nbrs[0] as u32);
            for &j in &nbrs[1..] {
                for ((b, a), v) in best.iter_mut().zip(am.iter_mut()).zip(nbr_term.row(j)) {
                    if *v > *b {
                        *b = *v;
                        *a = j as u32;
                    }
                }
            }
            for (p, b) in pre.row_mut(i).iter_mut().zip(&best) {
                *p += b;
            }
        }
        let mut out = pre.clone();
        out.data_mut().iter_mut().for_each(|v| *v = leaky_relu(*v));
        Ok((
            out,
            EdgeConvCache {
                input: x.clone(),
                pre,
                argmax,
            },
        ))
    }

    pub fn backward(
        &self,
        store: &ParamStore,
        cache: &EdgeConvCache,
        dy: &FeatureMatrix,
        grads: &mut ParamStore,
    ) -> FeatureMatrix {
        let (rows, cin, cout) = (cache.input.rows(), self.in_dim(), self.out_dim());
        let mut d_point = dy.clone();
        for (g, p) in d_point.data_mut().iter_mut().zip(cache.pre.data()) {
            *g *= leaky_relu_grad(*p);
        }
        let mut d_nbr = FeatureMatrix::zeros(rows, cout);
        for i in 0..rows {
            for c in 0..cout {
                let j = cache.argmax[i * cout + c] as usize;
                let g = d_point.get(i, c);
                d_nbr.data_mut()[j * cout + c] += g;
            }
        }

        // dD = X^T d_point, dB = X^T d_nbr; W_top = D + B, W_bot = B.
        let mut d_diff = vec![0.0; cin * cout];
        gemm_tn(cin, rows, cout, cache.input.data(), d_point.data(), 0.0, &mut d_diff);
        let mut d_bot = vec![0.0; cin * cout];
        gemm_tn(cin, rows, cout, cache.input.data(), d_nbr.data(), 0.0, &mut d_bot);
        {
            let gw = &mut grads.tensor_mut(&self.linear.weight_key()).data;
            let (top, bot) = gw.split_at_mut(cin * cout);
            for (t, d) in top.iter_mut().zip(&d_diff) {
                *t += d;
            }
            for ((b, nb), d) in bot.iter_mut().zip(&d_bot).zip(&d_diff) {
                *b += nb - d;
            }
            let gb = &mut grads.tensor_mut(&self.linear.bias_key()).data;
            for r in 0..rows {
                for (g, d) in gb.iter_mut().zip(d_point.row(r)) {
                    *g += d;
                }
            }
        }

        let (diff, bot) = self.split_weights(store);
        let mut dx = FeatureMatrix::zeros(rows, cin);
        gemm_nt(rows, cout, cin, d_point.data(), &diff, 0.0, dx.data_mut());
        gemm_nt(rows, cout, cin, d_nbr.data(), &bot, 1.0, dx.data_mut());
        dx
    }
}

/// Single EdgeConv layer whose parameters live under `name`.
pub fn edgeconv(
    features: &FeatureMatrix,
    graph: &Graph,
    params: &ParamStore,
    name: &str,
    out_dim: usize,
) -> Result<FeatureMatrix> {
    let layer = EdgeConv::new(name, features.cols(), out_dim);
    layer.check(params)?;
    Ok(layer.forward(params, features, graph)?.0)
}
