use rand::Rng;

use super::matrix::FeatureMatrix;
use super::mlp::{Mlp, MlpArch, MlpCache};
use super::params::ParamStore;
use crate::error::{Error, Result};
use crate::geometry::PointCloud;

/// Shared per-point MLP, global max-pool, then an MLP head.
#[derive(Clone, Debug, PartialEq)]
pub struct PointNetEncoder {
    pub point_mlp: Mlp,
    pub head: Mlp,
}

#[derive(Clone, Debug)]
pub struct PointNetCache {
    point_cache: MlpCache,
    rows: usize,
    pool_argmax: Vec<usize>,
    head_cache: MlpCache,
}

impl PointNetEncoder {
    /// `point_widths` excludes the 3 input channels; the head maps the pooled
    /// feature through `head_widths` to `latent_dim`.
    pub fn new(prefix: &str, point_widths: &[usize], head_widths: &[usize], latent_dim: usize) -> Self {
        let mut pdims = vec![3];
        pdims.extend_from_slice(point_widths);
        let mut hdims = vec![*pdims.last().unwrap()];
        hdims.extend_from_slice(head_widths);
        hdims.push(latent_dim);
        Self {
            point_mlp: Mlp::new(&format!("{prefix}.point"), &MlpArch::new(&pdims, true)),
            head: Mlp::new(&format!("{prefix}.head"), &MlpArch::new(&hdims, false)),
        }
    }

    pub fn latent_dim(&self) -> usize {
        self.head.out_dim()
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) {
        self.point_mlp.init(store, rng);
        self.head.init(store, rng);
    }

    pub fn check(&self, store: &ParamStore) -> Result<()> {
        self.point_mlp.check(store)?;
        self.head.check(store)
    }

    pub fn encode(&self, store: &ParamStore, cloud: &PointCloud) -> Result<Vec<f64>> {
        Ok(self.forward_cached(store, cloud)?.0)
    }

    pub fn forward_cached(&self, store: &ParamStore, cloud: &PointCloud) -> Result<(Vec<f64>, PointNetCache)> {
        if cloud.is_empty() {
            return Err(Error::Size("cannot encode an empty cloud".into()));
        }
        let data: Vec<f64> = cloud.iter().flat_map(|p| [p.x, p.y, p.z]).collect();
        let x = FeatureMatrix::from_vec(cloud.len(), 3, data)?;
        let (h, point_cache) = self.point_mlp.forward_cached(store, &x);
        let dim = h.cols();
        let mut pooled = h.row(0).to_vec();
        let mut pool_argmax = vec![0usize; dim];
        for r in 1..h.rows() {
            for ((b, a), v) in pooled.iter_mut().zip(pool_argmax.iter_mut()).zip(h.row(r)) {
                if *v > *b {
                    *b = *v;
                    *a = r;
                }
            }
        }
        let g = FeatureMatrix::from_vec(1, dim, pooled)?;
        let (z, head_cache) = self.head.forward_cached(store, &g);
        Ok((
            z.into_vec(),
            PointNetCache {
                point_cache,
                rows: h.rows(),
                pool_argmax,
                head_cache,
            },
        ))
    }

    pub fn backward(&self, store: &ParamStore, cache: &PointNetCache, dz: &[f64], grads: &mut ParamStore) {
        let dz = FeatureMatrix::from_vec(1, dz.len(), dz.to_vec()).expect("latent width");
        let dg = self.head.backward(store, &cache.head_cache, &dz, grads);
        let dim = dg.cols();
        let mut dh = FeatureMatrix::zeros(cache.rows, dim);
        for c in 0..dim {
            dh.data_mut()[cache.pool_argmax[c] * dim + c] += dg.get(0, c);
        }
        self.point_mlp.backward(store, &cache.point_cache, &dh, grads);
    }
}

/// Latent code of a cloud under an encoder whose parameters live in `params`.
pub fn pointnet_encode(cloud: &PointCloud, params: &ParamStore, encoder: &PointNetEncoder) -> Result<Vec<f64>> {
    encoder.check(params)?;
    encoder.encode(params, cloud)
}
