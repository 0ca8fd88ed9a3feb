//! Simplified DGCNN patch descriptor.
//!
//! A stack of EdgeConv layers over each canonicalized patch. The neighbor
//! graph is built from coordinates before the first layer and rebuilt in
//! feature space before the last layer only; middle layers reuse the first
//! graph. A max-pool over the patch points yields one descriptor per patch.

use rand::Rng;

use super::edgeconv::{EdgeConv, EdgeConvCache, Graph};
use super::matrix::FeatureMatrix;
use super::params::ParamStore;
use crate::error::{Error, Result};
use crate::geometry::Vec3;

#[derive(Clone, Debug, PartialEq)]
pub struct DescriptorNet {
    pub layers: Vec<EdgeConv>,
    /// Neighbors per point inside a patch (self included).
    pub edge_k: usize,
}

#[derive(Clone, Debug)]
pub struct DescriptorCache {
    patch_size: usize,
    layers: Vec<EdgeConvCache>,
    /// Row of the last-layer output that won the pool, per (patch, channel).
    pool_argmax: Vec<usize>,
}

impl DescriptorNet {
    pub fn new(prefix: &str, widths: &[usize], edge_k: usize) -> Self {
        assert!(!widths.is_empty(), "descriptor needs at least one layer");
        let mut layers = Vec::with_capacity(widths.len());
        let mut cin = 3;
        for (i, &w) in widths.iter().enumerate() {
            layers.push(EdgeConv::new(format!("{prefix}.edge{i}"), cin, w));
            cin = w;
        }
        Self { layers, edge_k }
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().unwrap().out_dim()
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) {
        for l in &self.layers {
            l.init(store, rng);
        }
    }

    pub fn check(&self, store: &ParamStore) -> Result<()> {
        self.layers.iter().try_for_each(|l| l.check(store))
    }

    /// Descriptors for a stack of patches: `coords` holds `patch_size`
    /// consecutive rows per patch.
    pub fn forward(
        &self,
        store: &ParamStore,
        coords: &FeatureMatrix,
        patch_size: usize,
    ) -> Result<(FeatureMatrix, DescriptorCache)> {
        if coords.cols() != 3 {
            return Err(Error::Shape(format!(
                "patch coordinates need 3 columns, got {}",
                coords.cols()
            )));
        }
        if patch_size == 0 || !coords.rows().is_multiple_of(patch_size) {
            return Err(Error::Shape(format!(
                "{} rows do not split into patches of {patch_size}",
                coords.rows()
            )));
        }
        let first_graph = Graph::knn_blocks(coords, patch_size, self.edge_k)?;
        let last = self.layers.len() - 1;
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut h = coords.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            let (out, cache) = if i == last && last > 0 {
                let g = Graph::knn_blocks(&h, patch_size, self.edge_k)?;
                layer.forward(store, &h, &g)?
            } else {
                layer.forward(store, &h, &first_graph)?
            };
            caches.push(cache);
            h = out;
        }

        let patches = coords.rows() / patch_size;
        let dim = h.cols();
        let mut desc = FeatureMatrix::zeros(patches, dim);
        let mut pool_argmax = vec![0usize; patches * dim];
        for p in 0..patches {
            let base = p * patch_size;
            let best = desc.row_mut(p);
            best.copy_from_slice(h.row(base));
            let am = &mut pool_argmax[p * dim..(p + 1) * dim];
            am.iter_mut().for_each(|a| *a = base);
            for r in base + 1..base + patch_size {
                for ((b, a), v) in best.iter_mut().zip(am.iter_mut()).zip(h.row(r)) {
                    if *v > *b {
                        *b = *v;
                        *a = r;
                    }
                }
            }
        }
        Ok((
            desc,
            DescriptorCache {
                patch_size,
                layers: caches,
                pool_argmax,
            },
        ))
    }

    /// Accumulates parameter gradients; returns `dL/dcoords`.
    pub fn backward(
        &self,
        store: &ParamStore,
        cache: &DescriptorCache,
        d_desc: &FeatureMatrix,
        grads: &mut ParamStore,
    ) -> FeatureMatrix {
        let dim = self.out_dim();
        let rows = d_desc.rows() * cache.patch_size;
        let mut d = FeatureMatrix::zeros(rows, dim);
        for p in 0..d_desc.rows() {
            for c in 0..dim {
                let r = cache.pool_argmax[p * dim + c];
                d.data_mut()[r * dim + c] += d_desc.get(p, c);
            }
        }
        for (layer, lc) in self.layers.iter().zip(&cache.layers).rev() {
            d = layer.backward(store, lc, &d, grads);
        }
        d
    }
}

pub fn patches_to_matrix(patches: &[Vec<Vec3>]) -> FeatureMatrix {
    let rows: usize = patches.iter().map(Vec::len).sum();
    let mut data = Vec::with_capacity(rows * 3);
    for p in patches {
        for v in p {
            data.extend_from_slice(&[v.x, v.y, v.z]);
        }
    }
    FeatureMatrix::from_vec(rows, 3, data).expect("row count matches data")
}

/// Descriptor of a single canonicalized patch.
pub fn patch_descriptor(
    patch_coords: &[Vec3],
    params: &ParamStore,
    net: &DescriptorNet,
) -> Result<Vec<f64>> {
    net.check(params)?;
    let m = patches_to_matrix(&[patch_coords.to_vec()]);
    let (d, _) = net.forward(params, &m, patch_coords.len())?;
    Ok(d.into_vec())
}
