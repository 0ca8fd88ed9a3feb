//! Non-local similarity between refinement points and partial-input points,
//! and the top-k feature aggregation built on it.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{PointCloud, Vec3};
use crate::nn::matrix::gemm_nt;
use crate::nn::FeatureMatrix;

/// How the distance and descriptor terms are merged into one score.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SimilarityMode {
    /// `exp(-d^2) + exp(cos)`.
    #[default]
    Sum,
    /// `exp(-d^2) * exp(cos)`.
    Product,
    /// `exp(-d^2)` alone.
    EuclideanOnly,
    /// `exp(cos)` alone.
    FeatureOnly,
}

impl std::str::FromStr for SimilarityMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sum" => Ok(Self::Sum),
            "product" => Ok(Self::Product),
            "euclidean-only" => Ok(Self::EuclideanOnly),
            "feature-only" => Ok(Self::FeatureOnly),
            other => Err(Error::Config(format!(
                "unknown similarity mode {other:?}; expected sum, product, euclidean-only or feature-only"
            ))),
        }
    }
}

impl SimilarityMode {
    pub fn combine(self, sq_dist: f64, cosine: f64) -> f64 {
        match self {
            Self::Sum => (-sq_dist).exp() + cosine.exp(),
            Self::Product => (cosine - sq_dist).exp(),
            Self::EuclideanOnly => (-sq_dist).exp(),
            Self::FeatureOnly => cosine.exp(),
        }
    }

    pub fn uses_features(self) -> bool {
        self != Self::EuclideanOnly
    }
}

/// Row-major `rows x cols` score matrix: one row per refinement point, one
/// column per partial-input point.
#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityMatrix {
    rows: usize,
    cols: usize,
    values: Vec<f64>,
}

impl SimilarityMatrix {
    pub fn from_vec(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != rows * cols {
            return Err(Error::Shape(format!("{rows}x{cols} similarity needs {} values", rows * cols)));
        }
        Ok(Self { rows, cols, values })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.values[r * self.cols..(r + 1) * self.cols]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }
}

/// Squared Euclidean distance from `q` to every point of `partial`.
pub fn euclidean_similarity(q: &Vec3, partial: &PointCloud) -> Vec<f64> {
    partial.iter().map(|p| (q - p).norm_squared()).collect()
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb)
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Cosine between `fq` and every row of `fp`; zero-norm descriptors score 0.
pub fn feature_similarity(fq: &[f64], fp: &FeatureMatrix) -> Vec<f64> {
    (0..fp.rows()).map(|i| cosine(fq, fp.row(i))).collect()
}

/// Entrywise combination of squared distances and cosines.
pub fn combine_similarity(w1: &FeatureMatrix, w2: &FeatureMatrix, mode: SimilarityMode) -> Result<SimilarityMatrix> {
    if (w1.rows(), w1.cols()) != (w2.rows(), w2.cols()) {
        return Err(Error::Shape(format!(
            "distance block {}x{} vs cosine block {}x{}",
            w1.rows(),
            w1.cols(),
            w2.rows(),
            w2.cols()
        )));
    }
    let values = w1.data().iter().zip(w2.data()).map(|(&d, &c)| mode.combine(d, c)).collect();
    SimilarityMatrix::from_vec(w1.rows(), w1.cols(), values)
}

fn unit_rows(m: &FeatureMatrix) -> FeatureMatrix {
    let mut out = m.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let n = norm(row);
        if n > 0.0 {
            row.iter_mut().for_each(|v| *v /= n);
        }
    }
    out
}

/// All pairwise cosines between rows of `fq` and rows of `fp`.
pub fn cosine_matrix(fq: &FeatureMatrix, fp: &FeatureMatrix) -> FeatureMatrix {
    let (a, b) = (unit_rows(fq), unit_rows(fp));
    let mut out = FeatureMatrix::zeros(fq.rows(), fp.rows());
    gemm_nt(fq.rows(), fq.cols(), fp.rows(), a.data(), b.data(), 0.0, out.data_mut());
    out
}

/// All pairwise squared distances between `q` and `p`.
pub fn sq_distance_matrix(q: &[Vec3], p: &[Vec3]) -> FeatureMatrix {
    let mut out = FeatureMatrix::zeros(q.len(), p.len());
    for (r, a) in q.iter().enumerate() {
        for (c, b) in p.iter().enumerate() {
            out.set(r, c, (a - b).norm_squared());
        }
    }
    out
}

/// Full similarity matrix of refinement points against partial points.
/// Descriptors may be omitted when the mode does not use them.
pub fn similarity_matrix(
    q: &[Vec3],
    p: &[Vec3],
    fq: Option<&FeatureMatrix>,
    fp: Option<&FeatureMatrix>,
    mode: SimilarityMode,
) -> Result<SimilarityMatrix> {
    let w1 = sq_distance_matrix(q, p);
    let w2 = match (fq, fp) {
        (Some(fq), Some(fp)) => {
            if fq.rows() != q.len() || fp.rows() != p.len() {
                return Err(Error::Shape("descriptor rows do not match points".into()));
            }
            cosine_matrix(fq, fp)
        }
        _ if mode.uses_features() => {
            return Err(Error::Shape("similarity mode needs descriptors".into()));
        }
        _ => FeatureMatrix::zeros(q.len(), p.len()),
    };
    combine_similarity(&w1, &w2, mode)
}

/// Indices of the `k` largest entries, largest first; ties go to the lower
/// index.
pub fn topk_indices(row: &[f64], k: usize) -> Vec<usize> {
    let cmp = |a: &usize, b: &usize| row[*b].total_cmp(&row[*a]).then(a.cmp(b));
    let mut idx: Vec<usize> = (0..row.len()).collect();
    if k < idx.len() && k > 0 {
        idx.select_nth_unstable_by(k - 1, cmp);
        idx.truncate(k);
    }
    idx.truncate(k);
    idx.sort_unstable_by(cmp);
    idx
}

/// Fused features `[Fq, max-pool, avg-pool]` over the top-k partial
/// descriptors of each row, plus the selections used.
#[derive(Clone, Debug)]
pub struct Aggregation {
    pub fused: FeatureMatrix,
    pub selected: Vec<Vec<usize>>,
    /// Per (row, channel), the partial row that won the max-pool.
    pub max_source: Vec<usize>,
}

pub fn aggregate_topk(w: &SimilarityMatrix, fp: &FeatureMatrix, fq: &FeatureMatrix, k: usize) -> Result<Aggregation> {
    if k == 0 || k > w.cols() {
        return Err(Error::Size(format!("top-k of {k} outside 1..={}", w.cols())));
    }
    if fp.rows() != w.cols() || fq.rows() != w.rows() {
        return Err(Error::Shape(format!(
            "similarity {}x{} against {} query and {} partial descriptors",
            w.rows(),
            w.cols(),
            fq.rows(),
            fp.rows()
        )));
    }
    let (dq, dp) = (fq.cols(), fp.cols());
    let mut fused = FeatureMatrix::zeros(w.rows(), dq + 2 * dp);
    let mut selected = Vec::with_capacity(w.rows());
    let mut max_source = vec![0usize; w.rows() * dp];
    for r in 0..w.rows() {
        let sel = topk_indices(w.row(r), k);
        let out = fused.row_mut(r);
        out[..dq].copy_from_slice(fq.row(r));
        let (maxp, avgp) = out[dq..].split_at_mut(dp);
        maxp.copy_from_slice(fp.row(sel[0]));
        let src = &mut max_source[r * dp..(r + 1) * dp];
        src.iter_mut().for_each(|s| *s = sel[0]);
        for &i in &sel {
            for (c, &v) in fp.row(i).iter().enumerate() {
                if v > maxp[c] {
                    maxp[c] = v;
                    src[c] = i;
                }
                avgp[c] += v;
            }
        }
        avgp.iter_mut().for_each(|v| *v /= k as f64);
        selected.push(sel);
    }
    Ok(Aggregation {
        fused,
        selected,
        max_source,
    })
}

impl Aggregation {
    /// Splits a gradient on the fused features into gradients on `fq` and
    /// `fp` (the selections are treated as constants).
    pub fn backward(&self, d_fused: &FeatureMatrix, dq: usize, fp_rows: usize) -> (FeatureMatrix, FeatureMatrix) {
        let dp = (d_fused.cols() - dq) / 2;
        let mut d_fq = FeatureMatrix::zeros(d_fused.rows(), dq);
        let mut d_fp = FeatureMatrix::zeros(fp_rows, dp);
        for r in 0..d_fused.rows() {
            let g = d_fused.row(r);
            d_fq.row_mut(r).copy_from_slice(&g[..dq]);
            for c in 0..dp {
                let i = self.max_source[r * dp + c];
                d_fp.data_mut()[i * dp + c] += g[dq + c];
            }
            let k = self.selected[r].len() as f64;
            for &i in &self.selected[r] {
                let row = d_fp.row_mut(i);
                for c in 0..dp {
                    row[c] += g[dq + dp + c] / k;
                }
            }
        }
        (d_fq, d_fp)
    }
}

/// Row of `w` min-max normalized to `[0, 1]`; a constant row maps to zeros.
pub fn similarity_heatmap(point_index: usize, w: &SimilarityMatrix) -> Result<Vec<f64>> {
    if point_index >= w.rows() {
        return Err(Error::Size(format!("row {point_index} out of range for {} rows", w.rows())));
    }
    let row = w.row(point_index);
    let lo = row.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi <= lo {
        return Ok(vec![0.0; row.len()]);
    }
    Ok(row.iter().map(|v| (v - lo) / (hi - lo)).collect())
}
