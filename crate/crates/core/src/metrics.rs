//! Completion metrics: L2 Chamfer distance, F-score, Earth Mover's distance
//! and unidirectional Hausdorff distance, plus report serialization.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{PointCloud, Vec3};

/// Default F-score threshold on squared distance.
pub const FSCORE_TAU: f64 = 0.001;
/// Largest cardinality solved exactly by [`emd`].
pub const EMD_EXACT_LIMIT: usize = 256;
pub const SINKHORN_EPSILON: f64 = 0.01;
pub const SINKHORN_ITERATIONS: usize = 500;

fn non_empty(c: &PointCloud, what: &str) -> Result<()> {
    if c.is_empty() {
        return Err(Error::Size(format!("{what} cloud is empty")));
    }
    Ok(())
}

/// Squared distance and index of the nearest point of `b` for every point of `a`.
pub fn nearest_sq(a: &[Vec3], b: &[Vec3]) -> Vec<(f64, usize)> {
    a.iter()
        .map(|p| {
            let mut best = (f64::INFINITY, 0);
            for (j, q) in b.iter().enumerate() {
                let d = (p - q).norm_squared();
                if d < best.0 {
                    best = (d, j);
                }
            }
            best
        })
        .collect()
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    s / n as f64
}

/// Average of the two directed mean squared nearest-neighbor distances.
pub fn chamfer_l2(a: &PointCloud, b: &PointCloud) -> Result<f64> {
    non_empty(a, "first")?;
    non_empty(b, "second")?;
    let ab = mean(nearest_sq(a.points(), b.points()).into_iter().map(|x| x.0));
    let ba = mean(nearest_sq(b.points(), a.points()).into_iter().map(|x| x.0));
    Ok(0.5 * (ab + ba))
}

/// [`chamfer_l2`] of `a` against `b` with its gradient with respect to `a`.
pub fn chamfer_l2_with_grad(a: &[Vec3], b: &[Vec3]) -> Result<(f64, Vec<Vec3>)> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Size("chamfer distance of an empty cloud".into()));
    }
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let mut grad = vec![Vec3::zeros(); a.len()];
    let mut ab = 0.0;
    for (i, (d, j)) in nearest_sq(a, b).into_iter().enumerate() {
        ab += d;
        grad[i] += (a[i] - b[j]) * (1.0 / na);
    }
    let mut ba = 0.0;
    for (j, (d, i)) in nearest_sq(b, a).into_iter().enumerate() {
        ba += d;
        grad[i] += (a[i] - b[j]) * (1.0 / nb);
    }
    Ok((0.5 * (ab / na + ba / nb), grad))
}

/// Harmonic mean of precision (fraction of `a` within squared distance `tau`
/// of `b`) and recall (the reverse).
pub fn fscore(a: &PointCloud, b: &PointCloud, tau: f64) -> Result<f64> {
    non_empty(a, "first")?;
    non_empty(b, "second")?;
    if !(tau > 0.0) {
        return Err(Error::Config(format!("F-score threshold must be positive, got {tau}")));
    }
    let frac = |x: &PointCloud, y: &PointCloud| {
        nearest_sq(x.points(), y.points()).iter().filter(|d| d.0 <= tau).count() as f64 / x.len() as f64
    };
    let (p, r) = (frac(a, b), frac(b, a));
    Ok(if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) })
}

/// Mean Euclidean distance from each partial point to the completed cloud.
pub fn uhd(partial: &PointCloud, completed: &PointCloud) -> Result<f64> {
    non_empty(partial, "partial")?;
    non_empty(completed, "completed")?;
    Ok(mean(nearest_sq(partial.points(), completed.points()).into_iter().map(|x| x.0.sqrt())))
}

fn distance_matrix(a: &[Vec3], b: &[Vec3]) -> Vec<f64> {
    let mut out = Vec::with_capacity(a.len() * b.len());
    for p in a {
        out.extend(b.iter().map(|q| (p - q).norm()));
    }
    out
}

/// Mean matched Euclidean distance under the optimal one-to-one assignment:
/// exact up to [`EMD_EXACT_LIMIT`] points, Sinkhorn approximation above.
pub fn emd(a: &PointCloud, b: &PointCloud) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Size(format!("EMD needs equal sizes, got {} and {}", a.len(), b.len())));
    }
    non_empty(a, "first")?;
    if a.len() <= EMD_EXACT_LIMIT {
        emd_exact(a, b)
    } else {
        emd_sinkhorn(a, b, SINKHORN_EPSILON, SINKHORN_ITERATIONS)
    }
}

pub fn emd_exact(a: &PointCloud, b: &PointCloud) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::Size("exact EMD needs two equal non-empty clouds".into()));
    }
    let n = a.len();
    let cost = distance_matrix(a.points(), b.points());
    let assignment = hungarian(&cost, n);
    Ok(assignment.iter().enumerate().map(|(i, &j)| cost[i * n + j]).sum::<f64>() / n as f64)
}

/// Minimum-cost perfect matching on a square `n x n` cost matrix (shortest
/// augmenting paths with potentials). Returns the column for each row.
pub fn hungarian(cost: &[f64], n: usize) -> Vec<usize> {
    // 1-based arrays; row 0 / column 0 are sentinels.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost[(i0 - 1) * n + (j - 1)] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assignment = vec![0; n];
    for j in 1..=n {
        assignment[p[j] - 1] = j - 1;
    }
    assignment
}

/// Entropic optimal transport between uniform measures: Sinkhorn scaling
/// on `exp(-C / epsilon)`, falling back to log-domain updates when the
/// kernel underflows. Returns the transport cost of the resulting plan.
pub fn emd_sinkhorn(a: &PointCloud, b: &PointCloud, epsilon: f64, iterations: usize) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::Size("Sinkhorn EMD needs two equal non-empty clouds".into()));
    }
    if !(epsilon > 0.0) {
        return Err(Error::Config(format!("Sinkhorn epsilon must be positive, got {epsilon}")));
    }
    let n = a.len();
    let cost = distance_matrix(a.points(), b.points());
    if let Some(v) = sinkhorn_standard(&cost, n, epsilon, iterations) {
        return Ok(v);
    }
    Ok(sinkhorn_log(&cost, n, epsilon, iterations))
}

fn sinkhorn_standard(cost: &[f64], n: usize, eps: f64, iterations: usize) -> Option<f64> {
    let kernel: Vec<f64> = cost.iter().map(|c| (-c / eps).exp()).collect();
    let w = 1.0 / n as f64;
    let mut u = vec![1.0; n];
    let mut v = vec![1.0; n];
    for _ in 0..iterations {
        for i in 0..n {
            let s: f64 = kernel[i * n..(i + 1) * n].iter().zip(&v).map(|(k, v)| k * v).sum();
            u[i] = w / s;
        }
        let mut s = vec![0.0; n];
        for i in 0..n {
            for (sj, k) in s.iter_mut().zip(&kernel[i * n..(i + 1) * n]) {
                *sj += k * u[i];
            }
        }
        for j in 0..n {
            v[j] = w / s[j];
        }
        if !u.iter().chain(&v).all(|x| x.is_finite() && *x > 0.0) {
            return None;
        }
    }
    let mut total = 0.0;
    for i in 0..n {
        for j in 0..n {
            total += u[i] * kernel[i * n + j] * v[j] * cost[i * n + j];
        }
    }
    // Normalize by transported mass so the value is a mean matched distance.
    let mass: f64 = (0..n)
        .map(|i| u[i] * kernel[i * n..(i + 1) * n].iter().zip(&v).map(|(k, v)| k * v).sum::<f64>())
        .sum();
    (total.is_finite() && mass > 0.0).then(|| total / mass)
}

fn log_sum_exp(v: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = v.clone().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + v.map(|x| (x - m).exp()).sum::<f64>().ln()
}

fn sinkhorn_log(cost: &[f64], n: usize, eps: f64, iterations: usize) -> f64 {
    let log_w = -(n as f64).ln();
    let mut f = vec![0.0; n];
    let mut g = vec![0.0; n];
    for _ in 0..iterations {
        for i in 0..n {
            f[i] = eps * log_w - eps * log_sum_exp((0..n).map(|j| (g[j] - cost[i * n + j]) / eps));
        }
        for j in 0..n {
            g[j] = eps * log_w - eps * log_sum_exp((0..n).map(|i| (f[i] - cost[i * n + j]) / eps));
        }
    }
    let mut total = 0.0;
    let mut mass = 0.0;
    for i in 0..n {
        for j in 0..n {
            let p = ((f[i] + g[j] - cost[i * n + j]) / eps).exp();
            total += p * cost[i * n + j];
            mass += p;
        }
    }
    total / mass
}

/// The four metrics for one completed shape.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub cd_l2: f64,
    pub fscore: f64,
    pub emd: f64,
    pub uhd: f64,
}

impl MetricReport {
    /// Metrics of `completed` against `truth`; UHD is measured from `partial`.
    /// EMD needs equal sizes, so the larger cloud is reduced by farthest
    /// point sampling first when they differ.
    pub fn evaluate(completed: &PointCloud, truth: &PointCloud, partial: &PointCloud) -> Result<Self> {
        let (a, b) = equalize(completed, truth)?;
        Ok(Self {
            cd_l2: chamfer_l2(completed, truth)?,
            fscore: fscore(completed, truth, FSCORE_TAU)?,
            emd: emd(&a, &b)?,
            uhd: uhd(partial, completed)?,
        })
    }

    pub fn is_valid(&self) -> bool {
        [self.cd_l2, self.fscore, self.emd, self.uhd].iter().all(|v| v.is_finite() && *v >= 0.0) && self.fscore <= 1.0
    }
}

fn equalize(a: &PointCloud, b: &PointCloud) -> Result<(PointCloud, PointCloud)> {
    use crate::geometry::farthest_point_sample;
    let n = a.len().min(b.len());
    let reduce = |c: &PointCloud| -> Result<PointCloud> {
        if c.len() == n {
            Ok(c.clone())
        } else {
            Ok(c.select(&farthest_point_sample(c, n, 0)?))
        }
    };
    Ok((reduce(a)?, reduce(b)?))
}

/// One evaluated sample.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub sample_id: String,
    pub category: String,
    #[serde(flatten)]
    pub metrics: MetricReport,
}

/// Formats with 6 significant digits.
pub fn sig6(v: f64) -> String {
    if v == 0.0 || !v.is_finite() {
        return format!("{v}");
    }
    let exp = v.abs().log10().floor() as i32;
    if (-4..6).contains(&exp) {
        let decimals = (5 - exp).max(0) as usize;
        let s = format!("{v:.decimals$}");
        if s.contains('.') {
            s.trim_end_matches('0').trim_end_matches('.').to_string()
        } else {
            s
        }
    } else {
        format!("{v:.5e}")
    }
}

pub const CSV_HEADER: &str = "sample_id,category,cd_l2,fscore,emd,uhd";

pub fn report_csv(rows: &[ReportRow]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in rows {
        let m = &r.metrics;
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            r.sample_id,
            r.category,
            sig6(m.cd_l2),
            sig6(m.fscore),
            sig6(m.emd),
            sig6(m.uhd)
        );
    }
    out
}

/// One JSON object per line, same fields and rounding as the CSV.
pub fn report_jsonl(rows: &[ReportRow]) -> String {
    let mut out = String::new();
    for r in rows {
        let m = &r.metrics;
        let _ = writeln!(
            out,
            "{{\"sample_id\":{},\"category\":{},\"cd_l2\":{},\"fscore\":{},\"emd\":{},\"uhd\":{}}}",
            serde_json::to_string(&r.sample_id).expect("string serializes"),
            serde_json::to_string(&r.category).expect("string serializes"),
            sig6(m.cd_l2),
            sig6(m.fscore),
            sig6(m.emd),
            sig6(m.uhd)
        );
    }
    out
}

/// Mean metrics per category plus an `overall` entry.
pub fn summarize(rows: &[ReportRow]) -> BTreeMap<String, (usize, MetricReport)> {
    let mut acc: BTreeMap<String, (usize, MetricReport)> = BTreeMap::new();
    for r in rows {
        for key in [r.category.as_str(), "overall"] {
            let e = acc.entry(key.to_string()).or_default();
            e.0 += 1;
            e.1.cd_l2 += r.metrics.cd_l2;
            e.1.fscore += r.metrics.fscore;
            e.1.emd += r.metrics.emd;
            e.1.uhd += r.metrics.uhd;
        }
    }
    for (n, m) in acc.values_mut() {
        let k = *n as f64;
        m.cd_l2 /= k;
        m.fscore /= k;
        m.emd /= k;
        m.uhd /= k;
    }
    acc
}

pub fn summary_csv(summary: &BTreeMap<String, (usize, MetricReport)>) -> String {
    let mut out = String::from("category,count,cd_l2,fscore,emd,uhd\n");
    for (cat, (n, m)) in summary {
        let _ = writeln!(out, "{cat},{n},{},{},{},{}", sig6(m.cd_l2), sig6(m.fscore), sig6(m.emd), sig6(m.uhd));
    }
    out
}
