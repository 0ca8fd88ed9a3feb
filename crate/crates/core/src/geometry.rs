//! Deterministic geometric kernels: point clouds, sampling, neighborhoods,
//! normals, and the rotations/reflections used to canonicalize patches.
//!
//! Everything here is a pure function of its inputs. Ties in sampling and
//! neighbor queries are broken by the lowest index so results are stable
//! across runs.

use std::cmp::Ordering;

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Vec3 = Vector3<f64>;
pub type Mat3 = Matrix3<f64>;

/// Cross-product norm below which a normal counts as parallel to `e_z`.
const POLE_EPS: f64 = 1e-8;

/// Which cloud a point came from when the partial input and the coarse
/// generation are concatenated.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Origin {
    Partial,
    Coarse,
}

/// An ordered set of finite 3D positions with optional per-point origin tags.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PointCloud {
    points: Vec<Vec3>,
    tags: Option<Vec<Origin>>,
}

impl PointCloud {
    pub fn new(points: Vec<Vec3>) -> Result<Self> {
        if let Some(i) = points.iter().position(|p| !p.iter().all(|c| c.is_finite())) {
            return Err(Error::NonFinite(format!("point {i} has a non-finite coordinate")));
        }
        Ok(Self { points, tags: None })
    }

    pub fn with_tags(points: Vec<Vec3>, tags: Vec<Origin>) -> Result<Self> {
        if tags.len() != points.len() {
            return Err(Error::Size(format!(
                "{} tags for {} points",
                tags.len(),
                points.len()
            )));
        }
        let mut cloud = Self::new(points)?;
        cloud.tags = Some(tags);
        Ok(cloud)
    }

    pub fn from_rows(rows: &[[f64; 3]]) -> Result<Self> {
        Self::new(rows.iter().map(|r| Vec3::new(r[0], r[1], r[2])).collect())
    }

    /// Builds a cloud from points already known to be finite.
    pub(crate) fn from_trusted(points: Vec<Vec3>) -> Self {
        debug_assert!(points.iter().all(|p| p.iter().all(|c| c.is_finite())));
        Self { points, tags: None }
    }

    /// Concatenates `partial` then `coarse`, tagging each point with its origin.
    pub fn concat_tagged(partial: &PointCloud, coarse: &PointCloud) -> Self {
        let mut points = Vec::with_capacity(partial.len() + coarse.len());
        points.extend_from_slice(&partial.points);
        points.extend_from_slice(&coarse.points);
        let mut tags = vec![Origin::Partial; partial.len()];
        tags.resize(partial.len() + coarse.len(), Origin::Coarse);
        Self {
            points,
            tags: Some(tags),
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[Vec3] {
        &self.points
    }

    pub fn tags(&self) -> Option<&[Origin]> {
        self.tags.as_deref()
    }

    pub fn into_points(self) -> Vec<Vec3> {
        self.points
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Vec3> {
        self.points.iter()
    }

    /// Gathers the given indices, carrying tags along.
    pub fn select(&self, indices: &[usize]) -> Self {
        Self {
            points: indices.iter().map(|&i| self.points[i]).collect(),
            tags: self
                .tags
                .as_ref()
                .map(|t| indices.iter().map(|&i| t[i]).collect()),
        }
    }

    pub fn translated(&self, offset: &Vec3) -> Self {
        Self {
            points: self.points.iter().map(|p| p + offset).collect(),
            tags: self.tags.clone(),
        }
    }

    pub fn transformed(&self, rotation: &Mat3, offset: &Vec3) -> Self {
        Self {
            points: self.points.iter().map(|p| rotation * p + offset).collect(),
            tags: self.tags.clone(),
        }
    }

    pub fn centroid(&self) -> Vec3 {
        centroid(&self.points)
    }
}

impl std::ops::Index<usize> for PointCloud {
    type Output = Vec3;

    fn index(&self, index: usize) -> &Vec3 {
        &self.points[index]
    }
}

impl<'a> IntoIterator for &'a PointCloud {
    type Item = &'a Vec3;
    type IntoIter = std::slice::Iter<'a, Vec3>;

    fn into_iter(self) -> Self::IntoIter {
        self.points.iter()
    }
}

/// The `k` nearest neighbors of a center point, expressed relative to their
/// centroid, with an estimated unit normal.
#[derive(Clone, Debug, PartialEq)]
pub struct Patch {
    pub center_index: usize,
    pub neighbor_indices: Vec<usize>,
    pub local_coords: Vec<Vec3>,
    pub normal: Vec3,
}

/// Per-patch canonicalization record: normal alignment `r1`, in-plane
/// rotation `r2`, and the angle `psi` of the reflection plane normal.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RigidFrame {
    pub r1: Mat3,
    pub r2: Mat3,
    pub psi: f64,
}

impl RigidFrame {
    pub fn identity() -> Self {
        Self {
            r1: Mat3::identity(),
            r2: Mat3::identity(),
            psi: 0.0,
        }
    }

    /// The rotation part of the canonicalization, `r2 * r1`.
    pub fn rotation(&self) -> Mat3 {
        self.r2 * self.r1
    }

    pub fn forward_rotate(&self, v: &Vec3) -> Vec3 {
        self.r2 * (self.r1 * v)
    }

    /// Full canonical transform: both rotations, then the reflection.
    pub fn apply(&self, v: &Vec3) -> Vec3 {
        reflect_point(&self.forward_rotate(v), self.psi)
    }
}

pub fn centroid(points: &[Vec3]) -> Vec3 {
    if points.is_empty() {
        return Vec3::zeros();
    }
    points.iter().fold(Vec3::zeros(), |acc, p| acc + p) / points.len() as f64
}

fn by_distance_then_index(a: &(f64, usize), b: &(f64, usize)) -> Ordering {
    a.0.total_cmp(&b.0).then(a.1.cmp(&b.1))
}

/// Indices of the `k` points nearest to `query`, ascending by distance with
/// ties broken by index. Callers guarantee `1 <= k <= points.len()`.
pub(crate) fn knn_slice(points: &[Vec3], query: &Vec3, k: usize) -> Vec<usize> {
    let mut keyed: Vec<(f64, usize)> = points
        .iter()
        .enumerate()
        .map(|(i, p)| ((p - query).norm_squared(), i))
        .collect();
    if k < keyed.len() {
        keyed.select_nth_unstable_by(k - 1, by_distance_then_index);
        keyed.truncate(k);
    }
    keyed.sort_unstable_by(by_distance_then_index);
    // Not into_iter: in-place collection would keep the full-length buffer alive.
    keyed.iter().map(|&(_, i)| i).collect()
}

/// Same contract as [`knn_slice`] over rows of a row-major feature block.
pub(crate) fn knn_rows(data: &[f64], dim: usize, query_row: usize, k: usize) -> Vec<usize> {
    let q = &data[query_row * dim..(query_row + 1) * dim];
    let mut keyed: Vec<(f64, usize)> = data
        .chunks_exact(dim)
        .enumerate()
        .map(|(r, row)| (sq_dist(row, q), r))
        .collect();
    if k < keyed.len() && keyed.len() > 64 {
        keyed.select_nth_unstable_by(k - 1, by_distance_then_index);
        keyed.truncate(k);
    }
    keyed.sort_unstable_by(by_distance_then_index);
    keyed.truncate(k);
    // Not into_iter: in-place collection would keep the full-length buffer alive.
    keyed.iter().map(|&(_, i)| i).collect()
}

/// Squared distance with four independent accumulators so it vectorizes.
fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let (ac, bc) = (a.chunks_exact(4), b.chunks_exact(4));
    let tail: f64 = ac.remainder().iter().zip(bc.remainder()).map(|(x, y)| (x - y) * (x - y)).sum();
    for (x, y) in ac.zip(bc) {
        for i in 0..4 {
            let d = x[i] - y[i];
            acc[i] += d * d;
        }
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

pub fn knn(cloud: &PointCloud, query: &Vec3, k: usize) -> Result<Vec<usize>> {
    if k == 0 || k > cloud.len() {
        return Err(Error::Size(format!(
            "k = {k} outside 1..={} for knn",
            cloud.len()
        )));
    }
    Ok(knn_slice(cloud.points(), query, k))
}

/// Greedy max-min subset selection starting at `start`.
///
/// Each step picks the unselected point with the largest distance to its
/// nearest selected point; ties go to the lowest index.
pub fn farthest_point_sample(cloud: &PointCloud, n: usize, start: usize) -> Result<Vec<usize>> {
    let total = cloud.len();
    if n == 0 || n > total {
        return Err(Error::Size(format!("cannot sample {n} of {total} points")));
    }
    if start >= total {
        return Err(Error::Size(format!(
            "start index {start} out of range for {total} points"
        )));
    }
    let points = cloud.points();
    let mut min_dist = vec![f64::INFINITY; total];
    let mut selected = Vec::with_capacity(n);
    let mut current = start;
    for _ in 0..n {
        selected.push(current);
        // Selected points are parked below every real distance.
        min_dist[current] = -1.0;
        let anchor = points[current];
        let mut best = usize::MAX;
        let mut best_dist = f64::NEG_INFINITY;
        for (i, p) in points.iter().enumerate() {
            if min_dist[i] < 0.0 {
                continue;
            }
            let d = (p - anchor).norm_squared();
            if d < min_dist[i] {
                min_dist[i] = d;
            }
            if min_dist[i] > best_dist {
                best_dist = min_dist[i];
                best = i;
            }
        }
        if best == usize::MAX {
            break;
        }
        current = best;
    }
    Ok(selected)
}

pub fn extract_patch(cloud: &PointCloud, center: usize, k: usize) -> Result<Patch> {
    if center >= cloud.len() {
        return Err(Error::Size(format!(
            "center {center} out of range for {} points",
            cloud.len()
        )));
    }
    if k < 3 {
        return Err(Error::Size(format!(
            "patch too small for normal: k = {k}, need at least 3"
        )));
    }
    let neighbor_indices = knn(cloud, &cloud[center], k)?;
    let members: Vec<Vec3> = neighbor_indices.iter().map(|&i| cloud[i]).collect();
    let c = centroid(&members);
    let local_coords: Vec<Vec3> = members.iter().map(|p| p - c).collect();
    let normal = estimate_normal(&local_coords)?;
    Ok(Patch {
        center_index: center,
        neighbor_indices,
        local_coords,
        normal,
    })
}

/// Smallest-variance direction of a point set, sign-normalized so that the
/// largest-magnitude component is positive.
pub fn estimate_normal(coords: &[Vec3]) -> Result<Vec3> {
    if coords.len() < 3 {
        return Err(Error::Size(format!(
            "patch too small for normal: {} points",
            coords.len()
        )));
    }
    let cov = covariance(coords);
    let scale = cov.abs().max();
    if scale == 0.0 || !scale.is_finite() {
        return Err(Error::Degenerate(
            "all patch points coincide; normal undefined".into(),
        ));
    }
    let normal = smallest_eigenvector(&(cov / scale));
    Ok(orient_normal(normal))
}

/// Unbiased covariance of centered coordinates.
fn covariance(coords: &[Vec3]) -> Mat3 {
    let mean = centroid(coords);
    let mut cov = Mat3::zeros();
    for p in coords {
        let d = p - mean;
        cov += d * d.transpose();
    }
    cov / (coords.len() - 1) as f64
}

/// Eigenvalues of a symmetric 3x3 matrix in ascending order (trigonometric
/// closed form).
pub(crate) fn symmetric_eigenvalues(a: &Mat3) -> [f64; 3] {
    let p1 = a[(0, 1)].powi(2) + a[(0, 2)].powi(2) + a[(1, 2)].powi(2);
    if p1 == 0.0 {
        let mut d = [a[(0, 0)], a[(1, 1)], a[(2, 2)]];
        d.sort_by(f64::total_cmp);
        return d;
    }
    let q = a.trace() / 3.0;
    let p2 = (a[(0, 0)] - q).powi(2) + (a[(1, 1)] - q).powi(2) + (a[(2, 2)] - q).powi(2) + 2.0 * p1;
    let p = (p2 / 6.0).sqrt();
    let b = (a - Mat3::identity() * q) / p;
    let r = (b.determinant() / 2.0).clamp(-1.0, 1.0);
    let phi = r.acos() / 3.0;
    let largest = q + 2.0 * p * phi.cos();
    let smallest = q + 2.0 * p * (phi + 2.0 * std::f64::consts::PI / 3.0).cos();
    let middle = 3.0 * q - largest - smallest;
    [smallest, middle, largest]
}

/// Unit null vector of `a - lambda I` for a simple eigenvalue, taken as the
/// largest cross product of two rows.
fn eigenvector_for(a: &Mat3, lambda: f64) -> Option<Vec3> {
    let m = a - Mat3::identity() * lambda;
    let rows = [
        m.row(0).transpose(),
        m.row(1).transpose(),
        m.row(2).transpose(),
    ];
    let candidates = [
        rows[0].cross(&rows[1]),
        rows[0].cross(&rows[2]),
        rows[1].cross(&rows[2]),
    ];
    let best = candidates
        .iter()
        .max_by(|x, y| x.norm_squared().total_cmp(&y.norm_squared()))?;
    let norm = best.norm();
    (norm > 0.0).then(|| best / norm)
}

fn smallest_eigenvector(a: &Mat3) -> Vec3 {
    let [l1, l2, l3] = symmetric_eigenvalues(a);
    let tol = 1e-12 * l3.abs().max(f64::MIN_POSITIVE);
    let basis = [Vec3::x(), Vec3::y(), Vec3::z()];
    if l3 - l1 <= tol {
        // Isotropic spread: every direction is an eigenvector.
        return basis[0];
    }
    if l2 - l1 > tol {
        if let Some(v) = eigenvector_for(a, l1) {
            return v;
        }
    }
    // Smallest eigenvalue is (numerically) double: the eigenspace is the
    // plane orthogonal to the dominant direction. Project the fixed basis
    // onto it and take the first usable vector.
    let dominant = eigenvector_for(a, l3).unwrap_or(basis[0]);
    for e in basis {
        let proj = e - dominant * dominant.dot(&e);
        let norm = proj.norm();
        if norm > 1e-3 {
            return proj / norm;
        }
    }
    basis[0]
}

fn orient_normal(n: Vec3) -> Vec3 {
    let mut axis = 0;
    for i in 1..3 {
        if n[i].abs() > n[axis].abs() {
            axis = i;
        }
    }
    if n[axis] < 0.0 {
        -n
    } else {
        n
    }
}

/// Cross-product matrix `[k]x` with `[k]x v = k x v`.
pub fn skew(k: &Vec3) -> Mat3 {
    Mat3::new(0.0, -k.z, k.y, k.z, 0.0, -k.x, -k.y, k.x, 0.0)
}

/// Rodrigues rotation `cos(t) I + (1 - cos(t)) k k^T + sin(t) [k]x`.
pub fn rodrigues(axis: &Vec3, cos_t: f64, sin_t: f64) -> Mat3 {
    Mat3::identity() * cos_t + axis * axis.transpose() * (1.0 - cos_t) + skew(axis) * sin_t
}

/// Rotation taking the unit vector `n` onto `e_z`.
///
/// The axis is `n x e_z` normalized; the angle is `acos(n . e_z)`, evaluated
/// through its sine/cosine pair for accuracy near the poles. `n` parallel to
/// `e_z` gives the identity, antiparallel gives a half turn about `e_x`.
pub fn rotation_to_z(n: &Vec3) -> Mat3 {
    let n = n.normalize();
    let ez = Vec3::z();
    let cross = n.cross(&ez);
    let sin_t = cross.norm();
    if sin_t < POLE_EPS {
        return if n.z > 0.0 {
            Mat3::identity()
        } else {
            Mat3::new(1.0, 0.0, 0.0, 0.0, -1.0, 0.0, 0.0, 0.0, -1.0)
        };
    }
    rodrigues(&(cross / sin_t), n.dot(&ez), sin_t)
}

pub fn rotation_about_z(phi: f64) -> Mat3 {
    rotation_about_z_cs(phi.cos(), phi.sin())
}

pub(crate) fn rotation_about_z_cs(c: f64, s: f64) -> Mat3 {
    Mat3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0)
}

/// Normal of the reflection plane parameterized by `psi`.
pub fn plane_normal(psi: f64) -> Vec3 {
    Vec3::new(psi.cos(), psi.sin(), 0.0)
}

pub(crate) fn reflect_point(p: &Vec3, psi: f64) -> Vec3 {
    let n = plane_normal(psi);
    p - n * (2.0 * n.dot(p))
}

/// Reflects every point across the plane through the origin with normal
/// `(cos psi, sin psi, 0)`.
pub fn reflect_about_plane(points: &[Vec3], psi: f64) -> Vec<Vec3> {
    points.iter().map(|p| reflect_point(p, psi)).collect()
}

/// Maps an offset predicted in the rotated frame back to world coordinates:
/// `(r2 r1)^-1 offset = r1^T r2^T offset`. The reflection is not undone.
pub fn invert_frame(offset: &Vec3, frame: &RigidFrame) -> Vec3 {
    frame.r1.transpose() * (frame.r2.transpose() * offset)
}
