use crate::error::{Error, Result};
use crate::geometry::Vec3;

/// Dense row-major matrix of 64-bit reals.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct FeatureMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl FeatureMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows * cols != data.len() {
            return Err(Error::Shape(format!(
                "{rows}x{cols} matrix needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Shape("ragged rows".into()));
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data: rows.concat(),
        })
    }

    /// One row per point.
    pub fn from_points(points: &[Vec3]) -> Self {
        Self {
            rows: points.len(),
            cols: 3,
            data: points.iter().flat_map(|p| [p.x, p.y, p.z]).collect(),
        }
    }

    /// Inverse of [`FeatureMatrix::from_points`]; requires 3 columns.
    pub fn to_points(&self) -> Vec<Vec3> {
        assert_eq!(self.cols, 3, "points need 3 columns");
        self.data.chunks_exact(3).map(|c| Vec3::new(c[0], c[1], c[2])).collect()
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// `self * other`.
    pub fn matmul(&self, other: &FeatureMatrix) -> Result<FeatureMatrix> {
        if self.cols != other.rows {
            return Err(Error::Shape(format!(
                "cannot multiply {}x{} by {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = FeatureMatrix::zeros(self.rows, other.cols);
        gemm_nn(self.rows, self.cols, other.cols, &self.data, &other.data, 0.0, &mut out.data);
        Ok(out)
    }

    /// Horizontal concatenation of equally tall blocks.
    pub fn hcat(blocks: &[&FeatureMatrix]) -> Result<FeatureMatrix> {
        let rows = blocks.first().map_or(0, |b| b.rows);
        if blocks.iter().any(|b| b.rows != rows) {
            return Err(Error::Shape("hcat blocks differ in row count".into()));
        }
        let cols: usize = blocks.iter().map(|b| b.cols).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for b in blocks {
                data.extend_from_slice(b.row(r));
            }
        }
        Ok(FeatureMatrix { rows, cols, data })
    }

    /// Splits columns into consecutive blocks of the given widths.
    pub fn hsplit(&self, widths: &[usize]) -> Vec<FeatureMatrix> {
        debug_assert_eq!(widths.iter().sum::<usize>(), self.cols);
        let mut out: Vec<FeatureMatrix> = widths
            .iter()
            .map(|&w| FeatureMatrix::zeros(self.rows, w))
            .collect();
        for r in 0..self.rows {
            let mut start = 0;
            let row = self.row(r);
            for (block, &w) in out.iter_mut().zip(widths) {
                block.row_mut(r).copy_from_slice(&row[start..start + w]);
                start += w;
            }
        }
        out
    }

    pub fn gather_rows(&self, indices: &[usize]) -> FeatureMatrix {
        let mut data = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        FeatureMatrix {
            rows: indices.len(),
            cols: self.cols,
            data,
        }
    }

    pub fn add_assign(&mut self, other: &FeatureMatrix) {
        debug_assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

/// `c = a * b + beta * c` for row-major `a: m x k`, `b: k x n`, `c: m x n`.
pub(crate) fn gemm_nn(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], beta: f64, c: &mut [f64]) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: bounds asserted above; strides describe dense row-major blocks.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            k as isize,
            1,
            b.as_ptr(),
            n as isize,
            1,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// `c = a^T * b + beta * c` for row-major `a: k x m`, `b: k x n`, `c: m x n`.
pub(crate) fn gemm_tn(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], beta: f64, c: &mut [f64]) {
    assert!(a.len() >= k * m && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: as above; `a` is read through transposed strides.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            1,
            m as isize,
            b.as_ptr(),
            n as isize,
            1,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// `c = a * b^T + beta * c` for row-major `a: m x k`, `b: n x k`, `c: m x n`.
pub(crate) fn gemm_nt(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], beta: f64, c: &mut [f64]) {
    assert!(a.len() >= m * k && b.len() >= n * k && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: as above; `b` is read through transposed strides.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            k as isize,
            1,
            b.as_ptr(),
            1,
            k as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_variants_agree_with_loops() {
        let a = FeatureMatrix::from_rows(&[vec![1., 2., 3.], vec![4., 5., 6.]]).unwrap();
        let b = FeatureMatrix::from_rows(&[vec![1., 0.], vec![0., 1.], vec![2., -1.]]).unwrap();
        let c = a.matmul(&b).unwrap();
        assert_eq!(c.data(), &[7., -1., 16., -1.]);

        // a^T (3x2) * a (2x3)
        let mut ata = vec![0.0; 9];
        gemm_tn(3, 2, 3, a.data(), a.data(), 0.0, &mut ata);
        assert_eq!(ata, vec![17., 22., 27., 22., 29., 36., 27., 36., 45.]);

        // a (2x3) * a^T (3x2)
        let mut aat = vec![0.0; 4];
        gemm_nt(2, 3, 2, a.data(), a.data(), 0.0, &mut aat);
        assert_eq!(aat, vec![14., 32., 32., 77.]);
    }

    #[test]
    fn shape_errors() {
        assert!(FeatureMatrix::from_vec(2, 2, vec![0.0; 3]).is_err());
        let a = FeatureMatrix::zeros(2, 3);
        assert!(a.matmul(&FeatureMatrix::zeros(2, 3)).is_err());
        assert!(FeatureMatrix::from_rows(&[vec![1.0], vec![1.0, 2.0]]).is_err());
    }

    #[test]
    fn hcat_and_hsplit_invert() {
        let a = FeatureMatrix::from_rows(&[vec![1., 2.], vec![3., 4.]]).unwrap();
        let b = FeatureMatrix::from_rows(&[vec![5.], vec![6.]]).unwrap();
        let c = FeatureMatrix::hcat(&[&a, &b]).unwrap();
        assert_eq!(c.data(), &[1., 2., 5., 3., 4., 6.]);
        let parts = c.hsplit(&[2, 1]);
        assert_eq!(parts[0], a);
        assert_eq!(parts[1], b);
    }
}
