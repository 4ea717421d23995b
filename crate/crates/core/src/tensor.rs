//! Dense double-precision tensors.
//!
//! Everything in this crate is small enough that a flat `Vec<f64>` with a
//! shape vector is the right representation. Rank is 1 (vectors, scalars are
//! length-1 vectors) or 2 (matrices, row-major).

/// A dense f64 tensor. Values are stored row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Self {
        let n: usize = shape.iter().product();
        assert_eq!(
            n,
            data.len(),
            "tensor shape {:?} does not match value count {}",
            shape,
            data.len()
        );
        Tensor { shape, data }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n: usize = shape.iter().product();
        Tensor { shape, data: vec![0.0; n] }
    }

    pub fn full(shape: Vec<usize>, value: f64) -> Self {
        let n: usize = shape.iter().product();
        Tensor { shape, data: vec![value; n] }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor { shape: vec![1], data: vec![value] }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Tensor { shape: vec![data.len()], data }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        Tensor::new(vec![rows, cols], data)
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let r = rows.len();
        assert!(r > 0, "from_rows: empty");
        let c = rows[0].len();
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            assert_eq!(row.len(), c, "from_rows: ragged rows");
            data.extend_from_slice(row);
        }
        Tensor::matrix(r, c, data)
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Tensor::zeros(vec![n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Row count; a vector is treated as a single column.
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            2 => self.shape[0],
            1 => self.shape[0],
            _ => panic!("rows: unsupported rank {:?}", self.shape),
        }
    }

    /// Column count; a vector is treated as a single column.
    pub fn cols(&self) -> usize {
        match self.shape.len() {
            2 => self.shape[1],
            1 => 1,
            _ => panic!("cols: unsupported rank {:?}", self.shape),
        }
    }

    pub fn is_matrix(&self) -> bool {
        self.shape.len() == 2
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols() + j]
    }

    pub fn at_mut(&mut self, i: usize, j: usize) -> &mut f64 {
        let c = self.cols();
        &mut self.data[i * c + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    /// Extracts the single value of a scalar tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item: tensor is not scalar-shaped");
        self.data[0]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff: shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_must_match_value_count() {
        let t = Tensor::matrix(2, 3, vec![0.0; 6]);
        assert_eq!(t.rows(), 2);
        assert_eq!(t.cols(), 3);
    }

    #[test]
    #[should_panic(expected = "does not match value count")]
    fn bad_shape_panics() {
        let _ = Tensor::matrix(2, 3, vec![0.0; 5]);
    }

    #[test]
    fn indexing_is_row_major() {
        let t = Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]);
        assert_eq!(t.at(0, 1), 2.0);
        assert_eq!(t.at(1, 0), 3.0);
        assert_eq!(t.row(1), &[3.0, 4.0]);
    }
}
