use crate::error::{Error, Result};

/// Dense row-major array of `f64` with an optional gradient slot.
///
/// Everything the tape computes is treated as a matrix: the last dimension is
/// the column count and all leading dimensions fold into rows.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.iter().any(|&d| d == 0) {
            return Err(Error::shape(format!("invalid shape {shape:?}")));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape(format!(
                "shape {shape:?} holds {n} values but {} were given",
                data.len()
            )));
        }
        Ok(Tensor {
            shape,
            data,
            grad: None,
            requires_grad: false,
        })
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor::new(shape, vec![0.0; n]).expect("zeros: shape must be non-empty")
    }

    pub fn scalar(v: f64) -> Self {
        Tensor::new(vec![1, 1], vec![v]).unwrap()
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map(|r| r.len()).unwrap_or(0);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::shape("ragged rows"));
        }
        Self::matrix(rows.len(), cols, rows.concat())
    }

    /// Marks the tensor as a differentiable leaf.
    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn cols(&self) -> usize {
        *self.shape.last().unwrap()
    }

    pub fn rows(&self) -> usize {
        self.data.len() / self.cols()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols() + j]
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn grad_mut(&mut self) -> &mut Vec<f64> {
        let n = self.data.len();
        self.grad.get_or_insert_with(|| vec![0.0; n])
    }

    /// Adds `g` into the gradient buffer, allocating it on first use.
    pub fn accumulate_grad(&mut self, g: &[f64]) -> Result<()> {
        if g.len() != self.data.len() {
            return Err(Error::shape(format!(
                "gradient of length {} for tensor of shape {:?}",
                g.len(),
                self.shape
            )));
        }
        for (a, b) in self.grad_mut().iter_mut().zip(g) {
            *a += b;
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = self.grad.as_mut() {
            g.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
            && self
                .grad
                .as_ref()
                .is_none_or(|g| g.iter().all(|v| v.is_finite()))
    }

    /// Row-wise softmax of `self / temperature` along the last axis.
    pub fn softmax_rows(&self, temperature: f64) -> Result<Tensor> {
        check_temperature(temperature)?;
        let c = self.cols();
        let mut out = self.data.clone();
        for row in out.chunks_mut(c) {
            softmax_in_place(row, temperature, None)?;
        }
        Tensor::new(self.shape.clone(), out)
    }
}

pub(crate) fn check_temperature(t: f64) -> Result<()> {
    if !(t > 0.0) || !t.is_finite() {
        return Err(Error::Parameter(format!(
            "temperature must be positive and finite, got {t}"
        )));
    }
    Ok(())
}

/// Stabilized softmax of `row / t`. Masked-out entries (`mask[j] == false`)
/// receive probability zero; a row with nothing attendable is an error.
pub(crate) fn softmax_in_place(row: &mut [f64], t: f64, mask: Option<&[bool]>) -> Result<()> {
    let keep = |j: usize| mask.is_none_or(|m| m[j]);
    let mut max = f64::NEG_INFINITY;
    for (j, v) in row.iter().enumerate() {
        if keep(j) && *v > max {
            max = *v;
        }
    }
    if max == f64::NEG_INFINITY {
        return Err(Error::contract("softmax row has no unmasked entry"));
    }
    let mut sum = 0.0;
    for (j, v) in row.iter_mut().enumerate() {
        if keep(j) {
            *v = ((*v - max) / t).exp();
            sum += *v;
        } else {
            *v = 0.0;
        }
    }
    let inv = 1.0 / sum;
    row.iter_mut().for_each(|v| *v *= inv);
    Ok(())
}

/// Index of the largest entry; ties resolve to the smallest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (j, v) in row.iter().enumerate().skip(1) {
        if *v > row[best] {
            best = j;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_must_match_values() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::new(vec![0, 3], vec![]).is_err());
        let t = Tensor::new(vec![2, 2, 3], vec![0.0; 12]).unwrap();
        assert_eq!((t.rows(), t.cols()), (4, 3));
    }

    #[test]
    fn softmax_examples() {
        let t = Tensor::from_rows(&[vec![0.0, 0.0]]).unwrap();
        assert_eq!(t.softmax_rows(1.0).unwrap().data(), &[0.5, 0.5]);

        let t = Tensor::from_rows(&[vec![1.0, 2.0, 3.0]]).unwrap();
        let s = t.softmax_rows(1.0).unwrap();
        for (a, b) in s.data().iter().zip([0.09003, 0.24473, 0.66524]) {
            assert!((a - b).abs() < 5e-6, "{a} vs {b}");
        }

        let t = Tensor::from_rows(&[vec![1.0, 2.0]]).unwrap();
        let s = t.softmax_rows(0.2).unwrap();
        assert!((s.data()[0] - 0.00669).abs() < 5e-6);
        assert!((s.data()[1] - 0.99331).abs() < 5e-6);
    }

    #[test]
    fn softmax_rejects_bad_temperature() {
        let t = Tensor::scalar(1.0);
        assert!(matches!(t.softmax_rows(0.0), Err(Error::Parameter(_))));
        assert!(matches!(t.softmax_rows(-1.0), Err(Error::Parameter(_))));
    }

    #[test]
    fn argmax_prefers_first_on_ties() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
        assert_eq!(argmax(&[0.0, 0.0]), 0);
    }
}
