use rand::Rng;
use serde::{Deserialize, Serialize};

use super::kernel::matvec_cols_acc;
use super::NumError;

/// Dense row-major tensor of 64-bit floats.
///
/// Only rank 1 (vectors) and rank 2 (matrices) are used by the models in this
/// crate, but the shape is kept general so serialized bundles stay readable.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, NumError> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(NumError::Shape(format!(
                "tensor shape {shape:?} must be non-empty with positive dims"
            )));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(NumError::Shape(format!(
                "shape {shape:?} holds {n} values but {} were given",
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(NumError::NonFinite(format!("tensor entry {i}")));
        }
        Ok(Self { shape, data })
    }

    pub fn vector(data: Vec<f64>) -> Result<Self, NumError> {
        let n = data.len();
        Self::new(vec![n], data)
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, NumError> {
        Self::new(vec![rows, cols], data)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    /// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) initialization.
    pub fn uniform_init<R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let n = shape.iter().product();
        let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
        Self {
            shape: shape.to_vec(),
            data,
        }
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

    /// Number of rows; a vector counts as a single column of `len` rows.
    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        self.shape[1..].iter().product::<usize>().max(1)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    /// Row `i` of a matrix.
    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        let c = self.cols();
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Matrix-vector product `W · x` for a `rows × cols` matrix.
pub fn matvec(w: &Tensor, x: &[f64]) -> Result<Vec<f64>, NumError> {
    if w.shape.len() != 2 || w.cols() != x.len() {
        return Err(NumError::Shape(format!(
            "matvec of {:?} with vector of length {}",
            w.shape,
            x.len()
        )));
    }
    let mut out = vec![0.0; w.rows()];
    matvec_cols_acc(&w.data, w.cols(), 0, x, &mut out);
    Ok(out)
}
