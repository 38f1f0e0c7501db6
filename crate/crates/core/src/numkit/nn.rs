//! Plain (tape-free) forward passes used at inference time.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::kernel::{dot, matvec_cols_acc, norm};
use super::{NumError, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
}

impl Activation {
    pub fn apply(self, v: f64) -> f64 {
        match self {
            Activation::Relu => v.max(0.0),
            Activation::Tanh => v.tanh(),
        }
    }
}

/// Two-layer feed-forward network `W2 · act(W1 · x + b1) + b2`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp2Params {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
    pub activation: Activation,
}

impl Mlp2Params {
    pub fn init<R: Rng + ?Sized>(
        input: usize,
        hidden: usize,
        output: usize,
        activation: Activation,
        rng: &mut R,
    ) -> Self {
        Self {
            w1: Tensor::uniform_init(&[hidden, input], input, rng),
            b1: Tensor::uniform_init(&[hidden], input, rng),
            w2: Tensor::uniform_init(&[output, hidden], hidden, rng),
            b2: Tensor::uniform_init(&[output], hidden, rng),
            activation,
        }
    }

    pub fn zeros(input: usize, hidden: usize, output: usize, activation: Activation) -> Self {
        Self {
            w1: Tensor::zeros(&[hidden, input]),
            b1: Tensor::zeros(&[hidden]),
            w2: Tensor::zeros(&[output, hidden]),
            b2: Tensor::zeros(&[output]),
            activation,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.w1.cols()
    }

    pub fn hidden_dim(&self) -> usize {
        self.w1.rows()
    }

    pub fn output_dim(&self) -> usize {
        self.w2.rows()
    }

    pub fn validate(&self) -> Result<(), NumError> {
        let h = self.w1.rows();
        if self.b1.len() != h || self.w2.cols() != h || self.b2.len() != self.w2.rows() {
            return Err(NumError::Shape(format!(
                "inconsistent two-layer net: w1 {:?}, b1 {:?}, w2 {:?}, b2 {:?}",
                self.w1.shape(),
                self.b1.shape(),
                self.w2.shape(),
                self.b2.shape()
            )));
        }
        Ok(())
    }

    pub fn params(&self) -> [(&'static str, &Tensor); 4] {
        [
            ("w1", &self.w1),
            ("b1", &self.b1),
            ("w2", &self.w2),
            ("b2", &self.b2),
        ]
    }

    pub fn params_mut(&mut self) -> [(&'static str, &mut Tensor); 4] {
        [
            ("w1", &mut self.w1),
            ("b1", &mut self.b1),
            ("w2", &mut self.w2),
            ("b2", &mut self.b2),
        ]
    }
}

/// Hidden-layer size of the recurrent history cell.
pub const DEFAULT_HIDDEN: usize = 128;

/// Elman cell `h = tanh(W_in · x + W_h · h_prev + b)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RnnParams {
    pub w_in: Tensor,
    pub w_h: Tensor,
    pub b: Tensor,
}

impl RnnParams {
    pub fn init<R: Rng + ?Sized>(input: usize, hidden: usize, rng: &mut R) -> Self {
        let fan_in = input + hidden;
        Self {
            w_in: Tensor::uniform_init(&[hidden, input], fan_in, rng),
            w_h: Tensor::uniform_init(&[hidden, hidden], fan_in, rng),
            b: Tensor::uniform_init(&[hidden], fan_in, rng),
        }
    }

    pub fn zeros(input: usize, hidden: usize) -> Self {
        Self {
            w_in: Tensor::zeros(&[hidden, input]),
            w_h: Tensor::zeros(&[hidden, hidden]),
            b: Tensor::zeros(&[hidden]),
        }
    }

    pub fn hidden_dim(&self) -> usize {
        self.b.len()
    }

    pub fn input_dim(&self) -> usize {
        self.w_in.cols()
    }

    pub fn params(&self) -> [(&'static str, &Tensor); 3] {
        [("w_in", &self.w_in), ("w_h", &self.w_h), ("b", &self.b)]
    }

    pub fn params_mut(&mut self) -> [(&'static str, &mut Tensor); 3] {
        [
            ("w_in", &mut self.w_in),
            ("w_h", &mut self.w_h),
            ("b", &mut self.b),
        ]
    }
}

pub fn mlp2_forward(params: &Mlp2Params, x: &[f64]) -> Result<Vec<f64>, NumError> {
    params.validate()?;
    if x.len() != params.input_dim() {
        return Err(NumError::Shape(format!(
            "two-layer net expects input of length {}, got {}",
            params.input_dim(),
            x.len()
        )));
    }
    let mut hidden = params.b1.as_slice().to_vec();
    matvec_cols_acc(params.w1.as_slice(), params.w1.cols(), 0, x, &mut hidden);
    for v in &mut hidden {
        *v = params.activation.apply(*v);
    }
    let mut out = params.b2.as_slice().to_vec();
    matvec_cols_acc(params.w2.as_slice(), params.w2.cols(), 0, &hidden, &mut out);
    Ok(out)
}

pub fn rnn_step(params: &RnnParams, h_prev: &[f64], x: &[f64]) -> Result<Vec<f64>, NumError> {
    let hd = params.hidden_dim();
    if h_prev.len() != hd
        || x.len() != params.input_dim()
        || params.w_h.rows() != hd
        || params.w_h.cols() != hd
        || params.w_in.rows() != hd
    {
        return Err(NumError::Shape(format!(
            "rnn cell (hidden {hd}, input {}) got h of length {} and x of length {}",
            params.input_dim(),
            h_prev.len(),
            x.len()
        )));
    }
    let mut h = params.b.as_slice().to_vec();
    matvec_cols_acc(params.w_in.as_slice(), params.w_in.cols(), 0, x, &mut h);
    matvec_cols_acc(params.w_h.as_slice(), hd, 0, h_prev, &mut h);
    for v in &mut h {
        *v = v.tanh();
    }
    Ok(h)
}

/// Log-softmax with max-shift.
pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
    logits.iter().map(|z| z - lse).collect()
}

/// Returns `(-log p[target], p)`.
pub fn softmax_cross_entropy(
    logits: &[f64],
    target: usize,
) -> Result<(f64, Vec<f64>), NumError> {
    if target >= logits.len() {
        return Err(NumError::Index {
            index: target,
            len: logits.len(),
        });
    }
    let lp = log_softmax(logits);
    let probs = lp.iter().map(|v| v.exp()).collect();
    Ok((-lp[target], probs))
}

/// `1 - cos(v1, v2)`; zero-norm inputs are a domain error.
pub fn cosine_distance(v1: &[f64], v2: &[f64]) -> Result<f64, NumError> {
    if v1.len() != v2.len() {
        return Err(NumError::Shape(format!(
            "cosine distance of vectors with lengths {} and {}",
            v1.len(),
            v2.len()
        )));
    }
    let (n1, n2) = (norm(v1), norm(v2));
    if n1 == 0.0 || n2 == 0.0 {
        return Err(NumError::Domain("cosine distance of a zero-norm vector".into()));
    }
    let cos = (dot(v1, v2) / (n1 * n2)).clamp(-1.0, 1.0);
    Ok(1.0 - cos)
}

/// Index of the largest value; ties resolve to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = i;
        }
    }
    best
}
