//! Softmax classifiers trained by minibatch SGD on the mean cross-entropy.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::distr::{Distribution, Uniform};
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Parameterized scorer with a flat parameter view, so one SGD loop and one
/// finite-difference check serve every architecture.
pub trait Network {
    fn logits(&self, x: ArrayView2<f64>) -> Array2<f64>;
    /// Mean cross-entropy and its gradient, flattened in `params()` order.
    fn loss_and_grad(&self, x: ArrayView2<f64>, labels: &[usize]) -> (f64, Vec<f64>);
    fn params(&self) -> Vec<f64>;
    fn set_params(&mut self, params: &[f64]);
}

/// Row-wise softmax.
pub fn softmax(logits: &Array2<f64>) -> Array2<f64> {
    let mut out = logits.clone();
    for mut row in out.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    out
}

/// Mean cross-entropy of `labels` under `logits`, plus d loss / d logits.
fn cross_entropy(logits: &Array2<f64>, labels: &[usize]) -> (f64, Array2<f64>) {
    let n = labels.len() as f64;
    let probs = softmax(logits);
    let mut loss = 0.0;
    let mut dlogits = probs;
    for (i, &y) in labels.iter().enumerate() {
        let row = logits.row(i);
        let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        loss += lse - row[y];
        dlogits[[i, y]] -= 1.0;
    }
    dlogits.mapv_inplace(|v| v / n);
    (loss / n, dlogits)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SoftmaxLinear {
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
}

impl SoftmaxLinear {
    pub fn zeros(n_features: usize, class_count: usize) -> Self {
        Self {
            weights: Array2::zeros((n_features, class_count)),
            bias: Array1::zeros(class_count),
        }
    }
}

impl Network for SoftmaxLinear {
    fn logits(&self, x: ArrayView2<f64>) -> Array2<f64> {
        x.dot(&self.weights) + &self.bias
    }

    fn loss_and_grad(&self, x: ArrayView2<f64>, labels: &[usize]) -> (f64, Vec<f64>) {
        let (loss, dz) = cross_entropy(&self.logits(x), labels);
        let dw = x.t().dot(&dz);
        let db = dz.sum_axis(Axis(0));
        let mut grad: Vec<f64> = dw.iter().copied().collect();
        grad.extend(db.iter().copied());
        (loss, grad)
    }

    fn params(&self) -> Vec<f64> {
        self.weights.iter().chain(self.bias.iter()).copied().collect()
    }

    fn set_params(&mut self, params: &[f64]) {
        let nw = self.weights.len();
        for (w, p) in self.weights.iter_mut().zip(&params[..nw]) {
            *w = *p;
        }
        for (b, p) in self.bias.iter_mut().zip(&params[nw..]) {
            *b = *p;
        }
    }
}

/// One tanh hidden layer followed by a softmax output layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
}

impl Mlp {
    /// Glorot-uniform initialization.
    pub fn init<R: Rng>(n_features: usize, hidden: usize, class_count: usize, rng: &mut R) -> Self {
        let glorot = |fan_in: usize, fan_out: usize, rng: &mut R| {
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let dist = Uniform::new_inclusive(-limit, limit).expect("finite limit");
            Array2::from_shape_fn((fan_in, fan_out), |_| dist.sample(rng))
        };
        let w1 = glorot(n_features, hidden, rng);
        let w2 = glorot(hidden, class_count, rng);
        Self {
            w1,
            b1: Array1::zeros(hidden),
            w2,
            b2: Array1::zeros(class_count),
        }
    }

    fn hidden(&self, x: ArrayView2<f64>) -> Array2<f64> {
        (x.dot(&self.w1) + &self.b1).mapv(f64::tanh)
    }
}

impl Network for Mlp {
    fn logits(&self, x: ArrayView2<f64>) -> Array2<f64> {
        self.hidden(x).dot(&self.w2) + &self.b2
    }

    fn loss_and_grad(&self, x: ArrayView2<f64>, labels: &[usize]) -> (f64, Vec<f64>) {
        let h = self.hidden(x);
        let (loss, dz) = cross_entropy(&(h.dot(&self.w2) + &self.b2), labels);
        let dw2 = h.t().dot(&dz);
        let db2 = dz.sum_axis(Axis(0));
        let dh = dz.dot(&self.w2.t()) * h.mapv(|v| 1.0 - v * v);
        let dw1 = x.t().dot(&dh);
        let db1 = dh.sum_axis(Axis(0));
        let grad = dw1
            .iter()
            .chain(db1.iter())
            .chain(dw2.iter())
            .chain(db2.iter())
            .copied()
            .collect();
        (loss, grad)
    }

    fn params(&self) -> Vec<f64> {
        self.w1
            .iter()
            .chain(self.b1.iter())
            .chain(self.w2.iter())
            .chain(self.b2.iter())
            .copied()
            .collect()
    }

    fn set_params(&mut self, params: &[f64]) {
        let mut it = params.iter();
        for v in self
            .w1
            .iter_mut()
            .chain(self.b1.iter_mut())
            .chain(self.w2.iter_mut())
            .chain(self.b2.iter_mut())
        {
            *v = *it.next().expect("parameter vector too short");
        }
    }
}

/// One SGD step on a minibatch.
pub fn sgd_step<N: Network>(net: &mut N, x: ArrayView2<f64>, labels: &[usize], lr: f64) -> f64 {
    let (loss, grad) = net.loss_and_grad(x, labels);
    let mut p = net.params();
    for (w, g) in p.iter_mut().zip(&grad) {
        *w -= lr * g;
    }
    net.set_params(&p);
    loss
}
