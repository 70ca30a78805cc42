//! Parameter containers and first-order optimizers.

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::math::sqrt;

/// A model whose parameters are a fixed list of dense `f64` tensors.
///
/// Gradients use the same type, so an optimizer can walk parameters and
/// gradients tensor by tensor.
pub trait Parameters: Clone {
    fn tensors(&self) -> Vec<&[f64]>;
    fn tensors_mut(&mut self) -> Vec<&mut [f64]>;
    fn zeros_like(&self) -> Self;

    fn param_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    /// Reads the `i`-th scalar in tensor order.
    fn get_flat(&self, mut i: usize) -> f64 {
        for t in self.tensors() {
            if i < t.len() {
                return t[i];
            }
            i -= t.len();
        }
        panic!("parameter index out of range");
    }

    fn set_flat(&mut self, mut i: usize, value: f64) {
        for t in self.tensors_mut() {
            if i < t.len() {
                t[i] = value;
                return;
            }
            i -= t.len();
        }
        panic!("parameter index out of range");
    }

    /// `self += scale * other`.
    fn add_scaled(&mut self, other: &Self, scale: f64) {
        for (dst, src) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (d, s) in dst.iter_mut().zip(src) {
                *d += scale * s;
            }
        }
    }

    fn all_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|v| v.is_finite()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    /// Plain gradient descent with a fixed step size.
    Sgd,
    /// Adaptive moment estimation.
    Adam,
}

/// Optimizer state for one parameter set.
#[derive(Debug, Clone)]
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl Optimizer {
    pub fn new<P: Parameters>(kind: OptimizerKind, lr: f64, params: &P) -> Self {
        let shapes: Vec<usize> = params.tensors().iter().map(|t| t.len()).collect();
        let zeros = |shapes: &[usize]| shapes.iter().map(|&n| vec![0.0; n]).collect::<Vec<_>>();
        let (first, second) = match kind {
            OptimizerKind::Sgd => (Vec::new(), Vec::new()),
            OptimizerKind::Adam => (zeros(&shapes), zeros(&shapes)),
        };
        Optimizer { kind, lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, first, second }
    }

    pub fn kind(&self) -> OptimizerKind {
        self.kind
    }

    pub fn set_learning_rate(&mut self, lr: f64) {
        self.lr = lr;
    }

    pub fn step<P: Parameters>(&mut self, params: &mut P, grad: &P) {
        self.step += 1;
        match self.kind {
            OptimizerKind::Sgd => params.add_scaled(grad, -self.lr),
            OptimizerKind::Adam => {
                let t = self.step as i32;
                let bc1 = 1.0 - libm::pow(self.beta1, t as f64);
                let bc2 = 1.0 - libm::pow(self.beta2, t as f64);
                let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.lr, self.eps);
                for (((p, g), m), v) in params
                    .tensors_mut()
                    .into_iter()
                    .zip(grad.tensors())
                    .zip(self.first.iter_mut())
                    .zip(self.second.iter_mut())
                {
                    for i in 0..p.len() {
                        let gi = g[i];
                        m[i] = b1 * m[i] + (1.0 - b1) * gi;
                        v[i] = b2 * v[i] + (1.0 - b2) * gi * gi;
                        let mhat = m[i] / bc1;
                        let vhat = v[i] / bc2;
                        p[i] -= lr * mhat / (sqrt(vhat) + eps);
                    }
                }
            }
        }
    }
}

/// Shared knobs for every training loop.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub optimizer: OptimizerKind,
    pub learning_rate: f64,
    /// `None` means full-batch training.
    pub batch_size: Option<usize>,
    /// Easy out-of-scope samples drawn per record for classifier training.
    pub negatives_per_record: usize,
    /// Stop once the epoch loss falls below this value.
    pub target_loss: f64,
    /// Decay the learning rate linearly to zero over the epochs.
    #[serde(default)]
    pub anneal: bool,
    /// Classifier only: copies of each batch pair with the tokens shared by
    /// both sides replaced consistently by random vocabulary tokens.
    #[serde(default)]
    pub swap_copies: usize,
    /// Classifier only: negatives per in-scope pair with the shared tokens
    /// replaced differently on the two sides.
    #[serde(default)]
    pub swap_mismatches: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 200,
            optimizer: OptimizerKind::Sgd,
            learning_rate: 0.1,
            batch_size: None,
            negatives_per_record: 8,
            target_loss: 0.0,
            anneal: false,
            swap_copies: 0,
            swap_mismatches: 0,
        }
    }
}

impl TrainConfig {
    /// Annealed Adam with mini-batches; the setting used for the desk-scale
    /// task runs.
    pub fn adam(epochs: usize, learning_rate: f64, batch_size: usize) -> Self {
        TrainConfig {
            epochs,
            optimizer: OptimizerKind::Adam,
            learning_rate,
            batch_size: Some(batch_size),
            anneal: true,
            ..TrainConfig::default()
        }
    }
}

/// Parameters plus the per-epoch mean training loss.
#[derive(Debug, Clone)]
pub struct Trained<P> {
    pub params: P,
    pub losses: Vec<f64>,
}

/// Runs the epoch loop shared by every learner.
///
/// `loss_grad` returns the mean loss and gradient over the given example
/// indices. Full-batch training evaluates every example once per epoch;
/// mini-batch training reshuffles the indices each epoch.
pub(crate) fn fit<P, F, R>(
    mut params: P,
    n_examples: usize,
    config: &TrainConfig,
    rng: &mut R,
    mut loss_grad: F,
) -> Trained<P>
where
    P: Parameters,
    F: FnMut(&P, &[usize]) -> (f64, P),
    R: rand::Rng + ?Sized,
{
    use rand::seq::SliceRandom;

    let mut opt = Optimizer::new(config.optimizer, config.learning_rate, &params);
    let mut order: Vec<usize> = (0..n_examples).collect();
    let mut losses = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        if config.anneal {
            let left = (config.epochs - epoch) as f64 / config.epochs as f64;
            opt.set_learning_rate(config.learning_rate * left);
        }
        let epoch_loss = match config.batch_size {
            None => {
                let (loss, grad) = loss_grad(&params, &order);
                opt.step(&mut params, &grad);
                loss
            }
            Some(bs) => {
                order.shuffle(rng);
                let mut weighted = 0.0;
                for chunk in order.chunks(bs.max(1)) {
                    let (loss, grad) = loss_grad(&params, chunk);
                    opt.step(&mut params, &grad);
                    weighted += loss * chunk.len() as f64;
                }
                weighted / n_examples.max(1) as f64
            }
        };
        losses.push(epoch_loss);
        if epoch_loss <= config.target_loss {
            break;
        }
    }
    Trained { params, losses }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[derive(Clone, Debug)]
    struct Quad(Vec<f64>);

    impl Parameters for Quad {
        fn tensors(&self) -> Vec<&[f64]> {
            vec![&self.0]
        }
        fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
            vec![&mut self.0]
        }
        fn zeros_like(&self) -> Self {
            Quad(vec![0.0; self.0.len()])
        }
    }

    fn minimize(kind: OptimizerKind, lr: f64) -> f64 {
        let mut p = Quad(vec![3.0, -2.0]);
        let mut opt = Optimizer::new(kind, lr, &p);
        for _ in 0..2000 {
            let g = Quad(p.0.iter().map(|x| 2.0 * x).collect());
            opt.step(&mut p, &g);
        }
        p.0.iter().map(|x| x * x).sum()
    }

    #[test]
    fn both_optimizers_minimize_a_quadratic() {
        assert!(minimize(OptimizerKind::Sgd, 0.1) < 1e-12);
        assert!(minimize(OptimizerKind::Adam, 0.05) < 1e-6);
    }

    #[test]
    fn flat_indexing_spans_tensors() {
        let mut p = Quad(vec![1.0, 2.0]);
        assert_eq!(p.param_count(), 2);
        p.set_flat(1, 5.0);
        assert_eq!(p.get_flat(1), 5.0);
    }
}
