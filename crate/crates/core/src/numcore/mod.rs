//! Deterministic `f64` tensors, reverse-mode autodiff, Adam and the seeded
//! generator used throughout the crate.

mod gradcheck;
pub(crate) mod kernels;
mod optim;
mod prng;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, Probe};
pub use optim::{AdamConfig, AdamState};
pub use prng::Prng;
pub use tape::{Grads, Tape, Var};
pub use tensor::Tensor;

/// Row-wise softmax of a tensor viewed over its last dimension.
pub fn softmax(x: &Tensor) -> Tensor {
    let out = kernels::softmax_rows(x.data(), x.cols().max(1));
    Tensor::new(x.shape().to_vec(), out).expect("softmax of finite input is finite")
}

pub fn log_softmax(x: &Tensor) -> Tensor {
    let out = kernels::log_softmax_rows(x.data(), x.cols().max(1));
    Tensor::new(x.shape().to_vec(), out).expect("log_softmax of finite input is finite")
}

/// `Σ_v p·(log p − log q)` for one pair of rows; zero-probability teacher
/// entries contribute nothing.
pub fn kl_row(teacher_probs: &[f64], student_log_probs: &[f64]) -> f64 {
    teacher_probs
        .iter()
        .zip(student_log_probs)
        .filter(|(p, _)| **p > 0.0)
        .map(|(p, lq)| p * (p.ln() - lq))
        .sum()
}

pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in xs.iter().enumerate() {
        if *v > xs[best] {
            best = i;
        }
    }
    best
}

/// Entropy in nats of a probability row.
pub fn entropy(p: &[f64]) -> f64 {
    -p.iter().filter(|x| **x > 0.0).map(|x| x * x.ln()).sum::<f64>()
}
