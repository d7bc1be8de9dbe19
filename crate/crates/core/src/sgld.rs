//! Langevin-family optimizers over flat parameter vectors.
//!
//! Both kernels take the Gaussian draw as an argument (or draw exactly
//! `dim` normals from the generator), so two kernels fed the same stream see
//! the same noise.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::fill_gaussian;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SgldError {
    #[error("non-finite gradient entry at index {0}")]
    NonFiniteGradient(usize),
    #[error("dimension mismatch: parameters {params}, gradient {grad}")]
    DimensionMismatch { params: usize, grad: usize },
}

/// `sqrt(2 eta / beta)`, zero when `beta` is `None` (infinite).
pub fn noise_scale(eta: f64, beta: Option<f64>) -> f64 {
    match beta {
        Some(b) => (2.0 * eta / b).sqrt(),
        None => 0.0,
    }
}

/// `w <- w - eta * grad + sqrt(2 eta / beta) * noise`
pub fn sgld_step(w: &mut [f64], grad: &[f64], eta: f64, beta: Option<f64>, noise: &[f64]) {
    let scale = noise_scale(eta, beta);
    for i in 0..w.len() {
        w[i] -= eta * grad[i];
        if scale != 0.0 {
            w[i] += scale * noise[i];
        }
    }
}

/// [`sgld_step`] drawing its own standard normal vector.
pub fn sgld_step_rng<R: Rng + ?Sized>(w: &mut [f64], grad: &[f64], eta: f64, beta: Option<f64>, rng: &mut R) {
    let mut noise = vec![0.0; w.len()];
    fill_gaussian(&mut noise, rng);
    sgld_step(w, grad, eta, beta, &noise);
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamSgldHyper {
    /// Bias factor on the rescaled momentum.
    pub a: f64,
    pub alpha1: f64,
    pub alpha2: f64,
    /// Guard added under the square root.
    pub lambda1: f64,
    pub eta: f64,
    /// Inverse temperature; `None` disables the noise.
    pub beta: Option<f64>,
}

impl Default for AdamSgldHyper {
    fn default() -> Self {
        AdamSgldHyper {
            a: 1.0,
            alpha1: 0.9,
            alpha2: 0.99,
            lambda1: 1e-8,
            eta: 1e-3,
            beta: Some(1e8),
        }
    }
}

/// Adam SGLD: SGLD plus a drift `a * m / sqrt(v + lambda1)` built from
/// exponential moving averages of the gradient and its square. There is no
/// bias correction of the moments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamSgldState {
    pub w: Vec<f64>,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub hyper: AdamSgldHyper,
}

impl AdamSgldState {
    pub fn new(w: Vec<f64>, hyper: AdamSgldHyper) -> Self {
        let d = w.len();
        AdamSgldState { w, m: vec![0.0; d], v: vec![0.0; d], hyper }
    }

    /// One update with a pre-drawn standard normal vector.
    pub fn step_with_noise(&mut self, grad: &[f64], noise: &[f64]) -> Result<(), SgldError> {
        asgld_apply(&mut self.w, &mut self.m, &mut self.v, &self.hyper, grad, noise)
    }

    pub fn step<R: Rng + ?Sized>(&mut self, grad: &[f64], rng: &mut R) -> Result<(), SgldError> {
        let mut noise = vec![0.0; self.w.len()];
        fill_gaussian(&mut noise, rng);
        self.step_with_noise(grad, &noise)
    }
}

/// The Adam SGLD kernel on borrowed buffers.
///
/// Order matters: the parameters move using the previous moments, and only
/// then are `m` and `v` advanced with `grad`.
pub fn asgld_apply(
    w: &mut [f64],
    m: &mut [f64],
    v: &mut [f64],
    hyper: &AdamSgldHyper,
    grad: &[f64],
    noise: &[f64],
) -> Result<(), SgldError> {
    if grad.len() != w.len() {
        return Err(SgldError::DimensionMismatch { params: w.len(), grad: grad.len() });
    }
    if let Some(i) = grad.iter().position(|g| !g.is_finite()) {
        return Err(SgldError::NonFiniteGradient(i));
    }
    let AdamSgldHyper { a, alpha1, alpha2, lambda1, eta, beta } = *hyper;
    let scale = noise_scale(eta, beta);
    for i in 0..w.len() {
        let g = grad[i];
        let drift = a * m[i] / (v[i] + lambda1).sqrt();
        w[i] -= eta * (g + drift);
        if scale != 0.0 {
            w[i] += scale * noise[i];
        }
        m[i] = alpha1 * m[i] + (1.0 - alpha1) * g;
        v[i] = alpha2 * v[i] + (1.0 - alpha2) * g * g;
    }
    Ok(())
}

/// Functional form of [`AdamSgldState::step`].
pub fn asgld_step<R: Rng + ?Sized>(state: &mut AdamSgldState, grad: &[f64], rng: &mut R) -> Result<(), SgldError> {
    state.step(grad, rng)
}

/// Plain Adam (with bias correction), used by the epsilon-greedy DQN baseline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl Adam {
    pub fn new(dim: usize, lr: f64) -> Self {
        Adam { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, m: vec![0.0; dim], v: vec![0.0; dim], t: 0 }
    }

    pub fn step(&mut self, w: &mut [f64], grad: &[f64]) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..w.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grad[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
            let mh = self.m[i] / c1;
            let vh = self.v[i] / c2;
            w[i] -= self.lr * mh / (vh.sqrt() + self.eps);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::substream;

    fn hyper(a: f64, beta: Option<f64>) -> AdamSgldHyper {
        AdamSgldHyper { a, alpha1: 0.9, alpha2: 0.99, lambda1: 1e-8, eta: 0.05, beta }
    }

    #[test]
    fn sgld_fixed_point_without_noise() {
        let mut w = vec![1.0, -2.0];
        sgld_step_rng(&mut w, &[0.0, 0.0], 0.1, None, &mut substream(0, 0));
        assert_eq!(w, vec![1.0, -2.0]);
    }

    #[test]
    fn asgld_first_step_has_no_drift() {
        let mut s = AdamSgldState::new(vec![0.5], hyper(0.7, None));
        s.step_with_noise(&[2.0], &[0.0]).unwrap();
        assert_eq!(s.w, vec![0.5 - 0.05 * 2.0]);
        assert!((s.m[0] - 0.2).abs() < 1e-15);
        assert!((s.v[0] - 0.04).abs() < 1e-15);
    }

    #[test]
    fn asgld_two_step_drift() {
        let h = AdamSgldHyper { a: 0.1, alpha1: 0.9, alpha2: 0.99, lambda1: 1e-8, eta: 1.0, beta: None };
        let mut s = AdamSgldState::new(vec![0.0], h);
        s.step_with_noise(&[1.0], &[0.0]).unwrap();
        let before = s.w[0];
        s.step_with_noise(&[1.0], &[0.0]).unwrap();
        let drift = (before - s.w[0]) - 1.0;
        let expected = 0.1 * 0.1 / (0.01f64 + 1e-8).sqrt();
        assert!((drift - expected).abs() < 1e-12);
        assert!((drift - 0.1).abs() < 1e-6);
    }

    #[test]
    fn moment_update_order_is_pinned() {
        // Updating the moments first would give a nonzero drift on step one.
        let mut s = AdamSgldState::new(vec![0.0], hyper(1.0, None));
        s.step_with_noise(&[1.0], &[0.0]).unwrap();
        let wrong_order = -0.05 * (1.0 + 0.1 / (0.01f64 + 1e-8).sqrt());
        assert_ne!(s.w[0], wrong_order);
        assert_eq!(s.w[0], -0.05);
    }

    #[test]
    fn asgld_rejects_nan() {
        let mut s = AdamSgldState::new(vec![0.0, 0.0], hyper(1.0, None));
        assert_eq!(s.step_with_noise(&[0.0, f64::NAN], &[0.0, 0.0]), Err(SgldError::NonFiniteGradient(1)));
    }

    #[test]
    fn adam_moves_against_gradient() {
        let mut w = vec![1.0];
        let mut opt = Adam::new(1, 0.1);
        opt.step(&mut w, &[3.0]);
        assert!((w[0] - 0.9).abs() < 1e-6);
    }
}
