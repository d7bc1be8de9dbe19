//! Closed-form law of the linear Langevin chain and a Monte Carlo check of
//! the sampler against it.
//!
//! For a fixed data/schedule history the chain output is Gaussian. The
//! moments are accumulated episode by episode:
//!
//! ```text
//! mu    <- A^J mu + (I - A^J) w_hat
//! Sigma <- A^J Sigma A^J + (1/beta) (I - A^{2J}) Lambda^{-1} (I + A)^{-1}
//! ```
//!
//! with `A = I - 2 eta Lambda`, which unrolls to the product-form sums.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::env::FeatureMap;
use crate::lmc::{Datum, EpisodeTrace, LmcError, StepPosterior};
use crate::numerics::{
    dot, eig_extremes, Cholesky, DenseMatrix, NumericsError, SpdMatrix, Vector,
};
use crate::par::{map_indexed, pairwise_reduce, Execution};
use crate::rng::{child_seed, stream, substream};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PosteriorError {
    #[error("step size too large in episode {episode}: eigenvalue {eigenvalue} of A outside (0, 1)")]
    StepSizeTooLarge { episode: usize, eigenvalue: f64 },
    #[error("empty trace")]
    EmptyTrace,
    #[error("need at least 2 replicas, got {0}")]
    TooFewReplicas(usize),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Lmc(#[from] LmcError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClosedFormPosterior {
    pub mean: Vector,
    pub cov: SpdMatrix,
    pub trace: Vec<EpisodeTrace>,
}

/// Moments of the chain after the last entry of `trace`, started at `w0`.
pub fn closed_form_posterior(trace: &[EpisodeTrace], w0: &[f64]) -> Result<ClosedFormPosterior, PosteriorError> {
    if trace.is_empty() {
        return Err(PosteriorError::EmptyTrace);
    }
    let d = w0.len();
    let mut mean = w0.to_vec();
    let mut cov = DenseMatrix::zeros(d);
    let identity = DenseMatrix::identity(d);
    for (i, step) in trace.iter().enumerate() {
        let bounds = eig_extremes(&step.design, 1e-12).or_else(|e| match e {
            NumericsError::NoConvergence { estimate, .. } => Ok(estimate),
            e => Err(e),
        })?;
        for lambda in [bounds.lambda_max, bounds.lambda_min] {
            let a = 1.0 - 2.0 * step.eta * lambda;
            if !(a > 0.0 && a < 1.0) {
                return Err(PosteriorError::StepSizeTooLarge { episode: i, eigenvalue: a });
            }
        }
        let lam = step.design.to_dense();
        let a = identity.add_scaled(-2.0 * step.eta, &lam);
        let a_j = a.sym_pow(step.updates as u64);

        let shifted = a_j.mul_vec(&mean);
        let pulled = identity.add_scaled(-1.0, &a_j).mul_vec(&step.w_hat);
        for k in 0..d {
            mean[k] = shifted[k] + pulled[k];
        }

        cov = a_j.matmul(&cov).matmul(&a_j);
        if let Some(beta) = step.beta {
            let a_2j = a_j.matmul(&a_j);
            let lam_inv = Cholesky::factor(&step.design)?.inverse();
            let i_plus_a = SpdMatrix::symmetrized(&identity.add_scaled(1.0, &a));
            let i_plus_a_inv = Cholesky::factor(&i_plus_a)?.inverse();
            let term = identity.add_scaled(-1.0, &a_2j).matmul(&lam_inv).matmul(&i_plus_a_inv);
            cov = cov.add_scaled(1.0 / beta, &term);
        }
        cov = SpdMatrix::symmetrized(&cov).to_dense();
    }
    Ok(ClosedFormPosterior {
        mean: Vector(mean),
        cov: SpdMatrix::symmetrized(&cov),
        trace: trace.to_vec(),
    })
}

/// Sample mean and unbiased sample covariance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmpiricalMoments {
    pub n: usize,
    pub mean: Vector,
    pub cov: SpdMatrix,
}

/// Mergeable (count, mean, centered second moment) accumulator.
#[derive(Debug, Clone)]
struct Accumulator {
    n: f64,
    mean: Vec<f64>,
    m2: Vec<f64>,
}

impl Accumulator {
    fn from_samples(xs: &[Vector], d: usize) -> Self {
        let mut acc = Accumulator { n: 0.0, mean: vec![0.0; d], m2: vec![0.0; d * d] };
        let mut delta = vec![0.0; d];
        for x in xs {
            acc.n += 1.0;
            for k in 0..d {
                delta[k] = x[k] - acc.mean[k];
                acc.mean[k] += delta[k] / acc.n;
            }
            for r in 0..d {
                for c in 0..d {
                    acc.m2[r * d + c] += delta[r] * (x[c] - acc.mean[c]);
                }
            }
        }
        acc
    }

    fn merge(a: &Self, b: &Self) -> Self {
        let d = a.mean.len();
        let n = a.n + b.n;
        if n == 0.0 {
            return a.clone();
        }
        let delta: Vec<f64> = (0..d).map(|k| b.mean[k] - a.mean[k]).collect();
        let mean = (0..d).map(|k| a.mean[k] + delta[k] * b.n / n).collect();
        let w = a.n * b.n / n;
        let m2 = (0..d * d)
            .map(|i| a.m2[i] + b.m2[i] + delta[i / d] * delta[i % d] * w)
            .collect();
        Accumulator { n, mean, m2 }
    }
}

const BLOCK: usize = 256;

/// Runs `replicas` independent chains (`runner(r)` must use its own noise
/// stream for replica `r`) and reduces their terminal iterates. The
/// reduction is blockwise then pairwise, so the result does not depend on
/// `exec`.
pub fn empirical_moments<F>(runner: F, replicas: usize, exec: Execution) -> Result<EmpiricalMoments, PosteriorError>
where
    F: Fn(usize) -> Result<Vector, PosteriorError> + Sync + Send,
{
    if replicas < 2 {
        return Err(PosteriorError::TooFewReplicas(replicas));
    }
    let n_blocks = replicas.div_ceil(BLOCK);
    let blocks = map_indexed(exec, n_blocks, |b| {
        let samples = (b * BLOCK..((b + 1) * BLOCK).min(replicas))
            .map(&runner)
            .collect::<Result<Vec<_>, _>>()?;
        let d = samples[0].dim();
        Ok::<_, PosteriorError>(Accumulator::from_samples(&samples, d))
    })
    .into_iter()
    .collect::<Result<Vec<_>, _>>()?;
    let acc = pairwise_reduce(&blocks, &Accumulator::merge).expect("at least one block");
    let d = acc.mean.len();
    let cov: Vec<f64> = acc.m2.iter().map(|x| x / (acc.n - 1.0)).collect();
    let cov = SpdMatrix::symmetrized(&DenseMatrix::from_rows(d, cov));
    Ok(EmpiricalMoments { n: replicas, mean: Vector(acc.mean), cov })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TestThresholds {
    pub max_abs_z: f64,
    pub max_cov_rel_error: f64,
}

impl Default for TestThresholds {
    fn default() -> Self {
        TestThresholds { max_abs_z: 4.0, max_cov_rel_error: 0.10 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestReport {
    pub n: usize,
    pub z_scores: Vec<f64>,
    /// Coordinates whose mean z-score exceeds the threshold.
    pub flagged: Vec<usize>,
    pub cov_rel_error: f64,
    pub thresholds: TestThresholds,
    pub mean_ok: bool,
    pub cov_ok: bool,
    pub pass: bool,
}

/// Compares empirical moments from `n` replicas with the closed form.
/// Standard errors come from the closed-form covariance.
pub fn gaussian_moment_test(
    empirical: &EmpiricalMoments,
    closed: &ClosedFormPosterior,
    thresholds: TestThresholds,
) -> TestReport {
    let n = empirical.n;
    let d = closed.mean.dim();
    let z_scores: Vec<f64> = (0..d)
        .map(|k| {
            let diff = empirical.mean[k] - closed.mean[k];
            let se = (closed.cov.get(k, k).max(0.0) / n as f64).sqrt();
            if se > 0.0 {
                diff / se
            } else if diff.abs() <= 1e-12 * (1.0 + closed.mean[k].abs()) {
                0.0
            } else {
                diff.signum() * f64::INFINITY
            }
        })
        .collect();
    let flagged: Vec<usize> = (0..d).filter(|&k| !(z_scores[k].abs() < thresholds.max_abs_z)).collect();
    let diff: Vec<f64> = empirical
        .cov
        .entries()
        .iter()
        .zip(closed.cov.entries())
        .map(|(a, b)| a - b)
        .collect();
    let scale = closed.cov.frobenius();
    let abs_err = dot(&diff, &diff).sqrt();
    let cov_rel_error = if scale > 0.0 { abs_err / scale } else { abs_err };
    let mean_ok = flagged.is_empty();
    let cov_ok = cov_rel_error < thresholds.max_cov_rel_error;
    TestReport {
        n,
        z_scores,
        flagged,
        cov_rel_error,
        thresholds,
        mean_ok,
        cov_ok,
        pass: mean_ok && cov_ok,
    }
}

/// Synthetic regression fixture for checking the chain against the closed
/// form: `episodes` rounds, each adding `points_per_episode` random
/// `(phi, y)` pairs and then running `updates` Langevin steps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PosteriorFixture {
    pub dim: usize,
    pub episodes: usize,
    pub points_per_episode: usize,
    pub lambda_ridge: f64,
    pub updates: usize,
    pub beta: f64,
    pub replicas: usize,
    pub seed: u64,
    /// Multiplies the chain's step size but not the oracle's; anything other
    /// than 1 makes the two disagree.
    pub chain_eta_scale: f64,
    #[serde(default)]
    pub thresholds: TestThresholds,
}

impl Default for PosteriorFixture {
    fn default() -> Self {
        PosteriorFixture {
            dim: 3,
            episodes: 3,
            points_per_episode: 4,
            lambda_ridge: 1.0,
            updates: 20,
            beta: 100.0,
            replicas: 20_000,
            seed: 2024,
            chain_eta_scale: 1.0,
            thresholds: TestThresholds::default(),
        }
    }
}

/// The fixture's data laid out as a one-action feature table plus the
/// per-episode posteriors (targets already rebuilt) and the schedule trace.
#[derive(Debug, Clone)]
pub struct FixtureSetup {
    pub features: FeatureMap,
    pub posteriors: Vec<StepPosterior>,
    pub trace: Vec<EpisodeTrace>,
}

impl PosteriorFixture {
    pub fn setup(&self) -> Result<FixtureSetup, PosteriorError> {
        use rand::Rng;
        let mut rng = substream(self.seed, stream::FIXTURE);
        let n_points = self.episodes * self.points_per_episode;
        let rows: Vec<Vec<f64>> = (0..n_points)
            .map(|_| {
                let v: Vec<f64> = (0..self.dim).map(|_| rng.random_range(-1.0..1.0)).collect();
                let len = dot(&v, &v).sqrt().max(1.0);
                v.into_iter().map(|x| x / len).collect()
            })
            .collect();
        let ys: Vec<f64> = (0..n_points).map(|_| rng.random_range(0.0..1.0)).collect();
        let features = FeatureMap::custom(n_points, 1, &rows).map_err(|_| NumericsError::NonFinite)?;
        let zero_next = vec![0.0; n_points];

        let mut post = StepPosterior::new(self.dim, n_points, self.lambda_ridge, 1);
        let mut posteriors = Vec::with_capacity(self.episodes);
        let mut trace = Vec::with_capacity(self.episodes);
        for k in 0..self.episodes {
            for p in k * self.points_per_episode..(k + 1) * self.points_per_episode {
                post.stats.record(&features, Datum { pair: p, reward: ys[p], next_state: 0 })?;
            }
            post.begin_episode(k + 1);
            post.rebuild_targets(&features, &zero_next)?;
            let bounds = eig_extremes(post.stats.design(), 1e-12)?;
            trace.push(EpisodeTrace {
                eta: 1.0 / (4.0 * bounds.lambda_max),
                beta: Some(self.beta),
                updates: self.updates,
                design: post.stats.design().clone(),
                w_hat: post.w_hat().clone(),
            });
            posteriors.push(post.clone());
        }
        Ok(FixtureSetup { features, posteriors, trace })
    }

    /// Replays the whole history for replica `r` with its own noise stream,
    /// through the agent's own chain kernel.
    pub fn run_replica(&self, setup: &FixtureSetup, r: usize) -> Result<Vector, PosteriorError> {
        let mut rng = substream(child_seed(self.seed, stream::AGENT), r as u64);
        let mut w = vec![0.0; self.dim];
        for (post, step) in setup.posteriors.iter().zip(&setup.trace) {
            post.run_chain(&mut w, step.eta * self.chain_eta_scale, step.beta, step.updates, &mut rng)?;
        }
        Ok(Vector(w))
    }

    pub fn verify(&self, exec: Execution) -> Result<(TestReport, ClosedFormPosterior, EmpiricalMoments), PosteriorError> {
        let setup = self.setup()?;
        let closed = closed_form_posterior(&setup.trace, &vec![0.0; self.dim])?;
        let empirical = empirical_moments(|r| self.run_replica(&setup, r), self.replicas, exec)?;
        let report = gaussian_moment_test(&empirical, &closed, self.thresholds);
        Ok((report, closed, empirical))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(design: SpdMatrix, eta: f64, beta: Option<f64>, updates: usize, w_hat: Vec<f64>) -> EpisodeTrace {
        EpisodeTrace { eta, beta, updates, design, w_hat: Vector(w_hat) }
    }

    #[test]
    fn one_step_from_empty_data() {
        let t = single(SpdMatrix::identity(2), 0.25, Some(10.0), 1, vec![0.0, 0.0]);
        let p = closed_form_posterior(&[t], &[0.0, 0.0]).unwrap();
        assert_eq!(p.mean.0, vec![0.0, 0.0]);
        assert!((p.cov.get(0, 0) - 0.05).abs() < 1e-15);
        assert!((p.cov.get(1, 1) - 0.05).abs() < 1e-15);
        assert_eq!(p.cov.get(0, 1), 0.0);
    }

    #[test]
    fn long_chain_limit() {
        let lam = SpdMatrix::new(2, vec![2.0, 0.5, 0.5, 1.0]).unwrap();
        let eta = 0.1;
        let t = single(lam.clone(), eta, Some(4.0), 200, vec![0.3, -0.7]);
        let p = closed_form_posterior(&[t], &[0.0, 0.0]).unwrap();
        assert!((p.mean[0] - 0.3).abs() < 1e-8 && (p.mean[1] + 0.7).abs() < 1e-8);
        let id = DenseMatrix::identity(2);
        let a = id.add_scaled(-2.0 * eta, &lam.to_dense());
        let ipa = Cholesky::factor(&SpdMatrix::symmetrized(&id.add_scaled(1.0, &a))).unwrap().inverse();
        let lim = Cholesky::factor(&lam).unwrap().inverse().matmul(&ipa);
        for i in 0..2 {
            for j in 0..2 {
                assert!((p.cov.get(i, j) - lim.get(i, j) / 4.0).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn rejects_unstable_step() {
        let t = single(SpdMatrix::identity(1), 0.5, None, 1, vec![0.0]);
        assert!(matches!(
            closed_form_posterior(&[t], &[0.0]),
            Err(PosteriorError::StepSizeTooLarge { .. })
        ));
    }

    #[test]
    fn constant_chain_has_zero_covariance() {
        let m = empirical_moments(|_| Ok(Vector(vec![1.5, -2.0])), 1000, Execution::Sequential).unwrap();
        assert!(m.cov.frobenius() < 1e-12);
        assert!((m.mean[0] - 1.5).abs() < 1e-12);
    }

    #[test]
    fn exact_match_passes_and_shift_is_flagged() {
        let closed = ClosedFormPosterior {
            mean: Vector(vec![0.0, 1.0]),
            cov: SpdMatrix::from_diagonal(&[4.0, 1.0]),
            trace: vec![],
        };
        let exact = EmpiricalMoments { n: 100, mean: closed.mean.clone(), cov: closed.cov.clone() };
        let r = gaussian_moment_test(&exact, &closed, TestThresholds::default());
        assert!(r.pass);
        assert_eq!(r.z_scores, vec![0.0, 0.0]);
        assert_eq!(r.cov_rel_error, 0.0);

        // SE of coordinate 1 is 1/sqrt(100) = 0.1
        let shifted = EmpiricalMoments { mean: Vector(vec![0.0, 2.0]), ..exact };
        let r = gaussian_moment_test(&shifted, &closed, TestThresholds::default());
        assert!(!r.pass);
        assert_eq!(r.flagged, vec![1]);
        assert!((r.z_scores[1] - 10.0).abs() < 1e-9);
    }

    #[test]
    fn execution_mode_does_not_change_moments() {
        let f = PosteriorFixture { replicas: 600, ..Default::default() };
        let setup = f.setup().unwrap();
        let a = empirical_moments(|r| f.run_replica(&setup, r), f.replicas, Execution::Sequential).unwrap();
        let b = empirical_moments(|r| f.run_replica(&setup, r), f.replicas, Execution::Parallel).unwrap();
        assert_eq!(a, b);
    }
}
