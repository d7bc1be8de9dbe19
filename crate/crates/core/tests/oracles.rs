//! Library results checked against small, independent reference
//! implementations written here from scratch.

mod common;

use common::rel_err;
use lmc_rl::env::{make_riverswim, policy_evaluation, value_iteration, EpisodicMdp, InitialState, Policy};
use lmc_rl::lmc::EpisodeTrace;
use lmc_rl::numerics::{eig_extremes, spd_solve, SpdMatrix, Vector};
use lmc_rl::posterior::closed_form_posterior;
use lmc_rl::rng::substream;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

fn random_spd<R: Rng>(d: usize, rng: &mut R) -> SpdMatrix {
    let g: Vec<f64> = (0..d * d).map(|_| StandardNormal.sample(rng)).collect();
    let mut m = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..d {
            m[i * d + j] = (0..d).map(|k| g[i * d + k] * g[j * d + k]).sum::<f64>() + if i == j { 0.5 } else { 0.0 };
        }
    }
    SpdMatrix::new(d, m).unwrap()
}

/// Gaussian elimination with partial pivoting.
fn gauss_solve(d: usize, a: &[f64], b: &[f64]) -> Vec<f64> {
    let mut m: Vec<Vec<f64>> = (0..d).map(|i| {
        let mut row = a[i * d..(i + 1) * d].to_vec();
        row.push(b[i]);
        row
    }).collect();
    for c in 0..d {
        let p = (c..d).max_by(|&i, &j| m[i][c].abs().total_cmp(&m[j][c].abs())).unwrap();
        m.swap(c, p);
        for r in c + 1..d {
            let f = m[r][c] / m[c][c];
            for k in c..=d {
                m[r][k] -= f * m[c][k];
            }
        }
    }
    let mut x = vec![0.0; d];
    for r in (0..d).rev() {
        let s: f64 = (r + 1..d).map(|k| m[r][k] * x[k]).sum();
        x[r] = (m[r][d] - s) / m[r][r];
    }
    x
}

/// Cyclic Jacobi rotations; returns the eigenvalues.
fn jacobi_eigenvalues(d: usize, a: &[f64]) -> Vec<f64> {
    let mut m: Vec<Vec<f64>> = (0..d).map(|i| a[i * d..(i + 1) * d].to_vec()).collect();
    for _ in 0..100 {
        let off: f64 = (0..d).flat_map(|i| (0..d).filter(move |&j| j != i).map(move |j| (i, j))).map(|(i, j)| m[i][j] * m[i][j]).sum();
        if off < 1e-24 {
            break;
        }
        for p in 0..d {
            for q in p + 1..d {
                if m[p][q].abs() < 1e-300 {
                    continue;
                }
                let theta = (m[q][q] - m[p][p]) / (2.0 * m[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..d {
                    let (mkp, mkq) = (m[k][p], m[k][q]);
                    m[k][p] = c * mkp - s * mkq;
                    m[k][q] = s * mkp + c * mkq;
                }
                for k in 0..d {
                    let (mpk, mqk) = (m[p][k], m[q][k]);
                    m[p][k] = c * mpk - s * mqk;
                    m[q][k] = s * mpk + c * mqk;
                }
            }
        }
    }
    (0..d).map(|i| m[i][i]).collect()
}

#[test]
fn cholesky_solve_matches_gaussian_elimination() {
    let mut rng = substream(11, 0);
    for d in [1, 2, 5, 9] {
        let a = random_spd(d, &mut rng);
        let b: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
        let x = spd_solve(&a, &b).unwrap();
        let y = gauss_solve(d, a.entries(), &b);
        assert!(rel_err(&x, &y) < 1e-10, "d={d}");
    }
}

#[test]
fn eigen_extremes_match_jacobi() {
    let mut rng = substream(12, 0);
    for d in [2, 4, 7] {
        let a = random_spd(d, &mut rng);
        let ev = jacobi_eigenvalues(d, a.entries());
        let max = ev.iter().copied().fold(f64::MIN, f64::max);
        let min = ev.iter().copied().fold(f64::MAX, f64::min);
        let got = eig_extremes(&a, 1e-12).unwrap();
        assert!((got.lambda_max - max).abs() < 1e-6 * max, "{} vs {max}", got.lambda_max);
        assert!((got.lambda_min - min).abs() < 1e-6 * max, "{} vs {min}", got.lambda_min);
    }
}

#[test]
fn linear_gradient_matches_central_differences() {
    for seed in 0..60 {
        let e = common::linear_fd_error(seed);
        assert!(e < 1e-6, "seed {seed}: {e}");
    }
}

#[test]
fn mlp_backward_matches_central_differences() {
    for seed in 0..60 {
        let e = common::mlp_fd_error(seed);
        assert!(e < 1e-5, "seed {seed}: {e}");
    }
}

/// Every deterministic Markov policy of a tiny MDP, evaluated by its own
/// backward recursion.
#[test]
fn value_iteration_matches_policy_enumeration() {
    let mut rng = substream(13, 0);
    let (s_n, a_n, h_n) = (3, 2, 3);
    for _ in 0..5 {
        let mut trans = vec![0.0; h_n * s_n * a_n * s_n];
        for row in trans.chunks_mut(s_n) {
            let w: Vec<f64> = (0..s_n).map(|_| rng.random::<f64>()).collect();
            let t: f64 = w.iter().sum();
            row.iter_mut().zip(&w).for_each(|(p, x)| *p = x / t);
        }
        let rewards: Vec<f64> = (0..h_n * s_n * a_n).map(|_| rng.random()).collect();
        let mdp = EpisodicMdp::new("tiny", s_n, a_n, h_n, false, trans.clone(), rewards.clone(), InitialState::Fixed(0)).unwrap();
        let cells = h_n * s_n;
        let mut best = f64::MIN;
        for code in 0..(a_n as u64).pow(cells as u32) {
            let actions: Vec<usize> = (0..cells).map(|i| ((code / (a_n as u64).pow(i as u32)) % a_n as u64) as usize).collect();
            let mut v = vec![0.0; s_n];
            for h in (0..h_n).rev() {
                v = (0..s_n)
                    .map(|s| {
                        let a = actions[h * s_n + s];
                        let base = ((h * s_n + s) * a_n + a) * s_n;
                        rewards[(h * s_n + s) * a_n + a] + (0..s_n).map(|x| trans[base + x] * v[x]).sum::<f64>()
                    })
                    .collect();
            }
            best = best.max(v[0]);
            let pe = policy_evaluation(&mdp, &Policy::deterministic(s_n, a_n, h_n, &actions)).initial_value(&mdp);
            assert!((pe - v[0]).abs() < 1e-12);
        }
        let vi = value_iteration(&mdp).v.initial_value(&mdp);
        assert!((vi - best).abs() < 1e-12, "{vi} vs {best}");
    }
}

/// Exact evaluation of the uniform policy against a Monte Carlo estimate.
#[test]
fn policy_evaluation_matches_monte_carlo() {
    let mdp = make_riverswim(4, 6).unwrap();
    let pi = Policy::uniform(4, 2, 6);
    let exact = policy_evaluation(&mdp, &pi).initial_value(&mdp);
    let mut rng = substream(14, 0);
    let n = 200_000;
    let mut total = 0.0;
    for _ in 0..n {
        let mut ep = mdp.reset(&mut rng);
        loop {
            let a = rng.random_range(0..2);
            let t = mdp.step(&mut ep, a, &mut rng).unwrap();
            total += t.reward;
            if t.done {
                break;
            }
        }
    }
    let mc = total / n as f64;
    assert!((mc - exact).abs() < 5e-3, "{mc} vs {exact}");
}

/// The covariance of `w_J = A w_{J-1} + b' + s z` from a fixed start is
/// `s^2 sum_j A^{2j}`; the product form must agree with that plain sum.
#[test]
fn closed_form_covariance_matches_direct_sum() {
    let mut rng = substream(15, 0);
    let d = 3;
    let lam = random_spd(d, &mut rng);
    let lmax = eig_extremes(&lam, 1e-12).unwrap().lambda_max;
    let eta = 1.0 / (4.0 * lmax);
    let beta = 50.0;
    let j = 17;
    let w_hat = Vector((0..d).map(|_| StandardNormal.sample(&mut rng)).collect());
    let trace = vec![EpisodeTrace { eta, beta: Some(beta), updates: j, design: lam.clone(), w_hat: w_hat.clone() }];
    let w0 = vec![0.3, -1.0, 2.0];
    let closed = closed_form_posterior(&trace, &w0).unwrap();

    let a: Vec<f64> = (0..d * d)
        .map(|k| if k / d == k % d { 1.0 } else { 0.0 } - 2.0 * eta * lam.entries()[k])
        .collect();
    let mul = |x: &[f64], y: &[f64]| -> Vec<f64> {
        (0..d * d).map(|k| (0..d).map(|t| x[(k / d) * d + t] * y[t * d + k % d]).sum()).collect()
    };
    let mut power: Vec<f64> = (0..d * d).map(|k| if k / d == k % d { 1.0 } else { 0.0 }).collect();
    let mut cov = vec![0.0; d * d];
    let mut mean = w0.clone();
    for _ in 0..j {
        let sq = mul(&power, &power);
        cov.iter_mut().zip(&sq).for_each(|(c, s)| *c += 2.0 * eta / beta * s);
        power = mul(&power, &a);
        // deterministic part of the iteration
        let g: Vec<f64> = (0..d).map(|i| (0..d).map(|t| lam.get(i, t) * (mean[t] - w_hat[t])).sum()).collect();
        mean.iter_mut().zip(&g).for_each(|(m, g)| *m -= 2.0 * eta * g);
    }
    assert!(rel_err(closed.cov.entries(), &cov) < 1e-10);
    assert!(rel_err(&closed.mean, &mean) < 1e-10);
}
