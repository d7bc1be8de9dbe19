//! Finite-difference gradient references shared by the test targets.

use lmc_rl::env::FeatureMap;
use lmc_rl::lmc::{Datum, StepPosterior};
use lmc_rl::neural::{ForwardCache, MlpParams};
use lmc_rl::rng::substream;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let scale = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(b.iter().map(|x| x * x).sum::<f64>().sqrt());
    if scale == 0.0 { diff } else { diff / scale }
}

pub fn random_step_posterior(seed: u64) -> (StepPosterior, FeatureMap, Vec<f64>) {
    let mut rng = substream(seed, 0);
    let (n_states, n_actions, d) = (3, 2, 4);
    // features must lie in the unit ball
    let rows: Vec<Vec<f64>> = (0..n_states * n_actions)
        .map(|_| {
            let r: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
            let scale = rng.random::<f64>() / r.iter().map(|x| x * x).sum::<f64>().sqrt();
            r.iter().map(|x| x * scale).collect()
        })
        .collect();
    let features = FeatureMap::custom(n_states, n_actions, &rows).unwrap();
    let v_next: Vec<f64> = (0..n_states).map(|_| rng.random::<f64>() * 3.0).collect();
    let mut post = StepPosterior::new(d, features.n_pairs(), 1.0, 1);
    for _ in 0..rng.random_range(0..12) {
        let datum = Datum { pair: rng.random_range(0..features.n_pairs()), reward: rng.random(), next_state: rng.random_range(0..n_states) };
        post.stats.record(&features, datum).unwrap();
    }
    post.begin_episode(1);
    post.rebuild_targets(&features, &v_next).unwrap();
    (post, features, v_next)
}

/// Relative error of the analytic ridge-loss gradient against central
/// differences of the loss evaluated straight from the data.
pub fn linear_fd_error(seed: u64) -> f64 {
    let (post, features, v_next) = random_step_posterior(seed);
    let mut rng = substream(seed, 1);
    let w: Vec<f64> = (0..post.dim()).map(|_| StandardNormal.sample(&mut rng)).collect();
    let analytic = post.grad_loss(&w).unwrap();
    let h = 1e-4;
    let fd: Vec<f64> = (0..w.len())
        .map(|i| {
            let mut wp = w.clone();
            let mut wm = w.clone();
            wp[i] += h;
            wm[i] -= h;
            (post.loss(&features, &v_next, &wp) - post.loss(&features, &v_next, &wm)) / (2.0 * h)
        })
        .collect();
    rel_err(&analytic, &fd)
}

/// Same for the MLP: the objective is `upstream . f(x)`.
pub fn mlp_fd_error(seed: u64) -> f64 {
    let mut rng = substream(seed, 2);
    let sizes = [5, 7, 6, 3];
    let net = MlpParams::he_uniform(&sizes, &mut rng);
    let x: Vec<f64> = (0..5).map(|_| StandardNormal.sample(&mut rng)).collect();
    let up: Vec<f64> = (0..3).map(|_| StandardNormal.sample(&mut rng)).collect();
    let mut cache = ForwardCache::default();
    net.forward_cached(&x, &mut cache);
    let mut grad = vec![0.0; net.n_params()];
    net.backward(&mut cache, &up, &mut grad);
    let objective = |p: &[f64]| {
        let n = MlpParams::unflatten(&sizes, p.to_vec()).unwrap();
        n.forward(&x).iter().zip(&up).map(|(a, b)| a * b).sum::<f64>()
    };
    let h = 1e-6;
    let base = net.flatten().to_vec();
    let fd: Vec<f64> = (0..base.len())
        .map(|i| {
            let mut p = base.clone();
            p[i] += h;
            let f_plus = objective(&p);
            p[i] -= 2.0 * h;
            (f_plus - objective(&p)) / (2.0 * h)
        })
        .collect();
    rel_err(&grad, &fd)
}
