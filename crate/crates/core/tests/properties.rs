use lmc_rl::env::{make_nchain, make_riverswim, policy_evaluation, value_iteration, FeatureKind, Policy};
use lmc_rl::harness::{compute_regret, mean_se};
use lmc_rl::lmc::clip_q;
use lmc_rl::neural::{thermometer_obs, Experience, MlpParams, ReplayBuffer};
use lmc_rl::numerics::{Cholesky, SpdMatrix};
use lmc_rl::par::{map_indexed, pairwise_reduce, Execution};
use lmc_rl::rng::substream;
use lmc_rl::sgld::{asgld_apply, sgld_step, AdamSgldHyper};
use proptest::prelude::*;

fn unit_vec(d: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-1.0f64..1.0, d).prop_map(move |v| {
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1.0);
        v.into_iter().map(|x| x / n).collect()
    })
}

proptest! {
    #[test]
    fn rank_one_updates_stay_spd(phis in prop::collection::vec(unit_vec(4), 0..20), lambda in 0.1f64..5.0) {
        let mut m = SpdMatrix::scaled_identity(4, lambda);
        for p in &phis {
            m.rank1_update_in_place(p).unwrap();
        }
        let chol = Cholesky::factor(&m).unwrap();
        let x = vec![1.0, -2.0, 0.5, 3.0];
        let y = chol.solve(&m.mul_vec(&x)).unwrap();
        for (a, b) in x.iter().zip(y.iter()) {
            prop_assert!((a - b).abs() < 1e-8);
        }
    }

    #[test]
    fn clip_stays_in_range(x in -1e6f64..1e6, bound in 0.0f64..100.0) {
        let c = clip_q(x, bound);
        prop_assert!(c >= 0.0 && c <= bound);
        if x >= 0.0 && x <= bound {
            prop_assert_eq!(c, x);
        }
    }

    #[test]
    fn asgld_without_drift_or_noise_is_sgd(
        w in prop::collection::vec(-10.0f64..10.0, 1..16),
        seed in any::<u64>(),
        eta in 1e-5f64..1.0,
        steps in 1usize..20,
    ) {
        let d = w.len();
        let hyper = AdamSgldHyper { a: 0.0, eta, beta: None, ..Default::default() };
        let (mut wa, mut m, mut v) = (w.clone(), vec![0.0; d], vec![0.0; d]);
        let mut ws = w.clone();
        let mut rng = substream(seed, 0);
        let noise = vec![0.0; d];
        for _ in 0..steps {
            let g: Vec<f64> = (0..d).map(|_| rand::Rng::random_range(&mut rng, -5.0..5.0)).collect();
            asgld_apply(&mut wa, &mut m, &mut v, &hyper, &g, &noise).unwrap();
            sgld_step(&mut ws, &g, eta, None, &noise);
        }
        prop_assert_eq!(wa, ws);
    }

    #[test]
    fn constant_gradient_moments(g in -100.0f64..100.0, n in 1usize..=100) {
        let hyper = AdamSgldHyper::default();
        let (mut w, mut m, mut v) = (vec![0.0], vec![0.0], vec![0.0]);
        for _ in 0..n {
            asgld_apply(&mut w, &mut m, &mut v, &hyper, &[g], &[0.0]).unwrap();
        }
        let m_exact = (1.0 - hyper.alpha1.powi(n as i32)) * g;
        let v_exact = (1.0 - hyper.alpha2.powi(n as i32)) * g * g;
        prop_assert!((m[0] - m_exact).abs() <= 1e-12 * (1.0 + g.abs()));
        prop_assert!((v[0] - v_exact).abs() <= 1e-12 * (1.0 + g * g));
    }

    #[test]
    fn execution_modes_agree(n in 0usize..300) {
        let f = |i: usize| ((i as f64) * 0.37).sin();
        let a = map_indexed(Execution::Sequential, n, f);
        let b = map_indexed(Execution::Parallel, n, f);
        prop_assert_eq!(&a, &b);
        let sa = pairwise_reduce(&a, &|x, y| x + y);
        let sb = pairwise_reduce(&b, &|x, y| x + y);
        prop_assert_eq!(sa.map(f64::to_bits), sb.map(f64::to_bits));
    }

    #[test]
    fn thermometer_is_monotone(n in 1usize..64, s in 0usize..64, normalized: bool) {
        let s = s % n;
        let x = thermometer_obs(n, s, normalized);
        prop_assert_eq!(x.iter().filter(|v| **v > 0.0).count(), s + 1);
        prop_assert!(x.windows(2).all(|w| w[0] >= w[1]));
    }

    #[test]
    fn replay_keeps_the_newest(cap in 1usize..20, pushes in 0usize..60) {
        let mut b = ReplayBuffer::new(cap);
        for r in 0..pushes {
            b.push(Experience { obs: vec![], action: 0, reward: r as f64, next_obs: vec![], done: false });
        }
        prop_assert_eq!(b.len(), pushes.min(cap));
        let mut held: Vec<f64> = (0..b.len()).map(|i| b.get(i).reward).collect();
        held.sort_by(f64::total_cmp);
        let expected: Vec<f64> = (pushes.saturating_sub(cap)..pushes).map(|r| r as f64).collect();
        prop_assert_eq!(held, expected);
    }

    #[test]
    fn checkpoint_round_trips(seed in any::<u64>(), hidden in 1usize..10) {
        let net = MlpParams::he_uniform(&[3, hidden, 2], &mut substream(seed, 0));
        let mut bytes = Vec::new();
        net.write_checkpoint(&mut bytes).unwrap();
        prop_assert_eq!(MlpParams::read_checkpoint(&bytes[..]).unwrap(), net);
    }

    #[test]
    fn regret_is_nonnegative_and_bounded(actions in prop::collection::vec(0usize..2, 5 * 7)) {
        let mdp = make_riverswim(5, 7).unwrap();
        let pi = Policy::deterministic(5, 2, 7, &actions);
        let curve = compute_regret(&mdp, &[pi.clone(), pi]).unwrap();
        prop_assert!(curve.per_episode.iter().all(|r| *r >= 0.0 && *r <= curve.optimal_value + 1e-12));
        prop_assert!(curve.cumulative.windows(2).all(|w| w[1] >= w[0]));
    }

    #[test]
    fn greedy_optimal_q_is_optimal(n in 3usize..12) {
        let (mdp, _) = make_nchain(n, FeatureKind::OneHot).unwrap();
        let sol = value_iteration(&mdp);
        let v = policy_evaluation(&mdp, &sol.policy).initial_value(&mdp);
        prop_assert!((v - sol.v.initial_value(&mdp)).abs() < 1e-9);
    }

    #[test]
    fn standard_error_scales(xs in prop::collection::vec(-50.0f64..50.0, 2..40), c in 0.1f64..10.0) {
        let (m, se) = mean_se(&xs);
        let scaled: Vec<f64> = xs.iter().map(|x| x * c).collect();
        let (m2, se2) = mean_se(&scaled);
        prop_assert!((m2 - c * m).abs() < 1e-9 * (1.0 + m.abs() * c));
        prop_assert!((se2 - c * se).abs() < 1e-9 * (1.0 + se * c));
    }
}
