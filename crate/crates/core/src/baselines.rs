//! Comparison agents for the linear experiments and the common agent trait.
//!
//! LSVI-UCB adds the elliptical bonus `beta ||phi||_{Lambda^{-1}}` to the
//! ridge estimate; LSVI-PHE perturbs every regression target (and the ridge
//! anchor) with i.i.d. Gaussian noise and takes the max over an ensemble.

use serde::{Deserialize, Serialize};

use crate::env::{argmax, value_iteration, EpisodicMdp, FeatureMap, Transition};
use crate::lmc::{clip_q, Datum, LmcAgent, LmcError, StepData};
use crate::numerics::{axpy, dot, Cholesky, NumericsError, Vector};
use crate::rng::SeededRng;
use rand_distr::{Distribution, StandardNormal};

/// An agent that plans a full `[h][s][a]` Q table before each episode and
/// then acts greedily on it.
pub trait LinearAgent {
    fn plan(&mut self, k: usize) -> Result<(), LmcError>;
    fn q_table(&self) -> &[f64];
    fn n_states(&self) -> usize;
    fn n_actions(&self) -> usize;
    fn observe(&mut self, t: &Transition) -> Result<(), LmcError>;

    fn act(&self, h: usize, s: usize) -> usize {
        greedy_act(self.q_table(), self.n_states(), self.n_actions(), h, s)
    }
}

/// Greedy action from a `[h][s][a]` table, ties to the lowest index.
pub fn greedy_act(q: &[f64], n_states: usize, n_actions: usize, h: usize, s: usize) -> usize {
    let base = (h * n_states + s) * n_actions;
    argmax(&q[base..base + n_actions])
}

impl LinearAgent for LmcAgent {
    fn plan(&mut self, k: usize) -> Result<(), LmcError> {
        self.plan_episode(k)
    }
    fn q_table(&self) -> &[f64] {
        LmcAgent::q_table(self)
    }
    fn n_states(&self) -> usize {
        self.features().n_states()
    }
    fn n_actions(&self) -> usize {
        self.features().n_actions()
    }
    fn observe(&mut self, t: &Transition) -> Result<(), LmcError> {
        LmcAgent::observe(self, t)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UcbConfig {
    pub bonus: f64,
    pub lambda_ridge: f64,
}

impl Default for UcbConfig {
    fn default() -> Self {
        UcbConfig { bonus: 1.0, lambda_ridge: 1.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PheConfig {
    pub ensemble: usize,
    pub sigma: f64,
    pub lambda_ridge: f64,
}

impl Default for PheConfig {
    fn default() -> Self {
        PheConfig { ensemble: 1, sigma: 1.0, lambda_ridge: 1.0 }
    }
}

/// Data recorded per step, shared by the least-squares baselines.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct LinearData {
    features: FeatureMap,
    horizon: usize,
    steps: Vec<StepData>,
    q_table: Vec<f64>,
}

impl LinearData {
    fn new(features: FeatureMap, horizon: usize, lambda: f64) -> Self {
        let steps = (0..horizon)
            .map(|_| StepData::new(features.dim(), features.n_pairs(), lambda))
            .collect();
        LinearData {
            q_table: vec![0.0; horizon * features.n_pairs()],
            features,
            horizon,
            steps,
        }
    }

    fn next_values(&self, h: usize) -> Vec<f64> {
        let n = self.features.n_states();
        if h + 1 == self.horizon {
            return vec![0.0; n];
        }
        let na = self.features.n_actions();
        self.q_table[(h + 1) * n * na..(h + 2) * n * na]
            .chunks(na)
            .map(|q| q.iter().copied().fold(0.0, f64::max))
            .collect()
    }

    fn observe(&mut self, t: &Transition) -> Result<(), NumericsError> {
        let pair = self.features.pair(t.state, t.action);
        self.steps[t.h].record(&self.features, Datum { pair, reward: t.reward, next_state: t.next_state })
    }
}

/// LSVI with an upper-confidence bonus.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LsviUcb {
    config: UcbConfig,
    data: LinearData,
}

impl LsviUcb {
    pub fn new(features: FeatureMap, horizon: usize, config: UcbConfig) -> Self {
        LsviUcb { data: LinearData::new(features, horizon, config.lambda_ridge), config }
    }

    /// `||phi(s,a)||_{Lambda_h^{-1}}`
    pub fn bonus_norm(&self, h: usize, s: usize, a: usize) -> Result<f64, NumericsError> {
        let chol = Cholesky::factor(self.data.steps[h].design())?;
        Ok(chol.inverse_quadratic_form(self.data.features.phi(s, a))?.sqrt())
    }

    pub fn plan_q(&mut self) -> Result<(), NumericsError> {
        let d = &mut self.data;
        let (n, na) = (d.features.n_states(), d.features.n_actions());
        for h in (0..d.horizon).rev() {
            let v_next = d.next_values(h);
            let step = &d.steps[h];
            let b = step.targets(&d.features, &v_next);
            let chol = Cholesky::factor(step.design())?;
            let w = chol.solve(&b)?;
            let bound = (d.horizon - h) as f64;
            for s in 0..n {
                for a in 0..na {
                    let phi = d.features.phi(s, a);
                    let bonus = self.config.bonus * chol.inverse_quadratic_form(phi)?.sqrt();
                    d.q_table[(h * n + s) * na + a] = clip_q(dot(phi, &w) + bonus, bound);
                }
            }
        }
        Ok(())
    }
}

impl LinearAgent for LsviUcb {
    fn plan(&mut self, _k: usize) -> Result<(), LmcError> {
        Ok(self.plan_q()?)
    }
    fn q_table(&self) -> &[f64] {
        &self.data.q_table
    }
    fn n_states(&self) -> usize {
        self.data.features.n_states()
    }
    fn n_actions(&self) -> usize {
        self.data.features.n_actions()
    }
    fn observe(&mut self, t: &Transition) -> Result<(), LmcError> {
        Ok(self.data.observe(t)?)
    }
}

/// LSVI with perturbed-history exploration.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LsviPhe {
    config: PheConfig,
    data: LinearData,
    rng: SeededRng,
}

impl LsviPhe {
    pub fn new(features: FeatureMap, horizon: usize, config: PheConfig, rng: SeededRng) -> Self {
        LsviPhe { data: LinearData::new(features, horizon, config.lambda_ridge), config, rng }
    }

    /// One perturbed ridge solution for step `h`:
    /// `Lambda^{-1} (sum (y + xi) phi + lambda xi')`. The noise of the data
    /// sharing a feature row collapses to one `N(0, n sigma^2)` draw.
    pub fn perturbed_solution(&mut self, h: usize, chol: &Cholesky, b: &Vector) -> Result<Vector, NumericsError> {
        let d = &self.data;
        let sigma = self.config.sigma;
        let mut bt = b.clone();
        if sigma > 0.0 {
            for (p, st) in d.steps[h].pair_stats().iter().enumerate() {
                if st.count > 0 {
                    let z: f64 = StandardNormal.sample(&mut self.rng);
                    axpy(sigma * (st.count as f64).sqrt() * z, d.features.phi_pair(p), &mut bt);
                }
            }
            let lambda = d.steps[h].lambda_ridge();
            for x in bt.iter_mut() {
                let z: f64 = StandardNormal.sample(&mut self.rng);
                *x += lambda * sigma * z;
            }
        }
        chol.solve(&bt)
    }

    pub fn plan_q(&mut self) -> Result<(), NumericsError> {
        let (n, na) = (self.data.features.n_states(), self.data.features.n_actions());
        for h in (0..self.data.horizon).rev() {
            let v_next = self.data.next_values(h);
            let b = self.data.steps[h].targets(&self.data.features, &v_next);
            let chol = Cholesky::factor(self.data.steps[h].design())?;
            let mut best = vec![f64::NEG_INFINITY; n * na];
            for _ in 0..self.config.ensemble {
                let w = self.perturbed_solution(h, &chol, &b)?;
                for s in 0..n {
                    for a in 0..na {
                        let q = dot(self.data.features.phi(s, a), &w);
                        let slot = &mut best[s * na + a];
                        *slot = slot.max(q);
                    }
                }
            }
            let bound = (self.data.horizon - h) as f64;
            for (i, q) in best.into_iter().enumerate() {
                self.data.q_table[h * n * na + i] = clip_q(q, bound);
            }
        }
        Ok(())
    }
}

impl LinearAgent for LsviPhe {
    fn plan(&mut self, _k: usize) -> Result<(), LmcError> {
        Ok(self.plan_q()?)
    }
    fn q_table(&self) -> &[f64] {
        &self.data.q_table
    }
    fn n_states(&self) -> usize {
        self.data.features.n_states()
    }
    fn n_actions(&self) -> usize {
        self.data.features.n_actions()
    }
    fn observe(&mut self, t: &Transition) -> Result<(), LmcError> {
        Ok(self.data.observe(t)?)
    }
}

/// Acts with the optimal policy of a known MDP.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OracleAgent {
    n_states: usize,
    n_actions: usize,
    q: Vec<f64>,
}

impl OracleAgent {
    pub fn new(mdp: &EpisodicMdp) -> Self {
        OracleAgent { n_states: mdp.n_states(), n_actions: mdp.n_actions(), q: value_iteration(mdp).q }
    }
}

/// Always plays the same action.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FixedActionAgent {
    n_states: usize,
    n_actions: usize,
    q: Vec<f64>,
}

impl FixedActionAgent {
    pub fn new(n_states: usize, n_actions: usize, horizon: usize, action: usize) -> Self {
        let mut q = vec![0.0; horizon * n_states * n_actions];
        for row in q.chunks_mut(n_actions) {
            row[action] = 1.0;
        }
        FixedActionAgent { n_states, n_actions, q }
    }
}

macro_rules! static_agent {
    ($t:ty) => {
        impl LinearAgent for $t {
            fn plan(&mut self, _k: usize) -> Result<(), LmcError> {
                Ok(())
            }
            fn q_table(&self) -> &[f64] {
                &self.q
            }
            fn n_states(&self) -> usize {
                self.n_states
            }
            fn n_actions(&self) -> usize {
                self.n_actions
            }
            fn observe(&mut self, _t: &Transition) -> Result<(), LmcError> {
                Ok(())
            }
        }
    };
}

static_agent!(OracleAgent);
static_agent!(FixedActionAgent);
