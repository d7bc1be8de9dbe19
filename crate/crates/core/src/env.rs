//! Episodic finite MDPs: N-Chain, RiverSwim, random linear MDPs, plus exact
//! backward-induction oracles.
//!
//! Steps are 0-based in code: `h` runs over `0..horizon`, and the value
//! tables have an extra terminal row `h = horizon` that is identically zero.

use rand::seq::index::sample as sample_indices;
use rand::Rng;
use rand_distr::{Distribution, Exp1};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::dot;

const ROW_SUM_TOL: f64 = 1e-10;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EnvError {
    #[error("invalid size: {0}")]
    InvalidSize(String),
    #[error("transition row (h={h}, s={s}, a={a}) sums to {sum}")]
    NotStochastic { h: usize, s: usize, a: usize, sum: f64 },
    #[error("reward r_{h}({s}, {a}) = {value} outside [0, 1]")]
    RewardOutOfRange { h: usize, s: usize, a: usize, value: f64 },
    #[error("episode is over (horizon {0})")]
    EpisodeOver(usize),
    #[error("index out of range: {0}")]
    OutOfRange(String),
    #[error("linear MDP identity violated: {0}")]
    LinearIdentity(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitialState {
    Fixed(usize),
    Distribution(Vec<f64>),
}

/// Raw table layout shared by serialization and the validated type.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct MdpTables {
    name: String,
    n_states: usize,
    n_actions: usize,
    horizon: usize,
    /// One table shared by every step when true.
    stationary: bool,
    /// `[h][s][a][s']`, `h` dropped when stationary.
    transitions: Vec<f64>,
    /// `[h][s][a]`, `h` dropped when stationary.
    rewards: Vec<f64>,
    initial: InitialState,
}

/// Finite-horizon MDP with per-step transition and reward tables.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "MdpTables", into = "MdpTables")]
pub struct EpisodicMdp {
    t: MdpTables,
}

impl TryFrom<MdpTables> for EpisodicMdp {
    type Error = EnvError;
    fn try_from(t: MdpTables) -> Result<Self, EnvError> {
        let m = EpisodicMdp { t };
        m.validate()?;
        Ok(m)
    }
}

impl From<EpisodicMdp> for MdpTables {
    fn from(m: EpisodicMdp) -> Self {
        m.t
    }
}

impl EpisodicMdp {
    /// Builds and validates an MDP. `transitions` is `[h][s][a][s']` and
    /// `rewards` is `[h][s][a]`; pass `stationary = true` to give a single
    /// step's tables for all `h`.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        name: impl Into<String>,
        n_states: usize,
        n_actions: usize,
        horizon: usize,
        stationary: bool,
        transitions: Vec<f64>,
        rewards: Vec<f64>,
        initial: InitialState,
    ) -> Result<Self, EnvError> {
        EpisodicMdp {
            t: MdpTables {
                name: name.into(),
                n_states,
                n_actions,
                horizon,
                stationary,
                transitions,
                rewards,
                initial,
            },
        }
        .validated()
    }

    fn validated(self) -> Result<Self, EnvError> {
        self.validate()?;
        Ok(self)
    }

    fn validate(&self) -> Result<(), EnvError> {
        let t = &self.t;
        if t.horizon == 0 || t.n_states == 0 || t.n_actions == 0 {
            return Err(EnvError::InvalidSize(format!(
                "states={}, actions={}, horizon={}",
                t.n_states, t.n_actions, t.horizon
            )));
        }
        let layers = if t.stationary { 1 } else { t.horizon };
        let sa = t.n_states * t.n_actions;
        if t.transitions.len() != layers * sa * t.n_states || t.rewards.len() != layers * sa {
            return Err(EnvError::InvalidSize("table length mismatch".into()));
        }
        for h in 0..layers {
            for s in 0..t.n_states {
                for a in 0..t.n_actions {
                    let row = self.transition_row(h, s, a);
                    let sum: f64 = row.iter().sum();
                    if (sum - 1.0).abs() > ROW_SUM_TOL || row.iter().any(|p| *p < 0.0 || !p.is_finite()) {
                        return Err(EnvError::NotStochastic { h, s, a, sum });
                    }
                    let r = self.reward(h, s, a);
                    if !(0.0..=1.0).contains(&r) {
                        return Err(EnvError::RewardOutOfRange { h, s, a, value: r });
                    }
                }
            }
        }
        match &t.initial {
            InitialState::Fixed(s) if *s >= t.n_states => {
                Err(EnvError::OutOfRange(format!("initial state {s}")))
            }
            InitialState::Distribution(p)
                if p.len() != t.n_states || (p.iter().sum::<f64>() - 1.0).abs() > ROW_SUM_TOL =>
            {
                Err(EnvError::InvalidSize("initial distribution".into()))
            }
            _ => Ok(()),
        }
    }

    pub fn name(&self) -> &str {
        &self.t.name
    }
    pub fn n_states(&self) -> usize {
        self.t.n_states
    }
    pub fn n_actions(&self) -> usize {
        self.t.n_actions
    }
    pub fn horizon(&self) -> usize {
        self.t.horizon
    }
    pub fn is_stationary(&self) -> bool {
        self.t.stationary
    }
    pub fn initial(&self) -> &InitialState {
        &self.t.initial
    }

    fn layer(&self, h: usize) -> usize {
        if self.t.stationary {
            0
        } else {
            h
        }
    }

    /// `P_h(. | s, a)`
    pub fn transition_row(&self, h: usize, s: usize, a: usize) -> &[f64] {
        let n = self.t.n_states;
        let base = ((self.layer(h) * n + s) * self.t.n_actions + a) * n;
        &self.t.transitions[base..base + n]
    }

    pub fn reward(&self, h: usize, s: usize, a: usize) -> f64 {
        self.t.rewards[(self.layer(h) * self.t.n_states + s) * self.t.n_actions + a]
    }

    pub fn initial_distribution(&self) -> Vec<f64> {
        match &self.t.initial {
            InitialState::Fixed(s) => {
                let mut p = vec![0.0; self.t.n_states];
                p[*s] = 1.0;
                p
            }
            InitialState::Distribution(p) => p.clone(),
        }
    }

    pub fn reset<R: Rng + ?Sized>(&self, rng: &mut R) -> Episode {
        let state = match &self.t.initial {
            InitialState::Fixed(s) => *s,
            InitialState::Distribution(p) => sample_categorical(p, rng),
        };
        Episode { state, h: 0 }
    }

    /// Advances `episode` by one step.
    pub fn step<R: Rng + ?Sized>(
        &self,
        episode: &mut Episode,
        action: usize,
        rng: &mut R,
    ) -> Result<Transition, EnvError> {
        if episode.h >= self.t.horizon {
            return Err(EnvError::EpisodeOver(self.t.horizon));
        }
        if action >= self.t.n_actions || episode.state >= self.t.n_states {
            return Err(EnvError::OutOfRange(format!(
                "state {} action {}",
                episode.state, action
            )));
        }
        let (h, s) = (episode.h, episode.state);
        let reward = self.reward(h, s, action);
        let next_state = sample_categorical(self.transition_row(h, s, action), rng);
        episode.state = next_state;
        episode.h += 1;
        Ok(Transition {
            h,
            state: s,
            action,
            reward,
            next_state,
            done: episode.h == self.t.horizon,
        })
    }

    /// Expected next-step value `(P_h V)(s, a)` for a state-value vector `v`.
    pub fn expected_next(&self, h: usize, s: usize, a: usize, v: &[f64]) -> f64 {
        dot(self.transition_row(h, s, a), v)
    }
}

fn sample_categorical<R: Rng + ?Sized>(p: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut last = 0;
    for (i, pi) in p.iter().enumerate() {
        if *pi <= 0.0 {
            continue;
        }
        acc += pi;
        last = i;
        if u < acc {
            return i;
        }
    }
    last
}

/// Per-run episode cursor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Episode {
    pub state: usize,
    pub h: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub h: usize,
    pub state: usize,
    pub action: usize,
    pub reward: f64,
    pub next_state: usize,
    pub done: bool,
}

/// One episode's worth of transitions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub episode: usize,
    pub steps: Vec<Transition>,
}

impl Trajectory {
    pub fn total_return(&self) -> f64 {
        self.steps.iter().map(|t| t.reward).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureKind {
    OneHot,
    Thermometer,
    TabularLinear,
    Custom,
}

/// Table of features `phi(s, a)` in `R^d`, all with `||phi||_2 <= 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureMap {
    kind: FeatureKind,
    dim: usize,
    n_states: usize,
    n_actions: usize,
    table: Vec<f64>,
}

impl FeatureMap {
    /// `phi(s, a) = e_{s * A + a}`
    pub fn one_hot(n_states: usize, n_actions: usize) -> Self {
        Self::indicator(FeatureKind::OneHot, n_states, n_actions)
    }

    pub fn tabular_linear(n_states: usize, n_actions: usize) -> Self {
        Self::indicator(FeatureKind::TabularLinear, n_states, n_actions)
    }

    fn indicator(kind: FeatureKind, n_states: usize, n_actions: usize) -> Self {
        let d = n_states * n_actions;
        let mut table = vec![0.0; d * d];
        for p in 0..d {
            table[p * d + p] = 1.0;
        }
        FeatureMap { kind, dim: d, n_states, n_actions, table }
    }

    /// Action-blocked thermometer code: block `a` holds `1{x <= s} / sqrt(N)`.
    pub fn thermometer(n_states: usize, n_actions: usize) -> Self {
        let n = n_states;
        let d = n * n_actions;
        let scale = 1.0 / (n as f64).sqrt();
        let mut table = vec![0.0; n * n_actions * d];
        for s in 0..n {
            for a in 0..n_actions {
                let row = &mut table[(s * n_actions + a) * d..(s * n_actions + a + 1) * d];
                for x in 0..=s {
                    row[a * n + x] = scale;
                }
            }
        }
        FeatureMap { kind: FeatureKind::Thermometer, dim: d, n_states, n_actions, table }
    }

    /// Arbitrary features, `rows[s * A + a]`.
    pub fn custom(n_states: usize, n_actions: usize, rows: &[Vec<f64>]) -> Result<Self, EnvError> {
        if rows.len() != n_states * n_actions || rows.is_empty() {
            return Err(EnvError::InvalidSize("feature rows".into()));
        }
        let dim = rows[0].len();
        if rows.iter().any(|r| r.len() != dim) {
            return Err(EnvError::InvalidSize("ragged feature rows".into()));
        }
        if let Some(r) = rows.iter().find(|r| dot(r, r) > 1.0 + 1e-12) {
            return Err(EnvError::InvalidSize(format!("feature norm {} > 1", dot(r, r).sqrt())));
        }
        Ok(FeatureMap {
            kind: FeatureKind::Custom,
            dim,
            n_states,
            n_actions,
            table: rows.concat(),
        })
    }

    pub fn kind(&self) -> FeatureKind {
        self.kind
    }
    pub fn dim(&self) -> usize {
        self.dim
    }
    pub fn n_states(&self) -> usize {
        self.n_states
    }
    pub fn n_actions(&self) -> usize {
        self.n_actions
    }
    pub fn n_pairs(&self) -> usize {
        self.n_states * self.n_actions
    }

    pub fn pair(&self, s: usize, a: usize) -> usize {
        s * self.n_actions + a
    }

    pub fn phi(&self, s: usize, a: usize) -> &[f64] {
        self.phi_pair(self.pair(s, a))
    }

    pub fn phi_pair(&self, p: usize) -> &[f64] {
        &self.table[p * self.dim..(p + 1) * self.dim]
    }
}

/// A tabular MDP together with an exact linear-MDP embedding
/// `P_h(s'|s,a) = <phi(s,a), mu_h(s')>`, `r_h(s,a) = <phi(s,a), theta_h>`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearMdpSpec {
    pub mdp: EpisodicMdp,
    pub features: FeatureMap,
    /// `mu[h]` is `d x n_states`, row-major.
    pub mu: Vec<Vec<f64>>,
    pub theta: Vec<Vec<f64>>,
}

impl LinearMdpSpec {
    /// Checks both linear identities entrywise and the norm bounds.
    pub fn verify(&self, tol: f64) -> Result<(), EnvError> {
        let m = &self.mdp;
        let d = self.features.dim();
        let n = m.n_states();
        let bound = (d as f64).sqrt() + tol;
        for h in 0..m.horizon() {
            let mu = &self.mu[h];
            if norm_sq(&self.theta[h]).sqrt() > bound {
                return Err(EnvError::LinearIdentity(format!("||theta_{h}|| > sqrt(d)")));
            }
            let total: Vec<f64> = (0..d).map(|i| mu[i * n..(i + 1) * n].iter().sum()).collect();
            if norm_sq(&total).sqrt() > bound {
                return Err(EnvError::LinearIdentity(format!("||mu_{h}(S)|| > sqrt(d)")));
            }
            for s in 0..n {
                for a in 0..m.n_actions() {
                    let phi = self.features.phi(s, a);
                    let r = dot(phi, &self.theta[h]);
                    if (r - m.reward(h, s, a)).abs() > tol {
                        return Err(EnvError::LinearIdentity(format!("reward h={h} s={s} a={a}")));
                    }
                    let row = m.transition_row(h, s, a);
                    for (sp, p) in row.iter().enumerate() {
                        let lin: f64 = (0..d).map(|i| phi[i] * mu[i * n + sp]).sum();
                        if (lin - p).abs() > tol {
                            return Err(EnvError::LinearIdentity(format!(
                                "transition h={h} s={s} a={a} s'={sp}"
                            )));
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

fn norm_sq(x: &[f64]) -> f64 {
    dot(x, x)
}

pub const NCHAIN_LEFT: usize = 0;
pub const NCHAIN_RIGHT: usize = 1;

/// N-Chain: states `s_1..s_N` (indices `0..N`), start in `s_2`, deterministic
/// left/right moves, `H = N + 9`. Taking left in `s_1` pays 0.001; any action
/// taken in `s_N` pays 1 (right self-loops there).
pub fn make_nchain(n: usize, kind: FeatureKind) -> Result<(EpisodicMdp, FeatureMap), EnvError> {
    if n < 3 {
        return Err(EnvError::InvalidSize(format!("N-Chain needs N >= 3, got {n}")));
    }
    let a = 2;
    let mut transitions = vec![0.0; n * a * n];
    let mut rewards = vec![0.0; n * a];
    for s in 0..n {
        let left = s.saturating_sub(1);
        let right = (s + 1).min(n - 1);
        transitions[(s * a + NCHAIN_LEFT) * n + left] = 1.0;
        transitions[(s * a + NCHAIN_RIGHT) * n + right] = 1.0;
    }
    rewards[NCHAIN_LEFT] = 0.001;
    rewards[(n - 1) * a + NCHAIN_LEFT] = 1.0;
    rewards[(n - 1) * a + NCHAIN_RIGHT] = 1.0;
    let mdp = EpisodicMdp::new(
        format!("nchain-{n}"),
        n,
        a,
        n + 9,
        true,
        transitions,
        rewards,
        InitialState::Fixed(1),
    )?;
    let features = match kind {
        FeatureKind::Thermometer => FeatureMap::thermometer(n, a),
        FeatureKind::TabularLinear => FeatureMap::tabular_linear(n, a),
        _ => FeatureMap::one_hot(n, a),
    };
    Ok((mdp, features))
}

/// RiverSwim dynamics. Probabilities of the "right" action are given as
/// `(left, stay, right)` triples.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RiverSwimParams {
    pub interior_right: (f64, f64, f64),
    pub first_right: (f64, f64, f64),
    pub last_right: (f64, f64, f64),
    pub left_reward: f64,
    pub right_reward: f64,
}

impl Default for RiverSwimParams {
    fn default() -> Self {
        RiverSwimParams {
            interior_right: (0.1, 0.6, 0.3),
            first_right: (0.0, 0.7, 0.3),
            last_right: (0.4, 0.6, 0.0),
            left_reward: 0.005,
            right_reward: 1.0,
        }
    }
}

pub const RIVER_LEFT: usize = 0;
pub const RIVER_RIGHT: usize = 1;

pub fn make_riverswim(n: usize, horizon: usize) -> Result<EpisodicMdp, EnvError> {
    make_riverswim_with(n, horizon, RiverSwimParams::default())
}

pub fn make_riverswim_with(
    n: usize,
    horizon: usize,
    params: RiverSwimParams,
) -> Result<EpisodicMdp, EnvError> {
    if n < 2 || horizon < 1 {
        return Err(EnvError::InvalidSize(format!("RiverSwim needs N >= 2, H >= 1 (got {n}, {horizon})")));
    }
    let a = 2;
    let mut transitions = vec![0.0; n * a * n];
    let mut rewards = vec![0.0; n * a];
    for s in 0..n {
        transitions[(s * a + RIVER_LEFT) * n + s.saturating_sub(1)] = 1.0;
        let (pl, ps, pr) = if s == 0 {
            params.first_right
        } else if s == n - 1 {
            params.last_right
        } else {
            params.interior_right
        };
        let row = &mut transitions[(s * a + RIVER_RIGHT) * n..(s * a + RIVER_RIGHT + 1) * n];
        row[s.saturating_sub(1)] += pl;
        row[s] += ps;
        row[(s + 1).min(n - 1)] += pr;
    }
    rewards[RIVER_LEFT] = params.left_reward;
    rewards[(n - 1) * a + RIVER_RIGHT] = params.right_reward;
    EpisodicMdp::new(
        format!("riverswim-{n}"),
        n,
        a,
        horizon,
        true,
        transitions,
        rewards,
        InitialState::Fixed(0),
    )
}

/// Random non-stationary tabular MDP: each `(h, s, a)` moves to a random
/// support of `sparsity` states with Dirichlet(1) weights, rewards are
/// uniform on `[0, 1]`, episodes start in state 0. Embedded as a linear MDP
/// with one-hot `(s, a)` features, `d = S * A`.
pub fn make_random_linear_mdp<R: Rng + ?Sized>(
    n_states: usize,
    n_actions: usize,
    horizon: usize,
    sparsity: usize,
    rng: &mut R,
) -> Result<LinearMdpSpec, EnvError> {
    if sparsity == 0 || sparsity > n_states {
        return Err(EnvError::InvalidSize(format!(
            "sparsity {sparsity} must be in 1..={n_states}"
        )));
    }
    if n_states == 0 || n_actions == 0 || horizon == 0 {
        return Err(EnvError::InvalidSize("empty MDP".into()));
    }
    let (n, a) = (n_states, n_actions);
    let d = n * a;
    let mut transitions = vec![0.0; horizon * n * a * n];
    let mut rewards = vec![0.0; horizon * n * a];
    for h in 0..horizon {
        for s in 0..n {
            for act in 0..a {
                let support = sample_indices(rng, n, sparsity).into_vec();
                let weights: Vec<f64> = support.iter().map(|_| Exp1.sample(rng)).collect();
                let total: f64 = weights.iter().sum();
                let base = ((h * n + s) * a + act) * n;
                for (sp, w) in support.iter().zip(&weights) {
                    transitions[base + sp] = w / total;
                }
                // renormalize away the last ulp of drift
                let row = &mut transitions[base..base + n];
                let sum: f64 = row.iter().sum();
                row.iter_mut().for_each(|p| *p /= sum);
                rewards[(h * n + s) * a + act] = rng.random::<f64>();
            }
        }
    }
    let mdp = EpisodicMdp::new(
        format!("random-linear-{n}x{a}-h{horizon}"),
        n,
        a,
        horizon,
        false,
        transitions,
        rewards,
        InitialState::Fixed(0),
    )?;
    let features = FeatureMap::tabular_linear(n, a);
    let mut mu = Vec::with_capacity(horizon);
    let mut theta = Vec::with_capacity(horizon);
    for h in 0..horizon {
        let mut m = vec![0.0; d * n];
        let mut t = vec![0.0; d];
        for s in 0..n {
            for act in 0..a {
                let p = s * a + act;
                m[p * n..(p + 1) * n].copy_from_slice(mdp.transition_row(h, s, act));
                t[p] = mdp.reward(h, s, act);
            }
        }
        mu.push(m);
        theta.push(t);
    }
    Ok(LinearMdpSpec { mdp, features, mu, theta })
}

/// Markov policy `pi_h(a | s)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Policy {
    n_states: usize,
    n_actions: usize,
    horizon: usize,
    probs: Vec<f64>,
}

impl Policy {
    /// `actions[h * S + s]`
    pub fn deterministic(n_states: usize, n_actions: usize, horizon: usize, actions: &[usize]) -> Self {
        assert_eq!(actions.len(), horizon * n_states);
        let mut probs = vec![0.0; horizon * n_states * n_actions];
        for (i, a) in actions.iter().enumerate() {
            probs[i * n_actions + a] = 1.0;
        }
        Policy { n_states, n_actions, horizon, probs }
    }

    pub fn uniform(n_states: usize, n_actions: usize, horizon: usize) -> Self {
        Policy {
            n_states,
            n_actions,
            horizon,
            probs: vec![1.0 / n_actions as f64; horizon * n_states * n_actions],
        }
    }

    /// Greedy policy of a `[h][s][a]` Q table, ties to the lowest action.
    pub fn greedy(n_states: usize, n_actions: usize, horizon: usize, q: &[f64]) -> Self {
        let actions: Vec<usize> = q.chunks(n_actions).map(argmax).collect();
        Self::deterministic(n_states, n_actions, horizon, &actions)
    }

    pub fn prob(&self, h: usize, s: usize, a: usize) -> f64 {
        self.probs[(h * self.n_states + s) * self.n_actions + a]
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }
}

/// First index of the maximum; NaNs never win.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in xs.iter().enumerate().skip(1) {
        if *x > xs[best] {
            best = i;
        }
    }
    best
}

/// State values for `h = 0..=H`, the last row being zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValueTable {
    n_states: usize,
    values: Vec<f64>,
}

impl ValueTable {
    pub fn get(&self, h: usize, s: usize) -> f64 {
        self.values[h * self.n_states + s]
    }

    pub fn row(&self, h: usize) -> &[f64] {
        &self.values[h * self.n_states..(h + 1) * self.n_states]
    }

    /// Value of the start-state distribution at `h = 0`.
    pub fn initial_value(&self, mdp: &EpisodicMdp) -> f64 {
        dot(&mdp.initial_distribution(), self.row(0))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimalSolution {
    pub v: ValueTable,
    /// `[h][s][a]`
    pub q: Vec<f64>,
    pub policy: Policy,
}

impl OptimalSolution {
    pub fn q(&self, n_states: usize, n_actions: usize, h: usize, s: usize, a: usize) -> f64 {
        self.q[(h * n_states + s) * n_actions + a]
    }
}

/// Backward induction on the Bellman optimality equation.
pub fn value_iteration(mdp: &EpisodicMdp) -> OptimalSolution {
    let (n, na, big_h) = (mdp.n_states(), mdp.n_actions(), mdp.horizon());
    let mut v = vec![0.0; (big_h + 1) * n];
    let mut q = vec![0.0; big_h * n * na];
    let mut actions = vec![0; big_h * n];
    for h in (0..big_h).rev() {
        let (head, next) = v.split_at_mut((h + 1) * n);
        let next = &next[..n];
        for s in 0..n {
            let row = &mut q[(h * n + s) * na..(h * n + s + 1) * na];
            for (a, qa) in row.iter_mut().enumerate() {
                *qa = mdp.reward(h, s, a) + mdp.expected_next(h, s, a, next);
            }
            let best = argmax(row);
            actions[h * n + s] = best;
            head[h * n + s] = row[best];
        }
    }
    OptimalSolution {
        v: ValueTable { n_states: n, values: v },
        q,
        policy: Policy::deterministic(n, na, big_h, &actions),
    }
}

/// Backward induction on the Bellman equation of a fixed policy.
pub fn policy_evaluation(mdp: &EpisodicMdp, policy: &Policy) -> ValueTable {
    let (n, na, big_h) = (mdp.n_states(), mdp.n_actions(), mdp.horizon());
    assert_eq!(policy.horizon, big_h, "policy horizon mismatch");
    let mut v = vec![0.0; (big_h + 1) * n];
    for h in (0..big_h).rev() {
        let (head, next) = v.split_at_mut((h + 1) * n);
        let next = &next[..n];
        for s in 0..n {
            let mut total = 0.0;
            for a in 0..na {
                let p = policy.prob(h, s, a);
                if p > 0.0 {
                    total += p * (mdp.reward(h, s, a) + mdp.expected_next(h, s, a, next));
                }
            }
            head[h * n + s] = total;
        }
    }
    ValueTable { n_states: n, values: v }
}
