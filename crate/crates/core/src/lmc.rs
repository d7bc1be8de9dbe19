//! LMC-LSVI: least-squares value iteration whose per-step regression weights
//! are sampled by running Langevin Monte Carlo on the ridge loss, plus the
//! multi-sample (optimistic max over `M` chains) variant.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::env::{argmax, FeatureMap, Transition};
use crate::numerics::{
    axpy, dot, eig_extremes_warm, fill_gaussian, Cholesky, EigBounds, EigWarmStart,
    NumericsError, SpdMatrix, Vector, DEFAULT_EIG_TOL, DEFAULT_MAX_ITERS,
};
use crate::par::{map_indexed, Execution};
use crate::rng::{substream, SeededRng};
use crate::sgld::sgld_step;

/// `1 / (2 sqrt(2 e pi))`, the per-sample optimism probability.
pub fn optimism_constant() -> f64 {
    1.0 / (2.0 * (2.0 * std::f64::consts::E * std::f64::consts::PI).sqrt())
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LmcError {
    #[error("targets were not rebuilt in episode {episode}")]
    StaleTargets { episode: usize },
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),
}

/// One observed `(phi index, reward, next state)` triple.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Datum {
    pub pair: usize,
    pub reward: f64,
    pub next_state: usize,
}

/// Per-pair aggregate of the raw data. Because features are a table over
/// `(s, a)`, `b` can be rebuilt from these in `O(pairs * (S + d))` instead of
/// a pass over every datum.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PairStats {
    pub count: u64,
    pub reward_sum: f64,
    /// Sorted `(next_state, count)`.
    pub next: Vec<(usize, u64)>,
}

impl PairStats {
    fn add(&mut self, reward: f64, next_state: usize) {
        self.count += 1;
        self.reward_sum += reward;
        match self.next.binary_search_by_key(&next_state, |e| e.0) {
            Ok(i) => self.next[i].1 += 1,
            Err(i) => self.next.insert(i, (next_state, 1)),
        }
    }

    /// `sum over data of (r + V(x'))`
    pub fn target_sum(&self, v_next: &[f64]) -> f64 {
        self.reward_sum + self.next.iter().map(|(s, c)| *c as f64 * v_next[*s]).sum::<f64>()
    }
}

/// Sufficient statistics for one step `h`: the ridge design matrix and the
/// recorded data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepData {
    lambda_ridge: f64,
    design: SpdMatrix,
    data: Vec<Datum>,
    pairs: Vec<PairStats>,
}

impl StepData {
    pub fn new(dim: usize, n_pairs: usize, lambda_ridge: f64) -> Self {
        StepData {
            lambda_ridge,
            design: SpdMatrix::scaled_identity(dim, lambda_ridge),
            data: Vec::new(),
            pairs: vec![PairStats::default(); n_pairs],
        }
    }

    pub fn design(&self) -> &SpdMatrix {
        &self.design
    }

    pub fn data(&self) -> &[Datum] {
        &self.data
    }

    pub fn pair_stats(&self) -> &[PairStats] {
        &self.pairs
    }

    pub fn lambda_ridge(&self) -> f64 {
        self.lambda_ridge
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn record(&mut self, features: &FeatureMap, datum: Datum) -> Result<(), NumericsError> {
        self.design.rank1_update_in_place(features.phi_pair(datum.pair))?;
        self.pairs[datum.pair].add(datum.reward, datum.next_state);
        self.data.push(datum);
        Ok(())
    }

    /// `lambda I + sum phi phi^T` rebuilt from the raw data.
    pub fn batch_design(&self, features: &FeatureMap) -> SpdMatrix {
        let mut m = SpdMatrix::scaled_identity(features.dim(), self.lambda_ridge);
        for d in &self.data {
            m.rank1_update_in_place(features.phi_pair(d.pair)).expect("dimension fixed");
        }
        m
    }

    /// `b = sum [r + V_{h+1}(x')] phi`
    pub fn targets(&self, features: &FeatureMap, v_next: &[f64]) -> Vector {
        let mut b = Vector::zeros(features.dim());
        for (p, st) in self.pairs.iter().enumerate() {
            if st.count > 0 {
                axpy(st.target_sum(v_next), features.phi_pair(p), &mut b);
            }
        }
        b
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepSizeMode {
    /// `1 / (4 lambda_max(Lambda_h))`
    Auto,
    Fixed(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BetaMode {
    /// `1 / sqrt(beta) = scale * H * sqrt(d)`
    Auto { scale: f64 },
    /// The full high-probability constant; see [`theoretical_beta`].
    Theoretical { delta: f64 },
    Fixed(f64),
    /// No injected noise: plain gradient descent.
    Noiseless,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UpdatesMode {
    /// `ceil(2 kappa ln(4 H K d))`
    Auto,
    Fixed(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChainsMode {
    Fixed(usize),
    /// `ceil(ln(H K / delta) / ln(1 / (1 - c)))`
    Auto { delta: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LmcSchedule {
    pub lambda_ridge: f64,
    pub eta: StepSizeMode,
    pub beta: BetaMode,
    pub updates: UpdatesMode,
    pub chains: ChainsMode,
}

impl Default for LmcSchedule {
    fn default() -> Self {
        LmcSchedule {
            lambda_ridge: 1.0,
            eta: StepSizeMode::Auto,
            beta: BetaMode::Auto { scale: 1.0 },
            updates: UpdatesMode::Auto,
            chains: ChainsMode::Fixed(1),
        }
    }
}

impl LmcSchedule {
    pub fn validate(&self) -> Result<(), LmcError> {
        let bad = |m: &str| Err(LmcError::InvalidSchedule(m.to_string()));
        if !(self.lambda_ridge > 0.0) {
            return bad("lambda must be > 0");
        }
        if let StepSizeMode::Fixed(eta) = self.eta {
            if !(eta > 0.0) {
                return bad("fixed eta must be > 0");
            }
        }
        match self.beta {
            BetaMode::Fixed(b) if !(b > 0.0) => return bad("fixed beta must be > 0"),
            BetaMode::Auto { scale } if !(scale > 0.0) => return bad("beta scale must be > 0"),
            BetaMode::Theoretical { delta } if !(delta > 0.0 && delta < 1.0) => {
                return bad("delta must be in (0, 1)")
            }
            _ => {}
        }
        if let UpdatesMode::Fixed(0) = self.updates {
            return bad("fixed J must be >= 1");
        }
        match self.chains {
            ChainsMode::Fixed(0) => bad("M must be >= 1"),
            ChainsMode::Auto { delta } if !(delta > 0.0 && delta < 1.0) => bad("delta must be in (0, 1)"),
            _ => Ok(()),
        }
    }
}

/// Problem dimensions used by the automatic schedules.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProblemDims {
    pub horizon: usize,
    pub episodes: usize,
    pub dim: usize,
}

/// Schedule values for one `(h, k)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ResolvedSchedule {
    pub eta: f64,
    /// `None` means noiseless.
    pub beta: Option<f64>,
    pub updates: usize,
    pub chains: usize,
}

impl ResolvedSchedule {
    pub fn noise_scale(&self) -> f64 {
        match self.beta {
            Some(b) => (2.0 * self.eta / b).sqrt(),
            None => 0.0,
        }
    }
}

/// `ceil(2 kappa ln(4 H K d))`
pub fn auto_updates(kappa: f64, dims: ProblemDims) -> usize {
    let x = 4.0 * (dims.horizon * dims.episodes * dims.dim) as f64;
    (2.0 * kappa * x.ln()).ceil().max(1.0) as usize
}

/// Number of chains that makes the optimistic max fail with probability at
/// most `delta` over all `H K` steps.
pub fn auto_chains(horizon: usize, episodes: usize, delta: f64) -> usize {
    let c = optimism_constant();
    let m = ((horizon * episodes) as f64 / delta).ln() / (1.0 / (1.0 - c)).ln();
    m.ceil().max(1.0) as usize
}

/// Solves `1/sqrt(beta) = 10 H sqrt(d) C_delta + 8/3` where `C_delta`
/// depends on `beta` through the weight-norm bound `B_{delta/2}`; the
/// dependence is logarithmic, so fixed-point iteration converges fast.
pub fn theoretical_beta(dims: ProblemDims, delta: f64) -> f64 {
    let h = dims.horizon as f64;
    let d = dims.dim as f64;
    let k = dims.episodes as f64;
    let mut inv_sqrt_beta: f64 = 0.0;
    for _ in 0..200 {
        let beta = if inv_sqrt_beta > 0.0 { inv_sqrt_beta.powi(-2) } else { f64::INFINITY };
        let bound = 16.0 / 3.0 * h * d * k.sqrt() + (4.0 * k / (3.0 * beta * delta)).sqrt() * d.powf(1.5);
        let c_delta = (0.5 * (k + 1.0).ln()
            + (2.0 * std::f64::consts::SQRT_2 * k * bound / h).ln()
            + (2.0 / delta).ln())
        .sqrt();
        let next = 10.0 * h * d.sqrt() * c_delta + 8.0 / 3.0;
        let done = (next - inv_sqrt_beta).abs() <= 1e-13 * next;
        inv_sqrt_beta = next;
        if done {
            break;
        }
    }
    inv_sqrt_beta.powi(-2)
}

/// Resolves `(eta, beta, J, M)` for one step from the current design matrix.
pub fn auto_schedules(
    design: &SpdMatrix,
    dims: ProblemDims,
    schedule: &LmcSchedule,
    warm: &mut EigWarmStart,
) -> Result<(ResolvedSchedule, EigBounds), LmcError> {
    let bounds = match eig_extremes_warm(design, DEFAULT_EIG_TOL, DEFAULT_MAX_ITERS, warm) {
        Ok(b) => b,
        // the last Rayleigh quotients are still usable estimates
        Err(NumericsError::NoConvergence { estimate, .. }) => estimate,
        Err(e) => return Err(e.into()),
    };
    let eta = match schedule.eta {
        StepSizeMode::Auto => 1.0 / (4.0 * bounds.lambda_max),
        StepSizeMode::Fixed(e) => e,
    };
    let beta = match schedule.beta {
        BetaMode::Auto { scale } => {
            Some((scale * dims.horizon as f64 * (dims.dim as f64).sqrt()).powi(-2))
        }
        BetaMode::Theoretical { delta } => Some(theoretical_beta(dims, delta)),
        BetaMode::Fixed(b) => Some(b),
        BetaMode::Noiseless => None,
    };
    let updates = match schedule.updates {
        UpdatesMode::Auto => auto_updates(bounds.kappa, dims),
        UpdatesMode::Fixed(j) => j,
    };
    let chains = match schedule.chains {
        ChainsMode::Fixed(m) => m,
        ChainsMode::Auto { delta } => auto_chains(dims.horizon, dims.episodes, delta),
    };
    Ok((ResolvedSchedule { eta, beta, updates, chains }, bounds))
}

/// Posterior state of one step `h`: data statistics, the current targets
/// `b_h`, the ridge minimizer and the Langevin chains.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepPosterior {
    pub stats: StepData,
    b: Vector,
    w_hat: Vector,
    chains: Vec<Vector>,
    /// Episode whose targets `b` currently reflects.
    targets_episode: Option<usize>,
    current_episode: usize,
    warm: EigWarmStart,
}

impl StepPosterior {
    pub fn new(dim: usize, n_pairs: usize, lambda_ridge: f64, n_chains: usize) -> Self {
        StepPosterior {
            stats: StepData::new(dim, n_pairs, lambda_ridge),
            b: Vector::zeros(dim),
            w_hat: Vector::zeros(dim),
            chains: vec![Vector::zeros(dim); n_chains],
            targets_episode: None,
            current_episode: 0,
            warm: EigWarmStart::default(),
        }
    }

    pub fn dim(&self) -> usize {
        self.b.dim()
    }

    pub fn b(&self) -> &Vector {
        &self.b
    }

    pub fn w_hat(&self) -> &Vector {
        &self.w_hat
    }

    pub fn chains(&self) -> &[Vector] {
        &self.chains
    }

    pub fn set_chains(&mut self, chains: Vec<Vector>) {
        self.chains = chains;
    }

    /// Marks the targets stale for a new episode.
    pub fn begin_episode(&mut self, k: usize) {
        self.current_episode = k;
    }

    /// `grad L(w) = 2 (Lambda w - b)`
    pub fn grad_loss(&self, w: &[f64]) -> Result<Vector, LmcError> {
        let mut g = Vector::zeros(self.dim());
        self.grad_loss_into(w, &mut g)?;
        Ok(g)
    }

    fn grad_loss_into(&self, w: &[f64], out: &mut [f64]) -> Result<(), LmcError> {
        if self.targets_episode != Some(self.current_episode) {
            return Err(LmcError::StaleTargets { episode: self.current_episode });
        }
        self.stats.design.mul_vec_into(w, out);
        for (o, b) in out.iter_mut().zip(self.b.iter()) {
            *o = 2.0 * (*o - b);
        }
        Ok(())
    }

    /// `L(w) = sum (y - phi^T w)^2 + lambda ||w||^2`, straight from the data.
    pub fn loss(&self, features: &FeatureMap, v_next: &[f64], w: &[f64]) -> f64 {
        let fit: f64 = self
            .stats
            .data
            .iter()
            .map(|d| {
                let y = d.reward + v_next[d.next_state];
                let r = y - dot(features.phi_pair(d.pair), w);
                r * r
            })
            .sum();
        fit + self.stats.lambda_ridge * dot(w, w)
    }

    /// Recomputes `b_h` against `V_{h+1}` and refreshes the ridge minimizer.
    pub fn rebuild_targets(&mut self, features: &FeatureMap, v_next: &[f64]) -> Result<(), LmcError> {
        self.b = self.stats.targets(features, v_next);
        self.w_hat = if self.stats.is_empty() {
            Vector::zeros(self.dim())
        } else {
            Cholesky::factor(&self.stats.design)?.solve(&self.b)?
        };
        self.targets_episode = Some(self.current_episode);
        Ok(())
    }

    /// One Langevin step on every chain; chain `m` draws from `rngs[m]`.
    pub fn noisy_step(&mut self, eta: f64, beta: Option<f64>, rngs: &mut [SeededRng]) -> Result<(), LmcError> {
        let d = self.dim();
        let mut grad = vec![0.0; d];
        let mut noise = vec![0.0; d];
        let mut chains = std::mem::take(&mut self.chains);
        let result = (|| {
            for (w, rng) in chains.iter_mut().zip(rngs.iter_mut()) {
                self.grad_loss_into(w, &mut grad)?;
                fill_gaussian(&mut noise, rng);
                sgld_step(w, &grad, eta, beta, &noise);
            }
            Ok(())
        })();
        self.chains = chains;
        result
    }

    /// Runs `steps` Langevin steps on a single chain `w`.
    pub fn run_chain(&self, w: &mut [f64], eta: f64, beta: Option<f64>, steps: usize, rng: &mut SeededRng) -> Result<(), LmcError> {
        let d = self.dim();
        let mut grad = vec![0.0; d];
        let mut noise = vec![0.0; d];
        for _ in 0..steps {
            self.grad_loss_into(w, &mut grad)?;
            fill_gaussian(&mut noise, rng);
            sgld_step(w, &grad, eta, beta, &noise);
        }
        Ok(())
    }

    /// Runs `steps` Langevin steps on all chains. Chains are independent
    /// given the targets, so they may run in parallel; each consumes only its
    /// own generator, which makes the result identical either way.
    pub fn run_chains(
        &mut self,
        eta: f64,
        beta: Option<f64>,
        steps: usize,
        rngs: &mut [SeededRng],
        exec: Execution,
    ) -> Result<(), LmcError> {
        if self.chains.len() == 1 || !exec.is_parallel() {
            let mut chains = std::mem::take(&mut self.chains);
            let res = chains
                .iter_mut()
                .zip(rngs.iter_mut())
                .try_for_each(|(w, rng)| self.run_chain(w, eta, beta, steps, rng));
            self.chains = chains;
            return res;
        }
        let inputs: Vec<(Vector, SeededRng)> =
            self.chains.iter().cloned().zip(rngs.iter().cloned()).collect();
        let outputs = map_indexed(exec, inputs.len(), |m| {
            let (mut w, mut rng) = inputs[m].clone();
            self.run_chain(&mut w, eta, beta, steps, &mut rng).map(|_| (w, rng))
        });
        for (m, out) in outputs.into_iter().enumerate() {
            let (w, rng) = out?;
            self.chains[m] = w;
            rngs[m] = rng;
        }
        Ok(())
    }

    /// Truncated optimistic estimate `clip(max_m phi^T w_m, 0, bound)`.
    pub fn q_value(&self, phi: &[f64], bound: f64) -> f64 {
        let best = self
            .chains
            .iter()
            .map(|w| dot(phi, w))
            .fold(f64::NEG_INFINITY, f64::max);
        clip_q(best, bound)
    }
}

/// `min(max(x, 0), bound)`
pub fn clip_q(x: f64, bound: f64) -> f64 {
    x.max(0.0).min(bound)
}

/// Snapshot of the quantities the closed-form posterior needs, recorded each
/// time a step is planned.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeTrace {
    pub eta: f64,
    pub beta: Option<f64>,
    pub updates: usize,
    pub design: SpdMatrix,
    pub w_hat: Vector,
}

/// Algorithm state for LMC-LSVI over a finite state-action space.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LmcAgent {
    features: FeatureMap,
    horizon: usize,
    dims: ProblemDims,
    schedule: LmcSchedule,
    n_chains: usize,
    steps: Vec<StepPosterior>,
    rngs: Vec<SeededRng>,
    /// `[h][s][a]` truncated Q of the last planned episode.
    q_table: Vec<f64>,
    episode: usize,
    last_schedules: Vec<Option<ResolvedSchedule>>,
    #[serde(default)]
    record_traces: bool,
    #[serde(default)]
    traces: Vec<Vec<EpisodeTrace>>,
    #[serde(skip)]
    exec: Execution,
}

impl LmcAgent {
    /// `episodes` is the planned `K`, used only by automatic schedules.
    pub fn new(
        features: FeatureMap,
        horizon: usize,
        episodes: usize,
        schedule: LmcSchedule,
        seed: u64,
    ) -> Result<Self, LmcError> {
        schedule.validate()?;
        let dims = ProblemDims { horizon, episodes, dim: features.dim() };
        let n_chains = match schedule.chains {
            ChainsMode::Fixed(m) => m,
            ChainsMode::Auto { delta } => auto_chains(horizon, episodes, delta),
        };
        let steps = (0..horizon)
            .map(|_| StepPosterior::new(features.dim(), features.n_pairs(), schedule.lambda_ridge, n_chains))
            .collect();
        let rngs = (0..n_chains as u64).map(|m| substream(seed, m)).collect();
        Ok(LmcAgent {
            q_table: vec![0.0; horizon * features.n_pairs()],
            features,
            horizon,
            dims,
            schedule,
            n_chains,
            steps,
            rngs,
            episode: 0,
            last_schedules: vec![None; horizon],
            record_traces: false,
            traces: vec![Vec::new(); horizon],
            exec: Execution::Sequential,
        })
    }

    pub fn with_execution(mut self, exec: Execution) -> Self {
        self.exec = exec;
        self
    }

    /// Keep the per-episode `(eta, beta, J, Lambda, w_hat)` history.
    pub fn with_traces(mut self) -> Self {
        self.record_traces = true;
        self
    }

    pub fn features(&self) -> &FeatureMap {
        &self.features
    }
    pub fn horizon(&self) -> usize {
        self.horizon
    }
    pub fn n_chains(&self) -> usize {
        self.n_chains
    }
    pub fn step(&self, h: usize) -> &StepPosterior {
        &self.steps[h]
    }
    pub fn step_mut(&mut self, h: usize) -> &mut StepPosterior {
        &mut self.steps[h]
    }
    pub fn episode(&self) -> usize {
        self.episode
    }
    pub fn traces(&self, h: usize) -> &[EpisodeTrace] {
        &self.traces[h]
    }
    pub fn last_schedule(&self, h: usize) -> Option<ResolvedSchedule> {
        self.last_schedules[h]
    }
    pub fn q_table(&self) -> &[f64] {
        &self.q_table
    }

    /// Truncation bound `H - h` for 0-based `h`.
    pub fn q_bound(&self, h: usize) -> f64 {
        (self.horizon - h) as f64
    }

    pub fn q_value(&self, h: usize, phi: &[f64]) -> f64 {
        self.steps[h].q_value(phi, self.q_bound(h))
    }

    /// `V_{h+1}` from the already planned step `h + 1`.
    fn next_values(&self, h: usize) -> Vec<f64> {
        let n = self.features.n_states();
        if h + 1 == self.horizon {
            return vec![0.0; n];
        }
        let na = self.features.n_actions();
        let row = &self.q_table[(h + 1) * n * na..(h + 2) * n * na];
        row.chunks(na).map(|q| q.iter().copied().fold(0.0, f64::max)).collect()
    }

    /// Backward pass for episode `k` (1-based): rebuild targets, resolve the
    /// schedule, run the warm-started chains, freeze `Q_h^k`.
    pub fn plan_episode(&mut self, k: usize) -> Result<(), LmcError> {
        self.episode = k;
        let na = self.features.n_actions();
        let n = self.features.n_states();
        for h in (0..self.horizon).rev() {
            let v_next = self.next_values(h);
            let step = &mut self.steps[h];
            step.begin_episode(k);
            step.rebuild_targets(&self.features, &v_next)?;
            let (resolved, _) = auto_schedules(step.stats.design(), self.dims, &self.schedule, &mut step.warm)?;
            step.run_chains(resolved.eta, resolved.beta, resolved.updates, &mut self.rngs, self.exec)?;
            if self.record_traces {
                self.traces[h].push(EpisodeTrace {
                    eta: resolved.eta,
                    beta: resolved.beta,
                    updates: resolved.updates,
                    design: step.stats.design().clone(),
                    w_hat: step.w_hat().clone(),
                });
            }
            self.last_schedules[h] = Some(resolved);
            let bound = (self.horizon - h) as f64;
            for s in 0..n {
                for a in 0..na {
                    let q = self.steps[h].q_value(self.features.phi(s, a), bound);
                    self.q_table[(h * n + s) * na + a] = q;
                }
            }
        }
        Ok(())
    }

    pub fn q(&self, h: usize, s: usize, a: usize) -> f64 {
        let na = self.features.n_actions();
        self.q_table[(h * self.features.n_states() + s) * na + a]
    }

    /// Greedy action, ties to the lowest index.
    pub fn select_action(&self, h: usize, s: usize) -> usize {
        let na = self.features.n_actions();
        let base = (h * self.features.n_states() + s) * na;
        argmax(&self.q_table[base..base + na])
    }

    pub fn record_transition(&mut self, h: usize, s: usize, a: usize, reward: f64, next_state: usize) -> Result<(), LmcError> {
        let pair = self.features.pair(s, a);
        self.steps[h]
            .stats
            .record(&self.features, Datum { pair, reward, next_state })?;
        Ok(())
    }

    pub fn observe(&mut self, t: &Transition) -> Result<(), LmcError> {
        self.record_transition(t.h, t.state, t.action, t.reward, t.next_state)
    }
}
