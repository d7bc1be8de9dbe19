//! Configuration, seeded experiment runs, exact regret, sweeps and reports.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::{self, BufRead, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::baselines::{
    FixedActionAgent, LinearAgent, LsviPhe, LsviUcb, OracleAgent, PheConfig, UcbConfig,
};
use crate::env::{
    make_nchain, make_random_linear_mdp, make_riverswim_with, policy_evaluation, value_iteration, EnvError,
    Episode, EpisodicMdp, FeatureKind, FeatureMap, Policy, RiverSwimParams, Transition,
};
use crate::lmc::{BetaMode, ChainsMode, LmcAgent, LmcError, LmcSchedule, StepSizeMode, UpdatesMode};
use crate::neural::{thermometer_obs, DeepAgent, DqnTrainConfig, Experience, NeuralError};
use crate::par::{map_indexed, Execution};
use crate::posterior::{PosteriorError, PosteriorFixture, TestReport};
use crate::rng::{child_seed, stream, substream, SeededRng};
use crate::sgld::AdamSgldHyper;

pub const SCHEMA: &str = "v1";
pub const OUT_DIR_ENV: &str = "LMC_OUT_DIR";

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config error: {0}")]
    Config(String),
    #[error("exact evaluation is not available: {0}")]
    InfeasibleExact(String),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Lmc(#[from] LmcError),
    #[error(transparent)]
    Neural(#[from] NeuralError),
    #[error(transparent)]
    Posterior(#[from] PosteriorError),
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Toml(#[from] toml::de::Error),
}

type Result<T, E = HarnessError> = std::result::Result<T, E>;

fn default_sparsity() -> usize {
    3
}

fn default_feature_kind() -> FeatureKind {
    FeatureKind::OneHot
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case", deny_unknown_fields)]
pub enum EnvSpec {
    Nchain {
        n: usize,
        #[serde(default = "default_feature_kind")]
        features: FeatureKind,
    },
    Riverswim {
        n: usize,
        horizon: usize,
        #[serde(default)]
        params: RiverSwimParams,
    },
    RandomLinear {
        n_states: usize,
        n_actions: usize,
        horizon: usize,
        #[serde(default = "default_sparsity")]
        sparsity: usize,
        /// Seed of the generator; the MDP is fixed across run seeds.
        #[serde(default)]
        env_seed: u64,
    },
}

impl EnvSpec {
    pub fn build(&self) -> Result<(EpisodicMdp, FeatureMap)> {
        Ok(match self {
            EnvSpec::Nchain { n, features } => make_nchain(*n, *features)?,
            EnvSpec::Riverswim { n, horizon, params } => {
                let mdp = make_riverswim_with(*n, *horizon, *params)?;
                let f = FeatureMap::one_hot(*n, mdp.n_actions());
                (mdp, f)
            }
            EnvSpec::RandomLinear { n_states, n_actions, horizon, sparsity, env_seed } => {
                let spec = make_random_linear_mdp(*n_states, *n_actions, *horizon, *sparsity, &mut substream(*env_seed, stream::ENV))?;
                (spec.mdp, spec.features)
            }
        })
    }

    /// Parses `name:key=value,key=value`, e.g. `riverswim:n=12,horizon=40`.
    pub fn parse_inline(spec: &str) -> Result<Self> {
        let (name, rest) = spec.split_once(':').unwrap_or((spec, ""));
        let mut table = toml::Table::new();
        table.insert("name".into(), toml::Value::String(name.trim().to_string()));
        for kv in rest.split(',').filter(|s| !s.trim().is_empty()) {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| HarnessError::Config(format!("expected key=value, got `{kv}`")))?;
            set_dotted(&mut table, k.trim(), parse_value(v.trim()))?;
        }
        Ok(toml::Value::Table(table).try_into()?)
    }
}

fn default_lambda() -> f64 {
    1.0
}
fn default_one() -> f64 {
    1.0
}
fn default_chains() -> usize {
    1
}
fn default_delta() -> f64 {
    0.05
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BetaKind {
    Auto,
    Theoretical,
    Fixed,
    Noiseless,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case", deny_unknown_fields)]
pub enum AgentSpec {
    LmcLsvi {
        #[serde(default = "default_lambda")]
        lambda_ridge: f64,
        /// Fixed step size; automatic when absent.
        #[serde(default)]
        eta: Option<f64>,
        /// Defaults to `fixed` when `beta` is given, `auto` otherwise.
        #[serde(default)]
        beta_mode: Option<BetaKind>,
        #[serde(default = "default_one")]
        beta_scale: f64,
        #[serde(default)]
        beta: Option<f64>,
        /// Fixed update count; automatic when absent.
        #[serde(default)]
        updates: Option<usize>,
        #[serde(default = "default_chains")]
        chains: usize,
        #[serde(default)]
        auto_chains: bool,
        #[serde(default = "default_delta")]
        delta: f64,
    },
    LsviUcb {
        #[serde(default = "default_one")]
        bonus: f64,
        #[serde(default = "default_lambda")]
        lambda_ridge: f64,
    },
    LsviPhe {
        #[serde(default = "default_chains")]
        ensemble: usize,
        #[serde(default = "default_one")]
        sigma: f64,
        #[serde(default = "default_lambda")]
        lambda_ridge: f64,
    },
    Oracle,
    FixedAction {
        #[serde(default)]
        action: usize,
    },
    LmcDqn {
        lr: f64,
        #[serde(default = "default_one")]
        a: f64,
        /// Inverse temperature; absent means no noise.
        #[serde(default)]
        beta: Option<f64>,
        #[serde(default)]
        normalized_obs: bool,
        #[serde(default)]
        train: DqnTrainConfig,
    },
    Dqn {
        lr: f64,
        #[serde(default)]
        normalized_obs: bool,
        #[serde(default = "dqn_train_default")]
        train: DqnTrainConfig,
    },
}

fn dqn_train_default() -> DqnTrainConfig {
    DqnTrainConfig { updates_per_step: 1, ..Default::default() }
}

impl AgentSpec {
    pub fn is_neural(&self) -> bool {
        matches!(self, AgentSpec::LmcDqn { .. } | AgentSpec::Dqn { .. })
    }

    pub fn label(&self) -> &'static str {
        match self {
            AgentSpec::LmcLsvi { .. } => "lmc_lsvi",
            AgentSpec::LsviUcb { .. } => "lsvi_ucb",
            AgentSpec::LsviPhe { .. } => "lsvi_phe",
            AgentSpec::Oracle => "oracle",
            AgentSpec::FixedAction { .. } => "fixed_action",
            AgentSpec::LmcDqn { .. } => "lmc_dqn",
            AgentSpec::Dqn { .. } => "dqn",
        }
    }

    pub fn lmc_schedule(&self) -> Option<LmcSchedule> {
        let AgentSpec::LmcLsvi { lambda_ridge, eta, beta_mode, beta_scale, beta, updates, chains, auto_chains, delta } = self else {
            return None;
        };
        Some(LmcSchedule {
            lambda_ridge: *lambda_ridge,
            eta: eta.map_or(StepSizeMode::Auto, StepSizeMode::Fixed),
            beta: match beta_mode.unwrap_or(if beta.is_some() { BetaKind::Fixed } else { BetaKind::Auto }) {
                BetaKind::Auto => BetaMode::Auto { scale: *beta_scale },
                BetaKind::Theoretical => BetaMode::Theoretical { delta: *delta },
                BetaKind::Fixed => BetaMode::Fixed(beta.unwrap_or(1.0)),
                BetaKind::Noiseless => BetaMode::Noiseless,
            },
            updates: updates.map_or(UpdatesMode::Auto, UpdatesMode::Fixed),
            chains: if *auto_chains { ChainsMode::Auto { delta: *delta } } else { ChainsMode::Fixed(*chains) },
        })
    }
}

fn default_episodes() -> usize {
    100
}
fn default_total_steps() -> u64 {
    100_000
}
fn default_eval_every() -> u64 {
    1000
}
fn default_eval_window() -> usize {
    10
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// `K` for the linear agents.
    #[serde(default = "default_episodes")]
    pub episodes: usize,
    /// Environment steps for the neural agents.
    #[serde(default = "default_total_steps")]
    pub total_steps: u64,
    /// Neural agents: steps between evaluation episodes.
    #[serde(default = "default_eval_every")]
    pub eval_every: u64,
    /// Number of trailing evaluations (neural) or episodes (linear) in the
    /// headline score.
    #[serde(default = "default_eval_window")]
    pub eval_window: usize,
    /// Also write the final agent state as `agent.json`.
    #[serde(default)]
    pub save_agent: bool,
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
    pub env: EnvSpec,
    pub agent: AgentSpec,
}

/// Parses a TOML value written on the command line, falling back to a bare
/// string.
pub fn parse_value(raw: &str) -> toml::Value {
    let doc = format!("v = {raw}");
    match doc.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| toml::Value::String(raw.into())),
        Err(_) => toml::Value::String(raw.into()),
    }
}

/// Sets `a.b.c = value`, creating intermediate tables.
pub fn set_dotted(table: &mut toml::Table, key: &str, value: toml::Value) -> Result<()> {
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts.pop().filter(|s| !s.is_empty()).ok_or_else(|| HarnessError::Config(format!("bad key `{key}`")))?;
    let mut cur = table;
    for p in parts {
        let entry = cur.entry(p.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| HarnessError::Config(format!("`{p}` in `{key}` is not a table")))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

impl RunConfig {
    pub fn from_table(table: toml::Table) -> Result<Self> {
        Ok(toml::Value::Table(table).try_into()?)
    }

    pub fn parse(text: &str, overrides: &[(String, String)]) -> Result<Self> {
        let mut table: toml::Table = text.parse()?;
        for (k, v) in overrides {
            set_dotted(&mut table, k, parse_value(v))?;
        }
        Self::from_table(table)
    }

    pub fn load(path: &Path, overrides: &[(String, String)]) -> Result<Self> {
        Self::parse(&fs::read_to_string(path)?, overrides)
    }

    /// Hash of the canonical (sorted-key) config without `seed` and
    /// `out_dir`, so the seeds of one configuration share a directory.
    pub fn fingerprint(&self) -> String {
        let mut v = serde_json::to_value(self).expect("config serializes");
        if let Some(m) = v.as_object_mut() {
            m.remove("seed");
            m.remove("out_dir");
        }
        let canonical = serde_json::to_string(&v).expect("config serializes");
        let digest = Sha256::digest(canonical.as_bytes());
        digest[..8].iter().fold(String::new(), |mut s, b| {
            let _ = write!(s, "{b:02x}");
            s
        })
    }

    pub fn out_root(&self) -> PathBuf {
        if let Some(dir) = std::env::var_os(OUT_DIR_ENV) {
            return PathBuf::from(dir);
        }
        self.out_dir.clone().unwrap_or_else(|| PathBuf::from("out"))
    }

    pub fn run_dir(&self) -> PathBuf {
        self.out_root().join(self.fingerprint()).join(self.seed.to_string())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRow {
    pub k: usize,
    #[serde(rename = "return")]
    pub ret: f64,
    /// Environment steps completed at the end of the episode.
    pub steps: u64,
    /// Exact `V^pi_k` of the executed greedy policy (linear agents).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub value: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub regret: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cum_regret: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub step: u64,
    #[serde(rename = "return")]
    pub ret: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub fingerprint: String,
    pub seed: u64,
    pub version: String,
    pub env: String,
    pub agent: String,
    pub optimal_value: f64,
    /// Higher is better: mean of the last `eval_window` evaluation returns
    /// (neural) or exact policy values (linear).
    pub score: f64,
    pub episodes: Vec<EpisodeRow>,
    pub evals: Vec<EvalRow>,
}

impl RunRecord {
    pub fn cum_regret(&self) -> Option<f64> {
        self.episodes.last().and_then(|r| r.cum_regret)
    }
}

/// Per-episode and cumulative exact regret.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegretCurve {
    pub optimal_value: f64,
    pub values: Vec<f64>,
    pub per_episode: Vec<f64>,
    pub cumulative: Vec<f64>,
}

/// Exact `V*_1(x_1) - V^{pi_k}_1(x_1)` for each policy in `policies`.
pub fn compute_regret(mdp: &EpisodicMdp, policies: &[Policy]) -> Result<RegretCurve> {
    let v_star = value_iteration(mdp).v.initial_value(mdp);
    let mut curve = RegretCurve { optimal_value: v_star, values: vec![], per_episode: vec![], cumulative: vec![] };
    let mut total = 0.0;
    for p in policies {
        if p.horizon() != mdp.horizon() {
            return Err(HarnessError::InfeasibleExact(format!(
                "policy horizon {} does not match the environment's {}",
                p.horizon(),
                mdp.horizon()
            )));
        }
        let v = policy_evaluation(mdp, p).initial_value(mdp);
        let r = regret_increment(v_star, v);
        total += r;
        curve.values.push(v);
        curve.per_episode.push(r);
        curve.cumulative.push(total);
    }
    Ok(curve)
}

/// Floating-point round-off can leave a tiny negative gap for an optimal
/// policy; that is reported as zero.
fn regret_increment(v_star: f64, v: f64) -> f64 {
    let r = v_star - v;
    if r < 0.0 && r > -1e-9 * (1.0 + v_star.abs()) {
        0.0
    } else {
        r
    }
}

/// Any of the least-squares agents, in serializable form. Externally
/// tagged: the generator state holds a `u128`, which internally tagged
/// enums cannot buffer.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnyLinearAgent {
    Lmc(LmcAgent),
    Ucb(LsviUcb),
    Phe(LsviPhe),
    Oracle(OracleAgent),
    Fixed(FixedActionAgent),
}

impl AnyLinearAgent {
    fn inner(&self) -> &dyn LinearAgent {
        match self {
            AnyLinearAgent::Lmc(a) => a,
            AnyLinearAgent::Ucb(a) => a,
            AnyLinearAgent::Phe(a) => a,
            AnyLinearAgent::Oracle(a) => a,
            AnyLinearAgent::Fixed(a) => a,
        }
    }

    fn inner_mut(&mut self) -> &mut dyn LinearAgent {
        match self {
            AnyLinearAgent::Lmc(a) => a,
            AnyLinearAgent::Ucb(a) => a,
            AnyLinearAgent::Phe(a) => a,
            AnyLinearAgent::Oracle(a) => a,
            AnyLinearAgent::Fixed(a) => a,
        }
    }
}

impl LinearAgent for AnyLinearAgent {
    fn plan(&mut self, k: usize) -> Result<(), LmcError> {
        self.inner_mut().plan(k)
    }
    fn q_table(&self) -> &[f64] {
        self.inner().q_table()
    }
    fn n_states(&self) -> usize {
        self.inner().n_states()
    }
    fn n_actions(&self) -> usize {
        self.inner().n_actions()
    }
    fn observe(&mut self, t: &Transition) -> Result<(), LmcError> {
        self.inner_mut().observe(t)
    }
}

pub fn build_linear_agent(config: &RunConfig, mdp: &EpisodicMdp, features: &FeatureMap, exec: Execution) -> Result<AnyLinearAgent> {
    let agent_seed = child_seed(config.seed, stream::AGENT);
    let h = mdp.horizon();
    Ok(match &config.agent {
        spec @ AgentSpec::LmcLsvi { .. } => {
            let schedule = spec.lmc_schedule().expect("lmc spec");
            AnyLinearAgent::Lmc(LmcAgent::new(features.clone(), h, config.episodes, schedule, agent_seed)?.with_execution(exec))
        }
        AgentSpec::LsviUcb { bonus, lambda_ridge } => {
            AnyLinearAgent::Ucb(LsviUcb::new(features.clone(), h, UcbConfig { bonus: *bonus, lambda_ridge: *lambda_ridge }))
        }
        AgentSpec::LsviPhe { ensemble, sigma, lambda_ridge } => AnyLinearAgent::Phe(LsviPhe::new(
            features.clone(),
            h,
            PheConfig { ensemble: *ensemble, sigma: *sigma, lambda_ridge: *lambda_ridge },
            substream(agent_seed, 0),
        )),
        AgentSpec::Oracle => AnyLinearAgent::Oracle(OracleAgent::new(mdp)),
        AgentSpec::FixedAction { action } => {
            AnyLinearAgent::Fixed(FixedActionAgent::new(mdp.n_states(), mdp.n_actions(), h, *action))
        }
        other => return Err(HarnessError::Config(format!("{} is not a linear agent", other.label()))),
    })
}

/// Resumable state of a linear-agent run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LinearRun {
    pub agent: AnyLinearAgent,
    mdp: EpisodicMdp,
    env_rng: SeededRng,
    optimal_value: f64,
    k: usize,
    steps: u64,
    cum_regret: f64,
    pub rows: Vec<EpisodeRow>,
}

impl LinearRun {
    pub fn new(config: &RunConfig, exec: Execution) -> Result<Self> {
        let (mdp, features) = config.env.build()?;
        let agent = build_linear_agent(config, &mdp, &features, exec)?;
        let optimal_value = value_iteration(&mdp).v.initial_value(&mdp);
        Ok(LinearRun {
            agent,
            env_rng: substream(config.seed, stream::ENV),
            mdp,
            optimal_value,
            k: 0,
            steps: 0,
            cum_regret: 0.0,
            rows: Vec::new(),
        })
    }

    pub fn mdp(&self) -> &EpisodicMdp {
        &self.mdp
    }

    pub fn optimal_value(&self) -> f64 {
        self.optimal_value
    }

    /// Plan, evaluate the greedy policy exactly, then act for one episode.
    pub fn run_episode(&mut self) -> Result<&EpisodeRow> {
        self.k += 1;
        self.agent.plan(self.k)?;
        let (s, a, h) = (self.mdp.n_states(), self.mdp.n_actions(), self.mdp.horizon());
        let policy = Policy::greedy(s, a, h, self.agent.q_table());
        let value = policy_evaluation(&self.mdp, &policy).initial_value(&self.mdp);
        let regret = regret_increment(self.optimal_value, value);
        self.cum_regret += regret;
        let mut ep = self.mdp.reset(&mut self.env_rng);
        let mut ret = 0.0;
        loop {
            let action = self.agent.act(ep.h, ep.state);
            let t = self.mdp.step(&mut ep, action, &mut self.env_rng)?;
            self.agent.observe(&t)?;
            self.steps += 1;
            ret += t.reward;
            if t.done {
                break;
            }
        }
        self.rows.push(EpisodeRow {
            k: self.k,
            ret,
            steps: self.steps,
            value: Some(value),
            regret: Some(regret),
            cum_regret: Some(self.cum_regret),
        });
        Ok(self.rows.last().expect("just pushed"))
    }
}

/// Resumable state of a neural-agent run on a chain environment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeuralRun {
    pub agent: DeepAgent,
    mdp: EpisodicMdp,
    normalized_obs: bool,
    env_rng: SeededRng,
    eval_rng: SeededRng,
    episode: Episode,
    episode_return: f64,
    k: usize,
    step: u64,
    optimal_value: f64,
    pub rows: Vec<EpisodeRow>,
    pub evals: Vec<EvalRow>,
}

impl NeuralRun {
    pub fn new(config: &RunConfig) -> Result<Self> {
        let (mdp, _) = config.env.build()?;
        let n = mdp.n_states();
        let agent_rng = substream(child_seed(config.seed, stream::AGENT), 0);
        let (agent, normalized_obs) = match &config.agent {
            AgentSpec::LmcDqn { lr, a, beta, normalized_obs, train } => {
                let hyper = AdamSgldHyper { a: *a, eta: *lr, beta: *beta, ..Default::default() };
                (DeepAgent::lmc_dqn(n, mdp.n_actions(), train.clone(), hyper, agent_rng), *normalized_obs)
            }
            AgentSpec::Dqn { lr, normalized_obs, train } => {
                (DeepAgent::dqn(n, mdp.n_actions(), train.clone(), *lr, agent_rng), *normalized_obs)
            }
            other => return Err(HarnessError::Config(format!("{} is not a neural agent", other.label()))),
        };
        let mut env_rng = substream(config.seed, stream::ENV);
        let episode = mdp.reset(&mut env_rng);
        Ok(NeuralRun {
            agent,
            optimal_value: value_iteration(&mdp).v.initial_value(&mdp),
            normalized_obs,
            eval_rng: substream(config.seed, stream::EVAL),
            env_rng,
            episode,
            episode_return: 0.0,
            k: 0,
            step: 0,
            mdp,
            rows: Vec::new(),
            evals: Vec::new(),
        })
    }

    fn obs(&self, s: usize) -> Vec<f64> {
        thermometer_obs(self.mdp.n_states(), s, self.normalized_obs)
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One environment step, with training. The horizon ends an episode and
    /// is stored as terminal.
    pub fn step(&mut self) -> Result<Transition> {
        let obs = self.obs(self.episode.state);
        let action = self.agent.act(&obs);
        let t = self.mdp.step(&mut self.episode, action, &mut self.env_rng)?;
        self.step += 1;
        self.episode_return += t.reward;
        let next_obs = self.obs(t.next_state);
        self.agent.observe(Experience { obs, action, reward: t.reward, next_obs, done: t.done })?;
        if t.done {
            self.k += 1;
            self.rows.push(EpisodeRow {
                k: self.k,
                ret: self.episode_return,
                steps: self.step,
                value: None,
                regret: None,
                cum_regret: None,
            });
            self.episode_return = 0.0;
            self.episode = self.mdp.reset(&mut self.env_rng);
        }
        Ok(t)
    }

    /// Greedy episode on an independent evaluation stream.
    pub fn evaluate(&mut self) -> Result<f64> {
        let mut ep = self.mdp.reset(&mut self.eval_rng);
        let mut ret = 0.0;
        loop {
            let action = self.agent.act_eval(&self.obs(ep.state));
            let t = self.mdp.step(&mut ep, action, &mut self.eval_rng)?;
            ret += t.reward;
            if t.done {
                break;
            }
        }
        self.evals.push(EvalRow { step: self.step, ret });
        Ok(ret)
    }
}

fn tail_mean(xs: &[f64], window: usize) -> f64 {
    let tail = &xs[xs.len().saturating_sub(window.max(1))..];
    if tail.is_empty() {
        0.0
    } else {
        tail.iter().sum::<f64>() / tail.len() as f64
    }
}

/// Wall-clock per episode, kept apart from the deterministic payload.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TimingRow {
    pub k: usize,
    pub wall_ms: f64,
}

fn env_label(spec: &EnvSpec) -> String {
    match spec {
        EnvSpec::Nchain { n, .. } => format!("nchain-{n}"),
        EnvSpec::Riverswim { n, horizon, .. } => format!("riverswim-{n}-h{horizon}"),
        EnvSpec::RandomLinear { n_states, n_actions, horizon, env_seed, .. } => {
            format!("random-linear-{n_states}x{n_actions}-h{horizon}-e{env_seed}")
        }
    }
}

/// Runs one configuration in memory.
pub fn run_experiment(config: &RunConfig) -> Result<(RunRecord, Vec<TimingRow>)> {
    run_experiment_with(config, Execution::Parallel)
}

pub fn run_experiment_with(config: &RunConfig, exec: Execution) -> Result<(RunRecord, Vec<TimingRow>)> {
    let mut timing = Vec::new();
    let base = RunRecord {
        fingerprint: config.fingerprint(),
        seed: config.seed,
        version: env!("CARGO_PKG_VERSION").to_string(),
        env: env_label(&config.env),
        agent: config.agent.label().to_string(),
        optimal_value: 0.0,
        score: 0.0,
        episodes: Vec::new(),
        evals: Vec::new(),
    };
    if config.agent.is_neural() {
        let mut run = NeuralRun::new(config)?;
        let mut last_k = 0;
        let mut clock = Instant::now();
        while run.step < config.total_steps {
            run.step()?;
            if run.k != last_k {
                last_k = run.k;
                timing.push(TimingRow { k: run.k, wall_ms: clock.elapsed().as_secs_f64() * 1e3 });
                clock = Instant::now();
            }
            if config.eval_every > 0 && run.step % config.eval_every == 0 {
                run.evaluate()?;
            }
        }
        let evals: Vec<f64> = run.evals.iter().map(|e| e.ret).collect();
        Ok((
            RunRecord {
                optimal_value: run.optimal_value,
                score: tail_mean(&evals, config.eval_window),
                episodes: run.rows,
                evals: run.evals,
                ..base
            },
            timing,
        ))
    } else {
        let mut run = LinearRun::new(config, exec)?;
        for _ in 0..config.episodes {
            let clock = Instant::now();
            run.run_episode()?;
            timing.push(TimingRow { k: run.k, wall_ms: clock.elapsed().as_secs_f64() * 1e3 });
        }
        let values: Vec<f64> = run.rows.iter().filter_map(|r| r.value).collect();
        Ok((
            RunRecord {
                optimal_value: run.optimal_value,
                score: tail_mean(&values, config.eval_window),
                episodes: run.rows,
                ..base
            },
            timing,
        ))
    }
}

/// Runs and writes `config.toml`, `env.json`, `episodes.jsonl`,
/// `summary.csv` and `timing.jsonl` under the run directory.
pub fn run_and_save(config: &RunConfig, exec: Execution) -> Result<(RunRecord, PathBuf)> {
    let dir = config.run_dir();
    fs::create_dir_all(&dir)?;
    let (mdp, features) = config.env.build()?;
    write_env_snapshot(&dir.join("env.json"), &mdp, &features)?;
    fs::write(dir.join("config.toml"), toml_string(config)?)?;
    let (record, timing) = if config.save_agent {
        run_with_checkpoint(config, exec, &dir)?
    } else {
        run_experiment_with(config, exec)?
    };
    emit_report(std::slice::from_ref(&record), &dir)?;
    let mut f = io::BufWriter::new(fs::File::create(dir.join("timing.jsonl"))?);
    for t in &timing {
        writeln!(f, "{}", serde_json::to_string(&Tagged { schema: SCHEMA.into(), line: t })?)?;
    }
    f.flush()?;
    Ok((record, dir))
}

/// The config as saved next to its outputs; `out_dir` is dropped since the
/// file already sits inside it.
fn toml_string(config: &RunConfig) -> Result<String> {
    let saved = RunConfig { out_dir: None, ..config.clone() };
    toml::to_string(&saved).map_err(|e| HarnessError::Config(e.to_string()))
}

/// Same as [`run_experiment_with`] but also saves the final agent.
fn run_with_checkpoint(config: &RunConfig, exec: Execution, dir: &Path) -> Result<(RunRecord, Vec<TimingRow>)> {
    let (record, timing) = run_experiment_with(config, exec)?;
    // Replaying is cheaper to maintain than threading the agent out of the
    // loop above, and the run is deterministic.
    if config.agent.is_neural() {
        let mut run = NeuralRun::new(config)?;
        while run.step < config.total_steps {
            run.step()?;
            if config.eval_every > 0 && run.step % config.eval_every == 0 {
                run.evaluate()?;
            }
        }
        run.agent.online().save(&dir.join("network.bin"))?;
        fs::write(dir.join("agent.json"), serde_json::to_string(&run)?)?;
    } else {
        let mut run = LinearRun::new(config, exec)?;
        for _ in 0..config.episodes {
            run.run_episode()?;
        }
        fs::write(dir.join("agent.json"), serde_json::to_string(&run)?)?;
    }
    Ok((record, timing))
}

#[derive(Serialize, Deserialize)]
struct EnvSnapshot {
    schema: String,
    mdp: EpisodicMdp,
    features: FeatureMap,
}

pub fn write_env_snapshot(path: &Path, mdp: &EpisodicMdp, features: &FeatureMap) -> Result<()> {
    let snap = EnvSnapshot { schema: SCHEMA.into(), mdp: mdp.clone(), features: features.clone() };
    fs::write(path, serde_json::to_string(&snap)?)?;
    Ok(())
}

pub fn read_env_snapshot(path: &Path) -> Result<(EpisodicMdp, FeatureMap)> {
    let snap: EnvSnapshot = serde_json::from_str(&fs::read_to_string(path)?)?;
    Ok((snap.mdp, snap.features))
}

/// One JSONL line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
enum Line {
    Run {
        fingerprint: String,
        seed: u64,
        version: String,
        env: String,
        agent: String,
        optimal_value: f64,
        score: f64,
    },
    Episode(EpisodeRow),
    Eval(EvalRow),
}

#[derive(Serialize, Deserialize)]
struct Tagged<T> {
    schema: String,
    #[serde(flatten)]
    line: T,
}

pub const SUMMARY_HEADER: &str = "schema,fingerprint,seed,env,agent,episodes,steps,optimal_value,cum_regret,score";

/// Mean and standard error (`sd / sqrt(n)`, zero for a single value).
pub fn mean_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

fn write_jsonl(records: &[RunRecord], out: &mut impl Write) -> Result<()> {
    for r in records {
        let head = Line::Run {
            fingerprint: r.fingerprint.clone(),
            seed: r.seed,
            version: r.version.clone(),
            env: r.env.clone(),
            agent: r.agent.clone(),
            optimal_value: r.optimal_value,
            score: r.score,
        };
        let lines = std::iter::once(head)
            .chain(r.episodes.iter().cloned().map(Line::Episode))
            .chain(r.evals.iter().cloned().map(Line::Eval));
        for line in lines {
            writeln!(out, "{}", serde_json::to_string(&Tagged { schema: SCHEMA.into(), line })?)?;
        }
    }
    Ok(())
}

/// Per-run rows plus `mean` and `se` rows over the runs.
pub fn summary_csv(records: &[RunRecord]) -> String {
    let mut s = String::from(SUMMARY_HEADER);
    s.push('\n');
    let fmt_opt = |x: Option<f64>| x.map(|v| v.to_string()).unwrap_or_default();
    for r in records {
        let steps = r.episodes.last().map(|e| e.steps).unwrap_or(0);
        let _ = writeln!(
            s,
            "{SCHEMA},{},{},{},{},{},{},{},{},{}",
            r.fingerprint,
            r.seed,
            r.env,
            r.agent,
            r.episodes.len(),
            steps,
            r.optimal_value,
            fmt_opt(r.cum_regret()),
            r.score
        );
    }
    if !records.is_empty() {
        let scores: Vec<f64> = records.iter().map(|r| r.score).collect();
        let regrets: Vec<f64> = records.iter().filter_map(|r| r.cum_regret()).collect();
        let (sm, sse) = mean_se(&scores);
        let (rm, rse) = if regrets.len() == records.len() { mean_se(&regrets) } else { (f64::NAN, f64::NAN) };
        let show = |x: f64| if x.is_nan() { String::new() } else { x.to_string() };
        let f = &records[0];
        let _ = writeln!(s, "{SCHEMA},{},mean,{},{},,,,{},{sm}", f.fingerprint, f.env, f.agent, show(rm));
        let _ = writeln!(s, "{SCHEMA},{},se,{},{},,,,{},{sse}", f.fingerprint, f.env, f.agent, show(rse));
    }
    s
}

/// Writes `episodes.jsonl` and `summary.csv` into `dir`.
pub fn emit_report(records: &[RunRecord], dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut f = io::BufWriter::new(fs::File::create(dir.join("episodes.jsonl"))?);
    write_jsonl(records, &mut f)?;
    f.flush()?;
    fs::write(dir.join("summary.csv"), summary_csv(records))?;
    Ok(())
}

/// Reads the records back from an `episodes.jsonl` file.
pub fn parse_report(path: &Path) -> Result<Vec<RunRecord>> {
    let file = io::BufReader::new(fs::File::open(path)?);
    let mut out: Vec<RunRecord> = Vec::new();
    for (i, line) in file.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let tagged: Tagged<Line> = serde_json::from_str(&line)?;
        if tagged.schema != SCHEMA {
            return Err(HarnessError::Config(format!("{}:{}: unknown schema {}", path.display(), i + 1, tagged.schema)));
        }
        match tagged.line {
            Line::Run { fingerprint, seed, version, env, agent, optimal_value, score } => out.push(RunRecord {
                fingerprint,
                seed,
                version,
                env,
                agent,
                optimal_value,
                score,
                episodes: Vec::new(),
                evals: Vec::new(),
            }),
            Line::Episode(row) => current(&mut out, path, i)?.episodes.push(row),
            Line::Eval(row) => current(&mut out, path, i)?.evals.push(row),
        }
    }
    Ok(out)
}

fn current<'a>(out: &'a mut [RunRecord], path: &Path, i: usize) -> Result<&'a mut RunRecord> {
    out.last_mut()
        .ok_or_else(|| HarnessError::Config(format!("{}:{}: row before any run header", path.display(), i + 1)))
}

/// Aggregate over records grouped by fingerprint, sorted by key.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub fingerprint: String,
    pub env: String,
    pub agent: String,
    pub runs: usize,
    pub score_mean: f64,
    pub score_se: f64,
    pub cum_regret_mean: Option<f64>,
    pub cum_regret_se: Option<f64>,
}

pub fn aggregate(records: &[RunRecord]) -> Vec<AggregateRow> {
    let mut groups: BTreeMap<&str, Vec<&RunRecord>> = BTreeMap::new();
    for r in records {
        groups.entry(&r.fingerprint).or_default().push(r);
    }
    groups
        .into_iter()
        .map(|(fp, rs)| {
            let scores: Vec<f64> = rs.iter().map(|r| r.score).collect();
            let regrets: Vec<f64> = rs.iter().filter_map(|r| r.cum_regret()).collect();
            let (score_mean, score_se) = mean_se(&scores);
            let (cm, cs) = if regrets.len() == rs.len() {
                let (m, s) = mean_se(&regrets);
                (Some(m), Some(s))
            } else {
                (None, None)
            };
            AggregateRow {
                fingerprint: fp.to_string(),
                env: rs[0].env.clone(),
                agent: rs[0].agent.clone(),
                runs: rs.len(),
                score_mean,
                score_se,
                cum_regret_mean: cm,
                cum_regret_se: cs,
            }
        })
        .collect()
}

pub fn aggregate_csv(rows: &[AggregateRow]) -> String {
    let mut s = String::from("fingerprint,env,agent,runs,score_mean,score_se,cum_regret_mean,cum_regret_se\n");
    let o = |x: Option<f64>| x.map(|v| v.to_string()).unwrap_or_default();
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{}",
            r.fingerprint,
            r.env,
            r.agent,
            r.runs,
            r.score_mean,
            r.score_se,
            o(r.cum_regret_mean),
            o(r.cum_regret_se)
        );
    }
    s
}

/// Cartesian grid over dotted config keys, replicated over `seeds`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepGrid {
    pub seeds: Vec<u64>,
    pub base: toml::Table,
    #[serde(default)]
    pub grid: BTreeMap<String, Vec<toml::Value>>,
}

impl SweepGrid {
    pub fn parse(text: &str) -> Result<Self> {
        Ok(toml::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&fs::read_to_string(path)?)
    }

    /// All cells in lexicographic order of the (sorted) keys.
    pub fn cells(&self) -> Vec<BTreeMap<String, toml::Value>> {
        let mut cells = vec![BTreeMap::new()];
        for (key, values) in &self.grid {
            cells = cells
                .into_iter()
                .flat_map(|cell| {
                    values.iter().map(move |v| {
                        let mut c = cell.clone();
                        c.insert(key.clone(), v.clone());
                        c
                    })
                })
                .collect();
        }
        cells
    }

    pub fn config(&self, cell: &BTreeMap<String, toml::Value>, seed: u64) -> Result<RunConfig> {
        let mut table = self.base.clone();
        for (k, v) in cell {
            set_dotted(&mut table, k, v.clone())?;
        }
        table.insert("seed".into(), toml::Value::Integer(seed as i64));
        RunConfig::from_table(table)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub params: BTreeMap<String, String>,
    pub aggregate: AggregateRow,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSummary {
    pub cells: Vec<SweepCell>,
    /// Index of the cell with the highest mean score (first on ties).
    pub best: usize,
}

impl SweepSummary {
    pub fn to_csv(&self) -> String {
        let keys: Vec<&String> = self.cells.first().map(|c| c.params.keys().collect()).unwrap_or_default();
        let mut s = String::new();
        for k in &keys {
            let _ = write!(s, "{k},");
        }
        s.push_str("fingerprint,runs,score_mean,score_se,cum_regret_mean,cum_regret_se,best\n");
        let o = |x: Option<f64>| x.map(|v| v.to_string()).unwrap_or_default();
        for (i, c) in self.cells.iter().enumerate() {
            for k in &keys {
                let _ = write!(s, "{},", c.params[*k]);
            }
            let a = &c.aggregate;
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{}",
                a.fingerprint,
                a.runs,
                a.score_mean,
                a.score_se,
                o(a.cum_regret_mean),
                o(a.cum_regret_se),
                i == self.best
            );
        }
        s
    }
}

/// Runs every (cell, seed) pair as an independent job. With `save` each
/// run writes its own directory; results are merged in grid order.
pub fn sweep(grid: &SweepGrid, exec: Execution, save: bool) -> Result<(SweepSummary, Vec<RunRecord>)> {
    if grid.seeds.is_empty() {
        return Err(HarnessError::Config("sweep needs at least one seed".into()));
    }
    let cells = grid.cells();
    let jobs: Vec<(usize, RunConfig)> = cells
        .iter()
        .enumerate()
        .flat_map(|(i, c)| grid.seeds.iter().map(move |&s| grid.config(c, s).map(|cfg| (i, cfg))))
        .collect::<Result<_>>()?;
    let results = map_indexed(exec, jobs.len(), |j| {
        let cfg = &jobs[j].1;
        if save {
            run_and_save(cfg, Execution::Sequential).map(|(r, _)| r)
        } else {
            run_experiment_with(cfg, Execution::Sequential).map(|(r, _)| r)
        }
    });
    let records: Vec<RunRecord> = results.into_iter().collect::<Result<_>>()?;
    let mut out = Vec::with_capacity(cells.len());
    for (i, cell) in cells.iter().enumerate() {
        let rs: Vec<RunRecord> = jobs
            .iter()
            .zip(&records)
            .filter(|((c, _), _)| *c == i)
            .map(|(_, r)| r.clone())
            .collect();
        let aggregate = aggregate(&rs).into_iter().next().expect("cell has runs");
        let params = cell.iter().map(|(k, v)| (k.clone(), v.to_string())).collect();
        out.push(SweepCell { params, aggregate });
    }
    let best = out
        .iter()
        .enumerate()
        .fold(0, |b, (i, c)| if c.aggregate.score_mean > out[b].aggregate.score_mean { i } else { b });
    Ok((SweepSummary { cells: out, best }, records))
}

/// Builds the posterior fixture, compares the sampler with the closed form
/// and returns the report.
pub fn verify_posterior_cmd(fixture: Option<&Path>, exec: Execution) -> Result<TestReport> {
    let fixture = match fixture {
        Some(p) => {
            let text = fs::read_to_string(p)?;
            if p.extension().is_some_and(|e| e == "toml") {
                toml::from_str(&text)?
            } else {
                serde_json::from_str(&text)?
            }
        }
        None => PosteriorFixture::default(),
    };
    Ok(fixture.verify(exec)?.0)
}

/// `V*` table and initial value of an environment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleReport {
    pub schema: String,
    pub env: String,
    pub horizon: usize,
    pub optimal_value: f64,
    /// `v[h][s]` for `h = 0..H`.
    pub v: Vec<Vec<f64>>,
    /// Greedy optimal action per `(h, s)`.
    pub policy: Vec<Vec<usize>>,
}

pub fn oracle_report(mdp: &EpisodicMdp) -> OracleReport {
    let sol = value_iteration(mdp);
    let (s, a, h) = (mdp.n_states(), mdp.n_actions(), mdp.horizon());
    OracleReport {
        schema: SCHEMA.into(),
        env: mdp.name().to_string(),
        horizon: h,
        optimal_value: sol.v.initial_value(mdp),
        v: (0..h).map(|t| sol.v.row(t).to_vec()).collect(),
        policy: (0..h)
            .map(|t| (0..s).map(|x| (0..a).find(|&u| sol.policy.prob(t, x, u) > 0.5).unwrap_or(0)).collect())
            .collect(),
    }
}

/// Loads the environment named by `spec`: either an `env.json` snapshot path
/// or an inline `name:key=value,...` description.
pub fn load_env(spec: &str) -> Result<EpisodicMdp> {
    let p = Path::new(spec);
    if p.is_file() {
        return Ok(read_env_snapshot(p)?.0);
    }
    Ok(EnvSpec::parse_inline(spec)?.build()?.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    const LINEAR: &str = r#"
seed = 3
episodes = 5
[env]
name = "riverswim"
n = 4
horizon = 6
[agent]
name = "lmc_lsvi"
updates = 8
"#;

    #[test]
    fn overrides_and_fingerprint() {
        let a = RunConfig::parse(LINEAR, &[]).unwrap();
        let b = RunConfig::parse(LINEAR, &[("seed".into(), "9".into())]).unwrap();
        let c = RunConfig::parse(LINEAR, &[("agent.updates".into(), "9".into())]).unwrap();
        assert_eq!(b.seed, 9);
        assert_eq!(a.fingerprint(), b.fingerprint());
        assert_ne!(a.fingerprint(), c.fingerprint());
        assert_eq!(a.fingerprint().len(), 16);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::parse(LINEAR, &[("agent.bogus".into(), "1".into())]).is_err());
    }

    #[test]
    fn inline_env_spec() {
        let e = EnvSpec::parse_inline("riverswim:n=12,horizon=40").unwrap();
        assert_eq!(e, EnvSpec::Riverswim { n: 12, horizon: 40, params: RiverSwimParams::default() });
        assert_eq!(load_env("nchain:n=5").unwrap().horizon(), 14);
    }

    #[test]
    fn oracle_run_has_zero_regret() {
        let cfg = RunConfig::parse(LINEAR, &[("agent".into(), "{ name = \"oracle\" }".into())]).unwrap();
        let (rec, _) = run_experiment(&cfg).unwrap();
        assert_eq!(rec.cum_regret(), Some(0.0));
        assert_eq!(rec.episodes.len(), 5);
    }

    #[test]
    fn mean_se_hand_values() {
        let (m, se) = mean_se(&[1.0, 2.0, 6.0]);
        assert_eq!(m, 3.0);
        // sample variance 7, se = sqrt(7/3)
        assert!((se - (7.0f64 / 3.0).sqrt()).abs() < 1e-15);
    }

    #[test]
    fn grid_cells_are_cartesian() {
        let g = SweepGrid::parse(
            r#"
seeds = [0, 1]
[base]
episodes = 2
env = { name = "riverswim", n = 3, horizon = 4 }
agent = { name = "lsvi_ucb" }
[grid]
"agent.bonus" = [0.1, 1.0]
"agent.lambda_ridge" = [1.0, 2.0, 3.0]
"#,
        )
        .unwrap();
        assert_eq!(g.cells().len(), 6);
        let (summary, records) = sweep(&g, Execution::Sequential, false).unwrap();
        assert_eq!(records.len(), 12);
        assert_eq!(summary.cells.len(), 6);
        assert!(summary.cells.iter().all(|c| c.aggregate.runs == 2));
    }
}
