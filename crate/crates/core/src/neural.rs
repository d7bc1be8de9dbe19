//! Small fully connected Q-networks with manual backprop, a replay buffer,
//! and the two deep agents: Adam LMCDQN (Adam SGLD, greedy acting) and an
//! epsilon-greedy DQN trained with Adam.

use std::cmp::Ordering;
use std::collections::HashMap;
use std::io::{self, Read, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::env::argmax;
use crate::numerics::fill_gaussian;
use crate::rng::SeededRng;
use crate::sgld::{asgld_apply, Adam, AdamSgldHyper, SgldError};

const CHECKPOINT_MAGIC: &[u8; 4] = b"LMCN";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum NeuralError {
    #[error("replay buffer holds {have} transitions, need {need}")]
    BufferTooSmall { have: usize, need: usize },
    #[error("parameter vector has length {got}, layer sizes need {expected}")]
    ParamCount { expected: usize, got: usize },
    #[error("bad checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Sgld(#[from] SgldError),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Feed-forward ReLU network stored as one flat parameter vector.
///
/// Layer `l` maps `n_in -> n_out` with weights laid out input-major
/// (`w[i * n_out + j]`) followed by `n_out` biases. Input-major rows make
/// sparse inputs (thermometer codes) cheap in the first layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpParams {
    sizes: Vec<usize>,
    params: Vec<f64>,
}

/// Activations of one forward pass: `acts[0]` is the input, `acts[l]` the
/// post-ReLU output of layer `l - 1`, the last entry the linear output.
#[derive(Debug, Clone, Default)]
pub struct ForwardCache {
    acts: Vec<Vec<f64>>,
    delta: Vec<f64>,
    prev: Vec<f64>,
}

impl ForwardCache {
    pub fn output(&self) -> &[f64] {
        self.acts.last().map(Vec::as_slice).unwrap_or(&[])
    }
}

impl MlpParams {
    pub fn param_count(sizes: &[usize]) -> usize {
        sizes.windows(2).map(|p| p[0] * p[1] + p[1]).sum()
    }

    pub fn zeros(sizes: &[usize]) -> Self {
        MlpParams { sizes: sizes.to_vec(), params: vec![0.0; Self::param_count(sizes)] }
    }

    /// He-uniform weights, zero biases.
    pub fn he_uniform<R: Rng + ?Sized>(sizes: &[usize], rng: &mut R) -> Self {
        let mut net = Self::zeros(sizes);
        let mut off = 0;
        for p in sizes.windows(2) {
            let (n_in, n_out) = (p[0], p[1]);
            let bound = (6.0 / n_in as f64).sqrt();
            for w in &mut net.params[off..off + n_in * n_out] {
                *w = rng.random_range(-bound..bound);
            }
            off += n_in * n_out + n_out;
        }
        net
    }

    pub fn unflatten(sizes: &[usize], params: Vec<f64>) -> Result<Self, NeuralError> {
        let expected = Self::param_count(sizes);
        if params.len() != expected {
            return Err(NeuralError::ParamCount { expected, got: params.len() });
        }
        Ok(MlpParams { sizes: sizes.to_vec(), params })
    }

    pub fn flatten(&self) -> &[f64] {
        &self.params
    }

    pub fn flatten_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    pub fn n_outputs(&self) -> usize {
        *self.sizes.last().unwrap_or(&0)
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        let mut cache = ForwardCache::default();
        self.forward_cached(x, &mut cache);
        cache.acts.pop().unwrap_or_default()
    }

    pub fn forward_cached(&self, x: &[f64], cache: &mut ForwardCache) {
        let n_layers = self.sizes.len() - 1;
        cache.acts.resize(n_layers + 1, Vec::new());
        cache.acts[0].clear();
        cache.acts[0].extend_from_slice(x);
        let mut off = 0;
        for l in 0..n_layers {
            let (n_in, n_out) = (self.sizes[l], self.sizes[l + 1]);
            let w = &self.params[off..off + n_in * n_out];
            let b = &self.params[off + n_in * n_out..off + n_in * n_out + n_out];
            let (head, tail) = cache.acts.split_at_mut(l + 1);
            let input = &head[l];
            let out = &mut tail[0];
            out.clear();
            out.extend_from_slice(b);
            for (i, &xi) in input.iter().enumerate() {
                if xi == 0.0 {
                    continue;
                }
                for (o, wij) in out.iter_mut().zip(&w[i * n_out..(i + 1) * n_out]) {
                    *o += xi * wij;
                }
            }
            if l + 1 < n_layers {
                for o in out.iter_mut() {
                    *o = o.max(0.0);
                }
            }
            off += n_in * n_out + n_out;
        }
    }

    /// Accumulates `d(upstream . output)/d(params)` into `grad`, using the
    /// activations of the last `forward_cached` call on `cache`.
    pub fn backward(&self, cache: &mut ForwardCache, upstream: &[f64], grad: &mut [f64]) {
        let n_layers = self.sizes.len() - 1;
        let ForwardCache { acts, delta, prev } = cache;
        delta.clear();
        delta.extend_from_slice(upstream);
        let mut end = self.params.len();
        for l in (0..n_layers).rev() {
            let (n_in, n_out) = (self.sizes[l], self.sizes[l + 1]);
            let off = end - n_in * n_out - n_out;
            end = off;
            let x = &acts[l];
            for (i, &xi) in x.iter().enumerate() {
                if xi == 0.0 {
                    continue;
                }
                let g = &mut grad[off + i * n_out..off + (i + 1) * n_out];
                for (gij, dj) in g.iter_mut().zip(delta.iter()) {
                    *gij += xi * dj;
                }
            }
            for (gb, dj) in grad[off + n_in * n_out..off + n_in * n_out + n_out].iter_mut().zip(delta.iter()) {
                *gb += dj;
            }
            if l > 0 {
                let w = &self.params[off..off + n_in * n_out];
                prev.clear();
                prev.extend((0..n_in).map(|i| {
                    if x[i] > 0.0 {
                        w[i * n_out..(i + 1) * n_out].iter().zip(delta.iter()).map(|(a, b)| a * b).sum()
                    } else {
                        0.0
                    }
                }));
                std::mem::swap(delta, prev);
            }
        }
    }

    /// Writes `magic, version, layer count, sizes, param count, params`,
    /// all little-endian.
    pub fn write_checkpoint<W: Write>(&self, mut out: W) -> Result<(), NeuralError> {
        out.write_all(CHECKPOINT_MAGIC)?;
        out.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        out.write_all(&(self.sizes.len() as u32).to_le_bytes())?;
        for &s in &self.sizes {
            out.write_all(&(s as u32).to_le_bytes())?;
        }
        out.write_all(&(self.params.len() as u64).to_le_bytes())?;
        for p in &self.params {
            out.write_all(&p.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_checkpoint<R: Read>(mut input: R) -> Result<Self, NeuralError> {
        let mut magic = [0u8; 4];
        input.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(NeuralError::Checkpoint("bad magic".into()));
        }
        let version = read_u32(&mut input)?;
        if version != CHECKPOINT_VERSION {
            return Err(NeuralError::Checkpoint(format!("unsupported version {version}")));
        }
        let n = read_u32(&mut input)? as usize;
        let sizes = (0..n).map(|_| read_u32(&mut input).map(|s| s as usize)).collect::<Result<Vec<_>, _>>()?;
        let mut buf = [0u8; 8];
        input.read_exact(&mut buf)?;
        let count = u64::from_le_bytes(buf) as usize;
        if count != Self::param_count(&sizes) {
            return Err(NeuralError::ParamCount { expected: Self::param_count(&sizes), got: count });
        }
        let mut params = Vec::with_capacity(count);
        for _ in 0..count {
            input.read_exact(&mut buf)?;
            params.push(f64::from_le_bytes(buf));
        }
        Self::unflatten(&sizes, params)
    }

    pub fn save(&self, path: &Path) -> Result<(), NeuralError> {
        let mut f = io::BufWriter::new(std::fs::File::create(path)?);
        self.write_checkpoint(&mut f)?;
        f.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, NeuralError> {
        Self::read_checkpoint(io::BufReader::new(std::fs::File::open(path)?))
    }
}

fn read_u32<R: Read>(input: &mut R) -> io::Result<u32> {
    let mut b = [0u8; 4];
    input.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

/// Thermometer code of state `s` among `n`: ones in positions `0..=s`,
/// optionally scaled by `1/sqrt(n)`.
pub fn thermometer_obs(n: usize, s: usize, normalized: bool) -> Vec<f64> {
    let v = if normalized { 1.0 / (n as f64).sqrt() } else { 1.0 };
    (0..n).map(|x| if x <= s { v } else { 0.0 }).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Experience {
    pub obs: Vec<f64>,
    pub action: usize,
    pub reward: f64,
    pub next_obs: Vec<f64>,
    pub done: bool,
}

/// Fixed-capacity FIFO ring.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplayBuffer {
    capacity: usize,
    items: Vec<Experience>,
    cursor: usize,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        ReplayBuffer { capacity, items: Vec::with_capacity(capacity.min(1 << 16)), cursor: 0 }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn push(&mut self, e: Experience) {
        if self.items.len() < self.capacity {
            self.items.push(e);
        } else {
            self.items[self.cursor] = e;
        }
        self.cursor = (self.cursor + 1) % self.capacity;
    }

    pub fn get(&self, i: usize) -> &Experience {
        &self.items[i]
    }

    /// Uniform indices over occupied slots, with replacement.
    pub fn sample_indices<R: Rng + ?Sized>(&self, batch: usize, rng: &mut R) -> Vec<usize> {
        (0..batch).map(|_| rng.random_range(0..self.items.len())).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DqnTrainConfig {
    pub gamma: f64,
    pub batch_size: usize,
    pub target_sync: u64,
    pub buffer_capacity: usize,
    pub hidden: Vec<usize>,
    /// Optimizer updates per environment step (`J_k`).
    pub updates_per_step: usize,
    /// Training starts once the buffer holds this many transitions.
    pub learning_starts: usize,
    pub eps_start: f64,
    pub eps_end: f64,
    pub eps_decay_steps: u64,
    pub double_q: bool,
}

impl Default for DqnTrainConfig {
    fn default() -> Self {
        DqnTrainConfig {
            gamma: 0.99,
            batch_size: 32,
            target_sync: 100,
            buffer_capacity: 10_000,
            hidden: vec![32, 32],
            updates_per_step: 4,
            learning_starts: 32,
            eps_start: 1.0,
            eps_end: 0.01,
            eps_decay_steps: 1000,
            double_q: false,
        }
    }
}

impl DqnTrainConfig {
    /// Linear decay from `eps_start` to `eps_end` over `eps_decay_steps`.
    pub fn epsilon(&self, step: u64) -> f64 {
        if step >= self.eps_decay_steps {
            return self.eps_end;
        }
        let frac = step as f64 / self.eps_decay_steps as f64;
        self.eps_start + frac * (self.eps_end - self.eps_start)
    }
}

/// Target-network outputs keyed by the bit pattern of the observation.
/// Valid while the target network is frozen; it is a pure cache, so it is
/// neither serialized nor compared.
#[derive(Debug, Clone, Default)]
pub struct TargetMemo(HashMap<Vec<u64>, Vec<f64>>);

impl TargetMemo {
    pub fn clear(&mut self) {
        self.0.clear();
    }

    fn get(&mut self, net: &MlpParams, x: &[f64], cache: &mut ForwardCache) -> &[f64] {
        let key: Vec<u64> = x.iter().map(|v| v.to_bits()).collect();
        self.0.entry(key).or_insert_with(|| {
            net.forward_cached(x, cache);
            cache.output().to_vec()
        })
    }
}

impl PartialEq for TargetMemo {
    fn eq(&self, _: &Self) -> bool {
        true
    }
}

/// `y = r + gamma (1 - done) B` with `B = max_a Q_target(s', a)`, or
/// `Q_target(s', argmax_a Q_online(s', a))` under double Q.
pub fn td_targets(batch: &[&Experience], online: &MlpParams, target: &MlpParams, gamma: f64, double_q: bool) -> Vec<f64> {
    td_targets_memo(batch, online, target, gamma, double_q, &mut TargetMemo::default())
}

/// [`td_targets`] with the target outputs looked up in `memo`.
pub fn td_targets_memo(
    batch: &[&Experience],
    online: &MlpParams,
    target: &MlpParams,
    gamma: f64,
    double_q: bool,
    memo: &mut TargetMemo,
) -> Vec<f64> {
    let mut cache = ForwardCache::default();
    let mut online_memo = TargetMemo::default();
    batch
        .iter()
        .map(|e| {
            if e.done {
                return e.reward;
            }
            let boot = if double_q {
                let a = argmax(online_memo.get(online, &e.next_obs, &mut cache));
                memo.get(target, &e.next_obs, &mut cache)[a]
            } else {
                memo.get(target, &e.next_obs, &mut cache).iter().copied().fold(f64::NEG_INFINITY, f64::max)
            };
            e.reward + gamma * boot
        })
        .collect()
}

fn cmp_obs(a: &[f64], b: &[f64]) -> Ordering {
    a.iter().zip(b).map(|(x, y)| x.total_cmp(y)).find(|o| o.is_ne()).unwrap_or(a.len().cmp(&b.len()))
}

/// Mean squared TD error over the batch and its gradient w.r.t. `online`.
///
/// Samples with identical observations share one forward and one backward
/// pass; the gradient is linear in the upstream vector, so this is exact up
/// to summation order.
pub fn td_loss_grad(batch: &[&Experience], targets: &[f64], online: &MlpParams, grad: &mut [f64]) -> f64 {
    grad.iter_mut().for_each(|g| *g = 0.0);
    let n = batch.len() as f64;
    let mut order: Vec<usize> = (0..batch.len()).collect();
    order.sort_by(|&i, &j| cmp_obs(&batch[i].obs, &batch[j].obs).then(i.cmp(&j)));
    let mut cache = ForwardCache::default();
    let mut upstream = vec![0.0; online.n_outputs()];
    let mut loss = 0.0;
    let mut start = 0;
    while start < order.len() {
        let obs = &batch[order[start]].obs;
        let end = start + order[start..].iter().take_while(|&&i| batch[i].obs == *obs).count();
        online.forward_cached(obs, &mut cache);
        upstream.iter_mut().for_each(|u| *u = 0.0);
        for &i in &order[start..end] {
            let e = batch[i];
            let err = cache.output()[e.action] - targets[i];
            loss += err * err / n;
            upstream[e.action] += 2.0 * err / n;
        }
        online.backward(&mut cache, &upstream, grad);
        start = end;
    }
    loss
}

pub fn act_greedy(params: &MlpParams, obs: &[f64]) -> usize {
    argmax(&params.forward(obs))
}

pub fn act_epsilon_greedy<R: Rng + ?Sized>(params: &MlpParams, obs: &[f64], eps: f64, rng: &mut R) -> usize {
    if eps > 0.0 && rng.random::<f64>() < eps {
        rng.random_range(0..params.n_outputs())
    } else {
        act_greedy(params, obs)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Optimizer {
    /// Adam SGLD moments; the parameters live in the online network.
    AdamSgld { hyper: AdamSgldHyper, m: Vec<f64>, v: Vec<f64> },
    Adam(Adam),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainMetrics {
    pub loss: f64,
}

/// Deep Q agent. With the Adam SGLD optimizer it is Adam LMCDQN and acts
/// greedily; with Adam it is DQN and acts epsilon-greedily.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeepAgent {
    pub config: DqnTrainConfig,
    online: MlpParams,
    target: MlpParams,
    buffer: ReplayBuffer,
    optimizer: Optimizer,
    rng: SeededRng,
    env_steps: u64,
    updates: u64,
    #[serde(skip)]
    memo: TargetMemo,
}

impl DeepAgent {
    fn build(obs_dim: usize, n_actions: usize, config: DqnTrainConfig, optimizer: impl FnOnce(usize) -> Optimizer, mut rng: SeededRng) -> Self {
        let mut sizes = vec![obs_dim];
        sizes.extend(&config.hidden);
        sizes.push(n_actions);
        let online = MlpParams::he_uniform(&sizes, &mut rng);
        let optimizer = optimizer(online.n_params());
        DeepAgent {
            target: online.clone(),
            online,
            buffer: ReplayBuffer::new(config.buffer_capacity),
            optimizer,
            config,
            rng,
            env_steps: 0,
            updates: 0,
            memo: TargetMemo::default(),
        }
    }

    pub fn lmc_dqn(obs_dim: usize, n_actions: usize, config: DqnTrainConfig, hyper: AdamSgldHyper, rng: SeededRng) -> Self {
        Self::build(obs_dim, n_actions, config, |n| Optimizer::AdamSgld { hyper, m: vec![0.0; n], v: vec![0.0; n] }, rng)
    }

    pub fn dqn(obs_dim: usize, n_actions: usize, config: DqnTrainConfig, lr: f64, rng: SeededRng) -> Self {
        Self::build(obs_dim, n_actions, config, |n| Optimizer::Adam(Adam::new(n, lr)), rng)
    }

    pub fn online(&self) -> &MlpParams {
        &self.online
    }

    pub fn online_mut(&mut self) -> &mut MlpParams {
        &mut self.online
    }

    pub fn target(&self) -> &MlpParams {
        &self.target
    }

    pub fn buffer(&self) -> &ReplayBuffer {
        &self.buffer
    }

    pub fn env_steps(&self) -> u64 {
        self.env_steps
    }

    pub fn updates(&self) -> u64 {
        self.updates
    }

    pub fn is_langevin(&self) -> bool {
        matches!(self.optimizer, Optimizer::AdamSgld { .. })
    }

    /// Behaviour action for training.
    pub fn act(&mut self, obs: &[f64]) -> usize {
        match self.optimizer {
            Optimizer::AdamSgld { .. } => act_greedy(&self.online, obs),
            Optimizer::Adam(_) => {
                let eps = self.config.epsilon(self.env_steps);
                act_epsilon_greedy(&self.online, obs, eps, &mut self.rng)
            }
        }
    }

    /// Evaluation action (epsilon = 0 for both agents).
    pub fn act_eval(&self, obs: &[f64]) -> usize {
        act_greedy(&self.online, obs)
    }

    /// Stores the transition, trains once the buffer is warm, and syncs the
    /// target network every `target_sync` environment steps.
    pub fn observe(&mut self, e: Experience) -> Result<Option<TrainMetrics>, NeuralError> {
        self.buffer.push(e);
        self.env_steps += 1;
        let need = self.config.learning_starts.max(self.config.batch_size);
        let metrics = if self.buffer.len() >= need { Some(self.train_step()?) } else { None };
        if self.env_steps % self.config.target_sync == 0 {
            self.target = self.online.clone();
            self.memo.clear();
        }
        Ok(metrics)
    }

    /// `updates_per_step` optimizer updates, each on a fresh uniform
    /// minibatch.
    pub fn train_step(&mut self) -> Result<TrainMetrics, NeuralError> {
        let need = self.config.batch_size;
        if self.buffer.len() < need {
            return Err(NeuralError::BufferTooSmall { have: self.buffer.len(), need });
        }
        let n = self.online.n_params();
        let mut grad = vec![0.0; n];
        let mut noise = vec![0.0; n];
        let mut loss = 0.0;
        for _ in 0..self.config.updates_per_step {
            let idx = self.buffer.sample_indices(need, &mut self.rng);
            let batch: Vec<&Experience> = idx.iter().map(|&i| self.buffer.get(i)).collect();
            let y = td_targets_memo(&batch, &self.online, &self.target, self.config.gamma, self.config.double_q, &mut self.memo);
            loss = td_loss_grad(&batch, &y, &self.online, &mut grad);
            match &mut self.optimizer {
                Optimizer::AdamSgld { hyper, m, v } => {
                    if hyper.beta.is_some() {
                        fill_gaussian(&mut noise, &mut self.rng);
                    }
                    asgld_apply(&mut self.online.params, m, v, hyper, &grad, &noise)?;
                }
                Optimizer::Adam(adam) => adam.step(&mut self.online.params, &grad),
            }
            self.updates += 1;
        }
        Ok(TrainMetrics { loss })
    }
}
