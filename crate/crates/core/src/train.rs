//! Training regimes, rollout collection and learner updates.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::env::{one_hot, Action, AgentInput, Env, EnvConfig, StepInfo, ACTION_SLOTS, GOAL_DIM};
use crate::error::{Error, Result};
use crate::math::checkpoint;
use crate::math::{AdamConfig, GradMap, Graph, ParamStore, Tensor, Var};
use crate::model::{cross_entropy, frame_tensors, AuxBatch, FeatureRoute, ModelConfig, SplitNet, AUX_GROUPS, GROUPS, N_ACTIONS};
use crate::render::{apply_action, render, RenderConfig};
use crate::world::{random_free_point, Episode, Pose, Task, World};

/// Network plus its parameters at training precision.
#[derive(Clone, Debug)]
pub struct Model {
    pub net: SplitNet,
    pub store: ParamStore<f32>,
}

impl Model {
    pub fn new(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (net, store) = SplitNet::init(cfg, &mut rng)?;
        Ok(Self { net, store })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        Ok(checkpoint::save(path, &self.store, &self.net.cfg.to_json())?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ck = checkpoint::load(path)?;
        let cfg: ModelConfig = serde_json::from_str(&ck.config_json)?;
        let net = SplitNet::attach(&cfg, &ck.store)?;
        Ok(Self { net, store: ck.store })
    }

    pub fn blind(&self) -> bool {
        self.net.cfg.blind
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    AuxPretrain,
    Bc,
    Ppo,
    Sim2SimTransfer,
    /// Sim2Sim variant that also updates the policy group.
    Sim2SimEncoderPolicy,
    Task2TaskTransfer,
    E2eBc,
    E2ePpo,
}

impl Regime {
    pub fn trainable(self) -> Vec<&'static str> {
        match self {
            Regime::AuxPretrain => std::iter::once("encoder").chain(AUX_GROUPS).collect(),
            Regime::Bc | Regime::Ppo | Regime::Task2TaskTransfer => vec!["policy"],
            Regime::Sim2SimTransfer => vec!["encoder"],
            Regime::Sim2SimEncoderPolicy => vec!["encoder", "policy"],
            Regime::E2eBc | Regime::E2ePpo => GROUPS.to_vec(),
        }
    }

    pub fn route(self) -> FeatureRoute {
        match self {
            Regime::Bc | Regime::Ppo | Regime::Task2TaskTransfer | Regime::AuxPretrain => FeatureRoute::Stop,
            Regime::Sim2SimTransfer | Regime::Sim2SimEncoderPolicy | Regime::E2eBc | Regime::E2ePpo => FeatureRoute::Through,
        }
    }

    /// Sets freeze flags on `store` for this regime.
    pub fn apply(self, store: &mut ParamStore<f32>) {
        store.freeze_all_except(&self.trainable());
    }

    fn encodes_with_grad(self, model: &Model) -> bool {
        !model.blind() && self.route() == FeatureRoute::Through
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub clip_eps: f64,
    pub gae_lambda: f64,
    pub gamma: f64,
    pub epochs: usize,
    pub minibatches: usize,
    pub entropy_coef: f64,
    pub value_coef: f64,
    pub max_grad_norm: f64,
    /// Steps per env per rollout segment.
    pub rollout_len: usize,
    pub num_envs: usize,
    pub workers: usize,
    pub seed: u64,
    pub aux_batch: usize,
    /// Weight of the policy term in the Sim2Sim loss; the aux term has weight 1.
    pub sim2sim_policy_weight: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 2.5e-4,
            clip_eps: 0.2,
            gae_lambda: 0.95,
            gamma: 0.99,
            epochs: 4,
            minibatches: 4,
            entropy_coef: 0.01,
            value_coef: 0.5,
            max_grad_norm: 0.5,
            rollout_len: 32,
            num_envs: 4,
            workers: 1,
            seed: 0,
            aux_batch: 16,
            sim2sim_policy_weight: 1.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma <= 1.0) || !(self.clip_eps > 0.0) || !(self.lr > 0.0) {
            return Err(Error::Invalid("need 0 < gamma <= 1, clip_eps > 0, lr > 0".into()));
        }
        if self.num_envs == 0 || self.rollout_len == 0 || self.epochs == 0 || self.minibatches == 0 || self.workers == 0 {
            return Err(Error::Invalid("counts in the training config must be positive".into()));
        }
        Ok(())
    }
}

/// One metrics line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metric {
    pub regime: Regime,
    pub update: usize,
    pub env_steps: usize,
    pub loss: f64,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub stats: BTreeMap<String, f64>,
}

pub fn write_metrics(path: &Path, metrics: &[Metric]) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    for m in metrics {
        serde_json::to_writer(&mut out, m)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_metrics(path: &Path) -> Result<Vec<Metric>> {
    let text = std::fs::read_to_string(path)?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(k, l)| {
            serde_json::from_str(l).map_err(|e| Error::Parse { what: "metrics", line: k + 1, msg: e.to_string() })
        })
        .collect()
}

/// Worlds addressed by id.
pub struct WorldSet<'w> {
    by_id: BTreeMap<usize, &'w World>,
}

impl<'w> WorldSet<'w> {
    pub fn new(worlds: &'w [World]) -> Self {
        Self { by_id: worlds.iter().map(|w| (w.id, w)).collect() }
    }

    pub fn get(&self, id: usize) -> Result<&'w World> {
        self.by_id.get(&id).copied().ok_or_else(|| Error::Invalid(format!("no world with id {id}")))
    }
}

/// Episodes to draw from during training.
pub struct EpisodePool<'w> {
    pub worlds: WorldSet<'w>,
    pub episodes: Vec<Episode>,
}

impl<'w> EpisodePool<'w> {
    pub fn new(worlds: &'w [World], episodes: Vec<Episode>) -> Result<Self> {
        if episodes.is_empty() {
            return Err(Error::Invalid("empty episode pool".into()));
        }
        let worlds = WorldSet::new(worlds);
        for e in &episodes {
            worlds.get(e.world_id)?;
        }
        Ok(Self { worlds, episodes })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeSummary {
    pub episode_id: usize,
    pub task: Task,
    pub shortest: f64,
    pub steps: u32,
    pub ret: f64,
    pub info: StepInfo,
}

impl EpisodeSummary {
    /// Task score: success for pointnav, visited squares for explore, final
    /// geodesic from the start for flee.
    pub fn score(&self) -> f64 {
        match self.task {
            Task::PointNav => self.info.success as u8 as f64,
            Task::Explore => self.info.visited as f64,
            Task::Flee => self.info.geo_from_start,
        }
    }
}

/// Time-major record of `n` envs over `t` steps.
#[derive(Clone, Debug)]
pub struct Segment {
    pub n: usize,
    pub t: usize,
    pub feature_dim: usize,
    pub hidden_dim: usize,
    pub h0: Vec<f32>,
    pub features: Vec<Vec<f32>>,
    /// Planar images per step, kept when the learner re-encodes.
    pub images: Option<Vec<Vec<f32>>>,
    pub goals: Vec<Vec<f32>>,
    pub prevs: Vec<Vec<f32>>,
    pub actions: Vec<Vec<usize>>,
    pub oracle: Vec<Vec<usize>>,
    pub logp: Vec<Vec<f32>>,
    pub values: Vec<Vec<f32>>,
    pub rewards: Vec<Vec<f64>>,
    pub dones: Vec<Vec<bool>>,
    pub last_values: Vec<f32>,
    pub finished: Vec<EpisodeSummary>,
}

#[derive(Clone, Copy, Debug)]
pub struct CollectOptions {
    pub sample: bool,
    pub oracle: bool,
    pub keep_images: bool,
    /// Probability of executing the oracle action instead of the agent's.
    /// The recorded action is the executed one.
    pub oracle_mix: f64,
}

struct Slot<'w> {
    env: Env<'w>,
    input: AgentInput,
    hidden: Vec<f32>,
    rng: ChaCha8Rng,
    ret: f64,
}

/// Persistent set of environments advanced segment by segment.
pub struct Rollout<'p, 'w> {
    pool: &'p EpisodePool<'w>,
    env_cfg: EnvConfig,
    slots: Vec<Slot<'w>>,
    workers: usize,
    hidden_dim: usize,
    pub env_steps: usize,
}

fn next_episode<'w>(pool: &EpisodePool<'w>, rng: &mut ChaCha8Rng, env_cfg: &EnvConfig) -> Result<(Env<'w>, AgentInput)> {
    let e = &pool.episodes[rng.random_range(0..pool.episodes.len())];
    Env::reset(pool.worlds.get(e.world_id)?, e, env_cfg)
}

/// Per-batch forward pass used for acting.
pub(crate) struct ActOut {
    pub(crate) features: Vec<f32>,
    pub(crate) logits: Vec<f32>,
    pub(crate) values: Vec<f32>,
    pub(crate) hidden: Vec<f32>,
}

fn policy_tensors(inputs: &[&AgentInput]) -> Result<(Tensor<f32>, Tensor<f32>)> {
    let goals: Vec<[f32; GOAL_DIM]> = inputs.iter().map(|i| i.goal_vec).collect();
    let prevs: Vec<[f32; ACTION_SLOTS]> = inputs.iter().map(|i| one_hot(i.prev_action)).collect();
    SplitNet::policy_inputs(&goals, &prevs)
}

fn encode_inputs(model: &Model, g: &mut Graph<f32>, inputs: &[&AgentInput]) -> Result<Var> {
    let n = inputs.len();
    if model.blind() {
        return model.net.blind_feature(g, n);
    }
    let cfg = &model.net.cfg;
    let mut data = Vec::with_capacity(n * 3 * cfg.height * cfg.width);
    for i in inputs {
        if i.rgb.len() != 3 * cfg.height * cfg.width {
            return Err(Error::Invalid(format!("observation has {} values, model expects 3x{}x{}", i.rgb.len(), cfg.height, cfg.width)));
        }
        data.extend_from_slice(&i.rgb);
    }
    let x = g.constant(Tensor::new(vec![n, 3, cfg.height, cfg.width], data)?)?;
    Ok(model.net.encode(g, &model.store, x)?.feature)
}

pub(crate) fn act(model: &Model, inputs: &[&AgentInput], hidden: Vec<f32>) -> Result<ActOut> {
    let n = inputs.len();
    let mut g = Graph::<f32>::new();
    let feature = encode_inputs(model, &mut g, inputs)?;
    let (goal, prev) = policy_tensors(inputs)?;
    let (goal, prev) = (g.constant(goal)?, g.constant(prev)?);
    let h = g.constant(Tensor::new(vec![n, model.net.cfg.hidden], hidden)?)?;
    let out = model.net.policy_step(&mut g, &model.store, feature, goal, prev, h, FeatureRoute::Stop)?;
    Ok(ActOut {
        features: g.value(feature).data().to_vec(),
        logits: g.value(out.logits).data().to_vec(),
        values: g.value(out.value).data().to_vec(),
        hidden: g.value(out.hidden).data().to_vec(),
    })
}

fn probs(logits: &[f32]) -> [f64; N_ACTIONS] {
    let m = logits.iter().fold(f32::NEG_INFINITY, |a, &b| a.max(b)) as f64;
    let e: Vec<f64> = logits.iter().map(|&l| (l as f64 - m).exp()).collect();
    let s: f64 = e.iter().sum();
    [e[0] / s, e[1] / s, e[2] / s]
}

pub fn sample_action(logits: &[f32], rng: &mut impl Rng) -> usize {
    let p = probs(logits);
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (k, &pk) in p.iter().enumerate() {
        acc += pk;
        if u < acc {
            return k;
        }
    }
    N_ACTIONS - 1
}

/// Argmax with ties resolved to the lowest index.
pub fn greedy_action(logits: &[f32]) -> usize {
    let mut best = 0;
    for k in 1..logits.len() {
        if logits[k] > logits[best] {
            best = k;
        }
    }
    best
}

fn log_prob(logits: &[f32], a: usize) -> f32 {
    probs(logits)[a].max(1e-30).ln() as f32
}

/// Per-step record produced by one slot.
struct SlotStep {
    feature: Vec<f32>,
    image: Option<Vec<f32>>,
    goal: [f32; GOAL_DIM],
    prev: [f32; ACTION_SLOTS],
    action: usize,
    oracle: usize,
    logp: f32,
    value: f32,
    reward: f64,
    done: bool,
    finished: Option<EpisodeSummary>,
}

impl<'p, 'w> Rollout<'p, 'w> {
    pub fn new(pool: &'p EpisodePool<'w>, env_cfg: EnvConfig, n: usize, workers: usize, hidden_dim: usize, seed: u64) -> Result<Self> {
        let mut slots = Vec::with_capacity(n);
        for k in 0..n {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(k as u64 + 1);
            let (env, input) = next_episode(pool, &mut rng, &env_cfg)?;
            slots.push(Slot { env, input, hidden: vec![0.0; hidden_dim], rng, ret: 0.0 });
        }
        Ok(Self { pool, env_cfg, slots, workers: workers.max(1), hidden_dim, env_steps: 0 })
    }

    fn step_chunk(pool: &EpisodePool<'w>, env_cfg: &EnvConfig, model: &Model, chunk: &mut [Slot<'w>], opts: CollectOptions) -> Result<Vec<SlotStep>> {
        let inputs: Vec<&AgentInput> = chunk.iter().map(|s| &s.input).collect();
        let hidden: Vec<f32> = chunk.iter().flat_map(|s| s.hidden.iter().copied()).collect();
        let out = act(model, &inputs, hidden)?;
        let (f, hd) = (model.net.cfg.feature_dim, model.net.cfg.hidden);
        let mut steps = Vec::with_capacity(chunk.len());
        for (k, slot) in chunk.iter_mut().enumerate() {
            let logits = &out.logits[k * N_ACTIONS..(k + 1) * N_ACTIONS];
            let mut action = if opts.sample { sample_action(logits, &mut slot.rng) } else { greedy_action(logits) };
            let oracle = if opts.oracle { slot.env.oracle_action()?.index() } else { 0 };
            if opts.oracle && opts.oracle_mix > 0.0 && slot.rng.random_bool(opts.oracle_mix.min(1.0)) {
                action = oracle;
            }
            let goal = slot.input.goal_vec;
            let prev = one_hot(slot.input.prev_action);
            let image = opts.keep_images.then(|| slot.input.rgb.clone());
            let outcome = slot.env.step(Action::from_index(action).expect("valid action index"))?;
            slot.ret += outcome.reward;
            let mut finished = None;
            if outcome.done {
                finished = Some(EpisodeSummary {
                    episode_id: slot.env.episode().id,
                    task: slot.env.episode().task,
                    shortest: slot.env.shortest(),
                    steps: slot.env.steps(),
                    ret: slot.ret,
                    info: outcome.info.clone(),
                });
                let (env, input) = next_episode(pool, &mut slot.rng, env_cfg)?;
                slot.env = env;
                slot.input = input;
                slot.hidden = vec![0.0; hd];
                slot.ret = 0.0;
            } else {
                slot.input = outcome.input;
                slot.hidden = out.hidden[k * hd..(k + 1) * hd].to_vec();
            }
            steps.push(SlotStep {
                feature: out.features[k * f..(k + 1) * f].to_vec(),
                image,
                goal,
                prev,
                action,
                oracle,
                logp: log_prob(logits, action),
                value: out.values[k],
                reward: outcome.reward,
                done: outcome.done,
                finished,
            });
        }
        Ok(steps)
    }

    /// Advances every env by `len` steps under `model`.
    pub fn collect(&mut self, model: &Model, len: usize, opts: CollectOptions) -> Result<Segment> {
        let n = self.slots.len();
        let (f, hd) = (model.net.cfg.feature_dim, self.hidden_dim);
        let mut seg = Segment {
            n,
            t: len,
            feature_dim: f,
            hidden_dim: hd,
            h0: self.slots.iter().flat_map(|s| s.hidden.iter().copied()).collect(),
            features: Vec::with_capacity(len),
            images: opts.keep_images.then(Vec::new),
            goals: Vec::with_capacity(len),
            prevs: Vec::with_capacity(len),
            actions: Vec::with_capacity(len),
            oracle: Vec::with_capacity(len),
            logp: Vec::with_capacity(len),
            values: Vec::with_capacity(len),
            rewards: Vec::with_capacity(len),
            dones: Vec::with_capacity(len),
            last_values: Vec::new(),
            finished: Vec::new(),
        };
        let chunk = n.div_ceil(self.workers);
        let pool = self.pool;
        let env_cfg = &self.env_cfg;
        for _ in 0..len {
            let per_chunk: Vec<Result<Vec<SlotStep>>> = if self.workers > 1 {
                self.slots.par_chunks_mut(chunk).map(|c| Self::step_chunk(pool, env_cfg, model, c, opts)).collect()
            } else {
                vec![Self::step_chunk(pool, env_cfg, model, &mut self.slots, opts)]
            };
            let mut steps = Vec::with_capacity(n);
            for r in per_chunk {
                steps.extend(r?);
            }
            seg.features.push(steps.iter().flat_map(|s| s.feature.iter().copied()).collect());
            if let Some(images) = seg.images.as_mut() {
                images.push(steps.iter().flat_map(|s| s.image.iter().flatten().copied()).collect());
            }
            seg.goals.push(steps.iter().flat_map(|s| s.goal).collect());
            seg.prevs.push(steps.iter().flat_map(|s| s.prev).collect());
            seg.actions.push(steps.iter().map(|s| s.action).collect());
            seg.oracle.push(steps.iter().map(|s| s.oracle).collect());
            seg.logp.push(steps.iter().map(|s| s.logp).collect());
            seg.values.push(steps.iter().map(|s| s.value).collect());
            seg.rewards.push(steps.iter().map(|s| s.reward).collect());
            seg.dones.push(steps.iter().map(|s| s.done).collect());
            seg.finished.extend(steps.into_iter().filter_map(|s| s.finished));
            self.env_steps += n;
        }
        let inputs: Vec<&AgentInput> = self.slots.iter().map(|s| &s.input).collect();
        let hidden: Vec<f32> = self.slots.iter().flat_map(|s| s.hidden.iter().copied()).collect();
        seg.last_values = act(model, &inputs, hidden)?.values;
        Ok(seg)
    }
}

fn gather(rows: &[f32], row_len: usize, idx: &[usize]) -> Vec<f32> {
    idx.iter().flat_map(|&i| rows[i * row_len..(i + 1) * row_len].iter().copied()).collect()
}

/// Inputs of one time step for the env subset `idx`.
fn step_inputs(g: &mut Graph<f32>, model: &Model, seg: &Segment, t: usize, idx: &[usize], encode: bool) -> Result<(Var, Var, Var)> {
    let m = idx.len();
    let feature = if encode {
        let cfg = &model.net.cfg;
        let px = 3 * cfg.height * cfg.width;
        let images = seg.images.as_ref().ok_or_else(|| Error::Invalid("segment has no images".into()))?;
        let x = g.constant(Tensor::new(vec![m, 3, cfg.height, cfg.width], gather(&images[t], px, idx))?)?;
        model.net.encode(g, &model.store, x)?.feature
    } else {
        g.constant(Tensor::new(vec![m, seg.feature_dim], gather(&seg.features[t], seg.feature_dim, idx))?)?
    };
    let goal_rows: Vec<[f32; GOAL_DIM]> = gather(&seg.goals[t], GOAL_DIM, idx).chunks(GOAL_DIM).map(|c| [c[0], c[1], c[2]]).collect();
    let prev_rows: Vec<[f32; ACTION_SLOTS]> =
        gather(&seg.prevs[t], ACTION_SLOTS, idx).chunks(ACTION_SLOTS).map(|c| [c[0], c[1], c[2], c[3]]).collect();
    let (goal, prev) = SplitNet::policy_inputs::<f32>(&goal_rows, &prev_rows)?;
    Ok((feature, g.constant(goal)?, g.constant(prev)?))
}

fn reset_mask(g: &mut Graph<f32>, seg: &Segment, t: usize, idx: &[usize]) -> Result<Var> {
    let hd = seg.hidden_dim;
    let data: Vec<f32> = idx.iter().flat_map(|&i| std::iter::repeat_n(if seg.dones[t][i] { 0.0 } else { 1.0 }, hd)).collect();
    Ok(g.constant(Tensor::new(vec![idx.len(), hd], data)?)?)
}

/// Mean cross-entropy against the oracle over the whole segment.
pub fn bc_loss(g: &mut Graph<f32>, model: &Model, seg: &Segment, route: FeatureRoute, encode: bool) -> Result<Var> {
    let idx: Vec<usize> = (0..seg.n).collect();
    let mut h = g.constant(Tensor::new(vec![seg.n, seg.hidden_dim], seg.h0.clone())?)?;
    let mut total: Option<Var> = None;
    for t in 0..seg.t {
        let (feature, goal, prev) = step_inputs(g, model, seg, t, &idx, encode)?;
        let out = model.net.policy_step(g, &model.store, feature, goal, prev, h, route)?;
        let ce = cross_entropy(g, out.logits, &seg.oracle[t])?;
        total = Some(match total {
            Some(acc) => g.add(acc, ce)?,
            None => ce,
        });
        let mask = reset_mask(g, seg, t, &idx)?;
        h = g.mul(out.hidden, mask)?;
    }
    let total = total.ok_or_else(|| Error::Invalid("empty segment".into()))?;
    Ok(g.scale(total, 1.0 / seg.t as f64)?)
}

/// Standard GAE. `dones[t]` marks an episode ending with step `t`.
pub fn compute_gae(rewards: &[f64], values: &[f64], dones: &[bool], last_value: f64, gamma: f64, lambda: f64) -> (Vec<f64>, Vec<f64>) {
    let n = rewards.len();
    let mut adv = vec![0.0; n];
    let mut next_adv = 0.0;
    let mut next_value = last_value;
    for t in (0..n).rev() {
        let live = if dones[t] { 0.0 } else { 1.0 };
        let delta = rewards[t] + gamma * next_value * live - values[t];
        next_adv = delta + gamma * lambda * live * next_adv;
        adv[t] = next_adv;
        next_value = values[t];
    }
    let returns = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    (adv, returns)
}

/// Shifts and scales to mean 0 and standard deviation 1.
pub fn normalize_advantages(adv: &mut [f64]) {
    let n = adv.len() as f64;
    if n < 2.0 {
        return;
    }
    let mean = adv.iter().sum::<f64>() / n;
    let var = adv.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt().max(1e-8);
    for a in adv.iter_mut() {
        *a = (*a - mean) / std;
    }
}

/// Clipped surrogate term for one sample: `min(r A, clip(r, 1-eps, 1+eps) A)`.
pub fn clipped_surrogate(ratio: f64, adv: f64, eps: f64) -> f64 {
    (ratio * adv).min(ratio.clamp(1.0 - eps, 1.0 + eps) * adv)
}

struct PpoTargets {
    /// `[t][env]`.
    adv: Vec<Vec<f64>>,
    ret: Vec<Vec<f64>>,
}

fn ppo_targets(seg: &Segment, cfg: &TrainConfig) -> PpoTargets {
    let mut adv = vec![vec![0.0; seg.n]; seg.t];
    let mut ret = vec![vec![0.0; seg.n]; seg.t];
    for i in 0..seg.n {
        let r: Vec<f64> = (0..seg.t).map(|t| seg.rewards[t][i]).collect();
        let v: Vec<f64> = (0..seg.t).map(|t| seg.values[t][i] as f64).collect();
        let d: Vec<bool> = (0..seg.t).map(|t| seg.dones[t][i]).collect();
        let (a, rt) = compute_gae(&r, &v, &d, seg.last_values[i] as f64, cfg.gamma, cfg.gae_lambda);
        for t in 0..seg.t {
            adv[t][i] = a[t];
            ret[t][i] = rt[t];
        }
    }
    let mut flat: Vec<f64> = adv.iter().flatten().copied().collect();
    normalize_advantages(&mut flat);
    for (t, row) in adv.iter_mut().enumerate() {
        row.copy_from_slice(&flat[t * seg.n..(t + 1) * seg.n]);
    }
    PpoTargets { adv, ret }
}

fn ppo_loss(g: &mut Graph<f32>, model: &Model, seg: &Segment, tg: &PpoTargets, idx: &[usize], regime: Regime, cfg: &TrainConfig) -> Result<Var> {
    let m = idx.len();
    let encode = regime.encodes_with_grad(model);
    let h0 = gather(&seg.h0, seg.hidden_dim, idx);
    let mut h = g.constant(Tensor::new(vec![m, seg.hidden_dim], h0)?)?;
    let mut total: Option<Var> = None;
    for t in 0..seg.t {
        let (feature, goal, prev) = step_inputs(g, model, seg, t, idx, encode)?;
        let out = model.net.policy_step(g, &model.store, feature, goal, prev, h, regime.route())?;
        let logp_all = g.log_softmax(out.logits)?;
        let actions: Vec<usize> = idx.iter().map(|&i| seg.actions[t][i]).collect();
        let lp = g.pick_cols(logp_all, &actions)?;
        let old = g.constant(Tensor::new(vec![m], idx.iter().map(|&i| seg.logp[t][i]).collect())?)?;
        let adv = g.constant(Tensor::new(vec![m], idx.iter().map(|&i| tg.adv[t][i] as f32).collect())?)?;
        let ret = g.constant(Tensor::new(vec![m], idx.iter().map(|&i| tg.ret[t][i] as f32).collect())?)?;
        let diff = g.sub(lp, old)?;
        let ratio = g.exp(diff)?;
        let s1 = g.mul(ratio, adv)?;
        let clipped = g.clamp(ratio, 1.0 - cfg.clip_eps, 1.0 + cfg.clip_eps)?;
        let s2 = g.mul(clipped, adv)?;
        let surr = g.minimum(s1, s2)?;
        let surr = g.mean(surr)?;
        let pg = g.scale(surr, -1.0)?;
        let v = g.reshape(out.value, &[m])?;
        let verr = g.sub(v, ret)?;
        let verr = g.square(verr)?;
        let vl = g.mean(verr)?;
        let p = g.softmax(out.logits)?;
        let plogp = g.mul(p, logp_all)?;
        let neg_ent = g.mean(plogp)?;
        // neg_ent = -H / N_ACTIONS
        let ent_term = g.scale(neg_ent, cfg.entropy_coef * N_ACTIONS as f64)?;
        let vl = g.scale(vl, cfg.value_coef)?;
        let step_loss = g.add(pg, vl)?;
        let step_loss = g.add(step_loss, ent_term)?;
        total = Some(match total {
            Some(acc) => g.add(acc, step_loss)?,
            None => step_loss,
        });
        let mask = reset_mask(g, seg, t, idx)?;
        h = g.mul(out.hidden, mask)?;
    }
    let total = total.ok_or_else(|| Error::Invalid("empty segment".into()))?;
    Ok(g.scale(total, 1.0 / seg.t as f64)?)
}

/// Gradients of the full-batch PPO loss on `seg` under `regime`.
pub fn ppo_gradients(model: &Model, seg: &Segment, regime: Regime, cfg: &TrainConfig) -> Result<GradMap<f32>> {
    let targets = ppo_targets(seg, cfg);
    let idx: Vec<usize> = (0..seg.n).collect();
    let mut g = Graph::new();
    let loss = ppo_loss(&mut g, model, seg, &targets, &idx, regime, cfg)?;
    Ok(g.backward(loss)?.params)
}

fn check_finite(v: f64, what: &str) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::Diverged(format!("{what} is {v}")))
    }
}

/// Backward plus clipped Adam step on trainable groups. Returns gradients
/// before clipping for inspection.
fn apply_grads(store: &mut ParamStore<f32>, mut grads: GradMap<f32>, cfg: &TrainConfig) -> Result<()> {
    if cfg.max_grad_norm > 0.0 {
        grads.clip_global_norm(cfg.max_grad_norm);
    }
    store.adam_step(&grads, cfg.lr, AdamConfig::default())?;
    Ok(())
}

fn summary_stats(finished: &[EpisodeSummary], stats: &mut BTreeMap<String, f64>) {
    if finished.is_empty() {
        return;
    }
    let n = finished.len() as f64;
    stats.insert("episodes".into(), n);
    stats.insert("return_mean".into(), finished.iter().map(|e| e.ret).sum::<f64>() / n);
    stats.insert("score_mean".into(), finished.iter().map(EpisodeSummary::score).sum::<f64>() / n);
    if finished.iter().all(|e| e.task == Task::PointNav) {
        let spl = |e: &EpisodeSummary| if e.info.success { e.shortest / e.info.path_length.max(e.shortest).max(f64::MIN_POSITIVE) } else { 0.0 };
        stats.insert("spl_mean".into(), finished.iter().map(spl).sum::<f64>() / n);
    }
}

/// Student-forcing behavioural cloning: the agent samples its own actions and
/// each step is supervised by the oracle's choice.
pub fn train_bc(model: &mut Model, pool: &EpisodePool<'_>, regime: Regime, cfg: &TrainConfig, updates: usize, env_cfg: &EnvConfig) -> Result<Vec<Metric>> {
    cfg.validate()?;
    if !matches!(regime, Regime::Bc | Regime::E2eBc) {
        return Err(Error::Invalid(format!("{regime:?} is not a behavioural cloning regime")));
    }
    regime.apply(&mut model.store);
    let env_cfg = EnvConfig { blind: model.blind(), ..env_cfg.clone() };
    let mut rollout = Rollout::new(pool, env_cfg, cfg.num_envs, cfg.workers, model.net.cfg.hidden, cfg.seed)?;
    let encode = regime.encodes_with_grad(model);
    let opts = CollectOptions { sample: true, oracle: true, keep_images: encode, oracle_mix: 0.0 };
    let mut metrics = Vec::with_capacity(updates);
    for update in 0..updates {
        let seg = rollout.collect(model, cfg.rollout_len, opts)?;
        let mut g = Graph::new();
        let loss = bc_loss(&mut g, model, &seg, regime.route(), encode)?;
        let loss_value = g.value(loss).item() as f64;
        check_finite(loss_value, "bc loss")?;
        let grads = g.backward(loss)?.params;
        drop(g);
        apply_grads(&mut model.store, grads, cfg)?;
        let mut stats = BTreeMap::new();
        summary_stats(&seg.finished, &mut stats);
        let agree = seg.actions.iter().flatten().zip(seg.oracle.iter().flatten()).filter(|(a, o)| a == o).count();
        stats.insert("oracle_agreement".into(), agree as f64 / (seg.n * seg.t) as f64);
        metrics.push(Metric { regime, update, env_steps: rollout.env_steps, loss: loss_value, stats });
    }
    Ok(metrics)
}

/// PPO with a clipped surrogate, value loss and entropy bonus. Minibatches
/// split by env so recurrent sequences stay whole.
pub fn train_ppo(model: &mut Model, pool: &EpisodePool<'_>, regime: Regime, cfg: &TrainConfig, updates: usize, env_cfg: &EnvConfig) -> Result<Vec<Metric>> {
    cfg.validate()?;
    if !matches!(regime, Regime::Ppo | Regime::E2ePpo | Regime::Task2TaskTransfer) {
        return Err(Error::Invalid(format!("{regime:?} is not a PPO regime")));
    }
    regime.apply(&mut model.store);
    let env_cfg = EnvConfig { blind: model.blind(), ..env_cfg.clone() };
    let mut rollout = Rollout::new(pool, env_cfg, cfg.num_envs, cfg.workers, model.net.cfg.hidden, cfg.seed)?;
    let encode = regime.encodes_with_grad(model);
    let opts = CollectOptions { sample: true, oracle: false, keep_images: encode, oracle_mix: 0.0 };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5050);
    let mut metrics = Vec::with_capacity(updates);
    let n_mb = cfg.minibatches.min(cfg.num_envs);
    for update in 0..updates {
        let seg = rollout.collect(model, cfg.rollout_len, opts)?;
        let targets = ppo_targets(&seg, cfg);
        let mut loss_sum = 0.0;
        let mut count = 0;
        for _ in 0..cfg.epochs {
            let mut order: Vec<usize> = (0..seg.n).collect();
            order.shuffle(&mut rng);
            for mb in 0..n_mb {
                let idx: Vec<usize> = order.iter().copied().skip(mb).step_by(n_mb).collect();
                let mut g = Graph::new();
                let loss = ppo_loss(&mut g, model, &seg, &targets, &idx, regime, cfg)?;
                let lv = g.value(loss).item() as f64;
                check_finite(lv, "ppo loss")?;
                loss_sum += lv;
                count += 1;
                let grads = g.backward(loss)?.params;
                drop(g);
                apply_grads(&mut model.store, grads, cfg)?;
            }
        }
        let mut stats = BTreeMap::new();
        summary_stats(&seg.finished, &mut stats);
        let rsum: f64 = seg.rewards.iter().flatten().sum();
        stats.insert("reward_per_step".into(), rsum / (seg.n * seg.t) as f64);
        metrics.push(Metric { regime, update, env_steps: rollout.env_steps, loss: loss_sum / count as f64, stats });
    }
    Ok(metrics)
}

/// Frame pairs `(t - 1, t)` with the action between them.
#[derive(Clone, Debug, Default)]
pub struct AuxDataset {
    pub height: usize,
    pub width: usize,
    rgb_prev: Vec<Vec<f32>>,
    rgb: Vec<Vec<f32>>,
    depth: Vec<Vec<f32>>,
    normals: Vec<Vec<f32>>,
    actions: Vec<usize>,
}

impl AuxDataset {
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn batch(&self, idx: &[usize]) -> Result<AuxBatch<f32>> {
        let (h, w) = (self.height, self.width);
        let n = idx.len();
        let cat = |src: &[Vec<f32>]| -> Vec<f32> { idx.iter().flat_map(|&i| src[i].iter().copied()).collect() };
        Ok(AuxBatch {
            rgb_prev: Tensor::new(vec![n, 3, h, w], cat(&self.rgb_prev))?,
            rgb: Tensor::new(vec![n, 3, h, w], cat(&self.rgb))?,
            depth: Tensor::new(vec![n, 1, h, w], cat(&self.depth))?,
            normals: Tensor::new(vec![n, 3, h, w], cat(&self.normals))?,
            actions: idx.iter().map(|&i| self.actions[i]).collect(),
        })
    }
}

/// Wandering behaviour: mostly forward, occasional random turns, and a burst
/// of turning in one direction after each collision.
struct Wanderer {
    turn_left: usize,
    turn_right: usize,
}

impl Wanderer {
    fn next(&mut self, collided: bool, rng: &mut ChaCha8Rng) -> Action {
        if collided && self.turn_left == 0 && self.turn_right == 0 {
            let k = rng.random_range(3..=12);
            if rng.random_bool(0.5) {
                self.turn_left = k;
            } else {
                self.turn_right = k;
            }
        }
        if self.turn_left > 0 {
            self.turn_left -= 1;
            return Action::TurnLeft;
        }
        if self.turn_right > 0 {
            self.turn_right -= 1;
            return Action::TurnRight;
        }
        match rng.random_range(0..10) {
            0 => Action::TurnLeft,
            1 => Action::TurnRight,
            _ => Action::Forward,
        }
    }
}

/// Collects `n` frame pairs from wandering walks of `walk_len` steps over
/// `worlds`, round-robin.
pub fn collect_aux_dataset(worlds: &[World], n: usize, walk_len: usize, render_cfg: &RenderConfig, seed: u64) -> Result<AuxDataset> {
    if worlds.is_empty() || walk_len == 0 {
        return Err(Error::Invalid("aux data needs worlds and a positive walk length".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = AuxDataset { height: render_cfg.height, width: render_cfg.width, ..AuxDataset::default() };
    let free: Vec<_> = worlds.iter().map(World::free_cells).collect();
    let mut walk = 0;
    while data.len() < n {
        let w = walk % worlds.len();
        walk += 1;
        let world = &worlds[w];
        let p = random_free_point(world, &free[w], &mut rng);
        let mut pose = Pose::new(p.x, p.y, 10.0 * rng.random_range(0..36) as f64);
        let mut prev = render(world, &pose, render_cfg)?;
        let mut wander = Wanderer { turn_left: 0, turn_right: 0 };
        let mut collided = false;
        for _ in 0..walk_len {
            if data.len() >= n {
                break;
            }
            let a = wander.next(collided, &mut rng);
            let (next, c) = apply_action(world, &pose, a);
            collided = c;
            pose = next;
            let frame = render(world, &pose, render_cfg)?;
            let (_, depth, normals) = frame_tensors::<f32>(&[&frame])?;
            data.rgb_prev.push(prev.rgb_chw());
            data.rgb.push(frame.rgb_chw());
            data.depth.push(depth.into_data());
            data.normals.push(normals.into_data());
            data.actions.push(a.index());
            prev = frame;
        }
    }
    Ok(data)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AuxLossValues {
    pub depth: f64,
    pub normals: f64,
    pub rgb: f64,
    pub egomotion: f64,
    pub nextfeat: f64,
    pub joint: f64,
}

/// Mean auxiliary losses over `data` without updating anything.
pub fn eval_aux(model: &Model, data: &AuxDataset, batch: usize) -> Result<AuxLossValues> {
    let mut acc = [0.0f64; 6];
    let mut count = 0.0;
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(batch.max(1)) {
        let b = data.batch(chunk)?;
        let mut g = Graph::new();
        let l = model.net.aux_losses(&mut g, &model.store, &b)?;
        let w = chunk.len() as f64;
        for (k, v) in [l.depth, l.normals, l.rgb, l.egomotion, l.nextfeat, l.joint].into_iter().enumerate() {
            acc[k] += w * g.value(v).item() as f64;
        }
        count += w;
    }
    let m = |k: usize| acc[k] / count;
    Ok(AuxLossValues { depth: m(0), normals: m(1), rgb: m(2), egomotion: m(3), nextfeat: m(4), joint: m(5) })
}

/// Minimizes the joint auxiliary loss; only encoder and auxiliary decoders move.
pub fn train_aux(model: &mut Model, data: &AuxDataset, cfg: &TrainConfig, steps: usize) -> Result<Vec<Metric>> {
    cfg.validate()?;
    if model.blind() || data.is_empty() {
        return Err(Error::Invalid("auxiliary training needs a sighted model and data".into()));
    }
    Regime::AuxPretrain.apply(&mut model.store);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xA0A0);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut cursor = order.len();
    let mut metrics = Vec::with_capacity(steps);
    for step in 0..steps {
        let mut idx = Vec::with_capacity(cfg.aux_batch);
        while idx.len() < cfg.aux_batch.min(data.len()) {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            idx.push(order[cursor]);
            cursor += 1;
        }
        let batch = data.batch(&idx)?;
        let mut g = Graph::new();
        let l = model.net.aux_losses(&mut g, &model.store, &batch)?;
        let joint = g.value(l.joint).item() as f64;
        check_finite(joint, "joint auxiliary loss")?;
        let mut stats = BTreeMap::new();
        for (name, v) in [("depth", l.depth), ("normals", l.normals), ("rgb", l.rgb), ("egomotion", l.egomotion), ("nextfeat", l.nextfeat)] {
            stats.insert(format!("loss_{name}"), g.value(v).item() as f64);
        }
        let grads = g.backward(l.joint)?.params;
        drop(g);
        let aux_cfg = TrainConfig { max_grad_norm: 0.0, ..cfg.clone() };
        apply_grads(&mut model.store, grads, &aux_cfg)?;
        metrics.push(Metric { regime: Regime::AuxPretrain, update: step, env_steps: 0, loss: joint, stats });
    }
    Ok(metrics)
}

/// Gradients of one Sim2Sim objective evaluation, for inspection.
pub fn sim2sim_gradients(model: &Model, aux: &AuxBatch<f32>, seg: &Segment, policy_weight: f64, regime: Regime) -> Result<GradMap<f32>> {
    let mut g = Graph::new();
    let loss = sim2sim_loss(&mut g, model, aux, seg, policy_weight, regime)?;
    Ok(g.backward(loss)?.params)
}

fn sim2sim_loss(g: &mut Graph<f32>, model: &Model, aux: &AuxBatch<f32>, seg: &Segment, policy_weight: f64, regime: Regime) -> Result<Var> {
    let l = model.net.aux_losses(g, &model.store, aux)?;
    let bc = bc_loss(g, model, seg, regime.route(), true)?;
    let bc = g.scale(bc, policy_weight)?;
    Ok(g.add(l.joint, bc)?)
}

/// Encoder-only adaptation to a new render domain: joint auxiliary loss on
/// target frames plus behavioural cloning through the frozen policy.
#[allow(clippy::too_many_arguments)]
pub fn transfer_sim2sim(
    model: &mut Model,
    pool: &EpisodePool<'_>,
    aux: &AuxDataset,
    cfg: &TrainConfig,
    updates: usize,
    env_cfg: &EnvConfig,
    regime: Regime,
) -> Result<Vec<Metric>> {
    cfg.validate()?;
    if !matches!(regime, Regime::Sim2SimTransfer | Regime::Sim2SimEncoderPolicy) || model.blind() || aux.is_empty() {
        return Err(Error::Invalid(format!("{regime:?} needs a sighted model and target frames")));
    }
    regime.apply(&mut model.store);
    let mut rollout = Rollout::new(pool, EnvConfig { blind: false, ..env_cfg.clone() }, cfg.num_envs, cfg.workers, model.net.cfg.hidden, cfg.seed)?;
    let opts = CollectOptions { sample: true, oracle: true, keep_images: true, oracle_mix: 0.0 };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5151);
    let mut metrics = Vec::with_capacity(updates);
    for update in 0..updates {
        let seg = rollout.collect(model, cfg.rollout_len, opts)?;
        let idx: Vec<usize> = (0..cfg.aux_batch.min(aux.len())).map(|_| rng.random_range(0..aux.len())).collect();
        let batch = aux.batch(&idx)?;
        let mut g = Graph::new();
        let loss = sim2sim_loss(&mut g, model, &batch, &seg, cfg.sim2sim_policy_weight, regime)?;
        let lv = g.value(loss).item() as f64;
        check_finite(lv, "sim2sim loss")?;
        let grads = g.backward(loss)?.params;
        drop(g);
        apply_grads(&mut model.store, grads, cfg)?;
        let mut stats = BTreeMap::new();
        summary_stats(&seg.finished, &mut stats);
        metrics.push(Metric { regime, update, env_steps: rollout.env_steps, loss: lv, stats });
    }
    Ok(metrics)
}

/// Retrains only the policy group on a new task. Actor and critic heads are
/// redrawn first; the recurrent core is kept.
pub fn transfer_task2task(model: &mut Model, pool: &EpisodePool<'_>, cfg: &TrainConfig, updates: usize, env_cfg: &EnvConfig) -> Result<Vec<Metric>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7272);
    model.net.reinit_heads(&mut model.store, &mut rng)?;
    train_ppo(model, pool, Regime::Task2TaskTransfer, cfg, updates, env_cfg)
}

/// Bitwise comparison of two stores, by group: names of groups whose values differ.
pub fn changed_groups(before: &ParamStore<f32>, after: &ParamStore<f32>) -> Vec<String> {
    let mut out: Vec<String> = Vec::new();
    for (a, b) in before.params().iter().zip(after.params()) {
        let differs = a.value.data().iter().zip(b.value.data()).any(|(x, y)| x.to_bits() != y.to_bits());
        let name = before.groups()[a.group.0].name.clone();
        if differs && !out.contains(&name) {
            out.push(name);
        }
    }
    out
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub build_id: String,
    pub seed: u64,
    pub config: serde_json::Value,
    pub wall_time_s: f64,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub artifacts: BTreeMap<String, String>,
}

impl RunManifest {
    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}
