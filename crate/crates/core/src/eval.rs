//! Agents, episode runner and success/SPL reporting.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::env::{Action, AgentInput, Env, EnvConfig, StepRecord};
use crate::error::{Error, Result};
use crate::train::{act, greedy_action, Model, WorldSet};
use crate::world::{Episode, Task, World};

/// Anything that picks actions from agent inputs.
pub trait NavAgent {
    /// Called before every episode. `seed` is derived from the episode id.
    fn reset(&mut self, episode: &Episode, seed: u64);
    fn act(&mut self, input: &AgentInput) -> Result<Action>;
    /// Blind agents get no rendering.
    fn blind(&self) -> bool;
}

pub struct RandomAgent {
    rng: ChaCha8Rng,
}

impl Default for RandomAgent {
    fn default() -> Self {
        Self { rng: ChaCha8Rng::seed_from_u64(0) }
    }
}

impl NavAgent for RandomAgent {
    fn reset(&mut self, _: &Episode, seed: u64) {
        self.rng = ChaCha8Rng::seed_from_u64(seed);
    }

    fn act(&mut self, _: &AgentInput) -> Result<Action> {
        Ok(Action::ALL[self.rng.random_range(0..Action::ALL.len())])
    }

    fn blind(&self) -> bool {
        true
    }
}

/// Turns toward the goal and walks straight. A forward step that barely
/// shortens the goal distance counts as a collision and triggers a random
/// turn-and-walk escape before realigning.
pub struct GoalFollower {
    rng: ChaCha8Rng,
    last: Option<(Action, f32)>,
    escape_turns: usize,
    escape_left: bool,
    escape_forward: usize,
}

const ALIGN_TOLERANCE_DEG: f32 = 5.0;
const MIN_PROGRESS: f32 = 0.1;

impl Default for GoalFollower {
    fn default() -> Self {
        Self { rng: ChaCha8Rng::seed_from_u64(0), last: None, escape_turns: 0, escape_left: false, escape_forward: 0 }
    }
}

impl GoalFollower {
    fn choose(&mut self, input: &AgentInput) -> Action {
        let [d, s, c] = input.goal_vec;
        if let Some((Action::Forward, prev_d)) = self.last {
            if prev_d - d < MIN_PROGRESS && self.escape_turns == 0 && self.escape_forward == 0 {
                self.escape_turns = self.rng.random_range(3..=9);
                self.escape_left = self.rng.random_bool(0.5);
                self.escape_forward = 4;
            }
        }
        if self.escape_turns > 0 {
            self.escape_turns -= 1;
            return if self.escape_left { Action::TurnLeft } else { Action::TurnRight };
        }
        if self.escape_forward > 0 {
            self.escape_forward -= 1;
            return Action::Forward;
        }
        let rel = s.atan2(c).to_degrees();
        if rel > ALIGN_TOLERANCE_DEG {
            Action::TurnLeft
        } else if rel < -ALIGN_TOLERANCE_DEG {
            Action::TurnRight
        } else {
            Action::Forward
        }
    }
}

impl NavAgent for GoalFollower {
    fn reset(&mut self, _: &Episode, seed: u64) {
        *self = Self { rng: ChaCha8Rng::seed_from_u64(seed), ..Self::default() };
    }

    fn act(&mut self, input: &AgentInput) -> Result<Action> {
        let a = self.choose(input);
        self.last = Some((a, input.goal_vec[0]));
        Ok(a)
    }

    fn blind(&self) -> bool {
        true
    }
}

/// Greedy recurrent policy.
pub struct NetAgent {
    model: Model,
    hidden: Vec<f32>,
    /// Zero the goal input, for tasks without a goal.
    zero_goal: bool,
}

impl NetAgent {
    pub fn new(model: Model) -> Self {
        let hidden = vec![0.0; model.net.cfg.hidden];
        Self { model, hidden, zero_goal: false }
    }
}

impl NavAgent for NetAgent {
    fn reset(&mut self, episode: &Episode, _: u64) {
        self.hidden.iter_mut().for_each(|h| *h = 0.0);
        self.zero_goal = episode.goal.is_none();
    }

    fn act(&mut self, input: &AgentInput) -> Result<Action> {
        let out = if self.zero_goal {
            let masked = AgentInput { goal_vec: [0.0; 3], ..input.clone() };
            act(&self.model, &[&masked], std::mem::take(&mut self.hidden))?
        } else {
            act(&self.model, &[input], std::mem::take(&mut self.hidden))?
        };
        self.hidden = out.hidden;
        Ok(Action::from_index(greedy_action(&out.logits)).expect("valid action index"))
    }

    fn blind(&self) -> bool {
        self.model.blind()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AgentKind {
    Random,
    BlindGoalFollower,
    BlindBc,
    BlindPpo,
    E2eBc,
    E2ePpo,
    E2eBcPpo,
    SplitnetBc,
    SplitnetBcPpo,
}

impl AgentKind {
    pub const ALL: [AgentKind; 9] = [
        AgentKind::Random,
        AgentKind::BlindGoalFollower,
        AgentKind::BlindBc,
        AgentKind::BlindPpo,
        AgentKind::E2eBc,
        AgentKind::E2ePpo,
        AgentKind::E2eBcPpo,
        AgentKind::SplitnetBc,
        AgentKind::SplitnetBcPpo,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AgentKind::Random => "random",
            AgentKind::BlindGoalFollower => "blind_goal_follower",
            AgentKind::BlindBc => "blind_bc",
            AgentKind::BlindPpo => "blind_ppo",
            AgentKind::E2eBc => "e2e_bc",
            AgentKind::E2ePpo => "e2e_ppo",
            AgentKind::E2eBcPpo => "e2e_bc_ppo",
            AgentKind::SplitnetBc => "splitnet_bc",
            AgentKind::SplitnetBcPpo => "splitnet_bc_ppo",
        }
    }

    pub fn needs_model(self) -> bool {
        !matches!(self, AgentKind::Random | AgentKind::BlindGoalFollower)
    }

    pub fn is_blind(self) -> bool {
        matches!(self, AgentKind::Random | AgentKind::BlindGoalFollower | AgentKind::BlindBc | AgentKind::BlindPpo)
    }

    /// Builds the agent; learned kinds take a clone of `model`.
    pub fn build(self, model: Option<&Model>) -> Result<Box<dyn NavAgent>> {
        match (self, model) {
            (AgentKind::Random, _) => Ok(Box::new(RandomAgent::default())),
            (AgentKind::BlindGoalFollower, _) => Ok(Box::new(GoalFollower::default())),
            (_, None) => Err(Error::Invalid(format!("agent {self} needs a checkpoint"))),
            (_, Some(m)) if m.blind() != self.is_blind() => {
                Err(Error::Invalid(format!("agent {self} does not match a {} model", if m.blind() { "blind" } else { "sighted" })))
            }
            (_, Some(m)) => Ok(Box::new(NetAgent::new(m.clone()))),
        }
    }
}

impl fmt::Display for AgentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AgentKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Invalid(format!("unknown agent {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeResult {
    pub episode_id: usize,
    pub world_id: usize,
    pub task: Task,
    pub success: bool,
    /// Geodesic start-to-goal length; zero for goal-free tasks.
    pub shortest: f64,
    pub path_length: f64,
    pub steps: u32,
    pub ret: f64,
    /// Visited squares for explore, final geodesic from start for flee, success for pointnav.
    pub score: f64,
}

impl EpisodeResult {
    pub fn spl(&self) -> f64 {
        if !self.success {
            return 0.0;
        }
        self.shortest / self.path_length.max(self.shortest).max(f64::MIN_POSITIVE)
    }
}

/// Mean success-weighted path-length ratio.
pub fn spl(results: &[EpisodeResult]) -> Result<f64> {
    if results.is_empty() {
        return Err(Error::Invalid("SPL of zero episodes".into()));
    }
    Ok(results.iter().map(EpisodeResult::spl).sum::<f64>() / results.len() as f64)
}

pub fn success_rate(results: &[EpisodeResult]) -> Result<f64> {
    if results.is_empty() {
        return Err(Error::Invalid("success rate of zero episodes".into()));
    }
    Ok(results.iter().filter(|r| r.success).count() as f64 / results.len() as f64)
}

/// Runs one episode to termination.
pub fn run_episode(world: &World, episode: &Episode, agent: &mut dyn NavAgent, env_cfg: &EnvConfig, seed: u64) -> Result<(EpisodeResult, Vec<StepRecord>)> {
    let cfg = EnvConfig { blind: agent.blind(), ..env_cfg.clone() };
    let (mut env, mut input) = Env::reset(world, episode, &cfg)?;
    let shortest = env.shortest();
    agent.reset(episode, seed ^ (episode.id as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    let mut ret = 0.0;
    let mut failed = false;
    loop {
        let action = match agent.act(&input) {
            Ok(a) => a,
            Err(e) => {
                log::warn!("episode {}: agent error, scored as failure: {e}", episode.id);
                failed = true;
                break;
            }
        };
        let out = env.step(action)?;
        ret += out.reward;
        input = out.input;
        if out.done {
            break;
        }
    }
    let info = env.info();
    let score = match episode.task {
        Task::PointNav => (info.success && !failed) as u8 as f64,
        Task::Explore => info.visited as f64,
        Task::Flee => info.geo_from_start,
    };
    let result = EpisodeResult {
        episode_id: episode.id,
        world_id: episode.world_id,
        task: episode.task,
        success: info.success && !failed,
        shortest,
        path_length: info.path_length,
        steps: env.steps(),
        ret,
        score,
    };
    Ok((result, env.trajectory().to_vec()))
}

/// Evaluates every episode with a fresh agent from `make`; results sorted by
/// episode id regardless of `workers`.
pub fn run_eval<F>(worlds: &[World], episodes: &[Episode], env_cfg: &EnvConfig, workers: usize, seed: u64, make: F) -> Result<Vec<EpisodeResult>>
where
    F: Fn() -> Result<Box<dyn NavAgent>> + Sync,
{
    let cfg = EnvConfig { log_trajectory: false, ..env_cfg.clone() };
    Ok(eval_all(worlds, episodes, &cfg, workers, seed, make)?.into_iter().map(|(r, _)| r).collect())
}

/// As [`run_eval`], also returning each episode's step log.
pub fn run_eval_logged<F>(
    worlds: &[World],
    episodes: &[Episode],
    env_cfg: &EnvConfig,
    workers: usize,
    seed: u64,
    make: F,
) -> Result<Vec<(EpisodeResult, Vec<StepRecord>)>>
where
    F: Fn() -> Result<Box<dyn NavAgent>> + Sync,
{
    let cfg = EnvConfig { log_trajectory: true, ..env_cfg.clone() };
    eval_all(worlds, episodes, &cfg, workers, seed, make)
}

fn eval_all<F>(worlds: &[World], episodes: &[Episode], env_cfg: &EnvConfig, workers: usize, seed: u64, make: F) -> Result<Vec<(EpisodeResult, Vec<StepRecord>)>>
where
    F: Fn() -> Result<Box<dyn NavAgent>> + Sync,
{
    let set = WorldSet::new(worlds);
    let one = |e: &Episode| -> Result<(EpisodeResult, Vec<StepRecord>)> {
        let mut agent = make()?;
        run_episode(set.get(e.world_id)?, e, agent.as_mut(), env_cfg, seed)
    };
    let mut results: Vec<(EpisodeResult, Vec<StepRecord>)> = if workers > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .build()
            .map_err(|e| Error::Invalid(e.to_string()))?;
        pool.install(|| episodes.par_iter().map(one).collect::<Result<_>>())?
    } else {
        episodes.iter().map(one).collect::<Result<_>>()?
    };
    results.sort_by_key(|(r, _)| r.episode_id);
    Ok(results)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Bucket {
    pub lo: f64,
    pub hi: f64,
    pub n: usize,
    pub success: f64,
    pub spl: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub agent: String,
    pub n: usize,
    pub success: f64,
    pub spl: f64,
    pub mean_score: f64,
    pub mean_return: f64,
    /// 1 m bins of shortest-path length, `[lo, hi)`.
    pub buckets: Vec<Bucket>,
    /// Episodes with shortest-path length below `hi`.
    pub cumulative: Vec<Bucket>,
}

fn bucket(lo: f64, hi: f64, rs: &[&EpisodeResult]) -> Bucket {
    let n = rs.len();
    let mean = |f: &dyn Fn(&EpisodeResult) -> f64| if n == 0 { 0.0 } else { rs.iter().map(|r| f(r)).sum::<f64>() / n as f64 };
    Bucket { lo, hi, n, success: mean(&|r| r.success as u8 as f64), spl: mean(&EpisodeResult::spl) }
}

impl EvalReport {
    pub fn new(agent: &str, results: &[EpisodeResult]) -> Result<Self> {
        let n = results.len();
        let spl_all = spl(results)?;
        let top = results.iter().map(|r| r.shortest.floor() as usize).max().unwrap_or(0);
        let mut buckets = Vec::new();
        let mut cumulative = Vec::new();
        for k in 0..=top {
            let (lo, hi) = (k as f64, k as f64 + 1.0);
            let inside: Vec<&EpisodeResult> = results.iter().filter(|r| r.shortest >= lo && r.shortest < hi).collect();
            let below: Vec<&EpisodeResult> = results.iter().filter(|r| r.shortest < hi).collect();
            buckets.push(bucket(lo, hi, &inside));
            cumulative.push(bucket(0.0, hi, &below));
        }
        Ok(Self {
            agent: agent.to_string(),
            n,
            success: success_rate(results)?,
            spl: spl_all,
            mean_score: results.iter().map(|r| r.score).sum::<f64>() / n as f64,
            mean_return: results.iter().map(|r| r.ret).sum::<f64>() / n as f64,
            buckets,
            cumulative,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn result(shortest: f64, path: f64, success: bool) -> EpisodeResult {
        EpisodeResult { episode_id: 0, world_id: 0, task: Task::PointNav, success, shortest, path_length: path, steps: 1, ret: 0.0, score: 0.0 }
    }

    #[test]
    fn spl_examples() {
        assert_eq!(result(4.0, 8.0, true).spl(), 0.5);
        assert_eq!(result(4.0, 3.9, true).spl(), 1.0);
        assert_eq!(result(4.0, 4.0, false).spl(), 0.0);
        assert!(spl(&[]).is_err());
    }

    #[test]
    fn agent_names_round_trip() {
        for k in AgentKind::ALL {
            assert_eq!(k.name().parse::<AgentKind>().unwrap(), k);
        }
        assert!(AgentKind::SplitnetBc.build(None).is_err());
    }

    #[test]
    fn follower_turns_toward_goal() {
        let mut f = GoalFollower::default();
        let input = |s: f32, c: f32| AgentInput { rgb: vec![], goal_vec: [3.0, s, c], prev_action: None };
        assert_eq!(f.act(&input(0.5, 0.86)).unwrap(), Action::TurnLeft);
        assert_eq!(f.act(&input(-0.5, 0.86)).unwrap(), Action::TurnRight);
        assert_eq!(f.act(&input(0.0, 1.0)).unwrap(), Action::Forward);
    }
}
