//! Episode lifecycle, agent observations and task rewards.

use std::collections::HashSet;
use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::render::{apply_action, render, ObsFrame, RenderConfig, FORWARD_STEP, TURN_DEG};
use crate::world::{AnyAngleField, DistanceField, Episode, GeodesicField, Point, Pose, Task, World};

/// Per-step time penalty shared by all task rewards.
pub const LAMBDA_T: f64 = -0.01;
pub const SUCCESS_RADIUS: f64 = 0.2;
/// One-hot width: three actions plus the "none" slot used before the first step.
pub const ACTION_SLOTS: usize = 4;
pub const GOAL_DIM: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Action {
    Forward,
    TurnLeft,
    TurnRight,
}

impl Action {
    pub const ALL: [Action; 3] = [Action::Forward, Action::TurnLeft, Action::TurnRight];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(k: usize) -> Option<Action> {
        Self::ALL.get(k).copied()
    }
}

pub fn one_hot(prev: Option<Action>) -> [f32; ACTION_SLOTS] {
    let mut v = [0.0; ACTION_SLOTS];
    v[prev.map_or(3, Action::index)] = 1.0;
    v
}

pub fn reward_pointnav(prev_geo: f64, cur_geo: f64) -> f64 {
    prev_geo - cur_geo + LAMBDA_T
}

pub fn reward_explore(prev_count: usize, cur_count: usize) -> f64 {
    cur_count as f64 - prev_count as f64 + LAMBDA_T
}

pub fn reward_flee(prev_dist: f64, cur_dist: f64) -> f64 {
    cur_dist - prev_dist + LAMBDA_T
}

/// Distinct 1 m floor squares visited.
#[derive(Clone, Debug, Default)]
pub struct VisitationSet {
    cells: HashSet<(i64, i64)>,
}

impl VisitationSet {
    pub fn insert(&mut self, p: Point) {
        self.cells.insert((p.x.floor() as i64, p.y.floor() as i64));
    }

    pub fn count(&self) -> usize {
        self.cells.len()
    }
}

/// `(euclidean distance, sin, cos)` of the goal relative to the heading.
pub fn goal_vector(pose: &Pose, goal: Point) -> [f32; GOAL_DIM] {
    let (dx, dy) = (goal.x - pose.x, goal.y - pose.y);
    let d = dx.hypot(dy);
    if d == 0.0 {
        return [0.0, 0.0, 1.0];
    }
    let rel = dy.atan2(dx) - pose.heading_deg.to_radians();
    [d as f32, rel.sin() as f32, rel.cos() as f32]
}

/// What the agent sees. Depth and normals are never part of it.
#[derive(Clone, Debug)]
pub struct AgentInput {
    /// Planar `[3, H, W]`; empty for blind environments.
    pub rgb: Vec<f32>,
    pub goal_vec: [f32; GOAL_DIM],
    pub prev_action: Option<Action>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepInfo {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub geo_to_goal: Option<f64>,
    pub visited: usize,
    pub geo_from_start: f64,
    pub collided: bool,
    pub success: bool,
    /// `FORWARD_STEP` per non-collided forward step so far.
    pub path_length: f64,
}

#[derive(Clone, Debug)]
pub struct StepOutcome {
    pub input: AgentInput,
    pub reward: f64,
    pub done: bool,
    pub info: StepInfo,
}

/// One trajectory log line. Step 0 is the reset state with no action.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub t: usize,
    pub pose: Pose,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub action: Option<Action>,
    pub reward: f64,
    pub done: bool,
    pub info: StepInfo,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EnvConfig {
    pub render: RenderConfig,
    /// Skip rendering entirely; the agent input carries no image.
    pub blind: bool,
    /// Keep depth/normals/rgb of the latest frame for auxiliary supervision.
    pub keep_frame: bool,
    pub log_trajectory: bool,
}

pub struct Env<'w> {
    world: &'w World,
    episode: Episode,
    cfg: EnvConfig,
    goal_field: Option<GeodesicField>,
    oracle_field: std::cell::OnceCell<AnyAngleField>,
    start_field: GeodesicField,
    shortest: f64,
    pose: Pose,
    steps: u32,
    prev_action: Option<Action>,
    visited: VisitationSet,
    info: StepInfo,
    done: bool,
    frame: Option<ObsFrame>,
    log: Vec<StepRecord>,
}

impl<'w> Env<'w> {
    /// Starts `episode`. The consumer must zero its recurrent state.
    pub fn reset(world: &'w World, episode: &Episode, cfg: &EnvConfig) -> Result<(Self, AgentInput)> {
        let start = episode.start.pos();
        let start_field = GeodesicField::new(world, start)?;
        let goal_field = match (episode.task, episode.goal) {
            (Task::PointNav, Some(goal)) => {
                let field = GeodesicField::new(world, goal)?;
                if !field.distance(world, start)?.is_finite() {
                    return Err(Error::Unreachable);
                }
                Some(field)
            }
            (Task::PointNav, None) => return Err(Error::Invalid(format!("pointnav episode {} has no goal", episode.id))),
            _ => None,
        };
        let mut visited = VisitationSet::default();
        visited.insert(start);
        let geo_to_goal = goal_field.as_ref().map(|f| f.distance(world, start)).transpose()?;
        let info = StepInfo {
            geo_to_goal,
            visited: visited.count(),
            geo_from_start: 0.0,
            collided: false,
            success: false,
            path_length: 0.0,
        };
        let mut env = Self {
            world,
            episode: episode.clone(),
            cfg: cfg.clone(),
            goal_field,
            oracle_field: std::cell::OnceCell::new(),
            start_field,
            shortest: geo_to_goal.unwrap_or(0.0),
            pose: episode.start,
            steps: 0,
            prev_action: None,
            visited,
            info,
            done: false,
            frame: None,
            log: Vec::new(),
        };
        if env.cfg.log_trajectory {
            env.log.push(StepRecord { t: 0, pose: env.pose, action: None, reward: 0.0, done: false, info: env.info.clone() });
        }
        let input = env.observe()?;
        Ok((env, input))
    }

    fn observe(&mut self) -> Result<AgentInput> {
        let rgb = if self.cfg.blind {
            Vec::new()
        } else {
            let frame = render(self.world, &self.pose, &self.cfg.render)?;
            let rgb = frame.rgb_chw();
            if self.cfg.keep_frame {
                self.frame = Some(frame);
            }
            rgb
        };
        let goal_vec = match (self.episode.task, self.episode.goal) {
            (Task::PointNav, Some(goal)) => goal_vector(&self.pose, goal),
            _ => [0.0; GOAL_DIM],
        };
        Ok(AgentInput { rgb, goal_vec, prev_action: self.prev_action })
    }

    pub fn step(&mut self, action: Action) -> Result<StepOutcome> {
        if self.done {
            return Err(Error::EpisodeDone);
        }
        let (pose, collided) = apply_action(self.world, &self.pose, action);
        let moved = if action == Action::Forward && !collided { FORWARD_STEP } else { 0.0 };
        self.pose = pose;
        self.steps += 1;
        self.prev_action = Some(action);
        let prev = self.info.clone();
        self.visited.insert(pose.pos());
        let geo_from_start = self.start_field.distance(self.world, pose.pos())?;
        let geo_to_goal = self.goal_field.as_ref().map(|f| f.distance(self.world, pose.pos())).transpose()?;
        let success = match self.episode.goal {
            Some(goal) if self.episode.task == Task::PointNav => pose.pos().dist(goal) <= SUCCESS_RADIUS,
            _ => false,
        };
        self.info = StepInfo {
            geo_to_goal,
            visited: self.visited.count(),
            geo_from_start,
            collided,
            success,
            path_length: prev.path_length + moved,
        };
        let reward = match self.episode.task {
            Task::PointNav => reward_pointnav(prev.geo_to_goal.unwrap_or(0.0), geo_to_goal.unwrap_or(0.0)),
            Task::Explore => reward_explore(prev.visited, self.info.visited),
            Task::Flee => reward_flee(prev.geo_from_start, geo_from_start),
        };
        self.done = success || self.steps >= self.episode.max_steps;
        if self.cfg.log_trajectory {
            self.log.push(StepRecord {
                t: self.steps as usize,
                pose,
                action: Some(action),
                reward,
                done: self.done,
                info: self.info.clone(),
            });
        }
        let input = self.observe()?;
        Ok(StepOutcome { input, reward, done: self.done, info: self.info.clone() })
    }

    pub fn pose(&self) -> Pose {
        self.pose
    }

    /// Geodesic start-to-goal length; zero for goal-free tasks.
    pub fn shortest(&self) -> f64 {
        self.shortest
    }

    pub fn steps(&self) -> u32 {
        self.steps
    }

    pub fn is_done(&self) -> bool {
        self.done
    }

    pub fn info(&self) -> &StepInfo {
        &self.info
    }

    pub fn episode(&self) -> &Episode {
        &self.episode
    }

    pub fn world(&self) -> &World {
        self.world
    }

    /// Latest rendered frame when `keep_frame` is set.
    pub fn frame(&self) -> Option<&ObsFrame> {
        self.frame.as_ref()
    }

    pub fn trajectory(&self) -> &[StepRecord] {
        &self.log
    }

    /// Expert action for the current state of a pointnav episode.
    pub fn oracle_action(&self) -> Result<Action> {
        let goal = self.episode.goal.ok_or(Error::Unreachable)?;
        let field = match self.oracle_field.get() {
            Some(f) => f,
            None => {
                let f = AnyAngleField::new(self.world, goal)?;
                self.oracle_field.get_or_init(|| f)
            }
        };
        oracle_action_with(self.world, field, &self.pose)
    }
}

/// Greedy expert against a precomputed goal distance field.
///
/// Forward is scored by the distance after one forward move. Each turn
/// direction is scored by its best probe over `k = 1..=18`: rotate `k` times,
/// move forward, add `TURN_PENALTY * k`. Ties prefer Forward, then TurnLeft,
/// then TurnRight.
pub fn oracle_action_with(world: &World, field: &impl DistanceField, pose: &Pose) -> Result<Action> {
    const TURN_PENALTY: f64 = 1e-2;
    if !field.distance(world, pose.pos())?.is_finite() {
        return Err(Error::Unreachable);
    }
    let after_forward = |p: &Pose| -> Result<f64> {
        let (next, _) = apply_action(world, p, Action::Forward);
        field.distance(world, next.pos())
    };
    let forward = after_forward(pose)?;
    let sweep = |sign: f64| -> Result<f64> {
        let mut best = f64::INFINITY;
        for k in 1..=18 {
            let rotated = Pose { heading_deg: (pose.heading_deg + sign * TURN_DEG * k as f64).rem_euclid(360.0), ..*pose };
            best = best.min(after_forward(&rotated)? + TURN_PENALTY * k as f64);
        }
        Ok(best)
    };
    let left = sweep(1.0)?;
    let right = sweep(-1.0)?;
    Ok(if forward <= left && forward <= right {
        Action::Forward
    } else if left <= right {
        Action::TurnLeft
    } else {
        Action::TurnRight
    })
}

pub fn oracle_action(world: &World, pose: &Pose, goal: Point) -> Result<Action> {
    oracle_action_with(world, &AnyAngleField::new(world, goal)?, pose)
}

pub fn write_trajectory(path: &Path, records: &[StepRecord]) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_trajectory(path: &Path) -> Result<Vec<StepRecord>> {
    let file = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for (k, line) in file.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Parse {
            what: "trajectory",
            line: k + 1,
            msg: e.to_string(),
        })?);
    }
    Ok(out)
}

/// Worst gap between the summed logged rewards and the closed form of the
/// task's telescoping sum.
pub fn telescoping_gap(task: Task, log: &[StepRecord]) -> f64 {
    let (Some(first), Some(last)) = (log.first(), log.last()) else {
        return 0.0;
    };
    let steps = (log.len() - 1) as f64;
    let total: f64 = log[1..].iter().map(|r| r.reward).sum();
    let closed = match task {
        Task::PointNav => {
            first.info.geo_to_goal.unwrap_or(0.0) - last.info.geo_to_goal.unwrap_or(0.0) + steps * LAMBDA_T
        }
        Task::Explore => last.info.visited as f64 - 1.0 + steps * LAMBDA_T,
        Task::Flee => last.info.geo_from_start + steps * LAMBDA_T,
    };
    (total - closed).abs()
}
