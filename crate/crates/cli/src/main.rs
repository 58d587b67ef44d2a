mod config;
mod plot;

use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use log::info;
use serde::{Deserialize, Serialize};
use splitnav::env::StepRecord;
use splitnav::eval::{run_eval, run_eval_logged, AgentKind, EvalReport};
use splitnav::model::ModelConfig;
use splitnav::render::render;
use splitnav::train::{
    collect_aux_dataset, read_metrics, train_aux, train_bc, train_ppo, transfer_sim2sim, transfer_task2task, write_metrics, EpisodePool,
    Metric, Model, Regime, RunManifest,
};
use splitnav::world::{generate_worlds, load_world_dir, read_episodes, sample_episodes, save_world, write_episodes, Episode, Style, Task, World};

use config::Config;
use plot::{line_chart, smooth, Series};

#[derive(Parser, Debug)]
#[command(name = "splitnav", version, about = "Train and evaluate decoupled perception/policy navigation agents")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Debug)]
struct Common {
    /// TOML config; missing keys take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true, env = "SPLITNAV_SEED", default_value_t = 0)]
    seed: u64,
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    #[arg(long, global = true, default_value_t = 1)]
    workers: usize,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Procedural worlds written as `<out>/worlds/*.world`.
    GenWorlds {
        #[arg(long, default_value = "A")]
        style: Style,
    },
    /// Filtered episodes written as `<out>/episodes.jsonl`.
    GenEpisodes {
        #[arg(long)]
        worlds: PathBuf,
        #[arg(long, default_value = "pointnav")]
        task: Task,
    },
    /// Encoder and auxiliary decoders from wandering frames.
    TrainAux {
        #[arg(long)]
        worlds: PathBuf,
        /// Continue from this model instead of a fresh one.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Student-forcing behavioural cloning.
    TrainBc {
        #[arg(long)]
        worlds: PathBuf,
        #[arg(long)]
        episodes: PathBuf,
        /// splitnet_bc, e2e_bc or blind_bc.
        #[arg(long, default_value = "splitnet_bc")]
        agent: AgentKind,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// PPO on the task of the episode file.
    TrainPpo {
        #[arg(long)]
        worlds: PathBuf,
        #[arg(long)]
        episodes: PathBuf,
        /// splitnet_bc_ppo, e2e_ppo, e2e_bc_ppo or blind_ppo.
        #[arg(long, default_value = "splitnet_bc_ppo")]
        agent: AgentKind,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Rejects episode files of any other task.
        #[arg(long)]
        task: Option<Task>,
    },
    /// Encoder-only adaptation to the first `k` target worlds.
    TransferSim2sim {
        #[arg(long)]
        worlds: PathBuf,
        #[arg(long)]
        episodes: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 1)]
        k_scenes: usize,
        /// Also update the policy group.
        #[arg(long)]
        encoder_policy: bool,
    },
    /// Policy-only retraining for a new task.
    TransferTask {
        #[arg(long)]
        worlds: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        task: Task,
        /// Sampled from the worlds when absent.
        #[arg(long)]
        episodes: Option<PathBuf>,
    },
    /// Report with SPL, success and distance buckets.
    Eval {
        #[arg(long)]
        worlds: PathBuf,
        #[arg(long)]
        episodes: PathBuf,
        #[arg(long)]
        agent: AgentKind,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Also write `<out>/trajectories.jsonl`.
        #[arg(long)]
        log_trajectories: bool,
    },
    /// SVG learning curves and SPL by distance.
    Plot {
        #[arg(long, required = true)]
        metrics: Vec<PathBuf>,
        #[arg(long)]
        report: Vec<PathBuf>,
    },
    /// PNG frames of one logged episode.
    Replay {
        #[arg(long)]
        worlds: PathBuf,
        #[arg(long)]
        trajectory: PathBuf,
        /// First episode in the log when absent.
        #[arg(long)]
        episode: Option<usize>,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::GenWorlds { .. } => "gen-worlds",
            Command::GenEpisodes { .. } => "gen-episodes",
            Command::TrainAux { .. } => "train-aux",
            Command::TrainBc { .. } => "train-bc",
            Command::TrainPpo { .. } => "train-ppo",
            Command::TransferSim2sim { .. } => "transfer-sim2sim",
            Command::TransferTask { .. } => "transfer-task",
            Command::Eval { .. } => "eval",
            Command::Plot { .. } => "plot",
            Command::Replay { .. } => "replay",
        }
    }
}

/// One line of `trajectories.jsonl`.
#[derive(Serialize, Deserialize)]
struct TrajectoryLog {
    episode_id: usize,
    world_id: usize,
    steps: Vec<StepRecord>,
}

struct Run {
    cfg: Config,
    common: Common,
    artifacts: BTreeMap<String, String>,
}

impl Run {
    fn path(&self, name: &str) -> PathBuf {
        self.common.out.join(name)
    }

    fn record(&mut self, key: &str, path: &Path) {
        self.artifacts.insert(key.to_string(), path.display().to_string());
    }

    fn save_model(&mut self, model: &Model) -> Result<()> {
        let p = self.path("model.ckpt");
        model.save(&p)?;
        self.record("checkpoint", &p);
        Ok(())
    }

    fn save_metrics(&mut self, metrics: &[Metric]) -> Result<()> {
        let p = self.path("metrics.jsonl");
        write_metrics(&p, metrics)?;
        self.record("metrics", &p);
        if let Some(last) = metrics.last() {
            info!("{} updates, final loss {:.4}", metrics.len(), last.loss);
        }
        Ok(())
    }
}

fn load_worlds(dir: &Path) -> Result<Vec<World>> {
    let worlds = load_world_dir(dir).with_context(|| format!("loading worlds from {}", dir.display()))?;
    if worlds.is_empty() {
        bail!("no .world files in {}", dir.display());
    }
    Ok(worlds)
}

fn load_episodes(path: &Path) -> Result<Vec<Episode>> {
    let eps = read_episodes(path).with_context(|| format!("reading episodes {}", path.display()))?;
    if eps.is_empty() {
        bail!("episode file {} is empty", path.display());
    }
    Ok(eps)
}

fn load_model(path: &Path) -> Result<Model> {
    if !path.exists() {
        bail!("checkpoint {} does not exist", path.display());
    }
    Model::load(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

fn fresh_model(cfg: &ModelConfig, seed: u64, blind: bool) -> Result<Model> {
    Ok(Model::new(&ModelConfig { blind, ..cfg.clone() }, seed)?)
}

fn require(checkpoint: &Option<PathBuf>, agent: AgentKind) -> Result<Model> {
    match checkpoint {
        Some(p) => load_model(p),
        None => bail!("--agent {agent} needs --checkpoint"),
    }
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    if let Err(e) = execute(cli) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn execute(cli: Cli) -> Result<()> {
    let started = Instant::now();
    let cfg = Config::load(cli.common.config.as_deref())?;
    std::fs::create_dir_all(&cli.common.out).with_context(|| format!("creating {}", cli.common.out.display()))?;
    let command = std::env::args().collect::<Vec<_>>().join(" ");
    let name = cli.command.name();
    let mut run = Run { cfg, common: cli.common, artifacts: BTreeMap::new() };
    dispatch(&mut run, cli.command)?;
    let manifest = RunManifest {
        command,
        build_id: format!("splitnav {}", env!("CARGO_PKG_VERSION")),
        seed: run.common.seed,
        config: serde_json::to_value(&run.cfg)?,
        wall_time_s: started.elapsed().as_secs_f64(),
        artifacts: run.artifacts,
    };
    let path = run.common.out.join(format!("manifest-{name}.json"));
    manifest.write(&path)?;
    info!("wrote {}", path.display());
    Ok(())
}

fn dispatch(run: &mut Run, command: Command) -> Result<()> {
    let seed = run.common.seed;
    let workers = run.common.workers;
    match command {
        Command::GenWorlds { style } => {
            let w = &run.cfg.world;
            let worlds = generate_worlds(&run.cfg.worldgen, seed, w.first_id, w.count, w.extent, style)?;
            let dir = run.path("worlds");
            std::fs::create_dir_all(&dir)?;
            for world in &worlds {
                save_world(&dir.join(format!("world_{:04}.world", world.id)), world)?;
            }
            info!("{} style-{style} worlds", worlds.len());
            run.record("worlds", &dir);
        }
        Command::GenEpisodes { worlds, task } => {
            let worlds = load_worlds(&worlds)?;
            let eps = sample_episodes(&worlds, task, run.cfg.episodes.count, seed, &run.cfg.episodes.filter)?;
            let p = run.path("episodes.jsonl");
            write_episodes(&p, &eps)?;
            info!("{} {task} episodes", eps.len());
            run.record("episodes", &p);
        }
        Command::TrainAux { worlds, checkpoint } => {
            let worlds = load_worlds(&worlds)?;
            let mut model = match &checkpoint {
                Some(p) => load_model(p)?,
                None => fresh_model(&run.cfg.model, seed, false)?,
            };
            let s = &run.cfg.schedule;
            let data = collect_aux_dataset(&worlds, s.aux_frames, s.aux_walk, &run.cfg.render, seed)?;
            let metrics = train_aux(&mut model, &data, &run.cfg.train_with(seed, workers), s.aux_steps)?;
            run.save_model(&model)?;
            run.save_metrics(&metrics)?;
        }
        Command::TrainBc { worlds, episodes, agent, checkpoint } => {
            let worlds = load_worlds(&worlds)?;
            let pool = EpisodePool::new(&worlds, load_episodes(&episodes)?)?;
            let (mut model, regime) = match agent {
                AgentKind::SplitnetBc => (require(&checkpoint, agent)?, Regime::Bc),
                AgentKind::E2eBc => (checkpoint.as_deref().map(load_model).transpose()?.map_or_else(|| fresh_model(&run.cfg.model, seed, false), Ok)?, Regime::E2eBc),
                AgentKind::BlindBc => (fresh_model(&run.cfg.model, seed, true)?, Regime::Bc),
                other => bail!("train-bc does not produce {other} agents"),
            };
            let metrics = train_bc(&mut model, &pool, regime, &run.cfg.train_with(seed, workers), run.cfg.schedule.bc_updates, &run.cfg.env())?;
            run.save_model(&model)?;
            run.save_metrics(&metrics)?;
        }
        Command::TrainPpo { worlds, episodes, agent, checkpoint, task } => {
            let worlds = load_worlds(&worlds)?;
            let eps = load_episodes(&episodes)?;
            if let Some(task) = task {
                if let Some(e) = eps.iter().find(|e| e.task != task) {
                    bail!("episode {} is {} but --task is {task}", e.id, e.task);
                }
            }
            let pool = EpisodePool::new(&worlds, eps)?;
            let (mut model, regime) = match agent {
                AgentKind::SplitnetBcPpo => (require(&checkpoint, agent)?, Regime::Ppo),
                AgentKind::E2eBcPpo => (require(&checkpoint, agent)?, Regime::E2ePpo),
                AgentKind::E2ePpo => (fresh_model(&run.cfg.model, seed, false)?, Regime::E2ePpo),
                AgentKind::BlindPpo => (checkpoint.as_deref().map(load_model).transpose()?.map_or_else(|| fresh_model(&run.cfg.model, seed, true), Ok)?, Regime::Ppo),
                other => bail!("train-ppo does not produce {other} agents"),
            };
            let metrics = train_ppo(&mut model, &pool, regime, &run.cfg.train_with(seed, workers), run.cfg.schedule.ppo_updates, &run.cfg.env())?;
            run.save_model(&model)?;
            run.save_metrics(&metrics)?;
        }
        Command::TransferSim2sim { worlds, episodes, checkpoint, k_scenes, encoder_policy } => {
            let all = load_worlds(&worlds)?;
            if k_scenes == 0 || k_scenes > all.len() {
                bail!("--k-scenes must be in 1..={}", all.len());
            }
            let target = &all[..k_scenes];
            let ids: Vec<usize> = target.iter().map(|w| w.id).collect();
            let eps: Vec<Episode> = load_episodes(&episodes)?.into_iter().filter(|e| ids.contains(&e.world_id)).collect();
            if eps.is_empty() {
                bail!("no episodes in the first {k_scenes} target worlds");
            }
            let pool = EpisodePool::new(target, eps)?;
            let mut model = load_model(&checkpoint)?;
            let s = &run.cfg.schedule;
            let aux = collect_aux_dataset(target, s.aux_frames, s.aux_walk, &run.cfg.render, seed)?;
            let regime = if encoder_policy { Regime::Sim2SimEncoderPolicy } else { Regime::Sim2SimTransfer };
            let metrics = transfer_sim2sim(&mut model, &pool, &aux, &run.cfg.train_with(seed, workers), s.transfer_updates, &run.cfg.env(), regime)?;
            run.save_model(&model)?;
            run.save_metrics(&metrics)?;
        }
        Command::TransferTask { worlds, checkpoint, task, episodes } => {
            if task == Task::PointNav {
                bail!("transfer-task targets explore or flee");
            }
            let worlds = load_worlds(&worlds)?;
            let eps = match episodes {
                Some(p) => load_episodes(&p)?,
                None => sample_episodes(&worlds, task, run.cfg.episodes.count, seed, &run.cfg.episodes.filter)?,
            };
            let pool = EpisodePool::new(&worlds, eps)?;
            let mut model = load_model(&checkpoint)?;
            let metrics = transfer_task2task(&mut model, &pool, &run.cfg.train_with(seed, workers), run.cfg.schedule.task_updates, &run.cfg.env())?;
            run.save_model(&model)?;
            run.save_metrics(&metrics)?;
        }
        Command::Eval { worlds, episodes, agent, checkpoint, log_trajectories } => {
            let worlds = load_worlds(&worlds)?;
            let eps = load_episodes(&episodes)?;
            let model = match (&checkpoint, agent.needs_model()) {
                (Some(p), true) => Some(load_model(p)?),
                (None, true) => bail!("--agent {agent} needs --checkpoint"),
                _ => None,
            };
            let make = || agent.build(model.as_ref());
            let env = run.cfg.env();
            let (results, logs) = if log_trajectories {
                let logged = run_eval_logged(&worlds, &eps, &env, workers, seed, make)?;
                let (r, l): (Vec<_>, Vec<_>) = logged.into_iter().unzip();
                (r, Some(l))
            } else {
                (run_eval(&worlds, &eps, &env, workers, seed, make)?, None)
            };
            let report = EvalReport::new(agent.name(), &results)?;
            let p = run.path("report.json");
            std::fs::write(&p, serde_json::to_string_pretty(&report)? + "\n")?;
            run.record("report", &p);
            let p = run.path("results.jsonl");
            write_jsonl(&p, &results)?;
            run.record("results", &p);
            if let Some(logs) = logs {
                let lines: Vec<TrajectoryLog> =
                    results.iter().zip(logs).map(|(r, steps)| TrajectoryLog { episode_id: r.episode_id, world_id: r.world_id, steps }).collect();
                let p = run.path("trajectories.jsonl");
                write_jsonl(&p, &lines)?;
                run.record("trajectories", &p);
            }
            info!("{agent}: success {:.3} spl {:.3} over {} episodes", report.success, report.spl, report.n);
        }
        Command::Plot { metrics, report } => plot(run, &metrics, &report)?,
        Command::Replay { worlds, trajectory, episode } => {
            let worlds = load_worlds(&worlds)?;
            let file = std::fs::File::open(&trajectory).with_context(|| format!("opening {}", trajectory.display()))?;
            let mut chosen = None;
            for line in std::io::BufReader::new(file).lines() {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                let log: TrajectoryLog = serde_json::from_str(&line)?;
                if episode.is_none_or(|id| id == log.episode_id) {
                    chosen = Some(log);
                    break;
                }
            }
            let Some(log) = chosen else { bail!("episode not found in {}", trajectory.display()) };
            let world = worlds.iter().find(|w| w.id == log.world_id).with_context(|| format!("world {} not loaded", log.world_id))?;
            let dir = run.path("frames");
            std::fs::create_dir_all(&dir)?;
            for rec in &log.steps {
                render(world, &rec.pose, &run.cfg.render)?.save_png(&dir.join(format!("frame_{:04}.png", rec.t)))?;
            }
            info!("{} frames of episode {}", log.steps.len(), log.episode_id);
            run.record("frames", &dir);
        }
    }
    Ok(())
}

fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    for r in rows {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

fn stat_series(label: &str, metrics: &[Metric], key: &str) -> Option<Series> {
    let pts: Vec<(f64, f64)> = metrics.iter().filter_map(|m| m.stats.get(key).map(|&v| (m.env_steps as f64, v))).collect();
    (!pts.is_empty()).then(|| Series { label: format!("{label} {key}"), points: smooth(&pts, 10) })
}

fn plot(run: &mut Run, metrics: &[PathBuf], reports: &[PathBuf]) -> Result<()> {
    let mut loss = Vec::new();
    let mut reward = Vec::new();
    let mut score = Vec::new();
    for path in metrics {
        let m = read_metrics(path).with_context(|| format!("reading metrics {}", path.display()))?;
        let label = path.file_stem().map_or_else(|| "run".into(), |s| s.to_string_lossy().into_owned());
        let pts: Vec<(f64, f64)> = m.iter().map(|x| (x.update as f64, x.loss)).collect();
        loss.push(Series { label: label.clone(), points: smooth(&pts, 10) });
        reward.extend(stat_series(&label, &m, "return_mean"));
        reward.extend(stat_series(&label, &m, "reward_per_step"));
        score.extend(stat_series(&label, &m, "spl_mean"));
        score.extend(stat_series(&label, &m, "score_mean"));
    }
    let charts = [
        ("loss.svg", line_chart("Training loss", "update", "loss", &loss)),
        ("reward.svg", line_chart("Reward", "env steps", "reward", &reward)),
        ("score.svg", line_chart("SPL and task score", "env steps", "value", &score)),
    ];
    for (name, svg) in charts {
        let p = run.path(name);
        std::fs::write(&p, svg)?;
        run.record(name.trim_end_matches(".svg"), &p);
    }
    if !reports.is_empty() {
        let mut series = Vec::new();
        for path in reports {
            let r: EvalReport = serde_json::from_str(&std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?)?;
            let mid = |b: &splitnav::eval::Bucket| (b.lo + b.hi) / 2.0;
            series.push(Series { label: format!("{} SPL", r.agent), points: r.buckets.iter().filter(|b| b.n > 0).map(|b| (mid(b), b.spl)).collect() });
            series.push(Series { label: format!("{} cumulative SPL", r.agent), points: r.cumulative.iter().filter(|b| b.n > 0).map(|b| (b.hi, b.spl)).collect() });
        }
        let p = run.path("spl_by_distance.svg");
        std::fs::write(&p, line_chart("SPL by geodesic start distance", "geodesic distance (m)", "SPL", &series))?;
        run.record("spl_by_distance", &p);
    }
    Ok(())
}
