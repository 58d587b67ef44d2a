use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const TINY: &str = r#"
[world]
count = 3
extent = 6.0

[episodes]
count = 8

[render]
height = 8
width = 8

[model]
height = 8
width = 8
channels = [4, 4]
feature_dim = 16
hidden = 16
mlp_hidden = 16
gn_groups = 2

[train]
num_envs = 2
rollout_len = 4
minibatches = 2
epochs = 1
aux_batch = 4

[schedule]
aux_frames = 32
aux_walk = 8
aux_steps = 3
bc_updates = 3
ppo_updates = 2
transfer_updates = 2
task_updates = 2
"#;

struct Sandbox {
    dir: tempfile::TempDir,
}

impl Sandbox {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("tiny.toml"), TINY).unwrap();
        Self { dir }
    }

    fn p(&self, rel: &str) -> PathBuf {
        self.dir.path().join(rel)
    }

    fn run(&self, args: &[&str]) -> Output {
        Command::new(env!("CARGO_BIN_EXE_splitnav"))
            .args(args)
            .arg("--config")
            .arg(self.p("tiny.toml"))
            .env_remove("SPLITNAV_SEED")
            .env("RUST_LOG", "warn")
            .output()
            .unwrap()
    }

    fn ok(&self, args: &[&str]) {
        let out = self.run(args);
        assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    }

    fn s(&self, rel: &str) -> String {
        self.p(rel).display().to_string()
    }

    /// Worlds and pointnav episodes under `data/`.
    fn data(&self) {
        let data = self.s("data");
        self.ok(&["gen-worlds", "--seed", "3", "--out", &data]);
        self.ok(&["gen-episodes", "--worlds", &self.s("data/worlds"), "--seed", "4", "--out", &data]);
    }
}

fn read(p: &Path) -> String {
    std::fs::read_to_string(p).unwrap_or_else(|e| panic!("{}: {e}", p.display()))
}

#[test]
fn eval_random_writes_identical_reports() {
    let sb = Sandbox::new();
    sb.data();
    for out in ["a", "b"] {
        sb.ok(&["eval", "--agent", "random", "--worlds", &sb.s("data/worlds"), "--episodes", &sb.s("data/episodes.jsonl"), "--seed", "5", "--out", &sb.s(out)]);
    }
    let a = read(&sb.p("a/report.json"));
    assert_eq!(a, read(&sb.p("b/report.json")));
    let report: serde_json::Value = serde_json::from_str(&a).unwrap();
    assert!(report["spl"].is_number() && report["success"].is_number());
    let manifest: serde_json::Value = serde_json::from_str(&read(&sb.p("a/manifest-eval.json"))).unwrap();
    assert_eq!(manifest["seed"], 5);
    assert_eq!(manifest["config"]["world"]["count"], 3);
}

#[test]
fn training_pipeline_and_plots() {
    let sb = Sandbox::new();
    sb.data();
    let (w, e) = (sb.s("data/worlds"), sb.s("data/episodes.jsonl"));
    sb.ok(&["train-aux", "--worlds", &w, "--out", &sb.s("aux")]);
    sb.ok(&["train-bc", "--worlds", &w, "--episodes", &e, "--checkpoint", &sb.s("aux/model.ckpt"), "--out", &sb.s("bc")]);
    sb.ok(&["train-ppo", "--worlds", &w, "--episodes", &e, "--checkpoint", &sb.s("bc/model.ckpt"), "--task", "pointnav", "--out", &sb.s("ppo")]);
    sb.ok(&["train-bc", "--agent", "e2e_bc", "--worlds", &w, "--episodes", &e, "--out", &sb.s("e2e")]);
    sb.ok(&["train-bc", "--agent", "blind_bc", "--worlds", &w, "--episodes", &e, "--out", &sb.s("blind")]);
    sb.ok(&["eval", "--agent", "splitnet_bc_ppo", "--checkpoint", &sb.s("ppo/model.ckpt"), "--worlds", &w, "--episodes", &e, "--out", &sb.s("ev")]);
    sb.ok(&["plot", "--metrics", &sb.s("bc/metrics.jsonl"), "--metrics", &sb.s("ppo/metrics.jsonl"), "--report", &sb.s("ev/report.json"), "--out", &sb.s("plots")]);
    for svg in ["loss.svg", "reward.svg", "score.svg", "spl_by_distance.svg"] {
        let text = read(&sb.p(&format!("plots/{svg}")));
        assert!(text.starts_with("<svg") && text.trim_end().ends_with("</svg>"), "{svg}");
    }
    // too few updates for finished episodes; loss and report curves always exist
    assert!(read(&sb.p("plots/loss.svg")).contains("<polyline"));
    assert!(read(&sb.p("plots/spl_by_distance.svg")).contains("<polyline"));
}

#[test]
fn transfers_run_from_a_checkpoint() {
    let sb = Sandbox::new();
    sb.data();
    let w = sb.s("data/worlds");
    sb.ok(&["train-aux", "--worlds", &w, "--out", &sb.s("aux")]);
    let ck = sb.s("aux/model.ckpt");
    sb.ok(&["gen-worlds", "--style", "B", "--seed", "9", "--out", &sb.s("b")]);
    sb.ok(&["gen-episodes", "--worlds", &sb.s("b/worlds"), "--seed", "9", "--out", &sb.s("b")]);
    sb.ok(&["transfer-sim2sim", "--worlds", &sb.s("b/worlds"), "--episodes", &sb.s("b/episodes.jsonl"), "--checkpoint", &ck, "--k-scenes", "1", "--out", &sb.s("s2s")]);
    sb.ok(&["transfer-task", "--worlds", &w, "--checkpoint", &ck, "--task", "flee", "--out", &sb.s("flee")]);
    assert!(sb.p("s2s/model.ckpt").exists() && sb.p("flee/metrics.jsonl").exists());
}

#[test]
fn replay_writes_frames() {
    let sb = Sandbox::new();
    sb.data();
    let w = sb.s("data/worlds");
    sb.ok(&["eval", "--agent", "blind_goal_follower", "--worlds", &w, "--episodes", &sb.s("data/episodes.jsonl"), "--log-trajectories", "--out", &sb.s("ev")]);
    sb.ok(&["replay", "--worlds", &w, "--trajectory", &sb.s("ev/trajectories.jsonl"), "--out", &sb.s("rp")]);
    let frames = std::fs::read_dir(sb.p("rp/frames")).unwrap().count();
    assert!(frames >= 2);
    assert!(sb.p("rp/frames/frame_0000.png").exists());
}

#[test]
fn seed_falls_back_to_environment() {
    let sb = Sandbox::new();
    sb.ok(&["gen-worlds", "--seed", "21", "--out", &sb.s("flag")]);
    let out = Command::new(env!("CARGO_BIN_EXE_splitnav"))
        .args(["gen-worlds", "--out", &sb.s("env"), "--config", &sb.s("tiny.toml")])
        .env("SPLITNAV_SEED", "21")
        .output()
        .unwrap();
    assert!(out.status.success());
    let name = "worlds/world_0000.world";
    assert_eq!(read(&sb.p(&format!("flag/{name}"))), read(&sb.p(&format!("env/{name}"))));
}

#[test]
fn bad_inputs_exit_nonzero() {
    let sb = Sandbox::new();
    sb.data();
    let missing = sb.run(&["eval", "--agent", "splitnet_bc", "--checkpoint", &sb.s("nope.ckpt"), "--worlds", &sb.s("data/worlds"), "--episodes", &sb.s("data/episodes.jsonl"), "--out", &sb.s("x")]);
    assert!(!missing.status.success());
    assert!(String::from_utf8_lossy(&missing.stderr).contains("nope.ckpt"));

    std::fs::write(sb.p("bad.toml"), "[world]\ncount = 0\n").unwrap();
    let bad = Command::new(env!("CARGO_BIN_EXE_splitnav")).args(["gen-worlds", "--config", &sb.s("bad.toml"), "--out", &sb.s("y")]).output().unwrap();
    assert!(!bad.status.success());
    assert!(!String::from_utf8_lossy(&bad.stderr).is_empty());

    let unknown = sb.run(&["eval", "--agent", "teleporter", "--worlds", &sb.s("data/worlds"), "--episodes", &sb.s("data/episodes.jsonl")]);
    assert!(!unknown.status.success());
}
