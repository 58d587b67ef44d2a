//! Column raycaster with analytic depth and surface normals.
//!
//! Normals are expressed in the camera frame: `x` right, `y` forward, `z` up.
//! Depth is the distance along the optical axis.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::env::{Action, StepRecord};
use crate::error::{Error, Result};
use crate::world::{Pose, Style, World};

pub const FORWARD_STEP: f64 = 0.25;
pub const TURN_DEG: f64 = 10.0;
pub const CONTACT_MARGIN: f64 = 0.01;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RenderConfig {
    pub height: usize,
    pub width: usize,
    pub fov_deg: f64,
    pub wall_height: f64,
    pub camera_height: f64,
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self { height: 64, width: 64, fov_deg: 90.0, wall_height: 2.5, camera_height: 1.25 }
    }
}

impl RenderConfig {
    pub fn with_resolution(height: usize, width: usize) -> Self {
        Self { height, width, ..Self::default() }
    }

    fn focal(&self) -> f64 {
        0.5 * self.width as f64 / (0.5 * self.fov_deg.to_radians()).tan()
    }
}

/// Row-major `H x W` maps; `rgb` and `normals` interleave 3 channels per pixel.
#[derive(Clone, Debug, PartialEq)]
pub struct ObsFrame {
    pub height: usize,
    pub width: usize,
    pub rgb: Vec<f32>,
    pub depth: Vec<f32>,
    pub normals: Vec<f32>,
    pub collided: bool,
}

impl ObsFrame {
    /// `rgb` as planar `[3, H, W]`.
    pub fn rgb_chw(&self) -> Vec<f32> {
        to_planar(&self.rgb, self.height * self.width)
    }

    pub fn normals_chw(&self) -> Vec<f32> {
        to_planar(&self.normals, self.height * self.width)
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let bytes: Vec<u8> = self.rgb.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
        image::save_buffer(path, &bytes, self.width as u32, self.height as u32, image::ColorType::Rgb8)?;
        Ok(())
    }
}

fn to_planar(hwc: &[f32], n: usize) -> Vec<f32> {
    let mut out = vec![0.0; 3 * n];
    for p in 0..n {
        for c in 0..3 {
            out[c * n + p] = hwc[3 * p + c];
        }
    }
    out
}

fn hash01(a: i64, b: i64, c: i64) -> f32 {
    let mut z = (a as u64)
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add((b as u64).wrapping_mul(0xC2B2_AE3D_27D4_EB4F))
        .wrapping_add((c as u64).wrapping_mul(0x1656_67B1_9E37_79F9));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^= z >> 31;
    (z >> 40) as f32 / (1u64 << 24) as f32
}

enum Surface {
    Wall { tex: u8, x_face: bool, u: f64, z: f64, cell: (usize, usize) },
    Floor { x: f64, y: f64 },
    Ceiling { x: f64, y: f64 },
}

fn shade(world: &World, s: &Surface, depth: f64) -> [f32; 3] {
    let tex_color = |tex: u8| world.textures.get(tex as usize - 1).copied().unwrap_or([0.5, 0.5, 0.5]);
    match world.style {
        Style::A => match *s {
            Surface::Wall { tex, x_face, .. } => {
                let k = if x_face { 1.0 } else { 0.8 };
                tex_color(tex).map(|c| c * k)
            }
            Surface::Floor { .. } => [0.45, 0.42, 0.40],
            Surface::Ceiling { .. } => [0.82, 0.82, 0.86],
        },
        Style::B => {
            let base = match *s {
                Surface::Wall { tex, x_face, u, z, cell } => {
                    let [r, g, b] = tex_color(tex);
                    let grain = hash01(cell.0 as i64 * 8 + (u * 8.0) as i64, cell.1 as i64, (z * 6.0) as i64);
                    let k = if x_face { 0.95 } else { 0.75 };
                    [b, 1.0 - r, 0.5 * (g + r)].map(|c| (c * k + 0.25 * (grain - 0.5)).clamp(0.0, 1.0))
                }
                Surface::Floor { x, y } => {
                    let checker = ((x * 2.0).floor() as i64 + (y * 2.0).floor() as i64).rem_euclid(2) as f32;
                    let grain = hash01((x * 16.0).floor() as i64, (y * 16.0).floor() as i64, 7);
                    [0.20 + 0.25 * checker + 0.1 * grain, 0.30 + 0.1 * grain, 0.18 + 0.15 * checker]
                }
                Surface::Ceiling { x, y } => {
                    let grain = hash01((x * 4.0).floor() as i64, (y * 4.0).floor() as i64, 13);
                    [0.25 + 0.1 * grain, 0.18, 0.30 + 0.1 * grain]
                }
            };
            let fog = (-depth / 6.0).exp() as f32;
            base.map(|c| (c * fog + 0.08 * (1.0 - fog)).clamp(0.0, 1.0))
        }
    }
}

pub fn render(world: &World, pose: &Pose, cfg: &RenderConfig) -> Result<ObsFrame> {
    if !world.is_free(pose.pos()) {
        return Err(Error::NotFree { x: pose.x, y: pose.y });
    }
    let (h, w) = (cfg.height, cfg.width);
    let f = cfg.focal();
    let (fx, fy) = pose.forward();
    let (rx, ry) = (fy, -fx);
    let mut frame = ObsFrame {
        height: h,
        width: w,
        rgb: vec![0.0; h * w * 3],
        depth: vec![0.0; h * w],
        normals: vec![0.0; h * w * 3],
        collided: false,
    };
    for col in 0..w {
        let u = (col as f64 + 0.5 - 0.5 * w as f64) / f;
        let (dx, dy) = (fx + u * rx, fy + u * ry);
        let hit = world
            .cast_ray(pose.pos(), (dx, dy))
            .ok_or(Error::NotFree { x: pose.x, y: pose.y })?;
        let (nx, ny) = hit.normal;
        let wall_normal = {
            let (a, b) = (nx * rx + ny * ry, nx * fx + ny * fy);
            let n = a.hypot(b);
            [(a / n) as f32, (b / n) as f32, 0.0]
        };
        let tex = world.cell(hit.cell.0, hit.cell.1);
        for row in 0..h {
            let v = (0.5 * h as f64 - row as f64 - 0.5) / f;
            let z = cfg.camera_height + v * hit.t;
            let (depth, normal, surface) = if (0.0..=cfg.wall_height).contains(&z) {
                let s = Surface::Wall { tex, x_face: nx != 0.0, u: hit.u, z, cell: hit.cell };
                (hit.t, wall_normal, s)
            } else if v < 0.0 {
                let t = cfg.camera_height / -v;
                (t, [0.0, 0.0, 1.0], Surface::Floor { x: pose.x + t * dx, y: pose.y + t * dy })
            } else {
                let t = (cfg.wall_height - cfg.camera_height) / v;
                (t, [0.0, 0.0, -1.0], Surface::Ceiling { x: pose.x + t * dx, y: pose.y + t * dy })
            };
            let p = row * w + col;
            frame.depth[p] = depth as f32;
            frame.normals[3 * p..3 * p + 3].copy_from_slice(&normal);
            frame.rgb[3 * p..3 * p + 3].copy_from_slice(&shade(world, &surface, depth));
        }
    }
    Ok(frame)
}

/// Moves or rotates the agent. Forward motion stops `CONTACT_MARGIN` short of
/// the first wall and reports a collision; there is no sliding.
pub fn apply_action(world: &World, pose: &Pose, action: Action) -> (Pose, bool) {
    match action {
        Action::TurnLeft => (Pose { heading_deg: (pose.heading_deg + TURN_DEG).rem_euclid(360.0), ..*pose }, false),
        Action::TurnRight => (Pose { heading_deg: (pose.heading_deg - TURN_DEG).rem_euclid(360.0), ..*pose }, false),
        Action::Forward => {
            let (fx, fy) = pose.forward();
            let free_run = world.cast_ray(pose.pos(), (fx, fy)).map_or(0.0, |h| h.t - CONTACT_MARGIN);
            let (dist, collided) = if free_run >= FORWARD_STEP {
                (FORWARD_STEP, false)
            } else {
                (free_run.max(0.0), true)
            };
            let next = Pose { x: pose.x + dist * fx, y: pose.y + dist * fy, ..*pose };
            if world.is_free(next.pos()) {
                (next, collided)
            } else {
                (*pose, true)
            }
        }
    }
}

/// Writes `frame_NNNNN.png` per record plus `trajectory.jsonl`.
pub fn export_replay(dir: &Path, world: &World, records: &[StepRecord], cfg: &RenderConfig) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    for (k, rec) in records.iter().enumerate() {
        render(world, &rec.pose, cfg)?.save_png(&dir.join(format!("frame_{k:05}.png")))?;
    }
    crate::env::write_trajectory(&dir.join("trajectory.jsonl"), records)
}
