//! Procedural occupancy-grid worlds, grid geodesics and episode datasets.
//!
//! World coordinates are meters with `x` along grid columns and `y` along grid
//! rows. Cell `(i, j)` covers `[i*cs, (i+1)*cs) x [j*cs, (j+1)*cs)`. Headings
//! are degrees counter-clockwise from `+x`.

use std::cmp::Ordering;
use std::collections::{BinaryHeap, VecDeque};
use std::fmt::Write as _;
use std::io::{BufRead, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_CELL_SIZE: f64 = 0.25;
const SQRT2: f64 = std::f64::consts::SQRT_2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Style {
    A,
    B,
}

impl std::str::FromStr for Style {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "A" | "a" => Ok(Style::A),
            "B" | "b" => Ok(Style::B),
            _ => Err(Error::Invalid(format!("unknown style {s:?}"))),
        }
    }
}

impl std::fmt::Display for Style {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Style::A => "A",
            Style::B => "B",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn dist(self, o: Point) -> f64 {
        (self.x - o.x).hypot(self.y - o.y)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub x: f64,
    pub y: f64,
    pub heading_deg: f64,
}

impl Pose {
    pub fn new(x: f64, y: f64, heading_deg: f64) -> Self {
        Self { x, y, heading_deg }
    }

    pub fn pos(&self) -> Point {
        Point::new(self.x, self.y)
    }

    /// Unit forward vector.
    pub fn forward(&self) -> (f64, f64) {
        let h = self.heading_deg.to_radians();
        (h.cos(), h.sin())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    #[serde(rename = "pointnav")]
    PointNav,
    Explore,
    Flee,
}

impl Task {
    pub fn default_max_steps(self) -> u32 {
        match self {
            Task::PointNav => 500,
            Task::Explore | Task::Flee => 250,
        }
    }
}

impl std::str::FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pointnav" => Ok(Task::PointNav),
            "explore" | "exploration" => Ok(Task::Explore),
            "flee" => Ok(Task::Flee),
            _ => Err(Error::Invalid(format!("unknown task {s:?}"))),
        }
    }
}

impl std::fmt::Display for Task {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Task::PointNav => "pointnav",
            Task::Explore => "explore",
            Task::Flee => "flee",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorldGenConfig {
    pub cell_size: f64,
    /// Smallest side of a room produced by division, meters.
    pub min_room: f64,
    pub door_min: f64,
    pub door_max: f64,
    /// Regions with both sides below this many meters may stay undivided.
    pub open_room: f64,
    pub max_pillars: usize,
    pub n_textures: usize,
}

impl Default for WorldGenConfig {
    fn default() -> Self {
        Self {
            cell_size: DEFAULT_CELL_SIZE,
            min_room: 2.0,
            door_min: 1.0,
            door_max: 1.25,
            open_room: 5.0,
            max_pillars: 4,
            n_textures: 8,
        }
    }
}

/// Square occupancy grid. `cells[j * size + i]` is 0 for free space and a
/// texture id otherwise.
#[derive(Clone, Debug, PartialEq)]
pub struct World {
    pub id: usize,
    pub seed: u64,
    pub extent: f64,
    pub cell_size: f64,
    pub style: Style,
    pub size: usize,
    pub cells: Vec<u8>,
    /// Base rgb of texture id `k` at index `k - 1`.
    pub textures: Vec<[f32; 3]>,
}

/// First wall crossing of a ray `o + t * d`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RayHit {
    /// Ray parameter at the hit, in units of `|d|` meters.
    pub t: f64,
    pub cell: (usize, usize),
    /// Outward normal of the struck face.
    pub normal: (f64, f64),
    /// Position along the struck face in `[0, 1)`.
    pub u: f64,
}

impl World {
    pub fn index(&self, i: usize, j: usize) -> usize {
        j * self.size + i
    }

    pub fn cell(&self, i: usize, j: usize) -> u8 {
        self.cells[self.index(i, j)]
    }

    pub fn is_free_cell(&self, i: i64, j: i64) -> bool {
        i >= 0
            && j >= 0
            && (i as usize) < self.size
            && (j as usize) < self.size
            && self.cells[j as usize * self.size + i as usize] == 0
    }

    pub fn cell_of(&self, p: Point) -> Option<(usize, usize)> {
        let i = (p.x / self.cell_size).floor();
        let j = (p.y / self.cell_size).floor();
        if !(i >= 0.0 && j >= 0.0 && (i as usize) < self.size && (j as usize) < self.size) {
            return None;
        }
        Some((i as usize, j as usize))
    }

    pub fn is_free(&self, p: Point) -> bool {
        p.x.is_finite() && p.y.is_finite() && self.cell_of(p).is_some_and(|(i, j)| self.cell(i, j) == 0)
    }

    pub fn cell_center(&self, i: usize, j: usize) -> Point {
        Point::new((i as f64 + 0.5) * self.cell_size, (j as f64 + 0.5) * self.cell_size)
    }

    pub fn free_cells(&self) -> Vec<(usize, usize)> {
        (0..self.size)
            .flat_map(|j| (0..self.size).map(move |i| (i, j)))
            .filter(|&(i, j)| self.cell(i, j) == 0)
            .collect()
    }

    /// Legal grid moves out of a free cell with their costs. Diagonal moves
    /// need both orthogonal neighbours free.
    pub fn moves(&self, i: usize, j: usize) -> impl Iterator<Item = ((usize, usize), f64)> + '_ {
        let cs = self.cell_size;
        let (i, j) = (i as i64, j as i64);
        [(-1, -1), (0, -1), (1, -1), (-1, 0), (1, 0), (-1, 1), (0, 1), (1, 1)]
            .into_iter()
            .filter(move |&(di, dj)| {
                self.is_free_cell(i + di, j + dj)
                    && (di == 0 || dj == 0 || (self.is_free_cell(i + di, j) && self.is_free_cell(i, j + dj)))
            })
            .map(move |(di, dj)| {
                let cost = if di != 0 && dj != 0 { SQRT2 * cs } else { cs };
                (((i + di) as usize, (j + dj) as usize), cost)
            })
    }

    /// Grid DDA. Returns `None` when the origin lies outside the grid.
    pub fn cast_ray(&self, o: Point, d: (f64, f64)) -> Option<RayHit> {
        let cs = self.cell_size;
        let (px, py) = (o.x / cs, o.y / cs);
        let (mut mi, mut mj) = (px.floor() as i64, py.floor() as i64);
        let n = self.size as i64;
        if !(0..n).contains(&mi) || !(0..n).contains(&mj) {
            return None;
        }
        let (dx, dy) = d;
        let step_i: i64 = if dx < 0.0 { -1 } else { 1 };
        let step_j: i64 = if dy < 0.0 { -1 } else { 1 };
        let delta_x = if dx == 0.0 { f64::INFINITY } else { (1.0 / dx).abs() };
        let delta_y = if dy == 0.0 { f64::INFINITY } else { (1.0 / dy).abs() };
        let mut side_x = if dx < 0.0 { (px - mi as f64) * delta_x } else { (mi as f64 + 1.0 - px) * delta_x };
        let mut side_y = if dy < 0.0 { (py - mj as f64) * delta_y } else { (mj as f64 + 1.0 - py) * delta_y };
        for _ in 0..(4 * self.size + 4) {
            let crossed_x = side_x <= side_y;
            let t = if crossed_x {
                let t = side_x;
                side_x += delta_x;
                mi += step_i;
                t
            } else {
                let t = side_y;
                side_y += delta_y;
                mj += step_j;
                t
            };
            if !(0..n).contains(&mi) || !(0..n).contains(&mj) {
                return None;
            }
            if self.cells[(mj * n + mi) as usize] != 0 {
                let (normal, along) = if crossed_x {
                    ((-step_i as f64, 0.0), py + t * dy)
                } else {
                    ((0.0, -step_j as f64), px + t * dx)
                };
                return Some(RayHit {
                    t: t * cs,
                    cell: (mi as usize, mj as usize),
                    normal,
                    u: along - along.floor(),
                });
            }
        }
        None
    }

    /// Cells that `p` can reach in one grid move, including its own cell.
    fn anchors(&self, p: Point) -> Result<Vec<(usize, usize)>> {
        let (i, j) = self.free_cell_of(p)?;
        let mut out = vec![(i, j)];
        out.extend(self.moves(i, j).map(|(c, _)| c));
        Ok(out)
    }

    fn free_cell_of(&self, p: Point) -> Result<(usize, usize)> {
        match self.cell_of(p) {
            Some((i, j)) if p.x.is_finite() && p.y.is_finite() && self.cell(i, j) == 0 => Ok((i, j)),
            _ => Err(Error::NotFree { x: p.x, y: p.y }),
        }
    }

    fn is_near(&self, a: (usize, usize), b: (usize, usize)) -> bool {
        a == b || self.moves(a.0, a.1).any(|(c, _)| c == b)
    }
}

#[derive(Clone, Copy, PartialEq)]
struct Frontier {
    dist: f64,
    idx: usize,
}

impl Eq for Frontier {}

impl Ord for Frontier {
    fn cmp(&self, o: &Self) -> Ordering {
        o.dist.total_cmp(&self.dist).then_with(|| o.idx.cmp(&self.idx))
    }
}

impl PartialOrd for Frontier {
    fn partial_cmp(&self, o: &Self) -> Option<Ordering> {
        Some(self.cmp(o))
    }
}

/// Shortest-path distances from a continuous source point to every cell
/// center. Unreachable and wall cells hold `INFINITY`.
#[derive(Clone, Debug)]
pub struct GeodesicField {
    pub source: Point,
    source_cell: (usize, usize),
    size: usize,
    dist: Vec<f64>,
}

impl GeodesicField {
    pub fn new(world: &World, source: Point) -> Result<Self> {
        let anchors = world.anchors(source)?;
        let mut dist = vec![f64::INFINITY; world.cells.len()];
        let mut heap = BinaryHeap::new();
        for (i, j) in anchors {
            let idx = world.index(i, j);
            let d = source.dist(world.cell_center(i, j));
            if d < dist[idx] {
                dist[idx] = d;
                heap.push(Frontier { dist: d, idx });
            }
        }
        while let Some(Frontier { dist: d, idx }) = heap.pop() {
            if d > dist[idx] {
                continue;
            }
            let (i, j) = (idx % world.size, idx / world.size);
            for ((ni, nj), cost) in world.moves(i, j) {
                let nidx = world.index(ni, nj);
                let nd = d + cost;
                if nd < dist[nidx] {
                    dist[nidx] = nd;
                    heap.push(Frontier { dist: nd, idx: nidx });
                }
            }
        }
        Ok(Self { source, source_cell: world.free_cell_of(source)?, size: world.size, dist })
    }

    pub fn at_cell(&self, i: usize, j: usize) -> f64 {
        self.dist[j * self.size + i]
    }

    /// Geodesic distance from `p` to the source. Points within one grid move
    /// of each other are joined by a straight segment.
    pub fn distance(&self, world: &World, p: Point) -> Result<f64> {
        let c = world.free_cell_of(p)?;
        if world.is_near(c, self.source_cell) {
            return Ok(p.dist(self.source));
        }
        let mut best = f64::INFINITY;
        for (i, j) in world.anchors(p)? {
            best = best.min(p.dist(world.cell_center(i, j)) + self.at_cell(i, j));
        }
        Ok(best)
    }
}

/// Distance-to-source lookup for continuous points.
pub trait DistanceField {
    fn distance(&self, world: &World, p: Point) -> Result<f64>;
}

impl DistanceField for GeodesicField {
    fn distance(&self, world: &World, p: Point) -> Result<f64> {
        GeodesicField::distance(self, world, p)
    }
}

/// Wall clearance kept by any-angle shortcuts, in meters.
pub const SHORTCUT_CLEARANCE: f64 = 0.1;
const SEGMENT_SAMPLE: f64 = 0.05;

/// Grid Dijkstra where each relaxation may replace the last grid hop with a
/// straight segment from the predecessor's anchor point, as long as that
/// segment keeps `SHORTCUT_CLEARANCE` from walls. Distances are close to
/// continuous shortest paths and have no preferred headings.
#[derive(Clone, Debug)]
pub struct AnyAngleField {
    pub source: Point,
    size: usize,
    dist: Vec<f64>,
    /// Anchor point each cell's straight final segment starts from, with its distance.
    anchor: Vec<(Point, f64)>,
}

impl World {
    fn box_clear(&self, p: Point, r: f64) -> bool {
        let cs = self.cell_size;
        let (i0, i1) = (((p.x - r) / cs).floor() as i64, ((p.x + r) / cs).floor() as i64);
        let (j0, j1) = (((p.y - r) / cs).floor() as i64, ((p.y + r) / cs).floor() as i64);
        (j0..=j1).all(|j| (i0..=i1).all(|i| self.is_free_cell(i, j)))
    }

    /// Whether every point of segment `a`-`b`, sampled every 5 cm, has a free
    /// square of half-width `r` around it.
    pub fn segment_clear(&self, a: Point, b: Point, r: f64) -> bool {
        let n = (a.dist(b) / SEGMENT_SAMPLE).ceil().max(1.0) as usize;
        (0..=n).all(|k| {
            let t = k as f64 / n as f64;
            self.box_clear(Point::new(a.x + t * (b.x - a.x), a.y + t * (b.y - a.y)), r)
        })
    }
}

impl AnyAngleField {
    pub fn new(world: &World, source: Point) -> Result<Self> {
        let (si, sj) = world.free_cell_of(source)?;
        let n = world.cells.len();
        let mut dist = vec![f64::INFINITY; n];
        let mut anchor = vec![(source, 0.0); n];
        let mut heap = BinaryHeap::new();
        let s = world.index(si, sj);
        dist[s] = source.dist(world.cell_center(si, sj));
        heap.push(Frontier { dist: dist[s], idx: s });
        while let Some(Frontier { dist: d, idx }) = heap.pop() {
            if d > dist[idx] {
                continue;
            }
            let (i, j) = (idx % world.size, idx / world.size);
            let here = world.cell_center(i, j);
            let (ap, ad) = anchor[idx];
            for ((ni, nj), cost) in world.moves(i, j) {
                let nidx = world.index(ni, nj);
                let c = world.cell_center(ni, nj);
                let (nd, na) = if world.segment_clear(ap, c, SHORTCUT_CLEARANCE) {
                    (ad + ap.dist(c), (ap, ad))
                } else {
                    (d + cost, (here, d))
                };
                if nd < dist[nidx] - 1e-12 {
                    dist[nidx] = nd;
                    anchor[nidx] = na;
                    heap.push(Frontier { dist: nd, idx: nidx });
                }
            }
        }
        Ok(Self { source, size: world.size, dist, anchor })
    }

    pub fn at_cell(&self, i: usize, j: usize) -> f64 {
        self.dist[j * self.size + i]
    }
}

impl DistanceField for AnyAngleField {
    /// Best straight segment from `p` to a nearby cell center or its anchor.
    fn distance(&self, world: &World, p: Point) -> Result<f64> {
        if world.segment_clear(p, self.source, 0.0) && p.dist(self.source) <= world.cell_size * 2.0 {
            return Ok(p.dist(self.source));
        }
        let mut best = f64::INFINITY;
        for (i, j) in world.anchors(p)? {
            let idx = world.index(i, j);
            let c = world.cell_center(i, j);
            let (ap, ad) = self.anchor[idx];
            if self.dist[idx].is_finite() && world.segment_clear(p, ap, 0.0) {
                best = best.min(ad + p.dist(ap));
            } else if world.segment_clear(p, c, 0.0) {
                best = best.min(self.dist[idx] + p.dist(c));
            }
        }
        Ok(best)
    }
}

pub fn geodesic(world: &World, from: Point, to: Point) -> Result<f64> {
    GeodesicField::new(world, to)?.distance(world, from)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FilterConfig {
    pub min_ratio: f64,
    pub min_dist: f64,
    pub max_dist: f64,
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self { min_ratio: 1.1, min_dist: 1.0, max_dist: 15.0 }
    }
}

/// Keep rule on precomputed distances.
pub fn keep_episode(geo: f64, euclid: f64, cfg: &FilterConfig) -> bool {
    geo.is_finite() && euclid > 0.0 && geo / euclid >= cfg.min_ratio && geo >= cfg.min_dist && geo <= cfg.max_dist
}

pub fn filter_episode(world: &World, start: Point, goal: Point, cfg: &FilterConfig) -> Result<bool> {
    let geo = geodesic(world, start, goal)?;
    Ok(keep_episode(geo, start.dist(goal), cfg))
}

pub fn generate_world(seed: u64, extent: f64, style: Style) -> Result<World> {
    generate_world_with(&WorldGenConfig::default(), seed, extent, style)
}

pub fn generate_world_with(cfg: &WorldGenConfig, seed: u64, extent: f64, style: Style) -> Result<World> {
    if !(extent >= 5.0) || !(cfg.cell_size > 0.0) || cfg.n_textures == 0 || cfg.n_textures > 255 {
        return Err(Error::Invalid(format!("world extent {extent} m / cell size {} m", cfg.cell_size)));
    }
    let size = (extent / cfg.cell_size).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let textures = (0..cfg.n_textures)
        .map(|_| [rng.random_range(0.15..0.95f32), rng.random_range(0.15..0.95f32), rng.random_range(0.15..0.95f32)])
        .collect();
    let cells_per = |m: f64| ((m / cfg.cell_size).round() as usize).max(1);
    let gen = Division {
        size,
        min_side: cells_per(cfg.min_room),
        open_side: cells_per(cfg.open_room),
        door: (cells_per(cfg.door_min), cells_per(cfg.door_max).max(cells_per(cfg.door_min))),
        n_textures: cfg.n_textures as u8,
    };
    loop {
        let mut cells = vec![0u8; size * size];
        let tex = [0, 1, 2, 3].map(|_| rng.random_range(1..=gen.n_textures));
        for k in 0..size {
            cells[k] = tex[0];
            cells[(size - 1) * size + k] = tex[1];
            cells[k * size] = tex[2];
            cells[k * size + size - 1] = tex[3];
        }
        gen.divide(&mut cells, &mut rng, (1, 1, size - 1, size - 1));
        if !connected(&cells, size) {
            continue;
        }
        let pillars = rng.random_range(0..=cfg.max_pillars);
        for _ in 0..pillars {
            let side = rng.random_range(1..=2usize);
            let i = rng.random_range(2..size - 2 - side);
            let j = rng.random_range(2..size - 2 - side);
            let tex = rng.random_range(1..=gen.n_textures);
            let block: Vec<usize> = (0..side)
                .flat_map(|dj| (0..side).map(move |di| (j + dj) * size + i + di))
                .filter(|&k| cells[k] == 0)
                .collect();
            for &k in &block {
                cells[k] = tex;
            }
            if !connected(&cells, size) {
                for &k in &block {
                    cells[k] = 0;
                }
            }
        }
        return Ok(World { id: 0, seed, extent, cell_size: cfg.cell_size, style, size, cells, textures });
    }
}

struct Division {
    size: usize,
    min_side: usize,
    open_side: usize,
    door: (usize, usize),
    n_textures: u8,
}

impl Division {
    /// Splits the free region `[x0, x1) x [y0, y1)` by a wall with one door.
    fn divide(&self, cells: &mut [u8], rng: &mut ChaCha8Rng, (x0, y0, x1, y1): (usize, usize, usize, usize)) {
        let (w, h) = (x1 - x0, y1 - y0);
        let can_v = w > 2 * self.min_side;
        let can_h = h > 2 * self.min_side;
        if !can_v && !can_h {
            return;
        }
        if w < self.open_side && h < self.open_side && rng.random_bool(0.35) {
            return;
        }
        let vertical = match (can_v, can_h) {
            (true, false) => true,
            (false, true) => false,
            _ if w != h => w > h,
            _ => rng.random_bool(0.5),
        };
        let tex = rng.random_range(1..=self.n_textures);
        let n = self.size;
        if vertical {
            let wx = rng.random_range(x0 + self.min_side..x1 - self.min_side);
            let dw = rng.random_range(self.door.0..=self.door.1).min(h);
            let dy = rng.random_range(y0..=y1 - dw);
            for y in y0..y1 {
                if !(dy..dy + dw).contains(&y) {
                    cells[y * n + wx] = tex;
                }
            }
            self.divide(cells, rng, (x0, y0, wx, y1));
            self.divide(cells, rng, (wx + 1, y0, x1, y1));
        } else {
            let wy = rng.random_range(y0 + self.min_side..y1 - self.min_side);
            let dw = rng.random_range(self.door.0..=self.door.1).min(w);
            let dx = rng.random_range(x0..=x1 - dw);
            for x in x0..x1 {
                if !(dx..dx + dw).contains(&x) {
                    cells[wy * n + x] = tex;
                }
            }
            self.divide(cells, rng, (x0, y0, x1, wy));
            self.divide(cells, rng, (x0, wy + 1, x1, y1));
        }
    }
}

/// Whether all free cells form one 4-connected component. Grid moves without
/// corner cutting have exactly the 4-connected components.
pub fn connected(cells: &[u8], size: usize) -> bool {
    let Some(start) = cells.iter().position(|&c| c == 0) else {
        return false;
    };
    let mut seen = vec![false; cells.len()];
    seen[start] = true;
    let mut queue = VecDeque::from([start]);
    let mut count = 1;
    while let Some(k) = queue.pop_front() {
        let (i, j) = (k % size, k / size);
        let mut visit = |nk: usize| {
            if cells[nk] == 0 && !seen[nk] {
                seen[nk] = true;
                count += 1;
                queue.push_back(nk);
            }
        };
        if i > 0 {
            visit(k - 1);
        }
        if i + 1 < size {
            visit(k + 1);
        }
        if j > 0 {
            visit(k - size);
        }
        if j + 1 < size {
            visit(k + size);
        }
    }
    count == cells.iter().filter(|&&c| c == 0).count()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Episode {
    pub id: usize,
    pub world_id: usize,
    pub task: Task,
    pub start: Pose,
    /// Absent for explore and flee.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub goal: Option<Point>,
    pub max_steps: u32,
}

/// Uniform free point inside a random free cell, away from cell edges.
pub fn random_free_point(world: &World, free: &[(usize, usize)], rng: &mut impl Rng) -> Point {
    let (i, j) = free[rng.random_range(0..free.len())];
    let c = world.cell_center(i, j);
    let r = 0.3 * world.cell_size;
    Point::new(c.x + rng.random_range(-r..r), c.y + rng.random_range(-r..r))
}

/// Samples `n` episodes spread round-robin over `worlds`. Pointnav episodes
/// pass [`filter_episode`]; other tasks only need a free start.
pub fn sample_episodes(worlds: &[World], task: Task, n: usize, seed: u64, cfg: &FilterConfig) -> Result<Vec<Episode>> {
    if n == 0 || worlds.is_empty() {
        return Err(Error::Invalid("episode sampling needs n >= 1 and at least one world".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let free: Vec<Vec<(usize, usize)>> = worlds.iter().map(World::free_cells).collect();
    let max_attempts = 2000 * n;
    let mut attempts = 0;
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let w = out.len() % worlds.len();
        let world = &worlds[w];
        attempts += 1;
        if attempts > max_attempts {
            return Err(Error::SamplingExhausted { attempts: max_attempts, kept: out.len(), wanted: n });
        }
        let start = random_free_point(world, &free[w], &mut rng);
        let heading = 10.0 * rng.random_range(0..36) as f64;
        let goal = if task == Task::PointNav {
            let goal = random_free_point(world, &free[w], &mut rng);
            if start.dist(goal) > cfg.max_dist || !filter_episode(world, start, goal, cfg)? {
                continue;
            }
            Some(goal)
        } else {
            None
        };
        out.push(Episode {
            id: out.len(),
            world_id: world.id,
            task,
            start: Pose::new(start.x, start.y, heading),
            goal,
            max_steps: task.default_max_steps(),
        });
    }
    Ok(out)
}

pub fn write_episodes(path: &Path, episodes: &[Episode]) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    for e in episodes {
        serde_json::to_writer(&mut out, e)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_episodes(path: &Path) -> Result<Vec<Episode>> {
    let file = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for (k, line) in file.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Parse {
            what: "episode file",
            line: k + 1,
            msg: e.to_string(),
        })?);
    }
    Ok(out)
}

const WORLD_MAGIC: &str = "splitnav-world 1";

/// Text form: header lines, one run-length-encoded row per line as
/// `count:value` tokens, then the texture table.
pub fn world_to_string(w: &World) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "{WORLD_MAGIC}");
    let _ = writeln!(s, "id {}", w.id);
    let _ = writeln!(s, "seed {}", w.seed);
    let _ = writeln!(s, "extent {}", w.extent);
    let _ = writeln!(s, "cell_size {}", w.cell_size);
    let _ = writeln!(s, "style {}", w.style);
    let _ = writeln!(s, "size {}", w.size);
    for row in w.cells.chunks(w.size) {
        s.push_str("row");
        let mut k = 0;
        while k < row.len() {
            let run = row[k..].iter().take_while(|&&c| c == row[k]).count();
            let _ = write!(s, " {run}:{}", row[k]);
            k += run;
        }
        s.push('\n');
    }
    let _ = writeln!(s, "textures {}", w.textures.len());
    for (k, t) in w.textures.iter().enumerate() {
        let _ = writeln!(s, "texture {} {} {} {}", k + 1, t[0], t[1], t[2]);
    }
    s
}

pub fn world_from_str(text: &str) -> Result<World> {
    let err = |line: usize, msg: String| Error::Parse { what: "world file", line, msg };
    let mut lines = text.lines().enumerate().map(|(k, l)| (k + 1, l.trim()));
    match lines.next() {
        Some((_, WORLD_MAGIC)) => {}
        _ => return Err(err(1, "missing header".into())),
    }
    let mut field = |name: &str| -> Result<(usize, String)> {
        let (ln, line) = lines.next().ok_or_else(|| err(0, format!("missing {name}")))?;
        let rest = line
            .strip_prefix(name)
            .and_then(|r| r.strip_prefix(' '))
            .ok_or_else(|| err(ln, format!("expected {name}")))?;
        Ok((ln, rest.to_string()))
    };
    fn num<T: std::str::FromStr>(ln: usize, v: &str) -> Result<T> {
        v.parse().map_err(|_| Error::Parse { what: "world file", line: ln, msg: format!("bad number {v:?}") })
    }
    let (ln, v) = field("id")?;
    let id = num(ln, &v)?;
    let (ln, v) = field("seed")?;
    let seed = num(ln, &v)?;
    let (ln, v) = field("extent")?;
    let extent = num(ln, &v)?;
    let (ln, v) = field("cell_size")?;
    let cell_size: f64 = num(ln, &v)?;
    let (_, v) = field("style")?;
    let style = v.parse()?;
    let (ln, v) = field("size")?;
    let size: usize = num(ln, &v)?;
    if !(cell_size > 0.0) || size < 3 {
        return Err(err(ln, "degenerate grid".into()));
    }
    let mut cells = Vec::with_capacity(size * size);
    for _ in 0..size {
        let (ln, v) = field("row")?;
        let before = cells.len();
        for tok in v.split_whitespace() {
            let (run, val) = tok.split_once(':').ok_or_else(|| err(ln, format!("bad run {tok:?}")))?;
            let run: usize = num(ln, run)?;
            let val: u8 = num(ln, val)?;
            cells.extend(std::iter::repeat_n(val, run));
        }
        if cells.len() - before != size {
            return Err(err(ln, format!("row has {} cells, expected {size}", cells.len() - before)));
        }
    }
    let (ln, v) = field("textures")?;
    let n: usize = num(ln, &v)?;
    let mut textures = Vec::with_capacity(n);
    for k in 0..n {
        let (ln, v) = field("texture")?;
        let parts: Vec<&str> = v.split_whitespace().collect();
        if parts.len() != 4 || num::<usize>(ln, parts[0])? != k + 1 {
            return Err(err(ln, "bad texture entry".into()));
        }
        textures.push([num(ln, parts[1])?, num(ln, parts[2])?, num(ln, parts[3])?]);
    }
    if let Some(&bad) = cells.iter().find(|&&c| c as usize > n) {
        return Err(err(0, format!("cell refers to texture {bad} of {n}")));
    }
    Ok(World { id, seed, extent, cell_size, style, size, cells, textures })
}

pub fn save_world(path: &Path, w: &World) -> Result<()> {
    std::fs::write(path, world_to_string(w))?;
    Ok(())
}

pub fn load_world(path: &Path) -> Result<World> {
    world_from_str(&std::fs::read_to_string(path)?)
}

/// Loads every `*.world` file in `dir`, sorted by world id.
pub fn load_world_dir(dir: &Path) -> Result<Vec<World>> {
    let mut worlds = Vec::new();
    for entry in std::fs::read_dir(dir)? {
        let path = entry?.path();
        if path.extension().is_some_and(|e| e == "world") {
            worlds.push(load_world(&path)?);
        }
    }
    worlds.sort_by_key(|w| w.id);
    Ok(worlds)
}

/// Worlds with ids `first_id..first_id + n`, seeded from `seed`.
pub fn generate_worlds(cfg: &WorldGenConfig, seed: u64, first_id: usize, n: usize, extent: f64, style: Style) -> Result<Vec<World>> {
    (0..n)
        .map(|k| {
            let id = first_id + k;
            let mut w = generate_world_with(cfg, seed.wrapping_mul(1_000_003).wrapping_add(id as u64), extent, style)?;
            w.id = id;
            Ok(w)
        })
        .collect()
}

/// Open rectangle of free cells `w x h` (meters, interior) inside a closed
/// border. Used for hand-built test layouts.
pub fn empty_world(interior_w: f64, interior_h: f64, cell_size: f64, style: Style) -> World {
    let iw = (interior_w / cell_size).round() as usize;
    let ih = (interior_h / cell_size).round() as usize;
    let size = iw.max(ih) + 2;
    let mut cells = vec![1u8; size * size];
    for j in 1..=ih {
        for i in 1..=iw {
            cells[j * size + i] = 0;
        }
    }
    World {
        id: 0,
        seed: 0,
        extent: size as f64 * cell_size,
        cell_size,
        style,
        size,
        cells,
        textures: vec![[0.7, 0.4, 0.3], [0.3, 0.5, 0.7]],
    }
}

impl World {
    pub fn set_wall(&mut self, i: usize, j: usize, tex: u8) {
        let k = self.index(i, j);
        self.cells[k] = tex;
    }
}
