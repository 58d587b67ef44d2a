//! Independent reference implementations used as test oracles.

use petgraph::algo::dijkstra;
use petgraph::graph::{NodeIndex, UnGraph};
use splitnav::world::{GeodesicField, World};

/// Worst absolute gap between the field from each sampled source cell center
/// and a petgraph Dijkstra over the same 8-connected graph, over all cells.
pub fn geodesic_vs_petgraph(world: &World, sources: &[(usize, usize)]) -> f64 {
    let n = world.size;
    let cs = world.cell_size;
    let mut g = UnGraph::<(), f64>::new_undirected();
    let nodes: Vec<NodeIndex> = (0..n * n).map(|_| g.add_node(())).collect();
    let free = |i: i64, j: i64| i >= 0 && j >= 0 && i < n as i64 && j < n as i64 && world.cell(i as usize, j as usize) == 0;
    for j in 0..n as i64 {
        for i in 0..n as i64 {
            if !free(i, j) {
                continue;
            }
            // forward half-neighbourhood so every edge is added once
            for (di, dj) in [(1, 0), (0, 1), (1, 1), (-1, 1)] {
                let (a, b) = (i + di, j + dj);
                if !free(a, b) {
                    continue;
                }
                let diagonal = di != 0 && dj != 0;
                if diagonal && !(free(i + di, j) && free(i, j + dj)) {
                    continue;
                }
                let w = if diagonal { 2f64.sqrt() * cs } else { cs };
                g.add_edge(nodes[(j * n as i64 + i) as usize], nodes[(b * n as i64 + a) as usize], w);
            }
        }
    }
    let mut worst: f64 = 0.0;
    for &(si, sj) in sources {
        let field = GeodesicField::new(world, world.cell_center(si, sj)).unwrap();
        let truth = dijkstra(&g, nodes[sj * n + si], None, |e| *e.weight());
        for j in 0..n {
            for i in 0..n {
                if world.cell(i, j) != 0 {
                    continue;
                }
                let expected = truth.get(&nodes[j * n + i]).copied().unwrap_or(f64::INFINITY);
                let got = field.at_cell(i, j);
                let gap = if expected.is_infinite() || got.is_infinite() {
                    if expected == got { 0.0 } else { f64::INFINITY }
                } else {
                    (expected - got).abs()
                };
                worst = worst.max(gap);
            }
        }
    }
    worst
}

/// Direct summation of discounted TD residuals, truncated at episode ends.
pub fn brute_gae(r: &[f64], v: &[f64], d: &[bool], last: f64, gamma: f64, lambda: f64) -> Vec<f64> {
    let n = r.len();
    let value_at = |k: usize| if k + 1 < n { v[k + 1] } else { last };
    (0..n)
        .map(|t| {
            let mut acc = 0.0;
            for k in t..n {
                let next = if d[k] { 0.0 } else { value_at(k) };
                let delta = r[k] + gamma * next - v[k];
                acc += (gamma * lambda).powi((k - t) as i32) * delta;
                if d[k] {
                    break;
                }
            }
            acc
        })
        .collect()
}
