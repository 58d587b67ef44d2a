mod common;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use splitnav::world::*;

#[test]
fn field_equals_petgraph_dijkstra_on_random_worlds() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for seed in 0..10 {
        let w = generate_world(seed, 8.0 + seed as f64, Style::A).unwrap();
        let free = w.free_cells();
        let sources: Vec<_> = (0..3).map(|_| free[rng.random_range(0..free.len())]).collect();
        let gap = common::oracles::geodesic_vs_petgraph(&w, &sources);
        assert!(gap < 1e-9, "world {seed}: gap {gap}");
    }
}

#[test]
fn u_shaped_detour_matches_grid_oracle() {
    // wall from the top border down to y = 1 m, leaving a gap at the bottom
    let mut w = empty_world(4.0, 4.0, 0.25, Style::A);
    for j in 5..=16 {
        w.set_wall(8, j, 2);
    }
    let a = w.cell_center(4, 14);
    let b = w.cell_center(12, 14);
    let d = geodesic(&w, a, b).unwrap();
    assert!(d > a.dist(b) + 1.0);
    assert!(common::oracles::geodesic_vs_petgraph(&w, &[(4, 14), (12, 14)]) < 1e-9);
}

#[test]
fn geodesic_dominates_euclidean() {
    let w = generate_world(3, 12.0, Style::A).unwrap();
    let free = w.free_cells();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let src = random_free_point(&w, &free, &mut rng);
    let field = GeodesicField::new(&w, src).unwrap();
    for _ in 0..500 {
        let p = random_free_point(&w, &free, &mut rng);
        assert!(field.distance(&w, p).unwrap() >= p.dist(src) - 1e-12);
    }
}

#[test]
fn sampled_pointnav_episodes_pass_filter_when_rechecked() {
    let worlds = generate_worlds(&WorldGenConfig::default(), 9, 0, 4, 12.0, Style::A).unwrap();
    let cfg = FilterConfig::default();
    let eps = sample_episodes(&worlds, Task::PointNav, 100, 3, &cfg).unwrap();
    assert_eq!(eps.len(), 100);
    for e in &eps {
        let w = &worlds[e.world_id];
        let (s, g) = (e.start.pos(), e.goal.unwrap());
        let geo = geodesic(w, g, s).unwrap();
        let eu = s.dist(g);
        assert!(geo.is_finite() && geo / eu >= 1.1 && (1.0..=15.0).contains(&geo));
    }
}

#[test]
fn episode_file_round_trip() {
    let worlds = generate_worlds(&WorldGenConfig::default(), 4, 0, 2, 10.0, Style::B).unwrap();
    let eps = sample_episodes(&worlds, Task::PointNav, 10, 1, &FilterConfig::default()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("eps.jsonl");
    write_episodes(&path, &eps).unwrap();
    assert_eq!(read_episodes(&path).unwrap(), eps);
    save_world(&dir.path().join("a.world"), &worlds[1]).unwrap();
    save_world(&dir.path().join("b.world"), &worlds[0]).unwrap();
    assert_eq!(load_world_dir(dir.path()).unwrap(), worlds);
}

fn world_and_pairs() -> (World, Vec<Point>) {
    let w = generate_world(21, 10.0, Style::A).unwrap();
    let free = w.free_cells();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let pts = (0..64).map(|_| random_free_point(&w, &free, &mut rng)).collect();
    (w, pts)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn geodesic_is_symmetric(a in 0usize..64, b in 0usize..64) {
        thread_local! {
            static FIXTURE: (World, Vec<Point>) = world_and_pairs();
        }
        FIXTURE.with(|(w, pts)| {
            let ab = geodesic(w, pts[a], pts[b]).unwrap();
            let ba = geodesic(w, pts[b], pts[a]).unwrap();
            prop_assert!((ab - ba).abs() < 1e-6, "{ab} vs {ba}");
            Ok(())
        })?;
    }
}
