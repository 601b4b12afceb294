use pointfuse_core::geometry::{
    bounding_sphere_radius, dist2, farthest_point_order, fps_sample, idw_weights,
    inverse_distance_interpolate, project_points, splat_zbuffer, visibility_mask, Camera, KnnIndex,
    Normalization, Point, PointCloud,
};
use proptest::prelude::*;
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_points(rng: &mut impl Rng, n: usize) -> Vec<Point> {
    (0..n)
        .map(|_| [rng.random(), rng.random(), rng.random()])
        .collect()
}

fn cube_corners() -> Vec<Point> {
    let mut v = Vec::new();
    for x in [0.0, 1.0] {
        for y in [0.0, 1.0] {
            for z in [0.0, 1.0] {
                v.push([x, y, z]);
            }
        }
    }
    v
}

/// Sorted by (distance, index), the same order the index promises.
fn brute_knn(points: &[Point], q: &Point, k: usize) -> Vec<(u32, f64)> {
    let mut all: Vec<(u32, f64)> = points
        .iter()
        .enumerate()
        .map(|(i, p)| (i as u32, dist2(q, p).sqrt()))
        .collect();
    all.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
    all.truncate(k);
    all
}

#[test]
fn knn_at_existing_point_returns_it() {
    let pts = random_points(&mut ChaCha8Rng::seed_from_u64(1), 50);
    let nb = KnnIndex::build(&pts).unwrap().knn(&pts[17..18], 1).unwrap();
    assert_eq!(nb.indices, vec![17]);
    assert_eq!(nb.distances, vec![0.0]);
}

#[test]
fn knn_cube_center_finds_all_corners() {
    let nb = KnnIndex::build(&cube_corners())
        .unwrap()
        .knn(&[[0.5, 0.5, 0.5]], 8)
        .unwrap();
    let mut idx = nb.indices.clone();
    idx.sort();
    assert_eq!(idx, (0..8).collect::<Vec<u32>>());
    for d in nb.distances {
        assert!((d - 3f64.sqrt() / 2.0).abs() < 1e-7);
    }
}

#[test]
fn knn_matches_exhaustive_search_on_64_points() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let pts = random_points(&mut rng, 64);
    let queries = random_points(&mut rng, 40);
    let nb = KnnIndex::build(&pts).unwrap().knn(&queries, 4).unwrap();
    for (q, qp) in queries.iter().enumerate() {
        let (idx, d) = nb.row(q);
        let want = brute_knn(&pts, qp, 4);
        assert_eq!(idx, want.iter().map(|w| w.0).collect::<Vec<_>>().as_slice());
        assert_eq!(d, want.iter().map(|w| w.1).collect::<Vec<_>>().as_slice());
    }
}

#[test]
fn knn_rejects_bad_k() {
    let index = KnnIndex::build(&cube_corners()).unwrap();
    assert!(index.knn(&[[0.0; 3]], 0).is_err());
    assert!(index.knn(&[[0.0; 3]], 9).is_err());
}

#[test]
fn knn_breaks_ties_by_index() {
    let pts = vec![
        [1.0, 0.0, 0.0],
        [-1.0, 0.0, 0.0],
        [0.0, 1.0, 0.0],
        [0.0, 0.0, 5.0],
    ];
    let nb = KnnIndex::build(&pts).unwrap().knn(&[[0.0; 3]], 3).unwrap();
    assert_eq!(nb.indices, vec![0, 1, 2]);
}

#[test]
fn interpolation_at_a_source_point_is_exact() {
    let src = PointCloud::with_features(
        vec![[0.0; 3], [1.0, 0.0, 0.0], [0.0, 2.0, 0.0]],
        2,
        vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0],
    )
    .unwrap();
    let out = inverse_distance_interpolate(&src, &[[1.0, 0.0, 0.0]], 3).unwrap();
    assert_eq!(out, vec![3.0, 4.0]);
}

#[test]
fn interpolation_midpoint_averages() {
    let src =
        PointCloud::with_features(vec![[0.0; 3], [2.0, 0.0, 0.0]], 1, vec![3.0, 7.0]).unwrap();
    let out = inverse_distance_interpolate(&src, &[[1.0, 0.0, 0.0]], 2).unwrap();
    assert!((out[0] - 5.0).abs() < 1e-6);
}

#[test]
fn interpolation_hand_example() {
    // Weights 1/0.25² = 16 and 1/0.75² = 16/9.
    let src =
        PointCloud::with_features(vec![[0.0; 3], [1.0, 0.0, 0.0]], 1, vec![0.0, 1.0]).unwrap();
    let out = inverse_distance_interpolate(&src, &[[0.25, 0.0, 0.0]], 2).unwrap();
    let want = (16.0 / 9.0) / (16.0 + 16.0 / 9.0);
    assert!((out[0] as f64 - want).abs() < 1e-6);
    assert!((out[0] - 0.1).abs() < 1e-6);
}

#[test]
fn fps_on_a_line_picks_the_extremes() {
    let pts: Vec<Point> = (0..10).map(|i| [i as f32, 0.0, 0.0]).collect();
    assert_eq!(farthest_point_order(&pts, 2, 0).unwrap(), vec![0, 9]);
}

#[test]
fn fps_with_m_equal_n_returns_everything() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let cloud = PointCloud::new(random_points(&mut rng, 20)).unwrap();
    let mut idx = fps_sample(&cloud, 20, &mut rng).unwrap();
    idx.sort();
    assert_eq!(idx, (0..20).collect::<Vec<u32>>());
}

#[test]
fn fps_spreads_better_than_random_subsets() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let pts = random_points(&mut rng, 32);
    let min_pair = |idx: &[usize]| {
        let mut m = f64::INFINITY;
        for a in 0..idx.len() {
            for b in a + 1..idx.len() {
                m = m.min(dist2(&pts[idx[a]], &pts[idx[b]]));
            }
        }
        m
    };
    let cloud = PointCloud::new(pts.clone()).unwrap();
    let fps: Vec<usize> = fps_sample(&cloud, 4, &mut rng)
        .unwrap()
        .iter()
        .map(|&i| i as usize)
        .collect();
    let fps_spread = min_pair(&fps);
    let mut beaten = 0;
    for _ in 0..1000 {
        let subset = sample(&mut rng, 32, 4).into_vec();
        if min_pair(&subset) > fps_spread {
            beaten += 1;
        }
    }
    // Greedy FPS is only a 2-approximation, so allow a small tail.
    assert!(beaten <= 10, "{beaten} random subsets beat fps");
}

#[test]
fn fps_is_deterministic_for_a_seed() {
    let pts = random_points(&mut ChaCha8Rng::seed_from_u64(5), 100);
    let cloud = PointCloud::new(pts).unwrap();
    let a = fps_sample(&cloud, 10, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
    let b = fps_sample(&cloud, 10, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
    assert_eq!(a, b);
}

#[test]
fn bounding_radius_cases() {
    assert_eq!(
        bounding_sphere_radius(&PointCloud::new(vec![[3.0, 4.0, 5.0]]).unwrap()),
        0.0
    );
    let r = bounding_sphere_radius(&PointCloud::new(cube_corners()).unwrap());
    assert!((r - 0.8660254).abs() < 1e-6);

    let pts = random_points(&mut ChaCha8Rng::seed_from_u64(6), 100);
    let c: Vec<f64> = (0..3)
        .map(|a| pts.iter().map(|p| p[a] as f64).sum::<f64>() / 100.0)
        .collect();
    let brute = pts
        .iter()
        .map(|p| {
            (0..3)
                .map(|a| (p[a] as f64 - c[a]).powi(2))
                .sum::<f64>()
                .sqrt()
        })
        .fold(0.0, f64::max);
    assert!((bounding_sphere_radius(&PointCloud::new(pts).unwrap()) - brute).abs() < 1e-12);
}

#[test]
fn normalization_round_trips() {
    let cloud = PointCloud::new(random_points(&mut ChaCha8Rng::seed_from_u64(7), 30)).unwrap();
    let norm = Normalization::fit(&cloud);
    let unit = cloud.map_positions(|p| norm.apply(p)).unwrap();
    assert!((bounding_sphere_radius(&unit) - 1.0).abs() < 1e-5);
    for (p, q) in cloud.positions().iter().zip(unit.positions()) {
        let back = norm.invert(q);
        assert!(dist2(p, &back) < 1e-12);
    }
}

fn camera() -> Camera {
    Camera::new(100.0, 100.0, 64.0, 64.0, 128, 128).unwrap()
}

#[test]
fn projection_on_axis_hits_principal_point() {
    let p = camera().project(&[0.0, 0.0, 1.0]);
    assert_eq!((p.u, p.v, p.depth), (64.0, 64.0, 1.0));
    assert!(p.in_frustum);
}

#[test]
fn projection_hand_example() {
    let p = camera().project(&[0.1, 0.0, 1.0]);
    assert!((p.u - 74.0).abs() < 1e-5);
    assert!((p.v - 64.0).abs() < 1e-12);
}

#[test]
fn points_behind_camera_are_outside_the_frustum() {
    assert!(!camera().project(&[0.0, 0.0, -1.0]).in_frustum);
    let vis = visibility_mask(&camera(), &[[0.0, 0.0, -1.0]], 2.0, 0.01);
    assert_eq!(vis, vec![false]);
}

#[test]
fn look_at_puts_the_target_on_the_axis() {
    let cam = camera()
        .look_at([3.0, 1.0, -2.0], [0.5, 0.0, 0.5], [0.0, 1.0, 0.0])
        .unwrap();
    let p = cam.project(&[0.5, 0.0, 0.5]);
    assert!((p.u - 64.0).abs() < 1e-4 && (p.v - 64.0).abs() < 1e-4);
    let back = cam.to_world_frame(cam.to_camera_frame(&[0.2, -0.3, 0.9]));
    assert!(dist2(&back, &[0.2, -0.3, 0.9]) < 1e-10);
}

#[test]
fn camera_validation() {
    assert!(Camera::new(0.0, 1.0, 0.0, 0.0, 4, 4).is_err());
    assert!(Camera::new(1.0, 1.0, 4.0, 0.0, 4, 4).is_err());
    let mut cam = Camera::new(1.0, 1.0, 0.0, 0.0, 4, 4).unwrap();
    cam.rotation[0] = 2.0;
    assert!(cam.validate().is_err());
}

#[test]
fn single_point_is_visible() {
    assert_eq!(
        visibility_mask(&camera(), &[[0.0, 0.0, 1.0]], 2.0, 0.01),
        vec![true]
    );
}

#[test]
fn same_ray_near_point_occludes_far_point() {
    let vis = visibility_mask(&camera(), &[[0.0, 0.0, 2.0], [0.0, 0.0, 1.0]], 2.0, 0.01);
    assert_eq!(vis, vec![false, true]);
}

#[test]
fn staircase_matches_hand_raster() {
    // f = 10, c = 8. With radius 1 px, A at pixel (8,8) covers its four
    // edge neighbours, so B at (9,8) hides behind it. B covers (10,8) but
    // not (11,8), so C stays visible. Pixels exactly one radius away are
    // left to rounding and not checked.
    let cam = Camera::new(10.0, 10.0, 8.0, 8.0, 16, 16).unwrap();
    let a = [0.05, 0.05, 1.0];
    let b = [0.3, 0.1, 2.0];
    let c = [1.05, 0.15, 3.0];
    let proj = project_points(&cam, &[a, b, c]);
    assert_eq!(
        proj.iter().map(|p| p.pixel()).collect::<Vec<_>>(),
        vec![(8, 8), (9, 8), (11, 8)]
    );
    let (depth, owner) = splat_zbuffer(&cam, &proj, 1.0);
    let at = |x: usize, y: usize| y * 16 + x;
    assert_eq!(owner[at(9, 8)], Some(0));
    assert_eq!(owner[at(10, 8)], Some(1));
    assert_eq!(owner[at(11, 8)], Some(2));
    assert_eq!(owner[at(9, 10)], None);
    assert_eq!(depth[at(8, 8)], 1.0);
    assert_eq!(depth[at(6, 8)], f64::INFINITY);
    assert_eq!(
        visibility_mask(&cam, &[a, b, c], 1.0, 0.01),
        vec![true, false, true]
    );
}

fn arb_points(max: usize) -> impl Strategy<Value = Vec<Point>> {
    prop::collection::vec(prop::array::uniform3(-2.0f32..2.0), 1..max)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn knn_equals_exhaustive(points in arb_points(256), queries in arb_points(8), k in 1usize..12) {
        let k = k.min(points.len());
        let nb = KnnIndex::build(&points).unwrap().knn(&queries, k).unwrap();
        for (q, qp) in queries.iter().enumerate() {
            let (idx, d) = nb.row(q);
            let want = brute_knn(&points, qp, k);
            prop_assert_eq!(idx.to_vec(), want.iter().map(|w| w.0).collect::<Vec<_>>());
            prop_assert_eq!(d.to_vec(), want.iter().map(|w| w.1).collect::<Vec<_>>());
        }
    }

    #[test]
    fn knn_handles_duplicates_and_planes(n in 1usize..80, k in 1usize..8, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut points: Vec<Point> = (0..n).map(|_| [rng.random_range(0..3) as f32, rng.random(), 0.0]).collect();
        points.extend(points.clone());
        let k = k.min(points.len());
        let nb = KnnIndex::build(&points).unwrap().knn(&points, k).unwrap();
        for (q, qp) in points.iter().enumerate() {
            let want = brute_knn(&points, qp, k);
            prop_assert_eq!(nb.row(q).0.to_vec(), want.iter().map(|w| w.0).collect::<Vec<_>>());
        }
    }

    #[test]
    fn idw_weights_are_convex(points in arb_points(64), targets in arb_points(16), k in 1usize..6) {
        let k = k.min(points.len());
        let w = idw_weights(&KnnIndex::build(&points).unwrap(), &targets, k).unwrap();
        for row in w.weights.chunks(k) {
            prop_assert!(row.iter().all(|&x| x >= 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn interpolation_stays_in_feature_hull(points in arb_points(64), targets in arb_points(16), seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let feats: Vec<f32> = (0..points.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let k = 4.min(points.len());
        let src = PointCloud::with_features(points.clone(), 1, feats.clone()).unwrap();
        let out = inverse_distance_interpolate(&src, &targets, k).unwrap();
        let nb = KnnIndex::build(&points).unwrap().knn(&targets, k).unwrap();
        for (q, v) in out.iter().enumerate() {
            let vals: Vec<f32> = nb.row(q).0.iter().map(|&i| feats[i as usize]).collect();
            let lo = vals.iter().cloned().fold(f32::INFINITY, f32::min);
            let hi = vals.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
            prop_assert!(*v >= lo - 1e-5 && *v <= hi + 1e-5);
        }
    }

    #[test]
    fn interpolation_is_continuous(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pts = random_points(&mut rng, 20);
        let feats: Vec<f32> = (0..20).map(|_| rng.random()).collect();
        let src = PointCloud::with_features(pts, 1, feats).unwrap();
        let t: Point = [rng.random(), rng.random(), rng.random()];
        let delta = 1e-4f32;
        let moved = [t[0] + delta, t[1], t[2]];
        let a = inverse_distance_interpolate(&src, &[t], 1).unwrap();
        let b = inverse_distance_interpolate(&src, &[moved], 1).unwrap();
        // With k = 1 the output is piecewise constant; generic targets stay
        // inside one cell, so the change is zero.
        let idx = KnnIndex::build(src.positions()).unwrap();
        let same = idx.knn(&[t], 1).unwrap().indices == idx.knn(&[moved], 1).unwrap().indices;
        prop_assume!(same);
        prop_assert_eq!(a, b);
        let a4 = inverse_distance_interpolate(&src, &[t], 4).unwrap()[0];
        let b4 = inverse_distance_interpolate(&src, &[moved], 4).unwrap()[0];
        let nb_same = idx.knn(&[t], 4).unwrap().indices == idx.knn(&[moved], 4).unwrap().indices;
        prop_assume!(nb_same);
        prop_assert!((a4 - b4).abs() < 0.1);
    }

    #[test]
    fn nearest_point_per_pixel_is_visible(seed in any::<u64>(), n in 1usize..60) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cam = Camera::new(20.0, 20.0, 8.0, 8.0, 16, 16).unwrap();
        let pts: Vec<Point> = (0..n)
            .map(|_| [rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5), rng.random_range(1.0..3.0)])
            .collect();
        let vis = visibility_mask(&cam, &pts, 2.0, 0.01);
        let proj = project_points(&cam, &pts);
        let (_, owner) = splat_zbuffer(&cam, &proj, 2.0);
        for (cell, o) in owner.iter().enumerate() {
            if let Some(o) = *o {
                let (px, py) = proj[o as usize].pixel();
                if py * 16 + px == cell {
                    prop_assert!(vis[o as usize]);
                }
            }
        }
    }
}
