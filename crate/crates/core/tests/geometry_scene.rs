use autoalign::geometry::*;
use autoalign::scene::*;
use autoalign::AlignError;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::fs;
use std::path::Path;

fn pinhole_z(f: f64, cu: f64, cv: f64) -> CameraProjection {
    CameraProjection::new([[f, 0.0, cu, 0.0], [0.0, f, cv, 0.0], [0.0, 0.0, 1.0, 0.0]]).unwrap()
}

#[test]
fn random_projection_matches_explicit_multiply() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut checked = 0;
    while checked < 200 {
        let mut m = [[0.0; 4]; 3];
        for row in m.iter_mut() {
            for x in row.iter_mut() {
                *x = rng.random_range(-2.0..2.0);
            }
        }
        let Ok(proj) = CameraProjection::new(m) else { continue };
        let p: [f64; 3] = std::array::from_fn(|_| rng.random_range(-5.0..5.0));
        let h: Vec<f64> = (0..3).map(|r| m[r][0] * p[0] + m[r][1] * p[1] + m[r][2] * p[2] + m[r][3]).collect();
        match proj.project_point(p) {
            Ok((u, v, d)) => {
                assert!((d - h[2]).abs() < 1e-12);
                assert!((u - h[0] / h[2]).abs() < 1e-12 * (1.0 + u.abs()));
                assert!((v - h[1] / h[2]).abs() < 1e-12 * (1.0 + v.abs()));
            }
            Err(AlignError::BehindCamera { .. }) => assert!(h[2] <= MIN_DEPTH),
            Err(e) => panic!("{e}"),
        }
        checked += 1;
    }
}

proptest! {
    #[test]
    fn back_projection_recovers_the_point(
        f in 20.0..400.0f64, cu in 0.0..200.0f64, cv in 0.0..200.0f64,
        x in -20.0..20.0f64, y in -20.0..20.0f64, z in 0.1..80.0f64,
    ) {
        let (u, v, d) = pinhole_z(f, cu, cv).project_point([x, y, z]).unwrap();
        let back = [(u - cu) * d / f, (v - cv) * d / f, d];
        for (a, b) in back.iter().zip([x, y, z]) {
            prop_assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn hull_contains_projected_center(
        cx in 4.0..40.0f64, cy in -8.0..8.0f64, cz in -2.0..1.0f64,
        l in 0.2..5.0f64, w in 0.2..3.0f64, h in 0.2..3.0f64,
    ) {
        let proj = CameraProjection::forward_pinhole(96.0, 96.0, 64.0);
        let b = Box3D::axis_aligned([cx, cy, cz], [l, w, h], 0).unwrap();
        let (u, v, _) = proj.project_point(b.center).unwrap();
        prop_assume!((0.0..=192.0).contains(&u) && (0.0..=128.0).contains(&v));
        let r = project_box3d(&proj, &b, (192, 128)).unwrap();
        prop_assert!(r.contains(u, v));
    }

    #[test]
    fn iou_is_symmetric_and_bounded(
        a in prop::array::uniform4(-5.0..5.0f64), b in prop::array::uniform4(-5.0..5.0f64),
    ) {
        let mk = |c: [f64; 4]| Box2D::new(c[0].min(c[1]), c[2].min(c[3]), c[0].max(c[1]) + 0.01, c[2].max(c[3]) + 0.01, 0).unwrap();
        let (p, q) = (mk(a), mk(b));
        let (x, y) = (iou_2d(&p, &q), iou_2d(&q, &p));
        prop_assert_eq!(x, y);
        prop_assert!((0.0..=1.0).contains(&x));
        prop_assert_eq!(iou_2d(&p, &p), 1.0);
        if p != q {
            prop_assert!(x < 1.0);
        }
        let p3 = Box3D::axis_aligned([a[0], a[1], a[2]], [1.0, 2.0, a[3].abs() + 0.1], 0).unwrap();
        let q3 = Box3D::axis_aligned([b[0], b[1], b[2]], [1.5, 1.0, b[3].abs() + 0.1], 0).unwrap();
        prop_assert_eq!(iou_3d(&p3, &q3).unwrap(), iou_3d(&q3, &p3).unwrap());
        prop_assert_eq!(iou_3d(&p3, &p3).unwrap(), 1.0);
    }
}

fn small_config() -> SceneConfig {
    SceneConfig {
        image_width: 64,
        image_height: 48,
        point_budget: 1500,
        surface_density: 150.0,
        ground_points: 100,
        ..SceneConfig::default()
    }
}

#[test]
fn zero_objects_gives_background_only() {
    let cfg = SceneConfig {
        objects_min: 0,
        objects_max: 0,
        clutter_min: 0,
        clutter_max: 0,
        ..small_config()
    };
    let s = generate_scene(11, &cfg).unwrap();
    assert!(s.gt_boxes3d.is_empty() && s.gt_boxes2d.is_empty());
    assert_eq!(s.points.len(), cfg.ground_points);
    for p in &s.points {
        assert!((p[2] - cfg.ground_z).abs() < 0.3);
    }
    assert_eq!(s.image.shape(), &[3, 48, 64]);
}

#[test]
fn generation_is_deterministic() {
    let cfg = small_config();
    let a = generate_scene(5, &cfg).unwrap();
    let b = generate_scene(5, &cfg).unwrap();
    assert_eq!(a, b);
    let dir = tempfile::tempdir().unwrap();
    save_scene(&a, &dir.path().join("a")).unwrap();
    save_scene(&b, &dir.path().join("b")).unwrap();
    for f in ["scene.json", "points.f32", "image.ppm"] {
        assert_eq!(fs::read(dir.path().join("a").join(f)).unwrap(), fs::read(dir.path().join("b").join(f)).unwrap());
    }
    assert_ne!(generate_scene(6, &cfg).unwrap(), a);
}

#[test]
fn boxes2d_are_projections_of_boxes3d() {
    let cfg = SceneConfig::default();
    for seed in 0..20 {
        let s = generate_scene(seed, &cfg).unwrap();
        for (b3, b2) in s.gt_boxes3d.iter().zip(&s.gt_boxes2d) {
            assert_eq!(*b2, project_box3d(&s.projection, b3, s.image_size()).unwrap());
            assert_eq!(b3.yaw, 0.0);
        }
    }
}

#[test]
fn object_points_project_inside_their_dilated_box() {
    let cfg = SceneConfig::default();
    for seed in 0..40 {
        let s = generate_scene(seed, &cfg).unwrap();
        for (b3, b2) in s.gt_boxes3d.iter().zip(&s.gt_boxes2d) {
            // surface samples are rounded to f32, so allow a hair of slack
            let shell = Box3D::axis_aligned(b3.center, b3.size.map(|x| x + 1e-4), 0).unwrap();
            let own: Vec<_> = s.points.iter().filter(|p| shell.contains([p[0], p[1], p[2]])).collect();
            assert!(own.len() >= cfg.min_points, "seed {seed}: {} points", own.len());
            let wide = b2.dilate(2.0);
            let inside = own
                .iter()
                .filter(|p| {
                    let (u, v, _) = s.projection.project_point([p[0], p[1], p[2]]).unwrap();
                    wide.contains(u, v)
                })
                .count();
            assert!(inside as f64 >= 0.9 * own.len() as f64, "seed {seed}: {inside}/{}", own.len());
        }
    }
}

#[test]
fn save_load_save_is_byte_identical() {
    let s = generate_scene(9, &small_config()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    save_scene(&s, &a).unwrap();
    let loaded = load_scene(&a).unwrap();
    assert_eq!(loaded, s);
    save_scene(&loaded, &b).unwrap();
    for f in ["scene.json", "points.f32", "image.ppm"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn truncated_points_file_is_a_parse_error() {
    let s = generate_scene(2, &small_config()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    save_scene(&s, dir.path()).unwrap();
    let path = dir.path().join("points.f32");
    let bytes = fs::read(&path).unwrap();
    fs::write(&path, &bytes[..bytes.len() - 7]).unwrap();
    match load_scene(dir.path()) {
        Err(AlignError::Parse { file, .. }) => assert_eq!(file, "points.f32"),
        other => panic!("expected parse error, got {other:?}"),
    }
}

#[test]
fn malformed_metadata_names_the_field() {
    let s = generate_scene(2, &small_config()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    save_scene(&s, dir.path()).unwrap();
    let path = dir.path().join("scene.json");
    let text = fs::read_to_string(&path).unwrap().replace("\"image_width\"", "\"image_wide\"");
    fs::write(&path, text).unwrap();
    match load_scene(dir.path()) {
        Err(AlignError::Parse { field, .. }) => assert_eq!(field, "image_width"),
        other => panic!("expected parse error, got {other:?}"),
    }
}

fn write_fixture(dir: &Path) {
    let meta = r#"{
  "seed": 42,
  "rng": "ChaCha8",
  "config_hash": "fixture",
  "image_width": 2,
  "image_height": 1,
  "num_points": 2,
  "ground_z": -1.5,
  "projection": [1, -2, 0, 0, 0.5, 0, -2, 0, 1, 0, 0, 0],
  "objects": [
    { "class_id": 1, "center": [10, 0.5, -1], "size": [1, 1, 1], "yaw": 0, "box2d": [0.25, 0.5, 1.75, 1.0] }
  ]
}"#;
    fs::write(dir.join("scene.json"), meta).unwrap();
    let mut pts = Vec::new();
    for v in [1.0f32, 2.0, 3.0, 0.5, -1.0, 0.25, 8.0, 1.0] {
        pts.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(dir.join("points.f32"), pts).unwrap();
    let mut ppm = b"P6\n2 1\n255\n".to_vec();
    ppm.extend_from_slice(&[255, 0, 51, 0, 255, 102]);
    fs::write(dir.join("image.ppm"), ppm).unwrap();
}

#[test]
fn hand_written_fixture_loads() {
    let dir = tempfile::tempdir().unwrap();
    write_fixture(dir.path());
    let s = load_scene(dir.path()).unwrap();
    assert_eq!(s.seed, 42);
    assert_eq!(s.config_hash, "fixture");
    assert_eq!(s.ground_z, -1.5);
    assert_eq!(s.image_size(), (2, 1));
    assert_eq!(s.points, vec![[1.0, 2.0, 3.0, 0.5], [-1.0, 0.25, 8.0, 1.0]]);
    // planar [3, 1, 2] layout
    assert_eq!(s.image.data(), &[1.0, 0.0, 0.0, 1.0, 0.2, 0.4]);
    assert_eq!(s.projection.to_row_major(), [1.0, -2.0, 0.0, 0.0, 0.5, 0.0, -2.0, 0.0, 1.0, 0.0, 0.0, 0.0]);
    assert_eq!(s.gt_boxes3d, vec![Box3D::axis_aligned([10.0, 0.5, -1.0], [1.0; 3], 1).unwrap()]);
    assert_eq!(s.gt_boxes2d, vec![Box2D::new(0.25, 0.5, 1.75, 1.0, 1).unwrap()]);
}

#[test]
fn dataset_manifest_splits_in_order() {
    let dir = tempfile::tempdir().unwrap();
    let m = generate_dataset(dir.path(), 5, 3, 7, &small_config()).unwrap();
    assert_eq!(m.train, ["scene_00000", "scene_00001", "scene_00002"]);
    assert_eq!(m.eval, ["scene_00003", "scene_00004"]);
    assert_eq!(load_manifest(dir.path()).unwrap(), m);
    let s = load_scene(&dir.path().join("scene_00003")).unwrap();
    assert_eq!(s.seed, scene_seed(7, 3));
}

#[test]
fn impossible_placement_is_reported() {
    let cfg = SceneConfig {
        objects_min: 40,
        objects_max: 40,
        placement_attempts: 50,
        ..small_config()
    };
    assert!(matches!(generate_scene(1, &cfg), Err(AlignError::Placement { .. })));
}

#[test]
fn class_frequencies_match_priors() {
    let cfg = SceneConfig {
        point_budget: 0,
        ground_points: 0,
        image_width: 192,
        image_height: 128,
        ..SceneConfig::default()
    };
    let mut counts = [0usize; 2];
    for seed in 0..1000 {
        for b in generate_scene(seed, &cfg).unwrap().gt_boxes3d {
            counts[b.class_id] += 1;
        }
    }
    let total = (counts[0] + counts[1]) as f64;
    for (c, spec) in counts.iter().zip(&cfg.classes) {
        let freq = *c as f64 / total;
        assert!((freq - spec.prior).abs() <= 0.03, "{}: {freq:.3} vs {}", spec.name, spec.prior);
    }
}
