use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use voxfuse::field::Aabb;
use voxfuse::geometry::SceneTransform;
use voxfuse::metrics::psnr;
use voxfuse::render::{render_image, RenderConfig};
use voxfuse::scenes::{
    bake_into_field, generate_views, load_dataset, make_scene, manifest_from_json, render_gt, ring_path, save_dataset,
    view_parameters, Dataset, Primitive, SceneSpec, SyntheticScene, MANIFEST_FILE,
};
use voxfuse::{CameraPose, Error, Intrinsics};

fn spec(n: usize, seed: u64) -> SceneSpec {
    SceneSpec { n_primitives: n, seed, background: [0.1, 0.2, 0.3] }
}

/// Axis-aligned box that encloses a primitive.
fn bounds(p: &Primitive) -> (Vector3<f64>, Vector3<f64>) {
    match p {
        Primitive::Sphere { center, radius, .. } => (center - Vector3::repeat(*radius), center + Vector3::repeat(*radius)),
        Primitive::Box { min, max, .. } => (*min, *max),
    }
}

#[test]
fn generated_primitives_never_overlap() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for seed in 0..10 {
        let scene = make_scene(&spec(5, seed)).unwrap();
        assert_eq!(scene.primitives.len(), 5);
        for (i, a) in scene.primitives.iter().enumerate() {
            let (lo, hi) = bounds(a);
            assert!(lo.iter().chain(hi.iter()).all(|v| v.abs() <= 0.8 + 1e-12));
            let mut inside = 0;
            while inside < 2000 {
                let p = Vector3::from_fn(|k, _| rng.random_range(lo[k]..=hi[k]));
                if a.signed_distance(&p) >= 0.0 {
                    continue;
                }
                inside += 1;
                for (j, b) in scene.primitives.iter().enumerate() {
                    if i != j {
                        assert!(b.signed_distance(&p) > 0.0, "seed {seed}: primitives {i} and {j} overlap");
                    }
                }
            }
        }
    }
}

#[test]
fn scenes_are_seed_deterministic() {
    assert_eq!(make_scene(&spec(3, 7)).unwrap(), make_scene(&spec(3, 7)).unwrap());
    assert_ne!(make_scene(&spec(3, 7)).unwrap(), make_scene(&spec(3, 8)).unwrap());
    let one = make_scene(&spec(1, 4)).unwrap();
    assert_eq!(one.primitives.len(), 1);
    assert!(make_scene(&spec(0, 4)).is_err());
    assert!(matches!(make_scene(&spec(400, 1)), Err(Error::Capacity(_))));
}

#[test]
fn camera_facing_away_sees_background() {
    let scene = make_scene(&spec(4, 2)).unwrap();
    let pose = CameraPose::look_at(
        Vector3::new(0.0, -2.0, 0.0),
        Vector3::new(0.0, -5.0, 0.0),
        Vector3::z(),
        Intrinsics::centered(30.0, 16, 16),
    )
    .unwrap();
    let img = render_gt(&scene, &pose, 16, 16);
    assert!(img.data().chunks(3).all(|p| p == scene.background));
}

#[test]
fn on_axis_sphere_center_pixel_is_lambertian() {
    let albedo = [0.9, 0.6, 0.3];
    let scene = SyntheticScene::new(vec![Primitive::Sphere { center: Vector3::zeros(), radius: 0.7, albedo }], [0.0; 3]).unwrap();
    let eye = Vector3::new(0.3, -1.5, 0.9);
    let pose = CameraPose::look_at(eye, Vector3::zeros(), Vector3::z(), Intrinsics::centered(40.0, 33, 33)).unwrap();
    let img = render_gt(&scene, &pose, 33, 33);
    let normal = eye.normalize();
    let k = 0.3 + 0.7 * normal.dot(&Vector3::new(0.3, 0.5, 1.0).normalize()).max(0.0);
    for c in 0..3 {
        assert!((img.get(16, 16, c) - albedo[c] * k).abs() < 1e-12);
    }
    assert_eq!(img.pixel(0, 0), &[0.0; 3]);
}

#[test]
fn joint_translation_leaves_images_unchanged() {
    let scene = make_scene(&spec(4, 3)).unwrap();
    let pose =
        CameraPose::look_at(Vector3::new(1.7, -1.1, 0.8), Vector3::zeros(), Vector3::z(), Intrinsics::centered(55.0, 48, 48))
            .unwrap();
    let shift = Vector3::new(0.25, -0.5, 0.125);
    let moved = scene.transformed(&SceneTransform { scale: 1.0, translation: shift });
    let a = render_gt(&scene, &pose, 48, 48);
    let b = render_gt(&moved, &pose.with_position(pose.position() + shift), 48, 48);
    let diff = a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    assert!(diff < 1e-12, "max difference {diff}");
}

#[test]
fn view_parameters_are_even_and_disjoint() {
    let (train, test) = view_parameters(true, 3, 3).unwrap();
    for (a, b) in train.iter().zip([0.0, 1.0 / 3.0, 2.0 / 3.0]) {
        assert!((a - b).abs() < 1e-15);
    }
    for (a, b) in test.iter().zip([1.0 / 6.0, 0.5, 5.0 / 6.0]) {
        assert!((a - b).abs() < 1e-15);
    }
    for (n_train, n_test) in [(3, 6), (6, 6), (9, 6), (1, 4), (5, 2)] {
        for closed in [true, false] {
            let (train, test) = view_parameters(closed, n_train, n_test).unwrap();
            assert_eq!((train.len(), test.len()), (n_train, n_test));
            assert!(test.iter().all(|t| train.iter().all(|u| (t - u).abs() > 1e-9)));
            assert!(test.iter().all(|t| (0.0..=1.0).contains(t)));
        }
    }
    assert!(view_parameters(true, 0, 3).is_err());
}

#[test]
fn generated_views_are_ground_truth_renders() {
    let scene = make_scene(&spec(3, 5)).unwrap();
    let path = ring_path(2.0, 0.8, 60.0, 32, 32).unwrap();
    let views = generate_views(&scene, &path, 3, 4, 32, 32).unwrap();
    assert_eq!((views.train.len(), views.test.len()), (3, 4));
    for v in views.train.iter().chain(&views.test) {
        assert_eq!(v.image(), &render_gt(&scene, v.pose(), 32, 32));
    }
    let again = generate_views(&scene, &path, 3, 4, 32, 32).unwrap();
    for (a, b) in views.train.iter().zip(&again.train) {
        assert_eq!(a.image(), b.image());
    }
}

#[test]
fn fine_bake_reproduces_the_ray_tracer() {
    let scene = make_scene(&SceneSpec { n_primitives: 4, seed: 0, background: [0.0; 3] }).unwrap();
    let field = bake_into_field(&scene, [128; 3], Aabb::unit_cube(), 400.0).unwrap();
    let path = ring_path(2.0, 0.8, 60.0, 64, 64).unwrap();
    let cfg = RenderConfig { n_samples: 256, ..RenderConfig::default() }.for_eval();
    for u in [0.0, 0.3, 0.55, 0.8] {
        let pose = path.pose_at(u).unwrap();
        let truth = render_gt(&scene, &pose, 64, 64);
        let out = render_image(&field, &pose, &cfg).unwrap();
        let value = psnr(&out.rgb, &truth).unwrap();
        assert!(value >= 25.0, "u = {u}: psnr {value}");
    }
}

#[test]
fn datasets_survive_a_disk_round_trip() {
    let scene = make_scene(&spec(3, 9)).unwrap();
    let path = ring_path(2.0, 0.8, 60.0, 24, 24).unwrap();
    let views = generate_views(&scene, &path, 3, 2, 24, 24).unwrap();
    let dataset = Dataset { scene: scene.clone(), path: path.clone(), views };
    let dir = tempfile::tempdir().unwrap();
    save_dataset(&dataset, dir.path()).unwrap();
    let back = load_dataset(dir.path()).unwrap();
    assert_eq!(back.scene, scene);
    assert_eq!(back.path, path);
    assert_eq!(back.views.train_params, dataset.views.train_params);
    assert_eq!(back.views.test_params, dataset.views.test_params);
    for (a, b) in dataset.views.train.iter().chain(&dataset.views.test).zip(back.views.train.iter().chain(&back.views.test)) {
        assert_eq!(a.pose(), b.pose());
        let diff = a.image().data().iter().zip(b.image().data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        assert!(diff <= 0.5 / 255.0 + 1e-12);
    }

    let manifest = std::fs::read_to_string(dir.path().join(MANIFEST_FILE)).unwrap();
    let escaping = manifest.replacen("train/000.png", "../000.png", 1);
    assert!(matches!(manifest_from_json(escaping.as_bytes()), Err(Error::Config(_))));
    let versioned = manifest.replacen("\"schema_version\": 1", "\"schema_version\": 2", 1);
    assert!(manifest_from_json(versioned.as_bytes()).is_err());
    assert!(matches!(load_dataset(dir.path().join("nope")), Err(Error::Io { .. })));
}
