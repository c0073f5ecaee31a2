use nalgebra::{Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use voxfuse::conditioning::{
    encode_input, epipolar_gather, epipolar_render, input_summary, pixelnerf_loss, EpipolarConfig, ENCODED_CHANNELS, SUMMARY_DIM,
};
use voxfuse::geometry::project;
use voxfuse::metrics::psnr;
use voxfuse::scenes::{render_gt, Primitive, SyntheticScene};
use voxfuse::{CameraPose, Error, Image, Intrinsics, PosedImage};

fn camera(position: Vector3<f64>, size: u32) -> CameraPose {
    CameraPose::look_at(position, Vector3::zeros(), Vector3::z(), Intrinsics::centered(0.9 * size as f64, size, size)).unwrap()
}

fn ring(n: usize) -> Vec<CameraPose> {
    (0..n)
        .map(|i| {
            let a = 0.4 + 0.5 * i as f64;
            camera(Vector3::new(2.0 * a.cos(), 2.0 * a.sin(), 0.7), 64)
        })
        .collect()
}

fn scene() -> SyntheticScene {
    SyntheticScene::new(
        vec![
            Primitive::Sphere { center: Vector3::new(0.0, 0.1, 0.0), radius: 0.35, albedo: [0.9, 0.4, 0.2] },
            Primitive::Box { min: Vector3::new(-0.5, -0.6, -0.3), max: Vector3::new(-0.2, -0.2, 0.2), albedo: [0.3, 0.8, 0.5] },
        ],
        [0.1, 0.1, 0.15],
    )
    .unwrap()
}

fn views(n: usize) -> Vec<PosedImage> {
    let s = scene();
    ring(n).into_iter().map(|p| PosedImage::new(render_gt(&s, &p, 64, 64), p).unwrap()).collect()
}

fn encoded(views: &[PosedImage]) -> Vec<Image> {
    views.iter().map(encode_input).collect()
}

fn max_abs_diff(a: &Image, b: &Image) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn with_pose(img: Image) -> PosedImage {
    let (w, h) = (img.width() as u32, img.height() as u32);
    let pose =
        CameraPose::look_at(Vector3::new(0.0, -2.0, 0.0), Vector3::zeros(), Vector3::z(), Intrinsics::centered(20.0, w, h))
            .unwrap();
    PosedImage::new(img, pose).unwrap()
}

#[test]
fn constant_image_has_no_gradient_response() {
    let enc = encode_input(&with_pose(Image::constant(16, 12, &[0.3, 0.6, 0.9])));
    assert_eq!(enc.channels(), ENCODED_CHANNELS);
    for c in 3..15 {
        assert!(enc.channel_range(c, 1).data().iter().all(|v| v.abs() < 1e-12), "channel {c}");
    }
}

#[test]
fn derivative_channels_ignore_intensity_shifts() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let base = Image::from_fn(20, 16, 3, |_, _, _| rng.random_range(0.0..0.8));
    let shifted = base.map(|v| v + 0.15);
    let (a, b) = (encode_input(&with_pose(base)), encode_input(&with_pose(shifted)));
    // gradients, derivatives, laplacian and both local variances
    for c in (3..15).chain([16, 18]) {
        assert!(max_abs_diff(&a.channel_range(c, 1), &b.channel_range(c, 1)) < 1e-9, "channel {c}");
    }
}

#[test]
fn step_edge_peaks_on_the_edge() {
    let edge = 9;
    let img = Image::from_fn(20, 8, 3, |x, _, _| if x >= edge { 1.0 } else { 0.0 });
    let enc = encode_input(&with_pose(img));
    for y in 0..8 {
        let row: Vec<f64> = (0..20).map(|x| enc.get(x, y, 3)).collect();
        let best = (0..20).max_by(|&a, &b| row[a].total_cmp(&row[b]).then(b.cmp(&a))).unwrap();
        assert!(best == edge || best + 1 == edge, "row {y}: argmax at {best}");
    }
}

#[test]
fn summaries_have_fixed_size() {
    for v in views(2) {
        let s = input_summary(v.image());
        assert_eq!(s.len(), SUMMARY_DIM);
        assert!(s.iter().all(|x| x.is_finite()));
    }
}

#[test]
fn identity_view_reproduces_downsampled_input() {
    let v = views(1);
    let target = v[0].pose().resized(32, 32);
    let out = epipolar_render(&v, &encoded(&v), &target, &EpipolarConfig::default()).unwrap();
    let reference = v[0].image().resize_area(32, 32).unwrap();
    let value = psnr(&out.rgb, &reference).unwrap();
    assert!(value > 30.0, "psnr {value}");
    assert!(out.alpha.data().iter().all(|&a| a == 1.0));
    assert_eq!(out.features.channels(), 3 + 16);
}

#[test]
fn painted_point_is_gathered_consistently() {
    let point = Vector3::new(0.12, -0.07, 0.05);
    // flat, mutually different backgrounds make the point the only consistent depth
    let backgrounds = [[0.0, 0.0, 1.0], [0.0, 1.0, 0.0], [1.0, 1.0, 1.0]];
    let inputs: Vec<PosedImage> = ring(3)
        .into_iter()
        .zip(backgrounds)
        .map(|(pose, bg)| {
            let (px, _) = project(&pose, point).unwrap();
            let (cx, cy) = (px.x.floor() as i64, px.y.floor() as i64);
            let img = Image::from_fn(64, 64, 3, |x, y, c| {
                if (x as i64 - cx).abs() <= 8 && (y as i64 - cy).abs() <= 8 {
                    [1.0, 0.0, 0.0][c]
                } else {
                    bg[c]
                }
            });
            PosedImage::new(img, pose).unwrap()
        })
        .collect();
    let feats = encoded(&inputs);
    let gathered = epipolar_gather(&inputs, &feats, &point);
    assert_eq!(gathered.len(), 3);
    for g in &gathered {
        let g = g.as_ref().expect("point visible in every view");
        for (c, want) in [1.0, 0.0, 0.0].iter().enumerate() {
            assert!((g[c] - want).abs() < 1e-6);
        }
    }
    let mean: Vec<f64> = (0..3).map(|c| gathered.iter().map(|g| g.as_ref().unwrap()[c]).sum::<f64>() / 3.0).collect();
    let var: f64 = (0..3).map(|c| gathered.iter().map(|g| (g.as_ref().unwrap()[c] - mean[c]).powi(2)).sum::<f64>() / 3.0).sum();
    assert!(var < 1e-12);

    // the target ray through the point should fuse to red
    let target = camera(Vector3::new(1.2, 1.5, 1.0), 32);
    let (px, _) = project(&target, point).unwrap();
    let out = epipolar_render(&inputs, &feats, &target, &EpipolarConfig::default()).unwrap();
    let p = out.rgb.pixel(px.x.floor() as usize, px.y.floor() as usize);
    assert!(p[0] > p[1] + 0.3 && p[0] > p[2] + 0.3, "fused rgb {p:?}");
}

#[test]
fn input_order_does_not_matter() {
    let v = views(4);
    let f = encoded(&v);
    let target = camera(Vector3::new(1.0, 1.5, 0.9), 16);
    let cfg = EpipolarConfig { n_samples: 48, ..EpipolarConfig::default() };
    let a = epipolar_render(&v, &f, &target, &cfg).unwrap();
    let order = [2, 0, 3, 1];
    let pv: Vec<PosedImage> = order.iter().map(|&i| v[i].clone()).collect();
    let pf: Vec<Image> = order.iter().map(|&i| f[i].clone()).collect();
    let b = epipolar_render(&pv, &pf, &target, &cfg).unwrap();
    assert!(max_abs_diff(&a.features, &b.features) < 1e-9);
    assert!(max_abs_diff(&a.rgb, &b.rgb) < 1e-9);
}

#[test]
fn any_input_count_gives_the_same_shapes() {
    let target = camera(Vector3::new(-1.2, 1.5, 0.5), 16);
    let cfg = EpipolarConfig { n_samples: 32, ..EpipolarConfig::default() };
    for n in [1, 2, 3, 5] {
        let v = views(n);
        let out = epipolar_render(&v, &encoded(&v), &target, &cfg).unwrap();
        assert_eq!((out.features.width(), out.features.height(), out.features.channels()), (16, 16, 19));
        assert_eq!((out.rgb.width(), out.rgb.channels(), out.alpha.channels()), (16, 3, 1));
        assert!(out.features.all_finite());
        let (lo, hi) = out.rgb.data().iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &v| (l.min(v), h.max(v)));
        assert!(lo >= 0.0 && hi <= 1.0);
    }
    assert!(matches!(epipolar_render(&[], &[], &target, &cfg), Err(Error::InsufficientData { needed: 1, got: 0 })));
}

#[test]
fn blind_views_change_nothing() {
    let v = views(2);
    let f = encoded(&v);
    let target = camera(Vector3::new(0.5, -1.8, 0.8), 16);
    // sits at the target camera looking the opposite way
    let away = target.position() * 2.0;
    let blind_pose = CameraPose::look_at(target.position(), away, Vector3::z(), Intrinsics::centered(50.0, 64, 64)).unwrap();
    let blind = PosedImage::new(Image::filled(64, 64, 3, 0.9), blind_pose).unwrap();
    let cfg = EpipolarConfig { n_samples: 48, ..EpipolarConfig::default() };
    let base = epipolar_render(&v, &f, &target, &cfg).unwrap();
    let mut v3 = v.clone();
    v3.push(blind.clone());
    let mut f3 = f.clone();
    f3.push(encode_input(&blind));
    let with = epipolar_render(&v3, &f3, &target, &cfg).unwrap();
    assert!(max_abs_diff(&base.features, &with.features) < 1e-9);
    assert!(max_abs_diff(&base.rgb, &with.rgb) < 1e-9);

    // only the blind view: every pixel is flagged and gray
    let alone = epipolar_render(std::slice::from_ref(&blind), &[encode_input(&blind)], &target, &cfg).unwrap();
    assert!(alone.alpha.data().iter().all(|&a| a == 0.0));
    assert!(alone.rgb.data().iter().all(|&c| c == 0.5));
    assert!(alone.features.channel_range(3, 16).data().iter().all(|&c| c == 0.0));
}

#[test]
fn gather_rejects_points_behind_or_outside() {
    let v = views(1);
    let f = encoded(&v);
    let behind = v[0].pose().position() * 1.5;
    assert!(epipolar_gather(&v, &f, &behind)[0].is_none());
    let (px, _) = project(v[0].pose(), Vector3::zeros()).unwrap();
    assert!((px - Vector2::new(32.0, 32.0)).norm() < 1e-9);
    assert!(epipolar_gather(&v, &f, &Vector3::zeros())[0].is_some());
    let side = v[0].pose().position() + v[0].pose().forward() + v[0].pose().rotation().column(0) * 10.0;
    assert!(epipolar_gather(&v, &f, &side)[0].is_none());
}

#[test]
fn photometric_loss_examples() {
    let v = &views(1)[0];
    let down = v.image().resize_area(32, 32).unwrap();
    assert_eq!(pixelnerf_loss(&down, v).unwrap(), 0.0);
    let offset = down.map(|c| c + 0.1);
    assert!((pixelnerf_loss(&offset, v).unwrap() - 0.01).abs() < 1e-12);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let random = Image::from_fn(32, 32, 3, |_, _, _| rng.random_range(0.0..1.0));
    let mut direct = 0.0;
    for y in 0..32 {
        for x in 0..32 {
            for c in 0..3 {
                let mut m = 0.0;
                for (dx, dy) in [(0, 0), (1, 0), (0, 1), (1, 1)] {
                    m += v.image().get(2 * x + dx, 2 * y + dy, c) / 4.0;
                }
                direct += (random.get(x, y, c) - m).powi(2);
            }
        }
    }
    direct /= (32 * 32 * 3) as f64;
    assert!((pixelnerf_loss(&random, v).unwrap() - direct).abs() < 1e-12);
    assert!(pixelnerf_loss(&Image::new(30, 30, 3), v).is_err());
}
