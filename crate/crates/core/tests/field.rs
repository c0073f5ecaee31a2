use nalgebra::Vector3;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use voxfuse::field::{sigmoid, softplus, Aabb, VoxelField};
use voxfuse::Error;

fn random_field(res: [usize; 3], seed: u64) -> VoxelField {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bbox = Aabb::new(Vector3::new(-1.0, -0.5, -0.8), Vector3::new(1.2, 0.7, 0.9)).unwrap();
    let mut field = VoxelField::new(res, bbox).unwrap();
    let (d, c) = field.params_mut();
    d.iter_mut().for_each(|v| *v = rng.random_range(-3.0..3.0));
    c.iter_mut().for_each(|v| *v = rng.random_range(-3.0..3.0));
    field
}

fn random_point(field: &VoxelField, rng: &mut impl Rng) -> Vector3<f64> {
    let b = field.bbox();
    Vector3::from_fn(|i, _| rng.random_range(b.min[i]..b.max[i]))
}

/// Explicit weighted sum over the eight corners of the containing cell.
fn direct_query(field: &VoxelField, p: &Vector3<f64>) -> (f64, [f64; 3]) {
    let res = field.resolution();
    let b = field.bbox();
    let mut cell = [0usize; 3];
    let mut frac = [0.0; 3];
    for a in 0..3 {
        let u = (p[a] - b.min[a]) / (b.max[a] - b.min[a]) * (res[a] - 1) as f64;
        cell[a] = (u.floor() as usize).min(res[a] - 2);
        frac[a] = u - cell[a] as f64;
    }
    let (mut d, mut c) = (0.0, [0.0; 3]);
    for corner in 0..8 {
        let o = [corner & 1, (corner >> 1) & 1, (corner >> 2) & 1];
        let w: f64 = (0..3).map(|a| if o[a] == 1 { frac[a] } else { 1.0 - frac[a] }).product();
        let idx = field.node_index(cell[0] + o[0], cell[1] + o[1], cell[2] + o[2]);
        d += w * field.density_params()[idx];
        for ch in 0..3 {
            c[ch] += w * field.color_params()[3 * idx + ch];
        }
    }
    (softplus(d), [sigmoid(c[0]), sigmoid(c[1]), sigmoid(c[2])])
}

#[test]
fn query_matches_direct_weighted_sum() {
    let field = random_field([5, 6, 7], 1);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..2000 {
        let p = random_point(&field, &mut rng);
        let s = field.query(&p);
        let (d, c) = direct_query(&field, &p);
        assert!((s.density - d).abs() < 1e-12);
        for ch in 0..3 {
            assert!((s.rgb[ch] - c[ch]).abs() < 1e-12);
        }
    }
    // cell center: activation of the mean raw parameter
    let center = (field.node_position(1, 2, 3) + field.node_position(2, 3, 4)) / 2.0;
    let mean: f64 = [(1, 2, 3), (2, 2, 3), (1, 3, 3), (2, 3, 3), (1, 2, 4), (2, 2, 4), (1, 3, 4), (2, 3, 4)]
        .iter()
        .map(|&(i, j, k)| field.density_params()[field.node_index(i, j, k)])
        .sum::<f64>()
        / 8.0;
    assert!((field.query(&center).density - softplus(mean)).abs() < 1e-12);
}

fn query_objective(field: &VoxelField, p: &Vector3<f64>, dd: f64, drgb: [f64; 3]) -> f64 {
    let s = field.query(p);
    dd * s.density + drgb.iter().zip(&s.rgb).map(|(a, b)| a * b).sum::<f64>()
}

#[test]
fn backward_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let h = 1e-4;
    let mut worst: f64 = 0.0;
    for trial in 0..40 {
        let mut field = random_field([8; 3], 10 + trial);
        let p = random_point(&field, &mut rng);
        let dd = rng.random_range(-2.0..2.0);
        let drgb = [rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)];
        field.query_backward(&p, dd, drgb);
        let tri = field.locate(&p).unwrap();
        let scale = field.grads().density.iter().chain(&field.grads().color).map(|v| v.abs()).fold(0.0, f64::max);
        for &node in &tri.nodes {
            for slot in 0..4 {
                let bump = |s: f64| {
                    let mut f = field.clone();
                    let (d, c) = f.params_mut();
                    if slot == 0 {
                        d[node] += s
                    } else {
                        c[3 * node + slot - 1] += s
                    }
                    query_objective(&f, &p, dd, drgb)
                };
                let fd = (bump(h) - bump(-h)) / (2.0 * h);
                let a = if slot == 0 { field.grads().density[node] } else { field.grads().color[3 * node + slot - 1] };
                let rel = (a - fd).abs() / fd.abs().max(a.abs()).max(1e-4 * scale);
                worst = worst.max(rel);
            }
        }
        // everything outside the eight corners stays zero
        let touched: usize = field.grads().density.iter().filter(|v| **v != 0.0).count();
        assert!(touched <= 8);
    }
    assert!(worst < 1e-5, "worst relative error {worst}");
}

#[test]
fn query_is_continuous_across_faces() {
    let field = random_field([6; 3], 4);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..500 {
        let mut p = random_point(&field, &mut rng);
        let axis = rng.random_range(0..3);
        let k = rng.random_range(1..5);
        p[axis] = field.node_position(k, k, k)[axis];
        let mut lo = p;
        let mut hi = p;
        lo[axis] -= 1e-7;
        hi[axis] += 1e-7;
        let (a, b) = (field.query(&lo), field.query(&hi));
        assert!((a.density - b.density).abs() < 1e-5);
        for ch in 0..3 {
            assert!((a.rgb[ch] - b.rgb[ch]).abs() < 1e-5);
        }
    }
}

#[test]
fn decoding_rejects_corruption() {
    let field = random_field([3, 4, 5], 6);
    let bytes = field.encode_checkpoint();
    assert!(VoxelField::decode_checkpoint(&bytes).is_ok());
    for cut in [0, 4, 20, 64, bytes.len() - 1] {
        assert!(matches!(VoxelField::decode_checkpoint(&bytes[..cut]), Err(Error::Decode(_))), "cut {cut}");
    }
    let mut bad = bytes.clone();
    bad[0] ^= 0xff;
    assert!(matches!(VoxelField::decode_checkpoint(&bad), Err(Error::Decode(_))));
    let mut nan = bytes.clone();
    let n = nan.len();
    nan[n - 4..].copy_from_slice(&f32::NAN.to_le_bytes());
    assert!(matches!(VoxelField::decode_checkpoint(&nan), Err(Error::Decode(_))));
    let mut huge = bytes.clone();
    huge[5..9].copy_from_slice(&u32::MAX.to_le_bytes());
    huge[9..13].copy_from_slice(&u32::MAX.to_le_bytes());
    assert!(VoxelField::decode_checkpoint(&huge).is_err());
    let mut extra = bytes;
    extra.push(0);
    assert!(VoxelField::decode_checkpoint(&extra).is_err());
}

#[test]
fn save_and_load_through_the_filesystem() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("f.voxf");
    let field = random_field([4; 3], 7);
    field.save(&path).unwrap();
    let back = VoxelField::load(&path).unwrap();
    assert_eq!(back.encode_checkpoint(), field.encode_checkpoint());
    assert!(matches!(VoxelField::load(dir.path().join("missing")), Err(Error::Io { .. })));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn checkpoints_round_trip(rx in 2usize..6, ry in 2usize..6, rz in 2usize..6, seed in 0u64..1_000_000) {
        let field = random_field([rx, ry, rz], seed);
        let back = VoxelField::decode_checkpoint(&field.encode_checkpoint()).unwrap();
        prop_assert_eq!(back.resolution(), field.resolution());
        prop_assert_eq!(back.bbox(), field.bbox());
        for (a, b) in field.density_params().iter().chain(field.color_params()).zip(back.density_params().iter().chain(back.color_params())) {
            prop_assert_eq!(*b, *a as f32 as f64);
        }
        // re-encoding is a fixed point
        prop_assert_eq!(back.encode_checkpoint(), field.encode_checkpoint());
    }

    #[test]
    fn arbitrary_bytes_never_panic(bytes in prop::collection::vec(any::<u8>(), 0..256)) {
        let _ = VoxelField::decode_checkpoint(&bytes);
    }

    #[test]
    fn grads_keep_parameter_shapes(rx in 2usize..5, ry in 2usize..5, rz in 2usize..5) {
        let field = VoxelField::new([rx, ry, rz], Aabb::unit_cube()).unwrap();
        prop_assert_eq!(field.grads().density.len(), field.density_params().len());
        prop_assert_eq!(field.grads().color.len(), field.color_params().len());
        prop_assert_eq!(field.color_params().len(), 3 * rx * ry * rz);
        let s = field.query(&Vector3::new(0.1, 0.2, 0.3));
        prop_assert!(s.density >= 0.0 && s.rgb.iter().all(|c| *c > 0.0 && *c < 1.0));
    }
}
