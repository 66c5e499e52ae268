use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use relit_core::error::Error;
use relit_core::io::{decode_triplane, encode_triplane, load_triplane, save_triplane};
use relit_core::triplane::{Init, TriPlane, PLANE_AXES};

fn gaussian(r: usize, c: usize, seed: u64) -> TriPlane {
    TriPlane::new(r, c, Init::Gaussian { mean: 0.0, sd: 1.0, seed }).unwrap()
}

/// Dense tent-weighted sum over every texel of every plane.
fn brute_force(tp: &TriPlane, p: [f64; 3]) -> Vec<f64> {
    let r = tp.resolution();
    let c = tp.channels();
    let coord = |x: f64| ((x.clamp(-1.0, 1.0) + 1.0) * r as f64 / 2.0 - 0.5).clamp(0.0, (r - 1) as f64);
    let tent = |d: f64| (1.0 - d.abs()).max(0.0);
    let mut out = vec![0.0; c];
    for (plane, &(a, b)) in PLANE_AXES.iter().enumerate() {
        let (u, v) = (coord(p[a]), coord(p[b]));
        for row in 0..r {
            for col in 0..r {
                let w = tent(u - col as f64) * tent(v - row as f64) / 3.0;
                if w == 0.0 {
                    continue;
                }
                for (ch, o) in out.iter_mut().enumerate() {
                    *o += w * tp.data()[tp.index(plane, row, col, ch)] as f64;
                }
            }
        }
    }
    out
}

#[test]
fn sampling_matches_brute_force_interpolation() {
    let tp = gaussian(9, 3, 21);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..100 {
        let p = [0; 3].map(|_| rng.random_range(-1.2..1.2));
        let got = tp.sample(p).unwrap();
        for (g, w) in got.as_slice().iter().zip(brute_force(&tp, p)) {
            assert!((g - w).abs() <= 1e-6, "{p:?}: {g} vs {w}");
        }
    }
}

#[test]
fn texel_centers_are_exact_means() {
    let tp = gaussian(8, 2, 3);
    let (i, j, k) = (1, 6, 3);
    let p = [tp.texel_center(i), tp.texel_center(j), tp.texel_center(k)];
    let got = tp.sample(p).unwrap();
    for ch in 0..2 {
        let want = (tp.data()[tp.index(0, j, i, ch)] as f64
            + tp.data()[tp.index(1, k, i, ch)] as f64
            + tp.data()[tp.index(2, k, j, ch)] as f64)
            / 3.0;
        assert!((got.as_slice()[ch] - want).abs() < 1e-12);
    }
}

#[test]
fn constant_planes_sample_to_constant() {
    let tp = TriPlane::new(4, 2, Init::Constant { value: 5.0 }).unwrap();
    for p in [[0.0; 3], [0.9, -0.3, 0.2], [3.0, -7.0, 0.5]] {
        assert!(tp.sample(p).unwrap().as_slice().iter().all(|v| (v - 5.0).abs() < 1e-12));
    }
}

#[test]
fn residual_round_trip() {
    let tp = gaussian(8, 3, 1);
    let r = gaussian(8, 3, 2);
    let back = tp.add_residual(&r).unwrap().linear_combination(1.0, &r, -1.0).unwrap();
    for (a, b) in back.data().iter().zip(tp.data()) {
        assert!((a - b).abs() <= 1e-6);
    }
    let one = TriPlane::new(4, 1, Init::Constant { value: 1.0 }).unwrap();
    let two = TriPlane::new(4, 1, Init::Constant { value: 2.0 }).unwrap();
    assert!(one.add_residual(&two).unwrap().data().iter().all(|&v| v == 3.0));
}

#[test]
fn file_errors_are_distinct() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("a.rtpl");
    let tp = gaussian(6, 2, 8);
    save_triplane(&tp, &path).unwrap();
    assert_eq!(load_triplane(&path).unwrap(), tp);

    let mut bytes = std::fs::read(&path).unwrap();
    bytes[0] = b'X';
    std::fs::write(&path, &bytes).unwrap();
    assert!(matches!(load_triplane(&path), Err(Error::BadMagic { .. })));

    let bytes = encode_triplane(&tp).unwrap();
    assert!(matches!(decode_triplane(&bytes[..bytes.len() - 4]), Err(Error::TruncatedPayload { .. })));
    assert!(load_triplane(dir.path().join("missing.rtpl")).is_err());
}

fn point() -> impl Strategy<Value = [f64; 3]> {
    [-1.0f64..1.0, -1.0f64..1.0, -1.0f64..1.0]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn sampling_is_linear(seed in 0u64..1000, a in -3.0f32..3.0, b in -3.0f32..3.0, p in point()) {
        let t1 = gaussian(6, 2, seed);
        let t2 = gaussian(6, 2, seed + 1);
        let mix = t1.linear_combination(a, &t2, b).unwrap();
        let s = mix.sample(p).unwrap();
        let s1 = t1.sample(p).unwrap();
        let s2 = t2.sample(p).unwrap();
        for ch in 0..2 {
            let want = a as f64 * s1.as_slice()[ch] + b as f64 * s2.as_slice()[ch];
            prop_assert!((s.as_slice()[ch] - want).abs() <= 1e-5 * (1.0 + want.abs()));
        }
    }

    #[test]
    fn outside_points_clamp(seed in 0u64..1000, p in [-4.0f64..4.0, -4.0f64..4.0, -4.0f64..4.0]) {
        let tp = gaussian(5, 3, seed);
        let clamped = p.map(|v| v.clamp(-1.0, 1.0));
        prop_assert_eq!(tp.sample(p).unwrap(), tp.sample(clamped).unwrap());
    }

    #[test]
    fn file_round_trip_is_bitwise(seed in 0u64..1000, r in 2usize..10, c in 1usize..5) {
        let tp = gaussian(r, c, seed);
        let bytes = encode_triplane(&tp).unwrap();
        prop_assert_eq!(bytes.len(), 16 + 3 * r * r * c * 4);
        let (back, _) = decode_triplane(&bytes).unwrap();
        prop_assert!(back.data().iter().zip(tp.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }
}

/// Central differences of `<u, sample(p)>` against the analytic texel and
/// point gradients, over 1000 random instances.
#[test]
fn sample_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let h = 1e-4;
    let rel = |a: f64, b: f64| (a - b).abs() / a.abs().max(b.abs()).max(1e-2);
    let mut worst: f64 = 0.0;
    for case in 0..1000 {
        let r = rng.random_range(3..12);
        let c = rng.random_range(1..4);
        let tp = gaussian(r, c, case);
        let u: Vec<f64> = (0..c).map(|_| rng.random_range(-1.0..1.0)).collect();
        let cell = 2.0 / r as f64;
        // keep away from texel-center kinks so the interpolant is smooth within h
        let p = [0; 3].map(|_| {
            let lo = -1.0 + cell / 2.0;
            let i = rng.random_range(0..r - 1) as f64;
            lo + cell * (i + rng.random_range(0.05..0.95))
        });
        let f = |tp: &TriPlane, p: [f64; 3]| -> f64 {
            tp.sample(p).unwrap().as_slice().iter().zip(&u).map(|(a, b)| a * b).sum()
        };
        let g = tp.sample_grad(p, &u).unwrap();
        for axis in 0..3 {
            let (mut hi, mut lo) = (p, p);
            hi[axis] += h;
            lo[axis] -= h;
            let fd = (f(&tp, hi) - f(&tp, lo)) / (2.0 * h);
            worst = worst.max(rel(fd, g.point[axis]));
        }
        let (idx, _) = g.texels[rng.random_range(0..g.texels.len())];
        let total: f64 = g.texels.iter().filter(|t| t.0 == idx).map(|t| t.1).sum();
        let step = 1.0 / 64.0;
        let mut plus = tp.clone();
        plus.data_mut()[idx] += step as f32;
        let mut minus = tp.clone();
        minus.data_mut()[idx] -= step as f32;
        let fd = (f(&plus, p) - f(&minus, p)) / (2.0 * step);
        worst = worst.max(rel(fd, total));
    }
    assert!(worst <= 1e-3, "worst relative error {worst}");
}
