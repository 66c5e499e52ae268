use std::f64::consts::{FRAC_PI_2, PI};

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use relit_core::sh::*;

/// Midpoint quadrature of `f` over the sphere on a `w x h` lat-long grid.
fn integrate<const N: usize>(w: usize, h: usize, f: impl Fn([f64; 3]) -> [f64; N]) -> [f64; N] {
    let mut acc = [0.0; N];
    for v in 0..h {
        let theta = PI * (v as f64 + 0.5) / h as f64;
        let solid = theta.sin() * (PI / h as f64) * (2.0 * PI / w as f64);
        for u in 0..w {
            let phi = 2.0 * PI * (u as f64 + 0.5) / w as f64;
            let d = [theta.sin() * phi.cos(), theta.sin() * phi.sin(), theta.cos()];
            for (a, x) in acc.iter_mut().zip(f(d)) {
                *a += x * solid;
            }
        }
    }
    acc
}

fn rotate_z(d: [f64; 3], angle: f64) -> [f64; 3] {
    let (s, c) = angle.sin_cos();
    [c * d[0] - s * d[1], s * d[0] + c * d[1], d[2]]
}

fn random_lighting(rng: &mut ChaCha8Rng) -> ShLighting {
    let mut c = [0.0; 9];
    c[0] = 1.0;
    for v in c.iter_mut().skip(1) {
        *v = rng.random_range(-0.3..0.3);
    }
    ShLighting::new(c).unwrap()
}

#[test]
fn basis_is_orthonormal_by_quadrature() {
    let gram = integrate::<81>(512, 256, |d| {
        let y = eval_sh_basis(d).unwrap();
        let mut out = [0.0; 81];
        for i in 0..9 {
            for j in 0..9 {
                out[i * 9 + j] = y[i] * y[j];
            }
        }
        out
    });
    for i in 0..9 {
        for j in 0..9 {
            let want = if i == j { 1.0 } else { 0.0 };
            assert!((gram[i * 9 + j] - want).abs() <= 1e-3, "({i},{j}) = {}", gram[i * 9 + j]);
        }
    }
}

#[test]
fn constant_map_projects_to_dc() {
    let l = project_envmap_to_sh(&EnvMap::constant(256, 128, 2.0).unwrap());
    assert!((l.coeffs[0] - 2.0 * SH_C0 * 4.0 * PI).abs() <= 1e-3);
    assert!((l.coeffs[0] - 7.0898).abs() <= 1e-3);
    assert!(l.coeffs[1..].iter().all(|c| c.abs() <= 1e-3));

    let unit = project_envmap_to_sh(&EnvMap::constant(4096, 2048, 1.0).unwrap());
    assert!((unit.coeffs[0] - 3.5449).abs() <= 1e-3);
    let renorm = renormalize_sh(&unit).unwrap();
    for (a, b) in renorm.coeffs.iter().zip(unit.coeffs) {
        assert!((a - b).abs() <= 1e-6, "{a} vs {b}");
    }
}

#[test]
fn projection_is_linear_in_radiance() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let env = EnvMap::from_fn(64, 32, |_| rng.random_range(0.0..3.0)).unwrap();
    let doubled = EnvMap::new(64, 32, env.texels().iter().map(|t| 2.0 * t).collect()).unwrap();
    let (a, b) = (project_envmap_to_sh(&env), project_envmap_to_sh(&doubled));
    for k in 0..9 {
        assert!((b.coeffs[k] - 2.0 * a.coeffs[k]).abs() <= 1e-12 * (1.0 + a.coeffs[k].abs()));
    }
}

#[test]
fn quarter_turn_moves_y11_into_y1m1() {
    let mut c = [0.0; 9];
    c[3] = 1.0;
    let rotated = rotate_sh_yaw(&ShLighting::new(c).unwrap(), FRAC_PI_2);
    // re-project the rotated basis function Y11(R^-1 d)
    let want = integrate::<9>(512, 256, |d| {
        let y11 = sh_basis(rotate_z(d, -FRAC_PI_2))[3];
        sh_basis(d).map(|y| y * y11)
    });
    for k in 0..9 {
        assert!((rotated.coeffs[k] - want[k]).abs() <= 1e-3, "slot {k}");
    }
    assert!((rotated.coeffs[1] - 1.0).abs() <= 1e-12);
}

#[test]
fn projection_commutes_with_rotation() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..3 {
        let l = random_lighting(&mut rng);
        let angle = rng.random_range(-PI..PI);
        let radiance = |d: [f64; 3]| l.shade(d) + 0.1;
        let env = EnvMap::from_fn(512, 256, radiance).unwrap();
        let turned = EnvMap::from_fn(512, 256, |d| radiance(rotate_z(d, -angle))).unwrap();
        let a = project_envmap_to_sh(&turned);
        let b = rotate_sh_yaw(&project_envmap_to_sh(&env), angle);
        for k in 0..9 {
            assert!((a.coeffs[k] - b.coeffs[k]).abs() <= 1e-3, "slot {k}: {} vs {}", a.coeffs[k], b.coeffs[k]);
        }
    }
}

#[test]
fn alignment_is_a_quarter_turn() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let l = random_lighting(&mut rng);
    let env = EnvMap::from_fn(512, 256, |d| l.shade(d)).unwrap();
    let aligned = align_envmap_convention(&env).unwrap();
    assert!((aligned.total() - env.total()).abs() <= 1e-9 * env.total());
    let a = project_envmap_to_sh(&aligned);
    let b = rotate_sh_yaw(&project_envmap_to_sh(&env), FRAC_PI_2);
    for k in 0..9 {
        assert!((a.coeffs[k] - b.coeffs[k]).abs() <= 1e-3);
    }
    let mut back = aligned;
    for _ in 0..3 {
        back = align_envmap_convention(&back).unwrap();
    }
    assert_eq!(back, env);
}

#[test]
fn shading_matches_direct_basis_dot() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let l = ShLighting::new([0; 9].map(|_| rng.random_range(-1.0..1.0))).unwrap();
    for _ in 0..10_000 {
        let v = [0; 3].map(|_| rng.random_range(-1.0f64..1.0));
        let n = v.map(|x| x / (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt());
        let (x, y, z) = (n[0], n[1], n[2]);
        let basis = [
            0.282_094_791_773_878_14,
            0.488_602_511_902_919_9 * y,
            0.488_602_511_902_919_9 * z,
            0.488_602_511_902_919_9 * x,
            1.092_548_430_592_079_2 * x * y,
            1.092_548_430_592_079_2 * y * z,
            0.315_391_565_252_520_05 * (3.0 * z * z - 1.0),
            1.092_548_430_592_079_2 * x * z,
            0.546_274_215_296_039_6 * (x * x - y * y),
        ];
        let mut dot = 0.0;
        for k in 0..9 {
            dot += l.coeffs[k] * basis[k];
        }
        assert!((shade_lambert(&l, n) - dot.max(0.0)).abs() <= 1e-12);
    }
}

#[test]
fn renormalized_mean_shading_is_one() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let l = renormalize_sh(&random_lighting(&mut rng)).unwrap();
    let [total, area] = integrate::<2>(2048, 1024, |d| [l.radiance(d), 1.0]);
    assert!((total / area - 1.0).abs() <= 1e-6, "{}", total / area);
}

fn coeffs() -> impl Strategy<Value = [f64; 9]> {
    (0.1f64..3.0, proptest::array::uniform8(-1.0f64..1.0)).prop_map(|(dc, rest)| {
        let mut c = [dc; 9];
        c[1..].copy_from_slice(&rest);
        c
    })
}

proptest! {
    #[test]
    fn rotation_preserves_norm(c in coeffs(), angle in -10.0f64..10.0) {
        let l = ShLighting::new(c).unwrap();
        prop_assert!((rotate_sh_yaw(&l, angle).norm() - l.norm()).abs() <= 1e-9);
    }

    #[test]
    fn rotation_keeps_zonal_terms(c in coeffs(), angle in -10.0f64..10.0) {
        let r = rotate_sh_yaw(&ShLighting::new(c).unwrap(), angle);
        prop_assert_eq!(r.coeffs[0], c[0]);
        prop_assert_eq!(r.coeffs[2], c[2]);
        prop_assert_eq!(r.coeffs[6], c[6]);
    }

    #[test]
    fn renormalize_is_idempotent_and_scale_invariant(c in coeffs(), s in 0.01f64..100.0) {
        let l = ShLighting::new(c).unwrap();
        let once = renormalize_sh(&l).unwrap();
        let twice = renormalize_sh(&once).unwrap();
        let scaled = renormalize_sh(&l.scaled(s)).unwrap();
        for k in 0..9 {
            prop_assert!((once.coeffs[k] - twice.coeffs[k]).abs() <= 1e-9);
            prop_assert!((once.coeffs[k] - scaled.coeffs[k]).abs() <= 1e-9 * (1.0 + once.coeffs[k].abs()));
        }
    }

    #[test]
    fn shading_is_positively_homogeneous(c in coeffs(), s in 0.01f64..100.0, d in [-1.0f64..1.0, -1.0f64..1.0, -1.0f64..1.0]) {
        let len = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
        prop_assume!(len > 1e-3);
        let n = d.map(|x| x / len);
        let l = ShLighting::new(c).unwrap();
        prop_assume!(l.radiance(n) >= 0.0);
        let a = shade_lambert(&l.scaled(s), n);
        let b = s * shade_lambert(&l, n);
        prop_assert!((a - b).abs() <= 1e-9 * (1.0 + b.abs()));
    }
}
