mod common;

use common::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use relit_core::camera::Camera;
use relit_core::image::Image;
use relit_core::io::{load_bundle, save_bundle};
use relit_core::metrics::psnr;
use relit_core::render::{render, RenderOptions};
use relit_core::scene::*;
use relit_core::sh::{ShLighting, SH_C0};

fn two_blobs() -> SceneSpec {
    SceneSpec {
        blend: 4.0,
        density_bias: 0.0,
        blobs: vec![
            BlobSpec { center: [-0.3, 0.0, 0.1], radius: 0.4, sharpness: 20.0, albedo: [0.9, 0.2, 0.2] },
            BlobSpec { center: [0.35, 0.1, -0.1], radius: 0.3, sharpness: 30.0, albedo: [0.1, 0.8, 0.3] },
        ],
    }
}

fn empty() -> SyntheticScene {
    make_scene(&SceneSpec { density_bias: f64::NEG_INFINITY, ..SceneSpec::sphere(0.5, 40.0, SPHERE_ALBEDO) }).unwrap()
}

#[test]
fn sphere_fields() {
    let s = make_scene(&SceneSpec::sphere(0.5, 40.0, SPHERE_ALBEDO)).unwrap();
    assert!(s.density([0.0; 3]) > s.density([0.9, 0.0, 0.0]));
    let n = s.normal([0.5, 0.0, 0.0]).unwrap();
    assert!((n[0] - 1.0).abs() < 1e-6 && n[1].abs() < 1e-6 && n[2].abs() < 1e-6);
}

#[test]
fn smooth_max_dominates_each_blob() {
    let spec = two_blobs();
    let both = make_scene(&spec).unwrap();
    let singles: Vec<SyntheticScene> = spec
        .blobs
        .iter()
        .map(|b| make_scene(&SceneSpec { blobs: vec![b.clone()], ..spec.clone() }).unwrap())
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..1000 {
        let p = [0; 3].map(|_| rng.random_range(-1.0..1.0));
        let d = both.density(p);
        assert!(d >= 0.0);
        for s in &singles {
            assert!(d >= s.density(p));
        }
        assert!(both.albedo(p).iter().all(|a| (0.0..=1.0).contains(a)));
    }
}

#[test]
fn reference_render_basics() {
    let cam = ring(32)[0];
    let o = RenderOptions { background: [1.0, 0.0, 0.5], ..opts(64) };
    let bg = render_reference(&empty(), &cam, &key_light(), &o).unwrap();
    assert!(bg.rgb.data.chunks(3).all(|p| p == [1.0, 0.0, 0.5]));

    let dc = render_reference(&sphere(), &cam, &ShLighting::dc(1.0), &opts(64)).unwrap();
    let fg = threshold(&dc.weights_sum, 0.99);
    let mut count = 0;
    for (s, m) in dc.shading.data.iter().zip(&fg.data) {
        if *m > 0.0 {
            assert!((s - SH_C0).abs() < 1e-9);
            count += 1;
        }
    }
    assert!(count > 50);
    assert!(dc.weights_sum.data.iter().all(|&w| (0.0..=1.0 + 1e-6).contains(&w)));
    for p in 0..dc.rgb.pixel_count() {
        for k in 0..3 {
            assert!((dc.rgb.data[3 * p + k] - dc.albedo.data[3 * p + k] * dc.shading.data[p]).abs() < 1e-12);
        }
    }
}

/// Baked renders approach the reference as resolution grows, reaching 32 dB at R = 256.
#[test]
fn baking_converges_to_the_reference() {
    let scene = sphere();
    let l = key_light();
    let cam = Camera { yaw: 0.4, pitch: 0.2, radius: 5.0, ..Camera::default() }.with_size(64);
    let reference = render_reference(&scene, &cam, &l, &opts(96)).unwrap();
    let mut last = 0.0;
    for r in [64, 128, 256] {
        let baked = bake(&scene, &l, r);
        let out = render(&baked.dual, &baked.decoder, &cam, &opts(96)).unwrap();
        let p = psnr(&out.rgb, &reference.rgb, 1.0).unwrap();
        assert!(p > last, "R = {r}: {p} after {last}");
        last = p;
    }
    assert!(last >= 32.0);
}

#[test]
fn baking_is_deterministic_and_empty_stays_empty() {
    let a = bake(&sphere(), &key_light(), 32);
    let b = bake(&sphere(), &key_light(), 32);
    assert_eq!(a, b);
    let e = bake(&empty(), &key_light(), 32);
    let out = render(&e.dual, &e.decoder, &ring(24)[0], &opts(64)).unwrap();
    assert!(out.weights_sum.data.iter().all(|&w| w == 0.0));
}

#[test]
fn static_camera_gives_zero_flow() {
    let cam = ring(48)[0];
    let o = opts(64);
    let f = render_reference(&sphere(), &cam, &key_light(), &o).unwrap();
    let flow = ground_truth_flow(&f, &cam, &f, &cam, &o).unwrap();
    let fg = threshold(&f.weights_sum, 0.99);
    for (i, m) in fg.data.iter().enumerate() {
        if *m > 0.0 {
            assert!(flow.valid[i]);
            assert!(flow.flow[i][0].abs() < 1e-9 && flow.flow[i][1].abs() < 1e-9);
        }
    }
}

/// Camera translated sideways in front of a fronto-parallel plane at depth `d`:
/// flow is uniform with magnitude `f t / d`.
#[test]
fn translation_flow_matches_pinhole_formula() {
    let cam = Camera::default().with_size(32);
    let pose = cam.pose();
    let (d, t) = (2.0, 0.05);
    let surface: Vec<Option<f64>> = (0..32 * 32)
        .map(|i| {
            let ray = cam.ray(&pose, i % 32, i / 32);
            let cos = ray.direction.iter().zip(pose.axis(2)).map(|(a, b)| a * b).sum::<f64>();
            Some(d / cos)
        })
        .collect();
    let target = FrameGeometry { camera: cam, pose, surface: surface.clone() };
    let mut moved = pose;
    for k in 0..3 {
        moved.translation[k] += t * pose.axis(0)[k];
    }
    let source = FrameGeometry { camera: cam, pose: moved, surface };
    let flow = reprojection_flow(&target, &source);
    let want = -cam.focal_pixels() * t / d;
    let mut valid = 0;
    for (v, f) in flow.valid.iter().zip(&flow.flow) {
        if *v {
            valid += 1;
            assert!((f[0] - want).abs() < 1e-3 && f[1].abs() < 1e-3, "{f:?} vs {want}");
        }
    }
    assert!(valid >= 32 * 27);
}

#[test]
fn opposite_views_are_fully_disoccluded() {
    let o = opts(64);
    let a = Camera { radius: 5.0, ..Camera::default() }.with_size(32);
    let b = Camera { yaw: std::f64::consts::PI, ..a };
    let ra = render_reference(&sphere(), &a, &key_light(), &o).unwrap();
    let rb = render_reference(&sphere(), &b, &key_light(), &o).unwrap();
    let flow = ground_truth_flow(&rb, &b, &ra, &a, &o).unwrap();
    assert_eq!(flow.valid_count(), 0);
}

#[test]
fn warps_shift_images() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let img = Image::from_vec(8, 6, 3, (0..8 * 6 * 3).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap();
    let same = warp_backward(&img, &FlowField::zeros(8, 6), &img).unwrap();
    assert_eq!(same.image, img);

    let mut flow = FlowField::zeros(8, 6);
    for i in 0..48 {
        flow.flow[i] = [2.0, -1.0];
        flow.valid[i] = (i % 8) < 6 && i / 8 >= 1;
    }
    let dest = Image::filled(8, 6, 3, -1.0);
    let out = warp_backward(&img, &flow, &dest).unwrap();
    for y in 0..6 {
        for x in 0..8 {
            if flow.valid[y * 8 + x] {
                assert_eq!(out.image.pixel(x, y), img.pixel(x + 2, y - 1));
            } else {
                assert_eq!(out.image.pixel(x, y), dest.pixel(x, y));
                assert!(!out.valid[y * 8 + x]);
            }
        }
    }
}

fn sweep(frames: usize, size: usize) -> Vec<Camera> {
    (0..frames)
        .map(|i| Camera { yaw: 0.3 * i as f64 / (frames - 1) as f64, pitch: 0.1, radius: 5.0, ..Camera::default() }.with_size(size))
        .collect()
}

#[test]
fn slow_orbit_warps_onto_the_next_frame() {
    let b = generate_sequence(&sphere(), &sweep(5, 64), &key_light(), &opts(96)).unwrap();
    for i in 1..b.len() {
        let flow = &b.flows[i - 1];
        assert!(flow.valid_fraction() > 0.05);
        let warped = warp_backward(&b.frames[i - 1].rgb, flow, &b.frames[i].rgb).unwrap();
        let (mut se, mut n) = (0.0, 0);
        for p in 0..flow.valid.len() {
            if flow.valid[p] {
                for k in 0..3 {
                    se += (warped.image.data[3 * p + k] - b.frames[i].rgb.data[3 * p + k]).powi(2);
                }
                n += 3;
            }
        }
        assert!(se / n as f64 <= 1e-3);
    }
}

#[test]
fn sequences_carry_consistent_flows() {
    let cams = sweep(5, 48);
    let b = generate_sequence(&sphere(), &cams, &key_light(), &opts(64)).unwrap();
    assert_eq!(b.flows.len(), 4);
    assert_eq!(b.long_flows[0], b.flows[0]);
    assert_ne!(b.frames[0].rgb, b.frames[4].rgb);
    for (i, flow) in b.flows.iter().enumerate() {
        let fg = threshold(&b.frames[i + 1].weights_sum, 0.99);
        let fg_count = fg.data.iter().filter(|m| **m > 0.0).count();
        assert!(flow.valid_count() as f64 > 0.8 * fg_count as f64);
        assert!(flow.flow.iter().zip(&flow.valid).any(|(f, v)| *v && f[0].abs() > 0.1));
        // reprojection residual: the flowed source position maps back to the same surface point
        let (tgt, src) = (&cams[i + 1], &cams[i]);
        let geo = FrameGeometry::from_render(&b.frames[i + 1], tgt, &b.render_options).unwrap();
        for p in 0..flow.valid.len() {
            if !flow.valid[p] {
                continue;
            }
            let ray = tgt.ray(&geo.pose, p % 48, p / 48);
            let t = geo.surface[p].unwrap();
            let x = [0, 1, 2].map(|k| ray.origin[k] + t * ray.direction[k]);
            let (px, _) = src.project(&src.pose(), x).unwrap();
            let want = [(p % 48) as f64 + flow.flow[p][0], (p / 48) as f64 + flow.flow[p][1]];
            assert!((px[0] - want[0]).abs() <= 1e-3 && (px[1] - want[1]).abs() <= 1e-3);
        }
    }
    for f in &b.frames {
        for p in 0..f.rgb.pixel_count() {
            for k in 0..3 {
                assert!((f.rgb.data[3 * p + k] - f.albedo.data[3 * p + k] * f.shading.data[p]).abs() < 1e-12);
            }
        }
    }

    let still = generate_sequence(&sphere(), &[cams[0]; 3], &key_light(), &opts(64)).unwrap();
    assert_eq!(still.frames[0], still.frames[2]);
    assert!(still.flows.iter().flat_map(|f| &f.flow).all(|f| f[0].abs() < 1e-9 && f[1].abs() < 1e-9));
}

#[test]
fn bundles_round_trip_through_disk() {
    let mut b = generate_sequence(&sphere(), &sweep(3, 24), &key_light(), &opts(32)).unwrap();
    b.baked = Some(bake(&sphere(), &key_light(), 16));
    let dir = tempfile::tempdir().unwrap();
    save_bundle(&b, dir.path()).unwrap();
    let back = load_bundle(dir.path()).unwrap();
    assert_eq!(back.len(), 3);
    assert_eq!(back.cameras, b.cameras);
    assert_eq!(back.lighting, b.lighting);
    assert_eq!(back.baked, b.baked);
    for (x, y) in back.frames.iter().zip(&b.frames) {
        assert!(x.rgb.data.iter().zip(&y.rgb.data).all(|(a, b)| (a - b).abs() <= 1e-6 * (1.0 + b.abs())));
    }
    assert_eq!(back.flows.len(), 2);
    assert_eq!(back.flows[1].valid, b.flows[1].valid);
}
