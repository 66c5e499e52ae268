mod common;

use common::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use relit_core::camera::Camera;
use relit_core::error::Error;
use relit_core::image::Image;
use relit_core::losses::perceptual_proxy;
use relit_core::metrics::*;
use relit_core::render::{PreparedScene, RenderOutput};
use relit_core::scene::{generate_sequence, render_reference, FlowField};
use relit_core::sh::{renormalize_sh, shade_lambert, ShLighting};

fn random_dc_dominant(rng: &mut ChaCha8Rng) -> ShLighting {
    let mut c = [0.0; 9];
    c[0] = rng.random_range(0.8..1.2);
    for v in c.iter_mut().skip(1) {
        *v = rng.random_range(-0.12..0.12);
    }
    ShLighting::new(c).unwrap()
}

/// Orthographic view of a unit sphere facing +z: analytic normals and mask.
fn analytic_sphere(size: usize) -> (Image, Image) {
    let mut normals = Image::new(size, size, 3);
    let mut mask = Image::new(size, size, 1);
    for y in 0..size {
        for x in 0..size {
            let u = 2.0 * (x as f64 + 0.5) / size as f64 - 1.0;
            let v = 1.0 - 2.0 * (y as f64 + 0.5) / size as f64;
            let r2 = u * u + v * v;
            if r2 < 1.0 {
                normals.pixel_mut(x, y).copy_from_slice(&[u, v, (1.0 - r2).sqrt()]);
                mask.data[y * size + x] = 1.0;
            }
        }
    }
    (normals, mask)
}

fn shade_image(l: &ShLighting, normals: &Image, mask: &Image) -> Image {
    let data = (0..mask.pixel_count())
        .map(|i| {
            if mask.data[i] > 0.0 {
                shade_lambert(l, [normals.data[3 * i], normals.data[3 * i + 1], normals.data[3 * i + 2]])
            } else {
                0.0
            }
        })
        .collect();
    Image::from_vec(mask.width, mask.height, 1, data).unwrap()
}

#[test]
fn lighting_estimation_recovers_analytic_lighting() {
    let (normals, mask) = analytic_sphere(192);
    let l = key_light();
    let s = shade_image(&l, &normals, &mask);
    let est = estimate_lighting(&s, &normals, &mask).unwrap();
    assert!(est.distance(&l) <= 1e-3, "{}", est.distance(&l));

    let doubled = Image::from_vec(192, 192, 1, s.data.iter().map(|v| 2.0 * v).collect()).unwrap();
    let est2 = estimate_lighting(&doubled, &normals, &mask).unwrap();
    assert!(est2.distance(&est.scaled(2.0)) <= 1e-3);
}

#[test]
fn degenerate_normals_are_rejected() {
    let s = Image::filled(16, 16, 1, 0.5);
    let mut normals = Image::new(16, 16, 3);
    for p in normals.data.chunks_mut(3) {
        p.copy_from_slice(&[0.0, 0.0, 1.0]);
    }
    let mask = Image::filled(16, 16, 1, 1.0);
    assert!(matches!(estimate_lighting(&s, &normals, &mask), Err(Error::RankDeficient { .. })));
    let none = Image::new(16, 16, 1);
    assert!(matches!(estimate_lighting(&s, &normals, &none), Err(Error::RankDeficient { .. })));
}

#[test]
fn lighting_error_properties() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let (a, b) = (random_dc_dominant(&mut rng), random_dc_dominant(&mut rng));
    assert_eq!(lighting_error(&a, &a).unwrap(), 0.0);
    assert_eq!(lighting_error(&a, &b).unwrap(), lighting_error(&b, &a).unwrap());
    assert!(lighting_error(&a, &a.scaled(3.7)).unwrap() < 1e-12);
    assert_eq!(lighting_instability(&[a]).unwrap(), 0.0);
    assert_eq!(lighting_instability(&[a, a, a]).unwrap(), 0.0);
    let d = renormalize_sh(&a).unwrap().distance(&renormalize_sh(&b).unwrap());
    assert!((lighting_instability(&[a, b, a, b]).unwrap() - d).abs() < 1e-12);
}

fn noisy(img: &Image, sd: f64, seed: u64) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = Normal::new(0.0, sd).unwrap();
    Image::from_vec(img.width, img.height, img.channels, img.data.iter().map(|v| v + n.sample(&mut rng)).collect()).unwrap()
}

#[test]
fn warping_error_measures_added_noise() {
    let cams: Vec<Camera> = (0..2).map(|i| Camera { yaw: 0.05 * i as f64, radius: 5.0, ..Camera::default() }.with_size(64)).collect();
    let b = generate_sequence(&sphere(), &cams, &key_light(), &opts(64)).unwrap();
    let frames: Vec<Image> = b.frames.iter().map(|f| f.rgb.clone()).collect();
    let clean = warping_error(&frames, &b.flows, None).unwrap();
    assert!(clean <= 1e-3);
    let same = vec![frames[0].clone(), frames[0].clone()];
    let mut all = FlowField::zeros(64, 64);
    all.valid.fill(true);
    assert_eq!(warping_error(&same, &[all.clone()], None).unwrap(), 0.0);

    let sigma = 0.05;
    let pushed = warping_error(&[frames[0].clone(), noisy(&frames[1], sigma, 1)], &b.flows, None).unwrap();
    let rise = pushed - clean;
    assert!((rise / (sigma * sigma) - 1.0).abs() <= 0.2, "{rise}");
}

#[test]
fn adjacent_proxy_is_monotone_in_noise() {
    let base = render_reference(&sphere(), &ring(32)[0], &key_light(), &opts(32)).unwrap().rgb;
    let seq = vec![base.clone(); 4];
    assert_eq!(adjacent_proxy(&seq).unwrap(), 0.0);
    let mut last = 0.0;
    for sigma in [0.01, 0.05, 0.1] {
        let frames: Vec<Image> = (0..4).map(|i| noisy(&base, sigma, i)).collect();
        let d = adjacent_proxy(&frames).unwrap();
        let pairwise = (0..3).map(|i| perceptual_proxy(&frames[i], &frames[i + 1]).unwrap()).sum::<f64>() / 3.0;
        assert!((d - pairwise).abs() < 1e-12);
        assert!(d > last);
        last = d;
    }
}

#[test]
fn timing_harness_follows_the_clock() {
    let mut calls = 0;
    let stats = timing_harness(
        || {
            calls += 1;
            std::thread::sleep(std::time::Duration::from_millis(1));
            Ok(())
        },
        200,
        5,
    )
    .unwrap();
    assert_eq!(calls, 205);
    assert_eq!(stats.frames, 200);
    assert!((stats.fps - 1.0 / stats.mean_seconds).abs() < 1e-9);
    assert!((stats.fps / 1000.0 - 1.0).abs() <= 0.1, "{} fps", stats.fps);
    assert!(stats.median_seconds <= stats.p95_seconds);
}

#[test]
fn relit_baked_planes_round_trip_through_estimation() {
    let baked = bake(&hard_sphere(), &key_light(), 128);
    let scene = PreparedScene::new(&baked.dual, &baked.decoder).unwrap();
    let cam = ring(192)[0];
    let mut rng = ChaCha8Rng::seed_from_u64(20);
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let l = random_dc_dominant(&mut rng);
        let out = scene.render_relit(&cam, &l, &opts(64)).unwrap();
        let mask = threshold(&out.weights_sum, FOREGROUND_MASK);
        let est = estimate_lighting(&out.shading, out.normals.as_ref().unwrap(), &mask).unwrap();
        worst = worst.max(lighting_error(&l, &est).unwrap());
    }
    assert!(worst <= 0.01, "worst lighting error {worst}");
}

/// Static reference frames with every frame's shading driven by `L + sigma g_i`.
fn flicker(base: &RenderOutput, l: &ShLighting, sigma: f64) -> Vec<RenderOutput> {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let normals = base.normals.as_ref().unwrap();
    let mask = threshold(&base.weights_sum, 0.0);
    (0..4)
        .map(|_| {
            let mut c = l.coeffs;
            for v in c.iter_mut() {
                *v += sigma * rng.random_range(-1.0..1.0);
            }
            let li = ShLighting::new(c).unwrap();
            let mut out = base.clone();
            out.shading = shade_image(&li, normals, &mask);
            for p in 0..out.rgb.pixel_count() {
                for k in 0..3 {
                    let w = base.weights_sum.data[p];
                    out.rgb.data[3 * p + k] = out.albedo.data[3 * p + k] * out.shading.data[p] + (1.0 - w) * 1.0;
                }
            }
            out
        })
        .collect()
}

#[test]
fn static_reference_sequence_floors_and_flicker_monotonicity() {
    let l = fill_light();
    let cam = ring(192)[1];
    let base = render_reference(&hard_sphere(), &cam, &l, &opts(64)).unwrap();
    let frames = vec![base.clone(); 4];
    let refs: Vec<Image> = frames.iter().map(|f| f.rgb.clone()).collect();
    let mut still = FlowField::zeros(192, 192);
    still.valid.fill(true);
    let flows = vec![still; 3];
    let r = evaluate_sequence(&frames, &refs, &l, &flows, 1.0).unwrap();
    assert!(r.lighting_error <= 1e-3, "{}", r.lighting_error);
    assert!(r.lighting_instability <= 1e-3);
    assert!(r.warping_error <= 1e-3);
    assert!(r.adjacent_proxy <= 1e-3);
    assert_eq!(r.psnr, PSNR_CAP);
    assert_eq!(r.rows.len(), 4);

    let mut last = [r.lighting_error, r.lighting_instability, r.warping_error, r.adjacent_proxy];
    for sigma in [0.01, 0.05, 0.1] {
        let seq = flicker(&base, &l, sigma);
        let m = evaluate_sequence(&seq, &refs, &l, &flows, 1.0).unwrap();
        let now = [m.lighting_error, m.lighting_instability, m.warping_error, m.adjacent_proxy];
        for k in 0..4 {
            assert!(now[k] >= last[k], "metric {k} at sigma {sigma}: {} < {}", now[k], last[k]);
        }
        last = now;
    }
    let dir = tempfile::tempdir().unwrap();
    r.write(dir.path()).unwrap();
    assert_eq!(std::fs::read_to_string(dir.path().join("metrics.csv")).unwrap().lines().count(), 5);
}
