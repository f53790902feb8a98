mod common;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use slowfast_core::gridworld::{RevisitAnnotation, RevisitMark};
use slowfast_core::metrics::*;
use slowfast_core::video::{from_u8, LatentVideo};
use slowfast_core::Error;

fn random_frame(r: &mut ChaCha8Rng, h: usize, w: usize) -> Vec<f32> {
    (0..3 * h * w).map(|_| from_u8(r.random())).collect()
}

/// Direct-summation PSNR.
fn naive_psnr(a: &[f32], b: &[f32]) -> f64 {
    let q = |v: f32| ((v as f64 + 1.0) * 127.5).round().clamp(0.0, 255.0);
    let mse: f64 = a.iter().zip(b).map(|(x, y)| (q(*x) - q(*y)).powi(2)).sum::<f64>() / a.len() as f64;
    if mse == 0.0 {
        99.0
    } else {
        (20.0 * 255f64.log10() - 10.0 * mse.log10()).min(99.0)
    }
}

/// Windowed SSIM with an explicit 2-D Gaussian and no separability.
fn naive_ssim(a: &[f32], b: &[f32], h: usize, w: usize) -> f64 {
    let q = |v: f32| ((v as f64 + 1.0) * 127.5).round().clamp(0.0, 255.0);
    let mut g2 = [[0.0f64; 11]; 11];
    let mut s = 0.0;
    for (i, row) in g2.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            let d = (i as f64 - 5.0).powi(2) + (j as f64 - 5.0).powi(2);
            *v = (-d / 4.5).exp();
            s += *v;
        }
    }
    let (c1, c2) = ((0.01f64 * 255.0).powi(2), (0.03f64 * 255.0).powi(2));
    let mut total = 0.0;
    let mut n = 0;
    for c in 0..3 {
        for y0 in 0..=h - 11 {
            for x0 in 0..=w - 11 {
                let (mut mx, mut my, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for i in 0..11 {
                    for j in 0..11 {
                        let k = g2[i][j] / s;
                        let idx = c * h * w + (y0 + i) * w + x0 + j;
                        let (x, y) = (q(a[idx]), q(b[idx]));
                        mx += k * x;
                        my += k * y;
                        sxx += k * x * x;
                        syy += k * y * y;
                        sxy += k * x * y;
                    }
                }
                let (vx, vy, cxy) = (sxx - mx * mx, syy - my * my, sxy - mx * my);
                total += ((2.0 * mx * my + c1) * (2.0 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
                n += 1;
            }
        }
    }
    total / n as f64
}

#[test]
fn psnr_and_ssim_match_direct_references() {
    let mut r = ChaCha8Rng::seed_from_u64(5);
    for i in 0..100 {
        let (h, w) = if i % 2 == 0 { (16, 16) } else { (13, 17) };
        let a = random_frame(&mut r, h, w);
        // Mix of nearly-equal and unrelated pairs.
        let b: Vec<f32> = if i % 3 == 0 {
            random_frame(&mut r, h, w)
        } else {
            a.iter().map(|v| (v + r.random_range(-0.1..0.1f32)).clamp(-1.0, 1.0)).collect()
        };
        assert!((psnr(&a, &b) - naive_psnr(&a, &b)).abs() < 1e-6, "pair {i}");
        assert!((ssim(&a, &b, h, w).unwrap() - naive_ssim(&a, &b, h, w)).abs() < 1e-6, "pair {i}");
    }
}

#[test]
fn psnr_fixed_points() {
    let a = vec![from_u8(100); 48];
    assert_eq!(psnr(&a, &a), 99.0);
    let b = vec![from_u8(116); 48];
    let expected = 20.0 * 255f64.log10() - 20.0 * 16f64.log10();
    assert!((psnr(&a, &b) - expected).abs() < 1e-9);
    assert!((psnr(&a, &b) - 24.05).abs() < 0.01);
}

#[test]
fn ssim_identity_and_small_frames() {
    let mut r = ChaCha8Rng::seed_from_u64(1);
    let a = random_frame(&mut r, 16, 16);
    assert!((ssim(&a, &a, 16, 16).unwrap() - 1.0).abs() < 1e-12);
    let small = random_frame(&mut r, 10, 10);
    assert!(matches!(ssim(&small, &small, 10, 10), Err(Error::Config(_))));
}

/// Textured scene whose pixels sit in a dark or bright band.
fn scene(r: &mut ChaCha8Rng, bright: bool) -> Vec<f32> {
    (0..3 * 256)
        .map(|_| from_u8(if bright { r.random_range(215..=255) } else { r.random_range(0..=40) }))
        .collect()
}

/// Scenes alternating between dark and bright at `k` evenly spaced splices.
fn spliced(k: usize, r: &mut ChaCha8Rng) -> LatentVideo {
    let mut v = LatentVideo::empty(16, 16);
    let mut bright = false;
    let mut current = scene(r, bright);
    let gap = 40 / (k + 1);
    for i in 0..40 {
        if k > 0 && i > 0 && i % gap == 0 && i / gap <= k {
            bright = !bright;
            current = scene(r, bright);
        }
        let f: Vec<f32> = current.iter().map(|x| (x + r.random_range(-0.01..0.01f32)).clamp(-1.0, 1.0)).collect();
        v.push_frame(&f);
    }
    v
}

#[test]
fn scene_cuts_count_splices_exactly() {
    let delta = calibrate_scuts_threshold(&common::small_world(), 0, 1000).unwrap();
    let mut r = ChaCha8Rng::seed_from_u64(9);
    for k in [0, 1, 2, 5] {
        let v = spliced(k, &mut r);
        assert_eq!(scene_cut_count(&v, delta), k, "k = {k}");
    }
}

#[test]
fn scene_cut_neighbours_merge() {
    let mut v = LatentVideo::empty(16, 16);
    let mut r = ChaCha8Rng::seed_from_u64(2);
    let frames: Vec<Vec<f32>> = (0..4).map(|_| random_frame(&mut r, 16, 16)).collect();
    // Content changes at 2, 3 and 5 (merge into one) and at 9.
    for idx in [0, 0, 1, 2, 2, 3, 3, 3, 3, 0, 0] {
        v.push_frame(&frames[idx]);
    }
    assert_eq!(scene_cuts(&v, 1.0), vec![2, 9]);
}

#[test]
fn calibration_is_deterministic_and_real_transitions_never_cut() {
    let w = common::small_world();
    let a = calibrate_scuts_threshold(&w, 3, 1000).unwrap();
    assert_eq!(a, calibrate_scuts_threshold(&w, 3, 1000).unwrap());
    let b = slowfast_core::gridworld::make_revisit_benchmark(&w, 1, 100, 4).unwrap();
    assert_eq!(scene_cut_count(&b.frames, a), 0);
}

fn annotation(groups: &[&[usize]]) -> RevisitAnnotation {
    RevisitAnnotation {
        marks: groups
            .iter()
            .map(|g| RevisitMark {
                pose: None,
                first: g[0],
                revisits: g[1..].to_vec(),
            })
            .collect(),
    }
}

/// Mean pairwise cosine of mean-centred features, written out directly.
fn naive_src(v: &LatentVideo, groups: &[&[usize]]) -> f64 {
    let feat = |i: usize| {
        let f = PooledPixels::default().features(v.frame(i), v.height(), v.width());
        let m = f.iter().sum::<f64>() / f.len() as f64;
        f.into_iter().map(|x| x - m).collect::<Vec<_>>()
    };
    let mut s = 0.0;
    let mut n = 0.0;
    for g in groups {
        for a in 0..g.len() {
            for b in a + 1..g.len() {
                let (x, y) = (feat(g[a]), feat(g[b]));
                let dot: f64 = x.iter().zip(&y).map(|(p, q)| p * q).sum();
                let nx = x.iter().map(|p| p * p).sum::<f64>().sqrt();
                let ny = y.iter().map(|p| p * p).sum::<f64>().sqrt();
                s += dot / (nx * ny);
                n += 1.0;
            }
        }
    }
    100.0 * s / n
}

#[test]
fn src_matches_oracle_and_is_scale_invariant() {
    let mut r = ChaCha8Rng::seed_from_u64(4);
    let mut v = LatentVideo::empty(16, 16);
    for _ in 0..10 {
        v.push_frame(&random_frame(&mut r, 16, 16));
    }
    let groups: [&[usize]; 2] = [&[0, 3, 7], &[1, 5, 9]];
    let ann = annotation(&groups);
    let got = scene_revisit_consistency(&v, &ann, &PooledPixels::default()).unwrap();
    assert!((got - naive_src(&v, &groups)).abs() < 1e-9);

    let scaled = |f: &[f32], h: usize, w: usize| -> Vec<f64> {
        PooledPixels::default().features(f, h, w).into_iter().map(|x| 7.0 * x).collect()
    };
    let s7 = scene_revisit_consistency(&v, &ann, &scaled).unwrap();
    assert!((s7 - got).abs() < 1e-9);
}

#[test]
fn src_extremes_and_errors() {
    let mut r = ChaCha8Rng::seed_from_u64(6);
    let mut v = LatentVideo::empty(16, 16);
    let f = random_frame(&mut r, 16, 16);
    for _ in 0..3 {
        v.push_frame(&f);
    }
    let ann = annotation(&[&[0, 1, 2]]);
    assert_eq!(scene_revisit_consistency(&v, &ann, &PooledPixels::default()).unwrap(), 100.0);

    // Orthogonal mean-free features for frames 0 and 1.
    let ortho = |frame: &[f32], _h: usize, _w: usize| -> Vec<f64> {
        if frame[0] == v.frame(0)[0] && frame == v.frame(0) {
            vec![1.0, -1.0, 0.0, 0.0]
        } else {
            vec![0.0, 0.0, 1.0, -1.0]
        }
    };
    let mut v2 = v.clone();
    v2.data_mut()[v.frame_len()] = 0.5;
    let ann2 = annotation(&[&[0, 1]]);
    let ortho2 = |frame: &[f32], h: usize, w: usize| {
        if frame == v2.frame(0) {
            ortho(frame, h, w)
        } else {
            vec![0.0, 0.0, 1.0, -1.0]
        }
    };
    assert!(scene_revisit_consistency(&v2, &ann2, &ortho2).unwrap().abs() < 1e-12);

    assert!(matches!(
        scene_revisit_consistency(&v, &RevisitAnnotation::default(), &PooledPixels::default()),
        Err(Error::Empty(_))
    ));
    assert!(scene_revisit_consistency(&v, &annotation(&[&[2, 1]]), &PooledPixels::default()).is_err());
    assert!(scene_revisit_consistency(&v, &annotation(&[&[0, 5]]), &PooledPixels::default()).is_err());
}

