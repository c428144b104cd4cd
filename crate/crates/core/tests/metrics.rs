//! PSNR and SSIM against direct formula evaluation.

mod common;

use asrgan::fixtures::{room_image, synthetic_pairs};
use asrgan::imaging::Image;
use asrgan::metrics::{
    evaluate_pairs, psnr, ssim, summarize, tsv_report, Bicubic, MetricsRecord, RowOutcome, SSIM_C1,
};
use common::{naive_psnr, naive_ssim, random_image, rng};
use rand::seq::SliceRandom;
use rand::Rng;

fn map_pixels(img: &Image, mut f: impl FnMut([u8; 3]) -> [u8; 3]) -> Image {
    Image::from_fn(img.width(), img.height(), |x, y| f(img.pixel(x, y))).unwrap()
}

#[test]
fn off_by_one_everywhere_is_48_1308_db() {
    let a = random_image(16, 16, 1);
    let b = map_pixels(&a, |p| p.map(|v| if v == 255 { 254 } else { v + 1 }));
    let p = psnr(&a, &b).unwrap();
    assert!((p - 20.0 * 255f64.log10()).abs() < 1e-9);
    assert!((p - 48.1308).abs() < 1e-3);
}

#[test]
fn identical_images_give_sentinels() {
    let a = random_image(12, 12, 2);
    assert_eq!(psnr(&a, &a).unwrap(), f64::INFINITY);
    assert_eq!(ssim(&a, &a).unwrap(), 1.0);
}

#[test]
fn random_pairs_match_naive_oracles() {
    for seed in 0..5 {
        let a = random_image(32, 32, 10 + seed);
        let b = random_image(32, 32, 20 + seed);
        assert!((psnr(&a, &b).unwrap() - naive_psnr(&a, &b)).abs() < 1e-9);
        assert!((ssim(&a, &b).unwrap() - naive_ssim(&a, &b)).abs() < 1e-9);
    }
    let a = room_image(32, 32, 3).unwrap();
    let b = map_pixels(&a, |p| p.map(|v| v / 2 + 40));
    assert!((ssim(&a, &b).unwrap() - naive_ssim(&a, &b)).abs() < 1e-9);
}

#[test]
fn constant_images_follow_the_closed_form() {
    for (c, d) in [(10u8, 5u8), (100, 50), (0, 255), (200, 1)] {
        let a = Image::filled(16, 16, [c; 3]).unwrap();
        let b = Image::filled(16, 16, [c + d; 3]).unwrap();
        // Grey pixels have luminance equal to the level.
        let (l1, l2) = (c as f64 * (0.299 + 0.587 + 0.114), (c + d) as f64 * (0.299 + 0.587 + 0.114));
        let expected = (2.0 * l1 * l2 + SSIM_C1) / (l1 * l1 + l2 * l2 + SSIM_C1);
        assert!((ssim(&a, &b).unwrap() - expected).abs() < 1e-9, "c={c} d={d}");
    }
}

#[test]
fn ssim_is_symmetric() {
    for seed in 0..5 {
        let a = random_image(24, 20, 30 + seed);
        let b = map_pixels(&a, |p| p.map(|v| v.saturating_add(17)));
        assert!((ssim(&a, &b).unwrap() - ssim(&b, &a).unwrap()).abs() < 1e-12);
        let c = random_image(24, 20, 40 + seed);
        assert!((ssim(&a, &c).unwrap() - ssim(&c, &a).unwrap()).abs() < 1e-12);
    }
}

#[test]
fn psnr_decreases_with_noise_amplitude() {
    let base = room_image(32, 32, 4).unwrap();
    let mut last = f64::INFINITY;
    for amp in [1i32, 2, 4, 8, 16, 32] {
        let mut r = rng(5);
        let noisy = map_pixels(&base, |p| p.map(|v| (v as i32 + r.random_range(-amp..=amp)).clamp(0, 255) as u8));
        let value = psnr(&base, &noisy).unwrap();
        assert!(value < last, "amplitude {amp}: {value} !< {last}");
        last = value;
    }
}

#[test]
fn psnr_invariant_under_shared_pixel_permutation() {
    let a = random_image(16, 16, 6);
    let b = random_image(16, 16, 7);
    let mut order: Vec<usize> = (0..256).collect();
    order.shuffle(&mut rng(8));
    let permute = |img: &Image| {
        Image::from_fn(16, 16, |x, y| {
            let k = order[y * 16 + x];
            img.pixel(k % 16, k / 16)
        })
        .unwrap()
    };
    let (pa, pb) = (permute(&a), permute(&b));
    assert!((psnr(&a, &b).unwrap() - psnr(&pa, &pb).unwrap()).abs() < 1e-12);
}

#[test]
fn ssim_invariant_under_shared_flips_and_transpose() {
    let a = room_image(24, 24, 9).unwrap();
    let b = random_image(24, 24, 10);
    let reference = ssim(&a, &b).unwrap();
    type Move = fn(&Image, usize, usize) -> [u8; 3];
    let moves: [Move; 3] = [
        |img, x, y| img.pixel(img.width() - 1 - x, y),
        |img, x, y| img.pixel(x, img.height() - 1 - y),
        |img, x, y| img.pixel(y, x),
    ];
    for m in moves {
        let ta = Image::from_fn(24, 24, |x, y| m(&a, x, y)).unwrap();
        let tb = Image::from_fn(24, 24, |x, y| m(&b, x, y)).unwrap();
        assert!((ssim(&ta, &tb).unwrap() - reference).abs() < 1e-12);
    }
}

#[test]
fn dimension_mismatch_and_small_images_are_errors() {
    let a = random_image(16, 16, 1);
    let b = random_image(16, 12, 2);
    assert!(psnr(&a, &b).is_err());
    let tiny = random_image(8, 8, 3);
    assert!(ssim(&tiny, &tiny).is_err());
}

#[test]
fn set_mean_is_arithmetic_mean_of_rows() {
    let pairs = synthetic_pairs(3, 16, 11).unwrap();
    let eval = evaluate_pairs(&Bicubic, &pairs);
    let scores: Vec<MetricsRecord> = eval
        .rows
        .iter()
        .map(|r| match r {
            RowOutcome::Scored(m) => m.clone(),
            RowOutcome::Failed { reason, .. } => panic!("{reason}"),
        })
        .collect();
    let mean_p = scores.iter().map(|m| m.psnr).sum::<f64>() / 3.0;
    let mean_s = scores.iter().map(|m| m.ssim).sum::<f64>() / 3.0;
    assert!((eval.summary.mean_psnr - mean_p).abs() < 1e-12);
    assert!((eval.summary.mean_ssim - mean_s).abs() < 1e-12);
    for (m, pair) in scores.iter().zip(&pairs) {
        let up = asrgan::imaging::upscale_bicubic(&pair.lr).unwrap();
        assert_eq!(m.psnr, psnr(&up, &pair.hr).unwrap());
        assert_eq!(m.ssim, ssim(&up, &pair.hr).unwrap());
    }
}

#[test]
fn infinite_rows_are_excluded_and_counted() {
    let a = random_image(16, 16, 1);
    let b = random_image(16, 16, 2);
    let rows = vec![
        RowOutcome::Scored(MetricsRecord::compute("same", &a, &a).unwrap()),
        RowOutcome::Scored(MetricsRecord::compute("diff", &a, &b).unwrap()),
        RowOutcome::Failed {
            id: "broken".into(),
            reason: "decode".into(),
        },
    ];
    let s = summarize("model", &rows);
    assert_eq!((s.scored, s.failed, s.infinite_psnr), (2, 1, 1));
    assert_eq!(s.mean_psnr, psnr(&a, &b).unwrap());
    let report = tsv_report(
        &asrgan::metrics::Evaluation {
            rows,
            summary: s,
        },
        &[],
    );
    assert_eq!(report.lines().count(), 1 + 3 + 1);
    assert!(report.contains("same\tinf\t1.000000\tok"));
    assert!(report.contains("infinite_psnr_excluded=1"));
}
