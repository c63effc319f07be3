use quadprior::image::Image;
use quadprior::metrics::{area_resample, loe, psnr, ssim, LOE_GRID};
use quadprior::synth::synthetic_image;

/// Gray 50x50 fixture with strictly increasing values.
fn ordered() -> Image<f64> {
    let n = LOE_GRID * LOE_GRID;
    Image::from_fn(LOE_GRID, LOE_GRID, 3, |x, y, _| {
        ((y * LOE_GRID + x) as f64 + 1.0) / (n as f64 + 1.0)
    })
    .unwrap()
}

/// Direct pair enumeration of the order-disagreement fraction.
fn loe_brute(e: &Image<f64>, r: &Image<f64>) -> f64 {
    let l = |img: &Image<f64>| -> Vec<f64> {
        (0..img.pixel_count())
            .map(|i| img.pixel(i).iter().cloned().fold(f64::MIN, f64::max))
            .collect()
    };
    let (le, lr) = (l(e), l(r));
    let n = le.len();
    let mut bad = 0usize;
    for p in 0..n {
        for q in 0..n {
            if (le[p] >= le[q]) != (lr[p] >= lr[q]) {
                bad += 1;
            }
        }
    }
    bad as f64 / (n * n) as f64
}

#[test]
fn loe_of_inverted_image_matches_enumeration() {
    let r = ordered();
    let e = r.map(|v| 1.0 - v).unwrap();
    let got = loe(&e, &r).unwrap();
    let brute = loe_brute(&e, &r);
    let n = (LOE_GRID * LOE_GRID) as f64;
    assert!((brute - (1.0 - 1.0 / n)).abs() < 1e-12);
    assert!((got - brute).abs() < 1e-12, "{got} vs {brute}");
}

#[test]
fn loe_ignores_monotone_remaps() {
    let r = ordered();
    assert_eq!(loe(&r, &r).unwrap(), 0.0);
    assert_eq!(loe(&r.map(|v| v.powf(0.5)).unwrap(), &r).unwrap(), 0.0);
}

#[test]
fn loe_resamples_larger_images() {
    // Off-grid sizes: the metric equals enumeration over the area-resampled
    // lightness planes.
    let r: Image<f64> = synthetic_image(80, 64, 3).unwrap();
    let e = r.map(|x| (1.0 - x) * x).unwrap();
    let plane = |img: &Image<f64>| -> Image<f64> {
        let l: Vec<f64> = (0..img.pixel_count())
            .map(|i| img.pixel(i).iter().cloned().fold(f64::MIN, f64::max))
            .collect();
        let d = area_resample(&l, img.width(), img.height(), LOE_GRID, LOE_GRID);
        Image::new(LOE_GRID, LOE_GRID, 1, d).unwrap()
    };
    let got = loe(&e, &r).unwrap();
    assert_eq!(got, loe_brute(&plane(&e), &plane(&r)));
    assert!(got > 0.0 && got < 1.0);
}

#[test]
fn psnr_and_ssim_identities() {
    let a: Image<f64> = synthetic_image(24, 24, 1).unwrap();
    assert_eq!(psnr(&a, &a).unwrap(), 99.0);
    assert_eq!(ssim(&a, &a).unwrap(), 1.0);
    let zeros = Image::<f64>::zeros(24, 24, 1).unwrap();
    let ones = Image::<f64>::filled(24, 24, 1, 1.0).unwrap();
    assert!(psnr(&zeros, &ones).unwrap().abs() < 1e-12);
    let c1 = 0.01f64.powi(2);
    assert!((ssim(&zeros, &ones).unwrap() - c1 / (1.0 + c1)).abs() < 1e-6);
    // A small uniform offset lands strictly between the two cases.
    let shifted = a.map(|v| v + 0.01).unwrap();
    let s = ssim(&a, &shifted).unwrap();
    assert!(s < 1.0 && s > c1 / (1.0 + c1));
}

#[test]
fn ssim_rejects_images_below_the_window() {
    let small = Image::<f64>::zeros(10, 10, 1).unwrap();
    assert!(ssim(&small, &small).is_err());
}
