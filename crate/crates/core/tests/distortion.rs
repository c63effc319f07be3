mod common;

use quadprior::distortion::{add_gauss_poisson, apply_illumination, illumination_field, IlluminationSpec, NoiseSpec};
use quadprior::image::Image;
use quadprior::synth::synthetic_image;

fn field_spec() -> IlluminationSpec {
    IlluminationSpec {
        gain: 1.0,
        gamma: 1.0,
        field_sigma: 4.0,
        field_range: (0.3, 1.0),
        seed: 17,
    }
}

#[test]
fn golden_illumination_field() {
    let ones = Image::<f32>::filled(32, 32, 1, 1.0).unwrap();
    let lit = apply_illumination(&ones, &field_spec()).unwrap();
    common::check_image("illumination_field.qpt", &lit, 1e-6);
    let field: Image<f32> = illumination_field(32, 32, &field_spec()).unwrap().cast();
    assert_eq!(field, lit);
    assert!(lit.data().iter().all(|&v| (0.3..=1.0).contains(&v)));
}

#[test]
fn identity_spec_is_exact() {
    let img: Image<f64> = synthetic_image(16, 16, 2).unwrap();
    assert_eq!(apply_illumination(&img, &IlluminationSpec::default()).unwrap(), img);
}

#[test]
fn linear_in_gain_below_clamp() {
    let img: Image<f64> = synthetic_image(16, 16, 3).unwrap();
    let spec = |gain| IlluminationSpec {
        gain,
        ..Default::default()
    };
    let a = apply_illumination(&img, &spec(0.3)).unwrap();
    let b = apply_illumination(&img, &spec(0.6)).unwrap();
    for (x, y) in a.data().iter().zip(b.data()) {
        assert!((2.0 * x - y).abs() < 1e-15);
    }
}

#[test]
fn poisson_mean_matches_moment_oracle() {
    let img = Image::<f64>::filled(64, 64, 1, 0.5).unwrap();
    let spec = NoiseSpec {
        gauss_sigma: 0.0,
        poisson_peak: 100.0,
        seed: 5,
    };
    let noisy = add_gauss_poisson(&img, &spec).unwrap();
    let bound = 3.0 * (0.5f64 * 100.0).sqrt() / 100.0 / 4096f64.sqrt();
    assert!((noisy.mean() - 0.5).abs() < bound, "mean {}", noisy.mean());
    // Counts are integers, so every value is a multiple of 1/peak.
    assert!(noisy
        .data()
        .iter()
        .all(|v| ((v * 100.0) - (v * 100.0).round()).abs() < 1e-9));
}

#[test]
fn noise_is_reproducible_per_seed() {
    let img: Image<f32> = synthetic_image(16, 16, 4).unwrap();
    let spec = NoiseSpec {
        gauss_sigma: 0.02,
        poisson_peak: 200.0,
        seed: 9,
    };
    let a = add_gauss_poisson(&img, &spec).unwrap();
    assert_eq!(a, add_gauss_poisson(&img, &spec).unwrap());
    assert_ne!(a, add_gauss_poisson(&img, &NoiseSpec { seed: 10, ..spec }).unwrap());
}
