use proptest::prelude::*;

use quadprior::diffusion::{forward_sample, loss_diff, reconstruct_z0, LatentBatch, NoiseSchedule};
use quadprior::distortion::sample_poisson;
use quadprior::image::{conv_separable, decode_qpt, encode_qpt, gaussian_kernel, Image};
use quadprior::rng::stream;

fn image(w: usize, h: usize, c: usize) -> impl Strategy<Value = Image<f64>> {
    prop::collection::vec(-2.0f64..2.0, w * h * c).prop_map(move |d| Image::new(w, h, c, d).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn conv_is_linear(a in image(9, 7, 2), b in image(9, 7, 2), s in -3.0f64..3.0, sigma in 0.5f64..2.5, order in 0u8..2) {
        let k = gaussian_kernel(sigma, order).unwrap();
        let g = gaussian_kernel(sigma, 0).unwrap();
        let mix = Image::new(9, 7, 2, a.data().iter().zip(b.data()).map(|(x, y)| x + s * y).collect()).unwrap();
        let lhs = conv_separable(&mix, &k, &g);
        let (ca, cb) = (conv_separable(&a, &k, &g), conv_separable(&b, &k, &g));
        for ((l, x), y) in lhs.data().iter().zip(ca.data()).zip(cb.data()) {
            prop_assert!((l - (x + s * y)).abs() < 1e-12);
        }
    }

    #[test]
    fn diffusion_round_trip(z0 in prop::collection::vec(-3.0f64..3.0, 1..40), seed in any::<u64>(), t in 1usize..=1000) {
        let sched = NoiseSchedule::standard();
        let eps: Vec<f64> = {
            use rand_distr::{Distribution, StandardNormal};
            let mut r = stream(seed, 0);
            (0..z0.len()).map(|_| StandardNormal.sample(&mut r)).collect()
        };
        let zt = forward_sample(&z0, t, &eps, &sched).unwrap();
        let back = reconstruct_z0(&zt, &eps, t, &sched).unwrap();
        for (a, b) in back.iter().zip(&z0) {
            prop_assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn combined_loss_dominates_parts(z0 in prop::collection::vec(-1.0f64..1.0, 1..30), hat_scale in -2.0f64..2.0, seed in any::<u64>()) {
        let sched = NoiseSchedule::toy();
        let batch = LatentBatch::draw(z0.clone(), &sched, seed).unwrap();
        let eps_hat: Vec<f64> = batch.eps.iter().map(|e| hat_scale * e + 0.1).collect();
        let (loss, grad) = loss_diff(&batch, &eps_hat, &sched).unwrap();
        prop_assert!(loss.noise >= 0.0 && loss.z0 >= 0.0);
        prop_assert!(loss.total() >= loss.noise.max(loss.z0));
        prop_assert_eq!(grad.len(), z0.len());
    }

    #[test]
    fn qpt_round_trip(w in 1usize..6, h in 1usize..6, c in prop::sample::select(vec![1usize, 3, 6]), seed in any::<u64>()) {
        use rand::Rng;
        let mut r = stream(seed, 0);
        let data: Vec<f32> = (0..w * h * c).map(|_| r.random::<f32>() * 4.0 - 2.0).collect();
        let img = Image::new(w, h, c, data).unwrap();
        let back: Image<f32> = decode_qpt(&encode_qpt(&img), std::path::Path::new("mem")).unwrap();
        prop_assert_eq!(back, img);
    }
}

#[test]
fn poisson_moments_on_both_sides_of_the_crossover() {
    for lambda in [3.0, 80.0] {
        let mut r = stream(11, lambda as u64);
        let n = 20_000;
        let draws: Vec<f64> = (0..n).map(|_| sample_poisson(lambda, &mut r)).collect();
        let mean = draws.iter().sum::<f64>() / n as f64;
        let var = draws.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / n as f64;
        let se = (lambda / n as f64).sqrt();
        assert!((mean - lambda).abs() < 4.0 * se, "lambda {lambda}: mean {mean}");
        assert!((var / lambda - 1.0).abs() < 0.05, "lambda {lambda}: var {var}");
    }
}
