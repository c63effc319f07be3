//! Self-checks shared by the `selftest` command and the acceptance tests.

use std::time::Instant;

use crate::bypass::ToyAe;
use crate::diffusion::{forward_sample, gaussian, loss_diff, reconstruct_z0, LatentBatch, NoiseSchedule};
use crate::error::Result;
use crate::image::Image;
use crate::metrics::{loe, psnr, ssim, SsimParams};
use crate::nn::{fd_audit, fd_audit_piecewise, GradAudit};
use crate::prior::{apply_color_model, compute_c, compute_h, compute_o, compute_wmap, tie_free, ColorModel};
use crate::rng::{derive_index, stream};
use crate::synth::synthetic_image;
use crate::toymodel::{ConvNet, ToyCondition};

/// Outcome of one named check.
#[derive(Clone, Debug, PartialEq)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

impl std::fmt::Display for Check {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let verdict = if self.passed { "PASS" } else { "FAIL" };
        write!(f, "{verdict} {} ({:.2}s): {}", self.name, self.seconds, self.detail)
    }
}

fn timed(name: &'static str, body: impl FnOnce() -> Result<(bool, String)>) -> Result<Check> {
    let start = Instant::now();
    let (passed, detail) = body()?;
    Ok(Check {
        name,
        passed,
        detail,
        seconds: start.elapsed().as_secs_f64(),
    })
}

/// Gains used by the invariance suite.
pub const GAINS: [f64; 4] = [0.1, 0.25, 0.5, 0.75];

/// Worst-case changes of the prior under global gains.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct InvarianceReport {
    pub h_rms: f64,
    pub c_rms: f64,
    pub w_rms: f64,
    pub o_mismatches: usize,
    pub masked_pixels: usize,
}

fn masked_rms(a: &Image<f64>, b: &Image<f64>, mask: &[bool]) -> f64 {
    let (mut sum, mut n) = (0.0, 0usize);
    for ((x, y), &m) in a.data().iter().zip(b.data()).zip(mask) {
        if m {
            sum += (x - y) * (x - y);
            n += 1;
        }
    }
    if n == 0 {
        0.0
    } else {
        (sum / n as f64).sqrt()
    }
}

/// Scales `img` by each of `gains` and compares H, C, W on the mask
/// `E^2 > 100 eps` (of both images) and O at tie-free pixels.
pub fn invariance_report(img: &Image<f64>, cm: &ColorModel, gains: &[f64]) -> Result<InvarianceReport> {
    let base = apply_color_model(img, cm)?;
    let (h0, c0, w0) = (
        compute_h(&base),
        compute_c(&base, cm.eps()),
        compute_wmap(&base, cm.eps(), cm.arg_clamp()),
    );
    let o0 = compute_o(img)?;
    let mut rep = InvarianceReport::default();
    for &k in gains {
        let dim = img.scale(k)?;
        let f = apply_color_model(&dim, cm)?;
        let floor = 100.0 * cm.eps();
        let mask: Vec<bool> = base
            .e
            .data()
            .iter()
            .zip(f.e.data())
            .map(|(a, b)| a * a > floor && b * b > floor)
            .collect();
        rep.masked_pixels += mask.iter().filter(|&&m| m).count();
        rep.h_rms = rep.h_rms.max(masked_rms(&h0, &compute_h(&f), &mask));
        rep.c_rms = rep.c_rms.max(masked_rms(&c0, &compute_c(&f, cm.eps()), &mask));
        rep.w_rms = rep
            .w_rms
            .max(masked_rms(&w0, &compute_wmap(&f, cm.eps(), cm.arg_clamp()), &mask));
        let o1 = compute_o(&dim)?;
        for i in 0..img.pixel_count() {
            if tie_free(img.pixel(i)) && o0.pixel(i) != o1.pixel(i) {
                rep.o_mismatches += 1;
            }
        }
    }
    Ok(rep)
}

/// Uniform random RGB image.
pub fn random_image(width: usize, height: usize, seed: u64) -> Result<Image<f64>> {
    use rand::Rng;
    let mut r = stream(seed, 0);
    let data = (0..width * height * 3).map(|_| r.random::<f64>()).collect();
    Image::new(width, height, 3, data)
}

/// Gain invariance over `count` random images and `count` synthetic scenes.
pub fn invariance_suite(count: usize, size: usize, seed: u64) -> Result<Check> {
    timed("illumination invariance", || {
        let cm = ColorModel::default();
        let mut worst = InvarianceReport::default();
        for i in 0..count as u64 {
            let s = derive_index(seed, i);
            for img in [random_image(size, size, s)?, synthetic_image(size, size, s)?] {
                let r = invariance_report(&img, &cm, &GAINS)?;
                worst.h_rms = worst.h_rms.max(r.h_rms);
                worst.c_rms = worst.c_rms.max(r.c_rms);
                worst.w_rms = worst.w_rms.max(r.w_rms);
                worst.o_mismatches += r.o_mismatches;
                worst.masked_pixels += r.masked_pixels;
            }
        }
        let passed = worst.h_rms < 1e-4 && worst.c_rms < 1e-4 && worst.w_rms < 1e-4 && worst.o_mismatches == 0;
        Ok((
            passed,
            format!(
                "{} images x {} gains, max rms H {:.2e} C {:.2e} W {:.2e}, O mismatches {}",
                2 * count,
                GAINS.len(),
                worst.h_rms,
                worst.c_rms,
                worst.w_rms,
                worst.o_mismatches
            ),
        ))
    })
}

/// `reconstruct_z0(forward_sample(z0, t, eps), eps, t) == z0` for every `t`.
pub fn round_trip_suite(count: usize, len: usize, seed: u64) -> Result<Check> {
    timed("diffusion round trip", || {
        let sched = NoiseSchedule::standard();
        let mut worst = 0.0f64;
        for i in 0..count as u64 {
            let mut r = stream(seed, i);
            let z0: Vec<f64> = gaussian(len, &mut r);
            let eps: Vec<f64> = gaussian(len, &mut r);
            for t in 1..=sched.steps() {
                let zt = forward_sample(&z0, t, &eps, &sched)?;
                let back = reconstruct_z0(&zt, &eps, t, &sched)?;
                for (a, b) in back.iter().zip(&z0) {
                    worst = worst.max((a - b).abs());
                }
            }
        }
        Ok((
            worst < 1e-5,
            format!("{count} tensors x {} steps, max abs error {worst:.2e}", sched.steps()),
        ))
    })
}

/// Finite-difference audit of the denoiser under the full diffusion loss.
pub fn toy_gradient_audit(widths: &[usize], size: usize, h: f64, seed: u64) -> Result<(GradAudit, usize)> {
    let mut net = ConvNet::<f64>::new_dense(widths, seed)?;
    let sched = NoiseSchedule::toy();
    let clean: Image<f64> = synthetic_image(size, size, seed)?;
    let prior = crate::prior::extract_prior(&clean.scale(0.3)?, &ColorModel::default(), None)?;
    let cond = ToyCondition::new(&prior, sched.steps());
    let z0 = crate::toymodel::to_diffusion_space(&clean);
    let eps = gaussian(z0.len(), &mut stream(seed, 1));
    let batch = LatentBatch::new(z0, sched.steps() / 2, eps, &sched)?;
    let input = cond.input(&batch.zt, batch.t)?;

    net.zero_grad();
    let out = net.forward(&input)?;
    let (_, grad) = loss_diff(&batch, &out.data, &sched)?;
    let grads = net.backward(&crate::nn::Tensor { data: grad, ..out })?.to_vec();
    let params = net.params().to_vec();
    let mut probe = net.clone();
    let audit = fd_audit_piecewise(&params, &grads, h, h * 1e-3, 1e-6, |p| {
        probe.set_params(p.to_vec())?;
        let out = probe.predict(&input)?;
        Ok((
            loss_diff(&batch, &out.data, &sched)?.0.total(),
            probe.relu_pattern(&input)?,
        ))
    })?;
    Ok((audit, params.len()))
}

/// Finite-difference audit of both decoder paths of a reduced autoencoder.
pub fn bypass_gradient_audit(seed: u64) -> Result<(GradAudit, usize)> {
    let mut ae = ToyAe::<f64>::new([3, 4, 5], seed)?;
    // Move off the zero init so every group has a nonzero gradient.
    let noise: Vec<f64> = gaussian(ae.param_count(), &mut stream(seed, 2));
    let params: Vec<f64> = ae.params().iter().zip(&noise).map(|(a, n)| a + 0.2 * n).collect();
    ae.set_params(params.clone())?;
    let clean: Image<f64> = synthetic_image(16, 16, seed)?;
    let dist = clean.scale(0.4)?;
    let mut probe = ae.clone();
    let (_, g) = ae.bypass_loss_grad(&clean, &dist, true)?;
    let bypass = fd_audit(&params, &g, 1e-5, 1e-6, |p| {
        probe.set_params(p.to_vec())?;
        Ok(probe.bypass_loss_grad(&clean, &dist, false)?.0)
    })?;
    let (_, g) = ae.plain_loss_grad(&clean)?;
    let plain = fd_audit(&params, &g, 1e-5, 1e-6, |p| {
        probe.set_params(p.to_vec())?;
        Ok(probe.plain_loss_grad(&clean)?.0)
    })?;
    let worst = if bypass.max_rel_err >= plain.max_rel_err {
        bypass
    } else {
        plain
    };
    Ok((worst, params.len()))
}

/// The default denoiser stack at reduced width (under 10k parameters).
pub const AUDIT_WIDTHS: [usize; 5] = [
    crate::toymodel::INPUT_CHANNELS,
    20,
    20,
    20,
    crate::toymodel::IMAGE_CHANNELS,
];

pub fn gradient_suite(seed: u64) -> Result<Check> {
    timed("gradient audit", || {
        let (toy, n_toy) = toy_gradient_audit(&AUDIT_WIDTHS, 8, 1e-3, seed)?;
        let (ae, n_ae) = bypass_gradient_audit(seed)?;
        let passed = n_toy <= 10_000 && toy.max_rel_err < 1e-3 && ae.max_rel_err < 1e-3;
        Ok((
            passed,
            format!(
                "denoiser {n_toy} params max rel err {:.2e} ({} steps refined at kinks); \
                 autoencoder {n_ae} params max rel err {:.2e}",
                toy.max_rel_err, toy.refined, ae.max_rel_err
            ),
        ))
    })
}

/// Largest absolute difference between plain and bypass decoding at init.
pub fn zero_init_gap(size: usize, seed: u64) -> Result<f64> {
    let ae = ToyAe::<f32>::new(ToyAe::<f32>::DEFAULT_WIDTHS, seed)?;
    let clean: Image<f32> = synthetic_image(size, size, seed)?;
    let dist = clean.scale(0.3)?;
    let z = ae.encode(&clean)?.z;
    let skips = ae.encode(&dist)?.skips;
    let plain = ae.decode_plain(&z)?;
    let bypass = ae.decode_bypass(&z, &skips)?;
    Ok(plain
        .data()
        .iter()
        .zip(bypass.data())
        .map(|(a, b)| (a - b).abs() as f64)
        .fold(0.0, f64::max))
}

pub fn zero_init_suite(seed: u64) -> Result<Check> {
    timed("zero-init bypass equivalence", || {
        let gap = zero_init_gap(64, seed)?;
        Ok((gap == 0.0, format!("max abs diff {gap:e}")))
    })
}

pub fn metric_suite() -> Result<Check> {
    timed("metric identities", || {
        let mut fails = Vec::new();
        let mut expect = |name: &str, got: f64, want: f64, tol: f64| {
            if (got - want).abs() > tol {
                fails.push(format!("{name}: {got} != {want}"));
            }
        };
        let a = synthetic_image::<f64>(32, 32, 5)?;
        let zeros = Image::<f64>::zeros(32, 32, 3)?;
        let ones = Image::<f64>::filled(32, 32, 3, 1.0)?;
        expect("psnr identical", psnr(&a, &a)?, 99.0, 0.0);
        let half = Image::<f64>::filled(32, 32, 3, 0.5)?;
        let shifted = Image::<f64>::filled(32, 32, 3, 0.6)?;
        expect("psnr mse 0.01", psnr(&half, &shifted)?, 20.0, 1e-6);
        expect("psnr zeros vs ones", psnr(&zeros, &ones)?, 0.0, 1e-12);
        expect("ssim identical", ssim(&a, &a)?, 1.0, 0.0);
        let c1 = (SsimParams::default().k1 * SsimParams::default().data_range).powi(2);
        expect("ssim constants", ssim(&zeros, &ones)?, c1 / (1.0 + c1), 1e-6);
        // Native grid and no ties, so resampling cannot reorder pixels.
        let g = random_image(crate::metrics::LOE_GRID, crate::metrics::LOE_GRID, 5)?;
        expect("loe identical", loe(&g, &g)?, 0.0, 0.0);
        expect("loe gamma", loe(&g.map(|v| v.sqrt())?, &g)?, 0.0, 0.0);
        expect("loe affine", loe(&g.map(|v| 0.2 + 0.5 * v)?, &g)?, 0.0, 0.0);
        Ok((
            fails.is_empty(),
            if fails.is_empty() {
                "all identities hold".into()
            } else {
                fails.join("; ")
            },
        ))
    })
}

/// Every deterministic check, in a fixed order.
pub fn selftest(seed: u64) -> Result<Vec<Check>> {
    Ok(vec![
        invariance_suite(20, 64, seed)?,
        round_trip_suite(100, 64, seed)?,
        gradient_suite(seed)?,
        zero_init_suite(seed)?,
        metric_suite()?,
    ])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn audit_instance_is_small() {
        let net = ConvNet::<f64>::new(&AUDIT_WIDTHS, 0).unwrap();
        assert!(net.param_count() <= 10_000);
        assert_eq!(AUDIT_WIDTHS.len(), ConvNet::<f64>::DEFAULT_WIDTHS.len());
    }

    #[test]
    fn zero_init_is_exact() {
        assert_eq!(zero_init_gap(32, 3).unwrap(), 0.0);
    }

    #[test]
    fn metric_suite_passes() {
        let c = metric_suite().unwrap();
        assert!(c.passed, "{c}");
    }

    #[test]
    fn invariance_holds_on_small_images() {
        let c = invariance_suite(2, 24, 1).unwrap();
        assert!(c.passed, "{c}");
    }

    #[test]
    fn round_trip_small() {
        let c = round_trip_suite(3, 16, 4).unwrap();
        assert!(c.passed, "{c}");
    }
}
