//! Full-reference quality metrics: PSNR, SSIM and lightness-order error.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::scalar::Scalar;

pub const PSNR_CAP_DB: f64 = 99.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub psnr: f64,
    pub ssim: f64,
    pub loe: f64,
}

fn check_shapes<T: Scalar>(a: &Image<T>, b: &Image<T>) -> Result<()> {
    if !a.same_shape(b) {
        return Err(Error::invalid(format!(
            "image shapes differ: {}x{}x{} vs {}x{}x{}",
            a.width(),
            a.height(),
            a.channels(),
            b.width(),
            b.height(),
            b.channels()
        )));
    }
    Ok(())
}

/// `10 log10(1 / MSE)` for unit peak, capped at 99 dB.
pub fn psnr<T: Scalar>(a: &Image<T>, b: &Image<T>) -> Result<f64> {
    check_shapes(a, b)?;
    let mse = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| (x.f64() - y.f64()).powi(2))
        .sum::<f64>()
        / a.data().len() as f64;
    if mse < 1e-10 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP_DB))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SsimParams {
    pub window: usize,
    pub sigma: f64,
    pub k1: f64,
    pub k2: f64,
    pub data_range: f64,
}

impl Default for SsimParams {
    fn default() -> Self {
        SsimParams {
            window: 11,
            sigma: 1.5,
            k1: 0.01,
            k2: 0.03,
            data_range: 1.0,
        }
    }
}

impl SsimParams {
    fn taps(&self) -> Vec<f64> {
        let r = (self.window / 2) as f64;
        let raw: Vec<f64> = (0..self.window)
            .map(|i| {
                let x = i as f64 - r;
                (-x * x / (2.0 * self.sigma * self.sigma)).exp()
            })
            .collect();
        let s: f64 = raw.iter().sum();
        raw.into_iter().map(|v| v / s).collect()
    }
}

/// Gaussian-weighted means over every full window position ("valid" region).
fn local_mean(plane: &[f64], w: usize, h: usize, taps: &[f64]) -> Vec<f64> {
    let k = taps.len();
    let (ow, oh) = (w - k + 1, h - k + 1);
    let mut rows = vec![0.0; ow * h];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = taps.iter().enumerate().map(|(i, t)| t * plane[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = taps.iter().enumerate().map(|(i, t)| t * rows[(y + i) * ow + x]).sum();
        }
    }
    out
}

/// Mean local SSIM; multi-channel images average their per-channel scores.
pub fn ssim_with<T: Scalar>(a: &Image<T>, b: &Image<T>, params: &SsimParams) -> Result<f64> {
    check_shapes(a, b)?;
    if params.window == 0 || params.window.is_multiple_of(2) {
        return Err(Error::invalid(format!(
            "SSIM window must be odd, got {}",
            params.window
        )));
    }
    let (w, h) = (a.width(), a.height());
    if w < params.window || h < params.window {
        return Err(Error::invalid(format!(
            "image {w}x{h} is smaller than the {0}x{0} SSIM window",
            params.window
        )));
    }
    let taps = params.taps();
    let c1 = (params.k1 * params.data_range).powi(2);
    let c2 = (params.k2 * params.data_range).powi(2);
    let mut total = 0.0;
    for c in 0..a.channels() {
        let pa: Vec<f64> = a.channel(c)?.data().iter().map(|v| v.f64()).collect();
        let pb: Vec<f64> = b.channel(c)?.data().iter().map(|v| v.f64()).collect();
        let prod = |x: &[f64], y: &[f64]| -> Vec<f64> { x.iter().zip(y).map(|(p, q)| p * q).collect() };
        let mu_a = local_mean(&pa, w, h, &taps);
        let mu_b = local_mean(&pb, w, h, &taps);
        let e_aa = local_mean(&prod(&pa, &pa), w, h, &taps);
        let e_bb = local_mean(&prod(&pb, &pb), w, h, &taps);
        let e_ab = local_mean(&prod(&pa, &pb), w, h, &taps);
        let n = mu_a.len();
        let mut sum = 0.0;
        for i in 0..n {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let var_a = e_aa[i] - ma * ma;
            let var_b = e_bb[i] - mb * mb;
            let cov = e_ab[i] - ma * mb;
            let num = (2.0 * ma * mb + c1) * (2.0 * cov + c2);
            let den = (ma * ma + mb * mb + c1) * (var_a + var_b + c2);
            sum += num / den;
        }
        total += sum / n as f64;
    }
    Ok(total / a.channels() as f64)
}

pub fn ssim<T: Scalar>(a: &Image<T>, b: &Image<T>) -> Result<f64> {
    ssim_with(a, b, &SsimParams::default())
}

/// Side of the square grid the LOE lightness maps are resampled to.
pub const LOE_GRID: usize = 50;

/// Per-pixel lightness: max over color channels (gray passes through).
fn lightness<T: Scalar>(img: &Image<T>) -> Vec<f64> {
    let color = img.channels().min(3);
    (0..img.pixel_count())
        .map(|i| {
            img.pixel(i)[..color]
                .iter()
                .map(|v| v.f64())
                .fold(f64::NEG_INFINITY, f64::max)
        })
        .collect()
}

/// Area-averaging resample of a single plane to `ow x oh`.
pub fn area_resample(plane: &[f64], w: usize, h: usize, ow: usize, oh: usize) -> Vec<f64> {
    if w == ow && h == oh {
        return plane.to_vec();
    }
    // Overlap weights of output cell j with input cells along one axis.
    let weights = |n: usize, on: usize| -> Vec<Vec<(usize, f64)>> {
        let scale = n as f64 / on as f64;
        (0..on)
            .map(|j| {
                let (lo, hi) = (j as f64 * scale, (j + 1) as f64 * scale);
                let mut v = Vec::new();
                let mut i = lo.floor() as usize;
                while i < n && (i as f64) < hi {
                    let ov = (hi.min(i as f64 + 1.0) - lo.max(i as f64)).max(0.0);
                    if ov > 0.0 {
                        v.push((i, ov / scale));
                    }
                    i += 1;
                }
                v
            })
            .collect()
    };
    let wx = weights(w, ow);
    let wy = weights(h, oh);
    let mut out = vec![0.0; ow * oh];
    for (oy, ry) in wy.iter().enumerate() {
        for (ox, rx) in wx.iter().enumerate() {
            let mut acc = 0.0;
            for &(y, fy) in ry {
                for &(x, fx) in rx {
                    acc += fy * fx * plane[y * w + x];
                }
            }
            out[oy * ow + ox] = acc;
        }
    }
    out
}

/// Lightness-order error: the fraction of ordered pixel pairs `(p, q)` of the
/// 50x50 resampled lightness maps whose `L(p) >= L(q)` relation differs.
pub fn loe<T: Scalar>(enhanced: &Image<T>, reference: &Image<T>) -> Result<f64> {
    let le = area_resample(
        &lightness(enhanced),
        enhanced.width(),
        enhanced.height(),
        LOE_GRID,
        LOE_GRID,
    );
    let lr = area_resample(
        &lightness(reference),
        reference.width(),
        reference.height(),
        LOE_GRID,
        LOE_GRID,
    );
    let n = le.len();
    let mut mismatched: u64 = 0;
    for p in 0..n {
        let (ep, rp) = (le[p], lr[p]);
        mismatched += le
            .iter()
            .zip(&lr)
            .filter(|&(&eq, &rq)| (ep >= eq) != (rp >= rq))
            .count() as u64;
    }
    Ok(mismatched as f64 / (n * n) as f64)
}

pub fn report<T: Scalar>(enhanced: &Image<T>, reference: &Image<T>) -> Result<MetricReport> {
    Ok(MetricReport {
        psnr: psnr(enhanced, reference)?,
        ssim: ssim(enhanced, reference)?,
        loe: loe(enhanced, reference)?,
    })
}
