//! The physical quadruple prior: hue angle `H`, log chroma ratio `C`,
//! intensity-normalized gradient `W` and channel order `O`, computed through
//! a linear Gaussian color model followed by Gaussian spatial filtering.

use serde::{Deserialize, Serialize};

use crate::distortion::{add_gauss_poisson, NoiseSpec};
use crate::error::{Error, Result};
use crate::image::{conv_separable, gaussian_kernel, Image};
use crate::scalar::Scalar;

/// RGB to (E, E^lambda, E^lambdalambda) coefficients of the standard Gaussian color model.
pub const DEFAULT_COLOR_MATRIX: [[f64; 3]; 3] = [[0.06, 0.63, 0.27], [0.30, 0.04, -0.35], [0.34, -0.60, 0.17]];

/// Number of channels in the stacked prior.
pub const PRIOR_CHANNELS: usize = 6;

/// Linear spectral map plus spatial scale.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ColorModelRepr", into = "ColorModelRepr")]
pub struct ColorModel {
    matrix: [[f64; 3]; 3],
    sigma: f64,
    eps: f64,
    arg_clamp: f64,
}

#[derive(Serialize, Deserialize)]
struct ColorModelRepr {
    #[serde(rename = "W")]
    w: [[f64; 3]; 3],
    sigma: f64,
    #[serde(default = "default_eps")]
    eps: f64,
    #[serde(default = "default_arg_clamp")]
    arg_clamp: f64,
}

fn default_eps() -> f64 {
    ColorModel::DEFAULT_EPS
}

fn default_arg_clamp() -> f64 {
    ColorModel::DEFAULT_ARG_CLAMP
}

impl TryFrom<ColorModelRepr> for ColorModel {
    type Error = Error;
    fn try_from(r: ColorModelRepr) -> Result<Self> {
        ColorModel::new(r.w, r.sigma, r.eps, r.arg_clamp)
    }
}

impl From<ColorModel> for ColorModelRepr {
    fn from(cm: ColorModel) -> Self {
        ColorModelRepr {
            w: cm.matrix,
            sigma: cm.sigma,
            eps: cm.eps,
            arg_clamp: cm.arg_clamp,
        }
    }
}

impl Default for ColorModel {
    fn default() -> Self {
        ColorModel {
            matrix: DEFAULT_COLOR_MATRIX,
            sigma: 1.0,
            eps: Self::DEFAULT_EPS,
            arg_clamp: Self::DEFAULT_ARG_CLAMP,
        }
    }
}

fn det3(m: &[[f64; 3]; 3]) -> f64 {
    m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
}

impl ColorModel {
    pub const DEFAULT_EPS: f64 = 1e-20;
    pub const DEFAULT_ARG_CLAMP: f64 = 1.5;

    pub fn new(matrix: [[f64; 3]; 3], sigma: f64, eps: f64, arg_clamp: f64) -> Result<Self> {
        if matrix.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::invalid("color matrix has non-finite entries"));
        }
        let det = det3(&matrix);
        if det.abs() <= 1e-6 {
            return Err(Error::invalid(format!("color matrix is near singular (det = {det:e})")));
        }
        if !(sigma.is_finite() && sigma > 0.0) {
            return Err(Error::invalid(format!("sigma must be positive, got {sigma}")));
        }
        if !(eps.is_finite() && eps > 0.0) {
            return Err(Error::invalid(format!("eps must be positive, got {eps}")));
        }
        if !(arg_clamp > 0.0 && arg_clamp < std::f64::consts::FRAC_PI_2) {
            return Err(Error::invalid(format!(
                "arg_clamp must lie in (0, pi/2), got {arg_clamp}"
            )));
        }
        Ok(ColorModel {
            matrix,
            sigma,
            eps,
            arg_clamp,
        })
    }

    pub fn with_sigma(&self, sigma: f64) -> Result<Self> {
        Self::new(self.matrix, sigma, self.eps, self.arg_clamp)
    }

    pub fn with_matrix(&self, matrix: [[f64; 3]; 3]) -> Result<Self> {
        Self::new(matrix, self.sigma, self.eps, self.arg_clamp)
    }

    pub fn matrix(&self) -> &[[f64; 3]; 3] {
        &self.matrix
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn eps(&self) -> f64 {
        self.eps
    }

    pub fn arg_clamp(&self) -> f64 {
        self.arg_clamp
    }

    /// The ten learnable coordinates: matrix entries row-major, then sigma.
    pub fn params(&self) -> [f64; 10] {
        let mut p = [0.0; 10];
        for (i, v) in self.matrix.iter().flatten().enumerate() {
            p[i] = *v;
        }
        p[9] = self.sigma;
        p
    }

    pub fn with_params(&self, p: &[f64; 10]) -> Result<Self> {
        let mut m = [[0.0; 3]; 3];
        for (i, v) in p[..9].iter().enumerate() {
            m[i / 3][i % 3] = *v;
        }
        Self::new(m, p[9], self.eps, self.arg_clamp)
    }
}

/// Smoothed spectral channels and spatial derivatives of `E`, all at scale sigma.
#[derive(Clone, Debug)]
pub struct GaussianColorFields {
    pub e: Image<f64>,
    pub e_lambda: Image<f64>,
    pub e_lambdalambda: Image<f64>,
    pub ex: Image<f64>,
    pub ey: Image<f64>,
}

fn require_rgb<T: Scalar>(img: &Image<T>) -> Result<()> {
    if img.channels() != 3 {
        return Err(Error::invalid(format!(
            "expected an RGB image, got {} channels",
            img.channels()
        )));
    }
    Ok(())
}

/// Maps RGB through the color matrix, then smooths and differentiates.
pub fn apply_color_model<T: Scalar>(img: &Image<T>, cm: &ColorModel) -> Result<GaussianColorFields> {
    require_rgb(img)?;
    let m = &cm.matrix;
    let mut spectral = Vec::with_capacity(img.data().len());
    for px in img.data().chunks_exact(3) {
        let (r, g, b) = (px[0].f64(), px[1].f64(), px[2].f64());
        for row in m {
            spectral.push(row[0] * r + row[1] * g + row[2] * b);
        }
    }
    let spectral = Image::new(img.width(), img.height(), 3, spectral)?;

    let g0 = gaussian_kernel(cm.sigma, 0)?;
    let g1 = gaussian_kernel(cm.sigma, 1)?;
    let smooth = conv_separable(&spectral, &g0, &g0);
    let e_hat = spectral.channel(0)?;
    Ok(GaussianColorFields {
        e: smooth.channel(0)?,
        e_lambda: smooth.channel(1)?,
        e_lambdalambda: smooth.channel(2)?,
        ex: conv_separable(&e_hat, &g1, &g0),
        ey: conv_separable(&e_hat, &g0, &g1),
    })
}

fn per_pixel(f: &GaussianColorFields, op: impl Fn(usize) -> f64) -> Image<f64> {
    let n = f.e.pixel_count();
    Image::from_raw(f.e.width(), f.e.height(), 1, (0..n).map(op).collect())
}

/// Hue-like angle `atan2(E^lambda, E^lambdalambda)` in `[-pi, pi]`.
pub fn compute_h(f: &GaussianColorFields) -> Image<f64> {
    let (el, ell) = (f.e_lambda.data(), f.e_lambdalambda.data());
    per_pixel(f, |i| el[i].atan2(ell[i]))
}

/// Log ratio of spectral-derivative energy to intensity energy.
pub fn compute_c(f: &GaussianColorFields, eps: f64) -> Image<f64> {
    let (e, el, ell) = (f.e.data(), f.e_lambda.data(), f.e_lambdalambda.data());
    per_pixel(f, |i| {
        ((el[i] * el[i] + ell[i] * ell[i] + eps) / (e[i] * e[i] + eps)).ln()
    })
}

/// `tan` of the intensity-normalized gradient magnitude, clamped below pi/2.
pub fn compute_wmap(f: &GaussianColorFields, eps: f64, arg_clamp: f64) -> Image<f64> {
    let (e, ex, ey) = (f.e.data(), f.ex.data(), f.ey.data());
    per_pixel(f, |i| {
        let a = ex[i].hypot(ey[i]) / (e[i].abs() + eps);
        a.min(arg_clamp).tan()
    })
}

/// Average-rank order of the three channels mapped to `[-1, 1]`.
pub fn channel_order(px: [f64; 3]) -> [f64; 3] {
    let mut out = [0.0; 3];
    for i in 0..3 {
        let mut rank = 0.0;
        for j in 0..3 {
            if j == i {
                continue;
            }
            if px[j] < px[i] {
                rank += 1.0;
            } else if px[j] == px[i] {
                rank += 0.5;
            }
        }
        out[i] = rank - 1.0;
    }
    out
}

/// Per-pixel channel order of an RGB image, three channels in `{-1, -0.5, 0, 0.5, 1}`.
pub fn compute_o<T: Scalar>(img: &Image<T>) -> Result<Image<T>> {
    require_rgb(img)?;
    let mut data = Vec::with_capacity(img.data().len());
    for px in img.data().chunks_exact(3) {
        let o = channel_order([px[0].f64(), px[1].f64(), px[2].f64()]);
        data.extend(o.iter().map(|&v| T::of(v)));
    }
    Ok(Image::from_raw(img.width(), img.height(), 3, data))
}

/// True when no two channels of the pixel are equal.
pub fn tie_free(px: &[impl Scalar]) -> bool {
    px[0] != px[1] && px[1] != px[2] && px[0] != px[2]
}

/// The four invariants, kept separately and stackable to six channels.
#[derive(Clone, Debug, PartialEq)]
pub struct QuadPrior<T> {
    pub h: Image<T>,
    pub c: Image<T>,
    pub w: Image<T>,
    pub o: Image<T>,
}

impl<T: Scalar> QuadPrior<T> {
    /// Channel layout: H, C, W, O_R, O_G, O_B.
    pub fn to_image(&self) -> Image<T> {
        Image::stack(&[&self.h, &self.c, &self.w, &self.o]).expect("prior parts share dimensions")
    }

    pub fn from_image(img: &Image<T>) -> Result<Self> {
        if img.channels() != PRIOR_CHANNELS {
            return Err(Error::invalid(format!(
                "prior raster must have {PRIOR_CHANNELS} channels, got {}",
                img.channels()
            )));
        }
        let o = Image::stack(&[&img.channel(3)?, &img.channel(4)?, &img.channel(5)?])?;
        Ok(QuadPrior {
            h: img.channel(0)?,
            c: img.channel(1)?,
            w: img.channel(2)?,
            o,
        })
    }

    pub fn width(&self) -> usize {
        self.h.width()
    }

    pub fn height(&self) -> usize {
        self.h.height()
    }
}

/// Full extraction. With `noise`, a corrupted working copy is used instead of `img`.
pub fn extract_prior<T: Scalar>(img: &Image<T>, cm: &ColorModel, noise: Option<&NoiseSpec>) -> Result<QuadPrior<T>> {
    require_rgb(img)?;
    let noisy;
    let src = match noise {
        Some(spec) => {
            noisy = add_gauss_poisson(img, spec)?;
            &noisy
        }
        None => img,
    };
    let fields = apply_color_model(src, cm)?;
    Ok(QuadPrior {
        h: compute_h(&fields).cast(),
        c: compute_c(&fields, cm.eps).cast(),
        w: compute_wmap(&fields, cm.eps, cm.arg_clamp).cast(),
        o: compute_o(src)?,
    })
}

/// Central finite-difference gradient of `loss` over the nine matrix entries and sigma.
pub fn colormodel_fd_grad(loss: impl Fn(&ColorModel) -> Result<f64>, cm: &ColorModel, h: f64) -> Result<[f64; 10]> {
    if !(h.is_finite() && h > 0.0) {
        return Err(Error::invalid(format!(
            "finite-difference step must be positive, got {h}"
        )));
    }
    let eval = |p: &[f64; 10]| -> Result<f64> {
        let v = loss(&cm.with_params(p)?)?;
        if !v.is_finite() {
            return Err(Error::Numeric(format!("loss returned {v}")));
        }
        Ok(v)
    };
    let base = cm.params();
    let mut grad = [0.0; 10];
    for i in 0..10 {
        let mut plus = base;
        let mut minus = base;
        plus[i] += h;
        minus[i] -= h;
        grad[i] = (eval(&plus)? - eval(&minus)?) / (2.0 * h);
    }
    Ok(grad)
}
