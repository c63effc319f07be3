//! Synthetic illumination changes and Gaussian-Poisson sensor noise.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{conv_separable, gaussian_kernel, Image};
use crate::rng;
use crate::scalar::Scalar;

/// Below this mean, Poisson counts are drawn by inverse transform; above it,
/// by a rounded normal approximation.
pub const POISSON_NORMAL_CROSSOVER: f64 = 30.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub gauss_sigma: f64,
    pub poisson_peak: f64,
    #[serde(default)]
    pub seed: u64,
}

impl NoiseSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.gauss_sigma.is_finite() && self.gauss_sigma >= 0.0) {
            return Err(Error::invalid(format!(
                "gauss_sigma must be >= 0, got {}",
                self.gauss_sigma
            )));
        }
        if !(self.poisson_peak.is_finite() && self.poisson_peak > 0.0) {
            return Err(Error::invalid(format!(
                "poisson_peak must be > 0, got {}",
                self.poisson_peak
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IlluminationSpec {
    pub gain: f64,
    pub gamma: f64,
    /// Zero disables the spatially varying field.
    #[serde(default)]
    pub field_sigma: f64,
    #[serde(default = "unit_range")]
    pub field_range: (f64, f64),
    #[serde(default)]
    pub seed: u64,
}

fn unit_range() -> (f64, f64) {
    (1.0, 1.0)
}

impl Default for IlluminationSpec {
    fn default() -> Self {
        IlluminationSpec {
            gain: 1.0,
            gamma: 1.0,
            field_sigma: 0.0,
            field_range: unit_range(),
            seed: 0,
        }
    }
}

impl IlluminationSpec {
    pub fn validate(&self) -> Result<()> {
        let pos = |v: f64| v.is_finite() && v > 0.0;
        if !pos(self.gain) || !pos(self.gamma) {
            return Err(Error::invalid(format!(
                "gain and gamma must be positive, got {} and {}",
                self.gain, self.gamma
            )));
        }
        if !(self.field_sigma.is_finite() && self.field_sigma >= 0.0) {
            return Err(Error::invalid(format!(
                "field_sigma must be >= 0, got {}",
                self.field_sigma
            )));
        }
        let (lo, hi) = self.field_range;
        if !(pos(lo) && pos(hi) && lo <= hi) {
            return Err(Error::invalid(format!(
                "field_range must satisfy 0 < lo <= hi, got ({lo}, {hi})"
            )));
        }
        Ok(())
    }
}

/// Smooth multiplicative field: uniform white noise in `[lo, hi]`, blurred.
pub fn illumination_field(width: usize, height: usize, spec: &IlluminationSpec) -> Result<Image<f64>> {
    spec.validate()?;
    if spec.field_sigma == 0.0 {
        return Image::filled(width, height, 1, 1.0);
    }
    let (lo, hi) = spec.field_range;
    let noise = Image::from_fn(width, height, 1, |x, y, _| {
        let u: f64 = rng::stream(spec.seed, (y * width + x) as u64).random();
        lo + (hi - lo) * u
    })?;
    let k = gaussian_kernel(spec.field_sigma, 0)?;
    Ok(conv_separable(&noise, &k, &k))
}

/// `clamp((gain * F * x)^gamma, 0, 1)` with one field shared by all channels.
pub fn apply_illumination<T: Scalar>(img: &Image<T>, spec: &IlluminationSpec) -> Result<Image<T>> {
    let field = illumination_field(img.width(), img.height(), spec)?;
    let ch = img.channels();
    let data = img
        .data()
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let lit = (spec.gain * field.data()[i / ch] * v.f64()).max(0.0);
            let y = if spec.gamma == 1.0 { lit } else { lit.powf(spec.gamma) };
            T::of(y.min(1.0))
        })
        .collect();
    Image::new(img.width(), img.height(), ch, data)
}

/// Poisson variate with mean `lambda`.
pub fn sample_poisson(lambda: f64, rng: &mut impl Rng) -> f64 {
    if lambda <= 0.0 {
        return 0.0;
    }
    if lambda < POISSON_NORMAL_CROSSOVER {
        let u: f64 = rng.random();
        let mut k = 0.0;
        let mut p = (-lambda).exp();
        let mut cdf = p;
        while u > cdf {
            k += 1.0;
            p *= lambda / k;
            cdf += p;
            if p < f64::MIN_POSITIVE {
                break;
            }
        }
        k
    } else {
        let z: f64 = StandardNormal.sample(rng);
        (lambda + lambda.sqrt() * z).round().max(0.0)
    }
}

/// `clamp(Poisson(x * peak) / peak + N(0, sigma^2), 0, 1)`, one RNG stream per sample.
pub fn add_gauss_poisson<T: Scalar>(img: &Image<T>, spec: &NoiseSpec) -> Result<Image<T>> {
    spec.validate()?;
    let data = img
        .data()
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let mut r = rng::stream(spec.seed, i as u64);
            let shot = sample_poisson(v.f64().max(0.0) * spec.poisson_peak, &mut r) / spec.poisson_peak;
            let z: f64 = StandardNormal.sample(&mut r);
            T::of((shot + spec.gauss_sigma * z).clamp(0.0, 1.0))
        })
        .collect();
    Image::new(img.width(), img.height(), img.channels(), data)
}

/// Parameter ranges for random training-time corruption.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct JitterRanges {
    pub gain: (f64, f64),
    pub gamma: (f64, f64),
    pub gauss_sigma: (f64, f64),
    pub poisson_peak: (f64, f64),
    /// Spatial field smoothness; zero disables the field.
    pub field_sigma: f64,
    pub field_range: (f64, f64),
}

impl Default for JitterRanges {
    fn default() -> Self {
        JitterRanges {
            gain: (0.1, 1.0),
            gamma: (0.6, 1.4),
            gauss_sigma: (0.0, 0.05),
            poisson_peak: (50.0, 1000.0),
            field_sigma: 8.0,
            field_range: (0.6, 1.0),
        }
    }
}

impl JitterRanges {
    fn pick(rng: &mut impl Rng, (lo, hi): (f64, f64)) -> f64 {
        lo + (hi - lo) * rng.random::<f64>()
    }

    pub fn draw_illumination(&self, seed: u64) -> IlluminationSpec {
        let mut r = rng::stream(seed, 0);
        IlluminationSpec {
            gain: Self::pick(&mut r, self.gain),
            gamma: Self::pick(&mut r, self.gamma),
            field_sigma: self.field_sigma,
            field_range: self.field_range,
            seed: rng::derive_seed(seed, "field"),
        }
    }

    pub fn draw_noise(&self, seed: u64) -> NoiseSpec {
        let mut r = rng::stream(seed, 1);
        NoiseSpec {
            gauss_sigma: Self::pick(&mut r, self.gauss_sigma),
            poisson_peak: Self::pick(&mut r, self.poisson_peak),
            seed: rng::derive_seed(seed, "noise"),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp() -> Image<f64> {
        Image::from_fn(16, 12, 3, |x, y, c| ((x + 2 * y + 5 * c) % 17) as f64 / 17.0).unwrap()
    }

    #[test]
    fn identity_illumination() {
        let img = ramp();
        assert_eq!(apply_illumination(&img, &IlluminationSpec::default()).unwrap(), img);
    }

    #[test]
    fn gain_halves() {
        let img = Image::<f64>::filled(3, 3, 1, 0.8).unwrap();
        let spec = IlluminationSpec {
            gain: 0.5,
            ..Default::default()
        };
        let out = apply_illumination(&img, &spec).unwrap();
        assert!(out.data().iter().all(|&v| (v - 0.4).abs() < 1e-15));
    }

    #[test]
    fn gain_is_linear_below_clamp() {
        let img = ramp().scale(0.4).unwrap();
        let at = |gain| {
            apply_illumination(
                &img,
                &IlluminationSpec {
                    gain,
                    ..Default::default()
                },
            )
            .unwrap()
        };
        let (a, b) = (at(0.7), at(1.4));
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((2.0 * x - y).abs() < 1e-15);
        }
    }

    #[test]
    fn invalid_specs() {
        let img = ramp();
        for spec in [
            IlluminationSpec {
                gain: 0.0,
                ..Default::default()
            },
            IlluminationSpec {
                gamma: -1.0,
                ..Default::default()
            },
            IlluminationSpec {
                field_sigma: -1.0,
                ..Default::default()
            },
            IlluminationSpec {
                field_sigma: 2.0,
                field_range: (0.8, 0.2),
                ..Default::default()
            },
            IlluminationSpec {
                field_sigma: 2.0,
                field_range: (0.0, 0.2),
                ..Default::default()
            },
        ] {
            assert!(matches!(
                apply_illumination(&img, &spec),
                Err(Error::InvalidArgument(_))
            ));
        }
        let bad = NoiseSpec {
            gauss_sigma: 0.0,
            poisson_peak: 0.0,
            seed: 1,
        };
        assert!(matches!(add_gauss_poisson(&img, &bad), Err(Error::InvalidArgument(_))));
        let bad = NoiseSpec {
            gauss_sigma: -0.1,
            poisson_peak: 10.0,
            seed: 1,
        };
        assert!(add_gauss_poisson(&img, &bad).is_err());
    }

    #[test]
    fn field_stays_in_range() {
        let spec = IlluminationSpec {
            field_sigma: 3.0,
            field_range: (0.3, 1.0),
            seed: 9,
            ..Default::default()
        };
        let f = illumination_field(20, 20, &spec).unwrap();
        assert!(f.data().iter().all(|&v| (0.3..=1.0).contains(&v)));
        assert_eq!(f, illumination_field(20, 20, &spec).unwrap());
    }

    #[test]
    fn huge_peak_is_nearly_noiseless() {
        let img = ramp();
        let spec = NoiseSpec {
            gauss_sigma: 0.0,
            poisson_peak: 1e9,
            seed: 3,
        };
        let out = add_gauss_poisson(&img, &spec).unwrap();
        let rms = (out
            .data()
            .iter()
            .zip(img.data())
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            / img.data().len() as f64)
            .sqrt();
        assert!(rms < 1e-4, "{rms}");
    }

    #[test]
    fn noise_is_seeded() {
        let img = ramp();
        let spec = NoiseSpec {
            gauss_sigma: 0.03,
            poisson_peak: 80.0,
            seed: 11,
        };
        let a = add_gauss_poisson(&img, &spec).unwrap();
        assert_eq!(a, add_gauss_poisson(&img, &spec).unwrap());
        let other = add_gauss_poisson(&img, &NoiseSpec { seed: 12, ..spec }).unwrap();
        assert_ne!(a, other);
    }

    #[test]
    fn poisson_moments_on_both_branches() {
        for lambda in [0.5, 4.0, 29.0, 31.0, 200.0] {
            let n = 20000;
            let mut r = rng::stream(42, lambda as u64);
            let xs: Vec<f64> = (0..n).map(|_| sample_poisson(lambda, &mut r)).collect();
            let mean = xs.iter().sum::<f64>() / n as f64;
            let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
            let se = (lambda / n as f64).sqrt();
            assert!((mean - lambda).abs() < 4.0 * se, "lambda {lambda}: mean {mean}");
            assert!((var / lambda - 1.0).abs() < 0.1, "lambda {lambda}: var {var}");
        }
    }

    #[test]
    fn spec_json_round_trip() {
        let s = r#"{"gain": 0.3, "gamma": 1.2}"#;
        let spec: IlluminationSpec = serde_json::from_str(s).unwrap();
        assert_eq!(spec.field_sigma, 0.0);
        assert_eq!(spec.field_range, (1.0, 1.0));
        let n: NoiseSpec = serde_json::from_str(r#"{"gauss_sigma": 0.01, "poisson_peak": 100, "seed": 4}"#).unwrap();
        assert_eq!(n.seed, 4);
    }
}
