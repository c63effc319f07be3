use std::f64::consts::PI;

use crate::error::{Error, Result};

/// Sampled 1-D Gaussian (order 0) or Gaussian-derivative (order 1) filter.
#[derive(Clone, Debug, PartialEq)]
pub struct Kernel1D {
    taps: Vec<f64>,
    order: u8,
    sigma: f64,
}

impl Kernel1D {
    pub fn taps(&self) -> &[f64] {
        &self.taps
    }

    pub fn radius(&self) -> usize {
        (self.taps.len() - 1) / 2
    }

    pub fn order(&self) -> u8 {
        self.order
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }
}

/// Gaussian kernel with radius `ceil(3 sigma)`.
///
/// Order-0 taps are renormalized to sum to one. Order-1 taps sample
/// `G'(x) = -x / sigma^2 G(x)` and are mean-corrected so they sum to zero,
/// which gives an exact null response on constant signals.
pub fn gaussian_kernel(sigma: f64, order: u8) -> Result<Kernel1D> {
    if !(sigma.is_finite() && sigma > 0.0) {
        return Err(Error::invalid(format!("kernel sigma must be positive, got {sigma}")));
    }
    if order > 1 {
        return Err(Error::invalid(format!("kernel order must be 0 or 1, got {order}")));
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let norm = 1.0 / (sigma * (2.0 * PI).sqrt());
    let gauss = |x: f64| norm * (-x * x / (2.0 * sigma * sigma)).exp();
    let mut taps: Vec<f64> = (-radius..=radius)
        .map(|i| {
            let x = i as f64;
            match order {
                0 => gauss(x),
                _ => -x / (sigma * sigma) * gauss(x),
            }
        })
        .collect();
    let sum: f64 = taps.iter().sum();
    if order == 0 {
        taps.iter_mut().for_each(|t| *t /= sum);
    } else {
        let mean = sum / taps.len() as f64;
        taps.iter_mut().for_each(|t| *t -= mean);
    }
    Ok(Kernel1D { taps, order, sigma })
}
