//! Raster container, separable Gaussian filtering and file I/O.

mod conv;
mod io;
mod kernel;

pub use conv::conv_separable;
pub use io::{decode_qpt, encode_qpt, load_png, read_qpt, save_png, write_atomic, write_qpt};
pub use kernel::{gaussian_kernel, Kernel1D};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Row-major, channel-interleaved raster of finite reals.
#[derive(Clone, Debug, PartialEq)]
pub struct Image<T> {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<T>,
}

impl<T: Scalar> Image<T> {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<T>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::invalid(format!("empty image {width}x{height}")));
        }
        if !(1..=4).contains(&channels) && channels != 6 {
            // 6 is the stacked prior layout; everything else is 1..4.
            return Err(Error::invalid(format!("unsupported channel count {channels}")));
        }
        if data.len() != width * height * channels {
            return Err(Error::invalid(format!(
                "data length {} != {width}x{height}x{channels}",
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::invalid(format!("non-finite sample at index {i}")));
        }
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }

    /// Image with every sample equal to `value`.
    pub fn filled(width: usize, height: usize, channels: usize, value: T) -> Result<Self> {
        Self::new(width, height, channels, vec![value; width * height * channels])
    }

    pub fn zeros(width: usize, height: usize, channels: usize) -> Result<Self> {
        Self::filled(width, height, channels, T::zero())
    }

    /// Builds an image from `f(x, y, c)`.
    pub fn from_fn(
        width: usize,
        height: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> T,
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(width * height * channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    data.push(f(x, y, c));
                }
            }
        }
        Self::new(width, height, channels, data)
    }

    /// Skips the finiteness scan; callers guarantee the invariants.
    pub(crate) fn from_raw(width: usize, height: usize, channels: usize, data: Vec<T>) -> Self {
        debug_assert_eq!(data.len(), width * height * channels);
        debug_assert!(data.iter().all(|v| v.is_finite()));
        Self {
            width,
            height,
            channels,
            data,
        }
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn channels(&self) -> usize {
        self.channels
    }

    #[inline]
    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }

    #[inline]
    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn same_shape<U>(&self, other: &Image<U>) -> bool {
        self.width == other.width && self.height == other.height && self.channels == other.channels
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> T {
        self.data[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, c: usize, v: T) {
        debug_assert!(v.is_finite());
        self.data[(y * self.width + x) * self.channels + c] = v;
    }

    #[inline]
    pub fn pixel(&self, i: usize) -> &[T] {
        &self.data[i * self.channels..(i + 1) * self.channels]
    }

    /// Applies `f` to every sample. Non-finite results are an error.
    pub fn map(&self, f: impl Fn(T) -> T) -> Result<Self> {
        Self::new(
            self.width,
            self.height,
            self.channels,
            self.data.iter().map(|&v| f(v)).collect(),
        )
    }

    pub fn scale(&self, k: T) -> Result<Self> {
        self.map(|v| v * k)
    }

    pub fn clamp01(&self) -> Self {
        let data = self.data.iter().map(|&v| v.max(T::zero()).min(T::one())).collect();
        Self::from_raw(self.width, self.height, self.channels, data)
    }

    /// Extracts channel `c` as a single-channel image.
    pub fn channel(&self, c: usize) -> Result<Self> {
        if c >= self.channels {
            return Err(Error::invalid(format!(
                "channel {c} out of range for {}-channel image",
                self.channels
            )));
        }
        let data = self.data.iter().skip(c).step_by(self.channels).copied().collect();
        Ok(Self::from_raw(self.width, self.height, 1, data))
    }

    /// Interleaves the channels of several same-sized images.
    pub fn stack(parts: &[&Image<T>]) -> Result<Self> {
        let first = parts.first().ok_or_else(|| Error::invalid("stack of zero images"))?;
        let (w, h) = (first.width, first.height);
        if parts.iter().any(|p| p.width != w || p.height != h) {
            return Err(Error::invalid("stack: spatial dimensions differ"));
        }
        let channels: usize = parts.iter().map(|p| p.channels).sum();
        let mut data = Vec::with_capacity(w * h * channels);
        for i in 0..w * h {
            for p in parts {
                data.extend_from_slice(p.pixel(i));
            }
        }
        Self::new(w, h, channels, data)
    }

    /// Converts the sample type.
    pub fn cast<U: Scalar>(&self) -> Image<U> {
        Image::from_raw(
            self.width,
            self.height,
            self.channels,
            self.data.iter().map(|v| U::of(v.f64())).collect(),
        )
    }

    /// Replicates gray to RGB, drops alpha; RGB passes through.
    pub fn to_rgb(&self) -> Result<Self> {
        let pick: &[usize] = match self.channels {
            1 | 2 => &[0, 0, 0],
            3 | 4 => &[0, 1, 2],
            n => return Err(Error::invalid(format!("cannot convert {n} channels to RGB"))),
        };
        let mut data = Vec::with_capacity(self.pixel_count() * 3);
        for i in 0..self.pixel_count() {
            let px = self.pixel(i);
            data.extend(pick.iter().map(|&c| px[c]));
        }
        Ok(Self::from_raw(self.width, self.height, 3, data))
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().map(|v| v.f64()).sum::<f64>() / self.data.len() as f64
    }
}
