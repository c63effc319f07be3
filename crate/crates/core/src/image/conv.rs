use super::{Image, Kernel1D};
use crate::scalar::Scalar;

/// Per-channel two-pass filtering: `kx` along rows, then `ky` along columns.
///
/// Taps are applied in correlation order, `out[i] = sum_m taps[m + r] * in[i + m]`,
/// so an order-1 kernel answers about -1 on a unit ramp. Borders replicate
/// the edge sample. Accumulation is in `f64`.
pub fn conv_separable<T: Scalar>(img: &Image<T>, kx: &Kernel1D, ky: &Kernel1D) -> Image<T> {
    let (w, h, ch) = (img.width(), img.height(), img.channels());
    let src = img.data();
    let mut tmp = vec![0.0f64; w * h * ch];

    let rx = kx.radius() as isize;
    for y in 0..h {
        let row = &src[y * w * ch..(y + 1) * w * ch];
        for x in 0..w {
            for c in 0..ch {
                let mut acc = 0.0;
                for (m, &tap) in kx.taps().iter().enumerate() {
                    let xs = (x as isize + m as isize - rx).clamp(0, w as isize - 1) as usize;
                    acc += tap * row[xs * ch + c].f64();
                }
                tmp[(y * w + x) * ch + c] = acc;
            }
        }
    }

    let ry = ky.radius() as isize;
    let mut out = vec![T::zero(); w * h * ch];
    for y in 0..h {
        for x in 0..w {
            for c in 0..ch {
                let mut acc = 0.0;
                for (m, &tap) in ky.taps().iter().enumerate() {
                    let ys = (y as isize + m as isize - ry).clamp(0, h as isize - 1) as usize;
                    acc += tap * tmp[(ys * w + x) * ch + c];
                }
                out[(y * w + x) * ch + c] = T::of(acc);
            }
        }
    }
    Image::from_raw(w, h, ch, out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image::gaussian_kernel;

    #[test]
    fn constant_preserved_by_smoothing() {
        let img = Image::<f32>::filled(9, 7, 3, 0.37).unwrap();
        let k = gaussian_kernel(1.3, 0).unwrap();
        let out = conv_separable(&img, &k, &k);
        assert!(out.data().iter().all(|&v| (v - 0.37).abs() < 1e-6));
    }

    #[test]
    fn constant_has_zero_derivative() {
        let img = Image::<f32>::filled(9, 7, 2, 0.8).unwrap();
        let k0 = gaussian_kernel(1.0, 0).unwrap();
        let k1 = gaussian_kernel(1.0, 1).unwrap();
        let out = conv_separable(&img, &k1, &k0);
        assert!(out.data().iter().all(|&v| v.abs() < 1e-6));
    }

    #[test]
    fn ramp_response_matches_direct_correlation() {
        // f(x) = x on a wide row; interior samples see no border effects.
        let w = 21;
        let img = Image::<f64>::from_fn(w, 1, 1, |x, _, _| x as f64).unwrap();
        let k0 = gaussian_kernel(1.0, 0).unwrap();
        let k1 = gaussian_kernel(1.0, 1).unwrap();
        let out = conv_separable(&img, &k1, &k0);

        // Oracle: sum_m G'(m) (x + m) over the sampled support.
        let norm = 1.0 / (2.0 * std::f64::consts::PI).sqrt();
        let raw: Vec<f64> = (-3..=3)
            .map(|m: i32| -(m as f64) * norm * (-(m * m) as f64 / 2.0).exp())
            .collect();
        let mean = raw.iter().sum::<f64>() / raw.len() as f64;
        for x in 3..w - 3 {
            let expect: f64 = raw
                .iter()
                .enumerate()
                .map(|(i, g)| (g - mean) * (x as f64 + i as f64 - 3.0))
                .sum();
            let got = out.get(x, 0, 0);
            assert!((got - expect).abs() < 1e-12, "x={x}: {got} vs {expect}");
            assert!((got + 1.0).abs() < 1e-2, "x={x}: {got}");
        }
    }

    #[test]
    fn impulse_center_is_product_of_center_taps() {
        let mut img = Image::<f64>::zeros(5, 5, 1).unwrap();
        img.set(2, 2, 0, 1.0);
        let k = gaussian_kernel(1.0, 0).unwrap();
        let out = conv_separable(&img, &k, &k);
        // Direct 2-D correlation oracle with edge replication.
        let t = k.taps();
        let r = k.radius() as isize;
        let mut expect = 0.0;
        for dy in -r..=r {
            for dx in -r..=r {
                let xs = (2 + dx).clamp(0, 4) as usize;
                let ys = (2 + dy).clamp(0, 4) as usize;
                expect += t[(dx + r) as usize] * t[(dy + r) as usize] * img.get(xs, ys, 0);
            }
        }
        let center = t[k.radius()];
        assert!((out.get(2, 2, 0) - expect).abs() < 1e-12);
        assert!((out.get(2, 2, 0) - center * center).abs() < 1e-12);
    }
}
