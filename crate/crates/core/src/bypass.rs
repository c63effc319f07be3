//! Toy autoencoder with a bypass decoder.
//!
//! The encoder emits skip features `z1` (full resolution), `z2` (1/2), `z3`
//! (1/4) and the latent `z` (1/8). The plain decoder maps `z` back to an
//! image. The bypass decoder additionally adds a bias-free 1x1 projection of
//! each skip after the matching decoder stage and finishes with a residual
//! block. Projections and the residual's last conv start at zero, so before
//! fusion training the bypass decoder reproduces the plain one exactly.

use serde::{Deserialize, Serialize};

use crate::distortion::{add_gauss_poisson, apply_illumination, JitterRanges};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::nn::{clip_grad_norm, init_conv, sgd_step, Conv2d, Init, Op, ParamLayout, Seq, Tape, Tensor};
use crate::rng::{derive_index, derive_seed};
use crate::scalar::Scalar;
use crate::synth::synthetic_image;

/// Encoder skip features, finest first.
#[derive(Clone, Debug, PartialEq)]
pub struct Skips<T>(pub [Tensor<T>; 3]);

#[derive(Clone, Debug, PartialEq)]
pub struct Encoded<T> {
    pub z: Tensor<T>,
    pub skips: Skips<T>,
}

/// Parameter groups of a [`ToyAe`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Group {
    Encoder,
    Decoder,
    Fusion,
    Post,
}

#[derive(Clone, Debug)]
pub struct ToyAe<T> {
    widths: [usize; 3],
    enc: [Seq; 4],
    /// Decoder stages: `conv, lrelu` each, the first one followed by upsampling.
    dec: [Seq; 4],
    out: Seq,
    fuse: [Conv2d; 3],
    post: Seq,
    groups: Vec<(Group, std::ops::Range<usize>)>,
    params: Vec<T>,
}

struct EncodeTape<T>([Tape<T>; 4]);

struct DecodeTape<T> {
    stages: Vec<Tape<T>>,
    /// Inputs of the upsampling after stages 1 and 2.
    up_inputs: Vec<Tensor<T>>,
    out: Tape<T>,
    /// Input of the residual block, when the bypass path ran.
    post: Option<Tape<T>>,
}

const UP: Op = Op::Upsample2;

impl<T: Scalar> ToyAe<T> {
    pub const DEFAULT_WIDTHS: [usize; 3] = [16, 32, 64];

    pub fn new(widths: [usize; 3], seed: u64) -> Result<Self> {
        if widths.contains(&0) {
            return Err(Error::invalid("zero-width autoencoder stage"));
        }
        let [c1, c2, c3] = widths;
        let mut lay = ParamLayout::default();
        let mut groups = Vec::new();
        let mut mark = |lay: &ParamLayout, g: Group, start: usize| groups.push((g, start..lay.len()));

        let s = lay.len();
        let enc = [
            Seq(vec![Op::Conv(lay.conv(3, c1, 3, true)), Op::LeakyRelu]),
            Seq(vec![Op::AvgPool2, Op::Conv(lay.conv(c1, c2, 3, true)), Op::LeakyRelu]),
            Seq(vec![Op::AvgPool2, Op::Conv(lay.conv(c2, c3, 3, true)), Op::LeakyRelu]),
            Seq(vec![Op::AvgPool2, Op::Conv(lay.conv(c3, c3, 3, true))]),
        ];
        mark(&lay, Group::Encoder, s);

        let s = lay.len();
        let dec = [
            Seq(vec![Op::Conv(lay.conv(c3, c3, 3, true)), Op::LeakyRelu, UP]),
            Seq(vec![Op::Conv(lay.conv(c3, c3, 3, true)), Op::LeakyRelu]),
            Seq(vec![Op::Conv(lay.conv(c3, c2, 3, true)), Op::LeakyRelu]),
            Seq(vec![Op::Conv(lay.conv(c2, c1, 3, true)), Op::LeakyRelu]),
        ];
        let out = Seq(vec![Op::Conv(lay.conv(c1, 3, 3, true))]);
        mark(&lay, Group::Decoder, s);

        let s = lay.len();
        let fuse = [
            lay.conv(c1, c1, 1, false),
            lay.conv(c2, c2, 1, false),
            lay.conv(c3, c3, 1, false),
        ];
        mark(&lay, Group::Fusion, s);

        let s = lay.len();
        let post_in = lay.conv(3, c1, 3, true);
        let post_out = lay.conv(c1, 3, 3, true);
        let post = Seq(vec![Op::Conv(post_in), Op::LeakyRelu, Op::Conv(post_out)]);
        mark(&lay, Group::Post, s);

        let mut params = vec![T::zero(); lay.len()];
        for seq in enc.iter().chain(&dec).chain([&out]) {
            for op in &seq.0 {
                if let Op::Conv(c) = op {
                    init_conv(c, Init::He, &mut params, seed);
                }
            }
        }
        for c in &fuse {
            init_conv(c, Init::Zero, &mut params, seed);
        }
        init_conv(&post_in, Init::He, &mut params, seed);
        init_conv(&post_out, Init::Zero, &mut params, seed);

        Ok(ToyAe {
            widths,
            enc,
            dec,
            out,
            fuse,
            post,
            groups,
            params,
        })
    }

    pub fn widths(&self) -> [usize; 3] {
        self.widths
    }

    pub fn params(&self) -> &[T] {
        &self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn set_params(&mut self, params: Vec<T>) -> Result<()> {
        if params.len() != self.params.len() {
            return Err(Error::invalid(format!(
                "expected {} parameters, got {}",
                self.params.len(),
                params.len()
            )));
        }
        self.params = params;
        Ok(())
    }

    /// Mask selecting the parameters of the given groups.
    pub fn mask(&self, groups: &[Group]) -> Vec<bool> {
        let mut m = vec![false; self.params.len()];
        for (g, r) in &self.groups {
            if groups.contains(g) {
                m[r.clone()].iter_mut().for_each(|v| *v = true);
            }
        }
        m
    }

    fn check_input(img: &Tensor<T>) -> Result<()> {
        if img.channels != 3
            || !img.width.is_multiple_of(8)
            || !img.height.is_multiple_of(8)
            || img.width == 0
            || img.height == 0
        {
            return Err(Error::invalid(format!(
                "autoencoder input must be RGB with sides divisible by 8, got {}x{}x{}",
                img.channels, img.width, img.height
            )));
        }
        Ok(())
    }

    fn check_skips(&self, z: &Tensor<T>, skips: &Skips<T>) -> Result<()> {
        for (i, s) in skips.0.iter().enumerate() {
            let f = 1 << (3 - i);
            if s.channels != self.widths[i] || s.width != z.width * f || s.height != z.height * f {
                return Err(Error::invalid(format!(
                    "skip z{} has shape {}x{}x{}, expected {}x{}x{}",
                    i + 1,
                    s.channels,
                    s.width,
                    s.height,
                    self.widths[i],
                    z.width * f,
                    z.height * f
                )));
            }
        }
        Ok(())
    }

    fn check_latent(&self, z: &Tensor<T>) -> Result<()> {
        if z.channels != self.widths[2] {
            return Err(Error::invalid(format!(
                "latent must have {} channels, got {}",
                self.widths[2], z.channels
            )));
        }
        Ok(())
    }

    fn encode_taped(&self, x: &Tensor<T>) -> Result<(Encoded<T>, EncodeTape<T>)> {
        Self::check_input(x)?;
        let (z1, t0) = self.enc[0].forward_taped(&self.params, x.clone())?;
        let (z2, t1) = self.enc[1].forward_taped(&self.params, z1.clone())?;
        let (z3, t2) = self.enc[2].forward_taped(&self.params, z2.clone())?;
        let (z, t3) = self.enc[3].forward_taped(&self.params, z3.clone())?;
        Ok((
            Encoded {
                z,
                skips: Skips([z1, z2, z3]),
            },
            EncodeTape([t0, t1, t2, t3]),
        ))
    }

    pub fn encode(&self, img: &Image<T>) -> Result<Encoded<T>> {
        Ok(self.encode_taped(&Tensor::from_image(img))?.0)
    }

    fn decode_taped(&self, z: &Tensor<T>, skips: Option<&Skips<T>>) -> Result<(Tensor<T>, DecodeTape<T>)> {
        self.check_latent(z)?;
        if let Some(s) = skips {
            self.check_skips(z, s)?;
        }
        let p = &self.params;
        let mut stages = Vec::with_capacity(4);
        let mut up_inputs = Vec::with_capacity(2);
        let (mut h, t) = self.dec[0].forward_taped(p, z.clone())?;
        stages.push(t);
        // Stage i works at the resolution of skip z_{4-i}.
        for (i, skip_idx) in [(1, 2), (2, 1), (3, 0)] {
            let (mut a, t) = self.dec[i].forward_taped(p, h)?;
            stages.push(t);
            if let Some(s) = skips {
                a.add_assign(&self.fuse[skip_idx].forward(p, &s.0[skip_idx])?);
            }
            h = if i < 3 {
                let up = UP.forward(p, &a)?;
                up_inputs.push(a);
                up
            } else {
                a
            };
        }
        let (mut y, out) = self.out.forward_taped(p, h)?;
        let mut post = None;
        if skips.is_some() {
            let (r, t) = self.post.forward_taped(p, y.clone())?;
            y.add_assign(&r);
            post = Some(t);
        }
        Ok((
            y,
            DecodeTape {
                stages,
                up_inputs,
                out,
                post,
            },
        ))
    }

    /// Latent to image without skips or the residual block.
    pub fn decode_plain(&self, z: &Tensor<T>) -> Result<Image<T>> {
        self.decode_taped(z, None)?.0.to_image()
    }

    /// Latent plus encoder skips to image.
    pub fn decode_bypass(&self, z: &Tensor<T>, skips: &Skips<T>) -> Result<Image<T>> {
        self.decode_taped(z, Some(skips))?.0.to_image()
    }

    /// Returns `(d z, d skips)` and accumulates parameter gradients.
    fn decode_backward(
        &self,
        tape: &DecodeTape<T>,
        skips: Option<&Skips<T>>,
        dy: Tensor<T>,
        grads: &mut [T],
    ) -> (Tensor<T>, Option<[Tensor<T>; 3]>) {
        let p = &self.params;
        let mut g = dy;
        if let Some(t) = &tape.post {
            let through = self.post.backward(p, t, g.clone(), grads);
            g.add_assign(&through);
        }
        g = self.out.backward(p, &tape.out, g, grads);
        let mut dskips: [Option<Tensor<T>>; 3] = [None, None, None];
        for (i, skip_idx) in [(3, 0), (2, 1), (1, 2)] {
            if i < 3 {
                g = UP.backward(p, &tape.up_inputs[i - 1], &g, grads);
            }
            if let Some(s) = skips {
                dskips[skip_idx] = Some(self.fuse[skip_idx].backward(p, &s.0[skip_idx], &g, grads));
            }
            g = self.dec[i].backward(p, &tape.stages[i], g, grads);
        }
        g = self.dec[0].backward(p, &tape.stages[0], g, grads);
        let dskips = skips.map(|_| dskips.map(|d| d.expect("set for every stage")));
        (g, dskips)
    }

    fn encode_backward(&self, tape: &EncodeTape<T>, dz: Tensor<T>, dskips: Option<&[Tensor<T>; 3]>, grads: &mut [T]) {
        let p = &self.params;
        let mut g = self.enc[3].backward(p, &tape.0[3], dz, grads);
        for i in (0..3).rev() {
            if let Some(ds) = dskips {
                g.add_assign(&ds[i]);
            }
            g = self.enc[i].backward(p, &tape.0[i], g, grads);
        }
    }

    /// Plain reconstruction loss `MSE(decode_plain(encode(img).z), img)` and its gradient.
    pub fn plain_loss_grad(&self, img: &Image<T>) -> Result<(f64, Vec<T>)> {
        let x = Tensor::from_image(img);
        let (enc, etape) = self.encode_taped(&x)?;
        let (y, dtape) = self.decode_taped(&enc.z, None)?;
        let (loss, dy) = mse_grad(&y, &x);
        let mut grads = vec![T::zero(); self.params.len()];
        let (dz, _) = self.decode_backward(&dtape, None, dy, &mut grads);
        self.encode_backward(&etape, dz, None, &mut grads);
        Ok((loss, grads))
    }

    /// Bypass loss `MSE(decode_bypass(encode(clean).z, encode(distorted).skips), clean)`.
    ///
    /// With `through_encoder` the gradient also flows into the encoder along
    /// both the latent and the skip paths; otherwise encoder entries stay zero.
    pub fn bypass_loss_grad(
        &self,
        clean: &Image<T>,
        distorted: &Image<T>,
        through_encoder: bool,
    ) -> Result<(f64, Vec<T>)> {
        let x = Tensor::from_image(clean);
        let xd = Tensor::from_image(distorted);
        if !x.same_shape(&xd) {
            return Err(Error::invalid("clean and distorted images differ in shape"));
        }
        let (enc, etape) = self.encode_taped(&x)?;
        let (enc_d, etape_d) = self.encode_taped(&xd)?;
        let (y, dtape) = self.decode_taped(&enc.z, Some(&enc_d.skips))?;
        let (loss, dy) = mse_grad(&y, &x);
        let mut grads = vec![T::zero(); self.params.len()];
        let (dz, dskips) = self.decode_backward(&dtape, Some(&enc_d.skips), dy, &mut grads);
        if through_encoder {
            let zeros = |t: &Tensor<T>| Tensor::zeros(t.channels, t.height, t.width);
            self.encode_backward(&etape, dz, None, &mut grads);
            // The distorted branch only feeds skips; its latent gradient is zero.
            self.encode_backward(&etape_d, zeros(&enc_d.z), dskips.as_ref(), &mut grads);
        }
        Ok((loss, grads))
    }
}

fn mse_grad<T: Scalar>(y: &Tensor<T>, target: &Tensor<T>) -> (f64, Tensor<T>) {
    let n = y.data.len() as f64;
    let mut loss = 0.0;
    let data = y
        .data
        .iter()
        .zip(&target.data)
        .map(|(&a, &b)| {
            let d = a.f64() - b.f64();
            loss += d * d;
            T::of(2.0 * d / n)
        })
        .collect();
    (
        loss / n,
        Tensor {
            data,
            channels: y.channels,
            height: y.height,
            width: y.width,
        },
    )
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BypassConfig {
    pub widths: [usize; 3],
    pub image_size: usize,
    pub pretrain_steps: usize,
    pub pretrain_lr: f64,
    pub steps: usize,
    pub lr: f64,
    pub batch: usize,
    pub clip_norm: f64,
    pub seed: u64,
    pub jitter: JitterRanges,
    /// Apply illumination jitter and noise to the skip source; off reduces
    /// the fusion objective to plain reconstruction.
    pub distort: bool,
}

impl Default for BypassConfig {
    fn default() -> Self {
        BypassConfig {
            widths: ToyAe::<f32>::DEFAULT_WIDTHS,
            image_size: 64,
            pretrain_steps: 1500,
            pretrain_lr: 0.05,
            steps: 400,
            lr: 0.05,
            batch: 2,
            clip_norm: 1.0,
            seed: 7,
            jitter: JitterRanges::default(),
            distort: true,
        }
    }
}

impl BypassConfig {
    pub fn validate(&self) -> Result<()> {
        if self.image_size == 0 || !self.image_size.is_multiple_of(8) {
            return Err(Error::invalid(format!(
                "image_size must be a positive multiple of 8, got {}",
                self.image_size
            )));
        }
        if self.batch == 0 || !(self.lr >= 0.0 && self.pretrain_lr >= 0.0 && self.clip_norm > 0.0) {
            return Err(Error::invalid(
                "batch must be positive, learning rates >= 0, clip_norm > 0",
            ));
        }
        Ok(())
    }
}

/// Clean/distorted training pair `index` of the stream `seed`.
pub fn make_pair<T: Scalar>(cfg: &BypassConfig, seed: u64, index: u64) -> Result<(Image<T>, Image<T>)> {
    let item = derive_index(seed, index);
    let clean: Image<T> = synthetic_image(cfg.image_size, cfg.image_size, derive_seed(item, "image"))?;
    if !cfg.distort {
        return Ok((clean.clone(), clean));
    }
    let illum = cfg.jitter.draw_illumination(derive_seed(item, "illumination"));
    let noise = cfg.jitter.draw_noise(derive_seed(item, "noise"));
    let distorted = add_gauss_poisson(&apply_illumination(&clean, &illum)?, &noise)?;
    Ok((clean, distorted))
}

/// One point of a training trace (batch-mean MSE).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AeRecord {
    pub step: usize,
    pub loss: f64,
}

/// `step,loss` with a header row.
pub fn ae_trace_to_csv(trace: &[AeRecord]) -> String {
    let mut s = String::from("step,loss\n");
    for r in trace {
        s.push_str(&format!("{},{:e}\n", r.step, r.loss));
    }
    s
}

fn run_sgd<T: Scalar>(
    ae: &mut ToyAe<T>,
    steps: usize,
    lr: f64,
    cfg: &BypassConfig,
    mask: &[bool],
    mut example: impl FnMut(&ToyAe<T>, u64) -> Result<(f64, Vec<T>)>,
) -> Result<Vec<AeRecord>> {
    let mut trace = Vec::with_capacity(steps);
    let inv = T::of(1.0 / cfg.batch as f64);
    for step in 0..steps {
        let mut grads = vec![T::zero(); ae.param_count()];
        let mut loss = 0.0;
        for b in 0..cfg.batch {
            let (l, g) = example(ae, (step * cfg.batch + b) as u64)?;
            loss += l / cfg.batch as f64;
            grads.iter_mut().zip(&g).for_each(|(a, &v)| *a += v * inv);
        }
        if !loss.is_finite() {
            return Err(Error::Diverged { step, loss });
        }
        grads.iter_mut().zip(mask).for_each(|(g, &m)| {
            if !m {
                *g = T::zero()
            }
        });
        clip_grad_norm(&mut grads, cfg.clip_norm);
        sgd_step(&mut ae.params, &grads, lr, Some(mask));
        trace.push(AeRecord { step, loss });
    }
    Ok(trace)
}

/// Phase one: encoder and decoder learn `I -> I` through the latent only.
pub fn pretrain_plain<T: Scalar>(ae: &mut ToyAe<T>, cfg: &BypassConfig) -> Result<Vec<AeRecord>> {
    cfg.validate()?;
    let mask = ae.mask(&[Group::Encoder, Group::Decoder]);
    let seed = derive_seed(cfg.seed, "pretrain-data");
    run_sgd(ae, cfg.pretrain_steps, cfg.pretrain_lr, cfg, &mask, |ae, i| {
        let img: Image<T> = synthetic_image(cfg.image_size, cfg.image_size, derive_index(seed, i))?;
        ae.plain_loss_grad(&img)
    })
}

/// Phase two: with encoder and decoder frozen, fusion and residual layers
/// learn to rebuild `I` from its latent and the skips of a distorted copy.
pub fn train_bypass<T: Scalar>(ae: &mut ToyAe<T>, cfg: &BypassConfig) -> Result<Vec<AeRecord>> {
    cfg.validate()?;
    let mask = ae.mask(&[Group::Fusion, Group::Post]);
    let seed = derive_seed(cfg.seed, "bypass-data");
    run_sgd(ae, cfg.steps, cfg.lr, cfg, &mask, |ae, i| {
        let (clean, distorted) = make_pair::<T>(cfg, seed, i)?;
        ae.bypass_loss_grad(&clean, &distorted, false)
    })
}

/// Both phases from a fresh initialization.
pub fn train_toy_ae<T: Scalar>(cfg: &BypassConfig) -> Result<(ToyAe<T>, Vec<AeRecord>, Vec<AeRecord>)> {
    cfg.validate()?;
    let mut ae = ToyAe::new(cfg.widths, derive_seed(cfg.seed, "init"))?;
    let pre = pretrain_plain(&mut ae, cfg)?;
    let fuse = train_bypass(&mut ae, cfg)?;
    Ok((ae, pre, fuse))
}

/// Rec. 709 luma averaged over the image.
pub fn mean_luminance<T: Scalar>(img: &Image<T>) -> f64 {
    let n = img.pixel_count().max(1) as f64;
    (0..img.pixel_count())
        .map(|i| {
            let p = img.pixel(i);
            0.2126 * p[0].f64() + 0.7152 * p[1].f64() + 0.0722 * p[2].f64()
        })
        .sum::<f64>()
        / n
}

/// Decoding quality of one held-out pair.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BypassScore {
    pub mse_plain: f64,
    pub mse_bypass: f64,
    pub luminance_clean: f64,
    pub luminance_distorted: f64,
    pub luminance_bypass: f64,
}

/// Scores `count` held-out pairs drawn like the training pairs from stream `seed`.
pub fn evaluate_bypass<T: Scalar>(
    ae: &ToyAe<T>,
    cfg: &BypassConfig,
    count: usize,
    seed: u64,
) -> Result<Vec<BypassScore>> {
    let stream = derive_seed(seed, "bypass-holdout");
    (0..count as u64)
        .map(|i| {
            let (clean, distorted) = make_pair::<T>(cfg, stream, i)?;
            let z = ae.encode(&clean)?.z;
            let skips = ae.encode(&distorted)?.skips;
            let plain = ae.decode_plain(&z)?;
            let bypass = ae.decode_bypass(&z, &skips)?;
            let err = |a: &Image<T>| crate::diffusion::mse(a.data(), clean.data());
            Ok(BypassScore {
                mse_plain: err(&plain)?,
                mse_bypass: err(&bypass)?,
                luminance_clean: mean_luminance(&clean),
                luminance_distorted: mean_luminance(&distorted),
                luminance_bypass: mean_luminance(&bypass),
            })
        })
        .collect()
}
