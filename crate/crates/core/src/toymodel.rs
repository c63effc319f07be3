//! Small conditional noise predictor trained on synthetic normal-light images.
//!
//! Input channels are the noised image `z_t` (3), the stacked prior (6) and a
//! constant `t / T` plane (1). Images live in diffusion space as `2 x - 1`.

use serde::{Deserialize, Serialize};

use crate::diffusion::{loss_diff, sample_loop, ClipDenoised, Denoiser, LatentBatch, NoiseSchedule};
use crate::distortion::{apply_illumination, IlluminationSpec, JitterRanges};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::metrics::psnr;
use crate::nn::{clip_grad_norm, init_conv, sgd_step, Conv2d, Init, Op, ParamLayout, Seq, Tape, Tensor};
use crate::prior::{extract_prior, ColorModel, QuadPrior, PRIOR_CHANNELS};
use crate::rng::{derive_index, derive_seed};
use crate::scalar::Scalar;
use crate::synth::synthetic_image;

/// Channels of `z_t`.
pub const IMAGE_CHANNELS: usize = 3;
/// `z_t`, prior and the time plane.
pub const INPUT_CHANNELS: usize = IMAGE_CHANNELS + PRIOR_CHANNELS + 1;

/// Stack of 3x3 convolutions with leaky rectifiers between them; the last
/// layer starts at zero so the untrained net predicts `eps_hat = 0`.
#[derive(Clone, Debug)]
pub struct ConvNet<T> {
    widths: Vec<usize>,
    seq: Seq,
    convs: Vec<Conv2d>,
    params: Vec<T>,
    grads: Vec<T>,
    cache: Option<Tape<T>>,
}

impl<T: Scalar> ConvNet<T> {
    pub const DEFAULT_WIDTHS: [usize; 5] = [INPUT_CHANNELS, 32, 32, 32, IMAGE_CHANNELS];

    pub fn new(widths: &[usize], seed: u64) -> Result<Self> {
        let mut net = Self::layout(widths)?;
        let last = net.convs.len() - 1;
        for (i, c) in net.convs.iter().enumerate() {
            let init = if i == last { Init::Zero } else { Init::He };
            init_conv(c, init, &mut net.params, seed);
        }
        Ok(net)
    }

    /// Like [`ConvNet::new`] but with a randomly initialized output layer.
    pub fn new_dense(widths: &[usize], seed: u64) -> Result<Self> {
        let mut net = Self::layout(widths)?;
        for c in &net.convs {
            init_conv(c, Init::He, &mut net.params, seed);
        }
        Ok(net)
    }

    fn layout(widths: &[usize]) -> Result<Self> {
        if widths.len() < 2 || widths[0] != INPUT_CHANNELS || *widths.last().unwrap() != IMAGE_CHANNELS {
            return Err(Error::invalid(format!(
                "widths must run from {INPUT_CHANNELS} to {IMAGE_CHANNELS}, got {widths:?}"
            )));
        }
        if widths.contains(&0) {
            return Err(Error::invalid("zero-width layer"));
        }
        let mut lay = ParamLayout::default();
        let mut ops = Vec::new();
        let mut convs = Vec::new();
        for (i, pair) in widths.windows(2).enumerate() {
            let c = lay.conv(pair[0], pair[1], 3, true);
            convs.push(c);
            ops.push(Op::Conv(c));
            if i + 2 < widths.len() {
                ops.push(Op::LeakyRelu);
            }
        }
        Ok(ConvNet {
            widths: widths.to_vec(),
            seq: Seq(ops),
            convs,
            params: vec![T::zero(); lay.len()],
            grads: vec![T::zero(); lay.len()],
            cache: None,
        })
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn params(&self) -> &[T] {
        &self.params
    }

    pub fn grads(&self) -> &[T] {
        &self.grads
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
        self.cache = None;
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = T::zero());
    }

    /// Forward pass that keeps the activations needed by [`ConvNet::backward`].
    pub fn forward(&mut self, input: &Tensor<T>) -> Result<Tensor<T>> {
        let (out, tape) = self.seq.forward_taped(&self.params, input.clone())?;
        self.cache = Some(tape);
        Ok(out)
    }

    /// Forward pass without caching.
    pub fn predict(&self, input: &Tensor<T>) -> Result<Tensor<T>> {
        self.seq.forward(&self.params, input)
    }

    /// Activation signs of a forward pass, see [`Seq::relu_pattern`].
    pub fn relu_pattern(&self, input: &Tensor<T>) -> Result<Vec<bool>> {
        self.seq.relu_pattern(&self.params, input)
    }

    /// Accumulates `d loss / d params` for the cached forward pass and returns
    /// the gradient buffer. The cache is consumed.
    pub fn backward(&mut self, upstream: &Tensor<T>) -> Result<&[T]> {
        let tape = self
            .cache
            .take()
            .ok_or_else(|| Error::State("backward called without a cached forward pass".into()))?;
        self.seq
            .backward(&self.params, &tape, upstream.clone(), &mut self.grads);
        Ok(&self.grads)
    }

    pub(crate) fn grads_mut(&mut self) -> &mut [T] {
        &mut self.grads
    }

    pub(crate) fn params_grads_mut(&mut self) -> (&mut [T], &[T]) {
        (&mut self.params, &self.grads)
    }
}

/// Squashes the prior into a bounded range for the network input:
/// `H / pi`, `tanh(C / 4)`, `tanh(W)`, `O` unchanged.
pub fn prior_features<T: Scalar>(prior: &QuadPrior<T>) -> Tensor<T> {
    let pi = std::f64::consts::PI;
    let squash = |img: &Image<T>, f: &dyn Fn(f64) -> f64| -> Tensor<T> {
        let mut t = Tensor::from_image(img);
        t.data.iter_mut().for_each(|v| *v = T::of(f(v.f64())));
        t
    };
    let h = squash(&prior.h, &|v| v / pi);
    let c = squash(&prior.c, &|v| (v / 4.0).tanh());
    let w = squash(&prior.w, &|v| v.tanh());
    let o = Tensor::from_image(&prior.o);
    Tensor::concat(&[&h, &c, &w, &o]).expect("prior parts share dimensions")
}

/// Conditioning for the reverse chain.
#[derive(Clone, Debug)]
pub struct ToyCondition<T> {
    pub features: Tensor<T>,
    pub steps: usize,
}

impl<T: Scalar> ToyCondition<T> {
    pub fn new(prior: &QuadPrior<T>, steps: usize) -> Self {
        ToyCondition {
            features: prior_features(prior),
            steps,
        }
    }

    /// Network input for `z_t` (planar, 3 channels) at step `t`.
    pub fn input(&self, zt: &[T], t: usize) -> Result<Tensor<T>> {
        let (h, w) = (self.features.height, self.features.width);
        let z = Tensor::from_vec(IMAGE_CHANNELS, h, w, zt.to_vec())?;
        let time = Tensor::from_vec(1, h, w, vec![T::of(t as f64 / self.steps as f64); h * w])?;
        Tensor::concat(&[&z, &self.features, &time])
    }
}

impl<T: Scalar> Denoiser<T, ToyCondition<T>> for ConvNet<T> {
    fn predict_noise(&self, zt: &[T], t: usize, cond: &ToyCondition<T>) -> Result<Vec<T>> {
        Ok(self.predict(&cond.input(zt, t)?)?.data)
    }
}

pub fn to_diffusion_space<T: Scalar>(img: &Image<T>) -> Vec<T> {
    let two = T::of(2.0);
    Tensor::from_image(img)
        .data
        .into_iter()
        .map(|v| two * v - T::one())
        .collect()
}

pub fn from_diffusion_space<T: Scalar>(z: &[T], width: usize, height: usize) -> Result<Image<T>> {
    let half = T::of(0.5);
    let data = z.iter().map(|&v| (v + T::one()) * half).collect();
    Ok(Tensor::from_vec(IMAGE_CHANNELS, height, width, data)?
        .to_image()?
        .clamp01())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub clip_norm: f64,
    pub seed: u64,
    pub image_size: usize,
    pub widths: Vec<usize>,
    pub schedule: NoiseSchedule,
    pub color_model: ColorModel,
    pub jitter: JitterRanges,
    /// Corrupt the darkened copy with Gaussian-Poisson noise before prior extraction.
    pub noise_injection: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 2000,
            batch: 4,
            lr: 0.05,
            clip_norm: 1.0,
            seed: 2024,
            image_size: 32,
            widths: ConvNet::<f32>::DEFAULT_WIDTHS.to_vec(),
            schedule: NoiseSchedule::toy(),
            color_model: ColorModel::default(),
            jitter: JitterRanges::default(),
            noise_injection: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.batch == 0 || self.image_size == 0 {
            return Err(Error::invalid("steps, batch and image_size must be positive"));
        }
        if !(self.lr.is_finite() && self.lr >= 0.0) || !(self.clip_norm.is_finite() && self.clip_norm > 0.0) {
            return Err(Error::invalid(format!(
                "lr must be >= 0 and clip_norm > 0, got {} and {}",
                self.lr, self.clip_norm
            )));
        }
        Ok(())
    }
}

/// Per-step batch means of the diffusion losses.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: usize,
    pub loss_noise: f64,
    pub loss_z0: f64,
    pub loss_diff: f64,
}

/// `step,loss_noise,loss_z0,loss_diff` with a header row.
pub fn trace_to_csv(trace: &[LossRecord]) -> String {
    let mut s = String::from("step,loss_noise,loss_z0,loss_diff\n");
    for r in trace {
        s.push_str(&format!(
            "{},{:e},{:e},{:e}\n",
            r.step, r.loss_noise, r.loss_z0, r.loss_diff
        ));
    }
    s
}

/// One supervised example: clean image, its darkened copy and the prior
/// extracted from the darkened copy.
pub struct TrainingExample<T> {
    pub clean: Image<T>,
    pub dark: Image<T>,
    pub prior: QuadPrior<T>,
}

/// Builds example `index` of the stream identified by `seed`.
pub fn make_example<T: Scalar>(cfg: &TrainConfig, seed: u64, index: u64) -> Result<TrainingExample<T>> {
    let item = derive_index(seed, index);
    let clean = synthetic_image(cfg.image_size, cfg.image_size, derive_seed(item, "image"))?;
    let illum = cfg.jitter.draw_illumination(derive_seed(item, "illumination"));
    let dark = apply_illumination(&clean, &illum)?;
    let noise = cfg.jitter.draw_noise(derive_seed(item, "noise"));
    let prior = extract_prior(&dark, &cfg.color_model, cfg.noise_injection.then_some(&noise))?;
    Ok(TrainingExample { clean, dark, prior })
}

/// Loss and accumulated gradient of one example (forward + backward).
pub fn example_step<T: Scalar>(
    net: &mut ConvNet<T>,
    ex: &TrainingExample<T>,
    sched: &NoiseSchedule,
    seed: u64,
) -> Result<crate::diffusion::DiffLoss> {
    let batch = LatentBatch::draw(to_diffusion_space(&ex.clean), sched, seed)?;
    let cond = ToyCondition::new(&ex.prior, sched.steps());
    let out = net.forward(&cond.input(&batch.zt, batch.t)?)?;
    let (loss, grad) = loss_diff(&batch, &out.data, sched)?;
    net.backward(&Tensor { data: grad, ..out })?;
    Ok(loss)
}

/// SGD with global-norm clipping on the unit-weighted diffusion loss.
pub fn train_toy<T: Scalar>(cfg: &TrainConfig) -> Result<(ConvNet<T>, Vec<LossRecord>)> {
    cfg.validate()?;
    let mut net = ConvNet::<T>::new(&cfg.widths, derive_seed(cfg.seed, "init"))?;
    let data_seed = derive_seed(cfg.seed, "train-data");
    let latent_seed = derive_seed(cfg.seed, "train-latent");
    let mut trace = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        net.zero_grad();
        let mut acc = LossRecord {
            step,
            loss_noise: 0.0,
            loss_z0: 0.0,
            loss_diff: 0.0,
        };
        for b in 0..cfg.batch {
            let index = (step * cfg.batch + b) as u64;
            let ex = make_example(cfg, data_seed, index)?;
            let loss = example_step(&mut net, &ex, &cfg.schedule, derive_index(latent_seed, index))?;
            acc.loss_noise += loss.noise / cfg.batch as f64;
            acc.loss_z0 += loss.z0 / cfg.batch as f64;
        }
        acc.loss_diff = acc.loss_noise + acc.loss_z0;
        if !acc.loss_diff.is_finite() {
            return Err(Error::Diverged {
                step,
                loss: acc.loss_diff,
            });
        }
        let inv = T::of(1.0 / cfg.batch as f64);
        net.grads_mut().iter_mut().for_each(|g| *g *= inv);
        clip_grad_norm(net.grads_mut(), cfg.clip_norm);
        let (params, grads) = net.params_grads_mut();
        sgd_step(params, grads, cfg.lr, None);
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::Diverged { step, loss: f64::NAN });
        }
        trace.push(acc);
    }
    Ok((net, trace))
}

/// Prior from the low-light image, reverse chain from seeded noise, clamp.
///
/// The chain clips its running z0 estimate to the valid pixel range.
pub fn enhance_toy<T: Scalar>(
    net: &ConvNet<T>,
    low: &Image<T>,
    cm: &ColorModel,
    sched: &NoiseSchedule,
    seed: u64,
) -> Result<Image<T>> {
    let prior = extract_prior(low, cm, None)?;
    let cond = ToyCondition::new(&prior, sched.steps());
    let clipped = ClipDenoised {
        inner: net,
        sched,
        bound: 1.0,
    };
    let z = sample_loop(&clipped, &cond, IMAGE_CHANNELS * low.pixel_count(), sched, seed)?;
    from_diffusion_space(&z, low.width(), low.height())
}

/// Range of global gains applied to held-out scenes.
pub const HOLDOUT_GAIN: (f64, f64) = (0.1, 0.4);

/// Held-out scene `index` of stream `seed` and its copy darkened by a gain
/// drawn from [`HOLDOUT_GAIN`].
pub fn holdout_pair<T: Scalar>(size: usize, seed: u64, index: u64) -> Result<(Image<T>, Image<T>, f64)> {
    use rand::Rng;
    let item = derive_index(seed, index);
    let clean: Image<T> = synthetic_image(size, size, derive_seed(item, "image"))?;
    let u: f64 = crate::rng::stream(derive_seed(item, "gain"), 0).random();
    let gain = HOLDOUT_GAIN.0 + (HOLDOUT_GAIN.1 - HOLDOUT_GAIN.0) * u;
    let dark = apply_illumination(
        &clean,
        &IlluminationSpec {
            gain,
            ..Default::default()
        },
    )?;
    Ok((clean, dark, gain))
}

/// PSNR against the clean scene before and after enhancement.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HoldoutScore {
    pub index: u64,
    pub gain: f64,
    pub psnr_dark: f64,
    pub psnr_enhanced: f64,
}

impl HoldoutScore {
    pub fn improvement(&self) -> f64 {
        self.psnr_enhanced - self.psnr_dark
    }
}

/// Enhances `count` held-out scenes with the model's color model and schedule.
pub fn evaluate_holdout<T: Scalar>(
    net: &ConvNet<T>,
    cfg: &TrainConfig,
    count: usize,
    seed: u64,
) -> Result<Vec<HoldoutScore>> {
    (0..count as u64)
        .map(|index| {
            let (clean, dark, gain) = holdout_pair::<T>(cfg.image_size, seed, index)?;
            let sample_seed = derive_seed(derive_index(seed, index), "sample");
            let out = enhance_toy(net, &dark, &cfg.color_model, &cfg.schedule, sample_seed)?;
            Ok(HoldoutScore {
                index,
                gain,
                psnr_dark: psnr(&dark, &clean)?,
                psnr_enhanced: psnr(&out, &clean)?,
            })
        })
        .collect()
}

/// Moves every pixel of every prior channel by one shared random permutation.
fn shuffle_prior<T: Scalar>(prior: &QuadPrior<T>, seed: u64) -> Result<QuadPrior<T>> {
    use rand::seq::SliceRandom;
    let mut perm: Vec<usize> = (0..prior.h.pixel_count()).collect();
    perm.shuffle(&mut crate::rng::stream(seed, 0));
    let apply = |img: &Image<T>| -> Result<Image<T>> {
        let c = img.channels();
        let data = perm.iter().flat_map(|&i| img.pixel(i).to_vec()).collect::<Vec<T>>();
        debug_assert_eq!(data.len(), img.data().len());
        Image::new(img.width(), img.height(), c, data)
    };
    Ok(QuadPrior {
        h: apply(&prior.h)?,
        c: apply(&prior.c)?,
        w: apply(&prior.w)?,
        o: apply(&prior.o)?,
    })
}

/// Mean `loss_diff` over `count` validation examples; with `shuffle` the
/// prior is spatially scrambled, which breaks the condition while keeping
/// its value distribution. Both settings see identical latents.
pub fn validation_loss<T: Scalar>(
    net: &ConvNet<T>,
    cfg: &TrainConfig,
    count: usize,
    seed: u64,
    shuffle: bool,
) -> Result<f64> {
    let data_seed = derive_seed(seed, "validation-data");
    let latent_seed = derive_seed(seed, "validation-latent");
    let mut total = 0.0;
    for i in 0..count as u64 {
        let ex = make_example::<T>(cfg, data_seed, i)?;
        let prior = if shuffle {
            shuffle_prior(&ex.prior, derive_index(derive_seed(seed, "shuffle"), i))?
        } else {
            ex.prior
        };
        let batch = LatentBatch::draw(
            to_diffusion_space(&ex.clean),
            &cfg.schedule,
            derive_index(latent_seed, i),
        )?;
        let cond = ToyCondition::new(&prior, cfg.schedule.steps());
        let out = net.predict(&cond.input(&batch.zt, batch.t)?)?;
        total += loss_diff(&batch, &out.data, &cfg.schedule)?.0.total();
    }
    Ok(total / count.max(1) as f64)
}
