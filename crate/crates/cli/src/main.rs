//! `qprior`: command-line front end for the quadruple-prior toolkit.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use quadprior::audit;
use quadprior::bypass::{ae_trace_to_csv, train_toy_ae, BypassConfig};
use quadprior::checkpoint::{load_convnet, save_ae, save_convnet};
use quadprior::distortion::{add_gauss_poisson, apply_illumination, IlluminationSpec, NoiseSpec};
use quadprior::image::{load_png, save_png, write_atomic, write_qpt};
use quadprior::metrics::report;
use quadprior::prior::{extract_prior, ColorModel};
use quadprior::rng::derive_seed;
use quadprior::toymodel::{enhance_toy, trace_to_csv, train_toy, TrainConfig};
use quadprior::{Error, ImageF};

#[derive(Parser, Debug)]
#[command(
    name = "qprior",
    version,
    about = "Illumination-invariant prior, toy diffusion enhancer and bypass decoder"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Extract the quadruple prior of a PNG into a QPT1 file.
    Prior(PriorArgs),
    /// Apply an illumination change and sensor noise to a PNG.
    Distort(DistortArgs),
    /// Train the toy diffusion denoiser.
    TrainToy(TrainToyArgs),
    /// Train the toy autoencoder and its bypass decoder.
    TrainBypass(TrainBypassArgs),
    /// Enhance a low-light PNG with a trained denoiser.
    Enhance(EnhanceArgs),
    /// Score enhanced images against references (CSV output).
    Eval(EvalArgs),
    /// Run the invariance, round-trip, gradient and metric checks.
    Selftest(SelftestArgs),
}

#[derive(Args, Debug)]
struct PriorArgs {
    input: PathBuf,
    output: PathBuf,
    /// Color model JSON ({"W": [[..]], "sigma": ..}).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    sigma: Option<f64>,
    /// Also write each channel as a normalized PNG into this directory.
    #[arg(long)]
    viz: Option<PathBuf>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
struct DistortConfig {
    illumination: IlluminationSpec,
    noise: Option<NoiseSpec>,
}

#[derive(Args, Debug)]
struct DistortArgs {
    input: PathBuf,
    output: PathBuf,
    /// JSON with optional "illumination" and "noise" objects.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    gain: Option<f64>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    field_sigma: Option<f64>,
    #[arg(long, num_args = 2, value_names = ["LO", "HI"])]
    field_range: Option<Vec<f64>>,
    #[arg(long)]
    gauss_sigma: Option<f64>,
    #[arg(long)]
    poisson_peak: Option<f64>,
    /// Master seed; field and noise seeds are derived from it.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug)]
struct TrainToyArgs {
    /// Output directory for toy.ckpt and toy_trace.csv.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    image_size: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug)]
struct TrainBypassArgs {
    /// Output directory for ae.ckpt, ae_pretrain.csv and ae_trace.csv.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    pretrain_steps: Option<usize>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    image_size: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug)]
struct EnhanceArgs {
    input: PathBuf,
    output: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Master seed; the sampling seed is derived from it.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug)]
struct EvalArgs {
    enhanced: PathBuf,
    reference: PathBuf,
    output: PathBuf,
}

#[derive(Args, Debug)]
struct SelftestArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

/// Process outcome mapped onto exit codes.
#[derive(Debug)]
enum Failure {
    Usage(String),
    Io(String),
    Numeric(String),
    Selftest,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::InvalidArgument(_) => Failure::Usage(e.to_string()),
            Error::Io { .. } | Error::Format { .. } => Failure::Io(e.to_string()),
            Error::Numeric(_) | Error::Diverged { .. } | Error::State(_) => Failure::Numeric(e.to_string()),
        }
    }
}

type CmdResult = Result<(), Failure>;

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, Failure> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))
}

fn config_or_default<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<T, Failure> {
    path.map_or_else(|| Ok(T::default()), read_json)
}

fn to_json<T: Serialize>(v: &T) -> serde_json::Value {
    serde_json::to_value(v).expect("config types serialize")
}

fn require_file(path: &Path) -> CmdResult {
    if path.is_file() {
        Ok(())
    } else {
        Err(Failure::Io(format!("{}: no such file", path.display())))
    }
}

fn ensure_dir(path: &Path) -> CmdResult {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e).into())
}

/// Min-max normalization to `[0, 1]`; constant images map to zero.
fn normalized(img: &ImageF) -> Result<ImageF, Failure> {
    let (lo, hi) = img
        .data()
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });
    let span = hi - lo;
    Ok(img.map(|v| if span > 0.0 { (v - lo) / span } else { 0.0 })?)
}

fn cmd_prior(a: PriorArgs) -> CmdResult {
    require_file(&a.input)?;
    let mut cm: ColorModel = config_or_default(a.config.as_deref())?;
    if let Some(s) = a.sigma {
        cm = cm.with_sigma(s)?;
    }
    let img: ImageF = load_png(&a.input)?;
    let prior = extract_prior(&img, &cm, None)?;
    write_qpt(&prior.to_image(), &a.output)?;
    if let Some(dir) = a.viz {
        ensure_dir(&dir)?;
        for (name, ch) in [("h", &prior.h), ("c", &prior.c), ("w", &prior.w), ("o", &prior.o)] {
            save_png(&normalized(ch)?, dir.join(format!("{name}.png")))?;
        }
    }
    println!("prior {}x{} -> {}", img.width(), img.height(), a.output.display());
    Ok(())
}

fn cmd_distort(a: DistortArgs) -> CmdResult {
    require_file(&a.input)?;
    let mut cfg: DistortConfig = config_or_default(a.config.as_deref())?;
    let il = &mut cfg.illumination;
    il.gain = a.gain.unwrap_or(il.gain);
    il.gamma = a.gamma.unwrap_or(il.gamma);
    il.field_sigma = a.field_sigma.unwrap_or(il.field_sigma);
    if let Some(r) = a.field_range {
        il.field_range = (r[0], r[1]);
    }
    il.seed = derive_seed(a.seed, "illumination");
    if a.gauss_sigma.is_some() || a.poisson_peak.is_some() {
        let n = cfg.noise.get_or_insert(NoiseSpec {
            gauss_sigma: 0.0,
            poisson_peak: 1e4,
            seed: 0,
        });
        n.gauss_sigma = a.gauss_sigma.unwrap_or(n.gauss_sigma);
        n.poisson_peak = a.poisson_peak.unwrap_or(n.poisson_peak);
    }
    if let Some(n) = cfg.noise.as_mut() {
        n.seed = derive_seed(a.seed, "noise");
    }
    let img: ImageF = load_png(&a.input)?;
    let mut out = apply_illumination(&img, &cfg.illumination)?;
    if let Some(n) = &cfg.noise {
        out = add_gauss_poisson(&out, n)?;
    }
    save_png(&out, &a.output)?;
    println!("distorted -> {}", a.output.display());
    Ok(())
}

fn cmd_train_toy(a: TrainToyArgs) -> CmdResult {
    let mut cfg: TrainConfig = config_or_default(a.config.as_deref())?;
    cfg.steps = a.steps.unwrap_or(cfg.steps);
    cfg.batch = a.batch.unwrap_or(cfg.batch);
    cfg.lr = a.lr.unwrap_or(cfg.lr);
    cfg.image_size = a.image_size.unwrap_or(cfg.image_size);
    cfg.seed = a.seed.unwrap_or(cfg.seed);
    cfg.validate()?;
    ensure_dir(&a.out)?;
    let (net, trace) = train_toy::<f32>(&cfg)?;
    save_convnet(a.out.join("toy.ckpt"), &net, cfg.seed, to_json(&cfg))?;
    write_atomic(a.out.join("toy_trace.csv"), trace_to_csv(&trace).as_bytes())?;
    let last = trace.last().map_or(f64::NAN, |r| r.loss_diff);
    println!(
        "trained {} steps, final loss {last:e} -> {}",
        trace.len(),
        a.out.display()
    );
    Ok(())
}

fn cmd_train_bypass(a: TrainBypassArgs) -> CmdResult {
    let mut cfg: BypassConfig = config_or_default(a.config.as_deref())?;
    cfg.pretrain_steps = a.pretrain_steps.unwrap_or(cfg.pretrain_steps);
    cfg.steps = a.steps.unwrap_or(cfg.steps);
    cfg.image_size = a.image_size.unwrap_or(cfg.image_size);
    cfg.seed = a.seed.unwrap_or(cfg.seed);
    cfg.validate()?;
    ensure_dir(&a.out)?;
    let (ae, pre, fused) = train_toy_ae::<f32>(&cfg)?;
    save_ae(a.out.join("ae.ckpt"), &ae, cfg.seed, to_json(&cfg))?;
    write_atomic(a.out.join("ae_pretrain.csv"), ae_trace_to_csv(&pre).as_bytes())?;
    write_atomic(a.out.join("ae_trace.csv"), ae_trace_to_csv(&fused).as_bytes())?;
    let last = fused.last().map_or(f64::NAN, |r| r.loss);
    println!(
        "trained {}+{} steps, final loss {last:e} -> {}",
        pre.len(),
        fused.len(),
        a.out.display()
    );
    Ok(())
}

fn cmd_enhance(a: EnhanceArgs) -> CmdResult {
    require_file(&a.input)?;
    require_file(&a.checkpoint)?;
    let (net, header) = load_convnet::<f32>(&a.checkpoint)?;
    let cfg: TrainConfig = serde_json::from_value(header.config)
        .map_err(|e| Failure::Io(format!("{}: bad training config: {e}", a.checkpoint.display())))?;
    let low: ImageF = load_png(&a.input)?;
    let out = enhance_toy(
        &net,
        &low,
        &cfg.color_model,
        &cfg.schedule,
        derive_seed(a.seed, "sample"),
    )?;
    save_png(&out, &a.output)?;
    println!("enhanced -> {}", a.output.display());
    Ok(())
}

fn png_names(dir: &Path) -> Result<Vec<String>, Failure> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut names = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if name.to_ascii_lowercase().ends_with(".png") {
            names.push(name);
        }
    }
    names.sort();
    Ok(names)
}

fn cmd_eval(a: EvalArgs) -> CmdResult {
    let names = png_names(&a.enhanced)?;
    if names.is_empty() {
        return Err(Failure::Io(format!("{}: no PNG files", a.enhanced.display())));
    }
    let mut csv = String::from("filename,psnr,ssim,loe\n");
    for name in &names {
        let enh: ImageF = load_png(a.enhanced.join(name))?;
        let reference: ImageF = load_png(a.reference.join(name))?;
        let r = report(&enh, &reference)?;
        csv.push_str(&format!("{name},{:.6},{:.6},{:.6}\n", r.psnr, r.ssim, r.loe));
    }
    write_atomic(&a.output, csv.as_bytes())?;
    println!("scored {} images -> {}", names.len(), a.output.display());
    Ok(())
}

fn cmd_selftest(a: SelftestArgs) -> CmdResult {
    let checks = audit::selftest(a.seed)?;
    for c in &checks {
        println!("{c}");
    }
    if checks.iter().all(|c| c.passed) {
        Ok(())
    } else {
        Err(Failure::Selftest)
    }
}

fn run(cli: Cli) -> CmdResult {
    match cli.command {
        Command::Prior(a) => cmd_prior(a),
        Command::Distort(a) => cmd_distort(a),
        Command::TrainToy(a) => cmd_train_toy(a),
        Command::TrainBypass(a) => cmd_train_bypass(a),
        Command::Enhance(a) => cmd_enhance(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Selftest(a) => cmd_selftest(a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
        Err(Failure::Io(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
        Err(Failure::Numeric(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(3)
        }
        Err(Failure::Selftest) => {
            eprintln!("error: selftest failed");
            ExitCode::from(4)
        }
    }
}
