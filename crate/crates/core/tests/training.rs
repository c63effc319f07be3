mod common;

use quadprior::bypass::{ae_trace_to_csv, make_pair, train_toy_ae, BypassConfig};
use quadprior::checkpoint::{load_ae, load_convnet, save_ae, save_convnet};
use quadprior::diffusion::make_linear_schedule;
use quadprior::image::Image;
use quadprior::synth::synthetic_image;
use quadprior::toymodel::{enhance_toy, trace_to_csv, train_toy, TrainConfig};

fn toy_cfg(steps: usize) -> TrainConfig {
    TrainConfig {
        steps,
        batch: 2,
        image_size: 16,
        widths: vec![10, 8, 8, 3],
        schedule: make_linear_schedule(20, 2e-3, 0.4).unwrap(),
        seed: 3,
        ..TrainConfig::default()
    }
}

fn ae_cfg() -> BypassConfig {
    BypassConfig {
        widths: [4, 8, 8],
        image_size: 16,
        pretrain_steps: 40,
        steps: 40,
        seed: 5,
        ..BypassConfig::default()
    }
}

#[test]
fn toy_trace_is_reproducible_and_golden() {
    let (net_a, a) = train_toy::<f32>(&toy_cfg(50)).unwrap();
    let (net_b, b) = train_toy::<f32>(&toy_cfg(50)).unwrap();
    assert_eq!(a, b);
    assert_eq!(net_a.params(), net_b.params());
    common::check_csv("toy_trace_small.csv", &trace_to_csv(&a), 1e-4);
}

#[test]
fn toy_checkpoint_round_trip_preserves_enhancement() {
    let cfg = toy_cfg(10);
    let (net, _) = train_toy::<f32>(&cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("toy.ckpt");
    save_convnet(&path, &net, cfg.seed, serde_json::to_value(&cfg).unwrap()).unwrap();
    let (back, header) = load_convnet::<f32>(&path).unwrap();
    assert_eq!(back.params(), net.params());
    let stored: TrainConfig = serde_json::from_value(header.config).unwrap();
    assert_eq!(stored, cfg);
    let low: Image<f32> = synthetic_image(16, 16, 8).unwrap().scale(0.2).unwrap();
    let a = enhance_toy(&net, &low, &cfg.color_model, &cfg.schedule, 1).unwrap();
    let b = enhance_toy(&back, &low, &stored.color_model, &stored.schedule, 1).unwrap();
    assert_eq!(a, b);
}

#[test]
fn bypass_traces_and_output_are_golden() {
    let cfg = ae_cfg();
    let (ae, pre, fuse) = train_toy_ae::<f32>(&cfg).unwrap();
    common::check_csv("ae_pretrain_small.csv", &ae_trace_to_csv(&pre), 1e-4);
    common::check_csv("ae_trace_small.csv", &ae_trace_to_csv(&fuse), 1e-4);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ae.ckpt");
    save_ae(&path, &ae, cfg.seed, serde_json::to_value(&cfg).unwrap()).unwrap();
    let (back, _) = load_ae::<f32>(&path).unwrap();
    assert_eq!(back.params(), ae.params());

    let (clean, distorted) = make_pair::<f32>(&cfg, 1234, 0).unwrap();
    let z = back.encode(&clean).unwrap().z;
    let skips = back.encode(&distorted).unwrap().skips;
    let out = back.decode_bypass(&z, &skips).unwrap();
    common::check_image("bypass_output_small.qpt", &out, 1e-4);
}

#[test]
fn undistorted_fusion_training_lowers_loss() {
    let cfg = BypassConfig {
        pretrain_steps: 100,
        steps: 500,
        distort: false,
        ..ae_cfg()
    };
    let (_, _, fuse) = train_toy_ae::<f32>(&cfg).unwrap();
    let mean = |r: &[quadprior::bypass::AeRecord]| r.iter().map(|x| x.loss).sum::<f64>() / r.len() as f64;
    let (first, last) = (mean(&fuse[..100]), mean(&fuse[400..]));
    assert!(last < first, "first {first} last {last}");
}
