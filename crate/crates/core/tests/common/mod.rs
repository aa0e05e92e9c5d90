#![allow(dead_code)]

use std::path::Path;

use frozenseg::datakit::{load_dataset, make_synthetic_dataset, LoadMode, Sample, SynthConfig};
use frozenseg::training::{BackboneKind, TrainConfig, TrainMode};

pub const PATCH: usize = 8;
pub const GRID: usize = 6;

/// Small end-to-end configuration: 48x48 images, 2-block backbone, 16-wide decoder.
pub fn toy_config(mode: TrainMode) -> TrainConfig {
    let mut cfg = TrainConfig::default();
    cfg.mode = mode;
    cfg.batch_size = 4;
    cfg.max_iters = 100;
    cfg.crop_size = GRID * PATCH;
    cfg.random_crop = false;
    cfg.hflip = false;
    cfg.n0 = 1;
    cfg.decoder_width = 16;
    cfg.decoder_depth = 1;
    cfg.decoder_heads = 2;
    cfg.decoder_ff_expansion = 2;
    cfg.scales = vec![1.0];
    cfg.backbone = BackboneKind::Separable;
    cfg.backbone_blocks = 2;
    cfg.backbone_dim = 16;
    cfg.backbone_heads = 2;
    cfg.backbone_mlp_ratio = 2;
    cfg.patch_size = PATCH;
    cfg.text_dim = 8;
    cfg.checkpoint_every = 50;
    cfg
}

/// Writes a synthetic dataset (`count` images, the last `val` of them held out) and loads its splits.
pub fn toy_dataset(
    root: &Path,
    seed: u64,
    count: usize,
    val: usize,
    classes: usize,
) -> (Vec<String>, Vec<Sample>, Vec<Sample>) {
    let mut synth = SynthConfig::new(seed, count, (GRID, GRID), classes);
    synth.val_count = val;
    synth.patch_size = PATCH;
    make_synthetic_dataset(root, &synth).unwrap();
    let train = load_dataset(root, "train", LoadMode::Full).unwrap();
    let names = train.class_names.clone();
    let train = train.load_samples().unwrap();
    let val = if val > 0 {
        load_dataset(root, "val", LoadMode::Full)
            .unwrap()
            .load_samples()
            .unwrap()
    } else {
        Vec::new()
    };
    (names, train, val)
}
