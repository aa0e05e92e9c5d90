//! Flat `key = value` run configuration.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::backbone::{BackboneConfig, WeightsSource};
use crate::camgen::{BackgroundMode, CamConfig};
use crate::decoder::DecoderConfig;
use crate::error::{Error, Result};
use crate::rfm::{AlphaMode, ParConfig, RfmConfig, SinkhornConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainMode {
    /// image-level tags, pseudo labels from the refinement module
    Weak,
    /// pixel masks, no text path and no refinement
    Full,
}

impl FromStr for TrainMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "weak" => Ok(Self::Weak),
            "full" => Ok(Self::Full),
            other => Err(Error::Config(format!(
                "unknown mode {other:?}, expected weak or full"
            ))),
        }
    }
}

impl std::fmt::Display for TrainMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Weak => "weak",
            Self::Full => "full",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LrSchedule {
    Constant,
    /// `lr * (1 - step / max_iters)^poly_power`
    Poly,
}

impl FromStr for LrSchedule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "constant" => Ok(Self::Constant),
            "poly" => Ok(Self::Poly),
            other => Err(Error::Config(format!("unknown lr schedule {other:?}"))),
        }
    }
}

impl std::fmt::Display for LrSchedule {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Constant => "constant",
            Self::Poly => "poly",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BackboneKind {
    /// seeded random ViT
    Synthetic,
    /// seeded ViT whose last block reports the colour layout of a synthetic dataset
    Separable,
    /// weights read from `backbone_weights`
    Pretrained,
}

impl FromStr for BackboneKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "synthetic" => Ok(Self::Synthetic),
            "separable" => Ok(Self::Separable),
            "pretrained" => Ok(Self::Pretrained),
            other => Err(Error::Config(format!("unknown backbone {other:?}"))),
        }
    }
}

impl std::fmt::Display for BackboneKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Synthetic => "synthetic",
            Self::Separable => "separable",
            Self::Pretrained => "pretrained",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BackgroundSet {
    Voc,
    Coco,
}

impl FromStr for BackgroundSet {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "voc" => Ok(Self::Voc),
            "coco" => Ok(Self::Coco),
            other => Err(Error::Config(format!("unknown background set {other:?}"))),
        }
    }
}

impl std::fmt::Display for BackgroundSet {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Voc => "voc",
            Self::Coco => "coco",
        })
    }
}

/// Every knob of a run. Defaults are the VOC settings.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub mode: TrainMode,
    pub data_root: PathBuf,
    pub train_split: String,
    pub val_split: String,
    pub batch_size: usize,
    pub max_iters: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub lr_schedule: LrSchedule,
    pub poly_power: f64,
    pub warmup_iters: usize,
    pub crop_size: usize,
    pub random_crop: bool,
    pub hflip: bool,
    pub lambda: f64,
    pub n0: usize,
    pub alpha: u32,
    pub alpha_mode: AlphaMode,
    pub box_threshold: f64,
    pub sinkhorn_iters: usize,
    pub sinkhorn_tol: f64,
    pub par: bool,
    pub par_iters: usize,
    pub par_sigma: f64,
    pub par_dilations: Vec<usize>,
    pub temperature: f64,
    pub background_mode: BackgroundMode,
    pub background_set: BackgroundSet,
    /// pixels whose refined score is below this are ignored by the segmentation loss; 0 disables
    pub confidence_threshold: f64,
    pub decoder_width: usize,
    pub decoder_depth: usize,
    pub decoder_heads: usize,
    pub decoder_ff_expansion: usize,
    pub layer_start: usize,
    pub decoder_positional: bool,
    pub scales: Vec<f64>,
    pub seed: u64,
    pub checkpoint_every: usize,
    pub backbone: BackboneKind,
    pub backbone_weights: PathBuf,
    pub backbone_blocks: usize,
    pub backbone_dim: usize,
    pub backbone_heads: usize,
    pub backbone_mlp_ratio: usize,
    pub patch_size: usize,
    pub text_dim: usize,
    pub backbone_seed: u64,
    pub separable_noise: f64,
    pub indicator_attention: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: TrainMode::Weak,
            data_root: PathBuf::from("data"),
            train_split: "train".into(),
            val_split: "val".into(),
            batch_size: 4,
            max_iters: 30_000,
            lr: 2e-3,
            weight_decay: 1e-3,
            lr_schedule: LrSchedule::Constant,
            poly_power: 0.9,
            warmup_iters: 0,
            crop_size: 320,
            random_crop: true,
            hflip: true,
            lambda: 0.1,
            n0: 6,
            alpha: 2,
            alpha_mode: AlphaMode::Matrix,
            box_threshold: 0.4,
            sinkhorn_iters: 10,
            sinkhorn_tol: 1e-3,
            par: true,
            par_iters: 10,
            par_sigma: 0.1,
            par_dilations: vec![1, 2, 4, 8, 12, 24],
            temperature: 0.01,
            background_mode: BackgroundMode::Complement,
            background_set: BackgroundSet::Voc,
            confidence_threshold: 0.0,
            decoder_width: 256,
            decoder_depth: 3,
            decoder_heads: 8,
            decoder_ff_expansion: 2,
            layer_start: 1,
            decoder_positional: false,
            scales: vec![0.75, 1.0],
            seed: 0,
            checkpoint_every: 5000,
            backbone: BackboneKind::Pretrained,
            backbone_weights: PathBuf::from("weights/vit_b16.tsr"),
            backbone_blocks: 12,
            backbone_dim: 768,
            backbone_heads: 12,
            backbone_mlp_ratio: 4,
            patch_size: 16,
            text_dim: 512,
            backbone_seed: 0,
            separable_noise: 0.0,
            indicator_attention: false,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value {value:?} for {key}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(Error::Config(format!(
            "invalid boolean {value:?} for {key}"
        ))),
    }
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse(key, s))
        .collect()
}

fn join_list<T: std::fmt::Display>(items: &[T]) -> String {
    items
        .iter()
        .map(|v| v.to_string())
        .collect::<Vec<_>>()
        .join(",")
}

impl TrainConfig {
    /// COCO-sized run: larger batch, longer schedule, COCO background prompts.
    pub fn coco() -> Self {
        Self {
            batch_size: 8,
            max_iters: 80_000,
            background_set: BackgroundSet::Coco,
            ..Self::default()
        }
    }

    /// Applies one `key = value` assignment.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let key = key.trim();
        let v = value.trim();
        match key {
            "mode" => self.mode = v.parse()?,
            "data_root" => self.data_root = PathBuf::from(v),
            "train_split" => self.train_split = v.to_string(),
            "val_split" => self.val_split = v.to_string(),
            "batch_size" => self.batch_size = parse(key, v)?,
            "max_iters" => self.max_iters = parse(key, v)?,
            "lr" => self.lr = parse(key, v)?,
            "weight_decay" => self.weight_decay = parse(key, v)?,
            "lr_schedule" => self.lr_schedule = v.parse()?,
            "poly_power" => self.poly_power = parse(key, v)?,
            "warmup_iters" => self.warmup_iters = parse(key, v)?,
            "crop_size" => self.crop_size = parse(key, v)?,
            "random_crop" => self.random_crop = parse_bool(key, v)?,
            "hflip" => self.hflip = parse_bool(key, v)?,
            "lambda" => self.lambda = parse(key, v)?,
            "n0" => self.n0 = parse(key, v)?,
            "alpha" => self.alpha = parse(key, v)?,
            "alpha_mode" => self.alpha_mode = v.parse()?,
            "box_threshold" => self.box_threshold = parse(key, v)?,
            "sinkhorn_iters" => self.sinkhorn_iters = parse(key, v)?,
            "sinkhorn_tol" => self.sinkhorn_tol = parse(key, v)?,
            "par" => self.par = parse_bool(key, v)?,
            "par_iters" => self.par_iters = parse(key, v)?,
            "par_sigma" => self.par_sigma = parse(key, v)?,
            "par_dilations" => self.par_dilations = parse_list(key, v)?,
            "temperature" => self.temperature = parse(key, v)?,
            "background_mode" => {
                self.background_mode = match v {
                    "complement" => BackgroundMode::Complement,
                    "prompts" => BackgroundMode::Prompts,
                    _ => return Err(Error::Config(format!("invalid value {v:?} for {key}"))),
                }
            }
            "background_set" => self.background_set = v.parse()?,
            "confidence_threshold" => self.confidence_threshold = parse(key, v)?,
            "decoder_width" => self.decoder_width = parse(key, v)?,
            "decoder_depth" => self.decoder_depth = parse(key, v)?,
            "decoder_heads" => self.decoder_heads = parse(key, v)?,
            "decoder_ff_expansion" => self.decoder_ff_expansion = parse(key, v)?,
            "layer_start" => self.layer_start = parse(key, v)?,
            "decoder_positional" => self.decoder_positional = parse_bool(key, v)?,
            "scales" => self.scales = parse_list(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            "checkpoint_every" => self.checkpoint_every = parse(key, v)?,
            "backbone" => self.backbone = v.parse()?,
            "backbone_weights" => self.backbone_weights = PathBuf::from(v),
            "backbone_blocks" => self.backbone_blocks = parse(key, v)?,
            "backbone_dim" => self.backbone_dim = parse(key, v)?,
            "backbone_heads" => self.backbone_heads = parse(key, v)?,
            "backbone_mlp_ratio" => self.backbone_mlp_ratio = parse(key, v)?,
            "patch_size" => self.patch_size = parse(key, v)?,
            "text_dim" => self.text_dim = parse(key, v)?,
            "backbone_seed" => self.backbone_seed = parse(key, v)?,
            "separable_noise" => self.separable_noise = parse(key, v)?,
            "indicator_attention" => self.indicator_attention = parse_bool(key, v)?,
            other => return Err(Error::Config(format!("unknown config key {other:?}"))),
        }
        Ok(())
    }

    /// Applies a `key=value` override as given on the command line.
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        let (k, v) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override {assignment:?} is not key=value")))?;
        self.set(k, v)
    }

    /// Parses config text on top of the defaults. `#` starts a comment.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.merge_text(text)?;
        Ok(cfg)
    }

    pub fn merge_text(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
            self.set(k, v)
                .map_err(|e| Error::Config(format!("line {}: {e}", n + 1)))?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }

    /// Every key, one per line, in a fixed order. Parsing it back yields `self`.
    pub fn to_text(&self) -> String {
        let background_mode = match self.background_mode {
            BackgroundMode::Complement => "complement",
            BackgroundMode::Prompts => "prompts",
        };
        let entries: Vec<(&str, String)> = vec![
            ("mode", self.mode.to_string()),
            ("data_root", self.data_root.display().to_string()),
            ("train_split", self.train_split.clone()),
            ("val_split", self.val_split.clone()),
            ("batch_size", self.batch_size.to_string()),
            ("max_iters", self.max_iters.to_string()),
            ("lr", self.lr.to_string()),
            ("weight_decay", self.weight_decay.to_string()),
            ("lr_schedule", self.lr_schedule.to_string()),
            ("poly_power", self.poly_power.to_string()),
            ("warmup_iters", self.warmup_iters.to_string()),
            ("crop_size", self.crop_size.to_string()),
            ("random_crop", self.random_crop.to_string()),
            ("hflip", self.hflip.to_string()),
            ("lambda", self.lambda.to_string()),
            ("n0", self.n0.to_string()),
            ("alpha", self.alpha.to_string()),
            ("alpha_mode", self.alpha_mode.to_string()),
            ("box_threshold", self.box_threshold.to_string()),
            ("sinkhorn_iters", self.sinkhorn_iters.to_string()),
            ("sinkhorn_tol", self.sinkhorn_tol.to_string()),
            ("par", self.par.to_string()),
            ("par_iters", self.par_iters.to_string()),
            ("par_sigma", self.par_sigma.to_string()),
            ("par_dilations", join_list(&self.par_dilations)),
            ("temperature", self.temperature.to_string()),
            ("background_mode", background_mode.to_string()),
            ("background_set", self.background_set.to_string()),
            (
                "confidence_threshold",
                self.confidence_threshold.to_string(),
            ),
            ("decoder_width", self.decoder_width.to_string()),
            ("decoder_depth", self.decoder_depth.to_string()),
            ("decoder_heads", self.decoder_heads.to_string()),
            (
                "decoder_ff_expansion",
                self.decoder_ff_expansion.to_string(),
            ),
            ("layer_start", self.layer_start.to_string()),
            ("decoder_positional", self.decoder_positional.to_string()),
            ("scales", join_list(&self.scales)),
            ("seed", self.seed.to_string()),
            ("checkpoint_every", self.checkpoint_every.to_string()),
            ("backbone", self.backbone.to_string()),
            (
                "backbone_weights",
                self.backbone_weights.display().to_string(),
            ),
            ("backbone_blocks", self.backbone_blocks.to_string()),
            ("backbone_dim", self.backbone_dim.to_string()),
            ("backbone_heads", self.backbone_heads.to_string()),
            ("backbone_mlp_ratio", self.backbone_mlp_ratio.to_string()),
            ("patch_size", self.patch_size.to_string()),
            ("text_dim", self.text_dim.to_string()),
            ("backbone_seed", self.backbone_seed.to_string()),
            ("separable_noise", self.separable_noise.to_string()),
            ("indicator_attention", self.indicator_attention.to_string()),
        ];
        let mut out = String::new();
        for (k, v) in entries {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("batch_size", self.batch_size),
            ("crop_size", self.crop_size),
            ("decoder_width", self.decoder_width),
            ("decoder_heads", self.decoder_heads),
            ("decoder_ff_expansion", self.decoder_ff_expansion),
            ("backbone_blocks", self.backbone_blocks),
            ("patch_size", self.patch_size),
            ("checkpoint_every", self.checkpoint_every),
        ];
        for (k, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{k} must be positive")));
            }
        }
        let nonneg = [
            ("lr", self.lr),
            ("weight_decay", self.weight_decay),
            ("lambda", self.lambda),
            ("poly_power", self.poly_power),
            ("confidence_threshold", self.confidence_threshold),
            ("separable_noise", self.separable_noise),
        ];
        for (k, v) in nonneg {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("{k} must be finite and >= 0")));
            }
        }
        if !(self.temperature > 0.0 && self.par_sigma > 0.0 && self.sinkhorn_tol > 0.0) {
            return Err(Error::Config(
                "temperature, par_sigma and sinkhorn_tol must be positive".into(),
            ));
        }
        if !self.crop_size.is_multiple_of(self.patch_size) {
            return Err(Error::Config(format!(
                "crop_size {} is not a multiple of patch_size {}",
                self.crop_size, self.patch_size
            )));
        }
        if self.n0 < 1 || self.n0 > self.backbone_blocks {
            return Err(Error::Config(format!(
                "n0 {} outside [1, {}]",
                self.n0, self.backbone_blocks
            )));
        }
        if self.layer_start < 1 || self.layer_start > self.backbone_blocks {
            return Err(Error::Config(format!(
                "layer_start {} outside [1, {}]",
                self.layer_start, self.backbone_blocks
            )));
        }
        if self.alpha < 1 {
            return Err(Error::Config("alpha must be >= 1".into()));
        }
        if self.scales.is_empty() || self.scales.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(Error::Config(
                "scales must be a non-empty list of positive numbers".into(),
            ));
        }
        if !self.decoder_width.is_multiple_of(self.decoder_heads) {
            return Err(Error::Config(
                "decoder_width must be a multiple of decoder_heads".into(),
            ));
        }
        Ok(())
    }

    pub fn backbone_config(&self) -> BackboneConfig {
        let grid = self.crop_size / self.patch_size;
        BackboneConfig {
            num_blocks: self.backbone_blocks,
            token_dim: self.backbone_dim,
            patch_size: self.patch_size,
            grid_h: grid,
            grid_w: grid,
            num_heads: self.backbone_heads,
            text_dim: self.text_dim,
            mlp_ratio: self.backbone_mlp_ratio,
            weights_source: match self.backbone {
                BackboneKind::Pretrained => {
                    WeightsSource::PretrainedArchive(self.backbone_weights.clone())
                }
                _ => WeightsSource::Synthetic {
                    seed: self.backbone_seed,
                },
            },
        }
    }

    /// `num_classes` includes background.
    pub fn decoder_config(&self, num_classes: usize) -> DecoderConfig {
        DecoderConfig {
            num_blocks: self.backbone_blocks,
            token_dim: self.backbone_dim,
            layer_start: self.layer_start,
            width: self.decoder_width,
            depth: self.decoder_depth,
            heads: self.decoder_heads,
            ff_expansion: self.decoder_ff_expansion,
            num_classes,
            positional: self.decoder_positional,
        }
    }

    pub fn cam_config(&self) -> CamConfig {
        CamConfig {
            temperature: self.temperature,
            background: self.background_mode,
        }
    }

    pub fn rfm_config(&self) -> RfmConfig {
        RfmConfig {
            eligible_start: self.n0,
            alpha: self.alpha,
            alpha_mode: self.alpha_mode,
            box_threshold: self.box_threshold,
            sinkhorn: SinkhornConfig {
                max_iterations: self.sinkhorn_iters,
                tolerance: self.sinkhorn_tol,
            },
            par: self.par.then(|| ParConfig {
                dilations: self.par_dilations.clone(),
                iterations: self.par_iters,
                sigma_rgb: self.par_sigma,
            }),
        }
    }
}
