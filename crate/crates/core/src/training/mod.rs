//! Losses, optimizer and the training loop.

mod config;

pub use config::{BackboneKind, BackgroundSet, LrSchedule, TrainConfig, TrainMode};

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use ndarray::{s, Array2, Array3, ArrayD, ArrayView2, ArrayView3, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::backbone::{Backbone, EncodedImage, ImageBatch, SeparableLayout};
use crate::camgen::{build_prompts, compute_cam, ClassVocabulary, PROMPT_TEMPLATE, VOC_BACKGROUND};
use crate::datakit::{synthetic_palette, Sample, IGNORE_LABEL};
use crate::decoder::Decoder;
use crate::error::{Error, Result};
use crate::nn::Params;
use crate::rfm::{refine_pseudo_labels, PseudoLabelMap};

const PROB_CLAMP: f64 = 1e-7;

/// Same-label indicator over the flattened grid.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AffinityLabel {
    pub values: Array2<bool>,
}

pub fn affinity_label(labels: &Array2<usize>, num_classes: usize) -> Result<AffinityLabel> {
    if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
        return Err(Error::LabelOutOfRange {
            label: bad,
            classes: num_classes,
        });
    }
    let flat: Vec<usize> = labels.iter().copied().collect();
    let n = flat.len();
    Ok(AffinityLabel {
        values: Array2::from_shape_fn((n, n), |(i, j)| flat[i] == flat[j]),
    })
}

/// Nearest-neighbour upsampling of a label map.
pub fn upsample_labels(labels: &Array2<usize>, height: usize, width: usize) -> Array2<usize> {
    let (h, w) = labels.dim();
    Array2::from_shape_fn((height, width), |(y, x)| {
        labels[[y * h / height, x * w / width]]
    })
}

fn check_targets(logits: &Array3<f64>, target: &Array2<usize>) -> Result<()> {
    let (c, h, w) = logits.dim();
    if target.dim() != (h, w) {
        return Err(Error::shape("segmentation target", (h, w), target.dim()));
    }
    if let Some(&bad) = target.iter().find(|&&l| l >= c && l != IGNORE_LABEL) {
        return Err(Error::LabelOutOfRange {
            label: bad,
            classes: c,
        });
    }
    Ok(())
}

/// Softmax cross-entropy averaged over pixels not marked [`IGNORE_LABEL`],
/// with its gradient with respect to the logits.
pub fn segmentation_loss_grad(
    logits: &Array3<f64>,
    target: &Array2<usize>,
) -> Result<(f64, Array3<f64>)> {
    check_targets(logits, target)?;
    let (c, h, w) = logits.dim();
    let mut grad = Array3::zeros((c, h, w));
    let valid = target.iter().filter(|&&l| l != IGNORE_LABEL).count();
    if valid == 0 {
        return Ok((0.0, grad));
    }
    let scale = 1.0 / valid as f64;
    let mut total = 0.0;
    for y in 0..h {
        for x in 0..w {
            let t = target[[y, x]];
            if t == IGNORE_LABEL {
                continue;
            }
            let lane = logits.slice(s![.., y, x]);
            let max = lane.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            let sum: f64 = lane.iter().map(|&v| (v - max).exp()).sum();
            let log_z = max + sum.ln();
            total += log_z - lane[t];
            for k in 0..c {
                let p = (lane[k] - log_z).exp();
                grad[[k, y, x]] = (p - if k == t { 1.0 } else { 0.0 }) * scale;
            }
        }
    }
    Ok((total * scale, grad))
}

pub fn segmentation_loss(logits: &Array3<f64>, target: &Array2<usize>) -> Result<f64> {
    segmentation_loss_grad(logits, target).map(|(l, _)| l)
}

/// Mean binary cross-entropy over all pairs with probabilities clamped to
/// `[1e-7, 1 - 1e-7]`, and its gradient with respect to `A_f`
/// (zero where the clamp is active).
pub fn affinity_loss_grad(
    affinity: ArrayView2<'_, f64>,
    target: &AffinityLabel,
) -> Result<(f64, Array2<f64>)> {
    if affinity.dim() != target.values.dim() {
        return Err(Error::shape(
            "affinity_loss",
            target.values.dim(),
            affinity.dim(),
        ));
    }
    let n = affinity.len() as f64;
    let mut grad = Array2::zeros(affinity.dim());
    let mut total = 0.0;
    for ((idx, &a), &y) in affinity.indexed_iter().zip(target.values.iter()) {
        let p = a.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
        let clamped = p != a;
        if y {
            total -= p.ln();
            if !clamped {
                grad[idx] = -1.0 / (p * n);
            }
        } else {
            total -= (1.0 - p).ln();
            if !clamped {
                grad[idx] = 1.0 / ((1.0 - p) * n);
            }
        }
    }
    Ok((total / n, grad))
}

pub fn affinity_loss(affinity: ArrayView2<'_, f64>, target: &AffinityLabel) -> Result<f64> {
    affinity_loss_grad(affinity, target).map(|(l, _)| l)
}

/// Gradient with respect to `F_u` of a loss on `A_f = sigmoid(F_u F_u^T)`.
pub fn affinity_backward(
    fused: ArrayView2<'_, f64>,
    affinity: ArrayView2<'_, f64>,
    d_affinity: &Array2<f64>,
) -> Array2<f64> {
    let d_gram = d_affinity * &affinity.mapv(|a| a * (1.0 - a));
    let sym = &d_gram + &d_gram.t();
    sym.dot(&fused)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub seg_loss: f64,
    pub aff_loss: f64,
    pub total: f64,
    pub lambda: f64,
}

pub fn total_loss(seg_loss: f64, aff_loss: f64, lambda: f64) -> Result<LossBreakdown> {
    if !(lambda >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "lambda {lambda} must be >= 0"
        )));
    }
    Ok(LossBreakdown {
        seg_loss,
        aff_loss,
        total: seg_loss + lambda * aff_loss,
        lambda,
    })
}

/// Adam with decoupled weight decay.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    m: Vec<ArrayD<f64>>,
    v: Vec<ArrayD<f64>>,
}

impl AdamW {
    pub fn new(params: &impl Params, weight_decay: f64) -> Self {
        let mut m = Vec::new();
        params.visit("", &mut |_, t| m.push(ArrayD::zeros(t.raw_dim())));
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            v: m.clone(),
            m,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn step<P: Params>(&mut self, params: &mut P, grads: &P, lr: f64) {
        self.step += 1;
        let mut g = Vec::with_capacity(self.m.len());
        grads.visit("", &mut |_, t| g.push(t.to_owned()));
        let (b1, b2) = (self.beta1, self.beta2);
        let bc1 = 1.0 - b1.powi(self.step as i32);
        let bc2 = 1.0 - b2.powi(self.step as i32);
        let decay = 1.0 - lr * self.weight_decay;
        let mut i = 0;
        let (m, v, eps) = (&mut self.m, &mut self.v, self.eps);
        params.visit_mut("", &mut |_, mut p| {
            let (mi, vi, gi) = (&mut m[i], &mut v[i], &g[i]);
            ndarray::Zip::from(&mut p)
                .and(mi)
                .and(vi)
                .and(gi)
                .for_each(|p, m, v, &g| {
                    *m = b1 * *m + (1.0 - b1) * g;
                    *v = b2 * *v + (1.0 - b2) * g * g;
                    *p *= decay;
                    *p -= lr * (*m / bc1) / ((*v / bc2).sqrt() + eps);
                });
            i += 1;
        });
    }
}

/// Learning rate at 0-based `step`.
pub fn learning_rate(cfg: &TrainConfig, step: usize) -> f64 {
    let base = match cfg.lr_schedule {
        LrSchedule::Constant => cfg.lr,
        LrSchedule::Poly => {
            let frac = if cfg.max_iters == 0 {
                0.0
            } else {
                step as f64 / cfg.max_iters as f64
            };
            cfg.lr * (1.0 - frac).max(0.0).powf(cfg.poly_power)
        }
    };
    if step < cfg.warmup_iters {
        base * (step + 1) as f64 / cfg.warmup_iters as f64
    } else {
        base
    }
}

/// Frozen backbone plus trainable decoder.
#[derive(Debug, Clone)]
pub struct Segmenter {
    pub backbone: Backbone,
    pub decoder: Decoder,
}

impl Segmenter {
    /// Class logits `(C, H, W)` for one `(3, H, W)` image.
    pub fn logits(&self, image: ArrayView3<'_, f64>) -> Result<Array3<f64>> {
        let (_, h, w) = image.dim();
        let batch = ImageBatch::from_images(&[image.to_owned()])?;
        let enc = self.backbone.encode_image(&batch)?;
        let (pred, _) = self.decoder.forward(&enc.features, 0, (h, w))?;
        Ok(pred.logits)
    }

    pub fn trainable_parameter_names(&self) -> Vec<String> {
        self.decoder.parameter_names()
    }
}

/// Foreground class names plus the chosen background prompt set.
pub fn vocabulary_for(cfg: &TrainConfig, class_names: &[String]) -> Result<ClassVocabulary> {
    let background = VOC_BACKGROUND
        .iter()
        .filter(|s| cfg.background_set == BackgroundSet::Voc || !matches!(**s, "sign" | "keyboard"))
        .map(|s| s.to_string())
        .collect();
    ClassVocabulary::new(class_names.to_vec(), background, PROMPT_TEMPLATE)
}

/// Builds the frozen encoder described by the config.
pub fn build_backbone(cfg: &TrainConfig, class_names: &[String]) -> Result<Backbone> {
    let bcfg = cfg.backbone_config();
    match cfg.backbone {
        BackboneKind::Pretrained => Backbone::from_archive(bcfg, &cfg.backbone_weights),
        BackboneKind::Synthetic => Backbone::synthetic(bcfg, cfg.backbone_seed),
        BackboneKind::Separable => {
            let vocab = vocabulary_for(cfg, class_names)?;
            let mut class_prompts = vec![vocab.prompt(&vocab.background[0])];
            class_prompts.extend(class_names.iter().map(|n| vocab.prompt(n)));
            let layout = SeparableLayout {
                palette: synthetic_palette(class_names.len()),
                class_prompts,
                noise_sigma: cfg.separable_noise,
                indicator_attention: cfg.indicator_attention,
            };
            Backbone::synthetic_separable(bcfg, cfg.backbone_seed, layout)
        }
    }
}

/// Random crop (zero / ignore padded when the image is smaller) and horizontal flip.
pub fn augment(sample: &Sample, cfg: &TrainConfig, rng: &mut impl Rng) -> Sample {
    let (_, h, w) = sample.image.dim();
    let mut image = sample.image.clone();
    let mut mask = sample.mask.clone();
    if cfg.random_crop && (h != cfg.crop_size || w != cfg.crop_size) {
        let size = cfg.crop_size;
        let (ph, pw) = (h.max(size), w.max(size));
        let mut padded = Array3::zeros((3, ph, pw));
        padded.slice_mut(s![.., ..h, ..w]).assign(&image);
        let mut padded_mask = mask.as_ref().map(|m| {
            let mut pm = Array2::from_elem((ph, pw), IGNORE_LABEL as u8);
            pm.slice_mut(s![..h, ..w]).assign(m);
            pm
        });
        let y0 = rng.random_range(0..=ph - size);
        let x0 = rng.random_range(0..=pw - size);
        image = padded
            .slice(s![.., y0..y0 + size, x0..x0 + size])
            .to_owned();
        mask = padded_mask
            .take()
            .map(|m| m.slice(s![y0..y0 + size, x0..x0 + size]).to_owned());
    }
    if cfg.hflip && rng.random_bool(0.5) {
        image.invert_axis(Axis(2));
        image = image.as_standard_layout().into_owned();
        if let Some(m) = mask.as_mut() {
            m.invert_axis(Axis(1));
            *m = m.as_standard_layout().into_owned();
        }
    }
    Sample {
        id: sample.id.clone(),
        image,
        labels: sample.labels.clone(),
        mask,
    }
}

/// Online pseudo labels for one encoded sample, computed without gradients.
pub struct PseudoLabelResult {
    pub pseudo: PseudoLabelMap,
    pub affinity: Array2<f64>,
    /// max refined score per grid cell
    pub confidence: Array2<f64>,
}

pub struct Trainer {
    pub config: TrainConfig,
    pub segmenter: Segmenter,
    pub vocabulary: ClassVocabulary,
    optimizer: AdamW,
    step: usize,
}

struct SampleOutcome {
    seg: f64,
    aff: f64,
    grads: Decoder,
}

impl Trainer {
    pub fn new(config: TrainConfig, backbone: Backbone, class_names: &[String]) -> Result<Self> {
        config.validate()?;
        if backbone.config().num_blocks != config.backbone_blocks
            || backbone.config().token_dim != config.backbone_dim
        {
            return Err(Error::Config(
                "backbone shape differs from backbone_blocks/backbone_dim".into(),
            ));
        }
        let vocabulary = vocabulary_for(&config, class_names)?;
        let decoder = Decoder::new(config.decoder_config(class_names.len() + 1), config.seed)?;
        let optimizer = AdamW::new(&decoder, config.weight_decay);
        Ok(Self {
            config,
            segmenter: Segmenter { backbone, decoder },
            vocabulary,
            optimizer,
            step: 0,
        })
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    pub fn num_classes(&self) -> usize {
        self.vocabulary.foreground.len() + 1
    }

    /// One optimizer update on an already augmented batch of equal-sized images.
    pub fn train_step(&mut self, batch: &[Sample]) -> Result<LossBreakdown> {
        if batch.is_empty() {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        let images: Vec<Array3<f64>> = batch.iter().map(|s| s.image.clone()).collect();
        let enc = self
            .segmenter
            .backbone
            .encode_image(&ImageBatch::from_images(&images)?)?;
        let outcomes: Vec<SampleOutcome> = (0..batch.len())
            .into_par_iter()
            .map(|b| match self.config.mode {
                TrainMode::Weak => self.weak_sample(&enc, b, &batch[b]),
                TrainMode::Full => self.full_sample(&enc, b, &batch[b]),
            })
            .collect::<Result<_>>()?;
        let scale = 1.0 / batch.len() as f64;
        let mut grads = self.segmenter.decoder.zeros_like();
        let (mut seg, mut aff) = (0.0, 0.0);
        for o in &outcomes {
            seg += o.seg * scale;
            aff += o.aff * scale;
            accumulate(&mut grads, &o.grads, scale);
        }
        let breakdown = total_loss(seg, aff, self.config.lambda)?;
        if !breakdown.total.is_finite() {
            return Err(Error::NonFinite(format!("loss at step {}", self.step)));
        }
        let lr = learning_rate(&self.config, self.step);
        self.optimizer.step(&mut self.segmenter.decoder, &grads, lr);
        self.step += 1;
        Ok(breakdown)
    }

    /// CAM and refinement for one sample of an encoded batch.
    pub fn pseudo_labels(
        &self,
        enc: &EncodedImage,
        b: usize,
        sample: &Sample,
        fused: ArrayView2<'_, f64>,
    ) -> Result<PseudoLabelResult> {
        if sample.labels.is_empty() {
            return Err(Error::Dataset(format!(
                "sample {} has no image-level labels",
                sample.id
            )));
        }
        let prompts = build_prompts(&self.vocabulary, &sample.labels)?;
        let text = self.segmenter.backbone.encode_text(&prompts)?;
        let cam = compute_cam(
            enc.pooled.pooled.row(b),
            enc.pooled.tokens.index_axis(Axis(0), b),
            &text,
            &self.vocabulary,
            &sample.labels,
            enc.features.grid,
            &self.config.cam_config(),
        )?;
        let attentions = enc.attentions.sample(b);
        let out = refine_pseudo_labels(
            fused,
            &attentions,
            &cam,
            Some(sample.image.view()),
            &self.config.rfm_config(),
        )?;
        let confidence = out
            .refined
            .cams
            .maps
            .fold_axis(Axis(0), f64::NEG_INFINITY, |a, &v| a.max(v));
        Ok(PseudoLabelResult {
            pseudo: out.pseudo,
            affinity: out.affinity.values,
            confidence,
        })
    }

    fn weak_sample(&self, enc: &EncodedImage, b: usize, sample: &Sample) -> Result<SampleOutcome> {
        let decoder = &self.segmenter.decoder;
        let (_, height, width) = sample.image.dim();
        let (pred, fused, cache) = decoder.forward_train(&enc.features, b, (height, width))?;
        let pl = self.pseudo_labels(enc, b, sample, fused.tokens.view())?;
        let target_grid = if self.config.confidence_threshold > 0.0 {
            let mut t = pl.pseudo.labels.clone();
            t.zip_mut_with(&pl.confidence, |l, &c| {
                if c < self.config.confidence_threshold {
                    *l = IGNORE_LABEL;
                }
            });
            t
        } else {
            pl.pseudo.labels.clone()
        };
        let target = upsample_labels(&target_grid, height, width);
        let (seg, d_logits) = segmentation_loss_grad(&pred.logits, &target)?;
        let a_hat = affinity_label(&pl.pseudo.labels, self.num_classes())?;
        let (aff, d_aff) = affinity_loss_grad(pl.affinity.view(), &a_hat)?;
        let d_fused =
            affinity_backward(fused.tokens.view(), pl.affinity.view(), &d_aff) * self.config.lambda;
        let mut grads = decoder.zeros_like();
        decoder.backward(&cache, &d_logits, Some(&d_fused), &mut grads);
        Ok(SampleOutcome { seg, aff, grads })
    }

    fn full_sample(&self, enc: &EncodedImage, b: usize, sample: &Sample) -> Result<SampleOutcome> {
        let mask = sample
            .mask
            .as_ref()
            .ok_or_else(|| Error::Dataset(format!("sample {} has no pixel mask", sample.id)))?;
        let decoder = &self.segmenter.decoder;
        let (_, height, width) = sample.image.dim();
        let (pred, _, cache) = decoder.forward_train(&enc.features, b, (height, width))?;
        let target = mask.mapv(|v| v as usize);
        let (seg, d_logits) = segmentation_loss_grad(&pred.logits, &target)?;
        let mut grads = decoder.zeros_like();
        decoder.backward(&cache, &d_logits, None, &mut grads);
        Ok(SampleOutcome {
            seg,
            aff: 0.0,
            grads,
        })
    }
}

fn accumulate(into: &mut Decoder, from: &Decoder, scale: f64) {
    let mut src = Vec::new();
    from.visit("", &mut |_, t| src.push(t.to_owned()));
    let mut i = 0;
    into.visit_mut("", &mut |_, mut t| {
        t.scaled_add(scale, &src[i]);
        i += 1;
    });
}

/// Everything a finished run leaves behind.
pub struct TrainReport {
    pub segmenter: Segmenter,
    pub history: Vec<LossBreakdown>,
    pub checkpoints: Vec<PathBuf>,
}

/// Formats one run-log line: `step seg_loss aff_loss total`.
pub fn log_line(step: usize, loss: &LossBreakdown) -> String {
    format!(
        "{step}\t{}\t{}\t{}",
        loss.seg_loss, loss.aff_loss, loss.total
    )
}

/// Runs `max_iters` steps over `samples`, shuffling each epoch with the
/// config seed. With `out_dir`, writes `run.log`, periodic
/// `checkpoints/step_<n>.tsr` and the final `decoder.tsr`.
pub fn train(
    cfg: &TrainConfig,
    backbone: Backbone,
    class_names: &[String],
    samples: &[Sample],
    out_dir: Option<&Path>,
) -> Result<TrainReport> {
    if samples.is_empty() {
        return Err(Error::Dataset("no training samples".into()));
    }
    let mut trainer = Trainer::new(cfg.clone(), backbone, class_names)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xda7a);
    let mut log = match out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir.join("checkpoints")).map_err(|e| Error::io(dir, e))?;
            let path = dir.join("run.log");
            Some((
                BufWriter::new(File::create(&path).map_err(|e| Error::io(&path, e))?),
                path,
            ))
        }
        None => None,
    };
    let mut history = Vec::with_capacity(cfg.max_iters);
    let mut checkpoints = Vec::new();
    let mut order: Vec<usize> = Vec::new();
    for step in 0..cfg.max_iters {
        let batch: Vec<Sample> = (0..cfg.batch_size)
            .map(|_| {
                if order.is_empty() {
                    order = (0..samples.len()).collect();
                    order.shuffle(&mut rng);
                    order.reverse();
                }
                let idx = order.pop().expect("refilled");
                augment(&samples[idx], cfg, &mut rng)
            })
            .collect();
        let loss = trainer.train_step(&batch)?;
        if let Some((w, path)) = log.as_mut() {
            writeln!(w, "{}", log_line(step, &loss)).map_err(|e| Error::io(path.as_path(), e))?;
        }
        history.push(loss);
        if let Some(dir) = out_dir {
            if (step + 1) % cfg.checkpoint_every == 0 {
                let path = dir
                    .join("checkpoints")
                    .join(format!("step_{:06}.tsr", step + 1));
                trainer.segmenter.decoder.to_archive().write(&path)?;
                checkpoints.push(path);
            }
        }
    }
    if let Some((mut w, path)) = log {
        w.flush().map_err(|e| Error::io(&path, e))?;
    }
    if let Some(dir) = out_dir {
        let path = dir.join("decoder.tsr");
        trainer.segmenter.decoder.to_archive().write(&path)?;
        checkpoints.push(path);
    }
    Ok(TrainReport {
        segmenter: trainer.segmenter,
        history,
        checkpoints,
    })
}

/// Pixel-supervised training: the text path and refinement are never used.
pub fn train_fully_supervised(
    cfg: &TrainConfig,
    backbone: Backbone,
    class_names: &[String],
    samples: &[Sample],
    out_dir: Option<&Path>,
) -> Result<TrainReport> {
    if let Some(s) = samples.iter().find(|s| s.mask.is_none()) {
        return Err(Error::Dataset(format!("sample {} has no pixel mask", s.id)));
    }
    let cfg = TrainConfig {
        mode: TrainMode::Full,
        ..cfg.clone()
    };
    train(&cfg, backbone, class_names, samples, out_dir)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;
    use rand::Rng;

    #[test]
    fn affinity_label_examples() {
        let a = affinity_label(&array![[0, 1], [1, 1]], 2).unwrap();
        let expected = array![
            [true, false, false, false],
            [false, true, true, true],
            [false, true, true, true],
            [false, true, true, true]
        ];
        assert_eq!(a.values, expected);
        assert!(affinity_label(&Array2::from_elem((3, 3), 2), 3)
            .unwrap()
            .values
            .iter()
            .all(|&v| v));
        assert!(affinity_label(&array![[0, 3]], 3).is_err());
    }

    #[test]
    fn segmentation_loss_examples() {
        let logits = Array3::zeros((4, 2, 3));
        let target = Array2::from_elem((2, 3), 2);
        assert!((segmentation_loss(&logits, &target).unwrap() - 4f64.ln()).abs() < 1e-12);
        let mut logits = Array3::zeros((2, 1, 1));
        logits[[1, 0, 0]] = 80.0;
        assert!(segmentation_loss(&logits, &array![[1]]).unwrap() < 1e-30);
        assert!(segmentation_loss(&logits, &array![[2]]).is_err());
        assert!(segmentation_loss(&logits, &array![[1, 1]]).is_err());
        let ignored = segmentation_loss_grad(&logits, &array![[IGNORE_LABEL]]).unwrap();
        assert_eq!(ignored.0, 0.0);
        assert!(ignored.1.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn segmentation_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let logits = Array3::from_shape_fn((3, 2, 2), |_| rng.random_range(-2.0..2.0));
        let target = array![[0, 2], [IGNORE_LABEL, 1]];
        let (_, g) = segmentation_loss_grad(&logits, &target).unwrap();
        for idx in ndarray::indices((3, 2, 2)) {
            let idx = [idx.0, idx.1, idx.2];
            let mut p = logits.clone();
            p[idx] += 1e-6;
            let mut m = logits.clone();
            m[idx] -= 1e-6;
            let num = (segmentation_loss(&p, &target).unwrap()
                - segmentation_loss(&m, &target).unwrap())
                / 2e-6;
            assert!((num - g[idx]).abs() < 1e-7);
        }
    }

    #[test]
    fn affinity_loss_examples() {
        let half = Array2::from_elem((2, 2), 0.5);
        let a = affinity_label(&array![[0, 1]], 2).unwrap();
        let flat = AffinityLabel {
            values: Array2::from_elem((1, 1), true),
        };
        assert!((affinity_loss(half.view(), &a).unwrap() - 2f64.ln()).abs() < 1e-12);
        let matched = a.values.mapv(|v| if v { 1.0 } else { 0.0 });
        let l = affinity_loss(matched.view(), &a).unwrap();
        assert!((l - -(1.0 - 1e-7f64).ln()).abs() < 1e-15);
        assert!((l - 1.0e-7).abs() < 1e-12);
        assert!(affinity_loss(half.view(), &flat).is_err());
        let (_, g) = affinity_loss_grad(matched.view(), &a).unwrap();
        assert!(g.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn affinity_path_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let f = Array2::from_shape_fn((5, 3), |_| rng.random_range(-1.0..1.0));
        let labels = array![[0, 1, 1, 0, 2]];
        let a_hat = affinity_label(&labels, 3).unwrap();
        let loss = |f: &Array2<f64>| {
            let af = crate::rfm::affinity_map(f.view()).unwrap().values;
            affinity_loss(af.view(), &a_hat).unwrap()
        };
        let af = crate::rfm::affinity_map(f.view()).unwrap().values;
        let (_, d_af) = affinity_loss_grad(af.view(), &a_hat).unwrap();
        let g = affinity_backward(f.view(), af.view(), &d_af);
        for i in 0..5 {
            for k in 0..3 {
                let mut p = f.clone();
                p[[i, k]] += 1e-6;
                let mut m = f.clone();
                m[[i, k]] -= 1e-6;
                let num = (loss(&p) - loss(&m)) / 2e-6;
                assert!((num - g[[i, k]]).abs() < 1e-7, "{num} vs {}", g[[i, k]]);
            }
        }
    }

    #[test]
    fn total_loss_examples() {
        let t = total_loss(2.0, 3.0, 0.1).unwrap();
        assert_eq!(t.total, 2.0 + 0.1 * 3.0);
        assert!((t.total - 2.3).abs() < 1e-15);
        assert_eq!(total_loss(1.5, 9.0, 0.0).unwrap().total, 1.5);
        assert_eq!(total_loss(0.0, 0.0, 0.7).unwrap().total, 0.0);
        assert!(total_loss(0.0, 0.0, -1.0).is_err());
    }

    #[test]
    fn upsampling_is_nearest() {
        let l = array![[0, 1], [2, 3]];
        let u = upsample_labels(&l, 4, 4);
        assert_eq!(
            u,
            array![[0, 0, 1, 1], [0, 0, 1, 1], [2, 2, 3, 3], [2, 2, 3, 3]]
        );
    }

    #[test]
    fn adamw_first_step_and_decay() {
        let mut p = crate::nn::Linear::zeros(1, 1);
        p.weight[[0, 0]] = 1.0;
        let mut g = crate::nn::Linear::zeros(1, 1);
        g.weight[[0, 0]] = 0.5;
        g.bias[0] = -2.0;
        let mut opt = AdamW::new(&p, 0.1);
        opt.step(&mut p, &g, 0.01);
        // bias-corrected first step moves by lr * sign(g); weight also decays by lr*wd
        assert!(
            (p.weight[[0, 0]] - (1.0 * (1.0 - 0.001) - 0.01 * 0.5 / (0.5 + 1e-8))).abs() < 1e-12
        );
        assert!((p.bias[0] - 0.01 * 2.0 / (2.0 + 1e-8)).abs() < 1e-12);
        assert_eq!(opt.steps_taken(), 1);
    }

    #[test]
    fn schedules() {
        let mut cfg = TrainConfig::default();
        assert_eq!(learning_rate(&cfg, 0), 2e-3);
        assert_eq!(learning_rate(&cfg, 29_999), 2e-3);
        cfg.lr_schedule = LrSchedule::Poly;
        cfg.max_iters = 10;
        cfg.poly_power = 1.0;
        assert!((learning_rate(&cfg, 5) - 1e-3).abs() < 1e-15);
        cfg.warmup_iters = 4;
        assert!((learning_rate(&cfg, 1) - 2e-3 * 0.9 * 0.5).abs() < 1e-15);
    }

    #[test]
    fn augment_pads_crops_and_flips() {
        let mut cfg = TrainConfig::default();
        cfg.crop_size = 4;
        cfg.hflip = true;
        let image = Array3::from_shape_fn((3, 2, 6), |(c, y, x)| (c * 100 + y * 10 + x) as f64);
        let sample = Sample {
            id: "a".into(),
            image,
            labels: vec![0],
            mask: Some(Array2::from_elem((2, 6), 1)),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..20 {
            let out = augment(&sample, &cfg, &mut rng);
            assert_eq!(out.image.dim(), (3, 4, 4));
            let mask = out.mask.unwrap();
            assert_eq!(mask.dim(), (4, 4));
            assert!(mask
                .slice(s![2.., ..])
                .iter()
                .all(|&v| v == IGNORE_LABEL as u8));
            assert!(mask.slice(s![..2, ..]).iter().all(|&v| v == 1));
        }
    }

    proptest! {
        #[test]
        fn affinity_label_is_symmetric_and_reflexive(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let labels = Array2::from_shape_fn((3, 4), |_| rng.random_range(0..4usize));
            let a = affinity_label(&labels, 4).unwrap().values;
            for i in 0..12 {
                prop_assert!(a[[i, i]]);
                for j in 0..12 {
                    prop_assert_eq!(a[[i, j]], a[[j, i]]);
                }
            }
        }
    }
}
