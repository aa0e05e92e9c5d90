//! Frozen image/text encoder.
//!
//! A ViT-style image encoder that exposes every block's token output and
//! head-averaged attention map, plus a text encoder for class prompts.
//! Weights come either from a named-tensor archive or from a seeded
//! generator; in both cases they are immutable after construction.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use ndarray::{s, Array1, Array2, Array3, Array4, ArrayView2, ArrayView3, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::archive::TensorArchive;
use crate::error::{Error, Result};
use crate::nn::{bilinear_weights, Activation, LayerNorm, Linear, Params, TransformerLayer};

pub const CLIP_MEAN: [f64; 3] = [0.481_454_66, 0.457_827_5, 0.408_210_73];
pub const CLIP_STD: [f64; 3] = [0.268_629_54, 0.261_302_58, 0.275_777_11];

#[derive(Debug, Clone, PartialEq)]
pub enum WeightsSource {
    PretrainedArchive(PathBuf),
    Synthetic { seed: u64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct BackboneConfig {
    pub num_blocks: usize,
    pub token_dim: usize,
    pub patch_size: usize,
    /// token grid the positional embedding is stored for
    pub grid_h: usize,
    pub grid_w: usize,
    pub num_heads: usize,
    pub text_dim: usize,
    pub mlp_ratio: usize,
    pub weights_source: WeightsSource,
}

impl BackboneConfig {
    /// ViT-B/16 at a 320x320 crop.
    pub fn vit_b16() -> Self {
        Self {
            num_blocks: 12,
            token_dim: 768,
            patch_size: 16,
            grid_h: 20,
            grid_w: 20,
            num_heads: 12,
            text_dim: 512,
            mlp_ratio: 4,
            weights_source: WeightsSource::Synthetic { seed: 0 },
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("num_blocks", self.num_blocks),
            ("token_dim", self.token_dim),
            ("patch_size", self.patch_size),
            ("grid_h", self.grid_h),
            ("grid_w", self.grid_w),
            ("num_heads", self.num_heads),
            ("text_dim", self.text_dim),
            ("mlp_ratio", self.mlp_ratio),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::InvalidArgument(format!(
                    "backbone {name} must be positive"
                )));
            }
        }
        if !self.token_dim.is_multiple_of(self.num_heads) {
            return Err(Error::InvalidArgument(format!(
                "token_dim {} not divisible by {} heads",
                self.token_dim, self.num_heads
            )));
        }
        Ok(())
    }
}

/// Images in `[0, 1]`, shape `(batch, 3, H, W)`, with per-channel
/// normalisation constants applied inside the encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageBatch {
    pub pixels: Array4<f64>,
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl ImageBatch {
    pub fn new(pixels: Array4<f64>) -> Result<Self> {
        let (_, c, h, w) = pixels.dim();
        if c != 3 || h == 0 || w == 0 {
            return Err(Error::shape(
                "image batch",
                "(batch, 3, H>0, W>0)",
                pixels.dim(),
            ));
        }
        if pixels.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("image pixels".into()));
        }
        Ok(Self {
            pixels,
            mean: CLIP_MEAN,
            std: CLIP_STD,
        })
    }

    pub fn from_images(images: &[Array3<f64>]) -> Result<Self> {
        let first = images
            .first()
            .ok_or_else(|| Error::InvalidArgument("empty image batch".into()))?;
        let (c, h, w) = first.dim();
        let mut pixels = Array4::zeros((images.len(), c, h, w));
        for (mut dst, img) in pixels.outer_iter_mut().zip(images) {
            if img.dim() != (c, h, w) {
                return Err(Error::shape("image batch", (c, h, w), img.dim()));
            }
            dst.assign(img);
        }
        Self::new(pixels)
    }

    pub fn len(&self) -> usize {
        self.pixels.len_of(Axis(0))
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn height(&self) -> usize {
        self.pixels.len_of(Axis(2))
    }

    pub fn width(&self) -> usize {
        self.pixels.len_of(Axis(3))
    }
}

/// Per-block token features, `N` tensors of `(batch, h*w, d)`; class token removed.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureStack {
    pub features: Vec<Array3<f64>>,
    pub grid: (usize, usize),
}

impl FeatureStack {
    pub fn num_blocks(&self) -> usize {
        self.features.len()
    }

    /// Block `l` (1-based) for one sample, `(h*w, d)`.
    pub fn block(&self, l: usize, sample: usize) -> ArrayView2<'_, f64> {
        self.features[l - 1].index_axis(Axis(0), sample)
    }

    pub fn batch_size(&self) -> usize {
        self.features.first().map_or(0, |f| f.len_of(Axis(0)))
    }

    /// Restricts the stack to a single sample, keeping a batch axis of 1.
    pub fn select(&self, sample: usize) -> FeatureStack {
        FeatureStack {
            features: self
                .features
                .iter()
                .map(|f| f.slice(s![sample..sample + 1, .., ..]).to_owned())
                .collect(),
            grid: self.grid,
        }
    }
}

/// Per-block row-stochastic attention over spatial tokens, `N` tensors of `(batch, h*w, h*w)`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionStack {
    pub attentions: Vec<Array3<f64>>,
}

impl AttentionStack {
    /// All blocks for one sample.
    pub fn sample(&self, sample: usize) -> Vec<ArrayView2<'_, f64>> {
        self.attentions
            .iter()
            .map(|a| a.index_axis(Axis(0), sample))
            .collect()
    }
}

/// Projected final-block tokens `F` `(batch, h*w, d_embed)` and their spatial mean `F_v`.
#[derive(Debug, Clone, PartialEq)]
pub struct PooledImageEmbedding {
    pub pooled: Array2<f64>,
    pub tokens: Array3<f64>,
}

/// One embedding row per prompt, in prompt order.
#[derive(Debug, Clone, PartialEq)]
pub struct TextEmbeddings {
    pub embeddings: Array2<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncodedImage {
    pub features: FeatureStack,
    pub attentions: AttentionStack,
    pub pooled: PooledImageEmbedding,
}

/// Toy mode in which the final block reports a class embedding of the
/// image's colour layout. Each patch is assigned the palette entry
/// nearest its mean colour; palette index 0 is background.
#[derive(Debug, Clone, PartialEq)]
pub struct SeparableLayout {
    pub palette: Vec<[f64; 3]>,
    /// prompt whose text embedding the class embedding is aligned with, per palette entry
    pub class_prompts: Vec<String>,
    pub noise_sigma: f64,
    /// replace every attention map with the row-normalised same-class indicator
    pub indicator_attention: bool,
}

#[derive(Debug, Clone, PartialEq)]
struct Separable {
    layout: SeparableLayout,
    /// `(classes, token_dim)`
    class_embeddings: Array2<f64>,
}

#[derive(Debug, Clone, PartialEq)]
struct Weights {
    patch_embed: Linear,
    cls_token: Array1<f64>,
    pos_embed: Array2<f64>,
    ln_pre: LayerNorm,
    blocks: Vec<TransformerLayer>,
    ln_post: LayerNorm,
    /// `(token_dim, text_dim)`
    proj: Array2<f64>,
    separable: Option<Separable>,
}

#[derive(Debug, Clone, PartialEq)]
enum TextEncoder {
    Hashed { seed: u64 },
    Table(HashMap<String, Array1<f64>>),
}

/// Frozen encoder. Cloning shares the same immutable weights.
#[derive(Debug, Clone)]
pub struct Backbone {
    config: BackboneConfig,
    weights: Arc<Weights>,
    text: Arc<TextEncoder>,
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Deterministic unit vector for a prompt string.
pub fn hashed_text_embedding(prompt: &str, seed: u64, dim: usize) -> Array1<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(fnv1a(prompt.as_bytes()) ^ seed.rotate_left(17));
    let v = Array1::from_shape_fn(dim, |_| rng.sample::<f64, _>(StandardNormal));
    let norm = v.dot(&v).sqrt();
    v / norm
}

impl Backbone {
    /// Seeded random weights; nothing is registered as trainable.
    pub fn synthetic(config: BackboneConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut config = config;
        config.weights_source = WeightsSource::Synthetic { seed };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.token_dim;
        let p = config.patch_size;
        let tokens = 1 + config.grid_h * config.grid_w;
        let blocks = (0..config.num_blocks)
            .map(|_| {
                TransformerLayer::init(
                    d,
                    config.num_heads,
                    d * config.mlp_ratio,
                    Activation::Gelu,
                    &mut rng,
                )
            })
            .collect();
        let weights = Weights {
            patch_embed: Linear::init(3 * p * p, d, &mut rng),
            cls_token: Array1::from_shape_fn(d, |_| 0.02 * rng.sample::<f64, _>(StandardNormal)),
            pos_embed: Array2::from_shape_fn((tokens, d), |_| {
                0.02 * rng.sample::<f64, _>(StandardNormal)
            }),
            ln_pre: LayerNorm::new(d),
            blocks,
            ln_post: LayerNorm::new(d),
            proj: Array2::from_shape_fn((d, config.text_dim), |_| {
                rng.sample::<f64, _>(StandardNormal) / (d as f64).sqrt()
            }),
            separable: None,
        };
        Ok(Self {
            config,
            weights: Arc::new(weights),
            text: Arc::new(TextEncoder::Hashed { seed }),
        })
    }

    /// Synthetic backbone in separable mode. Requires `token_dim >= text_dim`;
    /// the projection becomes the leading `text_dim` coordinates and each
    /// class embedding starts with the text embedding of its prompt.
    pub fn synthetic_separable(
        config: BackboneConfig,
        seed: u64,
        layout: SeparableLayout,
    ) -> Result<Self> {
        if config.token_dim < config.text_dim {
            return Err(Error::InvalidArgument(
                "separable mode needs token_dim >= text_dim".into(),
            ));
        }
        if layout.palette.is_empty() || layout.palette.len() != layout.class_prompts.len() {
            return Err(Error::InvalidArgument(
                "separable palette and class prompts must be non-empty and equal length".into(),
            ));
        }
        let base = Self::synthetic(config, seed)?;
        let d = base.config.token_dim;
        let e = base.config.text_dim;
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(0x5eed));
        let mut class_embeddings = Array2::zeros((layout.palette.len(), d));
        for (k, prompt) in layout.class_prompts.iter().enumerate() {
            let t = hashed_text_embedding(prompt, seed, e);
            class_embeddings.slice_mut(s![k, ..e]).assign(&t);
            for j in e..d {
                class_embeddings[[k, j]] = rng.sample::<f64, _>(StandardNormal) / (d as f64).sqrt();
            }
        }
        let mut weights = (*base.weights).clone();
        weights.proj = Array2::zeros((d, e));
        for i in 0..e {
            weights.proj[[i, i]] = 1.0;
        }
        weights.separable = Some(Separable {
            layout,
            class_embeddings,
        });
        Ok(Self {
            config: base.config,
            weights: Arc::new(weights),
            text: base.text,
        })
    }

    /// Loads weights from a named-tensor archive. Text embeddings are read
    /// from `text/<prompt>` entries.
    pub fn from_archive(config: BackboneConfig, path: &Path) -> Result<Self> {
        config.validate()?;
        let archive = TensorArchive::read(path)?;
        let mut config = config;
        config.weights_source = WeightsSource::PretrainedArchive(path.to_path_buf());
        Self::from_tensor_archive(config, &archive)
    }

    pub fn from_tensor_archive(config: BackboneConfig, archive: &TensorArchive) -> Result<Self> {
        config.validate()?;
        let d = config.token_dim;
        let p = config.patch_size;
        let tokens = 1 + config.grid_h * config.grid_w;
        let mut weights = Weights {
            patch_embed: Linear::zeros(3 * p * p, d),
            cls_token: Array1::zeros(d),
            pos_embed: Array2::zeros((tokens, d)),
            ln_pre: LayerNorm::new(d),
            blocks: (0..config.num_blocks)
                .map(|_| {
                    let mut rng = ChaCha8Rng::seed_from_u64(0);
                    TransformerLayer::init(
                        d,
                        config.num_heads,
                        d * config.mlp_ratio,
                        Activation::Gelu,
                        &mut rng,
                    )
                })
                .collect(),
            ln_post: LayerNorm::new(d),
            proj: Array2::zeros((d, config.text_dim)),
            separable: None,
        };
        let mut failure = None;
        weights.visit_mut("backbone", &mut |name, mut t| {
            if failure.is_some() {
                return;
            }
            match archive.array(name, t.shape()) {
                Ok(a) => t.assign(&a),
                Err(e) => failure = Some(e),
            }
        });
        if let Some(e) = failure {
            return Err(e);
        }
        let mut table = HashMap::new();
        for entry in archive.iter() {
            if let Some(prompt) = entry.name.strip_prefix("text/") {
                if entry.shape != [config.text_dim] {
                    return Err(Error::shape(
                        "text embedding",
                        [config.text_dim],
                        &entry.shape,
                    ));
                }
                table.insert(
                    prompt.to_string(),
                    entry.to_array().into_dimensionality().expect("rank 1"),
                );
            }
        }
        Ok(Self {
            config,
            weights: Arc::new(weights),
            text: Arc::new(TextEncoder::Table(table)),
        })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    pub fn is_separable(&self) -> bool {
        self.weights.separable.is_some()
    }

    /// Serialises every weight tensor.
    pub fn to_archive(&self) -> TensorArchive {
        let mut archive = TensorArchive::new();
        self.weights.visit("backbone", &mut |name, t| {
            archive.insert_array(name, t).expect("valid tensor");
        });
        if let Some(sep) = &self.weights.separable {
            archive
                .insert_array(
                    "backbone/separable/class_embeddings",
                    sep.class_embeddings.view().into_dyn(),
                )
                .expect("valid tensor");
            let palette: Vec<f32> = sep
                .layout
                .palette
                .iter()
                .flatten()
                .map(|&v| v as f32)
                .collect();
            archive
                .insert(
                    "backbone/separable/palette",
                    vec![sep.layout.palette.len(), 3],
                    palette,
                )
                .expect("valid tensor");
        }
        if let TextEncoder::Table(table) = &*self.text {
            let mut prompts: Vec<_> = table.keys().collect();
            prompts.sort();
            for prompt in prompts {
                archive
                    .insert_array(format!("text/{prompt}"), table[prompt].view().into_dyn())
                    .expect("valid tensor");
            }
        }
        archive
    }

    /// Backbone tensors exposed to an optimiser. Always empty.
    pub fn trainable_parameters(&self) -> Vec<String> {
        Vec::new()
    }

    /// Frozen tensors, for reporting.
    pub fn frozen_parameter_count(&self) -> usize {
        self.weights.param_count()
    }

    pub fn grid_for(&self, height: usize, width: usize) -> Result<(usize, usize)> {
        let p = self.config.patch_size;
        for side in [height, width] {
            if side == 0 || side % p != 0 {
                return Err(Error::NotDivisible { side, patch: p });
            }
        }
        Ok((height / p, width / p))
    }

    /// Frozen forward pass over a batch.
    pub fn encode_image(&self, images: &ImageBatch) -> Result<EncodedImage> {
        let (h, w) = self.grid_for(images.height(), images.width())?;
        let per_sample: Vec<SampleOutput> = (0..images.len())
            .into_par_iter()
            .map(|b| self.encode_one(images, b, h, w))
            .collect();
        let n = self.config.num_blocks;
        let hw = h * w;
        let batch = images.len();
        let d = self.config.token_dim;
        let e = self.config.text_dim;
        let mut features = vec![Array3::zeros((batch, hw, d)); n];
        let mut attentions = vec![Array3::zeros((batch, hw, hw)); n];
        let mut tokens = Array3::zeros((batch, hw, e));
        let mut pooled = Array2::zeros((batch, e));
        for (b, out) in per_sample.into_iter().enumerate() {
            for l in 0..n {
                features[l]
                    .index_axis_mut(Axis(0), b)
                    .assign(&out.features[l]);
                attentions[l]
                    .index_axis_mut(Axis(0), b)
                    .assign(&out.attentions[l]);
            }
            pooled
                .row_mut(b)
                .assign(&out.tokens.mean_axis(Axis(0)).expect("non-empty grid"));
            tokens.index_axis_mut(Axis(0), b).assign(&out.tokens);
        }
        Ok(EncodedImage {
            features: FeatureStack {
                features,
                grid: (h, w),
            },
            attentions: AttentionStack { attentions },
            pooled: PooledImageEmbedding { pooled, tokens },
        })
    }

    /// Embeds each prompt; one row per prompt.
    pub fn encode_text(&self, prompts: &[String]) -> Result<TextEmbeddings> {
        if prompts.is_empty() {
            return Err(Error::InvalidArgument("empty prompt list".into()));
        }
        let e = self.config.text_dim;
        let mut embeddings = Array2::zeros((prompts.len(), e));
        for (mut row, prompt) in embeddings.outer_iter_mut().zip(prompts) {
            match &*self.text {
                TextEncoder::Hashed { seed } => {
                    row.assign(&hashed_text_embedding(prompt, *seed, e))
                }
                TextEncoder::Table(table) => row.assign(
                    table
                        .get(prompt)
                        .ok_or_else(|| Error::MissingTensor(format!("text/{prompt}")))?,
                ),
            }
        }
        Ok(TextEmbeddings { embeddings })
    }

    /// Patch-to-palette assignment in separable mode, row-major over the grid.
    pub fn separable_layout(&self, image: ArrayView3<'_, f64>) -> Option<Vec<usize>> {
        let sep = self.weights.separable.as_ref()?;
        let p = self.config.patch_size;
        let (_, height, width) = image.dim();
        let (h, w) = (height / p, width / p);
        let mut layout = Vec::with_capacity(h * w);
        for gy in 0..h {
            for gx in 0..w {
                let patch = image.slice(s![.., gy * p..(gy + 1) * p, gx * p..(gx + 1) * p]);
                let mean: Vec<f64> = patch
                    .outer_iter()
                    .map(|c| c.mean().unwrap_or(0.0))
                    .collect();
                let nearest = sep
                    .layout
                    .palette
                    .iter()
                    .enumerate()
                    .map(|(k, c)| {
                        let dist: f64 = (0..3).map(|i| (c[i] - mean[i]).powi(2)).sum();
                        (k, dist)
                    })
                    .min_by(|a, b| a.1.total_cmp(&b.1))
                    .map(|(k, _)| k)
                    .unwrap_or(0);
                layout.push(nearest);
            }
        }
        Some(layout)
    }

    fn pos_embed_for(&self, h: usize, w: usize) -> Array2<f64> {
        let pe = &self.weights.pos_embed;
        let (gh, gw) = (self.config.grid_h, self.config.grid_w);
        if (h, w) == (gh, gw) {
            return pe.clone();
        }
        let d = self.config.token_dim;
        let rows = bilinear_weights(h, gh);
        let cols = bilinear_weights(w, gw);
        let mut out = Array2::zeros((1 + h * w, d));
        out.row_mut(0).assign(&pe.row(0));
        let grid = pe.slice(s![1.., ..]);
        for y in 0..h {
            for x in 0..w {
                let mut acc = Array1::zeros(d);
                for sy in 0..gh {
                    let ry = rows[[y, sy]];
                    if ry == 0.0 {
                        continue;
                    }
                    for sx in 0..gw {
                        let c = ry * cols[[x, sx]];
                        if c != 0.0 {
                            acc.scaled_add(c, &grid.row(sy * gw + sx));
                        }
                    }
                }
                out.row_mut(1 + y * w + x).assign(&acc);
            }
        }
        out
    }

    fn encode_one(&self, images: &ImageBatch, b: usize, h: usize, w: usize) -> SampleOutput {
        let wts = &*self.weights;
        let p = self.config.patch_size;
        let d = self.config.token_dim;
        let hw = h * w;
        let image = images.pixels.index_axis(Axis(0), b);

        let mut patches = Array2::zeros((hw, 3 * p * p));
        for gy in 0..h {
            for gx in 0..w {
                let mut row = patches.row_mut(gy * w + gx);
                let mut k = 0;
                for c in 0..3 {
                    for py in 0..p {
                        for px in 0..p {
                            let v = image[[c, gy * p + py, gx * p + px]];
                            row[k] = (v - images.mean[c]) / images.std[c];
                            k += 1;
                        }
                    }
                }
            }
        }
        let mut x = Array2::zeros((hw + 1, d));
        x.row_mut(0).assign(&wts.cls_token);
        x.slice_mut(s![1.., ..])
            .assign(&wts.patch_embed.forward(&patches));
        x += &self.pos_embed_for(h, w);
        let (mut x, _) = wts.ln_pre.forward(&x);

        let mut features = Vec::with_capacity(wts.blocks.len());
        let mut attentions = Vec::with_capacity(wts.blocks.len());
        for block in &wts.blocks {
            let (y, cache) = block.forward(&x);
            attentions.push(spatial_attention(&cache.attn.probs));
            features.push(y.slice(s![1.., ..]).to_owned());
            x = y;
        }

        let tokens = match &wts.separable {
            None => {
                let (normed, _) = wts.ln_post.forward(&x);
                normed.slice(s![1.., ..]).dot(&wts.proj)
            }
            Some(sep) => {
                let layout = self.separable_layout(image).expect("separable");
                let mut rng = ChaCha8Rng::seed_from_u64(
                    self.seed()
                        .wrapping_mul(31)
                        .wrapping_add((h * 1000 + w) as u64),
                );
                let mut last = Array2::zeros((hw, d));
                for (t, &k) in layout.iter().enumerate() {
                    for j in 0..d {
                        let noise: f64 = rng.sample(StandardNormal);
                        last[[t, j]] =
                            sep.class_embeddings[[k, j]] + sep.layout.noise_sigma * noise;
                    }
                }
                if sep.layout.indicator_attention {
                    let indicator = indicator_attention(&layout);
                    for a in attentions.iter_mut() {
                        a.assign(&indicator);
                    }
                }
                let tokens = last.dot(&wts.proj);
                *features.last_mut().expect("num_blocks >= 1") = last;
                tokens
            }
        };
        SampleOutput {
            features,
            attentions,
            tokens,
        }
    }

    fn seed(&self) -> u64 {
        match self.config.weights_source {
            WeightsSource::Synthetic { seed } => seed,
            WeightsSource::PretrainedArchive(_) => 0,
        }
    }
}

struct SampleOutput {
    features: Vec<Array2<f64>>,
    attentions: Vec<Array2<f64>>,
    tokens: Array2<f64>,
}

/// Averages heads, drops the class-token row and column, renormalises rows.
fn spatial_attention(per_head: &[Array2<f64>]) -> Array2<f64> {
    let n = per_head[0].nrows();
    let mut avg = Array2::<f64>::zeros((n, n));
    for p in per_head {
        avg += p;
    }
    let mut a = avg.slice(s![1.., 1..]).to_owned();
    for mut row in a.rows_mut() {
        let sum = row.sum();
        if sum > 0.0 {
            row /= sum;
        } else {
            let n = row.len() as f64;
            row.fill(1.0 / n);
        }
    }
    a
}

/// Row-normalised same-class indicator over a token layout.
pub fn indicator_attention(layout: &[usize]) -> Array2<f64> {
    let n = layout.len();
    let mut a = Array2::zeros((n, n));
    for i in 0..n {
        let count = layout.iter().filter(|&&k| k == layout[i]).count() as f64;
        for j in 0..n {
            if layout[j] == layout[i] {
                a[[i, j]] = 1.0 / count;
            }
        }
    }
    a
}

impl Params for Weights {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, ndarray::ArrayViewD<'_, f64>)) {
        self.patch_embed.visit(&format!("{prefix}/patch_embed"), f);
        f(
            &format!("{prefix}/cls_token"),
            self.cls_token.view().into_dyn(),
        );
        f(
            &format!("{prefix}/pos_embed"),
            self.pos_embed.view().into_dyn(),
        );
        self.ln_pre.visit(&format!("{prefix}/ln_pre"), f);
        for (l, block) in self.blocks.iter().enumerate() {
            block.visit(&format!("{prefix}/block{}", l + 1), f);
        }
        self.ln_post.visit(&format!("{prefix}/ln_post"), f);
        f(&format!("{prefix}/proj"), self.proj.view().into_dyn());
    }

    fn visit_mut(
        &mut self,
        prefix: &str,
        f: &mut dyn FnMut(&str, ndarray::ArrayViewMutD<'_, f64>),
    ) {
        self.patch_embed
            .visit_mut(&format!("{prefix}/patch_embed"), f);
        f(
            &format!("{prefix}/cls_token"),
            self.cls_token.view_mut().into_dyn(),
        );
        f(
            &format!("{prefix}/pos_embed"),
            self.pos_embed.view_mut().into_dyn(),
        );
        self.ln_pre.visit_mut(&format!("{prefix}/ln_pre"), f);
        for (l, block) in self.blocks.iter_mut().enumerate() {
            block.visit_mut(&format!("{prefix}/block{}", l + 1), f);
        }
        self.ln_post.visit_mut(&format!("{prefix}/ln_post"), f);
        f(&format!("{prefix}/proj"), self.proj.view_mut().into_dyn());
    }
}
