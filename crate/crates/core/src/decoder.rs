//! Trainable decoder over frozen block features.
//!
//! Per-block MLPs, channel concatenation with a 1x1 fusion convolution,
//! a stack of transformer encoder layers, a 1x1 classification head and
//! bilinear upsampling to image size. The fused map is exposed for the
//! affinity branch.

use ndarray::{s, Array2, Array3, ArrayView2, ArrayViewD, ArrayViewMutD, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::archive::TensorArchive;
use crate::backbone::FeatureStack;
use crate::error::{Error, Result};
use crate::nn::{
    join, resize_bilinear, resize_bilinear_backward, Activation, Linear, Params, TransformerCache,
    TransformerLayer,
};

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderConfig {
    /// backbone blocks available (`N`)
    pub num_blocks: usize,
    /// backbone token width (`d`)
    pub token_dim: usize,
    /// first block fed to the decoder, 1-based
    pub layer_start: usize,
    pub width: usize,
    pub depth: usize,
    pub heads: usize,
    pub ff_expansion: usize,
    /// classes including background
    pub num_classes: usize,
    /// add a fixed sinusoidal grid encoding before the transformer stack
    pub positional: bool,
}

impl DecoderConfig {
    /// ViT-B/16 features into the VOC label space.
    pub fn reference_default() -> Self {
        Self {
            num_blocks: 12,
            token_dim: 768,
            layer_start: 1,
            width: 256,
            depth: 3,
            heads: 8,
            ff_expansion: 2,
            num_classes: 21,
            positional: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer_start < 1 || self.layer_start > self.num_blocks {
            return Err(Error::InvalidArgument(format!(
                "layer_start {} outside [1, {}]",
                self.layer_start, self.num_blocks
            )));
        }
        if self.width == 0 || self.heads == 0 || !self.width.is_multiple_of(self.heads) {
            return Err(Error::InvalidArgument(format!(
                "decoder width {} must be a positive multiple of heads {}",
                self.width, self.heads
            )));
        }
        if self.num_classes < 2 || self.token_dim == 0 || self.ff_expansion == 0 {
            return Err(Error::InvalidArgument(
                "decoder needs >= 2 classes and positive dims".into(),
            ));
        }
        Ok(())
    }

    pub fn used_blocks(&self) -> std::ops::RangeInclusive<usize> {
        self.layer_start..=self.num_blocks
    }
}

/// `fc1(ReLU(fc2(x)))`: `fc2` maps `d -> m`, `fc1` maps `m -> m`.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockMlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Params for BlockMlp {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewD<'_, f64>)) {
        self.fc1.visit(&join(prefix, "fc1"), f);
        self.fc2.visit(&join(prefix, "fc2"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewMutD<'_, f64>)) {
        self.fc1.visit_mut(&join(prefix, "fc1"), f);
        self.fc2.visit_mut(&join(prefix, "fc2"), f);
    }
}

/// `F_u` for one sample stored as tokens `(h*w, m)`.
#[derive(Debug, Clone, PartialEq)]
pub struct FusedFeatureMap {
    pub tokens: Array2<f64>,
    pub grid: (usize, usize),
}

impl FusedFeatureMap {
    /// Channel-first `(m, h, w)` view of the same data.
    pub fn to_chw(&self) -> Array3<f64> {
        let (h, w) = self.grid;
        let m = self.tokens.ncols();
        let mut out = Array3::zeros((m, h, w));
        for (t, row) in self.tokens.rows().into_iter().enumerate() {
            out.slice_mut(s![.., t / w, t % w]).assign(&row);
        }
        out
    }
}

/// Class logits `(C, H, W)` for one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct SegPrediction {
    pub logits: Array3<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Decoder {
    config: DecoderConfig,
    pub mlps: Vec<BlockMlp>,
    pub fuse: Linear,
    pub layers: Vec<TransformerLayer>,
    pub head: Linear,
}

struct MlpCache {
    input: Array2<f64>,
    pre: Array2<f64>,
    act: Array2<f64>,
}

/// Intermediates kept by [`Decoder::forward_train`].
pub struct DecoderCache {
    mlps: Vec<MlpCache>,
    concat: Array2<f64>,
    layers: Vec<TransformerCache>,
    phi_out: Array2<f64>,
    grid: (usize, usize),
}

/// Fixed 2D sinusoidal code, half the channels for rows and half for columns.
pub fn grid_encoding(grid: (usize, usize), channels: usize) -> Array2<f64> {
    let (h, w) = grid;
    let half = channels / 2;
    let mut out = Array2::zeros((h * w, channels));
    for y in 0..h {
        for x in 0..w {
            let t = y * w + x;
            for c in 0..channels {
                let (pos, k, span) = if c < half {
                    (y, c, half)
                } else {
                    (x, c - half, channels - half)
                };
                let freq = 1.0 / 10000f64.powf((k / 2 * 2) as f64 / span.max(1) as f64);
                let angle = pos as f64 * freq;
                out[[t, c]] = if k % 2 == 0 { angle.sin() } else { angle.cos() };
            }
        }
    }
    out
}

impl Decoder {
    /// Seeded uniform fan-in initialisation of every tensor.
    pub fn new(config: DecoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = config.width;
        let mlps = config
            .used_blocks()
            .map(|_| {
                let fc2 = Linear::init(config.token_dim, m, &mut rng);
                let fc1 = Linear::init(m, m, &mut rng);
                BlockMlp { fc1, fc2 }
            })
            .collect::<Vec<_>>();
        let fuse = Linear::init(mlps.len() * m, m, &mut rng);
        let layers = (0..config.depth)
            .map(|_| {
                TransformerLayer::init(
                    m,
                    config.heads,
                    m * config.ff_expansion,
                    Activation::Relu,
                    &mut rng,
                )
            })
            .collect();
        let head = Linear::init(m, config.num_classes, &mut rng);
        Ok(Self {
            config,
            mlps,
            fuse,
            layers,
            head,
        })
    }

    /// Same structure, every tensor zero. Used as a gradient accumulator.
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.visit_mut("", &mut |_, mut t| t.fill(0.0));
        z
    }

    pub fn config(&self) -> &DecoderConfig {
        &self.config
    }

    pub fn parameter_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        self.visit("decoder", &mut |n, _| names.push(n.to_string()));
        names
    }

    pub fn to_archive(&self) -> TensorArchive {
        let mut archive = TensorArchive::new();
        self.visit("decoder", &mut |name, t| {
            archive.insert_array(name, t).expect("valid tensor");
        });
        archive
    }

    pub fn load_archive(&mut self, archive: &TensorArchive) -> Result<()> {
        let mut failure = None;
        self.visit_mut("decoder", &mut |name, mut t| {
            if failure.is_some() {
                return;
            }
            match archive.array(name, t.shape()) {
                Ok(a) => t.assign(&a),
                Err(e) => failure = Some(e),
            }
        });
        failure.map_or(Ok(()), Err)
    }

    /// MLP for backbone block `l` (1-based).
    pub fn per_layer_mlp(&self, l: usize, features: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        let mlp = self.mlp_for(l)?;
        if features.ncols() != mlp.fc2.input_dim() {
            return Err(Error::shape(
                "per_layer_mlp",
                mlp.fc2.input_dim(),
                features.ncols(),
            ));
        }
        Ok(mlp
            .fc1
            .forward(&mlp.fc2.forward(&features.to_owned()).mapv(|v| v.max(0.0))))
    }

    fn mlp_for(&self, l: usize) -> Result<&BlockMlp> {
        if !self.config.used_blocks().contains(&l) {
            return Err(Error::InvalidArgument(format!(
                "block {l} outside decoder range {:?}",
                self.config.used_blocks()
            )));
        }
        Ok(&self.mlps[l - self.config.layer_start])
    }

    fn check_stack(&self, stack: &FeatureStack, sample: usize) -> Result<()> {
        if stack.num_blocks() != self.config.num_blocks {
            return Err(Error::shape(
                "decoder feature stack blocks",
                self.config.num_blocks,
                stack.num_blocks(),
            ));
        }
        if sample >= stack.batch_size() {
            return Err(Error::shape(
                "decoder sample index",
                stack.batch_size(),
                sample,
            ));
        }
        let (h, w) = stack.grid;
        let block = stack.block(1, sample);
        if block.dim() != (h * w, self.config.token_dim) {
            return Err(Error::shape(
                "decoder block features",
                (h * w, self.config.token_dim),
                block.dim(),
            ));
        }
        Ok(())
    }

    /// Concatenates per-block MLP outputs for blocks `layer_start..=N` and applies the 1x1 fusion.
    pub fn fuse_features(&self, stack: &FeatureStack, sample: usize) -> Result<FusedFeatureMap> {
        self.check_stack(stack, sample)?;
        let m = self.config.width;
        let hw = stack.grid.0 * stack.grid.1;
        let mut concat = Array2::zeros((hw, self.mlps.len() * m));
        for (i, l) in self.config.used_blocks().enumerate() {
            let out = self.per_layer_mlp(l, stack.block(l, sample))?;
            concat.slice_mut(s![.., i * m..(i + 1) * m]).assign(&out);
        }
        Ok(FusedFeatureMap {
            tokens: self.fuse.forward(&concat),
            grid: stack.grid,
        })
    }

    /// Transformer stack, classification head and bilinear upsampling to `out_size`.
    pub fn decode_segment(
        &self,
        fused: &FusedFeatureMap,
        out_size: (usize, usize),
    ) -> Result<SegPrediction> {
        if fused.tokens.ncols() != self.config.width
            || fused.tokens.nrows() != fused.grid.0 * fused.grid.1
        {
            return Err(Error::shape(
                "decode_segment",
                (fused.grid.0 * fused.grid.1, self.config.width),
                fused.tokens.dim(),
            ));
        }
        let mut x = self.phi_input(fused);
        for layer in &self.layers {
            x = layer.forward(&x).0;
        }
        Ok(SegPrediction {
            logits: self.head_and_upsample(&x, fused.grid, out_size),
        })
    }

    fn phi_input(&self, fused: &FusedFeatureMap) -> Array2<f64> {
        if self.config.positional {
            &fused.tokens + &grid_encoding(fused.grid, self.config.width)
        } else {
            fused.tokens.clone()
        }
    }

    fn head_and_upsample(
        &self,
        x: &Array2<f64>,
        grid: (usize, usize),
        out_size: (usize, usize),
    ) -> Array3<f64> {
        let (h, w) = grid;
        let low = self.head.forward(x);
        let low = low
            .t()
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order((self.config.num_classes, h, w))
            .expect("C*h*w logits");
        if (h, w) == out_size {
            low
        } else {
            resize_bilinear(&low, out_size.0, out_size.1)
        }
    }

    /// Prediction and fused features for one sample.
    pub fn forward(
        &self,
        stack: &FeatureStack,
        sample: usize,
        out_size: (usize, usize),
    ) -> Result<(SegPrediction, FusedFeatureMap)> {
        let fused = self.fuse_features(stack, sample)?;
        let pred = self.decode_segment(&fused, out_size)?;
        Ok((pred, fused))
    }

    /// Forward pass that keeps everything the backward pass needs.
    pub fn forward_train(
        &self,
        stack: &FeatureStack,
        sample: usize,
        out_size: (usize, usize),
    ) -> Result<(SegPrediction, FusedFeatureMap, DecoderCache)> {
        self.check_stack(stack, sample)?;
        let m = self.config.width;
        let hw = stack.grid.0 * stack.grid.1;
        let mut concat = Array2::zeros((hw, self.mlps.len() * m));
        let mut mlp_caches = Vec::with_capacity(self.mlps.len());
        for (i, (l, mlp)) in self.config.used_blocks().zip(&self.mlps).enumerate() {
            let input = stack.block(l, sample).to_owned();
            let pre = mlp.fc2.forward(&input);
            let act = pre.mapv(|v| v.max(0.0));
            concat
                .slice_mut(s![.., i * m..(i + 1) * m])
                .assign(&mlp.fc1.forward(&act));
            mlp_caches.push(MlpCache { input, pre, act });
        }
        let fused = FusedFeatureMap {
            tokens: self.fuse.forward(&concat),
            grid: stack.grid,
        };
        let mut x = self.phi_input(&fused);
        let mut layer_caches = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let (y, cache) = layer.forward(&x);
            layer_caches.push(cache);
            x = y;
        }
        let logits = self.head_and_upsample(&x, stack.grid, out_size);
        Ok((
            SegPrediction { logits },
            fused,
            DecoderCache {
                mlps: mlp_caches,
                concat,
                layers: layer_caches,
                phi_out: x,
                grid: stack.grid,
            },
        ))
    }

    /// Accumulates parameter gradients into `grads` given the loss gradient
    /// with respect to the upsampled logits and, optionally, an extra
    /// gradient arriving directly at the fused tokens.
    pub fn backward(
        &self,
        cache: &DecoderCache,
        d_logits: &Array3<f64>,
        d_fused: Option<&Array2<f64>>,
        grads: &mut Decoder,
    ) {
        let (h, w) = cache.grid;
        let c = self.config.num_classes;
        let d_low = if d_logits.dim() == (c, h, w) {
            d_logits.clone()
        } else {
            resize_bilinear_backward(d_logits, h, w)
        };
        let d_head_out = d_low
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order((c, h * w))
            .expect("C*h*w")
            .t()
            .to_owned();
        let mut dx = self
            .head
            .backward(&cache.phi_out, &d_head_out, &mut grads.head);
        for ((layer, lc), g) in self
            .layers
            .iter()
            .zip(&cache.layers)
            .zip(grads.layers.iter_mut())
            .rev()
        {
            dx = layer.backward(lc, &dx, g);
        }
        if let Some(extra) = d_fused {
            dx += extra;
        }
        let d_concat = self.fuse.backward(&cache.concat, &dx, &mut grads.fuse);
        let m = self.config.width;
        for (i, ((mlp, mc), g)) in self
            .mlps
            .iter()
            .zip(&cache.mlps)
            .zip(grads.mlps.iter_mut())
            .enumerate()
        {
            let d_out = d_concat.slice(s![.., i * m..(i + 1) * m]).to_owned();
            let d_act = mlp.fc1.backward(&mc.act, &d_out, &mut g.fc1);
            let d_pre = d_act * &mc.pre.mapv(|v| if v > 0.0 { 1.0 } else { 0.0 });
            mlp.fc2.backward(&mc.input, &d_pre, &mut g.fc2);
        }
    }
}

impl Params for Decoder {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewD<'_, f64>)) {
        for (l, mlp) in self.config.used_blocks().zip(&self.mlps) {
            mlp.visit(&join(prefix, &format!("mlp{l}")), f);
        }
        self.fuse.visit(&join(prefix, "fuse"), f);
        for (i, layer) in self.layers.iter().enumerate() {
            layer.visit(&join(prefix, &format!("phi{}", i + 1)), f);
        }
        self.head.visit(&join(prefix, "head"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewMutD<'_, f64>)) {
        let blocks = self.config.used_blocks();
        for (l, mlp) in blocks.zip(self.mlps.iter_mut()) {
            mlp.visit_mut(&join(prefix, &format!("mlp{l}")), f);
        }
        self.fuse.visit_mut(&join(prefix, "fuse"), f);
        for (i, layer) in self.layers.iter_mut().enumerate() {
            layer.visit_mut(&join(prefix, &format!("phi{}", i + 1)), f);
        }
        self.head.visit_mut(&join(prefix, "head"), f);
    }
}

/// Softmax over the class axis of a `(C, H, W)` logit map.
pub fn class_probabilities(logits: &Array3<f64>) -> Array3<f64> {
    let mut out = logits.clone();
    for mut lane in out.lanes_mut(Axis(0)) {
        let max = lane.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        lane.mapv_inplace(|v| (v - max).exp());
        let sum = lane.sum();
        lane /= sum;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array1};
    use rand::{Rng, SeedableRng};

    fn toy_config() -> DecoderConfig {
        DecoderConfig {
            num_blocks: 2,
            token_dim: 6,
            layer_start: 1,
            width: 8,
            depth: 1,
            heads: 2,
            ff_expansion: 2,
            num_classes: 3,
            positional: false,
        }
    }

    fn random_stack(
        cfg: &DecoderConfig,
        batch: usize,
        grid: (usize, usize),
        seed: u64,
    ) -> FeatureStack {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        FeatureStack {
            features: (0..cfg.num_blocks)
                .map(|_| {
                    Array3::from_shape_fn((batch, grid.0 * grid.1, cfg.token_dim), |_| {
                        rng.random_range(-1.0..1.0)
                    })
                })
                .collect(),
            grid,
        }
    }

    #[test]
    fn zero_mlp_gives_zero_output() {
        let mut dec = Decoder::new(toy_config(), 0).unwrap();
        dec.mlps[0] = BlockMlp {
            fc1: Linear::zeros(8, 8),
            fc2: Linear::zeros(6, 8),
        };
        let x = Array2::from_elem((4, 6), 3.0);
        assert!(dec
            .per_layer_mlp(1, x.view())
            .unwrap()
            .iter()
            .all(|&v| v == 0.0));
        assert!(dec.per_layer_mlp(3, x.view()).is_err());
        assert!(dec.per_layer_mlp(1, Array2::zeros((4, 5)).view()).is_err());
    }

    #[test]
    fn mlp_matches_hand_computation() {
        // d = 3 -> m = 2
        let cfg = DecoderConfig {
            num_blocks: 1,
            token_dim: 3,
            width: 2,
            heads: 1,
            ..toy_config()
        };
        let mut dec = Decoder::new(cfg, 0).unwrap();
        dec.mlps[0].fc2 = Linear {
            weight: array![[1.0, -1.0, 0.5], [0.0, 2.0, -1.0]],
            bias: array![0.1, -0.2],
        };
        dec.mlps[0].fc1 = Linear {
            weight: array![[1.0, 1.0], [-1.0, 0.5]],
            bias: array![0.0, 1.0],
        };
        let x = array![[1.0, 2.0, 3.0]];
        // fc2: [1-2+1.5+0.1, 0+4-3-0.2] = [0.6, 0.8]; relu same
        // fc1: [0.6+0.8, -0.6+0.4+1.0] = [1.4, 0.8]
        let y = dec.per_layer_mlp(1, x.view()).unwrap();
        assert!((y[[0, 0]] - 1.4).abs() < 1e-12);
        assert!((y[[0, 1]] - 0.8).abs() < 1e-12);
        let x = array![[-1.0, 0.0, 0.0]];
        // fc2: [-0.9, -0.2] -> relu 0 -> fc1 bias
        let y = dec.per_layer_mlp(1, x.view()).unwrap();
        assert_eq!(y, array![[0.0, 1.0]]);
    }

    #[test]
    fn fusion_input_width_follows_layer_start() {
        let mut cfg = DecoderConfig::reference_default();
        cfg.depth = 0;
        cfg.token_dim = 4;
        let dec = Decoder::new(cfg.clone(), 0).unwrap();
        assert_eq!(dec.fuse.input_dim(), 12 * 256);
        cfg.layer_start = 12;
        let dec = Decoder::new(cfg.clone(), 0).unwrap();
        assert_eq!(dec.fuse.input_dim(), 256);
        cfg.layer_start = 13;
        assert!(Decoder::new(cfg.clone(), 0).is_err());
        cfg.layer_start = 0;
        assert!(Decoder::new(cfg, 0).is_err());
    }

    #[test]
    fn identity_fusion_passes_single_block_through() {
        let cfg = DecoderConfig {
            num_blocks: 1,
            ..toy_config()
        };
        let mut dec = Decoder::new(cfg.clone(), 1).unwrap();
        dec.fuse = Linear {
            weight: Array2::eye(8),
            bias: Array1::zeros(8),
        };
        let stack = random_stack(&cfg, 1, (2, 2), 2);
        let fused = dec.fuse_features(&stack, 0).unwrap();
        let direct = dec.per_layer_mlp(1, stack.block(1, 0)).unwrap();
        assert_eq!(fused.tokens, direct);
    }

    #[test]
    fn identity_path_exposes_first_channels() {
        let cfg = toy_config();
        let mut dec = Decoder::new(cfg.clone(), 3).unwrap();
        for layer in &mut dec.layers {
            layer.attn.proj = Linear::zeros(8, 8);
            layer.fc2 = Linear::zeros(16, 8);
        }
        let mut head = Linear::zeros(8, 3);
        for c in 0..3 {
            head.weight[[c, c]] = 1.0;
        }
        dec.head = head;
        let stack = random_stack(&cfg, 1, (3, 3), 4);
        let (pred, fused) = dec.forward(&stack, 0, (3, 3)).unwrap();
        let chw = fused.to_chw();
        for c in 0..3 {
            for y in 0..3 {
                for x in 0..3 {
                    assert!((pred.logits[[c, y, x]] - chw[[c, y, x]]).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn output_matches_image_size() {
        let cfg = toy_config();
        let dec = Decoder::new(cfg.clone(), 0).unwrap();
        for (grid, out) in [((2, 2), (16, 16)), ((3, 5), (24, 40)), ((4, 4), (4, 4))] {
            let stack = random_stack(&cfg, 1, grid, 0);
            let (pred, fused) = dec.forward(&stack, 0, out).unwrap();
            assert_eq!(pred.logits.dim(), (3, out.0, out.1));
            assert_eq!(fused.tokens.dim(), (grid.0 * grid.1, 8));
        }
    }

    #[test]
    fn composition_and_determinism() {
        let cfg = toy_config();
        let dec = Decoder::new(cfg.clone(), 5).unwrap();
        let stack = random_stack(&cfg, 2, (2, 3), 6);
        let (a, fa) = dec.forward(&stack, 1, (8, 12)).unwrap();
        let fused = dec.fuse_features(&stack, 1).unwrap();
        let b = dec.decode_segment(&fused, (8, 12)).unwrap();
        assert_eq!(fa, fused);
        assert_eq!(a, b);
        let (c, _) = dec.forward(&stack, 1, (8, 12)).unwrap();
        assert_eq!(a, c);
        let (t, _, _) = dec.forward_train(&stack, 1, (8, 12)).unwrap();
        assert_eq!(a, t);
    }

    #[test]
    fn batch_samples_do_not_mix() {
        let cfg = toy_config();
        let dec = Decoder::new(cfg.clone(), 5).unwrap();
        let stack = random_stack(&cfg, 2, (2, 2), 7);
        let swapped = FeatureStack {
            features: stack
                .features
                .iter()
                .map(|f| {
                    ndarray::concatenate![
                        Axis(0),
                        f.slice(s![1..2, .., ..]),
                        f.slice(s![0..1, .., ..])
                    ]
                })
                .collect(),
            grid: stack.grid,
        };
        for b in 0..2 {
            let (p, _) = dec.forward(&stack, b, (8, 8)).unwrap();
            let (q, _) = dec.forward(&swapped, 1 - b, (8, 8)).unwrap();
            assert_eq!(p, q);
        }
    }

    #[test]
    fn default_parameter_budget() {
        let dec = Decoder::new(DecoderConfig::reference_default(), 0).unwrap();
        let n = dec.param_count();
        assert!(n < 6_000_000, "{n}");
        let names = dec.parameter_names();
        let mut unique = names.clone();
        unique.sort();
        unique.dedup();
        assert_eq!(unique.len(), names.len());
        assert!(names.iter().all(|n| n.starts_with("decoder/")));
        assert!(names.contains(&"decoder/mlp12/fc1/weight".to_string()));
        assert!(names.contains(&"decoder/phi3/attn/qkv/weight".to_string()));
        assert!(names.contains(&"decoder/head/bias".to_string()));
    }

    #[test]
    fn checkpoint_roundtrip() {
        let cfg = toy_config();
        let dec = Decoder::new(cfg.clone(), 8).unwrap();
        let mut other = Decoder::new(cfg, 9).unwrap();
        other.load_archive(&dec.to_archive()).unwrap();
        assert_eq!(other.to_archive(), dec.to_archive());
    }

    fn loss_of(
        dec: &Decoder,
        stack: &FeatureStack,
        probe: &Array3<f64>,
        fprobe: &Array2<f64>,
    ) -> f64 {
        let (pred, fused) = dec.forward(stack, 0, (8, 8)).unwrap();
        (&pred.logits * probe).sum() + (&fused.tokens * fprobe).sum()
    }

    #[test]
    fn parameter_gradients_match_finite_differences() {
        let mut cfg = toy_config();
        cfg.positional = true;
        let dec = Decoder::new(cfg.clone(), 10).unwrap();
        let stack = random_stack(&cfg, 1, (2, 2), 11);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let probe = Array3::from_shape_fn((3, 8, 8), |_| rng.random_range(-1.0..1.0));
        let fprobe = Array2::from_shape_fn((4, 8), |_| rng.random_range(-1.0..1.0));
        let (_, _, cache) = dec.forward_train(&stack, 0, (8, 8)).unwrap();
        let mut grads = dec.zeros_like();
        dec.backward(&cache, &probe, Some(&fprobe), &mut grads);
        let mut analytic = Vec::new();
        grads.visit("", &mut |n, t| analytic.push((n.to_string(), t.to_owned())));
        let step = 1e-5;
        for (idx, (name, g)) in analytic.iter().enumerate() {
            for k in (0..g.len()).step_by(7) {
                let perturbed = |delta: f64| {
                    let mut d = dec.clone();
                    let mut i = 0;
                    d.visit_mut("", &mut |_, mut t| {
                        if i == idx {
                            t.as_slice_mut().unwrap()[k] += delta;
                        }
                        i += 1;
                    });
                    loss_of(&d, &stack, &probe, &fprobe)
                };
                let num = (perturbed(step) - perturbed(-step)) / (2.0 * step);
                let ana = g.as_slice().unwrap()[k];
                assert!(
                    (num - ana).abs() <= 1e-6 + 1e-4 * num.abs(),
                    "{name}[{k}]: {num} vs {ana}"
                );
            }
        }
    }
}
