//! Initial class activation maps from the frozen encoder.
//!
//! Class scores are a temperature softmax over cosine similarities between
//! the pooled image embedding and prompt embeddings. Channel weights are the
//! gradient of one score with respect to the token features, written out in
//! closed form, and each map is the ReLU of the weighted channel sum.

use ndarray::{Array1, Array2, Array3, ArrayView1, ArrayView2, Axis};

use crate::backbone::TextEmbeddings;
use crate::error::{Error, Result};

pub const PROMPT_TEMPLATE: &str = "a clear origami {}";

pub const VOC_CLASSES: [&str; 20] = [
    "aeroplane",
    "bicycle",
    "bird",
    "boat",
    "bottle",
    "bus",
    "car",
    "cat",
    "chair",
    "cow",
    "diningtable",
    "dog",
    "horse",
    "motorbike",
    "person",
    "pottedplant",
    "sheep",
    "sofa",
    "train",
    "tvmonitor",
];

pub const VOC_BACKGROUND: [&str; 25] = [
    "ground", "land", "grass", "tree", "building", "wall", "sky", "lake", "water", "river", "sea",
    "railway", "railroad", "keyboard", "helmet", "cloud", "house", "mountain", "ocean", "road",
    "rock", "street", "valley", "bridge", "sign",
];

pub const COCO_CLASSES: [&str; 80] = [
    "person",
    "bicycle",
    "car",
    "motorbike",
    "aeroplane",
    "bus",
    "train",
    "truck",
    "boat",
    "traffic light",
    "fire hydrant",
    "stop sign",
    "parking meter",
    "bench",
    "bird",
    "cat",
    "dog",
    "horse",
    "sheep",
    "cow",
    "elephant",
    "bear",
    "zebra",
    "giraffe",
    "backpack",
    "umbrella",
    "handbag",
    "tie",
    "suitcase",
    "frisbee",
    "skis",
    "snowboard",
    "sports ball",
    "kite",
    "baseball bat",
    "baseball glove",
    "skateboard",
    "surfboard",
    "tennis racket",
    "bottle",
    "wine glass",
    "cup",
    "fork",
    "knife",
    "spoon",
    "bowl",
    "banana",
    "apple",
    "sandwich",
    "orange",
    "broccoli",
    "carrot",
    "hot dog",
    "pizza",
    "donut",
    "cake",
    "chair",
    "sofa",
    "pottedplant",
    "bed",
    "diningtable",
    "toilet",
    "tvmonitor",
    "laptop",
    "mouse",
    "remote",
    "keyboard",
    "cell phone",
    "microwave",
    "oven",
    "toaster",
    "sink",
    "refrigerator",
    "book",
    "clock",
    "vase",
    "scissors",
    "teddy bear",
    "hair drier",
    "toothbrush",
];

/// Foreground universe, background terms and the prompt template.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassVocabulary {
    pub foreground: Vec<String>,
    pub background: Vec<String>,
    pub template: String,
}

impl ClassVocabulary {
    pub fn new(
        foreground: Vec<String>,
        background: Vec<String>,
        template: impl Into<String>,
    ) -> Result<Self> {
        let template = template.into();
        if template.matches("{}").count() != 1 {
            return Err(Error::InvalidArgument(format!(
                "prompt template `{template}` must contain exactly one `{{}}`"
            )));
        }
        for (kind, list) in [("foreground", &foreground), ("background", &background)] {
            for (i, name) in list.iter().enumerate() {
                if name.trim().is_empty() {
                    return Err(Error::InvalidArgument(format!("empty {kind} class name")));
                }
                if list[..i].contains(name) {
                    return Err(Error::InvalidArgument(format!(
                        "duplicate {kind} class `{name}`"
                    )));
                }
            }
        }
        Ok(Self {
            foreground,
            background,
            template,
        })
    }

    pub fn voc() -> Self {
        Self::new(
            VOC_CLASSES.iter().map(|s| s.to_string()).collect(),
            VOC_BACKGROUND.iter().map(|s| s.to_string()).collect(),
            PROMPT_TEMPLATE,
        )
        .expect("static vocabulary")
    }

    /// COCO drops `sign` and `keyboard` from the background set.
    pub fn coco() -> Self {
        Self::new(
            COCO_CLASSES.iter().map(|s| s.to_string()).collect(),
            VOC_BACKGROUND
                .iter()
                .filter(|s| !matches!(**s, "sign" | "keyboard"))
                .map(|s| s.to_string())
                .collect(),
            PROMPT_TEMPLATE,
        )
        .expect("static vocabulary")
    }

    /// Classes plus the VOC background set.
    pub fn with_foreground(names: &[&str]) -> Result<Self> {
        Self::new(
            names.iter().map(|s| s.to_string()).collect(),
            VOC_BACKGROUND.iter().map(|s| s.to_string()).collect(),
            PROMPT_TEMPLATE,
        )
    }

    pub fn prompt(&self, name: &str) -> String {
        self.template.replacen("{}", name, 1)
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.foreground.iter().position(|n| n == name)
    }

    pub fn num_classes_with_background(&self) -> usize {
        self.foreground.len() + 1
    }
}

/// Prompts for the present foreground classes (vocabulary order) followed by every background term.
pub fn build_prompts(vocabulary: &ClassVocabulary, present: &[usize]) -> Result<Vec<String>> {
    let present = sorted_present(vocabulary, present)?;
    Ok(present
        .iter()
        .map(|&i| vocabulary.prompt(&vocabulary.foreground[i]))
        .chain(vocabulary.background.iter().map(|b| vocabulary.prompt(b)))
        .collect())
}

fn sorted_present(vocabulary: &ClassVocabulary, present: &[usize]) -> Result<Vec<usize>> {
    let mut present = present.to_vec();
    present.sort_unstable();
    present.dedup();
    if let Some(&bad) = present.iter().find(|&&i| i >= vocabulary.foreground.len()) {
        return Err(Error::LabelOutOfRange {
            label: bad,
            classes: vocabulary.foreground.len(),
        });
    }
    Ok(present)
}

fn norm(v: ArrayView1<'_, f64>) -> f64 {
    v.dot(&v).sqrt()
}

/// Cosine similarity between the pooled embedding and each prompt row.
pub fn class_distance(
    pooled: ArrayView1<'_, f64>,
    text: ArrayView2<'_, f64>,
) -> Result<Array1<f64>> {
    if text.ncols() != pooled.len() {
        return Err(Error::shape("class_distance", pooled.len(), text.ncols()));
    }
    let pn = norm(pooled);
    if pn == 0.0 {
        return Err(Error::ZeroNorm("pooled image embedding"));
    }
    text.rows()
        .into_iter()
        .map(|row| {
            let tn = norm(row);
            if tn == 0.0 {
                return Err(Error::ZeroNorm("text embedding"));
            }
            Ok((row.dot(&pooled) / (tn * pn)).clamp(-1.0, 1.0))
        })
        .collect()
}

/// `softmax(D / tau)`.
pub fn class_scores(distances: &Array1<f64>, temperature: f64) -> Result<Array1<f64>> {
    if !(temperature > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "temperature must be positive, got {temperature}"
        )));
    }
    let max = distances.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let e = distances.mapv(|d| ((d - max) / temperature).exp());
    let sum = e.sum();
    Ok(e / sum)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassScoreVector {
    pub distances: Array1<f64>,
    pub scores: Array1<f64>,
    pub temperature: f64,
}

impl ClassScoreVector {
    pub fn compute(
        pooled: ArrayView1<'_, f64>,
        text: ArrayView2<'_, f64>,
        temperature: f64,
    ) -> Result<Self> {
        let distances = class_distance(pooled, text)?;
        let scores = class_scores(&distances, temperature)?;
        Ok(Self {
            distances,
            scores,
            temperature,
        })
    }
}

/// Gradient-derived channel weights for class index `class` (a row of `text`).
///
/// The score depends on the tokens only through their mean, so
/// `w_c = (1/hw) * dS^c/dF_v`, with
/// `dS^c/dD^c' = S^c (delta - S^c') / tau` and
/// `dD^c'/dF_v = t_c' / (|t_c'| |F_v|) - D^c' F_v / |F_v|^2`.
pub fn channel_weights(
    pooled: ArrayView1<'_, f64>,
    text: ArrayView2<'_, f64>,
    scores: &ClassScoreVector,
    class: usize,
    tokens: usize,
) -> Result<Array1<f64>> {
    let n = text.nrows();
    if class >= n || scores.scores.len() != n || scores.distances.len() != n {
        return Err(Error::shape("channel_weights", n, scores.scores.len()));
    }
    if tokens == 0 {
        return Err(Error::InvalidArgument("empty token grid".into()));
    }
    let pn = norm(pooled);
    if pn == 0.0 {
        return Err(Error::ZeroNorm("pooled image embedding"));
    }
    let s = &scores.scores;
    let tau = scores.temperature;
    let mut grad = Array1::zeros(pooled.len());
    for (k, row) in text.rows().into_iter().enumerate() {
        let tn = norm(row);
        if tn == 0.0 {
            return Err(Error::ZeroNorm("text embedding"));
        }
        let delta = if k == class { 1.0 } else { 0.0 };
        let ds = s[class] * (delta - s[k]) / tau;
        if ds == 0.0 {
            continue;
        }
        grad.scaled_add(ds / (tn * pn), &row);
        grad.scaled_add(-ds * scores.distances[k] / (pn * pn), &pooled);
    }
    Ok(grad / tokens as f64)
}

/// `ReLU(F w_c)` reshaped to the `(h, w)` grid.
pub fn initial_cam(
    weights: ArrayView1<'_, f64>,
    tokens: ArrayView2<'_, f64>,
    grid: (usize, usize),
) -> Result<Array2<f64>> {
    let (h, w) = grid;
    if tokens.nrows() != h * w || tokens.ncols() != weights.len() {
        return Err(Error::shape(
            "initial_cam",
            (h * w, weights.len()),
            tokens.dim(),
        ));
    }
    let flat = tokens.dot(&weights).mapv(|v| v.max(0.0));
    Ok(flat.into_shape_with_order((h, w)).expect("h*w tokens"))
}

const NORM_EPS: f64 = 1e-8;

/// Scales a non-negative map so its maximum is 1; near-zero maps become zero.
pub fn max_normalize(map: &mut ndarray::ArrayViewMut2<'_, f64>) {
    let max = map.fold(0.0f64, |a, &b| a.max(b));
    if max > NORM_EPS {
        map.mapv_inplace(|v| v / max);
    } else {
        map.fill(0.0);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BackgroundMode {
    /// `1 - max` over normalised foreground channels
    Complement,
    /// max over normalised maps of the background prompts
    Prompts,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CamConfig {
    pub temperature: f64,
    pub background: BackgroundMode,
}

impl Default for CamConfig {
    fn default() -> Self {
        Self {
            temperature: 0.01,
            background: BackgroundMode::Complement,
        }
    }
}

/// Channel 0 is background; channel `i > 0` belongs to `labels[i]`, a
/// global class label (`foreground index + 1`).
#[derive(Debug, Clone, PartialEq)]
pub struct CamStack {
    pub maps: Array3<f64>,
    pub labels: Vec<usize>,
    pub normalized: bool,
}

impl CamStack {
    pub fn grid(&self) -> (usize, usize) {
        let (_, h, w) = self.maps.dim();
        (h, w)
    }

    pub fn num_channels(&self) -> usize {
        self.labels.len()
    }

    /// Replaces channel 0 by `1 - max` over the foreground channels.
    pub fn recompute_background(&mut self) {
        let (_, h, w) = self.maps.dim();
        for y in 0..h {
            for x in 0..w {
                let fg = (1..self.labels.len())
                    .map(|c| self.maps[[c, y, x]])
                    .fold(0.0f64, f64::max);
                self.maps[[0, y, x]] = 1.0 - fg;
            }
        }
    }
}

/// Initial CAM for one image. `present` indexes the vocabulary foreground;
/// `text` must be the embeddings of `build_prompts(vocabulary, present)`.
pub fn compute_cam(
    pooled: ArrayView1<'_, f64>,
    tokens: ArrayView2<'_, f64>,
    text: &TextEmbeddings,
    vocabulary: &ClassVocabulary,
    present: &[usize],
    grid: (usize, usize),
    config: &CamConfig,
) -> Result<CamStack> {
    let present = sorted_present(vocabulary, present)?;
    let expected_rows = present.len() + vocabulary.background.len();
    if text.embeddings.nrows() != expected_rows {
        return Err(Error::shape(
            "compute_cam prompts",
            expected_rows,
            text.embeddings.nrows(),
        ));
    }
    let (h, w) = grid;
    let scores = ClassScoreVector::compute(pooled, text.embeddings.view(), config.temperature)?;
    let mut maps = Array3::zeros((present.len() + 1, h, w));
    let mut labels = vec![0];
    for (i, &cls) in present.iter().enumerate() {
        let wc = channel_weights(pooled, text.embeddings.view(), &scores, i, h * w)?;
        let mut channel = maps.index_axis_mut(Axis(0), i + 1);
        channel.assign(&initial_cam(wc.view(), tokens, grid)?);
        max_normalize(&mut channel);
        labels.push(cls + 1);
    }
    let mut stack = CamStack {
        maps,
        labels,
        normalized: true,
    };
    match config.background {
        BackgroundMode::Complement => stack.recompute_background(),
        BackgroundMode::Prompts => {
            let mut bg = Array2::<f64>::zeros((h, w));
            for j in 0..vocabulary.background.len() {
                let wc = channel_weights(
                    pooled,
                    text.embeddings.view(),
                    &scores,
                    present.len() + j,
                    h * w,
                )?;
                let mut m = initial_cam(wc.view(), tokens, grid)?;
                max_normalize(&mut m.view_mut());
                bg.zip_mut_with(&m, |a, &b| *a = a.max(b));
            }
            stack.maps.index_axis_mut(Axis(0), 0).assign(&bg);
        }
    }
    Ok(stack)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn prompt_template_substitution() {
        let v = ClassVocabulary::voc();
        assert_eq!(v.prompt("dog"), "a clear origami dog");
        let p = build_prompts(&v, &[]).unwrap();
        assert_eq!(p.len(), 25);
        assert_eq!(p[0], "a clear origami ground");
        let dog = v.index_of("dog").unwrap();
        let p = build_prompts(&v, &[dog, 0]).unwrap();
        assert_eq!(p.len(), 27);
        assert_eq!(p[0], "a clear origami aeroplane");
        assert_eq!(p[1], "a clear origami dog");
        assert!(build_prompts(&v, &[20]).is_err());
    }

    #[test]
    fn vocabularies_have_expected_sizes() {
        assert_eq!(ClassVocabulary::voc().foreground.len(), 20);
        let coco = ClassVocabulary::coco();
        assert_eq!(coco.foreground.len(), 80);
        assert_eq!(coco.background.len(), 23);
        assert!(!coco
            .background
            .iter()
            .any(|b| b == "sign" || b == "keyboard"));
        assert!(ClassVocabulary::new(vec!["a".into(), "a".into()], vec![], "{}").is_err());
        assert!(ClassVocabulary::new(vec!["a".into()], vec![], "no slot").is_err());
    }

    #[test]
    fn cosine_distance_cases() {
        let t = array![[1.0, 0.0], [0.0, 1.0]];
        let d = class_distance(array![1.0, 0.0].view(), t.view()).unwrap();
        assert_eq!(d, array![1.0, 0.0]);
        let d = class_distance(array![2.0, 0.0].view(), t.view()).unwrap();
        assert_eq!(d, array![1.0, 0.0]);
        assert!(matches!(
            class_distance(array![0.0, 0.0].view(), t.view()),
            Err(Error::ZeroNorm(_))
        ));
        assert!(matches!(
            class_distance(array![1.0, 0.0].view(), array![[0.0, 0.0]].view()),
            Err(Error::ZeroNorm(_))
        ));
    }

    #[test]
    fn softmax_cases() {
        let s = class_scores(&array![0.0, 0.0], 1.0).unwrap();
        assert_eq!(s, array![0.5, 0.5]);
        let s = class_scores(&array![1.0, 0.0], 1e-3).unwrap();
        assert!(s[0] > 1.0 - 1e-12 && s[1] < 1e-12);
        assert!(class_scores(&array![1.0], 0.0).is_err());
        assert!(class_scores(&array![1.0], -1.0).is_err());
    }

    #[test]
    fn softmax_matches_high_precision_reference() {
        // reference from a 50-digit evaluation (tests/oracles/softmax_reference.py)
        let s = class_scores(&array![0.3, 0.1, -0.2], 0.01).unwrap();
        let expected = [
            0.999_999_997_938_846_4,
            2.061_153_618_190_203_7e-9,
            1.928_749_843_988_468e-22,
        ];
        for (a, b) in s.iter().zip(expected) {
            assert!(
                (a - b).abs() <= 1e-14 * b.max(1e-300) || (a - b).abs() < 1e-16,
                "{a} vs {b}"
            );
        }
    }

    #[test]
    fn identical_text_rows_cancel() {
        let text = array![[0.3, -0.2, 0.9], [0.3, -0.2, 0.9]];
        let pooled = array![0.5, 0.1, -0.4];
        let sv = ClassScoreVector::compute(pooled.view(), text.view(), 0.01).unwrap();
        let w = channel_weights(pooled.view(), text.view(), &sv, 0, 4).unwrap();
        assert!(w.iter().all(|v| v.abs() < 1e-12), "{w:?}");
    }

    /// Central differences of `S^c` with respect to every token entry,
    /// averaged over tokens.
    fn finite_difference_weights(
        tokens: &Array2<f64>,
        text: &Array2<f64>,
        tau: f64,
        class: usize,
    ) -> Array1<f64> {
        let step = 1e-4;
        let score = |f: &Array2<f64>| {
            let fv = f.mean_axis(Axis(0)).unwrap();
            let d: Array1<f64> = text
                .rows()
                .into_iter()
                .map(|t| t.dot(&fv) / (t.dot(&t).sqrt() * fv.dot(&fv).sqrt()))
                .collect();
            let e = d.mapv(|x| (x / tau).exp());
            e[class] / e.sum()
        };
        let (hw, dim) = tokens.dim();
        let mut w = Array1::zeros(dim);
        for k in 0..dim {
            let mut acc = 0.0;
            for t in 0..hw {
                let mut plus = tokens.clone();
                let mut minus = tokens.clone();
                plus[[t, k]] += step;
                minus[[t, k]] -= step;
                acc += (score(&plus) - score(&minus)) / (2.0 * step);
            }
            w[k] = acc / hw as f64;
        }
        w
    }

    fn rel_err(a: &Array1<f64>, b: &Array1<f64>) -> f64 {
        let diff = (a - b).mapv(|v| v * v).sum().sqrt();
        let scale = b.mapv(|v| v * v).sum().sqrt().max(1e-12);
        diff / scale
    }

    #[test]
    fn channel_weights_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for tau in [0.5, 5.0] {
            let tokens = Array2::from_shape_fn((6, 4), |_| rng.random_range(-1.0..1.0) + 0.3);
            let text = Array2::from_shape_fn((3, 4), |_| rng.random_range(-1.0..1.0));
            let fv = tokens.mean_axis(Axis(0)).unwrap();
            let sv = ClassScoreVector::compute(fv.view(), text.view(), tau).unwrap();
            for c in 0..3 {
                let w = channel_weights(fv.view(), text.view(), &sv, c, 6).unwrap();
                let fd = finite_difference_weights(&tokens, &text, tau, c);
                assert!(
                    rel_err(&w, &fd) < 1e-4,
                    "tau {tau} class {c}: {w:?} vs {fd:?}"
                );
            }
        }
    }

    #[test]
    fn zero_weights_give_zero_channel() {
        let tokens = Array2::from_elem((4, 3), 2.0);
        let m = initial_cam(Array1::zeros(3).view(), tokens.view(), (2, 2)).unwrap();
        assert!(m.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_positive_token_becomes_unit_peak() {
        let w = array![1.0, 0.0];
        let mut tokens = Array2::from_elem((4, 2), -1.0);
        tokens[[2, 0]] = 5.0;
        let mut m = initial_cam(w.view(), tokens.view(), (2, 2)).unwrap();
        max_normalize(&mut m.view_mut());
        assert_eq!(m, array![[0.0, 0.0], [1.0, 0.0]]);
    }

    #[test]
    fn cam_equals_naive_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let w = Array1::from_shape_fn(8, |_| rng.random_range(-1.0..1.0));
        let tokens = Array2::from_shape_fn((16, 8), |_| rng.random_range(-1.0..1.0));
        let m = initial_cam(w.view(), tokens.view(), (4, 4)).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                let mut acc = 0.0;
                for k in 0..8 {
                    acc += w[k] * tokens[[i * 4 + j, k]];
                }
                assert!((m[[i, j]] - acc.max(0.0)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn cam_stack_layout_and_background() {
        let vocab = ClassVocabulary::new(
            vec!["cat".into(), "dog".into()],
            vec!["ground".into()],
            PROMPT_TEMPLATE,
        )
        .unwrap();
        let text = TextEmbeddings {
            embeddings: array![[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
        };
        let tokens = array![
            [1.0, 0.0, 0.1],
            [0.0, 1.0, 0.1],
            [0.0, 0.0, 1.0],
            [0.9, 0.1, 0.1]
        ];
        let pooled = tokens.mean_axis(Axis(0)).unwrap();
        let cfg = CamConfig {
            temperature: 0.1,
            ..CamConfig::default()
        };
        let cam = compute_cam(
            pooled.view(),
            tokens.view(),
            &text,
            &vocab,
            &[1, 0],
            (2, 2),
            &cfg,
        )
        .unwrap();
        assert_eq!(cam.labels, vec![0, 1, 2]);
        assert!(cam.maps.iter().all(|&v| v >= 0.0));
        for c in 1..3 {
            let max = cam
                .maps
                .index_axis(Axis(0), c)
                .fold(0.0f64, |a, &b| a.max(b));
            assert!(max == 0.0 || (max - 1.0).abs() < 1e-12);
        }
        // cat peaks on token 0, dog on token 1
        assert_eq!(cam.maps[[1, 0, 0]], 1.0);
        assert_eq!(cam.maps[[2, 0, 1]], 1.0);
        assert!((cam.maps[[0, 0, 0]]).abs() < 1e-12);

        let cfg_bg = CamConfig {
            background: BackgroundMode::Prompts,
            ..cfg
        };
        let cam = compute_cam(
            pooled.view(),
            tokens.view(),
            &text,
            &vocab,
            &[0, 1],
            (2, 2),
            &cfg_bg,
        )
        .unwrap();
        assert_eq!(cam.maps[[0, 1, 0]], 1.0);
    }

    proptest! {
        #[test]
        fn scores_sum_to_one(d in prop::collection::vec(-1.0f64..1.0, 1..12), tau in 0.001f64..10.0) {
            let s = class_scores(&Array1::from(d), tau).unwrap();
            prop_assert!((s.sum() - 1.0).abs() < 1e-6);
        }

        #[test]
        fn cosine_is_scale_invariant(
            v in prop::collection::vec(0.1f64..1.0, 4),
            t in prop::collection::vec(-1.0f64..1.0, 8),
            alpha in 0.01f64..100.0,
        ) {
            let pooled = Array1::from(v);
            let text = Array2::from_shape_vec((2, 4), t).unwrap();
            prop_assume!(text.rows().into_iter().all(|r| r.dot(&r) > 1e-6));
            let a = class_distance(pooled.view(), text.view()).unwrap();
            let b = class_distance((&pooled * alpha).view(), text.view()).unwrap();
            for (x, y) in a.iter().zip(b.iter()) {
                prop_assert!((x - y).abs() < 1e-6);
                prop_assert!((-1.0..=1.0).contains(x));
            }
        }

        #[test]
        fn argmax_ignores_constant_shift(d in prop::collection::vec(-1.0f64..1.0, 2..8), shift in -5.0f64..5.0) {
            let d = Array1::from(d);
            let argmax = |s: &Array1<f64>| s.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).unwrap().0;
            let a = class_scores(&d, 0.5).unwrap();
            let b = class_scores(&d.mapv(|v| v + shift), 0.5).unwrap();
            prop_assert_eq!(argmax(&a), argmax(&b));
        }
    }
}
