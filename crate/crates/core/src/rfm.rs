//! Online refinement of initial CAMs into hard pseudo labels.
//!
//! A learnable affinity map built from the fused decoder features scores the
//! frozen attention maps, the better ones are averaged and gated by that
//! affinity, Sinkhorn-normalized and used to propagate the initial CAM.

use ndarray::{Array1, Array2, Array3, ArrayView2, ArrayView3, Axis, Zip};

use crate::camgen::{max_normalize, CamStack};
use crate::error::{Error, Result};
use crate::nn::{resize_bilinear, sigmoid};

const SINKHORN_EPS: f64 = 1e-8;

/// `A_f = sigmoid(F_u F_u^T)` over spatial tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct AffinityMap {
    pub values: Array2<f64>,
}

pub fn affinity_map(fused: ArrayView2<'_, f64>) -> Result<AffinityMap> {
    if fused.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("fused features".into()));
    }
    let gram = fused.dot(&fused.t());
    Ok(AffinityMap {
        values: gram.mapv(sigmoid),
    })
}

/// Sum of absolute differences between the affinity map and one attention map.
pub fn attention_score(
    affinity: ArrayView2<'_, f64>,
    attention: ArrayView2<'_, f64>,
) -> Result<f64> {
    if affinity.dim() != attention.dim() {
        return Err(Error::shape(
            "attention_score",
            affinity.dim(),
            attention.dim(),
        ));
    }
    Ok(Zip::from(&affinity)
        .and(&attention)
        .fold(0.0, |acc, &a, &b| acc + (a - b).abs()))
}

/// Binary per-block selection with `G^l = 0` for blocks before `eligible_start`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FilterMask {
    pub selected: Vec<bool>,
    /// 1-based first eligible block
    pub eligible_start: usize,
}

impl FilterMask {
    pub fn count(&self) -> usize {
        self.selected.iter().filter(|&&g| g).count()
    }

    /// 1-based indices of selected blocks.
    pub fn blocks(&self) -> Vec<usize> {
        self.selected
            .iter()
            .enumerate()
            .filter(|(_, &g)| g)
            .map(|(i, _)| i + 1)
            .collect()
    }
}

/// Keeps eligible blocks whose score is strictly below the eligible mean;
/// selects every eligible block when none qualifies.
pub fn attention_filter(scores: &[f64], eligible_start: usize) -> Result<FilterMask> {
    let n = scores.len();
    if eligible_start < 1 || eligible_start > n {
        return Err(Error::InvalidArgument(format!(
            "eligible start {eligible_start} outside [1, {n}]"
        )));
    }
    let eligible = &scores[eligible_start - 1..];
    let threshold = eligible.iter().sum::<f64>() / eligible.len() as f64;
    let mut selected: Vec<bool> = (0..n)
        .map(|i| i + 1 >= eligible_start && scores[i] < threshold)
        .collect();
    if !selected.iter().any(|&g| g) {
        for g in selected.iter_mut().skip(eligible_start - 1) {
            *g = true;
        }
    }
    Ok(FilterMask {
        selected,
        eligible_start,
    })
}

/// `R = (A_f / N_m) ⊙ Σ_l G^l A_s^l`.
pub fn refining_map(
    affinity: ArrayView2<'_, f64>,
    filter: &FilterMask,
    attentions: &[ArrayView2<'_, f64>],
) -> Result<Array2<f64>> {
    if attentions.len() != filter.selected.len() {
        return Err(Error::shape(
            "refining_map blocks",
            filter.selected.len(),
            attentions.len(),
        ));
    }
    let count = filter.count();
    if count == 0 {
        return Err(Error::InvalidArgument(
            "filter selects no attention map".into(),
        ));
    }
    let mut sum = Array2::<f64>::zeros(affinity.dim());
    for (a, _) in attentions.iter().zip(&filter.selected).filter(|(_, &g)| g) {
        if a.dim() != affinity.dim() {
            return Err(Error::shape(
                "refining_map attention",
                affinity.dim(),
                a.dim(),
            ));
        }
        sum += a;
    }
    Ok(sum * affinity / count as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SinkhornConfig {
    pub max_iterations: usize,
    pub tolerance: f64,
}

impl Default for SinkhornConfig {
    fn default() -> Self {
        Self {
            max_iterations: 10,
            tolerance: 1e-3,
        }
    }
}

fn stochastic_deviation(m: &Array2<f64>) -> f64 {
    let rows = m.sum_axis(Axis(1));
    let cols = m.sum_axis(Axis(0));
    rows.iter()
        .chain(cols.iter())
        .fold(0.0f64, |acc, s| acc.max((s - 1.0).abs()))
}

/// Alternating row and column normalization. Convergence is checked before
/// each pass, so an input that is already doubly stochastic is returned as is.
pub fn sinkhorn_normalize(m: ArrayView2<'_, f64>, cfg: SinkhornConfig) -> Result<Array2<f64>> {
    let (r, c) = m.dim();
    if r != c {
        return Err(Error::shape("sinkhorn_normalize square", (r, r), (r, c)));
    }
    if m.iter().any(|&v| v < 0.0 || !v.is_finite()) {
        return Err(Error::InvalidArgument(
            "sinkhorn input must be finite and nonnegative".into(),
        ));
    }
    let mut out = m.to_owned();
    let has_zero_line = out.sum_axis(Axis(1)).iter().any(|&s| s == 0.0)
        || out.sum_axis(Axis(0)).iter().any(|&s| s == 0.0);
    if has_zero_line {
        out += SINKHORN_EPS;
    }
    for _ in 0..cfg.max_iterations {
        if stochastic_deviation(&out) < cfg.tolerance {
            break;
        }
        let rows = out.sum_axis(Axis(1)).insert_axis(Axis(1));
        out /= &rows;
        let cols = out.sum_axis(Axis(0)).insert_axis(Axis(0));
        out /= &cols;
    }
    Ok(out)
}

/// Inclusive axis-aligned box `(row0, row1, col0, col1)` on a grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BoxMask {
    pub rows: (usize, usize),
    pub cols: (usize, usize),
}

impl BoxMask {
    pub fn full(grid: (usize, usize)) -> Self {
        Self {
            rows: (0, grid.0 - 1),
            cols: (0, grid.1 - 1),
        }
    }

    pub fn contains(&self, y: usize, x: usize) -> bool {
        (self.rows.0..=self.rows.1).contains(&y) && (self.cols.0..=self.cols.1).contains(&x)
    }

    /// Flattened row-major indicator over the grid.
    pub fn indicator(&self, grid: (usize, usize)) -> Array1<bool> {
        Array1::from_shape_fn(grid.0 * grid.1, |t| self.contains(t / grid.1, t % grid.1))
    }
}

/// Bounding box of pixels with value `>= threshold`; full grid when none qualifies.
pub fn class_box_mask(channel: ArrayView2<'_, f64>, threshold: f64) -> BoxMask {
    let (h, w) = channel.dim();
    let mut rows = (usize::MAX, 0);
    let mut cols = (usize::MAX, 0);
    for ((y, x), &v) in channel.indexed_iter() {
        if v >= threshold {
            rows = (rows.0.min(y), rows.1.max(y));
            cols = (cols.0.min(x), cols.1.max(x));
        }
    }
    if rows.0 == usize::MAX {
        BoxMask::full((h, w))
    } else {
        BoxMask { rows, cols }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AlphaMode {
    /// `T^α v` by repeated multiplication
    Matrix,
    /// entrywise `T∘α` applied once
    Elementwise,
}

impl std::str::FromStr for AlphaMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "matrix" => Ok(Self::Matrix),
            "elementwise" => Ok(Self::Elementwise),
            other => Err(Error::Config(format!("unknown alpha mode {other:?}"))),
        }
    }
}

impl std::fmt::Display for AlphaMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Matrix => "matrix",
            Self::Elementwise => "elementwise",
        })
    }
}

/// Refined stack with the box used for each channel (channel 0 has the full grid).
#[derive(Debug, Clone, PartialEq)]
pub struct RefinedCamStack {
    pub cams: CamStack,
    pub boxes: Vec<BoxMask>,
}

/// Propagates each foreground channel through `T = (R + R^T)/2` restricted
/// to that channel's box, renormalizes and rebuilds the background.
pub fn refine_cam(
    normalized: ArrayView2<'_, f64>,
    cam: &CamStack,
    alpha: u32,
    mode: AlphaMode,
    box_threshold: f64,
) -> Result<RefinedCamStack> {
    let (h, w) = cam.grid();
    let hw = h * w;
    if normalized.dim() != (hw, hw) {
        return Err(Error::shape("refine_cam map", (hw, hw), normalized.dim()));
    }
    if alpha < 1 {
        return Err(Error::InvalidArgument("alpha must be >= 1".into()));
    }
    let sym = (&normalized + &normalized.t()) / 2.0;
    let transition = match mode {
        AlphaMode::Matrix => sym,
        AlphaMode::Elementwise => sym.mapv(|v| v.powi(alpha as i32)),
    };
    let steps = match mode {
        AlphaMode::Matrix => alpha,
        AlphaMode::Elementwise => 1,
    };
    let mut out = cam.clone();
    let mut boxes = vec![BoxMask::full((h, w))];
    for c in 1..cam.num_channels() {
        let channel = cam.maps.index_axis(Axis(0), c);
        let bbox = class_box_mask(channel, box_threshold);
        let inside = bbox.indicator((h, w));
        let mut t = transition.clone();
        for (j, mut col) in t.columns_mut().into_iter().enumerate() {
            if !inside[j] {
                col.fill(0.0);
            }
        }
        let mut v = channel.to_owned().into_shape_with_order(hw).expect("h*w");
        for _ in 0..steps {
            v = t.dot(&v);
        }
        Zip::from(&mut v).and(&inside).for_each(|v, &keep| {
            if !keep {
                *v = 0.0;
            }
        });
        let mut map = v.into_shape_with_order((h, w)).expect("h*w");
        max_normalize(&mut map.view_mut());
        out.maps.index_axis_mut(Axis(0), c).assign(&map);
        boxes.push(bbox);
    }
    out.normalized = true;
    out.recompute_background();
    Ok(RefinedCamStack { cams: out, boxes })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParConfig {
    pub dilations: Vec<usize>,
    pub iterations: usize,
    pub sigma_rgb: f64,
}

impl Default for ParConfig {
    fn default() -> Self {
        Self {
            dilations: vec![1, 2, 4, 8, 12, 24],
            iterations: 10,
            sigma_rgb: 0.1,
        }
    }
}

const NEIGHBOURS: [(isize, isize); 8] = [
    (-1, -1),
    (-1, 0),
    (-1, 1),
    (0, -1),
    (0, 1),
    (1, -1),
    (1, 0),
    (1, 1),
];

/// Normalized colour kernels: for each pixel a list of `(neighbour index, weight)`.
fn par_kernels(image: ArrayView3<'_, f64>, cfg: &ParConfig) -> Vec<Vec<(usize, f64)>> {
    let (_, h, w) = image.dim();
    let denom = 2.0 * cfg.sigma_rgb * cfg.sigma_rgb;
    let mut kernels = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let mut k = Vec::new();
            for &d in &cfg.dilations {
                for (dy, dx) in NEIGHBOURS {
                    let ny = y as isize + dy * d as isize;
                    let nx = x as isize + dx * d as isize;
                    if ny < 0 || nx < 0 || ny >= h as isize || nx >= w as isize {
                        continue;
                    }
                    let (ny, nx) = (ny as usize, nx as usize);
                    let dist: f64 = (0..image.dim().0)
                        .map(|c| (image[[c, y, x]] - image[[c, ny, nx]]).powi(2))
                        .sum();
                    k.push((ny * w + nx, (-dist / denom).exp()));
                }
            }
            let total: f64 = k.iter().map(|(_, v)| v).sum();
            if total > 0.0 {
                for e in &mut k {
                    e.1 /= total;
                }
            }
            kernels.push(k);
        }
    }
    kernels
}

/// Colour-guided smoothing of a `(K, h, w)` score stack. `image` is `(3, h, w)`
/// with values in `[0, 1]` on the same grid as the scores.
pub fn par_refine(
    image: ArrayView3<'_, f64>,
    scores: &Array3<f64>,
    cfg: &ParConfig,
) -> Result<Array3<f64>> {
    let (k, h, w) = scores.dim();
    if image.dim().1 != h || image.dim().2 != w {
        return Err(Error::shape(
            "par_refine image grid",
            (h, w),
            (image.dim().1, image.dim().2),
        ));
    }
    if cfg.sigma_rgb <= 0.0 {
        return Err(Error::InvalidArgument("sigma_rgb must be positive".into()));
    }
    let kernels = par_kernels(image, cfg);
    let mut cur = scores
        .clone()
        .into_shape_with_order((k, h * w))
        .expect("k*h*w");
    for _ in 0..cfg.iterations {
        let mut next = cur.clone();
        for (i, kernel) in kernels.iter().enumerate() {
            if kernel.is_empty() {
                continue;
            }
            for c in 0..k {
                next[[c, i]] = kernel.iter().map(|&(j, wgt)| wgt * cur[[c, j]]).sum();
            }
        }
        cur = next;
    }
    Ok(cur.into_shape_with_order((k, h, w)).expect("k*h*w"))
}

/// Resamples an image to the token grid for PAR.
pub fn image_to_grid(image: ArrayView3<'_, f64>, grid: (usize, usize)) -> Array3<f64> {
    if (image.dim().1, image.dim().2) == grid {
        image.to_owned()
    } else {
        resize_bilinear(&image.to_owned(), grid.0, grid.1)
    }
}

/// Hard labels `(h, w)` in the global label space (0 is background).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PseudoLabelMap {
    pub labels: Array2<usize>,
}

/// Per-pixel argmax over channels, lowest channel on ties, mapped through
/// `channel_labels`.
pub fn to_pseudo_label(scores: &Array3<f64>, channel_labels: &[usize]) -> Result<PseudoLabelMap> {
    let (k, h, w) = scores.dim();
    if channel_labels.len() != k || k == 0 {
        return Err(Error::shape(
            "to_pseudo_label channels",
            k,
            channel_labels.len(),
        ));
    }
    let labels = Array2::from_shape_fn((h, w), |(y, x)| {
        let mut best = 0;
        for c in 1..k {
            if scores[[c, y, x]] > scores[[best, y, x]] {
                best = c;
            }
        }
        channel_labels[best]
    });
    Ok(PseudoLabelMap { labels })
}

#[derive(Debug, Clone, PartialEq)]
pub struct RfmConfig {
    /// 1-based first block eligible for the attention filter
    pub eligible_start: usize,
    pub alpha: u32,
    pub alpha_mode: AlphaMode,
    pub box_threshold: f64,
    pub sinkhorn: SinkhornConfig,
    pub par: Option<ParConfig>,
}

impl Default for RfmConfig {
    fn default() -> Self {
        Self {
            eligible_start: 6,
            alpha: 2,
            alpha_mode: AlphaMode::Matrix,
            box_threshold: 0.4,
            sinkhorn: SinkhornConfig::default(),
            par: Some(ParConfig::default()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RfmOutput {
    pub affinity: AffinityMap,
    pub scores: Vec<f64>,
    pub filter: FilterMask,
    pub refined: RefinedCamStack,
    pub pseudo: PseudoLabelMap,
}

/// Full refinement for one image. `image` is the `(3, H, W)` input in `[0, 1]`
/// and is only needed when PAR is enabled.
pub fn refine_pseudo_labels(
    fused: ArrayView2<'_, f64>,
    attentions: &[ArrayView2<'_, f64>],
    cam: &CamStack,
    image: Option<ArrayView3<'_, f64>>,
    cfg: &RfmConfig,
) -> Result<RfmOutput> {
    let affinity = affinity_map(fused)?;
    let scores = attentions
        .iter()
        .map(|a| attention_score(affinity.values.view(), a.view()))
        .collect::<Result<Vec<_>>>()?;
    let filter = attention_filter(&scores, cfg.eligible_start)?;
    let r = refining_map(affinity.values.view(), &filter, attentions)?;
    let normalized = sinkhorn_normalize(r.view(), cfg.sinkhorn)?;
    let mut refined = refine_cam(
        normalized.view(),
        cam,
        cfg.alpha,
        cfg.alpha_mode,
        cfg.box_threshold,
    )?;
    let final_scores = match (&cfg.par, image) {
        (Some(par), Some(img)) => {
            let small = image_to_grid(img, cam.grid());
            let smoothed = par_refine(small.view(), &refined.cams.maps, par)?;
            refined.cams.maps = smoothed;
            &refined.cams.maps
        }
        (Some(_), None) => {
            return Err(Error::InvalidArgument(
                "PAR enabled but no image given".into(),
            ))
        }
        (None, _) => &refined.cams.maps,
    };
    let pseudo = to_pseudo_label(final_scores, &cam.labels)?;
    Ok(RfmOutput {
        affinity,
        scores,
        filter,
        refined,
        pseudo,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, s};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, shape: (usize, usize), lo: f64, hi: f64) -> Array2<f64> {
        Array2::from_shape_fn(shape, |_| rng.random_range(lo..hi))
    }

    #[test]
    fn affinity_trivial_cases() {
        let a = affinity_map(Array2::zeros((9, 4)).view()).unwrap();
        assert!(a.values.iter().all(|&v| v == 0.5));
        let mut f = Array2::zeros((3, 4));
        f[[0, 1]] = 1.0;
        f[[2, 1]] = 1.0;
        let a = affinity_map(f.view()).unwrap();
        assert!((a.values[[0, 2]] - 0.7310585786300049).abs() < 1e-12);
        assert!(affinity_map(array![[f64::NAN]].view()).is_err());
    }

    #[test]
    fn affinity_loop_oracle_and_symmetry() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let f = random(&mut rng, (9, 4), -2.0, 2.0);
        let a = affinity_map(f.view()).unwrap().values;
        for i in 0..9 {
            for j in 0..9 {
                let mut dot = 0.0;
                for k in 0..4 {
                    dot += f[[i, k]] * f[[j, k]];
                }
                assert!((a[[i, j]] - 1.0 / (1.0 + (-dot).exp())).abs() < 1e-12);
                assert!((a[[i, j]] - a[[j, i]]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn score_examples() {
        let a = array![[1.0, 0.0], [0.0, 1.0]];
        let b = array![[0.0, 1.0], [1.0, 0.0]];
        assert_eq!(attention_score(a.view(), a.view()).unwrap(), 0.0);
        assert_eq!(attention_score(a.view(), b.view()).unwrap(), 4.0);
        assert!(attention_score(a.view(), Array2::zeros((3, 3)).view()).is_err());
    }

    #[test]
    fn filter_examples() {
        let g = attention_filter(&[5.0, 1.0, 3.0, 2.0], 2).unwrap();
        assert_eq!(g.selected, vec![false, true, false, false]);
        assert_eq!(g.count(), 1);
        assert_eq!(g.blocks(), vec![2]);
        let g = attention_filter(&[0.0, 4.0, 4.0, 4.0], 2).unwrap();
        assert_eq!(g.selected, vec![false, true, true, true]);
        assert!(attention_filter(&[1.0], 0).is_err());
        assert!(attention_filter(&[1.0], 2).is_err());
    }

    #[test]
    fn refining_examples() {
        let ones = Array2::from_elem((2, 2), 1.0);
        let a = array![[0.2, 0.8], [0.6, 0.4]];
        let g = FilterMask {
            selected: vec![true],
            eligible_start: 1,
        };
        assert_eq!(refining_map(ones.view(), &g, &[a.view()]).unwrap(), a);
        let af = array![[0.5, 1.0], [1.0, 0.5]];
        let twos = Array2::from_elem((2, 2), 2.0);
        assert_eq!(
            refining_map(af.view(), &g, &[twos.view()]).unwrap(),
            array![[1.0, 2.0], [2.0, 1.0]]
        );
    }

    #[test]
    fn sinkhorn_examples() {
        let cfg = SinkhornConfig::default();
        let out = sinkhorn_normalize(array![[1.0, 1.0], [1.0, 1.0]].view(), cfg).unwrap();
        assert_eq!(out, array![[0.5, 0.5], [0.5, 0.5]]);
        let out = sinkhorn_normalize(array![[1.0, 3.0], [3.0, 1.0]].view(), cfg).unwrap();
        assert_eq!(out, array![[0.25, 0.75], [0.75, 0.25]]);
        let out = sinkhorn_normalize(array![[0.0, 1.0], [0.0, 1.0]].view(), cfg).unwrap();
        assert!(out.iter().all(|v| v.is_finite()));
        assert!(sinkhorn_normalize(array![[-1.0]].view(), cfg).is_err());
        assert!(sinkhorn_normalize(Array2::zeros((2, 3)).view(), cfg).is_err());
    }

    #[test]
    fn sinkhorn_random_contract() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m = random(&mut rng, (6, 6), 0.01, 1.0);
        let out = sinkhorn_normalize(m.view(), SinkhornConfig::default()).unwrap();
        assert!(stochastic_deviation(&out) < 1e-3);
        let again = sinkhorn_normalize(out.view(), SinkhornConfig::default()).unwrap();
        assert_eq!(again, out);
    }

    #[test]
    fn box_examples() {
        let mut c = Array2::zeros((6, 8));
        c[[2, 3]] = 1.0;
        assert_eq!(
            class_box_mask(c.view(), 0.4),
            BoxMask {
                rows: (2, 2),
                cols: (3, 3)
            }
        );
        assert_eq!(
            class_box_mask(Array2::zeros((6, 8)).view(), 0.4),
            BoxMask::full((6, 8))
        );
        let mut c = Array2::zeros((6, 8));
        c[[1, 1]] = 0.9;
        c[[4, 6]] = 0.4;
        c[[5, 7]] = 0.39;
        assert_eq!(
            class_box_mask(c.view(), 0.4),
            BoxMask {
                rows: (1, 4),
                cols: (1, 6)
            }
        );
    }

    fn toy_cam(rng: &mut ChaCha8Rng, channels: usize, grid: (usize, usize)) -> CamStack {
        let mut maps =
            Array3::from_shape_fn((channels, grid.0, grid.1), |_| rng.random_range(0.0..1.0));
        for c in 1..channels {
            max_normalize(&mut maps.index_axis_mut(Axis(0), c));
        }
        let mut cam = CamStack {
            maps,
            labels: (0..channels).collect(),
            normalized: true,
        };
        cam.recompute_background();
        cam
    }

    #[test]
    fn identity_propagation_keeps_boxed_cam() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let cam = toy_cam(&mut rng, 3, (4, 5));
        let eye = Array2::eye(20);
        for mode in [AlphaMode::Matrix, AlphaMode::Elementwise] {
            let out = refine_cam(eye.view(), &cam, 2, mode, 0.4).unwrap();
            for c in 1..3 {
                let b = out.boxes[c];
                for y in 0..4 {
                    for x in 0..5 {
                        let expected = if b.contains(y, x) {
                            cam.maps[[c, y, x]]
                        } else {
                            0.0
                        };
                        assert!((out.cams.maps[[c, y, x]] - expected).abs() < 1e-7);
                    }
                }
            }
        }
    }

    #[test]
    fn uniform_transition_flattens_channel() {
        let mut cam = CamStack {
            maps: Array3::zeros((2, 2, 2)),
            labels: vec![0, 1],
            normalized: true,
        };
        cam.maps
            .slice_mut(s![1, .., ..])
            .assign(&array![[1.0, 0.5], [0.5, 0.5]]);
        let t = Array2::from_elem((4, 4), 0.25);
        let out = refine_cam(t.view(), &cam, 1, AlphaMode::Matrix, 0.4).unwrap();
        assert!(out
            .cams
            .maps
            .slice(s![1, .., ..])
            .iter()
            .all(|&v| (v - 1.0).abs() < 1e-12));
        assert!(out
            .cams
            .maps
            .slice(s![0, .., ..])
            .iter()
            .all(|&v| v.abs() < 1e-12));
    }

    #[test]
    fn matrix_power_matches_repeated_products() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let r = sinkhorn_normalize(
            random(&mut rng, (9, 9), 0.1, 1.0).view(),
            SinkhornConfig::default(),
        )
        .unwrap();
        let mut cam = toy_cam(&mut rng, 2, (3, 3));
        // keep the whole grid inside the box
        cam.maps
            .slice_mut(s![1, .., ..])
            .mapv_inplace(|v| 0.4 + 0.6 * v);
        let out = refine_cam(r.view(), &cam, 2, AlphaMode::Matrix, 0.4).unwrap();
        let t = (&r + &r.t()) / 2.0;
        let v = cam
            .maps
            .slice(s![1, .., ..])
            .to_owned()
            .into_shape_with_order(9)
            .unwrap();
        let mut expected = t.dot(&t.dot(&v));
        let max = expected.fold(0.0f64, |a, &b| a.max(b));
        expected /= max;
        for i in 0..9 {
            assert!((out.cams.maps[[1, i / 3, i % 3]] - expected[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn par_examples() {
        let cfg = ParConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let image = Array3::from_shape_fn((3, 5, 5), |_| rng.random_range(0.0..1.0));
        let constant = Array3::from_elem((2, 5, 5), 0.3);
        let out = par_refine(image.view(), &constant, &cfg).unwrap();
        assert!(out.iter().all(|&v| (v - 0.3).abs() < 1e-12));
        let scores = Array3::from_shape_fn((2, 5, 5), |_| rng.random_range(0.0..1.0));
        let none = ParConfig {
            iterations: 0,
            ..cfg.clone()
        };
        assert_eq!(par_refine(image.view(), &scores, &none).unwrap(), scores);
        assert!(par_refine(image.view(), &Array3::zeros((1, 4, 5)), &cfg).is_err());
    }

    #[test]
    fn par_single_iteration_by_hand() {
        // 3x3 image: left column black, the rest white; dilation 1 only.
        let mut image = Array3::from_elem((3, 3, 3), 1.0);
        image.slice_mut(s![.., .., 0]).fill(0.0);
        let mut scores = Array3::zeros((1, 3, 3));
        scores[[0, 0, 0]] = 1.0;
        scores[[0, 1, 2]] = 2.0;
        let cfg = ParConfig {
            dilations: vec![1],
            iterations: 1,
            sigma_rgb: 1.0,
        };
        let out = par_refine(image.view(), &scores, &cfg).unwrap();
        // centre pixel (1,1) is white: neighbours (0,0),(1,0),(2,0) black at squared distance 3
        let far = (-1.5f64).exp();
        let expected = (far * 1.0 + 2.0) / (3.0 * far + 5.0);
        assert!((out[[0, 1, 1]] - expected).abs() < 1e-12);
        // corner (0,0) black: neighbours (0,1) white, (1,0) black, (1,1) white
        let expected = 0.0 / (1.0 + 2.0 * far);
        assert!((out[[0, 0, 0]] - expected).abs() < 1e-12);
    }

    #[test]
    fn pseudo_label_rules() {
        let mut s = Array3::zeros((3, 2, 2));
        s.slice_mut(s![0, .., ..]).fill(0.9);
        assert!(to_pseudo_label(&s, &[0, 4, 7])
            .unwrap()
            .labels
            .iter()
            .all(|&l| l == 0));
        let mut s = Array3::zeros((3, 2, 2));
        s[[2, 1, 0]] = 1.0;
        let p = to_pseudo_label(&s, &[0, 4, 7]).unwrap().labels;
        assert_eq!(p[[1, 0]], 7);
        assert_eq!(p[[0, 0]], 0);
        let mut s = Array3::zeros((2, 1, 1));
        s[[0, 0, 0]] = 0.5;
        s[[1, 0, 0]] = 0.5;
        assert_eq!(to_pseudo_label(&s, &[0, 3]).unwrap().labels[[0, 0]], 0);
    }

    #[test]
    fn pipeline_requires_image_for_par() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let cam = toy_cam(&mut rng, 2, (2, 2));
        let fused = random(&mut rng, (4, 3), -1.0, 1.0);
        let att = Array2::from_elem((4, 4), 0.25);
        let atts = vec![att.view(), att.view()];
        let cfg = RfmConfig {
            eligible_start: 1,
            ..RfmConfig::default()
        };
        assert!(refine_pseudo_labels(fused.view(), &atts, &cam, None, &cfg).is_err());
        let image = Array3::from_elem((3, 16, 16), 0.5);
        let out =
            refine_pseudo_labels(fused.view(), &atts, &cam, Some(image.view()), &cfg).unwrap();
        assert_eq!(out.pseudo.labels.dim(), (2, 2));
        assert_eq!(out.filter.count(), 2);
    }

    proptest! {
        #[test]
        fn transition_never_raises_the_maximum(seed in 0u64..500) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let r = sinkhorn_normalize(random(&mut rng, (8, 8), 0.0, 1.0).view(), SinkhornConfig { max_iterations: 200, tolerance: 1e-12 }).unwrap();
            let t = (&r + &r.t()) / 2.0;
            let v = Array1::from_shape_fn(8, |_| rng.random_range(0.0..1.0));
            let max_v = v.fold(0.0f64, |a, &b| a.max(b));
            let out = t.dot(&t.dot(&v));
            prop_assert!(out.iter().all(|&x| x <= max_v + 1e-9));
        }

        #[test]
        fn par_stays_within_channel_range(seed in 0u64..200) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let image = Array3::from_shape_fn((3, 6, 7), |_| rng.random_range(0.0..1.0));
            let scores = Array3::from_shape_fn((2, 6, 7), |_| rng.random_range(-1.0..3.0));
            let out = par_refine(image.view(), &scores, &ParConfig::default()).unwrap();
            for c in 0..2 {
                let ch = scores.index_axis(Axis(0), c);
                let lo = ch.fold(f64::INFINITY, |a, &b| a.min(b));
                let hi = ch.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
                prop_assert!(out.index_axis(Axis(0), c).iter().all(|&v| v >= lo - 1e-12 && v <= hi + 1e-12));
            }
        }
    }
}
