//! Dataset layout, synthetic data, evaluation and multi-scale inference.
//!
//! A dataset root contains `images/<id>.png`, `image_labels.txt` with lines
//! `<id> <class>[,<class>...]`, optional `masks/<id>.png` holding 8-bit class
//! indices (255 = ignore), `splits/<split>.txt` with one id per line, and an
//! optional `classes.txt` listing foreground names (VOC names otherwise).

use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use ndarray::{s, Array2, Array3, ArrayView3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::camgen::VOC_CLASSES;
use crate::decoder::class_probabilities;
use crate::error::{Error, Result};
use crate::nn::resize_bilinear;
use crate::training::Segmenter;

/// Mask value excluded from losses and evaluation.
pub const IGNORE_LABEL: usize = 255;

/// One decoded example. `labels` are 0-based foreground indices, sorted.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    /// `(3, H, W)` in `[0, 1]`
    pub image: Array3<f64>,
    pub labels: Vec<usize>,
    pub mask: Option<Array2<u8>>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SampleRecord {
    pub id: String,
    pub image_path: PathBuf,
    pub labels: Vec<usize>,
    pub mask_path: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub split: String,
    /// foreground names; label `i + 1` in masks is `class_names[i]`
    pub class_names: Vec<String>,
    pub records: Vec<SampleRecord>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LoadMode {
    /// every record needs a non-empty tag set
    Weak,
    /// every record needs a mask
    Full,
    /// no requirement; masks attached when present
    Inference,
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

pub fn read_class_names(root: &Path) -> Result<Vec<String>> {
    let path = root.join("classes.txt");
    if !path.exists() {
        return Ok(VOC_CLASSES.iter().map(|s| s.to_string()).collect());
    }
    let names: Vec<String> = read_text(&path)?
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(String::from)
        .collect();
    if names.is_empty() {
        return Err(Error::Dataset(format!(
            "{} lists no classes",
            path.display()
        )));
    }
    Ok(names)
}

fn parse_image_labels(path: &Path, class_names: &[String]) -> Result<HashMap<String, Vec<usize>>> {
    let index: HashMap<&str, usize> = class_names
        .iter()
        .enumerate()
        .map(|(i, n)| (n.as_str(), i))
        .collect();
    let mut out = HashMap::new();
    for line in read_text(path)?.lines() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let (id, rest) = line.split_once(char::is_whitespace).unwrap_or((line, ""));
        let mut labels = Vec::new();
        for name in rest.split(',').map(str::trim).filter(|n| !n.is_empty()) {
            let i = *index
                .get(name)
                .ok_or_else(|| Error::UnknownClass(format!("{name} (image {id})")))?;
            labels.push(i);
        }
        labels.sort_unstable();
        labels.dedup();
        out.insert(id.to_string(), labels);
    }
    Ok(out)
}

/// Reads and validates a split. Image files must exist.
pub fn load_dataset(root: &Path, split: &str, mode: LoadMode) -> Result<DatasetManifest> {
    if !root.is_dir() {
        return Err(Error::Dataset(format!(
            "dataset root {} does not exist",
            root.display()
        )));
    }
    let class_names = read_class_names(root)?;
    let labels_path = root.join("image_labels.txt");
    let labels = if labels_path.exists() {
        parse_image_labels(&labels_path, &class_names)?
    } else if mode == LoadMode::Weak {
        return Err(Error::Dataset(format!("missing {}", labels_path.display())));
    } else {
        HashMap::new()
    };
    let split_path = root.join("splits").join(format!("{split}.txt"));
    let ids: Vec<String> = read_text(&split_path)?
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(String::from)
        .collect();
    if ids.is_empty() {
        return Err(Error::Dataset(format!(
            "split {} is empty",
            split_path.display()
        )));
    }
    let mut records = Vec::with_capacity(ids.len());
    for id in ids {
        let image_path = root.join("images").join(format!("{id}.png"));
        if !image_path.is_file() {
            return Err(Error::Dataset(format!(
                "image {id} not found at {}",
                image_path.display()
            )));
        }
        let mask = root.join("masks").join(format!("{id}.png"));
        let mask_path = mask.is_file().then_some(mask);
        let tags = labels.get(&id).cloned();
        match mode {
            LoadMode::Weak if tags.as_ref().is_none_or(|t| t.is_empty()) => {
                return Err(Error::Dataset(format!(
                    "image {id} has no image-level labels"
                )));
            }
            LoadMode::Full if mask_path.is_none() => {
                return Err(Error::Dataset(format!("image {id} has no mask")));
            }
            _ => {}
        }
        records.push(SampleRecord {
            id,
            image_path,
            labels: tags.unwrap_or_default(),
            mask_path,
        });
    }
    Ok(DatasetManifest {
        root: root.to_path_buf(),
        split: split.to_string(),
        class_names,
        records,
    })
}

impl DatasetManifest {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len() + 1
    }

    pub fn load_sample(&self, i: usize) -> Result<Sample> {
        let rec = &self.records[i];
        let image = read_rgb(&rec.image_path)?;
        let mask = match &rec.mask_path {
            Some(p) => {
                let m = read_index_png(p)?;
                if m.dim() != (image.dim().1, image.dim().2) {
                    return Err(Error::Dataset(format!(
                        "mask of {} does not match its image size",
                        rec.id
                    )));
                }
                if let Some(&bad) = m
                    .iter()
                    .find(|&&v| v as usize > self.class_names.len() && v as usize != IGNORE_LABEL)
                {
                    return Err(Error::LabelOutOfRange {
                        label: bad as usize,
                        classes: self.num_classes(),
                    });
                }
                Some(m)
            }
            None => None,
        };
        Ok(Sample {
            id: rec.id.clone(),
            image,
            labels: rec.labels.clone(),
            mask,
        })
    }

    pub fn load_samples(&self) -> Result<Vec<Sample>> {
        (0..self.records.len())
            .into_par_iter()
            .map(|i| self.load_sample(i))
            .collect()
    }
}

/// `(3, H, W)` in `[0, 1]`.
pub fn read_rgb(path: &Path) -> Result<Array3<f64>> {
    let img = image::ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .decode()
        .map_err(|e| Error::Image {
            path: path.to_path_buf(),
            source: e,
        })?
        .to_rgb8();
    let (w, h) = img.dimensions();
    Ok(Array3::from_shape_fn(
        (3, h as usize, w as usize),
        |(c, y, x)| img.get_pixel(x as u32, y as u32)[c] as f64 / 255.0,
    ))
}

pub fn write_rgb(path: &Path, image: ArrayView3<'_, f64>) -> Result<()> {
    let (_, h, w) = image.dim();
    let buf = image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let px =
            |c: usize| (image[[c, y as usize, x as usize]].clamp(0.0, 1.0) * 255.0).round() as u8;
        image::Rgb([px(0), px(1), px(2)])
    });
    buf.save(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        source: e,
    })
}

/// Reads an 8-bit grayscale or palette PNG as raw indices.
pub fn read_index_png(path: &Path) -> Result<Array2<u8>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut decoder = png::Decoder::new(BufReader::new(file));
    decoder.set_transformations(png::Transformations::IDENTITY);
    let bad = |msg: String| Error::Dataset(format!("{}: {msg}", path.display()));
    let mut reader = decoder.read_info().map_err(|e| bad(e.to_string()))?;
    let mut buf = vec![
        0;
        reader
            .output_buffer_size()
            .ok_or_else(|| bad("image too large".into()))?
    ];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| bad(e.to_string()))?;
    if info.bit_depth != png::BitDepth::Eight
        || !matches!(
            info.color_type,
            png::ColorType::Grayscale | png::ColorType::Indexed
        )
    {
        return Err(bad(format!(
            "expected 8-bit grayscale or indexed PNG, got {:?} {:?}",
            info.color_type, info.bit_depth
        )));
    }
    let (w, h) = (info.width as usize, info.height as usize);
    Ok(Array2::from_shape_fn((h, w), |(y, x)| {
        buf[y * info.line_size + x]
    }))
}

/// Writes indices as an 8-bit palette PNG coloured with [`label_colour`].
pub fn write_index_png(path: &Path, labels: &Array2<u8>) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let (h, w) = labels.dim();
    let mut encoder = png::Encoder::new(BufWriter::new(file), w as u32, h as u32);
    encoder.set_color(png::ColorType::Indexed);
    encoder.set_depth(png::BitDepth::Eight);
    let palette: Vec<u8> = (0..=255u8).flat_map(label_colour).collect();
    encoder.set_palette(palette);
    let bad = |e: png::EncodingError| Error::Dataset(format!("{}: {e}", path.display()));
    let mut writer = encoder.write_header().map_err(bad)?;
    let data: Vec<u8> = labels.as_standard_layout().iter().copied().collect();
    writer.write_image_data(&data).map_err(bad)?;
    writer.finish().map_err(bad)
}

/// The standard VOC colour map: bits of the label spread over the high bits of R, G and B.
pub fn label_colour(label: u8) -> [u8; 3] {
    let mut rgb = [0u8; 3];
    let mut c = label;
    for shift in (0..8).rev() {
        for (ch, v) in rgb.iter_mut().enumerate() {
            *v |= ((c >> ch) & 1) << shift;
        }
        c >>= 3;
    }
    rgb
}

/// Image colours of the synthetic classes (index 0 is background), `[0, 1]` RGB.
pub fn synthetic_palette(num_foreground: usize) -> Vec<[f64; 3]> {
    (0..=num_foreground)
        .map(|i| {
            let c = label_colour(i as u8);
            [
                c[0] as f64 / 255.0,
                c[1] as f64 / 255.0,
                c[2] as f64 / 255.0,
            ]
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub seed: u64,
    pub count: usize,
    /// the last `val_count` images form the `val` split
    pub val_count: usize,
    /// grid in patches `(rows, cols)`
    pub grid: (usize, usize),
    pub patch_size: usize,
    pub num_classes: usize,
    pub max_objects: usize,
}

impl SynthConfig {
    pub fn new(seed: u64, count: usize, grid: (usize, usize), num_classes: usize) -> Self {
        Self {
            seed,
            count,
            val_count: 0,
            grid,
            patch_size: 8,
            num_classes,
            max_objects: 2,
        }
    }
}

pub const SYNTH_CLASS_PREFIX: &str = "shape";

/// Writes a synthetic dataset of patch-aligned coloured rectangles and
/// returns the manifest of its `all` split.
pub fn make_synthetic_dataset(root: &Path, cfg: &SynthConfig) -> Result<DatasetManifest> {
    if cfg.count == 0
        || cfg.num_classes == 0
        || cfg.grid.0 == 0
        || cfg.grid.1 == 0
        || cfg.patch_size == 0
    {
        return Err(Error::InvalidArgument(
            "synthetic dataset needs positive count, classes, grid and patch".into(),
        ));
    }
    if cfg.val_count > cfg.count || cfg.num_classes > 254 {
        return Err(Error::InvalidArgument(
            "val_count must not exceed count and classes must fit in u8".into(),
        ));
    }
    for dir in ["images", "masks", "splits"] {
        let p = root.join(dir);
        std::fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
    }
    let class_names: Vec<String> = (1..=cfg.num_classes)
        .map(|i| format!("{SYNTH_CLASS_PREFIX}{i}"))
        .collect();
    let palette = synthetic_palette(cfg.num_classes);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (gh, gw) = cfg.grid;
    let p = cfg.patch_size;
    let mut ids = Vec::with_capacity(cfg.count);
    let mut label_lines = String::new();
    for n in 0..cfg.count {
        let id = format!("synth_{n:04}");
        let mut cells = Array2::<u8>::zeros((gh, gw));
        let objects = rng.random_range(1..=cfg.max_objects.clamp(1, cfg.num_classes));
        let mut classes: Vec<usize> = (1..=cfg.num_classes).collect();
        for k in 0..objects {
            let pick = rng.random_range(k..classes.len());
            classes.swap(k, pick);
            let cls = classes[k];
            let rh = rng.random_range(1..=gh.div_ceil(2).max(1));
            let rw = rng.random_range(1..=gw.div_ceil(2).max(1));
            let y0 = rng.random_range(0..=gh - rh);
            let x0 = rng.random_range(0..=gw - rw);
            cells
                .slice_mut(s![y0..y0 + rh, x0..x0 + rw])
                .fill(cls as u8);
        }
        let mask = Array2::from_shape_fn((gh * p, gw * p), |(y, x)| cells[[y / p, x / p]]);
        let image = Array3::from_shape_fn((3, gh * p, gw * p), |(c, y, x)| {
            palette[mask[[y, x]] as usize][c]
        });
        let mut present: Vec<u8> = cells.iter().copied().filter(|&v| v > 0).collect();
        present.sort_unstable();
        present.dedup();
        let names: Vec<&str> = present
            .iter()
            .map(|&v| class_names[v as usize - 1].as_str())
            .collect();
        label_lines.push_str(&format!("{id} {}\n", names.join(",")));
        write_rgb(&root.join("images").join(format!("{id}.png")), image.view())?;
        write_index_png(&root.join("masks").join(format!("{id}.png")), &mask)?;
        ids.push(id);
    }
    let write = |name: &str, text: String| -> Result<()> {
        let path = root.join(name);
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
    };
    write("image_labels.txt", label_lines)?;
    write(
        "classes.txt",
        class_names.iter().map(|n| format!("{n}\n")).collect(),
    )?;
    let split = |ids: &[String]| ids.iter().map(|i| format!("{i}\n")).collect::<String>();
    let cut = cfg.count - cfg.val_count;
    write("splits/all.txt", split(&ids))?;
    write("splits/train.txt", split(&ids[..cut]))?;
    write("splits/val.txt", split(&ids[cut..]))?;
    load_dataset(root, "all", LoadMode::Full)
}

/// Rows are ground truth, columns prediction.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    pub counts: Array2<u64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MiouReport {
    /// `None` for classes absent from both ground truth and prediction
    pub per_class: Vec<Option<f64>>,
    pub mean: f64,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> Self {
        Self {
            counts: Array2::zeros((num_classes, num_classes)),
        }
    }

    pub fn num_classes(&self) -> usize {
        self.counts.nrows()
    }

    pub fn total(&self) -> u64 {
        self.counts.sum()
    }

    /// Adds a pair of label maps; ground-truth pixels equal to [`IGNORE_LABEL`] are skipped.
    pub fn add(&mut self, prediction: &Array2<usize>, truth: &Array2<usize>) -> Result<()> {
        if prediction.dim() != truth.dim() {
            return Err(Error::shape(
                "confusion matrix",
                truth.dim(),
                prediction.dim(),
            ));
        }
        let c = self.num_classes();
        for (&p, &t) in prediction.iter().zip(truth.iter()) {
            if t == IGNORE_LABEL {
                continue;
            }
            if t >= c || p >= c {
                return Err(Error::LabelOutOfRange {
                    label: t.max(p),
                    classes: c,
                });
            }
            self.counts[[t, p]] += 1;
        }
        Ok(())
    }

    pub fn miou(&self) -> MiouReport {
        let c = self.num_classes();
        let per_class: Vec<Option<f64>> = (0..c)
            .map(|k| {
                let tp = self.counts[[k, k]];
                let gt = self.counts.row(k).sum();
                let pred = self.counts.column(k).sum();
                let union = gt + pred - tp;
                (union > 0).then(|| tp as f64 / union as f64)
            })
            .collect();
        let valid: Vec<f64> = per_class.iter().flatten().copied().collect();
        let mean = if valid.is_empty() {
            0.0
        } else {
            valid.iter().sum::<f64>() / valid.len() as f64
        };
        MiouReport { per_class, mean }
    }
}

pub fn miou(
    predictions: &[Array2<usize>],
    truths: &[Array2<usize>],
    num_classes: usize,
) -> Result<MiouReport> {
    if predictions.len() != truths.len() {
        return Err(Error::shape("miou pairs", truths.len(), predictions.len()));
    }
    let mut cm = ConfusionMatrix::new(num_classes);
    for (p, t) in predictions.iter().zip(truths) {
        cm.add(p, t)?;
    }
    Ok(cm.miou())
}

#[derive(Debug, Clone, PartialEq)]
pub struct MultiScalePrediction {
    /// averaged class probabilities `(C, H, W)`
    pub probabilities: Array3<f64>,
    pub labels: Array2<usize>,
}

/// Per-pixel argmax, lowest index on ties.
pub fn argmax_classes(scores: &Array3<f64>) -> Array2<usize> {
    let (c, h, w) = scores.dim();
    Array2::from_shape_fn((h, w), |(y, x)| {
        let mut best = 0;
        for k in 1..c {
            if scores[[k, y, x]] > scores[[best, y, x]] {
                best = k;
            }
        }
        best
    })
}

/// Side length for `scale`, rounded to the nearest multiple of `patch` (at least one patch).
pub fn scaled_side(side: usize, scale: f64, patch: usize) -> usize {
    let target = (side as f64 * scale / patch as f64).round() as usize;
    target.max(1) * patch
}

fn resize_image(image: ArrayView3<'_, f64>, h: usize, w: usize) -> Array3<f64> {
    if (image.dim().1, image.dim().2) == (h, w) {
        image.to_owned()
    } else {
        resize_bilinear(&image.to_owned(), h, w)
    }
}

/// Averages softmax probabilities over rescaled copies of `image`.
pub fn multi_scale_infer(
    model: &Segmenter,
    image: ArrayView3<'_, f64>,
    scales: &[f64],
) -> Result<MultiScalePrediction> {
    if scales.is_empty() {
        return Err(Error::InvalidArgument("empty scale list".into()));
    }
    let (_, h, w) = image.dim();
    let patch = model.backbone.config().patch_size;
    let mut sum: Option<Array3<f64>> = None;
    for &scale in scales {
        if !(scale > 0.0 && scale.is_finite()) {
            return Err(Error::InvalidArgument(format!("invalid scale {scale}")));
        }
        let (sh, sw) = (scaled_side(h, scale, patch), scaled_side(w, scale, patch));
        let logits = model.logits(resize_image(image, sh, sw).view())?;
        let probs = class_probabilities(&logits);
        let probs = if (sh, sw) == (h, w) {
            probs
        } else {
            resize_bilinear(&probs, h, w)
        };
        match sum.as_mut() {
            Some(acc) => *acc += &probs,
            None => sum = Some(probs),
        }
    }
    let probabilities = sum.expect("non-empty scales") / scales.len() as f64;
    let labels = argmax_classes(&probabilities);
    Ok(MultiScalePrediction {
        probabilities,
        labels,
    })
}

/// Multi-scale predictions for every sample carrying a mask, scored by mIoU.
pub fn evaluate(
    model: &Segmenter,
    samples: &[Sample],
    num_classes: usize,
    scales: &[f64],
) -> Result<MiouReport> {
    let pairs: Vec<(Array2<usize>, Array2<usize>)> = samples
        .iter()
        .filter_map(|s| s.mask.as_ref().map(|m| (s, m)))
        .map(|(s, m)| {
            Ok((
                multi_scale_infer(model, s.image.view(), scales)?.labels,
                m.mapv(|v| v as usize),
            ))
        })
        .collect::<Result<_>>()?;
    if pairs.is_empty() {
        return Err(Error::Dataset("no samples with masks to evaluate".into()));
    }
    let mut cm = ConfusionMatrix::new(num_classes);
    for (p, t) in &pairs {
        cm.add(p, t)?;
    }
    Ok(cm.miou())
}

#[derive(Serialize)]
struct PaletteEntry<'a> {
    index: usize,
    name: &'a str,
    rgb: [u8; 3],
}

/// `palette.json`: entries ordered by class index, background first, then the ignore label.
pub fn write_palette_json(path: &Path, class_names: &[String]) -> Result<()> {
    let mut entries = vec![PaletteEntry {
        index: 0,
        name: "background",
        rgb: label_colour(0),
    }];
    for (i, n) in class_names.iter().enumerate() {
        entries.push(PaletteEntry {
            index: i + 1,
            name: n,
            rgb: label_colour((i + 1) as u8),
        });
    }
    entries.push(PaletteEntry {
        index: IGNORE_LABEL,
        name: "ignore",
        rgb: label_colour(IGNORE_LABEL as u8),
    });
    let text = serde_json::to_string_pretty(&entries).map_err(|e| Error::Dataset(e.to_string()))?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

/// Tab-separated `class<TAB>iou` lines followed by `mean<TAB>miou`; absent classes show `NA`.
pub fn format_eval_report(report: &MiouReport, class_names: &[String]) -> String {
    let mut names: BTreeMap<usize, &str> = BTreeMap::new();
    names.insert(0, "background");
    for (i, n) in class_names.iter().enumerate() {
        names.insert(i + 1, n);
    }
    let mut out = String::from("class\tiou\n");
    for (k, v) in report.per_class.iter().enumerate() {
        let name = names.get(&k).copied().unwrap_or("?");
        match v {
            Some(v) => out.push_str(&format!("{name}\t{v:.6}\n")),
            None => out.push_str(&format!("{name}\tNA\n")),
        }
    }
    out.push_str(&format!("mean\t{:.6}\n", report.mean));
    out
}

pub fn write_eval_report(path: &Path, report: &MiouReport, class_names: &[String]) -> Result<()> {
    let mut f = BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?);
    f.write_all(format_eval_report(report, class_names).as_bytes())
        .and_then(|_| f.flush())
        .map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn voc_colours() {
        assert_eq!(label_colour(0), [0, 0, 0]);
        assert_eq!(label_colour(1), [128, 0, 0]);
        assert_eq!(label_colour(2), [0, 128, 0]);
        assert_eq!(label_colour(15), [192, 128, 128]);
        assert_eq!(label_colour(255), [224, 224, 192]);
    }

    #[test]
    fn miou_examples() {
        let gt = array![[0, 1], [1, 2]];
        let r = miou(std::slice::from_ref(&gt), std::slice::from_ref(&gt), 4).unwrap();
        assert_eq!(r.mean, 1.0);
        assert_eq!(r.per_class[3], None);
        let gt = array![[1, 1, 0, 0]];
        let pred = array![[0, 0, 1, 1]];
        let r = miou(&[pred], &[gt], 2).unwrap();
        assert_eq!(r.per_class[1], Some(0.0));
        let r = miou(&[array![[0, 1]]], &[array![[0, IGNORE_LABEL]]], 2).unwrap();
        assert_eq!(r.per_class, vec![Some(1.0), None]);
        assert!(miou(&[array![[0]]], &[array![[0, 1]]], 2).is_err());
        assert!(miou(&[array![[2]]], &[array![[0]]], 2).is_err());
    }

    #[test]
    fn scaled_sides_are_patch_multiples() {
        assert_eq!(scaled_side(320, 0.75, 16), 240);
        assert_eq!(scaled_side(64, 0.75, 8), 48);
        assert_eq!(scaled_side(40, 0.75, 16), 32);
        assert_eq!(scaled_side(8, 0.1, 8), 8);
    }

    #[test]
    fn report_format() {
        let r = MiouReport {
            per_class: vec![Some(1.0), None, Some(0.5)],
            mean: 0.75,
        };
        let text = format_eval_report(&r, &["a".into(), "b".into()]);
        assert_eq!(
            text,
            "class\tiou\nbackground\t1.000000\na\tNA\nb\t0.500000\nmean\t0.750000\n"
        );
    }

    #[test]
    fn argmax_ties_go_low() {
        let s = Array3::from_elem((3, 1, 2), 0.5);
        assert_eq!(argmax_classes(&s), array![[0, 0]]);
    }
}
