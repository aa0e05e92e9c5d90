//! `frozenseg`: train, infer, eval, make-cam and make-synth.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use frozenseg::archive::TensorArchive;
use frozenseg::backbone::ImageBatch;
use frozenseg::camgen::{build_prompts, compute_cam};
use frozenseg::datakit::{
    load_dataset, make_synthetic_dataset, multi_scale_infer, read_index_png, write_eval_report,
    write_index_png, write_palette_json, ConfusionMatrix, DatasetManifest, LoadMode, SynthConfig,
};
use frozenseg::decoder::Decoder;
use frozenseg::rfm::refine_pseudo_labels;
use frozenseg::training::{
    build_backbone, train, vocabulary_for, Segmenter, TrainConfig, TrainMode,
};
use frozenseg::Error;
use ndarray::Axis;

#[derive(Parser)]
#[command(
    name = "frozenseg",
    version,
    about = "Weakly supervised segmentation on a frozen encoder"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// flat `key = value` config file
    #[arg(long)]
    config: Option<PathBuf>,
    /// override one config key, repeatable
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// weak or full
    #[arg(long)]
    mode: Option<String>,
    /// output directory
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Train the decoder
    Train {
        #[command(flatten)]
        common: Common,
    },
    /// Predict label maps for a split
    Infer {
        #[command(flatten)]
        common: Common,
        /// decoder archive written by `train`
        #[arg(long)]
        checkpoint: PathBuf,
        /// split to predict, defaults to `val_split`
        #[arg(long)]
        split: Option<String>,
        /// comma-separated image ids to restrict to
        #[arg(long)]
        ids: Option<String>,
        /// comma-separated inference scales, overrides `scales`
        #[arg(long)]
        scales: Option<String>,
    },
    /// Score a prediction directory against dataset masks
    Eval {
        #[command(flatten)]
        common: Common,
        /// directory of `<id>.png` label maps
        #[arg(long)]
        pred: PathBuf,
        /// split to score, defaults to `val_split`
        #[arg(long)]
        split: Option<String>,
    },
    /// Write initial (and optionally refined) CAMs to tensor archives
    MakeCam {
        #[command(flatten)]
        common: Common,
        /// comma-separated image ids, defaults to the whole split
        #[arg(long)]
        ids: Option<String>,
        /// split to read, defaults to `train_split`
        #[arg(long)]
        split: Option<String>,
        /// also emit refined maps and pseudo labels
        #[arg(long)]
        refined: bool,
        /// decoder archive used for the affinity map; a seeded decoder otherwise
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Generate a synthetic rectangles dataset
    MakeSynth {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 8)]
        count: usize,
        /// images held out as the `val` split
        #[arg(long, default_value_t = 0)]
        val_count: usize,
        /// foreground classes
        #[arg(long, default_value_t = 2)]
        classes: usize,
        /// grid side in patches
        #[arg(long, default_value_t = 6)]
        grid: usize,
        /// patch side in pixels
        #[arg(long, default_value_t = 8)]
        patch: usize,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::InvalidArgument(_) => 2,
        Error::NonFinite(_) | Error::ZeroNorm(_) => 4,
        _ => 3,
    }
}

fn resolve(common: &Common) -> Result<TrainConfig, Error> {
    let mut cfg = match &common.config {
        Some(p) => TrainConfig::load(p)?,
        None => TrainConfig::default(),
    };
    for o in &common.overrides {
        cfg.apply_override(o)?;
    }
    if let Some(m) = &common.mode {
        cfg.set("mode", m)?;
    }
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn prepare_out(common: &Common, cfg: &TrainConfig) -> Result<(), Error> {
    std::fs::create_dir_all(&common.out).map_err(|e| io_error(&common.out, e))?;
    let path = common.out.join("resolved.cfg");
    std::fs::write(&path, cfg.to_text()).map_err(|e| io_error(&path, e))
}

fn io_error(path: &Path, e: std::io::Error) -> Error {
    Error::Dataset(format!("{}: {e}", path.display()))
}

fn id_filter(manifest: &mut DatasetManifest, ids: Option<&str>) -> Result<(), Error> {
    let Some(ids) = ids else { return Ok(()) };
    let wanted: Vec<&str> = ids
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .collect();
    for id in &wanted {
        if !manifest.records.iter().any(|r| r.id == *id) {
            return Err(Error::Dataset(format!(
                "image id {id} is not in split {}",
                manifest.split
            )));
        }
    }
    manifest.records.retain(|r| wanted.contains(&r.id.as_str()));
    Ok(())
}

fn load_segmenter(
    cfg: &TrainConfig,
    class_names: &[String],
    checkpoint: Option<&Path>,
) -> Result<Segmenter, Error> {
    let backbone = build_backbone(cfg, class_names)?;
    let mut decoder = Decoder::new(cfg.decoder_config(class_names.len() + 1), cfg.seed)?;
    if let Some(path) = checkpoint {
        if !path.is_file() {
            return Err(Error::Dataset(format!(
                "checkpoint {} not found",
                path.display()
            )));
        }
        decoder.load_archive(&TensorArchive::read(path)?)?;
    }
    Ok(Segmenter { backbone, decoder })
}

fn cmd_train(common: &Common) -> Result<(), Error> {
    let cfg = resolve(common)?;
    prepare_out(common, &cfg)?;
    let mode = match cfg.mode {
        TrainMode::Weak => LoadMode::Weak,
        TrainMode::Full => LoadMode::Full,
    };
    let manifest = load_dataset(&cfg.data_root, &cfg.train_split, mode)?;
    let samples = manifest.load_samples()?;
    let backbone = build_backbone(&cfg, &manifest.class_names)?;
    let report = train(
        &cfg,
        backbone,
        &manifest.class_names,
        &samples,
        Some(&common.out),
    )?;
    if let Some(last) = report.history.last() {
        println!(
            "trained {} steps, final loss {:.6} (seg {:.6}, aff {:.6})",
            report.history.len(),
            last.total,
            last.seg_loss,
            last.aff_loss
        );
    } else {
        println!("trained 0 steps");
    }
    println!("checkpoint {}", common.out.join("decoder.tsr").display());
    Ok(())
}

fn cmd_infer(
    common: &Common,
    checkpoint: &Path,
    split: Option<&str>,
    ids: Option<&str>,
    scales: Option<&str>,
) -> Result<(), Error> {
    let mut cfg = resolve(common)?;
    if let Some(s) = scales {
        cfg.set("scales", s)?;
        cfg.validate()?;
    }
    prepare_out(common, &cfg)?;
    let split = split.unwrap_or(&cfg.val_split).to_string();
    let mut manifest = load_dataset(&cfg.data_root, &split, LoadMode::Inference)?;
    id_filter(&mut manifest, ids)?;
    let segmenter = load_segmenter(&cfg, &manifest.class_names, Some(checkpoint))?;
    let pred_dir = common.out.join("predictions");
    std::fs::create_dir_all(&pred_dir).map_err(|e| io_error(&pred_dir, e))?;
    write_palette_json(&common.out.join("palette.json"), &manifest.class_names)?;
    for i in 0..manifest.len() {
        let sample = manifest.load_sample(i)?;
        let pred = multi_scale_infer(&segmenter, sample.image.view(), &cfg.scales)?;
        let labels = pred.labels.mapv(|v| v as u8);
        write_index_png(&pred_dir.join(format!("{}.png", sample.id)), &labels)?;
    }
    println!(
        "wrote {} predictions to {}",
        manifest.len(),
        pred_dir.display()
    );
    Ok(())
}

fn cmd_eval(common: &Common, pred: &Path, split: Option<&str>) -> Result<(), Error> {
    let cfg = resolve(common)?;
    prepare_out(common, &cfg)?;
    let split = split.unwrap_or(&cfg.val_split).to_string();
    let manifest = load_dataset(&cfg.data_root, &split, LoadMode::Full)?;
    let mut cm = ConfusionMatrix::new(manifest.num_classes());
    for rec in &manifest.records {
        let path = pred.join(format!("{}.png", rec.id));
        if !path.is_file() {
            return Err(Error::Dataset(format!(
                "prediction {} not found",
                path.display()
            )));
        }
        let p = read_index_png(&path)?.mapv(|v| v as usize);
        let t = read_index_png(rec.mask_path.as_ref().expect("full mode has masks"))?
            .mapv(|v| v as usize);
        cm.add(&p, &t)?;
    }
    let report = cm.miou();
    let path = common.out.join("eval.tsv");
    write_eval_report(&path, &report, &manifest.class_names)?;
    print!(
        "{}",
        frozenseg::datakit::format_eval_report(&report, &manifest.class_names)
    );
    println!("mIoU {:.4}", report.mean);
    Ok(())
}

fn cmd_make_cam(
    common: &Common,
    ids: Option<&str>,
    split: Option<&str>,
    refined: bool,
    checkpoint: Option<&Path>,
) -> Result<(), Error> {
    let cfg = resolve(common)?;
    prepare_out(common, &cfg)?;
    let split = split.unwrap_or(&cfg.train_split).to_string();
    let mut manifest = load_dataset(&cfg.data_root, &split, LoadMode::Weak)?;
    id_filter(&mut manifest, ids)?;
    let names = manifest.class_names.clone();
    let segmenter = load_segmenter(&cfg, &names, checkpoint)?;
    let vocabulary = vocabulary_for(&cfg, &names)?;
    let channel_name = |label: usize| {
        if label == 0 {
            "background".to_string()
        } else {
            names[label - 1].clone()
        }
    };
    for i in 0..manifest.len() {
        let sample = manifest.load_sample(i)?;
        let enc = segmenter
            .backbone
            .encode_image(&ImageBatch::from_images(std::slice::from_ref(&sample.image))?)?;
        let text = segmenter
            .backbone
            .encode_text(&build_prompts(&vocabulary, &sample.labels)?)?;
        let cam = compute_cam(
            enc.pooled.pooled.row(0),
            enc.pooled.tokens.index_axis(Axis(0), 0),
            &text,
            &vocabulary,
            &sample.labels,
            enc.features.grid,
            &cfg.cam_config(),
        )?;
        let mut archive = TensorArchive::new();
        for (c, &label) in cam.labels.iter().enumerate() {
            archive.insert_array(
                format!("cam/{}", channel_name(label)),
                cam.maps.index_axis(Axis(0), c).into_dyn(),
            )?;
        }
        if refined {
            let (_, fused) = segmenter.decoder.forward(
                &enc.features,
                0,
                (sample.image.dim().1, sample.image.dim().2),
            )?;
            let out = refine_pseudo_labels(
                fused.tokens.view(),
                &enc.attentions.sample(0),
                &cam,
                Some(sample.image.view()),
                &cfg.rfm_config(),
            )?;
            for (c, &label) in cam.labels.iter().enumerate() {
                archive.insert_array(
                    format!("refined/{}", channel_name(label)),
                    out.refined.cams.maps.index_axis(Axis(0), c).into_dyn(),
                )?;
            }
            let pseudo = out.pseudo.labels.mapv(|v| v as f64);
            archive.insert_array("pseudo", pseudo.view().into_dyn())?;
            write_index_png(
                &common.out.join(format!("{}_pseudo.png", sample.id)),
                &out.pseudo.labels.mapv(|v| v as u8),
            )?;
        }
        archive.write(&common.out.join(format!("{}.tsr", sample.id)))?;
    }
    if refined {
        write_palette_json(&common.out.join("palette.json"), &names)?;
    }
    println!(
        "wrote CAMs for {} images to {}",
        manifest.len(),
        common.out.display()
    );
    Ok(())
}

fn cmd_make_synth(
    common: &Common,
    count: usize,
    val_count: usize,
    classes: usize,
    grid: usize,
    patch: usize,
) -> Result<(), Error> {
    let cfg = resolve(common)?;
    let mut synth = SynthConfig::new(
        common.seed.unwrap_or(cfg.seed),
        count,
        (grid, grid),
        classes,
    );
    synth.val_count = val_count;
    synth.patch_size = patch;
    let manifest = make_synthetic_dataset(&common.out, &synth)?;
    prepare_out(common, &cfg)?;
    println!(
        "wrote {} images to {}",
        manifest.len(),
        common.out.display()
    );
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let result = match &cli.command {
        Command::Train { common } => cmd_train(common),
        Command::Infer {
            common,
            checkpoint,
            split,
            ids,
            scales,
        } => cmd_infer(
            common,
            checkpoint,
            split.as_deref(),
            ids.as_deref(),
            scales.as_deref(),
        ),
        Command::Eval {
            common,
            pred,
            split,
        } => cmd_eval(common, pred, split.as_deref()),
        Command::MakeCam {
            common,
            ids,
            split,
            refined,
            checkpoint,
        } => cmd_make_cam(
            common,
            ids.as_deref(),
            split.as_deref(),
            *refined,
            checkpoint.as_deref(),
        ),
        Command::MakeSynth {
            common,
            count,
            val_count,
            classes,
            grid,
            patch,
        } => cmd_make_synth(common, *count, *val_count, *classes, *grid, *patch),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
