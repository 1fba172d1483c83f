use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::Serialize;
use videolstm::checkpoint::{self, Checkpoint};
use videolstm::data::{Dataset, VideoClip};
use videolstm::eval::{self, Detection, EvalReport, GroundTruth, ThresholdValue};
use videolstm::experiment;
use videolstm::geometry::BoundingBox;
use videolstm::localize::{self, LocalizationConfig};
use videolstm::model::{fuse_streams, Model};
use videolstm::train::{clip_inputs, predict_clips, TraceRow, TrainConfig, Trainer};
use videolstm::{Error, Result, Tensor};

use crate::config::{set, set_some, RunConfig};
use crate::{CompareArgs, EvalArgs, ExportArgs, GenDataArgs, HyperArgs, LocalizeArgs, TrainArgs};

const CHECKPOINT_DIR: &str = "checkpoint";
const TRACE_FILE: &str = "trace.csv";
/// IoU thresholds of the mAP table.
const MAP_THRESHOLDS: [f64; 5] = [0.1, 0.2, 0.3, 0.4, 0.5];

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

fn split<'a>(data: &'a Dataset, name: &str) -> Result<&'a [VideoClip]> {
    let clips = match name {
        "train" => &data.train,
        "test" => &data.test,
        other => return Err(Error::Usage(format!("unknown split {other:?}; expected train or test"))),
    };
    if clips.is_empty() {
        return Err(Error::Usage(format!("the {name} split is empty")));
    }
    Ok(clips)
}

pub fn gen_data(args: GenDataArgs) -> Result<()> {
    let mut cfg = RunConfig::load(args.config.as_deref())?;
    set_some(&mut cfg.out, args.out);
    set_some(&mut cfg.seed, args.seed);
    let d = &mut cfg.dataset;
    set(&mut d.classes, args.classes);
    set(&mut d.train_per_class, args.clips_per_class);
    set(&mut d.test_per_class, args.test_clips_per_class);
    set(&mut d.frames, args.frames);
    set(&mut d.frame_size, args.frame);
    set(&mut d.clutter, args.clutter);
    set(&mut d.noise, args.noise);
    if args.glyph_size.is_some() {
        d.glyph_size = args.glyph_size;
    }
    if let Some(seed) = cfg.seed {
        d.seed = seed;
    }
    d.validate()?;
    let out = cfg.out_dir()?.to_path_buf();
    let data = Dataset::generate(&cfg.dataset)?;
    let manifest = data.write(&out)?;
    cfg.echo()?;
    println!(
        "wrote {} training and {} test clips to {}",
        data.train.len(),
        data.test.len(),
        out.display()
    );
    log::info!("{} manifest entries", manifest.clips.len());
    Ok(())
}

fn apply_hyper(cfg: &mut RunConfig, h: HyperArgs) {
    set(&mut cfg.train.snippet_length, h.snippet_len);
    set(&mut cfg.train.learning_rate, h.lr);
    set(&mut cfg.train.decay, h.decay);
    set(&mut cfg.train.max_epochs, h.epochs);
    set(&mut cfg.train.batch_size, h.batch_size);
    set(&mut cfg.model.dropout_rate, h.dropout);
    set(&mut cfg.model.hidden, h.hidden);
}

/// Frame geometry and class count always follow the dataset.
fn fit_model_to_data(cfg: &mut RunConfig, data: &Dataset) {
    cfg.model.frame_size = data.config.frame_size;
    cfg.model.frame_channels = data.config.channels;
    cfg.model.num_classes = data.config.classes;
}

fn write_trace(path: &Path, rows: &[TraceRow], append: bool) -> Result<()> {
    let exists = append && path.exists();
    let file = fs::OpenOptions::new()
        .create(true)
        .write(true)
        .append(exists)
        .truncate(!exists)
        .open(path)?;
    let mut out = BufWriter::new(file);
    if !exists {
        writeln!(out, "iteration,loss,train_acc")?;
    }
    for r in rows {
        writeln!(out, "{},{},{}", r.iteration, r.loss, r.train_acc)?;
    }
    out.flush()?;
    Ok(())
}

pub fn train(args: TrainArgs, workers: Option<usize>) -> Result<()> {
    let mut cfg = RunConfig::load(args.config.as_deref())?;
    let resume = args.resume.as_deref().map(checkpoint::load).transpose()?;
    if let Some(ck) = &resume {
        cfg.model = ck.model.config.clone();
        if args.config.is_none() {
            if let Some(t) = &ck.train {
                cfg.train = t.clone();
            }
        }
    }
    set_some(&mut cfg.data, args.data);
    set_some(&mut cfg.out, args.out);
    set_some(&mut cfg.seed, args.seed);
    set(&mut cfg.model.variant, args.variant);
    set(&mut cfg.model.stream, args.stream);
    apply_hyper(&mut cfg, args.hyper);
    if let Some(seed) = cfg.seed {
        cfg.train.seed = seed;
    }
    set(&mut cfg.train.workers, workers);

    let data = Dataset::load(cfg.data_dir()?)?;
    fit_model_to_data(&mut cfg, &data);
    cfg.model.validate()?;
    cfg.train.validate()?;
    let out = cfg.out_dir()?.to_path_buf();
    cfg.echo()?;

    let mut trainer = match resume {
        Some(ck) => {
            if ck.model.config != cfg.model {
                return Err(Error::Config(
                    "the resumed checkpoint was trained with a different model configuration".into(),
                ));
            }
            ck.into_trainer(cfg.train.clone())?
        }
        None => Trainer::new(Model::new(cfg.model.clone(), cfg.train.seed)?, cfg.train.clone())?,
    };
    let appending = trainer.iteration > 0;
    let ckpt_dir = out.join(CHECKPOINT_DIR);
    let per_epoch = trainer.iterations_per_epoch(data.train.len());
    log::info!(
        "{} {}: {} parameters, {} iterations per epoch",
        cfg.model.variant,
        cfg.model.stream,
        trainer.model.num_parameters(),
        per_epoch
    );

    let mut rows = Vec::new();
    let result = trainer.train(&data.train, |t, row| {
        rows.push(*row);
        if t.iteration % per_epoch == 0 {
            log::info!("epoch {}: loss {:.4}", t.iteration / per_epoch, row.loss);
            checkpoint::save_trainer(&ckpt_dir, t)?;
        }
        Ok(())
    });
    write_trace(&out.join(TRACE_FILE), &rows, appending)?;
    match result {
        Ok(_) => {
            checkpoint::save_trainer(&ckpt_dir, &trainer)?;
            let last = rows.last().map_or(f64::NAN, |r| r.loss);
            println!(
                "trained {} iterations; final loss {last:.4}; checkpoint in {}",
                trainer.iteration,
                ckpt_dir.display()
            );
            Ok(())
        }
        Err(e @ Error::Divergence { .. }) => {
            checkpoint::save_trainer(&ckpt_dir, &trainer)?;
            eprintln!(
                "diagnostics: last finite parameters saved to {}; try a lower --lr (currently {})",
                ckpt_dir.display(),
                cfg.train.learning_rate
            );
            Err(e)
        }
        Err(e) => Err(e),
    }
}

fn snippet_length(ck: &Checkpoint, flag: Option<usize>) -> usize {
    flag.or(ck.train.as_ref().map(|t| t.snippet_length))
        .unwrap_or(TrainConfig::default().snippet_length)
}

#[derive(Serialize)]
struct InputAccuracy {
    checkpoint: PathBuf,
    variant: String,
    stream: String,
    accuracy: f64,
}

#[derive(Serialize)]
struct ClassificationReport {
    split: String,
    segments: usize,
    inputs: Vec<InputAccuracy>,
    fused: bool,
    /// Predicted class per video.
    predictions: Vec<usize>,
    report: EvalReport,
}

pub fn eval(args: EvalArgs, workers: Option<usize>) -> Result<()> {
    let paths: Vec<PathBuf> = match (&args.checkpoint, &args.fuse) {
        (Some(p), None) => vec![p.clone()],
        (None, Some(pair)) => pair.clone(),
        _ => return Err(Error::Usage("pass either --checkpoint or --fuse".into())),
    };
    if args.segments == 0 {
        return Err(Error::Usage("--segments must be positive".into()));
    }
    let checkpoints = paths.iter().map(|p| checkpoint::load(p)).collect::<Result<Vec<_>>>()?;
    if let [a, b] = checkpoints.as_slice() {
        if a.model.config.num_classes != b.model.config.num_classes {
            return Err(Error::Config(format!(
                "cannot fuse checkpoints with {} and {} classes",
                a.model.config.num_classes, b.model.config.num_classes
            )));
        }
    }
    let data = Dataset::load(&args.data)?;
    let clips = split(&data, &args.split)?;
    if clips[0].extents().0 != checkpoints[0].model.config.frame_size {
        return Err(Error::Config("checkpoint frame size does not match the dataset".into()));
    }
    let labels: Vec<usize> = clips.iter().map(|c| c.label).collect();

    let mut inputs = Vec::new();
    let mut streams = Vec::new();
    for (path, ck) in paths.iter().zip(&checkpoints) {
        let probs = predict_clips(
            &ck.model,
            clips,
            args.segments,
            snippet_length(ck, args.snippet_len),
            workers.unwrap_or(1),
        )?;
        inputs.push(InputAccuracy {
            checkpoint: path.clone(),
            variant: ck.model.config.variant.to_string(),
            stream: ck.model.config.stream.to_string(),
            accuracy: eval::accuracy(&probs, &labels)?,
        });
        streams.push(probs);
    }
    let final_probs: Vec<Tensor> = match streams.as_slice() {
        [single] => single.clone(),
        [a, b] => a.iter().zip(b).map(|(p, q)| fuse_streams(p, q)).collect::<Result<_>>()?,
        _ => unreachable!("one or two checkpoints"),
    };
    let report = ClassificationReport {
        split: args.split.clone(),
        segments: args.segments,
        fused: streams.len() == 2,
        predictions: final_probs.iter().map(Tensor::argmax).collect(),
        inputs,
        report: EvalReport {
            accuracy: eval::accuracy(&final_probs, &labels)?,
            map: Vec::new(),
            recall: Vec::new(),
            mean_tube_iou: None,
        },
    };
    let mut text = String::new();
    for i in &report.inputs {
        text.push_str(&format!("{:<10} {:<5} accuracy {:.4}\n", i.variant, i.stream, i.accuracy));
    }
    if report.fused {
        text.push_str(&format!("fused            accuracy {:.4}\n", report.report.accuracy));
    }
    print!("{text}");
    if let Some(out) = &args.out {
        fs::create_dir_all(out)?;
        write_json(&out.join("eval.json"), &report)?;
        fs::write(out.join("eval.txt"), text)?;
    }
    Ok(())
}

#[derive(Serialize)]
struct TubeRecord {
    video: usize,
    label: usize,
    boxes: Vec<BoundingBox>,
    class_scores: Vec<f64>,
}

#[derive(Serialize)]
struct LocalizeReport {
    split: String,
    smooth: bool,
    /// Mean tube IoU with and without temporal smoothing.
    mean_iou_smoothed: f64,
    mean_iou_unsmoothed: f64,
    empty_tubes: Vec<usize>,
    report: EvalReport,
}

struct VideoResult {
    tubes: std::result::Result<(localize::Tube, localize::Tube), Error>,
    saliency: Vec<Tensor>,
}

fn localize_clip(model: &Model, clip: &VideoClip, cfg: &LocalizationConfig, export: bool) -> Result<VideoResult> {
    let (inputs, motion) = clip_inputs(model, clip);
    let pred = model.predict(&inputs, motion.as_deref())?;
    let (h, w, _) = clip.extents();
    let tube_with = |smooth: bool| {
        let c = LocalizationConfig { smooth, ..cfg.clone() };
        localize::build_tube(&pred.attention, &pred.frame_probs, h, w, &c)
    };
    let tubes = match (tube_with(true), tube_with(false)) {
        (Ok(a), Ok(b)) => Ok((a, b)),
        (Err(e), _) | (_, Err(e)) => Err(e),
    };
    let saliency = if export {
        localize::video_saliency(&pred.attention, h, w, cfg.sigma_for(h))?
    } else {
        Vec::new()
    };
    Ok(VideoResult { tubes, saliency })
}

fn some_boxes(boxes: &[BoundingBox]) -> Vec<Option<BoundingBox>> {
    boxes.iter().copied().map(Some).collect()
}

pub fn localize(args: LocalizeArgs) -> Result<()> {
    let mut cfg = RunConfig::load(args.config.as_deref())?;
    set_some(&mut cfg.data, args.data);
    set_some(&mut cfg.out, args.out);
    let l = &mut cfg.localization;
    set(&mut l.threshold, args.theta);
    set(&mut l.span, args.span);
    if args.sigma.is_some() {
        l.sigma = args.sigma;
    }
    if args.smooth {
        l.smooth = true;
    }
    if args.no_smooth {
        l.smooth = false;
    }
    l.validate()?;
    let ck = checkpoint::load(&args.checkpoint)?;
    let variant = ck.model.config.variant;
    if !variant.has_attention() {
        return Err(Error::Usage(format!("{variant} has no attention to localize with")));
    }
    cfg.model = ck.model.config.clone();
    let data = Dataset::load(cfg.data_dir()?)?;
    let clips = split(&data, &args.split)?;
    let out = cfg.out_dir()?.to_path_buf();
    cfg.echo()?;

    let loc = cfg.localization.clone();
    let results = clips
        .par_iter()
        .map(|c| localize_clip(&ck.model, c, &loc, args.export_saliency))
        .collect::<Result<Vec<_>>>()?;

    let mut records = Vec::new();
    let mut detections = Vec::new();
    let mut empty = Vec::new();
    let mut gts = BTreeMap::new();
    let (mut iou_s, mut iou_u, mut predictions, mut labels) = (0.0, 0.0, Vec::new(), Vec::new());
    for (video, (clip, result)) in clips.iter().zip(&results).enumerate() {
        gts.insert(
            video,
            GroundTruth {
                label: clip.label,
                boxes: clip.gt_boxes.clone(),
            },
        );
        match &result.tubes {
            Ok((smoothed, raw)) => {
                iou_s += eval::tube_iou(&some_boxes(&smoothed.boxes), &clip.gt_boxes);
                iou_u += eval::tube_iou(&some_boxes(&raw.boxes), &clip.gt_boxes);
                let chosen = if loc.smooth { smoothed } else { raw };
                detections.push(Detection {
                    video,
                    boxes: some_boxes(&chosen.boxes),
                    class_scores: chosen.class_scores.clone(),
                });
                predictions.push(Tensor::new([chosen.class_scores.len()], chosen.class_scores.clone())?);
                labels.push(clip.label);
                records.push(TubeRecord {
                    video,
                    label: clip.label,
                    boxes: chosen.boxes.clone(),
                    class_scores: chosen.class_scores.clone(),
                });
            }
            Err(Error::EmptyTube) => {
                log::warn!("video {video}: no saliency component above the threshold; no tube");
                empty.push(video);
            }
            Err(e) => return Err(Error::Format(format!("video {video}: {e}"))),
        }
        if args.export_saliency {
            let dir = out.join("saliency").join(format!("{}_{video:05}", args.split));
            fs::create_dir_all(&dir)?;
            for (t, s) in result.saliency.iter().enumerate() {
                fs::write(dir.join(format!("frame_{t:03}.pgm")), localize::encode_pgm(s)?)?;
            }
        }
    }
    if !empty.is_empty() {
        log::warn!("{} of {} videos produced no tube", empty.len(), clips.len());
    }
    let n = clips.len() as f64;
    let classes = ck.model.config.num_classes;
    let map = MAP_THRESHOLDS
        .iter()
        .map(|&thr| {
            let value = eval::mean_average_precision(&detections, &gts, classes, thr)?;
            Ok(ThresholdValue { threshold: thr, value })
        })
        .collect::<Result<Vec<_>>>()?;
    let recall_thresholds: Vec<f64> = (1..=20).map(|i| i as f64 / 20.0).collect();
    let recall = eval::recall_at_iou(&detections, &gts, &recall_thresholds)
        .into_iter()
        .map(|(threshold, value)| ThresholdValue { threshold, value })
        .collect();
    let (mean_s, mean_u) = (iou_s / n, iou_u / n);
    let report = LocalizeReport {
        split: args.split.clone(),
        smooth: loc.smooth,
        mean_iou_smoothed: mean_s,
        mean_iou_unsmoothed: mean_u,
        empty_tubes: empty,
        report: EvalReport {
            accuracy: if labels.is_empty() { 0.0 } else { eval::accuracy(&predictions, &labels)? },
            map,
            recall,
            mean_tube_iou: Some(if loc.smooth { mean_s } else { mean_u }),
        },
    };
    write_json(&out.join("tubes.json"), &records)?;
    write_json(&out.join("report.json"), &report)?;
    let text = format!(
        "mean tube IoU   smoothed {mean_s:.4}   unsmoothed {mean_u:.4}\n{}",
        report.report.to_text()
    );
    fs::write(out.join("report.txt"), &text)?;
    fs::write(out.join("recall.csv"), report.report.recall_csv())?;
    print!("{text}");
    Ok(())
}

#[derive(Serialize)]
struct AttentionRecord {
    video: usize,
    label: usize,
    /// Per frame, an `N × N` grid in row-major order.
    attention: Vec<Vec<Vec<f64>>>,
}

pub fn export_attention(args: ExportArgs) -> Result<()> {
    let ck = checkpoint::load(&args.checkpoint)?;
    let variant = ck.model.config.variant;
    if !variant.has_attention() {
        return Err(Error::Usage(format!("{variant} has no attention maps")));
    }
    let data = Dataset::load(&args.data)?;
    let clips = split(&data, &args.split)?;
    let records = clips
        .par_iter()
        .enumerate()
        .map(|(video, clip)| {
            let (inputs, motion) = clip_inputs(&ck.model, clip);
            let pred = ck.model.predict(&inputs, motion.as_deref())?;
            let attention = pred
                .attention
                .iter()
                .map(|a| {
                    let n = a.shape()[1];
                    a.data().chunks(n).map(<[f64]>::to_vec).collect()
                })
                .collect();
            Ok(AttentionRecord {
                video,
                label: clip.label,
                attention,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    fs::create_dir_all(&args.out)?;
    let path = args.out.join("attention.json");
    let mut file = BufWriter::new(File::create(&path)?);
    serde_json::to_writer(&mut file, &records)?;
    file.flush()?;
    println!("wrote attention for {} videos to {}", records.len(), path.display());
    Ok(())
}

pub fn compare(args: CompareArgs, workers: Option<usize>) -> Result<()> {
    let mut cfg = RunConfig::load(args.config.as_deref())?;
    set_some(&mut cfg.data, args.data);
    set_some(&mut cfg.out, args.out);
    set(&mut cfg.compare.variants, args.variants);
    set(&mut cfg.compare.streams, args.streams);
    set(&mut cfg.compare.seeds, args.seeds);
    set(&mut cfg.compare.segments, args.segments);
    apply_hyper(&mut cfg, args.hyper);
    set(&mut cfg.train.workers, workers);
    cfg.compare.validate()?;
    let data = Dataset::load(cfg.data_dir()?)?;
    fit_model_to_data(&mut cfg, &data);
    cfg.model.validate()?;
    cfg.train.validate()?;
    let out = cfg.out_dir()?.to_path_buf();
    cfg.echo()?;
    let report = experiment::compare(&cfg.compare, &cfg.model, &cfg.train, &data.train, &data.test, |_, _, _, _| Ok(()))?;
    fs::write(out.join("compare.json"), report.to_json()?)?;
    fs::write(out.join("compare.txt"), report.to_text())?;
    print!("{}", report.to_text());
    Ok(())
}
