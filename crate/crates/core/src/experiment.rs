//! Architecture comparison: train and test every requested variant on every
//! requested stream over a list of seeds.

use serde::{Deserialize, Serialize};

use crate::data::VideoClip;
use crate::error::{Error, Result};
use crate::eval::accuracy;
use crate::model::{Model, ModelConfig, Stream, Variant};
use crate::tensor::Tensor;
use crate::train::{predict_clips, TrainConfig, Trainer};

/// A trained model with its test-protocol distributions.
#[derive(Clone, Debug)]
pub struct TrainedRun {
    pub model: Model,
    pub test_probs: Vec<Tensor>,
    pub accuracy: f64,
    pub final_loss: f64,
}

/// Trains one model from `seed` and scores it on `test`.
pub fn train_and_test(
    model: &ModelConfig,
    train: &TrainConfig,
    seed: u64,
    train_clips: &[VideoClip],
    test_clips: &[VideoClip],
    segments: usize,
) -> Result<TrainedRun> {
    let config = TrainConfig { seed, ..train.clone() };
    let mut trainer = Trainer::new(Model::new(model.clone(), seed)?, config)?;
    let trace = trainer.train(train_clips, |_, _| Ok(()))?;
    let test_probs = predict_clips(&trainer.model, test_clips, segments, train.snippet_length, train.workers)?;
    let labels: Vec<usize> = test_clips.iter().map(|c| c.label).collect();
    Ok(TrainedRun {
        accuracy: accuracy(&test_probs, &labels)?,
        final_loss: trace.last().map_or(f64::NAN, |r| r.loss),
        model: trainer.model,
        test_probs,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CompareConfig {
    pub variants: Vec<Variant>,
    pub streams: Vec<Stream>,
    pub seeds: Vec<u64>,
    pub segments: usize,
}

impl Default for CompareConfig {
    fn default() -> Self {
        CompareConfig {
            variants: Variant::ALL.to_vec(),
            streams: vec![Stream::Rgb, Stream::Flow],
            seeds: vec![0],
            segments: 25,
        }
    }
}

impl CompareConfig {
    pub fn validate(&self) -> Result<()> {
        if self.variants.is_empty() || self.streams.is_empty() || self.seeds.is_empty() {
            return Err(Error::Config("compare needs at least one variant, stream and seed".into()));
        }
        if self.segments == 0 {
            return Err(Error::Config("segments must be positive".into()));
        }
        Ok(())
    }
}

/// Accuracy of one variant on one stream.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompareCell {
    pub variant: Variant,
    pub stream: Stream,
    /// One accuracy per seed, in seed order.
    pub accuracies: Vec<f64>,
    pub mean: f64,
}

/// Accuracy grid with one row per stream and one column per variant.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompareReport {
    pub variants: Vec<Variant>,
    pub streams: Vec<Stream>,
    pub seeds: Vec<u64>,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub cells: Vec<CompareCell>,
}

impl CompareReport {
    pub fn cell(&self, variant: Variant, stream: Stream) -> Option<&CompareCell> {
        self.cells.iter().find(|c| c.variant == variant && c.stream == stream)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    /// Mean accuracies as an aligned table.
    pub fn to_text(&self) -> String {
        let mut out = format!("{:<8}", "stream");
        for v in &self.variants {
            out.push_str(&format!(" {:>11}", v.name()));
        }
        out.push('\n');
        for s in &self.streams {
            out.push_str(&format!("{:<8}", s.name()));
            for v in &self.variants {
                let mean = self.cell(*v, *s).map_or(f64::NAN, |c| c.mean);
                out.push_str(&format!(" {:>11.4}", mean));
            }
            out.push('\n');
        }
        out
    }
}

/// Runs the full grid. `on_run` sees every trained model, e.g. to keep it.
pub fn compare(
    cfg: &CompareConfig,
    model: &ModelConfig,
    train: &TrainConfig,
    train_clips: &[VideoClip],
    test_clips: &[VideoClip],
    mut on_run: impl FnMut(Variant, Stream, u64, &TrainedRun) -> Result<()>,
) -> Result<CompareReport> {
    cfg.validate()?;
    let mut cells = Vec::new();
    for &stream in &cfg.streams {
        for &variant in &cfg.variants {
            let model_cfg = ModelConfig {
                variant,
                stream,
                ..model.clone()
            };
            model_cfg.validate()?;
            let mut accuracies = Vec::with_capacity(cfg.seeds.len());
            for &seed in &cfg.seeds {
                let run = train_and_test(&model_cfg, train, seed, train_clips, test_clips, cfg.segments)?;
                log::info!("{variant} {stream} seed {seed}: accuracy {:.4}", run.accuracy);
                on_run(variant, stream, seed, &run)?;
                accuracies.push(run.accuracy);
            }
            let mean = accuracies.iter().sum::<f64>() / accuracies.len() as f64;
            cells.push(CompareCell {
                variant,
                stream,
                accuracies,
                mean,
            });
        }
    }
    Ok(CompareReport {
        variants: cfg.variants.clone(),
        streams: cfg.streams.clone(),
        seeds: cfg.seeds.clone(),
        model: model.clone(),
        train: train.clone(),
        cells,
    })
}
