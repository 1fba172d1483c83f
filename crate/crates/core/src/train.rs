//! RMSProp training with deterministic batch-parallel gradients, snippet
//! sampling and the multi-segment test protocol.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::VideoClip;
use crate::error::{Error, Result};
use crate::model::{video_prediction, Model, ModelParams, Variant};
use crate::params::{self, ParamTree};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub decay: f64,
    pub epsilon: f64,
    pub batch_size: usize,
    pub snippet_length: usize,
    pub max_epochs: usize,
    /// Global gradient-norm limit; `None` disables clipping.
    pub grad_clip_norm: Option<f64>,
    pub seed: u64,
    /// Worker threads for gradient computation; 0 uses every core.
    /// Results do not depend on this value.
    pub workers: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.001,
            decay: 0.9,
            epsilon: 1e-8,
            batch_size: 16,
            snippet_length: 16,
            max_epochs: 30,
            grad_clip_norm: Some(5.0),
            seed: 0,
            workers: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning rate {} must be finite and nonnegative", self.learning_rate)));
        }
        if !(self.decay > 0.0 && self.decay < 1.0) {
            return Err(Error::Config(format!("decay {} outside (0, 1)", self.decay)));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::Config(format!("epsilon {} must be positive", self.epsilon)));
        }
        if self.batch_size == 0 || self.snippet_length == 0 {
            return Err(Error::Config("batch size and snippet length must be positive".into()));
        }
        if let Some(c) = self.grad_clip_norm {
            if !(c > 0.0) {
                return Err(Error::Config(format!("gradient clip norm {c} must be positive")));
            }
        }
        Ok(())
    }
}

/// Running mean-square accumulators, one per parameter tensor.
pub type OptimizerState = ModelParams<Tensor>;

pub fn zero_state(params: &ModelParams) -> OptimizerState {
    params.map(&mut |t| Tensor::zeros(t.shape()))
}

/// One RMSProp step on a single tensor.
pub fn rmsprop_update(param: &mut Tensor, grad: &Tensor, cache: &mut Tensor, cfg: &TrainConfig) -> Result<()> {
    param.expect_same_shape(grad, "rmsprop_update")?;
    param.expect_same_shape(cache, "rmsprop_update")?;
    if !grad.is_finite() {
        return Err(Error::Divergence {
            iteration: 0,
            detail: "non-finite gradient".into(),
        });
    }
    let (lr, decay, eps) = (cfg.learning_rate, cfg.decay, cfg.epsilon);
    for ((p, &g), c) in param.data_mut().iter_mut().zip(grad.data()).zip(cache.data_mut()) {
        *c = decay * *c + (1.0 - decay) * g * g;
        *p -= lr * g / (c.sqrt() + eps);
    }
    Ok(())
}

/// Rescales every gradient by `max_norm / ‖g‖` when the global norm exceeds
/// `max_norm`. Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut ModelParams<Tensor>, max_norm: f64) -> f64 {
    let norm = params::flatten(grads).iter().map(|(_, g)| g.squared_norm()).sum::<f64>().sqrt();
    if norm > max_norm {
        let factor = max_norm / norm;
        grads.visit_mut("", &mut |_, g| g.scale_assign(factor));
    }
    norm
}

/// Contiguous window with a uniformly random start; clips shorter than
/// `length` are padded by repeating the final frame (with zero flow, since
/// a repeated frame does not move).
pub fn sample_snippet(clip: &VideoClip, length: usize, rng: &mut impl Rng) -> Result<VideoClip> {
    if clip.is_empty() {
        return Err(Error::Usage("cannot sample a snippet from an empty clip".into()));
    }
    if length == 0 {
        return Err(Error::Usage("snippet length must be positive".into()));
    }
    if clip.len() >= length {
        let start = rng.random_range(0..=clip.len() - length);
        return Ok(clip.window(start, length));
    }
    let mut out = clip.clone();
    let last = clip.len() - 1;
    while out.len() < length {
        out.frames.push(clip.frames[last].clone());
        out.flow.push(Tensor::zeros(clip.flow[last].shape()));
        out.gt_boxes.push(clip.gt_boxes[last]);
    }
    Ok(out)
}

/// Network inputs for a clip: the configured stream plus flow frames for
/// the motion-attention variant.
pub fn clip_inputs(model: &Model, clip: &VideoClip) -> (Vec<Tensor>, Option<Vec<Tensor>>) {
    let inputs = clip.stream_inputs(model.config.stream);
    let motion = (model.config.variant == Variant::Videolstm).then(|| clip.flow_inputs());
    (inputs, motion)
}

/// Per-iteration record of the loss trace.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub iteration: usize,
    pub loss: f64,
    pub train_acc: f64,
}

/// Resumable training state.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub model: Model,
    pub optimizer: OptimizerState,
    pub config: TrainConfig,
    /// Completed iterations.
    pub iteration: usize,
}

fn thread_pool(workers: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::Config(format!("cannot start {workers} workers: {e}")))
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

const EPOCH_STREAM: u64 = 1 << 40;
const ITERATION_STREAM: u64 = 2 << 40;

impl Trainer {
    pub fn new(model: Model, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let optimizer = zero_state(&model.params);
        Ok(Trainer {
            model,
            optimizer,
            config,
            iteration: 0,
        })
    }

    pub fn iterations_per_epoch(&self, clips: usize) -> usize {
        clips.div_ceil(self.config.batch_size)
    }

    /// Clip indices of batch `iteration`: consecutive slices of a per-epoch
    /// permutation.
    fn batch(&self, clips: usize, iteration: usize) -> Vec<usize> {
        let per_epoch = self.iterations_per_epoch(clips);
        let (epoch, pos) = (iteration / per_epoch, iteration % per_epoch);
        let mut order: Vec<usize> = (0..clips).collect();
        order.shuffle(&mut stream_rng(self.config.seed, EPOCH_STREAM + epoch as u64));
        let start = pos * self.config.batch_size;
        order[start..(start + self.config.batch_size).min(clips)].to_vec()
    }

    /// Runs until `max_epochs` worth of iterations have completed, calling
    /// `on_step` after each. On divergence the parameters stay at their last
    /// finite values.
    pub fn train(&mut self, clips: &[VideoClip], mut on_step: impl FnMut(&Trainer, &TraceRow) -> Result<()>) -> Result<Vec<TraceRow>> {
        if clips.is_empty() {
            return Err(Error::Usage("training set is empty".into()));
        }
        let pool = thread_pool(self.config.workers)?;
        let total = self.config.max_epochs * self.iterations_per_epoch(clips.len());
        let mut trace = Vec::new();
        while self.iteration < total {
            let row = pool.install(|| self.step(clips))?;
            on_step(self, &row)?;
            trace.push(row);
        }
        Ok(trace)
    }

    /// One optimizer step on the next batch.
    pub fn step(&mut self, clips: &[VideoClip]) -> Result<TraceRow> {
        let iteration = self.iteration;
        let batch = self.batch(clips.len(), iteration);
        let mut rng = stream_rng(self.config.seed, ITERATION_STREAM + iteration as u64);
        let seeds: Vec<u64> = batch.iter().map(|_| rng.random()).collect();
        let model = &self.model;
        let length = self.config.snippet_length;
        let results = batch
            .par_iter()
            .zip(seeds.par_iter())
            .map(|(&i, &seed)| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let snippet = sample_snippet(&clips[i], length, &mut rng)?;
                let (inputs, motion) = clip_inputs(model, &snippet);
                model.loss_and_grads(&inputs, motion.as_deref(), snippet.label, Some(&mut rng))
            })
            .collect::<Result<Vec<_>>>()?;

        let mut grads = zero_state(&self.model.params);
        let (mut loss, mut correct) = (0.0, 0);
        for (r, &i) in results.iter().zip(&batch) {
            loss += r.loss;
            correct += usize::from(r.video_prob.argmax() == clips[i].label);
            let mut sources = params::flatten(&r.grads).into_iter();
            grads.visit_mut("", &mut |_, g| g.add_assign(sources.next().expect("same layout").1));
        }
        let n = batch.len() as f64;
        loss /= n;
        grads.visit_mut("", &mut |_, g| g.scale_assign(1.0 / n));

        let diverged = |detail: String| Error::Divergence { iteration, detail };
        if !loss.is_finite() {
            return Err(diverged(format!("loss is {loss}")));
        }
        if let Some((name, _)) = params::flatten(&grads).into_iter().find(|(_, g)| !g.is_finite()) {
            return Err(diverged(format!("non-finite gradient for {name}")));
        }
        if let Some(max) = self.config.grad_clip_norm {
            clip_global_norm(&mut grads, max);
        }
        let before = (self.model.params.clone(), self.optimizer.clone());
        let grads = params::flatten(&grads);
        let caches = params::flatten_mut(&mut self.optimizer);
        let weights = params::flatten_mut(&mut self.model.params);
        for ((grad, cache), weight) in grads.into_iter().zip(caches).zip(weights) {
            rmsprop_update(weight.1, grad.1, cache.1, &self.config).map_err(|_| diverged(format!("update of {}", weight.0)))?;
        }
        if let Some((name, _)) = params::flatten(&self.model.params).into_iter().find(|(_, p)| !p.is_finite()) {
            let name = name.clone();
            (self.model.params, self.optimizer) = before;
            return Err(diverged(format!("update made {name} non-finite")));
        }
        self.iteration += 1;
        Ok(TraceRow {
            iteration,
            loss,
            train_acc: correct as f64 / n,
        })
    }
}

/// Segment starts: `segments` equally spaced windows of `min(length, T)`
/// frames, with repeated starts merged and weighted by multiplicity.
pub fn segment_starts(frames: usize, segments: usize, length: usize) -> Vec<(usize, usize)> {
    let len = length.min(frames);
    let span = frames - len;
    let mut out: Vec<(usize, usize)> = Vec::new();
    for i in 0..segments.max(1) {
        let start = if segments > 1 {
            (i as f64 * span as f64 / (segments - 1) as f64).round() as usize
        } else {
            0
        };
        match out.last_mut() {
            Some((s, count)) if *s == start => *count += 1,
            _ => out.push((start, 1)),
        }
    }
    out
}

/// Video distribution averaged over equally spaced segments.
pub fn test_protocol(clip: &VideoClip, model: &Model, segments: usize, length: usize) -> Result<Tensor> {
    if clip.is_empty() {
        return Err(Error::Usage("cannot evaluate an empty clip".into()));
    }
    let len = length.min(clip.len()).max(1);
    let mut total: Option<Tensor> = None;
    let mut weight = 0usize;
    for (start, count) in segment_starts(clip.len(), segments, len) {
        let window = clip.window(start, len);
        let (inputs, motion) = clip_inputs(model, &window);
        let mut p = video_prediction(&model.predict(&inputs, motion.as_deref())?.frame_probs)?;
        p.scale_assign(count as f64);
        weight += count;
        match &mut total {
            Some(t) => t.add_assign(&p),
            None => total = Some(p),
        }
    }
    let mut total = total.expect("at least one segment");
    total.scale_assign(1.0 / weight as f64);
    Ok(total)
}

/// Test-protocol distributions for many clips, computed in parallel and
/// returned in input order.
pub fn predict_clips(model: &Model, clips: &[VideoClip], segments: usize, length: usize, workers: usize) -> Result<Vec<Tensor>> {
    thread_pool(workers)?.install(|| {
        clips
            .par_iter()
            .map(|c| test_protocol(c, model, segments, length))
            .collect()
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_only_decays_cache() {
        let cfg = TrainConfig::default();
        let mut p = Tensor::full([3], 0.7);
        let mut cache = Tensor::full([3], 2.0);
        rmsprop_update(&mut p, &Tensor::zeros([3]), &mut cache, &cfg).unwrap();
        assert_eq!(p.data(), &[0.7; 3]);
        assert!(cache.data().iter().all(|&c| (c - 1.8).abs() < 1e-15));
    }

    #[test]
    fn first_step_magnitude() {
        let cfg = TrainConfig::default();
        for g in [0.01, 1.0, -250.0] {
            let mut p = Tensor::zeros([1]);
            let mut cache = Tensor::zeros([1]);
            rmsprop_update(&mut p, &Tensor::full([1], g), &mut cache, &cfg).unwrap();
            assert!((cache.data()[0] - 0.1 * g * g).abs() < 1e-12 * g * g);
            let expected = 0.001 / 0.1f64.sqrt();
            assert!((p.data()[0].abs() - expected).abs() < 1e-8, "{}", p.data()[0]);
        }
    }

    #[test]
    fn non_finite_gradient_diverges() {
        let cfg = TrainConfig::default();
        let mut p = Tensor::zeros([2]);
        let mut cache = Tensor::zeros([2]);
        let g = Tensor::new([2], vec![1.0, f64::NAN]).unwrap();
        assert!(matches!(rmsprop_update(&mut p, &g, &mut cache, &cfg), Err(Error::Divergence { .. })));
    }

    #[test]
    fn segment_layout() {
        assert_eq!(segment_starts(30, 25, 30), vec![(0, 25)]);
        assert_eq!(segment_starts(16, 25, 30), vec![(0, 25)]);
        let s = segment_starts(40, 3, 30);
        assert_eq!(s, vec![(0, 1), (5, 1), (10, 1)]);
        assert_eq!(segment_starts(20, 1, 8), vec![(0, 1)]);
        let total: usize = segment_starts(31, 25, 30).iter().map(|s| s.1).sum();
        assert_eq!(total, 25);
    }

    #[test]
    fn validation() {
        assert!(TrainConfig { learning_rate: 0.0, ..TrainConfig::default() }.validate().is_ok());
        assert!(TrainConfig { learning_rate: -1.0, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { decay: 1.0, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { snippet_length: 0, ..TrainConfig::default() }.validate().is_err());
    }
}
