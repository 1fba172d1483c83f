//! Frame encoder, sequence unrolling, classifier head, loss and two-stream
//! fusion.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cells::{self, CellDims, CellState, ConvCellParams, VectorCellParams, VideoLstmParams};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::{self, param_block, ParamTree};
use crate::tensor::Tensor;

/// Lower bound applied to the target probability inside the loss.
pub const PROB_FLOOR: f64 = 1e-12;

/// Total spatial stride of the frame encoder (two 2×2 poolings).
pub const ENCODER_STRIDE: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Lstm,
    Alstm,
    ConvLstm,
    ConvAlstm,
    Videolstm,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::Lstm,
        Variant::Alstm,
        Variant::ConvLstm,
        Variant::ConvAlstm,
        Variant::Videolstm,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Lstm => "lstm",
            Variant::Alstm => "alstm",
            Variant::ConvLstm => "conv_lstm",
            Variant::ConvAlstm => "conv_alstm",
            Variant::Videolstm => "videolstm",
        }
    }

    pub fn has_attention(self) -> bool {
        matches!(self, Variant::Alstm | Variant::ConvAlstm | Variant::Videolstm)
    }

    pub fn is_convolutional(self) -> bool {
        matches!(self, Variant::ConvLstm | Variant::ConvAlstm | Variant::Videolstm)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Usage(format!("unknown variant {s:?}")))
    }
}

/// Input stream of the (top) recurrent layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stream {
    Rgb,
    Flow,
}

impl Stream {
    pub fn name(self) -> &'static str {
        match self {
            Stream::Rgb => "rgb",
            Stream::Flow => "flow",
        }
    }
}

impl fmt::Display for Stream {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Stream {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rgb" => Ok(Stream::Rgb),
            "flow" => Ok(Stream::Flow),
            _ => Err(Error::Usage(format!("unknown stream {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub variant: Variant,
    pub stream: Stream,
    /// Square frame extent `H = W`; must be divisible by the encoder stride.
    pub frame_size: usize,
    /// Channels of appearance frames.
    pub frame_channels: usize,
    /// Channels of the first encoder convolution.
    pub encoder_width: usize,
    /// Feature channels `D` per region.
    pub feature_channels: usize,
    /// Hidden channels `K`.
    pub hidden: usize,
    pub state_kernel: usize,
    pub attention_kernel: usize,
    pub num_classes: usize,
    pub head_width: usize,
    /// Probability of dropping a head unit during training.
    pub dropout_rate: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            variant: Variant::Videolstm,
            stream: Stream::Rgb,
            frame_size: 32,
            frame_channels: 1,
            encoder_width: 8,
            feature_channels: 8,
            hidden: 8,
            state_kernel: 3,
            attention_kernel: 1,
            num_classes: 6,
            head_width: 64,
            dropout_rate: 0.7,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("frame_size", self.frame_size),
            ("frame_channels", self.frame_channels),
            ("encoder_width", self.encoder_width),
            ("feature_channels", self.feature_channels),
            ("hidden", self.hidden),
            ("num_classes", self.num_classes),
            ("head_width", self.head_width),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if !self.frame_size.is_multiple_of(ENCODER_STRIDE) {
            return Err(Error::Config(format!(
                "frame size {} is not divisible by the encoder stride {ENCODER_STRIDE}",
                self.frame_size
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Config(format!("dropout rate {} outside [0, 1)", self.dropout_rate)));
        }
        for k in [self.state_kernel, self.attention_kernel] {
            if k % 2 == 0 {
                return Err(Error::Config(format!("kernel size {k} must be odd")));
            }
        }
        Ok(())
    }

    /// Regions per side of the feature map.
    pub fn grid(&self) -> usize {
        self.frame_size / ENCODER_STRIDE
    }

    pub fn input_channels(&self) -> usize {
        match self.stream {
            Stream::Rgb => self.frame_channels,
            Stream::Flow => 2,
        }
    }

    fn cell_dims(&self) -> CellDims {
        CellDims {
            input: self.feature_channels,
            hidden: self.hidden,
            state_kernel: self.state_kernel,
            attention_kernel: self.attention_kernel,
        }
    }

    fn head_inputs(&self) -> usize {
        if self.variant.is_convolutional() {
            self.grid() * self.grid() * self.hidden
        } else {
            self.hidden
        }
    }

    fn state_shape(&self) -> Vec<usize> {
        if self.variant.is_convolutional() {
            vec![self.grid(), self.grid(), self.hidden]
        } else {
            vec![self.hidden]
        }
    }
}

param_block! {
    /// Two 3×3 convolutions, each followed by ReLU and 2×2 max-pooling.
    pub struct EncoderParams { k1, b1, k2, b2 }
}

param_block! {
    /// Dense → tanh → dropout → dense classifier.
    pub struct HeadParams { w1, b1, w2, b2 }
}

impl EncoderParams {
    pub fn init(input: usize, width: usize, out: usize, rng: &mut ChaCha8Rng) -> Self {
        EncoderParams {
            k1: params::conv_kernel(3, input, width, rng),
            b1: Tensor::zeros([width]),
            k2: params::conv_kernel(3, width, out, rng),
            b2: Tensor::zeros([out]),
        }
    }
}

impl HeadParams {
    pub fn init(inputs: usize, width: usize, classes: usize, rng: &mut ChaCha8Rng) -> Self {
        HeadParams {
            w1: params::matrix(inputs, width, rng),
            b1: Tensor::zeros([width]),
            w2: params::matrix(width, classes, rng),
            b2: Tensor::zeros([classes]),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum CellParams<P = Tensor> {
    Vector(VectorCellParams<P>),
    Conv(ConvCellParams<P>),
    Video(VideoLstmParams<P>),
}

impl<P> ParamTree<P> for CellParams<P> {
    type Mapped<Q> = CellParams<Q>;

    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a P)) {
        match self {
            CellParams::Vector(p) => p.visit(prefix, f),
            CellParams::Conv(p) => p.visit(prefix, f),
            CellParams::Video(p) => p.visit(prefix, f),
        }
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut P)) {
        match self {
            CellParams::Vector(p) => p.visit_mut(prefix, f),
            CellParams::Conv(p) => p.visit_mut(prefix, f),
            CellParams::Video(p) => p.visit_mut(prefix, f),
        }
    }

    fn map<Q>(&self, f: &mut dyn FnMut(&P) -> Q) -> CellParams<Q> {
        match self {
            CellParams::Vector(p) => CellParams::Vector(p.map(f)),
            CellParams::Conv(p) => CellParams::Conv(p.map(f)),
            CellParams::Video(p) => CellParams::Video(p.map(f)),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<P = Tensor> {
    pub encoder: EncoderParams<P>,
    /// Flow encoder feeding the bottom motion layer.
    pub motion_encoder: Option<EncoderParams<P>>,
    pub cell: CellParams<P>,
    pub head: HeadParams<P>,
}

impl<P> ParamTree<P> for ModelParams<P> {
    type Mapped<Q> = ModelParams<Q>;

    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a P)) {
        self.encoder.visit(&format!("{prefix}encoder."), f);
        self.motion_encoder.visit(&format!("{prefix}motion_encoder."), f);
        self.cell.visit(&format!("{prefix}cell."), f);
        self.head.visit(&format!("{prefix}head."), f);
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut P)) {
        self.encoder.visit_mut(&format!("{prefix}encoder."), f);
        self.motion_encoder.visit_mut(&format!("{prefix}motion_encoder."), f);
        self.cell.visit_mut(&format!("{prefix}cell."), f);
        self.head.visit_mut(&format!("{prefix}head."), f);
    }

    fn map<Q>(&self, f: &mut dyn FnMut(&P) -> Q) -> ModelParams<Q> {
        ModelParams {
            encoder: self.encoder.map(f),
            motion_encoder: ParamTree::map(&self.motion_encoder, f),
            cell: self.cell.map(f),
            head: self.head.map(f),
        }
    }
}

impl ModelParams {
    pub fn init(config: &ModelConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        config.validate()?;
        let d = config.feature_channels;
        let encoder = EncoderParams::init(config.input_channels(), config.encoder_width, d, rng);
        let dims = config.cell_dims();
        let (motion_encoder, cell) = match config.variant {
            Variant::Lstm | Variant::Alstm => {
                let input = if config.variant == Variant::Lstm {
                    config.grid() * config.grid() * d
                } else {
                    d
                };
                let dims = CellDims { input, ..dims };
                let cell = VectorCellParams::init(dims, config.variant == Variant::Alstm, rng)?;
                (None, CellParams::Vector(cell))
            }
            Variant::ConvLstm | Variant::ConvAlstm => {
                let cell = ConvCellParams::init(dims, config.variant == Variant::ConvAlstm, rng)?;
                (None, CellParams::Conv(cell))
            }
            Variant::Videolstm => {
                let motion = EncoderParams::init(2, config.encoder_width, d, rng);
                (Some(motion), CellParams::Video(VideoLstmParams::init(dims, d, rng)?))
            }
        };
        let head = HeadParams::init(config.head_inputs(), config.head_width, config.num_classes, rng);
        Ok(ModelParams {
            encoder,
            motion_encoder,
            cell,
            head,
        })
    }
}

/// Encodes one `H×W×C` frame into an `N×N×D` feature map.
pub fn encode_frame(g: &mut Graph, frame: Var, p: &EncoderParams<Var>) -> Result<Var> {
    let shape = g.value(frame).shape().to_vec();
    if shape.len() != 3 || !shape[0].is_multiple_of(ENCODER_STRIDE) || !shape[1].is_multiple_of(ENCODER_STRIDE) {
        return Err(Error::Config(format!(
            "frame {shape:?} is not divisible by the encoder stride {ENCODER_STRIDE}"
        )));
    }
    let x = g.conv2d(frame, p.k1, Some(p.b1))?;
    let x = g.relu(x);
    let x = g.max_pool2(x)?;
    let x = g.conv2d(x, p.k2, Some(p.b2))?;
    let x = g.relu(x);
    g.max_pool2(x)
}

/// Per-frame class scores and probabilities.
#[derive(Clone, Copy, Debug)]
pub struct FrameOutput {
    pub scores: Var,
    pub probs: Var,
}

/// Classifier head on a hidden state. `dropout_mask` (already scaled by the
/// inverse keep probability) is applied only when given.
pub fn classify_hidden(g: &mut Graph, h: Var, p: &HeadParams<Var>, dropout_mask: Option<Var>) -> Result<FrameOutput> {
    let flat = g.flatten(h);
    let hidden = g.dense(flat, p.w1, Some(p.b1))?;
    let mut hidden = g.tanh(hidden);
    if let Some(mask) = dropout_mask {
        hidden = g.mul(hidden, mask)?;
    }
    let scores = g.dense(hidden, p.w2, Some(p.b2))?;
    let probs = g.softmax(scores);
    Ok(FrameOutput { scores, probs })
}

/// Inverted-dropout mask: each unit is kept with probability `1 − rate` and
/// scaled by `1 / (1 − rate)`.
pub fn dropout_mask(width: usize, rate: f64, rng: &mut impl Rng) -> Tensor {
    let keep = 1.0 - rate;
    Tensor::from_fn([width], |_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
}

/// Result of unrolling a model over a sequence inside a graph.
#[derive(Clone, Debug)]
pub struct SequenceOutput {
    pub frames: Vec<FrameOutput>,
    /// One `N×N` map per frame for attention variants, empty otherwise.
    pub attention: Vec<Var>,
    /// Top-layer hidden state after each frame.
    pub hidden: Vec<Var>,
}

/// Unrolls the configured variant over `inputs` (stream frames) and, for
/// the motion-attention variant, `motion` (flow images) from zero states.
pub fn forward_sequence(
    g: &mut Graph,
    config: &ModelConfig,
    p: &ModelParams<Var>,
    inputs: &[Tensor],
    motion: Option<&[Tensor]>,
    mut dropout: Option<&mut ChaCha8Rng>,
) -> Result<SequenceOutput> {
    if inputs.is_empty() {
        return Err(Error::Usage("cannot unroll over an empty sequence".into()));
    }
    let motion = match (config.variant, motion) {
        (Variant::Videolstm, Some(m)) if m.len() == inputs.len() => Some(m),
        (Variant::Videolstm, Some(m)) => {
            return Err(Error::Usage(format!(
                "{} frames but {} flow frames",
                inputs.len(),
                m.len()
            )))
        }
        (Variant::Videolstm, None) => {
            return Err(Error::Usage("motion attention needs flow frames".into()))
        }
        _ => None,
    };
    let shape = config.state_shape();
    let mut state = CellState::zeros(g, &shape);
    let mut bottom = CellState::zeros(g, &shape);
    let mut out = SequenceOutput {
        frames: Vec::with_capacity(inputs.len()),
        attention: Vec::new(),
        hidden: Vec::with_capacity(inputs.len()),
    };
    for (t, frame) in inputs.iter().enumerate() {
        let x = g.constant(frame.clone());
        let x = encode_frame(g, x, &p.encoder)?;
        state = match &p.cell {
            CellParams::Vector(cell) if cell.attention.is_some() => {
                let (next, att) = cells::alstm_step(g, x, &state, cell)?;
                out.attention.push(att.map);
                next
            }
            CellParams::Vector(cell) => {
                let flat = g.flatten(x);
                cells::lstm_step(g, flat, &state, &cell.gates)?
            }
            CellParams::Conv(cell) if cell.attention.is_some() => {
                let (next, att) = cells::conv_alstm_step(g, x, &state, cell)?;
                out.attention.push(att.map);
                next
            }
            CellParams::Conv(cell) => cells::conv_lstm_step(g, x, &state, &cell.gates)?,
            CellParams::Video(cell) => {
                let flow = motion.expect("checked above");
                let enc = p
                    .motion_encoder
                    .as_ref()
                    .ok_or_else(|| Error::Config("motion attention needs a flow encoder".into()))?;
                let m = g.constant(flow[t].clone());
                let m = encode_frame(g, m, enc)?;
                let step = cells::videolstm_step(g, x, m, &state, &bottom, cell)?;
                bottom = step.bottom;
                out.attention.push(step.attention.map);
                step.top
            }
        };
        let mask = match dropout.as_deref_mut() {
            Some(rng) if config.dropout_rate > 0.0 => {
                Some(g.constant(dropout_mask(config.head_width, config.dropout_rate, rng)))
            }
            _ => None,
        };
        out.frames.push(classify_hidden(g, state.h, &p.head, mask)?);
        out.hidden.push(state.h);
    }
    Ok(out)
}

/// Normalized temporal sum of frame probabilities, inside the graph.
pub fn video_probability(g: &mut Graph, frames: &[FrameOutput]) -> Result<Var> {
    let (first, rest) = frames
        .split_first()
        .ok_or_else(|| Error::Usage("no frame predictions".into()))?;
    let mut total = first.probs;
    for f in rest {
        total = g.add(total, f.probs)?;
    }
    Ok(g.scale(total, 1.0 / frames.len() as f64))
}

/// Video-level distribution: per-frame probabilities summed over time and
/// renormalized.
pub fn video_prediction(frame_probs: &[Tensor]) -> Result<Tensor> {
    let (first, rest) = frame_probs
        .split_first()
        .ok_or_else(|| Error::Usage("no frame predictions".into()))?;
    let mut total = first.clone();
    for p in rest {
        p.expect_same_shape(first, "video_prediction")?;
        total.add_assign(p);
    }
    let s = total.sum();
    total.scale_assign(1.0 / s);
    Ok(total)
}

/// `−ln p(label)` with `p` floored at [`PROB_FLOOR`].
pub fn cross_entropy_loss(video_prob: &Tensor, label: usize) -> Result<f64> {
    let p = video_prob
        .data()
        .get(label)
        .ok_or_else(|| Error::Usage(format!("label {label} out of range for {} classes", video_prob.len())))?;
    Ok(-p.max(PROB_FLOOR).ln())
}

/// Product fusion of two class distributions, renormalized.
pub fn fuse_streams(p_rgb: &Tensor, p_flow: &Tensor) -> Result<Tensor> {
    let mut fused = p_rgb.zip_map(p_flow, "fuse_streams", |a, b| a * b)?;
    let s = fused.sum();
    if !(s > 0.0) {
        return Err(Error::DegenerateFusion);
    }
    fused.scale_assign(1.0 / s);
    Ok(fused)
}

/// Inference output for one sequence.
#[derive(Clone, Debug)]
pub struct Prediction {
    pub frame_probs: Vec<Tensor>,
    pub attention: Vec<Tensor>,
}

impl Prediction {
    pub fn video(&self) -> Tensor {
        video_prediction(&self.frame_probs).expect("nonempty sequence")
    }
}

/// Loss, video distribution and parameter gradients for one training
/// sequence.
#[derive(Clone, Debug)]
pub struct SequenceGrad {
    pub loss: f64,
    pub video_prob: Tensor,
    pub grads: ModelParams<Tensor>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ModelParams,
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = ModelParams::init(&config, &mut rng)?;
        Ok(Model { config, params })
    }

    pub fn num_parameters(&self) -> usize {
        params::count(&self.params)
    }

    /// Dropout disabled; a pure function of the inputs and parameters.
    pub fn predict(&self, inputs: &[Tensor], motion: Option<&[Tensor]>) -> Result<Prediction> {
        let mut g = Graph::new();
        let bound = params::bind(&self.params, &mut g);
        let out = forward_sequence(&mut g, &self.config, &bound, inputs, motion, None)?;
        Ok(Prediction {
            frame_probs: out.frames.iter().map(|f| g.value(f.probs).clone()).collect(),
            attention: out.attention.iter().map(|&a| g.value(a).clone()).collect(),
        })
    }

    /// Forward and backward pass on one sequence. `dropout` supplies the mask
    /// randomness; `None` trains without dropout.
    pub fn loss_and_grads(
        &self,
        inputs: &[Tensor],
        motion: Option<&[Tensor]>,
        label: usize,
        dropout: Option<&mut ChaCha8Rng>,
    ) -> Result<SequenceGrad> {
        if label >= self.config.num_classes {
            return Err(Error::Usage(format!(
                "label {label} out of range for {} classes",
                self.config.num_classes
            )));
        }
        let mut g = Graph::new();
        let bound = params::bind(&self.params, &mut g);
        let out = forward_sequence(&mut g, &self.config, &bound, inputs, motion, dropout)?;
        let video = video_probability(&mut g, &out.frames)?;
        let loss = g.neg_log_at(video, label, PROB_FLOOR)?;
        let grads = g.backward(loss)?;
        Ok(SequenceGrad {
            loss: g.value(loss).data()[0],
            video_prob: g.value(video).clone(),
            grads: params::collect_grads(&bound, &g, &grads),
        })
    }
}
