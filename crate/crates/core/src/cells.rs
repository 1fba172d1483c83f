//! One-timestep transitions for the recurrent cell family and the attention
//! mechanisms they use.
//!
//! Gate pre-activations are computed from a single fused parameter block
//! whose last axis is laid out as `[input, forget, output, candidate]`, each
//! `K` wide. Vector cells use dense products; convolutional cells use
//! same-padded convolutions and keep the `N×N×K` layout for every state.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::{self, param_block, ParamTree};
use crate::tensor::Tensor;

/// Hidden and memory state of one layer. Both share a shape: `K` for vector
/// cells, `N×N×K` for convolutional cells.
#[derive(Clone, Debug, PartialEq)]
pub struct CellState<P = Tensor> {
    pub h: P,
    pub c: P,
}

impl CellState<Var> {
    /// All-zero initial state.
    pub fn zeros(graph: &mut Graph, shape: &[usize]) -> Self {
        CellState {
            h: graph.constant(Tensor::zeros(shape)),
            c: graph.constant(Tensor::zeros(shape)),
        }
    }

    pub fn value(&self, graph: &Graph) -> CellState<Tensor> {
        CellState {
            h: graph.value(self.h).clone(),
            c: graph.value(self.c).clone(),
        }
    }
}

/// A normalized `N×N` attention map together with the pre-softmax scores it
/// was computed from.
#[derive(Clone, Copy, Debug)]
pub struct Attention {
    pub map: Var,
    pub scores: Var,
}

param_block! {
    /// Fused gates of a fully connected LSTM.
    pub struct LstmGates {
        /// `D×4K`
        w_x,
        /// `K×4K`
        w_h,
        /// `4K`
        bias,
    }
}

param_block! {
    /// One-hidden-layer perceptron producing region scores for the vector
    /// attention LSTM. The input projection is stored as a `1×1×D×K` kernel
    /// so it applies to every region of a map at once.
    pub struct MlpAttention { w_xa, w_ha, b_a, w_z }
}

param_block! {
    /// Fused convolutional gates: `k×k×C×4K` input-to-state and `k×k×K×4K`
    /// state-to-state kernels.
    pub struct ConvGates { w_x, w_h, bias }
}

param_block! {
    /// Convolutional attention scorer: `W_xa` (`a×a×C×K`), `W_ha` (`a×a×K×K`),
    /// bias `b_a` (`K`) and the `1×1×K×1` output kernel `W_z`.
    pub struct ConvAttention { w_xa, w_ha, b_a, w_z }
}

param_block! {
    /// Bottom motion layer: like [`ConvGates`] plus the top-to-bottom kernel
    /// `w_e` (`k×k×K×4K`) applied to the previous top hidden state.
    pub struct MotionLayerParams { w_x, w_h, w_e, bias }
}

#[derive(Clone, Debug, PartialEq)]
pub struct VectorCellParams<P = Tensor> {
    pub gates: LstmGates<P>,
    pub attention: Option<MlpAttention<P>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvCellParams<P = Tensor> {
    pub gates: ConvGates<P>,
    pub attention: Option<ConvAttention<P>>,
}

/// Two-layer motion-attention network: a convolutional attention LSTM on
/// top whose attention is conditioned on the bottom motion layer.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoLstmParams<P = Tensor> {
    pub top: ConvCellParams<P>,
    pub bottom: MotionLayerParams<P>,
}

impl<P> ParamTree<P> for VectorCellParams<P> {
    type Mapped<Q> = VectorCellParams<Q>;

    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a P)) {
        self.gates.visit(&format!("{prefix}gates."), f);
        self.attention.visit(&format!("{prefix}attention."), f);
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut P)) {
        self.gates.visit_mut(&format!("{prefix}gates."), f);
        self.attention.visit_mut(&format!("{prefix}attention."), f);
    }

    fn map<Q>(&self, f: &mut dyn FnMut(&P) -> Q) -> VectorCellParams<Q> {
        VectorCellParams {
            gates: self.gates.map(f),
            attention: ParamTree::map(&self.attention, f),
        }
    }
}

impl<P> ParamTree<P> for ConvCellParams<P> {
    type Mapped<Q> = ConvCellParams<Q>;

    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a P)) {
        self.gates.visit(&format!("{prefix}gates."), f);
        self.attention.visit(&format!("{prefix}attention."), f);
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut P)) {
        self.gates.visit_mut(&format!("{prefix}gates."), f);
        self.attention.visit_mut(&format!("{prefix}attention."), f);
    }

    fn map<Q>(&self, f: &mut dyn FnMut(&P) -> Q) -> ConvCellParams<Q> {
        ConvCellParams {
            gates: self.gates.map(f),
            attention: ParamTree::map(&self.attention, f),
        }
    }
}

impl<P> ParamTree<P> for VideoLstmParams<P> {
    type Mapped<Q> = VideoLstmParams<Q>;

    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a P)) {
        self.top.visit(&format!("{prefix}top."), f);
        self.bottom.visit(&format!("{prefix}bottom."), f);
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut P)) {
        self.top.visit_mut(&format!("{prefix}top."), f);
        self.bottom.visit_mut(&format!("{prefix}bottom."), f);
    }

    fn map<Q>(&self, f: &mut dyn FnMut(&P) -> Q) -> VideoLstmParams<Q> {
        VideoLstmParams {
            top: self.top.map(f),
            bottom: self.bottom.map(f),
        }
    }
}

/// Extents shared by the cell constructors.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CellDims {
    /// Input channels (`D`, or `C` for flow/appearance maps).
    pub input: usize,
    /// Hidden channels `K`.
    pub hidden: usize,
    /// Odd size of input-to-state and state-to-state kernels.
    pub state_kernel: usize,
    /// Odd size of `W_xa` and `W_ha`.
    pub attention_kernel: usize,
}

impl CellDims {
    fn validate(&self) -> Result<()> {
        if self.input == 0 || self.hidden == 0 {
            return Err(Error::Config("cell extents must be positive".into()));
        }
        for k in [self.state_kernel, self.attention_kernel] {
            if k % 2 == 0 {
                return Err(Error::Config(format!("kernel size {k} must be odd")));
            }
        }
        Ok(())
    }
}

impl LstmGates {
    pub fn init(input: usize, hidden: usize, rng: &mut ChaCha8Rng) -> Self {
        LstmGates {
            w_x: params::matrix(input, 4 * hidden, rng),
            w_h: params::matrix(hidden, 4 * hidden, rng),
            bias: params::gate_bias(hidden),
        }
    }
}

impl MlpAttention {
    pub fn init(input: usize, hidden: usize, rng: &mut ChaCha8Rng) -> Self {
        MlpAttention {
            w_xa: params::conv_kernel(1, input, hidden, rng),
            w_ha: params::matrix(hidden, hidden, rng),
            b_a: Tensor::zeros([hidden]),
            w_z: params::conv_kernel(1, hidden, 1, rng),
        }
    }
}

impl VectorCellParams {
    pub fn init(dims: CellDims, with_attention: bool, rng: &mut ChaCha8Rng) -> Result<Self> {
        dims.validate()?;
        Ok(VectorCellParams {
            gates: LstmGates::init(dims.input, dims.hidden, rng),
            attention: with_attention.then(|| MlpAttention::init(dims.input, dims.hidden, rng)),
        })
    }
}

impl ConvGates {
    pub fn init(dims: CellDims, rng: &mut ChaCha8Rng) -> Self {
        let (k, c, h) = (dims.state_kernel, dims.input, dims.hidden);
        ConvGates {
            w_x: params::conv_kernel(k, c, 4 * h, rng),
            w_h: params::conv_kernel(k, h, 4 * h, rng),
            bias: params::gate_bias(h),
        }
    }
}

impl ConvAttention {
    pub fn init(dims: CellDims, rng: &mut ChaCha8Rng) -> Self {
        let (a, c, h) = (dims.attention_kernel, dims.input, dims.hidden);
        ConvAttention {
            w_xa: params::conv_kernel(a, c, h, rng),
            w_ha: params::conv_kernel(a, h, h, rng),
            b_a: Tensor::zeros([h]),
            w_z: params::conv_kernel(1, h, 1, rng),
        }
    }
}

impl ConvCellParams {
    pub fn init(dims: CellDims, with_attention: bool, rng: &mut ChaCha8Rng) -> Result<Self> {
        dims.validate()?;
        Ok(ConvCellParams {
            gates: ConvGates::init(dims, rng),
            attention: with_attention.then(|| ConvAttention::init(dims, rng)),
        })
    }
}

impl MotionLayerParams {
    pub fn init(dims: CellDims, rng: &mut ChaCha8Rng) -> Self {
        let (k, c, h) = (dims.state_kernel, dims.input, dims.hidden);
        MotionLayerParams {
            w_x: params::conv_kernel(k, c, 4 * h, rng),
            w_h: params::conv_kernel(k, h, 4 * h, rng),
            w_e: params::conv_kernel(k, h, 4 * h, rng),
            bias: params::gate_bias(h),
        }
    }
}

impl VideoLstmParams {
    /// `top` consumes `dims.input` channels; `bottom` consumes
    /// `motion_input` flow-feature channels. Both layers have `dims.hidden`
    /// channels.
    pub fn init(dims: CellDims, motion_input: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        dims.validate()?;
        let top = ConvCellParams::init(dims, true, rng)?;
        let bottom = MotionLayerParams::init(
            CellDims {
                input: motion_input,
                ..dims
            },
            rng,
        );
        Ok(VideoLstmParams { top, bottom })
    }
}

/// Gates from a fused pre-activation, then the memory and hidden updates:
/// `C_t = F⊙C_{t−1} + I⊙G`, `H_t = O⊙tanh(C_t)`.
fn gate_update(g: &mut Graph, pre: Var, c_prev: Var) -> Result<CellState<Var>> {
    let width = g.value(pre).channels();
    if !width.is_multiple_of(4) {
        return Err(Error::shape("lstm gates", format!("fused width {width} not divisible by 4")));
    }
    let k = width / 4;
    let slice_i = g.slice_channels(pre, 0, k)?;
    let slice_f = g.slice_channels(pre, k, k)?;
    let slice_o = g.slice_channels(pre, 2 * k, k)?;
    let slice_c = g.slice_channels(pre, 3 * k, k)?;
    let input = g.sigmoid(slice_i);
    let forget = g.sigmoid(slice_f);
    let output = g.sigmoid(slice_o);
    let candidate = g.tanh(slice_c);
    let kept = g.mul(forget, c_prev)?;
    let written = g.mul(input, candidate)?;
    let c = g.add(kept, written)?;
    let squashed = g.tanh(c);
    let h = g.mul(output, squashed)?;
    Ok(CellState { h, c })
}

/// Fully connected LSTM step on an input vector.
pub fn lstm_step(g: &mut Graph, x: Var, state: &CellState<Var>, p: &LstmGates<Var>) -> Result<CellState<Var>> {
    let from_x = g.dense(x, p.w_x, Some(p.bias))?;
    let from_h = g.dense(state.h, p.w_h, None)?;
    let pre = g.add(from_x, from_h)?;
    gate_update(g, pre, state.c)
}

/// Region weights of the vector attention LSTM: a tanh perceptron scores
/// every region of `x` (an `N×N×D` map) against the previous hidden vector,
/// and a softmax over the `N²` scores normalizes them.
pub fn alstm_attention(g: &mut Graph, x: Var, h_prev: Var, p: &MlpAttention<Var>) -> Result<Attention> {
    let &[n, m, _] = g.value(x).shape() else {
        return Err(Error::shape("alstm_attention", format!("expected N×N×D regions, got {:?}", g.value(x).shape())));
    };
    let regions = g.conv2d(x, p.w_xa, Some(p.b_a))?;
    let from_h = g.dense(h_prev, p.w_ha, None)?;
    let hidden = g.add_channel_vector(regions, from_h)?;
    let hidden = g.tanh(hidden);
    let z = g.conv2d(hidden, p.w_z, None)?;
    let scores = g.reshape(z, &[n, m])?;
    let map = g.spatial_softmax(scores)?;
    Ok(Attention { map, scores })
}

/// Vector attention LSTM step: the attention-weighted expectation of the
/// region features feeds a standard LSTM step.
pub fn alstm_step(
    g: &mut Graph,
    x: Var,
    state: &CellState<Var>,
    p: &VectorCellParams<Var>,
) -> Result<(CellState<Var>, Attention)> {
    let att = p
        .attention
        .as_ref()
        .ok_or_else(|| Error::Config("attention LSTM step needs attention parameters".into()))?;
    let attention = alstm_attention(g, x, state.h, att)?;
    let pooled = g.weighted_pool(attention.map, x)?;
    Ok((lstm_step(g, pooled, state, &p.gates)?, attention))
}

/// Convolutional attention map `softmax(W_z ∗ tanh(W_xa∗X + W_ha∗H + b_a))`.
pub fn conv_attention(g: &mut Graph, x: Var, h_cond: Var, p: &ConvAttention<Var>) -> Result<Attention> {
    let (xs, hs) = (g.value(x).shape(), g.value(h_cond).shape());
    if xs.len() != 3 || hs.len() != 3 || xs[..2] != hs[..2] {
        return Err(Error::shape("conv_attention", format!("input {xs:?} against conditioning {hs:?}")));
    }
    let (n, m) = (xs[0], xs[1]);
    let from_x = g.conv2d(x, p.w_xa, Some(p.b_a))?;
    let from_h = g.conv2d(h_cond, p.w_ha, None)?;
    let hidden = g.add(from_x, from_h)?;
    let hidden = g.tanh(hidden);
    let z = g.conv2d(hidden, p.w_z, None)?;
    let scores = g.reshape(z, &[n, m])?;
    let map = g.spatial_softmax(scores)?;
    Ok(Attention { map, scores })
}

/// `X̃(i,j,c) = A(i,j)·X(i,j,c)`; spatial layout is kept.
pub fn apply_attention(g: &mut Graph, attention: Var, x: Var) -> Result<Var> {
    g.scale_channels(attention, x)
}

/// Convolutional LSTM step with same-padded convolutions.
pub fn conv_lstm_step(g: &mut Graph, x: Var, state: &CellState<Var>, p: &ConvGates<Var>) -> Result<CellState<Var>> {
    let from_x = g.conv2d(x, p.w_x, Some(p.bias))?;
    let from_h = g.conv2d(state.h, p.w_h, None)?;
    let pre = g.add(from_x, from_h)?;
    gate_update(g, pre, state.c)
}

/// Attention from `(X_t, H_{t−1})`, weighting, then a convolutional LSTM step
/// on the weighted map. The attention used is returned for localization.
pub fn conv_alstm_step(
    g: &mut Graph,
    x: Var,
    state: &CellState<Var>,
    p: &ConvCellParams<Var>,
) -> Result<(CellState<Var>, Attention)> {
    let att = p
        .attention
        .as_ref()
        .ok_or_else(|| Error::Config("convolutional attention step needs attention parameters".into()))?;
    let attention = conv_attention(g, x, state.h, att)?;
    let attended = apply_attention(g, attention.map, x)?;
    Ok((conv_lstm_step(g, attended, state, &p.gates)?, attention))
}

/// Bottom motion layer: every gate sees the flow map, the layer's own
/// previous hidden state and the previous hidden state of the top layer.
pub fn motion_layer_step(
    g: &mut Graph,
    m: Var,
    state: &CellState<Var>,
    h_top_prev: Var,
    p: &MotionLayerParams<Var>,
) -> Result<CellState<Var>> {
    let from_m = g.conv2d(m, p.w_x, Some(p.bias))?;
    let from_h = g.conv2d(state.h, p.w_h, None)?;
    let from_top = g.conv2d(h_top_prev, p.w_e, None)?;
    let pre = g.add(from_m, from_h)?;
    let pre = g.add(pre, from_top)?;
    gate_update(g, pre, state.c)
}

/// Output of one two-layer motion-attention step.
#[derive(Clone, Debug)]
pub struct VideoLstmStep {
    pub top: CellState<Var>,
    pub bottom: CellState<Var>,
    pub attention: Attention,
}

/// One timestep of the motion-attention network, in order: bottom layer on
/// the flow map (conditioned on the previous top hidden state), attention
/// from the appearance map and the *current* bottom hidden state, weighting,
/// then the top convolutional LSTM. The bottom layer reaches the top layer
/// only through the attention map.
pub fn videolstm_step(
    g: &mut Graph,
    x: Var,
    m: Var,
    top: &CellState<Var>,
    bottom: &CellState<Var>,
    p: &VideoLstmParams<Var>,
) -> Result<VideoLstmStep> {
    let att = p
        .top
        .attention
        .as_ref()
        .ok_or_else(|| Error::Config("motion attention needs top-layer attention parameters".into()))?;
    let bottom = motion_layer_step(g, m, bottom, top.h, &p.bottom)?;
    let attention = conv_attention(g, x, bottom.h, att)?;
    let attended = apply_attention(g, attention.map, x)?;
    let top = conv_lstm_step(g, attended, top, &p.top.gates)?;
    Ok(VideoLstmStep {
        top,
        bottom,
        attention,
    })
}
