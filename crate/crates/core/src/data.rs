//! Synthetic motion video: glyph generator with analytic flow and boxes,
//! flow image encoding, a block-matching flow estimator, the clip container
//! and dataset builder.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::BoundingBox;
use crate::model::Stream;
use crate::tensor::Tensor;

/// Flow magnitude (pixels per frame) mapped to the ends of `[0, 255]`.
pub const FLOW_RANGE: f64 = 8.0;

const MAGIC: &[u8; 4] = b"VLSM";
const VERSION: u8 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeKind {
    Square,
    Disk,
    Diamond,
}

impl ShapeKind {
    const ALL: [ShapeKind; 3] = [ShapeKind::Square, ShapeKind::Disk, ShapeKind::Diamond];

    /// Whether pixel `(i, j)` of an `s×s` cell belongs to the shape.
    fn covers(self, i: usize, j: usize, s: usize) -> bool {
        let half = s as f64 / 2.0;
        let u = i as f64 + 0.5 - half;
        let v = j as f64 + 0.5 - half;
        match self {
            ShapeKind::Square => true,
            ShapeKind::Disk => u * u + v * v <= half * half,
            ShapeKind::Diamond => u.abs() + v.abs() <= half,
        }
    }
}

/// Motion program; its index is the class label.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MotionProgram {
    HorizontalBounce,
    VerticalBounce,
    Diagonal,
    Circular,
    Expanding,
    StaticFlicker,
}

impl MotionProgram {
    pub const ALL: [MotionProgram; 6] = [
        MotionProgram::HorizontalBounce,
        MotionProgram::VerticalBounce,
        MotionProgram::Diagonal,
        MotionProgram::Circular,
        MotionProgram::Expanding,
        MotionProgram::StaticFlicker,
    ];

    pub fn from_label(label: usize) -> Result<Self> {
        Self::ALL
            .get(label)
            .copied()
            .ok_or_else(|| Error::Config(format!("no motion program for class {label}")))
    }

    pub fn label(self) -> usize {
        Self::ALL.iter().position(|&m| m == self).expect("listed")
    }

    pub fn name(self) -> &'static str {
        match self {
            MotionProgram::HorizontalBounce => "horizontal_bounce",
            MotionProgram::VerticalBounce => "vertical_bounce",
            MotionProgram::Diagonal => "diagonal",
            MotionProgram::Circular => "circular",
            MotionProgram::Expanding => "expanding",
            MotionProgram::StaticFlicker => "static_flicker",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GlyphSpec {
    pub shape: ShapeKind,
    /// Side of the glyph cell in pixels (the largest size when expanding).
    pub size: usize,
    pub intensity: f64,
    pub motion: MotionProgram,
    /// Pixels per frame.
    pub speed: usize,
    /// Number of static background dots.
    pub clutter: usize,
    pub noise: f64,
}

impl GlyphSpec {
    /// Random appearance for the given motion class; shape, size, intensity
    /// and speed are drawn independently of the class.
    pub fn random(motion: MotionProgram, frame: usize, clutter: usize, noise: f64, rng: &mut impl Rng) -> Self {
        let lo = (frame / 5).max(2);
        let hi = (frame / 3).max(lo);
        GlyphSpec {
            shape: ShapeKind::ALL[rng.random_range(0..ShapeKind::ALL.len())],
            size: rng.random_range(lo..=hi),
            intensity: rng.random_range(0.6..1.0),
            motion,
            speed: rng.random_range(2..=3),
            clutter,
            noise,
        }
    }

    fn validate(&self, h: usize, w: usize) -> Result<()> {
        if self.size == 0 || self.size > h || self.size > w {
            return Err(Error::Config(format!(
                "glyph of size {} does not fit a {h}×{w} frame",
                self.size
            )));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(Error::Config(format!("noise level {} must be finite and nonnegative", self.noise)));
        }
        if !(0.0..=1.0).contains(&self.intensity) {
            return Err(Error::Config(format!("glyph intensity {} outside [0, 1]", self.intensity)));
        }
        Ok(())
    }

    /// Programmed glyph placement for `t` frames. Draws from `rng` before
    /// any rendering randomness, so a clip's trajectory can be replayed.
    pub fn trajectory(&self, t: usize, h: usize, w: usize, rng: &mut impl Rng) -> Result<Trajectory> {
        self.validate(h, w)?;
        let s = self.size;
        let mut out = Trajectory {
            centers: Vec::with_capacity(t),
            sizes: Vec::with_capacity(t),
        };
        let sign = |rng: &mut dyn rand::RngCore| if rng.random::<bool>() { 1i64 } else { -1 };
        match self.motion {
            MotionProgram::HorizontalBounce | MotionProgram::VerticalBounce | MotionProgram::Diagonal => {
                let (moves_x, moves_y) = match self.motion {
                    MotionProgram::HorizontalBounce => (true, false),
                    MotionProgram::VerticalBounce => (false, true),
                    _ => (true, true),
                };
                let mut x = rng.random_range(0..=w - s) as i64;
                let mut y = rng.random_range(0..=h - s) as i64;
                let mut vx = if moves_x { sign(rng) * self.speed as i64 } else { 0 };
                let mut vy = if moves_y { sign(rng) * self.speed as i64 } else { 0 };
                for step in 0..t {
                    if step > 0 {
                        bounce(&mut x, &mut vx, (w - s) as i64);
                        bounce(&mut y, &mut vy, (h - s) as i64);
                    }
                    out.centers.push((x as f64 + s as f64 / 2.0, y as f64 + s as f64 / 2.0));
                    out.sizes.push(s);
                }
            }
            MotionProgram::Circular => {
                let half = s as f64 / 2.0;
                let room = (w.min(h) - s) as f64 / 2.0;
                let radius = room.min(6.0);
                let cx = rng.random_range(half + radius..=w as f64 - half - radius);
                let cy = rng.random_range(half + radius..=h as f64 - half - radius);
                let omega = if radius > 0.0 {
                    sign(rng) as f64 * self.speed as f64 / radius
                } else {
                    0.0
                };
                let phase = rng.random_range(0.0..std::f64::consts::TAU);
                for step in 0..t {
                    let theta = phase + omega * step as f64;
                    out.centers.push((cx + radius * theta.cos(), cy + radius * theta.sin()));
                    out.sizes.push(s);
                }
            }
            MotionProgram::Expanding => {
                // Sizes step by 2 so the cell stays centered on whole pixels.
                let min = s - 2 * ((s - (s / 2).max(4).min(s)) / 2);
                let x = rng.random_range(0..=w - s) as f64;
                let y = rng.random_range(0..=h - s) as f64;
                let (cx, cy) = (x + s as f64 / 2.0, y + s as f64 / 2.0);
                let levels = (s - min) / 2;
                let mut level = rng.random_range(0..=levels) as i64;
                let mut dir = if levels == 0 { 0 } else { sign(rng) };
                for step in 0..t {
                    if step > 0 {
                        bounce(&mut level, &mut dir, levels as i64);
                    }
                    out.centers.push((cx, cy));
                    out.sizes.push(min + 2 * level as usize);
                }
            }
            MotionProgram::StaticFlicker => {
                let x = rng.random_range(0..=w - s) as f64;
                let y = rng.random_range(0..=h - s) as f64;
                for _ in 0..t {
                    out.centers.push((x + s as f64 / 2.0, y + s as f64 / 2.0));
                    out.sizes.push(s);
                }
            }
        }
        Ok(out)
    }
}

/// Advances `pos` by `vel`, reflecting off `0` and `limit`.
fn bounce(pos: &mut i64, vel: &mut i64, limit: i64) {
    if limit == 0 {
        *vel = 0;
        return;
    }
    *pos += *vel;
    loop {
        if *pos < 0 {
            *pos = -*pos;
            *vel = -*vel;
        } else if *pos > limit {
            *pos = 2 * limit - *pos;
            *vel = -*vel;
        } else {
            break;
        }
    }
}

/// Continuous glyph centers and cell sizes per frame.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub centers: Vec<(f64, f64)>,
    pub sizes: Vec<usize>,
}

impl Trajectory {
    /// Integer top-left corner of frame `t`'s glyph cell.
    fn corner(&self, t: usize) -> (i64, i64) {
        let (cx, cy) = self.centers[t];
        let half = self.sizes[t] as f64 / 2.0;
        ((cx - half).round() as i64, (cy - half).round() as i64)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct VideoClip {
    /// `H×W×C` images in `[0, 1]`.
    pub frames: Vec<Tensor>,
    /// `H×W×2` displacement fields `(dx, dy)`; `frame_t(p) ≈ frame_{t−1}(p − flow_t(p))`.
    pub flow: Vec<Tensor>,
    pub gt_boxes: Vec<Option<BoundingBox>>,
    pub label: usize,
}

impl VideoClip {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// `(H, W, C)` of the frames.
    pub fn extents(&self) -> (usize, usize, usize) {
        let s = self.frames[0].shape();
        (s[0], s[1], s[2])
    }

    /// Frames `start..start + len`.
    pub fn window(&self, start: usize, len: usize) -> VideoClip {
        VideoClip {
            frames: self.frames[start..start + len].to_vec(),
            flow: self.flow[start..start + len].to_vec(),
            gt_boxes: self.gt_boxes[start..start + len].to_vec(),
            label: self.label,
        }
    }

    /// Centered appearance frames as network input.
    pub fn rgb_inputs(&self) -> Vec<Tensor> {
        self.frames.iter().map(|f| f.map(|v| v - 0.5)).collect()
    }

    /// Quantized flow images rescaled to `[−0.5, 0.5]` as network input.
    pub fn flow_inputs(&self) -> Vec<Tensor> {
        self.flow
            .iter()
            .map(|f| quantize_flow_image(&flow_to_image(f)).map(|v| v / 255.0 - 0.5))
            .collect()
    }

    pub fn stream_inputs(&self, stream: Stream) -> Vec<Tensor> {
        match stream {
            Stream::Rgb => self.rgb_inputs(),
            Stream::Flow => self.flow_inputs(),
        }
    }

    fn validate(&self) -> Result<()> {
        let t = self.frames.len();
        if t == 0 || self.flow.len() != t || self.gt_boxes.len() != t {
            return Err(Error::Format(format!(
                "clip has {t} frames, {} flow fields and {} boxes",
                self.flow.len(),
                self.gt_boxes.len()
            )));
        }
        Ok(())
    }
}

/// Renders a clip of `t` frames; deterministic for a fixed `rng` state.
pub fn generate_clip(spec: &GlyphSpec, t: usize, h: usize, w: usize, channels: usize, rng: &mut impl Rng) -> Result<VideoClip> {
    if t == 0 || channels == 0 {
        return Err(Error::Config("clip needs at least one frame and one channel".into()));
    }
    let traj = spec.trajectory(t, h, w, rng)?;
    let clutter: Vec<(usize, usize, f64)> = (0..spec.clutter)
        .map(|_| (rng.random_range(0..h), rng.random_range(0..w), rng.random_range(0.15..0.45)))
        .collect();
    let noise = Normal::new(0.0, spec.noise).map_err(|e| Error::Config(e.to_string()))?;

    let mut frames = Vec::with_capacity(t);
    let mut flow = Vec::with_capacity(t);
    let mut gt_boxes = Vec::with_capacity(t);
    for step in 0..t {
        let intensity = match spec.motion {
            MotionProgram::StaticFlicker => spec.intensity * rng.random_range(0.4..1.0),
            _ => spec.intensity,
        };
        let mut gray = vec![0.0; h * w];
        for &(y, x, v) in &clutter {
            gray[y * w + x] = v;
        }
        let mut field = Tensor::zeros([h, w, 2]);
        let (ox, oy) = traj.corner(step);
        let s = traj.sizes[step];
        let mut bounds: Option<(usize, usize, usize, usize)> = None;
        for i in 0..s {
            for j in 0..s {
                let (y, x) = (oy + i as i64, ox + j as i64);
                if !spec.shape.covers(i, j, s) || y < 0 || x < 0 || y >= h as i64 || x >= w as i64 {
                    continue;
                }
                let (y, x) = (y as usize, x as usize);
                gray[y * w + x] = intensity * shading(i, j, s);
                bounds = Some(match bounds {
                    None => (x, y, x + 1, y + 1),
                    Some((x0, y0, x1, y1)) => (x0.min(x), y0.min(y), x1.max(x + 1), y1.max(y + 1)),
                });
                if step > 0 {
                    let (dx, dy) = displacement(&traj, step, x, y);
                    field.set(&[y, x, 0], dx);
                    field.set(&[y, x, 1], dy);
                }
            }
        }
        if spec.noise > 0.0 {
            for v in &mut gray {
                *v += noise.sample(rng);
            }
        }
        let frame = Tensor::from_fn([h, w, channels], |i| gray[i / channels].clamp(0.0, 1.0));
        frames.push(frame);
        flow.push(field);
        gt_boxes.push(bounds.map(|(x0, y0, x1, y1)| BoundingBox {
            x0: x0 as f64,
            y0: y0 as f64,
            x1: x1 as f64,
            y1: y1 as f64,
        }));
    }
    Ok(VideoClip {
        frames,
        flow,
        gt_boxes,
        label: spec.motion.label(),
    })
}

/// Radial shading of pixel `(i, j)` in an `s×s` cell, in cell-relative
/// coordinates so that it scales with the glyph.
fn shading(i: usize, j: usize, s: usize) -> f64 {
    let half = s as f64 / 2.0;
    let u = i as f64 + 0.5 - half;
    let v = j as f64 + 0.5 - half;
    1.0 - 0.15 * (u * u + v * v) / (half * half)
}

/// Displacement of glyph pixel `(x, y)` between frames `t − 1` and `t`.
fn displacement(traj: &Trajectory, t: usize, x: usize, y: usize) -> (f64, f64) {
    let (s0, s1) = (traj.sizes[t - 1] as f64, traj.sizes[t] as f64);
    if s0 == s1 {
        let (x0, y0) = traj.corner(t - 1);
        let (x1, y1) = traj.corner(t);
        return ((x1 - x0) as f64, (y1 - y0) as f64);
    }
    // Scaling about a fixed center: the source of p is c + (p − c)·s0/s1.
    let (cx, cy) = traj.centers[t];
    let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
    let k = 1.0 - s0 / s1;
    ((px - cx) * k, (py - cy) * k)
}

/// Linear map of `[−R, R]` onto `[0, 255]`, clamped.
pub fn flow_to_image(flow: &Tensor) -> Tensor {
    flow.map(|v| ((v + FLOW_RANGE) / (2.0 * FLOW_RANGE) * 255.0).clamp(0.0, 255.0))
}

/// Inverse of [`flow_to_image`] inside the clamp range.
pub fn image_to_flow(image: &Tensor) -> Tensor {
    image.map(|v| v / 255.0 * 2.0 * FLOW_RANGE - FLOW_RANGE)
}

/// Rounds a flow image to the 256 integer levels of an 8-bit image.
pub fn quantize_flow_image(image: &Tensor) -> Tensor {
    image.map(|v| v.round().clamp(0.0, 255.0))
}

/// Block-wise integer displacement `d` minimizing `Σ |b(p) − a(p − d)|` over
/// `|dx|, |dy| ≤ radius`. Candidates reaching outside `a` are skipped; ties
/// go to the smaller `|dx| + |dy|`, then smaller `dy`, then smaller `dx`.
pub fn block_matching_flow(a: &Tensor, b: &Tensor, block: usize, radius: usize) -> Result<Tensor> {
    a.expect_same_shape(b, "block_matching_flow")?;
    if a.ndim() != 3 || block == 0 {
        return Err(Error::shape("block_matching_flow", format!("frames {:?}, block {block}", a.shape())));
    }
    let (h, w, c) = (a.shape()[0], a.shape()[1], a.shape()[2]);
    let r = radius as i64;
    let mut field = Tensor::zeros([h, w, 2]);
    for by in (0..h).step_by(block) {
        for bx in (0..w).step_by(block) {
            let (ey, ex) = ((by + block).min(h), (bx + block).min(w));
            let mut best: Option<(f64, i64, i64, i64)> = None;
            for dy in -r..=r {
                for dx in -r..=r {
                    let inside = by as i64 - dy >= 0
                        && ey as i64 - dy <= h as i64
                        && bx as i64 - dx >= 0
                        && ex as i64 - dx <= w as i64;
                    if !inside {
                        continue;
                    }
                    let mut sad = 0.0;
                    for y in by..ey {
                        for x in bx..ex {
                            let sy = (y as i64 - dy) as usize;
                            let sx = (x as i64 - dx) as usize;
                            for ch in 0..c {
                                sad += (b.data()[(y * w + x) * c + ch] - a.data()[(sy * w + sx) * c + ch]).abs();
                            }
                        }
                    }
                    let key = (sad, dx.abs() + dy.abs(), dy, dx);
                    let better = match best {
                        None => true,
                        Some(cur) => key.0 < cur.0 || (key.0 == cur.0 && (key.1, key.2, key.3) < (cur.1, cur.2, cur.3)),
                    };
                    if better {
                        best = Some(key);
                    }
                }
            }
            let (_, _, dy, dx) = best.expect("zero displacement is always a candidate");
            for y in by..ey {
                for x in bx..ex {
                    field.set(&[y, x, 0], dx as f64);
                    field.set(&[y, x, 1], dy as f64);
                }
            }
        }
    }
    Ok(field)
}

fn push_u32(buf: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Format(format!("extent {v} exceeds 32 bits")))?;
    buf.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

fn push_f32s(buf: &mut Vec<u8>, values: &[f64]) {
    for &v in values {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
}

/// Serializes a clip into the `VLSM` container.
pub fn encode_clip(clip: &VideoClip) -> Result<Vec<u8>> {
    clip.validate()?;
    let (h, w, c) = clip.extents();
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.push(b'0' + VERSION);
    for v in [clip.len(), h, w, c, clip.label] {
        push_u32(&mut buf, v)?;
    }
    for f in &clip.frames {
        if f.shape() != [h, w, c] {
            return Err(Error::shape("write_clip", format!("frame {:?} in a {h}×{w}×{c} clip", f.shape())));
        }
        push_f32s(&mut buf, f.data());
    }
    for f in &clip.flow {
        if f.shape() != [h, w, 2] {
            return Err(Error::shape("write_clip", format!("flow {:?} in a {h}×{w} clip", f.shape())));
        }
        push_f32s(&mut buf, f.data());
    }
    for b in &clip.gt_boxes {
        let coords = b.map_or([-1.0; 4], |b| [b.x0, b.y0, b.x1, b.y1]);
        push_f32s(&mut buf, &coords);
    }
    Ok(buf)
}

/// Parses a `VLSM` container; any inconsistency is a format error.
pub fn decode_clip(bytes: &[u8]) -> Result<VideoClip> {
    let mut cursor = bytes;
    let mut take = |n: usize, what: &str| -> Result<&[u8]> {
        if cursor.len() < n {
            return Err(Error::Format(format!("truncated clip: missing {what}")));
        }
        let (head, rest) = cursor.split_at(n);
        cursor = rest;
        Ok(head)
    };
    if take(4, "magic")? != MAGIC {
        return Err(Error::Format("not a VLSM clip".into()));
    }
    let found = take(1, "version")?[0].wrapping_sub(b'0');
    if found != VERSION {
        return Err(Error::Version {
            expected: VERSION,
            found,
        });
    }
    let mut dims = [0usize; 5];
    for d in &mut dims {
        *d = u32::from_le_bytes(take(4, "header")?.try_into().unwrap()) as usize;
    }
    let [t, h, w, c, label] = dims;
    if t == 0 || h == 0 || w == 0 || c == 0 {
        return Err(Error::Format(format!("zero extent in clip header {t}×{h}×{w}×{c}")));
    }
    let mut floats = |n: usize, what: &str| -> Result<Vec<f64>> {
        let raw = take(n * 4, what)?;
        Ok(raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
            .collect())
    };
    let frames = (0..t)
        .map(|_| Tensor::new([h, w, c], floats(h * w * c, "frames")?))
        .collect::<Result<Vec<_>>>()?;
    let flow = (0..t)
        .map(|_| Tensor::new([h, w, 2], floats(h * w * 2, "flow")?))
        .collect::<Result<Vec<_>>>()?;
    let gt_boxes = (0..t)
        .map(|_| {
            let v = floats(4, "boxes")?;
            if v.iter().all(|&x| x == -1.0) {
                Ok(None)
            } else {
                BoundingBox::new(v[0], v[1], v[2], v[3])
                    .map(Some)
                    .map_err(|e| Error::Format(format!("bad box in clip: {e}")))
            }
        })
        .collect::<Result<Vec<_>>>()?;
    if !cursor.is_empty() {
        return Err(Error::Format(format!("{} trailing bytes after clip", cursor.len())));
    }
    Ok(VideoClip {
        frames,
        flow,
        gt_boxes,
        label,
    })
}

pub fn write_clip(path: &Path, clip: &VideoClip) -> Result<()> {
    let bytes = encode_clip(clip)?;
    let mut out = BufWriter::new(File::create(path)?);
    out.write_all(&bytes)?;
    out.flush()?;
    Ok(())
}

pub fn read_clip(path: &Path) -> Result<VideoClip> {
    let mut bytes = Vec::new();
    BufReader::new(File::open(path)?).read_to_end(&mut bytes)?;
    decode_clip(&bytes)
}

/// Per-frame boxes as JSON (`null` for frames without a glyph).
pub fn write_boxes_json(path: &Path, clip: &VideoClip) -> Result<()> {
    let doc = serde_json::json!({ "label": clip.label, "boxes": clip.gt_boxes });
    fs::write(path, serde_json::to_string_pretty(&doc)?)?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub classes: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub frames: usize,
    pub frame_size: usize,
    pub channels: usize,
    pub clutter: usize,
    pub noise: f64,
    pub seed: u64,
    /// Fixed glyph size; drawn per clip when absent.
    pub glyph_size: Option<usize>,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            classes: 6,
            train_per_class: 50,
            test_per_class: 20,
            frames: 16,
            frame_size: 32,
            channels: 1,
            clutter: 6,
            noise: 0.05,
            seed: 0,
            glyph_size: None,
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.classes == 0 || self.classes > MotionProgram::ALL.len() {
            return Err(Error::Config(format!(
                "classes must be in 1..={}, got {}",
                MotionProgram::ALL.len(),
                self.classes
            )));
        }
        if self.frames == 0 || self.frame_size == 0 || self.channels == 0 {
            return Err(Error::Config("frames, frame size and channels must be positive".into()));
        }
        if let Some(size) = self.glyph_size {
            if size == 0 || size > self.frame_size {
                return Err(Error::Config(format!(
                    "glyph size {size} does not fit a {0}×{0} frame",
                    self.frame_size
                )));
            }
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(Error::Config(format!("noise level {} must be finite and nonnegative", self.noise)));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    fn stream(self) -> u64 {
        match self {
            Split::Train => 1,
            Split::Test => 2,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

/// Generator for clip `index` of `split`; independent of every other clip.
pub fn clip_rng(seed: u64, split: Split, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((split.stream() << 40) | index as u64);
    rng
}

fn generate_split(cfg: &DatasetConfig, split: Split, per_class: usize) -> Result<Vec<VideoClip>> {
    (0..per_class * cfg.classes)
        .into_par_iter()
        .map(|i| {
            let mut rng = clip_rng(cfg.seed, split, i);
            let motion = MotionProgram::from_label(i % cfg.classes)?;
            let mut spec = GlyphSpec::random(motion, cfg.frame_size, cfg.clutter, cfg.noise, &mut rng);
            if let Some(size) = cfg.glyph_size {
                spec.size = size;
            }
            generate_clip(&spec, cfg.frames, cfg.frame_size, cfg.frame_size, cfg.channels, &mut rng)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub config: DatasetConfig,
    pub train: Vec<VideoClip>,
    pub test: Vec<VideoClip>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub path: PathBuf,
    pub label: usize,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub config: DatasetConfig,
    pub clips: Vec<ManifestEntry>,
}

pub const MANIFEST_FILE: &str = "manifest.json";

impl Dataset {
    /// Class-balanced train and test splits.
    pub fn generate(config: &DatasetConfig) -> Result<Self> {
        config.validate()?;
        Ok(Dataset {
            config: config.clone(),
            train: generate_split(config, Split::Train, config.train_per_class)?,
            test: generate_split(config, Split::Test, config.test_per_class)?,
        })
    }

    /// Writes clips, box sidecars and `manifest.json` under `dir`.
    pub fn write(&self, dir: &Path) -> Result<DatasetManifest> {
        fs::create_dir_all(dir.join("clips"))?;
        let mut clips = Vec::new();
        for (split, set) in [(Split::Train, &self.train), (Split::Test, &self.test)] {
            for (i, clip) in set.iter().enumerate() {
                let rel = PathBuf::from("clips").join(format!("{}_{i:05}.vlsm", split.name()));
                write_clip(&dir.join(&rel), clip)?;
                write_boxes_json(&dir.join(rel.with_extension("boxes.json")), clip)?;
                clips.push(ManifestEntry {
                    path: rel,
                    label: clip.label,
                    split,
                });
            }
        }
        let manifest = DatasetManifest {
            config: self.config.clone(),
            clips,
        };
        fs::write(dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)?)?;
        Ok(manifest)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let text = fs::read_to_string(dir.join(MANIFEST_FILE))?;
        let manifest: DatasetManifest = serde_json::from_str(&text)?;
        let mut train = Vec::new();
        let mut test = Vec::new();
        for entry in &manifest.clips {
            let clip = read_clip(&dir.join(&entry.path))?;
            if clip.label != entry.label {
                return Err(Error::Format(format!(
                    "{} has label {} but the manifest says {}",
                    entry.path.display(),
                    clip.label,
                    entry.label
                )));
            }
            match entry.split {
                Split::Train => train.push(clip),
                Split::Test => test.push(clip),
            }
        }
        Ok(Dataset {
            config: manifest.config,
            train,
            test,
        })
    }
}
