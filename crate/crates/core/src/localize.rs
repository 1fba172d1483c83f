//! Attention-driven localization: saliency maps, thresholded connected
//! components, a greedy single-box chain and local-linear smoothing.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::BoundingBox;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LocalizationConfig {
    /// Saliency threshold in `[0, 255]` units.
    pub threshold: f64,
    /// Gaussian standard deviation in pixels; `None` uses `H / 14`.
    pub sigma: Option<f64>,
    /// Fraction of the frames used by each local fit.
    pub span: f64,
    pub smooth: bool,
}

impl Default for LocalizationConfig {
    fn default() -> Self {
        LocalizationConfig {
            threshold: 100.0,
            sigma: None,
            span: 0.3,
            smooth: true,
        }
    }
}

impl LocalizationConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.threshold >= 0.0) {
            return Err(Error::Config(format!("threshold {} must be nonnegative", self.threshold)));
        }
        if let Some(s) = self.sigma {
            if !(s > 0.0 && s.is_finite()) {
                return Err(Error::Config(format!("sigma {s} must be positive")));
            }
        }
        if !(self.span > 0.0 && self.span <= 1.0) {
            return Err(Error::Config(format!("span {} outside (0, 1]", self.span)));
        }
        Ok(())
    }

    pub fn sigma_for(&self, height: usize) -> f64 {
        self.sigma.unwrap_or(height as f64 / 14.0)
    }
}

fn grid_extents(a: &Tensor) -> Result<(usize, usize)> {
    match a.shape() {
        [n, m] | [n, m, 1] => Ok((*n, *m)),
        s => Err(Error::shape("saliency", format!("attention map {s:?} is not a single-channel grid"))),
    }
}

/// Bilinear resize of a grid to `h×w` with pixel centers aligned.
pub fn upscale_bilinear(a: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    let (n, m) = grid_extents(a)?;
    let coord = |i: usize, out: usize, src: usize| {
        let c = ((i as f64 + 0.5) * src as f64 / out as f64 - 0.5).clamp(0.0, (src - 1) as f64);
        let lo = c.floor() as usize;
        let hi = (lo + 1).min(src - 1);
        (lo, hi, c - lo as f64)
    };
    let data = a.data();
    let mut out = Tensor::zeros([h, w]);
    for y in 0..h {
        let (y0, y1, fy) = coord(y, h, n);
        for x in 0..w {
            let (x0, x1, fx) = coord(x, w, m);
            let top = (1.0 - fx) * data[y0 * m + x0] + fx * data[y0 * m + x1];
            let bottom = (1.0 - fx) * data[y1 * m + x0] + fx * data[y1 * m + x1];
            out.data_mut()[y * w + x] = (1.0 - fy) * top + fy * bottom;
        }
    }
    Ok(out)
}

/// Normalized Gaussian taps on `[−r, r]` with `r = ⌈3σ⌉`.
fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let r = (3.0 * sigma).ceil() as i64;
    let taps: Vec<f64> = (-r..=r).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = taps.iter().sum();
    taps.into_iter().map(|t| t / s).collect()
}

/// Index reflected about the edges (`… b a | a b …`).
fn reflect(i: i64, n: usize) -> usize {
    let n = n as i64;
    let period = 2 * n;
    let i = i.rem_euclid(period);
    (if i < n { i } else { period - 1 - i }) as usize
}

/// Separable Gaussian blur of an `h×w` map with reflective borders.
pub fn gaussian_blur(s: &Tensor, sigma: f64) -> Result<Tensor> {
    let (h, w) = grid_extents(s)?;
    let kernel = gaussian_kernel(sigma);
    let r = (kernel.len() / 2) as i64;
    let src = s.data();
    let mut rows = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            rows[y * w + x] = kernel
                .iter()
                .enumerate()
                .map(|(k, t)| t * src[y * w + reflect(x as i64 + k as i64 - r, w)])
                .sum();
        }
    }
    let mut out = Tensor::zeros([h, w]);
    for y in 0..h {
        for x in 0..w {
            out.data_mut()[y * w + x] = kernel
                .iter()
                .enumerate()
                .map(|(k, t)| t * rows[reflect(y as i64 + k as i64 - r, h) * w + x])
                .sum();
        }
    }
    Ok(out)
}

/// Upscaled and blurred attention, before any rescaling.
pub fn saliency_from_attention(a: &Tensor, h: usize, w: usize, sigma: f64) -> Result<Tensor> {
    let (n, m) = grid_extents(a)?;
    if h < n || w < m {
        return Err(Error::Usage(format!("saliency {h}×{w} is smaller than the {n}×{m} attention grid")));
    }
    gaussian_blur(&upscale_bilinear(a, h, w)?, sigma)
}

/// Saliency for a whole video, scaled so that its maximum over all frames
/// is 255.
pub fn video_saliency(attention: &[Tensor], h: usize, w: usize, sigma: f64) -> Result<Vec<Tensor>> {
    let mut maps = attention
        .iter()
        .map(|a| saliency_from_attention(a, h, w, sigma))
        .collect::<Result<Vec<_>>>()?;
    let peak = maps.iter().map(Tensor::max).fold(0.0, f64::max);
    if peak > 0.0 {
        for m in &mut maps {
            m.scale_assign(255.0 / peak);
        }
    }
    Ok(maps)
}

struct DisjointSet(Vec<usize>);

impl DisjointSet {
    fn find(&mut self, mut i: usize) -> usize {
        while self.0[i] != i {
            self.0[i] = self.0[self.0[i]];
            i = self.0[i];
        }
        i
    }

    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            self.0[ra.max(rb)] = ra.min(rb);
        }
    }
}

/// Tight boxes of the 8-connected components of `s ≥ θ`, in raster order of
/// each component's first pixel.
pub fn extract_boxes(s: &Tensor, threshold: f64) -> Result<Vec<BoundingBox>> {
    let (h, w) = grid_extents(s)?;
    let on: Vec<bool> = s.data().iter().map(|&v| v >= threshold).collect();
    let mut sets = DisjointSet((0..h * w).collect());
    for y in 0..h {
        for x in 0..w {
            if !on[y * w + x] {
                continue;
            }
            // Previously visited neighbours: W, NW, N, NE.
            let mut neighbours = Vec::with_capacity(4);
            if x > 0 {
                neighbours.push(y * w + x - 1);
            }
            if y > 0 {
                if x > 0 {
                    neighbours.push((y - 1) * w + x - 1);
                }
                neighbours.push((y - 1) * w + x);
                if x + 1 < w {
                    neighbours.push((y - 1) * w + x + 1);
                }
            }
            for n in neighbours {
                if on[n] {
                    sets.union(y * w + x, n);
                }
            }
        }
    }
    let mut boxes: Vec<(usize, [usize; 4])> = Vec::new();
    let mut slot = vec![usize::MAX; h * w];
    for y in 0..h {
        for x in 0..w {
            if !on[y * w + x] {
                continue;
            }
            let root = sets.find(y * w + x);
            if slot[root] == usize::MAX {
                slot[root] = boxes.len();
                boxes.push((root, [x, y, x + 1, y + 1]));
            }
            let b = &mut boxes[slot[root]].1;
            b[0] = b[0].min(x);
            b[1] = b[1].min(y);
            b[2] = b[2].max(x + 1);
            b[3] = b[3].max(y + 1);
        }
    }
    Ok(boxes
        .into_iter()
        .map(|(_, [x0, y0, x1, y1])| BoundingBox {
            x0: x0 as f64,
            y0: y0 as f64,
            x1: x1 as f64,
            y1: y1 as f64,
        })
        .collect())
}

/// Greedy chain step: best IoU with `prev`, or the largest box without one;
/// ties go to the larger area, then the smaller `(x0, y0, x1, y1)`. An empty
/// candidate set carries `prev` forward.
pub fn select_box(candidates: &[BoundingBox], prev: Option<&BoundingBox>) -> Option<BoundingBox> {
    let score = |b: &BoundingBox| prev.map_or(0.0, |p| b.iou(p));
    let better = |a: &BoundingBox, b: &BoundingBox| {
        let (sa, sb) = (score(a), score(b));
        if sa != sb {
            return sa > sb;
        }
        if a.area() != b.area() {
            return a.area() > b.area();
        }
        [a.x0, a.y0, a.x1, a.y1] < [b.x0, b.y0, b.x1, b.y1]
    };
    match candidates.iter().reduce(|best, b| if better(b, best) { b } else { best }) {
        Some(b) => Some(*b),
        None => prev.copied(),
    }
}

fn tricube(u: f64) -> f64 {
    if u >= 1.0 {
        0.0
    } else {
        (1.0 - u * u * u).powi(3)
    }
}

/// Local linear regression of `values` against their frame index. Each fit
/// uses the `q = ⌈span·n⌉` nearest frames (at least 3 when available) with
/// tricube weights over a bandwidth one frame wider than the `q`-th nearest
/// distance, so every one of those frames carries weight.
pub fn lowess(values: &[f64], span: f64) -> Vec<f64> {
    let n = values.len();
    if n < 2 {
        return values.to_vec();
    }
    let q = ((span * n as f64).ceil() as usize).clamp(3.min(n), n);
    (0..n)
        .map(|i| {
            let mut dist: Vec<f64> = (0..n).map(|j| (j as f64 - i as f64).abs()).collect();
            dist.sort_by(f64::total_cmp);
            let bandwidth = dist[q - 1] + 1.0;
            let (mut sw, mut sx, mut sy, mut sxx, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for (j, &v) in values.iter().enumerate() {
                let x = j as f64 - i as f64;
                let wgt = tricube(x.abs() / bandwidth);
                sw += wgt;
                sx += wgt * x;
                sy += wgt * v;
                sxx += wgt * x * x;
                sxy += wgt * x * v;
            }
            // Centered at frame i, so the fitted value is the intercept.
            let det = sw * sxx - sx * sx;
            if det.abs() <= 1e-12 * sw * sxx.max(1.0) {
                sy / sw
            } else {
                (sxx * sy - sx * sxy) / det
            }
        })
        .collect()
}

/// Smooths centers and extents independently over time and clamps the
/// result to a `width × height` frame.
pub fn smooth_tube(boxes: &[BoundingBox], span: f64, width: usize, height: usize) -> Vec<BoundingBox> {
    if boxes.len() < 2 {
        return boxes.to_vec();
    }
    let series = |f: &dyn Fn(&BoundingBox) -> f64| lowess(&boxes.iter().map(f).collect::<Vec<_>>(), span);
    let cx = series(&|b| b.center().0);
    let cy = series(&|b| b.center().1);
    let bw = series(&|b| b.width());
    let bh = series(&|b| b.height());
    (0..boxes.len())
        .map(|t| BoundingBox::from_center_clamped(cx[t], cy[t], bw[t], bh[t], width, height))
        .collect()
}

/// Single spatio-temporal proposal for a video.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tube {
    pub boxes: Vec<BoundingBox>,
    pub class_scores: Vec<f64>,
}

/// Attention maps and per-frame class probabilities to one tube.
pub fn build_tube(
    attention: &[Tensor],
    frame_probs: &[Tensor],
    height: usize,
    width: usize,
    cfg: &LocalizationConfig,
) -> Result<Tube> {
    cfg.validate()?;
    if attention.is_empty() || attention.len() != frame_probs.len() {
        return Err(Error::Usage(format!(
            "{} attention maps for {} frame predictions",
            attention.len(),
            frame_probs.len()
        )));
    }
    let saliency = video_saliency(attention, height, width, cfg.sigma_for(height))?;
    // Leading frames without a component take the first box found.
    let mut chain: Vec<Option<BoundingBox>> = Vec::with_capacity(saliency.len());
    let mut prev: Option<BoundingBox> = None;
    for s in &saliency {
        prev = select_box(&extract_boxes(s, cfg.threshold)?, prev.as_ref());
        chain.push(prev);
    }
    let first = chain.iter().flatten().next().copied().ok_or(Error::EmptyTube)?;
    let mut boxes: Vec<BoundingBox> = chain.into_iter().map(|b| b.unwrap_or(first)).collect();
    if cfg.smooth {
        boxes = smooth_tube(&boxes, cfg.span, width, height);
    }
    let mut scores = vec![0.0; frame_probs[0].len()];
    for p in frame_probs {
        if p.len() != scores.len() {
            return Err(Error::shape("build_tube", "frame predictions disagree on the class count"));
        }
        for (s, v) in scores.iter_mut().zip(p.data()) {
            *s += v / frame_probs.len() as f64;
        }
    }
    Ok(Tube {
        boxes,
        class_scores: scores,
    })
}

/// Binary PGM (`P5`) encoding of a map, rounded and clamped to `[0, 255]`.
pub fn encode_pgm(s: &Tensor) -> Result<Vec<u8>> {
    let (h, w) = grid_extents(s)?;
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(s.data().iter().map(|v| v.round().clamp(0.0, 255.0) as u8));
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn b(x0: f64, y0: f64, x1: f64, y1: f64) -> BoundingBox {
        BoundingBox::new(x0, y0, x1, y1).unwrap()
    }

    #[test]
    fn uniform_attention_gives_constant_saliency() {
        let a = Tensor::full([8, 8], 1.0 / 64.0);
        let s = video_saliency(&[a.clone(), a], 32, 32, 32.0 / 14.0).unwrap();
        for m in &s {
            assert!(m.data().iter().all(|&v| (v - 255.0).abs() < 1e-9));
        }
    }

    #[test]
    fn one_hot_peak_stays_in_its_cell() {
        for (i, j) in [(0, 0), (3, 5), (7, 7), (2, 6)] {
            let mut a = Tensor::zeros([8, 8]);
            a.set(&[i, j], 1.0);
            let s = saliency_from_attention(&a, 32, 32, 32.0 / 14.0).unwrap();
            let k = s.argmax();
            let (y, x) = (k / 32, k % 32);
            assert!((4 * i..4 * i + 4).contains(&y) && (4 * j..4 * j + 4).contains(&x), "({i},{j}) -> ({y},{x})");
        }
    }

    #[test]
    fn blur_preserves_mass() {
        let s = Tensor::from_fn([20, 24], |i| ((i * 37) % 11) as f64);
        let blurred = gaussian_blur(&s, 2.3).unwrap();
        assert!((blurred.sum() - s.sum()).abs() < 1e-6);
    }

    #[test]
    fn connectivity_cases() {
        let mut s = Tensor::zeros([4, 4]);
        assert!(extract_boxes(&s, 0.5).unwrap().is_empty());
        s.set(&[1, 1], 1.0);
        s.set(&[2, 2], 1.0);
        assert_eq!(extract_boxes(&s, 0.5).unwrap(), vec![b(1.0, 1.0, 3.0, 3.0)]);
        let mut two = Tensor::zeros([3, 5]);
        for y in 0..3 {
            two.set(&[y, 0], 1.0);
            two.set(&[y, 4], 1.0);
        }
        assert_eq!(extract_boxes(&two, 0.5).unwrap().len(), 2);
    }

    #[test]
    fn selection_rules() {
        let a = b(0.0, 0.0, 4.0, 4.0);
        let c = b(10.0, 10.0, 12.0, 12.0);
        assert_eq!(select_box(&[c], Some(&a)), Some(c));
        assert_eq!(select_box(&[c, a], Some(&a)), Some(a));
        assert_eq!(select_box(&[], Some(&a)), Some(a));
        assert_eq!(select_box(&[], None), None);
        assert_eq!(select_box(&[c, a], None), Some(a));
        let d = b(20.0, 0.0, 24.0, 4.0);
        assert_eq!(select_box(&[d, a], None), Some(a));
    }

    #[test]
    fn smoothing_reproduces_lines() {
        let boxes: Vec<_> = (0..12).map(|t| b(t as f64, 2.0 + 0.5 * t as f64, t as f64 + 6.0, 8.0 + 0.5 * t as f64)).collect();
        let smoothed = smooth_tube(&boxes, 0.3, 64, 64);
        for (s, o) in smoothed.iter().zip(&boxes) {
            for (p, q) in [(s.x0, o.x0), (s.y0, o.y0), (s.x1, o.x1), (s.y1, o.y1)] {
                assert!((p - q).abs() < 1e-9);
            }
        }
        let constant = vec![b(3.0, 4.0, 9.0, 10.0); 5];
        for s in smooth_tube(&constant, 0.3, 32, 32) {
            assert!(s.iou(&constant[0]) > 1.0 - 1e-12);
        }
        assert_eq!(smooth_tube(&constant[..1], 0.3, 32, 32), constant[..1]);
    }

    #[test]
    fn outlier_is_damped() {
        for n in [8, 16, 30] {
            let mut v: Vec<f64> = (0..n).map(|t| 2.0 * t as f64).collect();
            let mid = n / 2;
            v[mid] += 10.0;
            let s = lowess(&v, 0.3);
            assert!((s[mid] - 2.0 * mid as f64).abs() < 5.0, "n={n}: {}", s[mid]);
        }
    }

    #[test]
    fn uniform_attention_gives_full_frame_tube() {
        let a = vec![Tensor::full([8, 8], 1.0 / 64.0); 4];
        let p = vec![Tensor::new([2], vec![0.25, 0.75]).unwrap(); 4];
        let tube = build_tube(&a, &p, 32, 32, &LocalizationConfig::default()).unwrap();
        assert!(tube.boxes.iter().all(|bx| *bx == b(0.0, 0.0, 32.0, 32.0)));
        assert!((tube.class_scores.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let zero = vec![Tensor::zeros([8, 8]); 2];
        assert!(matches!(
            build_tube(&zero, &p[..2], 32, 32, &LocalizationConfig::default()),
            Err(Error::EmptyTube)
        ));
    }

    #[test]
    fn pgm_header_and_payload() {
        let s = Tensor::new([2, 3], vec![0.0, 127.6, 255.0, 300.0, -4.0, 1.49]).unwrap();
        let pgm = encode_pgm(&s).unwrap();
        assert!(pgm.starts_with(b"P5\n3 2\n255\n"));
        assert_eq!(&pgm[pgm.len() - 6..], &[0, 128, 255, 255, 0, 1]);
    }
}
