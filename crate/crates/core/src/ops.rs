//! Numeric kernels shared by the autodiff graph and by direct callers.
//!
//! Forward functions validate shapes and return [`Error::Shape`] or
//! [`Error::Config`]; the `*_backward` helpers assume shapes were already
//! validated by the matching forward call.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn map_dims(t: &Tensor, op: &'static str) -> Result<(usize, usize, usize)> {
    match *t.shape() {
        [h, w, c] => Ok((h, w, c)),
        [h, w] => Ok((h, w, 1)),
        ref s => Err(Error::shape(op, format!("expected an H×W×C map, got {s:?}"))),
    }
}

fn check_conv(input: &Tensor, kernel: &Tensor, bias: Option<&Tensor>) -> Result<(usize, usize, usize, usize, usize)> {
    let (h, w, cin) = map_dims(input, "conv2d")?;
    let &[kh, kw, kc, cout] = kernel.shape() else {
        return Err(Error::shape(
            "conv2d",
            format!("kernel must be k×k×Cin×Cout, got {:?}", kernel.shape()),
        ));
    };
    if kh != kw || kh % 2 == 0 {
        return Err(Error::Config(format!(
            "conv2d kernels must be square with odd size, got {kh}×{kw}"
        )));
    }
    if kc != cin {
        return Err(Error::shape(
            "conv2d",
            format!("input has {cin} channels, kernel expects {kc}"),
        ));
    }
    if let Some(b) = bias {
        if b.shape() != [cout] {
            return Err(Error::shape(
                "conv2d",
                format!("bias {:?} for {cout} output channels", b.shape()),
            ));
        }
    }
    Ok((h, w, cin, kh, cout))
}

/// Same-padded 2-d convolution (cross-correlation) of an `H×W×Cin` map with
/// a `k×k×Cin×Cout` kernel.
pub fn conv2d(input: &Tensor, kernel: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
    let (h, w, cin, k, cout) = check_conv(input, kernel, bias)?;
    let pad = (k / 2) as isize;
    let x = input.data();
    let kd = kernel.data();
    let mut out = vec![0.0; h * w * cout];
    if let Some(b) = bias {
        for px in out.chunks_exact_mut(cout) {
            px.copy_from_slice(b.data());
        }
    }
    for i in 0..h {
        for j in 0..w {
            let o = &mut out[(i * w + j) * cout..(i * w + j + 1) * cout];
            for di in 0..k {
                let si = i as isize + di as isize - pad;
                if si < 0 || si >= h as isize {
                    continue;
                }
                for dj in 0..k {
                    let sj = j as isize + dj as isize - pad;
                    if sj < 0 || sj >= w as isize {
                        continue;
                    }
                    let xs = &x[(si as usize * w + sj as usize) * cin..][..cin];
                    let kbase = (di * k + dj) * cin * cout;
                    for (ci, &xv) in xs.iter().enumerate() {
                        if xv == 0.0 {
                            continue;
                        }
                        let krow = &kd[kbase + ci * cout..][..cout];
                        for (ov, &kv) in o.iter_mut().zip(krow) {
                            *ov += xv * kv;
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![h, w, cout], out)
}

/// Accumulates the input, kernel and bias gradients of [`conv2d`].
pub fn conv2d_backward(
    input: &Tensor,
    kernel: &Tensor,
    grad_out: &Tensor,
    mut grad_input: Option<&mut [f64]>,
    mut grad_kernel: Option<&mut [f64]>,
    grad_bias: Option<&mut [f64]>,
) {
    let (h, w, cin) = map_dims(input, "conv2d").expect("validated in forward");
    let k = kernel.shape()[0];
    let cout = kernel.shape()[3];
    let pad = (k / 2) as isize;
    let x = input.data();
    let kd = kernel.data();
    let go = grad_out.data();
    if let Some(gb) = grad_bias {
        for g in go.chunks_exact(cout) {
            for (b, &v) in gb.iter_mut().zip(g) {
                *b += v;
            }
        }
    }
    for i in 0..h {
        for j in 0..w {
            let g = &go[(i * w + j) * cout..][..cout];
            for di in 0..k {
                let si = i as isize + di as isize - pad;
                if si < 0 || si >= h as isize {
                    continue;
                }
                for dj in 0..k {
                    let sj = j as isize + dj as isize - pad;
                    if sj < 0 || sj >= w as isize {
                        continue;
                    }
                    let xoff = (si as usize * w + sj as usize) * cin;
                    let kbase = (di * k + dj) * cin * cout;
                    for ci in 0..cin {
                        let krange = kbase + ci * cout..kbase + (ci + 1) * cout;
                        if let Some(gi) = grad_input.as_deref_mut() {
                            let krow = &kd[krange.clone()];
                            gi[xoff + ci] += krow.iter().zip(g).map(|(a, b)| a * b).sum::<f64>();
                        }
                        if let Some(gk) = grad_kernel.as_deref_mut() {
                            let xv = x[xoff + ci];
                            if xv != 0.0 {
                                for (kv, &gv) in gk[krange].iter_mut().zip(g) {
                                    *kv += xv * gv;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Affine map `x·W + b` of a `D` vector by a `D×E` matrix.
pub fn dense(input: &Tensor, weights: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
    let &[d, e] = weights.shape() else {
        return Err(Error::shape("dense", format!("weights must be D×E, got {:?}", weights.shape())));
    };
    if input.len() != d || input.ndim() != 1 {
        return Err(Error::shape(
            "dense",
            format!("input {:?} against weights {:?}", input.shape(), weights.shape()),
        ));
    }
    if let Some(b) = bias {
        if b.shape() != [e] {
            return Err(Error::shape("dense", format!("bias {:?} for {e} outputs", b.shape())));
        }
    }
    let mut out = match bias {
        Some(b) => b.data().to_vec(),
        None => vec![0.0; e],
    };
    let wd = weights.data();
    for (r, &xv) in input.data().iter().enumerate() {
        if xv == 0.0 {
            continue;
        }
        for (o, &wv) in out.iter_mut().zip(&wd[r * e..(r + 1) * e]) {
            *o += xv * wv;
        }
    }
    Tensor::new(vec![e], out)
}

pub fn dense_backward(
    input: &Tensor,
    weights: &Tensor,
    grad_out: &Tensor,
    grad_input: Option<&mut [f64]>,
    grad_weights: Option<&mut [f64]>,
    grad_bias: Option<&mut [f64]>,
) {
    let e = weights.shape()[1];
    let g = grad_out.data();
    let wd = weights.data();
    if let Some(gb) = grad_bias {
        for (b, &v) in gb.iter_mut().zip(g) {
            *b += v;
        }
    }
    if let Some(gi) = grad_input {
        for (r, gv) in gi.iter_mut().enumerate() {
            *gv += wd[r * e..(r + 1) * e].iter().zip(g).map(|(a, b)| a * b).sum::<f64>();
        }
    }
    if let Some(gw) = grad_weights {
        for (r, &xv) in input.data().iter().enumerate() {
            if xv == 0.0 {
                continue;
            }
            for (wv, &gv) in gw[r * e..(r + 1) * e].iter_mut().zip(g) {
                *wv += xv * gv;
            }
        }
    }
}

/// Softmax over every entry of the tensor, computed with max subtraction.
/// For an `N×N` score map this is the normalized spatial attention map.
pub fn softmax_all(z: &Tensor) -> Tensor {
    let m = z.max();
    let mut out = z.map(|v| (v - m).exp());
    let s = out.sum();
    out.scale_assign(1.0 / s);
    out
}

/// Softmax over all `N×N` positions of a 2-d score map.
pub fn spatial_softmax(z: &Tensor) -> Result<Tensor> {
    if z.ndim() != 2 && !(z.ndim() == 3 && z.channels() == 1) {
        return Err(Error::shape(
            "spatial_softmax",
            format!("expected an N×N score map, got {:?}", z.shape()),
        ));
    }
    Ok(softmax_all(z))
}

pub fn softmax_backward(y: &Tensor, grad_out: &Tensor, grad_in: &mut [f64]) {
    let dot: f64 = y.data().iter().zip(grad_out.data()).map(|(a, b)| a * b).sum();
    for ((gi, &yv), &gv) in grad_in.iter_mut().zip(y.data()).zip(grad_out.data()) {
        *gi += yv * (gv - dot);
    }
}

/// 2×2 max-pooling with stride 2; extents must be even.
pub fn max_pool2(input: &Tensor) -> Result<(Tensor, Vec<usize>)> {
    let (h, w, c) = map_dims(input, "max_pool2")?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::Config(format!("max_pool2 needs even extents, got {h}×{w}")));
    }
    let (oh, ow) = (h / 2, w / 2);
    let x = input.data();
    let mut out = vec![0.0; oh * ow * c];
    let mut arg = vec![0usize; oh * ow * c];
    for i in 0..oh {
        for j in 0..ow {
            for ch in 0..c {
                let mut best = f64::NEG_INFINITY;
                let mut at = 0;
                for (di, dj) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                    let idx = ((2 * i + di) * w + 2 * j + dj) * c + ch;
                    if x[idx] > best {
                        best = x[idx];
                        at = idx;
                    }
                }
                out[(i * ow + j) * c + ch] = best;
                arg[(i * ow + j) * c + ch] = at;
            }
        }
    }
    Ok((Tensor::new(vec![oh, ow, c], out)?, arg))
}

/// `out(i,j,c) = a(i,j) · x(i,j,c)`; the attention weighting of a feature map.
pub fn scale_channels(a: &Tensor, x: &Tensor) -> Result<Tensor> {
    let (h, w, c) = map_dims(x, "apply_attention")?;
    let (ah, aw, ac) = map_dims(a, "apply_attention")?;
    if (ah, aw, ac) != (h, w, 1) {
        return Err(Error::shape(
            "apply_attention",
            format!("attention {:?} against map {:?}", a.shape(), x.shape()),
        ));
    }
    let mut out = x.data().to_vec();
    for (px, &av) in out.chunks_exact_mut(c).zip(a.data()) {
        px.iter_mut().for_each(|v| *v *= av);
    }
    Tensor::new(x.shape().to_vec(), out)
}

/// Attention-weighted expectation over regions: `Σ_r a_r · x_r`.
pub fn weighted_pool(a: &Tensor, x: &Tensor) -> Result<Tensor> {
    let (h, w, c) = map_dims(x, "weighted_pool")?;
    if a.len() != h * w {
        return Err(Error::shape(
            "weighted_pool",
            format!("{} weights for {} regions", a.len(), h * w),
        ));
    }
    let mut out = vec![0.0; c];
    for (px, &av) in x.data().chunks_exact(c).zip(a.data()) {
        for (o, &v) in out.iter_mut().zip(px) {
            *o += av * v;
        }
    }
    Tensor::new(vec![c], out)
}

/// Adds a per-channel vector to every position of a channels-last map.
pub fn add_channel_vector(x: &Tensor, v: &Tensor) -> Result<Tensor> {
    let (_, _, c) = map_dims(x, "add_channel_vector")?;
    if v.shape() != [c] {
        return Err(Error::shape(
            "add_channel_vector",
            format!("vector {:?} against map {:?}", v.shape(), x.shape()),
        ));
    }
    let mut out = x.data().to_vec();
    for px in out.chunks_exact_mut(c) {
        for (o, &b) in px.iter_mut().zip(v.data()) {
            *o += b;
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}

/// Copies `len` channels starting at `start` from the last axis.
pub fn slice_channels(x: &Tensor, start: usize, len: usize) -> Result<Tensor> {
    let c = x.channels();
    if start + len > c || len == 0 {
        return Err(Error::shape(
            "slice_channels",
            format!("[{start}, {}) out of {c} channels", start + len),
        ));
    }
    let mut shape = x.shape().to_vec();
    *shape.last_mut().unwrap() = len;
    let out = x
        .data()
        .chunks_exact(c)
        .flat_map(|px| px[start..start + len].iter().copied())
        .collect();
    Tensor::new(shape, out)
}

pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_by_one_kernel_scales() {
        let x = Tensor::ones([3, 3, 1]);
        let k = Tensor::full([1, 1, 1, 1], 2.0);
        let y = conv2d(&x, &k, Some(&Tensor::zeros([1]))).unwrap();
        assert_eq!(y.data(), &[2.0; 9]);
    }

    #[test]
    fn all_ones_window_counts_valid_neighbours() {
        let x = Tensor::ones([3, 3, 1]);
        let k = Tensor::ones([3, 3, 1, 1]);
        let y = conv2d(&x, &k, None).unwrap();
        assert_eq!(y.data(), &[4.0, 6.0, 4.0, 6.0, 9.0, 6.0, 4.0, 6.0, 4.0]);
    }

    #[test]
    fn centered_one_hot_kernel_is_identity() {
        let x = Tensor::from_fn([5, 4, 1], |i| (i as f64 * 0.37).cos());
        let mut k = Tensor::zeros([3, 3, 1, 1]);
        k.set(&[1, 1, 0, 0], 1.0);
        assert_eq!(conv2d(&x, &k, None).unwrap(), x);
    }

    #[test]
    fn conv_rejects_bad_kernels() {
        let x = Tensor::ones([4, 4, 2]);
        assert!(matches!(
            conv2d(&x, &Tensor::ones([2, 2, 2, 1]), None),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            conv2d(&x, &Tensor::ones([3, 3, 3, 1]), None),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn dense_identity_and_bias() {
        let x = Tensor::new([3], vec![1.0, -2.0, 0.5]).unwrap();
        let eye = Tensor::from_fn([3, 3], |i| if i % 4 == 0 { 1.0 } else { 0.0 });
        assert_eq!(dense(&x, &eye, Some(&Tensor::zeros([3]))).unwrap(), x);
        let b = Tensor::new([2], vec![0.3, -0.7]).unwrap();
        assert_eq!(dense(&x, &Tensor::zeros([3, 2]), Some(&b)).unwrap(), b);
        assert!(dense(&x, &Tensor::zeros([2, 2]), None).is_err());
    }

    #[test]
    fn spatial_softmax_hand_values() {
        let z = Tensor::new([2, 2], vec![1f64.ln(), 1f64.ln(), 2f64.ln(), 4f64.ln()]).unwrap();
        let a = spatial_softmax(&z).unwrap();
        for (got, want) in a.data().iter().zip([0.125, 0.125, 0.25, 0.5]) {
            assert!((got - want).abs() < 1e-15);
        }
    }

    #[test]
    fn spatial_softmax_constant_and_shift() {
        let c = Tensor::full([4, 4], 3.7);
        let a = spatial_softmax(&c).unwrap();
        assert!(a.data().iter().all(|&v| (v - 1.0 / 16.0).abs() < 1e-15));
        let z = Tensor::from_fn([3, 3], |i| (i as f64).sin() * 4.0);
        let shifted = z.map(|v| v + 123.0);
        let (a, b) = (spatial_softmax(&z).unwrap(), spatial_softmax(&shifted).unwrap());
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() < 1e-14);
        }
    }

    #[test]
    fn pool_and_attend_agree() {
        let x = Tensor::from_fn([2, 2, 3], |i| i as f64);
        let a = Tensor::new([2, 2], vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        let attended = scale_channels(&a, &x).unwrap();
        let pooled = weighted_pool(&a, &x).unwrap();
        for c in 0..3 {
            let s: f64 = (0..4).map(|r| attended.data()[r * 3 + c]).sum();
            assert!((s - pooled.data()[c]).abs() < 1e-12);
        }
    }

    #[test]
    fn max_pool_picks_block_maxima() {
        let x = Tensor::from_fn([4, 4, 1], |i| ((i * 7) % 11) as f64);
        let (y, _) = max_pool2(&x).unwrap();
        assert_eq!(y.shape(), &[2, 2, 1]);
        assert_eq!(y.data(), &[7.0, 10.0, 8.0, 10.0]);
    }
}
