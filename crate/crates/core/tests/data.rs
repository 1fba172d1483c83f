use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use videolstm::data::{
    self, block_matching_flow, encode_clip, flow_to_image, generate_clip, image_to_flow, quantize_flow_image,
    GlyphSpec, MotionProgram, ShapeKind, VideoClip, FLOW_RANGE,
};
use videolstm::Tensor;

fn spec(motion: MotionProgram, shape: ShapeKind, size: usize, speed: usize) -> GlyphSpec {
    GlyphSpec {
        shape,
        size,
        intensity: 0.8,
        motion,
        speed,
        clutter: 0,
        noise: 0.0,
    }
}

fn shapes() -> impl Strategy<Value = ShapeKind> {
    prop_oneof![Just(ShapeKind::Square), Just(ShapeKind::Disk), Just(ShapeKind::Diamond)]
}

/// Closed-form reflection of `x0 + v·t` inside `[0, limit]`.
fn triangle_wave(x0: f64, v: f64, t: usize, limit: f64) -> f64 {
    if limit == 0.0 {
        return 0.0;
    }
    let period = 2.0 * limit;
    let p = (x0 + v * t as f64).rem_euclid(period);
    if p > limit {
        period - p
    } else {
        p
    }
}

/// Bilinear sample of channel 0 at continuous pixel-center coordinates.
fn bilinear(frame: &Tensor, x: f64, y: f64) -> Option<f64> {
    let (h, w) = (frame.shape()[0], frame.shape()[1]);
    let (fx, fy) = (x - 0.5, y - 0.5);
    let (x0, y0) = (fx.floor(), fy.floor());
    if x0 < 0.0 || y0 < 0.0 || x0 + 1.0 > (w - 1) as f64 || y0 + 1.0 > (h - 1) as f64 {
        return None;
    }
    let (ax, ay) = (fx - x0, fy - y0);
    let (x0, y0) = (x0 as usize, y0 as usize);
    let at = |yy: usize, xx: usize| frame.get(&[yy, xx, 0]);
    Some(
        (1.0 - ay) * ((1.0 - ax) * at(y0, x0) + ax * at(y0, x0 + 1))
            + ay * ((1.0 - ax) * at(y0 + 1, x0) + ax * at(y0 + 1, x0 + 1)),
    )
}

fn support(frame: &Tensor) -> Vec<bool> {
    frame.data().iter().map(|&v| v > 0.0).collect()
}

/// Pixels whose 3×3 neighbourhood lies in the support.
fn interior(mask: &[bool], h: usize, w: usize, y: usize, x: usize) -> bool {
    (y.saturating_sub(1)..=(y + 1).min(h - 1)).all(|yy| (x.saturating_sub(1)..=(x + 1).min(w - 1)).all(|xx| mask[yy * w + xx]))
        && y > 0
        && x > 0
        && y + 1 < h
        && x + 1 < w
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn box_centers_follow_the_programmed_trajectory(
        class in 0usize..6, shape in shapes(), size in 4usize..11, speed in 1usize..4, seed in any::<u64>()
    ) {
        let motion = MotionProgram::from_label(class).unwrap();
        let s = spec(motion, shape, size, speed);
        let clip = generate_clip(&s, 16, 32, 32, 1, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let traj = s.trajectory(16, 32, 32, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        for (b, &(cx, cy)) in clip.gt_boxes.iter().zip(&traj.centers) {
            let b = b.expect("glyph is always inside the frame");
            prop_assert!(b.within(32, 32));
            let (bx, by) = b.center();
            prop_assert!((bx - cx).abs() <= 0.5 + 1e-9 && (by - cy).abs() <= 0.5 + 1e-9);
        }
    }

    #[test]
    fn boxes_bound_the_rendered_glyph(
        class in 0usize..6, shape in shapes(), size in 4usize..11, speed in 1usize..4, seed in any::<u64>()
    ) {
        let s = spec(MotionProgram::from_label(class).unwrap(), shape, size, speed);
        let clip = generate_clip(&s, 12, 32, 32, 1, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        for (frame, b) in clip.frames.iter().zip(&clip.gt_boxes) {
            let b = b.unwrap();
            let (mut lo, mut hi) = ([usize::MAX; 2], [0usize; 2]);
            for (i, _) in support(frame).iter().enumerate().filter(|(_, &on)| on) {
                let (y, x) = (i / 32, i % 32);
                lo = [lo[0].min(x), lo[1].min(y)];
                hi = [hi[0].max(x + 1), hi[1].max(y + 1)];
            }
            prop_assert!(b.x0 <= lo[0] as f64 && b.y0 <= lo[1] as f64);
            prop_assert!(b.x1 >= hi[0] as f64 && b.y1 >= hi[1] as f64);
            prop_assert!(b.x0 + 1.0 >= lo[0] as f64 && b.y0 + 1.0 >= lo[1] as f64);
            prop_assert!(b.x1 <= hi[0] as f64 + 1.0 && b.y1 <= hi[1] as f64 + 1.0);
        }
    }

    #[test]
    fn bounces_match_the_closed_form_reflection(
        class in 0usize..3, size in 4usize..11, speed in 1usize..4, seed in any::<u64>()
    ) {
        let s = spec(MotionProgram::from_label(class).unwrap(), ShapeKind::Square, size, speed);
        let traj = s.trajectory(20, 32, 32, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let limit = (32 - size) as f64;
        let half = size as f64 / 2.0;
        let (x0, y0) = (traj.centers[0].0 - half, traj.centers[0].1 - half);
        let fits = |axis: usize, start: f64, moving: bool| {
            let speeds: Vec<f64> = if moving { vec![speed as f64, -(speed as f64)] } else { vec![0.0] };
            speeds.iter().any(|&v| {
                traj.centers.iter().enumerate().all(|(t, c)| {
                    let pos = if axis == 0 { c.0 } else { c.1 } - half;
                    (pos - triangle_wave(start, v, t, limit)).abs() < 1e-9
                })
            })
        };
        prop_assert!(fits(0, x0, class != 1));
        prop_assert!(fits(1, y0, class != 0));
    }

    #[test]
    fn circular_motion_has_constant_speed(size in 4usize..11, speed in 1usize..4, seed in any::<u64>()) {
        let s = spec(MotionProgram::Circular, ShapeKind::Disk, size, speed);
        let traj = s.trajectory(12, 32, 32, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let steps: Vec<f64> = traj
            .centers
            .windows(2)
            .map(|w| ((w[1].0 - w[0].0).powi(2) + (w[1].1 - w[0].1).powi(2)).sqrt())
            .collect();
        prop_assert!(steps.windows(2).all(|w| (w[0] - w[1]).abs() < 1e-9));
    }

    #[test]
    fn warping_reproduces_the_next_frame(class in 0usize..5, shape in shapes(), size in 6usize..11, speed in 1usize..4, seed in any::<u64>()) {
        let s = spec(MotionProgram::from_label(class).unwrap(), shape, size, speed);
        let clip = generate_clip(&s, 10, 32, 32, 1, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        for t in 1..clip.len() {
            let (prev, cur) = (&clip.frames[t - 1], &clip.frames[t]);
            let (m0, m1) = (support(prev), support(cur));
            for y in 0..32 {
                for x in 0..32 {
                    if !interior(&m1, 32, 32, y, x) {
                        continue;
                    }
                    let (dx, dy) = (clip.flow[t].get(&[y, x, 0]), clip.flow[t].get(&[y, x, 1]));
                    let (sx, sy) = (x as f64 + 0.5 - dx, y as f64 + 0.5 - dy);
                    // Skip sources whose bilinear footprint leaves the previous glyph.
                    let (fx, fy) = ((sx - 0.5).floor() as i64, (sy - 0.5).floor() as i64);
                    let covered = (0..2).all(|a| (0..2).all(|b| {
                        let (yy, xx) = (fy + a, fx + b);
                        yy >= 0 && xx >= 0 && yy < 32 && xx < 32 && m0[yy as usize * 32 + xx as usize]
                    }));
                    if !covered {
                        continue;
                    }
                    let warped = bilinear(prev, sx, sy).unwrap();
                    prop_assert!((warped - cur.get(&[y, x, 0])).abs() <= 0.02, "t={} ({}, {})", t, x, y);
                }
            }
        }
    }

    #[test]
    fn flow_image_round_trip_is_within_one_level(v in -FLOW_RANGE..FLOW_RANGE) {
        let f = Tensor::new([1, 1, 2], vec![v, -v]).unwrap();
        let back = image_to_flow(&quantize_flow_image(&flow_to_image(&f)));
        for (a, b) in back.data().iter().zip(f.data()) {
            prop_assert!((a - b).abs() <= FLOW_RANGE / 255.0 + 1e-12);
        }
    }

    #[test]
    fn block_matching_matches_exhaustive_search(seed in any::<u64>(), block in 1usize..5, radius in 0usize..3) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // Few levels so that ties actually occur.
        let a = Tensor::from_fn([9, 10, 1], |_| rng.random_range(0..3) as f64);
        let b = Tensor::from_fn([9, 10, 1], |_| rng.random_range(0..3) as f64);
        let got = block_matching_flow(&a, &b, block, radius).unwrap();
        let (h, w) = (9i64, 10i64);
        let r = radius as i64;
        for by in (0..h).step_by(block) {
            for bx in (0..w).step_by(block) {
                let (ey, ex) = ((by + block as i64).min(h), (bx + block as i64).min(w));
                let mut candidates = Vec::new();
                for dy in -r..=r {
                    for dx in -r..=r {
                        let pixels: Vec<(i64, i64)> = (by..ey).flat_map(|y| (bx..ex).map(move |x| (y, x))).collect();
                        if pixels.iter().any(|&(y, x)| y - dy < 0 || y - dy >= h || x - dx < 0 || x - dx >= w) {
                            continue;
                        }
                        let sad: f64 = pixels
                            .iter()
                            .map(|&(y, x)| (b.get(&[y as usize, x as usize, 0]) - a.get(&[(y - dy) as usize, (x - dx) as usize, 0])).abs())
                            .sum();
                        candidates.push((sad, dx.abs() + dy.abs(), dy, dx));
                    }
                }
                candidates.sort_by(|p, q| p.partial_cmp(q).unwrap());
                let (_, _, dy, dx) = candidates[0];
                prop_assert_eq!(got.get(&[by as usize, bx as usize, 0]), dx as f64);
                prop_assert_eq!(got.get(&[by as usize, bx as usize, 1]), dy as f64);
            }
        }
    }

    #[test]
    fn generation_is_deterministic(class in 0usize..6, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = GlyphSpec::random(MotionProgram::from_label(class).unwrap(), 16, 4, 0.05, &mut rng);
        let a = generate_clip(&s, 6, 16, 16, 1, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let b = generate_clip(&s, 6, 16, 16, 1, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        prop_assert_eq!(encode_clip(&a).unwrap(), encode_clip(&b).unwrap());
        prop_assert!(a.frames.iter().all(|f| f.data().iter().all(|v| (0.0..=1.0).contains(v))));
        prop_assert!(a.flow[0].data().iter().all(|&v| v == 0.0));
    }
}

#[test]
fn shifted_frame_reports_the_shift_in_the_interior() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let a = Tensor::from_fn([16, 16, 1], |_| rng.random());
    let b = Tensor::from_fn([16, 16, 1], |i| {
        let (y, x) = (i / 16, i % 16);
        if x >= 2 {
            a.get(&[y, x - 2, 0])
        } else {
            0.0
        }
    });
    let f = block_matching_flow(&a, &b, 4, 3).unwrap();
    for y in 0..16 {
        for x in 4..16 {
            assert_eq!((f.get(&[y, x, 0]), f.get(&[y, x, 1])), (2.0, 0.0), "({x}, {y})");
        }
    }
}

fn estimator_error(clip: &VideoClip) -> (usize, f64) {
    let (h, w, _) = clip.extents();
    let mut checked = 0;
    let mut worst = 0.0f64;
    let block = 2;
    for t in 1..clip.len() {
        let est = block_matching_flow(&clip.frames[t - 1], &clip.frames[t], block, 4).unwrap();
        let mask = support(&clip.frames[t]);
        for by in (0..h).step_by(block) {
            for bx in (0..w).step_by(block) {
                let inside = (by..by + block).all(|y| (bx..bx + block).all(|x| interior(&mask, h, w, y, x)));
                if !inside {
                    continue;
                }
                for y in by..by + block {
                    for x in bx..bx + block {
                        for c in 0..2 {
                            worst = worst.max((est.get(&[y, x, c]) - clip.flow[t].get(&[y, x, c])).abs());
                        }
                    }
                }
                checked += 1;
            }
        }
    }
    (checked, worst)
}

/// Rigid programs only: a block-constant displacement cannot represent the
/// radial field of an expanding glyph.
#[test]
fn estimator_agrees_with_analytic_flow_on_glyph_interiors() {
    let mut checked = 0;
    for class in 0..4 {
        for seed in 0..6 {
            let s = spec(MotionProgram::from_label(class).unwrap(), ShapeKind::Square, 10, 2);
            let clip = generate_clip(&s, 8, 32, 32, 1, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            let (n, worst) = estimator_error(&clip);
            assert!(worst <= 1.0, "class {class} seed {seed}: error {worst}");
            checked += n;
        }
    }
    assert!(checked > 100);
}

#[test]
fn dataset_round_trips_through_disk() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = data::DatasetConfig {
        train_per_class: 1,
        test_per_class: 1,
        frames: 3,
        frame_size: 12,
        ..Default::default()
    };
    let ds = data::Dataset::generate(&cfg).unwrap();
    let manifest = ds.write(dir.path()).unwrap();
    assert_eq!(manifest.clips.len(), 12);
    assert!(dir.path().join("clips/train_00000.boxes.json").exists());
    let back = data::Dataset::load(dir.path()).unwrap();
    assert_eq!(back.train.len(), 6);
    for (a, b) in back.train.iter().zip(&ds.train) {
        assert_eq!(encode_clip(a).unwrap(), encode_clip(b).unwrap());
    }
}
