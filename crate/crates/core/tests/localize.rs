use std::collections::BTreeMap;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use videolstm::data::{generate_clip, GlyphSpec, MotionProgram};
use videolstm::eval::{self, Detection, GroundTruth};
use videolstm::geometry::BoundingBox;
use videolstm::localize::{self, LocalizationConfig};
use videolstm::Tensor;

/// Components by explicit-stack flood fill, as sorted corner tuples.
fn flood_fill_boxes(mask: &[bool], h: usize, w: usize) -> Vec<[usize; 4]> {
    let mut seen = vec![false; h * w];
    let mut out = Vec::new();
    for start in 0..h * w {
        if !mask[start] || seen[start] {
            continue;
        }
        let mut b = [usize::MAX, usize::MAX, 0, 0];
        let mut stack = vec![start];
        seen[start] = true;
        while let Some(i) = stack.pop() {
            let (y, x) = (i / w, i % w);
            b = [b[0].min(x), b[1].min(y), b[2].max(x + 1), b[3].max(y + 1)];
            for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    let (ny, nx) = (y as i64 + dy, x as i64 + dx);
                    if ny < 0 || nx < 0 || ny >= h as i64 || nx >= w as i64 {
                        continue;
                    }
                    let j = ny as usize * w + nx as usize;
                    if mask[j] && !seen[j] {
                        seen[j] = true;
                        stack.push(j);
                    }
                }
            }
        }
        out.push(b);
    }
    out.sort();
    out
}

fn corners(b: &BoundingBox) -> [usize; 4] {
    [b.x0 as usize, b.y0 as usize, b.x1 as usize, b.y1 as usize]
}

fn mask_strategy() -> impl Strategy<Value = (usize, usize, Vec<bool>)> {
    (1usize..12, 1usize..12, 0.05f64..0.8).prop_flat_map(|(h, w, p)| {
        (Just(h), Just(w), prop::collection::vec(prop::bool::weighted(p), h * w))
    })
}

fn box_strategy() -> impl Strategy<Value = BoundingBox> {
    (0.0f64..20.0, 0.0f64..20.0, 0.5f64..10.0, 0.5f64..10.0)
        .prop_map(|(x, y, w, h)| BoundingBox::new(x, y, x + w, y + h).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn components_match_flood_fill((h, w, mask) in mask_strategy()) {
        let s = Tensor::from_fn([h, w], |i| if mask[i] { 200.0 } else { 0.0 });
        let mut got: Vec<[usize; 4]> = localize::extract_boxes(&s, 100.0).unwrap().iter().map(corners).collect();
        got.sort();
        prop_assert_eq!(got, flood_fill_boxes(&mask, h, w));
    }

    #[test]
    fn iou_is_symmetric_and_reflexive(a in box_strategy(), b in box_strategy()) {
        prop_assert_eq!(a.iou(&b), b.iou(&a));
        prop_assert_eq!(a.iou(&a), 1.0);
        prop_assert!((0.0..=1.0).contains(&a.iou(&b)));
    }

    #[test]
    fn selection_ignores_candidate_order(
        mut boxes in prop::collection::vec(box_strategy(), 1..8),
        prev in prop::option::of(box_strategy()),
        rotate in 0usize..8,
    ) {
        let before = localize::select_box(&boxes, prev.as_ref());
        let len = boxes.len();
        boxes.rotate_left(rotate % len);
        boxes.reverse();
        prop_assert_eq!(localize::select_box(&boxes, prev.as_ref()), before);
    }

    #[test]
    fn smoothing_keeps_lines_and_bounds(
        x0 in 6.0f64..10.0, vx in -0.25f64..0.25, size in 3.0f64..6.0, n in 2usize..20,
        jitter in prop::collection::vec(-3.0f64..3.0, 20),
    ) {
        let line: Vec<BoundingBox> = (0..n)
            .map(|t| {
                let x = x0 + vx * t as f64;
                BoundingBox::new(x, 4.0, x + size, 4.0 + size).unwrap()
            })
            .collect();
        let smoothed = localize::smooth_tube(&line, 0.3, 32, 32);
        for (a, b) in smoothed.iter().zip(&line) {
            prop_assert!((a.x0 - b.x0).abs() < 1e-9 && (a.x1 - b.x1).abs() < 1e-9);
            prop_assert!((a.y0 - b.y0).abs() < 1e-9 && (a.y1 - b.y1).abs() < 1e-9);
        }
        let noisy: Vec<BoundingBox> = line
            .iter()
            .zip(&jitter)
            .map(|(b, j)| {
                let (cx, cy) = b.center();
                BoundingBox::from_center_clamped(cx + 8.0 * j, cy - 4.0 * j, size, size, 16, 16)
            })
            .collect();
        prop_assert!(localize::smooth_tube(&noisy, 0.3, 16, 16).iter().all(|b| b.within(16, 16)));
    }

    #[test]
    fn recall_is_non_increasing(ious in prop::collection::vec(0.0f64..1.0, 1..10)) {
        // Each video's tube is a shifted copy of its ground truth box.
        let gt = BoundingBox::new(0.0, 0.0, 10.0, 10.0).unwrap();
        let mut gts = BTreeMap::new();
        let mut dets = Vec::new();
        for (v, &target) in ious.iter().enumerate() {
            // Overlap 10·(10−s) over union 10·(10+s): solve for the shift.
            let shift = 10.0 * (1.0 - target) / (1.0 + target);
            gts.insert(v, GroundTruth { label: 0, boxes: vec![Some(gt)] });
            let b = BoundingBox::new(shift, 0.0, shift + 10.0, 10.0).unwrap();
            dets.push(Detection { video: v, boxes: vec![Some(b)], class_scores: vec![1.0] });
        }
        let thresholds: Vec<f64> = (0..=20).map(|i| i as f64 / 20.0).collect();
        let curve = eval::recall_at_iou(&dets, &gts, &thresholds);
        prop_assert!(curve.windows(2).all(|w| w[1].1 <= w[0].1));
    }

    #[test]
    fn ap_ignores_input_order_within_ties(
        labels in prop::collection::vec(0usize..2, 2..8),
        scores in prop::collection::vec(prop::sample::select(vec![0.2, 0.5, 0.9]), 8),
        hits in prop::collection::vec(any::<bool>(), 8),
        rotate in 0usize..8,
    ) {
        let gt = BoundingBox::new(0.0, 0.0, 4.0, 4.0).unwrap();
        let miss = BoundingBox::new(10.0, 10.0, 14.0, 14.0).unwrap();
        let gts: BTreeMap<usize, GroundTruth> = labels
            .iter()
            .enumerate()
            .map(|(v, &l)| (v, GroundTruth { label: l, boxes: vec![Some(gt)] }))
            .collect();
        let mut dets: Vec<Detection> = (0..labels.len())
            .map(|v| Detection {
                video: v,
                boxes: vec![Some(if hits[v] { gt } else { miss })],
                class_scores: vec![scores[v], 1.0 - scores[v]],
            })
            .collect();
        let before: Vec<Option<f64>> = (0..2).map(|c| eval::average_precision(&dets, &gts, c, 0.5)).collect();
        let len = dets.len();
        dets.rotate_left(rotate % len);
        dets.reverse();
        let after: Vec<Option<f64>> = (0..2).map(|c| eval::average_precision(&dets, &gts, c, 0.5)).collect();
        prop_assert_eq!(&before, &after);

        let defined: Vec<f64> = before.iter().flatten().copied().collect();
        let map = eval::mean_average_precision(&dets, &gts, 2, 0.5).unwrap();
        prop_assert!((map - defined.iter().sum::<f64>() / defined.len() as f64).abs() < 1e-15);
    }
}

/// Attention concentrated on the grid cell holding the glyph center yields a
/// tube that tracks the glyph. Scored per clip: a one-hot cell can sit up to
/// two pixels off the glyph center on each axis, which alone caps a single
/// frame's IoU below 0.5 for every glyph size the generator draws.
#[test]
fn oracle_attention_tracks_the_glyph() {
    let (frames, size, grid) = (16, 32, 8);
    let cell = (size / grid) as f64;
    for (label, motion) in MotionProgram::ALL.iter().enumerate().take(5) {
        for seed in 0..4u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed * 10 + label as u64);
            let spec = GlyphSpec::random(*motion, size, 0, 0.0, &mut rng);
            let clip = generate_clip(&spec, frames, size, size, 1, &mut rng).unwrap();
            let attention: Vec<Tensor> = clip
                .gt_boxes
                .iter()
                .map(|b| {
                    let (cx, cy) = b.unwrap().center();
                    let (i, j) = ((cy / cell) as usize, (cx / cell) as usize);
                    Tensor::from_fn([grid, grid], |k| if k == i * grid + j { 1.0 } else { 0.0 })
                })
                .collect();
            let probs = vec![Tensor::full([6], 1.0 / 6.0); frames];
            let tube = localize::build_tube(&attention, &probs, size, size, &LocalizationConfig::default()).unwrap();
            let boxes: Vec<Option<BoundingBox>> = tube.boxes.iter().copied().map(Some).collect();
            let iou = eval::tube_iou(&boxes, &clip.gt_boxes);
            assert!(iou >= 0.5, "{} seed {seed}: tube IoU {iou:.3}", motion.name());
            assert!((tube.class_scores.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}
