//! Reverse-mode gradients against central finite differences.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use videolstm::cells::{self, CellDims, CellState, ConvCellParams, VectorCellParams, VideoLstmParams};
use videolstm::model::{Model, ModelConfig, Variant};
use videolstm::params::{self, ParamTree};
use videolstm::{Graph, Tensor, Var};

const STEP: f64 = 1e-5;

/// Largest relative error between analytic and central-difference gradients
/// over every scalar parameter.
fn max_relative_error<T>(params: &T, loss: impl Fn(&mut Graph, &T::Mapped<Var>) -> Var) -> f64
where
    T: ParamTree<Tensor> + Clone,
    T::Mapped<Var>: ParamTree<Var>,
{
    let mut g = Graph::new();
    let bound = params::bind(params, &mut g);
    let l = loss(&mut g, &bound);
    let grads = g.backward(l).unwrap();
    let analytic: Vec<f64> = params::flatten(&bound)
        .into_iter()
        .flat_map(|(_, &v)| grads.get_or_zeros(v, &g).into_data())
        .collect();

    let eval = |p: &T| {
        let mut g = Graph::new();
        let bound = params::bind(p, &mut g);
        let l = loss(&mut g, &bound);
        g.value(l).data()[0]
    };
    let perturbed = |index: usize, delta: f64| {
        let mut p = params.clone();
        let mut offset = 0;
        p.visit_mut("", &mut |_, t| {
            if (offset..offset + t.len()).contains(&index) {
                t.data_mut()[index - offset] += delta;
            }
            offset += t.len();
        });
        p
    };

    let mut worst = 0.0f64;
    for (i, &a) in analytic.iter().enumerate() {
        let numeric = (eval(&perturbed(i, STEP)) - eval(&perturbed(i, -STEP))) / (2.0 * STEP);
        let scale = a.abs().max(numeric.abs()).max(1e-7);
        worst = worst.max((a - numeric).abs() / scale);
    }
    worst
}

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-1.0..1.0))
}

/// Perturbs every stored weight so that no gate or attention unit sits at a
/// symmetric initial point.
fn jitter<T: ParamTree<Tensor>>(p: &mut T, rng: &mut ChaCha8Rng) {
    p.visit_mut("", &mut |_, t| {
        t.data_mut().iter_mut().for_each(|v| *v += rng.random_range(-0.3..0.3));
    });
}

/// `Σ_t ⟨h_t, R_t⟩` for fixed random projections `R_t`.
fn projection_loss(g: &mut Graph, hidden: &[Var], rng_seed: u64) -> Var {
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let mut total: Option<Var> = None;
    for &h in hidden {
        let r = g.constant(random(g.value(h).shape(), &mut rng));
        let prod = g.mul(h, r).unwrap();
        let s = g.sum(prod);
        total = Some(match total {
            Some(t) => g.add(t, s).unwrap(),
            None => s,
        });
    }
    total.unwrap()
}

const N: usize = 3;
const D: usize = 4;
const K: usize = 4;
const T: usize = 3;

fn dims(input: usize) -> CellDims {
    CellDims {
        input,
        hidden: K,
        state_kernel: 3,
        attention_kernel: 3,
    }
}

fn sequence(seed: u64, channels: usize) -> Vec<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..T).map(|_| random(&[N, N, channels], &mut rng)).collect()
}

#[test]
fn lstm_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut p = VectorCellParams::init(dims(N * N * D), false, &mut rng).unwrap();
    jitter(&mut p, &mut rng);
    let xs = sequence(2, D);
    let err = max_relative_error(&p, |g, p| {
        let mut s = CellState::zeros(g, &[K]);
        let mut hs = Vec::new();
        for x in &xs {
            let x = g.constant(x.clone().reshape([N * N * D]).unwrap());
            s = cells::lstm_step(g, x, &s, &p.gates).unwrap();
            hs.push(s.h);
        }
        projection_loss(g, &hs, 3)
    });
    assert!(err < 1e-4, "max relative error {err}");
}

#[test]
fn alstm_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut p = VectorCellParams::init(dims(D), true, &mut rng).unwrap();
    jitter(&mut p, &mut rng);
    let xs = sequence(5, D);
    let err = max_relative_error(&p, |g, p| {
        let mut s = CellState::zeros(g, &[K]);
        let mut hs = Vec::new();
        for x in &xs {
            let x = g.constant(x.clone());
            s = cells::alstm_step(g, x, &s, p).unwrap().0;
            hs.push(s.h);
        }
        projection_loss(g, &hs, 6)
    });
    assert!(err < 1e-4, "max relative error {err}");
}

fn conv_cell_error(with_attention: bool, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = ConvCellParams::init(dims(D), with_attention, &mut rng).unwrap();
    jitter(&mut p, &mut rng);
    let xs = sequence(seed + 1, D);
    max_relative_error(&p, |g, p| {
        let mut s = CellState::zeros(g, &[N, N, K]);
        let mut hs = Vec::new();
        for x in &xs {
            let x = g.constant(x.clone());
            s = if with_attention {
                cells::conv_alstm_step(g, x, &s, p).unwrap().0
            } else {
                cells::conv_lstm_step(g, x, &s, &p.gates).unwrap()
            };
            hs.push(s.h);
        }
        projection_loss(g, &hs, seed + 2)
    })
}

#[test]
fn conv_lstm_gradients() {
    let err = conv_cell_error(false, 7);
    assert!(err < 1e-4, "max relative error {err}");
}

#[test]
fn conv_alstm_gradients() {
    let err = conv_cell_error(true, 10);
    assert!(err < 1e-4, "max relative error {err}");
}

#[test]
fn videolstm_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let mut p = VideoLstmParams::init(dims(D), D, &mut rng).unwrap();
    jitter(&mut p, &mut rng);
    let xs = sequence(14, D);
    let ms = sequence(15, D);
    let err = max_relative_error(&p, |g, p| {
        let mut top = CellState::zeros(g, &[N, N, K]);
        let mut bottom = CellState::zeros(g, &[N, N, K]);
        let mut hs = Vec::new();
        for (x, m) in xs.iter().zip(&ms) {
            let x = g.constant(x.clone());
            let m = g.constant(m.clone());
            let step = cells::videolstm_step(g, x, m, &top, &bottom, p).unwrap();
            top = step.top;
            bottom = step.bottom;
            hs.push(top.h);
        }
        projection_loss(g, &hs, 16)
    });
    assert!(err < 1e-4, "max relative error {err}");
}

#[test]
fn full_model_gradients_with_dropout() {
    for (i, variant) in Variant::ALL.into_iter().enumerate() {
        let config = ModelConfig {
            variant,
            frame_size: 8,
            encoder_width: 2,
            feature_channels: 2,
            hidden: 2,
            num_classes: 3,
            head_width: 3,
            dropout_rate: 0.3,
            ..ModelConfig::default()
        };
        let mut model = Model::new(config, i as u64).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(40 + i as u64);
        jitter(&mut model.params, &mut rng);
        let frames: Vec<_> = (0..2).map(|_| random(&[8, 8, 1], &mut rng)).collect();
        let flow: Vec<_> = (0..2).map(|_| random(&[8, 8, 2], &mut rng)).collect();
        let mask_seed = 99;
        let analytic = model
            .loss_and_grads(&frames, Some(&flow), 1, Some(&mut ChaCha8Rng::seed_from_u64(mask_seed)))
            .unwrap();
        let loss_at = |m: &Model| {
            m.loss_and_grads(&frames, Some(&flow), 1, Some(&mut ChaCha8Rng::seed_from_u64(mask_seed)))
                .unwrap()
                .loss
        };
        let grads: Vec<f64> = params::flatten(&analytic.grads)
            .into_iter()
            .flat_map(|(_, t)| t.data().to_vec())
            .collect();
        let mut worst = 0.0f64;
        let mut index = 0;
        let names: Vec<String> = params::flatten(&model.params).into_iter().map(|(n, _)| n).collect();
        for name in names {
            let len = params::flatten(&model.params)
                .into_iter()
                .find(|(n, _)| *n == name)
                .unwrap()
                .1
                .len();
            for j in 0..len {
                let shifted = |delta: f64| {
                    let mut m = model.clone();
                    m.params.visit_mut("", &mut |n, t| {
                        if n == name {
                            t.data_mut()[j] += delta;
                        }
                    });
                    loss_at(&m)
                };
                let numeric = (shifted(STEP) - shifted(-STEP)) / (2.0 * STEP);
                let a = grads[index];
                // Max-pooling and ReLU kinks make isolated elements
                // non-differentiable; skip where the two one-sided slopes
                // disagree.
                let fwd = (shifted(STEP) - analytic.loss) / STEP;
                let bwd = (analytic.loss - shifted(-STEP)) / STEP;
                if (fwd - bwd).abs() <= 1e-3 * fwd.abs().max(bwd.abs()).max(1e-3) {
                    // The loss is O(1), so differences below 1e-5 are at
                    // the rounding floor of the central difference.
                    let scale = a.abs().max(numeric.abs()).max(1e-5);
                    worst = worst.max((a - numeric).abs() / scale);
                }
                index += 1;
            }
        }
        assert!(worst < 1e-4, "{variant}: max relative error {worst}");
    }
}
