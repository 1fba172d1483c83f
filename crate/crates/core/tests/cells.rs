use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use videolstm::cells::{self, CellDims, CellState, ConvCellParams, LstmGates, MlpAttention, VectorCellParams};
use videolstm::params::{self, ParamTree};
use videolstm::{Graph, Tensor};

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-1.0..1.0))
}

fn randomize<T: ParamTree<Tensor>>(p: &mut T, rng: &mut ChaCha8Rng) {
    p.visit_mut("", &mut |_, t| t.data_mut().iter_mut().for_each(|v| *v = rng.random_range(-1.0..1.0)));
}

fn reshaped(t: &Tensor, shape: &[usize]) -> Tensor {
    t.clone().reshape(shape).unwrap()
}

/// The vector cell whose weights are the 1×1 kernels of `conv`.
fn as_vector(conv: &ConvCellParams, d: usize, k: usize) -> VectorCellParams {
    let att = conv.attention.as_ref().unwrap();
    VectorCellParams {
        gates: LstmGates {
            w_x: reshaped(&conv.gates.w_x, &[d, 4 * k]),
            w_h: reshaped(&conv.gates.w_h, &[k, 4 * k]),
            bias: conv.gates.bias.clone(),
        },
        attention: Some(MlpAttention {
            w_xa: att.w_xa.clone(),
            w_ha: reshaped(&att.w_ha, &[k, k]),
            b_a: att.b_a.clone(),
            w_z: att.w_z.clone(),
        }),
    }
}

fn max_diff(a: &Tensor, b: &Tensor) -> f64 {
    assert_eq!(a.len(), b.len());
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn conv_attention_is_a_distribution(seed in any::<u64>(), n in 1usize..6, c in 1usize..5, k in 1usize..5, a in prop::sample::select(vec![1usize, 3])) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dims = CellDims { input: c, hidden: k, state_kernel: 3, attention_kernel: a };
        let mut p = ConvCellParams::init(dims, true, &mut rng).unwrap();
        randomize(&mut p, &mut rng);
        let mut g = Graph::new();
        let bound = params::bind(&p, &mut g);
        let x = g.constant(random(&[n, n, c], &mut rng));
        let h = g.constant(random(&[n, n, k], &mut rng));
        let att = cells::conv_attention(&mut g, x, h, bound.attention.as_ref().unwrap()).unwrap();
        let map = g.value(att.map);
        prop_assert_eq!(map.shape(), &[n, n]);
        prop_assert!(map.data().iter().all(|&v| v >= 0.0));
        prop_assert!((map.sum() - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn alstm_attention_is_a_distribution(seed in any::<u64>(), n in 1usize..6, d in 1usize..5, k in 1usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dims = CellDims { input: d, hidden: k, state_kernel: 1, attention_kernel: 1 };
        let mut p = VectorCellParams::init(dims, true, &mut rng).unwrap();
        randomize(&mut p, &mut rng);
        let mut g = Graph::new();
        let bound = params::bind(&p, &mut g);
        let x = g.constant(random(&[n, n, d], &mut rng));
        let h = g.constant(random(&[k], &mut rng));
        let att = cells::alstm_attention(&mut g, x, h, bound.attention.as_ref().unwrap()).unwrap();
        let map = g.value(att.map);
        prop_assert!(map.data().iter().all(|&v| v >= 0.0));
        prop_assert!((map.sum() - 1.0).abs() <= 1e-12);
    }

    /// With one region and 1×1 kernels, every cell collapses to the vector
    /// LSTM.
    #[test]
    fn single_region_cells_match_the_vector_lstm(seed in any::<u64>(), d in 1usize..5, k in 1usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dims = CellDims { input: d, hidden: k, state_kernel: 1, attention_kernel: 1 };
        let mut conv = ConvCellParams::init(dims, true, &mut rng).unwrap();
        randomize(&mut conv, &mut rng);
        let vector = as_vector(&conv, d, k);

        let mut g = Graph::new();
        let cp = params::bind(&conv, &mut g);
        let vp = params::bind(&vector, &mut g);
        let h0 = random(&[k], &mut rng);
        let c0 = random(&[k], &mut rng);
        let map_state = |g: &mut Graph| CellState {
            h: g.constant(reshaped(&h0, &[1, 1, k])),
            c: g.constant(reshaped(&c0, &[1, 1, k])),
        };
        let (mut s_lstm, mut s_alstm) = (
            CellState { h: g.constant(h0.clone()), c: g.constant(c0.clone()) },
            CellState { h: g.constant(h0.clone()), c: g.constant(c0.clone()) },
        );
        let (mut s_conv, mut s_calstm) = (map_state(&mut g), map_state(&mut g));
        for _ in 0..3 {
            let x = random(&[d], &mut rng);
            let xv = g.constant(x.clone());
            let xm = g.constant(reshaped(&x, &[1, 1, d]));
            s_lstm = cells::lstm_step(&mut g, xv, &s_lstm, &vp.gates).unwrap();
            s_alstm = cells::alstm_step(&mut g, xm, &s_alstm, &vp).unwrap().0;
            s_conv = cells::conv_lstm_step(&mut g, xm, &s_conv, &cp.gates).unwrap();
            s_calstm = cells::conv_alstm_step(&mut g, xm, &s_calstm, &cp).unwrap().0;
            for other in [&s_alstm, &s_conv, &s_calstm] {
                prop_assert!(max_diff(g.value(s_lstm.h), g.value(other.h)) <= 1e-12);
                prop_assert!(max_diff(g.value(s_lstm.c), g.value(other.c)) <= 1e-12);
            }
        }
    }

    #[test]
    fn conv_states_keep_their_shape(seed in any::<u64>(), n in 1usize..5, steps in 1usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dims = CellDims { input: 2, hidden: 3, state_kernel: 3, attention_kernel: 3 };
        let p = ConvCellParams::init(dims, true, &mut rng).unwrap();
        let mut g = Graph::new();
        let bound = params::bind(&p, &mut g);
        let mut state = CellState::zeros(&mut g, &[n, n, 3]);
        for _ in 0..steps {
            let x = g.constant(random(&[n, n, 2], &mut rng));
            state = cells::conv_alstm_step(&mut g, x, &state, &bound).unwrap().0;
            prop_assert_eq!(g.value(state.h).shape(), &[n, n, 3]);
            prop_assert_eq!(g.value(state.c).shape(), &[n, n, 3]);
        }
    }
}
