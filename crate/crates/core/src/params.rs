//! Named parameter blocks.
//!
//! Every block is generic over its slot type: `Block<Tensor>` holds stored
//! weights, `Block<Var>` holds the same weights bound into a [`Graph`].
//! Visiting order is fixed, which makes checkpoints, optimizer state and
//! gradient reduction line up by position.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::graph::{Gradients, Graph, Var};
use crate::tensor::Tensor;

/// Structured access to the leaves of a parameter tree.
pub trait ParamTree<P> {
    type Mapped<Q>;

    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a P));
    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut P));
    fn map<Q>(&self, f: &mut dyn FnMut(&P) -> Q) -> Self::Mapped<Q>;
}

macro_rules! param_block {
    ($(#[$meta:meta])* pub struct $name:ident { $($(#[$fmeta:meta])* $field:ident),+ $(,)? }) => {
        $(#[$meta])*
        #[derive(Clone, Debug, PartialEq)]
        pub struct $name<P = Tensor> {
            $($(#[$fmeta])* pub $field: P,)+
        }

        impl<P> ParamTree<P> for $name<P> {
            type Mapped<Q> = $name<Q>;

            fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a P)) {
                $(f(format!("{prefix}{}", stringify!($field)), &self.$field);)+
            }

            fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut P)) {
                $(f(format!("{prefix}{}", stringify!($field)), &mut self.$field);)+
            }

            fn map<Q>(&self, f: &mut dyn FnMut(&P) -> Q) -> $name<Q> {
                $name { $($field: f(&self.$field),)+ }
            }
        }
    };
}
pub(crate) use param_block;

impl<P, T: ParamTree<P>> ParamTree<P> for Option<T> {
    type Mapped<Q> = Option<T::Mapped<Q>>;

    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a P)) {
        if let Some(t) = self {
            t.visit(prefix, f);
        }
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut P)) {
        if let Some(t) = self {
            t.visit_mut(prefix, f);
        }
    }

    fn map<Q>(&self, f: &mut dyn FnMut(&P) -> Q) -> Self::Mapped<Q> {
        self.as_ref().map(|t| t.map(f))
    }
}

/// Binds every stored tensor as a trainable leaf of `graph`.
pub fn bind<T: ParamTree<Tensor>>(params: &T, graph: &mut Graph) -> T::Mapped<Var> {
    params.map(&mut |t| graph.param(t.clone()))
}

/// Collects the gradient of every bound leaf, zero-filled when unreached.
pub fn collect_grads<T: ParamTree<Var>>(bound: &T, graph: &Graph, grads: &Gradients) -> T::Mapped<Tensor> {
    bound.map(&mut |&v| grads.get_or_zeros(v, graph))
}

/// Leaves in visiting order.
pub fn flatten<P, T: ParamTree<P>>(tree: &T) -> Vec<(String, &P)> {
    let mut out = Vec::new();
    tree.visit("", &mut |name, p| out.push((name, p)));
    out
}

/// Mutable leaves in visiting order.
pub fn flatten_mut<P, T: ParamTree<P>>(tree: &mut T) -> Vec<(String, &mut P)> {
    let mut out = Vec::new();
    tree.visit_mut("", &mut |name, p| out.push((name, p)));
    out
}

pub fn count<T: ParamTree<Tensor>>(tree: &T) -> usize {
    flatten(tree).iter().map(|(_, t)| t.len()).sum()
}

/// Uniform Glorot initialization in ±√(6/(fan_in+fan_out)).
pub fn glorot(shape: &[usize], fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-limit..limit))
}

/// Kernel `k×k×cin×cout` with convolutional fan-in/fan-out.
pub fn conv_kernel(k: usize, cin: usize, cout: usize, rng: &mut ChaCha8Rng) -> Tensor {
    glorot(&[k, k, cin, cout], k * k * cin, k * k * cout, rng)
}

pub fn matrix(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor {
    glorot(&[rows, cols], rows, cols, rng)
}

/// Fused gate bias `[i, f, o, c]` with the forget block at 1.
pub fn gate_bias(k: usize) -> Tensor {
    Tensor::from_fn([4 * k], |i| if (k..2 * k).contains(&i) { 1.0 } else { 0.0 })
}
