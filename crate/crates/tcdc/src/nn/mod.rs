//! Layers with hand-written backward passes.
//!
//! Layers are stateless between calls: `forward` takes `&self`, and
//! `backward` receives the same input again and accumulates into
//! [`Param::grad`]. Composite modules keep whatever activations they need.

mod conv;
mod gdn;
mod layers;

pub use conv::{Conv2d, ConvTranspose2d};
pub use gdn::Gdn;
pub use layers::{
    dropout_backward, dropout_mask, gap, gap_backward, relu, relu_backward, Linear, MaxPool,
};

use rand::Rng;
use serde::{Deserialize, Serialize};

/// A named, trainable array with its accumulated gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub shape: Vec<usize>,
    pub value: Vec<f64>,
    pub grad: Vec<f64>,
}

impl Param {
    pub fn new(name: impl Into<String>, shape: &[usize], value: Vec<f64>) -> Self {
        debug_assert_eq!(value.len(), shape.iter().product::<usize>());
        let grad = vec![0.0; value.len()];
        Self { name: name.into(), shape: shape.to_vec(), value, grad }
    }

    pub fn uniform(name: impl Into<String>, shape: &[usize], bound: f64, rng: &mut impl Rng) -> Self {
        let n = shape.iter().product();
        let value = (0..n).map(|_| rng.random_range(-bound..=bound)).collect();
        Self::new(name, shape, value)
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }
}

/// Access to every [`Param`] of a module, in a fixed order.
pub trait Params {
    fn visit(&self, f: &mut dyn FnMut(&Param));
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param));

    fn zero_grad(&mut self) {
        self.visit_mut(&mut |p| p.grad.iter_mut().for_each(|g| *g = 0.0));
    }

    fn num_params(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |p| n += p.len());
        n
    }

    fn grad_sq_norm(&self) -> f64 {
        let mut s = 0.0;
        self.visit(&mut |p| s += p.grad.iter().map(|g| g * g).sum::<f64>());
        s
    }

    fn scale_grad(&mut self, k: f64) {
        self.visit_mut(&mut |p| p.grad.iter_mut().for_each(|g| *g *= k));
    }

    /// Flat copy of all parameter values.
    fn flat_values(&self) -> Vec<f64> {
        let mut out = Vec::new();
        self.visit(&mut |p| out.extend_from_slice(&p.value));
        out
    }
}

impl Params for Param {
    fn visit(&self, f: &mut dyn FnMut(&Param)) {
        f(self)
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(self)
    }
}

impl<T: Params> Params for Vec<T> {
    fn visit(&self, f: &mut dyn FnMut(&Param)) {
        self.iter().for_each(|t| t.visit(f));
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.iter_mut().for_each(|t| t.visit_mut(f));
    }
}

impl<T: Params> Params for Option<T> {
    fn visit(&self, f: &mut dyn FnMut(&Param)) {
        if let Some(t) = self {
            t.visit(f)
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        if let Some(t) = self {
            t.visit_mut(f)
        }
    }
}

/// Implements [`Params`] by visiting the listed fields in order.
#[macro_export]
macro_rules! impl_params {
    ($t:ty; $($field:ident),+ $(,)?) => {
        impl $crate::nn::Params for $t {
            fn visit(&self, f: &mut dyn FnMut(&$crate::nn::Param)) {
                $( $crate::nn::Params::visit(&self.$field, f); )+
            }
            fn visit_mut(&mut self, f: &mut dyn FnMut(&mut $crate::nn::Param)) {
                $( $crate::nn::Params::visit_mut(&mut self.$field, f); )+
            }
        }
    };
}

/// Which gradients a backward pass should produce.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Need {
    pub params: bool,
    pub input: bool,
}

impl Need {
    pub const ALL: Need = Need { params: true, input: true };
    pub const PARAMS: Need = Need { params: true, input: false };
    pub const INPUT: Need = Need { params: false, input: true };
}

/// Weight initialization scheme.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Init {
    /// `U(-1/√fan_in, 1/√fan_in)` for weights and biases.
    Uniform,
    /// He-normal weights scaled by the factor, zero bias.
    He(f64),
}
