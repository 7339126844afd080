//! Parameter containers are generic over their leaf type so the same struct
//! holds owned tensors, tape handles, or optimizer moments.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::numerics::Tensor;

/// Implements `map`, `visit` and `visit_mut` for a struct whose fields are all `T`.
macro_rules! param_struct {
    ($name:ident { $($field:ident),* $(,)? }) => {
        impl<T> $name<T> {
            pub fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> $name<U> {
                $name { $($field: f(&self.$field)),* }
            }

            pub fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a T)) {
                $( f(format!("{prefix}{}", stringify!($field)), &self.$field); )*
            }

            pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut T)) {
                $( f(format!("{prefix}{}", stringify!($field)), &mut self.$field); )*
            }
        }
    };
}
pub(crate) use param_struct;

pub(crate) fn normal_tensor(shape: &[usize], std: f64, rng: &mut impl Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let dist = Normal::new(0.0, std).expect("std is positive");
    Tensor::new(shape, (0..n).map(|_| dist.sample(rng)).collect()).expect("shape matches data")
}
