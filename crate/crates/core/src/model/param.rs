use rand::Rng;

use crate::autodiff::{DiffArray, Tape, Var};

/// A named trainable array.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: DiffArray,
}

impl Param {
    pub fn zeros(name: impl Into<String>, shape: Vec<usize>) -> Self {
        Self {
            name: name.into(),
            value: DiffArray::zeros(shape).expect("parameter shapes are positive"),
        }
    }

    pub fn filled(name: impl Into<String>, shape: Vec<usize>, fill: f64) -> Self {
        let mut p = Self::zeros(name, shape);
        p.value.values_mut().iter_mut().for_each(|v| *v = fill);
        p
    }

    /// Uniform in `±bound`.
    pub fn uniform<R: Rng>(name: impl Into<String>, shape: Vec<usize>, bound: f64, rng: &mut R) -> Self {
        let mut p = Self::zeros(name, shape);
        p.value
            .values_mut()
            .iter_mut()
            .for_each(|v| *v = rng.gen_range(-bound..=bound));
        p
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn values(&self) -> &[f64] {
        self.value.values()
    }

    /// Records the parameter on `tape`, tracked for gradients when `track` is set.
    pub fn bind(&self, tape: &mut Tape, track: bool) -> Var {
        let shape = self.value.shape().to_vec();
        let values = self.value.values().to_vec();
        if track {
            tape.variable(shape, values)
        } else {
            tape.constant(shape, values)
        }
        .expect("parameter shapes are valid")
    }
}

/// Declares a parameter container, the matching struct of tape handles, and the
/// enumeration/binding glue between them. Field order is the canonical order.
macro_rules! param_struct {
    ($(#[$meta:meta])* $name:ident, $vars:ident { $($field:ident),* $(,)? }) => {
        $(#[$meta])*
        #[derive(Debug, Clone, PartialEq)]
        pub struct $name {
            $(pub $field: $crate::model::Param,)*
        }

        #[derive(Debug, Clone, Copy)]
        pub struct $vars {
            $(pub $field: $crate::autodiff::Var,)*
        }

        impl $name {
            pub fn params(&self) -> Vec<&$crate::model::Param> {
                vec![$(&self.$field),*]
            }

            pub fn params_mut(&mut self) -> Vec<&mut $crate::model::Param> {
                vec![$(&mut self.$field),*]
            }

            pub fn bind(&self, tape: &mut $crate::autodiff::Tape, track: bool) -> $vars {
                $vars {
                    $($field: self.$field.bind(tape, track),)*
                }
            }
        }

        impl $vars {
            pub fn list(&self) -> Vec<$crate::autodiff::Var> {
                vec![$(self.$field),*]
            }
        }
    };
}

pub(crate) use param_struct;
