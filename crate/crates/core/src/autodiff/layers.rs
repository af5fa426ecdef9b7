use rand::Rng;

use super::params::{ParamId, ParamStore};
use super::tape::{Tape, Var};
use crate::error::Result;

/// Affine map `x W + b` whose parameters live in a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, rng: &mut R) -> Self {
        let (w, b) = store.add_linear(name, fan_in, fan_out, rng);
        Linear { w, b, fan_in, fan_out }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let w = tape.param(store, self.w)?;
        let b = tape.param(store, self.b)?;
        tape.linear(x, w, b)
    }
}

/// Learned per-column gain and bias applied after layer normalization.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Norm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl Norm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        use super::tensor::Tensor;
        let gain = store.add(format!("{name}.g"), Tensor::filled(1, dim, 1.0));
        let bias = store.add(format!("{name}.b"), Tensor::zeros(1, dim));
        Norm { gain, bias }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let n = tape.layer_norm(x)?;
        let g = tape.param(store, self.gain)?;
        let b = tape.param(store, self.bias)?;
        let s = tape.mul_row(n, g)?;
        tape.add_row(s, b)
    }
}
