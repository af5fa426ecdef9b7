use std::rc::Rc;

use rand::Rng;

use crate::autodiff::{Linear, ParamStore, Tape, Var, GATHER_ZERO};
use crate::error::{Error, Result};

/// Strided 2-D convolution over a `[batch * h * w, channels]` activation,
/// lowered to an index gather (im2col) followed by a matrix product.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvLayer {
    pub lin: Linear,
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvLayer {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        rng: &mut R,
    ) -> Self {
        let lin = Linear::new(store, name, kernel * kernel * in_ch, out_ch, rng);
        ConvLayer { lin, in_ch, out_ch, kernel, stride, pad }
    }

    pub fn out_size(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.pad - self.kernel) / self.stride + 1,
            (w + 2 * self.pad - self.kernel) / self.stride + 1,
        )
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var, batch: usize, h: usize, w: usize) -> Result<Var> {
        if tape.value(x).shape() != [batch * h * w, self.in_ch] {
            return Err(Error::shape(
                "conv",
                format!("expected [{}, {}], got {:?}", batch * h * w, self.in_ch, tape.value(x).shape()),
            ));
        }
        let (ho, wo) = self.out_size(h, w);
        let index = im2col_index(batch, h, w, self.in_ch, self.kernel, self.stride, self.pad);
        let cols = tape.gather(x, index, batch * ho * wo, self.kernel * self.kernel * self.in_ch)?;
        self.lin.forward(tape, store, cols)
    }
}

pub(crate) fn im2col_index(batch: usize, h: usize, w: usize, ch: usize, k: usize, stride: usize, pad: usize) -> Rc<[usize]> {
    let ho = (h + 2 * pad - k) / stride + 1;
    let wo = (w + 2 * pad - k) / stride + 1;
    let mut idx = Vec::with_capacity(batch * ho * wo * k * k * ch);
    for b in 0..batch {
        for oy in 0..ho {
            for ox in 0..wo {
                for ky in 0..k {
                    for kx in 0..k {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        let inside = iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w;
                        for c in 0..ch {
                            idx.push(if inside {
                                ((b * h + iy as usize) * w + ix as usize) * ch + c
                            } else {
                                GATHER_ZERO
                            });
                        }
                    }
                }
            }
        }
    }
    idx.into()
}
