//! Convolutional building blocks shared by the backbone and the decoder.

use crate::error::Result;
use crate::init::Initializer;
use crate::tensor::{Element, ParamId, ParamStore, Tape, Tensor, Var};

/// A convolution kernel with optional per-channel bias.
#[derive(Debug, Clone, Copy)]
pub struct Conv {
    pub kernel: ParamId,
    pub bias: Option<ParamId>,
    pub stride: usize,
    pub padding: usize,
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    pub fn register<T: Element>(
        store: &mut ParamStore<T>,
        init: &mut Initializer,
        name: &str,
        c_in: usize,
        c_out: usize,
        size: usize,
        stride: usize,
        bias: bool,
    ) -> Self {
        let kernel = store.register(
            format!("{name}.weight"),
            init.he(&[c_out, c_in, size, size], c_in * size * size),
        );
        let bias = bias.then(|| store.register(format!("{name}.bias"), Tensor::zeros([c_out])));
        Self {
            kernel,
            bias,
            stride,
            padding: size / 2,
        }
    }

    pub fn forward<'t, T: Element>(
        &self,
        tape: &'t Tape<T>,
        store: &ParamStore<T>,
        x: Var<'t, T>,
    ) -> Result<Var<'t, T>> {
        let k = tape.param(store, self.kernel)?;
        let y = x.conv2d(k, self.stride, self.padding)?;
        match self.bias {
            Some(b) => y.add_channel_bias(tape.param(store, b)?),
            None => Ok(y),
        }
    }
}

/// Pre-activation residual block: `x + conv2(relu(conv1(relu(x))))`,
/// both convolutions 3×3 at constant width.
#[derive(Debug, Clone, Copy)]
pub struct ResBlock {
    pub conv1: Conv,
    pub conv2: Conv,
}

impl ResBlock {
    pub fn register<T: Element>(
        store: &mut ParamStore<T>,
        init: &mut Initializer,
        name: &str,
        channels: usize,
    ) -> Self {
        Self {
            conv1: Conv::register(store, init, &format!("{name}.conv1"), channels, channels, 3, 1, true),
            conv2: Conv::register(store, init, &format!("{name}.conv2"), channels, channels, 3, 1, true),
        }
    }

    pub fn forward<'t, T: Element>(
        &self,
        tape: &'t Tape<T>,
        store: &ParamStore<T>,
        x: Var<'t, T>,
    ) -> Result<Var<'t, T>> {
        let r = self.conv1.forward(tape, store, x.relu()?)?;
        let r = self.conv2.forward(tape, store, r.relu()?)?;
        x.add(r)
    }

    pub fn kernels(&self) -> [ParamId; 2] {
        [self.conv1.kernel, self.conv2.kernel]
    }
}
