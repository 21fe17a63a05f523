//! Dense tensors, layers with analytic gradients, parameter stores and the
//! optimizer.

pub mod checkpoint;
pub mod functional;
pub mod gradcheck;
mod layer;
mod params;
mod tensor;

pub use functional::{argmax, entropy, log_softmax, softmax};
pub use layer::{Init, Layer, LayerKind, Sequential, Tape};
pub use params::{apply_update, Grads, Learner, Network, OptimizerKind, OptimizerState, ParamSet, SharedParams};
pub use tensor::{concat, dot, Tensor};

use crate::rng::Rng;

/// Shape of a conv → conv → dense image encoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub channels: [usize; 2],
    pub kernels: [usize; 2],
    pub strides: [usize; 2],
}

/// `conv-relu-conv-relu-flatten-dense` image encoder.
pub fn conv_encoder(prefix: &str, input: [usize; 3], spec: &ConvSpec, out_dim: usize, init: &mut Init) -> crate::Result<Sequential> {
    let c1 = Layer::conv2d(&format!("{prefix}/conv0"), input, spec.channels[0], spec.kernels[0], spec.strides[0], init)?;
    let s1 = c1.output_shape(&input)?;
    let c2 = Layer::conv2d(
        &format!("{prefix}/conv1"),
        [s1[0], s1[1], s1[2]],
        spec.channels[1],
        spec.kernels[1],
        spec.strides[1],
        init,
    )?;
    let s2 = c2.output_shape(&s1)?;
    let flat: usize = s2.iter().product();
    Ok(Sequential::new(vec![
        c1,
        Layer::relu(&format!("{prefix}/relu0")),
        c2,
        Layer::relu(&format!("{prefix}/relu1")),
        Layer::flatten(&format!("{prefix}/flatten")),
        Layer::dense(&format!("{prefix}/fc"), flat, out_dim, init),
    ]))
}

/// `dense-relu-…-dense` stack; `sizes` lists every width including input and output.
pub fn mlp(prefix: &str, sizes: &[usize], init: &mut Init) -> Sequential {
    let mut layers = Vec::new();
    for i in 0..sizes.len() - 1 {
        if i > 0 {
            layers.push(Layer::relu(&format!("{prefix}/relu{}", i - 1)));
        }
        layers.push(Layer::dense(&format!("{prefix}/fc{i}"), sizes[i], sizes[i + 1], init));
    }
    Sequential::new(layers)
}

/// Initializer from an optional RNG: `None` gives all-zero parameters.
pub fn init_from(rng: Option<&mut Rng>) -> Init<'_> {
    match rng {
        Some(r) => Init::Uniform(r),
        None => Init::Zeros,
    }
}
