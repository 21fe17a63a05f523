//! Layers with hand-written forward and backward passes.

use rand::Rng as _;

use super::functional::softmax;
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerKind {
    /// `y = W x + b`, weight `(out, in)`, bias `(out)`.
    Dense { inputs: usize, outputs: usize },
    /// Valid (unpadded) 2-D convolution over `[C, H, W]` inputs.
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        in_height: usize,
        in_width: usize,
    },
    Relu,
    Softmax,
    Flatten,
}

impl LayerKind {
    pub fn conv_output(in_size: usize, kernel: usize, stride: usize) -> Option<usize> {
        if stride == 0 || kernel == 0 || kernel > in_size {
            None
        } else {
            Some((in_size - kernel) / stride + 1)
        }
    }
}

#[derive(Debug, Clone)]
pub struct Layer {
    pub name: String,
    pub kind: LayerKind,
    pub params: Vec<Tensor>,
    pub grads: Vec<Tensor>,
}

pub enum Init<'a> {
    /// Weights uniform in ±√(6/fan_in), biases in ±1/√fan_in.
    Uniform(&'a mut Rng),
    Zeros,
}

impl Layer {
    pub fn dense(name: &str, inputs: usize, outputs: usize, init: &mut Init) -> Self {
        let mut w = Tensor::zeros(&[outputs, inputs]);
        let mut b = Tensor::zeros(&[outputs]);
        init.fill(&mut w, inputs);
        init.fill_bias(&mut b, inputs);
        Self::with_params(name, LayerKind::Dense { inputs, outputs }, vec![w, b])
    }

    pub fn conv2d(
        name: &str,
        in_shape: [usize; 3],
        out_channels: usize,
        kernel: usize,
        stride: usize,
        init: &mut Init,
    ) -> Result<Self> {
        let [c, h, w] = in_shape;
        if LayerKind::conv_output(h, kernel, stride).is_none() || LayerKind::conv_output(w, kernel, stride).is_none() {
            return Err(Error::Config(format!(
                "{name}: kernel {kernel} with stride {stride} does not fit input {h}x{w}"
            )));
        }
        let fan_in = c * kernel * kernel;
        let mut wt = Tensor::zeros(&[out_channels, c, kernel, kernel]);
        let mut b = Tensor::zeros(&[out_channels]);
        init.fill(&mut wt, fan_in);
        init.fill_bias(&mut b, fan_in);
        Ok(Self::with_params(
            name,
            LayerKind::Conv2d {
                in_channels: c,
                out_channels,
                kernel,
                stride,
                in_height: h,
                in_width: w,
            },
            vec![wt, b],
        ))
    }

    pub fn relu(name: &str) -> Self {
        Self::with_params(name, LayerKind::Relu, vec![])
    }

    pub fn softmax(name: &str) -> Self {
        Self::with_params(name, LayerKind::Softmax, vec![])
    }

    pub fn flatten(name: &str) -> Self {
        Self::with_params(name, LayerKind::Flatten, vec![])
    }

    fn with_params(name: &str, kind: LayerKind, params: Vec<Tensor>) -> Self {
        let grads = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        Self {
            name: name.to_string(),
            kind,
            params,
            grads,
        }
    }

    pub fn param_names(&self) -> Vec<String> {
        match self.kind {
            LayerKind::Dense { .. } | LayerKind::Conv2d { .. } => {
                vec![format!("{}/weight", self.name), format!("{}/bias", self.name)]
            }
            _ => vec![],
        }
    }

    /// Output shape for a given input shape, or a shape error naming this layer.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let mismatch = |expected: Vec<usize>| Error::Shape {
            layer: self.name.clone(),
            expected,
            got: input.to_vec(),
        };
        match self.kind {
            LayerKind::Dense { inputs, outputs } => {
                if input != [inputs] {
                    return Err(mismatch(vec![inputs]));
                }
                Ok(vec![outputs])
            }
            LayerKind::Conv2d {
                in_channels,
                out_channels,
                kernel,
                stride,
                in_height,
                in_width,
            } => {
                if input != [in_channels, in_height, in_width] {
                    return Err(mismatch(vec![in_channels, in_height, in_width]));
                }
                let oh = LayerKind::conv_output(in_height, kernel, stride).unwrap();
                let ow = LayerKind::conv_output(in_width, kernel, stride).unwrap();
                Ok(vec![out_channels, oh, ow])
            }
            LayerKind::Relu => Ok(input.to_vec()),
            LayerKind::Softmax => {
                if input.len() != 1 {
                    return Err(mismatch(vec![input.iter().product()]));
                }
                Ok(input.to_vec())
            }
            LayerKind::Flatten => Ok(vec![input.iter().product()]),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let out_shape = self.output_shape(x.shape())?;
        let xd = x.data();
        let out = match self.kind {
            LayerKind::Dense { inputs, outputs } => {
                let w = self.params[0].data();
                let b = self.params[1].data();
                let mut y = b.to_vec();
                for o in 0..outputs {
                    let row = &w[o * inputs..(o + 1) * inputs];
                    y[o] += row.iter().zip(xd).map(|(a, b)| a * b).sum::<f64>();
                }
                y
            }
            LayerKind::Conv2d {
                in_channels,
                out_channels,
                kernel,
                stride,
                in_height,
                in_width,
            } => {
                let (oh, ow) = (out_shape[1], out_shape[2]);
                let w = self.params[0].data();
                let b = self.params[1].data();
                let mut y = vec![0.0; out_channels * oh * ow];
                for o in 0..out_channels {
                    let yo = &mut y[o * oh * ow..(o + 1) * oh * ow];
                    yo.iter_mut().for_each(|v| *v = b[o]);
                    for c in 0..in_channels {
                        let xc = &xd[c * in_height * in_width..(c + 1) * in_height * in_width];
                        for ki in 0..kernel {
                            for kj in 0..kernel {
                                let wv = w[((o * in_channels + c) * kernel + ki) * kernel + kj];
                                for i in 0..oh {
                                    let xrow = &xc[(i * stride + ki) * in_width + kj..];
                                    let yrow = &mut yo[i * ow..(i + 1) * ow];
                                    for (j, yv) in yrow.iter_mut().enumerate() {
                                        *yv += wv * xrow[j * stride];
                                    }
                                }
                            }
                        }
                    }
                }
                y
            }
            LayerKind::Relu => xd.iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect(),
            LayerKind::Softmax => softmax(xd),
            LayerKind::Flatten => xd.to_vec(),
        };
        Tensor::from_vec(&out_shape, out)
    }

    /// Accumulate parameter gradients and return the input gradient (if wanted).
    pub fn backward(&mut self, x: &Tensor, y: &Tensor, g: &Tensor, want_input: bool) -> Result<Option<Tensor>> {
        if g.shape() != y.shape() {
            return Err(Error::Shape {
                layer: self.name.clone(),
                expected: y.shape().to_vec(),
                got: g.shape().to_vec(),
            });
        }
        let xd = x.data();
        let gd = g.data();
        let dx = match self.kind {
            LayerKind::Dense { inputs, outputs } => {
                {
                    let (gw, gb) = self.grads.split_at_mut(1);
                    let gw = gw[0].data_mut();
                    let gb = gb[0].data_mut();
                    for o in 0..outputs {
                        let go = gd[o];
                        if go == 0.0 {
                            continue;
                        }
                        gb[o] += go;
                        for (wv, xv) in gw[o * inputs..(o + 1) * inputs].iter_mut().zip(xd) {
                            *wv += go * xv;
                        }
                    }
                }
                if !want_input {
                    return Ok(None);
                }
                let w = self.params[0].data();
                let mut dx = vec![0.0; inputs];
                for o in 0..outputs {
                    let go = gd[o];
                    if go == 0.0 {
                        continue;
                    }
                    for (d, wv) in dx.iter_mut().zip(&w[o * inputs..(o + 1) * inputs]) {
                        *d += go * wv;
                    }
                }
                dx
            }
            LayerKind::Conv2d {
                in_channels,
                out_channels,
                kernel,
                stride,
                in_height,
                in_width,
            } => {
                let (oh, ow) = (y.shape()[1], y.shape()[2]);
                let mut dx = if want_input { vec![0.0; xd.len()] } else { Vec::new() };
                let w = self.params[0].data();
                let (gw, gb) = self.grads.split_at_mut(1);
                let gw = gw[0].data_mut();
                let gb = gb[0].data_mut();
                for o in 0..out_channels {
                    let go = &gd[o * oh * ow..(o + 1) * oh * ow];
                    gb[o] += go.iter().sum::<f64>();
                    for c in 0..in_channels {
                        let base = c * in_height * in_width;
                        let xc = &xd[base..base + in_height * in_width];
                        for ki in 0..kernel {
                            for kj in 0..kernel {
                                let widx = ((o * in_channels + c) * kernel + ki) * kernel + kj;
                                let wv = w[widx];
                                let mut acc = 0.0;
                                for i in 0..oh {
                                    let off = (i * stride + ki) * in_width + kj;
                                    let grow = &go[i * ow..(i + 1) * ow];
                                    let xrow = &xc[off..];
                                    for (j, gv) in grow.iter().enumerate() {
                                        acc += gv * xrow[j * stride];
                                    }
                                    if want_input {
                                        let drow = &mut dx[base + off..];
                                        for (j, gv) in grow.iter().enumerate() {
                                            drow[j * stride] += gv * wv;
                                        }
                                    }
                                }
                                gw[widx] += acc;
                            }
                        }
                    }
                }
                if !want_input {
                    return Ok(None);
                }
                dx
            }
            LayerKind::Relu => xd
                .iter()
                .zip(gd)
                .map(|(&xv, &gv)| if xv > 0.0 { gv } else { 0.0 })
                .collect(),
            LayerKind::Softmax => {
                let yd = y.data();
                let gy: f64 = gd.iter().zip(yd).map(|(a, b)| a * b).sum();
                yd.iter().zip(gd).map(|(&p, &gv)| p * (gv - gy)).collect()
            }
            LayerKind::Flatten => gd.to_vec(),
        };
        if !want_input {
            return Ok(None);
        }
        Ok(Some(Tensor::from_vec(x.shape(), dx)?))
    }

    pub fn zero_grads(&mut self) {
        for g in &mut self.grads {
            g.fill(0.0);
        }
    }
}

impl Init<'_> {
    fn fill(&mut self, t: &mut Tensor, fan_in: usize) {
        self.uniform(t, (6.0 / fan_in.max(1) as f64).sqrt());
    }

    fn fill_bias(&mut self, t: &mut Tensor, fan_in: usize) {
        self.uniform(t, 1.0 / (fan_in.max(1) as f64).sqrt());
    }

    fn uniform(&mut self, t: &mut Tensor, bound: f64) {
        match self {
            Init::Zeros => t.fill(0.0),
            Init::Uniform(rng) => {
                for v in t.data_mut() {
                    *v = rng.gen_range(-bound..bound);
                }
            }
        }
    }
}

/// Activations recorded by [`Sequential::forward`].
#[derive(Debug, Clone)]
pub struct Tape {
    /// `values[i]` is the input to layer `i`; the last entry is the output.
    values: Vec<Tensor>,
    consumed: bool,
}

impl Tape {
    pub fn output(&self) -> &Tensor {
        self.values.last().expect("tape holds at least the input")
    }

    pub fn input(&self) -> &Tensor {
        &self.values[0]
    }
}

/// A chain of layers.
#[derive(Debug, Clone, Default)]
pub struct Sequential {
    pub layers: Vec<Layer>,
}

impl Sequential {
    pub fn new(layers: Vec<Layer>) -> Self {
        Self { layers }
    }

    pub fn forward(&self, input: &Tensor) -> Result<(Tensor, Tape)> {
        let mut values = Vec::with_capacity(self.layers.len() + 1);
        values.push(input.clone());
        for layer in &self.layers {
            let y = layer.forward(values.last().unwrap())?;
            values.push(y);
        }
        let out = values.last().unwrap().clone();
        Ok((out, Tape { values, consumed: false }))
    }

    /// Forward pass without recording a tape.
    pub fn infer(&self, input: &Tensor) -> Result<Tensor> {
        let mut x = std::borrow::Cow::Borrowed(input);
        for layer in &self.layers {
            x = std::borrow::Cow::Owned(layer.forward(&x)?);
        }
        Ok(x.into_owned())
    }

    /// Backpropagate `output_grad`, accumulating into each layer's grads, and
    /// return the gradient with respect to the input.
    pub fn backward(&mut self, tape: &mut Tape, output_grad: &Tensor) -> Result<Tensor> {
        Ok(self.backward_impl(tape, output_grad, true)?.expect("input grad requested"))
    }

    /// Like [`Sequential::backward`] but skips the input gradient.
    pub fn backward_params(&mut self, tape: &mut Tape, output_grad: &Tensor) -> Result<()> {
        self.backward_impl(tape, output_grad, false).map(|_| ())
    }

    fn backward_impl(&mut self, tape: &mut Tape, output_grad: &Tensor, want_input: bool) -> Result<Option<Tensor>> {
        if tape.consumed {
            return Err(Error::TapeConsumed);
        }
        if tape.values.len() != self.layers.len() + 1 {
            return Err(Error::Shape {
                layer: "tape".into(),
                expected: vec![self.layers.len() + 1],
                got: vec![tape.values.len()],
            });
        }
        tape.consumed = true;
        let mut g = output_grad.clone();
        let n = self.layers.len();
        for i in (0..n).rev() {
            let need = want_input || i > 0;
            let (x, y) = (&tape.values[i], &tape.values[i + 1]);
            match self.layers[i].backward(x, y, &g, need)? {
                Some(dx) => g = dx,
                None => return Ok(None),
            }
        }
        Ok(Some(g))
    }

    pub fn zero_grads(&mut self) {
        self.layers.iter_mut().for_each(Layer::zero_grads);
    }

    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let mut s = input.to_vec();
        for l in &self.layers {
            s = l.output_shape(&s)?;
        }
        Ok(s)
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().flat_map(|l| &l.params).map(Tensor::len).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::substream;

    #[test]
    fn relu_and_identity_dense() {
        let r = Layer::relu("r");
        let y = r.forward(&Tensor::vector(vec![-1.0, 0.0, 2.0])).unwrap();
        assert_eq!(y.data(), &[0.0, 0.0, 2.0]);

        let mut d = Layer::dense("d", 3, 3, &mut Init::Zeros);
        for i in 0..3 {
            d.params[0].data_mut()[i * 3 + i] = 1.0;
        }
        let x = Tensor::vector(vec![0.3, -1.5, 2.0]);
        assert_eq!(d.forward(&x).unwrap(), x);
    }

    #[test]
    fn dense_weight_grad_is_outer_product() {
        let mut rng = substream(0, "t");
        let mut net = Sequential::new(vec![Layer::dense("d", 3, 2, &mut Init::Uniform(&mut rng))]);
        let x = Tensor::vector(vec![1.0, 2.0, -3.0]);
        let (_, mut tape) = net.forward(&x).unwrap();
        let g = Tensor::vector(vec![0.5, -2.0]);
        net.backward(&mut tape, &g).unwrap();
        let gw = net.layers[0].grads[0].data();
        for o in 0..2 {
            for i in 0..3 {
                assert_eq!(gw[o * 3 + i], g.data()[o] * x.data()[i]);
            }
        }
        assert_eq!(net.layers[0].grads[1].data(), g.data());
    }

    #[test]
    fn zero_output_grad_leaves_grads_unchanged() {
        let mut rng = substream(1, "t");
        let mut net = Sequential::new(vec![
            Layer::conv2d("c", [1, 5, 5], 2, 3, 1, &mut Init::Uniform(&mut rng)).unwrap(),
            Layer::relu("r"),
            Layer::flatten("f"),
            Layer::dense("d", 18, 2, &mut Init::Uniform(&mut rng)),
        ]);
        let x = Tensor::from_vec(&[1, 5, 5], (0..25).map(|i| i as f64 / 25.0).collect()).unwrap();
        let (_, mut tape) = net.forward(&x).unwrap();
        net.backward(&mut tape, &Tensor::zeros(&[2])).unwrap();
        for l in &net.layers {
            for g in &l.grads {
                assert!(g.data().iter().all(|v| *v == 0.0));
            }
        }
    }

    #[test]
    fn consumed_tape_is_rejected() {
        let mut net = Sequential::new(vec![Layer::relu("r")]);
        let (_, mut tape) = net.forward(&Tensor::vector(vec![1.0])).unwrap();
        net.backward(&mut tape, &Tensor::vector(vec![1.0])).unwrap();
        assert!(matches!(
            net.backward(&mut tape, &Tensor::vector(vec![1.0])),
            Err(Error::TapeConsumed)
        ));
    }

    #[test]
    fn shape_errors_name_the_layer() {
        let net = Sequential::new(vec![Layer::dense("enc/fc", 4, 2, &mut Init::Zeros)]);
        let err = net.forward(&Tensor::vector(vec![1.0; 3])).unwrap_err();
        assert!(err.to_string().contains("enc/fc"), "{err}");
        assert!(Layer::conv2d("c", [1, 4, 4], 1, 5, 1, &mut Init::Zeros).is_err());
    }

    #[test]
    fn conv_matches_direct_sum() {
        let mut rng = substream(2, "t");
        let l = Layer::conv2d("c", [2, 6, 7], 3, 3, 2, &mut Init::Uniform(&mut rng)).unwrap();
        let x = Tensor::from_vec(&[2, 6, 7], (0..84).map(|i| ((i * 37 % 11) as f64) / 10.0 - 0.5).collect()).unwrap();
        let y = l.forward(&x).unwrap();
        assert_eq!(y.shape(), &[3, 2, 3]);
        let w = l.params[0].data();
        let b = l.params[1].data();
        for o in 0..3 {
            for i in 0..2 {
                for j in 0..3 {
                    let mut s = b[o];
                    for c in 0..2 {
                        for ki in 0..3 {
                            for kj in 0..3 {
                                s += w[((o * 2 + c) * 3 + ki) * 3 + kj] * x.data()[c * 42 + (2 * i + ki) * 7 + 2 * j + kj];
                            }
                        }
                    }
                    assert!((y.data()[(o * 2 + i) * 3 + j] - s).abs() < 1e-12);
                }
            }
        }
    }
}
