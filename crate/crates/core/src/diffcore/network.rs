use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::optim::OptimizerState;
use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{invalid, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Padding {
    /// Zero-pad so the output keeps the input's spatial size (odd kernels).
    Same,
    Valid,
}

/// One layer of a sequential network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum LayerSpec {
    Dense {
        units: usize,
    },
    Conv2d {
        filters: usize,
        kernel: usize,
        padding: Padding,
    },
    MaxPool2,
    Relu,
    Sigmoid,
    Tanh,
    Softmax,
    Flatten,
}

/// Parameter handles registered on a tape for one training step.
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    /// Treat `vars` as this network's parameters, in [`Network::params`] order.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Bound { vars }
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

/// Output of a recorded forward pass.
#[derive(Clone, Copy, Debug)]
pub struct Forward {
    pub output: Var,
    /// Activation of the tap layer.
    pub hidden: Var,
}

/// Sequential network over a fixed per-sample input shape.
#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    input_shape: Vec<usize>,
    layers: Vec<LayerSpec>,
    out_shapes: Vec<Vec<usize>>,
    params: Vec<Tensor>,
    // (weight, bias) parameter indices for layers that own parameters
    slots: Vec<Option<(usize, usize)>>,
    tap: usize,
}

fn infer_shapes(input: &[usize], layers: &[LayerSpec]) -> Result<Vec<Vec<usize>>> {
    let mut cur = input.to_vec();
    let mut shapes = Vec::with_capacity(layers.len());
    for (i, layer) in layers.iter().enumerate() {
        let bad = |cur: &[usize]| {
            Error::InvalidArgument(format!(
                "layer {i} ({layer:?}) cannot accept per-sample shape {cur:?}"
            ))
        };
        cur = match layer {
            LayerSpec::Dense { units } => {
                if cur.len() != 1 || *units == 0 {
                    return Err(bad(&cur));
                }
                vec![*units]
            }
            LayerSpec::Conv2d {
                filters,
                kernel,
                padding,
            } => {
                if cur.len() != 3 || *filters == 0 || *kernel == 0 {
                    return Err(bad(&cur));
                }
                match padding {
                    Padding::Same if kernel % 2 == 1 => vec![*filters, cur[1], cur[2]],
                    Padding::Valid if cur[1] >= *kernel && cur[2] >= *kernel => {
                        vec![*filters, cur[1] - kernel + 1, cur[2] - kernel + 1]
                    }
                    _ => return Err(bad(&cur)),
                }
            }
            LayerSpec::MaxPool2 => {
                if cur.len() != 3 || cur[1] < 2 || cur[2] < 2 {
                    return Err(bad(&cur));
                }
                vec![cur[0], cur[1] / 2, cur[2] / 2]
            }
            LayerSpec::Softmax => {
                if cur.len() != 1 {
                    return Err(bad(&cur));
                }
                cur
            }
            LayerSpec::Flatten => vec![cur.iter().product()],
            LayerSpec::Relu | LayerSpec::Sigmoid | LayerSpec::Tanh => cur,
        };
        shapes.push(cur.clone());
    }
    Ok(shapes)
}

fn glorot(shape: &[usize], fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Tensor {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-limit..limit)).collect();
    Tensor::new(shape.to_vec(), data).expect("init shape")
}

impl Network {
    /// Build a network with Glorot-uniform weights and zero biases.
    pub fn new(
        input_shape: Vec<usize>,
        layers: Vec<LayerSpec>,
        tap: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let out_shapes = Self::validate(&input_shape, &layers, tap)?;
        let mut params = Vec::new();
        let mut slots = Vec::with_capacity(layers.len());
        let mut prev = input_shape.clone();
        for (layer, out) in layers.iter().zip(&out_shapes) {
            match layer {
                LayerSpec::Dense { units } => {
                    let fan_in = prev[0];
                    params.push(glorot(&[fan_in, *units], fan_in, *units, rng));
                    params.push(Tensor::zeros(&[*units]));
                    slots.push(Some((params.len() - 2, params.len() - 1)));
                }
                LayerSpec::Conv2d {
                    filters, kernel, ..
                } => {
                    let c = prev[0];
                    let kk = kernel * kernel;
                    params.push(glorot(&[*filters, c, *kernel, *kernel], c * kk, filters * kk, rng));
                    params.push(Tensor::zeros(&[*filters]));
                    slots.push(Some((params.len() - 2, params.len() - 1)));
                }
                _ => slots.push(None),
            }
            prev = out.clone();
        }
        Ok(Network {
            input_shape,
            layers,
            out_shapes,
            params,
            slots,
            tap,
        })
    }

    /// Rebuild from stored parameters, checking every parameter shape.
    pub fn from_parts(
        input_shape: Vec<usize>,
        layers: Vec<LayerSpec>,
        tap: usize,
        params: Vec<Tensor>,
    ) -> Result<Self> {
        let mut net = Self::new(
            input_shape,
            layers,
            tap,
            &mut ChaCha8Rng::seed_from_u64(0),
        )?;
        if net.params.len() != params.len() {
            return Err(invalid(format!(
                "expected {} parameter tensors, got {}",
                net.params.len(),
                params.len()
            )));
        }
        for (have, got) in net.params.iter().zip(&params) {
            if have.shape() != got.shape() {
                return Err(Error::Shape {
                    op: "Network::from_parts",
                    expected: have.shape().to_vec(),
                    found: got.shape().to_vec(),
                });
            }
        }
        net.params = params;
        Ok(net)
    }

    fn validate(input: &[usize], layers: &[LayerSpec], tap: usize) -> Result<Vec<Vec<usize>>> {
        if input.is_empty() || input.contains(&0) {
            return Err(invalid(format!("bad input shape {input:?}")));
        }
        if layers.is_empty() {
            return Err(invalid("network needs at least one layer"));
        }
        if tap >= layers.len() {
            return Err(invalid(format!(
                "tap index {tap} must be below layer count {}",
                layers.len()
            )));
        }
        infer_shapes(input, layers)
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn tap(&self) -> usize {
        self.tap
    }

    pub fn set_tap(&mut self, tap: usize) -> Result<()> {
        if tap >= self.layers.len() {
            return Err(invalid(format!("tap index {tap} out of range")));
        }
        self.tap = tap;
        Ok(())
    }

    /// Per-sample output shape of layer `i`.
    pub fn layer_shape(&self, i: usize) -> &[usize] {
        &self.out_shapes[i]
    }

    pub fn output_shape(&self) -> &[usize] {
        self.out_shapes.last().expect("non-empty")
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    /// Register the current parameters as leaves on `tape`.
    pub fn bind(&self, tape: &mut Tape) -> Bound {
        Bound {
            vars: self.params.iter().map(|p| tape.leaf(p.clone())).collect(),
        }
    }

    /// Record a forward pass of `x` (shape `(batch, ..input_shape)`).
    pub fn forward(&self, tape: &mut Tape, bound: &Bound, x: Var) -> Result<Forward> {
        let xs = tape.value(x).shape();
        if xs.len() != self.input_shape.len() + 1 || xs[1..] != self.input_shape[..] {
            let mut expected = vec![xs.first().copied().unwrap_or(0)];
            expected.extend_from_slice(&self.input_shape);
            return Err(Error::Shape {
                op: "Network::forward",
                expected,
                found: xs.to_vec(),
            });
        }
        let mut cur = x;
        let mut hidden = x;
        for (i, layer) in self.layers.iter().enumerate() {
            cur = match layer {
                LayerSpec::Dense { .. } => {
                    let (w, b) = self.slots[i].expect("dense slot");
                    let y = tape.matmul(cur, bound.vars[w])?;
                    tape.add_bias(y, bound.vars[b])?
                }
                LayerSpec::Conv2d {
                    kernel, padding, ..
                } => {
                    let (w, b) = self.slots[i].expect("conv slot");
                    let pad = match padding {
                        Padding::Same => (kernel - 1) / 2,
                        Padding::Valid => 0,
                    };
                    tape.conv2d(cur, bound.vars[w], bound.vars[b], pad)?
                }
                LayerSpec::MaxPool2 => tape.max_pool2(cur)?,
                LayerSpec::Relu => tape.relu(cur),
                LayerSpec::Sigmoid => tape.sigmoid(cur),
                LayerSpec::Tanh => tape.tanh(cur),
                LayerSpec::Softmax => tape.softmax(cur)?,
                LayerSpec::Flatten => tape.flatten(cur)?,
            };
            if i == self.tap {
                hidden = cur;
            }
        }
        Ok(Forward {
            output: cur,
            hidden,
        })
    }

    /// Evaluate without keeping the tape: `(output, tap activation)`.
    pub fn forward_values(&self, batch: &Tensor) -> Result<(Tensor, Tensor)> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape);
        let x = tape.leaf(batch.clone());
        let f = self.forward(&mut tape, &bound, x)?;
        Ok((tape.value(f.output).clone(), tape.value(f.hidden).clone()))
    }

    /// Network output for a batch, evaluated in chunks of at most `chunk` rows.
    pub fn predict(&self, batch: &Tensor, chunk: usize) -> Result<Tensor> {
        let n = batch.rows();
        let chunk = chunk.max(1);
        let mut out = Vec::new();
        let mut width = 0;
        for start in (0..n).step_by(chunk) {
            let idx: Vec<usize> = (start..(start + chunk).min(n)).collect();
            let (o, _) = self.forward_values(&batch.gather_rows(&idx))?;
            width = o.row_len();
            out.extend_from_slice(o.data());
        }
        let mut shape = vec![n];
        shape.extend_from_slice(self.output_shape());
        debug_assert_eq!(out.len(), n * width);
        Tensor::new(shape, out)
    }

    /// Differentiate `loss`, apply one optimizer update, and drop the
    /// gradients. Errors if the tape was already consumed.
    pub fn backward_and_step(
        &mut self,
        tape: &mut Tape,
        bound: &Bound,
        loss: Var,
        opt: &mut OptimizerState,
    ) -> Result<()> {
        let mut grads = tape.backward(loss)?;
        let per_param: Vec<Option<Tensor>> = bound.vars.iter().map(|&v| grads.take(v)).collect();
        opt.apply(&mut self.params, &per_param)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(7)
    }

    #[test]
    fn identity_dense_passes_input_through() {
        let mut net = Network::new(vec![3], vec![LayerSpec::Dense { units: 3 }], 0, &mut rng()).unwrap();
        let mut eye = Tensor::zeros(&[3, 3]);
        for i in 0..3 {
            eye.data_mut()[i * 3 + i] = 1.0;
        }
        net.params_mut()[0] = eye;
        let x = Tensor::new(vec![1, 3], vec![0.5, -2.0, 3.0]).unwrap();
        let (out, _) = net.forward_values(&x).unwrap();
        assert_eq!(out.data(), x.data());
    }

    #[test]
    fn zero_weight_softmax_is_uniform() {
        let mut net = Network::new(
            vec![5],
            vec![LayerSpec::Dense { units: 4 }, LayerSpec::Softmax],
            0,
            &mut rng(),
        )
        .unwrap();
        net.params_mut()[0] = Tensor::zeros(&[5, 4]);
        let x = Tensor::new(vec![2, 5], vec![1.0, -3.0, 2.0, 0.0, 9.0, 0.1, 0.2, 0.3, 0.4, 0.5]).unwrap();
        let (out, _) = net.forward_values(&x).unwrap();
        for v in out.data() {
            assert!((v - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn shape_mismatch_names_dimensions() {
        let net = Network::new(vec![4], vec![LayerSpec::Dense { units: 2 }], 0, &mut rng()).unwrap();
        let err = net.forward_values(&Tensor::zeros(&[3, 5])).unwrap_err();
        match err {
            Error::Shape {
                expected, found, ..
            } => {
                assert_eq!(expected, vec![3, 4]);
                assert_eq!(found, vec![3, 5]);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn layer_composition_is_checked() {
        assert!(Network::new(vec![1, 8, 8], vec![LayerSpec::Dense { units: 2 }], 0, &mut rng()).is_err());
        assert!(Network::new(vec![4], vec![LayerSpec::Relu], 1, &mut rng()).is_err());
        let net = Network::new(
            vec![1, 8, 8],
            vec![
                LayerSpec::Conv2d {
                    filters: 2,
                    kernel: 3,
                    padding: Padding::Valid,
                },
                LayerSpec::MaxPool2,
                LayerSpec::Flatten,
                LayerSpec::Dense { units: 3 },
            ],
            2,
            &mut rng(),
        )
        .unwrap();
        assert_eq!(net.layer_shape(0), &[2, 6, 6]);
        assert_eq!(net.layer_shape(2), &[18]);
    }

    #[test]
    fn sgd_on_quadratic() {
        // loss = w^2 at w = 3, lr 0.1 -> 3 - 0.1 * 6 = 2.4
        let mut net = Network::new(vec![1], vec![LayerSpec::Dense { units: 1 }], 0, &mut rng()).unwrap();
        net.params_mut()[0] = Tensor::new(vec![1, 1], vec![3.0]).unwrap();
        let mut tape = Tape::new();
        let bound = net.bind(&mut tape);
        let sq = tape.square(bound.vars()[0]);
        let loss = tape.sum(sq);
        let mut opt = OptimizerState::sgd(0.1).unwrap();
        net.backward_and_step(&mut tape, &bound, loss, &mut opt).unwrap();
        assert!((net.params()[0].data()[0] - 2.4).abs() < 1e-15);
        // bias does not enter the loss
        assert_eq!(net.params()[1].data(), &[0.0]);
        assert!(matches!(
            net.backward_and_step(&mut tape, &bound, loss, &mut opt),
            Err(Error::TapeConsumed)
        ));
    }
}
