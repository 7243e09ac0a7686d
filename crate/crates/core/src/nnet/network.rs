use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::layers::{self, ConvGeom, LayerSpec};
use super::tensor::{Param, Scalar, Tensor};
use super::NnError;

/// What a layer remembers from forward for its backward pass.
#[derive(Clone, Debug)]
enum Cache<T: Scalar> {
    Conv { input: Vec<T>, geom: [usize; 3] },
    Pool { argmax: Vec<usize>, input_len: usize },
    Dense { input: Vec<T> },
    Relu { mask: Vec<bool> },
    Flatten,
    L2Norm { output: Vec<T>, norms: Vec<f64> },
}

#[derive(Clone, Debug)]
struct Tape<T: Scalar> {
    batch: usize,
    shapes: Vec<Vec<usize>>,
    caches: Vec<Cache<T>>,
}

/// A feed-forward stack of layers with its parameters.
///
/// `forward` records a tape which `backward` consumes; `infer` is the
/// tape-free path for frozen networks and can be shared across threads.
#[derive(Clone, Debug)]
pub struct Network<T: Scalar = f32> {
    input_shape: Vec<usize>,
    specs: Vec<LayerSpec>,
    /// Per-layer per-sample output shapes.
    shapes: Vec<Vec<usize>>,
    params: Vec<Param<T>>,
    /// For parameterized layers: index of the weight param (bias follows).
    param_slot: Vec<Option<usize>>,
    tape: Option<Tape<T>>,
    zero_rows_seen: bool,
}

impl<T: Scalar> Network<T> {
    /// Builds a network and initializes weights uniformly in
    /// `±sqrt(6 / fan_in)` from a ChaCha stream seeded with `seed`; biases
    /// start at zero.
    pub fn new(input_shape: Vec<usize>, specs: Vec<LayerSpec>, seed: u64) -> Result<Self, NnError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut shapes = Vec::with_capacity(specs.len());
        let mut params = Vec::new();
        let mut param_slot = Vec::with_capacity(specs.len());
        let mut current = input_shape.clone();
        for (i, spec) in specs.iter().enumerate() {
            spec.validate().map_err(|msg| NnError::Layer {
                index: i,
                kind: spec.kind(),
                msg,
            })?;
            current = spec.output_shape(&current).map_err(|msg| NnError::Layer {
                index: i,
                kind: spec.kind(),
                msg,
            })?;
            shapes.push(current.clone());
            if let Some((wshape, bshape, fan_in)) = spec.param_shapes() {
                let limit = (6.0 / fan_in as f64).sqrt();
                let n: usize = wshape.iter().product();
                let w: Vec<T> = (0..n)
                    .map(|_| T::from_f64(rng.gen_range(-limit..limit)))
                    .collect();
                param_slot.push(Some(params.len()));
                params.push(Param::new(
                    format!("{i}.{}.weight", spec.kind()),
                    Tensor::new(wshape, w)?,
                ));
                params.push(Param::new(
                    format!("{i}.{}.bias", spec.kind()),
                    Tensor::zeros(bshape),
                ));
            } else {
                param_slot.push(None);
            }
        }
        Ok(Self {
            input_shape,
            specs,
            shapes,
            params,
            param_slot,
            tape: None,
            zero_rows_seen: false,
        })
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn output_shape(&self) -> &[usize] {
        self.shapes.last().map(|s| s.as_slice()).unwrap_or(&self.input_shape)
    }

    pub fn specs(&self) -> &[LayerSpec] {
        &self.specs
    }

    pub fn params(&self) -> &[Param<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param<T>] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        self.params.iter_mut().for_each(|p| p.value.zero_grad());
    }

    /// True when any l2norm layer has seen an exactly-zero row since the
    /// last call to `take_zero_row_flag`.
    pub fn take_zero_row_flag(&mut self) -> bool {
        std::mem::take(&mut self.zero_rows_seen)
    }

    /// Same architecture and parameter values in another precision.
    pub fn cast<U: Scalar>(&self) -> Network<U> {
        Network {
            input_shape: self.input_shape.clone(),
            specs: self.specs.clone(),
            shapes: self.shapes.clone(),
            params: self.params.iter().map(|p| p.cast()).collect(),
            param_slot: self.param_slot.clone(),
            tape: None,
            zero_rows_seen: false,
        }
    }

    fn check_input(&self, input: &Tensor<T>) -> Result<usize, NnError> {
        let shape = input.shape();
        if shape.len() != self.input_shape.len() + 1 || shape[1..] != self.input_shape[..] {
            return Err(NnError::Shape(format!(
                "network expects [batch, {}], got {shape:?}",
                self.input_shape
                    .iter()
                    .map(|d| d.to_string())
                    .collect::<Vec<_>>()
                    .join(", ")
            )));
        }
        Ok(shape[0])
    }

    /// Forward pass that records what backward needs.
    pub fn forward(&mut self, input: &Tensor<T>) -> Result<Tensor<T>, NnError> {
        let (out, tape, zero) = self.run(input, true, self.specs.len())?;
        self.tape = tape;
        self.zero_rows_seen |= zero;
        Ok(out)
    }

    /// Forward pass without recording; does not touch the network.
    pub fn infer(&self, input: &Tensor<T>) -> Result<Tensor<T>, NnError> {
        Ok(self.run(input, false, self.specs.len())?.0)
    }

    /// Forward through the first `layers` layers only.
    pub fn infer_prefix(&self, input: &Tensor<T>, layers: usize) -> Result<Tensor<T>, NnError> {
        Ok(self.run(input, false, layers.min(self.specs.len()))?.0)
    }

    fn run(
        &self,
        input: &Tensor<T>,
        record: bool,
        upto: usize,
    ) -> Result<(Tensor<T>, Option<Tape<T>>, bool), NnError> {
        let n = self.check_input(input)?;
        let mut x: Vec<T> = input.data().to_vec();
        let mut shape = self.input_shape.clone();
        let mut caches = Vec::with_capacity(if record { upto } else { 0 });
        let mut zero_seen = false;
        for (i, spec) in self.specs[..upto].iter().enumerate() {
            let out_shape = &self.shapes[i];
            let (y, cache) = match *spec {
                LayerSpec::Conv2d {
                    out_channels,
                    kernel,
                    stride,
                    padding,
                    ..
                } => {
                    let g = ConvGeom {
                        n,
                        c_in: shape[0],
                        h: shape[1],
                        w: shape[2],
                        c_out: out_channels,
                        k: kernel,
                        s: stride,
                        p: padding,
                        oh: out_shape[1],
                        ow: out_shape[2],
                    };
                    let slot = self.param_slot[i].expect("conv has params");
                    let y = layers::conv2d_forward(
                        &g,
                        &x,
                        self.params[slot].value.data(),
                        self.params[slot + 1].value.data(),
                    );
                    let cache = record.then(|| Cache::Conv {
                        input: std::mem::take(&mut x),
                        geom: [shape[0], shape[1], shape[2]],
                    });
                    (y, cache)
                }
                LayerSpec::MaxPool2d { size, stride } => {
                    let (y, argmax, _, _) =
                        layers::maxpool_forward(&x, n * shape[0], shape[1], shape[2], size, stride);
                    (
                        y,
                        record.then(|| Cache::Pool {
                            argmax,
                            input_len: x.len(),
                        }),
                    )
                }
                LayerSpec::Dense { inputs, outputs } => {
                    let slot = self.param_slot[i].expect("dense has params");
                    let y = layers::dense_forward(
                        &x,
                        n,
                        inputs,
                        outputs,
                        self.params[slot].value.data(),
                        self.params[slot + 1].value.data(),
                    );
                    let cache = record.then(|| Cache::Dense {
                        input: std::mem::take(&mut x),
                    });
                    (y, cache)
                }
                LayerSpec::Relu => {
                    let mask: Vec<bool> = x.iter().map(|&v| v > T::ZERO).collect();
                    let y = x
                        .iter()
                        .zip(&mask)
                        .map(|(&v, &m)| if m { v } else { T::ZERO })
                        .collect();
                    (y, record.then_some(Cache::Relu { mask }))
                }
                LayerSpec::Flatten => (std::mem::take(&mut x), record.then_some(Cache::Flatten)),
                LayerSpec::L2Norm => {
                    let d = shape[0];
                    let (y, norms, zero) = layers::l2norm_forward(&x, n, d);
                    if zero {
                        log::warn!("l2norm layer {i}: zero input row left as zero vector");
                        zero_seen = true;
                    }
                    let cache = record.then(|| Cache::L2Norm {
                        output: y.clone(),
                        norms,
                    });
                    (y, cache)
                }
            };
            if let Some(c) = cache {
                caches.push(c);
            }
            x = y;
            shape = out_shape.clone();
        }
        let mut full = vec![n];
        full.extend_from_slice(&shape);
        let out = Tensor::new(full, x)?;
        let tape = record.then(|| Tape {
            batch: n,
            shapes: std::iter::once(self.input_shape.clone())
                .chain(self.shapes.iter().cloned())
                .collect(),
            caches,
        });
        Ok((out, tape, zero_seen))
    }

    /// Backpropagates `grad_output` (d loss / d output) through the tape from
    /// the most recent `forward`, accumulating into parameter gradients.
    /// Returns d loss / d input.
    pub fn backward(&mut self, grad_output: &Tensor<T>) -> Result<Tensor<T>, NnError> {
        let tape = self.tape.take().ok_or(NnError::NoForward)?;
        let n = tape.batch;
        let mut expected = vec![n];
        expected.extend_from_slice(self.output_shape());
        if grad_output.shape() != expected.as_slice() {
            return Err(NnError::Shape(format!(
                "output gradient has shape {:?}, expected {expected:?}",
                grad_output.shape()
            )));
        }
        let mut g: Vec<T> = grad_output.data().to_vec();
        for (i, cache) in tape.caches.into_iter().enumerate().rev() {
            let in_shape = &tape.shapes[i];
            let out_shape = &tape.shapes[i + 1];
            g = match (&self.specs[i], cache) {
                (
                    &LayerSpec::Conv2d {
                        out_channels,
                        kernel,
                        stride,
                        padding,
                        ..
                    },
                    Cache::Conv { input, geom },
                ) => {
                    let geo = ConvGeom {
                        n,
                        c_in: geom[0],
                        h: geom[1],
                        w: geom[2],
                        c_out: out_channels,
                        k: kernel,
                        s: stride,
                        p: padding,
                        oh: out_shape[1],
                        ow: out_shape[2],
                    };
                    let slot = self.param_slot[i].expect("conv has params");
                    let weight = self.params[slot].value.data().to_vec();
                    let (wpart, bpart) = self.params.split_at_mut(slot + 1);
                    layers::conv2d_backward(
                        &geo,
                        &input,
                        &weight,
                        &g,
                        wpart[slot].value.grad_mut(),
                        bpart[0].value.grad_mut(),
                    )
                }
                (&LayerSpec::MaxPool2d { .. }, Cache::Pool { argmax, input_len }) => {
                    let mut gx = vec![T::ZERO; input_len];
                    for (&idx, &gv) in argmax.iter().zip(&g) {
                        gx[idx] += gv;
                    }
                    gx
                }
                (&LayerSpec::Dense { inputs, outputs }, Cache::Dense { input }) => {
                    let slot = self.param_slot[i].expect("dense has params");
                    let weight = self.params[slot].value.data().to_vec();
                    let (wpart, bpart) = self.params.split_at_mut(slot + 1);
                    layers::dense_backward(
                        &input,
                        n,
                        inputs,
                        outputs,
                        &weight,
                        &g,
                        wpart[slot].value.grad_mut(),
                        bpart[0].value.grad_mut(),
                    )
                }
                (LayerSpec::Relu, Cache::Relu { mask }) => g
                    .iter()
                    .zip(&mask)
                    .map(|(&v, &m)| if m { v } else { T::ZERO })
                    .collect(),
                (LayerSpec::Flatten, Cache::Flatten) => g,
                (LayerSpec::L2Norm, Cache::L2Norm { output, norms }) => {
                    layers::l2norm_backward(&output, &norms, &g, in_shape[0])
                }
                _ => unreachable!("tape out of sync with layer list"),
            };
        }
        let mut full = vec![n];
        full.extend_from_slice(&self.input_shape);
        Tensor::new(full, g)
    }

    /// Named parameter tensors for checkpointing.
    pub fn state(&self) -> Vec<(String, Tensor<T>)> {
        self.params
            .iter()
            .map(|p| {
                let mut v = p.value.clone();
                v.clear_grad();
                (p.name.clone(), v)
            })
            .collect()
    }

    /// Overwrites parameters by name; every parameter must be present with a
    /// matching shape.
    pub fn load_state(&mut self, records: &[(String, Tensor<T>)]) -> Result<(), NnError> {
        let mut staged = Vec::with_capacity(self.params.len());
        for p in &self.params {
            let (_, t) = records
                .iter()
                .find(|(name, _)| name == &p.name)
                .ok_or_else(|| NnError::Checkpoint(format!("missing parameter {}", p.name)))?;
            if t.shape() != p.value.shape() {
                return Err(NnError::Checkpoint(format!(
                    "parameter {} has shape {:?}, network expects {:?}",
                    p.name,
                    t.shape(),
                    p.value.shape()
                )));
            }
            staged.push(t.data().to_vec());
        }
        for (p, data) in self.params.iter_mut().zip(staged) {
            p.value.data_mut().copy_from_slice(&data);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relu_forward() {
        let net = Network::<f32>::new(vec![3], vec![LayerSpec::Relu], 0).unwrap();
        let out = net.infer(&Tensor::new(vec![1, 3], vec![-1.0, 0.0, 2.0]).unwrap()).unwrap();
        assert_eq!(out.data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn l2norm_forward_three_four_five() {
        let net = Network::<f32>::new(vec![2], vec![LayerSpec::L2Norm], 0).unwrap();
        let out = net.infer(&Tensor::new(vec![1, 2], vec![3.0, 4.0]).unwrap()).unwrap();
        assert_eq!(out.data(), &[0.6, 0.8]);
    }

    #[test]
    fn one_by_one_conv_scales() {
        let mut net = Network::<f32>::new(
            vec![1, 2, 2],
            vec![LayerSpec::Conv2d {
                in_channels: 1,
                out_channels: 1,
                kernel: 1,
                stride: 1,
                padding: 0,
            }],
            0,
        )
        .unwrap();
        net.params_mut()[0].value.data_mut()[0] = 2.0;
        let out = net.infer(&Tensor::filled(vec![1, 1, 2, 2], 1.0)).unwrap();
        assert_eq!(out.shape(), &[1, 1, 2, 2]);
        assert_eq!(out.data(), &[2.0; 4]);
    }

    #[test]
    fn dense_gradient_linear_case() {
        let mut net = Network::<f64>::new(vec![1], vec![LayerSpec::dense(1, 1)], 3).unwrap();
        net.params_mut()[0].value.data_mut()[0] = -0.7;
        net.forward(&Tensor::new(vec![1, 1], vec![2.0]).unwrap()).unwrap();
        net.backward(&Tensor::new(vec![1, 1], vec![1.0]).unwrap()).unwrap();
        assert_eq!(net.params()[0].value.grad().unwrap(), &[2.0]);
        assert_eq!(net.params()[1].value.grad().unwrap(), &[1.0]);
    }

    #[test]
    fn backward_requires_forward() {
        let mut net = Network::<f32>::new(vec![2], vec![LayerSpec::Relu], 0).unwrap();
        let err = net.backward(&Tensor::zeros(vec![1, 2])).unwrap_err();
        assert!(matches!(err, NnError::NoForward));
    }

    #[test]
    fn shape_errors_name_the_layer() {
        let err = Network::<f32>::new(
            vec![3, 8, 8],
            vec![LayerSpec::conv3x3(3, 4), LayerSpec::dense(10, 2)],
            0,
        )
        .unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("layer 1") && msg.contains("dense"), "{msg}");

        let net = Network::<f32>::new(vec![2], vec![LayerSpec::Relu], 0).unwrap();
        assert!(net.infer(&Tensor::zeros(vec![1, 3])).is_err());
    }

    #[test]
    fn invalid_specs_rejected() {
        let bad = LayerSpec::Conv2d {
            in_channels: 1,
            out_channels: 1,
            kernel: 0,
            stride: 1,
            padding: 0,
        };
        assert!(Network::<f32>::new(vec![1, 4, 4], vec![bad], 0).is_err());
        assert!(Network::<f32>::new(vec![4], vec![LayerSpec::dense(4, 0)], 0).is_err());
    }

    #[test]
    fn seeded_init_is_reproducible() {
        let specs = vec![LayerSpec::conv3x3(1, 4), LayerSpec::Flatten, LayerSpec::dense(64, 3)];
        let a = Network::<f32>::new(vec![1, 4, 4], specs.clone(), 11).unwrap();
        let b = Network::<f32>::new(vec![1, 4, 4], specs.clone(), 11).unwrap();
        let c = Network::<f32>::new(vec![1, 4, 4], specs, 12).unwrap();
        assert_eq!(a.params(), b.params());
        assert_ne!(a.params(), c.params());
    }
}
