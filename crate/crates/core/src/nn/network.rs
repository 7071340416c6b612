use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::layers::{BatchNorm, Conv2d, Dense, Layer, LayerSpec, MaxPool2d};
use super::{Real, Tensor};
use crate::error::{structure, Error, Result};

/// Whether a forward pass caches activations and updates batch statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

/// A sequential stack of layers with numbered skip slots.
#[derive(Debug, Clone)]
pub struct Network<T> {
    input_shape: Vec<usize>,
    layers: Vec<Layer<T>>,
    slots: usize,
}

impl<T: Real> Network<T> {
    /// Builds and initializes a network for inputs of `input_shape` (no batch
    /// axis). Every layer's output shape is derived up front; an impossible
    /// stack is rejected with [`Error::Structure`] naming the layer.
    pub fn build(input_shape: &[usize], specs: &[LayerSpec], seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut shape = input_shape.to_vec();
        let mut saved: Vec<Option<Vec<usize>>> = Vec::new();
        let mut layers = Vec::with_capacity(specs.len());
        for (idx, spec) in specs.iter().enumerate() {
            let name = format!("layer {idx} ({})", spec_kind(spec));
            let layer = match *spec {
                LayerSpec::Dense { units } => match shape.as_slice() {
                    [f] => Layer::Dense(Dense::new(*f, units, &mut rng)),
                    _ => return Err(structure(&name, format!("dense needs a flat input, got {shape:?}"))),
                },
                LayerSpec::Conv2d { filters, kernel, stride } => {
                    if kernel == 0 || stride == 0 || filters == 0 {
                        return Err(structure(&name, "kernel, stride and filters must be positive"));
                    }
                    match shape.as_slice() {
                        [c, _, _] => Layer::Conv2d(Conv2d::new(*c, filters, kernel, stride, &mut rng)),
                        _ => return Err(structure(&name, format!("convolution needs a [C, H, W] input, got {shape:?}"))),
                    }
                }
                LayerSpec::BatchNorm => Layer::BatchNorm(BatchNorm::new(shape[0])),
                LayerSpec::Relu => Layer::Relu { mask: None },
                LayerSpec::MaxPool2d { size, stride } => {
                    if size == 0 || stride == 0 {
                        return Err(structure(&name, "pool size and stride must be positive"));
                    }
                    Layer::MaxPool2d(MaxPool2d::new(size, stride))
                }
                LayerSpec::Flatten => Layer::Flatten { in_shape: None },
                LayerSpec::SkipSave { slot } => Layer::SkipSave { slot },
                LayerSpec::SkipAdd { slot, project } => {
                    let projection = match (project, saved.get(slot).and_then(|s| s.as_ref())) {
                        (true, Some(src)) if src.len() == 3 && shape.len() == 3 => {
                            Some(Conv2d::new(src[0], shape[0], 1, 1, &mut rng))
                        }
                        (true, Some(src)) => {
                            return Err(structure(&name, format!("cannot project skip {src:?} onto {shape:?}")))
                        }
                        _ => None,
                    };
                    Layer::SkipAdd { slot, projection }
                }
            };
            let out = layer.output_shape(&name, &shape, &saved)?;
            if let Layer::SkipSave { slot } = layer {
                if saved.len() <= slot {
                    saved.resize(slot + 1, None);
                }
                saved[slot] = Some(shape.clone());
            }
            shape = out;
            layers.push(layer);
        }
        Ok(Network {
            input_shape: input_shape.to_vec(),
            layers,
            slots: saved.len(),
        })
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn layers(&self) -> &[Layer<T>] {
        &self.layers
    }

    /// `(layer kind, output shape)` for every layer.
    pub fn shape_trace(&self) -> Result<Vec<(&'static str, Vec<usize>)>> {
        let mut shape = self.input_shape.clone();
        let mut saved: Vec<Option<Vec<usize>>> = vec![None; self.slots];
        let mut trace = Vec::with_capacity(self.layers.len());
        for (idx, layer) in self.layers.iter().enumerate() {
            let out = layer.output_shape(&format!("layer {idx} ({})", layer.kind()), &shape, &saved)?;
            if let Layer::SkipSave { slot } = layer {
                saved[*slot] = Some(shape.clone());
            }
            trace.push((layer.kind(), out.clone()));
            shape = out;
        }
        Ok(trace)
    }

    pub fn output_shape(&self) -> Result<Vec<usize>> {
        Ok(self.shape_trace()?.pop().map(|(_, s)| s).unwrap_or_else(|| self.input_shape.clone()))
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        if x.shape().len() != self.input_shape.len() + 1 || x.shape()[1..] != self.input_shape[..] {
            return Err(structure(
                "input",
                format!("expected [B, {:?}], got {:?}", self.input_shape, x.shape()),
            ));
        }
        if x.batch() == 0 {
            return Err(structure("input", "empty batch"));
        }
        Ok(())
    }

    /// Forward pass that caches activations for [`Network::backward`] and
    /// updates batch-norm running statistics.
    pub fn forward_train(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.forward(x, Mode::Train)
    }

    /// Pure inference pass using running statistics.
    pub fn forward_infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.infer_with(x, |_, _| {})
    }

    /// Inference pass that also returns every layer's actual output shape
    /// (without the batch axis).
    pub fn forward_trace(&self, x: &Tensor<T>) -> Result<(Tensor<T>, Vec<(&'static str, Vec<usize>)>)> {
        let mut trace = Vec::with_capacity(self.layers.len());
        let out = self.infer_with(x, |layer, h| trace.push((layer.kind(), h.shape()[1..].to_vec())))?;
        Ok((out, trace))
    }

    fn infer_with(&self, x: &Tensor<T>, mut visit: impl FnMut(&Layer<T>, &Tensor<T>)) -> Result<Tensor<T>> {
        self.check_input(x)?;
        let mut slots: Vec<Option<Tensor<T>>> = vec![None; self.slots];
        let mut h = x.clone();
        for layer in &self.layers {
            h = match layer {
                Layer::Dense(d) => d.infer(&h),
                Layer::Conv2d(c) => c.infer(&h),
                Layer::BatchNorm(bn) => bn.infer(&h),
                Layer::Relu { .. } => relu(h, None),
                Layer::MaxPool2d(p) => MaxPool2d::new(p.size, p.stride).forward(&h, false),
                Layer::Flatten { .. } => {
                    let b = h.batch();
                    let n = h.item_len();
                    h.reshape(vec![b, n])
                }
                Layer::SkipSave { slot } => {
                    slots[*slot] = Some(h.clone());
                    h
                }
                Layer::SkipAdd { slot, projection } => {
                    let skip = slots[*slot].as_ref().expect("skip slot saved");
                    let skip = match projection {
                        Some(p) => p.infer(skip),
                        None => skip.clone(),
                    };
                    let mut h = h;
                    h.add_assign(&skip);
                    h
                }
            };
            visit(layer, &h);
        }
        Ok(h)
    }

    fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        self.check_input(x)?;
        let train = mode == Mode::Train;
        let mut slots: Vec<Option<Tensor<T>>> = vec![None; self.slots];
        let mut h = x.clone();
        for (idx, layer) in self.layers.iter_mut().enumerate() {
            h = match layer {
                Layer::Dense(d) => d.forward(&h, train),
                Layer::Conv2d(c) => c.forward(&h, train),
                Layer::BatchNorm(bn) => bn.forward(&h, train),
                Layer::Relu { mask } => {
                    if train {
                        *mask = Some(h.data().iter().map(|&v| v > T::zero()).collect());
                    }
                    relu(h, None)
                }
                Layer::MaxPool2d(p) => p.forward(&h, train),
                Layer::Flatten { in_shape } => {
                    *in_shape = Some(h.shape().to_vec());
                    let b = h.batch();
                    let n = h.item_len();
                    h.reshape(vec![b, n])
                }
                Layer::SkipSave { slot } => {
                    slots[*slot] = Some(h.clone());
                    h
                }
                Layer::SkipAdd { slot, projection } => {
                    let skip = slots[*slot].as_ref().expect("skip slot saved");
                    let skip = match projection {
                        Some(p) => p.forward(skip, train),
                        None => skip.clone(),
                    };
                    let mut h = h;
                    h.add_assign(&skip);
                    h
                }
            };
            if !h.all_finite() {
                return Err(Error::NonFinite(format!("activation of layer {idx} ({})", layer.kind())));
            }
        }
        Ok(h)
    }

    /// Back-propagates `dy` through the activations cached by the last
    /// [`Network::forward_train`], accumulating parameter gradients.
    pub fn backward(&mut self, dy: &Tensor<T>) -> Tensor<T> {
        let mut slot_grads: Vec<Option<Tensor<T>>> = vec![None; self.slots];
        let mut g = dy.clone();
        for layer in self.layers.iter_mut().rev() {
            g = match layer {
                Layer::Dense(d) => d.backward(&g),
                Layer::Conv2d(c) => c.backward(&g),
                Layer::BatchNorm(bn) => bn.backward(&g),
                Layer::Relu { mask } => relu(g, mask.take().as_deref()),
                Layer::MaxPool2d(p) => p.backward(&g),
                Layer::Flatten { in_shape } => g.reshape(in_shape.take().expect("Flatten::backward without forward")),
                Layer::SkipSave { slot } => {
                    if let Some(s) = slot_grads[*slot].take() {
                        g.add_assign(&s);
                    }
                    g
                }
                Layer::SkipAdd { slot, projection } => {
                    let skip_grad = match projection {
                        Some(p) => p.backward(&g),
                        None => g.clone(),
                    };
                    match &mut slot_grads[*slot] {
                        Some(acc) => acc.add_assign(&skip_grad),
                        empty => *empty = Some(skip_grad),
                    }
                    g
                }
            };
        }
        g
    }

    pub fn zero_grad(&mut self) {
        for (_, g) in self.params_mut() {
            g.iter_mut().for_each(|v| *v = T::zero());
        }
    }

    /// Trainable `(value, gradient)` pairs in declaration order.
    pub fn params_mut(&mut self) -> Vec<(&mut [T], &mut [T])> {
        let mut out: Vec<(&mut [T], &mut [T])> = Vec::new();
        for layer in &mut self.layers {
            match layer {
                Layer::Dense(d) => {
                    out.push((&mut d.weight, &mut d.grad_weight));
                    out.push((&mut d.bias, &mut d.grad_bias));
                }
                Layer::Conv2d(c) | Layer::SkipAdd { projection: Some(c), .. } => {
                    out.push((&mut c.weight, &mut c.grad_weight));
                    out.push((&mut c.bias, &mut c.grad_bias));
                }
                Layer::BatchNorm(bn) => {
                    out.push((&mut bn.gamma, &mut bn.grad_gamma));
                    out.push((&mut bn.beta, &mut bn.grad_beta));
                }
                _ => {}
            }
        }
        out
    }

    /// Every persisted array (trainable parameters plus batch-norm running
    /// statistics) in declaration order.
    pub fn state(&self) -> Vec<&[T]> {
        let mut out: Vec<&[T]> = Vec::new();
        for layer in &self.layers {
            match layer {
                Layer::Dense(d) => out.extend([&d.weight[..], &d.bias[..]]),
                Layer::Conv2d(c) | Layer::SkipAdd { projection: Some(c), .. } => {
                    out.extend([&c.weight[..], &c.bias[..]])
                }
                Layer::BatchNorm(bn) => {
                    out.extend([&bn.gamma[..], &bn.beta[..], &bn.running_mean[..], &bn.running_var[..]])
                }
                _ => {}
            }
        }
        out
    }

    pub fn state_mut(&mut self) -> Vec<&mut [T]> {
        let mut out: Vec<&mut [T]> = Vec::new();
        for layer in &mut self.layers {
            match layer {
                Layer::Dense(d) => out.extend([&mut d.weight[..], &mut d.bias[..]]),
                Layer::Conv2d(c) | Layer::SkipAdd { projection: Some(c), .. } => {
                    out.extend([&mut c.weight[..], &mut c.bias[..]])
                }
                Layer::BatchNorm(bn) => out.extend([
                    &mut bn.gamma[..],
                    &mut bn.beta[..],
                    &mut bn.running_mean[..],
                    &mut bn.running_var[..],
                ]),
                _ => {}
            }
        }
        out
    }

    /// Number of trainable scalars.
    pub fn parameter_count(&self) -> usize {
        let mut n = 0;
        for layer in &self.layers {
            n += match layer {
                Layer::Dense(d) => d.weight.len() + d.bias.len(),
                Layer::Conv2d(c) | Layer::SkipAdd { projection: Some(c), .. } => c.weight.len() + c.bias.len(),
                Layer::BatchNorm(bn) => 2 * bn.channels,
                _ => 0,
            };
        }
        n
    }
}

fn spec_kind(spec: &LayerSpec) -> &'static str {
    match spec {
        LayerSpec::Dense { .. } => "dense",
        LayerSpec::Conv2d { .. } => "conv2d",
        LayerSpec::BatchNorm => "batch_norm",
        LayerSpec::Relu => "relu",
        LayerSpec::MaxPool2d { .. } => "max_pool2d",
        LayerSpec::Flatten => "flatten",
        LayerSpec::SkipSave { .. } => "skip_save",
        LayerSpec::SkipAdd { .. } => "skip_add",
    }
}

/// Forward ReLU (no mask) or backward gating by a saved mask.
fn relu<T: Real>(mut t: Tensor<T>, mask: Option<&[bool]>) -> Tensor<T> {
    match mask {
        None => t.data_mut().iter_mut().for_each(|v| *v = v.max(T::zero())),
        Some(m) => t
            .data_mut()
            .iter_mut()
            .zip(m)
            .for_each(|(v, &keep)| {
                if !keep {
                    *v = T::zero()
                }
            }),
    }
    t
}
