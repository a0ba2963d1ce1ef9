//! Layer specifications, shape inference, and the sequential network.

use std::ops::Range;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::layers::{self, Mode};
use super::tensor::Tensor;
use crate::error::{arg_err, format_err, Result};
use crate::scalar::Scalar;

/// One layer of a sequential network. Convolutions always use stride 1.
#[derive(Debug, Clone, PartialEq)]
pub enum LayerSpec {
    Conv { out_channels: usize, kernel_h: usize, kernel_w: usize, pad: usize },
    Relu,
    MaxPool2,
    Fc { out_units: usize },
    Dropout { rate: f64 },
    Softmax,
}

impl LayerSpec {
    pub fn conv(out_channels: usize, kernel: usize, pad: usize) -> Self {
        LayerSpec::Conv { out_channels, kernel_h: kernel, kernel_w: kernel, pad }
    }

    pub fn has_params(&self) -> bool {
        matches!(self, LayerSpec::Conv { .. } | LayerSpec::Fc { .. })
    }

    /// Output `(c, h, w)` for an input of `(c, h, w)`.
    pub fn output_shape(&self, (c, h, w): (usize, usize, usize)) -> Result<(usize, usize, usize)> {
        match *self {
            LayerSpec::Conv { out_channels, kernel_h, kernel_w, pad } => {
                if kernel_h == 0 || kernel_w == 0 || out_channels == 0 {
                    return arg_err("conv layer needs a kernel of at least 1x1 and one output channel");
                }
                if h + 2 * pad < kernel_h || w + 2 * pad < kernel_w {
                    return arg_err(format!("conv {kernel_h}x{kernel_w} pad {pad} does not fit a {h}x{w} input"));
                }
                Ok((out_channels, h + 2 * pad - kernel_h + 1, w + 2 * pad - kernel_w + 1))
            }
            LayerSpec::MaxPool2 => {
                if h % 2 != 0 || w % 2 != 0 {
                    return arg_err(format!("maxpool2 needs even spatial dims, got {h}x{w}"));
                }
                Ok((c, h / 2, w / 2))
            }
            LayerSpec::Fc { out_units } => {
                if out_units == 0 {
                    return arg_err("fc layer needs at least one output unit");
                }
                Ok((out_units, 1, 1))
            }
            LayerSpec::Dropout { rate } => {
                if !(0.0..1.0).contains(&rate) {
                    return arg_err(format!("dropout rate {rate} outside [0, 1)"));
                }
                Ok((c, h, w))
            }
            LayerSpec::Relu | LayerSpec::Softmax => Ok((c, h, w)),
        }
    }
}

/// A named, ordered layer list with a fixed per-sample input shape.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkSpec {
    pub name: String,
    pub layers: Vec<LayerSpec>,
    /// `(channels, rows, cols)` of one input sample.
    pub input: (usize, usize, usize),
}

pub const PATCH_INPUT: (usize, usize, usize) = (1, 16, 16);
pub const WINDOW_INPUT: (usize, usize, usize) = (1, 128, 64);

impl NetworkSpec {
    /// Shapes after each layer, starting with the input.
    pub fn shapes(&self) -> Result<Vec<(usize, usize, usize)>> {
        let mut shapes = vec![self.input];
        for (i, layer) in self.layers.iter().enumerate() {
            let next = layer
                .output_shape(*shapes.last().expect("non-empty"))
                .map_err(|e| crate::Error::Argument(format!("{} layer {}: {e}", self.name, i + 1)))?;
            shapes.push(next);
        }
        Ok(shapes)
    }

    pub fn output_shape(&self) -> Result<(usize, usize, usize)> {
        Ok(*self.shapes()?.last().expect("non-empty"))
    }

    pub fn with_input(mut self, input: (usize, usize, usize)) -> Self {
        self.input = input;
        self
    }

    pub fn hognet3() -> Self {
        Self::hognet3_with([40, 144, 36])
    }

    /// HOGNet3 layout with custom filter counts.
    pub fn hognet3_with(widths: [usize; 3]) -> Self {
        NetworkSpec {
            name: "hognet3".into(),
            layers: vec![
                LayerSpec::conv(widths[0], 7, 3),
                LayerSpec::Relu,
                LayerSpec::MaxPool2,
                LayerSpec::conv(widths[1], 5, 0),
                LayerSpec::Relu,
                LayerSpec::MaxPool2,
                LayerSpec::conv(widths[2], 2, 0),
                LayerSpec::Relu,
            ],
            input: PATCH_INPUT,
        }
    }

    pub fn covnet4() -> Self {
        Self::covnet4_with([40, 144, 288, 36])
    }

    pub fn covnet4_with(widths: [usize; 4]) -> Self {
        NetworkSpec {
            name: "covnet4".into(),
            layers: vec![
                LayerSpec::conv(widths[0], 7, 3),
                LayerSpec::Relu,
                LayerSpec::MaxPool2,
                LayerSpec::conv(widths[1], 5, 0),
                LayerSpec::Relu,
                LayerSpec::MaxPool2,
                LayerSpec::conv(widths[2], 2, 0),
                LayerSpec::Relu,
                LayerSpec::conv(widths[3], 1, 0),
            ],
            input: PATCH_INPUT,
        }
    }

    /// HOGNet3's convolutional stages followed by a 64-unit reconstruction layer.
    pub fn autonet3() -> Self {
        Self::autonet3_with([40, 144, 36])
    }

    pub fn autonet3_with(widths: [usize; 3]) -> Self {
        let mut spec = Self::hognet3_with(widths);
        spec.name = "autonet3".into();
        spec.layers.push(LayerSpec::Fc { out_units: 64 });
        spec
    }

    /// Backbone convolutional layers plus dropout and a two-way fc head, on
    /// 64×128 windows. Any trailing fc layer of `backbone` is dropped first.
    pub fn detector(backbone: &NetworkSpec, dropout: f64) -> Self {
        let mut layers: Vec<LayerSpec> = backbone.layers.clone();
        while matches!(layers.last(), Some(LayerSpec::Fc { .. } | LayerSpec::Dropout { .. } | LayerSpec::Softmax)) {
            layers.pop();
        }
        layers.push(LayerSpec::Dropout { rate: dropout });
        layers.push(LayerSpec::Fc { out_units: 2 });
        NetworkSpec { name: format!("{}-detector", backbone.name), layers, input: WINDOW_INPUT }
    }

    /// Number of leading layers forming the convolutional backbone (all
    /// layers before the first fc or dropout).
    pub fn backbone_len(&self) -> usize {
        self.layers
            .iter()
            .position(|l| matches!(l, LayerSpec::Fc { .. } | LayerSpec::Dropout { .. }))
            .unwrap_or(self.layers.len())
    }

    /// Parameter tensor names and shapes in storage order.
    pub fn param_shapes(&self) -> Result<Vec<(String, Vec<usize>)>> {
        let shapes = self.shapes()?;
        let mut out = Vec::new();
        let (mut nconv, mut nfc) = (0, 0);
        for (layer, &(c, h, w)) in self.layers.iter().zip(&shapes) {
            match *layer {
                LayerSpec::Conv { out_channels, kernel_h, kernel_w, .. } => {
                    nconv += 1;
                    out.push((format!("conv{nconv}.w"), vec![out_channels, c, kernel_h, kernel_w]));
                    out.push((format!("conv{nconv}.b"), vec![out_channels]));
                }
                LayerSpec::Fc { out_units } => {
                    nfc += 1;
                    out.push((format!("fc{nfc}.w"), vec![out_units, c * h * w]));
                    out.push((format!("fc{nfc}.b"), vec![out_units]));
                }
                _ => {}
            }
        }
        Ok(out)
    }

    /// Reconstructs a spec from checkpoint tensor shapes.
    ///
    /// Three convolutions give the HOGNet3 layout and four the COVNet4 layout.
    /// A two-unit fc layer is read as a detector head (dropout then fc) on
    /// 64×128 windows; any other fc width is the AutoNet3 reconstruction layer.
    pub fn infer(tensors: &[(String, Vec<usize>)], dropout: f64) -> Result<Self> {
        let find = |name: &str| tensors.iter().find(|(n, _)| n == name).map(|(_, d)| d.clone());
        let mut convs = Vec::new();
        while let Some(w) = find(&format!("conv{}.w", convs.len() + 1)) {
            if w.len() != 4 {
                return format_err(format!("conv{}.w must be 4-d", convs.len() + 1));
            }
            convs.push(w);
        }
        let widths: Vec<usize> = convs.iter().map(|w| w[0]).collect();
        let mut spec = match convs.len() {
            3 => Self::hognet3_with([widths[0], widths[1], widths[2]]),
            4 => Self::covnet4_with([widths[0], widths[1], widths[2], widths[3]]),
            n => return format_err(format!("checkpoint has {n} convolutions; expected 3 or 4")),
        };
        if let Some(fc) = find("fc1.w") {
            if fc.len() != 2 {
                return format_err("fc1.w must be 2-d");
            }
            if fc[0] == 2 {
                spec = Self::detector(&spec, dropout);
            } else {
                spec.name = "autonet3".into();
                spec.layers.push(LayerSpec::Fc { out_units: fc[0] });
            }
        }
        let expected = spec.param_shapes()?;
        if expected.len() != tensors.len() {
            return format_err(format!(
                "checkpoint holds {} tensors but the inferred {} layout needs {}",
                tensors.len(),
                spec.name,
                expected.len()
            ));
        }
        for (name, dims) in &expected {
            match find(name) {
                Some(d) if &d == dims => {}
                Some(d) => return format_err(format!("tensor {name} has dims {d:?}, expected {dims:?}")),
                None => return format_err(format!("checkpoint is missing tensor {name}")),
            }
        }
        Ok(spec)
    }
}

#[derive(Debug, Clone)]
enum Aux {
    None,
    Pool(Vec<usize>),
    Drop(Option<Vec<f64>>),
}

/// Activations retained by a training forward pass.
#[derive(Debug, Clone)]
pub struct Trace<T> {
    acts: Vec<Option<Tensor<T>>>,
    dims: Vec<Vec<usize>>,
    aux: Vec<Aux>,
}

impl<T: Scalar> Trace<T> {
    pub fn output(&self) -> &Tensor<T> {
        self.acts.last().and_then(|a| a.as_ref()).expect("output is always retained")
    }
}

/// Gradient buffers aligned with [`Network::params`].
#[derive(Debug, Clone, PartialEq)]
pub struct Grads<T> {
    pub tensors: Vec<Tensor<T>>,
}

impl<T: Scalar> Grads<T> {
    pub fn zero(&mut self) {
        self.tensors.iter_mut().for_each(|t| t.fill(T::zero()));
    }
}

/// A sequential network with owned parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Network<T> {
    spec: NetworkSpec,
    names: Vec<String>,
    params: Vec<Tensor<T>>,
    /// Index into `params` of each layer's weight tensor.
    slots: Vec<Option<usize>>,
}

impl<T: Scalar> Network<T> {
    /// Fresh network: weights uniform in ±sqrt(6/(fan_in + fan_out)),
    /// biases zero.
    pub fn init(spec: NetworkSpec, seed: u64) -> Result<Self> {
        let shapes = spec.param_shapes()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Vec::with_capacity(shapes.len());
        for (name, dims) in &shapes {
            let t = if name.ends_with(".w") {
                let (fan_in, fan_out) = fans(dims);
                let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
                let data = (0..dims.iter().product::<usize>()).map(|_| T::lit(rng.gen_range(-bound..=bound))).collect();
                Tensor::from_vec(dims, data)?
            } else {
                Tensor::zeros(dims)
            };
            params.push(t);
        }
        Self::assemble(spec, params)
    }

    /// Builds a network from explicit parameters in [`NetworkSpec::param_shapes`] order.
    pub fn from_params(spec: NetworkSpec, params: Vec<Tensor<T>>) -> Result<Self> {
        let shapes = spec.param_shapes()?;
        if shapes.len() != params.len() {
            return arg_err(format!("{} needs {} tensors, got {}", spec.name, shapes.len(), params.len()));
        }
        for ((name, dims), t) in shapes.iter().zip(&params) {
            if t.dims() != dims.as_slice() {
                return arg_err(format!("{name}: expected dims {dims:?}, got {:?}", t.dims()));
            }
        }
        Self::assemble(spec, params)
    }

    fn assemble(spec: NetworkSpec, params: Vec<Tensor<T>>) -> Result<Self> {
        let names = spec.param_shapes()?.into_iter().map(|(n, _)| n).collect();
        let mut slots = Vec::with_capacity(spec.layers.len());
        let mut next = 0;
        for layer in &spec.layers {
            if layer.has_params() {
                slots.push(Some(next));
                next += 2;
            } else {
                slots.push(None);
            }
        }
        Ok(Network { spec, names, params, slots })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn params(&self) -> &[Tensor<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.params
    }

    pub fn param_names(&self) -> &[String] {
        &self.names
    }

    pub fn param(&self, name: &str) -> Option<&Tensor<T>> {
        self.names.iter().position(|n| n == name).map(|i| &self.params[i])
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    pub fn zero_grads(&self) -> Grads<T> {
        Grads { tensors: self.params.iter().map(|p| Tensor::zeros(p.dims())).collect() }
    }

    pub fn cast<U: Scalar>(&self) -> Network<U> {
        Network {
            spec: self.spec.clone(),
            names: self.names.clone(),
            params: self.params.iter().map(Tensor::cast).collect(),
            slots: self.slots.clone(),
        }
    }

    /// Changes the rate of every dropout layer.
    pub fn set_dropout(&mut self, rate: f64) -> Result<()> {
        if !(0.0..1.0).contains(&rate) {
            return arg_err(format!("dropout rate {rate} outside [0, 1)"));
        }
        for l in &mut self.spec.layers {
            if let LayerSpec::Dropout { rate: r } = l {
                *r = rate;
            }
        }
        Ok(())
    }

    fn weight_bias(&self, layer: usize) -> (&Tensor<T>, &Tensor<T>) {
        let i = self.slots[layer].expect("parametric layer");
        (&self.params[i], &self.params[i + 1])
    }

    /// Evaluation-mode forward pass through all layers.
    pub fn forward(&self, input: &Tensor<T>) -> Result<Tensor<T>> {
        self.forward_range(input, 0..self.spec.layers.len(), None)
    }

    /// Evaluation-mode forward pass through `layers`, optionally overriding
    /// the padding of the first convolution in the range.
    ///
    /// Spatial extents follow the input, so convolutional prefixes run on
    /// inputs of any sufficient size.
    pub fn forward_range(&self, input: &Tensor<T>, layers: Range<usize>, first_conv_pad: Option<usize>) -> Result<Tensor<T>> {
        if input.dims().len() != 4 {
            return arg_err(format!("network input must be (n, c, h, w), got {:?}", input.dims()));
        }
        let mut x: Option<Tensor<T>> = None;
        let mut pad_override = first_conv_pad;
        for li in layers {
            let cur = x.as_ref().unwrap_or(input);
            let next = match self.spec.layers[li] {
                LayerSpec::Conv { pad, .. } => {
                    let (w, b) = self.weight_bias(li);
                    let pad = pad_override.take().unwrap_or(pad);
                    layers::conv2d_forward(cur, w, b.data(), pad)?
                }
                LayerSpec::Relu => match x.take() {
                    Some(mut t) => {
                        t.data_mut().iter_mut().for_each(|v| {
                            if !(*v > T::zero()) {
                                *v = T::zero()
                            }
                        });
                        t
                    }
                    None => layers::relu_forward(input),
                },
                LayerSpec::MaxPool2 => layers::maxpool2_forward(cur)?.0,
                LayerSpec::Fc { .. } => {
                    let (w, b) = self.weight_bias(li);
                    layers::fully_connected_forward(cur, w, b.data())?
                }
                LayerSpec::Dropout { .. } => match x.take() {
                    Some(t) => t,
                    None => input.clone(),
                },
                LayerSpec::Softmax => layers::softmax_forward(cur),
            };
            x = Some(next);
        }
        Ok(x.unwrap_or_else(|| input.clone()))
    }

    /// Forward pass retaining what [`Network::backward`] needs.
    pub fn forward_train<R: Rng + ?Sized>(&self, input: &Tensor<T>, mode: Mode, rng: &mut R) -> Result<Trace<T>> {
        let n = self.spec.layers.len();
        let mut acts: Vec<Option<Tensor<T>>> = Vec::with_capacity(n + 1);
        let mut dims = Vec::with_capacity(n + 1);
        let mut aux = Vec::with_capacity(n);
        dims.push(input.dims().to_vec());
        acts.push(Some(input.clone()));
        for li in 0..n {
            let cur = acts[li].as_ref().expect("current activation retained");
            let (next, a) = match self.spec.layers[li] {
                LayerSpec::Conv { pad, .. } => {
                    let (w, b) = self.weight_bias(li);
                    (layers::conv2d_forward(cur, w, b.data(), pad)?, Aux::None)
                }
                LayerSpec::Relu => (layers::relu_forward(cur), Aux::None),
                LayerSpec::MaxPool2 => {
                    let (y, arg) = layers::maxpool2_forward(cur)?;
                    (y, Aux::Pool(arg))
                }
                LayerSpec::Fc { .. } => {
                    let (w, b) = self.weight_bias(li);
                    (layers::fully_connected_forward(cur, w, b.data())?, Aux::None)
                }
                LayerSpec::Dropout { rate } => {
                    let (y, mask) = layers::dropout_forward(cur, rate, mode, rng)?;
                    (y, Aux::Drop(mask.map(|m| m.iter().map(|v| v.as_f64()).collect())))
                }
                LayerSpec::Softmax => (layers::softmax_forward(cur), Aux::None),
            };
            if !self.needs_input(li) {
                acts[li] = None;
            }
            dims.push(next.dims().to_vec());
            acts.push(Some(next));
            aux.push(a);
        }
        Ok(Trace { acts, dims, aux })
    }

    /// ReLU on/off masks and max-pool winners of one forward pass. Two inputs
    /// with equal patterns lie in the same smooth piece of the network.
    pub fn activation_pattern(&self, input: &Tensor<T>) -> Result<(Tensor<T>, Vec<usize>)> {
        let trace = self.forward_train(input, Mode::Eval, &mut ChaCha8Rng::seed_from_u64(0))?;
        let mut pat = Vec::new();
        for (li, layer) in self.spec.layers.iter().enumerate() {
            match (layer, &trace.aux[li]) {
                (LayerSpec::Relu, _) => {
                    let a = trace.acts[li + 1].as_ref().expect("relu output retained");
                    pat.extend(a.data().iter().map(|v| usize::from(*v > T::zero())));
                }
                (_, Aux::Pool(arg)) => pat.extend_from_slice(arg),
                _ => {}
            }
        }
        Ok((trace.output().clone(), pat))
    }

    /// Whether backward through layer `li` reads activation `li` (its input).
    fn needs_input(&self, li: usize) -> bool {
        let own = matches!(self.spec.layers[li], LayerSpec::Conv { .. } | LayerSpec::Fc { .. });
        let produced_by_masking = li > 0 && matches!(self.spec.layers[li - 1], LayerSpec::Relu | LayerSpec::Softmax);
        own || produced_by_masking || li == 0
    }

    /// Accumulates parameter gradients of a loss whose gradient with respect
    /// to the network output is `grad_out`. Returns the input gradient when
    /// `want_input_grad` is set.
    pub fn backward(&self, trace: &Trace<T>, grad_out: &Tensor<T>, grads: &mut Grads<T>, want_input_grad: bool) -> Result<Option<Tensor<T>>> {
        let n = self.spec.layers.len();
        if grad_out.dims() != trace.dims[n].as_slice() {
            return arg_err(format!("output gradient {:?} does not match output {:?}", grad_out.dims(), trace.dims[n]));
        }
        let mut g = grad_out.clone();
        for li in (0..n).rev() {
            let need_in = li > 0 || want_input_grad;
            let act = |k: usize| trace.acts[k].as_ref().expect("activation retained for backward");
            g = match &self.spec.layers[li] {
                LayerSpec::Conv { pad, .. } => {
                    let (w, _) = self.weight_bias(li);
                    let slot = self.slots[li].expect("parametric layer");
                    let (gw, gb) = grads.tensors.split_at_mut(slot + 1);
                    let mut gi = need_in.then(|| Tensor::zeros(&trace.dims[li]));
                    layers::conv2d_backward_into(act(li), w, *pad, &g, gw[slot].data_mut(), gb[0].data_mut(), gi.as_mut().map(|t| t.data_mut()))?;
                    match gi {
                        Some(t) => t,
                        None => return Ok(None),
                    }
                }
                LayerSpec::Relu => layers::relu_backward(act(li + 1), &g),
                LayerSpec::MaxPool2 => match &trace.aux[li] {
                    Aux::Pool(arg) => layers::maxpool2_backward(&trace.dims[li], arg, &g),
                    _ => unreachable!("pool layer records argmax"),
                },
                LayerSpec::Fc { .. } => {
                    let (w, _) = self.weight_bias(li);
                    let slot = self.slots[li].expect("parametric layer");
                    let (gw, gb) = grads.tensors.split_at_mut(slot + 1);
                    let mut gi = need_in.then(|| Tensor::zeros(&trace.dims[li]));
                    layers::fully_connected_backward_into(act(li), w, &g, gw[slot].data_mut(), gb[0].data_mut(), gi.as_mut().map(|t| t.data_mut()))?;
                    match gi {
                        Some(t) => t,
                        None => return Ok(None),
                    }
                }
                LayerSpec::Dropout { .. } => match &trace.aux[li] {
                    Aux::Drop(mask) => {
                        let m: Option<Vec<T>> = mask.as_ref().map(|m| m.iter().map(|&v| T::lit(v)).collect());
                        layers::dropout_backward(m.as_deref(), &g)
                    }
                    _ => unreachable!("dropout layer records its mask"),
                },
                LayerSpec::Softmax => layers::softmax_backward(act(li + 1), &g),
            };
        }
        Ok(want_input_grad.then_some(g))
    }
}

fn fans(dims: &[usize]) -> (usize, usize) {
    match dims.len() {
        4 => {
            let k = dims[2] * dims[3];
            (dims[1] * k, dims[0] * k)
        }
        2 => (dims[1], dims[0]),
        _ => (1, 1),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_laws() {
        let h = NetworkSpec::hognet3();
        assert_eq!(h.output_shape().unwrap(), (36, 1, 1));
        assert_eq!(h.clone().with_input(WINDOW_INPUT).output_shape().unwrap(), (36, 29, 13));
        let c = NetworkSpec::covnet4();
        assert_eq!(c.output_shape().unwrap(), (36, 1, 1));
        assert_eq!(c.with_input(WINDOW_INPUT).output_shape().unwrap(), (36, 29, 13));
        assert_eq!(NetworkSpec::autonet3().output_shape().unwrap(), (64, 1, 1));
        let d = NetworkSpec::detector(&NetworkSpec::hognet3(), 0.5);
        let shapes = d.param_shapes().unwrap();
        assert_eq!(shapes.last().unwrap().1, vec![2]);
        assert_eq!(shapes[shapes.len() - 2].1, vec![2, 13572]);
        assert!(NetworkSpec::hognet3().with_input((1, 15, 15)).shapes().is_err());
    }

    #[test]
    fn hognet3_param_shapes() {
        let names: Vec<_> = NetworkSpec::hognet3().param_shapes().unwrap();
        let want = [
            ("conv1.w", vec![40, 1, 7, 7]),
            ("conv1.b", vec![40]),
            ("conv2.w", vec![144, 40, 5, 5]),
            ("conv2.b", vec![144]),
            ("conv3.w", vec![36, 144, 2, 2]),
            ("conv3.b", vec![36]),
        ];
        for ((n, d), (wn, wd)) in names.iter().zip(want.iter()) {
            assert_eq!(n, wn);
            assert_eq!(d, wd);
        }
    }

    #[test]
    fn infer_round_trips_builders() {
        for spec in [
            NetworkSpec::hognet3(),
            NetworkSpec::covnet4(),
            NetworkSpec::autonet3(),
            NetworkSpec::detector(&NetworkSpec::covnet4_with([4, 6, 8, 5]), 0.5),
        ] {
            let shapes = spec.param_shapes().unwrap();
            assert_eq!(NetworkSpec::infer(&shapes, 0.5).unwrap(), spec);
        }
    }

    #[test]
    fn init_is_seeded_and_bounded() {
        let a = Network::<f32>::init(NetworkSpec::hognet3_with([4, 6, 5]), 7).unwrap();
        let b = Network::<f32>::init(NetworkSpec::hognet3_with([4, 6, 5]), 7).unwrap();
        assert_eq!(a, b);
        let w = a.param("conv1.w").unwrap();
        let bound = (6.0f32 / (49.0 + 4.0 * 49.0)).sqrt();
        assert!(w.data().iter().all(|v| v.abs() <= bound));
        assert!(a.param("conv1.b").unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn hognet3_outputs_nonnegative() {
        let net = Network::<f32>::init(NetworkSpec::hognet3_with([4, 6, 5]), 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Tensor::from_vec(&[3, 1, 16, 16], (0..768).map(|_| rng.gen::<f32>()).collect()).unwrap();
        let y = net.forward(&x).unwrap();
        assert_eq!(y.dims(), &[3, 5, 1, 1]);
        assert!(y.data().iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn train_forward_matches_eval_without_dropout() {
        let net = Network::<f64>::init(NetworkSpec::covnet4_with([3, 4, 5, 6]), 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = Tensor::from_vec(&[2, 1, 16, 16], (0..512).map(|_| rng.gen::<f64>()).collect()).unwrap();
        let trace = net.forward_train(&x, Mode::Train, &mut rng).unwrap();
        assert_eq!(trace.output(), &net.forward(&x).unwrap());
    }
}
