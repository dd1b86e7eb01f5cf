//! Fully-convolutional encoder-decoder mapping a stacked frame pair to a
//! two-channel flow field.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::adam::{adam_step, AdamConfig, AdamState};
use crate::conv::{
    conv2d_backward_with_output, conv2d_forward, upsample_repeat, upsample_repeat_backward,
    ConvLayer, LEAKY_SLOPE,
};
use crate::error::{Error, Result};
use crate::image::{FlowField, Image};
use crate::tensor::{Scalar, Tensor};

/// Shape and wiring of one convolution in the network.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerSpec {
    pub kernel: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub stride: usize,
    /// Whether a 2x repeat-upsample precedes this convolution.
    pub upsample_before: bool,
    pub activation: bool,
}

const fn spec(
    kernel: usize,
    in_channels: usize,
    out_channels: usize,
    stride: usize,
    upsample_before: bool,
    activation: bool,
) -> LayerSpec {
    LayerSpec {
        kernel,
        in_channels,
        out_channels,
        stride,
        upsample_before,
        activation,
    }
}

/// Twelve convolutions: four stride-2 encoder layers, a two-layer
/// bottleneck, four upsampling decoder layers and a two-layer head whose
/// last layer is linear and emits `(u, v)`.
pub const STANDARD_LAYERS: [LayerSpec; 12] = [
    spec(7, 2, 16, 2, false, true),
    spec(5, 16, 32, 2, false, true),
    spec(3, 32, 64, 2, false, true),
    spec(3, 64, 128, 2, false, true),
    spec(3, 128, 128, 1, false, true),
    spec(3, 128, 128, 1, false, true),
    spec(3, 128, 64, 1, true, true),
    spec(3, 64, 32, 1, true, true),
    spec(3, 32, 16, 1, true, true),
    spec(3, 16, 16, 1, true, true),
    spec(3, 16, 16, 1, false, true),
    spec(3, 16, 2, 1, false, false),
];

/// Optimizer state for one layer's weights and bias.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerAdam<T = f32> {
    pub weights: AdamState<T>,
    pub bias: AdamState<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Network<T = f32> {
    specs: Vec<LayerSpec>,
    layers: Vec<ConvLayer<T>>,
    adam: Vec<LayerAdam<T>>,
}

/// The production network in 32-bit precision.
pub type EncoderDecoderNet = Network<f32>;

/// Builds the standard twelve-layer network with seeded initial weights.
pub fn init_network(seed: u64) -> EncoderDecoderNet {
    Network::from_specs(&STANDARD_LAYERS, seed).expect("standard layer table is valid")
}

/// Activations recorded by a forward pass, consumed by [`Network::backward`].
#[derive(Clone, Debug)]
pub struct ForwardCache<T = f32> {
    /// Input of each convolution (after upsampling where applicable).
    inputs: Vec<Tensor<T>>,
    outputs: Vec<Tensor<T>>,
}

impl<T: Scalar> ForwardCache<T> {
    pub fn output(&self) -> &Tensor<T> {
        self.outputs.last().expect("network has layers")
    }
}

/// Parameter gradients, one `(weights, bias)` pair per layer.
#[derive(Clone, Debug, PartialEq)]
pub struct NetGradients<T = f32> {
    pub layers: Vec<(Tensor<T>, Tensor<T>)>,
}

impl<T: Scalar> NetGradients<T> {
    pub fn zeros_like(net: &Network<T>) -> Self {
        NetGradients {
            layers: net
                .layers
                .iter()
                .map(|l| {
                    (
                        Tensor::zeros(l.weights().shape()),
                        Tensor::zeros(l.bias().shape()),
                    )
                })
                .collect(),
        }
    }

    pub fn accumulate(&mut self, other: &Self) -> Result<()> {
        for ((w, b), (ow, ob)) in self.layers.iter_mut().zip(&other.layers) {
            w.axpy(T::one(), ow)?;
            b.axpy(T::one(), ob)?;
        }
        Ok(())
    }

    pub fn scale(&mut self, factor: T) {
        for (w, b) in &mut self.layers {
            w.scale(factor);
            b.scale(factor);
        }
    }

    pub fn all_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|(w, b)| w.all_finite() && b.all_finite())
    }

    /// Flattened view over all gradient values, layer by layer, weights before bias.
    pub fn values(&self) -> impl Iterator<Item = T> + '_ {
        self.layers
            .iter()
            .flat_map(|(w, b)| w.data().iter().chain(b.data()).copied())
    }
}

impl<T: Scalar> Network<T> {
    /// Instantiates `specs` with fan-in scaled normal weights and zero biases.
    pub fn from_specs(specs: &[LayerSpec], seed: u64) -> Result<Self> {
        validate_specs(specs)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layers = Vec::with_capacity(specs.len());
        for s in specs {
            let fan_in = (s.in_channels * s.kernel * s.kernel) as f64;
            let std = if s.activation {
                (2.0 / ((1.0 + LEAKY_SLOPE * LEAKY_SLOPE) * fan_in)).sqrt()
            } else {
                // Keeps the untrained flow output well below a pixel.
                0.1 * (1.0 / fan_in).sqrt()
            };
            let normal = Normal::new(0.0, std).expect("positive std");
            let weights = Tensor::from_fn(
                &[s.out_channels, s.in_channels, s.kernel, s.kernel],
                |_| T::from_f64_lossy(normal.sample(&mut rng)),
            );
            let bias = Tensor::zeros(&[s.out_channels]);
            layers.push(ConvLayer::new(weights, bias, s.stride, s.activation)?);
        }
        let adam = layers
            .iter()
            .map(|l| LayerAdam {
                weights: AdamState::new(l.weights().shape()),
                bias: AdamState::new(l.bias().shape()),
            })
            .collect();
        Ok(Network {
            specs: specs.to_vec(),
            layers,
            adam,
        })
    }

    /// Reassembles a network from stored parts, checking them against `specs`.
    pub fn from_parts(
        specs: Vec<LayerSpec>,
        layers: Vec<ConvLayer<T>>,
        adam: Vec<LayerAdam<T>>,
    ) -> Result<Self> {
        validate_specs(&specs)?;
        if layers.len() != specs.len() || adam.len() != specs.len() {
            return Err(Error::Config(format!(
                "{} layer specs but {} layers and {} optimizer states",
                specs.len(),
                layers.len(),
                adam.len()
            )));
        }
        for (i, (s, l)) in specs.iter().zip(&layers).enumerate() {
            let shape = [s.out_channels, s.in_channels, s.kernel, s.kernel];
            if l.weights().shape() != shape
                || l.stride() != s.stride
                || l.has_activation() != s.activation
            {
                return Err(Error::Config(format!(
                    "layer {i} does not match its spec {s:?}"
                )));
            }
        }
        for (i, (l, a)) in layers.iter().zip(&adam).enumerate() {
            if a.weights.first_moment.shape() != l.weights().shape()
                || a.weights.second_moment.shape() != l.weights().shape()
                || a.bias.first_moment.shape() != l.bias().shape()
                || a.bias.second_moment.shape() != l.bias().shape()
            {
                return Err(Error::Config(format!(
                    "optimizer state of layer {i} has the wrong shape"
                )));
            }
        }
        Ok(Network {
            specs,
            layers,
            adam,
        })
    }

    pub fn specs(&self) -> &[LayerSpec] {
        &self.specs
    }

    pub fn layers(&self) -> &[ConvLayer<T>] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [ConvLayer<T>] {
        &mut self.layers
    }

    pub fn adam_states(&self) -> &[LayerAdam<T>] {
        &self.adam
    }

    pub fn parameter_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weights().len() + l.bias().len())
            .sum()
    }

    pub fn all_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weights().all_finite() && l.bias().all_finite())
    }

    /// Input extents must be multiples of this (2 to the number of stride-2 layers).
    pub fn required_multiple(&self) -> usize {
        1 << self.specs.iter().filter(|s| s.stride == 2).count()
    }

    pub fn check_extents(&self, height: usize, width: usize) -> Result<()> {
        let m = self.required_multiple();
        if height == 0 || width == 0 || height % m != 0 || width % m != 0 {
            let pad = |n: usize| n.div_ceil(m).max(1) * m - n;
            return Err(Error::Admissibility {
                height,
                width,
                multiple: m,
                pad_height: pad(height),
                pad_width: pad(width),
            });
        }
        Ok(())
    }

    /// Runs the network on a `[2, H, W]` input, keeping every activation.
    pub fn forward_tensor(&self, input: &Tensor<T>) -> Result<ForwardCache<T>> {
        let (c, h, w) = input.dims3()?;
        if c != self.specs[0].in_channels {
            return Err(Error::Config(format!(
                "network expects {} input channels, got {c}",
                self.specs[0].in_channels
            )));
        }
        self.check_extents(h, w)?;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut outputs: Vec<Tensor<T>> = Vec::with_capacity(self.layers.len());
        for (s, layer) in self.specs.iter().zip(&self.layers) {
            let prev = outputs.last().unwrap_or(input);
            let x = if s.upsample_before {
                upsample_repeat(prev, 2)?
            } else {
                prev.clone()
            };
            let y = conv2d_forward(&x, layer)?;
            inputs.push(x);
            outputs.push(y);
        }
        Ok(ForwardCache { inputs, outputs })
    }

    /// Chain rule from the output gradient back to every parameter.
    pub fn backward(
        &self,
        cache: &ForwardCache<T>,
        grad_output: &Tensor<T>,
    ) -> Result<NetGradients<T>> {
        if cache.inputs.len() != self.layers.len() || cache.outputs.len() != self.layers.len() {
            return Err(Error::State(format!(
                "forward cache holds {} layers, network has {}",
                cache.outputs.len(),
                self.layers.len()
            )));
        }
        if grad_output.shape() != cache.output().shape() {
            return Err(Error::Shape(format!(
                "output gradient {:?} does not match network output {:?}",
                grad_output.shape(),
                cache.output().shape()
            )));
        }
        let mut grads = Vec::with_capacity(self.layers.len());
        let mut upstream = grad_output.clone();
        for i in (0..self.layers.len()).rev() {
            let layer = &self.layers[i];
            if cache.inputs[i].dims3()?.0 != layer.in_channels() {
                return Err(Error::State(format!(
                    "forward cache does not belong to this network (layer {i})"
                )));
            }
            let g = conv2d_backward_with_output(
                &cache.inputs[i],
                &cache.outputs[i],
                layer,
                &upstream,
            )?;
            upstream = if self.specs[i].upsample_before {
                upsample_repeat_backward(&g.input, 2)?
            } else {
                g.input
            };
            grads.push((g.weights, g.bias));
        }
        grads.reverse();
        Ok(NetGradients { layers: grads })
    }

    /// One ADAM update of every parameter tensor.
    pub fn apply_gradients(&mut self, grads: &NetGradients<T>, cfg: &AdamConfig) -> Result<()> {
        if grads.layers.len() != self.layers.len() {
            return Err(Error::Config("gradient layer count mismatch".into()));
        }
        for ((layer, state), (gw, gb)) in self
            .layers
            .iter_mut()
            .zip(&mut self.adam)
            .zip(&grads.layers)
        {
            let (w, b) = layer.params_mut();
            adam_step(w, gw, &mut state.weights, cfg)?;
            adam_step(b, gb, &mut state.bias, cfg)?;
        }
        if !self.all_finite() {
            return Err(Error::NonFinite(
                "parameters became non-finite after the optimizer step".into(),
            ));
        }
        Ok(())
    }
}

/// Stacks two frames into the `[2, H, W]` network input.
pub fn stack_frames<T: Scalar>(frame1: &Image, frame2: &Image) -> Result<Tensor<T>> {
    frame1.check_same_extents(frame2)?;
    let (h, w) = frame1.extents();
    let data = frame1
        .data()
        .iter()
        .chain(frame2.data())
        .map(|&x| T::from_f64_lossy(x as f64))
        .collect();
    Tensor::from_vec(&[2, h, w], data)
}

impl Network<f32> {
    /// Flow from `frame1` to `frame2`.
    pub fn forward(&self, frame1: &Image, frame2: &Image) -> Result<FlowField> {
        Ok(self.forward_cached(frame1, frame2)?.0)
    }

    /// Flow plus the activations needed by [`Network::backward_flow`].
    pub fn forward_cached(
        &self,
        frame1: &Image,
        frame2: &Image,
    ) -> Result<(FlowField, ForwardCache<f32>)> {
        let input = stack_frames(frame1, frame2)?;
        let cache = self.forward_tensor(&input)?;
        let flow = FlowField::from_channels(cache.output())?;
        if !flow.all_finite() {
            return Err(Error::NonFinite("network produced non-finite flow".into()));
        }
        Ok((flow, cache))
    }

    pub fn backward_flow(
        &self,
        cache: &ForwardCache<f32>,
        grad_flow: &FlowField,
    ) -> Result<NetGradients<f32>> {
        self.backward(cache, &grad_flow.to_channels())
    }
}

fn validate_specs(specs: &[LayerSpec]) -> Result<()> {
    let (first, last) = match (specs.first(), specs.last()) {
        (Some(f), Some(l)) => (f, l),
        _ => return Err(Error::Config("network needs at least one layer".into())),
    };
    if first.in_channels != 2 {
        return Err(Error::Config(format!(
            "first layer must take the 2-channel frame pair, takes {}",
            first.in_channels
        )));
    }
    if last.out_channels != 2 || last.activation {
        return Err(Error::Config(
            "last layer must be linear with 2 output channels".into(),
        ));
    }
    for pair in specs.windows(2) {
        if pair[0].out_channels != pair[1].in_channels {
            return Err(Error::Config(format!(
                "channel mismatch between {:?} and {:?}",
                pair[0], pair[1]
            )));
        }
    }
    let downs = specs.iter().filter(|s| s.stride == 2).count();
    let ups = specs.iter().filter(|s| s.upsample_before).count();
    if downs != ups {
        return Err(Error::Config(format!(
            "{downs} downsamplings but {ups} upsamplings: output scale would differ from input"
        )));
    }
    // Never upsample past the input resolution.
    let mut level = 0i32;
    for s in specs {
        if s.upsample_before {
            level -= 1;
        }
        if s.stride == 2 {
            level += 1;
        }
        if level < 0 {
            return Err(Error::Config("decoder upsamples above input scale".into()));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn standard_table_counts() {
        let net = init_network(0);
        assert_eq!(net.layers().len(), 12);
        assert_eq!(net.specs().iter().filter(|s| s.stride == 2).count(), 4);
        assert_eq!(net.specs().iter().filter(|s| s.upsample_before).count(), 4);
        assert_eq!(net.specs()[0].in_channels, 2);
        let last = net.layers().last().unwrap();
        assert_eq!(last.out_channels(), 2);
        assert!(!last.has_activation());
        assert_eq!(net.required_multiple(), 16);
    }

    #[test]
    fn same_seed_same_parameters() {
        assert_eq!(init_network(5), init_network(5));
        assert_ne!(init_network(5), init_network(6));
    }

    #[test]
    fn output_matches_input_extents() {
        let net = init_network(1);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for (h, w) in [(96, 128), (96, 160), (16, 16), (32, 48)] {
            let f1 = Image::from_fn(h, w, |_, _| rng.gen());
            let f2 = Image::from_fn(h, w, |_, _| rng.gen());
            let flow = net.forward(&f1, &f2).unwrap();
            assert_eq!(flow.extents(), (h, w));
            assert!(flow.all_finite());
        }
    }

    #[test]
    fn untrained_flow_is_small() {
        let net = init_network(3);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let f1 = Image::from_fn(64, 64, |_, _| rng.gen());
        let f2 = Image::from_fn(64, 64, |_, _| rng.gen());
        assert!(net.forward(&f1, &f2).unwrap().mean_magnitude() < 1.0);
    }

    #[test]
    fn inadmissible_extents_report_padding() {
        let net = init_network(0);
        let f = Image::constant(20, 33, 0.5);
        match net.forward(&f, &f) {
            Err(Error::Admissibility {
                multiple,
                pad_height,
                pad_width,
                ..
            }) => {
                assert_eq!(multiple, 16);
                assert_eq!((pad_height, pad_width), (12, 15));
            }
            other => panic!("expected admissibility error, got {other:?}"),
        }
    }

    #[test]
    fn zero_output_gradient_gives_zero_parameter_gradients() {
        let net = init_network(0);
        let f = Image::from_fn(16, 16, |y, x| ((x * y) % 7) as f32 / 7.0);
        let (_, cache) = net.forward_cached(&f, &f).unwrap();
        let g = net.backward_flow(&cache, &FlowField::zeros(16, 16)).unwrap();
        assert!(g.values().all(|x| x == 0.0));
    }

    #[test]
    fn final_bias_gradient_is_summed_output_gradient() {
        let net = init_network(0);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let f = Image::from_fn(16, 16, |_, _| rng.gen());
        let (_, cache) = net.forward_cached(&f, &f).unwrap();
        let gu: Vec<f32> = (0..256).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let gv: Vec<f32> = (0..256).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let (su, sv) = (gu.iter().sum::<f32>(), gv.iter().sum::<f32>());
        let grad = FlowField::from_components(16, 16, gu, gv).unwrap();
        let g = net.backward_flow(&cache, &grad).unwrap();
        let bias = g.layers.last().unwrap().1.data();
        assert!((bias[0] - su).abs() < 1e-4);
        assert!((bias[1] - sv).abs() < 1e-4);
    }

    #[test]
    fn foreign_cache_is_a_state_error() {
        let tiny = [spec(3, 2, 2, 1, false, false)];
        let small = Network::<f32>::from_specs(&tiny, 0).unwrap();
        let net = init_network(0);
        let f = Image::constant(16, 16, 0.5);
        let input = stack_frames::<f32>(&f, &f).unwrap();
        let cache = small.forward_tensor(&input).unwrap();
        let err = net.backward(&cache, cache.output());
        assert!(matches!(err, Err(Error::State(_))));
    }

    #[test]
    fn rejects_inconsistent_tables() {
        let bad = [spec(3, 2, 4, 2, false, true), spec(3, 4, 2, 1, false, false)];
        assert!(Network::<f32>::from_specs(&bad, 0).is_err());
        let bad = [spec(3, 2, 4, 1, false, true), spec(3, 5, 2, 1, false, false)];
        assert!(Network::<f32>::from_specs(&bad, 0).is_err());
    }
}
