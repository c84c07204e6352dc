//! Operational layers: 1-D convolutions generalized to polynomial neurons.
//!
//! Each output channel computes a truncated power series of its input,
//!
//! ```text
//! out = act( bias + sum_{q=1..Q} conv1d(kernel_q, input^q) )
//! ```
//!
//! where every power has its own kernel stack. `Q = 1` collapses the layer to
//! an ordinary convolution — same arithmetic, bit for bit. The constant
//! (q = 0) term is omitted because the bias already provides it.
//!
//! Inputs are expected in roughly `[-1, 1]` (the networks keep activations
//! there with tanh), which keeps the power series well conditioned.

use rand::distributions::{Distribution, Uniform};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor3;

/// Nonlinearity applied to a layer's accumulated polynomial response.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Activation {
    Tanh,
    /// Leaky rectifier with the given negative-side slope.
    Leaky(f64),
    /// No nonlinearity (used by score heads).
    Linear,
}

/// Static description of one operational layer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel_len: usize,
    pub stride: usize,
    pub pad: usize,
    /// Polynomial order Q; 1 means a plain convolution.
    pub q_order: usize,
    pub activation: Activation,
}

impl LayerSpec {
    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.out_channels == 0 {
            return Err(Error::Config("layer channel counts must be at least 1".into()));
        }
        if self.kernel_len == 0 {
            return Err(Error::Config("layer kernel length must be at least 1".into()));
        }
        if self.stride == 0 {
            return Err(Error::Config("layer stride must be at least 1".into()));
        }
        if self.q_order == 0 {
            return Err(Error::Config("polynomial order must be at least 1".into()));
        }
        Ok(())
    }

    /// Trainable scalars: `Cout * Cin * K * Q` kernel taps plus `Cout` biases.
    pub fn param_count(&self) -> usize {
        self.out_channels * self.in_channels * self.kernel_len * self.q_order + self.out_channels
    }
}

/// Tape handles for one layer's parameters within a single forward pass.
#[derive(Debug, Clone)]
pub struct LayerBinding {
    pub kernels: Vec<Var>,
    pub bias: Var,
}

/// One operational layer with its trainable parameters.
///
/// `kernels[q - 1]` (shape `[Cout, Cin, K]`) multiplies the q-th power of the
/// input; `bias` has shape `[1, Cout, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct OperationalLayer {
    spec: LayerSpec,
    kernels: Vec<Tensor3>,
    bias: Tensor3,
}

impl OperationalLayer {
    /// A zero-initialized layer (useful as a deserialization shell).
    pub fn zeros(spec: LayerSpec) -> Result<Self> {
        spec.validate()?;
        let kernels = (0..spec.q_order)
            .map(|_| Tensor3::zeros(spec.out_channels, spec.in_channels, spec.kernel_len))
            .collect();
        Ok(OperationalLayer { spec, kernels, bias: Tensor3::zeros(1, spec.out_channels, 1) })
    }

    /// Random initialization: kernel taps uniform in
    /// `±sqrt(6 / ((Cin + Cout) * K * Q))` — the fan-balanced bound extended
    /// over all Q kernel stacks — and biases zero.
    pub fn init<R: Rng>(spec: LayerSpec, rng: &mut R) -> Result<Self> {
        let mut layer = OperationalLayer::zeros(spec)?;
        let fan = (spec.in_channels + spec.out_channels) * spec.kernel_len * spec.q_order;
        let bound = (6.0 / fan as f64).sqrt();
        let dist = Uniform::new_inclusive(-bound, bound);
        for kernel in &mut layer.kernels {
            for w in kernel.data_mut() {
                *w = dist.sample(rng);
            }
        }
        Ok(layer)
    }

    /// Rebuild a layer from deserialized parameter tensors.
    pub fn from_parts(spec: LayerSpec, kernels: Vec<Tensor3>, bias: Tensor3) -> Result<Self> {
        spec.validate()?;
        if kernels.len() != spec.q_order {
            return Err(Error::Config(format!(
                "layer of order {} given {} kernel stacks",
                spec.q_order,
                kernels.len()
            )));
        }
        let expect = (spec.out_channels, spec.in_channels, spec.kernel_len);
        for (qi, k) in kernels.iter().enumerate() {
            if k.shape() != expect {
                return Err(Error::Shape(format!(
                    "kernel stack {qi} has shape {:?}, expected {expect:?}",
                    k.shape()
                )));
            }
        }
        if bias.shape() != (1, spec.out_channels, 1) {
            return Err(Error::Shape(format!(
                "bias shape {:?} does not match {} output channels",
                bias.shape(),
                spec.out_channels
            )));
        }
        Ok(OperationalLayer { spec, kernels, bias })
    }

    pub fn spec(&self) -> LayerSpec {
        self.spec
    }

    pub fn param_count(&self) -> usize {
        self.spec.param_count()
    }

    /// Parameter tensors in canonical order: kernel stacks for q = 1..Q, then
    /// bias. Serialization, optimizer state and tape bindings all follow this
    /// order.
    pub fn params(&self) -> Vec<&Tensor3> {
        self.kernels.iter().chain(std::iter::once(&self.bias)).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor3> {
        self.kernels.iter_mut().chain(std::iter::once(&mut self.bias)).collect()
    }

    /// Register this layer's parameters on a tape. With `trainable` false the
    /// parameters are frozen constants (gradients still flow *through* the
    /// layer to its input).
    pub fn register(&self, tape: &mut Tape, trainable: bool) -> LayerBinding {
        LayerBinding {
            kernels: self.kernels.iter().map(|k| tape.leaf_as(k, trainable)).collect(),
            bias: tape.leaf_as(&self.bias, trainable),
        }
    }

    /// Apply the layer to `input` using previously registered parameters.
    ///
    /// The bias rides on the q = 1 convolution; higher powers contribute
    /// bias-free terms, summed in ascending q order.
    pub fn apply(&self, tape: &mut Tape, binding: &LayerBinding, input: Var) -> Result<Var> {
        let mut acc = tape.conv1d(
            input,
            binding.kernels[0],
            Some(binding.bias),
            self.spec.stride,
            self.spec.pad,
        )?;
        for (qi, kernel) in binding.kernels.iter().enumerate().skip(1) {
            let powered = tape.pow_int(input, (qi + 1) as u32)?;
            let term = tape.conv1d(powered, *kernel, None, self.spec.stride, self.spec.pad)?;
            acc = tape.add(acc, term)?;
        }
        Ok(match self.spec.activation {
            Activation::Tanh => tape.tanh(acc),
            Activation::Leaky(slope) => tape.leaky_relu(acc, slope),
            Activation::Linear => acc,
        })
    }

    /// Convenience forward pass on a scratch tape, without gradients.
    pub fn forward(&self, input: &Tensor3) -> Result<Tensor3> {
        let mut tape = Tape::new();
        let x = tape.leaf_as(input, false);
        let binding = self.register(&mut tape, false);
        let out = self.apply(&mut tape, &binding, x)?;
        Ok(tape.to_tensor(out))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn spec(cin: usize, cout: usize, k: usize, q: usize, act: Activation) -> LayerSpec {
        LayerSpec {
            in_channels: cin,
            out_channels: cout,
            kernel_len: k,
            stride: 1,
            pad: 0,
            q_order: q,
            activation: act,
        }
    }

    #[test]
    fn first_order_layer_is_exactly_a_convolution() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let layer = OperationalLayer::init(spec(2, 3, 3, 1, Activation::Linear), &mut rng).unwrap();
        let input = Tensor3::from_vec(
            (0..16).map(|i| (i as f64 * 0.37).sin()).collect(),
            (1, 2, 8),
        )
        .unwrap();

        let via_layer = layer.forward(&input).unwrap();

        let mut tape = Tape::new();
        let x = tape.leaf(&input);
        let k = tape.leaf(layer.params()[0]);
        let b = tape.leaf(layer.params()[1]);
        let direct = tape.conv1d(x, k, Some(b), 1, 0).unwrap();

        assert_eq!(via_layer.data(), tape.value(direct));
    }

    #[test]
    fn second_order_single_tap_matches_hand_value() {
        // w1 = w2 = 1, bias 0, input 0.5: output = 0.5 + 0.5^2 = 0.75.
        let layer = OperationalLayer::from_parts(
            spec(1, 1, 1, 2, Activation::Linear),
            vec![
                Tensor3::from_vec(vec![1.0], (1, 1, 1)).unwrap(),
                Tensor3::from_vec(vec![1.0], (1, 1, 1)).unwrap(),
            ],
            Tensor3::zeros(1, 1, 1),
        )
        .unwrap();
        let out = layer.forward(&Tensor3::from_signal(&[0.5])).unwrap();
        assert_eq!(out.data(), &[0.75]);
    }

    #[test]
    fn zero_input_yields_bias() {
        let layer = OperationalLayer::from_parts(
            spec(1, 2, 3, 3, Activation::Linear),
            vec![
                Tensor3::from_vec(vec![0.5; 6], (2, 1, 3)).unwrap(),
                Tensor3::from_vec(vec![-0.25; 6], (2, 1, 3)).unwrap(),
                Tensor3::from_vec(vec![0.125; 6], (2, 1, 3)).unwrap(),
            ],
            Tensor3::from_vec(vec![0.7, -0.3], (1, 2, 1)).unwrap(),
        )
        .unwrap();
        let out = layer.forward(&Tensor3::from_signal(&[0.0; 5])).unwrap();
        assert_eq!(out.shape(), (1, 2, 3));
        assert_eq!(&out.data()[..3], &[0.7, 0.7, 0.7]);
        assert_eq!(&out.data()[3..], &[-0.3, -0.3, -0.3]);
    }

    #[test]
    fn param_count_follows_closed_form() {
        // 8 * 1 * 5 * 3 kernel taps + 8 biases = 128.
        assert_eq!(spec(1, 8, 5, 3, Activation::Tanh).param_count(), 128);
        // Q = 1 reduces to the plain convolution count.
        assert_eq!(spec(4, 6, 3, 1, Activation::Tanh).param_count(), 4 * 6 * 3 + 6);
    }

    #[test]
    fn init_is_seed_deterministic_and_bounded() {
        let s = spec(3, 4, 5, 3, Activation::Tanh);
        let a = OperationalLayer::init(s, &mut ChaCha8Rng::seed_from_u64(42)).unwrap();
        let b = OperationalLayer::init(s, &mut ChaCha8Rng::seed_from_u64(42)).unwrap();
        assert_eq!(a, b);
        let c = OperationalLayer::init(s, &mut ChaCha8Rng::seed_from_u64(43)).unwrap();
        assert_ne!(a, c);

        let bound = (6.0 / ((3 + 4) * 5 * 3) as f64).sqrt();
        for param in a.params() {
            for &w in param.data() {
                assert!(w.abs() <= bound);
            }
        }
        assert!(a.params()[3].data().iter().all(|&b| b == 0.0), "biases start at zero");
    }

    #[test]
    fn initialized_layers_neither_explode_nor_vanish() {
        // Average output variance over many seeded layers, driven by a ±1
        // input (unit variance, bounded like a tanh-saturated signal), stays
        // within an order of magnitude of 1.
        let s = spec(8, 8, 5, 3, Activation::Linear);
        let mut sign_rng = ChaCha8Rng::seed_from_u64(7);
        let input = Tensor3::from_vec(
            (0..8 * 64).map(|_| if sign_rng.gen::<bool>() { 1.0 } else { -1.0 }).collect(),
            (1, 8, 64),
        )
        .unwrap();

        let mut total_var = 0.0;
        let draws = 1000;
        for seed in 0..draws {
            let layer = OperationalLayer::init(s, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            let out = layer.forward(&input).unwrap();
            let n = out.len() as f64;
            let mean: f64 = out.data().iter().sum::<f64>() / n;
            let var: f64 = out.data().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            total_var += var;
        }
        let avg = total_var / draws as f64;
        assert!((0.1..=10.0).contains(&avg), "average output variance {avg}");
    }

    #[test]
    fn from_parts_rejects_wrong_stack_count_and_shapes() {
        let s = spec(1, 1, 3, 2, Activation::Linear);
        let k = || Tensor3::zeros(1, 1, 3);
        assert!(OperationalLayer::from_parts(s, vec![k()], Tensor3::zeros(1, 1, 1)).is_err());
        assert!(OperationalLayer::from_parts(
            s,
            vec![k(), Tensor3::zeros(1, 1, 4)],
            Tensor3::zeros(1, 1, 1)
        )
        .is_err());
        assert!(OperationalLayer::from_parts(s, vec![k(), k()], Tensor3::zeros(1, 2, 1)).is_err());
        assert!(OperationalLayer::from_parts(s, vec![k(), k()], Tensor3::zeros(1, 1, 1)).is_ok());
    }
}
