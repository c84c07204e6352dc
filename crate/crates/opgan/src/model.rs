//! The operational generator and discriminator.
//!
//! **Generator** — a 10-layer U-Net over `[1, 1, L]` signals (`L` a multiple
//! of 32; the standard 1000-sample segment is zero-padded to 1024 and cropped
//! back afterwards):
//!
//! * 5 encoder operational layers, stride 2, kernels `[5, 4, 5, 5, 2]`,
//!   halving the length at each stage;
//! * 5 decoder stages, each a 2x upsample followed by a stride-1 operational
//!   layer (kernel 5) that also halves the channel count;
//! * additive skip connections: encoder stage `i`'s output is added into
//!   decoder stage `5 - i`'s input (matching both length and width because
//!   the channel progression mirrors);
//! * tanh everywhere, including the output, so activations stay in (-1, 1).
//!
//! **Discriminator** — 6 operational layers, kernel 4, strides
//! `[4, 4, 4, 2, 2, 2]`; a 1024-sample input collapses to a 2-element score
//! vector (1024 -> 256 -> 64 -> 16 -> 8 -> 4 -> 2). Hidden layers tanh, the
//! final single-channel projection linear.
//!
//! Padding per layer is the smallest amount for which the output length is
//! exactly `L / stride` (input length preserved at stride 1):
//! `pad = ceil((K - stride) / 2)`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layer::{Activation, LayerBinding, LayerSpec, OperationalLayer};
use crate::tape::{Tape, UpsampleKind, Var};
use crate::tensor::Tensor3;

/// Samples in one 5-second segment at the 200 Hz reference rate.
pub const SEGMENT_LEN: usize = 1000;
/// Segment length after zero-padding to the network's stride-friendly size.
pub const NETWORK_LEN: usize = 1024;

/// Smallest zero padding for which stride alone controls the output length.
fn pad_for(kernel: usize, stride: usize) -> usize {
    if kernel > stride {
        (kernel - stride + 1) / 2
    } else {
        0
    }
}

// ── Generator ───────────────────────────────────────────────────────────────

/// Architecture of the generator U-Net.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeneratorArch {
    /// Channel widths after each encoder stage (decoder mirrors them down).
    pub widths: [usize; 5],
    /// Kernel lengths of the five stride-2 encoder layers.
    pub encoder_kernels: [usize; 5],
    /// Kernel length of every stride-1 decoder layer; must be odd.
    pub decoder_kernel: usize,
    /// Polynomial order of every operational layer.
    pub q_order: usize,
    /// How decoder stages double the length axis.
    pub upsample: UpsampleKind,
}

impl Default for GeneratorArch {
    /// The production model: 377,657 parameters at Q = 3.
    fn default() -> Self {
        GeneratorArch {
            widths: [16, 32, 56, 80, 104],
            encoder_kernels: [5, 4, 5, 5, 2],
            decoder_kernel: 5,
            q_order: 3,
            upsample: UpsampleKind::Nearest,
        }
    }
}

impl GeneratorArch {
    /// A deliberately small variant (about 71K parameters at Q = 3) for
    /// quick experiments and tests.
    pub fn compact() -> Self {
        GeneratorArch { widths: [8, 16, 24, 32, 48], ..GeneratorArch::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.iter().any(|&w| w == 0) {
            return Err(Error::Config("generator widths must all be at least 1".into()));
        }
        if self.encoder_kernels.iter().any(|&k| k == 0) {
            return Err(Error::Config("encoder kernels must all be at least 1".into()));
        }
        if self.decoder_kernel % 2 == 0 {
            return Err(Error::Config(format!(
                "decoder kernel must be odd to preserve length at stride 1, got {}",
                self.decoder_kernel
            )));
        }
        if self.q_order == 0 {
            return Err(Error::Config("polynomial order must be at least 1".into()));
        }
        Ok(())
    }

    /// Layer specs in forward order: 5 encoder layers then 5 decoder layers.
    pub fn layer_specs(&self) -> Result<Vec<LayerSpec>> {
        self.validate()?;
        let w = self.widths;
        let mut specs = Vec::with_capacity(10);
        let mut in_ch = 1;
        for (stage, &k) in self.encoder_kernels.iter().enumerate() {
            specs.push(LayerSpec {
                in_channels: in_ch,
                out_channels: w[stage],
                kernel_len: k,
                stride: 2,
                pad: pad_for(k, 2),
                q_order: self.q_order,
                activation: Activation::Tanh,
            });
            in_ch = w[stage];
        }
        // Decoder stage j maps width w[4 - j] down to w[3 - j] (1 at the end).
        for j in 0..5 {
            let out_ch = if j == 4 { 1 } else { w[3 - j] };
            specs.push(LayerSpec {
                in_channels: w[4 - j],
                out_channels: out_ch,
                kernel_len: self.decoder_kernel,
                stride: 1,
                pad: pad_for(self.decoder_kernel, 1),
                q_order: self.q_order,
                activation: Activation::Tanh,
            });
        }
        Ok(specs)
    }

    /// Closed-form trainable parameter total.
    pub fn param_count(&self) -> Result<usize> {
        Ok(self.layer_specs()?.iter().map(|s| s.param_count()).sum())
    }
}

/// Tape handles for every generator parameter within one forward pass.
#[derive(Debug, Clone)]
pub struct GeneratorBinding {
    layers: Vec<LayerBinding>,
}

/// The generator network.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorModel {
    arch: GeneratorArch,
    layers: Vec<OperationalLayer>,
}

impl GeneratorModel {
    /// Randomly initialized generator.
    pub fn init<R: Rng>(arch: GeneratorArch, rng: &mut R) -> Result<Self> {
        let layers = arch
            .layer_specs()?
            .into_iter()
            .map(|spec| OperationalLayer::init(spec, rng))
            .collect::<Result<Vec<_>>>()?;
        Ok(GeneratorModel { arch, layers })
    }

    /// Rebuild from deserialized layers; shapes must match the architecture.
    pub fn from_layers(arch: GeneratorArch, layers: Vec<OperationalLayer>) -> Result<Self> {
        let specs = arch.layer_specs()?;
        if layers.len() != specs.len() {
            return Err(Error::Config(format!(
                "generator expects {} layers, got {}",
                specs.len(),
                layers.len()
            )));
        }
        for (i, (layer, spec)) in layers.iter().zip(&specs).enumerate() {
            if layer.spec() != *spec {
                return Err(Error::Config(format!(
                    "generator layer {i} spec {:?} does not match architecture {:?}",
                    layer.spec(),
                    spec
                )));
            }
        }
        Ok(GeneratorModel { arch, layers })
    }

    pub fn arch(&self) -> GeneratorArch {
        self.arch
    }

    pub fn layers(&self) -> &[OperationalLayer] {
        &self.layers
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.param_count()).sum()
    }

    /// Parameter tensors in canonical order (layer by layer, kernels then
    /// bias).
    pub fn params(&self) -> Vec<&Tensor3> {
        self.layers.iter().flat_map(|l| l.params()).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor3> {
        self.layers.iter_mut().flat_map(|l| l.params_mut()).collect()
    }

    pub fn zero_grads(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }

    /// Register every parameter on a tape.
    pub fn register(&self, tape: &mut Tape, trainable: bool) -> GeneratorBinding {
        GeneratorBinding {
            layers: self.layers.iter().map(|l| l.register(tape, trainable)).collect(),
        }
    }

    /// Run the U-Net on a registered input of shape `[B, 1, L]`, `L` a
    /// multiple of 32.
    pub fn apply(&self, tape: &mut Tape, binding: &GeneratorBinding, input: Var) -> Result<Var> {
        let (_, channels, len) = tape.shape(input);
        if channels != 1 {
            return Err(Error::Shape(format!("generator expects 1 input channel, got {channels}")));
        }
        if len < 32 || len % 32 != 0 {
            return Err(Error::Shape(format!(
                "generator input length must be a positive multiple of 32, got {len}"
            )));
        }
        let mut skips = Vec::with_capacity(5);
        let mut cur = input;
        for (enc, bind) in self.layers[..5].iter().zip(&binding.layers[..5]) {
            cur = enc.apply(tape, bind, cur)?;
            skips.push(cur);
        }
        for (j, (dec, bind)) in self.layers[5..].iter().zip(&binding.layers[5..]).enumerate() {
            if j > 0 {
                cur = tape.add(cur, skips[4 - j])?;
            }
            let up = tape.upsample2(cur, self.arch.upsample);
            cur = dec.apply(tape, bind, up)?;
        }
        Ok(cur)
    }

    /// Gradient-free forward pass on a scratch tape.
    pub fn infer(&self, input: &Tensor3) -> Result<Tensor3> {
        let mut tape = Tape::new();
        let x = tape.leaf_as(input, false);
        let binding = self.register(&mut tape, false);
        let out = self.apply(&mut tape, &binding, x)?;
        Ok(tape.to_tensor(out))
    }

    /// Copy gradients off a tape into the parameter tensors (accumulating).
    pub fn accumulate_grads(&mut self, tape: &Tape, binding: &GeneratorBinding) -> Result<()> {
        accumulate_layer_grads(tape, &binding.layers, self.params_mut())
    }

    /// Multiply-accumulate count of one forward pass at the given input
    /// length — the dominant cost term, used to sanity-check latency scaling.
    pub fn mac_count(&self, input_len: usize) -> Result<u64> {
        let mut total = 0u64;
        let mut len = input_len;
        for layer in &self.layers[..5] {
            let s = layer.spec();
            len = crate::tape::conv1d_output_len(len, s.kernel_len, s.stride, s.pad)?;
            total += (s.param_count() - s.out_channels) as u64 * len as u64;
        }
        for layer in &self.layers[5..] {
            let s = layer.spec();
            len = crate::tape::conv1d_output_len(len * 2, s.kernel_len, s.stride, s.pad)?;
            total += (s.param_count() - s.out_channels) as u64 * len as u64;
        }
        Ok(total)
    }
}

// ── Discriminator ───────────────────────────────────────────────────────────

/// Architecture of the discriminator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DiscriminatorArch {
    /// Hidden channel widths of the first five layers (the sixth projects
    /// down to one channel).
    pub widths: [usize; 5],
    /// Kernel length shared by all six layers.
    pub kernel: usize,
    /// Polynomial order of every layer.
    pub q_order: usize,
    /// When true the discriminator scores `(source, candidate)` channel
    /// pairs instead of the candidate alone.
    pub conditional: bool,
}

/// Fixed per-layer strides: three aggressive stages then three gentle ones.
pub const DISCRIMINATOR_STRIDES: [usize; 6] = [4, 4, 4, 2, 2, 2];

impl Default for DiscriminatorArch {
    fn default() -> Self {
        DiscriminatorArch { widths: [16, 32, 64, 64, 32], kernel: 4, q_order: 3, conditional: false }
    }
}

impl DiscriminatorArch {
    /// A small variant for quick experiments and tests.
    pub fn compact() -> Self {
        DiscriminatorArch { widths: [8, 16, 32, 32, 16], ..DiscriminatorArch::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.iter().any(|&w| w == 0) {
            return Err(Error::Config("discriminator widths must all be at least 1".into()));
        }
        if self.kernel == 0 {
            return Err(Error::Config("discriminator kernel must be at least 1".into()));
        }
        if self.q_order == 0 {
            return Err(Error::Config("polynomial order must be at least 1".into()));
        }
        Ok(())
    }

    pub fn in_channels(&self) -> usize {
        if self.conditional {
            2
        } else {
            1
        }
    }

    pub fn layer_specs(&self) -> Result<Vec<LayerSpec>> {
        self.validate()?;
        let mut specs = Vec::with_capacity(6);
        let mut in_ch = self.in_channels();
        for (i, &stride) in DISCRIMINATOR_STRIDES.iter().enumerate() {
            let last = i == 5;
            let out_ch = if last { 1 } else { self.widths[i] };
            specs.push(LayerSpec {
                in_channels: in_ch,
                out_channels: out_ch,
                kernel_len: self.kernel,
                stride,
                pad: pad_for(self.kernel, stride),
                q_order: self.q_order,
                activation: if last { Activation::Linear } else { Activation::Tanh },
            });
            in_ch = out_ch;
        }
        Ok(specs)
    }

    pub fn param_count(&self) -> Result<usize> {
        Ok(self.layer_specs()?.iter().map(|s| s.param_count()).sum())
    }
}

/// Tape handles for every discriminator parameter within one forward pass.
#[derive(Debug, Clone)]
pub struct DiscriminatorBinding {
    layers: Vec<LayerBinding>,
}

/// The discriminator network. Only needed during training; synthesis and
/// evaluation discard it.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscriminatorModel {
    arch: DiscriminatorArch,
    layers: Vec<OperationalLayer>,
}

impl DiscriminatorModel {
    pub fn init<R: Rng>(arch: DiscriminatorArch, rng: &mut R) -> Result<Self> {
        let layers = arch
            .layer_specs()?
            .into_iter()
            .map(|spec| OperationalLayer::init(spec, rng))
            .collect::<Result<Vec<_>>>()?;
        Ok(DiscriminatorModel { arch, layers })
    }

    pub fn from_layers(arch: DiscriminatorArch, layers: Vec<OperationalLayer>) -> Result<Self> {
        let specs = arch.layer_specs()?;
        if layers.len() != specs.len() {
            return Err(Error::Config(format!(
                "discriminator expects {} layers, got {}",
                specs.len(),
                layers.len()
            )));
        }
        for (i, (layer, spec)) in layers.iter().zip(&specs).enumerate() {
            if layer.spec() != *spec {
                return Err(Error::Config(format!(
                    "discriminator layer {i} spec {:?} does not match architecture {:?}",
                    layer.spec(),
                    spec
                )));
            }
        }
        Ok(DiscriminatorModel { arch, layers })
    }

    pub fn arch(&self) -> DiscriminatorArch {
        self.arch
    }

    pub fn layers(&self) -> &[OperationalLayer] {
        &self.layers
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.param_count()).sum()
    }

    pub fn params(&self) -> Vec<&Tensor3> {
        self.layers.iter().flat_map(|l| l.params()).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor3> {
        self.layers.iter_mut().flat_map(|l| l.params_mut()).collect()
    }

    pub fn zero_grads(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }

    pub fn register(&self, tape: &mut Tape, trainable: bool) -> DiscriminatorBinding {
        DiscriminatorBinding {
            layers: self.layers.iter().map(|l| l.register(tape, trainable)).collect(),
        }
    }

    /// Score a registered `[B, C, L]` input, producing `[B, 1, L']`.
    pub fn apply(
        &self,
        tape: &mut Tape,
        binding: &DiscriminatorBinding,
        input: Var,
    ) -> Result<Var> {
        let expect = self.arch.in_channels();
        let (_, channels, _) = tape.shape(input);
        if channels != expect {
            return Err(Error::Shape(format!(
                "discriminator expects {expect} input channels, got {channels}"
            )));
        }
        let mut cur = input;
        for (layer, bind) in self.layers.iter().zip(&binding.layers) {
            cur = layer.apply(tape, bind, cur)?;
        }
        Ok(cur)
    }

    pub fn infer(&self, input: &Tensor3) -> Result<Tensor3> {
        let mut tape = Tape::new();
        let x = tape.leaf_as(input, false);
        let binding = self.register(&mut tape, false);
        let out = self.apply(&mut tape, &binding, x)?;
        Ok(tape.to_tensor(out))
    }

    pub fn accumulate_grads(&mut self, tape: &Tape, binding: &DiscriminatorBinding) -> Result<()> {
        accumulate_layer_grads(tape, &binding.layers, self.params_mut())
    }
}

fn accumulate_layer_grads(
    tape: &Tape,
    bindings: &[LayerBinding],
    params: Vec<&mut Tensor3>,
) -> Result<()> {
    let vars: Vec<Var> =
        bindings.iter().flat_map(|b| b.kernels.iter().copied().chain([b.bias])).collect();
    if vars.len() != params.len() {
        return Err(Error::Usage(format!(
            "binding holds {} parameters, model has {}",
            vars.len(),
            params.len()
        )));
    }
    for (param, var) in params.into_iter().zip(vars) {
        if let Some(g) = tape.grad(var) {
            param.accumulate_grad(g)?;
        }
    }
    Ok(())
}

// ── Synthesis ───────────────────────────────────────────────────────────────

/// Anything that maps a normalized source segment to an enhanced segment of
/// the same length.
pub trait Synthesizer {
    fn synthesize(&self, segment: &[f64]) -> Result<Vec<f64>>;
}

impl Synthesizer for GeneratorModel {
    /// Zero-pad the segment to the next multiple of 32 (1000 becomes 1024),
    /// run the U-Net, and center-crop back to the original length.
    fn synthesize(&self, segment: &[f64]) -> Result<Vec<f64>> {
        if segment.is_empty() {
            return Err(Error::Shape("cannot synthesize an empty segment".into()));
        }
        let len = segment.len();
        let network_len = len.div_ceil(32).max(1) * 32;
        let mut tape = Tape::new();
        let x = tape.constant(segment.to_vec(), (1, 1, len))?;
        let padded = tape.crop_pad(x, network_len)?;
        let binding = self.register(&mut tape, false);
        let out = self.apply(&mut tape, &binding, padded)?;
        let cropped = tape.crop_pad(out, len)?;
        Ok(tape.value(cropped).to_vec())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn default_generator_hits_the_parameter_budget() {
        let arch = GeneratorArch::default();
        assert_eq!(arch.param_count().unwrap(), 377_657);
        let model = GeneratorModel::init(arch, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(model.param_count(), 377_657);
    }

    #[test]
    fn compact_generator_stays_under_100k() {
        assert_eq!(GeneratorArch::compact().param_count().unwrap(), 70_721);
    }

    #[test]
    fn generator_preserves_length_for_multiples_of_32() {
        let arch = GeneratorArch { widths: [2, 3, 4, 5, 6], ..GeneratorArch::default() };
        let model = GeneratorModel::init(arch, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        for len in [32, 64, 1024] {
            let input = Tensor3::zeros(1, 1, len);
            let out = model.infer(&input).unwrap();
            assert_eq!(out.shape(), (1, 1, len));
        }
    }

    #[test]
    fn generator_rejects_lengths_not_divisible_by_32() {
        let arch = GeneratorArch { widths: [2, 3, 4, 5, 6], ..GeneratorArch::default() };
        let model = GeneratorModel::init(arch, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        assert!(model.infer(&Tensor3::zeros(1, 1, 1000)).is_err());
        assert!(model.infer(&Tensor3::zeros(1, 1, 16)).is_err());
    }

    #[test]
    fn generator_output_is_tanh_bounded() {
        let arch = GeneratorArch { widths: [2, 3, 4, 5, 6], ..GeneratorArch::default() };
        let model = GeneratorModel::init(arch, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let input = Tensor3::from_vec(
            (0..1024).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            (1, 1, 1024),
        )
        .unwrap();
        let out = model.infer(&input).unwrap();
        assert!(out.data().iter().all(|v| v.abs() < 1.0));
    }

    #[test]
    fn synthesize_round_trips_the_1000_sample_segment() {
        let arch = GeneratorArch { widths: [2, 3, 4, 5, 6], ..GeneratorArch::default() };
        let model = GeneratorModel::init(arch, &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
        let segment = vec![0.25; SEGMENT_LEN];
        let out = model.synthesize(&segment).unwrap();
        assert_eq!(out.len(), SEGMENT_LEN);
    }

    #[test]
    fn discriminator_collapses_1024_to_two_scores() {
        let arch = DiscriminatorArch::compact();
        let model = DiscriminatorModel::init(arch, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let out = model.infer(&Tensor3::zeros(1, 1, NETWORK_LEN)).unwrap();
        assert_eq!(out.shape(), (1, 1, 2));
    }

    #[test]
    fn discriminator_length_trace_matches_strides() {
        // 1024 -> 256 -> 64 -> 16 -> 8 -> 4 -> 2 with kernel 4 and the
        // documented per-layer padding.
        let mut len = 1024;
        for spec in DiscriminatorArch::default().layer_specs().unwrap() {
            len = crate::tape::conv1d_output_len(len, spec.kernel_len, spec.stride, spec.pad)
                .unwrap();
        }
        assert_eq!(len, 2);
    }

    #[test]
    fn conditional_discriminator_takes_two_channels() {
        let arch = DiscriminatorArch { conditional: true, ..DiscriminatorArch::compact() };
        let model = DiscriminatorModel::init(arch, &mut ChaCha8Rng::seed_from_u64(10)).unwrap();
        assert!(model.infer(&Tensor3::zeros(1, 1, NETWORK_LEN)).is_err());
        let out = model.infer(&Tensor3::zeros(1, 2, NETWORK_LEN)).unwrap();
        assert_eq!(out.shape(), (1, 1, 2));
    }

    #[test]
    fn inference_is_bit_reproducible() {
        let arch = GeneratorArch { widths: [2, 3, 4, 5, 6], ..GeneratorArch::default() };
        let model = GeneratorModel::init(arch, &mut ChaCha8Rng::seed_from_u64(12)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let segment: Vec<f64> = (0..SEGMENT_LEN).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let a = model.synthesize(&segment).unwrap();
        let b = model.synthesize(&segment).unwrap();
        assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn mac_count_scales_quadratically_with_width() {
        let base = GeneratorModel::init(
            GeneratorArch { widths: [8, 16, 28, 40, 52], ..GeneratorArch::default() },
            &mut ChaCha8Rng::seed_from_u64(14),
        )
        .unwrap();
        let doubled = GeneratorModel::init(
            GeneratorArch { widths: [16, 32, 56, 80, 104], ..GeneratorArch::default() },
            &mut ChaCha8Rng::seed_from_u64(14),
        )
        .unwrap();
        let ratio =
            doubled.mac_count(1024).unwrap() as f64 / base.mac_count(1024).unwrap() as f64;
        assert!((3.0..5.0).contains(&ratio), "ratio {ratio}");
    }
}
