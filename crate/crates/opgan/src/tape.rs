//! Reverse-mode automatic differentiation on a Wengert tape.
//!
//! The tape is rebuilt on every forward pass (define-by-run): each operation
//! immediately computes its output into an arena of value buffers and, when
//! any input can receive gradients, records a [`Node`] describing how to push
//! gradients backwards. [`Tape::backward`] replays the node list in reverse,
//! which is a valid reverse topological order because nodes are appended in
//! execution order.
//!
//! Gradients are *accumulated* — a buffer is never overwritten, so a value
//! consumed by several downstream nodes (or two backward calls on the same
//! tape) sums every contribution. All reductions run in a fixed left-to-right
//! index order, making results bit-reproducible across runs.
//!
//! Supported primitives: 1-D convolution (cross-correlation), integer
//! element-wise power, tanh, leaky rectifier, element-wise addition, constant
//! scaling, 2x upsampling (nearest or linear), center crop/pad, channel
//! concatenation, complex magnitude, and mean-absolute-error reduction.

use crate::error::{Error, Result};
use crate::tensor::{Shape3, Tensor3};

/// Handle to a value on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Upsampling flavor used by [`Tape::upsample2`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum UpsampleKind {
    /// Repeat each sample: `[a, b] -> [a, a, b, b]`.
    Nearest,
    /// Insert midpoints: `[a, b] -> [a, (a+b)/2, b, b]` (last sample held).
    Linear,
}

/// Geometry of one convolution, shared by forward and backward passes.
#[derive(Debug, Clone, Copy)]
struct ConvDims {
    batch: usize,
    in_channels: usize,
    out_channels: usize,
    len_in: usize,
    len_out: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
}

/// Output length of a strided convolution: `floor((L + 2p - K) / s) + 1`.
pub fn conv1d_output_len(len_in: usize, kernel: usize, stride: usize, pad: usize) -> Result<usize> {
    if stride == 0 {
        return Err(Error::Config("convolution stride must be at least 1".into()));
    }
    let padded = len_in + 2 * pad;
    if kernel == 0 {
        return Err(Error::Config("kernel length must be at least 1".into()));
    }
    if kernel > padded {
        return Err(Error::Shape(format!(
            "kernel of {kernel} taps does not fit padded input of {padded} samples"
        )));
    }
    Ok((padded - kernel) / stride + 1)
}

#[derive(Debug, Clone, Copy)]
enum Node {
    Conv1d { input: Var, kernel: Var, bias: Option<Var>, out: Var, dims: ConvDims },
    PowInt { input: Var, out: Var, exponent: u32 },
    Tanh { input: Var, out: Var },
    LeakyRelu { input: Var, out: Var, slope: f64 },
    Add { lhs: Var, rhs: Var, out: Var },
    Scale { input: Var, out: Var, factor: f64 },
    Upsample2 { input: Var, out: Var, kind: UpsampleKind },
    CropPad { input: Var, out: Var },
    ConcatChannels { lhs: Var, rhs: Var, out: Var },
    Magnitude { re: Var, im: Var, out: Var },
    L1Loss { lhs: Var, rhs: Var, out: Var },
}

struct Buf {
    data: Vec<f64>,
    shape: Shape3,
    needs_grad: bool,
}

/// The tape: value arena plus recorded nodes plus gradient buffers.
#[derive(Default)]
pub struct Tape {
    bufs: Vec<Buf>,
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    fn alloc(&mut self, data: Vec<f64>, shape: Shape3, needs_grad: bool) -> Var {
        debug_assert_eq!(data.len(), shape.0 * shape.1 * shape.2);
        self.bufs.push(Buf { data, shape, needs_grad });
        self.grads.push(None);
        Var(self.bufs.len() - 1)
    }

    /// Register a tensor as a leaf. Gradients flow back to it iff the tensor
    /// has `requires_grad` set.
    pub fn leaf(&mut self, tensor: &Tensor3) -> Var {
        self.alloc(tensor.data().to_vec(), tensor.shape(), tensor.requires_grad())
    }

    /// Register a tensor as a leaf with an explicit trainability override,
    /// regardless of the tensor's own `requires_grad` flag. Used to freeze
    /// one network's weights while differentiating through it for another.
    pub fn leaf_as(&mut self, tensor: &Tensor3, requires_grad: bool) -> Var {
        self.alloc(tensor.data().to_vec(), tensor.shape(), requires_grad)
    }

    /// Register a constant leaf that never receives gradients.
    pub fn constant(&mut self, data: Vec<f64>, shape: Shape3) -> Result<Var> {
        if data.len() != shape.0 * shape.1 * shape.2 {
            return Err(Error::Shape(format!(
                "buffer of {} elements cannot fill shape {shape:?}",
                data.len()
            )));
        }
        Ok(self.alloc(data, shape, false))
    }

    /// A constant tensor filled with one value (labels, zero targets, ...).
    pub fn fill(&mut self, shape: Shape3, value: f64) -> Var {
        self.alloc(vec![value; shape.0 * shape.1 * shape.2], shape, false)
    }

    pub fn shape(&self, v: Var) -> Shape3 {
        self.bufs[v.0].shape
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.bufs[v.0].data
    }

    /// The single value of a `[1, 1, 1]` tensor.
    pub fn scalar(&self, v: Var) -> Result<f64> {
        if self.bufs[v.0].shape != (1, 1, 1) {
            return Err(Error::Usage(format!(
                "scalar() called on tensor of shape {:?}",
                self.bufs[v.0].shape
            )));
        }
        Ok(self.bufs[v.0].data[0])
    }

    /// Copy a tape value out into an owned tensor.
    pub fn to_tensor(&self, v: Var) -> Tensor3 {
        Tensor3::from_vec(self.bufs[v.0].data.clone(), self.bufs[v.0].shape)
            .expect("tape buffers always match their shape")
    }

    /// Accumulated gradient of a value, if backward has reached it.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }

    /// Number of recorded nodes (inference-mode passes record none).
    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    /// Drop all gradient buffers, keeping values and nodes.
    pub fn reset_grads(&mut self) {
        for g in &mut self.grads {
            *g = None;
        }
    }

    fn buf_len(&self, v: Var) -> usize {
        self.bufs[v.0].data.len()
    }

    // ── Primitives ──────────────────────────────────────────────────────────

    /// Strided 1-D cross-correlation with optional per-channel bias.
    ///
    /// `input` is `[B, Cin, L]`, `kernel` is `[Cout, Cin, K]`, `bias` (if
    /// given) is `[1, Cout, 1]`. No kernel flip is performed:
    /// `out[b, co, l] = bias[co] + sum_{ci, r} kernel[co, ci, r] * x[b, ci, l*stride + r - pad]`
    /// with out-of-range positions reading zero.
    pub fn conv1d(
        &mut self,
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let (batch, in_channels, len_in) = self.shape(input);
        let (out_channels, k_in, kernel_len) = self.shape(kernel);
        if k_in != in_channels {
            return Err(Error::Shape(format!(
                "kernel expects {k_in} input channels, input has {in_channels}"
            )));
        }
        if let Some(b) = bias {
            if self.shape(b) != (1, out_channels, 1) {
                return Err(Error::Shape(format!(
                    "bias shape {:?} does not match {out_channels} output channels",
                    self.shape(b)
                )));
            }
        }
        let len_out = conv1d_output_len(len_in, kernel_len, stride, pad)?;
        let dims = ConvDims {
            batch,
            in_channels,
            out_channels,
            len_in,
            len_out,
            kernel: kernel_len,
            stride,
            pad,
        };

        let mut out = vec![0.0; batch * out_channels * len_out];
        {
            let x = &self.bufs[input.0].data;
            let w = &self.bufs[kernel.0].data;
            let b = bias.map(|v| self.bufs[v.0].data.clone());
            conv1d_forward(x, w, b.as_deref(), &mut out, dims);
        }

        let needs = self.bufs[input.0].needs_grad
            || self.bufs[kernel.0].needs_grad
            || bias.is_some_and(|b| self.bufs[b.0].needs_grad);
        let out_var = self.alloc(out, (batch, out_channels, len_out), needs);
        if needs {
            self.nodes.push(Node::Conv1d { input, kernel, bias, out: out_var, dims });
        }
        Ok(out_var)
    }

    /// Element-wise integer power `x^q`, `q >= 1`, computed by repeated
    /// multiplication. `q = 1` is an exact copy.
    pub fn pow_int(&mut self, input: Var, exponent: u32) -> Result<Var> {
        if exponent == 0 {
            return Err(Error::Config(
                "power 0 is not supported; the constant term is the layer bias".into(),
            ));
        }
        let shape = self.shape(input);
        let data: Vec<f64> = self.bufs[input.0].data.iter().map(|&x| int_pow(x, exponent)).collect();
        let needs = self.bufs[input.0].needs_grad;
        let out = self.alloc(data, shape, needs);
        if needs {
            self.nodes.push(Node::PowInt { input, out, exponent });
        }
        Ok(out)
    }

    pub fn tanh(&mut self, input: Var) -> Var {
        let shape = self.shape(input);
        let data: Vec<f64> = self.bufs[input.0].data.iter().map(|x| x.tanh()).collect();
        let needs = self.bufs[input.0].needs_grad;
        let out = self.alloc(data, shape, needs);
        if needs {
            self.nodes.push(Node::Tanh { input, out });
        }
        out
    }

    /// `x` for `x >= 0`, `slope * x` below zero.
    pub fn leaky_relu(&mut self, input: Var, slope: f64) -> Var {
        let shape = self.shape(input);
        let data: Vec<f64> = self.bufs[input.0]
            .data
            .iter()
            .map(|&x| if x >= 0.0 { x } else { slope * x })
            .collect();
        let needs = self.bufs[input.0].needs_grad;
        let out = self.alloc(data, shape, needs);
        if needs {
            self.nodes.push(Node::LeakyRelu { input, out, slope });
        }
        out
    }

    /// Element-wise sum of two equal-shape tensors.
    pub fn add(&mut self, lhs: Var, rhs: Var) -> Result<Var> {
        let shape = self.shape(lhs);
        if self.shape(rhs) != shape {
            return Err(Error::Shape(format!(
                "cannot add shapes {:?} and {:?}",
                shape,
                self.shape(rhs)
            )));
        }
        let data: Vec<f64> = self.bufs[lhs.0]
            .data
            .iter()
            .zip(&self.bufs[rhs.0].data)
            .map(|(a, b)| a + b)
            .collect();
        let needs = self.bufs[lhs.0].needs_grad || self.bufs[rhs.0].needs_grad;
        let out = self.alloc(data, shape, needs);
        if needs {
            self.nodes.push(Node::Add { lhs, rhs, out });
        }
        Ok(out)
    }

    /// Multiply every element by a constant.
    pub fn scale(&mut self, input: Var, factor: f64) -> Var {
        let shape = self.shape(input);
        let data: Vec<f64> = self.bufs[input.0].data.iter().map(|x| x * factor).collect();
        let needs = self.bufs[input.0].needs_grad;
        let out = self.alloc(data, shape, needs);
        if needs {
            self.nodes.push(Node::Scale { input, out, factor });
        }
        out
    }

    /// Double the length axis. See [`UpsampleKind`] for the two flavors.
    pub fn upsample2(&mut self, input: Var, kind: UpsampleKind) -> Var {
        let (batch, channels, len) = self.shape(input);
        let mut data = vec![0.0; batch * channels * len * 2];
        for bc in 0..batch * channels {
            let row = &self.bufs[input.0].data[bc * len..(bc + 1) * len];
            let out_row = &mut data[bc * len * 2..(bc + 1) * len * 2];
            match kind {
                UpsampleKind::Nearest => {
                    for l in 0..len {
                        out_row[2 * l] = row[l];
                        out_row[2 * l + 1] = row[l];
                    }
                }
                UpsampleKind::Linear => {
                    for l in 0..len {
                        out_row[2 * l] = row[l];
                        out_row[2 * l + 1] =
                            if l + 1 < len { 0.5 * (row[l] + row[l + 1]) } else { row[l] };
                    }
                }
            }
        }
        let needs = self.bufs[input.0].needs_grad;
        let out = self.alloc(data, (batch, channels, len * 2), needs);
        if needs {
            self.nodes.push(Node::Upsample2 { input, out, kind });
        }
        out
    }

    /// Center-crop (target shorter) or zero-pad (target longer) the length
    /// axis to `target_len`. Odd differences put the extra sample on the
    /// right.
    pub fn crop_pad(&mut self, input: Var, target_len: usize) -> Result<Var> {
        if target_len == 0 {
            return Err(Error::Config("crop/pad target length must be at least 1".into()));
        }
        let (batch, channels, len) = self.shape(input);
        let mut data = vec![0.0; batch * channels * target_len];
        for bc in 0..batch * channels {
            let row = &self.bufs[input.0].data[bc * len..(bc + 1) * len];
            let out_row = &mut data[bc * target_len..(bc + 1) * target_len];
            if target_len <= len {
                let start = (len - target_len) / 2;
                out_row.copy_from_slice(&row[start..start + target_len]);
            } else {
                let left = (target_len - len) / 2;
                out_row[left..left + len].copy_from_slice(row);
            }
        }
        let needs = self.bufs[input.0].needs_grad;
        let out = self.alloc(data, (batch, channels, target_len), needs);
        if needs {
            self.nodes.push(Node::CropPad { input, out });
        }
        Ok(out)
    }

    /// Stack two tensors along the channel axis.
    pub fn concat_channels(&mut self, lhs: Var, rhs: Var) -> Result<Var> {
        let (batch, c_lhs, len) = self.shape(lhs);
        let (b_rhs, c_rhs, l_rhs) = self.shape(rhs);
        if b_rhs != batch || l_rhs != len {
            return Err(Error::Shape(format!(
                "cannot concat shapes {:?} and {:?} along channels",
                self.shape(lhs),
                self.shape(rhs)
            )));
        }
        let channels = c_lhs + c_rhs;
        let mut data = vec![0.0; batch * channels * len];
        for b in 0..batch {
            let dst = &mut data[b * channels * len..(b + 1) * channels * len];
            dst[..c_lhs * len]
                .copy_from_slice(&self.bufs[lhs.0].data[b * c_lhs * len..(b + 1) * c_lhs * len]);
            dst[c_lhs * len..]
                .copy_from_slice(&self.bufs[rhs.0].data[b * c_rhs * len..(b + 1) * c_rhs * len]);
        }
        let needs = self.bufs[lhs.0].needs_grad || self.bufs[rhs.0].needs_grad;
        let out = self.alloc(data, (batch, channels, len), needs);
        if needs {
            self.nodes.push(Node::ConcatChannels { lhs, rhs, out });
        }
        Ok(out)
    }

    /// Element-wise complex magnitude `sqrt(re^2 + im^2)`. Where the
    /// magnitude is exactly zero the (undefined) gradient is taken as zero.
    pub fn magnitude(&mut self, re: Var, im: Var) -> Result<Var> {
        let shape = self.shape(re);
        if self.shape(im) != shape {
            return Err(Error::Shape(format!(
                "magnitude of mismatched shapes {:?} and {:?}",
                shape,
                self.shape(im)
            )));
        }
        let data: Vec<f64> = self.bufs[re.0]
            .data
            .iter()
            .zip(&self.bufs[im.0].data)
            .map(|(&r, &i)| (r * r + i * i).sqrt())
            .collect();
        let needs = self.bufs[re.0].needs_grad || self.bufs[im.0].needs_grad;
        let out = self.alloc(data, shape, needs);
        if needs {
            self.nodes.push(Node::Magnitude { re, im, out });
        }
        Ok(out)
    }

    /// Mean absolute difference, reduced to a `[1, 1, 1]` scalar. The
    /// reduction sums in flat index order. The subgradient of `|x|` at zero
    /// is taken as zero.
    pub fn l1_loss(&mut self, lhs: Var, rhs: Var) -> Result<Var> {
        let shape = self.shape(lhs);
        if self.shape(rhs) != shape {
            return Err(Error::Shape(format!(
                "mean-absolute-error of mismatched shapes {:?} and {:?}",
                shape,
                self.shape(rhs)
            )));
        }
        let n = self.bufs[lhs.0].data.len();
        let mut total = 0.0;
        for (a, b) in self.bufs[lhs.0].data.iter().zip(&self.bufs[rhs.0].data) {
            total += (a - b).abs();
        }
        let mean = total / n as f64;
        let needs = self.bufs[lhs.0].needs_grad || self.bufs[rhs.0].needs_grad;
        let out = self.alloc(vec![mean], (1, 1, 1), needs);
        if needs {
            self.nodes.push(Node::L1Loss { lhs, rhs, out });
        }
        Ok(out)
    }

    // ── Backward ────────────────────────────────────────────────────────────

    /// Push gradients from a scalar loss back to every leaf that requires
    /// them. Each call computes one clean pass into scratch buffers and adds
    /// the result to the stored gradients, so calling twice without
    /// [`Tape::reset_grads`] yields exactly twice the gradients.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.bufs[loss.0].shape != (1, 1, 1) {
            return Err(Error::Usage(format!(
                "backward expects a scalar loss, got shape {:?}",
                self.bufs[loss.0].shape
            )));
        }
        let mut local: Vec<Option<Vec<f64>>> = vec![None; self.bufs.len()];
        local[loss.0] = Some(vec![1.0]);

        for idx in (0..self.nodes.len()).rev() {
            let node = self.nodes[idx];
            self.step(&node, &mut local);
        }

        for (i, contribution) in local.into_iter().enumerate() {
            if let Some(c) = contribution {
                let stored =
                    self.grads[i].get_or_insert_with(|| vec![0.0; self.bufs[i].data.len()]);
                add_into(stored, &c);
            }
        }
        Ok(())
    }

    fn step(&self, node: &Node, local: &mut [Option<Vec<f64>>]) {
        match *node {
            Node::Conv1d { input, kernel, bias, out, dims } => {
                let Some(up) = local[out.0].clone() else { return };
                if self.bufs[input.0].needs_grad {
                    let mut d_in = vec![0.0; self.bufs[input.0].data.len()];
                    conv1d_backward_input(&self.bufs[kernel.0].data, &up, &mut d_in, dims);
                    add_into(scratch(local, input, self.buf_len(input)), &d_in);
                }
                if self.bufs[kernel.0].needs_grad {
                    let mut d_k = vec![0.0; self.bufs[kernel.0].data.len()];
                    conv1d_backward_kernel(&self.bufs[input.0].data, &up, &mut d_k, dims);
                    add_into(scratch(local, kernel, self.buf_len(kernel)), &d_k);
                }
                if let Some(b) = bias {
                    if self.bufs[b.0].needs_grad {
                        let mut d_b = vec![0.0; dims.out_channels];
                        for bt in 0..dims.batch {
                            for co in 0..dims.out_channels {
                                let base = (bt * dims.out_channels + co) * dims.len_out;
                                for l in 0..dims.len_out {
                                    d_b[co] += up[base + l];
                                }
                            }
                        }
                        add_into(scratch(local, b, self.buf_len(b)), &d_b);
                    }
                }
            }
            Node::PowInt { input, out, exponent } => {
                let Some(up) = local[out.0].clone() else { return };
                let d: Vec<f64> = self.bufs[input.0]
                    .data
                    .iter()
                    .zip(&up)
                    .map(|(&x, &u)| u * exponent as f64 * int_pow(x, exponent - 1))
                    .collect();
                add_into(scratch(local, input, self.buf_len(input)), &d);
            }
            Node::Tanh { input, out } => {
                let Some(up) = local[out.0].clone() else { return };
                let d: Vec<f64> = self.bufs[out.0]
                    .data
                    .iter()
                    .zip(&up)
                    .map(|(&y, &u)| u * (1.0 - y * y))
                    .collect();
                add_into(scratch(local, input, self.buf_len(input)), &d);
            }
            Node::LeakyRelu { input, out, slope } => {
                let Some(up) = local[out.0].clone() else { return };
                let d: Vec<f64> = self.bufs[input.0]
                    .data
                    .iter()
                    .zip(&up)
                    .map(|(&x, &u)| if x >= 0.0 { u } else { u * slope })
                    .collect();
                add_into(scratch(local, input, self.buf_len(input)), &d);
            }
            Node::Add { lhs, rhs, out } => {
                let Some(up) = local[out.0].clone() else { return };
                if self.bufs[lhs.0].needs_grad {
                    add_into(scratch(local, lhs, self.buf_len(lhs)), &up);
                }
                if self.bufs[rhs.0].needs_grad {
                    add_into(scratch(local, rhs, self.buf_len(rhs)), &up);
                }
            }
            Node::Scale { input, out, factor } => {
                let Some(up) = local[out.0].clone() else { return };
                let d: Vec<f64> = up.iter().map(|u| u * factor).collect();
                add_into(scratch(local, input, self.buf_len(input)), &d);
            }
            Node::Upsample2 { input, out, kind } => {
                let Some(up) = local[out.0].clone() else { return };
                let (batch, channels, len) = self.bufs[input.0].shape;
                let mut d = vec![0.0; batch * channels * len];
                for bc in 0..batch * channels {
                    let u = &up[bc * len * 2..(bc + 1) * len * 2];
                    let row = &mut d[bc * len..(bc + 1) * len];
                    match kind {
                        UpsampleKind::Nearest => {
                            for l in 0..len {
                                row[l] = u[2 * l] + u[2 * l + 1];
                            }
                        }
                        UpsampleKind::Linear => {
                            for l in 0..len {
                                row[l] += u[2 * l];
                            }
                            for l in 0..len - 1 {
                                row[l] += 0.5 * u[2 * l + 1];
                                row[l + 1] += 0.5 * u[2 * l + 1];
                            }
                            row[len - 1] += u[2 * len - 1];
                        }
                    }
                }
                add_into(scratch(local, input, self.buf_len(input)), &d);
            }
            Node::CropPad { input, out } => {
                let Some(up) = local[out.0].clone() else { return };
                let (batch, channels, len) = self.bufs[input.0].shape;
                let target = self.bufs[out.0].shape.2;
                let mut d = vec![0.0; batch * channels * len];
                for bc in 0..batch * channels {
                    let u = &up[bc * target..(bc + 1) * target];
                    let row = &mut d[bc * len..(bc + 1) * len];
                    if target <= len {
                        let start = (len - target) / 2;
                        row[start..start + target].copy_from_slice(u);
                    } else {
                        let left = (target - len) / 2;
                        row.copy_from_slice(&u[left..left + len]);
                    }
                }
                add_into(scratch(local, input, self.buf_len(input)), &d);
            }
            Node::ConcatChannels { lhs, rhs, out } => {
                let Some(up) = local[out.0].clone() else { return };
                let (batch, c_lhs, len) = self.bufs[lhs.0].shape;
                let c_rhs = self.bufs[rhs.0].shape.1;
                let channels = c_lhs + c_rhs;
                if self.bufs[lhs.0].needs_grad {
                    let mut d = vec![0.0; batch * c_lhs * len];
                    for b in 0..batch {
                        d[b * c_lhs * len..(b + 1) * c_lhs * len]
                            .copy_from_slice(&up[b * channels * len..b * channels * len + c_lhs * len]);
                    }
                    add_into(scratch(local, lhs, self.buf_len(lhs)), &d);
                }
                if self.bufs[rhs.0].needs_grad {
                    let mut d = vec![0.0; batch * c_rhs * len];
                    for b in 0..batch {
                        d[b * c_rhs * len..(b + 1) * c_rhs * len].copy_from_slice(
                            &up[b * channels * len + c_lhs * len..(b + 1) * channels * len],
                        );
                    }
                    add_into(scratch(local, rhs, self.buf_len(rhs)), &d);
                }
            }
            Node::Magnitude { re, im, out } => {
                let Some(up) = local[out.0].clone() else { return };
                let scaled: Vec<f64> = self.bufs[out.0]
                    .data
                    .iter()
                    .zip(&up)
                    .map(|(&m, &u)| if m > 0.0 { u / m } else { 0.0 })
                    .collect();
                if self.bufs[re.0].needs_grad {
                    let d: Vec<f64> =
                        self.bufs[re.0].data.iter().zip(&scaled).map(|(&r, &s)| s * r).collect();
                    add_into(scratch(local, re, self.buf_len(re)), &d);
                }
                if self.bufs[im.0].needs_grad {
                    let d: Vec<f64> =
                        self.bufs[im.0].data.iter().zip(&scaled).map(|(&i, &s)| s * i).collect();
                    add_into(scratch(local, im, self.buf_len(im)), &d);
                }
            }
            Node::L1Loss { lhs, rhs, out } => {
                let Some(up) = local[out.0].clone() else { return };
                let u = up[0];
                let n = self.bufs[lhs.0].data.len() as f64;
                let signs: Vec<f64> = self.bufs[lhs.0]
                    .data
                    .iter()
                    .zip(&self.bufs[rhs.0].data)
                    .map(|(a, b)| {
                        let d = a - b;
                        if d > 0.0 {
                            1.0
                        } else if d < 0.0 {
                            -1.0
                        } else {
                            0.0
                        }
                    })
                    .collect();
                if self.bufs[lhs.0].needs_grad {
                    let d: Vec<f64> = signs.iter().map(|s| u * s / n).collect();
                    add_into(scratch(local, lhs, self.buf_len(lhs)), &d);
                }
                if self.bufs[rhs.0].needs_grad {
                    let d: Vec<f64> = signs.iter().map(|s| -u * s / n).collect();
                    add_into(scratch(local, rhs, self.buf_len(rhs)), &d);
                }
            }
        }
    }
}

/// Scratch gradient buffer for one backward pass, allocated on first touch.
fn scratch<'a>(local: &'a mut [Option<Vec<f64>>], v: Var, len: usize) -> &'a mut Vec<f64> {
    local[v.0].get_or_insert_with(|| vec![0.0; len])
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    debug_assert_eq!(dst.len(), src.len());
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// `x^q` by repeated multiplication in a fixed order; `x^0 = 1`.
#[inline]
fn int_pow(x: f64, q: u32) -> f64 {
    let mut acc = 1.0;
    for _ in 0..q {
        acc *= x;
    }
    acc
}

/// Copy one batch's channels into a zero-padded scratch row.
fn pad_batch(x: &[f64], b: usize, dims: ConvDims, scratch: &mut [f64]) {
    let padded_len = dims.len_in + 2 * dims.pad;
    scratch.iter_mut().for_each(|v| *v = 0.0);
    for ci in 0..dims.in_channels {
        let src = &x[(b * dims.in_channels + ci) * dims.len_in..][..dims.len_in];
        scratch[ci * padded_len + dims.pad..ci * padded_len + dims.pad + dims.len_in]
            .copy_from_slice(src);
    }
}

fn conv1d_forward(x: &[f64], w: &[f64], bias: Option<&[f64]>, out: &mut [f64], dims: ConvDims) {
    let padded_len = dims.len_in + 2 * dims.pad;
    let mut padded = vec![0.0; dims.in_channels * padded_len];
    for b in 0..dims.batch {
        pad_batch(x, b, dims, &mut padded);
        for co in 0..dims.out_channels {
            let out_row = &mut out[(b * dims.out_channels + co) * dims.len_out..][..dims.len_out];
            if let Some(bias) = bias {
                out_row.iter_mut().for_each(|v| *v = bias[co]);
            }
            for ci in 0..dims.in_channels {
                let x_row = &padded[ci * padded_len..(ci + 1) * padded_len];
                let w_row = &w[(co * dims.in_channels + ci) * dims.kernel..][..dims.kernel];
                for (r, &wv) in w_row.iter().enumerate() {
                    for l in 0..dims.len_out {
                        out_row[l] += wv * x_row[l * dims.stride + r];
                    }
                }
            }
        }
    }
}

fn conv1d_backward_input(w: &[f64], up: &[f64], d_in: &mut [f64], dims: ConvDims) {
    let padded_len = dims.len_in + 2 * dims.pad;
    let mut d_padded = vec![0.0; dims.in_channels * padded_len];
    for b in 0..dims.batch {
        d_padded.iter_mut().for_each(|v| *v = 0.0);
        for co in 0..dims.out_channels {
            let u = &up[(b * dims.out_channels + co) * dims.len_out..][..dims.len_out];
            for ci in 0..dims.in_channels {
                let d_row = &mut d_padded[ci * padded_len..(ci + 1) * padded_len];
                let w_row = &w[(co * dims.in_channels + ci) * dims.kernel..][..dims.kernel];
                for (r, &wv) in w_row.iter().enumerate() {
                    for l in 0..dims.len_out {
                        d_row[l * dims.stride + r] += wv * u[l];
                    }
                }
            }
        }
        for ci in 0..dims.in_channels {
            let dst = &mut d_in[(b * dims.in_channels + ci) * dims.len_in..][..dims.len_in];
            let src = &d_padded[ci * padded_len + dims.pad..ci * padded_len + dims.pad + dims.len_in];
            for (d, s) in dst.iter_mut().zip(src) {
                *d += s;
            }
        }
    }
}

fn conv1d_backward_kernel(x: &[f64], up: &[f64], d_k: &mut [f64], dims: ConvDims) {
    let padded_len = dims.len_in + 2 * dims.pad;
    let mut padded = vec![0.0; dims.in_channels * padded_len];
    for b in 0..dims.batch {
        pad_batch(x, b, dims, &mut padded);
        for co in 0..dims.out_channels {
            let u = &up[(b * dims.out_channels + co) * dims.len_out..][..dims.len_out];
            for ci in 0..dims.in_channels {
                let x_row = &padded[ci * padded_len..(ci + 1) * padded_len];
                let d_row = &mut d_k[(co * dims.in_channels + ci) * dims.kernel..][..dims.kernel];
                for (r, dv) in d_row.iter_mut().enumerate() {
                    let mut acc = 0.0;
                    for l in 0..dims.len_out {
                        acc += u[l] * x_row[l * dims.stride + r];
                    }
                    *dv += acc;
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn signal(samples: &[f64]) -> Tensor3 {
        Tensor3::from_signal(samples)
    }

    fn param(samples: &[f64], shape: Shape3) -> Tensor3 {
        let mut t = Tensor3::from_vec(samples.to_vec(), shape).unwrap();
        t.set_requires_grad(true);
        t
    }

    #[test]
    fn conv_identity_kernel_passes_signal_through() {
        let mut tape = Tape::new();
        let x = tape.leaf(&signal(&[1.0, 2.0, 3.0]));
        let k = tape.constant(vec![1.0], (1, 1, 1)).unwrap();
        let y = tape.conv1d(x, k, None, 1, 0).unwrap();
        assert_eq!(tape.value(y), &[1.0, 2.0, 3.0]);
    }

    #[test]
    fn conv_zero_kernel_yields_zero() {
        let mut tape = Tape::new();
        let x = tape.leaf(&signal(&[4.0, -5.0, 6.0]));
        let k = tape.constant(vec![0.0, 0.0], (1, 1, 2)).unwrap();
        let y = tape.conv1d(x, k, None, 1, 0).unwrap();
        assert_eq!(tape.value(y), &[0.0, 0.0]);
    }

    #[test]
    fn conv_is_cross_correlation_without_kernel_flip() {
        // [1, 2, 3] against taps [1, 1]: out[0] = 1 + 2 = 3, out[1] = 2 + 3 = 5.
        let mut tape = Tape::new();
        let x = tape.leaf(&signal(&[1.0, 2.0, 3.0]));
        let k = tape.constant(vec![1.0, 1.0], (1, 1, 2)).unwrap();
        let y = tape.conv1d(x, k, None, 1, 0).unwrap();
        assert_eq!(tape.value(y), &[3.0, 5.0]);
        // An asymmetric kernel distinguishes correlation from convolution:
        // taps [1, 2] give out[0] = 1*1 + 2*2 = 5, not the flipped 1*2 + 2*1 = 4.
        let mut tape = Tape::new();
        let x = tape.leaf(&signal(&[1.0, 2.0, 3.0]));
        let k = tape.constant(vec![1.0, 2.0], (1, 1, 2)).unwrap();
        let y = tape.conv1d(x, k, None, 1, 0).unwrap();
        assert_eq!(tape.value(y), &[5.0, 8.0]);
    }

    #[test]
    fn conv_output_length_follows_stride_and_pad() {
        assert_eq!(conv1d_output_len(7, 3, 2, 1).unwrap(), 4);
        assert_eq!(conv1d_output_len(1024, 5, 2, 2).unwrap(), 512);
        assert_eq!(conv1d_output_len(1024, 4, 4, 0).unwrap(), 256);
        assert_eq!(conv1d_output_len(16, 4, 2, 1).unwrap(), 8);
        assert!(conv1d_output_len(2, 5, 1, 0).is_err());
        assert!(conv1d_output_len(8, 3, 0, 1).is_err());
    }

    #[test]
    fn conv_rejects_channel_mismatch() {
        let mut tape = Tape::new();
        let x = tape.constant(vec![0.0; 6], (1, 2, 3)).unwrap();
        let k = tape.constant(vec![0.0; 3], (1, 3, 1)).unwrap();
        assert!(matches!(tape.conv1d(x, k, None, 1, 0), Err(Error::Shape(_))));
    }

    #[test]
    fn conv_bias_broadcasts_per_channel() {
        let mut tape = Tape::new();
        let x = tape.leaf(&signal(&[1.0, 2.0]));
        let k = tape.constant(vec![1.0, 1.0], (2, 1, 1)).unwrap();
        let b = tape.constant(vec![10.0, -10.0], (1, 2, 1)).unwrap();
        let y = tape.conv1d(x, k, Some(b), 1, 0).unwrap();
        assert_eq!(tape.value(y), &[11.0, 12.0, -9.0, -8.0]);
    }

    #[test]
    fn pow_one_is_exact_copy() {
        let mut tape = Tape::new();
        let x = tape.leaf(&signal(&[0.123456789, -7.5, 1e-300]));
        let y = tape.pow_int(x, 1).unwrap();
        assert_eq!(tape.value(y), tape.value(x));
    }

    #[test]
    fn pow_squares_and_cubes() {
        let mut tape = Tape::new();
        let x = tape.leaf(&signal(&[0.5]));
        let y = tape.pow_int(x, 2).unwrap();
        assert_eq!(tape.value(y), &[0.25]);

        let x = tape.leaf(&signal(&[-1.0, 0.0, 1.0]));
        let y = tape.pow_int(x, 3).unwrap();
        assert_eq!(tape.value(y), &[-1.0, 0.0, 1.0]);
    }

    #[test]
    fn pow_zero_is_rejected() {
        let mut tape = Tape::new();
        let x = tape.leaf(&signal(&[1.0]));
        assert!(matches!(tape.pow_int(x, 0), Err(Error::Config(_))));
    }

    #[test]
    fn tanh_fixes_zero_and_saturates() {
        let mut tape = Tape::new();
        let x = tape.leaf(&signal(&[0.0, 100.0, 1.0]));
        let y = tape.tanh(x);
        let v = tape.value(y);
        assert_eq!(v[0], 0.0);
        assert!((v[1] - 1.0).abs() < 1e-12);
        assert!((v[2] - 0.7615941559557649).abs() < 1e-15);
    }

    #[test]
    fn leaky_relu_scales_negatives_only() {
        let mut tape = Tape::new();
        let x = tape.leaf(&signal(&[-2.0, 0.0, 3.0]));
        let y = tape.leaky_relu(x, 0.2);
        assert_eq!(tape.value(y), &[-0.4, 0.0, 3.0]);
    }

    #[test]
    fn upsample_nearest_repeats_each_sample() {
        let mut tape = Tape::new();
        let x = tape.leaf(&signal(&[1.0, 2.0]));
        let y = tape.upsample2(x, UpsampleKind::Nearest);
        assert_eq!(tape.value(y), &[1.0, 1.0, 2.0, 2.0]);
    }

    #[test]
    fn upsample_linear_inserts_midpoints() {
        let mut tape = Tape::new();
        let x = tape.leaf(&signal(&[0.0, 2.0, 4.0]));
        let y = tape.upsample2(x, UpsampleKind::Linear);
        assert_eq!(tape.value(y), &[0.0, 1.0, 2.0, 3.0, 4.0, 4.0]);
    }

    #[test]
    fn upsample_nearest_backward_sums_sample_pairs() {
        let mut tape = Tape::new();
        let mut x = signal(&[1.0, 2.0]);
        x.set_requires_grad(true);
        let xv = tape.leaf(&x);
        let y = tape.upsample2(xv, UpsampleKind::Nearest);
        let zeros = tape.fill((1, 1, 4), 0.0);
        // mean |y| has gradient sign(y)/4 per output; each input feeds two
        // outputs, so each input gradient is 2 * (1/4) = 0.5.
        let loss = tape.l1_loss(y, zeros).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(xv).unwrap(), &[0.5, 0.5]);
    }

    #[test]
    fn crop_then_pad_round_trips_center() {
        let mut tape = Tape::new();
        let x = tape.leaf(&signal(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let cropped = tape.crop_pad(x, 4).unwrap();
        assert_eq!(tape.value(cropped), &[2.0, 3.0, 4.0, 5.0]);
        let padded = tape.crop_pad(cropped, 6).unwrap();
        assert_eq!(tape.value(padded), &[0.0, 2.0, 3.0, 4.0, 5.0, 0.0]);
    }

    #[test]
    fn add_and_l1_match_hand_values() {
        let mut tape = Tape::new();
        let a = tape.leaf(&signal(&[1.0, 2.0]));
        let b = tape.leaf(&signal(&[3.0, 4.0]));
        let s = tape.add(a, b).unwrap();
        assert_eq!(tape.value(s), &[4.0, 6.0]);

        let same = tape.l1_loss(a, a).unwrap();
        assert_eq!(tape.scalar(same).unwrap(), 0.0);

        let c = tape.leaf(&signal(&[1.0, 1.0]));
        let d = tape.leaf(&signal(&[0.0, 2.0]));
        let l = tape.l1_loss(c, d).unwrap();
        assert_eq!(tape.scalar(l).unwrap(), 1.0);
    }

    #[test]
    fn magnitude_matches_pythagoras() {
        let mut tape = Tape::new();
        let re = tape.leaf(&signal(&[3.0, 0.0]));
        let im = tape.leaf(&signal(&[4.0, 0.0]));
        let m = tape.magnitude(re, im).unwrap();
        assert_eq!(tape.value(m), &[5.0, 0.0]);
    }

    #[test]
    fn backward_chain_rule_through_conv_and_l1() {
        // loss = mean |w * x| over x = [1, -2, 3] with scalar kernel w = 0.5:
        // d loss / d w = mean(sign(w x) * x) = (1 + 2 + 3) / 3 = 2.
        let mut tape = Tape::new();
        let x = tape.leaf(&signal(&[1.0, -2.0, 3.0]));
        let w = tape.leaf(&param(&[0.5], (1, 1, 1)));
        let y = tape.conv1d(x, w, None, 1, 0).unwrap();
        let zeros = tape.fill((1, 1, 3), 0.0);
        let loss = tape.l1_loss(y, zeros).unwrap();
        assert!((tape.scalar(loss).unwrap() - 1.0).abs() < 1e-15);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(w).unwrap(), &[2.0]);
    }

    #[test]
    fn backward_leaves_constant_paths_untouched() {
        let mut tape = Tape::new();
        let w = tape.leaf(&param(&[0.5], (1, 1, 1)));
        let c = tape.leaf(&signal(&[7.0]));
        let zeros = tape.fill((1, 1, 1), 0.0);
        // Loss depends only on the constant; w never enters the graph.
        let loss = tape.l1_loss(c, zeros).unwrap();
        tape.backward(loss).unwrap();
        assert!(tape.grad(w).is_none());
    }

    #[test]
    fn repeated_backward_accumulates_exactly_twice() {
        let build = |tape: &mut Tape| {
            let x = tape.leaf(&signal(&[1.0, -2.0, 3.0]));
            let w = tape.leaf(&param(&[0.5, -0.25], (1, 1, 2)));
            let y = tape.conv1d(x, w, None, 1, 0).unwrap();
            let zeros = tape.fill((1, 1, 2), 0.0);
            (w, tape.l1_loss(y, zeros).unwrap())
        };
        let mut once = Tape::new();
        let (w1, loss1) = build(&mut once);
        once.backward(loss1).unwrap();
        let single: Vec<f64> = once.grad(w1).unwrap().to_vec();

        let mut twice = Tape::new();
        let (w2, loss2) = build(&mut twice);
        twice.backward(loss2).unwrap();
        twice.backward(loss2).unwrap();
        let doubled: Vec<f64> = twice.grad(w2).unwrap().to_vec();

        for (s, d) in single.iter().zip(&doubled) {
            assert_eq!(2.0 * s, *d);
        }
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut tape = Tape::new();
        let x = tape.leaf(&param(&[1.0, 2.0], (1, 1, 2)));
        assert!(matches!(tape.backward(x), Err(Error::Usage(_))));
    }

    #[test]
    fn forward_and_backward_are_bit_reproducible() {
        let run = || {
            let mut tape = Tape::new();
            let x = tape.leaf(&signal(&[0.3, -0.7, 0.11, 0.925, -0.4]));
            let w = tape.leaf(&param(&[0.21, -0.43, 0.05, 0.17, -0.3, 0.08], (2, 1, 3)));
            let b = tape.leaf(&param(&[0.01, -0.02], (1, 2, 1)));
            let y = tape.conv1d(x, w, Some(b), 2, 1).unwrap();
            let t = tape.tanh(y);
            let zeros = tape.fill(tape.shape(t), 0.0);
            let loss = tape.l1_loss(t, zeros).unwrap();
            tape.backward(loss).unwrap();
            (
                tape.scalar(loss).unwrap().to_bits(),
                tape.grad(w).unwrap().iter().map(|g| g.to_bits()).collect::<Vec<_>>(),
            )
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn inference_mode_records_no_nodes() {
        let mut tape = Tape::new();
        let x = tape.leaf(&signal(&[1.0, 2.0, 3.0]));
        let k = tape.constant(vec![1.0, 1.0], (1, 1, 2)).unwrap();
        let y = tape.conv1d(x, k, None, 1, 0).unwrap();
        let _ = tape.tanh(y);
        assert_eq!(tape.node_count(), 0);
    }

    #[test]
    fn concat_channels_stacks_and_splits_gradients() {
        let mut tape = Tape::new();
        let a = tape.leaf(&param(&[1.0, 2.0], (1, 1, 2)));
        let b = tape.leaf(&param(&[3.0, 4.0], (1, 1, 2)));
        let c = tape.concat_channels(a, b).unwrap();
        assert_eq!(tape.shape(c), (1, 2, 2));
        assert_eq!(tape.value(c), &[1.0, 2.0, 3.0, 4.0]);
        let zeros = tape.fill((1, 2, 2), 0.0);
        let loss = tape.l1_loss(c, zeros).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(a).unwrap(), &[0.25, 0.25]);
        assert_eq!(tape.grad(b).unwrap(), &[0.25, 0.25]);
    }
}
