//! Reverse-mode differentiation over a recorded operation list.
//!
//! A [`Tape`] evaluates eagerly: each operation computes its output tensor
//! immediately and records what it did. [`Tape::backward`] walks the record
//! in reverse, accumulating adjoints, and writes parameter gradients into
//! the [`ParamSet`] the parameters were registered from (zeroing the set's
//! gradients first).
//!
//! [`Value`]s are cheap copyable handles tied to the tape that made them;
//! using one on a different tape is a programming error and panics.
//! Structural problems (shape mismatches, domain violations) are reported
//! as `Err` when the operation is recorded.

use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;

use crate::error::{Error, Result};
use crate::numcore::kernels::{self, ConvShape, ConvTransposeShape};
use crate::numcore::params::ParamSet;
use crate::numcore::tensor::Tensor;
use crate::par;

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to one recorded tensor on a specific tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Value {
    tape: u64,
    slot: u32,
}

struct Node {
    value: Tensor,
    needs_grad: bool,
    op: Op,
}

enum Op {
    Leaf,
    Param { index: usize },
    Conv2d { input: u32, kernels: u32, bias: u32, shape: ConvShape },
    ConvTranspose2d { input: u32, kernels: u32, bias: u32, shape: ConvTransposeShape },
    MaxPool2x2 { input: u32, c: usize, h: usize, w: usize, argmax: Vec<u32> },
    Relu { input: u32 },
    Sigmoid { input: u32 },
    Softmax { input: u32 },
    Dense { weights: u32, bias: u32, input: u32, rows: usize, cols: usize },
    Dropout { input: u32, mask: Vec<f64> },
    CrossEntropy { probs: u32, target: usize },
    Add { a: u32, b: u32 },
    Sub { a: u32, b: u32 },
    Mul { a: u32, b: u32 },
    Neg { input: u32 },
    Scale { input: u32, factor: f64 },
    AddScalar { input: u32 },
    Clamp { input: u32, lo: f64, hi: f64 },
    Log { input: u32 },
    Mean { input: u32 },
    AddN { inputs: Vec<u32> },
    Reshape { input: u32 },
    ConcatFlat { inputs: Vec<u32> },
    ConcatChannels { inputs: Vec<u32> },
    GlobalAvgPool { input: u32, c: usize, plane: usize },
}

/// Probability floor used when taking the log of a predicted probability.
pub const PROB_FLOOR: f64 = 1e-12;

/// Recorded computation with eager forward evaluation.
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
    parallel: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Tape::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            parallel: par::parallel_enabled(),
        }
    }

    /// Turns parallel kernel dispatch on or off for this tape.
    pub fn set_parallel(&mut self, on: bool) {
        self.parallel = on && par::parallel_enabled();
    }

    fn par_for(&self, work: usize) -> bool {
        self.parallel && work >= par::PAR_THRESHOLD
    }

    fn push(&mut self, value: Tensor, needs_grad: bool, op: Op) -> Value {
        assert!(self.nodes.len() < u32::MAX as usize, "tape full");
        let slot = self.nodes.len() as u32;
        self.nodes.push(Node { value, needs_grad, op });
        Value { tape: self.id, slot }
    }

    fn node(&self, v: Value) -> &Node {
        assert_eq!(v.tape, self.id, "value belongs to a different tape");
        &self.nodes[v.slot as usize]
    }

    /// The tensor a value refers to.
    pub fn value(&self, v: Value) -> &Tensor {
        &self.node(v).value
    }

    /// Records a constant input; no gradient flows into it.
    pub fn leaf(&mut self, t: Tensor) -> Value {
        self.push(t, false, Op::Leaf)
    }

    /// Registers a named parameter from `set`. Its gradient is written back
    /// into the same set by [`Tape::backward`]. Registering the same name
    /// twice is allowed and accumulates both uses' gradients.
    pub fn param(&mut self, set: &ParamSet, name: &str) -> Result<Value> {
        let index = set
            .index_of(name)
            .ok_or_else(|| Error::Config(format!("unknown parameter {name:?}")))?;
        let value = set.by_index(index).value.clone();
        Ok(self.push(value, true, Op::Param { index }))
    }

    /// Convolution of a `[c_in, h, w]` input with `[c_out, c_in, k, k]`
    /// kernels and a `[c_out]` bias.
    pub fn conv2d(
        &mut self,
        input: Value,
        kernels: Value,
        bias: Value,
        stride: usize,
        pad: usize,
    ) -> Result<Value> {
        let in_shape = self.node(input).value.shape().to_vec();
        let k_shape = self.node(kernels).value.shape().to_vec();
        let b_shape = self.node(bias).value.shape().to_vec();
        if in_shape.len() != 3 {
            return Err(Error::Shape(format!("conv input must be [c,h,w], got {in_shape:?}")));
        }
        if k_shape.len() != 4 || k_shape[2] != k_shape[3] {
            return Err(Error::Shape(format!(
                "conv kernels must be [c_out, c_in, k, k], got {k_shape:?}"
            )));
        }
        if b_shape != [k_shape[0]] {
            return Err(Error::Shape(format!(
                "conv bias must be [{}], got {b_shape:?}",
                k_shape[0]
            )));
        }
        if k_shape[1] != in_shape[0] {
            return Err(Error::Shape(format!(
                "conv kernels expect {} input channels, input has {}",
                k_shape[1], in_shape[0]
            )));
        }
        let shape = ConvShape {
            c_in: in_shape[0],
            h: in_shape[1],
            w: in_shape[2],
            c_out: k_shape[0],
            k: k_shape[2],
            stride,
            pad,
        };
        let (oh, ow) = shape.out_hw().ok_or_else(|| {
            Error::Geometry(format!(
                "{}x{} input (pad {}) is smaller than a {}x{} kernel",
                shape.h, shape.w, pad, shape.k, shape.k
            ))
        })?;
        let work = shape.c_out * oh * ow * shape.c_in * shape.k * shape.k;
        let out = kernels::conv2d_forward(
            &shape,
            self.node(input).value.data(),
            self.node(kernels).value.data(),
            self.node(bias).value.data(),
            self.par_for(work),
        );
        let needs = self.node(input).needs_grad
            || self.node(kernels).needs_grad
            || self.node(bias).needs_grad;
        let t = Tensor::from_vec(&[shape.c_out, oh, ow], out)?;
        Ok(self.push(
            t,
            needs,
            Op::Conv2d { input: input.slot, kernels: kernels.slot, bias: bias.slot, shape },
        ))
    }

    /// Transposed convolution of a `[c_in, h, w]` input with
    /// `[c_in, c_out, k, k]` kernels, producing the recorded
    /// `[c_out, out_h, out_w]` target size.
    #[allow(clippy::too_many_arguments)]
    pub fn conv_transpose2d(
        &mut self,
        input: Value,
        kernels: Value,
        bias: Value,
        stride: usize,
        pad: usize,
        out_h: usize,
        out_w: usize,
    ) -> Result<Value> {
        let in_shape = self.node(input).value.shape().to_vec();
        let k_shape = self.node(kernels).value.shape().to_vec();
        let b_shape = self.node(bias).value.shape().to_vec();
        if in_shape.len() != 3 {
            return Err(Error::Shape(format!(
                "transposed conv input must be [c,h,w], got {in_shape:?}"
            )));
        }
        if k_shape.len() != 4 || k_shape[2] != k_shape[3] {
            return Err(Error::Shape(format!(
                "transposed conv kernels must be [c_in, c_out, k, k], got {k_shape:?}"
            )));
        }
        if k_shape[0] != in_shape[0] {
            return Err(Error::Shape(format!(
                "transposed conv kernels expect {} input channels, input has {}",
                k_shape[0], in_shape[0]
            )));
        }
        if b_shape != [k_shape[1]] {
            return Err(Error::Shape(format!(
                "transposed conv bias must be [{}], got {b_shape:?}",
                k_shape[1]
            )));
        }
        let shape = ConvTransposeShape {
            c_in: in_shape[0],
            h: in_shape[1],
            w: in_shape[2],
            c_out: k_shape[1],
            k: k_shape[2],
            stride,
            pad,
            out_h,
            out_w,
        };
        if !shape.is_valid() {
            return Err(Error::Geometry(format!(
                "transposed conv cannot map {}x{} to {}x{} with k={}, stride={}, pad={}",
                shape.h, shape.w, out_h, out_w, shape.k, stride, pad
            )));
        }
        let work = shape.in_len() * shape.c_out * shape.k * shape.k;
        let out = kernels::conv_transpose2d_forward(
            &shape,
            self.node(input).value.data(),
            self.node(kernels).value.data(),
            self.node(bias).value.data(),
            self.par_for(work),
        );
        let needs = self.node(input).needs_grad
            || self.node(kernels).needs_grad
            || self.node(bias).needs_grad;
        let t = Tensor::from_vec(&[shape.c_out, out_h, out_w], out)?;
        Ok(self.push(
            t,
            needs,
            Op::ConvTranspose2d {
                input: input.slot,
                kernels: kernels.slot,
                bias: bias.slot,
                shape,
            },
        ))
    }

    /// 2x2 max pooling with stride 2; odd trailing rows and columns drop.
    pub fn maxpool2x2(&mut self, input: Value) -> Result<Value> {
        let shape = self.node(input).value.shape().to_vec();
        if shape.len() != 3 {
            return Err(Error::Shape(format!("pool input must be [c,h,w], got {shape:?}")));
        }
        let (c, h, w) = (shape[0], shape[1], shape[2]);
        if h < 2 || w < 2 {
            return Err(Error::Geometry(format!("cannot 2x2-pool a {h}x{w} map")));
        }
        let par = self.par_for(c * h * w);
        let (out, argmax) = kernels::maxpool2x2_forward(c, h, w, self.node(input).value.data(), par);
        let needs = self.node(input).needs_grad;
        let t = Tensor::from_vec(&[c, h / 2, w / 2], out)?;
        Ok(self.push(t, needs, Op::MaxPool2x2 { input: input.slot, c, h, w, argmax }))
    }

    /// Elementwise `max(x, 0)`.
    pub fn relu(&mut self, input: Value) -> Value {
        let node = self.node(input);
        let out = node.value.data().iter().map(|&v| v.max(0.0)).collect();
        let t = Tensor::from_vec(node.value.shape(), out).expect("same length");
        let needs = node.needs_grad;
        self.push(t, needs, Op::Relu { input: input.slot })
    }

    /// Elementwise logistic sigmoid.
    pub fn sigmoid(&mut self, input: Value) -> Value {
        let node = self.node(input);
        let out = node.value.data().iter().map(|&v| stable_sigmoid(v)).collect();
        let t = Tensor::from_vec(node.value.shape(), out).expect("same length");
        let needs = node.needs_grad;
        self.push(t, needs, Op::Sigmoid { input: input.slot })
    }

    /// Softmax over the whole buffer, treated as one distribution. The
    /// maximum is subtracted before exponentiation, so large logits stay
    /// finite.
    pub fn softmax(&mut self, input: Value) -> Result<Value> {
        let node = self.node(input);
        if node.value.is_empty() {
            return Err(Error::Shape("softmax of an empty tensor".to_string()));
        }
        let data = node.value.data();
        let max = data.iter().cloned().fold(f64::MIN, f64::max);
        let exps: Vec<f64> = data.iter().map(|&v| (v - max).exp()).collect();
        let sum: f64 = exps.iter().sum();
        let out = exps.iter().map(|&e| e / sum).collect();
        let t = Tensor::from_vec(node.value.shape(), out)?;
        let needs = node.needs_grad;
        Ok(self.push(t, needs, Op::Softmax { input: input.slot }))
    }

    /// `y = W x + b` with `W` shaped `[rows, cols]` and `x` flat.
    pub fn dense(&mut self, weights: Value, bias: Value, input: Value) -> Result<Value> {
        let w_shape = self.node(weights).value.shape().to_vec();
        if w_shape.len() != 2 {
            return Err(Error::Shape(format!("dense weights must be [rows, cols], got {w_shape:?}")));
        }
        let (rows, cols) = (w_shape[0], w_shape[1]);
        if self.node(bias).value.shape() != [rows] {
            return Err(Error::Shape(format!(
                "dense bias must be [{rows}], got {:?}",
                self.node(bias).value.shape()
            )));
        }
        if self.node(input).value.len() != cols {
            return Err(Error::Shape(format!(
                "dense input must have {cols} elements, got {}",
                self.node(input).value.len()
            )));
        }
        let out = kernels::dense_forward(
            rows,
            cols,
            self.node(weights).value.data(),
            self.node(bias).value.data(),
            self.node(input).value.data(),
            self.parallel,
        );
        let needs = self.node(weights).needs_grad
            || self.node(bias).needs_grad
            || self.node(input).needs_grad;
        let t = Tensor::from_vec(&[rows], out)?;
        Ok(self.push(
            t,
            needs,
            Op::Dense { weights: weights.slot, bias: bias.slot, input: input.slot, rows, cols },
        ))
    }

    /// Inverted dropout: each element is kept with probability `1 - rate`
    /// and scaled by `1/(1 - rate)`, so the expectation is unchanged and
    /// inference needs no rescaling. `rate == 0` is the identity.
    pub fn dropout<R: Rng>(&mut self, input: Value, rate: f64, rng: &mut R) -> Result<Value> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Config(format!("dropout rate must be in [0, 1), got {rate}")));
        }
        if rate == 0.0 {
            return Ok(input);
        }
        let keep = 1.0 - rate;
        let node = self.node(input);
        let mask: Vec<f64> = (0..node.value.len())
            .map(|_| if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        let out = node.value.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let t = Tensor::from_vec(node.value.shape(), out)?;
        let needs = node.needs_grad;
        Ok(self.push(t, needs, Op::Dropout { input: input.slot, mask }))
    }

    /// Negative log probability of class `target`:
    /// `-ln(max(p[target], 1e-12))`.
    pub fn cross_entropy(&mut self, probs: Value, target: usize) -> Result<Value> {
        let node = self.node(probs);
        if target >= node.value.len() {
            return Err(Error::Shape(format!(
                "target {target} out of range for {} classes",
                node.value.len()
            )));
        }
        let p = node.value.data()[target].max(PROB_FLOOR);
        let needs = node.needs_grad;
        Ok(self.push(
            Tensor::scalar(-p.ln()),
            needs,
            Op::CrossEntropy { probs: probs.slot, target },
        ))
    }

    /// Elementwise sum of two same-shape tensors.
    pub fn add(&mut self, a: Value, b: Value) -> Result<Value> {
        self.binary(a, b, "add", |x, y| x + y, |slots| Op::Add { a: slots.0, b: slots.1 })
    }

    /// Elementwise difference `a - b`.
    pub fn sub(&mut self, a: Value, b: Value) -> Result<Value> {
        self.binary(a, b, "sub", |x, y| x - y, |slots| Op::Sub { a: slots.0, b: slots.1 })
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Value, b: Value) -> Result<Value> {
        self.binary(a, b, "mul", |x, y| x * y, |slots| Op::Mul { a: slots.0, b: slots.1 })
    }

    fn binary(
        &mut self,
        a: Value,
        b: Value,
        what: &str,
        f: impl Fn(f64, f64) -> f64,
        op: impl FnOnce((u32, u32)) -> Op,
    ) -> Result<Value> {
        let (na, nb) = (self.node(a), self.node(b));
        if na.value.shape() != nb.value.shape() {
            return Err(Error::Shape(format!(
                "{what} of {:?} with {:?}",
                na.value.shape(),
                nb.value.shape()
            )));
        }
        let out = na
            .value
            .data()
            .iter()
            .zip(nb.value.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let t = Tensor::from_vec(na.value.shape(), out)?;
        let needs = na.needs_grad || nb.needs_grad;
        Ok(self.push(t, needs, op((a.slot, b.slot))))
    }

    /// Elementwise negation.
    pub fn neg(&mut self, input: Value) -> Value {
        let node = self.node(input);
        let out = node.value.data().iter().map(|&v| -v).collect();
        let t = Tensor::from_vec(node.value.shape(), out).expect("same length");
        let needs = node.needs_grad;
        self.push(t, needs, Op::Neg { input: input.slot })
    }

    /// Multiplication by a constant.
    pub fn scale(&mut self, input: Value, factor: f64) -> Value {
        let node = self.node(input);
        let out = node.value.data().iter().map(|&v| v * factor).collect();
        let t = Tensor::from_vec(node.value.shape(), out).expect("same length");
        let needs = node.needs_grad;
        self.push(t, needs, Op::Scale { input: input.slot, factor })
    }

    /// Addition of a constant to every element.
    pub fn add_scalar(&mut self, input: Value, offset: f64) -> Value {
        let node = self.node(input);
        let out = node.value.data().iter().map(|&v| v + offset).collect();
        let t = Tensor::from_vec(node.value.shape(), out).expect("same length");
        let needs = node.needs_grad;
        self.push(t, needs, Op::AddScalar { input: input.slot })
    }

    /// Elementwise clamp to `[lo, hi]`; gradient passes only strictly
    /// inside the interval.
    pub fn clamp(&mut self, input: Value, lo: f64, hi: f64) -> Result<Value> {
        if !(lo < hi) {
            return Err(Error::Config(format!("clamp needs lo < hi, got [{lo}, {hi}]")));
        }
        let node = self.node(input);
        let out = node.value.data().iter().map(|&v| v.clamp(lo, hi)).collect();
        let t = Tensor::from_vec(node.value.shape(), out)?;
        let needs = node.needs_grad;
        Ok(self.push(t, needs, Op::Clamp { input: input.slot, lo, hi }))
    }

    /// Elementwise natural log; every element must be strictly positive.
    pub fn log(&mut self, input: Value) -> Result<Value> {
        let node = self.node(input);
        if node.value.data().iter().any(|&v| v <= 0.0) {
            return Err(Error::Domain("log of a non-positive value".to_string()));
        }
        let out = node.value.data().iter().map(|&v| v.ln()).collect();
        let t = Tensor::from_vec(node.value.shape(), out)?;
        let needs = node.needs_grad;
        Ok(self.push(t, needs, Op::Log { input: input.slot }))
    }

    /// Mean of all elements, as a scalar.
    pub fn mean(&mut self, input: Value) -> Result<Value> {
        let node = self.node(input);
        if node.value.is_empty() {
            return Err(Error::Shape("mean of an empty tensor".to_string()));
        }
        let n = node.value.len() as f64;
        let m = node.value.data().iter().sum::<f64>() / n;
        let needs = node.needs_grad;
        Ok(self.push(Tensor::scalar(m), needs, Op::Mean { input: input.slot }))
    }

    /// Elementwise sum of any number of same-shape tensors.
    pub fn add_n(&mut self, inputs: &[Value]) -> Result<Value> {
        let first = *inputs
            .first()
            .ok_or_else(|| Error::Shape("add_n of zero tensors".to_string()))?;
        let shape = self.node(first).value.shape().to_vec();
        let mut out = vec![0.0; self.node(first).value.len()];
        let mut needs = false;
        for &v in inputs {
            let node = self.node(v);
            if node.value.shape() != shape {
                return Err(Error::Shape(format!(
                    "add_n of {:?} with {:?}",
                    shape,
                    node.value.shape()
                )));
            }
            for (dst, src) in out.iter_mut().zip(node.value.data()) {
                *dst += src;
            }
            needs |= node.needs_grad;
        }
        let t = Tensor::from_vec(&shape, out)?;
        let slots = inputs.iter().map(|v| v.slot).collect();
        Ok(self.push(t, needs, Op::AddN { inputs: slots }))
    }

    /// Same buffer under a new shape with equal element count.
    pub fn reshape(&mut self, input: Value, shape: &[usize]) -> Result<Value> {
        let node = self.node(input);
        let t = node.value.reshaped(shape)?;
        let needs = node.needs_grad;
        Ok(self.push(t, needs, Op::Reshape { input: input.slot }))
    }

    /// Flattens to rank 1.
    pub fn flatten(&mut self, input: Value) -> Value {
        let len = self.node(input).value.len();
        self.reshape(input, &[len]).expect("element count unchanged")
    }

    /// Concatenates the raw buffers of all inputs into one flat vector.
    pub fn concat_flat(&mut self, inputs: &[Value]) -> Result<Value> {
        if inputs.is_empty() {
            return Err(Error::Shape("concat of zero tensors".to_string()));
        }
        let mut out = Vec::new();
        let mut needs = false;
        for &v in inputs {
            let node = self.node(v);
            out.extend_from_slice(node.value.data());
            needs |= node.needs_grad;
        }
        let t = Tensor::from_vec(&[out.len()], out)?;
        let slots = inputs.iter().map(|v| v.slot).collect();
        Ok(self.push(t, needs, Op::ConcatFlat { inputs: slots }))
    }

    /// Stacks `[c_i, h, w]` maps along the channel axis; heights and
    /// widths must agree.
    pub fn concat_channels(&mut self, inputs: &[Value]) -> Result<Value> {
        let first = *inputs
            .first()
            .ok_or_else(|| Error::Shape("concat of zero tensors".to_string()))?;
        let first_shape = self.node(first).value.shape().to_vec();
        if first_shape.len() != 3 {
            return Err(Error::Shape(format!(
                "channel concat needs [c,h,w] inputs, got {first_shape:?}"
            )));
        }
        let (h, w) = (first_shape[1], first_shape[2]);
        let mut out = Vec::new();
        let mut c_total = 0;
        let mut needs = false;
        for &v in inputs {
            let node = self.node(v);
            let s = node.value.shape();
            if s.len() != 3 || s[1] != h || s[2] != w {
                return Err(Error::Shape(format!(
                    "channel concat of {s:?} with {h}x{w} maps"
                )));
            }
            c_total += s[0];
            out.extend_from_slice(node.value.data());
            needs |= node.needs_grad;
        }
        let t = Tensor::from_vec(&[c_total, h, w], out)?;
        let slots = inputs.iter().map(|v| v.slot).collect();
        Ok(self.push(t, needs, Op::ConcatChannels { inputs: slots }))
    }

    /// Per-channel mean of a `[c, h, w]` map, producing `[c]`.
    pub fn global_avg_pool(&mut self, input: Value) -> Result<Value> {
        let shape = self.node(input).value.shape().to_vec();
        if shape.len() != 3 {
            return Err(Error::Shape(format!("global pool input must be [c,h,w], got {shape:?}")));
        }
        let (c, plane) = (shape[0], shape[1] * shape[2]);
        let data = self.node(input).value.data();
        let out = (0..c)
            .map(|ch| data[ch * plane..(ch + 1) * plane].iter().sum::<f64>() / plane as f64)
            .collect();
        let t = Tensor::from_vec(&[c], out)?;
        let needs = self.node(input).needs_grad;
        Ok(self.push(t, needs, Op::GlobalAvgPool { input: input.slot, c, plane }))
    }

    /// Reverse pass from a scalar `loss`. Zeroes every gradient in `set`,
    /// then accumulates the gradients of all parameters registered on this
    /// tape. Fails when the loss is not scalar or does not depend on any
    /// parameter.
    pub fn backward(&mut self, loss: Value, set: &mut ParamSet) -> Result<()> {
        assert_eq!(loss.tape, self.id, "loss belongs to a different tape");
        if self.node(loss).value.len() != 1 {
            return Err(Error::Shape(format!(
                "backward needs a scalar loss, got {:?}",
                self.node(loss).value.shape()
            )));
        }
        if !self.node(loss).needs_grad {
            return Err(Error::Config(
                "loss does not depend on any registered parameter".to_string(),
            ));
        }
        set.zero_grads();
        let mut adjoints: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        adjoints[loss.slot as usize] = Some(vec![1.0]);

        for idx in (0..=loss.slot as usize).rev() {
            let adj = match adjoints[idx].take() {
                Some(a) => a,
                None => continue,
            };
            if !self.nodes[idx].needs_grad {
                continue;
            }
            match &self.nodes[idx].op {
                Op::Leaf => {}
                Op::Param { index } => {
                    let grad = set.by_index_mut(*index).grad.data_mut();
                    for (g, a) in grad.iter_mut().zip(&adj) {
                        *g += a;
                    }
                }
                Op::Conv2d { input, kernels, bias, shape } => {
                    let (input, kernels, bias, shape) = (*input, *kernels, *bias, *shape);
                    let work = adj.len() * shape.c_in * shape.k * shape.k;
                    let par = self.par_for(work);
                    if self.nodes[input as usize].needs_grad {
                        let d = kernels::conv2d_backward_input(
                            &shape,
                            self.nodes[kernels as usize].value.data(),
                            &adj,
                            par,
                        );
                        accumulate(&mut adjoints, input, d);
                    }
                    if self.nodes[kernels as usize].needs_grad {
                        let d = kernels::conv2d_backward_kernels(
                            &shape,
                            self.nodes[input as usize].value.data(),
                            &adj,
                            par,
                        );
                        accumulate(&mut adjoints, kernels, d);
                    }
                    if self.nodes[bias as usize].needs_grad {
                        let d = kernels::conv2d_backward_bias(shape.c_out, &adj);
                        accumulate(&mut adjoints, bias, d);
                    }
                }
                Op::ConvTranspose2d { input, kernels, bias, shape } => {
                    let (input, kernels, bias, shape) = (*input, *kernels, *bias, *shape);
                    let work = shape.in_len() * shape.c_out * shape.k * shape.k;
                    let par = self.par_for(work);
                    if self.nodes[input as usize].needs_grad {
                        let d = kernels::conv_transpose2d_backward_input(
                            &shape,
                            self.nodes[kernels as usize].value.data(),
                            &adj,
                            par,
                        );
                        accumulate(&mut adjoints, input, d);
                    }
                    if self.nodes[kernels as usize].needs_grad {
                        let d = kernels::conv_transpose2d_backward_kernels(
                            &shape,
                            self.nodes[input as usize].value.data(),
                            &adj,
                            par,
                        );
                        accumulate(&mut adjoints, kernels, d);
                    }
                    if self.nodes[bias as usize].needs_grad {
                        let d = kernels::conv_transpose2d_backward_bias(shape.c_out, &adj);
                        accumulate(&mut adjoints, bias, d);
                    }
                }
                Op::MaxPool2x2 { input, c, h, w, argmax } => {
                    let par = self.par_for(c * h * w);
                    let d = kernels::maxpool2x2_backward(*c, *h, *w, &adj, argmax, par);
                    accumulate(&mut adjoints, *input, d);
                }
                Op::Relu { input } => {
                    let x = self.nodes[*input as usize].value.data();
                    let d = adj
                        .iter()
                        .zip(x)
                        .map(|(&a, &v)| if v > 0.0 { a } else { 0.0 })
                        .collect();
                    accumulate(&mut adjoints, *input, d);
                }
                Op::Sigmoid { input } => {
                    let s = self.nodes[idx].value.data();
                    let d = adj.iter().zip(s).map(|(&a, &y)| a * y * (1.0 - y)).collect();
                    accumulate(&mut adjoints, *input, d);
                }
                Op::Softmax { input } => {
                    let p = self.nodes[idx].value.data();
                    let inner: f64 = p.iter().zip(&adj).map(|(&pi, &ai)| pi * ai).sum();
                    let d = p.iter().zip(&adj).map(|(&pi, &ai)| pi * (ai - inner)).collect();
                    accumulate(&mut adjoints, *input, d);
                }
                Op::Dense { weights, bias, input, rows, cols } => {
                    let (weights, bias, input, rows, cols) = (*weights, *bias, *input, *rows, *cols);
                    let par = self.parallel;
                    let (d_x, d_w, d_b) = kernels::dense_backward(
                        rows,
                        cols,
                        self.nodes[weights as usize].value.data(),
                        self.nodes[input as usize].value.data(),
                        &adj,
                        par,
                    );
                    if self.nodes[input as usize].needs_grad {
                        accumulate(&mut adjoints, input, d_x);
                    }
                    if self.nodes[weights as usize].needs_grad {
                        accumulate(&mut adjoints, weights, d_w);
                    }
                    if self.nodes[bias as usize].needs_grad {
                        accumulate(&mut adjoints, bias, d_b);
                    }
                }
                Op::Dropout { input, mask } => {
                    let d = adj.iter().zip(mask).map(|(&a, &m)| a * m).collect();
                    accumulate(&mut adjoints, *input, d);
                }
                Op::CrossEntropy { probs, target } => {
                    let p = self.nodes[*probs as usize].value.data();
                    let mut d = vec![0.0; p.len()];
                    d[*target] = -adj[0] / p[*target].max(PROB_FLOOR);
                    accumulate(&mut adjoints, *probs, d);
                }
                Op::Add { a, b } => {
                    let (a, b) = (*a, *b);
                    if self.nodes[a as usize].needs_grad {
                        accumulate(&mut adjoints, a, adj.clone());
                    }
                    if self.nodes[b as usize].needs_grad {
                        accumulate(&mut adjoints, b, adj);
                    }
                }
                Op::Sub { a, b } => {
                    let (a, b) = (*a, *b);
                    if self.nodes[a as usize].needs_grad {
                        accumulate(&mut adjoints, a, adj.clone());
                    }
                    if self.nodes[b as usize].needs_grad {
                        accumulate(&mut adjoints, b, adj.iter().map(|&v| -v).collect());
                    }
                }
                Op::Mul { a, b } => {
                    let (a, b) = (*a, *b);
                    if self.nodes[a as usize].needs_grad {
                        let xb = self.nodes[b as usize].value.data();
                        accumulate(
                            &mut adjoints,
                            a,
                            adj.iter().zip(xb).map(|(&g, &v)| g * v).collect(),
                        );
                    }
                    if self.nodes[b as usize].needs_grad {
                        let xa = self.nodes[a as usize].value.data();
                        accumulate(
                            &mut adjoints,
                            b,
                            adj.iter().zip(xa).map(|(&g, &v)| g * v).collect(),
                        );
                    }
                }
                Op::Neg { input } => {
                    accumulate(&mut adjoints, *input, adj.iter().map(|&v| -v).collect());
                }
                Op::Scale { input, factor } => {
                    let f = *factor;
                    accumulate(&mut adjoints, *input, adj.iter().map(|&v| v * f).collect());
                }
                Op::AddScalar { input } => {
                    accumulate(&mut adjoints, *input, adj);
                }
                Op::Clamp { input, lo, hi } => {
                    let (lo, hi) = (*lo, *hi);
                    let x = self.nodes[*input as usize].value.data();
                    let d = adj
                        .iter()
                        .zip(x)
                        .map(|(&a, &v)| if v > lo && v < hi { a } else { 0.0 })
                        .collect();
                    accumulate(&mut adjoints, *input, d);
                }
                Op::Log { input } => {
                    let x = self.nodes[*input as usize].value.data();
                    let d = adj.iter().zip(x).map(|(&a, &v)| a / v).collect();
                    accumulate(&mut adjoints, *input, d);
                }
                Op::Mean { input } => {
                    let n = self.nodes[*input as usize].value.len();
                    let g = adj[0] / n as f64;
                    accumulate(&mut adjoints, *input, vec![g; n]);
                }
                Op::AddN { inputs } => {
                    for &src in inputs.clone().iter() {
                        if self.nodes[src as usize].needs_grad {
                            accumulate(&mut adjoints, src, adj.clone());
                        }
                    }
                }
                Op::Reshape { input } => {
                    accumulate(&mut adjoints, *input, adj);
                }
                Op::ConcatFlat { inputs } | Op::ConcatChannels { inputs } => {
                    let inputs = inputs.clone();
                    let mut offset = 0;
                    for src in inputs {
                        let len = self.nodes[src as usize].value.len();
                        if self.nodes[src as usize].needs_grad {
                            accumulate(&mut adjoints, src, adj[offset..offset + len].to_vec());
                        }
                        offset += len;
                    }
                }
                Op::GlobalAvgPool { input, c, plane } => {
                    let (c, plane) = (*c, *plane);
                    let mut d = vec![0.0; c * plane];
                    for ch in 0..c {
                        let g = adj[ch] / plane as f64;
                        d[ch * plane..(ch + 1) * plane].fill(g);
                    }
                    accumulate(&mut adjoints, *input, d);
                }
            }
        }
        Ok(())
    }
}

fn accumulate(adjoints: &mut [Option<Vec<f64>>], slot: u32, contribution: Vec<f64>) {
    match &mut adjoints[slot as usize] {
        Some(existing) => {
            for (dst, src) in existing.iter_mut().zip(&contribution) {
                *dst += src;
            }
        }
        empty => *empty = Some(contribution),
    }
}

fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
