use std::sync::Arc;

use super::kernels::{self, Mat};
use super::{AutodiffError, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Boundary handling for convolutions.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    Valid,
    /// `width - 1` zeros in total, the smaller half on the left.
    Same,
}

impl Padding {
    pub fn amounts(self, width: usize) -> (usize, usize) {
        match self {
            Padding::Valid => (0, 0),
            Padding::Same => {
                let total = width.saturating_sub(1);
                let left = total / 2;
                (left, total - left)
            }
        }
    }
}

/// Where [`Graph::unpool`] puts each pooled value inside its window.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum UnpoolPlacement {
    /// First sample of the window; all other samples are zero.
    #[default]
    WindowStart,
    /// The argmax position recorded by [`Graph::maxpool1d`].
    RecordedIndices,
}

/// A fixed linear map usable as a graph node. The adjoint must be the exact
/// transpose of `apply` for gradients to be correct.
pub trait LinearOp: Send + Sync {
    fn name(&self) -> &'static str;
    fn apply(&self, input: &Tensor) -> Tensor;
    fn adjoint(&self, grad: &Tensor) -> Tensor;
}

enum Op {
    Leaf,
    Conv1d {
        x: Var,
        f: Var,
        stride: usize,
        pad: (usize, usize),
    },
    ConvTranspose1d {
        x: Var,
        f: Var,
        stride: usize,
        pad_left: usize,
        plen: usize,
    },
    Depthwise {
        x: Var,
        f: Var,
        stride: usize,
        pad: (usize, usize),
    },
    Dense {
        x: Var,
        w: Var,
        b: Var,
    },
    Softplus(Var),
    Abs(Var),
    Mul(Var, Var),
    Div {
        a: Var,
        b: Var,
        eps: f64,
    },
    Add(Var, Var),
    Sub(Var, Var),
    ChannelBias {
        x: Var,
        b: Var,
    },
    Scale(Var, f64),
    AddScalar(Var),
    Sum(Var),
    Mean(Var),
    Dot(Var, Var),
    MaxPool {
        x: Var,
        /// Flat source offsets of each pooled value.
        sources: Vec<usize>,
    },
    Unpool {
        x: Var,
        /// Flat destination offset per pooled value, if it landed in range.
        targets: Vec<Option<usize>>,
    },
    Transpose(Var),
    Reshape(Var),
    Linear {
        x: Var,
        map: Arc<dyn LinearOp>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Output of [`Graph::maxpool1d`].
pub struct Pooled {
    pub values: Var,
    /// Absolute time index of the maximum for each (channel, window), row-major.
    pub indices: Vec<usize>,
}

/// A reverse-mode differentiation tape over dense tensors.
///
/// Nodes are appended in creation order, which is a topological order, so
/// [`Graph::backward`] walks the tape once from the root down.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of a scalar with respect to the leaves of a graph.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of `v`, or zeros of `like`'s shape when `v` did not influence the root.
    pub fn get_or_zeros(&self, v: Var, like: &Tensor) -> Tensor {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(like.shape()))
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn shape_err(op: &'static str, detail: String) -> AutodiffError {
    AutodiffError::Shape { op, detail }
}

fn softplus(v: f64) -> f64 {
    if v > 30.0 {
        v + (-v).exp().ln_1p()
    } else {
        v.exp().ln_1p()
    }
}

fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

fn clamp_denominator(b: f64, eps: f64) -> (f64, bool) {
    if b.abs() < eps {
        (if b < 0.0 { -eps } else { eps }, true)
    } else {
        (b, false)
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Trainable leaf.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    fn rank2(&self, v: Var, op: &'static str) -> Result<(usize, usize), AutodiffError> {
        match self.value(v).shape() {
            [a, b] => Ok((*a, *b)),
            s => Err(shape_err(op, format!("expected rank-2 input, got {s:?}"))),
        }
    }

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<(), AutodiffError> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(shape_err(op, format!("{sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    /// Multi-channel cross-correlation: signal `[C_in, T]`, filters
    /// `[C_out, C_in, W]`, output `[C_out, T']`.
    pub fn conv1d(
        &mut self,
        signal: Var,
        filters: Var,
        stride: usize,
        padding: Padding,
    ) -> Result<Var, AutodiffError> {
        let (c_in, len) = self.rank2(signal, "conv1d")?;
        let (c_out, fc, width) = match self.value(filters).shape() {
            [a, b, c] => (*a, *b, *c),
            s => {
                return Err(shape_err(
                    "conv1d",
                    format!("filters must be rank 3, got {s:?}"),
                ))
            }
        };
        if fc != c_in {
            return Err(shape_err(
                "conv1d",
                format!("filters expect {fc} input channels, signal has {c_in}"),
            ));
        }
        if stride == 0 || width == 0 {
            return Err(AutodiffError::InvalidArgument(
                "conv1d stride and width must be positive".into(),
            ));
        }
        let pad = padding.amounts(width);
        let plen = len + pad.0 + pad.1;
        if plen < width {
            return Err(shape_err(
                "conv1d",
                format!("filter width {width} exceeds padded length {plen}"),
            ));
        }
        let n_out = (plen - width) / stride + 1;
        let xp = kernels::pad_rows(self.value(signal).data(), c_in, len, pad.0, pad.1);
        let y = kernels::correlate_channels(
            &xp,
            c_in,
            plen,
            self.value(filters).data(),
            c_out,
            width,
            stride,
            n_out,
        );
        let rg = self.rg(&[signal, filters]);
        Ok(self.push(
            Tensor::new(vec![c_out, n_out], y)?,
            Op::Conv1d {
                x: signal,
                f: filters,
                stride,
                pad,
            },
            rg,
        ))
    }

    /// Transposed correlation (filterbank summation): each input value
    /// `x[o][n]` adds filter `[o][c]` scaled by it at position
    /// `n*stride - pad_left` of output channel `c`. Input `[C_out, N]`,
    /// filters `[C_out, C_in, W]`, output `[C_in, out_len]`. This is the
    /// exact adjoint of [`Graph::conv1d`] with the same geometry.
    pub fn conv_transpose1d(
        &mut self,
        input: Var,
        filters: Var,
        stride: usize,
        pad_left: usize,
        out_len: usize,
    ) -> Result<Var, AutodiffError> {
        let (c_out, n) = self.rank2(input, "conv_transpose1d")?;
        let (fo, c_in, width) = match self.value(filters).shape() {
            [a, b, c] => (*a, *b, *c),
            s => {
                return Err(shape_err(
                    "conv_transpose1d",
                    format!("filters must be rank 3, got {s:?}"),
                ))
            }
        };
        if fo != c_out {
            return Err(shape_err(
                "conv_transpose1d",
                format!("filters have {fo} output channels, input has {c_out}"),
            ));
        }
        if stride == 0 {
            return Err(AutodiffError::InvalidArgument(
                "conv_transpose1d stride must be positive".into(),
            ));
        }
        let span = if n == 0 { 0 } else { (n - 1) * stride + width };
        let plen = span.max(pad_left + out_len);
        let yp = kernels::scatter_channels(
            self.value(input).data(),
            c_out,
            n,
            self.value(filters).data(),
            c_in,
            width,
            stride,
            plen,
        );
        let y = kernels::unpad_rows(&yp, c_in, plen, pad_left, out_len);
        let rg = self.rg(&[input, filters]);
        Ok(self.push(
            Tensor::new(vec![c_in, out_len], y)?,
            Op::ConvTranspose1d {
                x: input,
                f: filters,
                stride,
                pad_left,
                plen,
            },
            rg,
        ))
    }

    /// Per-channel correlation: signal `[C, T]`, filters `[C, W]`.
    pub fn depthwise_conv1d(
        &mut self,
        signal: Var,
        filters: Var,
        stride: usize,
        padding: Padding,
    ) -> Result<Var, AutodiffError> {
        let (c, len) = self.rank2(signal, "depthwise_conv1d")?;
        let (fc, width) = self.rank2(filters, "depthwise_conv1d")?;
        if fc != c {
            return Err(shape_err(
                "depthwise_conv1d",
                format!("{fc} filters for {c} channels"),
            ));
        }
        if stride == 0 || width == 0 {
            return Err(AutodiffError::InvalidArgument(
                "depthwise_conv1d stride and width must be positive".into(),
            ));
        }
        let pad = padding.amounts(width);
        let plen = len + pad.0 + pad.1;
        if plen < width {
            return Err(shape_err(
                "depthwise_conv1d",
                format!("filter width {width} exceeds padded length {plen}"),
            ));
        }
        let n_out = (plen - width) / stride + 1;
        let xp = kernels::pad_rows(self.value(signal).data(), c, len, pad.0, pad.1);
        let f = self.value(filters).data();
        let mut y = vec![0.0; c * n_out];
        for ch in 0..c {
            kernels::correlate_accumulate(
                &xp[ch * plen..(ch + 1) * plen],
                &f[ch * width..(ch + 1) * width],
                stride,
                &mut y[ch * n_out..(ch + 1) * n_out],
            );
        }
        let rg = self.rg(&[signal, filters]);
        Ok(self.push(
            Tensor::new(vec![c, n_out], y)?,
            Op::Depthwise {
                x: signal,
                f: filters,
                stride,
                pad,
            },
            rg,
        ))
    }

    /// `input [B, D_in] · weight [D_in, D_out] + bias [D_out]`.
    pub fn dense(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var, AutodiffError> {
        let (b, d_in) = self.rank2(input, "dense")?;
        let (wi, d_out) = self.rank2(weight, "dense")?;
        if wi != d_in {
            return Err(shape_err(
                "dense",
                format!("input width {d_in}, weight rows {wi}"),
            ));
        }
        if self.value(bias).shape() != [d_out] {
            return Err(shape_err(
                "dense",
                format!(
                    "bias {:?} for output width {d_out}",
                    self.value(bias).shape()
                ),
            ));
        }
        let x = self.value(input).data();
        let w = self.value(weight).data();
        let bv = self.value(bias).data();
        let mut y: Vec<f64> = (0..b).flat_map(|_| bv.iter().copied()).collect();
        kernels::matmul_accumulate(
            Mat {
                data: x,
                rows: b,
                cols: d_in,
                transposed: false,
            },
            Mat {
                data: w,
                rows: d_in,
                cols: d_out,
                transposed: false,
            },
            &mut y,
        );
        let rg = self.rg(&[input, weight, bias]);
        Ok(self.push(
            Tensor::new(vec![b, d_out], y)?,
            Op::Dense {
                x: input,
                w: weight,
                b: bias,
            },
            rg,
        ))
    }

    /// `ln(1 + e^v)` elementwise.
    pub fn softplus(&mut self, x: Var) -> Var {
        let y = self.value(x).map(softplus);
        let rg = self.rg(&[x]);
        self.push(y, Op::Softplus(x), rg)
    }

    /// Elementwise modulus; subgradient 0 at exactly 0.
    pub fn abs(&mut self, x: Var) -> Var {
        let y = self.value(x).map(f64::abs);
        let rg = self.rg(&[x]);
        self.push(y, Op::Abs(x), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.same_shape(a, b, "mul")?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let y = Tensor::new(self.value(a).shape().to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(y, Op::Mul(a, b), rg))
    }

    /// `a / b` elementwise with `|b|` clamped below at `eps`; the clamp is
    /// treated as locally constant when differentiating.
    pub fn div(&mut self, a: Var, b: Var, eps: f64) -> Result<Var, AutodiffError> {
        self.same_shape(a, b, "div")?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x / clamp_denominator(*y, eps).0)
            .collect();
        let y = Tensor::new(self.value(a).shape().to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(y, Op::Div { a, b, eps }, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.same_shape(a, b, "add")?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let y = Tensor::new(self.value(a).shape().to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(y, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.same_shape(a, b, "sub")?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x - y)
            .collect();
        let y = Tensor::new(self.value(a).shape().to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(y, Op::Sub(a, b), rg))
    }

    /// Adds `bias[c]` to every sample of row `c` of a `[C, T]` tensor.
    pub fn channel_bias(&mut self, x: Var, bias: Var) -> Result<Var, AutodiffError> {
        let (c, len) = self.rank2(x, "channel_bias")?;
        if self.value(bias).shape() != [c] {
            return Err(shape_err(
                "channel_bias",
                format!("bias {:?} for {c} channels", self.value(bias).shape()),
            ));
        }
        let mut y = self.value(x).clone();
        let bv = self.value(bias).data().to_vec();
        for (row, b) in y.data_mut().chunks_mut(len.max(1)).zip(bv) {
            for v in row {
                *v += b;
            }
        }
        let rg = self.rg(&[x, bias]);
        Ok(self.push(y, Op::ChannelBias { x, b: bias }, rg))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let y = self.value(x).map(|v| v * factor);
        let rg = self.rg(&[x]);
        self.push(y, Op::Scale(x, factor), rg)
    }

    pub fn add_scalar(&mut self, x: Var, offset: f64) -> Var {
        let y = self.value(x).map(|v| v + offset);
        let rg = self.rg(&[x]);
        self.push(y, Op::AddScalar(x), rg)
    }

    /// Sum of all elements; 0 for an empty tensor.
    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    /// Mean of all elements; 0 for an empty tensor.
    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let m = if t.is_empty() {
            0.0
        } else {
            t.data().iter().sum::<f64>() / t.len() as f64
        };
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(m), Op::Mean(x), rg)
    }

    /// Inner product over all elements of two same-shape tensors.
    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.same_shape(a, b, "dot")?;
        let s = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .sum();
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::scalar(s), Op::Dot(a, b), rg))
    }

    /// Non-overlapping max pooling along time of a `[C, T]` tensor into
    /// `[C, ceil(T/h)]`. The last window may be partial; ties go to the
    /// earliest sample.
    pub fn maxpool1d(&mut self, x: Var, pool: usize) -> Result<Pooled, AutodiffError> {
        if pool == 0 {
            return Err(AutodiffError::InvalidArgument(
                "pool size must be positive".into(),
            ));
        }
        let (c, len) = self.rank2(x, "maxpool1d")?;
        let windows = len.div_ceil(pool);
        let data = self.value(x).data();
        let mut values = Vec::with_capacity(c * windows);
        let mut indices = Vec::with_capacity(c * windows);
        let mut sources = Vec::with_capacity(c * windows);
        for ch in 0..c {
            let row = &data[ch * len..(ch + 1) * len];
            for j in 0..windows {
                let start = j * pool;
                let end = (start + pool).min(len);
                let mut best = start;
                for t in start + 1..end {
                    if row[t] > row[best] {
                        best = t;
                    }
                }
                values.push(row[best]);
                indices.push(best);
                sources.push(ch * len + best);
            }
        }
        let rg = self.rg(&[x]);
        let v = self.push(
            Tensor::new(vec![c, windows], values)?,
            Op::MaxPool { x, sources },
            rg,
        );
        Ok(Pooled { values: v, indices })
    }

    /// Zero-insertion upsampling of a `[C, N]` tensor to `[C, target_len]`:
    /// each pooled value lands at one position of its `pool`-sample window
    /// and every other sample is zero.
    pub fn unpool(
        &mut self,
        x: Var,
        pool: usize,
        target_len: usize,
        placement: UnpoolPlacement,
        indices: Option<&[usize]>,
    ) -> Result<Var, AutodiffError> {
        if pool == 0 {
            return Err(AutodiffError::InvalidArgument(
                "pool size must be positive".into(),
            ));
        }
        let (c, n) = self.rank2(x, "unpool")?;
        if n * pool + pool < target_len + 1 {
            return Err(shape_err(
                "unpool",
                format!("{n} windows of {pool} cannot cover {target_len} samples"),
            ));
        }
        let recorded = match placement {
            UnpoolPlacement::WindowStart => None,
            UnpoolPlacement::RecordedIndices => {
                let idx = indices.ok_or(AutodiffError::MissingIndices)?;
                if idx.len() != c * n {
                    return Err(shape_err(
                        "unpool",
                        format!("{} indices for {c}x{n} pooled values", idx.len()),
                    ));
                }
                Some(idx)
            }
        };
        let data = self.value(x).data();
        let mut out = vec![0.0; c * target_len];
        let mut targets = Vec::with_capacity(c * n);
        for ch in 0..c {
            for j in 0..n {
                let pos = match recorded {
                    Some(idx) => idx[ch * n + j],
                    None => j * pool,
                };
                if pos < target_len {
                    let flat = ch * target_len + pos;
                    out[flat] = data[ch * n + j];
                    targets.push(Some(flat));
                } else {
                    targets.push(None);
                }
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(
            Tensor::new(vec![c, target_len], out)?,
            Op::Unpool { x, targets },
            rg,
        ))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var, AutodiffError> {
        self.rank2(x, "transpose")?;
        let y = self.value(x).transposed();
        let rg = self.rg(&[x]);
        Ok(self.push(y, Op::Transpose(x), rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var, AutodiffError> {
        let y = self.value(x).clone().reshaped(shape)?;
        let rg = self.rg(&[x]);
        Ok(self.push(y, Op::Reshape(x), rg))
    }

    /// Applies a fixed linear map.
    pub fn linear(&mut self, x: Var, map: Arc<dyn LinearOp>) -> Var {
        let y = map.apply(self.value(x));
        let rg = self.rg(&[x]);
        self.push(y, Op::Linear { x, map }, rg)
    }

    /// Gradients of the scalar `root` with respect to every leaf created with
    /// [`Graph::param`].
    pub fn backward(&self, root: Var) -> Result<Gradients, AutodiffError> {
        let root_len = self.value(root).len();
        if root_len != 1 {
            return Err(AutodiffError::NonScalarRoot(
                self.value(root).shape().to_vec(),
            ));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[root.0].requires_grad {
            return Ok(Gradients { grads });
        }
        grads[root.0] = Some(Tensor::filled(self.value(root).shape(), 1.0));
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) || !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            for (parent, pg) in self.propagate(i, &g)? {
                if !self.nodes[parent.0].requires_grad {
                    continue;
                }
                match &mut grads[parent.0] {
                    Some(acc) => acc.add_assign(&pg),
                    slot => *slot = Some(pg),
                }
            }
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, i: usize, g: &Tensor) -> Result<Vec<(Var, Tensor)>, AutodiffError> {
        let node = &self.nodes[i];
        let out = &node.value;
        let gd = g.data();
        let like = |v: Var, data: Vec<f64>| Tensor::new(self.value(v).shape().to_vec(), data);
        let needs = |v: Var| self.nodes[v.0].requires_grad;
        let mut res = Vec::with_capacity(3);
        match &node.op {
            Op::Leaf => {}
            Op::Conv1d { x, f, stride, pad } => {
                let xs = self.value(*x);
                let fs = self.value(*f);
                let (c_in, len) = (xs.shape()[0], xs.shape()[1]);
                let (c_out, width) = (fs.shape()[0], fs.shape()[2]);
                let n_out = out.shape()[1];
                let plen = len + pad.0 + pad.1;
                if needs(*x) {
                    let gxp = kernels::scatter_channels(
                        gd,
                        c_out,
                        n_out,
                        fs.data(),
                        c_in,
                        width,
                        *stride,
                        plen,
                    );
                    let gx = kernels::unpad_rows(&gxp, c_in, plen, pad.0, len);
                    res.push((*x, like(*x, gx)?));
                }
                if needs(*f) {
                    let xp = kernels::pad_rows(xs.data(), c_in, len, pad.0, pad.1);
                    let gf = kernels::filter_grad_channels(
                        &xp, c_in, plen, gd, c_out, n_out, width, *stride,
                    );
                    res.push((*f, like(*f, gf)?));
                }
            }
            Op::ConvTranspose1d {
                x,
                f,
                stride,
                pad_left,
                plen,
            } => {
                let xs = self.value(*x);
                let fs = self.value(*f);
                let (c_out, n) = (xs.shape()[0], xs.shape()[1]);
                let (c_in, width) = (fs.shape()[1], fs.shape()[2]);
                let out_len = out.shape()[1];
                let gp = kernels::pad_rows(gd, c_in, out_len, *pad_left, plen - pad_left - out_len);
                if needs(*x) {
                    let gx = kernels::correlate_channels(
                        &gp,
                        c_in,
                        *plen,
                        fs.data(),
                        c_out,
                        width,
                        *stride,
                        n,
                    );
                    res.push((*x, like(*x, gx)?));
                }
                if needs(*f) {
                    // Filter gradient: gf[o][c][t] = sum_n x[o][n] * gp[c][n*stride + t].
                    let mut gf = vec![0.0; c_out * c_in * width];
                    for o in 0..c_out {
                        let xrow = &xs.data()[o * n..(o + 1) * n];
                        for c in 0..c_in {
                            kernels::filter_grad_accumulate(
                                &gp[c * plen..(c + 1) * plen],
                                xrow,
                                *stride,
                                &mut gf[(o * c_in + c) * width..(o * c_in + c + 1) * width],
                            );
                        }
                    }
                    res.push((*f, like(*f, gf)?));
                }
            }
            Op::Depthwise { x, f, stride, pad } => {
                let xs = self.value(*x);
                let fs = self.value(*f);
                let (c, len) = (xs.shape()[0], xs.shape()[1]);
                let width = fs.shape()[1];
                let n_out = out.shape()[1];
                let plen = len + pad.0 + pad.1;
                if needs(*x) {
                    let mut gxp = vec![0.0; c * plen];
                    for ch in 0..c {
                        kernels::scatter_accumulate(
                            &gd[ch * n_out..(ch + 1) * n_out],
                            &fs.data()[ch * width..(ch + 1) * width],
                            *stride,
                            &mut gxp[ch * plen..(ch + 1) * plen],
                        );
                    }
                    let gx = kernels::unpad_rows(&gxp, c, plen, pad.0, len);
                    res.push((*x, like(*x, gx)?));
                }
                if needs(*f) {
                    let xp = kernels::pad_rows(xs.data(), c, len, pad.0, pad.1);
                    let mut gf = vec![0.0; c * width];
                    for ch in 0..c {
                        kernels::filter_grad_accumulate(
                            &xp[ch * plen..(ch + 1) * plen],
                            &gd[ch * n_out..(ch + 1) * n_out],
                            *stride,
                            &mut gf[ch * width..(ch + 1) * width],
                        );
                    }
                    res.push((*f, like(*f, gf)?));
                }
            }
            Op::Dense { x, w, b } => {
                let xs = self.value(*x);
                let ws = self.value(*w);
                let (rows, d_in) = (xs.shape()[0], xs.shape()[1]);
                let d_out = ws.shape()[1];
                if needs(*x) {
                    let mut gx = vec![0.0; rows * d_in];
                    kernels::matmul_accumulate(
                        Mat {
                            data: gd,
                            rows,
                            cols: d_out,
                            transposed: false,
                        },
                        Mat {
                            data: ws.data(),
                            rows: d_in,
                            cols: d_out,
                            transposed: true,
                        },
                        &mut gx,
                    );
                    res.push((*x, like(*x, gx)?));
                }
                if needs(*w) {
                    let mut gw = vec![0.0; d_in * d_out];
                    kernels::matmul_accumulate(
                        Mat {
                            data: xs.data(),
                            rows,
                            cols: d_in,
                            transposed: true,
                        },
                        Mat {
                            data: gd,
                            rows,
                            cols: d_out,
                            transposed: false,
                        },
                        &mut gw,
                    );
                    res.push((*w, like(*w, gw)?));
                }
                if needs(*b) {
                    let mut gb = vec![0.0; d_out];
                    for r in 0..rows {
                        for (gv, go) in gb.iter_mut().zip(&gd[r * d_out..(r + 1) * d_out]) {
                            *gv += go;
                        }
                    }
                    res.push((*b, like(*b, gb)?));
                }
            }
            Op::Softplus(x) => {
                let gx = self
                    .value(*x)
                    .data()
                    .iter()
                    .zip(gd)
                    .map(|(v, g)| g * sigmoid(*v))
                    .collect();
                res.push((*x, like(*x, gx)?));
            }
            Op::Abs(x) => {
                let gx = self
                    .value(*x)
                    .data()
                    .iter()
                    .zip(gd)
                    .map(|(v, g)| {
                        if *v > 0.0 {
                            *g
                        } else if *v < 0.0 {
                            -g
                        } else {
                            0.0
                        }
                    })
                    .collect();
                res.push((*x, like(*x, gx)?));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if needs(*a) {
                    res.push((
                        *a,
                        like(*a, bv.iter().zip(gd).map(|(b, g)| b * g).collect())?,
                    ));
                }
                if needs(*b) {
                    res.push((
                        *b,
                        like(*b, av.iter().zip(gd).map(|(a, g)| a * g).collect())?,
                    ));
                }
            }
            Op::Div { a, b, eps } => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if needs(*a) {
                    let ga = bv
                        .iter()
                        .zip(gd)
                        .map(|(b, g)| g / clamp_denominator(*b, *eps).0)
                        .collect();
                    res.push((*a, like(*a, ga)?));
                }
                if needs(*b) {
                    let gb = av
                        .iter()
                        .zip(bv)
                        .zip(gd)
                        .map(|((a, b), g)| {
                            let (d, clamped) = clamp_denominator(*b, *eps);
                            if clamped {
                                0.0
                            } else {
                                -g * a / (d * d)
                            }
                        })
                        .collect();
                    res.push((*b, like(*b, gb)?));
                }
            }
            Op::Add(a, b) => {
                res.push((*a, g.clone()));
                res.push((*b, g.clone()));
            }
            Op::Sub(a, b) => {
                res.push((*a, g.clone()));
                res.push((*b, g.map(|v| -v)));
            }
            Op::ChannelBias { x, b } => {
                res.push((*x, g.clone()));
                if needs(*b) {
                    let c = out.shape()[0];
                    let len = out.shape()[1];
                    let gb = (0..c)
                        .map(|ch| gd[ch * len..(ch + 1) * len].iter().sum())
                        .collect();
                    res.push((*b, like(*b, gb)?));
                }
            }
            Op::Scale(x, factor) => res.push((*x, g.map(|v| v * factor))),
            Op::AddScalar(x) => res.push((*x, g.clone())),
            Op::Sum(x) => {
                res.push((*x, Tensor::filled(self.value(*x).shape(), gd[0])));
            }
            Op::Mean(x) => {
                let n = self.value(*x).len().max(1) as f64;
                res.push((*x, Tensor::filled(self.value(*x).shape(), gd[0] / n)));
            }
            Op::Dot(a, b) => {
                let s = gd[0];
                if needs(*a) {
                    res.push((*a, self.value(*b).map(|v| v * s)));
                }
                if needs(*b) {
                    res.push((*b, self.value(*a).map(|v| v * s)));
                }
            }
            Op::MaxPool { x, sources } => {
                let mut gx = Tensor::zeros(self.value(*x).shape());
                for (src, gv) in sources.iter().zip(gd) {
                    gx.data_mut()[*src] += gv;
                }
                res.push((*x, gx));
            }
            Op::Unpool { x, targets } => {
                let gx = targets
                    .iter()
                    .map(|t| t.map_or(0.0, |flat| gd[flat]))
                    .collect();
                res.push((*x, like(*x, gx)?));
            }
            Op::Transpose(x) => res.push((*x, g.transposed())),
            Op::Reshape(x) => res.push((*x, g.clone().reshaped(self.value(*x).shape())?)),
            Op::Linear { x, map } => {
                let gx = map.adjoint(g);
                if gx.shape() != self.value(*x).shape() {
                    return Err(shape_err(
                        map.name(),
                        format!("adjoint returned {:?}", gx.shape()),
                    ));
                }
                res.push((*x, gx));
            }
        }
        Ok(res)
    }
}
