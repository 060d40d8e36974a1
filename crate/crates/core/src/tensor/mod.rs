//! Dense double-precision tensors and a reverse-mode differentiation tape.
//!
//! A [`Tape`] records every operation applied to its nodes in execution order,
//! so the record is topologically sorted by construction. [`Tape::backward`]
//! walks it once in reverse and leaves the tape untouched, which makes repeated
//! backward passes over the same graph return identical gradients.

pub(crate) mod kernels;

use std::fmt;
use std::sync::Arc;

use crate::error::{Error, Result};
use kernels::ConvGeometry;

/// Row-major dense array. A scalar has an empty shape.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::dim(
                "tensor",
                format!("shape {shape:?} has a zero-sized dimension"),
            ));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::dim(
                "tensor",
                format!(
                    "shape {shape:?} needs {expected} values, got {}",
                    data.len()
                ),
            ));
        }
        Ok(Tensor { shape, data })
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn from_fn(shape: &[usize], f: impl FnMut(usize) -> f64) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: (0..n).map(f).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert!(self.is_scalar());
        self.data[0]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn reshape(self, shape: Vec<usize>) -> Result<Tensor> {
        Tensor::new(shape, self.data)
    }

    /// Rows `start..start + len` along the leading axis.
    pub fn rows(&self, start: usize, len: usize) -> Result<Tensor> {
        let lead = *self
            .shape
            .first()
            .ok_or_else(|| Error::dim("rows", "scalar has no rows"))?;
        if len == 0 || start + len > lead {
            return Err(Error::dim(
                "rows",
                format!("range {start}..{} outside 0..{lead}", start + len),
            ));
        }
        let stride = self.data.len() / lead;
        let mut shape = self.shape.clone();
        shape[0] = len;
        Ok(Tensor {
            shape,
            data: self.data[start * stride..(start + len) * stride].to_vec(),
        })
    }

    /// Gathers rows along the leading axis in the given order.
    pub fn gather_rows(&self, indices: &[usize]) -> Result<Tensor> {
        let lead = *self
            .shape
            .first()
            .ok_or_else(|| Error::dim("gather_rows", "scalar has no rows"))?;
        if indices.is_empty() {
            return Err(Error::dim("gather_rows", "no rows selected"));
        }
        let stride = self.data.len() / lead;
        let mut data = Vec::with_capacity(indices.len() * stride);
        for &i in indices {
            if i >= lead {
                return Err(Error::dim(
                    "gather_rows",
                    format!("row {i} outside 0..{lead}"),
                ));
            }
            data.extend_from_slice(&self.data[i * stride..(i + 1) * stride]);
        }
        let mut shape = self.shape.clone();
        shape[0] = indices.len();
        Ok(Tensor { shape, data })
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    /// Output keeps the input's spatial size; kernels must have odd sides.
    Same,
    Valid,
}

/// Every operation the tape can record, with its attributes.
#[derive(Clone, Debug)]
pub enum OpKind {
    /// Elementwise sum; the shorter shape must be a suffix of the longer one
    /// and is broadcast over the leading dimensions.
    Add,
    Sub,
    Mul,
    Scale(f64),
    AddScalar(f64),
    /// 2-D product; with `rhs_transposed` the right operand is stored n×k.
    MatMul {
        rhs_transposed: bool,
    },
    /// NCHW input, OIHW kernel, optional per-output-channel bias. Stride 1.
    Conv2d {
        padding: Padding,
    },
    Relu,
    Sigmoid,
    Square,
    Sqrt,
    Sum,
    SumAxis(usize),
    Mean,
    MaxPool2x2,
    /// Batch-mean of `-log softmax(logits)[label]`.
    SoftmaxCrossEntropy {
        labels: Arc<[usize]>,
    },
    /// Derivative of the batch cross-entropy w.r.t. a scalar multiplier on the
    /// logits, evaluated at 1: `mean_n sum_c z_c (softmax(z)_c - onehot_c)`.
    DummyScaleGradient {
        labels: Arc<[usize]>,
    },
    Reshape(Vec<usize>),
    Concat {
        axis: usize,
    },
    /// `len` rows starting at `start` along the leading axis.
    NarrowRows {
        start: usize,
        len: usize,
    },
    /// Forward `x > 0.5` as 0/1, backward passes the gradient unchanged.
    StraightThrough,
    /// Sums entries into `groups` buckets; `assignment[i]` is entry i's bucket.
    SegmentSum {
        assignment: Arc<[usize]>,
        groups: usize,
    },
}

impl OpKind {
    pub fn name(&self) -> &'static str {
        match self {
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::Scale(_) => "scale",
            OpKind::AddScalar(_) => "add_scalar",
            OpKind::MatMul { .. } => "matmul",
            OpKind::Conv2d { .. } => "conv2d",
            OpKind::Relu => "relu",
            OpKind::Sigmoid => "sigmoid",
            OpKind::Square => "square",
            OpKind::Sqrt => "sqrt",
            OpKind::Sum => "sum",
            OpKind::SumAxis(_) => "sum_axis",
            OpKind::Mean => "mean",
            OpKind::MaxPool2x2 => "max_pool2x2",
            OpKind::SoftmaxCrossEntropy { .. } => "softmax_cross_entropy",
            OpKind::DummyScaleGradient { .. } => "dummy_scale_gradient",
            OpKind::Reshape(_) => "reshape",
            OpKind::Concat { .. } => "concat",
            OpKind::NarrowRows { .. } => "narrow_rows",
            OpKind::StraightThrough => "straight_through",
            OpKind::SegmentSum { .. } => "segment_sum",
        }
    }

    /// Names of every op kind, in declaration order.
    pub const NAMES: &'static [&'static str] = &[
        "add",
        "sub",
        "mul",
        "scale",
        "add_scalar",
        "matmul",
        "conv2d",
        "relu",
        "sigmoid",
        "square",
        "sqrt",
        "sum",
        "sum_axis",
        "mean",
        "max_pool2x2",
        "softmax_cross_entropy",
        "dummy_scale_gradient",
        "reshape",
        "concat",
        "narrow_rows",
        "straight_through",
        "segment_sum",
    ];

    /// Validates an op-kind name coming from outside the crate.
    pub fn lookup(name: &str) -> Result<&'static str> {
        Self::NAMES
            .iter()
            .copied()
            .find(|n| *n == name)
            .ok_or_else(|| Error::Config(format!("unknown op kind `{name}`")))
    }

    fn arity(&self) -> std::ops::RangeInclusive<usize> {
        match self {
            OpKind::Add | OpKind::Sub | OpKind::Mul | OpKind::MatMul { .. } => 2..=2,
            OpKind::Conv2d { .. } => 2..=3,
            OpKind::Concat { .. } => 1..=usize::MAX,
            _ => 1..=1,
        }
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

enum Saved {
    Nothing,
    Indices(Vec<usize>),
    Values(Vec<f64>),
}

struct Record {
    kind: OpKind,
    inputs: Vec<Var>,
    saved: Saved,
}

struct Node {
    value: Tensor,
    requires_grad: bool,
    record: Option<Record>,
}

/// Operation record for one forward pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradient of a scalar loss w.r.t. every node that requires one, keyed by
/// node id.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    pub fn wrt(&self, var: Var) -> Result<&Tensor> {
        self.get(var)
            .ok_or_else(|| Error::Contract(format!("node {} has no gradient", var.0)))
    }

    pub fn iter(&self) -> impl Iterator<Item = (Var, &Tensor)> {
        self.grads
            .iter()
            .enumerate()
            .filter_map(|(i, g)| g.as_ref().map(|g| (Var(i), g)))
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            record: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf that receives a gradient.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    /// Runs `kind` on `inputs` and records it when any input requires a
    /// gradient.
    pub fn apply(&mut self, kind: OpKind, inputs: &[Var]) -> Result<Var> {
        if !kind.arity().contains(&inputs.len()) {
            return Err(Error::dim(
                kind.name(),
                format!("got {} inputs", inputs.len()),
            ));
        }
        if let Some(bad) = inputs.iter().find(|v| v.0 >= self.nodes.len()) {
            return Err(Error::Contract(format!(
                "node {} is not on this tape",
                bad.0
            )));
        }
        let values: Vec<&Tensor> = inputs.iter().map(|v| &self.nodes[v.0].value).collect();
        let (value, saved) = forward(&kind, &values)?;
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let record = requires_grad.then(|| Record {
            kind,
            inputs: inputs.to_vec(),
            saved,
        });
        self.nodes.push(Node {
            value,
            requires_grad,
            record,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let node = self
            .nodes
            .get(loss.0)
            .ok_or_else(|| Error::Contract(format!("node {} is not on this tape", loss.0)))?;
        if !node.value.is_scalar() {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                node.value.shape
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        if node.requires_grad {
            grads[loss.0] = Some(Tensor::full(&node.value.shape, 1.0));
        }
        for id in (0..=loss.0).rev() {
            let Some(record) = &self.nodes[id].record else {
                continue;
            };
            let Some(upstream) = grads[id].take() else {
                continue;
            };
            let inputs: Vec<&Tensor> = record
                .inputs
                .iter()
                .map(|v| &self.nodes[v.0].value)
                .collect();
            let needs: Vec<bool> = record
                .inputs
                .iter()
                .map(|v| self.nodes[v.0].requires_grad)
                .collect();
            let local = backward_rule(
                &record.kind,
                &inputs,
                &self.nodes[id].value,
                &record.saved,
                &upstream,
                &needs,
            );
            grads[id] = Some(upstream);
            for (input, g) in record.inputs.iter().zip(local) {
                let Some(g) = g else { continue };
                match &mut grads[input.0] {
                    Some(acc) => {
                        for (a, b) in acc.data.iter_mut().zip(&g.data) {
                            *a += b;
                        }
                    }
                    slot @ None => *slot = Some(g),
                }
            }
        }
        for (id, node) in self.nodes.iter().enumerate() {
            if node.requires_grad && node.record.is_none() && grads[id].is_none() {
                grads[id] = Some(Tensor::zeros(&node.value.shape));
            }
            if !node.requires_grad {
                grads[id] = None;
            }
        }
        Ok(Gradients { grads })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(OpKind::Add, &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(OpKind::Sub, &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(OpKind::Mul, &[a, b])
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        self.apply(OpKind::Scale(factor), &[a])
    }

    pub fn add_scalar(&mut self, a: Var, offset: f64) -> Result<Var> {
        self.apply(OpKind::AddScalar(offset), &[a])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(
            OpKind::MatMul {
                rhs_transposed: false,
            },
            &[a, b],
        )
    }

    /// `a · bᵀ`, the usual dense-layer product with an out×in weight.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(
            OpKind::MatMul {
                rhs_transposed: true,
            },
            &[a, b],
        )
    }

    pub fn conv2d(
        &mut self,
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        padding: Padding,
    ) -> Result<Var> {
        let kind = OpKind::Conv2d { padding };
        match bias {
            Some(b) => self.apply(kind, &[input, kernel, b]),
            None => self.apply(kind, &[input, kernel]),
        }
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.apply(OpKind::Relu, &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.apply(OpKind::Sigmoid, &[a])
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.apply(OpKind::Square, &[a])
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        self.apply(OpKind::Sqrt, &[a])
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.apply(OpKind::Sum, &[a])
    }

    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.apply(OpKind::SumAxis(axis), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        self.apply(OpKind::Mean, &[a])
    }

    pub fn max_pool2x2(&mut self, a: Var) -> Result<Var> {
        self.apply(OpKind::MaxPool2x2, &[a])
    }

    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        self.apply(
            OpKind::SoftmaxCrossEntropy {
                labels: labels.into(),
            },
            &[logits],
        )
    }

    pub fn dummy_scale_gradient(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        self.apply(
            OpKind::DummyScaleGradient {
                labels: labels.into(),
            },
            &[logits],
        )
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        self.apply(OpKind::Reshape(shape.to_vec()), &[a])
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        self.apply(OpKind::Concat { axis }, parts)
    }

    pub fn narrow_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        self.apply(OpKind::NarrowRows { start, len }, &[a])
    }

    pub fn straight_through(&mut self, a: Var) -> Result<Var> {
        self.apply(OpKind::StraightThrough, &[a])
    }

    pub fn segment_sum(&mut self, a: Var, assignment: Arc<[usize]>, groups: usize) -> Result<Var> {
        self.apply(OpKind::SegmentSum { assignment, groups }, &[a])
    }
}

fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    if a == b || a.ends_with(b) {
        Ok(a.to_vec())
    } else if b.ends_with(a) {
        Ok(b.to_vec())
    } else {
        Err(Error::dim(
            op,
            format!("shapes {a:?} and {b:?} do not broadcast over leading dims"),
        ))
    }
}

fn zip_broadcast(a: &Tensor, b: &Tensor, shape: Vec<usize>, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let n: usize = shape.iter().product();
    let (la, lb) = (a.data.len(), b.data.len());
    let data = if la == n && lb == n {
        a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect()
    } else {
        (0..n).map(|i| f(a.data[i % la], b.data[i % lb])).collect()
    };
    Tensor { shape, data }
}

/// Sums a broadcast gradient back down to `shape`.
fn reduce_to(g: Vec<f64>, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    if g.len() == n {
        return Tensor {
            shape: shape.to_vec(),
            data: g,
        };
    }
    let mut out = vec![0.0; n];
    for chunk in g.chunks(n) {
        for (o, v) in out.iter_mut().zip(chunk) {
            *o += v;
        }
    }
    Tensor {
        shape: shape.to_vec(),
        data: out,
    }
}

fn require_rank(op: &'static str, t: &Tensor, rank: usize) -> Result<()> {
    if t.shape.len() != rank {
        return Err(Error::dim(
            op,
            format!("expected rank {rank}, got shape {:?}", t.shape),
        ));
    }
    Ok(())
}

fn conv_geometry(input: &Tensor, kernel: &Tensor, padding: Padding) -> Result<ConvGeometry> {
    require_rank("conv2d", input, 4)?;
    require_rank("conv2d", kernel, 4)?;
    let (c, h, w) = (input.shape[1], input.shape[2], input.shape[3]);
    let (kc, kh, kw) = (kernel.shape[1], kernel.shape[2], kernel.shape[3]);
    if kc != c {
        return Err(Error::dim(
            "conv2d",
            format!("input has {c} channels, kernel expects {kc}"),
        ));
    }
    let (pad, out_h, out_w) = match padding {
        Padding::Same => {
            if kh != kw || kh % 2 == 0 {
                return Err(Error::dim(
                    "conv2d",
                    format!("same padding needs a square odd kernel, got {kh}x{kw}"),
                ));
            }
            ((kh - 1) / 2, h, w)
        }
        Padding::Valid => {
            if kh > h || kw > w {
                return Err(Error::dim(
                    "conv2d",
                    format!("kernel {kh}x{kw} larger than input {h}x{w}"),
                ));
            }
            (0, h - kh + 1, w - kw + 1)
        }
    };
    Ok(ConvGeometry {
        channels: c,
        height: h,
        width: w,
        kh,
        kw,
        pad,
        out_h,
        out_w,
    })
}

fn check_labels(op: &'static str, logits: &Tensor, labels: &[usize]) -> Result<(usize, usize)> {
    require_rank(op, logits, 2)?;
    let (n, classes) = (logits.shape[0], logits.shape[1]);
    if n == 0 {
        return Err(Error::Data(format!("{op}: empty batch")));
    }
    if labels.len() != n {
        return Err(Error::dim(
            op,
            format!("{n} rows of logits but {} labels", labels.len()),
        ));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::Data(format!(
            "label {bad} out of range for {classes} classes"
        )));
    }
    Ok((n, classes))
}

fn forward(kind: &OpKind, inputs: &[&Tensor]) -> Result<(Tensor, Saved)> {
    let unary = |f: &dyn Fn(f64) -> f64| inputs[0].map(f);
    let out = match kind {
        OpKind::Add | OpKind::Sub | OpKind::Mul => {
            let (a, b) = (inputs[0], inputs[1]);
            let shape = broadcast_shape(kind.name(), &a.shape, &b.shape)?;
            match kind {
                OpKind::Add => zip_broadcast(a, b, shape, |x, y| x + y),
                OpKind::Sub => zip_broadcast(a, b, shape, |x, y| x - y),
                _ => zip_broadcast(a, b, shape, |x, y| x * y),
            }
        }
        OpKind::Scale(k) => unary(&|x| k * x),
        OpKind::AddScalar(k) => unary(&|x| x + k),
        OpKind::MatMul { rhs_transposed } => {
            let (a, b) = (inputs[0], inputs[1]);
            require_rank("matmul", a, 2)?;
            require_rank("matmul", b, 2)?;
            let (m, k) = (a.shape[0], a.shape[1]);
            let (bk, n) = if *rhs_transposed {
                (b.shape[1], b.shape[0])
            } else {
                (b.shape[0], b.shape[1])
            };
            if k != bk {
                return Err(Error::dim(
                    "matmul",
                    format!(
                        "inner dimensions differ: {:?} x {:?}{}",
                        a.shape,
                        b.shape,
                        if *rhs_transposed { "ᵀ" } else { "" }
                    ),
                ));
            }
            let mut c = vec![0.0; m * n];
            kernels::gemm(m, k, n, &a.data, false, &b.data, *rhs_transposed, 0.0, &mut c);
            Tensor {
                shape: vec![m, n],
                data: c,
            }
        }
        OpKind::Conv2d { padding } => {
            let (x, kernel) = (inputs[0], inputs[1]);
            let g = conv_geometry(x, kernel, *padding)?;
            let (batch, out_ch) = (x.shape[0], kernel.shape[0]);
            if let Some(bias) = inputs.get(2) {
                if bias.shape != [out_ch] {
                    return Err(Error::dim(
                        "conv2d",
                        format!("bias shape {:?}, expected [{out_ch}]", bias.shape),
                    ));
                }
            }
            let in_len = g.channels * g.height * g.width;
            let out_len = g.out_len();
            let mut cols = vec![0.0; g.patch_len() * out_len];
            let mut out = vec![0.0; batch * out_ch * out_len];
            for n in 0..batch {
                kernels::im2col(&x.data[n * in_len..(n + 1) * in_len], &g, &mut cols);
                let dst = &mut out[n * out_ch * out_len..(n + 1) * out_ch * out_len];
                kernels::gemm(out_ch, g.patch_len(), out_len, &kernel.data, false, &cols, false, 0.0, dst);
                if let Some(bias) = inputs.get(2) {
                    for (o, row) in dst.chunks_mut(out_len).enumerate() {
                        for v in row {
                            *v += bias.data[o];
                        }
                    }
                }
            }
            Tensor {
                shape: vec![batch, out_ch, g.out_h, g.out_w],
                data: out,
            }
        }
        OpKind::Relu => unary(&|x| if x > 0.0 { x } else { 0.0 }),
        OpKind::Sigmoid => unary(&kernels::sigmoid),
        OpKind::Square => unary(&|x| x * x),
        OpKind::Sqrt => unary(&f64::sqrt),
        OpKind::Sum => Tensor::scalar(inputs[0].data.iter().sum()),
        OpKind::Mean => {
            let x = inputs[0];
            Tensor::scalar(x.data.iter().sum::<f64>() / x.data.len() as f64)
        }
        OpKind::SumAxis(axis) => {
            let x = inputs[0];
            if *axis >= x.shape.len() {
                return Err(Error::dim(
                    "sum_axis",
                    format!("axis {axis} out of range for shape {:?}", x.shape),
                ));
            }
            let (outer, dim, inner) = axis_split(&x.shape, *axis);
            let mut data = vec![0.0; outer * inner];
            for o in 0..outer {
                for d in 0..dim {
                    let src = &x.data[(o * dim + d) * inner..(o * dim + d + 1) * inner];
                    for (acc, v) in data[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                        *acc += v;
                    }
                }
            }
            let mut shape = x.shape.clone();
            shape.remove(*axis);
            Tensor { shape, data }
        }
        OpKind::MaxPool2x2 => {
            let x = inputs[0];
            require_rank("max_pool2x2", x, 4)?;
            let (n, c, h, w) = (x.shape[0], x.shape[1], x.shape[2], x.shape[3]);
            if h < 2 || w < 2 {
                return Err(Error::dim(
                    "max_pool2x2",
                    format!("spatial size {h}x{w} below 2x2"),
                ));
            }
            let (oh, ow) = (h / 2, w / 2);
            let mut data = Vec::with_capacity(n * c * oh * ow);
            let mut argmax = Vec::with_capacity(n * c * oh * ow);
            for plane in 0..n * c {
                let base = plane * h * w;
                for y in 0..oh {
                    for xx in 0..ow {
                        let mut best = base + 2 * y * w + 2 * xx;
                        for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                            let idx = base + (2 * y + dy) * w + 2 * xx + dx;
                            if x.data[idx] > x.data[best] {
                                best = idx;
                            }
                        }
                        data.push(x.data[best]);
                        argmax.push(best);
                    }
                }
            }
            return Ok((
                Tensor {
                    shape: vec![n, c, oh, ow],
                    data,
                },
                Saved::Indices(argmax),
            ));
        }
        OpKind::SoftmaxCrossEntropy { labels } => {
            let logits = inputs[0];
            let (n, classes) = check_labels("softmax_cross_entropy", logits, labels)?;
            let probs = kernels::softmax_rows(&logits.data, classes);
            let mut total = 0.0;
            for (row, &label) in logits.data.chunks(classes).zip(labels.iter()) {
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let lse = max + row.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
                total += lse - row[label];
            }
            return Ok((Tensor::scalar(total / n as f64), Saved::Values(probs)));
        }
        OpKind::DummyScaleGradient { labels } => {
            let logits = inputs[0];
            let (n, classes) = check_labels("dummy_scale_gradient", logits, labels)?;
            let probs = kernels::softmax_rows(&logits.data, classes);
            let mut total = 0.0;
            for ((row, p), &label) in logits
                .data
                .chunks(classes)
                .zip(probs.chunks(classes))
                .zip(labels.iter())
            {
                let expected: f64 = row.iter().zip(p).map(|(z, p)| z * p).sum();
                total += expected - row[label];
            }
            return Ok((Tensor::scalar(total / n as f64), Saved::Values(probs)));
        }
        OpKind::Reshape(shape) => Tensor::new(shape.clone(), inputs[0].data.clone())
            .map_err(|_| {
                Error::dim(
                    "reshape",
                    format!("cannot view {:?} as {shape:?}", inputs[0].shape),
                )
            })?,
        OpKind::Concat { axis } => concat_forward(inputs, *axis)?,
        OpKind::NarrowRows { start, len } => inputs[0].rows(*start, *len)?,
        OpKind::StraightThrough => unary(&|x| if x > 0.5 { 1.0 } else { 0.0 }),
        OpKind::SegmentSum { assignment, groups } => {
            let x = inputs[0];
            if assignment.len() != x.data.len() {
                return Err(Error::dim(
                    "segment_sum",
                    format!(
                        "{} assignments for {} entries",
                        assignment.len(),
                        x.data.len()
                    ),
                ));
            }
            let mut data = vec![0.0; *groups];
            for (&g, &v) in assignment.iter().zip(&x.data) {
                let slot = data.get_mut(g).ok_or_else(|| {
                    Error::Contract(format!("group index {g} out of range 0..{groups}"))
                })?;
                *slot += v;
            }
            Tensor::vector(data)
        }
    };
    Ok((out, Saved::Nothing))
}

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn concat_forward(inputs: &[&Tensor], axis: usize) -> Result<Tensor> {
    let first = inputs[0];
    if axis >= first.shape.len() {
        return Err(Error::dim(
            "concat",
            format!("axis {axis} out of range for shape {:?}", first.shape),
        ));
    }
    let mut shape = first.shape.clone();
    shape[axis] = 0;
    for t in inputs {
        let same_rank = t.shape.len() == first.shape.len();
        let compatible = same_rank
            && t.shape
                .iter()
                .zip(&first.shape)
                .enumerate()
                .all(|(d, (a, b))| d == axis || a == b);
        if !compatible {
            return Err(Error::dim(
                "concat",
                format!("{:?} incompatible with {:?} on axis {axis}", t.shape, first.shape),
            ));
        }
        shape[axis] += t.shape[axis];
    }
    let (outer, _, inner) = axis_split(&first.shape, axis);
    let mut data = Vec::with_capacity(shape.iter().product());
    for o in 0..outer {
        for t in inputs {
            let block = t.shape[axis] * inner;
            data.extend_from_slice(&t.data[o * block..(o + 1) * block]);
        }
    }
    Ok(Tensor { shape, data })
}

fn backward_rule(
    kind: &OpKind,
    inputs: &[&Tensor],
    out: &Tensor,
    saved: &Saved,
    g: &Tensor,
    needs: &[bool],
) -> Vec<Option<Tensor>> {
    let like = |t: &Tensor, data: Vec<f64>| Tensor {
        shape: t.shape.clone(),
        data,
    };
    let elementwise = |f: &dyn Fn(usize) -> f64| -> Vec<Option<Tensor>> {
        vec![Some(like(inputs[0], (0..g.data.len()).map(f).collect()))]
    };
    match kind {
        OpKind::Add | OpKind::Sub => {
            let sign = if matches!(kind, OpKind::Sub) { -1.0 } else { 1.0 };
            vec![
                needs[0].then(|| reduce_to(g.data.clone(), &inputs[0].shape)),
                needs[1].then(|| reduce_to(g.data.iter().map(|v| sign * v).collect(), &inputs[1].shape)),
            ]
        }
        OpKind::Mul => {
            let (a, b) = (inputs[0], inputs[1]);
            let n = g.data.len();
            let (la, lb) = (a.data.len(), b.data.len());
            vec![
                needs[0].then(|| reduce_to((0..n).map(|i| g.data[i] * b.data[i % lb]).collect(), &a.shape)),
                needs[1].then(|| reduce_to((0..n).map(|i| g.data[i] * a.data[i % la]).collect(), &b.shape)),
            ]
        }
        OpKind::Scale(k) => elementwise(&|i| k * g.data[i]),
        OpKind::AddScalar(_) => vec![Some(g.clone())],
        OpKind::MatMul { rhs_transposed } => {
            let (a, b) = (inputs[0], inputs[1]);
            let (m, k) = (a.shape[0], a.shape[1]);
            let n = out.shape[1];
            let da = needs[0].then(|| {
                let mut da = vec![0.0; m * k];
                // b is k×n (needs transposing) or already stored n×k.
                kernels::gemm(m, n, k, &g.data, false, &b.data, !rhs_transposed, 0.0, &mut da);
                like(a, da)
            });
            let db = needs[1].then(|| {
                let mut db = vec![0.0; k * n];
                if *rhs_transposed {
                    kernels::gemm(n, m, k, &g.data, true, &a.data, false, 0.0, &mut db);
                } else {
                    kernels::gemm(k, m, n, &a.data, true, &g.data, false, 0.0, &mut db);
                }
                like(b, db)
            });
            vec![da, db]
        }
        OpKind::Conv2d { padding } => {
            let (x, kernel) = (inputs[0], inputs[1]);
            let geom = conv_geometry(x, kernel, *padding).expect("validated in forward");
            let (batch, out_ch) = (x.shape[0], kernel.shape[0]);
            let in_len = geom.channels * geom.height * geom.width;
            let out_len = geom.out_len();
            let patch = geom.patch_len();
            let mut dx = needs[0].then(|| vec![0.0; x.data.len()]);
            let mut dk = needs[1].then(|| vec![0.0; kernel.data.len()]);
            let mut cols = vec![0.0; patch * out_len];
            let mut dcols = vec![0.0; patch * out_len];
            for n in 0..batch {
                let gn = &g.data[n * out_ch * out_len..(n + 1) * out_ch * out_len];
                if let Some(dk) = dk.as_mut() {
                    kernels::im2col(&x.data[n * in_len..(n + 1) * in_len], &geom, &mut cols);
                    kernels::gemm(out_ch, out_len, patch, gn, false, &cols, true, 1.0, dk);
                }
                if let Some(dx) = dx.as_mut() {
                    kernels::gemm(patch, out_ch, out_len, &kernel.data, true, gn, false, 0.0, &mut dcols);
                    kernels::col2im_add(&dcols, &geom, &mut dx[n * in_len..(n + 1) * in_len]);
                }
            }
            let mut grads = vec![dx.map(|d| like(x, d)), dk.map(|d| like(kernel, d))];
            if inputs.len() == 3 {
                grads.push(needs[2].then(|| {
                    let mut db = vec![0.0; out_ch];
                    for (i, chunk) in g.data.chunks(out_len).enumerate() {
                        db[i % out_ch] += chunk.iter().sum::<f64>();
                    }
                    like(inputs[2], db)
                }));
            }
            grads
        }
        OpKind::Relu => {
            let x = inputs[0];
            elementwise(&|i| if x.data[i] > 0.0 { g.data[i] } else { 0.0 })
        }
        OpKind::Sigmoid => elementwise(&|i| {
            let s = out.data[i];
            g.data[i] * s * (1.0 - s)
        }),
        OpKind::Square => {
            let x = inputs[0];
            elementwise(&|i| 2.0 * x.data[i] * g.data[i])
        }
        OpKind::Sqrt => elementwise(&|i| 0.5 * g.data[i] / out.data[i]),
        OpKind::Sum => {
            let x = inputs[0];
            vec![Some(Tensor::full(&x.shape, g.data[0]))]
        }
        OpKind::Mean => {
            let x = inputs[0];
            vec![Some(Tensor::full(&x.shape, g.data[0] / x.data.len() as f64))]
        }
        OpKind::SumAxis(axis) => {
            let x = inputs[0];
            let (outer, dim, inner) = axis_split(&x.shape, *axis);
            let mut d = vec![0.0; x.data.len()];
            for o in 0..outer {
                let src = &g.data[o * inner..(o + 1) * inner];
                for k in 0..dim {
                    d[(o * dim + k) * inner..(o * dim + k + 1) * inner].copy_from_slice(src);
                }
            }
            vec![Some(like(x, d))]
        }
        OpKind::MaxPool2x2 => {
            let Saved::Indices(argmax) = saved else {
                unreachable!("max pool saves its argmax")
            };
            let mut d = vec![0.0; inputs[0].data.len()];
            for (&idx, &v) in argmax.iter().zip(&g.data) {
                d[idx] += v;
            }
            vec![Some(like(inputs[0], d))]
        }
        OpKind::SoftmaxCrossEntropy { labels } => {
            let Saved::Values(probs) = saved else {
                unreachable!("cross entropy saves its probabilities")
            };
            let logits = inputs[0];
            let (n, classes) = (logits.shape[0], logits.shape[1]);
            let scale = g.data[0] / n as f64;
            let mut d = probs.clone();
            for (row, &label) in d.chunks_mut(classes).zip(labels.iter()) {
                row[label] -= 1.0;
                for v in row.iter_mut() {
                    *v *= scale;
                }
            }
            vec![Some(like(logits, d))]
        }
        OpKind::DummyScaleGradient { labels } => {
            let Saved::Values(probs) = saved else {
                unreachable!("dummy gradient saves its probabilities")
            };
            let logits = inputs[0];
            let (n, classes) = (logits.shape[0], logits.shape[1]);
            let scale = g.data[0] / n as f64;
            let mut d = vec![0.0; logits.data.len()];
            for (r, &label) in labels.iter().enumerate() {
                let z = &logits.data[r * classes..(r + 1) * classes];
                let p = &probs[r * classes..(r + 1) * classes];
                let mean_z: f64 = z.iter().zip(p).map(|(z, p)| z * p).sum();
                for c in 0..classes {
                    let onehot = if c == label { 1.0 } else { 0.0 };
                    d[r * classes + c] = scale * (p[c] - onehot + p[c] * (z[c] - mean_z));
                }
            }
            vec![Some(like(logits, d))]
        }
        OpKind::Reshape(_) => vec![Some(like(inputs[0], g.data.clone()))],
        OpKind::Concat { axis } => {
            let (outer, _, inner) = axis_split(&out.shape, *axis);
            let total = out.shape[*axis] * inner;
            let mut offset = 0;
            inputs
                .iter()
                .zip(needs)
                .map(|(t, &need)| {
                    let block = t.shape[*axis] * inner;
                    let grad = need.then(|| {
                        let mut d = Vec::with_capacity(t.data.len());
                        for o in 0..outer {
                            d.extend_from_slice(&g.data[o * total + offset..o * total + offset + block]);
                        }
                        like(t, d)
                    });
                    offset += block;
                    grad
                })
                .collect()
        }
        OpKind::NarrowRows { start, len } => {
            let x = inputs[0];
            let stride = x.data.len() / x.shape[0];
            let mut d = vec![0.0; x.data.len()];
            d[start * stride..(start + len) * stride].copy_from_slice(&g.data);
            vec![Some(like(x, d))]
        }
        OpKind::StraightThrough => vec![Some(like(inputs[0], g.data.clone()))],
        OpKind::SegmentSum { assignment, .. } => {
            let d = assignment.iter().map(|&grp| g.data[grp]).collect();
            vec![Some(like(inputs[0], d))]
        }
    }
}

#[cfg(test)]
mod tests;
