//! Tape-based reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! Every op appends a node to the [`Tape`] whose inputs are earlier nodes, so
//! node order is already a topological order. [`Tape::backward`] walks the
//! nodes once in reverse. Intermediate gradients are scratch buffers local to
//! one backward call; only leaf gradients persist and accumulate across calls
//! until [`Tape::zero_grad`].
//!
//! Broadcasting is limited to scalar-with-tensor in the elementwise ops and
//! per-column bias in [`Tape::add_bias`]; batch norm is a fused op.

use crate::error::{Error, Result};
use crate::exec;
use crate::kernels::{self, ConvGeometry};
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Statistics a batch-norm node normalizes with.
#[derive(Clone, Debug)]
pub enum NormStats<'a> {
    /// Mean and biased variance of the current batch.
    Batch { eps: f32 },
    /// Fixed per-channel statistics (treated as constants).
    Fixed {
        mean: &'a [f32],
        var: &'a [f32],
        eps: f32,
    },
}

/// Per-channel batch mean and biased variance computed by a batch-statistics
/// batch-norm node; `count` is the number of values per channel.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchMoments {
    pub mean: Vec<f32>,
    pub var: Vec<f32>,
    pub count: usize,
}

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f32),
    AddScalar(Var),
    Matmul(Var, Var),
    Transpose(Var),
    AddBias(Var, Var),
    Conv2d {
        input: Var,
        weight: Var,
        geom: ConvGeometry,
        out_channels: usize,
        cols: Vec<Vec<f32>>,
    },
    Relu(Var),
    MaxPool2d {
        input: Var,
        argmax: Vec<usize>,
    },
    GlobalAvgPool(Var),
    Sum(Var),
    Mean(Var),
    Log(Var),
    Exp(Var),
    Softmax {
        input: Var,
        axis: Axis,
    },
    LogSoftmax {
        input: Var,
        axis: Axis,
    },
    L2Normalize {
        input: Var,
        axis: Axis,
        norms: Vec<f32>,
    },
    Concat {
        inputs: Vec<Var>,
        axis: Axis,
        lens: Vec<usize>,
    },
    Slice {
        input: Var,
        axis: Axis,
        start: usize,
    },
    SelectRows {
        input: Var,
        rows: Vec<usize>,
    },
    Gather {
        input: Var,
        index: Vec<usize>,
    },
    Reshape(Var),
    BatchNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f32>,
        inv_std: Vec<f32>,
        batch_stats: bool,
        channels: usize,
        spatial: usize,
    },
}

/// `(outer, len, inner)` view of a tensor around one axis.
#[derive(Clone, Copy, Debug)]
struct Axis {
    outer: usize,
    len: usize,
    inner: usize,
}

impl Axis {
    fn of(shape: &[usize], axis: usize, op: &'static str) -> Result<Axis> {
        if axis >= shape.len() {
            return Err(Error::shape(op, format!("axis {axis} out of range for {shape:?}")));
        }
        Ok(Axis {
            outer: shape[..axis].iter().product(),
            len: shape[axis],
            inner: shape[axis + 1..].iter().product(),
        })
    }

    /// Calls `f(base, stride)` for every 1-D lane along the axis.
    fn for_each_lane(&self, mut f: impl FnMut(usize, usize)) {
        for o in 0..self.outer {
            for i in 0..self.inner {
                f(o * self.len * self.inner + i, self.inner);
            }
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

pub struct Tape {
    nodes: Vec<Node>,
    leaf_grads: Vec<Option<Vec<f32>>>,
    check_finite: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    /// Finite-value checking follows `debug_assertions`.
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            leaf_grads: Vec::new(),
            check_finite: cfg!(debug_assertions),
        }
    }

    pub fn with_finite_checks(mut self, on: bool) -> Self {
        self.check_finite = on;
        self
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
            op: Op::Leaf,
            requires_grad,
        });
        self.leaf_grads.push(None);
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn scalar_value(&self, v: Var) -> Result<f32> {
        self.nodes[v.0].value.item()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf, `None` if nothing flowed into it.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let g = self.leaf_grads.get(v.0)?.as_ref()?;
        Some(Tensor::new(self.nodes[v.0].value.shape().to_vec(), g.clone()).expect("grad shape"))
    }

    pub fn zero_grad(&mut self) {
        self.leaf_grads.iter_mut().for_each(|g| *g = None);
    }

    fn push(&mut self, op_name: &'static str, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        if self.check_finite && !value.all_finite() {
            return Err(Error::NonFinite { op: op_name });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.leaf_grads.push(None);
        Ok(Var(self.nodes.len() - 1))
    }

    fn binary_shapes(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a), self.value(b));
        if sa.shape() == sb.shape() || sa.is_scalar() || sb.is_scalar() {
            Ok(())
        } else {
            Err(Error::shape(op, format!("{:?} vs {:?}", sa.shape(), sb.shape())))
        }
    }

    fn elementwise(&self, a: Var, b: Var, f: impl Fn(f32, f32) -> f32) -> Tensor {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() == tb.shape() {
            let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
            Tensor::new(ta.shape().to_vec(), data).unwrap()
        } else if tb.is_scalar() {
            let s = tb.data()[0];
            ta.map(|x| f(x, s))
        } else {
            let s = ta.data()[0];
            tb.map(|y| f(s, y))
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_shapes("add", a, b)?;
        let out = self.elementwise(a, b, |x, y| x + y);
        self.push("add", out, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_shapes("sub", a, b)?;
        let out = self.elementwise(a, b, |x, y| x - y);
        self.push("sub", out, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_shapes("mul", a, b)?;
        let out = self.elementwise(a, b, |x, y| x * y);
        self.push("mul", out, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, s: f32) -> Result<Var> {
        let out = self.value(a).map(|x| x * s);
        self.push("scale", out, Op::Scale(a, s), &[a])
    }

    pub fn add_scalar(&mut self, a: Var, s: f32) -> Result<Var> {
        let out = self.value(a).map(|x| x + s);
        self.push("add_scalar", out, Op::AddScalar(a), &[a])
    }

    /// `[m x k] . [k x n]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", format!("{sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let data = kernels::matmul(self.value(a).data(), self.value(b).data(), m, k, n);
        let out = Tensor::new(vec![m, n], data)?;
        self.push("matmul", out, Op::Matmul(a, b), &[a, b])
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a);
        if s.len() != 2 {
            return Err(Error::shape("transpose", format!("{s:?}")));
        }
        let (r, c) = (s[0], s[1]);
        let out = Tensor::new(vec![c, r], kernels::transpose(self.value(a).data(), r, c))?;
        self.push("transpose", out, Op::Transpose(a), &[a])
    }

    /// `x[n x c] + bias[c]` broadcast over rows.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (sx, sb) = (self.shape(x), self.shape(bias));
        if sx.len() != 2 || sb != [sx[1]] {
            return Err(Error::shape("add_bias", format!("{sx:?} + {sb:?}")));
        }
        let c = sx[1];
        let b = self.value(bias).data().to_vec();
        let mut out = self.value(x).clone();
        for row in out.data_mut().chunks_mut(c) {
            for (v, bv) in row.iter_mut().zip(&b) {
                *v += bv;
            }
        }
        self.push("add_bias", out, Op::AddBias(x, bias), &[x, bias])
    }

    /// NCHW convolution with an `[out, in, kh, kw]` kernel and zero padding.
    pub fn conv2d(&mut self, input: Var, weight: Var, stride: usize, pad: usize) -> Result<Var> {
        let (si, sw) = (self.shape(input).to_vec(), self.shape(weight).to_vec());
        if si.len() != 4 || sw.len() != 4 || si[1] != sw[1] || stride == 0 {
            return Err(Error::shape(
                "conv2d",
                format!("input {si:?}, weight {sw:?}, stride {stride}"),
            ));
        }
        if si[2] + 2 * pad < sw[2] || si[3] + 2 * pad < sw[3] {
            return Err(Error::shape("conv2d", format!("kernel {sw:?} larger than padded input {si:?}")));
        }
        let geom = ConvGeometry {
            channels: si[1],
            height: si[2],
            width: si[3],
            kernel_h: sw[2],
            kernel_w: sw[3],
            stride,
            pad,
        };
        let (n, oc) = (si[0], sw[0]);
        let image_len = geom.channels * geom.height * geom.width;
        let (k, p) = (geom.patch_len(), geom.positions());
        let x = self.value(input).data();
        let w = self.value(weight).data();
        let per_image: Vec<(Vec<f32>, Vec<f32>)> = exec::map_indexed(n, |i| {
            let cols = kernels::im2col(&x[i * image_len..(i + 1) * image_len], &geom);
            let out = kernels::matmul(w, &cols, oc, k, p);
            (cols, out)
        });
        let mut data = Vec::with_capacity(n * oc * p);
        let mut cols = Vec::with_capacity(n);
        for (c, o) in per_image {
            data.extend_from_slice(&o);
            cols.push(c);
        }
        let out = Tensor::new(vec![n, oc, geom.out_h(), geom.out_w()], data)?;
        self.push(
            "conv2d",
            out,
            Op::Conv2d {
                input,
                weight,
                geom,
                out_channels: oc,
                cols,
            },
            &[input, weight],
        )
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(|x| if x > 0.0 { x } else { 0.0 });
        self.push("relu", out, Op::Relu(a), &[a])
    }

    /// Max pooling over `kernel x kernel` windows of an NCHW tensor, no padding.
    pub fn max_pool2d(&mut self, a: Var, kernel: usize, stride: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 4 || kernel == 0 || stride == 0 || s[2] < kernel || s[3] < kernel {
            return Err(Error::shape(
                "max_pool2d",
                format!("{s:?}, kernel {kernel}, stride {stride}"),
            ));
        }
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        let (oh, ow) = ((h - kernel) / stride + 1, (w - kernel) / stride + 1);
        let x = self.value(a).data();
        let mut data = Vec::with_capacity(n * c * oh * ow);
        let mut argmax = Vec::with_capacity(n * c * oh * ow);
        for plane in 0..n * c {
            let base = plane * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = base + oy * stride * w + ox * stride;
                    for ky in 0..kernel {
                        for kx in 0..kernel {
                            let idx = base + (oy * stride + ky) * w + ox * stride + kx;
                            if x[idx] > x[best] {
                                best = idx;
                            }
                        }
                    }
                    data.push(x[best]);
                    argmax.push(best);
                }
            }
        }
        let out = Tensor::new(vec![n, c, oh, ow], data)?;
        self.push("max_pool2d", out, Op::MaxPool2d { input: a, argmax }, &[a])
    }

    /// `[n, c, h, w] -> [n, c]`
    pub fn global_avg_pool(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 4 {
            return Err(Error::shape("global_avg_pool", format!("{s:?}")));
        }
        let hw = s[2] * s[3];
        let data = self
            .value(a)
            .data()
            .chunks(hw)
            .map(|p| (p.iter().map(|&v| v as f64).sum::<f64>() / hw as f64) as f32)
            .collect();
        let out = Tensor::new(vec![s[0], s[1]], data)?;
        self.push("global_avg_pool", out, Op::GlobalAvgPool(a), &[a])
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s: f64 = self.value(a).data().iter().map(|&v| v as f64).sum();
        self.push("sum", Tensor::scalar(s as f32), Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.numel() == 0 {
            return Err(Error::shape("mean", "empty tensor"));
        }
        let s: f64 = t.data().iter().map(|&v| v as f64).sum();
        let m = (s / t.numel() as f64) as f32;
        self.push("mean", Tensor::scalar(m), Op::Mean(a), &[a])
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(f32::ln);
        self.push("log", out, Op::Log(a), &[a])
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(f32::exp);
        self.push("exp", out, Op::Exp(a), &[a])
    }

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let ax = Axis::of(self.shape(a), axis, "softmax")?;
        let x = self.value(a);
        let mut out = x.clone();
        {
            let (src, dst) = (x.data(), out.data_mut());
            ax.for_each_lane(|base, stride| {
                let lse = lane_logsumexp(src, base, stride, ax.len);
                for t in 0..ax.len {
                    let i = base + t * stride;
                    dst[i] = ((src[i] as f64) - lse).exp() as f32;
                }
            });
        }
        self.push("softmax", out, Op::Softmax { input: a, axis: ax }, &[a])
    }

    pub fn log_softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let ax = Axis::of(self.shape(a), axis, "log_softmax")?;
        let x = self.value(a);
        let mut out = x.clone();
        {
            let (src, dst) = (x.data(), out.data_mut());
            ax.for_each_lane(|base, stride| {
                let lse = lane_logsumexp(src, base, stride, ax.len);
                for t in 0..ax.len {
                    let i = base + t * stride;
                    dst[i] = ((src[i] as f64) - lse) as f32;
                }
            });
        }
        self.push("log_softmax", out, Op::LogSoftmax { input: a, axis: ax }, &[a])
    }

    /// Divides every lane along `axis` by its Euclidean norm. Zero lanes are an error.
    pub fn l2_normalize(&mut self, a: Var, axis: usize) -> Result<Var> {
        let ax = Axis::of(self.shape(a), axis, "l2_normalize")?;
        let x = self.value(a);
        let mut out = x.clone();
        let mut norms = Vec::with_capacity(ax.outer * ax.inner);
        let mut zero_lane = false;
        {
            let (src, dst) = (x.data(), out.data_mut());
            ax.for_each_lane(|base, stride| {
                let sq: f64 = (0..ax.len)
                    .map(|t| {
                        let v = src[base + t * stride] as f64;
                        v * v
                    })
                    .sum();
                let n = sq.sqrt();
                if n == 0.0 {
                    zero_lane = true;
                }
                for t in 0..ax.len {
                    let i = base + t * stride;
                    dst[i] = (src[i] as f64 / n) as f32;
                }
                norms.push(n as f32);
            });
        }
        if zero_lane {
            return Err(Error::Input("l2_normalize: zero-norm vector".into()));
        }
        self.push(
            "l2_normalize",
            out,
            Op::L2Normalize {
                input: a,
                axis: ax,
                norms,
            },
            &[a],
        )
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs
            .first()
            .ok_or_else(|| Error::shape("concat", "no inputs"))?;
        let base_shape = self.shape(*first).to_vec();
        if axis >= base_shape.len() {
            return Err(Error::shape("concat", format!("axis {axis} for {base_shape:?}")));
        }
        let mut lens = Vec::with_capacity(inputs.len());
        for &v in inputs {
            let s = self.shape(v);
            let ok = s.len() == base_shape.len()
                && s.iter()
                    .zip(&base_shape)
                    .enumerate()
                    .all(|(d, (x, y))| d == axis || x == y);
            if !ok {
                return Err(Error::shape("concat", format!("{base_shape:?} vs {s:?}")));
            }
            lens.push(s[axis]);
        }
        let total: usize = lens.iter().sum();
        let mut shape = base_shape.clone();
        shape[axis] = total;
        let outer: usize = base_shape[..axis].iter().product();
        let inner: usize = base_shape[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (&v, &len) in inputs.iter().zip(&lens) {
                let src = self.value(v).data();
                data.extend_from_slice(&src[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let out = Tensor::new(shape, data)?;
        let ax = Axis {
            outer,
            len: total,
            inner,
        };
        self.push(
            "concat",
            out,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis: ax,
                lens,
            },
            inputs,
        )
    }

    /// Indices `start..end` along `axis`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        let ax = Axis::of(&s, axis, "slice")?;
        if start > end || end > ax.len {
            return Err(Error::shape("slice", format!("{start}..{end} on axis {axis} of {s:?}")));
        }
        let len = end - start;
        let src = self.value(a).data();
        let mut data = Vec::with_capacity(ax.outer * len * ax.inner);
        for o in 0..ax.outer {
            let base = o * ax.len * ax.inner;
            data.extend_from_slice(&src[base + start * ax.inner..base + end * ax.inner]);
        }
        let mut shape = s;
        shape[axis] = len;
        let out = Tensor::new(shape, data)?;
        self.push(
            "slice",
            out,
            Op::Slice {
                input: a,
                axis: ax,
                start,
            },
            &[a],
        )
    }

    /// Gathers rows (leading-axis entries) in the given order; repeats allowed.
    pub fn select_rows(&mut self, a: Var, rows: &[usize]) -> Result<Var> {
        let out = self.value(a).select_leading(rows)?;
        self.push(
            "select_rows",
            out,
            Op::SelectRows {
                input: a,
                rows: rows.to_vec(),
            },
            &[a],
        )
    }

    /// `out[i] = x[i, index[i]]` for a 2-D `x`.
    pub fn gather(&mut self, a: Var, index: &[usize]) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 2 || s[0] != index.len() || index.iter().any(|&j| j >= s[1]) {
            return Err(Error::shape(
                "gather",
                format!("{s:?} with {} indices", index.len()),
            ));
        }
        let x = self.value(a).data();
        let data = index.iter().enumerate().map(|(i, &j)| x[i * s[1] + j]).collect();
        let out = Tensor::new(vec![s[0]], data)?;
        self.push(
            "gather",
            out,
            Op::Gather {
                input: a,
                index: index.to_vec(),
            },
            &[a],
        )
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).clone().reshape(shape)?;
        self.push("reshape", out, Op::Reshape(a), &[a])
    }

    /// Per-channel normalization followed by `gamma * xhat + beta`.
    ///
    /// Accepts `[n, c]` or `[n, c, h, w]`. With [`NormStats::Batch`] the
    /// returned moments are the batch mean and biased variance, for the caller
    /// to fold into running statistics.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        stats: NormStats<'_>,
    ) -> Result<(Var, Option<BatchMoments>)> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 && s.len() != 4 {
            return Err(Error::shape("batch_norm", format!("{s:?}")));
        }
        let (n, c) = (s[0], s[1]);
        let spatial: usize = s[2..].iter().product();
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::shape(
                "batch_norm",
                format!(
                    "input {s:?} with gamma {:?}, beta {:?}",
                    self.shape(gamma),
                    self.shape(beta)
                ),
            ));
        }
        let count = n * spatial;
        let xv = self.value(x).data();
        let (mean, var, eps, batch_stats) = match stats {
            NormStats::Batch { eps } => {
                let mut mean = vec![0.0f64; c];
                let mut var = vec![0.0f64; c];
                for ch in 0..c {
                    let mut s1 = 0.0f64;
                    for i in 0..n {
                        let base = (i * c + ch) * spatial;
                        for &v in &xv[base..base + spatial] {
                            s1 += v as f64;
                        }
                    }
                    let m = s1 / count as f64;
                    let mut s2 = 0.0f64;
                    for i in 0..n {
                        let base = (i * c + ch) * spatial;
                        for &v in &xv[base..base + spatial] {
                            let d = v as f64 - m;
                            s2 += d * d;
                        }
                    }
                    mean[ch] = m;
                    var[ch] = s2 / count as f64;
                }
                (mean, var, eps, true)
            }
            NormStats::Fixed { mean, var, eps } => {
                if mean.len() != c || var.len() != c {
                    return Err(Error::shape("batch_norm", "running statistics length"));
                }
                (
                    mean.iter().map(|&v| v as f64).collect(),
                    var.iter().map(|&v| v as f64).collect(),
                    eps,
                    false,
                )
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps as f64).sqrt()).collect();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = vec![0.0f32; xv.len()];
        let mut out = vec![0.0f32; xv.len()];
        for i in 0..n {
            for ch in 0..c {
                let base = (i * c + ch) * spatial;
                for k in base..base + spatial {
                    let h = (xv[k] as f64 - mean[ch]) * inv_std[ch];
                    xhat[k] = h as f32;
                    out[k] = (h * g[ch] as f64 + b[ch] as f64) as f32;
                }
            }
        }
        let moments = batch_stats.then(|| BatchMoments {
            mean: mean.iter().map(|&v| v as f32).collect(),
            var: var.iter().map(|&v| v as f32).collect(),
            count,
        });
        let out = Tensor::new(s, out)?;
        let v = self.push(
            "batch_norm",
            out,
            Op::BatchNorm {
                input: x,
                gamma,
                beta,
                xhat,
                inv_std: inv_std.iter().map(|&v| v as f32).collect(),
                batch_stats,
                channels: c,
                spatial,
            },
            &[x, gamma, beta],
        )?;
        Ok((v, moments))
    }

    /// Back-propagates from a scalar `root`, accumulating into leaf gradients.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        let rv = &self.nodes[root.0].value;
        if rv.numel() != 1 {
            return Err(Error::NotScalar(rv.shape().to_vec()));
        }
        if !self.nodes[root.0].requires_grad {
            return Ok(());
        }
        let mut scratch: Vec<Option<Vec<f32>>> = vec![None; root.0 + 1];
        scratch[root.0] = Some(vec![1.0]);
        for idx in (0..=root.0).rev() {
            let Some(g) = scratch[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                match &mut self.leaf_grads[idx] {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, d)| *a += d),
                    slot @ None => *slot = Some(g),
                }
                continue;
            }
            self.propagate(idx, &g, &mut scratch);
        }
        Ok(())
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&self, idx: usize, g: &[f32], scratch: &mut [Option<Vec<f32>>]) {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                for (v, s) in [(*a, 1.0f32), (*b, sign)] {
                    if !self.wants(v) {
                        continue;
                    }
                    if self.value(v).numel() == g.len() {
                        accumulate(scratch, v, g.len(), |acc| {
                            acc.iter_mut().zip(g).for_each(|(x, d)| *x += s * d)
                        });
                    } else {
                        let total: f64 = g.iter().map(|&d| d as f64).sum();
                        accumulate(scratch, v, 1, |acc| acc[0] += s * total as f32);
                    }
                }
            }
            Op::Mul(a, b) => {
                for (v, other) in [(*a, *b), (*b, *a)] {
                    if !self.wants(v) {
                        continue;
                    }
                    let ov = self.value(other).data();
                    let n = self.value(v).numel();
                    if n == g.len() {
                        if ov.len() == g.len() {
                            accumulate(scratch, v, n, |acc| {
                                for i in 0..n {
                                    acc[i] += g[i] * ov[i];
                                }
                            });
                        } else {
                            let s = ov[0];
                            accumulate(scratch, v, n, |acc| {
                                for i in 0..n {
                                    acc[i] += g[i] * s;
                                }
                            });
                        }
                    } else {
                        let total: f64 = g.iter().zip(ov).map(|(&d, &o)| d as f64 * o as f64).sum();
                        accumulate(scratch, v, 1, |acc| acc[0] += total as f32);
                    }
                }
            }
            Op::Scale(a, s) => {
                if self.wants(*a) {
                    accumulate(scratch, *a, g.len(), |acc| {
                        acc.iter_mut().zip(g).for_each(|(x, d)| *x += s * d)
                    });
                }
            }
            Op::AddScalar(a) | Op::Reshape(a) => {
                if self.wants(*a) {
                    accumulate(scratch, *a, g.len(), |acc| {
                        acc.iter_mut().zip(g).for_each(|(x, d)| *x += d)
                    });
                }
            }
            Op::Matmul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if self.wants(*a) {
                    let da = kernels::matmul_nt(g, self.value(*b).data(), m, n, k);
                    add_into(scratch, *a, &da);
                }
                if self.wants(*b) {
                    let db = kernels::matmul_tn(self.value(*a).data(), g, m, k, n);
                    add_into(scratch, *b, &db);
                }
            }
            Op::Transpose(a) => {
                if self.wants(*a) {
                    let s = node.value.shape();
                    let da = kernels::transpose(g, s[0], s[1]);
                    add_into(scratch, *a, &da);
                }
            }
            Op::AddBias(x, bias) => {
                if self.wants(*x) {
                    add_into(scratch, *x, g);
                }
                if self.wants(*bias) {
                    let c = self.value(*bias).numel();
                    let mut db = vec![0.0f64; c];
                    for row in g.chunks(c) {
                        for (s, &d) in db.iter_mut().zip(row) {
                            *s += d as f64;
                        }
                    }
                    let db: Vec<f32> = db.into_iter().map(|v| v as f32).collect();
                    add_into(scratch, *bias, &db);
                }
            }
            Op::Conv2d {
                input,
                weight,
                geom,
                out_channels,
                cols,
            } => {
                let oc = *out_channels;
                let (k, p) = (geom.patch_len(), geom.positions());
                let n = cols.len();
                let image_len = geom.channels * geom.height * geom.width;
                let want_w = self.wants(*weight);
                let want_x = self.wants(*input);
                let w = self.value(*weight).data();
                let per_image: Vec<(Option<Vec<f32>>, Option<Vec<f32>>)> =
                    exec::map_indexed(n, |i| {
                        let gi = &g[i * oc * p..(i + 1) * oc * p];
                        let dw = want_w.then(|| kernels::matmul_nt(gi, &cols[i], oc, p, k));
                        let dx = want_x.then(|| {
                            let dcol = kernels::matmul_tn(w, gi, oc, k, p);
                            let mut img = vec![0.0f32; image_len];
                            kernels::col2im(&dcol, geom, &mut img);
                            img
                        });
                        (dw, dx)
                    });
                if want_w {
                    let mut dw = vec![0.0f64; oc * k];
                    for (part, _) in &per_image {
                        for (s, &d) in dw.iter_mut().zip(part.as_ref().unwrap()) {
                            *s += d as f64;
                        }
                    }
                    let dw: Vec<f32> = dw.into_iter().map(|v| v as f32).collect();
                    add_into(scratch, *weight, &dw);
                }
                if want_x {
                    accumulate(scratch, *input, n * image_len, |acc| {
                        for (i, (_, part)) in per_image.iter().enumerate() {
                            let dst = &mut acc[i * image_len..(i + 1) * image_len];
                            for (a, &d) in dst.iter_mut().zip(part.as_ref().unwrap()) {
                                *a += d;
                            }
                        }
                    });
                }
            }
            Op::Relu(a) => {
                if self.wants(*a) {
                    let x = self.value(*a).data();
                    accumulate(scratch, *a, g.len(), |acc| {
                        for i in 0..g.len() {
                            if x[i] > 0.0 {
                                acc[i] += g[i];
                            }
                        }
                    });
                }
            }
            Op::MaxPool2d { input, argmax } => {
                if self.wants(*input) {
                    let n = self.value(*input).numel();
                    accumulate(scratch, *input, n, |acc| {
                        for (&j, &d) in argmax.iter().zip(g) {
                            acc[j] += d;
                        }
                    });
                }
            }
            Op::GlobalAvgPool(a) => {
                if self.wants(*a) {
                    let s = self.shape(*a);
                    let hw = s[2] * s[3];
                    let inv = 1.0 / hw as f32;
                    accumulate(scratch, *a, g.len() * hw, |acc| {
                        for (plane, &d) in g.iter().enumerate() {
                            for v in &mut acc[plane * hw..(plane + 1) * hw] {
                                *v += d * inv;
                            }
                        }
                    });
                }
            }
            Op::Sum(a) => {
                if self.wants(*a) {
                    let n = self.value(*a).numel();
                    accumulate(scratch, *a, n, |acc| acc.iter_mut().for_each(|x| *x += g[0]));
                }
            }
            Op::Mean(a) => {
                if self.wants(*a) {
                    let n = self.value(*a).numel();
                    let d = g[0] / n as f32;
                    accumulate(scratch, *a, n, |acc| acc.iter_mut().for_each(|x| *x += d));
                }
            }
            Op::Log(a) => {
                if self.wants(*a) {
                    let x = self.value(*a).data();
                    accumulate(scratch, *a, g.len(), |acc| {
                        for i in 0..g.len() {
                            acc[i] += g[i] / x[i];
                        }
                    });
                }
            }
            Op::Exp(a) => {
                if self.wants(*a) {
                    let y = node.value.data();
                    accumulate(scratch, *a, g.len(), |acc| {
                        for i in 0..g.len() {
                            acc[i] += g[i] * y[i];
                        }
                    });
                }
            }
            Op::Softmax { input, axis } => {
                if self.wants(*input) {
                    let y = node.value.data();
                    accumulate(scratch, *input, g.len(), |acc| {
                        axis.for_each_lane(|base, stride| {
                            let dot: f64 = (0..axis.len)
                                .map(|t| {
                                    let i = base + t * stride;
                                    g[i] as f64 * y[i] as f64
                                })
                                .sum();
                            for t in 0..axis.len {
                                let i = base + t * stride;
                                acc[i] += (y[i] as f64 * (g[i] as f64 - dot)) as f32;
                            }
                        })
                    });
                }
            }
            Op::LogSoftmax { input, axis } => {
                if self.wants(*input) {
                    let y = node.value.data();
                    accumulate(scratch, *input, g.len(), |acc| {
                        axis.for_each_lane(|base, stride| {
                            let total: f64 = (0..axis.len).map(|t| g[base + t * stride] as f64).sum();
                            for t in 0..axis.len {
                                let i = base + t * stride;
                                let p = (y[i] as f64).exp();
                                acc[i] += (g[i] as f64 - p * total) as f32;
                            }
                        })
                    });
                }
            }
            Op::L2Normalize { input, axis, norms } => {
                if self.wants(*input) {
                    let y = node.value.data();
                    accumulate(scratch, *input, g.len(), |acc| {
                        let mut lane = 0;
                        axis.for_each_lane(|base, stride| {
                            let dot: f64 = (0..axis.len)
                                .map(|t| {
                                    let i = base + t * stride;
                                    g[i] as f64 * y[i] as f64
                                })
                                .sum();
                            let n = norms[lane] as f64;
                            for t in 0..axis.len {
                                let i = base + t * stride;
                                acc[i] += ((g[i] as f64 - y[i] as f64 * dot) / n) as f32;
                            }
                            lane += 1;
                        })
                    });
                }
            }
            Op::Concat { inputs, axis, lens } => {
                let mut offset = 0;
                for (&v, &len) in inputs.iter().zip(lens) {
                    if self.wants(v) {
                        let n = axis.outer * len * axis.inner;
                        accumulate(scratch, v, n, |acc| {
                            for o in 0..axis.outer {
                                let src = o * axis.len * axis.inner + offset * axis.inner;
                                let dst = o * len * axis.inner;
                                for t in 0..len * axis.inner {
                                    acc[dst + t] += g[src + t];
                                }
                            }
                        });
                    }
                    offset += len;
                }
            }
            Op::Slice { input, axis, start } => {
                if self.wants(*input) {
                    let len = g.len() / (axis.outer * axis.inner).max(1);
                    accumulate(scratch, *input, axis.outer * axis.len * axis.inner, |acc| {
                        for o in 0..axis.outer {
                            let dst = o * axis.len * axis.inner + start * axis.inner;
                            let src = o * len * axis.inner;
                            for t in 0..len * axis.inner {
                                acc[dst + t] += g[src + t];
                            }
                        }
                    });
                }
            }
            Op::SelectRows { input, rows } => {
                if self.wants(*input) {
                    let n = self.value(*input).numel();
                    let stride = g.len() / rows.len().max(1);
                    accumulate(scratch, *input, n, |acc| {
                        for (k, &r) in rows.iter().enumerate() {
                            for t in 0..stride {
                                acc[r * stride + t] += g[k * stride + t];
                            }
                        }
                    });
                }
            }
            Op::Gather { input, index } => {
                if self.wants(*input) {
                    let s = self.shape(*input);
                    let cols = s[1];
                    accumulate(scratch, *input, s[0] * cols, |acc| {
                        for (i, &j) in index.iter().enumerate() {
                            acc[i * cols + j] += g[i];
                        }
                    });
                }
            }
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
                channels,
                spatial,
            } => {
                let (c, sp) = (*channels, *spatial);
                let n = g.len() / (c * sp);
                let count = (n * sp) as f64;
                let mut sum_g = vec![0.0f64; c];
                let mut sum_gx = vec![0.0f64; c];
                for i in 0..n {
                    for ch in 0..c {
                        let base = (i * c + ch) * sp;
                        for k in base..base + sp {
                            sum_g[ch] += g[k] as f64;
                            sum_gx[ch] += g[k] as f64 * xhat[k] as f64;
                        }
                    }
                }
                if self.wants(*gamma) {
                    let dg: Vec<f32> = sum_gx.iter().map(|&v| v as f32).collect();
                    add_into(scratch, *gamma, &dg);
                }
                if self.wants(*beta) {
                    let db: Vec<f32> = sum_g.iter().map(|&v| v as f32).collect();
                    add_into(scratch, *beta, &db);
                }
                if self.wants(*input) {
                    let gm = self.value(*gamma).data();
                    accumulate(scratch, *input, g.len(), |acc| {
                        for i in 0..n {
                            for ch in 0..c {
                                let scale = gm[ch] as f64 * inv_std[ch] as f64;
                                let base = (i * c + ch) * sp;
                                for k in base..base + sp {
                                    let d = if *batch_stats {
                                        scale
                                            * (g[k] as f64
                                                - sum_g[ch] / count
                                                - xhat[k] as f64 * sum_gx[ch] / count)
                                    } else {
                                        scale * g[k] as f64
                                    };
                                    acc[k] += d as f32;
                                }
                            }
                        }
                    });
                }
            }
        }
    }
}

fn lane_logsumexp(x: &[f32], base: usize, stride: usize, len: usize) -> f64 {
    let mut m = f64::NEG_INFINITY;
    for t in 0..len {
        m = m.max(x[base + t * stride] as f64);
    }
    let s: f64 = (0..len).map(|t| (x[base + t * stride] as f64 - m).exp()).sum();
    m + s.ln()
}

fn accumulate(scratch: &mut [Option<Vec<f32>>], v: Var, len: usize, f: impl FnOnce(&mut [f32])) {
    let slot = scratch[v.0].get_or_insert_with(|| vec![0.0; len]);
    f(slot);
}

fn add_into(scratch: &mut [Option<Vec<f32>>], v: Var, delta: &[f32]) {
    accumulate(scratch, v, delta.len(), |acc| {
        acc.iter_mut().zip(delta).for_each(|(a, d)| *a += d)
    });
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f32]) -> Tensor {
        Tensor::from_slice(shape, data).unwrap()
    }

    #[test]
    fn relu_forward() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[3], &[-1.0, 0.0, 2.0]), true);
        let y = tape.relu(x).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0, 0.0, 2.0]);
        let s = tape.sum(y).unwrap();
        tape.backward(s).unwrap();
        // subgradient 0 at exactly 0
        assert_eq!(tape.grad(x).unwrap().data(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[2], &[0.0, 0.0]));
        let y = tape.softmax(x, 0).unwrap();
        assert_eq!(tape.value(y).data(), &[0.5, 0.5]);
    }

    #[test]
    fn conv_of_ones_sums_window() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::ones(&[1, 1, 3, 3]));
        let w = tape.constant(Tensor::ones(&[1, 1, 2, 2]));
        let y = tape.conv2d(x, w, 1, 0).unwrap();
        assert_eq!(tape.shape(y), &[1, 1, 2, 2]);
        assert_eq!(tape.value(y).data(), &[4.0; 4]);
    }

    #[test]
    fn sum_of_squares_grad() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2], &[1.0, 2.0]), true);
        let sq = tape.mul(x, x).unwrap();
        let s = tape.sum(sq).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn mean_grad_and_accumulation() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::ones(&[4]), true);
        let m = tape.mean(x).unwrap();
        tape.backward(m).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[0.25; 4]);
        tape.backward(m).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[0.5; 4]);
        tape.zero_grad();
        assert!(tape.grad(x).is_none());
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::ones(&[2]), true);
        assert!(matches!(tape.backward(x), Err(Error::NotScalar(_))));
    }

    #[test]
    fn shape_errors_name_the_op() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::ones(&[2, 3]));
        let b = tape.constant(Tensor::ones(&[2, 3]));
        let err = tape.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("matmul") && err.contains("[2, 3]"), "{err}");
        let c = tape.constant(Tensor::ones(&[3]));
        assert!(tape.add(a, c).is_err());
    }

    #[test]
    fn finite_check_flags_nan() {
        let mut tape = Tape::new().with_finite_checks(true);
        let x = tape.constant(t(&[1], &[-1.0]));
        assert!(matches!(tape.log(x), Err(Error::NonFinite { op: "log" })));
    }

    #[test]
    fn unused_leaf_gets_no_grad() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::ones(&[2]), true);
        let unused = tape.leaf(Tensor::ones(&[2]), true);
        let s = tape.sum(x).unwrap();
        tape.backward(s).unwrap();
        assert!(tape.grad(unused).is_none());
    }

    #[test]
    fn batch_norm_matches_formula() {
        // 2x2 batch, two channels
        let x = [1.0f32, 4.0, 3.0, 0.0];
        let mut tape = Tape::new();
        let xv = tape.constant(t(&[2, 2], &x));
        let g = tape.constant(t(&[2], &[2.0, 1.0]));
        let b = tape.constant(t(&[2], &[0.5, -0.5]));
        let (y, m) = tape.batch_norm(xv, g, b, NormStats::Batch { eps: 1e-5 }).unwrap();
        let m = m.unwrap();
        assert_eq!(m.mean, vec![2.0, 2.0]);
        assert_eq!(m.var, vec![1.0, 4.0]);
        let want = [
            (1.0 - 2.0) / (1.0f64 + 1e-5).sqrt() * 2.0 + 0.5,
            (4.0 - 2.0) / (4.0f64 + 1e-5).sqrt() * 1.0 - 0.5,
            (3.0 - 2.0) / (1.0f64 + 1e-5).sqrt() * 2.0 + 0.5,
            (0.0 - 2.0) / (4.0f64 + 1e-5).sqrt() * 1.0 - 0.5,
        ];
        for (a, w) in tape.value(y).data().iter().zip(want) {
            assert!((*a as f64 - w).abs() < 1e-6);
        }
    }
}
