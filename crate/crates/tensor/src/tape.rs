use std::sync::Arc;

use crate::error::{Result, TensorError};
use crate::kernels::{self, ConvGeom};
use crate::real::Real;
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// User-supplied backward rule: `(inputs, output, upstream grad) -> input grads`.
pub type BackwardFn<T> = Box<dyn Fn(&[&Tensor<T>], &Tensor<T>, &Tensor<T>) -> Vec<Tensor<T>>>;

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Relu(Var),
    Gelu(Var),
    Sigmoid(Var),
    Sum(Var),
    Mean(Var),
    Reshape(Var),
    Transpose(Var),
    MatMul(Var, Var),
    Linear(Var, Var, Option<Var>),
    GatherRows(Var, Arc<[usize]>),
    ScatterSum(Var, Arc<[usize]>),
    SegSoftmax(Var, Arc<[usize]>),
    RowOuter(Var, Var),
    SlotScores(Var, Var),
    SlotMix(Var, Var),
    DwConv(Var, Var),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    ChannelAffine(Var, Var, Var),
    Upsample2x(Var),
    Concat(Vec<Var>),
    Pad2d(Var),
    Crop2d(Var),
    Custom(Vec<Var>, BackwardFn<T>),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Define-by-run recording of tensor ops. Build one per forward pass.
pub struct Tape<T: Real> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Tensor<T>>>,
    backward_done: bool,
    check_finite: bool,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            backward_done: false,
            check_finite: cfg!(debug_assertions),
        }
    }

    /// Reject non-finite outputs produced from finite inputs.
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

    pub fn reset(&mut self) {
        self.nodes.clear();
        self.grads.clear();
        self.backward_done = false;
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last backward pass; `None` if `v` was unreachable.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Result<Var> {
        if self.check_finite && !value.all_finite() && inputs.iter().all(|i| self.nodes[i.0].value.all_finite()) {
            return Err(TensorError::Contract(format!(
                "non-finite output from finite inputs (shape {:?})",
                value.shape()
            )));
        }
        let requires_grad = inputs.iter().any(|i| self.nodes[i.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(TensorError::Shape {
                op,
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        Ok(())
    }

    fn zip(&self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape(), data).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let v = self.zip(a, b, |x, y| x + y);
        self.push(v, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let v = self.zip(a, b, |x, y| x - y);
        self.push(v, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let v = self.zip(a, b, |x, y| x * y);
        self.push(v, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, c: T) -> Result<Var> {
        let v = self.value(a).map(|x| x * c);
        self.push(v, Op::Scale(a, c), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(|x| if x > T::zero() { x } else { T::zero() });
        self.push(v, Op::Relu(a), &[a])
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(kernels::gelu);
        self.push(v, Op::Gelu(a), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(kernels::sigmoid);
        self.push(v, Op::Sigmoid(a), &[a])
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s: T = self.value(a).data().iter().copied().sum();
        self.push(Tensor::scalar(s), Op::Sum(a), &[a])
    }

    /// Mean over all elements; the mean of an empty tensor is zero.
    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let n = t.len();
        let s: T = t.data().iter().copied().sum();
        let m = if n == 0 { T::zero() } else { s / T::of(n as f64) };
        self.push(Tensor::scalar(m), Op::Mean(a), &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(a).clone().reshaped(shape)?;
        self.push(v, Op::Reshape(a), &[a])
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let (r, c) = t.dims2("transpose")?;
        let v = Tensor::new(&[c, r], kernels::transpose(t.data(), r, c))?;
        self.push(v, Op::Transpose(a), &[a])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k) = ta.dims2("matmul")?;
        let (k2, n) = tb.dims2("matmul")?;
        if k != k2 {
            return Err(TensorError::Shape {
                op: "matmul",
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let mut out = vec![T::zero(); m * n];
        kernels::gemm(m, k, n, ta.data(), false, tb.data(), false, &mut out, false);
        self.push(Tensor::new(&[m, n], out)?, Op::MatMul(a, b), &[a, b])
    }

    /// `x·weight + bias` for `x: n×a`, `weight: a×b`, `bias: b`.
    pub fn linear(&mut self, x: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let (tx, tw) = (self.value(x), self.value(weight));
        let mismatch = || TensorError::Shape {
            op: "linear",
            lhs: tx.shape().to_vec(),
            rhs: tw.shape().to_vec(),
        };
        let (n, a) = tx.dims2("linear").map_err(|_| mismatch())?;
        let (a2, b) = tw.dims2("linear").map_err(|_| mismatch())?;
        if a != a2 {
            return Err(mismatch());
        }
        let mut out = vec![T::zero(); n * b];
        kernels::gemm(n, a, b, tx.data(), false, tw.data(), false, &mut out, false);
        let mut inputs = vec![x, weight];
        if let Some(bv) = bias {
            let tb = self.value(bv);
            if tb.shape() != [b] {
                return Err(TensorError::Shape {
                    op: "linear bias",
                    lhs: vec![b],
                    rhs: tb.shape().to_vec(),
                });
            }
            for row in out.chunks_exact_mut(b.max(1)) {
                for (o, &bb) in row.iter_mut().zip(tb.data()) {
                    *o += bb;
                }
            }
            inputs.push(bv);
        }
        self.push(Tensor::new(&[n, b], out)?, Op::Linear(x, weight, bias), &inputs)
    }

    /// Row `i` of the output is row `index[i]` of `src`.
    pub fn gather_rows(&mut self, src: Var, index: Arc<[usize]>) -> Result<Var> {
        let t = self.value(src);
        let (_, f) = t.dims2("gather_rows")?;
        let out = kernels::gather_rows(t.data(), f, &index)?;
        let v = Tensor::new(&[index.len(), f], out)?;
        self.push(v, Op::GatherRows(src, index), &[src])
    }

    /// Segmented row sum of `values: n×f` into `num_segments×f`.
    pub fn scatter_sum(&mut self, values: Var, segment_of: Arc<[usize]>, num_segments: usize) -> Result<Var> {
        let t = self.value(values);
        let (n, f) = t.dims2("scatter_sum")?;
        if n != segment_of.len() {
            return Err(TensorError::Shape {
                op: "scatter_sum",
                lhs: t.shape().to_vec(),
                rhs: vec![segment_of.len()],
            });
        }
        let out = kernels::scatter_sum(t.data(), f, &segment_of, num_segments)?;
        let v = Tensor::new(&[num_segments, f], out)?;
        self.push(v, Op::ScatterSum(values, segment_of), &[values])
    }

    /// Softmax within segments. Accepts `[n]` or `[n×c]`; for the latter,
    /// each column is normalized independently.
    pub fn segmented_softmax(&mut self, scores: Var, segment_of: Arc<[usize]>) -> Result<Var> {
        let t = self.value(scores);
        let (n, c) = match t.shape() {
            &[n] => (n, 1),
            &[n, c] => (n, c),
            s => {
                return Err(TensorError::Contract(format!(
                    "segmented_softmax: expected [n] or [n, c], got {s:?}"
                )))
            }
        };
        if n != segment_of.len() {
            return Err(TensorError::Shape {
                op: "segmented_softmax",
                lhs: t.shape().to_vec(),
                rhs: vec![segment_of.len()],
            });
        }
        let out = kernels::segmented_softmax(t.data(), c, &segment_of);
        let v = Tensor::new(t.shape(), out)?;
        self.push(v, Op::SegSoftmax(scores, segment_of), &[scores])
    }

    /// `out[i, j·d + t] = a[i, j] · b[i, t]` for `a: n×k`, `b: n×d`.
    pub fn row_outer(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (n, k) = ta.dims2("row_outer")?;
        let (n2, d) = tb.dims2("row_outer")?;
        if n != n2 {
            return Err(TensorError::Shape {
                op: "row_outer",
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let mut out = Vec::with_capacity(n * k * d);
        for i in 0..n {
            let brow = &tb.data()[i * d..(i + 1) * d];
            for j in 0..k {
                let s = ta.data()[i * k + j];
                out.extend(brow.iter().map(|&v| s * v));
            }
        }
        self.push(Tensor::new(&[n, k * d], out)?, Op::RowOuter(a, b), &[a, b])
    }

    /// `s[i, j] = q[i] · keys[i·k + j]` for `q: n×d`, `keys: (n·k)×d`.
    pub fn slot_scores(&mut self, q: Var, keys: Var, k: usize) -> Result<Var> {
        let (tq, tk) = (self.value(q), self.value(keys));
        let (n, d) = tq.dims2("slot_scores")?;
        let (rows, d2) = tk.dims2("slot_scores")?;
        if rows != n * k || d != d2 {
            return Err(TensorError::Shape {
                op: "slot_scores",
                lhs: tq.shape().to_vec(),
                rhs: tk.shape().to_vec(),
            });
        }
        let mut out = vec![T::zero(); n * k];
        for i in 0..n {
            let qi = &tq.data()[i * d..(i + 1) * d];
            for j in 0..k {
                let kr = &tk.data()[(i * k + j) * d..(i * k + j + 1) * d];
                out[i * k + j] = qi.iter().zip(kr).map(|(&x, &y)| x * y).sum();
            }
        }
        self.push(Tensor::new(&[n, k], out)?, Op::SlotScores(q, keys), &[q, keys])
    }

    /// `o[i] = Σ_j w[i, j] · values[i·k + j]` for `w: n×k`, `values: (n·k)×d`.
    pub fn slot_mix(&mut self, weights: Var, values: Var) -> Result<Var> {
        let (tw, tv) = (self.value(weights), self.value(values));
        let (n, k) = tw.dims2("slot_mix")?;
        let (rows, d) = tv.dims2("slot_mix")?;
        if rows != n * k {
            return Err(TensorError::Shape {
                op: "slot_mix",
                lhs: tw.shape().to_vec(),
                rhs: tv.shape().to_vec(),
            });
        }
        let mut out = vec![T::zero(); n * d];
        for i in 0..n {
            let orow = &mut out[i * d..(i + 1) * d];
            for j in 0..k {
                let wv = tw.data()[i * k + j];
                let vr = &tv.data()[(i * k + j) * d..(i * k + j + 1) * d];
                for (o, &v) in orow.iter_mut().zip(vr) {
                    *o += wv * v;
                }
            }
        }
        self.push(
            Tensor::new(&[n, d], out)?,
            Op::SlotMix(weights, values),
            &[weights, values],
        )
    }

    /// Per-channel correlation of `x: c×h×w` with `kernel: c×kh×kw`, zero padded.
    pub fn depthwise_conv2d(&mut self, x: Var, kernel: Var) -> Result<Var> {
        let (tx, tk) = (self.value(x), self.value(kernel));
        let dims = tx.dims3("depthwise_conv2d")?;
        let (kc, kh, kw) = tk.dims3("depthwise_conv2d")?;
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(TensorError::Config(format!(
                "depthwise_conv2d needs odd kernel extents, got {kh}x{kw}"
            )));
        }
        if kc != dims.0 {
            return Err(TensorError::Shape {
                op: "depthwise_conv2d",
                lhs: tx.shape().to_vec(),
                rhs: tk.shape().to_vec(),
            });
        }
        let out = kernels::depthwise_conv2d(tx.data(), dims, tk.data(), (kh, kw));
        let v = Tensor::new(tx.shape(), out)?;
        self.push(v, Op::DwConv(x, kernel), &[x, kernel])
    }

    /// Dense convolution, `weight: c_out×c_in×kh×kw`, symmetric zero padding.
    pub fn conv2d(&mut self, x: Var, weight: Var, bias: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let (tx, tw) = (self.value(x), self.value(weight));
        let (c_in, h, w) = tx.dims3("conv2d")?;
        let (c_out, wc, kh, kw) = match tw.shape() {
            &[a, b, c, d] => (a, b, c, d),
            s => return Err(TensorError::Contract(format!("conv2d: weight must be 4D, got {s:?}"))),
        };
        if wc != c_in {
            return Err(TensorError::Shape {
                op: "conv2d",
                lhs: tx.shape().to_vec(),
                rhs: tw.shape().to_vec(),
            });
        }
        if stride == 0 || h + 2 * pad < kh || w + 2 * pad < kw {
            return Err(TensorError::Config(format!(
                "conv2d: kernel {kh}x{kw} stride {stride} pad {pad} does not fit {h}x{w}"
            )));
        }
        let geom = ConvGeom {
            c_in,
            h,
            w,
            kh,
            kw,
            stride,
            pad,
        };
        let mut inputs = vec![x, weight];
        let bias_data = match bias {
            Some(b) => {
                if self.value(b).shape() != [c_out] {
                    return Err(TensorError::Shape {
                        op: "conv2d bias",
                        lhs: vec![c_out],
                        rhs: self.value(b).shape().to_vec(),
                    });
                }
                inputs.push(b);
                Some(self.value(b).data())
            }
            None => None,
        };
        let out = kernels::conv2d(tx.data(), tw.data(), bias_data, c_out, &geom);
        let (ho, wo) = geom.out_hw();
        let v = Tensor::new(&[c_out, ho, wo], out)?;
        self.push(
            v,
            Op::Conv2d {
                x,
                w: weight,
                b: bias,
                geom,
            },
            &inputs,
        )
    }

    /// `x[c]·gamma[c] + beta[c]` over a CHW tensor.
    pub fn channel_affine(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let tx = self.value(x);
        let (c, h, w) = tx.dims3("channel_affine")?;
        let (tg, tb) = (self.value(gamma), self.value(beta));
        if tg.shape() != [c] || tb.shape() != [c] {
            return Err(TensorError::Shape {
                op: "channel_affine",
                lhs: tx.shape().to_vec(),
                rhs: tg.shape().to_vec(),
            });
        }
        let p = h * w;
        let mut out = tx.data().to_vec();
        for ch in 0..c {
            let (g, b) = (tg.data()[ch], tb.data()[ch]);
            out[ch * p..(ch + 1) * p].iter_mut().for_each(|v| *v = *v * g + b);
        }
        let v = Tensor::new(tx.shape(), out)?;
        self.push(v, Op::ChannelAffine(x, gamma, beta), &[x, gamma, beta])
    }

    /// Nearest-neighbour 2× upsampling of a CHW tensor.
    pub fn upsample2x(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let (c, h, w) = tx.dims3("upsample2x")?;
        let (h2, w2) = (2 * h, 2 * w);
        let mut out = vec![T::zero(); c * h2 * w2];
        for ch in 0..c {
            for y in 0..h2 {
                for xo in 0..w2 {
                    out[(ch * h2 + y) * w2 + xo] = tx.data()[(ch * h + y / 2) * w + xo / 2];
                }
            }
        }
        self.push(Tensor::new(&[c, h2, w2], out)?, Op::Upsample2x(x), &[x])
    }

    /// Concatenate CHW tensors along channels.
    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| TensorError::Contract("concat_channels of nothing".into()))?;
        let (_, h, w) = self.value(*first).dims3("concat_channels")?;
        let mut c_total = 0;
        let mut out = Vec::new();
        for &p in parts {
            let t = self.value(p);
            let (c, ph, pw) = t.dims3("concat_channels")?;
            if (ph, pw) != (h, w) {
                return Err(TensorError::Shape {
                    op: "concat_channels",
                    lhs: self.value(*first).shape().to_vec(),
                    rhs: t.shape().to_vec(),
                });
            }
            c_total += c;
            out.extend_from_slice(t.data());
        }
        let v = Tensor::new(&[c_total, h, w], out)?;
        self.push(v, Op::Concat(parts.to_vec()), parts)
    }

    /// Zero-pad a CHW tensor at the bottom and right to `h×w`.
    pub fn pad2d(&mut self, x: Var, h: usize, w: usize) -> Result<Var> {
        let tx = self.value(x);
        let (c, sh, sw) = tx.dims3("pad2d")?;
        if h < sh || w < sw {
            return Err(TensorError::Shape {
                op: "pad2d",
                lhs: tx.shape().to_vec(),
                rhs: vec![c, h, w],
            });
        }
        let mut out = vec![T::zero(); c * h * w];
        for ch in 0..c {
            for y in 0..sh {
                out[(ch * h + y) * w..][..sw].copy_from_slice(&tx.data()[(ch * sh + y) * sw..][..sw]);
            }
        }
        self.push(Tensor::new(&[c, h, w], out)?, Op::Pad2d(x), &[x])
    }

    /// Keep the top-left `h×w` window of a CHW tensor.
    pub fn crop2d(&mut self, x: Var, h: usize, w: usize) -> Result<Var> {
        let tx = self.value(x);
        let (c, sh, sw) = tx.dims3("crop2d")?;
        if h > sh || w > sw {
            return Err(TensorError::Shape {
                op: "crop2d",
                lhs: tx.shape().to_vec(),
                rhs: vec![c, h, w],
            });
        }
        let mut out = vec![T::zero(); c * h * w];
        for ch in 0..c {
            for y in 0..h {
                out[(ch * h + y) * w..][..w].copy_from_slice(&tx.data()[(ch * sh + y) * sw..][..w]);
            }
        }
        self.push(Tensor::new(&[c, h, w], out)?, Op::Crop2d(x), &[x])
    }

    /// Record an op computed outside the tape with a caller-provided backward rule.
    pub fn custom(&mut self, inputs: &[Var], value: Tensor<T>, backward: BackwardFn<T>) -> Result<Var> {
        self.push(value, Op::Custom(inputs.to_vec(), backward), inputs)
    }

    /// Reverse sweep from a scalar `loss`. Allowed once per recording.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(TensorError::Contract(
                "backward already ran on this tape; reset it first".into(),
            ));
        }
        if self.value(loss).len() != 1 {
            return Err(TensorError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        self.backward_done = true;
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        let shape = self.value(loss).shape().to_vec();
        self.grads[loss.0] = Some(Tensor::full(&shape, T::one()));
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            let contributions = self.input_grads(i, &g)?;
            self.grads[i] = Some(g);
            for (v, dg) in contributions {
                if !self.nodes[v.0].requires_grad {
                    continue;
                }
                match &mut self.grads[v.0] {
                    Some(acc) => {
                        for (a, d) in acc.data_mut().iter_mut().zip(dg.data()) {
                            *a += *d;
                        }
                    }
                    slot @ None => *slot = Some(dg),
                }
            }
        }
        Ok(())
    }

    fn input_grads(&self, i: usize, g: &Tensor<T>) -> Result<Vec<(Var, Tensor<T>)>> {
        let node = &self.nodes[i];
        let y = &node.value;
        let val = |v: Var| &self.nodes[v.0].value;
        let need = |v: Var| self.nodes[v.0].requires_grad;
        let like = |v: Var, data: Vec<T>| Tensor::new(val(v).shape(), data);
        let gd = g.data();
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                out.push((*a, g.clone()));
                out.push((*b, g.clone()));
            }
            Op::Sub(a, b) => {
                out.push((*a, g.clone()));
                out.push((*b, g.map(|v| -v)));
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                if need(*a) {
                    let d = gd.iter().zip(tb.data()).map(|(&g, &y)| g * y).collect();
                    out.push((*a, like(*a, d)?));
                }
                if need(*b) {
                    let d = gd.iter().zip(ta.data()).map(|(&g, &x)| g * x).collect();
                    out.push((*b, like(*b, d)?));
                }
            }
            Op::Scale(a, c) => out.push((*a, g.map(|v| v * *c))),
            Op::Relu(a) => {
                let d = gd
                    .iter()
                    .zip(val(*a).data())
                    .map(|(&g, &x)| if x > T::zero() { g } else { T::zero() })
                    .collect();
                out.push((*a, like(*a, d)?));
            }
            Op::Gelu(a) => {
                let d = gd
                    .iter()
                    .zip(val(*a).data())
                    .map(|(&g, &x)| g * kernels::gelu_grad(x))
                    .collect();
                out.push((*a, like(*a, d)?));
            }
            Op::Sigmoid(a) => {
                let d = gd.iter().zip(y.data()).map(|(&g, &s)| g * s * (T::one() - s)).collect();
                out.push((*a, like(*a, d)?));
            }
            Op::Sum(a) => out.push((*a, Tensor::full(val(*a).shape(), gd[0]))),
            Op::Mean(a) => {
                let n = val(*a).len().max(1);
                out.push((*a, Tensor::full(val(*a).shape(), gd[0] / T::of(n as f64))));
            }
            Op::Reshape(a) => out.push((*a, like(*a, gd.to_vec())?)),
            Op::Transpose(a) => {
                let (r, c) = val(*a).dims2("transpose")?;
                out.push((*a, like(*a, kernels::transpose(gd, c, r))?));
            }
            Op::MatMul(a, b) => {
                let (m, k) = val(*a).dims2("matmul")?;
                let (_, n) = val(*b).dims2("matmul")?;
                if need(*a) {
                    let mut d = vec![T::zero(); m * k];
                    kernels::gemm(m, n, k, gd, false, val(*b).data(), true, &mut d, false);
                    out.push((*a, like(*a, d)?));
                }
                if need(*b) {
                    let mut d = vec![T::zero(); k * n];
                    kernels::gemm(k, m, n, val(*a).data(), true, gd, false, &mut d, false);
                    out.push((*b, like(*b, d)?));
                }
            }
            Op::Linear(x, w, b) => {
                let (n, a) = val(*x).dims2("linear")?;
                let (_, bo) = val(*w).dims2("linear")?;
                if need(*x) {
                    let mut d = vec![T::zero(); n * a];
                    kernels::gemm(n, bo, a, gd, false, val(*w).data(), true, &mut d, false);
                    out.push((*x, like(*x, d)?));
                }
                if need(*w) {
                    let mut d = vec![T::zero(); a * bo];
                    kernels::gemm(a, n, bo, val(*x).data(), true, gd, false, &mut d, false);
                    out.push((*w, like(*w, d)?));
                }
                if let Some(b) = b {
                    if need(*b) {
                        let mut d = vec![T::zero(); bo];
                        for row in gd.chunks_exact(bo.max(1)) {
                            for (acc, &v) in d.iter_mut().zip(row) {
                                *acc += v;
                            }
                        }
                        out.push((*b, like(*b, d)?));
                    }
                }
            }
            Op::GatherRows(src, index) => {
                let (m, f) = val(*src).dims2("gather_rows")?;
                let d = kernels::scatter_sum(gd, f, index, m)?;
                out.push((*src, like(*src, d)?));
            }
            Op::ScatterSum(src, segment_of) => {
                let (_, f) = val(*src).dims2("scatter_sum")?;
                let d = kernels::gather_rows(gd, f, segment_of)?;
                out.push((*src, like(*src, d)?));
            }
            Op::SegSoftmax(src, segment_of) => {
                let cols = if y.ndim() == 2 { y.shape()[1] } else { 1 };
                let d = kernels::segmented_softmax_backward(y.data(), gd, cols, segment_of);
                out.push((*src, like(*src, d)?));
            }
            Op::RowOuter(a, b) => {
                let (n, k) = val(*a).dims2("row_outer")?;
                let (_, d) = val(*b).dims2("row_outer")?;
                let (ta, tb) = (val(*a).data(), val(*b).data());
                let mut da = vec![T::zero(); n * k];
                let mut db = vec![T::zero(); n * d];
                for i in 0..n {
                    for j in 0..k {
                        let grow = &gd[(i * k + j) * d..(i * k + j + 1) * d];
                        let brow = &tb[i * d..(i + 1) * d];
                        da[i * k + j] = grow.iter().zip(brow).map(|(&x, &y)| x * y).sum();
                        let s = ta[i * k + j];
                        for (acc, &gv) in db[i * d..(i + 1) * d].iter_mut().zip(grow) {
                            *acc += s * gv;
                        }
                    }
                }
                out.push((*a, like(*a, da)?));
                out.push((*b, like(*b, db)?));
            }
            Op::SlotScores(q, keys) => {
                let (n, d) = val(*q).dims2("slot_scores")?;
                let k = if n == 0 { 0 } else { y.shape()[1] };
                let (tq, tk) = (val(*q).data(), val(*keys).data());
                let mut dq = vec![T::zero(); n * d];
                let mut dk = vec![T::zero(); tk.len()];
                for i in 0..n {
                    for j in 0..k {
                        let gv = gd[i * k + j];
                        let r = (i * k + j) * d;
                        for t in 0..d {
                            dq[i * d + t] += gv * tk[r + t];
                            dk[r + t] = gv * tq[i * d + t];
                        }
                    }
                }
                out.push((*q, like(*q, dq)?));
                out.push((*keys, like(*keys, dk)?));
            }
            Op::SlotMix(w, v) => {
                let (n, k) = val(*w).dims2("slot_mix")?;
                let (_, d) = val(*v).dims2("slot_mix")?;
                let (tw, tv) = (val(*w).data(), val(*v).data());
                let mut dw = vec![T::zero(); n * k];
                let mut dv = vec![T::zero(); tv.len()];
                for i in 0..n {
                    let grow = &gd[i * d..(i + 1) * d];
                    for j in 0..k {
                        let r = (i * k + j) * d;
                        dw[i * k + j] = grow.iter().zip(&tv[r..r + d]).map(|(&x, &y)| x * y).sum();
                        let wv = tw[i * k + j];
                        for (acc, &gv) in dv[r..r + d].iter_mut().zip(grow) {
                            *acc = wv * gv;
                        }
                    }
                }
                out.push((*w, like(*w, dw)?));
                out.push((*v, like(*v, dv)?));
            }
            Op::DwConv(x, kern) => {
                let dims = val(*x).dims3("depthwise_conv2d")?;
                let (_, kh, kw) = val(*kern).dims3("depthwise_conv2d")?;
                let (dx, dk) =
                    kernels::depthwise_conv2d_backward(val(*x).data(), dims, val(*kern).data(), (kh, kw), gd);
                out.push((*x, like(*x, dx)?));
                out.push((*kern, like(*kern, dk)?));
            }
            Op::Conv2d { x, w, b, geom } => {
                let c_out = val(*w).shape()[0];
                let (dx, dw, db) = kernels::conv2d_backward(val(*x).data(), val(*w).data(), c_out, geom, gd);
                out.push((*x, like(*x, dx)?));
                out.push((*w, like(*w, dw)?));
                if let Some(b) = b {
                    out.push((*b, like(*b, db)?));
                }
            }
            Op::ChannelAffine(x, gamma, beta) => {
                let (c, h, w) = val(*x).dims3("channel_affine")?;
                let p = h * w;
                let (tx, tg) = (val(*x).data(), val(*gamma).data());
                let mut dx = vec![T::zero(); c * p];
                let mut dg = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                for ch in 0..c {
                    let gs = &gd[ch * p..(ch + 1) * p];
                    let xs = &tx[ch * p..(ch + 1) * p];
                    for (j, (&gv, &xv)) in gs.iter().zip(xs).enumerate() {
                        dx[ch * p + j] = gv * tg[ch];
                        dg[ch] += gv * xv;
                        dbeta[ch] += gv;
                    }
                }
                out.push((*x, like(*x, dx)?));
                out.push((*gamma, like(*gamma, dg)?));
                out.push((*beta, like(*beta, dbeta)?));
            }
            Op::Upsample2x(x) => {
                let (c, h, w) = val(*x).dims3("upsample2x")?;
                let (h2, w2) = (2 * h, 2 * w);
                let mut d = vec![T::zero(); c * h * w];
                for ch in 0..c {
                    for yy in 0..h2 {
                        for xx in 0..w2 {
                            d[(ch * h + yy / 2) * w + xx / 2] += gd[(ch * h2 + yy) * w2 + xx];
                        }
                    }
                }
                out.push((*x, like(*x, d)?));
            }
            Op::Concat(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = val(p).len();
                    out.push((p, like(p, gd[offset..offset + n].to_vec())?));
                    offset += n;
                }
            }
            Op::Pad2d(x) => {
                let (c, sh, sw) = val(*x).dims3("pad2d")?;
                let (h, w) = (y.shape()[1], y.shape()[2]);
                let mut d = vec![T::zero(); c * sh * sw];
                for ch in 0..c {
                    for yy in 0..sh {
                        d[(ch * sh + yy) * sw..][..sw].copy_from_slice(&gd[(ch * h + yy) * w..][..sw]);
                    }
                }
                out.push((*x, like(*x, d)?));
            }
            Op::Crop2d(x) => {
                let (c, sh, sw) = val(*x).dims3("crop2d")?;
                let (h, w) = (y.shape()[1], y.shape()[2]);
                let mut d = vec![T::zero(); c * sh * sw];
                for ch in 0..c {
                    for yy in 0..h {
                        d[(ch * sh + yy) * sw..][..w].copy_from_slice(&gd[(ch * h + yy) * w..][..w]);
                    }
                }
                out.push((*x, like(*x, d)?));
            }
            Op::Custom(inputs, rule) => {
                let vals: Vec<&Tensor<T>> = inputs.iter().map(|&v| val(v)).collect();
                let grads = rule(&vals, y, g);
                if grads.len() != inputs.len() {
                    return Err(TensorError::Contract(format!(
                        "custom backward returned {} grads for {} inputs",
                        grads.len(),
                        inputs.len()
                    )));
                }
                for (&v, dg) in inputs.iter().zip(grads) {
                    if dg.shape() != val(v).shape() {
                        return Err(TensorError::Shape {
                            op: "custom backward",
                            lhs: val(v).shape().to_vec(),
                            rhs: dg.shape().to_vec(),
                        });
                    }
                    out.push((v, dg));
                }
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_gradient() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::scalar(3.0), true);
        let y = tape.mul(x, x).unwrap();
        tape.backward(y).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[6.0]);
    }

    #[test]
    fn product_gradient() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::scalar(2.0), true);
        let y = tape.leaf(Tensor::scalar(5.0), true);
        let z = tape.mul(x, y).unwrap();
        tape.backward(z).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[5.0]);
        assert_eq!(tape.grad(y).unwrap().data(), &[2.0]);
    }

    #[test]
    fn fan_out_accumulates() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::scalar(1.25), true);
        let y = tape.add(x, x).unwrap();
        tape.backward(y).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[2.0]);
    }

    #[test]
    fn backward_twice_is_an_error() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::scalar(1.0), true);
        let y = tape.scale(x, 2.0).unwrap();
        tape.backward(y).unwrap();
        assert!(matches!(tape.backward(y), Err(TensorError::Contract(_))));
        tape.reset();
        let x = tape.leaf(Tensor::scalar(1.0), true);
        let y = tape.scale(x, 2.0).unwrap();
        tape.backward(y).unwrap();
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::zeros(&[2]), true);
        assert!(matches!(tape.backward(x), Err(TensorError::Contract(_))));
    }

    #[test]
    fn linear_shape_error_names_both_shapes() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::zeros(&[2, 3]));
        let w = tape.constant(Tensor::zeros(&[4, 2]));
        let err = tape.linear(x, w, None).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[4, 2]"), "{msg}");
    }

    #[test]
    fn linear_examples() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::from_f64(&[1, 2], &[1.0, 2.0]).unwrap());
        let w = tape.constant(Tensor::from_f64(&[2, 2], &[1.0, 0.0, 0.0, 1.0]).unwrap());
        let b = tape.constant(Tensor::zeros(&[2]));
        let y = tape.linear(x, w, Some(b)).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, 2.0]);

        let x = tape.constant(Tensor::from_f64(&[1, 1], &[1.0]).unwrap());
        let w = tape.constant(Tensor::from_f64(&[1, 1], &[3.0]).unwrap());
        let b = tape.constant(Tensor::from_f64(&[1], &[1.0]).unwrap());
        let y = tape.linear(x, w, Some(b)).unwrap();
        assert_eq!(tape.value(y).data(), &[4.0]);
    }

    #[test]
    fn even_depthwise_kernel_is_config_error() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::zeros(&[1, 4, 4]));
        let k = tape.constant(Tensor::zeros(&[1, 2, 3]));
        assert!(matches!(tape.depthwise_conv2d(x, k), Err(TensorError::Config(_))));
    }

    #[test]
    fn scatter_sum_index_error() {
        let mut tape = Tape::<f64>::new();
        let v = tape.constant(Tensor::zeros(&[2, 1]));
        let err = tape.scatter_sum(v, Arc::from(vec![0, 3]), 2).unwrap_err();
        assert!(matches!(err, TensorError::Index { index: 3, bound: 2, .. }));
    }

    #[test]
    fn finite_check_flags_overflow() {
        let mut tape = Tape::<f64>::new().with_finite_checks(true);
        let x = tape.constant(Tensor::scalar(f64::MAX));
        assert!(tape.scale(x, 10.0).is_err());
    }

    #[test]
    fn empty_inputs_flow_through() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::zeros(&[0, 4]), true);
        let w = tape.leaf(Tensor::zeros(&[4, 3]), true);
        let y = tape.linear(x, w, None).unwrap();
        assert_eq!(tape.value(y).shape(), &[0, 3]);
        let s = tape.segmented_softmax(y, Arc::from(Vec::new())).unwrap();
        assert!(tape.value(s).is_empty());
        let m = tape.mean(s).unwrap();
        tape.backward(m).unwrap();
        assert_eq!(tape.grad(w).unwrap().data(), &[0.0; 12]);
    }
}
