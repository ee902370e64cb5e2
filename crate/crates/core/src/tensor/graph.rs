use rand::Rng;

use super::{numel, shape_err, Scalar, Tensor, TensorError};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum NormAxis {
    /// Over the last axis (layer norm).
    Last,
    /// Over the time axis of a `[T × C]` matrix (batch norm style).
    Time,
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    Add {
        a: Var,
        b: Var,
    },
    Sub {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        a: Var,
        c: T,
    },
    Permute {
        a: Var,
        src_index: Vec<usize>,
    },
    Reshape {
        a: Var,
    },
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    Slice {
        a: Var,
        axis: usize,
        start: usize,
    },
    Pad {
        a: Var,
        axis: usize,
        before: usize,
    },
    Softmax {
        a: Var,
    },
    LogSoftmax {
        a: Var,
    },
    Norm {
        x: Var,
        gain: Var,
        bias: Var,
        axis: NormAxis,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    Relu {
        a: Var,
    },
    Swish {
        a: Var,
    },
    Sigmoid {
        a: Var,
    },
    Glu {
        a: Var,
    },
    Conv1d {
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        padding: usize,
    },
    Depthwise {
        x: Var,
        w: Var,
        b: Var,
        padding: usize,
    },
    Dropout {
        a: Var,
        mask: Vec<T>,
    },
    Sum {
        a: Var,
    },
    Mean {
        a: Var,
    },
    MeanPool {
        a: Var,
        k: usize,
    },
    Repeat {
        a: Var,
        k: usize,
    },
    Precomputed {
        a: Var,
        grad: Vec<T>,
    },
}

/// Reverse-mode tape. Nodes are appended in evaluation order, so reverse
/// index order is a valid reverse topological order.
#[derive(Debug)]
pub struct Graph<T: Scalar> {
    values: Vec<Tensor<T>>,
    ops: Vec<Op<T>>,
    tracked: Vec<bool>,
    recording: bool,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Graph::backward`], indexed by node.
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn sigmoid<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

fn suffix_repeats(op: &'static str, a: &[usize], b: &[usize]) -> Result<usize, TensorError> {
    if b.len() > a.len() || a[a.len() - b.len()..] != *b || numel(b) == 0 {
        return Err(shape_err(op, format!("{a:?} vs {b:?}: second operand must match trailing axes")));
    }
    Ok(numel(a) / numel(b))
}

/// `src[i]` is the source linear index of output element `i`.
fn permute_index(shape: &[usize], axes: &[usize]) -> Vec<usize> {
    let rank = shape.len();
    let mut in_strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let total = numel(shape);
    let mut counter = vec![0usize; rank];
    let mut src = Vec::with_capacity(total);
    let mut offset = 0usize;
    for _ in 0..total {
        src.push(offset);
        for ax in (0..rank).rev() {
            counter[ax] += 1;
            offset += strides[ax];
            if counter[ax] < out_shape[ax] {
                break;
            }
            offset -= strides[ax] * counter[ax];
            counter[ax] = 0;
        }
    }
    src
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (
        shape[..axis].iter().product(),
        shape[axis],
        shape[axis + 1..].iter().product(),
    )
}

fn im2col<T: Scalar>(
    x: &[T],
    t_in: usize,
    c_in: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
    t_out: usize,
) -> Vec<T> {
    let width = c_in * kernel;
    let mut cols = vec![T::zero(); t_out * width];
    for t in 0..t_out {
        for k in 0..kernel {
            let src = (t * stride + k) as isize - padding as isize;
            if src < 0 || src as usize >= t_in {
                continue;
            }
            let row = &x[src as usize * c_in..(src as usize + 1) * c_in];
            for (c, &v) in row.iter().enumerate() {
                cols[t * width + c * kernel + k] = v;
            }
        }
    }
    cols
}

impl<T: Scalar> Graph<T> {
    /// A graph that records operations for differentiation.
    pub fn new() -> Self {
        Self {
            values: Vec::new(),
            ops: Vec::new(),
            tracked: Vec::new(),
            recording: true,
        }
    }

    /// A graph that only evaluates values; nothing is differentiable.
    pub fn inference() -> Self {
        Self {
            recording: false,
            ..Self::new()
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.values[v.0]
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.values[v.0].shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.tracked[v.0]
    }

    /// Moves a node's value out, leaving an empty placeholder.
    pub fn take_value(&mut self, v: Var) -> Tensor<T> {
        std::mem::replace(&mut self.values[v.0], Tensor::zeros(&[0]))
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, tracked: bool) -> Var {
        self.values.push(value);
        self.ops.push(if tracked { op } else { Op::Leaf });
        self.tracked.push(tracked);
        Var(self.values.len() - 1)
    }

    fn track(&self, inputs: &[Var]) -> bool {
        self.recording && inputs.iter().any(|v| self.tracked[v.0])
    }

    /// Leaf node. `requires_grad` is ignored on a non-recording graph.
    pub fn leaf(&mut self, mut value: Tensor<T>, requires_grad: bool) -> Var {
        let tracked = requires_grad && self.recording;
        value.set_requires_grad(tracked);
        self.push(value, Op::Leaf, tracked)
    }

    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    /// Matrix product of `[m×k]·[k×n]`, or batched `[B×m×k]·[B×k×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let (batch, m, k, n) = match (sa.as_slice(), sb.as_slice()) {
            ([m, k], [k2, n]) if k == k2 => (1, *m, *k, *n),
            ([b1, m, k], [b2, k2, n]) if b1 == b2 && k == k2 => (*b1, *m, *k, *n),
            _ => return Err(shape_err("matmul", format!("{sa:?} x {sb:?}"))),
        };
        let mut out = vec![T::zero(); batch * m * n];
        let (da, db) = (self.values[a.0].data(), self.values[b.0].data());
        for i in 0..batch {
            T::gemm(
                m,
                k,
                n,
                T::one(),
                &da[i * m * k..(i + 1) * m * k],
                (k as isize, 1),
                &db[i * k * n..(i + 1) * k * n],
                (n as isize, 1),
                T::zero(),
                &mut out[i * m * n..(i + 1) * m * n],
                (n as isize, 1),
            );
        }
        let shape: Vec<usize> = if sa.len() == 2 { vec![m, n] } else { vec![batch, m, n] };
        let tracked = self.track(&[a, b]);
        Ok(self.push(
            Tensor::new(&shape, out)?,
            Op::MatMul { a, b, batch, m, k, n },
            tracked,
        ))
    }

    fn broadcast_binary(
        &mut self,
        op_name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
        make: impl FnOnce(Var, Var) -> Op<T>,
    ) -> Result<Var, TensorError> {
        suffix_repeats(op_name, self.shape(a), self.shape(b))?;
        let da = self.values[a.0].data();
        let db = self.values[b.0].data();
        let nb = db.len();
        let out: Vec<T> = da.iter().enumerate().map(|(i, &x)| f(x, db[i % nb])).collect();
        let shape = self.shape(a).to_vec();
        let tracked = self.track(&[a, b]);
        Ok(self.push(Tensor::new(&shape, out)?, make(a, b), tracked))
    }

    /// `a + b`, where `b`'s shape equals `a`'s or a trailing part of it.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.broadcast_binary("add", a, b, |x, y| x + y, |a, b| Op::Add { a, b })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.broadcast_binary("sub", a, b, |x, y| x - y, |a, b| Op::Sub { a, b })
    }

    /// Elementwise product, broadcasting like [`Graph::add`].
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.broadcast_binary("mul", a, b, |x, y| x * y, |a, b| Op::Mul { a, b })
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let t = &self.values[a.0];
        let out = Tensor::new(t.shape(), t.data().iter().map(|&x| x * c).collect())
            .expect("same shape");
        let tracked = self.track(&[a]);
        self.push(out, Op::Scale { a, c }, tracked)
    }

    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Result<Var, TensorError> {
        let shape = self.shape(a).to_vec();
        let mut seen = vec![false; shape.len()];
        if axes.len() != shape.len() || axes.iter().any(|&ax| ax >= shape.len() || std::mem::replace(&mut seen[ax], true)) {
            return Err(shape_err("permute", format!("axes {axes:?} for shape {shape:?}")));
        }
        let src_index = permute_index(&shape, axes);
        let data = self.values[a.0].data();
        let out: Vec<T> = src_index.iter().map(|&i| data[i]).collect();
        let out_shape: Vec<usize> = axes.iter().map(|&ax| shape[ax]).collect();
        let tracked = self.track(&[a]);
        Ok(self.push(Tensor::new(&out_shape, out)?, Op::Permute { a, src_index }, tracked))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, a: Var) -> Result<Var, TensorError> {
        let rank = self.shape(a).len();
        if rank < 2 {
            return Err(shape_err("transpose", format!("rank {rank}")));
        }
        let mut axes: Vec<usize> = (0..rank).collect();
        axes.swap(rank - 2, rank - 1);
        self.permute(a, &axes)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var, TensorError> {
        let out = self.values[a.0].clone().reshaped(shape)?;
        let tracked = self.track(&[a]);
        Ok(self.push(out, Op::Reshape { a }, tracked))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var, TensorError> {
        let first = parts
            .first()
            .map(|&v| self.shape(v).to_vec())
            .ok_or_else(|| shape_err("concat", "no inputs"))?;
        if axis >= first.len() {
            return Err(shape_err("concat", format!("axis {axis} for rank {}", first.len())));
        }
        let mut extent = 0;
        for &p in parts {
            let s = self.shape(p);
            let agrees = s.len() == first.len()
                && s.iter().zip(&first).enumerate().all(|(i, (x, y))| i == axis || x == y);
            if !agrees {
                return Err(shape_err("concat", format!("{s:?} vs {first:?} off axis {axis}")));
            }
            extent += s[axis];
        }
        let (outer, _, inner) = split_axis(&first, axis);
        let mut out = Vec::with_capacity(outer * extent * inner);
        for o in 0..outer {
            for &p in parts {
                let ext = self.shape(p)[axis];
                let d = self.values[p.0].data();
                out.extend_from_slice(&d[o * ext * inner..(o + 1) * ext * inner]);
            }
        }
        let mut shape = first;
        shape[axis] = extent;
        let tracked = self.track(parts);
        Ok(self.push(
            Tensor::new(&shape, out)?,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            tracked,
        ))
    }

    /// Elements `start..end` along `axis`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, end: usize) -> Result<Var, TensorError> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() || start >= end || end > shape[axis] {
            return Err(shape_err("slice", format!("{start}..{end} on axis {axis} of {shape:?}")));
        }
        let (outer, ext, inner) = split_axis(&shape, axis);
        let d = self.values[a.0].data();
        let mut out = Vec::with_capacity(outer * (end - start) * inner);
        for o in 0..outer {
            out.extend_from_slice(&d[(o * ext + start) * inner..(o * ext + end) * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = end - start;
        let tracked = self.track(&[a]);
        Ok(self.push(Tensor::new(&out_shape, out)?, Op::Slice { a, axis, start }, tracked))
    }

    /// Zero padding along `axis`.
    pub fn pad(&mut self, a: Var, axis: usize, before: usize, after: usize) -> Result<Var, TensorError> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(shape_err("pad", format!("axis {axis} for {shape:?}")));
        }
        let (outer, ext, inner) = split_axis(&shape, axis);
        let new_ext = ext + before + after;
        let d = self.values[a.0].data();
        let mut out = vec![T::zero(); outer * new_ext * inner];
        for o in 0..outer {
            let dst = (o * new_ext + before) * inner;
            out[dst..dst + ext * inner].copy_from_slice(&d[o * ext * inner..(o + 1) * ext * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = new_ext;
        let tracked = self.track(&[a]);
        Ok(self.push(Tensor::new(&out_shape, out)?, Op::Pad { a, axis, before }, tracked))
    }

    fn last_axis(&self, op: &'static str, a: Var) -> Result<usize, TensorError> {
        match self.shape(a).last() {
            Some(&d) if d > 0 => Ok(d),
            _ => Err(shape_err(op, format!("needs a non-empty last axis, got {:?}", self.shape(a)))),
        }
    }

    pub fn softmax(&mut self, a: Var) -> Result<Var, TensorError> {
        let d = self.last_axis("softmax", a)?;
        let mut out = self.values[a.0].data().to_vec();
        for row in out.chunks_mut(d) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut total = T::zero();
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                total = total + *v;
            }
            row.iter_mut().for_each(|v| *v = *v / total);
        }
        let shape = self.shape(a).to_vec();
        let tracked = self.track(&[a]);
        Ok(self.push(Tensor::new(&shape, out)?, Op::Softmax { a }, tracked))
    }

    pub fn log_softmax(&mut self, a: Var) -> Result<Var, TensorError> {
        let d = self.last_axis("log_softmax", a)?;
        let mut out = self.values[a.0].data().to_vec();
        for row in out.chunks_mut(d) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<T>().ln();
            row.iter_mut().for_each(|v| *v = *v - lse);
        }
        let shape = self.shape(a).to_vec();
        let tracked = self.track(&[a]);
        Ok(self.push(Tensor::new(&shape, out)?, Op::LogSoftmax { a }, tracked))
    }

    fn normalize(
        &mut self,
        op: &'static str,
        x: Var,
        gain: Var,
        bias: Var,
        eps: T,
        axis: NormAxis,
    ) -> Result<Var, TensorError> {
        let shape = self.shape(x).to_vec();
        let (groups, len, stride, width) = match axis {
            NormAxis::Last => {
                let d = self.last_axis(op, x)?;
                (numel(&shape) / d, d, 1, d)
            }
            NormAxis::Time => match shape.as_slice() {
                [t, c] if *t > 0 => (*c, *t, *c, *c),
                _ => return Err(shape_err(op, format!("expects [T x C], got {shape:?}"))),
            },
        };
        for p in [gain, bias] {
            if self.shape(p) != [width] {
                return Err(shape_err(op, format!("affine shape {:?}, expected [{width}]", self.shape(p))));
            }
        }
        let xd = self.values[x.0].data();
        let (gd, bd) = (self.values[gain.0].data(), self.values[bias.0].data());
        let n = T::from_usize(len).unwrap();
        let mut out = vec![T::zero(); xd.len()];
        let mut xhat = vec![T::zero(); xd.len()];
        let mut inv_std = vec![T::zero(); groups];
        for g in 0..groups {
            let at = |j: usize| match axis {
                NormAxis::Last => g * len + j,
                NormAxis::Time => j * stride + g,
            };
            let mean = (0..len).map(|j| xd[at(j)]).sum::<T>() / n;
            let var = (0..len).map(|j| (xd[at(j)] - mean).powi(2)).sum::<T>() / n;
            let inv = T::one() / (var + eps).sqrt();
            inv_std[g] = inv;
            for j in 0..len {
                let i = at(j);
                let p = match axis {
                    NormAxis::Last => j,
                    NormAxis::Time => g,
                };
                xhat[i] = (xd[i] - mean) * inv;
                out[i] = xhat[i] * gd[p] + bd[p];
            }
        }
        let tracked = self.track(&[x, gain, bias]);
        let (xhat, inv_std) = if tracked { (xhat, inv_std) } else { (Vec::new(), Vec::new()) };
        Ok(self.push(
            Tensor::new(&shape, out)?,
            Op::Norm {
                x,
                gain,
                bias,
                axis,
                xhat,
                inv_std,
            },
            tracked,
        ))
    }

    /// Normalizes over the last axis, then applies `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: T) -> Result<Var, TensorError> {
        self.normalize("layer_norm", x, gain, bias, eps, NormAxis::Last)
    }

    /// Per-channel normalization of `[T × C]` over time, using the statistics
    /// of the sequence itself.
    pub fn batch_norm_1d(&mut self, x: Var, gain: Var, bias: Var, eps: T) -> Result<Var, TensorError> {
        self.normalize("batch_norm_1d", x, gain, bias, eps, NormAxis::Time)
    }

    fn unary(&mut self, a: Var, f: impl Fn(T) -> T, make: impl FnOnce(Var) -> Op<T>) -> Var {
        let t = &self.values[a.0];
        let out = Tensor::new(t.shape(), t.data().iter().map(|&x| f(x)).collect()).expect("same shape");
        let tracked = self.track(&[a]);
        self.push(out, make(a), tracked)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(T::zero()), |a| Op::Relu { a })
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, |a| Op::Sigmoid { a })
    }

    /// `x · sigmoid(x)`.
    pub fn swish(&mut self, a: Var) -> Var {
        self.unary(a, |x| x * sigmoid(x), |a| Op::Swish { a })
    }

    /// Splits the last axis into halves `(u, v)` and returns `u · sigmoid(v)`.
    pub fn glu(&mut self, a: Var) -> Result<Var, TensorError> {
        let shape = self.shape(a).to_vec();
        let d = self.last_axis("glu", a)?;
        if d % 2 != 0 {
            return Err(shape_err("glu", format!("odd last axis {d}")));
        }
        let h = d / 2;
        let data = self.values[a.0].data();
        let mut out = Vec::with_capacity(data.len() / 2);
        for row in data.chunks(d) {
            out.extend(row[..h].iter().zip(&row[h..]).map(|(&u, &v)| u * sigmoid(v)));
        }
        let mut out_shape = shape;
        *out_shape.last_mut().unwrap() = h;
        let tracked = self.track(&[a]);
        Ok(self.push(Tensor::new(&out_shape, out)?, Op::Glu { a }, tracked))
    }

    /// Convolution over time: `x [T × C_in]`, `w [C_out × C_in × K]`,
    /// `b [C_out]`, giving `[(T + 2·padding − K)/stride + 1 × C_out]`.
    pub fn conv1d(
        &mut self,
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        padding: usize,
    ) -> Result<Var, TensorError> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        let (t_in, c_in, c_out, kernel) = match (sx.as_slice(), sw.as_slice()) {
            ([t, c], [o, c2, k]) if c == c2 && *k > 0 => (*t, *c, *o, *k),
            _ => return Err(shape_err("conv1d", format!("input {sx:?}, weight {sw:?}"))),
        };
        if self.shape(b) != [c_out] {
            return Err(shape_err("conv1d", format!("bias {:?}, expected [{c_out}]", self.shape(b))));
        }
        if stride == 0 || t_in + 2 * padding < kernel {
            return Err(shape_err("conv1d", format!("time axis {t_in} too short for kernel {kernel}")));
        }
        let t_out = (t_in + 2 * padding - kernel) / stride + 1;
        let cols = im2col(self.values[x.0].data(), t_in, c_in, kernel, stride, padding, t_out);
        let width = c_in * kernel;
        let bias = self.values[b.0].data();
        let mut out: Vec<T> = (0..t_out * c_out).map(|i| bias[i % c_out]).collect();
        T::gemm(
            t_out,
            width,
            c_out,
            T::one(),
            &cols,
            (width as isize, 1),
            self.values[w.0].data(),
            (1, width as isize),
            T::one(),
            &mut out,
            (c_out as isize, 1),
        );
        let tracked = self.track(&[x, w, b]);
        Ok(self.push(
            Tensor::new(&[t_out, c_out], out)?,
            Op::Conv1d {
                x,
                w,
                b,
                stride,
                padding,
            },
            tracked,
        ))
    }

    /// Per-channel convolution over time with stride 1: `x [T × C]`,
    /// `w [C × K]`, `b [C]`.
    pub fn depthwise_conv1d(&mut self, x: Var, w: Var, b: Var, padding: usize) -> Result<Var, TensorError> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        let (t_in, c, kernel) = match (sx.as_slice(), sw.as_slice()) {
            ([t, c], [c2, k]) if c == c2 && *k > 0 => (*t, *c, *k),
            _ => return Err(shape_err("depthwise_conv1d", format!("input {sx:?}, weight {sw:?}"))),
        };
        if self.shape(b) != [c] || t_in + 2 * padding < kernel {
            return Err(shape_err("depthwise_conv1d", format!("bias {:?}, time axis {t_in}", self.shape(b))));
        }
        let t_out = t_in + 2 * padding - kernel + 1;
        let (xd, wd, bd) = (self.values[x.0].data(), self.values[w.0].data(), self.values[b.0].data());
        let mut out: Vec<T> = (0..t_out * c).map(|i| bd[i % c]).collect();
        for t in 0..t_out {
            for k in 0..kernel {
                let src = (t + k) as isize - padding as isize;
                if src < 0 || src as usize >= t_in {
                    continue;
                }
                let src = src as usize;
                for ch in 0..c {
                    out[t * c + ch] = out[t * c + ch] + wd[ch * kernel + k] * xd[src * c + ch];
                }
            }
        }
        let tracked = self.track(&[x, w, b]);
        Ok(self.push(Tensor::new(&[t_out, c], out)?, Op::Depthwise { x, w, b, padding }, tracked))
    }

    /// Inverted dropout with a Bernoulli mask drawn row-major from `rng`.
    /// With `p == 0` the input is returned unchanged.
    pub fn dropout<R: Rng + ?Sized>(&mut self, a: Var, p: f64, rng: &mut R) -> Var {
        if p <= 0.0 {
            return a;
        }
        let keep = T::from_f64_lossy(1.0 / (1.0 - p));
        let t = &self.values[a.0];
        let mask: Vec<T> = (0..t.numel())
            .map(|_| if rng.gen::<f64>() < p { T::zero() } else { keep })
            .collect();
        let out = Tensor::new(t.shape(), t.data().iter().zip(&mask).map(|(&x, &m)| x * m).collect())
            .expect("same shape");
        let tracked = self.track(&[a]);
        self.push(out, Op::Dropout { a, mask }, tracked)
    }

    pub fn reduce_sum(&mut self, a: Var) -> Var {
        let s = self.values[a.0].data().iter().copied().sum::<T>();
        let tracked = self.track(&[a]);
        self.push(Tensor::scalar(s), Op::Sum { a }, tracked)
    }

    pub fn reduce_mean(&mut self, a: Var) -> Var {
        let t = &self.values[a.0];
        let s = t.data().iter().copied().sum::<T>() / T::from_usize(t.numel().max(1)).unwrap();
        let tracked = self.track(&[a]);
        self.push(Tensor::scalar(s), Op::Mean { a }, tracked)
    }

    /// Mean over non-overlapping groups of `k` frames of a `[T × d]` input.
    /// A final partial group is completed by repeating the last frame.
    pub fn mean_pool_frames(&mut self, a: Var, k: usize) -> Result<Var, TensorError> {
        let (t, d) = match self.shape(a) {
            [t, d] if *t > 0 && k > 0 => (*t, *d),
            s => return Err(shape_err("mean_pool_frames", format!("{s:?} with factor {k}"))),
        };
        let t_out = t.div_ceil(k);
        let inv = T::one() / T::from_usize(k).unwrap();
        let x = self.values[a.0].data();
        let mut out = vec![T::zero(); t_out * d];
        for i in 0..t_out {
            for j in 0..k {
                let src = (i * k + j).min(t - 1);
                for c in 0..d {
                    out[i * d + c] = out[i * d + c] + x[src * d + c];
                }
            }
            out[i * d..(i + 1) * d].iter_mut().for_each(|v| *v = *v * inv);
        }
        let tracked = self.track(&[a]);
        Ok(self.push(Tensor::new(&[t_out, d], out)?, Op::MeanPool { a, k }, tracked))
    }

    /// Repeats each frame of `[T′ × d]` `k` times and truncates to `target`
    /// frames. Requires `ceil(target / k) == T′`.
    pub fn repeat_frames(&mut self, a: Var, k: usize, target: usize) -> Result<Var, TensorError> {
        let (t, d) = match self.shape(a) {
            [t, d] => (*t, *d),
            s => return Err(shape_err("repeat_frames", format!("{s:?}"))),
        };
        if k == 0 || target == 0 || target.div_ceil(k) != t {
            return Err(shape_err(
                "repeat_frames",
                format!("{t} frames cannot expand by {k} to {target}"),
            ));
        }
        let x = self.values[a.0].data();
        let mut out = Vec::with_capacity(target * d);
        for i in 0..target {
            out.extend_from_slice(&x[(i / k) * d..(i / k + 1) * d]);
        }
        let tracked = self.track(&[a]);
        Ok(self.push(Tensor::new(&[target, d], out)?, Op::Repeat { a, k }, tracked))
    }

    /// Scalar node whose gradient with respect to `a` was computed alongside
    /// its value (used by losses with closed-form adjoints).
    pub fn scalar_with_gradient(&mut self, a: Var, value: T, grad: Vec<T>) -> Result<Var, TensorError> {
        if grad.len() != self.values[a.0].numel() {
            return Err(shape_err("scalar_with_gradient", "gradient length differs from input"));
        }
        let tracked = self.track(&[a]);
        Ok(self.push(Tensor::scalar(value), Op::Precomputed { a, grad }, tracked))
    }

    /// Reverse sweep from a single-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>, TensorError> {
        if self.values[loss.0].numel() != 1 {
            return Err(TensorError::NonScalarLoss(self.shape(loss).to_vec()));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            if !self.tracked[i] {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn slot<'a>(&self, grads: &'a mut [Option<Vec<T>>], v: Var) -> Option<&'a mut Vec<T>> {
        if !self.tracked[v.0] {
            return None;
        }
        let len = self.values[v.0].numel();
        Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); len]))
    }

    fn backprop(&self, node: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let out = self.values[node].data();
        match &self.ops[node] {
            Op::Leaf => {}
            Op::MatMul { a, b, batch, m, k, n } => {
                let (m, k, n) = (*m, *k, *n);
                let (da, db) = (self.values[a.0].data(), self.values[b.0].data());
                if let Some(ga) = self.slot(grads, *a) {
                    for i in 0..*batch {
                        T::gemm(
                            m,
                            n,
                            k,
                            T::one(),
                            &g[i * m * n..(i + 1) * m * n],
                            (n as isize, 1),
                            &db[i * k * n..(i + 1) * k * n],
                            (1, n as isize),
                            T::one(),
                            &mut ga[i * m * k..(i + 1) * m * k],
                            (k as isize, 1),
                        );
                    }
                }
                if let Some(gb) = self.slot(grads, *b) {
                    for i in 0..*batch {
                        T::gemm(
                            k,
                            m,
                            n,
                            T::one(),
                            &da[i * m * k..(i + 1) * m * k],
                            (1, k as isize),
                            &g[i * m * n..(i + 1) * m * n],
                            (n as isize, 1),
                            T::one(),
                            &mut gb[i * k * n..(i + 1) * k * n],
                            (n as isize, 1),
                        );
                    }
                }
            }
            Op::Add { a, b } | Op::Sub { a, b } => {
                let negate = matches!(self.ops[node], Op::Sub { .. });
                if let Some(ga) = self.slot(grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(x, &y)| *x = *x + y);
                }
                if let Some(gb) = self.slot(grads, *b) {
                    let nb = gb.len();
                    for (i, &y) in g.iter().enumerate() {
                        gb[i % nb] = if negate { gb[i % nb] - y } else { gb[i % nb] + y };
                    }
                }
            }
            Op::Mul { a, b } => {
                let (da, db) = (self.values[a.0].data(), self.values[b.0].data());
                let nb = db.len();
                if let Some(ga) = self.slot(grads, *a) {
                    for (i, &y) in g.iter().enumerate() {
                        ga[i] = ga[i] + y * db[i % nb];
                    }
                }
                if let Some(gb) = self.slot(grads, *b) {
                    for (i, &y) in g.iter().enumerate() {
                        gb[i % nb] = gb[i % nb] + y * da[i];
                    }
                }
            }
            Op::Scale { a, c } => {
                if let Some(ga) = self.slot(grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(x, &y)| *x = *x + y * *c);
                }
            }
            Op::Permute { a, src_index } => {
                if let Some(ga) = self.slot(grads, *a) {
                    for (&src, &y) in src_index.iter().zip(g) {
                        ga[src] = ga[src] + y;
                    }
                }
            }
            Op::Reshape { a } => {
                if let Some(ga) = self.slot(grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(x, &y)| *x = *x + y);
                }
            }
            Op::Concat { parts, axis } => {
                let (outer, total, inner) = split_axis(self.values[node].shape(), *axis);
                let mut offset = 0;
                for &p in parts {
                    let ext = self.shape(p)[*axis];
                    if let Some(gp) = self.slot(grads, p) {
                        for o in 0..outer {
                            let src = (o * total + offset) * inner;
                            for (x, &y) in gp[o * ext * inner..(o + 1) * ext * inner]
                                .iter_mut()
                                .zip(&g[src..src + ext * inner])
                            {
                                *x = *x + y;
                            }
                        }
                    }
                    offset += ext;
                }
            }
            Op::Slice { a, axis, start } => {
                let (outer, ext, inner) = split_axis(self.shape(*a), *axis);
                let len = self.values[node].shape()[*axis];
                if let Some(ga) = self.slot(grads, *a) {
                    for o in 0..outer {
                        let dst = (o * ext + start) * inner;
                        for (x, &y) in ga[dst..dst + len * inner]
                            .iter_mut()
                            .zip(&g[o * len * inner..(o + 1) * len * inner])
                        {
                            *x = *x + y;
                        }
                    }
                }
            }
            Op::Pad { a, axis, before } => {
                let (outer, ext, inner) = split_axis(self.shape(*a), *axis);
                let padded = self.values[node].shape()[*axis];
                if let Some(ga) = self.slot(grads, *a) {
                    for o in 0..outer {
                        let src = (o * padded + before) * inner;
                        for (x, &y) in ga[o * ext * inner..(o + 1) * ext * inner]
                            .iter_mut()
                            .zip(&g[src..src + ext * inner])
                        {
                            *x = *x + y;
                        }
                    }
                }
            }
            Op::Softmax { a } => {
                let d = *self.shape(*a).last().unwrap();
                if let Some(ga) = self.slot(grads, *a) {
                    for ((gx, gy), y) in ga.chunks_mut(d).zip(g.chunks(d)).zip(out.chunks(d)) {
                        let dot: T = gy.iter().zip(y).map(|(&u, &v)| u * v).sum();
                        for j in 0..d {
                            gx[j] = gx[j] + y[j] * (gy[j] - dot);
                        }
                    }
                }
            }
            Op::LogSoftmax { a } => {
                let d = *self.shape(*a).last().unwrap();
                if let Some(ga) = self.slot(grads, *a) {
                    for ((gx, gy), y) in ga.chunks_mut(d).zip(g.chunks(d)).zip(out.chunks(d)) {
                        let total: T = gy.iter().copied().sum();
                        for j in 0..d {
                            gx[j] = gx[j] + gy[j] - y[j].exp() * total;
                        }
                    }
                }
            }
            Op::Norm {
                x,
                gain,
                bias,
                axis,
                xhat,
                inv_std,
            } => {
                let shape = self.shape(*x);
                let (groups, len, stride) = match axis {
                    NormAxis::Last => {
                        let d = *shape.last().unwrap();
                        (xhat.len() / d, d, 1)
                    }
                    NormAxis::Time => (shape[1], shape[0], shape[1]),
                };
                let at = |g: usize, j: usize| match axis {
                    NormAxis::Last => (g * len + j, j),
                    NormAxis::Time => (j * stride + g, g),
                };
                let gd = self.values[gain.0].data();
                if let Some(gg) = self.slot(grads, *gain) {
                    for grp in 0..groups {
                        for j in 0..len {
                            let (i, p) = at(grp, j);
                            gg[p] = gg[p] + g[i] * xhat[i];
                        }
                    }
                }
                if let Some(gb) = self.slot(grads, *bias) {
                    for grp in 0..groups {
                        for j in 0..len {
                            let (i, p) = at(grp, j);
                            gb[p] = gb[p] + g[i];
                        }
                    }
                }
                if let Some(gx) = self.slot(grads, *x) {
                    let n = T::from_usize(len).unwrap();
                    for grp in 0..groups {
                        let mut s1 = T::zero();
                        let mut s2 = T::zero();
                        for j in 0..len {
                            let (i, p) = at(grp, j);
                            let gh = g[i] * gd[p];
                            s1 = s1 + gh;
                            s2 = s2 + gh * xhat[i];
                        }
                        let (m1, m2) = (s1 / n, s2 / n);
                        for j in 0..len {
                            let (i, p) = at(grp, j);
                            let gh = g[i] * gd[p];
                            gx[i] = gx[i] + inv_std[grp] * (gh - m1 - xhat[i] * m2);
                        }
                    }
                }
            }
            Op::Relu { a } => {
                let xa = self.values[a.0].data();
                if let Some(ga) = self.slot(grads, *a) {
                    for i in 0..g.len() {
                        if xa[i] > T::zero() {
                            ga[i] = ga[i] + g[i];
                        }
                    }
                }
            }
            Op::Sigmoid { a } => {
                if let Some(ga) = self.slot(grads, *a) {
                    for i in 0..g.len() {
                        ga[i] = ga[i] + g[i] * out[i] * (T::one() - out[i]);
                    }
                }
            }
            Op::Swish { a } => {
                let xa = self.values[a.0].data();
                if let Some(ga) = self.slot(grads, *a) {
                    for i in 0..g.len() {
                        let s = sigmoid(xa[i]);
                        ga[i] = ga[i] + g[i] * (s + xa[i] * s * (T::one() - s));
                    }
                }
            }
            Op::Glu { a } => {
                let xa = self.values[a.0].data();
                let d = *self.shape(*a).last().unwrap();
                let h = d / 2;
                if let Some(ga) = self.slot(grads, *a) {
                    for (r, gy) in g.chunks(h).enumerate() {
                        for j in 0..h {
                            let (u, v) = (xa[r * d + j], xa[r * d + h + j]);
                            let s = sigmoid(v);
                            ga[r * d + j] = ga[r * d + j] + gy[j] * s;
                            ga[r * d + h + j] = ga[r * d + h + j] + gy[j] * u * s * (T::one() - s);
                        }
                    }
                }
            }
            Op::Conv1d {
                x,
                w,
                b,
                stride,
                padding,
            } => {
                let (t_in, c_in) = (self.shape(*x)[0], self.shape(*x)[1]);
                let (c_out, kernel) = (self.shape(*w)[0], self.shape(*w)[2]);
                let t_out = self.values[node].shape()[0];
                let width = c_in * kernel;
                if let Some(gb) = self.slot(grads, *b) {
                    for row in g.chunks(c_out) {
                        gb.iter_mut().zip(row).for_each(|(x, &y)| *x = *x + y);
                    }
                }
                if self.tracked[w.0] {
                    let cols = im2col(self.values[x.0].data(), t_in, c_in, kernel, *stride, *padding, t_out);
                    let gw = self.slot(grads, *w).unwrap();
                    T::gemm(
                        c_out,
                        t_out,
                        width,
                        T::one(),
                        g,
                        (1, c_out as isize),
                        &cols,
                        (width as isize, 1),
                        T::one(),
                        gw,
                        (width as isize, 1),
                    );
                }
                if self.tracked[x.0] {
                    let mut gcols = vec![T::zero(); t_out * width];
                    T::gemm(
                        t_out,
                        c_out,
                        width,
                        T::one(),
                        g,
                        (c_out as isize, 1),
                        self.values[w.0].data(),
                        (width as isize, 1),
                        T::zero(),
                        &mut gcols,
                        (width as isize, 1),
                    );
                    let gx = self.slot(grads, *x).unwrap();
                    for t in 0..t_out {
                        for k in 0..kernel {
                            let src = (t * stride + k) as isize - *padding as isize;
                            if src < 0 || src as usize >= t_in {
                                continue;
                            }
                            let src = src as usize;
                            for c in 0..c_in {
                                gx[src * c_in + c] = gx[src * c_in + c] + gcols[t * width + c * kernel + k];
                            }
                        }
                    }
                }
            }
            Op::Depthwise { x, w, b, padding } => {
                let (t_in, c) = (self.shape(*x)[0], self.shape(*x)[1]);
                let kernel = self.shape(*w)[1];
                let t_out = self.values[node].shape()[0];
                let (xd, wd) = (self.values[x.0].data(), self.values[w.0].data());
                if let Some(gb) = self.slot(grads, *b) {
                    for row in g.chunks(c) {
                        gb.iter_mut().zip(row).for_each(|(x, &y)| *x = *x + y);
                    }
                }
                let taps = |f: &mut dyn FnMut(usize, usize, usize)| {
                    for t in 0..t_out {
                        for k in 0..kernel {
                            let src = (t + k) as isize - *padding as isize;
                            if src >= 0 && (src as usize) < t_in {
                                f(t, k, src as usize);
                            }
                        }
                    }
                };
                if let Some(gw) = self.slot(grads, *w) {
                    taps(&mut |t, k, src| {
                        for ch in 0..c {
                            gw[ch * kernel + k] = gw[ch * kernel + k] + g[t * c + ch] * xd[src * c + ch];
                        }
                    });
                }
                if let Some(gx) = self.slot(grads, *x) {
                    taps(&mut |t, k, src| {
                        for ch in 0..c {
                            gx[src * c + ch] = gx[src * c + ch] + g[t * c + ch] * wd[ch * kernel + k];
                        }
                    });
                }
            }
            Op::Dropout { a, mask } => {
                if let Some(ga) = self.slot(grads, *a) {
                    for i in 0..g.len() {
                        ga[i] = ga[i] + g[i] * mask[i];
                    }
                }
            }
            Op::Sum { a } => {
                if let Some(ga) = self.slot(grads, *a) {
                    ga.iter_mut().for_each(|x| *x = *x + g[0]);
                }
            }
            Op::Mean { a } => {
                if let Some(ga) = self.slot(grads, *a) {
                    let share = g[0] / T::from_usize(ga.len().max(1)).unwrap();
                    ga.iter_mut().for_each(|x| *x = *x + share);
                }
            }
            Op::MeanPool { a, k } => {
                let (t, d) = (self.shape(*a)[0], self.shape(*a)[1]);
                let inv = T::one() / T::from_usize(*k).unwrap();
                if let Some(ga) = self.slot(grads, *a) {
                    for (i, gy) in g.chunks(d).enumerate() {
                        for j in 0..*k {
                            let src = (i * k + j).min(t - 1);
                            for c in 0..d {
                                ga[src * d + c] = ga[src * d + c] + gy[c] * inv;
                            }
                        }
                    }
                }
            }
            Op::Repeat { a, k } => {
                let d = self.shape(*a)[1];
                if let Some(ga) = self.slot(grads, *a) {
                    for (i, gy) in g.chunks(d).enumerate() {
                        let src = i / k;
                        for c in 0..d {
                            ga[src * d + c] = ga[src * d + c] + gy[c];
                        }
                    }
                }
            }
            Op::Precomputed { a, grad } => {
                if let Some(ga) = self.slot(grads, *a) {
                    ga.iter_mut().zip(grad).for_each(|(x, &y)| *x = *x + g[0] * y);
                }
            }
        }
    }
}
