//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Tape`] records every primitive applied during a forward pass as a
//! node holding its output value and the handles of its inputs. Nodes are
//! appended in evaluation order, so the node list is already a topological
//! order and [`Tape::backward`] is a single reverse sweep.
//!
//! Every primitive checks that its output is finite; a NaN or infinity is
//! reported as [`Error::Numeric`] at the op that produced it.

use std::cell::RefCell;
use std::rc::Rc;

use super::kernels::{self, ConvGeom};
use super::Tensor;
use crate::ctc;
use crate::error::{Error, Result};
use crate::real::{matmul_into, Real};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    MaskMul(Var, Rc<Vec<T>>),
    BiasChannel(Var, Var),
    BiasLast(Var, Var),
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    MatMul(Var, Var),
    Conv2d {
        x: Var,
        k: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    MaxPool {
        x: Var,
        arg: Vec<usize>,
    },
    Upsample {
        x: Var,
        factor: usize,
    },
    Concat {
        a: Var,
        b: Var,
        axis: usize,
    },
    Narrow {
        x: Var,
        axis: usize,
        start: usize,
    },
    Stack(Vec<Var>),
    Index0 {
        x: Var,
        i: usize,
    },
    Reshape(Var),
    Permute {
        x: Var,
        perm: Vec<usize>,
    },
    MeanHeight(Var),
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        training: bool,
    },
    LogSoftmax(Var),
    Sum(Var),
    Ctc {
        x: Var,
        grad: Vec<T>,
    },
}

struct Node<T> {
    value: Rc<Tensor<T>>,
    op: Op<T>,
    requires_grad: bool,
}

/// Batch statistics produced by a training-mode [`Tape::batch_norm`].
#[derive(Clone, Debug)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    /// Unbiased variance, the value folded into running estimates.
    pub var: Vec<T>,
}

/// Recorded computation graph.
pub struct Tape<T> {
    nodes: RefCell<Vec<Node<T>>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

fn add_into<T: Real>(dst: &mut [T], src: &[T]) {
    dst.iter_mut().zip(src).for_each(|(a, &b)| *a += b);
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn value(&self, v: Var) -> Rc<Tensor<T>> {
        Rc::clone(&self.nodes.borrow()[v.0].value)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    fn requires(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].requires_grad
    }

    fn push(&self, value: Tensor<T>, op: Op<T>, inputs: &[Var], name: &str) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::Numeric(format!(
                "{name} produced a non-finite value"
            )));
        }
        let requires_grad = inputs.iter().any(|&v| self.requires(v));
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op,
            requires_grad,
        });
        Ok(Var(nodes.len() - 1))
    }

    /// Records an input tensor. Gradients are kept for it when its
    /// `requires_grad` flag is set.
    pub fn leaf(&self, t: Tensor<T>) -> Var {
        let requires_grad = t.requires_grad();
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(t),
            op: Op::Leaf,
            requires_grad,
        });
        Var(nodes.len() - 1)
    }

    pub fn constant(&self, t: Tensor<T>) -> Var {
        self.leaf(t.with_requires_grad(false))
    }

    fn same_shape(&self, a: Var, b: Var, name: &str) -> Result<Vec<usize>> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::dim(format!(
                "{name}: shapes {sa:?} and {sb:?} differ"
            )));
        }
        Ok(sa)
    }

    fn zip_map(&self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Vec<T> {
        let (va, vb) = (self.value(a), self.value(b));
        va.data()
            .iter()
            .zip(vb.data())
            .map(|(&x, &y)| f(x, y))
            .collect()
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        let shape = self.same_shape(a, b, "add")?;
        let data = self.zip_map(a, b, |x, y| x + y);
        self.push(Tensor::new(&shape, data)?, Op::Add(a, b), &[a, b], "add")
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        let shape = self.same_shape(a, b, "sub")?;
        let data = self.zip_map(a, b, |x, y| x - y);
        self.push(Tensor::new(&shape, data)?, Op::Sub(a, b), &[a, b], "sub")
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        let shape = self.same_shape(a, b, "mul")?;
        let data = self.zip_map(a, b, |x, y| x * y);
        self.push(Tensor::new(&shape, data)?, Op::Mul(a, b), &[a, b], "mul")
    }

    pub fn scale(&self, x: Var, c: T) -> Result<Var> {
        let v = self.value(x);
        let data = v.data().iter().map(|&e| e * c).collect();
        self.push(
            Tensor::new(v.shape(), data)?,
            Op::Scale(x, c),
            &[x],
            "scale",
        )
    }

    /// Elementwise product with a constant mask (dropout application).
    pub fn mask_mul(&self, x: Var, mask: Vec<T>) -> Result<Var> {
        let v = self.value(x);
        if mask.len() != v.numel() {
            return Err(Error::dim(format!(
                "mask of {} values for tensor {:?}",
                mask.len(),
                v.shape()
            )));
        }
        let data = v.data().iter().zip(&mask).map(|(&a, &m)| a * m).collect();
        let t = Tensor::new(v.shape(), data)?;
        self.push(t, Op::MaskMul(x, Rc::new(mask)), &[x], "mask_mul")
    }

    /// `x[n, c, ...] + bias[c]`.
    pub fn add_bias_channel(&self, x: Var, bias: Var) -> Result<Var> {
        let v = self.value(x);
        let b = self.value(bias);
        let s = v.shape();
        if s.len() < 2 || b.shape() != [s[1]] {
            return Err(Error::dim(format!(
                "channel bias {:?} does not match input {s:?}",
                b.shape()
            )));
        }
        let inner: usize = s[2..].iter().product();
        let mut data = v.data().to_vec();
        for (i, chunk) in data.chunks_mut(inner).enumerate() {
            let bc = b.data()[i % s[1]];
            chunk.iter_mut().for_each(|e| *e += bc);
        }
        let t = Tensor::new(s, data)?;
        self.push(t, Op::BiasChannel(x, bias), &[x, bias], "add_bias_channel")
    }

    /// `x[..., f] + bias[f]`.
    pub fn add_bias_last(&self, x: Var, bias: Var) -> Result<Var> {
        let v = self.value(x);
        let b = self.value(bias);
        let s = v.shape();
        let f = *s.last().ok_or_else(|| Error::dim("bias add on a scalar"))?;
        if b.shape() != [f] {
            return Err(Error::dim(format!(
                "bias {:?} does not match last axis of {s:?}",
                b.shape()
            )));
        }
        let mut data = v.data().to_vec();
        for row in data.chunks_mut(f) {
            add_into(row, b.data());
        }
        let t = Tensor::new(s, data)?;
        self.push(t, Op::BiasLast(x, bias), &[x, bias], "add_bias_last")
    }

    fn unary(&self, x: Var, f: impl Fn(T) -> T, op: Op<T>, name: &str) -> Result<Var> {
        let v = self.value(x);
        let data = v.data().iter().map(|&e| f(e)).collect();
        self.push(Tensor::new(v.shape(), data)?, op, &[x], name)
    }

    pub fn relu(&self, x: Var) -> Result<Var> {
        self.unary(x, |e| e.max(T::zero()), Op::Relu(x), "relu")
    }

    pub fn sigmoid(&self, x: Var) -> Result<Var> {
        self.unary(
            x,
            |e| {
                if e >= T::zero() {
                    T::one() / (T::one() + (-e).exp())
                } else {
                    let z = e.exp();
                    z / (T::one() + z)
                }
            },
            Op::Sigmoid(x),
            "sigmoid",
        )
    }

    pub fn tanh(&self, x: Var) -> Result<Var> {
        self.unary(x, |e| e.tanh(), Op::Tanh(x), "tanh")
    }

    /// `a[m,k] · b[k,n]`.
    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        let (sa, sb) = (va.shape(), vb.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::dim(format!("matmul of {sa:?} and {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        matmul_into(m, k, n, va.data(), false, vb.data(), false, &mut out, false);
        self.push(
            Tensor::new(&[m, n], out)?,
            Op::MatMul(a, b),
            &[a, b],
            "matmul",
        )
    }

    /// 2-D cross-correlation of `x[N,C,H,W]` with `kernel[F,C,kh,kw]`.
    pub fn conv2d(
        &self,
        x: Var,
        kernel: Var,
        bias: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let (vx, vk) = (self.value(x), self.value(kernel));
        let (sx, sk) = (vx.shape(), vk.shape());
        if sx.len() != 4 || sk.len() != 4 {
            return Err(Error::dim(format!(
                "conv2d expects rank-4 input and kernel, got {sx:?} and {sk:?}"
            )));
        }
        if sx[1] != sk[1] {
            return Err(Error::dim(format!(
                "conv2d: input has {} channels but kernel expects {}",
                sx[1], sk[1]
            )));
        }
        if stride == 0 {
            return Err(Error::contract("conv2d stride must be positive"));
        }
        if sk[2] > sx[2] + 2 * pad || sk[3] > sx[3] + 2 * pad {
            return Err(Error::dim(format!(
                "conv2d: kernel {}x{} larger than padded input {}x{}",
                sk[2],
                sk[3],
                sx[2] + 2 * pad,
                sx[3] + 2 * pad
            )));
        }
        let vb = match bias {
            Some(b) => {
                let vb = self.value(b);
                if vb.shape() != [sk[0]] {
                    return Err(Error::dim(format!(
                        "conv2d bias {:?} for {} filters",
                        vb.shape(),
                        sk[0]
                    )));
                }
                Some(vb)
            }
            None => None,
        };
        let geom = ConvGeom {
            n: sx[0],
            c: sx[1],
            h: sx[2],
            w: sx[3],
            f: sk[0],
            kh: sk[2],
            kw: sk[3],
            stride,
            pad,
        };
        let out = kernels::conv_forward(&geom, vx.data(), vk.data(), vb.as_ref().map(|b| b.data()));
        let shape = [geom.n, geom.f, geom.oh(), geom.ow()];
        let mut inputs = vec![x, kernel];
        inputs.extend(bias);
        let op = Op::Conv2d {
            x,
            k: kernel,
            b: bias,
            geom,
        };
        self.push(Tensor::new(&shape, out)?, op, &inputs, "conv2d")
    }

    /// Non-overlapping `kh×kw` max pooling; extents must divide evenly.
    pub fn max_pool(&self, x: Var, kh: usize, kw: usize) -> Result<Var> {
        let v = self.value(x);
        let s = v.shape();
        if s.len() != 4 {
            return Err(Error::dim(format!("max_pool expects rank 4, got {s:?}")));
        }
        if kh == 0 || kw == 0 || s[2] % kh != 0 || s[3] % kw != 0 {
            return Err(Error::dim(format!(
                "max_pool {kh}x{kw} needs extents divisible by the window, got {}x{}",
                s[2], s[3]
            )));
        }
        let (out, arg) = kernels::max_pool_forward(v.data(), [s[0], s[1], s[2], s[3]], kh, kw);
        let shape = [s[0], s[1], s[2] / kh, s[3] / kw];
        self.push(
            Tensor::new(&shape, out)?,
            Op::MaxPool { x, arg },
            &[x],
            "max_pool",
        )
    }

    /// Bilinear upsampling by an integer factor with half-pixel centres
    /// (align-corners off).
    pub fn upsample_bilinear(&self, x: Var, factor: usize) -> Result<Var> {
        let v = self.value(x);
        let s = v.shape();
        if s.len() != 4 {
            return Err(Error::dim(format!("upsample expects rank 4, got {s:?}")));
        }
        if factor == 0 {
            return Err(Error::contract("upsample factor must be ≥ 1"));
        }
        let shape4 = [s[0], s[1], s[2], s[3]];
        let out = if factor == 1 {
            v.data().to_vec()
        } else {
            kernels::upsample_forward(v.data(), shape4, factor)
        };
        let shape = [s[0], s[1], s[2] * factor, s[3] * factor];
        self.push(
            Tensor::new(&shape, out)?,
            Op::Upsample { x, factor },
            &[x],
            "upsample",
        )
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat(&self, a: Var, b: Var, axis: usize) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        let (sa, sb) = (va.shape(), vb.shape());
        let compatible = sa.len() == sb.len()
            && axis < sa.len()
            && sa
                .iter()
                .zip(sb)
                .enumerate()
                .all(|(i, (x, y))| i == axis || x == y);
        if !compatible {
            return Err(Error::dim(format!(
                "cannot concatenate {sa:?} and {sb:?} on axis {axis}"
            )));
        }
        let outer: usize = sa[..axis].iter().product();
        let inner: usize = sa[axis + 1..].iter().product();
        let (ca, cb) = (sa[axis] * inner, sb[axis] * inner);
        let mut data = Vec::with_capacity(va.numel() + vb.numel());
        for o in 0..outer {
            data.extend_from_slice(&va.data()[o * ca..(o + 1) * ca]);
            data.extend_from_slice(&vb.data()[o * cb..(o + 1) * cb]);
        }
        let mut shape = sa.to_vec();
        shape[axis] += sb[axis];
        self.push(
            Tensor::new(&shape, data)?,
            Op::Concat { a, b, axis },
            &[a, b],
            "concat",
        )
    }

    /// Stacks along channels: `[N,Ca,H,W] ++ [N,Cb,H,W]`.
    pub fn concat_channels(&self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a).len() != 4 || self.shape(b).len() != 4 {
            return Err(Error::dim("concat_channels expects rank-4 tensors"));
        }
        self.concat(a, b, 1)
    }

    /// Slice `[start, start+len)` along `axis`.
    pub fn narrow(&self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let v = self.value(x);
        let s = v.shape();
        if axis >= s.len() || start + len > s[axis] {
            return Err(Error::dim(format!(
                "narrow [{start}, {}) on axis {axis} of {s:?}",
                start + len
            )));
        }
        let outer: usize = s[..axis].iter().product();
        let inner: usize = s[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * s[axis] * inner + start * inner;
            data.extend_from_slice(&v.data()[base..base + len * inner]);
        }
        let mut shape = s.to_vec();
        shape[axis] = len;
        self.push(
            Tensor::new(&shape, data)?,
            Op::Narrow { x, axis, start },
            &[x],
            "narrow",
        )
    }

    /// Stacks equally shaped tensors along a new leading axis.
    pub fn stack(&self, xs: &[Var]) -> Result<Var> {
        let first = xs
            .first()
            .ok_or_else(|| Error::contract("stack of no tensors"))?;
        let s = self.shape(*first);
        let mut data = Vec::new();
        for &x in xs {
            let v = self.value(x);
            if v.shape() != s.as_slice() {
                return Err(Error::dim(format!(
                    "stack: {:?} differs from {s:?}",
                    v.shape()
                )));
            }
            data.extend_from_slice(v.data());
        }
        let mut shape = vec![xs.len()];
        shape.extend(&s);
        self.push(
            Tensor::new(&shape, data)?,
            Op::Stack(xs.to_vec()),
            xs,
            "stack",
        )
    }

    /// `x[i]` along the leading axis.
    pub fn index0(&self, x: Var, i: usize) -> Result<Var> {
        let v = self.value(x);
        let s = v.shape();
        if s.is_empty() || i >= s[0] {
            return Err(Error::dim(format!("index {i} out of range for {s:?}")));
        }
        let inner: usize = s[1..].iter().product();
        let data = v.data()[i * inner..(i + 1) * inner].to_vec();
        self.push(
            Tensor::new(&s[1..], data)?,
            Op::Index0 { x, i },
            &[x],
            "index0",
        )
    }

    pub fn reshape(&self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(x);
        let t = Tensor::new(shape, v.data().to_vec())
            .map_err(|_| Error::dim(format!("cannot reshape {:?} into {shape:?}", v.shape())))?;
        self.push(t, Op::Reshape(x), &[x], "reshape")
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&self, x: Var, perm: &[usize]) -> Result<Var> {
        let v = self.value(x);
        let s = v.shape();
        let mut seen = vec![false; s.len()];
        if perm.len() != s.len()
            || perm
                .iter()
                .any(|&p| p >= s.len() || std::mem::replace(&mut seen[p], true))
        {
            return Err(Error::dim(format!(
                "invalid permutation {perm:?} for {s:?}"
            )));
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| s[p]).collect();
        let data = permute_data(v.data(), s, perm);
        let op = Op::Permute {
            x,
            perm: perm.to_vec(),
        };
        self.push(Tensor::new(&out_shape, data)?, op, &[x], "permute")
    }

    /// Mean over the height axis: `[N,C,H,W] → [N,C,1,W]`.
    pub fn mean_height(&self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let s = v.shape();
        if s.len() != 4 || s[2] == 0 {
            return Err(Error::dim(format!(
                "mean_height expects [N,C,H≥1,W], got {s:?}"
            )));
        }
        let (h, w) = (s[2], s[3]);
        let inv = T::one() / T::lit(h as f64);
        let mut data = Vec::with_capacity(s[0] * s[1] * w);
        for plane in v.data().chunks(h * w) {
            for col in 0..w {
                let total: T = (0..h).map(|row| plane[row * w + col]).sum();
                data.push(total * inv);
            }
        }
        let shape = [s[0], s[1], 1, w];
        self.push(
            Tensor::new(&shape, data)?,
            Op::MeanHeight(x),
            &[x],
            "mean_height",
        )
    }

    /// Per-channel normalisation of `x[N,C,...]`.
    ///
    /// With `running = None` batch statistics are used and returned so the
    /// caller can fold them into running estimates; otherwise the supplied
    /// `(mean, var)` pair is used as-is.
    pub fn batch_norm(
        &self,
        x: Var,
        gamma: Var,
        beta: Var,
        running: Option<(&[T], &[T])>,
        eps: T,
    ) -> Result<(Var, Option<BatchStats<T>>)> {
        let v = self.value(x);
        let s = v.shape().to_vec();
        if s.len() < 2 {
            return Err(Error::dim(format!(
                "batch_norm expects [N,C,...], got {s:?}"
            )));
        }
        let c = s[1];
        let (vg, vb) = (self.value(gamma), self.value(beta));
        if vg.shape() != [c] || vb.shape() != [c] {
            return Err(Error::dim(format!(
                "batch_norm gamma/beta {:?}/{:?} for {c} channels",
                vg.shape(),
                vb.shape()
            )));
        }
        if eps <= T::zero() {
            return Err(Error::Numeric("batch_norm eps must be positive".into()));
        }
        let inner: usize = s[2..].iter().product();
        let count = s[0] * inner;
        let channel_values = |ci: usize| {
            (0..s[0]).flat_map(move |ni| {
                let base = (ni * c + ci) * inner;
                base..base + inner
            })
        };
        let training = running.is_none();
        let mut stats = None;
        let (mean, var) = match running {
            Some((m, var)) => {
                if m.len() != c || var.len() != c {
                    return Err(Error::dim("running statistics length mismatch"));
                }
                (m.to_vec(), var.to_vec())
            }
            None => {
                let n = T::lit(count as f64);
                let mut mean = vec![T::zero(); c];
                let mut var = vec![T::zero(); c];
                let mut unbiased = vec![T::zero(); c];
                for ci in 0..c {
                    let mu = channel_values(ci).map(|i| v.data()[i]).sum::<T>() / n;
                    let ss: T = channel_values(ci)
                        .map(|i| {
                            let d = v.data()[i] - mu;
                            d * d
                        })
                        .sum();
                    mean[ci] = mu;
                    var[ci] = ss / n;
                    unbiased[ci] = if count > 1 {
                        ss / T::lit((count - 1) as f64)
                    } else {
                        ss
                    };
                }
                stats = Some(BatchStats {
                    mean: mean.clone(),
                    var: unbiased,
                });
                (mean, var)
            }
        };
        let inv_std: Vec<T> = var.iter().map(|&vv| T::one() / (vv + eps).sqrt()).collect();
        let mut xhat = vec![T::zero(); v.numel()];
        let mut out = vec![T::zero(); v.numel()];
        for ci in 0..c {
            for i in channel_values(ci) {
                let xh = (v.data()[i] - mean[ci]) * inv_std[ci];
                xhat[i] = xh;
                out[i] = vg.data()[ci] * xh + vb.data()[ci];
            }
        }
        let op = Op::BatchNorm {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
            training,
        };
        let var_out = self.push(Tensor::new(&s, out)?, op, &[x, gamma, beta], "batch_norm")?;
        Ok((var_out, stats))
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(&self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let s = v.shape();
        let k = *s
            .last()
            .ok_or_else(|| Error::dim("log_softmax on a scalar"))?;
        let mut data = Vec::with_capacity(v.numel());
        for row in v.data().chunks(k) {
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = m + row.iter().map(|&e| (e - m).exp()).sum::<T>().ln();
            data.extend(row.iter().map(|&e| e - lse));
        }
        self.push(
            Tensor::new(s, data)?,
            Op::LogSoftmax(x),
            &[x],
            "log_softmax",
        )
    }

    pub fn sum(&self, x: Var) -> Result<Var> {
        let total: T = self.value(x).data().iter().copied().sum();
        self.push(Tensor::scalar(total), Op::Sum(x), &[x], "sum")
    }

    /// Mean CTC negative log-likelihood over a batch.
    ///
    /// `log_probs` is `[T,N,C]` (time-major, blank = `C-1`); sample `n`
    /// uses its first `input_lengths[n]` steps.
    pub fn ctc_loss(
        &self,
        log_probs: Var,
        targets: &[Vec<usize>],
        input_lengths: &[usize],
    ) -> Result<Var> {
        let v = self.value(log_probs);
        let s = v.shape();
        if s.len() != 3 {
            return Err(Error::dim(format!("ctc_loss expects [T,N,C], got {s:?}")));
        }
        let (t_max, n, c) = (s[0], s[1], s[2]);
        if targets.len() != n || input_lengths.len() != n {
            return Err(Error::dim(format!(
                "ctc_loss: {} targets and {} lengths for batch of {n}",
                targets.len(),
                input_lengths.len()
            )));
        }
        let mut total = 0.0;
        let mut grad = vec![T::zero(); v.numel()];
        let inv_n = 1.0 / n as f64;
        for ni in 0..n {
            let len = input_lengths[ni];
            if len == 0 || len > t_max {
                return Err(Error::dim(format!(
                    "sample {ni}: input length {len} outside 1..={t_max}"
                )));
            }
            let mut m = ctc::LogProbMatrix::zeros(len, c);
            for t in 0..len {
                for k in 0..c {
                    m.set(t, k, v.data()[(t * n + ni) * c + k].as_f64());
                }
            }
            let (loss, g) = ctc::ctc_loss_and_grad(&m, &targets[ni])?;
            total += loss;
            for t in 0..len {
                for k in 0..c {
                    grad[(t * n + ni) * c + k] = T::lit(g.get(t, k) * inv_n);
                }
            }
        }
        let out = Tensor::scalar(T::lit(total * inv_n));
        self.push(
            out,
            Op::Ctc { x: log_probs, grad },
            &[log_probs],
            "ctc_loss",
        )
    }

    /// Reverse sweep from a scalar `loss`; returns gradients for every node
    /// that requires them.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let nodes = self.nodes.borrow();
        if loss.0 >= nodes.len() {
            return Err(Error::contract("backward on a variable from another tape"));
        }
        if nodes[loss.0].value.numel() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                nodes[loss.0].value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for id in (0..=loss.0).rev() {
            let node = &nodes[id];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            let val = |v: Var| Rc::clone(&nodes[v.0].value);
            let needs = |v: Var| nodes[v.0].requires_grad;
            let mut send = |v: Var, gv: Vec<T>| {
                if !nodes[v.0].requires_grad {
                    return;
                }
                match &mut grads[v.0] {
                    Some(acc) => add_into(acc, &gv),
                    slot @ None => *slot = Some(gv),
                }
            };
            let out = &node.value;
            match &node.op {
                Op::Leaf => unreachable!(),
                Op::Add(a, b) => {
                    send(*b, g.clone());
                    send(*a, g);
                }
                Op::Sub(a, b) => {
                    send(*b, g.iter().map(|&e| -e).collect());
                    send(*a, g);
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (val(*a), val(*b));
                    if needs(*a) {
                        send(*a, g.iter().zip(vb.data()).map(|(&e, &y)| e * y).collect());
                    }
                    if needs(*b) {
                        send(*b, g.iter().zip(va.data()).map(|(&e, &x)| e * x).collect());
                    }
                }
                Op::Scale(x, c) => send(*x, g.iter().map(|&e| e * *c).collect()),
                Op::MaskMul(x, mask) => send(
                    *x,
                    g.iter().zip(mask.iter()).map(|(&e, &m)| e * m).collect(),
                ),
                Op::BiasChannel(x, b) => {
                    let s = out.shape();
                    let inner: usize = s[2..].iter().product();
                    if needs(*b) {
                        let mut gb = vec![T::zero(); s[1]];
                        for (i, chunk) in g.chunks(inner).enumerate() {
                            gb[i % s[1]] += chunk.iter().copied().sum::<T>();
                        }
                        send(*b, gb);
                    }
                    send(*x, g);
                }
                Op::BiasLast(x, b) => {
                    let f = *out.shape().last().expect("rank ≥ 1");
                    if needs(*b) {
                        let mut gb = vec![T::zero(); f];
                        for row in g.chunks(f) {
                            add_into(&mut gb, row);
                        }
                        send(*b, gb);
                    }
                    send(*x, g);
                }
                Op::Relu(x) => send(
                    *x,
                    g.iter()
                        .zip(out.data())
                        .map(|(&e, &y)| if y > T::zero() { e } else { T::zero() })
                        .collect(),
                ),
                Op::Sigmoid(x) => send(
                    *x,
                    g.iter()
                        .zip(out.data())
                        .map(|(&e, &y)| e * y * (T::one() - y))
                        .collect(),
                ),
                Op::Tanh(x) => send(
                    *x,
                    g.iter()
                        .zip(out.data())
                        .map(|(&e, &y)| e * (T::one() - y * y))
                        .collect(),
                ),
                Op::MatMul(a, b) => {
                    let (va, vb) = (val(*a), val(*b));
                    let (m, k, n) = (va.shape()[0], va.shape()[1], vb.shape()[1]);
                    if needs(*a) {
                        let mut ga = vec![T::zero(); m * k];
                        matmul_into(m, n, k, &g, false, vb.data(), true, &mut ga, false);
                        send(*a, ga);
                    }
                    if needs(*b) {
                        let mut gb = vec![T::zero(); k * n];
                        matmul_into(k, m, n, va.data(), true, &g, false, &mut gb, false);
                        send(*b, gb);
                    }
                }
                Op::Conv2d { x, k, b, geom } => {
                    let (vx, vk) = (val(*x), val(*k));
                    let mut gx = needs(*x).then(|| vec![T::zero(); vx.numel()]);
                    let mut gk = needs(*k).then(|| vec![T::zero(); vk.numel()]);
                    let mut gb = b.filter(|b| needs(*b)).map(|_| vec![T::zero(); geom.f]);
                    kernels::conv_backward(
                        geom,
                        vx.data(),
                        vk.data(),
                        &g,
                        gx.as_deref_mut(),
                        gk.as_deref_mut(),
                        gb.as_deref_mut(),
                    );
                    if let Some(gx) = gx {
                        send(*x, gx);
                    }
                    if let Some(gk) = gk {
                        send(*k, gk);
                    }
                    if let (Some(b), Some(gb)) = (b, gb) {
                        send(*b, gb);
                    }
                }
                Op::MaxPool { x, arg } => {
                    let mut gx = vec![T::zero(); val(*x).numel()];
                    for (&e, &i) in g.iter().zip(arg) {
                        gx[i] += e;
                    }
                    send(*x, gx);
                }
                Op::Upsample { x, factor } => {
                    let vx = val(*x);
                    if *factor == 1 {
                        send(*x, g);
                    } else {
                        let s = vx.shape();
                        let mut gx = vec![T::zero(); vx.numel()];
                        kernels::upsample_backward(&g, [s[0], s[1], s[2], s[3]], *factor, &mut gx);
                        send(*x, gx);
                    }
                }
                Op::Concat { a, b, axis } => {
                    let (sa, sb) = (val(*a).shape().to_vec(), val(*b).shape().to_vec());
                    let outer: usize = sa[..*axis].iter().product();
                    let inner: usize = sa[axis + 1..].iter().product();
                    let (ca, cb) = (sa[*axis] * inner, sb[*axis] * inner);
                    let mut ga = Vec::with_capacity(outer * ca);
                    let mut gb = Vec::with_capacity(outer * cb);
                    for o in 0..outer {
                        let base = o * (ca + cb);
                        ga.extend_from_slice(&g[base..base + ca]);
                        gb.extend_from_slice(&g[base + ca..base + ca + cb]);
                    }
                    send(*a, ga);
                    send(*b, gb);
                }
                Op::Narrow { x, axis, start } => {
                    let vx = val(*x);
                    let s = vx.shape();
                    let len = out.shape()[*axis];
                    let outer: usize = s[..*axis].iter().product();
                    let inner: usize = s[axis + 1..].iter().product();
                    let mut gx = vec![T::zero(); vx.numel()];
                    for o in 0..outer {
                        let base = o * s[*axis] * inner + start * inner;
                        gx[base..base + len * inner]
                            .copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
                    }
                    send(*x, gx);
                }
                Op::Stack(xs) => {
                    let inner = out.numel() / xs.len();
                    for (i, x) in xs.iter().enumerate() {
                        send(*x, g[i * inner..(i + 1) * inner].to_vec());
                    }
                }
                Op::Index0 { x, i } => {
                    let vx = val(*x);
                    let inner = out.numel();
                    let mut gx = vec![T::zero(); vx.numel()];
                    gx[i * inner..(i + 1) * inner].copy_from_slice(&g);
                    send(*x, gx);
                }
                Op::Reshape(x) => send(*x, g),
                Op::Permute { x, perm } => {
                    let mut inverse = vec![0; perm.len()];
                    for (i, &p) in perm.iter().enumerate() {
                        inverse[p] = i;
                    }
                    send(*x, permute_data(&g, out.shape(), &inverse));
                }
                Op::MeanHeight(x) => {
                    let vx = val(*x);
                    let s = vx.shape();
                    let (h, w) = (s[2], s[3]);
                    let inv = T::one() / T::lit(h as f64);
                    let mut gx = vec![T::zero(); vx.numel()];
                    for (plane, gp) in gx.chunks_mut(h * w).zip(g.chunks(w)) {
                        for row in 0..h {
                            for col in 0..w {
                                plane[row * w + col] = gp[col] * inv;
                            }
                        }
                    }
                    send(*x, gx);
                }
                Op::BatchNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                    training,
                } => {
                    let s = out.shape();
                    let c = s[1];
                    let inner: usize = s[2..].iter().product();
                    let count = s[0] * inner;
                    let mut sum_g = vec![T::zero(); c];
                    let mut sum_gx = vec![T::zero(); c];
                    for ni in 0..s[0] {
                        for ci in 0..c {
                            let base = (ni * c + ci) * inner;
                            for i in base..base + inner {
                                sum_g[ci] += g[i];
                                sum_gx[ci] += g[i] * xhat[i];
                            }
                        }
                    }
                    let vg = val(*gamma);
                    if needs(*x) {
                        let mut gx = vec![T::zero(); g.len()];
                        let m = T::lit(count as f64);
                        for ni in 0..s[0] {
                            for ci in 0..c {
                                let base = (ni * c + ci) * inner;
                                let k = vg.data()[ci] * inv_std[ci];
                                for i in base..base + inner {
                                    gx[i] = if *training {
                                        k * (g[i] - sum_g[ci] / m - xhat[i] * sum_gx[ci] / m)
                                    } else {
                                        k * g[i]
                                    };
                                }
                            }
                        }
                        send(*x, gx);
                    }
                    send(*gamma, sum_gx);
                    send(*beta, sum_g);
                }
                Op::LogSoftmax(x) => {
                    let k = *out.shape().last().expect("rank ≥ 1");
                    let mut gx = Vec::with_capacity(g.len());
                    for (gr, yr) in g.chunks(k).zip(out.data().chunks(k)) {
                        let total: T = gr.iter().copied().sum();
                        gx.extend(gr.iter().zip(yr).map(|(&e, &y)| e - y.exp() * total));
                    }
                    send(*x, gx);
                }
                Op::Sum(x) => send(*x, vec![g[0]; val(*x).numel()]),
                Op::Ctc { x, grad } => send(*x, grad.iter().map(|&e| e * g[0]).collect()),
            }
        }
        Ok(Gradients { grads })
    }
}

fn permute_data<T: Real>(data: &[T], shape: &[usize], perm: &[usize]) -> Vec<T> {
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let n = data.len();
    let mut out = Vec::with_capacity(n);
    let mut idx = vec![0usize; out_shape.len()];
    for _ in 0..n {
        let off: usize = idx.iter().zip(&src_strides).map(|(i, s)| i * s).sum();
        out.push(data[off]);
        for d in (0..idx.len()).rev() {
            idx[d] += 1;
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape, data.to_vec())
            .unwrap()
            .with_requires_grad(true)
    }

    #[test]
    fn sum_gradient_is_ones() {
        let tape = Tape::new();
        let x = tape.leaf(t(&[2, 3], &[1.0, -2.0, 3.0, 0.5, 0.0, 7.0]));
        let loss = tape.sum(x).unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(x).unwrap(), &[1.0; 6]);
    }

    #[test]
    fn sum_of_squares_gradient_is_two_x() {
        let tape = Tape::new();
        let data = [1.0, -2.0, 3.0, 0.25];
        let x = tape.leaf(t(&[4], &data));
        let sq = tape.mul(x, x).unwrap();
        let loss = tape.sum(sq).unwrap();
        let g = tape.backward(loss).unwrap();
        let expect: Vec<f64> = data.iter().map(|v| 2.0 * v).collect();
        assert_eq!(g.get(x).unwrap(), expect.as_slice());
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let tape = Tape::new();
        let x = tape.leaf(t(&[2], &[1.0, 2.0]));
        let y = tape.relu(x).unwrap();
        assert!(matches!(tape.backward(y), Err(Error::Contract(_))));
    }

    #[test]
    fn fan_out_sums_single_path_gradients() {
        // loss = sum(3x) + sum(x ⊙ c): each path alone gives 3 and c.
        let tape = Tape::new();
        let x = tape.leaf(t(&[3], &[0.5, 1.5, -1.0]));
        let c = tape.constant(Tensor::new(&[3], vec![2.0, -1.0, 4.0]).unwrap());
        let a = tape.scale(x, 3.0).unwrap();
        let b = tape.mul(x, c).unwrap();
        let sa = tape.sum(a).unwrap();
        let sb = tape.sum(b).unwrap();
        let loss = tape.add(sa, sb).unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(x).unwrap(), &[5.0, 2.0, 7.0]);
        assert!(g.get(c).is_none());
    }

    #[test]
    fn non_finite_forward_is_an_error() {
        let tape = Tape::new();
        let x = tape.leaf(t(&[1], &[f64::MAX]));
        assert!(matches!(tape.scale(x, 10.0), Err(Error::Numeric(_))));
    }

    #[test]
    fn permute_round_trip() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::from_fn(&[2, 3, 4], |i| i as f64));
        let y = tape.permute(x, &[2, 0, 1]).unwrap();
        assert_eq!(tape.shape(y), vec![4, 2, 3]);
        assert_eq!(tape.value(y).at(&[3, 1, 2]), tape.value(x).at(&[1, 2, 3]));
        let z = tape.permute(y, &[1, 2, 0]).unwrap();
        assert_eq!(tape.value(z).data(), tape.value(x).data());
    }

    #[test]
    fn log_softmax_rows_normalise() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::from_fn(&[3, 5], |i| (i as f64 * 0.77).sin() * 4.0));
        let y = tape.log_softmax(x).unwrap();
        for row in tape.value(y).data().chunks(5) {
            let lse = row.iter().map(|v| v.exp()).sum::<f64>().ln();
            assert!(lse.abs() < 1e-12);
        }
    }
}
