//! Operation tape and reverse-mode backward pass.

use std::cell::{Cell, RefCell};

use super::conv::{conv_backward_input, conv_backward_weight, conv_forward, ConvGeom};
use super::{Element, TensorData};
use crate::error::TensorError;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    Valid,
    Same,
}

enum Op<T> {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, T),
    ScaleVar(usize, usize),
    AddConst(usize, T),
    Relu(usize),
    LeakyRelu(usize, T),
    Tanh(usize),
    Abs(usize),
    Sqrt(usize),
    Recip(usize),
    SumAll(usize),
    Matmul(usize, usize),
    Bmm {
        a: usize,
        b: usize,
        ta: bool,
        tb: bool,
    },
    /// Fused `softmax(op(a) . op(b))` along rows; only the softmax output is
    /// kept, the pre-softmax energies are never materialized on the tape.
    BmmSoftmax {
        a: usize,
        b: usize,
        ta: bool,
        tb: bool,
    },
    Softmax(usize),
    Pad2d {
        x: usize,
        pads: (usize, usize, usize, usize),
    },
    ConcatChannels(usize, usize),
    Reshape(usize),
    Gather0 {
        x: usize,
        idx: Vec<usize>,
    },
    Conv2d {
        x: usize,
        w: usize,
        geom: ConvGeom,
    },
    ConvT2d {
        x: usize,
        w: usize,
        geom: ConvGeom,
    },
    AddBiasChannel(usize, usize),
    AddBiasLast(usize, usize),
    SpecNorm {
        w: usize,
        inv_sigma: T,
        u: Vec<T>,
        v: Vec<T>,
        degenerate: bool,
    },
}

struct Node<T> {
    value: TensorData<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Growable record of executed operations; backward replays it in reverse.
pub struct Tape<T> {
    nodes: RefCell<Vec<Node<T>>>,
    grads: RefCell<Vec<Option<Vec<T>>>>,
    backward_done: Cell<bool>,
}

impl<T: Element> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
            grads: RefCell::new(Vec::new()),
            backward_done: Cell::new(false),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: TensorData<T>, op: Op<T>, needs_grad: bool) -> Var {
        debug_assert!(value.is_finite(), "non-finite value produced by tape op");
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].needs_grad
    }

    /// Leaf holding input data; no gradient is tracked for it.
    pub fn constant(&self, value: TensorData<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Leaf that participates in backward (a parameter).
    pub fn leaf(&self, value: TensorData<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn with_value<R>(&self, v: Var, f: impl FnOnce(&TensorData<T>) -> R) -> R {
        f(&self.nodes.borrow()[v.0].value)
    }

    pub fn value_clone(&self, v: Var) -> TensorData<T> {
        self.nodes.borrow()[v.0].value.clone()
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape.clone()
    }

    pub fn scalar_value(&self, v: Var) -> T {
        let nodes = self.nodes.borrow();
        assert_eq!(nodes[v.0].value.len(), 1, "scalar_value on non-scalar");
        nodes[v.0].value.data[0]
    }

    /// Gradient of a node after [`Tape::backward`]; `None` if untouched.
    pub fn grad_clone(&self, v: Var) -> Option<Vec<T>> {
        self.grads.borrow().get(v.0).and_then(|g| g.clone())
    }

    // ---- elementwise ----

    fn zip2(&self, a: Var, b: Var, f: impl Fn(T, T) -> T, op: Op<T>) -> Var {
        let nodes = self.nodes.borrow();
        let (va, vb) = (&nodes[a.0].value, &nodes[b.0].value);
        assert_eq!(va.shape, vb.shape, "elementwise shape mismatch");
        let data = va
            .data
            .iter()
            .zip(&vb.data)
            .map(|(&x, &y)| f(x, y))
            .collect();
        let out = TensorData::new(va.shape.clone(), data);
        let needs = nodes[a.0].needs_grad || nodes[b.0].needs_grad;
        drop(nodes);
        self.push(out, op, needs)
    }

    fn map1(&self, a: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let nodes = self.nodes.borrow();
        let va = &nodes[a.0].value;
        let out = TensorData::new(va.shape.clone(), va.data.iter().map(|&x| f(x)).collect());
        let needs = nodes[a.0].needs_grad;
        drop(nodes);
        self.push(out, op, needs)
    }

    pub fn add(&self, a: Var, b: Var) -> Var {
        self.zip2(a, b, |x, y| x + y, Op::Add(a.0, b.0))
    }

    pub fn sub(&self, a: Var, b: Var) -> Var {
        self.zip2(a, b, |x, y| x - y, Op::Sub(a.0, b.0))
    }

    pub fn mul(&self, a: Var, b: Var) -> Var {
        self.zip2(a, b, |x, y| x * y, Op::Mul(a.0, b.0))
    }

    pub fn scale(&self, a: Var, c: T) -> Var {
        self.map1(a, |x| x * c, Op::Scale(a.0, c))
    }

    /// Multiply a tensor by a learnable scalar (shape `[1]`) node.
    pub fn scale_by(&self, a: Var, s: Var) -> Var {
        let nodes = self.nodes.borrow();
        assert_eq!(nodes[s.0].value.len(), 1, "scale_by needs a scalar");
        let c = nodes[s.0].value.data[0];
        let va = &nodes[a.0].value;
        let out = TensorData::new(va.shape.clone(), va.data.iter().map(|&x| x * c).collect());
        let needs = nodes[a.0].needs_grad || nodes[s.0].needs_grad;
        drop(nodes);
        self.push(out, Op::ScaleVar(a.0, s.0), needs)
    }

    pub fn add_const(&self, a: Var, c: T) -> Var {
        self.map1(a, |x| x + c, Op::AddConst(a.0, c))
    }

    pub fn relu(&self, a: Var) -> Var {
        self.map1(
            a,
            |x| if x > T::zero() { x } else { T::zero() },
            Op::Relu(a.0),
        )
    }

    pub fn leaky_relu(&self, a: Var, alpha: T) -> Var {
        self.map1(
            a,
            |x| if x > T::zero() { x } else { x * alpha },
            Op::LeakyRelu(a.0, alpha),
        )
    }

    pub fn tanh(&self, a: Var) -> Var {
        self.map1(a, |x| x.tanh(), Op::Tanh(a.0))
    }

    pub fn abs(&self, a: Var) -> Var {
        self.map1(a, |x| x.abs(), Op::Abs(a.0))
    }

    pub fn sqrt(&self, a: Var) -> Var {
        self.map1(a, |x| x.sqrt(), Op::Sqrt(a.0))
    }

    pub fn recip(&self, a: Var) -> Var {
        self.map1(a, |x| T::one() / x, Op::Recip(a.0))
    }

    pub fn sum_all(&self, a: Var) -> Var {
        let nodes = self.nodes.borrow();
        let s = nodes[a.0]
            .value
            .data
            .iter()
            .fold(T::zero(), |acc, &x| acc + x);
        let needs = nodes[a.0].needs_grad;
        drop(nodes);
        self.push(TensorData::scalar(s), Op::SumAll(a.0), needs)
    }

    pub fn mean_all(&self, a: Var) -> Var {
        let n = self.nodes.borrow()[a.0].value.len();
        let s = self.sum_all(a);
        self.scale(s, T::one() / T::cast_from(n as f64))
    }

    // ---- structure ----

    pub fn reshape(&self, a: Var, shape: Vec<usize>) -> Result<Var, TensorError> {
        let nodes = self.nodes.borrow();
        let va = &nodes[a.0].value;
        if shape.iter().product::<usize>() != va.len() {
            return Err(TensorError::Shape(format!(
                "cannot reshape {:?} to {:?}",
                va.shape, shape
            )));
        }
        let out = TensorData::new(shape, va.data.clone());
        let needs = nodes[a.0].needs_grad;
        drop(nodes);
        Ok(self.push(out, Op::Reshape(a.0), needs))
    }

    /// Zero-pad the two spatial axes of an NCHW tensor.
    pub fn pad2d(&self, a: Var, pads: (usize, usize, usize, usize)) -> Result<Var, TensorError> {
        let nodes = self.nodes.borrow();
        let va = &nodes[a.0].value;
        let [n, c, h, w] = four_dims(&va.shape)?;
        let (pt, pb, pl, pr) = pads;
        let (nh, nw) = (h + pt + pb, w + pl + pr);
        let mut out = TensorData::zeros(vec![n, c, nh, nw]);
        for img in 0..n * c {
            for y in 0..h {
                let src = (img * h + y) * w;
                let dst = (img * nh + y + pt) * nw + pl;
                out.data[dst..dst + w].copy_from_slice(&va.data[src..src + w]);
            }
        }
        let needs = nodes[a.0].needs_grad;
        drop(nodes);
        Ok(self.push(out, Op::Pad2d { x: a.0, pads }, needs))
    }

    /// Concatenate two NCHW tensors along the channel axis.
    pub fn concat_channels(&self, a: Var, b: Var) -> Result<Var, TensorError> {
        let nodes = self.nodes.borrow();
        let (va, vb) = (&nodes[a.0].value, &nodes[b.0].value);
        let [n, ca, h, w] = four_dims(&va.shape)?;
        let [nb, cb, hb, wb] = four_dims(&vb.shape)?;
        if n != nb || h != hb || w != wb {
            return Err(TensorError::Shape(format!(
                "concat mismatch: {:?} vs {:?}",
                va.shape, vb.shape
            )));
        }
        let hw = h * w;
        let mut out = TensorData::zeros(vec![n, ca + cb, h, w]);
        for s in 0..n {
            let dst = s * (ca + cb) * hw;
            out.data[dst..dst + ca * hw].copy_from_slice(&va.data[s * ca * hw..(s + 1) * ca * hw]);
            out.data[dst + ca * hw..dst + (ca + cb) * hw]
                .copy_from_slice(&vb.data[s * cb * hw..(s + 1) * cb * hw]);
        }
        let needs = nodes[a.0].needs_grad || nodes[b.0].needs_grad;
        drop(nodes);
        Ok(self.push(out, Op::ConcatChannels(a.0, b.0), needs))
    }

    /// Select rows along axis 0 (duplicates allowed; backward scatter-adds).
    pub fn gather_rows(&self, a: Var, idx: &[usize]) -> Result<Var, TensorError> {
        let nodes = self.nodes.borrow();
        let va = &nodes[a.0].value;
        let rows = *va.shape.first().ok_or_else(|| {
            TensorError::Shape("gather_rows on 0-d tensor".into())
        })?;
        let stride: usize = va.shape[1..].iter().product();
        let mut shape = va.shape.clone();
        shape[0] = idx.len();
        let mut data = Vec::with_capacity(idx.len() * stride);
        for &i in idx {
            if i >= rows {
                return Err(TensorError::Shape(format!(
                    "gather index {i} out of range (rows = {rows})"
                )));
            }
            data.extend_from_slice(&va.data[i * stride..(i + 1) * stride]);
        }
        let out = TensorData::new(shape, data);
        let needs = nodes[a.0].needs_grad;
        drop(nodes);
        Ok(self.push(
            out,
            Op::Gather0 {
                x: a.0,
                idx: idx.to_vec(),
            },
            needs,
        ))
    }

    // ---- linear algebra ----

    pub fn matmul(&self, a: Var, b: Var) -> Result<Var, TensorError> {
        let nodes = self.nodes.borrow();
        let (va, vb) = (&nodes[a.0].value, &nodes[b.0].value);
        let (m, k) = two_dims(&va.shape)?;
        let (kb, n) = two_dims(&vb.shape)?;
        if k != kb {
            return Err(TensorError::Shape(format!(
                "matmul inner mismatch: {:?} x {:?}",
                va.shape, vb.shape
            )));
        }
        let mut out = TensorData::zeros(vec![m, n]);
        T::gemm(
            m,
            k,
            n,
            T::one(),
            &va.data,
            k as isize,
            1,
            &vb.data,
            n as isize,
            1,
            T::zero(),
            &mut out.data,
            n as isize,
            1,
        );
        let needs = nodes[a.0].needs_grad || nodes[b.0].needs_grad;
        drop(nodes);
        Ok(self.push(out, Op::Matmul(a.0, b.0), needs))
    }

    /// Batched matmul over 3-D tensors `(N, r, c)` with transpose flags.
    pub fn bmm(&self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var, TensorError> {
        let out = {
            let nodes = self.nodes.borrow();
            bmm_eval(&nodes[a.0].value, &nodes[b.0].value, ta, tb)?
        };
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(
            out,
            Op::Bmm {
                a: a.0,
                b: b.0,
                ta,
                tb,
            },
            needs,
        ))
    }

    /// `softmax(op(a) . op(b))` along the last axis, fused so the pre-softmax
    /// energies never live on the tape.
    pub fn bmm_softmax(&self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var, TensorError> {
        let mut out = {
            let nodes = self.nodes.borrow();
            bmm_eval(&nodes[a.0].value, &nodes[b.0].value, ta, tb)?
        };
        let cols = *out.shape.last().unwrap();
        for row in out.data.chunks_mut(cols) {
            softmax_row(row);
        }
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(
            out,
            Op::BmmSoftmax {
                a: a.0,
                b: b.0,
                ta,
                tb,
            },
            needs,
        ))
    }

    /// Shift-invariant softmax along the last axis.
    pub fn softmax(&self, a: Var) -> Var {
        let nodes = self.nodes.borrow();
        let va = &nodes[a.0].value;
        let cols = *va.shape.last().expect("softmax on 0-d tensor");
        let mut out = va.clone();
        for row in out.data.chunks_mut(cols) {
            softmax_row(row);
        }
        let needs = nodes[a.0].needs_grad;
        drop(nodes);
        self.push(out, Op::Softmax(a.0), needs)
    }

    // ---- convolution ----

    pub fn conv2d(
        &self,
        x: Var,
        w: Var,
        stride: (usize, usize),
        padding: Padding,
    ) -> Result<Var, TensorError> {
        let (out, geom) = {
            let nodes = self.nodes.borrow();
            let (vx, vw) = (&nodes[x.0].value, &nodes[w.0].value);
            let geom = ConvGeom::resolve(&vx.shape, &vw.shape, stride, padding)
                .map_err(TensorError::Shape)?;
            (conv_forward(&geom, vx, vw), geom)
        };
        let needs = self.needs(x) || self.needs(w);
        Ok(self.push(out, Op::Conv2d { x: x.0, w: w.0, geom }, needs))
    }

    /// Transposed convolution: the adjoint of `conv2d(.., stride, Same)`.
    /// Weight layout is `(c_in, c_out, kh, kw)`; output spatial size is
    /// `input * stride` per axis.
    pub fn conv2d_transpose(
        &self,
        x: Var,
        w: Var,
        stride: (usize, usize),
    ) -> Result<Var, TensorError> {
        let (out, geom) = {
            let nodes = self.nodes.borrow();
            let (vx, vw) = (&nodes[x.0].value, &nodes[w.0].value);
            let [n, cin, h, wd] = four_dims(&vx.shape)?;
            let [wcin, cout, _kh, _kw] = four_dims(&vw.shape)?;
            if wcin != cin {
                return Err(TensorError::Shape(format!(
                    "conv_transpose channel mismatch: input {cin}, weight {wcin}"
                )));
            }
            // Mirror convolution: (n, cout, h*sh, w*sw) -> (n, cin, h, w).
            let mirror_in = [n, cout, h * stride.0, wd * stride.1];
            let geom = ConvGeom::resolve(&mirror_in, &vw.shape, stride, Padding::Same)
                .map_err(TensorError::Shape)?;
            if geom.oh != h || geom.ow != wd {
                return Err(TensorError::Shape(format!(
                    "conv_transpose geometry mismatch: mirror conv yields {}x{}, input is {h}x{wd}",
                    geom.oh, geom.ow
                )));
            }
            (conv_backward_input(&geom, &vx.data, vw), geom)
        };
        let needs = self.needs(x) || self.needs(w);
        Ok(self.push(out, Op::ConvT2d { x: x.0, w: w.0, geom }, needs))
    }

    /// Add a per-channel bias to an NCHW tensor.
    pub fn add_bias_channel(&self, x: Var, b: Var) -> Result<Var, TensorError> {
        let nodes = self.nodes.borrow();
        let (vx, vb) = (&nodes[x.0].value, &nodes[b.0].value);
        let [n, c, h, w] = four_dims(&vx.shape)?;
        if vb.len() != c {
            return Err(TensorError::Shape(format!(
                "bias length {} does not match {} channels",
                vb.len(),
                c
            )));
        }
        let hw = h * w;
        let mut out = vx.clone();
        for s in 0..n {
            for ch in 0..c {
                let bias = vb.data[ch];
                for v in &mut out.data[(s * c + ch) * hw..(s * c + ch + 1) * hw] {
                    *v += bias;
                }
            }
        }
        let needs = nodes[x.0].needs_grad || nodes[b.0].needs_grad;
        drop(nodes);
        Ok(self.push(out, Op::AddBiasChannel(x.0, b.0), needs))
    }

    /// Add a bias vector along the last axis of a 2-D tensor.
    pub fn add_bias_last(&self, x: Var, b: Var) -> Result<Var, TensorError> {
        let nodes = self.nodes.borrow();
        let (vx, vb) = (&nodes[x.0].value, &nodes[b.0].value);
        let (_, f) = two_dims(&vx.shape)?;
        if vb.len() != f {
            return Err(TensorError::Shape(format!(
                "bias length {} does not match feature width {}",
                vb.len(),
                f
            )));
        }
        let mut out = vx.clone();
        for row in out.data.chunks_mut(f) {
            for (v, &bias) in row.iter_mut().zip(&vb.data) {
                *v += bias;
            }
        }
        let needs = nodes[x.0].needs_grad || nodes[b.0].needs_grad;
        drop(nodes);
        Ok(self.push(out, Op::AddBiasLast(x.0, b.0), needs))
    }

    /// Divide a weight by its top singular value estimated by power
    /// iteration. `u` is the persisted estimate (updated in place when
    /// `update_u`); gradients flow through the division.
    pub fn spectral_normalize(
        &self,
        w: Var,
        u: &mut Vec<T>,
        power_iters: usize,
        update_u: bool,
    ) -> Var {
        let nodes = self.nodes.borrow();
        let vw = &nodes[w.0].value;
        let rows = vw.shape[0];
        let cols = vw.len() / rows;
        if u.len() != rows {
            *u = vec![T::cast_from(1.0 / (rows as f64).sqrt()); rows];
        }
        let mut u_est = u.clone();
        let (sigma, v) = super::spectral::power_iteration(&vw.data, rows, cols, &mut u_est, power_iters);
        if update_u {
            u.clone_from(&u_est);
        }
        let degenerate = sigma < T::cast_from(1e-12);
        let (out, inv_sigma) = if degenerate {
            (vw.clone(), T::one())
        } else {
            let inv = T::one() / sigma;
            (
                TensorData::new(vw.shape.clone(), vw.data.iter().map(|&x| x * inv).collect()),
                inv,
            )
        };
        let needs = nodes[w.0].needs_grad;
        drop(nodes);
        self.push(
            out,
            Op::SpecNorm {
                w: w.0,
                inv_sigma,
                u: u_est,
                v,
                degenerate,
            },
            needs,
        )
    }

    // ---- backward ----

    /// Populate gradients for every reachable node that needs them.
    pub fn backward(&self, loss: Var) -> Result<(), TensorError> {
        if self.backward_done.replace(true) {
            return Err(TensorError::BackwardTwice);
        }
        let nodes = self.nodes.borrow();
        if nodes[loss.0].value.len() != 1 {
            return Err(TensorError::Shape(format!(
                "backward requires a scalar loss, got shape {:?}",
                nodes[loss.0].value.shape
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);

        for i in (0..nodes.len()).rev() {
            if grads[i].is_none() || !nodes[i].needs_grad {
                continue;
            }
            let g = grads[i].take().unwrap();
            let out_val = &nodes[i].value;
            macro_rules! acc {
                ($idx:expr, $vec:expr) => {{
                    let idx = $idx;
                    if nodes[idx].needs_grad {
                        let contrib = $vec;
                        match &mut grads[idx] {
                            Some(dst) => {
                                for (d, s) in dst.iter_mut().zip(contrib.iter()) {
                                    *d += *s;
                                }
                            }
                            None => grads[idx] = Some(contrib),
                        }
                    }
                }};
            }
            match &nodes[i].op {
                Op::Leaf => {
                    grads[i] = Some(g);
                    continue;
                }
                Op::Add(a, b) => {
                    acc!(*a, g.clone());
                    acc!(*b, g.clone());
                }
                Op::Sub(a, b) => {
                    acc!(*a, g.clone());
                    acc!(*b, g.iter().map(|&x| -x).collect::<Vec<_>>());
                }
                Op::Mul(a, b) => {
                    let (a, b) = (*a, *b);
                    acc!(
                        a,
                        g.iter()
                            .zip(&nodes[b].value.data)
                            .map(|(&x, &y)| x * y)
                            .collect::<Vec<_>>()
                    );
                    acc!(
                        b,
                        g.iter()
                            .zip(&nodes[a].value.data)
                            .map(|(&x, &y)| x * y)
                            .collect::<Vec<_>>()
                    );
                }
                Op::Scale(a, c) => {
                    let c = *c;
                    acc!(*a, g.iter().map(|&x| x * c).collect::<Vec<_>>());
                }
                Op::ScaleVar(a, s) => {
                    let (a, s) = (*a, *s);
                    let c = nodes[s].value.data[0];
                    acc!(a, g.iter().map(|&x| x * c).collect::<Vec<_>>());
                    if nodes[s].needs_grad {
                        let ds = g
                            .iter()
                            .zip(&nodes[a].value.data)
                            .fold(T::zero(), |acc, (&gv, &x)| acc + gv * x);
                        acc!(s, vec![ds]);
                    }
                }
                Op::AddConst(a, _) => acc!(*a, g.clone()),
                Op::Relu(a) => {
                    let a = *a;
                    acc!(
                        a,
                        g.iter()
                            .zip(&nodes[a].value.data)
                            .map(|(&gv, &x)| if x > T::zero() { gv } else { T::zero() })
                            .collect::<Vec<_>>()
                    );
                }
                Op::LeakyRelu(a, alpha) => {
                    let (a, alpha) = (*a, *alpha);
                    acc!(
                        a,
                        g.iter()
                            .zip(&nodes[a].value.data)
                            .map(|(&gv, &x)| if x > T::zero() { gv } else { gv * alpha })
                            .collect::<Vec<_>>()
                    );
                }
                Op::Tanh(a) => {
                    acc!(
                        *a,
                        g.iter()
                            .zip(&out_val.data)
                            .map(|(&gv, &y)| gv * (T::one() - y * y))
                            .collect::<Vec<_>>()
                    );
                }
                Op::Abs(a) => {
                    let a = *a;
                    acc!(
                        a,
                        g.iter()
                            .zip(&nodes[a].value.data)
                            .map(|(&gv, &x)| {
                                if x > T::zero() {
                                    gv
                                } else if x < T::zero() {
                                    -gv
                                } else {
                                    T::zero()
                                }
                            })
                            .collect::<Vec<_>>()
                    );
                }
                Op::Sqrt(a) => {
                    let half = T::cast_from(0.5);
                    acc!(
                        *a,
                        g.iter()
                            .zip(&out_val.data)
                            .map(|(&gv, &y)| gv * half / y)
                            .collect::<Vec<_>>()
                    );
                }
                Op::Recip(a) => {
                    acc!(
                        *a,
                        g.iter()
                            .zip(&out_val.data)
                            .map(|(&gv, &y)| -gv * y * y)
                            .collect::<Vec<_>>()
                    );
                }
                Op::SumAll(a) => {
                    let a = *a;
                    let n = nodes[a].value.len();
                    acc!(a, vec![g[0]; n]);
                }
                Op::Matmul(a, b) => {
                    let (a, b) = (*a, *b);
                    let (m, k) = (nodes[a].value.shape[0], nodes[a].value.shape[1]);
                    let n = nodes[b].value.shape[1];
                    if nodes[a].needs_grad {
                        let mut da = vec![T::zero(); m * k];
                        T::gemm(
                            m, n, k, T::one(),
                            &g, n as isize, 1,
                            &nodes[b].value.data, 1, n as isize,
                            T::zero(), &mut da, k as isize, 1,
                        );
                        acc!(a, da);
                    }
                    if nodes[b].needs_grad {
                        let mut db = vec![T::zero(); k * n];
                        T::gemm(
                            k, m, n, T::one(),
                            &nodes[a].value.data, 1, k as isize,
                            &g, n as isize, 1,
                            T::zero(), &mut db, n as isize, 1,
                        );
                        acc!(b, db);
                    }
                }
                Op::Bmm { a, b, ta, tb } => {
                    let (a, b, ta, tb) = (*a, *b, *ta, *tb);
                    self.bmm_backward(&nodes, &mut grads, a, b, ta, tb, &g);
                }
                Op::BmmSoftmax { a, b, ta, tb } => {
                    let (a, b, ta, tb) = (*a, *b, *ta, *tb);
                    // de = beta .* (g - rowsum(g .* beta))
                    let cols = *out_val.shape.last().unwrap();
                    let mut de = vec![T::zero(); g.len()];
                    for (r, (grow, yrow)) in g
                        .chunks(cols)
                        .zip(out_val.data.chunks(cols))
                        .enumerate()
                    {
                        let dot = grow
                            .iter()
                            .zip(yrow)
                            .fold(T::zero(), |acc, (&gv, &yv)| acc + gv * yv);
                        for (c, (gv, yv)) in grow.iter().zip(yrow).enumerate() {
                            de[r * cols + c] = *yv * (*gv - dot);
                        }
                    }
                    self.bmm_backward(&nodes, &mut grads, a, b, ta, tb, &de);
                }
                Op::Softmax(a) => {
                    let cols = *out_val.shape.last().unwrap();
                    let mut da = vec![T::zero(); g.len()];
                    for (r, (grow, yrow)) in
                        g.chunks(cols).zip(out_val.data.chunks(cols)).enumerate()
                    {
                        let dot = grow
                            .iter()
                            .zip(yrow)
                            .fold(T::zero(), |acc, (&gv, &yv)| acc + gv * yv);
                        for (c, (gv, yv)) in grow.iter().zip(yrow).enumerate() {
                            da[r * cols + c] = *yv * (*gv - dot);
                        }
                    }
                    acc!(*a, da);
                }
                Op::Pad2d { x, pads } => {
                    let x = *x;
                    let (pt, _pb, pl, _pr) = *pads;
                    let xs = &nodes[x].value.shape;
                    let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
                    let (nh, nw) = (out_val.shape[2], out_val.shape[3]);
                    let mut dx = vec![T::zero(); n * c * h * w];
                    for img in 0..n * c {
                        for y in 0..h {
                            let src = (img * nh + y + pt) * nw + pl;
                            let dst = (img * h + y) * w;
                            dx[dst..dst + w].copy_from_slice(&g[src..src + w]);
                        }
                    }
                    acc!(x, dx);
                }
                Op::ConcatChannels(a, b) => {
                    let (a, b) = (*a, *b);
                    let sa = &nodes[a].value.shape;
                    let sb = &nodes[b].value.shape;
                    let (n, ca, cb) = (sa[0], sa[1], sb[1]);
                    let hw = sa[2] * sa[3];
                    let mut da = vec![T::zero(); n * ca * hw];
                    let mut db = vec![T::zero(); n * cb * hw];
                    for s in 0..n {
                        let src = s * (ca + cb) * hw;
                        da[s * ca * hw..(s + 1) * ca * hw]
                            .copy_from_slice(&g[src..src + ca * hw]);
                        db[s * cb * hw..(s + 1) * cb * hw]
                            .copy_from_slice(&g[src + ca * hw..src + (ca + cb) * hw]);
                    }
                    acc!(a, da);
                    acc!(b, db);
                }
                Op::Reshape(a) => acc!(*a, g.clone()),
                Op::Gather0 { x, idx } => {
                    let x = *x;
                    let stride: usize = nodes[x].value.shape[1..].iter().product();
                    let mut dx = vec![T::zero(); nodes[x].value.len()];
                    for (r, &src_row) in idx.iter().enumerate() {
                        for c in 0..stride {
                            dx[src_row * stride + c] += g[r * stride + c];
                        }
                    }
                    acc!(x, dx);
                }
                Op::Conv2d { x, w, geom } => {
                    let (x, w, geom) = (*x, *w, *geom);
                    if nodes[x].needs_grad {
                        acc!(x, conv_backward_input(&geom, &g, &nodes[w].value).data);
                    }
                    if nodes[w].needs_grad {
                        acc!(w, conv_backward_weight(&geom, &nodes[x].value.data, &g).data);
                    }
                }
                Op::ConvT2d { x, w, geom } => {
                    let (x, w, geom) = (*x, *w, *geom);
                    if nodes[x].needs_grad {
                        let gt = TensorData::new(out_val.shape.clone(), g.clone());
                        acc!(x, conv_forward(&geom, &gt, &nodes[w].value).data);
                    }
                    if nodes[w].needs_grad {
                        acc!(w, conv_backward_weight(&geom, &g, &nodes[x].value.data).data);
                    }
                }
                Op::AddBiasChannel(x, b) => {
                    let (x, b) = (*x, *b);
                    acc!(x, g.clone());
                    if nodes[b].needs_grad {
                        let xs = &nodes[x].value.shape;
                        let (n, c, hw) = (xs[0], xs[1], xs[2] * xs[3]);
                        let mut db = vec![T::zero(); c];
                        for s in 0..n {
                            for ch in 0..c {
                                for &gv in &g[(s * c + ch) * hw..(s * c + ch + 1) * hw] {
                                    db[ch] += gv;
                                }
                            }
                        }
                        acc!(b, db);
                    }
                }
                Op::AddBiasLast(x, b) => {
                    let (x, b) = (*x, *b);
                    acc!(x, g.clone());
                    if nodes[b].needs_grad {
                        let f = *nodes[x].value.shape.last().unwrap();
                        let mut db = vec![T::zero(); f];
                        for row in g.chunks(f) {
                            for (d, &gv) in db.iter_mut().zip(row) {
                                *d += gv;
                            }
                        }
                        acc!(b, db);
                    }
                }
                Op::SpecNorm {
                    w,
                    inv_sigma,
                    u,
                    v,
                    degenerate,
                } => {
                    let w = *w;
                    if *degenerate {
                        acc!(w, g.clone());
                    } else {
                        // dW = (g - <g, W_sn> u v^T) / sigma
                        let inv = *inv_sigma;
                        let dot = g
                            .iter()
                            .zip(&out_val.data)
                            .fold(T::zero(), |acc, (&gv, &yv)| acc + gv * yv);
                        let cols = v.len();
                        let mut dw = vec![T::zero(); g.len()];
                        for (r, urow) in u.iter().enumerate() {
                            for (c, vcol) in v.iter().enumerate() {
                                let idx = r * cols + c;
                                dw[idx] = (g[idx] - dot * *urow * *vcol) * inv;
                            }
                        }
                        acc!(w, dw);
                    }
                }
            }
        }
        *self.grads.borrow_mut() = grads;
        Ok(())
    }

    #[allow(clippy::too_many_arguments)]
    fn bmm_backward(
        &self,
        nodes: &[Node<T>],
        grads: &mut [Option<Vec<T>>],
        a: usize,
        b: usize,
        ta: bool,
        tb: bool,
        g: &[T],
    ) {
        let sa = &nodes[a].value.shape;
        let sb = &nodes[b].value.shape;
        let batch = sa[0];
        let m = if ta { sa[2] } else { sa[1] };
        let k = if ta { sa[1] } else { sa[2] };
        let n = if tb { sb[1] } else { sb[2] };
        let gt = TensorData::new(vec![batch, m, n], g.to_vec());
        let mut accumulate = |idx: usize, contrib: TensorData<T>| {
            match &mut grads[idx] {
                Some(dst) => {
                    for (d, s) in dst.iter_mut().zip(contrib.data.iter()) {
                        *d += *s;
                    }
                }
                None => grads[idx] = Some(contrib.data),
            }
        };
        if nodes[a].needs_grad {
            let da = if ta {
                bmm_eval(&nodes[b].value, &gt, tb, true).unwrap()
            } else {
                bmm_eval(&gt, &nodes[b].value, false, !tb).unwrap()
            };
            accumulate(a, da);
        }
        if nodes[b].needs_grad {
            let db = if tb {
                bmm_eval(&gt, &nodes[a].value, true, ta).unwrap()
            } else {
                bmm_eval(&nodes[a].value, &gt, !ta, false).unwrap()
            };
            accumulate(b, db);
        }
        let _ = k;
    }
}

fn softmax_row<T: Element>(row: &mut [T]) {
    let mut max = row[0];
    for &v in row.iter() {
        if v > max {
            max = v;
        }
    }
    let mut sum = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    let inv = T::one() / sum;
    for v in row.iter_mut() {
        *v *= inv;
    }
}

fn bmm_eval<T: Element>(
    va: &TensorData<T>,
    vb: &TensorData<T>,
    ta: bool,
    tb: bool,
) -> Result<TensorData<T>, TensorError> {
    let (batch, ar, ac) = three_dims(&va.shape)?;
    let (bb, br, bc) = three_dims(&vb.shape)?;
    let (m, ka) = if ta { (ac, ar) } else { (ar, ac) };
    let (kb, n) = if tb { (bc, br) } else { (br, bc) };
    if batch != bb || ka != kb {
        return Err(TensorError::Shape(format!(
            "bmm mismatch: {:?} (t={ta}) x {:?} (t={tb})",
            va.shape, vb.shape
        )));
    }
    let mut out = TensorData::zeros(vec![batch, m, n]);
    // op(A) row stride: transposing swaps the roles of the two strides.
    let (rsa, csa) = if ta { (1isize, ac as isize) } else { (ac as isize, 1) };
    let (rsb, csb) = if tb { (1isize, bc as isize) } else { (bc as isize, 1) };
    for s in 0..batch {
        T::gemm(
            m,
            ka,
            n,
            T::one(),
            &va.data[s * ar * ac..],
            rsa,
            csa,
            &vb.data[s * br * bc..],
            rsb,
            csb,
            T::zero(),
            &mut out.data[s * m * n..(s + 1) * m * n],
            n as isize,
            1,
        );
    }
    Ok(out)
}

fn two_dims(shape: &[usize]) -> Result<(usize, usize), TensorError> {
    match shape {
        [a, b] => Ok((*a, *b)),
        _ => Err(TensorError::Shape(format!("expected 2-D, got {:?}", shape))),
    }
}

fn three_dims(shape: &[usize]) -> Result<(usize, usize, usize), TensorError> {
    match shape {
        [a, b, c] => Ok((*a, *b, *c)),
        _ => Err(TensorError::Shape(format!("expected 3-D, got {:?}", shape))),
    }
}

fn four_dims(shape: &[usize]) -> Result<[usize; 4], TensorError> {
    match shape {
        [a, b, c, d] => Ok([*a, *b, *c, *d]),
        _ => Err(TensorError::Shape(format!("expected 4-D, got {:?}", shape))),
    }
}
