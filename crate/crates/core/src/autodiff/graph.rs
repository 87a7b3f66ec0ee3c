//! Define-by-run reverse-mode tape.
//!
//! A [`Graph`] records every op applied to its [`Var`]s. [`Graph::backward`]
//! walks the tape once in reverse and returns gradients for the leaves that
//! require them. Parameters are borrowed, not copied, so a graph must not
//! outlive the parameter store it was bound to.

use std::borrow::Cow;
use std::collections::BTreeMap;

use crate::autodiff::kernels::{self, ConvGeom, ConvShape, Resample};
use crate::error::{Error, Result};
use crate::fusion;
use crate::losses;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

enum Op<T> {
    Leaf,
    Conv {
        x: Var,
        w: Var,
        b: Option<Var>,
        shape: ConvShape,
        cols: Vec<T>,
    },
    Add(Var, Var),
    Mul(Var, Var),
    MulPlanes {
        x: Var,
        plane: Var,
    },
    Scale(Var, T),
    Sum(Var),
    Relu(Var),
    LeakyRelu(Var, T),
    Softplus(Var),
    Softmax(Var),
    SelfInformation {
        p: Var,
        inv_ln_base: T,
    },
    AvgPool3(Var),
    Resample {
        x: Var,
        plan: Resample,
    },
    SegNll {
        p: Var,
        labels: Vec<u8>,
    },
    BerhuMean {
        pred: Var,
        residual: Vec<T>,
        c: T,
    },
    DomainBce {
        scores: Var,
        label: T,
    },
}

struct Node<'a, T: Scalar> {
    value: Cow<'a, Tensor<T>>,
    op: Op<T>,
    requires_grad: bool,
    name: Option<String>,
}

pub struct Graph<'a, T: Scalar> {
    nodes: Vec<Node<'a, T>>,
}

impl<T: Scalar> Default for Graph<'_, T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of one backward pass, indexed by leaf [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// `None` means no gradient reached this var (detached or unrelated).
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

/// Parameter gradients keyed by parameter name. Adding a second pass sums.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamGrads<T> {
    pub by_name: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> ParamGrads<T> {
    pub fn new() -> Self {
        Self {
            by_name: BTreeMap::new(),
        }
    }

    pub fn accumulate(&mut self, name: &str, g: &Tensor<T>) {
        match self.by_name.get_mut(name) {
            Some(acc) => acc.add_assign(g),
            None => {
                self.by_name.insert(name.to_string(), g.clone());
            }
        }
    }

    pub fn merge(&mut self, other: &ParamGrads<T>) {
        for (k, g) in &other.by_name {
            self.accumulate(k, g);
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.by_name.get(name)
    }

    pub fn is_empty(&self) -> bool {
        self.by_name.is_empty()
    }

    /// Names whose gradient has at least one nonzero entry.
    pub fn nonzero_names(&self) -> Vec<&str> {
        self.by_name
            .iter()
            .filter(|(_, g)| g.data().iter().any(|x| *x != T::zero()))
            .map(|(k, _)| k.as_str())
            .collect()
    }
}

fn expect_same(context: &'static str, a: &[usize], b: &[usize]) -> Result<()> {
    if a != b {
        return Err(Error::shape(context, a, b));
    }
    Ok(())
}

impl<'a, T: Scalar> Graph<'a, T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Cow::Owned(value),
            op,
            requires_grad,
            name: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// A value that never receives gradient.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn constant_ref(&mut self, t: &'a Tensor<T>) -> Var {
        self.nodes.push(Node {
            value: Cow::Borrowed(t),
            op: Op::Leaf,
            requires_grad: false,
            name: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// An unnamed leaf that receives gradient (e.g. an input image under audit).
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// A named, borrowed parameter leaf.
    pub fn param(&mut self, name: &str, t: &'a Tensor<T>) -> Var {
        self.nodes.push(Node {
            value: Cow::Borrowed(t),
            op: Op::Leaf,
            requires_grad: true,
            name: Some(name.to_string()),
        });
        Var(self.nodes.len() - 1)
    }

    /// Same value, gradient flow severed.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone().into_owned();
        self.push(value, Op::Leaf, false)
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, geom: ConvGeom) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        let ws = self.value(w).shape().to_vec();
        if xs.len() != 3 || ws.len() != 4 || ws[1] != xs[0] {
            return Err(Error::shape("conv2d input channels", &[ws.get(1).copied().unwrap_or(0)], &xs));
        }
        if let Some(b) = b {
            expect_same("conv2d bias", &[ws[0]], self.value(b).shape())?;
        }
        let oh = geom.out_dim(xs[1], ws[2]);
        let ow = geom.out_dim(xs[2], ws[3]);
        let (Some(oh), Some(ow)) = (oh, ow) else {
            return Err(Error::shape("conv2d spatial extent", &ws[2..], &xs[1..]));
        };
        let shape = ConvShape {
            cin: xs[0],
            h: xs[1],
            w: xs[2],
            cout: ws[0],
            kh: ws[2],
            kw: ws[3],
            oh,
            ow,
            geom,
        };
        let cols = kernels::im2col(self.value(x).data(), &shape);
        let y = kernels::conv_forward(
            &cols,
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
            &shape,
        );
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        // The column buffer is only needed for the weight gradient.
        let cols = if self.rg(w) { cols } else { Vec::new() };
        let out = Tensor::new(&[shape.cout, oh, ow], y)?;
        Ok(self.push(
            out,
            Op::Conv {
                x,
                w,
                b,
                shape,
                cols,
            },
            rg,
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        expect_same("add", self.value(a).shape(), self.value(b).shape())?;
        let y = self.value(a).zip_map(self.value(b), |x, y| x + y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(y, Op::Add(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        expect_same("mul", self.value(a).shape(), self.value(b).shape())?;
        let y = self.value(a).zip_map(self.value(b), |x, y| x * y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(y, Op::Mul(a, b), rg))
    }

    /// `x[c, h, w] * plane[0, h, w]`, broadcasting a single-channel map over channels.
    pub fn mul_planes(&mut self, x: Var, plane: Var) -> Result<Var> {
        let (c, h, w) = self.value(x).chw();
        expect_same("mul_planes", &[1, h, w], self.value(plane).shape())?;
        let p = self.value(plane).data();
        let xd = self.value(x).data();
        let hw = h * w;
        let data = (0..c * hw).map(|i| xd[i] * p[i % hw]).collect();
        let y = Tensor::new(&[c, h, w], data)?;
        let rg = self.rg(x) || self.rg(plane);
        Ok(self.push(y, Op::MulPlanes { x, plane }, rg))
    }

    pub fn scale(&mut self, x: Var, k: T) -> Var {
        let y = self.value(x).map(|v| v * k);
        let rg = self.rg(x);
        self.push(y, Op::Scale(x, k), rg)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let y = Tensor::scalar(self.value(x).sum());
        let rg = self.rg(x);
        self.push(y, Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len();
        let s = self.sum(x);
        self.scale(s, T::one() / T::lit(n as f64))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let y = self.value(x).map(|v| v.max(T::zero()));
        let rg = self.rg(x);
        self.push(y, Op::Relu(x), rg)
    }

    pub fn leaky_relu(&mut self, x: Var, slope: T) -> Var {
        let y = self.value(x).map(|v| if v > T::zero() { v } else { v * slope });
        let rg = self.rg(x);
        self.push(y, Op::LeakyRelu(x, slope), rg)
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        let y = self.value(x).map(softplus);
        let rg = self.rg(x);
        self.push(y, Op::Softplus(x), rg)
    }

    /// Normalized exponential across the channel axis of a `(c, h, w)` map.
    pub fn softmax_channels(&mut self, x: Var) -> Var {
        let (c, h, w) = self.value(x).chw();
        let hw = h * w;
        let xd = self.value(x).data();
        let mut y = vec![T::zero(); c * hw];
        for px in 0..hw {
            let mut m = T::neg_infinity();
            for ch in 0..c {
                m = m.max(xd[ch * hw + px]);
            }
            let mut z = T::zero();
            for ch in 0..c {
                let e = (xd[ch * hw + px] - m).exp();
                y[ch * hw + px] = e;
                z += e;
            }
            for ch in 0..c {
                y[ch * hw + px] /= z;
            }
        }
        let y = Tensor::new(&[c, h, w], y).expect("softmax shape");
        let rg = self.rg(x);
        self.push(y, Op::Softmax(x), rg)
    }

    /// Element-wise `-p log_b p` with `0 log 0 = 0`.
    pub fn self_information(&mut self, p: Var, base: T) -> Var {
        let inv_ln_base = T::one() / base.ln();
        let y = self.value(p).map(|v| fusion::surprisal(v, inv_ln_base));
        let rg = self.rg(p);
        self.push(y, Op::SelfInformation { p, inv_ln_base }, rg)
    }

    pub fn avg_pool3(&mut self, x: Var) -> Var {
        let (c, h, w) = self.value(x).chw();
        let y = kernels::avg_pool3(self.value(x).data(), c, h, w);
        let y = Tensor::new(&[c, h, w], y).expect("pool shape");
        let rg = self.rg(x);
        self.push(y, Op::AvgPool3(x), rg)
    }

    pub fn resize_bilinear(&mut self, x: Var, oh: usize, ow: usize) -> Var {
        let (c, h, w) = self.value(x).chw();
        if (h, w) == (oh, ow) {
            return x;
        }
        let plan = Resample::new(h, w, oh, ow);
        let y = plan.forward(self.value(x).data(), c);
        let y = Tensor::new(&[c, oh, ow], y).expect("resample shape");
        let rg = self.rg(x);
        self.push(y, Op::Resample { x, plan }, rg)
    }

    /// Pixel-mean negative log-likelihood of `labels` under the class map `p`.
    pub fn seg_nll(&mut self, p: Var, labels: &[u8]) -> Result<Var> {
        let (c, h, w) = self.value(p).chw();
        if labels.len() != h * w {
            return Err(Error::shape("seg_nll labels", &[h * w], &[labels.len()]));
        }
        let loss = losses::seg_nll_slice(self.value(p).data(), labels, c)?;
        let rg = self.rg(p);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SegNll {
                p,
                labels: labels.to_vec(),
            },
            rg,
        ))
    }

    /// Pixel-mean berHu of `pred - target` with the threshold `c` held fixed.
    pub fn berhu_mean(&mut self, pred: Var, target: &Tensor<T>, c: T) -> Result<Var> {
        expect_same("berhu_mean", self.value(pred).shape(), target.shape())?;
        let residual: Vec<T> = self
            .value(pred)
            .data()
            .iter()
            .zip(target.data())
            .map(|(&a, &b)| a - b)
            .collect();
        let loss = if c > T::zero() {
            residual.iter().map(|&e| losses::berhu(e, c)).sum::<T>() / T::lit(residual.len() as f64)
        } else {
            T::zero()
        };
        let rg = self.rg(pred);
        Ok(self.push(Tensor::scalar(loss), Op::BerhuMean { pred, residual, c }, rg))
    }

    /// Position-mean binary cross-entropy of `sigmoid(scores)` against `label`.
    pub fn domain_bce(&mut self, scores: Var, label: T) -> Var {
        let loss = losses::domain_bce_slice(self.value(scores).data(), label);
        let rg = self.rg(scores);
        self.push(Tensor::scalar(loss), Op::DomainBce { scores, label }, rg)
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::shape("backward loss", &[1], lv.shape()));
        }
        let l = lv.data()[0];
        if !l.is_finite() {
            return Err(Error::NonFiniteLoss(l.as_f64()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.rg(loss) {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(Tensor::full(lv.shape(), T::one()));

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(gy) = grads[i].take() else { continue };
            self.backprop_node(node, &gy, &mut grads);
        }
        Ok(Gradients { grads })
    }

    fn backprop_node(&self, node: &Node<'a, T>, gy: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let mut send = |v: Var, g: Tensor<T>| {
            if !self.rg(v) {
                return;
            }
            match &mut grads[v.0] {
                Some(acc) => acc.add_assign(&g),
                slot @ None => *slot = Some(g),
            }
        };
        let val = |v: Var| self.value(v);
        let gyd = gy.data();
        match &node.op {
            Op::Leaf => {}
            Op::Conv {
                x,
                w,
                b,
                shape,
                cols,
            } => {
                if self.rg(*w) {
                    let mut dw = Tensor::zeros(val(*w).shape());
                    kernels::conv_backward_weight(gyd, cols, shape, dw.data_mut());
                    send(*w, dw);
                }
                if let Some(b) = b {
                    if self.rg(*b) {
                        let n = shape.n();
                        let db: Vec<T> = gyd.chunks(n).map(|r| r.iter().copied().sum()).collect();
                        send(*b, Tensor::new(&[shape.cout], db).expect("bias grad"));
                    }
                }
                if self.rg(*x) {
                    let dx = kernels::conv_backward_input(gyd, val(*w).data(), shape);
                    send(*x, Tensor::new(val(*x).shape(), dx).expect("conv dx"));
                }
            }
            Op::Add(a, b) => {
                send(*a, gy.clone());
                send(*b, gy.clone());
            }
            Op::Mul(a, b) => {
                if self.rg(*a) {
                    send(*a, gy.zip_map(val(*b), |g, y| g * y));
                }
                if self.rg(*b) {
                    send(*b, gy.zip_map(val(*a), |g, x| g * x));
                }
            }
            Op::MulPlanes { x, plane } => {
                let (c, h, w) = val(*x).chw();
                let hw = h * w;
                if self.rg(*x) {
                    let p = val(*plane).data();
                    let d = (0..c * hw).map(|i| gyd[i] * p[i % hw]).collect();
                    send(*x, Tensor::new(&[c, h, w], d).expect("mul_planes dx"));
                }
                if self.rg(*plane) {
                    let xd = val(*x).data();
                    let mut d = vec![T::zero(); hw];
                    for ch in 0..c {
                        for px in 0..hw {
                            d[px] += gyd[ch * hw + px] * xd[ch * hw + px];
                        }
                    }
                    send(*plane, Tensor::new(&[1, h, w], d).expect("mul_planes dplane"));
                }
            }
            Op::Scale(x, k) => send(*x, gy.map(|g| g * *k)),
            Op::Sum(x) => {
                let g = gyd[0];
                send(*x, Tensor::full(val(*x).shape(), g));
            }
            Op::Relu(x) => send(
                *x,
                gy.zip_map(val(*x), |g, v| if v > T::zero() { g } else { T::zero() }),
            ),
            Op::LeakyRelu(x, slope) => send(
                *x,
                gy.zip_map(val(*x), |g, v| if v > T::zero() { g } else { g * *slope }),
            ),
            Op::Softplus(x) => send(*x, gy.zip_map(val(*x), |g, v| g * sigmoid(v))),
            Op::Softmax(x) => {
                let y = &node.value;
                let (c, h, w) = y.chw();
                let hw = h * w;
                let yd = y.data();
                let mut d = vec![T::zero(); c * hw];
                for px in 0..hw {
                    let mut dot = T::zero();
                    for ch in 0..c {
                        dot += gyd[ch * hw + px] * yd[ch * hw + px];
                    }
                    for ch in 0..c {
                        let k = ch * hw + px;
                        d[k] = yd[k] * (gyd[k] - dot);
                    }
                }
                send(*x, Tensor::new(&[c, h, w], d).expect("softmax dx"));
            }
            Op::SelfInformation { p, inv_ln_base } => send(
                *p,
                gy.zip_map(val(*p), |g, v| g * fusion::surprisal_derivative(v, *inv_ln_base)),
            ),
            Op::AvgPool3(x) => {
                let (c, h, w) = val(*x).chw();
                let d = kernels::avg_pool3_backward(gyd, c, h, w);
                send(*x, Tensor::new(&[c, h, w], d).expect("pool dx"));
            }
            Op::Resample { x, plan } => {
                let c = val(*x).chw().0;
                let d = plan.backward(gyd, c);
                send(*x, Tensor::new(&[c, plan.h, plan.w], d).expect("resample dx"));
            }
            Op::SegNll { p, labels } => {
                let pv = val(*p);
                let (c, h, w) = pv.chw();
                let hw = h * w;
                let scale = gyd[0] / T::lit(hw as f64);
                let mut d = vec![T::zero(); c * hw];
                for (px, &y) in labels.iter().enumerate() {
                    let k = y as usize * hw + px;
                    d[k] = scale * losses::nll_derivative(pv.data()[k]);
                }
                send(*p, Tensor::new(&[c, h, w], d).expect("nll dp"));
            }
            Op::BerhuMean { pred, residual, c } => {
                let n = T::lit(residual.len() as f64);
                let d: Vec<T> = if *c > T::zero() {
                    residual
                        .iter()
                        .map(|&e| gyd[0] * losses::berhu_derivative(e, *c) / n)
                        .collect()
                } else {
                    vec![T::zero(); residual.len()]
                };
                send(*pred, Tensor::new(val(*pred).shape(), d).expect("berhu dpred"));
            }
            Op::DomainBce { scores, label } => {
                let sv = val(*scores);
                let n = T::lit(sv.len() as f64);
                let d = sv.map(|s| gyd[0] * losses::bce_derivative(s, *label) / n);
                send(*scores, d);
            }
        }
    }

    /// Collects gradients of named parameter leaves; repeated names sum.
    pub fn param_grads(&self, grads: &Gradients<T>) -> ParamGrads<T> {
        let mut out = ParamGrads::new();
        for (i, node) in self.nodes.iter().enumerate() {
            if let (Some(name), Some(g)) = (&node.name, grads.grads[i].as_ref()) {
                out.accumulate(name, g);
            }
        }
        out
    }
}

pub(crate) fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub(crate) fn softplus<T: Scalar>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}
