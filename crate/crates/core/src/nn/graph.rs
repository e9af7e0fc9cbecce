//! Tape-based reverse-mode automatic differentiation.
//!
//! Nodes are appended in evaluation order, so a reverse sweep over the tape
//! visits every node after all of its consumers.

use super::conv::{self, ConvGeom};
use super::tensor::{Scalar, Tensor};
use crate::compositor::blend_planar;
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    /// `k / 2` zeros on every side.
    Same,
    Valid,
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Conv2d { x: Var, w: Var, b: Var, geom: ConvGeom },
    LeakyRelu { x: Var, slope: T },
    Logistic(Var),
    MaxPool2 { x: Var, argmax: Vec<usize> },
    Upsample2(Var),
    Concat(Var, Var),
    GlobalAvgPool(Var),
    Linear { x: Var, w: Var, b: Var },
    Blend { fg: Var, bg: Var, mask: Var },
    OneMinus(Var),
    Ln { x: Var, eps: T },
    Ln1m { x: Var, eps: T },
    Bce { pred: Var, target: Vec<T>, eps: T },
    MinConst { x: Var, cap: T },
    Add(Var, Var),
    Scale { x: Var, k: T },
    Mean(Var),
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

/// Gradients of one scalar root with respect to every node that needs them.
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

fn contract<T>(msg: String) -> Result<T> {
    Err(Error::Contract(msg))
}

#[inline]
fn clamp_prob<T: Scalar>(p: T, eps: T) -> T {
    p.max(eps).min(T::one() - eps)
}

/// Numerically stable logistic function.
#[inline]
pub fn logistic<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

impl<T: Scalar> Graph<T> {
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
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Constant input; no gradient is computed for it.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Leaf whose gradient is wanted (parameters, or inputs under test).
    pub fn leaf(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn nchw(&self, v: Var, what: &str) -> Result<(usize, usize, usize, usize)> {
        let s = self.shape(v);
        if s.len() != 4 {
            return contract(format!("{what} expects an NCHW tensor, got shape {s:?}"));
        }
        Ok((s[0], s[1], s[2], s[3]))
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: Padding) -> Result<Var> {
        let (n, c, h, wd) = self.nchw(x, "conv2d")?;
        let ws = self.shape(w).to_vec();
        if ws.len() != 4 || ws[1] != c || ws[2] != ws[3] {
            return contract(format!("conv2d weight {ws:?} incompatible with input channels {c}"));
        }
        let (oc, k) = (ws[0], ws[2]);
        if self.shape(b) != [oc] {
            return contract(format!("conv2d bias {:?} does not match {oc} output channels", self.shape(b)));
        }
        let pad = match pad {
            Padding::Same => k / 2,
            Padding::Valid => 0,
        };
        let geom = ConvGeom { in_c: c, in_h: h, in_w: wd, k, stride, pad };
        let Some((oh, ow)) = geom.out_hw() else {
            return contract(format!("conv2d kernel {k} stride {stride} does not fit {h}x{wd} input"));
        };
        let mut out = vec![T::zero(); n * oc * oh * ow];
        conv::forward(self.value(x).data(), n, &geom, self.value(w).data(), self.value(b).data(), oc, &mut out);
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        Ok(self.push(Tensor::new(vec![n, oc, oh, ow], out), Op::Conv2d { x, w, b, geom }, rg))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: T) -> Var {
        let v = self.value(x);
        let out: Vec<T> = v.data().iter().map(|&a| if a > T::zero() { a } else { a * slope }).collect();
        let t = Tensor::new(v.shape().to_vec(), out);
        let rg = self.rg(x);
        self.push(t, Op::LeakyRelu { x, slope }, rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.leaky_relu(x, T::zero())
    }

    pub fn logistic(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let t = Tensor::new(v.shape().to_vec(), v.data().iter().map(|&a| logistic(a)).collect());
        let rg = self.rg(x);
        self.push(t, Op::Logistic(x), rg)
    }

    pub fn max_pool2(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = self.nchw(x, "max_pool2")?;
        if h % 2 != 0 || w % 2 != 0 {
            return contract(format!("max_pool2 needs even spatial dims, got {h}x{w}"));
        }
        let (oh, ow) = (h / 2, w / 2);
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(n * c * oh * ow);
        let mut argmax = Vec::with_capacity(n * c * oh * ow);
        for plane in 0..n * c {
            let base = plane * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = base + 2 * oy * w + 2 * ox;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = base + (2 * oy + dy) * w + 2 * ox + dx;
                        if xv[idx] > xv[best] {
                            best = idx;
                        }
                    }
                    out.push(xv[best]);
                    argmax.push(best);
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(vec![n, c, oh, ow], out), Op::MaxPool2 { x, argmax }, rg))
    }

    pub fn upsample2(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = self.nchw(x, "upsample2")?;
        let xv = self.value(x).data();
        let (oh, ow) = (2 * h, 2 * w);
        let mut out = vec![T::zero(); n * c * oh * ow];
        for plane in 0..n * c {
            for oy in 0..oh {
                for ox in 0..ow {
                    out[(plane * oh + oy) * ow + ox] = xv[(plane * h + oy / 2) * w + ox / 2];
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(vec![n, c, oh, ow], out), Op::Upsample2(x), rg))
    }

    /// Channel concatenation of two NCHW tensors.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, ca, h, w) = self.nchw(a, "concat")?;
        let (nb, cb, hb, wb) = self.nchw(b, "concat")?;
        if (n, h, w) != (nb, hb, wb) {
            return contract(format!("concat of {:?} and {:?}", self.shape(a), self.shape(b)));
        }
        let hw = h * w;
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(n * (ca + cb) * hw);
        for s in 0..n {
            out.extend_from_slice(&av[s * ca * hw..(s + 1) * ca * hw]);
            out.extend_from_slice(&bv[s * cb * hw..(s + 1) * cb * hw]);
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(vec![n, ca + cb, h, w], out), Op::Concat(a, b), rg))
    }

    /// `N x C x H x W -> N x C` spatial mean.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = self.nchw(x, "global_avg_pool")?;
        let hw = h * w;
        let inv = T::one() / T::from_usize(hw).unwrap();
        let out: Vec<T> = self.value(x).data().chunks_exact(hw).map(|p| p.iter().copied().sum::<T>() * inv).collect();
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(vec![n, c], out), Op::GlobalAvgPool(x), rg))
    }

    /// `x (N x F) * w^T (F x O) + b`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 2 || ws.len() != 2 || ws[1] != xs[1] || self.shape(b) != [ws[0]] {
            return contract(format!("linear shapes x {xs:?}, w {ws:?}, b {:?}", self.shape(b)));
        }
        let (n, o) = (xs[0], ws[0]);
        let mut out = vec![T::zero(); n * o];
        for row in out.chunks_exact_mut(o) {
            row.copy_from_slice(self.value(b).data());
        }
        T::gemm(n, xs[1], o, self.value(x).data(), false, self.value(w).data(), true, T::one(), &mut out);
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        Ok(self.push(Tensor::new(vec![n, o], out), Op::Linear { x, w, b }, rg))
    }

    /// `mask * fg + (1 - mask) * bg` with an `N x 1 x H x W` mask broadcast over channels.
    pub fn blend(&mut self, fg: Var, bg: Var, mask: Var) -> Result<Var> {
        let (n, c, h, w) = self.nchw(fg, "blend")?;
        let ms = self.shape(mask);
        if self.shape(bg) != self.shape(fg) || ms != [n, 1, h, w] {
            return contract(format!(
                "blend shapes fg {:?}, bg {:?}, mask {:?}",
                self.shape(fg),
                self.shape(bg),
                ms
            ));
        }
        let hw = h * w;
        let mut out = vec![T::zero(); n * c * hw];
        let (fv, bv, mv) = (self.value(fg).data(), self.value(bg).data(), self.value(mask).data());
        for s in 0..n {
            let r = s * c * hw..(s + 1) * c * hw;
            blend_planar(&fv[r.clone()], &bv[r.clone()], &mv[s * hw..(s + 1) * hw], &mut out[r]);
        }
        let rg = self.rg(fg) || self.rg(bg) || self.rg(mask);
        Ok(self.push(Tensor::new(vec![n, c, h, w], out), Op::Blend { fg, bg, mask }, rg))
    }

    pub fn one_minus(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let t = Tensor::new(v.shape().to_vec(), v.data().iter().map(|&a| T::one() - a).collect());
        let rg = self.rg(x);
        self.push(t, Op::OneMinus(x), rg)
    }

    /// `ln(clamp(x, eps, 1 - eps))`.
    pub fn ln_clamped(&mut self, x: Var, eps: T) -> Var {
        let v = self.value(x);
        let t = Tensor::new(v.shape().to_vec(), v.data().iter().map(|&a| clamp_prob(a, eps).ln()).collect());
        let rg = self.rg(x);
        self.push(t, Op::Ln { x, eps }, rg)
    }

    /// `ln(1 - clamp(x, eps, 1 - eps))`.
    pub fn ln1m_clamped(&mut self, x: Var, eps: T) -> Var {
        let v = self.value(x);
        let t = Tensor::new(
            v.shape().to_vec(),
            v.data().iter().map(|&a| (T::one() - clamp_prob(a, eps)).ln()).collect(),
        );
        let rg = self.rg(x);
        self.push(t, Op::Ln1m { x, eps }, rg)
    }

    /// Mean binary cross entropy of `pred` against a constant target.
    pub fn bce_mean(&mut self, pred: Var, target: Vec<T>, eps: T) -> Result<Var> {
        let pv = self.value(pred).data();
        if pv.len() != target.len() {
            return contract(format!("bce of {} predictions against {} targets", pv.len(), target.len()));
        }
        let mut acc = T::zero();
        for (&p, &t) in pv.iter().zip(&target) {
            let p = clamp_prob(p, eps);
            acc -= t * p.ln() + (T::one() - t) * (T::one() - p).ln();
        }
        let mean = acc / T::from_usize(pv.len().max(1)).unwrap();
        let rg = self.rg(pred);
        Ok(self.push(Tensor::scalar(mean), Op::Bce { pred, target, eps }, rg))
    }

    /// `min(x, cap)` element-wise; the gradient is cut where the cap binds.
    pub fn min_const(&mut self, x: Var, cap: T) -> Var {
        let v = self.value(x);
        let t = Tensor::new(v.shape().to_vec(), v.data().iter().map(|&a| a.min(cap)).collect());
        let rg = self.rg(x);
        self.push(t, Op::MinConst { x, cap }, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return contract(format!("add of {:?} and {:?}", self.shape(a), self.shape(b)));
        }
        let out: Vec<T> = self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| *x + *y).collect();
        let t = Tensor::new(self.shape(a).to_vec(), out);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Add(a, b), rg))
    }

    pub fn scale(&mut self, x: Var, k: T) -> Var {
        let v = self.value(x);
        let t = Tensor::new(v.shape().to_vec(), v.data().iter().map(|&a| a * k).collect());
        let rg = self.rg(x);
        self.push(t, Op::Scale { x, k }, rg)
    }

    /// Mean over all elements, as a one-element tensor.
    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let m = v.data().iter().copied().sum::<T>() / T::from_usize(v.len().max(1)).unwrap();
        let rg = self.rg(x);
        self.push(Tensor::scalar(m), Op::Mean(x), rg)
    }

    /// Reverse sweep from a one-element `root`.
    pub fn backward(&self, root: Var) -> Result<Gradients<T>> {
        if self.value(root).len() != 1 {
            return contract(format!("backward root must be a scalar, got {:?}", self.shape(root)));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::scalar(T::one()));
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, f: impl FnOnce(&mut [T])) {
        if !self.rg(v) {
            return;
        }
        let slot = grads[v.0].get_or_insert_with(|| Tensor::zeros(self.shape(v).to_vec()));
        f(slot.data_mut());
    }

    fn propagate(&self, node: &Node<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, geom } => {
                let n = self.shape(*x)[0];
                let oc = self.shape(*w)[0];
                let mut dx = self.rg(*x).then(|| vec![T::zero(); self.value(*x).len()]);
                let mut dw = self.rg(*w).then(|| vec![T::zero(); self.value(*w).len()]);
                let mut db = self.rg(*b).then(|| vec![T::zero(); oc]);
                conv::backward(
                    self.value(*x).data(),
                    n,
                    geom,
                    self.value(*w).data(),
                    oc,
                    gd,
                    dx.as_deref_mut(),
                    dw.as_deref_mut(),
                    db.as_deref_mut(),
                );
                for (v, d) in [(*x, dx), (*w, dw), (*b, db)] {
                    if let Some(d) = d {
                        self.accumulate(grads, v, |acc| add_into(acc, &d));
                    }
                }
            }
            Op::LeakyRelu { x, slope } => {
                let xv = self.value(*x).data();
                self.accumulate(grads, *x, |acc| {
                    for ((a, &xi), &gi) in acc.iter_mut().zip(xv).zip(gd) {
                        *a += if xi > T::zero() { gi } else { gi * *slope };
                    }
                });
            }
            Op::Logistic(x) => {
                let yv = node.value.data();
                self.accumulate(grads, *x, |acc| {
                    for ((a, &y), &gi) in acc.iter_mut().zip(yv).zip(gd) {
                        *a += gi * y * (T::one() - y);
                    }
                });
            }
            Op::MaxPool2 { x, argmax } => {
                self.accumulate(grads, *x, |acc| {
                    for (&idx, &gi) in argmax.iter().zip(gd) {
                        acc[idx] += gi;
                    }
                });
            }
            Op::Upsample2(x) => {
                let (_, _, h, w) = self.value(*x).dims4();
                let (oh, ow) = (2 * h, 2 * w);
                self.accumulate(grads, *x, |acc| {
                    for (plane, gp) in gd.chunks_exact(oh * ow).enumerate() {
                        for oy in 0..oh {
                            for ox in 0..ow {
                                acc[(plane * h + oy / 2) * w + ox / 2] += gp[oy * ow + ox];
                            }
                        }
                    }
                });
            }
            Op::Concat(a, b) => {
                let (n, ca, h, w) = self.value(*a).dims4();
                let cb = self.shape(*b)[1];
                let hw = h * w;
                let c = ca + cb;
                self.accumulate(grads, *a, |acc| {
                    for s in 0..n {
                        add_into(&mut acc[s * ca * hw..(s + 1) * ca * hw], &gd[s * c * hw..(s * c + ca) * hw]);
                    }
                });
                self.accumulate(grads, *b, |acc| {
                    for s in 0..n {
                        add_into(&mut acc[s * cb * hw..(s + 1) * cb * hw], &gd[(s * c + ca) * hw..(s + 1) * c * hw]);
                    }
                });
            }
            Op::GlobalAvgPool(x) => {
                let (_, _, h, w) = self.value(*x).dims4();
                let hw = h * w;
                let inv = T::one() / T::from_usize(hw).unwrap();
                self.accumulate(grads, *x, |acc| {
                    for (plane, &gi) in gd.iter().enumerate() {
                        for a in &mut acc[plane * hw..(plane + 1) * hw] {
                            *a += gi * inv;
                        }
                    }
                });
            }
            Op::Linear { x, w, b } => {
                let (n, f) = (self.shape(*x)[0], self.shape(*x)[1]);
                let o = self.shape(*w)[0];
                let (xv, wv) = (self.value(*x).data(), self.value(*w).data());
                // dx (n x f) += g (n x o) * w (o x f)
                self.accumulate(grads, *x, |acc| T::gemm(n, o, f, gd, false, wv, false, T::one(), acc));
                // dw (o x f) += g^T (o x n) * x (n x f)
                self.accumulate(grads, *w, |acc| T::gemm(o, n, f, gd, true, xv, false, T::one(), acc));
                self.accumulate(grads, *b, |acc| {
                    for row in gd.chunks_exact(o) {
                        add_into(acc, row);
                    }
                });
            }
            Op::Blend { fg, bg, mask } => {
                let (n, c, h, w) = self.value(*fg).dims4();
                let hw = h * w;
                let (fv, bv, mv) = (self.value(*fg).data(), self.value(*bg).data(), self.value(*mask).data());
                self.accumulate(grads, *fg, |acc| {
                    for (k, a) in acc.iter_mut().enumerate() {
                        let m = mv[(k / (c * hw)) * hw + k % hw];
                        *a += m * gd[k];
                    }
                });
                self.accumulate(grads, *bg, |acc| {
                    for (k, a) in acc.iter_mut().enumerate() {
                        let m = mv[(k / (c * hw)) * hw + k % hw];
                        *a += (T::one() - m) * gd[k];
                    }
                });
                self.accumulate(grads, *mask, |acc| {
                    for s in 0..n {
                        for ch in 0..c {
                            let base = (s * c + ch) * hw;
                            for p in 0..hw {
                                acc[s * hw + p] += gd[base + p] * (fv[base + p] - bv[base + p]);
                            }
                        }
                    }
                });
            }
            Op::OneMinus(x) => {
                self.accumulate(grads, *x, |acc| {
                    for (a, &gi) in acc.iter_mut().zip(gd) {
                        *a -= gi;
                    }
                });
            }
            Op::Ln { x, eps } => {
                let xv = self.value(*x).data();
                self.accumulate(grads, *x, |acc| {
                    for ((a, &p), &gi) in acc.iter_mut().zip(xv).zip(gd) {
                        if p > *eps && p < T::one() - *eps {
                            *a += gi / p;
                        }
                    }
                });
            }
            Op::Ln1m { x, eps } => {
                let xv = self.value(*x).data();
                self.accumulate(grads, *x, |acc| {
                    for ((a, &p), &gi) in acc.iter_mut().zip(xv).zip(gd) {
                        if p > *eps && p < T::one() - *eps {
                            *a -= gi / (T::one() - p);
                        }
                    }
                });
            }
            Op::Bce { pred, target, eps } => {
                let pv = self.value(*pred).data();
                let scale = gd[0] / T::from_usize(pv.len().max(1)).unwrap();
                self.accumulate(grads, *pred, |acc| {
                    for ((a, &p), &t) in acc.iter_mut().zip(pv).zip(target) {
                        if p > *eps && p < T::one() - *eps {
                            *a += scale * ((T::one() - t) / (T::one() - p) - t / p);
                        }
                    }
                });
            }
            Op::MinConst { x, cap } => {
                let xv = self.value(*x).data();
                self.accumulate(grads, *x, |acc| {
                    for ((a, &v), &gi) in acc.iter_mut().zip(xv).zip(gd) {
                        if v < *cap {
                            *a += gi;
                        }
                    }
                });
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, |acc| add_into(acc, gd));
                self.accumulate(grads, *b, |acc| add_into(acc, gd));
            }
            Op::Scale { x, k } => {
                self.accumulate(grads, *x, |acc| {
                    for (a, &gi) in acc.iter_mut().zip(gd) {
                        *a += gi * *k;
                    }
                });
            }
            Op::Mean(x) => {
                let n = self.value(*x).len().max(1);
                let gi = gd[0] / T::from_usize(n).unwrap();
                self.accumulate(grads, *x, |acc| {
                    for a in acc.iter_mut() {
                        *a += gi;
                    }
                });
            }
        }
    }
}

#[inline]
fn add_into<T: Scalar>(acc: &mut [T], src: &[T]) {
    for (a, s) in acc.iter_mut().zip(src) {
        *a += *s;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect())
    }

    /// Reduces `v` to a scalar whose gradient differs per element.
    fn reduce(g: &mut Graph<f64>, v: Var) -> Var {
        let n = g.value(v).len();
        let target: Vec<f64> = (0..n).map(|i| ((i * 37 % 11) as f64) / 10.0).collect();
        let p = g.logistic(v);
        g.bce_mean(p, target, 1e-12).unwrap()
    }

    /// Compares analytic and central-difference gradients for every leaf.
    fn check<F>(inputs: Vec<Tensor<f64>>, build: F)
    where
        F: Fn(&mut Graph<f64>, &[Var]) -> Var,
    {
        let eval = |ins: &[Tensor<f64>]| {
            let mut g = Graph::new();
            let vars: Vec<Var> = ins.iter().map(|t| g.leaf(t.clone())).collect();
            let root = build(&mut g, &vars);
            (g, vars, root)
        };
        let (g, vars, root) = eval(&inputs);
        let grads = g.backward(root).unwrap();
        let h = 1e-5;
        for (vi, var) in vars.iter().enumerate() {
            let analytic = grads
                .get(*var)
                .map(|t| t.data().to_vec())
                .unwrap_or_else(|| vec![0.0; inputs[vi].len()]);
            for k in 0..inputs[vi].len() {
                let mut plus = inputs.clone();
                plus[vi].data_mut()[k] += h;
                let mut minus = inputs.clone();
                minus[vi].data_mut()[k] -= h;
                let (gp, _, rp) = eval(&plus);
                let (gm, _, rm) = eval(&minus);
                let numeric = (gp.value(rp).data()[0] - gm.value(rm).data()[0]) / (2.0 * h);
                let a = analytic[k];
                let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-3);
                assert!(err < 1e-4, "input {vi} elem {k}: analytic {a} numeric {numeric}");
            }
        }
    }

    /// Values away from zero so kinks are not straddled by the difference step.
    fn off_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
        let mut t = rand_tensor(rng, shape, 0.05, 1.0);
        for v in t.data_mut() {
            if rng.gen_bool(0.5) {
                *v = -*v;
            }
        }
        t
    }

    #[test]
    fn conv_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for (stride, pad) in [(1, Padding::Same), (2, Padding::Same), (1, Padding::Valid)] {
            let x = rand_tensor(&mut rng, &[2, 2, 5, 5], -1.0, 1.0);
            let w = rand_tensor(&mut rng, &[3, 2, 3, 3], -0.5, 0.5);
            let b = rand_tensor(&mut rng, &[3], -0.5, 0.5);
            check(vec![x, w, b], |g, v| {
                let y = g.conv2d(v[0], v[1], v[2], stride, pad).unwrap();
                reduce(g, y)
            });
        }
    }

    #[test]
    fn leaky_relu_and_relu_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = off_zero(&mut rng, &[2, 3, 2, 2]);
        check(vec![x.clone()], |g, v| {
            let y = g.leaky_relu(v[0], 0.2);
            reduce(g, y)
        });
        check(vec![x], |g, v| {
            let y = g.relu(v[0]);
            reduce(g, y)
        });
    }

    #[test]
    fn pool_upsample_concat_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = rand_tensor(&mut rng, &[2, 2, 4, 4], -1.0, 1.0);
        let b = rand_tensor(&mut rng, &[2, 3, 4, 4], -1.0, 1.0);
        check(vec![a, b], |g, v| {
            let p = g.max_pool2(v[0]).unwrap();
            let u = g.upsample2(p).unwrap();
            let c = g.concat(u, v[1]).unwrap();
            reduce(g, c)
        });
    }

    #[test]
    fn gap_and_linear_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = rand_tensor(&mut rng, &[3, 4, 3, 3], -1.0, 1.0);
        let w = rand_tensor(&mut rng, &[2, 4], -1.0, 1.0);
        let b = rand_tensor(&mut rng, &[2], -1.0, 1.0);
        check(vec![x, w, b], |g, v| {
            let p = g.global_avg_pool(v[0]).unwrap();
            let y = g.linear(p, v[1], v[2]).unwrap();
            reduce(g, y)
        });
    }

    #[test]
    fn blend_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let fg = rand_tensor(&mut rng, &[2, 3, 3, 3], 0.0, 1.0);
        let bg = rand_tensor(&mut rng, &[2, 3, 3, 3], 0.0, 1.0);
        let m = rand_tensor(&mut rng, &[2, 1, 3, 3], 0.0, 1.0);
        check(vec![fg, bg, m], |g, v| {
            let y = g.blend(v[0], v[1], v[2]).unwrap();
            let z = g.one_minus(y);
            reduce(g, z)
        });
    }

    #[test]
    fn log_and_loss_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let p = rand_tensor(&mut rng, &[6], 0.05, 0.95);
        check(vec![p.clone()], |g, v| {
            let a = g.ln_clamped(v[0], 1e-7);
            let b = g.ln1m_clamped(v[0], 1e-7);
            let s = g.add(a, b).unwrap();
            let s = g.scale(s, -0.7);
            g.mean(s)
        });
        let target = vec![0.0, 1.0, 1.0, 0.0, 1.0, 0.0];
        check(vec![p], move |g, v| {
            let l = g.bce_mean(v[0], target.clone(), 1e-7).unwrap();
            g.min_const(l, 10.0)
        });
    }

    #[test]
    fn min_const_cuts_gradient_when_capped() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::scalar(2.0));
        let y = g.min_const(x, 1.0);
        assert_eq!(g.value(y).data(), &[1.0]);
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[0.0]);
    }

    #[test]
    fn clamped_log_is_finite_at_bounds() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::new(vec![2], vec![0.0, 1.0]));
        let a = g.ln_clamped(x, 1e-7);
        let b = g.ln1m_clamped(x, 1e-7);
        assert!(g.value(a).data().iter().chain(g.value(b).data()).all(|v| v.is_finite()));
        let s = g.add(a, b).unwrap();
        let m = g.mean(s);
        let grads = g.backward(m).unwrap();
        assert!(grads.get(x).unwrap().data().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut g = Graph::<f64>::new();
        let c = g.constant(Tensor::scalar(0.3));
        let x = g.leaf(Tensor::scalar(0.4));
        let s = g.add(c, x).unwrap();
        let grads = g.backward(s).unwrap();
        assert!(grads.get(c).is_none());
        assert_eq!(grads.get(x).unwrap().data(), &[1.0]);
    }

    #[test]
    fn shape_errors_are_contract_violations() {
        let mut g = Graph::<f64>::new();
        let a = g.leaf(Tensor::zeros(vec![1, 2, 4, 4]));
        let b = g.leaf(Tensor::zeros(vec![1, 2, 2, 2]));
        assert!(matches!(g.concat(a, b), Err(Error::Contract(_))));
        assert!(matches!(g.add(a, b), Err(Error::Contract(_))));
        let odd = g.leaf(Tensor::zeros(vec![1, 1, 3, 3]));
        assert!(matches!(g.max_pool2(odd), Err(Error::Contract(_))));
        assert!(matches!(g.backward(a), Err(Error::Contract(_))));
    }

    #[test]
    fn logistic_is_stable() {
        assert_eq!(logistic(0.0f64), 0.5);
        assert!(logistic(-800.0f64).is_finite());
        assert_eq!(logistic(800.0f64), 1.0);
    }
}
