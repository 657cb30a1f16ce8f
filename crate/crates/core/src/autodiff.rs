//! Tape-based reverse-mode differentiation over [`Tensor`]s.
//!
//! A [`Graph`] records every operation applied to [`Var`]s. Leaves are either
//! constants, free variables, or parameters borrowed from a [`Parameters`]
//! set. A graph belongs to one thread; build one graph per evaluation.

use std::cell::{Cell, RefCell};
use std::rc::Rc;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::tensor::{ParamGrads, ParamId, Parameters, Tensor};

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Gather-style convolution: each output position reads a fixed list of
/// source positions (one per kernel slot) and uses one of several weight
/// banks. Used for the hand-shaped kernels that do not fit a square grid.
#[derive(Clone, Debug, PartialEq)]
pub struct StencilPlan {
    pub n_inputs: usize,
    pub n_slots: usize,
    pub n_banks: usize,
    /// Weight bank per output position; `None` forces a zero output.
    pub bank: Vec<Option<usize>>,
    /// `bank.len() * n_slots` source positions.
    pub src: Vec<Option<usize>>,
}

enum Op {
    Leaf,
    Param(ParamId),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    Relu(usize),
    Sigmoid(usize),
    Exp(usize),
    AddBias(usize, usize),
    MulChannels(usize, usize),
    Matmul(usize, usize),
    Bmm(usize, usize),
    BmmNt(usize, usize),
    Softmax(usize),
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Mean {
        x: usize,
        outer: usize,
        n: usize,
        inner: usize,
    },
    Sum(usize),
    Reshape(usize),
    Gather {
        x: usize,
        src: Arc<Vec<Option<usize>>>,
        outer: usize,
        n: usize,
        inner: usize,
    },
    MaskMul {
        x: usize,
        mask: Arc<Vec<f64>>,
        n: usize,
        inner: usize,
    },
    Conv2d {
        x: usize,
        w: usize,
        cols: Vec<f64>,
    },
    Stencil {
        x: usize,
        w: usize,
        plan: Arc<StencilPlan>,
    },
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
    needs_grad: bool,
}

pub struct Graph {
    nodes: RefCell<Vec<Node>>,
    record: bool,
    backward_done: Cell<bool>,
}

#[derive(Clone, Copy)]
pub struct Var<'g> {
    g: &'g Graph,
    id: usize,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::Shape {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

/// `c[m x n] = alpha * a[m x k] * b[k x n] + beta * c`, arbitrary strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: usize,
    csa: usize,
    b: &[f64],
    rsb: usize,
    csb: usize,
    beta: f64,
    c: &mut [f64],
    rsc: usize,
    csc: usize,
) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if beta == 0.0 {
            for i in 0..m {
                for j in 0..n {
                    c[i * rsc + j * csc] = 0.0;
                }
            }
        }
        return;
    }
    let need = |rows: usize, cols: usize, rs: usize, cs: usize| (rows - 1) * rs + (cols - 1) * cs;
    assert!(need(m, k, rsa, csa) < a.len());
    assert!(need(k, n, rsb, csb) < b.len());
    assert!(need(m, n, rsc, csc) < c.len());
    // SAFETY: the asserts above bound every index the kernel touches.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        );
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Graph {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            record: true,
            backward_done: Cell::new(false),
        }
    }

    /// Graph that evaluates values only; `backward` on it fails.
    pub fn no_grad() -> Self {
        Self {
            record: false,
            ..Self::new()
        }
    }

    pub fn is_recording(&self) -> bool {
        self.record
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, op: Op, needs_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op,
            needs_grad: needs_grad && self.record,
        });
        Var {
            g: self,
            id: nodes.len() - 1,
        }
    }

    fn value(&self, id: usize) -> Rc<Tensor> {
        self.nodes.borrow()[id].value.clone()
    }

    fn needs(&self, id: usize) -> bool {
        self.nodes.borrow()[id].needs_grad
    }

    /// Constant leaf.
    pub fn input(&self, t: Tensor) -> Var<'_> {
        self.push(t, Op::Leaf, false)
    }

    /// Leaf whose gradient is tracked.
    pub fn variable(&self, t: Tensor) -> Var<'_> {
        self.push(t, Op::Leaf, true)
    }

    pub fn param(&self, params: &Parameters, id: ParamId) -> Var<'_> {
        self.push(params.get(id).clone(), Op::Param(id), true)
    }

    /// Allow another `backward` on this graph.
    pub fn reset_grad(&self) {
        self.backward_done.set(false);
    }

    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        if !self.record {
            return Err(Error::Graph("backward on a no-grad graph".into()));
        }
        if self.backward_done.get() {
            return Err(Error::Graph(
                "backward already ran on this graph; call reset_grad first".into(),
            ));
        }
        let nodes = self.nodes.borrow();
        if nodes[loss.id].value.numel() != 1 {
            return Err(Error::Graph(format!(
                "backward needs a scalar loss, got shape {:?}",
                nodes[loss.id].value.shape()
            )));
        }
        self.backward_done.set(true);
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.id + 1];
        grads[loss.id] = Some(vec![1.0]);

        for id in (0..=loss.id).rev() {
            let Some(gout) = grads[id].take() else {
                continue;
            };
            let node = &nodes[id];
            if !node.needs_grad {
                continue;
            }
            backward_node(&nodes, node, &gout, &mut grads);
            grads[id] = Some(gout);
        }

        let mut by_node = Vec::with_capacity(grads.len());
        let mut params = Vec::new();
        for (id, g) in grads.into_iter().enumerate() {
            let node = &nodes[id];
            if let Op::Param(pid) = node.op {
                params.push((pid, id));
            }
            by_node.push(g.map(|d| Tensor::new(node.value.shape().to_vec(), d).unwrap()));
        }
        Ok(Gradients { by_node, params })
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], nodes: &[Node], id: usize, f: impl FnOnce(&mut [f64])) {
    if !nodes[id].needs_grad {
        return;
    }
    let slot = grads[id].get_or_insert_with(|| vec![0.0; nodes[id].value.numel()]);
    f(slot);
}

fn backward_node(nodes: &[Node], node: &Node, gout: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let out = node.value.data();
    match &node.op {
        Op::Leaf | Op::Param(_) => {}
        Op::Add(a, b) => {
            accumulate(grads, nodes, *a, |g| g.iter_mut().zip(gout).for_each(|(x, y)| *x += y));
            accumulate(grads, nodes, *b, |g| g.iter_mut().zip(gout).for_each(|(x, y)| *x += y));
        }
        Op::Sub(a, b) => {
            accumulate(grads, nodes, *a, |g| g.iter_mut().zip(gout).for_each(|(x, y)| *x += y));
            accumulate(grads, nodes, *b, |g| g.iter_mut().zip(gout).for_each(|(x, y)| *x -= y));
        }
        Op::Mul(a, b) => {
            let av = nodes[*a].value.clone();
            let bv = nodes[*b].value.clone();
            accumulate(grads, nodes, *a, |g| {
                for ((x, y), v) in g.iter_mut().zip(gout).zip(bv.data()) {
                    *x += y * v;
                }
            });
            accumulate(grads, nodes, *b, |g| {
                for ((x, y), v) in g.iter_mut().zip(gout).zip(av.data()) {
                    *x += y * v;
                }
            });
        }
        Op::Scale(a, s) => {
            accumulate(grads, nodes, *a, |g| g.iter_mut().zip(gout).for_each(|(x, y)| *x += s * y));
        }
        Op::Relu(a) => {
            let av = nodes[*a].value.clone();
            accumulate(grads, nodes, *a, |g| {
                for ((x, y), v) in g.iter_mut().zip(gout).zip(av.data()) {
                    if *v > 0.0 {
                        *x += y;
                    }
                }
            });
        }
        Op::Sigmoid(a) => {
            accumulate(grads, nodes, *a, |g| {
                for ((x, y), s) in g.iter_mut().zip(gout).zip(out) {
                    *x += y * s * (1.0 - s);
                }
            });
        }
        Op::Exp(a) => {
            accumulate(grads, nodes, *a, |g| {
                for ((x, y), e) in g.iter_mut().zip(gout).zip(out) {
                    *x += y * e;
                }
            });
        }
        Op::AddBias(a, b) => {
            let c = nodes[*b].value.numel();
            accumulate(grads, nodes, *a, |g| g.iter_mut().zip(gout).for_each(|(x, y)| *x += y));
            accumulate(grads, nodes, *b, |g| {
                for row in gout.chunks(c) {
                    for (x, y) in g.iter_mut().zip(row) {
                        *x += y;
                    }
                }
            });
        }
        Op::MulChannels(x, s) => {
            let xv = nodes[*x].value.clone();
            let sv = nodes[*s].value.clone();
            let sh = xv.shape();
            let (b, p, c) = (sh[0], sh[1], sh[2]);
            accumulate(grads, nodes, *x, |g| {
                for bi in 0..b {
                    let srow = &sv.data()[bi * c..(bi + 1) * c];
                    for pi in 0..p {
                        let off = (bi * p + pi) * c;
                        for ci in 0..c {
                            g[off + ci] += gout[off + ci] * srow[ci];
                        }
                    }
                }
            });
            accumulate(grads, nodes, *s, |g| {
                for bi in 0..b {
                    for pi in 0..p {
                        let off = (bi * p + pi) * c;
                        for ci in 0..c {
                            g[bi * c + ci] += gout[off + ci] * xv.data()[off + ci];
                        }
                    }
                }
            });
        }
        Op::Matmul(a, b) => {
            let av = nodes[*a].value.clone();
            let bv = nodes[*b].value.clone();
            let k = bv.shape()[0];
            let n = bv.shape()[1];
            let m = av.numel() / k;
            accumulate(grads, nodes, *a, |g| {
                gemm(m, n, k, gout, n, 1, bv.data(), 1, n, 1.0, g, k, 1);
            });
            accumulate(grads, nodes, *b, |g| {
                gemm(k, m, n, av.data(), 1, k, gout, n, 1, 1.0, g, n, 1);
            });
        }
        Op::Bmm(a, b) => {
            let av = nodes[*a].value.clone();
            let bv = nodes[*b].value.clone();
            let (bs, m, k) = (av.shape()[0], av.shape()[1], av.shape()[2]);
            let n = bv.shape()[2];
            accumulate(grads, nodes, *a, |g| {
                for i in 0..bs {
                    gemm(
                        m, n, k,
                        &gout[i * m * n..], n, 1,
                        &bv.data()[i * k * n..], 1, n,
                        1.0, &mut g[i * m * k..], k, 1,
                    );
                }
            });
            accumulate(grads, nodes, *b, |g| {
                for i in 0..bs {
                    gemm(
                        k, m, n,
                        &av.data()[i * m * k..], 1, k,
                        &gout[i * m * n..], n, 1,
                        1.0, &mut g[i * k * n..], n, 1,
                    );
                }
            });
        }
        Op::BmmNt(a, b) => {
            let av = nodes[*a].value.clone();
            let bv = nodes[*b].value.clone();
            let (bs, m, k) = (av.shape()[0], av.shape()[1], av.shape()[2]);
            let n = bv.shape()[1];
            accumulate(grads, nodes, *a, |g| {
                for i in 0..bs {
                    gemm(
                        m, n, k,
                        &gout[i * m * n..], n, 1,
                        &bv.data()[i * n * k..], k, 1,
                        1.0, &mut g[i * m * k..], k, 1,
                    );
                }
            });
            accumulate(grads, nodes, *b, |g| {
                for i in 0..bs {
                    gemm(
                        n, m, k,
                        &gout[i * m * n..], 1, n,
                        &av.data()[i * m * k..], k, 1,
                        1.0, &mut g[i * n * k..], k, 1,
                    );
                }
            });
        }
        Op::Softmax(x) => {
            let p = *node.value.shape().last().unwrap();
            accumulate(grads, nodes, *x, |g| {
                for ((grow, yrow), orow) in g.chunks_mut(p).zip(gout.chunks(p)).zip(out.chunks(p)) {
                    let dot: f64 = yrow.iter().zip(orow).map(|(a, b)| a * b).sum();
                    for j in 0..p {
                        grow[j] += orow[j] * (yrow[j] - dot);
                    }
                }
            });
        }
        Op::LayerNorm {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
        } => {
            let gv = nodes[*gamma].value.clone();
            let c = gv.numel();
            accumulate(grads, nodes, *gamma, |g| {
                for (yrow, hrow) in gout.chunks(c).zip(xhat.chunks(c)) {
                    for j in 0..c {
                        g[j] += yrow[j] * hrow[j];
                    }
                }
            });
            accumulate(grads, nodes, *beta, |g| {
                for yrow in gout.chunks(c) {
                    for j in 0..c {
                        g[j] += yrow[j];
                    }
                }
            });
            accumulate(grads, nodes, *x, |g| {
                let cf = c as f64;
                for (r, ((grow, yrow), hrow)) in g
                    .chunks_mut(c)
                    .zip(gout.chunks(c))
                    .zip(xhat.chunks(c))
                    .enumerate()
                {
                    let mut sum_d = 0.0;
                    let mut sum_dh = 0.0;
                    for j in 0..c {
                        let d = yrow[j] * gv.data()[j];
                        sum_d += d;
                        sum_dh += d * hrow[j];
                    }
                    for j in 0..c {
                        let d = yrow[j] * gv.data()[j];
                        grow[j] += inv_std[r] / cf * (cf * d - sum_d - hrow[j] * sum_dh);
                    }
                }
            });
        }
        Op::Mean { x, outer, n, inner } => {
            let (outer, n, inner) = (*outer, *n, *inner);
            let scale = 1.0 / n as f64;
            accumulate(grads, nodes, *x, |g| {
                for o in 0..outer {
                    for k in 0..n {
                        for i in 0..inner {
                            g[(o * n + k) * inner + i] += gout[o * inner + i] * scale;
                        }
                    }
                }
            });
        }
        Op::Sum(a) => {
            accumulate(grads, nodes, *a, |g| g.iter_mut().for_each(|x| *x += gout[0]));
        }
        Op::Reshape(a) => {
            accumulate(grads, nodes, *a, |g| g.iter_mut().zip(gout).for_each(|(x, y)| *x += y));
        }
        Op::Gather {
            x,
            src,
            outer,
            n,
            inner,
        } => {
            let (outer, n, inner) = (*outer, *n, *inner);
            let q = src.len();
            accumulate(grads, nodes, *x, |g| {
                for o in 0..outer {
                    for (qi, s) in src.iter().enumerate() {
                        if let Some(s) = s {
                            let from = (o * q + qi) * inner;
                            let to = (o * n + s) * inner;
                            for i in 0..inner {
                                g[to + i] += gout[from + i];
                            }
                        }
                    }
                }
            });
        }
        Op::MaskMul { x, mask, n, inner } => {
            let (n, inner) = (*n, *inner);
            accumulate(grads, nodes, *x, |g| {
                for (idx, (gx, gy)) in g.iter_mut().zip(gout).enumerate() {
                    let m = mask[(idx / inner) % n];
                    if m != 0.0 {
                        *gx += gy * m;
                    }
                }
            });
        }
        Op::Conv2d { x, w, cols } => {
            let xv = nodes[*x].value.clone();
            let wv = nodes[*w].value.clone();
            conv2d_backward(&xv, &wv, cols, node.value.shape(), gout, nodes, *x, *w, grads);
        }
        Op::Stencil { x, w, plan } => {
            let xv = nodes[*x].value.clone();
            let wv = nodes[*w].value.clone();
            let b = xv.shape()[0];
            let cin = xv.shape()[2];
            let cout = wv.shape()[2];
            let q = plan.bank.len();
            let s = plan.n_slots;
            let p = plan.n_inputs;
            accumulate(grads, nodes, *x, |g| {
                for bi in 0..b {
                    for (qi, bank) in plan.bank.iter().enumerate() {
                        let Some(bank) = bank else { continue };
                        let gy = &gout[(bi * q + qi) * cout..(bi * q + qi + 1) * cout];
                        for k in 0..s {
                            let Some(src) = plan.src[qi * s + k] else { continue };
                            let wk = &wv.data()[(bank * s + k) * cout * cin..];
                            let gx = &mut g[(bi * p + src) * cin..(bi * p + src + 1) * cin];
                            for (o, gyo) in gy.iter().enumerate() {
                                let wrow = &wk[o * cin..(o + 1) * cin];
                                for (gxi, wi) in gx.iter_mut().zip(wrow) {
                                    *gxi += gyo * wi;
                                }
                            }
                        }
                    }
                }
            });
            accumulate(grads, nodes, *w, |g| {
                for bi in 0..b {
                    for (qi, bank) in plan.bank.iter().enumerate() {
                        let Some(bank) = bank else { continue };
                        let gy = &gout[(bi * q + qi) * cout..(bi * q + qi + 1) * cout];
                        for k in 0..s {
                            let Some(src) = plan.src[qi * s + k] else { continue };
                            let xin = &xv.data()[(bi * p + src) * cin..(bi * p + src + 1) * cin];
                            let gw = &mut g[(bank * s + k) * cout * cin..];
                            for (o, gyo) in gy.iter().enumerate() {
                                let grow = &mut gw[o * cin..(o + 1) * cin];
                                for (gwi, xi) in grow.iter_mut().zip(xin) {
                                    *gwi += gyo * xi;
                                }
                            }
                        }
                    }
                }
            });
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn conv2d_backward(
    xv: &Tensor,
    wv: &Tensor,
    cols: &[f64],
    out_shape: &[usize],
    gout: &[f64],
    nodes: &[Node],
    x: usize,
    w: usize,
    grads: &mut [Option<Vec<f64>>],
) {
    let (b, hp, wp, cin) = (xv.shape()[0], xv.shape()[1], xv.shape()[2], xv.shape()[3]);
    let (kh, kw, cout) = (wv.shape()[0], wv.shape()[1], wv.shape()[2]);
    let (ho, wo) = (out_shape[1], out_shape[2]);
    let m = b * ho * wo;
    let kk = kh * kw * cin;
    accumulate(grads, nodes, w, |g| {
        for mn in 0..kh * kw {
            gemm(
                cin, m, cout,
                &cols[mn * cin..], 1, kk,
                gout, cout, 1,
                1.0, &mut g[mn * cout * cin..], 1, cin,
            );
        }
    });
    accumulate(grads, nodes, x, |g| {
        let mut dcols = vec![0.0; m * kk];
        for mn in 0..kh * kw {
            gemm(
                m, cout, cin,
                gout, cout, 1,
                &wv.data()[mn * cout * cin..], cin, 1,
                0.0, &mut dcols[mn * cin..], kk, 1,
            );
        }
        for bi in 0..b {
            for i in 0..ho {
                for j in 0..wo {
                    let row = ((bi * ho + i) * wo + j) * kk;
                    for mi in 0..kh {
                        for ni in 0..kw {
                            let src = ((bi * hp + i + kh - 1 - mi) * wp + j + kw - 1 - ni) * cin;
                            let c0 = row + (mi * kw + ni) * cin;
                            for c in 0..cin {
                                g[src + c] += dcols[c0 + c];
                            }
                        }
                    }
                }
            }
        }
    });
}

/// Gradients of one backward pass.
pub struct Gradients {
    by_node: Vec<Option<Tensor>>,
    params: Vec<(ParamId, usize)>,
}

impl Gradients {
    /// Gradient with respect to any recorded variable, zero-filled when the
    /// variable did not influence the loss.
    pub fn of(&self, v: Var<'_>) -> Tensor {
        match self.by_node.get(v.id).and_then(Option::as_ref) {
            Some(t) => t.clone(),
            None => Tensor::zeros(v.g.value(v.id).shape()),
        }
    }

    /// Gradient per parameter, aligned with `params`.
    pub fn param_grads(&self, params: &Parameters) -> ParamGrads {
        let mut out = params.zeros_like();
        for &(pid, node) in &self.params {
            if let Some(Some(g)) = self.by_node.get(node) {
                for (x, y) in out.values[pid.0].data_mut().iter_mut().zip(g.data()) {
                    *x += y;
                }
            }
        }
        out
    }
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

impl<'g> Var<'g> {
    pub fn value(&self) -> Rc<Tensor> {
        self.g.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn graph(&self) -> &'g Graph {
        self.g
    }

    fn needs(&self) -> bool {
        self.g.needs(self.id)
    }

    fn same_shape(&self, other: &Var<'g>, op: &'static str) -> Result<(Rc<Tensor>, Rc<Tensor>)> {
        let a = self.value();
        let b = other.value();
        if a.shape() != b.shape() {
            return Err(shape_err(op, &a, &b));
        }
        Ok((a, b))
    }

    fn zip_with(&self, other: &Var<'g>, op: &'static str, f: impl Fn(f64, f64) -> f64, tag: fn(usize, usize) -> Op) -> Result<Var<'g>> {
        let (a, b) = self.same_shape(other, op)?;
        let data = a.data().iter().zip(b.data()).map(|(x, y)| f(*x, *y)).collect();
        let t = Tensor::new(a.shape().to_vec(), data)?;
        Ok(self.g.push(t, tag(self.id, other.id), self.needs() || other.needs()))
    }

    pub fn add(&self, other: &Var<'g>) -> Result<Var<'g>> {
        self.zip_with(other, "add", |x, y| x + y, Op::Add)
    }

    pub fn sub(&self, other: &Var<'g>) -> Result<Var<'g>> {
        self.zip_with(other, "sub", |x, y| x - y, Op::Sub)
    }

    /// Elementwise product.
    pub fn mul(&self, other: &Var<'g>) -> Result<Var<'g>> {
        self.zip_with(other, "mul", |x, y| x * y, Op::Mul)
    }

    pub fn scale(&self, s: f64) -> Var<'g> {
        let a = self.value();
        let data = a.data().iter().map(|x| x * s).collect();
        let t = Tensor::new(a.shape().to_vec(), data).unwrap();
        self.g.push(t, Op::Scale(self.id, s), self.needs())
    }

    fn unary(&self, f: impl Fn(f64) -> f64, op: Op) -> Var<'g> {
        let a = self.value();
        let data = a.data().iter().map(|&x| f(x)).collect();
        let t = Tensor::new(a.shape().to_vec(), data).unwrap();
        self.g.push(t, op, self.needs())
    }

    pub fn relu(&self) -> Var<'g> {
        self.unary(|x| x.max(0.0), Op::Relu(self.id))
    }

    pub fn sigmoid(&self) -> Var<'g> {
        self.unary(sigmoid, Op::Sigmoid(self.id))
    }

    pub fn exp(&self) -> Var<'g> {
        self.unary(f64::exp, Op::Exp(self.id))
    }

    /// Adds a `[C]` bias along the last axis.
    pub fn add_bias(&self, bias: &Var<'g>) -> Result<Var<'g>> {
        let a = self.value();
        let b = bias.value();
        let c = b.numel();
        if b.shape().len() != 1 || a.shape().last() != Some(&c) {
            return Err(shape_err("add_bias", &a, &b));
        }
        let mut data = a.data().to_vec();
        for row in data.chunks_mut(c) {
            for (x, y) in row.iter_mut().zip(b.data()) {
                *x += y;
            }
        }
        let t = Tensor::new(a.shape().to_vec(), data)?;
        Ok(self.g.push(t, Op::AddBias(self.id, bias.id), self.needs() || bias.needs()))
    }

    /// `x[b, p, c] * s[b, c]`.
    pub fn mul_channels(&self, s: &Var<'g>) -> Result<Var<'g>> {
        let x = self.value();
        let sv = s.value();
        let sh = x.shape();
        if sh.len() != 3 || sv.shape() != [sh[0], sh[2]] {
            return Err(shape_err("mul_channels", &x, &sv));
        }
        let (b, p, c) = (sh[0], sh[1], sh[2]);
        let mut data = x.data().to_vec();
        for bi in 0..b {
            for pi in 0..p {
                let off = (bi * p + pi) * c;
                for ci in 0..c {
                    data[off + ci] *= sv.data()[bi * c + ci];
                }
            }
        }
        let t = Tensor::new(sh.to_vec(), data)?;
        Ok(self.g.push(t, Op::MulChannels(self.id, s.id), self.needs() || s.needs()))
    }

    /// `[..., K] x [K, N] -> [..., N]`.
    pub fn matmul(&self, other: &Var<'g>) -> Result<Var<'g>> {
        let a = self.value();
        let b = other.value();
        if b.shape().len() != 2 || a.shape().last() != Some(&b.shape()[0]) {
            return Err(shape_err("matmul", &a, &b));
        }
        let (k, n) = (b.shape()[0], b.shape()[1]);
        let m = a.numel() / k;
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, a.data(), k, 1, b.data(), n, 1, 0.0, &mut out, n, 1);
        let mut shape = a.shape().to_vec();
        *shape.last_mut().unwrap() = n;
        let t = Tensor::new(shape, out)?;
        Ok(self.g.push(t, Op::Matmul(self.id, other.id), self.needs() || other.needs()))
    }

    /// Batched `[B, M, K] x [B, K, N] -> [B, M, N]`.
    pub fn bmm(&self, other: &Var<'g>) -> Result<Var<'g>> {
        let a = self.value();
        let b = other.value();
        let (sa, sb) = (a.shape(), b.shape());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(shape_err("bmm", &a, &b));
        }
        let (bs, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let mut out = vec![0.0; bs * m * n];
        for i in 0..bs {
            gemm(
                m, k, n,
                &a.data()[i * m * k..], k, 1,
                &b.data()[i * k * n..], n, 1,
                0.0, &mut out[i * m * n..], n, 1,
            );
        }
        let t = Tensor::new(vec![bs, m, n], out)?;
        Ok(self.g.push(t, Op::Bmm(self.id, other.id), self.needs() || other.needs()))
    }

    /// Batched `[B, M, K] x [B, N, K]^T -> [B, M, N]`.
    pub fn bmm_nt(&self, other: &Var<'g>) -> Result<Var<'g>> {
        let a = self.value();
        let b = other.value();
        let (sa, sb) = (a.shape(), b.shape());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[2] {
            return Err(shape_err("bmm_nt", &a, &b));
        }
        let (bs, m, k, n) = (sa[0], sa[1], sa[2], sb[1]);
        let mut out = vec![0.0; bs * m * n];
        for i in 0..bs {
            gemm(
                m, k, n,
                &a.data()[i * m * k..], k, 1,
                &b.data()[i * n * k..], 1, k,
                0.0, &mut out[i * m * n..], n, 1,
            );
        }
        let t = Tensor::new(vec![bs, m, n], out)?;
        Ok(self.g.push(t, Op::BmmNt(self.id, other.id), self.needs() || other.needs()))
    }

    /// Softmax over the last axis. Positions with `keep[j] == false` get
    /// weight exactly zero.
    pub fn softmax(&self, keep: Option<Arc<Vec<bool>>>) -> Result<Var<'g>> {
        let a = self.value();
        let p = *a.shape().last().unwrap_or(&1);
        if let Some(k) = &keep {
            if k.len() != p {
                return Err(Error::Shape {
                    op: "softmax",
                    lhs: a.shape().to_vec(),
                    rhs: vec![k.len()],
                });
            }
        }
        let kept = |j: usize| keep.as_ref().map_or(true, |k| k[j]);
        let mut out = vec![0.0; a.numel()];
        for (orow, xrow) in out.chunks_mut(p).zip(a.data().chunks(p)) {
            let mut mx = f64::NEG_INFINITY;
            for j in 0..p {
                if kept(j) {
                    mx = mx.max(xrow[j]);
                }
            }
            if mx == f64::NEG_INFINITY {
                continue;
            }
            let mut z = 0.0;
            for j in 0..p {
                if kept(j) {
                    orow[j] = (xrow[j] - mx).exp();
                    z += orow[j];
                }
            }
            orow.iter_mut().for_each(|v| *v /= z);
        }
        let t = Tensor::new(a.shape().to_vec(), out)?;
        Ok(self.g.push(t, Op::Softmax(self.id), self.needs()))
    }

    /// Normalises over the last axis, then applies `gamma * xhat + beta`.
    pub fn layer_norm(&self, gamma: &Var<'g>, beta: &Var<'g>) -> Result<Var<'g>> {
        let a = self.value();
        let gv = gamma.value();
        let bv = beta.value();
        let c = gv.numel();
        if a.shape().last() != Some(&c) || bv.numel() != c {
            return Err(shape_err("layer_norm", &a, &gv));
        }
        let rows = a.numel() / c;
        let mut xhat = vec![0.0; a.numel()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; a.numel()];
        for r in 0..rows {
            let x = &a.data()[r * c..(r + 1) * c];
            let mean = x.iter().sum::<f64>() / c as f64;
            let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std[r] = is;
            for j in 0..c {
                let h = (x[j] - mean) * is;
                xhat[r * c + j] = h;
                out[r * c + j] = gv.data()[j] * h + bv.data()[j];
            }
        }
        let t = Tensor::new(a.shape().to_vec(), out)?;
        let needs = self.needs() || gamma.needs() || beta.needs();
        let (xhat, inv_std) = if needs && self.g.record {
            (xhat, inv_std)
        } else {
            (Vec::new(), Vec::new())
        };
        Ok(self.g.push(
            t,
            Op::LayerNorm {
                x: self.id,
                gamma: gamma.id,
                beta: beta.id,
                xhat,
                inv_std,
            },
            needs,
        ))
    }

    /// Mean over one axis.
    pub fn mean_axis(&self, axis: usize) -> Result<Var<'g>> {
        let a = self.value();
        let sh = a.shape();
        if axis >= sh.len() {
            return Err(Error::Shape {
                op: "mean_axis",
                lhs: sh.to_vec(),
                rhs: vec![axis],
            });
        }
        let outer: usize = sh[..axis].iter().product();
        let n = sh[axis];
        let inner: usize = sh[axis + 1..].iter().product();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for k in 0..n {
                for i in 0..inner {
                    out[o * inner + i] += a.data()[(o * n + k) * inner + i];
                }
            }
        }
        out.iter_mut().for_each(|v| *v /= n as f64);
        let mut shape = sh.to_vec();
        shape.remove(axis);
        let t = Tensor::new(shape, out)?;
        Ok(self.g.push(
            t,
            Op::Mean {
                x: self.id,
                outer,
                n,
                inner,
            },
            self.needs(),
        ))
    }

    /// Mean over several axes (applied from the highest axis down).
    pub fn mean(&self, axes: &[usize]) -> Result<Var<'g>> {
        let mut sorted = axes.to_vec();
        sorted.sort_unstable_by(|a, b| b.cmp(a));
        sorted.dedup();
        let mut v = *self;
        for ax in sorted {
            v = v.mean_axis(ax)?;
        }
        Ok(v)
    }

    pub fn sum(&self) -> Var<'g> {
        let a = self.value();
        let s: f64 = a.data().iter().sum();
        self.g.push(Tensor::scalar(s), Op::Sum(self.id), self.needs())
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'g>> {
        let t = (*self.value()).clone().reshape(shape)?;
        Ok(self.g.push(t, Op::Reshape(self.id), self.needs()))
    }

    /// Collapses everything after the first axis.
    pub fn flatten(&self) -> Result<Var<'g>> {
        let sh = self.shape();
        let rest: usize = sh[1..].iter().product();
        self.reshape(&[sh[0], rest])
    }

    /// Picks positions along `axis`: output position `q` copies input
    /// position `src[q]`, or is zero for `None`.
    pub fn gather(&self, axis: usize, src: Arc<Vec<Option<usize>>>) -> Result<Var<'g>> {
        let a = self.value();
        let sh = a.shape();
        if axis >= sh.len() || src.iter().flatten().any(|&s| s >= sh[axis]) {
            return Err(Error::Shape {
                op: "gather",
                lhs: sh.to_vec(),
                rhs: vec![axis, src.len()],
            });
        }
        let outer: usize = sh[..axis].iter().product();
        let n = sh[axis];
        let inner: usize = sh[axis + 1..].iter().product();
        let q = src.len();
        let mut out = vec![0.0; outer * q * inner];
        for o in 0..outer {
            for (qi, s) in src.iter().enumerate() {
                if let Some(s) = s {
                    let from = (o * n + s) * inner;
                    let to = (o * q + qi) * inner;
                    out[to..to + inner].copy_from_slice(&a.data()[from..from + inner]);
                }
            }
        }
        let mut shape = sh.to_vec();
        shape[axis] = q;
        let t = Tensor::new(shape, out)?;
        Ok(self.g.push(
            t,
            Op::Gather {
                x: self.id,
                src,
                outer,
                n,
                inner,
            },
            self.needs(),
        ))
    }

    /// Zero padding of a `[B, H, W, C]` tensor by `pad` cells on each side.
    pub fn pad2d(&self, pad: usize) -> Result<Var<'g>> {
        let sh = self.shape();
        if sh.len() != 4 {
            return Err(Error::Shape {
                op: "pad2d",
                lhs: sh,
                rhs: vec![4],
            });
        }
        let (b, h, w, c) = (sh[0], sh[1], sh[2], sh[3]);
        let (ph, pw) = (h + 2 * pad, w + 2 * pad);
        let src: Vec<Option<usize>> = (0..ph * pw)
            .map(|k| {
                let (r, col) = (k / pw, k % pw);
                (r >= pad && r < h + pad && col >= pad && col < w + pad)
                    .then(|| (r - pad) * w + col - pad)
            })
            .collect();
        self.reshape(&[b, h * w, c])?
            .gather(1, Arc::new(src))?
            .reshape(&[b, ph, pw, c])
    }

    /// Rectangular window `[r0, r0 + h) x [c0, c0 + w)` of a `[B, H, W, C]` tensor.
    pub fn slice2d(&self, r0: usize, c0: usize, h: usize, w: usize) -> Result<Var<'g>> {
        let sh = self.shape();
        if sh.len() != 4 || r0 + h > sh[1] || c0 + w > sh[2] {
            return Err(Error::Shape {
                op: "slice2d",
                lhs: sh,
                rhs: vec![r0 + h, c0 + w],
            });
        }
        let (b, hin, win, c) = (sh[0], sh[1], sh[2], sh[3]);
        let src: Vec<Option<usize>> = (0..h * w)
            .map(|k| Some((r0 + k / w) * win + c0 + k % w))
            .collect();
        self.reshape(&[b, hin * win, c])?
            .gather(1, Arc::new(src))?
            .reshape(&[b, h, w, c])
    }

    /// Multiplies by a constant 0/1 mask laid along `axis` (broadcast over
    /// every other axis). Masked positions receive exactly zero gradient.
    pub fn mask_mul(&self, axis: usize, mask: Arc<Vec<f64>>) -> Result<Var<'g>> {
        let a = self.value();
        let sh = a.shape();
        if axis >= sh.len() || sh[axis] != mask.len() {
            return Err(Error::Shape {
                op: "mask_mul",
                lhs: sh.to_vec(),
                rhs: vec![mask.len()],
            });
        }
        let n = sh[axis];
        let inner: usize = sh[axis + 1..].iter().product();
        let data = a
            .data()
            .iter()
            .enumerate()
            .map(|(idx, x)| {
                let m = mask[(idx / inner) % n];
                if m == 0.0 {
                    0.0
                } else {
                    x * m
                }
            })
            .collect();
        let t = Tensor::new(sh.to_vec(), data)?;
        Ok(self.g.push(
            t,
            Op::MaskMul {
                x: self.id,
                mask,
                n,
                inner,
            },
            self.needs(),
        ))
    }

    /// Convolution of an already padded `[B, Hp, Wp, Cin]` input with a
    /// `[kh, kw, Cout, Cin]` kernel:
    /// `out[i, j] = sum_{m, n} W[m, n] * U[i + kh - 1 - m, j + kw - 1 - n]`.
    pub fn conv2d_valid(&self, kernel: &Var<'g>) -> Result<Var<'g>> {
        let xv = self.value();
        let wv = kernel.value();
        let (sx, sw) = (xv.shape(), wv.shape());
        if sx.len() != 4 || sw.len() != 4 || sx[3] != sw[3] || sx[1] < sw[0] || sx[2] < sw[1] {
            return Err(shape_err("conv2d_valid", &xv, &wv));
        }
        let (b, hp, wp, cin) = (sx[0], sx[1], sx[2], sx[3]);
        let (kh, kw, cout) = (sw[0], sw[1], sw[2]);
        let (ho, wo) = (hp - kh + 1, wp - kw + 1);
        let m = b * ho * wo;
        let kk = kh * kw * cin;
        let mut cols = vec![0.0; m * kk];
        for bi in 0..b {
            for i in 0..ho {
                for j in 0..wo {
                    let row = ((bi * ho + i) * wo + j) * kk;
                    for mi in 0..kh {
                        for ni in 0..kw {
                            let src = ((bi * hp + i + kh - 1 - mi) * wp + j + kw - 1 - ni) * cin;
                            let dst = row + (mi * kw + ni) * cin;
                            cols[dst..dst + cin].copy_from_slice(&xv.data()[src..src + cin]);
                        }
                    }
                }
            }
        }
        let mut out = vec![0.0; m * cout];
        for mn in 0..kh * kw {
            gemm(
                m, cin, cout,
                &cols[mn * cin..], kk, 1,
                &wv.data()[mn * cout * cin..], 1, cin,
                1.0, &mut out, cout, 1,
            );
        }
        let needs = self.needs() || kernel.needs();
        let cols = if needs && self.g.record { cols } else { Vec::new() };
        let t = Tensor::new(vec![b, ho, wo, cout], out)?;
        Ok(self.g.push(
            t,
            Op::Conv2d {
                x: self.id,
                w: kernel.id,
                cols,
            },
            needs,
        ))
    }

    /// `[B, P, Cin]` input, `[banks, slots, Cout, Cin]` weights ->
    /// `[B, Q, Cout]` with `Q = plan.bank.len()`.
    pub fn stencil_conv(&self, weights: &Var<'g>, plan: Arc<StencilPlan>) -> Result<Var<'g>> {
        let xv = self.value();
        let wv = weights.value();
        let (sx, sw) = (xv.shape(), wv.shape());
        if sx.len() != 3
            || sw.len() != 4
            || sx[1] != plan.n_inputs
            || sw[0] != plan.n_banks
            || sw[1] != plan.n_slots
            || sw[3] != sx[2]
        {
            return Err(shape_err("stencil_conv", &xv, &wv));
        }
        let (b, p, cin) = (sx[0], sx[1], sx[2]);
        let cout = sw[2];
        let q = plan.bank.len();
        let s = plan.n_slots;
        let mut out = vec![0.0; b * q * cout];
        for bi in 0..b {
            for (qi, bank) in plan.bank.iter().enumerate() {
                let Some(bank) = bank else { continue };
                let y = &mut out[(bi * q + qi) * cout..(bi * q + qi + 1) * cout];
                for k in 0..s {
                    let Some(src) = plan.src[qi * s + k] else { continue };
                    let xin = &xv.data()[(bi * p + src) * cin..(bi * p + src + 1) * cin];
                    let wk = &wv.data()[(bank * s + k) * cout * cin..];
                    for (o, yo) in y.iter_mut().enumerate() {
                        let wrow = &wk[o * cin..(o + 1) * cin];
                        *yo += wrow.iter().zip(xin).map(|(a, b)| a * b).sum::<f64>();
                    }
                }
            }
        }
        let t = Tensor::new(vec![b, q, cout], out)?;
        Ok(self.g.push(
            t,
            Op::Stencil {
                x: self.id,
                w: weights.id,
                plan,
            },
            self.needs() || weights.needs(),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
    }

    /// Central-difference check of `f` (scalar-valued) at `x`.
    fn check_grad(x: &Tensor, f: impl for<'a> Fn(&'a Graph, Var<'a>) -> Var<'a>) -> f64 {
        let g = Graph::new();
        let v = g.variable(x.clone());
        let loss = f(&g, v);
        let analytic = g.backward(loss).unwrap().of(v);
        let h = 1e-5;
        let mut num = vec![0.0; x.numel()];
        for i in 0..x.numel() {
            let eval = |delta: f64| {
                let mut xp = x.clone();
                xp.data_mut()[i] += delta;
                let g = Graph::no_grad();
                let v = g.input(xp);
                f(&g, v).value().data()[0]
            };
            num[i] = (eval(h) - eval(-h)) / (2.0 * h);
        }
        let diff: f64 = analytic
            .data()
            .iter()
            .zip(&num)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        let scale = num.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
        diff / scale
    }

    #[test]
    fn relu_value_and_gradient_at_negative_input() {
        let g = Graph::new();
        let x = g.variable(Tensor::scalar(-1.0));
        let y = x.relu();
        assert_eq!(y.value().data()[0], 0.0);
        let grads = g.backward(y.sum()).unwrap();
        assert_eq!(grads.of(x).data()[0], 0.0);
    }

    #[test]
    fn conv_of_ones_is_nine() {
        let g = Graph::no_grad();
        let x = g.input(Tensor::full(&[1, 3, 3, 1], 1.0));
        let w = g.input(Tensor::full(&[3, 3, 1, 1], 1.0));
        let y = x.conv2d_valid(&w).unwrap();
        assert_eq!(y.shape(), vec![1, 1, 1, 1]);
        assert_eq!(y.value().data()[0], 9.0);
    }

    #[test]
    fn layer_norm_of_constant_returns_offset() {
        let g = Graph::no_grad();
        let x = g.input(Tensor::full(&[2, 4], 3.5));
        let gamma = g.input(Tensor::full(&[4], 2.0));
        let beta = g.input(Tensor::new(vec![4], vec![0.1, 0.2, 0.3, 0.4]).unwrap());
        let y = x.layer_norm(&gamma, &beta).unwrap();
        assert_eq!(y.value().data(), &[0.1, 0.2, 0.3, 0.4, 0.1, 0.2, 0.3, 0.4]);
    }

    #[test]
    fn sum_of_squares_gradient() {
        let x = Tensor::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap();
        let g = Graph::new();
        let v = g.variable(x.clone());
        let loss = v.mul(&v).unwrap().sum();
        let grad = g.backward(loss).unwrap().of(v);
        assert_eq!(grad.data(), &[2.0, -4.0, 1.0]);
    }

    #[test]
    fn backward_twice_is_rejected_until_reset() {
        let g = Graph::new();
        let v = g.variable(Tensor::scalar(2.0));
        let loss = v.mul(&v).unwrap().sum();
        g.backward(loss).unwrap();
        assert!(g.backward(loss).is_err());
        g.reset_grad();
        assert!(g.backward(loss).is_ok());
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let g = Graph::new();
        let v = g.variable(Tensor::zeros(&[2]));
        assert!(matches!(g.backward(v), Err(Error::Graph(_))));
    }

    #[test]
    fn shape_errors_name_the_op() {
        let g = Graph::new();
        let a = g.input(Tensor::zeros(&[2, 3]));
        let b = g.input(Tensor::zeros(&[3, 2]));
        let err = a.add(&b).unwrap_err().to_string();
        assert!(err.contains("add") && err.contains("[2, 3]") && err.contains("[3, 2]"));
        assert!(a.matmul(&a).is_err());
    }

    #[test]
    fn mask_mul_blocks_gradient() {
        let g = Graph::new();
        let x = g.variable(Tensor::from_fn(&[2, 3, 2], |i| i as f64 + 1.0));
        let mask = Arc::new(vec![1.0, 0.0, 1.0]);
        let y = x.mask_mul(1, mask).unwrap();
        let loss = y.mul(&y).unwrap().sum();
        let grad = g.backward(loss).unwrap().of(x);
        for b in 0..2 {
            for c in 0..2 {
                assert_eq!(grad.data()[(b * 3 + 1) * 2 + c], 0.0);
                assert_eq!(y.value().data()[(b * 3 + 1) * 2 + c], 0.0);
            }
        }
    }

    #[test]
    fn softmax_masked_keys_get_zero_weight() {
        let g = Graph::no_grad();
        let x = g.input(Tensor::new(vec![1, 3], vec![1.0, 50.0, 2.0]).unwrap());
        let y = x.softmax(Some(Arc::new(vec![true, false, true]))).unwrap();
        let v = y.value();
        assert_eq!(v.data()[1], 0.0);
        assert!((v.data()[0] + v.data()[2] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn pad_and_slice_invert() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let t = rand_tensor(&mut rng, &[2, 3, 4, 2]);
        let g = Graph::no_grad();
        let x = g.input(t.clone());
        let y = x.pad2d(1).unwrap();
        assert_eq!(y.shape(), vec![2, 5, 6, 2]);
        assert_eq!(y.value().data()[0], 0.0);
        let z = y.slice2d(1, 1, 3, 4).unwrap();
        assert_eq!(*z.value(), t);
    }

    #[test]
    fn finite_differences_per_op() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let w = rand_tensor(&mut rng, &[3, 3, 2, 3]);
        let kmat = rand_tensor(&mut rng, &[3, 4]);
        let bias = rand_tensor(&mut rng, &[3]);
        let gamma = rand_tensor(&mut rng, &[3]);
        let beta = rand_tensor(&mut rng, &[3]);
        let probe = rand_tensor(&mut rng, &[2, 4, 5, 3]);
        let x = rand_tensor(&mut rng, &[2, 4, 5, 3]);

        // Every output is contracted with a fixed random probe so the loss
        // depends on all entries.
        fn contract_with<'a>(probe: &Tensor, g: &'a Graph, y: Var<'a>) -> Var<'a> {
            let t = Tensor::from_fn(&y.shape(), |i| probe.data()[i % probe.numel()]);
            let p = g.input(t);
            y.mul(&p).unwrap().sum()
        }

        let cases: Vec<(&str, Box<dyn for<'a> Fn(&'a Graph, Var<'a>) -> Var<'a>>)> = vec![
            ("add/sub/mul/scale", Box::new(|g, v| {
                let c = v.mul(&v).unwrap().sub(&v.scale(0.3)).unwrap().add(&v).unwrap();
                contract_with(&probe, g, c)
            })),
            ("sigmoid/exp/relu", Box::new(|g, v| {
                let c = v.sigmoid().add(&v.scale(0.5).exp()).unwrap().add(&v.relu()).unwrap();
                contract_with(&probe, g, c)
            })),
            ("conv2d_valid", Box::new(|g, v| {
                let k = g.input(w.clone());
                let c = v.conv2d_valid(&k).unwrap();
                contract_with(&probe, g, c)
            })),
            ("matmul+bias", Box::new(|g, v| {
                let k = g.input(kmat.clone());
                let b = g.input(Tensor::zeros(&[4]));
                let c = v.matmul(&k).unwrap().add_bias(&b).unwrap();
                contract_with(&probe, g, c)
            })),
            ("layer_norm", Box::new(|g, v| {
                let ga = g.input(gamma.clone());
                let be = g.input(beta.clone());
                contract_with(&probe, g, v.layer_norm(&ga, &be).unwrap())
            })),
            ("softmax", Box::new(|g, v| {
                let keep = Arc::new(vec![true, false, true]);
                contract_with(&probe, g, v.softmax(Some(keep)).unwrap())
            })),
            ("mean/mul_channels", Box::new(|g, v| {
                let r = v.reshape(&[2, 20, 3]).unwrap();
                let s = r.mean_axis(1).unwrap().sigmoid();
                contract_with(&probe, g, r.mul_channels(&s).unwrap())
            })),
            ("bmm/bmm_nt", Box::new(|g, v| {
                let r = v.reshape(&[2, 20, 3]).unwrap();
                let att = r.bmm_nt(&r).unwrap().scale(0.2).softmax(None).unwrap();
                contract_with(&probe, g, att.bmm(&r).unwrap())
            })),
            ("pad/slice/gather", Box::new(|g, v| {
                let p = v.pad2d(1).unwrap().slice2d(0, 1, 5, 5).unwrap();
                contract_with(&probe, g, p)
            })),
            ("bias grad", Box::new(|g, v| {
                let r = v.reshape(&[40, 3]).unwrap();
                let b = g.input(bias.clone());
                contract_with(&probe, g, r.add_bias(&b).unwrap().mul(&r).unwrap())
            })),
        ];
        for (name, f) in cases {
            let err = check_grad(&x, f);
            assert!(err < 1e-5, "{name}: relative error {err}");
        }
    }

    #[test]
    fn kernel_and_parameter_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut params = Parameters::new();
        let wid = params.insert("w", rand_tensor(&mut rng, &[3, 3, 2, 2])).unwrap();
        let gid = params.insert("gamma", rand_tensor(&mut rng, &[2])).unwrap();
        let bid = params.insert("beta", rand_tensor(&mut rng, &[2])).unwrap();
        let x = rand_tensor(&mut rng, &[2, 5, 5, 2]);
        let loss_of = |p: &Parameters, g: &Graph| -> f64 {
            let xv = g.input(x.clone());
            let w = g.param(p, wid);
            let y = xv.conv2d_valid(&w).unwrap();
            let ln = y.layer_norm(&g.param(p, gid), &g.param(p, bid)).unwrap();
            let l = ln.mul(&ln).unwrap().sum();
            l.value().data()[0]
        };
        let g = Graph::new();
        let xv = g.input(x.clone());
        let y = xv.conv2d_valid(&g.param(&params, wid)).unwrap();
        let ln = y
            .layer_norm(&g.param(&params, gid), &g.param(&params, bid))
            .unwrap();
        let loss = ln.mul(&ln).unwrap().sum();
        let grads = g.backward(loss).unwrap().param_grads(&params);
        for id in params.ids() {
            let n = params.get(id).numel();
            let mut num = vec![0.0; n];
            for i in 0..n {
                let mut pp = params.clone();
                pp.get_mut(id).data_mut()[i] += 1e-5;
                let up = loss_of(&pp, &Graph::no_grad());
                pp.get_mut(id).data_mut()[i] -= 2e-5;
                let dn = loss_of(&pp, &Graph::no_grad());
                num[i] = (up - dn) / 2e-5;
            }
            let a = grads.get(id).data();
            let diff: f64 = a.iter().zip(&num).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
            let scale: f64 = num.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!(diff / scale < 1e-5, "{}: {}", params.name(id), diff / scale);
        }
    }

    #[test]
    fn stencil_matches_direct_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let plan = Arc::new(StencilPlan {
            n_inputs: 4,
            n_slots: 2,
            n_banks: 2,
            bank: vec![Some(0), Some(1), None],
            src: vec![Some(0), Some(3), Some(2), None, Some(1), Some(1)],
        });
        let x = rand_tensor(&mut rng, &[1, 4, 2]);
        let w = rand_tensor(&mut rng, &[2, 2, 1, 2]);
        let g = Graph::no_grad();
        let y = g
            .input(x.clone())
            .stencil_conv(&g.input(w.clone()), plan)
            .unwrap();
        let dot = |bank: usize, slot: usize, site: usize| -> f64 {
            (0..2)
                .map(|c| w.data()[(bank * 2 + slot) * 2 + c] * x.data()[site * 2 + c])
                .sum()
        };
        let v = y.value();
        assert!((v.data()[0] - dot(0, 0, 0) - dot(0, 1, 3)).abs() < 1e-14);
        assert!((v.data()[1] - dot(1, 0, 2)).abs() < 1e-14);
        assert_eq!(v.data()[2], 0.0);
        let err = check_grad(&x, |g, v| {
            let wv = g.input(w.clone());
            let plan = Arc::new(StencilPlan {
                n_inputs: 4,
                n_slots: 2,
                n_banks: 2,
                bank: vec![Some(0), Some(1), None],
                src: vec![Some(0), Some(3), Some(2), None, Some(1), Some(1)],
            });
            let y = v.stencil_conv(&wv, plan).unwrap();
            y.mul(&y).unwrap().sum()
        });
        assert!(err < 1e-6);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn conv_finite_difference_on_random_shapes(
            h in 3usize..6, w in 3usize..6, cin in 1usize..3, cout in 1usize..3, seed in 0u64..1000
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = rand_tensor(&mut rng, &[1, h, w, cin]);
            let k = rand_tensor(&mut rng, &[3, 3, cout, cin]);
            let err = check_grad(&x, |g, v| {
                let y = v.conv2d_valid(&g.input(k.clone())).unwrap();
                y.mul(&y).unwrap().sum()
            });
            prop_assert!(err < 1e-5);
        }

        #[test]
        fn evaluation_is_deterministic(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = rand_tensor(&mut rng, &[2, 4, 4, 2]);
            let k = rand_tensor(&mut rng, &[3, 3, 2, 2]);
            let run = || {
                let g = Graph::no_grad();
                let y = g.input(x.clone()).conv2d_valid(&g.input(k.clone())).unwrap();
                let v = y.reshape(&[2, 8]).unwrap().softmax(None).unwrap();
                (*v.value()).clone()
            };
            prop_assert_eq!(run(), run());
        }
    }
}
