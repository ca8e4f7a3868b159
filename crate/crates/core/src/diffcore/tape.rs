use std::cell::RefCell;
use std::collections::HashMap;
use std::rc::Rc;

use super::tensor::{matmul_into, transpose};
use super::{DiffError, ParamId, ParamSet, Tensor};

pub type NodeId = usize;

/// Elementwise operation kinds exposed through [`Tape::elementwise`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Elementwise {
    Add,
    Sub,
    Mul,
    Div,
    Exp,
    Log,
    Tanh,
    Silu,
    Neg,
    Scale(f64),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reduction {
    Sum,
    Mean,
    Max,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Unary {
    Exp,
    Log,
    Tanh,
    Silu,
    Neg,
    Scale(f64),
    Offset(f64),
    Sqrt,
    Softplus,
    Sigmoid,
    Square,
    Clamp(f64, f64),
}

/// How the right operand of a binary op maps onto the left operand's layout.
#[derive(Clone, Copy, Debug)]
enum Bcast {
    Same,
    Scalar,
    /// Right shape is a suffix of the left shape; it repeats every `n` elements.
    Suffix(usize),
    /// Right shape equals the left with a trailing singleton; one value per row of width `w`.
    Column(usize),
}

impl Bcast {
    fn resolve(a: &[usize], b: &[usize]) -> Option<Bcast> {
        if a == b {
            return Some(Bcast::Same);
        }
        let bn: usize = b.iter().product();
        if bn == 1 {
            return Some(Bcast::Scalar);
        }
        if b.len() <= a.len() && a[a.len() - b.len()..] == *b {
            return Some(Bcast::Suffix(bn));
        }
        if b.len() == a.len() && b.last() == Some(&1) && a[..a.len() - 1] == b[..b.len() - 1] {
            return Some(Bcast::Column(*a.last().unwrap()));
        }
        None
    }

    #[inline]
    fn index(self, i: usize) -> usize {
        match self {
            Bcast::Same => i,
            Bcast::Scalar => 0,
            Bcast::Suffix(n) => i % n,
            Bcast::Column(w) => i / w,
        }
    }
}

/// Saved context for the fused selective-scan node.
#[derive(Debug)]
struct ScanNode {
    x: NodeId,
    delta: NodeId,
    a: NodeId,
    b: NodeId,
    c: NodeId,
    batch: usize,
    steps: usize,
    channels: usize,
    state: usize,
    /// Hidden states after each step, `[batch, steps, channels, state]`.
    hidden: Vec<f64>,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    Binary {
        kind: Binary,
        a: NodeId,
        b: NodeId,
        bcast: Bcast,
    },
    Unary {
        kind: Unary,
        a: NodeId,
    },
    MatMul {
        a: NodeId,
        b: NodeId,
        m: usize,
        k: usize,
        n: usize,
    },
    BatchMatMul {
        a: NodeId,
        b: NodeId,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        trans_b: bool,
    },
    Reduce {
        kind: Reduction,
        a: NodeId,
        outer: usize,
        len: usize,
        inner: usize,
        argmax: Vec<usize>,
    },
    Softmax {
        a: NodeId,
        width: usize,
    },
    Reshape {
        a: NodeId,
    },
    Transpose {
        a: NodeId,
        batch: usize,
        rows: usize,
        cols: usize,
    },
    Narrow {
        a: NodeId,
        outer: usize,
        len_in: usize,
        start: usize,
        len: usize,
        inner: usize,
    },
    Concat {
        parts: Vec<(NodeId, usize)>,
        outer: usize,
        total: usize,
        inner: usize,
    },
    Gather {
        a: NodeId,
        index: Rc<[usize]>,
        width_in: usize,
    },
    CausalConv {
        x: NodeId,
        w: NodeId,
        bias: NodeId,
        batch: usize,
        steps: usize,
        channels: usize,
        kernel: usize,
    },
    Scan(Box<ScanNode>),
}

impl Op {
    fn parents(&self) -> Vec<NodeId> {
        match self {
            Op::Leaf | Op::Param(_) => vec![],
            Op::Binary { a, b, .. } | Op::MatMul { a, b, .. } | Op::BatchMatMul { a, b, .. } => {
                vec![*a, *b]
            }
            Op::Unary { a, .. }
            | Op::Reduce { a, .. }
            | Op::Softmax { a, .. }
            | Op::Reshape { a }
            | Op::Transpose { a, .. }
            | Op::Narrow { a, .. }
            | Op::Gather { a, .. } => vec![*a],
            Op::Concat { parts, .. } => parts.iter().map(|p| p.0).collect(),
            Op::CausalConv { x, w, bias, .. } => vec![*x, *w, *bias],
            Op::Scan(s) => vec![s.x, s.delta, s.a, s.b, s.c],
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Recorded computation graph for one forward pass.
///
/// Nodes are appended in evaluation order, so the tape is topologically
/// sorted by construction. A tape is single-threaded; build one per worker.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    params: RefCell<HashMap<ParamId, NodeId>>,
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: NodeId,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

type R<'t> = Result<Var<'t>, DiffError>;

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, op: Op) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        let needs_grad = match &op {
            Op::Leaf => false,
            Op::Param(_) => true,
            other => other.parents().iter().any(|&p| nodes[p].needs_grad),
        };
        nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// A constant: no gradient flows into it.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf)
    }

    /// A differentiable input whose gradient can be read from [`Gradients`].
    pub fn input(&self, value: Tensor) -> Var<'_> {
        let v = self.push(value, Op::Leaf);
        self.nodes.borrow_mut()[v.id].needs_grad = true;
        v
    }

    /// Leaf bound to a learnable parameter; repeated calls share one node.
    pub fn param(&self, params: &ParamSet, id: ParamId) -> Var<'_> {
        if let Some(&node) = self.params.borrow().get(&id) {
            return Var {
                tape: self,
                id: node,
            };
        }
        let v = self.push(params.value(id).clone(), Op::Param(id));
        self.params.borrow_mut().insert(id, v.id);
        v
    }

    fn value_of(&self, id: NodeId) -> std::cell::Ref<'_, Tensor> {
        std::cell::Ref::map(self.nodes.borrow(), |n| &n[id].value)
    }

    /// Generic elementwise entry point; binary kinds require `b`.
    pub fn elementwise<'t>(&'t self, kind: Elementwise, a: Var<'t>, b: Option<Var<'t>>) -> R<'t> {
        let need_b = || b.ok_or(DiffError::MissingOperand);
        match kind {
            Elementwise::Add => a.add(need_b()?),
            Elementwise::Sub => a.sub(need_b()?),
            Elementwise::Mul => a.mul(need_b()?),
            Elementwise::Div => a.div(need_b()?),
            Elementwise::Exp => Ok(a.exp()),
            Elementwise::Log => a.log(),
            Elementwise::Tanh => Ok(a.tanh()),
            Elementwise::Silu => Ok(a.silu()),
            Elementwise::Neg => Ok(a.neg()),
            Elementwise::Scale(c) => Ok(a.scale(c)),
        }
    }

    /// Reverse pass: accumulates d(loss)/d(param) into `params` gradient buffers.
    pub fn backward(&self, loss: Var<'_>, params: &mut ParamSet) -> Result<Gradients, DiffError> {
        let grads = self.gradients(loss)?;
        let nodes = self.nodes.borrow();
        for (id, node) in nodes.iter().enumerate() {
            if let Op::Param(pid) = node.op {
                if let Some(g) = &grads.grads[id] {
                    for (dst, src) in params.grad_mut(pid).iter_mut().zip(g) {
                        *dst += src;
                    }
                }
            }
        }
        Ok(grads)
    }

    /// Reverse pass returning gradients indexed by [`ParamId`], leaving `params` untouched.
    ///
    /// Entries are `None` for parameters that never reached the loss.
    pub fn param_gradients(&self, loss: Var<'_>, n_params: usize) -> Result<Vec<Option<Vec<f64>>>, DiffError> {
        let mut grads = self.gradients(loss)?;
        let mut out = vec![None; n_params];
        for (&pid, &node) in self.params.borrow().iter() {
            if pid.0 < n_params {
                out[pid.0] = grads.grads[node].take();
            }
        }
        Ok(out)
    }

    /// Reverse pass returning per-node gradients without touching parameters.
    pub fn gradients(&self, loss: Var<'_>) -> Result<Gradients, DiffError> {
        let nodes = self.nodes.borrow();
        let shape = nodes[loss.id].value.shape().to_vec();
        if nodes[loss.id].value.numel() != 1 {
            return Err(DiffError::NonScalarLoss { shape });
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.id] = Some(vec![1.0]);
        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if node.needs_grad {
                backprop(&nodes, id, &g, &mut grads);
            }
            grads[id] = Some(g);
        }
        let shapes = nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }
}

/// Per-node gradients from one reverse pass.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient with respect to `v`; zero when `v` does not reach the loss.
    pub fn wrt(&self, v: Var<'_>) -> Tensor {
        match &self.grads[v.id] {
            Some(g) => Tensor::new(self.shapes[v.id].clone(), g.clone()).expect("gradient shape"),
            None => Tensor::zeros(self.shapes[v.id].clone()),
        }
    }
}

fn slot<'g>(grads: &'g mut [Option<Vec<f64>>], nodes: &[Node], id: NodeId) -> Option<&'g mut Vec<f64>> {
    if !nodes[id].needs_grad {
        return None;
    }
    let n = nodes[id].value.numel();
    Some(grads[id].get_or_insert_with(|| vec![0.0; n]))
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// `(e^u - 1) / u`, the zero-order-hold input factor, with its series limit.
#[inline]
pub(crate) fn zoh_phi(u: f64) -> f64 {
    if u.abs() < 1e-6 {
        1.0 + u / 2.0 + u * u / 6.0
    } else {
        u.exp_m1() / u
    }
}

/// Derivative of [`zoh_phi`].
#[inline]
pub(crate) fn zoh_phi_prime(u: f64) -> f64 {
    if u.abs() < 1e-3 {
        0.5 + u / 3.0 + u * u / 8.0 + u * u * u / 30.0
    } else {
        (u * u.exp() - u.exp_m1()) / (u * u)
    }
}

fn backprop(nodes: &[Node], id: NodeId, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let out = &nodes[id].value;
    match &nodes[id].op {
        Op::Leaf | Op::Param(_) => {}
        Op::Binary { kind, a, b, bcast } => {
            let av = nodes[*a].value.data();
            let bv = nodes[*b].value.data();
            if let Some(ga) = slot(grads, nodes, *a) {
                match kind {
                    Binary::Add | Binary::Sub => ga.iter_mut().zip(g).for_each(|(d, gi)| *d += gi),
                    Binary::Mul => {
                        for (i, d) in ga.iter_mut().enumerate() {
                            *d += g[i] * bv[bcast.index(i)];
                        }
                    }
                    Binary::Div => {
                        for (i, d) in ga.iter_mut().enumerate() {
                            *d += g[i] / bv[bcast.index(i)];
                        }
                    }
                }
            }
            if let Some(gb) = slot(grads, nodes, *b) {
                for (i, gi) in g.iter().enumerate() {
                    let j = bcast.index(i);
                    gb[j] += match kind {
                        Binary::Add => *gi,
                        Binary::Sub => -gi,
                        Binary::Mul => gi * av[i],
                        Binary::Div => -gi * av[i] / (bv[j] * bv[j]),
                    };
                }
            }
        }
        Op::Unary { kind, a } => {
            let x = nodes[*a].value.data();
            let y = out.data();
            if let Some(ga) = slot(grads, nodes, *a) {
                for i in 0..g.len() {
                    ga[i] += g[i]
                        * match *kind {
                            Unary::Exp => y[i],
                            Unary::Log => 1.0 / x[i],
                            Unary::Tanh => 1.0 - y[i] * y[i],
                            Unary::Silu => {
                                let s = sigmoid(x[i]);
                                s * (1.0 + x[i] * (1.0 - s))
                            }
                            Unary::Neg => -1.0,
                            Unary::Scale(c) => c,
                            Unary::Offset(_) => 1.0,
                            Unary::Sqrt => {
                                if y[i] > 0.0 {
                                    0.5 / y[i]
                                } else {
                                    0.0
                                }
                            }
                            Unary::Softplus => sigmoid(x[i]),
                            Unary::Sigmoid => y[i] * (1.0 - y[i]),
                            Unary::Square => 2.0 * x[i],
                            Unary::Clamp(lo, hi) => {
                                if x[i] >= lo && x[i] <= hi {
                                    1.0
                                } else {
                                    0.0
                                }
                            }
                        };
                }
            }
        }
        Op::MatMul { a, b, m, k, n } => {
            let (m, k, n) = (*m, *k, *n);
            if nodes[*a].needs_grad {
                let bt = transpose(nodes[*b].value.data(), k, n);
                let mut tmp = vec![0.0; m * k];
                matmul_into(g, &bt, m, n, k, &mut tmp);
                let ga = slot(grads, nodes, *a).unwrap();
                ga.iter_mut().zip(&tmp).for_each(|(d, t)| *d += t);
            }
            if nodes[*b].needs_grad {
                let at = transpose(nodes[*a].value.data(), m, k);
                let mut tmp = vec![0.0; k * n];
                matmul_into(&at, g, k, m, n, &mut tmp);
                let gb = slot(grads, nodes, *b).unwrap();
                gb.iter_mut().zip(&tmp).for_each(|(d, t)| *d += t);
            }
        }
        Op::BatchMatMul {
            a,
            b,
            batch,
            m,
            k,
            n,
            trans_b,
        } => {
            let (m, k, n) = (*m, *k, *n);
            let av = nodes[*a].value.data();
            let bv = nodes[*b].value.data();
            if nodes[*a].needs_grad {
                let mut ga_all = vec![0.0; batch * m * k];
                for i in 0..*batch {
                    let gi = &g[i * m * n..(i + 1) * m * n];
                    let bi = &bv[i * k * n..(i + 1) * k * n];
                    let dst = &mut ga_all[i * m * k..(i + 1) * m * k];
                    if *trans_b {
                        // c = a·bᵀ with b [n,k]: ga = g·b
                        matmul_into(gi, bi, m, n, k, dst);
                    } else {
                        let bt = transpose(bi, k, n);
                        matmul_into(gi, &bt, m, n, k, dst);
                    }
                }
                let ga = slot(grads, nodes, *a).unwrap();
                ga.iter_mut().zip(&ga_all).for_each(|(d, t)| *d += t);
            }
            if nodes[*b].needs_grad {
                let mut gb_all = vec![0.0; batch * k * n];
                for i in 0..*batch {
                    let gi = &g[i * m * n..(i + 1) * m * n];
                    let ai = &av[i * m * k..(i + 1) * m * k];
                    let dst = &mut gb_all[i * k * n..(i + 1) * k * n];
                    if *trans_b {
                        // gb [n,k] = gᵀ·a
                        let gt = transpose(gi, m, n);
                        matmul_into(&gt, ai, n, m, k, dst);
                    } else {
                        let at = transpose(ai, m, k);
                        matmul_into(&at, gi, k, m, n, dst);
                    }
                }
                let gb = slot(grads, nodes, *b).unwrap();
                gb.iter_mut().zip(&gb_all).for_each(|(d, t)| *d += t);
            }
        }
        Op::Reduce {
            kind,
            a,
            outer,
            len,
            inner,
            argmax,
        } => {
            let (outer, len, inner) = (*outer, *len, *inner);
            if let Some(ga) = slot(grads, nodes, *a) {
                for o in 0..outer {
                    for i in 0..inner {
                        let gi = g[o * inner + i];
                        match kind {
                            Reduction::Sum | Reduction::Mean => {
                                let scale = if *kind == Reduction::Mean {
                                    1.0 / len as f64
                                } else {
                                    1.0
                                };
                                for l in 0..len {
                                    ga[(o * len + l) * inner + i] += gi * scale;
                                }
                            }
                            Reduction::Max => {
                                let l = argmax[o * inner + i];
                                ga[(o * len + l) * inner + i] += gi;
                            }
                        }
                    }
                }
            }
        }
        Op::Softmax { a, width } => {
            let y = out.data();
            if let Some(ga) = slot(grads, nodes, *a) {
                for r in 0..y.len() / width {
                    let ys = &y[r * width..(r + 1) * width];
                    let gs = &g[r * width..(r + 1) * width];
                    let dot: f64 = ys.iter().zip(gs).map(|(y, g)| y * g).sum();
                    for j in 0..*width {
                        ga[r * width + j] += ys[j] * (gs[j] - dot);
                    }
                }
            }
        }
        Op::Reshape { a } => {
            if let Some(ga) = slot(grads, nodes, *a) {
                ga.iter_mut().zip(g).for_each(|(d, gi)| *d += gi);
            }
        }
        Op::Transpose {
            a,
            batch,
            rows,
            cols,
        } => {
            if let Some(ga) = slot(grads, nodes, *a) {
                // out is [batch, cols, rows]
                for bi in 0..*batch {
                    let src = &g[bi * rows * cols..(bi + 1) * rows * cols];
                    let back = transpose(src, *cols, *rows);
                    let dst = &mut ga[bi * rows * cols..(bi + 1) * rows * cols];
                    dst.iter_mut().zip(&back).for_each(|(d, t)| *d += t);
                }
            }
        }
        Op::Narrow {
            a,
            outer,
            len_in,
            start,
            len,
            inner,
        } => {
            if let Some(ga) = slot(grads, nodes, *a) {
                for o in 0..*outer {
                    for l in 0..*len {
                        let src = (o * len + l) * inner;
                        let dst = (o * len_in + start + l) * inner;
                        for i in 0..*inner {
                            ga[dst + i] += g[src + i];
                        }
                    }
                }
            }
        }
        Op::Concat {
            parts,
            outer,
            total,
            inner,
        } => {
            let mut offset = 0;
            for &(p, plen) in parts {
                if let Some(gp) = slot(grads, nodes, p) {
                    for o in 0..*outer {
                        let src = (o * total + offset) * inner;
                        let dst = o * plen * inner;
                        for i in 0..plen * inner {
                            gp[dst + i] += g[src + i];
                        }
                    }
                }
                offset += plen;
            }
        }
        Op::Gather { a, index, width_in } => {
            if let Some(ga) = slot(grads, nodes, *a) {
                let w = index.len();
                for r in 0..g.len() / w {
                    for (j, &src) in index.iter().enumerate() {
                        ga[r * width_in + src] += g[r * w + j];
                    }
                }
            }
        }
        Op::CausalConv {
            x,
            w,
            bias,
            batch,
            steps,
            channels,
            kernel,
        } => {
            let (bn, t_n, e_n, k_n) = (*batch, *steps, *channels, *kernel);
            let xv = nodes[*x].value.data();
            let wv = nodes[*w].value.data();
            if let Some(gx) = slot(grads, nodes, *x) {
                for b in 0..bn {
                    for t in 0..t_n {
                        for e in 0..e_n {
                            let gi = g[(b * t_n + t) * e_n + e];
                            for k in 0..k_n.min(t + 1) {
                                gx[(b * t_n + t - k) * e_n + e] += gi * wv[e * k_n + k];
                            }
                        }
                    }
                }
            }
            if let Some(gw) = slot(grads, nodes, *w) {
                for b in 0..bn {
                    for t in 0..t_n {
                        for e in 0..e_n {
                            let gi = g[(b * t_n + t) * e_n + e];
                            for k in 0..k_n.min(t + 1) {
                                gw[e * k_n + k] += gi * xv[(b * t_n + t - k) * e_n + e];
                            }
                        }
                    }
                }
            }
            if let Some(gb) = slot(grads, nodes, *bias) {
                for (i, gi) in g.iter().enumerate() {
                    gb[i % e_n] += gi;
                }
            }
        }
        Op::Scan(s) => scan_backward(nodes, s, g, grads),
    }
}

fn scan_backward(nodes: &[Node], s: &ScanNode, gy: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let (bn, t_n, e_n, n_n) = (s.batch, s.steps, s.channels, s.state);
    let x = nodes[s.x].value.data();
    let delta = nodes[s.delta].value.data();
    let a = nodes[s.a].value.data();
    let bsel = nodes[s.b].value.data();
    let csel = nodes[s.c].value.data();
    let mut gx = vec![0.0; x.len()];
    let mut gd = vec![0.0; delta.len()];
    let mut ga = vec![0.0; a.len()];
    let mut gb = vec![0.0; bsel.len()];
    let mut gc = vec![0.0; csel.len()];
    let mut carry = vec![0.0; e_n * n_n];
    for b in 0..bn {
        carry.iter_mut().for_each(|c| *c = 0.0);
        for t in (0..t_n).rev() {
            let tok = b * t_n + t;
            let h_now = &s.hidden[tok * e_n * n_n..(tok + 1) * e_n * n_n];
            for e in 0..e_n {
                let g_out = gy[tok * e_n + e];
                let dt = delta[tok * e_n + e];
                let xv = x[tok * e_n + e];
                for n in 0..n_n {
                    let en = e * n_n + n;
                    let gh = carry[en] + csel[tok * n_n + n] * g_out;
                    gc[tok * n_n + n] += g_out * h_now[en];
                    let h_prev = if t > 0 {
                        s.hidden[(tok - 1) * e_n * n_n + en]
                    } else {
                        0.0
                    };
                    let an = a[en];
                    let u = dt * an;
                    let abar = u.exp();
                    let psi = dt * zoh_phi(u);
                    let bv = bsel[tok * n_n + n];
                    let g_abar = gh * h_prev;
                    let g_psi = gh * xv * bv;
                    gx[tok * e_n + e] += gh * psi * bv;
                    gb[tok * n_n + n] += gh * xv * psi;
                    gd[tok * e_n + e] += g_abar * an * abar + g_psi * abar;
                    ga[en] += g_abar * dt * abar + g_psi * dt * dt * zoh_phi_prime(u);
                    carry[en] = gh * abar;
                }
            }
        }
    }
    for (id, buf) in [(s.x, gx), (s.delta, gd), (s.a, ga), (s.b, gb), (s.c, gc)] {
        if let Some(dst) = slot(grads, nodes, id) {
            dst.iter_mut().zip(&buf).for_each(|(d, v)| *d += v);
        }
    }
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl<'t> Var<'t> {
    pub fn id(&self) -> NodeId {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.value_of(self.id).shape().to_vec()
    }

    /// Copy of the forward value.
    pub fn value(&self) -> Tensor {
        self.tape.value_of(self.id).clone()
    }

    pub fn with_value<T>(&self, f: impl FnOnce(&Tensor) -> T) -> T {
        f(&self.tape.value_of(self.id))
    }

    pub fn item(&self) -> f64 {
        self.tape.value_of(self.id).item()
    }

    fn binary(self, other: Var<'t>, kind: Binary, name: &'static str) -> R<'t> {
        let value = {
            let a = self.tape.value_of(self.id);
            let b = self.tape.value_of(other.id);
            let bcast = Bcast::resolve(a.shape(), b.shape()).ok_or_else(|| DiffError::ShapeMismatch {
                op: name,
                left: a.shape().to_vec(),
                right: b.shape().to_vec(),
            })?;
            let (ad, bd) = (a.data(), b.data());
            if kind == Binary::Div {
                if let Some(i) = bd.iter().position(|&x| x == 0.0) {
                    return Err(DiffError::Domain {
                        op: "div",
                        index: i,
                        value: 0.0,
                    });
                }
            }
            let data: Vec<f64> = ad
                .iter()
                .enumerate()
                .map(|(i, &x)| {
                    let y = bd[bcast.index(i)];
                    match kind {
                        Binary::Add => x + y,
                        Binary::Sub => x - y,
                        Binary::Mul => x * y,
                        Binary::Div => x / y,
                    }
                })
                .collect();
            (Tensor::new(a.shape().to_vec(), data)?, bcast)
        };
        Ok(self.tape.push(
            value.0,
            Op::Binary {
                kind,
                a: self.id,
                b: other.id,
                bcast: value.1,
            },
        ))
    }

    /// Elementwise sum; `other` may broadcast (equal, scalar, suffix, or trailing-singleton shape).
    pub fn add(self, other: Var<'t>) -> R<'t> {
        self.binary(other, Binary::Add, "add")
    }

    pub fn sub(self, other: Var<'t>) -> R<'t> {
        self.binary(other, Binary::Sub, "sub")
    }

    pub fn mul(self, other: Var<'t>) -> R<'t> {
        self.binary(other, Binary::Mul, "mul")
    }

    pub fn div(self, other: Var<'t>) -> R<'t> {
        self.binary(other, Binary::Div, "div")
    }

    fn unary(self, kind: Unary) -> Var<'t> {
        let value = self.tape.value_of(self.id).map(|x| match kind {
            Unary::Exp => x.exp(),
            Unary::Log => x.ln(),
            Unary::Tanh => x.tanh(),
            Unary::Silu => x * sigmoid(x),
            Unary::Neg => -x,
            Unary::Scale(c) => c * x,
            Unary::Offset(c) => x + c,
            Unary::Sqrt => x.sqrt(),
            Unary::Softplus => softplus(x),
            Unary::Sigmoid => sigmoid(x),
            Unary::Square => x * x,
            Unary::Clamp(lo, hi) => x.clamp(lo, hi),
        });
        self.tape.push(value, Op::Unary { kind, a: self.id })
    }

    pub fn exp(self) -> Var<'t> {
        self.unary(Unary::Exp)
    }

    /// Natural logarithm; every entry must be positive.
    pub fn log(self) -> R<'t> {
        let bad = self.with_value(|v| v.data().iter().position(|&x| x <= 0.0).map(|i| (i, v.data()[i])));
        if let Some((index, value)) = bad {
            return Err(DiffError::Domain {
                op: "log",
                index,
                value,
            });
        }
        Ok(self.unary(Unary::Log))
    }

    pub fn tanh(self) -> Var<'t> {
        self.unary(Unary::Tanh)
    }

    pub fn silu(self) -> Var<'t> {
        self.unary(Unary::Silu)
    }

    pub fn neg(self) -> Var<'t> {
        self.unary(Unary::Neg)
    }

    pub fn scale(self, c: f64) -> Var<'t> {
        self.unary(Unary::Scale(c))
    }

    pub fn add_scalar(self, c: f64) -> Var<'t> {
        self.unary(Unary::Offset(c))
    }

    /// Square root; the gradient at exactly zero is taken as zero.
    pub fn sqrt(self) -> Var<'t> {
        self.unary(Unary::Sqrt)
    }

    pub fn softplus(self) -> Var<'t> {
        self.unary(Unary::Softplus)
    }

    pub fn sigmoid(self) -> Var<'t> {
        self.unary(Unary::Sigmoid)
    }

    pub fn square(self) -> Var<'t> {
        self.unary(Unary::Square)
    }

    /// Clamp into `[lo, hi]`; gradient is zero outside the interval.
    pub fn clamp(self, lo: f64, hi: f64) -> Var<'t> {
        self.unary(Unary::Clamp(lo, hi))
    }

    /// Rank-2 matrix product.
    pub fn matmul(self, other: Var<'t>) -> R<'t> {
        let (value, m, k, n) = {
            let a = self.tape.value_of(self.id);
            let b = self.tape.value_of(other.id);
            if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0] {
                return Err(DiffError::ShapeMismatch {
                    op: "matmul",
                    left: a.shape().to_vec(),
                    right: b.shape().to_vec(),
                });
            }
            let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
            let mut out = vec![0.0; m * n];
            matmul_into(a.data(), b.data(), m, k, n, &mut out);
            (Tensor::new(vec![m, n], out)?, m, k, n)
        };
        Ok(self.tape.push(
            value,
            Op::MatMul {
                a: self.id,
                b: other.id,
                m,
                k,
                n,
            },
        ))
    }

    /// Batched product of rank-3 tensors: `[B,m,k]·[B,k,n]`, or `[B,m,k]·[B,n,k]ᵀ` when `trans_b`.
    pub fn bmm(self, other: Var<'t>, trans_b: bool) -> R<'t> {
        let (value, batch, m, k, n) = {
            let a = self.tape.value_of(self.id);
            let b = self.tape.value_of(other.id);
            let err = || DiffError::ShapeMismatch {
                op: "bmm",
                left: a.shape().to_vec(),
                right: b.shape().to_vec(),
            };
            if a.rank() != 3 || b.rank() != 3 || a.shape()[0] != b.shape()[0] {
                return Err(err());
            }
            let (batch, m, k) = (a.shape()[0], a.shape()[1], a.shape()[2]);
            let (bk, n) = if trans_b {
                (b.shape()[2], b.shape()[1])
            } else {
                (b.shape()[1], b.shape()[2])
            };
            if bk != k {
                return Err(err());
            }
            let mut out = vec![0.0; batch * m * n];
            for i in 0..batch {
                let ai = &a.data()[i * m * k..(i + 1) * m * k];
                let bi = &b.data()[i * k * n..(i + 1) * k * n];
                let dst = &mut out[i * m * n..(i + 1) * m * n];
                if trans_b {
                    let bt = transpose(bi, n, k);
                    matmul_into(ai, &bt, m, k, n, dst);
                } else {
                    matmul_into(ai, bi, m, k, n, dst);
                }
            }
            (Tensor::new(vec![batch, m, n], out)?, batch, m, k, n)
        };
        Ok(self.tape.push(
            value,
            Op::BatchMatMul {
                a: self.id,
                b: other.id,
                batch,
                m,
                k,
                n,
                trans_b,
            },
        ))
    }

    /// Reduce over `axis` (or everything). The axis is kept with extent 1 when `keepdim`.
    pub fn reduce(self, kind: Reduction, axis: Option<usize>, keepdim: bool) -> R<'t> {
        let (value, outer, len, inner, argmax) = {
            let a = self.tape.value_of(self.id);
            let shape = a.shape();
            let (outer, len, inner, out_shape) = match axis {
                None => (1, a.numel(), 1, vec![1]),
                Some(ax) if ax < shape.len() => {
                    let (o, l, i) = split_axis(shape, ax);
                    let mut s = shape.to_vec();
                    if keepdim {
                        s[ax] = 1;
                    } else {
                        s.remove(ax);
                        if s.is_empty() {
                            s.push(1);
                        }
                    }
                    (o, l, i, s)
                }
                Some(ax) => {
                    return Err(DiffError::InvalidAxis {
                        axis: ax,
                        rank: shape.len(),
                    })
                }
            };
            let d = a.data();
            let mut out = vec![0.0; outer * inner];
            let mut argmax = Vec::new();
            if kind == Reduction::Max {
                argmax = vec![0; outer * inner];
            }
            for o in 0..outer {
                for i in 0..inner {
                    let at = |l: usize| d[(o * len + l) * inner + i];
                    out[o * inner + i] = match kind {
                        Reduction::Sum => (0..len).map(at).sum(),
                        Reduction::Mean => (0..len).map(at).sum::<f64>() / len as f64,
                        Reduction::Max => {
                            let mut best = 0;
                            for l in 1..len {
                                if at(l) > at(best) {
                                    best = l;
                                }
                            }
                            argmax[o * inner + i] = best;
                            at(best)
                        }
                    };
                }
            }
            (Tensor::new(out_shape, out)?, outer, len, inner, argmax)
        };
        Ok(self.tape.push(
            value,
            Op::Reduce {
                kind,
                a: self.id,
                outer,
                len,
                inner,
                argmax,
            },
        ))
    }

    pub fn sum(self) -> Var<'t> {
        self.reduce(Reduction::Sum, None, false).expect("full reduction")
    }

    pub fn mean(self) -> Var<'t> {
        self.reduce(Reduction::Mean, None, false).expect("full reduction")
    }

    /// Sum over the last axis, keeping it as a singleton.
    pub fn sum_last(self) -> Var<'t> {
        let rank = self.shape().len();
        self.reduce(Reduction::Sum, Some(rank - 1), true).expect("valid axis")
    }

    /// Mean over the last axis, keeping it as a singleton.
    pub fn mean_last(self) -> Var<'t> {
        let rank = self.shape().len();
        self.reduce(Reduction::Mean, Some(rank - 1), true).expect("valid axis")
    }

    /// Softmax over the last axis; `mask` entries that are `false` get exactly zero weight.
    ///
    /// The mask shape must equal the input shape or be a suffix of it.
    pub fn softmax_masked(self, mask: &[bool], mask_shape: &[usize]) -> R<'t> {
        let (value, width) = {
            let a = self.tape.value_of(self.id);
            let shape = a.shape();
            let suffix_ok = mask_shape.len() <= shape.len() && shape[shape.len() - mask_shape.len()..] == *mask_shape;
            if !suffix_ok || mask.len() != mask_shape.iter().product::<usize>() {
                return Err(DiffError::ShapeMismatch {
                    op: "softmax_masked",
                    left: shape.to_vec(),
                    right: mask_shape.to_vec(),
                });
            }
            let width = a.last_dim();
            let d = a.data();
            let mut out = vec![0.0; d.len()];
            for r in 0..d.len() / width {
                let row = &d[r * width..(r + 1) * width];
                let mrow = |j: usize| mask[(r * width + j) % mask.len()];
                let mut mx = f64::NEG_INFINITY;
                for (j, &v) in row.iter().enumerate() {
                    if mrow(j) && v > mx {
                        mx = v;
                    }
                }
                if mx == f64::NEG_INFINITY {
                    return Err(DiffError::FullyMasked { row: r });
                }
                let dst = &mut out[r * width..(r + 1) * width];
                let mut total = 0.0;
                for (j, &v) in row.iter().enumerate() {
                    if mrow(j) {
                        dst[j] = (v - mx).exp();
                        total += dst[j];
                    }
                }
                dst.iter_mut().for_each(|x| *x /= total);
            }
            (Tensor::new(shape.to_vec(), out)?, width)
        };
        Ok(self.tape.push(value, Op::Softmax { a: self.id, width }))
    }

    pub fn reshape(self, shape: impl Into<Vec<usize>>) -> R<'t> {
        let value = self.value().reshape(shape)?;
        Ok(self.tape.push(value, Op::Reshape { a: self.id }))
    }

    /// Swap the last two axes.
    pub fn transpose(self) -> R<'t> {
        let (value, batch, rows, cols) = {
            let a = self.tape.value_of(self.id);
            let s = a.shape();
            if s.len() < 2 {
                return Err(DiffError::InvalidAxis { axis: 1, rank: s.len() });
            }
            let (rows, cols) = (s[s.len() - 2], s[s.len() - 1]);
            let batch = a.numel() / (rows * cols);
            let mut out = Vec::with_capacity(a.numel());
            for b in 0..batch {
                out.extend(transpose(&a.data()[b * rows * cols..(b + 1) * rows * cols], rows, cols));
            }
            let mut shape = s.to_vec();
            let n = shape.len();
            shape.swap(n - 2, n - 1);
            (Tensor::new(shape, out)?, batch, rows, cols)
        };
        Ok(self.tape.push(
            value,
            Op::Transpose {
                a: self.id,
                batch,
                rows,
                cols,
            },
        ))
    }

    /// Slice `len` entries starting at `start` along `axis`.
    pub fn narrow(self, axis: usize, start: usize, len: usize) -> R<'t> {
        let (value, outer, len_in, inner) = {
            let a = self.tape.value_of(self.id);
            let shape = a.shape();
            if axis >= shape.len() {
                return Err(DiffError::InvalidAxis {
                    axis,
                    rank: shape.len(),
                });
            }
            if len == 0 || start + len > shape[axis] {
                return Err(DiffError::OutOfRange {
                    op: "narrow",
                    index: start + len,
                    extent: shape[axis],
                });
            }
            let (outer, len_in, inner) = split_axis(shape, axis);
            let d = a.data();
            let mut out = Vec::with_capacity(outer * len * inner);
            for o in 0..outer {
                let from = (o * len_in + start) * inner;
                out.extend_from_slice(&d[from..from + len * inner]);
            }
            let mut s = shape.to_vec();
            s[axis] = len;
            (Tensor::new(s, out)?, outer, len_in, inner)
        };
        Ok(self.tape.push(
            value,
            Op::Narrow {
                a: self.id,
                outer,
                len_in,
                start,
                len,
                inner,
            },
        ))
    }

    /// Reorder the last axis: output column `j` is input column `index[j]`.
    pub fn gather_last(self, index: &[usize]) -> R<'t> {
        let (value, width_in) = {
            let a = self.tape.value_of(self.id);
            let w = a.last_dim();
            if let Some(&bad) = index.iter().find(|&&i| i >= w) {
                return Err(DiffError::OutOfRange {
                    op: "gather_last",
                    index: bad,
                    extent: w,
                });
            }
            let mut out = Vec::with_capacity(a.rows() * index.len());
            for r in 0..a.rows() {
                let row = a.row(r);
                out.extend(index.iter().map(|&i| row[i]));
            }
            let mut s = a.shape().to_vec();
            *s.last_mut().unwrap() = index.len();
            (Tensor::new(s, out)?, w)
        };
        Ok(self.tape.push(
            value,
            Op::Gather {
                a: self.id,
                index: index.into(),
                width_in,
            },
        ))
    }

    /// Causal depthwise 1-D convolution over `[B, T, E]` with kernel `[E, K]` and bias `[E]`:
    /// `y[b,t,e] = bias[e] + Σ_k w[e,k]·x[b,t−k,e]` (zero left padding).
    pub fn causal_conv(self, w: Var<'t>, bias: Var<'t>) -> R<'t> {
        let (value, batch, steps, channels, kernel) = {
            let x = self.tape.value_of(self.id);
            let wv = self.tape.value_of(w.id);
            let bv = self.tape.value_of(bias.id);
            let xs = x.shape();
            if xs.len() != 3 || wv.rank() != 2 || wv.shape()[0] != xs[2] || bv.shape() != [xs[2]] {
                return Err(DiffError::ShapeMismatch {
                    op: "causal_conv",
                    left: xs.to_vec(),
                    right: wv.shape().to_vec(),
                });
            }
            let (bn, t_n, e_n, k_n) = (xs[0], xs[1], xs[2], wv.shape()[1]);
            let (xd, wd, bd) = (x.data(), wv.data(), bv.data());
            let mut out = vec![0.0; xd.len()];
            for b in 0..bn {
                for t in 0..t_n {
                    for e in 0..e_n {
                        let mut acc = bd[e];
                        for k in 0..k_n.min(t + 1) {
                            acc += wd[e * k_n + k] * xd[(b * t_n + t - k) * e_n + e];
                        }
                        out[(b * t_n + t) * e_n + e] = acc;
                    }
                }
            }
            (Tensor::new(xs.to_vec(), out)?, bn, t_n, e_n, k_n)
        };
        Ok(self.tape.push(
            value,
            Op::CausalConv {
                x: self.id,
                w: w.id,
                bias: bias.id,
                batch,
                steps,
                channels,
                kernel,
            },
        ))
    }
}

/// Concatenate along `axis`; all other extents must agree.
pub fn concat<'t>(parts: &[Var<'t>], axis: usize) -> R<'t> {
    let tape = parts.first().ok_or(DiffError::MissingOperand)?.tape;
    let (value, meta, outer, total, inner) = {
        let values: Vec<_> = parts.iter().map(|p| tape.value_of(p.id)).collect();
        let first = values[0].shape().to_vec();
        if axis >= first.len() {
            return Err(DiffError::InvalidAxis {
                axis,
                rank: first.len(),
            });
        }
        for v in &values[1..] {
            let s = v.shape();
            let same = s.len() == first.len()
                && s.iter().zip(&first).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !same {
                return Err(DiffError::ShapeMismatch {
                    op: "concat",
                    left: first.clone(),
                    right: s.to_vec(),
                });
            }
        }
        let (outer, _, inner) = split_axis(&first, axis);
        let total: usize = values.iter().map(|v| v.shape()[axis]).sum();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for v in &values {
                let l = v.shape()[axis];
                out.extend_from_slice(&v.data()[o * l * inner..(o + 1) * l * inner]);
            }
        }
        let mut shape = first.clone();
        shape[axis] = total;
        let meta: Vec<(NodeId, usize)> = parts
            .iter()
            .zip(&values)
            .map(|(p, v)| (p.id, v.shape()[axis]))
            .collect();
        (Tensor::new(shape, out)?, meta, outer, total, inner)
    };
    Ok(tape.push(
        value,
        Op::Concat {
            parts: meta,
            outer,
            total,
            inner,
        },
    ))
}

/// Selective state-space scan with zero-order-hold discretisation of a diagonal state matrix.
///
/// Shapes: `x, delta: [B, T, E]`, `a: [E, N]`, `b, c: [B, T, N]`; output `[B, T, E]`.
/// Per token: `Ā = exp(Δ·A)`, `B̄ = (Δ·A)⁻¹(exp(Δ·A) − 1)·Δ·B`,
/// `h_t = Ā h_{t−1} + B̄ x_t`, `y_t = C_t h_t`, with `h_0 = 0`.
pub fn selective_scan<'t>(x: Var<'t>, delta: Var<'t>, a: Var<'t>, b: Var<'t>, c: Var<'t>) -> R<'t> {
    let tape = x.tape;
    let (value, node) = {
        let xv = tape.value_of(x.id);
        let dv = tape.value_of(delta.id);
        let av = tape.value_of(a.id);
        let bv = tape.value_of(b.id);
        let cv = tape.value_of(c.id);
        let xs = xv.shape();
        let mismatch = |r: &Tensor| DiffError::ShapeMismatch {
            op: "selective_scan",
            left: xs.to_vec(),
            right: r.shape().to_vec(),
        };
        if xs.len() != 3 || dv.shape() != xs {
            return Err(mismatch(&dv));
        }
        let (bn, t_n, e_n) = (xs[0], xs[1], xs[2]);
        if av.rank() != 2 || av.shape()[0] != e_n {
            return Err(mismatch(&av));
        }
        let n_n = av.shape()[1];
        if bv.shape() != [bn, t_n, n_n] {
            return Err(mismatch(&bv));
        }
        if cv.shape() != [bn, t_n, n_n] {
            return Err(mismatch(&cv));
        }
        if let Some(i) = dv.data().iter().position(|&d| d <= 0.0) {
            return Err(DiffError::Domain {
                op: "selective_scan",
                index: i,
                value: dv.data()[i],
            });
        }
        let (xd, dd, ad, bd, cd) = (xv.data(), dv.data(), av.data(), bv.data(), cv.data());
        let mut hidden = vec![0.0; bn * t_n * e_n * n_n];
        let mut out = vec![0.0; bn * t_n * e_n];
        for bi in 0..bn {
            for t in 0..t_n {
                let tok = bi * t_n + t;
                for e in 0..e_n {
                    let dt = dd[tok * e_n + e];
                    let xe = xd[tok * e_n + e];
                    let mut y = 0.0;
                    for n in 0..n_n {
                        let en = e * n_n + n;
                        let u = dt * ad[en];
                        let prev = if t > 0 {
                            hidden[(tok - 1) * e_n * n_n + en]
                        } else {
                            0.0
                        };
                        let h = u.exp() * prev + dt * zoh_phi(u) * bd[tok * n_n + n] * xe;
                        hidden[tok * e_n * n_n + en] = h;
                        y += cd[tok * n_n + n] * h;
                    }
                    if !y.is_finite() {
                        return Err(DiffError::NonFinite { op: "selective_scan" });
                    }
                    out[tok * e_n + e] = y;
                }
            }
        }
        let node = ScanNode {
            x: x.id,
            delta: delta.id,
            a: a.id,
            b: b.id,
            c: c.id,
            batch: bn,
            steps: t_n,
            channels: e_n,
            state: n_n,
            hidden,
        };
        (Tensor::new(xs.to_vec(), out)?, node)
    };
    Ok(tape.push(value, Op::Scan(Box::new(node))))
}
