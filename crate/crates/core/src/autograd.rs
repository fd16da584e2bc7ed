//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation eagerly: values are computed when an
//! op is added, and [`Graph::backward`] walks the tape in reverse. Parameters
//! are pulled lazily from a [`ParamStore`] the first time a forward pass
//! touches them, so a graph only tracks the parameters it actually used.

use std::rc::Rc;

use crate::params::{ParamId, ParamStore};
use crate::tensor::{gemm_batched, strides, Real, Tensor};

/// Handle to a node on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug)]
pub enum Unary {
    Neg,
    Exp,
    Log,
    Abs,
    Relu,
    Square,
    Tanh,
    Sigmoid,
    Silu,
    /// tanh approximation
    Gelu,
}

/// Rotation tables for rotary position encoding, one row per token and one
/// column per rotated channel pair.
#[derive(Clone, Debug)]
pub struct RopeTable<F> {
    pub tokens: usize,
    pub pairs: usize,
    pub cos: Vec<F>,
    pub sin: Vec<F>,
}

enum Op<F> {
    Leaf,
    Param,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBcast(Var, Var),
    MulBcast(Var, Var),
    Scale(Var, F),
    AddScalar(Var),
    MatMul {
        a: Var,
        b: Var,
        ta: bool,
        tb: bool,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        b_batched: bool,
    },
    Unary(Var, Unary),
    LayerNorm {
        x: Var,
        rstd: Vec<F>,
    },
    RmsNorm {
        x: Var,
        rstd: Vec<F>,
    },
    Softmax(Var),
    Reshape(Var),
    Permute(Var, Vec<usize>),
    Concat(Vec<Var>),
    Narrow(Var, usize),
    Gather(Var, Rc<Vec<usize>>),
    Rope(Var, Rc<RopeTable<F>>),
    SumAll(Var),
    SumLast(Var),
    AvgPool {
        x: Var,
        h: usize,
        w: usize,
        c: usize,
        k: usize,
    },
}

struct Node<F> {
    value: Tensor<F>,
    op: Op<F>,
    req: bool,
}

/// Gradients produced by one backward pass.
pub struct Grads<F> {
    node: Vec<Option<Tensor<F>>>,
    params: Vec<Option<Tensor<F>>>,
}

impl<F: Real> Grads<F> {
    /// Gradient w.r.t. a variable created with [`Graph::input`].
    pub fn wrt(&self, v: Var) -> Option<&Tensor<F>> {
        self.node[v.0].as_ref()
    }

    /// Gradient w.r.t. a parameter (None if the forward pass never used it).
    pub fn param(&self, id: ParamId) -> Option<&Tensor<F>> {
        self.params.get(id.0).and_then(Option::as_ref)
    }

    /// Per-parameter gradients aligned with the store, zeros for unused ones.
    pub fn into_param_grads(self, store: &ParamStore<F>) -> Vec<Tensor<F>> {
        let mut params = self.params;
        params.resize_with(store.len(), || None);
        params
            .into_iter()
            .zip(store.tensors())
            .map(|(g, t)| g.unwrap_or_else(|| Tensor::zeros(t.shape())))
            .collect()
    }
}

pub struct Graph<'p, F: Real> {
    store: Option<&'p ParamStore<F>>,
    nodes: Vec<Node<F>>,
    param_vars: Vec<Option<Var>>,
    frozen: bool,
}

impl<'p, F: Real> Graph<'p, F> {
    pub fn new(store: &'p ParamStore<F>) -> Self {
        Self {
            store: Some(store),
            nodes: Vec::new(),
            param_vars: vec![None; store.len()],
            frozen: false,
        }
    }

    /// A graph with no parameter store (for tests of raw ops).
    pub fn detached() -> Self {
        Self {
            store: None,
            nodes: Vec::new(),
            param_vars: Vec::new(),
            frozen: false,
        }
    }

    /// Treat parameters as constants: nothing on the tape requires grad.
    pub fn frozen(store: &'p ParamStore<F>) -> Self {
        let mut g = Self::new(store);
        g.frozen = true;
        g
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>, req: bool) -> Var {
        self.nodes.push(Node { value, op, req });
        Var(self.nodes.len() - 1)
    }

    fn req(&self, v: Var) -> bool {
        self.nodes[v.0].req
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Constant input: never differentiated.
    pub fn constant(&mut self, t: Tensor<F>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Differentiable input (gradient available via [`Grads::wrt`]).
    pub fn input(&mut self, t: Tensor<F>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Parameter leaf, created on first use.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.0] {
            return v;
        }
        let store = self.store.expect("graph has no parameter store");
        let t = store.get(id).clone();
        let v = if self.frozen {
            self.push(t, Op::Leaf, false)
        } else {
            self.push(t, Op::Param, true)
        };
        self.param_vars[id.0] = Some(v);
        v
    }

    fn check_same(&self, a: Var, b: Var, what: &str) {
        assert_eq!(
            self.shape(a),
            self.shape(b),
            "{what}: shape mismatch {:?} vs {:?}",
            self.shape(a),
            self.shape(b)
        );
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.check_same(a, b, "add");
        let mut v = self.value(a).clone();
        v.add_assign(self.value(b));
        let r = self.req(a) || self.req(b);
        self.push(v, Op::Add(a, b), r)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.check_same(a, b, "sub");
        let bv = self.value(b).data();
        let mut v = self.value(a).clone();
        for (x, &y) in v.data_mut().iter_mut().zip(bv) {
            *x -= y;
        }
        let r = self.req(a) || self.req(b);
        self.push(v, Op::Sub(a, b), r)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.check_same(a, b, "mul");
        let bv = self.value(b).data();
        let mut v = self.value(a).clone();
        for (x, &y) in v.data_mut().iter_mut().zip(bv) {
            *x *= y;
        }
        let r = self.req(a) || self.req(b);
        self.push(v, Op::Mul(a, b), r)
    }

    fn check_bcast(&self, a: Var, b: Var) {
        let (sa, sb) = (self.shape(a), self.shape(b));
        assert!(
            sb.len() <= sa.len() && sa[sa.len() - sb.len()..] == *sb,
            "broadcast: {sb:?} is not a suffix of {sa:?}"
        );
    }

    /// `a + b` where `b`'s shape is a suffix of `a`'s.
    pub fn add_bcast(&mut self, a: Var, b: Var) -> Var {
        self.check_bcast(a, b);
        let bv = self.value(b).data().to_vec();
        let mut v = self.value(a).clone();
        for row in v.data_mut().chunks_mut(bv.len()) {
            for (x, &y) in row.iter_mut().zip(&bv) {
                *x += y;
            }
        }
        let r = self.req(a) || self.req(b);
        self.push(v, Op::AddBcast(a, b), r)
    }

    /// `a * b` where `b`'s shape is a suffix of `a`'s.
    pub fn mul_bcast(&mut self, a: Var, b: Var) -> Var {
        self.check_bcast(a, b);
        let bv = self.value(b).data().to_vec();
        let mut v = self.value(a).clone();
        for row in v.data_mut().chunks_mut(bv.len()) {
            for (x, &y) in row.iter_mut().zip(&bv) {
                *x *= y;
            }
        }
        let r = self.req(a) || self.req(b);
        self.push(v, Op::MulBcast(a, b), r)
    }

    pub fn scale(&mut self, a: Var, s: F) -> Var {
        let v = self.value(a).map(|x| x * s);
        let r = self.req(a);
        self.push(v, Op::Scale(a, s), r)
    }

    pub fn add_scalar(&mut self, a: Var, s: F) -> Var {
        let v = self.value(a).map(|x| x + s);
        let r = self.req(a);
        self.push(v, Op::AddScalar(a), r)
    }

    /// Batched matrix product `op(a) @ op(b)` over the last two axes.
    /// `b` may be 2-D (shared across the batch) or carry the same leading
    /// axes as `a`.
    pub fn matmul_t(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Var {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        assert!(sa.len() >= 2 && sb.len() >= 2, "matmul needs >=2-d operands");
        let (ra, ca) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (rb, cb) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        let (m, k) = if ta { (ca, ra) } else { (ra, ca) };
        let (kb, n) = if tb { (cb, rb) } else { (rb, cb) };
        assert_eq!(k, kb, "matmul inner dims {sa:?} x {sb:?}");
        let batch: usize = sa[..sa.len() - 2].iter().product();
        let b_batched = sb.len() > 2;
        if b_batched {
            assert_eq!(sa[..sa.len() - 2], sb[..sb.len() - 2], "matmul batch dims");
        } else {
            assert!(!ta || batch == 1, "shared rhs requires untransposed lhs");
        }
        let mut out_shape = sa[..sa.len() - 2].to_vec();
        out_shape.extend([m, n]);
        let mut out = Tensor::zeros(&out_shape);
        if !b_batched && !ta {
            gemm_batched(
                1,
                batch * m,
                k,
                n,
                self.value(a).data(),
                false,
                self.value(b).data(),
                tb,
                false,
                out.data_mut(),
                false,
            );
        } else {
            gemm_batched(
                batch,
                m,
                k,
                n,
                self.value(a).data(),
                ta,
                self.value(b).data(),
                tb,
                b_batched,
                out.data_mut(),
                false,
            );
        }
        let r = self.req(a) || self.req(b);
        self.push(
            out,
            Op::MatMul {
                a,
                b,
                ta,
                tb,
                batch,
                m,
                k,
                n,
                b_batched,
            },
            r,
        )
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        self.matmul_t(a, b, false, false)
    }

    /// `x @ w + b` for `x: [.., in]`, `w: [in, out]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let y = self.matmul(x, w);
        match b {
            Some(b) => self.add_bcast(y, b),
            None => y,
        }
    }

    pub fn unary(&mut self, a: Var, kind: Unary) -> Var {
        let f = |x: F| -> F {
            match kind {
                Unary::Neg => -x,
                Unary::Exp => x.exp(),
                Unary::Log => x.ln(),
                Unary::Abs => x.abs(),
                Unary::Relu => x.max(F::zero()),
                Unary::Square => x * x,
                Unary::Tanh => x.tanh(),
                Unary::Sigmoid => sigmoid(x),
                Unary::Silu => x * sigmoid(x),
                // 0.5 (1 + tanh u) = sigmoid(2u), cheaper than tanh
                Unary::Gelu => x * sigmoid(F::c(2.0) * gelu_inner(x)),
            }
        };
        let v = self.value(a).map(f);
        let r = self.req(a);
        self.push(v, Op::Unary(a, kind), r)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Exp)
    }
    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Log)
    }
    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Abs)
    }
    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Relu)
    }
    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Square)
    }
    pub fn gelu(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Gelu)
    }
    pub fn silu(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Silu)
    }
    pub fn neg(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Neg)
    }

    /// Layer normalization over the last axis without affine parameters.
    pub fn layer_norm(&mut self, x: Var, eps: f64) -> Var {
        let d = self.value(x).last_dim();
        let mut v = self.value(x).clone();
        let mut rstd = Vec::with_capacity(v.numel() / d.max(1));
        let inv_d = F::c(1.0 / d as f64);
        for row in v.data_mut().chunks_mut(d) {
            let mean = row.iter().copied().sum::<F>() * inv_d;
            let var = row.iter().map(|&a| (a - mean) * (a - mean)).sum::<F>() * inv_d;
            let r = F::one() / (var + F::c(eps)).sqrt();
            for a in row.iter_mut() {
                *a = (*a - mean) * r;
            }
            rstd.push(r);
        }
        let r = self.req(x);
        self.push(v, Op::LayerNorm { x, rstd }, r)
    }

    /// Root-mean-square normalization over the last axis, no affine.
    pub fn rms_norm(&mut self, x: Var, eps: f64) -> Var {
        let d = self.value(x).last_dim();
        let mut v = self.value(x).clone();
        let mut rstd = Vec::with_capacity(v.numel() / d.max(1));
        let inv_d = F::c(1.0 / d as f64);
        for row in v.data_mut().chunks_mut(d) {
            let ms = row.iter().map(|&a| a * a).sum::<F>() * inv_d;
            let r = F::one() / (ms + F::c(eps)).sqrt();
            for a in row.iter_mut() {
                *a *= r;
            }
            rstd.push(r);
        }
        let r = self.req(x);
        self.push(v, Op::RmsNorm { x, rstd }, r)
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Var {
        let d = self.value(x).last_dim();
        let mut v = self.value(x).clone();
        for row in v.data_mut().chunks_mut(d) {
            let mx = row.iter().copied().fold(F::neg_infinity(), F::max);
            let mut s = F::zero();
            for a in row.iter_mut() {
                *a = (*a - mx).exp();
                s += *a;
            }
            let inv = F::one() / s;
            for a in row.iter_mut() {
                *a *= inv;
            }
        }
        let r = self.req(x);
        self.push(v, Op::Softmax(x), r)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let v = self
            .value(x)
            .clone()
            .reshape(shape)
            .unwrap_or_else(|e| panic!("{e}"));
        let r = self.req(x);
        self.push(v, Op::Reshape(x), r)
    }

    /// Axis permutation: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Var {
        let v = permute_tensor(self.value(x), perm);
        let r = self.req(x);
        self.push(v, Op::Permute(x, perm.to_vec()), r)
    }

    /// Concatenate along axis 0.
    pub fn concat(&mut self, parts: &[Var]) -> Var {
        let ts: Vec<&Tensor<F>> = parts.iter().map(|&p| self.value(p)).collect();
        let v = Tensor::concat_rows(&ts).unwrap_or_else(|e| panic!("{e}"));
        let r = parts.iter().any(|&p| self.req(p));
        self.push(v, Op::Concat(parts.to_vec()), r)
    }

    /// Rows `[start, start+len)` along axis 0.
    pub fn narrow(&mut self, x: Var, start: usize, len: usize) -> Var {
        assert!(start + len <= self.shape(x)[0], "narrow out of range");
        let v = self.value(x).narrow_rows(start, len);
        let r = self.req(x);
        self.push(v, Op::Narrow(x, start), r)
    }

    /// `out.flat[i] = x.flat[index[i]]`, reshaped to `shape`.
    pub fn gather(&mut self, x: Var, index: Rc<Vec<usize>>, shape: &[usize]) -> Var {
        assert_eq!(shape.iter().product::<usize>(), index.len());
        let src = self.value(x).data();
        let data: Vec<F> = index.iter().map(|&i| src[i]).collect();
        let v = Tensor::from_vec(shape, data).expect("gather shape");
        let r = self.req(x);
        self.push(v, Op::Gather(x, index), r)
    }

    /// Rotate channel pairs of `x: [tokens, heads, head_dim]`.
    pub fn rope(&mut self, x: Var, table: Rc<RopeTable<F>>) -> Var {
        let s = self.shape(x).to_vec();
        assert_eq!(s.len(), 3, "rope expects [tokens, heads, head_dim]");
        assert_eq!(s[0], table.tokens);
        assert!(table.pairs * 2 <= s[2]);
        let mut v = self.value(x).clone();
        rope_apply(&mut v, &table, false);
        let r = self.req(x);
        self.push(v, Op::Rope(x, table), r)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let v = Tensor::scalar(self.value(x).sum());
        let r = self.req(x);
        self.push(v, Op::SumAll(x), r)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).numel().max(1);
        let s = self.sum(x);
        self.scale(s, F::c(1.0 / n as f64))
    }

    /// Sum over the last axis.
    pub fn sum_last(&mut self, x: Var) -> Var {
        let s = self.shape(x).to_vec();
        let d = s.last().copied().unwrap_or(1);
        let data: Vec<F> = self
            .value(x)
            .data()
            .chunks(d)
            .map(|c| c.iter().copied().sum())
            .collect();
        let v = Tensor::from_vec(&s[..s.len().saturating_sub(1)], data).expect("sum_last");
        let r = self.req(x);
        self.push(v, Op::SumLast(x), r)
    }

    /// Average pooling of an `[h, w, c]` image with window and stride `k`;
    /// trailing rows/cols that do not fill a window are dropped.
    pub fn avg_pool(&mut self, x: Var, k: usize) -> Var {
        let s = self.shape(x).to_vec();
        assert_eq!(s.len(), 3, "avg_pool expects [h, w, c]");
        let (h, w, c) = (s[0], s[1], s[2]);
        let (ho, wo) = (h / k, w / k);
        let src = self.value(x).data();
        let mut out = Tensor::zeros(&[ho, wo, c]);
        let inv = F::c(1.0 / (k * k) as f64);
        {
            let o = out.data_mut();
            for i in 0..ho {
                for j in 0..wo {
                    for di in 0..k {
                        for dj in 0..k {
                            let base = ((i * k + di) * w + (j * k + dj)) * c;
                            for ch in 0..c {
                                o[(i * wo + j) * c + ch] += src[base + ch] * inv;
                            }
                        }
                    }
                }
            }
        }
        let r = self.req(x);
        self.push(out, Op::AvgPool { x, h, w, c, k }, r)
    }

    /// Reverse pass from a scalar output.
    pub fn backward(&self, out: Var) -> Grads<F> {
        assert_eq!(self.value(out).numel(), 1, "backward needs a scalar output");
        let mut grads: Vec<Option<Tensor<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[out.0] = Some(Tensor::full(self.shape(out), F::one()));
        for i in (0..=out.0).rev() {
            let node = &self.nodes[i];
            if !node.req {
                continue;
            }
            let g = match &node.op {
                Op::Leaf | Op::Param => continue,
                _ => match grads[i].take() {
                    Some(g) => g,
                    None => continue,
                },
            };
            self.backprop_node(i, g, &mut grads);
        }
        let params = self
            .param_vars
            .iter()
            .map(|pv| pv.and_then(|v| grads[v.0].clone()))
            .collect();
        Grads {
            node: grads,
            params,
        }
    }

    fn acc(&self, grads: &mut [Option<Tensor<F>>], v: Var, g: Tensor<F>) {
        if !self.req(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(t) => t.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    fn backprop_node(&self, i: usize, g: Tensor<F>, grads: &mut [Option<Tensor<F>>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::Add(a, b) => {
                self.acc(grads, *b, g.clone());
                self.acc(grads, *a, g);
            }
            Op::Sub(a, b) => {
                self.acc(grads, *b, g.map(|x| -x));
                self.acc(grads, *a, g);
            }
            Op::Mul(a, b) => {
                if self.req(*a) {
                    let bv = self.value(*b).data();
                    let mut ga = g.clone();
                    ga.data_mut().iter_mut().zip(bv).for_each(|(x, &y)| *x *= y);
                    self.acc(grads, *a, ga);
                }
                if self.req(*b) {
                    let av = self.value(*a).data();
                    let mut gb = g;
                    gb.data_mut().iter_mut().zip(av).for_each(|(x, &y)| *x *= y);
                    self.acc(grads, *b, gb);
                }
            }
            Op::AddBcast(a, b) => {
                if self.req(*b) {
                    let mut gb = Tensor::zeros(self.shape(*b));
                    let n = gb.numel();
                    for row in g.data().chunks(n) {
                        gb.data_mut().iter_mut().zip(row).for_each(|(x, &y)| *x += y);
                    }
                    self.acc(grads, *b, gb);
                }
                self.acc(grads, *a, g);
            }
            Op::MulBcast(a, b) => {
                let bv = self.value(*b).data();
                let n = bv.len();
                if self.req(*b) {
                    let av = self.value(*a).data();
                    let mut gb = Tensor::zeros(self.shape(*b));
                    for (grow, arow) in g.data().chunks(n).zip(av.chunks(n)) {
                        for ((x, &gy), &ay) in gb.data_mut().iter_mut().zip(grow).zip(arow) {
                            *x += gy * ay;
                        }
                    }
                    self.acc(grads, *b, gb);
                }
                if self.req(*a) {
                    let mut ga = g;
                    for row in ga.data_mut().chunks_mut(n) {
                        row.iter_mut().zip(bv).for_each(|(x, &y)| *x *= y);
                    }
                    self.acc(grads, *a, ga);
                }
            }
            Op::Scale(a, s) => {
                let s = *s;
                self.acc(grads, *a, g.map(|x| x * s));
            }
            Op::AddScalar(a) => self.acc(grads, *a, g),
            &Op::MatMul {
                a,
                b,
                ta,
                tb,
                batch,
                m,
                k,
                n,
                b_batched,
            } => {
                let av = self.value(a).data();
                let bv = self.value(b).data();
                let gd = g.data();
                if self.req(a) {
                    let mut ga = Tensor::zeros(self.shape(a));
                    if !b_batched && !ta {
                        // dA = dC @ op(B)^T over the flattened batch
                        gemm_batched(1, batch * m, n, k, gd, false, bv, !tb, false, ga.data_mut(), false);
                    } else if !ta {
                        gemm_batched(batch, m, n, k, gd, false, bv, !tb, b_batched, ga.data_mut(), false);
                    } else {
                        // dA stored k×m: op(B) @ dC^T
                        let gb_rows = ga.data_mut();
                        for bi in 0..batch {
                            let bslice = if b_batched { &bv[bi * k * n..(bi + 1) * k * n] } else { bv };
                            gemm_batched(
                                1,
                                k,
                                n,
                                m,
                                bslice,
                                tb,
                                &gd[bi * m * n..(bi + 1) * m * n],
                                true,
                                false,
                                &mut gb_rows[bi * k * m..(bi + 1) * k * m],
                                false,
                            );
                        }
                    }
                    self.acc(grads, a, ga);
                }
                if self.req(b) {
                    let mut gb = Tensor::zeros(self.shape(b));
                    if !b_batched {
                        if tb {
                            // dB stored n×k: dC^T @ A over the flattened batch
                            gemm_batched(1, n, batch * m, k, gd, true, av, false, false, gb.data_mut(), false);
                        } else {
                            gemm_batched(1, k, batch * m, n, av, true, gd, false, false, gb.data_mut(), false);
                        }
                    } else {
                        let out = gb.data_mut();
                        for bi in 0..batch {
                            let aslice = &av[bi * m * k..(bi + 1) * m * k];
                            let gslice = &gd[bi * m * n..(bi + 1) * m * n];
                            let oslice = &mut out[bi * k * n..(bi + 1) * k * n];
                            if tb {
                                gemm_batched(1, n, m, k, gslice, true, aslice, ta, false, oslice, false);
                            } else {
                                gemm_batched(1, k, m, n, aslice, !ta, gslice, false, false, oslice, false);
                            }
                        }
                    }
                    self.acc(grads, b, gb);
                }
            }
            Op::Unary(a, kind) => {
                let xv = self.value(*a).data();
                let yv = node.value.data();
                let mut ga = g;
                for ((gx, &x), &y) in ga.data_mut().iter_mut().zip(xv).zip(yv) {
                    let d = match kind {
                        Unary::Neg => -F::one(),
                        Unary::Exp => y,
                        Unary::Log => F::one() / x,
                        Unary::Abs => {
                            if x > F::zero() {
                                F::one()
                            } else if x < F::zero() {
                                -F::one()
                            } else {
                                F::zero()
                            }
                        }
                        Unary::Relu => {
                            if x > F::zero() {
                                F::one()
                            } else {
                                F::zero()
                            }
                        }
                        Unary::Square => F::c(2.0) * x,
                        Unary::Tanh => F::one() - y * y,
                        Unary::Sigmoid => y * (F::one() - y),
                        Unary::Silu => {
                            let s = sigmoid(x);
                            s * (F::one() + x * (F::one() - s))
                        }
                        Unary::Gelu => {
                            let t = F::c(2.0) * sigmoid(F::c(2.0) * gelu_inner(x)) - F::one();
                            let du = F::c(GELU_K) * (F::one() + F::c(3.0 * GELU_C) * x * x);
                            F::c(0.5) * (F::one() + t) + F::c(0.5) * x * (F::one() - t * t) * du
                        }
                    };
                    *gx *= d;
                }
                self.acc(grads, *a, ga);
            }
            Op::LayerNorm { x, rstd } => {
                let d = node.value.last_dim();
                let y = node.value.data();
                let inv_d = F::c(1.0 / d as f64);
                let mut gx = g;
                for ((grow, yrow), &r) in gx.data_mut().chunks_mut(d).zip(y.chunks(d)).zip(rstd) {
                    let mg = grow.iter().copied().sum::<F>() * inv_d;
                    let mgy = grow.iter().zip(yrow).map(|(&a, &b)| a * b).sum::<F>() * inv_d;
                    for (gv, &yv) in grow.iter_mut().zip(yrow) {
                        *gv = r * (*gv - mg - yv * mgy);
                    }
                }
                self.acc(grads, *x, gx);
            }
            Op::RmsNorm { x, rstd } => {
                let d = node.value.last_dim();
                let y = node.value.data();
                let inv_d = F::c(1.0 / d as f64);
                let mut gx = g;
                for ((grow, yrow), &r) in gx.data_mut().chunks_mut(d).zip(y.chunks(d)).zip(rstd) {
                    let mgy = grow.iter().zip(yrow).map(|(&a, &b)| a * b).sum::<F>() * inv_d;
                    for (gv, &yv) in grow.iter_mut().zip(yrow) {
                        *gv = r * (*gv - yv * mgy);
                    }
                }
                self.acc(grads, *x, gx);
            }
            Op::Softmax(x) => {
                let d = node.value.last_dim();
                let y = node.value.data();
                let mut gx = g;
                for (grow, yrow) in gx.data_mut().chunks_mut(d).zip(y.chunks(d)) {
                    let dot = grow.iter().zip(yrow).map(|(&a, &b)| a * b).sum::<F>();
                    for (gv, &yv) in grow.iter_mut().zip(yrow) {
                        *gv = yv * (*gv - dot);
                    }
                }
                self.acc(grads, *x, gx);
            }
            Op::Reshape(x) => {
                let gx = g.reshape(self.shape(*x)).expect("reshape grad");
                self.acc(grads, *x, gx);
            }
            Op::Permute(x, perm) => {
                let mut inv = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inv[p] = i;
                }
                self.acc(grads, *x, permute_tensor(&g, &inv));
            }
            Op::Concat(parts) => {
                let mut start = 0;
                for &p in parts {
                    let rows = self.shape(p)[0];
                    if self.req(p) {
                        self.acc(grads, p, g.narrow_rows(start, rows));
                    }
                    start += rows;
                }
            }
            Op::Narrow(x, start) => {
                let mut gx = Tensor::zeros(self.shape(*x));
                let row: usize = g.shape()[1..].iter().product();
                gx.data_mut()[start * row..start * row + g.numel()].copy_from_slice(g.data());
                self.acc(grads, *x, gx);
            }
            Op::Gather(x, index) => {
                let mut gx = Tensor::zeros(self.shape(*x));
                let dst = gx.data_mut();
                for (&j, &gv) in index.iter().zip(g.data()) {
                    dst[j] += gv;
                }
                self.acc(grads, *x, gx);
            }
            Op::Rope(x, table) => {
                let mut gx = g;
                rope_apply(&mut gx, table, true);
                self.acc(grads, *x, gx);
            }
            Op::SumAll(x) => {
                let gv = g.item();
                self.acc(grads, *x, Tensor::full(self.shape(*x), gv));
            }
            Op::SumLast(x) => {
                let s = self.shape(*x);
                let d = s.last().copied().unwrap_or(1);
                let mut gx = Tensor::zeros(s);
                for (row, &gv) in gx.data_mut().chunks_mut(d).zip(g.data()) {
                    row.iter_mut().for_each(|v| *v = gv);
                }
                self.acc(grads, *x, gx);
            }
            &Op::AvgPool { x, h, w, c, k } => {
                let (ho, wo) = (h / k, w / k);
                let inv = F::c(1.0 / (k * k) as f64);
                let mut gx = Tensor::zeros(&[h, w, c]);
                let gd = g.data();
                let dst = gx.data_mut();
                for i in 0..ho {
                    for j in 0..wo {
                        for di in 0..k {
                            for dj in 0..k {
                                let base = ((i * k + di) * w + (j * k + dj)) * c;
                                for ch in 0..c {
                                    dst[base + ch] += gd[(i * wo + j) * c + ch] * inv;
                                }
                            }
                        }
                    }
                }
                self.acc(grads, x, gx);
            }
        }
    }
}

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C: f64 = 0.044715;

#[inline]
fn gelu_inner<F: Real>(x: F) -> F {
    F::c(GELU_K) * (x + F::c(GELU_C) * x * x * x)
}

#[inline]
fn sigmoid<F: Real>(x: F) -> F {
    F::one() / (F::one() + (-x).exp())
}

fn permute_tensor<F: Real>(t: &Tensor<F>, perm: &[usize]) -> Tensor<F> {
    let s = t.shape();
    assert_eq!(perm.len(), s.len(), "permute rank");
    let out_shape: Vec<usize> = perm.iter().map(|&p| s[p]).collect();
    let in_strides = strides(s);
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let n = t.numel();
    let mut out = Vec::with_capacity(n);
    let mut idx = vec![0usize; out_shape.len()];
    let src = t.data();
    let rank = out_shape.len();
    if rank == 0 {
        return t.clone();
    }
    // innermost axis iterated directly
    let inner = out_shape[rank - 1];
    let inner_stride = src_strides[rank - 1];
    let outer = n / inner.max(1);
    for _ in 0..outer {
        let base: usize = idx.iter().zip(&src_strides).map(|(&i, &s)| i * s).sum();
        if inner_stride == 1 {
            out.extend_from_slice(&src[base..base + inner]);
        } else {
            out.extend((0..inner).map(|j| src[base + j * inner_stride]));
        }
        for ax in (0..rank - 1).rev() {
            idx[ax] += 1;
            if idx[ax] < out_shape[ax] {
                break;
            }
            idx[ax] = 0;
        }
    }
    Tensor::from_vec(&out_shape, out).expect("permute")
}

fn rope_apply<F: Real>(t: &mut Tensor<F>, table: &RopeTable<F>, inverse: bool) {
    let s = t.shape().to_vec();
    let (n, h, dh) = (s[0], s[1], s[2]);
    let data = t.data_mut();
    for tok in 0..n {
        for head in 0..h {
            let base = (tok * h + head) * dh;
            for p in 0..table.pairs {
                let c = table.cos[tok * table.pairs + p];
                let sn = if inverse {
                    -table.sin[tok * table.pairs + p]
                } else {
                    table.sin[tok * table.pairs + p]
                };
                let x0 = data[base + 2 * p];
                let x1 = data[base + 2 * p + 1];
                data[base + 2 * p] = x0 * c - x1 * sn;
                data[base + 2 * p + 1] = x0 * sn + x1 * c;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_t(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    /// Compare analytic input gradients of `f` with central differences.
    fn check(inputs: Vec<Tensor<f64>>, f: impl Fn(&mut Graph<f64>, &[Var]) -> Var) {
        let mut g = Graph::detached();
        let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
        let out = f(&mut g, &vars);
        let out = g.sum(out);
        let grads = g.backward(out);
        let h = 1e-6;
        for (k, t) in inputs.iter().enumerate() {
            let an = grads.wrt(vars[k]).cloned().unwrap_or_else(|| Tensor::zeros(t.shape()));
            for i in 0..t.numel() {
                let eval = |delta: f64| {
                    let mut g = Graph::detached();
                    let vs: Vec<Var> = inputs
                        .iter()
                        .enumerate()
                        .map(|(j, u)| {
                            let mut u = u.clone();
                            if j == k {
                                u.data_mut()[i] += delta;
                            }
                            g.input(u)
                        })
                        .collect();
                    let o = f(&mut g, &vs);
                    g.value(o).sum()
                };
                let num = (eval(h) - eval(-h)) / (2.0 * h);
                let a = an.data()[i];
                let rel = (a - num).abs() / (a.abs() + num.abs() + 1e-8);
                assert!(rel < 1e-6 || (a - num).abs() < 1e-8, "input {k} elem {i}: analytic {a} numeric {num}");
            }
        }
    }

    #[test]
    fn grad_elementwise_and_broadcast() {
        let mut r = ChaCha8Rng::seed_from_u64(1);
        let a = rand_t(&[3, 4], &mut r);
        let b = rand_t(&[3, 4], &mut r);
        let c = rand_t(&[4], &mut r);
        check(vec![a, b, c], |g, v| {
            let x = g.mul(v[0], v[1]);
            let y = g.sub(x, v[1]);
            let z = g.add_bcast(y, v[2]);
            let w = g.mul_bcast(z, v[2]);
            let s = g.scale(w, 0.7);
            let t = g.add_scalar(s, 0.1);
            g.add(t, v[0])
        });
    }

    #[test]
    fn grad_unaries() {
        let mut r = ChaCha8Rng::seed_from_u64(2);
        let a = rand_t(&[5, 3], &mut r);
        for kind in [
            Unary::Neg,
            Unary::Exp,
            Unary::Abs,
            Unary::Relu,
            Unary::Square,
            Unary::Tanh,
            Unary::Sigmoid,
            Unary::Silu,
            Unary::Gelu,
        ] {
            check(vec![a.clone()], |g, v| g.unary(v[0], kind));
        }
        let pos = a.map(|x| x.abs() + 0.5);
        check(vec![pos], |g, v| g.log(v[0]));
    }

    #[test]
    fn grad_matmul_all_layouts() {
        let mut r = ChaCha8Rng::seed_from_u64(3);
        for &(ta, tb) in &[(false, false), (false, true), (true, false), (true, true)] {
            let a = rand_t(if ta { &[2, 4, 3] } else { &[2, 3, 4] }, &mut r);
            let b = rand_t(if tb { &[2, 5, 4] } else { &[2, 4, 5] }, &mut r);
            check(vec![a, b], |g, v| {
                let y = g.matmul_t(v[0], v[1], ta, tb);
                g.square(y)
            });
        }
        for tb in [false, true] {
            let a = rand_t(&[2, 3, 4], &mut r);
            let b = rand_t(if tb { &[5, 4] } else { &[4, 5] }, &mut r);
            check(vec![a, b], |g, v| {
                let y = g.matmul_t(v[0], v[1], false, tb);
                g.square(y)
            });
        }
    }

    #[test]
    fn grad_norms_and_softmax() {
        let mut r = ChaCha8Rng::seed_from_u64(4);
        let a = rand_t(&[3, 6], &mut r);
        let w = rand_t(&[3, 6], &mut r);
        check(vec![a.clone(), w.clone()], |g, v| {
            let y = g.layer_norm(v[0], 1e-6);
            g.mul(y, v[1])
        });
        check(vec![a.clone(), w.clone()], |g, v| {
            let y = g.rms_norm(v[0], 1e-6);
            g.mul(y, v[1])
        });
        check(vec![a, w], |g, v| {
            let y = g.softmax(v[0]);
            g.mul(y, v[1])
        });
    }

    #[test]
    fn grad_shape_ops() {
        let mut r = ChaCha8Rng::seed_from_u64(5);
        let a = rand_t(&[4, 6], &mut r);
        let b = rand_t(&[2, 6], &mut r);
        let w = rand_t(&[3, 2, 6], &mut r);
        check(vec![a, b, w], |g, v| {
            let c = g.concat(&[v[0], v[1]]);
            let n = g.narrow(c, 1, 4);
            let rs = g.reshape(n, &[4, 2, 3]);
            let p = g.permute(rs, &[2, 0, 1]);
            let p = g.permute(p, &[0, 2, 1]);
            let q = g.narrow(p, 0, 3);
            let q = g.reshape(q, &[3, 2, 4]);
            let q2 = g.narrow(q, 0, 3);
            let wr = g.reshape(v[2], &[3, 2, 6]);
            let wn = g.gather(wr, Rc::new((0..24).map(|i| (i * 5) % 36).collect()), &[3, 2, 4]);
            g.mul(q2, wn)
        });
    }

    #[test]
    fn grad_rope_sum_pool() {
        let mut r = ChaCha8Rng::seed_from_u64(6);
        let a = rand_t(&[3, 2, 4], &mut r);
        let table = Rc::new(RopeTable {
            tokens: 3,
            pairs: 2,
            cos: (0..6).map(|i| (i as f64 * 0.7).cos()).collect(),
            sin: (0..6).map(|i| (i as f64 * 0.7).sin()).collect(),
        });
        let w = rand_t(&[3, 2, 4], &mut r);
        check(vec![a, w], |g, v| {
            let y = g.rope(v[0], table.clone());
            g.mul(y, v[1])
        });
        let img = rand_t(&[6, 5, 2], &mut r);
        let w2 = rand_t(&[3, 2, 2], &mut r);
        check(vec![img, w2], |g, v| {
            let p = g.avg_pool(v[0], 2);
            let s = g.mul(p, v[1]);
            let s = g.sum_last(s);
            g.square(s)
        });
    }

    #[test]
    fn rope_preserves_norm_and_inverts() {
        let mut r = ChaCha8Rng::seed_from_u64(7);
        let a = rand_t(&[2, 1, 4], &mut r);
        let table = RopeTable {
            tokens: 2,
            pairs: 2,
            cos: (0..4).map(|i| (i as f64).cos()).collect(),
            sin: (0..4).map(|i| (i as f64).sin()).collect(),
        };
        let mut b = a.clone();
        rope_apply(&mut b, &table, false);
        assert!((a.sq_norm() - b.sq_norm()).abs() < 1e-12);
        rope_apply(&mut b, &table, true);
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn param_grads_and_frozen_graph() {
        let mut store = ParamStore::<f64>::new();
        let w = store.insert("w", Tensor::from_vec(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let unused = store.insert("u", Tensor::zeros(&[3]));
        let mut g = Graph::new(&store);
        let x = g.constant(Tensor::from_vec(&[1, 2], vec![1.0, 1.0]).unwrap());
        let wv = g.param(w);
        let y = g.matmul(x, wv);
        let s = g.sum(y);
        let grads = g.backward(s);
        assert_eq!(grads.param(w).unwrap().data(), &[1.0, 1.0, 1.0, 1.0]);
        assert!(grads.param(unused).is_none());
        let all = grads.into_param_grads(&store);
        assert_eq!(all[1].data(), &[0.0, 0.0, 0.0]);

        let mut g = Graph::frozen(&store);
        let wv = g.param(w);
        let s = g.sum(wv);
        assert!(g.backward(s).param(w).is_none());
    }
}
