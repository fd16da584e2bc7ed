//! Layers shared by the autoencoder, the diffusion transformer and the
//! discriminator, written against the autograd tape.

use std::rc::Rc;

use rand::Rng;

use crate::autograd::{Graph, RopeTable, Var};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{Real, Tensor};

pub const LN_EPS: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    /// Weights `N(0, std²)` (default `1/sqrt(d_in)` when `std` is None),
    /// zero bias.
    pub fn new<F: Real>(
        store: &mut ParamStore<F>,
        name: &str,
        d_in: usize,
        d_out: usize,
        bias: bool,
        std: Option<f64>,
        rng: &mut impl Rng,
    ) -> Self {
        let std = std.unwrap_or(1.0 / (d_in as f64).sqrt());
        let w = store.normal(format!("{name}.w"), &[d_in, d_out], std, rng);
        let b = bias.then(|| store.zeros(format!("{name}.b"), &[d_out]));
        Self { w, b, d_in, d_out }
    }

    /// Look the layer up in an existing store.
    pub fn find<F: Real>(store: &ParamStore<F>, name: &str) -> Option<Self> {
        let w = store.id(&format!("{name}.w"))?;
        let s = store.get(w).shape().to_vec();
        Some(Self {
            w,
            b: store.id(&format!("{name}.b")),
            d_in: s[0],
            d_out: s[1],
        })
    }

    pub fn forward<F: Real>(&self, g: &mut Graph<F>, x: Var) -> Var {
        let w = g.param(self.w);
        let b = self.b.map(|b| g.param(b));
        g.linear(x, w, b)
    }
}

#[derive(Clone, Debug)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new<F: Real>(store: &mut ParamStore<F>, name: &str, d: usize, hidden: usize, out_std: f64, rng: &mut impl Rng) -> Self {
        Self {
            fc1: Linear::new(store, &format!("{name}.fc1"), d, hidden, true, None, rng),
            fc2: Linear::new(store, &format!("{name}.fc2"), hidden, d, true, Some(out_std), rng),
        }
    }

    pub fn forward<F: Real>(&self, g: &mut Graph<F>, x: Var) -> Var {
        let h = self.fc1.forward(g, x);
        let h = g.gelu(h);
        self.fc2.forward(g, h)
    }
}

/// SwiGLU feed-forward: `W2 (silu(W1 x) * W3 x)`.
#[derive(Clone, Debug)]
pub struct SwiGlu {
    pub w1: Linear,
    pub w3: Linear,
    pub w2: Linear,
}

impl SwiGlu {
    pub fn new<F: Real>(store: &mut ParamStore<F>, name: &str, d: usize, hidden: usize, out_std: f64, rng: &mut impl Rng) -> Self {
        Self {
            w1: Linear::new(store, &format!("{name}.w1"), d, hidden, false, None, rng),
            w3: Linear::new(store, &format!("{name}.w3"), d, hidden, false, None, rng),
            w2: Linear::new(store, &format!("{name}.w2"), hidden, d, false, Some(out_std), rng),
        }
    }

    pub fn forward<F: Real>(&self, g: &mut Graph<F>, x: Var) -> Var {
        let a = self.w1.forward(g, x);
        let a = g.silu(a);
        let b = self.w3.forward(g, x);
        let h = g.mul(a, b);
        self.w2.forward(g, h)
    }
}

/// Multi-head attention projections. Queries, keys and values come from a
/// fused projection of width `3d`.
#[derive(Clone, Debug)]
pub struct Attention {
    pub qkv: Linear,
    pub out: Linear,
    pub heads: usize,
    pub d: usize,
}

/// Per-head query, key and value tensors, each `[tokens, heads, head_dim]`.
pub struct Qkv {
    pub q: Var,
    pub k: Var,
    pub v: Var,
}

impl Attention {
    pub fn new<F: Real>(store: &mut ParamStore<F>, name: &str, d: usize, heads: usize, out_std: f64, rng: &mut impl Rng) -> Self {
        assert_eq!(d % heads, 0, "width {d} not divisible by {heads} heads");
        Self {
            qkv: Linear::new(store, &format!("{name}.qkv"), d, 3 * d, true, None, rng),
            out: Linear::new(store, &format!("{name}.out"), d, d, true, Some(out_std), rng),
            heads,
            d,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d / self.heads
    }

    /// Project `x: [T, d]` and split into heads, rotating queries and keys
    /// when a table is given.
    pub fn project<F: Real>(&self, g: &mut Graph<F>, x: Var, rope: Option<&Rc<RopeTable<F>>>) -> Qkv {
        let t = g.shape(x)[0];
        let (h, dh) = (self.heads, self.head_dim());
        let qkv = self.qkv.forward(g, x);
        let qkv = g.reshape(qkv, &[t, 3, h, dh]);
        let qkv = g.permute(qkv, &[1, 0, 2, 3]);
        let mut parts = [0, 1, 2].map(|i| {
            let p = g.narrow(qkv, i, 1);
            g.reshape(p, &[t, h, dh])
        });
        if let Some(table) = rope {
            parts[0] = g.rope(parts[0], table.clone());
            parts[1] = g.rope(parts[1], table.clone());
        }
        Qkv {
            q: parts[0],
            k: parts[1],
            v: parts[2],
        }
    }

    /// Scaled dot-product attention over `[T, heads, dh]` inputs, returning
    /// the merged heads `[Tq, d]` before the output projection.
    pub fn attend<F: Real>(&self, g: &mut Graph<F>, q: Var, k: Var, v: Var) -> Var {
        let tq = g.shape(q)[0];
        let dh = self.head_dim();
        let q = g.permute(q, &[1, 0, 2]);
        let k = g.permute(k, &[1, 0, 2]);
        let v = g.permute(v, &[1, 0, 2]);
        let s = g.matmul_t(q, k, false, true);
        let s = g.scale(s, F::c(1.0 / (dh as f64).sqrt()));
        let a = g.softmax(s);
        let o = g.matmul(a, v);
        let o = g.permute(o, &[1, 0, 2]);
        g.reshape(o, &[tq, self.d])
    }

    /// Full self-attention over `x: [T, d]`.
    pub fn forward<F: Real>(&self, g: &mut Graph<F>, x: Var, rope: Option<&Rc<RopeTable<F>>>) -> Var {
        let p = self.project(g, x, rope);
        let o = self.attend(g, p.q, p.k, p.v);
        self.out.forward(g, o)
    }
}

/// Rows of a rotary table: `Some((row, col))` rotates by grid position,
/// `None` leaves the token untouched. Half the rotated pairs follow the row
/// index and half the column index.
pub fn rope_2d<F: Real>(positions: &[Option<(usize, usize)>], head_dim: usize, base: f64) -> RopeTable<F> {
    let pairs = head_dim / 2;
    let per_axis = (pairs / 2).max(1);
    let mut cos = Vec::with_capacity(positions.len() * pairs);
    let mut sin = Vec::with_capacity(positions.len() * pairs);
    for pos in positions {
        for p in 0..pairs {
            let angle = match pos {
                Some((r, c)) => {
                    let (axis_pos, j) = if p < per_axis { (*r, p) } else { (*c, p - per_axis) };
                    let freq = base.powf(-(j as f64) / per_axis as f64);
                    axis_pos as f64 * freq
                }
                None => 0.0,
            };
            cos.push(F::c(angle.cos()));
            sin.push(F::c(angle.sin()));
        }
    }
    RopeTable {
        tokens: positions.len(),
        pairs,
        cos,
        sin,
    }
}

/// Grid positions for `views` consecutive `rows × cols` token grids.
pub fn grid_positions(views: usize, rows: usize, cols: usize) -> Vec<Option<(usize, usize)>> {
    (0..views)
        .flat_map(|_| (0..rows).flat_map(move |r| (0..cols).map(move |c| Some((r, c)))))
        .collect()
}

/// Pre-norm transformer block with non-affine layer norms.
#[derive(Clone, Debug)]
pub struct Block {
    pub attn: Attention,
    pub mlp: Mlp,
}

impl Block {
    pub fn new<F: Real>(store: &mut ParamStore<F>, name: &str, d: usize, heads: usize, mlp_ratio: usize, depth: usize, rng: &mut impl Rng) -> Self {
        // residual branches start small so deep stacks begin near identity
        let out_std = 0.02 / (2.0 * depth.max(1) as f64).sqrt();
        Self {
            attn: Attention::new(store, &format!("{name}.attn"), d, heads, out_std, rng),
            mlp: Mlp::new(store, &format!("{name}.mlp"), d, d * mlp_ratio, out_std, rng),
        }
    }

    pub fn forward<F: Real>(&self, g: &mut Graph<F>, x: Var, rope: Option<&Rc<RopeTable<F>>>) -> Var {
        let h = g.layer_norm(x, LN_EPS);
        let h = self.attn.forward(g, h, rope);
        let x = g.add(x, h);
        self.mlp_residual(g, x)
    }

    pub fn mlp_residual<F: Real>(&self, g: &mut Graph<F>, x: Var) -> Var {
        let h = g.layer_norm(x, LN_EPS);
        let h = self.mlp.forward(g, h);
        g.add(x, h)
    }
}

/// Index map from patch-major order (`token, py, px, c`) to row-major image
/// order (`y, x, c`) for an `h × w` image cut into `p × p` patches.
/// `out[i]` is the source index of image element `i`.
pub fn unpatchify_index(h: usize, w: usize, p: usize, c: usize) -> Vec<usize> {
    let cols = w / p;
    let mut idx = Vec::with_capacity(h * w * c);
    for y in 0..h {
        for x in 0..w {
            let tok = (y / p) * cols + x / p;
            let inner = ((y % p) * p + x % p) * c;
            for ch in 0..c {
                idx.push(tok * p * p * c + inner + ch);
            }
        }
    }
    idx
}

/// Inverse of [`unpatchify_index`]: image order to patch-major order.
pub fn patchify_index(h: usize, w: usize, p: usize, c: usize) -> Vec<usize> {
    let src = unpatchify_index(h, w, p, c);
    let mut idx = vec![0; src.len()];
    for (i, &s) in src.iter().enumerate() {
        idx[s] = i;
    }
    idx
}

/// Row-major `[h, w, c]` data cut into `[tokens, p·p·c]` patches.
pub fn patchify<F: Copy>(data: &[F], h: usize, w: usize, p: usize, c: usize) -> Vec<F> {
    patchify_index(h, w, p, c).into_iter().map(|i| data[i]).collect()
}

/// Mean squared error between two same-shaped variables.
pub fn mse<F: Real>(g: &mut Graph<F>, a: Var, b: Var) -> Var {
    let d = g.sub(a, b);
    let s = g.square(d);
    g.mean(s)
}

pub fn tensor_from_f32<F: Real>(shape: &[usize], data: &[f32]) -> Tensor<F> {
    Tensor::from_vec(shape, data.iter().map(|&x| F::c(x as f64)).collect()).expect("shape matches data")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed;

    #[test]
    fn patchify_round_trip() {
        let (h, w, p, c) = (28, 42, 14, 3);
        let data: Vec<usize> = (0..h * w * c).collect();
        let patches = patchify(&data, h, w, p, c);
        // first patch row 0 starts with image pixel (0,0) then (1,0)
        assert_eq!(&patches[..6], &[0, 1, 2, 3, 4, 5]);
        assert_eq!(patches[p * c], w * c);
        let back: Vec<usize> = unpatchify_index(h, w, p, c).into_iter().map(|i| patches[i]).collect();
        assert_eq!(back, data);
    }

    #[test]
    fn rope_rows_without_position_are_identity() {
        let t: RopeTable<f64> = rope_2d(&[None, Some((2, 3))], 8, 100.0);
        assert!(t.cos[..4].iter().all(|&c| c == 1.0));
        assert!(t.sin[..4].iter().all(|&s| s == 0.0));
        assert!((t.cos[4] - 2f64.cos()).abs() < 1e-15);
        assert!((t.cos[6] - 3f64.cos()).abs() < 1e-15);
    }

    #[test]
    fn attention_is_permutation_equivariant_without_rope() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = seed::rng(0, &[]);
        let attn = Attention::new(&mut store, "a", 8, 2, 0.1, &mut rng);
        let x: Vec<f64> = (0..24).map(|i| (i as f64 * 0.37).sin()).collect();
        let run = |x: Vec<f64>| {
            let mut g = Graph::new(&store);
            let xv = g.constant(Tensor::from_vec(&[3, 8], x).unwrap());
            let y = attn.forward(&mut g, xv, None);
            g.value(y).data().to_vec()
        };
        let y = run(x.clone());
        let mut xp = x[8..16].to_vec();
        xp.extend_from_slice(&x[..8]);
        xp.extend_from_slice(&x[16..]);
        let yp = run(xp);
        for i in 0..8 {
            assert!((y[i] - yp[8 + i]).abs() < 1e-12);
            assert!((y[16 + i] - yp[16 + i]).abs() < 1e-12);
        }
    }
}
