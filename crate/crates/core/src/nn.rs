//! Transformer building blocks on top of the autodiff graph.
//!
//! All blocks use pre-normalisation: `x + f(norm(x))`.

use std::cell::RefCell;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use rand_distr::{Distribution, Uniform};

use crate::autodiff::{Graph, ParamId, ParamStore, Tensor, Var};

/// Additive attention mask value for excluded keys. Finite so activations stay
/// finite, large enough that `exp` underflows to exactly zero.
pub const MASK_NEG: f64 = -1e30;

/// Per-pass context: the graph, the parameters and the dropout state.
pub struct Ctx<'g> {
    pub graph: &'g Graph,
    pub store: &'g ParamStore,
    pub dropout: f64,
    rng: RefCell<ChaCha8Rng>,
}

impl<'g> Ctx<'g> {
    /// Evaluation context, dropout disabled.
    pub fn eval(graph: &'g Graph, store: &'g ParamStore) -> Self {
        Ctx {
            graph,
            store,
            dropout: 0.0,
            rng: RefCell::new(ChaCha8Rng::seed_from_u64(0)),
        }
    }

    pub fn train(graph: &'g Graph, store: &'g ParamStore, dropout: f64, seed: u64) -> Self {
        Ctx {
            graph,
            store,
            dropout,
            rng: RefCell::new(ChaCha8Rng::seed_from_u64(seed)),
        }
    }

    pub fn p(&self, id: ParamId) -> Var<'g> {
        self.graph.param(self.store, id)
    }

    pub fn constant(&self, t: Tensor) -> Var<'g> {
        self.graph.constant(t)
    }

    pub fn dropout(&self, x: Var<'g>) -> Var<'g> {
        if self.dropout <= 0.0 {
            return x;
        }
        let keep = 1.0 - self.dropout;
        let shape = x.shape();
        let n = shape.iter().product();
        let mut rng = self.rng.borrow_mut();
        let mask = (0..n)
            .map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        x.mul(self.graph.constant(Tensor::new(&shape, mask)))
    }
}

/// Deterministic parameter initialisation.
pub struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    pub fn new(seed: u64) -> Self {
        Init {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn xavier(&mut self, fan_in: usize, fan_out: usize) -> Tensor {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
        let data = (0..fan_in * fan_out).map(|_| dist.sample(&mut self.rng)).collect();
        Tensor::new(&[fan_in, fan_out], data)
    }

    pub fn normal(&mut self, shape: &[usize], std: f64) -> Tensor {
        let dist = rand_distr::Normal::new(0.0, std).expect("valid std");
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| dist.sample(&mut self.rng)).collect())
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, init: &mut Init, name: &str, in_dim: usize, out_dim: usize) -> Self {
        Linear {
            weight: store.register(format!("{name}.weight"), init.xavier(in_dim, out_dim)),
            bias: store.register(format!("{name}.bias"), Tensor::zeros(&[out_dim])),
            in_dim,
            out_dim,
        }
    }

    pub fn forward<'g>(&self, ctx: &Ctx<'g>, x: Var<'g>) -> Var<'g> {
        x.matmul(ctx.p(self.weight)).add_bcast(ctx.p(self.bias))
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        LayerNorm {
            gamma: store.register(format!("{name}.gamma"), Tensor::full(&[dim], 1.0)),
            beta: store.register(format!("{name}.beta"), Tensor::zeros(&[dim])),
        }
    }

    pub fn forward<'g>(&self, ctx: &Ctx<'g>, x: Var<'g>) -> Var<'g> {
        x.layer_norm()
            .mul_bcast(ctx.p(self.gamma))
            .add_bcast(ctx.p(self.beta))
    }
}

#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub heads: usize,
}

impl MultiHeadAttention {
    pub fn new(store: &mut ParamStore, init: &mut Init, name: &str, dim: usize, heads: usize) -> Self {
        assert_eq!(dim % heads, 0, "model width {dim} not divisible by {heads} heads");
        MultiHeadAttention {
            q: Linear::new(store, init, &format!("{name}.q"), dim, dim),
            k: Linear::new(store, init, &format!("{name}.k"), dim, dim),
            v: Linear::new(store, init, &format!("{name}.v"), dim, dim),
            out: Linear::new(store, init, &format!("{name}.out"), dim, dim),
            heads,
        }
    }

    /// `(b, t, d) -> (b * heads, t, d / heads)`.
    fn split_heads<'g>(&self, x: Var<'g>) -> Var<'g> {
        let s = x.shape();
        let (b, t, d) = (s[0], s[1], s[2]);
        let dh = d / self.heads;
        x.reshape(&[b, t, self.heads, dh])
            .permute(&[0, 2, 1, 3])
            .reshape(&[b * self.heads, t, dh])
    }

    /// Attention of `query (b*r, tq, d)` over `kv (b, tk, d)`.
    ///
    /// `repeat = r` shares each key/value batch entry across `r` consecutive query
    /// batch entries. `mask`, if given, has shape `(b*r*heads, tq, tk)` and is added
    /// to the attention logits.
    pub fn forward<'g>(
        &self,
        ctx: &Ctx<'g>,
        query: Var<'g>,
        kv: Var<'g>,
        repeat: usize,
        mask: Option<Var<'g>>,
    ) -> Var<'g> {
        let qs = query.shape();
        let (bq, tq, d) = (qs[0], qs[1], qs[2]);
        let ks = kv.shape();
        let (b, tk) = (ks[0], ks[1]);
        assert_eq!(bq, b * repeat, "query batch {bq} != {b} x {repeat}");
        let dh = d / self.heads;

        let q = self.split_heads(self.q.forward(ctx, query));
        let mut k = self.split_heads(self.k.forward(ctx, kv));
        let mut v = self.split_heads(self.v.forward(ctx, kv));
        if repeat > 1 {
            let widen = |x: Var<'g>| {
                x.reshape(&[b, self.heads * tk * dh])
                    .expand(1, repeat)
                    .reshape(&[b * repeat * self.heads, tk, dh])
            };
            k = widen(k);
            v = widen(v);
        }
        let mut logits = q.bmm(k, true).scale(1.0 / (dh as f64).sqrt());
        if let Some(m) = mask {
            logits = logits.add(m);
        }
        let attn = ctx.dropout(logits.softmax());
        let merged = attn
            .bmm(v, false)
            .reshape(&[bq, self.heads, tq, dh])
            .permute(&[0, 2, 1, 3])
            .reshape(&[bq, tq, d]);
        self.out.forward(ctx, merged)
    }
}

#[derive(Debug, Clone)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    pub fn new(store: &mut ParamStore, init: &mut Init, name: &str, dim: usize, hidden: usize) -> Self {
        FeedForward {
            up: Linear::new(store, init, &format!("{name}.up"), dim, hidden),
            down: Linear::new(store, init, &format!("{name}.down"), hidden, dim),
        }
    }

    pub fn forward<'g>(&self, ctx: &Ctx<'g>, x: Var<'g>) -> Var<'g> {
        let h = ctx.dropout(self.up.forward(ctx, x).relu());
        self.down.forward(ctx, h)
    }
}

/// Self-attention over the sequence axis plus feed-forward.
#[derive(Debug, Clone)]
pub struct EncoderLayer {
    pub norm1: LayerNorm,
    pub attn: MultiHeadAttention,
    pub norm2: LayerNorm,
    pub ff: FeedForward,
}

impl EncoderLayer {
    pub fn new(store: &mut ParamStore, init: &mut Init, name: &str, dim: usize, heads: usize, hidden: usize) -> Self {
        EncoderLayer {
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), dim),
            attn: MultiHeadAttention::new(store, init, &format!("{name}.self_attn"), dim, heads),
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), dim),
            ff: FeedForward::new(store, init, &format!("{name}.ff"), dim, hidden),
        }
    }

    pub fn forward<'g>(&self, ctx: &Ctx<'g>, x: Var<'g>, mask: Option<Var<'g>>) -> Var<'g> {
        let h = self.norm1.forward(ctx, x);
        let x = x.add(ctx.dropout(self.attn.forward(ctx, h, h, 1, mask)));
        let h = self.norm2.forward(ctx, x);
        x.add(ctx.dropout(self.ff.forward(ctx, h)))
    }
}

/// Self-attention over tokens, cross-attention to a shared memory, feed-forward.
#[derive(Debug, Clone)]
pub struct DecoderLayer {
    pub norm1: LayerNorm,
    pub self_attn: MultiHeadAttention,
    pub norm2: LayerNorm,
    pub norm_mem: LayerNorm,
    pub cross_attn: MultiHeadAttention,
    pub norm3: LayerNorm,
    pub ff: FeedForward,
}

impl DecoderLayer {
    pub fn new(store: &mut ParamStore, init: &mut Init, name: &str, dim: usize, heads: usize, hidden: usize) -> Self {
        DecoderLayer {
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), dim),
            self_attn: MultiHeadAttention::new(store, init, &format!("{name}.self_attn"), dim, heads),
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), dim),
            norm_mem: LayerNorm::new(store, &format!("{name}.norm_mem"), dim),
            cross_attn: MultiHeadAttention::new(store, init, &format!("{name}.cross_attn"), dim, heads),
            norm3: LayerNorm::new(store, &format!("{name}.norm3"), dim),
            ff: FeedForward::new(store, init, &format!("{name}.ff"), dim, hidden),
        }
    }

    /// `x (b*r, n, d)` attends to itself and to `memory (b, n_mem, d)` shared over `r`.
    pub fn forward<'g>(
        &self,
        ctx: &Ctx<'g>,
        x: Var<'g>,
        memory: Var<'g>,
        repeat: usize,
        self_mask: Option<Var<'g>>,
        mem_mask: Option<Var<'g>>,
    ) -> Var<'g> {
        let h = self.norm1.forward(ctx, x);
        let x = x.add(ctx.dropout(self.self_attn.forward(ctx, h, h, 1, self_mask)));
        let h = self.norm2.forward(ctx, x);
        let m = self.norm_mem.forward(ctx, memory);
        let x = x.add(ctx.dropout(self.cross_attn.forward(ctx, h, m, repeat, mem_mask)));
        let h = self.norm3.forward(ctx, x);
        x.add(ctx.dropout(self.ff.forward(ctx, h)))
    }
}

/// Cross-attention block that adds information from a `source` stream into a
/// `target` stream: the source provides the queries, the target the keys and
/// values, and the result is added back onto the target.
#[derive(Debug, Clone)]
pub struct CrossInjection {
    pub norm_source: LayerNorm,
    pub norm_target: LayerNorm,
    pub attn: MultiHeadAttention,
}

impl CrossInjection {
    pub fn new(store: &mut ParamStore, init: &mut Init, name: &str, dim: usize, heads: usize) -> Self {
        CrossInjection {
            norm_source: LayerNorm::new(store, &format!("{name}.norm_source"), dim),
            norm_target: LayerNorm::new(store, &format!("{name}.norm_target"), dim),
            attn: MultiHeadAttention::new(store, init, &format!("{name}.attn"), dim, heads),
        }
    }

    pub fn forward<'g>(&self, ctx: &Ctx<'g>, target: Var<'g>, source: Var<'g>) -> Var<'g> {
        let q = self.norm_source.forward(ctx, source);
        let kv = self.norm_target.forward(ctx, target);
        target.add(ctx.dropout(self.attn.forward(ctx, q, kv, 1, None)))
    }
}

/// Fixed sinusoidal encoding of shape `(len, dim)`.
pub fn sinusoidal_encoding(len: usize, dim: usize) -> Tensor {
    let mut data = vec![0.0; len * dim];
    for t in 0..len {
        for i in (0..dim).step_by(2) {
            let freq = 1.0 / 10000f64.powf(i as f64 / dim as f64);
            data[t * dim + i] = (t as f64 * freq).sin();
            if i + 1 < dim {
                data[t * dim + i + 1] = (t as f64 * freq).cos();
            }
        }
    }
    Tensor::new(&[len, dim], data)
}
