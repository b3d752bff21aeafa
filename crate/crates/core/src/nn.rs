//! Named-parameter registry and shared transformer building blocks.
//!
//! All models in this crate (slice ViT, z-axis encoder, resampler, decoder)
//! keep their weights in a [`Params`] map keyed by dotted names. A forward
//! pass first binds every parameter onto a [`Tape`] (so gradients accumulate
//! per name even when a module runs many times on one tape), then composes
//! the ops below.

use std::rc::Rc;

use indexmap::IndexMap;
use rand_chacha::ChaCha8Rng;

use crate::tape::{AttnMask, GradStore, Tape, Var};
use crate::tensor::Tensor;

pub const LN_EPS: f64 = 1e-5;
/// Default init std for projection weights.
pub const INIT_STD: f64 = 0.02;

/// Ordered name → tensor map holding a model's weights.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Params {
    map: IndexMap<String, Tensor>,
}

impl Params {
    pub fn new() -> Self {
        Params::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        let name = name.into();
        assert!(
            self.map.insert(name.clone(), t).is_none(),
            "duplicate parameter {name}"
        );
    }

    pub fn get(&self, name: &str) -> &Tensor {
        self.map
            .get(name)
            .unwrap_or_else(|| panic!("missing parameter {name}"))
    }

    pub fn try_get(&self, name: &str) -> Option<&Tensor> {
        self.map.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Tensor {
        self.map
            .get_mut(name)
            .unwrap_or_else(|| panic!("missing parameter {name}"))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.map.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.map.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.map.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.map.keys()
    }

    /// Merge another param set under a name prefix.
    pub fn absorb(&mut self, prefix: &str, other: Params) {
        for (name, t) in other.map {
            self.insert(format!("{prefix}.{name}"), t);
        }
    }

    pub fn num_values(&self) -> usize {
        self.map.values().map(|t| t.len()).sum()
    }
}

/// Per-tape view of a parameter set: every tensor interned exactly once.
pub struct Bound {
    vars: IndexMap<String, Var>,
}

impl Bound {
    pub fn bind(tape: &mut Tape, params: &Params) -> Self {
        let mut vars = IndexMap::with_capacity(params.len());
        for (name, t) in params.iter() {
            vars.insert(name.clone(), tape.leaf(t.clone()));
        }
        Bound { vars }
    }

    pub fn var(&self, name: &str) -> Var {
        *self
            .vars
            .get(name)
            .unwrap_or_else(|| panic!("unbound parameter {name}"))
    }

    pub fn try_var(&self, name: &str) -> Option<Var> {
        self.vars.get(name).copied()
    }

    /// Collect gradients by parameter name (zero tensors for untouched params).
    pub fn grads(&self, store: &GradStore, params: &Params) -> IndexMap<String, Tensor> {
        let mut out = IndexMap::with_capacity(self.vars.len());
        for (name, var) in &self.vars {
            let g = store
                .get(*var)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros_like(params.get(name)));
            out.insert(name.clone(), g);
        }
        out
    }
}

/// Accumulate `delta` gradient maps into `acc` (missing keys inserted).
pub fn accumulate_grads(acc: &mut IndexMap<String, Tensor>, delta: &IndexMap<String, Tensor>) {
    for (name, g) in delta {
        match acc.get_mut(name) {
            Some(t) => t.add_scaled(g, 1.0),
            None => {
                acc.insert(name.clone(), g.clone());
            }
        }
    }
}

// ---- layer initializers ----

pub fn init_linear(
    params: &mut Params,
    prefix: &str,
    d_in: usize,
    d_out: usize,
    std: f64,
    rng: &mut ChaCha8Rng,
) {
    params.insert(format!("{prefix}.w"), Tensor::randn(&[d_in, d_out], std, rng));
    params.insert(format!("{prefix}.b"), Tensor::zeros(&[d_out]));
}

pub fn init_layer_norm(params: &mut Params, prefix: &str, d: usize) {
    params.insert(format!("{prefix}.g"), Tensor::full(&[d], 1.0));
    params.insert(format!("{prefix}.b"), Tensor::zeros(&[d]));
}

/// One pre-norm transformer block: attention + MLP with residuals.
pub fn init_block(
    params: &mut Params,
    prefix: &str,
    d: usize,
    mlp_hidden: usize,
    rng: &mut ChaCha8Rng,
) {
    init_layer_norm(params, &format!("{prefix}.ln1"), d);
    init_linear(params, &format!("{prefix}.wq"), d, d, INIT_STD, rng);
    init_linear(params, &format!("{prefix}.wk"), d, d, INIT_STD, rng);
    init_linear(params, &format!("{prefix}.wv"), d, d, INIT_STD, rng);
    init_linear(params, &format!("{prefix}.wo"), d, d, INIT_STD, rng);
    init_layer_norm(params, &format!("{prefix}.ln2"), d);
    init_linear(params, &format!("{prefix}.mlp1"), d, mlp_hidden, INIT_STD, rng);
    init_linear(params, &format!("{prefix}.mlp2"), mlp_hidden, d, INIT_STD, rng);
}

// ---- layer forwards ----

pub fn linear(tape: &mut Tape, bound: &Bound, prefix: &str, x: Var) -> Var {
    let w = bound.var(&format!("{prefix}.w"));
    let b = bound.var(&format!("{prefix}.b"));
    let y = tape.matmul(x, w);
    tape.add_bias(y, b)
}

/// Linear layer with an optional low-rank adapter on top of the base weight.
///
/// The adapter contributes `scale * x A^T B^T` where A is `r×d_in` and B is
/// `d_out×r`; with B zero-initialized the output matches the base layer
/// exactly. `lora_prefix` names the adapter pair; when those parameters are
/// absent the base path runs alone.
pub fn linear_lora(
    tape: &mut Tape,
    bound: &Bound,
    prefix: &str,
    lora_prefix: &str,
    scale: f64,
    x: Var,
) -> Var {
    let base = linear(tape, bound, prefix, x);
    let (Some(a), Some(b)) = (
        bound.try_var(&format!("{lora_prefix}.a")),
        bound.try_var(&format!("{lora_prefix}.b")),
    ) else {
        return base;
    };
    // x (N×d_in) @ A^T (d_in×r) @ B^T (r×d_out)
    let xa = tape.matmul_nt(x, a);
    let xab = tape.matmul_nt(xa, b);
    let scaled = tape.scale(xab, scale);
    tape.add(base, scaled)
}

pub fn layer_norm(tape: &mut Tape, bound: &Bound, prefix: &str, x: Var) -> Var {
    let g = bound.var(&format!("{prefix}.g"));
    let b = bound.var(&format!("{prefix}.b"));
    tape.layer_norm(x, g, b, LN_EPS)
}

/// Scaled dot-product attention over pre-projected q/k/v, split across heads.
///
/// `q`: Lq×d, `k`/`v`: Lk×d with d divisible by `heads`. The optional mask
/// disallows key positions per query row via −∞ logits.
pub fn attention(
    tape: &mut Tape,
    q: Var,
    k: Var,
    v: Var,
    heads: usize,
    mask: Option<Rc<AttnMask>>,
) -> Var {
    let d = tape.value(q).cols();
    assert_eq!(d % heads, 0, "dim {} not divisible by heads {}", d, heads);
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = tape.slice_cols(q, h * dh, dh);
        let kh = tape.slice_cols(k, h * dh, dh);
        let vh = tape.slice_cols(v, h * dh, dh);
        let scores = tape.matmul_nt(qh, kh);
        let scaled = tape.scale(scores, scale);
        let weights = tape.softmax_rows(scaled, mask.clone());
        outs.push(tape.matmul(weights, vh));
    }
    tape.concat_cols(&outs)
}

/// Optional low-rank adapters applied inside a block's attention projections.
#[derive(Debug, Clone)]
pub struct LoraHook {
    /// Adapter name prefix corresponding to this block (e.g. `"lora.blk0"`).
    pub prefix: String,
    /// α / r.
    pub scale: f64,
}

/// Pre-norm transformer block; returns same-shape features.
pub fn block(
    tape: &mut Tape,
    bound: &Bound,
    prefix: &str,
    x: Var,
    heads: usize,
    mask: Option<Rc<AttnMask>>,
    lora: Option<&LoraHook>,
) -> Var {
    let h = layer_norm(tape, bound, &format!("{prefix}.ln1"), x);
    let (q, v) = match lora {
        Some(l) => (
            linear_lora(tape, bound, &format!("{prefix}.wq"), &format!("{}.wq", l.prefix), l.scale, h),
            linear_lora(tape, bound, &format!("{prefix}.wv"), &format!("{}.wv", l.prefix), l.scale, h),
        ),
        None => (
            linear(tape, bound, &format!("{prefix}.wq"), h),
            linear(tape, bound, &format!("{prefix}.wv"), h),
        ),
    };
    let k = linear(tape, bound, &format!("{prefix}.wk"), h);
    let attn = attention(tape, q, k, v, heads, mask);
    let proj = linear(tape, bound, &format!("{prefix}.wo"), attn);
    let x = tape.add(x, proj);

    let h2 = layer_norm(tape, bound, &format!("{prefix}.ln2"), x);
    let m1 = linear(tape, bound, &format!("{prefix}.mlp1"), h2);
    let act = tape.gelu(m1);
    let m2 = linear(tape, bound, &format!("{prefix}.mlp2"), act);
    tape.add(x, m2)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from;

    #[test]
    fn bound_grads_cover_all_params() {
        let mut params = Params::new();
        let mut rng = rng_from(0);
        init_linear(&mut params, "lin", 3, 2, 0.1, &mut rng);
        let mut tape = Tape::new();
        let bound = Bound::bind(&mut tape, &params);
        let x = tape.leaf(Tensor::from_rows(&[vec![1.0, 2.0, 3.0]]));
        let y = linear(&mut tape, &bound, "lin", x);
        let loss = tape.sum_all(y);
        let store = tape.backward(loss);
        let grads = bound.grads(&store, &params);
        assert_eq!(grads.len(), 2);
        assert!(grads["lin.w"].data().iter().any(|&v| v != 0.0));
    }

    #[test]
    fn attention_single_key_returns_value() {
        let mut tape = Tape::new();
        let q = tape.leaf(Tensor::from_rows(&[vec![0.5, -0.5]]));
        let k = tape.leaf(Tensor::from_rows(&[vec![1.0, 2.0]]));
        let v = tape.leaf(Tensor::from_rows(&[vec![3.0, 4.0]]));
        let out = attention(&mut tape, q, k, v, 1, None);
        assert_eq!(tape.value(out).data(), &[3.0, 4.0]);
    }

    #[test]
    fn lora_zero_b_matches_base() {
        let mut params = Params::new();
        let mut rng = rng_from(1);
        init_linear(&mut params, "lin", 4, 4, 0.1, &mut rng);
        params.insert("lora.lin.a", Tensor::randn(&[2, 4], 0.1, &mut rng));
        params.insert("lora.lin.b", Tensor::zeros(&[4, 2]));
        let x_t = Tensor::randn(&[3, 4], 1.0, &mut rng);

        let mut tape = Tape::new();
        let bound = Bound::bind(&mut tape, &params);
        let x = tape.leaf(x_t.clone());
        let base = linear(&mut tape, &bound, "lin", x);
        let with = linear_lora(&mut tape, &bound, "lin", "lora.lin", 2.0, x);
        assert_eq!(tape.value(base).data(), tape.value(with).data());
    }
}
