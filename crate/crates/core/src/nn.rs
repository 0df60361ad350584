//! Transformer building blocks shared by the encoder and decoder.

use rand::Rng;

use crate::autodiff::Var;
use crate::error::Result;
use crate::params::{init_layer_norm, init_linear, Fwd, ParamStore};

/// Multi-head attention from `q_in` rows onto `kv_in` rows. Keys carry no bias.
///
/// `mask`, when given, is row-major `[q_rows × kv_rows]`; `false` entries are
/// excluded from the softmax and contribute exactly nothing.
pub fn attention(
    f: &mut Fwd,
    prefix: &str,
    q_in: Var,
    kv_in: Var,
    heads: usize,
    mask: Option<&[bool]>,
) -> Result<Var> {
    let dim = f.g.value(q_in).dims2()?.1;
    let head_dim = dim / heads;
    let q = f.linear(q_in, &format!("{prefix}.q"))?;
    let kw = f.p(&format!("{prefix}.k.w"))?;
    let k = f.g.matmul(kv_in, kw)?;
    let v = f.linear(kv_in, &format!("{prefix}.v"))?;
    let scale = 1.0 / (head_dim as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = f.g.slice_cols(q, h * head_dim, head_dim)?;
        let kh = f.g.slice_cols(k, h * head_dim, head_dim)?;
        let vh = f.g.slice_cols(v, h * head_dim, head_dim)?;
        let kt = f.g.transpose(kh)?;
        let scores = f.g.matmul(qh, kt)?;
        let scores = f.g.scale(scores, scale);
        let probs = match mask {
            Some(m) => f.g.masked_softmax_rows(scores, m)?,
            None => f.g.softmax(scores, 1)?,
        };
        outs.push(f.g.matmul(probs, vh)?);
    }
    let joined = if outs.len() == 1 {
        outs[0]
    } else {
        f.g.concat_cols(&outs)?
    };
    f.linear(joined, &format!("{prefix}.o"))
}

pub fn init_attention(store: &mut ParamStore, rng: &mut impl Rng, prefix: &str, dim: usize) {
    for part in ["q", "k", "v", "o"] {
        init_linear(store, rng, &format!("{prefix}.{part}"), dim, dim);
    }
    store.remove(&format!("{prefix}.k.b"));
}

pub fn mlp(f: &mut Fwd, prefix: &str, x: Var) -> Result<Var> {
    let h = f.linear(x, &format!("{prefix}.fc1"))?;
    let h = f.g.gelu(h);
    f.linear(h, &format!("{prefix}.fc2"))
}

pub fn init_mlp(store: &mut ParamStore, rng: &mut impl Rng, prefix: &str, dim: usize, hidden: usize) {
    init_linear(store, rng, &format!("{prefix}.fc1"), dim, hidden);
    init_linear(store, rng, &format!("{prefix}.fc2"), hidden, dim);
}

/// Pre-norm self-attention block: `x + attn(ln1 x)`, then `+ mlp(ln2 x)`.
pub fn transformer_block(f: &mut Fwd, prefix: &str, x: Var, heads: usize) -> Result<Var> {
    let h = f.layer_norm(x, &format!("{prefix}.ln1"))?;
    let a = attention(f, &format!("{prefix}.attn"), h, h, heads, None)?;
    let x = f.g.add(x, a)?;
    let h = f.layer_norm(x, &format!("{prefix}.ln2"))?;
    let m = mlp(f, &format!("{prefix}.mlp"), h)?;
    f.g.add(x, m)
}

pub fn init_transformer_block(
    store: &mut ParamStore,
    rng: &mut impl Rng,
    prefix: &str,
    dim: usize,
    mlp_ratio: usize,
) {
    init_layer_norm(store, &format!("{prefix}.ln1"), dim);
    init_attention(store, rng, &format!("{prefix}.attn"), dim);
    init_layer_norm(store, &format!("{prefix}.ln2"), dim);
    init_mlp(store, rng, &format!("{prefix}.mlp"), dim, dim * mlp_ratio);
}
