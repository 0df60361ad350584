//! Single-layer attention decoder trained with permutation language modeling.
//!
//! Position queries attend to a content stream `[BOS, t₀, …, t_{L-1}]` under a
//! visibility mask, then to the encoder features, then through a feed-forward
//! layer and a vocabulary projection. Row `i` of the logits predicts target
//! position `i`; row `L` predicts the end marker.

use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::config::DecoderConfig;
use crate::error::{Error, Result};
use crate::nn::{attention, init_attention, init_mlp, mlp};
use crate::params::{init_layer_norm, init_linear, init_uniform, Fwd, ParamStore};

/// Which target positions each position may read, derived from a factorization order.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct VisibilityMask {
    size: usize,
    order: Vec<usize>,
    admit: Vec<bool>,
}

impl VisibilityMask {
    /// Builds the mask for `order`, a permutation of `0..order.len()`.
    pub fn from_order(order: Vec<usize>) -> Result<Self> {
        let size = order.len();
        if size == 0 {
            return Err(Error::Parameter("mask length must be >= 1".into()));
        }
        let mut rank = vec![usize::MAX; size];
        for (r, &p) in order.iter().enumerate() {
            if p >= size || rank[p] != usize::MAX {
                return Err(Error::Parameter(format!("{order:?} is not a permutation")));
            }
            rank[p] = r;
        }
        let mut admit = vec![false; size * size];
        for i in 0..size {
            for j in 0..size {
                admit[i * size + j] = rank[j] < rank[i];
            }
        }
        Ok(VisibilityMask { size, order, admit })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn order(&self) -> &[usize] {
        &self.order
    }

    pub fn admits(&self, i: usize, j: usize) -> bool {
        self.admit[i * self.size + j]
    }

    pub fn admitted(&self, i: usize) -> Vec<usize> {
        (0..self.size).filter(|&j| self.admits(i, j)).collect()
    }
}

fn factorial_at_least(n: usize, bound: usize) -> bool {
    let mut acc = 1usize;
    for k in 2..=n {
        acc = acc.saturating_mul(k);
        if acc >= bound {
            return true;
        }
    }
    acc >= bound
}

/// `K` visibility masks: canonical order, its reverse, then random orders.
///
/// Random orders are distinct from each other and from the first two when
/// enough permutations exist; otherwise they are drawn with replacement.
pub fn make_permutation_masks_with(
    length: usize,
    k: usize,
    rng: &mut impl Rng,
) -> Result<Vec<VisibilityMask>> {
    if length == 0 {
        return Err(Error::Parameter("mask length must be >= 1".into()));
    }
    if k == 0 {
        return Err(Error::Parameter("number of permutations must be >= 1".into()));
    }
    let canonical: Vec<usize> = (0..length).collect();
    let mut orders = vec![canonical.clone()];
    if k >= 2 {
        orders.push(canonical.iter().rev().copied().collect());
    }
    let extra = k.saturating_sub(2);
    if extra > 0 {
        let mut seen: HashSet<Vec<usize>> = orders.iter().cloned().collect();
        let distinct_available = factorial_at_least(length, seen.len() + extra);
        let mut perm = canonical;
        while orders.len() < k {
            perm.shuffle(rng);
            if !distinct_available || seen.insert(perm.clone()) {
                orders.push(perm.clone());
            }
        }
    }
    orders.into_iter().map(VisibilityMask::from_order).collect()
}

pub fn make_permutation_masks(length: usize, k: usize, seed: u64) -> Result<Vec<VisibilityMask>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    make_permutation_masks_with(length, k, &mut rng)
}

/// Left-to-right mask: position `i` reads exactly `0..i`.
pub fn make_sequential_mask(length: usize) -> Result<VisibilityMask> {
    VisibilityMask::from_order((0..length).collect())
}

pub fn init_decoder(store: &mut ParamStore, cfg: &DecoderConfig, dim: usize, rng: &mut impl Rng) {
    let v = cfg.vocab_size();
    let l = cfg.max_label_len;
    init_uniform(store, rng, "dec.tok_emb", &[v, dim], 0.5);
    init_uniform(store, rng, "dec.pos_q", &[l + 1, dim], 0.5);
    init_uniform(store, rng, "dec.content_pos", &[l, dim], 0.5);
    init_layer_norm(store, "dec.ln_q", dim);
    init_layer_norm(store, "dec.ln_c", dim);
    init_attention(store, rng, "dec.self", dim);
    init_layer_norm(store, "dec.ln1", dim);
    init_attention(store, rng, "dec.cross", dim);
    init_layer_norm(store, "dec.ln2", dim);
    init_mlp(store, rng, "dec.mlp", dim, dim * cfg.mlp_ratio);
    init_layer_norm(store, "dec.ln_out", dim);
    init_linear(store, rng, "dec.head", dim, v);
}

/// Logits `[(L+1) × vocab]` for `target` under `mask` (mask size must be `L+1`).
pub fn decode_train(
    f: &mut Fwd,
    cfg: &DecoderConfig,
    memory: Var,
    target: &[usize],
    mask: &VisibilityMask,
) -> Result<Var> {
    let len = target.len();
    if len > cfg.max_label_len {
        return Err(Error::Parameter(format!(
            "target length {len} exceeds max_label_len {}",
            cfg.max_label_len
        )));
    }
    if mask.size() != len + 1 {
        return Err(Error::Dimension(format!(
            "mask size {} for a target of length {len}",
            mask.size()
        )));
    }
    if let Some(&bad) = target.iter().find(|&&t| t >= cfg.vocab_size()) {
        return Err(Error::Parameter(format!("token {bad} outside vocabulary")));
    }

    let tok_emb = f.p("dec.tok_emb")?;
    let pos_q = f.p("dec.pos_q")?;
    let queries = f.g.slice_rows(pos_q, 0, len + 1)?;

    let mut ids = Vec::with_capacity(len + 1);
    ids.push(cfg.bos());
    ids.extend_from_slice(target);
    let content = f.g.gather_rows(tok_emb, &ids)?;
    let content = if len > 0 {
        let bos = f.g.slice_rows(content, 0, 1)?;
        let toks = f.g.slice_rows(content, 1, len)?;
        let cpos = f.p("dec.content_pos")?;
        let cpos = f.g.slice_rows(cpos, 0, len)?;
        let toks = f.g.add(toks, cpos)?;
        f.g.concat_rows(&[bos, toks])?
    } else {
        content
    };

    // Column 0 is BOS and always visible; column j+1 holds target token j.
    let cols = len + 1;
    let mut vis = vec![false; (len + 1) * cols];
    for i in 0..=len {
        vis[i * cols] = true;
        for j in 0..len {
            vis[i * cols + j + 1] = mask.admits(i, j);
        }
    }

    let q = f.layer_norm(queries, "dec.ln_q")?;
    let c = f.layer_norm(content, "dec.ln_c")?;
    let sa = attention(f, "dec.self", q, c, cfg.heads, Some(&vis))?;
    let h = f.g.add(queries, sa)?;
    let hn = f.layer_norm(h, "dec.ln1")?;
    let ca = attention(f, "dec.cross", hn, memory, cfg.heads, None)?;
    let h = f.g.add(h, ca)?;
    let hn = f.layer_norm(h, "dec.ln2")?;
    let ff = mlp(f, "dec.mlp", hn)?;
    let h = f.g.add(h, ff)?;
    let h = f.layer_norm(h, "dec.ln_out")?;
    f.linear(h, "dec.head")
}

/// Cross-entropy targets for `target` followed by the end marker; padding is unsupervised.
pub fn loss_targets(cfg: &DecoderConfig, target: &[usize]) -> Vec<Option<usize>> {
    target
        .iter()
        .map(|&t| (t != cfg.pad()).then_some(t))
        .chain(std::iter::once(Some(cfg.eos())))
        .collect()
}

/// Mean cross-entropy over the given masks, sharing one encoder pass.
pub fn sequence_loss(
    f: &mut Fwd,
    cfg: &DecoderConfig,
    memory: Var,
    target: &[usize],
    masks: &[VisibilityMask],
) -> Result<Var> {
    let targets = loss_targets(cfg, target);
    let mut total: Option<Var> = None;
    for mask in masks {
        let logits = decode_train(f, cfg, memory, target, mask)?;
        let ce = f.g.cross_entropy(logits, &targets)?;
        total = Some(match total {
            Some(t) => f.g.add(t, ce)?,
            None => ce,
        });
    }
    let total = total.ok_or_else(|| Error::Parameter("no masks supplied".into()))?;
    Ok(if masks.len() == 1 {
        total
    } else {
        f.g.scale(total, 1.0 / masks.len() as f64)
    })
}

/// Greedy left-to-right decoding. Also returns the logits row used at each step.
pub fn decode_infer_steps(
    f: &mut Fwd,
    cfg: &DecoderConfig,
    memory: Var,
    max_len: usize,
) -> Result<(Vec<usize>, Vec<Vec<f64>>)> {
    let max_len = max_len.max(1).min(cfg.max_label_len);
    let mut out = Vec::new();
    let mut rows = Vec::new();
    for step in 0..max_len {
        let mask = make_sequential_mask(step + 1)?;
        let logits = decode_train(f, cfg, memory, &out, &mask)?;
        let row = f.g.value(logits).row(step).to_vec();
        // Only categories and the end marker are valid outputs.
        let best = (0..=cfg.eos())
            .max_by(|&a, &b| row[a].total_cmp(&row[b]).then(b.cmp(&a)))
            .expect("non-empty vocabulary");
        rows.push(row);
        if best == cfg.eos() {
            break;
        }
        out.push(best);
    }
    Ok((out, rows))
}

pub fn decode_infer(f: &mut Fwd, cfg: &DecoderConfig, memory: Var, max_len: usize) -> Result<Vec<usize>> {
    decode_infer_steps(f, cfg, memory, max_len).map(|(seq, _)| seq)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn predecessors(order: &[usize], i: usize) -> Vec<usize> {
        let pos = order.iter().position(|&p| p == i).unwrap();
        let mut v: Vec<usize> = order[..pos].to_vec();
        v.sort();
        v
    }

    #[test]
    fn canonical_is_causal() {
        let masks = make_permutation_masks(3, 1, 0).unwrap();
        let m = &masks[0];
        for i in 0..3 {
            for j in 0..3 {
                assert_eq!(m.admits(i, j), j < i);
            }
        }
        assert_eq!(m, &make_sequential_mask(3).unwrap());
    }

    #[test]
    fn length_one_admits_nothing() {
        let m = make_sequential_mask(1).unwrap();
        assert!(m.admitted(0).is_empty());
        assert!(make_permutation_masks(0, 3, 0).is_err());
        assert!(make_sequential_mask(0).is_err());
    }

    #[test]
    fn sequential_length_five() {
        let m = make_sequential_mask(5).unwrap();
        for i in 0..5 {
            assert_eq!(m.admitted(i), (0..i).collect::<Vec<_>>());
        }
    }

    #[test]
    fn random_masks_follow_predecessor_sets() {
        let masks = make_permutation_masks(4, 12, 99).unwrap();
        assert_eq!(masks.len(), 12);
        assert_eq!(masks[1].order(), &[3, 2, 1, 0]);
        let distinct: HashSet<_> = masks.iter().map(|m| m.order().to_vec()).collect();
        assert_eq!(distinct.len(), 12);
        for m in &masks {
            for i in 0..4 {
                assert_eq!(m.admitted(i), predecessors(m.order(), i));
                assert!(!m.admits(i, i));
            }
        }
    }

    #[test]
    fn small_lengths_sample_with_replacement() {
        let masks = make_permutation_masks(2, 12, 1).unwrap();
        assert_eq!(masks.len(), 12);
        assert!(masks.iter().all(|m| m.size() == 2));
    }
}
