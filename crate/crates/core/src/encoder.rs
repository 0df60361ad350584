//! Patch-embedding transformer encoder with ladder-side mixture-of-experts
//! adapters.
//!
//! After each configured backbone layer, an adapter reads that layer's output
//! tokens, a router picks the top-k experts from the adapter's pool using the
//! class token and the mean of the patch tokens, and the weighted expert sum is
//! added back into the stream scaled by `sigmoid(gate)`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::config::EncoderConfig;
use crate::error::{Error, Result};
use crate::nn::{init_transformer_block, transformer_block};
use crate::params::{init_layer_norm, init_linear, init_uniform, init_zero_linear, Fwd, ParamStore};
use crate::raster::GrayImage;
use crate::tensor::{self, sigmoid, Tensor};

/// Experts selected by one adapter's router for one sample.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoutingRecord {
    pub adapter_index: usize,
    pub selected: Vec<usize>,
    pub weights: Vec<f64>,
}

/// Router projection for one adapter: `[2·embed_dim → num_experts]`.
#[derive(Clone, Debug, PartialEq)]
pub struct RouterState {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl RouterState {
    pub fn num_experts(&self) -> usize {
        self.bias.len()
    }

    pub fn scores(&self, cls_token: &[f64], mean_token: &[f64]) -> Result<Vec<f64>> {
        let signal: Vec<f64> = cls_token.iter().chain(mean_token).copied().collect();
        let signal = Tensor::matrix(1, signal.len(), signal)?;
        let s = tensor::matmul(&signal, &self.weight)?;
        Ok(s.data().iter().zip(self.bias.data()).map(|(a, b)| a + b).collect())
    }
}

/// One expert: `up(gelu(down(x)))` applied token-wise.
#[derive(Clone, Debug, PartialEq)]
pub struct Expert {
    pub down_w: Tensor,
    pub down_b: Tensor,
    pub up_w: Tensor,
    pub up_b: Tensor,
}

/// Indices of the `k` largest scores, highest first; ties go to the lower index.
pub fn top_k_indices(scores: &[f64], k: usize) -> Result<Vec<usize>> {
    if k == 0 || k > scores.len() {
        return Err(Error::Parameter(format!(
            "top_k must be in [1, {}], got {k}",
            scores.len()
        )));
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx.truncate(k);
    Ok(idx)
}

/// Top-k selection with softmax over the selected raw scores only.
pub fn select_experts(scores: &[f64], k: usize) -> Result<(Vec<usize>, Vec<f64>)> {
    let selected = top_k_indices(scores, k)?;
    let chosen: Vec<f64> = selected.iter().map(|&i| scores[i]).collect();
    let weights = tensor::softmax(&Tensor::new(vec![1, k], chosen)?, 1)?.into_data();
    Ok((selected, weights))
}

pub fn route(
    cls_token: &[f64],
    mean_token: &[f64],
    router: &RouterState,
    k: usize,
) -> Result<RoutingRecord> {
    let scores = router.scores(cls_token, mean_token)?;
    let (selected, weights) = select_experts(&scores, k)?;
    Ok(RoutingRecord {
        adapter_index: 0,
        selected,
        weights,
    })
}

fn expert_on_graph(g: &mut Graph, x: Var, dw: Var, db: Var, uw: Var, ub: Var) -> Result<Var> {
    let h = g.matmul(x, dw)?;
    let h = g.add_row(h, db)?;
    let h = g.gelu(h);
    let y = g.matmul(h, uw)?;
    g.add_row(y, ub)
}

/// Weighted sum of the selected experts' token-wise outputs.
pub fn adapter_forward(tokens: &Tensor, experts: &[Expert], rec: &RoutingRecord) -> Result<Tensor> {
    let mut g = Graph::new();
    let x = g.constant(tokens.clone());
    let mut acc: Option<Var> = None;
    for (&e, &w) in rec.selected.iter().zip(&rec.weights) {
        let ex = experts.get(e).ok_or_else(|| {
            Error::Internal(format!("expert {e} outside pool of {}", experts.len()))
        })?;
        let dw = g.constant(ex.down_w.clone());
        let db = g.constant(ex.down_b.clone());
        let uw = g.constant(ex.up_w.clone());
        let ub = g.constant(ex.up_b.clone());
        let y = expert_on_graph(&mut g, x, dw, db, uw, ub)?;
        let y = g.scale(y, w);
        acc = Some(match acc {
            Some(a) => g.add(a, y)?,
            None => y,
        });
    }
    let out = acc.ok_or_else(|| Error::Internal("routing record selects no experts".into()))?;
    Ok(g.value(out).clone())
}

/// `backbone + sigmoid(gate) · side`.
pub fn gate_fuse(backbone: &Tensor, side: &Tensor, gate: f64) -> Result<Tensor> {
    if backbone.shape() != side.shape() {
        return Err(Error::Dimension(format!(
            "gate_fuse shapes {:?} and {:?} differ",
            backbone.shape(),
            side.shape()
        )));
    }
    let s = sigmoid(gate);
    let data = backbone
        .data()
        .iter()
        .zip(side.data())
        .map(|(b, x)| b + s * x)
        .collect();
    Tensor::new(backbone.shape().to_vec(), data)
}

pub fn init_backbone(store: &mut ParamStore, cfg: &EncoderConfig, rng: &mut impl Rng) {
    let d = cfg.embed_dim;
    let pp = cfg.patch_size * cfg.patch_size;
    init_linear(store, rng, "enc.patch", pp, d);
    init_uniform(store, rng, "enc.cls", &[1, d], 0.02);
    init_uniform(store, rng, "enc.pos", &[cfg.num_tokens(), d], 0.02);
    for l in 0..cfg.depth {
        init_transformer_block(store, rng, &format!("enc.block.{l}"), d, cfg.mlp_ratio);
    }
    init_layer_norm(store, "enc.ln_f", d);
}

/// Routers get small random weights; expert up-projections start at exactly zero.
pub fn init_adapters(store: &mut ParamStore, cfg: &EncoderConfig, rng: &mut impl Rng) {
    if !cfg.adapters_enabled() {
        return;
    }
    let d = cfg.embed_dim;
    for a in 0..cfg.adapter_layers.len() {
        init_uniform(store, rng, &format!("adapter.{a}.router.w"), &[2 * d, cfg.num_experts], 0.1);
        store.insert(format!("adapter.{a}.router.b"), Tensor::zeros(&[cfg.num_experts]));
        for e in 0..cfg.num_experts {
            init_linear(store, rng, &format!("adapter.{a}.expert.{e}.down"), d, cfg.expert_bottleneck);
            init_zero_linear(store, &format!("adapter.{a}.expert.{e}.up"), cfg.expert_bottleneck, d);
        }
        store.insert(format!("adapter.{a}.gate"), Tensor::scalar(0.0));
    }
}

/// Rearranges the image into `T × p²` patch rows, grid row-major.
pub fn patchify(image: &GrayImage, cfg: &EncoderConfig) -> Result<Tensor> {
    if image.width != cfg.image_size || image.height != cfg.image_size {
        return Err(Error::Dimension(format!(
            "encoder expects {0}×{0} images, got {1}×{2}",
            cfg.image_size, image.width, image.height
        )));
    }
    let p = cfg.patch_size;
    let per_side = cfg.image_size / p;
    let mut data = Vec::with_capacity(cfg.num_patches() * p * p);
    for py in 0..per_side {
        for px in 0..per_side {
            for y in 0..p {
                for x in 0..p {
                    data.push(image.get(px * p + x, py * p + y));
                }
            }
        }
    }
    Tensor::matrix(cfg.num_patches(), p * p, data)
}

/// Class token followed by projected patches, plus positional embeddings.
pub fn patch_embed(f: &mut Fwd, cfg: &EncoderConfig, image: &GrayImage) -> Result<Var> {
    let patches = patchify(image, cfg)?;
    let patches = f.g.constant(patches);
    let proj = f.linear(patches, "enc.patch")?;
    let cls = f.p("enc.cls")?;
    let tokens = f.g.concat_rows(&[cls, proj])?;
    let pos = f.p("enc.pos")?;
    f.g.add(tokens, pos)
}

/// Routes and applies adapter `a` to `x`, returning the gate-fused stream.
fn ladder_rung(f: &mut Fwd, cfg: &EncoderConfig, a: usize, x: Var) -> Result<(Var, RoutingRecord)> {
    let tokens = f.g.value(x).dims2()?.0;
    let cls = f.g.slice_rows(x, 0, 1)?;
    let patches = f.g.slice_rows(x, 1, tokens - 1)?;
    let mean = f.g.mean_rows(patches)?;
    let signal = f.g.concat_cols(&[cls, mean])?;
    let scores = f.linear(signal, &format!("adapter.{a}.router"))?;

    let (selected, _) = select_experts(f.g.value(scores).data(), cfg.top_k)?;
    let chosen = f.g.gather_cols(scores, &selected)?;
    let weights = f.g.softmax(chosen, 1)?;
    let weight_values = f.g.value(weights).data().to_vec();

    let mut side: Option<Var> = None;
    for (slot, &e) in selected.iter().enumerate() {
        let prefix = format!("adapter.{a}.expert.{e}");
        let dw = f.p(&format!("{prefix}.down.w"))?;
        let db = f.p(&format!("{prefix}.down.b"))?;
        let uw = f.p(&format!("{prefix}.up.w"))?;
        let ub = f.p(&format!("{prefix}.up.b"))?;
        let y = expert_on_graph(&mut f.g, x, dw, db, uw, ub)?;
        let w = f.g.slice_cols(weights, slot, 1)?;
        let y = f.g.scale_by(y, w)?;
        side = Some(match side {
            Some(s) => f.g.add(s, y)?,
            None => y,
        });
    }
    let side = side.expect("top_k >= 1");
    let gate = f.p(&format!("adapter.{a}.gate"))?;
    let coef = f.g.sigmoid(gate);
    let scaled = f.g.scale_by(side, coef)?;
    let fused = f.g.add(x, scaled)?;
    Ok((
        fused,
        RoutingRecord {
            adapter_index: a,
            selected,
            weights: weight_values,
        },
    ))
}

/// Full encoder pass on the graph; returns `(1+T)×embed_dim` features.
pub fn encode_graph(
    f: &mut Fwd,
    cfg: &EncoderConfig,
    image: &GrayImage,
) -> Result<(Var, Vec<RoutingRecord>)> {
    let mut x = patch_embed(f, cfg, image)?;
    let mut routing = Vec::new();
    for l in 0..cfg.depth {
        x = transformer_block(f, &format!("enc.block.{l}"), x, cfg.heads)?;
        if !cfg.adapters_enabled() {
            continue;
        }
        if let Some(a) = cfg.adapter_layers.iter().position(|&al| al == l) {
            let (fused, rec) = ladder_rung(f, cfg, a, x)?;
            x = fused;
            routing.push(rec);
        }
    }
    let x = f.layer_norm(x, "enc.ln_f")?;
    Ok((x, routing))
}

/// Reads adapter `a`'s router out of a parameter store.
pub fn router_state(store: &ParamStore, a: usize) -> Result<RouterState> {
    Ok(RouterState {
        weight: store.get(&format!("adapter.{a}.router.w"))?.clone(),
        bias: store.get(&format!("adapter.{a}.router.b"))?.clone(),
    })
}

pub fn expert_pool(store: &ParamStore, cfg: &EncoderConfig, a: usize) -> Result<Vec<Expert>> {
    (0..cfg.num_experts)
        .map(|e| {
            let p = format!("adapter.{a}.expert.{e}");
            Ok(Expert {
                down_w: store.get(&format!("{p}.down.w"))?.clone(),
                down_b: store.get(&format!("{p}.down.b"))?.clone(),
                up_w: store.get(&format!("{p}.up.w"))?.clone(),
                up_b: store.get(&format!("{p}.up.b"))?.clone(),
            })
        })
        .collect()
}
