//! Model and schedule configuration with range validation.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

fn param_err(field: &str, allowed: &str, got: impl std::fmt::Display) -> Error {
    Error::Parameter(format!("{field} must be {allowed}, got {got}"))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
    /// Hidden width of each block's MLP as a multiple of `embed_dim`.
    pub mlp_ratio: usize,
    pub adapter_layers: Vec<usize>,
    pub num_experts: usize,
    pub top_k: usize,
    pub expert_bottleneck: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            image_size: 32,
            patch_size: 4,
            embed_dim: 64,
            depth: 12,
            heads: 4,
            mlp_ratio: 4,
            adapter_layers: vec![0, 4, 8, 11],
            num_experts: 36,
            top_k: 5,
            expert_bottleneck: 16,
        }
    }
}

impl EncoderConfig {
    /// Small single-core preset used by the synthetic benchmark.
    pub fn desk() -> Self {
        EncoderConfig {
            image_size: 16,
            patch_size: 4,
            embed_dim: 32,
            depth: 6,
            heads: 4,
            mlp_ratio: 2,
            adapter_layers: vec![0, 2, 4, 5],
            num_experts: 36,
            top_k: 5,
            expert_bottleneck: 8,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || self.image_size == 0 || !self.image_size.is_multiple_of(self.patch_size) {
            return Err(param_err(
                "image_size",
                "a positive multiple of patch_size",
                self.image_size,
            ));
        }
        if self.heads == 0 || self.embed_dim == 0 || !self.embed_dim.is_multiple_of(self.heads) {
            return Err(param_err(
                "embed_dim",
                "a positive multiple of heads",
                self.embed_dim,
            ));
        }
        if self.mlp_ratio == 0 {
            return Err(param_err("mlp_ratio", ">= 1", self.mlp_ratio));
        }
        if let Some(&l) = self.adapter_layers.iter().find(|&&l| l >= self.depth) {
            return Err(param_err(
                "adapter_layers",
                &format!("within [0, {})", self.depth),
                l,
            ));
        }
        let mut sorted = self.adapter_layers.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != self.adapter_layers.len() {
            return Err(param_err("adapter_layers", "distinct", format!("{:?}", self.adapter_layers)));
        }
        // num_experts == 0 disables the adapters entirely.
        if self.adapters_enabled() {
            if self.top_k == 0 || self.top_k > self.num_experts {
                return Err(param_err(
                    "top_k",
                    &format!("in [1, {}]", self.num_experts),
                    self.top_k,
                ));
            }
            if self.expert_bottleneck == 0 {
                return Err(param_err("expert_bottleneck", ">= 1", 0));
            }
        }
        Ok(())
    }

    pub fn num_patches(&self) -> usize {
        let per_side = self.image_size / self.patch_size;
        per_side * per_side
    }

    pub fn num_tokens(&self) -> usize {
        1 + self.num_patches()
    }

    /// Adapters enabled only when layers are listed and the pool is non-empty.
    pub fn adapters_enabled(&self) -> bool {
        !self.adapter_layers.is_empty() && self.num_experts > 0
    }

    /// Whether backbone weights of `other` fit this config.
    pub fn same_backbone(&self, other: &EncoderConfig) -> bool {
        (self.image_size, self.patch_size, self.embed_dim, self.depth, self.heads, self.mlp_ratio)
            == (other.image_size, other.patch_size, other.embed_dim, other.depth, other.heads, other.mlp_ratio)
    }

    /// Same backbone with the ladder adapters removed.
    pub fn without_adapters(&self) -> Self {
        EncoderConfig {
            adapter_layers: Vec::new(),
            ..self.clone()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecoderConfig {
    pub num_permutations: usize,
    pub max_label_len: usize,
    /// Recognizable categories; specials are appended after them.
    pub num_categories: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        DecoderConfig {
            num_permutations: 12,
            max_label_len: 4,
            num_categories: 60,
            heads: 4,
            mlp_ratio: 2,
        }
    }
}

impl DecoderConfig {
    pub fn eos(&self) -> usize {
        self.num_categories
    }

    pub fn bos(&self) -> usize {
        self.num_categories + 1
    }

    pub fn pad(&self) -> usize {
        self.num_categories + 2
    }

    pub fn vocab_size(&self) -> usize {
        self.num_categories + 3
    }

    pub fn validate(&self, embed_dim: usize) -> Result<()> {
        if self.num_permutations == 0 {
            return Err(param_err("num_permutations", ">= 1", 0));
        }
        if self.max_label_len == 0 {
            return Err(param_err("max_label_len", ">= 1", 0));
        }
        if self.vocab_size() < 4 {
            return Err(param_err("vocab_size", ">= 4", self.vocab_size()));
        }
        if self.heads == 0 || !embed_dim.is_multiple_of(self.heads) {
            return Err(param_err(
                "decoder heads",
                &format!("a divisor of embed_dim {embed_dim}"),
                self.heads,
            ));
        }
        if self.mlp_ratio == 0 {
            return Err(param_err("decoder mlp_ratio", ">= 1", 0));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub plm_epochs: usize,
    pub osf_epochs: usize,
    pub pretrain_epochs: usize,
    pub learning_rate: f64,
    pub pretrain_learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 32,
            plm_epochs: 8,
            osf_epochs: 2,
            pretrain_epochs: 12,
            learning_rate: 2e-3,
            pretrain_learning_rate: 2e-3,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Schedule lengths used for the full-scale runs (35 permuted + 5 ordered).
    pub fn full_schedule() -> Self {
        TrainConfig {
            plm_epochs: 35,
            osf_epochs: 5,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(param_err("batch_size", ">= 1", 0));
        }
        for (name, lr) in [
            ("learning_rate", self.learning_rate),
            ("pretrain_learning_rate", self.pretrain_learning_rate),
        ] {
            if !(lr > 0.0 && lr.is_finite()) {
                return Err(param_err(name, "finite and > 0", lr));
            }
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(param_err(name, "in [0, 1)", b));
            }
        }
        if !(self.adam_eps > 0.0) {
            return Err(param_err("adam_eps", "> 0", self.adam_eps));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        EncoderConfig::default().validate().unwrap();
        EncoderConfig::desk().validate().unwrap();
        DecoderConfig::default().validate(64).unwrap();
        TrainConfig::default().validate().unwrap();
        TrainConfig::full_schedule().validate().unwrap();
        assert_eq!(TrainConfig::full_schedule().plm_epochs, 35);
        assert_eq!(TrainConfig::full_schedule().osf_epochs, 5);
    }

    #[test]
    fn rejects_bad_ranges() {
        let mut c = EncoderConfig::default();
        c.top_k = 0;
        assert!(c.validate().is_err());
        c.top_k = 37;
        assert!(c.validate().is_err());
        let mut c = EncoderConfig::default();
        c.adapter_layers = vec![12];
        assert!(c.validate().is_err());
        let mut c = EncoderConfig::default();
        c.image_size = 30;
        assert!(c.validate().is_err());
        let d = DecoderConfig {
            num_permutations: 0,
            ..DecoderConfig::default()
        };
        assert!(d.validate(64).is_err());
    }

    #[test]
    fn token_counts() {
        assert_eq!(EncoderConfig::default().num_tokens(), 65);
        let c = EncoderConfig {
            image_size: 8,
            ..EncoderConfig::default()
        };
        assert_eq!(c.num_tokens(), 5);
    }
}
