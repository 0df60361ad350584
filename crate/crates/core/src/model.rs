//! The assembled recognizer: frozen backbone, ladder adapters, decoder.

use std::collections::BTreeSet;

use crate::autodiff::Var;
use crate::config::{DecoderConfig, EncoderConfig};
use crate::decoder::{decode_infer, init_decoder, sequence_loss, VisibilityMask};
use crate::encoder::{encode_graph, init_adapters, init_backbone, RoutingRecord};
use crate::error::Result;
use crate::params::{
    init_linear, Fwd, GradMode, ParamStore, ADAPTER_PREFIX, BACKBONE_PREFIX, DECODER_PREFIX,
    PRETRAIN_HEAD_PREFIX,
};
use crate::raster::GrayImage;
use crate::seeds;
use crate::tensor::Tensor;

pub type NamedGrads = Vec<(String, Vec<f64>)>;

#[derive(Clone, Debug, PartialEq)]
pub struct Recognizer {
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
    pub params: ParamStore,
}

/// Loss, trainable-parameter gradients and routing for one sample.
#[derive(Debug)]
pub struct SampleGrad {
    pub loss: f64,
    pub grads: NamedGrads,
    pub routing: Vec<RoutingRecord>,
}

impl Recognizer {
    pub fn new(encoder: EncoderConfig, decoder: DecoderConfig, seed: u64) -> Result<Self> {
        encoder.validate()?;
        decoder.validate(encoder.embed_dim)?;
        let mut params = ParamStore::new();
        init_backbone(&mut params, &encoder, &mut seeds::stream(seed, "init.backbone"));
        init_adapters(&mut params, &encoder, &mut seeds::stream(seed, "init.adapters"));
        init_decoder(
            &mut params,
            &decoder,
            encoder.embed_dim,
            &mut seeds::stream(seed, "init.decoder"),
        );
        Ok(Recognizer {
            encoder,
            decoder,
            params,
        })
    }

    /// Adds the throwaway `classes`-way classifier used while pretraining the
    /// backbone.
    pub fn attach_pretrain_head(&mut self, seed: u64, classes: usize) {
        init_linear(
            &mut self.params,
            &mut seeds::stream(seed, "init.pretrain_head"),
            "pretrain_head",
            self.encoder.embed_dim,
            classes,
        );
    }

    pub fn detach_pretrain_head(&mut self) {
        self.params.remove_prefix(PRETRAIN_HEAD_PREFIX);
    }

    /// Replaces the backbone tensors with those from `other`.
    pub fn load_backbone(&mut self, other: &ParamStore) {
        self.params.copy_prefix_from(other, BACKBONE_PREFIX);
    }

    /// Encoder features and (optionally) routing records for one image.
    pub fn encode(&self, image: &GrayImage, record_routing: bool) -> Result<(Tensor, Vec<RoutingRecord>)> {
        let mut f = Fwd::new(&self.params, GradMode::Inference);
        let (x, routing) = encode_graph(&mut f, &self.encoder, image)?;
        let routing = if record_routing { routing } else { Vec::new() };
        Ok((f.g.value(x).clone(), routing))
    }

    pub fn recognize(&self, image: &GrayImage, max_len: usize) -> Result<Vec<usize>> {
        let mut f = Fwd::new(&self.params, GradMode::Inference);
        let (memory, _) = encode_graph(&mut f, &self.encoder, image)?;
        decode_infer(&mut f, &self.decoder, memory, max_len)
    }

    /// First decoded token of a single-character crop, if any.
    pub fn predict_char(&self, image: &GrayImage) -> Result<Option<usize>> {
        Ok(self.recognize(image, self.decoder.max_label_len)?.first().copied())
    }

    fn build_loss<'a>(
        &'a self,
        mode: GradMode,
        image: &GrayImage,
        target: &[usize],
        masks: &[VisibilityMask],
    ) -> Result<(Fwd<'a>, Var, Vec<RoutingRecord>)> {
        let mut f = Fwd::new(&self.params, mode);
        let (memory, routing) = encode_graph(&mut f, &self.encoder, image)?;
        let loss = sequence_loss(&mut f, &self.decoder, memory, target, masks)?;
        Ok((f, loss, routing))
    }

    pub fn sample_loss(&self, image: &GrayImage, target: &[usize], masks: &[VisibilityMask]) -> Result<f64> {
        let (f, loss, _) = self.build_loss(GradMode::Inference, image, target, masks)?;
        Ok(f.g.value(loss).data()[0])
    }

    pub fn sample_grad(
        &self,
        mode: GradMode,
        image: &GrayImage,
        target: &[usize],
        masks: &[VisibilityMask],
    ) -> Result<SampleGrad> {
        let (f, loss, routing) = self.build_loss(mode, image, target, masks)?;
        let value = f.g.value(loss).data()[0];
        let grads = f.grads_of(loss)?;
        Ok(SampleGrad {
            loss: value,
            grads,
            routing,
        })
    }

    /// Backbone classification loss on the class token (adapters bypassed).
    pub fn pretrain_grad(&self, image: &GrayImage, category: usize) -> Result<SampleGrad> {
        let mut f = Fwd::new(&self.params, GradMode::Backbone);
        let cfg = self.encoder.without_adapters();
        let (x, _) = encode_graph(&mut f, &cfg, image)?;
        let cls = f.g.slice_rows(x, 0, 1)?;
        let logits = f.linear(cls, "pretrain_head")?;
        let loss = f.g.cross_entropy(logits, &[Some(category)])?;
        let value = f.g.value(loss).data()[0];
        let grads = f.grads_of(loss)?;
        Ok(SampleGrad {
            loss: value,
            grads,
            routing: Vec::new(),
        })
    }

    pub fn pretrain_predict(&self, image: &GrayImage) -> Result<usize> {
        let mut f = Fwd::new(&self.params, GradMode::Inference);
        let cfg = self.encoder.without_adapters();
        let (x, _) = encode_graph(&mut f, &cfg, image)?;
        let cls = f.g.slice_rows(x, 0, 1)?;
        let logits = f.linear(cls, "pretrain_head")?;
        let row = f.g.value(logits).data();
        Ok((0..row.len())
            .max_by(|&a, &b| row[a].total_cmp(&row[b]).then(b.cmp(&a)))
            .unwrap_or(0))
    }

    /// Splits parameters into (frozen backbone, trainable adapters + decoder).
    pub fn freeze_partition(&self) -> (BTreeSet<String>, BTreeSet<String>) {
        let mut frozen = BTreeSet::new();
        let mut trainable = BTreeSet::new();
        for name in self.params.names() {
            if name.starts_with(ADAPTER_PREFIX) || name.starts_with(DECODER_PREFIX) {
                trainable.insert(name.clone());
            } else {
                frozen.insert(name.clone());
            }
        }
        (frozen, trainable)
    }
}
