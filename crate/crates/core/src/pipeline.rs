//! End-to-end experiment: corpus, backbone pretraining, adapter training and
//! evaluation, all derived from one seed.

use log::info;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::config::{DecoderConfig, EncoderConfig, TrainConfig};
use crate::corpus::{build_corpus, build_pretrain_pool, Corpus, CorpusConfig};
use crate::error::{Error, Result};
use crate::eval::{evaluate_chars, evaluate_pages, PageEval};
use crate::metrics::EvalReport;
use crate::model::Recognizer;
use crate::parallel::Executor;
use crate::seeds::derive_seed;
use crate::syndata::Split;
use crate::training::{
    ordered_loss, pretrain_accuracy, pretrain_backbone, run_schedule, start_training, EpochStats,
    LabeledImage, ScheduleOptions,
};
use crate::transcribe::DEFAULT_FACTOR;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    /// Column-grouping threshold factor.
    pub factor: f64,
    pub corpus: CorpusConfig,
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
    pub train: TrainConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let corpus = CorpusConfig::default();
        ExperimentConfig {
            seed: 0,
            factor: DEFAULT_FACTOR,
            encoder: EncoderConfig::desk(),
            decoder: DecoderConfig {
                num_categories: corpus.num_categories,
                ..DecoderConfig::default()
            },
            train: TrainConfig::default(),
            corpus,
        }
    }
}

impl ExperimentConfig {
    /// Copies the shared values (seed, category count, glyph size) into the
    /// component configs and validates everything.
    pub fn resolve(mut self) -> Result<Self> {
        self.train.seed = self.seed;
        self.decoder.num_categories = self.corpus.num_categories;
        self.encoder.image_size = self.corpus.glyph_size;
        if !(self.factor > 0.0 && self.factor.is_finite()) {
            return Err(Error::Parameter(format!("factor must be finite and > 0, got {}", self.factor)));
        }
        self.corpus.validate()?;
        self.encoder.validate()?;
        self.decoder.validate(self.encoder.embed_dim)?;
        self.train.validate()?;
        Ok(self)
    }

    pub fn corpus_seed(&self) -> u64 {
        derive_seed(self.seed, "corpus")
    }

    pub fn model_seed(&self) -> u64 {
        derive_seed(self.seed, "model")
    }
}

pub fn synthesize(cfg: &ExperimentConfig, exec: &Executor) -> Result<Corpus> {
    build_corpus(&cfg.corpus, cfg.corpus_seed(), exec)
}

#[derive(Clone, Debug)]
pub struct Pretrained {
    /// Pretrained backbone with freshly initialized adapters and decoder.
    pub model: Recognizer,
    pub log: Vec<EpochStats>,
    /// Pretraining-head accuracy on held-out pretraining samples.
    pub val_accuracy: f64,
}

/// Pretraining set and its held-out part: the auxiliary pool split 9:1, or
/// the training and validation crops when the pool is disabled.
pub fn pretrain_data(
    cfg: &ExperimentConfig,
    corpus: &Corpus,
    exec: &Executor,
) -> Result<(Vec<LabeledImage>, Vec<LabeledImage>)> {
    if cfg.corpus.pretrain_categories == 0 {
        return Ok((corpus.labeled_crops(Split::Train), corpus.labeled_crops(Split::Val)));
    }
    let pool = build_pretrain_pool(&cfg.corpus, derive_seed(cfg.seed, "pretrain"), exec)?;
    let per = cfg.corpus.pretrain_per_category;
    let held = per / 10;
    let (mut train, mut held_out) = (Vec::new(), Vec::new());
    for (i, s) in pool.into_iter().enumerate() {
        if i % per < held {
            held_out.push(s);
        } else {
            train.push(s);
        }
    }
    Ok((train, held_out))
}

/// Pretrains the backbone and drops the classifier.
pub fn pretrain(cfg: &ExperimentConfig, corpus: &Corpus, exec: &Executor) -> Result<Pretrained> {
    let model = Recognizer::new(cfg.encoder.clone(), cfg.decoder.clone(), cfg.model_seed())?;
    let (train, val) = pretrain_data(cfg, corpus, exec)?;
    let ckpt = pretrain_backbone(&model, &train, &cfg.train, exec)?;
    let val_accuracy = if val.is_empty() {
        0.0
    } else {
        pretrain_accuracy(&ckpt.model, &val, exec)?
    };
    info!("pretrained backbone: held-out accuracy {val_accuracy:.4}");
    let mut model = ckpt.model;
    model.detach_pretrain_head();
    Ok(Pretrained {
        model,
        log: ckpt.log,
        val_accuracy,
    })
}

/// Fresh recognizer for `cfg` carrying the backbone of `pretrained`.
pub fn with_backbone(cfg: &ExperimentConfig, pretrained: &Recognizer) -> Result<Recognizer> {
    if !cfg.encoder.same_backbone(&pretrained.encoder) {
        return Err(Error::Parameter(
            "encoder backbone dims differ from the pretrained checkpoint".into(),
        ));
    }
    let mut model = Recognizer::new(cfg.encoder.clone(), cfg.decoder.clone(), cfg.model_seed())?;
    model.load_backbone(&pretrained.params);
    Ok(model)
}

/// Runs the permuted then ordered schedule on the training crops.
pub fn train(
    cfg: &ExperimentConfig,
    model: Recognizer,
    corpus: &Corpus,
    exec: &Executor,
    opts: &ScheduleOptions,
) -> Result<Checkpoint> {
    let data = corpus.labeled_crops(Split::Train);
    run_schedule(start_training(model, cfg.train.clone())?, &data, exec, opts)
}

/// Ordered-mask loss on the validation crops.
pub fn validation_loss(model: &Recognizer, corpus: &Corpus, exec: &Executor) -> Result<f64> {
    ordered_loss(model, &corpus.labeled_crops(Split::Val), exec)
}

/// Character report on the test crops, with the page scores on the test
/// pages (ground-truth boxes) folded in.
pub fn evaluate(
    model: &Recognizer,
    corpus: &Corpus,
    factor: f64,
    exec: &Executor,
) -> Result<(EvalReport, PageEval)> {
    let (mut report, _) = evaluate_chars(model, corpus, Split::Test, exec)?;
    let pages = evaluate_pages(model, &corpus.pages_in(Split::Test), None, factor, exec)?;
    report.pages = Some(pages.scores);
    Ok((report, pages))
}
