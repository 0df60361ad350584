use laddermoe::config::{DecoderConfig, EncoderConfig, TrainConfig};
use laddermoe::corpus::{load_corpus, write_corpus, CorpusConfig};
use laddermoe::parallel::Executor;
use laddermoe::pipeline::{self, ExperimentConfig};
use laddermoe::syndata::Split;
use laddermoe::training::ScheduleOptions;
use laddermoe::Error;

fn small() -> ExperimentConfig {
    ExperimentConfig {
        seed: 21,
        corpus: CorpusConfig {
            num_categories: 6,
            total_crops: 180,
            min_count: 4,
            glyph_size: 8,
            num_pages: 30,
            min_chars_per_page: 2,
            max_chars_per_page: 5,
            max_columns: 2,
            jitter: 1,
            pretrain_categories: 5,
            pretrain_per_category: 10,
            ..CorpusConfig::default()
        },
        encoder: EncoderConfig {
            embed_dim: 8,
            depth: 2,
            heads: 2,
            adapter_layers: vec![0, 1],
            num_experts: 4,
            top_k: 2,
            expert_bottleneck: 3,
            ..EncoderConfig::desk()
        },
        decoder: DecoderConfig {
            heads: 2,
            num_permutations: 3,
            ..DecoderConfig::default()
        },
        train: TrainConfig {
            pretrain_epochs: 2,
            plm_epochs: 3,
            osf_epochs: 1,
            batch_size: 16,
            ..TrainConfig::default()
        },
        ..ExperimentConfig::default()
    }
    .resolve()
    .unwrap()
}

#[test]
fn resolve_ties_sub_configs_together() {
    let cfg = small();
    assert_eq!(cfg.train.seed, 21);
    assert_eq!(cfg.decoder.num_categories, 6);
    assert_eq!(cfg.encoder.image_size, 8);
    assert_ne!(cfg.corpus_seed(), cfg.model_seed());
}

#[test]
fn resolve_rejects_bad_values() {
    let mut cfg = small();
    cfg.factor = 0.0;
    assert!(matches!(cfg.resolve(), Err(Error::Parameter(_))));
    let mut cfg = small();
    cfg.encoder.top_k = 9;
    assert!(cfg.resolve().is_err());
}

#[test]
fn config_json_rejects_unknown_keys() {
    let json = serde_json::to_value(small()).unwrap();
    let back: ExperimentConfig = serde_json::from_value(json.clone()).unwrap();
    assert_eq!(serde_json::to_value(back).unwrap(), json);
    let mut bad = json;
    bad["encoder"]["experts"] = 3.into();
    assert!(serde_json::from_value::<ExperimentConfig>(bad).is_err());
}

#[test]
fn corpus_survives_disk_round_trip() {
    let exec = Executor::sequential();
    let corpus = pipeline::synthesize(&small(), &exec).unwrap();
    let dir = tempfile::tempdir().unwrap();
    write_corpus(&corpus, dir.path(), &exec).unwrap();
    assert_eq!(load_corpus(dir.path(), &exec).unwrap(), corpus);
}

#[test]
fn pretrain_pool_is_disjoint_from_corpus_labels() {
    let exec = Executor::sequential();
    let cfg = small();
    let corpus = pipeline::synthesize(&cfg, &exec).unwrap();
    let (train, held) = pipeline::pretrain_data(&cfg, &corpus, &exec).unwrap();
    assert_eq!(train.len() + held.len(), 50);
    assert_eq!(held.len(), 5);
    assert!(train.iter().chain(&held).all(|s| s.target[0] < 5));
    let test: Vec<_> = corpus.labeled_crops(Split::Test);
    assert!(train.iter().all(|p| test.iter().all(|t| t.image != p.image)));
}

#[test]
fn training_lowers_loss_and_evaluates() {
    let exec = Executor::sequential();
    let cfg = small();
    let corpus = pipeline::synthesize(&cfg, &exec).unwrap();
    let pre = pipeline::pretrain(&cfg, &corpus, &exec).unwrap();
    assert!(pre.model.params.names().all(|n| !n.starts_with("pretrain_head.")));
    let model = pipeline::with_backbone(&cfg, &pre.model).unwrap();
    let untrained = pipeline::validation_loss(&model, &corpus, &exec).unwrap();
    let ckpt = pipeline::train(&cfg, model, &corpus, &exec, &ScheduleOptions::default()).unwrap();
    assert_eq!(ckpt.log.len(), 4);
    assert!(pipeline::validation_loss(&ckpt.model, &corpus, &exec).unwrap() < untrained);
    let (report, pages) = pipeline::evaluate(&ckpt.model, &corpus, cfg.factor, &exec).unwrap();
    assert_eq!(report.pages.as_ref(), Some(&pages.scores));
    assert!(report.overall_acc.unwrap() >= 0.0);
}

#[test]
fn backbone_mismatch_is_an_error() {
    let exec = Executor::sequential();
    let cfg = small();
    let corpus = pipeline::synthesize(&cfg, &exec).unwrap();
    let pre = pipeline::pretrain(&cfg, &corpus, &exec).unwrap();
    let mut other = cfg.clone();
    other.encoder.embed_dim = 12;
    assert!(matches!(pipeline::with_backbone(&other, &pre.model), Err(Error::Parameter(_))));
    let mut fewer = cfg;
    fewer.encoder.num_experts = 0;
    assert!(pipeline::with_backbone(&fewer, &pre.model).is_ok());
}
