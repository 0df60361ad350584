//! Backbone pretraining, then permuted-mask training and ordered-mask
//! fine-tuning of the adapters and decoder with the backbone frozen.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use log::info;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{save_checkpoint, Checkpoint};
use crate::config::TrainConfig;
use crate::decoder::{make_permutation_masks_with, make_sequential_mask, VisibilityMask};
use crate::error::{Error, Result};
use crate::model::{Recognizer, SampleGrad};
use crate::optim::{Adam, AdamConfig};
use crate::parallel::Executor;
use crate::params::GradMode;
use crate::raster::GrayImage;
use crate::seeds;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Init,
    Pretrain,
    Plm,
    Osf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub phase: Phase,
    /// 1-based within the phase.
    pub epoch: usize,
    pub mean_loss: f64,
    pub samples: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledImage {
    pub image: GrayImage,
    pub target: Vec<usize>,
}

fn adam_config(cfg: &TrainConfig, lr: f64) -> AdamConfig {
    AdamConfig {
        lr,
        beta1: cfg.beta1,
        beta2: cfg.beta2,
        eps: cfg.adam_eps,
    }
}

/// Starting state for adapter training on top of `model`.
pub fn start_training(model: Recognizer, train: TrainConfig) -> Result<Checkpoint> {
    train.validate()?;
    Ok(Checkpoint {
        optimizer: Adam::new(adam_config(&train, train.learning_rate)),
        rng: seeds::stream(train.seed, "train.order"),
        model,
        train,
        phase: Phase::Init,
        epoch: 0,
        log: Vec::new(),
    })
}

/// Sums per-sample gradients in sample order and divides by the batch size.
fn average_grads(results: Vec<SampleGrad>) -> (f64, Vec<(String, Vec<f64>)>) {
    let n = results.len() as f64;
    let mut loss = 0.0;
    let mut sum: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for r in results {
        loss += r.loss;
        for (name, g) in r.grads {
            match sum.get_mut(&name) {
                Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                None => {
                    sum.insert(name, g);
                }
            }
        }
    }
    let grads = sum
        .into_iter()
        .map(|(k, mut v)| {
            v.iter_mut().for_each(|x| *x /= n);
            (k, v)
        })
        .collect();
    (loss, grads)
}

/// Trains the backbone plus a throwaway classifier on the first label of
/// each sample, with adapters bypassed. The classifier covers every label
/// up to the largest one present. The result carries the head; callers
/// keep only the backbone.
pub fn pretrain_backbone(
    model: &Recognizer,
    data: &[LabeledImage],
    cfg: &TrainConfig,
    exec: &Executor,
) -> Result<Checkpoint> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Data("pretraining needs at least one sample".into()));
    }
    if let Some(i) = data.iter().position(|s| s.target.is_empty()) {
        return Err(Error::Data(format!("pretraining sample {i} has no label")));
    }
    let classes = data.iter().map(|s| s.target[0]).max().unwrap_or(0) + 1;
    let mut model = model.clone();
    model.attach_pretrain_head(cfg.seed, classes);
    let mut opt = Adam::new(adam_config(cfg, cfg.pretrain_learning_rate));
    let mut rng = seeds::stream(cfg.seed, "pretrain.order");
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut log = Vec::with_capacity(cfg.pretrain_epochs);
    for epoch in 1..=cfg.pretrain_epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let results = exec.map(batch, |&i| model.pretrain_grad(&data[i].image, data[i].target[0]));
            let results = results.into_iter().collect::<Result<Vec<_>>>()?;
            let (loss, grads) = average_grads(results);
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    last_checkpoint: None,
                });
            }
            total += loss;
            opt.step(&mut model.params, &grads)?;
        }
        let stats = EpochStats {
            phase: Phase::Pretrain,
            epoch,
            mean_loss: total / data.len() as f64,
            samples: data.len(),
        };
        info!("pretrain epoch {epoch}: loss {:.5}", stats.mean_loss);
        log.push(stats);
    }
    Ok(Checkpoint {
        model,
        train: cfg.clone(),
        phase: Phase::Pretrain,
        epoch: cfg.pretrain_epochs,
        rng,
        optimizer: opt,
        log,
    })
}

/// Fraction of samples whose first label the pretraining head predicts.
pub fn pretrain_accuracy(model: &Recognizer, data: &[LabeledImage], exec: &Executor) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::EmptyInput("no samples".into()));
    }
    let preds = exec.map(data, |s| model.pretrain_predict(&s.image));
    let mut hits = 0;
    for (p, s) in preds.into_iter().zip(data) {
        if p? == s.target[0] {
            hits += 1;
        }
    }
    Ok(hits as f64 / data.len() as f64)
}

fn masks_for(len: usize, phase: Phase, k: usize, ckpt: &mut Checkpoint) -> Result<Vec<VisibilityMask>> {
    match phase {
        Phase::Plm => make_permutation_masks_with(len + 1, k, &mut ckpt.rng),
        _ => Ok(vec![make_sequential_mask(len + 1)?]),
    }
}

/// One pass over `data` in a freshly shuffled order. Permuted-mask epochs
/// draw new masks for every batch (one set per label length); ordered epochs
/// use the left-to-right mask. Only adapter and decoder tensors change.
pub fn train_epoch(ckpt: &mut Checkpoint, data: &[LabeledImage], phase: Phase, exec: &Executor) -> Result<EpochStats> {
    if !matches!(phase, Phase::Plm | Phase::Osf) {
        return Err(Error::Parameter(format!("train_epoch runs plm or osf, not {phase:?}")));
    }
    if data.is_empty() {
        return Err(Error::Data("training needs at least one sample".into()));
    }
    let epoch = if ckpt.phase == phase { ckpt.epoch + 1 } else { 1 };
    let k = ckpt.model.decoder.num_permutations;
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(&mut ckpt.rng);
    let mut total = 0.0;
    for batch in order.chunks(ckpt.train.batch_size) {
        let mut masks: BTreeMap<usize, Vec<VisibilityMask>> = BTreeMap::new();
        for &i in batch {
            masks.entry(data[i].target.len()).or_default();
        }
        for (&len, m) in masks.iter_mut() {
            *m = masks_for(len, phase, k, ckpt)?;
        }
        let model = &ckpt.model;
        let results = exec.map(batch, |&i| {
            let s = &data[i];
            model.sample_grad(GradMode::Adapters, &s.image, &s.target, &masks[&s.target.len()])
        });
        let results = results.into_iter().collect::<Result<Vec<_>>>()?;
        let (loss, grads) = average_grads(results);
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss {
                epoch,
                last_checkpoint: None,
            });
        }
        total += loss;
        ckpt.optimizer.step(&mut ckpt.model.params, &grads)?;
    }
    ckpt.phase = phase;
    ckpt.epoch = epoch;
    let stats = EpochStats {
        phase,
        epoch,
        mean_loss: total / data.len() as f64,
        samples: data.len(),
    };
    info!("{phase:?} epoch {epoch}: loss {:.5}", stats.mean_loss);
    ckpt.log.push(stats.clone());
    Ok(stats)
}

/// Mean ordered-mask loss over `data`, without updating anything.
pub fn ordered_loss(model: &Recognizer, data: &[LabeledImage], exec: &Executor) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::EmptyInput("no samples".into()));
    }
    let losses = exec.map(data, |s| {
        let mask = make_sequential_mask(s.target.len() + 1)?;
        model.sample_loss(&s.image, &s.target, &[mask])
    });
    let mut total = 0.0;
    for l in losses {
        total += l?;
    }
    Ok(total / data.len() as f64)
}

#[derive(Clone, Debug, Default)]
pub struct ScheduleOptions {
    /// Where phase-boundary (`plm.ckpt`, `osf.ckpt`) and final checkpoints go.
    pub checkpoint_dir: Option<PathBuf>,
    /// Stop after this many epochs in this call; resume later from the
    /// returned state.
    pub max_epochs: Option<usize>,
    /// Also write `latest.ckpt` after every epoch.
    pub every_epoch: bool,
}

/// `(permuted epochs done, ordered epochs done)`.
pub fn progress(ckpt: &Checkpoint) -> (usize, usize) {
    match ckpt.phase {
        Phase::Init | Phase::Pretrain => (0, 0),
        Phase::Plm => (ckpt.epoch, 0),
        Phase::Osf => (ckpt.train.plm_epochs, ckpt.epoch),
    }
}

pub fn is_complete(ckpt: &Checkpoint) -> bool {
    progress(ckpt) == (ckpt.train.plm_epochs, ckpt.train.osf_epochs)
}

fn write(dir: &Option<PathBuf>, name: &str, ckpt: &Checkpoint, last: &mut Option<PathBuf>) -> Result<()> {
    if let Some(dir) = dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(name);
        save_checkpoint(ckpt, &path)?;
        *last = Some(path);
    }
    Ok(())
}

/// Runs the remaining permuted-mask epochs, then the ordered-mask epochs.
pub fn run_schedule(
    mut ckpt: Checkpoint,
    data: &[LabeledImage],
    exec: &Executor,
    opts: &ScheduleOptions,
) -> Result<Checkpoint> {
    let mut last: Option<PathBuf> = None;
    let mut ran = 0;
    loop {
        let (plm, osf) = progress(&ckpt);
        let phase = if plm < ckpt.train.plm_epochs {
            Phase::Plm
        } else if osf < ckpt.train.osf_epochs {
            Phase::Osf
        } else {
            break;
        };
        if opts.max_epochs.is_some_and(|m| ran >= m) {
            return Ok(ckpt);
        }
        if let Err(e) = train_epoch(&mut ckpt, data, phase, exec) {
            return Err(match e {
                Error::NonFiniteLoss { epoch, .. } => Error::NonFiniteLoss {
                    epoch,
                    last_checkpoint: last,
                },
                other => other,
            });
        }
        ran += 1;
        let (plm, osf) = progress(&ckpt);
        if phase == Phase::Plm && plm == ckpt.train.plm_epochs {
            write(&opts.checkpoint_dir, "plm.ckpt", &ckpt, &mut last)?;
        }
        if phase == Phase::Osf && osf == ckpt.train.osf_epochs {
            write(&opts.checkpoint_dir, "osf.ckpt", &ckpt, &mut last)?;
        }
        if opts.every_epoch {
            write(&opts.checkpoint_dir, "latest.ckpt", &ckpt, &mut last)?;
        }
    }
    write(&opts.checkpoint_dir, "final.ckpt", &ckpt, &mut last)?;
    Ok(ckpt)
}

/// Path of a named checkpoint inside `dir`.
pub fn checkpoint_path(dir: &Path, name: &str) -> PathBuf {
    dir.join(format!("{name}.ckpt"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{DecoderConfig, EncoderConfig};
    use crate::params::BACKBONE_PREFIX;
    use crate::syndata::{render_glyph, Domain};

    fn tiny_model(categories: usize) -> Recognizer {
        let enc = EncoderConfig {
            image_size: 8,
            patch_size: 4,
            embed_dim: 8,
            depth: 2,
            heads: 2,
            mlp_ratio: 2,
            adapter_layers: vec![0, 1],
            num_experts: 4,
            top_k: 2,
            expert_bottleneck: 4,
        };
        let dec = DecoderConfig {
            num_categories: categories,
            max_label_len: 2,
            heads: 2,
            num_permutations: 4,
            ..Default::default()
        };
        Recognizer::new(enc, dec, 1).unwrap()
    }

    fn toy(categories: usize, per: usize, size: usize) -> Vec<LabeledImage> {
        (0..categories * per)
            .map(|i| LabeledImage {
                image: render_glyph(i % categories, Domain::Tracing, 0.1, i as u64, size).unwrap().image,
                target: vec![i % categories],
            })
            .collect()
    }

    fn cfg() -> TrainConfig {
        TrainConfig {
            batch_size: 4,
            plm_epochs: 2,
            osf_epochs: 1,
            pretrain_epochs: 0,
            learning_rate: 5e-3,
            ..Default::default()
        }
    }

    #[test]
    fn pretrain_learns_two_categories() {
        let enc = EncoderConfig::desk();
        let dec = DecoderConfig {
            num_categories: 2,
            ..Default::default()
        };
        let model = Recognizer::new(enc, dec, 0).unwrap();
        let data = toy(2, 10, 16);
        let c = TrainConfig {
            pretrain_epochs: 20,
            batch_size: 8,
            ..Default::default()
        };
        let exec = Executor::new(2);
        let out = pretrain_backbone(&model, &data, &c, &exec).unwrap();
        assert!(pretrain_accuracy(&out.model, &data, &exec).unwrap() > 0.9);
        assert_eq!(out, pretrain_backbone(&model, &data, &c, &Executor::sequential()).unwrap());
    }

    #[test]
    fn pretrain_zero_epochs_and_errors() {
        let model = tiny_model(3);
        let exec = Executor::sequential();
        let out = pretrain_backbone(&model, &toy(3, 1, 8), &cfg(), &exec).unwrap();
        assert!(out.model.params.bitwise_eq_prefix(&model.params, BACKBONE_PREFIX));
        assert!(matches!(pretrain_backbone(&model, &[], &cfg(), &exec), Err(Error::Data(_))));
    }

    #[test]
    fn epochs_touch_only_trainable_tensors() {
        let model = tiny_model(3);
        let before = model.params.clone();
        let mut ckpt = start_training(model, cfg()).unwrap();
        let exec = Executor::sequential();
        train_epoch(&mut ckpt, &toy(3, 3, 8), Phase::Plm, &exec).unwrap();
        train_epoch(&mut ckpt, &toy(3, 3, 8), Phase::Osf, &exec).unwrap();
        assert_eq!(ckpt.model.params.linf_distance_prefix(&before, BACKBONE_PREFIX), 0.0);
        assert!(ckpt.model.params.bitwise_eq_prefix(&before, BACKBONE_PREFIX));
        assert!(!ckpt.model.params.bitwise_eq_prefix(&before, "dec."));
        assert!(!ckpt.model.params.bitwise_eq_prefix(&before, "adapter."));
    }

    #[test]
    fn single_sample_loss_decreases() {
        let mut ckpt = start_training(
            tiny_model(3),
            TrainConfig {
                learning_rate: 1e-3,
                ..cfg()
            },
        )
        .unwrap();
        let data = toy(1, 1, 8);
        let exec = Executor::sequential();
        let mut prev = ordered_loss(&ckpt.model, &data, &exec).unwrap();
        for _ in 0..5 {
            train_epoch(&mut ckpt, &data, Phase::Osf, &exec).unwrap();
            let now = ordered_loss(&ckpt.model, &data, &exec).unwrap();
            assert!(now < prev, "{now} !< {prev}");
            prev = now;
        }
    }

    #[test]
    fn ordered_phase_ignores_permutation_count() {
        let data = toy(3, 2, 8);
        let exec = Executor::sequential();
        let run = |k: usize| {
            let mut m = tiny_model(3);
            m.decoder.num_permutations = k;
            let mut ckpt = start_training(m, cfg()).unwrap();
            let s = train_epoch(&mut ckpt, &data, Phase::Osf, &exec).unwrap();
            (s, ckpt.model.params)
        };
        assert_eq!(run(1), run(12));
    }

    #[test]
    fn schedule_bookkeeping_and_resume() {
        let data = toy(3, 2, 8);
        let exec = Executor::sequential();
        let untouched = start_training(tiny_model(3), TrainConfig { plm_epochs: 0, osf_epochs: 0, ..cfg() }).unwrap();
        let same = run_schedule(untouched.clone(), &data, &exec, &ScheduleOptions::default()).unwrap();
        assert_eq!(same, untouched);

        let dir = tempfile::tempdir().unwrap();
        let full = run_schedule(
            start_training(tiny_model(3), cfg()).unwrap(),
            &data,
            &exec,
            &ScheduleOptions {
                checkpoint_dir: Some(dir.path().to_path_buf()),
                ..Default::default()
            },
        )
        .unwrap();
        assert!(is_complete(&full));
        assert_eq!(full.log.len(), 3);
        for name in ["plm", "osf", "final"] {
            assert!(checkpoint_path(dir.path(), name).exists(), "{name}");
        }

        let part = run_schedule(
            start_training(tiny_model(3), cfg()).unwrap(),
            &data,
            &exec,
            &ScheduleOptions {
                max_epochs: Some(1),
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(progress(&part), (1, 0));
        let path = dir.path().join("mid.ckpt");
        save_checkpoint(&part, &path).unwrap();
        let resumed = crate::checkpoint::load_checkpoint(&path).unwrap();
        let done = run_schedule(resumed, &data, &exec, &ScheduleOptions::default()).unwrap();
        assert_eq!(done, full);
    }

    #[test]
    fn non_finite_loss_aborts() {
        let mut m = tiny_model(3);
        m.params.get_mut("dec.head.b").unwrap().data_mut()[0] = f64::NAN;
        let ckpt = start_training(m, cfg()).unwrap();
        let err = run_schedule(ckpt, &toy(3, 1, 8), &Executor::sequential(), &ScheduleOptions::default()).unwrap_err();
        assert!(matches!(err, Error::NonFiniteLoss { epoch: 1, last_checkpoint: None }));
    }
}
