use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use log::{info, warn};
use serde::{Deserialize, Serialize};
use serde_json::json;

use laddermoe::analysis::{expert_utilization_summary, export_heatmap_csv, record_activations};
use laddermoe::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use laddermoe::corpus::{load_corpus, page_id, crop_id, write_corpus, Corpus};
use laddermoe::eval::{char_report, evaluate_chars};
use laddermoe::gradcheck::tiny_model_gradient_check;
use laddermoe::metrics::{ap50, corpus_macro_micro, edit_alignment, EvalReport, ScoredBox};
use laddermoe::parallel::Executor;
use laddermoe::pipeline::{self, ExperimentConfig};
use laddermoe::raster::GrayImage;
use laddermoe::syndata::{BBox, Domain, Split};
use laddermoe::training::{run_schedule, start_training, Phase, ScheduleOptions};
use laddermoe::transcribe::{
    read_jsonl, transcribe_page, write_jsonl, BoxRecord, TranscriptionRecord, BOXES_FORMAT, TRANSCRIPTION_FORMAT,
};
use laddermoe::Recognizer;

use crate::config::RunConfig;
use crate::error::{CliError, CliResult};
use crate::provenance::{write_inputs, write_json, write_text, OUTPUT_VERSION};
use crate::Axis;

pub const PREDICTIONS_FORMAT: &str = "laddermoe-predictions";

/// One line of a predictions file for `eval-char`.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictionRecord {
    pub id: String,
    pub prediction: usize,
}

pub struct Context {
    pub cfg: RunConfig,
    pub out: PathBuf,
    pub command: &'static str,
    pub exec: Executor,
}

impl Context {
    /// Validates the configuration before anything runs.
    pub fn new(cfg: RunConfig, out: PathBuf, command: &'static str) -> CliResult<Self> {
        let cfg = cfg.resolve()?;
        std::fs::create_dir_all(&out).map_err(|e| CliError::Runtime(format!("{}: {e}", out.display())))?;
        Ok(Context {
            exec: Executor::new(cfg.workers),
            cfg,
            out,
            command,
        })
    }

    fn experiment(&self) -> ExperimentConfig {
        self.cfg.experiment()
    }

    fn corpus_dir(&self, arg: Option<PathBuf>) -> PathBuf {
        arg.or_else(|| self.cfg.corpus_dir.clone())
            .unwrap_or_else(|| self.out.join("corpus"))
    }

    /// Loads the corpus and adopts its generation settings.
    fn load_corpus(&mut self, dir: &Path) -> CliResult<Corpus> {
        if !dir.join("manifest.jsonl").is_file() {
            return Err(CliError::Runtime(format!(
                "no corpus at {}; run `laddermoe synth` first",
                dir.display()
            )));
        }
        let corpus = load_corpus(dir, &self.exec)?;
        self.cfg.corpus = corpus.config.clone();
        self.cfg = self.cfg.clone().resolve()?;
        Ok(corpus)
    }

    fn echo_config(&self) -> CliResult<()> {
        write_json(
            &self.out.join(format!("{}.config.json", self.command)),
            "laddermoe-config",
            &self.cfg,
        )
    }

    fn finish(&self, inputs: &[&Path]) -> CliResult<()> {
        self.echo_config()?;
        write_inputs(&self.out, self.command, inputs)
    }

    fn default_model(&self) -> PathBuf {
        self.out.join("checkpoints").join("final.ckpt")
    }
}

fn load_model(path: &Path) -> CliResult<Recognizer> {
    Ok(load_checkpoint(path)?.model)
}

fn write_report(out: &Path, name: &str, report: &EvalReport) -> CliResult<()> {
    write_text(&out.join(format!("{name}.json")), &(report.to_json()? + "\n"))?;
    let table = format!(
        "# format={} version={}\n{}",
        report.format,
        report.version,
        report.to_table()
    );
    write_text(&out.join(format!("{name}.txt")), &table)?;
    print!("{}", report.to_table());
    Ok(())
}

pub fn synth(ctx: &Context) -> CliResult<()> {
    let corpus = pipeline::synthesize(&ctx.experiment(), &ctx.exec)?;
    let dir = ctx.corpus_dir(None);
    write_corpus(&corpus, &dir, &ctx.exec)?;
    println!(
        "{} crops in {} categories, {} pages -> {}",
        corpus.crops.len(),
        corpus.retained.len(),
        corpus.pages.len(),
        dir.display()
    );
    ctx.finish(&[])
}

pub fn pretrain(mut ctx: Context, corpus: Option<PathBuf>) -> CliResult<()> {
    let dir = ctx.corpus_dir(corpus);
    let corpus = ctx.load_corpus(&dir)?;
    let cfg = ctx.experiment();
    let pre = pipeline::pretrain(&cfg, &corpus, &ctx.exec)?;
    let mut ckpt = start_training(pre.model, cfg.train.clone())?;
    ckpt.phase = Phase::Pretrain;
    ckpt.epoch = cfg.train.pretrain_epochs;
    ckpt.log = pre.log;
    let path = ctx.out.join("pretrain.ckpt");
    save_checkpoint(&ckpt, &path)?;
    write_json(
        &ctx.out.join("pretrain.report.json"),
        "laddermoe-pretrain",
        json!({ "held_out_accuracy": pre.val_accuracy, "log": ckpt.log }),
    )?;
    println!("held-out accuracy {:.4} -> {}", pre.val_accuracy, path.display());
    ctx.finish(&[&dir])
}

pub fn train(
    mut ctx: Context,
    corpus: Option<PathBuf>,
    pretrained: Option<PathBuf>,
    resume: Option<PathBuf>,
    max_epochs: Option<usize>,
) -> CliResult<()> {
    let dir = ctx.corpus_dir(corpus);
    let corpus = ctx.load_corpus(&dir)?;
    let cfg = ctx.experiment();
    let (start, source) = match resume {
        Some(path) => (load_checkpoint(&path)?, path),
        None => {
            let path = pretrained.unwrap_or_else(|| ctx.out.join("pretrain.ckpt"));
            let backbone = load_model(&path)?;
            let model = pipeline::with_backbone(&cfg, &backbone).map_err(|e| CliError::Usage(e.to_string()))?;
            (start_training(model, cfg.train.clone())?, path)
        }
    };
    let opts = ScheduleOptions {
        checkpoint_dir: Some(ctx.out.join("checkpoints")),
        max_epochs,
        every_epoch: true,
    };
    let data = corpus.labeled_crops(Split::Train);
    let ckpt = run_schedule(start, &data, &ctx.exec, &opts)?;
    let val_loss = pipeline::validation_loss(&ckpt.model, &corpus, &ctx.exec)?;
    write_json(
        &ctx.out.join("train.log.json"),
        "laddermoe-train-log",
        json!({ "validation_ordered_loss": val_loss, "log": ckpt.log }),
    )?;
    println!("validation ordered loss {val_loss:.5}");
    ctx.finish(&[&dir, &source])
}

pub fn eval_char(
    mut ctx: Context,
    corpus: Option<PathBuf>,
    model: Option<PathBuf>,
    predictions: Option<PathBuf>,
    split: Split,
) -> CliResult<()> {
    let dir = ctx.corpus_dir(corpus);
    let corpus = ctx.load_corpus(&dir)?;
    let (report, source) = match predictions {
        Some(path) => {
            let records: Vec<PredictionRecord> = read_jsonl(&path, PREDICTIONS_FORMAT)?;
            let by_id: BTreeMap<&str, usize> = records.iter().map(|r| (r.id.as_str(), r.prediction)).collect();
            let idx = corpus.crop_indices(split);
            let mut preds = Vec::with_capacity(idx.len());
            for &i in &idx {
                let id = crop_id(i);
                preds.push(*by_id.get(id.as_str()).ok_or_else(|| {
                    CliError::Runtime(format!("{}: no prediction for {id}", path.display()))
                })?);
            }
            let labels: Vec<usize> = idx.iter().map(|&i| corpus.crops[i].glyph.category).collect();
            let domains: Vec<Domain> = idx.iter().map(|&i| corpus.crops[i].glyph.domain).collect();
            (char_report(&preds, &labels, &domains, &corpus.retained, &corpus.strata)?, path)
        }
        None => {
            let path = model.unwrap_or_else(|| ctx.default_model());
            let m = load_model(&path)?;
            (evaluate_chars(&m, &corpus, split, &ctx.exec)?.0, path)
        }
    };
    write_report(&ctx.out, "eval-char", &report)?;
    ctx.finish(&[&dir, &source])
}

fn group_by_page<T>(records: Vec<T>, key: impl Fn(&T) -> &str) -> BTreeMap<String, Vec<T>> {
    let mut map: BTreeMap<String, Vec<T>> = BTreeMap::new();
    for r in records {
        map.entry(key(&r).to_string()).or_default().push(r);
    }
    map
}

pub fn transcribe(
    mut ctx: Context,
    corpus: Option<PathBuf>,
    model: Option<PathBuf>,
    boxes: Option<PathBuf>,
    split: Split,
) -> CliResult<()> {
    let dir = ctx.corpus_dir(corpus);
    let corpus = ctx.load_corpus(&dir)?;
    let model_path = model.unwrap_or_else(|| ctx.default_model());
    let m = load_model(&model_path)?;
    let given = match &boxes {
        Some(p) => Some(group_by_page(read_jsonl::<BoxRecord>(p, BOXES_FORMAT)?, |r| &r.page_id)),
        None => None,
    };
    let mut records = Vec::new();
    for i in corpus.page_split.indices(split) {
        let id = page_id(i);
        let page = &corpus.pages[i];
        let page_boxes: Vec<BBox> = match &given {
            Some(map) => map.get(&id).map_or_else(Vec::new, |rs| rs.iter().map(BoxRecord::bbox).collect()),
            None => page.boxes(),
        };
        if page_boxes.is_empty() {
            warn!("{id}: no boxes");
            records.push(TranscriptionRecord {
                page_id: id,
                columns: Vec::new(),
                flat_text: Vec::new(),
            });
            continue;
        }
        let t = transcribe_page(&page.image, &page_boxes, &m, ctx.cfg.lambda, &ctx.exec)?;
        for w in &t.warnings {
            warn!("{id}: {w}");
        }
        records.push(TranscriptionRecord {
            page_id: id,
            columns: t.columns,
            flat_text: t.flat_text,
        });
    }
    let path = ctx.out.join("transcriptions.jsonl");
    write_jsonl(&path, TRANSCRIPTION_FORMAT, &records)?;
    println!("{} pages -> {}", records.len(), path.display());
    let mut inputs: Vec<&Path> = vec![&dir, &model_path];
    if let Some(b) = &boxes {
        inputs.push(b);
    }
    ctx.finish(&inputs)
}

pub fn eval_page(
    mut ctx: Context,
    corpus: Option<PathBuf>,
    transcriptions: Option<PathBuf>,
    detections: Option<PathBuf>,
    split: Split,
) -> CliResult<()> {
    let dir = ctx.corpus_dir(corpus);
    let corpus = ctx.load_corpus(&dir)?;
    let tpath = transcriptions.unwrap_or_else(|| ctx.out.join("transcriptions.jsonl"));
    let records: BTreeMap<String, TranscriptionRecord> = read_jsonl::<TranscriptionRecord>(&tpath, TRANSCRIPTION_FORMAT)?
        .into_iter()
        .map(|r| (r.page_id.clone(), r))
        .collect();
    let idx = corpus.page_split.indices(split);
    let mut counts = Vec::with_capacity(idx.len());
    for &i in &idx {
        let id = page_id(i);
        let rec = records
            .get(&id)
            .ok_or_else(|| CliError::Runtime(format!("{}: no transcription for {id}", tpath.display())))?;
        counts.push(edit_alignment(&corpus.pages[i].labels(), &rec.flat_text));
    }
    let mut report = EvalReport::new();
    report.samples = counts.iter().map(|c| c.n).sum();
    report.pages = Some(corpus_macro_micro(&counts)?);
    if let Some(dpath) = &detections {
        let by_page = group_by_page(read_jsonl::<BoxRecord>(dpath, BOXES_FORMAT)?, |r| &r.page_id);
        let mut dets = Vec::with_capacity(idx.len());
        let mut gts = Vec::with_capacity(idx.len());
        for &i in &idx {
            let found = by_page.get(&page_id(i)).map_or(&[][..], |v| &v[..]);
            let mut page_dets = Vec::with_capacity(found.len());
            for r in found {
                let score = r.score.ok_or_else(|| {
                    CliError::Runtime(format!("{}: detection on {} has no score", dpath.display(), r.page_id))
                })?;
                page_dets.push(ScoredBox { bbox: r.bbox(), score });
            }
            dets.push(page_dets);
            gts.push(corpus.pages[i].boxes());
        }
        report.ap50 = ap50(&dets, &gts)?;
    }
    write_report(&ctx.out, "eval-page", &report)?;
    let mut inputs: Vec<&Path> = vec![&dir, &tpath];
    if let Some(d) = &detections {
        inputs.push(d);
    }
    ctx.finish(&inputs)
}

pub fn analyze_experts(mut ctx: Context, corpus: Option<PathBuf>, model: Option<PathBuf>, split: Split) -> CliResult<()> {
    let dir = ctx.corpus_dir(corpus);
    let corpus = ctx.load_corpus(&dir)?;
    let model_path = model.unwrap_or_else(|| ctx.default_model());
    let m = load_model(&model_path)?;
    if !m.encoder.adapters_enabled() {
        return Err(CliError::Runtime("model has no adapters to analyze".into()));
    }
    let samples: Vec<(&GrayImage, usize)> = corpus
        .crop_indices(split)
        .into_iter()
        .map(|i| (&corpus.crops[i].glyph.image, corpus.crops[i].glyph.category))
        .collect();
    let mats = record_activations(&m, &samples, &ctx.exec)?;
    let dest = ctx.out.join("experts");
    let files = export_heatmap_csv(&mats, &dest)?;
    let summary = expert_utilization_summary(&mats);
    write_json(&dest.join("summary.json"), "laddermoe-expert-summary", &summary)?;
    for a in &summary.adapters {
        println!(
            "adapter {} (layer {}): utilization {:.3}, entropy {:.3}, top {:?}",
            a.adapter, a.layer, a.utilization, a.entropy, a.top
        );
    }
    for (a, b, n) in &summary.top_overlap {
        println!("top-overlap {a}-{b}: {n}");
    }
    info!("{} csv files in {}", files.len(), dest.display());
    ctx.finish(&[&dir, &model_path])
}

pub fn grad_check(ctx: &Context, eps: f64, tol: f64) -> CliResult<()> {
    let report = tiny_model_gradient_check(ctx.cfg.seed, eps, tol).map_err(|e| match e {
        laddermoe::Error::Parameter(m) => CliError::Usage(m),
        other => other.into(),
    })?;
    write_json(&ctx.out.join("grad-check.json"), "laddermoe-grad-check", &report)?;
    let failures = report.failures();
    println!(
        "{} tensors checked, worst relative error {:.3e}, {} failed",
        report.params.len(),
        report.worst(),
        failures.len()
    );
    ctx.finish(&[])?;
    if failures.is_empty() {
        Ok(())
    } else {
        Err(CliError::Runtime(format!(
            "gradient check failed for {}",
            failures.iter().map(|f| f.name.as_str()).collect::<Vec<_>>().join(", ")
        )))
    }
}

fn axis_name(axis: Axis) -> &'static str {
    match axis {
        Axis::Experts => "experts",
        Axis::TopK => "top_k",
        Axis::OsfEpochs => "osf_epochs",
        Axis::Permutations => "permutations",
    }
}

fn with_axis(cfg: &RunConfig, axis: Axis, value: usize) -> CliResult<RunConfig> {
    let mut c = cfg.clone();
    match axis {
        Axis::Experts => c.encoder.num_experts = value,
        Axis::TopK => c.encoder.top_k = value,
        Axis::OsfEpochs => c.train.osf_epochs = value,
        Axis::Permutations => c.decoder.num_permutations = value,
    }
    c.resolve()
        .map_err(|e| CliError::Usage(format!("{}={value}: {e}", axis_name(axis))))
}

pub fn ablate(
    mut ctx: Context,
    corpus: Option<PathBuf>,
    pretrained: Option<PathBuf>,
    axis: Axis,
    values: &[usize],
) -> CliResult<()> {
    let runs = |cfg: &RunConfig| {
        values
            .iter()
            .map(|&v| with_axis(cfg, axis, v).map(|c| (v, c)))
            .collect::<CliResult<Vec<_>>>()
    };
    runs(&ctx.cfg)?;
    let dir = ctx.corpus_dir(corpus);
    let corpus = ctx.load_corpus(&dir)?;
    let runs = runs(&ctx.cfg)?;
    let backbone = match &pretrained {
        Some(p) => load_model(p)?,
        None => pipeline::pretrain(&ctx.experiment(), &corpus, &ctx.exec)?.model,
    };
    let path = ctx.out.join(format!("ablate-{}.csv", axis_name(axis)));
    let mut text = format!("# format=laddermoe-ablation version={OUTPUT_VERSION} axis={}\n", axis_name(axis));
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        axis_name(axis),
        "overall_acc",
        "balanced_acc",
        "head_acc",
        "mid_acc",
        "tail_acc",
        "val_ordered_loss",
    ])?;
    for (value, run) in runs {
        let cfg = run.experiment();
        let model = pipeline::with_backbone(&cfg, &backbone).map_err(|e| CliError::Usage(e.to_string()))?;
        let ckpt: Checkpoint = pipeline::train(&cfg, model, &corpus, &ctx.exec, &ScheduleOptions::default())?;
        let (report, _) = evaluate_chars(&ckpt.model, &corpus, Split::Test, &ctx.exec)?;
        let loss = pipeline::validation_loss(&ckpt.model, &corpus, &ctx.exec)?;
        let cell = |v: Option<f64>| v.map_or(String::new(), |x| format!("{x:?}"));
        let subset = |name: &str| cell(report.subsets.get(name).and_then(|s| s.accuracy));
        w.write_record([
            value.to_string(),
            cell(report.overall_acc),
            cell(report.balanced_acc),
            subset("head"),
            subset("mid"),
            subset("tail"),
            format!("{loss:?}"),
        ])?;
        println!("{}={value}: balanced acc {}", axis_name(axis), cell(report.balanced_acc));
    }
    let body = w.into_inner().map_err(|e| CliError::Runtime(e.to_string()))?;
    text.push_str(&String::from_utf8_lossy(&body));
    write_text(&path, &text)?;
    let mut inputs: Vec<&Path> = vec![&dir];
    if let Some(p) = &pretrained {
        inputs.push(p);
    }
    ctx.finish(&inputs)
}
