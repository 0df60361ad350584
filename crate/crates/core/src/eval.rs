//! Character and page evaluation of a recognizer on corpus splits.

use crate::corpus::Corpus;
use crate::error::{Error, Result};
use crate::metrics::{
    balanced_accuracy, corpus_macro_micro, edit_alignment, overall_accuracy, subset_accuracy, AlignmentCounts,
    CorpusScores, EvalReport, SubsetScore,
};
use crate::model::Recognizer;
use crate::parallel::Executor;
use crate::raster::GrayImage;
use crate::syndata::{BBox, Domain, HeadMidTail, PageSample, Split};
use crate::transcribe::{transcribe_page, CharRecognizer, Transcription};

/// First decoded token per image; an immediate end marker yields the
/// decoder's end id, which never equals a category.
pub fn predict_crops(model: &Recognizer, images: &[&GrayImage], exec: &Executor) -> Result<Vec<usize>> {
    let eos = model.decoder.eos();
    exec.map(images, |img| Ok(model.predict_char(img)?.unwrap_or(eos)))
        .into_iter()
        .collect()
}

/// Report over single-character predictions: overall and class-balanced
/// accuracy, head/mid/tail and per-domain subsets.
pub fn char_report(
    preds: &[usize],
    labels: &[usize],
    domains: &[Domain],
    classes: &[usize],
    strata: &HeadMidTail,
) -> Result<EvalReport> {
    if domains.len() != labels.len() {
        return Err(Error::Dimension(format!(
            "{} domains for {} labels",
            domains.len(),
            labels.len()
        )));
    }
    let mut r = EvalReport::new();
    r.samples = labels.len();
    r.overall_acc = Some(overall_accuracy(preds, labels)?);
    r.balanced_acc = Some(balanced_accuracy(preds, labels, classes)?);
    let groups = [("head", &strata.head), ("mid", &strata.mid), ("tail", &strata.tail)];
    for (name, set) in groups {
        let idx: Vec<usize> = (0..labels.len()).filter(|&i| set.contains(&labels[i])).collect();
        r.subsets.insert(
            name.into(),
            SubsetScore {
                accuracy: subset_accuracy(preds, labels, &idx)?,
                samples: idx.len(),
            },
        );
    }
    for d in Domain::ALL {
        let idx: Vec<usize> = (0..labels.len()).filter(|&i| domains[i] == d).collect();
        r.subsets.insert(
            d.name().into(),
            SubsetScore {
                accuracy: subset_accuracy(preds, labels, &idx)?,
                samples: idx.len(),
            },
        );
    }
    Ok(r)
}

/// Character report of `model` on one crop split of `corpus`, with the
/// predictions in split order.
pub fn evaluate_chars(
    model: &Recognizer,
    corpus: &Corpus,
    split: Split,
    exec: &Executor,
) -> Result<(EvalReport, Vec<usize>)> {
    let idx = corpus.crop_indices(split);
    let images: Vec<&GrayImage> = idx.iter().map(|&i| &corpus.crops[i].glyph.image).collect();
    let preds = predict_crops(model, &images, exec)?;
    let labels: Vec<usize> = idx.iter().map(|&i| corpus.crops[i].glyph.category).collect();
    let domains: Vec<Domain> = idx.iter().map(|&i| corpus.crops[i].glyph.domain).collect();
    let report = char_report(&preds, &labels, &domains, &corpus.retained, &corpus.strata)?;
    Ok((report, preds))
}

#[derive(Clone, Debug)]
pub struct PageEval {
    pub scores: CorpusScores,
    pub counts: Vec<AlignmentCounts>,
    pub transcriptions: Vec<Transcription>,
}

/// Transcribes each page from `boxes` (ground truth when `None`) and aligns
/// the result with the page's canonical label sequence.
pub fn evaluate_pages<R: CharRecognizer>(
    model: &R,
    pages: &[&PageSample],
    boxes: Option<&[Vec<BBox>]>,
    factor: f64,
    exec: &Executor,
) -> Result<PageEval> {
    if let Some(b) = boxes {
        if b.len() != pages.len() {
            return Err(Error::Dimension(format!("boxes for {} pages, got {}", b.len(), pages.len())));
        }
    }
    let mut counts = Vec::with_capacity(pages.len());
    let mut transcriptions = Vec::with_capacity(pages.len());
    for (k, page) in pages.iter().enumerate() {
        let gt = page.boxes();
        let use_boxes = boxes.map_or(&gt[..], |b| &b[k][..]);
        let t = transcribe_page(&page.image, use_boxes, model, factor, exec)?;
        counts.push(edit_alignment(&page.labels(), &t.flat_text));
        transcriptions.push(t);
    }
    Ok(PageEval {
        scores: corpus_macro_micro(&counts)?,
        counts,
        transcriptions,
    })
}
