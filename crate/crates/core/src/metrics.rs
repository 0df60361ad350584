//! Accuracy family, Levenshtein alignment with CR/AR, macro/micro
//! aggregation, and AP at IoU 0.5.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::syndata::BBox;

fn check_lengths(preds: &[usize], labels: &[usize]) -> Result<()> {
    if preds.len() != labels.len() {
        return Err(Error::Dimension(format!(
            "{} predictions for {} labels",
            preds.len(),
            labels.len()
        )));
    }
    Ok(())
}

pub fn overall_accuracy(preds: &[usize], labels: &[usize]) -> Result<f64> {
    check_lengths(preds, labels)?;
    if labels.is_empty() {
        return Err(Error::EmptyInput("overall accuracy of zero samples".into()));
    }
    let hits = preds.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / labels.len() as f64)
}

/// Unweighted mean of per-class accuracy over `classes`. Classes without
/// samples are skipped with a warning.
pub fn balanced_accuracy(preds: &[usize], labels: &[usize], classes: &[usize]) -> Result<f64> {
    check_lengths(preds, labels)?;
    let wanted: BTreeSet<usize> = classes.iter().copied().collect();
    let mut tally: BTreeMap<usize, (usize, usize)> = BTreeMap::new();
    for (p, l) in preds.iter().zip(labels) {
        if wanted.contains(l) {
            let e = tally.entry(*l).or_default();
            e.1 += 1;
            if p == l {
                e.0 += 1;
            }
        }
    }
    let missing = wanted.len() - tally.len();
    if missing > 0 {
        warn!("{missing} class(es) have no samples and are excluded from balanced accuracy");
    }
    if tally.is_empty() {
        return Err(Error::EmptyInput("no class in the set has samples".into()));
    }
    let sum: f64 = tally.values().map(|&(h, n)| h as f64 / n as f64).sum();
    Ok(sum / tally.len() as f64)
}

/// Accuracy restricted to sample indices `subset`; `None` (with a warning)
/// when the subset is empty.
pub fn subset_accuracy(preds: &[usize], labels: &[usize], subset: &[usize]) -> Result<Option<f64>> {
    check_lengths(preds, labels)?;
    if subset.is_empty() {
        warn!("empty subset; accuracy left absent");
        return Ok(None);
    }
    if let Some(&bad) = subset.iter().find(|&&i| i >= labels.len()) {
        return Err(Error::Dimension(format!("subset index {bad} out of {} samples", labels.len())));
    }
    let hits = subset.iter().filter(|&&i| preds[i] == labels[i]).count();
    Ok(Some(hits as f64 / subset.len() as f64))
}

/// Substitutions, deletions, insertions and reference length of one page.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AlignmentCounts {
    pub s: usize,
    pub d: usize,
    pub i: usize,
    pub n: usize,
}

impl AlignmentCounts {
    pub fn cost(&self) -> usize {
        self.s + self.d + self.i
    }
}

/// Unit-cost Levenshtein alignment. Among optimal paths the backtrace (from
/// the end) prefers the diagonal, then deletion, then insertion.
pub fn edit_alignment<T: PartialEq>(reference: &[T], hyp: &[T]) -> AlignmentCounts {
    let (n, m) = (reference.len(), hyp.len());
    let w = m + 1;
    let mut dp = vec![0usize; (n + 1) * w];
    for i in 0..=n {
        dp[i * w] = i;
    }
    for j in 0..=m {
        dp[j] = j;
    }
    for i in 1..=n {
        for j in 1..=m {
            let sub = dp[(i - 1) * w + j - 1] + usize::from(reference[i - 1] != hyp[j - 1]);
            let del = dp[(i - 1) * w + j] + 1;
            let ins = dp[i * w + j - 1] + 1;
            dp[i * w + j] = sub.min(del).min(ins);
        }
    }
    let mut c = AlignmentCounts {
        n,
        ..Default::default()
    };
    let (mut i, mut j) = (n, m);
    while i > 0 || j > 0 {
        let here = dp[i * w + j];
        if i > 0 && j > 0 {
            let differ = reference[i - 1] != hyp[j - 1];
            if dp[(i - 1) * w + j - 1] + usize::from(differ) == here {
                c.s += usize::from(differ);
                i -= 1;
                j -= 1;
                continue;
            }
        }
        if i > 0 && dp[(i - 1) * w + j] + 1 == here {
            c.d += 1;
            i -= 1;
        } else {
            c.i += 1;
            j -= 1;
        }
    }
    c
}

/// `(CR, AR)` of one page; AR is not clamped.
pub fn page_cr_ar(c: &AlignmentCounts) -> Result<(f64, f64)> {
    if c.n == 0 {
        return Err(Error::EmptyInput("page has an empty reference".into()));
    }
    let n = c.n as f64;
    Ok((
        1.0 - (c.s + c.d) as f64 / n,
        1.0 - (c.s + c.d + c.i) as f64 / n,
    ))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusScores {
    pub macro_cr: f64,
    pub macro_ar: f64,
    pub micro_cr: f64,
    pub micro_ar: f64,
    pub pages: usize,
    pub pages_in_macro: usize,
}

/// Page-mean (macro) and pooled-count (micro) CR and AR. Pages with an empty
/// reference are left out of the macro mean with a warning but still add
/// their insertions to the micro sums.
pub fn corpus_macro_micro(pages: &[AlignmentCounts]) -> Result<CorpusScores> {
    if pages.is_empty() {
        return Err(Error::EmptyInput("no pages to aggregate".into()));
    }
    let mut per_page = Vec::with_capacity(pages.len());
    for (k, c) in pages.iter().enumerate() {
        match page_cr_ar(c) {
            Ok(v) => per_page.push(v),
            Err(_) => warn!("page {k} has an empty reference; excluded from macro scores"),
        }
    }
    let total_n: usize = pages.iter().map(|c| c.n).sum();
    if per_page.is_empty() || total_n == 0 {
        return Err(Error::EmptyInput("every page has an empty reference".into()));
    }
    let m = per_page.len() as f64;
    let sd: usize = pages.iter().map(|c| c.s + c.d).sum();
    let sdi: usize = pages.iter().map(AlignmentCounts::cost).sum();
    Ok(CorpusScores {
        macro_cr: per_page.iter().map(|v| v.0).sum::<f64>() / m,
        macro_ar: per_page.iter().map(|v| v.1).sum::<f64>() / m,
        micro_cr: 1.0 - sd as f64 / total_n as f64,
        micro_ar: 1.0 - sdi as f64 / total_n as f64,
        pages: pages.len(),
        pages_in_macro: per_page.len(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoredBox {
    pub bbox: BBox,
    pub score: f64,
}

/// Single-class AP at IoU ≥ 0.5 with all-points interpolation. Detections
/// are matched greedily in score order (ties by page, then position) to the
/// best-overlapping unmatched ground truth of their page. `None` when there
/// is no ground truth at all.
pub fn ap50(detections: &[Vec<ScoredBox>], ground_truth: &[Vec<BBox>]) -> Result<Option<f64>> {
    if detections.len() != ground_truth.len() {
        return Err(Error::Dimension(format!(
            "detections for {} pages, ground truth for {}",
            detections.len(),
            ground_truth.len()
        )));
    }
    let total_gt: usize = ground_truth.iter().map(Vec::len).sum();
    if total_gt == 0 {
        warn!("no ground-truth boxes; AP50 left absent");
        return Ok(None);
    }
    let mut order: Vec<(usize, usize)> = detections
        .iter()
        .enumerate()
        .flat_map(|(p, ds)| (0..ds.len()).map(move |k| (p, k)))
        .collect();
    if let Some(&(p, k)) = order.iter().find(|&&(p, k)| !detections[p][k].score.is_finite()) {
        return Err(Error::Numeric(format!("detection {k} on page {p} has a non-finite score")));
    }
    order.sort_by(|a, b| detections[b.0][b.1].score.total_cmp(&detections[a.0][a.1].score).then(a.cmp(b)));
    let mut matched: Vec<Vec<bool>> = ground_truth.iter().map(|g| vec![false; g.len()]).collect();
    let mut tp = 0usize;
    let mut curve = Vec::with_capacity(order.len());
    for (rank, (p, k)) in order.into_iter().enumerate() {
        let det = detections[p][k].bbox;
        let mut best: Option<(usize, f64)> = None;
        for (g, gt) in ground_truth[p].iter().enumerate() {
            if matched[p][g] {
                continue;
            }
            let iou = det.iou(gt);
            if iou >= 0.5 && best.is_none_or(|(_, b)| iou > b) {
                best = Some((g, iou));
            }
        }
        if let Some((g, _)) = best {
            matched[p][g] = true;
            tp += 1;
        }
        curve.push((tp as f64 / total_gt as f64, tp as f64 / (rank + 1) as f64));
    }
    let mut ap = 0.0;
    let mut envelope = 0.0f64;
    for k in (0..curve.len()).rev() {
        envelope = envelope.max(curve[k].1);
        let prev_recall = if k == 0 { 0.0 } else { curve[k - 1].0 };
        if curve[k].0 > prev_recall {
            ap += (curve[k].0 - prev_recall) * envelope;
        }
    }
    Ok(Some(ap))
}

/// Accuracy over a labelled subset, with its sample count.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubsetScore {
    pub accuracy: Option<f64>,
    pub samples: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub format: String,
    pub version: u32,
    pub samples: usize,
    pub overall_acc: Option<f64>,
    pub balanced_acc: Option<f64>,
    pub subsets: BTreeMap<String, SubsetScore>,
    pub pages: Option<CorpusScores>,
    pub ap50: Option<f64>,
}

pub const REPORT_FORMAT: &str = "laddermoe-eval";
pub const REPORT_VERSION: u32 = 1;

impl EvalReport {
    pub fn new() -> Self {
        EvalReport {
            format: REPORT_FORMAT.into(),
            version: REPORT_VERSION,
            ..Default::default()
        }
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Internal(e.to_string()))
    }

    /// Aligned two-column table for terminals.
    pub fn to_table(&self) -> String {
        let pct = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{:.2}", 100.0 * x));
        let mut rows: Vec<(String, String)> = vec![
            ("samples".into(), self.samples.to_string()),
            ("overall acc".into(), pct(self.overall_acc)),
            ("balanced acc".into(), pct(self.balanced_acc)),
        ];
        for (name, s) in &self.subsets {
            rows.push((format!("{name} acc (n={})", s.samples), pct(s.accuracy)));
        }
        if let Some(p) = &self.pages {
            rows.push(("pages".into(), p.pages.to_string()));
            rows.push(("macro CR".into(), pct(Some(p.macro_cr))));
            rows.push(("macro AR".into(), pct(Some(p.macro_ar))));
            rows.push(("micro CR".into(), pct(Some(p.micro_cr))));
            rows.push(("micro AR".into(), pct(Some(p.micro_ar))));
        }
        if self.ap50.is_some() {
            rows.push(("AP50".into(), pct(self.ap50)));
        }
        let width = rows.iter().map(|r| r.0.len()).max().unwrap_or(0);
        let mut out = String::new();
        for (k, v) in rows {
            let _ = writeln!(out, "{k:<width$}  {v:>8}");
        }
        out
    }
}
