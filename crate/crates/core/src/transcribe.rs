//! Column-wise grouping of character boxes, reading-order serialization and
//! whole-page transcription.

use std::io::{BufRead, Write};
use std::path::Path;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Recognizer;
use crate::parallel::Executor;
use crate::raster::GrayImage;
use crate::syndata::BBox;

pub const DEFAULT_FACTOR: f64 = 0.5;

/// Columns right to left, each listed top to bottom.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ColumnGrouping<P> {
    pub columns: Vec<Vec<(BBox, P)>>,
}

/// One step of the grouping pass: input box `index` joined column `column`
/// (numbered by creation) whose anchor x1 was `anchor_x1`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Assignment {
    pub index: usize,
    pub column: usize,
    pub anchor_x1: f64,
}

/// `factor` times the mean width of the boxes with `x2 > x1`.
pub fn adaptive_threshold(boxes: &[BBox], factor: f64) -> Result<f64> {
    if !(factor.is_finite() && factor > 0.0) {
        return Err(Error::Parameter(format!("factor must be positive and finite, got {factor}")));
    }
    let widths: Vec<f64> = boxes.iter().filter(|b| b.x2 > b.x1).map(BBox::width).collect();
    if widths.is_empty() {
        return Err(Error::Threshold(format!(
            "no box with positive width among {} box(es)",
            boxes.len()
        )));
    }
    Ok(widths.iter().sum::<f64>() / widths.len() as f64 * factor)
}

/// Groups boxes into columns and records each assignment.
///
/// Boxes are visited by x1 descending (ties: y1 ascending, then x2, then y2).
/// A box joins the first column whose first box has an x1 within `< x_thr`,
/// otherwise it opens a new column. Columns are then sorted top to bottom and
/// ordered right to left by their top box.
pub fn group_columns_logged<P: Clone>(
    items: &[(BBox, P)],
    factor: f64,
) -> Result<(ColumnGrouping<P>, Vec<Assignment>)> {
    if let Some((b, _)) = items
        .iter()
        .find(|(b, _)| ![b.x1, b.y1, b.x2, b.y2].iter().all(|v| v.is_finite()))
    {
        return Err(Error::Parameter(format!("non-finite box {b:?}")));
    }
    let boxes: Vec<BBox> = items.iter().map(|(b, _)| *b).collect();
    let thr = adaptive_threshold(&boxes, factor)?;
    let mut order: Vec<usize> = (0..items.len()).collect();
    order.sort_by(|&a, &b| {
        let (p, q) = (&boxes[a], &boxes[b]);
        q.x1.total_cmp(&p.x1)
            .then(p.y1.total_cmp(&q.y1))
            .then(p.x2.total_cmp(&q.x2))
            .then(p.y2.total_cmp(&q.y2))
    });
    let mut columns: Vec<Vec<usize>> = Vec::new();
    let mut log = Vec::with_capacity(items.len());
    for idx in order {
        let x1 = boxes[idx].x1;
        let hit = columns.iter().position(|c| (x1 - boxes[c[0]].x1).abs() < thr);
        let column = match hit {
            Some(c) => {
                columns[c].push(idx);
                c
            }
            None => {
                columns.push(vec![idx]);
                columns.len() - 1
            }
        };
        log.push(Assignment {
            index: idx,
            column,
            anchor_x1: boxes[columns[column][0]].x1,
        });
    }
    for c in columns.iter_mut() {
        c.sort_by(|&a, &b| boxes[a].y1.total_cmp(&boxes[b].y1));
    }
    columns.sort_by(|a, b| boxes[b[0]].x1.total_cmp(&boxes[a[0]].x1));
    let grouping = ColumnGrouping {
        columns: columns
            .into_iter()
            .map(|c| c.into_iter().map(|i| items[i].clone()).collect())
            .collect(),
    };
    Ok((grouping, log))
}

pub fn group_columns<P: Clone>(items: &[(BBox, P)], factor: f64) -> Result<ColumnGrouping<P>> {
    Ok(group_columns_logged(items, factor)?.0)
}

pub fn serialize_reading_order<P: Clone>(g: &ColumnGrouping<P>) -> Vec<P> {
    g.columns.iter().flatten().map(|(_, p)| p.clone()).collect()
}

/// Anything that names the character in a single-glyph crop.
pub trait CharRecognizer: Sync {
    /// Side length crops are resized to before recognition.
    fn input_size(&self) -> usize;
    fn recognize_char(&self, crop: &GrayImage) -> Result<Option<usize>>;
}

impl CharRecognizer for Recognizer {
    fn input_size(&self) -> usize {
        self.encoder.image_size
    }

    fn recognize_char(&self, crop: &GrayImage) -> Result<Option<usize>> {
        self.predict_char(crop)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoxPrediction {
    pub bbox: BBox,
    pub prediction: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Transcription {
    /// Recognized categories per column; boxes without a prediction are left out.
    pub columns: Vec<Vec<usize>>,
    pub flat_text: Vec<usize>,
    /// Input order.
    pub per_box: Vec<BoxPrediction>,
    pub warnings: Vec<String>,
}

fn clamp_box(b: &BBox, width: usize, height: usize) -> (usize, usize, usize, usize) {
    let cx = |v: f64, hi: usize| v.clamp(0.0, hi as f64);
    let x1 = cx(b.x1, width).floor() as usize;
    let y1 = cx(b.y1, height).floor() as usize;
    let x2 = cx(b.x2, width).ceil() as usize;
    let y2 = cx(b.y2, height).ceil() as usize;
    (x1, y1, x2, y2)
}

/// Recognizes every box crop (clamped to the page, resized to the model
/// input) and orders the results by column grouping.
pub fn transcribe_page<R: CharRecognizer>(
    page: &GrayImage,
    boxes: &[BBox],
    model: &R,
    factor: f64,
    exec: &Executor,
) -> Result<Transcription> {
    if boxes.is_empty() {
        return Ok(Transcription {
            columns: Vec::new(),
            flat_text: Vec::new(),
            per_box: Vec::new(),
            warnings: Vec::new(),
        });
    }
    let mut warnings = Vec::new();
    let mut crops = Vec::with_capacity(boxes.len());
    for (k, b) in boxes.iter().enumerate() {
        let (x1, y1, x2, y2) = clamp_box(b, page.width, page.height);
        let outside = b.x1 < 0.0 || b.y1 < 0.0 || b.x2 > page.width as f64 || b.y2 > page.height as f64;
        if outside {
            let msg = format!("box {k} {b:?} clamped to the {}x{} page", page.width, page.height);
            warn!("{msg}");
            warnings.push(msg);
        }
        if x2 > x1 && y2 > y1 {
            crops.push(Some(page.crop(x1, y1, x2, y2).resize_square(model.input_size())));
        } else {
            let msg = format!("box {k} {b:?} is empty after clamping; no prediction");
            warn!("{msg}");
            warnings.push(msg);
            crops.push(None);
        }
    }
    let preds: Vec<Result<Option<usize>>> = exec.map(&crops, |c| match c {
        Some(img) => model.recognize_char(img),
        None => Ok(None),
    });
    let preds = preds.into_iter().collect::<Result<Vec<_>>>()?;
    let items: Vec<(BBox, Option<usize>)> = boxes.iter().copied().zip(preds.iter().copied()).collect();
    let grouping = group_columns(&items, factor)?;
    let columns: Vec<Vec<usize>> = grouping
        .columns
        .iter()
        .map(|c| c.iter().filter_map(|(_, p)| *p).collect())
        .collect();
    let flat_text = serialize_reading_order(&grouping).into_iter().flatten().collect();
    Ok(Transcription {
        columns,
        flat_text,
        per_box: items
            .into_iter()
            .map(|(bbox, prediction)| BoxPrediction { bbox, prediction })
            .collect(),
        warnings,
    })
}

/// One line of a box file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoxRecord {
    pub page_id: String,
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub category: Option<usize>,
}

impl BoxRecord {
    pub fn bbox(&self) -> BBox {
        BBox::new(self.x1, self.y1, self.x2, self.y2)
    }
}

/// One line of a transcription file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TranscriptionRecord {
    pub page_id: String,
    pub columns: Vec<Vec<usize>>,
    pub flat_text: Vec<usize>,
}

pub const BOXES_FORMAT: &str = "laddermoe-boxes";
pub const TRANSCRIPTION_FORMAT: &str = "laddermoe-transcription";
pub const JSONL_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    format: String,
    version: u32,
}

/// Writes a JSON-lines file whose first line is a `{format, version}` header.
pub fn write_jsonl<T: Serialize>(path: &Path, format: &str, records: &[T]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    let mut line = |v: String| writeln!(w, "{v}").map_err(|e| Error::io(path, e));
    let header = Header {
        format: format.into(),
        version: JSONL_VERSION,
    };
    line(serde_json::to_string(&header).map_err(|e| Error::Internal(e.to_string()))?)?;
    for r in records {
        line(serde_json::to_string(r).map_err(|e| Error::Internal(e.to_string()))?)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path, format: &str) -> Result<Vec<T>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut lines = std::io::BufReader::new(file).lines();
    let first = lines
        .next()
        .ok_or_else(|| Error::Format(format!("{}: empty file", path.display())))?
        .map_err(|e| Error::io(path, e))?;
    let header: Header = serde_json::from_str(&first)
        .map_err(|e| Error::Format(format!("{}: bad header: {e}", path.display())))?;
    if header.format != format || header.version != JSONL_VERSION {
        return Err(Error::Format(format!(
            "{}: expected {format} v{JSONL_VERSION}, found {} v{}",
            path.display(),
            header.format,
            header.version
        )));
    }
    let mut out = Vec::new();
    for (n, line) in lines.enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line)
                .map_err(|e| Error::Format(format!("{}:{}: {e}", path.display(), n + 2)))?,
        );
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::syndata::{generate_page, Domain, PageLayout};
    use proptest::prelude::*;

    fn bx(x1: f64, y1: f64, w: f64) -> BBox {
        BBox::new(x1, y1, x1 + w, y1 + w)
    }

    #[test]
    fn threshold_cases() {
        assert_eq!(adaptive_threshold(&[bx(0.0, 0.0, 10.0), bx(5.0, 0.0, 20.0)], 0.5).unwrap(), 7.5);
        assert_eq!(adaptive_threshold(&[bx(0.0, 0.0, 8.0)], 0.5).unwrap(), 4.0);
        let mixed = [bx(0.0, 0.0, 6.0), BBox::new(5.0, 0.0, 5.0, 3.0), BBox::new(9.0, 0.0, 2.0, 3.0), bx(1.0, 1.0, 12.0)];
        assert_eq!(adaptive_threshold(&mixed, 0.5).unwrap(), (6.0 + 12.0) / 2.0 * 0.5);
        assert!(matches!(adaptive_threshold(&[BBox::new(1.0, 0.0, 1.0, 1.0)], 0.5), Err(Error::Threshold(_))));
        assert!(matches!(adaptive_threshold(&[], 0.5), Err(Error::Threshold(_))));
        assert!(adaptive_threshold(&[bx(0.0, 0.0, 1.0)], 0.0).is_err());
    }

    #[test]
    fn hand_trace() {
        let items = vec![
            (bx(50.0, 0.0, 10.0), "c"),
            (bx(98.0, 20.0, 10.0), "b"),
            (bx(100.0, 0.0, 10.0), "a"),
        ];
        let g = group_columns(&items, 0.5).unwrap();
        assert_eq!(g.columns.len(), 2);
        assert_eq!(serialize_reading_order(&g), vec!["a", "b", "c"]);
        let one = group_columns(&[(bx(3.0, 3.0, 4.0), 1)], 0.5).unwrap();
        assert_eq!(one.columns, vec![vec![(bx(3.0, 3.0, 4.0), 1)]]);
        assert!(serialize_reading_order::<u8>(&ColumnGrouping { columns: vec![] }).is_empty());
    }

    #[test]
    fn strict_boundary_and_first_box_anchor() {
        // x_thr = 5: a gap of exactly 5 opens a new column
        let g = group_columns(&[(bx(100.0, 0.0, 10.0), 0), (bx(95.0, 9.0, 10.0), 1)], 0.5).unwrap();
        assert_eq!(g.columns.len(), 2);
        // 100 anchors; 96 joins; 92 is within 5 of 96 but not of the anchor
        let items = [(bx(100.0, 0.0, 10.0), 0), (bx(96.0, 20.0, 10.0), 1), (bx(92.0, 40.0, 10.0), 2)];
        let (g, log) = group_columns_logged(&items, 0.5).unwrap();
        assert_eq!(g.columns.len(), 2);
        assert_eq!(log.iter().map(|a| a.column).collect::<Vec<_>>(), vec![0, 0, 1]);
    }

    /// Returns the true label of whichever page box the crop was cut from.
    struct Oracle(Vec<(GrayImage, usize)>);

    impl CharRecognizer for Oracle {
        fn input_size(&self) -> usize {
            16
        }
        fn recognize_char(&self, crop: &GrayImage) -> Result<Option<usize>> {
            Ok(self.0.iter().find(|(img, _)| img == crop).map(|(_, c)| *c))
        }
    }

    #[test]
    fn oracle_recognizer_reads_canonical_order() {
        let layout = PageLayout::fitted(3, 4, 16, 3);
        let cats: Vec<usize> = (0..11).map(|i| i * 5).collect();
        let page = generate_page(&layout, &cats, Domain::Rubbing, 0.2, 8).unwrap();
        let oracle = Oracle(
            page.chars
                .iter()
                .map(|(b, c)| (page.image.crop(b.x1 as usize, b.y1 as usize, b.x2 as usize, b.y2 as usize), *c))
                .collect(),
        );
        let exec = Executor::new(2);
        let t = transcribe_page(&page.image, &page.boxes(), &oracle, 0.5, &exec).unwrap();
        assert_eq!(t.flat_text, cats);
        assert_eq!(t.columns.len(), 3);
        assert!(t.warnings.is_empty());

        let mut shuffled = page.boxes();
        shuffled.reverse();
        shuffled.swap(0, 4);
        let t2 = transcribe_page(&page.image, &shuffled, &oracle, 0.5, &exec).unwrap();
        assert_eq!(t2.flat_text, t.flat_text);
        assert_eq!(t2.columns, t.columns);
    }

    #[test]
    fn empty_and_clamped_boxes() {
        struct Const;
        impl CharRecognizer for Const {
            fn input_size(&self) -> usize {
                8
            }
            fn recognize_char(&self, _: &GrayImage) -> Result<Option<usize>> {
                Ok(Some(7))
            }
        }
        let img = GrayImage::new(20, 20, 0.5);
        let exec = Executor::sequential();
        let t = transcribe_page(&img, &[], &Const, 0.5, &exec).unwrap();
        assert!(t.flat_text.is_empty() && t.columns.is_empty());
        let t = transcribe_page(&img, &[BBox::new(-3.0, 2.0, 10.0, 30.0), BBox::new(40.0, 0.0, 50.0, 5.0)], &Const, 0.5, &exec).unwrap();
        assert_eq!(t.warnings.len(), 3);
        assert_eq!(t.flat_text, vec![7]);
        assert_eq!(t.per_box[1].prediction, None);
    }

    #[test]
    fn jsonl_round_trip_and_header_check() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("boxes.jsonl");
        let recs = vec![
            BoxRecord { page_id: "p0".into(), x1: 1.0, y1: 2.0, x2: 3.0, y2: 4.0, score: Some(0.5), category: None },
            BoxRecord { page_id: "p1".into(), x1: 0.0, y1: 0.0, x2: 9.0, y2: 9.0, score: None, category: Some(3) },
        ];
        write_jsonl(&path, BOXES_FORMAT, &recs).unwrap();
        assert_eq!(read_jsonl::<BoxRecord>(&path, BOXES_FORMAT).unwrap(), recs);
        assert!(matches!(read_jsonl::<BoxRecord>(&path, TRANSCRIPTION_FORMAT), Err(Error::Format(_))));
        std::fs::write(&path, "").unwrap();
        assert!(matches!(read_jsonl::<BoxRecord>(&path, BOXES_FORMAT), Err(Error::Format(_))));
    }

    fn arb_boxes() -> impl Strategy<Value = Vec<(BBox, usize)>> {
        proptest::collection::vec((0u32..200, 0u32..200, 1u32..30, 1u32..30), 1..12).prop_map(|v| {
            v.into_iter()
                .enumerate()
                .map(|(i, (x, y, w, h))| (BBox::new(x as f64, y as f64, (x + w) as f64, (y + h) as f64), i))
                .collect()
        })
    }

    proptest! {
        #[test]
        fn grouping_invariants(items in arb_boxes(), rot in 0usize..12) {
            let (g, log) = group_columns_logged(&items, 0.5).unwrap();
            let thr = adaptive_threshold(&items.iter().map(|i| i.0).collect::<Vec<_>>(), 0.5).unwrap();
            let mut ids = serialize_reading_order(&g);
            ids.sort();
            prop_assert_eq!(ids, (0..items.len()).collect::<Vec<_>>());
            for a in &log {
                prop_assert!((items[a.index].0.x1 - a.anchor_x1).abs() < thr);
            }
            for c in &g.columns {
                prop_assert!(c.windows(2).all(|w| w[0].0.y1 <= w[1].0.y1));
            }
            prop_assert!(g.columns.windows(2).all(|w| w[0][0].0.x1 >= w[1][0].0.x1));
            let mut rotated = items.clone();
            let k = rot % items.len();
            rotated.rotate_left(k);
            rotated.reverse();
            let g2 = group_columns(&rotated, 0.5).unwrap();
            let key = |g: &ColumnGrouping<usize>| -> Vec<Vec<(u64, u64, u64, u64)>> {
                g.columns.iter().map(|c| c.iter().map(|(b, _)| (b.x1.to_bits(), b.y1.to_bits(), b.x2.to_bits(), b.y2.to_bits())).collect()).collect()
            };
            prop_assert_eq!(key(&g), key(&g2));
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(500))]
        #[test]
        fn generated_pages_round_trip(cols in 1usize..6, rows in 1usize..7, glyph in 8usize..33, jit in 0usize..8, seed in any::<u64>(), missing in 0usize..6) {
            let jitter = jit.min((glyph - 1) / 4);
            let n = (cols * rows).saturating_sub(missing.min(rows - 1)).max(1);
            let layout = PageLayout::fitted(cols, rows, glyph, jitter);
            let cats: Vec<usize> = (0..n).collect();
            let page = generate_page(&layout, &cats, Domain::Tracing, 0.0, seed).unwrap();
            prop_assert!(page.chars.iter().all(|(b, _)| b.is_valid() && b.x2 <= layout.page_width as f64 && b.y2 <= layout.page_height as f64));
            let g = group_columns(&page.chars, 0.5).unwrap();
            prop_assert_eq!(serialize_reading_order(&g), cats);
        }
    }
}
