//! Builds the synthetic corpus (crops, pages, splits, frequency strata) and
//! stores it as PNG rasters plus a JSON-lines manifest.

use std::path::Path;

use rand::distributions::WeightedIndex;
use rand::prelude::Distribution;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::parallel::Executor;
use crate::raster::GrayImage;
use crate::seeds;
use crate::syndata::{
    filter_min_count, generate_page, render_glyph, sample_category_frequencies, split_chars, split_pages,
    stratify_head_mid_tail, BBox, NUM_PATTERNS, Domain, GlyphSample, HeadMidTail, PageLayout, PageSample, Split,
    SplitManifest,
};
use crate::training::LabeledImage;
use crate::transcribe::{read_jsonl, write_jsonl};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusConfig {
    pub num_categories: usize,
    pub zipf_s: f64,
    pub total_crops: usize,
    /// Categories need strictly more samples than this to be kept.
    pub min_count: usize,
    pub glyph_size: usize,
    /// Crop and page noise levels are drawn uniformly from `[0, max_noise]`.
    pub max_noise: f64,
    pub num_pages: usize,
    pub min_chars_per_page: usize,
    pub max_chars_per_page: usize,
    pub max_columns: usize,
    pub jitter: usize,
    /// Auxiliary categories, disjoint from the recognized ones, used only to
    /// pretrain the backbone. Zero pretrains on the training crops instead.
    pub pretrain_categories: usize,
    pub pretrain_per_category: usize,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            num_categories: 60,
            zipf_s: 1.0,
            total_crops: 3000,
            min_count: 10,
            glyph_size: 16,
            max_noise: 0.5,
            num_pages: 60,
            min_chars_per_page: 6,
            max_chars_per_page: 16,
            max_columns: 4,
            jitter: 3,
            pretrain_categories: 200,
            pretrain_per_category: 60,
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, allowed: &str, got: String| {
            Err(Error::Parameter(format!("{field} must be {allowed}, got {got}")))
        };
        if self.num_categories == 0 {
            return bad("num_categories", ">= 1", "0".into());
        }
        if self.total_crops < self.num_categories {
            return bad("total_crops", ">= num_categories", self.total_crops.to_string());
        }
        if !(self.zipf_s.is_finite() && self.zipf_s >= 0.0) {
            return bad("zipf_s", "finite and >= 0", self.zipf_s.to_string());
        }
        if !(0.0..=1.0).contains(&self.max_noise) {
            return bad("max_noise", "in [0, 1]", self.max_noise.to_string());
        }
        if self.glyph_size < 4 {
            return bad("glyph_size", ">= 4", self.glyph_size.to_string());
        }
        if 4 * self.jitter >= self.glyph_size {
            return bad("jitter", "below glyph_size / 4", self.jitter.to_string());
        }
        if self.min_chars_per_page == 0 || self.min_chars_per_page > self.max_chars_per_page {
            return bad(
                "min_chars_per_page",
                "in [1, max_chars_per_page]",
                self.min_chars_per_page.to_string(),
            );
        }
        if self.max_columns == 0 {
            return bad("max_columns", ">= 1", "0".into());
        }
        if self.num_categories + self.pretrain_categories > NUM_PATTERNS as usize {
            return bad(
                "pretrain_categories",
                &format!("at most {}", (NUM_PATTERNS as usize).saturating_sub(self.num_categories)),
                self.pretrain_categories.to_string(),
            );
        }
        if self.pretrain_categories > 0 && self.pretrain_per_category == 0 {
            return bad("pretrain_per_category", ">= 1", "0".into());
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Crop {
    pub glyph: GlyphSample,
    pub noise: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub config: CorpusConfig,
    pub seed: u64,
    /// Generated count per category, before filtering.
    pub counts: Vec<usize>,
    pub retained: Vec<usize>,
    pub strata: HeadMidTail,
    pub crops: Vec<Crop>,
    pub crop_split: SplitManifest,
    pub pages: Vec<PageSample>,
    pub page_split: SplitManifest,
}

impl Corpus {
    pub fn crop_indices(&self, split: Split) -> Vec<usize> {
        self.crop_split.indices(split)
    }

    pub fn labeled_crops(&self, split: Split) -> Vec<LabeledImage> {
        self.crop_indices(split)
            .into_iter()
            .map(|i| LabeledImage {
                image: self.crops[i].glyph.image.clone(),
                target: vec![self.crops[i].glyph.category],
            })
            .collect()
    }

    pub fn pages_in(&self, split: Split) -> Vec<&PageSample> {
        self.page_split.indices(split).into_iter().map(|i| &self.pages[i]).collect()
    }
}

struct CropPlan {
    category: usize,
    domain: Domain,
    noise: f64,
    seed: u64,
}

struct PagePlan {
    categories: Vec<usize>,
    columns: usize,
    domain: Domain,
    noise: f64,
    seed: u64,
}

/// Generates the whole corpus from `seed`. Rasters are quantized to 8 bits so
/// the in-memory corpus equals what [`write_corpus`] stores.
pub fn build_corpus(cfg: &CorpusConfig, seed: u64, exec: &Executor) -> Result<Corpus> {
    cfg.validate()?;
    let counts = sample_category_frequencies(cfg.num_categories, cfg.zipf_s, cfg.total_crops)?;
    let retained = filter_min_count(&counts, cfg.min_count);
    if retained.is_empty() {
        return Err(Error::Data(format!(
            "no category has more than {} samples",
            cfg.min_count
        )));
    }
    let strata = stratify_head_mid_tail(&retained.iter().map(|&c| (c, counts[c])).collect::<Vec<_>>());

    let mut rng = seeds::stream(seed, "corpus.crops");
    let mut plans = Vec::new();
    for &c in &retained {
        for j in 0..counts[c] {
            plans.push(CropPlan {
                category: c,
                domain: Domain::ALL[rng.gen_range(0..3)],
                noise: rng.gen_range(0.0..=cfg.max_noise),
                seed: seeds::derive_seed(seed, &format!("crop.{c}.{j}")),
            });
        }
    }
    let crops = exec
        .map(&plans, |p| {
            let mut glyph = render_glyph(p.category, p.domain, p.noise, p.seed, cfg.glyph_size)?;
            glyph.image = glyph.image.quantized();
            Ok(Crop { glyph, noise: p.noise })
        })
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let crop_split = split_chars(&plans.iter().map(|p| p.category).collect::<Vec<_>>(), seed)?;

    let mut rng = seeds::stream(seed, "corpus.pages");
    let weights = WeightedIndex::new(retained.iter().map(|&c| counts[c] as f64))
        .map_err(|e| Error::Internal(e.to_string()))?;
    let page_plans: Vec<PagePlan> = (0..cfg.num_pages)
        .map(|p| {
            let n = rng.gen_range(cfg.min_chars_per_page..=cfg.max_chars_per_page);
            PagePlan {
                categories: (0..n).map(|_| retained[weights.sample(&mut rng)]).collect(),
                columns: rng.gen_range(1..=cfg.max_columns.min(n)),
                domain: Domain::ALL[p % 3],
                noise: rng.gen_range(0.0..=cfg.max_noise),
                seed: seeds::derive_seed(seed, &format!("page.{p}")),
            }
        })
        .collect();
    let pages = exec
        .map(&page_plans, |p| {
            let rows = p.categories.len().div_ceil(p.columns);
            let layout = PageLayout::fitted(p.columns, rows, cfg.glyph_size, cfg.jitter);
            let mut page = generate_page(&layout, &p.categories, p.domain, p.noise, p.seed)?;
            page.image = page.image.quantized();
            Ok(page)
        })
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let page_split = if pages.is_empty() {
        SplitManifest {
            kind: crate::syndata::SplitKind::Page,
            seed,
            assignments: Vec::new(),
        }
    } else {
        split_pages(&pages.iter().map(|p| p.domain).collect::<Vec<_>>(), seed)?
    };
    Ok(Corpus {
        config: cfg.clone(),
        seed,
        counts,
        retained,
        strata,
        crops,
        crop_split,
        pages,
        page_split,
    })
}

/// Crops of the auxiliary pretraining categories, relabeled `0..P`. Glyph
/// ids start after the recognized categories, so no stroke pattern is shared
/// with them.
pub fn build_pretrain_pool(cfg: &CorpusConfig, seed: u64, exec: &Executor) -> Result<Vec<LabeledImage>> {
    cfg.validate()?;
    let mut rng = seeds::stream(seed, "pretrain.pool");
    let mut plans = Vec::with_capacity(cfg.pretrain_categories * cfg.pretrain_per_category);
    for label in 0..cfg.pretrain_categories {
        let category = cfg.num_categories + label;
        for j in 0..cfg.pretrain_per_category {
            plans.push((
                label,
                CropPlan {
                    category,
                    domain: Domain::ALL[rng.gen_range(0..3)],
                    noise: rng.gen_range(0.0..=cfg.max_noise),
                    seed: seeds::derive_seed(seed, &format!("pool.{category}.{j}")),
                },
            ));
        }
    }
    exec.map(&plans, |(label, p)| {
        let glyph = render_glyph(p.category, p.domain, p.noise, p.seed, cfg.glyph_size)?;
        Ok(LabeledImage {
            image: glyph.image.quantized(),
            target: vec![*label],
        })
    })
    .into_iter()
    .collect()
}

pub fn crop_id(index: usize) -> String {
    format!("crop_{index:06}")
}

pub fn page_id(index: usize) -> String {
    format!("page_{index:05}")
}

pub const MANIFEST_FORMAT: &str = "laddermoe-corpus";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RecordKind {
    Crop,
    Page,
}

/// One manifest line; crops carry `category`, pages `categories` and `boxes`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestRecord {
    pub id: String,
    pub path: String,
    pub kind: RecordKind,
    pub domain: Domain,
    pub split: Split,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub noise: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub category: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub categories: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub boxes: Option<Vec<BBox>>,
}

/// Corpus-level facts stored next to the manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusInfo {
    pub format: String,
    pub version: u32,
    pub seed: u64,
    pub config: CorpusConfig,
    pub counts: Vec<usize>,
    pub retained: Vec<usize>,
    pub strata: HeadMidTail,
}

pub const INFO_FORMAT: &str = "laddermoe-corpus-info";

/// Writes `crops/*.png`, `pages/*.png`, `manifest.jsonl` and `corpus.json`.
pub fn write_corpus(corpus: &Corpus, dir: &Path, exec: &Executor) -> Result<()> {
    for sub in ["crops", "pages"] {
        let d = dir.join(sub);
        std::fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    let mut records = Vec::with_capacity(corpus.crops.len() + corpus.pages.len());
    let mut images: Vec<(String, &GrayImage)> = Vec::new();
    for (i, c) in corpus.crops.iter().enumerate() {
        let path = format!("crops/crop_{i:06}.png");
        images.push((path.clone(), &c.glyph.image));
        records.push(ManifestRecord {
            id: crop_id(i),
            path,
            kind: RecordKind::Crop,
            domain: c.glyph.domain,
            split: corpus.crop_split.assignments[i],
            noise: Some(c.noise),
            category: Some(c.glyph.category),
            categories: None,
            boxes: None,
        });
    }
    for (i, p) in corpus.pages.iter().enumerate() {
        let path = format!("pages/page_{i:05}.png");
        images.push((path.clone(), &p.image));
        records.push(ManifestRecord {
            id: page_id(i),
            path,
            kind: RecordKind::Page,
            domain: p.domain,
            split: corpus.page_split.assignments[i],
            noise: None,
            category: None,
            categories: Some(p.labels()),
            boxes: Some(p.boxes()),
        });
    }
    exec.map(&images, |(path, img)| img.save_png(&dir.join(path)))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    write_jsonl(&dir.join("manifest.jsonl"), MANIFEST_FORMAT, &records)?;
    let info = CorpusInfo {
        format: INFO_FORMAT.into(),
        version: 1,
        seed: corpus.seed,
        config: corpus.config.clone(),
        counts: corpus.counts.clone(),
        retained: corpus.retained.clone(),
        strata: corpus.strata.clone(),
    };
    let json = serde_json::to_string_pretty(&info).map_err(|e| Error::Internal(e.to_string()))?;
    let path = dir.join("corpus.json");
    std::fs::write(&path, json).map_err(|e| Error::io(&path, e))
}

/// Reads a corpus written by [`write_corpus`].
pub fn load_corpus(dir: &Path, exec: &Executor) -> Result<Corpus> {
    let info_path = dir.join("corpus.json");
    let text = std::fs::read_to_string(&info_path).map_err(|e| Error::io(&info_path, e))?;
    let info: CorpusInfo = serde_json::from_str(&text)
        .map_err(|e| Error::Format(format!("{}: {e}", info_path.display())))?;
    if info.format != INFO_FORMAT || info.version != 1 {
        return Err(Error::Format(format!(
            "{}: expected {INFO_FORMAT} v1",
            info_path.display()
        )));
    }
    let records: Vec<ManifestRecord> = read_jsonl(&dir.join("manifest.jsonl"), MANIFEST_FORMAT)?;
    let images = exec
        .map(&records, |r| GrayImage::load_png(&dir.join(&r.path)))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let mut crops = Vec::new();
    let mut crop_assign = Vec::new();
    let mut pages = Vec::new();
    let mut page_assign = Vec::new();
    for (r, image) in records.into_iter().zip(images) {
        match r.kind {
            RecordKind::Crop => {
                let category = r
                    .category
                    .ok_or_else(|| Error::Format(format!("crop {} has no category", r.id)))?;
                crops.push(Crop {
                    glyph: GlyphSample {
                        image,
                        category,
                        domain: r.domain,
                    },
                    noise: r.noise.unwrap_or(0.0),
                });
                crop_assign.push(r.split);
            }
            RecordKind::Page => {
                let (cats, boxes) = r
                    .categories
                    .zip(r.boxes)
                    .ok_or_else(|| Error::Format(format!("page {} lacks categories or boxes", r.id)))?;
                if cats.len() != boxes.len() {
                    return Err(Error::Format(format!("page {} has mismatched boxes", r.id)));
                }
                pages.push(PageSample {
                    image,
                    chars: boxes.into_iter().zip(cats).collect(),
                    domain: r.domain,
                });
                page_assign.push(r.split);
            }
        }
    }
    Ok(Corpus {
        config: info.config,
        seed: info.seed,
        counts: info.counts,
        retained: info.retained,
        strata: info.strata,
        crops,
        crop_split: SplitManifest {
            kind: crate::syndata::SplitKind::Char,
            seed: info.seed,
            assignments: crop_assign,
        },
        pages,
        page_split: SplitManifest {
            kind: crate::syndata::SplitKind::Page,
            seed: info.seed,
            assignments: page_assign,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> CorpusConfig {
        CorpusConfig {
            num_categories: 8,
            total_crops: 200,
            num_pages: 9,
            max_chars_per_page: 8,
            ..Default::default()
        }
    }

    #[test]
    fn builds_consistent_corpus() {
        let exec = Executor::new(2);
        let c = build_corpus(&small(), 5, &exec).unwrap();
        assert_eq!(c.counts.iter().sum::<usize>(), 200);
        let kept: usize = c.retained.iter().map(|&k| c.counts[k]).sum();
        assert_eq!(c.crops.len(), kept);
        assert!(c.crops.iter().all(|x| c.retained.contains(&x.glyph.category)));
        assert_eq!(c.pages.len(), 9);
        assert_eq!(c.page_split.counts().iter().sum::<usize>(), 9);
        assert_eq!(c, build_corpus(&small(), 5, &Executor::sequential()).unwrap());
    }

    #[test]
    fn disk_round_trip() {
        let exec = Executor::new(2);
        let c = build_corpus(&small(), 1, &exec).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_corpus(&c, dir.path(), &exec).unwrap();
        let back = load_corpus(dir.path(), &exec).unwrap();
        assert_eq!(back.crops, c.crops);
        assert_eq!(back.crop_split, c.crop_split);
        assert_eq!(back.pages, c.pages);
        assert_eq!(back.page_split, c.page_split);
        assert_eq!(back.strata, c.strata);
    }

    #[test]
    fn rejects_bad_config() {
        let mut cfg = small();
        cfg.jitter = 4;
        assert!(build_corpus(&cfg, 0, &Executor::sequential()).is_err());
        let cfg = CorpusConfig {
            total_crops: 8,
            ..small()
        };
        assert!(matches!(build_corpus(&cfg, 0, &Executor::sequential()), Err(Error::Data(_))));
    }
}
