//! Expert-activation counts per adapter and category, their CSV export, and
//! utilization summaries.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Recognizer;
use crate::parallel::Executor;
use crate::raster::GrayImage;

/// Selection counts of one adapter: `counts[expert][category]`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActivationMatrix {
    pub adapter: usize,
    pub layer: usize,
    pub top_k: usize,
    pub counts: Vec<Vec<u64>>,
    /// Samples seen per category.
    pub samples: Vec<u64>,
}

impl ActivationMatrix {
    pub fn new(adapter: usize, layer: usize, top_k: usize, experts: usize, categories: usize) -> Self {
        ActivationMatrix {
            adapter,
            layer,
            top_k,
            counts: vec![vec![0; categories]; experts],
            samples: vec![0; categories],
        }
    }

    pub fn num_experts(&self) -> usize {
        self.counts.len()
    }

    pub fn num_categories(&self) -> usize {
        self.samples.len()
    }

    /// Times each expert was selected, over all categories.
    pub fn expert_totals(&self) -> Vec<u64> {
        self.counts.iter().map(|row| row.iter().sum()).collect()
    }

    /// `counts / samples` per category (0 for unseen categories).
    pub fn normalized(&self) -> Vec<Vec<f64>> {
        self.counts
            .iter()
            .map(|row| {
                row.iter()
                    .zip(&self.samples)
                    .map(|(&c, &n)| if n == 0 { 0.0 } else { c as f64 / n as f64 })
                    .collect()
            })
            .collect()
    }
}

/// Routes every `(image, category)` through the encoder and tallies the
/// selected experts. Parameters are only read.
pub fn record_activations(
    model: &Recognizer,
    samples: &[(&GrayImage, usize)],
    exec: &Executor,
) -> Result<Vec<ActivationMatrix>> {
    let cfg = &model.encoder;
    let categories = model.decoder.num_categories;
    let mut mats: Vec<ActivationMatrix> = cfg
        .adapter_layers
        .iter()
        .enumerate()
        .map(|(a, &layer)| ActivationMatrix::new(a, layer, cfg.top_k, cfg.num_experts, categories))
        .collect();
    if let Some(&(_, c)) = samples.iter().find(|(_, c)| *c >= categories) {
        return Err(Error::Parameter(format!("category {c} out of range {categories}")));
    }
    let routes = exec.map(samples, |(img, _)| model.encode(img, true).map(|(_, r)| r));
    for ((_, cat), routing) in samples.iter().zip(routes) {
        for rec in routing? {
            let m = mats
                .get_mut(rec.adapter_index)
                .ok_or_else(|| Error::Internal(format!("routing for unknown adapter {}", rec.adapter_index)))?;
            m.samples[*cat] += 1;
            for &e in &rec.selected {
                m.counts[e][*cat] += 1;
            }
        }
    }
    Ok(mats)
}

pub const HEATMAP_FORMAT: &str = "laddermoe-activations";
const HEATMAP_VERSION: u32 = 1;

fn write_grid(path: &Path, m: &ActivationMatrix, kind: &str, cells: &[Vec<String>]) -> Result<()> {
    let io = |e: csv::Error| Error::io(path, std::io::Error::other(e.to_string()));
    let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    use std::io::Write;
    writeln!(
        file,
        "# format={HEATMAP_FORMAT} version={HEATMAP_VERSION} adapter={} layer={} top_k={} kind={kind}",
        m.adapter, m.layer, m.top_k
    )
    .map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(file);
    let header: Vec<String> = std::iter::once("expert".to_string())
        .chain((0..m.num_categories()).map(|c| format!("c{c}")))
        .collect();
    w.write_record(&header).map_err(io)?;
    for (e, row) in cells.iter().enumerate() {
        w.write_record(std::iter::once(e.to_string()).chain(row.iter().cloned()))
            .map_err(io)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Writes `adapter_{a}_counts.csv` and `adapter_{a}_normalized.csv` per
/// matrix: experts as rows, categories as columns.
pub fn export_heatmap_csv(mats: &[ActivationMatrix], dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut paths = Vec::new();
    for m in mats {
        let raw: Vec<Vec<String>> = m.counts.iter().map(|r| r.iter().map(u64::to_string).collect()).collect();
        let norm: Vec<Vec<String>> = m
            .normalized()
            .iter()
            .map(|r| r.iter().map(|v| format!("{v:?}")).collect())
            .collect();
        for (kind, cells) in [("counts", raw), ("normalized", norm)] {
            let path = dir.join(format!("adapter_{}_{kind}.csv", m.adapter));
            write_grid(&path, m, kind, &cells)?;
            paths.push(path);
        }
    }
    Ok(paths)
}

/// Reads a grid written by [`export_heatmap_csv`] back as `[expert][category]`.
pub fn read_heatmap_csv(path: &Path) -> Result<Vec<Vec<f64>>> {
    let fmt = |msg: String| Error::Format(format!("{}: {msg}", path.display()));
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let first = text.lines().next().unwrap_or_default();
    if !first.starts_with(&format!("# format={HEATMAP_FORMAT} version={HEATMAP_VERSION}")) {
        return Err(fmt("missing format header".into()));
    }
    let mut r = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_reader(text.as_bytes());
    let width = r.headers().map_err(|e| fmt(e.to_string()))?.len();
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| fmt(e.to_string()))?;
        if rec.len() != width {
            return Err(fmt(format!("row has {} fields, header has {width}", rec.len())));
        }
        rows.push(
            rec.iter()
                .skip(1)
                .map(|v| v.parse::<f64>().map_err(|e| fmt(format!("{v}: {e}"))))
                .collect::<Result<Vec<f64>>>()?,
        );
    }
    Ok(rows)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdapterUtilization {
    pub adapter: usize,
    pub layer: usize,
    /// Fraction of experts selected at least once.
    pub utilization: f64,
    /// Natural-log entropy of the marginal expert distribution.
    pub entropy: f64,
    /// Five most selected experts, most used first (ties by index).
    pub top: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UtilizationSummary {
    pub adapters: Vec<AdapterUtilization>,
    /// `(a, b, |top(a) ∩ top(b)|)` for every adapter pair `a < b`.
    pub top_overlap: Vec<(usize, usize, usize)>,
}

pub const TOP_EXPERTS: usize = 5;

pub fn expert_utilization_summary(mats: &[ActivationMatrix]) -> UtilizationSummary {
    let adapters: Vec<AdapterUtilization> = mats
        .iter()
        .map(|m| {
            let totals = m.expert_totals();
            let sum: u64 = totals.iter().sum();
            let used = totals.iter().filter(|&&t| t > 0).count();
            let entropy = if sum == 0 {
                0.0
            } else {
                -totals
                    .iter()
                    .filter(|&&t| t > 0)
                    .map(|&t| {
                        let p = t as f64 / sum as f64;
                        p * p.ln()
                    })
                    .sum::<f64>()
            };
            let mut order: Vec<usize> = (0..totals.len()).collect();
            order.sort_by(|&a, &b| totals[b].cmp(&totals[a]).then(a.cmp(&b)));
            order.truncate(TOP_EXPERTS);
            AdapterUtilization {
                adapter: m.adapter,
                layer: m.layer,
                utilization: if totals.is_empty() { 0.0 } else { used as f64 / totals.len() as f64 },
                entropy,
                top: order,
            }
        })
        .collect();
    let mut top_overlap = Vec::new();
    for a in 0..adapters.len() {
        for b in a + 1..adapters.len() {
            let n = adapters[a].top.iter().filter(|e| adapters[b].top.contains(e)).count();
            top_overlap.push((adapters[a].adapter, adapters[b].adapter, n));
        }
    }
    UtilizationSummary { adapters, top_overlap }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{DecoderConfig, EncoderConfig};
    use proptest::prelude::*;

    fn model() -> Recognizer {
        let enc = EncoderConfig {
            image_size: 8,
            patch_size: 4,
            embed_dim: 8,
            depth: 4,
            heads: 2,
            mlp_ratio: 2,
            adapter_layers: vec![0, 1, 2, 3],
            num_experts: 9,
            top_k: 5,
            expert_bottleneck: 2,
        };
        let dec = DecoderConfig {
            num_categories: 4,
            heads: 2,
            ..Default::default()
        };
        Recognizer::new(enc, dec, 2).unwrap()
    }

    #[test]
    fn counts_conserve_and_repeat() {
        let m = model();
        let before = m.params.clone();
        let imgs: Vec<GrayImage> = (0..7)
            .map(|i| GrayImage::from_pixels(8, 8, (0..64).map(|p| ((p * (i + 3)) % 17) as f64 / 17.0).collect()).unwrap())
            .collect();
        let one = record_activations(&m, &[(&imgs[0], 2)], &Executor::sequential()).unwrap();
        assert_eq!(one.len(), 4);
        assert!(one.iter().all(|a| a.expert_totals().iter().sum::<u64>() == 5));
        let samples: Vec<(&GrayImage, usize)> = imgs.iter().enumerate().map(|(i, im)| (im, i % 3)).collect();
        let mats = record_activations(&m, &samples, &Executor::new(3)).unwrap();
        for a in &mats {
            for c in 0..4 {
                let col: u64 = a.counts.iter().map(|r| r[c]).sum();
                assert_eq!(col, 5 * a.samples[c]);
            }
        }
        assert_eq!(mats, record_activations(&m, &samples, &Executor::sequential()).unwrap());
        assert!(m.params.bitwise_eq(&before));
    }

    #[test]
    fn csv_round_trip_and_empty() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = ActivationMatrix::new(1, 4, 2, 3, 2);
        m.counts = vec![vec![3, 0], vec![1, 2], vec![0, 2]];
        m.samples = vec![2, 2];
        let paths = export_heatmap_csv(&[m.clone()], dir.path()).unwrap();
        let raw = read_heatmap_csv(&paths[0]).unwrap();
        let back: Vec<Vec<u64>> = raw.iter().map(|r| r.iter().map(|&v| v as u64).collect()).collect();
        assert_eq!(back, m.counts);
        assert_eq!(read_heatmap_csv(&paths[1]).unwrap(), m.normalized());

        let empty = ActivationMatrix::new(0, 0, 1, 0, 0);
        let paths = export_heatmap_csv(&[empty], &dir.path().join("e")).unwrap();
        let text = std::fs::read_to_string(&paths[0]).unwrap();
        assert_eq!(text.lines().count(), 2);
        assert!(read_heatmap_csv(&paths[0]).unwrap().is_empty());
    }

    #[test]
    fn summary_fixtures() {
        let mut uniform = ActivationMatrix::new(0, 0, 1, 4, 1);
        uniform.counts = vec![vec![3]; 4];
        let mut single = ActivationMatrix::new(1, 1, 1, 4, 1);
        single.counts = vec![vec![0], vec![0], vec![7], vec![0]];
        let s = expert_utilization_summary(&[uniform, single]);
        assert!((s.adapters[0].entropy - 4f64.ln()).abs() < 1e-12);
        assert_eq!(s.adapters[0].utilization, 1.0);
        assert_eq!(s.adapters[1].entropy, 0.0);
        assert_eq!(s.adapters[1].utilization, 0.25);

        let build = |a: usize, hot: &[usize]| {
            let mut m = ActivationMatrix::new(a, a, 1, 12, 1);
            for (rank, &e) in hot.iter().enumerate() {
                m.counts[e][0] = 100 - rank as u64;
            }
            m
        };
        let s = expert_utilization_summary(&[build(0, &[0, 1, 2, 3, 4]), build(1, &[3, 4, 7, 8, 9])]);
        assert_eq!(s.top_overlap, vec![(0, 1, 2)]);
    }

    proptest! {
        #[test]
        fn normalized_within_k(k in 1usize..5, rows in proptest::collection::vec(proptest::collection::vec(0u64..20, 3), 0..6)) {
            let experts = 6;
            let mut m = ActivationMatrix::new(0, 0, k, experts, 3);
            for (c, picks) in rows.iter().enumerate() {
                let _ = c;
                for (cat, &n) in picks.iter().enumerate() {
                    m.samples[cat] += n;
                    for s in 0..n {
                        for j in 0..k {
                            m.counts[(s as usize + j) % experts][cat] += 1;
                        }
                    }
                }
            }
            for row in m.normalized() {
                for v in row {
                    prop_assert!((0.0..=k as f64).contains(&v));
                }
            }
        }
    }
}
