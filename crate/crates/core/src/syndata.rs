//! Synthetic long-tailed glyph and page generator, plus the filtering,
//! splitting and head/mid/tail stratification procedures applied to it.

use std::collections::BTreeMap;
use std::fmt;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::GrayImage;
use crate::seeds;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Color,
    Rubbing,
    Tracing,
}

impl Domain {
    pub const ALL: [Domain; 3] = [Domain::Color, Domain::Rubbing, Domain::Tracing];

    pub fn name(self) -> &'static str {
        match self {
            Domain::Color => "color",
            Domain::Rubbing => "rubbing",
            Domain::Tracing => "tracing",
        }
    }
}

impl fmt::Display for Domain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Axis-aligned box in pixel coordinates, `(x1, y1)` top-left.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        BBox { x1, y1, x2, y2 }
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn is_valid(&self) -> bool {
        self.x2 > self.x1 && self.y2 > self.y1
    }

    pub fn area(&self) -> f64 {
        self.width().max(0.0) * self.height().max(0.0)
    }

    pub fn iou(&self, other: &BBox) -> f64 {
        let w = (self.x2.min(other.x2) - self.x1.max(other.x1)).max(0.0);
        let h = (self.y2.min(other.y2) - self.y1.max(other.y1)).max(0.0);
        let inter = w * h;
        let union = self.area() + other.area() - inter;
        if union > 0.0 {
            inter / union
        } else {
            0.0
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GlyphSample {
    pub image: GrayImage,
    pub category: usize,
    pub domain: Domain,
}

/// A page raster with its characters in canonical reading order.
#[derive(Clone, Debug, PartialEq)]
pub struct PageSample {
    pub image: GrayImage,
    pub chars: Vec<(BBox, usize)>,
    pub domain: Domain,
}

impl PageSample {
    pub fn boxes(&self) -> Vec<BBox> {
        self.chars.iter().map(|(b, _)| *b).collect()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.chars.iter().map(|(_, c)| *c).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitKind {
    /// 8:1:1, stratified by domain.
    Page,
    /// 4:1:5, stratified by category.
    Char,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub kind: SplitKind,
    pub seed: u64,
    /// Assignment of sample `i`.
    pub assignments: Vec<Split>,
}

impl SplitManifest {
    pub fn indices(&self, split: Split) -> Vec<usize> {
        self.assignments
            .iter()
            .enumerate()
            .filter(|(_, &s)| s == split)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn counts(&self) -> [usize; 3] {
        let mut c = [0; 3];
        for s in &self.assignments {
            c[*s as usize] += 1;
        }
        c
    }
}

/// Apportions `total` across `weights` by floor of the exact quota plus one
/// extra unit for each of the largest remainders (lower index wins ties).
pub fn largest_remainder(total: usize, weights: &[f64]) -> Result<Vec<usize>> {
    let sum: f64 = weights.iter().sum();
    if weights.is_empty() || weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) || sum <= 0.0 {
        return Err(Error::Parameter("weights must be finite, non-negative, not all zero".into()));
    }
    let quotas: Vec<f64> = weights.iter().map(|w| total as f64 * w / sum).collect();
    let mut counts: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = quotas[a] - quotas[a].floor();
        let rb = quotas[b] - quotas[b].floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    for &i in order.iter().take(total.saturating_sub(assigned)) {
        counts[i] += 1;
    }
    Ok(counts)
}

/// Same apportionment for small integer ratios, computed exactly.
fn ratio_split(total: usize, ratios: [usize; 3]) -> [usize; 3] {
    let sum: usize = ratios.iter().sum();
    let mut counts = [0; 3];
    let mut rems = [0; 3];
    for i in 0..3 {
        counts[i] = total * ratios[i] / sum;
        rems[i] = total * ratios[i] % sum;
    }
    let mut order = [0, 1, 2];
    order.sort_by(|&a, &b| rems[b].cmp(&rems[a]).then(a.cmp(&b)));
    let left = total - counts.iter().sum::<usize>();
    for &i in order.iter().take(left) {
        counts[i] += 1;
    }
    counts
}

/// Per-category counts proportional to `rank^-s` (rank 1 = category 0),
/// summing to `total` exactly and non-increasing in rank.
pub fn sample_category_frequencies(num_categories: usize, zipf_s: f64, total: usize) -> Result<Vec<usize>> {
    if num_categories == 0 {
        return Err(Error::Parameter("num_categories must be at least 1".into()));
    }
    if total < num_categories {
        return Err(Error::Parameter(format!(
            "total {total} must be at least num_categories {num_categories}"
        )));
    }
    if !(zipf_s.is_finite() && zipf_s >= 0.0) {
        return Err(Error::Parameter(format!("zipf_s must be finite and >= 0, got {zipf_s}")));
    }
    let weights: Vec<f64> = (1..=num_categories).map(|r| (r as f64).powf(-zipf_s)).collect();
    largest_remainder(total, &weights)
}

/// Categories with strictly more than `threshold` samples.
pub fn filter_min_count(counts: &[usize], threshold: usize) -> Vec<usize> {
    (0..counts.len()).filter(|&c| counts[c] > threshold).collect()
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadMidTail {
    pub head: Vec<usize>,
    pub mid: Vec<usize>,
    pub tail: Vec<usize>,
}

/// Frequency thirds: sorted by count descending then id, cut at `⌈C/3⌉` and
/// `2⌈C/3⌉`.
pub fn stratify_head_mid_tail(counts: &[(usize, usize)]) -> HeadMidTail {
    let mut sorted = counts.to_vec();
    sorted.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    let n = sorted.len();
    let cut = n.div_ceil(3);
    let ids: Vec<usize> = sorted.iter().map(|(c, _)| *c).collect();
    let a = cut.min(n);
    let b = (2 * cut).min(n);
    HeadMidTail {
        head: ids[..a].to_vec(),
        mid: ids[a..b].to_vec(),
        tail: ids[b..].to_vec(),
    }
}

/// Page split 8:1:1, shuffled and cut independently within each domain.
pub fn split_pages(domains: &[Domain], seed: u64) -> Result<SplitManifest> {
    if domains.is_empty() {
        return Err(Error::Data("cannot split an empty page set".into()));
    }
    let mut assignments = vec![Split::Train; domains.len()];
    for d in Domain::ALL {
        let mut idx: Vec<usize> = (0..domains.len()).filter(|&i| domains[i] == d).collect();
        idx.shuffle(&mut seeds::stream(seed, &format!("split.pages.{d}")));
        assign(&mut assignments, &idx, ratio_split(idx.len(), [8, 1, 1]));
    }
    Ok(SplitManifest {
        kind: SplitKind::Page,
        seed,
        assignments,
    })
}

/// Crop split 4:1:5 per category; each category keeps at least one training
/// and one test sample.
pub fn split_chars(categories: &[usize], seed: u64) -> Result<SplitManifest> {
    if categories.is_empty() {
        return Err(Error::Data("cannot split an empty crop set".into()));
    }
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &c) in categories.iter().enumerate() {
        groups.entry(c).or_default().push(i);
    }
    let mut assignments = vec![Split::Train; categories.len()];
    for (c, mut idx) in groups {
        if idx.len() < 2 {
            return Err(Error::Data(format!(
                "category {c} has {} sample(s); at least 2 are needed for train and test",
                idx.len()
            )));
        }
        idx.shuffle(&mut seeds::stream(seed, &format!("split.chars.{c}")));
        let mut counts = ratio_split(idx.len(), [4, 1, 5]);
        for need in [0, 2] {
            if counts[need] == 0 {
                let donor = if counts[1] > 0 { 1 } else { 2 - need };
                counts[donor] -= 1;
                counts[need] += 1;
            }
        }
        assign(&mut assignments, &idx, counts);
    }
    Ok(SplitManifest {
        kind: SplitKind::Char,
        seed,
        assignments,
    })
}

fn assign(assignments: &mut [Split], idx: &[usize], counts: [usize; 3]) {
    let mut it = idx.iter();
    for (split, n) in Split::ALL.into_iter().zip(counts) {
        for &i in it.by_ref().take(n) {
            assignments[i] = split;
        }
    }
}

const LATTICE: [f64; 3] = [0.2, 0.5, 0.8];
const NUM_SEGMENTS: usize = 20;
const STROKES_PER_GLYPH: usize = 4;
/// C(20, 4): number of distinct stroke sets.
pub const NUM_PATTERNS: u64 = 4845;

fn segment(i: usize) -> ((usize, usize), (usize, usize)) {
    match i {
        0..=5 => {
            let (row, col) = (i / 2, i % 2);
            ((col, row), (col + 1, row))
        }
        6..=11 => {
            let (col, row) = ((i - 6) / 2, (i - 6) % 2);
            ((col, row), (col, row + 1))
        }
        _ => {
            let cell = (i - 12) / 2;
            let (cx, cy) = (cell % 2, cell / 2);
            if i.is_multiple_of(2) {
                ((cx, cy), (cx + 1, cy + 1))
            } else {
                ((cx + 1, cy), (cx, cy + 1))
            }
        }
    }
}

fn binomial(n: u64, k: u64) -> u64 {
    if k > n {
        return 0;
    }
    (0..k).fold(1, |acc, i| acc * (n - i) / (i + 1))
}

/// The 4-of-20 stroke set of a category, by lexicographic unranking of a
/// category-keyed rank. Distinct for categories below [`NUM_PATTERNS`].
pub fn stroke_set(category: usize) -> [usize; STROKES_PER_GLYPH] {
    let mut rank = (category as u64 * 1009 + 17) % NUM_PATTERNS;
    let mut out = [0; STROKES_PER_GLYPH];
    let mut next = 0u64;
    for (slot, o) in out.iter_mut().enumerate() {
        let remaining = (STROKES_PER_GLYPH - slot - 1) as u64;
        loop {
            let block = binomial(NUM_SEGMENTS as u64 - next - 1, remaining);
            if rank < block {
                break;
            }
            rank -= block;
            next += 1;
        }
        *o = next as usize;
        next += 1;
    }
    out
}

fn point_segment_distance(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / len2).clamp(0.0, 1.0);
    let (qx, qy) = (a.0 + t * dx, a.1 + t * dy);
    ((p.0 - qx).powi(2) + (p.1 - qy).powi(2)).sqrt()
}

fn background(domain: Domain, width: usize, height: usize, rng: &mut ChaCha8Rng) -> GrayImage {
    match domain {
        Domain::Tracing => GrayImage::new(width, height, 1.0),
        Domain::Rubbing => GrayImage::new(width, height, 0.12),
        Domain::Color => {
            let (fx, fy) = (rng.gen_range(0.3..0.9), rng.gen_range(0.3..0.9));
            let (px, py) = (rng.gen_range(0.0..6.3), rng.gen_range(0.0..6.3));
            let mut img = GrayImage::new(width, height, 0.0);
            for y in 0..height {
                for x in 0..width {
                    let t = (x as f64 * fx + px).sin() * (y as f64 * fy + py).cos();
                    img.set(x, y, 0.62 + 0.12 * t);
                }
            }
            img
        }
    }
}

fn box_blur(img: &GrayImage) -> GrayImage {
    let (w, h) = (img.width, img.height);
    let mut out = GrayImage::new(w, h, 0.0);
    for y in 0..h {
        for x in 0..w {
            let mut sum = 0.0;
            let mut n = 0.0;
            for yy in y.saturating_sub(1)..(y + 2).min(h) {
                for xx in x.saturating_sub(1)..(x + 2).min(w) {
                    sum += img.get(xx, yy);
                    n += 1.0;
                }
            }
            out.set(x, y, sum / n);
        }
    }
    out
}

/// Renders one glyph crop of side `size`.
///
/// The stroke pattern depends on `category`; shift, scale, rotation and
/// stroke width depend on `(category, domain, seed)`. `noise_level` scales
/// additive noise, speckle and stroke erosion.
pub fn render_glyph(category: usize, domain: Domain, noise_level: f64, seed: u64, size: usize) -> Result<GlyphSample> {
    if !(0.0..=1.0).contains(&noise_level) {
        return Err(Error::Parameter(format!("noise_level must be in [0, 1], got {noise_level}")));
    }
    if size < 4 {
        return Err(Error::Parameter(format!("glyph size must be at least 4, got {size}")));
    }
    let mut rng = seeds::stream(seed, &format!("glyph.{category}.{domain}"));
    let shift = (rng.gen_range(-0.07..0.07), rng.gen_range(-0.07..0.07));
    let scale = rng.gen_range(0.85..1.08);
    let angle: f64 = rng.gen_range(-0.12..0.12);
    let thickness = rng.gen_range(0.065..0.095);
    let (sin, cos) = angle.sin_cos();
    let strokes: Vec<_> = stroke_set(category)
        .iter()
        .map(|&s| {
            let ((ax, ay), (bx, by)) = segment(s);
            ((LATTICE[ax], LATTICE[ay]), (LATTICE[bx], LATTICE[by]))
        })
        .collect();

    let mut ink = vec![0.0; size * size];
    for y in 0..size {
        for x in 0..size {
            let u = (x as f64 + 0.5) / size as f64 - 0.5 - shift.0;
            let v = (y as f64 + 0.5) / size as f64 - 0.5 - shift.1;
            let gx = (cos * u + sin * v) / scale + 0.5;
            let gy = (-sin * u + cos * v) / scale + 0.5;
            let d = strokes
                .iter()
                .map(|&(a, b)| point_segment_distance((gx, gy), a, b))
                .fold(f64::INFINITY, f64::min);
            if d < thickness {
                ink[y * size + x] = 1.0;
            }
        }
    }
    let erosion = 0.15 * noise_level;
    if erosion > 0.0 {
        for v in ink.iter_mut() {
            if *v > 0.0 && rng.gen::<f64>() < erosion {
                *v = 0.0;
            }
        }
    }

    let bg = background(domain, size, size, &mut rng);
    let mut img = GrayImage::new(size, size, 0.0);
    for y in 0..size {
        for x in 0..size {
            let k = ink[y * size + x];
            let b = bg.get(x, y);
            let v = match domain {
                Domain::Tracing => b * (1.0 - k),
                Domain::Rubbing => b + (0.88 - b) * k,
                Domain::Color => b * (1.0 - k) + 0.1 * k,
            };
            img.set(x, y, v);
        }
    }
    if domain == Domain::Color {
        img = box_blur(&img);
    }
    let speckle = match domain {
        Domain::Rubbing => 0.03 + 0.1 * noise_level,
        _ => 0.05 * noise_level,
    };
    let sigma = 0.2 * noise_level;
    let normal = Normal::new(0.0, sigma.max(f64::MIN_POSITIVE)).map_err(|e| Error::Internal(e.to_string()))?;
    for p in img.pixels.iter_mut() {
        if sigma > 0.0 {
            *p += normal.sample(&mut rng);
        }
        if speckle > 0.0 && rng.gen::<f64>() < speckle {
            *p = rng.gen();
        }
        *p = p.clamp(0.0, 1.0);
    }
    Ok(GlyphSample {
        image: img,
        category,
        domain,
    })
}

/// Page geometry. Columns are `glyph_size * 3 / 2` apart, rows
/// `glyph_size * 5 / 4`; each box is shifted by up to `jitter` pixels on each
/// axis, which must stay below `glyph_size / 4`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PageLayout {
    pub num_columns: usize,
    pub page_width: usize,
    pub page_height: usize,
    pub glyph_size: usize,
    pub jitter: usize,
}

impl PageLayout {
    fn margin(&self) -> usize {
        self.glyph_size / 2
    }

    fn pitch_x(&self) -> usize {
        self.glyph_size * 3 / 2
    }

    fn pitch_y(&self) -> usize {
        self.glyph_size * 5 / 4
    }

    /// Smallest page fitting `columns` columns of `rows` characters.
    pub fn fitted(columns: usize, rows: usize, glyph_size: usize, jitter: usize) -> Self {
        let mut l = PageLayout {
            num_columns: columns,
            page_width: 0,
            page_height: 0,
            glyph_size,
            jitter,
        };
        l.page_width = 2 * l.margin() + columns.saturating_sub(1) * l.pitch_x() + glyph_size;
        l.page_height = 2 * l.margin() + rows.saturating_sub(1) * l.pitch_y() + glyph_size;
        l
    }
}

/// Lays `categories` out in right-to-left columns, filled top to bottom,
/// `⌈n / num_columns⌉` characters per column. Returns the page with boxes in
/// canonical reading order.
pub fn generate_page(
    layout: &PageLayout,
    categories: &[usize],
    domain: Domain,
    noise_level: f64,
    seed: u64,
) -> Result<PageSample> {
    let g = layout.glyph_size;
    if 4 * layout.jitter >= g {
        return Err(Error::Layout(format!(
            "jitter {} must be below a quarter of glyph size {g}",
            layout.jitter
        )));
    }
    let n = categories.len();
    let mut rng = seeds::stream(seed, "page.layout");
    let mut page = background(domain, layout.page_width, layout.page_height, &mut rng);
    if n == 0 {
        return Ok(PageSample {
            image: page,
            chars: Vec::new(),
            domain,
        });
    }
    if layout.num_columns == 0 {
        return Err(Error::Layout("num_columns must be at least 1".into()));
    }
    let rows = n.div_ceil(layout.num_columns);
    let cols = n.div_ceil(rows);
    let need = PageLayout::fitted(cols, rows, g, layout.jitter);
    if need.page_width > layout.page_width || need.page_height > layout.page_height {
        return Err(Error::Layout(format!(
            "{n} characters in {cols} column(s) of {rows} need a {}x{} page, got {}x{}",
            need.page_width, need.page_height, layout.page_width, layout.page_height
        )));
    }
    let j = layout.jitter as i64;
    let mut chars = Vec::with_capacity(n);
    for (i, &cat) in categories.iter().enumerate() {
        let (col, row) = (i / rows, i % rows);
        let base_x = (layout.page_width - layout.margin() - col * layout.pitch_x() - g) as i64;
        let base_y = (layout.margin() + row * layout.pitch_y()) as i64;
        let x1 = (base_x + rng.gen_range(-j..=j)) as usize;
        let y1 = (base_y + rng.gen_range(-j..=j)) as usize;
        let glyph = render_glyph(cat, domain, noise_level, seeds::derive_seed(seed, &format!("page.glyph.{i}")), g)?;
        for y in 0..g {
            for x in 0..g {
                page.set(x1 + x, y1 + y, glyph.image.get(x, y));
            }
        }
        chars.push((BBox::new(x1 as f64, y1 as f64, (x1 + g) as f64, (y1 + g) as f64), cat));
    }
    Ok(PageSample {
        image: page,
        chars,
        domain,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn uniform_frequencies() {
        let c = sample_category_frequencies(7, 0.0, 100).unwrap();
        assert_eq!(c.iter().sum::<usize>(), 100);
        assert!(c.iter().all(|&x| x == 14 || x == 15));
    }

    #[test]
    fn harmonic_frequencies_match_oracle() {
        let h: f64 = (1..=10).map(|r| 1.0 / r as f64).sum();
        let quotas: Vec<f64> = (1..=10).map(|r| 1000.0 / (r as f64 * h)).collect();
        let mut expect: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
        let short = 1000 - expect.iter().sum::<usize>();
        let mut by_rem: Vec<usize> = (0..10).collect();
        by_rem.sort_by(|&a, &b| (quotas[b].fract()).partial_cmp(&quotas[a].fract()).unwrap());
        for &i in &by_rem[..short] {
            expect[i] += 1;
        }
        assert_eq!(sample_category_frequencies(10, 1.0, 1000).unwrap(), expect);
        assert_eq!(expect[0], 341);
    }

    #[test]
    fn frequency_errors() {
        assert!(sample_category_frequencies(0, 1.0, 10).is_err());
        assert!(sample_category_frequencies(5, 1.0, 4).is_err());
        assert!(sample_category_frequencies(5, -1.0, 40).is_err());
    }

    #[test]
    fn min_count_is_strict() {
        assert_eq!(filter_min_count(&[10, 11, 3, 50], 10), vec![1, 3]);
        assert!(filter_min_count(&[0, 0], 10).is_empty());
        assert_eq!(filter_min_count(&[0, 1, 2], 0), vec![1, 2]);
    }

    #[test]
    fn head_mid_tail_cuts() {
        let eq: Vec<(usize, usize)> = (0..9).map(|c| (c, 5)).collect();
        let s = stratify_head_mid_tail(&eq);
        assert_eq!(s.head, vec![0, 1, 2]);
        assert_eq!(s.mid, vec![3, 4, 5]);
        assert_eq!(s.tail, vec![6, 7, 8]);

        let big: Vec<(usize, usize)> = (0..1352).map(|c| (c, 2000 - c)).collect();
        let s = stratify_head_mid_tail(&big);
        assert_eq!((s.head.len(), s.mid.len(), s.tail.len()), (451, 451, 450));

        let counts = [(0, 3), (1, 9), (2, 1), (3, 9), (4, 4)];
        let s = stratify_head_mid_tail(&counts);
        assert_eq!(s.head, vec![1, 3]);
        assert_eq!(s.mid, vec![4, 0]);
        assert_eq!(s.tail, vec![2]);
    }

    #[test]
    fn page_split_ratios() {
        let m = split_pages(&[Domain::Rubbing; 100], 3).unwrap();
        assert_eq!(m.counts(), [80, 10, 10]);
        assert_eq!(m, split_pages(&[Domain::Rubbing; 100], 3).unwrap());
        assert_ne!(m, split_pages(&[Domain::Rubbing; 100], 4).unwrap());
        assert!(matches!(split_pages(&[], 0), Err(Error::Data(_))));
    }

    #[test]
    fn char_split_ratios() {
        let m = split_chars(&[7; 20], 0).unwrap();
        assert_eq!(m.counts(), [8, 2, 10]);
        let m = split_chars(&[7; 11], 0).unwrap();
        assert_eq!(m.counts(), [4, 1, 6]);
        for n in 2..6 {
            let c = split_chars(&vec![1; n], 0).unwrap().counts();
            assert!(c[0] >= 1 && c[2] >= 1, "{n}: {c:?}");
        }
        assert!(matches!(split_chars(&[1, 1, 2], 0), Err(Error::Data(_))));
    }

    #[test]
    fn stroke_sets_distinct() {
        let mut seen = std::collections::HashSet::new();
        for c in 0..NUM_PATTERNS as usize {
            let s = stroke_set(c);
            assert!(s.windows(2).all(|w| w[0] < w[1]) && s[3] < NUM_SEGMENTS);
            assert!(seen.insert(s));
        }
    }

    #[test]
    fn clean_tracing_is_binary() {
        let g = render_glyph(5, Domain::Tracing, 0.0, 1, 16).unwrap();
        assert!(g.image.min() < 0.1 && g.image.max() > 0.9);
        assert!(g.image.pixels.iter().all(|&p| p == 0.0 || p == 1.0));
        assert_eq!(g, render_glyph(5, Domain::Tracing, 0.0, 1, 16).unwrap());
    }

    #[test]
    fn domains_and_noise_stay_in_range() {
        for d in Domain::ALL {
            for noise in [0.0, 0.5, 1.0] {
                let g = render_glyph(3, d, noise, 9, 16).unwrap();
                assert!(g.image.pixels.iter().all(|p| (0.0..=1.0).contains(p)));
                assert_eq!(g, render_glyph(3, d, noise, 9, 16).unwrap());
            }
        }
        assert!(render_glyph(0, Domain::Color, 1.5, 0, 16).is_err());
    }

    #[test]
    fn categories_render_distinctly() {
        for d in Domain::ALL {
            let imgs: Vec<GlyphSample> = (0..60).map(|c| render_glyph(c, d, 0.0, 0, 16).unwrap()).collect();
            for a in 0..60 {
                for b in a + 1..60 {
                    assert!(imgs[a].image.l1_distance(&imgs[b].image) > 0.0, "{d}: {a} vs {b}");
                }
            }
        }
    }

    #[test]
    fn single_char_page() {
        let layout = PageLayout::fitted(1, 1, 16, 3);
        let p = generate_page(&layout, &[4], Domain::Tracing, 0.0, 0).unwrap();
        assert_eq!(p.chars.len(), 1);
        assert!(p.chars[0].0.is_valid());
    }

    #[test]
    fn two_column_trace() {
        let layout = PageLayout::fitted(2, 3, 16, 0);
        let p = generate_page(&layout, &[10, 11, 12, 13, 14, 15], Domain::Color, 0.0, 0).unwrap();
        assert_eq!(p.labels(), vec![10, 11, 12, 13, 14, 15]);
        let b = p.boxes();
        assert!(b[0].x1 > b[3].x1);
        assert_eq!(b[0].x1, b[2].x1);
        assert!(b[0].y1 < b[1].y1 && b[1].y1 < b[2].y1);
        let crop = p.image.crop(b[4].x1 as usize, b[4].y1 as usize, b[4].x2 as usize, b[4].y2 as usize);
        let glyph = render_glyph(14, Domain::Color, 0.0, seeds::derive_seed(0, "page.glyph.4"), 16).unwrap();
        assert_eq!(crop, glyph.image);
    }

    #[test]
    fn layout_errors() {
        let mut layout = PageLayout::fitted(1, 2, 16, 4);
        assert!(matches!(generate_page(&layout, &[0, 1], Domain::Tracing, 0.0, 0), Err(Error::Layout(_))));
        layout.jitter = 3;
        assert!(matches!(generate_page(&layout, &[0, 1, 2], Domain::Tracing, 0.0, 0), Err(Error::Layout(_))));
        layout.num_columns = 0;
        assert!(matches!(generate_page(&layout, &[0], Domain::Tracing, 0.0, 0), Err(Error::Layout(_))));
    }

    proptest! {
        #[test]
        fn frequencies_conserve_and_decrease(c in 1usize..80, extra in 0usize..3000, s in 0.0f64..3.0) {
            let counts = sample_category_frequencies(c, s, c + extra).unwrap();
            prop_assert_eq!(counts.iter().sum::<usize>(), c + extra);
            prop_assert!(counts.windows(2).all(|w| w[0] >= w[1]));
        }

        #[test]
        fn char_split_partitions(cats in proptest::collection::vec(0usize..6, 0..80), seed in any::<u64>()) {
            let mut cats = cats;
            cats.extend(0..6);
            cats.extend(0..6);
            let m = split_chars(&cats, seed).unwrap();
            let mut all: Vec<usize> = Split::ALL.iter().flat_map(|&s| m.indices(s)).collect();
            all.sort();
            prop_assert_eq!(all, (0..cats.len()).collect::<Vec<_>>());
            for c in 0..6 {
                let n = cats.iter().filter(|&&x| x == c).count();
                let per: Vec<usize> = Split::ALL.iter()
                    .map(|&s| m.indices(s).iter().filter(|&&i| cats[i] == c).count())
                    .collect();
                prop_assert_eq!(per.iter().sum::<usize>(), n);
                prop_assert!(per[0] >= 1 && per[2] >= 1);
            }
        }

        #[test]
        fn page_split_preserves_domain_mix(doms in proptest::collection::vec(0usize..3, 1..120), seed in any::<u64>()) {
            let doms: Vec<Domain> = doms.into_iter().map(|d| Domain::ALL[d]).collect();
            let m = split_pages(&doms, seed).unwrap();
            for d in Domain::ALL {
                let n = doms.iter().filter(|&&x| x == d).count() as f64;
                for (k, s) in Split::ALL.iter().enumerate() {
                    let got = m.indices(*s).iter().filter(|&&i| doms[i] == d).count() as f64;
                    let want = n * [0.8, 0.1, 0.1][k];
                    prop_assert!((got - want).abs() < 1.0 + 1e-9);
                }
            }
        }
    }
}
