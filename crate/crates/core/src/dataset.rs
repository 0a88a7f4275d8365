//! Composite billboard dataset construction: polygon areas, the inclusion
//! rules, the seeded stratified split, the manifest file, and decoding images
//! into network input tensors.
//!
//! # Annotation format
//!
//! UTF-8 text, one image per line, fields separated by tabs:
//!
//! ```text
//! image_id <TAB> width <TAB> height <TAB> source [<TAB> polygon]*
//! polygon := x0,y0 x1,y1 x2,y2 ...        (at least three vertices)
//! ```
//!
//! Coordinates are pixels, `(0,0)` the top-left corner. Blank lines and lines
//! starting with `#` are ignored. An image with no polygon field has no
//! billboards.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use image::imageops::FilterType;
use image::{DynamicImage, RgbImage};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Minimum billboard coverage, exclusive.
pub const AREA_THRESHOLD: f64 = 0.10;

pub type Vertex = (f64, f64);

#[derive(Debug, Clone, PartialEq)]
pub struct AnnotatedImage {
    pub image_id: String,
    pub width: u32,
    pub height: u32,
    pub source: String,
    pub billboard_polygons: Vec<Vec<Vertex>>,
}

impl AnnotatedImage {
    pub fn new(
        image_id: impl Into<String>,
        width: u32,
        height: u32,
        source: impl Into<String>,
        billboard_polygons: Vec<Vec<Vertex>>,
    ) -> Result<Self> {
        let image_id = image_id.into();
        if width == 0 || height == 0 {
            return Err(Error::InvalidParameter(format!(
                "image {image_id}: size {width}x{height} must be at least 1x1"
            )));
        }
        for poly in &billboard_polygons {
            if poly.len() < 3 {
                return Err(Error::DegeneratePolygon(poly.len()));
            }
            if poly.iter().any(|(x, y)| !x.is_finite() || !y.is_finite()) {
                return Err(Error::InvalidParameter(format!(
                    "image {image_id}: non-finite polygon vertex"
                )));
            }
        }
        Ok(Self {
            image_id,
            width,
            height,
            source: source.into(),
            billboard_polygons,
        })
    }

    pub fn pixel_area(&self) -> f64 {
        f64::from(self.width) * f64::from(self.height)
    }

    /// True if any vertex lies strictly outside `[0,width]×[0,height]`.
    pub fn is_off_screen(&self) -> bool {
        let (w, h) = (f64::from(self.width), f64::from(self.height));
        self.billboard_polygons
            .iter()
            .flatten()
            .any(|&(x, y)| x < 0.0 || y < 0.0 || x > w || y > h)
    }
}

/// Absolute shoelace area in px².
pub fn polygon_area(vertices: &[Vertex]) -> Result<f64> {
    if vertices.len() < 3 {
        return Err(Error::DegeneratePolygon(vertices.len()));
    }
    let twice: f64 = vertices
        .iter()
        .zip(vertices.iter().cycle().skip(1))
        .map(|(&(x0, y0), &(x1, y1))| x0 * y1 - x1 * y0)
        .sum();
    Ok(twice.abs() / 2.0)
}

/// How overlapping billboard polygons are combined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum AreaMode {
    /// Sum of individual polygon areas; overlaps count twice.
    #[default]
    Sum,
    /// Covered area of the union, measured along one scanline per pixel row
    /// and clipped to the image.
    Union,
}

/// Billboard coverage as a fraction of the image, clamped to `[0, 1]`.
pub fn area_fraction(img: &AnnotatedImage) -> f64 {
    area_fraction_with(img, AreaMode::Sum)
}

pub fn area_fraction_with(img: &AnnotatedImage, mode: AreaMode) -> f64 {
    let covered = match mode {
        AreaMode::Sum => img
            .billboard_polygons
            .iter()
            .map(|p| polygon_area(p).unwrap_or(0.0))
            .sum(),
        AreaMode::Union => union_area(img),
    };
    (covered / img.pixel_area()).clamp(0.0, 1.0)
}

fn union_area(img: &AnnotatedImage) -> f64 {
    let width = f64::from(img.width);
    let mut total = 0.0;
    for row in 0..img.height {
        let y = f64::from(row) + 0.5;
        let mut spans: Vec<(f64, f64)> = Vec::new();
        for poly in &img.billboard_polygons {
            let mut xs: Vec<f64> = poly
                .iter()
                .zip(poly.iter().cycle().skip(1))
                .filter(|(&(_, y0), &(_, y1))| (y0 <= y) != (y1 <= y))
                .map(|(&(x0, y0), &(x1, y1))| x0 + (y - y0) * (x1 - x0) / (y1 - y0))
                .collect();
            xs.sort_by(f64::total_cmp);
            spans.extend(
                xs.chunks_exact(2)
                    .map(|p| (p[0].clamp(0.0, width), p[1].clamp(0.0, width))),
            );
        }
        spans.sort_by(|a, b| a.0.total_cmp(&b.0));
        let mut reach = f64::NEG_INFINITY;
        for (a, b) in spans {
            let start = a.max(reach);
            if b > start {
                total += b - start;
            }
            reach = reach.max(b);
        }
    }
    total
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ExclusionReason {
    /// Billboards present but covering no more than the threshold.
    SmallBillboard,
    /// Some billboard polygon leaves the frame.
    OffScreen,
}

impl ExclusionReason {
    fn as_str(self) -> &'static str {
        match self {
            ExclusionReason::SmallBillboard => "excluded-small",
            ExclusionReason::OffScreen => "excluded-offscreen",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Classification {
    Positive,
    Negative,
    Exclude(ExclusionReason),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DatasetRules {
    pub threshold: f64,
    pub area_mode: AreaMode,
}

impl Default for DatasetRules {
    fn default() -> Self {
        Self {
            threshold: AREA_THRESHOLD,
            area_mode: AreaMode::Sum,
        }
    }
}

/// Positive iff billboards cover strictly more than 10% of the frame and none
/// is off-screen; negative iff there are no billboards at all.
pub fn classify_sample(img: &AnnotatedImage) -> Classification {
    classify_with(img, &DatasetRules::default())
}

pub fn classify_with(img: &AnnotatedImage, rules: &DatasetRules) -> Classification {
    if img.billboard_polygons.is_empty() {
        Classification::Negative
    } else if img.is_off_screen() {
        Classification::Exclude(ExclusionReason::OffScreen)
    } else if area_fraction_with(img, rules.area_mode) > rules.threshold {
        Classification::Positive
    } else {
        Classification::Exclude(ExclusionReason::SmallBillboard)
    }
}

/// Class label. The index is the position in the network's output pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Label {
    NoBillboard = 0,
    Billboard = 1,
}

impl Label {
    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        match i {
            0 => Some(Label::NoBillboard),
            1 => Some(Label::Billboard),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Label::NoBillboard => "no-billboard",
            Label::Billboard => "billboard",
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Label {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "no-billboard" => Ok(Label::NoBillboard),
            "billboard" => Ok(Label::Billboard),
            other => Err(Error::InvalidParameter(format!("unknown label {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(Error::InvalidParameter(format!(
                "unknown split {other:?} (expected train or test)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleRecord {
    pub image_id: String,
    pub source: String,
    pub label: Label,
    pub split: Split,
    pub area_fraction: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExcludedImage {
    pub image_id: String,
    pub source: String,
    pub reason: ExclusionReason,
    pub area_fraction: f64,
}

/// Count key: split, label, source corpus.
pub type StratumKey = (Split, Label, String);

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub seed: u64,
    pub split_fraction: f64,
    /// Train records in shuffled order, then test records in shuffled order.
    pub records: Vec<SampleRecord>,
    pub excluded: Vec<ExcludedImage>,
}

impl DatasetManifest {
    pub fn counts(&self) -> BTreeMap<StratumKey, usize> {
        let mut out = BTreeMap::new();
        for r in &self.records {
            *out.entry((r.split, r.label, r.source.clone())).or_insert(0) += 1;
        }
        out
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &SampleRecord> {
        self.records.iter().filter(move |r| r.split == split)
    }

    pub fn sources(&self) -> Vec<String> {
        let mut s: Vec<String> = self.records.iter().map(|r| r.source.clone()).collect();
        s.sort();
        s.dedup();
        s
    }

    /// Line-oriented, tab-separated text. The first line carries the seed, the
    /// split fraction and the per-stratum counts; then one line per image:
    /// `image_id source label split area_fraction`. Excluded images use `-` as
    /// label and `excluded-small` / `excluded-offscreen` as split.
    pub fn to_text(&self) -> String {
        let mut header = vec![
            "#adnet-manifest".to_string(),
            format!("seed={}", self.seed),
            format!("split_fraction={}", self.split_fraction),
        ];
        header.extend(
            self.counts()
                .into_iter()
                .map(|((split, label, source), n)| format!("{split}/{label}/{source}={n}")),
        );
        header.push(format!("excluded={}", self.excluded.len()));
        let mut out = header.join("\t");
        out.push('\n');
        for r in &self.records {
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\t{:.6}\n",
                r.image_id, r.source, r.label, r.split, r.area_fraction
            ));
        }
        for e in &self.excluded {
            out.push_str(&format!(
                "{}\t{}\t-\t{}\t{:.6}\n",
                e.image_id,
                e.source,
                e.reason.as_str(),
                e.area_fraction
            ));
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        let (_, header) = lines.next().ok_or_else(|| parse_err(1, "empty manifest"))?;
        let mut fields = header.split('\t');
        if fields.next() != Some("#adnet-manifest") {
            return Err(parse_err(1, "missing #adnet-manifest header"));
        }
        let mut seed = None;
        let mut split_fraction = None;
        for f in fields {
            if let Some(v) = f.strip_prefix("seed=") {
                seed = Some(v.parse().map_err(|_| parse_err(1, "bad seed"))?);
            } else if let Some(v) = f.strip_prefix("split_fraction=") {
                split_fraction = Some(v.parse().map_err(|_| parse_err(1, "bad split_fraction"))?);
            }
        }
        let mut manifest = DatasetManifest {
            seed: seed.ok_or_else(|| parse_err(1, "header lacks seed"))?,
            split_fraction: split_fraction
                .ok_or_else(|| parse_err(1, "header lacks split_fraction"))?,
            records: Vec::new(),
            excluded: Vec::new(),
        };
        let mut seen = HashSet::new();
        for (i, line) in lines {
            let lineno = i + 1;
            if line.is_empty() {
                continue;
            }
            let cols: Vec<&str> = line.split('\t').collect();
            let [id, source, label, split, fraction] = cols[..] else {
                return Err(parse_err(
                    lineno,
                    format!("expected 5 fields, found {}", cols.len()),
                ));
            };
            if !seen.insert(id.to_string()) {
                return Err(parse_err(lineno, format!("duplicate image id {id:?}")));
            }
            let area_fraction: f64 = fraction
                .parse()
                .map_err(|_| parse_err(lineno, format!("bad area fraction {fraction:?}")))?;
            let reason = match split {
                "excluded-small" => Some(ExclusionReason::SmallBillboard),
                "excluded-offscreen" => Some(ExclusionReason::OffScreen),
                _ => None,
            };
            if let Some(reason) = reason {
                manifest.excluded.push(ExcludedImage {
                    image_id: id.to_string(),
                    source: source.to_string(),
                    reason,
                    area_fraction,
                });
                continue;
            }
            let label: Label = label
                .parse()
                .map_err(|e: Error| parse_err(lineno, e.to_string()))?;
            if label == Label::Billboard && area_fraction <= AREA_THRESHOLD {
                return Err(parse_err(
                    lineno,
                    format!("billboard record with area fraction {area_fraction}"),
                ));
            }
            manifest.records.push(SampleRecord {
                image_id: id.to_string(),
                source: source.to_string(),
                label,
                split: split
                    .parse()
                    .map_err(|e: Error| parse_err(lineno, e.to_string()))?,
                area_fraction,
            });
        }
        Ok(manifest)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// Table-shaped summary: one row per split with positive/negative counts
    /// per source corpus and a total.
    pub fn summary(&self) -> String {
        let sources = self.sources();
        let counts = self.counts();
        let mut out = String::from("set");
        for label in [Label::Billboard, Label::NoBillboard] {
            for s in &sources {
                out.push_str(&format!("\t{label}/{s}"));
            }
        }
        out.push_str("\ttotal\n");
        let mut grand = vec![0usize; 2 * sources.len() + 1];
        for split in [Split::Train, Split::Test] {
            out.push_str(split.as_str());
            let mut col = 0;
            for label in [Label::Billboard, Label::NoBillboard] {
                for s in &sources {
                    let n = counts.get(&(split, label, s.clone())).copied().unwrap_or(0);
                    out.push_str(&format!("\t{n}"));
                    grand[col] += n;
                    grand[2 * sources.len()] += n;
                    col += 1;
                }
            }
            let total: usize = self.split(split).count();
            out.push_str(&format!("\t{total}\n"));
        }
        out.push_str("total");
        for n in grand {
            out.push_str(&format!("\t{n}"));
        }
        out.push_str(&format!("\nexcluded\t{}\n", self.excluded.len()));
        out
    }
}

fn parse_err(line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        line,
        message: message.into(),
    }
}

pub fn build_manifest(
    images: &[AnnotatedImage],
    split_fraction: f64,
    seed: u64,
) -> Result<DatasetManifest> {
    build_manifest_with(images, split_fraction, seed, &DatasetRules::default())
}

/// Classifies every image, then splits each (label, source) stratum
/// separately: images are sorted by id, shuffled with a ChaCha8 stream seeded
/// from `seed` (strata visited in sorted order), and the first
/// `round(len · split_fraction)` go to training.
pub fn build_manifest_with(
    images: &[AnnotatedImage],
    split_fraction: f64,
    seed: u64,
    rules: &DatasetRules,
) -> Result<DatasetManifest> {
    if images.is_empty() {
        return Err(Error::EmptyDataset("no annotated images".into()));
    }
    if !(split_fraction > 0.0 && split_fraction < 1.0) {
        return Err(Error::InvalidParameter(format!(
            "split fraction must lie in (0, 1), got {split_fraction}"
        )));
    }
    let mut seen = HashSet::new();
    let mut strata: BTreeMap<(Label, String), Vec<(&str, f64)>> = BTreeMap::new();
    let mut excluded = Vec::new();
    for img in images {
        if !seen.insert(img.image_id.as_str()) {
            return Err(Error::DuplicateImage(img.image_id.clone()));
        }
        let fraction = area_fraction_with(img, rules.area_mode);
        let label = match classify_with(img, rules) {
            Classification::Positive => Label::Billboard,
            Classification::Negative => Label::NoBillboard,
            Classification::Exclude(reason) => {
                excluded.push(ExcludedImage {
                    image_id: img.image_id.clone(),
                    source: img.source.clone(),
                    reason,
                    area_fraction: fraction,
                });
                continue;
            }
        };
        strata
            .entry((label, img.source.clone()))
            .or_default()
            .push((&img.image_id, fraction));
    }
    excluded.sort_by(|a, b| a.image_id.cmp(&b.image_id));

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut train = Vec::new();
    let mut test = Vec::new();
    for ((label, source), mut members) in strata {
        members.sort_by(|a, b| a.0.cmp(b.0));
        members.shuffle(&mut rng);
        let n_train = (members.len() as f64 * split_fraction).round() as usize;
        for (i, (id, fraction)) in members.into_iter().enumerate() {
            let split = if i < n_train {
                Split::Train
            } else {
                Split::Test
            };
            let record = SampleRecord {
                image_id: id.to_string(),
                source: source.clone(),
                label,
                split,
                area_fraction: fraction,
            };
            match split {
                Split::Train => train.push(record),
                Split::Test => test.push(record),
            }
        }
    }
    train.shuffle(&mut rng);
    test.shuffle(&mut rng);
    train.extend(test);
    Ok(DatasetManifest {
        seed,
        split_fraction,
        records: train,
        excluded,
    })
}

pub fn parse_annotations(text: &str) -> Result<Vec<AnnotatedImage>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let lineno = i + 1;
        let trimmed = line.trim_end_matches('\r');
        if trimmed.trim().is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = trimmed.split('\t').collect();
        if fields.len() < 4 {
            return Err(parse_err(
                lineno,
                format!(
                    "expected image_id, width, height, source; found {} fields",
                    fields.len()
                ),
            ));
        }
        let dim = |s: &str, what: &str| -> Result<u32> {
            s.trim()
                .parse::<u32>()
                .ok()
                .filter(|&v| v >= 1)
                .ok_or_else(|| parse_err(lineno, format!("bad {what} {s:?}")))
        };
        let width = dim(fields[1], "width")?;
        let height = dim(fields[2], "height")?;
        let polygons = fields[4..]
            .iter()
            .enumerate()
            .map(|(p, f)| {
                parse_polygon(f).map_err(|m| parse_err(lineno, format!("polygon {}: {m}", p + 1)))
            })
            .collect::<Result<Vec<_>>>()?;
        let img = AnnotatedImage::new(fields[0], width, height, fields[3], polygons)
            .map_err(|e| parse_err(lineno, e.to_string()))?;
        out.push(img);
    }
    Ok(out)
}

fn parse_polygon(field: &str) -> std::result::Result<Vec<Vertex>, String> {
    let verts = field
        .split_whitespace()
        .map(|pair| {
            let (x, y) = pair
                .split_once(',')
                .ok_or_else(|| format!("vertex {pair:?} is not x,y"))?;
            let parse = |v: &str| {
                v.parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| format!("bad coordinate {v:?}"))
            };
            Ok((parse(x)?, parse(y)?))
        })
        .collect::<std::result::Result<Vec<_>, String>>()?;
    if verts.len() < 3 {
        return Err(format!("{} vertices, need at least 3", verts.len()));
    }
    Ok(verts)
}

pub fn read_annotations(path: impl AsRef<Path>) -> Result<Vec<AnnotatedImage>> {
    parse_annotations(&std::fs::read_to_string(path)?)
}

/// Inverse of [`parse_annotations`].
pub fn format_annotations(images: &[AnnotatedImage]) -> String {
    let mut out = String::new();
    for img in images {
        out.push_str(&format!(
            "{}\t{}\t{}\t{}",
            img.image_id, img.width, img.height, img.source
        ));
        for poly in &img.billboard_polygons {
            let verts: Vec<String> = poly.iter().map(|(x, y)| format!("{x},{y}")).collect();
            out.push('\t');
            out.push_str(&verts.join(" "));
        }
        out.push('\n');
    }
    out
}

// ---------------------------------------------------------------- pixels

/// Pixel normalization: `value · scale - mean[channel]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Preprocess {
    pub scale: f64,
    pub mean: [f64; 3],
}

impl Default for Preprocess {
    fn default() -> Self {
        Self {
            scale: 1.0 / 255.0,
            mean: [0.0; 3],
        }
    }
}

/// Bilinear resize to `target = [3, H, W]`, channels first, normalized.
pub fn load_input<T: Scalar>(
    image: &DynamicImage,
    target: [usize; 3],
    pre: &Preprocess,
) -> Result<Tensor<T>> {
    let [c, h, w] = target;
    if c != 3 {
        return Err(Error::ShapeMismatch(format!(
            "input target must have 3 channels, got {c}"
        )));
    }
    let rgb = image.to_rgb8();
    let resized: RgbImage = if rgb.dimensions() == (w as u32, h as u32) {
        rgb
    } else {
        image::imageops::resize(&rgb, w as u32, h as u32, FilterType::Triangle)
    };
    let mut data = vec![T::zero(); 3 * h * w];
    for (x, y, px) in resized.enumerate_pixels() {
        for ch in 0..3 {
            let v = f64::from(px[ch]) * pre.scale - pre.mean[ch];
            data[(ch * h + y as usize) * w + x as usize] = T::from_f64_lossy(v);
        }
    }
    Tensor::new(&target, data)
}

pub fn load_input_file<T: Scalar>(
    path: &Path,
    target: [usize; 3],
    pre: &Preprocess,
) -> Result<Tensor<T>> {
    let bytes = std::fs::read(path)?;
    let image = image::load_from_memory(&bytes).map_err(|e| Error::Decode {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    load_input(&image, target, pre)
}

/// Indexed access to labelled `[3, H, W]` samples.
pub trait SampleSource<T: Scalar>: Sync {
    fn len(&self) -> usize;

    fn load(&self, index: usize) -> Result<(Tensor<T>, Label)>;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl<T: Scalar> SampleSource<T> for [(Tensor<T>, Label)] {
    fn len(&self) -> usize {
        <[_]>::len(self)
    }

    fn load(&self, index: usize) -> Result<(Tensor<T>, Label)> {
        Ok(self[index].clone())
    }
}

impl<T: Scalar> SampleSource<T> for Vec<(Tensor<T>, Label)> {
    fn len(&self) -> usize {
        self.as_slice().len()
    }

    fn load(&self, index: usize) -> Result<(Tensor<T>, Label)> {
        self.as_slice().load(index)
    }
}

/// Manifest records of one split, decoded on demand from `root/<image_id>`.
#[derive(Debug, Clone)]
pub struct ImageFolderSource {
    root: PathBuf,
    records: Vec<SampleRecord>,
    target: [usize; 3],
    preprocess: Preprocess,
}

impl ImageFolderSource {
    pub fn new(
        root: impl Into<PathBuf>,
        manifest: &DatasetManifest,
        split: Split,
        target: [usize; 3],
    ) -> Self {
        Self {
            root: root.into(),
            records: manifest.split(split).cloned().collect(),
            target,
            preprocess: Preprocess::default(),
        }
    }

    pub fn with_preprocess(mut self, preprocess: Preprocess) -> Self {
        self.preprocess = preprocess;
        self
    }

    pub fn records(&self) -> &[SampleRecord] {
        &self.records
    }

    pub fn path_of(&self, record: &SampleRecord) -> PathBuf {
        self.root.join(&record.image_id)
    }
}

impl<T: Scalar> SampleSource<T> for ImageFolderSource {
    fn len(&self) -> usize {
        self.records.len()
    }

    fn load(&self, index: usize) -> Result<(Tensor<T>, Label)> {
        let record = &self.records[index];
        let t = load_input_file(&self.path_of(record), self.target, &self.preprocess)?;
        Ok((t, record.label))
    }
}
