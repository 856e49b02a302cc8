//! Runs, frames, datasets and the on-disk run archive.
//!
//! A run archive is a directory holding `manifest.json` and `frames.f32`.
//! The blob is little-endian `f32`, frame-major, then channel-planar,
//! then row-major within each plane. A dataset is indexed by
//! `dataset.json`, which lists run directories relative to itself together
//! with their split label.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Default capture interval of the camera (7.5 Hz).
pub const DEFAULT_CAPTURE_INTERVAL: f64 = 1.0 / 7.5;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const FRAMES_FILE: &str = "frames.f32";
pub const DATASET_FILE: &str = "dataset.json";

const RUN_FORMAT: &str = "massflow-run/1";
const DATASET_FORMAT: &str = "massflow-dataset/1";

/// Smallest accepted image side.
pub const MIN_IMAGE_SIDE: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageDims {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl ImageDims {
    pub fn new(height: usize, width: usize, channels: usize) -> Self {
        Self {
            height,
            width,
            channels,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.height < MIN_IMAGE_SIDE || self.width < MIN_IMAGE_SIDE {
            return Err(Error::Dimension(format!(
                "image {}x{} is smaller than {MIN_IMAGE_SIDE}x{MIN_IMAGE_SIDE}",
                self.height, self.width
            )));
        }
        if self.channels != 1 && self.channels != 3 {
            return Err(Error::Dimension(format!(
                "image has {} channels, expected 1 or 3",
                self.channels
            )));
        }
        Ok(())
    }

    /// Number of scalars per image, `None` on overflow.
    pub fn len(&self) -> Option<usize> {
        self.height
            .checked_mul(self.width)?
            .checked_mul(self.channels)
    }
}

/// A frame-local image with pixel values in `[0, 1]`, stored channel-planar.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    dims: ImageDims,
    pixels: Vec<f32>,
}

impl Image {
    pub fn new(dims: ImageDims, pixels: Vec<f32>) -> Result<Self> {
        dims.validate()?;
        if dims.len() != Some(pixels.len()) {
            return Err(Error::Dimension(format!(
                "{} pixels for a {}x{}x{} image",
                pixels.len(),
                dims.channels,
                dims.height,
                dims.width
            )));
        }
        if let Some(bad) = pixels.iter().find(|p| !(p.is_finite() && (0.0..=1.0).contains(*p))) {
            return Err(Error::Domain(format!("pixel value {bad} outside [0, 1]")));
        }
        Ok(Self { dims, pixels })
    }

    pub fn zeros(dims: ImageDims) -> Result<Self> {
        dims.validate()?;
        let len = dims
            .len()
            .ok_or_else(|| Error::Dimension("image size overflows".into()))?;
        Ok(Self {
            dims,
            pixels: vec![0.0; len],
        })
    }

    pub fn dims(&self) -> ImageDims {
        self.dims
    }

    pub fn height(&self) -> usize {
        self.dims.height
    }

    pub fn width(&self) -> usize {
        self.dims.width
    }

    pub fn channels(&self) -> usize {
        self.dims.channels
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    pub fn get(&self, channel: usize, row: usize, col: usize) -> f32 {
        self.pixels[(channel * self.dims.height + row) * self.dims.width + col]
    }

    pub fn mean(&self) -> f64 {
        self.pixels.iter().map(|&p| p as f64).sum::<f64>() / self.pixels.len() as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub image: Image,
    /// Elevator speed in m/s.
    pub speed: f64,
    /// Seconds between captures.
    pub capture_interval: f64,
}

impl Frame {
    pub fn new(image: Image, speed: f64, capture_interval: f64) -> Result<Self> {
        if !(speed.is_finite() && speed >= 0.0) {
            return Err(Error::Domain(format!("speed {speed} must be finite and >= 0")));
        }
        if !(capture_interval.is_finite() && capture_interval > 0.0) {
            return Err(Error::Domain(format!(
                "capture interval {capture_interval} must be > 0"
            )));
        }
        Ok(Self {
            image,
            speed,
            capture_interval,
        })
    }

    /// Frame-overlap factor `v * t` that turns an on-screen mass into the
    /// mass carried past the camera during one capture interval.
    pub fn overlap_factor(&self) -> f64 {
        self.speed * self.capture_interval
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunMeta {
    /// Abstract lighting multiplier (not lux).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lighting: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mean_speed: Option<f64>,
    #[serde(default)]
    pub tags: Vec<String>,
}

/// One elevator run: chronologically ordered frames and one total mass.
///
/// Runs with zero frames are representable (an archive may contain one);
/// the trainer skips them.
#[derive(Debug, Clone, PartialEq)]
pub struct Run {
    pub id: String,
    pub frames: Vec<Frame>,
    /// Ground-truth total mass in kg.
    pub total_mass: f64,
    pub meta: RunMeta,
}

impl Run {
    pub fn new(id: impl Into<String>, frames: Vec<Frame>, total_mass: f64, meta: RunMeta) -> Result<Self> {
        let run = Self {
            id: id.into(),
            frames,
            total_mass,
            meta,
        };
        run.validate()?;
        Ok(run)
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// True for zero-mass runs (elevator running without material).
    pub fn is_zero_mass(&self) -> bool {
        self.total_mass == 0.0
    }

    pub fn capture_interval(&self) -> f64 {
        self.frames
            .first()
            .map(|f| f.capture_interval)
            .unwrap_or(DEFAULT_CAPTURE_INTERVAL)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.total_mass.is_finite() && self.total_mass >= 0.0) {
            return Err(Error::Domain(format!(
                "run {}: total mass {} must be finite and >= 0",
                self.id, self.total_mass
            )));
        }
        if let Some(first) = self.frames.first() {
            let dims = first.image.dims();
            let t = first.capture_interval;
            for (j, f) in self.frames.iter().enumerate() {
                if f.image.dims() != dims {
                    return Err(Error::Dimension(format!(
                        "run {}: frame {j} has different image dimensions",
                        self.id
                    )));
                }
                if f.capture_interval != t {
                    return Err(Error::Domain(format!(
                        "run {}: capture interval changes at frame {j}",
                        self.id
                    )));
                }
            }
        }
        Ok(())
    }

    /// SHA-256 over every field that defines the run.
    pub fn content_hash(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        h.update(self.id.as_bytes());
        h.update((self.frames.len() as u64).to_le_bytes());
        h.update(self.total_mass.to_bits().to_le_bytes());
        for f in &self.frames {
            h.update(f.speed.to_bits().to_le_bytes());
            h.update(f.capture_interval.to_bits().to_le_bytes());
            for p in f.image.pixels() {
                h.update(p.to_bits().to_le_bytes());
            }
        }
        h.finalize().into()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" | "validation" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::config(format!("unknown split `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub runs: Vec<Run>,
    pub split: BTreeMap<String, Split>,
}

impl Dataset {
    pub fn new(runs: Vec<Run>, split: BTreeMap<String, Split>) -> Result<Self> {
        let ids: BTreeSet<&str> = runs.iter().map(|r| r.id.as_str()).collect();
        if ids.len() != runs.len() {
            return Err(Error::config("duplicate run id in dataset"));
        }
        if split.len() != ids.len() || !split.keys().all(|k| ids.contains(k.as_str())) {
            return Err(Error::config("split map does not partition the run ids"));
        }
        Ok(Self { runs, split })
    }

    pub fn runs_in(&self, which: Split) -> impl Iterator<Item = &Run> {
        self.runs
            .iter()
            .filter(move |r| self.split.get(&r.id) == Some(&which))
    }

    pub fn count(&self, which: Split) -> usize {
        self.split.values().filter(|s| **s == which).count()
    }

    /// Hash over run contents in order plus split labels.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        for r in &self.runs {
            h.update(r.content_hash());
            h.update(self.split[&r.id].as_str().as_bytes());
        }
        to_hex(&h.finalize())
    }
}

pub(crate) fn to_hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitRatios {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        Self {
            train: 0.6,
            val: 0.2,
            test: 0.2,
        }
    }
}

impl SplitRatios {
    pub fn new(train: f64, val: f64, test: f64) -> Result<Self> {
        let r = Self { train, val, test };
        r.validate()?;
        Ok(r)
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.train, self.val, self.test];
        if all.iter().any(|r| !(r.is_finite() && *r > 0.0)) {
            return Err(Error::config("split ratios must be positive"));
        }
        if (all.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::config("split ratios must sum to 1"));
        }
        Ok(())
    }

    /// Train and val take the floor of their share, test takes the rest.
    pub fn counts(&self, n: usize) -> [usize; 3] {
        // The epsilon keeps exact products such as 15 * 0.6 from flooring down.
        let share = |r: f64| (n as f64 * r + 1e-9).floor() as usize;
        let train = share(self.train).min(n);
        let val = share(self.val).min(n - train);
        [train, val, n - train - val]
    }
}

/// Assigns split labels to `n` items, `zero_mass[i]` marking empty runs.
///
/// With `stratify_empty`, empty runs are spread over the splits in the same
/// proportions (capped by each split's size); otherwise all items are
/// shuffled together.
pub fn assign_splits(
    zero_mass: &[bool],
    ratios: SplitRatios,
    seed: u64,
    stratify_empty: bool,
) -> Result<Vec<Split>> {
    ratios.validate()?;
    let n = zero_mass.len();
    if n < 3 {
        return Err(Error::config(format!(
            "need at least 3 runs to split, got {n}"
        )));
    }
    let capacity = ratios.counts(n);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut labels = vec![Split::Train; n];

    if !stratify_empty {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        let mut it = order.into_iter();
        for (split, &cap) in Split::ALL.iter().zip(&capacity) {
            for i in it.by_ref().take(cap) {
                labels[i] = *split;
            }
        }
        return Ok(labels);
    }

    let mut empty: Vec<usize> = (0..n).filter(|&i| zero_mass[i]).collect();
    let mut full: Vec<usize> = (0..n).filter(|&i| !zero_mass[i]).collect();
    empty.shuffle(&mut rng);
    full.shuffle(&mut rng);

    let want = ratios.counts(empty.len());
    let mut take = [0usize; 3];
    let mut overflow = 0;
    for s in 0..3 {
        take[s] = want[s].min(capacity[s]);
        overflow += want[s] - take[s];
    }
    for s in [2, 0, 1] {
        let room = capacity[s] - take[s];
        let extra = room.min(overflow);
        take[s] += extra;
        overflow -= extra;
    }
    debug_assert_eq!(overflow, 0);

    let mut empty_it = empty.into_iter();
    let mut full_it = full.into_iter();
    for s in 0..3 {
        for i in empty_it.by_ref().take(take[s]) {
            labels[i] = Split::ALL[s];
        }
        for i in full_it.by_ref().take(capacity[s] - take[s]) {
            labels[i] = Split::ALL[s];
        }
    }
    Ok(labels)
}

/// Deterministic split of `runs`, empty runs stratified across splits.
pub fn split_dataset(runs: Vec<Run>, ratios: SplitRatios, seed: u64) -> Result<Dataset> {
    split_dataset_with(runs, ratios, seed, true)
}

pub fn split_dataset_with(
    runs: Vec<Run>,
    ratios: SplitRatios,
    seed: u64,
    stratify_empty: bool,
) -> Result<Dataset> {
    let zero: Vec<bool> = runs.iter().map(Run::is_zero_mass).collect();
    let labels = assign_splits(&zero, ratios, seed, stratify_empty)?;
    let split = runs
        .iter()
        .zip(labels)
        .map(|(r, s)| (r.id.clone(), s))
        .collect();
    Dataset::new(runs, split)
}

// ---------------------------------------------------------------------------
// Run archive

/// The manifest as written to disk. Unknown keys (such as synthetic oracle
/// data) are ignored on load.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub format: String,
    pub id: String,
    pub n: usize,
    pub total_mass: f64,
    pub capture_interval: f64,
    pub speeds: Vec<f64>,
    #[serde(default)]
    pub meta: RunMeta,
    pub image: ImageDims,
}

impl RunManifest {
    pub fn for_run(run: &Run) -> Result<Self> {
        let image = match run.frames.first() {
            Some(f) => f.image.dims(),
            None => {
                return Err(Error::config(format!(
                    "run {} has no frames and cannot be archived",
                    run.id
                )))
            }
        };
        Ok(Self {
            format: RUN_FORMAT.to_string(),
            id: run.id.clone(),
            n: run.frames.len(),
            total_mass: run.total_mass,
            capture_interval: run.capture_interval(),
            speeds: run.frames.iter().map(|f| f.speed).collect(),
            meta: run.meta.clone(),
            image,
        })
    }
}

/// Serializes a run into manifest JSON and pixel blob.
pub fn encode_run(run: &Run) -> Result<(serde_json::Value, Vec<u8>)> {
    run.validate()?;
    let manifest = RunManifest::for_run(run)?;
    let per = manifest.image.len().unwrap_or(0);
    let mut blob = Vec::with_capacity(run.frames.len() * per * 4);
    for f in &run.frames {
        for p in f.image.pixels() {
            blob.extend_from_slice(&p.to_le_bytes());
        }
    }
    Ok((serde_json::to_value(&manifest)?, blob))
}

/// Decodes a run from manifest bytes and pixel blob bytes.
///
/// Every structural inconsistency is a corrupt-archive error; this is the
/// entry point exercised by the fuzzers.
pub fn decode_run(manifest: &[u8], blob: &[u8]) -> Result<Run> {
    let m: RunManifest = serde_json::from_slice(manifest)
        .map_err(|e| Error::corrupt(format!("manifest: {e}")))?;
    if m.format != RUN_FORMAT {
        return Err(Error::corrupt(format!("unknown format `{}`", m.format)));
    }
    if m.speeds.len() != m.n {
        return Err(Error::corrupt(format!(
            "manifest says n={} but lists {} speeds",
            m.n,
            m.speeds.len()
        )));
    }
    m.image
        .validate()
        .map_err(|e| Error::corrupt(e.to_string()))?;
    let per = m
        .image
        .len()
        .ok_or_else(|| Error::corrupt("image size overflows"))?;
    let expected = per
        .checked_mul(m.n)
        .and_then(|v| v.checked_mul(4))
        .ok_or_else(|| Error::corrupt("blob size overflows"))?;
    if blob.len() != expected {
        return Err(Error::corrupt(format!(
            "pixel blob has {} bytes, manifest implies {expected}",
            blob.len()
        )));
    }
    if !(m.capture_interval.is_finite() && m.capture_interval > 0.0) {
        return Err(Error::corrupt("capture interval must be > 0"));
    }
    let mut frames = Vec::with_capacity(m.n);
    for (j, chunk) in blob.chunks_exact(per * 4).enumerate() {
        let pixels: Vec<f32> = chunk
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        let image = Image::new(m.image, pixels)
            .map_err(|e| Error::corrupt(format!("frame {j}: {e}")))?;
        let frame = Frame::new(image, m.speeds[j], m.capture_interval)
            .map_err(|e| Error::corrupt(format!("frame {j}: {e}")))?;
        frames.push(frame);
    }
    Run::new(m.id, frames, m.total_mass, m.meta).map_err(|e| Error::corrupt(e.to_string()))
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub(crate) fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let bytes = serde_json::to_vec_pretty(value)?;
    write_file(path, &bytes)
}

/// Writes `manifest` (possibly extended with extra keys) and the blob.
pub(crate) fn save_encoded(dir: &Path, manifest: &serde_json::Value, blob: &[u8]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_json(&dir.join(MANIFEST_FILE), manifest)?;
    write_file(&dir.join(FRAMES_FILE), blob)
}

pub fn save_run(run: &Run, dir: &Path) -> Result<()> {
    let (manifest, blob) = encode_run(run)?;
    save_encoded(dir, &manifest, &blob)
}

pub fn load_run(dir: &Path) -> Result<Run> {
    let manifest = read_file(&dir.join(MANIFEST_FILE))?;
    let blob = read_file(&dir.join(FRAMES_FILE))?;
    decode_run(&manifest, &blob)
}

// ---------------------------------------------------------------------------
// Dataset index

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexEntry {
    pub id: String,
    /// Run directory relative to the index file.
    pub dir: String,
    pub split: Split,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scenario: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetIndex {
    pub format: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hash: Option<String>,
    pub runs: Vec<IndexEntry>,
}

impl DatasetIndex {
    pub fn new(runs: Vec<IndexEntry>) -> Self {
        Self {
            format: DATASET_FORMAT.to_string(),
            seed: None,
            hash: None,
            runs,
        }
    }

    /// Parses and validates an index: unique ids, safe relative paths.
    pub fn parse(bytes: &[u8]) -> Result<Self> {
        let idx: DatasetIndex = serde_json::from_slice(bytes)
            .map_err(|e| Error::corrupt(format!("dataset index: {e}")))?;
        if idx.format != DATASET_FORMAT {
            return Err(Error::corrupt(format!("unknown format `{}`", idx.format)));
        }
        let mut seen = BTreeSet::new();
        for e in &idx.runs {
            if !seen.insert(e.id.as_str()) {
                return Err(Error::corrupt(format!("duplicate run id `{}`", e.id)));
            }
            let p = Path::new(&e.dir);
            if p.is_absolute()
                || p.components()
                    .any(|c| matches!(c, std::path::Component::ParentDir))
            {
                return Err(Error::corrupt(format!(
                    "run dir `{}` must be relative and inside the dataset",
                    e.dir
                )));
            }
        }
        Ok(idx)
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::parse(&read_file(path)?)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }

    pub fn run_dir(&self, root: &Path, entry: &IndexEntry) -> PathBuf {
        root.join(&entry.dir)
    }
}

/// Resolves the index path: either a `dataset.json` file or a directory
/// containing one.
pub fn index_path(path: &Path) -> PathBuf {
    if path.is_dir() {
        path.join(DATASET_FILE)
    } else {
        path.to_path_buf()
    }
}

/// Loads every run listed in the index. Run ids in manifests must match
/// the index.
pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let index_file = index_path(path);
    let idx = DatasetIndex::read(&index_file)?;
    let root = index_file.parent().unwrap_or(Path::new("."));
    let mut runs = Vec::with_capacity(idx.runs.len());
    let mut split = BTreeMap::new();
    for e in &idx.runs {
        let run = load_run(&idx.run_dir(root, e))?;
        if run.id != e.id {
            return Err(Error::corrupt(format!(
                "index lists `{}` but manifest says `{}`",
                e.id, run.id
            )));
        }
        split.insert(e.id.clone(), e.split);
        runs.push(run);
    }
    Dataset::new(runs, split)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_run(id: &str, n: usize, mass: f64) -> Run {
        let dims = ImageDims::new(8, 8, 1);
        let frames = (0..n)
            .map(|j| {
                let px = (0..64).map(|i| ((i + j) % 7) as f32 / 7.0).collect();
                Frame::new(Image::new(dims, px).unwrap(), 1.0 + j as f64 * 0.1, DEFAULT_CAPTURE_INTERVAL)
                    .unwrap()
            })
            .collect();
        Run::new(id, frames, mass, RunMeta::default()).unwrap()
    }

    fn runs(n: usize, empty: usize) -> Vec<Run> {
        (0..n)
            .map(|i| tiny_run(&format!("r{i:03}"), 1, if i < empty { 0.0 } else { 5.0 }))
            .collect()
    }

    #[test]
    fn split_counts_follow_floor_rule() {
        let ds = split_dataset(runs(239, 8), SplitRatios::default(), 1).unwrap();
        assert_eq!(
            [ds.count(Split::Train), ds.count(Split::Val), ds.count(Split::Test)],
            [143, 47, 49]
        );
        let ds = split_dataset(runs(10, 0), SplitRatios::default(), 1).unwrap();
        assert_eq!(
            [ds.count(Split::Train), ds.count(Split::Val), ds.count(Split::Test)],
            [6, 2, 2]
        );
    }

    #[test]
    fn split_is_deterministic() {
        let a = split_dataset(runs(50, 5), SplitRatios::default(), 9).unwrap();
        let b = split_dataset(runs(50, 5), SplitRatios::default(), 9).unwrap();
        assert_eq!(a.split, b.split);
        let c = split_dataset(runs(50, 5), SplitRatios::default(), 10).unwrap();
        assert_ne!(a.split, c.split);
    }

    #[test]
    fn empty_runs_are_spread_across_splits() {
        let ds = split_dataset(runs(239, 8), SplitRatios::default(), 3).unwrap();
        let empties = |s| ds.runs_in(s).filter(|r| r.is_zero_mass()).count();
        assert_eq!(empties(Split::Train), 4);
        assert_eq!(empties(Split::Val), 1);
        assert_eq!(empties(Split::Test), 3);
    }

    #[test]
    fn too_few_runs_is_a_config_error() {
        let err = split_dataset(runs(2, 0), SplitRatios::default(), 1).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
        assert!(SplitRatios::new(0.5, 0.5, 0.1).is_err());
        assert!(SplitRatios::new(0.8, 0.3, -0.1).is_err());
    }

    #[test]
    fn archive_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let run = tiny_run("abc", 5, 12.5);
        save_run(&run, dir.path()).unwrap();
        assert_eq!(load_run(dir.path()).unwrap(), run);
    }

    #[test]
    fn truncated_blob_is_corrupt() {
        let (m, mut blob) = encode_run(&tiny_run("x", 3, 1.0)).unwrap();
        blob.pop();
        let err = decode_run(&serde_json::to_vec(&m).unwrap(), &blob).unwrap_err();
        assert!(matches!(err, Error::CorruptArchive(_)), "{err}");
    }

    #[test]
    fn speeds_length_mismatch_is_corrupt() {
        let (mut m, blob) = encode_run(&tiny_run("x", 5, 1.0)).unwrap();
        m["speeds"].as_array_mut().unwrap().pop();
        let err = decode_run(&serde_json::to_vec(&m).unwrap(), &blob).unwrap_err();
        assert!(matches!(err, Error::CorruptArchive(_)), "{err}");
    }

    #[test]
    fn missing_archive_is_not_found() {
        let dir = tempfile::tempdir().unwrap();
        let err = load_run(&dir.path().join("nope")).unwrap_err();
        assert!(matches!(err, Error::NotFound(_)));
    }

    #[test]
    fn out_of_range_pixels_rejected() {
        let (m, mut blob) = encode_run(&tiny_run("x", 1, 1.0)).unwrap();
        blob[0..4].copy_from_slice(&2.0f32.to_le_bytes());
        assert!(decode_run(&serde_json::to_vec(&m).unwrap(), &blob).is_err());
    }

    #[test]
    fn index_rejects_escaping_paths() {
        let idx = DatasetIndex::new(vec![IndexEntry {
            id: "a".into(),
            dir: "../elsewhere".into(),
            split: Split::Train,
            scenario: None,
        }]);
        let bytes = serde_json::to_vec(&idx).unwrap();
        assert!(DatasetIndex::parse(&bytes).is_err());
    }

    #[test]
    fn dataset_round_trip_through_index() {
        let dir = tempfile::tempdir().unwrap();
        let ds = split_dataset(runs(6, 1), SplitRatios::default(), 4).unwrap();
        let mut entries = Vec::new();
        for r in &ds.runs {
            let rel = format!("runs/{}", r.id);
            save_run(r, &dir.path().join(&rel)).unwrap();
            entries.push(IndexEntry {
                id: r.id.clone(),
                dir: rel,
                split: ds.split[&r.id],
                scenario: None,
            });
        }
        DatasetIndex::new(entries)
            .write(&dir.path().join(DATASET_FILE))
            .unwrap();
        let back = load_dataset(dir.path()).unwrap();
        assert_eq!(back, ds);
        assert_eq!(back.content_hash(), ds.content_hash());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn splits_partition_ids(n in 3usize..120, empty in 0usize..20, seed in any::<u64>(), strat in any::<bool>()) {
                let empty = empty.min(n);
                let zero: Vec<bool> = (0..n).map(|i| i < empty).collect();
                let labels = assign_splits(&zero, SplitRatios::default(), seed, strat).unwrap();
                let counts = SplitRatios::default().counts(n);
                for (s, want) in Split::ALL.iter().zip(counts) {
                    prop_assert_eq!(labels.iter().filter(|l| *l == s).count(), want);
                }
            }
        }
    }
}
