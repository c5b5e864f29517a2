//! Dataset manifests, per-epoch split planning, batch assembly, and
//! augmentation.
//!
//! A manifest is one JSONL row per image: id, path, label, the three
//! landmarks, the detected flag, rho, and the symmetric flag at the
//! manifest's threshold. Each epoch, an exact count `round(p * N_sym)` of
//! the symmetric records is drawn without replacement to be split, which
//! makes the sample accounting `N' = N + round(p * N_sym)` an identity
//! rather than an expectation.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{self, Landmarks, Point2};
use crate::raster::RasterImage;
use crate::seeds;

/// One manifest entry.
#[derive(Debug, Clone, PartialEq)]
pub struct FaceRecord {
    pub id: String,
    pub path: String,
    pub label: usize,
    pub landmarks: Landmarks,
    pub rho: f64,
    pub symmetric: bool,
}

/// Wire format for one JSONL row.
#[derive(Serialize, Deserialize)]
struct ManifestRow {
    id: String,
    path: String,
    label: usize,
    lm: [[f64; 2]; 3],
    detected: bool,
    rho: f64,
    sym: bool,
}

impl From<&FaceRecord> for ManifestRow {
    fn from(r: &FaceRecord) -> Self {
        let lm = &r.landmarks;
        ManifestRow {
            id: r.id.clone(),
            path: r.path.clone(),
            label: r.label,
            lm: [
                [lm.left_eye().x, lm.left_eye().y],
                [lm.right_eye().x, lm.right_eye().y],
                [lm.nose().x, lm.nose().y],
            ],
            detected: lm.is_detected(),
            rho: r.rho,
            sym: r.symmetric,
        }
    }
}

impl ManifestRow {
    fn into_record(self) -> FaceRecord {
        let landmarks = if self.detected {
            Landmarks::detected(
                Point2::new(self.lm[0][0], self.lm[0][1]),
                Point2::new(self.lm[1][0], self.lm[1][1]),
                Point2::new(self.lm[2][0], self.lm[2][1]),
            )
        } else {
            Landmarks::undetected()
        };
        FaceRecord {
            id: self.id,
            path: self.path,
            label: self.label,
            landmarks,
            rho: self.rho,
            symmetric: self.sym,
        }
    }
}

/// An input entry for manifest building: everything except the derived
/// rho and symmetric flag.
#[derive(Debug, Clone)]
pub struct SourceEntry {
    pub id: String,
    pub path: String,
    pub label: usize,
    pub landmarks: Landmarks,
}

/// A record skipped during manifest building, with the reason.
#[derive(Debug, Clone)]
pub struct SkippedEntry {
    pub id: String,
    pub reason: String,
}

/// An ordered set of face records plus the threshold its symmetric flags
/// were computed under.
#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    tau: f64,
    records: Vec<FaceRecord>,
}

impl Manifest {
    /// Build a manifest from source entries.
    ///
    /// `probe` checks that an entry's image is readable; entries that fail
    /// are skipped and reported, not fatal. Duplicate ids are a hard error.
    /// Records are sorted by id.
    pub fn build(
        entries: Vec<SourceEntry>,
        tau: f64,
        probe: impl FnMut(&SourceEntry) -> Result<()>,
    ) -> Result<(Manifest, Vec<SkippedEntry>)> {
        Self::build_with(entries, tau, geometry::FrontnessMode::Pixels, probe)
    }

    /// [`Manifest::build`] with an explicit frontness measurement mode.
    pub fn build_with(
        entries: Vec<SourceEntry>,
        tau: f64,
        mode: geometry::FrontnessMode,
        mut probe: impl FnMut(&SourceEntry) -> Result<()>,
    ) -> Result<(Manifest, Vec<SkippedEntry>)> {
        if !(0.0..1.0).contains(&tau) {
            return Err(Error::Config(format!("tau must be in [0, 1), got {tau}")));
        }
        let mut seen = HashSet::new();
        let mut records = Vec::with_capacity(entries.len());
        let mut skipped = Vec::new();
        for entry in entries {
            if !seen.insert(entry.id.clone()) {
                return Err(Error::Data(format!("duplicate record id '{}'", entry.id)));
            }
            if let Err(e) = probe(&entry) {
                skipped.push(SkippedEntry {
                    id: entry.id,
                    reason: e.to_string(),
                });
                continue;
            }
            let score = geometry::frontness_score_with(&entry.landmarks, mode)?;
            records.push(FaceRecord {
                id: entry.id,
                path: entry.path,
                label: entry.label,
                landmarks: entry.landmarks,
                rho: score.rho,
                symmetric: geometry::classify_symmetric(score.rho, tau),
            });
        }
        records.sort_by(|a, b| a.id.cmp(&b.id));
        Ok((Manifest { tau, records }, skipped))
    }

    /// Assemble from records whose flags are already consistent with `tau`.
    pub fn from_records(records: Vec<FaceRecord>, tau: f64) -> Result<Manifest> {
        for r in &records {
            if r.symmetric != geometry::classify_symmetric(r.rho, tau) {
                return Err(Error::Data(format!(
                    "record '{}' has sym={} but rho={} under tau={tau}",
                    r.id, r.symmetric, r.rho
                )));
            }
        }
        Ok(Manifest { tau, records })
    }

    /// Recompute the symmetric flags under a different threshold.
    pub fn with_tau(&self, tau: f64) -> Result<Manifest> {
        if !(0.0..1.0).contains(&tau) {
            return Err(Error::Config(format!("tau must be in [0, 1), got {tau}")));
        }
        let records = self
            .records
            .iter()
            .map(|r| FaceRecord {
                symmetric: geometry::classify_symmetric(r.rho, tau),
                ..r.clone()
            })
            .collect();
        Ok(Manifest { tau, records })
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn records(&self) -> &[FaceRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Count of records with `rho > tau`.
    pub fn symmetric_count(&self) -> usize {
        self.records.iter().filter(|r| r.symmetric).count()
    }

    /// Smallest class count covering every label.
    pub fn num_classes(&self) -> usize {
        self.records.iter().map(|r| r.label + 1).max().unwrap_or(0)
    }

    /// Serialize as JSONL, one record per line, LF endings.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = Vec::new();
        for record in &self.records {
            serde_json::to_writer(&mut out, &ManifestRow::from(record))?;
            out.push(b'\n');
        }
        fs::write(path, out)?;
        Ok(())
    }

    /// Load a JSONL manifest; the caller supplies the threshold the flags
    /// were built under, and the flags are revalidated against it.
    pub fn load(path: &Path, tau: f64) -> Result<Manifest> {
        let file = fs::File::open(path)
            .map_err(|e| Error::Data(format!("cannot open {}: {e}", path.display())))?;
        let mut records = Vec::new();
        for (lineno, line) in BufReader::new(file).lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let row: ManifestRow = serde_json::from_str(&line).map_err(|e| {
                Error::Data(format!(
                    "{}:{}: bad manifest row: {e}",
                    path.display(),
                    lineno + 1
                ))
            })?;
            records.push(row.into_record());
        }
        Manifest::from_records(records, tau)
    }
}

/// The outcome of per-epoch split sampling.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochPlan {
    pub epoch_seed: u64,
    /// `h_i` per record id: whether the record is split this epoch.
    pub split_flags: BTreeMap<String, bool>,
    /// N: records in the manifest.
    pub n_total: usize,
    /// N_sym: records with rho > tau.
    pub n_sym: usize,
    /// Records split this epoch: round(p * N_sym).
    pub n_split: usize,
    /// N' = N + n_split; images processed this epoch.
    pub n_effective: usize,
    split_indices: HashSet<usize>,
}

impl EpochPlan {
    pub fn is_split(&self, record_index: usize) -> bool {
        self.split_indices.contains(&record_index)
    }
}

/// Choose which symmetric records to split this epoch.
///
/// Exactly `round(p * N_sym)` symmetric records are drawn uniformly
/// without replacement. Deterministic in `(manifest, p, seed)`.
pub fn plan_epoch(manifest: &Manifest, p: f64, seed: u64) -> Result<EpochPlan> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::Contract(format!(
            "split fraction must be in [0, 1], got {p}"
        )));
    }
    let sym_indices: Vec<usize> = manifest
        .records()
        .iter()
        .enumerate()
        .filter(|(_, r)| r.symmetric)
        .map(|(i, _)| i)
        .collect();
    let n_total = manifest.len();
    let n_sym = sym_indices.len();
    let n_split = (p * n_sym as f64).round() as usize;

    let mut rng = seeds::rng(seed, "epoch-plan", 0);
    let chosen = rand::seq::index::sample(&mut rng, n_sym, n_split);
    let split_indices: HashSet<usize> = chosen.iter().map(|k| sym_indices[k]).collect();

    let split_flags = manifest
        .records()
        .iter()
        .enumerate()
        .map(|(i, r)| (r.id.clone(), split_indices.contains(&i)))
        .collect();

    Ok(EpochPlan {
        epoch_seed: seed,
        split_flags,
        n_total,
        n_sym,
        n_split,
        n_effective: n_total + n_split,
        split_indices,
    })
}

/// One slot of a planned batch: a record and whether it travels as a
/// split pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PlannedItem {
    pub record_index: usize,
    pub split: bool,
}

/// Shuffle the epoch's records and chunk them into batches of
/// `batch_size_slots` items. A full item occupies one slot and contributes
/// one image; a split item occupies one slot and contributes two images
/// that always stay in the same batch.
pub fn assemble_batches(
    plan: &EpochPlan,
    manifest: &Manifest,
    batch_size_slots: usize,
    seed: u64,
) -> Result<Vec<Vec<PlannedItem>>> {
    if batch_size_slots == 0 {
        return Err(Error::Contract("batch size must be at least 1 slot".into()));
    }
    let mut items: Vec<PlannedItem> = (0..manifest.len())
        .map(|record_index| PlannedItem {
            record_index,
            split: plan.is_split(record_index),
        })
        .collect();
    let mut rng = seeds::rng(seed, "batch-shuffle", 0);
    items.shuffle(&mut rng);
    Ok(items
        .chunks(batch_size_slots)
        .map(|chunk| chunk.to_vec())
        .collect())
}

/// A batch item before normalization: raw 8-bit images.
#[derive(Debug, Clone, PartialEq)]
pub enum RawBatchItem {
    Full {
        image: RasterImage,
        label: usize,
        rho: f64,
    },
    HalfPair {
        left: RasterImage,
        right: RasterImage,
        label: usize,
        rho: f64,
    },
}

/// A materialized batch item: normalized pixel tensors ready for the
/// embedder. A half pair's two canvases always travel together.
#[derive(Debug, Clone, PartialEq)]
pub enum BatchItem {
    Full {
        tensor: Vec<f64>,
        label: usize,
        rho: f64,
    },
    HalfPair {
        left: Vec<f64>,
        right: Vec<f64>,
        label: usize,
        rho: f64,
    },
}

impl BatchItem {
    pub fn label(&self) -> usize {
        match self {
            BatchItem::Full { label, .. } | BatchItem::HalfPair { label, .. } => *label,
        }
    }

    pub fn rho(&self) -> f64 {
        match self {
            BatchItem::Full { rho, .. } | BatchItem::HalfPair { rho, .. } => *rho,
        }
    }

    pub fn image_count(&self) -> usize {
        match self {
            BatchItem::Full { .. } => 1,
            BatchItem::HalfPair { .. } => 2,
        }
    }
}

/// Pluggable image access for manifest records.
pub trait ImageProvider {
    fn image(&self, record: &FaceRecord) -> Result<RasterImage>;
}

/// Loads PGM/PPM files from disk, resolving `record.path` against a base
/// directory.
pub struct DiskImages {
    base: PathBuf,
}

impl DiskImages {
    pub fn new(base: impl Into<PathBuf>) -> Self {
        Self { base: base.into() }
    }
}

impl ImageProvider for DiskImages {
    fn image(&self, record: &FaceRecord) -> Result<RasterImage> {
        RasterImage::load(&self.base.join(&record.path))
    }
}

/// In-memory image store keyed by record id.
#[derive(Default)]
pub struct MemoryImages {
    map: HashMap<String, RasterImage>,
}

impl MemoryImages {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, id: impl Into<String>, image: RasterImage) {
        self.map.insert(id.into(), image);
    }
}

impl ImageProvider for MemoryImages {
    fn image(&self, record: &FaceRecord) -> Result<RasterImage> {
        self.map
            .get(&record.id)
            .cloned()
            .ok_or_else(|| Error::Data(format!("no image stored for id '{}'", record.id)))
    }
}

/// The nose column a record splits at.
pub fn split_column(record: &FaceRecord, width: usize) -> Result<usize> {
    let n_x = record.landmarks.nose().x.round();
    if !n_x.is_finite() || n_x < 1.0 || n_x > (width - 1) as f64 {
        return Err(Error::Data(format!(
            "record '{}': nose column {n_x} cannot split a width-{width} image",
            record.id
        )));
    }
    Ok(n_x as usize)
}

/// Load one planned item's pixels, splitting it if the plan says so.
pub fn load_item(
    manifest: &Manifest,
    provider: &impl ImageProvider,
    item: PlannedItem,
) -> Result<RawBatchItem> {
    let record = &manifest.records()[item.record_index];
    let image = provider.image(record)?;
    if !item.split {
        return Ok(RawBatchItem::Full {
            image,
            label: record.label,
            rho: record.rho,
        });
    }
    let n_x = split_column(record, image.width())?;
    let pair = geometry::split_face(&image, n_x)?;
    Ok(RawBatchItem::HalfPair {
        left: pair.left().clone(),
        right: pair.right().clone(),
        label: record.label,
        rho: record.rho,
    })
}

/// Map a pixel to the network input range.
#[inline]
pub fn normalize_pixel(v: f64) -> f64 {
    (v - 127.5) / 128.0
}

fn to_tensor(img: &RasterImage) -> Vec<f64> {
    img.data()
        .iter()
        .map(|&v| normalize_pixel(v as f64))
        .collect()
}

/// Normalize an item's pixels and flip horizontally with probability
/// `flip_prob`. Flipping a half pair mirrors both canvases and swaps the
/// left/right roles: the mirror of a left hemi face is a right hemi face.
pub fn augment(item: &RawBatchItem, flip_prob: f64, rng: &mut impl Rng) -> BatchItem {
    debug_assert!((0.0..=1.0).contains(&flip_prob));
    let flip = rng.random_bool(flip_prob);
    match item {
        RawBatchItem::Full { image, label, rho } => {
            let image = if flip {
                image.mirror_horizontal()
            } else {
                image.clone()
            };
            BatchItem::Full {
                tensor: to_tensor(&image),
                label: *label,
                rho: *rho,
            }
        }
        RawBatchItem::HalfPair {
            left,
            right,
            label,
            rho,
        } => {
            let (l, r) = if flip {
                (right.mirror_horizontal(), left.mirror_horizontal())
            } else {
                (left.clone(), right.clone())
            };
            BatchItem::HalfPair {
                left: to_tensor(&l),
                right: to_tensor(&r),
                label: *label,
                rho: *rho,
            }
        }
    }
}
