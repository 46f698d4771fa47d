//! Sample manifest, canopy-coverage statistics, the full-coverage rule and
//! the append-only screening journal.
//!
//! Paths inside a manifest may be relative; they resolve against the
//! directory holding the manifest file.

mod journal;

use std::collections::HashSet;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use chrono::{DateTime, SubsecRound, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::pseudolabel::BinaryMask;
use crate::raster::{self, ImageFormat, RasterError};

pub use journal::{apply_verdict, record_decision, replay_journal, Replay, ReplayWarning, ScreeningDecision, Verdict};

pub const MANIFEST_VERSION: u32 = 1;
pub const COVERAGE_BINS: usize = 20;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{}: {source}", path.display())]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("duplicate sample id {0:?}")]
    DuplicateId(String),
    #[error("unsupported manifest version {0}")]
    UnknownVersion(u32),
    #[error("unknown sample id {0:?}")]
    UnknownSample(String),
    #[error("invalid sample id {0:?}: use letters, digits, '.', '_' or '-'")]
    InvalidId(String),
    #[error(transparent)]
    Raster(#[from] RasterError),
}

pub type Result<T, E = CorpusError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SampleStatus {
    #[default]
    Pending,
    Accepted,
    Rejected,
    FullCoverage,
}

impl SampleStatus {
    pub const ALL: [SampleStatus; 4] =
        [SampleStatus::Pending, SampleStatus::Accepted, SampleStatus::Rejected, SampleStatus::FullCoverage];

    pub fn as_str(self) -> &'static str {
        match self {
            SampleStatus::Pending => "pending",
            SampleStatus::Accepted => "accepted",
            SampleStatus::Rejected => "rejected",
            SampleStatus::FullCoverage => "full_coverage",
        }
    }
}

impl fmt::Display for SampleStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SampleStatus {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        Self::ALL.into_iter().find(|v| v.as_str() == s).ok_or_else(|| format!("unknown status {s:?}"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub id: String,
    pub image_path: PathBuf,
    pub depth_path: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask_path: Option<PathBuf>,
    pub source: String,
    pub split: Split,
    #[serde(default)]
    pub status: SampleStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub coverage: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub created: DateTime<Utc>,
    pub samples: Vec<SampleRecord>,
    #[serde(skip)]
    root: PathBuf,
}

/// Sample ids double as file stems, so they are restricted to a portable
/// character set.
pub fn validate_id(id: &str) -> Result<()> {
    let ok = !id.is_empty()
        && id != "."
        && id != ".."
        && id.chars().all(|c| c.is_ascii_alphanumeric() || matches!(c, '.' | '_' | '-'));
    if ok { Ok(()) } else { Err(CorpusError::InvalidId(id.to_string())) }
}

impl Manifest {
    /// Empty manifest whose relative paths resolve against `root`.
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { version: MANIFEST_VERSION, created: Utc::now().trunc_subsecs(0), samples: Vec::new(), root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn set_root(&mut self, root: impl Into<PathBuf>) {
        self.root = root.into();
    }

    pub fn resolve(&self, path: &Path) -> PathBuf {
        if path.is_absolute() { path.to_path_buf() } else { self.root.join(path) }
    }

    pub fn get(&self, id: &str) -> Option<&SampleRecord> {
        self.samples.iter().find(|s| s.id == id)
    }

    pub fn get_mut(&mut self, id: &str) -> Option<&mut SampleRecord> {
        self.samples.iter_mut().find(|s| s.id == id)
    }

    /// Checks version, id syntax and id uniqueness.
    pub fn validate(&self) -> Result<()> {
        if self.version != MANIFEST_VERSION {
            return Err(CorpusError::UnknownVersion(self.version));
        }
        let mut seen = HashSet::with_capacity(self.samples.len());
        for s in &self.samples {
            validate_id(&s.id)?;
            if !seen.insert(s.id.as_str()) {
                return Err(CorpusError::DuplicateId(s.id.clone()));
            }
        }
        Ok(())
    }
}

pub fn load_manifest(path: &Path) -> Result<Manifest> {
    let bytes = std::fs::read(path).map_err(|source| CorpusError::Io { path: path.to_path_buf(), source })?;
    let mut m: Manifest =
        serde_json::from_slice(&bytes).map_err(|source| CorpusError::Json { path: path.to_path_buf(), source })?;
    m.validate()?;
    m.root = path.parent().map(Path::to_path_buf).unwrap_or_default();
    Ok(m)
}

/// Writes pretty JSON atomically.
pub fn save_manifest(m: &Manifest, path: &Path) -> Result<()> {
    m.validate()?;
    let mut json = serde_json::to_vec_pretty(m).map_err(|source| CorpusError::Json { path: path.to_path_buf(), source })?;
    json.push(b'\n');
    raster::write_atomic(path, &json).map_err(|source| CorpusError::Io { path: path.to_path_buf(), source })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CoverageHistogram {
    pub bins: usize,
    pub counts: Vec<u64>,
    pub total: u64,
}

impl CoverageHistogram {
    pub fn new(bins: usize) -> Self {
        Self { bins, counts: vec![0; bins], total: 0 }
    }

    /// `floor(coverage · bins)`, with coverage 1.0 in the last bin.
    pub fn bin_of(&self, coverage: f64) -> usize {
        ((coverage.clamp(0.0, 1.0) * self.bins as f64) as usize).min(self.bins - 1)
    }

    pub fn add(&mut self, coverage: f64) {
        let b = self.bin_of(coverage);
        self.counts[b] += 1;
        self.total += 1;
    }

    /// Histogram of the coverages already cached on the records.
    pub fn from_cached(m: &Manifest, bins: usize) -> Self {
        let mut h = Self::new(bins);
        m.samples.iter().filter_map(|s| s.coverage).for_each(|c| h.add(c));
        h
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkippedSample {
    pub id: String,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageStats {
    pub histogram: CoverageHistogram,
    pub skipped: Vec<SkippedSample>,
}

/// Loads a mask file and checks it is binary.
pub fn read_mask(path: &Path) -> Result<BinaryMask> {
    Ok(BinaryMask::from_raster(&raster::load_gray(path)?)?)
}

/// Reads every sample's mask, caches its foreground fraction on the record
/// and bins it. Samples without a mask are ignored; unreadable masks are
/// skipped and reported, and their cached coverage is cleared.
pub fn coverage_stats(m: &mut Manifest, bins: usize) -> CoverageStats {
    let mut histogram = CoverageHistogram::new(bins.max(1));
    let mut skipped = Vec::new();
    let root = m.root.clone();
    for s in &mut m.samples {
        let Some(mask_path) = &s.mask_path else { continue };
        let path = if mask_path.is_absolute() { mask_path.clone() } else { root.join(mask_path) };
        match read_mask(&path) {
            Ok(mask) => {
                let c = mask.coverage();
                s.coverage = Some(c);
                histogram.add(c);
            }
            Err(e) => {
                log::warn!("sample {}: {e}", s.id);
                s.coverage = None;
                skipped.push(SkippedSample { id: s.id.clone(), error: e.to_string() });
            }
        }
    }
    CoverageStats { histogram, skipped }
}

/// Manifest-relative location of a sample's full-coverage mask.
pub fn full_coverage_mask_path(id: &str) -> PathBuf {
    Path::new("masks").join("full_coverage").join(format!("{id}.png"))
}

/// Writes the all-ones mask matching the sample's image without touching
/// the record. Safe to repeat.
pub fn write_full_coverage_mask(m: &Manifest, id: &str) -> Result<BinaryMask> {
    validate_id(id)?;
    let s = m.get(id).ok_or_else(|| CorpusError::UnknownSample(id.to_string()))?;
    let (w, h) = raster::image_dimensions(&m.resolve(&s.image_path))?;
    let mask = BinaryMask::all_ones(w, h);
    let path = m.resolve(&full_coverage_mask_path(id));
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|source| CorpusError::Io { path: dir.to_path_buf(), source })?;
    }
    raster::save_gray(&mask.to_raster(), &path, ImageFormat::Png)?;
    Ok(mask)
}

/// Gives a sample the all-ones mask of its image size and marks it
/// full-coverage. On error the record is left unchanged.
pub fn assign_full_coverage(m: &mut Manifest, id: &str) -> Result<BinaryMask> {
    let mask = write_full_coverage_mask(m, id)?;
    let s = m.get_mut(id).expect("checked by write_full_coverage_mask");
    s.mask_path = Some(full_coverage_mask_path(id));
    s.status = SampleStatus::FullCoverage;
    s.coverage = Some(1.0);
    Ok(mask)
}

/// Per-status sample counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct StatusCounts {
    pub pending: u64,
    pub accepted: u64,
    pub rejected: u64,
    pub full_coverage: u64,
}

impl StatusCounts {
    pub fn of(m: &Manifest) -> Self {
        let mut c = Self::default();
        for s in &m.samples {
            match s.status {
                SampleStatus::Pending => c.pending += 1,
                SampleStatus::Accepted => c.accepted += 1,
                SampleStatus::Rejected => c.rejected += 1,
                SampleStatus::FullCoverage => c.full_coverage += 1,
            }
        }
        c
    }
}

/// Summary shared by the `stats` command and the review service.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub samples: u64,
    pub status: StatusCounts,
    pub coverage: CoverageHistogram,
}

impl CorpusStats {
    /// Uses the coverages cached on the records.
    pub fn of(m: &Manifest) -> Self {
        Self {
            samples: m.samples.len() as u64,
            status: StatusCounts::of(m),
            coverage: CoverageHistogram::from_cached(m, COVERAGE_BINS),
        }
    }
}
