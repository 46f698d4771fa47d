use std::collections::HashMap;
use std::fmt;
use std::fs::OpenOptions;
use std::io::{Read, Seek, SeekFrom, Write};
use std::path::Path;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use super::{full_coverage_mask_path, CorpusError, Manifest, Result, SampleRecord, SampleStatus};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Accept,
    Reject,
    FullCoverage,
}

impl Verdict {
    pub fn status(self) -> SampleStatus {
        match self {
            Verdict::Accept => SampleStatus::Accepted,
            Verdict::Reject => SampleStatus::Rejected,
            Verdict::FullCoverage => SampleStatus::FullCoverage,
        }
    }
}

/// One line of the screening journal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScreeningDecision {
    pub sample_id: String,
    pub verdict: Verdict,
    pub at: DateTime<Utc>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub operator: Option<String>,
}

/// Sets `record` to the state implied by `verdict`, starting from the
/// record as it was in the base manifest. Accept and reject keep the
/// original pseudo-mask.
pub fn apply_verdict(record: &mut SampleRecord, base: &SampleRecord, verdict: Verdict) {
    record.status = verdict.status();
    match verdict {
        Verdict::Accept | Verdict::Reject => {
            record.mask_path = base.mask_path.clone();
            record.coverage = base.coverage;
        }
        Verdict::FullCoverage => {
            record.mask_path = Some(full_coverage_mask_path(&record.id));
            record.coverage = Some(1.0);
        }
    }
}

/// Appends one JSON line and syncs it to disk before returning. A torn final
/// line left by an earlier crash is terminated first so that it cannot
/// swallow the new record.
pub fn record_decision(path: &Path, decision: &ScreeningDecision) -> Result<()> {
    let io = |source| CorpusError::Io { path: path.to_path_buf(), source };
    let mut line = serde_json::to_vec(decision).map_err(|source| CorpusError::Json { path: path.to_path_buf(), source })?;
    line.push(b'\n');
    let mut f = OpenOptions::new().read(true).append(true).create(true).open(path).map_err(io)?;
    let len = f.metadata().map_err(io)?.len();
    if len > 0 {
        let mut last = [0u8];
        f.seek(SeekFrom::Start(len - 1)).map_err(io)?;
        f.read_exact(&mut last).map_err(io)?;
        if last[0] != b'\n' {
            line.insert(0, b'\n');
        }
    }
    f.write_all(&line).map_err(io)?;
    f.flush().map_err(io)?;
    f.sync_data().map_err(io)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ReplayWarning {
    Truncated { line: usize },
    Malformed { line: usize, error: String },
    UnknownSample { line: usize, id: String },
}

impl fmt::Display for ReplayWarning {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ReplayWarning::Truncated { line } => write!(f, "journal line {line}: truncated record skipped"),
            ReplayWarning::Malformed { line, error } => write!(f, "journal line {line}: malformed record skipped: {error}"),
            ReplayWarning::UnknownSample { line, id } => write!(f, "journal line {line}: unknown sample {id:?} skipped"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Replay {
    pub manifest: Manifest,
    pub applied: usize,
    pub warnings: Vec<ReplayWarning>,
}

/// Folds the journal over `base`, last decision per sample winning. A
/// missing journal is an empty one. Bad lines are skipped with a warning.
pub fn replay_journal(path: &Path, base: &Manifest) -> Result<Replay> {
    let bytes = match std::fs::read(path) {
        Ok(b) => b,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Vec::new(),
        Err(source) => return Err(CorpusError::Io { path: path.to_path_buf(), source }),
    };
    let index: HashMap<&str, usize> = base.samples.iter().enumerate().map(|(i, s)| (s.id.as_str(), i)).collect();
    let mut manifest = base.clone();
    let mut warnings = Vec::new();
    let mut applied = 0;

    let complete = bytes.last().is_none_or(|&b| b == b'\n');
    let mut lines: Vec<&[u8]> = bytes.split(|&b| b == b'\n').collect();
    // `split` yields a trailing empty piece after the final newline.
    lines.pop();
    if !complete {
        warnings.push(ReplayWarning::Truncated { line: lines.len() + 1 });
    }

    for (n, raw) in lines.iter().enumerate() {
        let line = n + 1;
        if raw.iter().all(u8::is_ascii_whitespace) {
            continue;
        }
        let d: ScreeningDecision = match serde_json::from_slice(raw) {
            Ok(d) => d,
            Err(e) => {
                warnings.push(ReplayWarning::Malformed { line, error: e.to_string() });
                continue;
            }
        };
        let Some(&i) = index.get(d.sample_id.as_str()) else {
            warnings.push(ReplayWarning::UnknownSample { line, id: d.sample_id });
            continue;
        };
        apply_verdict(&mut manifest.samples[i], &base.samples[i], d.verdict);
        applied += 1;
    }
    warnings.sort_by_key(|w| match w {
        ReplayWarning::Truncated { line } | ReplayWarning::Malformed { line, .. } | ReplayWarning::UnknownSample { line, .. } => *line,
    });
    for w in &warnings {
        log::warn!("{}: {w}", path.display());
    }
    Ok(Replay { manifest, applied, warnings })
}
