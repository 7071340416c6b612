//! Recordings, peak annotations, T:R labels and cross-validation splits.
//!
//! Two on-disk formats are understood:
//!
//! * **native-json**: one object per lead,
//!   `{"sampling_rate_hz", "lead_id", "samples", "r_peaks", "t_peaks"}`, with
//!   0-based sample offsets. A file may also hold an array of such objects
//!   (one per lead) for multi-lead screening input, or a bundle
//!   `{"metadata": .., "recordings": [..]}` as written by the tools.
//! * **annotated-csv**: a `sample_index,amplitude_mv` CSV plus a sidecar
//!   `.ann` CSV of `index,type` rows where `type` is `R` or `T`.
//!
//! Recordings are cut into contiguous, non-overlapping 10-second windows.
//! Each R peak is paired with the first T peak that follows it before the
//! next R peak; a pair is kept in a window only if both peaks fall inside it.

use std::fs;
use std::path::{Path, PathBuf};

use log::{debug, warn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Length of one analysis window in seconds.
pub const SEGMENT_SECONDS: f64 = 10.0;

/// Labels above this magnitude are legal but physiologically suspicious.
pub const LABEL_SANITY_BOUND: f64 = 1.5;

/// Number of samples in a 10-second window at `sampling_rate_hz`.
pub fn samples_per_segment(sampling_rate_hz: f64) -> usize {
    (SEGMENT_SECONDS * sampling_rate_hz).round() as usize
}

/// One single-lead window of samples (millivolts).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EcgSegment {
    pub samples: Vec<f64>,
    pub sampling_rate_hz: f64,
    pub lead_id: String,
    pub start_time_s: f64,
}

impl EcgSegment {
    pub fn new(samples: Vec<f64>, sampling_rate_hz: f64, lead_id: impl Into<String>) -> Self {
        EcgSegment {
            samples,
            sampling_rate_hz,
            lead_id: lead_id.into(),
            start_time_s: 0.0,
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Human-readable identity used in error messages.
    pub fn name(&self) -> String {
        format!("{}@{:.1}s", self.lead_id, self.start_time_s)
    }

    /// Same metadata, different samples.
    pub fn with_samples(&self, samples: Vec<f64>) -> Self {
        EcgSegment {
            samples,
            sampling_rate_hz: self.sampling_rate_hz,
            lead_id: self.lead_id.clone(),
            start_time_s: self.start_time_s,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sampling_rate_hz > 0.0) || !self.sampling_rate_hz.is_finite() {
            return Err(Error::Validation {
                segment: self.name(),
                message: format!("sampling rate must be positive, got {}", self.sampling_rate_hz),
            });
        }
        if let Some(i) = self.samples.iter().position(|v| !v.is_finite()) {
            return Err(Error::Validation {
                segment: self.name(),
                message: format!("non-finite sample at index {i}"),
            });
        }
        Ok(())
    }
}

/// Paired R and T peak sample indices within one segment.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PeakAnnotations {
    pub r_indices: Vec<usize>,
    pub t_indices: Vec<usize>,
}

impl PeakAnnotations {
    pub fn new(r_indices: Vec<usize>, t_indices: Vec<usize>) -> Self {
        PeakAnnotations {
            r_indices,
            t_indices,
        }
    }

    /// Number of annotated beats.
    pub fn count(&self) -> usize {
        self.r_indices.len()
    }

    /// Checks pairing, ordering and bounds against `segment`.
    pub fn validate(&self, segment: &EcgSegment) -> Result<()> {
        let err = |message: String| Error::Validation {
            segment: segment.name(),
            message,
        };
        if self.r_indices.len() != self.t_indices.len() {
            return Err(err(format!(
                "{} R peaks but {} T peaks",
                self.r_indices.len(),
                self.t_indices.len()
            )));
        }
        for (kind, idx) in [("R", &self.r_indices), ("T", &self.t_indices)] {
            if let Some(&i) = idx.iter().find(|&&i| i >= segment.len()) {
                return Err(err(format!(
                    "{kind} annotation at index {i} outside segment of {} samples",
                    segment.len()
                )));
            }
            if idx.windows(2).any(|w| w[1] <= w[0]) {
                return Err(err(format!("{kind} annotations are not strictly increasing")));
            }
        }
        Ok(())
    }
}

/// Average T:R ratio of a segment: the sum of T-peak amplitudes over the sum
/// of R-peak amplitudes. The sign of the T wave is kept.
pub fn average_tr_ratio(segment: &EcgSegment, ann: &PeakAnnotations) -> Result<f64> {
    ann.validate(segment)?;
    if ann.count() == 0 {
        return Err(Error::DegenerateLabel(format!(
            "segment {} has no annotated beats",
            segment.name()
        )));
    }
    let t_sum: f64 = ann.t_indices.iter().map(|&i| segment.samples[i]).sum();
    let r_sum: f64 = ann.r_indices.iter().map(|&i| segment.samples[i]).sum();
    if r_sum == 0.0 || !r_sum.is_finite() {
        return Err(Error::DegenerateLabel(format!(
            "segment {} has zero summed R amplitude",
            segment.name()
        )));
    }
    let ratio = t_sum / r_sum;
    if ratio.abs() > LABEL_SANITY_BOUND {
        warn!(
            "segment {}: T:R ratio {ratio:.3} exceeds sanity bound {LABEL_SANITY_BOUND}",
            segment.name()
        );
    }
    Ok(ratio)
}

/// A segment with its annotations and ground-truth label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledExample {
    pub id: String,
    pub segment: EcgSegment,
    pub annotations: PeakAnnotations,
    pub tr_ratio: f64,
}

/// Train/validation/test partition for one cross-validation fold.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSplit<E = LabeledExample> {
    pub fold_index: usize,
    pub train: Vec<E>,
    pub validation: Vec<E>,
    pub test: Vec<E>,
}

/// Fraction of the non-test primary data held out for validation.
pub const VALIDATION_FRACTION: f64 = 0.2;

/// Builds `folds` cross-validation splits.
///
/// The primary examples are shuffled once and cut into `folds` contiguous
/// test blocks, so the test sets partition the primary data. The rest of the
/// primary data is reshuffled per fold and 20% of it becomes validation.
/// Bolster examples are appended to every training set and nowhere else.
pub fn make_cv_splits<E: Clone>(
    primary: &[E],
    bolster: &[E],
    folds: usize,
    seed: u64,
) -> Result<Vec<DatasetSplit<E>>> {
    if folds < 2 {
        return Err(Error::Config(format!("need at least 2 folds, got {folds}")));
    }
    if primary.len() < folds {
        return Err(Error::Config(format!(
            "{} primary examples cannot fill {folds} folds",
            primary.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..primary.len()).collect();
    order.shuffle(&mut rng);

    let n = primary.len();
    let mut splits = Vec::with_capacity(folds);
    for k in 0..folds {
        let (lo, hi) = (k * n / folds, (k + 1) * n / folds);
        let test: Vec<E> = order[lo..hi].iter().map(|&i| primary[i].clone()).collect();
        let mut rest: Vec<usize> = order[..lo].iter().chain(&order[hi..]).copied().collect();
        let mut fold_rng = ChaCha8Rng::seed_from_u64(seed ^ (0x9e37_79b9_7f4a_7c15u64.wrapping_mul(k as u64 + 1)));
        rest.shuffle(&mut fold_rng);
        let n_val = (rest.len() as f64 * VALIDATION_FRACTION).round() as usize;
        let validation = rest[..n_val].iter().map(|&i| primary[i].clone()).collect();
        let mut train: Vec<E> = rest[n_val..].iter().map(|&i| primary[i].clone()).collect();
        train.extend(bolster.iter().cloned());
        splits.push(DatasetSplit {
            fold_index: k,
            train,
            validation,
            test,
        });
    }
    Ok(splits)
}

/// On-disk recording formats.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RecordingFormat {
    NativeJson,
    AnnotatedCsv,
}

impl std::str::FromStr for RecordingFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "native-json" | "json" => Ok(RecordingFormat::NativeJson),
            "annotated-csv" | "csv" => Ok(RecordingFormat::AnnotatedCsv),
            other => Err(Error::Config(format!("unknown recording format '{other}'"))),
        }
    }
}

/// A full single-lead recording with raw (unpaired) peak annotations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Recording {
    pub sampling_rate_hz: f64,
    pub lead_id: String,
    pub samples: Vec<f64>,
    #[serde(default)]
    pub r_peaks: Vec<usize>,
    #[serde(default)]
    pub t_peaks: Vec<usize>,
}

impl Recording {
    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sampling_rate_hz
    }

    fn validate(&self, path: &Path) -> Result<()> {
        if !(self.sampling_rate_hz > 0.0) || !self.sampling_rate_hz.is_finite() {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: None,
                message: format!("sampling_rate_hz must be positive, got {}", self.sampling_rate_hz),
            });
        }
        if let Some(i) = self.samples.iter().position(|v| !v.is_finite()) {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: None,
                message: format!("samples[{i}] is not finite"),
            });
        }
        Ok(())
    }

    /// Cuts the recording into 10-second windows with paired annotations.
    ///
    /// Annotations beyond the end of the recording are a validation error
    /// naming the window they would belong to.
    pub fn windows(&self) -> Result<Vec<(EcgSegment, PeakAnnotations)>> {
        let win = samples_per_segment(self.sampling_rate_hz);
        if win == 0 {
            return Err(Error::Config("sampling rate too low for 10-second windows".into()));
        }
        let count = self.samples.len() / win;
        for (kind, peaks) in [("R", &self.r_peaks), ("T", &self.t_peaks)] {
            if let Some(&i) = peaks.iter().find(|&&i| i >= self.samples.len()) {
                let seg = (i / win).min(count.saturating_sub(1));
                return Err(Error::Validation {
                    segment: format!("{}@{:.1}s", self.lead_id, seg as f64 * SEGMENT_SECONDS),
                    message: format!(
                        "{kind} annotation at index {i} beyond the recording's {} samples",
                        self.samples.len()
                    ),
                });
            }
        }
        let pairs = pair_peaks(&self.r_peaks, &self.t_peaks);
        let remainder = self.samples.len() - count * win;
        if remainder > 0 {
            debug!(
                "{}: discarding trailing {:.2}s shorter than one window",
                self.lead_id,
                remainder as f64 / self.sampling_rate_hz
            );
        }
        let mut out = Vec::with_capacity(count);
        for k in 0..count {
            let (lo, hi) = (k * win, (k + 1) * win);
            let mut seg = EcgSegment::new(self.samples[lo..hi].to_vec(), self.sampling_rate_hz, self.lead_id.clone());
            seg.start_time_s = lo as f64 / self.sampling_rate_hz;
            let mut ann = PeakAnnotations::default();
            for &(r, t) in &pairs {
                if (lo..hi).contains(&r) && (lo..hi).contains(&t) {
                    ann.r_indices.push(r - lo);
                    ann.t_indices.push(t - lo);
                } else if (lo..hi).contains(&r) || (lo..hi).contains(&t) {
                    debug!("{}: beat at {r}/{t} straddles window {k}; dropped", self.lead_id);
                }
            }
            ann.validate(&seg)?;
            out.push((seg, ann));
        }
        Ok(out)
    }
}

/// Pairs each R peak with the first T peak after it and before the next R.
fn pair_peaks(r_peaks: &[usize], t_peaks: &[usize]) -> Vec<(usize, usize)> {
    let mut r = r_peaks.to_vec();
    let mut t = t_peaks.to_vec();
    r.sort_unstable();
    r.dedup();
    t.sort_unstable();
    t.dedup();
    let mut pairs = Vec::with_capacity(r.len());
    let mut ti = 0;
    for (k, &ri) in r.iter().enumerate() {
        let next_r = r.get(k + 1).copied().unwrap_or(usize::MAX);
        while ti < t.len() && t[ti] <= ri {
            ti += 1;
        }
        if ti < t.len() && t[ti] < next_r {
            pairs.push((ri, t[ti]));
            ti += 1;
        }
    }
    pairs
}

fn parse_err(path: &Path, line: Option<usize>, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        message: message.into(),
    }
}

/// Reads every lead stored in a file.
pub fn read_recordings(path: &Path, format: RecordingFormat) -> Result<Vec<Recording>> {
    let recordings = match format {
        RecordingFormat::NativeJson => {
            let text = fs::read_to_string(path)?;
            let value: serde_json::Value =
                serde_json::from_str(&text).map_err(|e| parse_err(path, Some(e.line()), e.to_string()))?;
            let value = match value {
                serde_json::Value::Object(mut o) if o.contains_key("recordings") => o.remove("recordings").expect("checked"),
                v => v,
            };
            let recs: Vec<Recording> = if value.is_array() {
                serde_json::from_value(value)
            } else {
                serde_json::from_value(value).map(|r| vec![r])
            }
            .map_err(|e| parse_err(path, None, e.to_string()))?;
            recs
        }
        RecordingFormat::AnnotatedCsv => vec![read_annotated_csv(path)?],
    };
    for r in &recordings {
        r.validate(path)?;
    }
    Ok(recordings)
}

/// Reads a single-lead file. Multi-lead files are rejected.
pub fn read_recording(path: &Path, format: RecordingFormat) -> Result<Recording> {
    let mut recs = read_recordings(path, format)?;
    if recs.len() != 1 {
        return Err(parse_err(path, None, format!("expected one lead, found {}", recs.len())));
    }
    Ok(recs.remove(0))
}

/// Loads a recording and cuts it into annotated 10-second windows.
pub fn load_recording(path: &Path, format: RecordingFormat) -> Result<Vec<(EcgSegment, PeakAnnotations)>> {
    let mut out = Vec::new();
    for rec in read_recordings(path, format)? {
        out.extend(rec.windows()?);
    }
    Ok(out)
}

/// Writes one or more leads as native-json (an object for one lead, an array otherwise).
pub fn write_native_json(path: &Path, recordings: &[Recording]) -> Result<()> {
    let file = std::io::BufWriter::new(fs::File::create(path)?);
    if recordings.len() == 1 {
        serde_json::to_writer(file, &recordings[0])?;
    } else {
        serde_json::to_writer(file, recordings)?;
    }
    Ok(())
}

/// Writes leads as a native-json bundle `{"metadata": .., "recordings": [..]}`.
pub fn write_native_json_bundle(path: &Path, recordings: &[Recording], metadata: &serde_json::Value) -> Result<()> {
    let file = std::io::BufWriter::new(fs::File::create(path)?);
    serde_json::to_writer(file, &serde_json::json!({ "metadata": metadata, "recordings": recordings }))?;
    Ok(())
}

/// Path of the `.ann` sidecar for an annotated-csv signal file.
pub fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("ann")
}

/// Sampling rate, when not given in a `# sampling_rate_hz=` comment, is
/// inferred from a `time_s` column or defaults to 500 Hz.
fn read_annotated_csv(path: &Path) -> Result<Recording> {
    let text = fs::read_to_string(path)?;
    let mut sampling_rate_hz = 500.0;
    let mut lead_id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "lead".into());
    let mut samples: Vec<(usize, f64)> = Vec::new();
    let mut header_seen = false;
    for (lineno, line) in text.lines().enumerate() {
        let line_no = lineno + 1;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        if let Some(meta) = line.strip_prefix('#') {
            for kv in meta.split([',', ';']) {
                if let Some((k, v)) = kv.split_once('=') {
                    match k.trim() {
                        "sampling_rate_hz" => {
                            sampling_rate_hz = v
                                .trim()
                                .parse()
                                .map_err(|_| parse_err(path, Some(line_no), "bad sampling_rate_hz"))?
                        }
                        "lead_id" => lead_id = v.trim().to_string(),
                        _ => {}
                    }
                }
            }
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if !header_seen {
            header_seen = true;
            if fields.first() == Some(&"sample_index") {
                if fields.get(1) != Some(&"amplitude_mv") {
                    return Err(parse_err(path, Some(line_no), "expected header sample_index,amplitude_mv"));
                }
                continue;
            }
        }
        if fields.len() < 2 {
            return Err(parse_err(path, Some(line_no), "expected 2 fields"));
        }
        let idx: usize = fields[0]
            .parse()
            .map_err(|_| parse_err(path, Some(line_no), format!("field sample_index: '{}'", fields[0])))?;
        let amp: f64 = fields[1]
            .parse()
            .map_err(|_| parse_err(path, Some(line_no), format!("field amplitude_mv: '{}'", fields[1])))?;
        samples.push((idx, amp));
    }
    for (k, &(idx, _)) in samples.iter().enumerate() {
        if idx != k {
            return Err(parse_err(path, None, format!("sample_index {idx} where {k} expected")));
        }
    }
    let samples: Vec<f64> = samples.into_iter().map(|(_, v)| v).collect();

    let ann_path = sidecar_path(path);
    let (mut r_peaks, mut t_peaks) = (Vec::new(), Vec::new());
    if ann_path.exists() {
        let ann_text = fs::read_to_string(&ann_path)?;
        for (lineno, line) in ann_text.lines().enumerate() {
            let line_no = lineno + 1;
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') || line.starts_with("index") {
                continue;
            }
            let (idx, kind) = line
                .split_once(',')
                .ok_or_else(|| parse_err(&ann_path, Some(line_no), "expected index,type"))?;
            let idx: usize = idx
                .trim()
                .parse()
                .map_err(|_| parse_err(&ann_path, Some(line_no), format!("field index: '{}'", idx.trim())))?;
            match kind.trim() {
                "R" => r_peaks.push(idx),
                "T" => t_peaks.push(idx),
                other => {
                    return Err(parse_err(&ann_path, Some(line_no), format!("field type: '{other}' is not R or T")))
                }
            }
        }
    } else {
        warn!("{}: no sidecar annotations at {}", path.display(), ann_path.display());
    }
    Ok(Recording {
        sampling_rate_hz,
        lead_id,
        samples,
        r_peaks,
        t_peaks,
    })
}
