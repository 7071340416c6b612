//! Day-long screening: per-segment ratio prediction on each lead, the
//! two-consecutive-segments eligibility rule, and report artifacts.

use std::path::Path;

use log::{debug, info, warn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::{samples_per_segment, EcgSegment, Recording, SEGMENT_SECONDS};
use crate::models::{image_pixels, Predictor};
use crate::preprocess::{preprocess_unannotated, FilterConfig};
use crate::psr::{segment_image, PsrConfig, PsrImage};
use crate::synth::SynthRecording;

/// Magnitude above which a segment counts as high risk (strict).
pub const FAIL_THRESHOLD: f64 = 0.33;
/// Trailing smoothing window: 180 ten-second segments, half an hour.
pub const SMOOTH_WINDOW: usize = 180;
const PREDICT_CHUNK: usize = 128;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScreenConfig {
    pub threshold: f64,
    pub smooth_window: usize,
    pub histogram_edges: Vec<f64>,
    /// A passing lead with more skipped segments than this fraction makes
    /// the verdict inconclusive.
    pub max_skipped_fraction: f64,
}

impl Default for ScreenConfig {
    fn default() -> Self {
        ScreenConfig {
            threshold: FAIL_THRESHOLD,
            smooth_window: SMOOTH_WINDOW,
            histogram_edges: default_edges(),
            max_skipped_fraction: 0.1,
        }
    }
}

impl ScreenConfig {
    pub fn validate(&self) -> Result<()> {
        if self.smooth_window < 1 {
            return Err(Error::Config("smooth_window must be at least 1".into()));
        }
        if self.histogram_edges.len() < 2 || self.histogram_edges.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(Error::Config("histogram_edges must be at least two increasing values".into()));
        }
        if !(0.0..=1.0).contains(&self.max_skipped_fraction) {
            return Err(Error::Config("max_skipped_fraction must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

/// `0.0, 0.1, ..., 1.0`.
pub fn default_edges() -> Vec<f64> {
    (0..=10).map(|k| k as f64 / 10.0).collect()
}

/// Source of consecutive 10-second windows of one lead.
pub trait LeadSource {
    fn lead_id(&self) -> &str;
    fn segment_count(&self) -> usize;
    fn segment(&self, index: usize) -> Result<EcgSegment>;
}

/// An in-memory recording cut into whole 10-second windows; a shorter
/// remainder is ignored.
#[derive(Debug, Clone)]
pub struct RecordingSource<'a> {
    recording: &'a Recording,
    window: usize,
    count: usize,
}

impl<'a> RecordingSource<'a> {
    pub fn new(recording: &'a Recording) -> Result<Self> {
        let window = samples_per_segment(recording.sampling_rate_hz);
        if window == 0 || recording.samples.len() < window {
            return Err(Error::Validation {
                segment: recording.lead_id.clone(),
                message: format!(
                    "recording of {:.2}s is shorter than one {SEGMENT_SECONDS}s segment",
                    recording.duration_s()
                ),
            });
        }
        let count = recording.samples.len() / window;
        let rest = recording.samples.len() - count * window;
        if rest > 0 {
            info!(
                "{}: discarding trailing {:.2}s after {count} segments",
                recording.lead_id,
                rest as f64 / recording.sampling_rate_hz
            );
        }
        Ok(RecordingSource { recording, window, count })
    }
}

impl LeadSource for RecordingSource<'_> {
    fn lead_id(&self) -> &str {
        &self.recording.lead_id
    }

    fn segment_count(&self) -> usize {
        self.count
    }

    fn segment(&self, index: usize) -> Result<EcgSegment> {
        if index >= self.count {
            return Err(Error::OutOfRange { index, len: self.count });
        }
        let lo = index * self.window;
        let r = self.recording;
        let mut seg = EcgSegment::new(r.samples[lo..lo + self.window].to_vec(), r.sampling_rate_hz, r.lead_id.clone());
        seg.start_time_s = index as f64 * SEGMENT_SECONDS;
        Ok(seg)
    }
}

/// A lazily synthesized lead.
#[derive(Debug, Clone)]
pub struct SynthSource<'a> {
    pub lead_id: String,
    pub recording: &'a SynthRecording,
}

impl LeadSource for SynthSource<'_> {
    fn lead_id(&self) -> &str {
        &self.lead_id
    }

    fn segment_count(&self) -> usize {
        self.recording.segment_count()
    }

    fn segment(&self, index: usize) -> Result<EcgSegment> {
        let (mut seg, _) = self.recording.segment(index)?;
        seg.lead_id = self.lead_id.clone();
        Ok(seg)
    }
}

/// Cuts a recording into `floor(duration / 10 s)` chronological segments.
pub fn segment_recording(recording: &Recording) -> Result<Vec<EcgSegment>> {
    let src = RecordingSource::new(recording)?;
    (0..src.segment_count()).map(|k| src.segment(k)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentOutcome {
    pub index: usize,
    pub start_time_s: f64,
    /// Signed prediction; `None` when the segment was skipped.
    pub predicted_ratio: Option<f64>,
    pub skip_reason: Option<String>,
}

impl SegmentOutcome {
    pub fn magnitude(&self) -> Option<f64> {
        self.predicted_ratio.map(f64::abs)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LeadScreening {
    pub lead_id: String,
    pub segments: Vec<SegmentOutcome>,
    pub pass: bool,
    pub first_failure_index: Option<usize>,
    pub skipped: usize,
}

impl LeadScreening {
    pub fn predicted_ratios(&self) -> Vec<Option<f64>> {
        self.segments.iter().map(|s| s.predicted_ratio).collect()
    }

    pub fn magnitudes(&self) -> Vec<Option<f64>> {
        self.segments.iter().map(SegmentOutcome::magnitude).collect()
    }

    pub fn skipped_fraction(&self) -> f64 {
        if self.segments.is_empty() {
            1.0
        } else {
            self.skipped as f64 / self.segments.len() as f64
        }
    }
}

/// Index `i` of the first pair `(i, i + 1)` whose magnitudes both exceed
/// `threshold`; skipped segments (`None`) break pairs.
pub fn first_failure(magnitudes: &[Option<f64>], threshold: f64) -> Option<usize> {
    magnitudes.windows(2).position(|w| match (w[0], w[1]) {
        (Some(a), Some(b)) => a > threshold && b > threshold,
        _ => false,
    })
}

/// Model input for an unannotated segment, or the reason it is skipped.
pub fn segment_input(segment: &EcgSegment, filter: &FilterConfig, psr: &PsrConfig) -> Result<(EcgSegment, bool, PsrImage, f64)> {
    segment.validate()?;
    let (filtered, flipped) = preprocess_unannotated(segment, filter)?;
    let (img, q) = segment_image(&filtered, psr)?;
    Ok((filtered, flipped, img, q))
}

/// Predicts every segment of one lead and applies the eligibility rule.
pub fn screen_lead(
    source: &dyn LeadSource,
    predictor: &Predictor,
    filter: &FilterConfig,
    psr: &PsrConfig,
    cfg: &ScreenConfig,
) -> Result<LeadScreening> {
    cfg.validate()?;
    if psr.grid_n != predictor.spec().grid_n {
        return Err(Error::Config(format!(
            "PSR grid {} does not match the model's {}",
            psr.grid_n,
            predictor.spec().grid_n
        )));
    }
    let total = source.segment_count();
    let mut segments = Vec::with_capacity(total);
    let mut start = 0;
    while start < total {
        let end = (start + PREDICT_CHUNK).min(total);
        let mut pixels = Vec::with_capacity(end - start);
        let mut slots = Vec::with_capacity(end - start);
        for k in start..end {
            let seg = source.segment(k)?;
            let mut outcome = SegmentOutcome {
                index: k,
                start_time_s: k as f64 * SEGMENT_SECONDS,
                predicted_ratio: None,
                skip_reason: None,
            };
            match segment_input(&seg, filter, psr) {
                Ok((_, _, img, _)) => {
                    slots.push(segments.len());
                    pixels.push(image_pixels(&img));
                }
                Err(e) => {
                    warn!("{}: segment {k} skipped: {e}", source.lead_id());
                    outcome.skip_reason = Some(e.to_string());
                }
            }
            segments.push(outcome);
        }
        for (slot, p) in slots.into_iter().zip(predictor.predict_pixels(&pixels)?) {
            segments[slot].predicted_ratio = Some(p);
        }
        start = end;
        debug!("{}: {end}/{total} segments", source.lead_id());
    }
    let magnitudes: Vec<Option<f64>> = segments.iter().map(SegmentOutcome::magnitude).collect();
    let first_failure_index = first_failure(&magnitudes, cfg.threshold);
    let skipped = segments.iter().filter(|s| s.predicted_ratio.is_none()).count();
    if skipped > 0 {
        warn!("{}: {skipped} of {total} segments inconclusive", source.lead_id());
    }
    Ok(LeadScreening {
        lead_id: source.lead_id().to_string(),
        segments,
        pass: first_failure_index.is_none(),
        first_failure_index,
        skipped,
    })
}

/// Proportion of values per half-open bin `[e_i, e_{i+1})`, plus a final
/// overflow bin for values at or above the last edge. Values below the first
/// edge fall in the first bin.
pub fn build_histogram(values: &[f64], edges: &[f64]) -> Vec<f64> {
    let bins = edges.len();
    let mut counts = vec![0usize; bins];
    for &v in values {
        let k = edges.iter().rposition(|&e| v >= e).unwrap_or(0);
        counts[k] += 1;
    }
    if values.is_empty() {
        return vec![0.0; bins];
    }
    counts.iter().map(|&c| c as f64 / values.len() as f64).collect()
}

/// Trailing mean over the last `window` available values; `None` inputs are
/// left out of the mean, and a window with no values yields `None`.
pub fn smooth_series(values: &[Option<f64>], window: usize) -> Vec<Option<f64>> {
    let window = window.max(1);
    (0..values.len())
        .map(|t| {
            let lo = (t + 1).saturating_sub(window);
            let (sum, n) = values[lo..=t].iter().flatten().fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
            (n > 0).then(|| sum / n as f64)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Eligible,
    NotEligible,
    Inconclusive,
}

impl Verdict {
    /// CLI exit status: 0 eligible, 1 not eligible, 2 inconclusive.
    pub fn exit_code(self) -> i32 {
        match self {
            Verdict::Eligible => 0,
            Verdict::NotEligible => 1,
            Verdict::Inconclusive => 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScreeningReport {
    pub model: String,
    pub leads: Vec<LeadScreening>,
    pub histogram_edges: Vec<f64>,
    /// Per lead, proportions per bin (last entry is the overflow bin).
    pub histograms: Vec<Vec<f64>>,
    pub smoothed: Vec<Vec<Option<f64>>>,
    /// Any lead passes.
    pub eligible: bool,
    pub verdict: Verdict,
}

pub fn screen_recording(
    sources: &[&dyn LeadSource],
    predictor: &Predictor,
    filter: &FilterConfig,
    psr: &PsrConfig,
    cfg: &ScreenConfig,
) -> Result<ScreeningReport> {
    if sources.is_empty() {
        return Err(Error::Config("no leads to screen".into()));
    }
    let mut leads = Vec::with_capacity(sources.len());
    for src in sources {
        info!("screening lead {} ({} segments)", src.lead_id(), src.segment_count());
        leads.push(screen_lead(*src, predictor, filter, psr, cfg)?);
    }
    Ok(assemble_report(predictor.name(), leads, cfg))
}

/// Histograms, smoothed series and verdict from per-lead results.
pub fn assemble_report(model: String, leads: Vec<LeadScreening>, cfg: &ScreenConfig) -> ScreeningReport {
    let histograms = leads
        .iter()
        .map(|l| build_histogram(&l.magnitudes().into_iter().flatten().collect::<Vec<_>>(), &cfg.histogram_edges))
        .collect();
    let smoothed = leads.iter().map(|l| smooth_series(&l.magnitudes(), cfg.smooth_window)).collect();
    let eligible = leads.iter().any(|l| l.pass);
    let conclusive_pass = leads.iter().any(|l| {
        l.pass && l.skipped_fraction() <= cfg.max_skipped_fraction && l.skipped < l.segments.len()
    });
    let verdict = if conclusive_pass {
        Verdict::Eligible
    } else if eligible {
        Verdict::Inconclusive
    } else {
        Verdict::NotEligible
    };
    ScreeningReport {
        model,
        leads,
        histogram_edges: cfg.histogram_edges.clone(),
        histograms,
        smoothed,
        eligible,
        verdict,
    }
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Writes `report.json`, `lead_<id>.csv`, `histogram.csv` and
/// `smoothed.csv` into `dir`. `metadata` is embedded in the JSON summary.
pub fn write_report(dir: &Path, report: &ScreeningReport, metadata: &serde_json::Value) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let summary = serde_json::json!({
        "metadata": metadata,
        "model": report.model,
        "eligible": report.eligible,
        "verdict": report.verdict,
        "leads": report.leads.iter().map(|l| serde_json::json!({
            "lead_id": l.lead_id,
            "pass": l.pass,
            "first_failure_index": l.first_failure_index,
            "first_failure_time_s": l.first_failure_index.map(|i| i as f64 * SEGMENT_SECONDS),
            "segments": l.segments.len(),
            "skipped": l.skipped,
        })).collect::<Vec<_>>(),
    });
    std::fs::write(dir.join("report.json"), serde_json::to_string_pretty(&summary)?)?;

    for lead in &report.leads {
        let mut w = csv::Writer::from_path(dir.join(format!("lead_{}.csv", file_safe(&lead.lead_id))))?;
        w.write_record(["segment_index", "start_time_s", "predicted_ratio", "magnitude", "skipped"])?;
        for s in &lead.segments {
            w.write_record([
                s.index.to_string(),
                s.start_time_s.to_string(),
                opt(s.predicted_ratio),
                opt(s.magnitude()),
                (s.predicted_ratio.is_none() as u8).to_string(),
            ])?;
        }
        w.flush()?;
    }

    let mut w = csv::Writer::from_path(dir.join("histogram.csv"))?;
    let mut header = vec!["bin_low".to_string(), "bin_high".to_string()];
    header.extend(report.leads.iter().map(|l| l.lead_id.clone()));
    w.write_record(&header)?;
    let edges = &report.histogram_edges;
    for b in 0..edges.len() {
        let hi = edges.get(b + 1).map(|e| e.to_string()).unwrap_or_else(|| "inf".into());
        let mut row = vec![edges[b].to_string(), hi];
        row.extend(report.histograms.iter().map(|h| h[b].to_string()));
        w.write_record(&row)?;
    }
    w.flush()?;

    let mut w = csv::Writer::from_path(dir.join("smoothed.csv"))?;
    let mut header = vec!["segment_index".to_string(), "start_time_s".to_string()];
    header.extend(report.leads.iter().map(|l| l.lead_id.clone()));
    w.write_record(&header)?;
    let len = report.smoothed.iter().map(Vec::len).max().unwrap_or(0);
    for t in 0..len {
        let mut row = vec![t.to_string(), (t as f64 * SEGMENT_SECONDS).to_string()];
        row.extend(report.smoothed.iter().map(|s| opt(s.get(t).copied().flatten())));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

fn file_safe(s: &str) -> String {
    s.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' { c } else { '_' }).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct LeadDetail {
    pub lead_id: String,
    pub raw: EcgSegment,
    pub filtered: Option<EcgSegment>,
    pub flipped: bool,
    pub image: Option<PsrImage>,
    pub q: Option<f64>,
    pub predicted_ratio: Option<f64>,
    pub skip_reason: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetailBundle {
    pub index: usize,
    pub start_time_s: f64,
    pub leads: Vec<LeadDetail>,
}

/// Raw and filtered signal, PSR image and prediction of one segment index on
/// every lead.
pub fn segment_detail(
    sources: &[&dyn LeadSource],
    index: usize,
    predictor: &Predictor,
    filter: &FilterConfig,
    psr: &PsrConfig,
) -> Result<DetailBundle> {
    let mut leads = Vec::with_capacity(sources.len());
    for src in sources {
        if index >= src.segment_count() {
            return Err(Error::OutOfRange {
                index,
                len: src.segment_count(),
            });
        }
        let raw = src.segment(index)?;
        let detail = match segment_input(&raw, filter, psr) {
            Ok((filtered, flipped, img, q)) => {
                let predicted_ratio = Some(predictor.predict_tr_ratio(&img)?);
                LeadDetail {
                    lead_id: src.lead_id().to_string(),
                    raw,
                    filtered: Some(filtered),
                    flipped,
                    image: Some(img),
                    q: Some(q),
                    predicted_ratio,
                    skip_reason: None,
                }
            }
            Err(e) => LeadDetail {
                lead_id: src.lead_id().to_string(),
                raw,
                filtered: None,
                flipped: false,
                image: None,
                q: None,
                predicted_ratio: None,
                skip_reason: Some(e.to_string()),
            },
        };
        leads.push(detail);
    }
    Ok(DetailBundle {
        index,
        start_time_s: index as f64 * SEGMENT_SECONDS,
        leads,
    })
}

/// Writes `detail.json`, `<lead>_signal.csv` and `<lead>_psr.csv` into `dir`.
pub fn write_detail(dir: &Path, bundle: &DetailBundle, psr: &PsrConfig, metadata: &serde_json::Value) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let summary = serde_json::json!({
        "metadata": metadata,
        "segment_index": bundle.index,
        "start_time_s": bundle.start_time_s,
        "leads": bundle.leads.iter().map(|l| serde_json::json!({
            "lead_id": l.lead_id,
            "predicted_ratio": l.predicted_ratio,
            "magnitude": l.predicted_ratio.map(f64::abs),
            "flipped": l.flipped,
            "q": l.q,
            "skip_reason": l.skip_reason,
        })).collect::<Vec<_>>(),
    });
    std::fs::write(dir.join("detail.json"), serde_json::to_string_pretty(&summary)?)?;
    for l in &bundle.leads {
        let stem = file_safe(&l.lead_id);
        let mut w = csv::Writer::from_path(dir.join(format!("{stem}_signal.csv")))?;
        w.write_record(["time_s", "raw_mv", "filtered_mv"])?;
        let fs = l.raw.sampling_rate_hz;
        for (i, v) in l.raw.samples.iter().enumerate() {
            let f = l.filtered.as_ref().map(|s| s.samples[i].to_string()).unwrap_or_default();
            w.write_record([(bundle.start_time_s + i as f64 / fs).to_string(), v.to_string(), f])?;
        }
        w.flush()?;
        if let (Some(img), Some(q)) = (&l.image, l.q) {
            crate::psr::write_psr(&dir.join(format!("{stem}_psr.csv")), img, psr, q, None)?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn some(v: &[f64]) -> Vec<Option<f64>> {
        v.iter().copied().map(Some).collect()
    }

    #[test]
    fn rule_examples() {
        assert_eq!(first_failure(&some(&[0.2, 0.4, 0.4, 0.1]), FAIL_THRESHOLD), Some(1));
        assert_eq!(first_failure(&some(&[0.4, 0.2, 0.4, 0.2]), FAIL_THRESHOLD), None);
        assert_eq!(first_failure(&some(&[0.1; 10]), FAIL_THRESHOLD), None);
        assert_eq!(first_failure(&some(&[0.33, 0.33]), FAIL_THRESHOLD), None);
        assert_eq!(first_failure(&[Some(0.5), None, Some(0.5)], FAIL_THRESHOLD), None);
    }

    #[test]
    fn histogram_bins() {
        let h = build_histogram(&[0.25; 7], &default_edges());
        assert_eq!(h.len(), 11);
        assert_eq!(h[2], 1.0);
        let h = build_histogram(&[0.0, 0.1, 1.0, 1.7], &default_edges());
        assert_eq!(h[0], 0.25);
        assert_eq!(h[1], 0.25);
        assert_eq!(h[10], 0.5);
    }

    #[test]
    fn smoothing() {
        let v = some(&[0.3; 500]);
        assert!(smooth_series(&v, 180).iter().all(|s| (s.unwrap() - 0.3).abs() < 1e-12));
        let v = some(&[0.1, 0.5, 0.2]);
        assert_eq!(smooth_series(&v, 1), v);
        assert_eq!(smooth_series(&[None, Some(0.4)], 2), vec![None, Some(0.4)]);
    }

    #[test]
    fn segmenting() {
        let rec = |secs: usize| Recording {
            sampling_rate_hz: 100.0,
            lead_id: "I".into(),
            samples: vec![0.0; secs * 100],
            r_peaks: vec![],
            t_peaks: vec![],
        };
        assert_eq!(segment_recording(&rec(25)).unwrap().len(), 2);
        assert_eq!(segment_recording(&rec(10)).unwrap().len(), 1);
        assert!(segment_recording(&rec(9)).is_err());
        let segs = segment_recording(&rec(30)).unwrap();
        assert_eq!(segs[2].start_time_s, 20.0);
        assert_eq!(segs[2].len(), 1000);
    }
}
