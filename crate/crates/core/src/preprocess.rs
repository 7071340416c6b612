//! Filtering chain and peak corrections applied before phase-space imaging.
//!
//! Order: wavelet baseline removal, mains bandstop, lowpass, peak
//! re-localization, negative-QRS flipping. The three filters are linear and
//! zero-phase, so annotations only need a local re-search afterwards.

use log::debug;
use serde::{Deserialize, Serialize};

use crate::dsp::{Biquad, SosFilter, Wavelet};
use crate::error::{Error, Result};
use crate::ingest::{EcgSegment, PeakAnnotations};

const LOWPASS_ORDER: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FilterConfig {
    pub dwt_wavelet: String,
    pub dwt_levels: usize,
    pub bandstop_center_hz: f64,
    pub bandstop_bandwidth_hz: f64,
    pub lowpass_cutoff_hz: f64,
    pub r_search_radius_ms: f64,
    pub t_search_radius_ms: f64,
    pub flip_search_radius_ms: f64,
}

impl Default for FilterConfig {
    fn default() -> Self {
        FilterConfig {
            dwt_wavelet: "db8".into(),
            dwt_levels: 9,
            bandstop_center_hz: 50.0,
            bandstop_bandwidth_hz: 2.0,
            lowpass_cutoff_hz: 40.0,
            r_search_radius_ms: 50.0,
            t_search_radius_ms: 80.0,
            flip_search_radius_ms: 60.0,
        }
    }
}

impl FilterConfig {
    pub fn validate(&self, sampling_rate_hz: f64) -> Result<()> {
        let nyquist = sampling_rate_hz / 2.0;
        if self.dwt_wavelet != "db8" {
            return Err(Error::Config(format!("unsupported wavelet '{}'", self.dwt_wavelet)));
        }
        if !(1..=16).contains(&self.dwt_levels) {
            return Err(Error::Config(format!("dwt_levels {} out of range", self.dwt_levels)));
        }
        if !(self.lowpass_cutoff_hz > 0.0 && self.lowpass_cutoff_hz < nyquist) {
            return Err(Error::Config(format!(
                "lowpass cutoff {} Hz must lie in (0, {nyquist})",
                self.lowpass_cutoff_hz
            )));
        }
        let lo = self.bandstop_center_hz - self.bandstop_bandwidth_hz / 2.0;
        let hi = self.bandstop_center_hz + self.bandstop_bandwidth_hz / 2.0;
        if !(self.bandstop_bandwidth_hz > 0.0 && lo > 0.0 && hi < nyquist) {
            return Err(Error::Config(format!("bandstop band [{lo}, {hi}] Hz must lie inside (0, {nyquist})")));
        }
        for (name, v) in [
            ("r_search_radius_ms", self.r_search_radius_ms),
            ("t_search_radius_ms", self.t_search_radius_ms),
            ("flip_search_radius_ms", self.flip_search_radius_ms),
        ] {
            if !(v > 0.0) {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        Ok(())
    }

    fn radius_samples(ms: f64, fs: f64) -> usize {
        (ms * fs / 1000.0).round().max(1.0) as usize
    }
}

/// Subtracts the level-`dwt_levels` approximation (the drifting baseline).
pub fn remove_baseline_drift(segment: &EcgSegment, cfg: &FilterConfig) -> Result<EcgSegment> {
    let wavelet = Wavelet::db8();
    if segment.len() < wavelet.filter_len() {
        return Err(Error::Preprocess(format!(
            "segment {} has {} samples, fewer than the {}-tap wavelet filter",
            segment.name(),
            segment.len(),
            wavelet.filter_len()
        )));
    }
    let trend = crate::dsp::wavelet::approximation_trend(&segment.samples, &wavelet, cfg.dwt_levels);
    let out = segment.samples.iter().zip(&trend).map(|(x, b)| x - b).collect();
    Ok(segment.with_samples(out))
}

/// Zero-phase notch around the mains frequency.
pub fn suppress_mains(segment: &EcgSegment, cfg: &FilterConfig) -> Result<EcgSegment> {
    cfg.validate(segment.sampling_rate_hz)?;
    let notch = SosFilter::new(vec![Biquad::notch(
        cfg.bandstop_center_hz,
        cfg.bandstop_bandwidth_hz,
        segment.sampling_rate_hz,
    )]);
    Ok(segment.with_samples(notch.filtfilt(&segment.samples)))
}

/// Zero-phase 4th-order Butterworth lowpass.
pub fn lowpass(segment: &EcgSegment, cfg: &FilterConfig) -> Result<EcgSegment> {
    cfg.validate(segment.sampling_rate_hz)?;
    let filter = SosFilter::butterworth_lowpass(LOWPASS_ORDER, cfg.lowpass_cutoff_hz, segment.sampling_rate_hz);
    Ok(segment.with_samples(filter.filtfilt(&segment.samples)))
}

fn window(center: usize, radius: usize, len: usize) -> std::ops::Range<usize> {
    center.saturating_sub(radius)..(center + radius + 1).min(len)
}

fn argmax_in(x: &[f64], range: std::ops::Range<usize>) -> usize {
    let start = range.start;
    x[range]
        .iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
        .0
        + start
}

fn argmin_in(x: &[f64], range: std::ops::Range<usize>) -> usize {
    let start = range.start;
    x[range]
        .iter()
        .enumerate()
        .fold((0, f64::INFINITY), |best, (i, &v)| if v < best.1 { (i, v) } else { best })
        .0
        + start
}

fn relocate_t(x: &[f64], t_indices: &[usize], radius: usize) -> Vec<usize> {
    t_indices
        .iter()
        .map(|&t| {
            let w = window(t, radius, x.len());
            if x[t] >= 0.0 {
                argmax_in(x, w)
            } else {
                argmin_in(x, w)
            }
        })
        .collect()
}

/// Moves each R marker to the local maximum and each T marker to the local
/// maximum or minimum, depending on the sign of the signal at the marker.
/// Search windows are clipped to the segment.
pub fn relocate_peaks(segment: &EcgSegment, ann: &PeakAnnotations, cfg: &FilterConfig) -> Result<PeakAnnotations> {
    ann.validate(segment)?;
    let fs = segment.sampling_rate_hz;
    let x = &segment.samples;
    let r_radius = FilterConfig::radius_samples(cfg.r_search_radius_ms, fs);
    let t_radius = FilterConfig::radius_samples(cfg.t_search_radius_ms, fs);
    let r_indices = ann
        .r_indices
        .iter()
        .map(|&r| argmax_in(x, window(r, r_radius, x.len())))
        .collect();
    Ok(PeakAnnotations::new(r_indices, relocate_t(x, &ann.t_indices, t_radius)))
}

/// Multiplies every sample by -1.
pub fn negate(segment: &EcgSegment) -> EcgSegment {
    segment.with_samples(segment.samples.iter().map(|v| -v).collect())
}

/// Flips the whole segment when most beats have a negative extremum of
/// larger magnitude than the marked R peak near their R marker. The R
/// markers move to those extrema and T markers are searched again.
pub fn flip_negative_qrs(
    segment: &EcgSegment,
    ann: &PeakAnnotations,
    cfg: &FilterConfig,
) -> Result<(EcgSegment, PeakAnnotations, bool)> {
    ann.validate(segment)?;
    let fs = segment.sampling_rate_hz;
    let x = &segment.samples;
    let radius = FilterConfig::radius_samples(cfg.flip_search_radius_ms, fs);
    let votes = ann
        .r_indices
        .iter()
        .filter(|&&r| {
            let m = argmin_in(x, window(r, radius, x.len()));
            -x[m] > x[r]
        })
        .count();
    if ann.count() == 0 || 2 * votes <= ann.count() {
        return Ok((segment.clone(), ann.clone(), false));
    }
    debug!("{}: {votes}/{} beats negative-dominant, flipping", segment.name(), ann.count());
    let flipped = negate(segment);
    let y = &flipped.samples;
    let r_indices = ann.r_indices.iter().map(|&r| argmax_in(y, window(r, radius, y.len()))).collect();
    let t_radius = FilterConfig::radius_samples(cfg.t_search_radius_ms, fs);
    let t_indices = relocate_t(y, &ann.t_indices, t_radius);
    Ok((flipped, PeakAnnotations::new(r_indices, t_indices), true))
}

/// Annotation-free flip used at screening time: the segment is flipped when
/// its largest-magnitude sample is negative.
pub fn flip_by_extremum(segment: &EcgSegment) -> (EcgSegment, bool) {
    let max = segment.samples.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min = segment.samples.iter().copied().fold(f64::INFINITY, f64::min);
    if -min > max {
        (negate(segment), true)
    } else {
        (segment.clone(), false)
    }
}

/// The three linear filtering stages.
pub fn filter_segment(segment: &EcgSegment, cfg: &FilterConfig) -> Result<EcgSegment> {
    segment.validate()?;
    cfg.validate(segment.sampling_rate_hz)?;
    let s = remove_baseline_drift(segment, cfg)?;
    let s = suppress_mains(&s, cfg)?;
    lowpass(&s, cfg)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Preprocessed {
    pub segment: EcgSegment,
    pub annotations: PeakAnnotations,
    pub flipped: bool,
}

/// Full chain for annotated segments: filter, relocate, flip.
pub fn preprocess_pipeline(segment: &EcgSegment, ann: &PeakAnnotations, cfg: &FilterConfig) -> Result<Preprocessed> {
    ann.validate(segment)?;
    let filtered = filter_segment(segment, cfg)?;
    let relocated = relocate_peaks(&filtered, ann, cfg)?;
    let (segment, annotations, flipped) = flip_negative_qrs(&filtered, &relocated, cfg)?;
    Ok(Preprocessed {
        segment,
        annotations,
        flipped,
    })
}

/// Chain for unannotated screening segments: filter, then extremum flip.
pub fn preprocess_unannotated(segment: &EcgSegment, cfg: &FilterConfig) -> Result<(EcgSegment, bool)> {
    let filtered = filter_segment(segment, cfg)?;
    Ok(flip_by_extremum(&filtered))
}
