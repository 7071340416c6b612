//! Synthetic PQRST generator with an exact T:R label.
//!
//! Each beat is a sum of five Gaussian bumps (P, Q, R, S, T). The clean
//! signal has its segment mean removed, and the T amplitude is solved so that
//! the average T:R ratio measured at the annotated peaks equals the target
//! exactly. Baseline wander, 50 Hz mains and white noise are added on top.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::{
    average_tr_ratio, samples_per_segment, EcgSegment, LabeledExample, PeakAnnotations, Recording, SEGMENT_SECONDS,
};

pub const MAINS_HZ: f64 = 50.0;

/// Bump shape relative to the R peak. Times and widths in seconds at 60 bpm;
/// offsets scale with the square root of the RR interval.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Morphology {
    pub p_amp: f64,
    pub q_amp: f64,
    pub s_amp: f64,
    pub p_offset_s: f64,
    pub q_offset_s: f64,
    pub s_offset_s: f64,
    pub t_offset_s: f64,
    pub p_width_s: f64,
    pub qs_width_s: f64,
    pub r_width_s: f64,
    pub t_width_s: f64,
}

impl Default for Morphology {
    fn default() -> Self {
        Morphology {
            p_amp: 0.1,
            q_amp: -0.1,
            s_amp: -0.2,
            p_offset_s: -0.2,
            q_offset_s: -0.03,
            s_offset_s: 0.03,
            t_offset_s: 0.25,
            p_width_s: 0.025,
            qs_width_s: 0.01,
            r_width_s: 0.012,
            t_width_s: 0.04,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub sampling_rate_hz: f64,
    pub heart_rate_bpm: f64,
    pub r_amplitude_mv: f64,
    pub tr_ratio_target: f64,
    pub baseline_amp_mv: f64,
    pub baseline_freq_hz: f64,
    pub mains_amp_mv: f64,
    pub noise_std_mv: f64,
    pub seed: u64,
    pub morphology: Morphology,
    pub lead_id: String,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            sampling_rate_hz: 500.0,
            heart_rate_bpm: 60.0,
            r_amplitude_mv: 1.0,
            tr_ratio_target: 0.25,
            baseline_amp_mv: 0.0,
            baseline_freq_hz: 0.3,
            mains_amp_mv: 0.0,
            noise_std_mv: 0.0,
            seed: 0,
            morphology: Morphology::default(),
            lead_id: "synth".into(),
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.sampling_rate_hz > 0.0) {
            return bad(format!("sampling_rate_hz must be positive, got {}", self.sampling_rate_hz));
        }
        if !(30.0..=180.0).contains(&self.heart_rate_bpm) {
            return bad(format!("heart_rate_bpm {} outside [30, 180]", self.heart_rate_bpm));
        }
        if !(self.r_amplitude_mv > 0.0) {
            return bad("r_amplitude_mv must be positive".into());
        }
        if !(-1.0..=1.0).contains(&self.tr_ratio_target) {
            return bad(format!("tr_ratio_target {} outside [-1, 1]", self.tr_ratio_target));
        }
        if !(self.noise_std_mv >= 0.0) {
            return bad("noise_std_mv must be nonnegative".into());
        }
        Ok(())
    }

    fn rr_s(&self) -> f64 {
        60.0 / self.heart_rate_bpm
    }
}

fn gaussian(t: f64, center: f64, width: f64) -> f64 {
    let z = (t - center) / width;
    (-0.5 * z * z).exp()
}

/// Deterministic seed for a sub-stream.
pub(crate) fn mix_seed(seed: u64, stream: u64) -> u64 {
    // splitmix64 finalizer over the combined words
    let mut z = seed ^ stream.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(0x6a09_e667_f3bc_c909);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

struct CleanBeats {
    signal: Vec<f64>,
    ann: PeakAnnotations,
}

/// Clean, zero-mean signal with the exact target ratio.
fn clean_signal(cfg: &SynthConfig, n: usize) -> Result<CleanBeats> {
    let fs = cfg.sampling_rate_hz;
    let rr = cfg.rr_s();
    let m = &cfg.morphology;
    let stretch = rr.sqrt();
    let t_off = m.t_offset_s * stretch;
    let first_r = (0.35 * stretch).min(rr / 2.0).max(-m.p_offset_s * stretch * 0.5);
    let duration = n as f64 / fs;

    let mut rest = vec![0.0; n];
    let mut twave = vec![0.0; n];
    let mut ann = PeakAnnotations::default();
    let bumps = [
        (m.p_offset_s * stretch, m.p_amp, m.p_width_s),
        (m.q_offset_s, m.q_amp, m.qs_width_s),
        (0.0, 1.0, m.r_width_s),
        (m.s_offset_s, m.s_amp, m.qs_width_s),
    ];
    let reach = 5.0 * m.t_width_s.max(m.p_width_s);
    let mut k = 0usize;
    loop {
        let c = first_r + k as f64 * rr;
        if c + m.p_offset_s * stretch - reach > duration {
            break;
        }
        let lo = (((c + m.p_offset_s * stretch - reach) * fs).floor().max(0.0)) as usize;
        let hi = (((c + t_off + reach) * fs).ceil() as usize).min(n);
        for i in lo..hi {
            let t = i as f64 / fs;
            rest[i] += bumps.iter().map(|&(o, a, w)| a * gaussian(t, c + o, w)).sum::<f64>();
            twave[i] += gaussian(t, c + t_off, m.t_width_s);
        }
        let (ri, ti) = ((c * fs).round() as usize, ((c + t_off) * fs).round() as usize);
        if ri < n && ti < n {
            ann.r_indices.push(ri);
            ann.t_indices.push(ti);
        }
        k += 1;
    }
    if ann.count() < 2 {
        return Err(Error::Config(format!(
            "duration {duration:.2}s too short for two beats at {} bpm",
            cfg.heart_rate_bpm
        )));
    }
    let center = |v: &mut Vec<f64>| {
        let mean = v.iter().sum::<f64>() / v.len() as f64;
        v.iter_mut().for_each(|x| *x -= mean);
    };
    center(&mut rest);
    center(&mut twave);

    let sum_at = |v: &[f64], idx: &[usize]| idx.iter().map(|&i| v[i]).sum::<f64>();
    let rho = cfg.tr_ratio_target;
    let (wr, wt) = (sum_at(&rest, &ann.r_indices), sum_at(&rest, &ann.t_indices));
    let (gr, gt) = (sum_at(&twave, &ann.r_indices), sum_at(&twave, &ann.t_indices));
    let t_amp = (rho * wr - wt) / (gt - rho * gr);

    let a = cfg.r_amplitude_mv;
    let signal = rest.iter().zip(&twave).map(|(w, g)| a * (w + t_amp * g)).collect();
    Ok(CleanBeats { signal, ann })
}

fn synthesize(cfg: &SynthConfig, n: usize, start_time_s: f64, stream: u64) -> Result<(EcgSegment, PeakAnnotations)> {
    cfg.validate()?;
    let fs = cfg.sampling_rate_hz;
    let CleanBeats { mut signal, ann } = clean_signal(cfg, n)?;
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, stream));
    let wander_phase = rng.random::<f64>() * std::f64::consts::TAU;
    let mains_phase = rng.random::<f64>() * std::f64::consts::TAU;
    let normal = Normal::new(0.0, cfg.noise_std_mv.max(0.0)).map_err(|e| Error::Config(e.to_string()))?;
    for (i, v) in signal.iter_mut().enumerate() {
        let t = start_time_s + i as f64 / fs;
        if cfg.baseline_amp_mv != 0.0 {
            *v += cfg.baseline_amp_mv * (std::f64::consts::TAU * cfg.baseline_freq_hz * t + wander_phase).sin();
        }
        if cfg.mains_amp_mv != 0.0 {
            *v += cfg.mains_amp_mv * (std::f64::consts::TAU * MAINS_HZ * t + mains_phase).sin();
        }
        if cfg.noise_std_mv > 0.0 {
            *v += normal.sample(&mut rng);
        }
    }
    let mut seg = EcgSegment::new(signal, fs, cfg.lead_id.clone());
    seg.start_time_s = start_time_s;
    Ok((seg, ann))
}

/// One synthetic segment and the true (clean-signal) peak annotations.
pub fn generate_segment(cfg: &SynthConfig, duration_s: f64) -> Result<(EcgSegment, PeakAnnotations)> {
    if !(duration_s > 0.0) {
        return Err(Error::Config("duration must be positive".into()));
    }
    let n = (duration_s * cfg.sampling_rate_hz).round() as usize;
    synthesize(cfg, n, 0.0, 0)
}

/// Mean power of the clean (noise-free) waveform for `cfg`.
pub fn clean_power(cfg: &SynthConfig, duration_s: f64) -> Result<f64> {
    let n = (duration_s * cfg.sampling_rate_hz).round() as usize;
    let clean = clean_signal(cfg, n)?;
    Ok(clean.signal.iter().map(|v| v * v).sum::<f64>() / n as f64)
}

/// White-noise standard deviation giving `snr_db` against the clean waveform.
pub fn noise_std_for_snr(cfg: &SynthConfig, duration_s: f64, snr_db: f64) -> Result<f64> {
    Ok((clean_power(cfg, duration_s)? / 10f64.powf(snr_db / 10.0)).sqrt())
}

/// A long recording described by a piecewise-constant schedule. Segments are
/// synthesized on demand so day-long recordings need no bulk storage.
#[derive(Debug, Clone)]
pub struct SynthRecording {
    schedule: Vec<(f64, SynthConfig)>,
    /// Schedule entry in effect at the start of each 10-second segment.
    entry_of_segment: Vec<usize>,
    sampling_rate_hz: f64,
}

/// Builds a recording from `(duration_s, config)` entries. Each 10-second
/// segment takes the configuration in effect at its start.
pub fn generate_recording(schedule: &[(f64, SynthConfig)]) -> Result<SynthRecording> {
    if schedule.is_empty() {
        return Err(Error::Config("empty schedule".into()));
    }
    let fs = schedule[0].1.sampling_rate_hz;
    for (d, cfg) in schedule {
        cfg.validate()?;
        if !(*d > 0.0) {
            return Err(Error::Config("schedule durations must be positive".into()));
        }
        if cfg.sampling_rate_hz != fs {
            return Err(Error::Config("all schedule entries must share one sampling rate".into()));
        }
    }
    let total: f64 = schedule.iter().map(|(d, _)| d).sum();
    let count = (total / SEGMENT_SECONDS).round();
    if (count * SEGMENT_SECONDS - total).abs() > 1e-6 || count < 1.0 {
        return Err(Error::Config(format!(
            "total duration {total}s is not a positive multiple of {SEGMENT_SECONDS}s"
        )));
    }
    let count = count as usize;
    let mut entry_of_segment = Vec::with_capacity(count);
    let mut entry = 0;
    let mut entry_end = schedule[0].0;
    for k in 0..count {
        let start = k as f64 * SEGMENT_SECONDS;
        while start >= entry_end - 1e-9 && entry + 1 < schedule.len() {
            entry += 1;
            entry_end += schedule[entry].0;
        }
        entry_of_segment.push(entry);
    }
    Ok(SynthRecording {
        schedule: schedule.to_vec(),
        entry_of_segment,
        sampling_rate_hz: fs,
    })
}

impl SynthRecording {
    pub fn segment_count(&self) -> usize {
        self.entry_of_segment.len()
    }

    pub fn sampling_rate_hz(&self) -> f64 {
        self.sampling_rate_hz
    }

    pub fn duration_s(&self) -> f64 {
        self.segment_count() as f64 * SEGMENT_SECONDS
    }

    pub fn config_of(&self, k: usize) -> &SynthConfig {
        &self.schedule[self.entry_of_segment[k]].1
    }

    /// True label of every 10-second segment, in order.
    pub fn true_ratios(&self) -> Vec<f64> {
        (0..self.segment_count()).map(|k| self.config_of(k).tr_ratio_target).collect()
    }

    pub fn segment(&self, k: usize) -> Result<(EcgSegment, PeakAnnotations)> {
        if k >= self.segment_count() {
            return Err(Error::OutOfRange {
                index: k,
                len: self.segment_count(),
            });
        }
        let n = samples_per_segment(self.sampling_rate_hz);
        synthesize(self.config_of(k), n, k as f64 * SEGMENT_SECONDS, k as u64 + 1)
    }

    pub fn segments(&self) -> impl Iterator<Item = Result<(EcgSegment, PeakAnnotations)>> + '_ {
        (0..self.segment_count()).map(move |k| self.segment(k))
    }

    /// Concatenates all segments into a single-lead recording.
    pub fn to_recording(&self, lead_id: &str) -> Result<Recording> {
        let n = samples_per_segment(self.sampling_rate_hz);
        let mut rec = Recording {
            sampling_rate_hz: self.sampling_rate_hz,
            lead_id: lead_id.to_string(),
            samples: Vec::with_capacity(n * self.segment_count()),
            r_peaks: Vec::new(),
            t_peaks: Vec::new(),
        };
        for (k, seg) in self.segments().enumerate() {
            let (seg, ann) = seg?;
            rec.samples.extend_from_slice(&seg.samples);
            rec.r_peaks.extend(ann.r_indices.iter().map(|i| i + k * n));
            rec.t_peaks.extend(ann.t_indices.iter().map(|i| i + k * n));
        }
        Ok(rec)
    }
}

/// Ranges for randomized training configurations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthDatasetSpec {
    pub count: usize,
    pub sampling_rate_hz: f64,
    pub ratio_range: (f64, f64),
    pub heart_rate_range: (f64, f64),
    pub r_amplitude_range: (f64, f64),
    pub snr_db_range: (f64, f64),
    pub max_baseline_mv: f64,
    pub max_mains_mv: f64,
    pub seed: u64,
}

impl Default for SynthDatasetSpec {
    fn default() -> Self {
        SynthDatasetSpec {
            count: 2000,
            sampling_rate_hz: 500.0,
            ratio_range: (-0.8, 0.8),
            heart_rate_range: (45.0, 140.0),
            r_amplitude_range: (0.5, 2.0),
            snr_db_range: (10.0, 30.0),
            max_baseline_mv: 0.5,
            max_mains_mv: 0.1,
            seed: 7,
        }
    }
}

fn uniform(rng: &mut impl Rng, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

/// Draws the configuration of the `index`-th random example.
pub fn random_config(spec: &SynthDatasetSpec, index: usize) -> Result<SynthConfig> {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(spec.seed, index as u64));
    let base = Morphology::default();
    let widen = rng.random_range(0.85..1.2);
    let morphology = Morphology {
        p_amp: rng.random_range(0.05..0.2),
        q_amp: -rng.random_range(0.0..0.15),
        s_amp: -rng.random_range(0.05..0.35),
        t_offset_s: rng.random_range(0.22..0.3),
        t_width_s: base.t_width_s * rng.random_range(0.8..1.3),
        r_width_s: base.r_width_s * widen,
        qs_width_s: base.qs_width_s * widen,
        ..base
    };
    let mut cfg = SynthConfig {
        sampling_rate_hz: spec.sampling_rate_hz,
        heart_rate_bpm: uniform(&mut rng, spec.heart_rate_range),
        r_amplitude_mv: uniform(&mut rng, spec.r_amplitude_range),
        tr_ratio_target: uniform(&mut rng, spec.ratio_range),
        baseline_amp_mv: rng.random_range(0.0..=spec.max_baseline_mv),
        baseline_freq_hz: rng.random_range(0.1..0.5),
        mains_amp_mv: rng.random_range(0.0..=spec.max_mains_mv),
        noise_std_mv: 0.0,
        seed: mix_seed(spec.seed, 1_000_000 + index as u64),
        morphology,
        lead_id: format!("synth-{index}"),
    };
    let snr = uniform(&mut rng, spec.snr_db_range);
    cfg.noise_std_mv = noise_std_for_snr(&cfg, SEGMENT_SECONDS, snr)?;
    Ok(cfg)
}

/// The labeled example of the `index`-th random configuration; the label is
/// computed from the raw annotated signal.
pub fn random_example(spec: &SynthDatasetSpec, index: usize) -> Result<LabeledExample> {
    let cfg = random_config(spec, index)?;
    let (segment, annotations) = generate_segment(&cfg, SEGMENT_SECONDS)?;
    let tr_ratio = average_tr_ratio(&segment, &annotations)?;
    Ok(LabeledExample {
        id: format!("synth-{index:05}"),
        segment,
        annotations,
        tr_ratio,
    })
}

pub fn generate_dataset(spec: &SynthDatasetSpec) -> Result<Vec<LabeledExample>> {
    (0..spec.count).map(|i| random_example(spec, i)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_ratio_without_noise() {
        for target in [0.5, -0.3, 0.0, 1.0, -1.0] {
            let cfg = SynthConfig {
                tr_ratio_target: target,
                ..Default::default()
            };
            let (seg, ann) = generate_segment(&cfg, 10.0).unwrap();
            let r = average_tr_ratio(&seg, &ann).unwrap();
            assert!((r - target).abs() < 1e-9, "{target} -> {r}");
        }
    }

    #[test]
    fn negative_target_has_negative_t() {
        let cfg = SynthConfig {
            tr_ratio_target: -0.3,
            ..Default::default()
        };
        let (seg, ann) = generate_segment(&cfg, 10.0).unwrap();
        assert!(ann.t_indices.iter().all(|&t| seg.samples[t] < 0.0));
    }

    #[test]
    fn sixty_bpm_ten_beats() {
        let (seg, ann) = generate_segment(&SynthConfig::default(), 10.0).unwrap();
        assert_eq!(seg.len(), 5000);
        assert_eq!(ann.count(), 10);
    }

    #[test]
    fn r_is_beat_argmax() {
        let cfg = SynthConfig {
            tr_ratio_target: 0.9,
            heart_rate_bpm: 75.0,
            ..Default::default()
        };
        let (seg, ann) = generate_segment(&cfg, 10.0).unwrap();
        let x = &seg.samples;
        let half = (0.5 * 60.0 / 75.0 * 500.0) as usize;
        for &r in &ann.r_indices {
            let lo = r.saturating_sub(half);
            let hi = (r + half).min(x.len());
            let m = (lo..hi).max_by(|&a, &b| x[a].total_cmp(&x[b])).unwrap();
            assert_eq!(m, r);
        }
    }

    #[test]
    fn deterministic() {
        let cfg = SynthConfig {
            noise_std_mv: 0.05,
            baseline_amp_mv: 0.3,
            mains_amp_mv: 0.1,
            seed: 42,
            ..Default::default()
        };
        assert_eq!(generate_segment(&cfg, 10.0).unwrap(), generate_segment(&cfg, 10.0).unwrap());
        let other = SynthConfig { seed: 43, ..cfg.clone() };
        assert_ne!(generate_segment(&cfg, 10.0).unwrap().0, generate_segment(&other, 10.0).unwrap().0);
    }

    #[test]
    fn too_short() {
        assert!(generate_segment(&SynthConfig::default(), 1.0).is_err());
    }

    #[test]
    fn recording_schedule() {
        let a = SynthConfig {
            tr_ratio_target: 0.2,
            ..Default::default()
        };
        let b = SynthConfig {
            tr_ratio_target: 0.4,
            ..Default::default()
        };
        let sched: Vec<_> = (0..6).map(|k| (10.0, if k % 2 == 0 { a.clone() } else { b.clone() })).collect();
        let rec = generate_recording(&sched).unwrap();
        assert_eq!(rec.true_ratios(), vec![0.2, 0.4, 0.2, 0.4, 0.2, 0.4]);
        assert_eq!(generate_recording(&[(10.0, a.clone())]).unwrap().segment_count(), 1);
        assert!(generate_recording(&[(15.0, a.clone())]).is_err());
        let day = generate_recording(&[(86_400.0, a)]).unwrap();
        assert_eq!(day.true_ratios().len(), 8640);
    }
}
