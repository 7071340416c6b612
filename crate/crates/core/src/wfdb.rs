//! Minimal reader for PhysioNet WFDB records: `.hea` headers, format 16 and
//! 212 signal files, and MIT-format annotation files. Enough to convert
//! annotated records into [`Recording`]s.

use std::path::{Path, PathBuf};

use log::debug;

use crate::error::{Error, Result};
use crate::ingest::Recording;

/// Beat annotation codes treated as R peaks.
const BEAT_CODES: [u8; 19] = [1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11, 12, 13, 25, 30, 34, 35, 38, 41];
const TWAVE: u8 = 27;
const SKIP: u8 = 59;
const NUM: u8 = 60;
const SUB: u8 = 61;
const CHN: u8 = 62;
const AUX: u8 = 63;

#[derive(Debug, Clone, PartialEq)]
pub struct SignalSpec {
    pub file: String,
    pub format: u32,
    pub gain: f64,
    pub baseline: i32,
    pub units: String,
    pub description: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Header {
    pub record: String,
    pub sampling_rate_hz: f64,
    pub samples_per_signal: Option<usize>,
    pub signals: Vec<SignalSpec>,
}

fn perr(path: &Path, line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line: Some(line),
        message: message.into(),
    }
}

pub fn parse_header(path: &Path, text: &str) -> Result<Header> {
    let mut lines = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'));
    let (ln, record_line) = lines.next().ok_or_else(|| perr(path, 1, "empty header"))?;
    let fields: Vec<&str> = record_line.split_whitespace().collect();
    if fields.len() < 2 {
        return Err(perr(path, ln, "record line needs a name and signal count"));
    }
    let record = fields[0].split('/').next().unwrap_or(fields[0]).to_string();
    let nsig: usize = fields[1].parse().map_err(|_| perr(path, ln, "bad signal count"))?;
    let sampling_rate_hz = match fields.get(2) {
        Some(f) => f
            .split(['/', '('])
            .next()
            .unwrap_or(f)
            .parse()
            .map_err(|_| perr(path, ln, format!("bad sampling frequency '{f}'")))?,
        None => 250.0,
    };
    let samples_per_signal = fields.get(3).and_then(|f| f.parse().ok());
    let mut signals = Vec::with_capacity(nsig);
    for _ in 0..nsig {
        let (ln, line) = lines.next().ok_or_else(|| perr(path, ln, "missing signal specification line"))?;
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.len() < 2 {
            return Err(perr(path, ln, "signal line needs a file name and format"));
        }
        let format: u32 = f[1]
            .split(['x', ':', '+'])
            .next()
            .unwrap_or(f[1])
            .parse()
            .map_err(|_| perr(path, ln, format!("bad format '{}'", f[1])))?;
        let (mut gain, mut baseline, mut units) = (200.0, None, "mV".to_string());
        if let Some(g) = f.get(2) {
            let (num, rest) = g.split_at(g.find(['(', '/']).unwrap_or(g.len()));
            gain = num.parse().map_err(|_| perr(path, ln, format!("bad gain '{g}'")))?;
            if let Some(b) = rest.strip_prefix('(') {
                let b = b.split(')').next().unwrap_or("");
                baseline = Some(b.parse().map_err(|_| perr(path, ln, format!("bad baseline '{g}'")))?);
            }
            if let Some(u) = g.split('/').nth(1) {
                units = u.to_string();
            }
            if gain == 0.0 {
                gain = 200.0;
            }
        }
        let adc_zero: i32 = f.get(4).and_then(|z| z.parse().ok()).unwrap_or(0);
        signals.push(SignalSpec {
            file: f[0].to_string(),
            format,
            gain,
            baseline: baseline.unwrap_or(adc_zero),
            units,
            description: f.get(8..).map(|d| d.join(" ")).unwrap_or_default(),
        });
    }
    Ok(Header {
        record,
        sampling_rate_hz,
        samples_per_signal,
        signals,
    })
}

/// Decodes the digital samples of every signal stored in one file.
fn decode(path: &Path, bytes: &[u8], format: u32, nsig: usize) -> Result<Vec<Vec<i32>>> {
    let mut out = vec![Vec::new(); nsig];
    match format {
        16 => {
            for (k, pair) in bytes.chunks_exact(2).enumerate() {
                out[k % nsig].push(i16::from_le_bytes([pair[0], pair[1]]) as i32);
            }
        }
        212 => {
            let mut k = 0;
            let sext = |v: i32| if v & 0x800 != 0 { v - 0x1000 } else { v };
            for b in bytes.chunks_exact(3) {
                let s0 = b[0] as i32 | ((b[1] as i32 & 0x0f) << 8);
                let s1 = b[2] as i32 | ((b[1] as i32 & 0xf0) << 4);
                out[k % nsig].push(sext(s0));
                k += 1;
                out[k % nsig].push(sext(s1));
                k += 1;
            }
        }
        other => {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: None,
                message: format!("unsupported WFDB signal format {other}"),
            })
        }
    }
    Ok(out)
}

/// One MIT-format annotation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Annotation {
    pub sample: usize,
    pub code: u8,
}

pub fn parse_annotations(path: &Path, bytes: &[u8]) -> Result<Vec<Annotation>> {
    let mut out = Vec::new();
    let mut t: i64 = 0;
    let mut i = 0;
    while i + 1 < bytes.len() {
        let word = u16::from_le_bytes([bytes[i], bytes[i + 1]]);
        i += 2;
        let code = (word >> 10) as u8;
        let interval = (word & 0x3ff) as i64;
        match code {
            0 if interval == 0 => break,
            SKIP => {
                if i + 4 > bytes.len() {
                    return Err(Error::Parse {
                        path: path.to_path_buf(),
                        line: None,
                        message: "truncated SKIP annotation".into(),
                    });
                }
                // PDP-11 order: high 16-bit word first
                let hi = u16::from_le_bytes([bytes[i], bytes[i + 1]]) as u32;
                let lo = u16::from_le_bytes([bytes[i + 2], bytes[i + 3]]) as u32;
                t += ((hi << 16) | lo) as i32 as i64;
                i += 4;
            }
            NUM | SUB | CHN => {}
            AUX => i += interval as usize + (interval as usize & 1),
            _ => {
                t += interval;
                if t < 0 {
                    return Err(Error::Parse {
                        path: path.to_path_buf(),
                        line: None,
                        message: "annotation time before record start".into(),
                    });
                }
                out.push(Annotation { sample: t as usize, code });
            }
        }
    }
    Ok(out)
}

/// Reads `<base>.hea`, its signal file(s) and `<base>.<annotator>` into one
/// [`Recording`] for signal `channel`.
pub fn read_record(base: &Path, annotator: &str, channel: usize) -> Result<Recording> {
    let hea = base.with_extension("hea");
    let header = parse_header(&hea, &std::fs::read_to_string(&hea)?)?;
    let spec = header.signals.get(channel).ok_or_else(|| {
        Error::Config(format!(
            "{} has {} signals; channel {channel} requested",
            hea.display(),
            header.signals.len()
        ))
    })?;
    let dir = base.parent().map(Path::to_path_buf).unwrap_or_else(|| PathBuf::from("."));
    let dat = dir.join(&spec.file);
    let in_file: Vec<usize> = header
        .signals
        .iter()
        .enumerate()
        .filter(|(_, s)| s.file == spec.file)
        .map(|(k, _)| k)
        .collect();
    let pos = in_file.iter().position(|&k| k == channel).expect("channel is in its own file");
    let digital = decode(&dat, &std::fs::read(&dat)?, spec.format, in_file.len())?.swap_remove(pos);
    let mut samples: Vec<f64> = digital.iter().map(|&d| (d - spec.baseline) as f64 / spec.gain).collect();
    if spec.units.eq_ignore_ascii_case("uv") {
        samples.iter_mut().for_each(|v| *v /= 1000.0);
    }
    if let Some(n) = header.samples_per_signal {
        samples.truncate(n);
    }
    let ann_path = base.with_extension(annotator);
    let anns = parse_annotations(&ann_path, &std::fs::read(&ann_path)?)?;
    let r_peaks: Vec<usize> = anns.iter().filter(|a| BEAT_CODES.contains(&a.code)).map(|a| a.sample).collect();
    let t_peaks: Vec<usize> = anns.iter().filter(|a| a.code == TWAVE).map(|a| a.sample).collect();
    debug!(
        "{}: {} samples, {} R and {} T annotations",
        header.record,
        samples.len(),
        r_peaks.len(),
        t_peaks.len()
    );
    Ok(Recording {
        sampling_rate_hz: header.sampling_rate_hz,
        lead_id: format!("{}:{}", header.record, spec.description.trim()),
        samples,
        r_peaks,
        t_peaks,
    })
}

/// Every `*.hea` under `dir` (recursively) whose annotation file exists.
pub fn find_records(dir: &Path, annotator: &str) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d)? {
            let p = entry?.path();
            if p.is_dir() {
                stack.push(p);
            } else if p.extension().is_some_and(|e| e == "hea") && p.with_extension(annotator).exists() {
                out.push(p.with_extension(""));
            }
        }
    }
    out.sort();
    Ok(out)
}
