//! Two-dimensional phase-space reconstruction and its occupancy image.
//!
//! A segment `x` of length `n` becomes the `n - tau` delay vectors
//! `(x[i] / q, x[i + tau] / q)` with `q = max |x|`, so every point lies in
//! `[-1, 1]^2`. The square is cut into an `N x N` grid of cells of side
//! `2 / N`; cell `(i, j)` counts points whose first coordinate falls in row
//! `i` and second coordinate in column `j`. Cells are half-open on the upper
//! edge, except that a coordinate equal to `+1` belongs to the last cell.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::EcgSegment;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PsrConfig {
    /// Delay in samples.
    pub tau: usize,
    pub grid_n: usize,
}

impl Default for PsrConfig {
    fn default() -> Self {
        PsrConfig { tau: 4, grid_n: 32 }
    }
}

impl PsrConfig {
    pub fn validate(&self) -> Result<()> {
        if self.tau < 1 {
            return Err(Error::Config("tau must be at least 1".into()));
        }
        if self.grid_n < 2 {
            return Err(Error::Config("grid_n must be at least 2".into()));
        }
        Ok(())
    }

    pub fn cell_size(&self) -> f64 {
        2.0 / self.grid_n as f64
    }
}

/// Normalized delay vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct PhaseVectors {
    pub rows: Vec<(f64, f64)>,
    pub q: f64,
}

pub fn embed_samples(x: &[f64], cfg: &PsrConfig) -> Result<PhaseVectors> {
    cfg.validate()?;
    if x.len() <= cfg.tau {
        return Err(Error::DegenerateSegment(format!(
            "{} samples is not longer than tau = {}",
            x.len(),
            cfg.tau
        )));
    }
    let q = x.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if !(q > 0.0) || !q.is_finite() {
        return Err(Error::DegenerateSegment("all-zero or non-finite segment".into()));
    }
    let rows = x.iter().zip(&x[cfg.tau..]).map(|(a, b)| (a / q, b / q)).collect();
    Ok(PhaseVectors { rows, q })
}

pub fn embed(segment: &EcgSegment, cfg: &PsrConfig) -> Result<PhaseVectors> {
    embed_samples(&segment.samples, cfg)
}

/// Grid cell of a coordinate in `[-1, 1]`.
#[inline]
pub fn cell_index(v: f64, grid_n: usize) -> usize {
    let k = ((v + 1.0) * grid_n as f64 / 2.0).floor();
    (k.max(0.0) as usize).min(grid_n - 1)
}

/// Counts and probabilities on the `N x N` grid (row-major, row = first coordinate).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PsrImage {
    pub grid_n: usize,
    pub counts: Vec<u32>,
    pub probs: Vec<f64>,
    pub total: u64,
}

impl PsrImage {
    pub fn count(&self, i: usize, j: usize) -> u32 {
        self.counts[i * self.grid_n + j]
    }

    pub fn prob(&self, i: usize, j: usize) -> f64 {
        self.probs[i * self.grid_n + j]
    }

    /// Sums 2x2 blocks; only defined for even `grid_n`.
    pub fn coarsen(&self) -> Option<PsrImage> {
        if self.grid_n % 2 != 0 {
            return None;
        }
        let n = self.grid_n / 2;
        let mut counts = vec![0u32; n * n];
        for i in 0..self.grid_n {
            for j in 0..self.grid_n {
                counts[(i / 2) * n + j / 2] += self.count(i, j);
            }
        }
        Some(Self::from_counts(n, counts))
    }

    fn from_counts(grid_n: usize, counts: Vec<u32>) -> PsrImage {
        let total: u64 = counts.iter().map(|&c| c as u64).sum();
        let probs = counts.iter().map(|&c| c as f64 / total as f64).collect();
        PsrImage {
            grid_n,
            counts,
            probs,
            total,
        }
    }
}

pub fn grid_count(vectors: &PhaseVectors, cfg: &PsrConfig) -> Result<PsrImage> {
    cfg.validate()?;
    if vectors.rows.is_empty() {
        return Err(Error::DegenerateSegment("no phase vectors".into()));
    }
    let n = cfg.grid_n;
    let mut counts = vec![0u32; n * n];
    for &(a, b) in &vectors.rows {
        counts[cell_index(a, n) * n + cell_index(b, n)] += 1;
    }
    Ok(PsrImage::from_counts(n, counts))
}

/// Pixel intensities `p / max(p)`, so the densest cell is 1.
pub fn render_image(img: &PsrImage) -> Vec<f64> {
    let max = img.probs.iter().copied().fold(0.0, f64::max);
    if max <= 0.0 {
        return vec![0.0; img.probs.len()];
    }
    img.probs.iter().map(|p| p / max).collect()
}

/// Display-only brightening of a rendered image (`v^gamma`, gamma < 1).
pub fn darken_for_display(pixels: &[f64], gamma: f64) -> Vec<f64> {
    pixels.iter().map(|v| v.powf(gamma)).collect()
}

/// Segment to model input in one step.
pub fn segment_image(segment: &EcgSegment, cfg: &PsrConfig) -> Result<(PsrImage, f64)> {
    let v = embed(segment, cfg)?;
    Ok((grid_count(&v, cfg)?, v.q))
}

/// JSON header stored next to a PSR matrix file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PsrHeader {
    pub grid_n: usize,
    pub tau: usize,
    pub q: f64,
    #[serde(rename = "M")]
    pub total: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub metadata: Option<serde_json::Value>,
}

/// Writes `probs` as an `N x N` CSV and the header as `<stem>.json`.
pub fn write_psr(path: &Path, img: &PsrImage, cfg: &PsrConfig, q: f64, metadata: Option<&serde_json::Value>) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    for i in 0..img.grid_n {
        let row: Vec<String> = (0..img.grid_n).map(|j| format!("{:e}", img.prob(i, j))).collect();
        writeln!(out, "{}", row.join(","))?;
    }
    let header = PsrHeader {
        grid_n: img.grid_n,
        tau: cfg.tau,
        q,
        total: img.total,
        metadata: metadata.cloned(),
    };
    std::fs::write(path.with_extension("json"), serde_json::to_string_pretty(&header)?)?;
    Ok(())
}

/// Writes a grayscale binary PGM of the rendered image for inspection.
pub fn write_pgm(path: &Path, pixels: &[f64], grid_n: usize) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    write!(out, "P5\n{grid_n} {grid_n}\n255\n")?;
    let bytes: Vec<u8> = pixels.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    out.write_all(&bytes)?;
    Ok(())
}
