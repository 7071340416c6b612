//! Multilevel discrete wavelet transform with half-sample symmetric
//! extension at the boundaries.
//!
//! Coefficient lengths follow the usual convention: a level on `n` samples
//! with an `f`-tap filter yields `(n + f - 1) / 2` coefficients, and the
//! inverse keeps the `2 * len - f + 2` valid reconstruction samples.

/// Daubechies-8 decomposition lowpass filter (16 taps).
pub const DB8_DEC_LO: [f64; 16] = [
    -0.000_117_476_784_124_769_53,
    0.000_675_449_406_450_569_3,
    -0.000_391_740_373_376_947_05,
    -0.004_870_352_993_451_574,
    0.008_746_094_047_405_777,
    0.013_981_027_917_398_282,
    -0.044_088_253_930_794_755,
    -0.017_369_301_001_807_547,
    0.128_747_426_620_478_47,
    0.000_472_484_573_913_282_8,
    -0.284_015_542_961_546_9,
    -0.015_829_105_256_349_306,
    0.585_354_683_654_206_7,
    0.675_630_736_297_289_8,
    0.312_871_590_914_299_95,
    0.054_415_842_243_104_01,
];

/// An orthogonal wavelet described by its decomposition lowpass filter.
#[derive(Debug, Clone, PartialEq)]
pub struct Wavelet {
    dec_lo: Vec<f64>,
}

impl Wavelet {
    pub fn db8() -> Self {
        Wavelet {
            dec_lo: DB8_DEC_LO.to_vec(),
        }
    }

    pub fn from_dec_lo(dec_lo: Vec<f64>) -> Self {
        assert!(dec_lo.len() >= 2 && dec_lo.len() % 2 == 0, "filter length must be even");
        Wavelet { dec_lo }
    }

    pub fn filter_len(&self) -> usize {
        self.dec_lo.len()
    }

    pub fn dec_lo(&self) -> &[f64] {
        &self.dec_lo
    }

    /// Quadrature-mirror highpass: `g[k] = (-1)^(k+1) h[L-1-k]`.
    pub fn dec_hi(&self) -> Vec<f64> {
        let l = self.dec_lo.len();
        (0..l)
            .map(|k| {
                let v = self.dec_lo[l - 1 - k];
                if k % 2 == 0 {
                    -v
                } else {
                    v
                }
            })
            .collect()
    }

    pub fn rec_lo(&self) -> Vec<f64> {
        self.dec_lo.iter().rev().copied().collect()
    }

    pub fn rec_hi(&self) -> Vec<f64> {
        self.dec_hi().into_iter().rev().collect()
    }
}

/// Index into a half-sample symmetric extension of a length-`n` signal.
/// Repeats reflection for signals shorter than the filter.
#[inline]
fn symmetric_index(i: isize, n: usize) -> usize {
    let n = n as isize;
    let period = 2 * n;
    let mut k = i.rem_euclid(period);
    if k >= n {
        k = period - 1 - k;
    }
    k as usize
}

/// Filter and downsample by two (odd phase of the full convolution).
fn downsample_convolve(x: &[f64], filter: &[f64]) -> Vec<f64> {
    let n = x.len();
    let f = filter.len();
    let out_len = (n + f - 1) / 2;
    let mut out = Vec::with_capacity(out_len);
    for o in 0..out_len {
        let i = (2 * o + 1) as isize;
        let mut acc = 0.0;
        for (j, &h) in filter.iter().enumerate() {
            let k = i - j as isize;
            let v = if k >= 0 && (k as usize) < n {
                x[k as usize]
            } else {
                x[symmetric_index(k, n)]
            };
            acc += h * v;
        }
        out.push(acc);
    }
    out
}

/// Upsample by two and filter, keeping the valid part.
fn upsample_convolve_into(coeffs: &[f64], filter: &[f64], out: &mut [f64]) {
    let f = filter.len();
    let up_len = 2 * coeffs.len();
    debug_assert_eq!(out.len(), up_len + 2 - f);
    for (m, o) in out.iter_mut().enumerate() {
        // u[k] is nonzero only at even k = 2c.
        let base = m + f - 2;
        let mut acc = 0.0;
        let mut j = base % 2;
        while j < f {
            let k = base - j;
            if k < up_len {
                acc += filter[j] * coeffs[k / 2];
            }
            j += 2;
        }
        *o += acc;
    }
}

/// One analysis step: approximation and detail coefficients.
pub fn dwt(x: &[f64], wavelet: &Wavelet) -> (Vec<f64>, Vec<f64>) {
    (
        downsample_convolve(x, wavelet.dec_lo()),
        downsample_convolve(x, &wavelet.dec_hi()),
    )
}

/// One synthesis step. Either branch may be omitted (treated as zeros).
pub fn idwt(approx: Option<&[f64]>, detail: Option<&[f64]>, wavelet: &Wavelet) -> Vec<f64> {
    let len = match (approx, detail) {
        (Some(a), Some(d)) => {
            assert_eq!(a.len(), d.len(), "coefficient lengths differ");
            a.len()
        }
        (Some(a), None) => a.len(),
        (None, Some(d)) => d.len(),
        (None, None) => panic!("idwt needs at least one coefficient branch"),
    };
    let f = wavelet.filter_len();
    let out_len = (2 * len + 2).saturating_sub(f);
    let mut out = vec![0.0; out_len];
    if let Some(a) = approx {
        upsample_convolve_into(a, &wavelet.rec_lo(), &mut out);
    }
    if let Some(d) = detail {
        upsample_convolve_into(d, &wavelet.rec_hi(), &mut out);
    }
    out
}

/// Multilevel decomposition: `[cA_L, cD_L, cD_{L-1}, ..., cD_1]`.
pub fn wavedec(x: &[f64], wavelet: &Wavelet, levels: usize) -> Vec<Vec<f64>> {
    let mut details = Vec::with_capacity(levels);
    let mut approx = x.to_vec();
    for _ in 0..levels {
        let (a, d) = dwt(&approx, wavelet);
        details.push(d);
        approx = a;
    }
    let mut out = vec![approx];
    out.extend(details.into_iter().rev());
    out
}

/// Inverse of [`wavedec`]; `None` detail levels are treated as zero.
pub fn waverec(approx: &[f64], details: &[Option<&[f64]>], detail_lens: &[usize], wavelet: &Wavelet) -> Vec<f64> {
    let mut a = approx.to_vec();
    for (d, &dlen) in details.iter().zip(detail_lens) {
        if a.len() == dlen + 1 {
            a.pop();
        }
        a = idwt(Some(&a), *d, wavelet);
    }
    a
}

/// Reconstruction from the level-`levels` approximation alone, trimmed to
/// the input length. This is the slow trend of the signal.
pub fn approximation_trend(x: &[f64], wavelet: &Wavelet, levels: usize) -> Vec<f64> {
    let coeffs = wavedec(x, wavelet, levels);
    let detail_lens: Vec<usize> = coeffs[1..].iter().map(Vec::len).collect();
    let details = vec![None; levels];
    let mut trend = waverec(&coeffs[0], &details, &detail_lens, wavelet);
    trend.truncate(x.len());
    trend
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn db8_is_orthonormal() {
        let h = DB8_DEC_LO;
        let sum: f64 = h.iter().sum();
        assert!((sum - std::f64::consts::SQRT_2).abs() < 1e-12);
        let energy: f64 = h.iter().map(|v| v * v).sum();
        assert!((energy - 1.0).abs() < 1e-12);
        for shift in (2..16).step_by(2) {
            let c: f64 = (0..16 - shift).map(|k| h[k] * h[k + shift]).sum();
            assert!(c.abs() < 1e-12, "shift {shift}: {c}");
        }
    }

    #[test]
    fn symmetric_extension_indices() {
        // x = [a b c] extends as ... c c b a | a b c | c b a a ...
        let idx: Vec<usize> = (-4..7).map(|i| symmetric_index(i, 3)).collect();
        assert_eq!(idx, vec![2, 2, 1, 0, 0, 1, 2, 2, 1, 0, 0]);
    }

    #[test]
    fn perfect_reconstruction_single_level() {
        let w = Wavelet::db8();
        let x: Vec<f64> = (0..137).map(|i| ((i * 7919) % 101) as f64 / 50.0 - 1.0).collect();
        let (a, d) = dwt(&x, &w);
        assert_eq!(a.len(), (137 + 15) / 2);
        let y = idwt(Some(&a), Some(&d), &w);
        for i in 0..x.len() {
            assert!((x[i] - y[i]).abs() < 1e-10, "{i}");
        }
    }

    #[test]
    fn perfect_reconstruction_multilevel() {
        let w = Wavelet::db8();
        let x: Vec<f64> = (0..1000).map(|i| (i as f64 * 0.37).sin() + 0.01 * i as f64).collect();
        let c = wavedec(&x, &w, 5);
        let lens: Vec<usize> = c[1..].iter().map(Vec::len).collect();
        let details: Vec<Option<&[f64]>> = c[1..].iter().map(|v| Some(v.as_slice())).collect();
        let y = waverec(&c[0], &details, &lens, &w);
        for i in 0..x.len() {
            assert!((x[i] - y[i]).abs() < 1e-9);
        }
    }

    #[test]
    fn constant_is_pure_trend() {
        let w = Wavelet::db8();
        let x = vec![2.5; 5000];
        let t = approximation_trend(&x, &w, 9);
        for v in t {
            assert!((v - 2.5).abs() < 1e-9);
        }
    }
}
