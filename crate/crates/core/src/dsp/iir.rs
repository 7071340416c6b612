//! Biquad sections and zero-phase (forward-backward) filtering.

use std::f64::consts::PI;

/// Normalized second-order section (`a0 == 1`), direct form II transposed.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Biquad {
    pub b: [f64; 3],
    pub a: [f64; 2],
}

impl Biquad {
    fn normalized(b: [f64; 3], a: [f64; 3]) -> Self {
        Biquad {
            b: [b[0] / a[0], b[1] / a[0], b[2] / a[0]],
            a: [a[1] / a[0], a[2] / a[0]],
        }
    }

    /// Notch at `center_hz` with -3 dB bandwidth `bandwidth_hz`.
    pub fn notch(center_hz: f64, bandwidth_hz: f64, fs: f64) -> Self {
        let w0 = 2.0 * PI * center_hz / fs;
        let q = center_hz / bandwidth_hz;
        let alpha = w0.sin() / (2.0 * q);
        let c = w0.cos();
        Self::normalized([1.0, -2.0 * c, 1.0], [1.0 + alpha, -2.0 * c, 1.0 - alpha])
    }

    /// Lowpass section with quality factor `q` (bilinear transform, prewarped).
    pub fn lowpass(cutoff_hz: f64, q: f64, fs: f64) -> Self {
        let w0 = 2.0 * PI * cutoff_hz / fs;
        let alpha = w0.sin() / (2.0 * q);
        let c = w0.cos();
        Self::normalized(
            [(1.0 - c) / 2.0, 1.0 - c, (1.0 - c) / 2.0],
            [1.0 + alpha, -2.0 * c, 1.0 - alpha],
        )
    }

    pub fn dc_gain(&self) -> f64 {
        (self.b[0] + self.b[1] + self.b[2]) / (1.0 + self.a[0] + self.a[1])
    }

    /// Magnitude response at `freq_hz`.
    pub fn gain_at(&self, freq_hz: f64, fs: f64) -> f64 {
        let w = 2.0 * PI * freq_hz / fs;
        let (c1, s1, c2, s2) = (w.cos(), w.sin(), (2.0 * w).cos(), (2.0 * w).sin());
        let num_re = self.b[0] + self.b[1] * c1 + self.b[2] * c2;
        let num_im = -(self.b[1] * s1 + self.b[2] * s2);
        let den_re = 1.0 + self.a[0] * c1 + self.a[1] * c2;
        let den_im = -(self.a[0] * s1 + self.a[1] * s2);
        ((num_re * num_re + num_im * num_im) / (den_re * den_re + den_im * den_im)).sqrt()
    }

    /// Largest pole magnitude.
    pub fn pole_radius(&self) -> f64 {
        let (a1, a2) = (self.a[0], self.a[1]);
        let disc = a1 * a1 - 4.0 * a2;
        if disc < 0.0 {
            a2.sqrt()
        } else {
            let s = disc.sqrt();
            ((-a1 + s) / 2.0).abs().max(((-a1 - s) / 2.0).abs())
        }
    }

    /// Runs the section in place starting from state `z`.
    fn run(&self, x: &mut [f64], mut z: [f64; 2]) {
        let [b0, b1, b2] = self.b;
        let [a1, a2] = self.a;
        for v in x.iter_mut() {
            let input = *v;
            let y = b0 * input + z[0];
            z[0] = b1 * input - a1 * y + z[1];
            z[1] = b2 * input - a2 * y;
            *v = y;
        }
    }

    /// State that makes a constant input `x0` produce a constant output.
    fn steady_state(&self, x0: f64) -> [f64; 2] {
        let y = self.dc_gain() * x0;
        let z1 = self.b[2] * x0 - self.a[1] * y;
        let z0 = self.b[1] * x0 - self.a[0] * y + z1;
        [z0, z1]
    }
}

/// A cascade of second-order sections.
#[derive(Debug, Clone, PartialEq)]
pub struct SosFilter {
    pub sections: Vec<Biquad>,
}

impl SosFilter {
    pub fn new(sections: Vec<Biquad>) -> Self {
        SosFilter { sections }
    }

    /// Butterworth lowpass of even `order` as `order / 2` biquads.
    pub fn butterworth_lowpass(order: usize, cutoff_hz: f64, fs: f64) -> Self {
        assert!(order >= 2 && order % 2 == 0, "order must be even");
        let sections = (0..order / 2)
            .map(|k| {
                let theta = PI * (2 * k + 1) as f64 / (2 * order) as f64;
                Biquad::lowpass(cutoff_hz, 1.0 / (2.0 * theta.sin()), fs)
            })
            .collect();
        SosFilter { sections }
    }

    pub fn gain_at(&self, freq_hz: f64, fs: f64) -> f64 {
        self.sections.iter().map(|s| s.gain_at(freq_hz, fs)).product()
    }

    /// Samples for the impulse response to decay below ~e^-6.
    fn settle_len(&self) -> usize {
        let r = self.sections.iter().map(Biquad::pole_radius).fold(0.0f64, f64::max);
        if r <= 0.0 {
            return 6;
        }
        let tau = -1.0 / r.ln();
        (6.0 * tau).ceil() as usize + 6
    }

    /// One causal pass with steady-state initial conditions.
    fn pass(&self, x: &mut [f64]) {
        let mut x0 = x.first().copied().unwrap_or(0.0);
        for s in &self.sections {
            let z = s.steady_state(x0);
            s.run(x, z);
            x0 *= s.dc_gain();
        }
    }

    /// Zero-phase filtering: odd extension at both ends, forward pass,
    /// backward pass, then trim. The magnitude response is squared.
    pub fn filtfilt(&self, x: &[f64]) -> Vec<f64> {
        let n = x.len();
        if n < 2 {
            return x.to_vec();
        }
        let pad = self.settle_len().min(n - 1);
        let mut ext = Vec::with_capacity(n + 2 * pad);
        let (first, last) = (x[0], x[n - 1]);
        ext.extend((1..=pad).rev().map(|i| 2.0 * first - x[i]));
        ext.extend_from_slice(x);
        ext.extend((1..=pad).map(|i| 2.0 * last - x[n - 1 - i]));

        self.pass(&mut ext);
        ext.reverse();
        self.pass(&mut ext);
        ext.reverse();
        ext[pad..pad + n].to_vec()
    }
}
