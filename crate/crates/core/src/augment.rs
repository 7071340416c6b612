//! Random affine augmentation of square training images.
//!
//! Every transform is expressed as an inverse map from output pixel to
//! source position about the image center, sampled bilinearly with zeros
//! outside the source.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::synth::mix_seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AugmentKind {
    #[default]
    None,
    Shift,
    Zoom,
    Rotate,
    Shear,
    RotateShear,
}

/// Magnitudes used in practice: tiny, small, moderate.
pub const PHI_TINY: f64 = 2.5;
pub const PHI_SMALL: f64 = 5.0;
pub const PHI_MODERATE: f64 = 10.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentationSpec {
    pub kind: AugmentKind,
    /// Shift/zoom factors are drawn from `[1 - phi/100, 1 + phi/100]`;
    /// rotation/shear angles from `[-phi, phi]` degrees.
    pub phi: f64,
}

impl Default for AugmentationSpec {
    fn default() -> Self {
        AugmentationSpec {
            kind: AugmentKind::None,
            phi: PHI_SMALL,
        }
    }
}

impl AugmentationSpec {
    pub fn new(kind: AugmentKind, phi: f64) -> Self {
        AugmentationSpec { kind, phi }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.phi >= 0.0 && self.phi < 100.0) {
            return Err(Error::Config(format!("augmentation phi must be in [0, 100), got {}", self.phi)));
        }
        Ok(())
    }

    pub fn is_identity(&self) -> bool {
        self.kind == AugmentKind::None
    }
}

/// Inverse map `out -> src` as a 2x2 matrix about the center plus a pixel
/// offset, in `(x = column, y = row)` coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Affine {
    pub m: [[f64; 2]; 2],
    pub offset: [f64; 2],
}

impl Affine {
    pub const IDENTITY: Affine = Affine {
        m: [[1.0, 0.0], [0.0, 1.0]],
        offset: [0.0, 0.0],
    };

    /// Content moves by `(dx, dy)` pixels.
    pub fn shift(dx: f64, dy: f64) -> Self {
        Affine {
            m: Self::IDENTITY.m,
            offset: [-dx, -dy],
        }
    }

    /// Content scales by `z` about the center.
    pub fn zoom(z: f64) -> Self {
        Affine {
            m: [[1.0 / z, 0.0], [0.0, 1.0 / z]],
            offset: [0.0, 0.0],
        }
    }

    /// Content rotates by `deg` degrees (clockwise on screen, rows pointing down).
    pub fn rotate(deg: f64) -> Self {
        let (s, c) = deg.to_radians().sin_cos();
        Affine {
            m: [[c, s], [-s, c]],
            offset: [0.0, 0.0],
        }
    }

    /// Horizontal shear by `deg` degrees.
    pub fn shear(deg: f64) -> Self {
        let t = deg.to_radians().tan();
        Affine {
            m: [[1.0, -t], [0.0, 1.0]],
            offset: [0.0, 0.0],
        }
    }

    /// Inverse map of "apply `self`, then `next`".
    pub fn then(self, next: Affine) -> Affine {
        // src = self(next(out))
        let (a, b) = (self.m, next.m);
        let m = [
            [
                a[0][0] * b[0][0] + a[0][1] * b[1][0],
                a[0][0] * b[0][1] + a[0][1] * b[1][1],
            ],
            [
                a[1][0] * b[0][0] + a[1][1] * b[1][0],
                a[1][0] * b[0][1] + a[1][1] * b[1][1],
            ],
        ];
        let o = [
            a[0][0] * next.offset[0] + a[0][1] * next.offset[1] + self.offset[0],
            a[1][0] * next.offset[0] + a[1][1] * next.offset[1] + self.offset[1],
        ];
        Affine { m, offset: o }
    }
}

/// Applies `t` to a row-major `n x n` image; output clipped to `[0, 1]`.
pub fn warp(img: &[f32], n: usize, t: &Affine) -> Vec<f32> {
    assert_eq!(img.len(), n * n);
    let c = (n as f64 - 1.0) / 2.0;
    let at = |r: isize, col: isize| -> f64 {
        if r < 0 || col < 0 || r >= n as isize || col >= n as isize {
            0.0
        } else {
            img[r as usize * n + col as usize] as f64
        }
    };
    let mut out = vec![0.0f32; n * n];
    for i in 0..n {
        for j in 0..n {
            let (x, y) = (j as f64 - c, i as f64 - c);
            let sx = t.m[0][0] * x + t.m[0][1] * y + t.offset[0] + c;
            let sy = t.m[1][0] * x + t.m[1][1] * y + t.offset[1] + c;
            // snap tiny float noise so exact grid hits stay exact
            let sx = if (sx - sx.round()).abs() < 1e-9 { sx.round() } else { sx };
            let sy = if (sy - sy.round()).abs() < 1e-9 { sy.round() } else { sy };
            let (x0, y0) = (sx.floor(), sy.floor());
            let (fx, fy) = (sx - x0, sy - y0);
            let (x0, y0) = (x0 as isize, y0 as isize);
            let mut v = (1.0 - fx) * (1.0 - fy) * at(y0, x0);
            if fx > 0.0 {
                v += fx * (1.0 - fy) * at(y0, x0 + 1);
            }
            if fy > 0.0 {
                v += (1.0 - fx) * fy * at(y0 + 1, x0);
            }
            if fx > 0.0 && fy > 0.0 {
                v += fx * fy * at(y0 + 1, x0 + 1);
            }
            out[i * n + j] = v.clamp(0.0, 1.0) as f32;
        }
    }
    out
}

/// Draws a random transform for `spec`.
pub fn random_affine<R: Rng>(spec: &AugmentationSpec, n: usize, rng: &mut R) -> Affine {
    let p = spec.phi;
    let factor = |rng: &mut R| if p > 0.0 { rng.random_range(1.0 - p / 100.0..=1.0 + p / 100.0) } else { 1.0 };
    let angle = |rng: &mut R| if p > 0.0 { rng.random_range(-p..=p) } else { 0.0 };
    match spec.kind {
        AugmentKind::None => Affine::IDENTITY,
        AugmentKind::Shift => {
            let dx = (factor(rng) - 1.0) * n as f64;
            let dy = (factor(rng) - 1.0) * n as f64;
            Affine::shift(dx, dy)
        }
        AugmentKind::Zoom => Affine::zoom(factor(rng)),
        AugmentKind::Rotate => Affine::rotate(angle(rng)),
        AugmentKind::Shear => Affine::shear(angle(rng)),
        AugmentKind::RotateShear => {
            let r = Affine::rotate(angle(rng));
            r.then(Affine::shear(angle(rng)))
        }
    }
}

/// Augments one image with a draw keyed by `(seed, epoch, batch, item)`.
pub fn augment(img: &[f32], n: usize, spec: &AugmentationSpec, key: [u64; 4]) -> Vec<f32> {
    if spec.is_identity() {
        return img.to_vec();
    }
    let s = key.iter().fold(0x5eed_u64, |acc, &k| mix_seed(acc, k));
    let mut rng = ChaCha8Rng::seed_from_u64(s);
    warp(img, n, &random_affine(spec, n, &mut rng))
}
