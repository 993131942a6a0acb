//! A0 (identity), A1 (scale/rotate/crop) and A2 (resized crop, flip, colour
//! jitter, grayscale, blur) augmentation.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{check_unit_range, Raster};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum AugmentKind {
    A0,
    A1,
    A2,
}

/// A policy and its parameter ranges. Only the fields of its kind are used.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentPolicy {
    pub kind: AugmentKind,
    pub scale: (f64, f64),
    pub rotation_deg: (f64, f64),
    pub crop_fraction: f64,
    pub area: (f64, f64),
    pub aspect: (f64, f64),
    pub flip_p: f64,
    pub jitter: f64,
    pub grayscale_p: f64,
    pub blur_p: f64,
    pub blur_sigma: (f64, f64),
}

impl AugmentPolicy {
    pub fn of(kind: AugmentKind) -> Self {
        AugmentPolicy {
            kind,
            scale: (0.8, 1.2),
            rotation_deg: (-15.0, 15.0),
            crop_fraction: 0.9,
            area: (0.5, 1.0),
            aspect: (3.0 / 4.0, 4.0 / 3.0),
            flip_p: 0.5,
            jitter: 0.4,
            grayscale_p: 0.2,
            blur_p: 0.5,
            blur_sigma: (0.1, 2.0),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let range = |name: &str, (lo, hi): (f64, f64), min: f64| {
            if lo.is_finite() && hi.is_finite() && min <= lo && lo <= hi {
                Ok(())
            } else {
                Err(Error::Parameter(format!("augment {name} range ({lo}, {hi}) is invalid")))
            }
        };
        let prob = |name: &str, p: f64| {
            if (0.0..=1.0).contains(&p) {
                Ok(())
            } else {
                Err(Error::Parameter(format!("augment {name} probability {p} not in [0, 1]")))
            }
        };
        match self.kind {
            AugmentKind::A0 => Ok(()),
            AugmentKind::A1 => {
                range("scale", self.scale, f64::MIN_POSITIVE)?;
                range("rotation", self.rotation_deg, f64::NEG_INFINITY)?;
                if !(self.crop_fraction > 0.0 && self.crop_fraction <= 1.0) {
                    return Err(Error::Parameter(format!(
                        "augment crop fraction {} not in (0, 1]",
                        self.crop_fraction
                    )));
                }
                Ok(())
            }
            AugmentKind::A2 => {
                range("area", self.area, f64::MIN_POSITIVE)?;
                if self.area.1 > 1.0 {
                    return Err(Error::Parameter("augment area fraction exceeds 1".into()));
                }
                range("aspect", self.aspect, f64::MIN_POSITIVE)?;
                range("blur sigma", self.blur_sigma, f64::MIN_POSITIVE)?;
                prob("flip", self.flip_p)?;
                prob("grayscale", self.grayscale_p)?;
                prob("blur", self.blur_p)?;
                if !(0.0..1.0).contains(&self.jitter) {
                    return Err(Error::Parameter(format!("augment jitter {} not in [0, 1)", self.jitter)));
                }
                Ok(())
            }
        }
    }
}

/// Policies applied to the original and the counterpart streams.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PairPolicy {
    pub left: AugmentPolicy,
    pub right: AugmentPolicy,
}

impl PairPolicy {
    pub fn new(left: AugmentKind, right: AugmentKind) -> Self {
        PairPolicy {
            left: AugmentPolicy::of(left),
            right: AugmentPolicy::of(right),
        }
    }
}

impl Default for PairPolicy {
    fn default() -> Self {
        PairPolicy::new(AugmentKind::A0, AugmentKind::A1)
    }
}

/// Bilinear sample at continuous pixel coordinates, clamping at the border.
fn sample(r: &Raster, y: f64, x: f64, out: &mut [f64]) {
    let (h, w) = (r.shape()[0], r.shape()[1]);
    let y = y.clamp(0.0, (h - 1) as f64);
    let x = x.clamp(0.0, (w - 1) as f64);
    let (y0, x0) = (y.floor() as usize, x.floor() as usize);
    let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
    let (fy, fx) = (y - y0 as f64, x - x0 as f64);
    let d = r.data();
    for ch in 0..3 {
        let at = |yy: usize, xx: usize| d[(yy * w + xx) * 3 + ch];
        let top = at(y0, x0) * (1.0 - fx) + at(y0, x1) * fx;
        let bottom = at(y1, x0) * (1.0 - fx) + at(y1, x1) * fx;
        out[ch] = top * (1.0 - fy) + bottom * fy;
    }
}

/// Fills an `h×w` output by sampling `r` at `map(row, col) -> (y, x)`.
fn warp(r: &Raster, h: usize, w: usize, map: impl Fn(f64, f64) -> (f64, f64)) -> Raster {
    let mut out = Tensor::zeros(&[h, w, 3]);
    let data = out.data_mut();
    for row in 0..h {
        for col in 0..w {
            let (y, x) = map(row as f64, col as f64);
            let base = (row * w + col) * 3;
            sample(r, y, x, &mut data[base..base + 3]);
        }
    }
    out
}

/// Resamples an `H×W×3` raster to `h×w` with pixel-centre alignment.
pub fn resize_bilinear(r: &Raster, h: usize, w: usize) -> Raster {
    let (sh, sw) = (r.shape()[0] as f64, r.shape()[1] as f64);
    let (ky, kx) = (sh / h as f64, sw / w as f64);
    warp(r, h, w, |row, col| ((row + 0.5) * ky - 0.5, (col + 0.5) * kx - 0.5))
}

fn a1<R: Rng + ?Sized>(r: &Raster, p: &AugmentPolicy, rng: &mut R) -> Raster {
    let (h, w) = (r.shape()[0], r.shape()[1]);
    let scale = rng.random_range(p.scale.0..=p.scale.1);
    let theta = rng.random_range(p.rotation_deg.0..=p.rotation_deg.1).to_radians();
    let (ch, cw) = (p.crop_fraction * h as f64, p.crop_fraction * w as f64);
    let oy = rng.random_range(0.0..=(h as f64 - ch));
    let ox = rng.random_range(0.0..=(w as f64 - cw));
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let (sin, cos) = theta.sin_cos();
    warp(r, h, w, |row, col| {
        // Output pixel → crop window → undo rotation and scale about the centre.
        let y = oy + (row + 0.5) * ch / h as f64 - 0.5 - cy;
        let x = ox + (col + 0.5) * cw / w as f64 - 0.5 - cx;
        let (y, x) = ((cos * y - sin * x) / scale, (sin * y + cos * x) / scale);
        (y + cy, x + cx)
    })
}

fn gaussian_blur(r: &Raster, sigma: f64) -> Raster {
    let radius = (2.0 * sigma).ceil() as isize;
    let kernel: Vec<f64> = (-radius..=radius).map(|k| (-((k * k) as f64) / (2.0 * sigma * sigma)).exp()).collect();
    let norm: f64 = kernel.iter().sum();
    let kernel: Vec<f64> = kernel.iter().map(|k| k / norm).collect();
    let (h, w) = (r.shape()[0] as isize, r.shape()[1] as isize);
    let pass = |src: &Raster, vertical: bool| {
        let mut out = Tensor::zeros(src.shape());
        let (s, d) = (src.data(), out.data_mut());
        for y in 0..h {
            for x in 0..w {
                for ch in 0..3 {
                    let mut acc = 0.0;
                    for (i, k) in kernel.iter().enumerate() {
                        let o = i as isize - radius;
                        let (yy, xx) = if vertical {
                            ((y + o).clamp(0, h - 1), x)
                        } else {
                            (y, (x + o).clamp(0, w - 1))
                        };
                        acc += k * s[((yy * w + xx) * 3 + ch as isize) as usize];
                    }
                    d[((y * w + x) * 3 + ch as isize) as usize] = acc;
                }
            }
        }
        out
    };
    pass(&pass(r, false), true)
}

fn a2<R: Rng + ?Sized>(r: &Raster, p: &AugmentPolicy, rng: &mut R) -> Raster {
    let (h, w) = (r.shape()[0], r.shape()[1]);
    let area = rng.random_range(p.area.0..=p.area.1) * (h * w) as f64;
    let log_aspect = rng.random_range(p.aspect.0.ln()..=p.aspect.1.ln());
    let aspect = log_aspect.exp();
    let cw = (area * aspect).sqrt().min(w as f64);
    let ch = (area / aspect).sqrt().min(h as f64);
    let oy = rng.random_range(0.0..=(h as f64 - ch));
    let ox = rng.random_range(0.0..=(w as f64 - cw));
    let flip = rng.random_bool(p.flip_p);
    let mut out = warp(r, h, w, |row, col| {
        let col = if flip { (w - 1) as f64 - col } else { col };
        (oy + (row + 0.5) * ch / h as f64 - 0.5, ox + (col + 0.5) * cw / w as f64 - 0.5)
    });

    let brightness = rng.random_range(1.0 - p.jitter..=1.0 + p.jitter);
    let contrast = rng.random_range(1.0 - p.jitter..=1.0 + p.jitter);
    let mean = out.data().iter().sum::<f64>() / out.numel() as f64 * brightness;
    for v in out.data_mut() {
        *v = ((*v * brightness - mean) * contrast + mean).clamp(0.0, 1.0);
    }
    if rng.random_bool(p.grayscale_p) {
        for px in out.data_mut().chunks_mut(3) {
            let y = 0.299 * px[0] + 0.587 * px[1] + 0.114 * px[2];
            px.fill(y);
        }
    }
    if rng.random_bool(p.blur_p) {
        let sigma = rng.random_range(p.blur_sigma.0..=p.blur_sigma.1);
        out = gaussian_blur(&out, sigma);
    }
    out
}

/// Applies `policy`; output has the input's shape and values in `[0, 1]`.
pub fn augment<R: Rng + ?Sized>(r: &Raster, policy: &AugmentPolicy, rng: &mut R) -> Result<Raster> {
    check_unit_range(r)?;
    policy.validate()?;
    let mut out = match policy.kind {
        AugmentKind::A0 => return Ok(r.clone()),
        AugmentKind::A1 => a1(r, policy, rng),
        AugmentKind::A2 => a2(r, policy, rng),
    };
    for v in out.data_mut() {
        *v = v.clamp(0.0, 1.0);
    }
    Ok(out)
}
