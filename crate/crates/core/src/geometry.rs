//! Cylinder geometry for equirectangular panoramas.
//!
//! Azimuth is normalized to `[0, 1)` and wraps at 1.0; the vertical axis is
//! linear. Boxes that straddle the stitching seam are ordinary boxes here:
//! their azimuthal extent is an arc, not an interval.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Canonicalizes an azimuth to `[0, 1)`.
#[inline]
pub fn wrap_unit(x: f64) -> f64 {
    let r = x - x.floor();
    // x slightly below an integer can round up to exactly 1.0
    if r >= 1.0 {
        0.0
    } else {
        r
    }
}

/// Signed shortest azimuthal displacement from `b` to `a`, in `[-0.5, 0.5)`.
///
/// Antipodal points resolve to `-0.5`.
#[inline]
pub fn wrap_delta(a: f64, b: f64) -> f64 {
    let d = wrap_unit(a - b);
    if d >= 0.5 {
        d - 1.0
    } else {
        d
    }
}

/// Axis-aligned box on the panoramic cylinder, stored in center form.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PanoBox {
    cu: f64,
    cv: f64,
    w: f64,
    h: f64,
}

impl PanoBox {
    /// Builds a box, canonicalizing the azimuth center.
    pub fn new(cu: f64, cv: f64, w: f64, h: f64) -> Result<Self> {
        if !(cu.is_finite() && cv.is_finite() && w.is_finite() && h.is_finite()) {
            return Err(Error::input(format!(
                "non-finite box ({cu}, {cv}, {w}, {h})"
            )));
        }
        if !(0.0..=1.0).contains(&cv) {
            return Err(Error::input(format!("vertical center {cv} outside [0, 1]")));
        }
        if !(w > 0.0 && w <= 1.0 && h > 0.0 && h <= 1.0) {
            return Err(Error::input(format!("box extent ({w}, {h}) outside (0, 1]")));
        }
        Ok(Self {
            cu: wrap_unit(cu),
            cv,
            w,
            h,
        })
    }

    /// Builds a box from possibly out-of-range values by clamping them into
    /// the valid domain. Used for model outputs (Kalman means, perturbed
    /// anchors) which are not guaranteed to stay in range.
    pub fn clamped(cu: f64, cv: f64, w: f64, h: f64) -> Self {
        const MIN_EXTENT: f64 = 1e-4;
        let fix = |x: f64, lo: f64, hi: f64, fallback: f64| {
            if x.is_finite() {
                x.clamp(lo, hi)
            } else {
                fallback
            }
        };
        Self {
            cu: if cu.is_finite() { wrap_unit(cu) } else { 0.0 },
            cv: fix(cv, 0.0, 1.0, 0.5),
            w: fix(w, MIN_EXTENT, 1.0, MIN_EXTENT),
            h: fix(h, MIN_EXTENT, 1.0, MIN_EXTENT),
        }
    }

    pub fn cu(&self) -> f64 {
        self.cu
    }

    pub fn cv(&self) -> f64 {
        self.cv
    }

    pub fn w(&self) -> f64 {
        self.w
    }

    pub fn h(&self) -> f64 {
        self.h
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    /// The same box rotated by `s` in azimuth.
    pub fn shifted(&self, s: f64) -> Self {
        Self {
            cu: wrap_unit(self.cu + s),
            ..*self
        }
    }

    /// `[cu, cv, w, h]`.
    pub fn to_array(&self) -> [f64; 4] {
        [self.cu, self.cv, self.w, self.h]
    }
}

/// Length of the intersection of two arcs on the unit circle, each given by
/// start point and length (≤ 1).
fn arc_overlap(start_a: f64, len_a: f64, start_b: f64, len_b: f64) -> f64 {
    // Unroll arc b periodically; for lengths ≤ 1 the copies are disjoint, so
    // summing the linear overlaps counts every point once.
    (-2..=2)
        .map(|k| {
            let lo = start_a.max(start_b + k as f64);
            let hi = (start_a + len_a).min(start_b + k as f64 + len_b);
            (hi - lo).max(0.0)
        })
        .sum()
}

fn linear_overlap(ca: f64, la: f64, cb: f64, lb: f64) -> f64 {
    ((la + lb) / 2.0 - (ca - cb).abs()).clamp(0.0, la.min(lb))
}

fn iou_from_overlaps(a: &PanoBox, b: &PanoBox, inter_u: f64, inter_v: f64) -> f64 {
    let inter = inter_u * inter_v;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        return 0.0;
    }
    (inter / union).clamp(0.0, 1.0)
}

/// Intersection over union on the cylinder.
pub fn cyclic_iou(a: &PanoBox, b: &PanoBox) -> f64 {
    let key = |x: &PanoBox| x.to_array().map(f64::to_bits);
    let (a, b) = if key(a) <= key(b) { (a, b) } else { (b, a) };
    // Measure both arcs relative to a's start so the arithmetic does not
    // depend on where the seam happens to fall.
    let start_a = 0.0;
    let start_b = wrap_delta(b.cu - b.w / 2.0, a.cu - a.w / 2.0);
    let inter_u = arc_overlap(start_a, a.w, start_b, b.w).min(a.w.min(b.w));
    let inter_v = linear_overlap(a.cv, a.h, b.cv, b.h);
    iou_from_overlaps(a, b, inter_u, inter_v)
}

/// IoU that treats the azimuth as a bounded line `[0, 1]`: boxes are clipped
/// at the seam instead of wrapping. This is what a pinhole-image tracker
/// does on a panorama, and exists for ablations.
pub fn clamped_iou(a: &PanoBox, b: &PanoBox) -> f64 {
    let clip = |x: &PanoBox| {
        let lo = (x.cu - x.w / 2.0).clamp(0.0, 1.0);
        let hi = (x.cu + x.w / 2.0).clamp(0.0, 1.0);
        (lo, hi)
    };
    let (alo, ahi) = clip(a);
    let (blo, bhi) = clip(b);
    let inter_u = (ahi.min(bhi) - alo.max(blo)).max(0.0);
    let inter_v = linear_overlap(a.cv, a.h, b.cv, b.h);
    let area_a = (ahi - alo) * a.h;
    let area_b = (bhi - blo) * b.h;
    let inter = inter_u * inter_v;
    let union = area_a + area_b - inter;
    if union <= 0.0 {
        0.0
    } else {
        (inter / union).clamp(0.0, 1.0)
    }
}

/// Which azimuth topology the tracker uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum Geometry {
    /// Azimuth wraps at 1.0.
    #[default]
    Cyclic,
    /// Azimuth is clipped at the seam; innovations use the naive difference.
    Clamped,
}

impl Geometry {
    pub fn iou(self, a: &PanoBox, b: &PanoBox) -> f64 {
        match self {
            Geometry::Cyclic => cyclic_iou(a, b),
            Geometry::Clamped => clamped_iou(a, b),
        }
    }

    /// Azimuth displacement from `b` to `a`.
    pub fn azimuth_delta(self, a: f64, b: f64) -> f64 {
        match self {
            Geometry::Cyclic => wrap_delta(a, b),
            Geometry::Clamped => a - b,
        }
    }
}

impl FromStr for Geometry {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cyclic" => Ok(Self::Cyclic),
            "clamped" => Ok(Self::Clamped),
            _ => Err(Error::config(format!("unknown geometry `{s}`"))),
        }
    }
}

impl fmt::Display for Geometry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Cyclic => "cyclic",
            Self::Clamped => "clamped",
        })
    }
}
