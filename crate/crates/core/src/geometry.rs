//! Box algebra for normalized center-format boxes.
//!
//! Every box in the crate is a [`NormBox`] in `(cx, cy, w, h)` order with all
//! coordinates expressed as fractions of the image size. Pixel and corner
//! representations only appear at I/O boundaries.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{MatrError, Result};

/// Clamp applied before taking the inverse logistic of an anchor coordinate.
pub const LOGIT_EPS: f64 = 1e-4;

/// Temperature of the sinusoidal box encoding.
pub const SINE_TEMPERATURE: f64 = 20.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl NormBox {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Result<Self> {
        let b = NormBox { cx, cy, w, h };
        if b.is_valid() {
            Ok(b)
        } else {
            Err(MatrError::Input(format!(
                "invalid box (cx={cx}, cy={cy}, w={w}, h={h})"
            )))
        }
    }

    pub fn from_corners(left: f64, top: f64, right: f64, bottom: f64) -> Self {
        NormBox {
            cx: 0.5 * (left + right),
            cy: 0.5 * (top + bottom),
            w: right - left,
            h: bottom - top,
        }
    }

    pub fn from_array(v: [f64; 4]) -> Self {
        NormBox {
            cx: v[0],
            cy: v[1],
            w: v[2],
            h: v[3],
        }
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.cx, self.cy, self.w, self.h]
    }

    pub fn is_valid(&self) -> bool {
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        let size = |v: f64| v > 0.0 && v <= 1.0;
        unit(self.cx) && unit(self.cy) && size(self.w) && size(self.h)
    }

    pub fn left(&self) -> f64 {
        self.cx - 0.5 * self.w
    }

    pub fn right(&self) -> f64 {
        self.cx + 0.5 * self.w
    }

    pub fn top(&self) -> f64 {
        self.cy - 0.5 * self.h
    }

    pub fn bottom(&self) -> f64 {
        self.cy + 0.5 * self.h
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    /// Pull every coordinate back into the valid range. Sizes are floored at
    /// `min_size` so the result always satisfies the box invariants.
    pub fn clamped(self, min_size: f64) -> Self {
        NormBox {
            cx: self.cx.clamp(0.0, 1.0),
            cy: self.cy.clamp(0.0, 1.0),
            w: self.w.clamp(min_size, 1.0),
            h: self.h.clamp(min_size, 1.0),
        }
    }

    /// L1 distance summed over the four coordinates.
    pub fn l1(&self, other: &NormBox) -> f64 {
        (self.cx - other.cx).abs()
            + (self.cy - other.cy).abs()
            + (self.w - other.w).abs()
            + (self.h - other.h).abs()
    }
}

/// Offsets applied to an anchor in logit space.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct BoxDelta {
    pub dcx: f64,
    pub dcy: f64,
    pub dw: f64,
    pub dh: f64,
}

impl BoxDelta {
    pub fn is_finite(&self) -> bool {
        self.dcx.is_finite() && self.dcy.is_finite() && self.dw.is_finite() && self.dh.is_finite()
    }
}

// Areas come from corner differences so that identical boxes give an
// intersection bitwise equal to their area.
fn corner_area(b: &NormBox) -> f64 {
    (b.right() - b.left()) * (b.bottom() - b.top())
}

fn intersection(a: &NormBox, b: &NormBox) -> f64 {
    let iw = (a.right().min(b.right()) - a.left().max(b.left())).max(0.0);
    let ih = (a.bottom().min(b.bottom()) - a.top().max(b.top())).max(0.0);
    iw * ih
}

pub fn iou(a: &NormBox, b: &NormBox) -> f64 {
    let inter = intersection(a, b);
    let union = corner_area(a) + corner_area(b) - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Generalized IoU: IoU minus the fraction of the enclosing box not covered by the union.
pub fn giou(a: &NormBox, b: &NormBox) -> f64 {
    let inter = intersection(a, b);
    let union = corner_area(a) + corner_area(b) - inter;
    let ew = a.right().max(b.right()) - a.left().min(b.left());
    let eh = a.bottom().max(b.bottom()) - a.top().min(b.top());
    let enclosing = ew * eh;
    if union <= 0.0 || enclosing <= 0.0 {
        return 0.0;
    }
    inter / union - (enclosing - union) / enclosing
}

pub fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Inverse logistic with the input clamped to `[LOGIT_EPS, 1 - LOGIT_EPS]`.
pub fn inverse_logistic(p: f64) -> f64 {
    let p = p.clamp(LOGIT_EPS, 1.0 - LOGIT_EPS);
    (p / (1.0 - p)).ln()
}

/// `logistic(inverse_logistic(anchor) + delta)` per coordinate.
pub fn refine_anchor(anchor: &NormBox, delta: &BoxDelta) -> NormBox {
    NormBox {
        cx: logistic(inverse_logistic(anchor.cx) + delta.dcx),
        cy: logistic(inverse_logistic(anchor.cy) + delta.dcy),
        w: logistic(inverse_logistic(anchor.w) + delta.dw),
        h: logistic(inverse_logistic(anchor.h) + delta.dh),
    }
}

/// Angular frequencies used for one coordinate of a sinusoidal encoding
/// with `feats` output features (`feats / 2` sin/cos pairs).
pub fn sine_frequencies(feats: usize) -> Vec<f64> {
    (0..feats / 2)
        .map(|k| 2.0 * PI / SINE_TEMPERATURE.powf(2.0 * k as f64 / feats as f64))
        .collect()
}

fn check_embedding_dim(dim: usize) -> Result<()> {
    if dim == 0 || !dim.is_multiple_of(8) {
        return Err(MatrError::Config(format!(
            "embedding dim {dim} must be a positive multiple of 8"
        )));
    }
    Ok(())
}

fn encode_coord(value: f64, freqs: &[f64], out: &mut [f64]) {
    for (k, w) in freqs.iter().enumerate() {
        let (s, c) = (value * w).sin_cos();
        out[2 * k] = s;
        out[2 * k + 1] = c;
    }
}

/// Sinusoidal encoding of `(cx, cy, w, h)`; each coordinate fills `dim / 4`
/// consecutive features as interleaved sin/cos pairs.
pub fn box_to_embedding(b: &NormBox, dim: usize) -> Result<Vec<f64>> {
    check_embedding_dim(dim)?;
    let feats = dim / 4;
    let freqs = sine_frequencies(feats);
    let mut out = vec![0.0; dim];
    for (i, v) in b.to_array().into_iter().enumerate() {
        encode_coord(v, &freqs, &mut out[i * feats..(i + 1) * feats]);
    }
    Ok(out)
}

/// Encoding of a point that lines up with the `(cx, cy)` slots of
/// [`box_to_embedding`]; the size slots are left at zero.
pub fn point_to_embedding(x: f64, y: f64, dim: usize) -> Result<Vec<f64>> {
    check_embedding_dim(dim)?;
    let feats = dim / 4;
    let freqs = sine_frequencies(feats);
    let mut out = vec![0.0; dim];
    encode_coord(x, &freqs, &mut out[..feats]);
    encode_coord(y, &freqs, &mut out[feats..2 * feats]);
    Ok(out)
}

/// Matrix of `1 - iou(predicted[i], targets[j])`.
pub fn pairwise_distance(predicted: &[NormBox], targets: &[NormBox]) -> Vec<Vec<f64>> {
    predicted
        .iter()
        .map(|p| targets.iter().map(|t| 1.0 - iou(p, t)).collect())
        .collect()
}
