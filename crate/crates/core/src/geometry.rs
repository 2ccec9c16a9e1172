//! Flip / rotate / scale of an RGBA subject cutout.
//!
//! Pixel `(i, j)` covers the square `[i, i+1) x [j, j+1)`, so its center is at
//! `(i + 0.5, j + 0.5)`. The y axis points down, which makes a positive angle
//! a clockwise rotation on screen. Matrices map source points to output points
//! as `x' = a x + b y + c`, `y' = d x + e y + f`.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::raster::{Channels, ImageBuffer, MaskedSubject};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("invalid affine parameters: {0}")]
    InvalidParams(String),
    #[error("canvas must be at least 1x1")]
    ZeroCanvas,
    #[error("subject vanished under the transform (alpha mass {mass:.3} px)")]
    SubjectVanishes { mass: f64 },
    #[error("affine matrix is singular")]
    Singular,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Flip {
    #[default]
    None,
    Horizontal,
    Vertical,
}

/// Subject manipulation: mirror, then scale, then rotate, all about the
/// subject's box center; optionally followed by a shift expressed as a
/// fraction of the canvas size.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AffineParams {
    pub flip: Flip,
    pub rotation_deg: f64,
    pub scale: f64,
    #[serde(default)]
    pub shift_x: f64,
    #[serde(default)]
    pub shift_y: f64,
}

impl Default for AffineParams {
    fn default() -> Self {
        Self::IDENTITY
    }
}

impl AffineParams {
    pub const IDENTITY: Self = Self {
        flip: Flip::None,
        rotation_deg: 0.0,
        scale: 1.0,
        shift_x: 0.0,
        shift_y: 0.0,
    };

    pub fn new(flip: Flip, rotation_deg: f64, scale: f64) -> Result<Self, GeometryError> {
        let p = Self {
            flip,
            rotation_deg,
            scale,
            ..Self::IDENTITY
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        if !(-180.0..180.0).contains(&self.rotation_deg) {
            return Err(GeometryError::InvalidParams(format!(
                "rotation {} outside [-180, 180)",
                self.rotation_deg
            )));
        }
        if !(self.scale > 0.0 && self.scale <= 4.0) {
            return Err(GeometryError::InvalidParams(format!(
                "scale {} outside (0, 4]",
                self.scale
            )));
        }
        if !(self.shift_x.abs() <= 1.0 && self.shift_y.abs() <= 1.0) {
            return Err(GeometryError::InvalidParams(format!(
                "shift ({}, {}) outside [-1, 1]",
                self.shift_x, self.shift_y
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AffineMatrix {
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub d: f64,
    pub e: f64,
    pub f: f64,
}

/// `(sin, cos)` of an angle in degrees, exact at multiples of 90.
fn sin_cos_deg(deg: f64) -> (f64, f64) {
    let turns = deg / 90.0;
    if turns.fract() == 0.0 {
        match (turns as i64).rem_euclid(4) {
            0 => (0.0, 1.0),
            1 => (1.0, 0.0),
            2 => (0.0, -1.0),
            _ => (-1.0, 0.0),
        }
    } else {
        deg.to_radians().sin_cos()
    }
}

impl AffineMatrix {
    pub const IDENTITY: Self = Self {
        a: 1.0,
        b: 0.0,
        c: 0.0,
        d: 0.0,
        e: 1.0,
        f: 0.0,
    };

    pub fn translate(tx: f64, ty: f64) -> Self {
        Self {
            c: tx,
            f: ty,
            ..Self::IDENTITY
        }
    }

    pub fn rotate(deg: f64) -> Self {
        let (s, c) = sin_cos_deg(deg);
        Self {
            a: c,
            b: -s,
            c: 0.0,
            d: s,
            e: c,
            f: 0.0,
        }
    }

    pub fn scale(s: f64) -> Self {
        Self {
            a: s,
            e: s,
            ..Self::IDENTITY
        }
    }

    pub fn flip(flip: Flip) -> Self {
        match flip {
            Flip::None => Self::IDENTITY,
            Flip::Horizontal => Self {
                a: -1.0,
                ..Self::IDENTITY
            },
            Flip::Vertical => Self {
                e: -1.0,
                ..Self::IDENTITY
            },
        }
    }

    /// `self · rhs`: applies `rhs` first.
    pub fn then_after(&self, rhs: &Self) -> Self {
        Self {
            a: self.a * rhs.a + self.b * rhs.d,
            b: self.a * rhs.b + self.b * rhs.e,
            c: self.a * rhs.c + self.b * rhs.f + self.c,
            d: self.d * rhs.a + self.e * rhs.d,
            e: self.d * rhs.b + self.e * rhs.e,
            f: self.d * rhs.c + self.e * rhs.f + self.f,
        }
    }

    pub fn apply(&self, x: f64, y: f64) -> (f64, f64) {
        (
            self.a * x + self.b * y + self.c,
            self.d * x + self.e * y + self.f,
        )
    }

    pub fn determinant(&self) -> f64 {
        self.a * self.e - self.b * self.d
    }

    pub fn inverse(&self) -> Result<Self, GeometryError> {
        let det = self.determinant();
        if det == 0.0 || !det.is_finite() {
            return Err(GeometryError::Singular);
        }
        Ok(Self {
            a: self.e / det,
            b: -self.b / det,
            c: (self.b * self.f - self.e * self.c) / det,
            d: -self.d / det,
            e: self.a / det,
            f: (self.d * self.c - self.a * self.f) / det,
        })
    }

    pub fn coefficients(&self) -> [f64; 6] {
        [self.a, self.b, self.c, self.d, self.e, self.f]
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.coefficients()
            .iter()
            .zip(other.coefficients())
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max)
    }
}

fn linear_part(params: &AffineParams, scale: f64) -> AffineMatrix {
    AffineMatrix::rotate(params.rotation_deg)
        .then_after(&AffineMatrix::scale(scale))
        .then_after(&AffineMatrix::flip(params.flip))
}

/// `translate(center) · rotate · scale · flip · translate(-center)`; the shift
/// fields are not included.
pub fn to_matrix(params: &AffineParams, center: (f64, f64)) -> AffineMatrix {
    AffineMatrix::translate(center.0, center.1)
        .then_after(&linear_part(params, params.scale))
        .then_after(&AffineMatrix::translate(-center.0, -center.1))
}

/// Output of [`apply_affine`]: the moved subject and the parameters actually used.
#[derive(Debug, Clone, PartialEq)]
pub struct Transformed {
    pub subject: MaskedSubject,
    pub effective: AffineParams,
}

/// Resamples the subject onto a `canvas`-sized RGBA layer.
///
/// The pivot is the center of the subject's tight pixel box; it keeps its
/// relative position on the canvas (plus any shift). If the transformed box
/// would leave the canvas, the scale is reduced to the largest value that fits
/// and reported in [`Transformed::effective`].
pub fn apply_affine(
    subject: &MaskedSubject,
    params: &AffineParams,
    canvas: (u32, u32),
) -> Result<Transformed, GeometryError> {
    params.validate()?;
    let (cw, ch) = canvas;
    if cw == 0 || ch == 0 {
        return Err(GeometryError::ZeroCanvas);
    }
    let (sw, sh) = subject.dimensions();
    let (bx0, by0, bx1, by1) = subject.mask().pixel_bounds();
    let (bx0, by0, bx1, by1) = (
        f64::from(bx0),
        f64::from(by0),
        f64::from(bx1),
        f64::from(by1),
    );
    let pivot_in = ((bx0 + bx1) / 2.0, (by0 + by1) / 2.0);
    let (cw_f, ch_f) = (f64::from(cw), f64::from(ch));
    let pivot_out = (
        (pivot_in.0 * cw_f / f64::from(sw) + params.shift_x * cw_f).clamp(0.0, cw_f),
        (pivot_in.1 * ch_f / f64::from(sh) + params.shift_y * ch_f).clamp(0.0, ch_f),
    );

    // Box extents around the pivot at unit scale.
    let unit = linear_part(params, 1.0);
    let corners = [(bx0, by0), (bx1, by0), (bx0, by1), (bx1, by1)]
        .map(|(x, y)| unit.apply(x - pivot_in.0, y - pivot_in.1));
    let left = corners.iter().map(|p| -p.0).fold(0.0, f64::max);
    let right = corners.iter().map(|p| p.0).fold(0.0, f64::max);
    let top = corners.iter().map(|p| -p.1).fold(0.0, f64::max);
    let bottom = corners.iter().map(|p| p.1).fold(0.0, f64::max);
    let mut fit = f64::INFINITY;
    for (room, extent) in [
        (pivot_out.0, left),
        (cw_f - pivot_out.0, right),
        (pivot_out.1, top),
        (ch_f - pivot_out.1, bottom),
    ] {
        if extent > 0.0 {
            fit = fit.min(room / extent);
        }
    }
    let scale = params.scale.min(fit);
    if scale <= 0.0 {
        return Err(GeometryError::SubjectVanishes { mass: 0.0 });
    }
    let effective = AffineParams { scale, ..*params };

    let forward = AffineMatrix::translate(pivot_out.0, pivot_out.1)
        .then_after(&linear_part(params, scale))
        .then_after(&AffineMatrix::translate(-pivot_in.0, -pivot_in.1));
    let inverse = forward.inverse()?;

    // Only pixels near the transformed box can receive alpha.
    let mapped = [(bx0, by0), (bx1, by0), (bx0, by1), (bx1, by1)].map(|(x, y)| forward.apply(x, y));
    let lo_x = mapped.iter().map(|p| p.0).fold(f64::INFINITY, f64::min);
    let hi_x = mapped.iter().map(|p| p.0).fold(f64::NEG_INFINITY, f64::max);
    let lo_y = mapped.iter().map(|p| p.1).fold(f64::INFINITY, f64::min);
    let hi_y = mapped.iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max);
    let span = |lo: f64, hi: f64, n: u32| {
        let a = (lo.floor() - 1.0).max(0.0) as u32;
        let b = ((hi.ceil() + 1.0).max(0.0) as u32).min(n);
        (a.min(n), b)
    };
    let (ox0, ox1) = span(lo_x, hi_x, cw);
    let (oy0, oy1) = span(lo_y, hi_y, ch);

    let src = subject.cutout();
    let mut out = vec![0u8; cw as usize * ch as usize * 4];
    for y in oy0..oy1 {
        for x in ox0..ox1 {
            let (sx, sy) = inverse.apply(f64::from(x) + 0.5, f64::from(y) + 0.5);
            let px = sample_premultiplied(src, sx - 0.5, sy - 0.5);
            let o = (y as usize * cw as usize + x as usize) * 4;
            out[o..o + 4].copy_from_slice(&px);
        }
    }

    let layer =
        ImageBuffer::new(cw, ch, Channels::Rgba8, out).expect("canvas buffer sized from canvas");
    let mass = layer
        .data()
        .chunks_exact(4)
        .map(|p| f64::from(p[3]))
        .sum::<f64>()
        / 255.0;
    if mass < 1.0 {
        return Err(GeometryError::SubjectVanishes { mass });
    }
    let subject =
        MaskedSubject::from_rgba(layer).map_err(|_| GeometryError::SubjectVanishes { mass })?;
    Ok(Transformed { subject, effective })
}

/// Bilinear sample at continuous pixel-index coordinates, interpolating
/// alpha-premultiplied color. Samples outside the image are transparent.
fn sample_premultiplied(src: &ImageBuffer, x: f64, y: f64) -> [u8; 4] {
    let (w, h) = (i64::from(src.width()), i64::from(src.height()));
    let (x0, y0) = (x.floor(), y.floor());
    let (tx, ty) = (x - x0, y - y0);
    let (x0, y0) = (x0 as i64, y0 as i64);

    let mut acc_a = 0.0;
    let mut acc = [0.0f64; 3];
    for (dx, dy, wgt) in [
        (0, 0, (1.0 - tx) * (1.0 - ty)),
        (1, 0, tx * (1.0 - ty)),
        (0, 1, (1.0 - tx) * ty),
        (1, 1, tx * ty),
    ] {
        if wgt == 0.0 {
            continue;
        }
        let (sx, sy) = (x0 + dx, y0 + dy);
        if sx < 0 || sy < 0 || sx >= w || sy >= h {
            continue;
        }
        let p = src.pixel(sx as u32, sy as u32);
        let wa = wgt * f64::from(p[3]);
        acc_a += wa;
        for (c, v) in acc.iter_mut().zip(&p[..3]) {
            *c += wa * f64::from(*v);
        }
    }
    let alpha = acc_a.round().min(255.0);
    if alpha <= 0.0 {
        return [0, 0, 0, 0];
    }
    let unpremultiply = |c: f64| (c / acc_a).round().clamp(0.0, 255.0) as u8;
    [
        unpremultiply(acc[0]),
        unpremultiply(acc[1]),
        unpremultiply(acc[2]),
        alpha as u8,
    ]
}

/// Ranges the orchestrator draws affine parameters from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AffineRanges {
    pub rotation_deg: (f64, f64),
    pub scale: (f64, f64),
    pub allow_hflip: bool,
    pub allow_vflip: bool,
    /// Maximum |shift| as a fraction of the canvas; 0 keeps the subject in place.
    pub max_shift: f64,
}

impl Default for AffineRanges {
    fn default() -> Self {
        Self {
            rotation_deg: (-25.0, 25.0),
            scale: (0.7, 1.3),
            allow_hflip: true,
            allow_vflip: false,
            max_shift: 0.0,
        }
    }
}

impl AffineRanges {
    pub fn validate(&self) -> Result<(), GeometryError> {
        let (r0, r1) = self.rotation_deg;
        let (s0, s1) = self.scale;
        if !(r0 <= r1 && r0 >= -180.0 && r1 < 180.0) {
            return Err(GeometryError::InvalidParams(format!(
                "rotation range ({r0}, {r1})"
            )));
        }
        if !(s0 <= s1 && s0 > 0.0 && s1 <= 4.0) {
            return Err(GeometryError::InvalidParams(format!(
                "scale range ({s0}, {s1})"
            )));
        }
        if !(0.0..=1.0).contains(&self.max_shift) {
            return Err(GeometryError::InvalidParams(format!(
                "max shift {}",
                self.max_shift
            )));
        }
        Ok(())
    }

    /// Draws flip, rotation, scale and shift in that order.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> AffineParams {
        let mut flips = vec![Flip::None];
        if self.allow_hflip {
            flips.push(Flip::Horizontal);
        }
        if self.allow_vflip {
            flips.push(Flip::Vertical);
        }
        let flip = flips[rng.random_range(0..flips.len())];
        let rotation_deg = rng.random_range(self.rotation_deg.0..=self.rotation_deg.1);
        let scale = rng.random_range(self.scale.0..=self.scale.1);
        let (shift_x, shift_y) = if self.max_shift > 0.0 {
            (
                rng.random_range(-self.max_shift..=self.max_shift),
                rng.random_range(-self.max_shift..=self.max_shift),
            )
        } else {
            (0.0, 0.0)
        };
        AffineParams {
            flip,
            rotation_deg,
            scale,
            shift_x,
            shift_y,
        }
    }
}
