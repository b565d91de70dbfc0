//! Procedural scenes: one flat-colored shape, optionally carrying a line of
//! bitmap text, drawn under an affine "pose" about the image center.
//!
//! Rendering is inverse-mapped point sampling at pixel centers with no
//! anti-aliasing, so edges are hard and renders are bit-reproducible.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::glyphs::{GlyphAlphabet, GLYPH_ADVANCE, GLYPH_HEIGHT, GLYPH_WIDTH};
use crate::error::{Error, Result};
use crate::image::{ImageGrid, LUMA_WEIGHTS};

pub const MAX_TEXT_LEN: usize = 8;
pub const MAX_SHEAR: f64 = 0.5;
pub const MAX_ROTATION_DEG: f64 = 45.0;
pub const MIN_GLYPH_CONTRAST: f64 = 0.3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeKind {
    Rectangle,
    Ellipse,
    Triangle,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 3] = [ShapeKind::Rectangle, ShapeKind::Ellipse, ShapeKind::Triangle];

    pub fn name(self) -> &'static str {
        match self {
            ShapeKind::Rectangle => "rectangle",
            ShapeKind::Ellipse => "ellipse",
            ShapeKind::Triangle => "triangle",
        }
    }
}

/// 8-bit color; stored as bytes so PNG round trips are exact.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rgb(pub [u8; 3]);

impl Rgb {
    pub fn to_f64(self) -> [f64; 3] {
        self.0.map(|b| f64::from(b) / 255.0)
    }

    pub fn luma(self) -> f64 {
        let c = self.to_f64();
        LUMA_WEIGHTS[0] * c[0] + LUMA_WEIGHTS[1] * c[1] + LUMA_WEIGHTS[2] * c[2]
    }
}

/// Horizontal shear/foreshortening plus in-plane rotation (degrees).
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub shear: f64,
    pub rotation_deg: f64,
}

impl Pose {
    pub const IDENTITY: Pose = Pose {
        shear: 0.0,
        rotation_deg: 0.0,
    };

    pub fn new(shear: f64, rotation_deg: f64) -> Self {
        Pose { shear, rotation_deg }
    }

    pub fn compose(self, delta: Pose) -> Pose {
        Pose {
            shear: self.shear + delta.shear,
            rotation_deg: self.rotation_deg + delta.rotation_deg,
        }
    }

    pub fn within_limits(&self) -> bool {
        self.shear.abs() <= MAX_SHEAR + 1e-12 && self.rotation_deg.abs() <= MAX_ROTATION_DEG + 1e-12
    }

    /// Canonical → image linear map `R(θ)·F(s)` with
    /// `F(s) = [[1 - |s|/2, s/2], [0, 1]]`.
    pub fn matrix(&self) -> [[f64; 2]; 2] {
        let (sin, cos) = sin_cos_deg(self.rotation_deg);
        let f00 = 1.0 - 0.5 * self.shear.abs();
        let f01 = 0.5 * self.shear;
        [[cos * f00, cos * f01 - sin], [sin * f00, sin * f01 + cos]]
    }

    pub fn inverse_matrix(&self) -> [[f64; 2]; 2] {
        let m = self.matrix();
        let det = m[0][0] * m[1][1] - m[0][1] * m[1][0];
        [[m[1][1] / det, -m[0][1] / det], [-m[1][0] / det, m[0][0] / det]]
    }
}

/// `(sin, cos)` of an angle in degrees, exact at multiples of 90°.
pub fn sin_cos_deg(deg: f64) -> (f64, f64) {
    let quarter = (deg / 90.0).floor();
    let rem = deg - 90.0 * quarter;
    let (s, c) = if rem == 0.0 {
        (0.0, 1.0)
    } else {
        rem.to_radians().sin_cos()
    };
    match (quarter as i64).rem_euclid(4) {
        0 => (s, c),
        1 => (c, -s),
        2 => (-s, -c),
        _ => (-c, s),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub shape: ShapeKind,
    /// Half width / half height as fractions of the image side.
    pub half_extent: [f64; 2],
    pub fill: Rgb,
    pub background: Rgb,
    pub glyph_color: Rgb,
    pub text: String,
    /// Text center in shape-local coordinates, each axis in `[-1, 1]` of the
    /// half extent.
    pub text_anchor: [f64; 2],
    /// Pixels per glyph cell.
    pub glyph_scale: usize,
    pub pose: Pose,
}

/// Pixel-space geometry of a spec at a given image size.
struct Layout {
    center: f64,
    hw: f64,
    hh: f64,
    /// Top-left of the text box in canonical coordinates.
    text_origin: (f64, f64),
}

impl SceneSpec {
    pub fn validate(&self, alphabet: &GlyphAlphabet) -> Result<()> {
        if self.text.chars().count() > MAX_TEXT_LEN {
            return Err(Error::Layout(format!(
                "text {:?} longer than {MAX_TEXT_LEN} glyphs",
                self.text
            )));
        }
        if let Some(ch) = self.text.chars().find(|&c| !alphabet.contains(c)) {
            return Err(Error::Layout(format!("glyph {ch:?} not in alphabet")));
        }
        if (self.glyph_color.luma() - self.fill.luma()).abs() < MIN_GLYPH_CONTRAST {
            return Err(Error::Layout(format!(
                "glyph/fill luminance contrast {:.3} below {MIN_GLYPH_CONTRAST}",
                (self.glyph_color.luma() - self.fill.luma()).abs()
            )));
        }
        if self.glyph_scale == 0 {
            return Err(Error::Layout("glyph scale must be at least 1".into()));
        }
        if !(self.half_extent[0] > 0.0 && self.half_extent[1] > 0.0) {
            return Err(Error::Layout("shape extent must be positive".into()));
        }
        Ok(())
    }

    fn layout(&self, size: usize) -> Layout {
        let s = size as f64;
        let hw = self.half_extent[0] * s;
        let hh = self.half_extent[1] * s;
        let (tw, th) = self.text_box_size();
        let x0 = (self.text_anchor[0] * hw - tw / 2.0).round();
        let y0 = (self.text_anchor[1] * hh - th / 2.0).round();
        Layout {
            center: s / 2.0,
            hw,
            hh,
            text_origin: (x0, y0),
        }
    }

    fn text_box_size(&self) -> (f64, f64) {
        let n = self.text.chars().count();
        if n == 0 {
            return (0.0, 0.0);
        }
        let s = self.glyph_scale as f64;
        (((n * GLYPH_ADVANCE) - 1) as f64 * s, GLYPH_HEIGHT as f64 * s)
    }

    fn inside_shape(&self, l: &Layout, u: f64, v: f64) -> bool {
        match self.shape {
            ShapeKind::Rectangle => u.abs() <= l.hw && v.abs() <= l.hh,
            ShapeKind::Ellipse => (u / l.hw).powi(2) + (v / l.hh).powi(2) <= 1.0,
            ShapeKind::Triangle => v >= -l.hh && v <= l.hh && u.abs() <= l.hw * (v + l.hh) / (2.0 * l.hh),
        }
    }

    fn glyph_ink(&self, l: &Layout, alphabet: &GlyphAlphabet, glyphs: &[char], u: f64, v: f64) -> bool {
        if glyphs.is_empty() {
            return false;
        }
        let s = self.glyph_scale as f64;
        let cu = ((u - l.text_origin.0) / s).floor();
        let cv = ((v - l.text_origin.1) / s).floor();
        if cu < 0.0 || cv < 0.0 || cv >= GLYPH_HEIGHT as f64 {
            return false;
        }
        let (cu, cv) = (cu as usize, cv as usize);
        let (k, gx) = (cu / GLYPH_ADVANCE, cu % GLYPH_ADVANCE);
        if k >= glyphs.len() || gx >= GLYPH_WIDTH {
            return false;
        }
        alphabet.get(glyphs[k]).is_some_and(|bm| bm[cv][gx])
    }

    /// Checks that the text box sits inside the shape (1 px margin) and that
    /// its posed corners stay inside the image.
    fn check_layout(&self, l: &Layout, pose: &Pose, size: usize) -> Result<()> {
        if self.text.is_empty() {
            return Ok(());
        }
        let (tw, th) = self.text_box_size();
        let (x0, y0) = l.text_origin;
        let corners = [
            (x0 - 1.0, y0 - 1.0),
            (x0 + tw + 1.0, y0 - 1.0),
            (x0 - 1.0, y0 + th + 1.0),
            (x0 + tw + 1.0, y0 + th + 1.0),
        ];
        if let Some(c) = corners.iter().find(|(u, v)| !self.inside_shape(l, *u, *v)) {
            return Err(Error::Layout(format!(
                "text {:?} corner ({:.1}, {:.1}) falls outside the {}",
                self.text,
                c.0,
                c.1,
                self.shape.name()
            )));
        }
        let m = pose.matrix();
        for (u, v) in corners {
            let x = l.center + m[0][0] * u + m[0][1] * v;
            let y = l.center + m[1][0] * u + m[1][1] * v;
            if x < 0.0 || y < 0.0 || x > size as f64 || y > size as f64 {
                return Err(Error::Layout(format!(
                    "text {:?} leaves the image under pose {pose:?}",
                    self.text
                )));
            }
        }
        Ok(())
    }
}

/// Renders `spec` at `spec.pose`. The pose must be within renderer limits.
pub fn render_scene(spec: &SceneSpec, size: usize, alphabet: &GlyphAlphabet) -> Result<ImageGrid> {
    if !spec.pose.within_limits() {
        return Err(Error::Pose(format!("{:?}", spec.pose)));
    }
    render_posed(spec, spec.pose, size, alphabet)
}

/// Novel view: the same spec re-rendered under `spec.pose ∘ delta`.
pub fn synthesize_view(spec: &SceneSpec, delta: Pose, size: usize, alphabet: &GlyphAlphabet) -> Result<ImageGrid> {
    let pose = spec.pose.compose(delta);
    if !pose.within_limits() {
        return Err(Error::Pose(format!(
            "composed pose {pose:?} exceeds |shear| <= {MAX_SHEAR}, |rotation| <= {MAX_ROTATION_DEG}"
        )));
    }
    render_posed(spec, pose, size, alphabet)
}

/// Renders under an arbitrary pose (no limit check).
pub fn render_posed(spec: &SceneSpec, pose: Pose, size: usize, alphabet: &GlyphAlphabet) -> Result<ImageGrid> {
    spec.validate(alphabet)?;
    let l = spec.layout(size);
    spec.check_layout(&l, &pose, size)?;
    let inv = pose.inverse_matrix();
    let glyphs: Vec<char> = spec.text.chars().collect();
    let (bg, fill, ink) = (spec.background.to_f64(), spec.fill.to_f64(), spec.glyph_color.to_f64());
    let mut img = ImageGrid::zeros(size, size, 3);
    for y in 0..size {
        for x in 0..size {
            let px = x as f64 + 0.5 - l.center;
            let py = y as f64 + 0.5 - l.center;
            let u = inv[0][0] * px + inv[0][1] * py;
            let v = inv[1][0] * px + inv[1][1] * py;
            let color = if spec.inside_shape(&l, u, v) {
                if spec.glyph_ink(&l, alphabet, &glyphs, u, v) {
                    ink
                } else {
                    fill
                }
            } else {
                bg
            };
            for (c, value) in color.iter().enumerate() {
                img.set(y, x, c, *value);
            }
        }
    }
    Ok(img)
}

/// Pixels covered by the shape (glyphs included) under `pose`.
pub fn shape_mask(spec: &SceneSpec, pose: Pose, size: usize) -> Array2<bool> {
    let l = spec.layout(size);
    let inv = pose.inverse_matrix();
    Array2::from_shape_fn((size, size), |(y, x)| {
        let px = x as f64 + 0.5 - l.center;
        let py = y as f64 + 0.5 - l.center;
        let u = inv[0][0] * px + inv[0][1] * py;
        let v = inv[1][0] * px + inv[1][1] * py;
        spec.inside_shape(&l, u, v)
    })
}
