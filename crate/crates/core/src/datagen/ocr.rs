//! Template-matching OCR for the procedural renders.
//!
//! The reader knows the pose family (shear + rotation about the image center)
//! but not the pose itself: it searches a pose grid, un-warps the ink pixels,
//! infers glyph scale and count from the ink bounding box, and scores each
//! glyph cell against the alphabet by normalized correlation. Decodes are
//! ranked by mean glyph correlation; the reported confidence is the worst
//! per-glyph correlation of the winner.

use std::collections::VecDeque;

use ndarray::Array2;

use super::glyphs::{GlyphAlphabet, GLYPH_ADVANCE, GLYPH_HEIGHT, GLYPH_WIDTH};
use super::scene::{Pose, MAX_ROTATION_DEG, MAX_SHEAR, MIN_GLYPH_CONTRAST};
use crate::image::ImageGrid;

const CELLS: usize = GLYPH_WIDTH * GLYPH_HEIGHT;
const MIN_INK_PIXELS: usize = 4;
const MIN_COMPONENT: usize = 3;

#[derive(Clone, Debug, PartialEq)]
pub struct OcrReading {
    pub text: String,
    pub confidence: f64,
}

impl OcrReading {
    pub fn empty() -> Self {
        OcrReading {
            text: String::new(),
            confidence: 0.0,
        }
    }
}

struct Templates {
    chars: Vec<char>,
    /// Mean-centered, unit-norm template vectors.
    vectors: Vec<[f64; CELLS]>,
}

impl Templates {
    fn new(alphabet: &GlyphAlphabet) -> Self {
        let mut chars = Vec::new();
        let mut vectors = Vec::new();
        for (ch, bm) in alphabet.iter() {
            let mut v = [0.0; CELLS];
            for (i, cell) in bm.iter().flatten().enumerate() {
                v[i] = if *cell { 1.0 } else { 0.0 };
            }
            if normalize(&mut v) {
                chars.push(ch);
                vectors.push(v);
            }
        }
        Templates { chars, vectors }
    }

    fn best(&self, cells: &[f64; CELLS]) -> (char, f64) {
        let mut v = *cells;
        if !normalize(&mut v) {
            return (' ', 0.0);
        }
        let mut best = (' ', f64::NEG_INFINITY);
        for (ch, t) in self.chars.iter().zip(&self.vectors) {
            let score: f64 = v.iter().zip(t.iter()).map(|(a, b)| a * b).sum();
            if score > best.1 {
                best = (*ch, score);
            }
        }
        best
    }
}

fn normalize(v: &mut [f64; CELLS]) -> bool {
    let mean = v.iter().sum::<f64>() / CELLS as f64;
    v.iter_mut().for_each(|x| *x -= mean);
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm < 1e-12 {
        return false;
    }
    v.iter_mut().for_each(|x| *x /= norm);
    true
}

fn median(mut values: Vec<f64>) -> f64 {
    values.sort_by(f64::total_cmp);
    values[values.len() / 2]
}

/// Shape region estimated from the border color: everything not reachable
/// from the border through background-colored pixels.
fn estimate_mask(image: &ImageGrid) -> Array2<bool> {
    let (h, w, c) = image.dim();
    let border: Vec<(usize, usize)> = (0..w)
        .flat_map(|x| [(0, x), (h - 1, x)])
        .chain((0..h).flat_map(|y| [(y, 0), (y, w - 1)]))
        .collect();
    let bg: Vec<f64> = (0..c)
        .map(|ch| median(border.iter().map(|&(y, x)| image.get(y, x, ch)).collect()))
        .collect();
    let is_bg = |y: usize, x: usize| (0..c).all(|ch| (image.get(y, x, ch) - bg[ch]).abs() <= 0.1);
    let mut outside = Array2::from_elem((h, w), false);
    let mut queue = VecDeque::new();
    for &(y, x) in &border {
        if !outside[[y, x]] && is_bg(y, x) {
            outside[[y, x]] = true;
            queue.push_back((y, x));
        }
    }
    while let Some((y, x)) = queue.pop_front() {
        for (dy, dx) in [(-1isize, 0isize), (1, 0), (0, -1), (0, 1)] {
            let (ny, nx) = (y as isize + dy, x as isize + dx);
            if ny < 0 || nx < 0 || ny >= h as isize || nx >= w as isize {
                continue;
            }
            let (ny, nx) = (ny as usize, nx as usize);
            if !outside[[ny, nx]] && is_bg(ny, nx) {
                outside[[ny, nx]] = true;
                queue.push_back((ny, nx));
            }
        }
    }
    outside.mapv(|o| !o)
}

fn erode(mask: &Array2<bool>) -> Array2<bool> {
    let (h, w) = mask.dim();
    Array2::from_shape_fn((h, w), |(y, x)| {
        (-1isize..=1).all(|dy| {
            (-1isize..=1).all(|dx| {
                let (ny, nx) = (y as isize + dy, x as isize + dx);
                ny >= 0 && nx >= 0 && ny < h as isize && nx < w as isize && mask[[ny as usize, nx as usize]]
            })
        })
    })
}

fn drop_small_components(ink: &mut Array2<bool>) {
    let (h, w) = ink.dim();
    let mut seen = Array2::from_elem((h, w), false);
    for y in 0..h {
        for x in 0..w {
            if !ink[[y, x]] || seen[[y, x]] {
                continue;
            }
            let mut comp = vec![(y, x)];
            seen[[y, x]] = true;
            let mut i = 0;
            while i < comp.len() {
                let (cy, cx) = comp[i];
                i += 1;
                for dy in -1isize..=1 {
                    for dx in -1isize..=1 {
                        let (ny, nx) = (cy as isize + dy, cx as isize + dx);
                        if ny < 0 || nx < 0 || ny >= h as isize || nx >= w as isize {
                            continue;
                        }
                        let (ny, nx) = (ny as usize, nx as usize);
                        if ink[[ny, nx]] && !seen[[ny, nx]] {
                            seen[[ny, nx]] = true;
                            comp.push((ny, nx));
                        }
                    }
                }
            }
            if comp.len() < MIN_COMPONENT {
                for (cy, cx) in comp {
                    ink[[cy, cx]] = false;
                }
            }
        }
    }
}

/// Binary glyph-ink mask: pixels inside the (eroded) shape whose luma differs
/// from the median fill luma by at least half the minimum glyph contrast.
pub fn ink_mask(image: &ImageGrid, shape_mask: Option<&Array2<bool>>) -> Array2<bool> {
    let mask = match shape_mask {
        Some(m) => m.clone(),
        None => estimate_mask(image),
    };
    let inner = erode(&mask);
    let luma = image.luma();
    let inside: Vec<f64> = luma
        .indexed_iter()
        .filter(|(idx, _)| inner[*idx])
        .map(|(_, &v)| v)
        .collect();
    if inside.is_empty() {
        return Array2::from_elem(luma.dim(), false);
    }
    let fill = median(inside);
    let mut ink = Array2::from_shape_fn(luma.dim(), |idx| {
        inner[idx] && (luma[idx] - fill).abs() >= 0.5 * MIN_GLYPH_CONTRAST
    });
    drop_small_components(&mut ink);
    ink
}

struct Decoder<'a> {
    ink: &'a Array2<bool>,
    points: Vec<(f64, f64)>,
    center: (f64, f64),
    templates: &'a Templates,
}

impl Decoder<'_> {
    fn ink_at(&self, x: f64, y: f64) -> f64 {
        let (h, w) = self.ink.dim();
        if x < 0.0 || y < 0.0 || x >= w as f64 || y >= h as f64 {
            return 0.0;
        }
        if self.ink[[y as usize, x as usize]] {
            1.0
        } else {
            0.0
        }
    }

    /// Best decode under one pose hypothesis, with its mean glyph score.
    fn decode(&self, pose: Pose) -> Option<(OcrReading, f64)> {
        let inv = pose.inverse_matrix();
        let m = pose.matrix();
        let (mut umin, mut umax, mut vmin, mut vmax) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
        for &(px, py) in &self.points {
            let u = inv[0][0] * px + inv[0][1] * py;
            let v = inv[1][0] * px + inv[1][1] * py;
            umin = umin.min(u);
            umax = umax.max(u);
            vmin = vmin.min(v);
            vmax = vmax.max(v);
        }
        let scale = ((vmax - vmin + 1.0) / GLYPH_HEIGHT as f64).round();
        if scale < 1.0 {
            return None;
        }
        let width_cells = (umax - umin + 1.0) / scale;
        let mut best: Option<(OcrReading, f64)> = None;
        for left in 0..=1usize {
            for right in 0..=1usize {
                let n = ((width_cells + (left + right + 1) as f64) / GLYPH_ADVANCE as f64).round();
                if !(1.0..=8.0).contains(&n) {
                    continue;
                }
                let origin = (umin - 0.5 - left as f64 * scale, vmin - 0.5);
                let reading = self.read_line(origin, scale, n as usize, &m);
                if best.as_ref().is_none_or(|b| reading.1 > b.1) {
                    best = Some(reading);
                }
            }
        }
        best
    }

    fn read_line(&self, origin: (f64, f64), scale: f64, n: usize, m: &[[f64; 2]; 2]) -> (OcrReading, f64) {
        let sub = 2 * scale.max(1.0) as usize;
        let mut text = String::with_capacity(n);
        let mut confidence = f64::INFINITY;
        let mut total = 0.0;
        for k in 0..n {
            let mut cells = [0.0; CELLS];
            for gy in 0..GLYPH_HEIGHT {
                for gx in 0..GLYPH_WIDTH {
                    let mut acc = 0.0;
                    for sy in 0..sub {
                        for sx in 0..sub {
                            let u = origin.0
                                + ((k * GLYPH_ADVANCE + gx) as f64) * scale
                                + (sx as f64 + 0.5) * scale / sub as f64;
                            let v = origin.1 + (gy as f64) * scale + (sy as f64 + 0.5) * scale / sub as f64;
                            let x = self.center.0 + m[0][0] * u + m[0][1] * v;
                            let y = self.center.1 + m[1][0] * u + m[1][1] * v;
                            acc += self.ink_at(x, y);
                        }
                    }
                    cells[gy * GLYPH_WIDTH + gx] = acc / (sub * sub) as f64;
                }
            }
            let (ch, score) = self.templates.best(&cells);
            text.push(ch);
            confidence = confidence.min(score);
            total += score;
        }
        let reading = OcrReading {
            text,
            confidence: confidence.max(0.0),
        };
        (reading, total / n as f64)
    }
}

fn pose_grid(shears: impl Iterator<Item = f64> + Clone, rotations: impl Iterator<Item = f64>) -> Vec<Pose> {
    let mut poses: Vec<Pose> = rotations
        .flat_map(|r| shears.clone().map(move |s| Pose::new(s, r)))
        .filter(|p| p.within_limits())
        .collect();
    // prefer near-identity poses on ties
    poses.sort_by(|a, b| {
        (a.rotation_deg.abs() + 90.0 * a.shear.abs()).total_cmp(&(b.rotation_deg.abs() + 90.0 * b.shear.abs()))
    });
    poses
}

fn steps(limit: f64, step: f64) -> impl Iterator<Item = f64> + Clone {
    let n = (limit / step).round() as i64;
    (-n..=n).map(move |i| i as f64 * step)
}

/// Reads the text in `image`. `shape_mask`, when given, restricts the search
/// to the shape; otherwise it is estimated from the border color.
pub fn ocr(image: &ImageGrid, alphabet: &GlyphAlphabet, shape_mask: Option<&Array2<bool>>) -> OcrReading {
    let ink = ink_mask(image, shape_mask);
    let (h, w) = ink.dim();
    let center = (w as f64 / 2.0, h as f64 / 2.0);
    let points: Vec<(f64, f64)> = ink
        .indexed_iter()
        .filter(|(_, &b)| b)
        .map(|((y, x), _)| (x as f64 + 0.5 - center.0, y as f64 + 0.5 - center.1))
        .collect();
    if points.len() < MIN_INK_PIXELS {
        return OcrReading::empty();
    }
    let templates = Templates::new(alphabet);
    let decoder = Decoder {
        ink: &ink,
        points,
        center,
        templates: &templates,
    };

    // coarse pass over the whole pose family, then refine around the leaders
    let coarse = pose_grid(steps(MAX_SHEAR, 0.1), steps(MAX_ROTATION_DEG, 3.0));
    let mut scored: Vec<(Pose, (OcrReading, f64))> = coarse
        .into_iter()
        .filter_map(|p| decoder.decode(p).map(|r| (p, r)))
        .collect();
    scored.sort_by(|a, b| b.1 .1.total_cmp(&a.1 .1));
    let mut best = match scored.first() {
        Some((_, r)) => r.clone(),
        None => return OcrReading::empty(),
    };
    for (pose, _) in scored.iter().take(4) {
        let fine = pose_grid(
            steps(0.1, 0.05).map(|s| pose.shear + s),
            steps(3.0, 1.0).map(|r| pose.rotation_deg + r),
        );
        for p in fine {
            if let Some(r) = decoder.decode(p) {
                if r.1 > best.1 {
                    best = r;
                }
            }
        }
    }
    if best.0.confidence <= 0.0 {
        return OcrReading::empty();
    }
    best.0
}
