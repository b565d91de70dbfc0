//! Canny edge extraction and the `{0.2, 0.8}` three-channel structure maps.
//!
//! The detector runs luma → Gaussian blur → Sobel → non-maximum suppression →
//! hysteresis. Hysteresis thresholds are fractions of the maximum gradient
//! magnitude, so the output does not depend on the overall brightness scale.
//!
//! All magnitude comparisons (NMS and thresholds) use [`ge_tol`], which treats
//! values within a relative `1e-9` as equal. Hard-edged renders produce many
//! mathematically tied magnitudes that differ only by rounding; without the
//! tolerance those ties would break arbitrarily and the edge set would change
//! under input scaling.

use std::collections::VecDeque;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::ImageGrid;

pub const NON_EDGE: f64 = 0.2;
pub const EDGE: f64 = 0.8;
pub const BINARIZE_THRESHOLD: f64 = 0.5;
const TIE_TOLERANCE: f64 = 1e-9;

/// `a >= b` up to a relative tolerance.
#[inline]
pub fn ge_tol(a: f64, b: f64) -> bool {
    a >= b - TIE_TOLERANCE * a.abs().max(b.abs())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CannyParams {
    pub sigma: f64,
    pub low: f64,
    pub high: f64,
}

impl Default for CannyParams {
    fn default() -> Self {
        CannyParams {
            sigma: 1.0,
            low: 0.1,
            high: 0.2,
        }
    }
}

impl CannyParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(Error::config("canny.sigma", "must be positive"));
        }
        if !(self.low > 0.0 && self.low < self.high && self.high <= 1.0) {
            return Err(Error::config(
                "canny.low/canny.high",
                format!("need 0 < low < high <= 1, got {} / {}", self.low, self.high),
            ));
        }
        Ok(())
    }
}

/// Where a structure map came from. Carried through conditioning so the
/// teacher-forcing contract can be checked at the point of use.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CannyKind {
    GroundTruth,
    Predicted,
    Binarized,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CannyMap {
    values: ImageGrid,
    kind: CannyKind,
}

impl CannyMap {
    /// Wraps raw sampler output.
    pub fn predicted(values: ImageGrid) -> Result<Self> {
        if values.channels() != 3 {
            return Err(Error::shape("structure maps have 3 channels"));
        }
        if !values.is_finite() {
            return Err(Error::Domain("predicted structure map has non-finite values".into()));
        }
        Ok(CannyMap {
            values,
            kind: CannyKind::Predicted,
        })
    }

    /// Wraps a two-level map, checking that only `{0.2, 0.8}` occur and that
    /// the channels agree.
    pub fn two_level(values: ImageGrid, kind: CannyKind) -> Result<Self> {
        if kind == CannyKind::Predicted {
            return CannyMap::predicted(values);
        }
        if values.channels() != 3 {
            return Err(Error::shape("structure maps have 3 channels"));
        }
        let (h, w, _) = values.dim();
        for y in 0..h {
            for x in 0..w {
                let v = values.get(y, x, 0);
                if v != NON_EDGE && v != EDGE {
                    return Err(Error::Validation(format!(
                        "value {v} at ({y}, {x}) is not a structure level"
                    )));
                }
                if values.get(y, x, 1) != v || values.get(y, x, 2) != v {
                    return Err(Error::Validation(format!("channels differ at ({y}, {x})")));
                }
            }
        }
        Ok(CannyMap { values, kind })
    }

    pub fn kind(&self) -> CannyKind {
        self.kind
    }

    pub fn values(&self) -> &ImageGrid {
        &self.values
    }

    pub fn into_values(self) -> ImageGrid {
        self.values
    }

    pub fn height(&self) -> usize {
        self.values.height()
    }

    pub fn width(&self) -> usize {
        self.values.width()
    }

    /// Edge mask of a two-level map (channel 0 at the edge level).
    pub fn edges(&self) -> Array2<bool> {
        let (h, w, _) = self.values.dim();
        Array2::from_shape_fn((h, w), |(y, x)| self.values.get(y, x, 0) == EDGE)
    }

    /// Saves as an 8-bit RGB PNG (0.2 → 51, 0.8 → 204).
    pub fn save_png(&self, path: &Path) -> Result<()> {
        self.values.save_png(path)
    }

    /// Loads a two-level map written by [`CannyMap::save_png`].
    pub fn load_png(path: &Path, kind: CannyKind) -> Result<Self> {
        let raw = ImageGrid::load_png(path)?;
        let (h, w, _) = raw.dim();
        let mut values = ImageGrid::zeros(h, w, 3);
        for y in 0..h {
            for x in 0..w {
                for c in 0..3 {
                    let b = crate::image::quantize(raw.get(y, x, c));
                    let v = match b {
                        51 => NON_EDGE,
                        204 => EDGE,
                        other => {
                            return Err(Error::Validation(format!(
                                "{}: byte {other} at ({y}, {x}) is not a structure level",
                                path.display()
                            )))
                        }
                    };
                    values.set(y, x, c, v);
                }
            }
        }
        CannyMap::two_level(values, kind)
    }
}

/// JSON sidecar stored next to a structure-map PNG.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CannySidecar {
    pub params: CannyParams,
    pub kind: CannyKind,
    pub levels: [f64; 2],
    pub png_bytes: [u8; 2],
}

impl CannySidecar {
    pub fn new(params: CannyParams, kind: CannyKind) -> Self {
        CannySidecar {
            params,
            kind,
            levels: [NON_EDGE, EDGE],
            png_bytes: [51, 204],
        }
    }
}

fn reflect(i: isize, n: usize) -> usize {
    // half-sample symmetric: ... c b a | a b c ... | z y x ...
    let n = n as isize;
    let mut i = i;
    loop {
        if i < 0 {
            i = -i - 1;
        } else if i >= n {
            i = 2 * n - i - 1;
        } else {
            return i as usize;
        }
    }
}

/// Normalized Gaussian kernel truncated at `±ceil(3σ)`.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as isize;
    let mut k: Vec<f64> = (-radius..=radius)
        .map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= sum);
    k
}

/// Separable Gaussian blur with reflective borders.
pub fn gaussian_blur(gray: &Array2<f64>, sigma: f64) -> Result<Array2<f64>> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::Domain(format!("blur sigma must be positive, got {sigma}")));
    }
    let kernel = gaussian_kernel(sigma);
    let radius = (kernel.len() / 2) as isize;
    let (h, w) = gray.dim();
    let mut rows = Array2::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (k, weight) in kernel.iter().enumerate() {
                let xi = reflect(x as isize + k as isize - radius, w);
                acc += weight * gray[[y, xi]];
            }
            rows[[y, x]] = acc;
        }
    }
    let mut out = Array2::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (k, weight) in kernel.iter().enumerate() {
                let yi = reflect(y as isize + k as isize - radius, h);
                acc += weight * rows[[yi, x]];
            }
            out[[y, x]] = acc;
        }
    }
    Ok(out)
}

/// 3×3 Sobel gradients (unnormalized). Returns `(magnitude, angle)` with
/// `angle = atan2(gy, gx)`, `y` pointing down the rows.
pub fn sobel_gradients(gray: &Array2<f64>) -> Result<(Array2<f64>, Array2<f64>)> {
    let (h, w) = gray.dim();
    if h < 3 || w < 3 {
        return Err(Error::shape(format!("sobel needs at least 3x3, got {h}x{w}")));
    }
    let at = |y: isize, x: isize| gray[[reflect(y, h), reflect(x, w)]];
    let mut mag = Array2::zeros((h, w));
    let mut ang = Array2::zeros((h, w));
    for y in 0..h as isize {
        for x in 0..w as isize {
            let gx = (at(y - 1, x + 1) + 2.0 * at(y, x + 1) + at(y + 1, x + 1))
                - (at(y - 1, x - 1) + 2.0 * at(y, x - 1) + at(y + 1, x - 1));
            let gy = (at(y + 1, x - 1) + 2.0 * at(y + 1, x) + at(y + 1, x + 1))
                - (at(y - 1, x - 1) + 2.0 * at(y - 1, x) + at(y - 1, x + 1));
            mag[[y as usize, x as usize]] = gx.hypot(gy);
            ang[[y as usize, x as usize]] = gy.atan2(gx);
        }
    }
    Ok((mag, ang))
}

/// Neighbor offsets `(dy, dx)` along the quantized gradient axis.
fn gradient_axis(angle: f64) -> (isize, isize) {
    let mut deg = angle.to_degrees();
    if deg < 0.0 {
        deg += 180.0;
    }
    if !(22.5..157.5).contains(&deg) {
        (0, 1)
    } else if deg < 67.5 {
        (1, 1)
    } else if deg < 112.5 {
        (1, 0)
    } else {
        (1, -1)
    }
}

/// Keeps a pixel iff it is `>=` both neighbors along its quantized gradient
/// axis (ties survive). Out-of-image neighbors count as zero.
pub fn nonmax_suppress(magnitude: &Array2<f64>, angle: &Array2<f64>) -> Result<Array2<f64>> {
    if magnitude.dim() != angle.dim() {
        return Err(Error::shape("magnitude and angle grids differ in shape"));
    }
    let (h, w) = magnitude.dim();
    let at = |y: isize, x: isize| {
        if y < 0 || x < 0 || y >= h as isize || x >= w as isize {
            0.0
        } else {
            magnitude[[y as usize, x as usize]]
        }
    };
    let mut out = Array2::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let m = magnitude[[y, x]];
            if m <= 0.0 {
                continue;
            }
            let (dy, dx) = gradient_axis(angle[[y, x]]);
            let (yi, xi) = (y as isize, x as isize);
            if ge_tol(m, at(yi + dy, xi + dx)) && ge_tol(m, at(yi - dy, xi - dx)) {
                out[[y, x]] = m;
            }
        }
    }
    Ok(out)
}

/// Double-threshold edge linking: strong pixels seed an 8-connected flood
/// fill through weak-or-strong pixels.
pub fn hysteresis(thinned: &Array2<f64>, low_abs: f64, high_abs: f64) -> Result<Array2<bool>> {
    if !(low_abs > 0.0 && low_abs <= high_abs) {
        return Err(Error::Domain(format!(
            "hysteresis needs 0 < low <= high, got {low_abs} / {high_abs}"
        )));
    }
    let (h, w) = thinned.dim();
    let mut edges = Array2::from_elem((h, w), false);
    let mut queue = VecDeque::new();
    for ((y, x), &m) in thinned.indexed_iter() {
        if m > 0.0 && ge_tol(m, high_abs) {
            edges[[y, x]] = true;
            queue.push_back((y, x));
        }
    }
    while let Some((y, x)) = queue.pop_front() {
        for dy in -1isize..=1 {
            for dx in -1isize..=1 {
                let (ny, nx) = (y as isize + dy, x as isize + dx);
                if ny < 0 || nx < 0 || ny >= h as isize || nx >= w as isize {
                    continue;
                }
                let (ny, nx) = (ny as usize, nx as usize);
                let m = thinned[[ny, nx]];
                if !edges[[ny, nx]] && m > 0.0 && ge_tol(m, low_abs) {
                    edges[[ny, nx]] = true;
                    queue.push_back((ny, nx));
                }
            }
        }
    }
    Ok(edges)
}

/// Full detector on the luma of `image`.
pub fn canny(image: &ImageGrid, params: &CannyParams) -> Result<Array2<bool>> {
    params.validate()?;
    let blurred = gaussian_blur(&image.luma(), params.sigma)?;
    let (mag, ang) = sobel_gradients(&blurred)?;
    let thinned = nonmax_suppress(&mag, &ang)?;
    let max = mag.iter().cloned().fold(0.0, f64::max);
    if max <= 0.0 {
        return Ok(Array2::from_elem(mag.dim(), false));
    }
    hysteresis(&thinned, params.low * max, params.high * max)
}

/// `{0, 1}` map → ground-truth structure map (`0 → 0.2`, `1 → 0.8`, three
/// identical channels).
pub fn remap(binary: &Array2<f64>) -> Result<CannyMap> {
    if let Some(((y, x), v)) = binary.indexed_iter().find(|(_, &v)| v != 0.0 && v != 1.0) {
        return Err(Error::Domain(format!("non-binary value {v} at ({y}, {x})")));
    }
    Ok(remap_edges(&binary.mapv(|v| v == 1.0)))
}

pub fn remap_edges(edges: &Array2<bool>) -> CannyMap {
    let (h, w) = edges.dim();
    let values = ImageGrid::from_fn(h, w, 3, |(y, x, _)| if edges[[y, x]] { EDGE } else { NON_EDGE });
    CannyMap {
        values,
        kind: CannyKind::GroundTruth,
    }
}

/// Inverse of [`remap`]: `(v - 0.2) / 0.6` on channel 0, rounded to the
/// nearest integer so that the round trip is exact.
pub fn unremap(map: &CannyMap) -> Array2<f64> {
    let (h, w, _) = map.values.dim();
    Array2::from_shape_fn((h, w), |(y, x)| ((map.values.get(y, x, 0) - NON_EDGE) / 0.6).round())
}

/// Thresholds the channel mean: `>= threshold` → 0.8, else 0.2.
pub fn binarize_prediction(pred: &CannyMap, threshold: f64) -> CannyMap {
    let mean = pred.values.channel_mean();
    let (h, w) = mean.dim();
    let values = ImageGrid::from_fn(
        h,
        w,
        3,
        |(y, x, _)| {
            if mean[[y, x]] >= threshold {
                EDGE
            } else {
                NON_EDGE
            }
        },
    );
    CannyMap {
        values,
        kind: CannyKind::Binarized,
    }
}

/// Ground-truth structure map of an image.
pub fn structure_map(image: &ImageGrid, params: &CannyParams) -> Result<CannyMap> {
    Ok(remap_edges(&canny(image, params)?))
}
