//! Real-valued rasters and their 8-bit PNG encoding.

use std::path::Path;

use ndarray::{Array2, Array3, ArrayView3, Axis};

use crate::error::{Error, Result};

/// Rec.601 luma weights.
pub const LUMA_WEIGHTS: [f64; 3] = [0.299, 0.587, 0.114];

/// An `H×W×C` raster, nominally in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageGrid(Array3<f64>);

impl ImageGrid {
    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        ImageGrid(Array3::zeros((height, width, channels)))
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f64) -> Self {
        ImageGrid(Array3::from_elem((height, width, channels), value))
    }

    pub fn from_array(values: Array3<f64>) -> Self {
        ImageGrid(values)
    }

    pub fn from_fn(height: usize, width: usize, channels: usize, f: impl FnMut((usize, usize, usize)) -> f64) -> Self {
        ImageGrid(Array3::from_shape_fn((height, width, channels), f))
    }

    /// Replicates a single-channel grid across `channels`.
    pub fn from_gray(gray: &Array2<f64>, channels: usize) -> Self {
        let (h, w) = gray.dim();
        ImageGrid::from_fn(h, w, channels, |(y, x, _)| gray[[y, x]])
    }

    pub fn height(&self) -> usize {
        self.0.dim().0
    }

    pub fn width(&self) -> usize {
        self.0.dim().1
    }

    pub fn channels(&self) -> usize {
        self.0.dim().2
    }

    pub fn dim(&self) -> (usize, usize, usize) {
        self.0.dim()
    }

    pub fn values(&self) -> &Array3<f64> {
        &self.0
    }

    pub fn values_mut(&mut self) -> &mut Array3<f64> {
        &mut self.0
    }

    pub fn view(&self) -> ArrayView3<'_, f64> {
        self.0.view()
    }

    pub fn into_array(self) -> Array3<f64> {
        self.0
    }

    pub fn as_slice(&self) -> &[f64] {
        self.0.as_slice().expect("ImageGrid storage is always standard layout")
    }

    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.0[[y, x, c]]
    }

    pub fn set(&mut self, y: usize, x: usize, c: usize, value: f64) {
        self.0[[y, x, c]] = value;
    }

    pub fn same_shape(&self, other: &ImageGrid) -> bool {
        self.dim() == other.dim()
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    /// Luma for 3-channel images; the channel itself for single-channel ones.
    pub fn luma(&self) -> Array2<f64> {
        match self.channels() {
            3 => Array2::from_shape_fn((self.height(), self.width()), |(y, x)| {
                LUMA_WEIGHTS[0] * self.0[[y, x, 0]]
                    + LUMA_WEIGHTS[1] * self.0[[y, x, 1]]
                    + LUMA_WEIGHTS[2] * self.0[[y, x, 2]]
            }),
            _ => self.0.index_axis(Axis(2), 0).to_owned(),
        }
    }

    pub fn channel_mean(&self) -> Array2<f64> {
        let c = self.channels() as f64;
        self.0.sum_axis(Axis(2)).mapv(|v| v / c)
    }

    pub fn clamped(&self) -> ImageGrid {
        ImageGrid(self.0.mapv(|v| v.clamp(0.0, 1.0)))
    }

    pub fn scaled(&self, factor: f64) -> ImageGrid {
        ImageGrid(self.0.mapv(|v| v * factor))
    }

    /// 8-bit quantization used for PNG output: `round(clamp(v) * 255)`.
    pub fn to_bytes(&self) -> Vec<u8> {
        self.0.iter().map(|&v| quantize(v)).collect()
    }

    pub fn from_bytes(height: usize, width: usize, channels: usize, bytes: &[u8]) -> Result<Self> {
        if bytes.len() != height * width * channels {
            return Err(Error::shape(format!(
                "{} bytes cannot fill a {height}x{width}x{channels} grid",
                bytes.len()
            )));
        }
        let data = bytes.iter().map(|&b| f64::from(b) / 255.0).collect();
        Array3::from_shape_vec((height, width, channels), data)
            .map(ImageGrid)
            .map_err(|e| Error::shape(e.to_string()))
    }

    /// Writes an 8-bit RGB (3-channel) or grayscale (1-channel) PNG. Values
    /// are clipped to `[0, 1]` first.
    pub fn save_png(&self, path: &Path) -> Result<()> {
        let (h, w, c) = self.dim();
        let color = match c {
            1 => image::ExtendedColorType::L8,
            3 => image::ExtendedColorType::Rgb8,
            _ => return Err(Error::shape(format!("cannot encode {c}-channel image as PNG"))),
        };
        image::save_buffer_with_format(
            path,
            &self.to_bytes(),
            w as u32,
            h as u32,
            color,
            image::ImageFormat::Png,
        )
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })
    }

    /// Loads a PNG as a 3-channel grid.
    pub fn load_png(path: &Path) -> Result<Self> {
        let img = image::open(path).map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?;
        let rgb = img.to_rgb8();
        let (w, h) = rgb.dimensions();
        ImageGrid::from_bytes(h as usize, w as usize, 3, rgb.as_raw())
    }
}

pub fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Horizontal concatenation of equally tall grids (used for report panels).
pub fn hstack(panels: &[&ImageGrid]) -> Result<ImageGrid> {
    let first = panels
        .first()
        .ok_or_else(|| Error::shape("hstack needs at least one panel"))?;
    let (h, _, c) = first.dim();
    if panels.iter().any(|p| p.height() != h || p.channels() != c) {
        return Err(Error::shape("hstack panels differ in height or channels"));
    }
    let views: Vec<_> = panels.iter().map(|p| p.view()).collect();
    let joined = ndarray::concatenate(Axis(1), &views).map_err(|e| Error::shape(e.to_string()))?;
    Ok(ImageGrid(joined))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn byte_round_trip_is_exact_for_8bit_values() {
        let bytes: Vec<u8> = (0..=255).cycle().take(4 * 5 * 3).collect();
        let img = ImageGrid::from_bytes(4, 5, 3, &bytes).unwrap();
        assert_eq!(img.to_bytes(), bytes);
    }

    #[test]
    fn canny_levels_quantize_to_documented_bytes() {
        assert_eq!(quantize(0.2), 51);
        assert_eq!(quantize(0.8), 204);
        assert_eq!(f64::from(51u8) / 255.0, 0.2);
        assert_eq!(f64::from(204u8) / 255.0, 0.8);
    }

    #[test]
    fn png_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.png");
        let img = ImageGrid::from_fn(6, 7, 3, |(y, x, c)| ((y * 7 + x) * 3 + c) as f64 / 255.0);
        img.save_png(&path).unwrap();
        assert_eq!(ImageGrid::load_png(&path).unwrap(), img);
    }

    #[test]
    fn hstack_widths_add_up() {
        let a = ImageGrid::zeros(4, 3, 3);
        let b = ImageGrid::filled(4, 5, 3, 1.0);
        let s = hstack(&[&a, &b]).unwrap();
        assert_eq!(s.dim(), (4, 8, 3));
        assert_eq!(s.get(0, 3, 0), 1.0);
    }
}
