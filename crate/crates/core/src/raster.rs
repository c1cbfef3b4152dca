//! Grayscale rasters, rigid warps, integral images and the overlap
//! correlation probe.
//!
//! Coordinates follow the image convention: `x` grows to the right, `y`
//! grows downwards, pixel `(x, y)` sits at row `y`, column `x`. Rotations are
//! counter-clockwise as seen on screen and pivot about the geometric centre
//! `((width - 1) / 2, (height - 1) / 2)`.

use std::path::Path;

use image::DynamicImage;

use crate::error::{Error, Result};

/// Sampling slack so that coordinates a few ulps outside the grid (e.g. from
/// `cos(90°)`) still count as inside.
const DOMAIN_EPS: f64 = 1e-9;

/// Single-channel intensity field with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct GrayRaster {
    id: String,
    width: usize,
    height: usize,
    pixels: Vec<f32>,
}

impl GrayRaster {
    pub fn new(id: impl Into<String>, width: usize, height: usize, pixels: Vec<f32>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::ZeroDimension { width, height });
        }
        if pixels.len() != width * height {
            return Err(Error::InvalidRaster(format!(
                "{} pixels for a {width}x{height} raster",
                pixels.len()
            )));
        }
        if let Some(v) = pixels.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidRaster(format!("intensity {v} outside [0, 1]")));
        }
        Ok(GrayRaster {
            id: id.into(),
            width,
            height,
            pixels,
        })
    }

    /// Builds a raster from a generator, clamping its output into `[0, 1]`.
    pub fn from_fn(
        id: impl Into<String>,
        width: usize,
        height: usize,
        mut f: impl FnMut(usize, usize) -> f64,
    ) -> Result<Self> {
        let mut pixels = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                pixels.push(f(x, y).clamp(0.0, 1.0) as f32);
            }
        }
        GrayRaster::new(id, width, height, pixels)
    }

    pub fn constant(id: impl Into<String>, width: usize, height: usize, value: f32) -> Result<Self> {
        GrayRaster::new(id, width, height, vec![value; width * height])
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    pub fn with_id(mut self, id: impl Into<String>) -> Self {
        self.id = id.into();
        self
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.pixels[y * self.width + x]
    }

    /// Bilinear sample at a real-valued location; `None` outside the grid.
    pub fn sample_bilinear(&self, x: f64, y: f64) -> Option<f64> {
        let (w, h) = (self.width as f64, self.height as f64);
        if !(x >= -DOMAIN_EPS && y >= -DOMAIN_EPS && x <= w - 1.0 + DOMAIN_EPS && y <= h - 1.0 + DOMAIN_EPS) {
            return None;
        }
        let x = x.clamp(0.0, w - 1.0);
        let y = y.clamp(0.0, h - 1.0);
        let x0 = (x.floor() as usize).min(self.width.saturating_sub(2));
        let y0 = (y.floor() as usize).min(self.height.saturating_sub(2));
        let fx = x - x0 as f64;
        let fy = y - y0 as f64;
        let x1 = (x0 + 1).min(self.width - 1);
        let y1 = (y0 + 1).min(self.height - 1);
        let p = |xx: usize, yy: usize| self.get(xx, yy) as f64;
        let top = p(x0, y0) * (1.0 - fx) + if fx > 0.0 { p(x1, y0) * fx } else { 0.0 };
        let bottom = if fy > 0.0 {
            p(x0, y1) * (1.0 - fx) + if fx > 0.0 { p(x1, y1) * fx } else { 0.0 }
        } else {
            0.0
        };
        Some(top * (1.0 - fy) + bottom * fy)
    }

    /// Sub-rectangle copy; the rectangle must lie inside the raster.
    pub fn crop(&self, x0: usize, y0: usize, width: usize, height: usize) -> Result<GrayRaster> {
        if width == 0 || height == 0 {
            return Err(Error::ZeroDimension { width, height });
        }
        if x0 + width > self.width || y0 + height > self.height {
            return Err(Error::CropTooLarge {
                size: width.max(height),
                width: self.width,
                height: self.height,
            });
        }
        let mut pixels = Vec::with_capacity(width * height);
        for y in y0..y0 + height {
            let row = y * self.width;
            pixels.extend_from_slice(&self.pixels[row + x0..row + x0 + width]);
        }
        Ok(GrayRaster {
            id: self.id.clone(),
            width,
            height,
            pixels,
        })
    }

    /// Writes a 16-bit grayscale PNG.
    pub fn save_png16(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let data: Vec<u16> = self
            .pixels
            .iter()
            .map(|v| (f64::from(*v) * 65535.0).round() as u16)
            .collect();
        let buf = image::ImageBuffer::<image::Luma<u16>, _>::from_raw(self.width as u32, self.height as u32, data)
            .expect("buffer size matches dimensions");
        buf.save(path).map_err(|e| Error::Decode {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
    }
}

/// Reads a PNG or binary PGM as grayscale in `[0, 1]`.
///
/// Samples are divided by the container's maximum (255 or 65535). With a
/// `bit_depth_hint` (e.g. 12 for 12-bit data in 16-bit containers) the divisor
/// becomes `2^hint - 1` and values above it saturate. RGB is averaged with
/// equal weights.
pub fn load_raster(path: impl AsRef<Path>, bit_depth_hint: Option<u8>) -> Result<GrayRaster> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let format = image::guess_format(&bytes).map_err(|e| Error::UnsupportedFormat {
        path: path.to_path_buf(),
        format: e.to_string(),
    })?;
    if !matches!(format, image::ImageFormat::Png | image::ImageFormat::Pnm) {
        return Err(Error::UnsupportedFormat {
            path: path.to_path_buf(),
            format: format!("{format:?}"),
        });
    }
    let img = image::load_from_memory_with_format(&bytes, format).map_err(|e| Error::Decode {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    let (width, height) = (img.width() as usize, img.height() as usize);
    if width == 0 || height == 0 {
        return Err(Error::ZeroDimension { width, height });
    }
    let scale = |container_max: f64| match bit_depth_hint {
        Some(bits) if bits > 0 && bits < 32 => ((1u64 << bits) - 1) as f64,
        _ => container_max,
    };
    let pixels: Vec<f32> = match img {
        DynamicImage::ImageLuma8(buf) => {
            let m = scale(255.0);
            buf.into_raw().into_iter().map(|v| (v as f64 / m).min(1.0) as f32).collect()
        }
        DynamicImage::ImageLuma16(buf) => {
            let m = scale(65535.0);
            buf.into_raw().into_iter().map(|v| (v as f64 / m).min(1.0) as f32).collect()
        }
        DynamicImage::ImageRgb8(buf) => {
            let m = scale(255.0);
            buf.into_raw()
                .chunks_exact(3)
                .map(|c| ((c[0] as f64 + c[1] as f64 + c[2] as f64) / (3.0 * m)).min(1.0) as f32)
                .collect()
        }
        DynamicImage::ImageRgb16(buf) => {
            let m = scale(65535.0);
            buf.into_raw()
                .chunks_exact(3)
                .map(|c| ((c[0] as f64 + c[1] as f64 + c[2] as f64) / (3.0 * m)).min(1.0) as f32)
                .collect()
        }
        other => {
            return Err(Error::UnsupportedFormat {
                path: path.to_path_buf(),
                format: format!("{:?}", other.color()),
            })
        }
    };
    let id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    GrayRaster::new(id, width, height, pixels)
}

const LOG_GAIN: f64 = 255.0;

/// `v -> ln(1 + 255 v) / ln(256)`: dynamic-range compression that keeps 0 and 1 fixed.
pub fn log_transform(r: &GrayRaster) -> GrayRaster {
    let norm = (1.0 + LOG_GAIN).ln();
    let pixels = r
        .pixels
        .iter()
        .map(|v| (((1.0 + LOG_GAIN * f64::from(*v)).ln() / norm) as f32).clamp(0.0, 1.0))
        .collect();
    GrayRaster {
        id: r.id.clone(),
        width: r.width,
        height: r.height,
        pixels,
    }
}

/// Rotation about the image centre followed by a translation.
///
/// A source point `p` lands at `R(p - c) + c + t`, where `R` turns
/// counter-clockwise on screen by `rotation_deg`.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct RigidTransform {
    pub rotation_deg: f64,
    pub tx: f64,
    pub ty: f64,
}

impl Default for RigidTransform {
    fn default() -> Self {
        RigidTransform::identity()
    }
}

impl RigidTransform {
    pub const fn identity() -> Self {
        RigidTransform {
            rotation_deg: 0.0,
            tx: 0.0,
            ty: 0.0,
        }
    }

    pub const fn translation(tx: f64, ty: f64) -> Self {
        RigidTransform {
            rotation_deg: 0.0,
            tx,
            ty,
        }
    }

    pub const fn rotation(rotation_deg: f64) -> Self {
        RigidTransform {
            rotation_deg,
            tx: 0.0,
            ty: 0.0,
        }
    }

    fn cos_sin(&self) -> (f64, f64) {
        // Keep exact values for the axis-aligned cases.
        match self.rotation_deg {
            0.0 => (1.0, 0.0),
            90.0 => (0.0, 1.0),
            -90.0 => (0.0, -1.0),
            180.0 | -180.0 => (-1.0, 0.0),
            d => {
                let r = d.to_radians();
                (r.cos(), r.sin())
            }
        }
    }

    /// Screen-CCW rotation of a vector in image coordinates.
    fn rotate(&self, vx: f64, vy: f64) -> (f64, f64) {
        let (c, s) = self.cos_sin();
        (c * vx + s * vy, -s * vx + c * vy)
    }

    fn rotate_back(&self, vx: f64, vy: f64) -> (f64, f64) {
        let (c, s) = self.cos_sin();
        (c * vx - s * vy, s * vx + c * vy)
    }

    /// Where a source point lands in a `width`x`height` frame.
    pub fn map_forward(&self, x: f64, y: f64, width: usize, height: usize) -> (f64, f64) {
        let (cx, cy) = center(width, height);
        let (rx, ry) = self.rotate(x - cx, y - cy);
        (rx + cx + self.tx, ry + cy + self.ty)
    }

    /// The source point that lands at `(x, y)`.
    pub fn map_inverse(&self, x: f64, y: f64, width: usize, height: usize) -> (f64, f64) {
        let (cx, cy) = center(width, height);
        let (rx, ry) = self.rotate_back(x - cx - self.tx, y - cy - self.ty);
        (rx + cx, ry + cy)
    }

    pub fn inverse(&self) -> RigidTransform {
        let (bx, by) = self.rotate_back(self.tx, self.ty);
        RigidTransform {
            rotation_deg: -self.rotation_deg,
            tx: -bx,
            ty: -by,
        }
    }
}

fn center(width: usize, height: usize) -> (f64, f64) {
    ((width as f64 - 1.0) / 2.0, (height as f64 - 1.0) / 2.0)
}

/// Warps `r` by `t` with bilinear resampling; uncovered pixels become 0.
pub fn apply_transform(r: &GrayRaster, t: &RigidTransform) -> GrayRaster {
    let (w, h) = (r.width, r.height);
    let mut pixels = Vec::with_capacity(w * h);
    for y in 0..h {
        for x in 0..w {
            let (sx, sy) = t.map_inverse(x as f64, y as f64, w, h);
            let v = r.sample_bilinear(sx, sy).unwrap_or(0.0);
            pixels.push((v as f32).clamp(0.0, 1.0));
        }
    }
    GrayRaster {
        id: r.id.clone(),
        width: w,
        height: h,
        pixels,
    }
}

/// Square crop of side `size` anchored at `((w - size) / 2, (h - size) / 2)`, floored.
pub fn center_crop(r: &GrayRaster, size: usize) -> Result<GrayRaster> {
    if size == 0 || size > r.width || size > r.height {
        return Err(Error::CropTooLarge {
            size,
            width: r.width,
            height: r.height,
        });
    }
    let (x0, y0) = center_crop_origin(r.width, r.height, size);
    r.crop(x0, y0, size, size)
}

pub fn center_crop_origin(width: usize, height: usize, size: usize) -> (usize, usize) {
    ((width - size) / 2, (height - size) / 2)
}

/// Summed-area table. Stored with a zero guard row and column so that
/// rectangle sums need no branches.
#[derive(Clone, Debug)]
pub struct IntegralImage {
    width: usize,
    height: usize,
    stride: usize,
    sums: Vec<f64>,
}

impl IntegralImage {
    pub fn new(r: &GrayRaster) -> Self {
        let (w, h) = (r.width, r.height);
        let stride = w + 1;
        let mut sums = vec![0.0f64; stride * (h + 1)];
        for y in 0..h {
            let mut row = 0.0f64;
            for x in 0..w {
                row += f64::from(r.pixels[y * w + x]);
                sums[(y + 1) * stride + x + 1] = sums[y * stride + x + 1] + row;
            }
        }
        IntegralImage {
            width: w,
            height: h,
            stride,
            sums,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    /// Sum of all pixels with coordinates `<= (x, y)`.
    pub fn at(&self, x: usize, y: usize) -> f64 {
        self.sums[(y + 1) * self.stride + x + 1]
    }

    /// Sum over the inclusive rectangle `[x0, x1] x [y0, y1]`.
    pub fn rect_sum(&self, x0: usize, y0: usize, x1: usize, y1: usize) -> f64 {
        debug_assert!(x0 <= x1 && y0 <= y1 && x1 < self.width && y1 < self.height);
        self.box_sum(x0, y0, x1 - x0 + 1, y1 - y0 + 1)
    }

    /// Sum over the half-open box `[x, x + w) x [y, y + h)`.
    #[inline]
    pub fn box_sum(&self, x: usize, y: usize, w: usize, h: usize) -> f64 {
        let s = self.stride;
        let a = self.sums[y * s + x];
        let b = self.sums[y * s + x + w];
        let c = self.sums[(y + h) * s + x];
        let d = self.sums[(y + h) * s + x + w];
        d - b - c + a
    }
}

pub fn integral(r: &GrayRaster) -> IntegralImage {
    IntegralImage::new(r)
}

/// Pearson correlation of `a` and `b` over their overlap, where `b` is `a`'s
/// content moved by `t`.
///
/// Each pixel `p` of `a` is paired with `b` sampled (bilinearly) at `t(p)`;
/// pixels whose image under `t` falls outside `b` are masked out.
pub fn overlap_correlation(a: &GrayRaster, b: &GrayRaster, t: &RigidTransform) -> Result<f64> {
    if a.width != b.width || a.height != b.height {
        return Err(Error::DimensionMismatch(a.width, a.height, b.width, b.height));
    }
    let (w, h) = (a.width, a.height);
    let mut pairs: Vec<(f64, f64)> = Vec::new();
    for y in 0..h {
        for x in 0..w {
            let (qx, qy) = t.map_forward(x as f64, y as f64, w, h);
            if let Some(bv) = b.sample_bilinear(qx, qy) {
                pairs.push((f64::from(a.get(x, y)), bv));
            }
        }
    }
    pearson(&pairs)
}

pub(crate) fn pearson(pairs: &[(f64, f64)]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::EmptyOverlap);
    }
    let n = pairs.len() as f64;
    let (sa, sb) = pairs.iter().fold((0.0, 0.0), |(sa, sb), (x, y)| (sa + x, sb + y));
    let (ma, mb) = (sa / n, sb / n);
    let (mut cov, mut va, mut vb) = (0.0, 0.0, 0.0);
    for (x, y) in pairs {
        let (dx, dy) = (x - ma, y - mb);
        cov += dx * dy;
        va += dx * dx;
        vb += dy * dy;
    }
    // Relative floor: sums of squares this small are rounding noise.
    let floor = 1e-24 * n;
    if va <= floor || vb <= floor {
        return Err(Error::UndefinedCorrelation);
    }
    // sqrt(va * vb) keeps self-correlation at exactly 1.
    Ok((cov / (va * vb).sqrt()).clamp(-1.0, 1.0))
}
