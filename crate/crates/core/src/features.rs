//! Dense SURF-style descriptors on a regular grid.
//!
//! Every grid point (multiples of `grid_spacing`) gets one descriptor per
//! configured patch size whose square patch fits inside the image. A patch of
//! side `s` is split into 4x4 subregions of 5x5 Haar samples each. Haar
//! filters have side `s/8` (rounded to an even width) and every sample is
//! weighted by a Gaussian with sigma `s/4` around the patch centre. Each
//! subregion contributes `(sum dx, sum dy, sum |dx|, sum |dy|)`, giving 64
//! values that are then scaled to unit length. The pre-normalisation length is
//! kept as the descriptor strength.
//!
//! In upright mode the Haar axes are the image axes. Otherwise a dominant
//! orientation is estimated first and samples and responses are expressed in
//! the rotated frame.

use std::fmt::Write as _;
use std::io::{Read, Write};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::{GrayRaster, IntegralImage};

pub const DESCRIPTOR_LEN: usize = 64;

/// Bumped whenever descriptor values would change for the same input.
pub const DESCRIPTOR_VERSION: &str = "grid-surf-v1";

const SAMPLES_PER_AXIS: usize = 20;
const SAMPLES_PER_SUBREGION: usize = 5;

/// Raw descriptors shorter than this are treated as flat (all zero).
const FLAT_NORM: f64 = 1e-7;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExtractorConfig {
    pub grid_spacing: usize,
    pub scales: Vec<usize>,
    pub upright: bool,
    pub strongest_fraction: f64,
}

impl Default for ExtractorConfig {
    fn default() -> Self {
        ExtractorConfig {
            grid_spacing: 8,
            scales: vec![32, 64, 96, 128],
            upright: true,
            strongest_fraction: 0.8,
        }
    }
}

impl ExtractorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.grid_spacing < 1 {
            return Err(Error::InvalidConfig("grid spacing must be at least 1".into()));
        }
        if self.scales.is_empty() {
            return Err(Error::InvalidConfig("at least one scale is required".into()));
        }
        if let Some(s) = self.scales.iter().find(|s| **s < 8 || **s % 4 != 0) {
            return Err(Error::InvalidConfig(format!(
                "scale {s} must be at least 8 and divisible by 4"
            )));
        }
        if self.scales.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::InvalidConfig("scales must be strictly increasing".into()));
        }
        if !(self.strongest_fraction > 0.0 && self.strongest_fraction <= 1.0) {
            return Err(Error::InvalidConfig(format!(
                "strongest fraction {} outside (0, 1]",
                self.strongest_fraction
            )));
        }
        Ok(())
    }

    /// Stable textual form covering every field and the descriptor version;
    /// hashed for cache keys.
    pub fn canonical(&self) -> String {
        let scales: Vec<String> = self.scales.iter().map(|s| s.to_string()).collect();
        format!(
            "{DESCRIPTOR_VERSION};grid={};scales={};upright={};fraction={:016x}",
            self.grid_spacing,
            scales.join(","),
            self.upright as u8,
            self.strongest_fraction.to_bits()
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Descriptor {
    pub vector: [f32; DESCRIPTOR_LEN],
    pub x: f32,
    pub y: f32,
    /// Patch side in pixels.
    pub scale: f32,
    pub strength: f32,
    /// Zero in upright mode.
    pub orientation_deg: f32,
}

impl Descriptor {
    pub fn is_zero(&self) -> bool {
        self.vector.iter().all(|v| *v == 0.0)
    }
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct FeatureSet {
    pub image_id: String,
    pub descriptors: Vec<Descriptor>,
    /// Set when the image was smaller than the smallest patch size.
    pub undersized: bool,
}

impl FeatureSet {
    pub fn new(image_id: impl Into<String>, descriptors: Vec<Descriptor>) -> Self {
        FeatureSet {
            image_id: image_id.into(),
            descriptors,
            undersized: false,
        }
    }

    pub fn len(&self) -> usize {
        self.descriptors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.descriptors.is_empty()
    }
}

/// Per-scale sampling layout, shared by every patch of that size.
#[derive(Debug)]
struct PatchGeometry {
    scale: usize,
    half: usize,
    /// Sample offsets relative to the patch centre pixel, per axis.
    offsets: [i64; SAMPLES_PER_AXIS],
    /// Gaussian weight per (row, column) sample.
    weights: [[f64; SAMPLES_PER_AXIS]; SAMPLES_PER_AXIS],
}

impl PatchGeometry {
    fn new(scale: usize) -> Self {
        let haar = haar_side(scale as f64 / 8.0);
        let half = haar / 2;
        let span = scale - haar;
        let n = SAMPLES_PER_AXIS - 1;
        let mut offsets = [0i64; SAMPLES_PER_AXIS];
        for (i, o) in offsets.iter_mut().enumerate() {
            // Haar boxes at these offsets stay inside [centre - s/2, centre + s/2).
            let from_origin = half + (2 * i * span + n) / (2 * n);
            *o = from_origin as i64 - (scale / 2) as i64;
        }
        let sigma = scale as f64 / 4.0;
        let mut weights = [[0.0; SAMPLES_PER_AXIS]; SAMPLES_PER_AXIS];
        for (j, row) in weights.iter_mut().enumerate() {
            for (i, w) in row.iter_mut().enumerate() {
                let (a, b) = (offsets[i] as f64, offsets[j] as f64);
                *w = (-(a * a + b * b) / (2.0 * sigma * sigma)).exp();
            }
        }
        PatchGeometry {
            scale,
            half,
            offsets,
            weights,
        }
    }

    fn max_offset(&self) -> i64 {
        self.offsets.iter().map(|o| o.abs()).max().unwrap_or(0)
    }
}

/// Even Haar width closest to `nominal`, at least 2.
fn haar_side(nominal: f64) -> usize {
    2 * ((nominal / 2.0).round() as usize).max(1)
}

/// Haar responses at pixel `(px, py)`: right minus left half, bottom minus
/// top half, as mean intensity differences.
#[inline]
fn haar(ii: &IntegralImage, px: usize, py: usize, half: usize) -> (f64, f64) {
    let side = 2 * half;
    let area = (half * side) as f64;
    let (x0, y0) = (px - half, py - half);
    let dx = ii.box_sum(px, y0, half, side) - ii.box_sum(x0, y0, half, side);
    let dy = ii.box_sum(x0, py, side, half) - ii.box_sum(x0, y0, side, half);
    (dx / area, dy / area)
}

fn haar_fits(ii: &IntegralImage, px: i64, py: i64, half: usize) -> bool {
    let h = half as i64;
    px - h >= 0 && py - h >= 0 && px + h <= ii.width() as i64 && py + h <= ii.height() as i64
}

fn patch_inside(ii: &IntegralImage, cx: usize, cy: usize, scale: usize) -> bool {
    let half = scale / 2;
    cx >= half && cy >= half && cx + half <= ii.width() && cy + half <= ii.height()
}

fn build_descriptor(
    ii: &IntegralImage,
    geom: &PatchGeometry,
    cx: usize,
    cy: usize,
    orientation_deg: Option<f64>,
) -> Option<Descriptor> {
    let mut raw = [0.0f64; DESCRIPTOR_LEN];
    match orientation_deg {
        None => {
            if !patch_inside(ii, cx, cy, geom.scale) {
                return None;
            }
            for (j, &b) in geom.offsets.iter().enumerate() {
                let py = (cy as i64 + b) as usize;
                let base = 16 * (j / SAMPLES_PER_SUBREGION);
                for (i, &a) in geom.offsets.iter().enumerate() {
                    let px = (cx as i64 + a) as usize;
                    let (dx, dy) = haar(ii, px, py, geom.half);
                    let w = geom.weights[j][i];
                    accumulate(&mut raw[base + 4 * (i / SAMPLES_PER_SUBREGION)..], dx * w, dy * w);
                }
            }
        }
        Some(theta) => {
            // Rotated samples reach past the square patch; demand the whole
            // rotated support inside the image.
            let reach = (geom.max_offset() as f64 * std::f64::consts::SQRT_2).ceil() as i64 + 1;
            let (cxi, cyi) = (cx as i64, cy as i64);
            if !patch_inside(ii, cx, cy, geom.scale)
                || !haar_fits(ii, cxi - reach, cyi - reach, geom.half)
                || !haar_fits(ii, cxi + reach, cyi + reach, geom.half)
            {
                return None;
            }
            let (s, c) = theta.to_radians().sin_cos();
            let (ux, uy) = (c, -s);
            let (vx, vy) = (s, c);
            for (j, &b) in geom.offsets.iter().enumerate() {
                let base = 16 * (j / SAMPLES_PER_SUBREGION);
                for (i, &a) in geom.offsets.iter().enumerate() {
                    let (a, bf) = (a as f64, b as f64);
                    let px = (cx as f64 + a * ux + bf * vx).round() as usize;
                    let py = (cy as f64 + a * uy + bf * vy).round() as usize;
                    let (dx, dy) = haar(ii, px, py, geom.half);
                    let du = dx * ux + dy * uy;
                    let dv = dx * vx + dy * vy;
                    let w = geom.weights[j][i];
                    accumulate(&mut raw[base + 4 * (i / SAMPLES_PER_SUBREGION)..], du * w, dv * w);
                }
            }
        }
    }
    let norm = raw.iter().map(|v| v * v).sum::<f64>().sqrt();
    let mut vector = [0.0f32; DESCRIPTOR_LEN];
    let strength = if norm > FLAT_NORM {
        for (dst, v) in vector.iter_mut().zip(raw.iter()) {
            *dst = (v / norm) as f32;
        }
        norm as f32
    } else {
        0.0
    };
    Some(Descriptor {
        vector,
        x: cx as f32,
        y: cy as f32,
        scale: geom.scale as f32,
        strength,
        orientation_deg: orientation_deg.unwrap_or(0.0) as f32,
    })
}

#[inline]
fn accumulate(cell: &mut [f64], dx: f64, dy: f64) {
    cell[0] += dx;
    cell[1] += dy;
    cell[2] += dx.abs();
    cell[3] += dy.abs();
}

/// Descriptor of the `scale`-sized patch centred at pixel `(cx, cy)`.
///
/// `orientation_deg = None` gives the upright descriptor. Returns `None` when
/// the (possibly rotated) support leaves the image.
pub fn describe(
    ii: &IntegralImage,
    cx: usize,
    cy: usize,
    scale: usize,
    orientation_deg: Option<f64>,
) -> Option<Descriptor> {
    build_descriptor(ii, &PatchGeometry::new(scale), cx, cy, orientation_deg)
}

/// Dominant gradient direction around `(x, y)`, in degrees counter-clockwise
/// from the +x axis as seen on screen, in `[0, 360)`.
///
/// Haar responses (side `scale/8`, the descriptor's filter) are sampled on a disc of radius
/// `6 * scale/16`, Gaussian weighted, binned by angle at 1 degree and scanned
/// with a 60 degree window; the longest window sum wins. Flat neighbourhoods
/// give 0.
pub fn orientation_at(ii: &IntegralImage, x: usize, y: usize, scale: usize) -> Result<f64> {
    let sigma = scale as f64 / 16.0;
    let half = haar_side(2.0 * sigma) / 2;
    let radius = (6.0 * sigma).round() as i64;
    let (xi, yi) = (x as i64, y as i64);
    if !haar_fits(ii, xi - radius, yi - radius, half) || !haar_fits(ii, xi + radius, yi + radius, half) {
        return Err(Error::NeighborhoodOutside { x, y, scale });
    }
    let mut bins = [(0.0f64, 0.0f64); 360];
    for j in -6i64..=6 {
        for i in -6i64..=6 {
            let r2 = i * i + j * j;
            if r2 >= 36 {
                continue;
            }
            let px = (xi as f64 + i as f64 * sigma).round() as usize;
            let py = (yi as f64 + j as f64 * sigma).round() as usize;
            let (dx, dy) = haar(ii, px, py, half);
            let w = (-(r2 as f64) / 8.0).exp();
            // Screen-up is -y.
            let (gx, gy) = (dx * w, -dy * w);
            if gx == 0.0 && gy == 0.0 {
                continue;
            }
            let angle = gy.atan2(gx).to_degrees().rem_euclid(360.0);
            let bin = (angle.floor() as usize) % 360;
            bins[bin].0 += gx;
            bins[bin].1 += gy;
        }
    }
    let (mut wx, mut wy) = bins[..60].iter().fold((0.0, 0.0), |(a, b), (x, y)| (a + x, b + y));
    let (mut best, mut best_vec) = (wx * wx + wy * wy, (wx, wy));
    for start in 1..360 {
        let (out, inc) = (bins[start - 1], bins[(start + 59) % 360]);
        wx += inc.0 - out.0;
        wy += inc.1 - out.1;
        let m = wx * wx + wy * wy;
        if m > best {
            best = m;
            best_vec = (wx, wy);
        }
    }
    if best <= 1e-24 {
        return Ok(0.0);
    }
    Ok(best_vec.1.atan2(best_vec.0).to_degrees().rem_euclid(360.0))
}

pub fn assign_orientation(r: &GrayRaster, x: usize, y: usize, scale: usize) -> Result<f64> {
    orientation_at(&IntegralImage::new(r), x, y, scale)
}

/// Grid extraction over a whole raster.
///
/// Order is row-major over grid points, then ascending scale, independent of
/// the rayon pool size.
pub fn extract_grid(r: &GrayRaster, cfg: &ExtractorConfig) -> Result<FeatureSet> {
    cfg.validate()?;
    let smallest = cfg.scales[0];
    if r.width() < smallest || r.height() < smallest {
        return Ok(FeatureSet {
            image_id: r.id().to_string(),
            descriptors: Vec::new(),
            undersized: true,
        });
    }
    let ii = IntegralImage::new(r);
    let geoms: Vec<PatchGeometry> = cfg.scales.iter().map(|s| PatchGeometry::new(*s)).collect();
    let xs: Vec<usize> = (0..r.width()).step_by(cfg.grid_spacing).collect();
    let rows: Vec<Vec<Descriptor>> = (0..r.height())
        .step_by(cfg.grid_spacing)
        .collect::<Vec<_>>()
        .into_par_iter()
        .map(|y| {
            let mut out = Vec::new();
            for &x in &xs {
                for g in &geoms {
                    if !patch_inside(&ii, x, y, g.scale) {
                        continue;
                    }
                    let orientation = if cfg.upright {
                        None
                    } else {
                        match orientation_at(&ii, x, y, g.scale) {
                            Ok(theta) => Some(theta),
                            Err(_) => continue,
                        }
                    };
                    if let Some(d) = build_descriptor(&ii, g, x, y, orientation) {
                        out.push(d);
                    }
                }
            }
            out
        })
        .collect();
    Ok(FeatureSet {
        image_id: r.id().to_string(),
        descriptors: rows.into_iter().flatten().collect(),
        undersized: false,
    })
}

/// Keeps the `ceil(fraction * n)` strongest descriptors in their original order.
///
/// Ties go to the earlier descriptor; zero descriptors have strength 0 and so
/// always rank last.
pub fn select_strongest(fs: &FeatureSet, fraction: f64) -> Result<FeatureSet> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::InvalidArgument(format!("fraction {fraction} outside (0, 1]")));
    }
    let n = fs.descriptors.len();
    // The slack absorbs products like 0.7 * 10 = 7.000000000000001.
    let keep = ((fraction * n as f64) - 1e-9).ceil().max(0.0) as usize;
    let keep = keep.min(n);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        fs.descriptors[b]
            .strength
            .total_cmp(&fs.descriptors[a].strength)
            .then(a.cmp(&b))
    });
    let mut kept: Vec<usize> = order.into_iter().take(keep).collect();
    kept.sort_unstable();
    Ok(FeatureSet {
        image_id: fs.image_id.clone(),
        descriptors: kept.into_iter().map(|i| fs.descriptors[i].clone()).collect(),
        undersized: fs.undersized,
    })
}

/// `extract_grid` followed by `select_strongest` at the configured fraction.
pub fn extract_selected(r: &GrayRaster, cfg: &ExtractorConfig) -> Result<FeatureSet> {
    select_strongest(&extract_grid(r, cfg)?, cfg.strongest_fraction)
}

// Binary layout, all little-endian:
//   magic  b"XMFS"
//   u32    version (1)
//   u32    flags (bit 0: undersized)
//   u32    image id length, followed by that many UTF-8 bytes
//   u32    descriptor count
//   count records of 69 f32: x, y, scale, orientation_deg, strength, vector[64]
const FS_MAGIC: &[u8; 4] = b"XMFS";
const FS_VERSION: u32 = 1;

impl FeatureSet {
    pub fn to_bytes(&self) -> Vec<u8> {
        let id = self.image_id.as_bytes();
        let mut out = Vec::with_capacity(20 + id.len() + self.descriptors.len() * 69 * 4);
        out.extend_from_slice(FS_MAGIC);
        out.extend_from_slice(&FS_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.undersized as u32).to_le_bytes());
        out.extend_from_slice(&(id.len() as u32).to_le_bytes());
        out.extend_from_slice(id);
        out.extend_from_slice(&(self.descriptors.len() as u32).to_le_bytes());
        for d in &self.descriptors {
            for v in [d.x, d.y, d.scale, d.orientation_deg, d.strength] {
                out.extend_from_slice(&v.to_le_bytes());
            }
            for v in d.vector {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<FeatureSet> {
        let mut r = ByteReader::new(bytes, "feature set");
        if r.take(4)? != FS_MAGIC {
            return Err(Error::format("feature set", "bad magic"));
        }
        let version = r.u32()?;
        if version != FS_VERSION {
            return Err(Error::format("feature set", format!("unsupported version {version}")));
        }
        let undersized = r.u32()? & 1 == 1;
        let id_len = r.u32()? as usize;
        let image_id = String::from_utf8(r.take(id_len)?.to_vec())
            .map_err(|_| Error::format("feature set", "image id is not UTF-8"))?;
        let count = r.u32()? as usize;
        let mut descriptors = Vec::with_capacity(count.min(1 << 20));
        for _ in 0..count {
            let (x, y, scale, orientation_deg, strength) = (r.f32()?, r.f32()?, r.f32()?, r.f32()?, r.f32()?);
            let mut vector = [0.0f32; DESCRIPTOR_LEN];
            for v in vector.iter_mut() {
                *v = r.f32()?;
            }
            descriptors.push(Descriptor {
                vector,
                x,
                y,
                scale,
                strength,
                orientation_deg,
            });
        }
        r.finish()?;
        Ok(FeatureSet {
            image_id,
            descriptors,
            undersized,
        })
    }

    pub fn write_to(&self, mut w: impl Write) -> std::io::Result<()> {
        w.write_all(&self.to_bytes())
    }

    pub fn read_from(mut r: impl Read) -> Result<FeatureSet> {
        let mut buf = Vec::new();
        r.read_to_end(&mut buf)
            .map_err(|e| Error::format("feature set", e.to_string()))?;
        FeatureSet::from_bytes(&buf)
    }

    /// One line per descriptor: `x y scale orientation strength v0 .. v63`.
    pub fn to_text(&self) -> String {
        let mut s = format!("# {} descriptors={}\n", self.image_id, self.descriptors.len());
        for d in &self.descriptors {
            let _ = write!(s, "{} {} {} {} {}", d.x, d.y, d.scale, d.orientation_deg, d.strength);
            for v in d.vector {
                let _ = write!(s, " {v}");
            }
            s.push('\n');
        }
        s
    }
}

/// Little-endian cursor over a byte slice.
pub(crate) struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
    what: &'static str,
}

impl<'a> ByteReader<'a> {
    pub(crate) fn new(bytes: &'a [u8], what: &'static str) -> Self {
        ByteReader { bytes, pos: 0, what }
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::format(self.what, "truncated"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub(crate) fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub(crate) fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub(crate) fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub(crate) fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub(crate) fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::format(self.what, "string is not UTF-8"))
    }

    pub(crate) fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(Error::format(self.what, "trailing bytes"));
        }
        Ok(())
    }
}

pub(crate) fn put_string(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}
