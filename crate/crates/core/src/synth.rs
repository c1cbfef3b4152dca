//! Seeded synthetic microscopy-like textures for tests, benchmarks and smoke
//! datasets.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::raster::GrayRaster;

struct Atom {
    cx: f64,
    cy: f64,
    cos: f64,
    sin: f64,
    freq: f64,
    phase: f64,
    inv_two_sigma2: f64,
    reach2: f64,
    amp: f64,
}

/// Sum of Gabor atoms with an image-specific palette of wavelengths and
/// orientations, squashed into `[0, 1]`. Distinct seeds give visually
/// distinct images; the same seed always gives the same pixels.
pub fn textured(seed: u64, width: usize, height: usize) -> GrayRaster {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_7e87_u64);
    let wavelengths = [rng.random_range(6.0..12.0), rng.random_range(12.0..26.0)];
    let base_angle: f64 = rng.random_range(0.0..std::f64::consts::PI);
    let area = (width * height) as f64;
    let count = ((area / (48.0 * 48.0)).ceil() as usize).max(6) * 2;
    let atoms: Vec<Atom> = (0..count)
        .map(|_| {
            let angle = base_angle + rng.random_range(-0.6..0.6) + if rng.random_bool(0.3) { 1.2 } else { 0.0 };
            let lambda = wavelengths[rng.random_range(0..2)];
            let sigma: f64 = rng.random_range(8.0..26.0);
            Atom {
                cx: rng.random_range(-0.1..1.1) * width as f64,
                cy: rng.random_range(-0.1..1.1) * height as f64,
                cos: angle.cos(),
                sin: angle.sin(),
                freq: std::f64::consts::TAU / lambda,
                phase: rng.random_range(0.0..std::f64::consts::TAU),
                inv_two_sigma2: 1.0 / (2.0 * sigma * sigma),
                reach2: (3.5 * sigma).powi(2),
                amp: rng.random_range(0.4..1.0),
            }
        })
        .collect();
    render(format!("synth-{seed}"), width, height, &atoms)
}

fn render(id: String, width: usize, height: usize, atoms: &[Atom]) -> GrayRaster {
    GrayRaster::from_fn(id, width, height, |x, y| {
        let (x, y) = (x as f64, y as f64);
        let mut s = 0.0;
        for a in atoms {
            let (dx, dy) = (x - a.cx, y - a.cy);
            let r2 = dx * dx + dy * dy;
            if r2 > a.reach2 {
                continue;
            }
            let along = dx * a.cos + dy * a.sin;
            s += a.amp * (-r2 * a.inv_two_sigma2).exp() * (a.freq * along + a.phase).cos();
        }
        0.5 + 0.45 * (1.2 * s).tanh()
    })
    .expect("generated raster is valid")
}

/// Uniform noise in `[0, 1)`.
pub fn noise(seed: u64, width: usize, height: usize) -> GrayRaster {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    GrayRaster::from_fn(format!("noise-{seed}"), width, height, |_, _| rng.random::<f64>())
        .expect("generated raster is valid")
}

/// Separable Gaussian blur with edge clamping.
pub fn gaussian_blur(r: &GrayRaster, sigma: f64) -> GrayRaster {
    let radius = (3.0 * sigma).ceil().max(1.0) as i64;
    let kernel: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let norm: f64 = kernel.iter().sum();
    let (w, h) = (r.width() as i64, r.height() as i64);
    let mut tmp = vec![0.0f64; (w * h) as usize];
    for y in 0..h {
        for x in 0..w {
            let mut s = 0.0;
            for (k, kv) in kernel.iter().enumerate() {
                let xx = (x + k as i64 - radius).clamp(0, w - 1);
                s += kv * f64::from(r.get(xx as usize, y as usize));
            }
            tmp[(y * w + x) as usize] = s / norm;
        }
    }
    GrayRaster::from_fn(r.id(), r.width(), r.height(), |x, y| {
        let mut s = 0.0;
        for (k, kv) in kernel.iter().enumerate() {
            let yy = (y as i64 + k as i64 - radius).clamp(0, h - 1);
            s += kv * tmp[(yy * w + x as i64) as usize];
        }
        s / norm
    })
    .expect("blur preserves range")
}

/// A stand-in second modality: monotone gamma remap followed by a mild blur.
pub fn second_modality(r: &GrayRaster) -> GrayRaster {
    let remapped = GrayRaster::from_fn(r.id(), r.width(), r.height(), |x, y| {
        f64::from(r.get(x, y)).powf(0.6)
    })
    .expect("gamma preserves range");
    gaussian_blur(&remapped, 1.0)
}
