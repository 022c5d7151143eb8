//! Procedural sprite images: linear gradients, filled rectangles and smooth
//! noise textures. Every image is a pure function of `(seed, index)`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::dataset::{ImageDataset, LabeledDataset};
use crate::{Error, Result};

const DARK: (f64, f64) = (20.0, 80.0);
const BRIGHT: (f64, f64) = (170.0, 235.0);

fn check_dims(n: usize, size: usize, channels: usize) -> Result<()> {
    if n == 0 || size < 2 || channels == 0 {
        return Err(Error::Input(format!(
            "sprite corpus needs n >= 1, size >= 2 and channels >= 1 (got {n}, {size}, {channels})"
        )));
    }
    Ok(())
}

fn image_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

/// Canvas of real intensities, HWC, written out with rounding and clamping.
struct Canvas {
    size: usize,
    channels: usize,
    data: Vec<f64>,
}

impl Canvas {
    fn new(size: usize, channels: usize) -> Self {
        Self {
            size,
            channels,
            data: vec![0.0; size * size * channels],
        }
    }

    fn set(&mut self, i: usize, j: usize, c: usize, v: f64) {
        self.data[(i * self.size + j) * self.channels + c] = v;
    }

    fn fill(&mut self, mut f: impl FnMut(usize, usize, usize) -> f64) {
        for i in 0..self.size {
            for j in 0..self.size {
                for c in 0..self.channels {
                    self.set(i, j, c, f(i, j, c));
                }
            }
        }
    }

    fn map_in_place(&mut self, f: impl Fn(f64) -> f64) {
        for v in &mut self.data {
            *v = f(*v);
        }
    }

    fn into_pixels(self) -> Vec<u8> {
        self.data.into_iter().map(|v| v.round().clamp(0.0, 255.0) as u8).collect()
    }
}

fn channel_tints(rng: &mut ChaCha8Rng, channels: usize) -> Vec<f64> {
    (0..channels).map(|_| rng.random_range(0.85..1.15)).collect()
}

fn gradient(canvas: &mut Canvas, rng: &mut ChaCha8Rng, base: f64) {
    let angle = rng.random_range(0.0..std::f64::consts::TAU);
    let amp = rng.random_range(30.0..90.0);
    let tint = channel_tints(rng, canvas.channels);
    let n = (canvas.size - 1) as f64;
    let (dx, dy) = (angle.cos(), angle.sin());
    canvas.fill(|i, j, c| {
        let t = (j as f64 / n - 0.5) * dx + (i as f64 / n - 0.5) * dy;
        (base + amp * t) * tint[c]
    });
}

fn rectangle(canvas: &mut Canvas, rng: &mut ChaCha8Rng, background: f64) {
    let s = canvas.size;
    let h = rng.random_range(s / 4..=s * 3 / 4).max(1);
    let w = rng.random_range(s / 4..=s * 3 / 4).max(1);
    let top = rng.random_range(0..=s - h);
    let left = rng.random_range(0..=s - w);
    let fg = if background > 127.0 {
        rng.random_range(DARK.0..DARK.1)
    } else {
        rng.random_range(BRIGHT.0..BRIGHT.1)
    };
    let tint = channel_tints(rng, canvas.channels);
    canvas.fill(|i, j, c| {
        let inside = (top..top + h).contains(&i) && (left..left + w).contains(&j);
        (if inside { fg } else { background }) * tint[c]
    });
}

/// Bilinearly upsampled 3x3 lattice of random levels.
fn noise_texture(canvas: &mut Canvas, rng: &mut ChaCha8Rng, base: f64) {
    const K: usize = 3;
    let lattice: Vec<f64> = (0..K * K * canvas.channels)
        .map(|_| base + rng.random_range(-45.0..45.0))
        .collect();
    let ch = canvas.channels;
    let scale = (K - 1) as f64 / (canvas.size - 1) as f64;
    canvas.fill(|i, j, c| {
        let (y, x) = (i as f64 * scale, j as f64 * scale);
        let (y0, x0) = ((y.floor() as usize).min(K - 2), (x.floor() as usize).min(K - 2));
        let (fy, fx) = (y - y0 as f64, x - x0 as f64);
        let at = |a: usize, b: usize| lattice[(a * K + b) * ch + c];
        (1.0 - fy) * ((1.0 - fx) * at(y0, x0) + fx * at(y0, x0 + 1))
            + fy * ((1.0 - fx) * at(y0 + 1, x0) + fx * at(y0 + 1, x0 + 1))
    });
}

fn add_grain(canvas: &mut Canvas, rng: &mut ChaCha8Rng, amount: f64) {
    for v in &mut canvas.data {
        *v += rng.random_range(-amount..amount);
    }
}

/// `n` unlabeled sprites of `size`x`size`x`channels`, cycling through the
/// three families.
pub fn sprite_corpus(n: usize, size: usize, channels: usize, seed: u64) -> Result<ImageDataset> {
    check_dims(n, size, channels)?;
    let mut pixels = Vec::with_capacity(n * size * size * channels);
    for k in 0..n {
        let mut rng = image_rng(seed, k);
        let mut canvas = Canvas::new(size, channels);
        let base = rng.random_range(60.0..200.0);
        match rng.random_range(0..3) {
            0 => gradient(&mut canvas, &mut rng, base),
            1 => rectangle(&mut canvas, &mut rng, base),
            _ => noise_texture(&mut canvas, &mut rng, base),
        }
        add_grain(&mut canvas, &mut rng, 4.0);
        pixels.extend(canvas.into_pixels());
    }
    ImageDataset::new(size, size, channels, pixels)
}

/// Sprites with two binary attributes: `[bright background, has rectangle]`.
pub fn labeled_sprites(n: usize, size: usize, channels: usize, seed: u64) -> Result<LabeledDataset> {
    check_dims(n, size, channels)?;
    let mut pixels = Vec::with_capacity(n * size * size * channels);
    let mut attributes = Vec::with_capacity(n);
    for k in 0..n {
        let mut rng = image_rng(seed, k);
        let bright = rng.random_bool(0.5);
        let has_rect = rng.random_bool(0.5);
        let range = if bright { BRIGHT } else { DARK };
        let background = rng.random_range(range.0..range.1);
        let mut canvas = Canvas::new(size, channels);
        if has_rect {
            rectangle(&mut canvas, &mut rng, background);
        } else {
            gradient(&mut canvas, &mut rng, background);
            // keep the gradient inside the attribute's intensity band
            let mid = (range.0 + range.1) / 2.0;
            canvas.map_in_place(|v| mid + (v - mid).clamp(-40.0, 40.0));
        }
        add_grain(&mut canvas, &mut rng, 4.0);
        pixels.extend(canvas.into_pixels());
        attributes.push(vec![u8::from(bright), u8::from(has_rect)]);
    }
    LabeledDataset::new(ImageDataset::new(size, size, channels, pixels)?, attributes)
}
