//! PNG image grids. Grey for one channel, RGB for three.

use std::path::Path;

use image::{ExtendedColorType, ImageReader};
use nvp_core::{Error, Result};

const GAP: usize = 1;

fn image_err(e: image::ImageError) -> Error {
    Error::Input(format!("image codec: {e}"))
}

/// Tile `images` (each `h * w * c` bytes, HWC) row-major into `cols` columns
/// separated by one-pixel black gaps. Returns the raw canvas and its extent.
pub fn tile(images: &[Vec<u8>], h: usize, w: usize, c: usize, cols: usize) -> (Vec<u8>, usize, usize) {
    let cols = cols.min(images.len()).max(1);
    let rows = images.len().div_ceil(cols);
    let width = cols * w + (cols - 1) * GAP;
    let height = rows * h + rows.saturating_sub(1) * GAP;
    let mut canvas = vec![0u8; width * height * c];
    for (k, img) in images.iter().enumerate() {
        let (r, col) = (k / cols, k % cols);
        let (y0, x0) = (r * (h + GAP), col * (w + GAP));
        for i in 0..h {
            let dst = ((y0 + i) * width + x0) * c;
            canvas[dst..dst + w * c].copy_from_slice(&img[i * w * c..(i + 1) * w * c]);
        }
    }
    (canvas, width, height)
}

/// Write a grid and verify that decoding the file gives back the same pixels.
pub fn write_grid(path: &Path, images: &[Vec<u8>], h: usize, w: usize, c: usize, cols: usize) -> Result<()> {
    let color = match c {
        1 => ExtendedColorType::L8,
        3 => ExtendedColorType::Rgb8,
        other => {
            return Err(Error::Config(format!(
                "PNG grids support 1 or 3 channels, model has {other}"
            )))
        }
    };
    if images.is_empty() {
        return Err(Error::Input("no images to write".into()));
    }
    let (canvas, width, height) = tile(images, h, w, c, cols);
    image::save_buffer(path, &canvas, width as u32, height as u32, color).map_err(image_err)?;
    let back = ImageReader::open(path)?.decode().map_err(image_err)?;
    let raw = if c == 1 { back.into_luma8().into_raw() } else { back.into_rgb8().into_raw() };
    if raw != canvas {
        return Err(Error::Input(format!("{} did not decode to the written pixels", path.display())));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tiling_places_images() {
        let imgs = vec![vec![1u8; 4], vec![2u8; 4], vec![3u8; 4]];
        let (canvas, w, h) = tile(&imgs, 2, 2, 1, 2);
        assert_eq!((w, h), (5, 5));
        assert_eq!(canvas[0], 1);
        assert_eq!(canvas[3], 2);
        assert_eq!(canvas[2], 0);
        assert_eq!(canvas[3 * 5], 3);
        assert_eq!(canvas[3 * 5 + 3], 0);
    }
}
