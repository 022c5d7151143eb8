use serde::{Deserialize, Serialize};

use crate::ndtensor::Tensor;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskKind {
    Checkerboard,
    Channelwise,
}

/// Binary gate `b`: entries equal to 1 pass through a coupling unchanged and
/// condition the update of the entries equal to 0.
#[derive(Debug, Clone, PartialEq)]
pub struct Mask {
    pub kind: MaskKind,
    pub parity: u8,
    /// `[H, W, C]` for checkerboard masks, `[C]` for channel masks.
    pub pattern: Tensor,
}

/// Spatial checkerboard: 1 where `i + j + parity` is odd, repeated over channels.
pub fn make_checkerboard_mask(height: usize, width: usize, channels: usize, parity: u8) -> Result<Mask> {
    if height == 0 || width == 0 || channels == 0 {
        return Err(Error::Config(format!(
            "checkerboard mask needs positive extents, got {height}x{width}x{channels}"
        )));
    }
    let p = usize::from(parity & 1);
    let pattern = Tensor::from_fn(&[height, width, channels], |idx| {
        let i = idx / (width * channels);
        let j = (idx / channels) % width;
        ((i + j + p) % 2) as f64
    });
    Ok(Mask {
        kind: MaskKind::Checkerboard,
        parity: parity & 1,
        pattern,
    })
}

/// First half of the channels set when `parity == 0`, second half otherwise.
pub fn make_channel_mask(channels: usize, parity: u8) -> Result<Mask> {
    if channels < 2 || channels % 2 != 0 {
        return Err(Error::Config(format!(
            "channel mask needs an even channel count >= 2, got {channels}"
        )));
    }
    let half = channels / 2;
    let first = if parity & 1 == 0 { 1.0 } else { 0.0 };
    let pattern = Tensor::from_fn(&[channels], |c| if c < half { first } else { 1.0 - first });
    Ok(Mask {
        kind: MaskKind::Channelwise,
        parity: parity & 1,
        pattern,
    })
}

impl Mask {
    /// Build a mask of `kind` for an `[H, W, C]` data shape.
    pub fn for_shape(kind: MaskKind, parity: u8, h: usize, w: usize, c: usize) -> Result<Self> {
        match kind {
            MaskKind::Checkerboard => make_checkerboard_mask(h, w, c, parity),
            MaskKind::Channelwise => make_channel_mask(c, parity),
        }
    }

    /// A mask with an arbitrary `[H, W, C]` pattern of zeros and ones.
    pub fn from_pattern(kind: MaskKind, pattern: Tensor) -> Result<Self> {
        if pattern.data().iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::Input("mask entries must be 0 or 1".into()));
        }
        Ok(Self {
            kind,
            parity: 0,
            pattern,
        })
    }

    /// Pattern expanded to a full `[N, H, W, C]` batch.
    pub fn batch_pattern(&self, shape: &[usize]) -> Result<Tensor> {
        let per_sample: usize = shape[1..].iter().product();
        let pat = self.pattern.data();
        let pixel_repeat = match self.kind {
            MaskKind::Channelwise if self.pattern.rank() == 1 => {
                if shape.last() != self.pattern.shape().last() {
                    return Err(shape_error(shape, self.pattern.shape()));
                }
                true
            }
            _ => {
                if shape[1..] != *self.pattern.shape() {
                    return Err(shape_error(shape, self.pattern.shape()));
                }
                false
            }
        };
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|i| {
                if pixel_repeat {
                    pat[i % pat.len()]
                } else {
                    pat[i % per_sample]
                }
            })
            .collect();
        Ok(Tensor::new(shape.to_vec(), data)?)
    }
}

fn shape_error(data: &[usize], mask: &[usize]) -> Error {
    Error::Input(format!("mask shape {mask:?} does not gate data of shape {data:?}"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn checkerboard_2x2() {
        let m = make_checkerboard_mask(2, 2, 1, 0).unwrap();
        assert_eq!(m.pattern.data(), &[0.0, 1.0, 1.0, 0.0]);
    }

    #[test]
    fn checkerboard_single_cell_is_zero() {
        let m = make_checkerboard_mask(1, 1, 1, 0).unwrap();
        assert_eq!(m.pattern.data(), &[0.0]);
    }

    #[test]
    fn checkerboard_parities_complement() {
        let a = make_checkerboard_mask(4, 4, 1, 0).unwrap();
        let b = make_checkerboard_mask(4, 4, 1, 1).unwrap();
        assert_eq!(a.pattern.sum(), 8.0);
        assert_eq!(b.pattern.sum(), 8.0);
        // enumerate all 16 coordinates
        for i in 0..4 {
            for j in 0..4 {
                let k = i * 4 + j;
                assert_eq!(a.pattern.data()[k] + b.pattern.data()[k], 1.0);
                assert_eq!(a.pattern.data()[k], ((i + j) % 2) as f64);
            }
        }
    }

    #[test]
    fn checkerboard_repeats_over_channels() {
        let m = make_checkerboard_mask(2, 2, 3, 1).unwrap();
        assert_eq!(&m.pattern.data()[..3], &[1.0, 1.0, 1.0]);
        assert_eq!(&m.pattern.data()[3..6], &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn channel_masks() {
        assert_eq!(make_channel_mask(4, 0).unwrap().pattern.data(), &[1.0, 1.0, 0.0, 0.0]);
        assert_eq!(make_channel_mask(2, 1).unwrap().pattern.data(), &[0.0, 1.0]);
        for c in [2, 4, 6, 8, 16] {
            let a = make_channel_mask(c, 0).unwrap();
            let b = make_channel_mask(c, 1).unwrap();
            let both = a.pattern.zip_map(&b.pattern, |x, y| x + y).unwrap();
            assert!(both.data().iter().all(|&v| v == 1.0));
        }
    }

    #[test]
    fn odd_channel_count_rejected() {
        assert!(make_channel_mask(3, 0).is_err());
        assert!(make_channel_mask(1, 0).is_err());
    }

    #[test]
    fn batch_pattern_tiles() {
        let m = make_checkerboard_mask(2, 2, 1, 0).unwrap();
        let t = m.batch_pattern(&[2, 2, 2, 1]).unwrap();
        assert_eq!(t.data(), &[0.0, 1.0, 1.0, 0.0, 0.0, 1.0, 1.0, 0.0]);
        let c = make_channel_mask(2, 0).unwrap();
        let t = c.batch_pattern(&[1, 1, 2, 2]).unwrap();
        assert_eq!(t.data(), &[1.0, 0.0, 1.0, 0.0]);
        assert!(m.batch_pattern(&[1, 4, 4, 1]).is_err());
    }
}
