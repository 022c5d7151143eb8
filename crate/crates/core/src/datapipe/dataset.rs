//! The NVPD container: 8-bit HWC images behind a fixed little-endian header.
//!
//! ```text
//! offset  size  field
//!      0     4  magic "NVPD"
//!      4     4  u32 version (1)
//!      8     4  u32 image count
//!     12     2  u16 height
//!     14     2  u16 width
//!     16     2  u16 channels
//!     18     *  count * H * W * C raw bytes, image-major, row-major HWC
//! ```

use std::fs;
use std::path::Path;

use crate::ndtensor::Tensor;
use crate::{Error, Result};

pub const NVPD_MAGIC: &[u8; 4] = b"NVPD";
pub const NVPD_VERSION: u32 = 1;
const HEADER_LEN: usize = 18;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Split {
    #[default]
    Train,
    Valid,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImageDataset {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub split: Split,
    pixels: Vec<u8>,
}

impl ImageDataset {
    pub fn new(height: usize, width: usize, channels: usize, pixels: Vec<u8>) -> Result<Self> {
        let per = height * width * channels;
        if per == 0 || pixels.len() % per != 0 {
            return Err(Error::Input(format!(
                "{} bytes do not hold whole {height}x{width}x{channels} images",
                pixels.len()
            )));
        }
        if height > u16::MAX as usize || width > u16::MAX as usize || channels > u16::MAX as usize {
            return Err(Error::Input("image extents must fit in u16".into()));
        }
        Ok(Self {
            height,
            width,
            channels,
            split: Split::Train,
            pixels,
        })
    }

    pub fn with_split(mut self, split: Split) -> Self {
        self.split = split;
        self
    }

    pub fn len(&self) -> usize {
        self.pixels.len() / self.image_len()
    }

    pub fn is_empty(&self) -> bool {
        self.pixels.is_empty()
    }

    pub fn image_len(&self) -> usize {
        self.height * self.width * self.channels
    }

    pub fn image(&self, i: usize) -> &[u8] {
        let k = self.image_len();
        &self.pixels[i * k..(i + 1) * k]
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    /// Raw pixel values of the selected images as `[N, H, W, C]`.
    pub fn batch(&self, indices: &[usize]) -> Tensor {
        let mut data = Vec::with_capacity(indices.len() * self.image_len());
        for &i in indices {
            data.extend(self.image(i).iter().map(|&p| f64::from(p)));
        }
        Tensor::new(vec![indices.len(), self.height, self.width, self.channels], data)
            .expect("dataset batch shape")
    }

    /// The images `range`, as a new dataset.
    pub fn subset(&self, range: std::ops::Range<usize>) -> Self {
        let k = self.image_len();
        Self {
            pixels: self.pixels[range.start * k..range.end * k].to_vec(),
            ..self.clone()
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + self.pixels.len());
        out.extend_from_slice(NVPD_MAGIC);
        out.extend_from_slice(&NVPD_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.len() as u32).to_le_bytes());
        out.extend_from_slice(&(self.height as u16).to_le_bytes());
        out.extend_from_slice(&(self.width as u16).to_le_bytes());
        out.extend_from_slice(&(self.channels as u16).to_le_bytes());
        out.extend_from_slice(&self.pixels);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let fail = |offset: usize, reason: String| Err(Error::Format { offset, reason });
        if bytes.len() < 4 || &bytes[..4] != NVPD_MAGIC {
            return fail(0, "missing NVPD magic".into());
        }
        if bytes.len() < HEADER_LEN {
            return fail(bytes.len(), format!("header truncated ({} of {HEADER_LEN} bytes)", bytes.len()));
        }
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
        let u16_at = |o: usize| u16::from_le_bytes(bytes[o..o + 2].try_into().unwrap()) as usize;
        let version = u32_at(4);
        if version != NVPD_VERSION {
            return fail(4, format!("unsupported version {version}, expected {NVPD_VERSION}"));
        }
        let count = u32_at(8) as usize;
        let (h, w, c) = (u16_at(12), u16_at(14), u16_at(16));
        if h == 0 || w == 0 || c == 0 {
            return fail(12, format!("zero image extent {h}x{w}x{c}"));
        }
        let expected = count * h * w * c;
        let payload = &bytes[HEADER_LEN..];
        if payload.len() < expected {
            return fail(
                bytes.len(),
                format!("payload truncated: {} of {expected} bytes", payload.len()),
            );
        }
        if payload.len() > expected {
            return fail(
                HEADER_LEN + expected,
                format!("{} trailing bytes after payload", payload.len() - expected),
            );
        }
        Self::new(h, w, c, payload.to_vec())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

/// Images paired with binary attribute vectors of a fixed length.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabeledDataset {
    pub images: ImageDataset,
    attributes: Vec<Vec<u8>>,
}

impl LabeledDataset {
    pub fn new(images: ImageDataset, attributes: Vec<Vec<u8>>) -> Result<Self> {
        if attributes.len() != images.len() {
            return Err(Error::Input(format!(
                "{} attribute rows for {} images",
                attributes.len(),
                images.len()
            )));
        }
        let k = attributes.first().map_or(0, Vec::len);
        if attributes.iter().any(|a| a.len() != k || a.iter().any(|&v| v > 1)) {
            return Err(Error::Input(format!("attribute rows must all be {k} values in {{0,1}}")));
        }
        Ok(Self { images, attributes })
    }

    pub fn num_attributes(&self) -> usize {
        self.attributes.first().map_or(0, Vec::len)
    }

    pub fn attributes(&self, i: usize) -> &[u8] {
        &self.attributes[i]
    }

    /// Attribute rows of the selected images as `[N, k]`.
    pub fn attribute_batch(&self, indices: &[usize]) -> Tensor {
        let k = self.num_attributes();
        let data = indices
            .iter()
            .flat_map(|&i| self.attributes[i].iter().map(|&v| f64::from(v)))
            .collect();
        Tensor::new(vec![indices.len(), k], data).expect("attribute batch shape")
    }

    pub fn subset(&self, range: std::ops::Range<usize>) -> Self {
        Self {
            images: self.images.subset(range.clone()),
            attributes: self.attributes[range].to_vec(),
        }
    }

    /// Attributes as headerless CSV, one image per row.
    pub fn save_attributes(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = csv::WriterBuilder::new().has_headers(false).from_path(path)?;
        for row in &self.attributes {
            w.write_record(row.iter().map(|v| v.to_string()))?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(images: impl AsRef<Path>, attributes: impl AsRef<Path>) -> Result<Self> {
        let images = ImageDataset::load(images)?;
        let mut r = csv::ReaderBuilder::new().has_headers(false).from_path(attributes)?;
        let mut rows = Vec::new();
        for rec in r.records() {
            let rec = rec?;
            let row = rec
                .iter()
                .map(|f| f.trim().parse::<u8>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| Error::Input(format!("attribute row {}: {e}", rows.len())))?;
            rows.push(row);
        }
        Self::new(images, rows)
    }
}
