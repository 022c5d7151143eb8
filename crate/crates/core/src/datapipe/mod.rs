//! Data ingestion and preprocessing.
//!
//! Pixel data travels as 8-bit [`ImageDataset`]s. Before reaching a flow it is
//! dequantized with uniform jitter and mapped through
//! `logit(alpha + (1 - alpha) * x / 256)`; the log-determinant of that map is
//! carried along so likelihoods and bits/dim are reported in pixel space.

mod dataset;
mod preprocess;
mod sprites;
mod toy;

pub use dataset::{ImageDataset, LabeledDataset, Split, NVPD_MAGIC, NVPD_VERSION};
pub use preprocess::{
    bits_per_dim, dequantize, dequantize_center, horizontal_flip, inverse_logit, logit_transform,
    pixels_from_continuous, random_flips, LOGIT_ALPHA,
};
pub use sprites::{labeled_sprites, sprite_corpus};
pub use toy::{read_points_csv, write_points_csv, Toy2D, Toy2DKind};
