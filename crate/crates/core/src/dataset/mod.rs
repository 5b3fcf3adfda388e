//! Image and mask ingestion, synthetic data, manifests and the cube cache.

mod ccub;
mod manifest;
mod synthetic;

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

pub use ccub::{decode_ccub, encode_ccub, read_ccub, write_ccub, CCUB_HEADER_LEN, CCUB_MAGIC, CCUB_VERSION};
pub use manifest::{load_instances, Manifest, ManifestRecord, Sample};
pub use synthetic::{generate_sample, generate_synthetic, ShapeKind, SyntheticSpec};

use crate::error::{ensure, Error, Result};
use crate::grid::BinaryMask;
use crate::tensor::Tensor;

/// Mask pixels brighter than this luma are salient.
pub const LUMA_THRESHOLD: u8 = 127;

/// 8-bit interleaved RGB raster.
#[derive(Clone, PartialEq, Eq)]
pub struct RgbImage {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl RgbImage {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        ensure!(height > 0 && width > 0, InvalidArgument, "image must be non-empty, got {height}x{width}");
        ensure!(
            data.len() == height * width * 3,
            ShapeMismatch,
            "{height}x{width} RGB image needs {} bytes, got {}",
            height * width * 3,
            data.len()
        );
        Ok(Self { height, width, data })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn pixel(&self, row: usize, col: usize) -> [u8; 3] {
        let i = (row * self.width + col) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn hflip(&self) -> Self {
        let mut data = Vec::with_capacity(self.data.len());
        for row in self.data.chunks(self.width * 3) {
            for px in row.chunks(3).rev() {
                data.extend_from_slice(px);
            }
        }
        Self { data, ..*self }
    }
}

impl std::fmt::Debug for RgbImage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "RgbImage({}x{})", self.height, self.width)
    }
}

fn luma(r: u8, g: u8, b: u8) -> u8 {
    ((299 * r as u32 + 587 * g as u32 + 114 * b as u32 + 500) / 1000) as u8
}

/// Decodes any 8-bit PNG into (height, width, channels, samples).
fn read_png(path: &Path) -> Result<(usize, usize, usize, Vec<u8>)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut decoder = png::Decoder::new(BufReader::new(file));
    decoder.set_transformations(png::Transformations::EXPAND);
    let fmt = |e: png::DecodingError| Error::Format(format!("{}: {e}", path.display()));
    let mut reader = decoder.read_info().map_err(fmt)?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| Error::Format(format!("{}: image too large", path.display())))?;
    let mut buf = vec![0; size];
    let info = reader.next_frame(&mut buf).map_err(fmt)?;
    if info.bit_depth != png::BitDepth::Eight {
        return Err(Error::Format(format!(
            "{}: unsupported bit depth {:?}, expected 8",
            path.display(),
            info.bit_depth
        )));
    }
    let channels = info.color_type.samples();
    let (h, w) = (info.height as usize, info.width as usize);
    let mut samples = Vec::with_capacity(h * w * channels);
    for row in buf.chunks(info.line_size).take(h) {
        samples.extend_from_slice(&row[..w * channels]);
    }
    Ok((h, w, channels, samples))
}

fn write_png(path: &Path, height: usize, width: usize, color: png::ColorType, data: &[u8]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut encoder = png::Encoder::new(BufWriter::new(file), width as u32, height as u32);
    encoder.set_color(color);
    encoder.set_depth(png::BitDepth::Eight);
    let fmt = |e: png::EncodingError| match e {
        png::EncodingError::IoError(io) => Error::io(path, io),
        other => Error::Format(format!("{}: {other}", path.display())),
    };
    let mut writer = encoder.write_header().map_err(fmt)?;
    writer.write_image_data(data).map_err(fmt)?;
    writer.finish().map_err(fmt)
}

fn to_rgb(channels: usize, samples: &[u8]) -> Vec<u8> {
    match channels {
        1 => samples.iter().flat_map(|&v| [v, v, v]).collect(),
        2 => samples.chunks(2).flat_map(|p| [p[0], p[0], p[0]]).collect(),
        3 => samples.to_vec(),
        _ => samples.chunks(4).flat_map(|p| [p[0], p[1], p[2]]).collect(),
    }
}

pub fn load_image(path: impl AsRef<Path>) -> Result<RgbImage> {
    let (h, w, channels, samples) = read_png(path.as_ref())?;
    RgbImage::new(h, w, to_rgb(channels, &samples))
}

pub fn save_image(image: &RgbImage, path: impl AsRef<Path>) -> Result<()> {
    write_png(path.as_ref(), image.height, image.width, png::ColorType::Rgb, &image.data)
}

/// Loads a grayscale or colour PNG; a pixel is salient iff its luma exceeds 127.
pub fn load_mask(path: impl AsRef<Path>) -> Result<BinaryMask> {
    let (h, w, channels, samples) = read_png(path.as_ref())?;
    let data = to_rgb(channels, &samples)
        .chunks(3)
        .map(|p| luma(p[0], p[1], p[2]) > LUMA_THRESHOLD)
        .collect();
    BinaryMask::new(h, w, data)
}

/// Luma plane of any 8-bit PNG as `(height, width, values)`.
pub fn load_gray(path: impl AsRef<Path>) -> Result<(usize, usize, Vec<u8>)> {
    let (h, w, channels, samples) = read_png(path.as_ref())?;
    let luma = to_rgb(channels, &samples).chunks(3).map(|p| luma(p[0], p[1], p[2])).collect();
    Ok((h, w, luma))
}

/// Writes an 8-bit grayscale image.
pub fn save_gray(height: usize, width: usize, values: &[u8], path: impl AsRef<Path>) -> Result<()> {
    ensure!(
        values.len() == height * width,
        ShapeMismatch,
        "{height}x{width} image needs {} values, got {}",
        height * width,
        values.len()
    );
    write_png(path.as_ref(), height, width, png::ColorType::Grayscale, values)
}

/// Writes a mask as 8-bit grayscale with values 0 and 255.
pub fn save_mask(mask: &BinaryMask, path: impl AsRef<Path>) -> Result<()> {
    let data: Vec<u8> = mask.data().iter().map(|&s| if s { 255 } else { 0 }).collect();
    write_png(path.as_ref(), mask.height(), mask.width(), png::ColorType::Grayscale, &data)
}

/// Channel-major `[1, 3, H, W]` tensor with values scaled to [-1, 1].
pub fn image_to_tensor(image: &RgbImage) -> Tensor {
    let (h, w) = (image.height, image.width);
    Tensor::from_fn(vec![1, 3, h, w], |i| {
        let c = i / (h * w);
        let p = i % (h * w);
        image.data[p * 3 + c] as f64 / 127.5 - 1.0
    })
}

/// Stacks equally sized images into `[N, 3, H, W]`.
pub fn images_to_batch(images: &[&RgbImage]) -> Result<Tensor> {
    ensure!(!images.is_empty(), InvalidArgument, "empty image batch");
    let (h, w) = (images[0].height, images[0].width);
    let mut data = Vec::with_capacity(images.len() * 3 * h * w);
    for img in images {
        ensure!(
            img.height == h && img.width == w,
            ShapeMismatch,
            "batch mixes {h}x{w} and {}x{} images",
            img.height,
            img.width
        );
        data.extend(image_to_tensor(img).into_data());
    }
    Tensor::new(vec![images.len(), 3, h, w], data)
}
