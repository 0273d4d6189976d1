//! The IDX binary format: big-endian magic `0x00000803` (u8 images, three
//! dimensions) or `0x00000801` (u8 labels, one dimension), then the dimension
//! sizes as big-endian u32, then the raw bytes.

use std::io::{Cursor, Read};
use std::path::Path;

use byteorder::{BigEndian, ReadBytesExt};

use super::{Dataset, ImageShape, Split};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const IMAGES_MAGIC: u32 = 0x0000_0803;
const LABELS_MAGIC: u32 = 0x0000_0801;

fn malformed(path: &Path, reason: impl Into<String>) -> Error {
    Error::Format { path: path.to_path_buf(), reason: reason.into() }
}

fn header(bytes: &[u8], path: &Path, magic: u32, dims: usize) -> Result<(Vec<usize>, usize)> {
    let mut cur = Cursor::new(bytes);
    let found = cur.read_u32::<BigEndian>().map_err(|_| malformed(path, "file too short for an IDX header"))?;
    if found != magic {
        return Err(malformed(path, format!("bad magic 0x{found:08x}, expected 0x{magic:08x}")));
    }
    let sizes = (0..dims)
        .map(|_| cur.read_u32::<BigEndian>().map(|v| v as usize))
        .collect::<std::io::Result<Vec<_>>>()
        .map_err(|_| malformed(path, "truncated dimension header"))?;
    let body: usize = sizes.iter().product();
    let offset = 4 + 4 * dims;
    if bytes.len() - offset != body {
        return Err(malformed(path, format!("expected {body} data bytes, found {}", bytes.len() - offset)));
    }
    Ok((sizes, offset))
}

/// Pixels scaled to `[0, 1]` by `/ 255`, one row per image.
pub fn read_idx_images(bytes: &[u8], path: &Path) -> Result<(Tensor, ImageShape)> {
    let (sizes, offset) = header(bytes, path, IMAGES_MAGIC, 3)?;
    let shape = ImageShape { channels: 1, height: sizes[1], width: sizes[2] };
    let data = bytes[offset..].iter().map(|&b| f64::from(b) / 255.0).collect();
    Ok((Tensor::matrix(sizes[0], shape.len(), data)?, shape))
}

pub fn read_idx_labels(bytes: &[u8], path: &Path) -> Result<Vec<usize>> {
    let (_, offset) = header(bytes, path, LABELS_MAGIC, 1)?;
    Ok(bytes[offset..].iter().map(|&b| b as usize).collect())
}

fn read_all(path: &Path) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut buf)?;
    Ok(buf)
}

/// Loads an image/label file pair; all examples are tagged train and the class
/// count is one more than the largest label.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let (inputs, shape) = read_idx_images(&read_all(images_path)?, images_path)?;
    let labels = read_idx_labels(&read_all(labels_path)?, labels_path)?;
    if labels.len() != inputs.rows() {
        return Err(malformed(
            labels_path,
            format!("{} labels for {} images", labels.len(), inputs.rows()),
        ));
    }
    if labels.is_empty() {
        return Err(malformed(images_path, "no examples"));
    }
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    let n = labels.len();
    Dataset::new(inputs, labels, vec![Split::Train; n], classes, Some(shape))
}
