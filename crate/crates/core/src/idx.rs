//! IDX binary format: big-endian magic + dimension sizes, u8 payload.
//! Images use magic 2051 with dims n x rows x cols; labels use 2049 with a
//! single dim. Pixels are scaled to [0, 1] on load.

use crate::data::{Dataset, Targets};
use crate::error::{Error, Result};
use std::fs;
use std::io::Write;
use std::path::Path;

const IMAGE_MAGIC: u32 = 2051; // 0x00000803
const LABEL_MAGIC: u32 = 2049; // 0x00000801

fn read_u32(bytes: &[u8], offset: usize, section: &str) -> Result<u32> {
    let end = offset + 4;
    if bytes.len() < end {
        return Err(Error::Parse {
            section: section.to_string(),
            offset: Some(offset as u64),
            message: format!("file truncated: need {end} bytes, have {}", bytes.len()),
        });
    }
    Ok(u32::from_be_bytes(bytes[offset..end].try_into().unwrap()))
}

/// Load an images/labels pair of IDX files into a categorical dataset.
/// Pixel bytes are divided by 255.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let img = fs::read(images_path)?;
    let lab = fs::read(labels_path)?;

    let magic = read_u32(&img, 0, "image header")?;
    if magic != IMAGE_MAGIC {
        return Err(Error::Parse {
            section: "image header".into(),
            offset: Some(0),
            message: format!("bad magic {magic:#010x}, expected {IMAGE_MAGIC:#010x}"),
        });
    }
    let n = read_u32(&img, 4, "image header")? as usize;
    let rows = read_u32(&img, 8, "image header")? as usize;
    let cols = read_u32(&img, 12, "image header")? as usize;
    let expected = 16 + n * rows * cols;
    if img.len() != expected {
        return Err(Error::Parse {
            section: "image payload".into(),
            offset: Some(img.len().min(expected) as u64),
            message: format!("payload is {} bytes, header implies {expected}", img.len()),
        });
    }

    let lmagic = read_u32(&lab, 0, "label header")?;
    if lmagic != LABEL_MAGIC {
        return Err(Error::Parse {
            section: "label header".into(),
            offset: Some(0),
            message: format!("bad magic {lmagic:#010x}, expected {LABEL_MAGIC:#010x}"),
        });
    }
    let ln = read_u32(&lab, 4, "label header")? as usize;
    if lab.len() != 8 + ln {
        return Err(Error::Parse {
            section: "label payload".into(),
            offset: Some(lab.len().min(8 + ln) as u64),
            message: format!("payload is {} bytes, header implies {}", lab.len(), 8 + ln),
        });
    }
    if ln != n {
        return Err(Error::Parse {
            section: "label header".into(),
            offset: Some(4),
            message: format!("{ln} labels for {n} images"),
        });
    }

    let inputs: Vec<f64> = img[16..].iter().map(|&b| b as f64 / 255.0).collect();
    let labels: Vec<u32> = lab[8..].iter().map(|&b| b as u32).collect();
    let classes = labels.iter().copied().max().unwrap_or(0) as usize + 1;
    Dataset::with_dims(
        inputs,
        rows * cols,
        Targets::Labels { labels, classes },
        Some(vec![rows, cols]),
    )
}

/// Write a categorical image dataset back to an IDX pair. Inputs are assumed
/// to be in [0, 1] and are rescaled to bytes; a dataset loaded by `load_idx`
/// round-trips bit-exactly.
pub fn write_idx(data: &Dataset, images_path: &Path, labels_path: &Path) -> Result<()> {
    let dims = data.input_dims().ok_or_else(|| {
        Error::InvalidArgument("dataset has no image dimensions to write".into())
    })?;
    if dims.len() != 2 {
        return Err(Error::InvalidArgument(format!(
            "IDX image export needs 2-D samples, got {dims:?}"
        )));
    }
    let labels = match data.targets() {
        Targets::Labels { labels, .. } => labels,
        Targets::Scalar(_) => {
            return Err(Error::InvalidArgument(
                "IDX export needs categorical targets".into(),
            ))
        }
    };
    let n = data.len();
    let mut img = Vec::with_capacity(16 + n * data.dim());
    img.extend_from_slice(&IMAGE_MAGIC.to_be_bytes());
    img.extend_from_slice(&(n as u32).to_be_bytes());
    img.extend_from_slice(&(dims[0] as u32).to_be_bytes());
    img.extend_from_slice(&(dims[1] as u32).to_be_bytes());
    for i in 0..n {
        img.extend(data.input_row(i).iter().map(|&v| (v * 255.0).round() as u8));
    }

    let mut lab = Vec::with_capacity(8 + n);
    lab.extend_from_slice(&LABEL_MAGIC.to_be_bytes());
    lab.extend_from_slice(&(n as u32).to_be_bytes());
    lab.extend(labels.iter().map(|&l| l as u8));

    fs::File::create(images_path)?.write_all(&img)?;
    fs::File::create(labels_path)?.write_all(&lab)?;
    Ok(())
}
