//! Binary PGM (P5) export of attribution maps.
//!
//! Values are quantized linearly over the symmetric range [-M, +M] with
//! M = max |value|, onto 16-bit grayscale: q = round((v + M) / (2M) * 65535).
//! Zero attribution lands mid-gray, the strongest negative at black, the
//! strongest positive at white. Samples are big-endian per the PGM spec.

use igc_core::{Error, Result};
use std::fs;
use std::io::Write;
use std::path::Path;

const MAXVAL: u32 = 65535;

/// Quantize `values` (row-major `height x width`) and write them to `path`.
/// `comment` is embedded as a `#` header line.
pub fn write_pgm(
    path: &Path,
    values: &[f64],
    width: usize,
    height: usize,
    comment: &str,
) -> Result<()> {
    if values.len() != width * height {
        return Err(Error::InvalidArgument(format!(
            "{} values cannot fill a {width}x{height} image",
            values.len()
        )));
    }
    let m = values.iter().fold(0.0f64, |acc, &v| acc.max(v.abs()));
    let mut out = Vec::with_capacity(64 + comment.len() + values.len() * 2);
    out.extend_from_slice(b"P5\n");
    for line in comment.lines() {
        out.extend_from_slice(format!("# {line}\n").as_bytes());
    }
    out.extend_from_slice(format!("{width} {height}\n{MAXVAL}\n").as_bytes());
    for &v in values {
        let q = if m == 0.0 {
            (MAXVAL + 1) / 2
        } else {
            (((v + m) / (2.0 * m)) * MAXVAL as f64).round() as u32
        }
        .min(MAXVAL) as u16;
        out.extend_from_slice(&q.to_be_bytes());
    }
    fs::File::create(path)?.write_all(&out)?;
    Ok(())
}

/// Sum `values` over non-overlapping `block x block` squares. The side
/// lengths must divide evenly; summation preserves additivity of the map.
pub fn block_downscale(
    values: &[f64],
    width: usize,
    height: usize,
    block: usize,
) -> Result<Vec<f64>> {
    if block == 0 || width % block != 0 || height % block != 0 {
        return Err(Error::InvalidArgument(format!(
            "block {block} does not partition a {width}x{height} map"
        )));
    }
    let (ow, oh) = (width / block, height / block);
    let mut out = vec![0.0; ow * oh];
    for oy in 0..oh {
        for ox in 0..ow {
            let mut sum = 0.0;
            for dy in 0..block {
                for dx in 0..block {
                    sum += values[(oy * block + dy) * width + (ox * block + dx)];
                }
            }
            out[oy * ow + ox] = sum;
        }
    }
    Ok(out)
}
