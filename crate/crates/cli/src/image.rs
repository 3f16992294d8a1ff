//! Binary PGM/PPM grids.

use mexflow::{DenseArray, Error, Result};

/// Tiles per row for `count` images.
pub fn tiles_per_row(count: usize) -> usize {
    (1..).find(|k| k * k >= count).unwrap_or(1)
}

/// Lays out `x: [n, h, w, c]` row-major on a grid `tiles_per_row(n)` wide
/// and encodes it as P5 (one channel) or P6 (three channels). Values are
/// read as fractions of 256 levels and clamped.
pub fn encode_grid(x: &DenseArray) -> Result<Vec<u8>> {
    let &[n, h, w, c] = x.shape() else {
        return Err(Error::Config(format!(
            "image grid needs [n, h, w, c], got {:?}",
            x.shape()
        )));
    };
    let magic = match c {
        1 => "P5",
        3 => "P6",
        _ => return Err(Error::Config(format!("image grids need 1 or 3 channels, got {c}"))),
    };
    let per_row = tiles_per_row(n);
    let rows = n.div_ceil(per_row).max(1);
    let (gw, gh) = (per_row * w, rows * h);
    let mut pixels = vec![0u8; gw * gh * c];
    for t in 0..n {
        let (ty, tx) = (t / per_row, t % per_row);
        for i in 0..h {
            for j in 0..w {
                for ch in 0..c {
                    let v = x.data()[((t * h + i) * w + j) * c + ch];
                    let level = (v * 256.0).floor().clamp(0.0, 255.0) as u8;
                    pixels[((ty * h + i) * gw + tx * w + j) * c + ch] = level;
                }
            }
        }
    }
    let mut out = format!("{magic}\n{gw} {gh}\n255\n").into_bytes();
    out.extend(pixels);
    Ok(out)
}
