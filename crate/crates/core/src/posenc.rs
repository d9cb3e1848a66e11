//! Fixed 2-D sinusoidal positional encodings.

use crate::error::{Error, Result};
use crate::ops::transpose_data;
use crate::tensor::Tensor;

/// Encoding table `[c × (h·w)]`, token index `y * w + x`.
///
/// Channels `0..c/2` encode the column and `c/2..c` the row. Within each half,
/// channel `2i` is `sin(pos / 10000^(2i / (c/2)))` and `2i + 1` the matching
/// cosine.
pub fn positional_encoding(h: usize, w: usize, c: usize) -> Result<Tensor> {
    if c == 0 || c % 4 != 0 {
        return Err(Error::Config(format!("positional encoding width {c} must be a positive multiple of 4")));
    }
    if h == 0 || w == 0 {
        return Err(Error::Config(format!("positional encoding grid {h}x{w} must be positive")));
    }
    let half = c / 2;
    let n = h * w;
    let mut out = vec![0.0; c * n];
    for y in 0..h {
        for x in 0..w {
            let t = y * w + x;
            for (offset, pos) in [(0, x), (half, y)] {
                for i in 0..half / 2 {
                    let freq = 10000f64.powf(-((2 * i) as f64) / half as f64);
                    let a = pos as f64 * freq;
                    out[(offset + 2 * i) * n + t] = a.sin();
                    out[(offset + 2 * i + 1) * n + t] = a.cos();
                }
            }
        }
    }
    Tensor::new(out, &[c, n])
}

/// Token-major `[(h·w) × c]` copy of [`positional_encoding`].
pub fn positional_tokens(h: usize, w: usize, c: usize) -> Result<Tensor> {
    let pe = positional_encoding(h, w, c)?;
    Tensor::new(transpose_data(pe.data(), c, h * w), &[h * w, c])
}
