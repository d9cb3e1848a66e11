//! Uncompressed COCO run-length encoding: alternating 0/1 run lengths over
//! the column-major pixel order, starting with a (possibly empty) 0-run.

use serde::{Deserialize, Serialize};

use super::Bitmap;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RleMask {
    /// `[height, width]`.
    pub size: [usize; 2],
    pub counts: Vec<u64>,
}

impl RleMask {
    pub fn height(&self) -> usize {
        self.size[0]
    }

    pub fn width(&self) -> usize {
        self.size[1]
    }

    pub fn validate(&self) -> Result<()> {
        let total: u64 = self.counts.iter().sum();
        let area = (self.height() * self.width()) as u64;
        if total != area {
            return Err(Error::Format(format!(
                "RLE counts sum to {total}, mask {}x{} has {area} pixels",
                self.height(),
                self.width()
            )));
        }
        Ok(())
    }

    /// Number of set pixels.
    pub fn area(&self) -> u64 {
        self.counts.iter().skip(1).step_by(2).sum()
    }
}

pub fn rle_encode(bitmap: &Bitmap) -> RleMask {
    let (h, w) = (bitmap.height, bitmap.width);
    let mut counts = Vec::new();
    let mut current = false;
    let mut run = 0u64;
    for x in 0..w {
        for y in 0..h {
            let v = bitmap.get(y, x);
            if v != current {
                counts.push(run);
                run = 0;
                current = v;
            }
            run += 1;
        }
    }
    counts.push(run);
    RleMask { size: [h, w], counts }
}

pub fn rle_decode(r: &RleMask) -> Result<Bitmap> {
    r.validate()?;
    let (h, w) = (r.height(), r.width());
    let mut out = Bitmap::zeros(h, w);
    let mut pos = 0usize;
    let mut value = false;
    for &c in &r.counts {
        if value {
            for p in pos..pos + c as usize {
                out.set(p % h, p / h, true);
            }
        }
        pos += c as usize;
        value = !value;
    }
    Ok(out)
}

/// `|a ∧ b|` and `|a ∨ b|` straight from the runs.
pub fn rle_intersection_union(a: &RleMask, b: &RleMask) -> Result<(u64, u64)> {
    if a.size != b.size {
        return Err(Error::Input(format!("RLE sizes differ: {:?} vs {:?}", a.size, b.size)));
    }
    a.validate()?;
    b.validate()?;
    let (mut ia, mut ib) = (0usize, 0usize);
    let (mut ra, mut rb) = (a.counts.first().copied().unwrap_or(0), b.counts.first().copied().unwrap_or(0));
    let mut inter = 0u64;
    let mut uni = 0u64;
    loop {
        while ra == 0 && ia < a.counts.len() {
            ia += 1;
            ra = a.counts.get(ia).copied().unwrap_or(0);
        }
        while rb == 0 && ib < b.counts.len() {
            ib += 1;
            rb = b.counts.get(ib).copied().unwrap_or(0);
        }
        if ia >= a.counts.len() || ib >= b.counts.len() {
            break;
        }
        let step = ra.min(rb);
        let (va, vb) = (ia % 2 == 1, ib % 2 == 1);
        if va && vb {
            inter += step;
        }
        if va || vb {
            uni += step;
        }
        ra -= step;
        rb -= step;
    }
    Ok((inter, uni))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn all_zero_and_all_one() {
        assert_eq!(rle_encode(&Bitmap::zeros(3, 3)).counts, vec![9]);
        let ones = Bitmap::from_fn(2, 2, |_, _| true);
        assert_eq!(rle_encode(&ones).counts, vec![0, 4]);
    }

    #[test]
    fn column_major_order() {
        // [[1, 0], [1, 1]] column-major: 1 1 0 1
        let b = Bitmap::from_fn(2, 2, |y, x| !(y == 0 && x == 1));
        let r = rle_encode(&b);
        assert_eq!(r.counts, vec![0, 2, 1, 1]);
        assert_eq!(r.area(), 3);
        assert_eq!(rle_decode(&r).unwrap(), b);
    }

    #[test]
    fn bad_counts_are_format_errors() {
        let r = RleMask {
            size: [2, 2],
            counts: vec![1, 2],
        };
        assert!(matches!(rle_decode(&r), Err(Error::Format(_))));
    }

    #[test]
    fn intersection_union_small_case() {
        let a = Bitmap::from_fn(2, 2, |y, x| y == 0 && x == 0 || y == 1 && x == 0);
        let b = Bitmap::from_fn(2, 2, |y, x| y == 0 && x == 0 || y == 0 && x == 1);
        let (i, u) = rle_intersection_union(&rle_encode(&a), &rle_encode(&b)).unwrap();
        assert_eq!((i, u), (1, 3));
    }

    fn bitmap_strategy() -> impl Strategy<Value = Bitmap> {
        (1usize..12, 1usize..12).prop_flat_map(|(h, w)| {
            proptest::collection::vec(any::<bool>(), h * w).prop_map(move |bits| Bitmap {
                height: h,
                width: w,
                data: bits.into_iter().map(u8::from).collect(),
            })
        })
    }

    proptest! {
        #[test]
        fn encode_decode_roundtrip(b in bitmap_strategy()) {
            let r = rle_encode(&b);
            prop_assert_eq!(r.counts.iter().sum::<u64>() as usize, b.height * b.width);
            prop_assert_eq!(rle_decode(&r).unwrap(), b);
        }

        #[test]
        fn run_iou_matches_pixels(a in bitmap_strategy(), seed in any::<u64>()) {
            let b = Bitmap::from_fn(a.height, a.width, |y, x| (seed >> ((y * 7 + x * 3) % 64)) & 1 == 1);
            let (i, u) = rle_intersection_union(&rle_encode(&a), &rle_encode(&b)).unwrap();
            prop_assert_eq!(i as usize, a.and(&b).unwrap().area());
            prop_assert_eq!(u as usize, a.or(&b).unwrap().area());
        }
    }
}
