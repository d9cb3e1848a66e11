use crate::error::{Error, Result};

/// Binary mask, row-major, one byte per pixel holding 0 or 1.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Bitmap {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

impl Bitmap {
    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![0; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                data.push(u8::from(f(y, x)));
            }
        }
        Self { height, width, data }
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.data[y * self.width + x] != 0
    }

    pub fn set(&mut self, y: usize, x: usize, v: bool) {
        self.data[y * self.width + x] = u8::from(v);
    }

    pub fn area(&self) -> usize {
        self.data.iter().filter(|v| **v != 0).count()
    }

    pub fn is_empty(&self) -> bool {
        self.data.iter().all(|v| *v == 0)
    }

    fn check_same(&self, other: &Bitmap) -> Result<()> {
        if (self.height, self.width) != (other.height, other.width) {
            return Err(Error::Input(format!(
                "mask sizes differ: {}x{} vs {}x{}",
                self.height, self.width, other.height, other.width
            )));
        }
        Ok(())
    }

    fn zip(&self, other: &Bitmap, f: impl Fn(bool, bool) -> bool) -> Result<Bitmap> {
        self.check_same(other)?;
        Ok(Bitmap {
            height: self.height,
            width: self.width,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| u8::from(f(a != 0, b != 0)))
                .collect(),
        })
    }

    pub fn and(&self, other: &Bitmap) -> Result<Bitmap> {
        self.zip(other, |a, b| a && b)
    }

    pub fn or(&self, other: &Bitmap) -> Result<Bitmap> {
        self.zip(other, |a, b| a || b)
    }

    pub fn and_not(&self, other: &Bitmap) -> Result<Bitmap> {
        self.zip(other, |a, b| a && !b)
    }

    /// Number of set pixels of `self` that are not set in `other`.
    pub fn count_outside(&self, other: &Bitmap) -> Result<usize> {
        Ok(self.and_not(other)?.area())
    }

    pub fn is_subset_of(&self, other: &Bitmap) -> Result<bool> {
        Ok(self.count_outside(other)? == 0)
    }

    /// Tight `[x0, y0, x1, y1)` pixel extent, `None` when empty.
    pub fn extent(&self) -> Option<[usize; 4]> {
        let mut ext: Option<[usize; 4]> = None;
        for y in 0..self.height {
            for x in 0..self.width {
                if self.get(y, x) {
                    ext = Some(match ext {
                        None => [x, y, x + 1, y + 1],
                        Some([x0, y0, x1, y1]) => [x0.min(x), y0.min(y), x1.max(x + 1), y1.max(y + 1)],
                    });
                }
            }
        }
        ext
    }

    /// Zero everything outside the pixel rectangle `[x0, x1) × [y0, y1)`.
    pub fn clip_to(&self, x0: usize, y0: usize, x1: usize, y1: usize) -> Bitmap {
        Bitmap::from_fn(self.height, self.width, |y, x| {
            self.get(y, x) && x >= x0 && x < x1 && y >= y0 && y < y1
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn set_algebra() {
        let a = Bitmap::from_fn(3, 3, |y, _| y < 2);
        let b = Bitmap::from_fn(3, 3, |_, x| x == 0);
        assert_eq!(a.and(&b).unwrap().area(), 2);
        assert_eq!(a.or(&b).unwrap().area(), 7);
        assert_eq!(a.and_not(&b).unwrap().area(), 4);
        assert!(a.and(&b).unwrap().is_subset_of(&a).unwrap());
        assert!(a.and(&Bitmap::zeros(2, 3)).is_err());
        assert_eq!(b.extent(), Some([0, 0, 1, 3]));
        assert_eq!(Bitmap::zeros(2, 2).extent(), None);
        assert_eq!(a.clip_to(1, 1, 3, 3).area(), 2);
    }
}
