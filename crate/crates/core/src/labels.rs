//! Integer class-id fields.

use std::collections::BTreeSet;

use crate::error::{Error, Result};

/// Id of pixels that carry no label and are skipped by losses and metrics.
pub const IGNORE: u16 = u16::MAX;

/// `H x W` class-id field, row-major.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct LabelMap {
    height: usize,
    width: usize,
    data: Vec<u16>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, data: Vec<u16>) -> Result<Self> {
        if height == 0 || width == 0 || data.len() != height * width {
            return Err(Error::shape(
                "label_map",
                format!("{height}x{width} with {} entries", data.len()),
            ));
        }
        Ok(LabelMap { height, width, data })
    }

    pub fn filled(height: usize, width: usize, id: u16) -> Self {
        assert!(height > 0 && width > 0, "label map extents must be >= 1");
        LabelMap {
            height,
            width,
            data: vec![id; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[u16] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [u16] {
        &mut self.data
    }

    pub fn get(&self, row: usize, col: usize) -> u16 {
        self.data[row * self.width + col]
    }

    pub fn set(&mut self, row: usize, col: usize, id: u16) {
        self.data[row * self.width + col] = id;
    }

    /// Distinct non-ignore ids, ascending.
    pub fn classes(&self) -> BTreeSet<u16> {
        self.data.iter().copied().filter(|&v| v != IGNORE).collect()
    }

    pub fn count(&self, id: u16) -> usize {
        self.data.iter().filter(|&&v| v == id).count()
    }

    /// Row-major pixel indices holding `id`.
    pub fn pixels_of(&self, id: u16) -> Vec<usize> {
        (0..self.data.len()).filter(|&i| self.data[i] == id).collect()
    }

    /// Reduce by `factor` in both directions, taking the most frequent
    /// non-ignore id in each block (lowest id on ties, ignore if the block
    /// has no labels).
    pub fn downsample_mode(&self, factor: usize) -> Result<LabelMap> {
        if factor == 0 || !self.height.is_multiple_of(factor) || !self.width.is_multiple_of(factor) {
            return Err(Error::shape(
                "downsample_mode",
                format!("{}x{} by {factor}", self.height, self.width),
            ));
        }
        let (h, w) = (self.height / factor, self.width / factor);
        let mut out = Vec::with_capacity(h * w);
        let mut block = Vec::with_capacity(factor * factor);
        for r in 0..h {
            for c in 0..w {
                block.clear();
                for dr in 0..factor {
                    for dc in 0..factor {
                        let v = self.get(r * factor + dr, c * factor + dc);
                        if v != IGNORE {
                            block.push(v);
                        }
                    }
                }
                block.sort_unstable();
                let mut best = IGNORE;
                let mut best_n = 0;
                let mut i = 0;
                while i < block.len() {
                    let mut j = i;
                    while j < block.len() && block[j] == block[i] {
                        j += 1;
                    }
                    if j - i > best_n {
                        best_n = j - i;
                        best = block[i];
                    }
                    i = j;
                }
                out.push(best);
            }
        }
        LabelMap::new(h, w, out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mode_downsample() {
        let m = LabelMap::new(2, 4, vec![1, 1, 3, 3, 2, 1, IGNORE, IGNORE]).unwrap();
        let d = m.downsample_mode(2).unwrap();
        assert_eq!(d.data(), &[1, 3]);
        let tie = LabelMap::new(2, 2, vec![5, 2, 2, 5]).unwrap();
        assert_eq!(tie.downsample_mode(2).unwrap().data(), &[2]);
        let none = LabelMap::filled(2, 2, IGNORE);
        assert_eq!(none.downsample_mode(2).unwrap().data(), &[IGNORE]);
        assert!(m.downsample_mode(3).is_err());
    }

    #[test]
    fn rejects_bad_extents() {
        assert!(LabelMap::new(2, 2, vec![0; 3]).is_err());
        assert!(LabelMap::new(0, 2, vec![]).is_err());
    }
}
