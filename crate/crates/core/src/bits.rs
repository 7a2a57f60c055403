//! Row-packed binary matrix.

/// Binary matrix with each row packed into `u64` words, least significant bit
/// first. Bits past `cols` in the last word of a row are always zero.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BitMatrix {
    rows: usize,
    cols: usize,
    words_per_row: usize,
    data: Vec<u64>,
}

impl BitMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        let words_per_row = cols.div_ceil(64);
        Self {
            rows,
            cols,
            words_per_row,
            data: vec![0; rows * words_per_row],
        }
    }

    /// Builds a matrix from raw row words; stray bits beyond `cols` are masked off.
    pub fn from_row_words(rows: usize, cols: usize, mut data: Vec<u64>) -> Self {
        let words_per_row = cols.div_ceil(64);
        assert_eq!(data.len(), rows * words_per_row, "word count mismatch");
        let tail = cols % 64;
        if tail != 0 {
            let mask = (1u64 << tail) - 1;
            for r in 0..rows {
                data[r * words_per_row + words_per_row - 1] &= mask;
            }
        }
        Self {
            rows,
            cols,
            words_per_row,
            data,
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> bool {
        debug_assert!(r < self.rows && c < self.cols);
        (self.data[r * self.words_per_row + c / 64] >> (c % 64)) & 1 == 1
    }

    pub fn set(&mut self, r: usize, c: usize, value: bool) {
        let w = &mut self.data[r * self.words_per_row + c / 64];
        if value {
            *w |= 1 << (c % 64);
        } else {
            *w &= !(1 << (c % 64));
        }
    }

    #[inline]
    pub fn row_words(&self, r: usize) -> &[u64] {
        &self.data[r * self.words_per_row..(r + 1) * self.words_per_row]
    }

    pub fn count_ones(&self) -> u64 {
        self.data.iter().map(|w| w.count_ones() as u64).sum()
    }

    /// Leading `m` rows.
    pub fn prefix_rows(&self, m: usize) -> Self {
        assert!(m <= self.rows);
        Self {
            rows: m,
            cols: self.cols,
            words_per_row: self.words_per_row,
            data: self.data[..m * self.words_per_row].to_vec(),
        }
    }

    /// Rows picked by index, in the given order.
    pub fn select_rows(&self, idx: &[usize]) -> Self {
        let mut data = Vec::with_capacity(idx.len() * self.words_per_row);
        for &r in idx {
            data.extend_from_slice(self.row_words(r));
        }
        Self {
            rows: idx.len(),
            cols: self.cols,
            words_per_row: self.words_per_row,
            data,
        }
    }

    /// Sum of `x[j]` over the set bits of row `r`, in increasing `j`.
    #[inline]
    pub fn row_masked_sum(&self, r: usize, x: &[f64]) -> f64 {
        let mut acc = 0.0;
        for (k, &word) in self.row_words(r).iter().enumerate() {
            let mut w = word;
            let base = k * 64;
            while w != 0 {
                acc += x[base + w.trailing_zeros() as usize];
                w &= w - 1;
            }
        }
        acc
    }
}
