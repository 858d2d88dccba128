//! Attention visibility masks.
//!
//! A `VisMask` says, for each query row, which key columns may be attended
//! (`true` = visible). Masks are plain data shared by the batch builder and
//! the attention kernels.

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VisMask {
    rows: usize,
    cols: usize,
    bits: Vec<bool>,
}

impl VisMask {
    pub fn new(rows: usize, cols: usize) -> Self {
        VisMask {
            rows,
            cols,
            bits: vec![false; rows * cols],
        }
    }

    /// Square mask with every cell visible.
    pub fn full(n: usize) -> Self {
        VisMask {
            rows: n,
            cols: n,
            bits: vec![true; n * n],
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn visible(&self, row: usize, col: usize) -> bool {
        self.bits[row * self.cols + col]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, v: bool) {
        self.bits[row * self.cols + col] = v;
    }

    /// Lower-triangular causal mask (each row sees itself and earlier cols).
    pub fn causal(n: usize) -> Self {
        let mut m = VisMask::new(n, n);
        for i in 0..n {
            for j in 0..=i {
                m.set(i, j, true);
            }
        }
        m
    }

    /// Rectangular mask where every query row sees the same set of columns.
    pub fn broadcast_cols(rows: usize, visible_cols: &[bool]) -> Self {
        let mut m = VisMask::new(rows, visible_cols.len());
        for i in 0..rows {
            for (j, &v) in visible_cols.iter().enumerate() {
                m.set(i, j, v);
            }
        }
        m
    }

    /// 0/1 text grid for debugging, one row per line.
    pub fn grid_string(&self) -> String {
        let mut s = String::with_capacity(self.rows * (self.cols + 1));
        for i in 0..self.rows {
            for j in 0..self.cols {
                s.push(if self.visible(i, j) { '1' } else { '0' });
            }
            s.push('\n');
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn causal_is_lower_triangular() {
        let m = VisMask::causal(4);
        for i in 0..4 {
            for j in 0..4 {
                assert_eq!(m.visible(i, j), j <= i);
            }
        }
    }

    #[test]
    fn grid_string_renders_rows() {
        let mut m = VisMask::new(2, 3);
        m.set(0, 0, true);
        m.set(1, 2, true);
        assert_eq!(m.grid_string(), "100\n001\n");
    }
}
