use std::fmt;

/// Boolean attend-permission matrix: `allowed(q, k)` means query `q` may read key `k`.
#[derive(Clone, PartialEq, Eq)]
pub struct AttentionMask {
    rows: usize,
    cols: usize,
    allow: Vec<bool>,
}

impl fmt::Debug for AttentionMask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "AttentionMask {}x{}", self.rows, self.cols)?;
        if self.rows <= 32 && self.cols <= 64 {
            for q in 0..self.rows {
                let line: String = self
                    .row(q)
                    .iter()
                    .map(|&a| if a { '#' } else { '.' })
                    .collect();
                writeln!(f, "{line}")?;
            }
        }
        Ok(())
    }
}

impl AttentionMask {
    pub fn empty(rows: usize, cols: usize) -> Self {
        Self { rows, cols, allow: vec![false; rows * cols] }
    }

    pub fn full(rows: usize, cols: usize) -> Self {
        Self { rows, cols, allow: vec![true; rows * cols] }
    }

    pub fn from_fn(rows: usize, cols: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut m = Self::empty(rows, cols);
        for q in 0..rows {
            for k in 0..cols {
                m.allow[q * cols + k] = f(q, k);
            }
        }
        m
    }

    /// Lower-triangular (inclusive) square mask.
    pub fn causal(n: usize) -> Self {
        Self::from_fn(n, n, |q, k| k <= q)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    /// Sequence length for square masks.
    pub fn len(&self) -> usize {
        self.rows
    }

    pub fn is_empty(&self) -> bool {
        self.rows == 0
    }

    #[inline]
    pub fn allowed(&self, q: usize, k: usize) -> bool {
        self.allow[q * self.cols + k]
    }

    pub fn set(&mut self, q: usize, k: usize, value: bool) {
        self.allow[q * self.cols + k] = value;
    }

    pub fn row(&self, q: usize) -> &[bool] {
        &self.allow[q * self.cols..(q + 1) * self.cols]
    }

    pub fn row_count(&self, q: usize) -> usize {
        self.row(q).iter().filter(|&&a| a).count()
    }

    pub fn count(&self) -> usize {
        self.allow.iter().filter(|&&a| a).count()
    }

    pub fn and(&self, other: &AttentionMask) -> AttentionMask {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        let allow = self.allow.iter().zip(&other.allow).map(|(a, b)| *a && *b).collect();
        AttentionMask { rows: self.rows, cols: self.cols, allow }
    }

    pub fn or(&self, other: &AttentionMask) -> AttentionMask {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        let allow = self.allow.iter().zip(&other.allow).map(|(a, b)| *a || *b).collect();
        AttentionMask { rows: self.rows, cols: self.cols, allow }
    }

    /// True when every permitted pair of `self` is permitted in `other`.
    pub fn is_subset_of(&self, other: &AttentionMask) -> bool {
        self.allow.iter().zip(&other.allow).all(|(a, b)| !*a || *b)
    }

    pub fn first_empty_row(&self) -> Option<usize> {
        (0..self.rows).find(|&q| !self.row(q).iter().any(|&a| a))
    }
}
