use crate::error::{Error, Result};

use super::tensor::Tensor;

/// Variable-length sequences stored back-to-back in one row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Packed {
    pub tokens: Tensor,
    /// `(start row, length)` of each sequence.
    pub segs: Vec<(usize, usize)>,
}

impl Packed {
    pub fn from_seqs(seqs: &[Tensor]) -> Result<Self> {
        let width = seqs.first().map_or(0, Tensor::cols);
        let mut data = Vec::new();
        let mut segs = Vec::with_capacity(seqs.len());
        let mut rows = 0;
        for s in seqs {
            if s.rows() == 0 {
                return Err(Error::EmptySequence("packed sequence without rows".into()));
            }
            if s.cols() != width {
                return Err(Error::Dimension(format!("sequence width {} != {width}", s.cols())));
            }
            segs.push((rows, s.rows()));
            rows += s.rows();
            data.extend_from_slice(s.data());
        }
        Ok(Self {
            tokens: Tensor::matrix(rows, width, data)?,
            segs,
        })
    }

    pub fn len(&self) -> usize {
        self.segs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.segs.is_empty()
    }

    pub fn width(&self) -> usize {
        self.tokens.cols()
    }

    /// Dense copy of sequence `i`.
    pub fn seq(&self, i: usize) -> Tensor {
        let (start, len) = self.segs[i];
        let c = self.width();
        Tensor::matrix(len, c, self.tokens.data()[start * c..(start + len) * c].to_vec()).expect("in range")
    }

    /// Row `r` of sequence `i`.
    pub fn row(&self, i: usize, r: usize) -> &[f64] {
        self.tokens.row(self.segs[i].0 + r)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pack_and_unpack() {
        let a = Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = Tensor::matrix(1, 2, vec![5.0, 6.0]).unwrap();
        let p = Packed::from_seqs(&[a.clone(), b.clone()]).unwrap();
        assert_eq!(p.segs, vec![(0, 2), (2, 1)]);
        assert_eq!(p.seq(0), a);
        assert_eq!(p.seq(1), b);
        assert_eq!(p.row(1, 0), &[5.0, 6.0]);
    }

    #[test]
    fn width_mismatch_is_rejected() {
        let a = Tensor::matrix(1, 2, vec![1.0, 2.0]).unwrap();
        let b = Tensor::matrix(1, 3, vec![1.0, 2.0, 3.0]).unwrap();
        assert!(matches!(Packed::from_seqs(&[a, b]), Err(Error::Dimension(_))));
    }
}
