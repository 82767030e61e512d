use crate::error::{Error, Result};
use crate::tensor::DenseArray;

/// A batch of equally sized sets, stored as a `(batch, n, d)` array.
///
/// Element order inside a set carries no meaning: reordering axis 1 of any
/// entry describes the same batch.
#[derive(Clone, Debug, PartialEq)]
pub struct SetBatch {
    values: DenseArray,
}

impl SetBatch {
    pub fn new(values: DenseArray) -> Result<Self> {
        if values.ndim() != 3 {
            return Err(Error::Shape(format!(
                "a set batch needs shape (batch, n, d), got {:?}",
                values.shape()
            )));
        }
        Ok(Self { values })
    }

    /// Stacks `(n, d)` arrays into one batch.
    pub fn from_sets(sets: &[DenseArray]) -> Result<Self> {
        let first = sets
            .first()
            .ok_or_else(|| Error::InvalidArgument("empty list of sets".into()))?;
        if first.ndim() != 2 {
            return Err(Error::Shape(format!("a set needs shape (n, d), got {:?}", first.shape())));
        }
        let mut data = Vec::with_capacity(first.len() * sets.len());
        for s in sets {
            if s.shape() != first.shape() {
                return Err(Error::Shape(format!(
                    "sets in a batch must share (n, d): {:?} vs {:?}",
                    first.shape(),
                    s.shape()
                )));
            }
            data.extend_from_slice(s.data());
        }
        let (n, d) = (first.shape()[0], first.shape()[1]);
        Self::new(DenseArray::from_parts(vec![sets.len(), n, d], data))
    }

    pub fn batch(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn n(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn d(&self) -> usize {
        self.values.shape()[2]
    }

    pub fn shape(&self) -> [usize; 3] {
        [self.batch(), self.n(), self.d()]
    }

    pub fn values(&self) -> &DenseArray {
        &self.values
    }

    pub fn into_values(self) -> DenseArray {
        self.values
    }

    /// Entry `b` as an `(n, d)` array.
    pub fn set(&self, b: usize) -> DenseArray {
        let len = self.n() * self.d();
        DenseArray::from_parts(
            vec![self.n(), self.d()],
            self.values.data()[b * len..(b + 1) * len].to_vec(),
        )
    }

    /// Entries `start..start+len` as a new batch.
    pub fn slice(&self, start: usize, len: usize) -> Result<Self> {
        Self::new(self.values.slice_leading(start, len)?)
    }

    /// Entries at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        let len = self.n() * self.d();
        let mut data = Vec::with_capacity(indices.len() * len);
        for &b in indices {
            if b >= self.batch() {
                return Err(Error::InvalidArgument(format!("set index {b} out of range")));
            }
            data.extend_from_slice(&self.values.data()[b * len..(b + 1) * len]);
        }
        Self::new(DenseArray::from_parts(vec![indices.len(), self.n(), self.d()], data))
    }

    /// Applies the same element permutation to every entry.
    pub fn permute(&self, perm: &[usize]) -> Result<Self> {
        Self::new(self.values.permute_axis1(perm)?)
    }

    /// Applies a separate permutation to each entry.
    pub fn permute_each(&self, perms: &[Vec<usize>]) -> Result<Self> {
        if perms.len() != self.batch() {
            return Err(Error::InvalidArgument(format!(
                "{} permutations for a batch of {}",
                perms.len(),
                self.batch()
            )));
        }
        let parts = perms
            .iter()
            .enumerate()
            .map(|(b, p)| {
                let one = self.values.slice_leading(b, 1)?;
                one.permute_axis1(p)
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(DenseArray::stack_leading(&parts)?)
    }
}
