use crate::error::{Error, Result};
use crate::meter::ByteSize;
use crate::tensor::{Real, Tensor};

/// Node features split channel-wise into `C` equal groups.
///
/// `mask_seed` records which shared dropout pattern produced the values, so
/// that an inverse pass run with a different pattern is refused.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupedFeatures<T> {
    pub groups: Vec<Tensor<T>>,
    pub mask_seed: Option<u64>,
}

impl<T: Real> ByteSize for GroupedFeatures<T> {
    fn byte_size(&self) -> usize {
        self.groups.iter().map(|g| g.byte_size()).sum()
    }
}

impl<T: Real> GroupedFeatures<T> {
    pub fn new(groups: Vec<Tensor<T>>) -> Result<Self> {
        let first = groups
            .first()
            .ok_or_else(|| Error::Input("grouped features need at least one group".into()))?;
        if groups.iter().any(|g| g.shape() != first.shape()) {
            return Err(Error::Input("all groups must share one shape".into()));
        }
        Ok(Self {
            groups,
            mask_seed: None,
        })
    }

    pub fn num_groups(&self) -> usize {
        self.groups.len()
    }

    pub fn num_nodes(&self) -> usize {
        self.groups[0].rows()
    }

    pub fn group_width(&self) -> usize {
        self.groups[0].cols()
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            groups: self.groups.iter().map(|g| Tensor::zeros(g.rows(), g.cols())).collect(),
            mask_seed: None,
        }
    }

    /// Inverse of [`group_split`].
    pub fn concat(&self) -> Tensor<T> {
        let parts: Vec<&Tensor<T>> = self.groups.iter().collect();
        Tensor::hcat(&parts).expect("groups share a row count")
    }

    pub fn max_abs_diff(&self, other: &Self) -> Result<T> {
        if self.groups.len() != other.groups.len() {
            return Err(Error::Input("group counts differ".into()));
        }
        let mut m = T::zero();
        for (a, b) in self.groups.iter().zip(&other.groups) {
            m = m.max(a.max_abs_diff(b)?);
        }
        Ok(m)
    }
}

/// Group `i` receives channels `[i·D/C, (i+1)·D/C)`.
pub fn group_split<T: Real>(x: &Tensor<T>, c: usize) -> Result<GroupedFeatures<T>> {
    let d = x.cols();
    if c == 0 || d % c != 0 {
        return Err(Error::Input(format!("{d} channels cannot be split into {c} equal groups")));
    }
    let w = d / c;
    GroupedFeatures::new((0..c).map(|i| x.slice_cols(i * w, (i + 1) * w)).collect())
}
