use crate::error::{Error, Result};
use crate::kernels::DropoutMask;
use crate::meter::ByteSize;

/// The single dropout pattern of one optimisation step, reused by every
/// layer and every group.
#[derive(Debug, Clone, PartialEq)]
pub struct SharedDropoutState {
    mask: DropoutMask,
    step_seed: u64,
}

impl ByteSize for SharedDropoutState {
    fn byte_size(&self) -> usize {
        self.mask.byte_size()
    }
}

pub fn make_shared_mask(n: usize, width: usize, drop_prob: f64, seed: u64) -> Result<SharedDropoutState> {
    Ok(SharedDropoutState {
        mask: DropoutMask::sample(n, width, drop_prob, seed)?,
        step_seed: seed,
    })
}

impl SharedDropoutState {
    pub fn from_mask(mask: DropoutMask, step_seed: u64) -> Self {
        Self { mask, step_seed }
    }

    pub fn mask(&self) -> &DropoutMask {
        &self.mask
    }

    pub fn step_seed(&self) -> u64 {
        self.step_seed
    }

    /// Contract check before the pattern is applied to `n × width` operands.
    pub fn check_shape(&self, n: usize, width: usize) -> Result<()> {
        if self.mask.shape() != (n, width) {
            return Err(Error::Contract(format!(
                "shared dropout pattern is {:?} but the operands are {n}x{width}; \
                 a new pattern is needed for each subgraph",
                self.mask.shape()
            )));
        }
        Ok(())
    }
}

/// Validates an optional pattern for `n × width` operands and returns its mask.
pub(crate) fn mask_for(
    drop: Option<&SharedDropoutState>,
    n: usize,
    width: usize,
) -> Result<Option<&DropoutMask>> {
    match drop {
        Some(d) => {
            d.check_shape(n, width)?;
            Ok(Some(d.mask()))
        }
        None => Ok(None),
    }
}
