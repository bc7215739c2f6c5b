//! Declarative U-Net segmentation networks with per-block freeze plans and
//! exposed batch-normalization statistics.

mod checkpoint;
mod unet;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use unet::{FmsInjection, UNet, UNetCache, BN_LAYER_IDS_PER_SPEC};

use crate::error::{Error, Result};
use ndarray::{Array1, Array4};
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

/// Widths of the nine convolution blocks plus class/input channel counts.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub block_filters: Vec<usize>,
    pub num_classes: usize,
    pub input_channels: usize,
}

impl NetworkSpec {
    pub fn new(block_filters: Vec<usize>, num_classes: usize) -> Self {
        NetworkSpec {
            block_filters,
            num_classes,
            input_channels: 1,
        }
    }

    /// The full-scale source-model architecture.
    pub fn source_default(num_classes: usize) -> Self {
        Self::new(vec![64, 128, 256, 512, 1024, 512, 256, 128, 64], num_classes)
    }

    /// The compact desired-model architecture.
    pub fn compact_default(num_classes: usize) -> Self {
        Self::new(vec![16, 32, 64, 128, 256, 128, 64, 32, 16], num_classes)
    }

    pub fn validate(&self) -> Result<()> {
        if self.block_filters.len() != 9 {
            return Err(Error::validation(format!(
                "expected 9 block widths, got {}",
                self.block_filters.len()
            )));
        }
        if self.block_filters.iter().any(|&f| f == 0) {
            return Err(Error::validation("block widths must be positive"));
        }
        // Block i must mirror block 10-i (1-based) so skip concatenations line up.
        for i in 0..4 {
            if self.block_filters[i] != self.block_filters[8 - i] {
                return Err(Error::validation(format!(
                    "non-symmetric widths: block {} = {} but block {} = {}",
                    i + 1,
                    self.block_filters[i],
                    9 - i,
                    self.block_filters[8 - i]
                )));
            }
        }
        if self.num_classes < 2 {
            return Err(Error::validation("need at least 2 classes"));
        }
        if self.input_channels == 0 {
            return Err(Error::validation("input_channels must be positive"));
        }
        Ok(())
    }
}

/// Identifier of an updatable unit of the network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum BlockId {
    /// Convolution blocks 1..=9.
    Conv(u8),
    /// Upsampling blocks 1..=4.
    Up(u8),
    /// The final 1x1 classification convolution.
    Final,
}

impl fmt::Display for BlockId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BlockId::Conv(i) => write!(f, "conv{i}"),
            BlockId::Up(i) => write!(f, "up{i}"),
            BlockId::Final => write!(f, "final"),
        }
    }
}

impl FromStr for BlockId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "final" {
            return Ok(BlockId::Final);
        }
        if let Some(rest) = s.strip_prefix("conv") {
            if let Ok(i) = rest.parse::<u8>() {
                if (1..=9).contains(&i) {
                    return Ok(BlockId::Conv(i));
                }
            }
        }
        if let Some(rest) = s.strip_prefix("up") {
            if let Ok(i) = rest.parse::<u8>() {
                if (1..=4).contains(&i) {
                    return Ok(BlockId::Up(i));
                }
            }
        }
        Err(Error::validation(format!("unknown block id: {s}")))
    }
}

impl BlockId {
    pub fn all() -> Vec<BlockId> {
        let mut v: Vec<BlockId> = (1..=9).map(BlockId::Conv).collect();
        v.extend((1..=4).map(BlockId::Up));
        v.push(BlockId::Final);
        v
    }
}

/// Which blocks receive gradient updates. Frozen blocks also keep their
/// batch-norm running statistics fixed and normalize by them.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FreezePlan {
    trainable: BTreeSet<BlockId>,
}

impl FreezePlan {
    pub fn all_trainable() -> Self {
        FreezePlan {
            trainable: BlockId::all().into_iter().collect(),
        }
    }

    pub fn fully_frozen() -> Self {
        FreezePlan {
            trainable: BTreeSet::new(),
        }
    }

    /// Only the listed blocks are trainable.
    pub fn only(ids: impl IntoIterator<Item = BlockId>) -> Self {
        FreezePlan {
            trainable: ids.into_iter().collect(),
        }
    }

    /// Parse from block-id strings; unknown ids are a validation error.
    pub fn from_names(names: &[&str]) -> Result<Self> {
        let mut trainable = BTreeSet::new();
        for n in names {
            trainable.insert(BlockId::from_str(n)?);
        }
        Ok(FreezePlan { trainable })
    }

    pub fn is_trainable(&self, id: BlockId) -> bool {
        self.trainable.contains(&id)
    }

    pub fn trainable_ids(&self) -> impl Iterator<Item = BlockId> + '_ {
        self.trainable.iter().copied()
    }
}

/// Per-layer channel statistics, batch-measured or running.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerStats {
    pub layer_id: String,
    pub mean: Array1<f32>,
    pub var: Array1<f32>,
}

/// Softmax class probabilities, `(batch, classes, h, w)`.
#[derive(Debug, Clone)]
pub struct PredictionMap {
    pub probs: Array4<f32>,
}

impl PredictionMap {
    pub fn num_classes(&self) -> usize {
        self.probs.dim().1
    }

    /// Check the per-pixel normalization invariant.
    pub fn is_normalized(&self, tol: f32) -> bool {
        let (n, c, h, w) = self.probs.dim();
        for b in 0..n {
            for i in 0..h {
                for j in 0..w {
                    let mut s = 0.0f32;
                    for ci in 0..c {
                        let v = self.probs[(b, ci, i, j)];
                        if !(0.0..=1.0 + tol).contains(&v) {
                            return false;
                        }
                        s += v;
                    }
                    if (s - 1.0).abs() > tol {
                        return false;
                    }
                }
            }
        }
        true
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spec_symmetry_is_enforced() {
        assert!(NetworkSpec::source_default(5).validate().is_ok());
        assert!(NetworkSpec::compact_default(5).validate().is_ok());
        let bad = NetworkSpec::new(vec![64, 128, 256, 512, 1024, 512, 256, 128, 32], 5);
        assert!(bad.validate().is_err());
        let short = NetworkSpec::new(vec![8; 8], 5);
        assert!(short.validate().is_err());
        let one_class = NetworkSpec::new(vec![8; 9], 1);
        assert!(one_class.validate().is_err());
    }

    #[test]
    fn block_ids_round_trip() {
        for id in BlockId::all() {
            assert_eq!(BlockId::from_str(&id.to_string()).unwrap(), id);
        }
        assert!(BlockId::from_str("conv10").is_err());
        assert!(BlockId::from_str("up5").is_err());
        assert!(BlockId::from_str("bogus").is_err());
    }

    #[test]
    fn freeze_plan_from_names_rejects_unknown() {
        let plan = FreezePlan::from_names(&["conv1"]).unwrap();
        assert!(plan.is_trainable(BlockId::Conv(1)));
        assert!(!plan.is_trainable(BlockId::Conv(2)));
        assert!(FreezePlan::from_names(&["conv1", "nope"]).is_err());
    }
}
