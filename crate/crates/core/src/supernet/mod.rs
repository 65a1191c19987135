//! The searchable network and everything needed to turn a search result into
//! a fixed architecture.
//!
//! A [`Network`] is a stack of GCN blocks followed by global pooling and a
//! linear classifier. In supernet form every block carries all eight
//! candidate modules and is driven by a [`Mixing`]: either the continuous
//! weighted sum of module adjacencies, or one sampled module per layer. In
//! fixed form (see [`finalize_network`]) each block sums the modules of a
//! [`DerivedArchitecture`] without weights, optionally plus a learnable
//! complementary graph.

mod arch;
mod network;

use serde::{Deserialize, Serialize};

use crate::error::{NasError, Result};

pub use arch::{derive_architecture, positive_part, ArchParams, DerivedArchitecture, ALPHA_MAGIC, DEFAULT_THRESHOLD};
pub use network::{finalize_network, fold_bodies, ForwardCtx, Mixing, Network, Topology};

/// Shape of the network and of the data it consumes.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SupernetConfig {
    /// Coordinate channels per joint (2 or 3).
    pub in_channels: usize,
    /// Output channels of each block; its length is the block count.
    pub channels: Vec<usize>,
    /// Temporal stride of each block.
    pub strides: Vec<usize>,
    pub joints: usize,
    pub frames: usize,
    pub bodies: usize,
    pub classes: usize,
}

impl SupernetConfig {
    /// Four small blocks for CPU-scale experiments on the toy skeleton.
    pub fn desk(in_channels: usize, joints: usize, classes: usize) -> Self {
        SupernetConfig {
            in_channels,
            channels: vec![16, 16, 32, 32],
            strides: vec![1, 1, 2, 1],
            joints,
            frames: 32,
            bodies: 1,
            classes,
        }
    }

    /// Ten blocks sized for 25-joint, two-person, 300-frame sequences.
    pub fn ntu(classes: usize) -> Self {
        SupernetConfig {
            in_channels: 3,
            channels: vec![64, 64, 64, 64, 128, 128, 128, 256, 256, 256],
            strides: vec![1, 1, 1, 1, 2, 1, 1, 2, 1, 1],
            joints: 25,
            frames: 300,
            bodies: 2,
            classes,
        }
    }

    pub fn blocks(&self) -> usize {
        self.channels.len()
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(NasError::Config(msg));
        if self.channels.is_empty() {
            return fail("the channel plan is empty".into());
        }
        if self.channels.len() != self.strides.len() {
            return fail(format!("{} channel entries but {} strides", self.channels.len(), self.strides.len()));
        }
        if self.channels.contains(&0) || self.strides.contains(&0) {
            return fail("channels and strides must be positive".into());
        }
        if self.in_channels == 0 || self.joints == 0 || self.frames == 0 || self.bodies == 0 {
            return fail("input dimensions must be positive".into());
        }
        if self.classes < 2 {
            return fail(format!("need at least 2 classes, got {}", self.classes));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_are_valid() {
        let ntu = SupernetConfig::ntu(60);
        ntu.validate().unwrap();
        assert_eq!(ntu.blocks(), 10);
        assert_eq!(ntu.strides.iter().enumerate().filter(|(_, &s)| s == 2).map(|(i, _)| i + 1).collect::<Vec<_>>(), [5, 8]);
        SupernetConfig::desk(2, 5, 3).validate().unwrap();
    }

    #[test]
    fn mismatched_plan_is_a_config_error() {
        let mut c = SupernetConfig::desk(2, 5, 3);
        c.strides.pop();
        assert_eq!(c.validate().unwrap_err().category().as_str(), "config");
    }
}
