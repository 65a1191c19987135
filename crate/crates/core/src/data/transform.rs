use serde::{Deserialize, Serialize};

use super::Skeleton;
use crate::error::{NasError, Result};

/// One skeleton sequence, coordinates laid out `C × T × V × M`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SkeletonSample {
    pub channels: usize,
    pub frames: usize,
    pub joints: usize,
    pub bodies: usize,
    pub coords: Vec<f32>,
    pub label: usize,
}

impl SkeletonSample {
    fn index(&self, c: usize, t: usize, v: usize, m: usize) -> usize {
        ((c * self.frames + t) * self.joints + v) * self.bodies + m
    }

    pub fn at(&self, c: usize, t: usize, v: usize, m: usize) -> f32 {
        self.coords[self.index(c, t, v, m)]
    }
}

/// Repeats the sequence cyclically until it has `target_frames` frames
/// (truncating longer ones) and zero-pads the body axis to `max_bodies`.
/// Bodies beyond `max_bodies` are dropped.
pub fn preprocess(sample: &SkeletonSample, target_frames: usize, max_bodies: usize) -> Result<SkeletonSample> {
    if sample.frames == 0 || sample.coords.is_empty() {
        return Err(NasError::Data("cannot preprocess an empty sample".into()));
    }
    if target_frames == 0 || max_bodies == 0 {
        return Err(NasError::argument("target frames and bodies must be positive"));
    }
    let expected = sample.channels * sample.frames * sample.joints * sample.bodies;
    if sample.coords.len() != expected {
        return Err(NasError::structural(format!("{} coordinates for a {expected}-value sample", sample.coords.len())));
    }
    let mut out = SkeletonSample {
        frames: target_frames,
        bodies: max_bodies,
        coords: vec![0.0; sample.channels * target_frames * sample.joints * max_bodies],
        ..sample.clone()
    };
    for c in 0..sample.channels {
        for t in 0..target_frames {
            for v in 0..sample.joints {
                for m in 0..sample.bodies.min(max_bodies) {
                    let i = out.index(c, t, v, m);
                    out.coords[i] = sample.at(c, t % sample.frames, v, m);
                }
            }
        }
    }
    Ok(out)
}

/// Second-order features: each joint's coordinates minus its parent's. The
/// root's bone is zero.
pub fn bone_transform(sample: &SkeletonSample, skeleton: &Skeleton) -> Result<SkeletonSample> {
    if skeleton.joints != sample.joints {
        return Err(NasError::structural(format!(
            "skeleton has {} joints, sample has {}",
            skeleton.joints, sample.joints
        )));
    }
    let parents = skeleton.parents()?;
    let mut out = sample.clone();
    for c in 0..sample.channels {
        for t in 0..sample.frames {
            for (v, parent) in parents.iter().enumerate() {
                for m in 0..sample.bodies {
                    let i = out.index(c, t, v, m);
                    out.coords[i] = match parent {
                        Some(p) => sample.at(c, t, v, m) - sample.at(c, t, *p, m),
                        None => 0.0,
                    };
                }
            }
        }
    }
    Ok(out)
}
