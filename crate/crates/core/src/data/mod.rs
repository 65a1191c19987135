//! Skeleton datasets: the in-memory container, its binary file format,
//! synthetic generation, preprocessing and the training and evaluation
//! loops.
//!
//! A dataset file is a little-endian binary container
//!
//! ```text
//! "SKEL0001" | C T V M classes count (u32 each)
//! count × C×T×V×M f32 coordinates | count u32 labels | count u8 split tags
//! ```
//!
//! with the skeleton stored next to it as a plain-text edge list
//! (`<file>.edges`, one `parent child` pair per line, root in a
//! `# root <index>` comment).

mod synthetic;
mod train;
mod transform;

use std::collections::VecDeque;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{NasError, Result};
use crate::graph::{build_skeleton_adjacency, parse_edge_list, AdjacencyMatrix, SkeletonPreset};
use crate::tensor::Tensor;

pub use synthetic::{generate_synthetic, probe_accuracy, time_averaged_features, time_product_features, GeneratorConfig, MotionPattern};
pub use train::{
    evaluate, fused_scores, predict_logits, score_fusion, topk_accuracy, train_epoch, EvalReport, TrainConfig, TrainMixing,
};
pub use transform::{bone_transform, preprocess, SkeletonSample};

pub const DATASET_MAGIC: &[u8; 8] = b"SKEL0001";

/// A rooted skeleton tree.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Skeleton {
    pub joints: usize,
    pub edges: Vec<(usize, usize)>,
    pub root: usize,
}

impl Skeleton {
    pub fn from_preset(preset: SkeletonPreset) -> Self {
        Skeleton { joints: preset.joints(), edges: preset.edges(), root: preset.root() }
    }

    pub fn adjacency(&self) -> Result<AdjacencyMatrix> {
        build_skeleton_adjacency(&self.edges, self.joints)
    }

    /// Parent of every joint when the tree hangs from the root; `None` for
    /// the root. Fails unless the edges form a spanning tree.
    pub fn parents(&self) -> Result<Vec<Option<usize>>> {
        let n = self.joints;
        if self.root >= n {
            return Err(NasError::structural(format!("root {} out of range for {n} joints", self.root)));
        }
        if self.edges.len() + 1 != n {
            return Err(NasError::structural(format!("{} edges cannot form a tree on {n} joints", self.edges.len())));
        }
        let mut nbrs = vec![Vec::new(); n];
        for &(a, b) in &self.edges {
            if a >= n || b >= n || a == b {
                return Err(NasError::structural(format!("invalid edge ({a}, {b})")));
            }
            nbrs[a].push(b);
            nbrs[b].push(a);
        }
        let mut parent = vec![None; n];
        let mut seen = vec![false; n];
        seen[self.root] = true;
        let mut queue = VecDeque::from([self.root]);
        while let Some(u) = queue.pop_front() {
            for &w in &nbrs[u] {
                if !seen[w] {
                    seen[w] = true;
                    parent[w] = Some(u);
                    queue.push_back(w);
                }
            }
        }
        if seen.iter().any(|s| !s) {
            return Err(NasError::structural("skeleton edges do not connect every joint"));
        }
        Ok(parent)
    }

    /// Edge list text with the root recorded in a leading comment.
    pub fn to_text(&self) -> String {
        let mut s = format!("# root {}\n", self.root);
        for (a, b) in &self.edges {
            s.push_str(&format!("{a} {b}\n"));
        }
        s
    }

    pub fn from_text(text: &str, joints: usize) -> Result<Self> {
        let edges = parse_edge_list(text)?;
        let root = text
            .lines()
            .filter_map(|l| l.trim().strip_prefix('#'))
            .filter_map(|l| l.trim().strip_prefix("root"))
            .map(|r| r.trim().parse::<usize>().map_err(|e| NasError::Parse(format!("root line: {e}"))))
            .next()
            .transpose()?
            .unwrap_or(0);
        Ok(Skeleton { joints, edges, root })
    }
}

/// Which partition a sample belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    fn tag(self) -> u8 {
        match self {
            Split::Train => 0,
            Split::Val => 1,
            Split::Test => 2,
        }
    }

    fn from_tag(t: u8) -> Result<Self> {
        match t {
            0 => Ok(Split::Train),
            1 => Ok(Split::Val),
            2 => Ok(Split::Test),
            other => Err(NasError::Parse(format!("unknown split tag {other}"))),
        }
    }
}

/// Equal-length skeleton sequences with labels and a split assignment.
///
/// Coordinates are stored per sample as `C × T × V × M`, the layout the
/// network consumes.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub channels: usize,
    pub frames: usize,
    pub joints: usize,
    pub bodies: usize,
    pub classes: usize,
    pub skeleton: Skeleton,
    coords: Vec<f32>,
    labels: Vec<usize>,
    splits: Vec<Split>,
}

impl Dataset {
    pub fn new(
        shape: [usize; 4],
        classes: usize,
        skeleton: Skeleton,
        coords: Vec<f32>,
        labels: Vec<usize>,
        splits: Vec<Split>,
    ) -> Result<Self> {
        let [channels, frames, joints, bodies] = shape;
        let per = channels * frames * joints * bodies;
        if per == 0 {
            return Err(NasError::Data("dataset dimensions must be positive".into()));
        }
        if labels.len() != splits.len() || coords.len() != per * labels.len() {
            return Err(NasError::structural(format!(
                "{} coordinates, {} labels and {} split tags do not describe one dataset",
                coords.len(),
                labels.len(),
                splits.len()
            )));
        }
        if let Some(&l) = labels.iter().find(|&&l| l >= classes) {
            return Err(NasError::Data(format!("label {l} out of range for {classes} classes")));
        }
        if skeleton.joints != joints {
            return Err(NasError::structural(format!("skeleton has {} joints, data has {joints}", skeleton.joints)));
        }
        Ok(Dataset { channels, frames, joints, bodies, classes, skeleton, coords, labels, splits })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn sample_len(&self) -> usize {
        self.channels * self.frames * self.joints * self.bodies
    }

    pub fn coords(&self, i: usize) -> &[f32] {
        let per = self.sample_len();
        &self.coords[i * per..(i + 1) * per]
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn split_of(&self, i: usize) -> Split {
        self.splits[i]
    }

    pub fn sample(&self, i: usize) -> SkeletonSample {
        SkeletonSample {
            channels: self.channels,
            frames: self.frames,
            joints: self.joints,
            bodies: self.bodies,
            coords: self.coords(i).to_vec(),
            label: self.labels[i],
        }
    }

    /// Indices of a split in dataset order.
    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.splits[i] == split).collect()
    }

    /// `N × C × T × V × M` batch and its labels.
    pub fn batch(&self, indices: &[usize]) -> (Tensor<f32>, Vec<usize>) {
        let mut data = Vec::with_capacity(indices.len() * self.sample_len());
        for &i in indices {
            data.extend_from_slice(self.coords(i));
        }
        let shape = [indices.len(), self.channels, self.frames, self.joints, self.bodies];
        (Tensor::new(&shape, data).expect("batch size"), indices.iter().map(|&i| self.labels[i]).collect())
    }

    /// Applies `f` to every sample; the sample shape must be preserved.
    pub fn map_samples(&self, f: impl Fn(&SkeletonSample) -> Result<SkeletonSample>) -> Result<Dataset> {
        let mut coords = Vec::with_capacity(self.coords.len());
        for i in 0..self.len() {
            let s = f(&self.sample(i))?;
            if s.coords.len() != self.sample_len() {
                return Err(NasError::structural("sample transform changed the sample shape"));
            }
            coords.extend(s.coords);
        }
        Ok(Dataset { coords, ..self.clone() })
    }

    /// Stratified split assignment: within each class the samples are
    /// shuffled and the leading `train` and `val` fractions assigned.
    pub fn assign_splits(&mut self, train: f64, val: f64, rng: &mut impl Rng) {
        for c in 0..self.classes {
            let mut idx: Vec<usize> = (0..self.len()).filter(|&i| self.labels[i] == c).collect();
            idx.shuffle(rng);
            let n = idx.len();
            let n_train = (n as f64 * train).round() as usize;
            let n_val = ((n as f64 * val).round() as usize).min(n - n_train.min(n));
            for (rank, &i) in idx.iter().enumerate() {
                self.splits[i] = if rank < n_train {
                    Split::Train
                } else if rank < n_train + n_val {
                    Split::Val
                } else {
                    Split::Test
                };
            }
        }
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(DATASET_MAGIC)?;
        for v in [self.channels, self.frames, self.joints, self.bodies, self.classes, self.len()] {
            let v = u32::try_from(v).map_err(|_| NasError::Data("dimension does not fit in u32".into()))?;
            w.write_all(&v.to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(self.coords.len() * 4);
        for x in &self.coords {
            buf.extend_from_slice(&x.to_le_bytes());
        }
        for &l in &self.labels {
            buf.extend_from_slice(&(l as u32).to_le_bytes());
        }
        buf.extend(self.splits.iter().map(|s| s.tag()));
        w.write_all(&buf)?;
        Ok(())
    }

    /// Reads the binary container; the skeleton comes from elsewhere.
    pub fn read_from(r: &mut impl Read, skeleton: Skeleton) -> Result<Self> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        let truncated = || NasError::Parse("dataset file is truncated".into());
        if bytes.len() < 32 || &bytes[..8] != DATASET_MAGIC {
            return Err(NasError::Parse("not a skeleton dataset file".into()));
        }
        let head: Vec<usize> =
            (0..6).map(|i| u32::from_le_bytes(bytes[8 + 4 * i..12 + 4 * i].try_into().expect("4 bytes")) as usize).collect();
        let (c, t, v, m, classes, count) = (head[0], head[1], head[2], head[3], head[4], head[5]);
        let per = c.checked_mul(t).and_then(|x| x.checked_mul(v)).and_then(|x| x.checked_mul(m)).ok_or_else(truncated)?;
        let n_coords = per.checked_mul(count).ok_or_else(truncated)?;
        let expected = 32 + 4 * n_coords + 4 * count + count;
        if bytes.len() != expected {
            return Err(if bytes.len() < expected {
                truncated()
            } else {
                NasError::Parse("trailing bytes after the dataset".into())
            });
        }
        let mut off = 32;
        let coords = bytes[off..off + 4 * n_coords]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
            .collect();
        off += 4 * n_coords;
        let labels = bytes[off..off + 4 * count]
            .chunks_exact(4)
            .map(|b| u32::from_le_bytes(b.try_into().expect("4 bytes")) as usize)
            .collect();
        off += 4 * count;
        let splits = bytes[off..].iter().map(|&t| Split::from_tag(t)).collect::<Result<_>>()?;
        Dataset::new([c, t, v, m], classes, skeleton, coords, labels, splits).map_err(|e| match e {
            NasError::Io(e) => NasError::Io(e),
            other => NasError::Parse(other.to_string()),
        })
    }

    /// Path of the edge-list file that accompanies a dataset file.
    pub fn sidecar_path(path: &Path) -> PathBuf {
        let mut s = path.as_os_str().to_owned();
        s.push(".edges");
        PathBuf::from(s)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write_to(&mut buf)?;
        std::fs::write(path, buf)?;
        std::fs::write(Self::sidecar_path(path), self.skeleton.to_text())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        if bytes.len() < 24 {
            return Err(NasError::Parse("not a skeleton dataset file".into()));
        }
        let joints = u32::from_le_bytes(bytes[16..20].try_into().expect("4 bytes")) as usize;
        let skeleton = Skeleton::from_text(&std::fs::read_to_string(Self::sidecar_path(path))?, joints)?;
        Self::read_from(&mut bytes.as_slice(), skeleton)
    }
}
