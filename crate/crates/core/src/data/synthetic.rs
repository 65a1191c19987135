//! Procedural skeleton actions on a chain skeleton.
//!
//! Joint 0 is the head, joint 1 the neck (and tree root), and the last joint
//! the hand; the joints in between form the arm. Every class animates the
//! same rest pose with one oscillation of shared frequency and amplitude, so
//! two classes can differ purely in how the end joints move relative to each
//! other over time.

use std::f64::consts::TAU;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{Dataset, Skeleton, SkeletonSample, Split};
use crate::error::{NasError, Result};

/// Class templates, assigned to labels in declaration order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum MotionPattern {
    /// Head and hand swing sideways together.
    InPhase,
    /// Head and hand swing sideways in opposite directions. Every frame is a
    /// pose that [`MotionPattern::InPhase`] also visits.
    AntiPhase,
    /// In-phase swing with the hand held raised.
    RaisedHand,
    /// The arm rotates rigidly about its shoulder.
    ArmRotation,
    /// Only the head moves, up and down.
    HeadNod,
}

impl MotionPattern {
    pub const ALL: [MotionPattern; 5] = [
        MotionPattern::InPhase,
        MotionPattern::AntiPhase,
        MotionPattern::RaisedHand,
        MotionPattern::ArmRotation,
        MotionPattern::HeadNod,
    ];

    pub fn name(self) -> &'static str {
        match self {
            MotionPattern::InPhase => "in-phase",
            MotionPattern::AntiPhase => "anti-phase",
            MotionPattern::RaisedHand => "raised-hand",
            MotionPattern::ArmRotation => "arm-rotation",
            MotionPattern::HeadNod => "head-nod",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorConfig {
    pub classes: usize,
    pub samples_per_class: usize,
    pub joints: usize,
    pub frames: usize,
    /// Coordinate channels, 2 or 3.
    pub channels: usize,
    /// Body slots; only the first is animated, the rest stay zero.
    pub bodies: usize,
    /// Standard deviation of the coordinate noise, in units of the swing
    /// amplitude. Every other nuisance factor scales with it as well.
    pub noise: f64,
    /// Amplitude of the oscillations on the arm joints relative to `noise`.
    pub distractor_gain: f64,
    /// Seed of the shared motion parameters (frequency, amplitude).
    pub pattern_seed: u64,
    pub train_fraction: f64,
    pub val_fraction: f64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            classes: 3,
            samples_per_class: 100,
            joints: 5,
            frames: 32,
            channels: 2,
            bodies: 1,
            noise: 0.5,
            distractor_gain: 3.0,
            pattern_seed: 0,
            train_fraction: 0.70,
            val_fraction: 0.15,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(NasError::Config(msg));
        if self.classes < 2 || self.classes > MotionPattern::ALL.len() {
            return fail(format!("classes must be between 2 and {}, got {}", MotionPattern::ALL.len(), self.classes));
        }
        if self.samples_per_class == 0 {
            return fail("samples per class must be positive".into());
        }
        if self.joints < 3 {
            return fail(format!("the chain skeleton needs at least 3 joints, got {}", self.joints));
        }
        if self.frames < 2 {
            return fail(format!("need at least 2 frames, got {}", self.frames));
        }
        if !(2..=3).contains(&self.channels) {
            return fail(format!("channels must be 2 or 3, got {}", self.channels));
        }
        if self.bodies == 0 {
            return fail("bodies must be positive".into());
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) || !(self.distractor_gain >= 0.0 && self.distractor_gain.is_finite()) {
            return fail("noise and distractor gain must be finite and non-negative".into());
        }
        let (a, b) = (self.train_fraction, self.val_fraction);
        if !(a > 0.0 && b >= 0.0 && a + b <= 1.0) {
            return fail(format!("invalid split fractions {a}/{b}"));
        }
        Ok(())
    }

    pub fn patterns(&self) -> &'static [MotionPattern] {
        &MotionPattern::ALL[..self.classes]
    }

    pub fn skeleton(&self) -> Skeleton {
        Skeleton { joints: self.joints, edges: (0..self.joints - 1).map(|v| (v, v + 1)).collect(), root: 1 }
    }
}

/// Parameters every class shares, drawn from the pattern seed.
struct SharedMotion {
    cycles: usize,
    amplitude: f64,
}

impl SharedMotion {
    fn draw(seed: u64, frames: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let max_cycles = (frames / 8).clamp(1, 3);
        SharedMotion { cycles: rng.random_range(1..=max_cycles), amplitude: rng.random_range(0.8..1.2) }
    }
}

fn gauss(rng: &mut impl Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// Renders one `C × T × V × M` sample.
fn render(pattern: MotionPattern, shared: &SharedMotion, cfg: &GeneratorConfig, rng: &mut impl Rng) -> Vec<f32> {
    let (t_len, v_len, m_len) = (cfg.frames, cfg.joints, cfg.bodies);
    let hand = v_len - 1;
    let noise = cfg.noise;
    let shift = rng.random_range(0..t_len);

    // Nuisance draws; all collapse to the identity when noise is zero.
    let freq = shared.cycles as f64 * (1.0 + 0.05 * noise * gauss(rng));
    let amp_head = shared.amplitude * (0.5 * noise * gauss(rng)).exp();
    let amp_hand = shared.amplitude * (0.5 * noise * gauss(rng)).exp();
    let offset = [noise * gauss(rng), noise * gauss(rng)];
    let distractors: Vec<(f64, f64, f64)> = (1..hand)
        .map(|_| {
            let f = shared.cycles as f64 * rng.random_range(0.7..1.3);
            (cfg.distractor_gain * noise * rng.random_range(0.5..1.0), f, rng.random_range(0.0..TAU))
        })
        .collect();

    let angle = |t: usize| {
        if noise == 0.0 {
            TAU * ((shared.cycles * ((t + shift) % t_len)) as f64) / t_len as f64
        } else {
            TAU * freq * (t + shift) as f64 / t_len as f64
        }
    };

    let mut out = vec![0f32; cfg.channels * t_len * v_len * m_len];
    for t in 0..t_len {
        let s = angle(t).sin();
        let mut pose: Vec<[f64; 2]> = (0..v_len).map(|v| [0.0, -(v as f64)]).collect();
        match pattern {
            MotionPattern::InPhase | MotionPattern::RaisedHand => {
                pose[0][0] += amp_head * s;
                pose[hand][0] += amp_hand * s;
                if pattern == MotionPattern::RaisedHand {
                    pose[hand][1] += 1.0;
                }
            }
            MotionPattern::AntiPhase => {
                pose[0][0] += amp_head * s;
                pose[hand][0] -= amp_hand * s;
            }
            MotionPattern::ArmRotation => {
                let pivot = pose[2.min(hand)];
                let (sin, cos) = (0.5 * amp_hand * s).sin_cos();
                for p in pose.iter_mut().skip(3) {
                    let (dx, dy) = (p[0] - pivot[0], p[1] - pivot[1]);
                    *p = [pivot[0] + cos * dx - sin * dy, pivot[1] + sin * dx + cos * dy];
                }
            }
            MotionPattern::HeadNod => pose[0][1] += amp_head * s,
        }
        for (j, &(a, f, phi)) in distractors.iter().enumerate() {
            pose[j + 1][0] += a * (TAU * f * t as f64 / t_len as f64 + phi).sin();
        }
        for (v, p) in pose.iter().enumerate() {
            for c in 0..cfg.channels {
                let base = if c < 2 { p[c] + offset[c] } else { 0.0 };
                let value = base + noise * gauss(rng);
                out[((c * t_len + t) * v_len + v) * m_len] = value as f32;
            }
        }
    }
    out
}

/// Generates a labelled dataset with a stratified train/validation/test
/// split. The same `(config, seed)` always produces the same dataset.
pub fn generate_synthetic(config: &GeneratorConfig, seed: u64) -> Result<Dataset> {
    config.validate()?;
    let shared = SharedMotion::draw(config.pattern_seed, config.frames);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut coords = Vec::new();
    let mut labels = Vec::new();
    for (label, &pattern) in config.patterns().iter().enumerate() {
        for _ in 0..config.samples_per_class {
            coords.extend(render(pattern, &shared, config, &mut rng));
            labels.push(label);
        }
    }
    let n = labels.len();
    let shape = [config.channels, config.frames, config.joints, config.bodies];
    let mut data = Dataset::new(shape, config.classes, config.skeleton(), coords, labels, vec![Split::Train; n])?;
    data.assign_splits(config.train_fraction, config.val_fraction, &mut rng);
    Ok(data)
}

fn series(sample: &SkeletonSample) -> Vec<Vec<f64>> {
    let mut out = Vec::new();
    for c in 0..sample.channels {
        for v in 0..sample.joints {
            for m in 0..sample.bodies {
                out.push((0..sample.frames).map(|t| sample.at(c, t, v, m) as f64).collect());
            }
        }
    }
    out
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Per-coordinate mean and standard deviation over time. These see the
/// pose distribution but not how coordinates move relative to each other.
pub fn time_averaged_features(sample: &SkeletonSample) -> Vec<f64> {
    series(sample)
        .iter()
        .flat_map(|s| {
            let m = mean(s);
            let var = s.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / s.len() as f64;
            [m, var.sqrt()]
        })
        .collect()
}

/// Time-averaged products of every pair of centred coordinate series.
pub fn time_product_features(sample: &SkeletonSample) -> Vec<f64> {
    let centred: Vec<Vec<f64>> = series(sample)
        .into_iter()
        .map(|s| {
            let m = mean(&s);
            s.into_iter().map(|x| x - m).collect()
        })
        .collect();
    let mut out = Vec::new();
    for i in 0..centred.len() {
        for j in i..centred.len() {
            out.push(centred[i].iter().zip(&centred[j]).map(|(a, b)| a * b).sum::<f64>() / sample.frames as f64);
        }
    }
    out
}

/// Test accuracy of a multinomial logistic regression fitted on the
/// standardized training features by full-batch gradient descent.
pub fn probe_accuracy(
    train: &[Vec<f64>],
    train_labels: &[usize],
    test: &[Vec<f64>],
    test_labels: &[usize],
    classes: usize,
) -> Result<f64> {
    if train.is_empty() || test.is_empty() || train.len() != train_labels.len() || test.len() != test_labels.len() {
        return Err(NasError::Data("the probe needs non-empty, labelled train and test sets".into()));
    }
    let d = train[0].len();
    if train.iter().chain(test).any(|x| x.len() != d) {
        return Err(NasError::structural("feature vectors differ in length"));
    }
    let n = train.len() as f64;
    let mu: Vec<f64> = (0..d).map(|k| train.iter().map(|x| x[k]).sum::<f64>() / n).collect();
    let sd: Vec<f64> = (0..d)
        .map(|k| {
            let v = train.iter().map(|x| (x[k] - mu[k]).powi(2)).sum::<f64>() / n;
            if v > 1e-12 { v.sqrt() } else { 1.0 }
        })
        .collect();
    let standardize = |x: &Vec<f64>| -> Vec<f64> { (0..d).map(|k| (x[k] - mu[k]) / sd[k]).collect() };
    let xs: Vec<Vec<f64>> = train.iter().map(standardize).collect();

    let (lr, l2, steps) = (0.5, 1e-3, 500);
    let mut w = vec![vec![0.0; d + 1]; classes];
    let scores = |w: &[Vec<f64>], x: &[f64]| -> Vec<f64> {
        w.iter().map(|wc| wc[d] + wc[..d].iter().zip(x).map(|(a, b)| a * b).sum::<f64>()).collect()
    };
    for _ in 0..steps {
        let mut grad = vec![vec![0.0; d + 1]; classes];
        for (x, &y) in xs.iter().zip(train_labels) {
            let s = scores(&w, x);
            let m = s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = s.iter().map(|v| (v - m).exp()).collect();
            let z: f64 = e.iter().sum();
            for c in 0..classes {
                let g = e[c] / z - if c == y { 1.0 } else { 0.0 };
                for k in 0..d {
                    grad[c][k] += g * x[k];
                }
                grad[c][d] += g;
            }
        }
        for c in 0..classes {
            for k in 0..=d {
                let reg = if k < d { l2 * w[c][k] } else { 0.0 };
                w[c][k] -= lr * (grad[c][k] / n + reg);
            }
        }
    }
    let hits = test
        .iter()
        .zip(test_labels)
        .filter(|(x, &y)| {
            let s = scores(&w, &standardize(x));
            (1..classes).fold(0, |b, c| if s[c] > s[b] { c } else { b }) == y
        })
        .count();
    Ok(hits as f64 / test.len() as f64)
}
