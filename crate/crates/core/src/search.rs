//! Architecture search on a real supernet: the [`SearchObjective`] that
//! trains shared weights between CEIM iterations and scores candidate α
//! vectors on validation data.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ceim::{SearchDistribution, SearchObjective};
use crate::data::{evaluate, train_epoch, Dataset, Split, TrainConfig, TrainMixing};
use crate::error::{NasError, Result};
use crate::modules::MODULE_COUNT;
use crate::supernet::{positive_part, ArchParams, Mixing, Network};
use crate::tensor::Sgd;

/// How the supernet combines modules during the weight-training phase and
/// during fitness evaluation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SearchMode {
    #[default]
    Continuous,
    Sampled,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FitnessMetric {
    /// Validation top-1 accuracy.
    #[default]
    Accuracy,
    /// Negated mean validation cross-entropy.
    NegativeLoss,
}

/// Turns a raw distribution mean into usable architecture weights: layers
/// whose weights are all non-positive fall back to uniform.
pub fn mean_architecture(mu: &[f64], layers: usize) -> Result<ArchParams> {
    let mut raw = mu.to_vec();
    for layer in raw.chunks_mut(MODULE_COUNT) {
        if layer.iter().all(|&x| positive_part(x) == 0.0) {
            layer.fill(1.0 / MODULE_COUNT as f64);
        }
    }
    ArchParams::from_raw(layers, raw)
}

/// Supernet weights, the data they train on, and the optimizer state that
/// persists across search iterations.
pub struct SupernetObjective<'a> {
    net: Network<f32>,
    data: &'a Dataset,
    train: Vec<usize>,
    val: Vec<usize>,
    opt: Sgd<f32>,
    batch_size: usize,
    mode: SearchMode,
    fitness: FitnessMetric,
    rng: ChaCha8Rng,
}

impl<'a> SupernetObjective<'a> {
    /// `recipe.epochs` should equal the number of search iterations so the
    /// learning-rate schedule spans the whole search.
    pub fn new(
        net: Network<f32>,
        data: &'a Dataset,
        recipe: &TrainConfig,
        mode: SearchMode,
        fitness: FitnessMetric,
        seed: u64,
    ) -> Result<Self> {
        let train = data.indices(Split::Train);
        let val = data.indices(Split::Val);
        if train.is_empty() || val.is_empty() {
            return Err(NasError::Data("search needs non-empty training and validation splits".into()));
        }
        Ok(SupernetObjective {
            net,
            data,
            train,
            val,
            opt: recipe.optimizer(),
            batch_size: recipe.batch_size,
            mode,
            fitness,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    pub fn network(&self) -> &Network<f32> {
        &self.net
    }

    pub fn into_network(self) -> Network<f32> {
        self.net
    }

    fn score(&self, alpha: &[f64], seed: u64) -> Result<f64> {
        let layers = self.net.config().blocks();
        let params = match ArchParams::from_raw(layers, alpha.to_vec()) {
            Ok(p) if p.is_valid() => p,
            // A candidate that switches a whole layer off is not an
            // architecture; it gets the worst possible score.
            _ => return Ok(self.worst()),
        };
        let choices;
        let mixing = match self.mode {
            SearchMode::Continuous => Mixing::Continuous(&params),
            SearchMode::Sampled => {
                choices = params.sample_modules(&mut ChaCha8Rng::seed_from_u64(seed))?;
                Mixing::Sampled(&choices)
            }
        };
        let report = evaluate(&self.net, self.data, &self.val, &mixing, &[1], self.batch_size.max(32))?;
        Ok(match self.fitness {
            FitnessMetric::Accuracy => report.topk[0].1,
            FitnessMetric::NegativeLoss => -report.loss,
        })
    }

    fn worst(&self) -> f64 {
        match self.fitness {
            FitnessMetric::Accuracy => 0.0,
            FitnessMetric::NegativeLoss => f64::NEG_INFINITY,
        }
    }
}

impl SearchObjective for SupernetObjective<'_> {
    fn prepare(&mut self, iteration: usize, warmup: bool, dist: &SearchDistribution) -> Result<Option<f64>> {
        self.opt.set_epoch(iteration);
        let layers = self.net.config().blocks();
        let alpha = if warmup { ArchParams::uniform(layers) } else { mean_architecture(dist.mu(), layers)? };
        let mixing = match (warmup, self.mode) {
            (true, _) | (false, SearchMode::Sampled) => TrainMixing::Sampled(&alpha),
            (false, SearchMode::Continuous) => TrainMixing::Continuous(&alpha),
        };
        let loss = train_epoch(&mut self.net, self.data, &self.train, mixing, &mut self.opt, self.batch_size, &mut self.rng)?;
        Ok(Some(loss))
    }

    fn evaluate(&mut self, alphas: &[Vec<f64>]) -> Result<Vec<f64>> {
        let seeds: Vec<u64> = alphas.iter().map(|_| self.rng.random()).collect();
        let this = &*self;
        alphas.par_iter().zip(seeds).map(|(a, s)| this.score(a, s)).collect()
    }
}
