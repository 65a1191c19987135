//! Cross-entropy search with importance mixing over flattened architecture
//! parameters.
//!
//! The search distribution is a diagonal Gaussian. Each iteration keeps the
//! previous population's samples that remain likely under the updated
//! distribution, adds new draws that the old distribution would have
//! under-represented, trims or refills the result to `N` samples, ranks them
//! by fitness and moves the distribution toward the better ones.
//!
//! The machinery is independent of what is being optimized: [`search`]
//! talks to a [`SearchObjective`], which for architecture search trains the
//! shared network weights and scores candidates on validation data.

use std::cmp::Ordering;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{NasError, Result};

/// Diagonal Gaussian `N(μ, diag(σ²))` with a variance floor `ε`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchDistribution {
    mu: Vec<f64>,
    sigma2: Vec<f64>,
    epsilon: f64,
}

impl SearchDistribution {
    pub fn new(mu: Vec<f64>, sigma2: Vec<f64>, epsilon: f64) -> Result<Self> {
        if mu.len() != sigma2.len() {
            return Err(NasError::structural(format!("{} means but {} variances", mu.len(), sigma2.len())));
        }
        if !(epsilon > 0.0) {
            return Err(NasError::argument(format!("variance floor must be positive, got {epsilon}")));
        }
        if let Some(v) = sigma2.iter().find(|&&v| !(v >= epsilon) || !v.is_finite()) {
            return Err(NasError::argument(format!("variance {v} below the floor {epsilon}")));
        }
        if mu.iter().any(|m| !m.is_finite()) {
            return Err(NasError::argument("mean must be finite"));
        }
        Ok(SearchDistribution { mu, sigma2, epsilon })
    }

    /// Same mean and variance in every dimension.
    pub fn isotropic(dim: usize, mu: f64, sigma2: f64, epsilon: f64) -> Result<Self> {
        Self::new(vec![mu; dim], vec![sigma2; dim], epsilon)
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    pub fn mu(&self) -> &[f64] {
        &self.mu
    }

    pub fn sigma2(&self) -> &[f64] {
        &self.sigma2
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn log_density(&self, x: &[f64]) -> f64 {
        let ln_2pi = (2.0 * std::f64::consts::PI).ln();
        -0.5 * x
            .iter()
            .zip(&self.mu)
            .zip(&self.sigma2)
            .map(|((&xi, &m), &s2)| ln_2pi + s2.ln() + (xi - m) * (xi - m) / s2)
            .sum::<f64>()
    }

    pub fn sample(&self, rng: &mut impl Rng) -> Vec<f64> {
        self.mu
            .iter()
            .zip(&self.sigma2)
            .map(|(&m, &s2)| {
                let z: f64 = StandardNormal.sample(rng);
                m + s2.sqrt() * z
            })
            .collect()
    }
}

/// `n` independent draws.
pub fn sample_population(dist: &SearchDistribution, n: usize, rng: &mut impl Rng) -> Vec<Vec<f64>> {
    (0..n).map(|_| dist.sample(rng)).collect()
}

/// `exp(log_a - log_b)`, with the undefined `0/0` case read as 1.
fn density_ratio(log_a: f64, log_b: f64) -> f64 {
    let d = log_a - log_b;
    if d.is_nan() {
        1.0
    } else {
        d.exp()
    }
}

/// Whether a sample of the previous population stays:
/// `min(1, p(α; π_new) / p(α; π_old)) > r1`.
pub fn density_ratio_keep_old(alpha: &[f64], old: &SearchDistribution, new: &SearchDistribution, r1: f64) -> bool {
    density_ratio(new.log_density(alpha), old.log_density(alpha)).min(1.0) > r1
}

/// Whether a fresh sample is admitted:
/// `max(0, 1 - p(α; π_old) / p(α; π_new)) > r2`.
pub fn density_ratio_keep_new(alpha: &[f64], old: &SearchDistribution, new: &SearchDistribution, r2: f64) -> bool {
    (1.0 - density_ratio(old.log_density(alpha), new.log_density(alpha))).max(0.0) > r2
}

/// Where a population member came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Origin {
    /// Retained from the previous population.
    Old,
    /// Drawn this iteration and admitted by the importance test.
    New,
    /// Drawn to refill an undersized population.
    Backfill,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Candidate {
    pub alpha: Vec<f64>,
    pub origin: Origin,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoredSample {
    pub alpha: Vec<f64>,
    pub fitness: f64,
    pub origin: Origin,
}

/// Brings a selection to exactly `n` members: uniformly random removals
/// while too large, fresh draws from `dist` while too small.
pub fn trim_backfill(
    mut selected: Vec<Candidate>,
    n: usize,
    dist: &SearchDistribution,
    rng: &mut impl Rng,
) -> Vec<Candidate> {
    while selected.len() > n {
        let i = rng.random_range(0..selected.len());
        selected.remove(i);
    }
    while selected.len() < n {
        selected.push(Candidate { alpha: dist.sample(rng), origin: Origin::Backfill });
    }
    selected
}

fn lcm_upto(n: usize) -> Option<u64> {
    let gcd = |mut a: u64, mut b: u64| {
        while b != 0 {
            (a, b) = (b, a % b);
        }
        a
    };
    (1..=n as u64).try_fold(1u64, |acc, i| acc.checked_mul(i / gcd(acc, i)))
}

/// Rank weights `λ_i ∝ 1/i`, `i = 1..=n`, summing to one.
///
/// While the least common multiple of `1..=n` is exactly representable the
/// weights are computed as ratios of integers, so each is the correctly
/// rounded value of the exact fraction.
pub fn rank_weights(n: usize) -> Result<Vec<f64>> {
    if n == 0 {
        return Err(NasError::argument("rank weights need at least one sample"));
    }
    match lcm_upto(n).filter(|&m| m < (1 << 53)) {
        Some(m) => {
            let nums: Vec<u64> = (1..=n as u64).map(|i| m / i).collect();
            let total: u64 = nums.iter().sum();
            Ok(nums.iter().map(|&k| k as f64 / total as f64).collect())
        }
        None => {
            let total: f64 = (1..=n).map(|i| 1.0 / i as f64).sum();
            Ok((1..=n).map(|i| 1.0 / i as f64 / total).collect())
        }
    }
}

/// Stable sort by fitness, best first. NaN fitness ranks last.
pub fn sort_by_fitness(pop: &mut [ScoredSample]) {
    pop.sort_by(|a, b| match (a.fitness.is_nan(), b.fitness.is_nan()) {
        (false, false) => b.fitness.partial_cmp(&a.fitness).unwrap_or(Ordering::Equal),
        (x, y) => x.cmp(&y),
    });
}

/// Weighted mean of the ranked samples, and weighted squared deviations
/// from the previous mean plus the variance floor.
pub fn update_distribution(sorted: &[ScoredSample], lambda: &[f64], dist: &SearchDistribution) -> Result<SearchDistribution> {
    if sorted.len() != lambda.len() || sorted.is_empty() {
        return Err(NasError::structural(format!("{} samples for {} weights", sorted.len(), lambda.len())));
    }
    let d = dist.dim();
    if let Some(s) = sorted.iter().find(|s| s.alpha.len() != d) {
        return Err(NasError::structural(format!("sample of length {} in a {d}-dimensional search", s.alpha.len())));
    }
    let mut mu = vec![0.0; d];
    let mut sigma2 = vec![0.0; d];
    for (s, &l) in sorted.iter().zip(lambda) {
        for j in 0..d {
            mu[j] += l * s.alpha[j];
            let dev = s.alpha[j] - dist.mu[j];
            sigma2[j] += l * dev * dev;
        }
    }
    sigma2.iter_mut().for_each(|v| *v += dist.epsilon);
    SearchDistribution::new(mu, sigma2, dist.epsilon)
}

/// What [`search`] optimizes.
pub trait SearchObjective {
    /// Runs at the start of every iteration with the current distribution,
    /// e.g. to train shared weights. Returns an optional loss for the log.
    fn prepare(&mut self, iteration: usize, warmup: bool, dist: &SearchDistribution) -> Result<Option<f64>>;

    /// Fitness of each candidate, larger is better.
    fn evaluate(&mut self, alphas: &[Vec<f64>]) -> Result<Vec<f64>>;
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CeimConfig {
    pub iterations: usize,
    /// Leading iterations that only call `prepare`.
    pub warmup: usize,
    pub population: usize,
    pub init_mu: f64,
    pub init_sigma2: f64,
    pub epsilon: f64,
    /// With this off every population is drawn fresh, which reduces the
    /// method to a plain rank-weighted cross-entropy search.
    pub importance_mixing: bool,
}

impl Default for CeimConfig {
    fn default() -> Self {
        CeimConfig {
            iterations: 70,
            warmup: 20,
            population: 50,
            init_mu: 1.0 / crate::modules::MODULE_COUNT as f64,
            init_sigma2: 0.25,
            epsilon: 1e-3,
            importance_mixing: true,
        }
    }
}

/// One line of the search log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub warmup: bool,
    pub train_loss: Option<f64>,
    pub mu_mean: f64,
    pub mu_min: f64,
    pub mu_max: f64,
    pub sigma2_mean: f64,
    pub sigma2_min: f64,
    pub sigma2_max: f64,
    pub best_fitness: Option<f64>,
    pub median_fitness: Option<f64>,
    pub retained_old: usize,
    pub accepted_new: usize,
    pub fresh_draws: usize,
}

#[derive(Clone, Debug)]
pub struct SearchOutcome {
    pub distribution: SearchDistribution,
    /// Best member of the last evaluated population, if any was evaluated.
    pub best: Option<ScoredSample>,
    pub records: Vec<IterationRecord>,
}

fn summary(v: &[f64]) -> (f64, f64, f64) {
    let mean = v.iter().sum::<f64>() / v.len().max(1) as f64;
    let min = v.iter().copied().fold(f64::INFINITY, f64::min);
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    (mean, min, max)
}

/// Selects the population for one iteration from the previous one.
///
/// Old and new samples are examined in interleaved order, one of each per
/// index, with `r1` and `r2` shared by the whole iteration.
pub fn importance_mix(
    old_pop: &[Vec<f64>],
    old: &SearchDistribution,
    new: &SearchDistribution,
    n: usize,
    rng: &mut impl Rng,
) -> Vec<Candidate> {
    let r1: f64 = rng.random();
    let r2: f64 = rng.random();
    let mut selected = Vec::with_capacity(2 * n);
    for i in 0..n {
        if let Some(a) = old_pop.get(i) {
            if density_ratio_keep_old(a, old, new, r1) {
                selected.push(Candidate { alpha: a.clone(), origin: Origin::Old });
            }
        }
        let a = new.sample(rng);
        if density_ratio_keep_new(&a, old, new, r2) {
            selected.push(Candidate { alpha: a, origin: Origin::New });
        }
    }
    selected
}

/// Runs the search loop, reporting each iteration to `on_iteration` as it
/// completes.
pub fn search(
    objective: &mut impl SearchObjective,
    dim: usize,
    config: &CeimConfig,
    rng: &mut impl Rng,
    mut on_iteration: impl FnMut(&IterationRecord) -> Result<()>,
) -> Result<SearchOutcome> {
    if config.population == 0 {
        return Err(NasError::Config("population must be positive".into()));
    }
    if config.warmup > config.iterations {
        return Err(NasError::Config(format!(
            "{} warmup iterations exceed the {} total",
            config.warmup, config.iterations
        )));
    }
    let n = config.population;
    let lambda = rank_weights(n)?;
    let mut dist = SearchDistribution::isotropic(dim, config.init_mu, config.init_sigma2.max(config.epsilon), config.epsilon)?;
    let mut previous: Option<(Vec<Vec<f64>>, SearchDistribution)> = None;
    let mut best = None;
    let mut records = Vec::with_capacity(config.iterations);
    for it in 0..config.iterations {
        let warmup = it < config.warmup;
        let train_loss = objective.prepare(it, warmup, &dist)?;
        let mut record = IterationRecord {
            iteration: it,
            warmup,
            train_loss,
            mu_mean: 0.0,
            mu_min: 0.0,
            mu_max: 0.0,
            sigma2_mean: 0.0,
            sigma2_min: 0.0,
            sigma2_max: 0.0,
            best_fitness: None,
            median_fitness: None,
            retained_old: 0,
            accepted_new: 0,
            fresh_draws: 0,
        };
        if !warmup {
            let selected = match (&previous, config.importance_mixing) {
                (Some((old_pop, old_dist)), true) => importance_mix(old_pop, old_dist, &dist, n, rng),
                _ => Vec::new(),
            };
            let pop = trim_backfill(selected, n, &dist, rng);
            record.retained_old = pop.iter().filter(|c| c.origin == Origin::Old).count();
            record.accepted_new = pop.iter().filter(|c| c.origin == Origin::New).count();
            record.fresh_draws = pop.iter().filter(|c| c.origin == Origin::Backfill).count();
            let alphas: Vec<Vec<f64>> = pop.iter().map(|c| c.alpha.clone()).collect();
            let fitness = objective.evaluate(&alphas)?;
            if fitness.len() != n {
                return Err(NasError::structural(format!("{} fitness values for {n} samples", fitness.len())));
            }
            let mut scored: Vec<ScoredSample> = pop
                .into_iter()
                .zip(fitness)
                .map(|(c, fitness)| ScoredSample { alpha: c.alpha, fitness, origin: c.origin })
                .collect();
            sort_by_fitness(&mut scored);
            record.best_fitness = Some(scored[0].fitness);
            record.median_fitness = Some(median(&scored));
            let updated = update_distribution(&scored, &lambda, &dist)?;
            best = Some(scored[0].clone());
            previous = Some((alphas, std::mem::replace(&mut dist, updated)));
        }
        let (m, lo, hi) = summary(dist.mu());
        (record.mu_mean, record.mu_min, record.mu_max) = (m, lo, hi);
        let (m, lo, hi) = summary(dist.sigma2());
        (record.sigma2_mean, record.sigma2_min, record.sigma2_max) = (m, lo, hi);
        on_iteration(&record)?;
        records.push(record);
    }
    Ok(SearchOutcome { distribution: dist, best, records })
}

fn median(sorted_desc: &[ScoredSample]) -> f64 {
    let n = sorted_desc.len();
    if n % 2 == 1 {
        sorted_desc[n / 2].fitness
    } else {
        0.5 * (sorted_desc[n / 2 - 1].fitness + sorted_desc[n / 2].fitness)
    }
}

/// `f(α) = -‖α - α*‖²`, a stand-in objective with a known optimum.
#[derive(Clone, Debug)]
pub struct SphereObjective {
    pub target: Vec<f64>,
    pub evaluations: usize,
}

impl SphereObjective {
    pub fn new(target: Vec<f64>) -> Self {
        SphereObjective { target, evaluations: 0 }
    }
}

impl SearchObjective for SphereObjective {
    fn prepare(&mut self, _: usize, _: bool, _: &SearchDistribution) -> Result<Option<f64>> {
        Ok(None)
    }

    fn evaluate(&mut self, alphas: &[Vec<f64>]) -> Result<Vec<f64>> {
        self.evaluations += alphas.len();
        Ok(alphas
            .iter()
            .map(|a| -a.iter().zip(&self.target).map(|(x, t)| (x - t) * (x - t)).sum::<f64>())
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn scored(alpha: f64, fitness: f64) -> ScoredSample {
        ScoredSample { alpha: vec![alpha], fitness, origin: Origin::New }
    }

    #[test]
    fn rank_weights_small_cases() {
        assert_eq!(rank_weights(1).unwrap(), [1.0]);
        assert_eq!(rank_weights(3).unwrap(), [6.0 / 11.0, 3.0 / 11.0, 2.0 / 11.0]);
        assert_eq!(rank_weights(2).unwrap(), [2.0 / 3.0, 1.0 / 3.0]);
        assert!(rank_weights(0).is_err());
    }

    #[test]
    fn rank_weights_sum_to_one_and_decrease() {
        for n in [5, 16, 50, 100, 1000] {
            let w = rank_weights(n).unwrap();
            assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12, "n = {n}");
            assert!(w.windows(2).all(|p| p[0] > p[1]));
            for (i, &x) in w.iter().enumerate() {
                assert!((x * (i + 1) as f64 - w[0]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn one_dimensional_hand_evaluated_ratios() {
        let old = SearchDistribution::new(vec![0.0], vec![1.0], 1e-3).unwrap();
        let new = SearchDistribution::new(vec![1.0], vec![1.0], 1e-3).unwrap();
        for r in [0.0, 0.5, 0.999] {
            assert!(density_ratio_keep_old(&[1.0], &old, &new, r));
        }
        let threshold = 1.0 - (-0.5f64).exp();
        assert!(density_ratio_keep_new(&[1.0], &old, &new, threshold - 1e-9));
        assert!(!density_ratio_keep_new(&[1.0], &old, &new, threshold + 1e-9));
    }

    #[test]
    fn far_tail_old_sample_is_rejected() {
        let old = SearchDistribution::new(vec![0.0], vec![1.0], 1e-3).unwrap();
        let new = SearchDistribution::new(vec![50.0], vec![1.0], 1e-3).unwrap();
        assert!(!density_ratio_keep_old(&[-10.0], &old, &new, 1e-300));
        assert!(density_ratio_keep_new(&[50.0], &old, &new, 0.999_999));
    }

    #[test]
    fn log_space_survives_extreme_inputs() {
        let a = SearchDistribution::new(vec![0.0; 4], vec![1e-12; 4], 1e-12).unwrap();
        let b = SearchDistribution::new(vec![1e6; 4], vec![1e-12; 4], 1e-12).unwrap();
        let x = [1e6; 4];
        assert!(a.log_density(&x).is_finite());
        assert!(density_ratio_keep_old(&x, &a, &b, 0.5));
        assert!(!density_ratio_keep_old(&x, &b, &a, 0.5));
        assert!(density_ratio_keep_new(&x, &a, &b, 0.5));
    }

    #[test]
    fn trim_backfill_sizes() {
        let dist = SearchDistribution::isotropic(2, 0.0, 1.0, 1e-3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let make = |k: usize| (0..k).map(|i| Candidate { alpha: vec![i as f64; 2], origin: Origin::Old }).collect::<Vec<_>>();
        assert_eq!(trim_backfill(make(5), 5, &dist, &mut rng), make(5));
        let filled = trim_backfill(Vec::new(), 5, &dist, &mut rng);
        assert!(filled.len() == 5 && filled.iter().all(|c| c.origin == Origin::Backfill));
        assert_eq!(trim_backfill(make(8), 5, &dist, &mut rng).len(), 5);
    }

    #[test]
    fn trim_removes_uniformly() {
        let dist = SearchDistribution::isotropic(1, 0.0, 1.0, 1e-3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut removed = [0usize; 8];
        let trials = 8000;
        for _ in 0..trials {
            let pop = (0..8).map(|i| Candidate { alpha: vec![i as f64], origin: Origin::New }).collect();
            let kept = trim_backfill(pop, 5, &dist, &mut rng);
            for (i, r) in removed.iter_mut().enumerate() {
                if !kept.iter().any(|c| c.alpha[0] == i as f64) {
                    *r += 1;
                }
            }
        }
        // Each index is removed with probability 3/8.
        let expect = trials as f64 * 3.0 / 8.0;
        let chi2: f64 = removed.iter().map(|&o| (o as f64 - expect).powi(2) / expect).sum();
        assert!(chi2 < 20.09, "chi2 = {chi2}, counts {removed:?}");
    }

    #[test]
    fn hand_computed_two_sample_update() {
        let dist = SearchDistribution::new(vec![1.0], vec![0.5], 1e-3).unwrap();
        let mut pop = vec![scored(2.0, 0.1), scored(0.0, 0.9)];
        sort_by_fitness(&mut pop);
        let next = update_distribution(&pop, &rank_weights(2).unwrap(), &dist).unwrap();
        assert!((next.mu()[0] - 2.0 / 3.0).abs() < 1e-12);
        assert!((next.sigma2()[0] - (1.0 + 1e-3)).abs() < 1e-12);
    }

    #[test]
    fn identical_samples_collapse_to_the_floor() {
        let dist = SearchDistribution::new(vec![0.3, -0.2], vec![0.7, 0.1], 0.01).unwrap();
        let pop: Vec<_> = (0..4).map(|i| ScoredSample { alpha: vec![0.3, -0.2], fitness: i as f64, origin: Origin::Old }).collect();
        let next = update_distribution(&pop, &rank_weights(4).unwrap(), &dist).unwrap();
        for j in 0..2 {
            assert!((next.mu()[j] - dist.mu()[j]).abs() < 1e-15);
            assert!((next.sigma2()[j] - 0.01).abs() < 1e-15);
        }
    }

    #[test]
    fn update_is_shift_equivariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let dist = SearchDistribution::isotropic(3, 0.2, 0.5, 1e-3).unwrap();
        let mut pop: Vec<ScoredSample> =
            (0..6).map(|i| ScoredSample { alpha: dist.sample(&mut rng), fitness: -(i as f64), origin: Origin::New }).collect();
        sort_by_fitness(&mut pop);
        let lambda = rank_weights(6).unwrap();
        let base = update_distribution(&pop, &lambda, &dist).unwrap();
        let shift = [0.5, -1.25, 3.0];
        let moved_dist =
            SearchDistribution::new(dist.mu().iter().zip(shift).map(|(m, s)| m + s).collect(), dist.sigma2().to_vec(), 1e-3).unwrap();
        let moved: Vec<_> = pop
            .iter()
            .map(|s| ScoredSample { alpha: s.alpha.iter().zip(shift).map(|(a, d)| a + d).collect(), ..s.clone() })
            .collect();
        let next = update_distribution(&moved, &lambda, &moved_dist).unwrap();
        for j in 0..3 {
            assert!((next.mu()[j] - base.mu()[j] - shift[j]).abs() < 1e-12);
            assert!((next.sigma2()[j] - base.sigma2()[j]).abs() < 1e-12);
        }
    }

    #[test]
    fn ties_keep_insertion_order() {
        let mut pop = vec![scored(0.0, 0.5), scored(1.0, 0.7), scored(2.0, 0.5), scored(3.0, f64::NAN)];
        sort_by_fitness(&mut pop);
        let order: Vec<f64> = pop.iter().map(|s| s.alpha[0]).collect();
        assert_eq!(order, [1.0, 0.0, 2.0, 3.0]);
    }

    #[test]
    fn warmup_leaves_the_distribution_alone() {
        let config = CeimConfig { iterations: 3, warmup: 3, population: 4, ..CeimConfig::default() };
        let mut obj = SphereObjective::new(vec![1.0; 8]);
        let out = search(&mut obj, 8, &config, &mut ChaCha8Rng::seed_from_u64(0), |_| Ok(())).unwrap();
        assert_eq!(out.distribution.mu(), [0.125; 8]);
        assert_eq!(out.distribution.sigma2(), [0.25; 8]);
        assert_eq!(obj.evaluations, 0);
        assert!(out.best.is_none());
    }

    #[test]
    fn search_is_reproducible() {
        let config = CeimConfig { iterations: 12, warmup: 2, population: 10, ..CeimConfig::default() };
        let run = || {
            let mut obj = SphereObjective::new(vec![0.4; 6]);
            let out = search(&mut obj, 6, &config, &mut ChaCha8Rng::seed_from_u64(9), |_| Ok(())).unwrap();
            (out.distribution, out.records)
        };
        assert_eq!(run(), run());
    }
}
