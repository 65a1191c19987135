//! End-to-end acceptance suite. Every criterion runs at its stated
//! tolerance and prints one `[PASS]` or `[FAIL]` line; the test fails if
//! any criterion does.
//!
//! The criteria run one after another inside a single test so that the
//! wall-clock limits measure each criterion alone rather than whatever
//! else the harness happens to schedule alongside it.

use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use gcn_nas::ceim::{
    importance_mix, rank_weights, search, update_distribution, CeimConfig, Origin, ScoredSample, SearchDistribution,
    SearchObjective, SphereObjective,
};
use gcn_nas::graph::{
    chebyshev_terms, estimate_lambda_max, laplacian_paper, laplacian_standard, rescale, spectral_filter_oracle,
    AdjacencyMatrix, LambdaMax, Matrix,
};
use gcn_nas::modules::{
    spatial_correlation, spatiotemporal_correlation, temporal_correlation, CorrelationParams, ModuleKind, MODULE_COUNT,
};
use gcn_nas::supernet::{derive_architecture, ArchParams, DerivedArchitecture, ForwardCtx, Mixing, Network, SupernetConfig};
use gcn_nas::tensor::gradcheck::check;
use gcn_nas::tensor::{ParamStore, Tape, Tensor, Var};
use gcn_nas::Result;
use gcn_nas_cli::{RunConfig, ALPHA_FILE, ARCH_JSON, ARCH_TABLE, CHECKPOINT_FILE, METRICS_FILE};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ChiSquared, ContinuousCDF};

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict { pass, detail: detail.into() }
}

fn failed(e: impl std::fmt::Display) -> Verdict {
    verdict(false, format!("error: {e}"))
}

fn random_tensor(rng: &mut impl Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

// ---------------------------------------------------------------- 1

fn random_graph(rng: &mut impl Rng, n: usize) -> AdjacencyMatrix {
    let density = rng.random_range(0.2..0.9);
    let mut m = Matrix::zeros(n, n);
    for i in 0..n {
        for j in i + 1..n {
            if rng.random_bool(density) {
                let w = rng.random_range(0.1..2.0);
                m[(i, j)] = w;
                m[(j, i)] = w;
            }
        }
    }
    AdjacencyMatrix::from_matrix(m).unwrap()
}

fn chebyshev_against_eigendecomposition() -> Result<Verdict> {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst = 0.0f64;
    for g in 0..100 {
        let n = rng.random_range(2..=16);
        let a = random_graph(&mut rng, n);
        let (l, lambda_max) = if g % 2 == 0 {
            (laplacian_paper(&a), 2.0)
        } else {
            let l = laplacian_standard(&a);
            let lm = estimate_lambda_max(&l, 200).max(1e-3);
            (l, lm)
        };
        let coeffs: Vec<f64> = (0..5).map(|_| rng.random_range(-1.0..1.0)).collect();
        let cols = rng.random_range(1..=3);
        let x = Matrix::from_vec(n, cols, (0..n * cols).map(|_| rng.random_range(-1.0..1.0)).collect())?;
        let fast = chebyshev_terms(&rescale(&l, lambda_max)?, 4)?.filter(&coeffs, &x)?;
        let exact = spectral_filter_oracle(&l, lambda_max, &coeffs, &x)?;
        worst = worst.max(fast.max_abs_diff(&exact));
    }
    let elapsed = start.elapsed();
    Ok(verdict(
        worst <= 1e-8 && elapsed < Duration::from_secs(10),
        format!("100 graphs, max error {worst:.2e}, {:.2}s", elapsed.as_secs_f64()),
    ))
}

// ---------------------------------------------------------------- 2

const FD_EPS: f64 = 1e-6;

/// Reduces any tensor to a scalar with fixed pseudo-random weights, so every
/// output element contributes to the checked gradient.
fn reduce(tape: &mut Tape<f64>, y: Var, seed: u64) -> Result<Var> {
    let shape = tape.value(y).shape().to_vec();
    let w = random_tensor(&mut ChaCha8Rng::seed_from_u64(seed), &shape);
    tape.weighted_sum(y, w)
}

fn op_checks(seed: u64) -> Result<Vec<(&'static str, f64)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut t = |shape: &[usize]| random_tensor(&mut rng, shape);
    let positive = |t: Tensor<f64>| t.map(|x| x.abs() + 0.5);
    let mut out = Vec::new();
    let mut run = |name: &'static str, inputs: Vec<Tensor<f64>>, f: &dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>| {
        let r = check(&inputs, FD_EPS, |tape, v| {
            let y = f(tape, v)?;
            reduce(tape, y, seed ^ 0x5eed)
        })?;
        out.push((name, r.max_rel_error));
        Ok::<_, gcn_nas::NasError>(())
    };

    run("matmul", vec![t(&[3, 4]), t(&[4, 2])], &|tp, v| tp.matmul(v[0], v[1]))?;
    run("batched_matmul", vec![t(&[2, 3, 4]), t(&[2, 4, 2])], &|tp, v| tp.batched_matmul(v[0], v[1]))?;
    run("add", vec![t(&[2, 3]), t(&[2, 3])], &|tp, v| tp.add(v[0], v[1]))?;
    run("scale", vec![t(&[2, 3])], &|tp, v| Ok(tp.scale(v[0], -1.7)))?;
    run("relu", vec![t(&[3, 5])], &|tp, v| Ok(tp.relu(v[0])))?;
    run("softmax", vec![t(&[2, 3, 4])], &|tp, v| tp.softmax_lastdim(v[0]))?;
    for (name, stride) in [("conv_temporal/1", 1), ("conv_temporal/2", 2)] {
        run(name, vec![t(&[2, 3, 7, 4]), t(&[4, 3, 3, 1])], &move |tp, v| tp.conv_temporal(v[0], v[1], stride))?;
    }
    run("conv_pointwise", vec![t(&[2, 3, 5, 4]), t(&[2, 3, 1, 1])], &|tp, v| tp.conv_pointwise(v[0], v[1]))?;
    run("batch_norm_train", vec![t(&[3, 2, 4, 3]), t(&[2]), t(&[2])], &|tp, v| {
        Ok(tp.batch_norm_train(v[0], v[1], v[2], 1e-5)?.0)
    })?;
    let (mean, var) = (t(&[2]).into_data(), positive(t(&[2])).into_data());
    run("batch_norm_eval", vec![t(&[3, 2, 4, 3]), t(&[2]), t(&[2])], &move |tp, v| {
        tp.batch_norm_eval(v[0], v[1], v[2], &mean, &var, 1e-5)
    })?;
    run("propagate/shared", vec![t(&[5, 5]), t(&[2, 3, 4, 5])], &|tp, v| tp.propagate(v[0], v[1]))?;
    run("propagate/per-sample", vec![t(&[2, 5, 5]), t(&[2, 3, 4, 5])], &|tp, v| tp.propagate(v[0], v[1]))?;
    run("correlate", vec![t(&[2, 3, 4, 5]), t(&[2, 3, 4, 5])], &|tp, v| tp.correlate(v[0], v[1], 0.3))?;
    run("combine_adjacency", vec![t(&[4, 4]), t(&[3, 4, 4]), t(&[4, 4])], &|tp, v| {
        tp.combine_adjacency(&[(v[0], 0.5), (v[1], 0.25), (v[2], -1.5)], 3)
    })?;
    run("global_avg_pool", vec![t(&[2, 3, 4, 5])], &|tp, v| tp.global_avg_pool(v[0]))?;
    run("group_mean", vec![t(&[6, 3])], &|tp, v| tp.group_mean(v[0], 2))?;
    run("linear", vec![t(&[3, 4]), t(&[2, 4]), t(&[2])], &|tp, v| tp.linear(v[0], v[1], v[2]))?;
    run("cross_entropy", vec![t(&[4, 3])], &|tp, v| tp.cross_entropy(v[0], &[0, 2, 1, 2]))?;
    Ok(out)
}

/// Central differences with respect to every stored parameter element, or
/// `per_param` randomly chosen elements of each when given.
fn param_check(
    store: &mut ParamStore<f64>,
    per_param: Option<usize>,
    rng: &mut impl Rng,
    f: &dyn Fn(&mut Tape<f64>, &ParamStore<f64>) -> Result<Var>,
) -> Result<f64> {
    let mut tape = Tape::new();
    let out = f(&mut tape, store)?;
    let grads = tape.backward(out)?;
    let ids: Vec<_> = store.iter().map(|(id, _)| id).collect();
    let mut worst = 0.0f64;
    for id in ids {
        let len = store.value(id).len();
        let analytic = grads.param(id).cloned().unwrap_or_else(|| Tensor::zeros(store.value(id).shape()));
        let elems: Vec<usize> = match per_param {
            Some(k) if k < len => (0..k).map(|_| rng.random_range(0..len)).collect(),
            _ => (0..len).collect(),
        };
        let (mut diff, mut scale) = (0.0f64, 1e-8f64);
        for i in elems {
            let orig = store.value(id).data()[i];
            let mut eval = |x: f64| -> Result<f64> {
                store.get_mut(id).value.data_mut()[i] = x;
                let mut t = Tape::new();
                let o = f(&mut t, store)?;
                Ok(t.value(o).item())
            };
            let numeric = (eval(orig + FD_EPS)? - eval(orig - FD_EPS)?) / (2.0 * FD_EPS);
            store.get_mut(id).value.data_mut()[i] = orig;
            let a = analytic.data()[i];
            diff = diff.max((a - numeric).abs());
            scale = scale.max(a.abs()).max(numeric.abs());
        }
        worst = worst.max(diff / scale);
    }
    Ok(worst)
}

type DynamicFn = fn(&mut Tape<f64>, &ParamStore<f64>, Var, &CorrelationParams) -> Result<Var>;

const DYNAMIC: [(ModuleKind, DynamicFn); 3] = [
    (ModuleKind::SpatialM, spatial_correlation::<f64>),
    (ModuleKind::TemporalM, temporal_correlation::<f64>),
    (ModuleKind::SpatioTemporalM, spatiotemporal_correlation::<f64>),
];

fn dynamic_checks(seed: u64) -> Result<Vec<(&'static str, f64)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1000));
    let mut out = Vec::new();
    for (kind, module) in DYNAMIC {
        let mut store = ParamStore::new();
        let p = CorrelationParams::init(&mut store, "m", kind, 4, 2, &mut rng)?;
        let h = random_tensor(&mut rng, &[2, 4, 6, 5]);
        let r = check(&[h.clone()], FD_EPS, |tape, v| {
            let a = module(tape, &store, v[0], &p)?;
            reduce(tape, a, seed)
        })?;
        out.push((kind.name(), r.max_rel_error));
        let wrt_params = param_check(&mut store, None, &mut rng, &|tape, store| {
            let x = tape.constant(h.clone());
            let a = module(tape, store, x, &p)?;
            reduce(tape, a, seed)
        })?;
        out.push((kind.name(), wrt_params));
    }
    Ok(out)
}

/// A whole two-block supernet, both mixing modes, against a few sampled
/// elements of every parameter.
fn network_check(seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(2000));
    let mut cfg = SupernetConfig::desk(2, 5, 3);
    cfg.channels = vec![4, 6];
    cfg.strides = vec![1, 2];
    cfg.frames = 6;
    let adj = gcn_nas::graph::build_skeleton_adjacency(&[(0, 1), (1, 2), (2, 3), (3, 4)], 5)?;
    let net = Network::<f64>::supernet(&cfg, &adj, LambdaMax::default(), &mut rng)?;
    let input = random_tensor(&mut rng, &[3, 2, 6, 5, 1]);
    let raw: Vec<f64> = (0..2 * MODULE_COUNT).map(|_| rng.random_range(0.05..1.0)).collect();
    let alpha = ArchParams::from_raw(2, raw)?;
    let labels = [0, 1, 2];
    let mut store = net.store().clone();
    // The classifier starts at zero, which would zero every upstream
    // gradient and leave nothing to compare.
    let fc: Vec<_> = store.iter().filter(|(_, p)| p.name.starts_with("fc")).map(|(id, _)| id).collect();
    for id in fc {
        let shape = store.value(id).shape().to_vec();
        store.get_mut(id).value = random_tensor(&mut rng, &shape);
    }
    let worst = param_check(&mut store, Some(3), &mut rng, &|tape, store| {
        // The network reads its own store; mirror the perturbed copy in.
        let mut local = net.clone();
        *local.store_mut() = store.clone();
        let mut ctx = ForwardCtx::train();
        let logits = local.forward(tape, &input, &Mixing::Continuous(&alpha), &mut ctx)?;
        tape.cross_entropy(logits, &labels)
    })?;
    Ok(worst)
}

fn finite_difference_gradients() -> Result<Verdict> {
    let start = Instant::now();
    let mut worst: (f64, String) = (0.0, String::new());
    for seed in 0..20 {
        let mut all = op_checks(seed)?;
        all.extend(dynamic_checks(seed)?);
        all.push(("network", network_check(seed)?));
        for (name, err) in all {
            if err > worst.0 || !err.is_finite() {
                worst = (err, name.to_string());
            }
        }
    }
    let elapsed = start.elapsed();
    Ok(verdict(
        worst.0 < 1e-3 && elapsed < Duration::from_secs(60),
        format!("20 seeds, worst relative error {:.2e} ({}), {:.1}s", worst.0, worst.1, elapsed.as_secs_f64()),
    ))
}

// ---------------------------------------------------------------- 3

fn dynamic_invariants() -> Result<Verdict> {
    let mut rng = ChaCha8Rng::seed_from_u64(33);
    let (n, c, t, v) = (2, 6, 8, 7);
    let (mut row_err, mut perm_err) = (0.0f64, 0.0f64);
    for _ in 0..50 {
        for (kind, _) in DYNAMIC {
            let mut store = ParamStore::<f32>::new();
            let p = CorrelationParams::init(&mut store, "m", kind, c, 3, &mut rng)?;
            let h: Tensor<f32> = random_tensor(&mut rng, &[n, c, t, v]).map(|x| 2.0 * x).cast();
            let mut perm: Vec<usize> = (0..v).collect();
            perm.shuffle(&mut rng);
            let mut hp = h.clone();
            for idx in 0..n * c * t {
                for i in 0..v {
                    hp.data_mut()[idx * v + i] = h.data()[idx * v + perm[i]];
                }
            }
            let mut tape = Tape::new();
            let (x, xp) = (tape.constant(h), tape.constant(hp));
            let a = p.adjacency(&mut tape, &store, x)?;
            let ap = p.adjacency(&mut tape, &store, xp)?;
            let (a, ap) = (tape.value(a).data(), tape.value(ap).data());
            for s in 0..n {
                for i in 0..v {
                    let row = &a[(s * v + i) * v..(s * v + i + 1) * v];
                    row_err = row_err.max((row.iter().map(|&x| x as f64).sum::<f64>() - 1.0).abs());
                    for j in 0..v {
                        let lhs = ap[(s * v + i) * v + j] as f64;
                        let rhs = a[(s * v + perm[i]) * v + perm[j]] as f64;
                        perm_err = perm_err.max((lhs - rhs).abs());
                    }
                }
            }
        }
    }
    Ok(verdict(
        row_err <= 1e-6 && perm_err <= 1e-6,
        format!("50 inputs x 3 modules, row-sum error {row_err:.2e}, permutation error {perm_err:.2e}"),
    ))
}

// ---------------------------------------------------------------- 4

fn small_supernet(rng: &mut impl Rng) -> Result<Network<f32>> {
    let mut cfg = SupernetConfig::desk(2, 5, 3);
    cfg.frames = 12;
    let adj = gcn_nas::graph::build_skeleton_adjacency(&[(0, 1), (1, 2), (2, 3), (3, 4)], 5)?;
    Network::supernet(&cfg, &adj, LambdaMax::default(), rng)
}

fn logits(net: &Network<f32>, input: &Tensor<f32>, mixing: &Mixing<'_>, training: bool) -> Result<Tensor<f32>> {
    let mut tape = Tape::new();
    let mut ctx = if training { ForwardCtx::train() } else { ForwardCtx::eval() };
    let y = net.forward(&mut tape, input, mixing, &mut ctx)?;
    Ok(tape.value(y).clone())
}

fn one_hot_modes_agree() -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let net = small_supernet(&mut rng)?;
    let input: Tensor<f32> = random_tensor(&mut rng, &[3, 2, 12, 5, 1]).cast();
    let mut identical = 0;
    let trials = 24;
    for _ in 0..trials {
        let choices: Vec<ModuleKind> = (0..4).map(|_| ModuleKind::ALL[rng.random_range(0..MODULE_COUNT)]).collect();
        let alpha = ArchParams::one_hot(&choices);
        let same = [true, false].iter().all(|&training| {
            let a = logits(&net, &input, &Mixing::Continuous(&alpha), training);
            let b = logits(&net, &input, &Mixing::Sampled(&choices), training);
            matches!((a, b), (Ok(a), Ok(b)) if a.bit_eq(&b))
        });
        identical += same as usize;
    }
    Ok((identical == trials, format!("one-hot {identical}/{trials} bit-identical")))
}

fn sampling_frequencies() -> Result<(bool, String)> {
    let raw = [0.30, 0.10, 0.0, 0.20, -0.5, 0.15, 0.05, 0.20];
    let alpha = ArchParams::from_raw(1, raw.to_vec())?;
    let w = alpha.weights(0)?;
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let draws = 10_000;
    let mut counts = [0usize; MODULE_COUNT];
    for _ in 0..draws {
        counts[alpha.sample_module(0, &mut rng)?.index()] += 1;
    }
    let zero_hits: usize = (0..MODULE_COUNT).filter(|&i| w[i] == 0.0).map(|i| counts[i]).sum();
    let positive: Vec<usize> = (0..MODULE_COUNT).filter(|&i| w[i] > 0.0).collect();
    let stat: f64 = positive
        .iter()
        .map(|&i| {
            let expected = w[i] * draws as f64;
            (counts[i] as f64 - expected).powi(2) / expected
        })
        .sum();
    let dist = ChiSquared::new((positive.len() - 1) as f64).unwrap();
    let critical = dist.inverse_cdf(0.99);
    let p = 1.0 - dist.cdf(stat);
    Ok((
        stat < critical && zero_hits == 0,
        format!("chi2 {stat:.2} < {critical:.2} (p {p:.3}), {zero_hits} draws of zero-weight modules"),
    ))
}

fn rescaling_is_exact() -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(43);
    let net = small_supernet(&mut rng)?;
    let input: Tensor<f32> = random_tensor(&mut rng, &[2, 2, 12, 5, 1]).cast();
    let mut cases = 0;
    let mut exact = 0;
    let mut compare = |alpha: &ArchParams, c: f64, rng: &mut ChaCha8Rng| -> Result<()> {
        let scaled = ArchParams::from_raw(alpha.layers(), alpha.raw().iter().map(|x| c * x).collect())?;
        let weights_same = (0..alpha.layers()).all(|k| alpha.weights(k).ok() == scaled.weights(k).ok());
        let logits_same = logits(&net, &input, &Mixing::Continuous(alpha), false)?
            .bit_eq(&logits(&net, &input, &Mixing::Continuous(&scaled), false)?);
        let seed = rng.random();
        let draws_same = alpha.sample_modules(&mut ChaCha8Rng::seed_from_u64(seed))?
            == scaled.sample_modules(&mut ChaCha8Rng::seed_from_u64(seed))?;
        cases += 1;
        exact += (weights_same && logits_same && draws_same) as usize;
        Ok(())
    };
    // Arbitrary α under power-of-two factors.
    for _ in 0..10 {
        let raw: Vec<f64> = (0..4 * MODULE_COUNT).map(|_| rng.random_range(-0.3..1.0)).collect();
        let alpha = ArchParams::from_raw(4, raw)?;
        if !alpha.is_valid() {
            continue;
        }
        for c in [2.0, 0.5, 1024.0, 2f64.powi(-20)] {
            compare(&alpha, c, &mut rng)?;
        }
    }
    // Grid-valued α under arbitrary integer factors.
    for _ in 0..10 {
        let raw: Vec<f64> = (0..4 * MODULE_COUNT).map(|_| rng.random_range(-16i32..=64) as f64 / 64.0).collect();
        let alpha = ArchParams::from_raw(4, raw)?;
        if !alpha.is_valid() {
            continue;
        }
        for c in [3.0, 7.0, 1000.0, 12345.0] {
            compare(&alpha, c, &mut rng)?;
        }
    }
    Ok((exact == cases && cases > 0, format!("rescaling {exact}/{cases} exact")))
}

fn mixing_and_sampling() -> Result<Verdict> {
    let parts = [one_hot_modes_agree()?, sampling_frequencies()?, rescaling_is_exact()?];
    let pass = parts.iter().all(|p| p.0);
    Ok(verdict(pass, parts.iter().map(|p| p.1.as_str()).collect::<Vec<_>>().join("; ")))
}

// ---------------------------------------------------------------- 5

fn ceim_machinery() -> Result<Verdict> {
    let weights_exact = rank_weights(3)? == [6.0 / 11.0, 3.0 / 11.0, 2.0 / 11.0];

    let mut rng = ChaCha8Rng::seed_from_u64(51);
    let mut noop = 0;
    for _ in 0..1000 {
        let dim = rng.random_range(1..=8);
        let n = rng.random_range(1..=20);
        let mu: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        let sigma2: Vec<f64> = (0..dim).map(|_| rng.random_range(0.01..2.0)).collect();
        let d = SearchDistribution::new(mu, sigma2, 1e-3)?;
        let old: Vec<Vec<f64>> = (0..n).map(|_| d.sample(&mut rng)).collect();
        let mixed = importance_mix(&old, &d, &d, n, &mut rng);
        let kept: Vec<&Vec<f64>> = mixed.iter().filter(|c| c.origin == Origin::Old).map(|c| &c.alpha).collect();
        let all_old = mixed.iter().all(|c| c.origin == Origin::Old);
        noop += (all_old && kept.len() == n && kept.into_iter().eq(old.iter())) as usize;
    }

    let sorted = [
        ScoredSample { alpha: vec![1.0, 2.0], fitness: 0.9, origin: Origin::New },
        ScoredSample { alpha: vec![3.0, -1.0], fitness: 0.5, origin: Origin::New },
    ];
    let old = SearchDistribution::new(vec![0.0, 0.0], vec![1.0, 1.0], 1e-3)?;
    let new = update_distribution(&sorted, &rank_weights(2)?, &old)?;
    let want_mu = [5.0 / 3.0, 1.0];
    let want_sigma2 = [11.0 / 3.0 + 1e-3, 3.0 + 1e-3];
    let hand_err = new
        .mu()
        .iter()
        .zip(&want_mu)
        .chain(new.sigma2().iter().zip(&want_sigma2))
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);

    Ok(verdict(
        weights_exact && noop == 1000 && hand_err <= 1e-12,
        format!("rank weights exact: {weights_exact}; identity mixing no-op {noop}/1000; hand update error {hand_err:.1e}"),
    ))
}

// ---------------------------------------------------------------- 6

const SPHERE_DIM: usize = 16;
const SPHERE_POP: usize = 50;
const SPHERE_ITERS: usize = 150;
const SPHERE_TOL: f64 = 0.05;

fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// The sphere objective, also recording the distance of the mean to the
/// optimum at the start of every iteration.
struct Tracked {
    inner: SphereObjective,
    distances: Vec<f64>,
}

impl SearchObjective for Tracked {
    fn prepare(&mut self, it: usize, warmup: bool, dist: &SearchDistribution) -> Result<Option<f64>> {
        self.distances.push(distance(dist.mu(), &self.inner.target));
        self.inner.prepare(it, warmup, dist)
    }

    fn evaluate(&mut self, alphas: &[Vec<f64>]) -> Result<Vec<f64>> {
        self.inner.evaluate(alphas)
    }
}

fn sphere_config() -> CeimConfig {
    CeimConfig {
        iterations: SPHERE_ITERS,
        warmup: 0,
        population: SPHERE_POP,
        init_mu: 0.0,
        init_sigma2: 0.25,
        epsilon: 1e-4,
        importance_mixing: true,
    }
}

fn sphere_target(seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..SPHERE_DIM).map(|_| rng.random_range(-1.0..1.0)).collect()
}

/// Iterations (distribution updates) until the mean first lies within the
/// tolerance, given the distance before every update and after the last.
fn iterations_to_reach(before: &[f64], last: f64) -> Option<usize> {
    before.iter().chain([last].iter()).position(|&d| d < SPHERE_TOL)
}

/// Textbook cross-entropy method: fresh population every iteration, the
/// best tenth averaged with equal weights, variance around the new mean.
fn plain_cem(target: &[f64], seed: u64) -> Result<Option<usize>> {
    let cfg = sphere_config();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut dist = SearchDistribution::isotropic(SPHERE_DIM, cfg.init_mu, cfg.init_sigma2, cfg.epsilon)?;
    let elite = SPHERE_POP / 10;
    for it in 0..SPHERE_ITERS {
        if distance(dist.mu(), target) < SPHERE_TOL {
            return Ok(Some(it));
        }
        let mut pop: Vec<(f64, Vec<f64>)> = (0..SPHERE_POP)
            .map(|_| {
                let a = dist.sample(&mut rng);
                (distance(&a, target), a)
            })
            .collect();
        pop.sort_by(|a, b| a.0.total_cmp(&b.0));
        let mut mu = vec![0.0; SPHERE_DIM];
        for (_, a) in &pop[..elite] {
            mu.iter_mut().zip(a).for_each(|(m, x)| *m += x / elite as f64);
        }
        let mut sigma2 = vec![cfg.epsilon; SPHERE_DIM];
        for (_, a) in &pop[..elite] {
            for j in 0..SPHERE_DIM {
                sigma2[j] += (a[j] - mu[j]).powi(2) / elite as f64;
            }
        }
        dist = SearchDistribution::new(mu, sigma2, cfg.epsilon)?;
    }
    Ok((distance(dist.mu(), target) < SPHERE_TOL).then_some(SPHERE_ITERS))
}

fn sphere_surrogate() -> Result<Verdict> {
    let start = Instant::now();
    let seed = 60;
    let target = sphere_target(seed);
    let mut obj = Tracked { inner: SphereObjective::new(target.clone()), distances: Vec::new() };
    let outcome = search(&mut obj, SPHERE_DIM, &sphere_config(), &mut ChaCha8Rng::seed_from_u64(seed + 1), |_| Ok(()))?;
    let elapsed = start.elapsed();
    let final_distance = distance(outcome.distribution.mu(), &target);
    let post: Vec<_> = outcome.records.iter().filter(|r| !r.warmup).collect();
    let retained = post.iter().filter(|r| r.retained_old > 0).count();
    let retained_share = retained as f64 / post.len() as f64;

    let seeds: Vec<u64> = (0..50).map(|s| 100 + 2 * s).collect();
    let mut ceim_iters = Vec::new();
    let mut cem_iters = Vec::new();
    for &s in &seeds {
        let target = sphere_target(s);
        let mut obj = Tracked { inner: SphereObjective::new(target.clone()), distances: Vec::new() };
        let out = search(&mut obj, SPHERE_DIM, &sphere_config(), &mut ChaCha8Rng::seed_from_u64(s + 1), |_| Ok(()))?;
        ceim_iters.push(iterations_to_reach(&obj.distances, distance(out.distribution.mu(), &target)));
        cem_iters.push(plain_cem(&target, s + 1)?);
    }
    // A run that never reaches the tolerance counts as one past the budget.
    let mean = |v: &[Option<usize>]| v.iter().map(|x| x.unwrap_or(SPHERE_ITERS + 1) as f64).sum::<f64>() / v.len() as f64;
    let (ceim_mean, cem_mean) = (mean(&ceim_iters), mean(&cem_iters));
    let stalls = |v: &[Option<usize>]| v.iter().filter(|x| x.is_none()).count();

    Ok(verdict(
        final_distance < SPHERE_TOL
            && retained_share >= 0.5
            && elapsed < Duration::from_secs(30)
            && ceim_mean <= cem_mean,
        format!(
            "distance {final_distance:.4} after {SPHERE_ITERS} iterations, old samples kept on {:.0}% of iterations, \
             {:.2}s; over {} targets, mean iterations to tolerance {ceim_mean:.1} vs {cem_mean:.1} for plain CEM \
             ({} and {} runs never reached it)",
            100.0 * retained_share,
            elapsed.as_secs_f64(),
            seeds.len(),
            stalls(&ceim_iters),
            stalls(&cem_iters),
        ),
    ))
}

// ---------------------------------------------------------------- 7 and 9

fn gcnnas(args: &[&str]) -> std::result::Result<String, String> {
    let out = Command::new(env!("CARGO_BIN_EXE_gcnnas"))
        .arg("--threads")
        .arg("1")
        .args(args)
        .output()
        .map_err(|e| e.to_string())?;
    if !out.status.success() {
        return Err(format!("gcnnas {}: {}", args.join(" "), String::from_utf8_lossy(&out.stderr).trim()));
    }
    Ok(String::from_utf8_lossy(&out.stdout).into_owned())
}

fn parse_top1(stdout: &str) -> std::result::Result<f64, String> {
    stdout
        .split_whitespace()
        .find_map(|w| w.strip_prefix("top1=")?.strip_suffix('%')?.parse::<f64>().ok())
        .ok_or_else(|| format!("no top1 in {stdout:?}"))
}

fn path_str(p: &Path) -> &str {
    p.to_str().expect("utf-8 temp path")
}

struct PipelineRun {
    dir: PathBuf,
    searched_top1: f64,
    baseline_top1: f64,
    elapsed: Duration,
}

/// gen-data → search → derive-arch → train → eval for one seed, then the
/// fixed-graph baseline trained on the same data with the same recipe.
fn pipeline(root: &Path, name: &str, seed: u64) -> std::result::Result<PipelineRun, String> {
    let dir = root.join(name);
    let mut cfg = RunConfig::default();
    cfg.seed = seed;
    cfg.out = dir.join("searched");
    cfg.data.path = Some(dir.join("data.skel"));
    std::fs::create_dir_all(&dir).map_err(|e| e.to_string())?;
    let cfg_path = dir.join("run.toml");
    std::fs::write(&cfg_path, cfg.to_toml()).map_err(|e| e.to_string())?;
    let c = path_str(&cfg_path);
    let out = &cfg.out;

    let start = Instant::now();
    gcnnas(&["gen-data", "--config", c])?;
    gcnnas(&["search", "--config", c])?;
    gcnnas(&["derive-arch", "--alpha", path_str(&out.join(ALPHA_FILE)), "--out", path_str(out)])?;
    gcnnas(&["train", "--config", c, "--arch", path_str(&out.join(ARCH_JSON))])?;
    let searched = parse_top1(&gcnnas(&["eval", "--config", c, "--checkpoint", path_str(&out.join(CHECKPOINT_FILE))])?)?;
    let elapsed = start.elapsed();

    let base = dir.join("baseline");
    std::fs::create_dir_all(&base).map_err(|e| e.to_string())?;
    let base_arch = base.join("arch.json");
    std::fs::write(&base_arch, DerivedArchitecture::uniform(ModuleKind::L, 4).to_json()).map_err(|e| e.to_string())?;
    let b = path_str(&base);
    gcnnas(&["train", "--config", c, "--out", b, "--arch", path_str(&base_arch)])?;
    let baseline =
        parse_top1(&gcnnas(&["eval", "--config", c, "--out", b, "--checkpoint", path_str(&base.join(CHECKPOINT_FILE))])?)?;

    Ok(PipelineRun { dir, searched_top1: searched, baseline_top1: baseline, elapsed })
}

fn desk_pipeline(root: &Path) -> (Verdict, Option<PipelineRun>) {
    let mut runs = Vec::new();
    for seed in 0..3 {
        match pipeline(root, &format!("seed{seed}"), seed) {
            Ok(r) => runs.push(r),
            Err(e) => return (failed(e), None),
        }
    }
    let searched = runs.iter().map(|r| r.searched_top1).sum::<f64>() / 3.0;
    let baseline = runs.iter().map(|r| r.baseline_top1).sum::<f64>() / 3.0;
    let slowest = runs.iter().map(|r| r.elapsed).max().unwrap_or_default();
    let per_seed: Vec<String> =
        runs.iter().map(|r| format!("{:.1}/{:.1}", r.searched_top1, r.baseline_top1)).collect();
    let v = verdict(
        searched - baseline >= 5.0 && slowest < Duration::from_secs(15 * 60),
        format!(
            "searched {searched:.2}% vs L-only {baseline:.2}% top-1 over 3 seeds ({}), slowest pipeline {:.0}s",
            per_seed.join(", "),
            slowest.as_secs_f64()
        ),
    );
    (v, runs.into_iter().next())
}

fn reproducible_pipeline(root: &Path, first: Option<PipelineRun>) -> Verdict {
    let Some(first) = first else {
        return verdict(false, "the reference pipeline did not complete");
    };
    let again = match pipeline(root, "seed0-repeat", 0) {
        Ok(r) => r,
        Err(e) => return failed(e),
    };
    let same = |f: &str| {
        let a = std::fs::read(first.dir.join("searched").join(f));
        let b = std::fs::read(again.dir.join("searched").join(f));
        matches!((a, b), (Ok(a), Ok(b)) if a == b)
    };
    let (metrics, arch) = (same(METRICS_FILE), same(ARCH_TABLE));
    verdict(metrics && arch, format!("{METRICS_FILE} identical: {metrics}; {ARCH_TABLE} identical: {arch}"))
}

// ---------------------------------------------------------------- 8

const PUBLISHED_TABLE: &str = "\
layer L    L4n  L4   L3   L2   S    T    ST
K1                        ✓    ✓    ✓    ✓
K2                             ✓    ✓    ✓
K3                             ✓    ✓    ✓
K4                             ✓    ✓    ✓
K5                        ✓    ✓    ✓
K6                        ✓         ✓
K7         ✓              ✓    ✓    ✓    ✓
K8                        ✓         ✓
K9                        ✓         ✓
K10                                 ✓
";

fn published_pattern() -> Result<Verdict> {
    use ModuleKind::*;
    let selected: [&[ModuleKind]; 10] = [
        &[L2, SpatialM, TemporalM, SpatioTemporalM],
        &[SpatialM, TemporalM, SpatioTemporalM],
        &[SpatialM, TemporalM, SpatioTemporalM],
        &[SpatialM, TemporalM, SpatioTemporalM],
        &[L2, SpatialM, TemporalM],
        &[L2, TemporalM],
        &[L4n, L2, SpatialM, TemporalM, SpatioTemporalM],
        &[L2, TemporalM],
        &[L2, TemporalM],
        &[TemporalM],
    ];
    let mut raw = Vec::new();
    for (k, layer) in selected.iter().enumerate() {
        for kind in ModuleKind::ALL {
            raw.push(match (layer.contains(&kind), kind) {
                (true, _) => 1.0,
                // Never-selected graphs get negative raw weights in a few
                // layers, exercising the positive-part mapping.
                (false, L) if k % 3 == 0 => -0.3,
                (false, _) => 0.02,
            });
        }
    }
    let alpha = ArchParams::from_raw(10, raw)?;
    let table = derive_architecture(&alpha, 0.1).to_table();
    Ok(verdict(table == PUBLISHED_TABLE, if table == PUBLISHED_TABLE { "table reproduced".into() } else { table }))
}

// ----------------------------------------------------------------

#[test]
fn acceptance() {
    let mut results: Vec<(u32, &str, Verdict)> = Vec::new();
    let mut record = |id: u32, name: &'static str, v: Result<Verdict>| {
        let v = v.unwrap_or_else(failed);
        println!("[{}] criterion {id} ({name}): {}", if v.pass { "PASS" } else { "FAIL" }, v.detail);
        results.push((id, name, v));
    };
    record(1, "Chebyshev recursion vs eigendecomposition", chebyshev_against_eigendecomposition());
    record(2, "finite-difference gradients", finite_difference_gradients());
    record(3, "dynamic modules row-stochastic and equivariant", dynamic_invariants());
    record(4, "mixing and sampling consistency", mixing_and_sampling());
    record(5, "search update machinery", ceim_machinery());
    record(6, "sphere surrogate", sphere_surrogate());
    record(8, "published pattern through derivation", published_pattern());

    let root = tempfile::tempdir().expect("temp dir");
    let (v7, first) = desk_pipeline(root.path());
    record(7, "desk pipeline beats the fixed-graph baseline", Ok(v7));
    record(9, "pipeline reproducibility", Ok(reproducible_pipeline(root.path(), first)));

    let failures: Vec<u32> = results.iter().filter(|r| !r.2.pass).map(|r| r.0).collect();
    assert!(failures.is_empty(), "failed criteria: {failures:?}");
}
