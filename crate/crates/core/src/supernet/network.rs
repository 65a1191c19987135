use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::arch::{ArchParams, DerivedArchitecture};
use super::SupernetConfig;
use crate::error::{NasError, Result};
use crate::graph::{AdjacencyMatrix, LambdaMax, Matrix};
use crate::modules::{default_embed_channels, CorrelationParams, ModuleKind, StaticModules, TEMPORAL_KERNEL};
use crate::tensor::{BatchNormStats, Checkpoint, ParamId, ParamStore, Real, Tape, Tensor, Var};

const BN_EPS: f64 = 1e-5;
const BN_MOMENTUM: f64 = 0.1;

/// How each block of a network combines its modules during one forward pass.
#[derive(Clone, Copy, Debug)]
pub enum Mixing<'a> {
    /// Weighted sum of all modules with positive normalized weight.
    Continuous(&'a ArchParams),
    /// Exactly one module per layer.
    Sampled(&'a [ModuleKind]),
    /// Unweighted sum of a fixed network's selected modules.
    Fixed,
}

/// Which modules the blocks of a network own.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Topology {
    Supernet,
    Fixed { arch: DerivedArchitecture, complementary: bool },
}

/// Per-pass state: training or inference normalization, and the batch
/// statistics gathered in training mode.
#[derive(Debug)]
pub struct ForwardCtx<T> {
    training: bool,
    stats: Vec<(usize, BatchNormStats<T>)>,
}

impl<T> ForwardCtx<T> {
    pub fn train() -> Self {
        ForwardCtx { training: true, stats: Vec::new() }
    }

    pub fn eval() -> Self {
        ForwardCtx { training: false, stats: Vec::new() }
    }

    pub fn is_training(&self) -> bool {
        self.training
    }
}

#[derive(Clone, Debug)]
struct Norm<T> {
    name: String,
    gamma: ParamId,
    beta: ParamId,
    mean: Vec<T>,
    var: Vec<T>,
}

#[derive(Clone, Debug)]
struct Block {
    stride: usize,
    dynamic: Vec<CorrelationParams>,
    theta: ParamId,
    bn: usize,
    residual: Option<(ParamId, usize)>,
    tconv: ParamId,
    tbn: usize,
    complement: Option<ParamId>,
}

/// GCN blocks, pooling and classifier, with its parameters.
#[derive(Clone, Debug)]
pub struct Network<T> {
    config: SupernetConfig,
    topology: Topology,
    adjacency: AdjacencyMatrix,
    lambda_max: f64,
    statics: Vec<Tensor<T>>,
    store: ParamStore<T>,
    norms: Vec<Norm<T>>,
    blocks: Vec<Block>,
    fc_w: ParamId,
    fc_b: ParamId,
}

/// Builds the post-search network: each layer sums its selected modules
/// and a zero-initialized learnable complementary graph.
pub fn finalize_network<T: Real>(
    arch: &DerivedArchitecture,
    config: &SupernetConfig,
    adjacency: &AdjacencyMatrix,
    lambda_max: LambdaMax,
    rng: &mut impl Rng,
) -> Result<Network<T>> {
    Network::fixed(config, adjacency, lambda_max, arch, true, rng)
}

/// `N × C × T × V × M` to `(N·M) × C × T × V`, bodies of one sample adjacent.
pub fn fold_bodies<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let &[n, c, t, v, m] = x.shape() else {
        return Err(NasError::structural(format!("expected N×C×T×V×M input, got {:?}", x.shape())));
    };
    let src = x.data();
    let mut out = vec![T::zero(); src.len()];
    let ctv = c * t * v;
    for s in 0..n {
        for (i, &val) in src[s * ctv * m..(s + 1) * ctv * m].iter().enumerate() {
            let (pos, body) = (i / m, i % m);
            out[(s * m + body) * ctv + pos] = val;
        }
    }
    Tensor::new(&[n * m, c, t, v], out)
}

impl<T: Real> Network<T> {
    /// All eight modules in every block.
    pub fn supernet(
        config: &SupernetConfig,
        adjacency: &AdjacencyMatrix,
        lambda_max: LambdaMax,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Self::build(config, adjacency, lambda_max, Topology::Supernet, rng)
    }

    /// Only the modules of `arch`, with or without complementary graphs.
    pub fn fixed(
        config: &SupernetConfig,
        adjacency: &AdjacencyMatrix,
        lambda_max: LambdaMax,
        arch: &DerivedArchitecture,
        complementary: bool,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let topology = Topology::Fixed { arch: arch.clone(), complementary };
        Self::build(config, adjacency, lambda_max, topology, rng)
    }

    fn build(
        config: &SupernetConfig,
        adjacency: &AdjacencyMatrix,
        lambda_max: LambdaMax,
        topology: Topology,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        config.validate()?;
        if adjacency.n() != config.joints {
            return Err(NasError::structural(format!(
                "graph has {} nodes but the network expects {} joints",
                adjacency.n(),
                config.joints
            )));
        }
        if let Topology::Fixed { arch, .. } = &topology {
            if arch.layers().len() != config.blocks() {
                return Err(NasError::structural(format!(
                    "architecture has {} layers but the network has {} blocks",
                    arch.layers().len(),
                    config.blocks()
                )));
            }
        }
        let l = crate::graph::laplacian_paper(adjacency);
        let lambda = lambda_max.resolve(&l);
        let statics_f64 = StaticModules::new(adjacency, LambdaMax::Fixed(lambda))?;
        let statics = ModuleKind::ALL.iter().filter(|k| !k.is_dynamic()).map(|&k| statics_f64.tensor(k).expect("static")).collect();

        let mut store = ParamStore::new();
        let mut norms = Vec::new();
        let mut add_norm = |store: &mut ParamStore<T>, name: String, c: usize| {
            let gamma = store.add(format!("{name}.gamma"), Tensor::full(&[c], T::one()), false);
            let beta = store.add(format!("{name}.beta"), Tensor::zeros(&[c]), false);
            norms.push(Norm { name, gamma, beta, mean: vec![T::zero(); c], var: vec![T::one(); c] });
            norms.len() - 1
        };
        let v = config.joints;
        let mut blocks = Vec::with_capacity(config.blocks());
        for k in 0..config.blocks() {
            let cin = if k == 0 { config.in_channels } else { config.channels[k - 1] };
            let cout = config.channels[k];
            let prefix = format!("block{}", k + 1);
            let dynamic_kinds: Vec<ModuleKind> = match &topology {
                Topology::Supernet => ModuleKind::ALL.iter().copied().filter(|k| k.is_dynamic()).collect(),
                Topology::Fixed { arch, .. } => arch.layers()[k].iter().copied().filter(|k| k.is_dynamic()).collect(),
            };
            let dynamic = dynamic_kinds
                .into_iter()
                .map(|kind| CorrelationParams::init(&mut store, &prefix, kind, cin, default_embed_channels(cin), rng))
                .collect::<Result<_>>()?;
            let theta = store.add_fan_in_uniform(format!("{prefix}.theta"), &[cout, cin, 1, 1], rng);
            let bn = add_norm(&mut store, format!("{prefix}.gcn_bn"), cout);
            let residual = (cin != cout).then(|| {
                let w = store.add_fan_in_uniform(format!("{prefix}.down"), &[cout, cin, 1, 1], rng);
                (w, add_norm(&mut store, format!("{prefix}.down_bn"), cout))
            });
            let tconv = store.add_fan_in_uniform(format!("{prefix}.tcn"), &[cout, cout, TEMPORAL_KERNEL, 1], rng);
            let tbn = add_norm(&mut store, format!("{prefix}.tcn_bn"), cout);
            let complement = match &topology {
                Topology::Fixed { complementary: true, .. } => {
                    Some(store.add(format!("{prefix}.complement"), Tensor::zeros(&[v, v]), true))
                }
                _ => None,
            };
            blocks.push(Block { stride: config.strides[k], dynamic, theta, bn, residual, tconv, tbn, complement });
        }
        let last = *config.channels.last().expect("validated");
        let fc_w = store.add("fc.weight", Tensor::zeros(&[config.classes, last]), true);
        let fc_b = store.add("fc.bias", Tensor::zeros(&[config.classes]), false);
        Ok(Network {
            config: config.clone(),
            topology,
            adjacency: adjacency.clone(),
            lambda_max: lambda,
            statics,
            store,
            norms,
            blocks,
            fc_w,
            fc_b,
        })
    }

    pub fn config(&self) -> &SupernetConfig {
        &self.config
    }

    pub fn topology(&self) -> &Topology {
        &self.topology
    }

    pub fn adjacency(&self) -> &AdjacencyMatrix {
        &self.adjacency
    }

    pub fn store(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    /// Number of trainable scalars.
    pub fn param_count(&self) -> usize {
        self.store.numel()
    }

    /// Propagation matrix of a static module, in network precision.
    pub fn static_matrix(&self, kind: ModuleKind) -> Option<&Tensor<T>> {
        (!kind.is_dynamic()).then(|| &self.statics[kind.index()])
    }

    /// Module weights of layer `k` under `mixing`.
    pub fn layer_terms(&self, mixing: &Mixing<'_>, k: usize) -> Result<Vec<(ModuleKind, f64)>> {
        let blocks = self.blocks.len();
        match (mixing, &self.topology) {
            (Mixing::Continuous(alpha), Topology::Supernet) => {
                if alpha.layers() != blocks {
                    return Err(NasError::structural(format!("{} α layers for {blocks} blocks", alpha.layers())));
                }
                let w = alpha.weights(k)?;
                Ok(ModuleKind::ALL.iter().filter(|m| w[m.index()] > 0.0).map(|&m| (m, w[m.index()])).collect())
            }
            (Mixing::Sampled(choices), Topology::Supernet) => {
                if choices.len() != blocks {
                    return Err(NasError::structural(format!("{} sampled modules for {blocks} blocks", choices.len())));
                }
                Ok(vec![(choices[k], 1.0)])
            }
            (Mixing::Fixed, Topology::Fixed { arch, .. }) => Ok(arch.layers()[k].iter().map(|&m| (m, 1.0)).collect()),
            _ => Err(NasError::argument("mixing mode does not match the network topology")),
        }
    }

    /// Logits `N × classes` for an `N × C × T × V × M` batch.
    pub fn forward(&self, tape: &mut Tape<T>, input: &Tensor<T>, mixing: &Mixing<'_>, ctx: &mut ForwardCtx<T>) -> Result<Var> {
        let shape = input.shape();
        let c = &self.config;
        if shape.len() != 5 || shape[1] != c.in_channels || shape[3] != c.joints || shape[4] != c.bodies || shape[2] == 0 {
            return Err(NasError::structural(format!(
                "input {shape:?} does not match N×{}×T×{}×{}",
                c.in_channels, c.joints, c.bodies
            )));
        }
        let mut h = tape.constant(fold_bodies(input)?);
        for k in 0..self.blocks.len() {
            let terms = self.layer_terms(mixing, k)?;
            h = self.block_forward(tape, k, h, &terms, ctx)?;
        }
        let pooled = tape.global_avg_pool(h)?;
        let pooled = tape.group_mean(pooled, c.bodies)?;
        let (w, b) = (tape.param(&self.store, self.fc_w), tape.param(&self.store, self.fc_b));
        tape.linear(pooled, w, b)
    }

    /// One GCN block: `relu(BN(Θ(Σ w_i A_i) h) + R(h))` followed by the
    /// temporal unit `relu(BN(conv9(·)))`.
    pub fn block_forward(
        &self,
        tape: &mut Tape<T>,
        k: usize,
        h: Var,
        terms: &[(ModuleKind, f64)],
        ctx: &mut ForwardCtx<T>,
    ) -> Result<Var> {
        let block = self.blocks.get(k).ok_or_else(|| NasError::argument(format!("no block {k}")))?;
        let adj = self.mixed_adjacency(tape, k, h, terms)?;
        let g = tape.propagate(adj, h)?;
        let theta = tape.param(&self.store, block.theta);
        let g = tape.conv_pointwise(g, theta)?;
        let g = self.norm(tape, block.bn, g, ctx)?;
        let r = match block.residual {
            None => h,
            Some((w, bn)) => {
                let w = tape.param(&self.store, w);
                let r = tape.conv_pointwise(h, w)?;
                self.norm(tape, bn, r, ctx)?
            }
        };
        let z = tape.add(g, r)?;
        let z = tape.relu(z);
        let tw = tape.param(&self.store, block.tconv);
        let t = tape.conv_temporal(z, tw, block.stride)?;
        let t = self.norm(tape, block.tbn, t, ctx)?;
        Ok(tape.relu(t))
    }

    /// The propagation matrix a block applies to `h`.
    pub fn mixed_adjacency(&self, tape: &mut Tape<T>, k: usize, h: Var, terms: &[(ModuleKind, f64)]) -> Result<Var> {
        let block = self.blocks.get(k).ok_or_else(|| NasError::argument(format!("no block {k}")))?;
        let mut parts = Vec::with_capacity(terms.len() + 1);
        for &(kind, w) in terms {
            let a = if kind.is_dynamic() {
                let params = block
                    .dynamic
                    .iter()
                    .find(|d| d.kind == kind)
                    .ok_or_else(|| NasError::argument(format!("block {} has no {kind} module", k + 1)))?;
                params.adjacency(tape, &self.store, h)?
            } else {
                tape.constant(self.statics[kind.index()].clone())
            };
            parts.push((a, T::of(w)));
        }
        if let Some(c) = block.complement {
            parts.push((tape.param(&self.store, c), T::one()));
        }
        match parts.as_slice() {
            [] => Err(NasError::argument(format!("block {} has no active module", k + 1))),
            [(a, w)] if *w == T::one() => Ok(*a),
            _ => {
                let n = tape.value(h).shape()[0];
                tape.combine_adjacency(&parts, n)
            }
        }
    }

    fn norm(&self, tape: &mut Tape<T>, idx: usize, x: Var, ctx: &mut ForwardCtx<T>) -> Result<Var> {
        let n = &self.norms[idx];
        let (g, b) = (tape.param(&self.store, n.gamma), tape.param(&self.store, n.beta));
        if ctx.training {
            let (y, stats) = tape.batch_norm_train(x, g, b, T::of(BN_EPS))?;
            ctx.stats.push((idx, stats));
            Ok(y)
        } else {
            tape.batch_norm_eval(x, g, b, &n.mean, &n.var, T::of(BN_EPS))
        }
    }

    /// Folds the batch statistics of a training pass into the running
    /// estimates used at inference.
    pub fn commit_stats(&mut self, ctx: ForwardCtx<T>) {
        let m = T::of(BN_MOMENTUM);
        for (idx, s) in ctx.stats {
            let norm = &mut self.norms[idx];
            let unbias = if s.count > 1 { T::of(s.count as f64 / (s.count - 1) as f64) } else { T::one() };
            for c in 0..norm.mean.len() {
                norm.mean[c] = (T::one() - m) * norm.mean[c] + m * s.mean[c];
                norm.var[c] = (T::one() - m) * norm.var[c] + m * s.var[c] * unbias;
            }
        }
    }

    /// Parameters, running statistics and enough metadata to rebuild the
    /// network. `extra` is stored alongside for the caller's own use.
    pub fn to_checkpoint(&self, extra: serde_json::Value) -> Checkpoint {
        let meta = NetworkMeta {
            config: self.config.clone(),
            topology: self.topology.clone(),
            lambda_max: self.lambda_max,
            extra,
        };
        let mut tensors = Vec::new();
        let n = self.adjacency.n();
        tensors.push((ADJACENCY_KEY.to_string(), Tensor::from_f64(&[n, n], self.adjacency.matrix().as_slice()).expect("square")));
        for (_, p) in self.store.iter() {
            tensors.push((p.name.clone(), p.value.cast()));
        }
        for norm in &self.norms {
            let c = norm.mean.len();
            let cast = |v: &[T]| Tensor::new(&[c], v.iter().map(|x| x.f64() as f32).collect()).expect("length");
            tensors.push((format!("{}.running_mean", norm.name), cast(&norm.mean)));
            tensors.push((format!("{}.running_var", norm.name), cast(&norm.var)));
        }
        Checkpoint { meta: serde_json::to_string(&meta).expect("metadata serializes"), tensors }
    }

    /// Rebuilds a network saved by [`to_checkpoint`](Self::to_checkpoint),
    /// returning it with the stored `extra` value.
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<(Self, serde_json::Value)> {
        let meta: NetworkMeta =
            serde_json::from_str(&ck.meta).map_err(|e| NasError::Parse(format!("checkpoint metadata: {e}")))?;
        let missing = |name: &str| NasError::Parse(format!("checkpoint lacks tensor `{name}`"));
        let adj = ck.get(ADJACENCY_KEY).ok_or_else(|| missing(ADJACENCY_KEY))?;
        let n = meta.config.joints;
        if adj.shape() != [n, n] {
            return Err(NasError::Parse("checkpoint adjacency has the wrong shape".into()));
        }
        let adjacency = AdjacencyMatrix::from_matrix(Matrix::from_vec(
            n,
            n,
            adj.data().iter().map(|&x| x as f64).collect(),
        )?)?;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut net =
            Self::build(&meta.config, &adjacency, LambdaMax::Fixed(meta.lambda_max), meta.topology.clone(), &mut rng)?;
        let ids: Vec<(ParamId, String)> = net.store.iter().map(|(id, p)| (id, p.name.clone())).collect();
        for (id, name) in ids {
            let t = ck.get(&name).ok_or_else(|| missing(&name))?;
            net.store.assign(id, t.cast()).map_err(|e| NasError::Parse(format!("tensor `{name}`: {e}")))?;
        }
        for norm in &mut net.norms {
            for (suffix, dst) in [("running_mean", &mut norm.mean), ("running_var", &mut norm.var)] {
                let key = format!("{}.{suffix}", norm.name);
                let t = ck.get(&key).ok_or_else(|| missing(&key))?;
                if t.len() != dst.len() {
                    return Err(NasError::Parse(format!("tensor `{key}` has the wrong length")));
                }
                *dst = t.data().iter().map(|&x| T::of(x as f64)).collect();
            }
        }
        Ok((net, meta.extra))
    }
}

const ADJACENCY_KEY: &str = "graph.adjacency";

#[derive(Serialize, Deserialize)]
struct NetworkMeta {
    config: SupernetConfig,
    topology: Topology,
    lambda_max: f64,
    extra: serde_json::Value,
}
