//! The `gcnnas` pipeline as a library: every subcommand is a `cmd_*`
//! function taking a [`RunConfig`], so the binary stays a thin argument
//! parser and tests can drive the same code paths.

mod config;

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use gcn_nas::ceim::search;
use gcn_nas::data::{
    bone_transform, evaluate, fused_scores, predict_logits, topk_accuracy, train_epoch, Dataset, EvalReport, Split,
    TrainMixing,
};
use gcn_nas::graph::LambdaMax;
use gcn_nas::modules::MODULE_COUNT;
use gcn_nas::search::{mean_architecture, SupernetObjective};
use gcn_nas::supernet::{derive_architecture, ArchParams, DerivedArchitecture, Mixing, Network, SupernetConfig};
use gcn_nas::tensor::Checkpoint;
use gcn_nas::{NasError, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use config::{
    sub_seed, DataSection, NetworkSection, Preset, RunConfig, SearchSection, SeedStream, Stream, TrainSection,
    RESOLVED_CONFIG,
};

pub const SEARCH_LOG: &str = "search.log";
pub const ALPHA_FILE: &str = "alpha.bin";
pub const ARCH_TABLE: &str = "arch.txt";
pub const ARCH_JSON: &str = "arch.json";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const METRICS_FILE: &str = "metrics.csv";

/// Largest k reported as "top-5": datasets with fewer classes report top-C.
pub fn top5(classes: usize) -> usize {
    classes.min(5)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DataSummary {
    pub path: PathBuf,
    pub samples: usize,
    pub classes: usize,
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

pub fn cmd_gen_data(cfg: &RunConfig) -> Result<DataSummary> {
    let data = gcn_nas::data::generate_synthetic(&cfg.data.generator, sub_seed(cfg.seed, SeedStream::Data))?;
    let path = cfg.data_path();
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    data.save(&path)?;
    cfg.write_resolved()?;
    Ok(DataSummary {
        path,
        samples: data.len(),
        classes: data.classes,
        train: data.indices(Split::Train).len(),
        val: data.indices(Split::Val).len(),
        test: data.indices(Split::Test).len(),
    })
}

/// Loads the run's dataset in the requested stream.
pub fn load_dataset(cfg: &RunConfig, stream: Stream) -> Result<Dataset> {
    let data = Dataset::load(&cfg.data_path())?;
    match stream {
        Stream::Joint => Ok(data),
        Stream::Bone => {
            let skeleton = data.skeleton.clone();
            data.map_samples(|s| bone_transform(s, &skeleton))
        }
    }
}

fn network_config(cfg: &RunConfig, data: &Dataset) -> Result<SupernetConfig> {
    cfg.network_config([data.channels, data.frames, data.joints, data.bodies], data.classes)
}

#[derive(Clone, Debug)]
pub struct SearchReport {
    /// Exported architecture weights: the best sample of the final
    /// population, or the distribution mean if no population was evaluated.
    pub alpha: ArchParams,
    pub architecture: DerivedArchitecture,
    pub best_fitness: Option<f64>,
    pub iterations: usize,
}

pub fn cmd_search(cfg: &RunConfig) -> Result<SearchReport> {
    let data = load_dataset(cfg, cfg.data.stream)?;
    let net_cfg = network_config(cfg, &data)?;
    let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(cfg.seed, SeedStream::Search));
    let adjacency = data.skeleton.adjacency()?;
    let net = Network::supernet(&net_cfg, &adjacency, LambdaMax::Fixed(cfg.network.lambda_max), &mut rng)?;
    let mut objective = SupernetObjective::new(
        net,
        &data,
        &cfg.search_recipe(),
        cfg.search.mode,
        cfg.search.fitness,
        sub_seed(cfg.seed, SeedStream::Train),
    )?;

    cfg.write_resolved()?;
    let mut log = BufWriter::new(File::create(cfg.out.join(SEARCH_LOG))?);
    let layers = net_cfg.blocks();
    let outcome = search(&mut objective, layers * MODULE_COUNT, &cfg.ceim(), &mut rng, |record| {
        let line = serde_json::to_string(record).map_err(|e| NasError::Data(e.to_string()))?;
        writeln!(log, "{line}")?;
        Ok(())
    })?;
    log.flush()?;

    let (alpha, best_fitness) = match &outcome.best {
        Some(best) => (ArchParams::from_raw(layers, best.alpha.clone())?, Some(best.fitness)),
        None => (mean_architecture(outcome.distribution.mu(), layers)?, None),
    };
    alpha.save(&cfg.out.join(ALPHA_FILE))?;
    let architecture = derive_architecture(&alpha, cfg.search.threshold);
    write_architecture(&architecture, &cfg.out)?;
    Ok(SearchReport { alpha, architecture, best_fitness, iterations: outcome.records.len() })
}

fn write_architecture(arch: &DerivedArchitecture, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join(ARCH_TABLE), arch.to_table())?;
    fs::write(dir.join(ARCH_JSON), arch.to_json())?;
    Ok(())
}

/// Re-derives the architecture from an exported α file.
pub fn cmd_derive_arch(alpha_path: &Path, threshold: f64, out: &Path) -> Result<DerivedArchitecture> {
    let alpha = ArchParams::load(alpha_path)?;
    let arch = derive_architecture(&alpha, threshold);
    write_architecture(&arch, out)?;
    Ok(arch)
}

/// Reads an architecture in either export format.
pub fn read_architecture(path: &Path) -> Result<DerivedArchitecture> {
    let text = fs::read_to_string(path)?;
    if text.trim_start().starts_with('{') {
        DerivedArchitecture::from_json(&text)
    } else {
        DerivedArchitecture::from_table(&text)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct CheckpointInfo {
    stream: Stream,
    epochs: usize,
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    pub final_val: Option<EvalReport>,
    pub train_top1: f64,
    pub final_loss: f64,
}

/// Trains the finalized network for `arch` and writes the checkpoint and
/// per-epoch metrics.
pub fn cmd_train(cfg: &RunConfig, arch_path: &Path) -> Result<TrainReport> {
    let arch = read_architecture(arch_path)?;
    let data = load_dataset(cfg, cfg.data.stream)?;
    let net_cfg = network_config(cfg, &data)?;
    if arch.layers().len() != net_cfg.blocks() {
        return Err(NasError::structural(format!(
            "architecture has {} layers, the network {}",
            arch.layers().len(),
            net_cfg.blocks()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(cfg.seed, SeedStream::Train));
    let adjacency = data.skeleton.adjacency()?;
    let lambda = LambdaMax::Fixed(cfg.network.lambda_max);
    let mut net = Network::fixed(&net_cfg, &adjacency, lambda, &arch, cfg.train.complementary, &mut rng)?;

    let recipe = cfg.train_recipe();
    let mut opt = recipe.optimizer();
    let train = data.indices(Split::Train);
    let val = data.indices(Split::Val);
    let ks = [1, top5(data.classes)];
    cfg.write_resolved()?;
    let mut metrics = BufWriter::new(File::create(cfg.out.join(METRICS_FILE))?);
    writeln!(metrics, "epoch,lr,train_loss,val_loss,val_top1,val_top5")?;
    let mut final_val = None;
    let mut final_loss = f64::NAN;
    for epoch in 0..recipe.epochs {
        opt.set_epoch(epoch);
        let lr = opt.lr();
        final_loss = train_epoch(&mut net, &data, &train, TrainMixing::Fixed, &mut opt, recipe.batch_size, &mut rng)?;
        if val.is_empty() {
            writeln!(metrics, "{},{lr},{final_loss},,,", epoch + 1)?;
            continue;
        }
        let r = evaluate(&net, &data, &val, &Mixing::Fixed, &ks, 64)?;
        writeln!(metrics, "{},{lr},{final_loss},{},{},{}", epoch + 1, r.loss, r.topk[0].1, r.topk[1].1)?;
        final_val = Some(r);
    }
    metrics.flush()?;

    let info = CheckpointInfo { stream: cfg.data.stream, epochs: recipe.epochs };
    let extra = serde_json::to_value(&info).expect("checkpoint info serializes");
    net.to_checkpoint(extra).save(&cfg.out.join(CHECKPOINT_FILE))?;
    let train_top1 = evaluate(&net, &data, &train, &Mixing::Fixed, &[1], 64)?.topk[0].1;
    Ok(TrainReport { final_val, train_top1, final_loss })
}

fn load_checkpoint(path: &Path) -> Result<(Network<f32>, CheckpointInfo)> {
    let (net, extra) = Network::from_checkpoint(&Checkpoint::load(path)?)?;
    let info = serde_json::from_value(extra).map_err(|e| NasError::Parse(format!("checkpoint run info: {e}")))?;
    Ok((net, info))
}

fn check_compatible(net: &Network<f32>, data: &Dataset) -> Result<()> {
    let c = net.config();
    let want = [c.in_channels, c.joints, c.bodies, c.classes];
    let have = [data.channels, data.joints, data.bodies, data.classes];
    if want != have {
        return Err(NasError::structural(format!(
            "checkpoint expects channels/joints/bodies/classes {want:?}, data has {have:?}"
        )));
    }
    Ok(())
}

fn stream_logits(cfg: &RunConfig, checkpoint: &Path, split: Split) -> Result<(gcn_nas::tensor::Tensor<f32>, Vec<usize>)> {
    let (net, info) = load_checkpoint(checkpoint)?;
    let data = load_dataset(cfg, info.stream)?;
    check_compatible(&net, &data)?;
    let idx = data.indices(split);
    if idx.is_empty() {
        return Err(NasError::Data(format!("the {split:?} split is empty")));
    }
    let labels = idx.iter().map(|&i| data.label(i)).collect();
    Ok((predict_logits(&net, &data, &idx, &Mixing::Fixed, 64)?, labels))
}

/// Top-1/top-5 and loss of a checkpoint on one split of the run's data,
/// using the stream the checkpoint was trained on.
pub fn cmd_eval(cfg: &RunConfig, checkpoint: &Path, split: Split) -> Result<EvalReport> {
    let (net, info) = load_checkpoint(checkpoint)?;
    let data = load_dataset(cfg, info.stream)?;
    check_compatible(&net, &data)?;
    evaluate(&net, &data, &data.indices(split), &Mixing::Fixed, &[1, top5(data.classes)], 64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct FuseReport {
    pub first: Vec<(usize, f64)>,
    pub second: Vec<(usize, f64)>,
    pub fused: Vec<(usize, f64)>,
}

/// Per-stream and score-fused accuracy of two checkpoints.
pub fn cmd_fuse(cfg: &RunConfig, first: &Path, second: &Path, split: Split) -> Result<FuseReport> {
    let (a, labels) = stream_logits(cfg, first, split)?;
    let (b, labels_b) = stream_logits(cfg, second, split)?;
    if labels != labels_b {
        return Err(NasError::structural("the two checkpoints were evaluated on different samples"));
    }
    let fused = fused_scores(&a, &b)?;
    let ks = [1, top5(a.shape()[1])];
    let acc = |t: &gcn_nas::tensor::Tensor<f32>| -> Result<Vec<(usize, f64)>> {
        ks.iter().map(|&k| Ok((k, topk_accuracy(t, &labels, k)?))).collect()
    };
    Ok(FuseReport { first: acc(&a)?, second: acc(&b)?, fused: acc(&fused)? })
}

/// `error[category]: message`, the single-line form every failure is
/// reported in.
pub fn format_error(e: &NasError) -> String {
    let msg = e.to_string();
    let prefix = format!("{} error: ", e.category());
    let body = msg.strip_prefix(&prefix).unwrap_or(&msg);
    format!("error[{}]: {}", e.category(), body.replace('\n', " "))
}
