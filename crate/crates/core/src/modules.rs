//! The eight graph function modules.
//!
//! Five are static polynomials of the skeleton graph (`L`, `L2`, `L3`, `L4`
//! and the row-normalized `L4n`); three build an input-dependent adjacency
//! from pairwise joint similarity (`SpatialM`, `TemporalM`,
//! `SpatioTemporalM`). Every module yields a `V × V` propagation matrix
//! (shared across the batch for static modules, one per sample for the
//! dynamic ones).

use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{NasError, Result};
use crate::graph::{
    chebyshev_terms, laplacian_paper, rescale, row_normalize, AdjacencyMatrix, ChebyshevTerms, LambdaMax, Matrix,
    NormalizedLaplacian, MAX_CHEBYSHEV_ORDER,
};
use crate::tensor::{ParamId, ParamStore, Real, Tape, Tensor, Var};

pub const MODULE_COUNT: usize = 8;

/// Kernel length of the temporal projections.
pub const TEMPORAL_KERNEL: usize = 9;

/// One of the eight candidate modules. The declaration order fixes the
/// column order of the architecture matrix.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ModuleKind {
    L,
    L2,
    L3,
    L4,
    L4n,
    SpatialM,
    TemporalM,
    SpatioTemporalM,
}

impl ModuleKind {
    pub const ALL: [ModuleKind; MODULE_COUNT] = [
        ModuleKind::L,
        ModuleKind::L2,
        ModuleKind::L3,
        ModuleKind::L4,
        ModuleKind::L4n,
        ModuleKind::SpatialM,
        ModuleKind::TemporalM,
        ModuleKind::SpatioTemporalM,
    ];

    /// Column order of the published selection table.
    pub const TABLE_ORDER: [ModuleKind; MODULE_COUNT] = [
        ModuleKind::L,
        ModuleKind::L4n,
        ModuleKind::L4,
        ModuleKind::L3,
        ModuleKind::L2,
        ModuleKind::SpatialM,
        ModuleKind::TemporalM,
        ModuleKind::SpatioTemporalM,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn is_dynamic(self) -> bool {
        matches!(self, ModuleKind::SpatialM | ModuleKind::TemporalM | ModuleKind::SpatioTemporalM)
    }

    pub fn name(self) -> &'static str {
        match self {
            ModuleKind::L => "L",
            ModuleKind::L2 => "L2",
            ModuleKind::L3 => "L3",
            ModuleKind::L4 => "L4",
            ModuleKind::L4n => "L4n",
            ModuleKind::SpatialM => "S",
            ModuleKind::TemporalM => "T",
            ModuleKind::SpatioTemporalM => "ST",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == s)
    }
}

impl fmt::Display for ModuleKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Propagation matrix of a static module.
///
/// `L` is the renormalized operator `I + D^{-1/2} A D^{-1/2}` itself; `L2`,
/// `L3`, `L4` are single Chebyshev terms `T_r(L̂)`; `L4n` is `|T_4|` with
/// rows scaled to sum to one.
pub fn chebyshev_module(kind: ModuleKind, laplacian: &NormalizedLaplacian, terms: &ChebyshevTerms) -> Result<Matrix> {
    let need = |r: usize| -> Result<&Matrix> {
        if terms.order() < r {
            return Err(NasError::argument(format!("module {kind} needs Chebyshev order {r}")));
        }
        Ok(terms.term(r))
    };
    Ok(match kind {
        ModuleKind::L => laplacian.matrix().clone(),
        ModuleKind::L2 => need(2)?.clone(),
        ModuleKind::L3 => need(3)?.clone(),
        ModuleKind::L4 => need(4)?.clone(),
        ModuleKind::L4n => row_normalize(&need(4)?.map(f64::abs)),
        dynamic => return Err(NasError::argument(format!("{dynamic} is not a static module"))),
    })
}

/// The five static propagation matrices of one skeleton, indexed by
/// [`ModuleKind::index`].
#[derive(Clone, Debug)]
pub struct StaticModules {
    matrices: Vec<Matrix>,
}

impl StaticModules {
    pub fn new(adjacency: &AdjacencyMatrix, lambda_max: LambdaMax) -> Result<Self> {
        let l = laplacian_paper(adjacency);
        let lhat = rescale(&l, lambda_max.resolve(&l))?;
        let terms = chebyshev_terms(&lhat, MAX_CHEBYSHEV_ORDER)?;
        let matrices = ModuleKind::ALL[..5].iter().map(|&k| chebyshev_module(k, &l, &terms)).collect::<Result<_>>()?;
        Ok(StaticModules { matrices })
    }

    pub fn matrix(&self, kind: ModuleKind) -> Option<&Matrix> {
        self.matrices.get(kind.index())
    }

    pub fn joints(&self) -> usize {
        self.matrices[0].rows()
    }

    pub fn tensor<T: Real>(&self, kind: ModuleKind) -> Option<Tensor<T>> {
        self.matrix(kind).map(|m| Tensor::from_f64(&[m.rows(), m.cols()], m.as_slice()).expect("square matrix"))
    }
}

/// One projection branch (φ or ψ): an optional pointwise stage followed by
/// an optional temporal stage.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Projection {
    pub pointwise: Option<ParamId>,
    pub temporal: Option<ParamId>,
}

impl Projection {
    pub fn apply<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, h: Var) -> Result<Var> {
        let mut x = h;
        if let Some(p) = self.pointwise {
            let w = tape.param(store, p);
            x = tape.conv_pointwise(x, w)?;
        }
        if let Some(p) = self.temporal {
            let w = tape.param(store, p);
            x = tape.conv_temporal(x, w, 1)?;
        }
        Ok(x)
    }
}

/// Projection weights of one dynamic module.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CorrelationParams {
    pub kind: ModuleKind,
    pub phi: Projection,
    pub psi: Projection,
    pub embed_channels: usize,
}

/// Default embedding width: a quarter of the input channels, at least one.
pub fn default_embed_channels(in_channels: usize) -> usize {
    (in_channels / 4).max(1)
}

impl CorrelationParams {
    /// Registers fan-in-initialized projections for a dynamic module.
    pub fn init<T: Real>(
        store: &mut ParamStore<T>,
        prefix: &str,
        kind: ModuleKind,
        in_channels: usize,
        embed_channels: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if embed_channels == 0 || embed_channels > in_channels {
            return Err(NasError::argument(format!(
                "embed_channels must be in 1..={in_channels}, got {embed_channels}"
            )));
        }
        let mut branch = |name: &str| -> Result<Projection> {
            let base = format!("{prefix}.{}.{name}", kind.name());
            let pw = |store: &mut ParamStore<T>, rng: &mut _| {
                store.add_fan_in_uniform(format!("{base}.pointwise"), &[embed_channels, in_channels, 1, 1], rng)
            };
            Ok(match kind {
                ModuleKind::SpatialM => Projection { pointwise: Some(pw(store, rng)), temporal: None },
                ModuleKind::TemporalM => Projection {
                    pointwise: None,
                    temporal: Some(store.add_fan_in_uniform(
                        format!("{base}.temporal"),
                        &[embed_channels, in_channels, TEMPORAL_KERNEL, 1],
                        rng,
                    )),
                },
                ModuleKind::SpatioTemporalM => {
                    let p = pw(store, rng);
                    let t = store.add_fan_in_uniform(
                        format!("{base}.temporal"),
                        &[embed_channels, embed_channels, TEMPORAL_KERNEL, 1],
                        rng,
                    );
                    Projection { pointwise: Some(p), temporal: Some(t) }
                }
                other => return Err(NasError::argument(format!("{other} is not a dynamic module"))),
            })
        };
        let phi = branch("phi")?;
        let psi = branch("psi")?;
        Ok(CorrelationParams { kind, phi, psi, embed_channels })
    }

    /// Row-softmax of the scaled `(channel, frame)` inner products between
    /// the two embeddings: an `N × V × V` row-stochastic stack.
    pub fn adjacency<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, h: Var) -> Result<Var> {
        let phi = self.phi.apply(tape, store, h)?;
        let psi = self.psi.apply(tape, store, h)?;
        let shape = tape.value(phi).shape();
        let (ce, t) = (shape[1], shape[2]);
        let scores = tape.correlate(phi, psi, T::of(1.0 / (ce * t) as f64))?;
        tape.softmax_lastdim(scores)
    }
}

/// Dynamic module with projections restricted to the spatial (pointwise)
/// mechanism.
pub fn spatial_correlation<T: Real>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    h: Var,
    p: &CorrelationParams,
) -> Result<Var> {
    expect_kind(p, ModuleKind::SpatialM)?;
    p.adjacency(tape, store, h)
}

pub fn temporal_correlation<T: Real>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    h: Var,
    p: &CorrelationParams,
) -> Result<Var> {
    expect_kind(p, ModuleKind::TemporalM)?;
    p.adjacency(tape, store, h)
}

pub fn spatiotemporal_correlation<T: Real>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    h: Var,
    p: &CorrelationParams,
) -> Result<Var> {
    expect_kind(p, ModuleKind::SpatioTemporalM)?;
    p.adjacency(tape, store, h)
}

fn expect_kind(p: &CorrelationParams, kind: ModuleKind) -> Result<()> {
    if p.kind != kind {
        return Err(NasError::argument(format!("expected {kind} parameters, got {}", p.kind)));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::graph::{build_skeleton_adjacency, SkeletonPreset};

    fn random_input(rng: &mut impl Rng, shape: &[usize]) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn module_order_and_names() {
        assert_eq!(ModuleKind::ALL.len(), 8);
        for (i, k) in ModuleKind::ALL.iter().enumerate() {
            assert_eq!(k.index(), i);
            assert_eq!(ModuleKind::from_name(k.name()), Some(*k));
        }
        assert_eq!(ModuleKind::ALL.iter().filter(|k| k.is_dynamic()).count(), 3);
    }

    #[test]
    fn l_module_on_empty_graph_is_identity() {
        let a = build_skeleton_adjacency(&[], 4).unwrap();
        let s = StaticModules::new(&a, LambdaMax::default()).unwrap();
        assert_eq!(s.matrix(ModuleKind::L).unwrap(), &Matrix::identity(4));
    }

    #[test]
    fn l2_on_diagonal_laplacian() {
        let a = [0.25, -0.5, 0.875];
        let l = NormalizedLaplacian::from_symmetric(Matrix::diag(&a.map(|x| x + 1.0))).unwrap();
        let terms = chebyshev_terms(&rescale(&l, 2.0).unwrap(), 4).unwrap();
        let m = chebyshev_module(ModuleKind::L2, &l, &terms).unwrap();
        assert_eq!(m, Matrix::diag(&a.map(|x| 2.0 * x * x - 1.0)));
        assert!(chebyshev_module(ModuleKind::SpatialM, &l, &terms).is_err());
        let low = chebyshev_terms(&rescale(&l, 2.0).unwrap(), 2).unwrap();
        assert!(matches!(chebyshev_module(ModuleKind::L3, &l, &low), Err(NasError::Argument(_))));
    }

    #[test]
    fn l4n_is_row_stochastic() {
        for preset in [SkeletonPreset::Ntu25, SkeletonPreset::ToyChain5] {
            let s = StaticModules::new(&preset.adjacency(), LambdaMax::default()).unwrap();
            let m = s.matrix(ModuleKind::L4n).unwrap();
            for i in 0..m.rows() {
                assert!((m.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-12);
                assert!(m.row(i).iter().all(|&x| x >= 0.0));
            }
        }
    }

    #[test]
    fn constant_over_joints_gives_uniform_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::<f64>::new();
        for kind in [ModuleKind::SpatialM, ModuleKind::TemporalM, ModuleKind::SpatioTemporalM] {
            let p = CorrelationParams::init(&mut store, "t", kind, 8, 2, &mut rng).unwrap();
            // value depends on (n, c, t) but not on the joint
            let (n, c, t, v) = (2, 8, 6, 5);
            let mut data = vec![0.0; n * c * t * v];
            for (idx, x) in data.iter_mut().enumerate() {
                *x = ((idx / v) as f64 * 0.37).sin();
            }
            let mut tape = Tape::new();
            let h = tape.constant(Tensor::new(&[n, c, t, v], data).unwrap());
            let a = p.adjacency(&mut tape, &store, h).unwrap();
            for &x in tape.value(a).data() {
                assert!((x - 0.2).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn kind_mismatch_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::<f64>::new();
        let p = CorrelationParams::init(&mut store, "t", ModuleKind::SpatialM, 4, 1, &mut rng).unwrap();
        let mut tape = Tape::new();
        let h = tape.constant(random_input(&mut rng, &[1, 4, 3, 5]));
        assert!(temporal_correlation(&mut tape, &store, h, &p).is_err());
        assert!(spatial_correlation(&mut tape, &store, h, &p).is_ok());
        assert!(CorrelationParams::init(&mut store, "t", ModuleKind::L2, 4, 1, &mut rng).is_err());
        assert!(CorrelationParams::init(&mut store, "t", ModuleKind::SpatialM, 4, 5, &mut rng).is_err());
    }

    #[test]
    fn single_frame_temporal_reduces_to_spatial() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut store = ParamStore::<f64>::new();
        let sp = CorrelationParams::init(&mut store, "s", ModuleKind::SpatialM, 6, 2, &mut rng).unwrap();
        let tp = CorrelationParams::init(&mut store, "t", ModuleKind::TemporalM, 6, 2, &mut rng).unwrap();
        // copy the pointwise weights into the centre tap of the temporal kernels
        for (s, t) in [(sp.phi, tp.phi), (sp.psi, tp.psi)] {
            let pw = store.value(s.pointwise.unwrap()).clone();
            let tid = t.temporal.unwrap();
            let mut k = store.value(tid).clone();
            for (o, &w) in pw.data().iter().enumerate() {
                k.data_mut()[o * TEMPORAL_KERNEL + TEMPORAL_KERNEL / 2] = w;
            }
            store.assign(tid, k).unwrap();
        }
        let mut tape = Tape::new();
        let h = tape.constant(random_input(&mut rng, &[3, 6, 1, 5]));
        let a = spatial_correlation(&mut tape, &store, h, &sp).unwrap();
        let b = temporal_correlation(&mut tape, &store, h, &tp).unwrap();
        assert!(tape.value(a).max_abs_diff(tape.value(b)) < 1e-15);
    }

    #[test]
    fn time_constant_input_matches_tap_sum_away_from_edges() {
        // Zero padding makes the first and last 4 frames differ; interior
        // frames of the projected features equal the pointwise projection
        // with the summed taps.
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::<f64>::new();
        let tp = CorrelationParams::init(&mut store, "t", ModuleKind::TemporalM, 4, 2, &mut rng).unwrap();
        let tid = tp.phi.temporal.unwrap();
        let k = store.value(tid).clone();
        let summed: Vec<f64> = k.data().chunks(TEMPORAL_KERNEL).map(|c| c.iter().sum()).collect();
        let pw = store.add("pw", Tensor::new(&[2, 4, 1, 1], summed).unwrap(), false);
        let (c, t, v) = (4, 16, 5);
        let frame: Vec<f64> = (0..c * v).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut data = vec![0.0; c * t * v];
        for ci in 0..c {
            for tt in 0..t {
                for j in 0..v {
                    data[(ci * t + tt) * v + j] = frame[ci * v + j];
                }
            }
        }
        let mut tape = Tape::new();
        let h = tape.constant(Tensor::new(&[1, c, t, v], data).unwrap());
        let via_t = tp.phi.apply(&mut tape, &store, h).unwrap();
        let via_p = Projection { pointwise: Some(pw), temporal: None }.apply(&mut tape, &store, h).unwrap();
        let (a, b) = (tape.value(via_t).data(), tape.value(via_p).data());
        for co in 0..2 {
            for tt in 4..t - 4 {
                for j in 0..v {
                    let i = (co * t + tt) * v + j;
                    assert!((a[i] - b[i]).abs() < 1e-12);
                }
            }
        }
    }
}
