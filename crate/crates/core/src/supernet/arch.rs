use std::fmt::Write as _;
use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{NasError, Result};
use crate::modules::{ModuleKind, MODULE_COUNT};

/// Magic bytes at the start of an `alpha.bin` file.
pub const ALPHA_MAGIC: &[u8; 8] = b"ALPHA001";

const LABEL: usize = 6;
const CELL: usize = 5;

/// Selection threshold on normalized layer weights.
pub const DEFAULT_THRESHOLD: f64 = 0.1;

/// Maps a raw architecture value to its nonnegative mixing weight.
pub fn positive_part(raw: f64) -> f64 {
    raw.max(0.0)
}

/// Raw architecture values, `layers × 8`, row-major in [`ModuleKind::ALL`]
/// order. Raw values are unconstrained; [`positive_part`] maps them to
/// mixing weights which are then normalized per layer.
#[derive(Clone, Debug, PartialEq)]
pub struct ArchParams {
    layers: usize,
    raw: Vec<f64>,
}

impl ArchParams {
    pub fn from_raw(layers: usize, raw: Vec<f64>) -> Result<Self> {
        if raw.len() != layers * MODULE_COUNT {
            return Err(NasError::structural(format!(
                "{} architecture values for {layers} layers of {MODULE_COUNT} modules",
                raw.len()
            )));
        }
        if let Some(bad) = raw.iter().find(|x| !x.is_finite()) {
            return Err(NasError::argument(format!("architecture value {bad} is not finite")));
        }
        Ok(ArchParams { layers, raw })
    }

    /// Every module weighted equally in every layer.
    pub fn uniform(layers: usize) -> Self {
        ArchParams { layers, raw: vec![1.0 / MODULE_COUNT as f64; layers * MODULE_COUNT] }
    }

    /// One module per layer.
    pub fn one_hot(choices: &[ModuleKind]) -> Self {
        let mut raw = vec![0.0; choices.len() * MODULE_COUNT];
        for (k, kind) in choices.iter().enumerate() {
            raw[k * MODULE_COUNT + kind.index()] = 1.0;
        }
        ArchParams { layers: choices.len(), raw }
    }

    /// Equal weight on each layer's listed modules, zero elsewhere.
    pub fn from_selection(arch: &DerivedArchitecture) -> Self {
        let mut raw = vec![0.0; arch.layers().len() * MODULE_COUNT];
        for (k, sel) in arch.layers().iter().enumerate() {
            for kind in sel {
                raw[k * MODULE_COUNT + kind.index()] = 1.0;
            }
        }
        ArchParams { layers: arch.layers().len(), raw }
    }

    pub fn layers(&self) -> usize {
        self.layers
    }

    pub fn raw(&self) -> &[f64] {
        &self.raw
    }

    pub fn layer_raw(&self, k: usize) -> &[f64] {
        &self.raw[k * MODULE_COUNT..(k + 1) * MODULE_COUNT]
    }

    /// Multiplies one layer's raw values by `c`.
    pub fn scale_layer(&mut self, k: usize, c: f64) {
        self.raw[k * MODULE_COUNT..(k + 1) * MODULE_COUNT].iter_mut().for_each(|x| *x *= c);
    }

    /// Normalized mixing weights of layer `k`. Fails when no module of the
    /// layer has a positive weight.
    pub fn weights(&self, k: usize) -> Result<[f64; MODULE_COUNT]> {
        if k >= self.layers {
            return Err(NasError::argument(format!("layer {k} out of range for {} layers", self.layers)));
        }
        let mut w = [0.0; MODULE_COUNT];
        for (wi, &r) in w.iter_mut().zip(self.layer_raw(k)) {
            *wi = positive_part(r);
        }
        let total: f64 = w.iter().sum();
        if !(total > 0.0) || !total.is_finite() {
            return Err(NasError::argument(format!("layer {k} has no module with positive weight")));
        }
        w.iter_mut().for_each(|x| *x /= total);
        Ok(w)
    }

    /// True when every layer has a positive total weight.
    pub fn is_valid(&self) -> bool {
        (0..self.layers).all(|k| self.weights(k).is_ok())
    }

    /// Draws one module for layer `k` with probability equal to its
    /// normalized weight.
    pub fn sample_module(&self, k: usize, rng: &mut impl Rng) -> Result<ModuleKind> {
        let w = self.weights(k)?;
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut last = 0;
        for (i, &p) in w.iter().enumerate() {
            if p <= 0.0 {
                continue;
            }
            acc += p;
            last = i;
            if u < acc {
                return Ok(ModuleKind::ALL[i]);
            }
        }
        Ok(ModuleKind::ALL[last])
    }

    /// One draw per layer.
    pub fn sample_modules(&self, rng: &mut impl Rng) -> Result<Vec<ModuleKind>> {
        (0..self.layers).map(|k| self.sample_module(k, rng)).collect()
    }

    /// Binary layout: magic, `u32` layers, `u32` modules, then `f64` values,
    /// all little-endian.
    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(ALPHA_MAGIC)?;
        w.write_all(&(self.layers as u32).to_le_bytes())?;
        w.write_all(&(MODULE_COUNT as u32).to_le_bytes())?;
        for x in &self.raw {
            w.write_all(&x.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let eof = |e: std::io::Error| match e.kind() {
            std::io::ErrorKind::UnexpectedEof => NasError::Parse("architecture file is truncated".into()),
            _ => NasError::Io(e),
        };
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(eof)?;
        if &magic != ALPHA_MAGIC {
            return Err(NasError::Parse("not an architecture parameter file".into()));
        }
        let mut b4 = [0u8; 4];
        r.read_exact(&mut b4).map_err(eof)?;
        let layers = u32::from_le_bytes(b4) as usize;
        r.read_exact(&mut b4).map_err(eof)?;
        let modules = u32::from_le_bytes(b4) as usize;
        if modules != MODULE_COUNT {
            return Err(NasError::Parse(format!("expected {MODULE_COUNT} modules per layer, found {modules}")));
        }
        let mut raw = Vec::with_capacity(layers * modules);
        let mut b8 = [0u8; 8];
        for _ in 0..layers * modules {
            r.read_exact(&mut b8).map_err(eof)?;
            raw.push(f64::from_le_bytes(b8));
        }
        ArchParams::from_raw(layers, raw).map_err(|e| NasError::Parse(e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write_to(&mut buf)?;
        std::fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Self::read_from(&mut bytes.as_slice())
    }
}

/// Discrete per-layer module choice.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DerivedArchitecture {
    layers: Vec<Vec<ModuleKind>>,
}

impl DerivedArchitecture {
    /// Validates and canonicalizes (sorted, deduplicated) a selection.
    pub fn new(mut layers: Vec<Vec<ModuleKind>>) -> Result<Self> {
        if layers.is_empty() {
            return Err(NasError::argument("an architecture needs at least one layer"));
        }
        for (k, sel) in layers.iter_mut().enumerate() {
            sel.sort();
            sel.dedup();
            if sel.is_empty() {
                return Err(NasError::argument(format!("layer {} selects no module", k + 1)));
            }
        }
        Ok(DerivedArchitecture { layers })
    }

    /// The same single module at every layer.
    pub fn uniform(kind: ModuleKind, layers: usize) -> Self {
        DerivedArchitecture { layers: vec![vec![kind]; layers] }
    }

    pub fn layers(&self) -> &[Vec<ModuleKind>] {
        &self.layers
    }

    pub fn selects(&self, layer: usize, kind: ModuleKind) -> bool {
        self.layers[layer].contains(&kind)
    }

    /// Fixed-width check-mark table with one row per layer and the module
    /// columns in [`ModuleKind::TABLE_ORDER`].
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let mut header = format!("{:<LABEL$}", "layer");
        for kind in ModuleKind::TABLE_ORDER {
            let _ = write!(header, "{:<CELL$}", kind.name());
        }
        out.push_str(header.trim_end());
        out.push('\n');
        for (k, _) in self.layers.iter().enumerate() {
            let mut line = format!("{:<LABEL$}", format!("K{}", k + 1));
            for kind in ModuleKind::TABLE_ORDER {
                let mark = if self.selects(k, kind) { "✓" } else { "" };
                let _ = write!(line, "{mark:<CELL$}");
            }
            out.push_str(line.trim_end());
            out.push('\n');
        }
        out
    }

    /// Reads back the output of [`to_table`](Self::to_table).
    pub fn from_table(text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = lines.next().ok_or_else(|| NasError::Parse("empty architecture table".into()))?;
        let cols: Vec<&str> = header.split_whitespace().collect();
        if cols.len() != MODULE_COUNT + 1 || cols[0] != "layer" {
            return Err(NasError::Parse(format!("unexpected table header `{header}`")));
        }
        let kinds = cols[1..]
            .iter()
            .map(|c| ModuleKind::from_name(c).ok_or_else(|| NasError::Parse(format!("unknown module `{c}`"))))
            .collect::<Result<Vec<_>>>()?;
        let mut layers = Vec::new();
        for line in lines {
            let chars: Vec<char> = line.chars().collect();
            let sel = kinds
                .iter()
                .enumerate()
                .filter(|&(j, _)| chars.get(LABEL + CELL * j) == Some(&'✓'))
                .map(|(_, &k)| k)
                .collect();
            layers.push(sel);
        }
        Self::new(layers).map_err(|e| NasError::Parse(e.to_string()))
    }

    pub fn to_json(&self) -> String {
        let doc = ArchDocument {
            layers: self.layers.iter().map(|sel| sel.iter().map(|k| k.name().to_string()).collect()).collect(),
        };
        serde_json::to_string_pretty(&doc).expect("architecture serializes") + "\n"
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: ArchDocument =
            serde_json::from_str(text).map_err(|e| NasError::Parse(format!("architecture file: {e}")))?;
        let layers = doc
            .layers
            .iter()
            .map(|sel| {
                sel.iter()
                    .map(|n| ModuleKind::from_name(n).ok_or_else(|| NasError::Parse(format!("unknown module `{n}`"))))
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(layers).map_err(|e| NasError::Parse(e.to_string()))
    }
}

#[derive(Serialize, Deserialize)]
struct ArchDocument {
    layers: Vec<Vec<String>>,
}

/// Keeps, per layer, the modules whose normalized weight exceeds
/// `threshold`. A layer left empty gets its largest-weight module (lowest
/// index on ties); a layer with no positive weight falls back to the
/// largest raw value.
pub fn derive_architecture(alpha: &ArchParams, threshold: f64) -> DerivedArchitecture {
    let layers = (0..alpha.layers())
        .map(|k| {
            let w = alpha.weights(k).map(|w| w.to_vec()).unwrap_or_else(|_| alpha.layer_raw(k).to_vec());
            let mut sel: Vec<ModuleKind> =
                ModuleKind::ALL.iter().copied().filter(|kind| w[kind.index()] > threshold).collect();
            if sel.is_empty() {
                let best = (1..MODULE_COUNT).fold(0, |b, i| if w[i] > w[b] { i } else { b });
                sel.push(ModuleKind::ALL[best]);
            }
            sel
        })
        .collect();
    DerivedArchitecture { layers }
}
