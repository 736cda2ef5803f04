//! Run configuration: a TOML file, a named preset, and `key=value` overrides.

use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use trq_core::pipeline::{TierParams, MAX_QUEUE_CAPACITY};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub out_dir: PathBuf,
    pub data: DataSource,
    pub pq: PqSection,
    pub ivf: IvfSection,
    pub calibration: CalibrationSection,
    pub refine: RefineSection,
    #[serde(default)]
    pub tiers: TierParams,
    pub gt: GtSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum DataSource {
    /// Gaussian clusters; base rows and queries come from one draw.
    Synthetic { n: usize, queries: usize, dim: usize, clusters: usize, seed: u64 },
    /// `.fvecs` or `.bvecs` files, picked by extension.
    Files { base: PathBuf, queries: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PqSection {
    pub m: usize,
    pub nbits: u32,
    pub iters: usize,
    pub seed: u64,
    /// Rows sampled for codebook training; 0 uses every row.
    pub train_size: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IvfSection {
    pub nlist: usize,
    pub nprobe: usize,
    /// Candidates per query handed to refinement.
    pub candidates: usize,
    pub iters: usize,
    pub seed: u64,
    pub train_size: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CalibrationSection {
    pub fraction: f64,
    pub seed: u64,
    pub neighbor_cap: usize,
    pub intercept: bool,
    /// Share of sampled records held out from the fit to score it.
    pub holdout: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RefineSection {
    pub k: usize,
    pub fractions: Vec<f64>,
    pub use_calibration: bool,
    pub queue_capacity: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GtSection {
    pub k: usize,
}

pub const PRESETS: [&str; 2] = ["desk", "smoke"];

impl RunConfig {
    /// 100k × 128 synthetic base with 1k queries; a few minutes on a laptop.
    pub fn desk() -> Self {
        Self {
            out_dir: PathBuf::from("runs/desk"),
            data: DataSource::Synthetic { n: 100_000, queries: 1_000, dim: 128, clusters: 4096, seed: 42 },
            pq: PqSection { m: 32, nbits: 8, iters: 25, seed: 1, train_size: 16_384 },
            ivf: IvfSection { nlist: 256, nprobe: 16, candidates: 100, iters: 25, seed: 2, train_size: 16_384 },
            calibration: CalibrationSection { fraction: 0.003, seed: 3, neighbor_cap: 64, intercept: true, holdout: 0.2 },
            refine: RefineSection { k: 10, fractions: vec![0.1, 0.25, 0.5, 1.0], use_calibration: true, queue_capacity: MAX_QUEUE_CAPACITY },
            tiers: TierParams::default(),
            gt: GtSection { k: 100 },
        }
    }

    /// Seconds-scale configuration for tests and quick checks.
    pub fn smoke() -> Self {
        Self {
            out_dir: PathBuf::from("runs/smoke"),
            data: DataSource::Synthetic { n: 6_000, queries: 100, dim: 32, clusters: 200, seed: 42 },
            pq: PqSection { m: 8, nbits: 6, iters: 15, seed: 1, train_size: 4_000 },
            ivf: IvfSection { nlist: 32, nprobe: 6, candidates: 100, iters: 15, seed: 2, train_size: 4_000 },
            calibration: CalibrationSection { fraction: 0.05, seed: 3, neighbor_cap: 64, intercept: true, holdout: 0.2 },
            refine: RefineSection { k: 10, fractions: vec![0.1, 0.25, 0.5, 1.0], use_calibration: true, queue_capacity: MAX_QUEUE_CAPACITY },
            tiers: TierParams::default(),
            gt: GtSection { k: 100 },
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Self::desk()),
            "smoke" => Ok(Self::smoke()),
            _ => bail!("unknown preset {name:?}; available: {}", PRESETS.join(", ")),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        Self::from_toml(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Applies `a.b.c=value` overrides. The value is parsed as a TOML value,
    /// falling back to a bare string.
    pub fn with_overrides(self, overrides: &[String]) -> Result<Self> {
        if overrides.is_empty() {
            return Ok(self);
        }
        let mut root = toml::Value::try_from(&self)?;
        for ov in overrides {
            let (key, raw) = ov
                .split_once('=')
                .ok_or_else(|| anyhow!("override {ov:?} is not of the form key=value"))?;
            let value = parse_value(raw.trim());
            set_path(&mut root, key.trim(), value).with_context(|| format!("override {ov:?}"))?;
        }
        let cfg: Self = root.try_into()?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let dim = match &self.data {
            DataSource::Synthetic { n, queries, dim, clusters, .. } => {
                if *n == 0 || *queries == 0 || *dim == 0 || *clusters == 0 {
                    bail!("synthetic n, queries, dim and clusters must be positive");
                }
                Some(*dim)
            }
            DataSource::Files { .. } => None,
        };
        if self.pq.m == 0 || !(1..=8).contains(&self.pq.nbits) {
            bail!("pq.m must be positive and pq.nbits in 1..=8");
        }
        if let Some(d) = dim {
            if d % self.pq.m != 0 {
                bail!("pq.m = {} does not divide dim {d}", self.pq.m);
            }
        }
        if self.ivf.nlist == 0 || self.ivf.nprobe == 0 || self.ivf.nprobe > self.ivf.nlist {
            bail!("ivf.nprobe must be in 1..=nlist");
        }
        if self.ivf.candidates == 0 {
            bail!("ivf.candidates must be positive");
        }
        let c = &self.calibration;
        if !(c.fraction > 0.0 && c.fraction <= 1.0) {
            bail!("calibration.fraction must be in (0, 1], got {}", c.fraction);
        }
        if !(0.0..1.0).contains(&c.holdout) {
            bail!("calibration.holdout must be in [0, 1)");
        }
        if c.neighbor_cap == 0 {
            bail!("calibration.neighbor_cap must be positive");
        }
        let r = &self.refine;
        if r.k == 0 || r.k > self.gt.k {
            bail!("refine.k must be in 1..=gt.k");
        }
        if r.queue_capacity == 0 || r.queue_capacity > MAX_QUEUE_CAPACITY || r.k > r.queue_capacity {
            bail!("refine.queue_capacity must be in k..={MAX_QUEUE_CAPACITY}");
        }
        if r.fractions.is_empty() || r.fractions.iter().any(|f| !(*f > 0.0 && *f <= 1.0)) {
            bail!("refine.fractions must be a non-empty list of values in (0, 1]");
        }
        self.tiers.validate()?;
        Ok(())
    }

    /// SHA-256 over the canonical JSON form, with `out_dir` left out so the
    /// same experiment hashes the same wherever it runs.
    pub fn hash(&self) -> String {
        let mut v = serde_json::to_value(self).expect("config serializes");
        if let Some(obj) = v.as_object_mut() {
            obj.remove("out_dir");
        }
        hex::encode(Sha256::digest(v.to_string().as_bytes()))
    }
}

fn parse_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

fn set_path(root: &mut toml::Value, key: &str, value: toml::Value) -> Result<()> {
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts.pop().filter(|s| !s.is_empty()).ok_or_else(|| anyhow!("empty key"))?;
    let mut cur = root;
    for p in parts {
        cur = cur
            .get_mut(p)
            .ok_or_else(|| anyhow!("no section {p:?}"))?;
    }
    let table = cur.as_table_mut().ok_or_else(|| anyhow!("{key:?} is not inside a table"))?;
    if !table.contains_key(last) && last != "kind" {
        bail!("unknown key {key:?}");
    }
    table.insert(last.to_string(), value);
    Ok(())
}
