//! On-disk shapes of the build manifest, calibration summary and benchmark
//! report.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use trq_core::pipeline::SweepRow;

use crate::config::RunConfig;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArtifactInfo {
    pub bytes: u64,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrqLayout {
    /// Bytes per far-memory record: packed code plus two `f32` scalars.
    pub stride: usize,
    pub packed_code_bytes: usize,
    pub metadata_bytes: usize,
    pub bits_per_dim: f64,
    pub total_bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BuildManifest {
    pub schema_version: u32,
    pub config_hash: String,
    pub records: usize,
    pub dim: usize,
    pub pq_code_bytes: usize,
    pub nlist: usize,
    pub list_len_min: usize,
    pub list_len_max: usize,
    pub trq: TrqLayout,
    pub artifacts: BTreeMap<String, ArtifactInfo>,
    pub timings_ms: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CalibrationSummary {
    pub train_pairs: usize,
    pub holdout_pairs: usize,
    pub weights: [f64; 4],
    pub intercept: f64,
    /// MSE on held-out pairs, or on the training pairs when nothing is held out.
    pub mse_first_order: f64,
    pub mse_raw: f64,
    pub mse_calibrated: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DistortionRow {
    pub estimator: String,
    pub mse: f64,
    pub pairs: usize,
}

/// Per-query means for one refinement setting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostRow {
    pub method: String,
    pub fraction: f64,
    pub far_accesses: f64,
    pub far_bytes: f64,
    pub ssd_fetches: f64,
    pub ssd_bytes: f64,
    pub modeled_latency_us: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Metrics {
    pub queries: usize,
    pub k: usize,
    /// Share of the true top-k present in the coarse candidate lists.
    pub candidate_recall: f64,
    pub full_rerank_recall: f64,
    pub distortion: Vec<DistortionRow>,
    pub sweep: Vec<SweepRow>,
    pub cost: Vec<CostRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Environment {
    pub threads: usize,
    pub os: String,
    pub arch: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Report {
    pub schema_version: u32,
    pub tool_version: String,
    pub config_hash: String,
    pub config: RunConfig,
    pub metrics: Metrics,
    pub environment: Environment,
    pub timings_ms: BTreeMap<String, f64>,
}

pub fn distortion_csv(rows: &[DistortionRow]) -> String {
    let mut out = String::from("estimator,mse,pairs\n");
    for r in rows {
        out.push_str(&format!("{},{},{}\n", r.estimator, r.mse, r.pairs));
    }
    out
}

pub fn cost_csv(rows: &[CostRow]) -> String {
    let mut out =
        String::from("method,fraction,far_accesses,far_bytes,ssd_fetches,ssd_bytes,modeled_latency_us\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.method, r.fraction, r.far_accesses, r.far_bytes, r.ssd_fetches, r.ssd_bytes, r.modeled_latency_us
        ));
    }
    out
}

/// Plain-text rendering for the `report` subcommand.
pub fn render(report: &Report) -> String {
    let m = &report.metrics;
    let mut out = format!(
        "config {}\nqueries {}  k {}  candidate recall {:.4}  full-rerank recall {:.4}\n\n",
        &report.config_hash[..12.min(report.config_hash.len())],
        m.queries,
        m.k,
        m.candidate_recall,
        m.full_rerank_recall
    );
    out.push_str("distortion (MSE over ground-truth pairs)\n");
    for r in &m.distortion {
        out.push_str(&format!("  {:<18} {:>14.4}  ({} pairs)\n", r.estimator, r.mse, r.pairs));
    }
    out.push_str("\nrefinement sweep\n  fraction   recall  ssd/query  ratio  latency_us\n");
    for r in &m.sweep {
        out.push_str(&format!(
            "  {:>8.3} {:>8.4} {:>10.2} {:>6.2} {:>11.2}\n",
            r.fraction, r.recall, r.mean_ssd_fetches, r.refinement_ratio, r.modeled_latency_us
        ));
    }
    out.push_str("\ncost per query\n");
    for r in &m.cost {
        out.push_str(&format!(
            "  {:<12} f={:<5} far {:>7.1} ({:>9.1} B)  ssd {:>7.1} ({:>10.1} B)  {:>9.2} us\n",
            r.method, r.fraction, r.far_accesses, r.far_bytes, r.ssd_fetches, r.ssd_bytes, r.modeled_latency_us
        ));
    }
    out
}
