//! The subcommands. Each reads and writes files under `out_dir` only, and
//! every error names the stage that failed.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, ensure, Context, Result};
use rayon::prelude::*;
use sha2::{Digest, Sha256};
use trq_core::coarse::{PqCodebook, PqConfig};
use trq_core::distance::l2_sq_f64;
use trq_core::estimator::{
    first_order, fit, mse_by, raw_from_features, sample_calibration_pairs, CalibrationModel,
    CalibrationPair, CalibrationSampling, FeatureVector, FitOptions, QueryContext,
};
use trq_core::index::{build_ivf, CandidateList, IvfIndex, IvfParams};
use trq_core::pipeline::{
    full_rerank, recall_at_k, refine_batch, summarize_sweep, sweep_to_csv, QueryCost, SweepInputs,
};
use trq_core::trq::{bits_per_dim, packed_len, stride_for, TrqStore, METADATA_BYTES};
use trq_core::vecstore::{brute_force_knn, read_bvecs, read_fvecs, synth_gaussian, write_fvecs, Dataset, GroundTruth};

use crate::config::{DataSource, RunConfig};
use crate::report::{
    cost_csv, distortion_csv, ArtifactInfo, BuildManifest, CalibrationSummary, CostRow,
    DistortionRow, Environment, Metrics, Report, TrqLayout, SCHEMA_VERSION,
};

pub const CODEBOOK: &str = "codebook.bin";
pub const IVF: &str = "ivf.bin";
pub const TRQ: &str = "trq.bin";
pub const MANIFEST: &str = "build_manifest.json";
pub const GT_IDS: &str = "gt.ivecs";
pub const GT_DISTS: &str = "gt.fvecs";
pub const MODEL: &str = "model.bin";
pub const CALIBRATION_TXT: &str = "calibration.txt";
pub const CALIBRATION_JSON: &str = "calibration.json";
pub const DISTORTION_CSV: &str = "distortion.csv";
pub const SWEEP_CSV: &str = "sweep.csv";
pub const COST_CSV: &str = "cost.csv";
pub const REPORT: &str = "report.json";
pub const CONFIG_ECHO: &str = "config.toml";

pub struct Data {
    pub base: Dataset,
    pub queries: Dataset,
}

pub fn load_data(cfg: &RunConfig) -> Result<Data> {
    match &cfg.data {
        DataSource::Synthetic { n, queries, dim, clusters, seed } => {
            let all = synth_gaussian(n + queries, *dim, *seed, *clusters)?;
            let (base, queries) = all.split_at(*n);
            Ok(Data { base, queries })
        }
        DataSource::Files { base, queries } => {
            let base = read_vectors(base)?;
            let queries = read_vectors(queries)?;
            ensure!(
                base.dim() == queries.dim(),
                "base has dimension {} but queries have {}",
                base.dim(),
                queries.dim()
            );
            Ok(Data { base, queries })
        }
    }
}

fn read_vectors(path: &Path) -> Result<Dataset> {
    let ds = match path.extension().and_then(|e| e.to_str()) {
        Some("fvecs") => read_fvecs(path),
        Some("bvecs") => read_bvecs(path),
        _ => bail!("{}: expected a .fvecs or .bvecs file", path.display()),
    };
    ds.with_context(|| format!("reading {}", path.display()))
}

fn out_path(cfg: &RunConfig, name: &str) -> PathBuf {
    cfg.out_dir.join(name)
}

fn write_out(cfg: &RunConfig, name: &str, bytes: impl AsRef<[u8]>) -> Result<()> {
    fs::create_dir_all(&cfg.out_dir)
        .with_context(|| format!("creating {}", cfg.out_dir.display()))?;
    let path = out_path(cfg, name);
    fs::write(&path, bytes).with_context(|| format!("writing {}", path.display()))
}

/// Reads an artifact, pointing at the producing subcommand when it is missing.
fn read_artifact(cfg: &RunConfig, name: &str, producer: &str) -> Result<Vec<u8>> {
    let path = out_path(cfg, name);
    if !path.exists() {
        bail!("missing {}; run `trq {producer}` first", path.display());
    }
    fs::read(&path).with_context(|| format!("reading {}", path.display()))
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn ms_since(t: Instant) -> f64 {
    t.elapsed().as_secs_f64() * 1e3
}

pub struct Artifacts {
    pub codebook: PqCodebook,
    pub index: IvfIndex,
    pub trq: TrqStore,
}

pub fn load_artifacts(cfg: &RunConfig, base: &Dataset) -> Result<Artifacts> {
    let codebook = PqCodebook::from_bytes(&read_artifact(cfg, CODEBOOK, "build")?)
        .context("decoding codebook")?;
    let index = IvfIndex::from_bytes(&read_artifact(cfg, IVF, "build")?).context("decoding index")?;
    let trq = TrqStore::from_bytes(&read_artifact(cfg, TRQ, "build")?).context("decoding residual store")?;
    index.check_codebook(&codebook)?;
    ensure!(
        index.len() == base.len() && trq.len() == base.len(),
        "artifacts cover {} records but the dataset has {}; rerun `trq build`",
        index.len(),
        base.len()
    );
    ensure!(trq.dim() == base.dim(), "residual store dimension differs from the dataset");
    Ok(Artifacts { codebook, index, trq })
}

pub fn cmd_build(cfg: &RunConfig) -> Result<BuildManifest> {
    build(cfg).context("build")
}

fn build(cfg: &RunConfig) -> Result<BuildManifest> {
    let mut timings = BTreeMap::new();
    let t = Instant::now();
    let data = load_data(cfg).context("loading data")?;
    timings.insert("load".to_string(), ms_since(t));
    let base = &data.base;
    let dim = base.dim();

    let t = Instant::now();
    let pq = PqConfig { m: cfg.pq.m, nbits: cfg.pq.nbits, iters: cfg.pq.iters, seed: cfg.pq.seed };
    let train_rows = if cfg.pq.train_size == 0 { base.len() } else { cfg.pq.train_size };
    let sample = base.sample_rows(train_rows, cfg.pq.seed);
    let codebook = PqCodebook::train(&pq, &sample).context("training PQ codebook")?;
    timings.insert("pq_train".to_string(), ms_since(t));

    let t = Instant::now();
    let ivf = IvfParams {
        nlist: cfg.ivf.nlist,
        iters: cfg.ivf.iters,
        seed: cfg.ivf.seed,
        train_size: (cfg.ivf.train_size > 0).then_some(cfg.ivf.train_size),
    };
    let index = build_ivf(base, &ivf, &codebook).context("building IVF index")?;
    timings.insert("ivf_build".to_string(), ms_since(t));

    let t = Instant::now();
    let trq = TrqStore::build(base, &codebook, &index.codes_by_id()).context("encoding residuals")?;
    timings.insert("trq_build".to_string(), ms_since(t));

    let expected = packed_len(dim) + METADATA_BYTES;
    ensure!(
        trq.stride() == expected && expected == stride_for(dim),
        "record stride {} does not match ceil(D/5) + 8 = {expected}",
        trq.stride()
    );

    let mut artifacts = BTreeMap::new();
    for (name, bytes) in [
        (CODEBOOK, codebook.to_bytes()),
        (IVF, index.to_bytes()),
        (TRQ, trq.to_bytes()),
    ] {
        artifacts.insert(
            name.to_string(),
            ArtifactInfo { bytes: bytes.len() as u64, sha256: sha256_hex(&bytes) },
        );
        write_out(cfg, name, &bytes)?;
    }
    let lens: Vec<usize> = (0..index.nlist()).map(|l| index.list(l).len()).collect();
    let manifest = BuildManifest {
        schema_version: SCHEMA_VERSION,
        config_hash: cfg.hash(),
        records: base.len(),
        dim,
        pq_code_bytes: codebook.m(),
        nlist: index.nlist(),
        list_len_min: lens.iter().copied().min().unwrap_or(0),
        list_len_max: lens.iter().copied().max().unwrap_or(0),
        trq: TrqLayout {
            stride: trq.stride(),
            packed_code_bytes: packed_len(dim),
            metadata_bytes: METADATA_BYTES,
            bits_per_dim: bits_per_dim(dim),
            total_bytes: (trq.stride() * trq.len()) as u64,
        },
        artifacts,
        timings_ms: timings,
    };
    write_out(cfg, MANIFEST, serde_json::to_string_pretty(&manifest)?)?;
    write_out(cfg, CONFIG_ECHO, cfg.to_toml())?;
    Ok(manifest)
}

pub fn cmd_gt(cfg: &RunConfig) -> Result<GroundTruth> {
    ground_truth(cfg).context("gt")
}

fn ground_truth(cfg: &RunConfig) -> Result<GroundTruth> {
    let data = load_data(cfg).context("loading data")?;
    let gt = brute_force_knn(&data.base, &data.queries, cfg.gt.k)?;
    fs::create_dir_all(&cfg.out_dir)?;
    gt.save(out_path(cfg, GT_IDS), out_path(cfg, GT_DISTS))?;
    Ok(gt)
}

pub fn load_gt(cfg: &RunConfig) -> Result<GroundTruth> {
    let (ids, dists) = (out_path(cfg, GT_IDS), out_path(cfg, GT_DISTS));
    if !ids.exists() || !dists.exists() {
        bail!("missing {}; run `trq gt` first", ids.display());
    }
    Ok(GroundTruth::load(ids, dists)?)
}

/// Whether sample `i` of `count` goes to the holdout set: an evenly spaced
/// `⌊count · share⌋` of them.
fn is_holdout(i: usize, share: f64) -> bool {
    ((i + 1) as f64 * share).floor() > (i as f64 * share).floor()
}

pub fn cmd_calibrate(cfg: &RunConfig) -> Result<(CalibrationModel, CalibrationSummary)> {
    calibrate(cfg).context("calibrate")
}

fn calibrate(cfg: &RunConfig) -> Result<(CalibrationModel, CalibrationSummary)> {
    let data = load_data(cfg).context("loading data")?;
    let art = load_artifacts(cfg, &data.base)?;
    let c = &cfg.calibration;
    let opts = CalibrationSampling { fraction: c.fraction, seed: c.seed, neighbor_cap: c.neighbor_cap };
    let pairs = sample_calibration_pairs(&data.base, &art.index, &art.codebook, &art.trq, &opts)
        .context("sampling calibration pairs")?;

    let mut samples: Vec<u32> = pairs.iter().map(|p| p.sample).collect();
    samples.dedup();
    let held: HashSet<u32> = samples
        .iter()
        .enumerate()
        .filter(|(i, _)| is_holdout(*i, c.holdout))
        .map(|(_, &s)| s)
        .collect();
    let (holdout, train): (Vec<CalibrationPair>, Vec<CalibrationPair>) =
        pairs.iter().partition(|p| held.contains(&p.sample));

    let model = fit(&train, &FitOptions { intercept: c.intercept, sample_fraction: c.fraction })
        .context("fitting calibration model")?;
    let eval = if holdout.is_empty() { &train } else { &holdout };
    let summary = CalibrationSummary {
        train_pairs: train.len(),
        holdout_pairs: holdout.len(),
        weights: model.weights,
        intercept: model.intercept,
        mse_first_order: mse_by(eval, |p| {
            let f = p.features;
            f64::from(first_order(f.d0, f.delta_sq))
        }),
        mse_raw: mse_by(eval, |p| f64::from(raw_from_features(&p.features))),
        mse_calibrated: mse_by(eval, |p| f64::from(model.apply(&p.features))),
    };

    let scope = if holdout.is_empty() { "training" } else { "holdout" };
    let text = format!(
        "{}pairs train {} holdout {}\n{scope} mse first_order {}\n{scope} mse raw {}\n{scope} mse calibrated {}\n",
        model.dump_text(),
        summary.train_pairs,
        summary.holdout_pairs,
        summary.mse_first_order,
        summary.mse_raw,
        summary.mse_calibrated,
    );
    write_out(cfg, MODEL, model.to_bytes())?;
    write_out(cfg, CALIBRATION_TXT, text)?;
    write_out(cfg, CALIBRATION_JSON, serde_json::to_string_pretty(&summary)?)?;
    Ok((model, summary))
}

pub fn load_model(cfg: &RunConfig) -> Result<CalibrationModel> {
    Ok(CalibrationModel::from_bytes(&read_artifact(cfg, MODEL, "calibrate")?)?)
}

/// Squared-error sums of the four estimators over one query's ground-truth
/// neighbors.
fn distortion_sums(
    ctx: &QueryContext,
    truth: &[u32],
    base: &Dataset,
    art: &Artifacts,
    model: &CalibrationModel,
) -> [f64; 4] {
    let mut s = [0.0f64; 4];
    for &id in truth {
        let d0 = ctx.adc().distance(art.index.code(id));
        let rec = art.trq.record(id as usize);
        let fv = FeatureVector::compute(ctx, d0, &rec);
        let exact = l2_sq_f64(ctx.query(), base.row(id as usize));
        let est = [
            f64::from(d0),
            f64::from(first_order(d0, fv.delta_sq)),
            f64::from(raw_from_features(&fv)),
            f64::from(model.apply(&fv)),
        ];
        for (acc, e) in s.iter_mut().zip(est) {
            *acc += (e - exact) * (e - exact);
        }
    }
    s
}

pub const ESTIMATORS: [&str; 4] = ["coarse", "first_order", "second_order_raw", "calibrated"];

fn mean_cost(method: &str, fraction: f64, costs: &[QueryCost]) -> CostRow {
    let n = costs.len().max(1) as f64;
    let mean = |f: &dyn Fn(&QueryCost) -> f64| costs.iter().map(f).sum::<f64>() / n;
    CostRow {
        method: method.to_string(),
        fraction,
        far_accesses: mean(&|c| c.far_accesses as f64),
        far_bytes: mean(&|c| c.far_bytes as f64),
        ssd_fetches: mean(&|c| c.ssd_fetches as f64),
        ssd_bytes: mean(&|c| c.ssd_bytes as f64),
        modeled_latency_us: mean(&|c| c.modeled_latency) * 1e6,
    }
}

pub fn cmd_bench(cfg: &RunConfig) -> Result<Report> {
    bench(cfg).context("bench")
}

fn bench(cfg: &RunConfig) -> Result<Report> {
    let mut timings = BTreeMap::new();
    let data = load_data(cfg).context("loading data")?;
    let art = load_artifacts(cfg, &data.base)?;
    let gt = load_gt(cfg)?;
    let model = load_model(cfg)?;
    let k = cfg.refine.k;
    ensure!(
        gt.num_queries() == data.queries.len(),
        "ground truth covers {} queries but there are {}; rerun `trq gt`",
        gt.num_queries(),
        data.queries.len()
    );
    ensure!(gt.k >= k, "ground truth depth {} is below k = {k}; rerun `trq gt`", gt.k);

    let t = Instant::now();
    let nq = data.queries.len();
    let contexts: Vec<QueryContext> = (0..nq)
        .into_par_iter()
        .map(|i| QueryContext::new(&art.codebook, data.queries.row(i)))
        .collect::<trq_core::Result<_>>()?;
    let candidates: Vec<CandidateList> = contexts
        .par_iter()
        .map(|ctx| art.index.search_coarse(ctx, cfg.ivf.nprobe, cfg.ivf.candidates))
        .collect::<trq_core::Result<_>>()?;
    timings.insert("coarse_search".to_string(), ms_since(t));

    let t = Instant::now();
    let per_query: Vec<[f64; 4]> = contexts
        .par_iter()
        .enumerate()
        .map(|(q, ctx)| distortion_sums(ctx, gt.ids(q), &data.base, &art, &model))
        .collect();
    let pairs = nq * gt.k;
    let mut totals = [0.0f64; 4];
    for s in &per_query {
        for (t, v) in totals.iter_mut().zip(s) {
            *t += v;
        }
    }
    let distortion: Vec<DistortionRow> = ESTIMATORS
        .iter()
        .zip(totals)
        .map(|(name, t)| DistortionRow {
            estimator: name.to_string(),
            mse: t / pairs.max(1) as f64,
            pairs,
        })
        .collect();
    timings.insert("distortion".to_string(), ms_since(t));

    let t = Instant::now();
    let inputs = SweepInputs {
        contexts: &contexts,
        candidates: &candidates,
        far: &art.trq,
        ssd: &data.base,
        model: &model,
        gt: &gt,
        k,
        use_calibration: cfg.refine.use_calibration,
        queue_capacity: cfg.refine.queue_capacity,
        tiers: cfg.tiers,
    };
    let mut sweep = Vec::new();
    let mut cost = Vec::new();
    for &f in &cfg.refine.fractions {
        let results = refine_batch(&inputs, f)?;
        sweep.push(summarize_sweep(f, &results, &gt, k)?);
        let costs: Vec<QueryCost> = results.iter().map(|r| r.cost).collect();
        cost.push(mean_cost("trq_refine", f, &costs));
    }
    let baseline: Vec<_> = contexts
        .par_iter()
        .zip(&candidates)
        .map(|(ctx, c)| full_rerank(c, ctx.query(), &data.base, k, &cfg.tiers))
        .collect();
    let baseline_ids: Vec<Vec<u32>> = baseline.iter().map(|r| r.ids()).collect();
    let full_rerank_recall = recall_at_k(&baseline_ids, &gt, k)?;
    let costs: Vec<QueryCost> = baseline.iter().map(|r| r.cost).collect();
    cost.push(mean_cost("full_rerank", 1.0, &costs));
    timings.insert("refine".to_string(), ms_since(t));

    let hit: usize = candidates
        .iter()
        .enumerate()
        .map(|(q, c)| {
            let truth: HashSet<u32> = gt.ids(q)[..k].iter().copied().collect();
            c.ids().filter(|id| truth.contains(id)).count()
        })
        .sum();
    let candidate_recall = hit as f64 / (nq * k).max(1) as f64;

    let metrics = Metrics {
        queries: nq,
        k,
        candidate_recall,
        full_rerank_recall,
        distortion,
        sweep,
        cost,
    };
    write_out(cfg, DISTORTION_CSV, distortion_csv(&metrics.distortion))?;
    write_out(cfg, SWEEP_CSV, sweep_to_csv(&metrics.sweep))?;
    write_out(cfg, COST_CSV, cost_csv(&metrics.cost))?;
    let report = Report {
        schema_version: SCHEMA_VERSION,
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        config_hash: cfg.hash(),
        config: cfg.clone(),
        metrics,
        environment: Environment {
            threads: rayon::current_num_threads(),
            os: std::env::consts::OS.to_string(),
            arch: std::env::consts::ARCH.to_string(),
        },
        timings_ms: timings,
    };
    write_out(cfg, REPORT, serde_json::to_string_pretty(&report)?)?;
    Ok(report)
}

pub fn load_report(path: &Path) -> Result<Report> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let report: Report =
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    ensure!(
        report.schema_version == SCHEMA_VERSION,
        "report schema {} is not supported (expected {SCHEMA_VERSION})",
        report.schema_version
    );
    Ok(report)
}

/// Writes the synthetic base and query sets as `.fvecs`.
pub fn cmd_synth(cfg: &RunConfig) -> Result<(PathBuf, PathBuf)> {
    synth(cfg).context("synth")
}

fn synth(cfg: &RunConfig) -> Result<(PathBuf, PathBuf)> {
    ensure!(
        matches!(cfg.data, DataSource::Synthetic { .. }),
        "the configured data source is not synthetic"
    );
    let data = load_data(cfg)?;
    fs::create_dir_all(&cfg.out_dir)?;
    let (b, q) = (out_path(cfg, "base.fvecs"), out_path(cfg, "queries.fvecs"));
    write_fvecs(&b, &data.base)?;
    write_fvecs(&q, &data.queries)?;
    Ok((b, q))
}

/// build, gt, calibrate and bench in sequence.
pub fn cmd_run(cfg: &RunConfig) -> Result<Report> {
    cmd_build(cfg)?;
    cmd_gt(cfg)?;
    cmd_calibrate(cfg)?;
    cmd_bench(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn holdout_split_is_even() {
        let picked: Vec<usize> = (0..10).filter(|&i| is_holdout(i, 0.2)).collect();
        assert_eq!(picked, vec![4, 9]);
        assert_eq!((0..100).filter(|&i| is_holdout(i, 0.0)).count(), 0);
        assert_eq!((0..1000).filter(|&i| is_holdout(i, 0.3)).count(), 300);
    }
}
