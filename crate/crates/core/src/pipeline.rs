//! Two-queue refinement over tiered storage.
//!
//! For one query the pipeline:
//!
//! 1. reads the residual record of every coarse candidate from the far tier
//!    and re-scores it with the (calibrated) second-order estimate, keeping
//!    the best `⌈f·n⌉` (at least `k`) in queue Q1;
//! 2. fetches the full vectors of the Q1 survivors from the SSD tier and
//!    ranks them by exact distance in queue Q2;
//! 3. returns Q2's top `k` with the per-tier access counts and a modeled
//!    latency.
//!
//! Tier access goes through [`FarTier`] and [`SsdTier`], so tests can wrap the
//! stores and count every byte touched.

use std::cmp::Ordering;
use std::collections::{BinaryHeap, HashSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::distance::l2_sq;
use crate::error::{check_dim, invalid};
use crate::estimator::{CalibrationModel, FeatureVector, QueryContext};
use crate::index::CandidateList;
use crate::trq::{TrqRecord, TrqStore};
use crate::vecstore::{Dataset, GroundTruth};
use crate::Result;

/// Largest queue a [`BoundedTopK`] may hold.
pub const MAX_QUEUE_CAPACITY: usize = 1024;

/// Latency and throughput of the slow tiers. Fast memory is free.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TierParams {
    /// Seconds per random SSD read.
    pub ssd_latency: f64,
    /// SSD reads per second.
    pub ssd_iops: f64,
    /// Seconds per far-memory access.
    pub far_latency: f64,
    /// Far-memory bytes per second.
    pub far_bandwidth: f64,
}

impl Default for TierParams {
    /// 45 µs / 1200K IOPS SSD; 271 ns / 22 GB/s far memory.
    fn default() -> Self {
        Self { ssd_latency: 45e-6, ssd_iops: 1.2e6, far_latency: 271e-9, far_bandwidth: 22e9 }
    }
}

impl TierParams {
    pub fn validate(&self) -> Result<()> {
        let all = [self.ssd_latency, self.ssd_iops, self.far_latency, self.far_bandwidth];
        if all.iter().all(|v| v.is_finite() && *v > 0.0) {
            Ok(())
        } else {
            Err(invalid(format!("tier parameters must be positive and finite: {self:?}")))
        }
    }

    /// Far time `accesses·latency + bytes/bandwidth`, plus SSD time with the
    /// first read paying full latency and the rest pipelined at the IOPS
    /// ceiling: `max(n/iops, latency + (n−1)/iops)`.
    pub fn modeled_latency(&self, far_accesses: u64, far_bytes: u64, ssd_fetches: u64) -> f64 {
        let far = far_accesses as f64 * self.far_latency + far_bytes as f64 / self.far_bandwidth;
        let ssd = if ssd_fetches == 0 {
            0.0
        } else {
            let n = ssd_fetches as f64;
            f64::max(n / self.ssd_iops, self.ssd_latency + (n - 1.0) / self.ssd_iops)
        };
        far + ssd
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct QueryCost {
    pub far_accesses: u64,
    pub far_bytes: u64,
    pub ssd_fetches: u64,
    pub ssd_bytes: u64,
    /// Seconds.
    pub modeled_latency: f64,
}

impl QueryCost {
    pub fn from_counts(
        tiers: &TierParams,
        far_accesses: u64,
        far_bytes: u64,
        ssd_fetches: u64,
        ssd_bytes: u64,
    ) -> Self {
        Self {
            far_accesses,
            far_bytes,
            ssd_fetches,
            ssd_bytes,
            modeled_latency: tiers.modeled_latency(far_accesses, far_bytes, ssd_fetches),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Entry {
    dist: f32,
    id: u32,
}

impl Eq for Entry {}

impl Ord for Entry {
    fn cmp(&self, other: &Self) -> Ordering {
        self.dist.total_cmp(&other.dist).then(self.id.cmp(&other.id))
    }
}

impl PartialOrd for Entry {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Keeps the `capacity` smallest `(distance, id)` pairs seen, ordered
/// lexicographically. The root is the current worst kept entry.
#[derive(Debug, Clone)]
pub struct BoundedTopK {
    capacity: usize,
    heap: BinaryHeap<Entry>,
}

impl BoundedTopK {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 || capacity > MAX_QUEUE_CAPACITY {
            return Err(invalid(format!(
                "queue capacity must be in 1..={MAX_QUEUE_CAPACITY}, got {capacity}"
            )));
        }
        Ok(Self { capacity, heap: BinaryHeap::with_capacity(capacity) })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.heap.len()
    }

    pub fn is_empty(&self) -> bool {
        self.heap.is_empty()
    }

    /// The pruning bound: the worst kept entry once the queue is full.
    pub fn bound(&self) -> Option<(f32, u32)> {
        if self.heap.len() < self.capacity {
            return None;
        }
        self.heap.peek().map(|e| (e.dist, e.id))
    }

    /// Whether `(dist, id)` would be kept.
    pub fn admits(&self, dist: f32, id: u32) -> bool {
        match self.bound() {
            None => true,
            Some((d, i)) => Entry { dist, id } < Entry { dist: d, id: i },
        }
    }

    /// Inserts if admitted; returns whether the queue changed.
    pub fn push(&mut self, dist: f32, id: u32) -> bool {
        if !self.admits(dist, id) {
            return false;
        }
        if self.heap.len() == self.capacity {
            self.heap.pop();
        }
        self.heap.push(Entry { dist, id });
        true
    }

    /// Contents ascending by `(distance, id)`.
    pub fn into_sorted_vec(self) -> Vec<(f32, u32)> {
        self.heap.into_sorted_vec().into_iter().map(|e| (e.dist, e.id)).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RefineConfig {
    /// Neighbors returned.
    pub k: usize,
    /// Share of re-scored candidates forwarded to exact re-ranking.
    pub filter_fraction: f64,
    /// Use the fitted model; otherwise the raw second-order estimate.
    pub use_calibration: bool,
    /// Per-query queue size; candidate lists are cut to the best this many by `d̂₀`.
    pub queue_capacity: usize,
}

impl RefineConfig {
    pub fn new(k: usize, filter_fraction: f64) -> Self {
        Self { k, filter_fraction, use_calibration: true, queue_capacity: MAX_QUEUE_CAPACITY }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(invalid("k must be at least 1"));
        }
        if self.queue_capacity == 0 || self.queue_capacity > MAX_QUEUE_CAPACITY {
            return Err(invalid(format!(
                "queue capacity must be in 1..={MAX_QUEUE_CAPACITY}"
            )));
        }
        if self.k > self.queue_capacity {
            return Err(invalid(format!(
                "k = {} exceeds queue capacity {}",
                self.k, self.queue_capacity
            )));
        }
        if !(self.filter_fraction > 0.0 && self.filter_fraction <= 1.0) {
            return Err(invalid(format!(
                "filter fraction {} not in (0, 1]",
                self.filter_fraction
            )));
        }
        Ok(())
    }

    /// Candidates forwarded to exact re-ranking out of `n`:
    /// `⌈f·n⌉` clamped to `[min(k, n), n]`.
    pub fn survivors(&self, n: usize) -> usize {
        // Guard against products like 0.1·30 = 3.0000000000000004.
        let want = (self.filter_fraction * n as f64 - 1e-9).ceil().max(0.0) as usize;
        want.max(self.k).min(n)
    }
}

/// Far-memory residual records.
pub trait FarTier {
    /// Bytes moved per record read.
    fn stride(&self) -> usize;
    fn record(&self, id: u32) -> TrqRecord<'_>;
}

/// Full-precision vectors on SSD.
pub trait SsdTier {
    fn dim(&self) -> usize;
    fn fetch(&self, id: u32) -> &[f32];
}

impl FarTier for TrqStore {
    fn stride(&self) -> usize {
        TrqStore::stride(self)
    }

    fn record(&self, id: u32) -> TrqRecord<'_> {
        TrqStore::record(self, id as usize)
    }
}

impl SsdTier for Dataset {
    fn dim(&self) -> usize {
        Dataset::dim(self)
    }

    fn fetch(&self, id: u32) -> &[f32] {
        self.row(id as usize)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Refined {
    /// `(id, exact squared distance)`, ascending by `(distance, id)`.
    pub neighbors: Vec<(u32, f32)>,
    pub cost: QueryCost,
}

impl Refined {
    pub fn ids(&self) -> Vec<u32> {
        self.neighbors.iter().map(|n| n.0).collect()
    }
}

/// Runs the two-queue refinement for one query.
pub fn refine<F: FarTier + ?Sized, S: SsdTier + ?Sized>(
    candidates: &CandidateList,
    ctx: &QueryContext,
    far: &F,
    model: &CalibrationModel,
    ssd: &S,
    cfg: &RefineConfig,
    tiers: &TierParams,
) -> Result<Refined> {
    cfg.validate()?;
    tiers.validate()?;
    check_dim(ssd.dim(), ctx.query().len())?;
    if candidates.is_empty() {
        return Ok(Refined { neighbors: Vec::new(), cost: QueryCost::default() });
    }

    let mut scan: Vec<_> = candidates.entries.clone();
    if scan.len() > cfg.queue_capacity {
        scan.sort_unstable_by(|a, b| a.d0.total_cmp(&b.d0).then(a.id.cmp(&b.id)));
        scan.truncate(cfg.queue_capacity);
    }
    let identity = CalibrationModel::identity();
    let model = if cfg.use_calibration { model } else { &identity };

    let survivors = cfg.survivors(scan.len());
    let mut q1 = BoundedTopK::new(survivors)?;
    let stride = far.stride() as u64;
    let mut far_accesses = 0u64;
    for c in &scan {
        let rec = far.record(c.id);
        far_accesses += 1;
        let est = model.apply(&FeatureVector::compute(ctx, c.d0, &rec));
        q1.push(est, c.id);
    }

    let mut q2 = BoundedTopK::new(cfg.k)?;
    let mut ssd_fetches = 0u64;
    for (_, id) in q1.into_sorted_vec() {
        let x = ssd.fetch(id);
        ssd_fetches += 1;
        q2.push(l2_sq(ctx.query(), x), id);
    }
    let row_bytes = 4 * ssd.dim() as u64;
    let cost = QueryCost::from_counts(
        tiers,
        far_accesses,
        far_accesses * stride,
        ssd_fetches,
        ssd_fetches * row_bytes,
    );
    let neighbors = q2.into_sorted_vec().into_iter().map(|(d, id)| (id, d)).collect();
    Ok(Refined { neighbors, cost })
}

/// Exact re-ranking of every candidate, with its SSD-only cost.
pub fn full_rerank(
    candidates: &CandidateList,
    query: &[f32],
    ssd: &Dataset,
    k: usize,
    tiers: &TierParams,
) -> Refined {
    let mut all: Vec<(f32, u32)> = candidates
        .entries
        .iter()
        .map(|c| (l2_sq(query, ssd.row(c.id as usize)), c.id))
        .collect();
    all.sort_unstable_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    all.truncate(k);
    let n = candidates.len() as u64;
    Refined {
        neighbors: all.into_iter().map(|(d, id)| (id, d)).collect(),
        cost: QueryCost::from_counts(tiers, 0, 0, n, n * 4 * ssd.dim() as u64),
    }
}

/// Mean over queries of `|result[..k] ∩ truth[..k]| / k`.
pub fn recall_at_k<R: AsRef<[u32]>>(results: &[R], gt: &GroundTruth, k: usize) -> Result<f64> {
    if k == 0 || k > gt.k {
        return Err(invalid(format!("k = {k} must be in 1..={}", gt.k)));
    }
    if results.len() != gt.num_queries() {
        return Err(invalid(format!(
            "{} result rows for {} ground-truth queries",
            results.len(),
            gt.num_queries()
        )));
    }
    if results.is_empty() {
        return Ok(0.0);
    }
    let total: usize = results
        .iter()
        .enumerate()
        .map(|(q, r)| {
            let truth: HashSet<u32> = gt.ids(q)[..k].iter().copied().collect();
            let r = r.as_ref();
            r[..k.min(r.len())].iter().filter(|id| truth.contains(id)).count()
        })
        .sum();
    Ok(total as f64 / (results.len() * k) as f64)
}

/// One row of a recall-versus-refinement sweep.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub fraction: f64,
    pub recall: f64,
    pub mean_ssd_fetches: f64,
    /// `mean_ssd_fetches / k`.
    pub refinement_ratio: f64,
    pub modeled_latency_us: f64,
}

pub const SWEEP_CSV_HEADER: &str = "fraction,recall,mean_ssd_fetches,refinement_ratio,modeled_latency_us";

pub fn sweep_to_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from(SWEEP_CSV_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.fraction, r.recall, r.mean_ssd_fetches, r.refinement_ratio, r.modeled_latency_us
        ));
    }
    out
}

/// Everything a sweep needs besides the fractions.
pub struct SweepInputs<'a> {
    pub contexts: &'a [QueryContext],
    pub candidates: &'a [CandidateList],
    pub far: &'a TrqStore,
    pub ssd: &'a Dataset,
    pub model: &'a CalibrationModel,
    pub gt: &'a GroundTruth,
    pub k: usize,
    pub use_calibration: bool,
    pub queue_capacity: usize,
    pub tiers: TierParams,
}

/// Refines every query at one filter fraction. Queries run in parallel and
/// results come back in query order.
pub fn refine_batch(inputs: &SweepInputs<'_>, fraction: f64) -> Result<Vec<Refined>> {
    if inputs.contexts.len() != inputs.candidates.len() {
        return Err(invalid("one candidate list per query context is required"));
    }
    let cfg = RefineConfig {
        k: inputs.k,
        filter_fraction: fraction,
        use_calibration: inputs.use_calibration,
        queue_capacity: inputs.queue_capacity,
    };
    inputs
        .contexts
        .par_iter()
        .zip(inputs.candidates)
        .map(|(ctx, cands)| {
            refine(cands, ctx, inputs.far, inputs.model, inputs.ssd, &cfg, &inputs.tiers)
        })
        .collect()
}

/// Folds per-query results into a sweep row, in query order.
pub fn summarize_sweep(
    fraction: f64,
    results: &[Refined],
    gt: &GroundTruth,
    k: usize,
) -> Result<SweepRow> {
    let ids: Vec<Vec<u32>> = results.iter().map(Refined::ids).collect();
    let nq = results.len().max(1) as f64;
    let mean_ssd = results.iter().map(|r| r.cost.ssd_fetches as f64).sum::<f64>() / nq;
    let mean_latency = results.iter().map(|r| r.cost.modeled_latency).sum::<f64>() / nq;
    Ok(SweepRow {
        fraction,
        recall: recall_at_k(&ids, gt, k)?,
        mean_ssd_fetches: mean_ssd,
        refinement_ratio: mean_ssd / k as f64,
        modeled_latency_us: mean_latency * 1e6,
    })
}

/// One row per filter fraction.
pub fn sweep_refinement(inputs: &SweepInputs<'_>, fractions: &[f64]) -> Result<Vec<SweepRow>> {
    fractions
        .iter()
        .map(|&f| summarize_sweep(f, &refine_batch(inputs, f)?, inputs.gt, inputs.k))
        .collect()
}
