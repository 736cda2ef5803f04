//! Progressive distance estimation.
//!
//! With `δ = x − x_c` the exact squared distance expands as
//!
//! ```text
//! ‖x − q‖² = ‖q − x_c‖² + ‖δ‖² + 2⟨x_c, δ⟩ − 2⟨q, δ⟩
//! ```
//!
//! The first term is the coarse ADC score `d̂₀`, the next two are stored per
//! record, and `⟨q, δ⟩` is estimated from the ternary code `c` as
//! `‖δ‖ · ⟨q, c⟩ / √k*`. The component of `e_q` orthogonal to the code
//! direction is treated as zero-mean noise and dropped, and so is the
//! alignment factor `⟨e_c, e_δ⟩`, which is not stored; the calibration model
//! absorbs its average.
//!
//! Estimates, from cheapest to most accurate:
//!
//! * coarse: `d̂₀`
//! * [`first_order`]: `d̂₀ + ‖δ‖²`
//! * [`second_order_raw`]: the full expansion with the estimated inner product
//! * [`CalibrationModel::apply`]: a least-squares weighting of the four terms

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::coarse::{AdcTable, PqCodebook};
use crate::codec::{put_f64, put_u32, Reader};
use crate::distance::{l2_sq_f64, norm_sq_f64};
use crate::error::{check_dim, invalid};
use crate::index::IvfIndex;
use crate::trq::{TrqRecord, TrqStore};
use crate::vecstore::Dataset;
use crate::{Error, Result};

const MAGIC: &[u8; 4] = b"TRQM";
const VERSION: u32 = 1;

/// Fraction of the database drawn as calibration queries by default.
pub const DEFAULT_SAMPLE_FRACTION: f64 = 0.003;
/// Inverted-list neighbors kept per calibration query.
pub const DEFAULT_NEIGHBOR_CAP: usize = 64;
/// Fewest pairs [`fit`] accepts.
pub const MIN_FIT_PAIRS: usize = 64;

pub const FEATURE_NAMES: [&str; 4] = ["d0", "d_ip", "delta_sq", "xc_delta"];

/// Per-query state: the query, its norm, and its ADC table.
#[derive(Debug, Clone)]
pub struct QueryContext {
    q: Vec<f32>,
    q_norm: f32,
    adc: AdcTable,
}

impl QueryContext {
    pub fn new(cb: &PqCodebook, q: &[f32]) -> Result<Self> {
        check_dim(cb.dim(), q.len())?;
        Ok(Self {
            q: q.to_vec(),
            q_norm: norm_sq_f64(q).sqrt() as f32,
            adc: cb.adc_table(q)?,
        })
    }

    pub fn query(&self) -> &[f32] {
        &self.q
    }

    pub fn q_norm(&self) -> f32 {
        self.q_norm
    }

    pub fn adc(&self) -> &AdcTable {
        &self.adc
    }
}

/// The four regression inputs for one (query, record) pair.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector {
    /// `‖q − x_c‖²`.
    pub d0: f32,
    /// Estimate of `−2⟨q, δ⟩`.
    pub d_ip: f32,
    /// `‖δ‖²`.
    pub delta_sq: f32,
    /// `⟨x_c, δ⟩`.
    pub xc_delta: f32,
}

impl FeatureVector {
    pub fn from_parts(d0: f32, rec: &TrqRecord<'_>, ip_est: f64) -> Self {
        let norm = f64::from(rec.delta_norm);
        Self {
            d0,
            d_ip: (-2.0 * ip_est) as f32,
            delta_sq: (norm * norm) as f32,
            xc_delta: rec.ip_xc_delta,
        }
    }

    /// Features exactly as the query path computes them.
    pub fn compute(ctx: &QueryContext, d0: f32, rec: &TrqRecord<'_>) -> Self {
        Self::from_parts(d0, rec, estimate_ip(ctx, rec))
    }

    pub fn as_array(&self) -> [f64; 4] {
        [
            f64::from(self.d0),
            f64::from(self.d_ip),
            f64::from(self.delta_sq),
            f64::from(self.xc_delta),
        ]
    }
}

/// `d̂₁ = d̂₀ + ‖δ‖²`.
pub fn first_order(d0: f32, distortion: f32) -> f32 {
    (f64::from(d0) + f64::from(distortion)) as f32
}

/// Estimate of `⟨q, δ⟩` from the record's ternary code, without the
/// alignment factor. Zero for a zero residual.
pub fn estimate_ip(ctx: &QueryContext, rec: &TrqRecord<'_>) -> f64 {
    let (ip, k_star) = rec.inner_product(&ctx.q);
    if k_star == 0 {
        return 0.0;
    }
    f64::from(rec.delta_norm) * ip / (k_star as f64).sqrt()
}

/// `d̂₀ + ‖δ‖² + 2⟨x_c, δ⟩ − 2·ip_est`, summed from the 32-bit features in
/// the same order as [`CalibrationModel::apply`], so identity weights
/// reproduce it bit for bit.
pub fn second_order_raw(d0: f32, rec: &TrqRecord<'_>, ip_est: f64) -> f32 {
    raw_from_features(&FeatureVector::from_parts(d0, rec, ip_est))
}

pub fn raw_from_features(fv: &FeatureVector) -> f32 {
    let [d0, d_ip, delta_sq, xc] = fv.as_array();
    (d0 + d_ip + delta_sq + 2.0 * xc + 0.0) as f32
}

/// Linear map from [`FeatureVector`] to a calibrated distance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibrationModel {
    /// Weights for `d0, d_ip, delta_sq, xc_delta`.
    pub weights: [f64; 4],
    pub intercept: f64,
    pub use_intercept: bool,
    pub sample_fraction: f64,
}

impl Default for CalibrationModel {
    fn default() -> Self {
        Self::identity()
    }
}

impl CalibrationModel {
    /// Weights `(1, 1, 1, 2)`: the uncalibrated second-order estimate.
    pub fn identity() -> Self {
        Self {
            weights: [1.0, 1.0, 1.0, 2.0],
            intercept: 0.0,
            use_intercept: false,
            sample_fraction: 0.0,
        }
    }

    pub fn apply(&self, fv: &FeatureVector) -> f32 {
        let [a, b, c, d] = fv.as_array();
        let w = &self.weights;
        (w[0] * a + w[1] * b + w[2] * c + w[3] * d + self.intercept) as f32
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(56);
        out.extend_from_slice(MAGIC);
        put_u32(&mut out, VERSION);
        put_u32(&mut out, u32::from(self.use_intercept));
        for &w in &self.weights {
            put_f64(&mut out, w);
        }
        put_f64(&mut out, self.intercept);
        put_f64(&mut out, self.sample_fraction);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes, "calibration model");
        r.magic(MAGIC, VERSION)?;
        let flags = r.u32()?;
        if flags > 1 {
            return Err(Error::Corrupt(format!("calibration model: unknown flags {flags:#x}")));
        }
        let mut weights = [0.0; 4];
        for w in &mut weights {
            *w = r.f64()?;
        }
        let intercept = r.f64()?;
        let sample_fraction = r.f64()?;
        r.finish()?;
        if !weights.iter().chain([&intercept, &sample_fraction]).all(|v| v.is_finite()) {
            return Err(Error::Corrupt("calibration model: non-finite parameter".into()));
        }
        Ok(Self { weights, intercept, use_intercept: flags == 1, sample_fraction })
    }

    /// Plain-text listing of the parameters.
    pub fn dump_text(&self) -> String {
        let mut s = format!(
            "calibration model v{VERSION}\nintercept_enabled: {}\nsample_fraction: {}\n",
            self.use_intercept, self.sample_fraction
        );
        for (name, w) in FEATURE_NAMES.iter().zip(&self.weights) {
            s.push_str(&format!("w_{name}: {w:.9e}\n"));
        }
        s.push_str(&format!("intercept: {:.9e}\n", self.intercept));
        s
    }
}

/// Free-function form of [`CalibrationModel::apply`].
pub fn calibrated_distance(model: &CalibrationModel, fv: &FeatureVector) -> f32 {
    model.apply(fv)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CalibrationSampling {
    pub fraction: f64,
    pub seed: u64,
    pub neighbor_cap: usize,
}

impl Default for CalibrationSampling {
    fn default() -> Self {
        Self { fraction: DEFAULT_SAMPLE_FRACTION, seed: 0, neighbor_cap: DEFAULT_NEIGHBOR_CAP }
    }
}

/// One calibration example: a sampled record used as the query, and one of
/// its inverted-list neighbors.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CalibrationPair {
    pub sample: u32,
    pub neighbor: u32,
    pub features: FeatureVector,
    /// Exact `‖x_sample − x_neighbor‖²`.
    pub true_distance: f64,
}

/// Draws `⌊fraction · N⌋` records, treats each as a query and pairs it with
/// the members of its own inverted list (nearest by `d̂₀` first, at most
/// `neighbor_cap`). Pairs come out grouped by sample, samples ascending.
pub fn sample_calibration_pairs(
    base: &Dataset,
    index: &IvfIndex,
    cb: &PqCodebook,
    trq: &TrqStore,
    opts: &CalibrationSampling,
) -> Result<Vec<CalibrationPair>> {
    let n = base.len();
    if index.len() != n || trq.len() != n {
        return Err(invalid("index, residual store and base disagree on record count"));
    }
    check_dim(base.dim(), index.dim())?;
    check_dim(base.dim(), trq.dim())?;
    if !(opts.fraction > 0.0 && opts.fraction <= 1.0) {
        return Err(invalid(format!("calibration fraction {} not in (0, 1]", opts.fraction)));
    }
    if opts.neighbor_cap == 0 {
        return Err(invalid("neighbor cap must be at least 1"));
    }
    let count = ((opts.fraction * n as f64) + 1e-9).floor() as usize;
    if count == 0 {
        return Err(invalid(format!(
            "fraction {} of {n} records yields no calibration samples",
            opts.fraction
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut samples = sample(&mut rng, n, count.min(n)).into_vec();
    samples.sort_unstable();

    let groups: Vec<Vec<CalibrationPair>> = samples
        .par_iter()
        .map(|&s| -> Result<Vec<CalibrationPair>> {
            let x = base.row(s);
            let ctx = QueryContext::new(cb, x)?;
            let mut members: Vec<(f32, u32)> = index
                .list(index.list_of(s as u32))
                .iter()
                .filter(|&&id| id as usize != s)
                .map(|&id| (ctx.adc().distance(index.code(id)), id))
                .collect();
            members.sort_unstable_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            members.truncate(opts.neighbor_cap);
            Ok(members
                .into_iter()
                .map(|(d0, id)| CalibrationPair {
                    sample: s as u32,
                    neighbor: id,
                    features: FeatureVector::compute(&ctx, d0, &trq.record(id as usize)),
                    true_distance: l2_sq_f64(x, base.row(id as usize)),
                })
                .collect())
        })
        .collect::<Result<_>>()?;
    Ok(groups.into_iter().flatten().collect())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FitOptions {
    pub intercept: bool,
    /// Recorded in the model for provenance.
    pub sample_fraction: f64,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self { intercept: true, sample_fraction: DEFAULT_SAMPLE_FRACTION }
    }
}

/// Ridge-damped least squares for `true_distance ≈ A·w (+ b)`.
///
/// Solves `(AᵀA + λI)w = AᵀD` with `λ = 1e-6 · trace(AᵀA)/4` over the four
/// feature columns; the intercept column is not damped.
pub fn fit(pairs: &[CalibrationPair], opts: &FitOptions) -> Result<CalibrationModel> {
    if pairs.len() < MIN_FIT_PAIRS {
        return Err(Error::Fit(format!(
            "need at least {MIN_FIT_PAIRS} pairs, got {}",
            pairs.len()
        )));
    }
    for (j, name) in FEATURE_NAMES.iter().enumerate() {
        let first = pairs[0].features.as_array()[j];
        if pairs.iter().all(|p| p.features.as_array()[j] == first) {
            return Err(Error::Fit(format!("feature column `{name}` is constant")));
        }
    }
    let p = if opts.intercept { 5 } else { 4 };
    let mut ata = [[0.0f64; 5]; 5];
    let mut atd = [0.0f64; 5];
    for pair in pairs {
        let f = pair.features.as_array();
        let row = [f[0], f[1], f[2], f[3], 1.0];
        for i in 0..p {
            atd[i] += row[i] * pair.true_distance;
            for j in 0..p {
                ata[i][j] += row[i] * row[j];
            }
        }
    }
    let lambda = 1e-6 * (0..4).map(|i| ata[i][i]).sum::<f64>() / 4.0;
    for (i, row) in ata.iter_mut().enumerate().take(4) {
        row[i] += lambda;
    }
    let w = cholesky_solve(&ata, &atd, p)
        .ok_or_else(|| Error::Fit("normal equations are rank deficient".into()))?;
    let model = CalibrationModel {
        weights: [w[0], w[1], w[2], w[3]],
        intercept: if opts.intercept { w[4] } else { 0.0 },
        use_intercept: opts.intercept,
        sample_fraction: opts.sample_fraction,
    };
    if !model.weights.iter().all(|v| v.is_finite()) || !model.intercept.is_finite() {
        return Err(Error::Fit("solution is not finite".into()));
    }
    Ok(model)
}

/// Solves the leading `p × p` symmetric positive-definite system.
fn cholesky_solve(a: &[[f64; 5]; 5], b: &[f64; 5], p: usize) -> Option<[f64; 5]> {
    let mut l = [[0.0f64; 5]; 5];
    for i in 0..p {
        for j in 0..=i {
            let s: f64 = (0..j).map(|k| l[i][k] * l[j][k]).sum();
            if i == j {
                let d = a[i][i] - s;
                if !(d > 1e-12 * a[i][i].abs().max(f64::MIN_POSITIVE)) {
                    return None;
                }
                l[i][i] = d.sqrt();
            } else {
                l[i][j] = (a[i][j] - s) / l[j][j];
            }
        }
    }
    let mut y = [0.0f64; 5];
    for i in 0..p {
        let s: f64 = (0..i).map(|k| l[i][k] * y[k]).sum();
        y[i] = (b[i] - s) / l[i][i];
    }
    let mut x = [0.0f64; 5];
    for i in (0..p).rev() {
        let s: f64 = (i + 1..p).map(|k| l[k][i] * x[k]).sum();
        x[i] = (y[i] - s) / l[i][i];
    }
    Some(x)
}

/// Mean squared error of `estimate` against each pair's true distance.
pub fn mse_by<F: Fn(&CalibrationPair) -> f64>(pairs: &[CalibrationPair], estimate: F) -> f64 {
    if pairs.is_empty() {
        return 0.0;
    }
    pairs
        .iter()
        .map(|p| {
            let e = estimate(p) - p.true_distance;
            e * e
        })
        .sum::<f64>()
        / pairs.len() as f64
}
