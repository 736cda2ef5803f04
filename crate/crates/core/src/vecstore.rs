//! Dataset ingestion, synthetic data and the exact nearest-neighbor oracle.
//!
//! File formats are the ones used by the classic ANN benchmark suites: every
//! record is a little-endian `i32` dimension `d` followed by `d` payload
//! elements (`f32` for `.fvecs`, `i32` for `.ivecs`, `u8` for `.bvecs`).

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::codec::all_finite;
use crate::distance::l2_sq;
use crate::error::{check_dim, invalid};
use crate::{Error, Result};

/// Row-major collection of `f32` vectors sharing one dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    dim: usize,
    data: Vec<f32>,
}

impl Dataset {
    /// Wraps `data` as `data.len() / dim` rows. Rejects `dim == 0`, ragged
    /// lengths, and non-finite values.
    pub fn from_vec(dim: usize, data: Vec<f32>) -> Result<Self> {
        if dim == 0 {
            return Err(invalid("dimension must be at least 1"));
        }
        if data.len() % dim != 0 {
            return Err(invalid(format!(
                "data length {} is not a multiple of dimension {dim}",
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(invalid(format!(
                "non-finite value in row {} column {}",
                pos / dim,
                pos % dim
            )));
        }
        Ok(Self { dim, data })
    }

    pub fn from_rows<R: AsRef<[f32]>>(rows: &[R]) -> Result<Self> {
        let first = rows
            .first()
            .ok_or_else(|| Error::Empty("no rows".into()))?
            .as_ref()
            .len();
        let mut data = Vec::with_capacity(first * rows.len());
        for row in rows {
            check_dim(first, row.as_ref().len())?;
            data.extend_from_slice(row.as_ref());
        }
        Self::from_vec(first, data)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> std::slice::ChunksExact<'_, f32> {
        self.data.chunks_exact(self.dim)
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    /// Copies the listed rows, in the order given.
    pub fn subset(&self, ids: &[usize]) -> Dataset {
        let mut data = Vec::with_capacity(ids.len() * self.dim);
        for &i in ids {
            data.extend_from_slice(self.row(i));
        }
        Dataset { dim: self.dim, data }
    }

    /// Splits into the first `n` rows and the rest.
    pub fn split_at(&self, n: usize) -> (Dataset, Dataset) {
        let n = n.min(self.len());
        let (a, b) = self.data.split_at(n * self.dim);
        (
            Dataset { dim: self.dim, data: a.to_vec() },
            Dataset { dim: self.dim, data: b.to_vec() },
        )
    }

    /// `count` distinct rows drawn with `seed`, kept in ascending row order.
    /// Returns a copy of everything when `count >= len`.
    pub fn sample_rows(&self, count: usize, seed: u64) -> Dataset {
        if count >= self.len() {
            return self.clone();
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut picked = rand::seq::index::sample(&mut rng, self.len(), count).into_vec();
        picked.sort_unstable();
        self.subset(&picked)
    }
}

/// Row-major `i32` matrix, as stored in `.ivecs` files.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IntMatrix {
    pub dim: usize,
    pub data: Vec<i32>,
}

impl IntMatrix {
    pub fn len(&self) -> usize {
        if self.dim == 0 {
            0
        } else {
            self.data.len() / self.dim
        }
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn row(&self, i: usize) -> &[i32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }
}

/// Walks the `[d: i32][d × elem_size payload]` record structure shared by the
/// three vector formats, calling `sink` with each payload.
fn walk_records<'a>(
    bytes: &'a [u8],
    elem_size: usize,
    what: &str,
    mut sink: impl FnMut(&'a [u8]) -> Result<()>,
) -> Result<usize> {
    if bytes.is_empty() {
        return Err(Error::Empty(format!("{what} input has no records")));
    }
    let mut pos = 0usize;
    let mut dim: Option<usize> = None;
    let mut record = 0usize;
    while pos < bytes.len() {
        let header = bytes.get(pos..pos + 4).ok_or_else(|| truncated(what, record))?;
        let d = i32::from_le_bytes(header.try_into().unwrap());
        if d <= 0 {
            return Err(Error::Format(format!(
                "{what} record {record}: invalid dimension {d}"
            )));
        }
        let d = d as usize;
        match dim {
            None => dim = Some(d),
            Some(expected) if expected != d => {
                return Err(Error::Format(format!(
                    "{what} record {record}: dimension {d} differs from {expected}"
                )))
            }
            _ => {}
        }
        pos += 4;
        let len = d * elem_size;
        let payload = bytes
            .get(pos..pos + len)
            .ok_or_else(|| truncated(what, record))?;
        sink(payload)?;
        pos += len;
        record += 1;
    }
    Ok(dim.unwrap_or(0))
}

fn truncated(what: &str, record: usize) -> Error {
    Error::Io(std::io::Error::new(
        std::io::ErrorKind::UnexpectedEof,
        format!("{what} truncated in record {record}"),
    ))
}

/// Parses an in-memory `.fvecs` image.
pub fn parse_fvecs(bytes: &[u8]) -> Result<Dataset> {
    let mut data = Vec::new();
    let dim = walk_records(bytes, 4, "fvecs", |payload| {
        data.extend(
            payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap())),
        );
        Ok(())
    })?;
    if !all_finite(&data) {
        return Err(Error::Format("fvecs contains non-finite values".into()));
    }
    Ok(Dataset { dim, data })
}

/// Parses an in-memory `.ivecs` image.
pub fn parse_ivecs(bytes: &[u8]) -> Result<IntMatrix> {
    let mut data = Vec::new();
    let dim = walk_records(bytes, 4, "ivecs", |payload| {
        data.extend(
            payload
                .chunks_exact(4)
                .map(|c| i32::from_le_bytes(c.try_into().unwrap())),
        );
        Ok(())
    })?;
    Ok(IntMatrix { dim, data })
}

/// Parses an in-memory `.bvecs` image, widening bytes to floats.
pub fn parse_bvecs(bytes: &[u8]) -> Result<Dataset> {
    let mut data = Vec::new();
    let dim = walk_records(bytes, 1, "bvecs", |payload| {
        data.extend(payload.iter().map(|&b| f32::from(b)));
        Ok(())
    })?;
    Ok(Dataset { dim, data })
}

pub fn read_fvecs(path: impl AsRef<Path>) -> Result<Dataset> {
    parse_fvecs(&fs::read(path)?)
}

pub fn read_ivecs(path: impl AsRef<Path>) -> Result<IntMatrix> {
    parse_ivecs(&fs::read(path)?)
}

pub fn read_bvecs(path: impl AsRef<Path>) -> Result<Dataset> {
    parse_bvecs(&fs::read(path)?)
}

fn dim_header(dim: usize) -> Result<[u8; 4]> {
    let d = i32::try_from(dim).map_err(|_| invalid(format!("dimension {dim} exceeds i32")))?;
    Ok(d.to_le_bytes())
}

pub fn encode_fvecs(ds: &Dataset) -> Result<Vec<u8>> {
    let header = dim_header(ds.dim)?;
    let mut out = Vec::with_capacity(ds.len() * (4 + 4 * ds.dim));
    for row in ds.rows() {
        out.extend_from_slice(&header);
        for v in row {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn encode_ivecs(m: &IntMatrix) -> Result<Vec<u8>> {
    let header = dim_header(m.dim)?;
    let mut out = Vec::with_capacity(m.len() * (4 + 4 * m.dim));
    for row in m.data.chunks_exact(m.dim.max(1)) {
        out.extend_from_slice(&header);
        for v in row {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

/// Encodes a dataset whose values are all integers in `0..=255`.
pub fn encode_bvecs(ds: &Dataset) -> Result<Vec<u8>> {
    let header = dim_header(ds.dim)?;
    let mut out = Vec::with_capacity(ds.len() * (4 + ds.dim));
    for row in ds.rows() {
        out.extend_from_slice(&header);
        for &v in row {
            if !(0.0..=255.0).contains(&v) || v.fract() != 0.0 {
                return Err(invalid(format!("value {v} is not representable as u8")));
            }
            out.push(v as u8);
        }
    }
    Ok(out)
}

pub fn write_fvecs(path: impl AsRef<Path>, ds: &Dataset) -> Result<()> {
    Ok(fs::write(path, encode_fvecs(ds)?)?)
}

pub fn write_ivecs(path: impl AsRef<Path>, m: &IntMatrix) -> Result<()> {
    Ok(fs::write(path, encode_ivecs(m)?)?)
}

pub fn write_bvecs(path: impl AsRef<Path>, ds: &Dataset) -> Result<()> {
    Ok(fs::write(path, encode_bvecs(ds)?)?)
}

/// Gaussian-mixture test data.
///
/// The generator is ChaCha8 (`rand_chacha`) seeded with `seed` through
/// `SeedableRng::seed_from_u64`; normals come from `rand_distr::StandardNormal`
/// (ziggurat). Cluster centers are drawn first from `N(0, 4·I)`, then each
/// point picks a uniform cluster and adds `N(0, I)` noise.
pub fn synth_gaussian(n: usize, dim: usize, seed: u64, clusters: usize) -> Result<Dataset> {
    if dim == 0 {
        return Err(invalid("dimension must be at least 1"));
    }
    if clusters == 0 {
        return Err(invalid("need at least one cluster"));
    }
    if n < clusters {
        return Err(invalid(format!("n = {n} is smaller than clusters = {clusters}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let centers: Vec<f64> = (0..clusters * dim)
        .map(|_| 2.0 * rng.sample::<f64, _>(StandardNormal))
        .collect();
    let mut data = Vec::with_capacity(n * dim);
    for _ in 0..n {
        let c = rng.random_range(0..clusters);
        let center = &centers[c * dim..(c + 1) * dim];
        for &mu in center {
            let z: f64 = rng.sample(StandardNormal);
            data.push((mu + z) as f32);
        }
    }
    Dataset::from_vec(dim, data)
}

/// Exact k nearest neighbors of every query, by squared L2.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub k: usize,
    /// `queries × k` record indices.
    pub ids: Vec<u32>,
    /// `queries × k` squared distances, ascending per row.
    pub dists: Vec<f32>,
}

impl GroundTruth {
    pub fn num_queries(&self) -> usize {
        if self.k == 0 {
            0
        } else {
            self.ids.len() / self.k
        }
    }

    pub fn ids(&self, q: usize) -> &[u32] {
        &self.ids[q * self.k..(q + 1) * self.k]
    }

    pub fn dists(&self, q: usize) -> &[f32] {
        &self.dists[q * self.k..(q + 1) * self.k]
    }

    /// Writes ids as `.ivecs` and distances as `.fvecs`.
    pub fn save(&self, ids_path: impl AsRef<Path>, dists_path: impl AsRef<Path>) -> Result<()> {
        let ids = IntMatrix {
            dim: self.k,
            data: self
                .ids
                .iter()
                .map(|&i| i32::try_from(i).map_err(|_| invalid("record id exceeds i32")))
                .collect::<Result<_>>()?,
        };
        write_ivecs(ids_path, &ids)?;
        write_fvecs(dists_path, &Dataset::from_vec(self.k, self.dists.clone())?)
    }

    pub fn load(ids_path: impl AsRef<Path>, dists_path: impl AsRef<Path>) -> Result<Self> {
        let ids = read_ivecs(ids_path)?;
        let dists = read_fvecs(dists_path)?;
        Self::from_parts(ids, dists)
    }

    pub fn from_parts(ids: IntMatrix, dists: Dataset) -> Result<Self> {
        check_dim(ids.dim, dists.dim())?;
        if ids.len() != dists.len() {
            return Err(Error::Format(format!(
                "ground truth has {} id rows but {} distance rows",
                ids.len(),
                dists.len()
            )));
        }
        let ids = ids
            .data
            .iter()
            .map(|&i| {
                u32::try_from(i).map_err(|_| Error::Format(format!("negative record id {i}")))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { k: dists.dim(), ids, dists: dists.as_slice().to_vec() })
    }
}

/// Brute-force k nearest neighbors. Ties go to the lower record index.
pub fn brute_force_knn(base: &Dataset, queries: &Dataset, k: usize) -> Result<GroundTruth> {
    check_dim(base.dim(), queries.dim())?;
    if k == 0 {
        return Err(invalid("k must be at least 1"));
    }
    if k > base.len() {
        return Err(invalid(format!("k = {k} exceeds base size {}", base.len())));
    }
    if base.len() > u32::MAX as usize {
        return Err(invalid("base too large for 32-bit record ids"));
    }
    let rows: Vec<Vec<(f32, u32)>> = (0..queries.len())
        .into_par_iter()
        .map(|qi| {
            let q = queries.row(qi);
            let mut all: Vec<(f32, u32)> = base
                .rows()
                .enumerate()
                .map(|(i, x)| (l2_sq(q, x), i as u32))
                .collect();
            let cmp = |a: &(f32, u32), b: &(f32, u32)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
            if k < all.len() {
                all.select_nth_unstable_by(k - 1, cmp);
                all.truncate(k);
            }
            all.sort_unstable_by(cmp);
            all
        })
        .collect();
    let mut ids = Vec::with_capacity(rows.len() * k);
    let mut dists = Vec::with_capacity(rows.len() * k);
    for row in rows {
        for (d, i) in row {
            ids.push(i);
            dists.push(d);
        }
    }
    Ok(GroundTruth { k, ids, dists })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fvecs_bytes(rows: &[&[f32]]) -> Vec<u8> {
        let mut out = Vec::new();
        for r in rows {
            out.extend_from_slice(&(r.len() as i32).to_le_bytes());
            for v in *r {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    #[test]
    fn two_record_fvecs() {
        let ds = parse_fvecs(&fvecs_bytes(&[&[1., 2., 3., 4.], &[5., 6., 7., 8.]])).unwrap();
        assert_eq!(ds.dim(), 4);
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.row(1), &[5., 6., 7., 8.]);
    }

    #[test]
    fn empty_file_rejected() {
        assert!(matches!(parse_fvecs(&[]), Err(Error::Empty(_))));
        assert!(matches!(parse_ivecs(&[]), Err(Error::Empty(_))));
        assert!(matches!(parse_bvecs(&[]), Err(Error::Empty(_))));
    }

    #[test]
    fn mismatched_dimension_names_record() {
        let bytes = fvecs_bytes(&[&[1., 2.], &[1., 2.], &[3., 4., 5.]]);
        match parse_fvecs(&bytes) {
            Err(Error::Format(msg)) => assert!(msg.contains("record 2"), "{msg}"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn truncated_is_io_error() {
        let mut bytes = fvecs_bytes(&[&[1., 2., 3.]]);
        bytes.pop();
        match parse_fvecs(&bytes) {
            Err(Error::Io(e)) => assert_eq!(e.kind(), std::io::ErrorKind::UnexpectedEof),
            other => panic!("unexpected {other:?}"),
        }
        assert!(matches!(parse_fvecs(&[3, 0]), Err(Error::Io(_))));
    }

    #[test]
    fn nonpositive_dimension_rejected() {
        assert!(matches!(parse_fvecs(&0i32.to_le_bytes()), Err(Error::Format(_))));
        assert!(matches!(parse_ivecs(&(-4i32).to_le_bytes()), Err(Error::Format(_))));
    }

    #[test]
    fn nan_rejected() {
        let bytes = fvecs_bytes(&[&[1., f32::NAN]]);
        assert!(matches!(parse_fvecs(&bytes), Err(Error::Format(_))));
    }

    #[test]
    fn ivecs_single_record() {
        let mut bytes = 3i32.to_le_bytes().to_vec();
        for v in [7i32, 8, 9] {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        let m = parse_ivecs(&bytes).unwrap();
        assert_eq!(m.dim, 3);
        assert_eq!(m.row(0), &[7, 8, 9]);
        assert_eq!(encode_ivecs(&m).unwrap(), bytes);
    }

    #[test]
    fn bvecs_full_byte_range() {
        let mut bytes = 256i32.to_le_bytes().to_vec();
        bytes.extend(0..=255u8);
        let ds = parse_bvecs(&bytes).unwrap();
        for (i, &v) in ds.row(0).iter().enumerate() {
            assert_eq!(v, i as f32);
        }
        assert_eq!(encode_bvecs(&ds).unwrap(), bytes);
        let bad = Dataset::from_vec(1, vec![0.5]).unwrap();
        assert!(encode_bvecs(&bad).is_err());
    }

    #[test]
    fn dataset_rejects_bad_shapes() {
        assert!(Dataset::from_vec(0, vec![]).is_err());
        assert!(Dataset::from_vec(3, vec![1.0; 4]).is_err());
        assert!(Dataset::from_vec(1, vec![f32::INFINITY]).is_err());
        assert!(Dataset::from_rows(&[vec![1.0, 2.0], vec![3.0]]).is_err());
    }

    #[test]
    fn sample_rows_is_sorted_and_seeded() {
        let ds = Dataset::from_vec(1, (0..50).map(|i| i as f32).collect()).unwrap();
        let a = ds.sample_rows(10, 7);
        assert_eq!(a, ds.sample_rows(10, 7));
        assert_ne!(a, ds.sample_rows(10, 8));
        let v = a.as_slice();
        assert_eq!(v.len(), 10);
        assert!(v.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(ds.sample_rows(50, 1), ds);
        assert_eq!(ds.sample_rows(99, 1), ds);
    }

    #[test]
    fn synth_determinism_and_errors() {
        let a = synth_gaussian(10, 4, 42, 1).unwrap();
        let b = synth_gaussian(10, 4, 42, 1).unwrap();
        assert_eq!(encode_fvecs(&a).unwrap(), encode_fvecs(&b).unwrap());
        assert_ne!(a, synth_gaussian(10, 4, 43, 1).unwrap());
        assert!(synth_gaussian(0, 4, 1, 1).is_err());
        assert!(synth_gaussian(3, 4, 1, 4).is_err());
        assert!(synth_gaussian(3, 0, 1, 1).is_err());
    }

    #[test]
    fn synth_single_cluster_mean_near_center() {
        // With one cluster the center is the first `dim` draws of N(0, 4I);
        // recover it by replaying the generator.
        let (n, dim, seed) = (20_000usize, 8usize, 7u64);
        let ds = synth_gaussian(n, dim, seed, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let center: Vec<f64> = (0..dim)
            .map(|_| 2.0 * rng.sample::<f64, _>(StandardNormal))
            .collect();
        let bound = 5.0 / (n as f64).sqrt();
        for j in 0..dim {
            let mean = ds.rows().map(|r| f64::from(r[j])).sum::<f64>() / n as f64;
            assert!((mean - center[j]).abs() < bound, "dim {j}: {mean} vs {}", center[j]);
        }
    }

    #[test]
    fn knn_hand_example() {
        let base = Dataset::from_rows(&[[0.0f32, 0.0], [1.0, 0.0], [3.0, 0.0]]).unwrap();
        let q = Dataset::from_rows(&[[0.9f32, 0.0]]).unwrap();
        let gt = brute_force_knn(&base, &q, 2).unwrap();
        assert_eq!(gt.ids(0), &[1, 0]);
        assert!((gt.dists(0)[0] - 0.01).abs() < 1e-6);
        assert!((gt.dists(0)[1] - 0.81).abs() < 1e-6);
    }

    #[test]
    fn knn_self_query_and_ties() {
        let base = Dataset::from_rows(&[[1.0f32], [3.0], [1.0], [5.0]]).unwrap();
        let q = Dataset::from_rows(&[[1.0f32], [2.0]]).unwrap();
        let gt = brute_force_knn(&base, &q, 3).unwrap();
        assert_eq!(gt.ids(0), &[0, 2, 1]);
        assert_eq!(gt.dists(0)[0], 0.0);
        // 2.0 is equidistant from 1.0 (ids 0, 2) and 3.0 (id 1)
        assert_eq!(gt.ids(1), &[0, 1, 2]);
    }

    #[test]
    fn knn_errors() {
        let base = Dataset::from_rows(&[[1.0f32, 2.0]]).unwrap();
        let q3 = Dataset::from_rows(&[[1.0f32, 2.0, 3.0]]).unwrap();
        assert!(matches!(
            brute_force_knn(&base, &q3, 1),
            Err(Error::DimensionMismatch { .. })
        ));
        assert!(brute_force_knn(&base, &base, 2).is_err());
        assert!(brute_force_knn(&base, &base, 0).is_err());
    }

    #[test]
    fn ground_truth_file_roundtrip() {
        let base = synth_gaussian(50, 3, 1, 2).unwrap();
        let q = synth_gaussian(5, 3, 2, 1).unwrap();
        let gt = brute_force_knn(&base, &q, 7).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let (a, b) = (dir.path().join("gt.ivecs"), dir.path().join("gt.fvecs"));
        gt.save(&a, &b).unwrap();
        assert_eq!(GroundTruth::load(&a, &b).unwrap(), gt);
    }
}
