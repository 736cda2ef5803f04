//! Product quantization: the coarse layer that lives in fast memory.
//!
//! A vector of dimension `D` is split into `m` contiguous sub-vectors of
//! `D / m` values; each is replaced by the index of its nearest centroid in a
//! per-sub-space codebook of `2^nbits` entries. The concatenation of selected
//! centroids is the coarse reconstruction `x_c`, and query distances to it are
//! computed from a per-query lookup table (ADC).
//!
//! Codebook file layout (little-endian):
//!
//! ```text
//! "TRQC" | version u32 | dim u32 | m u32 | nbits u32 | m·2^nbits·(dim/m) f32
//! ```

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::codec::{all_finite, put_f32s, put_u32, Reader};
use crate::distance::l2_sq_fast;
use crate::error::{check_dim, invalid};
use crate::kmeans::{kmeans, KMeansParams};
use crate::vecstore::Dataset;
use crate::{Error, Result};

const MAGIC: &[u8; 4] = b"TRQC";
const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PqConfig {
    /// Number of sub-spaces; must divide the dimension.
    pub m: usize,
    /// Bits per sub-quantizer, `1..=8`.
    pub nbits: u32,
    /// Lloyd iteration cap.
    pub iters: usize,
    pub seed: u64,
}

impl PqConfig {
    /// `m = D/4`, 8 bits: the default operating point for benchmarks.
    pub fn for_dim(dim: usize) -> Self {
        Self { m: (dim / 4).max(1), nbits: 8, iters: 25, seed: 1 }
    }

    fn validate(&self, dim: usize) -> Result<()> {
        if !(1..=8).contains(&self.nbits) {
            return Err(invalid(format!("nbits must be in 1..=8, got {}", self.nbits)));
        }
        if self.m == 0 || dim % self.m != 0 {
            return Err(invalid(format!(
                "dimension {dim} is not divisible by m = {}",
                self.m
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PqCodebook {
    dim: usize,
    m: usize,
    nbits: u32,
    /// `[sub][centroid][dsub]`, flattened.
    centroids: Vec<f32>,
}

/// Flat `N × m` matrix of sub-quantizer indices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PqCodes {
    m: usize,
    data: Vec<u8>,
}

impl PqCodes {
    pub fn new(m: usize, data: Vec<u8>) -> Result<Self> {
        if m == 0 || data.len() % m != 0 {
            return Err(invalid("code matrix is not a whole number of rows"));
        }
        Ok(Self { m, data })
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.m
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn get(&self, i: usize) -> &[u8] {
        &self.data[i * self.m..(i + 1) * self.m]
    }

    pub fn as_bytes(&self) -> &[u8] {
        &self.data
    }
}

/// Per-query `m × 2^nbits` table of squared sub-vector distances.
#[derive(Debug, Clone, PartialEq)]
pub struct AdcTable {
    m: usize,
    ksub: usize,
    table: Vec<f32>,
}

impl AdcTable {
    /// `d̂₀`: the sum of one table entry per sub-space.
    #[inline]
    pub fn distance(&self, code: &[u8]) -> f32 {
        debug_assert_eq!(code.len(), self.m);
        let mut acc = 0.0f32;
        for (sub, &c) in code.iter().enumerate() {
            acc += self.table[sub * self.ksub + c as usize];
        }
        acc
    }

    pub fn entry(&self, sub: usize, centroid: usize) -> f32 {
        self.table[sub * self.ksub + centroid]
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn ksub(&self) -> usize {
        self.ksub
    }
}

/// Free-function form of [`AdcTable::distance`].
pub fn adc_distance(table: &AdcTable, code: &[u8]) -> f32 {
    table.distance(code)
}

impl PqCodebook {
    /// Runs k-means independently in each sub-space. Sub-space `s` is seeded
    /// with `config.seed + s`.
    pub fn train(config: &PqConfig, sample: &Dataset) -> Result<Self> {
        let dim = sample.dim();
        config.validate(dim)?;
        let ksub = 1usize << config.nbits;
        if sample.len() < ksub {
            return Err(invalid(format!(
                "need at least {ksub} training vectors, got {}",
                sample.len()
            )));
        }
        let dsub = dim / config.m;
        let per_sub: Vec<Vec<f32>> = (0..config.m)
            .into_par_iter()
            .map(|sub| {
                let mut slab = Vec::with_capacity(sample.len() * dsub);
                for row in sample.rows() {
                    slab.extend_from_slice(&row[sub * dsub..(sub + 1) * dsub]);
                }
                let params = KMeansParams {
                    k: ksub,
                    iters: config.iters,
                    seed: config.seed.wrapping_add(sub as u64),
                };
                kmeans(&slab, dsub, &params)
            })
            .collect::<Result<_>>()?;
        let centroids = per_sub.concat();
        Ok(Self { dim, m: config.m, nbits: config.nbits, centroids })
    }

    /// Builds a codebook from explicit centroids laid out `[sub][centroid][dsub]`.
    pub fn from_centroids(dim: usize, m: usize, nbits: u32, centroids: Vec<f32>) -> Result<Self> {
        PqConfig { m, nbits, iters: 0, seed: 0 }.validate(dim)?;
        let expected = m * (1usize << nbits) * (dim / m);
        if centroids.len() != expected {
            return Err(invalid(format!(
                "expected {expected} centroid values, got {}",
                centroids.len()
            )));
        }
        if !all_finite(&centroids) {
            return Err(invalid("centroids must be finite"));
        }
        Ok(Self { dim, m, nbits, centroids })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn nbits(&self) -> u32 {
        self.nbits
    }

    pub fn ksub(&self) -> usize {
        1 << self.nbits
    }

    pub fn dsub(&self) -> usize {
        self.dim / self.m
    }

    pub fn centroid(&self, sub: usize, c: usize) -> &[f32] {
        let dsub = self.dsub();
        let start = (sub * self.ksub() + c) * dsub;
        &self.centroids[start..start + dsub]
    }

    fn sub_codebook(&self, sub: usize) -> &[f32] {
        let len = self.ksub() * self.dsub();
        &self.centroids[sub * len..(sub + 1) * len]
    }

    /// Nearest centroid per sub-space; ties go to the lower index.
    pub fn encode(&self, x: &[f32]) -> Result<Vec<u8>> {
        check_dim(self.dim, x.len())?;
        let mut code = vec![0u8; self.m];
        self.encode_into(x, &mut code);
        Ok(code)
    }

    fn encode_into(&self, x: &[f32], out: &mut [u8]) {
        let dsub = self.dsub();
        for (sub, slot) in out.iter_mut().enumerate() {
            let xs = &x[sub * dsub..(sub + 1) * dsub];
            let (c, _) = crate::kmeans::nearest(self.sub_codebook(sub), dsub, xs);
            *slot = c as u8;
        }
    }

    /// Encodes every row in parallel.
    pub fn encode_all(&self, ds: &Dataset) -> Result<PqCodes> {
        check_dim(self.dim, ds.dim())?;
        let mut data = vec![0u8; ds.len() * self.m];
        data.par_chunks_exact_mut(self.m)
            .zip(ds.as_slice().par_chunks_exact(self.dim))
            .for_each(|(out, x)| self.encode_into(x, out));
        Ok(PqCodes { m: self.m, data })
    }

    fn check_code(&self, code: &[u8]) -> Result<()> {
        if code.len() != self.m {
            return Err(Error::Corrupt(format!(
                "code has {} entries, expected {}",
                code.len(),
                self.m
            )));
        }
        let ksub = self.ksub();
        if let Some((sub, &c)) = code.iter().enumerate().find(|(_, &c)| c as usize >= ksub) {
            return Err(Error::Corrupt(format!(
                "code entry {c} in sub-space {sub} exceeds {ksub} centroids"
            )));
        }
        Ok(())
    }

    /// `x_c`: the concatenation of the selected centroids.
    pub fn reconstruct(&self, code: &[u8]) -> Result<Vec<f32>> {
        let mut out = vec![0.0f32; self.dim];
        self.reconstruct_into(code, &mut out)?;
        Ok(out)
    }

    pub fn reconstruct_into(&self, code: &[u8], out: &mut [f32]) -> Result<()> {
        self.check_code(code)?;
        check_dim(self.dim, out.len())?;
        let dsub = self.dsub();
        for (sub, &c) in code.iter().enumerate() {
            out[sub * dsub..(sub + 1) * dsub].copy_from_slice(self.centroid(sub, c as usize));
        }
        Ok(())
    }

    pub fn adc_table(&self, q: &[f32]) -> Result<AdcTable> {
        check_dim(self.dim, q.len())?;
        let dsub = self.dsub();
        let ksub = self.ksub();
        let mut table = Vec::with_capacity(self.m * ksub);
        for sub in 0..self.m {
            let qs = &q[sub * dsub..(sub + 1) * dsub];
            table.extend(
                self.sub_codebook(sub)
                    .chunks_exact(dsub)
                    .map(|c| l2_sq_fast(qs, c)),
            );
        }
        Ok(AdcTable { m: self.m, ksub, table })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(20 + self.centroids.len() * 4);
        out.extend_from_slice(MAGIC);
        put_u32(&mut out, VERSION);
        put_u32(&mut out, self.dim as u32);
        put_u32(&mut out, self.m as u32);
        put_u32(&mut out, self.nbits);
        put_f32s(&mut out, &self.centroids);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes, "codebook");
        r.magic(MAGIC, VERSION)?;
        let dim = r.u32()? as usize;
        let m = r.u32()? as usize;
        let nbits = r.u32()?;
        if dim == 0 {
            return Err(Error::Corrupt("codebook: zero dimension".into()));
        }
        PqConfig { m, nbits, iters: 0, seed: 0 }
            .validate(dim)
            .map_err(|e| Error::Corrupt(format!("codebook: {e}")))?;
        let count = r.check_len((1u64 << nbits) * dim as u64, 4)?;
        let centroids = r.f32s(count)?;
        r.finish()?;
        Self::from_centroids(dim, m, nbits, centroids)
            .map_err(|e| Error::Corrupt(format!("codebook: {e}")))
    }
}
