//! Ternary residual quantization.
//!
//! The residual `δ = x − x_c` left by the coarse layer is encoded as the
//! ternary vector `c ∈ {−1, 0, 1}^D` whose direction `c / ‖c‖` is closest to
//! `δ / ‖δ‖`. For a fixed support size `k`, the best support is the `k`
//! largest-magnitude coordinates with their signs, giving a cosine of
//! `S_k / (√k · ‖δ‖)` where `S_k` is the sum of the `k` largest magnitudes.
//! The optimum over all of `{−1, 0, 1}^D` therefore reduces to a scan of
//! `S_k / √k` over `k` after one sort.
//!
//! Codes are packed five digits per byte as the base-3 number
//! `Σ 3^i (c_i + 1)`, i.e. 1.6 bits per dimension. Each record adds two
//! little-endian `f32` scalars, `⟨x_c, δ⟩` then `‖δ‖`, after the code bytes.
//!
//! Store file layout (little-endian):
//!
//! ```text
//! "TRQS" | version u32 | count u64 | dim u32 | stride u32 | count × record
//! record = ceil(dim/5) packed bytes | ip_xc_delta f32 | delta_norm f32
//! ```

use rayon::prelude::*;

use crate::coarse::{PqCodebook, PqCodes};
use crate::codec::{put_u32, put_u64, Reader};
use crate::distance::{dot_f64, norm_sq_f64};
use crate::error::{check_dim, invalid};
use crate::vecstore::Dataset;
use crate::{Error, Result};

const MAGIC: &[u8; 4] = b"TRQS";
const VERSION: u32 = 1;

/// Ternary digits per packed byte.
pub const DIGITS_PER_BYTE: usize = 5;
/// Number of valid packed byte values (3^5).
pub const PACKED_VALUES: usize = 243;
/// Bytes of per-record scalar metadata.
pub const METADATA_BYTES: usize = 8;

/// Operation counters for the ternary encoder, compiled in for tests and the
/// `instrument` feature only.
#[cfg(any(test, feature = "instrument"))]
pub mod opcount {
    use std::cell::Cell;

    thread_local! {
        static SORTS: Cell<usize> = const { Cell::new(0) };
        static PASSES: Cell<usize> = const { Cell::new(0) };
    }

    pub(crate) fn sort() {
        SORTS.with(|c| c.set(c.get() + 1));
    }

    pub(crate) fn pass() {
        PASSES.with(|c| c.set(c.get() + 1));
    }

    pub fn reset() {
        SORTS.with(|c| c.set(0));
        PASSES.with(|c| c.set(0));
    }

    /// `(sorts, linear passes)` since the last reset on this thread.
    pub fn snapshot() -> (usize, usize) {
        (SORTS.with(Cell::get), PASSES.with(Cell::get))
    }
}

macro_rules! count_op {
    ($f:ident) => {
        #[cfg(any(test, feature = "instrument"))]
        opcount::$f();
    };
}

/// A vector over `{−1, 0, +1}`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TernaryCode {
    entries: Vec<i8>,
    k_star: usize,
}

impl TernaryCode {
    pub fn new(entries: Vec<i8>) -> Result<Self> {
        if let Some(&bad) = entries.iter().find(|&&e| !(-1..=1).contains(&e)) {
            return Err(invalid(format!("ternary entry {bad} outside -1..=1")));
        }
        let k_star = entries.iter().filter(|&&e| e != 0).count();
        Ok(Self { entries, k_star })
    }

    pub fn zeros(dim: usize) -> Self {
        Self { entries: vec![0; dim], k_star: 0 }
    }

    pub fn entries(&self) -> &[i8] {
        &self.entries
    }

    /// Number of nonzero entries.
    pub fn k_star(&self) -> usize {
        self.k_star
    }

    pub fn dim(&self) -> usize {
        self.entries.len()
    }
}

/// Optimal ternary direction of `delta`.
///
/// Magnitude ties are ordered by ascending coordinate index, and among
/// support sizes with equal `S_k/√k` the smallest wins. A zero residual maps
/// to the all-zero code.
pub fn encode_ternary(delta: &[f32]) -> Result<TernaryCode> {
    let dim = delta.len();
    if let Some(i) = delta.iter().position(|v| !v.is_finite()) {
        return Err(invalid(format!("non-finite residual at coordinate {i}")));
    }
    let mut order: Vec<u32> = (0..dim as u32).collect();
    order.sort_by(|&a, &b| {
        delta[b as usize]
            .abs()
            .total_cmp(&delta[a as usize].abs())
            .then(a.cmp(&b))
    });
    count_op!(sort);

    if dim == 0 || delta[order[0] as usize] == 0.0 {
        return Ok(TernaryCode::zeros(dim));
    }

    let mut prefix = Vec::with_capacity(dim);
    let mut acc = 0.0f64;
    for &i in &order {
        acc += f64::from(delta[i as usize].abs());
        prefix.push(acc);
    }
    count_op!(pass);

    let mut k_star = 1usize;
    let mut best = prefix[0];
    for (k, &s) in prefix.iter().enumerate().skip(1) {
        let ratio = s / ((k + 1) as f64).sqrt();
        if ratio > best {
            best = ratio;
            k_star = k + 1;
        }
    }
    count_op!(pass);

    let mut entries = vec![0i8; dim];
    for &i in &order[..k_star] {
        entries[i as usize] = if delta[i as usize] > 0.0 { 1 } else { -1 };
    }
    Ok(TernaryCode { entries, k_star })
}

/// Bytes needed for `dim` packed ternary digits.
pub fn packed_len(dim: usize) -> usize {
    dim.div_ceil(DIGITS_PER_BYTE)
}

/// Bytes per stored record: packed code plus two `f32` scalars.
pub fn stride_for(dim: usize) -> usize {
    packed_len(dim) + METADATA_BYTES
}

/// Storage cost of the packed code alone, in bits per dimension.
pub fn bits_per_dim(dim: usize) -> f64 {
    (8 * packed_len(dim)) as f64 / dim as f64
}

/// Packs five digits per byte; the last group is padded with zeros.
pub fn pack(code: &TernaryCode) -> Vec<u8> {
    let mut out = vec![0u8; packed_len(code.dim())];
    pack_into(code.entries(), &mut out);
    out
}

fn pack_into(entries: &[i8], out: &mut [u8]) {
    for (byte, group) in out.iter_mut().zip(entries.chunks(DIGITS_PER_BYTE)) {
        let mut y = 0u8;
        let mut weight = 1u8;
        for i in 0..DIGITS_PER_BYTE {
            let digit = group.get(i).map_or(1, |&e| (e + 1) as u8);
            y += weight * digit;
            weight = weight.wrapping_mul(3);
        }
        *byte = y;
    }
}

const fn build_decode_table() -> [[i8; DIGITS_PER_BYTE]; PACKED_VALUES] {
    let mut table = [[0i8; DIGITS_PER_BYTE]; PACKED_VALUES];
    let mut y = 0;
    while y < PACKED_VALUES {
        let mut rest = y;
        let mut i = 0;
        while i < DIGITS_PER_BYTE {
            table[y][i] = (rest % 3) as i8 - 1;
            rest /= 3;
            i += 1;
        }
        y += 1;
    }
    table
}

/// Byte → five ternary digits, lowest power of three first.
pub static DECODE_TABLE: [[i8; DIGITS_PER_BYTE]; PACKED_VALUES] = build_decode_table();

/// Inverse of [`pack`]: keeps the first `dim` digits.
pub fn unpack(bytes: &[u8], dim: usize) -> Result<TernaryCode> {
    if bytes.len() != packed_len(dim) {
        return Err(Error::Corrupt(format!(
            "{} packed bytes cannot hold exactly {dim} digits",
            bytes.len()
        )));
    }
    check_packed(bytes)?;
    let mut entries = Vec::with_capacity(dim);
    for &b in bytes {
        entries.extend_from_slice(&DECODE_TABLE[b as usize]);
    }
    entries.truncate(dim);
    TernaryCode::new(entries)
}

fn check_packed(bytes: &[u8]) -> Result<()> {
    if let Some(pos) = bytes.iter().position(|&b| b as usize >= PACKED_VALUES) {
        return Err(Error::Corrupt(format!(
            "packed byte {} at offset {pos} is not a base-3 code",
            bytes[pos]
        )));
    }
    Ok(())
}

/// `⟨q, c⟩` using only additions and subtractions.
pub fn ternary_inner_product(q: &[f32], code: &TernaryCode) -> f32 {
    debug_assert_eq!(q.len(), code.dim());
    let mut acc = 0.0f64;
    for (&v, &e) in q.iter().zip(code.entries()) {
        match e {
            1 => acc += f64::from(v),
            -1 => acc -= f64::from(v),
            _ => {}
        }
    }
    acc as f32
}

/// `⟨q, c⟩` and the nonzero count of `c`, read straight from packed bytes.
/// Bytes must already be validated (`< 243`).
pub fn packed_inner_product(q: &[f32], packed: &[u8]) -> (f64, usize) {
    let mut acc = 0.0f64;
    let mut nnz = 0usize;
    for (group, &b) in q.chunks(DIGITS_PER_BYTE).zip(packed) {
        let digits = &DECODE_TABLE[b as usize];
        for (&v, &e) in group.iter().zip(digits) {
            match e {
                1 => {
                    acc += f64::from(v);
                    nnz += 1;
                }
                -1 => {
                    acc -= f64::from(v);
                    nnz += 1;
                }
                _ => {}
            }
        }
    }
    (acc, nnz)
}

/// Borrowed view of one stored residual record.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrqRecord<'a> {
    pub packed: &'a [u8],
    /// `⟨x_c, δ⟩`.
    pub ip_xc_delta: f32,
    /// `‖δ‖₂`.
    pub delta_norm: f32,
}

impl<'a> TrqRecord<'a> {
    fn parse(bytes: &'a [u8], code_len: usize) -> Self {
        let (packed, meta) = bytes.split_at(code_len);
        Self {
            packed,
            ip_xc_delta: f32::from_le_bytes(meta[0..4].try_into().unwrap()),
            delta_norm: f32::from_le_bytes(meta[4..8].try_into().unwrap()),
        }
    }

    /// `(⟨q, c⟩, k*)` for this record's code.
    pub fn inner_product(&self, q: &[f32]) -> (f64, usize) {
        packed_inner_product(q, self.packed)
    }
}

/// Contiguous fixed-stride array of residual records, indexed by record id.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrqStore {
    dim: usize,
    count: usize,
    stride: usize,
    data: Vec<u8>,
}

impl TrqStore {
    /// Encodes `δ = x − x_c` for every row of `base`, in parallel.
    pub fn build(base: &Dataset, cb: &PqCodebook, codes: &PqCodes) -> Result<Self> {
        check_dim(cb.dim(), base.dim())?;
        if codes.len() != base.len() {
            return Err(invalid(format!(
                "{} codes for {} base rows",
                codes.len(),
                base.len()
            )));
        }
        if codes.m() != cb.m() {
            return Err(invalid("code width does not match codebook"));
        }
        let dim = base.dim();
        let stride = stride_for(dim);
        let code_len = packed_len(dim);
        let mut data = vec![0u8; base.len() * stride];
        data.par_chunks_exact_mut(stride)
            .enumerate()
            .try_for_each(|(i, out)| -> Result<()> {
                let x = base.row(i);
                let xc = cb.reconstruct(codes.get(i))?;
                let delta: Vec<f32> = x.iter().zip(&xc).map(|(&a, &b)| a - b).collect();
                let code = encode_ternary(&delta)?;
                pack_into(code.entries(), &mut out[..code_len]);
                let ip = dot_f64(&xc, &delta) as f32;
                let norm = norm_sq_f64(&delta).sqrt() as f32;
                out[code_len..code_len + 4].copy_from_slice(&ip.to_le_bytes());
                out[code_len + 4..].copy_from_slice(&norm.to_le_bytes());
                Ok(())
            })?;
        Ok(Self { dim, count: base.len(), stride, data })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.count
    }

    pub fn is_empty(&self) -> bool {
        self.count == 0
    }

    pub fn stride(&self) -> usize {
        self.stride
    }

    /// Raw `stride` bytes of record `i`.
    pub fn record_bytes(&self, i: usize) -> &[u8] {
        &self.data[i * self.stride..(i + 1) * self.stride]
    }

    pub fn record(&self, i: usize) -> TrqRecord<'_> {
        TrqRecord::parse(self.record_bytes(i), packed_len(self.dim))
    }

    /// Unpacked ternary code of record `i`.
    pub fn code(&self, i: usize) -> TernaryCode {
        unpack(self.record(i).packed, self.dim).expect("store bytes validated at construction")
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(24 + self.data.len());
        out.extend_from_slice(MAGIC);
        put_u32(&mut out, VERSION);
        put_u64(&mut out, self.count as u64);
        put_u32(&mut out, self.dim as u32);
        put_u32(&mut out, self.stride as u32);
        out.extend_from_slice(&self.data);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes, "trq store");
        r.magic(MAGIC, VERSION)?;
        let count = r.u64()?;
        let dim = r.u32()? as usize;
        let stride = r.u32()? as usize;
        if dim == 0 {
            return Err(Error::Corrupt("trq store: zero dimension".into()));
        }
        if stride != stride_for(dim) {
            return Err(Error::Corrupt(format!(
                "trq store: stride {stride} does not match dimension {dim}"
            )));
        }
        let count = r.check_len(count, stride)?;
        let data = r.take(count * stride)?.to_vec();
        r.finish()?;
        let code_len = packed_len(dim);
        for (i, rec) in data.chunks_exact(stride).enumerate() {
            check_packed(&rec[..code_len])
                .map_err(|e| Error::Corrupt(format!("trq store record {i}: {e}")))?;
            let rec = TrqRecord::parse(rec, code_len);
            if !rec.ip_xc_delta.is_finite() || !(rec.delta_norm >= 0.0 && rec.delta_norm.is_finite()) {
                return Err(Error::Corrupt(format!("trq store record {i}: invalid scalars")));
            }
        }
        Ok(Self { dim, count, stride, data })
    }
}
