//! IVF candidate generation.
//!
//! Records are partitioned by nearest coarse centroid. A query probes the
//! `nprobe` closest lists, scores every member with its PQ code through the
//! query's ADC table, and keeps the `L` best as `(record id, d̂₀)` candidates.
//! Refinement consumes only those pairs, so any other candidate generator
//! producing a [`CandidateList`] can be slotted in.
//!
//! File layout (little-endian):
//!
//! ```text
//! "TRQI" | version u32 | dim u32 | nlist u32 | m u32 | count u64
//! centroids nlist·dim f32 | offsets (nlist+1) u64 | ids count u32 | codes count·m u8
//! ```
//! `ids` and `codes` are stored in list order; `offsets[l]..offsets[l+1]`
//! delimits list `l`.

use rayon::prelude::*;

use crate::coarse::{PqCodebook, PqCodes};
use crate::codec::{all_finite, put_f32s, put_u32, put_u64, Reader};
use crate::distance::l2_sq_fast;
use crate::error::{check_dim, invalid};
use crate::estimator::QueryContext;
use crate::kmeans::{assign, kmeans, KMeansParams};
use crate::vecstore::Dataset;
use crate::{Error, Result};

const MAGIC: &[u8; 4] = b"TRQI";
const VERSION: u32 = 1;

/// Default candidate budget per query.
pub const DEFAULT_CANDIDATES: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct IvfParams {
    pub nlist: usize,
    pub iters: usize,
    pub seed: u64,
    /// Rows used to train the coarse centroids; `None` trains on all rows.
    pub train_size: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Candidate {
    pub id: u32,
    pub d0: f32,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct CandidateList {
    pub entries: Vec<Candidate>,
    pub nprobe_used: usize,
}

impl CandidateList {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = u32> + '_ {
        self.entries.iter().map(|c| c.id)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IvfIndex {
    dim: usize,
    nlist: usize,
    m: usize,
    centroids: Vec<f32>,
    offsets: Vec<u64>,
    ids: Vec<u32>,
    codes: Vec<u8>,
    /// Record id → slot in `ids` / `codes`. Derived, not serialized.
    slot: Vec<u32>,
    /// Record id → list. Derived, not serialized.
    list_of: Vec<u32>,
}

/// Partitions `base` into `params.nlist` lists and stores each record's PQ
/// code alongside its id.
pub fn build_ivf(base: &Dataset, params: &IvfParams, cb: &PqCodebook) -> Result<IvfIndex> {
    check_dim(cb.dim(), base.dim())?;
    let n = base.len();
    if params.nlist == 0 {
        return Err(invalid("nlist must be at least 1"));
    }
    if params.nlist > n {
        return Err(invalid(format!("nlist = {} exceeds {n} records", params.nlist)));
    }
    if n > u32::MAX as usize {
        return Err(invalid("too many records for 32-bit ids"));
    }
    let dim = base.dim();
    let centroids = {
        let train_rows = params.train_size.unwrap_or(n).clamp(params.nlist, n);
        let train = base.sample_rows(train_rows, params.seed ^ 0x9e37_79b9_7f4a_7c15);
        let kp = KMeansParams { k: params.nlist, iters: params.iters, seed: params.seed };
        kmeans(train.as_slice(), dim, &kp)?
    };

    let assignment = assign(&centroids, dim, base.as_slice());
    let codes = cb.encode_all(base)?;
    IvfIndex::from_assignment(dim, centroids, &assignment, &codes)
}

impl IvfIndex {
    fn from_assignment(
        dim: usize,
        centroids: Vec<f32>,
        assignment: &[(usize, f32)],
        codes: &PqCodes,
    ) -> Result<Self> {
        let nlist = centroids.len() / dim;
        let m = codes.m();
        let mut sizes = vec![0u64; nlist];
        for &(l, _) in assignment {
            sizes[l] += 1;
        }
        let mut offsets = Vec::with_capacity(nlist + 1);
        offsets.push(0u64);
        for s in &sizes {
            offsets.push(offsets.last().unwrap() + s);
        }
        let mut fill: Vec<usize> = offsets[..nlist].iter().map(|&o| o as usize).collect();
        let n = assignment.len();
        let mut ids = vec![0u32; n];
        let mut packed = vec![0u8; n * m];
        for (i, &(l, _)) in assignment.iter().enumerate() {
            let s = fill[l];
            fill[l] += 1;
            ids[s] = i as u32;
            packed[s * m..(s + 1) * m].copy_from_slice(codes.get(i));
        }
        let mut index = Self {
            dim,
            nlist,
            m,
            centroids,
            offsets,
            ids,
            codes: packed,
            slot: Vec::new(),
            list_of: Vec::new(),
        };
        index.derive_lookups()?;
        Ok(index)
    }

    fn derive_lookups(&mut self) -> Result<()> {
        let n = self.ids.len();
        let mut slot = vec![u32::MAX; n];
        let mut list_of = vec![0u32; n];
        for l in 0..self.nlist {
            let (a, b) = (self.offsets[l] as usize, self.offsets[l + 1] as usize);
            for s in a..b {
                let id = self.ids[s] as usize;
                if id >= n || slot[id] != u32::MAX {
                    return Err(Error::Corrupt(format!(
                        "record id {id} is out of range or listed twice"
                    )));
                }
                slot[id] = s as u32;
                list_of[id] = l as u32;
            }
        }
        self.slot = slot;
        self.list_of = list_of;
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn nlist(&self) -> usize {
        self.nlist
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn centroid(&self, l: usize) -> &[f32] {
        &self.centroids[l * self.dim..(l + 1) * self.dim]
    }

    /// Record ids in list `l`, ascending.
    pub fn list(&self, l: usize) -> &[u32] {
        &self.ids[self.offsets[l] as usize..self.offsets[l + 1] as usize]
    }

    pub fn list_of(&self, id: u32) -> usize {
        self.list_of[id as usize] as usize
    }

    /// PQ code of record `id`.
    pub fn code(&self, id: u32) -> &[u8] {
        let s = self.slot[id as usize] as usize;
        &self.codes[s * self.m..(s + 1) * self.m]
    }

    /// All PQ codes in record-id order.
    pub fn codes_by_id(&self) -> PqCodes {
        let mut data = Vec::with_capacity(self.codes.len());
        for id in 0..self.len() as u32 {
            data.extend_from_slice(self.code(id));
        }
        PqCodes::new(self.m, data).expect("m > 0")
    }

    /// The `nprobe` lists closest to `q`; ties go to the lower list id.
    pub fn probe_order(&self, q: &[f32], nprobe: usize) -> Vec<usize> {
        let mut d: Vec<(f32, usize)> = self
            .centroids
            .chunks_exact(self.dim)
            .map(|c| l2_sq_fast(q, c))
            .zip(0..)
            .collect();
        d.sort_unstable_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        d.truncate(nprobe);
        d.into_iter().map(|(_, l)| l).collect()
    }

    /// Scores the members of the `nprobe` nearest lists by `d̂₀` and keeps the
    /// best `budget`, sorted by `(d̂₀, id)`.
    pub fn search_coarse(
        &self,
        ctx: &QueryContext,
        nprobe: usize,
        budget: usize,
    ) -> Result<CandidateList> {
        check_dim(self.dim, ctx.query().len())?;
        if nprobe == 0 || nprobe > self.nlist {
            return Err(invalid(format!(
                "nprobe must be in 1..={}, got {nprobe}",
                self.nlist
            )));
        }
        if budget == 0 {
            return Err(invalid("candidate budget must be at least 1"));
        }
        if ctx.adc().m() != self.m {
            return Err(invalid("query context was built with a different codebook"));
        }
        let mut entries = Vec::new();
        for l in self.probe_order(ctx.query(), nprobe) {
            let (a, b) = (self.offsets[l] as usize, self.offsets[l + 1] as usize);
            for s in a..b {
                let code = &self.codes[s * self.m..(s + 1) * self.m];
                entries.push(Candidate { id: self.ids[s], d0: ctx.adc().distance(code) });
            }
        }
        let cmp = |a: &Candidate, b: &Candidate| a.d0.total_cmp(&b.d0).then(a.id.cmp(&b.id));
        if budget < entries.len() {
            entries.select_nth_unstable_by(budget - 1, cmp);
            entries.truncate(budget);
        }
        entries.sort_unstable_by(cmp);
        Ok(CandidateList { entries, nprobe_used: nprobe })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        put_u32(&mut out, VERSION);
        put_u32(&mut out, self.dim as u32);
        put_u32(&mut out, self.nlist as u32);
        put_u32(&mut out, self.m as u32);
        put_u64(&mut out, self.ids.len() as u64);
        put_f32s(&mut out, &self.centroids);
        for &o in &self.offsets {
            put_u64(&mut out, o);
        }
        for &id in &self.ids {
            put_u32(&mut out, id);
        }
        out.extend_from_slice(&self.codes);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes, "ivf index");
        r.magic(MAGIC, VERSION)?;
        let dim = r.u32()? as usize;
        let nlist = r.u32()? as usize;
        let m = r.u32()? as usize;
        let count = r.u64()?;
        if dim == 0 || nlist == 0 || m == 0 {
            return Err(Error::Corrupt("ivf index: zero dim, nlist or m".into()));
        }
        let centroid_count = r.check_len(nlist as u64 * dim as u64, 4)?;
        let centroids = r.f32s(centroid_count)?;
        if !all_finite(&centroids) {
            return Err(Error::Corrupt("ivf index: non-finite centroid".into()));
        }
        let offsets = r.u64s(r.check_len(nlist as u64 + 1, 8)?)?;
        let count = r.check_len(count, 4)?;
        if offsets[0] != 0
            || offsets.windows(2).any(|w| w[0] > w[1])
            || offsets[nlist] != count as u64
        {
            return Err(Error::Corrupt("ivf index: inconsistent list offsets".into()));
        }
        let ids = r.u32s(count)?;
        let codes = r.take(r.check_len(count as u64, m)? * m)?.to_vec();
        r.finish()?;
        let mut index = Self {
            dim,
            nlist,
            m,
            centroids,
            offsets,
            ids,
            codes,
            slot: Vec::new(),
            list_of: Vec::new(),
        };
        index.derive_lookups()?;
        Ok(index)
    }

    /// Checks that stored codes are valid for `cb`.
    pub fn check_codebook(&self, cb: &PqCodebook) -> Result<()> {
        check_dim(self.dim, cb.dim())?;
        if self.m != cb.m() {
            return Err(invalid("index and codebook disagree on m"));
        }
        let ksub = cb.ksub();
        if self.codes.par_iter().any(|&c| c as usize >= ksub) {
            return Err(Error::Corrupt("index holds codes outside the codebook".into()));
        }
        Ok(())
    }
}
