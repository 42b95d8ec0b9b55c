//! Blocked inner-product scan with running per-query top-k.
//!
//! The index is repacked once into f64 blocks of [`LANES`] vectors stored
//! dimension-major (`block[d][lane]`), so one pass over `d` produces
//! `tile x LANES` scores at a time. Every score is accumulated as
//! `((0 + q0*x0) + q1*x1) + ...` in dimension order, which is exactly the
//! naive loop's arithmetic: f32 x f32 products are exact in f64, and no
//! reassociation or contraction is performed, so results are bitwise equal
//! to a scalar scan regardless of SIMD width or thread count.
//!
//! Work is split into query batches (parallel) and, within a batch, index
//! chunks small enough to stay cache resident while every query tile of the
//! batch is scored against them.

use std::cmp::Ordering;

use rayon::prelude::*;

use super::{EmbeddingStore, Neighbor};

pub(crate) const LANES: usize = 8;
/// Index blocks per cache chunk (512 vectors, 256 KiB at dim 64).
const CHUNK_BLOCKS: usize = 64;
/// Queries per parallel task.
const QUERY_BATCH: usize = 64;

pub(crate) struct PackedIndex<'a> {
    dim: usize,
    len: usize,
    ids: &'a [u64],
    data: Vec<f64>,
}

impl<'a> PackedIndex<'a> {
    pub(crate) fn new(store: &'a EmbeddingStore) -> Self {
        let dim = store.dim();
        let len = store.len();
        let blocks = len.div_ceil(LANES);
        let mut data = vec![0.0f64; blocks * dim * LANES];
        for (row, v) in store.vectors().chunks_exact(dim).enumerate() {
            let (b, lane) = (row / LANES, row % LANES);
            let base = b * dim * LANES;
            for (d, &x) in v.iter().enumerate() {
                data[base + d * LANES + lane] = x as f64;
            }
        }
        Self {
            dim,
            len,
            ids: store.ids(),
            data,
        }
    }

    fn blocks(&self) -> usize {
        self.len.div_ceil(LANES)
    }

    fn block(&self, b: usize) -> &[f64] {
        let stride = self.dim * LANES;
        &self.data[b * stride..(b + 1) * stride]
    }
}

/// Descending similarity, then ascending id.
#[inline]
pub(crate) fn ranks_before(a: &Neighbor, b: &Neighbor) -> bool {
    match a.similarity.total_cmp(&b.similarity) {
        Ordering::Greater => true,
        Ordering::Less => false,
        Ordering::Equal => a.id < b.id,
    }
}

/// Sorted list of the best `k` candidates seen so far.
pub(crate) struct TopK {
    k: usize,
    exclude: Option<u64>,
    items: Vec<Neighbor>,
    /// Similarity a candidate must reach to be considered at all.
    floor: f64,
}

impl TopK {
    pub(crate) fn new(k: usize, exclude: Option<u64>) -> Self {
        Self {
            k,
            exclude,
            items: Vec::with_capacity(k + 1),
            floor: f64::NEG_INFINITY,
        }
    }

    #[inline]
    fn floor(&self) -> f64 {
        self.floor
    }

    #[cold]
    fn offer(&mut self, cand: Neighbor) {
        if self.exclude == Some(cand.id) {
            return;
        }
        if self.items.len() == self.k {
            if !ranks_before(&cand, self.items.last().unwrap()) {
                return;
            }
            self.items.pop();
        }
        let pos = self.items.partition_point(|x| ranks_before(x, &cand));
        self.items.insert(pos, cand);
        if self.items.len() == self.k {
            self.floor = self.items.last().unwrap().similarity;
        }
    }

    pub(crate) fn into_sorted(self) -> Vec<Neighbor> {
        self.items
    }
}

#[inline(always)]
fn tile_scores<const QT: usize>(queries: &[f64], block: &[f64], dim: usize) -> [[f64; LANES]; QT] {
    let mut acc = [[0.0f64; LANES]; QT];
    for d in 0..dim {
        let x: &[f64; LANES] = block[d * LANES..(d + 1) * LANES].try_into().unwrap();
        for (qi, row) in acc.iter_mut().enumerate() {
            let q = queries[qi * dim + d];
            for l in 0..LANES {
                row[l] += q * x[l];
            }
        }
    }
    acc
}

/// Scores `tiles` (each `QT` queries, padded) against index blocks
/// `[first, last)` and feeds candidates to the matching heaps.
#[inline(always)]
fn scan_chunk<const QT: usize>(
    index: &PackedIndex<'_>,
    queries: &[f64],
    valid_queries: usize,
    heaps: &mut [TopK],
    first: usize,
    last: usize,
) {
    let dim = index.dim;
    let tiles = queries.len() / (QT * dim);
    for t in 0..tiles {
        let q = &queries[t * QT * dim..(t + 1) * QT * dim];
        let live = (valid_queries - t * QT).min(QT);
        for b in first..last {
            let scores = tile_scores::<QT>(q, index.block(b), dim);
            for (qi, row) in scores.iter().enumerate().take(live) {
                let heap = &mut heaps[t * QT + qi];
                let floor = heap.floor();
                for (lane, &s) in row.iter().enumerate() {
                    if s >= floor {
                        let pos = b * LANES + lane;
                        if pos < index.len {
                            heap.offer(Neighbor {
                                id: index.ids[pos],
                                similarity: s,
                            });
                        }
                    }
                }
            }
        }
    }
}

#[inline(always)]
fn scan_batch<const QT: usize>(
    index: &PackedIndex<'_>,
    queries: &[f64],
    valid: usize,
    heaps: &mut [TopK],
) {
    let blocks = index.blocks();
    let mut first = 0;
    while first < blocks {
        let last = (first + CHUNK_BLOCKS).min(blocks);
        scan_chunk::<QT>(index, queries, valid, heaps, first, last);
        first = last;
    }
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx512f")]
unsafe fn scan_batch_avx512(
    index: &PackedIndex<'_>,
    queries: &[f64],
    valid: usize,
    heaps: &mut [TopK],
) {
    scan_batch::<8>(index, queries, valid, heaps)
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn scan_batch_avx2(
    index: &PackedIndex<'_>,
    queries: &[f64],
    valid: usize,
    heaps: &mut [TopK],
) {
    scan_batch::<4>(index, queries, valid, heaps)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Isa {
    Scalar,
    #[cfg(target_arch = "x86_64")]
    Avx2,
    #[cfg(target_arch = "x86_64")]
    Avx512,
}

pub(crate) fn detect_isa() -> Isa {
    #[cfg(target_arch = "x86_64")]
    {
        if std::is_x86_feature_detected!("avx512f") {
            return Isa::Avx512;
        }
        if std::is_x86_feature_detected!("avx2") {
            return Isa::Avx2;
        }
    }
    Isa::Scalar
}

fn tile_height(isa: Isa) -> usize {
    match isa {
        Isa::Scalar => 4,
        #[cfg(target_arch = "x86_64")]
        Isa::Avx2 => 4,
        #[cfg(target_arch = "x86_64")]
        Isa::Avx512 => 8,
    }
}

fn run_batch(isa: Isa, index: &PackedIndex<'_>, queries: &[f64], valid: usize, heaps: &mut [TopK]) {
    match isa {
        Isa::Scalar => scan_batch::<4>(index, queries, valid, heaps),
        // SAFETY: the variant is only selected after runtime feature detection.
        #[cfg(target_arch = "x86_64")]
        Isa::Avx2 => unsafe { scan_batch_avx2(index, queries, valid, heaps) },
        #[cfg(target_arch = "x86_64")]
        Isa::Avx512 => unsafe { scan_batch_avx512(index, queries, valid, heaps) },
    }
}

/// Top-k for every query row; must run inside the intended rayon pool.
pub(crate) fn search(
    index: &EmbeddingStore,
    queries: &EmbeddingStore,
    k: usize,
    exclude_self: bool,
    isa: Isa,
) -> Vec<Vec<Neighbor>> {
    let packed = PackedIndex::new(index);
    let dim = index.dim();
    let qt = tile_height(isa);
    let rows: Vec<usize> = (0..queries.len()).collect();
    rows.par_chunks(QUERY_BATCH)
        .flat_map_iter(|batch| {
            let padded = batch.len().div_ceil(qt) * qt;
            let mut qbuf = vec![0.0f64; padded * dim];
            for (slot, &row) in batch.iter().enumerate() {
                for (d, &x) in queries.vector(row).iter().enumerate() {
                    qbuf[slot * dim + d] = x as f64;
                }
            }
            let mut heaps: Vec<TopK> = batch
                .iter()
                .map(|&row| TopK::new(k, exclude_self.then(|| queries.ids()[row])))
                .collect();
            run_batch(isa, &packed, &qbuf, batch.len(), &mut heaps);
            heaps.into_iter().map(TopK::into_sorted)
        })
        .collect()
}
