//! Blocked dot-product kernel.
//!
//! Every (query, gallery) pair is reduced with the same fixed sequence of
//! operations no matter how the work is tiled or split across threads:
//! eight f32 lane accumulators updated with fused multiply-add over the
//! dimension in steps of eight, a fixed pairwise lane reduction, then the tail
//! components folded in sequentially. Both backends follow that sequence, so
//! their results are bit-identical.

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::ops::Range;

use rayon::prelude::*;

const LANES: usize = 8;

/// Tiling parameters. Results never depend on them.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockSizes {
    pub query_block: usize,
    pub gallery_block: usize,
}

impl Default for BlockSizes {
    fn default() -> Self {
        Self {
            query_block: 64,
            gallery_block: 32,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Backend {
    Portable,
    #[cfg(target_arch = "x86_64")]
    Avx2Fma,
}

impl Backend {
    pub fn detect() -> Self {
        #[cfg(target_arch = "x86_64")]
        {
            if std::is_x86_feature_detected!("avx2") && std::is_x86_feature_detected!("fma") {
                return Backend::Avx2Fma;
            }
        }
        Backend::Portable
    }
}

#[inline(always)]
fn reduce_lanes(a: [f32; LANES]) -> f32 {
    let s0 = a[0] + a[4];
    let s1 = a[1] + a[5];
    let s2 = a[2] + a[6];
    let s3 = a[3] + a[7];
    (s0 + s2) + (s1 + s3)
}

#[inline(always)]
fn fold_tail(mut acc: f32, q: &[f32], g: &[f32]) -> f32 {
    let start = q.len() / LANES * LANES;
    for (a, b) in q[start..].iter().zip(&g[start..]) {
        acc = a.mul_add(*b, acc);
    }
    acc
}

pub(crate) fn dot_portable(q: &[f32], g: &[f32]) -> f32 {
    debug_assert_eq!(q.len(), g.len());
    let mut acc = [0.0f32; LANES];
    for (qc, gc) in q.chunks_exact(LANES).zip(g.chunks_exact(LANES)) {
        for l in 0..LANES {
            acc[l] = qc[l].mul_add(gc[l], acc[l]);
        }
    }
    fold_tail(reduce_lanes(acc), q, g)
}

#[cfg(target_arch = "x86_64")]
mod avx {
    use std::arch::x86_64::*;

    use super::{fold_tail, LANES};

    #[inline(always)]
    unsafe fn hsum(v: __m256) -> f32 {
        let lo = _mm256_castps256_ps128(v);
        let hi = _mm256_extractf128_ps(v, 1);
        let s = _mm_add_ps(lo, hi);
        let t = _mm_add_ps(s, _mm_movehl_ps(s, s));
        _mm_cvtss_f32(_mm_add_ss(t, _mm_shuffle_ps(t, t, 1)))
    }

    #[target_feature(enable = "avx2,fma")]
    pub(super) unsafe fn dot(q: &[f32], g: &[f32]) -> f32 {
        let chunks = q.len() / LANES;
        let (qp, gp) = (q.as_ptr(), g.as_ptr());
        let mut acc = _mm256_setzero_ps();
        for c in 0..chunks {
            let o = c * LANES;
            acc = _mm256_fmadd_ps(_mm256_loadu_ps(qp.add(o)), _mm256_loadu_ps(gp.add(o)), acc);
        }
        fold_tail(hsum(acc), q, g)
    }

    /// Scores two queries against four gallery rows.
    #[target_feature(enable = "avx2,fma")]
    pub(super) unsafe fn tile_2x4(q: [&[f32]; 2], g: [&[f32]; 4]) -> [[f32; 4]; 2] {
        let d = q[0].len();
        let chunks = d / LANES;
        let (q0, q1) = (q[0].as_ptr(), q[1].as_ptr());
        let (g0, g1, g2, g3) = (g[0].as_ptr(), g[1].as_ptr(), g[2].as_ptr(), g[3].as_ptr());
        let mut a00 = _mm256_setzero_ps();
        let mut a01 = _mm256_setzero_ps();
        let mut a02 = _mm256_setzero_ps();
        let mut a03 = _mm256_setzero_ps();
        let mut a10 = _mm256_setzero_ps();
        let mut a11 = _mm256_setzero_ps();
        let mut a12 = _mm256_setzero_ps();
        let mut a13 = _mm256_setzero_ps();
        for c in 0..chunks {
            let o = c * LANES;
            let x0 = _mm256_loadu_ps(q0.add(o));
            let x1 = _mm256_loadu_ps(q1.add(o));
            let y = _mm256_loadu_ps(g0.add(o));
            a00 = _mm256_fmadd_ps(x0, y, a00);
            a10 = _mm256_fmadd_ps(x1, y, a10);
            let y = _mm256_loadu_ps(g1.add(o));
            a01 = _mm256_fmadd_ps(x0, y, a01);
            a11 = _mm256_fmadd_ps(x1, y, a11);
            let y = _mm256_loadu_ps(g2.add(o));
            a02 = _mm256_fmadd_ps(x0, y, a02);
            a12 = _mm256_fmadd_ps(x1, y, a12);
            let y = _mm256_loadu_ps(g3.add(o));
            a03 = _mm256_fmadd_ps(x0, y, a03);
            a13 = _mm256_fmadd_ps(x1, y, a13);
        }
        let acc = [[a00, a01, a02, a03], [a10, a11, a12, a13]];
        let mut out = [[0.0f32; 4]; 2];
        for i in 0..2 {
            for j in 0..4 {
                out[i][j] = fold_tail(hsum(acc[i][j]), q[i], g[j]);
            }
        }
        out
    }
}

/// Dense row-major scoring of `queries` (n_q x dim) against `gallery` (n_g x dim).
#[derive(Debug, Clone, Copy)]
pub struct Kernel {
    pub backend: Backend,
    pub blocks: BlockSizes,
}

impl Default for Kernel {
    fn default() -> Self {
        Self {
            backend: Backend::detect(),
            blocks: BlockSizes::default(),
        }
    }
}

impl Kernel {
    pub fn with_blocks(blocks: BlockSizes) -> Self {
        assert!(blocks.query_block >= 1 && blocks.gallery_block >= 1);
        Self {
            backend: Backend::detect(),
            blocks,
        }
    }

    pub fn portable(blocks: BlockSizes) -> Self {
        Self {
            backend: Backend::Portable,
            blocks,
        }
    }

    #[inline]
    pub fn dot(&self, q: &[f32], g: &[f32]) -> f32 {
        assert_eq!(q.len(), g.len());
        match self.backend {
            Backend::Portable => dot_portable(q, g),
            #[cfg(target_arch = "x86_64")]
            // SAFETY: the backend is only selected when avx2 and fma are present
            Backend::Avx2Fma => unsafe { avx::dot(q, g) },
        }
    }

    #[inline]
    fn tile(&self, q: [&[f32]; 2], g: [&[f32]; 4]) -> [[f32; 4]; 2] {
        match self.backend {
            #[cfg(target_arch = "x86_64")]
            // SAFETY: as above; all slices share one length
            Backend::Avx2Fma => unsafe { avx::tile_2x4(q, g) },
            Backend::Portable => {
                let mut out = [[0.0; 4]; 2];
                for i in 0..2 {
                    for j in 0..4 {
                        out[i][j] = dot_portable(q[i], g[j]);
                    }
                }
                out
            }
        }
    }

    /// Fills `out` (`qr.len()` rows of `gr.len()` scores) for one block pair.
    fn score_block(
        &self,
        queries: &[f32],
        qr: Range<usize>,
        gallery: &[f32],
        gr: Range<usize>,
        dim: usize,
        out: &mut [f32],
    ) {
        let width = gr.len();
        debug_assert_eq!(out.len(), qr.len() * width);
        let qrow = |i: usize| &queries[i * dim..(i + 1) * dim];
        let grow = |j: usize| &gallery[j * dim..(j + 1) * dim];
        let mut gstart = gr.start;
        while gstart < gr.end {
            let gend = (gstart + self.blocks.gallery_block).min(gr.end);
            let mut qi = qr.start;
            while qi < qr.end {
                let pair = qi + 1 < qr.end;
                let mut gj = gstart;
                while gj < gend {
                    if pair && gj + 4 <= gend {
                        let t = self.tile(
                            [qrow(qi), qrow(qi + 1)],
                            [grow(gj), grow(gj + 1), grow(gj + 2), grow(gj + 3)],
                        );
                        for (r, row) in t.iter().enumerate() {
                            let base = (qi + r - qr.start) * width + (gj - gr.start);
                            out[base..base + 4].copy_from_slice(row);
                        }
                        gj += 4;
                    } else {
                        let rows = if pair { 2 } else { 1 };
                        for r in 0..rows {
                            out[(qi + r - qr.start) * width + (gj - gr.start)] =
                                self.dot(qrow(qi + r), grow(gj));
                        }
                        gj += 1;
                    }
                }
                qi += if pair { 2 } else { 1 };
            }
            gstart = gend;
        }
    }

    fn plan(&self, n_q: usize, n_g: usize) -> (Vec<Range<usize>>, Vec<Range<usize>>) {
        let qb = self.blocks.query_block;
        let q_blocks: Vec<_> = (0..n_q.div_ceil(qb))
            .map(|b| b * qb..((b + 1) * qb).min(n_q))
            .collect();
        // split the gallery so there are enough tasks to keep every thread busy
        let want = 4 * rayon::current_num_threads();
        let shards = want.div_ceil(q_blocks.len().max(1)).max(1);
        let min_shard = self.blocks.gallery_block.max(256);
        let shard_len = n_g.div_ceil(shards).max(min_shard).max(1);
        let g_shards = (0..n_g.div_ceil(shard_len))
            .map(|s| s * shard_len..((s + 1) * shard_len).min(n_g))
            .collect();
        (q_blocks, g_shards)
    }

    /// Full score matrix, row-major `n_q x n_g`.
    pub fn score_matrix(&self, queries: &[f32], gallery: &[f32], dim: usize) -> Vec<f32> {
        assert!(dim >= 1);
        assert_eq!(queries.len() % dim, 0);
        assert_eq!(gallery.len() % dim, 0);
        let (n_q, n_g) = (queries.len() / dim, gallery.len() / dim);
        let (q_blocks, g_shards) = self.plan(n_q, n_g);
        let tasks: Vec<(Range<usize>, Range<usize>)> = q_blocks
            .iter()
            .flat_map(|q| g_shards.iter().map(move |g| (q.clone(), g.clone())))
            .collect();
        let tiles: Vec<Vec<f32>> = tasks
            .par_iter()
            .map(|(qr, gr)| {
                let mut buf = vec![0.0f32; qr.len() * gr.len()];
                self.score_block(queries, qr.clone(), gallery, gr.clone(), dim, &mut buf);
                buf
            })
            .collect();
        let mut out = vec![0.0f32; n_q * n_g];
        for ((qr, gr), tile) in tasks.iter().zip(tiles) {
            for (r, row) in tile.chunks_exact(gr.len().max(1)).enumerate() {
                let base = (qr.start + r) * n_g + gr.start;
                out[base..base + gr.len()].copy_from_slice(row);
            }
        }
        out
    }

    /// Exact top-`k` gallery indices per query, best first, ties broken by
    /// ascending gallery index.
    pub fn top_k(
        &self,
        queries: &[f32],
        gallery: &[f32],
        dim: usize,
        k: usize,
    ) -> Vec<Vec<(usize, f32)>> {
        assert!(dim >= 1 && k >= 1);
        let (n_q, n_g) = (queries.len() / dim, gallery.len() / dim);
        let (q_blocks, g_shards) = self.plan(n_q, n_g);
        let tasks: Vec<(Range<usize>, Range<usize>)> = q_blocks
            .iter()
            .flat_map(|q| g_shards.iter().map(move |g| (q.clone(), g.clone())))
            .collect();
        let gb = self.blocks.gallery_block;
        let partial: Vec<Vec<Vec<Candidate>>> = tasks
            .par_iter()
            .map(|(qr, gr)| {
                let mut heaps: Vec<BinaryHeap<Candidate>> = (0..qr.len())
                    .map(|_| BinaryHeap::with_capacity(k + 1))
                    .collect();
                let mut buf = vec![0.0f32; qr.len() * gb];
                let mut g0 = gr.start;
                while g0 < gr.end {
                    let g1 = (g0 + gb).min(gr.end);
                    let w = g1 - g0;
                    let buf = &mut buf[..qr.len() * w];
                    self.score_block(queries, qr.clone(), gallery, g0..g1, dim, buf);
                    for (heap, row) in heaps.iter_mut().zip(buf.chunks_exact(w)) {
                        for (j, &s) in row.iter().enumerate() {
                            offer(heap, k, Candidate::new(s, g0 + j));
                        }
                    }
                    g0 = g1;
                }
                heaps.into_iter().map(BinaryHeap::into_vec).collect()
            })
            .collect();

        let mut merged: Vec<Vec<Candidate>> = vec![Vec::new(); n_q];
        for ((qr, _), lists) in tasks.iter().zip(partial) {
            for (r, list) in lists.into_iter().enumerate() {
                merged[qr.start + r].extend(list);
            }
        }
        merged
            .into_par_iter()
            .map(|mut c| {
                c.sort_unstable();
                c.truncate(k);
                c.into_iter().map(|c| (c.index, c.score)).collect()
            })
            .collect()
    }
}

/// Ordered so that `a < b` iff `a` ranks ahead of `b`.
#[derive(Debug, Clone, Copy)]
struct Candidate {
    score: f32,
    index: usize,
}

impl Candidate {
    fn new(score: f32, index: usize) -> Self {
        // folds -0.0 into +0.0 so that equal scores tie
        Self {
            score: score + 0.0,
            index,
        }
    }
}

impl PartialEq for Candidate {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Candidate {}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Candidate {
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .score
            .total_cmp(&self.score)
            .then(self.index.cmp(&other.index))
    }
}

/// Keeps the `k` best candidates; the heap top is the current worst.
#[inline]
fn offer(heap: &mut BinaryHeap<Candidate>, k: usize, c: Candidate) {
    if heap.len() < k {
        heap.push(c);
    } else if let Some(mut worst) = heap.peek_mut() {
        if c < *worst {
            *worst = c;
        }
    }
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn random(n: usize, seed: u64) -> Vec<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| rng.random_range(-1.0f32..1.0)).collect()
    }

    fn naive(q: &[f32], g: &[f32]) -> f64 {
        q.iter()
            .zip(g)
            .map(|(a, b)| f64::from(*a) * f64::from(*b))
            .sum()
    }

    #[test]
    fn backends_agree_bitwise() {
        for dim in [1, 3, 8, 13, 64, 77] {
            let q = random(5 * dim, 1);
            let g = random(11 * dim, 2);
            let a = Kernel::portable(BlockSizes::default()).score_matrix(&q, &g, dim);
            let b = Kernel::default().score_matrix(&q, &g, dim);
            assert!(
                a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()),
                "dim {dim}"
            );
        }
    }

    #[test]
    fn block_sizes_do_not_change_bits() {
        let dim = 37;
        let q = random(9 * dim, 3);
        let g = random(101 * dim, 4);
        let reference = Kernel::default().score_matrix(&q, &g, dim);
        for (qb, gb) in [(1, 1), (2, 3), (3, 4), (7, 64), (64, 5)] {
            let k = Kernel::with_blocks(BlockSizes {
                query_block: qb,
                gallery_block: gb,
            });
            let m = k.score_matrix(&q, &g, dim);
            assert!(m
                .iter()
                .zip(&reference)
                .all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }

    #[test]
    fn matches_naive_dot() {
        let dim = 64;
        let q = random(4 * dim, 5);
        let g = random(200 * dim, 6);
        let m = Kernel::default().score_matrix(&q, &g, dim);
        for i in 0..4 {
            for j in 0..200 {
                let want = naive(&q[i * dim..(i + 1) * dim], &g[j * dim..(j + 1) * dim]);
                assert!((f64::from(m[i * 200 + j]) - want).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn top_k_matches_full_sort() {
        let dim = 16;
        let q = random(7 * dim, 7);
        let mut g = random(1000 * dim, 8);
        // plant exact duplicates to exercise the tie-break
        let row = g[..dim].to_vec();
        g[500 * dim..501 * dim].copy_from_slice(&row);
        g[900 * dim..901 * dim].copy_from_slice(&row);
        let kern = Kernel::with_blocks(BlockSizes {
            query_block: 3,
            gallery_block: 16,
        });
        let full = kern.score_matrix(&q, &g, dim);
        let top = kern.top_k(&q, &g, dim, 25);
        for (i, got) in top.iter().enumerate() {
            let mut all: Vec<(usize, f32)> = full[i * 1000..(i + 1) * 1000]
                .iter()
                .copied()
                .enumerate()
                .collect();
            all.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
            assert_eq!(got, &all[..25].to_vec());
        }
    }

    #[test]
    fn k_larger_than_gallery() {
        let q = vec![1.0, 0.0];
        let g = vec![0.5, 0.0, 1.0, 0.0, 0.5, 0.0];
        let top = Kernel::default().top_k(&q, &g, 2, 10);
        assert_eq!(top[0], vec![(1, 1.0), (0, 0.5), (2, 0.5)]);
    }

    #[test]
    fn random_dims_match_portable() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..20 {
            let dim = rng.random_range(1..100);
            let a = random(dim, rng.random());
            let b = random(dim, rng.random());
            assert_eq!(
                Kernel::default().dot(&a, &b).to_bits(),
                dot_portable(&a, &b).to_bits()
            );
        }
    }
}
