//! Per-query similarity vectors, the balance metric, and exact top-K ranking.
//!
//! The balance metric combines text-side similarity `S_t` with proxy-side
//! similarity `S_p`:
//!
//! ```text
//! S_b = S_t * S_p
//! S_f = lambda * S_t + (1 - lambda) * S_b
//! ```
//!
//! By default both inputs are min-max normalized per query first, so the
//! product is taken between scores in [0, 1].

use std::cmp::Ordering;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernel::Kernel;
use crate::store::{read_f32s, write_f32s, Embedding, EmbeddingSet};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreKind {
    Text,
    Proxy,
    Balanced,
    Final,
}

/// Scores of one query over the whole gallery.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityVector {
    pub query_id: String,
    pub kind: ScoreKind,
    pub scores: Vec<f64>,
}

impl SimilarityVector {
    pub fn new(query_id: impl Into<String>, kind: ScoreKind, scores: Vec<f64>) -> Result<Self> {
        if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
            return Err(Error::Data(format!("score {i} is not finite")));
        }
        Ok(Self {
            query_id: query_id.into(),
            kind,
            scores,
        })
    }

    pub(crate) fn from_f32(query_id: impl Into<String>, kind: ScoreKind, scores: &[f32]) -> Self {
        Self {
            query_id: query_id.into(),
            kind,
            scores: scores.iter().map(|&s| f64::from(s)).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    #[default]
    MinmaxPerQuery,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BalanceParams {
    pub lambda: f64,
    #[serde(default)]
    pub normalization: Normalization,
}

impl BalanceParams {
    pub fn new(lambda: f64, normalization: Normalization) -> Result<Self> {
        if !(0.0..=1.0).contains(&lambda) {
            return Err(Error::Config(format!(
                "lambda must lie in [0, 1], got {lambda}"
            )));
        }
        Ok(Self {
            lambda,
            normalization,
        })
    }
}

/// Cosine similarity of `query` against every (pre-normalized) gallery row.
pub fn cosine_scores(query: &Embedding, gallery: &EmbeddingSet) -> Result<Vec<f32>> {
    cosine_scores_with(&Kernel::default(), query, gallery)
}

pub fn cosine_scores_with(
    kernel: &Kernel,
    query: &Embedding,
    gallery: &EmbeddingSet,
) -> Result<Vec<f32>> {
    if query.dim() != gallery.dim() {
        return Err(Error::Shape(format!(
            "query dim {} does not match gallery dim {}",
            query.dim(),
            gallery.dim()
        )));
    }
    let q = query.normalized();
    Ok(kernel.score_matrix(q.values(), gallery.matrix(), gallery.dim()))
}

/// As [`cosine_scores`], wrapped as a similarity vector of the given kind.
pub fn cosine_similarity(
    query_id: &str,
    kind: ScoreKind,
    query: &Embedding,
    gallery: &EmbeddingSet,
) -> Result<SimilarityVector> {
    Ok(SimilarityVector::from_f32(
        query_id,
        kind,
        &cosine_scores(query, gallery)?,
    ))
}

/// Affine map of the scores onto [0, 1]. A constant vector maps to 0.5.
pub fn minmax_normalize(s: &SimilarityVector) -> SimilarityVector {
    SimilarityVector {
        query_id: s.query_id.clone(),
        kind: s.kind,
        scores: minmax(&s.scores),
    }
}

pub(crate) fn minmax(scores: &[f64]) -> Vec<f64> {
    let (lo, hi) = scores
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &s| {
            (lo.min(s), hi.max(s))
        });
    if !(hi > lo) {
        return vec![0.5; scores.len()];
    }
    let range = hi - lo;
    scores.iter().map(|&s| (s - lo) / range).collect()
}

fn check_lengths(a: &SimilarityVector, b: &SimilarityVector) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!(
            "similarity vectors of lengths {} and {}",
            a.len(),
            b.len()
        )));
    }
    Ok(())
}

fn normalized(s: &SimilarityVector, n: Normalization) -> Vec<f64> {
    match n {
        Normalization::MinmaxPerQuery => minmax(&s.scores),
        Normalization::None => s.scores.clone(),
    }
}

/// `S_b = S_t * S_p` after the requested normalization.
pub fn balanced_similarity(
    text: &SimilarityVector,
    proxy: &SimilarityVector,
    normalization: Normalization,
) -> Result<SimilarityVector> {
    check_lengths(text, proxy)?;
    let t = normalized(text, normalization);
    let p = normalized(proxy, normalization);
    Ok(SimilarityVector {
        query_id: text.query_id.clone(),
        kind: ScoreKind::Balanced,
        scores: t.iter().zip(&p).map(|(t, p)| t * p).collect(),
    })
}

/// Final scores `S_f = lambda * S_t + (1 - lambda) * S_t * S_p`.
///
/// Both inputs are raw scores; `p.normalization` is applied here.
pub fn balance(
    text: &SimilarityVector,
    proxy: &SimilarityVector,
    p: &BalanceParams,
) -> Result<SimilarityVector> {
    check_lengths(text, proxy)?;
    let t = normalized(text, p.normalization);
    let s = normalized(proxy, p.normalization);
    Ok(SimilarityVector {
        query_id: text.query_id.clone(),
        kind: ScoreKind::Final,
        scores: combine(&t, &s, p.lambda),
    })
}

pub(crate) fn combine(text: &[f64], proxy: &[f64], lambda: f64) -> Vec<f64> {
    let rest = 1.0 - lambda;
    text.iter()
        .zip(proxy)
        .map(|(&t, &p)| lambda * t + rest * (t * p))
        .collect()
}

/// Smallest-interval estimate of the `lambda` at which two candidates with
/// (text, proxy) scores `a` and `b` receive equal final scores, found by
/// bisection on the engine's own [`balance`]. `None` when the order of the
/// two candidates is the same at both ends of [0, 1].
pub fn lambda_crossover(a: (f64, f64), b: (f64, f64)) -> Result<Option<f64>> {
    let text = SimilarityVector::new("crossover", ScoreKind::Text, vec![a.0, b.0])?;
    let proxy = SimilarityVector::new("crossover", ScoreKind::Proxy, vec![a.1, b.1])?;
    let gap = |lambda: f64| -> Result<f64> {
        let f = balance(
            &text,
            &proxy,
            &BalanceParams::new(lambda, Normalization::None)?,
        )?;
        Ok(f.scores[0] - f.scores[1])
    };
    let (mut lo, mut hi) = (0.0f64, 1.0f64);
    let (g_lo, g_hi) = (gap(lo)?, gap(hi)?);
    if g_lo == 0.0 {
        return Ok(Some(lo));
    }
    if g_hi == 0.0 {
        return Ok(Some(hi));
    }
    if g_lo.signum() == g_hi.signum() {
        return Ok(None);
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        let g = gap(mid)?;
        if g == 0.0 {
            return Ok(Some(mid));
        }
        if g.signum() == g_lo.signum() {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(Some(0.5 * (lo + hi)))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RankedEntry {
    pub index: usize,
    pub score: f64,
}

/// Best-first gallery ranking for one query.
#[derive(Debug, Clone, PartialEq)]
pub struct RankedList {
    pub query_id: String,
    pub entries: Vec<RankedEntry>,
}

impl RankedList {
    pub fn indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.entries.iter().map(|e| e.index)
    }

    pub fn ids<'a>(&'a self, gallery_ids: &'a [String]) -> impl Iterator<Item = &'a str> + 'a {
        self.entries
            .iter()
            .map(move |e| gallery_ids[e.index].as_str())
    }
}

/// Descending score, then ascending index.
pub(crate) fn rank_order(a: (usize, f64), b: (usize, f64)) -> Ordering {
    b.1.partial_cmp(&a.1)
        .unwrap_or(Ordering::Equal)
        .then(a.0.cmp(&b.0))
}

pub fn top_k(s: &SimilarityVector, k: usize) -> Result<RankedList> {
    top_k_excluding(s, k, &[])
}

/// Exact top-`k` skipping the (sorted) gallery indices in `exclude`.
pub fn top_k_excluding(s: &SimilarityVector, k: usize, exclude: &[usize]) -> Result<RankedList> {
    if k == 0 {
        return Err(Error::Argument("top_k requires k >= 1".into()));
    }
    let mut items: Vec<(usize, f64)> = s
        .scores
        .iter()
        .copied()
        .enumerate()
        .filter(|(i, _)| exclude.binary_search(i).is_err())
        .collect();
    if items.len() > k {
        items.select_nth_unstable_by(k - 1, |a, b| rank_order(*a, *b));
        items.truncate(k);
    }
    items.sort_unstable_by(|a, b| rank_order(*a, *b));
    Ok(RankedList {
        query_id: s.query_id.clone(),
        entries: items
            .into_iter()
            .map(|(index, score)| RankedEntry { index, score })
            .collect(),
    })
}

/// Ranks only `subset` (gallery indices) by their scores in `s`.
pub fn rank_subset(s: &SimilarityVector, subset: &[usize]) -> RankedList {
    let mut items: Vec<(usize, f64)> = subset.iter().map(|&i| (i, s.scores[i])).collect();
    items.sort_unstable_by(|a, b| rank_order(*a, *b));
    RankedList {
        query_id: s.query_id.clone(),
        entries: items
            .into_iter()
            .map(|(index, score)| RankedEntry { index, score })
            .collect(),
    }
}

pub const SCORE_MAGIC: &[u8; 4] = b"IPCS";
pub const SCORE_VERSION: u32 = 1;

/// Row-major `queries x gallery` matrix of f32 scores.
///
/// File layout: magic `"IPCS"`, u32 version = 1, u64 query count, u64 gallery
/// count, then the f32 payload, all little-endian.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMatrix {
    queries: usize,
    gallery: usize,
    values: Vec<f32>,
}

impl ScoreMatrix {
    pub fn new(queries: usize, gallery: usize, values: Vec<f32>) -> Result<Self> {
        if values.len() != queries * gallery {
            return Err(Error::Shape(format!(
                "score matrix {queries}x{gallery} given {} values",
                values.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Data(format!(
                "score for query row {} gallery {} is not finite",
                i / gallery.max(1),
                i % gallery.max(1)
            )));
        }
        Ok(Self {
            queries,
            gallery,
            values,
        })
    }

    pub fn query_count(&self) -> usize {
        self.queries
    }

    pub fn gallery_count(&self) -> usize {
        self.gallery
    }

    pub fn row(&self, q: usize) -> &[f32] {
        &self.values[q * self.gallery..(q + 1) * self.gallery]
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        self.write_to(&mut w)
            .and_then(|_| w.flush())
            .map_err(|e| Error::io(path, e))
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        w.write_all(SCORE_MAGIC)?;
        w.write_all(&SCORE_VERSION.to_le_bytes())?;
        w.write_all(&(self.queries as u64).to_le_bytes())?;
        w.write_all(&(self.gallery as u64).to_le_bytes())?;
        write_f32s(w, &self.values)
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(&mut BufReader::new(file)).map_err(|e| match e {
            Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let mut header = [0u8; 24];
        r.read_exact(&mut header)
            .map_err(|e| Error::Format(format!("truncated score header: {e}")))?;
        if &header[..4] != SCORE_MAGIC {
            return Err(Error::Format("bad magic, expected \"IPCS\"".into()));
        }
        let version = u32::from_le_bytes(header[4..8].try_into().unwrap());
        if version != SCORE_VERSION {
            return Err(Error::Format(format!(
                "unsupported score file version {version}"
            )));
        }
        let queries = u64::from_le_bytes(header[8..16].try_into().unwrap());
        let gallery = u64::from_le_bytes(header[16..24].try_into().unwrap());
        let count = usize::try_from(queries)
            .ok()
            .zip(usize::try_from(gallery).ok())
            .and_then(|(q, g)| q.checked_mul(g))
            .ok_or_else(|| Error::Format("score matrix too large".into()))?;
        let values = read_f32s(r, count)
            .map_err(|e| Error::Format(format!("truncated score payload: {e}")))?;
        let mut extra = [0u8; 1];
        if r.read(&mut extra)
            .map_err(|e| Error::Format(e.to_string()))?
            != 0
        {
            return Err(Error::Format("trailing bytes after score payload".into()));
        }
        Self::new(queries as usize, gallery as usize, values)
    }
}
