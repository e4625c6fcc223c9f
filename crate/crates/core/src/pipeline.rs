//! End-to-end retrieval: fusion, similarity computation, balancing, ranking
//! and evaluation over a resolved [`Dataset`].
//!
//! `S_t` and `S_p` do not depend on `lambda`, so they are computed once into a
//! [`SimilarityCache`] and every `lambda` is a cheap recombination of it.

use std::io::Write;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::engine::{
    combine, minmax, rank_order, rank_subset, top_k_excluding, BalanceParams, Normalization,
    RankedList, ScoreKind, SimilarityVector,
};
use crate::error::{Error, Result};
use crate::fusion::{robust_proxy_with, AggregationMode, FusionConfig, FusionInputs};
use crate::kernel::Kernel;
use crate::metrics::{aggregate, EvalConfig, EvalReport, Metric, QueryDiagnostics, QueryOutcome};
use crate::store::{mean_embedding, normalize_in_place, Dataset, Embedding, ResolvedQuery};

pub const THREADS_ENV: &str = "IPCIR_THREADS";

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Threads {
    #[default]
    Auto,
    #[serde(untagged)]
    Count(usize),
}

impl Threads {
    pub fn resolve(self) -> usize {
        match self {
            Threads::Count(n) => n.max(1),
            Threads::Auto => std::thread::available_parallelism().map_or(1, |n| n.get()),
        }
    }
}

/// Everything that determines a run. Serialized verbatim into every report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub manifest: PathBuf,
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    #[serde(default)]
    pub fusion: FusionConfig,
    #[serde(default)]
    pub normalization: Normalization,
    /// Cutoffs; `None` uses the manifest protocol's defaults.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eval: Option<EvalConfig>,
    #[serde(default = "default_out")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub threads: Threads,
    /// Length of each ranking written to the rankings file.
    #[serde(default = "default_ranking_len")]
    pub ranking_len: usize,
}

fn default_lambda() -> f64 {
    0.5
}

fn default_out() -> PathBuf {
    PathBuf::from("out")
}

fn default_ranking_len() -> usize {
    50
}

impl RunConfig {
    pub fn new(manifest: impl Into<PathBuf>) -> Self {
        Self {
            manifest: manifest.into(),
            lambda: default_lambda(),
            fusion: FusionConfig::default(),
            normalization: Normalization::default(),
            eval: None,
            output_dir: default_out(),
            threads: Threads::Auto,
            ranking_len: default_ranking_len(),
        }
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<()> {
        BalanceParams::new(self.lambda, self.normalization)?;
        self.fusion.weights.validate()?;
        if let Some(e) = &self.eval {
            e.validate()?;
        }
        if self.ranking_len == 0 {
            return Err(Error::Config("ranking_len must be >= 1".into()));
        }
        if !self.manifest.exists() {
            return Err(Error::Config(format!(
                "manifest {} does not exist",
                self.manifest.display()
            )));
        }
        Ok(())
    }

    pub fn balance(&self) -> Result<BalanceParams> {
        BalanceParams::new(self.lambda, self.normalization)
    }

    pub fn eval_config(&self, ds: &Dataset) -> EvalConfig {
        self.eval
            .clone()
            .unwrap_or_else(|| EvalConfig::for_protocol(ds.protocol))
    }

    /// The config as echoed into reports, with the thread count resolved.
    pub fn echo(&self) -> serde_json::Value {
        let mut c = self.clone();
        c.threads = Threads::Count(self.threads.resolve());
        serde_json::to_value(c).expect("config serializes")
    }

    /// Runs `f` on a thread pool of the configured size.
    pub fn install<T: Send>(&self, f: impl FnOnce() -> T + Send) -> Result<T> {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(self.threads.resolve())
            .build()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
        Ok(pool.install(f))
    }
}

/// Raw (unnormalized) `S_t` and `S_p` for every query, row-major over the gallery.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityCache {
    pub gallery_len: usize,
    pub text: Vec<f32>,
    pub proxy: Vec<f32>,
}

impl SimilarityCache {
    pub fn text_row(&self, q: usize) -> &[f32] {
        &self.text[q * self.gallery_len..(q + 1) * self.gallery_len]
    }

    pub fn proxy_row(&self, q: usize) -> &[f32] {
        &self.proxy[q * self.gallery_len..(q + 1) * self.gallery_len]
    }

    pub fn text_similarity(&self, ds: &Dataset, q: usize) -> SimilarityVector {
        SimilarityVector::from_f32(&ds.queries[q].query_id, ScoreKind::Text, self.text_row(q))
    }

    pub fn proxy_similarity(&self, ds: &Dataset, q: usize) -> SimilarityVector {
        SimilarityVector::from_f32(&ds.queries[q].query_id, ScoreKind::Proxy, self.proxy_row(q))
    }
}

fn mean_of_rows(
    set: Option<&crate::store::EmbeddingSet>,
    rows: &[usize],
) -> Result<Option<Embedding>> {
    match set {
        Some(set) if !rows.is_empty() => {
            let items: Vec<Embedding> = rows.iter().map(|&r| set.embedding(r)).collect();
            mean_embedding(&items).map(Some)
        }
        _ => Ok(None),
    }
}

/// Text-side query vector for one query, or `None` when `S_t` comes from a score file.
fn text_query(ds: &Dataset, q: &ResolvedQuery) -> Result<Option<Embedding>> {
    if q.baseline_row.is_some() {
        return Ok(None);
    }
    if let (Some(i), Some(set)) = (q.baseline_text, ds.sets.baseline_text.as_ref()) {
        return Ok(Some(set.embedding(i)));
    }
    let t = mean_of_rows(ds.sets.target_caption.as_ref(), &q.target_captions)?
        .ok_or_else(|| Error::Data(format!("query {:?} has no text-side source", q.query_id)))?;
    Ok(Some(t.normalized()))
}

/// Computes raw `S_t` for every query.
pub fn text_scores(ds: &Dataset, kernel: &Kernel) -> Result<Vec<f32>> {
    let n_g = ds.gallery().len();
    let dim = ds.dim;
    let mut out = vec![0.0f32; ds.queries.len() * n_g];
    let mut batch_rows = Vec::new();
    let mut batch = Vec::new();
    for (qi, q) in ds.queries.iter().enumerate() {
        match text_query(ds, q)? {
            Some(v) => {
                batch_rows.push(qi);
                batch.extend_from_slice(v.values());
            }
            None => {
                let scores = ds.sets.baseline_scores.as_ref().expect("resolved row");
                out[qi * n_g..(qi + 1) * n_g].copy_from_slice(scores.row(q.baseline_row.unwrap()));
            }
        }
    }
    if !batch_rows.is_empty() {
        let m = kernel.score_matrix(&batch, ds.gallery().matrix(), dim);
        for (b, &qi) in batch_rows.iter().enumerate() {
            out[qi * n_g..(qi + 1) * n_g].copy_from_slice(&m[b * n_g..(b + 1) * n_g]);
        }
    }
    Ok(out)
}

/// L2-normalized robust proxy vectors for one query: one vector in mean mode,
/// one per proxy in per-proxy mode, none if the query has no proxies.
pub fn fused_queries(
    ds: &Dataset,
    q: &ResolvedQuery,
    fusion: &FusionConfig,
    n_proxies: Option<usize>,
) -> Result<Vec<Embedding>> {
    let proxies = match n_proxies {
        Some(n) if q.proxies.len() < n => {
            return Err(Error::Protocol(format!(
                "query {:?} has {} proxy images, {n} requested",
                q.query_id,
                q.proxies.len()
            )))
        }
        Some(n) => &q.proxies[..n],
        None => &q.proxies[..],
    };
    let Some(proxy_set) = ds.sets.proxy_image.as_ref().filter(|_| !proxies.is_empty()) else {
        return Ok(Vec::new());
    };
    let query = ds.sets.query_image.embedding(q.query_image);
    let target = mean_of_rows(ds.sets.target_caption.as_ref(), &q.target_captions)?;
    let origin = mean_of_rows(ds.sets.origin_caption.as_ref(), &q.origin_captions)?;
    // without both caption sides the perturbation term is dropped
    let (target, origin) = match (target, origin) {
        (Some(t), Some(o)) => (t, o),
        _ => (Embedding::zeros(ds.dim), Embedding::zeros(ds.dim)),
    };
    let proxy_embeddings: Vec<Embedding> =
        proxies.iter().map(|&p| proxy_set.embedding(p)).collect();
    let proxy_inputs = match fusion.aggregation {
        AggregationMode::MeanEmbedding => vec![mean_embedding(&proxy_embeddings)?],
        AggregationMode::PerProxy => proxy_embeddings.iter().map(Embedding::normalized).collect(),
    };
    proxy_inputs
        .into_iter()
        .map(|p| {
            let inputs = FusionInputs::new(p, query.clone(), target.clone(), origin.clone())?;
            let rp = robust_proxy_with(&inputs, &fusion.weights, fusion.max_mode)?;
            let mut v = rp.embedding.into_values();
            normalize_in_place(&mut v);
            Embedding::new(v)
        })
        .collect()
}

/// Computes raw `S_p` for every query. Queries without proxies reuse `S_t`,
/// which leaves their balanced ranking equal to the text ranking.
pub fn proxy_scores(
    ds: &Dataset,
    kernel: &Kernel,
    fusion: &FusionConfig,
    n_proxies: Option<usize>,
    text: &[f32],
) -> Result<Vec<f32>> {
    let n_g = ds.gallery().len();
    let fused: Vec<Vec<Embedding>> = ds
        .queries
        .par_iter()
        .map(|q| fused_queries(ds, q, fusion, n_proxies))
        .collect::<Result<_>>()?;
    let batch: Vec<f32> = fused
        .iter()
        .flatten()
        .flat_map(|e| e.values().iter().copied())
        .collect();
    let m = kernel.score_matrix(&batch, ds.gallery().matrix(), ds.dim);
    let mut out = vec![0.0f32; ds.queries.len() * n_g];
    let mut row = 0;
    for (qi, vectors) in fused.iter().enumerate() {
        let dst = &mut out[qi * n_g..(qi + 1) * n_g];
        match vectors.len() {
            0 => dst.copy_from_slice(&text[qi * n_g..(qi + 1) * n_g]),
            1 => {
                dst.copy_from_slice(&m[row * n_g..(row + 1) * n_g]);
                row += 1;
            }
            n => {
                for (j, d) in dst.iter_mut().enumerate() {
                    let sum: f64 = (0..n).map(|r| f64::from(m[(row + r) * n_g + j])).sum();
                    *d = (sum / n as f64) as f32;
                }
                row += n;
            }
        }
    }
    Ok(out)
}

pub fn compute_similarities(
    ds: &Dataset,
    fusion: &FusionConfig,
    n_proxies: Option<usize>,
) -> Result<SimilarityCache> {
    let kernel = Kernel::default();
    let text = text_scores(ds, &kernel)?;
    let proxy = proxy_scores(ds, &kernel, fusion, n_proxies, &text)?;
    Ok(SimilarityCache {
        gallery_len: ds.gallery().len(),
        text,
        proxy,
    })
}

/// Final scores of query `q` under `params`.
pub fn final_scores(
    ds: &Dataset,
    cache: &SimilarityCache,
    q: usize,
    params: &BalanceParams,
) -> SimilarityVector {
    let to64 = |r: &[f32]| r.iter().map(|&s| f64::from(s)).collect::<Vec<_>>();
    let (t, p) = (to64(cache.text_row(q)), to64(cache.proxy_row(q)));
    let (t, p) = match params.normalization {
        Normalization::MinmaxPerQuery => (minmax(&t), minmax(&p)),
        Normalization::None => (t, p),
    };
    SimilarityVector {
        query_id: ds.queries[q].query_id.clone(),
        kind: ScoreKind::Final,
        scores: combine(&t, &p, params.lambda),
    }
}

/// Per-query rankings plus dataset metrics.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub rankings: Vec<RankedList>,
    pub metrics: Vec<crate::metrics::MetricValue>,
    pub diagnostics: Vec<QueryDiagnostics>,
}

impl Evaluation {
    pub fn value(&self, metric: Metric, k: usize) -> Option<f64> {
        self.metrics
            .iter()
            .find(|m| m.metric == metric && m.k == k)
            .map(|m| m.value)
    }
}

fn first_relevant_rank(s: &SimilarityVector, q: &ResolvedQuery) -> Option<usize> {
    let best = q
        .ground_truth
        .iter()
        .filter(|g| q.exclude.binary_search(g).is_err())
        .map(|&g| (g, s.scores[g]))
        .min_by(|a, b| rank_order(*a, *b))?;
    let ahead = s
        .scores
        .iter()
        .enumerate()
        .filter(|(i, _)| q.exclude.binary_search(i).is_err())
        .filter(|&(i, &v)| rank_order((i, v), best).is_lt())
        .count();
    Some(ahead + 1)
}

/// Ranks and evaluates every query with already-final scores provider `scores`.
pub fn evaluate_with<F>(
    ds: &Dataset,
    eval: &EvalConfig,
    ranking_len: usize,
    scores: F,
) -> Result<Evaluation>
where
    F: Fn(usize) -> SimilarityVector + Sync,
{
    eval.validate()?;
    let depth = eval.max_k().max(ranking_len);
    let per_query: Vec<(RankedList, Option<RankedList>, QueryDiagnostics)> = ds
        .queries
        .par_iter()
        .enumerate()
        .map(|(qi, q)| {
            let s = scores(qi);
            let ranked = top_k_excluding(&s, depth, &q.exclude)?;
            let subset = q.subset.as_ref().map(|sub| rank_subset(&s, sub));
            let diag = QueryDiagnostics {
                query_id: q.query_id.clone(),
                first_relevant_rank: first_relevant_rank(&s, q),
            };
            Ok((ranked, subset, diag))
        })
        .collect::<Result<_>>()?;
    let outcomes: Vec<QueryOutcome<'_>> = per_query
        .iter()
        .zip(&ds.queries)
        .map(|((ranked, subset, _), q)| QueryOutcome {
            ranked,
            ground_truth: &q.ground_truth,
            subset_ranked: subset.as_ref(),
        })
        .collect();
    let metrics = aggregate(&outcomes, eval)?;
    let mut rankings = Vec::with_capacity(per_query.len());
    let mut diagnostics = Vec::with_capacity(per_query.len());
    for (mut ranked, _, diag) in per_query {
        ranked.entries.truncate(ranking_len);
        rankings.push(ranked);
        diagnostics.push(diag);
    }
    Ok(Evaluation {
        rankings,
        metrics,
        diagnostics,
    })
}

pub fn evaluate_cached(
    ds: &Dataset,
    cache: &SimilarityCache,
    params: &BalanceParams,
    eval: &EvalConfig,
    ranking_len: usize,
) -> Result<Evaluation> {
    evaluate_with(ds, eval, ranking_len, |q| {
        final_scores(ds, cache, q, params)
    })
}

/// Rankings from raw `S_t` alone (the baseline method's own ordering).
pub fn text_only_rankings(
    ds: &Dataset,
    cache: &SimilarityCache,
    k: usize,
) -> Result<Vec<RankedList>> {
    ds.queries
        .iter()
        .enumerate()
        .map(|(qi, q)| top_k_excluding(&cache.text_similarity(ds, qi), k, &q.exclude))
        .collect()
}

/// One row of a sweep CSV.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub x: f64,
    pub metric: Metric,
    pub k: usize,
    pub value: f64,
}

pub fn sweep_lambda(
    ds: &Dataset,
    cache: &SimilarityCache,
    grid: &[f64],
    normalization: Normalization,
    eval: &EvalConfig,
) -> Result<Vec<SweepRow>> {
    if grid.is_empty() {
        return Err(Error::Config("lambda grid is empty".into()));
    }
    if grid.windows(2).any(|w| w[0] > w[1]) {
        return Err(Error::Config("lambda grid must be sorted".into()));
    }
    let mut rows = Vec::new();
    for &lambda in grid {
        let params = BalanceParams::new(lambda, normalization)?;
        let e = evaluate_cached(ds, cache, &params, eval, 1)?;
        rows.extend(e.metrics.iter().map(|m| SweepRow {
            x: lambda,
            metric: m.metric,
            k: m.k,
            value: m.value,
        }));
    }
    Ok(rows)
}

/// Evaluates proxy-prefix truncations `1..=max_proxies`, reusing `S_t`.
pub fn sweep_proxies(
    ds: &Dataset,
    fusion: &FusionConfig,
    params: &BalanceParams,
    max_proxies: usize,
    eval: &EvalConfig,
) -> Result<Vec<SweepRow>> {
    if max_proxies == 0 {
        return Err(Error::Config("max_proxies must be >= 1".into()));
    }
    if let Some(q) = ds.queries.iter().find(|q| q.proxies.len() < max_proxies) {
        return Err(Error::Protocol(format!(
            "query {:?} has {} proxy images, {max_proxies} requested",
            q.query_id,
            q.proxies.len()
        )));
    }
    let kernel = Kernel::default();
    let text = text_scores(ds, &kernel)?;
    let mut rows = Vec::new();
    for n in 1..=max_proxies {
        let proxy = proxy_scores(ds, &kernel, fusion, Some(n), &text)?;
        let cache = SimilarityCache {
            gallery_len: ds.gallery().len(),
            text: text.clone(),
            proxy,
        };
        let e = evaluate_cached(ds, &cache, params, eval, 1)?;
        rows.extend(e.metrics.iter().map(|m| SweepRow {
            x: n as f64,
            metric: m.metric,
            k: m.k,
            value: m.value,
        }));
    }
    Ok(rows)
}

pub fn sweep_csv(x_name: &str, rows: &[SweepRow]) -> String {
    let mut s = format!("{x_name},metric,k,value\n");
    for r in rows {
        s.push_str(&format!("{},{},{},{}\n", r.x, r.metric, r.k, r.value));
    }
    s
}

pub fn write_rankings<W: Write>(w: &mut W, ds: &Dataset, rankings: &[RankedList]) -> Result<()> {
    #[derive(Serialize)]
    struct Line<'a> {
        query_id: &'a str,
        ranking: Vec<(&'a str, f64)>,
    }
    let ids = ds.gallery_ids();
    for r in rankings {
        let line = Line {
            query_id: &r.query_id,
            ranking: r
                .entries
                .iter()
                .map(|e| (ids[e.index].as_str(), e.score))
                .collect(),
        };
        let text = serde_json::to_string(&line).expect("ranking serializes");
        writeln!(w, "{text}").map_err(|e| Error::io("rankings", e))?;
    }
    Ok(())
}

/// Result of [`retrieve`].
#[derive(Debug, Clone)]
pub struct RetrieveOutput {
    pub evaluation: Evaluation,
    pub report: EvalReport,
}

/// The full pipeline on an already resolved dataset.
pub fn retrieve(ds: &Dataset, config: &RunConfig) -> Result<RetrieveOutput> {
    let params = config.balance()?;
    let eval = config.eval_config(ds);
    let cache = compute_similarities(ds, &config.fusion, None)?;
    let evaluation = evaluate_cached(ds, &cache, &params, &eval, config.ranking_len)?;
    let report = EvalReport {
        dataset: ds.name.clone(),
        num_queries: ds.queries.len(),
        config: config.echo(),
        metrics: evaluation.metrics.clone(),
        per_query: Some(evaluation.diagnostics.clone()),
    };
    Ok(RetrieveOutput { evaluation, report })
}
