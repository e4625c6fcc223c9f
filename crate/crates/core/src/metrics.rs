//! Retrieval metrics: Recall@K, truncated mAP@K and Recall@K within a
//! per-query candidate subset.
//!
//! Recall is binary per query (any ground-truth hit in the top K). AP@K uses
//! the denominator `min(K, |GT|)`:
//!
//! ```text
//! AP@K = 1 / min(K, |GT|) * sum_{r=1..K} P@r * rel(r)
//! ```
//!
//! Dataset values are plain means over queries and are kept in [0, 1]; the
//! x100 table convention is left to presentation code.

use std::fmt;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::engine::{rank_subset, RankedList, SimilarityVector};
use crate::error::{Error, Result};
use crate::store::MetricProtocol;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Recall,
    Map,
    SubsetRecall,
}

impl Metric {
    pub fn as_str(self) -> &'static str {
        match self {
            Metric::Recall => "recall",
            Metric::Map => "map",
            Metric::SubsetRecall => "subset_recall",
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalConfig {
    #[serde(default)]
    pub recall_ks: Vec<usize>,
    #[serde(default)]
    pub map_ks: Vec<usize>,
    #[serde(default)]
    pub subset_ks: Vec<usize>,
}

impl EvalConfig {
    /// Default cutoffs for each benchmark protocol.
    pub fn for_protocol(p: MetricProtocol) -> Self {
        let recall = vec![1, 5, 10, 50];
        match p {
            MetricProtocol::MultiTargetMap => Self {
                recall_ks: recall,
                map_ks: vec![5, 10, 25, 50],
                subset_ks: vec![],
            },
            MetricProtocol::SingleTargetRecall => Self {
                recall_ks: recall,
                map_ks: vec![],
                subset_ks: vec![],
            },
            MetricProtocol::SubsetRecall => Self {
                recall_ks: recall,
                map_ks: vec![],
                subset_ks: vec![1, 2, 3],
            },
            MetricProtocol::RecallOnly => Self {
                recall_ks: vec![10, 50],
                map_ks: vec![],
                subset_ks: vec![],
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, ks) in [
            ("recall_ks", &self.recall_ks),
            ("map_ks", &self.map_ks),
            ("subset_ks", &self.subset_ks),
        ] {
            if ks.contains(&0) {
                return Err(Error::Config(format!("{name} must be >= 1")));
            }
            if ks.windows(2).any(|w| w[0] >= w[1]) {
                return Err(Error::Config(format!("{name} must be strictly ascending")));
            }
        }
        Ok(())
    }

    /// Longest ranking any metric looks at.
    pub fn max_k(&self) -> usize {
        self.recall_ks
            .iter()
            .chain(&self.map_ks)
            .copied()
            .max()
            .unwrap_or(1)
    }
}

fn require_gt(ground_truth: &[usize]) -> Result<()> {
    if ground_truth.is_empty() {
        return Err(Error::Protocol("empty ground truth".into()));
    }
    Ok(())
}

fn require_k(k: usize) -> Result<()> {
    if k == 0 {
        return Err(Error::Argument("metric cutoff k must be >= 1".into()));
    }
    Ok(())
}

/// 1.0 if any ground-truth index is among the first `k` entries.
pub fn recall_at_k(ranked: &RankedList, ground_truth: &[usize], k: usize) -> Result<f64> {
    require_k(k)?;
    require_gt(ground_truth)?;
    let hit = ranked.indices().take(k).any(|i| ground_truth.contains(&i));
    Ok(if hit { 1.0 } else { 0.0 })
}

pub fn map_at_k(ranked: &RankedList, ground_truth: &[usize], k: usize) -> Result<f64> {
    require_k(k)?;
    require_gt(ground_truth)?;
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (r, i) in ranked.indices().take(k).enumerate() {
        if ground_truth.contains(&i) {
            hits += 1;
            sum += hits as f64 / (r + 1) as f64;
        }
    }
    Ok(sum / k.min(ground_truth.len()) as f64)
}

/// Recall@K after ranking only the members of `subset` by `final_scores`.
pub fn subset_recall_at_k(
    final_scores: &SimilarityVector,
    subset: &[usize],
    ground_truth: &[usize],
    k: usize,
) -> Result<f64> {
    require_gt(ground_truth)?;
    if let Some(g) = ground_truth.iter().find(|g| !subset.contains(g)) {
        return Err(Error::Protocol(format!(
            "ground truth index {g} is not in the candidate subset"
        )));
    }
    if k > subset.len() {
        return Err(Error::Protocol(format!(
            "k = {k} exceeds subset size {}",
            subset.len()
        )));
    }
    recall_at_k(&rank_subset(final_scores, subset), ground_truth, k)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricValue {
    pub metric: Metric,
    pub k: usize,
    pub value: f64,
}

/// What the metrics need from one query.
#[derive(Debug, Clone)]
pub struct QueryOutcome<'a> {
    /// At least [`EvalConfig::max_k`] entries, or the whole (filtered) gallery.
    pub ranked: &'a RankedList,
    pub ground_truth: &'a [usize],
    /// Ranking of the query's candidate subset, when it has one.
    pub subset_ranked: Option<&'a RankedList>,
}

/// Dataset-level means of every configured metric, in config order.
pub fn aggregate(outcomes: &[QueryOutcome<'_>], cfg: &EvalConfig) -> Result<Vec<MetricValue>> {
    cfg.validate()?;
    let mut out = Vec::new();
    let n = outcomes.len() as f64;
    if outcomes.is_empty() {
        return Ok(out);
    }
    for &k in &cfg.recall_ks {
        let mut sum = 0.0;
        for o in outcomes {
            sum += recall_at_k(o.ranked, o.ground_truth, k)?;
        }
        out.push(MetricValue {
            metric: Metric::Recall,
            k,
            value: sum / n,
        });
    }
    for &k in &cfg.map_ks {
        let mut sum = 0.0;
        for o in outcomes {
            sum += map_at_k(o.ranked, o.ground_truth, k)?;
        }
        out.push(MetricValue {
            metric: Metric::Map,
            k,
            value: sum / n,
        });
    }
    let with_subset: Vec<_> = outcomes
        .iter()
        .filter_map(|o| o.subset_ranked.map(|s| (s, o.ground_truth)))
        .collect();
    if !with_subset.is_empty() {
        for &k in &cfg.subset_ks {
            let mut sum = 0.0;
            for (ranked, gt) in &with_subset {
                if k > ranked.entries.len() {
                    return Err(Error::Protocol(format!(
                        "query {}: k = {k} exceeds subset size {}",
                        ranked.query_id,
                        ranked.entries.len()
                    )));
                }
                sum += recall_at_k(ranked, gt, k)?;
            }
            out.push(MetricValue {
                metric: Metric::SubsetRecall,
                k,
                value: sum / with_subset.len() as f64,
            });
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryDiagnostics {
    pub query_id: String,
    /// 1-based rank of the best-ranked ground-truth item, `None` if every
    /// ground-truth item was excluded.
    pub first_relevant_rank: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub dataset: String,
    pub num_queries: usize,
    /// Full resolved configuration of the run that produced this report.
    pub config: serde_json::Value,
    pub metrics: Vec<MetricValue>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub per_query: Option<Vec<QueryDiagnostics>>,
}

impl EvalReport {
    pub fn value(&self, metric: Metric, k: usize) -> Option<f64> {
        self.metrics
            .iter()
            .find(|m| m.metric == metric && m.k == k)
            .map(|m| m.value)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }

    /// `configuration,metric,k,value`, one row per metric and cutoff.
    pub fn to_csv(&self, configuration: &str) -> String {
        let mut s = String::from("configuration,metric,k,value\n");
        for m in &self.metrics {
            s.push_str(&format!(
                "{configuration},{},{},{}\n",
                m.metric, m.k, m.value
            ));
        }
        s
    }

    pub fn write_json(&self, path: impl AsRef<Path>) -> Result<()> {
        write_text(path.as_ref(), &self.to_json())
    }

    /// Human-readable table, values x100.
    pub fn write_table<W: Write + ?Sized>(&self, w: &mut W) -> std::io::Result<()> {
        writeln!(w, "{} ({} queries)", self.dataset, self.num_queries)?;
        for m in &self.metrics {
            writeln!(
                w,
                "  {:<14} @{:<3} {:>7.2}",
                m.metric.as_str(),
                m.k,
                100.0 * m.value
            )?;
        }
        Ok(())
    }
}

pub(crate) fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}
