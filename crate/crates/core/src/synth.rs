//! Synthetic benchmarks with planted ground truth, and a brute-force oracle
//! that re-evaluates the whole pipeline independently of the engine.
//!
//! For query `i` with unit content vector `q` and unit edit direction `e`
//! (orthogonal to `q`), the planted target is `normalize(q + s * e)` where
//! `s` is the edit strength. Captions and proxies are noisy views:
//!
//! * origin captions: `q + noise(caption_noise)`
//! * target captions: `origin + s * e + noise(text_noise)`
//! * proxy images: `target + noise(proxy_noise)`
//!
//! `noise(scale)` is an isotropic Gaussian with per-component standard
//! deviation `scale / sqrt(dim)`, so its expected norm is about `scale`.
//! The gallery holds every target, a fraction of hard negatives and uniform
//! random distractors. Hard negatives cycle through four kinds per query:
//! near copies of the target that differ only outside `span(q, e)`, noisy
//! copies of the unedited content, the edit applied to unrelated content, and
//! the right content under a random edit.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::engine::Normalization;
use crate::engine::ScoreMatrix;
use crate::error::{Error, Result};
use crate::fusion::FusionWeights;
use crate::metrics::{EvalConfig, EvalReport, Metric, MetricValue};
use crate::store::{
    resolve_manifest, write_embedding_set, Dataset, DatasetManifest, EmbeddingSet, MetricProtocol,
    QueryRecord, Role, SetBundle, SetPaths,
};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub dim: usize,
    pub gallery_size: usize,
    pub num_queries: usize,
    pub edit_strength: f64,
    pub proxy_noise: f64,
    pub proxies_per_query: usize,
    pub seed: u64,
    /// Noise added to each target caption on top of the edit.
    #[serde(default = "defaults::text_noise")]
    pub text_noise: f64,
    /// Noise of each origin caption around the query content.
    #[serde(default = "defaults::caption_noise")]
    pub caption_noise: f64,
    /// Fraction of the gallery made of per-query hard negatives.
    #[serde(default = "defaults::hard_negative_fraction")]
    pub hard_negative_fraction: f64,
    /// Noise scale of hard negatives around their anchor.
    #[serde(default = "defaults::hard_negative_spread")]
    pub hard_negative_spread: f64,
    #[serde(default = "defaults::captions_per_query")]
    pub captions_per_query: usize,
    /// Size of the per-query candidate subset; 0 disables subsets.
    #[serde(default = "defaults::subset_size")]
    pub subset_size: usize,
}

mod defaults {
    pub fn text_noise() -> f64 {
        0.1
    }
    pub fn caption_noise() -> f64 {
        0.1
    }
    pub fn hard_negative_fraction() -> f64 {
        0.3
    }
    pub fn hard_negative_spread() -> f64 {
        0.02
    }
    pub fn captions_per_query() -> usize {
        3
    }
    pub fn subset_size() -> usize {
        6
    }
}

impl SynthSpec {
    pub fn new(
        dim: usize,
        gallery_size: usize,
        num_queries: usize,
        edit_strength: f64,
        proxy_noise: f64,
        proxies_per_query: usize,
        seed: u64,
    ) -> Self {
        Self {
            dim,
            gallery_size,
            num_queries,
            edit_strength,
            proxy_noise,
            proxies_per_query,
            seed,
            text_noise: defaults::text_noise(),
            caption_noise: defaults::caption_noise(),
            hard_negative_fraction: defaults::hard_negative_fraction(),
            hard_negative_spread: defaults::hard_negative_spread(),
            captions_per_query: defaults::captions_per_query(),
            subset_size: defaults::subset_size(),
        }
    }

    /// The planted benchmark used for the improvement and proxy-count studies.
    pub fn planted(seed: u64) -> Self {
        Self::new(64, 5000, 200, 0.7, 0.4, 5, seed)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.dim < 2 {
            return bad(format!("dim must be >= 2, got {}", self.dim));
        }
        if self.num_queries == 0 || self.gallery_size < self.num_queries {
            return bad(format!(
                "need 1 <= num_queries <= gallery_size, got {} and {}",
                self.num_queries, self.gallery_size
            ));
        }
        if !(0.0..=1.0).contains(&self.edit_strength) {
            return bad(format!(
                "edit_strength must be in [0, 1], got {}",
                self.edit_strength
            ));
        }
        if !(0.0..=1.0).contains(&self.hard_negative_fraction) {
            return bad("hard_negative_fraction must be in [0, 1]".into());
        }
        for (name, v) in [
            ("proxy_noise", self.proxy_noise),
            ("text_noise", self.text_noise),
            ("caption_noise", self.caption_noise),
            ("hard_negative_spread", self.hard_negative_spread),
        ] {
            if !v.is_finite() || v < 0.0 {
                return bad(format!("{name} must be finite and >= 0, got {v}"));
            }
        }
        if self.proxies_per_query == 0 || self.captions_per_query == 0 {
            return bad("proxies_per_query and captions_per_query must be >= 1".into());
        }
        if self.subset_size > self.gallery_size || self.subset_size == 1 {
            return bad(format!("invalid subset_size {}", self.subset_size));
        }
        Ok(())
    }
}

/// A generated dataset: manifest plus every set it references, in memory.
#[derive(Debug, Clone)]
pub struct SynthDataset {
    pub spec: SynthSpec,
    pub manifest: DatasetManifest,
    pub sets: SetBundle,
}

pub mod files {
    pub const MANIFEST: &str = "manifest.json";
    pub const GALLERY: &str = "gallery.ipce";
    pub const QUERY_IMAGE: &str = "query_image.ipce";
    pub const PROXY_IMAGE: &str = "proxy_image.ipce";
    pub const TARGET_CAPTION: &str = "target_caption.ipce";
    pub const ORIGIN_CAPTION: &str = "origin_caption.ipce";
    pub const BASELINE_SCORES: &str = "baseline_scores.ipcs";
}

impl SynthDataset {
    /// Writes every file plus `manifest.json` into `dir` (created if needed).
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_embedding_set(dir.join(files::GALLERY), &self.sets.gallery)?;
        write_embedding_set(dir.join(files::QUERY_IMAGE), &self.sets.query_image)?;
        let opt = [
            (files::PROXY_IMAGE, &self.sets.proxy_image),
            (files::TARGET_CAPTION, &self.sets.target_caption),
            (files::ORIGIN_CAPTION, &self.sets.origin_caption),
        ];
        for (name, set) in opt {
            if let Some(set) = set {
                write_embedding_set(dir.join(name), set)?;
            }
        }
        if let Some(scores) = &self.sets.baseline_scores {
            scores.write(dir.join(files::BASELINE_SCORES))?;
        }
        self.manifest.write(dir.join(files::MANIFEST))
    }

    pub fn resolve(&self) -> Result<Dataset> {
        resolve_manifest(&self.manifest, self.sets.clone())
    }
}

fn unit(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        if let Some(u) = normalize(v) {
            return u;
        }
    }
}

fn normalize(mut v: Vec<f64>) -> Option<Vec<f64>> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n < 1e-12 {
        return None;
    }
    v.iter_mut().for_each(|x| *x /= n);
    Some(v)
}

fn normalized(v: Vec<f64>) -> Vec<f64> {
    let dim = v.len();
    normalize(v).unwrap_or_else(|| {
        let mut e = vec![0.0; dim];
        e[0] = 1.0;
        e
    })
}

fn add_noise(rng: &mut ChaCha8Rng, v: &[f64], scale: f64) -> Vec<f64> {
    let sd = scale / (v.len() as f64).sqrt();
    v.iter()
        .map(|x| {
            let z: f64 = StandardNormal.sample(rng);
            x + sd * z
        })
        .collect()
}

fn axpy(a: f64, x: &[f64], y: &[f64]) -> Vec<f64> {
    x.iter().zip(y).map(|(x, y)| a * x + y).collect()
}

fn to_f32(v: &[f64]) -> impl Iterator<Item = f32> + '_ {
    v.iter().map(|&x| x as f32)
}

/// Builds the dataset described by `spec`. Deterministic in `spec.seed`.
pub fn generate(spec: &SynthSpec) -> Result<SynthDataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (dim, nq, s) = (spec.dim, spec.num_queries, spec.edit_strength);

    let mut contents = Vec::with_capacity(nq);
    let mut edits = Vec::with_capacity(nq);
    let mut targets = Vec::with_capacity(nq);
    for _ in 0..nq {
        let q = unit(&mut rng, dim);
        let raw = unit(&mut rng, dim);
        let along: f64 = raw.iter().zip(&q).map(|(a, b)| a * b).sum();
        let e = normalized(axpy(-along, &q, &raw));
        targets.push(normalized(axpy(s, &e, &q)));
        contents.push(q);
        edits.push(e);
    }

    // gallery: targets, hard negatives, random distractors
    let n_hard = ((spec.hard_negative_fraction * spec.gallery_size as f64).round() as usize)
        .min(spec.gallery_size - nq);
    let mut gallery_rows: Vec<Vec<f64>> = targets.clone();
    let mut owner: Vec<Option<usize>> = (0..nq).map(Some).collect();
    for h in 0..n_hard {
        let i = h % nq;
        let (q, e) = (&contents[i], &edits[i]);
        let row = match (h / nq) % 4 {
            // the target varied only outside span(q, e)
            0 => {
                let mut nu = add_noise(&mut rng, &vec![0.0; dim], spec.hard_negative_spread);
                for basis in [q, e] {
                    let along: f64 = nu.iter().zip(basis).map(|(a, b)| a * b).sum();
                    nu = axpy(-along, basis, &nu);
                }
                normalized(axpy(1.0, &nu, &targets[i]))
            }
            // the unedited content
            1 => normalized(add_noise(&mut rng, q, spec.hard_negative_spread)),
            // the right edit applied to other content
            2 => {
                let other = unit(&mut rng, dim);
                normalized(axpy(s, e, &other))
            }
            // the right content with a different edit
            _ => {
                let other = unit(&mut rng, dim);
                normalized(axpy(
                    s,
                    &other,
                    &add_noise(&mut rng, q, spec.hard_negative_spread),
                ))
            }
        };
        gallery_rows.push(row);
        owner.push(Some(i));
    }
    while gallery_rows.len() < spec.gallery_size {
        gallery_rows.push(unit(&mut rng, dim));
        owner.push(None);
    }
    let mut order: Vec<usize> = (0..spec.gallery_size).collect();
    order.shuffle(&mut rng);
    let gallery_ids: Vec<String> = (0..spec.gallery_size).map(|g| format!("g{g:06}")).collect();
    // slot[original row] = gallery position
    let mut slot = vec![0usize; spec.gallery_size];
    for (pos, &orig) in order.iter().enumerate() {
        slot[orig] = pos;
    }
    let mut gallery = Vec::with_capacity(spec.gallery_size * dim);
    for &orig in &order {
        gallery.extend(to_f32(&gallery_rows[orig]));
    }
    let mut hard_of: Vec<Vec<usize>> = vec![Vec::new(); nq];
    for (orig, o) in owner.iter().enumerate().skip(nq) {
        if let Some(i) = o {
            hard_of[*i].push(slot[orig]);
        }
    }

    let mut query_m = Vec::with_capacity(nq * dim);
    let mut proxy_ids = Vec::new();
    let mut proxy_m = Vec::new();
    let mut target_ids = Vec::new();
    let mut target_m = Vec::new();
    let mut origin_ids = Vec::new();
    let mut origin_m = Vec::new();
    let mut baseline = Vec::with_capacity(nq * spec.gallery_size);
    let mut records = Vec::with_capacity(nq);

    for i in 0..nq {
        let (q, e, t) = (&contents[i], &edits[i], &targets[i]);
        query_m.extend(to_f32(q));

        let mut rec = QueryRecord {
            query_id: format!("q{i:05}"),
            query_image: format!("qi{i:05}"),
            proxy_images: Vec::new(),
            target_captions: Vec::new(),
            origin_captions: Vec::new(),
            baseline_text: None,
            baseline_row: None,
            ground_truth: vec![gallery_ids[slot[i]].clone()],
            subset: None,
            exclude: Vec::new(),
        };

        let mut text_mean = vec![0.0f64; dim];
        for c in 0..spec.captions_per_query {
            let origin = add_noise(&mut rng, q, spec.caption_noise);
            let target = add_noise(&mut rng, &axpy(s, e, &origin), spec.text_noise);
            origin_m.extend(to_f32(&origin));
            target_m.extend(to_f32(&target));
            let tn = normalized(target.iter().map(|&x| f64::from(x as f32)).collect());
            text_mean.iter_mut().zip(&tn).for_each(|(m, x)| *m += x);
            let (oid, tid) = (format!("o{i:05}_{c}"), format!("t{i:05}_{c}"));
            rec.origin_captions.push(oid.clone());
            rec.target_captions.push(tid.clone());
            origin_ids.push(oid);
            target_ids.push(tid);
        }
        let text = normalized(text_mean);
        for g in gallery.chunks_exact(dim) {
            let gn = normalized(g.iter().map(|&x| f64::from(x)).collect());
            baseline.push(text.iter().zip(&gn).map(|(a, b)| a * b).sum::<f64>() as f32);
        }

        for j in 0..spec.proxies_per_query {
            let p = add_noise(&mut rng, t, spec.proxy_noise);
            proxy_m.extend(to_f32(&p));
            let pid = format!("p{i:05}_{j}");
            rec.proxy_images.push(pid.clone());
            proxy_ids.push(pid);
        }

        if spec.subset_size > 0 {
            let gt = slot[i];
            let mut members = vec![gt];
            for &h in &hard_of[i] {
                if members.len() == spec.subset_size {
                    break;
                }
                members.push(h);
            }
            while members.len() < spec.subset_size {
                let c = rng.random_range(0..spec.gallery_size);
                if !members.contains(&c) {
                    members.push(c);
                }
            }
            members.shuffle(&mut rng);
            rec.subset = Some(members.iter().map(|&m| gallery_ids[m].clone()).collect());
        }
        records.push(rec);
    }

    let query_ids = (0..nq).map(|i| format!("qi{i:05}")).collect();
    let sets = SetBundle {
        gallery: EmbeddingSet::new(Role::Gallery, dim, gallery_ids, gallery)?,
        query_image: EmbeddingSet::new(Role::QueryImage, dim, query_ids, query_m)?,
        proxy_image: Some(EmbeddingSet::new(
            Role::ProxyImage,
            dim,
            proxy_ids,
            proxy_m,
        )?),
        target_caption: Some(EmbeddingSet::new(
            Role::TargetCaption,
            dim,
            target_ids,
            target_m,
        )?),
        origin_caption: Some(EmbeddingSet::new(
            Role::OriginCaption,
            dim,
            origin_ids,
            origin_m,
        )?),
        baseline_text: None,
        baseline_scores: Some(ScoreMatrix::new(nq, spec.gallery_size, baseline)?),
    };
    let manifest = DatasetManifest {
        name: format!(
            "synth-d{}-g{}-q{}-s{}",
            dim, spec.gallery_size, nq, spec.seed
        ),
        gallery: files::GALLERY.into(),
        sets: SetPaths {
            query_image: files::QUERY_IMAGE.into(),
            proxy_image: Some(files::PROXY_IMAGE.into()),
            target_caption: Some(files::TARGET_CAPTION.into()),
            origin_caption: Some(files::ORIGIN_CAPTION.into()),
            baseline_text: None,
        },
        baseline_scores: Some(files::BASELINE_SCORES.into()),
        metric_protocol: MetricProtocol::MultiTargetMap,
        queries: records,
    };
    Ok(SynthDataset {
        spec: *spec,
        manifest,
        sets,
    })
}

/// Largest gallery [`oracle_evaluate`] accepts.
pub const ORACLE_MAX_GALLERY: usize = 1000;

/// Brute-force reference metrics over a complete best-first ordering.
pub mod reference {
    /// 1-based position of the first ground-truth item, if any.
    pub fn first_hit(order: &[usize], ground_truth: &[usize]) -> Option<usize> {
        order
            .iter()
            .position(|i| ground_truth.contains(i))
            .map(|p| p + 1)
    }

    pub fn recall(order: &[usize], ground_truth: &[usize], k: usize) -> f64 {
        match first_hit(order, ground_truth) {
            Some(r) if r <= k => 1.0,
            _ => 0.0,
        }
    }

    pub fn average_precision(order: &[usize], ground_truth: &[usize], k: usize) -> f64 {
        let mut total = 0.0;
        for r in 1..=k.min(order.len()) {
            if !ground_truth.contains(&order[r - 1]) {
                continue;
            }
            let relevant_so_far = order[..r]
                .iter()
                .filter(|i| ground_truth.contains(i))
                .count();
            total += relevant_so_far as f64 / r as f64;
        }
        total / k.min(ground_truth.len()) as f64
    }

    /// Recall@k within `subset`, keeping the relative order of `order`.
    pub fn subset_recall(
        order: &[usize],
        subset: &[usize],
        ground_truth: &[usize],
        k: usize,
    ) -> f64 {
        let within: Vec<usize> = order
            .iter()
            .copied()
            .filter(|i| subset.contains(i))
            .collect();
        recall(&within, ground_truth, k)
    }

    /// Full ordering by descending score, ascending index on ties.
    pub fn full_order(scores: &[f64], exclude: &[usize]) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..scores.len()).filter(|i| !exclude.contains(i)).collect();
        idx.sort_by(|&a, &b| {
            if scores[a] > scores[b] {
                std::cmp::Ordering::Less
            } else if scores[a] < scores[b] {
                std::cmp::Ordering::Greater
            } else {
                a.cmp(&b)
            }
        });
        idx
    }
}

fn lookup(set: &EmbeddingSet, id: &str) -> Result<Vec<f64>> {
    let pos = set
        .ids()
        .iter()
        .position(|x| x == id)
        .ok_or_else(|| Error::Data(format!("oracle: unknown {} id {id:?}", set.role())))?;
    Ok(set.row(pos).iter().map(|&v| f64::from(v)).collect())
}

fn unit_or_zero(v: Vec<f64>) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n < 1e-12 {
        v
    } else {
        v.into_iter().map(|x| x / n).collect()
    }
}

fn mean_of_units(rows: Vec<Vec<f64>>, dim: usize) -> Vec<f64> {
    let n = rows.len() as f64;
    let mut acc = vec![0.0; dim];
    for r in rows {
        for (a, x) in acc.iter_mut().zip(unit_or_zero(r)) {
            *a += x;
        }
    }
    acc.into_iter().map(|a| a / n).collect()
}

fn max_abs(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

fn minmax_ref(v: &[f64]) -> Vec<f64> {
    let lo = v.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if hi == lo {
        vec![0.5; v.len()]
    } else {
        v.iter().map(|x| (x - lo) / (hi - lo)).collect()
    }
}

/// Re-evaluates mean-proxy fusion, balancing and every metric with plain f64
/// loops, full sorts and by-id lookups. Shares no scoring, ranking or metric
/// code with the engine.
pub fn oracle_evaluate(
    manifest: &DatasetManifest,
    sets: &SetBundle,
    lambda: f64,
    weights: &FusionWeights,
    normalization: Normalization,
    eval: &EvalConfig,
) -> Result<EvalReport> {
    let n_g = sets.gallery.len();
    if n_g > ORACLE_MAX_GALLERY {
        return Err(Error::Size(format!(
            "oracle accepts galleries up to {ORACLE_MAX_GALLERY}, got {n_g}"
        )));
    }
    let dim = sets.gallery.dim();
    let gallery: Vec<Vec<f64>> = (0..n_g)
        .map(|i| unit_or_zero(sets.gallery.row(i).iter().map(|&v| f64::from(v)).collect()))
        .collect();
    let cos = |q: &[f64]| -> Vec<f64> {
        gallery
            .iter()
            .map(|g| {
                let mut s = 0.0;
                for d in 0..dim {
                    s += q[d] * g[d];
                }
                s
            })
            .collect()
    };
    let gallery_pos = |id: &str| sets.gallery.ids().iter().position(|x| x == id);
    let (wq, ws, wp) = (
        f64::from(weights.query),
        f64::from(weights.perturbation),
        f64::from(weights.proxy),
    );

    let mut recall_sums = vec![0.0; eval.recall_ks.len()];
    let mut map_sums = vec![0.0; eval.map_ks.len()];
    let mut subset_sums = vec![0.0; eval.subset_ks.len()];
    let mut subset_queries = 0usize;

    for (pos, rec) in manifest.queries.iter().enumerate() {
        let rows = |set: &Option<EmbeddingSet>, ids: &[String]| -> Result<Vec<Vec<f64>>> {
            match set {
                Some(set) => ids.iter().map(|id| lookup(set, id)).collect(),
                None => Ok(Vec::new()),
            }
        };
        let targets = rows(&sets.target_caption, &rec.target_captions)?;
        let origins = rows(&sets.origin_caption, &rec.origin_captions)?;
        let proxies = rows(&sets.proxy_image, &rec.proxy_images)?;

        let text: Vec<f64> = if let Some(scores) = &sets.baseline_scores {
            let row = rec.baseline_row.unwrap_or(pos);
            scores.row(row).iter().map(|&v| f64::from(v)).collect()
        } else if let (Some(id), Some(set)) = (&rec.baseline_text, &sets.baseline_text) {
            cos(&unit_or_zero(lookup(set, id)?))
        } else {
            cos(&unit_or_zero(mean_of_units(targets.clone(), dim)))
        };

        let proxy: Vec<f64> = if proxies.is_empty() {
            text.clone()
        } else {
            let fp = mean_of_units(proxies, dim);
            let fq = unit_or_zero(lookup(&sets.query_image, &rec.query_image)?);
            let fs: Vec<f64> = if targets.is_empty() || origins.is_empty() {
                vec![0.0; dim]
            } else {
                let ft = mean_of_units(targets, dim);
                let fo = mean_of_units(origins, dim);
                (0..dim).map(|d| ft[d] - fo[d]).collect()
            };
            let ratio = |den: &[f64]| {
                let m = max_abs(den);
                if m < 1e-12 {
                    0.0
                } else {
                    max_abs(&fp) / m
                }
            };
            let (aq, as_) = (ratio(&fq), ratio(&fs));
            let rp: Vec<f64> = (0..dim)
                .map(|d| wp * fp[d] + wq * aq * fq[d] + ws * as_ * fs[d])
                .collect();
            cos(&unit_or_zero(rp))
        };

        let (t, p) = match normalization {
            Normalization::MinmaxPerQuery => (minmax_ref(&text), minmax_ref(&proxy)),
            Normalization::None => (text, proxy),
        };
        let fused: Vec<f64> = (0..n_g)
            .map(|i| lambda * t[i] + (1.0 - lambda) * t[i] * p[i])
            .collect();

        let exclude: Vec<usize> = rec
            .exclude
            .iter()
            .filter_map(|id| gallery_pos(id))
            .collect();
        let gt: Vec<usize> = rec
            .ground_truth
            .iter()
            .filter_map(|id| gallery_pos(id))
            .collect();
        let order = reference::full_order(&fused, &exclude);
        for (s, &k) in recall_sums.iter_mut().zip(&eval.recall_ks) {
            *s += reference::recall(&order, &gt, k);
        }
        for (s, &k) in map_sums.iter_mut().zip(&eval.map_ks) {
            *s += reference::average_precision(&order, &gt, k);
        }
        if let Some(subset) = &rec.subset {
            let subset: Vec<usize> = subset.iter().filter_map(|id| gallery_pos(id)).collect();
            let all = reference::full_order(&fused, &[]);
            subset_queries += 1;
            for (s, &k) in subset_sums.iter_mut().zip(&eval.subset_ks) {
                *s += reference::subset_recall(&all, &subset, &gt, k);
            }
        }
    }

    let n = manifest.queries.len() as f64;
    let mut metrics = Vec::new();
    for (s, &k) in recall_sums.iter().zip(&eval.recall_ks) {
        metrics.push(MetricValue {
            metric: Metric::Recall,
            k,
            value: s / n,
        });
    }
    for (s, &k) in map_sums.iter().zip(&eval.map_ks) {
        metrics.push(MetricValue {
            metric: Metric::Map,
            k,
            value: s / n,
        });
    }
    if subset_queries > 0 {
        for (s, &k) in subset_sums.iter().zip(&eval.subset_ks) {
            metrics.push(MetricValue {
                metric: Metric::SubsetRecall,
                k,
                value: s / subset_queries as f64,
            });
        }
    }
    Ok(EvalReport {
        dataset: manifest.name.clone(),
        num_queries: manifest.queries.len(),
        config: serde_json::json!({
            "oracle": true,
            "lambda": lambda,
            "weights": weights,
            "normalization": normalization,
        }),
        metrics,
        per_query: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(seed: u64) -> SynthSpec {
        SynthSpec::new(16, 300, 20, 0.7, 0.4, 3, seed)
    }

    #[test]
    fn deterministic_in_seed() {
        let a = generate(&small(5)).unwrap();
        let b = generate(&small(5)).unwrap();
        assert_eq!(a.sets.gallery, b.sets.gallery);
        assert_eq!(a.manifest, b.manifest);
        let c = generate(&small(6)).unwrap();
        assert_ne!(a.sets.gallery, c.sets.gallery);
    }

    #[test]
    fn resolves_with_subsets() {
        let d = generate(&small(1)).unwrap();
        let ds = d.resolve().unwrap();
        assert_eq!(ds.queries.len(), 20);
        assert_eq!(ds.gallery().len(), 300);
        for q in &ds.queries {
            assert_eq!(q.subset.as_ref().unwrap().len(), 6);
            assert_eq!(q.proxies.len(), 3);
        }
    }

    #[test]
    fn spec_validation() {
        let mut s = small(0);
        s.dim = 1;
        assert!(generate(&s).is_err());
        let mut s = small(0);
        s.gallery_size = 10;
        assert!(generate(&s).is_err());
        let mut s = small(0);
        s.edit_strength = 1.5;
        assert!(s.validate().is_err());
    }

    #[test]
    fn reference_metrics() {
        let order = [4, 2, 9, 1, 7];
        assert_eq!(reference::first_hit(&order, &[9, 7]), Some(3));
        assert_eq!(reference::recall(&order, &[9], 2), 0.0);
        assert!((reference::average_precision(&order, &[2, 7], 5) - 0.45).abs() < 1e-15);
        assert_eq!(reference::subset_recall(&order, &[9, 1, 7], &[9], 1), 1.0);
    }

    #[test]
    fn oracle_rejects_large_instances() {
        let d = generate(&SynthSpec::new(4, 1001, 2, 0.5, 0.1, 1, 0)).unwrap();
        let r = oracle_evaluate(
            &d.manifest,
            &d.sets,
            0.5,
            &FusionWeights::default(),
            Normalization::MinmaxPerQuery,
            &EvalConfig::for_protocol(MetricProtocol::MultiTargetMap),
        );
        assert!(matches!(r, Err(Error::Size(_))));
    }
}
