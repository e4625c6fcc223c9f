//! Embedding collections, the binary embedding-set file format, and dataset
//! manifests.
//!
//! Embedding set file layout (all integers little-endian):
//!
//! ```text
//! magic    4 bytes   "IPCE"
//! version  u32       1
//! role     u32       see [`Role`]
//! dim      u32
//! count    u64
//! ids      count NUL-terminated UTF-8 strings
//! payload  count * dim f32, row-major
//! ```

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::engine::ScoreMatrix;
use crate::error::{Error, Result};

pub const EMBEDDING_MAGIC: &[u8; 4] = b"IPCE";
pub const EMBEDDING_VERSION: u32 = 1;

/// Norms below this are treated as the zero vector.
pub const ZERO_NORM: f64 = 1e-12;

/// A single dense feature vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding {
    values: Vec<f32>,
}

impl Embedding {
    pub fn new(values: Vec<f32>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Shape("embedding must have dim >= 1".into()));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Data(format!(
                "embedding component {i} is not finite ({})",
                values[i]
            )));
        }
        Ok(Self { values })
    }

    pub fn zeros(dim: usize) -> Self {
        assert!(dim >= 1, "embedding must have dim >= 1");
        Self {
            values: vec![0.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f32> {
        self.values
    }

    pub fn norm(&self) -> f64 {
        norm(&self.values)
    }

    /// Largest absolute component.
    pub fn max_abs(&self) -> f32 {
        self.values.iter().fold(0.0f32, |m, v| m.max(v.abs()))
    }

    pub fn is_zero(&self) -> bool {
        self.norm() < ZERO_NORM
    }

    pub fn normalized(&self) -> Embedding {
        l2_normalize(self).embedding
    }
}

impl TryFrom<Vec<f32>> for Embedding {
    type Error = Error;

    fn try_from(values: Vec<f32>) -> Result<Self> {
        Embedding::new(values)
    }
}

/// Result of [`l2_normalize`]. `zero` is set when the input had (near) zero norm
/// and was returned unchanged.
#[derive(Debug, Clone, PartialEq)]
pub struct Normalized {
    pub embedding: Embedding,
    pub zero: bool,
}

pub(crate) fn norm(values: &[f32]) -> f64 {
    values
        .iter()
        .map(|&v| f64::from(v) * f64::from(v))
        .sum::<f64>()
        .sqrt()
}

pub(crate) fn normalize_in_place(values: &mut [f32]) -> (f64, bool) {
    let n = norm(values);
    if n < ZERO_NORM {
        return (n, true);
    }
    for v in values.iter_mut() {
        *v = (f64::from(*v) / n) as f32;
    }
    (n, false)
}

pub fn l2_normalize(e: &Embedding) -> Normalized {
    let mut values = e.values.clone();
    let (_, zero) = normalize_in_place(&mut values);
    Normalized {
        embedding: Embedding { values },
        zero,
    }
}

/// Componentwise arithmetic mean of the L2-normalized inputs.
///
/// Zero inputs contribute zero rather than failing.
pub fn mean_embedding(set: &[Embedding]) -> Result<Embedding> {
    let first = set
        .first()
        .ok_or_else(|| Error::Argument("mean_embedding of an empty list".into()))?;
    let dim = first.dim();
    let mut acc = vec![0.0f64; dim];
    for e in set {
        if e.dim() != dim {
            return Err(Error::Shape(format!(
                "mean_embedding over mixed dims {dim} and {}",
                e.dim()
            )));
        }
        let n = l2_normalize(e);
        for (a, &v) in acc.iter_mut().zip(n.embedding.values()) {
            *a += f64::from(v);
        }
    }
    let count = set.len() as f64;
    Ok(Embedding {
        values: acc.into_iter().map(|a| (a / count) as f32).collect(),
    })
}

/// What an embedding set holds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Gallery,
    QueryImage,
    ProxyImage,
    TargetCaption,
    OriginCaption,
    BaselineText,
}

impl Role {
    pub const ALL: [Role; 6] = [
        Role::Gallery,
        Role::QueryImage,
        Role::ProxyImage,
        Role::TargetCaption,
        Role::OriginCaption,
        Role::BaselineText,
    ];

    pub fn code(self) -> u32 {
        match self {
            Role::Gallery => 0,
            Role::QueryImage => 1,
            Role::ProxyImage => 2,
            Role::TargetCaption => 3,
            Role::OriginCaption => 4,
            Role::BaselineText => 5,
        }
    }

    pub fn from_code(code: u32) -> Option<Role> {
        Role::ALL.into_iter().find(|r| r.code() == code)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Role::Gallery => "gallery",
            Role::QueryImage => "query_image",
            Role::ProxyImage => "proxy_image",
            Role::TargetCaption => "target_caption",
            Role::OriginCaption => "origin_caption",
            Role::BaselineText => "baseline_text",
        }
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// A named, row-major matrix of embeddings sharing one role and one dim.
#[derive(Debug, Clone)]
pub struct EmbeddingSet {
    role: Role,
    dim: usize,
    ids: Vec<String>,
    matrix: Vec<f32>,
    index: HashMap<String, usize>,
    /// Row norms before normalization; `None` until [`EmbeddingSet::normalize_rows`].
    raw_norms: Option<Vec<f64>>,
}

impl PartialEq for EmbeddingSet {
    fn eq(&self, other: &Self) -> bool {
        self.role == other.role
            && self.dim == other.dim
            && self.ids == other.ids
            && self.matrix.len() == other.matrix.len()
            && self
                .matrix
                .iter()
                .zip(&other.matrix)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

impl EmbeddingSet {
    pub fn new(role: Role, dim: usize, ids: Vec<String>, matrix: Vec<f32>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Shape("embedding set dim must be >= 1".into()));
        }
        if matrix.len() != ids.len() * dim {
            return Err(Error::Shape(format!(
                "{role} set: {} ids x dim {dim} does not match {} values",
                ids.len(),
                matrix.len()
            )));
        }
        let mut index = HashMap::with_capacity(ids.len());
        for (i, id) in ids.iter().enumerate() {
            if id.contains('\0') {
                return Err(Error::Data(format!("{role} id {id:?} contains NUL")));
            }
            if index.insert(id.clone(), i).is_some() {
                return Err(Error::Data(format!("{role} set has duplicate id {id:?}")));
            }
        }
        for (i, row) in matrix.chunks_exact(dim).enumerate() {
            if row.iter().any(|v| !v.is_finite()) {
                return Err(Error::Data(format!(
                    "{role} row {i} (id {:?}) has a non-finite component",
                    ids[i]
                )));
            }
        }
        Ok(Self {
            role,
            dim,
            ids,
            matrix,
            index,
            raw_norms: None,
        })
    }

    pub fn from_embeddings(role: Role, items: Vec<(String, Embedding)>) -> Result<Self> {
        let dim = items
            .first()
            .map(|(_, e)| e.dim())
            .ok_or_else(|| Error::Argument("cannot infer dim of an empty set".into()))?;
        let mut ids = Vec::with_capacity(items.len());
        let mut matrix = Vec::with_capacity(items.len() * dim);
        for (id, e) in items {
            if e.dim() != dim {
                return Err(Error::Shape(format!(
                    "{role} id {id:?} has dim {} but set dim is {dim}",
                    e.dim()
                )));
            }
            ids.push(id);
            matrix.extend_from_slice(e.values());
        }
        Self::new(role, dim, ids, matrix)
    }

    pub fn role(&self) -> Role {
        self.role
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn matrix(&self) -> &[f32] {
        &self.matrix
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.matrix[i * self.dim..(i + 1) * self.dim]
    }

    pub fn embedding(&self, i: usize) -> Embedding {
        Embedding {
            values: self.row(i).to_vec(),
        }
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    pub fn is_normalized(&self) -> bool {
        self.raw_norms.is_some()
    }

    pub fn raw_norms(&self) -> Option<&[f64]> {
        self.raw_norms.as_deref()
    }

    /// L2-normalizes every row in place, remembering the original norms.
    /// Zero rows are left untouched. Calling twice is a no-op.
    pub fn normalize_rows(&mut self) {
        if self.raw_norms.is_some() {
            return;
        }
        let norms = self
            .matrix
            .chunks_exact_mut(self.dim)
            .map(|row| normalize_in_place(row).0)
            .collect();
        self.raw_norms = Some(norms);
    }

    pub fn stats(&self) -> SetStats {
        SetStats::compute(self)
    }
}

/// Summary statistics of a set's rows as stored on disk (before normalization).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SetStats {
    pub role: Role,
    pub count: usize,
    pub dim: usize,
    pub zero_rows: usize,
    pub norm_min: f64,
    pub norm_mean: f64,
    pub norm_max: f64,
    pub max_abs_min: f64,
    pub max_abs_mean: f64,
    pub max_abs_max: f64,
}

impl SetStats {
    fn compute(set: &EmbeddingSet) -> Self {
        let mut norms = Vec::with_capacity(set.len());
        let mut max_abs = Vec::with_capacity(set.len());
        for i in 0..set.len() {
            let row = set.row(i);
            let scale = set.raw_norms.as_ref().map_or(1.0, |n| n[i]);
            let n = set.raw_norms.as_ref().map_or_else(|| norm(row), |n| n[i]);
            let m = row.iter().fold(0.0f64, |m, v| m.max(f64::from(v.abs())));
            // normalized rows are rescaled back to their on-disk magnitude
            let m = if n < ZERO_NORM { m } else { m * scale };
            norms.push(n);
            max_abs.push(m);
        }
        let (norm_min, norm_mean, norm_max) = min_mean_max(&norms);
        let (max_abs_min, max_abs_mean, max_abs_max) = min_mean_max(&max_abs);
        SetStats {
            role: set.role,
            count: set.len(),
            dim: set.dim,
            zero_rows: norms.iter().filter(|&&n| n < ZERO_NORM).count(),
            norm_min,
            norm_mean,
            norm_max,
            max_abs_min,
            max_abs_mean,
            max_abs_max,
        }
    }
}

fn min_mean_max(xs: &[f64]) -> (f64, f64, f64) {
    if xs.is_empty() {
        return (0.0, 0.0, 0.0);
    }
    let min = xs.iter().copied().fold(f64::INFINITY, f64::min);
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    (min, xs.iter().sum::<f64>() / xs.len() as f64, max)
}

const PAYLOAD_CHUNK: usize = 1 << 20;

pub fn write_embedding_set(path: impl AsRef<Path>, set: &EmbeddingSet) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    write_embedding_set_to(&mut w, set).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_embedding_set_to<W: Write>(w: &mut W, set: &EmbeddingSet) -> std::io::Result<()> {
    w.write_all(EMBEDDING_MAGIC)?;
    w.write_all(&EMBEDDING_VERSION.to_le_bytes())?;
    w.write_all(&set.role.code().to_le_bytes())?;
    w.write_all(&(set.dim as u32).to_le_bytes())?;
    w.write_all(&(set.len() as u64).to_le_bytes())?;
    for id in &set.ids {
        w.write_all(id.as_bytes())?;
        w.write_all(&[0])?;
    }
    write_f32s(w, &set.matrix)
}

pub(crate) fn write_f32s<W: Write>(w: &mut W, values: &[f32]) -> std::io::Result<()> {
    let mut buf = Vec::with_capacity(PAYLOAD_CHUNK.min(values.len()) * 4);
    for chunk in values.chunks(PAYLOAD_CHUNK) {
        buf.clear();
        for v in chunk {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    Ok(())
}

pub(crate) fn read_f32s<R: Read>(r: &mut R, count: usize) -> std::io::Result<Vec<f32>> {
    let mut out = Vec::with_capacity(count);
    let mut buf = vec![0u8; PAYLOAD_CHUNK.min(count.max(1)) * 4];
    let mut remaining = count;
    while remaining > 0 {
        let n = remaining.min(PAYLOAD_CHUNK);
        let bytes = &mut buf[..n * 4];
        r.read_exact(bytes)?;
        out.extend(
            bytes
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])),
        );
        remaining -= n;
    }
    Ok(out)
}

fn read_u32<R: Read>(r: &mut R) -> std::io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> std::io::Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn truncated(what: &str, e: std::io::Error) -> Error {
    Error::Format(format!("truncated {what}: {e}"))
}

/// Loads and validates an embedding set. Rows are returned exactly as stored.
pub fn load_embedding_set(path: impl AsRef<Path>, expected_role: Role) -> Result<EmbeddingSet> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let set =
        read_embedding_set(&mut BufReader::with_capacity(1 << 16, file)).map_err(|e| match e {
            Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
            Error::Data(m) => Error::Data(format!("{}: {m}", path.display())),
            other => other,
        })?;
    if set.role != expected_role {
        return Err(Error::Role {
            expected: expected_role.to_string(),
            found: set.role.to_string(),
        });
    }
    Ok(set)
}

pub fn read_embedding_set<R: BufRead>(r: &mut R) -> Result<EmbeddingSet> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|e| truncated("header", e))?;
    if &magic != EMBEDDING_MAGIC {
        return Err(Error::Format(format!(
            "bad magic {magic:?}, expected \"IPCE\""
        )));
    }
    let version = read_u32(r).map_err(|e| truncated("header", e))?;
    if version != EMBEDDING_VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let role_code = read_u32(r).map_err(|e| truncated("header", e))?;
    let role = Role::from_code(role_code)
        .ok_or_else(|| Error::Format(format!("unknown role code {role_code}")))?;
    let dim = read_u32(r).map_err(|e| truncated("header", e))? as usize;
    let count = read_u64(r).map_err(|e| truncated("header", e))?;
    if dim == 0 {
        return Err(Error::Format("dim must be >= 1".into()));
    }
    let count = usize::try_from(count)
        .ok()
        .filter(|c| c.checked_mul(dim).is_some())
        .ok_or_else(|| Error::Format(format!("count {count} too large")))?;

    let mut ids = Vec::with_capacity(count.min(1 << 20));
    let mut raw = Vec::new();
    for i in 0..count {
        raw.clear();
        let n = r.read_until(0, &mut raw).map_err(|e| truncated("ids", e))?;
        if n == 0 || raw.last() != Some(&0) {
            return Err(Error::Format(format!("id {i} is not NUL-terminated")));
        }
        raw.pop();
        let id = String::from_utf8(raw.clone())
            .map_err(|_| Error::Format(format!("id {i} is not valid UTF-8")))?;
        ids.push(id);
    }
    let matrix = read_f32s(r, count * dim).map_err(|e| truncated("payload", e))?;
    let mut extra = [0u8; 1];
    if r.read(&mut extra).map_err(|e| truncated("payload", e))? != 0 {
        return Err(Error::Format("trailing bytes after payload".into()));
    }
    EmbeddingSet::new(role, dim, ids, matrix)
}

/// Which metrics a dataset is evaluated with by default.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricProtocol {
    MultiTargetMap,
    SingleTargetRecall,
    SubsetRecall,
    RecallOnly,
}

/// One retrieval query: references into the embedding sets plus ground truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryRecord {
    pub query_id: String,
    pub query_image: String,
    #[serde(default)]
    pub proxy_images: Vec<String>,
    #[serde(default)]
    pub target_captions: Vec<String>,
    #[serde(default)]
    pub origin_captions: Vec<String>,
    /// Id in the `baseline_text` set used as the text-side query instead of the
    /// aggregated target captions.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub baseline_text: Option<String>,
    /// Row of the manifest's baseline score file holding this query's S_t.
    /// Defaults to the record's position when a score file is present.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub baseline_row: Option<usize>,
    pub ground_truth: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub subset: Option<Vec<String>>,
    /// Gallery ids removed from this query's ranking (e.g. the query image itself).
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub exclude: Vec<String>,
}

/// Paths of the non-gallery embedding sets, relative to the manifest file.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SetPaths {
    pub query_image: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub proxy_image: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_caption: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub origin_caption: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub baseline_text: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub name: String,
    pub gallery: PathBuf,
    pub sets: SetPaths,
    /// Optional externally computed S_t matrix ("IPCS" file).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub baseline_scores: Option<PathBuf>,
    pub metric_protocol: MetricProtocol,
    pub queries: Vec<QueryRecord>,
}

impl DatasetManifest {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Format(format!("manifest: {e}")))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes")
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json() + "\n").map_err(|e| Error::io(path, e))
    }
}

/// Every set a manifest may reference, already in memory.
#[derive(Debug, Clone)]
pub struct SetBundle {
    pub gallery: EmbeddingSet,
    pub query_image: EmbeddingSet,
    pub proxy_image: Option<EmbeddingSet>,
    pub target_caption: Option<EmbeddingSet>,
    pub origin_caption: Option<EmbeddingSet>,
    pub baseline_text: Option<EmbeddingSet>,
    pub baseline_scores: Option<ScoreMatrix>,
}

impl SetBundle {
    /// Loads every file named by `manifest`, resolving paths against `base_dir`.
    pub fn load(manifest: &DatasetManifest, base_dir: &Path) -> Result<Self> {
        let p = |rel: &Path| base_dir.join(rel);
        let opt = |rel: &Option<PathBuf>, role| -> Result<Option<EmbeddingSet>> {
            rel.as_ref()
                .map(|r| load_embedding_set(p(r), role))
                .transpose()
        };
        Ok(SetBundle {
            gallery: load_embedding_set(p(&manifest.gallery), Role::Gallery)?,
            query_image: load_embedding_set(p(&manifest.sets.query_image), Role::QueryImage)?,
            proxy_image: opt(&manifest.sets.proxy_image, Role::ProxyImage)?,
            target_caption: opt(&manifest.sets.target_caption, Role::TargetCaption)?,
            origin_caption: opt(&manifest.sets.origin_caption, Role::OriginCaption)?,
            baseline_text: opt(&manifest.sets.baseline_text, Role::BaselineText)?,
            baseline_scores: manifest
                .baseline_scores
                .as_ref()
                .map(|r| ScoreMatrix::read(p(r)))
                .transpose()?,
        })
    }

    fn sets(&self) -> impl Iterator<Item = &EmbeddingSet> {
        [
            Some(&self.gallery),
            Some(&self.query_image),
            self.proxy_image.as_ref(),
            self.target_caption.as_ref(),
            self.origin_caption.as_ref(),
            self.baseline_text.as_ref(),
        ]
        .into_iter()
        .flatten()
    }
}

/// A query with every reference replaced by a row index.
#[derive(Debug, Clone, PartialEq)]
pub struct ResolvedQuery {
    pub query_id: String,
    pub query_image: usize,
    pub proxies: Vec<usize>,
    pub target_captions: Vec<usize>,
    pub origin_captions: Vec<usize>,
    pub baseline_text: Option<usize>,
    pub baseline_row: Option<usize>,
    /// Gallery indices, sorted and deduplicated.
    pub ground_truth: Vec<usize>,
    pub subset: Option<Vec<usize>>,
    pub exclude: Vec<usize>,
}

/// A manifest whose references all resolve, with normalized sets. Immutable.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub name: String,
    pub protocol: MetricProtocol,
    pub dim: usize,
    pub sets: SetBundle,
    pub queries: Vec<ResolvedQuery>,
    /// Statistics of every loaded set as stored on disk.
    pub stats: Vec<SetStats>,
}

impl Dataset {
    pub fn gallery(&self) -> &EmbeddingSet {
        &self.sets.gallery
    }

    pub fn gallery_ids(&self) -> &[String] {
        self.sets.gallery.ids()
    }
}

/// Reads a manifest file, loads every set it references (relative to the
/// manifest's directory) and resolves it.
pub fn resolve_manifest_file(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let manifest = DatasetManifest::read(path)?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    let bundle = SetBundle::load(&manifest, base)?;
    resolve_manifest(&manifest, bundle)
}

/// Resolves every id reference of `manifest` against `sets`, enforces one
/// shared dim, and L2-normalizes all rows.
pub fn resolve_manifest(manifest: &DatasetManifest, mut sets: SetBundle) -> Result<Dataset> {
    let dim = sets.gallery.dim();
    for s in sets.sets() {
        if s.dim() != dim {
            return Err(Error::Shape(format!(
                "{} set has dim {} but gallery has dim {dim}",
                s.role(),
                s.dim()
            )));
        }
    }
    if let Some(scores) = &sets.baseline_scores {
        if scores.gallery_count() != sets.gallery.len() {
            return Err(Error::Shape(format!(
                "baseline scores cover {} gallery items, gallery has {}",
                scores.gallery_count(),
                sets.gallery.len()
            )));
        }
    }

    let mut seen = HashSet::new();
    let mut queries = Vec::with_capacity(manifest.queries.len());
    for (pos, rec) in manifest.queries.iter().enumerate() {
        if !seen.insert(rec.query_id.as_str()) {
            return Err(Error::Data(format!(
                "duplicate query id {:?}",
                rec.query_id
            )));
        }
        queries.push(resolve_record(pos, rec, &sets)?);
    }

    let stats = sets.sets().map(EmbeddingSet::stats).collect();
    for s in [
        Some(&mut sets.gallery),
        Some(&mut sets.query_image),
        sets.proxy_image.as_mut(),
        sets.target_caption.as_mut(),
        sets.origin_caption.as_mut(),
        sets.baseline_text.as_mut(),
    ]
    .into_iter()
    .flatten()
    {
        s.normalize_rows();
    }

    Ok(Dataset {
        name: manifest.name.clone(),
        protocol: manifest.metric_protocol,
        dim,
        sets,
        queries,
        stats,
    })
}

fn resolve_record(pos: usize, rec: &QueryRecord, sets: &SetBundle) -> Result<ResolvedQuery> {
    let qid = &rec.query_id;
    let lookup = |set: Option<&EmbeddingSet>, role: Role, id: &str| -> Result<usize> {
        set.and_then(|s| s.position(id))
            .ok_or_else(|| Error::Resolution {
                query_id: qid.clone(),
                role: role.to_string(),
                id: id.to_string(),
            })
    };
    let many = |set: Option<&EmbeddingSet>, role: Role, ids: &[String]| -> Result<Vec<usize>> {
        ids.iter().map(|id| lookup(set, role, id)).collect()
    };
    let gallery = Some(&sets.gallery);

    let query_image = lookup(Some(&sets.query_image), Role::QueryImage, &rec.query_image)?;
    let proxies = many(
        sets.proxy_image.as_ref(),
        Role::ProxyImage,
        &rec.proxy_images,
    )?;
    let target_captions = many(
        sets.target_caption.as_ref(),
        Role::TargetCaption,
        &rec.target_captions,
    )?;
    let origin_captions = many(
        sets.origin_caption.as_ref(),
        Role::OriginCaption,
        &rec.origin_captions,
    )?;
    let baseline_text = rec
        .baseline_text
        .as_deref()
        .map(|id| lookup(sets.baseline_text.as_ref(), Role::BaselineText, id))
        .transpose()?;

    let baseline_row = match &sets.baseline_scores {
        Some(scores) => {
            let row = rec.baseline_row.unwrap_or(pos);
            if row >= scores.query_count() {
                return Err(Error::Resolution {
                    query_id: qid.clone(),
                    role: "baseline_scores row".into(),
                    id: row.to_string(),
                });
            }
            Some(row)
        }
        None => None,
    };
    if baseline_row.is_none() && baseline_text.is_none() && target_captions.is_empty() {
        return Err(Error::Data(format!(
            "query {qid:?} has no text-side source (baseline scores, baseline text or target captions)"
        )));
    }

    if rec.ground_truth.is_empty() {
        return Err(Error::Protocol(format!(
            "query {qid:?} has empty ground truth"
        )));
    }
    let mut ground_truth = many(gallery, Role::Gallery, &rec.ground_truth)?;
    ground_truth.sort_unstable();
    ground_truth.dedup();

    let subset = match &rec.subset {
        Some(ids) => {
            let mut idx = many(gallery, Role::Gallery, ids)?;
            let before = idx.len();
            idx.sort_unstable();
            idx.dedup();
            if idx.len() != before {
                return Err(Error::Data(format!("query {qid:?} subset repeats an id")));
            }
            if let Some(g) = ground_truth.iter().find(|g| idx.binary_search(g).is_err()) {
                return Err(Error::Protocol(format!(
                    "query {qid:?}: ground truth {:?} is not in its subset",
                    sets.gallery.ids()[*g]
                )));
            }
            Some(idx)
        }
        None => None,
    };
    let mut exclude = many(gallery, Role::Gallery, &rec.exclude)?;
    exclude.sort_unstable();
    exclude.dedup();

    Ok(ResolvedQuery {
        query_id: qid.clone(),
        query_image,
        proxies,
        target_captions,
        origin_captions,
        baseline_text,
        baseline_row,
        ground_truth,
        subset,
        exclude,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn emb(v: &[f32]) -> Embedding {
        Embedding::new(v.to_vec()).unwrap()
    }

    #[test]
    fn normalize_three_four_five() {
        let n = l2_normalize(&emb(&[3.0, 4.0]));
        assert!(!n.zero);
        assert_eq!(n.embedding.values(), &[0.6, 0.8]);
    }

    #[test]
    fn normalize_zero_is_flagged() {
        let n = l2_normalize(&emb(&[0.0, 0.0]));
        assert!(n.zero);
        assert_eq!(n.embedding.values(), &[0.0, 0.0]);
    }

    #[test]
    fn embedding_rejects_nan_and_empty() {
        assert!(matches!(Embedding::new(vec![]), Err(Error::Shape(_))));
        assert!(matches!(
            Embedding::new(vec![1.0, f32::NAN]),
            Err(Error::Data(_))
        ));
        assert!(matches!(
            Embedding::new(vec![f32::INFINITY]),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn mean_of_axes() {
        let m = mean_embedding(&[emb(&[1.0, 0.0]), emb(&[0.0, 1.0])]).unwrap();
        assert_eq!(m.values(), &[0.5, 0.5]);
    }

    #[test]
    fn mean_of_singleton_is_normalized() {
        let v = emb(&[2.0, -1.0, 0.5]);
        assert_eq!(
            mean_embedding(&[v.clone()]).unwrap(),
            l2_normalize(&v).embedding
        );
    }

    #[test]
    fn mean_errors() {
        assert!(matches!(mean_embedding(&[]), Err(Error::Argument(_))));
        assert!(matches!(
            mean_embedding(&[emb(&[1.0]), emb(&[1.0, 2.0])]),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn minimal_file_loads() {
        let mut bytes = Vec::new();
        bytes.extend_from_slice(b"IPCE");
        bytes.extend_from_slice(&1u32.to_le_bytes());
        bytes.extend_from_slice(&0u32.to_le_bytes());
        bytes.extend_from_slice(&4u32.to_le_bytes());
        bytes.extend_from_slice(&2u64.to_le_bytes());
        bytes.extend_from_slice(b"a\0b\0");
        for v in 0..8 {
            bytes.extend_from_slice(&(v as f32).to_le_bytes());
        }
        let set = read_embedding_set(&mut bytes.as_slice()).unwrap();
        assert_eq!((set.len(), set.dim()), (2, 4));
        assert_eq!(set.row(1), &[4.0, 5.0, 6.0, 7.0]);
        assert_eq!(set.position("b"), Some(1));
    }

    #[test]
    fn nan_row_names_id() {
        let set = EmbeddingSet::new(Role::Gallery, 2, vec!["x".into(), "y".into()], vec![0.0; 4])
            .unwrap();
        let mut bytes = Vec::new();
        write_embedding_set_to(&mut bytes, &set).unwrap();
        let n = bytes.len();
        bytes[n - 4..].copy_from_slice(&f32::NAN.to_le_bytes());
        let err = read_embedding_set(&mut bytes.as_slice()).unwrap_err();
        assert!(
            matches!(&err, Error::Data(m) if m.contains("\"y\"")),
            "{err}"
        );
    }

    #[test]
    fn malformed_headers() {
        assert!(matches!(
            read_embedding_set(&mut &b"IPCX\x01\0\0\0"[..]),
            Err(Error::Format(_))
        ));
        assert!(matches!(
            read_embedding_set(&mut &b"IPC"[..]),
            Err(Error::Format(_))
        ));
        let set = EmbeddingSet::new(Role::Gallery, 1, vec!["x".into()], vec![1.0]).unwrap();
        let mut bytes = Vec::new();
        write_embedding_set_to(&mut bytes, &set).unwrap();
        bytes.pop();
        assert!(matches!(
            read_embedding_set(&mut bytes.as_slice()),
            Err(Error::Format(_))
        ));
        bytes.extend_from_slice(&[0, 0, 0x80, 0x3f, 7]);
        assert!(matches!(
            read_embedding_set(&mut bytes.as_slice()),
            Err(Error::Format(_))
        ));
    }

    #[test]
    fn role_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("g.ipce");
        let set = EmbeddingSet::new(Role::Gallery, 1, vec!["x".into()], vec![1.0]).unwrap();
        write_embedding_set(&path, &set).unwrap();
        assert!(matches!(
            load_embedding_set(&path, Role::ProxyImage),
            Err(Error::Role { .. })
        ));
        assert_eq!(load_embedding_set(&path, Role::Gallery).unwrap(), set);
    }

    #[test]
    fn duplicate_ids_rejected() {
        let r = EmbeddingSet::new(
            Role::Gallery,
            1,
            vec!["x".into(), "x".into()],
            vec![1.0, 2.0],
        );
        assert!(matches!(r, Err(Error::Data(_))));
    }

    fn tiny_bundle() -> (DatasetManifest, SetBundle) {
        let set = |role, ids: &[&str], dim: usize| {
            let n = ids.len();
            EmbeddingSet::new(
                role,
                dim,
                ids.iter().map(|s| s.to_string()).collect(),
                (0..n * dim).map(|i| i as f32 + 1.0).collect(),
            )
            .unwrap()
        };
        let manifest = DatasetManifest {
            name: "tiny".into(),
            gallery: "g".into(),
            sets: SetPaths::default(),
            baseline_scores: None,
            metric_protocol: MetricProtocol::SingleTargetRecall,
            queries: vec![QueryRecord {
                query_id: "q0".into(),
                query_image: "qi".into(),
                proxy_images: vec!["p0".into()],
                target_captions: vec!["t0".into()],
                origin_captions: vec!["o0".into()],
                baseline_text: None,
                baseline_row: None,
                ground_truth: vec!["g1".into()],
                subset: Some(vec!["g0".into(), "g1".into()]),
                exclude: vec![],
            }],
        };
        let bundle = SetBundle {
            gallery: set(Role::Gallery, &["g0", "g1", "g2"], 3),
            query_image: set(Role::QueryImage, &["qi"], 3),
            proxy_image: Some(set(Role::ProxyImage, &["p0"], 3)),
            target_caption: Some(set(Role::TargetCaption, &["t0"], 3)),
            origin_caption: Some(set(Role::OriginCaption, &["o0"], 3)),
            baseline_text: None,
            baseline_scores: None,
        };
        (manifest, bundle)
    }

    #[test]
    fn resolves_and_normalizes() {
        let (m, b) = tiny_bundle();
        let ds = resolve_manifest(&m, b).unwrap();
        assert_eq!(ds.queries[0].ground_truth, vec![1]);
        assert_eq!(ds.queries[0].subset, Some(vec![0, 1]));
        for i in 0..3 {
            assert!((norm(ds.gallery().row(i)) - 1.0).abs() < 1e-6);
        }
        assert_eq!(ds.stats.len(), 5);
    }

    #[test]
    fn dangling_and_shape_errors() {
        let (mut m, b) = tiny_bundle();
        m.queries[0].proxy_images.push("nope".into());
        assert!(matches!(
            resolve_manifest(&m, b.clone()),
            Err(Error::Resolution { ref id, .. }) if id == "nope"
        ));

        let (m, mut b) = tiny_bundle();
        b.query_image =
            EmbeddingSet::new(Role::QueryImage, 2, vec!["qi".into()], vec![1.0, 0.0]).unwrap();
        assert!(matches!(resolve_manifest(&m, b), Err(Error::Shape(_))));

        let (mut m, b) = tiny_bundle();
        m.queries[0].subset = Some(vec!["g0".into(), "g2".into()]);
        assert!(matches!(resolve_manifest(&m, b), Err(Error::Protocol(_))));

        let (mut m, b) = tiny_bundle();
        m.queries[0].ground_truth.clear();
        assert!(matches!(resolve_manifest(&m, b), Err(Error::Protocol(_))));
    }

    #[test]
    fn manifest_json_round_trip() {
        let (m, _) = tiny_bundle();
        assert_eq!(DatasetManifest::from_json(&m.to_json()).unwrap(), m);
    }
}
