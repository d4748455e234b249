//! Shared domain records and their on-disk formats.
//!
//! Episodes, demonstrations, scene metadata and shot curves are stored as
//! JSONL, one record per line. Embeddings come either as JSONL or as the
//! `UIEB` binary container (see [`write_embeddings_binary`]).

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::str::FromStr;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Default upper bound on the number of shots in an episode.
pub const DEFAULT_MAX_SHOTS: usize = 8;

/// Magic bytes of the binary embedding container.
pub const UIEB_MAGIC: &[u8; 4] = b"UIEB";
pub const UIEB_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum RecordError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: parse error: {message}")]
    Parse { line: usize, message: String },
    #[error("line {line}: {source}")]
    Invalid {
        line: usize,
        #[source]
        source: ValidationError,
    },
    #[error("line {line}: duplicate id {id:?}")]
    DuplicateId { line: usize, id: String },
    #[error("binary embeddings: {0}")]
    Binary(String),
}

/// An invariant violation, located by a field path such as `shots[3].id`.
#[derive(Debug, Clone, PartialEq, Error)]
#[error("{field}: {message}")]
pub struct ValidationError {
    pub field: String,
    pub message: String,
}

impl ValidationError {
    pub fn new(field: impl Into<String>, message: impl Into<String>) -> Self {
        Self {
            field: field.into(),
            message: message.into(),
        }
    }

    fn nested(self, prefix: &str) -> Self {
        Self {
            field: format!("{prefix}.{}", self.field),
            message: self.message,
        }
    }
}

// ---------------------------------------------------------------------------
// Taxonomy
// ---------------------------------------------------------------------------

/// The six capability levels, in reporting order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Taxonomy {
    Perception,
    Imitation,
    Conception,
    Deduction,
    Analogy,
    Discernment,
}

impl Taxonomy {
    pub const ALL: [Taxonomy; 6] = [
        Taxonomy::Perception,
        Taxonomy::Imitation,
        Taxonomy::Conception,
        Taxonomy::Deduction,
        Taxonomy::Analogy,
        Taxonomy::Discernment,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Taxonomy::Perception => "Perception",
            Taxonomy::Imitation => "Imitation",
            Taxonomy::Conception => "Conception",
            Taxonomy::Deduction => "Deduction",
            Taxonomy::Analogy => "Analogy",
            Taxonomy::Discernment => "Discernment",
        }
    }
}

impl fmt::Display for Taxonomy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Taxonomy {
    type Err = ValidationError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Taxonomy::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| ValidationError::new("taxonomy", format!("unknown taxonomy {s:?}")))
    }
}

/// The fifteen canonical subtasks and the level each belongs to.
pub const CANONICAL_SUBTASKS: [(&str, Taxonomy); 15] = [
    ("Visual Grounding", Taxonomy::Perception),
    ("Attribute Recognition", Taxonomy::Perception),
    ("Image Manipulation", Taxonomy::Perception),
    ("Style-Aware Caption", Taxonomy::Imitation),
    ("Scene Reasoning", Taxonomy::Imitation),
    ("Instructional Generation", Taxonomy::Imitation),
    ("Fast Concept Mapping", Taxonomy::Conception),
    ("Fast Concept Generation", Taxonomy::Conception),
    ("World-Aware Planning", Taxonomy::Deduction),
    ("Chain-of-Editing", Taxonomy::Deduction),
    ("Analogical Inference", Taxonomy::Analogy),
    ("Analogical Editing", Taxonomy::Analogy),
    ("Aesthetic Assessment", Taxonomy::Discernment),
    ("Forgery Detection", Taxonomy::Discernment),
    ("Visual Refinement", Taxonomy::Discernment),
];

/// Level of a canonical subtask, `None` for extension subtasks.
pub fn canonical_taxonomy(subtask: &str) -> Option<Taxonomy> {
    CANONICAL_SUBTASKS
        .iter()
        .find(|(name, _)| *name == subtask)
        .map(|&(_, t)| t)
}

// ---------------------------------------------------------------------------
// Demonstrations and episodes
// ---------------------------------------------------------------------------

/// Target of a demonstration: either a textual answer or an opaque image reference.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum Output {
    Text(String),
    ImageRef(String),
}

/// A `(visual input, instruction, output)` triplet.
///
/// A text-only demonstration has no `image_ref` at all; an empty string is
/// rejected rather than treated as "no image".
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Demonstration {
    pub id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_ref: Option<String>,
    #[serde(default)]
    pub instruction: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output: Option<Output>,
}

impl Demonstration {
    pub fn validate(&self) -> Result<(), ValidationError> {
        if self.id.is_empty() {
            return Err(ValidationError::new("id", "must be non-empty"));
        }
        if self.image_ref.as_deref() == Some("") {
            return Err(ValidationError::new(
                "image_ref",
                "empty string; omit the field for text-only inputs",
            ));
        }
        if self.image_ref.is_none() && self.instruction.is_empty() {
            return Err(ValidationError::new(
                "instruction",
                "either image_ref or instruction must be present",
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Episode {
    pub episode_id: String,
    pub taxonomy: Taxonomy,
    pub subtask: String,
    pub shots: Vec<Demonstration>,
    pub query: Demonstration,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gold: Option<Output>,
}

impl Episode {
    pub fn k(&self) -> usize {
        self.shots.len()
    }

    /// Checks every episode invariant with the given shot bound.
    pub fn validate(&self, max_shots: usize) -> Result<(), ValidationError> {
        if self.episode_id.is_empty() {
            return Err(ValidationError::new("episode_id", "must be non-empty"));
        }
        if self.shots.len() > max_shots {
            return Err(ValidationError::new(
                "shots",
                format!(
                    "shot count out of range ({} > {max_shots})",
                    self.shots.len()
                ),
            ));
        }
        if let Some(expected) = canonical_taxonomy(&self.subtask) {
            if expected != self.taxonomy {
                return Err(ValidationError::new(
                    "taxonomy",
                    format!(
                        "subtask {:?} belongs to {expected}, not {}",
                        self.subtask, self.taxonomy
                    ),
                ));
            }
        }
        let mut seen = HashSet::new();
        for (i, shot) in self.shots.iter().enumerate() {
            let prefix = format!("shots[{i}]");
            shot.validate().map_err(|e| e.nested(&prefix))?;
            if shot.output.is_none() {
                return Err(ValidationError::new(
                    format!("{prefix}.output"),
                    "demonstration output is required",
                ));
            }
            if !seen.insert(shot.id.as_str()) {
                return Err(ValidationError::new(
                    format!("{prefix}.id"),
                    format!("duplicate demonstration id {:?}", shot.id),
                ));
            }
        }
        self.query.validate().map_err(|e| e.nested("query"))?;
        if self.query.output.is_some() {
            return Err(ValidationError::new(
                "query.output",
                "query output must be absent",
            ));
        }
        if seen.contains(self.query.id.as_str()) {
            return Err(ValidationError::new(
                "query.id",
                format!("query id {:?} also appears among the shots", self.query.id),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EpisodeLoadOptions {
    pub max_shots: usize,
}

impl Default for EpisodeLoadOptions {
    fn default() -> Self {
        Self {
            max_shots: DEFAULT_MAX_SHOTS,
        }
    }
}

// ---------------------------------------------------------------------------
// JSONL plumbing
// ---------------------------------------------------------------------------

/// Parses every non-blank line of `reader` as one `T`. Line numbers are 1-based.
pub fn read_jsonl<T, R>(reader: R) -> Result<Vec<(usize, T)>, RecordError>
where
    T: DeserializeOwned,
    R: BufRead,
{
    let mut out = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|e| RecordError::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let value = serde_json::from_str(&line).map_err(|e| RecordError::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        out.push((line_no, value));
    }
    Ok(out)
}

/// Writes one compact JSON object per line.
pub fn write_jsonl<T: Serialize, W: Write>(mut writer: W, records: &[T]) -> std::io::Result<()> {
    for r in records {
        serde_json::to_writer(&mut writer, r)?;
        writer.write_all(b"\n")?;
    }
    writer.flush()
}

fn open(path: &Path) -> Result<BufReader<File>, RecordError> {
    Ok(BufReader::new(File::open(path)?))
}

fn create(path: &Path) -> Result<BufWriter<File>, RecordError> {
    Ok(BufWriter::new(File::create(path)?))
}

// ---------------------------------------------------------------------------
// Episode IO
// ---------------------------------------------------------------------------

pub fn parse_episodes<R: BufRead>(
    reader: R,
    opts: EpisodeLoadOptions,
) -> Result<Vec<Episode>, RecordError> {
    let records: Vec<(usize, Episode)> = read_jsonl(reader)?;
    let mut seen = HashSet::new();
    let mut out = Vec::with_capacity(records.len());
    for (line, ep) in records {
        ep.validate(opts.max_shots)
            .map_err(|source| RecordError::Invalid { line, source })?;
        if canonical_taxonomy(&ep.subtask).is_none() {
            log::warn!(
                "line {line}: subtask {:?} is not one of the canonical subtasks",
                ep.subtask
            );
        }
        if !seen.insert(ep.episode_id.clone()) {
            return Err(RecordError::DuplicateId {
                line,
                id: ep.episode_id,
            });
        }
        out.push(ep);
    }
    Ok(out)
}

pub fn load_episodes(path: &Path) -> Result<Vec<Episode>, RecordError> {
    load_episodes_with(path, EpisodeLoadOptions::default())
}

pub fn load_episodes_with(
    path: &Path,
    opts: EpisodeLoadOptions,
) -> Result<Vec<Episode>, RecordError> {
    parse_episodes(open(path)?, opts)
}

pub fn save_episodes(path: &Path, episodes: &[Episode]) -> Result<(), RecordError> {
    write_jsonl(create(path)?, episodes)?;
    Ok(())
}

/// Loads a demonstration pool (one [`Demonstration`] per line, ids unique).
pub fn load_demonstrations(path: &Path) -> Result<Vec<Demonstration>, RecordError> {
    let records: Vec<(usize, Demonstration)> = read_jsonl(open(path)?)?;
    let mut seen = HashSet::new();
    let mut out = Vec::with_capacity(records.len());
    for (line, d) in records {
        d.validate()
            .map_err(|source| RecordError::Invalid { line, source })?;
        if !seen.insert(d.id.clone()) {
            return Err(RecordError::DuplicateId { line, id: d.id });
        }
        out.push(d);
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Embeddings
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Visual,
    Text,
}

impl Modality {
    pub fn as_str(self) -> &'static str {
        match self {
            Modality::Visual => "visual",
            Modality::Text => "text",
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Modality {
    type Err = ValidationError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "visual" => Ok(Modality::Visual),
            "text" => Ok(Modality::Text),
            other => Err(ValidationError::new(
                "modality",
                format!("unknown modality {other:?}"),
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmbeddingRecord {
    pub id: String,
    pub modality: Modality,
    pub dim: usize,
    pub values: Vec<f64>,
}

impl EmbeddingRecord {
    pub fn new(id: impl Into<String>, modality: Modality, values: Vec<f64>) -> Self {
        Self {
            id: id.into(),
            modality,
            dim: values.len(),
            values,
        }
    }

    pub fn validate(&self) -> Result<(), ValidationError> {
        if self.id.is_empty() {
            return Err(ValidationError::new("id", "must be non-empty"));
        }
        if self.dim == 0 {
            return Err(ValidationError::new("dim", "must be at least 1"));
        }
        if self.values.len() != self.dim {
            return Err(ValidationError::new(
                "values",
                format!(
                    "dimension mismatch: dim is {} but {} values given",
                    self.dim,
                    self.values.len()
                ),
            ));
        }
        if let Some(i) = self.values.iter().position(|v| !v.is_finite()) {
            return Err(ValidationError::new(
                format!("values[{i}]"),
                "non-finite value",
            ));
        }
        Ok(())
    }

    pub fn norm(&self) -> f64 {
        crate::linalg::norm(&self.values)
    }

    /// Scales to unit Euclidean norm.
    pub fn normalize(&mut self) -> Result<(), ValidationError> {
        let n = self.norm();
        if n == 0.0 {
            return Err(ValidationError::new("values", "zero-norm vector"));
        }
        self.values.iter_mut().for_each(|v| *v /= n);
        Ok(())
    }
}

/// Embeddings keyed by `(modality, id)`. Dimensions are fixed per modality by
/// the first inserted record.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EmbeddingStore {
    visual: BTreeMap<String, EmbeddingRecord>,
    text: BTreeMap<String, EmbeddingRecord>,
}

impl EmbeddingStore {
    pub fn new() -> Self {
        Self::default()
    }

    fn map(&self, m: Modality) -> &BTreeMap<String, EmbeddingRecord> {
        match m {
            Modality::Visual => &self.visual,
            Modality::Text => &self.text,
        }
    }

    pub fn dim(&self, m: Modality) -> Option<usize> {
        self.map(m).values().next().map(|r| r.dim)
    }

    pub fn insert(&mut self, mut record: EmbeddingRecord, normalize: bool) -> Result<(), ValidationError> {
        record.validate()?;
        if let Some(d) = self.dim(record.modality) {
            if d != record.dim {
                return Err(ValidationError::new(
                    "dim",
                    format!(
                        "dimension mismatch: {} embeddings have dim {d}, got {}",
                        record.modality, record.dim
                    ),
                ));
            }
        }
        if normalize {
            record.normalize()?;
        }
        let map = match record.modality {
            Modality::Visual => &mut self.visual,
            Modality::Text => &mut self.text,
        };
        if map.contains_key(&record.id) {
            return Err(ValidationError::new(
                "id",
                format!("duplicate id {:?}", record.id),
            ));
        }
        map.insert(record.id.clone(), record);
        Ok(())
    }

    pub fn get(&self, m: Modality, id: &str) -> Option<&EmbeddingRecord> {
        self.map(m).get(id)
    }

    /// Ids of one modality in ascending order.
    pub fn ids(&self, m: Modality) -> impl Iterator<Item = &str> {
        self.map(m).keys().map(String::as_str)
    }

    pub fn records(&self, m: Modality) -> impl Iterator<Item = &EmbeddingRecord> {
        self.map(m).values()
    }

    pub fn len(&self) -> usize {
        self.visual.len() + self.text.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn insert_located(
    store: &mut EmbeddingStore,
    line: usize,
    record: EmbeddingRecord,
    normalize: bool,
) -> Result<(), RecordError> {
    let id = record.id.clone();
    store.insert(record, normalize).map_err(|source| {
        if source.field == "id" && source.message.starts_with("duplicate") {
            RecordError::DuplicateId { line, id }
        } else {
            RecordError::Invalid { line, source }
        }
    })
}

/// Reads embeddings from `reader` into `store`. Binary containers are
/// recognised by their magic bytes and need `binary_modality`, since the
/// container itself carries no modality tag.
pub fn read_embeddings<R: Read>(
    reader: R,
    binary_modality: Option<Modality>,
    normalize: bool,
    store: &mut EmbeddingStore,
) -> Result<(), RecordError> {
    let mut reader = BufReader::new(reader);
    let is_binary = reader.fill_buf()?.starts_with(UIEB_MAGIC);
    if is_binary {
        let modality = binary_modality.ok_or_else(|| {
            RecordError::Binary("binary container needs an explicit modality".into())
        })?;
        for (idx, (id, values)) in read_embeddings_binary(reader)?.into_iter().enumerate() {
            insert_located(
                store,
                idx + 1,
                EmbeddingRecord::new(id, modality, values),
                normalize,
            )?;
        }
    } else {
        let records: Vec<(usize, EmbeddingRecord)> = read_jsonl(reader)?;
        for (line, rec) in records {
            if let Some(m) = binary_modality {
                if m != rec.modality {
                    return Err(RecordError::Invalid {
                        line,
                        source: ValidationError::new(
                            "modality",
                            format!("expected {m}, found {}", rec.modality),
                        ),
                    });
                }
            }
            insert_located(store, line, rec, normalize)?;
        }
    }
    Ok(())
}

/// Loads a JSONL embedding file.
pub fn load_embeddings(path: &Path, normalize: bool) -> Result<EmbeddingStore, RecordError> {
    let mut store = EmbeddingStore::new();
    read_embeddings(File::open(path)?, None, normalize, &mut store)?;
    Ok(store)
}

pub fn save_embeddings(path: &Path, records: &[EmbeddingRecord]) -> Result<(), RecordError> {
    write_jsonl(create(path)?, records)?;
    Ok(())
}

/// Writes the binary container: `UIEB`, version, count, dim (u32 LE), then
/// per record a u16 LE id length, the UTF-8 id and `dim` f32 LE values.
/// Values are narrowed to 32 bits.
pub fn write_embeddings_binary<W: Write>(
    mut writer: W,
    dim: usize,
    records: &[(&str, &[f64])],
) -> Result<(), RecordError> {
    let to_u32 = |v: usize, what: &str| {
        u32::try_from(v).map_err(|_| RecordError::Binary(format!("{what} {v} exceeds u32")))
    };
    writer.write_all(UIEB_MAGIC)?;
    writer.write_all(&UIEB_VERSION.to_le_bytes())?;
    writer.write_all(&to_u32(records.len(), "count")?.to_le_bytes())?;
    writer.write_all(&to_u32(dim, "dim")?.to_le_bytes())?;
    for (id, values) in records {
        if values.len() != dim {
            return Err(RecordError::Binary(format!(
                "record {id:?} has {} values, container dim is {dim}",
                values.len()
            )));
        }
        let len = u16::try_from(id.len())
            .map_err(|_| RecordError::Binary(format!("id {id:?} longer than 65535 bytes")))?;
        writer.write_all(&len.to_le_bytes())?;
        writer.write_all(id.as_bytes())?;
        for &v in values.iter() {
            writer.write_all(&(v as f32).to_le_bytes())?;
        }
    }
    writer.flush()?;
    Ok(())
}

fn read_exact_arr<const N: usize, R: Read>(r: &mut R, what: &str) -> Result<[u8; N], RecordError> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf)
        .map_err(|e| RecordError::Binary(format!("truncated {what}: {e}")))?;
    Ok(buf)
}

/// Reads a binary container, widening values to `f64`.
pub fn read_embeddings_binary<R: Read>(mut reader: R) -> Result<Vec<(String, Vec<f64>)>, RecordError> {
    let magic: [u8; 4] = read_exact_arr(&mut reader, "magic")?;
    if &magic != UIEB_MAGIC {
        return Err(RecordError::Binary("bad magic bytes".into()));
    }
    let version = u32::from_le_bytes(read_exact_arr(&mut reader, "version")?);
    if version != UIEB_VERSION {
        return Err(RecordError::Binary(format!("unsupported version {version}")));
    }
    let count = u32::from_le_bytes(read_exact_arr(&mut reader, "count")?) as usize;
    let dim = u32::from_le_bytes(read_exact_arr(&mut reader, "dim")?) as usize;
    let mut out = Vec::with_capacity(count.min(1 << 16));
    for i in 0..count {
        let len = u16::from_le_bytes(read_exact_arr(&mut reader, "id length")?) as usize;
        let mut id = vec![0u8; len];
        reader
            .read_exact(&mut id)
            .map_err(|e| RecordError::Binary(format!("record {i}: truncated id: {e}")))?;
        let id = String::from_utf8(id)
            .map_err(|_| RecordError::Binary(format!("record {i}: id is not UTF-8")))?;
        let mut values = Vec::with_capacity(dim.min(1 << 16));
        for _ in 0..dim {
            values.push(f32::from_le_bytes(read_exact_arr(&mut reader, "value")?) as f64);
        }
        out.push((id, values));
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Scene metadata
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Instance {
    pub category: String,
    #[serde(default)]
    pub attributes: BTreeMap<String, String>,
    /// `[x0, y0, x1, y1]`, normalized to the unit square.
    pub bbox: [f64; 4],
}

impl Instance {
    pub fn center(&self) -> (f64, f64) {
        let [x0, y0, x1, y1] = self.bbox;
        ((x0 + x1) / 2.0, (y0 + y1) / 2.0)
    }
}

/// Checks `0 <= x0 <= x1 <= 1` and `0 <= y0 <= y1 <= 1`.
pub fn validate_box(b: &[f64; 4]) -> Result<(), String> {
    let [x0, y0, x1, y1] = *b;
    let ok = b.iter().all(|v| v.is_finite())
        && (0.0..=1.0).contains(&x0)
        && (0.0..=1.0).contains(&y0)
        && x0 <= x1
        && x1 <= 1.0
        && y0 <= y1
        && y1 <= 1.0;
    if ok {
        Ok(())
    } else {
        Err(format!(
            "box {b:?} must satisfy 0 <= x0 <= x1 <= 1 and 0 <= y0 <= y1 <= 1"
        ))
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetadataRecord {
    pub scene_id: String,
    #[serde(default)]
    pub instances: Vec<Instance>,
    #[serde(default)]
    pub scene_attributes: BTreeMap<String, String>,
    #[serde(default)]
    pub scores: BTreeMap<String, f64>,
}

impl MetadataRecord {
    pub fn validate(&self) -> Result<(), ValidationError> {
        if self.scene_id.is_empty() {
            return Err(ValidationError::new("scene_id", "must be non-empty"));
        }
        for (i, inst) in self.instances.iter().enumerate() {
            validate_box(&inst.bbox)
                .map_err(|m| ValidationError::new(format!("instances[{i}].bbox"), m))?;
        }
        for (k, v) in &self.scores {
            if !v.is_finite() {
                return Err(ValidationError::new(format!("scores.{k}"), "non-finite score"));
            }
        }
        Ok(())
    }
}

pub fn parse_metadata<R: BufRead>(reader: R) -> Result<Vec<MetadataRecord>, RecordError> {
    let records: Vec<(usize, MetadataRecord)> = read_jsonl(reader)?;
    let mut seen = HashSet::new();
    let mut out = Vec::with_capacity(records.len());
    for (line, m) in records {
        m.validate()
            .map_err(|source| RecordError::Invalid { line, source })?;
        if !seen.insert(m.scene_id.clone()) {
            return Err(RecordError::DuplicateId {
                line,
                id: m.scene_id,
            });
        }
        out.push(m);
    }
    Ok(out)
}

pub fn load_metadata(path: &Path) -> Result<Vec<MetadataRecord>, RecordError> {
    parse_metadata(open(path)?)
}

pub fn save_metadata(path: &Path, records: &[MetadataRecord]) -> Result<(), RecordError> {
    write_jsonl(create(path)?, records)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Shot curves
// ---------------------------------------------------------------------------

/// Performance at increasing shot counts, on a 0-100 scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawShotCurve", into = "RawShotCurve")]
pub struct ShotCurve {
    shots: Vec<u32>,
    values: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct RawShotCurve {
    shots: Vec<u32>,
    values: Vec<f64>,
}

impl TryFrom<RawShotCurve> for ShotCurve {
    type Error = ValidationError;
    fn try_from(raw: RawShotCurve) -> Result<Self, Self::Error> {
        ShotCurve::new(raw.shots, raw.values)
    }
}

impl From<ShotCurve> for RawShotCurve {
    fn from(c: ShotCurve) -> Self {
        RawShotCurve {
            shots: c.shots,
            values: c.values,
        }
    }
}

impl ShotCurve {
    pub fn new(shots: Vec<u32>, values: Vec<f64>) -> Result<Self, ValidationError> {
        if shots.len() != values.len() {
            return Err(ValidationError::new(
                "values",
                format!("{} shots but {} values", shots.len(), values.len()),
            ));
        }
        if let Some(i) = shots.windows(2).position(|w| w[0] >= w[1]) {
            return Err(ValidationError::new(
                format!("shots[{}]", i + 1),
                "shots must be strictly increasing",
            ));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(ValidationError::new(format!("values[{i}]"), "non-finite value"));
        }
        Ok(Self { shots, values })
    }

    pub fn shots(&self) -> &[u32] {
        &self.shots
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.shots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.shots.is_empty()
    }

    pub fn value_at(&self, shot: u32) -> Option<f64> {
        self.shots
            .iter()
            .position(|&s| s == shot)
            .map(|i| self.values[i])
    }

    pub fn max_shot(&self) -> Option<u32> {
        self.shots.last().copied()
    }

    pub fn map_values(&self, f: impl Fn(f64) -> f64) -> Result<ShotCurve, ValidationError> {
        ShotCurve::new(self.shots.clone(), self.values.iter().map(|&v| f(v)).collect())
    }
}
