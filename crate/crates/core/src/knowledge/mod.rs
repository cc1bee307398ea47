//! Documentation and experience bases with threshold-gated retrieval.
//!
//! Retrieval scores the best stored experience first. When its cosine similarity to
//! the query reaches the threshold, that experience alone is returned; otherwise the
//! top documentation entries are. Both indexes are exhaustive scans, with ties
//! broken by the lexicographically smallest key.

mod embed;

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use serde_json::Value;

pub use embed::{
    cosine, Embedder, EmbeddingVector, HashingEmbedder, RemoteEmbedder, TableEmbedder,
    DEFAULT_DIMENSION,
};

use crate::error::{Error, Result};

pub const DEFAULT_THRESHOLD: f64 = 0.85;
pub const DEFAULT_TOP_K: usize = 3;
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DocEntry {
    pub api_name: String,
    #[serde(default)]
    pub description: String,
    #[serde(default)]
    pub parameters: String,
    #[serde(default)]
    pub returns: String,
    #[serde(default)]
    pub examples: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExperienceEntry {
    pub question: String,
    pub answer: String,
    #[serde(default)]
    pub thought: String,
    pub code: String,
    pub problem_type: String,
}

impl ExperienceEntry {
    fn validate(&self, index: usize) -> Result<()> {
        for (name, value) in [
            ("question", &self.question),
            ("answer", &self.answer),
            ("code", &self.code),
            ("problem_type", &self.problem_type),
        ] {
            if value.trim().is_empty() {
                return Err(Error::Schema {
                    index,
                    message: format!("`{name}` is empty"),
                });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum KnowledgeEntry {
    Documentation(DocEntry),
    Experience(ExperienceEntry),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RetrievalKind {
    Experience,
    Documentation,
    Empty,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredEntry {
    pub key: String,
    pub score: f64,
    pub entry: KnowledgeEntry,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalResult {
    pub kind: RetrievalKind,
    pub entries: Vec<ScoredEntry>,
    pub top_score: f64,
    /// Best experience similarity, whether or not it passed the gate.
    pub experience_score: Option<f64>,
}

impl RetrievalResult {
    pub fn empty() -> Self {
        Self {
            kind: RetrievalKind::Empty,
            entries: Vec::new(),
            top_score: 0.0,
            experience_score: None,
        }
    }

    /// A retrieval consisting of exactly `entry`, bypassing the index.
    pub fn injected(entry: ExperienceEntry) -> Self {
        Self {
            kind: RetrievalKind::Experience,
            entries: vec![ScoredEntry {
                key: entry.problem_type.clone(),
                score: 1.0,
                entry: KnowledgeEntry::Experience(entry),
            }],
            top_score: 1.0,
            experience_score: Some(1.0),
        }
    }

    /// Text bound into the coding prompt's knowledge slot.
    pub fn render(&self) -> String {
        if self.entries.is_empty() {
            return "None".to_string();
        }
        let mut out = String::new();
        for (i, scored) in self.entries.iter().enumerate() {
            if i > 0 {
                out.push('\n');
            }
            match &scored.entry {
                KnowledgeEntry::Experience(e) => {
                    out.push_str("Experience Information\n");
                    out.push_str(&format!("question: {}\n", e.question));
                    out.push_str(&format!("answer: {}\n", e.answer));
                    out.push_str(&format!("thought: {}\n", e.thought));
                    out.push_str(&format!("code:\n{}\n", e.code));
                }
                KnowledgeEntry::Documentation(d) => {
                    out.push_str("Documentation Information\n");
                    out.push_str(&format!("api_name: {}\n", d.api_name));
                    out.push_str(&format!("description: {}\n", d.description));
                    out.push_str(&format!("parameters: {}\n", d.parameters));
                    out.push_str(&format!("returns: {}\n", d.returns));
                    out.push_str(&format!("examples: {}\n", d.examples));
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone)]
struct Indexed<T> {
    entry: T,
    vector: EmbeddingVector,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    provider: String,
    dimension: Option<usize>,
    threshold: f64,
    top_k: usize,
}

#[derive(Debug, Default, Serialize, Deserialize)]
struct VectorFile {
    docs: BTreeMap<String, EmbeddingVector>,
    experiences: BTreeMap<String, EmbeddingVector>,
}

pub struct KnowledgeBase {
    embedder: Arc<dyn Embedder>,
    docs: BTreeMap<String, Indexed<DocEntry>>,
    experiences: BTreeMap<String, Indexed<ExperienceEntry>>,
    dimension: Option<usize>,
    top_k: usize,
    threshold: f64,
}

fn query_text(refined_question: &str, graph_type: &str) -> String {
    format!("{refined_question} {graph_type}")
}

fn value_text(value: &Value) -> String {
    match value {
        Value::Null => String::new(),
        Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

impl KnowledgeBase {
    pub fn new(embedder: Arc<dyn Embedder>) -> Self {
        Self {
            embedder,
            docs: BTreeMap::new(),
            experiences: BTreeMap::new(),
            dimension: None,
            top_k: DEFAULT_TOP_K,
            threshold: DEFAULT_THRESHOLD,
        }
    }

    pub fn with_top_k(mut self, top_k: usize) -> Self {
        self.top_k = top_k.max(1);
        self
    }

    pub fn with_threshold(mut self, threshold: f64) -> Self {
        self.threshold = threshold;
        self
    }

    pub fn threshold(&self) -> f64 {
        self.threshold
    }

    pub fn provider_id(&self) -> String {
        self.embedder.provider_id()
    }

    pub fn doc_count(&self) -> usize {
        self.docs.len()
    }

    pub fn experience_count(&self) -> usize {
        self.experiences.len()
    }

    pub fn experiences(&self) -> impl Iterator<Item = &ExperienceEntry> {
        self.experiences.values().map(|i| &i.entry)
    }

    pub fn docs(&self) -> impl Iterator<Item = &DocEntry> {
        self.docs.values().map(|i| &i.entry)
    }

    fn check_dimension(&mut self, vector: &EmbeddingVector) -> Result<()> {
        match self.dimension {
            Some(d) if d != vector.dimension() => Err(Error::DimensionMismatch {
                left: d,
                right: vector.dimension(),
            }),
            Some(_) => Ok(()),
            None => {
                self.dimension = Some(vector.dimension());
                Ok(())
            }
        }
    }

    /// Loads a JSON array of documentation records. The whole file is validated
    /// before anything is inserted.
    pub async fn ingest_docs(&mut self, path: impl AsRef<Path>) -> Result<usize> {
        let path = path.as_ref();
        let raw = fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
        let records: Vec<Value> = serde_json::from_str(&raw)?;
        let mut entries = Vec::with_capacity(records.len());
        for (index, record) in records.iter().enumerate() {
            let object = record.as_object().ok_or_else(|| Error::Schema {
                index,
                message: "record is not an object".into(),
            })?;
            let api_name = match object.get("api_name") {
                Some(Value::String(s)) if !s.trim().is_empty() => s.clone(),
                _ => {
                    return Err(Error::Schema {
                        index,
                        message: "missing `api_name`".into(),
                    })
                }
            };
            let field = |name: &str| object.get(name).map(value_text).unwrap_or_default();
            entries.push(DocEntry {
                api_name,
                description: field("description"),
                parameters: field("parameters"),
                returns: field("returns"),
                examples: field("examples"),
            });
        }
        let count = entries.len();
        for entry in entries {
            self.add_doc(entry).await?;
        }
        Ok(count)
    }

    pub async fn add_doc(&mut self, entry: DocEntry) -> Result<()> {
        let text = format!("{} {}", entry.api_name, entry.description);
        let vector = self.embedder.embed(&text).await?;
        self.add_doc_embedded(entry, vector)
    }

    pub fn add_doc_embedded(&mut self, entry: DocEntry, vector: EmbeddingVector) -> Result<()> {
        self.check_dimension(&vector)?;
        self.docs
            .insert(entry.api_name.clone(), Indexed { entry, vector });
        Ok(())
    }

    /// Inserts an experience keyed by its problem type, replacing any previous one.
    pub async fn add_experience(&mut self, entry: ExperienceEntry) -> Result<()> {
        entry.validate(0)?;
        let vector = self.embedder.embed(&entry.question).await?;
        self.add_experience_embedded(entry, vector)
    }

    pub fn add_experience_embedded(
        &mut self,
        entry: ExperienceEntry,
        vector: EmbeddingVector,
    ) -> Result<()> {
        self.check_dimension(&vector)?;
        self.experiences
            .insert(entry.problem_type.clone(), Indexed { entry, vector });
        Ok(())
    }

    /// Loads a JSON array of experience records.
    pub async fn ingest_experiences(&mut self, path: impl AsRef<Path>) -> Result<usize> {
        let entries = read_experience_file(path)?;
        let count = entries.len();
        for entry in entries {
            self.add_experience(entry).await?;
        }
        Ok(count)
    }

    /// Highest-scoring experience for `query`, smallest key on ties.
    pub fn nearest_experience(&self, query: &EmbeddingVector) -> Result<Option<(&str, f64)>> {
        let mut best: Option<(&str, f64)> = None;
        for (key, indexed) in &self.experiences {
            let score = cosine(query, &indexed.vector)?;
            // BTreeMap iterates keys ascending, so strict > keeps the smallest key on ties.
            if best.is_none_or(|(_, s)| score > s) {
                best = Some((key, score));
            }
        }
        Ok(best)
    }

    /// Top `top_k` documentation entries, by descending score then ascending key.
    pub fn nearest_docs(&self, query: &EmbeddingVector) -> Result<Vec<ScoredEntry>> {
        let mut scored = self
            .docs
            .iter()
            .map(|(key, indexed)| Ok((key, cosine(query, &indexed.vector)?, &indexed.entry)))
            .collect::<Result<Vec<_>>>()?;
        scored.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        Ok(scored
            .into_iter()
            .take(self.top_k)
            .map(|(key, score, entry)| ScoredEntry {
                key: key.clone(),
                score,
                entry: KnowledgeEntry::Documentation(entry.clone()),
            })
            .collect())
    }

    pub async fn embed_query(&self, refined_question: &str, graph_type: &str) -> Result<EmbeddingVector> {
        self.embedder
            .embed(&query_text(refined_question, graph_type))
            .await
    }

    /// Gated retrieval with threshold `delta` (inclusive).
    pub async fn search(
        &self,
        refined_question: &str,
        graph_type: &str,
        delta: f64,
    ) -> Result<RetrievalResult> {
        let query = self.embed_query(refined_question, graph_type).await?;
        self.search_vector(&query, delta)
    }

    pub fn search_vector(&self, query: &EmbeddingVector, delta: f64) -> Result<RetrievalResult> {
        let best = self.nearest_experience(query)?;
        if let Some((key, score)) = best {
            if score >= delta {
                let entry = self.experiences[key].entry.clone();
                return Ok(RetrievalResult {
                    kind: RetrievalKind::Experience,
                    entries: vec![ScoredEntry {
                        key: key.to_string(),
                        score,
                        entry: KnowledgeEntry::Experience(entry),
                    }],
                    top_score: score,
                    experience_score: Some(score),
                });
            }
        }
        let mut result = self.documentation_for(query)?;
        result.experience_score = best.map(|(_, s)| s);
        Ok(result)
    }

    /// Documentation retrieval only; the experience base is not consulted.
    pub async fn search_documentation(
        &self,
        refined_question: &str,
        graph_type: &str,
    ) -> Result<RetrievalResult> {
        let query = self.embed_query(refined_question, graph_type).await?;
        self.documentation_for(&query)
    }

    fn documentation_for(&self, query: &EmbeddingVector) -> Result<RetrievalResult> {
        let entries = self.nearest_docs(query)?;
        if entries.is_empty() {
            return Ok(RetrievalResult::empty());
        }
        Ok(RetrievalResult {
            kind: RetrievalKind::Documentation,
            top_score: entries[0].score,
            entries,
            experience_score: None,
        })
    }

    /// Writes `manifest.json`, `docs.json`, `experiences.json` and `vectors.json`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::file(dir, e))?;
        let manifest = Manifest {
            format_version: FORMAT_VERSION,
            provider: self.embedder.provider_id(),
            dimension: self.dimension,
            threshold: self.threshold,
            top_k: self.top_k,
        };
        let docs: Vec<&DocEntry> = self.docs().collect();
        let experiences: Vec<&ExperienceEntry> = self.experiences().collect();
        let vectors = VectorFile {
            docs: self
                .docs
                .iter()
                .map(|(k, i)| (k.clone(), i.vector.clone()))
                .collect(),
            experiences: self
                .experiences
                .iter()
                .map(|(k, i)| (k.clone(), i.vector.clone()))
                .collect(),
        };
        write_json(&dir.join("manifest.json"), &manifest)?;
        write_json(&dir.join("docs.json"), &docs)?;
        write_json(&dir.join("experiences.json"), &experiences)?;
        write_json(&dir.join("vectors.json"), &vectors)?;
        Ok(())
    }

    /// Reopens a saved index. `embedder` must be the provider that built it.
    pub fn load(dir: impl AsRef<Path>, embedder: Arc<dyn Embedder>) -> Result<Self> {
        let dir = dir.as_ref();
        let manifest: Manifest = read_json(&dir.join("manifest.json"))?;
        if manifest.provider != embedder.provider_id() {
            return Err(Error::ProviderMismatch {
                index: manifest.provider,
                query: embedder.provider_id(),
            });
        }
        let docs: Vec<DocEntry> = read_json(&dir.join("docs.json"))?;
        let experiences: Vec<ExperienceEntry> = read_json(&dir.join("experiences.json"))?;
        let mut vectors: VectorFile = read_json(&dir.join("vectors.json"))?;
        let mut kb = KnowledgeBase::new(embedder)
            .with_top_k(manifest.top_k)
            .with_threshold(manifest.threshold);
        for (index, entry) in docs.into_iter().enumerate() {
            let vector = vectors.docs.remove(&entry.api_name).ok_or_else(|| Error::Schema {
                index,
                message: format!("no vector for doc `{}`", entry.api_name),
            })?;
            kb.add_doc_embedded(entry, vector)?;
        }
        for (index, entry) in experiences.into_iter().enumerate() {
            let vector = vectors
                .experiences
                .remove(&entry.problem_type)
                .ok_or_else(|| Error::Schema {
                    index,
                    message: format!("no vector for experience `{}`", entry.problem_type),
                })?;
            kb.add_experience_embedded(entry, vector)?;
        }
        Ok(kb)
    }
}

/// Reads a JSON array of experience records.
pub fn read_experience_file(path: impl AsRef<Path>) -> Result<Vec<ExperienceEntry>> {
    let path = path.as_ref();
    let raw = fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
    let records: Vec<Value> = serde_json::from_str(&raw)?;
    records
        .into_iter()
        .enumerate()
        .map(|(index, record)| {
            let entry: ExperienceEntry =
                serde_json::from_value(record).map_err(|e| Error::Schema {
                    index,
                    message: e.to_string(),
                })?;
            entry.validate(index)?;
            Ok(entry)
        })
        .collect()
}

pub fn write_experience_file(path: impl AsRef<Path>, entries: &[ExperienceEntry]) -> Result<()> {
    write_json(path.as_ref(), &entries)
}

pub(crate) fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").map_err(|e| Error::file(path, e))
}

pub(crate) fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let raw = fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
    Ok(serde_json::from_str(&raw)?)
}
