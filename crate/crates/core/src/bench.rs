//! Benchmark curation: knowledge filtering, Min-Max diversity sampling and
//! answer judging.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{self, BufRead, BufReader, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tracing::warn;

use crate::embed::{EmbedError, Embedder, EmbeddingVector};
use crate::parser::{parse_turn, AgentAction};
use crate::policy::{ChatMessage, PolicyAdapter};
use crate::prompts;

pub const NUMERIC_TOLERANCE: f64 = 1e-6;
pub const MATH_SCIENCE_ITERATIONS: usize = 5;
pub const VQA_ITERATIONS: usize = 10;

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("pool holds {have} items but {need} are required")]
    PoolExhausted { need: usize, have: usize },
    #[error("seed count must be at least 1")]
    NoSeeds,
    #[error("item {0} has no embedding")]
    MissingEmbedding(String),
    #[error("item {id}: {source}")]
    Embedding {
        id: String,
        #[source]
        source: EmbedError,
    },
    #[error("embedding dimension differs across the pool ({0} vs {1})")]
    DimensionMismatch(usize, usize),
    #[error("duplicate item id {0}")]
    DuplicateId(String),
    #[error("dataset i/o: {0}")]
    Io(#[from] io::Error),
    #[error("dataset format: {0}")]
    Format(String),
}

/// One dataset row.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetItem {
    pub id: String,
    pub question: String,
    pub answer: String,
    pub source: String,
    #[serde(default)]
    pub category: Option<String>,
}

impl DatasetItem {
    /// Visual question answering items get the longer iteration budget.
    pub fn is_vqa(&self) -> bool {
        let hit = |s: &str| s.to_ascii_lowercase().contains("vqa");
        hit(&self.source) || self.category.as_deref().is_some_and(hit)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CandidateItem {
    pub item: DatasetItem,
    pub embedding: Option<EmbeddingVector>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SamplerState {
    /// Seeds first, in draw order, then one id per iteration.
    pub selected: Vec<String>,
    /// Remaining candidates, sorted by id.
    pub pool: Vec<String>,
    pub iteration: usize,
}

pub fn cosine_similarity(a: &EmbeddingVector, b: &EmbeddingVector) -> Result<f64, EmbedError> {
    a.cosine(b)
}

/// Embed every question with `embedder`.
pub fn embed_items(items: Vec<DatasetItem>, embedder: &dyn Embedder) -> Result<Vec<CandidateItem>, BenchError> {
    let texts: Vec<String> = items.iter().map(|i| i.question.clone()).collect();
    let vectors = embedder.embed(&texts).map_err(|source| BenchError::Embedding {
        id: "*".into(),
        source,
    })?;
    items
        .into_iter()
        .zip(vectors)
        .map(|(item, v)| {
            let embedding = EmbeddingVector::new(v).map_err(|source| BenchError::Embedding {
                id: item.id.clone(),
                source,
            })?;
            Ok(CandidateItem {
                item,
                embedding: Some(embedding),
            })
        })
        .collect()
}

/// Iterative Min-Max sampling.
///
/// Items are ordered by id. `seeds` items are drawn uniformly with a ChaCha8
/// generator seeded by `rng_seed`; each of the `iterations` steps then moves
/// the pool item whose highest cosine similarity to the selected set is
/// smallest, the lowest id winning exact ties.
pub fn minmax_sample(
    pool: &[CandidateItem],
    seeds: usize,
    iterations: usize,
    rng_seed: u64,
) -> Result<SamplerState, BenchError> {
    if seeds == 0 {
        return Err(BenchError::NoSeeds);
    }
    let need = seeds + iterations;
    if pool.len() < need {
        return Err(BenchError::PoolExhausted { need, have: pool.len() });
    }
    let mut items: Vec<(&str, &EmbeddingVector)> = pool
        .iter()
        .map(|c| {
            c.embedding
                .as_ref()
                .map(|e| (c.item.id.as_str(), e))
                .ok_or_else(|| BenchError::MissingEmbedding(c.item.id.clone()))
        })
        .collect::<Result<_, _>>()?;
    items.sort_by(|a, b| a.0.cmp(b.0));
    if let Some(w) = items.windows(2).find(|w| w[0].0 == w[1].0) {
        return Err(BenchError::DuplicateId(w[0].0.to_string()));
    }
    let dims = items[0].1.dims();
    if let Some((_, e)) = items.iter().find(|(_, e)| e.dims() != dims) {
        return Err(BenchError::DimensionMismatch(dims, e.dims()));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let seed_idx = rand::seq::index::sample(&mut rng, items.len(), seeds).into_vec();
    let mut in_pool = vec![true; items.len()];
    let mut selected = Vec::with_capacity(need);
    for &i in &seed_idx {
        in_pool[i] = false;
        selected.push(i);
    }
    // Highest similarity of each item to the selected set, updated incrementally.
    let mut worst = vec![f64::NEG_INFINITY; items.len()];
    let cos = |a: usize, b: usize| items[a].1.cosine(items[b].1).expect("dimensions checked");
    for (c, w) in worst.iter_mut().enumerate() {
        if in_pool[c] {
            for &s in &selected {
                *w = w.max(cos(c, s));
            }
        }
    }
    for _ in 0..iterations {
        let mut best: Option<usize> = None;
        for c in (0..items.len()).filter(|&c| in_pool[c]) {
            if best.is_none_or(|b| worst[c] < worst[b]) {
                best = Some(c);
            }
        }
        let x = best.expect("pool size checked");
        in_pool[x] = false;
        selected.push(x);
        for c in 0..items.len() {
            if in_pool[c] {
                worst[c] = worst[c].max(cos(c, x));
            }
        }
    }
    Ok(SamplerState {
        selected: selected.iter().map(|&i| items[i].0.to_string()).collect(),
        pool: (0..items.len())
            .filter(|&i| in_pool[i])
            .map(|i| items[i].0.to_string())
            .collect(),
        iteration: iterations,
    })
}

/// How sampling partitions the candidate set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SampleScope {
    PerCategory,
    Global,
}

/// Default iteration budget for a group: the longer VQA budget only when
/// every item in the group is VQA.
pub fn default_iterations(items: &[CandidateItem]) -> usize {
    if !items.is_empty() && items.iter().all(|c| c.item.is_vqa()) {
        VQA_ITERATIONS
    } else {
        MATH_SCIENCE_ITERATIONS
    }
}

/// Sample per category (items without one form their own group) or globally.
pub fn curate_sample(
    pool: &[CandidateItem],
    seeds: usize,
    iterations: Option<usize>,
    rng_seed: u64,
    scope: SampleScope,
) -> Result<BTreeMap<String, SamplerState>, BenchError> {
    let mut groups: BTreeMap<String, Vec<CandidateItem>> = BTreeMap::new();
    for c in pool {
        let key = match scope {
            SampleScope::Global => "all".to_string(),
            SampleScope::PerCategory => c.item.category.clone().unwrap_or_else(|| "uncategorized".into()),
        };
        groups.entry(key).or_default().push(c.clone());
    }
    groups
        .into_iter()
        .map(|(key, items)| {
            let t = iterations.unwrap_or_else(|| default_iterations(&items));
            minmax_sample(&items, seeds, t, rng_seed).map(|s| (key, s))
        })
        .collect()
}

/// Parse a list of numbers such as `3`, `[3, 4]`, `(1.5; -2)` or `1/3`.
pub fn parse_numeric_list(text: &str) -> Option<Vec<f64>> {
    let trimmed = text.trim().trim_end_matches('.');
    let inner = trimmed
        .strip_prefix(['[', '(', '{'])
        .and_then(|s| s.strip_suffix([']', ')', '}']))
        .unwrap_or(trimmed);
    let values: Option<Vec<f64>> = inner
        .split([',', ';'])
        .flat_map(str::split_whitespace)
        .map(|tok| {
            if let Some((n, d)) = tok.split_once('/') {
                let (n, d): (f64, f64) = (n.parse().ok()?, d.parse().ok()?);
                (d != 0.0).then(|| n / d)
            } else {
                tok.parse::<f64>().ok()
            }
        })
        .map(|v| v.filter(|x| x.is_finite()))
        .collect();
    values.filter(|v| !v.is_empty())
}

fn normalize_text(text: &str) -> String {
    text.trim()
        .trim_end_matches('.')
        .split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
        .to_lowercase()
}

/// Numeric answers match when every value is within [`NUMERIC_TOLERANCE`];
/// list lengths must agree. Other answers match on normalized text, else by
/// asking `judge` (a failed or unclear judgment counts as a mismatch).
pub fn judge_answer(predicted: &str, reference: &str, judge: Option<&PolicyAdapter>) -> bool {
    if let (Some(p), Some(r)) = (parse_numeric_list(predicted), parse_numeric_list(reference)) {
        return p.len() == r.len() && p.iter().zip(&r).all(|(a, b)| (a - b).abs() <= NUMERIC_TOLERANCE);
    }
    if normalize_text(predicted) == normalize_text(reference) {
        return true;
    }
    let Some(judge) = judge else { return false };
    let messages = vec![
        ChatMessage::system(prompts::JUDGE_SYSTEM),
        ChatMessage::user(format!("Reference answer: {reference}\nPredicted answer: {predicted}")),
    ];
    match judge.complete(&messages).map(|r| parse_turn(&r)) {
        Ok(Ok(turn)) => match turn.payload {
            AgentAction::FinalAnswer(a) => normalize_text(&a) == "yes",
            _ => false,
        },
        Ok(Err(_)) => false,
        Err(e) => {
            warn!(error = %e, "judge unavailable; counting as mismatch");
            false
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FilterVerdict {
    /// The model answered correctly without tools.
    Solved,
    Unsolved,
    /// The solver could not be queried; kept to stay conservative.
    Undetermined,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilteredItem {
    pub item: DatasetItem,
    pub verdict: FilterVerdict,
}

/// Ask `solver` each question without tools; drop the ones it solves.
/// Returns every item with its verdict; the retained set is the non-solved ones.
pub fn knowledge_filter(
    items: &[DatasetItem],
    solver: &PolicyAdapter,
    judge: Option<&PolicyAdapter>,
) -> Vec<FilteredItem> {
    items
        .iter()
        .map(|item| {
            let messages = vec![
                ChatMessage::system(prompts::KNOWLEDGE_FILTER_SYSTEM),
                ChatMessage::user(item.question.clone()),
            ];
            let verdict = match solver.complete(&messages) {
                Err(e) => {
                    warn!(item = %item.id, error = %e, "solver unavailable; retaining item");
                    FilterVerdict::Undetermined
                }
                Ok(response) => match parse_turn(&response).map(|t| t.payload) {
                    Ok(AgentAction::FinalAnswer(answer)) if judge_answer(&answer, &item.answer, judge) => {
                        FilterVerdict::Solved
                    }
                    _ => FilterVerdict::Unsolved,
                },
            };
            FilteredItem {
                item: item.clone(),
                verdict,
            }
        })
        .collect()
}

pub fn retained(filtered: &[FilteredItem]) -> Vec<DatasetItem> {
    filtered
        .iter()
        .filter(|f| f.verdict != FilterVerdict::Solved)
        .map(|f| f.item.clone())
        .collect()
}

fn is_csv(path: &Path) -> bool {
    path.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv"))
}

/// Read `.csv` (with header) or line-delimited JSON records.
pub fn read_records<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, BenchError> {
    if is_csv(path) {
        let mut reader = csv::Reader::from_path(path).map_err(|e| BenchError::Format(e.to_string()))?;
        return reader
            .deserialize()
            .collect::<Result<_, _>>()
            .map_err(|e| BenchError::Format(e.to_string()));
    }
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (n, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| BenchError::Format(format!("line {}: {e}", n + 1)))?);
    }
    Ok(out)
}

/// Read a dataset; ids must be unique.
pub fn read_dataset(path: &Path) -> Result<Vec<DatasetItem>, BenchError> {
    let items: Vec<DatasetItem> = read_records(path)?;
    let mut seen = BTreeSet::new();
    for item in &items {
        if !seen.insert(item.id.as_str()) {
            return Err(BenchError::DuplicateId(item.id.clone()));
        }
    }
    Ok(items.into_iter().map(normalize_category).collect())
}

fn normalize_category(mut item: DatasetItem) -> DatasetItem {
    if item.category.as_deref().is_some_and(|c| c.trim().is_empty()) {
        item.category = None;
    }
    item
}

/// A dataset row plus curation metadata.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExportRow {
    pub id: String,
    pub question: String,
    pub answer: String,
    pub source: String,
    pub category: Option<String>,
    /// `seed`, `minmax`, `retained`, `undetermined`, ...
    pub selection: String,
    /// Position in the selected sequence, when sampled.
    pub rank: Option<usize>,
}

impl ExportRow {
    pub fn new(item: &DatasetItem, selection: &str, rank: Option<usize>) -> Self {
        Self {
            id: item.id.clone(),
            question: item.question.clone(),
            answer: item.answer.clone(),
            source: item.source.clone(),
            category: item.category.clone(),
            selection: selection.into(),
            rank,
        }
    }
}

pub fn write_rows(path: &Path, rows: &[ExportRow]) -> Result<(), BenchError> {
    if is_csv(path) {
        let mut writer = csv::Writer::from_path(path).map_err(|e| BenchError::Format(e.to_string()))?;
        for row in rows {
            writer.serialize(row).map_err(|e| BenchError::Format(e.to_string()))?;
        }
        writer.flush()?;
    } else {
        let mut f = File::create(path)?;
        for row in rows {
            writeln!(f, "{}", serde_json::to_string(row).expect("row serializes"))?;
        }
    }
    Ok(())
}
