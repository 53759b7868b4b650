//! Persistent tool memory: core descriptors plus created tool packages,
//! usage counters derived from an append-only event log, and generations
//! swapped in atomically by consolidation.
//!
//! Layout under the registry root (layout version [`LAYOUT_VERSION`]):
//!
//! ```text
//! layout.json                      {"layout_version": 1}
//! CURRENT                          name of the live generation, e.g. "gen-3"
//! events.jsonl                     one UsageEvent per line, append-only
//! generations/gen-N/index.json     created tools with baseline counters
//! generations/gen-N/consolidation.json   report that produced gen-N (N > 0)
//! tools/<name>/v<version>/         manifest.json, tool.py, test_tool.py, report.json
//! ```
//!
//! An index stores counters as of `event_offset` events; live counters are
//! that baseline plus every later event, resolved through aliases.

mod storage;

pub use storage::{FaultyStorage, FileLock, FsStorage, Storage};

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, RwLock};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;
use tracing::{debug, warn};

use crate::build::{InvocationSchema, ToolPackage};
use crate::core_tools::{core_descriptors, ToolDescriptor};
use crate::critic::CritiqueResult;
use crate::embed::{cosine_or_zero, Embedder, NgramEmbedder};
use crate::parser::normalize_tool_name;
use crate::sandbox::TestReport;

pub const LAYOUT_VERSION: u32 = 1;
pub const LAYOUT_FILE: &str = "layout.json";
pub const CURRENT_FILE: &str = "CURRENT";
pub const EVENTS_FILE: &str = "events.jsonl";
pub const INDEX_FILE: &str = "index.json";
pub const REPORT_FILE: &str = "consolidation.json";
const WRITE_LOCK: &str = ".write.lock";
const CONSOLIDATION_LOCK: &str = ".consolidate.lock";

#[derive(Debug, Error)]
pub enum RegistryError {
    #[error("storage failure at {path}: {source}")]
    Storage {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("corrupt registry: {0}")]
    Corrupt(String),
    #[error("unsupported registry layout version {0}")]
    LayoutVersion(u32),
    #[error("package rejected: {0}")]
    Rejected(String),
    #[error("no created tools to measure")]
    EmptyLibrary,
    #[error("k must be at least 1")]
    InvalidK,
    #[error("snapshot generation {snapshot} is stale; live generation is {live}")]
    StaleSnapshot { snapshot: u64, live: u64 },
    #[error("another consolidation holds the lock")]
    ConsolidationBusy,
    #[error("unknown generation {0}")]
    UnknownGeneration(u64),
}

fn storage_err(path: &Path) -> impl FnOnce(io::Error) -> RegistryError + '_ {
    move |source| RegistryError::Storage {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UsageEvent {
    pub tool: String,
    pub task_id: String,
    pub ok: bool,
    pub duration_ms: u64,
    pub at_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToolRecord {
    pub package: ToolPackage,
    pub uses: u64,
    pub failures: u64,
    pub last_used_at_ms: Option<u64>,
    pub aliases: Vec<String>,
    pub category: Option<String>,
}

impl ToolRecord {
    pub fn new(package: ToolPackage) -> Self {
        Self {
            package,
            uses: 0,
            failures: 0,
            last_used_at_ms: None,
            aliases: Vec::new(),
            category: None,
        }
    }

    fn apply(&mut self, event: &UsageEvent) {
        self.uses += 1;
        if !event.ok {
            self.failures += 1;
        }
        self.last_used_at_ms = Some(self.last_used_at_ms.map_or(event.at_ms, |t| t.max(event.at_ms)));
    }
}

/// Exact ratio; `reuse@k` is reported without rounding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ratio {
    pub numerator: u64,
    pub denominator: u64,
}

impl Ratio {
    pub fn as_f64(self) -> f64 {
        self.numerator as f64 / self.denominator as f64
    }

    /// Cross-multiplied comparison, free of rounding.
    pub fn same_value(self, other: Ratio) -> bool {
        u128::from(self.numerator) * u128::from(other.denominator)
            == u128::from(other.numerator) * u128::from(self.denominator)
    }
}

impl fmt::Display for Ratio {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.numerator, self.denominator)
    }
}

/// Fraction of `tools` with at least `k` uses according to `counts`.
pub fn reuse_ratio<'a>(
    tools: impl IntoIterator<Item = &'a str>,
    counts: &BTreeMap<String, u64>,
    k: u64,
) -> Result<Ratio, RegistryError> {
    if k == 0 {
        return Err(RegistryError::InvalidK);
    }
    let mut ratio = Ratio {
        numerator: 0,
        denominator: 0,
    };
    for tool in tools {
        ratio.denominator += 1;
        if counts.get(tool).copied().unwrap_or(0) >= k {
            ratio.numerator += 1;
        }
    }
    if ratio.denominator == 0 {
        return Err(RegistryError::EmptyLibrary);
    }
    Ok(ratio)
}

/// `reuse@k` over an event log, with `tools` as the denominator set.
pub fn reuse_at_k(tools: &[String], events: &[UsageEvent], k: u64) -> Result<Ratio, RegistryError> {
    let mut counts = BTreeMap::new();
    for e in events {
        *counts.entry(e.tool.clone()).or_insert(0) += 1;
    }
    reuse_ratio(tools.iter().map(String::as_str), &counts, k)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToolMemory {
    pub core: BTreeMap<String, ToolDescriptor>,
    pub created: BTreeMap<String, ToolRecord>,
    pub generation: u64,
    /// Number of log events folded into the counters.
    pub events_applied: u64,
    /// Log offset at which this generation's usage window starts.
    pub window_start: u64,
}

impl Default for ToolMemory {
    fn default() -> Self {
        Self {
            core: core_descriptors().into_iter().map(|d| (d.name.clone(), d)).collect(),
            created: BTreeMap::new(),
            generation: 0,
            events_applied: 0,
            window_start: 0,
        }
    }
}

impl ToolMemory {
    /// Canonical created-tool name for `name`: an exact name first, then the
    /// smallest record listing it as an alias.
    pub fn resolve(&self, name: &str) -> Option<&str> {
        if let Some((k, _)) = self.created.get_key_value(name) {
            return Some(k.as_str());
        }
        self.created
            .iter()
            .find(|(_, r)| r.aliases.iter().any(|a| a == name))
            .map(|(k, _)| k.as_str())
    }

    pub fn record(&self, name: &str) -> Option<&ToolRecord> {
        self.resolve(name).and_then(|n| self.created.get(n))
    }

    pub fn is_taken(&self, name: &str) -> bool {
        self.core.contains_key(name) || self.resolve(name).is_some()
    }

    /// `base`, or `base_2`, `base_3`, ... whichever is free first.
    pub fn unique_name(&self, base: &str) -> String {
        if !self.is_taken(base) {
            return base.to_string();
        }
        (2u64..)
            .map(|i| format!("{base}_{i}"))
            .find(|n| !self.is_taken(n))
            .expect("unbounded suffixes")
    }

    /// Fold one event into the counters. Events for unknown tools only advance the offset.
    pub fn apply_event(&mut self, event: &UsageEvent) -> bool {
        self.events_applied += 1;
        let Some(name) = self.resolve(&event.tool).map(str::to_string) else {
            return false;
        };
        if let Some(record) = self.created.get_mut(&name) {
            record.apply(event);
        }
        true
    }

    pub fn use_counts(&self) -> BTreeMap<String, u64> {
        self.created.iter().map(|(k, r)| (k.clone(), r.uses)).collect()
    }

    /// `reuse@k` with the created set of this snapshot as the denominator.
    pub fn reuse_at_k(&self, k: u64) -> Result<Ratio, RegistryError> {
        reuse_ratio(self.created.keys().map(String::as_str), &self.use_counts(), k)
    }

    pub fn created_descriptors(&self) -> Vec<ToolDescriptor> {
        self.created.values().map(|r| r.package.descriptor()).collect()
    }

    /// Digest of the created set and its counters, used for idempotent commits.
    pub fn content_digest(&self) -> String {
        let index = IndexFile::from_memory(self);
        let body = serde_json::to_vec(&(&index.tools, index.event_offset)).expect("index serializes");
        hex::encode(Sha256::digest(&body))
    }

    pub fn size(&self) -> usize {
        self.created.len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct IndexEntry {
    version: u32,
    uses: u64,
    failures: u64,
    last_used_at_ms: Option<u64>,
    #[serde(default)]
    aliases: Vec<String>,
    #[serde(default)]
    category: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct IndexFile {
    layout_version: u32,
    generation: u64,
    event_offset: u64,
    window_start: u64,
    tools: BTreeMap<String, IndexEntry>,
}

impl IndexFile {
    fn from_memory(m: &ToolMemory) -> Self {
        Self {
            layout_version: LAYOUT_VERSION,
            generation: m.generation,
            event_offset: m.events_applied,
            window_start: m.window_start,
            tools: m
                .created
                .iter()
                .map(|(k, r)| {
                    (
                        k.clone(),
                        IndexEntry {
                            version: r.package.version,
                            uses: r.uses,
                            failures: r.failures,
                            last_used_at_ms: r.last_used_at_ms,
                            aliases: r.aliases.clone(),
                            category: r.category.clone(),
                        },
                    )
                })
                .collect(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct PackageManifest {
    name: String,
    version: u32,
    invocation_schema: InvocationSchema,
    dependencies: Vec<String>,
    created_from: String,
    created_at_ms: u64,
    review: CritiqueResult,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum HitSource {
    Core,
    Created,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SearchHit {
    pub name: String,
    pub score: f64,
    pub source: HitSource,
}

/// Rank tools for `query`: an exact name or alias match first, then cosine
/// similarity of description embeddings (positive scores only). If the
/// embedder fails, fall back to case-insensitive substring matching.
pub fn search_memory(memory: &ToolMemory, embedder: &dyn Embedder, query: &str, k: usize) -> Vec<SearchHit> {
    if k == 0 {
        return Vec::new();
    }
    let entries: Vec<(String, String, HitSource)> = memory
        .core
        .values()
        .map(|d| (d.name.clone(), d.description.clone(), HitSource::Core))
        .chain(memory.created.values().map(|r| {
            (
                r.package.name.clone(),
                r.package.invocation_schema.description.clone(),
                HitSource::Created,
            )
        }))
        .collect();
    let mut hits = Vec::new();
    if let Some(exact) = normalize_tool_name(query) {
        if let Some(d) = memory.core.get(&exact) {
            hits.push(SearchHit {
                name: d.name.clone(),
                score: 1.0,
                source: HitSource::Core,
            });
        } else if let Some(name) = memory.resolve(&exact) {
            hits.push(SearchHit {
                name: name.to_string(),
                score: 1.0,
                source: HitSource::Created,
            });
        }
    }
    let mut texts = vec![query.to_string()];
    texts.extend(entries.iter().map(|(_, d, _)| d.clone()));
    let mut ranked: Vec<SearchHit> = match embedder.embed(&texts) {
        Ok(vectors) if vectors.len() == texts.len() => entries
            .iter()
            .zip(&vectors[1..])
            .map(|((name, _, source), v)| SearchHit {
                name: name.clone(),
                score: cosine_or_zero(&vectors[0], v),
                source: *source,
            })
            .filter(|h| h.score > 0.0)
            .collect(),
        other => {
            if let Err(e) = other {
                warn!(error = %e, "embedding search unavailable; using substring match");
            }
            let needle = query.trim().to_lowercase();
            entries
                .iter()
                .filter(|(name, desc, _)| {
                    !needle.is_empty() && (name.contains(&needle) || desc.to_lowercase().contains(&needle))
                })
                .map(|(name, _, source)| SearchHit {
                    name: name.clone(),
                    score: 0.5,
                    source: *source,
                })
                .collect()
        }
    };
    ranked.sort_by(|a, b| b.score.total_cmp(&a.score).then_with(|| a.name.cmp(&b.name)));
    for hit in ranked {
        if !hits.iter().any(|h| h.name == hit.name) {
            hits.push(hit);
        }
    }
    hits.truncate(k);
    hits
}

fn gen_dir(root: &Path, generation: u64) -> PathBuf {
    root.join("generations").join(format!("gen-{generation}"))
}

fn package_dir(root: &Path, name: &str, version: u32) -> PathBuf {
    root.join("tools").join(name).join(format!("v{version}"))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, RegistryError> {
    let text = fs::read_to_string(path).map_err(storage_err(path))?;
    serde_json::from_str(&text).map_err(|e| RegistryError::Corrupt(format!("{}: {e}", path.display())))
}

fn read_package(root: &Path, name: &str, version: u32) -> Result<ToolPackage, RegistryError> {
    let dir = package_dir(root, name, version);
    let manifest: PackageManifest = read_json(&dir.join("manifest.json"))?;
    let code_path = dir.join("tool.py");
    let test_path = dir.join("test_tool.py");
    Ok(ToolPackage {
        name: manifest.name,
        version: manifest.version,
        code: fs::read_to_string(&code_path).map_err(storage_err(&code_path))?,
        test_script: fs::read_to_string(&test_path).map_err(storage_err(&test_path))?,
        invocation_schema: manifest.invocation_schema,
        dependencies: manifest.dependencies,
        test_results: read_json(&dir.join("report.json"))?,
        review: manifest.review,
        created_from: manifest.created_from,
        created_at_ms: manifest.created_at_ms,
    })
}

/// Read every event, tolerating a torn or unreadable line (skipped, but still
/// counted so offsets stay aligned with line positions).
pub fn read_events(path: &Path) -> Result<Vec<Option<UsageEvent>>, RegistryError> {
    let text = match fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(storage_err(path)(e)),
    };
    Ok(text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let parsed = serde_json::from_str(l);
            if parsed.is_err() {
                warn!(line = l, "skipping unreadable usage event");
            }
            parsed.ok()
        })
        .collect())
}

fn validate_package(pkg: &ToolPackage) -> Result<(), RegistryError> {
    if !pkg.test_results.all_pass {
        return Err(RegistryError::Rejected("test report is not all-pass".into()));
    }
    if !pkg.review.approved {
        return Err(RegistryError::Rejected("review did not approve".into()));
    }
    if normalize_tool_name(&pkg.name).as_deref() != Some(pkg.name.as_str()) {
        return Err(RegistryError::Rejected(format!("invalid tool name {:?}", pkg.name)));
    }
    if pkg.invocation_schema.description.trim().is_empty() || pkg.invocation_schema.arguments.is_empty() {
        return Err(RegistryError::Rejected("invocation schema is empty".into()));
    }
    if pkg.code.trim().is_empty() {
        return Err(RegistryError::Rejected("tool code is empty".into()));
    }
    Ok(())
}

pub struct Registry {
    root: PathBuf,
    storage: Arc<dyn Storage>,
    embedder: Arc<dyn Embedder>,
    state: RwLock<Arc<ToolMemory>>,
    writer: Mutex<()>,
}

impl fmt::Debug for Registry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Registry").field("root", &self.root).finish_non_exhaustive()
    }
}

/// Held for the duration of one consolidation.
#[derive(Debug)]
pub struct ConsolidationGuard {
    _lock: FileLock,
}

impl Registry {
    pub fn open(root: impl Into<PathBuf>) -> Result<Self, RegistryError> {
        Self::open_with(root, Arc::new(FsStorage), Arc::new(NgramEmbedder::default()))
    }

    /// Open or initialize a registry at `root`.
    pub fn open_with(
        root: impl Into<PathBuf>,
        storage: Arc<dyn Storage>,
        embedder: Arc<dyn Embedder>,
    ) -> Result<Self, RegistryError> {
        let root = root.into();
        let registry = Self {
            root,
            storage,
            embedder,
            state: RwLock::new(Arc::new(ToolMemory::default())),
            writer: Mutex::new(()),
        };
        {
            let _lock = registry.write_lock()?;
            registry.initialize()?;
        }
        registry.reload()?;
        Ok(registry)
    }

    fn initialize(&self) -> Result<(), RegistryError> {
        let layout = self.root.join(LAYOUT_FILE);
        if layout.exists() {
            let value: serde_json::Value = read_json(&layout)?;
            let version = value["layout_version"].as_u64().unwrap_or(0) as u32;
            if version != LAYOUT_VERSION {
                return Err(RegistryError::LayoutVersion(version));
            }
            return Ok(());
        }
        let empty = ToolMemory::default();
        self.write_index(&empty)?;
        self.write_bytes(&self.root.join(CURRENT_FILE), b"gen-0\n")?;
        let body = serde_json::to_vec_pretty(&serde_json::json!({ "layout_version": LAYOUT_VERSION }))
            .expect("layout serializes");
        self.write_bytes(&layout, &body)
    }

    fn write_lock(&self) -> Result<(std::sync::MutexGuard<'_, ()>, FileLock), RegistryError> {
        let guard = self.writer.lock().unwrap_or_else(|p| p.into_inner());
        self.storage.create_dir_all(&self.root).map_err(storage_err(&self.root))?;
        let path = self.root.join(WRITE_LOCK);
        let lock = FileLock::exclusive(&path).map_err(storage_err(&path))?;
        Ok((guard, lock))
    }

    fn write_bytes(&self, path: &Path, bytes: &[u8]) -> Result<(), RegistryError> {
        if let Some(parent) = path.parent() {
            self.storage.create_dir_all(parent).map_err(storage_err(parent))?;
        }
        self.storage.write_atomic(path, bytes).map_err(storage_err(path))
    }

    fn write_index(&self, memory: &ToolMemory) -> Result<(), RegistryError> {
        let path = gen_dir(&self.root, memory.generation).join(INDEX_FILE);
        let body = serde_json::to_vec_pretty(&IndexFile::from_memory(memory)).expect("index serializes");
        self.write_bytes(&path, &body)
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn embedder(&self) -> &Arc<dyn Embedder> {
        &self.embedder
    }

    /// Immutable view of the live memory.
    pub fn snapshot(&self) -> Arc<ToolMemory> {
        Arc::clone(&self.state.read().unwrap_or_else(|p| p.into_inner()))
    }

    pub fn current_generation(&self) -> Result<u64, RegistryError> {
        let path = self.root.join(CURRENT_FILE);
        let text = fs::read_to_string(&path).map_err(storage_err(&path))?;
        text.trim()
            .strip_prefix("gen-")
            .and_then(|n| n.parse().ok())
            .ok_or_else(|| RegistryError::Corrupt(format!("bad CURRENT pointer {:?}", text.trim())))
    }

    /// Generation `generation` as stored, with every later log event folded in.
    pub fn load_generation(&self, generation: u64) -> Result<ToolMemory, RegistryError> {
        let path = gen_dir(&self.root, generation).join(INDEX_FILE);
        if !path.exists() {
            return Err(RegistryError::UnknownGeneration(generation));
        }
        let index: IndexFile = read_json(&path)?;
        if index.layout_version != LAYOUT_VERSION {
            return Err(RegistryError::LayoutVersion(index.layout_version));
        }
        let mut memory = ToolMemory {
            generation: index.generation,
            events_applied: index.event_offset,
            window_start: index.window_start,
            ..ToolMemory::default()
        };
        for (name, entry) in index.tools {
            let package = read_package(&self.root, &name, entry.version)?;
            memory.created.insert(
                name,
                ToolRecord {
                    package,
                    uses: entry.uses,
                    failures: entry.failures,
                    last_used_at_ms: entry.last_used_at_ms,
                    aliases: entry.aliases,
                    category: entry.category,
                },
            );
        }
        let events = read_events(&self.root.join(EVENTS_FILE))?;
        let offset = usize::try_from(memory.events_applied).unwrap_or(usize::MAX);
        if offset > events.len() {
            return Err(RegistryError::Corrupt(format!(
                "index covers {offset} events but the log holds {}",
                events.len()
            )));
        }
        for event in &events[offset..] {
            match event {
                Some(e) => {
                    memory.apply_event(e);
                }
                None => memory.events_applied += 1,
            }
        }
        Ok(memory)
    }

    fn load_current(&self) -> Result<ToolMemory, RegistryError> {
        self.load_generation(self.current_generation()?)
    }

    /// Re-read the live generation from disk.
    pub fn reload(&self) -> Result<Arc<ToolMemory>, RegistryError> {
        let memory = Arc::new(self.load_current()?);
        *self.state.write().unwrap_or_else(|p| p.into_inner()) = Arc::clone(&memory);
        Ok(memory)
    }

    /// All readable events in log order.
    pub fn events(&self) -> Result<Vec<UsageEvent>, RegistryError> {
        Ok(read_events(&self.root.join(EVENTS_FILE))?.into_iter().flatten().collect())
    }

    /// Events in the usage window of `memory`'s generation.
    pub fn window_events(&self, memory: &ToolMemory) -> Result<Vec<UsageEvent>, RegistryError> {
        let events = read_events(&self.root.join(EVENTS_FILE))?;
        let start = (memory.window_start as usize).min(events.len());
        let end = (memory.events_applied as usize).min(events.len());
        Ok(events[start..end.max(start)].iter().flatten().cloned().collect())
    }

    /// Persist a verified package and return its final, possibly suffixed, name.
    pub fn register(&self, pkg: &ToolPackage) -> Result<String, RegistryError> {
        validate_package(pkg)?;
        let _lock = self.write_lock()?;
        let mut memory = self.load_current()?;
        let name = memory.unique_name(&pkg.name);
        let mut package = pkg.clone();
        let mut record_aliases = Vec::new();
        if name != pkg.name {
            record_aliases.push(pkg.name.clone());
            package.name = name.clone();
        }
        let dir = package_dir(&self.root, &name, package.version);
        self.write_package(&dir, &package)?;
        let mut record = ToolRecord::new(package);
        record.aliases = record_aliases;
        memory.created.insert(name.clone(), record);
        if let Err(e) = self.write_index(&memory) {
            let _ = self.storage.remove_dir_all(&dir);
            return Err(e);
        }
        debug!(tool = %name, "registered");
        *self.state.write().unwrap_or_else(|p| p.into_inner()) = Arc::new(memory);
        Ok(name)
    }

    fn write_package(&self, dir: &Path, pkg: &ToolPackage) -> Result<(), RegistryError> {
        let parent = dir.parent().expect("package dir has a parent");
        let staging = parent.join(format!(".staging-v{}-{}", pkg.version, std::process::id()));
        let manifest = PackageManifest {
            name: pkg.name.clone(),
            version: pkg.version,
            invocation_schema: pkg.invocation_schema.clone(),
            dependencies: pkg.dependencies.clone(),
            created_from: pkg.created_from.clone(),
            created_at_ms: pkg.created_at_ms,
            review: pkg.review.clone(),
        };
        let report: &TestReport = &pkg.test_results;
        let result = (|| {
            let _ = self.storage.remove_dir_all(&staging);
            self.storage.create_dir_all(&staging).map_err(storage_err(&staging))?;
            let files: [(&str, Vec<u8>); 4] = [
                ("manifest.json", serde_json::to_vec_pretty(&manifest).expect("manifest serializes")),
                ("tool.py", pkg.code.clone().into_bytes()),
                ("test_tool.py", pkg.test_script.clone().into_bytes()),
                ("report.json", serde_json::to_vec_pretty(report).expect("report serializes")),
            ];
            for (file, body) in files {
                let path = staging.join(file);
                self.storage.write_atomic(&path, &body).map_err(storage_err(&path))?;
            }
            // A leftover directory can only come from a failed registration.
            self.storage.remove_dir_all(dir).map_err(storage_err(dir))?;
            self.storage.rename(&staging, dir).map_err(storage_err(dir))
        })();
        if result.is_err() {
            let _ = self.storage.remove_dir_all(&staging);
        }
        result
    }

    /// Append a usage event and fold it into the live counters.
    pub fn log_usage(&self, event: &UsageEvent) -> Result<(), RegistryError> {
        let _lock = self.write_lock()?;
        let path = self.root.join(EVENTS_FILE);
        let line = serde_json::to_string(event).expect("event serializes");
        self.storage.append_line(&path, &line).map_err(storage_err(&path))?;
        let mut state = self.state.write().unwrap_or_else(|p| p.into_inner());
        Arc::make_mut(&mut state).apply_event(event);
        Ok(())
    }

    pub fn search(&self, query: &str, k: usize) -> Vec<SearchHit> {
        search_memory(&self.snapshot(), self.embedder.as_ref(), query, k)
    }

    /// Take the advisory consolidation lock without blocking.
    pub fn lock_consolidation(&self) -> Result<ConsolidationGuard, RegistryError> {
        self.storage.create_dir_all(&self.root).map_err(storage_err(&self.root))?;
        let path = self.root.join(CONSOLIDATION_LOCK);
        match FileLock::try_exclusive(&path).map_err(storage_err(&path))? {
            Some(lock) => Ok(ConsolidationGuard { _lock: lock }),
            None => Err(RegistryError::ConsolidationBusy),
        }
    }

    /// Write `next` as a new generation and swap the live pointer to it.
    ///
    /// `base` is the snapshot `next` was computed from. Tools registered and
    /// events logged after that snapshot are carried into the new generation.
    /// Committing content identical to the live generation is a no-op.
    pub fn commit(
        &self,
        base: &ToolMemory,
        next: &ToolMemory,
        report: &impl Serialize,
    ) -> Result<u64, RegistryError> {
        let _lock = self.write_lock()?;
        let live = self.load_current()?;
        if live.generation == next.generation && live.content_digest() == next.content_digest() {
            return Ok(live.generation);
        }
        if base.generation != live.generation || next.generation != live.generation + 1 {
            return Err(RegistryError::StaleSnapshot {
                snapshot: base.generation,
                live: live.generation,
            });
        }
        let mut merged = next.clone();
        merged.events_applied = base.events_applied;
        merged.window_start = base.events_applied;
        for (name, record) in &live.created {
            if base.created.contains_key(name) {
                continue;
            }
            let mut carried = record.clone();
            carried.uses = 0;
            carried.failures = 0;
            carried.last_used_at_ms = None;
            let final_name = merged.unique_name(name);
            carried.package.name = final_name.clone();
            merged.created.insert(final_name, carried);
        }
        let events = read_events(&self.root.join(EVENTS_FILE))?;
        let from = (base.events_applied as usize).min(events.len());
        for event in &events[from..] {
            match event {
                Some(e) => {
                    merged.apply_event(e);
                }
                None => merged.events_applied += 1,
            }
        }
        let dir = gen_dir(&self.root, merged.generation);
        self.write_index(&merged)?;
        let body = serde_json::to_vec_pretty(report).expect("report serializes");
        self.write_bytes(&dir.join(REPORT_FILE), &body)?;
        self.write_bytes(
            &self.root.join(CURRENT_FILE),
            format!("gen-{}\n", merged.generation).as_bytes(),
        )?;
        debug!(generation = merged.generation, "committed generation");
        *self.state.write().unwrap_or_else(|p| p.into_inner()) = Arc::new(merged);
        Ok(next.generation)
    }
}
