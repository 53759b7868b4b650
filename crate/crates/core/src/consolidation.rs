//! Offline memory consolidation: merge duplicate tools, discard low-utility
//! ones, label categories, and commit the result as a new generation.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;
use tracing::warn;

use crate::embed::{cosine_or_zero, Embedder};
use crate::registry::{Registry, RegistryError, ToolMemory, UsageEvent};

/// Default category labels. The last one is the catch-all.
pub const DEFAULT_CATEGORIES: [&str; 7] = [
    "algebraic calculation",
    "geometric operations",
    "statistical analysis",
    "probability and combinatorics",
    "number theory",
    "physical science",
    "general utility",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsolidationPolicy {
    pub dup_similarity_threshold: f64,
    pub min_uses_window: u64,
    pub max_failure_rate: f64,
    pub min_uses_for_rate: u64,
    pub category_labels: Vec<String>,
}

impl Default for ConsolidationPolicy {
    fn default() -> Self {
        Self {
            dup_similarity_threshold: 0.92,
            min_uses_window: 1,
            max_failure_rate: 0.5,
            min_uses_for_rate: 5,
            category_labels: DEFAULT_CATEGORIES.iter().map(|s| s.to_string()).collect(),
        }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum PolicyViolation {
    #[error("dup_similarity_threshold must be in (0, 1], got {0}")]
    Threshold(f64),
    #[error("max_failure_rate must be in [0, 1], got {0}")]
    FailureRate(f64),
}

impl ConsolidationPolicy {
    pub fn validate(&self) -> Result<(), PolicyViolation> {
        if !(self.dup_similarity_threshold > 0.0 && self.dup_similarity_threshold <= 1.0) {
            return Err(PolicyViolation::Threshold(self.dup_similarity_threshold));
        }
        if !(0.0..=1.0).contains(&self.max_failure_rate) {
            return Err(PolicyViolation::FailureRate(self.max_failure_rate));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DiscardReason {
    RarelyUsed,
    HighFailure,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MergedGroup {
    pub survivor: String,
    pub absorbed: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Discarded {
    pub name: String,
    pub reason: DiscardReason,
    pub window_uses: u64,
    pub window_failures: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsolidationReport {
    pub from_generation: u64,
    pub to_generation: u64,
    pub merged_groups: Vec<MergedGroup>,
    pub discarded: Vec<Discarded>,
    pub categories_assigned: BTreeMap<String, String>,
    pub before_size: usize,
    pub after_size: usize,
    /// Set when the embedder failed and grouping fell back to code hashes only.
    #[serde(default)]
    pub embedding_degraded: bool,
}

/// Window counters per canonical tool name.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowCount {
    pub uses: u64,
    pub failures: u64,
}

/// Strip `#` comments (outside string literals) and all whitespace, then hash.
pub fn normalized_code_hash(code: &str) -> String {
    let mut out = String::with_capacity(code.len());
    for line in code.lines() {
        let mut quote: Option<char> = None;
        let mut escaped = false;
        for c in line.chars() {
            match quote {
                Some(q) => {
                    if escaped {
                        escaped = false;
                    } else if c == '\\' {
                        escaped = true;
                    } else if c == q {
                        quote = None;
                    }
                }
                None if c == '#' => break,
                None if c == '"' || c == '\'' => quote = Some(c),
                None => {}
            }
            if !c.is_whitespace() {
                out.push(c);
            }
        }
    }
    hex::encode(Sha256::digest(out.as_bytes()))
}

fn find(parent: &mut [usize], mut i: usize) -> usize {
    while parent[i] != i {
        parent[i] = parent[parent[i]];
        i = parent[i];
    }
    i
}

fn union(parent: &mut [usize], a: usize, b: usize) {
    let (ra, rb) = (find(parent, a), find(parent, b));
    if ra != rb {
        parent[ra.max(rb)] = ra.min(rb);
    }
}

/// Result of the organize phase.
#[derive(Debug, Clone)]
pub struct Organized {
    pub memory: ToolMemory,
    pub groups: Vec<MergedGroup>,
    pub window: BTreeMap<String, WindowCount>,
    pub embedding_degraded: bool,
}

/// Window counts for `log`, attributed through `memory`'s names and aliases.
pub fn window_counts(memory: &ToolMemory, log: &[UsageEvent]) -> BTreeMap<String, WindowCount> {
    let mut counts: BTreeMap<String, WindowCount> =
        memory.created.keys().map(|k| (k.clone(), WindowCount::default())).collect();
    for event in log {
        if let Some(name) = memory.resolve(&event.tool) {
            let c = counts.entry(name.to_string()).or_default();
            c.uses += 1;
            if !event.ok {
                c.failures += 1;
            }
        }
    }
    counts
}

/// Group duplicates and merge each group into its highest-use member.
pub fn organize(
    snapshot: &ToolMemory,
    log: &[UsageEvent],
    policy: &ConsolidationPolicy,
    embedder: &dyn Embedder,
) -> Organized {
    let names: Vec<String> = snapshot.created.keys().cloned().collect();
    let n = names.len();
    let mut parent: Vec<usize> = (0..n).collect();
    let hashes: Vec<String> = names
        .iter()
        .map(|k| normalized_code_hash(&snapshot.created[k].package.code))
        .collect();
    for i in 0..n {
        for j in (i + 1)..n {
            if hashes[i] == hashes[j] {
                union(&mut parent, i, j);
            }
        }
    }
    let descriptions: Vec<String> = names
        .iter()
        .map(|k| snapshot.created[k].package.invocation_schema.description.clone())
        .collect();
    let mut embedding_degraded = false;
    if n > 1 {
        match embedder.embed(&descriptions) {
            Ok(vectors) if vectors.len() == n => {
                for i in 0..n {
                    for j in (i + 1)..n {
                        if cosine_or_zero(&vectors[i], &vectors[j]) >= policy.dup_similarity_threshold {
                            union(&mut parent, i, j);
                        }
                    }
                }
            }
            other => {
                if let Err(e) = other {
                    warn!(error = %e, "description embeddings unavailable; merging by code hash only");
                }
                embedding_degraded = true;
            }
        }
    }

    let mut members: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for i in 0..n {
        let root = find(&mut parent, i);
        members.entry(root).or_default().push(i);
    }

    let mut window = window_counts(snapshot, log);
    let mut memory = snapshot.clone();
    let mut groups = Vec::new();
    for group in members.values().filter(|g| g.len() > 1) {
        let survivor_idx = *group
            .iter()
            .max_by_key(|&&i| (snapshot.created[&names[i]].uses, Reverse(&names[i])))
            .expect("non-empty group");
        let survivor = names[survivor_idx].clone();
        let mut absorbed = Vec::new();
        let mut aliases: BTreeSet<String> = snapshot.created[&survivor].aliases.iter().cloned().collect();
        let mut total = snapshot.created[&survivor].clone();
        let mut w = window.get(&survivor).copied().unwrap_or_default();
        for &i in group.iter().filter(|&&i| i != survivor_idx) {
            let name = &names[i];
            let record = &snapshot.created[name];
            total.uses += record.uses;
            total.failures += record.failures;
            total.last_used_at_ms = total.last_used_at_ms.max(record.last_used_at_ms);
            aliases.insert(name.clone());
            aliases.extend(record.aliases.iter().cloned());
            if let Some(c) = window.remove(name) {
                w.uses += c.uses;
                w.failures += c.failures;
            }
            memory.created.remove(name);
            absorbed.push(name.clone());
        }
        aliases.remove(&survivor);
        total.aliases = aliases.into_iter().collect();
        memory.created.insert(survivor.clone(), total);
        window.insert(survivor.clone(), w);
        groups.push(MergedGroup { survivor, absorbed });
    }
    groups.sort_by(|a, b| a.survivor.cmp(&b.survivor));
    Organized {
        memory,
        groups,
        window,
        embedding_degraded,
    }
}

/// The discard predicate; `None` keeps the tool.
pub fn discard_reason(count: WindowCount, policy: &ConsolidationPolicy) -> Option<DiscardReason> {
    if count.uses < policy.min_uses_window {
        return Some(DiscardReason::RarelyUsed);
    }
    if count.uses >= policy.min_uses_for_rate
        && count.uses > 0
        && count.failures as f64 / count.uses as f64 > policy.max_failure_rate
    {
        return Some(DiscardReason::HighFailure);
    }
    None
}

fn assign_categories(
    memory: &mut ToolMemory,
    labels: &[String],
    embedder: &dyn Embedder,
) -> BTreeMap<String, String> {
    let mut assigned = BTreeMap::new();
    let Some(fallback) = labels.last() else {
        return assigned;
    };
    let names: Vec<String> = memory.created.keys().cloned().collect();
    if names.is_empty() {
        return assigned;
    }
    let mut texts: Vec<String> = labels.to_vec();
    texts.extend(names.iter().map(|k| {
        let p = &memory.created[k].package;
        format!("{} {}", p.name.replace('_', " "), p.invocation_schema.description)
    }));
    let vectors = match embedder.embed(&texts) {
        Ok(v) if v.len() == texts.len() => Some(v),
        _ => None,
    };
    for (i, name) in names.iter().enumerate() {
        let label = vectors
            .as_ref()
            .and_then(|v| {
                let tool = &v[labels.len() + i];
                let mut best: Option<(usize, f64)> = None;
                for (j, lv) in v[..labels.len()].iter().enumerate() {
                    let s = cosine_or_zero(tool, lv);
                    if s > 0.0 && best.is_none_or(|(_, b)| s > b) {
                        best = Some((j, s));
                    }
                }
                best.map(|(j, _)| labels[j].clone())
            })
            .unwrap_or_else(|| fallback.clone());
        memory.created.get_mut(name).expect("listed name").category = Some(label.clone());
        assigned.insert(name.clone(), label);
    }
    assigned
}

/// Organize, then analyze and discard, then label. The result is generation + 1.
pub fn consolidate(
    snapshot: &ToolMemory,
    log: &[UsageEvent],
    policy: &ConsolidationPolicy,
    embedder: &dyn Embedder,
) -> (ToolMemory, ConsolidationReport) {
    let organized = organize(snapshot, log, policy, embedder);
    let mut memory = organized.memory;
    let mut discarded = Vec::new();
    let names: Vec<String> = memory.created.keys().cloned().collect();
    for name in names {
        let count = organized.window.get(&name).copied().unwrap_or_default();
        if let Some(reason) = discard_reason(count, policy) {
            memory.created.remove(&name);
            discarded.push(Discarded {
                name,
                reason,
                window_uses: count.uses,
                window_failures: count.failures,
            });
        }
    }
    let categories_assigned = assign_categories(&mut memory, &policy.category_labels, embedder);
    memory.generation = snapshot.generation + 1;
    let report = ConsolidationReport {
        from_generation: snapshot.generation,
        to_generation: memory.generation,
        merged_groups: organized.groups,
        discarded,
        categories_assigned,
        before_size: snapshot.size(),
        after_size: memory.size(),
        embedding_degraded: organized.embedding_degraded,
    };
    (memory, report)
}

/// Consolidate the live generation under the advisory lock; commit unless `dry_run`.
pub fn run_consolidation(
    registry: &Registry,
    policy: &ConsolidationPolicy,
    dry_run: bool,
) -> Result<ConsolidationReport, RegistryError> {
    let _guard = registry.lock_consolidation()?;
    let base = registry.reload()?;
    let log = registry.window_events(&base)?;
    let (next, report) = consolidate(&base, &log, policy, registry.embedder().as_ref());
    if !dry_run {
        registry.commit(&base, &next, &report)?;
    }
    Ok(report)
}
