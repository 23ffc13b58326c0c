//! Resolves free-text concept names to store concepts: normalized-name
//! equality, then normalized Levenshtein similarity against the store, then
//! external knowledge-base labels and aliases.

use std::fs;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::http::{HttpClient, TransportError};
use crate::ingest::short_id;
use crate::kgstore::{Concept, Store};
use crate::text::{normalize_name, similarity};

pub const FUZZY_THRESHOLD: f64 = 0.85;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KbEntry {
    pub id: String,
    pub label: String,
    #[serde(default)]
    pub aliases: Vec<String>,
    #[serde(default)]
    pub level: Option<u32>,
    /// Id of the same concept in the store's taxonomy, when the KB knows it.
    #[serde(default)]
    pub store_id: Option<String>,
}

impl KbEntry {
    fn best_similarity(&self, normalized: &str) -> f64 {
        std::iter::once(&self.label)
            .chain(&self.aliases)
            .map(|l| similarity(normalized, &normalize_name(l)))
            .fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum KbError {
    #[error("knowledge base timed out")]
    Timeout,
    #[error("knowledge base unavailable: {0}")]
    Unavailable(String),
}

pub trait KbClient: Send + Sync {
    fn name(&self) -> &str;
    fn search(&self, name: &str) -> Result<Vec<KbEntry>, KbError>;
}

/// In-memory KB, e.g. a label/alias export loaded from JSONL.
#[derive(Debug, Clone, Default)]
pub struct StaticKb {
    name: String,
    entries: Vec<KbEntry>,
}

impl StaticKb {
    pub fn new(name: impl Into<String>, entries: Vec<KbEntry>) -> Self {
        StaticKb {
            name: name.into(),
            entries,
        }
    }

    pub fn from_jsonl(name: impl Into<String>, path: &Path) -> std::io::Result<Self> {
        let entries = fs::read_to_string(path)?
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| serde_json::from_str(l).map_err(std::io::Error::other))
            .collect::<Result<_, _>>()?;
        Ok(StaticKb::new(name, entries))
    }
}

impl KbClient for StaticKb {
    fn name(&self) -> &str {
        &self.name
    }

    fn search(&self, name: &str) -> Result<Vec<KbEntry>, KbError> {
        let n = normalize_name(name);
        Ok(self
            .entries
            .iter()
            .filter(|e| e.best_similarity(&n) >= FUZZY_THRESHOLD)
            .cloned()
            .collect())
    }
}

/// Searches the OpenAlex `/concepts` endpoint.
pub struct OpenAlexKb<C> {
    client: C,
    base_url: String,
}

impl<C: HttpClient> OpenAlexKb<C> {
    pub fn new(client: C, base_url: impl Into<String>) -> Self {
        OpenAlexKb {
            client,
            base_url: base_url.into(),
        }
    }
}

impl<C: HttpClient> KbClient for OpenAlexKb<C> {
    fn name(&self) -> &str {
        "openalex"
    }

    fn search(&self, name: &str) -> Result<Vec<KbEntry>, KbError> {
        let q: String = url::form_urlencoded::byte_serialize(name.as_bytes()).collect();
        let url = format!(
            "{}/concepts?search={q}&per-page=10",
            self.base_url.trim_end_matches('/')
        );
        let resp = self.client.get(&url).map_err(|e| match e {
            TransportError::Timeout => KbError::Timeout,
            other => KbError::Unavailable(other.to_string()),
        })?;
        if resp.status != 200 {
            return Err(KbError::Unavailable(format!("HTTP {}", resp.status)));
        }
        let v: Value = serde_json::from_str(&resp.body).map_err(|e| KbError::Unavailable(e.to_string()))?;
        Ok(v["results"]
            .as_array()
            .map(Vec::as_slice)
            .unwrap_or_default()
            .iter()
            .filter_map(|r| {
                let id = short_id(r["id"].as_str()?).to_string();
                Some(KbEntry {
                    label: r["display_name"].as_str()?.to_string(),
                    aliases: Vec::new(),
                    level: r["level"].as_u64().map(|l| l as u32),
                    store_id: Some(id.clone()),
                    id,
                })
            })
            .collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NearMatch {
    pub id: String,
    pub label: String,
    pub similarity: f64,
    pub source: String,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Resolution {
    /// Resolved to a concept already known to the store (or this run).
    Known {
        id: String,
        similarity: f64,
    },
    /// Matched a KB entry with no store counterpart; carries the concept to create.
    New {
        concept: Concept,
        kb: String,
        similarity: f64,
    },
    Unmatched {
        near: Vec<NearMatch>,
    },
    /// No match so far and at least one KB timed out.
    Timeout {
        near: Vec<NearMatch>,
    },
}

pub struct Matcher<'a> {
    store: &'a Store,
    extra: &'a [Concept],
    kbs: &'a [Arc<dyn KbClient>],
    pub threshold: f64,
}

impl<'a> Matcher<'a> {
    pub fn new(store: &'a Store, extra: &'a [Concept], kbs: &'a [Arc<dyn KbClient>]) -> Self {
        Matcher {
            store,
            extra,
            kbs,
            threshold: FUZZY_THRESHOLD,
        }
    }

    fn known(&self) -> impl Iterator<Item = &'a Concept> {
        self.store.concepts().iter().chain(self.extra)
    }

    fn is_known(&self, id: &str) -> bool {
        self.store.contains_concept(id) || self.extra.iter().any(|c| c.id == id)
    }

    /// Exact normalized-name lookup only; the most general concept wins ties.
    pub fn exact(&self, name: &str) -> Option<&'a Concept> {
        let n = normalize_name(name);
        self.known()
            .filter(|c| c.normalized_name == n)
            .min_by(|a, b| (a.level, &a.id).cmp(&(b.level, &b.id)))
    }

    pub fn resolve(&self, name: &str) -> Resolution {
        if let Some(c) = self.exact(name) {
            return Resolution::Known {
                id: c.id.clone(),
                similarity: 1.0,
            };
        }
        let n = normalize_name(name);
        let mut scored: Vec<NearMatch> = self
            .known()
            .map(|c| NearMatch {
                id: c.id.clone(),
                label: c.name.clone(),
                similarity: similarity(&n, &c.normalized_name),
                source: "store".into(),
            })
            .collect();
        let mut timed_out = false;
        let mut fresh: Vec<(Concept, String, f64)> = Vec::new();
        let store_hit = scored.iter().any(|m| m.similarity >= self.threshold);
        if !store_hit {
            for kb in self.kbs {
                match kb.search(name) {
                    Ok(entries) => {
                        for e in entries {
                            let sim = e.best_similarity(&n);
                            match &e.store_id {
                                Some(id) if self.is_known(id) => scored.push(NearMatch {
                                    id: id.clone(),
                                    label: e.label.clone(),
                                    similarity: sim,
                                    source: kb.name().to_string(),
                                }),
                                _ => {
                                    if let (Some(level), true) = (e.level, sim >= self.threshold) {
                                        let id =
                                            e.store_id.clone().unwrap_or_else(|| format!("{}:{}", kb.name(), e.id));
                                        fresh.push((
                                            Concept::new(id, e.label.clone(), level, crate::kgstore::Source::Llm),
                                            kb.name().to_string(),
                                            sim,
                                        ));
                                    }
                                }
                            }
                        }
                    }
                    Err(KbError::Timeout) => timed_out = true,
                    Err(e) => log::warn!("kb {} failed for `{name}`: {e}", kb.name()),
                }
            }
        }
        scored.sort_by(|a, b| b.similarity.total_cmp(&a.similarity).then_with(|| a.id.cmp(&b.id)));
        if let Some(best) = scored.first().filter(|m| m.similarity >= self.threshold) {
            return Resolution::Known {
                id: best.id.clone(),
                similarity: best.similarity,
            };
        }
        fresh.sort_by(|a, b| b.2.total_cmp(&a.2).then_with(|| a.0.id.cmp(&b.0.id)));
        if let Some((concept, kb, similarity)) = fresh.into_iter().next() {
            return Resolution::New {
                concept,
                kb,
                similarity,
            };
        }
        scored.truncate(3);
        if timed_out {
            Resolution::Timeout { near: scored }
        } else {
            Resolution::Unmatched { near: scored }
        }
    }
}
