use std::collections::BTreeMap;

use chrono::NaiveDate;
use serde::{Deserialize, Deserializer, Serialize};

use super::abstract_index::{reconstruct_abstract, InvertedIndex};
use crate::kgstore::{Concept, Source, Store, StoreError, Work};

const OPENALEX_PREFIX: &str = "https://openalex.org/";

/// `https://openalex.org/W123` -> `W123`; other ids pass through.
pub fn short_id(id: &str) -> &str {
    id.strip_prefix(OPENALEX_PREFIX).unwrap_or(id)
}

fn null_default<'de, D, T>(de: D) -> Result<T, D::Error>
where
    D: Deserializer<'de>,
    T: Default + Deserialize<'de>,
{
    Ok(Option::<T>::deserialize(de)?.unwrap_or_default())
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AuthorRef {
    #[serde(default)]
    pub id: Option<String>,
    #[serde(default)]
    pub display_name: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Authorship {
    #[serde(default, deserialize_with = "null_default")]
    pub author: AuthorRef,
    #[serde(default)]
    pub raw_author_name: Option<String>,
}

impl Authorship {
    pub fn name(&self) -> Option<&str> {
        self.author
            .display_name
            .as_deref()
            .or(self.raw_author_name.as_deref())
            .filter(|n| !n.trim().is_empty())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConceptTag {
    pub id: String,
    pub display_name: String,
    pub level: u32,
    #[serde(default)]
    pub score: f64,
}

/// A work as served by the OpenAlex `/works` endpoint (only the fields used).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawWork {
    pub id: String,
    #[serde(default)]
    pub title: Option<String>,
    #[serde(default)]
    pub display_name: Option<String>,
    #[serde(default)]
    pub abstract_inverted_index: Option<InvertedIndex>,
    #[serde(default)]
    pub publication_date: Option<String>,
    #[serde(default, deserialize_with = "null_default")]
    pub authorships: Vec<Authorship>,
    #[serde(default, deserialize_with = "null_default")]
    pub concepts: Vec<ConceptTag>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MissingField {
    Abstract,
    Date,
    Authors,
    Concepts,
}

impl std::fmt::Display for MissingField {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            MissingField::Abstract => "abstract",
            MissingField::Date => "date",
            MissingField::Authors => "authors",
            MissingField::Concepts => "concepts",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Rejection {
    pub work_id: String,
    pub reason: MissingField,
    pub detail: Option<String>,
}

/// A complete work plus the concept records its tags describe.
#[derive(Debug, Clone, PartialEq)]
pub struct Admitted {
    pub work: Work,
    pub concepts: Vec<Concept>,
}

/// Admits a work only with an abstract, a publication date, at least one named
/// author and at least one concept tag scoring `>= min_score`. The rejection
/// names the first missing field in that order.
pub fn filter_complete(raw: &RawWork, min_score: f64) -> Result<Admitted, Rejection> {
    let reject = |reason, detail: Option<String>| Rejection {
        work_id: short_id(&raw.id).to_string(),
        reason,
        detail,
    };

    let abstract_text = match &raw.abstract_inverted_index {
        None => return Err(reject(MissingField::Abstract, None)),
        Some(ix) => reconstruct_abstract(ix).map_err(|e| reject(MissingField::Abstract, Some(e.to_string())))?,
    };
    if abstract_text.trim().is_empty() {
        return Err(reject(MissingField::Abstract, None));
    }

    let date = match raw.publication_date.as_deref().map(str::trim) {
        None | Some("") => return Err(reject(MissingField::Date, None)),
        Some(d) => NaiveDate::parse_from_str(d, "%Y-%m-%d")
            .map_err(|e| reject(MissingField::Date, Some(format!("`{d}`: {e}"))))?,
    };

    let authors: Vec<String> = raw
        .authorships
        .iter()
        .filter_map(|a| a.name().map(str::to_string))
        .collect();
    if authors.is_empty() {
        return Err(reject(MissingField::Authors, None));
    }

    let concepts: Vec<Concept> = raw
        .concepts
        .iter()
        .filter(|t| t.score >= min_score)
        .map(|t| Concept::new(short_id(&t.id), t.display_name.clone(), t.level, Source::Openalex))
        .collect();
    if concepts.is_empty() {
        return Err(reject(MissingField::Concepts, None));
    }

    Ok(Admitted {
        work: Work {
            id: short_id(&raw.id).to_string(),
            title: raw
                .title
                .clone()
                .or_else(|| raw.display_name.clone())
                .unwrap_or_default(),
            abstract_text,
            publication_date: date,
            authors,
            concept_ids: concepts.iter().map(|c| c.id.clone()).collect(),
        },
        concepts,
    })
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct FilterReport {
    pub input: usize,
    pub accepted: usize,
    pub rejected: BTreeMap<MissingField, usize>,
}

impl FilterReport {
    pub fn rejected_total(&self) -> usize {
        self.rejected.values().sum()
    }
}

/// Filters a batch and writes admitted works and their concepts into `store`.
pub fn admit_into<'a>(
    store: &mut Store,
    raws: impl IntoIterator<Item = &'a RawWork>,
    min_score: f64,
) -> Result<FilterReport, StoreError> {
    let mut report = FilterReport::default();
    for raw in raws {
        report.input += 1;
        match filter_complete(raw, min_score) {
            Ok(admitted) => {
                for c in admitted.concepts {
                    store.upsert_concept(c);
                }
                store.upsert_work(admitted.work)?;
                report.accepted += 1;
            }
            Err(rej) => {
                log::debug!("rejected {}: missing {}", rej.work_id, rej.reason);
                *report.rejected.entry(rej.reason).or_insert(0) += 1;
            }
        }
    }
    Ok(report)
}
