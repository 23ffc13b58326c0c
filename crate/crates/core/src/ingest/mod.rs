//! OpenAlex ingestion: cursor crawl or local dump, abstract reconstruction and
//! the completeness filter.

mod abstract_index;
mod fetch;
mod record;

use std::fs;
use std::path::Path;

pub use abstract_index::{invert_text, reconstruct_abstract, AbstractError, InvertedIndex};
pub use fetch::{
    Checkpoint, FetchConfig, FetchReport, Fetcher, IngestQuery, YearMonth, DEFAULT_BASE_URL, MAX_PAGE_SIZE,
};
pub use record::{
    admit_into, filter_complete, short_id, Admitted, AuthorRef, Authorship, ConceptTag, FilterReport, MissingField,
    RawWork, Rejection,
};

use crate::http::TransportError;

#[derive(Debug, thiserror::Error)]
pub enum IngestError {
    #[error("invalid query: {0}")]
    InvalidQuery(String),
    #[error("HTTP {status} from {url}; resume from cursor `{cursor}`")]
    Http { status: u16, url: String, cursor: String },
    #[error("{source}; resume from cursor `{cursor}`")]
    Transport {
        #[source]
        source: TransportError,
        cursor: String,
    },
    #[error("unparseable page at cursor `{cursor}`: {message}")]
    MalformedPage { cursor: String, message: String },
    #[error("checkpoint belongs to query `{saved}`, not `{requested}`")]
    CheckpointMismatch { saved: String, requested: String },
    #[error("{path}:{line}: {message}")]
    Dump { path: String, line: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Store(#[from] crate::kgstore::StoreError),
}

/// Reads OpenAlex work records from a JSONL dump, one object per line.
pub fn load_dump(path: &Path) -> Result<Vec<RawWork>, IngestError> {
    let text = fs::read_to_string(path)?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| IngestError::Dump {
                path: path.display().to_string(),
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}
