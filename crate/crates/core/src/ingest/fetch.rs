//! Cursor-paginated crawl of the OpenAlex `/works` endpoint.
//!
//! After every page the next cursor is written to a checkpoint file, so an
//! interrupted crawl resumes where it stopped. Cursor pages are inherently
//! sequential: each request needs the cursor returned by the previous one.

use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;
use std::time::{Duration, Instant};

use chrono::{Datelike, NaiveDate};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::record::{short_id, RawWork};
use super::IngestError;
use crate::http::HttpClient;

pub const DEFAULT_BASE_URL: &str = "https://api.openalex.org";
pub const MAX_PAGE_SIZE: u32 = 200;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct YearMonth {
    pub year: i32,
    pub month: u32,
}

impl YearMonth {
    pub fn first_day(&self) -> NaiveDate {
        NaiveDate::from_ymd_opt(self.year, self.month, 1).expect("validated month")
    }

    pub fn last_day(&self) -> NaiveDate {
        let (y, m) = if self.month == 12 {
            (self.year + 1, 1)
        } else {
            (self.year, self.month + 1)
        };
        NaiveDate::from_ymd_opt(y, m, 1)
            .expect("validated month")
            .pred_opt()
            .expect("not MIN")
    }
}

impl FromStr for YearMonth {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (y, m) = s.split_once('-').ok_or_else(|| format!("`{s}` is not YYYY-MM"))?;
        let year: i32 = y.parse().map_err(|_| format!("bad year in `{s}`"))?;
        let month: u32 = m.parse().map_err(|_| format!("bad month in `{s}`"))?;
        if !(1..=12).contains(&month) || y.len() != 4 {
            return Err(format!("`{s}` is not YYYY-MM"));
        }
        Ok(YearMonth { year, month })
    }
}

impl TryFrom<String> for YearMonth {
    type Error = String;

    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

impl From<YearMonth> for String {
    fn from(ym: YearMonth) -> String {
        ym.to_string()
    }
}

impl fmt::Display for YearMonth {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:04}-{:02}", self.year, self.month)
    }
}

impl From<NaiveDate> for YearMonth {
    fn from(d: NaiveDate) -> Self {
        YearMonth {
            year: d.year(),
            month: d.month(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IngestQuery {
    /// OpenAlex institution id, e.g. `I4210112993`.
    pub institution: String,
    pub date_from: YearMonth,
    pub date_to: YearMonth,
    pub page_size: u32,
    #[serde(default)]
    pub polite_email: Option<String>,
}

impl IngestQuery {
    pub fn new(institution: impl Into<String>, date_from: YearMonth, date_to: YearMonth) -> Self {
        IngestQuery {
            institution: institution.into(),
            date_from,
            date_to,
            page_size: MAX_PAGE_SIZE,
            polite_email: None,
        }
    }

    pub fn validate(&self) -> Result<(), IngestError> {
        if self.date_from > self.date_to {
            return Err(IngestError::InvalidQuery(format!(
                "date_from {} is after date_to {}",
                self.date_from, self.date_to
            )));
        }
        if !(1..=MAX_PAGE_SIZE).contains(&self.page_size) {
            return Err(IngestError::InvalidQuery(format!(
                "page_size {} outside 1..={MAX_PAGE_SIZE}",
                self.page_size
            )));
        }
        if self.institution.trim().is_empty() {
            return Err(IngestError::InvalidQuery("institution is empty".into()));
        }
        Ok(())
    }

    /// Identity of the query, stored in checkpoints to refuse mismatched resumes.
    pub fn fingerprint(&self) -> String {
        format!(
            "{}|{}|{}|{}",
            short_id(&self.institution),
            self.date_from,
            self.date_to,
            self.page_size
        )
    }

    pub fn page_url(&self, base_url: &str, cursor: &str) -> String {
        let enc = |s: &str| url::form_urlencoded::byte_serialize(s.as_bytes()).collect::<String>();
        let mut url = format!(
            "{}/works?filter=institutions.id:{},from_publication_date:{},to_publication_date:{}&per-page={}&cursor={}",
            base_url.trim_end_matches('/'),
            short_id(&self.institution),
            self.date_from.first_day(),
            self.date_to.last_day(),
            self.page_size,
            enc(cursor),
        );
        if let Some(email) = &self.polite_email {
            url.push_str("&mailto=");
            url.push_str(&enc(email));
        }
        url
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub query: String,
    /// Cursor of the next page to request; `None` once the crawl is done.
    pub next_cursor: Option<String>,
    pub pages: u64,
    pub works: u64,
    pub done: bool,
}

impl Checkpoint {
    pub fn load(path: &Path) -> Result<Option<Checkpoint>, IngestError> {
        if !path.exists() {
            return Ok(None);
        }
        Ok(Some(serde_json::from_str(&fs::read_to_string(path)?)?))
    }

    pub fn save(&self, path: &Path) -> Result<(), IngestError> {
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, serde_json::to_string_pretty(self)?)?;
        fs::rename(&tmp, path)?;
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct FetchConfig {
    pub base_url: String,
    /// `None` disables rate limiting.
    pub requests_per_second: Option<f64>,
    pub max_retries: u32,
    pub backoff_base: Duration,
    pub backoff_cap: Duration,
}

impl Default for FetchConfig {
    fn default() -> Self {
        FetchConfig {
            base_url: DEFAULT_BASE_URL.to_string(),
            requests_per_second: Some(8.0),
            max_retries: 5,
            backoff_base: Duration::from_millis(500),
            backoff_cap: Duration::from_secs(30),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct FetchReport {
    pub pages: u64,
    pub works: u64,
    pub duplicates: u64,
    pub malformed_records: u64,
    pub malformed_pages: u64,
    pub retries: u64,
    pub resumed: bool,
}

pub struct Fetcher<'c, C: HttpClient + ?Sized> {
    client: &'c C,
    config: FetchConfig,
    sleep: Box<dyn Fn(Duration) + Send + Sync + 'c>,
    last_request: Option<Instant>,
}

impl<'c, C: HttpClient + ?Sized> Fetcher<'c, C> {
    pub fn new(client: &'c C, config: FetchConfig) -> Self {
        Fetcher {
            client,
            config,
            sleep: Box::new(std::thread::sleep),
            last_request: None,
        }
    }

    /// Replaces the sleep used for rate limiting and backoff.
    pub fn with_sleeper(mut self, sleep: impl Fn(Duration) + Send + Sync + 'c) -> Self {
        self.sleep = Box::new(sleep);
        self
    }

    fn throttle(&mut self) {
        if let (Some(rps), Some(last)) = (self.config.requests_per_second, self.last_request) {
            let min_gap = Duration::from_secs_f64(1.0 / rps);
            let elapsed = last.elapsed();
            if elapsed < min_gap {
                (self.sleep)(min_gap - elapsed);
            }
        }
        self.last_request = Some(Instant::now());
    }

    fn request(&mut self, url: &str, cursor: &str, report: &mut FetchReport) -> Result<String, IngestError> {
        let mut attempt = 0;
        loop {
            self.throttle();
            let outcome = self.client.get(url);
            let retryable = match &outcome {
                Ok(r) if r.status == 200 => return Ok(outcome.unwrap().body),
                Ok(r) => matches!(r.status, 429 | 500 | 502 | 503 | 504),
                Err(_) => true,
            };
            if !retryable || attempt >= self.config.max_retries {
                return Err(match outcome {
                    Ok(r) => IngestError::Http {
                        status: r.status,
                        url: url.to_string(),
                        cursor: cursor.to_string(),
                    },
                    Err(e) => IngestError::Transport {
                        source: e,
                        cursor: cursor.to_string(),
                    },
                });
            }
            let delay = self
                .config
                .backoff_base
                .saturating_mul(1 << attempt.min(16))
                .min(self.config.backoff_cap);
            log::warn!("retrying {url} in {delay:?} (attempt {})", attempt + 1);
            (self.sleep)(delay);
            attempt += 1;
            report.retries += 1;
        }
    }

    /// Streams every matching work to `sink` exactly once, checkpointing after
    /// each page. With `resume`, an unfinished checkpoint for the same query
    /// picks up at its stored cursor.
    pub fn fetch_works(
        &mut self,
        query: &IngestQuery,
        checkpoint_path: &Path,
        resume: bool,
        mut sink: impl FnMut(RawWork) -> Result<(), IngestError>,
    ) -> Result<FetchReport, IngestError> {
        query.validate()?;
        let mut report = FetchReport::default();
        let mut checkpoint = Checkpoint {
            query: query.fingerprint(),
            next_cursor: Some("*".to_string()),
            pages: 0,
            works: 0,
            done: false,
        };
        if resume {
            if let Some(saved) = Checkpoint::load(checkpoint_path)? {
                if saved.query != checkpoint.query {
                    return Err(IngestError::CheckpointMismatch {
                        saved: saved.query,
                        requested: checkpoint.query,
                    });
                }
                report.resumed = true;
                checkpoint = saved;
            }
        }

        let mut seen: HashSet<String> = HashSet::new();
        while let Some(cursor) = checkpoint.next_cursor.clone() {
            let url = query.page_url(&self.config.base_url, &cursor);
            let body = self.request(&url, &cursor, &mut report)?;
            let value: Value = serde_json::from_str(&body).unwrap_or(Value::Null);
            let next = value
                .pointer("/meta/next_cursor")
                .and_then(Value::as_str)
                .map(str::to_string);
            let results = match value.get("results").and_then(Value::as_array) {
                Some(r) => r.as_slice(),
                None => {
                    log::warn!("skipping malformed page at cursor `{cursor}`");
                    report.malformed_pages += 1;
                    if next.is_none() {
                        return Err(IngestError::MalformedPage {
                            cursor,
                            message: "no results array and no next cursor".into(),
                        });
                    }
                    &[]
                }
            };
            for value in results {
                let raw: RawWork = match serde_json::from_value(value.clone()) {
                    Ok(r) => r,
                    Err(e) => {
                        log::warn!("skipping malformed work record: {e}");
                        report.malformed_records += 1;
                        continue;
                    }
                };
                if !seen.insert(short_id(&raw.id).to_string()) {
                    report.duplicates += 1;
                    continue;
                }
                sink(raw)?;
                report.works += 1;
                checkpoint.works += 1;
            }
            report.pages += 1;
            checkpoint.pages += 1;
            // an empty well-formed page ends the crawl even if a cursor is echoed
            let exhausted = value
                .get("results")
                .and_then(Value::as_array)
                .is_some_and(|r| r.is_empty());
            checkpoint.next_cursor = next.filter(|_| !exhausted);
            checkpoint.done = checkpoint.next_cursor.is_none();
            checkpoint.save(checkpoint_path)?;
        }
        if !checkpoint.done {
            checkpoint.done = true;
            checkpoint.save(checkpoint_path)?;
        }
        Ok(report)
    }
}
