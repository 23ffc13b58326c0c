//! Corpus statistics: rank-frequency power law, log prevalence with median
//! regioning, rank tests between innovative and other items, innovation
//! rates and KDE series for plotting elsewhere.

pub mod export;
mod kde;
mod mannwhitney;
mod novelty;
mod powerlaw;
mod prevalence;

pub use kde::{kde_series, silverman_bandwidth, Grid};
pub use mannwhitney::{exact_u_counts, mann_whitney, midranks, PValueMethod, RankTestResult, EXACT_LIMIT};
pub use novelty::{
    concept_frequencies, innovation_rate, is_innovative, novelty_study, path_frequencies, region_share,
    GroupComparison, InnovationRates, NoveltyReport, Sampling,
};
pub use powerlaw::{fit_power_law, rank_frequency, FitRange, PowerLawFit};
pub use prevalence::{
    median, median_split, prevalence, prevalence_table, ItemKind, PrevalenceRecord, PrevalenceTable, Region,
};

#[derive(Debug, thiserror::Error)]
pub enum AnalyticsError {
    #[error("{0}: input is empty")]
    Empty(&'static str),
    #[error("need at least {needed} points, got {got}")]
    TooFewPoints { needed: usize, got: usize },
    #[error("degenerate input: {0}")]
    Degenerate(&'static str),
    #[error("values have zero variance; a histogram is the better summary")]
    ZeroVariance,
    #[error("input contains non-finite values")]
    NonFinite,
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
