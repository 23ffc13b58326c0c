use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use conceptpath::ingest::YearMonth;
use conceptpath::pipeline::Ablation;

#[derive(Debug, Parser)]
#[command(
    name = "conceptpath",
    version,
    about = "Concept paths over a scholarly knowledge graph"
)]
pub struct Cli {
    /// Workspace directory holding the JSONL tables.
    #[arg(short, long, global = true, default_value = ".")]
    pub workspace: PathBuf,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Crawl OpenAlex works of one institution and admit the complete ones.
    Ingest(IngestArgs),
    /// Rewrite the edge table as a strict level-ordered hierarchy.
    Clean,
    /// Concept path extraction.
    Paths {
        #[command(subcommand)]
        command: PathsCommand,
    },
    /// Corpus statistics written to analysis/ in the workspace.
    Analyze(AnalyzeArgs),
    /// Constrained extraction pipeline.
    Pipeline {
        #[command(subcommand)]
        command: PipelineCommand,
    },
    /// Score pipeline configurations against gold annotations.
    Evaluate(EvaluateArgs),
    /// Serve the review API.
    Serve(ServeArgs),
}

#[derive(Debug, Args)]
pub struct IngestArgs {
    /// OpenAlex institution id, e.g. I4210120917.
    #[arg(long)]
    pub institution: String,
    /// First publication month, YYYY-MM.
    #[arg(long)]
    pub from: YearMonth,
    /// Last publication month, YYYY-MM.
    #[arg(long)]
    pub to: YearMonth,
    /// Drop concept tags scoring below this.
    #[arg(long, default_value_t = 0.0)]
    pub min_score: f64,
    /// Contact address for the OpenAlex polite pool.
    #[arg(long)]
    pub email: Option<String>,
    /// Continue from the saved cursor.
    #[arg(long)]
    pub resume: bool,
    #[arg(long, default_value = conceptpath::ingest::DEFAULT_BASE_URL)]
    pub base_url: String,
    #[arg(long, default_value_t = conceptpath::ingest::MAX_PAGE_SIZE)]
    pub page_size: u32,
    /// Attempts per page after a throttling or transport error.
    #[arg(long, default_value_t = 5)]
    pub max_retries: u32,
}

#[derive(Debug, Subcommand)]
pub enum PathsCommand {
    /// Enumerate complete paths of every work into paths.jsonl.
    Extract {
        /// Leave out isolated concepts.
        #[arg(long)]
        no_singletons: bool,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Analysis {
    Powerlaw,
    Prevalence,
    Innovation,
    Spans,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SamplingArg {
    Distinct,
    Occurrence,
}

#[derive(Debug, Args)]
pub struct AnalyzeArgs {
    pub analysis: Analysis,
    /// Fit the power law on the first K ranks only.
    #[arg(long)]
    pub top_k: Option<u64>,
    /// Prevalence samples per distinct item or per occurrence.
    #[arg(long, value_enum, default_value_t = SamplingArg::Distinct)]
    pub sampling: SamplingArg,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum BackendKind {
    Mock,
    Http,
}

#[derive(Debug, Clone, Args)]
pub struct BackendArgs {
    #[arg(long, value_enum)]
    pub backend: Option<BackendKind>,
    /// Scripted responses (JSONL) for the mock backend.
    #[arg(long, required_if_eq("backend", "mock"))]
    pub script: Option<PathBuf>,
    /// Chat-completions URL for the http backend.
    #[arg(long, required_if_eq("backend", "http"))]
    pub endpoint: Option<String>,
    #[arg(long, required_if_eq("backend", "http"))]
    pub model: Option<String>,
    /// OpenAlex base URL used as external KB in Stage 2.
    #[arg(long)]
    pub kb_url: Option<String>,
    /// Request timeout in seconds for http backends.
    #[arg(long, default_value_t = 120)]
    pub timeout: u64,
}

#[derive(Debug, Subcommand)]
pub enum PipelineCommand {
    /// Run or resume the pipeline over the workspace's works.
    Run(PipelineRunArgs),
}

#[derive(Debug, Args)]
pub struct PipelineRunArgs {
    #[command(flatten)]
    pub backend: BackendArgs,
    #[arg(long, default_value_t = 1)]
    pub parallel: usize,
    #[arg(long, default_value = "end_to_end")]
    pub config: Ablation,
    /// Restrict the run to these works.
    #[arg(long = "work")]
    pub works: Vec<String>,
    /// Ignore earlier runs and start every selected work afresh.
    #[arg(long)]
    pub rerun: bool,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// Configuration name, repeatable; `all` runs every configuration.
    #[arg(long, required = true, value_parser = configuration_name)]
    pub config: Vec<String>,
    /// Directory with gold_concepts.jsonl and gold_paths.jsonl.
    #[arg(long)]
    pub gold: PathBuf,
    #[command(flatten)]
    pub backend: BackendArgs,
}

fn configuration_name(s: &str) -> Result<String, String> {
    if s == "all" {
        return Ok(s.to_string());
    }
    s.parse::<Ablation>().map(|a| a.as_str().to_string()).map_err(|_| {
        let names: Vec<_> = Ablation::ALL.iter().map(Ablation::as_str).collect();
        format!("expected `all` or one of {}", names.join(", "))
    })
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long, default_value_t = 8080)]
    pub port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    pub host: String,
    /// Static review UI bundle to serve at /.
    #[arg(long)]
    pub ui: Option<PathBuf>,
    /// Backend used to resume parked works once their items are decided.
    #[command(flatten)]
    pub backend: BackendArgs,
}
