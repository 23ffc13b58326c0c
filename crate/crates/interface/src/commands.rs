use std::fs::{self, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use anyhow::{bail, Context};
use conceptpath::analytics::export::{
    write_gaps, write_kde, write_lengths, write_prevalence, write_rank_frequency, write_spans, Report, REPORT_FILE,
};
use conceptpath::analytics::{
    concept_frequencies, fit_power_law, innovation_rate, kde_series, novelty_study, path_frequencies, prevalence_table,
    rank_frequency, FitRange, Grid, GroupComparison, ItemKind, PowerLawFit, Sampling,
};
use conceptpath::evalharness::{run_ablation, write_reports, Gold};
use conceptpath::ingest::{admit_into, load_dump, FetchConfig, Fetcher, IngestQuery};
use conceptpath::kgstore::{load_workspace, save_workspace, SharedStore, Store};
use conceptpath::paths::{extract_all, level_span_matrix, path_length_distribution, store_gap_stats, PathOptions};
use conceptpath::pipeline::{
    run_pipeline, Ablation, Backend, ChatCompletionsBackend, KbClient, NoExpert, OpenAlexKb, PipelineConfig,
    PipelineContext, ScriptedMock,
};
use conceptpath::share::Share;

use crate::api::{self, ApiState, Resume};
use crate::cli::{
    Analysis, AnalyzeArgs, BackendArgs, BackendKind, Cli, Command, EvaluateArgs, IngestArgs, PathsCommand,
    PipelineCommand, PipelineRunArgs, SamplingArg, ServeArgs,
};
use crate::net::BlockingClient;

pub const CHECKPOINT_FILE: &str = "ingest_checkpoint.json";
pub const RAW_FILE: &str = "ingest_raw.jsonl";
pub const ANALYSIS_DIR: &str = "analysis";
pub const EVAL_DIR: &str = "eval";
const KDE_POINTS: usize = 256;

/// Runs one command. `Ok(false)` means it finished but not everything
/// succeeded, which the binary reports with exit status 1.
pub fn run(cli: Cli) -> anyhow::Result<bool> {
    let ws = cli.workspace;
    match cli.command {
        Command::Ingest(args) => ingest(&ws, args),
        Command::Clean => clean(&ws),
        Command::Paths {
            command: PathsCommand::Extract { no_singletons },
        } => extract(&ws, !no_singletons),
        Command::Analyze(args) => analyze(&ws, args),
        Command::Pipeline {
            command: PipelineCommand::Run(args),
        } => pipeline_run(&ws, args),
        Command::Evaluate(args) => evaluate(&ws, args),
        Command::Serve(args) => serve(&ws, args),
    }
}

fn open(ws: &Path) -> anyhow::Result<Store> {
    Ok(load_workspace(ws)?)
}

fn open_or_create(ws: &Path) -> anyhow::Result<Store> {
    if !ws.exists() {
        fs::create_dir_all(ws).with_context(|| format!("creating {}", ws.display()))?;
    }
    open(ws)
}

fn print_json(value: &impl serde::Serialize) -> anyhow::Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn ingest(ws: &Path, args: IngestArgs) -> anyhow::Result<bool> {
    let mut store = open_or_create(ws)?;
    let mut query = IngestQuery::new(args.institution, args.from, args.to);
    query.page_size = args.page_size;
    query.polite_email = args.email;
    let raw_path = ws.join(RAW_FILE);
    let file = OpenOptions::new()
        .create(true)
        .append(args.resume)
        .write(true)
        .truncate(!args.resume)
        .open(&raw_path)?;
    let mut out = BufWriter::new(file);
    let client = BlockingClient::new(Duration::from_secs(60))?;
    let config = FetchConfig {
        base_url: args.base_url,
        max_retries: args.max_retries,
        ..FetchConfig::default()
    };
    let fetched = Fetcher::new(&client, config).fetch_works(&query, &ws.join(CHECKPOINT_FILE), args.resume, |raw| {
        serde_json::to_writer(&mut out, &raw)?;
        out.write_all(b"\n")?;
        Ok(())
    });
    out.flush()?;
    let fetched = fetched?;
    let raws = load_dump(&raw_path)?;
    let filtered = admit_into(&mut store, &raws, args.min_score)?;
    save_workspace(&store, ws)?;
    print_json(&serde_json::json!({ "fetch": fetched, "filter": filtered }))?;
    Ok(true)
}

fn clean(ws: &Path) -> anyhow::Result<bool> {
    let mut store = open(ws)?;
    let cleaned = store.cleaned_graph()?;
    let report = cleaned.report.clone();
    store.set_edges(cleaned.edges.clone())?;
    store.meta_mut().cleaned = true;
    save_workspace(&store, ws)?;
    print_json(&report)?;
    Ok(true)
}

fn extract(ws: &Path, include_singletons: bool) -> anyhow::Result<bool> {
    let mut store = open(ws)?;
    let paths = extract_all(&store, PathOptions { include_singletons })?;
    if paths.is_empty() {
        log::warn!("no concept paths: the workspace has no tagged works");
    }
    let n = paths.len();
    store.set_paths(paths);
    save_workspace(&store, ws)?;
    println!("{n} paths");
    Ok(true)
}

fn share(s: Option<Share>) -> Option<f64> {
    s.map(|s| s.value())
}

fn set_fit(report: &mut Report, prefix: &str, fit: &PowerLawFit) {
    report.set(&format!("{prefix}_a"), fit.exponent);
    report.set(&format!("{prefix}_c"), fit.coefficient);
    report.set(&format!("{prefix}_r2"), fit.r_squared);
    report.set(&format!("{prefix}_fit_points"), fit.points as u64);
}

fn set_comparison(report: &mut Report, prefix: &str, cmp: &GroupComparison) {
    report.set(&format!("{prefix}_innovative_n"), cmp.innovative_n as u64);
    report.set(&format!("{prefix}_other_n"), cmp.other_n as u64);
    report.set_opt(
        &format!("{prefix}_low_share_innovative"),
        share(cmp.low_share_innovative),
    );
    report.set_opt(&format!("{prefix}_low_share_other"), share(cmp.low_share_other));
    let t = cmp.test.as_ref();
    report.set_opt(&format!("{prefix}_mw_u"), t.map(|t| t.u_statistic));
    report.set_opt(&format!("{prefix}_mw_z"), t.map(|t| t.z_score));
    report.set_opt(&format!("{prefix}_mw_p"), t.map(|t| t.p_value));
    report.set_opt(&format!("{prefix}_mw_r"), t.map(|t| t.effect_size_r));
}

fn kde_file(dir: &Path, name: &str, values: &[f64]) -> anyhow::Result<()> {
    match kde_series(values, &Grid::Auto { points: KDE_POINTS }) {
        Ok(series) => write_kde(&dir.join(name), &series)?,
        Err(e) => log::warn!("{name} not written: {e}"),
    }
    Ok(())
}

fn analyze(ws: &Path, args: AnalyzeArgs) -> anyhow::Result<bool> {
    let store = open(ws)?;
    let dir = ws.join(ANALYSIS_DIR);
    fs::create_dir_all(&dir)?;
    let report_path = dir.join(REPORT_FILE);
    let mut report = Report::load(&report_path)?;
    let paths = store.paths();
    if paths.is_empty() && args.analysis != Analysis::Powerlaw {
        log::warn!("the workspace holds no paths; run `paths extract` first");
    }
    match args.analysis {
        Analysis::Powerlaw => {
            let range = FitRange { top_k: args.top_k };
            for (prefix, counts) in [
                ("concept_powerlaw", concept_frequencies(&store)),
                ("path_powerlaw", path_frequencies(paths)),
            ] {
                let rows = rank_frequency(&counts);
                write_rank_frequency(&dir.join(format!("{prefix}_rank_frequency.csv")), &rows)?;
                let pts: Vec<(u64, f64)> = rows.iter().map(|(r, _, f)| (*r, *f as f64)).collect();
                match fit_power_law(&pts, range) {
                    Ok(fit) => set_fit(&mut report, prefix, &fit),
                    Err(e) => log::warn!("{prefix} fit skipped: {e}"),
                }
            }
        }
        Analysis::Prevalence => {
            let sampling = match args.sampling {
                SamplingArg::Distinct => Sampling::DistinctItem,
                SamplingArg::Occurrence => Sampling::PerOccurrence,
            };
            let concepts = prevalence_table(&concept_frequencies(&store), ItemKind::Concept);
            let path_table = prevalence_table(&path_frequencies(paths), ItemKind::Path);
            write_prevalence(&dir.join("concept_prevalence.csv"), &concepts.records)?;
            write_prevalence(&dir.join("path_prevalence.csv"), &path_table.records)?;
            let study = novelty_study(&store, paths, sampling);
            report.set_opt("concept_prevalence_threshold", study.concept_threshold);
            report.set_opt("path_prevalence_threshold", study.path_threshold);
            set_comparison(&mut report, "concept", &study.concepts);
            set_comparison(&mut report, "path", &study.paths);
            kde_file(
                &dir,
                "kde_concept_innovative.csv",
                &study.concepts.innovative_prevalence,
            )?;
            kde_file(&dir, "kde_concept_other.csv", &study.concepts.other_prevalence)?;
            kde_file(&dir, "kde_path_innovative.csv", &study.paths.innovative_prevalence)?;
            kde_file(&dir, "kde_path_other.csv", &study.paths.other_prevalence)?;
        }
        Analysis::Innovation => {
            let rates = innovation_rate(paths, store.annotations());
            report.set("innovation_low_paths", rates.low_paths);
            report.set("innovation_high_paths", rates.high_paths);
            report.set_opt("innovation_rate_low", share(rates.rate_low));
            report.set_opt("innovation_rate_high", share(rates.rate_high));
            report.set_opt("innovative_share_in_low", share(rates.share_of_innovative_in_low));
        }
        Analysis::Spans => {
            let lengths = path_length_distribution(paths);
            let spans = level_span_matrix(paths);
            let gaps = store_gap_stats(&store)?;
            write_lengths(&dir.join("path_lengths.csv"), &lengths)?;
            write_spans(&dir.join("level_spans.csv"), &spans)?;
            write_gaps(&dir.join("edge_gaps.csv"), &gaps)?;
            report.set("paths_total", lengths.total);
            report.set_opt("path_len_2_3_share", share(lengths.share_len_2_3));
            report.set_opt("span_within_0_3_share", share(spans.share_within_0_3));
            report.set("edges_total", gaps.total);
            report.set_opt("edge_gap_le_2_share", share(gaps.share_gap_le_2));
            report.set_opt("edge_levels_0_2_share", share(gaps.share_levels_0_2));
        }
    }
    report.save(&report_path)?;
    print_json(&report.0)?;
    Ok(true)
}

/// Builds the configured backend. A mock replaying a script is fast-forwarded
/// past responses already consumed by earlier runs.
fn build_backend(args: &BackendArgs, prior: Option<&Store>) -> anyhow::Result<Option<Arc<dyn Backend>>> {
    let Some(kind) = args.backend else {
        return Ok(None);
    };
    let backend: Arc<dyn Backend> = match kind {
        BackendKind::Mock => {
            let script = args.script.as_ref().context("--backend mock needs --script")?;
            let mock =
                ScriptedMock::from_jsonl(script).with_context(|| format!("reading script {}", script.display()))?;
            for run in prior.map(Store::runs).unwrap_or_default() {
                mock.skip(&run.work_id, run.backend_calls as usize);
            }
            Arc::new(mock)
        }
        BackendKind::Http => {
            let endpoint = args.endpoint.clone().context("--backend http needs --endpoint")?;
            let model = args.model.clone().context("--backend http needs --model")?;
            let client = BlockingClient::new(Duration::from_secs(args.timeout))?;
            Arc::new(ChatCompletionsBackend::new(client, endpoint, model))
        }
    };
    Ok(Some(backend))
}

fn build_kbs(args: &BackendArgs) -> anyhow::Result<Vec<Arc<dyn KbClient>>> {
    match &args.kb_url {
        Some(url) => {
            let client = BlockingClient::new(Duration::from_secs(30))?;
            Ok(vec![Arc::new(OpenAlexKb::new(client, url.clone()))])
        }
        None => Ok(Vec::new()),
    }
}

fn pipeline_run(ws: &Path, args: PipelineRunArgs) -> anyhow::Result<bool> {
    let store = open(ws)?;
    let backend = build_backend(&args.backend, (!args.rerun).then_some(&store))?.context("--backend is required")?;
    let mut ctx = PipelineContext::new(&*backend, &NoExpert);
    ctx.kbs = build_kbs(&args.backend)?;
    ctx.config.ablation = args.config;
    let shared = SharedStore::new(store);
    let works = (!args.works.is_empty()).then_some(args.works.as_slice());
    let summary = run_pipeline(&shared, works, &ctx, args.parallel.max(1), args.rerun)?;
    save_workspace(&shared.snapshot(), ws)?;
    print_json(&summary)?;
    if summary.awaiting_review > 0 {
        log::warn!("{} work(s) wait for review decisions", summary.awaiting_review);
    }
    if summary.awaiting_retry > 0 {
        log::warn!("{} work(s) wait for a knowledge base retry", summary.awaiting_retry);
    }
    Ok(summary.failed == 0 && summary.rejected == 0)
}

fn configurations(names: &[String]) -> anyhow::Result<Vec<Ablation>> {
    if names.iter().any(|n| n == "all") {
        return Ok(Ablation::ALL.to_vec());
    }
    let mut out = Vec::new();
    for n in names {
        let a: Ablation = n.parse().map_err(anyhow::Error::msg)?;
        if !out.contains(&a) {
            out.push(a);
        }
    }
    Ok(out)
}

fn evaluate(ws: &Path, args: EvaluateArgs) -> anyhow::Result<bool> {
    let configs = configurations(&args.config)?;
    if args.backend.backend.is_none() {
        bail!("--backend is required");
    }
    let store = open(ws)?;
    let gold = Gold::load(&args.gold, &store)?;
    let kbs = build_kbs(&args.backend)?;
    let mut reports = Vec::new();
    for config in configs {
        let backend = build_backend(&args.backend, None)?.expect("backend checked above");
        let mut ctx = PipelineContext::new(&*backend, &NoExpert);
        ctx.kbs = kbs.clone();
        reports.push(run_ablation(config, &store, &gold, &ctx)?);
    }
    let dir = ws.join(EVAL_DIR);
    write_reports(&dir, &reports)?;
    for r in &reports {
        for unit in &r.reports {
            println!(
                "{:<20} {:<9} P={:.4} R={:.4} F1={:.4}",
                r.configuration.as_str(),
                unit.unit.as_str(),
                unit.precision,
                unit.recall,
                unit.f1
            );
        }
    }
    let failed: usize = reports.iter().map(|r| r.failed_works.len()).sum();
    if failed > 0 {
        log::warn!("{failed} work run(s) did not complete; see {}", dir.display());
    }
    Ok(failed == 0)
}

/// Resumes a work with the serve process's backend, then saves the workspace.
pub struct PipelineResumer {
    pub backend: Arc<dyn Backend>,
    pub kbs: Vec<Arc<dyn KbClient>>,
    pub config: PipelineConfig,
    pub workspace: PathBuf,
}

impl Resume for PipelineResumer {
    fn resume(&self, shared: &SharedStore, work_id: &str) -> anyhow::Result<()> {
        let mut ctx = PipelineContext::new(&*self.backend, &NoExpert);
        ctx.kbs = self.kbs.clone();
        ctx.config = self.config.clone();
        let summary = run_pipeline(shared, Some(&[work_id.to_string()]), &ctx, 1, false)?;
        shared.write(|s| save_workspace(s, &self.workspace))?;
        log::info!("resumed {work_id}: {summary:?}");
        Ok(())
    }
}

fn serve(ws: &Path, args: ServeArgs) -> anyhow::Result<bool> {
    let store = open(ws)?;
    // blocking HTTP clients must be built before the async runtime starts
    let resumer = match build_backend(&args.backend, Some(&store))? {
        Some(backend) => Some(Arc::new(PipelineResumer {
            backend,
            kbs: build_kbs(&args.backend)?,
            config: PipelineConfig::default(),
            workspace: ws.to_path_buf(),
        }) as Arc<dyn Resume>),
        None => None,
    };
    let mut state = ApiState::new(SharedStore::new(store), ws.to_path_buf());
    state.resumer = resumer;
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(async move {
        let mut app = api::router(Arc::new(state)).layer(tower_http::cors::CorsLayer::permissive());
        if let Some(ui) = &args.ui {
            app = app.fallback_service(tower_http::services::ServeDir::new(ui));
        }
        let listener = tokio::net::TcpListener::bind((args.host.as_str(), args.port)).await?;
        log::info!("listening on http://{}", listener.local_addr()?);
        axum::serve(listener, app).await?;
        anyhow::Ok(())
    })?;
    Ok(true)
}
