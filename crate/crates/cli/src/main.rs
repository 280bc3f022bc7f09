mod config;

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{anyhow, Context};
use clap::{Parser, Subcommand};
use serde::Deserialize;
use specrag_core::audit::{
    attribute_manifest, export_attribute_set, export_linkability_set, project_server_view, sample_sessions,
    write_export, AuditError, LinkabilityAnswer, SessionRecord,
};
use specrag_core::lm::{LmBackend, RemoteLm, RemoteLmConfig, TableLm};
use specrag_core::orchestrator::{
    bench_sweep, derive_session_id, BenchCase, BenchError, Orchestrator, OrchestratorError, PromptTemplates,
    SweepGrid, Termination,
};
use specrag_core::pii::PiiDetector;
use specrag_core::protocol::{
    serve_until, DraftRequest, DraftResponse, DraftService, DraftTransport, HttpTransport, InProcessTransport,
    RetryPolicy, ServerMeta, TransportError,
};
use specrag_core::retrieval::{ingest_profile, Bm25Retriever, UserProfile};
use specrag_core::session::SessionError;
use specrag_core::synth;
use specrag_core::transcript::{read_transcripts, Transcript};
use specrag_core::vocab::Vocabulary;

use crate::config::{CliConfig, Layer};

const EXIT_USAGE: u8 = 2;
const EXIT_TRANSPORT: u8 = 3;
const EXIT_VOCAB: u8 = 4;
const EXIT_LEAK: u8 = 5;

#[derive(Parser)]
#[command(name = "specrag", version, about = "Private personalized generation with server drafts and client verification")]
struct Cli {
    /// YAML config file
    #[arg(long, global = true, env = "SPECRAG_CONFIG")]
    config: Option<PathBuf>,
    /// Print the effective configuration and exit
    #[arg(long, global = true)]
    print_config: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the draft server
    Serve {
        #[command(flatten)]
        layer: Layer,
    },
    /// Answer one query for one user profile
    Ask {
        query: String,
        /// Profile file (JSONL, one record per line)
        #[arg(long)]
        profile: PathBuf,
        /// Write the session transcript (JSONL) here
        #[arg(long)]
        transcript: Option<PathBuf>,
        #[command(flatten)]
        layer: Layer,
    },
    /// Sweep k and tau over a query set
    Bench {
        /// Lines of `user_id<TAB>query`, or bare queries assigned to profiles in turn
        #[arg(long)]
        queries: PathBuf,
        /// Directory of profile files
        #[arg(long)]
        profiles: PathBuf,
        /// Aggregate CSV, one row per cell
        #[arg(long)]
        out: PathBuf,
        /// Per-query CSV (default: next to --out)
        #[arg(long)]
        per_query: Option<PathBuf>,
        #[arg(long, value_delimiter = ',')]
        grid_k: Option<Vec<usize>>,
        #[arg(long, value_delimiter = ',')]
        grid_tau: Option<Vec<f64>>,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        #[command(flatten)]
        layer: Layer,
    },
    /// Inspect transcripts
    Audit {
        #[arg(long)]
        transcripts: PathBuf,
        /// PII pattern overrides (YAML)
        #[arg(long)]
        pii_patterns: Option<PathBuf>,
        #[command(subcommand)]
        action: AuditAction,
    },
    /// Write a small synthetic setup (profiles, queries, table models)
    DemoData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Subcommand)]
enum AuditAction {
    /// Exit 5 if any server-bound payload contains PII
    VerifyPii,
    /// Print what the server received, one JSON line per session
    ServerView,
    /// Candidate-profile linkability instances
    ExportLinkability {
        #[arg(long)]
        profiles: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Number of sessions to sample (default: all)
        #[arg(long)]
        sample: Option<usize>,
        #[arg(long, default_value_t = 20)]
        n_candidates: usize,
        #[arg(long, default_value_t = 4)]
        n_negatives: usize,
    },
    /// Records with empty attribute slots for external labeling
    ExportAttributes {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        sample: Option<usize>,
    },
}

/// An error with the process exit code it maps to.
struct Fail {
    code: u8,
    err: anyhow::Error,
}

trait OrExit<T> {
    fn or_exit(self, code: u8) -> Result<T, Fail>;
}

impl<T, E: Into<anyhow::Error>> OrExit<T> for Result<T, E> {
    fn or_exit(self, code: u8) -> Result<T, Fail> {
        self.map_err(|e| Fail { code, err: e.into() })
    }
}

fn usage(msg: impl Into<String>) -> Fail {
    Fail {
        code: EXIT_USAGE,
        err: anyhow!(msg.into()),
    }
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_env("SPECRAG_LOG").unwrap_or_else(|_| "warn".into()),
        )
        .with_writer(std::io::stderr)
        .init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(f) => {
            eprintln!("error: {:#}", f.err);
            ExitCode::from(f.code)
        }
    }
}

fn run(cli: Cli) -> Result<u8, Fail> {
    let file = cli.config.as_deref();
    let resolve = |layer: Layer| -> Result<Option<CliConfig>, Fail> {
        let cfg = CliConfig::load(layer, file).or_exit(EXIT_USAGE)?;
        if cli.print_config {
            print!("{}", cfg.to_yaml());
            return Ok(None);
        }
        Ok(Some(cfg))
    };
    match cli.command {
        Command::Serve { layer } => match resolve(layer)? {
            Some(cfg) => serve(&cfg),
            None => Ok(0),
        },
        Command::Ask {
            query,
            profile,
            transcript,
            layer,
        } => match resolve(layer)? {
            Some(cfg) => ask(&cfg, &query, &profile, transcript.as_deref()),
            None => Ok(0),
        },
        Command::Bench {
            queries,
            profiles,
            out,
            per_query,
            grid_k,
            grid_tau,
            jobs,
            layer,
        } => match resolve(layer)? {
            Some(cfg) => {
                let grid = SweepGrid {
                    ks: grid_k.unwrap_or_else(|| vec![cfg.k]),
                    taus: grid_tau.unwrap_or_else(|| vec![cfg.tau]),
                };
                let per_query = per_query.unwrap_or_else(|| out.with_extension("per_query.csv"));
                bench(&cfg, &queries, &profiles, &out, &per_query, &grid, jobs)
            }
            None => Ok(0),
        },
        Command::Audit {
            transcripts,
            pii_patterns,
            action,
        } => audit(&transcripts, pii_patterns.as_deref(), action),
        Command::DemoData { out, seed } => {
            synth::write_demo(&out, seed).or_exit(1)?;
            println!("wrote demo data to {}", out.display());
            Ok(0)
        }
    }
}

#[derive(Deserialize)]
struct VocabFile {
    vocab: Vec<String>,
    eos: String,
    #[serde(default)]
    unk: Option<String>,
}

fn load_vocab(path: &Path) -> anyhow::Result<Vocabulary> {
    let text = fs::read_to_string(path).with_context(|| format!("cannot read vocabulary {}", path.display()))?;
    let file: VocabFile = serde_yaml::from_str(&text).with_context(|| format!("invalid vocabulary {}", path.display()))?;
    Ok(Vocabulary::from_surfaces(&file.vocab, &file.eos, file.unk.as_deref())?)
}

fn load_backend(
    cfg: &CliConfig,
    table: Option<&Path>,
    remote: Option<&str>,
    side: &str,
) -> Result<Arc<dyn LmBackend>, Fail> {
    match (table, remote) {
        (Some(_), Some(_)) => Err(usage(format!("give either a {side} table or a {side} endpoint, not both"))),
        (Some(path), None) => {
            let lm = TableLm::load(path)
                .with_context(|| format!("cannot load {side} table {}", path.display()))
                .or_exit(EXIT_USAGE)?;
            Ok(Arc::new(lm))
        }
        (None, Some(url)) => {
            let vocab_path = cfg
                .remote_vocab
                .as_deref()
                .ok_or_else(|| usage("a remote model needs --remote-vocab"))?;
            let vocab = load_vocab(vocab_path).or_exit(EXIT_USAGE)?;
            let mut rc = RemoteLmConfig::new(url, cfg.remote_model.clone());
            rc.top_logprobs = cfg.top_logprobs;
            rc.timeout = cfg.timeout().or_exit(EXIT_USAGE)?;
            Ok(Arc::new(RemoteLm::new(rc, vocab).or_exit(EXIT_USAGE)?))
        }
        (None, None) => Err(usage(format!("no {side} model: use --{side}-table or --{side}-remote"))),
    }
}

fn detector(path: Option<&Path>) -> Result<PiiDetector, Fail> {
    match path {
        Some(p) => PiiDetector::from_file(p).or_exit(EXIT_USAGE),
        None => Ok(PiiDetector::default()),
    }
}

fn serve(cfg: &CliConfig) -> Result<u8, Fail> {
    let backend = load_backend(cfg, cfg.server_table.as_deref(), cfg.server_remote.as_deref(), "server")?;
    if cfg.server_remote.is_some() {
        let probe = [backend.vocabulary().eos_id()];
        backend
            .next_distribution(&probe)
            .context("backend unavailable at startup")
            .or_exit(EXIT_TRANSPORT)?;
    }
    let service = Arc::new(DraftService::new(backend, cfg.model_name.clone()));
    let timeout = cfg.timeout().or_exit(EXIT_USAGE)?;
    let rt = tokio::runtime::Runtime::new().or_exit(1)?;
    rt.block_on(async {
        let listener = tokio::net::TcpListener::bind(&cfg.bind)
            .await
            .with_context(|| format!("cannot bind {}", cfg.bind))
            .or_exit(EXIT_TRANSPORT)?;
        let addr = listener.local_addr().or_exit(1)?;
        println!("listening on http://{addr}");
        let _ = std::io::stdout().flush();
        serve_until(listener, service, timeout, shutdown_signal()).await.or_exit(1)?;
        Ok(0)
    })
}

async fn shutdown_signal() {
    let ctrl_c = async {
        let _ = tokio::signal::ctrl_c().await;
    };
    #[cfg(unix)]
    let term = async {
        match tokio::signal::unix::signal(tokio::signal::unix::SignalKind::terminate()) {
            Ok(mut s) => {
                s.recv().await;
            }
            Err(_) => std::future::pending::<()>().await,
        }
    };
    #[cfg(not(unix))]
    let term = std::future::pending::<()>();
    tokio::select! {
        _ = ctrl_c => {},
        _ = term => {},
    }
}

/// Stands in for the server when `k = 0`; never contacted.
struct NoServer;

impl DraftTransport for NoServer {
    fn meta(&self) -> Result<ServerMeta, TransportError> {
        Err(TransportError::Unreachable {
            attempts: 0,
            detail: "no draft server configured".into(),
        })
    }
    fn request_draft(&self, _: &DraftRequest) -> Result<DraftResponse, TransportError> {
        self.meta().map(|_| unreachable!())
    }
}

fn transport(cfg: &CliConfig, needs_server: bool) -> Result<Box<dyn DraftTransport>, Fail> {
    if cfg.in_process {
        let backend = load_backend(cfg, cfg.server_table.as_deref(), cfg.server_remote.as_deref(), "server")?;
        return Ok(Box::new(InProcessTransport::new(Arc::new(DraftService::new(
            backend,
            cfg.model_name.clone(),
        )))));
    }
    if let Some(url) = &cfg.server {
        let retry = RetryPolicy {
            max_attempts: cfg.retries.max(1),
            ..RetryPolicy::default()
        };
        return Ok(Box::new(
            HttpTransport::new(url.clone(), cfg.timeout().or_exit(EXIT_USAGE)?, retry).or_exit(EXIT_TRANSPORT)?,
        ));
    }
    if needs_server {
        return Err(usage("no draft server: use --server URL or --in-process"));
    }
    Ok(Box::new(NoServer))
}

fn read_profile(path: &Path) -> Result<UserProfile, Fail> {
    ingest_profile(path)
        .with_context(|| format!("cannot load profile {}", path.display()))
        .or_exit(EXIT_USAGE)
}

fn session_failure(e: OrchestratorError) -> Fail {
    let code = match &e {
        OrchestratorError::Session(SessionError::VocabularyMismatch { .. }) => EXIT_VOCAB,
        OrchestratorError::Transport(_) | OrchestratorError::Client(_) => EXIT_TRANSPORT,
        OrchestratorError::Session(_) | OrchestratorError::Retrieval(_) | OrchestratorError::Vocab(_) => EXIT_USAGE,
        _ => 1,
    };
    Fail { code, err: e.into() }
}

struct Parts {
    client: Arc<dyn LmBackend>,
    transport: Box<dyn DraftTransport>,
    detector: PiiDetector,
    templates: PromptTemplates,
}

impl Parts {
    fn load(cfg: &CliConfig, needs_server: bool) -> Result<Self, Fail> {
        Ok(Self {
            client: load_backend(cfg, cfg.client_table.as_deref(), cfg.client_remote.as_deref(), "client")?,
            transport: transport(cfg, needs_server)?,
            detector: detector(cfg.pii_patterns.as_deref())?,
            templates: PromptTemplates::load(cfg.template_gen.as_deref(), cfg.template_rag.as_deref())
                .or_exit(EXIT_USAGE)?,
        })
    }

    fn orchestrator<'a>(&'a self, keywords: &'a [String]) -> Orchestrator<'a> {
        Orchestrator {
            client: &*self.client,
            transport: &*self.transport,
            retriever: &Bm25Retriever,
            detector: &self.detector,
            templates: &self.templates,
            custom_keywords: keywords,
        }
    }
}

fn ask(cfg: &CliConfig, query: &str, profile_path: &Path, transcript_path: Option<&Path>) -> Result<u8, Fail> {
    let protocol = cfg.protocol().or_exit(EXIT_USAGE)?;
    let profile = read_profile(profile_path)?;
    let parts = Parts::load(cfg, protocol.k > 0)?;
    let session_id = derive_session_id(&profile.user_id, query, &protocol);
    let out = parts
        .orchestrator(&cfg.deny_keywords)
        .run_session(&session_id, query, &profile, &protocol)
        .map_err(session_failure)?;
    if let Some(path) = transcript_path {
        fs::write(path, out.transcript.to_jsonl())
            .with_context(|| format!("cannot write transcript {}", path.display()))
            .or_exit(1)?;
    }
    println!("{}", out.response);
    let s = &out.stats;
    eprintln!(
        "tokens={} client={} server={} rounds={} interventions={} client_frac={:.4} end={:?}",
        s.total_tokens, s.client_tokens, s.server_tokens, s.rounds, s.interventions, s.client_token_fraction, out.termination
    );
    match out.termination {
        Termination::TransportError(d) | Termination::BackendUnavailable(d) => Err(Fail {
            code: EXIT_TRANSPORT,
            err: anyhow!("session ended early: {d}"),
        }),
        _ => Ok(0),
    }
}

fn load_profiles(dir: &Path) -> Result<Vec<UserProfile>, Fail> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("cannot read profile directory {}", dir.display()))
        .or_exit(EXIT_USAGE)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file())
        .collect();
    paths.sort();
    let profiles = paths.iter().map(|p| read_profile(p)).collect::<Result<Vec<_>, _>>()?;
    if profiles.is_empty() {
        return Err(usage(format!("no profiles in {}", dir.display())));
    }
    Ok(profiles)
}

fn bench_cases(queries: &Path, profiles: &[UserProfile]) -> Result<Vec<BenchCase>, Fail> {
    let text = fs::read_to_string(queries)
        .with_context(|| format!("cannot read queries {}", queries.display()))
        .or_exit(EXIT_USAGE)?;
    let by_id: BTreeMap<&str, &UserProfile> = profiles.iter().map(|p| (p.user_id.as_str(), p)).collect();
    let mut cases = Vec::new();
    for (i, line) in text.lines().filter(|l| !l.trim().is_empty()).enumerate() {
        let (profile, query) = match line.split_once('\t') {
            Some((user, q)) => (
                *by_id
                    .get(user)
                    .ok_or_else(|| usage(format!("query line {}: unknown user {user:?}", i + 1)))?,
                q,
            ),
            None => (&profiles[i % profiles.len()], line),
        };
        cases.push(BenchCase {
            query: query.to_string(),
            profile: profile.clone(),
        });
    }
    Ok(cases)
}

fn bench(
    cfg: &CliConfig,
    queries: &Path,
    profiles_dir: &Path,
    out: &Path,
    per_query: &Path,
    grid: &SweepGrid,
    jobs: usize,
) -> Result<u8, Fail> {
    let base = cfg.protocol().or_exit(EXIT_USAGE)?;
    if grid.ks.is_empty() || grid.taus.is_empty() {
        return Err(usage("sweep grid is empty"));
    }
    let profiles = load_profiles(profiles_dir)?;
    let cases = bench_cases(queries, &profiles)?;
    let parts = Parts::load(cfg, grid.ks.iter().any(|&k| k > 0))?;
    let report = bench_sweep(&parts.orchestrator(&cfg.deny_keywords), &cases, &base, grid, jobs).map_err(|e| {
        let code = match e {
            BenchError::EmptyGrid | BenchError::NoCases => EXIT_USAGE,
            _ => 1,
        };
        Fail { code, err: e.into() }
    })?;
    let write = |path: &Path, f: &dyn Fn(&mut Vec<u8>) -> std::io::Result<()>| -> Result<(), Fail> {
        let mut buf = Vec::new();
        f(&mut buf).or_exit(1)?;
        fs::write(path, buf)
            .with_context(|| format!("cannot write {}", path.display()))
            .or_exit(1)
    };
    write(out, &|b| report.write_aggregate_csv(b))?;
    write(per_query, &|b| report.write_per_query_csv(b))?;
    for (k, lo, hi) in &report.monotonicity_violations {
        eprintln!("warning: client share fell between tau={lo} and tau={hi} at k={k}");
    }
    let failed = report.cells.iter().filter(|c| c.aggregate.is_err()).count();
    eprintln!("{} cells, {} failed", report.cells.len(), failed);
    if report.all_failed() {
        return Err(Fail {
            code: 1,
            err: anyhow!("every cell failed"),
        });
    }
    Ok(0)
}

fn load_transcripts(dir: &Path) -> Result<Vec<Transcript>, Fail> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("cannot read transcript directory {}", dir.display()))
        .or_exit(EXIT_USAGE)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "jsonl"))
        .collect();
    paths.sort();
    let mut all = Vec::new();
    for p in paths {
        let f = fs::File::open(&p).or_exit(EXIT_USAGE)?;
        let ts = read_transcripts(std::io::BufReader::new(f))
            .with_context(|| format!("cannot parse {}", p.display()))
            .or_exit(EXIT_USAGE)?;
        all.extend(ts);
    }
    Ok(all)
}

fn audit(dir: &Path, patterns: Option<&Path>, action: AuditAction) -> Result<u8, Fail> {
    let transcripts = load_transcripts(dir)?;
    let det = detector(patterns)?;
    match action {
        AuditAction::VerifyPii => {
            let mut leaks = 0;
            let mut incomplete = 0;
            for t in &transcripts {
                match project_server_view(t, &det) {
                    Ok(_) => {}
                    Err(e @ AuditError::PiiLeakDetected { .. }) => {
                        leaks += 1;
                        eprintln!("{e}");
                    }
                    Err(e) => {
                        incomplete += 1;
                        eprintln!("{e}");
                    }
                }
            }
            println!("{} sessions checked, {leaks} leaks", transcripts.len());
            if leaks > 0 {
                Ok(EXIT_LEAK)
            } else if incomplete > 0 {
                Err(usage(format!("{incomplete} transcript(s) could not be audited")))
            } else {
                Ok(0)
            }
        }
        AuditAction::ServerView => {
            let mut stdout = std::io::stdout().lock();
            for t in &transcripts {
                let view = project_server_view(t, &det).map_err(|e| Fail {
                    code: if matches!(e, AuditError::PiiLeakDetected { .. }) { EXIT_LEAK } else { EXIT_USAGE },
                    err: e.into(),
                })?;
                let line = serde_json::json!({
                    "session_id": view.session_id,
                    "messages": view.messages,
                    "final_visible_text": view.final_visible_text,
                });
                writeln!(stdout, "{line}").or_exit(1)?;
            }
            Ok(0)
        }
        AuditAction::ExportLinkability {
            profiles,
            out,
            seed,
            sample,
            n_candidates,
            n_negatives,
        } => {
            let profiles = load_profiles(&profiles)?;
            let records = session_records(&transcripts, &det, sample, seed)?;
            let export = export_linkability_set(&profiles, &records, n_candidates, n_negatives, seed)
                .or_exit(EXIT_USAGE)?;
            write_export::<_, LinkabilityAnswer>(&out, "linkability", &export.instances, Some(&export.answers), &export.manifest)
                .or_exit(1)?;
            println!("{} linkability instances written to {}", export.instances.len(), out.display());
            Ok(0)
        }
        AuditAction::ExportAttributes { out, seed, sample } => {
            let records = session_records(&transcripts, &det, sample, seed)?;
            let attrs = export_attribute_set(&records);
            write_export::<_, ()>(&out, "attributes", &attrs, None, &attribute_manifest(attrs.len())).or_exit(1)?;
            println!("{} attribute records written to {}", attrs.len(), out.display());
            Ok(0)
        }
    }
}

fn session_records(
    transcripts: &[Transcript],
    det: &PiiDetector,
    sample: Option<usize>,
    seed: u64,
) -> Result<Vec<SessionRecord>, Fail> {
    let records = transcripts
        .iter()
        .map(|t| SessionRecord::from_transcript(t, det))
        .collect::<Result<Vec<_>, _>>()
        .or_exit(EXIT_USAGE)?;
    Ok(match sample {
        Some(n) => sample_sessions(&records, n, seed),
        None => records,
    })
}
