//! `pal`: synthesize manifests, replay and score them, cluster unlabeled
//! frames, and serve the labeling API.

use std::fs;
use std::io::Write as _;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context as _;
use clap::{Args, Parser, Subcommand};
use pal_core::config::EngineConfig;
use pal_core::labeling::RequestStatus;
use pal_core::manifest::Manifest;
use pal_core::pipeline::Pipeline;
use pal_core::replay::{render_table, replay_with, trace_jsonl, ReplayOptions, ReplayOutput};
use pal_core::synth::{synth, GeneratorParams};
use pal_core::{emb_format, store, ExecMode};
use pal_service::{AppState, DEFAULT_PORT};

#[derive(Parser)]
#[command(name = "pal", version, about = "Egocentric context engine harness")]
struct Cli {
    /// Engine config (JSON): pipeline settings, thresholds and rules.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// `.palstate` snapshot to load at start and save after learning.
    #[arg(long, global = true)]
    state: Option<PathBuf>,
    /// Generator seed for `synth`; stub embedding seed otherwise.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, default_value_t = DEFAULT_PORT)]
    port: u16,
    #[command(subcommand)]
    command: Verb,
}

#[derive(Subcommand)]
enum Verb {
    /// Write a synthetic manifest with planted ground truth.
    Synth(SynthArgs),
    /// Replay a manifest, write the trace and print the evaluation report.
    Replay(ReplayArgs),
    /// Replay a manifest and print only the JSON report.
    Eval(InputArgs),
    /// Replay a manifest and print cluster reports and pending label requests.
    Cluster(ClusterArgs),
    /// Serve the HTTP API.
    Serve(ServeArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// Generator parameters (JSON); flags below override it.
    #[arg(long)]
    params: Option<PathBuf>,
    #[arg(long)]
    classes: Option<usize>,
    #[arg(long)]
    train_per_class: Option<usize>,
    #[arg(long)]
    test_per_class: Option<usize>,
    /// Minimum pairwise angle between context centroids, in degrees.
    #[arg(long)]
    separation: Option<f64>,
    #[arg(long)]
    noise_sigma: Option<f64>,
    #[arg(long)]
    faces: Option<usize>,
    #[arg(long)]
    probes: Option<usize>,
    #[arg(long)]
    unknown_probes: Option<usize>,
    #[arg(long)]
    cluster_contexts: Option<usize>,
    #[arg(long)]
    cluster_frames: Option<usize>,
    #[arg(long)]
    bins: Option<usize>,
    #[arg(long)]
    dim: Option<usize>,
    /// Append label lines for each planted cluster.
    #[arg(long)]
    label_clusters: bool,
    #[arg(long)]
    followups: Option<usize>,
    /// Output path; stdout when omitted.
    #[arg(long, short)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct InputArgs {
    manifest: PathBuf,
    /// Precomputed embeddings (`.emb`) for frames that carry payload bytes.
    #[arg(long)]
    embeddings: Option<PathBuf>,
    /// Cluster geo bins in parallel.
    #[arg(long)]
    parallel_bins: bool,
}

#[derive(Args)]
struct ReplayArgs {
    #[command(flatten)]
    input: InputArgs,
    /// Per-frame trace (JSON lines).
    #[arg(long)]
    trace: Option<PathBuf>,
    /// Evaluation report (JSON).
    #[arg(long)]
    report: Option<PathBuf>,
    /// Record per-stage latency in the trace and report.
    #[arg(long)]
    trace_latency: bool,
}

#[derive(Args)]
struct ClusterArgs {
    #[command(flatten)]
    input: InputArgs,
}

#[derive(Args)]
struct ServeArgs {
    /// Manifest to ingest before serving.
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long, default_value = "127.0.0.1")]
    host: std::net::IpAddr,
}

enum Failure {
    Threshold,
    Input(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Input(e)
    }
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()))
        .with_writer(std::io::stderr)
        .init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Threshold) => ExitCode::from(1),
        Err(Failure::Input(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    let mut config = match &cli.config {
        Some(p) => EngineConfig::load(p).with_context(|| format!("loading {}", p.display()))?,
        None => EngineConfig::default(),
    };
    if let Some(seed) = cli.seed {
        config.pipeline.stub_seed = seed;
    }
    match cli.command {
        Verb::Synth(args) => synth_cmd(args, cli.seed).map_err(Failure::from),
        Verb::Replay(args) => replay_cmd(args, config, cli.state.as_deref()),
        Verb::Eval(args) => {
            let out = run_replay(&args, config, cli.state.as_deref(), ReplayOptions::default())?;
            println!("{}", serde_json::to_string_pretty(&out.report).context("serializing report")?);
            eprint!("{}", render_table(&out.report));
            if out.report.passed {
                Ok(())
            } else {
                Err(Failure::Threshold)
            }
        }
        Verb::Cluster(args) => {
            let out = run_replay(&args.input, config, cli.state.as_deref(), ReplayOptions::default())?;
            let doc = serde_json::json!({
                "reports": out.pipeline.reports(),
                "label_requests": out.pipeline.label_requests(Some(RequestStatus::Pending)),
            });
            println!("{}", serde_json::to_string_pretty(&doc).context("serializing clusters")?);
            Ok(())
        }
        Verb::Serve(args) => serve_cmd(args, config, cli.state, cli.port).map_err(Failure::from),
    }
}

fn synth_cmd(a: SynthArgs, seed: Option<u64>) -> anyhow::Result<()> {
    let mut p: GeneratorParams = match &a.params {
        Some(path) => serde_json::from_str(&fs::read_to_string(path)?).with_context(|| format!("parsing {}", path.display()))?,
        None => GeneratorParams::default(),
    };
    macro_rules! set {
        ($($flag:ident => $field:ident),*) => { $(if let Some(v) = a.$flag { p.$field = v; })* };
    }
    set!(classes => classes, train_per_class => train_per_class, test_per_class => test_per_class,
        separation => centroid_separation_deg, noise_sigma => noise_sigma, faces => faces, probes => probes,
        unknown_probes => unknown_probes, cluster_contexts => cluster_contexts, cluster_frames => cluster_frames,
        bins => bins, dim => dim, followups => followups_per_context);
    if let Some(s) = seed {
        p.seed = s;
    }
    p.label_clusters |= a.label_clusters;
    let text = synth(&p)?.to_jsonl();
    match &a.out {
        Some(path) => fs::write(path, text).with_context(|| format!("writing {}", path.display()))?,
        None => std::io::stdout().write_all(text.as_bytes())?,
    }
    Ok(())
}

fn load_pipeline(config: &EngineConfig, state: Option<&Path>) -> anyhow::Result<Pipeline> {
    if let Some(path) = state.filter(|p| p.exists()) {
        let snap = store::load(path).with_context(|| format!("loading {}", path.display()))?;
        return Ok(Pipeline::from_snapshot(config.pipeline.clone(), snap)?);
    }
    let mut p = Pipeline::new(config.pipeline.clone());
    if !config.rules.is_empty() {
        p.set_rules(config.rules.clone())?;
    }
    Ok(p)
}

fn add_embeddings(p: &mut Pipeline, path: &Path) -> anyhow::Result<()> {
    let mut f = fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let emb = emb_format::read(&mut std::io::BufReader::new(&mut f))?;
    for (id, v) in emb.records {
        p.add_precomputed(id, v)?;
    }
    Ok(())
}

fn run_replay(
    args: &InputArgs,
    mut config: EngineConfig,
    state: Option<&Path>,
    options: ReplayOptions,
) -> anyhow::Result<ReplayOutput> {
    if args.parallel_bins {
        config.pipeline.exec = ExecMode::Parallel;
    }
    let mut pipeline = load_pipeline(&config, state)?;
    if let Some(path) = &args.embeddings {
        add_embeddings(&mut pipeline, path)?;
    }
    let text = fs::read_to_string(&args.manifest).with_context(|| format!("reading {}", args.manifest.display()))?;
    let manifest = Manifest::parse(&text).with_context(|| format!("in {}", args.manifest.display()))?;
    Ok(replay_with(pipeline, &manifest, &config.thresholds, options)?)
}

fn replay_cmd(a: ReplayArgs, config: EngineConfig, state: Option<&Path>) -> Result<(), Failure> {
    let mut out = run_replay(&a.input, config, state, ReplayOptions { include_latency: a.trace_latency })?;
    if let Some(path) = &a.trace {
        fs::write(path, trace_jsonl(&out.trace)).with_context(|| format!("writing {}", path.display()))?;
    }
    if let Some(path) = &a.report {
        let json = serde_json::to_string_pretty(&out.report).context("serializing report")?;
        fs::write(path, json + "\n").with_context(|| format!("writing {}", path.display()))?;
    }
    if let Some(path) = state {
        let at = out.pipeline.last_timestamp().unwrap_or_default();
        store::save(path, &out.pipeline.snapshot(at)).with_context(|| format!("saving {}", path.display()))?;
    }
    print!("{}", render_table(&out.report));
    if out.report.passed {
        Ok(())
    } else {
        Err(Failure::Threshold)
    }
}

fn serve_cmd(a: ServeArgs, config: EngineConfig, state: Option<PathBuf>, port: u16) -> anyhow::Result<()> {
    let pipeline = load_pipeline(&config, state.as_deref())?;
    let app = match state {
        Some(path) => AppState::with_state_path(pipeline, path),
        None => AppState::new(pipeline),
    };
    if let Some(path) = &a.manifest {
        let manifest = Manifest::parse(&fs::read_to_string(path)?).with_context(|| format!("in {}", path.display()))?;
        let summary = app.ingest_manifest(&manifest)?;
        for f in &summary.failures {
            tracing::warn!(record = f.record, error = %f.error, "manifest line rejected");
        }
        tracing::info!(frames = summary.ticks.len(), "preloaded manifest");
    }
    let addr = SocketAddr::new(a.host, port);
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(pal_service::serve(app, addr))?;
    Ok(())
}
