use std::fs;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use egcr_core::engine::{ingest, IngestSources, Model, ModelConfig, DEFAULT_DIM, DEFAULT_TOP_K};
use egcr_core::eval::{load_redial, run_experiment, ExperimentConfig};
use egcr_core::explainer::{client_from_env, PromptTemplate};
use egcr_core::recommender::FitConfig;
use egcr_core::synthetic::{PlantedConfig, PlantedCorpus};
use egcr_service::{router, SessionManager};
use tracing::{info, warn};
use tracing_subscriber::EnvFilter;

/// Explainable conversational recommendation over a fused knowledge graph.
#[derive(Debug, Parser)]
#[command(name = "egcr", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Build a model directory from graph, alignment and review files.
    Ingest(IngestArgs),
    /// Fit scorer parameters on dialogs with gold recommendations.
    Fit(FitArgs),
    /// Replay dialogs and write a metrics report.
    Eval(EvalArgs),
    /// Serve the session API over HTTP.
    Serve(ServeArgs),
    /// Explain the agent's action at one turn of a dialog.
    Explain(ExplainArgs),
    /// Write a planted synthetic corpus.
    Synth(SynthArgs),
}

#[derive(Debug, Args)]
struct IngestArgs {
    /// Item-graph triples, `head<TAB>relation<TAB>tail`.
    #[arg(long)]
    triples: PathBuf,
    /// Item-graph entities, one JSON object per line.
    #[arg(long)]
    entities: PathBuf,
    /// Item-to-concept alignment, `item_id<TAB>concept_id`.
    #[arg(long, requires_all = ["concept_triples", "concept_entities"])]
    alignment: Option<PathBuf>,
    /// Review corpus, one JSON object per line.
    #[arg(long)]
    reviews: Option<PathBuf>,
    #[arg(long, requires = "concept_entities")]
    concept_triples: Option<PathBuf>,
    #[arg(long, requires = "concept_triples")]
    concept_entities: Option<PathBuf>,
    /// Output model directory.
    #[arg(long, default_value = "model")]
    out: PathBuf,
    #[arg(long, default_value_t = DEFAULT_DIM)]
    dim: usize,
    #[arg(long, default_value_t = 2)]
    layers: usize,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    /// Weight of the graph embedding when fusing reviews.
    #[arg(long, default_value_t = 0.5)]
    alpha: f64,
    #[arg(long, default_value_t = DEFAULT_TOP_K)]
    top_k: usize,
    /// Directory holding `<name>.txt` explanation templates.
    #[arg(long, requires = "template")]
    template_dir: Option<PathBuf>,
    /// Template name inside `--template-dir`.
    #[arg(long, requires = "template_dir")]
    template: Option<String>,
}

#[derive(Debug, Args)]
struct FitArgs {
    #[arg(long)]
    dialogs: PathBuf,
    /// Model directory to update.
    #[arg(long)]
    out: PathBuf,
    /// Read the model from here instead of `--out`.
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 200)]
    epochs: usize,
    #[arg(long, default_value_t = 1.0)]
    lr: f64,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    dialogs: PathBuf,
    #[arg(long)]
    model: PathBuf,
    /// Recall cutoffs.
    #[arg(long, value_delimiter = ',', default_value = "1,10,50")]
    k: Vec<usize>,
    /// JSON report path; a plain-text table goes next to it with `.txt`.
    #[arg(long)]
    report: PathBuf,
}

#[derive(Debug, Args)]
struct ServeArgs {
    #[arg(long, default_value_t = 8080)]
    port: u16,
    #[arg(long)]
    model: PathBuf,
    #[arg(long, default_value = "127.0.0.1")]
    host: String,
    /// Where session logs live.
    #[arg(long, default_value = "egcr-data")]
    data_dir: PathBuf,
}

#[derive(Debug, Args)]
struct ExplainArgs {
    #[arg(long)]
    dialog: PathBuf,
    /// 1-based index of the recommender turn to explain.
    #[arg(long)]
    turn: usize,
    #[arg(long, default_value = "model")]
    model: PathBuf,
    /// Conversation to pick when the file holds several; defaults to the first.
    #[arg(long)]
    conversation: Option<String>,
}

#[derive(Debug, Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(long, default_value_t = 50)]
    items: usize,
    #[arg(long, default_value_t = 10)]
    attributes: usize,
    #[arg(long, default_value_t = 200)]
    train: usize,
    #[arg(long, default_value_t = 100)]
    test: usize,
}

fn main() -> Result<()> {
    tracing_subscriber::fmt()
        .with_env_filter(EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new("info")))
        .with_writer(std::io::stderr)
        .init();
    match Cli::parse().command {
        Command::Ingest(a) => run_ingest(a),
        Command::Fit(a) => run_fit(a),
        Command::Eval(a) => run_eval(a),
        Command::Serve(a) => run_serve(a),
        Command::Explain(a) => run_explain(a),
        Command::Synth(a) => run_synth(a),
    }
}

fn run_ingest(a: IngestArgs) -> Result<()> {
    let mut config = ModelConfig::new(a.dim, a.seed);
    config.encoder.layers = a.layers;
    config.alpha = a.alpha;
    config.top_k = a.top_k;
    if let (Some(dir), Some(name)) = (&a.template_dir, &a.template) {
        config.template = Some(PromptTemplate::load(dir, name).with_context(|| format!("loading template {name}"))?);
    }
    let src = IngestSources {
        triples: a.triples,
        entities: a.entities,
        concept_triples: a.concept_triples,
        concept_entities: a.concept_entities,
        alignment: a.alignment,
        reviews: a.reviews,
    };
    let model = ingest(&src, config).context("ingestion failed")?;
    model.save(&a.out).with_context(|| format!("writing {}", a.out.display()))?;
    println!(
        "model written to {} ({} entities, {} relations, {} triples)",
        a.out.display(),
        model.graph().num_entities(),
        model.graph().num_relations(),
        model.graph().num_triples()
    );
    Ok(())
}

fn run_fit(a: FitArgs) -> Result<()> {
    let source = a.model.as_deref().unwrap_or(&a.out);
    let mut model = Model::load(source).with_context(|| format!("loading model from {}", source.display()))?;
    let loaded = load_redial(&a.dialogs)?;
    if loaded.skipped > 0 {
        warn!(skipped = loaded.skipped, "malformed dialog lines skipped");
    }
    let cfg = FitConfig { epochs: a.epochs, lr: a.lr, seed: a.seed, ..FitConfig::default() };
    let summary = model.fit(&loaded.dialogs, &cfg)?.clone();
    if source != a.out.as_path() {
        model.save(&a.out)?;
    } else {
        model.save_scorer(&a.out)?;
    }
    println!(
        "fitted on {} turns ({} skipped): loss {:.6} -> {:.6}, beta {:.4}",
        summary.examples,
        summary.skipped,
        summary.initial_loss,
        summary.final_loss,
        model.params().beta
    );
    Ok(())
}

fn run_eval(a: EvalArgs) -> Result<()> {
    let cfg = ExperimentConfig { dialogs: a.dialogs, model_dir: a.model, ks: a.k };
    let report = run_experiment(&cfg)?;
    if let Some(parent) = a.report.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    fs::write(&a.report, report.to_json()).with_context(|| format!("writing {}", a.report.display()))?;
    let table = report.to_table("This run");
    let table_path = a.report.with_extension("txt");
    fs::write(&table_path, &table)?;
    print!("{table}");
    info!(report = %a.report.display(), table = %table_path.display(), "report written");
    Ok(())
}

fn run_serve(a: ServeArgs) -> Result<()> {
    let model = match Model::load(&a.model) {
        Ok(m) => Some(Arc::new(m)),
        Err(e) => {
            warn!(error = %e, "model not loaded; turn requests will get 503");
            None
        }
    };
    let client: Arc<dyn egcr_core::explainer::CompletionClient> = Arc::from(client_from_env());
    info!(client = client.name(), "explanation client selected");
    let manager = Arc::new(SessionManager::open(&a.data_dir, model, client)?);
    let addr: SocketAddr = format!("{}:{}", a.host, a.port).parse().context("invalid --host/--port")?;
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::bind(addr).await.with_context(|| format!("binding {addr}"))?;
        let local = listener.local_addr()?;
        // scripts read this line to find the port when `--port 0` is used
        println!("listening on http://{local}");
        info!(addr = %local, "listening");
        egcr_service::serve(listener, router(manager)).await?;
        Ok(())
    })
}

fn run_explain(a: ExplainArgs) -> Result<()> {
    let model = Model::load(&a.model).with_context(|| format!("loading model from {}", a.model.display()))?;
    let loaded = load_redial(&a.dialog)?;
    let dialog = match &a.conversation {
        Some(id) => loaded.dialogs.iter().find(|d| &d.conversation_id == id),
        None => loaded.dialogs.first(),
    };
    let Some(dialog) = dialog else { bail!("no matching dialog in {}", a.dialog.display()) };
    let history = model.relink(&dialog.history_before(a.turn));
    if history.is_empty() {
        bail!("turn {} has no preceding turns to explain", a.turn);
    }
    let client = client_from_env();
    let agent = model.respond(&history, client.as_ref())?;
    print_explanation(&model, &agent, dialog.turn(a.turn).map(|t| t.text.as_str()));
    Ok(())
}

fn print_explanation(model: &Model, agent: &egcr_core::engine::AgentTurn, gold_text: Option<&str>) {
    let g = model.graph();
    println!("=== prompt ===\n{}", agent.prompt);
    println!("=== recommendations ===");
    for r in &agent.recommendation.ranked {
        println!("{:>10.4}  {} (id {})", r.score, g.name_of(r.entity), r.entity);
    }
    println!("=== reasoning path ===\n{}", agent.path.render_chain(g));
    let out = serde_json::json!({
        "response_text": agent.response_text,
        "explanation": agent.explanation,
    });
    println!("=== explanation ===\n{}", serde_json::to_string_pretty(&out).expect("json values serialize"));
    if let Some(t) = gold_text {
        println!("=== recorded turn ===\n{t}");
    }
}

fn run_synth(a: SynthArgs) -> Result<()> {
    let cfg = PlantedConfig {
        items: a.items,
        attributes: a.attributes,
        train_dialogs: a.train,
        test_dialogs: a.test,
        seed: a.seed,
        ..PlantedConfig::default()
    };
    cfg.validate().map_err(anyhow::Error::msg)?;
    let corpus = PlantedCorpus::generate(&cfg);
    let files = corpus.write(&a.out)?;
    print_paths(&a.out, &[&files.entities, &files.triples, &files.train, &files.test]);
    Ok(())
}

fn print_paths(dir: &Path, paths: &[&Path]) {
    println!("planted corpus written to {}", dir.display());
    for p in paths {
        println!("  {}", p.display());
    }
}
