use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use ensview::dataio::SchemaHints;
use ensview::ensemble::{self, auto_select, Hillclimb, SelectParams};
use ensview::layout::LayoutMode;
use ensview::library::{build_library_with, save_library, BuildEvent, BuildOptions, DataSource};
use ensview::models::Grid;
use ensview::session::{replay, SessionManager, Workspace, WorkspaceConfig};
use serde_json::json;

#[derive(Parser)]
#[command(
    name = "ensview",
    version,
    about = "Build model libraries, select ensembles and serve interactive sessions"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train every spec of a grid and write the library directory.
    BuildLibrary(BuildArgs),
    /// Greedy ensemble selection over a saved library.
    AutoSelect(SelectArgs),
    /// Write the data-space frame of the automatic ensemble as JSON.
    ExportLayout(ExportArgs),
    /// Serve the session API over HTTP.
    Serve(ServeArgs),
    /// Execute a JSONL script of API calls headlessly.
    Replay(ReplayArgs),
}

#[derive(Args)]
struct DataArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    label: String,
    #[arg(long, default_value_t = 0.25)]
    test_fraction: f64,
    #[arg(long, default_value_t = 5)]
    folds: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Columns forced categorical.
    #[arg(long, value_delimiter = ',')]
    categorical: Vec<String>,
    /// Columns forced numeric.
    #[arg(long, value_delimiter = ',')]
    numeric: Vec<String>,
}

#[derive(Args)]
struct BuildArgs {
    #[command(flatten)]
    data: DataArgs,
    /// `default` (49 specs) or `large` (100 specs).
    #[arg(long, default_value = "default")]
    grid: String,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct LibArgs {
    #[arg(long)]
    lib: PathBuf,
    /// Dataset path, when it moved since the library was built.
    #[arg(long)]
    data: Option<PathBuf>,
}

#[derive(Args)]
struct SelectOpts {
    /// Hillclimb metric: acc_cv or auc_w.
    #[arg(long, default_value = "acc_cv")]
    metric: String,
    #[arg(long, default_value_t = 10)]
    max_size: usize,
    #[arg(long, default_value_t = 1)]
    bags: usize,
    #[arg(long, default_value_t = 0.5)]
    bag_fraction: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

impl SelectOpts {
    fn params(&self) -> Result<SelectParams> {
        Ok(SelectParams {
            hillclimb: Hillclimb::parse(&self.metric)?,
            max_size: self.max_size,
            bags: self.bags,
            bag_fraction: self.bag_fraction,
            seed: self.seed,
        })
    }
}

#[derive(Args)]
struct SelectArgs {
    #[command(flatten)]
    lib: LibArgs,
    #[command(flatten)]
    select: SelectOpts,
    #[arg(long, default_value = "ensemble.json")]
    out: PathBuf,
}

#[derive(Args)]
struct ViewArgs {
    /// Show a seeded sample of this many test instances.
    #[arg(long)]
    viz_sample: Option<usize>,
    #[arg(long, default_value_t = 30.0)]
    perplexity: f64,
    #[arg(long, default_value_t = 1000)]
    tsne_iters: usize,
    /// Seed for t-SNE and the visual sample.
    #[arg(long, default_value_t = 0)]
    layout_seed: u64,
    #[arg(long, default_value_t = 20)]
    grid_cols: usize,
    #[arg(long, default_value_t = 20)]
    grid_rows: usize,
}

impl ViewArgs {
    fn config(&self) -> WorkspaceConfig {
        let mut c = WorkspaceConfig {
            grid_cols: self.grid_cols,
            grid_rows: self.grid_rows,
            viz_sample: self.viz_sample,
            viz_seed: self.layout_seed,
            ..Default::default()
        };
        c.tsne.perplexity = self.perplexity;
        c.tsne.iters = self.tsne_iters;
        c.tsne.seed = self.layout_seed;
        c
    }
}

#[derive(Args)]
struct ExportArgs {
    #[command(flatten)]
    lib: LibArgs,
    /// attribute:<name>, pca, mds or tsne.
    #[arg(long)]
    mode: String,
    #[arg(long)]
    out: PathBuf,
    /// Members from a previous auto-select; runs selection otherwise.
    #[arg(long)]
    ensemble: Option<PathBuf>,
    #[command(flatten)]
    select: SelectOpts,
    #[command(flatten)]
    view: ViewArgs,
}

#[derive(Args)]
struct ServeArgs {
    #[command(flatten)]
    lib: LibArgs,
    #[arg(long, default_value_t = 8080)]
    port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    host: String,
    #[command(flatten)]
    view: ViewArgs,
}

#[derive(Args)]
struct ReplayArgs {
    #[command(flatten)]
    lib: LibArgs,
    #[arg(long)]
    script: PathBuf,
    /// Final session snapshots; stdout gets one response per line.
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    view: ViewArgs,
}

fn build(args: &BuildArgs) -> Result<()> {
    let grid = match args.grid.as_str() {
        "default" => Grid::Default,
        "large" => Grid::Large,
        other => bail!("unknown grid {other:?} (expected default or large)"),
    };
    let d = &args.data;
    let source = DataSource {
        path: d.data.canonicalize().with_context(|| format!("reading {}", d.data.display()))?,
        label: d.label.clone(),
        test_fraction: d.test_fraction,
        folds: d.folds,
        seed: d.seed,
        hints: SchemaHints {
            categorical: d.categorical.clone(),
            numeric: d.numeric.clone(),
        },
    };
    let ds = source.load()?;
    let train = ds.train_rows().len();
    eprintln!(
        "{} rows ({} train, {} test), {} classes",
        ds.n_rows(),
        train,
        ds.n_rows() - train,
        ds.n_classes()
    );
    let progress = |e: &BuildEvent| match &e.error {
        None => eprintln!("[{}/{}] {} {:.1}s", e.index + 1, e.total, e.spec_id, e.seconds),
        Some(err) => eprintln!("[{}/{}] {} FAILED: {err}", e.index + 1, e.total, e.spec_id),
    };
    let opts = BuildOptions {
        grid: format!("{}: {}", args.grid, grid.describe()),
        source: Some(source),
        progress: Some(&progress),
    };
    let lib = build_library_with(&ds, &grid.specs(), d.seed, &opts)?;
    save_library(&lib, &args.out)?;
    let m = &lib.manifest;
    println!(
        "built {} models ({} failed, {} training runs) in {:.1}s -> {}",
        lib.len(),
        m.failures.len(),
        m.training_runs,
        m.build_seconds,
        args.out.display()
    );
    Ok(())
}

fn open(lib: &LibArgs, config: WorkspaceConfig) -> Result<Workspace> {
    Workspace::open(&lib.lib, lib.data.as_deref(), config).with_context(|| format!("opening library {}", lib.lib.display()))
}

fn select(args: &SelectArgs) -> Result<()> {
    let ws = open(&args.lib, WorkspaceConfig::default())?;
    let lib = &ws.lib;
    let params = args.select.params()?;
    println!(
        "hillclimb={} max_size={} bags={} bag_fraction={} seed={}",
        params.hillclimb.name(),
        params.max_size,
        params.bags,
        params.bag_fraction,
        params.seed
    );
    let trace = auto_select(lib, &params)?;
    for s in &trace.steps {
        println!(
            "bag {} {:?} {:?} {} {} -> {:.6}",
            s.bag,
            s.phase,
            s.action,
            s.model_id,
            lib.spec_id(s.model_id),
            s.value
        );
    }
    let state = ensemble::evaluate(lib, &trace.final_members)?;
    let best = (0..lib.len())
        .max_by(|&a, &b| lib.model_metrics[a].accuracy_test.total_cmp(&lib.model_metrics[b].accuracy_test))
        .expect("library is non-empty");
    println!(
        "members {:?}: acc_test={:.4} auc_w_test={:.4} acc_cv={:.4}; best single test acc {:.4} ({})",
        trace.final_members,
        state.perf.accuracy_test,
        state.perf.auc_weighted_test,
        state.perf.accuracy_cv,
        lib.model_metrics[best].accuracy_test,
        lib.spec_id(best)
    );
    let members: Vec<_> = trace
        .final_members
        .iter()
        .map(|&m| json!({ "model_id": m, "spec_id": lib.spec_id(m) }))
        .collect();
    let doc = json!({ "members": members, "perf": state.perf, "trace": trace });
    write_json(&args.out, &doc)?;
    println!("wrote {}", args.out.display());
    Ok(())
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<()> {
    let mut w = BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?);
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

fn export(args: &ExportArgs) -> Result<()> {
    let mode: LayoutMode = args.mode.parse()?;
    let ws = open(&args.lib, args.view.config())?;
    let members: Vec<usize> = match &args.ensemble {
        Some(p) => {
            let doc: serde_json::Value = serde_json::from_reader(BufReader::new(File::open(p)?))?;
            doc["trace"]["final_members"]
                .as_array()
                .context("ensemble file has no trace.final_members")?
                .iter()
                .map(|v| v.as_u64().map(|m| m as usize).context("bad member id"))
                .collect::<Result<_>>()?
        }
        None => auto_select(&ws.lib, &args.select.params()?)?.final_members,
    };
    let state = ensemble::evaluate(&ws.lib, &members)?;
    let frame = ws.frame(&state, &mode)?;
    write_json(&args.out, &serde_json::to_value(&frame)?)?;
    println!("wrote {} points ({}) to {}", frame.points.len(), frame.mode, args.out.display());
    Ok(())
}

fn serve(args: &ServeArgs) -> Result<()> {
    let ws = Arc::new(open(&args.lib, args.view.config())?);
    let mgr = Arc::new(SessionManager::new(ws));
    let app = ensview_cli::router(mgr);
    let addr = format!("{}:{}", args.host, args.port);
    let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::bind(&addr)
            .await
            .with_context(|| format!("binding {addr}"))?;
        eprintln!("listening on http://{}", listener.local_addr()?);
        axum::serve(listener, app).await?;
        Ok(())
    })
}

fn run_replay(args: &ReplayArgs) -> Result<()> {
    let ws = Arc::new(open(&args.lib, args.view.config())?);
    let script = BufReader::new(File::open(&args.script).with_context(|| format!("opening {}", args.script.display()))?);
    let outcome = replay(ws, script)?;
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    for r in &outcome.records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    if let Some(p) = &args.out {
        write_json(p, &serde_json::to_value(&outcome.sessions)?)?;
    }
    let failed = outcome.records.iter().filter(|r| !r.ok).count();
    eprintln!("{} calls, {failed} failed", outcome.records.len());
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match &cli.command {
        Command::BuildLibrary(a) => build(a),
        Command::AutoSelect(a) => select(a),
        Command::ExportLayout(a) => export(a),
        Command::Serve(a) => serve(a),
        Command::Replay(a) => run_replay(a),
    }
}
