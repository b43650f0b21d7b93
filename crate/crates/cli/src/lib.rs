//! The `metastack` command line.
//!
//! Subcommands cover data preparation (`synth`, `ingest`), the experiments
//! (`compare`, `noise-sweep`), model export (`train`), transcript checks
//! (`audit`) and the HTTP mesh (`serve`, `replay`). A run is described by a
//! [`RunConfig`], read from `--config` and overridden by flags.

pub mod config;
pub mod report;

use std::collections::BTreeMap;
use std::fs;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use metastack::baselines::{noising_sweep, price_of_privacy, run_scenario, Scenario, ScenarioReport};
use metastack::forest::Grid;
use metastack::stacking::{derive_seed, fit_deployment, Deployment, PipelineError};
use metastack::tabular::{
    compress_dates, generate_synthetic, impute_marker, load_csv, load_csv_with_dates, partition_by_unit, write_csv,
    DataError, Dataset, ImputationConfig, UnitPartition,
};
use metastack::transport::{audit_confidentiality, read_transcript, write_transcript, RawIndex, TransportError};
use metastack_service::{
    replay, spawn_configured, spawn_mesh, MeshConfig, ReplayOptions, RetryPolicy, ServiceConfig, ServiceError,
};

pub use config::{DataSource, DateScope, RunConfig};
use report::{canonical_json, config_echo, AuditSummary, CompareReport, DatasetSummary, ScenarioExport, SweepReport};

/// Environment variable capping worker threads.
pub const THREADS_ENV: &str = "METASTACK_THREADS";

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Data(String),
    #[error("{0}")]
    Experiment(String),
}

impl CliError {
    /// 1 usage, 2 data, 3 experiment.
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Experiment(_) => 3,
        }
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<TransportError> for CliError {
    fn from(e: TransportError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<PipelineError> for CliError {
    fn from(e: PipelineError) -> Self {
        match e {
            PipelineError::Data(e) => e.into(),
            PipelineError::NotImputed => CliError::Data(e.to_string()),
            e => CliError::Experiment(e.to_string()),
        }
    }
}

impl From<ServiceError> for CliError {
    fn from(e: ServiceError) -> Self {
        match e {
            ServiceError::Config(m) => CliError::Usage(m),
            ServiceError::Pipeline(p) => p.into(),
            e => CliError::Experiment(e.to_string()),
        }
    }
}

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Data(format!("{}: {e}", path.display()))
}

#[derive(Debug, Parser)]
#[command(name = "metastack", version, about = "Stacked classification across units that only share predictions")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic dataset (data.csv) and its spec (spec.json).
    Synth(RunArgs),
    /// Load, compress dates, impute and summarize a dataset.
    Ingest(RunArgs),
    /// Fit servable models on all items and write a mesh configuration.
    Train(TrainArgs),
    /// Run the comparison scenarios and write the report.
    Compare(RunArgs),
    /// Evaluate the shared-pool model under increasing additive noise.
    NoiseSweep(RunArgs),
    /// Check a transcript for raw data crossing unit boundaries.
    Audit(AuditArgs),
    /// Run the sub-unit and meta services.
    Serve(ServeArgs),
    /// Stream a dataset through the services.
    Replay(ReplayArgs),
}

/// Options shared by every command that reads data.
#[derive(Clone, Debug, Default, Args)]
pub struct RunArgs {
    /// Run configuration file (JSON); flags override its fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Numeric feature CSV with Id and Response columns.
    #[arg(long, conflicts_with = "synth")]
    pub csv: Option<PathBuf>,
    /// Date CSV joined to --csv by Id.
    #[arg(long, requires = "csv")]
    pub dates: Option<PathBuf>,
    /// Synthetic data: `default`, `small`, or a JSON spec file.
    #[arg(long)]
    pub synth: Option<String>,
    /// Number of synthetic items.
    #[arg(long)]
    pub items: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Hyperparameter grid, e.g. `25,50x10,25`, or `full` / `reduced`.
    #[arg(long)]
    pub grid: Option<String>,
    /// Scenarios to run, e.g. `1,2,3`.
    #[arg(long)]
    pub scenarios: Option<String>,
    /// Noise levels, e.g. `0,0.5,1`.
    #[arg(long)]
    pub lambdas: Option<String>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Value written into missing cells.
    #[arg(long, allow_negative_numbers = true)]
    pub marker: Option<f64>,
}

impl RunArgs {
    fn names_data(&self) -> bool {
        self.config.is_some() || self.csv.is_some() || self.synth.is_some()
    }

    /// The file configuration (or the defaults) with flags applied.
    pub fn resolve(&self) -> Result<RunConfig, CliError> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        if let Some(csv) = &self.csv {
            cfg.data = DataSource::Csv { features: csv.clone(), dates: self.dates.clone(), schema: Default::default() };
        }
        if let Some(choice) = &self.synth {
            cfg.data = DataSource::Synth { spec: config::synth_spec(choice)? };
        }
        if let Some(n) = self.items {
            match &mut cfg.data {
                DataSource::Synth { spec } => spec.n_items = n,
                DataSource::Csv { .. } => return Err(CliError::Usage("--items applies to synthetic data only".into())),
            }
        }
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(g) = &self.grid {
            cfg.grid = parse_grid(g)?;
        }
        if let Some(s) = &self.scenarios {
            cfg.scenarios = config::parse_scenarios(s).map_err(CliError::Usage)?;
        }
        if let Some(l) = &self.lambdas {
            cfg.lambdas = config::parse_lambdas(l).map_err(CliError::Usage)?;
        }
        if let Some(out) = &self.out {
            cfg.out = out.clone();
        }
        if self.marker.is_some() {
            cfg.marker = self.marker;
        }
        cfg.resolved()
    }
}

fn parse_grid(s: &str) -> Result<Grid, CliError> {
    match s {
        "full" => Ok(Grid::full()),
        "reduced" => Ok(Grid::reduced()),
        s => s.parse().map_err(|e: metastack::forest::ForestError| CliError::Usage(e.to_string())),
    }
}

#[derive(Clone, Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub run: RunArgs,
    /// Host written into mesh.json.
    #[arg(long, default_value = "127.0.0.1")]
    pub host: String,
    /// Port of the meta service in mesh.json; unit k gets port + 1 + k.
    #[arg(long, default_value_t = 7000)]
    pub port: u16,
}

#[derive(Clone, Debug, Args)]
pub struct AuditArgs {
    /// Newline-delimited transcript of boundary messages.
    pub transcript: PathBuf,
    /// Data options; with a dataset the audit also matches raw cell values.
    #[command(flatten)]
    pub run: RunArgs,
}

#[derive(Clone, Debug, Args)]
#[group(id = "models", required = true, multiple = false, args = ["mesh", "deployment"])]
pub struct MeshArgs {
    /// Mesh configuration written by `train`.
    #[arg(long)]
    pub mesh: Option<PathBuf>,
    /// Deployment written by `train`.
    #[arg(long)]
    pub deployment: Option<PathBuf>,
}

#[derive(Clone, Debug, Args)]
pub struct ServeArgs {
    #[command(flatten)]
    pub models: MeshArgs,
    /// Host to bind with --deployment.
    #[arg(long, default_value = "127.0.0.1")]
    pub host: String,
    /// Meta service port with --deployment; 0 picks free ports.
    #[arg(long, default_value_t = 7000)]
    pub port: u16,
}

#[derive(Clone, Debug, Args)]
pub struct ReplayArgs {
    #[command(flatten)]
    pub run: RunArgs,
    /// Replay against the running services of this mesh configuration, or
    /// start an in-process mesh from a deployment.
    #[command(flatten)]
    pub models: MeshArgs,
    /// Parts per second.
    #[arg(long)]
    pub rate: Option<f64>,
    /// Replay only the first N parts.
    #[arg(long)]
    pub limit: Option<usize>,
    /// Shuffle the order in which each part visits its units.
    #[arg(long)]
    pub shuffle_seed: Option<u64>,
}

/// A dataset ready for the pipeline.
pub struct Prepared {
    pub data: Dataset,
    pub partitions: Vec<UnitPartition>,
    pub summary: DatasetSummary,
}

fn at(path: &Path) -> impl Fn(DataError) -> CliError + '_ {
    move |e| CliError::Data(format!("{}: {e}", path.display()))
}

fn load_raw(cfg: &RunConfig) -> Result<Dataset, CliError> {
    Ok(match &cfg.data {
        DataSource::Synth { spec } => generate_synthetic(spec)?,
        DataSource::Csv { features, dates: Some(dates), schema } => {
            load_csv_with_dates(features, dates, schema).map_err(at(features))?
        }
        DataSource::Csv { features, dates: None, schema } => load_csv(features, schema).map_err(at(features))?,
    })
}

/// Loads the data, compresses dates, imputes the marker and partitions the
/// columns by unit.
pub fn prepare(cfg: &RunConfig) -> Result<Prepared, CliError> {
    let compressed = compress_dates(&load_raw(cfg)?, cfg.dates == DateScope::PerUnit);
    let missing = compressed.missing_count();
    let data = impute_marker(&compressed, &ImputationConfig { marker: cfg.marker })?;
    let partitions = partition_by_unit(&data)?;
    if partitions.is_empty() {
        return Err(CliError::Data("no unit-owned feature columns found".into()));
    }
    let summary = DatasetSummary::new(&data, &partitions, missing);
    Ok(Prepared { data, partitions, summary })
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), CliError> {
    fs::write(path, contents).map_err(|e| io_err(path, e))
}

fn write_messages(path: &Path, messages: &[metastack::transport::BoundaryMessage]) -> Result<(), CliError> {
    let file = fs::File::create(path).map_err(|e| io_err(path, e))?;
    write_transcript(messages, std::io::BufWriter::new(file))?;
    Ok(())
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    let bytes = fs::read(path).map_err(|e| io_err(path, e))?;
    serde_json::from_slice(&bytes).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

/// Maximum worker threads from the environment.
pub fn thread_limit() -> Result<Option<usize>, CliError> {
    match std::env::var(THREADS_ENV) {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(Some(n)),
            _ => Err(CliError::Usage(format!("{THREADS_ENV} must be a positive integer, got {v:?}"))),
        },
        Err(_) => Ok(None),
    }
}

fn runtime() -> Result<tokio::runtime::Runtime, CliError> {
    let mut b = tokio::runtime::Builder::new_multi_thread();
    if let Some(n) = thread_limit()? {
        b.worker_threads(n);
    }
    b.enable_all().build().map_err(|e| CliError::Experiment(format!("cannot start async runtime: {e}")))
}

/// Runs one command, printing a short summary to stdout.
pub fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Synth(a) => synth(&a.resolve()?),
        Command::Ingest(a) => ingest(&a.resolve()?),
        Command::Train(a) => train(&a.run.resolve()?, &a.host, a.port),
        Command::Compare(a) => compare(&a.resolve()?).map(|r| print!("{}", r.render_text())),
        Command::NoiseSweep(a) => noise_sweep(&a.resolve()?).map(|r| print!("{}", r.render_text())),
        Command::Audit(a) => audit(&a),
        Command::Serve(a) => serve(&a),
        Command::Replay(a) => replay_cmd(&a),
    }
}

pub fn synth(cfg: &RunConfig) -> Result<(), CliError> {
    let DataSource::Synth { spec } = &cfg.data else {
        return Err(CliError::Usage("synth needs a synthetic data source".into()));
    };
    let data = generate_synthetic(spec)?;
    create_dir(&cfg.out)?;
    write_csv(&data, cfg.out.join("data.csv"))?;
    write(&cfg.out.join("spec.json"), canonical_json(spec)?)?;
    println!("wrote {} items with {} columns to {}", data.n_items(), data.n_columns(), cfg.out.join("data.csv").display());
    Ok(())
}

pub fn ingest(cfg: &RunConfig) -> Result<(), CliError> {
    let p = prepare(cfg)?;
    create_dir(&cfg.out)?;
    write(&cfg.out.join("dataset.json"), canonical_json(&p.summary)?)?;
    write(&cfg.out.join("visit_shares.csv"), p.summary.visit_shares_csv())?;
    write(&cfg.out.join("visit_shares.gp"), report::visit_shares_plot())?;
    println!("{} items, {} columns, {} units, marker {}", p.summary.items, p.summary.columns, p.summary.n_units, p.data.marker().unwrap_or(f64::NAN));
    for u in &p.summary.units {
        println!("  {} {} columns, {} parts ({:.2}%)", u.unit_id, u.columns, u.parts, 100.0 * u.share);
    }
    Ok(())
}

/// Runs the configured scenarios and writes `report.{txt,json,csv}`, the
/// visit shares, fold bookkeeping and transcripts into the output directory.
pub fn compare(cfg: &RunConfig) -> Result<CompareReport, CliError> {
    let p = prepare(cfg)?;
    let sc = cfg.scenario_config();
    let mut reports: Vec<ScenarioReport> = Vec::new();
    for &s in &cfg.scenarios {
        log::info!("running {s}");
        reports.push(run_scenario(&p.data, &p.partitions, s, &sc)?);
    }
    let find = |s: Scenario| reports.iter().find(|r| r.scenario == s);
    let price = match (find(Scenario::Stacked), find(Scenario::SharedPool)) {
        (Some(a), Some(b)) => Some(price_of_privacy(a, b)?),
        _ => None,
    };
    let report = CompareReport {
        config: config_echo(cfg),
        dataset: p.summary,
        scenarios: reports.iter().map(ScenarioExport::new).collect(),
        price_of_privacy: price,
        notes: vec![report::NOISE_NOTE.to_string()],
    };

    let out = &cfg.out;
    create_dir(out)?;
    write(&out.join("report.txt"), report.render_text())?;
    write(&out.join("report.json"), canonical_json(&report)?)?;
    write(&out.join("report.csv"), report.render_csv())?;
    write(&out.join("visit_shares.csv"), report.dataset.visit_shares_csv())?;
    write(&out.join("visit_shares.gp"), report::visit_shares_plot())?;
    for (r, e) in reports.iter().zip(&report.scenarios) {
        if let Some(book) = &r.book {
            write(&out.join(&e.folds_file), book.render(p.data.items()))?;
        }
        write_messages(&out.join(&e.transcript_file), &r.transcript)?;
    }
    Ok(report)
}

/// Runs the noise sweep and writes `sweep.{csv,txt,json,gp}`.
pub fn noise_sweep(cfg: &RunConfig) -> Result<SweepReport, CliError> {
    let p = prepare(cfg)?;
    let result = noising_sweep(&p.data, &cfg.scenario_config(), &cfg.lambdas, derive_seed(cfg.seed, &[0x401_5E]))?;
    let report = SweepReport {
        config: config_echo(cfg),
        dataset: p.summary,
        spearman: result.trend(),
        result,
        notes: vec![report::NOISE_NOTE.to_string()],
    };
    create_dir(&cfg.out)?;
    write(&cfg.out.join("sweep.csv"), report.result.to_csv())?;
    write(&cfg.out.join("sweep.txt"), report.render_text())?;
    write(&cfg.out.join("sweep.json"), canonical_json(&report)?)?;
    write(&cfg.out.join("sweep.gp"), report::sweep_plot())?;
    Ok(report)
}

/// Fits the deployment and writes it, one artifact per model, and a mesh
/// configuration whose artifact paths are relative to the output directory.
pub fn train(cfg: &RunConfig, host: &str, port: u16) -> Result<(), CliError> {
    let p = prepare(cfg)?;
    let dep = fit_deployment(&p.data, &p.partitions, &cfg.grid, &cfg.plan, &cfg.forest)?;
    let out = &cfg.out;
    create_dir(&out.join("units"))?;
    write(&out.join("deployment.json"), canonical_json(&dep)?)?;
    write(&out.join("meta.json"), canonical_json(&dep.meta)?)?;
    let mut units = Vec::new();
    let meta_addr = format!("{host}:{port}");
    for (k, u) in dep.units.iter().enumerate() {
        let rel = PathBuf::from("units").join(format!("{}.json", u.unit_id));
        write(&out.join(&rel), canonical_json(u)?)?;
        let unit_port = port.checked_add(1 + k as u16).ok_or_else(|| CliError::Usage("port range overflows".into()))?;
        units.push(ServiceConfig {
            artifact: rel,
            downstream: Some(format!("http://{meta_addr}")),
            expected_units: Vec::new(),
            listen: format!("{host}:{unit_port}"),
            marker: None,
            retry: RetryPolicy::default(),
            unit_id: u.unit_id.clone(),
        });
    }
    let mesh = MeshConfig {
        meta: ServiceConfig {
            artifact: "meta.json".into(),
            downstream: None,
            expected_units: dep.meta.expected_units.clone(),
            listen: meta_addr,
            marker: None,
            retry: RetryPolicy::default(),
            unit_id: "meta".into(),
        },
        units,
    };
    write(&out.join("mesh.json"), canonical_json(&mesh)?)?;
    println!("deployed {} of {} units and the meta model to {}", dep.units.len(), p.partitions.len(), out.display());
    Ok(())
}

/// Audits a transcript file; `PASS, 0 violations` or `FAIL, n violations`.
pub fn audit(args: &AuditArgs) -> Result<(), CliError> {
    let file = fs::File::open(&args.transcript).map_err(|e| io_err(&args.transcript, e))?;
    let messages = read_transcript(BufReader::new(file))?;
    let index = if args.run.names_data() {
        let p = prepare(&args.run.resolve()?)?;
        RawIndex::from_dataset(&p.data, &p.partitions)
    } else {
        RawIndex::default()
    };
    let summary = AuditSummary::from(&audit_confidentiality(&messages, &index));
    println!("{}", summary.line());
    if summary.pass {
        Ok(())
    } else {
        Err(CliError::Experiment(format!("{} of {} messages carry raw data", summary.flagged_messages, messages.len())))
    }
}

/// Reads a mesh configuration and resolves artifact paths relative to it.
fn load_mesh(path: &Path) -> Result<MeshConfig, CliError> {
    let mut cfg = MeshConfig::load(path).map_err(|e| match e {
        ServiceError::Config(m) => CliError::Usage(m),
        e => CliError::Data(format!("{}: {e}", path.display())),
    })?;
    let base = path.parent().unwrap_or(Path::new("."));
    for s in std::iter::once(&mut cfg.meta).chain(cfg.units.iter_mut()) {
        if s.artifact.is_relative() {
            s.artifact = base.join(&s.artifact);
        }
    }
    Ok(cfg)
}

pub fn serve(args: &ServeArgs) -> Result<(), CliError> {
    let rt = runtime()?;
    rt.block_on(async {
        let mesh = match (&args.models.mesh, &args.models.deployment) {
            (Some(path), _) => spawn_configured(&load_mesh(path)?).await?,
            (None, Some(path)) => {
                let dep: Deployment = read_json(path)?;
                spawn_mesh(&dep, &args.host, args.port, RetryPolicy::default()).await?
            }
            (None, None) => return Err(CliError::Usage("serve needs --mesh or --deployment".into())),
        };
        println!("meta service at {}", mesh.meta_url);
        for (unit, url) in &mesh.unit_urls {
            println!("unit {unit} at {url}");
        }
        mesh.wait().await?;
        Ok(())
    })
}

pub fn replay_cmd(args: &ReplayArgs) -> Result<(), CliError> {
    let cfg = args.run.resolve()?;
    let p = prepare(&cfg)?;
    let n = args.limit.unwrap_or(p.data.n_items()).min(p.data.n_items());
    let items: Vec<usize> = (0..n).collect();
    let opts = ReplayOptions { rate: args.rate, shuffle_seed: args.shuffle_seed };
    let rt = runtime()?;
    let (outcome, deployment) = rt.block_on(async {
        match (&args.models.mesh, &args.models.deployment) {
            (Some(path), _) => {
                let mesh = load_mesh(path)?;
                let urls: BTreeMap<String, String> = mesh.units.iter().map(|u| (u.unit_id.clone(), u.url())).collect();
                Ok::<_, CliError>((replay(&p.data, &p.partitions, &urls, &items, &opts).await?, None))
            }
            (None, Some(path)) => {
                let dep: Deployment = read_json(path)?;
                let mesh = spawn_mesh(&dep, "127.0.0.1", 0, RetryPolicy::default()).await?;
                Ok((replay(&p.data, &p.partitions, &mesh.unit_urls, &items, &opts).await?, Some(dep)))
            }
            (None, None) => Err(CliError::Usage("replay needs --mesh or --deployment".into())),
        }
    })?;

    create_dir(&cfg.out)?;
    write(&cfg.out.join("outcome.csv"), outcome.to_csv())?;
    write_messages(&cfg.out.join("transcript.ndjson"), &outcome.transcript)?;
    println!("replayed {} parts, {} failed", outcome.rows.len(), outcome.failed());
    if let Some(dep) = deployment {
        let (_, metas) = dep.predict_in_process(&p.data, &p.partitions, &items)?;
        let differing = outcome
            .rows
            .iter()
            .zip(&metas)
            .filter(|(r, m)| {
                r.units_visited > 0
                    && (r.prediction.as_deref() != Some(m.label.as_str())
                        || r.probability.map(f64::to_bits) != Some(m.certainty.to_bits()))
            })
            .count();
        println!("in-process pipeline: {differing} differing predictions");
    }
    let summary = AuditSummary::from(&audit_confidentiality(&outcome.transcript, &RawIndex::from_dataset(&p.data, &p.partitions)));
    println!("audit: {}", summary.line());
    if !summary.pass {
        return Err(CliError::Experiment("replay transcript carries raw data".into()));
    }
    Ok(())
}
