use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use freqcache::cache::{EvictCountMode, WriteBackMode};
use freqcache::config::{ConfigError, Policy, ShardStrategy, SimConfig, TraceSource};
use freqcache::freq_stats::{head_coverage, sample_frequencies, scan_frequencies, FrequencyTable};
use freqcache::metrics::{write_batches_csv, write_summary_csv, RunMetrics, SCHEMA_VERSION, TOOL_VERSION};
use freqcache::sim::{self, SimError};
use freqcache::workload::{self, CsvOptions, IdRemap, ZipfGenerator};
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser, Debug)]
#[command(name = "freqcache", version, about = "Frequency-aware embedding cache simulator")]
struct Cli {
    /// Log level filter (error, warn, info, debug, trace).
    #[arg(long, global = true, default_value = "warn")]
    log: String,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Count id frequencies of a trace and write the statistics file.
    Stats(StatsArgs),
    /// Generate a synthetic trace CSV.
    GenTrace(GenArgs),
    /// Run one simulation.
    Simulate(SimulateArgs),
    /// Run one simulation per cache ratio.
    Sweep(SweepArgs),
    /// Run several policies on the same trace and rank them.
    Compare(CompareArgs),
    /// Check the slow tier against a reference store after a run.
    Verify(VerifyArgs),
}

#[derive(Args, Debug)]
struct StatsArgs {
    /// Trace CSV.
    #[arg(long)]
    trace: PathBuf,
    /// Id-space size; `max id + 1` when omitted.
    #[arg(long)]
    num_ids: Option<u32>,
    #[arg(long, default_value_t = 1.0)]
    sample_rate: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output file; `.json` selects JSON, anything else the binary format.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct GenArgs {
    /// Skew preset (criteo_like, avazu_like).
    #[arg(long, conflicts_with = "exponent")]
    preset: Option<String>,
    /// Explicit Zipf exponent instead of a preset.
    #[arg(long)]
    exponent: Option<f64>,
    #[arg(long, default_value_t = 1_000_000)]
    num_ids: u32,
    #[arg(long)]
    samples: usize,
    /// Ids per sample; the preset's count when omitted.
    #[arg(long)]
    features: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum WriteBackArg {
    DirtyOnly,
    Always,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum EvictCountArg {
    OccupancyAware,
    MissesMinusCapacity,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum StrategyArg {
    Column,
    Table,
}

/// Run settings. Flags override the config file, which overrides defaults.
#[derive(Args, Debug)]
struct SimArgs {
    /// TOML config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Generated trace from a skew preset.
    #[arg(long, conflicts_with = "trace")]
    preset: Option<String>,
    /// Trace CSV file.
    #[arg(long)]
    trace: Option<PathBuf>,
    /// Treat CSV cells as categorical values.
    #[arg(long, requires = "trace")]
    categorical: bool,
    /// Batches of a generated trace, or a cap for a file trace.
    #[arg(long)]
    num_batches: Option<usize>,
    /// Ids per sample of a generated trace.
    #[arg(long)]
    features: Option<usize>,
    #[arg(long)]
    num_ids: Option<u32>,
    #[arg(long)]
    embedding_dim: Option<usize>,
    #[arg(long)]
    cache_ratio: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long, value_parser = parse_policy)]
    policy: Option<Policy>,
    #[arg(long, value_enum)]
    write_back: Option<WriteBackArg>,
    #[arg(long, value_enum)]
    evict_count: Option<EvictCountArg>,
    /// Skip the warm-up before the first batch.
    #[arg(long)]
    no_warmup: bool,
    #[arg(long)]
    stats_sample_rate: Option<f64>,
    #[arg(long)]
    shards: Option<usize>,
    #[arg(long, value_enum)]
    shard_strategy: Option<StrategyArg>,
    #[arg(long)]
    buffer_bytes: Option<u64>,
    #[arg(long)]
    latency_s: Option<f64>,
    #[arg(long)]
    bandwidth_bps: Option<f64>,
    #[arg(long)]
    steady_state_fraction: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug)]
struct SimulateArgs {
    #[command(flatten)]
    sim: SimArgs,
    /// Metrics JSON path; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Per-batch CSV path.
    #[arg(long)]
    batch_csv: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SweepArgs {
    #[command(flatten)]
    sim: SimArgs,
    /// Comma-separated cache ratios.
    #[arg(long, value_delimiter = ',', required = true)]
    ratios: Vec<f64>,
    /// Combined JSON path (array of metrics); stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Combined summary CSV, one line per ratio.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct CompareArgs {
    #[command(flatten)]
    sim: SimArgs,
    /// Comma-separated policies.
    #[arg(long, value_delimiter = ',', value_parser = parse_policy, default_value = "freq_lfu,runtime_lfu,lru,rowwise_transfer")]
    policies: Vec<Policy>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct VerifyArgs {
    #[command(flatten)]
    sim: SimArgs,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn parse_policy(s: &str) -> Result<Policy, String> {
    s.parse()
}

/// Error with the exit code it maps to.
struct Failure {
    code: u8,
    err: anyhow::Error,
}

impl From<anyhow::Error> for Failure {
    fn from(err: anyhow::Error) -> Self {
        let code = match err.downcast_ref::<SimError>() {
            Some(e) if e.is_config_error() => 2,
            _ => match err.downcast_ref::<ConfigError>() {
                Some(ConfigError::Invalid(_) | ConfigError::Parse { .. }) => 2,
                _ => 1,
            },
        };
        Failure { code, err }
    }
}

impl From<SimError> for Failure {
    fn from(e: SimError) -> Self {
        anyhow::Error::from(e).into()
    }
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        anyhow::Error::from(e).into()
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::new().parse_filters(&cli.log).format_timestamp_millis().init();
    let result = match cli.command {
        Command::Stats(a) => stats(a),
        Command::GenTrace(a) => gen_trace(a),
        Command::Simulate(a) => simulate(a),
        Command::Sweep(a) => sweep(a),
        Command::Compare(a) => compare(a),
        Command::Verify(a) => verify(a),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(f) => {
            eprintln!("error: {:#}", f.err);
            ExitCode::from(f.code)
        }
    }
}

impl SimArgs {
    fn resolve(&self) -> Result<SimConfig, Failure> {
        let mut c = match &self.config {
            Some(p) => SimConfig::load(p)?,
            None => SimConfig::default(),
        };
        if let Some(name) = &self.preset {
            c.trace = TraceSource::Preset { name: name.clone(), features: None, num_batches: 100 };
        }
        if let Some(path) = &self.trace {
            c.trace = TraceSource::File {
                path: path.clone(),
                id_remap: if self.categorical { IdRemap::Categorical } else { IdRemap::Numeric },
                feature_columns: None,
                on_malformed: Default::default(),
                max_batches: None,
            };
            if self.num_ids.is_none() && self.config.is_none() {
                c.num_ids = 0;
            }
        }
        match &mut c.trace {
            TraceSource::Preset { features, num_batches, .. } => {
                if let Some(f) = self.features {
                    *features = Some(f);
                }
                if let Some(n) = self.num_batches {
                    *num_batches = n;
                }
            }
            TraceSource::Zipf { features, num_batches, .. } => {
                if let Some(f) = self.features {
                    *features = f;
                }
                if let Some(n) = self.num_batches {
                    *num_batches = n;
                }
            }
            TraceSource::File { max_batches, .. } => {
                if self.features.is_some() {
                    return Err(anyhow::Error::from(ConfigError::Invalid("--features applies to generated traces only".into())).into());
                }
                if self.num_batches.is_some() {
                    *max_batches = self.num_batches;
                }
            }
        }
        macro_rules! set {
            ($($field:ident),*) => {$(
                if let Some(v) = self.$field {
                    c.$field = v;
                }
            )*};
        }
        set!(num_ids, embedding_dim, cache_ratio, batch_size, policy, stats_sample_rate, buffer_bytes, steady_state_fraction, seed);
        if let Some(w) = self.write_back {
            c.write_back = match w {
                WriteBackArg::DirtyOnly => WriteBackMode::DirtyOnly,
                WriteBackArg::Always => WriteBackMode::Always,
            };
        }
        if let Some(e) = self.evict_count {
            c.evict_count = match e {
                EvictCountArg::OccupancyAware => EvictCountMode::OccupancyAware,
                EvictCountArg::MissesMinusCapacity => EvictCountMode::MissesMinusCapacity,
            };
        }
        if self.no_warmup {
            c.warmup = false;
        }
        if let Some(n) = self.shards {
            c.shards.count = n;
        }
        if let Some(s) = self.shard_strategy {
            c.shards.strategy = match s {
                StrategyArg::Column => ShardStrategy::Column,
                StrategyArg::Table => ShardStrategy::Table,
            };
        }
        if let Some(l) = self.latency_s {
            c.channel.latency_s = l;
        }
        if let Some(b) = self.bandwidth_bps {
            c.channel.bandwidth_bps = b;
        }
        c.validate()?;
        eprintln!("# resolved config (freqcache {TOOL_VERSION})\n{}", c.to_toml());
        Ok(c)
    }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))?;
    }
    Ok(BufWriter::new(File::create(path).with_context(|| format!("cannot create {}", path.display()))?))
}

/// Writes `text` to `path`, or to stdout when `path` is `None`.
fn emit(path: Option<&Path>, text: &str) -> Result<()> {
    match path {
        Some(p) => {
            let mut w = create(p)?;
            w.write_all(text.as_bytes())?;
            w.write_all(b"\n")?;
            w.flush()?;
        }
        None => println!("{text}"),
    }
    Ok(())
}

/// Human output goes to stdout when the machine output went to a file.
fn human(path: Option<&Path>, text: &str) {
    if path.is_some() {
        print!("{text}");
    } else {
        eprint!("{text}");
    }
}

fn stats(a: StatsArgs) -> Result<u8, Failure> {
    let opts = CsvOptions { num_ids: a.num_ids, ..CsvOptions::default() };
    let (trace, _) = workload::load_csv(&a.trace, &opts).map_err(anyhow::Error::from)?;
    let num_ids = trace.num_ids();
    let freq: FrequencyTable = if a.sample_rate == 1.0 {
        scan_frequencies(&trace, num_ids)
    } else {
        sample_frequencies(&trace, num_ids, a.sample_rate, a.seed)
    }
    .map_err(anyhow::Error::from)?;
    let json = a.out.extension().is_some_and(|e| e == "json");
    if json {
        let text = serde_json::to_string(&freq.to_json()).map_err(anyhow::Error::from)?;
        emit(Some(&a.out), &text)?;
    } else {
        freq.write_binary(&a.out).map_err(anyhow::Error::from)?;
    }
    println!(
        "# stats {TOOL_VERSION}: trace={} num_ids={num_ids} sample_rate={} seed={} samples={} features={}",
        a.trace.display(),
        a.sample_rate,
        a.seed,
        trace.num_samples(),
        trace.features()
    );
    println!("total_accesses {}", freq.total_accesses());
    println!("observed_ids {}", freq.observed_ids());
    for frac in [0.001, 0.0014, 0.01, 0.1] {
        println!("head_coverage({frac}) {:.6}", head_coverage(&freq, frac));
    }
    Ok(0)
}

fn gen_trace(a: GenArgs) -> Result<u8, Failure> {
    let trace = match (a.preset.as_deref(), a.exponent) {
        (_, Some(s)) => ZipfGenerator::new(a.num_ids, s, a.features.unwrap_or(26), a.seed)
            .map_err(anyhow::Error::from)?
            .generate(a.samples),
        (name, None) => {
            let name = name.unwrap_or(workload::CRITEO_LIKE.name);
            let p = workload::preset(name)
                .ok_or_else(|| anyhow::Error::from(ConfigError::Invalid(format!("unknown preset `{name}`"))))?;
            p.generate(a.num_ids, a.samples, a.features, a.seed).map_err(anyhow::Error::from)?
        }
    };
    workload::write_csv(&trace, &a.out).map_err(anyhow::Error::from)?;
    println!(
        "# gen-trace {TOOL_VERSION}: {} samples x {} features over {} ids, provenance {}",
        trace.num_samples(),
        trace.features(),
        trace.num_ids(),
        serde_json::to_string(trace.provenance()).unwrap_or_default()
    );
    Ok(0)
}

fn simulate(a: SimulateArgs) -> Result<u8, Failure> {
    let config = a.sim.resolve()?;
    let m = sim::run(&config)?;
    emit(a.out.as_deref(), &m.to_json())?;
    if let Some(p) = &a.batch_csv {
        write_batches_csv(&m, create(p)?).map_err(anyhow::Error::from)?;
    }
    human(a.out.as_deref(), &m.to_text());
    Ok(0)
}

fn sweep(a: SweepArgs) -> Result<u8, Failure> {
    let config = a.sim.resolve()?;
    for &r in &a.ratios {
        SimConfig { cache_ratio: r, ..config.clone() }.validate()?;
    }
    let mut runs: Vec<RunMetrics> = Vec::new();
    for (r, res) in a.ratios.iter().zip(sim::sweep(&config, &a.ratios)) {
        runs.push(res.with_context(|| format!("cache ratio {r}"))?);
    }
    let doc = serde_json::json!({
        "schema_version": SCHEMA_VERSION,
        "tool_version": TOOL_VERSION,
        "config": config,
        "cache_ratios": a.ratios,
        "runs": runs,
    });
    emit(a.out.as_deref(), &serde_json::to_string_pretty(&doc).map_err(anyhow::Error::from)?)?;
    if let Some(p) = &a.csv {
        let refs: Vec<&RunMetrics> = runs.iter().collect();
        write_summary_csv(&refs, create(p)?).map_err(anyhow::Error::from)?;
    }
    for m in &runs {
        human(a.out.as_deref(), &m.to_text());
    }
    Ok(0)
}

fn compare(a: CompareArgs) -> Result<u8, Failure> {
    let config = a.sim.resolve()?;
    let report = sim::compare_policies(&config, &a.policies)?;
    emit(a.out.as_deref(), &report.to_json())?;
    human(a.out.as_deref(), &report.to_text());
    Ok(0)
}

fn verify(a: VerifyArgs) -> Result<u8, Failure> {
    let config = a.sim.resolve()?;
    let (oracle, metrics) = sim::verify_against_oracle(&config)?;
    let doc = serde_json::json!({
        "schema_version": SCHEMA_VERSION,
        "tool_version": TOOL_VERSION,
        "config": config,
        "oracle": oracle,
        "metrics": metrics.summary,
    });
    emit(a.out.as_deref(), &serde_json::to_string_pretty(&doc).map_err(anyhow::Error::from)?)?;
    let line = match &oracle.first_divergence {
        None => format!("oracle: pass ({} rows compared)\n", oracle.rows_compared),
        Some(d) => format!(
            "oracle: FAIL at raw id {} column {} on shard {}: slow tier {} vs reference {}\n",
            d.raw_id, d.column, d.shard, d.slow_value, d.reference_value
        ),
    };
    human(a.out.as_deref(), &line);
    Ok(if oracle.pass { 0 } else { 1 })
}
