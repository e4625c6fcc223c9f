//! Command-line front end. [`run`] parses arguments, dispatches a subcommand
//! and maps errors onto exit codes (0 ok, 2 config, 3 data/format, 4 protocol).

use std::ffi::OsString;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::engine::{BalanceParams, Normalization, ScoreKind, ScoreMatrix, SimilarityVector};
use crate::error::{Error, Result};
use crate::fusion::{AggregationMode, FusionWeights};
use crate::layout::parse_layout;
use crate::metrics::{EvalConfig, EvalReport};
use crate::pipeline::{self, RunConfig, Threads, THREADS_ENV};
use crate::store::{resolve_manifest_file, Dataset};
use crate::synth::{generate, SynthSpec};

#[derive(Debug, Parser)]
#[command(
    name = "cirfuse",
    version,
    about = "Composed image retrieval fusion and evaluation"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Load and resolve a manifest, print per-set statistics.
    Ingest {
        #[arg(long)]
        manifest: PathBuf,
        /// Also write the statistics as JSON into this directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Check every *.json layout in a directory; one finding per line.
    ValidateLayouts {
        dir: PathBuf,
        /// Write the report here instead of standard output.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Write a synthetic dataset with planted ground truth.
    GenSynth(SynthArgs),
    /// Fuse, score, balance, rank and evaluate; writes rankings and a report.
    Retrieve(RunArgs),
    /// Evaluate a grid of lambda values over cached similarities.
    SweepLambda {
        #[command(flatten)]
        run: RunArgs,
        /// Comma-separated, sorted lambda values.
        #[arg(
            long,
            value_delimiter = ',',
            default_value = "0,0.1,0.2,0.3,0.4,0.5,0.6,0.7,0.8,0.9,1"
        )]
        grid: Vec<f64>,
    },
    /// Evaluate proxy-prefix truncations 1..=N.
    SweepProxies {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        max_proxies: usize,
    },
    /// Evaluate precomputed final scores (or the text-side baseline when no
    /// score file is given) against the manifest ground truth.
    Evaluate {
        #[command(flatten)]
        run: RunArgs,
        /// Score file with one row per query in manifest order.
        #[arg(long)]
        scores: Option<PathBuf>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum AggArg {
    Mean,
    PerProxy,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum NormArg {
    Minmax,
    None,
}

#[derive(Debug, Clone, Default, Args)]
pub struct RunArgs {
    /// JSON run configuration; flags below override its fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long)]
    pub lambda: Option<f64>,
    /// Fusion weights as `wq,ws,wp`.
    #[arg(long, value_parser = parse_weights)]
    pub weights: Option<FusionWeights>,
    #[arg(long, value_enum)]
    pub agg: Option<AggArg>,
    #[arg(long, value_enum)]
    pub norm: Option<NormArg>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Worker threads, a positive integer or `auto`.
    #[arg(long, env = THREADS_ENV, value_parser = parse_threads)]
    pub threads: Option<Threads>,
    #[arg(long, value_delimiter = ',')]
    pub recall_ks: Option<Vec<usize>>,
    #[arg(long, value_delimiter = ',')]
    pub map_ks: Option<Vec<usize>>,
    #[arg(long, value_delimiter = ',')]
    pub subset_ks: Option<Vec<usize>>,
}

#[derive(Debug, Clone, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 64)]
    pub dim: usize,
    #[arg(long, default_value_t = 5000)]
    pub gallery: usize,
    #[arg(long, default_value_t = 200)]
    pub queries: usize,
    #[arg(long, default_value_t = 0.7)]
    pub edit: f64,
    #[arg(long, default_value_t = 0.4)]
    pub noise: f64,
    #[arg(long, default_value_t = 5)]
    pub proxies: usize,
    #[arg(long)]
    pub hard_fraction: Option<f64>,
    #[arg(long)]
    pub text_noise: Option<f64>,
    #[arg(long)]
    pub caption_noise: Option<f64>,
    #[arg(long)]
    pub captions: Option<usize>,
    /// Per-query candidate subset size, 0 for none.
    #[arg(long)]
    pub subset_size: Option<usize>,
}

fn parse_weights(s: &str) -> std::result::Result<FusionWeights, String> {
    let parts: Vec<&str> = s.split(',').map(str::trim).collect();
    if parts.len() != 3 {
        return Err(format!("expected wq,ws,wp, got {s:?}"));
    }
    let mut w = [0.0f32; 3];
    for (slot, p) in w.iter_mut().zip(&parts) {
        *slot = p.parse().map_err(|e| format!("bad weight {p:?}: {e}"))?;
    }
    FusionWeights::new(w[0], w[1], w[2]).map_err(|e| e.to_string())
}

fn parse_threads(s: &str) -> std::result::Result<Threads, String> {
    if s.eq_ignore_ascii_case("auto") {
        return Ok(Threads::Auto);
    }
    match s.parse::<usize>() {
        Ok(n) if n >= 1 => Ok(Threads::Count(n)),
        _ => Err(format!("expected a positive integer or auto, got {s:?}")),
    }
}

impl RunArgs {
    /// Merges the optional config file with the flags.
    pub fn resolve(&self) -> Result<RunConfig> {
        let mut c = match &self.config {
            Some(path) => RunConfig::read(path)?,
            None => {
                let manifest = self
                    .manifest
                    .clone()
                    .ok_or_else(|| Error::Config("--manifest or --config is required".into()))?;
                RunConfig::new(manifest)
            }
        };
        if let Some(m) = &self.manifest {
            c.manifest = m.clone();
        }
        if let Some(l) = self.lambda {
            c.lambda = l;
        }
        if let Some(w) = self.weights {
            c.fusion.weights = w;
        }
        if let Some(a) = self.agg {
            c.fusion.aggregation = match a {
                AggArg::Mean => AggregationMode::MeanEmbedding,
                AggArg::PerProxy => AggregationMode::PerProxy,
            };
        }
        if let Some(n) = self.norm {
            c.normalization = match n {
                NormArg::Minmax => Normalization::MinmaxPerQuery,
                NormArg::None => Normalization::None,
            };
        }
        if let Some(o) = &self.out {
            c.output_dir = o.clone();
        }
        if let Some(t) = self.threads {
            c.threads = t;
        }
        if self.recall_ks.is_some() || self.map_ks.is_some() || self.subset_ks.is_some() {
            let base = c.eval.take().unwrap_or(EvalConfig {
                recall_ks: Vec::new(),
                map_ks: Vec::new(),
                subset_ks: Vec::new(),
            });
            c.eval = Some(EvalConfig {
                recall_ks: self.recall_ks.clone().unwrap_or(base.recall_ks),
                map_ks: self.map_ks.clone().unwrap_or(base.map_ks),
                subset_ks: self.subset_ks.clone().unwrap_or(base.subset_ks),
            });
        }
        c.validate()?;
        Ok(c)
    }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| Error::io(path, e))
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    let mut w = create(path)?;
    w.write_all(text.as_bytes())
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(path, e))
}

fn stdout_text(out: &mut dyn Write, text: &str) -> Result<()> {
    out.write_all(text.as_bytes())
        .map_err(|e| Error::io("<stdout>", e))
}

/// Runs the CLI with `args` (including the program name). Returns the exit code.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = e.exit_code();
            let _ = write!(err, "{}", e.render());
            return code;
        }
    };
    match dispatch(cli.command, out) {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(err, "cirfuse [{}]: {e}", e.module());
            e.exit_code()
        }
    }
}

fn dispatch(cmd: Command, out: &mut dyn Write) -> Result<i32> {
    match cmd {
        Command::Ingest { manifest, out: dir } => ingest(&manifest, dir.as_deref(), out),
        Command::ValidateLayouts { dir, report } => validate_layouts(&dir, report.as_deref(), out),
        Command::GenSynth(a) => gen_synth(&a, out),
        Command::Retrieve(a) => retrieve(&a.resolve()?, out),
        Command::SweepLambda { run, grid } => sweep_lambda(&run.resolve()?, &grid, out),
        Command::SweepProxies { run, max_proxies } => {
            sweep_proxies(&run.resolve()?, max_proxies, out)
        }
        Command::Evaluate { run, scores } => evaluate(&run.resolve()?, scores.as_deref(), out),
    }
}

fn ingest(manifest: &Path, dir: Option<&Path>, out: &mut dyn Write) -> Result<i32> {
    let ds = resolve_manifest_file(manifest)?;
    let summary = serde_json::json!({
        "dataset": ds.name,
        "protocol": ds.protocol,
        "dim": ds.dim,
        "queries": ds.queries.len(),
        "sets": ds.stats,
    });
    let text = serde_json::to_string_pretty(&summary).expect("stats serialize") + "\n";
    if let Some(dir) = dir {
        write_file(&dir.join("ingest.json"), &text)?;
    }
    stdout_text(out, &text)?;
    Ok(0)
}

fn validate_layouts(dir: &Path, report: Option<&Path>, out: &mut dyn Write) -> Result<i32> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    files.sort();
    let mut lines = String::new();
    for path in &files {
        let raw = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let name = path.file_name().unwrap_or_default().to_string_lossy();
        match parse_layout(&raw) {
            Ok(_) => {}
            Err(Error::Validation(found)) => {
                for v in found {
                    lines.push_str(&format!("{name}: {v}\n"));
                }
            }
            Err(Error::Parse { offset, message }) => {
                lines.push_str(&format!(
                    "{name}: layout: parse error at byte {offset}: {message}\n"
                ));
            }
            Err(e) => return Err(e),
        }
    }
    match report {
        Some(p) => write_file(p, &lines)?,
        None => stdout_text(out, &lines)?,
    }
    Ok(if lines.is_empty() { 0 } else { 3 })
}

fn gen_synth(a: &SynthArgs, out: &mut dyn Write) -> Result<i32> {
    let mut spec = SynthSpec::new(
        a.dim, a.gallery, a.queries, a.edit, a.noise, a.proxies, a.seed,
    );
    if let Some(v) = a.hard_fraction {
        spec.hard_negative_fraction = v;
    }
    if let Some(v) = a.text_noise {
        spec.text_noise = v;
    }
    if let Some(v) = a.caption_noise {
        spec.caption_noise = v;
    }
    if let Some(v) = a.captions {
        spec.captions_per_query = v;
    }
    if let Some(v) = a.subset_size {
        spec.subset_size = v;
    }
    let d = generate(&spec)?;
    d.write(&a.out)?;
    let manifest = a.out.join(crate::synth::files::MANIFEST);
    stdout_text(out, &format!("{}\n", manifest.display()))?;
    Ok(0)
}

fn load(config: &RunConfig) -> Result<Dataset> {
    resolve_manifest_file(&config.manifest)
}

fn print_report(report: &EvalReport, out: &mut dyn Write) -> Result<()> {
    report
        .write_table(out)
        .map_err(|e| Error::io("<stdout>", e))
}

fn retrieve(config: &RunConfig, out: &mut dyn Write) -> Result<i32> {
    let ds = load(config)?;
    let result = config.install(|| pipeline::retrieve(&ds, config))??;
    let dir = &config.output_dir;
    let rankings = dir.join("rankings.jsonl");
    let mut w = create(&rankings)?;
    pipeline::write_rankings(&mut w, &ds, &result.evaluation.rankings)?;
    w.flush().map_err(|e| Error::io(&rankings, e))?;
    result.report.write_json(dir.join("report.json"))?;
    write_file(
        &dir.join("report.csv"),
        &result.report.to_csv(&format!("lambda={}", config.lambda)),
    )?;
    print_report(&result.report, out)?;
    Ok(0)
}

fn sweep_lambda(config: &RunConfig, grid: &[f64], out: &mut dyn Write) -> Result<i32> {
    let ds = load(config)?;
    let eval = config.eval_config(&ds);
    let rows = config.install(|| {
        let cache = pipeline::compute_similarities(&ds, &config.fusion, None)?;
        pipeline::sweep_lambda(&ds, &cache, grid, config.normalization, &eval)
    })??;
    let csv = pipeline::sweep_csv("lambda", &rows);
    write_file(&config.output_dir.join("sweep_lambda.csv"), &csv)?;
    stdout_text(out, &csv)?;
    Ok(0)
}

fn sweep_proxies(config: &RunConfig, max_proxies: usize, out: &mut dyn Write) -> Result<i32> {
    let ds = load(config)?;
    let eval = config.eval_config(&ds);
    let params = config.balance()?;
    let rows = config
        .install(|| pipeline::sweep_proxies(&ds, &config.fusion, &params, max_proxies, &eval))??;
    let csv = pipeline::sweep_csv("n_proxies", &rows);
    write_file(&config.output_dir.join("sweep_proxies.csv"), &csv)?;
    stdout_text(out, &csv)?;
    Ok(0)
}

fn evaluate(config: &RunConfig, scores: Option<&Path>, out: &mut dyn Write) -> Result<i32> {
    let ds = load(config)?;
    let eval = config.eval_config(&ds);
    let n_g = ds.gallery().len();
    let evaluation = match scores {
        Some(path) => {
            let m = ScoreMatrix::read(path)?;
            if m.query_count() != ds.queries.len() || m.gallery_count() != n_g {
                return Err(Error::Shape(format!(
                    "score file is {}x{}, dataset is {}x{}",
                    m.query_count(),
                    m.gallery_count(),
                    ds.queries.len(),
                    n_g
                )));
            }
            config.install(|| {
                pipeline::evaluate_with(&ds, &eval, config.ranking_len, |q| {
                    SimilarityVector::from_f32(&ds.queries[q].query_id, ScoreKind::Final, m.row(q))
                })
            })??
        }
        None => config.install(|| {
            let cache = pipeline::compute_similarities(&ds, &config.fusion, None)?;
            let text_only = BalanceParams::new(1.0, config.normalization)?;
            pipeline::evaluate_cached(&ds, &cache, &text_only, &eval, config.ranking_len)
        })??,
    };
    let report = EvalReport {
        dataset: ds.name.clone(),
        num_queries: ds.queries.len(),
        config: serde_json::json!({
            "run": config.echo(),
            "scores": scores,
        }),
        metrics: evaluation.metrics,
        per_query: Some(evaluation.diagnostics),
    };
    report.write_json(config.output_dir.join("evaluation.json"))?;
    print_report(&report, out)?;
    Ok(0)
}
