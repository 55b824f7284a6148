//! Command-line pipelines over the cotsearch library.
//!
//! Every command is deterministic from `(--config, --seed)`: rerunning with
//! identical inputs produces byte-identical primary artifacts at any
//! `--threads` value. The run manifest written next to the artifacts
//! records wall-clock time and is the one file excluded from that
//! guarantee. Diagnostics go to stderr; artifacts only to `--out`.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{de::DeserializeOwned, Serialize};

use cotsearch::backend::{gen_queries, DefaultMode, EnvBackend, EnvQuery, EnvSpec};
use cotsearch::explorer::{
    monte_carlo_aggregate, random_rollout, superior_fraction_grid, write_path_matrix, BinSpec,
    PathMatrix,
};
use cotsearch::heads::{
    build_progress_dataset, init_potential_from_embeddings, train_potential, train_progress,
    HeadCheckpoint, TrainConfig,
};
use cotsearch::metrics::{
    metrics_csv, mode_correlation, mode_correlation_csv, operator_frequency,
    operator_frequency_csv, summarize_run, ModeLabel,
};
use cotsearch::search::{
    rollout_natural, run_hybrid_guidance, run_search_indexed, DecisionRecord, SearchConfig,
};
use cotsearch::segment::{distribution_csv, preceding_token_distribution, BucketRules};
use cotsearch::trace::{read_traces, write_traces, Operator, Query, ReasoningTrace};

#[derive(Parser)]
#[command(
    name = "cotsearch",
    version,
    about = "Operator-level search over reasoning decision points"
)]
struct Cli {
    /// Primary config file for the subcommand (environment spec for
    /// gen-env, training config for train, search config for
    /// search/random/hybrid, bin spec for aggregate).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Root seed; overrides the seed field of the loaded config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory for artifacts.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Worker threads. Affects wall clock only, never results.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate an environment spec and a query set.
    GenEnv(GenEnvArgs),
    /// Train heuristic heads from a trace corpus.
    Train(TrainArgs),
    /// Dual-factor guided search over a query set.
    Search(SearchArgs),
    /// Unguided rollouts: uniform random operators or the backend's own policy.
    Random(RandomArgs),
    /// Planner-guided hybrid rollouts (teacher forces one token per step).
    Hybrid(HybridArgs),
    /// Monte Carlo aggregation of a trace corpus into a density grid.
    Aggregate(AggregateArgs),
    /// Accuracy/length/efficiency comparison of a run against a baseline.
    Metrics(MetricsArgs),
    /// Corpus analyses: operator frequencies, preceding tokens, mode correlation.
    Analyze(AnalyzeArgs),
}

#[derive(Args)]
struct GenEnvArgs {
    #[arg(long, default_value_t = 200)]
    n_queries: usize,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum HeadKind {
    Potential,
    Progress,
    Both,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    traces: PathBuf,
    #[arg(long)]
    env: PathBuf,
    #[arg(long, value_enum, default_value_t = HeadKind::Both)]
    heads: HeadKind,
}

#[derive(Args)]
struct SearchArgs {
    #[arg(long)]
    queries: PathBuf,
    #[arg(long)]
    env: PathBuf,
    #[arg(long)]
    potential: PathBuf,
    #[arg(long)]
    progress: PathBuf,
    #[arg(long, default_value_t = 1)]
    repeats: u64,
    /// Also stream per-decision scores to diagnostics.jsonl.
    #[arg(long)]
    diagnostics: bool,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum RolloutKind {
    /// Uniform operator at every decision point.
    Uniform,
    /// The backend's own sampled policy (no intervention).
    OriginalSampled,
    /// The backend's own greedy policy (no intervention).
    OriginalGreedy,
}

#[derive(Args)]
struct RandomArgs {
    #[arg(long)]
    queries: PathBuf,
    #[arg(long)]
    env: PathBuf,
    #[arg(long, default_value_t = 16)]
    repeats: u64,
    #[arg(long, value_enum, default_value_t = RolloutKind::Uniform)]
    policy: RolloutKind,
}

#[derive(Args)]
struct HybridArgs {
    #[arg(long)]
    queries: PathBuf,
    #[arg(long)]
    env: PathBuf,
    #[arg(long, default_value_t = 1)]
    repeats: u64,
}

#[derive(Args)]
struct AggregateArgs {
    #[arg(long)]
    traces: PathBuf,
    #[arg(long)]
    env: PathBuf,
    #[arg(long, default_value_t = 1_000_000)]
    iterations: u64,
    /// Baseline point as "length,accuracy" for the superior-path fraction.
    #[arg(long)]
    baseline: Option<String>,
    #[arg(long, conflicts_with = "baseline")]
    baseline_traces: Option<PathBuf>,
}

#[derive(Args)]
struct MetricsArgs {
    #[arg(long)]
    traces: PathBuf,
    #[arg(long)]
    baseline_traces: PathBuf,
    #[arg(long)]
    env: PathBuf,
}

#[derive(Args)]
struct AnalyzeArgs {
    #[command(subcommand)]
    kind: AnalyzeKind,
}

#[derive(Subcommand)]
enum AnalyzeKind {
    /// Percentage of decision points won by each operator.
    OpFreq {
        #[arg(long)]
        traces: PathBuf,
        #[arg(long)]
        env: PathBuf,
    },
    /// Distribution of tokens preceding a keyword across the corpus.
    Preceding {
        #[arg(long)]
        traces: PathBuf,
        #[arg(long)]
        env: PathBuf,
        #[arg(long)]
        keyword: String,
    },
    /// Operator-to-mode correlation over externally labeled steps
    /// (CSV with an `operator,mode` header).
    Modes {
        #[arg(long)]
        labels: PathBuf,
    },
}

/// Every run records what produced its artifacts. The wall-clock field
/// makes this the one non-reproducible file in an output directory.
#[derive(Serialize)]
struct RunManifest {
    command: String,
    config_paths: Vec<String>,
    seeds: Vec<u64>,
    inputs: Vec<String>,
    outputs: Vec<String>,
    tool_version: String,
    wall_clock_ms: u128,
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Help and version requests are not usage errors.
            if e.use_stderr() {
                eprintln!("{e}");
                std::process::exit(1);
            }
            print!("{e}");
            std::process::exit(0);
        }
    };
    if let Some(n) = cli.threads {
        cotsearch::exec::configure_threads(n);
    }
    if let Err(e) = run(&cli) {
        eprintln!("error: {e:#}");
        std::process::exit(2);
    }
}

fn load_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

fn load_env(path: &Path) -> Result<(EnvSpec, EnvBackend)> {
    let spec: EnvSpec = load_json(path)?;
    let backend = EnvBackend::new(spec.clone())?;
    Ok((spec, backend))
}

fn read_queries(path: &Path) -> Result<Vec<EnvQuery>> {
    let reader = BufReader::new(
        fs::File::open(path).with_context(|| format!("opening {}", path.display()))?,
    );
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let q: EnvQuery =
            serde_json::from_str(&line).with_context(|| format!("query file line {}", i + 1))?;
        out.push(q);
    }
    Ok(out)
}

fn load_search_config(cli: &Cli) -> Result<SearchConfig> {
    let mut cfg: SearchConfig = match &cli.config {
        Some(path) => load_json(path)?,
        None => SearchConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn manifest_paths(cli: &Cli) -> Vec<String> {
    cli.config.iter().map(|p| p.display().to_string()).collect()
}

fn finish(
    cli: &Cli,
    command: &str,
    seeds: Vec<u64>,
    inputs: Vec<String>,
    outputs: Vec<String>,
    started: Instant,
) -> Result<()> {
    let manifest = RunManifest {
        command: command.to_string(),
        config_paths: manifest_paths(cli),
        seeds,
        inputs,
        outputs,
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        wall_clock_ms: started.elapsed().as_millis(),
    };
    write_json(&cli.out.join(format!("manifest-{command}.json")), &manifest)?;
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    let started = Instant::now();
    fs::create_dir_all(&cli.out)?;
    match &cli.command {
        Command::GenEnv(args) => cmd_gen_env(cli, args, started),
        Command::Train(args) => cmd_train(cli, args, started),
        Command::Search(args) => cmd_search(cli, args, started),
        Command::Random(args) => cmd_random(cli, args, started),
        Command::Hybrid(args) => cmd_hybrid(cli, args, started),
        Command::Aggregate(args) => cmd_aggregate(cli, args, started),
        Command::Metrics(args) => cmd_metrics(cli, args, started),
        Command::Analyze(args) => cmd_analyze(cli, args, started),
    }
}

fn cmd_gen_env(cli: &Cli, args: &GenEnvArgs, started: Instant) -> Result<()> {
    let seed = cli.seed.unwrap_or(0);
    let spec: EnvSpec = match &cli.config {
        Some(path) => load_json(path)?,
        None => EnvSpec {
            seed,
            ..EnvSpec::default()
        },
    };
    spec.validate()?;
    let queries = gen_queries(&spec, args.n_queries, seed);
    let spec_path = cli.out.join("env_spec.json");
    write_json(&spec_path, &spec)?;
    let queries_path = cli.out.join("queries.jsonl");
    let mut w = BufWriter::new(fs::File::create(&queries_path)?);
    for q in &queries {
        writeln!(w, "{}", serde_json::to_string(q)?)?;
    }
    w.flush()?;
    eprintln!("wrote {} queries", queries.len());
    finish(
        cli,
        "gen-env",
        vec![seed, spec.seed],
        vec![],
        vec![
            spec_path.display().to_string(),
            queries_path.display().to_string(),
        ],
        started,
    )
}

#[derive(Serialize)]
struct HeadReport {
    kind: String,
    n_samples: usize,
    skipped_traces: usize,
    epochs: usize,
    initial_loss: f64,
    final_loss: f64,
    epoch_loss: Vec<f64>,
    seed: u64,
}

fn cmd_train(cli: &Cli, args: &TrainArgs, started: Instant) -> Result<()> {
    let (spec, backend) = load_env(&args.env)?;
    let traces = read_traces(&args.traces, &spec.operator_set)?;
    let mut cfg: TrainConfig = match &cli.config {
        Some(path) => load_json(path)?,
        None => TrainConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    let mut reports = Vec::new();
    let mut outputs = Vec::new();
    if matches!(args.heads, HeadKind::Potential | HeadKind::Both) {
        let samples = backend.teacher_samples(&traces)?;
        let init = init_potential_from_embeddings(
            &backend.operator_embeddings(),
            spec.operator_set.name.clone(),
        )?;
        let (head, curve) = train_potential(&samples, init, &cfg)?;
        let path = cli.out.join("potential.json");
        HeadCheckpoint::from_potential(&head, cfg.seed).save(&path)?;
        eprintln!(
            "potential: {} samples, KL {:.5} -> {:.5}",
            samples.len(),
            curve[0],
            curve.last().unwrap()
        );
        reports.push(HeadReport {
            kind: "potential".into(),
            n_samples: samples.len(),
            skipped_traces: 0,
            epochs: cfg.epochs,
            initial_loss: curve[0],
            final_loss: *curve.last().unwrap(),
            epoch_loss: curve,
            seed: cfg.seed,
        });
        outputs.push(path.display().to_string());
    }
    if matches!(args.heads, HeadKind::Progress | HeadKind::Both) {
        let (samples, skipped) = build_progress_dataset(&traces, &backend)?;
        if skipped > 0 {
            eprintln!("warning: skipped {skipped} incomplete traces");
        }
        let (head, curve) = train_progress(&samples, &cfg)?;
        let path = cli.out.join("progress.json");
        HeadCheckpoint::from_progress(&head, cfg.seed).save(&path)?;
        eprintln!(
            "progress: {} samples, MSE {:.5} -> {:.5}",
            samples.len(),
            curve[0],
            curve.last().unwrap()
        );
        reports.push(HeadReport {
            kind: "progress".into(),
            n_samples: samples.len(),
            skipped_traces: skipped,
            epochs: cfg.epochs,
            initial_loss: curve[0],
            final_loss: *curve.last().unwrap(),
            epoch_loss: curve,
            seed: cfg.seed,
        });
        outputs.push(path.display().to_string());
    }
    let report_path = cli.out.join("training_report.json");
    write_json(&report_path, &reports)?;
    outputs.push(report_path.display().to_string());
    finish(
        cli,
        "train",
        vec![cfg.seed],
        vec![
            args.traces.display().to_string(),
            args.env.display().to_string(),
        ],
        outputs,
        started,
    )
}

fn write_trace_file(path: &Path, traces: &[ReasoningTrace]) -> Result<()> {
    write_traces(path, traces)?;
    Ok(())
}

#[derive(Serialize)]
struct DiagnosticsLine<'a> {
    query_id: &'a str,
    repeat: u64,
    decisions: &'a [DecisionRecord],
}

fn cmd_search(cli: &Cli, args: &SearchArgs, started: Instant) -> Result<()> {
    let (spec, backend) = load_env(&args.env)?;
    let mut cfg = load_search_config(cli)?;
    if cli.config.is_none() {
        cfg.operator_set = spec.operator_set.clone();
    }
    let (pot, _) = HeadCheckpoint::load(&args.potential)?.into_potential()?;
    let (prog, _) = HeadCheckpoint::load(&args.progress)?.into_progress()?;
    let queries: Vec<Query> = read_queries(&args.queries)?
        .iter()
        .map(EnvQuery::to_query)
        .collect();
    let jobs: Vec<(usize, u64)> = (0..queries.len())
        .flat_map(|i| (0..args.repeats).map(move |r| (i, r)))
        .collect();
    let results = cotsearch::exec::par_map_result(&jobs, |&(i, r)| {
        run_search_indexed(&queries[i], &backend, &pot, &prog, &cfg, r)
    })?;
    let traces: Vec<ReasoningTrace> = results.iter().map(|(t, _)| t.clone()).collect();
    let traces_path = cli.out.join("traces.jsonl");
    write_trace_file(&traces_path, &traces)?;
    let mut outputs = vec![traces_path.display().to_string()];
    if args.diagnostics {
        let diag_path = cli.out.join("diagnostics.jsonl");
        let mut w = BufWriter::new(fs::File::create(&diag_path)?);
        for ((i, r), (_, decisions)) in jobs.iter().zip(&results) {
            let line = DiagnosticsLine {
                query_id: &queries[*i].id,
                repeat: *r,
                decisions,
            };
            writeln!(w, "{}", serde_json::to_string(&line)?)?;
        }
        w.flush()?;
        outputs.push(diag_path.display().to_string());
    }
    let correct = traces.iter().filter(|t| t.correct).count();
    eprintln!("search: {}/{} correct", correct, traces.len());
    finish(
        cli,
        "search",
        vec![cfg.seed],
        vec![
            args.queries.display().to_string(),
            args.env.display().to_string(),
        ],
        outputs,
        started,
    )
}

fn cmd_random(cli: &Cli, args: &RandomArgs, started: Instant) -> Result<()> {
    let (spec, backend) = load_env(&args.env)?;
    let mut cfg = load_search_config(cli)?;
    if cli.config.is_none() {
        cfg.operator_set = spec.operator_set.clone();
    }
    let backend = match args.policy {
        RolloutKind::OriginalGreedy => backend.with_default_mode(DefaultMode::Greedy),
        _ => backend,
    };
    let queries: Vec<Query> = read_queries(&args.queries)?
        .iter()
        .map(EnvQuery::to_query)
        .collect();
    let jobs: Vec<(usize, u64)> = (0..queries.len())
        .flat_map(|i| (0..args.repeats).map(move |r| (i, r)))
        .collect();
    let traces = cotsearch::exec::par_map_result(&jobs, |&(i, r)| match args.policy {
        RolloutKind::Uniform => random_rollout(
            &queries[i],
            &backend,
            &cfg,
            cotsearch::explorer::cell_seed(cfg.seed, i, r as usize),
        ),
        _ => rollout_natural(&queries[i], &backend, &cfg, r),
    })?;
    let traces_path = cli.out.join("traces.jsonl");
    write_trace_file(&traces_path, &traces)?;
    let pm = PathMatrix::from_traces(&traces)?;
    let pm_path = cli.out.join("path_matrix.jsonl");
    write_path_matrix(&pm_path, &pm)?;
    eprintln!("{} rollouts over {} queries", traces.len(), pm.n_queries());
    finish(
        cli,
        "random",
        vec![cfg.seed],
        vec![
            args.queries.display().to_string(),
            args.env.display().to_string(),
        ],
        vec![
            traces_path.display().to_string(),
            pm_path.display().to_string(),
        ],
        started,
    )
}

fn cmd_hybrid(cli: &Cli, args: &HybridArgs, started: Instant) -> Result<()> {
    let (spec, backend) = load_env(&args.env)?;
    let mut cfg = load_search_config(cli)?;
    if cli.config.is_none() {
        cfg.operator_set = spec.operator_set.clone();
    }
    let queries: Vec<Query> = read_queries(&args.queries)?
        .iter()
        .map(EnvQuery::to_query)
        .collect();
    let jobs: Vec<(usize, u64)> = (0..queries.len())
        .flat_map(|i| (0..args.repeats).map(move |r| (i, r)))
        .collect();
    let planner_backend = backend.clone();
    let results = cotsearch::exec::par_map_result(&jobs, |&(i, r)| {
        run_hybrid_guidance(
            &queries[i],
            &backend,
            |s| planner_backend.teacher_policy(s),
            &cfg,
            r,
        )
    })?;
    let traces: Vec<ReasoningTrace> = results.iter().map(|(t, _)| t.clone()).collect();
    let traces_path = cli.out.join("traces.jsonl");
    write_trace_file(&traces_path, &traces)?;
    let summary_path = cli.out.join("hybrid_summary.csv");
    let mut w = BufWriter::new(fs::File::create(&summary_path)?);
    writeln!(w, "query_id,repeat,steps,total_tokens,guiding_fraction")?;
    for ((i, r), (trace, fraction)) in jobs.iter().zip(&results) {
        writeln!(
            w,
            "{},{},{},{},{}",
            queries[*i].id,
            r,
            trace.steps.len(),
            trace.total_tokens,
            fraction
        )?;
    }
    w.flush()?;
    let mean_fraction: f64 =
        results.iter().map(|(_, f)| f).sum::<f64>() / results.len().max(1) as f64;
    eprintln!("hybrid: mean guiding fraction {mean_fraction:.4}");
    finish(
        cli,
        "hybrid",
        vec![cfg.seed],
        vec![
            args.queries.display().to_string(),
            args.env.display().to_string(),
        ],
        vec![
            traces_path.display().to_string(),
            summary_path.display().to_string(),
        ],
        started,
    )
}

#[derive(Serialize)]
struct DensityMeta {
    length_edges: Vec<f64>,
    accuracy_edges: Vec<f64>,
    n_samples: u64,
    iterations: u64,
    seed: u64,
    baseline: Option<(f64, f64)>,
    superior_fraction: Option<f64>,
}

fn baseline_point(
    args: &AggregateArgs,
    set: &cotsearch::OperatorSet,
) -> Result<Option<(f64, f64)>> {
    if let Some(text) = &args.baseline {
        let parts: Vec<&str> = text.split(',').collect();
        if parts.len() != 2 {
            bail!("--baseline expects \"length,accuracy\"");
        }
        return Ok(Some((parts[0].trim().parse()?, parts[1].trim().parse()?)));
    }
    if let Some(path) = &args.baseline_traces {
        let traces = read_traces(path, set)?;
        if traces.is_empty() {
            bail!("baseline trace file is empty");
        }
        let len = traces.iter().map(|t| t.total_tokens).sum::<u64>() as f64 / traces.len() as f64;
        let acc = traces.iter().filter(|t| t.correct).count() as f64 / traces.len() as f64;
        return Ok(Some((len, acc)));
    }
    Ok(None)
}

fn cmd_aggregate(cli: &Cli, args: &AggregateArgs, started: Instant) -> Result<()> {
    let (spec, _) = load_env(&args.env)?;
    let seed = cli.seed.unwrap_or(0);
    let bins: BinSpec = match &cli.config {
        Some(path) => load_json(path)?,
        None => BinSpec::default(),
    };
    let traces = read_traces(&args.traces, &spec.operator_set)?;
    let pm = PathMatrix::from_traces(&traces)?;
    let grid = monte_carlo_aggregate(&pm, args.iterations, &bins, seed)?;
    let baseline = baseline_point(args, &spec.operator_set)?;
    let superior = baseline.map(|b| superior_fraction_grid(&grid, b));
    let csv_path = cli.out.join("density.csv");
    fs::write(&csv_path, grid.to_csv())?;
    let meta_path = cli.out.join("density_meta.json");
    write_json(
        &meta_path,
        &DensityMeta {
            length_edges: grid.length_edges.clone(),
            accuracy_edges: grid.accuracy_edges.clone(),
            n_samples: grid.n_samples,
            iterations: args.iterations,
            seed,
            baseline,
            superior_fraction: superior,
        },
    )?;
    if let Some(s) = superior {
        eprintln!("superior fraction {s:.4}");
    }
    finish(
        cli,
        "aggregate",
        vec![seed],
        vec![args.traces.display().to_string()],
        vec![
            csv_path.display().to_string(),
            meta_path.display().to_string(),
        ],
        started,
    )
}

fn cmd_metrics(cli: &Cli, args: &MetricsArgs, started: Instant) -> Result<()> {
    let (spec, _) = load_env(&args.env)?;
    let ours = read_traces(&args.traces, &spec.operator_set)?;
    let baseline = read_traces(&args.baseline_traces, &spec.operator_set)?;
    let m = summarize_run(&ours, &baseline)?;
    let json_path = cli.out.join("metrics.json");
    write_json(&json_path, &m)?;
    let csv_path = cli.out.join("metrics.csv");
    fs::write(&csv_path, metrics_csv(&[("run", &m)]))?;
    eprintln!(
        "acc {:.3} vs {:.3}, len {:.1} vs {:.1}, eta {:.3}",
        m.accuracy, m.baseline_accuracy, m.mean_length, m.baseline_length, m.eta
    );
    finish(
        cli,
        "metrics",
        vec![],
        vec![
            args.traces.display().to_string(),
            args.baseline_traces.display().to_string(),
        ],
        vec![
            json_path.display().to_string(),
            csv_path.display().to_string(),
        ],
        started,
    )
}

fn read_labels(path: &Path) -> Result<Vec<(Operator, ModeLabel)>> {
    let reader = BufReader::new(fs::File::open(path)?);
    let mut out = Vec::new();
    let mut next_id = 0usize;
    let mut ids: std::collections::BTreeMap<String, usize> = Default::default();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let line = line.trim();
        if line.is_empty() || (i == 0 && line.eq_ignore_ascii_case("operator,mode")) {
            continue;
        }
        let (op_text, mode_text) = line
            .split_once(',')
            .with_context(|| format!("labels line {}: expected operator,mode", i + 1))?;
        let mode = ModeLabel::parse(mode_text)
            .with_context(|| format!("labels line {}: unknown mode {mode_text:?}", i + 1))?;
        let id = *ids.entry(op_text.to_string()).or_insert_with(|| {
            let id = next_id;
            next_id += 1;
            id
        });
        out.push((
            Operator {
                id,
                text: op_text.to_string(),
            },
            mode,
        ));
    }
    Ok(out)
}

fn cmd_analyze(cli: &Cli, args: &AnalyzeArgs, started: Instant) -> Result<()> {
    match &args.kind {
        AnalyzeKind::OpFreq { traces, env } => {
            let (spec, _) = load_env(env)?;
            let corpus = read_traces(traces, &spec.operator_set)?;
            let rows = operator_frequency(&corpus);
            let path = cli.out.join("operator_frequency.csv");
            fs::write(&path, operator_frequency_csv(&rows))?;
            finish(
                cli,
                "analyze",
                vec![],
                vec![traces.display().to_string()],
                vec![path.display().to_string()],
                started,
            )
        }
        AnalyzeKind::Preceding {
            traces,
            env,
            keyword,
        } => {
            let (spec, _) = load_env(env)?;
            let corpus = read_traces(traces, &spec.operator_set)?;
            let dist = preceding_token_distribution(
                &corpus,
                keyword,
                &BucketRules::delimiter_space_other(),
            );
            let path = cli.out.join("preceding_tokens.csv");
            fs::write(&path, distribution_csv(keyword, &dist))?;
            finish(
                cli,
                "analyze",
                vec![],
                vec![traces.display().to_string()],
                vec![path.display().to_string()],
                started,
            )
        }
        AnalyzeKind::Modes { labels } => {
            let pairs = read_labels(labels)?;
            let rows = mode_correlation(&pairs);
            let path = cli.out.join("mode_correlation.csv");
            fs::write(&path, mode_correlation_csv(&rows))?;
            finish(
                cli,
                "analyze",
                vec![],
                vec![labels.display().to_string()],
                vec![path.display().to_string()],
                started,
            )
        }
    }
}
