use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Parser, Subcommand, ValueEnum};
use serde::Deserialize;

use raglab::corpus::{ingest_corpus, merge_gold, Passage};
use raglab::dense::EmbeddingMatrix;
use raglab::eval::{render_table, ReportFormat};
use raglab::experiment::{
    execute, load_config, read_run, verify_checksums, write_run, ConfigError, Grid, Issue, Preset,
    RunError, Session,
};
use raglab::prompt::GoldPosition;
use raglab::sparse::{Bm25Params, SparseIndex};

/// Retrieval and prompt-composition experiments for RAG.
#[derive(Parser)]
#[command(name = "raglab", version)]
struct Cli {
    /// Base directory for every relative path.
    #[arg(long, global = true, default_value = ".")]
    workdir: PathBuf,

    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct ConfigArgs {
    /// Experiment config or run manifest (TOML).
    #[arg(long)]
    config: PathBuf,

    /// Override a config key, e.g. `--set noise.seed=7`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Build a BM25 index over a passage file.
    IndexSparse {
        #[arg(long)]
        corpus: PathBuf,
        /// Gold passages added to the corpus when absent.
        #[arg(long)]
        gold: Option<PathBuf>,
        #[arg(long)]
        output: PathBuf,
        #[arg(long, default_value_t = Bm25Params::default().k1)]
        k1: f64,
        #[arg(long, default_value_t = Bm25Params::default().b)]
        b: f64,
    },
    /// Convert `{"id", "vector"}` JSONL rows into a binary embedding matrix.
    EmbedImport {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
    },
    /// Print the top-k passages for a query with their labels.
    Retrieve {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(
            long,
            conflicts_with = "question",
            required_unless_present = "question"
        )]
        query_id: Option<String>,
        /// Free-text question (sparse retriever only).
        #[arg(long)]
        question: Option<String>,
        #[arg(long, default_value_t = 10)]
        k: usize,
    },
    /// Build the prompt a run would send for one query.
    Compose {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        query_id: String,
        #[arg(long)]
        position: Option<GoldPosition>,
        /// Print the exact prompt text instead of the plan summary.
        #[arg(long)]
        dry_run: bool,
    },
    /// Run an experiment and write its report directory.
    Run {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        preset: Option<Preset>,
        #[arg(long)]
        output_dir: Option<PathBuf>,
        /// Noise seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        schema: Option<String>,
        #[arg(long)]
        budget: Option<usize>,
        #[arg(long)]
        gold_position: Option<GoldPosition>,
    },
    /// Print the tables of a finished run.
    Report {
        #[arg(long)]
        run_dir: PathBuf,
        #[arg(long, value_enum, default_value_t = Format::Markdown)]
        format: Format,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Csv,
    Markdown,
}

impl From<Format> for ReportFormat {
    fn from(f: Format) -> Self {
        match f {
            Format::Csv => ReportFormat::Csv,
            Format::Markdown => ReportFormat::Markdown,
        }
    }
}

enum Failure {
    Config(ConfigError),
    Runtime(anyhow::Error),
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Failure::Config(e)
    }
}

impl From<RunError> for Failure {
    fn from(e: RunError) -> Self {
        match e {
            RunError::Config(e) => Failure::Config(e),
            other => Failure::Runtime(other.into()),
        }
    }
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Runtime(e)
    }
}

fn quoted(s: &str) -> String {
    toml::Value::String(s.to_string()).to_string()
}

fn open_session(workdir: &Path, args: &ConfigArgs, extra: Vec<String>) -> Result<Session, Failure> {
    let mut overrides = args.overrides.clone();
    overrides.extend(extra);
    let loaded = load_config(&workdir.join(&args.config), &overrides)?;
    let session = Session::open(loaded.config, workdir)?;
    if let Some(expected) = &loaded.checksums {
        verify_checksums(expected, &session.checksums)?;
    }
    Ok(session)
}

fn write_stdout(text: &str) -> anyhow::Result<()> {
    let mut out = std::io::stdout().lock();
    out.write_all(text.as_bytes())?;
    out.flush()?;
    Ok(())
}

fn index_sparse(
    workdir: &Path,
    corpus: &Path,
    gold: Option<&Path>,
    output: &Path,
    params: Bm25Params,
) -> anyhow::Result<()> {
    let mut passages = ingest_corpus(workdir.join(corpus))
        .with_context(|| format!("reading {}", corpus.display()))?;
    if let Some(gold) = gold {
        let extra = ingest_corpus(workdir.join(gold))
            .with_context(|| format!("reading {}", gold.display()))?;
        let extra: BTreeMap<String, Passage> =
            extra.iter().map(|p| (p.id.clone(), p.clone())).collect();
        passages = merge_gold(&passages, &[], &extra)?;
    }
    let index = SparseIndex::build(&passages, params)?;
    let path = workdir.join(output);
    let file = File::create(&path).with_context(|| format!("creating {}", path.display()))?;
    let mut w = BufWriter::new(file);
    index.write_to(&mut w)?;
    w.flush()?;
    println!(
        "indexed {} passages, {} terms, average length {:.2}",
        index.doc_count(),
        index.terms().count(),
        index.avg_doc_length()
    );
    Ok(())
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct EmbeddingRow {
    id: String,
    vector: Vec<f32>,
}

fn embed_import(workdir: &Path, input: &Path, output: &Path) -> anyhow::Result<()> {
    let path = workdir.join(input);
    let file = File::open(&path).with_context(|| format!("opening {}", path.display()))?;
    let mut ids = Vec::new();
    let mut rows = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let row: EmbeddingRow =
            serde_json::from_str(&line).with_context(|| format!("line {}", i + 1))?;
        ids.push(row.id);
        rows.push(row.vector);
    }
    let matrix = EmbeddingMatrix::from_rows(ids, &rows)?;
    matrix.save(workdir.join(output))?;
    println!(
        "wrote {} vectors of dimension {}",
        matrix.count(),
        matrix.dim()
    );
    Ok(())
}

fn retrieve(
    session: &Session,
    query_id: Option<&str>,
    question: Option<&str>,
    k: usize,
) -> anyhow::Result<()> {
    let docs = match query_id {
        Some(id) => {
            let record = session
                .query(id)
                .ok_or_else(|| anyhow!("unknown query id {id:?}"))?;
            session.retrieve(record, k).map_err(|e| anyhow!(e))?
        }
        None => {
            let question = question.expect("clap requires one of the two");
            session.search(None, question, k).map_err(|e| anyhow!(e))?
        }
    };
    let mut out = String::from("rank\tpassage_id\tscore\tlabel\n");
    for d in &docs {
        let label = d.label.map_or("-", |l| l.as_str());
        out.push_str(&format!(
            "{}\t{}\t{:.6}\t{}\n",
            d.rank, d.passage_id, d.score, label
        ));
    }
    write_stdout(&out)
}

fn compose(
    session: &Session,
    query_id: &str,
    position: Option<GoldPosition>,
    dry_run: bool,
) -> anyhow::Result<()> {
    let record = session
        .query(query_id)
        .ok_or_else(|| anyhow!("unknown query id {query_id:?}"))?;
    let grid = Grid::build(&session.config);
    let cell = &grid.cells[0];
    let position = position.or(cell.positions[0]);
    let (plan, notes) = session
        .compose_cell(cell, record, position, None)
        .map_err(|e| anyhow!(e))?;
    for note in &notes {
        tracing::warn!(query = %record.id, "{note}");
    }
    if dry_run {
        return write_stdout(&plan.render());
    }
    let mut out = format!(
        "schema: {}\nposition: {}\ntokens: {} / {}\ndropped: {}\n",
        cell.schema,
        position.map_or("-".to_string(), |p| p.to_string()),
        plan.token_count,
        plan.budget,
        plan.dropped
    );
    for (i, doc) in plan.context.iter().enumerate() {
        out.push_str(&format!("[{}] {} {}\n", i + 1, doc.label, doc.passage.id));
    }
    write_stdout(&out)
}

fn run(workdir: &Path, session: &Session) -> Result<(), Failure> {
    let output_dir = session.config.output_dir.clone().ok_or_else(|| {
        ConfigError::Invalid(vec![Issue {
            path: "output_dir".into(),
            message: "is required (or pass --output-dir)".into(),
        }])
    })?;
    let output = execute(session)?;
    let dir = workdir.join(output_dir);
    write_run(&dir, &output)?;
    let mut text = render_table(&output.report.table, ReportFormat::Markdown);
    if let Some(topk) = &output.report.topk {
        text.push('\n');
        text.push_str(&render_table(topk, ReportFormat::Markdown));
    }
    write_stdout(&text)?;
    eprintln!("wrote {}", dir.display());
    Ok(())
}

fn report(workdir: &Path, run_dir: &Path, format: ReportFormat) -> anyhow::Result<()> {
    let report = read_run(&workdir.join(run_dir))?;
    let mut text = render_table(&report.table, format);
    if let Some(topk) = &report.topk {
        text.push('\n');
        text.push_str(&render_table(topk, format));
    }
    write_stdout(&text)
}

fn dispatch(cli: Cli) -> Result<(), Failure> {
    let workdir = cli.workdir;
    match cli.command {
        Command::IndexSparse {
            corpus,
            gold,
            output,
            k1,
            b,
        } => {
            if !(k1.is_finite() && k1 >= 0.0) || !(0.0..=1.0).contains(&b) {
                return Err(ConfigError::Invalid(vec![Issue {
                    path: "k1/b".into(),
                    message: "k1 must be non-negative and b must lie in [0, 1]".into(),
                }])
                .into());
            }
            index_sparse(
                &workdir,
                &corpus,
                gold.as_deref(),
                &output,
                Bm25Params { k1, b },
            )?
        }
        Command::EmbedImport { input, output } => embed_import(&workdir, &input, &output)?,
        Command::Retrieve {
            config,
            query_id,
            question,
            k,
        } => {
            let session = open_session(&workdir, &config, Vec::new())?;
            if !session.has_retriever() {
                bail_config("retriever", "retrieve needs a [retriever] section")?;
            }
            retrieve(&session, query_id.as_deref(), question.as_deref(), k)?
        }
        Command::Compose {
            config,
            query_id,
            position,
            dry_run,
        } => {
            let session = open_session(&workdir, &config, Vec::new())?;
            compose(&session, &query_id, position, dry_run)?
        }
        Command::Run {
            config,
            preset,
            output_dir,
            seed,
            schema,
            budget,
            gold_position,
        } => {
            let mut extra = Vec::new();
            if let Some(p) = preset {
                extra.push(format!("preset={}", quoted(p.as_str())));
            }
            if let Some(d) = output_dir {
                extra.push(format!("output_dir={}", quoted(&d.to_string_lossy())));
            }
            if let Some(s) = seed {
                if s > i64::MAX as u64 {
                    bail_config("noise.seed", "must fit in a signed 64-bit integer")?;
                }
                extra.push(format!("noise.seed={s}"));
            }
            if let Some(s) = schema {
                extra.push(format!("prompt.schema={}", quoted(&s)));
            }
            if let Some(b) = budget {
                extra.push(format!("prompt.budget={b}"));
            }
            if let Some(p) = gold_position {
                extra.push(format!("prompt.gold_position={}", quoted(p.as_str())));
            }
            let session = open_session(&workdir, &config, extra)?;
            run(&workdir, &session)?
        }
        Command::Report { run_dir, format } => report(&workdir, &run_dir, format.into())?,
    }
    Ok(())
}

fn bail_config(path: &str, message: &str) -> Result<(), Failure> {
    Err(ConfigError::Invalid(vec![Issue {
        path: path.into(),
        message: message.into(),
    }])
    .into())
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_writer(std::io::stderr)
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_env("RAGLAB_LOG")
                .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new("warn")),
        )
        .init();
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
