mod config;

use std::io::{self, BufWriter, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use config::RunConfig;
use tcan::model::{load_params, save_params};
use tcan::pipeline::{
    alternating_train, build_index, evaluate, generate_synthetic_corpus, load_corpus, run_queries, save_corpus, Corpus,
};
use tcan::tree::{load_index, save_index};
use tcan::ModelParams;

/// Query-to-video retrieval over a tree index.
#[derive(Parser)]
#[command(name = "tcan", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Plain-text `key = value` configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override any configuration key; may be repeated.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic clustered corpus.
    Gen {
        #[command(flatten)]
        common: Common,
        /// Corpus file to write.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        clusters: Option<usize>,
        #[arg(long)]
        per_cluster: Option<usize>,
        #[arg(long)]
        noise: Option<f64>,
        #[arg(long)]
        split: Option<u64>,
    },
    /// Train a model on a corpus.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        corpus: Option<PathBuf>,
        /// Weights file to write.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        learning_rate: Option<f64>,
    },
    /// Build a tree index over a corpus with trained weights.
    Index {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        weights: Option<PathBuf>,
        /// Index file to write.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Retrieve videos for every query of a corpus as tab-separated rows.
    Retrieve {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        weights: Option<PathBuf>,
        #[arg(long)]
        index: Option<PathBuf>,
        #[arg(long)]
        beam: Option<usize>,
        /// Write rows here instead of standard output.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate retrieval quality on a corpus.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        weights: Option<PathBuf>,
        #[arg(long)]
        index: Option<PathBuf>,
        #[arg(long)]
        beam: Option<usize>,
        /// Score every video instead of searching the index.
        #[arg(long)]
        exhaustive: bool,
        /// Write the report here as well as to standard output.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Resolve the configuration: defaults, then the file, then `--set`, then
/// dedicated flags.
fn resolve(common: &Common, flags: &[(&str, Option<String>)]) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p).with_context(|| format!("reading config {}", p.display()))?,
        None => RunConfig::default(),
    };
    for pair in &common.overrides {
        cfg.set_pair(pair)?;
    }
    if let Some(seed) = common.seed {
        cfg.set("seed", &seed.to_string())?;
    }
    for (key, value) in flags {
        if let Some(v) = value {
            cfg.set(key, v)?;
        }
    }
    Ok(cfg)
}

fn text<T: ToString>(v: &Option<T>) -> Option<String> {
    v.as_ref().map(T::to_string)
}

fn path_text(p: &Option<PathBuf>) -> Option<String> {
    p.as_ref().map(|p| p.display().to_string())
}

fn read_corpus(cfg: &RunConfig) -> Result<Corpus> {
    let path = cfg.path("corpus")?;
    let mut corpus = load_corpus(&path).with_context(|| format!("reading corpus {}", path.display()))?;
    corpus.cluster_raw_boxes(cfg.get("boxes")?, cfg.get("seed")?)?;
    Ok(match cfg.get::<String>("drop")?.as_str() {
        "none" => corpus,
        "titles" => corpus.without_titles()?,
        "boxes" => corpus.without_boxes()?,
        other => {
            return Err(tcan::Error::Config(format!("`drop` must be none, titles or boxes, got `{other}`")).into())
        }
    })
}

fn read_weights(cfg: &RunConfig) -> Result<ModelParams> {
    let path = cfg.path("weights")?;
    load_params(&path).with_context(|| format!("reading weights {}", path.display()))
}

fn labels(cfg: &RunConfig, corpus: &Corpus) -> Result<Option<std::collections::HashMap<tcan::VideoId, u32>>> {
    Ok(cfg.get::<bool>("category_seeding")?.then(|| corpus.categories()))
}

fn cmd_gen(cfg: &RunConfig) -> Result<()> {
    let out = cfg.path("corpus")?;
    let corpus = generate_synthetic_corpus(&cfg.synthetic()?)?;
    save_corpus(&corpus, &out).with_context(|| format!("writing corpus {}", out.display()))?;
    cfg.save_beside(&out)?;
    Ok(())
}

fn cmd_train(cfg: &RunConfig) -> Result<()> {
    let out = cfg.path("weights")?;
    let train_cfg = cfg.train()?;
    let corpus = read_corpus(cfg)?;
    let outcome = alternating_train(&corpus, &train_cfg)?;
    save_params(&outcome.params, &out).with_context(|| format!("writing weights {}", out.display()))?;

    let mut log_name = out.as_os_str().to_owned();
    log_name.push(".log");
    let mut log = BufWriter::new(std::fs::File::create(PathBuf::from(log_name))?);
    writeln!(log, "initial_objective={:.6}", outcome.log.initial_objective)?;
    for step in &outcome.log.steps {
        writeln!(log, "{step}")?;
    }
    let rebuilt: Vec<String> = outcome.log.rebuilt_at.iter().map(usize::to_string).collect();
    writeln!(log, "rebuilt_at={}", rebuilt.join(","))?;
    writeln!(log, "final_objective={:.6}", outcome.log.final_objective)?;
    log.flush()?;

    if let Some(index) = cfg.optional_path("index") {
        save_index(&outcome.tree, &index).with_context(|| format!("writing index {}", index.display()))?;
    }
    cfg.save_beside(&out)?;
    Ok(())
}

fn cmd_index(cfg: &RunConfig) -> Result<()> {
    let out = cfg.path("index")?;
    let corpus = read_corpus(cfg)?;
    let params = read_weights(cfg)?;
    let tree = build_index(
        &params,
        &corpus.video_features()?,
        labels(cfg, &corpus)?.as_ref(),
        &cfg.build()?,
    )?;
    save_index(&tree, &out).with_context(|| format!("writing index {}", out.display()))?;
    cfg.save_beside(&out)?;
    Ok(())
}

fn read_tree(cfg: &RunConfig) -> Result<Option<tcan::TreeIndex>> {
    if cfg.get("exhaustive")? {
        return Ok(None);
    }
    let path = cfg.path("index")?;
    Ok(Some(
        load_index(&path).with_context(|| format!("reading index {}", path.display()))?,
    ))
}

/// Standard output, or `output` when set (with the config written beside it).
fn sink(cfg: &RunConfig) -> Result<Box<dyn Write>> {
    Ok(match cfg.optional_path("output") {
        Some(p) => {
            cfg.save_beside(&p)?;
            Box::new(BufWriter::new(
                std::fs::File::create(&p).with_context(|| format!("writing {}", p.display()))?,
            ))
        }
        None => Box::new(BufWriter::new(io::stdout().lock())),
    })
}

fn cmd_retrieve(cfg: &RunConfig) -> Result<()> {
    let corpus = read_corpus(cfg)?;
    let params = read_weights(cfg)?;
    let tree = read_tree(cfg)?;
    let outcomes = run_queries(&params, &corpus, tree.as_ref(), cfg.get("beam")?)?;
    let mut out = sink(cfg)?;
    writeln!(out, "query_id\trank\tvideo_id\tscore\tvisited")?;
    for o in &outcomes {
        for (rank, hit) in o.hits.iter().enumerate() {
            writeln!(
                out,
                "{}\t{}\t{}\t{:.6}\t{}",
                o.query,
                rank + 1,
                hit.item,
                hit.score,
                o.visited
            )?;
        }
    }
    out.flush()?;
    Ok(())
}

fn cmd_eval(cfg: &RunConfig) -> Result<()> {
    let corpus = read_corpus(cfg)?;
    let params = read_weights(cfg)?;
    let tree = read_tree(cfg)?;
    let report = evaluate(&params, &corpus, tree.as_ref(), cfg.get("beam")?)?;
    if let Some(p) = cfg.optional_path("output") {
        std::fs::write(&p, format!("{report}\n")).with_context(|| format!("writing {}", p.display()))?;
        cfg.save_beside(&p)?;
    }
    println!("{report}");
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Gen {
            common,
            out,
            clusters,
            per_cluster,
            noise,
            split,
        } => cmd_gen(&resolve(
            &common,
            &[
                ("corpus", path_text(&out)),
                ("clusters", text(&clusters)),
                ("per_cluster", text(&per_cluster)),
                ("noise", text(&noise)),
                ("split", text(&split)),
            ],
        )?),
        Command::Train {
            common,
            corpus,
            out,
            steps,
            learning_rate,
        } => cmd_train(&resolve(
            &common,
            &[
                ("corpus", path_text(&corpus)),
                ("weights", path_text(&out)),
                ("steps", text(&steps)),
                ("learning_rate", text(&learning_rate)),
            ],
        )?),
        Command::Index {
            common,
            corpus,
            weights,
            out,
        } => cmd_index(&resolve(
            &common,
            &[
                ("corpus", path_text(&corpus)),
                ("weights", path_text(&weights)),
                ("index", path_text(&out)),
            ],
        )?),
        Command::Retrieve {
            common,
            corpus,
            weights,
            index,
            beam,
            out,
        } => cmd_retrieve(&resolve(
            &common,
            &[
                ("corpus", path_text(&corpus)),
                ("weights", path_text(&weights)),
                ("index", path_text(&index)),
                ("beam", text(&beam)),
                ("output", path_text(&out)),
            ],
        )?),
        Command::Eval {
            common,
            corpus,
            weights,
            index,
            beam,
            exhaustive,
            out,
        } => cmd_eval(&resolve(
            &common,
            &[
                ("corpus", path_text(&corpus)),
                ("weights", path_text(&weights)),
                ("index", path_text(&index)),
                ("beam", text(&beam)),
                ("exhaustive", exhaustive.then(|| "true".to_string())),
                ("output", path_text(&out)),
            ],
        )?),
    }
}

fn error_kind(e: &anyhow::Error) -> &'static str {
    e.chain()
        .find_map(|c| {
            c.downcast_ref::<tcan::Error>().map(tcan::Error::kind).or_else(|| {
                c.downcast_ref::<io::Error>().map(|io| match io.kind() {
                    io::ErrorKind::NotFound => "missing-file",
                    io::ErrorKind::UnexpectedEof => "truncated",
                    _ => "io",
                })
            })
        })
        .unwrap_or("cli")
}

fn report_error(kind: &str, msg: &str) -> ExitCode {
    eprintln!("error kind={kind} msg={msg:?}");
    ExitCode::FAILURE
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let rendered = e.to_string();
            let first = rendered.lines().next().unwrap_or("invalid arguments");
            return report_error("usage", first.trim_start_matches("error: "));
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => report_error(error_kind(&e), &format!("{e:#}")),
    }
}
