use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use dedup_core::active::{ActiveRun, GroundTruthOracle, SelectionStrategy};
use dedup_core::blocking::{block_candidates_with, blocking_recall, write_pairs_csv};
use dedup_core::config::RunConfig;
use dedup_core::corpus::load_csv;
use dedup_core::eval::{compare_strategies, evaluate_scores, field_similarity_baseline, ComparisonTable, ScoredPair};
use dedup_core::pipeline::Prepared;
use dedup_core::training::{train_round, LabeledExample};
use dedup_service::{router, Registry};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Parser)]
#[command(name = "dedup-al", version, about = "Active-learning record deduplication")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Load a corpus and write it back as normalized CSV.
    Ingest {
        #[command(flatten)]
        run: RunArgs,
        /// Read this CSV instead of the configured data source.
        #[arg(long)]
        csv: Option<PathBuf>,
        #[arg(long, default_value = "id")]
        id_column: String,
        #[arg(long)]
        truth_column: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate candidate pairs for the whole corpus.
    Block {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one round on a random labeled sample of the pool and evaluate it.
    Train {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Run the labeling loop with ground-truth labels.
    Run {
        #[command(flatten)]
        run: RunArgs,
        /// Persist the run here; an existing run in the directory is resumed.
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Compare selection strategies over several seeds.
    Eval {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2,3,4")]
        seeds: Vec<u64>,
        #[arg(long, value_delimiter = ',', default_value = "uncertainty,random")]
        strategies: Vec<SelectionStrategy>,
        /// Also score the edit-similarity baseline on this attribute.
        #[arg(long)]
        baseline_field: Option<String>,
        #[arg(long, default_value_t = 0.8)]
        baseline_threshold: f64,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Serve the labeling API.
    Serve {
        #[arg(long, env = "DEDUP_AL_HOST", default_value = "127.0.0.1")]
        host: String,
        #[arg(long, env = "DEDUP_AL_PORT", default_value_t = 8080)]
        port: u16,
        #[arg(long, env = "DEDUP_AL_DATA_DIR", default_value = "dedup-data")]
        data_dir: PathBuf,
    },
}

#[derive(Args)]
struct RunArgs {
    /// Run configuration (JSON). Defaults to the standard synthetic experiment.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Derive every random stream from this seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    strategy: Option<SelectionStrategy>,
    #[arg(long)]
    rounds: Option<usize>,
    /// Labels per round.
    #[arg(long)]
    budget: Option<usize>,
}

impl RunArgs {
    fn load(&self) -> Result<RunConfig> {
        let mut config = match &self.config {
            Some(path) => RunConfig::load(path).with_context(|| format!("loading {}", path.display()))?,
            None => RunConfig::standard_synthetic(),
        };
        if let Some(strategy) = &self.strategy {
            config.active.strategy = strategy.clone();
        }
        if let Some(seed) = self.seed {
            config = config.with_seed(seed);
        }
        if let Some(rounds) = self.rounds {
            config.active.rounds = rounds;
        }
        if let Some(budget) = self.budget {
            config.active.budget = budget;
        }
        config.validate()?;
        Ok(config)
    }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)?;
    }
    Ok(BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?))
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    serde_json::to_writer_pretty(create(path)?, value)?;
    Ok(())
}

fn ingest(run: &RunArgs, csv: Option<&Path>, id_column: &str, truth_column: Option<&str>, out: &Path) -> Result<()> {
    let corpus = match csv {
        Some(path) => load_csv(path, id_column, truth_column)?,
        None => run.load()?.data.load()?,
    };
    corpus.write_csv(create(out)?)?;
    println!("{} records, {} attributes", corpus.len(), corpus.schema.len());
    if corpus.has_truth {
        println!("{} true duplicate pairs", corpus.true_pair_count());
    }
    Ok(())
}

fn block(run: &RunArgs, out: &Path) -> Result<()> {
    let config = run.load()?;
    let corpus = config.data.load()?;
    let output = block_candidates_with(&corpus, &config.stopwords(), &config.blocking);
    write_pairs_csv(&output.pairs, create(out)?)?;
    println!("{} candidate pairs from {} records", output.pairs.len(), corpus.len());
    for (token, size) in &output.capped_tokens {
        println!("capped token `{token}` ({size} records)");
    }
    if let Some(recall) = blocking_recall(&corpus, &output.pairs) {
        println!("blocking recall {recall:.4}");
    }
    Ok(())
}

fn train(run: &RunArgs, out_dir: &Path) -> Result<()> {
    let config = run.load()?;
    let prepared = Prepared::build(&config)?;
    let ids: Vec<&String> = prepared.pool.keys().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(config.active.seed);
    let n = config.active.budget.min(ids.len());
    let mut examples = Vec::with_capacity(n);
    for i in sample(&mut rng, ids.len(), n) {
        let p = &prepared.pool[ids[i]];
        let label = p.truth.context("training from the CLI needs ground-truth clusters")?;
        examples.push(LabeledExample {
            pair_id: ids[i].clone(),
            seq: p.seq.clone(),
            label: u8::from(label),
        });
    }
    let encoder = dedup_core::encoder::EncoderConfig {
        vocab_size: prepared.vocab.len(),
        max_len: config.preprocess.max_len,
        ..config.encoder.clone()
    };
    let params = dedup_core::encoder::EncoderParams::init(&encoder)?;
    let (params, log) = train_round(&params, &examples, &config.train)?;

    std::fs::create_dir_all(out_dir)?;
    params.save(out_dir.join("checkpoint.json"))?;
    prepared.vocab.save(out_dir.join("vocab.txt"))?;
    log.write_jsonl(create(&out_dir.join("training.jsonl"))?)?;
    let scored = prepared
        .test
        .iter()
        .filter_map(|t| t.truth.map(|truth| (t, truth)))
        .map(|(t, truth)| {
            Ok(ScoredPair {
                pair_id: t.pair.pair_id.clone(),
                p: dedup_core::encoder::forward(&params, &t.seq, None)?.p,
                truth,
            })
        })
        .collect::<dedup_core::Result<Vec<_>>>()?;
    let (counts, metrics) = evaluate_scores(&scored, config.active.threshold)?;
    write_json(&out_dir.join("evaluation.json"), &serde_json::json!({ "confusion": counts, "metrics": metrics }))?;
    println!(
        "trained on {n} pairs; test P {:.4} R {:.4} F1 {:.4}",
        metrics.precision, metrics.recall, metrics.f1
    );
    Ok(())
}

fn run_loop(run: &RunArgs, out_dir: Option<&Path>) -> Result<()> {
    let config = run.load()?;
    let mut active = match out_dir {
        Some(dir) => ActiveRun::open(config, dir)?,
        None => ActiveRun::new(config)?,
    };
    active.run_with(&mut GroundTruthOracle)?;
    let table = ComparisonTable::from_runs(vec![dedup_core::eval::StrategyRun {
        strategy: active.config().active.strategy.name().to_string(),
        seed: active.config().active.seed,
        reports: active.reports().to_vec(),
    }]);
    print!("{}", table.to_markdown());
    if let Some(dir) = out_dir {
        write_json(&dir.join("export.json"), &active.export()?)?;
    }
    Ok(())
}

fn eval(run: &RunArgs, seeds: &[u64], strategies: &[SelectionStrategy], baseline: Option<(&str, f64)>, out_dir: &Path) -> Result<()> {
    let config = run.load()?;
    if seeds.is_empty() || strategies.is_empty() {
        bail!("need at least one seed and one strategy");
    }
    let table = compare_strategies(&config, strategies, seeds)?;
    std::fs::create_dir_all(out_dir)?;
    table.write_csv(create(&out_dir.join("comparison.csv"))?)?;
    write_json(&out_dir.join("comparison.json"), &table)?;
    let markdown = table.to_markdown();
    std::fs::write(out_dir.join("comparison.md"), &markdown)?;
    print!("{markdown}");

    if let Some((field, threshold)) = baseline {
        let prepared = Prepared::build(&config)?;
        let pairs: Vec<_> = prepared.test.iter().map(|t| t.pair.clone()).collect();
        let predictions = field_similarity_baseline(&pairs, &prepared.corpus, field, threshold)?;
        let scored: Vec<ScoredPair> = predictions
            .iter()
            .zip(&prepared.test)
            .map(|(b, t)| ScoredPair {
                pair_id: b.pair_id.clone(),
                p: f64::from(u8::from(b.duplicate)),
                truth: t.truth.unwrap_or(false),
            })
            .collect();
        let (_, m) = evaluate_scores(&scored, 0.5)?;
        println!("baseline `{field}` ≥ {threshold}: P {:.4} R {:.4} F1 {:.4}", m.precision, m.recall, m.f1);
    }
    Ok(())
}

async fn serve(host: &str, port: u16, data_dir: PathBuf) -> Result<()> {
    let registry = Arc::new(Registry::new(data_dir)?);
    let restored = registry.restore().await?;
    if restored > 0 {
        log::info!("resumed {restored} persisted runs");
    }
    let listener = tokio::net::TcpListener::bind((host, port)).await?;
    log::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(registry))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match &cli.command {
        Command::Ingest { run, csv, id_column, truth_column, out } => {
            ingest(run, csv.as_deref(), id_column, truth_column.as_deref(), out)
        }
        Command::Block { run, out } => block(run, out),
        Command::Train { run, out_dir } => train(run, out_dir),
        Command::Run { run, out_dir } => run_loop(run, out_dir.as_deref()),
        Command::Eval { run, seeds, strategies, baseline_field, baseline_threshold, out_dir } => eval(
            run,
            seeds,
            strategies,
            baseline_field.as_deref().map(|f| (f, *baseline_threshold)),
            out_dir,
        ),
        Command::Serve { host, port, data_dir } => tokio::runtime::Runtime::new()?.block_on(serve(host, *port, data_dir.clone())),
    }
}
