//! Command-line front end. Every subcommand maps to one core operation and
//! exits non-zero with a diagnostic on stderr when it fails.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use revsum_core::config::Config;
use revsum_core::dataset::{compute_corpus_stats, load_reviews_table, write_summaries_table, AspectSchema, SummaryRow};
use revsum_core::eval::{agreement_rate, annotation_items, error_distribution, final_verdicts, import_annotations};
use revsum_core::Execution;

use crate::api::{router, AppState, Schedule};

#[derive(Debug, Parser)]
#[command(name = "revsum", version, about = "Aspect-guided review summarization")]
pub struct Cli {
    /// `key = value` configuration file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    /// Directory for the journal and mapping log when the configuration
    /// does not name them.
    #[arg(long, global = true, default_value = ".revsum")]
    pub state_dir: PathBuf,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Ingest a reviews table (CSV or JSONL) and run triggered pipelines.
    Ingest {
        file: PathBuf,
        /// Store the table's aspect column as extractions instead of calling
        /// the model later.
        #[arg(long)]
        with_aspects: bool,
        /// Do not run pipelines for products whose trigger fires.
        #[arg(long)]
        no_run: bool,
    },
    /// Run the pipeline for one product and print its summary record.
    Run { product_id: String },
    /// Fit consolidation on the whole corpus, then summarize every eligible
    /// product.
    BatchRun {
        #[arg(long = "product")]
        products: Vec<String>,
        /// Write the generated summaries as a summaries table (CSV or JSONL).
        #[arg(long)]
        export: Option<PathBuf>,
    },
    /// Aspect and corpus statistics for a reviews table.
    Stats {
        reviews_table: PathBuf,
        #[arg(long, default_value_t = 10)]
        top: usize,
        /// Worker threads; 1 runs sequentially, 0 uses every core.
        #[arg(long, default_value_t = 0)]
        threads: usize,
    },
    /// Error-tier distribution and agreement for an annotations file.
    Eval {
        annotations: PathBuf,
        #[arg(long)]
        json: bool,
    },
    /// Serve the HTTP API.
    Serve {
        /// Overrides `listen_addr` from the configuration.
        #[arg(long)]
        listen: Option<String>,
    },
}

fn load_config(cli: &Cli) -> Result<Config> {
    let mut cfg = match &cli.config {
        Some(path) => Config::load(path).with_context(|| format!("loading {}", path.display()))?,
        None => Config::default(),
    };
    if cfg.store_path.is_none() || cfg.mapping_path.is_none() {
        std::fs::create_dir_all(&cli.state_dir)
            .with_context(|| format!("creating {}", cli.state_dir.display()))?;
    }
    cfg.store_path.get_or_insert_with(|| cli.state_dir.join("journal.jsonl"));
    cfg.mapping_path.get_or_insert_with(|| cli.state_dir.join("mappings.tsv"));
    Ok(cfg)
}

fn threads(n: usize) -> Execution {
    match n {
        0 => Execution::Parallel { threads: 0 },
        n => Execution::with_threads(n),
    }
}

fn read_table(path: &Path) -> Result<Vec<revsum_core::dataset::ReviewRow>> {
    let loaded = load_reviews_table(path, &AspectSchema::default()).with_context(|| format!("reading {}", path.display()))?;
    for r in &loaded.rejects {
        eprintln!("skipped row {}: {}", r.row, r.reason);
    }
    Ok(loaded.records)
}

pub fn run(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::Stats { reviews_table, top, threads: n } => {
            let rows = read_table(reviews_table)?;
            print!("{}", compute_corpus_stats(&rows, threads(*n)).report(*top));
            Ok(())
        }
        Command::Eval { annotations, json } => {
            let loaded = import_annotations(annotations).with_context(|| format!("reading {}", annotations.display()))?;
            for r in &loaded.rejects {
                eprintln!("skipped row {}: {}", r.row, r.reason);
            }
            if loaded.records.is_empty() {
                bail!("{} has no usable annotations", annotations.display());
            }
            let verdicts = final_verdicts(&loaded.records);
            let dist = error_distribution(verdicts.iter().map(|(_, v)| v));
            if *json {
                println!("{}", dist.to_json());
            } else {
                print!("{}", dist.to_tsv());
                let multi: Vec<_> = annotation_items(&loaded.records)
                    .into_iter()
                    .filter(|i| i.len() > 1)
                    .collect();
                if let Ok(rate) = agreement_rate(&multi) {
                    println!("Agreement\t{:.2}\t{} items", rate, multi.len());
                }
            }
            Ok(())
        }
        Command::Ingest { file, with_aspects, no_run } => {
            let orch = load_config(&cli)?.build()?;
            let rows = read_table(file)?;
            let (mut accepted, mut duplicates, mut failed) = (0, 0, 0);
            for row in &rows {
                match orch.ingest(&row.review) {
                    Ok(decision) => {
                        accepted += 1;
                        if *with_aspects {
                            orch.store().put_extraction(&row.extraction("dataset"))?;
                        }
                        if decision.fires() && !*no_run {
                            let product_id = &row.review.product_id;
                            match orch.run_pipeline(product_id) {
                                Ok(r) => println!("summarized {product_id} at {} reviews", r.review_count_at_generation),
                                Err(e) => {
                                    failed += 1;
                                    eprintln!("{e}");
                                }
                            }
                        }
                    }
                    Err(revsum_core::orchestrator::IngestError::Store(
                        revsum_core::store::StoreError::DuplicateReview(id),
                    )) => {
                        duplicates += 1;
                        eprintln!("duplicate review {id}");
                    }
                    Err(e) => return Err(e.into()),
                }
            }
            println!("ingested {accepted} reviews ({duplicates} duplicates)");
            if failed > 0 {
                bail!("{failed} triggered runs failed");
            }
            Ok(())
        }
        Command::Run { product_id } => {
            let orch = load_config(&cli)?.build()?;
            let record = orch.run_pipeline(product_id)?;
            println!("{}", serde_json::to_string_pretty(&record)?);
            Ok(())
        }
        Command::BatchRun { products, export } => {
            let orch = load_config(&cli)?.build()?;
            let selected = (!products.is_empty()).then_some(products.as_slice());
            let items = orch.batch_run(selected)?;
            let mut failed = 0;
            for item in &items {
                match &item.outcome {
                    Ok(r) => println!("{}\tok\t{} chars", item.product_id, r.summary_text.chars().count()),
                    Err(e) => {
                        failed += 1;
                        println!("{}\tfailed\t{}", item.product_id, e.message);
                    }
                }
            }
            if let Some(path) = export {
                let rows: Vec<SummaryRow> = items
                    .iter()
                    .filter_map(|i| i.outcome.as_ref().ok())
                    .map(|r| SummaryRow {
                        product_id: r.product_id.clone(),
                        product_class: String::new(),
                        summary: r.summary_text.clone(),
                    })
                    .collect();
                write_summaries_table(path, &rows).with_context(|| format!("writing {}", path.display()))?;
            }
            if failed > 0 {
                bail!("{failed} of {} products failed", items.len());
            }
            Ok(())
        }
        Command::Serve { listen } => {
            let cfg = load_config(&cli)?;
            let addr = listen.clone().unwrap_or_else(|| cfg.listen_addr.clone());
            let state = AppState {
                orchestrator: Arc::new(cfg.build()?),
                schedule: Schedule::Background,
            };
            let app = router(state, cfg.cors_origin.as_deref());
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(async move {
                let listener = tokio::net::TcpListener::bind(&addr)
                    .await
                    .with_context(|| format!("binding {addr}"))?;
                tracing::info!(%addr, "listening");
                axum::serve(listener, app)
                    .with_graceful_shutdown(async {
                        let _ = tokio::signal::ctrl_c().await;
                    })
                    .await?;
                Ok(())
            })
        }
    }
}
