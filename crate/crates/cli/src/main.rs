mod config;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use item_core::data_synth::{generate_catalog, make_split, read_catalog, select_records, write_catalog, CatalogSplit, ProductRecord};
use item_core::model::{load_checkpoint, save_checkpoint, Model};
use item_core::partial_path;
use item_core::retrieval::{embed_catalog, relevance_sets, EmbeddingIndex, MetricReport, RetrievalRun};
use item_core::text::{train_bpe, Vocab};
use item_core::trainer::{finetune_classifier, predict_logits, prepare, pretrain};
use item_core::verification;

use config::RunConfig;

#[derive(Parser)]
#[command(name = "item", about = "Image-text product embeddings: synthesis, pretraining, retrieval and evaluation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// key=value configuration file
    #[arg(long)]
    config: Option<PathBuf>,
    /// Root seed for every random stream
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory
    #[arg(long)]
    out: PathBuf,
    /// Extra key=value overrides, applied after --config
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Args, Clone)]
struct Inputs {
    /// Directory written by `item synth`
    #[arg(long)]
    catalog: Option<PathBuf>,
    /// Vocabulary file written by `item tokenize`
    #[arg(long)]
    vocab: Option<PathBuf>,
    /// Model checkpoint
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Task {
    Search,
    Classify,
    Verify,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum QuerySplit {
    Dev,
    Test,
}

impl QuerySplit {
    fn name(self) -> &'static str {
        match self {
            Self::Dev => "dev",
            Self::Test => "test",
        }
    }

    fn ids(self, split: &CatalogSplit) -> &[String] {
        match self {
            Self::Dev => &split.query_dev,
            Self::Test => &split.query_test,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic catalog, query set and splits
    Synth {
        #[command(flatten)]
        common: Common,
    },
    /// Train the BPE vocabulary on training-split titles
    Tokenize {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        inputs: Inputs,
    },
    /// Masked multi-objective pretraining
    Pretrain {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        inputs: Inputs,
        /// Restrict masked-reconstruction losses to matched pairs
        #[arg(long)]
        mask_losses_matched_only: bool,
    },
    /// Fine-tune a leaf-category classifier
    Finetune {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        inputs: Inputs,
    },
    /// Embed the index and the queries
    Embed {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        inputs: Inputs,
    },
    /// Rank index products for each query
    Search {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        inputs: Inputs,
        /// Directory written by `item embed`
        #[arg(long)]
        embeddings: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: QuerySplit,
        /// Results per query; defaults to eval.k
        #[arg(long)]
        k: Option<usize>,
    },
    /// Compute metrics or run the verification oracles
    Eval {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        inputs: Inputs,
        #[arg(long, value_enum)]
        task: Task,
        /// Results file written by `item search`
        #[arg(long)]
        results: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "test")]
        split: QuerySplit,
        /// Metric cutoff; defaults to eval.k
        #[arg(long)]
        k: Option<usize>,
    },
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let partial = partial_path(path);
    fs::write(&partial, bytes).with_context(|| format!("writing {}", partial.display()))?;
    fs::rename(&partial, path).with_context(|| format!("renaming to {}", path.display()))?;
    Ok(())
}

/// Resolves the configuration and records it next to the outputs.
fn setup(common: &Common, extra: &[String]) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    if let Some(path) = &common.config {
        cfg.apply_file(path)?;
    }
    cfg.apply(&common.set)?;
    cfg.apply(extra)?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
        cfg.resolve();
    }
    cfg.validate()?;
    fs::create_dir_all(&common.out).with_context(|| format!("creating {}", common.out.display()))?;
    write_atomic(&common.out.join("run_config.txt"), cfg.to_text().as_bytes())?;
    Ok(cfg)
}

fn need<'a>(p: &'a Option<PathBuf>, flag: &str) -> Result<&'a Path> {
    p.as_deref().with_context(|| format!("--{flag} is required"))
}

struct Catalog {
    index: Vec<ProductRecord>,
    queries: Vec<ProductRecord>,
    split: CatalogSplit,
}

impl Catalog {
    fn load(dir: &Path) -> Result<Self> {
        let index = read_catalog(&dir.join("index").join("manifest.jsonl"))?;
        let queries = read_catalog(&dir.join("queries").join("manifest.jsonl"))?;
        let split_path = dir.join("split.json");
        let text = fs::read_to_string(&split_path).with_context(|| format!("reading {}", split_path.display()))?;
        let split = serde_json::from_str(&text).with_context(|| format!("parsing {}", split_path.display()))?;
        Ok(Self { index, queries, split })
    }

    fn index_split(&self, ids: &[String]) -> Result<Vec<ProductRecord>> {
        Ok(select_records(&self.index, ids)?)
    }

    fn n_classes(&self) -> usize {
        self.index.iter().map(|r| r.leaf_category as usize + 1).max().unwrap_or(0)
    }
}

fn cmd_synth(common: &Common) -> Result<()> {
    let cfg = setup(common, &[])?;
    let (index, queries) = generate_catalog(&cfg.synth)?;
    let split = make_split(&index, &queries, cfg.seed)?;
    write_catalog(&index, &common.out.join("index"))?;
    write_catalog(&queries, &common.out.join("queries"))?;
    write_atomic(&common.out.join("split.json"), serde_json::to_string_pretty(&split)?.as_bytes())?;
    log::info!("wrote {} index products and {} queries", index.len(), queries.len());
    Ok(())
}

fn cmd_tokenize(common: &Common, inputs: &Inputs) -> Result<()> {
    let cfg = setup(common, &[])?;
    let cat = Catalog::load(need(&inputs.catalog, "catalog")?)?;
    let train = cat.index_split(&cat.split.train)?;
    let titles: Vec<&str> = train.iter().map(|r| r.title.as_str()).collect();
    let vocab = train_bpe(&titles, cfg.tokenizer.vocab_target)?;
    if vocab.truncated {
        log::warn!(
            "merges ran out at {} entries below the target {}",
            vocab.size(),
            cfg.tokenizer.vocab_target
        );
    }
    vocab.save(&common.out.join("vocab.txt"))?;
    Ok(())
}

fn model_config(cfg: &RunConfig, vocab: &Vocab) -> item_core::model::ModelConfig {
    let mut m = cfg.model.clone();
    m.vocab_size = vocab.size();
    m
}

fn cmd_pretrain(common: &Common, inputs: &Inputs, matched_only: bool) -> Result<()> {
    let extra = if matched_only { vec!["pretrain.matched_only=true".to_string()] } else { Vec::new() };
    let cfg = setup(common, &extra)?;
    let cat = Catalog::load(need(&inputs.catalog, "catalog")?)?;
    let vocab = Vocab::load(need(&inputs.vocab, "vocab")?)?;
    let train = cat.index_split(&cat.split.train)?;
    let valid = cat.index_split(&cat.split.valid)?;
    let out = pretrain(&train, &valid, &vocab, &model_config(&cfg, &vocab), &cfg.pretrain, cfg.seed, Some(&common.out))?;
    let best = out.best_eval();
    log::info!("best step {} valid loss {:.4} itm acc {:.3}", best.step, best.loss.total, best.itm_accuracy);
    Ok(())
}

fn cmd_finetune(common: &Common, inputs: &Inputs) -> Result<()> {
    let cfg = setup(common, &[])?;
    let cat = Catalog::load(need(&inputs.catalog, "catalog")?)?;
    let vocab = Vocab::load(need(&inputs.vocab, "vocab")?)?;
    let model: Model<f32> = load_checkpoint(need(&inputs.checkpoint, "checkpoint")?)?;
    let train = cat.index_split(&cat.split.train)?;
    let valid = cat.index_split(&cat.split.valid)?;
    let out = finetune_classifier(&model, &train, &valid, &vocab, cat.n_classes(), &cfg.finetune, cfg.seed)?;
    let log: String = out.history.iter().map(|e| format!("{}\n", serde_json::to_string(e).expect("plain struct"))).collect();
    write_atomic(&common.out.join("finetune_log.jsonl"), log.as_bytes())?;
    save_checkpoint(&out.model, &common.out.join("classifier.ckpt"))?;
    log::info!("best epoch {}", out.best_epoch);
    Ok(())
}

fn cmd_embed(common: &Common, inputs: &Inputs) -> Result<()> {
    let cfg = setup(common, &[])?;
    let cat = Catalog::load(need(&inputs.catalog, "catalog")?)?;
    let vocab = Vocab::load(need(&inputs.vocab, "vocab")?)?;
    let model: Model<f32> = load_checkpoint(need(&inputs.checkpoint, "checkpoint")?)?;
    embed_catalog(&model, &cat.index, &vocab, cfg.eval.batch_size)?.save(&common.out.join("index.emb"))?;
    embed_catalog(&model, &cat.queries, &vocab, cfg.eval.batch_size)?.save(&common.out.join("queries.emb"))?;
    Ok(())
}

fn cmd_search(common: &Common, inputs: &Inputs, embeddings: &Path, split: QuerySplit, k: Option<usize>) -> Result<()> {
    let cfg = setup(common, &[])?;
    let k = k.unwrap_or(cfg.eval.k);
    if k == 0 {
        bail!("--k must be positive");
    }
    let cat = Catalog::load(need(&inputs.catalog, "catalog")?)?;
    let index = EmbeddingIndex::load(&embeddings.join("index.emb"))?;
    let queries = EmbeddingIndex::load(&embeddings.join("queries.emb"))?;
    let mut selected = Vec::new();
    for id in split.ids(&cat.split) {
        let pos = queries.position(id).with_context(|| format!("query {id} missing from embeddings"))?;
        selected.push((id.clone(), queries.get(pos).to_triple()));
    }
    let run = RetrievalRun::search(&selected, &index, k, &BTreeMap::new());
    write_atomic(&common.out.join(format!("results.{}.jsonl", split.name())), run.to_jsonl().as_bytes())?;
    Ok(())
}

fn cmd_eval(common: &Common, inputs: &Inputs, task: Task, results: Option<&Path>, split: QuerySplit, k: Option<usize>) -> Result<bool> {
    let cfg = setup(common, &[])?;
    let k = k.unwrap_or(cfg.eval.k);
    if k == 0 {
        bail!("--k must be positive");
    }
    let report = match task {
        Task::Search => {
            let cat = Catalog::load(need(&inputs.catalog, "catalog")?)?;
            let path = results.context("--results is required for --task search")?;
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            let relevance = relevance_sets(&cat.index, &cat.queries);
            let run = RetrievalRun::from_jsonl(&text, &relevance)?;
            MetricReport::search(split.name(), &run, k)
        }
        Task::Classify => {
            let cat = Catalog::load(need(&inputs.catalog, "catalog")?)?;
            let vocab = Vocab::load(need(&inputs.vocab, "vocab")?)?;
            let model: Model<f32> = load_checkpoint(need(&inputs.checkpoint, "checkpoint")?)?;
            if model.config.n_classes == 0 {
                bail!("checkpoint has no classifier head");
            }
            let test = cat.index_split(&cat.split.test)?;
            let set = prepare(&test, &vocab, &model.config);
            let labels: Vec<usize> = set.iter().map(|r| r.leaf as usize).collect();
            let logits = predict_logits(&model, &set, cfg.eval.batch_size)?;
            MetricReport::classify("test", &logits, &labels)
        }
        Task::Verify => {
            let reports = verification::run_all(cfg.seed)?;
            let text: String = reports.iter().map(|r| format!("{}\n", r.to_json())).collect();
            write_atomic(&common.out.join("verify.jsonl"), text.as_bytes())?;
            print!("{text}");
            return Ok(reports.iter().all(|r| r.pass));
        }
    };
    write_atomic(&common.out.join("metrics.json"), format!("{}\n", report.to_json()).as_bytes())?;
    print!("{}", report.to_table());
    Ok(true)
}

fn run(cli: Cli) -> Result<bool> {
    match &cli.command {
        Command::Synth { common } => cmd_synth(common)?,
        Command::Tokenize { common, inputs } => cmd_tokenize(common, inputs)?,
        Command::Pretrain {
            common,
            inputs,
            mask_losses_matched_only,
        } => cmd_pretrain(common, inputs, *mask_losses_matched_only)?,
        Command::Finetune { common, inputs } => cmd_finetune(common, inputs)?,
        Command::Embed { common, inputs } => cmd_embed(common, inputs)?,
        Command::Search {
            common,
            inputs,
            embeddings,
            split,
            k,
        } => cmd_search(common, inputs, embeddings, *split, *k)?,
        Command::Eval {
            common,
            inputs,
            task,
            results,
            split,
            k,
        } => return cmd_eval(common, inputs, *task, results.as_deref(), *split, *k),
    }
    Ok(true)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("error: verification checks failed");
            ExitCode::FAILURE
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
