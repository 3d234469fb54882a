//! `sentinel`: command-line driver for the insider-risk pipeline.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::{BufWriter, Write};
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sentinel_core::corpus::{load_corpus, select_roots};
use sentinel_core::features::{
    handcrafted_embedding, read_embeddings, schema_from_subgraphs, write_embeddings, Embedding, FeatureSchema,
};
use sentinel_core::gnn::{hyperparameter_search, train_gnn, GnnHyperparams, GnnModel, SearchSpace};
use sentinel_core::ranking::{
    build_mutated_set, nn_rank, smr_rank, train_smr_holdout, InterestingSet, MutationConfig, RankMethod,
    RankedFinding, SmrClassifier, SmrConfig,
};
use sentinel_core::sampler::{load_subgraphs, sample_all, write_subgraphs, RootedSubgraph, SamplerConfig};
use sentinel_core::simgen::{generate, GroundTruth, SimConfig};
use sentinel_core::stats::{evaluate, BetaPrior};
use sentinel_service::ServiceConfig;

#[derive(Parser)]
#[command(name = "sentinel", version, about = "Rank data-access actions for audit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum EmbedMethod {
    Handcrafted,
    Gnn,
}

#[derive(Clone, Copy, ValueEnum)]
enum Method {
    Nn,
    Smr,
}

impl From<Method> for RankMethod {
    fn from(m: Method) -> Self {
        match m {
            Method::Nn => RankMethod::Nn,
            Method::Smr => RankMethod::Smr,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Parse and index a corpus, printing the record count or the first error.
    Ingest {
        #[arg(long)]
        input: PathBuf,
        /// Only check the file.
        #[arg(long)]
        validate_only: bool,
    },
    /// Generate a synthetic corpus and the labels of its sensitive roots.
    Simgen {
        /// JSON config; defaults apply to missing keys.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out_corpus: PathBuf,
        #[arg(long)]
        out_truth: PathBuf,
    },
    /// Write one rooted subgraph file per sensitive root.
    Sample {
        #[arg(long)]
        corpus: PathBuf,
        /// JSON with keys `T`, `M`, `blocked_after_first`, `sensitive_types`.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Derive the handcrafted feature schema from a subgraph directory.
    Schema {
        #[arg(long)]
        subgraphs: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Embed every subgraph in a directory.
    Embed {
        #[arg(long, value_enum)]
        method: EmbedMethod,
        #[arg(long)]
        subgraphs: PathBuf,
        /// Handcrafted schema; derived from the subgraphs when absent.
        #[arg(long)]
        schema: Option<PathBuf>,
        /// GNN model directory.
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the GNN embedder by random hyperparameter search, or with
    /// fixed hyperparameters when `--hparams` is given.
    TrainGnn {
        #[arg(long)]
        subgraphs: PathBuf,
        #[arg(long)]
        space: Option<PathBuf>,
        #[arg(long)]
        hparams: Option<PathBuf>,
        #[arg(long, default_value_t = 8)]
        budget: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the synthetic-mutation classifier on natural subgraphs and
    /// their mutated counterparts.
    TrainSmr {
        #[arg(long)]
        subgraphs: PathBuf,
        #[arg(long, value_enum, default_value = "handcrafted")]
        embedding: EmbedMethod,
        #[arg(long)]
        schema: Option<PathBuf>,
        /// GNN model directory when `--embedding gnn`.
        #[arg(long)]
        gnn_model: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Pick exemplar roots from generated ground truth.
    Exemplars {
        #[arg(long)]
        truth: PathBuf,
        #[arg(long, default_value_t = 2)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Rank embeddings by nearest neighbor or by the SMR classifier.
    Rank {
        #[arg(long, value_enum)]
        method: Method,
        #[arg(long)]
        embeddings: PathBuf,
        /// Comma-separated exemplar ids.
        #[arg(long, value_delimiter = ',')]
        interesting: Vec<String>,
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(short, long, default_value_t = 50)]
        k: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Precision@k and credible interval against ground truth.
    Eval {
        #[arg(long)]
        ranked: PathBuf,
        #[arg(long)]
        truth: PathBuf,
        #[arg(short, long, default_value_t = 50)]
        k: usize,
        #[arg(long, default_value_t = 0.9)]
        level: f64,
    },
    /// Write `service.json` for a state directory.
    InitState {
        #[arg(long)]
        state_dir: PathBuf,
        #[arg(long, value_enum)]
        method: Method,
        #[arg(long)]
        embeddings: PathBuf,
        #[arg(long)]
        subgraphs: PathBuf,
        #[arg(long, value_delimiter = ',')]
        interesting: Vec<String>,
        /// SMR model directory.
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long, default_value_t = 200)]
        queue_size: usize,
    },
    /// Serve the audit queue API.
    Serve {
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: std::net::IpAddr,
        #[arg(long)]
        state_dir: PathBuf,
    },
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n").with_context(|| format!("writing {}", path.display()))
}

fn subgraphs_from(dir: &Path) -> Result<Vec<RootedSubgraph>> {
    let gs = load_subgraphs(dir)?;
    if gs.is_empty() {
        bail!("{}: no subgraphs", dir.display());
    }
    Ok(gs)
}

fn schema_for(path: Option<&Path>, subgraphs: &[RootedSubgraph]) -> Result<FeatureSchema> {
    match path {
        Some(p) => {
            let s: FeatureSchema = read_json(p)?;
            s.validate()?;
            Ok(s)
        }
        None => Ok(schema_from_subgraphs(subgraphs)?),
    }
}

enum Embedder {
    Handcrafted(FeatureSchema),
    Gnn(GnnModel),
}

impl Embedder {
    fn new(method: EmbedMethod, schema: Option<&Path>, model: Option<&Path>, subgraphs: &[RootedSubgraph]) -> Result<Self> {
        Ok(match method {
            EmbedMethod::Handcrafted => Embedder::Handcrafted(schema_for(schema, subgraphs)?),
            EmbedMethod::Gnn => {
                let dir = model.context("--model is required for GNN embeddings")?;
                Embedder::Gnn(GnnModel::load(dir).with_context(|| format!("loading {}", dir.display()))?)
            }
        })
    }

    fn embed(&self, subgraphs: &[RootedSubgraph]) -> Result<Vec<Embedding>> {
        Ok(match self {
            Embedder::Handcrafted(schema) => subgraphs
                .iter()
                .map(|g| handcrafted_embedding(g, schema))
                .collect::<Result<_, _>>()?,
            Embedder::Gnn(model) => model.embed_all(subgraphs),
        })
    }
}

fn write_ranked(path: &Path, ranked: &[RankedFinding]) -> Result<()> {
    let mut out = BufWriter::new(fs::File::create(path).with_context(|| format!("writing {}", path.display()))?);
    for f in ranked {
        writeln!(out, "{}", serde_json::to_string(f)?)?;
    }
    out.flush()?;
    Ok(())
}

fn read_ranked(path: &Path) -> Result<Vec<RankedFinding>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).with_context(|| format!("{}:{}", path.display(), i + 1)))
        .collect()
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Ingest { input, validate_only } => {
            let store = load_corpus(&input)?;
            if validate_only {
                println!("{}", store.len());
            } else {
                let roots = select_roots(&store, &SamplerConfig::default().sensitive_types);
                println!(
                    "{}",
                    serde_json::json!({
                        "records": store.len(),
                        "entities": store.entity_count(),
                        "sensitive_roots": roots.len(),
                    })
                );
            }
        }
        Command::Simgen { config, out_corpus, out_truth } => {
            let cfg: SimConfig = match config {
                Some(p) => read_json(&p)?,
                None => SimConfig::default(),
            };
            let (records, truth) = generate(&cfg)?;
            sentinel_core::corpus::write_corpus(&out_corpus, &records)?;
            truth.write(&out_truth)?;
            eprintln!(
                "{} records, {} sensitive roots, {} anomalous",
                records.len(),
                truth.labels.len(),
                truth.anomaly_count()
            );
        }
        Command::Sample { corpus, config, out } => {
            let cfg: SamplerConfig = match config {
                Some(p) => read_json(&p)?,
                None => SamplerConfig::default(),
            };
            let store = load_corpus(&corpus)?;
            let t = Instant::now();
            let gs = sample_all(&store, &cfg)?;
            write_subgraphs(&out, &gs)?;
            eprintln!("{} subgraphs in {:.1?}", gs.len(), t.elapsed());
        }
        Command::Schema { subgraphs, out } => {
            let gs = subgraphs_from(&subgraphs)?;
            write_json(&out, &schema_from_subgraphs(&gs)?)?;
        }
        Command::Embed { method, subgraphs, schema, model, out } => {
            let gs = subgraphs_from(&subgraphs)?;
            let embedder = Embedder::new(method, schema.as_deref(), model.as_deref(), &gs)?;
            let embs: BTreeMap<String, Embedding> = gs
                .iter()
                .map(|g| g.root_id.clone())
                .zip(embedder.embed(&gs)?)
                .collect();
            write_embeddings(&out, &embs)?;
            eprintln!("{} embeddings", embs.len());
        }
        Command::TrainGnn { subgraphs, space, hparams, budget, seed, out } => {
            let gs = subgraphs_from(&subgraphs)?;
            let t = Instant::now();
            if let Some(p) = hparams {
                let hp: GnnHyperparams = read_json(&p)?;
                let trained = train_gnn(&gs, &hp)?;
                trained.model.save(&out)?;
                eprintln!(
                    "trained {} steps in {:.1?}, final loss {:?}",
                    hp.steps,
                    t.elapsed(),
                    trained.loss_curve.last()
                );
            } else {
                let space: SearchSpace = match space {
                    Some(p) => read_json(&p)?,
                    None => SearchSpace::default(),
                };
                let outcome = hyperparameter_search(&gs, &space, budget, seed)?;
                outcome.model.save(&out)?;
                write_json(&out.join("trials.json"), &outcome.trials)?;
                eprintln!(
                    "{} trials in {:.1?}; best #{} score {:.4}",
                    outcome.trials.len(),
                    t.elapsed(),
                    outcome.best,
                    outcome.trials[outcome.best].score
                );
            }
        }
        Command::TrainSmr { subgraphs, embedding, schema, gnn_model, seed, out } => {
            let gs = subgraphs_from(&subgraphs)?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mutated = build_mutated_set(&gs, &MutationConfig::default(), &mut rng);
            if mutated.is_empty() {
                bail!("no mutation applies to any subgraph");
            }
            let all: Vec<RootedSubgraph> = gs.iter().chain(&mutated).cloned().collect();
            let embedder = Embedder::new(embedding, schema.as_deref(), gnn_model.as_deref(), &all)?;
            let natural = embedder.embed(&gs)?;
            let mutated = embedder.embed(&mutated)?;
            let (clf, accuracy) = train_smr_holdout(&natural, &mutated, &SmrConfig::default(), 0.2, seed)?;
            clf.save(&out)?;
            if let Embedder::Handcrafted(schema) = &embedder {
                write_json(&out.join("schema.json"), schema)?;
            }
            println!("{}", serde_json::json!({ "heldout_accuracy": accuracy }));
        }
        Command::Exemplars { truth, count, seed } => {
            let truth = GroundTruth::read(&truth)?;
            let picked = truth.pick_anomalies(count, seed);
            if picked.len() < count {
                bail!("only {} anomalous roots", picked.len());
            }
            println!("{}", picked.join(","));
        }
        Command::Rank { method, embeddings, interesting, model, k, out } => {
            let embs = read_embeddings(&embeddings).with_context(|| format!("reading {}", embeddings.display()))?;
            let ranked = match method {
                Method::Nn => nn_rank(&embs, &InterestingSet::new(interesting), k)?,
                Method::Smr => {
                    let dir = model.context("--model is required for SMR")?;
                    let clf = SmrClassifier::load(&dir).with_context(|| format!("loading {}", dir.display()))?;
                    let exclude = InterestingSet::new(interesting);
                    let naturals: BTreeMap<String, Embedding> =
                        embs.into_iter().filter(|(id, _)| !exclude.contains(id)).collect();
                    smr_rank(&clf, &naturals, k)?
                }
            };
            write_ranked(&out, &ranked)?;
        }
        Command::Eval { ranked, truth, k, level } => {
            let ranked = read_ranked(&ranked)?;
            let truth: HashMap<String, bool> = GroundTruth::read(&truth)?.worth_auditing();
            let report = evaluate(&ranked, &truth, k, level, BetaPrior::UNIFORM)?;
            println!("{}", serde_json::to_string(&report)?);
        }
        Command::InitState { state_dir, method, embeddings, subgraphs, interesting, model, queue_size } => {
            fs::create_dir_all(&state_dir)?;
            let abs = |p: &Path| fs::canonicalize(p).with_context(|| format!("resolving {}", p.display()));
            let mut cfg = ServiceConfig::new(method.into());
            cfg.embeddings = abs(&embeddings)?;
            cfg.subgraphs = abs(&subgraphs)?;
            cfg.exemplars = interesting;
            cfg.smr_model = model.as_deref().map(abs).transpose()?;
            cfg.queue_size = queue_size;
            cfg.save(&state_dir)?;
        }
        Command::Serve { port, host, state_dir } => {
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(sentinel_service::serve(&state_dir, SocketAddr::new(host, port)))?;
        }
    }
    Ok(())
}

fn main() {
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
