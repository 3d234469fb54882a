use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::{Arc, RwLock};

use sentinel_core::features::{read_embeddings, Embedding};
use sentinel_core::ranking::{nn_rank, smr_rank, InterestingSet, RankMethod, RankedFinding, RankingError, SmrClassifier};
use tokio::sync::Mutex;

use crate::config::{ServiceConfig, LABELS_FILE};
use crate::labels::{LabelBook, LabelLog};
use crate::ServiceError;

/// Read-only inputs loaded at startup.
#[derive(Debug)]
pub struct Artifacts {
    pub config: ServiceConfig,
    pub embeddings: BTreeMap<String, Embedding>,
    pub smr: Option<SmrClassifier>,
    pub subgraph_dir: PathBuf,
}

impl Artifacts {
    pub fn load(state_dir: &Path) -> Result<Self, ServiceError> {
        let config = ServiceConfig::load(state_dir)?;
        let emb_path = state_dir.join(&config.embeddings);
        let embeddings = read_embeddings(&emb_path).map_err(|e| ServiceError::startup(&emb_path, e))?;
        if embeddings.is_empty() {
            return Err(ServiceError::startup(&emb_path, "no embeddings"));
        }
        let subgraph_dir = state_dir.join(&config.subgraphs);
        if !subgraph_dir.is_dir() {
            return Err(ServiceError::startup(&subgraph_dir, "not a directory"));
        }
        for id in &config.exemplars {
            if !embeddings.contains_key(id) {
                return Err(ServiceError::startup(
                    &emb_path,
                    format!("no embedding for exemplar {id:?}"),
                ));
            }
        }
        let smr = match &config.smr_model {
            Some(dir) => {
                let dir = state_dir.join(dir);
                let clf = SmrClassifier::load(&dir).map_err(|e| ServiceError::startup(&dir, e))?;
                if let Some(e) = embeddings.values().next() {
                    if e.dim() != clf.input_dim() {
                        return Err(ServiceError::startup(
                            &dir,
                            format!("classifier expects dimension {}, embeddings have {}", clf.input_dim(), e.dim()),
                        ));
                    }
                }
                Some(clf)
            }
            None => None,
        };
        Ok(Self {
            config,
            embeddings,
            smr,
            subgraph_dir,
        })
    }
}

/// One computed queue. Replaced wholesale on rerank.
#[derive(Debug, Clone, PartialEq)]
pub struct QueueState {
    pub generation: u64,
    pub method: RankMethod,
    pub queue: Vec<RankedFinding>,
    pub interesting: InterestingSet,
}

/// Interesting set for `book`: seed exemplars, then ids labeled worth
/// auditing.
pub fn interesting_set(cfg: &ServiceConfig, book: &LabelBook) -> InterestingSet {
    InterestingSet::new(cfg.exemplars.iter().cloned().chain(book.worth_auditing()))
}

/// Ranks every embedding that carries no active verdict.
pub fn compute_queue(art: &Artifacts, book: &LabelBook, generation: u64) -> Result<QueueState, RankingError> {
    let cfg = &art.config;
    let interesting = interesting_set(cfg, book);
    let keep = |id: &str| interesting.contains(id) || !book.is_labeled(id);
    let pool: BTreeMap<String, Embedding> = art
        .embeddings
        .iter()
        .filter(|(id, _)| keep(id))
        .map(|(id, e)| (id.clone(), e.clone()))
        .collect();
    let queue = match cfg.method {
        RankMethod::Nn => {
            if interesting.is_empty() {
                return Err(RankingError::EmptyInterestingSet);
            }
            if pool.len() > interesting.len() {
                nn_rank(&pool, &interesting, cfg.queue_size)?
            } else {
                Vec::new()
            }
        }
        RankMethod::Smr => {
            let clf = art.smr.as_ref().expect("checked at startup");
            let naturals: BTreeMap<String, Embedding> = pool
                .into_iter()
                .filter(|(id, _)| !book.is_labeled(id) && !interesting.contains(id))
                .collect();
            if naturals.is_empty() {
                Vec::new()
            } else {
                smr_rank(clf, &naturals, cfg.queue_size)?
            }
        }
    };
    Ok(QueueState {
        generation,
        method: cfg.method,
        queue,
        interesting,
    })
}

/// Shared service state. Readers take a snapshot `Arc` under a short read
/// lock; label writes and reranks go through `writer` one at a time.
#[derive(Debug)]
pub struct AppState {
    pub artifacts: Arc<Artifacts>,
    pub queue: RwLock<Arc<QueueState>>,
    pub labels: RwLock<Arc<LabelBook>>,
    pub writer: Mutex<LabelLog>,
}

impl AppState {
    pub fn open(state_dir: &Path) -> Result<Self, ServiceError> {
        let artifacts = Artifacts::load(state_dir)?;
        let log = LabelLog::new(state_dir.join(LABELS_FILE));
        let book = log.replay()?;
        for l in book.history() {
            if !artifacts.embeddings.contains_key(&l.subgraph_id) {
                return Err(ServiceError::startup(
                    log.path(),
                    format!("label for unknown subgraph {:?}", l.subgraph_id),
                ));
            }
        }
        let queue = compute_queue(&artifacts, &book, 0).map_err(|e| ServiceError::startup(state_dir, e))?;
        Ok(Self {
            artifacts: Arc::new(artifacts),
            queue: RwLock::new(Arc::new(queue)),
            labels: RwLock::new(Arc::new(book)),
            writer: Mutex::new(log),
        })
    }

    pub fn queue(&self) -> Arc<QueueState> {
        self.queue.read().expect("lock not poisoned").clone()
    }

    pub fn labels(&self) -> Arc<LabelBook> {
        self.labels.read().expect("lock not poisoned").clone()
    }
}
