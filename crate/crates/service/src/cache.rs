//! Solved policies keyed by model and solver settings, kept in memory and
//! mirrored to `<data dir>/policies/<key>.json`.

use std::collections::HashMap;
use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use ardie_core::episode::{policy_key, solve_task, EpisodeError};
use ardie_core::model::ArdieModel;
use ardie_core::pomdp::{AlphaDocument, PolicySet};
use ardie_core::solver::SolverConfig;
use serde::{Deserialize, Serialize};
use tokio::sync::OnceCell;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheStats {
    pub solves: u64,
    pub cache_hits: u64,
}

type Slot = Arc<OnceCell<Arc<PolicySet>>>;

#[derive(Debug)]
pub struct PolicyCache {
    dir: PathBuf,
    slots: Mutex<HashMap<String, Slot>>,
    solves: AtomicU64,
    hits: AtomicU64,
}

impl PolicyCache {
    pub fn new(dir: PathBuf) -> std::io::Result<Self> {
        std::fs::create_dir_all(&dir)?;
        Ok(PolicyCache {
            dir,
            slots: Mutex::new(HashMap::new()),
            solves: AtomicU64::new(0),
            hits: AtomicU64::new(0),
        })
    }

    pub fn stats(&self) -> CacheStats {
        CacheStats {
            solves: self.solves.load(Ordering::Relaxed),
            cache_hits: self.hits.load(Ordering::Relaxed),
        }
    }

    fn load(&self, key: &str, model: &ArdieModel) -> Option<PolicySet> {
        let text = std::fs::read_to_string(self.dir.join(format!("{key}.json"))).ok()?;
        let doc: Vec<AlphaDocument> = serde_json::from_str(&text).ok()?;
        PolicySet::from_document(&model.pomdp, &doc).ok()
    }

    fn store(&self, key: &str, model: &ArdieModel, policy: &PolicySet) {
        let doc = policy.to_document(&model.pomdp);
        let path = self.dir.join(format!("{key}.json"));
        let tmp = path.with_extension("json.tmp");
        let written = serde_json::to_vec(&doc)
            .map_err(std::io::Error::other)
            .and_then(|bytes| std::fs::write(&tmp, bytes))
            .and_then(|_| std::fs::rename(&tmp, &path));
        if let Err(e) = written {
            tracing::warn!("could not persist policy {key}: {e}");
        }
    }

    /// Returns the cached policy for `model`, solving at most once per key
    /// even under concurrent requests.
    pub async fn get_or_solve(
        self: &Arc<Self>,
        model: Arc<ArdieModel>,
        solver: &SolverConfig,
    ) -> Result<Arc<PolicySet>, EpisodeError> {
        let key = policy_key(&model, solver);
        let slot = self.slots.lock().unwrap().entry(key.clone()).or_default().clone();
        let mut fresh = false;
        let policy = slot
            .get_or_try_init(|| async {
                fresh = true;
                if let Some(p) = self.load(&key, &model) {
                    self.hits.fetch_add(1, Ordering::Relaxed);
                    return Ok::<_, EpisodeError>(Arc::new(p));
                }
                let cache = self.clone();
                let solver = solver.clone();
                tokio::task::spawn_blocking(move || {
                    let (policy, _) = solve_task(&model, &solver)?;
                    cache.solves.fetch_add(1, Ordering::Relaxed);
                    cache.store(&key, &model, &policy);
                    Ok(Arc::new(policy))
                })
                .await
                .expect("solver task panicked")
            })
            .await?
            .clone();
        if !fresh {
            self.hits.fetch_add(1, Ordering::Relaxed);
        }
        Ok(policy)
    }
}
