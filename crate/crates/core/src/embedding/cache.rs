use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{EmbeddingError, EmbeddingProvider, EmbeddingVector};

#[derive(Serialize, Deserialize)]
struct CachedVector {
    provider_id: String,
    text: String,
    values: Vec<f64>,
}

/// One JSON file per `(provider_id, text)`. Writes are serialized; reads are
/// lock-free.
#[derive(Debug)]
pub struct EmbeddingCache {
    dir: PathBuf,
    write_lock: Mutex<()>,
}

impl EmbeddingCache {
    pub fn open(dir: impl Into<PathBuf>) -> Result<Self, EmbeddingError> {
        let dir = dir.into();
        fs::create_dir_all(&dir).map_err(|e| EmbeddingError::Cache(format!("{}: {e}", dir.display())))?;
        Ok(Self { dir, write_lock: Mutex::new(()) })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    fn path(&self, provider_id: &str, text: &str) -> PathBuf {
        let mut hasher = Sha256::new();
        hasher.update(provider_id.as_bytes());
        hasher.update([0u8]);
        hasher.update(text.as_bytes());
        self.dir.join(format!("{}.json", hex::encode(hasher.finalize())))
    }

    pub fn get(&self, provider_id: &str, text: &str) -> Option<EmbeddingVector> {
        let raw = fs::read_to_string(self.path(provider_id, text)).ok()?;
        let cached: CachedVector = serde_json::from_str(&raw).ok()?;
        (cached.provider_id == provider_id && cached.text == text)
            .then(|| EmbeddingVector::new(cached.values, cached.provider_id))
    }

    pub fn put(&self, text: &str, vector: &EmbeddingVector) -> Result<(), EmbeddingError> {
        let record = CachedVector {
            provider_id: vector.provider_id.clone(),
            text: text.to_string(),
            values: vector.values.clone(),
        };
        let body = serde_json::to_string(&record).map_err(|e| EmbeddingError::Cache(e.to_string()))?;
        let path = self.path(&vector.provider_id, text);
        let _guard = self.write_lock.lock().unwrap_or_else(|p| p.into_inner());
        let tmp = path.with_extension("json.tmp");
        fs::write(&tmp, body).and_then(|_| fs::rename(&tmp, &path)).map_err(|e| EmbeddingError::Cache(e.to_string()))
    }
}

/// Serves vectors from an [`EmbeddingCache`] and forwards misses, in one
/// batch, to the wrapped provider.
pub struct CachedEmbedder<P> {
    inner: P,
    cache: EmbeddingCache,
}

impl<P: EmbeddingProvider> CachedEmbedder<P> {
    pub fn new(inner: P, cache: EmbeddingCache) -> Self {
        Self { inner, cache }
    }
}

impl<P: EmbeddingProvider> EmbeddingProvider for CachedEmbedder<P> {
    fn provider_id(&self) -> &str {
        self.inner.provider_id()
    }

    fn embed_batch(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>, EmbeddingError> {
        let id = self.inner.provider_id();
        let mut out: Vec<Option<EmbeddingVector>> = texts.iter().map(|t| self.cache.get(id, t)).collect();
        let misses: Vec<usize> = (0..texts.len()).filter(|&i| out[i].is_none()).collect();
        if !misses.is_empty() {
            let batch: Vec<String> = misses.iter().map(|&i| texts[i].clone()).collect();
            let fresh = self.inner.embed_batch(&batch)?;
            if fresh.len() != batch.len() {
                return Err(EmbeddingError::InvalidResponse("provider returned a short batch".into()));
            }
            for (&i, vector) in misses.iter().zip(fresh) {
                self.cache.put(&texts[i], &vector)?;
                out[i] = Some(vector);
            }
        }
        Ok(out.into_iter().map(|v| v.expect("filled")).collect())
    }
}
