use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use super::{CompletionRecord, GatewayError};

/// Content-addressed completion store: `<dir>/<prompt_hash>.json`.
#[derive(Debug)]
pub struct CompletionCache {
    dir: PathBuf,
    write_lock: Mutex<()>,
}

impl CompletionCache {
    pub fn open(dir: impl Into<PathBuf>) -> Result<Self, GatewayError> {
        let dir = dir.into();
        fs::create_dir_all(&dir).map_err(|e| GatewayError::Cache(format!("{}: {e}", dir.display())))?;
        Ok(Self { dir, write_lock: Mutex::new(()) })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn path(&self, prompt_hash: &str) -> PathBuf {
        self.dir.join(format!("{prompt_hash}.json"))
    }

    pub fn get(&self, prompt_hash: &str) -> Result<Option<CompletionRecord>, GatewayError> {
        let path = self.path(prompt_hash);
        let raw = match fs::read_to_string(&path) {
            Ok(raw) => raw,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(None),
            Err(e) => return Err(GatewayError::Cache(format!("{}: {e}", path.display()))),
        };
        let record: CompletionRecord =
            serde_json::from_str(&raw).map_err(|e| GatewayError::Cache(format!("{}: {e}", path.display())))?;
        if record.prompt_hash != prompt_hash {
            return Err(GatewayError::Cache(format!("{} holds record {}", path.display(), record.prompt_hash)));
        }
        Ok(Some(record))
    }

    pub fn put(&self, record: &CompletionRecord) -> Result<(), GatewayError> {
        let body = serde_json::to_string_pretty(record).map_err(|e| GatewayError::Cache(e.to_string()))?;
        let path = self.path(&record.prompt_hash);
        let _guard = self.write_lock.lock().unwrap_or_else(|p| p.into_inner());
        let tmp = path.with_extension("json.tmp");
        fs::write(&tmp, body + "\n")
            .and_then(|_| fs::rename(&tmp, &path))
            .map_err(|e| GatewayError::Cache(format!("{}: {e}", path.display())))
    }
}
