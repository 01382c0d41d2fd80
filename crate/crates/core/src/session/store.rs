//! Session files on disk.
//!
//! One JSON document per session, `<id>.json`, written to a temporary file in
//! the same directory and renamed over the old one. Writers take `<id>.lock`
//! with an exclusive create, so a second writer fails instead of interleaving.

use std::collections::HashMap;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use sha2::{Digest, Sha256};

use super::{now, Result, Session, SessionError, SessionFile};

/// Environment variable naming the data directory.
pub const DATA_DIR_ENV: &str = "ELICIT_DATA_DIR";
const DEFAULT_DATA_DIR: &str = "elicit-data";

// Replayed sessions with the digest of the file they came from.
type Cache = Arc<Mutex<HashMap<String, ([u8; 32], Session)>>>;

#[derive(Debug, Clone)]
pub struct SessionStore {
    dir: PathBuf,
    cache: Cache,
}

/// Held while writing; removes the lock file on drop.
#[derive(Debug)]
pub struct SessionLock {
    path: PathBuf,
    id: String,
}

impl Drop for SessionLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

fn check_id(id: &str) -> Result<()> {
    let ok = !id.is_empty() && id.len() <= 64 && id.chars().all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_');
    if ok {
        Ok(())
    } else {
        Err(SessionError::NotFound(id.into()))
    }
}

impl SessionStore {
    pub fn new(dir: impl Into<PathBuf>) -> Result<Self> {
        let dir = dir.into();
        fs::create_dir_all(&dir)?;
        Ok(SessionStore {
            dir,
            cache: Arc::default(),
        })
    }

    /// Uses `ELICIT_DATA_DIR`, falling back to `./elicit-data`.
    pub fn from_env() -> Result<Self> {
        Self::new(std::env::var_os(DATA_DIR_ENV).map(PathBuf::from).unwrap_or_else(|| DEFAULT_DATA_DIR.into()))
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    fn path(&self, id: &str) -> PathBuf {
        self.dir.join(format!("{id}.json"))
    }

    pub fn exists(&self, id: &str) -> bool {
        check_id(id).is_ok() && self.path(id).is_file()
    }

    pub fn lock(&self, id: &str) -> Result<SessionLock> {
        check_id(id)?;
        let path = self.dir.join(format!("{id}.lock"));
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(SessionLock { path, id: id.into() })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(SessionError::Locked(id.into())),
            Err(e) => Err(e.into()),
        }
    }

    pub fn load(&self, id: &str) -> Result<Session> {
        check_id(id)?;
        let text = match fs::read_to_string(self.path(id)) {
            Ok(t) => t,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Err(SessionError::NotFound(id.into())),
            Err(e) => return Err(e.into()),
        };
        let digest: [u8; 32] = Sha256::digest(text.as_bytes()).into();
        if let Some((d, s)) = self.cache.lock().unwrap_or_else(|e| e.into_inner()).get(id) {
            if *d == digest {
                return Ok(s.clone());
            }
        }
        let file: SessionFile = serde_json::from_str(&text).map_err(|e| SessionError::Corrupt(e.to_string()))?;
        if file.id != id {
            return Err(SessionError::Corrupt(format!("file for {id} holds session {}", file.id)));
        }
        let session = Session::from_file(file)?;
        self.remember(&text, &session);
        Ok(session)
    }

    fn remember(&self, text: &str, session: &Session) {
        let digest: [u8; 32] = Sha256::digest(text.as_bytes()).into();
        self.cache
            .lock()
            .unwrap_or_else(|e| e.into_inner())
            .insert(session.id().to_string(), (digest, session.clone()));
    }

    pub fn save(&self, session: &Session, lock: &SessionLock) -> Result<()> {
        if lock.id != session.id() {
            return Err(SessionError::Locked(session.id().into()));
        }
        let mut text = serde_json::to_string_pretty(&session.to_file()).expect("session serializes");
        text.push('\n');
        let mut tmp = tempfile::NamedTempFile::new_in(&self.dir)?;
        tmp.write_all(text.as_bytes())?;
        tmp.as_file().sync_all()?;
        tmp.persist(self.path(session.id())).map_err(|e| SessionError::Io(e.error.to_string()))?;
        self.remember(&text, session);
        Ok(())
    }

    /// Creates and stores a new session with a random id.
    pub fn create(&self, title: &str, experts: Vec<String>) -> Result<Session> {
        let id = uuid::Uuid::new_v4().simple().to_string();
        let session = Session::create(id.clone(), title, experts, now())?;
        let lock = self.lock(&id)?;
        self.save(&session, &lock)?;
        Ok(session)
    }

    /// Lock, load, mutate, save. Nothing is written when `f` fails.
    pub fn update<T>(&self, id: &str, f: impl FnOnce(&mut Session) -> Result<T>) -> Result<T> {
        let lock = self.lock(id)?;
        let mut session = self.load(id)?;
        let before = session.events().len();
        let out = f(&mut session)?;
        if session.events().len() != before {
            self.save(&session, &lock)?;
        }
        Ok(out)
    }

    /// Ids of stored sessions, sorted.
    pub fn list(&self) -> Result<Vec<String>> {
        let mut ids = Vec::new();
        for entry in fs::read_dir(&self.dir)? {
            let name = entry?.file_name().to_string_lossy().into_owned();
            if let Some(id) = name.strip_suffix(".json") {
                if check_id(id).is_ok() {
                    ids.push(id.to_string());
                }
            }
        }
        ids.sort();
        Ok(ids)
    }
}
