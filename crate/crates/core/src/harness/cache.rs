//! On-disk cache of raw backend responses, one JSON file per entry.
//!
//! Entries are written to a temporary file and renamed into place, and an
//! existing entry is never overwritten.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::fingerprint::sha256_hex;
use crate::tokenizer::TokenizationStrategy;

use super::HarnessError;

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CacheKey {
    pub dataset_id: String,
    pub example_id: String,
    pub model_id: String,
    pub template_fingerprint: String,
    pub strategy: TokenizationStrategy,
    pub shots: usize,
    pub cot: bool,
    /// Option-order variant; `None` for the original order.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub variant: Option<String>,
}

impl CacheKey {
    /// File stem: SHA-256 of the key's canonical JSON.
    pub fn digest(&self) -> String {
        sha256_hex(
            serde_json::to_string(self)
                .expect("cache key serializes")
                .as_bytes(),
        )
    }
}

/// One scoring request and its raw response.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredCall {
    pub prompt_fingerprint: String,
    pub candidates: Vec<String>,
    pub logits: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CachedGeneration {
    pub prompt_fingerprint: String,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheEntry {
    pub key: CacheKey,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generation: Option<CachedGeneration>,
    pub calls: Vec<ScoredCall>,
}

#[derive(Debug, Clone)]
pub struct ResponseCache {
    dir: PathBuf,
}

impl ResponseCache {
    pub fn open(dir: impl Into<PathBuf>) -> Result<Self, HarnessError> {
        let dir = dir.into();
        fs::create_dir_all(&dir).map_err(|e| HarnessError::Cache(format!("{}: {e}", dir.display())))?;
        Ok(Self { dir })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn path_for(&self, key: &CacheKey) -> PathBuf {
        self.dir.join(format!("{}.json", key.digest()))
    }

    pub fn get(&self, key: &CacheKey) -> Result<Option<CacheEntry>, HarnessError> {
        let path = self.path_for(key);
        let text = match fs::read_to_string(&path) {
            Ok(t) => t,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(None),
            Err(e) => return Err(HarnessError::Cache(format!("{}: {e}", path.display()))),
        };
        let entry: CacheEntry = serde_json::from_str(&text)
            .map_err(|e| HarnessError::Cache(format!("{}: {e}", path.display())))?;
        if &entry.key != key {
            return Err(HarnessError::Cache(format!(
                "{}: key collision for example {:?}",
                path.display(),
                key.example_id
            )));
        }
        Ok(Some(entry))
    }

    /// Writes `entry` unless an entry for the key already exists.
    pub fn put(&self, entry: &CacheEntry) -> Result<(), HarnessError> {
        let path = self.path_for(&entry.key);
        if path.exists() {
            return Ok(());
        }
        let err = |e: std::io::Error| HarnessError::Cache(format!("{}: {e}", path.display()));
        let mut tmp = tempfile::NamedTempFile::new_in(&self.dir).map_err(err)?;
        let json = serde_json::to_vec_pretty(entry).expect("cache entry serializes");
        tmp.write_all(&json).map_err(err)?;
        tmp.as_file().sync_all().map_err(err)?;
        // A concurrent writer for the same key produces identical content.
        tmp.persist(&path).map_err(|e| err(e.error))?;
        Ok(())
    }

    pub fn len(&self) -> usize {
        fs::read_dir(&self.dir)
            .map(|rd| {
                rd.filter_map(Result::ok)
                    .filter(|e| e.path().extension().is_some_and(|x| x == "json"))
                    .count()
            })
            .unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn key(id: &str) -> CacheKey {
        CacheKey {
            dataset_id: "d".into(),
            example_id: id.into(),
            model_id: "m".into(),
            template_fingerprint: "t".into(),
            strategy: TokenizationStrategy::LetterOnly,
            shots: 0,
            cot: false,
            variant: None,
        }
    }

    #[test]
    fn put_get_and_immutability() {
        let dir = tempfile::tempdir().unwrap();
        let cache = ResponseCache::open(dir.path()).unwrap();
        assert_eq!(cache.get(&key("a")).unwrap(), None);
        let entry = CacheEntry {
            key: key("a"),
            generation: None,
            calls: vec![ScoredCall {
                prompt_fingerprint: "fp".into(),
                candidates: vec!["A".into(), "B".into()],
                logits: vec![1.0, 2.0],
            }],
        };
        cache.put(&entry).unwrap();
        assert_eq!(cache.get(&key("a")).unwrap(), Some(entry.clone()));
        let mut changed = entry.clone();
        changed.calls[0].logits = vec![9.0, 9.0];
        cache.put(&changed).unwrap();
        assert_eq!(cache.get(&key("a")).unwrap(), Some(entry));
        assert_eq!(cache.len(), 1);
    }

    #[test]
    fn key_fields_change_digest() {
        let a = key("a");
        let mut b = a.clone();
        b.strategy = TokenizationStrategy::SpaceLetter;
        let mut c = a.clone();
        c.variant = Some("perm1".into());
        assert_ne!(a.digest(), b.digest());
        assert_ne!(a.digest(), c.digest());
    }

    proptest::proptest! {
        // Warm runs must see the exact bits the backend returned.
        #[test]
        fn logits_survive_the_disk_bit_for_bit(bits in proptest::collection::vec(proptest::num::f64::NORMAL | proptest::num::f64::SUBNORMAL, 1..6)) {
            let dir = tempfile::tempdir().unwrap();
            let cache = ResponseCache::open(dir.path()).unwrap();
            let entry = CacheEntry {
                key: key("p"),
                generation: None,
                calls: vec![ScoredCall {
                    prompt_fingerprint: "fp".into(),
                    candidates: (0..bits.len()).map(|i| i.to_string()).collect(),
                    logits: bits.clone(),
                }],
            };
            cache.put(&entry).unwrap();
            let back = cache.get(&key("p")).unwrap().unwrap();
            let got: Vec<u64> = back.calls[0].logits.iter().map(|x| x.to_bits()).collect();
            let want: Vec<u64> = bits.iter().map(|x| x.to_bits()).collect();
            proptest::prop_assert_eq!(got, want);
        }
    }
}
