//! Enrollment database of unit-norm embeddings and cosine-similarity
//! identification.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::RwLock;

use serde::{Deserialize, Serialize};

use crate::embedding::{EmbedError, Embedding};
use crate::nnet::write_atomic;

pub const DB_MAGIC: &[u8; 5] = b"DVDB1";
pub const DB_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum IdentityError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("zero vector has no direction")]
    ZeroVector,
    #[error("subject id must be non-empty")]
    EmptySubject,
    #[error("no embeddings given for {0}")]
    NoEmbeddings(String),
    #[error("bad magic: not an identity database")]
    BadMagic,
    #[error("unsupported database version {0} (supported: {DB_VERSION})")]
    UnsupportedVersion(u32),
    #[error("checksum mismatch: stored {stored:08x}, computed {computed:08x} (file corrupted or truncated)")]
    Checksum { stored: u32, computed: u32 },
    #[error("truncated database: {0}")]
    Truncated(String),
    #[error("malformed database: {0}")]
    Malformed(String),
    #[error(transparent)]
    Embedding(#[from] EmbedError),
    #[error("write failed: {0}")]
    Write(String),
    #[error("{path}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// CS in f64 between two arbitrary nonzero vectors of equal length.
pub fn cosine_similarity_raw(a: &[f64], b: &[f64]) -> Result<f64, IdentityError> {
    if a.len() != b.len() {
        return Err(IdentityError::Dimension {
            expected: a.len(),
            got: b.len(),
        });
    }
    let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return Err(IdentityError::ZeroVector);
    }
    Ok((dot / (na.sqrt() * nb.sqrt())).clamp(-1.0, 1.0))
}

pub fn cosine_similarity(a: &Embedding, b: &Embedding) -> Result<f64, IdentityError> {
    cosine_similarity_raw(&widen(a.as_slice()), &widen(b.as_slice()))
}

fn widen(v: &[f32]) -> Vec<f64> {
    v.iter().map(|&x| x as f64).collect()
}

/// Lowercase hex SHA-256.
pub fn sha256_hex(bytes: &[u8]) -> String {
    use sha2::{Digest, Sha256};
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Provenance kept alongside (not inside) the binary database.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EnrollMeta {
    /// SHA-256 of each source image file, hex.
    pub source_hashes: Vec<String>,
    /// Seconds since the Unix epoch.
    pub enrolled_at: u64,
    /// Free-form origin note, e.g. "augmentation-pipeline".
    pub source: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct IdentityRecord {
    pub subject: String,
    pub embeddings: Vec<Embedding>,
    pub meta: Vec<EnrollMeta>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Decision {
    Accepted,
    RejectedByThreshold,
    NoEntries,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MatchResult {
    /// Best subject and its score; `None` for an empty database.
    pub best: Option<(String, f64)>,
    /// Per-subject best CS, in subject-id order.
    pub scores: Vec<(String, f64)>,
    pub decision: Decision,
}

/// Result of an enrollment call.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EnrollOutcome {
    pub total: usize,
    /// Fewer than two embeddings are held for the subject.
    pub under_enrolled: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct IdentityDatabase {
    dim: usize,
    records: BTreeMap<String, IdentityRecord>,
}

impl IdentityDatabase {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            records: BTreeMap::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn records(&self) -> impl Iterator<Item = &IdentityRecord> {
        self.records.values()
    }

    pub fn get(&self, subject: &str) -> Option<&IdentityRecord> {
        self.records.get(subject)
    }

    /// Adds embeddings to `subject`, creating the record when new. Nothing is
    /// changed on error.
    pub fn enroll(
        &mut self,
        subject: &str,
        embeddings: Vec<Embedding>,
        meta: Option<EnrollMeta>,
    ) -> Result<EnrollOutcome, IdentityError> {
        if subject.is_empty() {
            return Err(IdentityError::EmptySubject);
        }
        if embeddings.is_empty() {
            return Err(IdentityError::NoEmbeddings(subject.to_string()));
        }
        if let Some(e) = embeddings.iter().find(|e| e.dim() != self.dim) {
            return Err(IdentityError::Dimension {
                expected: self.dim,
                got: e.dim(),
            });
        }
        let rec = self.records.entry(subject.to_string()).or_insert_with(|| IdentityRecord {
            subject: subject.to_string(),
            embeddings: Vec::new(),
            meta: Vec::new(),
        });
        rec.embeddings.extend(embeddings);
        rec.meta.extend(meta);
        let total = rec.embeddings.len();
        let under_enrolled = total < 2;
        if under_enrolled {
            log::warn!("{subject} holds {total} embedding; enroll at least 2 to limit false negatives");
        }
        Ok(EnrollOutcome { total, under_enrolled })
    }

    /// Closed-set argmax of per-subject max CS, optionally rejecting below
    /// `threshold`. Equal scores go to the lexicographically smaller id.
    pub fn identify(&self, query: &Embedding, threshold: Option<f64>) -> Result<MatchResult, IdentityError> {
        self.identify_raw(&widen(query.as_slice()), threshold)
    }

    /// As [`identify`](Self::identify) for an unnormalized query vector.
    pub fn identify_raw(&self, query: &[f64], threshold: Option<f64>) -> Result<MatchResult, IdentityError> {
        if query.len() != self.dim {
            return Err(IdentityError::Dimension {
                expected: self.dim,
                got: query.len(),
            });
        }
        let mut scores = Vec::with_capacity(self.records.len());
        let mut best: Option<(String, f64)> = None;
        for (id, rec) in &self.records {
            let mut s = f64::NEG_INFINITY;
            for e in &rec.embeddings {
                s = s.max(cosine_similarity_raw(query, &widen(e.as_slice()))?);
            }
            if best.as_ref().is_none_or(|b| s > b.1) {
                best = Some((id.clone(), s));
            }
            scores.push((id.clone(), s));
        }
        let decision = match (&best, threshold) {
            (None, _) => Decision::NoEntries,
            (Some((_, s)), Some(t)) if *s < t => Decision::RejectedByThreshold,
            _ => Decision::Accepted,
        };
        Ok(MatchResult { best, scores, decision })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(DB_MAGIC);
        out.extend_from_slice(&DB_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        out.extend_from_slice(&(self.records.len() as u32).to_le_bytes());
        for (id, rec) in &self.records {
            out.extend_from_slice(&(id.len() as u32).to_le_bytes());
            out.extend_from_slice(id.as_bytes());
            out.extend_from_slice(&(rec.embeddings.len() as u32).to_le_bytes());
            for e in &rec.embeddings {
                for v in e.as_slice() {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    /// Checks magic, then version, then checksum, then structure.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self, IdentityError> {
        if bytes.len() < DB_MAGIC.len() || &bytes[..DB_MAGIC.len()] != DB_MAGIC {
            return Err(IdentityError::BadMagic);
        }
        let mut r = Reader {
            bytes,
            pos: DB_MAGIC.len(),
        };
        let version = r.u32("version")?;
        if version != DB_VERSION {
            return Err(IdentityError::UnsupportedVersion(version));
        }
        if bytes.len() < DB_MAGIC.len() + 16 {
            return Err(IdentityError::Truncated("header".into()));
        }
        let body = &bytes[..bytes.len() - 4];
        let stored = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().expect("4 bytes"));
        let computed = crc32fast::hash(body);
        if stored != computed {
            return Err(IdentityError::Checksum { stored, computed });
        }
        let mut r = Reader { bytes: body, pos: r.pos };
        let dim = r.u32("dimension")? as usize;
        let count = r.u32("subject count")?;
        let mut db = IdentityDatabase::new(dim);
        for i in 0..count {
            let len = r.u32("subject id length")? as usize;
            let id = std::str::from_utf8(r.take(len, "subject id")?)
                .map_err(|_| IdentityError::Malformed(format!("subject {i} id is not UTF-8")))?
                .to_string();
            let n = r.u32("embedding count")? as usize;
            let mut embeddings = Vec::with_capacity(n);
            for _ in 0..n {
                let raw = r.take(dim * 4, "embedding payload")?;
                let v: Vec<f32> = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4"))).collect();
                embeddings.push(Embedding::new(v)?);
            }
            if id.is_empty() || n == 0 {
                return Err(IdentityError::Malformed(format!("subject {i} is empty")));
            }
            if db.records.contains_key(&id) {
                return Err(IdentityError::Malformed(format!("duplicate subject {id}")));
            }
            db.records.insert(
                id.clone(),
                IdentityRecord {
                    subject: id,
                    embeddings,
                    meta: Vec::new(),
                },
            );
        }
        if r.pos != body.len() {
            return Err(IdentityError::Malformed(format!("{} trailing bytes", body.len() - r.pos)));
        }
        Ok(db)
    }

    /// `<db>.meta.json`
    pub fn meta_path(path: &Path) -> PathBuf {
        let mut s = path.as_os_str().to_owned();
        s.push(".meta.json");
        PathBuf::from(s)
    }

    /// Atomically writes the binary database and its metadata sidecar.
    pub fn save(&self, path: &Path) -> Result<(), IdentityError> {
        let io = |p: &Path| {
            let p = p.display().to_string();
            move |e: crate::nnet::NnError| IdentityError::Write(format!("{p}: {e}"))
        };
        write_atomic(path, &self.to_bytes()).map_err(io(path))?;
        let meta: BTreeMap<&str, &Vec<EnrollMeta>> = self.records.iter().map(|(k, r)| (k.as_str(), &r.meta)).collect();
        let json = serde_json::to_vec_pretty(&meta).expect("serializable");
        let mp = Self::meta_path(path);
        write_atomic(&mp, &json).map_err(io(&mp))
    }

    /// Reads a database; the metadata sidecar is optional.
    pub fn load(path: &Path) -> Result<Self, IdentityError> {
        let bytes = std::fs::read(path).map_err(|source| IdentityError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let mut db = Self::from_bytes(&bytes)?;
        if let Ok(text) = std::fs::read_to_string(Self::meta_path(path)) {
            match serde_json::from_str::<BTreeMap<String, Vec<EnrollMeta>>>(&text) {
                Ok(meta) => {
                    for (id, m) in meta {
                        if let Some(r) = db.records.get_mut(&id) {
                            r.meta = m;
                        }
                    }
                }
                Err(e) => log::warn!("ignoring unreadable metadata for {}: {e}", path.display()),
            }
        }
        Ok(db)
    }

    /// Human-readable mirror; floats are decimal and lossy.
    pub fn export_json(&self) -> serde_json::Value {
        let subjects: Vec<serde_json::Value> = self
            .records
            .values()
            .map(|r| {
                serde_json::json!({
                    "id": r.subject,
                    "count": r.embeddings.len(),
                    "embeddings": r.embeddings.iter().map(|e| e.as_slice().to_vec()).collect::<Vec<_>>(),
                    "meta": r.meta,
                })
            })
            .collect();
        serde_json::json!({ "version": DB_VERSION, "dim": self.dim, "subjects": subjects })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], IdentityError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(IdentityError::Truncated(format!("{what} at byte {}", self.pos))),
        }
    }

    fn u32(&mut self, what: &str) -> Result<u32, IdentityError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }
}

/// Shared database: concurrent identification, exclusive enrollment.
/// Enrollment validates and builds the new state before taking the write
/// lock, so readers only ever see complete records.
#[derive(Debug)]
pub struct IdentityStore {
    inner: RwLock<IdentityDatabase>,
}

impl IdentityStore {
    pub fn new(db: IdentityDatabase) -> Self {
        Self { inner: RwLock::new(db) }
    }

    pub fn identify(&self, query: &Embedding, threshold: Option<f64>) -> Result<MatchResult, IdentityError> {
        self.inner.read().expect("lock poisoned").identify(query, threshold)
    }

    pub fn enroll(&self, subject: &str, embeddings: Vec<Embedding>, meta: Option<EnrollMeta>) -> Result<EnrollOutcome, IdentityError> {
        let mut guard = self.inner.write().expect("lock poisoned");
        guard.enroll(subject, embeddings, meta)
    }

    pub fn save(&self, path: &Path) -> Result<(), IdentityError> {
        self.inner.read().expect("lock poisoned").save(path)
    }

    pub fn snapshot(&self) -> IdentityDatabase {
        self.inner.read().expect("lock poisoned").clone()
    }

    pub fn into_inner(self) -> IdentityDatabase {
        self.inner.into_inner().expect("lock poisoned")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn e(v: &[f64]) -> Embedding {
        Embedding::normalized(v).unwrap()
    }

    #[test]
    fn cosine_examples() {
        assert!((cosine_similarity(&e(&[0.3, 0.4, 0.5]), &e(&[0.3, 0.4, 0.5])).unwrap() - 1.0).abs() < 1e-7);
        assert_eq!(cosine_similarity_raw(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        let h = 0.5f64.sqrt();
        assert!((cosine_similarity_raw(&[h, h, 0.0], &[1.0, 0.0, 0.0]).unwrap() - h).abs() < 1e-15);
        assert!(matches!(cosine_similarity_raw(&[1.0], &[1.0, 0.0]), Err(IdentityError::Dimension { .. })));
        assert!(matches!(cosine_similarity_raw(&[0.0, 0.0], &[1.0, 0.0]), Err(IdentityError::ZeroVector)));
    }

    #[test]
    fn enrollment_policy() {
        let mut db = IdentityDatabase::new(2);
        let two = db.enroll("a", vec![e(&[1.0, 0.0]), e(&[0.0, 1.0])], None).unwrap();
        assert_eq!(two, EnrollOutcome { total: 2, under_enrolled: false });
        let one = db.enroll("b", vec![e(&[1.0, 1.0])], None).unwrap();
        assert!(one.under_enrolled);
        let more = db.enroll("b", vec![e(&[1.0, -1.0])], None).unwrap();
        assert_eq!(more.total, 2);
        assert!(matches!(db.enroll("c", vec![e(&[1.0, 0.0, 0.0])], None), Err(IdentityError::Dimension { .. })));
        assert!(db.get("c").is_none());
    }

    #[test]
    fn three_subject_example() {
        let mut db = IdentityDatabase::new(2);
        db.enroll("subject1", vec![e(&[1.0, 0.0])], None).unwrap();
        db.enroll("subject2", vec![e(&[0.0, 1.0])], None).unwrap();
        db.enroll("subject3", vec![e(&[0.6, 0.8])], None).unwrap();
        let m = db.identify(&e(&[0.8, 0.6]), None).unwrap();
        let (id, cs) = m.best.unwrap();
        assert_eq!(id, "subject3");
        assert!((cs - 0.96).abs() < 1e-6);
        assert_eq!(m.decision, Decision::Accepted);
        let rejected = db.identify(&e(&[0.8, 0.6]), Some(0.97)).unwrap();
        assert_eq!(rejected.decision, Decision::RejectedByThreshold);
    }

    #[test]
    fn empty_and_ties() {
        let db = IdentityDatabase::new(2);
        assert_eq!(db.identify(&e(&[1.0, 0.0]), None).unwrap().decision, Decision::NoEntries);
        let mut db = IdentityDatabase::new(2);
        db.enroll("zed", vec![e(&[1.0, 0.0])], None).unwrap();
        db.enroll("amy", vec![e(&[1.0, 0.0])], None).unwrap();
        assert_eq!(db.identify(&e(&[1.0, 0.0]), None).unwrap().best.unwrap().0, "amy");
    }

    #[test]
    fn bytes_round_trip_and_corruption() {
        let mut db = IdentityDatabase::new(3);
        db.enroll("x", vec![e(&[1.0, 2.0, 3.0]), e(&[-1.0, 0.5, 0.0])], None).unwrap();
        db.enroll("y", vec![e(&[0.1, 0.0, 0.0])], None).unwrap();
        let bytes = db.to_bytes();
        assert_eq!(IdentityDatabase::from_bytes(&bytes).unwrap(), db);
        assert!(matches!(
            IdentityDatabase::from_bytes(&bytes[..bytes.len() - 7]),
            Err(IdentityError::Checksum { .. })
        ));
        let mut v999 = bytes.clone();
        v999[5..9].copy_from_slice(&999u32.to_le_bytes());
        assert!(matches!(IdentityDatabase::from_bytes(&v999), Err(IdentityError::UnsupportedVersion(999))));
        let mut flipped = bytes.clone();
        flipped[30] ^= 1;
        assert!(matches!(IdentityDatabase::from_bytes(&flipped), Err(IdentityError::Checksum { .. })));
        assert!(matches!(IdentityDatabase::from_bytes(b"DVNN1...."), Err(IdentityError::BadMagic)));
    }
}
