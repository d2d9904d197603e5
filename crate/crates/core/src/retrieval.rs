//! Offline knowledge-base encoding and online top-k retrieval.
//!
//! Similarity is the raw dot product; retrieval probabilities are a
//! numerically-stabilized softmax over every knowledge-base similarity.
//! Retrieval is an exact linear scan, so ordering is testable bit for bit.

use std::collections::HashMap;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::{Dataset, Question, Split, TaskLabel};
use crate::error::{Error, Result};
use crate::prompting::question_block;

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingVector {
    pub values: Vec<f64>,
}

impl EmbeddingVector {
    pub fn new(values: Vec<f64>) -> Result<EmbeddingVector> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Integrity("embedding contains non-finite values".into()));
        }
        Ok(EmbeddingVector { values })
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn l2_normalize(&mut self) {
        let norm: f64 = self.values.iter().map(|&v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            for v in &mut self.values {
                *v /= norm;
            }
        }
    }
}

/// Dot product of two equal-dimension vectors, accumulated in f64.
pub fn similarity(q: &EmbeddingVector, c: &EmbeddingVector) -> Result<f64> {
    if q.dim() != c.dim() {
        return Err(Error::Config(format!(
            "dimension mismatch: {} vs {}",
            q.dim(),
            c.dim()
        )));
    }
    Ok(q.values.iter().zip(&c.values).map(|(&a, &b)| a * b).sum())
}

pub trait EmbeddingProvider: Send + Sync {
    fn id(&self) -> &str;
    fn dim(&self) -> usize;
    fn embed(&self, text: &str) -> Result<EmbeddingVector>;
}

/// Encodes text through a provider, checking preconditions and the
/// declared dimension, optionally L2-normalizing the result.
pub fn encode(text: &str, provider: &dyn EmbeddingProvider, normalize: bool) -> Result<EmbeddingVector> {
    if text.trim().is_empty() {
        return Err(Error::Config("cannot encode empty text".into()));
    }
    let mut v = provider.embed(text)?;
    if v.dim() != provider.dim() {
        return Err(Error::Config(format!(
            "provider `{}` returned dim {} but declares {}",
            provider.id(),
            v.dim(),
            provider.dim()
        )));
    }
    EmbeddingVector::new(v.values.clone())?;
    if normalize {
        v.l2_normalize();
    }
    Ok(v)
}

/// Deterministic mock encoder: SHA-256 of (seed, text) seeds a ChaCha20
/// stream whose standard-normal draws are L2-normalized into a unit
/// vector. Identical across processes and platforms.
pub struct HashEmbedder {
    id: String,
    seed: u64,
    dim: usize,
}

impl HashEmbedder {
    pub fn new(seed: u64, dim: usize) -> HashEmbedder {
        HashEmbedder {
            id: format!("mock-hash-{seed}-{dim}"),
            seed,
            dim,
        }
    }
}

impl EmbeddingProvider for HashEmbedder {
    fn id(&self) -> &str {
        &self.id
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, text: &str) -> Result<EmbeddingVector> {
        let mut hasher = Sha256::new();
        hasher.update(self.seed.to_le_bytes());
        hasher.update(text.as_bytes());
        let digest: [u8; 32] = hasher.finalize().into();
        let mut rng = ChaCha20Rng::from_seed(digest);
        let mut values: Vec<f64> = (0..self.dim)
            .map(|_| {
                // Box-Muller from two uniform draws; avoids a distribution dep.
                let u1: f64 = rand::Rng::gen_range(&mut rng, f64::EPSILON..1.0);
                let u2: f64 = rand::Rng::gen_range(&mut rng, 0.0..1.0);
                (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
            })
            .collect();
        let norm: f64 = values.iter().map(|&v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            for v in &mut values {
                *v /= norm;
            }
        }
        EmbeddingVector::new(values)
    }
}

/// Remote OpenAI-compatible embeddings endpoint.
pub struct RemoteEmbedder {
    id: String,
    base_url: String,
    model: String,
    api_key: Option<String>,
    dim: usize,
    client: reqwest::blocking::Client,
}

impl RemoteEmbedder {
    pub fn new(base_url: &str, model: &str, api_key_env: Option<&str>, dim: usize) -> Result<RemoteEmbedder> {
        let api_key = match api_key_env {
            Some(var) => Some(std::env::var(var).map_err(|_| {
                Error::Config(format!("api key environment variable `{var}` is not set"))
            })?),
            None => None,
        };
        Ok(RemoteEmbedder {
            id: format!("remote-{model}"),
            base_url: base_url.trim_end_matches('/').to_string(),
            model: model.to_string(),
            api_key,
            dim,
            client: reqwest::blocking::Client::new(),
        })
    }
}

#[derive(Serialize)]
struct EmbeddingRequest<'a> {
    model: &'a str,
    input: Vec<&'a str>,
}

#[derive(Deserialize)]
struct EmbeddingResponse {
    data: Vec<EmbeddingDatum>,
}

#[derive(Deserialize)]
struct EmbeddingDatum {
    embedding: Vec<f64>,
}

impl EmbeddingProvider for RemoteEmbedder {
    fn id(&self) -> &str {
        &self.id
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, text: &str) -> Result<EmbeddingVector> {
        let url = format!("{}/embeddings", self.base_url);
        let mut req = self.client.post(&url).json(&EmbeddingRequest {
            model: &self.model,
            input: vec![text],
        });
        if let Some(key) = &self.api_key {
            req = req.bearer_auth(key);
        }
        let resp = req.send().map_err(|e| Error::Transport {
            attempts: 1,
            message: e.to_string(),
        })?;
        if !resp.status().is_success() {
            return Err(Error::Transport {
                attempts: 1,
                message: format!("{} from {url}", resp.status()),
            });
        }
        let body: EmbeddingResponse = resp.json().map_err(|e| Error::Transport {
            attempts: 1,
            message: e.to_string(),
        })?;
        let datum = body
            .data
            .into_iter()
            .next()
            .ok_or_else(|| Error::Transport {
                attempts: 1,
                message: "embeddings response carried no data".into(),
            })?;
        EmbeddingVector::new(datum.embedding)
    }
}

/// One embedded knowledge-base entry.
#[derive(Debug, Clone)]
pub struct KbRecord {
    pub question_id: String,
    pub text: String,
    pub task: TaskLabel,
    pub vector: EmbeddingVector,
}

#[derive(Debug, Clone)]
pub struct KnowledgeBase {
    pub provider_id: String,
    pub dim: usize,
    pub records: Vec<KbRecord>,
}

impl KnowledgeBase {
    pub fn validate(&self) -> Result<()> {
        let mut seen = std::collections::HashSet::new();
        for r in &self.records {
            if r.vector.dim() != self.dim {
                return Err(Error::Integrity(format!(
                    "record `{}` has dim {} but knowledge base declares {}",
                    r.question_id,
                    r.vector.dim(),
                    self.dim
                )));
            }
            if !seen.insert(r.question_id.as_str()) {
                return Err(Error::Integrity(format!(
                    "duplicate knowledge-base record `{}`",
                    r.question_id
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Hit {
    pub question_id: String,
    pub text: String,
    pub task: TaskLabel,
    pub similarity: f64,
    /// Softmax probability over the full knowledge base.
    pub probability: f64,
}

#[derive(Debug, Clone)]
pub struct RetrievalResult {
    pub hits: Vec<Hit>,
}

/// Top-`k` records by dot-product similarity, ties broken by insertion
/// order. Probabilities come from a max-subtracted softmax over every
/// record in the knowledge base.
pub fn retrieve(q: &EmbeddingVector, kb: &KnowledgeBase, k: usize) -> Result<RetrievalResult> {
    if kb.records.is_empty() {
        return Err(Error::Config("knowledge base is empty".into()));
    }
    if k == 0 {
        return Err(Error::Config("k must be at least 1".into()));
    }
    let sims: Vec<f64> = kb
        .records
        .iter()
        .map(|r| similarity(q, &r.vector))
        .collect::<Result<_>>()?;
    let max = sims.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = sims.iter().map(|&s| (s - max).exp()).collect();
    let z: f64 = exps.iter().sum();

    let mut order: Vec<usize> = (0..kb.records.len()).collect();
    order.sort_by(|&a, &b| sims[b].partial_cmp(&sims[a]).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b)));
    order.truncate(k.min(kb.records.len()));

    let hits = order
        .into_iter()
        .map(|i| {
            let r = &kb.records[i];
            Hit {
                question_id: r.question_id.clone(),
                text: r.text.clone(),
                task: r.task.clone(),
                similarity: sims[i],
                probability: exps[i] / z,
            }
        })
        .collect();
    Ok(RetrievalResult { hits })
}

/// Builds the knowledge base from one split of a dataset, resuming from
/// a line-delimited checkpoint of already-embedded records if present.
pub fn build_kb(
    d: &Dataset,
    split: Option<Split>,
    provider: &dyn EmbeddingProvider,
    normalize: bool,
    checkpoint: Option<&Path>,
) -> Result<KnowledgeBase> {
    let questions: Vec<&Question> = d
        .questions
        .iter()
        .filter(|q| split.map(|s| q.split == s).unwrap_or(true))
        .collect();
    if questions.is_empty() {
        return Err(Error::Config("no questions remain after the split filter".into()));
    }

    let mut done: HashMap<String, Vec<f64>> = HashMap::new();
    if let Some(path) = checkpoint {
        if path.exists() {
            done = load_kb_checkpoint(path, provider.id())?;
        }
    }

    let mut ckpt_file = match checkpoint {
        Some(path) => Some(
            std::fs::OpenOptions::new()
                .create(true)
                .append(true)
                .open(path)?,
        ),
        None => None,
    };

    let mut records = Vec::new();
    for q in questions {
        let text = question_block(q);
        let vector = match done.remove(&q.id) {
            Some(values) => EmbeddingVector::new(values)?,
            None => {
                let v = encode(&text, provider, normalize)?;
                if let Some(f) = &mut ckpt_file {
                    let line = serde_json::to_string(&KbCheckpointLine {
                        provider_id: provider.id().to_string(),
                        question_id: q.id.clone(),
                        vector: v.values.clone(),
                    })?;
                    writeln!(f, "{line}")?;
                    f.flush()?;
                    f.sync_data()?;
                }
                v
            }
        };
        records.push(KbRecord {
            question_id: q.id.clone(),
            text,
            task: q.gold_task.clone(),
            vector,
        });
    }

    let kb = KnowledgeBase {
        provider_id: provider.id().to_string(),
        dim: provider.dim(),
        records,
    };
    kb.validate()?;
    Ok(kb)
}

#[derive(Serialize, Deserialize)]
struct KbCheckpointLine {
    provider_id: String,
    question_id: String,
    vector: Vec<f64>,
}

fn load_kb_checkpoint(path: &Path, provider_id: &str) -> Result<HashMap<String, Vec<f64>>> {
    let file = std::fs::File::open(path)?;
    let mut done = HashMap::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: KbCheckpointLine = serde_json::from_str(&line).map_err(|e| Error::Checkpoint {
            line: i + 1,
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        if rec.provider_id != provider_id {
            return Err(Error::Config(format!(
                "checkpoint was produced by provider `{}`, current provider is `{provider_id}`",
                rec.provider_id
            )));
        }
        done.insert(rec.question_id, rec.vector);
    }
    Ok(done)
}


// Knowledge-base file layout (see docs/kb-format.md):
//   bytes 0..4   magic "KBV1"
//   bytes 4..8   u32 LE header length H
//   bytes 8..8+H JSON header {provider_id, dim, records:[{id, task, text}]}
//   then records.len() * dim little-endian f32 values, row-major.

const KB_MAGIC: &[u8; 4] = b"KBV1";

#[derive(Serialize, Deserialize)]
struct KbHeader {
    provider_id: String,
    dim: usize,
    records: Vec<KbHeaderRecord>,
}

#[derive(Serialize, Deserialize)]
struct KbHeaderRecord {
    id: String,
    task: String,
    text: String,
}

pub fn save_kb(kb: &KnowledgeBase, path: &Path) -> Result<()> {
    let header = KbHeader {
        provider_id: kb.provider_id.clone(),
        dim: kb.dim,
        records: kb
            .records
            .iter()
            .map(|r| KbHeaderRecord {
                id: r.question_id.clone(),
                task: r.task.display().to_string(),
                text: r.text.clone(),
            })
            .collect(),
    };
    let header_bytes = serde_json::to_vec(&header)?;
    let mut out = std::fs::File::create(path)?;
    out.write_all(KB_MAGIC)?;
    out.write_all(&(header_bytes.len() as u32).to_le_bytes())?;
    out.write_all(&header_bytes)?;
    // Vectors are stored as 32-bit floats on disk.
    for r in &kb.records {
        for &v in &r.vector.values {
            out.write_all(&(v as f32).to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn load_kb(path: &Path) -> Result<KnowledgeBase> {
    let mut file = std::fs::File::open(path)?;
    let mut magic = [0u8; 4];
    file.read_exact(&mut magic)?;
    if &magic != KB_MAGIC {
        return Err(Error::Integrity(format!(
            "{} is not a knowledge-base file",
            path.display()
        )));
    }
    let mut len_bytes = [0u8; 4];
    file.read_exact(&mut len_bytes)?;
    let header_len = u32::from_le_bytes(len_bytes) as usize;
    let mut header_bytes = vec![0u8; header_len];
    file.read_exact(&mut header_bytes)?;
    let header: KbHeader = serde_json::from_slice(&header_bytes)?;

    let mut records = Vec::with_capacity(header.records.len());
    let mut buf = vec![0u8; header.dim * 4];
    for rec in header.records {
        file.read_exact(&mut buf)?;
        let values: Vec<f64> = buf
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        records.push(KbRecord {
            question_id: rec.id,
            text: rec.text,
            task: TaskLabel::new(rec.task)?,
            vector: EmbeddingVector::new(values)?,
        });
    }
    let kb = KnowledgeBase {
        provider_id: header.provider_id,
        dim: header.dim,
        records,
    };
    kb.validate()?;
    Ok(kb)
}
