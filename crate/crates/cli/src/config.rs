//! On-disk JSON configuration for embedding providers and the routing
//! pipeline. Relative paths inside a config file resolve against the
//! file's own directory, so a config and its artifacts move together.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use opsroute::leaderboard::TaskExpertMap;
use opsroute::llm_client::{ChatModel, EndpointConfig};
use opsroute::prompting::TemplateSet;
use opsroute::retrieval::{load_kb, EmbeddingProvider, HashEmbedder, RemoteEmbedder};
use opsroute::router::{Pipeline, RagContext};
use opsroute::{Error, ExpertRef, Result, TaskLabel};

/// An embedding provider: the deterministic mock or a remote
/// OpenAI-compatible endpoint. Keys come from the environment only.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum EmbedderConfig {
    MockHash {
        seed: u64,
        dim: usize,
    },
    Remote {
        base_url: String,
        model: String,
        #[serde(default)]
        api_key_env: Option<String>,
        dim: usize,
    },
}

impl EmbedderConfig {
    pub fn build(&self) -> Result<Box<dyn EmbeddingProvider>> {
        match self {
            EmbedderConfig::MockHash { seed, dim } => Ok(Box::new(HashEmbedder::new(*seed, *dim))),
            EmbedderConfig::Remote {
                base_url,
                model,
                api_key_env,
                dim,
            } => Ok(Box::new(RemoteEmbedder::new(
                base_url,
                model,
                api_key_env.as_deref(),
                *dim,
            )?)),
        }
    }

    pub fn load(path: &Path) -> Result<EmbedderConfig> {
        let body = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        serde_json::from_str(&body)
            .map_err(|e| Error::Config(format!("malformed embedder config {}: {e}", path.display())))
    }
}

/// Retrieval settings for the classifier's context stage.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RagConfig {
    /// Knowledge-base file produced by `build-kb`.
    pub kb: PathBuf,
    pub embedder: EmbedderConfig,
    #[serde(default = "default_k")]
    pub k: usize,
    /// Remove the query's own record before retrieval.
    #[serde(default)]
    pub exclude_self: bool,
    /// L2-normalize query embeddings before the dot product.
    #[serde(default)]
    pub normalize: bool,
}

fn default_k() -> usize {
    5
}

/// The full pipeline wiring: one classifier endpoint, one endpoint per
/// expert, the task-expert map, and optional retrieval grounding.
/// Switching expert sets means swapping this file and the map only.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub classifier: EndpointConfig,
    #[serde(default)]
    pub experts: Vec<EndpointConfig>,
    /// Task-expert map file; required for routing, optional when only
    /// classifying.
    #[serde(default)]
    pub map: Option<PathBuf>,
    #[serde(default)]
    pub rag: Option<RagConfig>,
    /// Directory of prompt template overrides; the built-in templates
    /// apply when absent.
    #[serde(default)]
    pub templates: Option<PathBuf>,
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<PipelineConfig> {
        let body = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg: PipelineConfig = serde_json::from_str(&body)
            .map_err(|e| Error::Config(format!("malformed pipeline config {}: {e}", path.display())))?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        if let Some(map) = &mut cfg.map {
            *map = resolve(base, map);
        }
        if let Some(rag) = &mut cfg.rag {
            rag.kb = resolve(base, &rag.kb);
        }
        if let Some(templates) = &mut cfg.templates {
            *templates = resolve(base, templates);
        }
        Ok(cfg)
    }

    /// Assembles the runnable pipeline. `require_map` distinguishes
    /// routing (which must have one) from classification-only use.
    pub fn build(
        &self,
        tasks: Vec<TaskLabel>,
        oracle_classifier: bool,
        require_map: bool,
    ) -> Result<Pipeline> {
        let classifier = self.classifier.build()?;
        let mut experts: HashMap<String, Box<dyn ChatModel>> = HashMap::new();
        for e in &self.experts {
            if experts.insert(e.name.clone(), e.build()?).is_some() {
                return Err(Error::Config(format!("duplicate expert endpoint `{}`", e.name)));
            }
        }
        let map = match &self.map {
            Some(path) => TaskExpertMap::load(path)?,
            None if require_map => {
                return Err(Error::Config(
                    "pipeline config has no `map` entry; routing needs a task-expert map".into(),
                ))
            }
            None => TaskExpertMap {
                entries: indexmap::IndexMap::new(),
                unknown_expert: ExpertRef::new("unrouted"),
            },
        };
        let templates = match &self.templates {
            Some(dir) => TemplateSet::from_dir(dir)?,
            None => TemplateSet::builtin(),
        };
        let rag = match &self.rag {
            Some(cfg) => {
                let kb = load_kb(&cfg.kb)?;
                let provider = cfg.embedder.build()?;
                if kb.provider_id != provider.id() {
                    return Err(Error::Config(format!(
                        "knowledge base was built with provider `{}` but the config names `{}`",
                        kb.provider_id,
                        provider.id()
                    )));
                }
                Some(RagContext {
                    kb,
                    provider,
                    k: cfg.k,
                    exclude_self: cfg.exclude_self,
                    normalize: cfg.normalize,
                })
            }
            None => None,
        };
        Ok(Pipeline {
            tasks,
            classifier,
            experts,
            map,
            templates,
            rag,
            oracle_classifier,
        })
    }
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

/// Loads a JSON array of expert endpoints for leaderboard construction.
pub fn load_expert_set(path: &Path) -> Result<Vec<EndpointConfig>> {
    let body = std::fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
    let experts: Vec<EndpointConfig> = serde_json::from_str(&body)
        .map_err(|e| Error::Config(format!("malformed expert set {}: {e}", path.display())))?;
    if experts.is_empty() {
        return Err(Error::Config(format!("expert set {} is empty", path.display())));
    }
    Ok(experts)
}
