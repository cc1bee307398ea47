use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gateway::{
    ChatBackend, Gateway, Generation, MockBackend, OpenAiBackend, OpenAiConfig, TemplateSet,
};
use crate::knowledge::{
    Embedder, HashingEmbedder, KnowledgeBase, RemoteEmbedder, DEFAULT_DIMENSION,
    DEFAULT_THRESHOLD, DEFAULT_TOP_K,
};
use crate::solving::{Executor, InterpreterExecutor, RunnerExecutor, StubExecutor, DEFAULT_TIMEOUT_S};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum BackendConfig {
    /// OpenAI-compatible endpoint; unset fields fall back to `LLM_API_BASE`,
    /// `LLM_API_KEY` and `LLM_MODEL`.
    Openai {
        #[serde(default)]
        api_base: Option<String>,
        #[serde(default)]
        api_key: Option<String>,
        #[serde(default)]
        model: Option<String>,
        #[serde(default)]
        max_retries: Option<u32>,
        #[serde(default)]
        backoff_ms: Option<u64>,
    },
    Mock {
        script: PathBuf,
    },
}

impl Default for BackendConfig {
    fn default() -> Self {
        BackendConfig::Openai {
            api_base: None,
            api_key: None,
            model: None,
            max_retries: None,
            backoff_ms: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ExecutorConfig {
    Interpreter {
        #[serde(default = "default_interpreter")]
        command: Vec<String>,
    },
    Runner {
        command: Vec<String>,
    },
    Stub {
        script: PathBuf,
    },
}

fn default_interpreter() -> Vec<String> {
    vec!["python3".into()]
}

impl Default for ExecutorConfig {
    fn default() -> Self {
        ExecutorConfig::Interpreter {
            command: default_interpreter(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum EmbeddingConfig {
    Hash {
        #[serde(default = "default_dimension")]
        dimension: usize,
    },
    Remote {
        #[serde(default)]
        api_base: Option<String>,
        #[serde(default)]
        api_key: Option<String>,
        model: String,
    },
}

fn default_dimension() -> usize {
    DEFAULT_DIMENSION
}

impl Default for EmbeddingConfig {
    fn default() -> Self {
        EmbeddingConfig::Hash {
            dimension: DEFAULT_DIMENSION,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct KnowledgeConfig {
    /// JSON array of documentation records.
    #[serde(default)]
    pub docs: Option<PathBuf>,
    /// JSON array of experience records.
    #[serde(default)]
    pub experiences: Option<PathBuf>,
    /// Saved index directory; used instead of the files above when it exists.
    #[serde(default)]
    pub index_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    /// Experience similarity threshold.
    pub delta: f64,
    pub n_retry: u32,
    pub n_check: u32,
    pub n_exp: usize,
    pub top_k_docs: usize,
    pub timeout_s: f64,
    pub parallelism: usize,
    pub generation: Generation,
    pub backend: BackendConfig,
    pub executor: ExecutorConfig,
    pub embedding: EmbeddingConfig,
    pub knowledge: KnowledgeConfig,
    pub templates_dir: Option<PathBuf>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            delta: DEFAULT_THRESHOLD,
            n_retry: 3,
            n_check: 3,
            n_exp: 10,
            top_k_docs: DEFAULT_TOP_K,
            timeout_s: DEFAULT_TIMEOUT_S,
            parallelism: 4,
            generation: Generation::default(),
            backend: BackendConfig::default(),
            executor: ExecutorConfig::default(),
            embedding: EmbeddingConfig::default(),
            knowledge: KnowledgeConfig::default(),
            templates_dir: None,
        }
    }
}

fn resolve(base: &Path, path: &mut PathBuf) {
    if path.is_relative() {
        *path = base.join(&*path);
    }
}

fn env_or(value: &Option<String>, var: &str) -> Result<String> {
    match value {
        Some(v) => Ok(v.clone()),
        None => std::env::var(var)
            .map_err(|_| Error::Config(format!("{var} is not set and the config gives no value"))),
    }
}

impl PipelineConfig {
    /// Reads a JSON config; relative paths resolve against the file's directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let raw = std::fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
        let mut config: PipelineConfig = serde_json::from_str(&raw)?;
        let base = path.parent().unwrap_or(Path::new("."));
        config.resolve_paths(base);
        config.validate()?;
        Ok(config)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        if let BackendConfig::Mock { script } = &mut self.backend {
            resolve(base, script);
        }
        if let ExecutorConfig::Stub { script } = &mut self.executor {
            resolve(base, script);
        }
        for p in [
            &mut self.knowledge.docs,
            &mut self.knowledge.experiences,
            &mut self.knowledge.index_dir,
            &mut self.templates_dir,
        ]
        .into_iter()
        .flatten()
        {
            resolve(base, p);
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.delta) {
            return Err(Error::Config(format!("delta {} outside [0, 1]", self.delta)));
        }
        for (name, value) in [
            ("n_retry", self.n_retry as usize),
            ("n_check", self.n_check as usize),
            ("n_exp", self.n_exp),
            ("top_k_docs", self.top_k_docs),
            ("parallelism", self.parallelism),
        ] {
            if value == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if !(self.timeout_s > 0.0 && self.timeout_s.is_finite()) {
            return Err(Error::Config("timeout_s must be positive".into()));
        }
        Ok(())
    }

    pub fn build_backend(&self) -> Result<Arc<dyn ChatBackend>> {
        Ok(match &self.backend {
            BackendConfig::Mock { script } => Arc::new(MockBackend::from_file(script)?),
            BackendConfig::Openai {
                api_base,
                api_key,
                model,
                max_retries,
                backoff_ms,
            } => {
                let mut cfg = OpenAiConfig::new(
                    env_or(api_base, crate::gateway::ENV_API_BASE)?,
                    env_or(api_key, crate::gateway::ENV_API_KEY)?,
                    env_or(model, crate::gateway::ENV_MODEL)?,
                );
                if let Some(r) = max_retries {
                    cfg.max_retries = *r;
                }
                if let Some(b) = backoff_ms {
                    cfg.backoff_ms = *b;
                }
                Arc::new(OpenAiBackend::new(cfg)?)
            }
        })
    }

    pub fn build_gateway(&self) -> Result<Gateway> {
        let templates = match &self.templates_dir {
            Some(dir) => TemplateSet::load_dir(dir)?,
            None => TemplateSet::defaults(),
        };
        Ok(Gateway::new(self.build_backend()?)
            .with_templates(templates)
            .with_generation(self.generation))
    }

    pub fn build_embedder(&self) -> Result<Arc<dyn Embedder>> {
        Ok(match &self.embedding {
            EmbeddingConfig::Hash { dimension } => Arc::new(HashingEmbedder::new(*dimension)),
            EmbeddingConfig::Remote {
                api_base,
                api_key,
                model,
            } => Arc::new(RemoteEmbedder::new(
                env_or(api_base, crate::gateway::ENV_API_BASE)?,
                env_or(api_key, crate::gateway::ENV_API_KEY)?,
                model.clone(),
            )?),
        })
    }

    pub async fn build_knowledge(&self) -> Result<KnowledgeBase> {
        let embedder = self.build_embedder()?;
        if let Some(dir) = &self.knowledge.index_dir {
            if dir.join("manifest.json").is_file() {
                return Ok(KnowledgeBase::load(dir, embedder)?.with_top_k(self.top_k_docs));
            }
        }
        let mut kb = KnowledgeBase::new(embedder)
            .with_top_k(self.top_k_docs)
            .with_threshold(self.delta);
        if let Some(docs) = &self.knowledge.docs {
            kb.ingest_docs(docs).await?;
        }
        if let Some(experiences) = &self.knowledge.experiences {
            kb.ingest_experiences(experiences).await?;
        }
        Ok(kb)
    }

    pub fn build_executor(&self) -> Result<Arc<dyn Executor>> {
        Ok(match &self.executor {
            ExecutorConfig::Interpreter { command } if command.is_empty() => {
                return Err(Error::Config("interpreter command is empty".into()))
            }
            ExecutorConfig::Interpreter { command } => {
                Arc::new(InterpreterExecutor::new(command.clone(), self.timeout_s))
            }
            ExecutorConfig::Runner { command } if command.is_empty() => {
                return Err(Error::Config("runner command is empty".into()))
            }
            ExecutorConfig::Runner { command } => {
                Arc::new(RunnerExecutor::new(command.clone(), self.timeout_s))
            }
            ExecutorConfig::Stub { script } => Arc::new(StubExecutor::from_file(script)?),
        })
    }
}
