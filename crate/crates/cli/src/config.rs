use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::Args;
use knowtrace_core::lmio::{GenerationBackend, HttpBackend, ScriptedBackend};
use knowtrace_core::retrieval::{Bm25Retriever, RemoteRetriever};
use knowtrace_core::{EngineConfig, RenderStrategy, Retriever, Templates};
use serde::Deserialize;

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    #[serde(default)]
    pub backend: BackendSection,
    #[serde(default)]
    pub retriever: RetrieverSection,
    #[serde(default)]
    pub engine: EngineSection,
    #[serde(default)]
    pub templates: TemplatesSection,
    #[serde(default)]
    pub output: OutputSection,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackendSection {
    pub kind: Option<String>,
    pub script: Option<PathBuf>,
    pub endpoint: Option<String>,
    pub model: Option<String>,
    pub identity: Option<String>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RetrieverSection {
    pub corpus: Option<PathBuf>,
    pub url: Option<String>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EngineSection {
    pub max_iterations: Option<usize>,
    pub passages_per_query: Option<usize>,
    pub strategy: Option<String>,
    pub parse_retries: Option<usize>,
    pub max_output_tokens: Option<usize>,
    pub inner_parallelism: Option<usize>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TemplatesSection {
    pub dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    pub dir: Option<PathBuf>,
}

/// Command-line overrides; each flag mirrors a config key.
#[derive(Debug, Clone, Default, Args)]
pub struct ConfigArgs {
    /// TOML file with [backend], [retriever], [engine], [templates], [output].
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Backend kind: scripted or http.
    #[arg(long = "backend-kind")]
    pub backend_kind: Option<String>,
    /// Script file for the scripted backend.
    #[arg(long)]
    pub script: Option<PathBuf>,
    /// Completion endpoint for the http backend.
    #[arg(long)]
    pub endpoint: Option<String>,
    #[arg(long)]
    pub model: Option<String>,
    /// Identity the scripted backend reports (defaults to the script file's).
    #[arg(long)]
    pub identity: Option<String>,
    /// JSONL corpus for the built-in BM25 retriever.
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    /// Remote retriever endpoint, instead of --corpus.
    #[arg(long = "retriever-url")]
    pub retriever_url: Option<String>,
    #[arg(long = "max-iterations")]
    pub max_iterations: Option<usize>,
    #[arg(long = "passages-per-query")]
    pub passages_per_query: Option<usize>,
    /// triplets, paths or texts.
    #[arg(long)]
    pub strategy: Option<String>,
    #[arg(long = "parse-retries")]
    pub parse_retries: Option<usize>,
    #[arg(long = "max-output-tokens")]
    pub max_output_tokens: Option<usize>,
    /// Worker threads for the expansion pairs of one iteration.
    #[arg(long = "inner-parallelism")]
    pub inner_parallelism: Option<usize>,
    /// Directory with exploration.txt / completion.txt overrides.
    #[arg(long = "templates-dir")]
    pub templates_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum BackendSpec {
    Scripted {
        script: PathBuf,
        identity: Option<String>,
    },
    /// The model name doubles as the identity.
    Http { endpoint: String, model: String },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum RetrieverSpec {
    Corpus(PathBuf),
    Remote(String),
}

/// A validated run configuration.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub backend: BackendSpec,
    pub retriever: RetrieverSpec,
    pub engine: EngineConfig,
    pub templates_dir: Option<PathBuf>,
    pub output_dir: Option<PathBuf>,
}

fn relative_to(base: &Path, path: PathBuf) -> PathBuf {
    if path.is_absolute() {
        path
    } else {
        base.join(path)
    }
}

fn must_exist(path: &Path, what: &str) -> Result<()> {
    if !path.exists() {
        bail!("{what} not found: {}", path.display());
    }
    Ok(())
}

impl RunConfig {
    /// Loads the config file (if any), applies the flag overrides and
    /// validates the result. Paths in the file are relative to the file.
    pub fn resolve(args: &ConfigArgs) -> Result<Self> {
        let (file, base) = match &args.config {
            Some(path) => {
                let text = fs::read_to_string(path)
                    .with_context(|| format!("cannot read config {}", path.display()))?;
                let file: FileConfig = toml::from_str(&text)
                    .with_context(|| format!("invalid config {}", path.display()))?;
                let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
                (file, base)
            }
            None => (FileConfig::default(), PathBuf::new()),
        };
        let from_file = |p: Option<PathBuf>| p.map(|p| relative_to(&base, p));

        let kind = args
            .backend_kind
            .clone()
            .or(file.backend.kind)
            .unwrap_or_else(|| "scripted".into());
        let identity = args.identity.clone().or(file.backend.identity);
        let backend = match kind.as_str() {
            "scripted" => {
                let script = args
                    .script
                    .clone()
                    .or_else(|| from_file(file.backend.script))
                    .context("the scripted backend needs `script` ([backend] or --script)")?;
                must_exist(&script, "backend script")?;
                BackendSpec::Scripted { script, identity }
            }
            "http" if identity.is_some() => {
                bail!("`identity` applies to the scripted backend; an http backend is identified by its model")
            }
            "http" => BackendSpec::Http {
                endpoint: args
                    .endpoint
                    .clone()
                    .or(file.backend.endpoint)
                    .context("the http backend needs `endpoint`")?,
                model: args
                    .model
                    .clone()
                    .or(file.backend.model)
                    .context("the http backend needs `model`")?,
            },
            other => bail!("unknown backend kind {other:?} (scripted, http)"),
        };

        // A retriever flag replaces the whole [retriever] section.
        let (corpus, url) = if args.corpus.is_some() || args.retriever_url.is_some() {
            (args.corpus.clone(), args.retriever_url.clone())
        } else {
            (from_file(file.retriever.corpus), file.retriever.url)
        };
        let retriever = match (corpus, url) {
            (Some(_), Some(_)) => bail!("configure either a corpus or a retriever url, not both"),
            (Some(corpus), None) => {
                must_exist(&corpus, "corpus")?;
                RetrieverSpec::Corpus(corpus)
            }
            (None, Some(url)) => RetrieverSpec::Remote(url),
            (None, None) => {
                bail!(
                    "no retriever configured ([retriever] corpus/url or --corpus/--retriever-url)"
                )
            }
        };

        let defaults = EngineConfig::default();
        let strategy_name = args.strategy.clone().or(file.engine.strategy);
        let strategy = match strategy_name {
            Some(s) => s
                .parse::<RenderStrategy>()
                .map_err(|e| anyhow::anyhow!("{e}"))?,
            None => defaults.strategy,
        };
        let engine = EngineConfig {
            max_iterations: args
                .max_iterations
                .or(file.engine.max_iterations)
                .unwrap_or(defaults.max_iterations),
            passages_per_query: args
                .passages_per_query
                .or(file.engine.passages_per_query)
                .unwrap_or(defaults.passages_per_query),
            strategy,
            parse_retries: args
                .parse_retries
                .or(file.engine.parse_retries)
                .unwrap_or(defaults.parse_retries),
            max_output_tokens: args
                .max_output_tokens
                .or(file.engine.max_output_tokens)
                .unwrap_or(defaults.max_output_tokens),
            inner_parallelism: args
                .inner_parallelism
                .or(file.engine.inner_parallelism)
                .unwrap_or(defaults.inner_parallelism),
        };
        engine.validate()?;

        let templates_dir = args
            .templates_dir
            .clone()
            .or_else(|| from_file(file.templates.dir));
        if let Some(dir) = &templates_dir {
            must_exist(dir, "templates directory")?;
        }
        Ok(Self {
            backend,
            retriever,
            engine,
            templates_dir,
            output_dir: from_file(file.output.dir),
        })
    }

    pub fn build_backend(&self) -> Result<Box<dyn GenerationBackend>> {
        self.backend_with_identity(None)
    }

    /// The configured backend, optionally relabeled as a trained identity.
    pub fn backend_with_identity(
        &self,
        trained: Option<&str>,
    ) -> Result<Box<dyn GenerationBackend>> {
        Ok(match &self.backend {
            BackendSpec::Scripted { script, identity } => {
                let backend = ScriptedBackend::from_file(script)
                    .with_context(|| format!("cannot load script {}", script.display()))?;
                match trained.or(identity.as_deref()) {
                    Some(id) => Box::new(backend.with_identity(id)),
                    None => Box::new(backend),
                }
            }
            // A trained identity names the model to request.
            BackendSpec::Http { endpoint, model } => Box::new(HttpBackend::new(
                endpoint.clone(),
                trained.unwrap_or(model),
            )?),
        })
    }

    pub fn build_retriever(&self) -> Result<Box<dyn Retriever>> {
        Ok(match &self.retriever {
            RetrieverSpec::Corpus(path) => Box::new(
                Bm25Retriever::from_corpus_file(path)
                    .with_context(|| format!("cannot index corpus {}", path.display()))?,
            ),
            RetrieverSpec::Remote(url) => Box::new(RemoteRetriever::new(url.clone())?),
        })
    }

    pub fn build_templates(&self) -> Result<Templates> {
        match &self.templates_dir {
            Some(dir) => Templates::load(dir)
                .with_context(|| format!("cannot load templates from {}", dir.display())),
            None => Ok(Templates::builtin()),
        }
    }
}
