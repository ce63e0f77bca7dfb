//! Pipeline configuration: one TOML document with a block per stage.
//!
//! Precedence, lowest first: built-in defaults, the config file,
//! `POSTERFORGE_<BLOCK>__<KEY>` environment variables, command-line flags.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use serde::{Deserialize, Serialize};

use posterforge_core::curriculum::CurriculumConfig;
use posterforge_core::evalharness::DEFAULT_ISSUE_THRESHOLD;
use posterforge_core::filtering::{AestheticWeights, TemplateOcrConfig};
use posterforge_core::mmdit::ModelConfig;
use posterforge_core::pairbuilder::{PairConfig, TaskKind};
use posterforge_core::synthcorpus::CorpusConfig;

pub const ENV_PREFIX: &str = "POSTERFORGE_";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusStage {
    pub count: usize,
    pub generator: CorpusConfig,
}

impl Default for CorpusStage {
    fn default() -> Self {
        Self {
            count: 160,
            generator: CorpusConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FilterStage {
    pub tau: f64,
    pub weights: AestheticWeights,
    pub ocr: TemplateOcrConfig,
}

impl Default for FilterStage {
    fn default() -> Self {
        Self {
            tau: 0.5,
            weights: AestheticWeights::default(),
            ocr: TemplateOcrConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CaptionStage {
    /// Parse every glyph caption back and fail on any mismatch.
    pub verify: bool,
}

impl Default for CaptionStage {
    fn default() -> Self {
        Self { verify: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SampleStage {
    pub steps: usize,
    pub guidance: f64,
    /// Number of demo posters drawn from the pair set.
    pub count: usize,
    pub task: TaskKind,
    pub size: (u32, u32),
    /// Extra sizes sampled from the first demo condition.
    pub ratios: Vec<(u32, u32)>,
}

impl Default for SampleStage {
    fn default() -> Self {
        Self {
            steps: 50,
            guidance: 3.0,
            count: 32,
            task: TaskKind::TextAddition,
            size: (64, 64),
            ratios: vec![(64, 64), (64, 96), (96, 64), (48, 96)],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalStage {
    pub issue_threshold: u32,
}

impl Default for EvalStage {
    fn default() -> Self {
        Self {
            issue_threshold: DEFAULT_ISSUE_THRESHOLD,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// The only seed; it is copied into every stage that draws randoms.
    pub seed: u64,
    /// Directory holding every stage's artifacts and the ledger.
    pub root: PathBuf,
    pub corpus: CorpusStage,
    pub filter: FilterStage,
    pub pair: PairConfig,
    pub captioner: CaptionStage,
    pub model: ModelConfig,
    pub curriculum: CurriculumConfig,
    pub sampler: SampleStage,
    pub eval: EvalStage,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            root: PathBuf::from("run"),
            corpus: CorpusStage::default(),
            filter: FilterStage::default(),
            pair: PairConfig::default(),
            captioner: CaptionStage::default(),
            model: demo_model(),
            curriculum: demo_curriculum(),
            sampler: SampleStage::default(),
            eval: EvalStage::default(),
        }
    }
}

/// Desk-scale model used by the default pipeline.
pub fn demo_model() -> ModelConfig {
    ModelConfig {
        depth: 4,
        width: 128,
        heads: 4,
        ..ModelConfig::default()
    }
}

pub fn demo_curriculum() -> CurriculumConfig {
    let mut c = posterforge_core::curriculum::default_curriculum();
    for (s, (steps, lr)) in c.stages.iter_mut().zip([(1400, 5e-3), (1200, 5e-3), (300, 1e-3)]) {
        s.steps = steps;
        s.learning_rate = lr;
        s.warmup = 100;
    }
    c
}

impl PipelineConfig {
    /// Loads `path` (if any) and applies overrides from `env`.
    pub fn load(path: Option<&Path>, env: impl IntoIterator<Item = (String, String)>) -> anyhow::Result<Self> {
        let mut table = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
                text.parse::<toml::Table>()
                    .map_err(|e| anyhow::Error::new(ConfigError(format!("{}: {e}", p.display()))))?
            }
            None => toml::Table::new(),
        };
        for (key, value) in env {
            if let Some(rest) = key.strip_prefix(ENV_PREFIX) {
                set_path(&mut table, rest, &value)?;
            }
        }
        let cfg: Self = table
            .try_into()
            .map_err(|e: toml::de::Error| anyhow::Error::new(ConfigError(e.to_string())))?;
        Ok(cfg)
    }

    /// Propagates the global seed and the shared corpus settings into the
    /// stage blocks, then validates.
    pub fn resolve(mut self) -> anyhow::Result<Self> {
        self.pair.seed = self.seed;
        self.pair.corpus = self.corpus.generator.clone();
        self.curriculum.seed = self.seed;
        self.model.init_seed = self.seed;
        self.corpus.generator.check()?;
        self.model.check()?;
        self.curriculum.check(&self.model.group_labels())?;
        if self.corpus.generator.patch as usize != self.model.patch {
            bail!(ConfigError(format!(
                "corpus patch {} differs from model patch {}",
                self.corpus.generator.patch, self.model.patch
            )));
        }
        Ok(self)
    }
}

/// A malformed configuration value.
#[derive(Debug)]
pub struct ConfigError(pub String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "config: {}", self.0)
    }
}

impl std::error::Error for ConfigError {}

/// `MODEL__DEPTH=4` sets `model.depth`. Values are read as TOML when they
/// parse, as plain strings otherwise.
fn set_path(table: &mut toml::Table, key: &str, raw: &str) -> anyhow::Result<()> {
    let parts: Vec<String> = key.split("__").map(|p| p.to_ascii_lowercase()).collect();
    if parts.iter().any(String::is_empty) {
        bail!(ConfigError(format!("malformed override {ENV_PREFIX}{key}")));
    }
    let value = format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let (last, parents) = parts.split_last().expect("nonempty");
    let mut cur = table;
    for p in parents {
        let entry = cur
            .entry(p.clone())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = match entry {
            toml::Value::Table(t) => t,
            _ => bail!(ConfigError(format!("{ENV_PREFIX}{key}: {p} is not a table"))),
        };
    }
    cur.insert(last.clone(), value);
    Ok(())
}
