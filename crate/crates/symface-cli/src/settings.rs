//! Run configuration: a versioned JSON document, every field overridable
//! from the command line (flags win over the file, the file wins over
//! defaults).

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use serde::{Deserialize, Serialize};
use symface::geometry::FrontnessMode;
use symface::loss::MarginFamily;
use symface::model::EmbedderConfig;
use symface::seeds;
use symface::synth::CorpusConfig;
use symface::train::TrainConfig;

pub const SCHEMA: &str = "symface-run/1";

/// Evaluation protocol knobs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSettings {
    pub folds: usize,
    /// Verification pairs per fold (half same-identity, half different).
    pub pairs_per_fold: usize,
    /// Images per identity reserved for the held-out split when a corpus
    /// is generated.
    pub holdout_per_identity: usize,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self {
            folds: 10,
            pairs_per_fold: 60,
            holdout_per_identity: 8,
        }
    }
}

/// The on-disk run configuration document.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfigFile {
    /// Must equal [`SCHEMA`].
    pub schema: String,
    /// Top-level seed; when present it re-derives the corpus and training
    /// seeds through named streams.
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub corpus_dir: Option<PathBuf>,
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
    #[serde(default)]
    pub synth: CorpusConfig,
    #[serde(default)]
    pub embedder: EmbedderConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub eval: EvalSettings,
    /// Frontness measurement mode for manifest building.
    #[serde(default)]
    pub frontness_mode: FrontnessMode,
}

/// Fully resolved settings shared by every subcommand.
#[derive(Debug, Clone)]
pub struct Settings {
    pub corpus_dir: PathBuf,
    pub out_dir: PathBuf,
    pub synth: CorpusConfig,
    pub embedder: EmbedderConfig,
    pub train: TrainConfig,
    pub eval: EvalSettings,
    pub frontness_mode: FrontnessMode,
    pub deterministic: bool,
}

/// Command-line overrides for the global knobs.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub config: Option<PathBuf>,
    pub seed: Option<u64>,
    pub tau: Option<f64>,
    pub split_fraction: Option<f64>,
    pub margin_family: Option<String>,
    pub scale: Option<f64>,
    pub margin: Option<f64>,
    pub epochs: Option<usize>,
    pub corpus_dir: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
    pub inter_ocular: bool,
    pub deterministic: bool,
}

pub fn parse_margin_family(name: &str) -> anyhow::Result<MarginFamily> {
    Ok(match name {
        "softmax" => MarginFamily::Softmax,
        "norm_softmax" => MarginFamily::NormSoftmax,
        "cosface" => MarginFamily::CosFace,
        "sphereface" => MarginFamily::SphereFace,
        "arcface" => MarginFamily::ArcFace,
        "adaface" => MarginFamily::AdaFace,
        other => bail!(symface::Error::Config(format!(
            "unknown margin family '{other}'; expected softmax | norm_softmax | cosface | \
             sphereface | arcface"
        ))),
    })
}

pub fn resolve(overrides: &Overrides) -> anyhow::Result<Settings> {
    let mut seed: Option<u64> = None;
    let mut settings = Settings {
        corpus_dir: PathBuf::from("corpus"),
        out_dir: PathBuf::from("runs"),
        synth: CorpusConfig::default(),
        embedder: EmbedderConfig::default(),
        train: TrainConfig::default(),
        eval: EvalSettings::default(),
        frontness_mode: FrontnessMode::Pixels,
        deterministic: false,
    };

    if let Some(path) = &overrides.config {
        let file = load_config_file(path)?;
        seed = file.seed;
        if let Some(dir) = file.corpus_dir {
            settings.corpus_dir = dir;
        }
        if let Some(dir) = file.out_dir {
            settings.out_dir = dir;
        }
        settings.synth = file.synth;
        settings.embedder = file.embedder;
        settings.train = file.train;
        settings.eval = file.eval;
        settings.frontness_mode = file.frontness_mode;
    }

    if let Some(s) = overrides.seed {
        seed = Some(s);
    }
    if let Some(s) = seed {
        settings.train.seed = s;
        settings.synth.seed = seeds::derive(s, "corpus", 0);
    }
    if let Some(tau) = overrides.tau {
        settings.train.tau = tau;
    }
    if let Some(p) = overrides.split_fraction {
        settings.train.split_fraction = p;
    }
    if let Some(name) = &overrides.margin_family {
        settings.train.margin.family = parse_margin_family(name)?;
    }
    if let Some(scale) = overrides.scale {
        settings.train.margin.scale = scale;
    }
    if let Some(margin) = overrides.margin {
        settings.train.margin.margin = margin;
    }
    if let Some(epochs) = overrides.epochs {
        settings.train.epochs = epochs;
    }
    if let Some(dir) = &overrides.corpus_dir {
        settings.corpus_dir = dir.clone();
    }
    if let Some(dir) = &overrides.out_dir {
        settings.out_dir = dir.clone();
    }
    if overrides.inter_ocular {
        settings.frontness_mode = FrontnessMode::InterOcular;
    }
    settings.deterministic = overrides.deterministic;

    if !(0.0..1.0).contains(&settings.train.tau) {
        bail!(symface::Error::Config(format!(
            "tau must be in [0, 1), got {}",
            settings.train.tau
        )));
    }
    Ok(settings)
}

pub fn load_config_file(path: &Path) -> anyhow::Result<RunConfigFile> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("cannot read config {}", path.display()))?;
    let file: RunConfigFile = serde_json::from_str(&text)
        .map_err(|e| symface::Error::Config(format!("{}: {e}", path.display())))?;
    if file.schema != SCHEMA {
        bail!(symface::Error::Config(format!(
            "config schema '{}' is not supported; expected '{SCHEMA}'",
            file.schema
        )));
    }
    Ok(file)
}

/// Worker count for parallel sections: `SYMFACE_THREADS` caps it, and
/// deterministic mode forces sequential execution.
pub fn worker_threads(deterministic: bool) -> usize {
    if deterministic {
        return 1;
    }
    if let Ok(v) = std::env::var("SYMFACE_THREADS") {
        if let Ok(n) = v.trim().parse::<usize>() {
            return n.max(1);
        }
    }
    std::thread::available_parallelism()
        .map(|n| n.get().min(8))
        .unwrap_or(1)
}
