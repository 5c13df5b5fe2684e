//! Run configuration: command-line flags over an optional TOML file over
//! built-in defaults.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::Args;
use gendetect::bench::DEFAULT_SPLIT_RATIO;
use gendetect::pipeline::{Aggregation, FeatureMode, GanScore, HmmScore, ModelKind, TrainSpec};
use gendetect::synth::SynthConfig;
use serde::{Deserialize, Serialize};

pub const DEFAULT_WINDOW: usize = 2048;
pub const DEFAULT_FPR: f64 = 0.05;
pub const DEFAULT_INVERSION_STEPS: usize = 100;
pub const DEFAULT_INVERSION_LR: f64 = 0.05;

/// Every tunable. Each field may come from a flag or the config file.
#[derive(Debug, Clone, Default, Args, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Overrides {
    /// Detector: hmm, vae or gan
    #[arg(long)]
    pub model: Option<ModelKind>,
    /// Samples per window (1 sample = 1 ms at 1 kHz)
    #[arg(long)]
    pub window_size: Option<usize>,
    /// Window stride in samples [default: window size]
    #[arg(long)]
    pub stride: Option<usize>,
    /// Window representation: stats or raw
    #[arg(long)]
    pub feature_mode: Option<FeatureMode>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Several seeds for `bench`, comma separated
    #[arg(long, value_delimiter = ',')]
    pub seeds: Option<Vec<u64>>,
    /// False-positive tolerance used for threshold calibration
    #[arg(long)]
    pub fpr: Option<f64>,
    /// Window-to-sequence aggregation: max or mean [default: by feature mode]
    #[arg(long)]
    pub aggregation: Option<Aggregation>,
    /// HMM anomaly score: reconstruction or nll
    #[arg(long)]
    pub hmm_score: Option<HmmScore>,
    #[arg(long)]
    pub hmm_states: Option<usize>,
    /// GAN anomaly score: discriminator or inversion
    #[arg(long)]
    pub gan_score: Option<String>,
    #[arg(long)]
    pub inversion_steps: Option<usize>,
    #[arg(long)]
    pub inversion_lr: Option<f64>,
    /// Benchmark data: airbus, synth, or a sequence CSV path
    #[arg(long)]
    pub dataset: Option<String>,
    /// Directory holding the converted Airbus CSV files
    #[arg(long)]
    pub data_dir: Option<PathBuf>,
    #[arg(long)]
    pub split_ratio: Option<f64>,
    #[arg(long)]
    pub n_normal: Option<usize>,
    #[arg(long)]
    pub n_anomalous: Option<usize>,
    #[arg(long)]
    pub min_len: Option<usize>,
    #[arg(long)]
    pub max_len: Option<usize>,
}

macro_rules! merge_fields {
    ($hi:ident, $lo:ident; $($f:ident),+) => {
        Overrides { $($f: $hi.$f.or($lo.$f)),+ }
    };
}

impl Overrides {
    pub fn from_file(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    /// Fields set in `self` win over `lower`.
    pub fn over(self, lower: Overrides) -> Overrides {
        merge_fields!(self, lower; model, window_size, stride, feature_mode, epochs, batch_size,
            learning_rate, seed, seeds, fpr, aggregation, hmm_score, hmm_states, gan_score,
            inversion_steps, inversion_lr, dataset, data_dir, split_ratio, n_normal, n_anomalous,
            min_len, max_len)
    }
}

/// The fully resolved configuration, logged verbatim at the start of a run.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Settings {
    pub model: ModelKind,
    pub window_size: usize,
    pub stride: usize,
    pub feature_mode: FeatureMode,
    /// `None` keeps the per-model default
    pub epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub learning_rate: Option<f64>,
    pub seed: u64,
    pub seeds: Vec<u64>,
    pub fpr: f64,
    pub aggregation: Aggregation,
    pub hmm_score: HmmScore,
    pub hmm_states: usize,
    pub gan_score: GanScore,
    pub dataset: String,
    pub data_dir: Option<PathBuf>,
    pub split_ratio: f64,
    pub synth: SynthConfig,
}

impl Settings {
    pub fn resolve(o: Overrides) -> anyhow::Result<Self> {
        let feature_mode = o.feature_mode.unwrap_or(FeatureMode::Stats);
        let window_size = o.window_size.unwrap_or(DEFAULT_WINDOW);
        let seed = o.seed.unwrap_or(0);
        let gan_score = match o.gan_score.as_deref().unwrap_or("discriminator") {
            "discriminator" => GanScore::Discriminator,
            "inversion" => GanScore::Inversion {
                steps: o.inversion_steps.unwrap_or(DEFAULT_INVERSION_STEPS),
                lr: o.inversion_lr.unwrap_or(DEFAULT_INVERSION_LR),
                blend: 0.0,
                seed,
            },
            other => bail!("unknown GAN score {other:?} (expected discriminator or inversion)"),
        };
        let defaults = SynthConfig::default();
        let synth = SynthConfig {
            n_normal: o.n_normal.unwrap_or(defaults.n_normal),
            n_anomalous: o.n_anomalous.unwrap_or(defaults.n_anomalous),
            min_len: o.min_len.unwrap_or(defaults.min_len),
            max_len: o.max_len.unwrap_or(defaults.max_len),
            window_size,
            seed,
            ..defaults
        };
        let s = Settings {
            model: o.model.unwrap_or(ModelKind::Vae),
            window_size,
            stride: o.stride.unwrap_or(window_size),
            feature_mode,
            epochs: o.epochs,
            batch_size: o.batch_size,
            learning_rate: o.learning_rate,
            seed,
            seeds: o.seeds.unwrap_or_else(|| vec![seed]),
            fpr: o.fpr.unwrap_or(DEFAULT_FPR),
            aggregation: o.aggregation.unwrap_or(Aggregation::default_for(feature_mode)),
            hmm_score: o.hmm_score.unwrap_or(HmmScore::Reconstruction),
            hmm_states: o.hmm_states.unwrap_or(2),
            gan_score,
            dataset: o.dataset.unwrap_or_else(|| "synth".into()),
            data_dir: o.data_dir,
            split_ratio: o.split_ratio.unwrap_or(DEFAULT_SPLIT_RATIO),
            synth,
        };
        s.validate()?;
        Ok(s)
    }

    fn validate(&self) -> anyhow::Result<()> {
        if !(0.0..1.0).contains(&self.fpr) {
            bail!("--fpr must lie in [0, 1), got {}", self.fpr);
        }
        if !(self.split_ratio > 0.0 && self.split_ratio < 1.0) {
            bail!("--split-ratio must lie in (0, 1), got {}", self.split_ratio);
        }
        if self.seeds.is_empty() {
            bail!("--seeds needs at least one seed");
        }
        self.train_spec(self.seed).validate()?;
        Ok(())
    }

    pub fn train_spec(&self, seed: u64) -> TrainSpec {
        let mut spec = TrainSpec::new(self.model, self.feature_mode, self.window_size, seed);
        spec.pipeline.stride = self.stride;
        spec.aggregation = self.aggregation;
        spec.hmm.n_states = self.hmm_states;
        spec.hmm.score = self.hmm_score;
        spec.gan.score = self.gan_score;
        if let Some(e) = self.epochs {
            spec.vae.epochs = e;
            spec.gan.epochs = e;
        }
        if let Some(b) = self.batch_size {
            spec.vae.batch_size = b;
            spec.gan.batch_size = b;
        }
        if let Some(lr) = self.learning_rate {
            spec.vae.learning_rate = lr;
            spec.gan.learning_rate = lr;
        }
        spec
    }
}
