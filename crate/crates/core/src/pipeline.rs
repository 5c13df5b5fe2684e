//! The recorded preprocessing pipeline and the detector it feeds.
//!
//! A sequence becomes a matrix with one row per window: either the four
//! window statistics (`stats`) or the raw window samples (`raw`). Rows are
//! then passed through the fitted [`InputTransform`] and scored by the
//! detector, one score per window.

use std::fmt;
use std::str::FromStr;

use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::engine::Activation;
use crate::error::{Error, Result, StageContext};
use crate::gan::{GanArch, GanModel, GanTrainConfig};
use crate::hmm::{fit_baum_welch, HmmParams};
use crate::ingest::{Dataset, RawSequence};
use crate::preprocess::{self, extract_features, FeatureVector, ScalerParams};
use crate::vae::{VaeArch, VaeModel, VaeTrainConfig};

macro_rules! named_enum {
    ($name:ident { $($variant:ident => $text:literal),+ $(,)? }) => {
        impl $name {
            pub fn as_str(self) -> &'static str {
                match self { $($name::$variant => $text),+ }
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }

        impl FromStr for $name {
            type Err = Error;
            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($text => Ok($name::$variant),)+
                    other => Err(Error::config(format!(
                        concat!("unknown ", stringify!($name), " {:?}"), other
                    ))),
                }
            }
        }
    };
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Hmm,
    Vae,
    Gan,
}
named_enum!(ModelKind { Hmm => "hmm", Vae => "vae", Gan => "gan" });

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureMode {
    Stats,
    Raw,
}
named_enum!(FeatureMode { Stats => "stats", Raw => "raw" });

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aggregation {
    Max,
    Mean,
}
named_enum!(Aggregation { Max => "max", Mean => "mean" });

impl Aggregation {
    pub fn default_for(mode: FeatureMode) -> Self {
        match mode {
            FeatureMode::Raw => Aggregation::Max,
            FeatureMode::Stats => Aggregation::Mean,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HmmScore {
    /// Posterior-weighted emission-mean reconstruction MSE.
    Reconstruction,
    /// Predictive negative log-likelihood per step.
    Nll,
}
named_enum!(HmmScore { Reconstruction => "reconstruction", Nll => "nll" });

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "mode")]
pub enum GanScore {
    Discriminator,
    Inversion { steps: usize, lr: f64, blend: f64, seed: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    /// Samples per window (1 sample = 1 ms at 1 kHz).
    pub window_size: usize,
    pub stride: usize,
    pub feature_mode: FeatureMode,
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        preprocess::check_window_params(self.window_size, self.stride)
    }

    /// One row per full window, before any fitted scaling. `None` if the
    /// sequence is shorter than one window.
    pub fn extract(&self, seq: &RawSequence) -> Result<Option<Array2<f64>>> {
        self.validate()?;
        let windows = preprocess::window(seq, self.window_size, self.stride)?;
        if windows.is_empty() {
            return Ok(None);
        }
        let rows = match self.feature_mode {
            FeatureMode::Stats => {
                let feats: Vec<FeatureVector> = windows.iter().map(|w| extract_features(&w.values)).collect();
                preprocess::features_to_rows(&feats)
            }
            FeatureMode::Raw => {
                let mut m = Array2::zeros((windows.len(), self.window_size));
                for (mut row, w) in m.rows_mut().into_iter().zip(&windows) {
                    row.assign(&ndarray::ArrayView1::from(&w.values));
                }
                m
            }
        };
        Ok(Some(rows))
    }
}

/// Affine `[0, 1]` remapping from training extremes. A single entry applies
/// to every column.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MinMax {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl MinMax {
    fn fit(rows: &Array2<f64>, per_column: bool) -> Self {
        if per_column {
            let lo = rows.fold_axis(Axis(0), f64::INFINITY, |a, &b| a.min(b)).to_vec();
            let hi = rows.fold_axis(Axis(0), f64::NEG_INFINITY, |a, &b| a.max(b)).to_vec();
            Self { lo, hi }
        } else {
            let lo = rows.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = rows.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            Self { lo: vec![lo], hi: vec![hi] }
        }
    }

    fn apply(&self, rows: &mut Array2<f64>) -> Result<()> {
        if self.lo.len() != 1 && self.lo.len() != rows.ncols() {
            return Err(Error::DimensionMismatch {
                expected: self.lo.len(),
                got: rows.ncols(),
            });
        }
        for (j, mut col) in rows.columns_mut().into_iter().enumerate() {
            let k = if self.lo.len() == 1 { 0 } else { j };
            let (lo, span) = (self.lo[k], self.hi[k] - self.lo[k]);
            if span > 0.0 {
                col.mapv_inplace(|x| (x - lo) / span);
            } else {
                col.mapv_inplace(|x| 0.5 + (x - lo));
            }
        }
        Ok(())
    }
}

/// Scaling fitted on training rows: optional standardization followed by an
/// optional `[0, 1]` remap.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct InputTransform {
    pub scaler: Option<ScalerParams>,
    pub minmax: Option<MinMax>,
}

impl InputTransform {
    pub fn fit(kind: ModelKind, mode: FeatureMode, rows: &Array2<f64>) -> Result<Self> {
        match (kind, mode) {
            (ModelKind::Hmm, FeatureMode::Stats) => Ok(Self {
                scaler: Some(ScalerParams::fit_rows(rows)?),
                minmax: None,
            }),
            (ModelKind::Hmm, FeatureMode::Raw) => {
                let flat = Array2::from_shape_vec((rows.len(), 1), rows.iter().copied().collect())
                    .map_err(|e| Error::invalid(e.to_string()))?;
                let s = ScalerParams::fit_rows(&flat)?;
                Ok(Self {
                    scaler: Some(s),
                    minmax: None,
                })
            }
            (_, FeatureMode::Stats) => {
                let scaler = ScalerParams::fit_rows(rows)?;
                let scaled = scaler.transform_rows(rows)?;
                Ok(Self {
                    minmax: Some(MinMax::fit(&scaled, true)),
                    scaler: Some(scaler),
                })
            }
            (_, FeatureMode::Raw) => Ok(Self {
                scaler: None,
                minmax: Some(MinMax::fit(rows, false)),
            }),
        }
    }

    pub fn apply(&self, rows: &Array2<f64>) -> Result<Array2<f64>> {
        let mut out = match &self.scaler {
            Some(s) if s.dim() == 1 && rows.ncols() != 1 => {
                let (m, sd) = (s.means[0], s.stds[0]);
                if sd > 0.0 {
                    rows.mapv(|x| (x - m) / sd)
                } else {
                    Array2::zeros(rows.raw_dim())
                }
            }
            Some(s) => s.transform_rows(rows)?,
            None => rows.clone(),
        };
        if let Some(mm) = &self.minmax {
            mm.apply(&mut out)?;
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Detector {
    Hmm { params: HmmParams, score: HmmScore },
    Vae(VaeModel),
    Gan { model: GanModel, score: GanScore },
}

impl Detector {
    pub fn kind(&self) -> ModelKind {
        match self {
            Detector::Hmm { .. } => ModelKind::Hmm,
            Detector::Vae(_) => ModelKind::Vae,
            Detector::Gan { .. } => ModelKind::Gan,
        }
    }

    /// Scores the transformed window rows of one sequence.
    pub fn score_windows(&self, mode: FeatureMode, rows: &Array2<f64>) -> Result<Vec<f64>> {
        match self {
            Detector::Hmm { params, score } => match mode {
                FeatureMode::Stats => match score {
                    HmmScore::Reconstruction => params.reconstruction_errors(rows),
                    HmmScore::Nll => params.step_nll(rows),
                },
                FeatureMode::Raw => rows
                    .rows()
                    .into_iter()
                    .map(|r| {
                        let obs = r.to_owned().insert_axis(Axis(1));
                        match score {
                            HmmScore::Reconstruction => params.score_reconstruction(&obs),
                            HmmScore::Nll => Ok(-params.log_likelihood(&obs)? / obs.nrows() as f64),
                        }
                    })
                    .collect(),
            },
            Detector::Vae(model) => model.score(rows),
            Detector::Gan { model, score } => match *score {
                GanScore::Discriminator => model.score_discriminator(rows),
                GanScore::Inversion { steps, lr, blend, seed } => rows
                    .rows()
                    .into_iter()
                    .map(|r| model.score_inversion(&r.to_vec(), steps, lr, seed, blend))
                    .collect(),
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HmmOptions {
    pub n_states: usize,
    pub max_iters: usize,
    pub tol: f64,
    pub score: HmmScore,
}

impl Default for HmmOptions {
    fn default() -> Self {
        Self {
            n_states: 2,
            max_iters: 100,
            tol: 1e-4,
            score: HmmScore::Reconstruction,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VaeOptions {
    /// `None` picks the per-feature-mode default widths.
    pub hidden1: Option<usize>,
    pub hidden2: Option<usize>,
    pub latent_dim: Option<usize>,
    pub l2_lambda: f64,
    pub kl_weight: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
}

impl Default for VaeOptions {
    fn default() -> Self {
        Self {
            hidden1: None,
            hidden2: None,
            latent_dim: None,
            l2_lambda: 1e-4,
            kl_weight: 1.0,
            epochs: 300,
            batch_size: 32,
            learning_rate: 0.001,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GanOptions {
    pub noise_dim: usize,
    pub leaky_alpha: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub score: GanScore,
}

impl Default for GanOptions {
    fn default() -> Self {
        Self {
            noise_dim: 64,
            leaky_alpha: 0.2,
            epochs: 300,
            batch_size: 64,
            learning_rate: 0.0002,
            beta1: 0.5,
            beta2: 0.999,
            score: GanScore::Discriminator,
        }
    }
}

/// Everything needed to train a detector reproducibly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSpec {
    pub kind: ModelKind,
    pub pipeline: PipelineConfig,
    pub aggregation: Aggregation,
    pub seed: u64,
    pub hmm: HmmOptions,
    pub vae: VaeOptions,
    pub gan: GanOptions,
}

impl TrainSpec {
    pub fn new(kind: ModelKind, feature_mode: FeatureMode, window_size: usize, seed: u64) -> Self {
        Self {
            kind,
            pipeline: PipelineConfig {
                window_size,
                stride: window_size,
                feature_mode,
            },
            aggregation: Aggregation::default_for(feature_mode),
            seed,
            hmm: HmmOptions::default(),
            vae: VaeOptions::default(),
            gan: GanOptions::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.pipeline.validate()?;
        if self.hmm.n_states < 1 || self.hmm.max_iters < 1 {
            return Err(Error::config("HMM needs n_states >= 1 and max_iters >= 1"));
        }
        if self.vae.epochs < 1 || self.gan.epochs < 1 {
            return Err(Error::config("epochs must be at least 1"));
        }
        if self.vae.batch_size < 1 || self.gan.batch_size < 1 {
            return Err(Error::config("batch size must be at least 1"));
        }
        if !(self.vae.learning_rate > 0.0 && self.gan.learning_rate > 0.0) {
            return Err(Error::config("learning rates must be positive"));
        }
        if let GanScore::Inversion { steps, .. } = self.gan.score {
            if steps < 1 {
                return Err(Error::config("inversion needs at least one step"));
            }
        }
        Ok(())
    }
}

/// A trained detector together with the exact preprocessing it expects.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainedModel {
    pub pipeline: PipelineConfig,
    pub aggregation: Aggregation,
    pub transform: InputTransform,
    pub detector: Detector,
    pub seed: u64,
    /// JSON of the [`TrainSpec`] the model was trained with.
    pub train_config: String,
}

impl TrainedModel {
    pub fn kind(&self) -> ModelKind {
        self.detector.kind()
    }

    /// Per-window scores for one sequence, or `None` if it is too short to
    /// hold a single window.
    pub fn window_scores(&self, seq: &RawSequence) -> Result<Option<Vec<f64>>> {
        let Some(rows) = self.pipeline.extract(seq)? else {
            return Ok(None);
        };
        let rows = self.transform.apply(&rows)?;
        self.detector
            .score_windows(self.pipeline.feature_mode, &rows)
            .map(Some)
    }
}

/// Preprocesses the (normal-only) training set, fits the input transform and
/// trains the requested detector.
pub fn train_model(train: &Dataset, spec: &TrainSpec) -> Result<TrainedModel> {
    spec.validate()?;
    let per_seq: Vec<Array2<f64>> = train
        .sequences
        .iter()
        .map(|s| spec.pipeline.extract(s))
        .collect::<Result<Vec<_>>>()
        .stage("preprocess")?
        .into_iter()
        .flatten()
        .collect();
    if per_seq.is_empty() {
        return Err(Error::invalid(format!(
            "no training sequence holds a full window of {} samples",
            spec.pipeline.window_size
        )))
        .stage("preprocess");
    }
    let views: Vec<_> = per_seq.iter().map(|m| m.view()).collect();
    let stacked = ndarray::concatenate(Axis(0), &views).map_err(|e| Error::invalid(e.to_string()))?;
    let transform = InputTransform::fit(spec.kind, spec.pipeline.feature_mode, &stacked).stage("scale")?;
    let mode = spec.pipeline.feature_mode;

    let detector = match spec.kind {
        ModelKind::Hmm => {
            let obs: Vec<Array2<f64>> = match mode {
                FeatureMode::Stats => per_seq
                    .iter()
                    .map(|m| transform.apply(m))
                    .collect::<Result<Vec<_>>>()?
                    .into_iter()
                    .filter(|m| m.nrows() >= 2)
                    .collect(),
                FeatureMode::Raw => transform
                    .apply(&stacked)?
                    .rows()
                    .into_iter()
                    .map(|r| r.to_owned().insert_axis(Axis(1)))
                    .collect(),
            };
            if obs.is_empty() {
                return Err(Error::invalid("HMM training needs sequences with at least two windows")).stage("train");
            }
            let fit = fit_baum_welch(&obs, spec.hmm.n_states, spec.seed, spec.hmm.max_iters, spec.hmm.tol)
                .stage("train")?;
            log::info!(
                "hmm: {} EM iterations, final log-likelihood {:.6}",
                fit.log_likelihoods.len(),
                fit.log_likelihoods.last().copied().unwrap_or(f64::NAN)
            );
            Detector::Hmm {
                params: fit.params,
                score: spec.hmm.score,
            }
        }
        ModelKind::Vae => {
            let x = transform.apply(&stacked)?.mapv(|v| v.clamp(0.0, 1.0));
            let dim = x.ncols();
            let base = match mode {
                FeatureMode::Raw => VaeArch::for_raw(dim),
                FeatureMode::Stats => VaeArch::for_features(dim),
            };
            let arch = VaeArch {
                hidden1: spec.vae.hidden1.unwrap_or(base.hidden1),
                hidden2: spec.vae.hidden2.unwrap_or(base.hidden2),
                latent_dim: spec.vae.latent_dim.unwrap_or(base.latent_dim),
                l2_lambda: spec.vae.l2_lambda,
                kl_weight: spec.vae.kl_weight,
                ..base
            };
            let mut model = VaeModel::new(arch, spec.seed).stage("train")?;
            let cfg = VaeTrainConfig {
                epochs: spec.vae.epochs,
                batch_size: spec.vae.batch_size,
                learning_rate: spec.vae.learning_rate,
                seed: spec.seed,
                strict: true,
            };
            let history = model.train(&x, &cfg).stage("train")?;
            log::info!(
                "vae: loss {:.6} -> {:.6} over {} epochs",
                history[0],
                history[history.len() - 1],
                history.len()
            );
            Detector::Vae(model)
        }
        ModelKind::Gan => {
            let x = transform.apply(&stacked)?.mapv(|v| v.clamp(0.0, 1.0));
            let arch = GanArch {
                noise_dim: spec.gan.noise_dim,
                leaky_alpha: spec.gan.leaky_alpha,
                output_activation: Activation::Sigmoid,
                ..GanArch::new(x.ncols())
            };
            let mut model = GanModel::new(arch, spec.seed).stage("train")?;
            let cfg = GanTrainConfig {
                epochs: spec.gan.epochs,
                batch_size: spec.gan.batch_size.min(x.nrows()),
                learning_rate: spec.gan.learning_rate,
                beta1: spec.gan.beta1,
                beta2: spec.gan.beta2,
                seed: spec.seed,
            };
            let history = model.train(&x, &cfg).stage("train")?;
            log::info!(
                "gan: final losses D {:.4} G {:.4}",
                history.discriminator_loss.last().copied().unwrap_or(f64::NAN),
                history.generator_loss.last().copied().unwrap_or(f64::NAN)
            );
            Detector::Gan {
                model,
                score: spec.gan.score,
            }
        }
    };

    Ok(TrainedModel {
        pipeline: spec.pipeline,
        aggregation: spec.aggregation,
        transform,
        detector,
        seed: spec.seed,
        train_config: serde_json::to_string(spec).map_err(|e| Error::invalid(e.to_string()))?,
    })
}
