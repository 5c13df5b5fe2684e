//! Threshold calibration, sequence verdicts and model-bundle persistence.

use std::io::{Read, Write};

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::engine::{Activation, DenseLayer, DenseNet};
use crate::error::{Error, Result};
use crate::gan::{GanArch, GanModel};
use crate::hmm::HmmParams;
use crate::ingest::{Dataset, Label};
use crate::pipeline::{
    Aggregation, Detector, FeatureMode, GanScore, HmmScore, InputTransform, MinMax, ModelKind, PipelineConfig,
    TrainedModel,
};
use crate::preprocess::ScalerParams;
use crate::vae::{VaeArch, VaeModel};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThresholdMethod {
    NearestRankQuantile,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Threshold {
    pub value: f64,
    pub fpr_tolerance: f64,
    pub method: ThresholdMethod,
    pub calibration_size: usize,
}

impl Threshold {
    /// Strictly greater than the threshold is flagged.
    pub fn flags(&self, score: f64) -> bool {
        score > self.value
    }
}

/// Number of calibration scores allowed strictly above the threshold:
/// `floor(fpr * n)`, absorbing representation error just below an integer.
fn allowed_exceedances(fpr: f64, n: usize) -> usize {
    let prod = fpr * n as f64;
    let mut k = prod.floor();
    if prod - k > 1.0 - 1e-9 {
        k += 1.0;
    }
    (k as usize).min(n - 1)
}

/// Nearest-rank `(1 - fpr)` quantile of the training scores: the element at
/// 1-based rank `ceil((1 - fpr) * n)` of the ascending sort.
pub fn calibrate(training_scores: &[f64], fpr_tolerance: f64) -> Result<Threshold> {
    if training_scores.is_empty() {
        return Err(Error::invalid("cannot calibrate on zero scores"));
    }
    if !(0.0..1.0).contains(&fpr_tolerance) {
        return Err(Error::config(format!("fpr tolerance {fpr_tolerance} not in [0,1)")));
    }
    if training_scores.iter().any(|s| s.is_nan()) {
        return Err(Error::invalid("NaN calibration score"));
    }
    let mut sorted = training_scores.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let rank = n - allowed_exceedances(fpr_tolerance, n);
    Ok(Threshold {
        value: sorted[rank - 1],
        fpr_tolerance,
        method: ThresholdMethod::NearestRankQuantile,
        calibration_size: n,
    })
}

/// Thresholds calibrated on each of `k` leave-one-fold-out subsets of the
/// training scores (folds are contiguous blocks of the given order).
pub fn fold_thresholds(training_scores: &[f64], fpr_tolerance: f64, k: usize) -> Result<Vec<f64>> {
    let n = training_scores.len();
    if k < 2 || n < k {
        return Ok(Vec::new());
    }
    (0..k)
        .map(|f| {
            let (lo, hi) = (f * n / k, (f + 1) * n / k);
            let kept: Vec<f64> = training_scores[..lo].iter().chain(&training_scores[hi..]).copied().collect();
            calibrate(&kept, fpr_tolerance).map(|t| t.value)
        })
        .collect()
}

pub fn aggregate(window_scores: &[f64], method: Aggregation) -> Result<f64> {
    if window_scores.is_empty() {
        return Err(Error::invalid("cannot aggregate zero window scores"));
    }
    Ok(match method {
        Aggregation::Max => window_scores.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        Aggregation::Mean => window_scores.iter().sum::<f64>() / window_scores.len() as f64,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub sequence_id: String,
    /// `None` marks a sequence too short to yield a single window.
    pub score: Option<f64>,
    pub flagged: bool,
    pub true_label: Option<Label>,
}

impl Verdict {
    pub fn is_unscorable(&self) -> bool {
        self.score.is_none()
    }
}

/// A trained model plus its calibrated threshold, as persisted on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelBundle {
    pub model: TrainedModel,
    pub threshold: Option<Threshold>,
}

impl ModelBundle {
    pub fn kind(&self) -> ModelKind {
        self.model.kind()
    }

    /// Aggregated score per sequence (`None` when unscorable).
    pub fn sequence_scores(&self, dataset: &Dataset, aggregation: Aggregation) -> Result<Vec<Option<f64>>> {
        dataset
            .sequences
            .iter()
            .map(|s| match self.model.window_scores(s)? {
                Some(ws) => aggregate(&ws, aggregation).map(Some),
                None => Ok(None),
            })
            .collect()
    }
}

/// Scores every sequence with the bundle's recorded pipeline and compares the
/// aggregated score to `threshold`.
pub fn judge(bundle: &ModelBundle, dataset: &Dataset, threshold: &Threshold, aggregation: Aggregation) -> Result<Vec<Verdict>> {
    let scores = bundle.sequence_scores(dataset, aggregation)?;
    Ok(dataset
        .sequences
        .iter()
        .zip(scores)
        .map(|(s, score)| Verdict {
            sequence_id: s.id.clone(),
            flagged: score.is_some_and(|v| threshold.flags(v)),
            score,
            true_label: Some(s.label),
        })
        .collect())
}

// ---------------------------------------------------------------------------
// Bundle file format (all integers and floats little-endian):
//
//   magic       8 bytes   "GDBUNDLE"
//   version     u32
//   length      u64       payload byte count
//   payload     length bytes
//   digest      32 bytes  SHA-256 of payload
//
// The payload layout is written by `encode_payload` field by field; see
// docs/bundle-format.md for the full table.
// ---------------------------------------------------------------------------

pub const BUNDLE_MAGIC: &[u8; 8] = b"GDBUNDLE";
pub const BUNDLE_VERSION: u32 = 1;

struct Enc(Vec<u8>);

impl Enc {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn usize(&mut self, v: usize) {
        self.u64(v as u64);
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64s<'a>(&mut self, vs: impl ExactSizeIterator<Item = &'a f64>) {
        self.usize(vs.len());
        for v in vs {
            self.f64(*v);
        }
    }
    fn str(&mut self, s: &str) {
        self.usize(s.len());
        self.0.extend_from_slice(s.as_bytes());
    }
    fn activation(&mut self, a: Activation) {
        let (tag, p) = match a {
            Activation::Identity => (0, 0.0),
            Activation::Relu => (1, 0.0),
            Activation::LeakyRelu(alpha) => (2, alpha),
            Activation::Sigmoid => (3, 0.0),
            Activation::Tanh => (4, 0.0),
        };
        self.u8(tag);
        self.f64(p);
    }
    fn matrix(&mut self, m: &Array2<f64>) {
        self.usize(m.nrows());
        self.usize(m.ncols());
        for v in m.iter() {
            self.f64(*v);
        }
    }
    fn net(&mut self, net: &DenseNet) {
        self.usize(net.layers().len());
        for l in net.layers() {
            self.matrix(&l.weights);
            self.f64s(l.biases.iter());
            self.activation(l.activation);
            self.f64(l.l2_lambda);
            self.u8(l.dropout as u8);
        }
    }
}

struct Dec<'a> {
    buf: &'a [u8],
    pos: usize,
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::Bundle(msg.into())
}

impl<'a> Dec<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(corrupt("truncated payload"));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn usize(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| corrupt("size overflow"))
    }
    /// A length that must fit in the remaining bytes at `unit` bytes each.
    fn len(&mut self, unit: usize) -> Result<usize> {
        let n = self.usize()?;
        if n.checked_mul(unit).is_none_or(|b| b > self.buf.len() - self.pos) {
            return Err(corrupt("length exceeds payload"));
        }
        Ok(n)
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn bool(&mut self) -> Result<bool> {
        match self.u8()? {
            0 => Ok(false),
            1 => Ok(true),
            t => Err(corrupt(format!("bad flag {t}"))),
        }
    }
    fn f64s(&mut self) -> Result<Vec<f64>> {
        let n = self.len(8)?;
        (0..n).map(|_| self.f64()).collect()
    }
    fn str(&mut self) -> Result<String> {
        let n = self.len(1)?;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| corrupt("invalid utf-8"))
    }
    fn activation(&mut self) -> Result<Activation> {
        let tag = self.u8()?;
        let p = self.f64()?;
        Ok(match tag {
            0 => Activation::Identity,
            1 => Activation::Relu,
            2 => Activation::LeakyRelu(p),
            3 => Activation::Sigmoid,
            4 => Activation::Tanh,
            t => return Err(corrupt(format!("unknown activation tag {t}"))),
        })
    }
    fn matrix(&mut self) -> Result<Array2<f64>> {
        let r = self.usize()?;
        let c = self.usize()?;
        let n = r.checked_mul(c).ok_or_else(|| corrupt("matrix size overflow"))?;
        if n.checked_mul(8).is_none_or(|b| b > self.buf.len() - self.pos) {
            return Err(corrupt("matrix exceeds payload"));
        }
        let data = (0..n).map(|_| self.f64()).collect::<Result<Vec<_>>>()?;
        Array2::from_shape_vec((r, c), data).map_err(|e| corrupt(e.to_string()))
    }
    fn net(&mut self) -> Result<DenseNet> {
        let n = self.len(1)?;
        let mut layers = Vec::with_capacity(n);
        for _ in 0..n {
            let weights = self.matrix()?;
            let biases = ndarray::Array1::from(self.f64s()?);
            let activation = self.activation()?;
            let l2_lambda = self.f64()?;
            let dropout = self.bool()?;
            layers.push(DenseLayer {
                weights,
                biases,
                activation,
                l2_lambda,
                dropout,
            });
        }
        DenseNet::new(layers).map_err(|e| corrupt(e.to_string()))
    }
}

fn kind_tag(k: ModelKind) -> u8 {
    match k {
        ModelKind::Hmm => 0,
        ModelKind::Vae => 1,
        ModelKind::Gan => 2,
    }
}

fn encode_payload(b: &ModelBundle) -> Vec<u8> {
    let m = &b.model;
    let mut e = Enc(Vec::new());
    e.u8(kind_tag(m.kind()));
    e.u64(m.seed);
    e.usize(m.pipeline.window_size);
    e.usize(m.pipeline.stride);
    e.u8(match m.pipeline.feature_mode {
        FeatureMode::Stats => 0,
        FeatureMode::Raw => 1,
    });
    e.u8(match m.aggregation {
        Aggregation::Max => 0,
        Aggregation::Mean => 1,
    });
    match &m.transform.scaler {
        Some(s) => {
            e.u8(1);
            e.f64s(s.means.iter());
            e.f64s(s.stds.iter());
        }
        None => e.u8(0),
    }
    match &m.transform.minmax {
        Some(mm) => {
            e.u8(1);
            e.f64s(mm.lo.iter());
            e.f64s(mm.hi.iter());
        }
        None => e.u8(0),
    }
    match &b.threshold {
        Some(t) => {
            e.u8(1);
            e.f64(t.value);
            e.f64(t.fpr_tolerance);
            e.u8(0);
            e.usize(t.calibration_size);
        }
        None => e.u8(0),
    }
    e.str(&m.train_config);
    match &m.detector {
        Detector::Hmm { params, score } => {
            e.u8(match score {
                HmmScore::Reconstruction => 0,
                HmmScore::Nll => 1,
            });
            e.usize(params.n_states);
            e.f64s(params.pi.iter());
            e.matrix(&params.transitions);
            e.matrix(&params.means);
            e.matrix(&params.variances);
        }
        Detector::Vae(v) => {
            let a = &v.arch;
            for d in [a.input_dim, a.hidden1, a.hidden2, a.latent_dim] {
                e.usize(d);
            }
            e.f64(a.l2_lambda);
            e.f64(a.kl_weight);
            e.net(&v.encoder);
            e.net(&v.decoder);
        }
        Detector::Gan { model, score } => {
            let a = &model.arch;
            e.usize(a.input_dim);
            e.usize(a.noise_dim);
            e.f64(a.leaky_alpha);
            e.f64(a.dropout_rate);
            e.activation(a.output_activation);
            match *score {
                GanScore::Discriminator => e.u8(0),
                GanScore::Inversion { steps, lr, blend, seed } => {
                    e.u8(1);
                    e.usize(steps);
                    e.f64(lr);
                    e.f64(blend);
                    e.u64(seed);
                }
            }
            e.net(&model.generator);
            e.net(&model.discriminator);
        }
    }
    e.0
}

fn decode_payload(buf: &[u8]) -> Result<ModelBundle> {
    let mut d = Dec { buf, pos: 0 };
    let kind = d.u8()?;
    let seed = d.u64()?;
    let window_size = d.usize()?;
    let stride = d.usize()?;
    let feature_mode = match d.u8()? {
        0 => FeatureMode::Stats,
        1 => FeatureMode::Raw,
        t => return Err(corrupt(format!("unknown feature mode {t}"))),
    };
    let aggregation = match d.u8()? {
        0 => Aggregation::Max,
        1 => Aggregation::Mean,
        t => return Err(corrupt(format!("unknown aggregation {t}"))),
    };
    let scaler = if d.bool()? {
        Some(ScalerParams {
            means: d.f64s()?,
            stds: d.f64s()?,
        })
    } else {
        None
    };
    let minmax = if d.bool()? {
        Some(MinMax {
            lo: d.f64s()?,
            hi: d.f64s()?,
        })
    } else {
        None
    };
    let threshold = if d.bool()? {
        let value = d.f64()?;
        let fpr_tolerance = d.f64()?;
        if d.u8()? != 0 {
            return Err(corrupt("unknown threshold method"));
        }
        Some(Threshold {
            value,
            fpr_tolerance,
            method: ThresholdMethod::NearestRankQuantile,
            calibration_size: d.usize()?,
        })
    } else {
        None
    };
    let train_config = d.str()?;
    let detector = match kind {
        0 => {
            let score = match d.u8()? {
                0 => HmmScore::Reconstruction,
                1 => HmmScore::Nll,
                t => return Err(corrupt(format!("unknown hmm score {t}"))),
            };
            let params = HmmParams {
                n_states: d.usize()?,
                pi: d.f64s()?,
                transitions: d.matrix()?,
                means: d.matrix()?,
                variances: d.matrix()?,
            };
            params.validate().map_err(|e| corrupt(e.to_string()))?;
            Detector::Hmm { params, score }
        }
        1 => {
            let arch = VaeArch {
                input_dim: d.usize()?,
                hidden1: d.usize()?,
                hidden2: d.usize()?,
                latent_dim: d.usize()?,
                l2_lambda: d.f64()?,
                kl_weight: d.f64()?,
            };
            let encoder = d.net()?;
            let decoder = d.net()?;
            if encoder.in_dim() != arch.input_dim
                || encoder.out_dim() != 2 * arch.latent_dim
                || decoder.in_dim() != arch.latent_dim
                || decoder.out_dim() != arch.input_dim
            {
                return Err(corrupt("VAE network shapes disagree with architecture"));
            }
            Detector::Vae(VaeModel { arch, encoder, decoder })
        }
        2 => {
            let arch = GanArch {
                input_dim: d.usize()?,
                noise_dim: d.usize()?,
                leaky_alpha: d.f64()?,
                dropout_rate: d.f64()?,
                output_activation: d.activation()?,
            };
            let score = match d.u8()? {
                0 => GanScore::Discriminator,
                1 => GanScore::Inversion {
                    steps: d.usize()?,
                    lr: d.f64()?,
                    blend: d.f64()?,
                    seed: d.u64()?,
                },
                t => return Err(corrupt(format!("unknown gan score {t}"))),
            };
            let generator = d.net()?;
            let discriminator = d.net()?;
            if generator.in_dim() != arch.noise_dim
                || generator.out_dim() != arch.input_dim
                || discriminator.in_dim() != arch.input_dim
                || discriminator.out_dim() != 1
            {
                return Err(corrupt("GAN network shapes disagree with architecture"));
            }
            Detector::Gan {
                model: GanModel {
                    arch,
                    generator,
                    discriminator,
                },
                score,
            }
        }
        t => return Err(corrupt(format!("unknown model kind {t}"))),
    };
    if d.pos != buf.len() {
        return Err(corrupt("trailing bytes after payload"));
    }
    let pipeline = PipelineConfig {
        window_size,
        stride,
        feature_mode,
    };
    pipeline.validate().map_err(|e| corrupt(e.to_string()))?;
    Ok(ModelBundle {
        model: TrainedModel {
            pipeline,
            aggregation,
            transform: InputTransform { scaler, minmax },
            detector,
            seed,
            train_config,
        },
        threshold,
    })
}

pub fn save_bundle(bundle: &ModelBundle) -> Vec<u8> {
    let payload = encode_payload(bundle);
    let mut out = Vec::with_capacity(payload.len() + 52);
    out.extend_from_slice(BUNDLE_MAGIC);
    out.extend_from_slice(&BUNDLE_VERSION.to_le_bytes());
    out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
    out.extend_from_slice(&payload);
    out.extend_from_slice(&Sha256::digest(&payload));
    out
}

pub fn load_bundle(bytes: &[u8]) -> Result<ModelBundle> {
    if bytes.len() < 20 {
        return Err(corrupt("truncated header"));
    }
    if &bytes[..8] != BUNDLE_MAGIC {
        return Err(corrupt("not a model bundle"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != BUNDLE_VERSION {
        return Err(corrupt(format!(
            "unsupported bundle version {version} (expected {BUNDLE_VERSION})"
        )));
    }
    let len = u64::from_le_bytes(bytes[12..20].try_into().unwrap());
    let len = usize::try_from(len).map_err(|_| corrupt("payload too large"))?;
    let body = &bytes[20..];
    if body.len() < 32 || body.len() - 32 < len {
        return Err(corrupt("truncated payload"));
    }
    if body.len() - 32 > len {
        return Err(corrupt("trailing bytes after digest"));
    }
    let (payload, digest) = body.split_at(len);
    if Sha256::digest(payload).as_slice() != digest {
        return Err(corrupt("digest mismatch"));
    }
    decode_payload(payload)
}

pub fn write_bundle<W: Write>(bundle: &ModelBundle, mut w: W) -> Result<()> {
    w.write_all(&save_bundle(bundle))?;
    Ok(())
}

pub fn read_bundle<R: Read>(mut r: R) -> Result<ModelBundle> {
    let mut buf = Vec::new();
    r.read_to_end(&mut buf)?;
    load_bundle(&buf)
}
