//! Padding, windowing, per-window statistics, the normal-only train/test
//! split and standard scaling.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::engine::RngStream;
use crate::error::{Error, Result};
use crate::ingest::{Dataset, Label, RawSequence};

/// Fixed-length slice of a parent sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct Window {
    pub parent_id: String,
    pub start_index: usize,
    pub values: Vec<f64>,
}

/// Four summary statistics of a window.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector {
    pub mean: f64,
    pub median: f64,
    pub skewness: f64,
    pub kurtosis: f64,
}

impl FeatureVector {
    pub const DIM: usize = 4;

    pub fn to_array(self) -> [f64; 4] {
        [self.mean, self.median, self.skewness, self.kurtosis]
    }

    pub fn from_slice(v: &[f64]) -> Result<Self> {
        match v {
            &[mean, median, skewness, kurtosis] => Ok(Self {
                mean,
                median,
                skewness,
                kurtosis,
            }),
            _ => Err(Error::DimensionMismatch {
                expected: 4,
                got: v.len(),
            }),
        }
    }
}

/// Per-column population mean and standard deviation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalerParams {
    pub means: Vec<f64>,
    pub stds: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SplitResult {
    pub train: Dataset,
    pub test: Dataset,
    pub split_ratio: f64,
    pub seed: u64,
}

/// Left-pads every sequence with zeros to the longest length in the dataset.
pub fn pad_to_max(dataset: &Dataset) -> Result<Dataset> {
    let max_len = dataset
        .sequences
        .iter()
        .map(RawSequence::len)
        .max()
        .ok_or_else(|| Error::invalid("cannot pad an empty dataset"))?;
    let sequences = dataset
        .sequences
        .iter()
        .map(|s| {
            let pad = max_len - s.len();
            let mut samples = vec![0.0; pad];
            samples.extend_from_slice(&s.samples);
            RawSequence::new(s.id.clone(), samples, s.label, s.anomaly_at_ms.map(|a| a + pad))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        sequences,
        source_name: dataset.source_name.clone(),
    })
}

/// Number of full windows: `floor((n - w) / stride) + 1` for `n >= w`, else 0.
pub fn window_count(n: usize, window_size: usize, stride: usize) -> usize {
    if n < window_size || stride == 0 {
        0
    } else {
        (n - window_size) / stride + 1
    }
}

/// Slices a sequence into full windows starting at `0, stride, 2*stride, ...`.
/// Trailing samples that do not fill a window are dropped.
pub fn window(sequence: &RawSequence, window_size: usize, stride: usize) -> Result<Vec<Window>> {
    check_window_params(window_size, stride)?;
    let count = window_count(sequence.len(), window_size, stride);
    Ok((0..count)
        .map(|k| {
            let start = k * stride;
            Window {
                parent_id: sequence.id.clone(),
                start_index: start,
                values: sequence.samples[start..start + window_size].to_vec(),
            }
        })
        .collect())
}

pub fn check_window_params(window_size: usize, stride: usize) -> Result<()> {
    if window_size < 2 {
        return Err(Error::config(format!("window size {window_size} must be at least 2")));
    }
    if stride < 1 {
        return Err(Error::config("stride must be at least 1"));
    }
    Ok(())
}

/// Mean, median, skewness `m3 / m2^1.5` and kurtosis `m4 / m2^2` using
/// population central moments. A constant window has skewness and kurtosis 0.
pub fn extract_features(values: &[f64]) -> FeatureVector {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let (mut m2, mut m3, mut m4) = (0.0, 0.0, 0.0);
    for &x in values {
        let d = x - mean;
        let d2 = d * d;
        m2 += d2;
        m3 += d2 * d;
        m4 += d2 * d2;
    }
    m2 /= n;
    m3 /= n;
    m4 /= n;
    let (skewness, kurtosis) = if m2 > 0.0 {
        (m3 / m2.powf(1.5), m4 / (m2 * m2))
    } else {
        (0.0, 0.0)
    };
    FeatureVector {
        mean,
        median: median(values),
        skewness,
        kurtosis,
    }
}

fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Sends `floor(ratio * #normal)` seeded-shuffled normal sequences to train;
/// the remaining normals and every anomalous sequence go to test.
pub fn split(dataset: &Dataset, ratio: f64, seed: u64) -> Result<SplitResult> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::config(format!("split ratio {ratio} not in (0,1)")));
    }
    let normals: Vec<&RawSequence> = dataset
        .sequences
        .iter()
        .filter(|s| s.label == Label::Normal)
        .collect();
    if normals.is_empty() {
        return Err(Error::invalid("cannot form training set: no normal sequences"));
    }
    let mut rng = RngStream::new(seed);
    let perm = rng.permutation(normals.len());
    let n_train = (ratio * normals.len() as f64).floor() as usize;

    let train: Vec<RawSequence> = perm[..n_train].iter().map(|&i| normals[i].clone()).collect();
    let mut test: Vec<RawSequence> = perm[n_train..].iter().map(|&i| normals[i].clone()).collect();
    test.extend(
        dataset
            .sequences
            .iter()
            .filter(|s| s.label == Label::Anomalous)
            .cloned(),
    );
    Ok(SplitResult {
        train: Dataset {
            sequences: train,
            source_name: format!("{}-train", dataset.source_name),
        },
        test: Dataset {
            sequences: test,
            source_name: format!("{}-test", dataset.source_name),
        },
        split_ratio: ratio,
        seed,
    })
}

impl ScalerParams {
    /// Fits on the rows of `data`.
    pub fn fit_rows(data: &Array2<f64>) -> Result<Self> {
        if data.nrows() == 0 {
            return Err(Error::invalid("cannot fit a scaler on zero rows"));
        }
        let n = data.nrows() as f64;
        let means: Vec<f64> = data.columns().into_iter().map(|c| c.sum() / n).collect();
        let stds = data
            .columns()
            .into_iter()
            .zip(&means)
            .map(|(c, m)| (c.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n).sqrt())
            .collect();
        Ok(Self { means, stds })
    }

    pub fn dim(&self) -> usize {
        self.means.len()
    }

    /// `(x - mean) / std` per column; zero-std columns map to 0.
    pub fn transform_rows(&self, data: &Array2<f64>) -> Result<Array2<f64>> {
        if data.ncols() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                got: data.ncols(),
            });
        }
        let mut out = data.clone();
        for (j, mut col) in out.columns_mut().into_iter().enumerate() {
            let (m, s) = (self.means[j], self.stds[j]);
            if s > 0.0 {
                col.mapv_inplace(|x| (x - m) / s);
            } else {
                col.fill(0.0);
            }
        }
        Ok(out)
    }
}

pub fn features_to_rows(features: &[FeatureVector]) -> Array2<f64> {
    Array2::from_shape_fn((features.len(), FeatureVector::DIM), |(i, j)| features[i].to_array()[j])
}

pub fn fit_scaler(features: &[FeatureVector]) -> Result<ScalerParams> {
    ScalerParams::fit_rows(&features_to_rows(features))
}

pub fn transform(scaler: &ScalerParams, features: &[FeatureVector]) -> Result<Vec<FeatureVector>> {
    let rows = scaler.transform_rows(&features_to_rows(features))?;
    rows.rows()
        .into_iter()
        .map(|r| FeatureVector::from_slice(r.as_slice().expect("standard layout")))
        .collect()
}
