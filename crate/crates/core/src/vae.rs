//! Fully-connected variational autoencoder scored by reconstruction error.
//!
//! Encoder: `input -> h1 (relu) -> h2 (relu) -> [mu | log_var]` (linear head).
//! Decoder: `latent -> h2 (relu) -> input (sigmoid)`. The four hidden/output
//! layers carry L2 weight decay; the head does not.

use ndarray::{s, Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::engine::{loss, Activation, AdamConfig, AdamState, DenseNet, Gradients, Mode, RngStream, Tape};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VaeArch {
    pub input_dim: usize,
    pub hidden1: usize,
    pub hidden2: usize,
    pub latent_dim: usize,
    pub l2_lambda: f64,
    pub kl_weight: f64,
}

impl VaeArch {
    /// Defaults for raw windows of `input_dim` samples.
    pub fn for_raw(input_dim: usize) -> Self {
        Self {
            input_dim,
            hidden1: 128,
            hidden2: 64,
            latent_dim: 16,
            l2_lambda: 1e-4,
            kl_weight: 1.0,
        }
    }

    /// Defaults for the 4-statistic feature pipeline.
    pub fn for_features(input_dim: usize) -> Self {
        Self {
            input_dim,
            hidden1: 16,
            hidden2: 8,
            latent_dim: 4,
            l2_lambda: 1e-4,
            kl_weight: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VaeTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    /// Reject training inputs outside `[0, 1]`.
    pub strict: bool,
}

impl Default for VaeTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 300,
            batch_size: 32,
            learning_rate: 0.001,
            seed: 0,
            strict: true,
        }
    }
}

impl VaeTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs < 1 {
            return Err(Error::config("epochs must be at least 1"));
        }
        if self.batch_size < 1 {
            return Err(Error::config("batch size must be at least 1"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("learning rate must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VaeModel {
    pub arch: VaeArch,
    pub encoder: DenseNet,
    pub decoder: DenseNet,
}

/// Everything needed to differentiate one ELBO evaluation.
#[derive(Debug, Clone)]
pub struct ElboPass {
    pub loss: f64,
    pub reconstruction: f64,
    pub kl: f64,
    input: Array2<f64>,
    output: Array2<f64>,
    mu: Array2<f64>,
    log_var: Array2<f64>,
    eps: Array2<f64>,
    enc_tape: Tape,
    dec_tape: Tape,
}

/// `0.5 * sum_j (mu_j^2 + exp(log_var_j) - 1 - log_var_j)`.
pub fn kl_divergence(mu: &[f64], log_var: &[f64]) -> Result<f64> {
    if mu.len() != log_var.len() {
        return Err(Error::DimensionMismatch {
            expected: mu.len(),
            got: log_var.len(),
        });
    }
    Ok(0.5
        * mu.iter()
            .zip(log_var)
            .map(|(m, lv)| m * m + lv.exp() - 1.0 - lv)
            .sum::<f64>())
}

impl VaeModel {
    pub fn new(arch: VaeArch, seed: u64) -> Result<Self> {
        let VaeArch {
            input_dim,
            hidden1,
            hidden2,
            latent_dim,
            l2_lambda,
            ..
        } = arch;
        if [input_dim, hidden1, hidden2, latent_dim].contains(&0) {
            return Err(Error::config("VAE dimensions must be at least 1"));
        }
        let mut rng = RngStream::derive(seed, 0x7ae);
        let mut encoder = DenseNet::build(
            &[input_dim, hidden1, hidden2, 2 * latent_dim],
            &[Activation::Relu, Activation::Relu, Activation::Identity],
            &mut rng,
        )?;
        let mut decoder = DenseNet::build(
            &[latent_dim, hidden2, input_dim],
            &[Activation::Relu, Activation::Sigmoid],
            &mut rng,
        )?;
        for k in 0..2 {
            encoder.layer_mut(k).l2_lambda = l2_lambda;
            decoder.layer_mut(k).l2_lambda = l2_lambda;
        }
        Ok(Self { arch, encoder, decoder })
    }

    pub fn input_dim(&self) -> usize {
        self.arch.input_dim
    }

    fn split_head(&self, head: &Array2<f64>) -> (Array2<f64>, Array2<f64>) {
        let l = self.arch.latent_dim;
        (head.slice(s![.., ..l]).to_owned(), head.slice(s![.., l..]).to_owned())
    }

    /// ELBO with caller-supplied reparameterization noise `eps` (`batch x latent`).
    pub fn elbo_with_noise(&self, input: &Array2<f64>, eps: &Array2<f64>) -> Result<ElboPass> {
        if eps.dim() != (input.nrows(), self.arch.latent_dim) {
            return Err(Error::DimensionMismatch {
                expected: self.arch.latent_dim,
                got: eps.ncols(),
            });
        }
        let mut unused = RngStream::new(0);
        let (head, enc_tape) = self.encoder.forward(input, Mode::Train, 0.0, &mut unused)?;
        let (mu, log_var) = self.split_head(&head);
        let z = &mu + &(log_var.mapv(|lv| (0.5 * lv).exp()) * eps);
        let (output, dec_tape) = self.decoder.forward(&z, Mode::Train, 0.0, &mut unused)?;

        let reconstruction = loss::mse(input, &output)?;
        let batch = input.nrows() as f64;
        let mut kl = 0.0;
        for (m, lv) in mu.rows().into_iter().zip(log_var.rows()) {
            kl += kl_divergence(m.as_slice().unwrap(), lv.as_slice().unwrap())?;
        }
        kl /= batch;
        let loss =
            reconstruction + self.arch.kl_weight * kl + self.encoder.l2_penalty() + self.decoder.l2_penalty();
        Ok(ElboPass {
            loss,
            reconstruction,
            kl,
            input: input.clone(),
            output,
            mu,
            log_var,
            eps: eps.clone(),
            enc_tape,
            dec_tape,
        })
    }

    /// ELBO with noise drawn from `rng` (one standard normal per latent unit).
    pub fn elbo_loss(&self, input: &Array2<f64>, rng: &mut RngStream) -> Result<ElboPass> {
        if input.ncols() != self.arch.input_dim {
            return Err(Error::DimensionMismatch {
                expected: self.arch.input_dim,
                got: input.ncols(),
            });
        }
        let eps = Array2::from_shape_simple_fn((input.nrows(), self.arch.latent_dim), || rng.normal());
        self.elbo_with_noise(input, &eps)
    }

    /// Exact gradients of `pass.loss` for (encoder, decoder).
    pub fn elbo_backward(&self, pass: &ElboPass) -> Result<(Gradients, Gradients)> {
        let batch = pass.input.nrows() as f64;
        let w = self.arch.kl_weight;
        let g_out = loss::mse_grad(&pass.input, &pass.output)?;
        let (dec_grads, g_z) = self.decoder.backward(&pass.dec_tape, &g_out)?;

        let sigma = pass.log_var.mapv(|lv| (0.5 * lv).exp());
        let g_mu = &g_z + &(&pass.mu * (w / batch));
        let g_lv = &g_z * &pass.eps * &sigma * 0.5 + pass.log_var.mapv(|lv| 0.5 * w * (lv.exp() - 1.0) / batch);
        let g_head = ndarray::concatenate(Axis(1), &[g_mu.view(), g_lv.view()])
            .map_err(|e| Error::invalid(e.to_string()))?;
        let (enc_grads, _) = self.encoder.backward(&pass.enc_tape, &g_head)?;
        Ok((enc_grads, dec_grads))
    }

    /// Latent means for each row.
    pub fn encode_mean(&self, input: &Array2<f64>) -> Result<Array2<f64>> {
        let head = self.encoder.predict(input)?;
        Ok(self.split_head(&head).0)
    }

    /// Deterministic reconstruction through the latent mean.
    pub fn reconstruct(&self, input: &Array2<f64>) -> Result<Array2<f64>> {
        if input.ncols() != self.arch.input_dim {
            return Err(Error::DimensionMismatch {
                expected: self.arch.input_dim,
                got: input.ncols(),
            });
        }
        self.decoder.predict(&self.encode_mean(input)?)
    }

    /// Per-row reconstruction MSE using the latent mean (no sampling).
    pub fn score(&self, windows: &Array2<f64>) -> Result<Vec<f64>> {
        let recon = self.reconstruct(windows)?;
        loss::mse_rows(windows, &recon)
    }

    /// Mini-batch Adam over seeded shuffles. Returns the epoch-mean loss history.
    pub fn train(&mut self, windows: &Array2<f64>, config: &VaeTrainConfig) -> Result<Vec<f64>> {
        config.validate()?;
        if windows.nrows() == 0 {
            return Err(Error::invalid("no training windows"));
        }
        if windows.ncols() != self.arch.input_dim {
            return Err(Error::DimensionMismatch {
                expected: self.arch.input_dim,
                got: windows.ncols(),
            });
        }
        if config.strict && windows.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            return Err(Error::invalid("VAE inputs must be scaled to [0, 1]"));
        }
        let adam = AdamConfig::new(config.learning_rate, 0.9, 0.999);
        let mut enc_opt = AdamState::for_net(adam, &self.encoder);
        let mut dec_opt = AdamState::for_net(adam, &self.decoder);
        let mut shuffle_rng = RngStream::derive(config.seed, 1);
        let mut noise_rng = RngStream::derive(config.seed, 2);
        let n = windows.nrows();
        let mut history = Vec::with_capacity(config.epochs);

        for _ in 0..config.epochs {
            let order = shuffle_rng.permutation(n);
            let mut total = 0.0;
            for chunk in order.chunks(config.batch_size) {
                let batch = windows.select(Axis(0), chunk);
                let pass = self.elbo_loss(&batch, &mut noise_rng)?;
                let (ge, gd) = self.elbo_backward(&pass)?;
                enc_opt.step_net(&mut self.encoder, &ge)?;
                dec_opt.step_net(&mut self.decoder, &gd)?;
                total += pass.loss * chunk.len() as f64;
            }
            let mean = total / n as f64;
            if !mean.is_finite() {
                return Err(Error::invalid("VAE training diverged"));
            }
            history.push(mean);
        }
        Ok(history)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kl_closed_forms() {
        assert_eq!(kl_divergence(&[0.0], &[0.0]).unwrap(), 0.0);
        assert_eq!(kl_divergence(&[1.0], &[0.0]).unwrap(), 0.5);
        let v = kl_divergence(&[0.5], &[0.25f64.ln()]).unwrap();
        let expected = 0.5 * (0.25 + 0.25 - 1.0 - 0.25f64.ln());
        assert!((v - expected).abs() < 1e-15);
        assert!((v - 0.4431).abs() < 1e-4);
        assert!(kl_divergence(&[0.0, 1.0], &[0.0]).is_err());
    }

    #[test]
    fn epochs_zero_rejected() {
        let mut m = VaeModel::new(VaeArch::for_features(4), 0).unwrap();
        let cfg = VaeTrainConfig {
            epochs: 0,
            ..Default::default()
        };
        assert!(m.train(&Array2::from_elem((3, 4), 0.5), &cfg).is_err());
    }

    #[test]
    fn strict_mode_rejects_unscaled_input() {
        let mut m = VaeModel::new(VaeArch::for_features(4), 0).unwrap();
        let cfg = VaeTrainConfig {
            epochs: 1,
            ..Default::default()
        };
        assert!(m.train(&Array2::from_elem((3, 4), 1.5), &cfg).is_err());
        assert!(m.train(&Array2::zeros((0, 4)), &cfg).is_err());
    }

    #[test]
    fn decoder_output_in_unit_interval_and_scores_nonnegative() {
        let m = VaeModel::new(VaeArch::for_features(4), 3).unwrap();
        let x = Array2::from_shape_fn((5, 4), |(i, j)| ((i * 4 + j) as f64 * 0.37).sin() * 0.5 + 0.5);
        let r = m.reconstruct(&x).unwrap();
        assert!(r.iter().all(|&v| v > 0.0 && v < 1.0));
        let s1 = m.score(&x).unwrap();
        let s2 = m.score(&x).unwrap();
        assert_eq!(s1, s2);
        assert!(s1.iter().all(|&s| s >= 0.0));
        assert!(m.score(&Array2::zeros((1, 3))).is_err());
    }

    #[test]
    fn kl_term_is_nonnegative() {
        let m = VaeModel::new(VaeArch::for_features(4), 1).unwrap();
        let mut rng = RngStream::new(8);
        let x = Array2::from_shape_simple_fn((6, 4), || rng.uniform());
        let pass = m.elbo_loss(&x, &mut rng).unwrap();
        assert!(pass.kl >= 0.0);
        assert!(pass.loss >= pass.reconstruction);
    }
}
