//! Dense GAN on flattened windows.
//!
//! Generator: `noise -> 256 -> 512 -> input`, LeakyReLU hidden layers.
//! Discriminator: `input -> 512 -> 256 -> 1`, LeakyReLU hidden layers with
//! dropout, sigmoid output. Training alternates one discriminator step and
//! one non-saturating generator step per batch, each with its own Adam state.

use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::engine::{loss, Activation, AdamConfig, AdamState, DenseNet, Mode, RngStream};
use crate::error::{Error, Result};

pub const GEN_HIDDEN: [usize; 2] = [256, 512];
pub const DISC_HIDDEN: [usize; 2] = [512, 256];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GanArch {
    pub input_dim: usize,
    pub noise_dim: usize,
    pub leaky_alpha: f64,
    pub dropout_rate: f64,
    /// Sigmoid for `[0, 1]`-scaled inputs, tanh for `[-1, 1]`.
    pub output_activation: Activation,
}

impl GanArch {
    pub fn new(input_dim: usize) -> Self {
        Self {
            input_dim,
            noise_dim: 64,
            leaky_alpha: 0.2,
            dropout_rate: 0.4,
            output_activation: Activation::Sigmoid,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GanTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub seed: u64,
}

impl Default for GanTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 300,
            batch_size: 64,
            learning_rate: 0.0002,
            beta1: 0.5,
            beta2: 0.999,
            seed: 0,
        }
    }
}

impl GanTrainConfig {
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
pub struct GanModel {
    pub arch: GanArch,
    pub generator: DenseNet,
    pub discriminator: DenseNet,
}

/// Discriminator outputs and loss for the very first training batch.
#[derive(Debug, Clone, PartialEq)]
pub struct FirstBatchLog {
    pub d_real: Vec<f64>,
    pub d_fake: Vec<f64>,
    pub d_loss: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GanHistory {
    pub discriminator_loss: Vec<f64>,
    pub generator_loss: Vec<f64>,
    pub first_batch: Option<FirstBatchLog>,
}

impl GanModel {
    pub fn new(arch: GanArch, seed: u64) -> Result<Self> {
        if arch.input_dim == 0 || arch.noise_dim == 0 {
            return Err(Error::config("GAN dimensions must be at least 1"));
        }
        if !(0.0..1.0).contains(&arch.dropout_rate) {
            return Err(Error::config("dropout rate must lie in [0, 1)"));
        }
        let leaky = Activation::LeakyRelu(arch.leaky_alpha);
        let mut rng = RngStream::derive(seed, 0x6a4);
        let generator = DenseNet::build(
            &[arch.noise_dim, GEN_HIDDEN[0], GEN_HIDDEN[1], arch.input_dim],
            &[leaky, leaky, arch.output_activation],
            &mut rng,
        )?;
        let mut discriminator = DenseNet::build(
            &[arch.input_dim, DISC_HIDDEN[0], DISC_HIDDEN[1], 1],
            &[leaky, leaky, Activation::Sigmoid],
            &mut rng,
        )?;
        for k in 0..2 {
            discriminator.layer_mut(k).dropout = true;
        }
        Ok(Self {
            arch,
            generator,
            discriminator,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.arch.input_dim
    }

    pub fn sample_noise(&self, n: usize, rng: &mut RngStream) -> Array2<f64> {
        Array2::from_shape_simple_fn((n, self.arch.noise_dim), || rng.normal())
    }

    /// One discriminator update on `real` vs `fake` (both labeled batches),
    /// dropout active. Returns the loss and the discriminator outputs.
    pub fn discriminator_step(
        &mut self,
        real: &Array2<f64>,
        fake: &Array2<f64>,
        opt: &mut AdamState,
        rng: &mut RngStream,
    ) -> Result<(f64, Vec<f64>, Vec<f64>)> {
        let (n_real, n_fake) = (real.nrows(), fake.nrows());
        let both = ndarray::concatenate(Axis(0), &[real.view(), fake.view()])
            .map_err(|e| Error::invalid(e.to_string()))?;
        let mut target = Array2::zeros((n_real + n_fake, 1));
        target.slice_mut(ndarray::s![..n_real, ..]).fill(1.0);
        let (pred, tape) = self
            .discriminator
            .forward(&both, Mode::Train, self.arch.dropout_rate, rng)?;
        let loss = loss::bce(&pred, &target)? + self.discriminator.l2_penalty();
        let g = loss::bce_grad(&pred, &target)?;
        let (grads, _) = self.discriminator.backward(&tape, &g)?;
        opt.step_net(&mut self.discriminator, &grads)?;
        let p = pred.column(0).to_vec();
        Ok((loss, p[..n_real].to_vec(), p[n_real..].to_vec()))
    }

    /// One generator update pushing `D(G(noise))` toward 1. The discriminator
    /// is only read.
    pub fn generator_step(&mut self, noise: &Array2<f64>, opt: &mut AdamState, rng: &mut RngStream) -> Result<f64> {
        let (fake, g_tape) = self.generator.forward(noise, Mode::Train, 0.0, rng)?;
        let (pred, d_tape) = self
            .discriminator
            .forward(&fake, Mode::Train, self.arch.dropout_rate, rng)?;
        let target = Array2::ones(pred.raw_dim());
        let loss = loss::bce(&pred, &target)? + self.generator.l2_penalty();
        let g = loss::bce_grad(&pred, &target)?;
        let (_, g_fake) = self.discriminator.backward(&d_tape, &g)?;
        let (grads, _) = self.generator.backward(&g_tape, &g_fake)?;
        opt.step_net(&mut self.generator, &grads)?;
        Ok(loss)
    }

    pub fn train(&mut self, windows: &Array2<f64>, config: &GanTrainConfig) -> Result<GanHistory> {
        config.validate()?;
        if windows.ncols() != self.arch.input_dim {
            return Err(Error::DimensionMismatch {
                expected: self.arch.input_dim,
                got: windows.ncols(),
            });
        }
        let n = windows.nrows();
        if n < config.batch_size {
            return Err(Error::invalid(format!(
                "{n} training windows is fewer than the batch size {}",
                config.batch_size
            )));
        }
        let adam = AdamConfig::new(config.learning_rate, config.beta1, config.beta2);
        let mut d_opt = AdamState::for_net(adam, &self.discriminator);
        let mut g_opt = AdamState::for_net(adam, &self.generator);
        let mut shuffle_rng = RngStream::derive(config.seed, 11);
        let mut noise_rng = RngStream::derive(config.seed, 12);
        let mut dropout_rng = RngStream::derive(config.seed, 13);

        let mut history = GanHistory {
            discriminator_loss: Vec::with_capacity(config.epochs),
            generator_loss: Vec::with_capacity(config.epochs),
            first_batch: None,
        };
        for _ in 0..config.epochs {
            let order = shuffle_rng.permutation(n);
            let (mut d_total, mut g_total, mut batches) = (0.0, 0.0, 0usize);
            for chunk in order.chunks(config.batch_size) {
                let real = windows.select(Axis(0), chunk);
                let noise = self.sample_noise(chunk.len(), &mut noise_rng);
                let fake = self.generator.predict(&noise)?;
                let (d_loss, d_real, d_fake) = self.discriminator_step(&real, &fake, &mut d_opt, &mut dropout_rng)?;
                if history.first_batch.is_none() {
                    history.first_batch = Some(FirstBatchLog { d_real, d_fake, d_loss });
                }
                let noise = self.sample_noise(chunk.len(), &mut noise_rng);
                let g_loss = self.generator_step(&noise, &mut g_opt, &mut dropout_rng)?;
                d_total += d_loss;
                g_total += g_loss;
                batches += 1;
            }
            let (d, g) = (d_total / batches as f64, g_total / batches as f64);
            if !(d.is_finite() && g.is_finite()) {
                return Err(Error::invalid("GAN training diverged"));
            }
            history.discriminator_loss.push(d);
            history.generator_loss.push(g);
        }
        Ok(history)
    }

    /// Eval-mode discriminator probability that each row is real.
    pub fn discriminate(&self, windows: &Array2<f64>) -> Result<Vec<f64>> {
        Ok(self.discriminator.predict(windows)?.column(0).to_vec())
    }

    /// `1 - D(x)` with dropout off; higher is more anomalous.
    pub fn score_discriminator(&self, windows: &Array2<f64>) -> Result<Vec<f64>> {
        Ok(self.discriminate(windows)?.into_iter().map(|d| 1.0 - d).collect())
    }

    /// Reconstruction error of the best latent code found by `n_steps` of
    /// gradient descent from a seeded start, optionally blended with the
    /// discriminator score: `(1 - blend) * mse + blend * (1 - D(x))`.
    pub fn score_inversion(&self, window: &[f64], n_steps: usize, lr: f64, seed: u64, blend: f64) -> Result<f64> {
        let mut rng = RngStream::new(seed);
        let z0: Vec<f64> = (0..self.arch.noise_dim).map(|_| rng.normal()).collect();
        let trace = self.invert_from(window, &z0, n_steps, lr)?;
        let mse = *trace.last().expect("at least one entry");
        if blend == 0.0 {
            return Ok(mse);
        }
        let x = Array2::from_shape_vec((1, window.len()), window.to_vec()).map_err(|e| Error::invalid(e.to_string()))?;
        let d = self.score_discriminator(&x)?[0];
        Ok((1.0 - blend) * mse + blend * d)
    }

    /// Latent descent from `z_init`. Returns the reconstruction error before
    /// the first step followed by the error after each step. Steps that would
    /// increase the error are rejected and the step size halved, so the trace
    /// never increases.
    pub fn invert_from(&self, window: &[f64], z_init: &[f64], n_steps: usize, lr: f64) -> Result<Vec<f64>> {
        if n_steps < 1 {
            return Err(Error::config("inversion needs at least one step"));
        }
        if window.len() != self.arch.input_dim {
            return Err(Error::DimensionMismatch {
                expected: self.arch.input_dim,
                got: window.len(),
            });
        }
        if z_init.len() != self.arch.noise_dim {
            return Err(Error::DimensionMismatch {
                expected: self.arch.noise_dim,
                got: z_init.len(),
            });
        }
        let target = Array2::from_shape_vec((1, window.len()), window.to_vec())
            .map_err(|e| Error::invalid(e.to_string()))?;
        let mut z = Array2::from_shape_vec((1, z_init.len()), z_init.to_vec())
            .map_err(|e| Error::invalid(e.to_string()))?;
        let mut unused = RngStream::new(0);
        let eval = |z: &Array2<f64>| -> Result<f64> { loss::mse(&target, &self.generator.predict(z)?) };

        let mut current = eval(&z)?;
        let mut trace = Vec::with_capacity(n_steps + 1);
        trace.push(current);
        let mut step = lr;
        for _ in 0..n_steps {
            let (out, tape) = self.generator.forward(&z, Mode::Eval, 0.0, &mut unused)?;
            let g_out = loss::mse_grad(&target, &out)?;
            let (_, g_z) = self.generator.backward(&tape, &g_out)?;
            let candidate = &z - &(&g_z * step);
            let value = eval(&candidate)?;
            if value <= current {
                z = candidate;
                current = value;
            } else {
                step *= 0.5;
            }
            trace.push(current);
        }
        Ok(trace)
    }
}
