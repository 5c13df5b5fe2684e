//! Gaussian-emission hidden Markov model with diagonal covariances.
//!
//! Forward-backward uses normalized alphas: emission likelihoods at each step
//! are shifted by their maximum log-density before exponentiation, and the
//! per-step normalizers `c_t` carry the likelihood, so
//! `log P(x) = sum_t (ln c_t + shift_t)`.

use std::f64::consts::PI;

use ndarray::{Array1, Array2, ArrayView1, Axis};
use serde::{Deserialize, Serialize};

use crate::engine::RngStream;
use crate::error::{Error, Result};

pub const VARIANCE_FLOOR: f64 = 1e-6;
/// Transition and initial probabilities never drop below this, so a path
/// into any state stays representable after underflow.
const PROB_FLOOR: f64 = 1e-300;
const KMEANS_ROUNDS: usize = 10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HmmParams {
    pub n_states: usize,
    pub pi: Vec<f64>,
    /// Row-stochastic `n_states x n_states`.
    pub transitions: Array2<f64>,
    /// `n_states x dim`
    pub means: Array2<f64>,
    /// `n_states x dim`
    pub variances: Array2<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HmmPosterior {
    /// `T x n_states`; row `t` is `P(state_t = i | x)`.
    pub gamma: Array2<f64>,
    pub log_likelihood: f64,
}

#[derive(Debug, Clone)]
pub struct HmmFit {
    pub params: HmmParams,
    /// Total log-likelihood evaluated at the start of every EM iteration.
    pub log_likelihoods: Vec<f64>,
    pub converged: bool,
}

struct ForwardPass {
    /// Normalized alphas, `T x K`.
    alpha: Array2<f64>,
    /// Shifted emission likelihoods `exp(log b_t(i) - shift_t)`.
    emis: Array2<f64>,
    scale: Vec<f64>,
    shift: Vec<f64>,
}

impl ForwardPass {
    fn log_likelihood(&self) -> f64 {
        self.scale.iter().zip(&self.shift).map(|(c, m)| c.ln() + m).sum()
    }
}

impl HmmParams {
    pub fn dim(&self) -> usize {
        self.means.ncols()
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.n_states;
        if k == 0 {
            return Err(Error::config("HMM needs at least one state"));
        }
        if self.pi.len() != k || self.transitions.dim() != (k, k) || self.means.nrows() != k {
            return Err(Error::invalid("HMM parameter shapes disagree with n_states"));
        }
        if self.variances.dim() != self.means.dim() {
            return Err(Error::invalid("HMM variances and means differ in shape"));
        }
        let close = |s: f64| (s - 1.0).abs() <= 1e-9;
        if !close(self.pi.iter().sum()) || self.pi.iter().any(|&p| p < 0.0) {
            return Err(Error::invalid("initial distribution is not a probability vector"));
        }
        for row in self.transitions.rows() {
            if !close(row.sum()) || row.iter().any(|&p| p < 0.0) {
                return Err(Error::invalid("transition row is not a probability vector"));
            }
        }
        if self.variances.iter().any(|&v| !(v >= VARIANCE_FLOOR * (1.0 - 1e-12))) {
            return Err(Error::invalid("emission variance below floor"));
        }
        Ok(())
    }

    fn check_obs(&self, obs: &Array2<f64>) -> Result<()> {
        if obs.ncols() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                got: obs.ncols(),
            });
        }
        if obs.nrows() == 0 {
            return Err(Error::invalid("empty observation sequence"));
        }
        Ok(())
    }

    /// Diagonal-Gaussian log density of `x` under state `i`.
    pub fn emission_log_density(&self, i: usize, x: ArrayView1<f64>) -> f64 {
        let mut acc = 0.0;
        for ((&xv, &mu), &var) in x.iter().zip(self.means.row(i)).zip(self.variances.row(i)) {
            let d = xv - mu;
            acc -= 0.5 * ((2.0 * PI * var).ln() + d * d / var);
        }
        acc
    }

    fn forward(&self, obs: &Array2<f64>) -> Result<ForwardPass> {
        self.check_obs(obs)?;
        let (t_len, k) = (obs.nrows(), self.n_states);
        let mut emis = Array2::zeros((t_len, k));
        let mut shift = vec![0.0; t_len];
        for t in 0..t_len {
            let x = obs.row(t);
            let mut row: Vec<f64> = (0..k).map(|i| self.emission_log_density(i, x)).collect();
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            for v in &mut row {
                *v = (*v - m).exp();
            }
            shift[t] = m;
            emis.row_mut(t).assign(&Array1::from(row));
        }

        let mut alpha = Array2::zeros((t_len, k));
        let mut scale = vec![0.0; t_len];
        for t in 0..t_len {
            for i in 0..k {
                let prior = if t == 0 {
                    self.pi[i]
                } else {
                    (0..k).map(|j| alpha[[t - 1, j]] * self.transitions[[j, i]]).sum()
                };
                alpha[[t, i]] = prior * emis[[t, i]];
            }
            let c: f64 = alpha.row(t).sum();
            if !(c > 0.0 && c.is_finite()) {
                return Err(Error::invalid(format!("observation {t} has zero likelihood under the model")));
            }
            alpha.row_mut(t).mapv_inplace(|a| a / c);
            scale[t] = c;
        }
        Ok(ForwardPass {
            alpha,
            emis,
            scale,
            shift,
        })
    }

    fn backward(&self, fp: &ForwardPass) -> Array2<f64> {
        let (t_len, k) = fp.alpha.dim();
        let mut beta = Array2::ones((t_len, k));
        for t in (0..t_len.saturating_sub(1)).rev() {
            for i in 0..k {
                beta[[t, i]] = (0..k)
                    .map(|j| self.transitions[[i, j]] * fp.emis[[t + 1, j]] * beta[[t + 1, j]])
                    .sum::<f64>()
                    / fp.scale[t + 1];
            }
        }
        beta
    }

    /// `log P(sequence | params)` by the scaled forward algorithm.
    pub fn log_likelihood(&self, obs: &Array2<f64>) -> Result<f64> {
        Ok(self.forward(obs)?.log_likelihood())
    }

    /// Per-step predictive negative log-likelihood `-log P(x_t | x_<t)`;
    /// the terms sum to the sequence NLL.
    pub fn step_nll(&self, obs: &Array2<f64>) -> Result<Vec<f64>> {
        let fp = self.forward(obs)?;
        Ok(fp.scale.iter().zip(&fp.shift).map(|(c, m)| -(c.ln() + m)).collect())
    }

    pub fn posteriors(&self, obs: &Array2<f64>) -> Result<HmmPosterior> {
        let fp = self.forward(obs)?;
        let beta = self.backward(&fp);
        let mut gamma = &fp.alpha * &beta;
        for mut row in gamma.rows_mut() {
            let s = row.sum();
            row.mapv_inplace(|g| g / s);
        }
        Ok(HmmPosterior {
            gamma,
            log_likelihood: fp.log_likelihood(),
        })
    }

    /// Most probable state path; ties go to the lower state index.
    pub fn viterbi(&self, obs: &Array2<f64>) -> Result<Vec<usize>> {
        self.check_obs(obs)?;
        let (t_len, k) = (obs.nrows(), self.n_states);
        let log_a = self.transitions.mapv(f64::ln);
        let mut delta: Vec<f64> = (0..k)
            .map(|i| self.pi[i].ln() + self.emission_log_density(i, obs.row(0)))
            .collect();
        let mut back = vec![vec![0usize; k]; t_len];
        for t in 1..t_len {
            let x = obs.row(t);
            let mut next = vec![0.0; k];
            for i in 0..k {
                let mut best = 0;
                let mut best_v = delta[0] + log_a[[0, i]];
                for j in 1..k {
                    let v = delta[j] + log_a[[j, i]];
                    if v > best_v {
                        best_v = v;
                        best = j;
                    }
                }
                back[t][i] = best;
                next[i] = best_v + self.emission_log_density(i, x);
            }
            delta = next;
        }
        let mut state = 0;
        for i in 1..k {
            if delta[i] > delta[state] {
                state = i;
            }
        }
        let mut path = vec![0; t_len];
        path[t_len - 1] = state;
        for t in (1..t_len).rev() {
            state = back[t][state];
            path[t - 1] = state;
        }
        Ok(path)
    }

    /// Posterior-weighted emission means `x_hat_t = sum_i gamma[t][i] mu_i`.
    pub fn reconstruct(&self, obs: &Array2<f64>) -> Result<Array2<f64>> {
        let post = self.posteriors(obs)?;
        Ok(post.gamma.dot(&self.means))
    }

    /// Squared reconstruction error at each step, averaged over dimensions.
    pub fn reconstruction_errors(&self, obs: &Array2<f64>) -> Result<Vec<f64>> {
        let recon = self.reconstruct(obs)?;
        let d = obs.ncols() as f64;
        Ok(obs
            .rows()
            .into_iter()
            .zip(recon.rows())
            .map(|(x, r)| x.iter().zip(r).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / d)
            .collect())
    }

    /// Mean squared error between the sequence and its reconstruction.
    pub fn score_reconstruction(&self, obs: &Array2<f64>) -> Result<f64> {
        let errs = self.reconstruction_errors(obs)?;
        Ok(errs.iter().sum::<f64>() / errs.len() as f64)
    }
}

/// Baum-Welch EM over several observation sequences (each `T x dim`).
///
/// Stops once the total log-likelihood improves by less than `tol` or after
/// `max_iters` E-steps.
pub fn fit_baum_welch(
    observations: &[Array2<f64>],
    n_states: usize,
    seed: u64,
    max_iters: usize,
    tol: f64,
) -> Result<HmmFit> {
    if observations.is_empty() {
        return Err(Error::invalid("no observation sequences"));
    }
    if n_states == 0 {
        return Err(Error::config("n_states must be at least 1"));
    }
    if max_iters == 0 {
        return Err(Error::config("max_iters must be at least 1"));
    }
    let dim = observations[0].ncols();
    for (s, o) in observations.iter().enumerate() {
        if o.ncols() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                got: o.ncols(),
            });
        }
        if o.nrows() < 2 {
            return Err(Error::invalid(format!("observation sequence {s} is shorter than 2")));
        }
        if o.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid(format!("observation sequence {s} has non-finite values")));
        }
    }
    if dim == 0 {
        return Err(Error::invalid("observations have zero dimensions"));
    }

    let mut params = initial_params(observations, n_states, seed);
    let mut history = Vec::with_capacity(max_iters);
    let mut converged = false;

    for _ in 0..max_iters {
        let k = n_states;
        let mut pi_acc = vec![0.0; k];
        let mut trans_acc = Array2::<f64>::zeros((k, k));
        let mut occ = vec![0.0; k];
        let mut mean_acc = Array2::<f64>::zeros((k, dim));
        let mut total_ll = 0.0;
        let mut gammas = Vec::with_capacity(observations.len());

        for obs in observations {
            let fp = params.forward(obs)?;
            total_ll += fp.log_likelihood();
            let beta = params.backward(&fp);
            let mut gamma = &fp.alpha * &beta;
            for mut row in gamma.rows_mut() {
                let s = row.sum();
                row.mapv_inplace(|g| g / s);
            }
            for i in 0..k {
                pi_acc[i] += gamma[[0, i]];
            }
            for t in 0..obs.nrows() - 1 {
                for i in 0..k {
                    let a = fp.alpha[[t, i]] / fp.scale[t + 1];
                    for j in 0..k {
                        trans_acc[[i, j]] +=
                            a * params.transitions[[i, j]] * fp.emis[[t + 1, j]] * beta[[t + 1, j]];
                    }
                }
            }
            occ.iter_mut().zip(gamma.sum_axis(Axis(0))).for_each(|(o, g)| *o += g);
            mean_acc += &gamma.t().dot(obs);
            gammas.push(gamma);
        }

        if let Some(&prev) = history.last() {
            history.push(total_ll);
            if total_ll - prev < tol {
                converged = true;
                break;
            }
        } else {
            history.push(total_ll);
        }

        // M-step
        let n_seq = observations.len() as f64;
        let mut pi: Vec<f64> = pi_acc.iter().map(|p| p / n_seq).collect();
        floor_and_normalize(&mut pi);

        let mut transitions = params.transitions.clone();
        for i in 0..k {
            let row_sum: f64 = trans_acc.row(i).sum();
            if row_sum > 0.0 {
                let mut row: Vec<f64> = trans_acc.row(i).iter().map(|v| v / row_sum).collect();
                floor_and_normalize(&mut row);
                transitions.row_mut(i).assign(&Array1::from(row));
            }
        }

        let mut means = params.means.clone();
        for i in 0..k {
            if occ[i] > 0.0 {
                means.row_mut(i).assign(&(&mean_acc.row(i) / occ[i]));
            }
        }
        let mut var_acc = Array2::<f64>::zeros((k, dim));
        for (obs, gamma) in observations.iter().zip(&gammas) {
            for (x, g) in obs.rows().into_iter().zip(gamma.rows()) {
                for i in 0..k {
                    for d in 0..dim {
                        let diff = x[d] - means[[i, d]];
                        var_acc[[i, d]] += g[i] * diff * diff;
                    }
                }
            }
        }
        let mut variances = params.variances.clone();
        for i in 0..k {
            if occ[i] > 0.0 {
                for d in 0..dim {
                    variances[[i, d]] = (var_acc[[i, d]] / occ[i]).max(VARIANCE_FLOOR);
                }
            }
        }
        params = HmmParams {
            n_states: k,
            pi,
            transitions,
            means,
            variances,
        };
    }

    Ok(HmmFit {
        params,
        log_likelihoods: history,
        converged,
    })
}

fn floor_and_normalize(p: &mut [f64]) {
    for v in p.iter_mut() {
        *v = v.max(PROB_FLOOR);
    }
    let s: f64 = p.iter().sum();
    for v in p.iter_mut() {
        *v /= s;
    }
}

/// Farthest-point seeding refined by a few Lloyd rounds for the means; global
/// variance for every state; uniform `pi` and transitions.
fn initial_params(observations: &[Array2<f64>], k: usize, seed: u64) -> HmmParams {
    let dim = observations[0].ncols();
    let rows: Vec<ArrayView1<f64>> = observations.iter().flat_map(|o| o.rows()).collect();
    let n = rows.len() as f64;

    let mut global_mean = Array1::<f64>::zeros(dim);
    for r in &rows {
        global_mean += r;
    }
    global_mean /= n;
    let mut global_var = Array1::<f64>::zeros(dim);
    for r in &rows {
        let d = r - &global_mean;
        global_var += &(&d * &d);
    }
    global_var.mapv_inplace(|v| (v / n).max(VARIANCE_FLOOR));

    let dist2 = |a: ArrayView1<f64>, b: ArrayView1<f64>| -> f64 {
        a.iter()
            .zip(b)
            .zip(&global_var)
            .map(|((x, y), v)| (x - y) * (x - y) / v)
            .sum()
    };

    let mut rng = RngStream::new(seed);
    let mut centers = Array2::<f64>::zeros((k, dim));
    let first = rng.int_inclusive(0, rows.len() - 1);
    centers.row_mut(0).assign(&rows[first]);
    let mut nearest: Vec<f64> = rows.iter().map(|r| dist2(*r, centers.row(0))).collect();
    for c in 1..k {
        let (far, _) = nearest
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |acc, (i, &d)| if d > acc.1 { (i, d) } else { acc });
        centers.row_mut(c).assign(&rows[far]);
        for (i, r) in rows.iter().enumerate() {
            nearest[i] = nearest[i].min(dist2(*r, centers.row(c)));
        }
    }

    for _ in 0..KMEANS_ROUNDS {
        let mut sums = Array2::<f64>::zeros((k, dim));
        let mut counts = vec![0usize; k];
        for r in &rows {
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for c in 0..k {
                let d = dist2(*r, centers.row(c));
                if d < best_d {
                    best_d = d;
                    best = c;
                }
            }
            let mut s = sums.row_mut(best);
            s += r;
            counts[best] += 1;
        }
        let mut moved = false;
        for c in 0..k {
            if counts[c] > 0 {
                let new = &sums.row(c) / counts[c] as f64;
                if new != centers.row(c) {
                    moved = true;
                }
                centers.row_mut(c).assign(&new);
            }
        }
        if !moved {
            break;
        }
    }

    let mut variances = Array2::<f64>::zeros((k, dim));
    for mut row in variances.rows_mut() {
        row.assign(&global_var);
    }
    HmmParams {
        n_states: k,
        pi: vec![1.0 / k as f64; k],
        transitions: Array2::from_elem((k, k), 1.0 / k as f64),
        means: centers,
        variances,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn two_state(mu: [f64; 2], var: [f64; 2]) -> HmmParams {
        HmmParams {
            n_states: 2,
            pi: vec![0.6, 0.4],
            transitions: array![[0.7, 0.3], [0.2, 0.8]],
            means: array![[mu[0]], [mu[1]]],
            variances: array![[var[0]], [var[1]]],
        }
    }

    fn normal_pdf(x: f64, mu: f64, var: f64) -> f64 {
        (-(x - mu) * (x - mu) / (2.0 * var)).exp() / (2.0 * PI * var).sqrt()
    }

    #[test]
    fn single_step_likelihood_is_mixture() {
        let p = two_state([0.0, 3.0], [1.0, 2.0]);
        let x = 1.2;
        let expected = (0.6 * normal_pdf(x, 0.0, 1.0) + 0.4 * normal_pdf(x, 3.0, 2.0)).ln();
        assert!((p.log_likelihood(&array![[x]]).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn degenerate_chain_equals_single_gaussian() {
        let p = HmmParams {
            n_states: 2,
            pi: vec![1.0, 0.0],
            transitions: array![[1.0, 0.0], [1.0, 0.0]],
            means: array![[0.5], [9.0]],
            variances: array![[2.0], [1.0]],
        };
        let obs = array![[0.1], [1.3], [-0.7], [2.2]];
        let expected: f64 = obs.iter().map(|&x| normal_pdf(x, 0.5, 2.0).ln()).sum();
        assert!((p.log_likelihood(&obs).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn symmetric_states_give_flat_posterior() {
        let p = HmmParams {
            n_states: 2,
            pi: vec![0.5, 0.5],
            transitions: Array2::from_elem((2, 2), 0.5),
            means: array![[1.0], [1.0]],
            variances: array![[1.0], [1.0]],
        };
        let post = p.posteriors(&array![[0.3], [2.0], [-1.0]]).unwrap();
        assert!(post.gamma.iter().all(|&g| (g - 0.5).abs() < 1e-15));
        assert_eq!(p.viterbi(&array![[0.3], [2.0], [-1.0]]).unwrap(), vec![0, 0, 0]);
        // identical means: reconstruction is that mean regardless of gamma
        let r = p.reconstruct(&array![[0.3], [5.0]]).unwrap();
        assert!(r.iter().all(|&v| (v - 1.0).abs() < 1e-15));
    }

    #[test]
    fn viterbi_switches_once() {
        let p = HmmParams {
            n_states: 2,
            pi: vec![0.5, 0.5],
            transitions: array![[0.9, 0.1], [0.1, 0.9]],
            means: array![[0.0], [10.0]],
            variances: array![[1.0], [1.0]],
        };
        let path = p.viterbi(&array![[0.2], [-0.4], [9.7], [10.3]]).unwrap();
        assert_eq!(path, vec![0, 0, 1, 1]);
    }

    #[test]
    fn single_state_viterbi_is_constant() {
        let p = HmmParams {
            n_states: 1,
            pi: vec![1.0],
            transitions: array![[1.0]],
            means: array![[0.0]],
            variances: array![[1.0]],
        };
        assert_eq!(p.viterbi(&array![[1.0], [-3.0], [40.0]]).unwrap(), vec![0, 0, 0]);
    }

    #[test]
    fn reconstruction_score_cases() {
        let single = HmmParams {
            n_states: 1,
            pi: vec![1.0],
            transitions: array![[1.0]],
            means: array![[4.0]],
            variances: array![[1.0]],
        };
        assert_eq!(single.score_reconstruction(&array![[4.0], [4.0], [4.0]]).unwrap(), 0.0);

        let p = two_state([0.0, 3.0], [1.0, 2.0]);
        let x = 1.0;
        let post = p.posteriors(&array![[x]]).unwrap();
        // gamma at T = 1 is the normalized pi_i N(x | mu_i, var_i)
        let w0 = 0.6 * normal_pdf(x, 0.0, 1.0);
        let w1 = 0.4 * normal_pdf(x, 3.0, 2.0);
        let g1 = w1 / (w0 + w1);
        assert!((post.gamma[[0, 1]] - g1).abs() < 1e-14);
        let expected = (x - 3.0 * g1).powi(2);
        assert!((p.score_reconstruction(&array![[x]]).unwrap() - expected).abs() < 1e-14);
    }

    #[test]
    fn dimension_mismatch_rejected() {
        let p = two_state([0.0, 1.0], [1.0, 1.0]);
        assert!(p.log_likelihood(&array![[1.0, 2.0]]).is_err());
        assert!(p.viterbi(&array![[1.0, 2.0]]).is_err());
    }

    #[test]
    fn fit_rejects_bad_input() {
        assert!(fit_baum_welch(&[], 2, 0, 10, 1e-6).is_err());
        assert!(fit_baum_welch(&[array![[1.0]]], 2, 0, 10, 1e-6).is_err());
        assert!(fit_baum_welch(&[array![[1.0], [2.0]]], 0, 0, 10, 1e-6).is_err());
    }

    #[test]
    fn constant_observations_converge_with_floored_variance() {
        let obs = vec![Array2::from_elem((20, 1), 3.0); 3];
        let fit = fit_baum_welch(&obs, 2, 1, 50, 1e-8).unwrap();
        assert!(fit.params.variances.iter().all(|&v| v == VARIANCE_FLOOR));
        assert!(fit.params.means.iter().all(|&m| (m - 3.0).abs() < 1e-12));
        fit.params.validate().unwrap();
    }

    #[test]
    fn single_state_fit_is_closed_form() {
        let mut rng = RngStream::new(4);
        let obs: Vec<Array2<f64>> = (0..5)
            .map(|_| Array2::from_shape_simple_fn((30, 2), || 2.0 + 1.5 * rng.normal()))
            .collect();
        let fit = fit_baum_welch(&obs, 1, 0, 5, 1e-12).unwrap();
        let all: Vec<f64> = obs.iter().flat_map(|o| o.column(1).to_vec()).collect();
        let n = all.len() as f64;
        let mean = all.iter().sum::<f64>() / n;
        let var = all.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        assert!((fit.params.means[[0, 1]] - mean).abs() < 1e-9);
        assert!((fit.params.variances[[0, 1]] - var).abs() < 1e-9);
    }
}
