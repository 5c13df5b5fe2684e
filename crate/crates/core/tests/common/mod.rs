//! Oracles shared by the property tests and the acceptance target. Every
//! check returns `Err(description)` on the first violation.
#![allow(dead_code)]

use gendetect::detect::{calibrate, judge, load_bundle, save_bundle, ModelBundle, Verdict};
use gendetect::engine::{loss, DenseNet, Mode, RngStream};
use gendetect::eval::metrics;
use gendetect::gan::{GanArch, GanModel};
use gendetect::hmm::{fit_baum_welch, HmmParams};
use gendetect::ingest::{parse_sequences, write_sequences, Dataset, Label};
use gendetect::pipeline::{train_model, FeatureMode, ModelKind, TrainSpec};
use gendetect::preprocess::{extract_features, window, window_count, ScalerParams};
use gendetect::synth::{generate_synthetic, SynthConfig};
use gendetect::vae::{kl_divergence, VaeArch, VaeModel};
use ndarray::{Array1, Array2};

pub type Check = Result<(), String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Check {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

// ---------------------------------------------------------------- HMM

pub fn random_hmm(k: usize, d: usize, rng: &mut RngStream) -> HmmParams {
    let mut dirichlet = |n: usize| {
        let v: Vec<f64> = (0..n).map(|_| rng.uniform_range(0.1, 1.0)).collect();
        let s: f64 = v.iter().sum();
        v.into_iter().map(|x| x / s).collect::<Vec<f64>>()
    };
    let pi = dirichlet(k);
    let mut transitions = Array2::zeros((k, k));
    for i in 0..k {
        transitions.row_mut(i).assign(&Array1::from(dirichlet(k)));
    }
    HmmParams {
        n_states: k,
        pi,
        transitions,
        means: Array2::from_shape_simple_fn((k, d), || rng.uniform_range(-2.0, 2.0)),
        variances: Array2::from_shape_simple_fn((k, d), || rng.uniform_range(0.3, 2.0)),
    }
}

/// Draws `t` observations from `p`.
pub fn sample_hmm(p: &HmmParams, t: usize, rng: &mut RngStream) -> Array2<f64> {
    let draw = |probs: &[f64], rng: &mut RngStream| {
        let u = rng.uniform();
        let mut acc = 0.0;
        for (i, &q) in probs.iter().enumerate() {
            acc += q;
            if u < acc {
                return i;
            }
        }
        probs.len() - 1
    };
    let d = p.means.ncols();
    let mut out = Array2::zeros((t, d));
    let mut s = draw(&p.pi, rng);
    for step in 0..t {
        for j in 0..d {
            out[[step, j]] = p.means[[s, j]] + p.variances[[s, j]].sqrt() * rng.normal();
        }
        s = draw(p.transitions.row(s).as_slice().unwrap(), rng);
    }
    out
}

fn gaussian_density(p: &HmmParams, state: usize, x: &[f64]) -> f64 {
    x.iter()
        .enumerate()
        .map(|(j, &v)| {
            let var = p.variances[[state, j]];
            let diff = v - p.means[[state, j]];
            (-diff * diff / (2.0 * var)).exp() / (2.0 * std::f64::consts::PI * var).sqrt()
        })
        .product()
}

/// Likelihood by summing over all `K^T` state paths.
pub fn enumerate_likelihood(p: &HmmParams, obs: &Array2<f64>) -> f64 {
    let (t, k) = (obs.nrows(), p.n_states);
    let mut total = 0.0;
    let mut path = vec![0usize; t];
    loop {
        let mut prob = p.pi[path[0]] * gaussian_density(p, path[0], obs.row(0).as_slice().unwrap());
        for s in 1..t {
            prob *= p.transitions[[path[s - 1], path[s]]]
                * gaussian_density(p, path[s], obs.row(s).as_slice().unwrap());
        }
        total += prob;
        let mut i = 0;
        loop {
            if i == t {
                return total;
            }
            path[i] += 1;
            if path[i] < k {
                break;
            }
            path[i] = 0;
            i += 1;
        }
    }
}

pub fn hmm_forward_matches_enumeration() -> Check {
    let mut rng = RngStream::new(404);
    for trial in 0..40 {
        let k = 1 + trial % 3;
        let d = 1 + trial % 2;
        let t = 1 + trial % 8;
        let p = random_hmm(k, d, &mut rng);
        let obs = sample_hmm(&p, t, &mut rng);
        let ll = p.log_likelihood(&obs).map_err(|e| e.to_string())?;
        let oracle = enumerate_likelihood(&p, &obs).ln();
        ensure((ll - oracle).abs() <= 1e-9 * oracle.abs().max(1.0), || {
            format!("trial {trial} (K={k}, d={d}, T={t}): forward {ll} vs enumeration {oracle}")
        })?;
    }
    Ok(())
}

pub fn baum_welch_monotone(seeds: std::ops::Range<u64>) -> Check {
    for seed in seeds {
        let mut rng = RngStream::new(1000 + seed);
        let d = 1 + (seed as usize % 2);
        let truth = random_hmm(2, d, &mut rng);
        let obs: Vec<Array2<f64>> = (0..3).map(|_| sample_hmm(&truth, 60, &mut rng)).collect();
        let fit = fit_baum_welch(&obs, 2, seed, 40, 0.0).map_err(|e| e.to_string())?;
        for (i, w) in fit.log_likelihoods.windows(2).enumerate() {
            ensure(w[1] >= w[0] - 1e-8, || {
                format!("seed {seed}: log-likelihood fell at iteration {}: {} -> {}", i + 1, w[0], w[1])
            })?;
        }
    }
    Ok(())
}

// ---------------------------------------------------------------- gradients

fn rel_close(analytic: f64, numeric: f64, rel: f64) -> bool {
    let diff = (analytic - numeric).abs();
    diff <= rel * analytic.abs().max(numeric.abs()) || diff < 1e-9
}

/// Central differences of `f` at `params[idx]` for each `idx`, compared
/// against `grad`.
fn fd_check(
    name: &str,
    params: &[f64],
    grad: &[f64],
    indices: &[usize],
    mut f: impl FnMut(&[f64]) -> f64,
) -> Check {
    const H: f64 = 1e-5;
    let mut p = params.to_vec();
    for &i in indices {
        let orig = p[i];
        p[i] = orig + H;
        let up = f(&p);
        p[i] = orig - H;
        let down = f(&p);
        p[i] = orig;
        let numeric = (up - down) / (2.0 * H);
        ensure(rel_close(grad[i], numeric, 1e-4), || {
            format!("{name} param {i}: analytic {} vs numeric {numeric}", grad[i])
        })?;
    }
    Ok(())
}

fn sample_indices(n: usize, k: usize, rng: &mut RngStream) -> Vec<usize> {
    if n <= k {
        return (0..n).collect();
    }
    let mut idx = rng.permutation(n);
    idx.truncate(k);
    idx.sort_unstable();
    idx
}

pub fn vae_gradients() -> Check {
    let arch = VaeArch {
        input_dim: 5,
        hidden1: 7,
        hidden2: 6,
        latent_dim: 3,
        l2_lambda: 1e-2,
        kl_weight: 1.0,
    };
    let model = VaeModel::new(arch, 17).map_err(|e| e.to_string())?;
    let mut rng = RngStream::new(18);
    let x = Array2::from_shape_simple_fn((4, 5), || rng.uniform());
    let eps = Array2::from_shape_simple_fn((4, 3), || rng.normal());
    let pass = model.elbo_with_noise(&x, &eps).map_err(|e| e.to_string())?;
    let (ge, gd) = model.elbo_backward(&pass).map_err(|e| e.to_string())?;

    let enc = model.encoder.params_flat();
    let all: Vec<usize> = (0..enc.len()).collect();
    fd_check("vae encoder", &enc, &ge.flatten(), &all, |p| {
        let mut m = model.clone();
        m.encoder.set_params_flat(p).unwrap();
        m.elbo_with_noise(&x, &eps).unwrap().loss
    })?;
    let dec = model.decoder.params_flat();
    let all: Vec<usize> = (0..dec.len()).collect();
    fd_check("vae decoder", &dec, &gd.flatten(), &all, |p| {
        let mut m = model.clone();
        m.decoder.set_params_flat(p).unwrap();
        m.elbo_with_noise(&x, &eps).unwrap().loss
    })
}

const DROPOUT_SEED: u64 = 99;

fn disc_loss(d: &DenseNet, rate: f64, batch: &Array2<f64>, target: &Array2<f64>) -> (f64, Array2<f64>, gendetect::engine::Tape) {
    let mut replay = RngStream::new(DROPOUT_SEED);
    let (pred, tape) = d.forward(batch, Mode::Train, rate, &mut replay).unwrap();
    let l = loss::bce(&pred, target).unwrap() + d.l2_penalty();
    (l, loss::bce_grad(&pred, target).unwrap(), tape)
}

fn gen_loss(g: &DenseNet, d: &DenseNet, rate: f64, z: &Array2<f64>) -> f64 {
    let mut replay = RngStream::new(DROPOUT_SEED);
    let fake = g.forward(z, Mode::Train, 0.0, &mut replay).unwrap().0;
    let pred = d.forward(&fake, Mode::Train, rate, &mut replay).unwrap().0;
    loss::bce(&pred, &Array2::ones(pred.raw_dim())).unwrap() + g.l2_penalty()
}

/// Both GAN losses with the dropout masks replayed from a fixed stream;
/// checks a seeded subset of every layer's parameters.
pub fn gan_gradients() -> Check {
    let model = GanModel::new(GanArch::new(3), 23).map_err(|e| e.to_string())?;
    let rate = model.arch.dropout_rate;
    let mut rng = RngStream::new(24);
    let batch = Array2::from_shape_simple_fn((6, 3), || rng.uniform());
    let mut target = Array2::zeros((6, 1));
    target.slice_mut(ndarray::s![..3, ..]).fill(1.0);

    let d = &model.discriminator;
    let (_, g_out, tape) = disc_loss(d, rate, &batch, &target);
    let (grads, _) = d.backward(&tape, &g_out).map_err(|e| e.to_string())?;
    let params = d.params_flat();
    let idx = sample_indices(params.len(), 150, &mut rng);
    fd_check("gan discriminator", &params, &grads.flatten(), &idx, |p| {
        let mut net = d.clone();
        net.set_params_flat(p).unwrap();
        disc_loss(&net, rate, &batch, &target).0
    })?;

    let g = &model.generator;
    let z = model.sample_noise(5, &mut rng);
    let mut replay = RngStream::new(DROPOUT_SEED);
    let (fake, g_tape) = g.forward(&z, Mode::Train, 0.0, &mut replay).unwrap();
    let (pred, d_tape) = d.forward(&fake, Mode::Train, rate, &mut replay).unwrap();
    let gb = loss::bce_grad(&pred, &Array2::ones(pred.raw_dim())).unwrap();
    let (_, g_fake) = d.backward(&d_tape, &gb).map_err(|e| e.to_string())?;
    let (g_grads, _) = g.backward(&g_tape, &g_fake).map_err(|e| e.to_string())?;
    let params = g.params_flat();
    let idx = sample_indices(params.len(), 150, &mut rng);
    fd_check("gan generator", &params, &g_grads.flatten(), &idx, |p| {
        let mut net = g.clone();
        net.set_params_flat(p).unwrap();
        gen_loss(&net, d, rate, &z)
    })
}

pub fn kl_closed_form() -> Check {
    let cases = [
        (0.0, 0.0, 0.0, 1e-15),
        (1.0, 0.0, 0.5, 1e-15),
        (0.5, 0.25f64.ln(), 0.4431, 1e-4),
    ];
    for (mu, lv, want, tol) in cases {
        let got = kl_divergence(&[mu], &[lv]).map_err(|e| e.to_string())?;
        ensure((got - want).abs() <= tol, || format!("KL({mu}, {lv}) = {got}, want {want}"))?;
    }
    Ok(())
}

// ---------------------------------------------------------------- preprocess

pub fn scaler_identity() -> Check {
    let mut rng = RngStream::new(5);
    for trial in 0..20 {
        let rows = 2 + trial;
        let data = Array2::from_shape_simple_fn((rows, 4), || 10.0 * rng.normal() + 3.0);
        let s = ScalerParams::fit_rows(&data).map_err(|e| e.to_string())?;
        let z = s.transform_rows(&data).map_err(|e| e.to_string())?;
        for (j, col) in z.columns().into_iter().enumerate() {
            let n = col.len() as f64;
            let mean = col.sum() / n;
            let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            ensure(mean.abs() < 1e-12 && (var - 1.0).abs() < 1e-12, || {
                format!("trial {trial} column {j}: mean {mean}, variance {var}")
            })?;
        }
    }
    Ok(())
}

/// Exact central moments of integer data from power sums in `i128`.
fn exact_moments(xs: &[i64]) -> (f64, f64, f64) {
    let n = xs.len() as i128;
    let s = |p: u32| xs.iter().map(|&x| (x as i128).pow(p)).sum::<i128>();
    let (s1, s2, s3, s4) = (s(1), s(2), s(3), s(4));
    // n^k * M_k as exact integers
    let m2 = n * s2 - s1 * s1;
    let m3 = n * n * s3 - 3 * n * s1 * s2 + 2 * s1 * s1 * s1;
    let m4 = n * n * n * s4 - 4 * n * n * s1 * s3 + 6 * n * s1 * s1 * s2 - 3 * s1 * s1 * s1 * s1;
    (m2 as f64, m3 as f64, m4 as f64)
}

pub fn feature_moments_oracle() -> Check {
    let mut rng = RngStream::new(77);
    for trial in 0..200 {
        let n = 2 + trial % 40;
        let ints: Vec<i64> = (0..n).map(|_| rng.int_inclusive(0, 100) as i64 - 50).collect();
        let scale = 0.125;
        let xs: Vec<f64> = ints.iter().map(|&v| v as f64 * scale).collect();
        let f = extract_features(&xs);

        let mean = ints.iter().sum::<i64>() as f64 / n as f64 * scale;
        let mut sorted = ints.clone();
        sorted.sort_unstable();
        let median = if n % 2 == 1 {
            sorted[n / 2] as f64 * scale
        } else {
            (sorted[n / 2 - 1] + sorted[n / 2]) as f64 * scale / 2.0
        };
        let (m2, m3, m4) = exact_moments(&ints);
        // the powers of n cancel in both ratios
        let (skew, kurt) = if m2 == 0.0 { (0.0, 0.0) } else { (m3 / m2.powf(1.5), m4 / (m2 * m2)) };

        for (name, got, want) in [
            ("mean", f.mean, mean),
            ("median", f.median, median),
            ("skewness", f.skewness, skew),
            ("kurtosis", f.kurtosis, kurt),
        ] {
            let ok = (got - want).abs() <= 1e-12 * want.abs() || (want == 0.0 && got.abs() < 1e-12);
            ensure(ok, || format!("trial {trial} (n={n}) {name}: {got} vs {want}"))?;
        }
    }
    Ok(())
}

pub fn window_count_grid() -> Check {
    for n in 0..=32usize {
        for w in 2..=33usize {
            for stride in 1..=33usize {
                let mut brute = 0;
                let mut start = 0;
                while start + w <= n {
                    brute += 1;
                    start += stride;
                }
                let formula = window_count(n, w, stride);
                ensure(formula == brute, || format!("n={n} w={w} stride={stride}: {formula} vs {brute}"))?;
                if n >= 1 {
                    let seq = gendetect::ingest::RawSequence::new(
                        "s",
                        (0..n).map(|i| i as f64).collect(),
                        Label::Normal,
                        None,
                    )
                    .unwrap();
                    let got = window(&seq, w, stride).map_err(|e| e.to_string())?;
                    ensure(got.len() == brute, || format!("window() n={n} w={w} stride={stride}"))?;
                    for (i, win) in got.iter().enumerate() {
                        ensure(win.start_index == i * stride && win.values[0] == (i * stride) as f64, || {
                            format!("window {i} of n={n} w={w} stride={stride} misplaced")
                        })?;
                    }
                }
            }
        }
    }
    Ok(())
}

// ---------------------------------------------------------------- detect / eval

/// Smallest score `s` in the list with at most `floor(fpr * n)` scores
/// strictly above it.
pub fn threshold_oracle(scores: &[f64], fpr: f64) -> f64 {
    let n = scores.len();
    let allowed = (fpr * n as f64 + 1e-9).floor() as usize;
    scores
        .iter()
        .copied()
        .filter(|&s| scores.iter().filter(|&&o| o > s).count() <= allowed)
        .fold(f64::INFINITY, f64::min)
}

pub fn threshold_exhaustive() -> Check {
    let fprs = [0.0, 0.05, 0.1, 0.2, 0.25, 1.0 / 3.0, 0.5, 0.75, 0.9];
    for n in 1..=12usize {
        let alphabet: usize = if n <= 8 { 3 } else { 2 };
        let total = alphabet.pow(n as u32);
        for code in 0..total {
            let mut c = code;
            let scores: Vec<f64> = (0..n)
                .map(|_| {
                    let v = c % alphabet;
                    c /= alphabet;
                    v as f64
                })
                .collect();
            for &fpr in &fprs {
                let t = calibrate(&scores, fpr).map_err(|e| e.to_string())?;
                let want = threshold_oracle(&scores, fpr);
                ensure(t.value == want, || format!("{scores:?} fpr {fpr}: {} vs {want}", t.value))?;
                let exceed = scores.iter().filter(|&&s| t.flags(s)).count();
                ensure(exceed as f64 <= fpr * n as f64 + 1e-9, || {
                    format!("{scores:?} fpr {fpr}: {exceed} training scores flagged")
                })?;
            }
        }
    }
    Ok(())
}

pub fn random_verdicts(rng: &mut RngStream, n: usize) -> Vec<Verdict> {
    (0..n)
        .map(|i| {
            let unscorable = rng.uniform() < 0.1;
            Verdict {
                sequence_id: format!("s{i}"),
                score: (!unscorable).then(|| rng.uniform()),
                flagged: !unscorable && rng.uniform() < 0.5,
                true_label: Some(if rng.uniform() < 0.4 { Label::Anomalous } else { Label::Normal }),
            }
        })
        .collect()
}

pub fn metrics_recount() -> Check {
    let mut rng = RngStream::new(31);
    for trial in 0..300 {
        let n = 1 + trial % 40;
        let vs = random_verdicts(&mut rng, n);
        let scored: Vec<&Verdict> = vs.iter().filter(|v| v.score.is_some()).collect();
        let Ok(m) = metrics(&vs) else {
            ensure(scored.is_empty(), || format!("trial {trial}: metrics failed on scorable input"))?;
            continue;
        };
        let is_anom = |v: &&&Verdict| v.true_label == Some(Label::Anomalous);
        let flagged: Vec<&&Verdict> = scored.iter().filter(|v| v.flagged).collect();
        let anomalous: Vec<&&Verdict> = scored.iter().filter(is_anom).collect();
        let correct = scored.iter().filter(|v| v.flagged == (v.true_label == Some(Label::Anomalous))).count();
        let hits = flagged.iter().filter(|v| is_anom(v)).count();

        let acc = correct as f64 / scored.len() as f64;
        let prec = if flagged.is_empty() { 0.0 } else { hits as f64 / flagged.len() as f64 };
        let rec = if anomalous.is_empty() { 0.0 } else { hits as f64 / anomalous.len() as f64 };
        ensure(
            m.accuracy == acc
                && m.precision == prec
                && m.recall == rec
                && m.unscorable == vs.len() - scored.len()
                && m.precision_undefined == flagged.is_empty()
                && m.recall_undefined == anomalous.is_empty(),
            || format!("trial {trial}: {m:?} vs acc {acc} prec {prec} rec {rec}"),
        )?;
    }
    Ok(())
}

// ---------------------------------------------------------------- round trips

pub fn small_synth(seed: u64) -> Dataset {
    generate_synthetic(&SynthConfig {
        n_normal: 12,
        n_anomalous: 4,
        min_len: 300,
        max_len: 700,
        window_size: 128,
        seed,
        ..Default::default()
    })
    .unwrap()
}

pub fn tiny_spec(kind: ModelKind, seed: u64) -> TrainSpec {
    let mut spec = TrainSpec::new(kind, FeatureMode::Stats, 128, seed);
    spec.hmm.max_iters = 15;
    spec.vae.epochs = 5;
    spec.gan.epochs = 2;
    spec.gan.batch_size = 16;
    spec
}

pub fn tiny_bundle(kind: ModelKind, data: &Dataset, seed: u64) -> ModelBundle {
    let model = train_model(data, &tiny_spec(kind, seed)).unwrap();
    let mut bundle = ModelBundle { model, threshold: None };
    let scores: Vec<f64> = bundle
        .sequence_scores(data, bundle.model.aggregation)
        .unwrap()
        .into_iter()
        .flatten()
        .collect();
    bundle.threshold = Some(calibrate(&scores, 0.05).unwrap());
    bundle
}

pub fn bundle_round_trip() -> Check {
    let data = small_synth(3);
    for kind in [ModelKind::Hmm, ModelKind::Vae, ModelKind::Gan] {
        let bundle = tiny_bundle(kind, &data, 8);
        let bytes = save_bundle(&bundle);
        let loaded = load_bundle(&bytes).map_err(|e| e.to_string())?;
        ensure(loaded == bundle, || format!("{kind}: loaded bundle differs"))?;
        ensure(save_bundle(&loaded) == bytes, || format!("{kind}: re-saved bytes differ"))?;
        let t = bundle.threshold.unwrap();
        let a = judge(&bundle, &data, &t, bundle.model.aggregation).map_err(|e| e.to_string())?;
        let b = judge(&loaded, &data, &t, loaded.model.aggregation).map_err(|e| e.to_string())?;
        ensure(a == b, || format!("{kind}: verdicts differ after reload"))?;
    }
    Ok(())
}

pub fn ingest_round_trip() -> Check {
    let data = small_synth(4);
    let mut buf = Vec::new();
    write_sequences(&data, &mut buf).map_err(|e| e.to_string())?;
    let back = parse_sequences(buf.as_slice(), &data.source_name).map_err(|e| e.to_string())?;
    ensure(back == data, || "parsed dataset differs from the written one".into())?;
    let mut again = Vec::new();
    write_sequences(&back, &mut again).map_err(|e| e.to_string())?;
    ensure(again == buf, || "second write differs".into())
}

pub fn seeded_reproducibility() -> Check {
    let data = small_synth(5);
    ensure(small_synth(5) == data, || "synthetic generation not reproducible".into())?;
    for kind in [ModelKind::Hmm, ModelKind::Vae, ModelKind::Gan] {
        let a = save_bundle(&tiny_bundle(kind, &data, 11));
        let b = save_bundle(&tiny_bundle(kind, &data, 11));
        ensure(a == b, || format!("{kind}: retraining with the same seed changed the bundle"))?;
    }
    Ok(())
}
