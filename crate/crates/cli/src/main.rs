mod config;

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};
use gendetect::bench::{airbus_source, render_reference, run_benchmark_seeds, BenchConfig, DatasetSource};
use gendetect::detect::{calibrate, judge, read_bundle, save_bundle, ModelBundle};
use gendetect::eval::{metrics, render_table, verdict_csv};
use gendetect::ingest::{read_dataset_file, write_sequences, Dataset, Label};
use gendetect::pipeline::train_model;
use gendetect::synth::generate_synthetic;
use log::{info, warn};

use config::{Overrides, Settings};

#[derive(Debug, Parser)]
#[command(name = "gendetect", version, about = "Generative fault detection for 1 kHz sensor sequences")]
#[command(arg_required_else_help = true)]
struct Cli {
    /// TOML file with defaults for any long flag (flags take precedence)
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a synthetic surrogate dataset
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        opts: Overrides,
    },
    /// Train a detector on the normal sequences of a dataset
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        opts: Overrides,
    },
    /// Calibrate a bundle's threshold on normal sequences
    Calibrate {
        #[arg(long)]
        bundle: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Where to write the calibrated bundle [default: overwrite --bundle]
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        opts: Overrides,
    },
    /// Judge every sequence of a dataset and write the verdicts as CSV
    Score {
        #[arg(long)]
        bundle: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        opts: Overrides,
    },
    /// Split, train, calibrate and evaluate end to end
    Bench {
        /// Line-delimited JSON report, one record per seed
        #[arg(long)]
        out: PathBuf,
        /// Optional per-sequence verdict CSV of the last seed
        #[arg(long)]
        verdicts: Option<PathBuf>,
        #[command(flatten)]
        opts: Overrides,
    },
}

/// Writes through a temporary file in the target directory and renames it
/// into place, so a failed run never leaves a partial file behind.
fn write_atomic(path: &Path, write: impl FnOnce(&mut dyn Write) -> anyhow::Result<()>) -> anyhow::Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).with_context(|| format!("creating temp file in {}", dir.display()))?;
    {
        let mut buf = std::io::BufWriter::new(tmp.as_file_mut());
        write(&mut buf)?;
        buf.flush()?;
    }
    tmp.as_file().sync_all()?;
    tmp.persist(path).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn resolve(config: Option<&Path>, opts: Overrides) -> anyhow::Result<Settings> {
    let file = match config {
        Some(p) => Overrides::from_file(p)?,
        None => Overrides::default(),
    };
    let settings = Settings::resolve(opts.over(file))?;
    info!("resolved config: {}", serde_json::to_string(&settings)?);
    Ok(settings)
}

fn load(path: &Path) -> anyhow::Result<Dataset> {
    read_dataset_file(path).with_context(|| format!("ingest: {}", path.display()))
}

fn normal_only(ds: Dataset) -> anyhow::Result<Dataset> {
    let total = ds.len();
    let normals: Vec<_> = ds.sequences.into_iter().filter(|s| s.label == Label::Normal).collect();
    if normals.len() < total {
        warn!("ignoring {} anomalous sequences", total - normals.len());
    }
    if normals.is_empty() {
        bail!("no normal sequences in {}", ds.source_name);
    }
    Ok(Dataset::new(ds.source_name, normals)?)
}

fn load_bundle_file(path: &Path) -> anyhow::Result<ModelBundle> {
    let file = std::fs::File::open(path).with_context(|| format!("opening bundle {}", path.display()))?;
    read_bundle(std::io::BufReader::new(file)).with_context(|| format!("loading bundle {}", path.display()))
}

/// Pipeline flags given explicitly must agree with what the bundle was
/// trained with.
fn check_bundle_compat(bundle: &ModelBundle, opts: &Overrides, file: &Overrides) -> anyhow::Result<()> {
    let p = &bundle.model.pipeline;
    let pick = |a: Option<usize>, b: Option<usize>| a.or(b);
    if let Some(m) = opts.feature_mode.or(file.feature_mode) {
        if m != p.feature_mode {
            bail!("--feature-mode {m} does not match the bundle, which was trained on {}", p.feature_mode);
        }
    }
    if let Some(k) = opts.model.or(file.model) {
        if k != bundle.kind() {
            bail!("--model {k} does not match the bundle, which holds a {} model", bundle.kind());
        }
    }
    if let Some(w) = pick(opts.window_size, file.window_size) {
        if w != p.window_size {
            bail!("--window-size {w} does not match the bundle's window size {}", p.window_size);
        }
    }
    if let Some(s) = pick(opts.stride, file.stride) {
        if s != p.stride {
            bail!("--stride {s} does not match the bundle's stride {}", p.stride);
        }
    }
    Ok(())
}

fn file_overrides(config: Option<&Path>) -> anyhow::Result<Overrides> {
    config.map_or_else(|| Ok(Overrides::default()), Overrides::from_file)
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let config = cli.config.as_deref();
    match cli.command {
        Command::Synth { out, opts } => {
            let s = resolve(config, opts)?;
            let ds = generate_synthetic(&s.synth).context("synth")?;
            info!(
                "generated {} normal and {} anomalous sequences",
                ds.count_label(Label::Normal),
                ds.count_label(Label::Anomalous)
            );
            write_atomic(&out, |w| Ok(write_sequences(&ds, w)?))?;
        }
        Command::Train { data, out, opts } => {
            let s = resolve(config, opts)?;
            let train = normal_only(load(&data)?)?;
            let spec = s.train_spec(s.seed);
            let model = train_model(&train, &spec)?;
            let bundle = ModelBundle { model, threshold: None };
            write_atomic(&out, |w| Ok(w.write_all(&save_bundle(&bundle))?))?;
            info!("wrote {} bundle to {}", bundle.kind(), out.display());
        }
        Command::Calibrate { bundle, data, out, opts } => {
            let file = file_overrides(config)?;
            let mut b = load_bundle_file(&bundle)?;
            check_bundle_compat(&b, &opts, &file)?;
            let aggregation = opts.aggregation.or(file.aggregation).unwrap_or(b.model.aggregation);
            let s = resolve(config, opts)?;
            let calib = normal_only(load(&data)?)?;
            let scores: Vec<f64> = b
                .sequence_scores(&calib, aggregation)
                .context("calibrate")?
                .into_iter()
                .flatten()
                .collect();
            let t = calibrate(&scores, s.fpr).context("calibrate")?;
            info!("threshold {} from {} scores at fpr {}", t.value, t.calibration_size, s.fpr);
            b.model.aggregation = aggregation;
            b.threshold = Some(t);
            let target = out.unwrap_or(bundle);
            write_atomic(&target, |w| Ok(w.write_all(&save_bundle(&b))?))?;
        }
        Command::Score { bundle, data, out, opts } => {
            let file = file_overrides(config)?;
            let b = load_bundle_file(&bundle)?;
            check_bundle_compat(&b, &opts, &file)?;
            let aggregation = opts.aggregation.or(file.aggregation).unwrap_or(b.model.aggregation);
            resolve(config, opts)?;
            let Some(t) = b.threshold else {
                bail!("bundle {} has no threshold; run `gendetect calibrate` first", bundle.display());
            };
            let ds = load(&data)?;
            let verdicts = judge(&b, &ds, &t, aggregation).context("detect")?;
            let flagged = verdicts.iter().filter(|v| v.flagged).count();
            println!("{flagged} of {} sequences flagged (threshold {})", verdicts.len(), t.value);
            if let Ok(m) = metrics(&verdicts) {
                println!(
                    "accuracy {:.3} precision {:.3} recall {:.3} unscorable {}",
                    m.accuracy, m.precision, m.recall, m.unscorable
                );
            }
            write_atomic(&out, |w| Ok(w.write_all(verdict_csv(&verdicts).as_bytes())?))?;
        }
        Command::Bench { out, verdicts, opts } => {
            let s = resolve(config, opts)?;
            let source = match s.dataset.as_str() {
                "airbus" => {
                    let dir = s
                        .data_dir
                        .clone()
                        .context("--dataset airbus needs --data-dir with the converted Airbus CSV files")?;
                    airbus_source(&dir)?
                }
                "synth" => DatasetSource::Split {
                    data: generate_synthetic(&s.synth).context("synth")?,
                    ratio: s.split_ratio,
                },
                path => DatasetSource::Split {
                    data: load(Path::new(path))?,
                    ratio: s.split_ratio,
                },
            };
            let cfg = BenchConfig::new(s.train_spec(s.seed), s.fpr);
            let reports = run_benchmark_seeds(&source, &cfg, &s.seeds)?;
            print!("{}", render_table(&reports));
            if s.dataset == "airbus" {
                print!("{}", render_reference(s.model, &reports));
            }
            write_atomic(&out, |w| {
                for r in &reports {
                    writeln!(w, "{}", r.to_json_line())?;
                }
                Ok(())
            })?;
            if let (Some(path), Some(last)) = (verdicts, reports.last()) {
                write_atomic(&path, |w| Ok(w.write_all(last.verdict_csv().as_bytes())?))?;
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
