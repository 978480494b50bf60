//! Command-line interface: synthetic data generation, model training,
//! classification, the replicated evaluation protocol, grid-search
//! cross-validation and a latency benchmark.
//!
//! Exit codes: 0 on success, 2 on data errors (I/O, parsing, shape or
//! sufficiency problems), 3 on configuration errors (bad flags, bad config
//! file, invalid parameter values).

use std::collections::HashMap;
use std::fmt::Display;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::{Parser, Subcommand, ValueEnum};

use dlroc::classifier::{fit_traced, ClassifierModel, CoderSpec, DictionarySource};
use dlroc::coding::CoderStop;
use dlroc::data::{generate_synthetic, load_csv, save_csv, Dataset, SynthSpec};
use dlroc::eval::{benchmark_timing, cross_validate, run_replicates, GridPoint, MethodConfig, Protocol};
use dlroc::learning::LearnParams;

const EXIT_DATA: i32 = 2;
const EXIT_CONFIG: i32 = 3;

#[derive(Parser)]
#[command(name = "dlroc", version, about = "Robust sparse-representation classification with learned dictionaries")]
struct Cli {
    /// Optional `key = value` config file; flags override its entries.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum CoderKind {
    Hybrid,
    Omp,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset CSV (optionally .gz).
    Gen {
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        channels: Option<usize>,
        #[arg(long)]
        labels: Option<usize>,
        #[arg(long = "atoms-per-label")]
        atoms_per_label: Option<usize>,
        #[arg(long = "samples-per-label")]
        samples_per_label: Option<usize>,
        #[arg(long)]
        sparsity: Option<usize>,
        #[arg(long)]
        sigma: Option<f64>,
        #[arg(long = "outlier-fraction")]
        outlier_fraction: Option<f64>,
        #[arg(long = "outlier-magnitude")]
        outlier_magnitude: Option<f64>,
    },
    /// Fit a model on a dataset and serialize it.
    Train {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, value_enum)]
        coder: Option<CoderKind>,
        #[arg(long)]
        alpha: Option<f64>,
        #[arg(long)]
        gamma: Option<f64>,
        #[arg(long)]
        eta: Option<f64>,
        #[arg(long)]
        tmax: Option<usize>,
        #[arg(long)]
        lk: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long = "residual-tol")]
        residual_tol: Option<f64>,
        #[arg(long = "max-atoms")]
        max_atoms: Option<usize>,
    },
    /// Classify a dataset with a serialized model; writes a labels CSV.
    Classify {
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Replicated group-held-out evaluation of DL-ROC against SRC(OMP).
    Eval {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        replicates: Option<usize>,
        #[arg(long = "train-groups")]
        train_groups: Option<usize>,
        #[arg(long = "per-label-train")]
        per_label_train: Option<usize>,
        #[arg(long = "per-label-test")]
        per_label_test: Option<usize>,
        #[arg(long)]
        alpha: Option<f64>,
        #[arg(long)]
        gamma: Option<f64>,
        #[arg(long)]
        eta: Option<f64>,
        #[arg(long)]
        tmax: Option<usize>,
        #[arg(long)]
        lk: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long = "residual-tol")]
        residual_tol: Option<f64>,
    },
    /// Cross-validated grid search over alpha/gamma/eta.
    Cv {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Comma-separated list, e.g. `0.5,0.7,1.0`.
        #[arg(long)]
        alphas: Option<String>,
        #[arg(long)]
        gammas: Option<String>,
        #[arg(long)]
        etas: Option<String>,
        #[arg(long)]
        folds: Option<usize>,
        #[arg(long)]
        tmax: Option<usize>,
        #[arg(long)]
        lk: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long = "residual-tol")]
        residual_tol: Option<f64>,
    },
    /// Per-sample classification latency of a serialized model.
    Bench {
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        warmup: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

enum CliError {
    Config(String),
    Data(String),
}

impl CliError {
    fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => EXIT_CONFIG,
            CliError::Data(_) => EXIT_DATA,
        }
    }
}

impl Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(msg) => write!(f, "configuration error: {msg}"),
            CliError::Data(msg) => write!(f, "data error: {msg}"),
        }
    }
}

impl From<dlroc::Error> for CliError {
    fn from(err: dlroc::Error) -> Self {
        use dlroc::Error::*;
        match err {
            AlphaOutOfRange(_) | BadExponent | BadSpec(_) | InsufficientGroups { .. } => {
                CliError::Config(err.to_string())
            }
            _ => CliError::Data(err.to_string()),
        }
    }
}

/// `key = value` settings file; `#` starts a comment line.
struct Settings {
    map: HashMap<String, String>,
}

impl Settings {
    fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let mut map = HashMap::new();
        if let Some(path) = path {
            let text = fs::read_to_string(path)
                .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
            for (no, line) in text.lines().enumerate() {
                let line = line.trim();
                if line.is_empty() || line.starts_with('#') {
                    continue;
                }
                let Some((key, value)) = line.split_once('=') else {
                    return Err(CliError::Config(format!(
                        "{}:{}: expected `key = value`",
                        path.display(),
                        no + 1
                    )));
                };
                map.insert(key.trim().to_string(), value.trim().to_string());
            }
        }
        Ok(Self { map })
    }

    /// Flag value if present, else config entry, else the default.
    fn get<T: FromStr + Clone>(&self, key: &str, flag: Option<T>, default: T) -> Result<T, CliError> {
        self.get_opt(key, flag)
            .map(|v| v.unwrap_or(default))
    }

    fn get_opt<T: FromStr + Clone>(&self, key: &str, flag: Option<T>) -> Result<Option<T>, CliError> {
        if let Some(v) = flag {
            return Ok(Some(v));
        }
        match self.map.get(key) {
            Some(raw) => raw
                .parse::<T>()
                .map(Some)
                .map_err(|_| CliError::Config(format!("bad value for `{key}`: {raw:?}"))),
            None => Ok(None),
        }
    }

    fn require<T: FromStr + Clone>(&self, key: &str, flag: Option<T>) -> Result<T, CliError> {
        self.get_opt(key, flag)?
            .ok_or_else(|| CliError::Config(format!("`{key}` is required (flag --{key} or config entry)")))
    }
}

fn require_path(key: &str, flag: Option<PathBuf>, settings: &Settings) -> Result<PathBuf, CliError> {
    if let Some(p) = flag {
        return Ok(p);
    }
    settings
        .map
        .get(key)
        .map(PathBuf::from)
        .ok_or_else(|| CliError::Config(format!("`{key}` is required (flag --{key} or config entry)")))
}

fn parse_list(raw: &str, key: &str) -> Result<Vec<f64>, CliError> {
    let values: Result<Vec<f64>, _> = raw.split(',').map(|v| v.trim().parse::<f64>()).collect();
    let values = values.map_err(|_| CliError::Config(format!("bad list for `{key}`: {raw:?}")))?;
    if values.is_empty() {
        return Err(CliError::Config(format!("`{key}` must list at least one value")));
    }
    Ok(values)
}

fn learn_params(
    alpha: f64,
    gamma: f64,
    eta: f64,
    tmax: usize,
    seed: u64,
) -> LearnParams<f64> {
    LearnParams {
        alpha,
        gamma,
        eta,
        t_max: tmax,
        seed,
        ..LearnParams::default()
    }
}

fn hybrid_coder(alpha: f64, gamma: f64, residual_tol: f64) -> CoderSpec<f64> {
    CoderSpec::Hybrid {
        alpha,
        gamma,
        stop: CoderStop {
            residual_threshold: residual_tol,
            ..CoderStop::default()
        },
    }
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(err) => {
            // help/version requests are not errors
            if err.use_stderr() {
                let _ = err.print();
                std::process::exit(EXIT_CONFIG);
            }
            let _ = err.print();
            std::process::exit(0);
        }
    };
    if let Err(err) = run(cli) {
        eprintln!("{err}");
        std::process::exit(err.exit_code());
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    let settings = Settings::load(cli.config.as_deref())?;
    match cli.command {
        Command::Gen {
            out,
            seed,
            channels,
            labels,
            atoms_per_label,
            samples_per_label,
            sparsity,
            sigma,
            outlier_fraction,
            outlier_magnitude,
        } => {
            let out = require_path("out", out, &settings)?;
            let spec = SynthSpec {
                channels: settings.get("channels", channels, 32)?,
                labels: settings.get("labels", labels, 4)?,
                atoms_per_label: settings.get("atoms-per-label", atoms_per_label, 8)?,
                samples_per_label: settings.get("samples-per-label", samples_per_label, 700)?,
                sparsity: settings.get("sparsity", sparsity, 3)?,
                gaussian_sigma: settings.get("sigma", sigma, 0.05)?,
                outlier_fraction: settings.get("outlier-fraction", outlier_fraction, 0.0)?,
                outlier_magnitude: settings.get("outlier-magnitude", outlier_magnitude, 5.0)?,
                seed: settings.get("seed", seed, 0)?,
            };
            let data = generate_synthetic(&spec)?;
            save_csv(&data, &out)?;
            eprintln!(
                "wrote {} samples ({} labels, {} channels) to {}",
                data.len(),
                data.label_count(),
                data.channels(),
                out.display()
            );
            Ok(())
        }
        Command::Train {
            data,
            out,
            coder,
            alpha,
            gamma,
            eta,
            tmax,
            lk,
            seed,
            residual_tol,
            max_atoms,
        } => {
            let data_path = require_path("data", data, &settings)?;
            let out = require_path("out", out, &settings)?;
            let coder_kind = match settings.get_opt("coder", coder.map(|c| format!("{c:?}").to_lowercase()))? {
                Some(raw) => match raw.as_str() {
                    "hybrid" => CoderKind::Hybrid,
                    "omp" => CoderKind::Omp,
                    other => {
                        return Err(CliError::Config(format!("unknown coder {other:?}")))
                    }
                },
                None => CoderKind::Hybrid,
            };
            let alpha = settings.get("alpha", alpha, 0.7)?;
            let gamma = settings.get("gamma", gamma, 0.05)?;
            let eta = settings.get("eta", eta, 1.0)?;
            let tmax = settings.get("tmax", tmax, 10)?;
            let seed = settings.get("seed", seed, 0)?;
            let residual_tol = settings.get("residual-tol", residual_tol, 0.01)?;

            let dataset: Dataset<f64> = load_csv(&data_path)?;
            let train = dataset.to_training_set()?;
            let (coder_spec, source, sizes) = match coder_kind {
                CoderKind::Hybrid => {
                    let lk = settings.require("lk", lk)?;
                    (
                        hybrid_coder(alpha, gamma, residual_tol),
                        DictionarySource::Learned,
                        vec![lk; dataset.label_count()],
                    )
                }
                CoderKind::Omp => {
                    let max_atoms =
                        settings.get("max-atoms", max_atoms, dataset.channels())?;
                    (
                        CoderSpec::Omp {
                            residual_tol,
                            max_atoms,
                        },
                        DictionarySource::Raw,
                        vec![0; dataset.label_count()],
                    )
                }
            };
            let params = learn_params(alpha, gamma, eta, tmax, seed);
            let (model, trace) = fit_traced(
                &train,
                &sizes,
                &params,
                coder_spec,
                source,
                Some(dataset.label_names().to_vec()),
            )?;
            model.save(&out)?;
            if let Some(trace) = trace {
                eprint!("{}", trace.to_lines());
            }
            eprintln!(
                "wrote model ({} atoms, {} labels) to {}",
                model.dictionary().total_atoms(),
                model.label_count(),
                out.display()
            );
            Ok(())
        }
        Command::Classify { model, data, out } => {
            let model_path = require_path("model", model, &settings)?;
            let data_path = require_path("data", data, &settings)?;
            let out = require_path("out", out, &settings)?;
            let model = ClassifierModel::<f64>::load(&model_path)?;
            let dataset: Dataset<f64> = load_csv(&data_path)?;
            let results = model.classify_batch(dataset.samples().view())?;

            let mut text = String::from("index,label");
            for k in 1..=model.label_count() {
                text.push_str(&format!(",ratio_{k}"));
            }
            text.push_str(",residual\n");
            for (idx, r) in results.iter().enumerate() {
                // label 0 marks an unclassifiable sample
                text.push_str(&format!("{},{}", idx, r.label.unwrap_or(0)));
                for ratio in &r.energy_ratios {
                    text.push_str(&format!(",{ratio:.16e}"));
                }
                text.push_str(&format!(",{:.16e}\n", r.residual_norm));
            }
            fs::write(&out, text).map_err(dlroc::Error::from)?;
            eprintln!("wrote {} predictions to {}", results.len(), out.display());
            Ok(())
        }
        Command::Eval {
            data,
            out,
            replicates,
            train_groups,
            per_label_train,
            per_label_test,
            alpha,
            gamma,
            eta,
            tmax,
            lk,
            seed,
            residual_tol,
        } => {
            let data_path = require_path("data", data, &settings)?;
            let out = require_path("out", out, &settings)?;
            let replicates = settings.get("replicates", replicates, 20)?;
            let train_groups = settings.get("train-groups", train_groups, 7)?;
            let per_label_train = settings.require("per-label-train", per_label_train)?;
            let per_label_test = settings.require("per-label-test", per_label_test)?;
            let alpha = settings.get("alpha", alpha, 0.7)?;
            let gamma = settings.get("gamma", gamma, 0.05)?;
            let eta = settings.get("eta", eta, 1.0)?;
            let tmax = settings.get("tmax", tmax, 4)?;
            let lk = settings.require("lk", lk)?;
            let seed = settings.get("seed", seed, 0)?;
            let residual_tol = settings.get("residual-tol", residual_tol, 0.01)?;

            let dataset: Dataset<f64> = load_csv(&data_path)?;
            let methods = vec![
                MethodConfig {
                    name: "DL-ROC".into(),
                    coder: hybrid_coder(alpha, gamma, residual_tol),
                    source: DictionarySource::Learned,
                    atoms_per_label: lk,
                    params: learn_params(alpha, gamma, eta, tmax, seed),
                },
                MethodConfig {
                    name: "SRC(OMP)".into(),
                    coder: CoderSpec::Omp {
                        residual_tol,
                        max_atoms: dataset.channels(),
                    },
                    source: DictionarySource::Raw,
                    atoms_per_label: 0,
                    params: learn_params(alpha, gamma, eta, tmax, seed),
                },
            ];
            let protocol = Protocol {
                n_replicates: replicates,
                train_groups_count: train_groups,
                per_label_train,
                per_label_test,
            };
            let reports = run_replicates(&dataset, &protocol, &methods, seed)?;

            // deterministic metrics record to --out; timing to stderr
            let mut text = String::new();
            for report in &reports {
                text.push_str(&report.to_lines());
                text.push('\n');
            }
            fs::write(&out, &text).map_err(dlroc::Error::from)?;
            for report in &reports {
                eprintln!(
                    "{}: macro-F {:.4} ({:.4}) over {} replicates",
                    report.method,
                    report.macro_f.mean,
                    report.macro_f.std,
                    report.replicates_completed
                );
                if let Some(t) = &report.timing {
                    eprintln!(
                        "{}: per-sample seconds mean {:.6} median {:.6} p95 {:.6}",
                        report.method, t.mean, t.median, t.p95
                    );
                }
            }
            eprintln!("wrote report to {}", out.display());
            Ok(())
        }
        Command::Cv {
            data,
            out,
            alphas,
            gammas,
            etas,
            folds,
            tmax,
            lk,
            seed,
            residual_tol,
        } => {
            let data_path = require_path("data", data, &settings)?;
            let out = require_path("out", out, &settings)?;
            let alphas = parse_list(&settings.require("alphas", alphas)?, "alphas")?;
            let gammas = parse_list(&settings.require("gammas", gammas)?, "gammas")?;
            let etas = parse_list(&settings.require("etas", etas)?, "etas")?;
            let folds = settings.get("folds", folds, 5)?;
            let tmax = settings.get("tmax", tmax, 4)?;
            let lk = settings.require("lk", lk)?;
            let seed = settings.get("seed", seed, 0)?;
            let residual_tol = settings.get("residual-tol", residual_tol, 0.01)?;

            let dataset: Dataset<f64> = load_csv(&data_path)?;
            let mut grid = Vec::new();
            for &alpha in &alphas {
                for &gamma in &gammas {
                    for &eta in &etas {
                        grid.push(GridPoint { alpha, gamma, eta });
                    }
                }
            }
            let base = MethodConfig {
                name: "DL-ROC".into(),
                coder: hybrid_coder(0.7, 0.05, residual_tol),
                source: DictionarySource::Learned,
                atoms_per_label: lk,
                params: learn_params(0.7, 0.05, 1.0, tmax, seed),
            };
            let outcome = cross_validate(&dataset, &grid, folds, &base, seed)?;

            let mut text = String::new();
            for (i, (point, score)) in grid.iter().zip(outcome.scores.iter()).enumerate() {
                text.push_str(&format!(
                    "point {i} alpha {} gamma {} eta {} macro_f {}\n",
                    point.alpha, point.gamma, point.eta, score
                ));
            }
            text.push_str(&format!(
                "best {} alpha {} gamma {} eta {}\n",
                outcome.best_index, outcome.best.alpha, outcome.best.gamma, outcome.best.eta
            ));
            fs::write(&out, &text).map_err(dlroc::Error::from)?;
            eprintln!(
                "best grid point {}: alpha {} gamma {} eta {}",
                outcome.best_index, outcome.best.alpha, outcome.best.gamma, outcome.best.eta
            );
            Ok(())
        }
        Command::Bench {
            model,
            data,
            warmup,
            out,
        } => {
            let model_path = require_path("model", model, &settings)?;
            let data_path = require_path("data", data, &settings)?;
            let warmup = settings.get("warmup", warmup, 10)?;
            let model = ClassifierModel::<f64>::load(&model_path)?;
            let dataset: Dataset<f64> = load_csv(&data_path)?;
            let stats = benchmark_timing(&model, &dataset, warmup)?;
            let text = format!(
                "samples {}\nwarmup {warmup}\nmean_seconds {:.9}\nmedian_seconds {:.9}\np95_seconds {:.9}\n",
                dataset.len() - warmup,
                stats.mean,
                stats.median,
                stats.p95
            );
            match settings.get_opt::<PathBuf>("out", out)? {
                Some(path) => {
                    fs::write(&path, &text).map_err(dlroc::Error::from)?;
                    eprintln!("wrote timing to {}", path.display());
                }
                None => print!("{text}"),
            }
            Ok(())
        }
    }
}
