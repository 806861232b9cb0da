//! `iphash`: synthesize data, train, encode, search, evaluate, check
//! gradients and sweep hyperparameters.

mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context};
use clap::{Parser, Subcommand, ValueEnum};
use iphash_core::dataio::{generate_synthetic, read_tensor, write_tensor, DType, Dataset, Tensor};
use iphash_core::evalkit::{
    evaluate, map_at_k, write_pr_csv, write_report, EvalOptions, EvalReport, RelevanceRule,
};
use iphash_core::numkit::Matrix;
use iphash_core::retrieval::{search, PackedCodes, RankedList};
use iphash_core::trainer::{
    encode_dataset, gradcheck, train, GradcheckOptions, ModelFile, TrainConfig,
};

use config::{EvalFlags, EvalSection, RunConfig, SynthFlags, TrainFlags};

#[derive(Debug, Parser)]
#[command(
    name = "iphash",
    version,
    about = "Information-preserving binary hashing"
)]
struct Cli {
    /// JSON run configuration; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic dataset directory.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        flags: SynthFlags,
    },
    /// Train a model on a dataset's training split.
    Train {
        /// Dataset manifest.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Model file to write.
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        flags: TrainFlags,
    },
    /// Encode every sample of a dataset into ±1 codes.
    Encode {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value_t = CodeDType::F32)]
        dtype: CodeDType,
    },
    /// Rank database codes by Hamming distance for each query.
    Retrieve {
        #[command(flatten)]
        codes: CodeSource,
        #[arg(long)]
        k: Option<usize>,
        /// Rankings JSON to write.
        #[arg(long)]
        out: PathBuf,
    },
    /// Compute MAP@k and the precision-recall curve.
    Eval {
        #[command(flatten)]
        codes: CodeSource,
        /// Labels of the queries (with --query-codes).
        #[arg(long)]
        query_labels: Option<PathBuf>,
        /// Labels of the database (with --db-codes).
        #[arg(long)]
        db_labels: Option<PathBuf>,
        /// Model whose codes are evaluated when --codes is absent.
        #[arg(long)]
        model: Option<PathBuf>,
        #[command(flatten)]
        flags: EvalFlags,
        /// Directory receiving eval-report.json and pr-curve.csv.
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare analytic gradients with central finite differences.
    Gradcheck {
        #[arg(long, default_value_t = 20)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1e-5)]
        step: f64,
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
        /// JSON report to write.
        #[arg(long)]
        report: Option<PathBuf>,
        #[arg(long, hide = true)]
        mutate: Option<f64>,
    },
    /// Train and evaluate once per value of one hyperparameter.
    Sweep {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, value_enum)]
        param: SweepParam,
        #[arg(long, value_delimiter = ',', num_args = 1.., required = true)]
        values: Vec<f64>,
        /// Training seeds averaged per value.
        #[arg(long, value_delimiter = ',', num_args = 1..)]
        seeds: Option<Vec<u64>>,
        #[command(flatten)]
        flags: TrainFlags,
        #[command(flatten)]
        eval: EvalFlags,
        /// Directory receiving sweep.csv.
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, Clone, clap::Args)]
struct CodeSource {
    /// Dataset manifest providing the query/database split and labels.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Codes for every dataset sample.
    #[arg(long)]
    codes: Option<PathBuf>,
    /// Query codes, used instead of --data/--codes.
    #[arg(long)]
    query_codes: Option<PathBuf>,
    /// Database codes, used instead of --data/--codes.
    #[arg(long)]
    db_codes: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum CodeDType {
    F32,
    F64,
}

#[derive(Debug, Clone, Copy, PartialEq, ValueEnum)]
enum SweepParam {
    Tau,
    MaskRatio,
}

/// Failure with its exit code: 2 for usage, 1 otherwise.
#[derive(Debug)]
enum Failure {
    Usage(anyhow::Error),
    Runtime(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        match e.downcast_ref::<iphash_core::Error>() {
            Some(iphash_core::Error::InvalidParameter { .. }) => Failure::Usage(e),
            _ => Failure::Runtime(e),
        }
    }
}

impl From<iphash_core::Error> for Failure {
    fn from(e: iphash_core::Error) -> Self {
        Failure::from(anyhow::Error::from(e))
    }
}

fn usage(msg: impl std::fmt::Display) -> Failure {
    Failure::Usage(anyhow!("{msg}"))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = configure_threads().and_then(|()| run(cli));
    match result {
        Ok(code) => code,
        Err(Failure::Usage(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn configure_threads() -> Result<(), Failure> {
    let Ok(value) = std::env::var("IPHASH_THREADS") else {
        return Ok(());
    };
    let n: usize = value.trim().parse().map_err(|_| {
        usage(format!(
            "IPHASH_THREADS must be a non-negative integer, got `{value}`"
        ))
    })?;
    if n > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Failure::Runtime(e.into()))?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<ExitCode, Failure> {
    let mut cfg = RunConfig::load(cli.config.as_deref()).map_err(Failure::Usage)?;
    match cli.command {
        Command::Synth { out, flags } => {
            flags.apply(&mut cfg.synth);
            cfg.synth.validate()?;
            let manifest = generate_synthetic(&cfg.synth, &out)?;
            println!("{}", manifest.display());
        }
        Command::Train { data, out, flags } => {
            flags.apply(&mut cfg.train);
            cfg.train.validate()?;
            let dataset = load_dataset(data.as_ref().or(cfg.data.as_ref()))?;
            let model = train(&dataset, &cfg.train)?;
            create_parent(&out)?;
            model.save(&out)?;
            if let Some(last) = model.log.last() {
                println!("epoch {} total {:.6}", last.epoch, last.mean.total);
            }
            println!("{}", out.display());
        }
        Command::Encode {
            data,
            model,
            out,
            dtype,
        } => {
            let dataset = load_dataset(data.as_ref().or(cfg.data.as_ref()))?;
            let model = load_model(model.as_ref().or(cfg.model.as_ref()))?;
            let codes = encode_dataset(&dataset, &model)?;
            let dtype = match dtype {
                CodeDType::F32 => DType::F32,
                CodeDType::F64 => DType::F64,
            };
            create_parent(&out)?;
            write_tensor(&out, &Tensor::from(&codes), dtype)?;
            println!("{}", out.display());
        }
        Command::Retrieve { codes, k, out } => {
            let k = k.unwrap_or(cfg.eval.k);
            check_k(k)?;
            let pair = load_code_pair(&codes, cfg.data.as_ref())?;
            let q = PackedCodes::pack(&pair.query_codes)?;
            let db = PackedCodes::pack(&pair.db_codes)?;
            let lists: Vec<RankedList> = search(&q, &db, k)?
                .into_iter()
                .map(|mut l| {
                    if let Some((qi, di)) = &pair.indices {
                        l.query = qi[l.query];
                        l.indices.iter_mut().for_each(|j| *j = di[*j]);
                    }
                    l
                })
                .collect();
            create_parent(&out)?;
            write_json(&out, &lists)?;
            println!("{}", out.display());
        }
        Command::Eval {
            codes,
            query_labels,
            db_labels,
            model,
            flags,
            out,
        } => {
            flags.apply(&mut cfg.eval);
            check_k(cfg.eval.k)?;
            let report = run_eval(&cfg, &codes, query_labels, db_labels, model)?;
            std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
            write_report(&out.join("eval-report.json"), &report)?;
            write_pr_csv(&out.join("pr-curve.csv"), &report.pr_curve)?;
            println!("map@{} {:.6}", report.k, report.map_at_k);
        }
        Command::Gradcheck {
            trials,
            seed,
            step,
            tolerance,
            report,
            mutate,
        } => {
            if trials == 0 {
                return Err(usage("--trials must be at least 1"));
            }
            if !(step > 0.0 && tolerance > 0.0) {
                return Err(usage("--step and --tolerance must be positive"));
            }
            let opts = GradcheckOptions {
                trials,
                seed,
                step,
                tolerance,
                mutation: mutate,
            };
            let started = std::time::Instant::now();
            let result = gradcheck(&opts)?;
            log::info!("gradcheck took {:.2?}", started.elapsed());
            for t in &result.trials {
                println!(
                    "trial {:>3}  n={} P={} d_in={} d_h={} d={} L={} K={} {:?}  max_rel_error {:.3e} at {}  {}",
                    t.trial,
                    t.batch,
                    t.tokens,
                    t.token_dim,
                    t.hidden,
                    t.dim,
                    t.bits,
                    t.classes,
                    t.kl_direction,
                    t.max_rel_error,
                    t.worst,
                    if t.passed { "ok" } else { "FAIL" }
                );
            }
            println!(
                "{}  max_rel_error {:.3e}  tolerance {:.1e}",
                if result.passed { "PASS" } else { "FAIL" },
                result.max_rel_error,
                tolerance
            );
            if let Some(path) = report {
                create_parent(&path)?;
                write_json(&path, &result)?;
            }
            if !result.passed {
                return Ok(ExitCode::from(1));
            }
        }
        Command::Sweep {
            data,
            param,
            values,
            seeds,
            flags,
            eval,
            out,
        } => {
            flags.apply(&mut cfg.train);
            eval.apply(&mut cfg.eval);
            check_k(cfg.eval.k)?;
            let seeds = seeds.unwrap_or_else(|| vec![cfg.train.seed]);
            let mut runs = Vec::with_capacity(values.len());
            for &value in &values {
                let configs: Vec<TrainConfig> = seeds
                    .iter()
                    .map(|&seed| {
                        let mut c = cfg.train.clone();
                        c.seed = seed;
                        match param {
                            SweepParam::Tau => c.tau = value,
                            SweepParam::MaskRatio => c.mask_ratio = value,
                        }
                        c
                    })
                    .collect();
                configs[0].validate()?;
                runs.push((value, configs));
            }
            let dataset = load_dataset(data.as_ref().or(cfg.data.as_ref()))?;
            let split = &dataset.manifest.split;
            let opts = eval_options(&cfg.eval);
            let mut csv = String::from("value,map_at_k\n");
            for (value, configs) in runs {
                let mut total = 0.0;
                for c in &configs {
                    let model = train(&dataset, c)?;
                    let codes = encode_dataset(&dataset, &model)?;
                    let map = map_at_k(
                        &split.query,
                        &split.database,
                        &codes,
                        &dataset.labels,
                        &opts,
                    )?
                    .map_at_k;
                    log::info!("{param:?}={value} seed {} map@{} {map:.6}", c.seed, opts.k);
                    total += map;
                }
                let mean = total / configs.len() as f64;
                println!("{value} {mean:.6}");
                csv.push_str(&format!("{value},{mean}\n"));
            }
            std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
            let path = out.join("sweep.csv");
            std::fs::write(&path, csv).with_context(|| format!("writing {}", path.display()))?;
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn check_k(k: usize) -> Result<(), Failure> {
    if k == 0 {
        return Err(usage("--k must be at least 1"));
    }
    Ok(())
}

fn eval_options(e: &EvalSection) -> EvalOptions {
    EvalOptions {
        k: e.k,
        ap_denominator: e.ap_denominator,
        rule: RelevanceRule::ShareAnyLabel,
    }
}

fn load_dataset(path: Option<&PathBuf>) -> Result<Dataset, Failure> {
    let path = path.ok_or_else(|| usage("a dataset manifest is required (--data)"))?;
    Ok(Dataset::load(path)?)
}

fn load_model(path: Option<&PathBuf>) -> Result<ModelFile, Failure> {
    let path = path.ok_or_else(|| usage("a model file is required (--model)"))?;
    Ok(ModelFile::load(path)?)
}

fn load_matrix(path: &Path) -> anyhow::Result<Matrix> {
    Ok(read_tensor(path)?.into_matrix()?)
}

struct CodePair {
    query_codes: Matrix,
    db_codes: Matrix,
    /// Dataset indices of query and database rows, when a split was used.
    indices: Option<(Vec<usize>, Vec<usize>)>,
    dataset: Option<Dataset>,
}

fn select_rows(m: &Matrix, idx: &[usize]) -> anyhow::Result<Matrix> {
    let rows = idx
        .iter()
        .map(|&i| {
            if i < m.rows() {
                Ok(m.row(i).to_vec())
            } else {
                bail!("index {i} out of range for {} code rows", m.rows())
            }
        })
        .collect::<anyhow::Result<Vec<_>>>()?;
    Ok(Matrix::from_rows(&rows)?)
}

fn load_code_pair(src: &CodeSource, default_data: Option<&PathBuf>) -> Result<CodePair, Failure> {
    match (&src.query_codes, &src.db_codes) {
        (Some(q), Some(db)) => {
            if src.codes.is_some() {
                return Err(usage(
                    "--codes cannot be combined with --query-codes/--db-codes",
                ));
            }
            Ok(CodePair {
                query_codes: load_matrix(q)?,
                db_codes: load_matrix(db)?,
                indices: None,
                dataset: None,
            })
        }
        (None, None) => {
            let dataset = load_dataset(src.data.as_ref().or(default_data))?;
            let codes = src
                .codes
                .as_ref()
                .ok_or_else(|| usage("--codes is required with --data"))?;
            let codes = load_matrix(codes)?;
            if codes.rows() != dataset.len() {
                return Err(Failure::Runtime(anyhow!(
                    "{} code rows for a dataset of {} samples",
                    codes.rows(),
                    dataset.len()
                )));
            }
            let split = &dataset.manifest.split;
            Ok(CodePair {
                query_codes: select_rows(&codes, &split.query)?,
                db_codes: select_rows(&codes, &split.database)?,
                indices: Some((split.query.clone(), split.database.clone())),
                dataset: Some(dataset),
            })
        }
        _ => Err(usage("--query-codes and --db-codes must be given together")),
    }
}

fn run_eval(
    cfg: &RunConfig,
    src: &CodeSource,
    query_labels: Option<PathBuf>,
    db_labels: Option<PathBuf>,
    model_path: Option<PathBuf>,
) -> Result<EvalReport, Failure> {
    let opts = eval_options(&cfg.eval);
    let model_path = model_path.or_else(|| cfg.model.clone());
    let explicit = src.query_codes.is_some() || src.db_codes.is_some();
    let mut model_config = None;

    let mut report = if explicit {
        let (Some(ql), Some(dl)) = (query_labels, db_labels) else {
            return Err(usage(
                "--query-labels and --db-labels are required with --query-codes/--db-codes",
            ));
        };
        let pair = load_code_pair(src, None)?;
        evaluate(
            &pair.query_codes,
            &pair.db_codes,
            &load_matrix(&ql)?,
            &load_matrix(&dl)?,
            &opts,
        )?
    } else if src.codes.is_some() {
        let pair = load_code_pair(src, cfg.data.as_ref())?;
        let dataset = pair.dataset.expect("split mode loads the dataset");
        let split = &dataset.manifest.split;
        evaluate(
            &pair.query_codes,
            &pair.db_codes,
            &select_rows(&dataset.labels, &split.query)?,
            &select_rows(&dataset.labels, &split.database)?,
            &opts,
        )?
    } else {
        let dataset = load_dataset(src.data.as_ref().or(cfg.data.as_ref()))?;
        let model = load_model(model_path.as_ref())?;
        let codes = encode_dataset(&dataset, &model)?;
        let split = &dataset.manifest.split;
        model_config = Some(model.config);
        map_at_k(
            &split.query,
            &split.database,
            &codes,
            &dataset.labels,
            &opts,
        )?
    };

    report.seed = model_config.as_ref().map(|c| c.seed);
    report.config = Some(serde_json::json!({
        "eval": cfg.eval,
        "train": model_config,
    }));
    Ok(report)
}

fn create_parent(path: &Path) -> anyhow::Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    Ok(())
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}
