use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use gmcf::checks::{fmcheck, gradcheck};
use gmcf::data::{AttributeRegime, DataSample};
use gmcf::evaluation::{evaluate, export_matrices, metric_report, ndcg_per_user, score_samples, MetricReport};
use gmcf::io::{
    dataset_to_string, load_checkpoint, parse_dataset, parse_dataset_str, parse_sample_line, parse_with_vocab,
    save_checkpoint, ParseOptions,
};
use gmcf::model::predict;
use gmcf::synth::{generate_synthetic, PlantedRule, SynthSpec};
use gmcf::training::{implicit_split, split_per_user, train, SplitDataset, TrainConfig};
use gmcf::variants::VariantConfig;
use gmcf::GmcfError;

#[derive(Parser)]
#[command(name = "gmcf", version, about = "Graph matching collaborative filtering")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write a checkpoint.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        opts: TrainOpts,
    },
    /// Score a dataset with a checkpoint and print the metric report.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        threshold: Option<f64>,
        /// Write per-user NDCG@5 and NDCG@10 as TSV.
        #[arg(long)]
        per_user: Option<PathBuf>,
    },
    /// Score one sample line (`[label\t]user fields\titem fields`).
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        sample: String,
    },
    /// Train several variants on one dataset and tabulate test metrics.
    Ablate {
        #[arg(long)]
        data: PathBuf,
        /// Variant strings separated by ';'.
        #[arg(long, default_value = DEFAULT_ABLATION)]
        variants: String,
        /// Attribute regimes separated by ',' (none, user, item, both).
        #[arg(long, default_value = "both")]
        regimes: String,
        #[command(flatten)]
        opts: TrainOpts,
    },
    /// Finite-difference check of the analytic gradients.
    Gradcheck {
        #[arg(long, default_value_t = 8)]
        d: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1)]
        instances: usize,
        #[arg(long, default_value_t = 4)]
        max_attrs: usize,
        #[arg(long, default_value = "gmcf")]
        variant: String,
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
    },
    /// Compare the FM-reduction mode against the closed-form FM.
    Fmcheck {
        #[arg(long, default_value_t = 50)]
        n: usize,
        #[arg(long, default_value_t = 8)]
        d: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1e-9)]
        tolerance: f64,
    },
    /// Generate a planted-rule dataset and its rule sidecar.
    Synth {
        #[arg(long)]
        out: PathBuf,
        /// Defaults to `<out>.rule.json`.
        #[arg(long)]
        sidecar: Option<PathBuf>,
        #[arg(long, default_value_t = 500)]
        users: usize,
        #[arg(long, default_value_t = 200)]
        items: usize,
        #[arg(long, default_value_t = 3)]
        user_attrs: usize,
        #[arg(long, default_value_t = 2)]
        item_attrs: usize,
        #[arg(long, default_value_t = 6)]
        levels: usize,
        #[arg(long, default_value_t = 20)]
        samples_per_user: usize,
        #[arg(long, default_value_t = 2)]
        rank: usize,
        #[arg(long, default_value = "both")]
        rule: String,
        #[arg(long, default_value_t = 1.0)]
        inner_weight: f64,
        #[arg(long, default_value_t = 0.1)]
        noise: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Attribute regime of the written file (none, user, item, both).
        #[arg(long, default_value = "both")]
        regime: String,
    },
    /// Similarity and matching grids between two attribute groups.
    ExportMatrices {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Comma-separated attribute names.
        #[arg(long)]
        rows: String,
        /// Comma-separated attribute names.
        #[arg(long)]
        cols: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

const DEFAULT_ABLATION: &str = "gmcf;inner=bi;cross=none;cross=mlp;cross=mlp-separate;fuse=sum;fuse=mlp;fm";

/// Training flags; each overrides the same key of `--config`.
#[derive(Args, Clone, Default)]
struct TrainOpts {
    /// `key = value` file; flags take precedence over it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    variant: Option<String>,
    #[arg(long)]
    patience: Option<usize>,
    #[arg(long)]
    hidden_layers: Option<usize>,
    /// Read the label column as a rating; positive iff rating > threshold.
    #[arg(long)]
    threshold: Option<f64>,
    #[arg(long)]
    min_positives: Option<usize>,
}

enum Failure {
    Usage(String),
    Data(String),
}

impl From<GmcfError> for Failure {
    fn from(e: GmcfError) -> Self {
        match e {
            GmcfError::InvalidConfig(m) => Failure::Usage(m),
            other => Failure::Data(other.to_string()),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Data(e.to_string())
    }
}

type CliResult<T> = std::result::Result<T, Failure>;

const CONFIG_KEYS: [&str; 11] = [
    "dim",
    "lr",
    "lambda",
    "epochs",
    "batch_size",
    "seed",
    "variant",
    "patience",
    "hidden_layers",
    "threshold",
    "min_positives",
];

fn read_config(path: &Path) -> CliResult<HashMap<String, String>> {
    let text = fs::read_to_string(path).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))?;
    let mut out = HashMap::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Failure::Usage(format!("config line {}: expected `key = value`", n + 1)))?;
        let key = k.trim().replace('-', "_");
        if !CONFIG_KEYS.contains(&key.as_str()) {
            return Err(Failure::Usage(format!("config line {}: unknown key '{key}'", n + 1)));
        }
        out.insert(key, v.trim().to_string());
    }
    Ok(out)
}

fn pick<T: std::str::FromStr>(flag: Option<T>, file: &HashMap<String, String>, key: &str, default: T) -> CliResult<T> {
    if let Some(v) = flag {
        return Ok(v);
    }
    match file.get(key) {
        Some(raw) => raw
            .parse()
            .map_err(|_| Failure::Usage(format!("config key '{key}': cannot parse '{raw}'"))),
        None => Ok(default),
    }
}

fn resolve(opts: &TrainOpts) -> CliResult<(TrainConfig, ParseOptions)> {
    let file = match &opts.config {
        Some(p) => read_config(p)?,
        None => HashMap::new(),
    };
    let d = TrainConfig::default();
    let variant: String = pick(opts.variant.clone(), &file, "variant", d.variant.to_string())?;
    let config = TrainConfig {
        dim: pick(opts.dim, &file, "dim", d.dim)?,
        learning_rate: pick(opts.lr, &file, "lr", d.learning_rate)?,
        lambda: pick(opts.lambda, &file, "lambda", d.lambda)?,
        epochs: pick(opts.epochs, &file, "epochs", d.epochs)?,
        batch_size: pick(opts.batch_size, &file, "batch_size", d.batch_size)?,
        seed: pick(opts.seed, &file, "seed", d.seed)?,
        variant: variant.parse()?,
        patience: pick(opts.patience, &file, "patience", d.patience)?,
        hidden_layers: pick(opts.hidden_layers, &file, "hidden_layers", d.hidden_layers)?,
    };
    config.validate()?;
    let threshold = match (opts.threshold, file.get("threshold")) {
        (Some(t), _) => Some(t),
        (None, Some(raw)) => Some(
            raw.parse()
                .map_err(|_| Failure::Usage(format!("config key 'threshold': cannot parse '{raw}'")))?,
        ),
        (None, None) => None,
    };
    let parse = ParseOptions {
        threshold,
        min_positives: pick(opts.min_positives, &file, "min_positives", 0)?,
    };
    Ok((config, parse))
}

/// Per-user split; positive-only data gets sampled negatives.
fn prepare(samples: &[DataSample], seed: u64) -> CliResult<SplitDataset> {
    if samples.iter().all(|s| s.label == 1.0) {
        Ok(implicit_split(samples, seed)?)
    } else {
        Ok(split_per_user(samples, seed))
    }
}

fn run_train(data: &Path, out: &Path, opts: &TrainOpts) -> CliResult<()> {
    let (config, parse) = resolve(opts)?;
    let (ds, report) = parse_dataset(data, parse)?;
    eprintln!(
        "parsed lines={} samples={} positives={} users={} dropped_users={} attributes={}",
        report.lines, report.samples, report.positives, report.users, report.dropped_users, report.attributes
    );
    let split = prepare(&ds.samples, config.seed)?;
    let outcome = train(&split, ds.vocab.len(), &config, |e| println!("{e}"))?;
    save_checkpoint(&outcome.params, &ds.vocab, out)?;
    match evaluate(&outcome.params, &split.test) {
        Ok(m) => println!("test {m}"),
        Err(e) => eprintln!("test metrics unavailable: {e}"),
    }
    Ok(())
}

fn run_evaluate(checkpoint: &Path, data: &Path, threshold: Option<f64>, per_user: Option<&Path>) -> CliResult<()> {
    let ck = load_checkpoint(checkpoint)?;
    let text = fs::read_to_string(data)?;
    let samples = if text.trim().is_empty() {
        Vec::new()
    } else {
        parse_with_vocab(
            &text,
            &ck.vocab,
            ParseOptions {
                threshold,
                min_positives: 0,
            },
        )?
    };
    let scored = score_samples(&ck.params, &samples)?;
    let report = metric_report(&scored)?;
    println!("{report}");
    if let Some(path) = per_user {
        let at5 = ndcg_per_user(&scored, 5)?;
        let at10 = ndcg_per_user(&scored, 10)?;
        let mut out = String::from("user\titems\tndcg@5\tndcg@10\n");
        for (a, b) in at5.iter().zip(&at10) {
            let _ = writeln!(
                out,
                "{}\t{}\t{:.6}\t{:.6}",
                ck.vocab.name(a.user),
                a.items,
                a.ndcg,
                b.ndcg
            );
        }
        fs::write(path, out)?;
    }
    Ok(())
}

fn run_predict(checkpoint: &Path, sample: &str) -> CliResult<()> {
    let ck = load_checkpoint(checkpoint)?;
    let line = match sample.split('\t').count() {
        2 => format!("0\t{sample}"),
        _ => sample.to_string(),
    };
    let s = parse_sample_line(&line, &ck.vocab)?;
    let r = predict(&s, &ck.params)?;
    println!("score={} probability={}", r.score, r.probability());
    Ok(())
}

fn run_ablate(data: &Path, variants: &str, regimes: &str, opts: &TrainOpts) -> CliResult<()> {
    let (config, parse) = resolve(opts)?;
    let variants = variants
        .split(';')
        .map(|v| v.trim().parse::<VariantConfig>())
        .collect::<Result<Vec<_>, _>>()?;
    let regimes = regimes
        .split(',')
        .map(|r| r.trim().parse::<AttributeRegime>())
        .collect::<Result<Vec<_>, _>>()?;
    let (ds, _) = parse_dataset(data, parse)?;
    let base = prepare(&ds.samples, config.seed)?;
    println!(
        "{:<8}{:<48}{:>10}{:>10}{:>10}{:>10}",
        "regime", "variant", "auc", "logloss", "ndcg@5", "ndcg@10"
    );
    for regime in regimes {
        let restrict = |v: &[DataSample]| v.iter().map(|s| s.restricted(regime)).collect::<Vec<_>>();
        let split = SplitDataset {
            train: restrict(&base.train),
            validation: restrict(&base.validation),
            test: restrict(&base.test),
            underfilled_users: base.underfilled_users.clone(),
        };
        for &variant in &variants {
            let cfg = TrainConfig {
                variant,
                ..config.clone()
            };
            let outcome = train(&split, ds.vocab.len(), &cfg, |_| {})?;
            let m: MetricReport = evaluate(&outcome.params, &split.test)?;
            println!(
                "{:<8}{:<48}{:>10.4}{:>10.4}{:>10.4}{:>10.4}",
                regime.to_string(),
                variant.to_string(),
                m.auc,
                m.logloss,
                m.ndcg5,
                m.ndcg10
            );
        }
    }
    Ok(())
}

fn run_synth(spec: SynthSpec, out: &Path, sidecar: Option<PathBuf>, regime: &str) -> CliResult<()> {
    let regime: AttributeRegime = regime.parse()?;
    let data = generate_synthetic(&spec)?;
    let text = if regime == AttributeRegime::Both {
        data.text.clone()
    } else {
        let (ds, _) = parse_dataset_str(&data.text, ParseOptions::default())?;
        let samples: Vec<DataSample> = ds.samples.iter().map(|s| s.restricted(regime)).collect();
        dataset_to_string(&samples, &ds.vocab)
    };
    fs::write(out, &text)?;
    let sidecar = sidecar.unwrap_or_else(|| {
        let mut p = out.as_os_str().to_owned();
        p.push(".rule.json");
        PathBuf::from(p)
    });
    fs::write(&sidecar, data.sidecar_json())?;
    println!(
        "samples={} clean_agreement={:.4} sidecar={}",
        text.lines().count(),
        data.rule.clean_agreement,
        sidecar.display()
    );
    Ok(())
}

fn run_export(checkpoint: &Path, rows: &str, cols: &str, out: Option<&Path>) -> CliResult<()> {
    let ck = load_checkpoint(checkpoint)?;
    let ids = |names: &str| -> CliResult<Vec<usize>> {
        names
            .split(',')
            .map(|n| {
                ck.vocab
                    .lookup(n.trim())
                    .map(|a| a.id)
                    .ok_or_else(|| Failure::Data(format!("unknown attribute '{}'", n.trim())))
            })
            .collect()
    };
    let m = export_matrices(&ck.params.embeddings, &ids(rows)?, &ids(cols)?)?;
    let text = m.to_text(&ck.vocab);
    match out {
        Some(p) => fs::write(p, text)?,
        None => print!("{text}"),
    }
    Ok(())
}

fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Train { data, out, opts } => run_train(&data, &out, &opts),
        Command::Evaluate {
            checkpoint,
            data,
            threshold,
            per_user,
        } => run_evaluate(&checkpoint, &data, threshold, per_user.as_deref()),
        Command::Predict { checkpoint, sample } => run_predict(&checkpoint, &sample),
        Command::Ablate {
            data,
            variants,
            regimes,
            opts,
        } => run_ablate(&data, &variants, &regimes, &opts),
        Command::Gradcheck {
            d,
            seed,
            instances,
            max_attrs,
            variant,
            tolerance,
        } => {
            if d == 0 || instances == 0 || max_attrs == 0 {
                return Err(Failure::Usage("d, instances and max-attrs must be positive".into()));
            }
            let r = gradcheck(variant.parse()?, d, max_attrs, seed, instances)?;
            println!(
                "max_relative_error={:.3e} instances={} redrawn={}",
                r.max_relative_error, r.instances, r.redrawn
            );
            if r.max_relative_error >= tolerance {
                return Err(Failure::Data(format!("relative error exceeds {tolerance:e}")));
            }
            Ok(())
        }
        Command::Fmcheck { n, d, seed, tolerance } => {
            if n == 0 || d == 0 {
                return Err(Failure::Usage("n and d must be positive".into()));
            }
            let dev = fmcheck(n, d, seed)?;
            println!("max_deviation={dev:.3e} instances={n}");
            if dev >= tolerance {
                return Err(Failure::Data(format!("deviation exceeds {tolerance:e}")));
            }
            Ok(())
        }
        Command::Synth {
            out,
            sidecar,
            users,
            items,
            user_attrs,
            item_attrs,
            levels,
            samples_per_user,
            rank,
            rule,
            inner_weight,
            noise,
            seed,
            regime,
        } => {
            let rule: PlantedRule = rule.parse()?;
            let spec = SynthSpec {
                users,
                items,
                user_attrs,
                item_attrs,
                levels,
                samples_per_user,
                rank,
                rule,
                inner_weight,
                noise,
                seed,
            };
            run_synth(spec, &out, sidecar, &regime)
        }
        Command::ExportMatrices {
            checkpoint,
            rows,
            cols,
            out,
        } => run_export(&checkpoint, &rows, &cols, out.as_deref()),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
        Err(Failure::Data(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
    }
}
