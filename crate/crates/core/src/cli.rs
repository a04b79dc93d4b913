//! Command-line front end: `generate`, `train`, `eval`, `ablate`, `report`.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{CommandFactory, FromArgMatches, Parser, Subcommand};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::codec::{read_file, sha256_hex, write_file};
use crate::config::Config;
use crate::data::{self, Dataset};
use crate::error::{Error, Result};
use crate::eval::{compare_runs, evaluate, roc_csv, roc_for_split, EvalReport};
use crate::margin::MarginPreset;
use crate::numeric::checkpoint;
use crate::trainer::run_dir::{self, train_to_dir, EnsembleManifest, MANIFEST_FILE};

pub const RUN_MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Parser)]
#[command(name = "hardboost", version, about = "Sample-level boosting for angular-margin embeddings")]
pub struct Cli {
    /// Seed for every random stream (overrides gen.seed and train.seed)
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset
    Generate {
        /// TOML config; only the gen section is used. Defaults apply when omitted
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output dataset file
        #[arg(long)]
        out: PathBuf,
        /// Also write a per-sample CSV next to the dataset
        #[arg(long)]
        csv: bool,
    },
    /// Run the boosting pipeline into a run directory
    Train {
        /// Dataset written by `generate`
        #[arg(long)]
        data: PathBuf,
        /// TOML config; only the train section is used
        #[arg(long)]
        config: Option<PathBuf>,
        /// Run directory
        #[arg(long)]
        out: PathBuf,
        /// Continue a partially finished run in `--out`
        #[arg(long)]
        resume: bool,
    },
    /// Evaluate a finished run on the held-out split
    Eval {
        /// Run directory holding ensemble.manifest
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Comma-separated ensemble weights replacing the manifest's
        #[arg(long, value_delimiter = ',')]
        betas: Option<Vec<f64>>,
        /// Directory for eval.json and eval.csv [default: the run directory]
        #[arg(long)]
        out: Option<PathBuf>,
        /// Write the overall verification ROC as `far,tar` CSV
        #[arg(long)]
        emit_roc: Option<PathBuf>,
    },
    /// Sweep one training parameter across seeds and tabulate medians
    Ablate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// `key=v1,v2,...` over train.* keys, e.g. `alpha=0.05,0.1,0.3,0.5`,
        /// `variant=baseline,v1,v2,v3` or `margin=cosface,arcface,adaface-like`
        #[arg(long)]
        sweep: String,
        /// Training seeds per sweep point [default: the --seed value, or 0]
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        /// Output directory for per-run directories and the table
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare two eval.json reports metric by metric
    Report {
        a: PathBuf,
        b: PathBuf,
        /// Write the delta table as CSV
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Provenance record written next to every command's artifacts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    pub format_version: u32,
    pub command_line: Vec<String>,
    pub seed: Option<u64>,
    pub config: Config,
    pub format_versions: BTreeMap<String, u32>,
    /// Artifact path to SHA-256.
    pub artifacts: BTreeMap<String, String>,
}

impl RunManifest {
    fn new(args: &[String], seed: Option<u64>, config: &Config) -> Self {
        let format_versions = BTreeMap::from([
            ("checkpoint".to_string(), checkpoint::VERSION),
            ("dataset".to_string(), data::VERSION),
            ("ensemble_manifest".to_string(), run_dir::MANIFEST_VERSION),
            ("run_manifest".to_string(), RUN_MANIFEST_VERSION),
        ]);
        Self {
            format_version: RUN_MANIFEST_VERSION,
            command_line: args.to_vec(),
            seed,
            config: config.clone(),
            format_versions,
            artifacts: BTreeMap::new(),
        }
    }

    fn record(&mut self, path: &Path) -> Result<()> {
        let digest = sha256_hex(&read_file(path)?);
        self.artifacts.insert(path.display().to_string(), digest);
        Ok(())
    }

    fn write(&self, path: &Path) -> Result<()> {
        let text = toml::to_string(self).expect("run manifest serializes");
        write_file(path, text.as_bytes())
    }
}

fn defaults_help() -> String {
    let mut out = String::from("Config keys and defaults (TOML, unknown keys are rejected):\n\n");
    for line in Config::default().to_toml().lines() {
        let _ = writeln!(out, "  {line}");
    }
    out
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I) -> Result<()>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let args: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let matches = Cli::command()
        .after_long_help(defaults_help())
        .get_matches_from(args.clone());
    let cli = Cli::from_arg_matches(&matches).map_err(|e| Error::config("arguments", e.to_string()))?;
    let argv: Vec<String> = args.iter().map(|a| a.to_string_lossy().into_owned()).collect();
    execute(cli, &argv)
}

fn load_config(path: Option<&Path>, seed: Option<u64>) -> Result<Config> {
    let config = match path {
        Some(p) => Config::load(p)?,
        None => Config::default(),
    };
    Ok(match seed {
        Some(s) => config.with_seed(s),
        None => config,
    })
}

fn sidecar(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn load_dataset(path: &Path) -> Result<(Dataset, String)> {
    let bytes = read_file(path)?;
    let dataset = Dataset::from_bytes(&bytes, path)?;
    Ok((dataset, sha256_hex(&bytes)))
}

pub fn execute(cli: Cli, argv: &[String]) -> Result<()> {
    let started = Instant::now();
    let seed = cli.seed;
    match cli.command {
        Command::Generate { config, out, csv } => {
            let config = load_config(config.as_deref(), seed)?;
            let dataset = data::generate(&config.gen)?;
            dataset.save(&out)?;
            let mut manifest = RunManifest::new(argv, seed, &config);
            manifest.record(&out)?;
            if csv {
                let csv_path = out.with_extension("csv");
                write_file(&csv_path, dataset.to_csv().as_bytes())?;
                manifest.record(&csv_path)?;
            }
            manifest.write(&sidecar(&out, ".manifest"))?;
            println!(
                "wrote {} ({} train, {} eval samples)",
                out.display(),
                dataset.train.len(),
                dataset.eval.samples.len()
            );
        }
        Command::Train {
            data,
            config,
            out,
            resume,
        } => {
            let config = load_config(config.as_deref(), seed)?;
            let (dataset, digest) = load_dataset(&data)?;
            let outcome = train_to_dir(&dataset, &digest, &config.train, &out, resume)?;
            let mut manifest = RunManifest::new(argv, seed, &config);
            manifest.record(&data)?;
            manifest.record(&out.join(MANIFEST_FILE))?;
            manifest.write(&out.join("run.manifest"))?;
            for r in &outcome.rounds {
                println!(
                    "round {}: final loss {:.6}, {} samples, {:.1}s",
                    r.record.round,
                    r.record.final_loss,
                    r.record.trained_samples,
                    r.record.wall_clock.as_secs_f64()
                );
            }
        }
        Command::Eval {
            run,
            data,
            betas,
            out,
            emit_roc,
        } => {
            let manifest = EnsembleManifest::load(&run.join(MANIFEST_FILE))?;
            let ensemble = manifest.load_ensemble(&run, betas)?;
            let (dataset, _) = load_dataset(&data)?;
            let report = evaluate(&dataset.eval, &ensemble)?;
            let out = out.unwrap_or_else(|| run.clone());
            write_file(&out.join("eval.json"), report.to_json().as_bytes())?;
            write_file(&out.join("eval.csv"), report.to_csv().as_bytes())?;
            if let Some(path) = emit_roc {
                let roc = roc_for_split(&dataset.eval, &ensemble)?;
                write_file(&path, roc_csv(&roc).as_bytes())?;
            }
            print!("{}", summary_text(&report));
        }
        Command::Ablate {
            data,
            config,
            sweep,
            seeds,
            out,
        } => {
            let config = load_config(config.as_deref(), seed)?;
            let seeds = seeds.unwrap_or_else(|| vec![seed.unwrap_or(0)]);
            let table = ablate(&data, &config, &sweep, &seeds, &out)?;
            print!("{}", table.to_text());
            write_file(&out.join("ablation.csv"), table.to_csv().as_bytes())?;
            write_file(&out.join("ablation.txt"), table.to_text().as_bytes())?;
            if let Some((_, err)) = table.failures.into_iter().next() {
                return Err(err);
            }
        }
        Command::Report { a, b, out } => {
            let ra = EvalReport::from_json(&read_to_string(&a)?)?;
            let rb = EvalReport::from_json(&read_to_string(&b)?)?;
            let delta = compare_runs(&ra, &rb)?;
            if let Some(path) = out {
                write_file(&path, delta.to_csv().as_bytes())?;
            }
            print!("{}", delta.to_text());
        }
    }
    eprintln!("done in {:.1}s", started.elapsed().as_secs_f64());
    Ok(())
}

fn read_to_string(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn summary_text(report: &EvalReport) -> String {
    let mut out = String::new();
    for (k, v) in report.flatten() {
        let _ = writeln!(out, "{k:<44} {v:.4}");
    }
    out
}

/// Parsed `key=v1,v2,...`.
#[derive(Debug, Clone, PartialEq)]
pub struct Sweep {
    pub key: String,
    pub values: Vec<String>,
}

impl Sweep {
    pub fn parse(text: &str) -> Result<Self> {
        let (key, values) = text
            .split_once('=')
            .ok_or_else(|| Error::config("sweep", format!("expected key=v1,v2,... got `{text}`")))?;
        let values: Vec<String> = values
            .split(',')
            .map(|v| v.trim().to_string())
            .filter(|v| !v.is_empty())
            .collect();
        let key = key.trim().trim_start_matches("train.").to_string();
        if key.is_empty() || values.is_empty() {
            return Err(Error::config("sweep", format!("expected key=v1,v2,... got `{text}`")));
        }
        Ok(Self { key, values })
    }

    /// `base` with `train.<key>` set to `value`.
    pub fn apply(&self, base: &Config, value: &str) -> Result<Config> {
        let mut config = base.clone();
        if self.key == "margin" {
            let preset = MarginPreset::parse(value).ok_or_else(|| {
                Error::config("sweep.margin", format!("unknown preset `{value}`"))
            })?;
            config.train.margin = preset.params(base.train.margin.base_scale);
            config.validate()?;
            return Ok(config);
        }
        let mut doc = toml::Value::try_from(&config).expect("config serializes");
        let parsed = parse_scalar(value);
        let mut node = doc
            .get_mut("train")
            .expect("train section present");
        let parts: Vec<&str> = self.key.split('.').collect();
        for part in &parts[..parts.len() - 1] {
            node = node
                .get_mut(*part)
                .ok_or_else(|| Error::config(format!("train.{}", self.key), "unknown key"))?;
        }
        let table = node
            .as_table_mut()
            .ok_or_else(|| Error::config(format!("train.{}", self.key), "not a table"))?;
        let last = parts[parts.len() - 1];
        if !table.contains_key(last) {
            return Err(Error::config(format!("train.{}", self.key), "unknown key"));
        }
        table.insert(last.to_string(), parsed);
        let text = toml::to_string(&doc).expect("document serializes");
        Config::from_toml(&text)
    }
}

fn parse_scalar(value: &str) -> toml::Value {
    if let Ok(i) = value.parse::<i64>() {
        return toml::Value::Integer(i);
    }
    if let Ok(f) = value.parse::<f64>() {
        return toml::Value::Float(f);
    }
    if let Ok(b) = value.parse::<bool>() {
        return toml::Value::Boolean(b);
    }
    toml::Value::String(value.to_ascii_lowercase())
}

#[derive(Debug)]
pub struct AblationTable {
    pub key: String,
    /// Sweep value, seeds that finished, median of every metric.
    pub rows: Vec<(String, usize, BTreeMap<String, f64>)>,
    pub failures: Vec<(String, Error)>,
}

/// Headline columns shown in the text table.
pub const HEADLINE_METRICS: [&str; 4] = [
    "hard.identification.rank1",
    "overall.identification.rank1",
    "easy.verification.accuracy",
    "overall.verification.accuracy",
];

impl AblationTable {
    pub fn metric_names(&self) -> Vec<String> {
        self.rows
            .iter()
            .find(|r| !r.2.is_empty())
            .map(|r| r.2.keys().cloned().collect())
            .unwrap_or_default()
    }

    pub fn to_csv(&self) -> String {
        let names = self.metric_names();
        let mut out = format!("{},seeds", self.key);
        for n in &names {
            let _ = write!(out, ",{n}");
        }
        out.push('\n');
        for (value, count, metrics) in &self.rows {
            let _ = write!(out, "{value},{count}");
            for n in &names {
                match metrics.get(n) {
                    Some(v) => {
                        let _ = write!(out, ",{v}");
                    }
                    None => out.push(','),
                }
            }
            out.push('\n');
        }
        out
    }

    pub fn to_text(&self) -> String {
        let width = self.rows.iter().map(|r| r.0.len()).max().unwrap_or(0).max(self.key.len());
        let mut out = format!("{:<width$}  seeds", self.key);
        for m in HEADLINE_METRICS {
            let _ = write!(out, "  {m:>30}");
        }
        out.push('\n');
        for (value, count, metrics) in &self.rows {
            let _ = write!(out, "{value:<width$}  {count:>5}");
            for m in HEADLINE_METRICS {
                match metrics.get(m) {
                    Some(v) => {
                        let _ = write!(out, "  {v:>30.4}");
                    }
                    None => {
                        let _ = write!(out, "  {:>30}", "-");
                    }
                }
            }
            out.push('\n');
        }
        for (what, err) in &self.failures {
            let _ = writeln!(out, "FAILED {what}: {err}");
        }
        out
    }
}

pub fn median(values: &mut [f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    values.sort_by(f64::total_cmp);
    let n = values.len();
    Some(if n % 2 == 1 {
        values[n / 2]
    } else {
        (values[n / 2 - 1] + values[n / 2]) / 2.0
    })
}

/// Trains and evaluates every (value, seed) point in parallel. Failed points
/// are collected while the rest continue.
pub fn ablate(data: &Path, base: &Config, sweep_text: &str, seeds: &[u64], out: &Path) -> Result<AblationTable> {
    let sweep = Sweep::parse(sweep_text)?;
    if seeds.is_empty() {
        return Err(Error::config("seeds", "need at least one seed"));
    }
    let configs: Vec<Config> = sweep
        .values
        .iter()
        .map(|v| sweep.apply(base, v))
        .collect::<Result<_>>()?;
    let (dataset, digest) = load_dataset(data)?;
    let jobs: Vec<(usize, u64)> = (0..configs.len())
        .flat_map(|i| seeds.iter().map(move |&s| (i, s)))
        .collect();
    let results: Vec<Result<EvalReport>> = jobs
        .par_iter()
        .map(|&(i, s)| {
            let mut train = configs[i].train.clone();
            train.seed = s;
            let dir = out
                .join(format!("{}={}", sweep.key, sweep.values[i]))
                .join(format!("seed_{s}"));
            let outcome = train_to_dir(&dataset, &digest, &train, &dir, false)?;
            let report = evaluate(&dataset.eval, &outcome.ensemble)?;
            write_file(&dir.join("eval.json"), report.to_json().as_bytes())?;
            Ok(report)
        })
        .collect();
    let mut per_point: Vec<Vec<BTreeMap<String, f64>>> = vec![Vec::new(); configs.len()];
    let mut failures = Vec::new();
    for (&(i, s), r) in jobs.iter().zip(results) {
        match r {
            Ok(report) => per_point[i].push(report.flatten()),
            Err(e) => failures.push((format!("{}={} seed {s}", sweep.key, sweep.values[i]), e)),
        }
    }
    let rows = sweep
        .values
        .iter()
        .zip(per_point)
        .map(|(value, reports)| {
            let mut medians = BTreeMap::new();
            if let Some(first) = reports.first() {
                for key in first.keys() {
                    let mut vals: Vec<f64> = reports.iter().filter_map(|r| r.get(key).copied()).collect();
                    if let Some(m) = median(&mut vals) {
                        medians.insert(key.clone(), m);
                    }
                }
            }
            (value.clone(), reports.len(), medians)
        })
        .collect();
    Ok(AblationTable {
        key: sweep.key,
        rows,
        failures,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trainer::Variant;

    #[test]
    fn sweep_parsing() {
        let s = Sweep::parse("alpha=0.05,0.1,0.3,0.5").unwrap();
        assert_eq!(s.key, "alpha");
        assert_eq!(s.values.len(), 4);
        assert!(Sweep::parse("alpha").is_err());
        assert!(Sweep::parse("alpha=").is_err());
    }

    #[test]
    fn sweep_applies_values() {
        let base = Config::default();
        let s = Sweep::parse("alpha=0.3").unwrap();
        assert_eq!(s.apply(&base, "0.3").unwrap().train.alpha, 0.3);
        let s = Sweep::parse("variant=baseline,v3").unwrap();
        assert_eq!(s.apply(&base, "V3").unwrap().train.variant, Variant::V3);
        let s = Sweep::parse("sgd.learning_rate=0.05").unwrap();
        assert_eq!(s.apply(&base, "0.05").unwrap().train.sgd.learning_rate, 0.05);
        let s = Sweep::parse("margin=arcface").unwrap();
        let c = s.apply(&base, "arcface").unwrap();
        assert_eq!(c.train.margin, MarginPreset::ArcFace.params(base.train.margin.base_scale));
    }

    #[test]
    fn sweep_rejects_unknown_keys() {
        let base = Config::default();
        let s = Sweep::parse("alpah=0.3").unwrap();
        assert!(matches!(s.apply(&base, "0.3"), Err(Error::Config { .. })));
        let s = Sweep::parse("alpha=-1").unwrap();
        assert!(matches!(s.apply(&base, "-1"), Err(Error::Config { .. })));
    }

    #[test]
    fn medians() {
        assert_eq!(median(&mut [3.0, 1.0, 2.0]), Some(2.0));
        assert_eq!(median(&mut [4.0, 1.0, 2.0, 3.0]), Some(2.5));
        assert_eq!(median(&mut []), None);
    }

    #[test]
    fn help_lists_defaults() {
        let help = defaults_help();
        assert!(help.contains("alpha = 0.1"));
        assert!(help.contains("epochs_per_round = 30"));
    }
}
