//! Suite runner: seed sweeps over named training configs, aggregate tables
//! and curve exports.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use tvmf_lab::eval::{pca_project, write_pca_dump, DumpMeta};
use tvmf_lab::shiftgen::{DatasetConfig, Split};
use tvmf_lab::simcore::{write_margin_curves, write_similarity_curves};
use tvmf_lab::trainer::{split_representations, train_with, RunSummary, TrainConfig};
use tvmf_lab::{Error, Matrix};

pub type Result<T> = std::result::Result<T, Error>;

/// Which artifacts a suite writes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmitFlags {
    pub history: bool,
    pub summary: bool,
    pub similarity_curves: bool,
    pub margin_curves: bool,
    pub pca: bool,
    /// `backbone` or `projector`.
    pub pca_source: PcaSource,
    /// Number of curve samples on `[0, pi]`.
    pub resolution: usize,
    pub kappas: Vec<f64>,
    /// `[kappa_p, kappa_n]` pairs for margin curves.
    pub kappa_pairs: Vec<[f64; 2]>,
}

impl Default for EmitFlags {
    fn default() -> Self {
        let c = CurveSpec::default();
        Self {
            history: true,
            summary: true,
            similarity_curves: false,
            margin_curves: false,
            pca: false,
            pca_source: PcaSource::Backbone,
            resolution: c.resolution,
            kappas: c.kappas,
            kappa_pairs: c.kappa_pairs,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PcaSource {
    Backbone,
    Projector,
}

impl PcaSource {
    fn name(self) -> &'static str {
        match self {
            PcaSource::Backbone => "backbone",
            PcaSource::Projector => "projector",
        }
    }
}

/// Default curve families: the five-kappa similarity family and the
/// `(2.0, -0.4)` margin pair.
#[derive(Debug, Clone, PartialEq)]
pub struct CurveSpec {
    pub resolution: usize,
    pub kappas: Vec<f64>,
    pub kappa_pairs: Vec<[f64; 2]>,
}

impl Default for CurveSpec {
    fn default() -> Self {
        Self {
            resolution: 181,
            kappas: vec![-0.4, -0.2, 0.0, 0.3, 2.0],
            kappa_pairs: vec![[2.0, -0.4]],
        }
    }
}

/// Standalone curve export file for the `curves` command.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CurveFile {
    pub out_dir: PathBuf,
    pub resolution: usize,
    pub kappas: Vec<f64>,
    pub kappa_pairs: Vec<[f64; 2]>,
}

impl Default for CurveFile {
    fn default() -> Self {
        let c = CurveSpec::default();
        Self {
            out_dir: default_out(),
            resolution: c.resolution,
            kappas: c.kappas,
            kappa_pairs: c.kappa_pairs,
        }
    }
}

fn default_out() -> PathBuf {
    PathBuf::from("results")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSuite {
    #[serde(default = "default_out")]
    pub out_dir: PathBuf,
    /// Seeds applied to every run. Empty means `seed .. seed + repeats` per run.
    #[serde(default)]
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub emit: EmitFlags,
    pub runs: Vec<TrainConfig>,
}

impl ExperimentSuite {
    pub fn single(out_dir: impl Into<PathBuf>, run: TrainConfig, seeds: Vec<u64>) -> Self {
        Self {
            out_dir: out_dir.into(),
            seeds,
            emit: EmitFlags::default(),
            runs: vec![run],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.runs.is_empty() {
            return Err(Error::config("runs", "suite has no runs"));
        }
        let mut names = BTreeSet::new();
        for (i, r) in self.runs.iter().enumerate() {
            if !names.insert(r.name.as_str()) {
                return Err(Error::config(format!("runs[{i}].name"), format!("duplicate name `{}`", r.name)));
            }
            if r.name.contains(['/', '\\']) {
                return Err(Error::config(format!("runs[{i}].name"), "must not contain path separators"));
            }
            r.validate().map_err(|e| prefix_key(e, &format!("runs[{i}]")))?;
        }
        if self.emit.resolution < 2 {
            return Err(Error::config("emit.resolution", "must be >= 2"));
        }
        Ok(())
    }

    /// `(run, seed)` pairs in execution order.
    pub fn jobs(&self) -> Vec<(usize, u64)> {
        let mut out = Vec::new();
        for (i, r) in self.runs.iter().enumerate() {
            if self.seeds.is_empty() {
                out.extend((0..r.repeats as u64).map(|k| (i, r.seed + k)));
            } else {
                out.extend(self.seeds.iter().map(|&s| (i, s)));
            }
        }
        out
    }

    /// Smaller queue and fewer epochs for smoke runs.
    pub fn shrink_for_desk(&mut self) {
        for r in &mut self.runs {
            r.queue.capacity = r.queue.capacity.min(1024).max(r.batch_size);
            r.epochs = Some(r.epochs().min(5));
        }
    }
}

fn prefix_key(e: Error, prefix: &str) -> Error {
    match e {
        Error::Config { key, reason } => Error::Config {
            key: format!("{prefix}.{key}"),
            reason,
        },
        other => other,
    }
}

/// Parses TOML into `T`, reporting the path of the offending key.
pub fn parse_toml<T: serde::de::DeserializeOwned>(text: &str) -> Result<T> {
    let de = toml::de::Deserializer::parse(text).map_err(|e| Error::config("<toml>", e.to_string()))?;
    serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        let msg = e.into_inner().to_string();
        Error::config(path, msg.trim().to_string())
    })
}

pub fn load_suite(path: &Path) -> Result<ExperimentSuite> {
    parse_toml(&fs::read_to_string(path)?)
}

/// A dataset config, either at top level or under `[dataset]`.
pub fn load_dataset_config(path: &Path) -> Result<DatasetConfig> {
    let text = fs::read_to_string(path)?;
    let table: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::config("<toml>", e.to_string()))?;
    if table.contains_key("dataset") {
        #[derive(Deserialize)]
        struct Wrapper {
            dataset: DatasetConfig,
        }
        let w: Wrapper = parse_toml(&text)?;
        return Ok(w.dataset);
    }
    parse_toml(&text)
}

pub fn history_path(dir: &Path, name: &str, seed: u64) -> PathBuf {
    dir.join(format!("{name}_seed{seed}_history.csv"))
}

pub fn summary_path(dir: &Path, name: &str, seed: u64) -> PathBuf {
    dir.join(format!("{name}_seed{seed}_summary.json"))
}

pub const AGGREGATE_FILE: &str = "aggregate.csv";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailedRun {
    pub name: String,
    pub seed: u64,
    pub error: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub completed: Vec<(String, u64)>,
    pub failed: Vec<FailedRun>,
}

#[derive(Debug, Clone)]
pub struct SuiteOutcome {
    pub summaries: Vec<RunSummary>,
    pub manifest: Manifest,
    pub files: Vec<PathBuf>,
}

impl SuiteOutcome {
    pub fn ok(&self) -> bool {
        self.manifest.failed.is_empty()
    }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path)?))
}

/// Runs every `(config, seed)` job. A training fault stops that job only;
/// the others still run and a manifest records what completed.
pub fn run_suite(suite: &ExperimentSuite) -> Result<SuiteOutcome> {
    suite.validate()?;
    let dir = &suite.out_dir;
    fs::create_dir_all(dir)?;
    let mut outcome = SuiteOutcome {
        summaries: Vec::new(),
        manifest: Manifest::default(),
        files: Vec::new(),
    };
    for (i, seed) in suite.jobs() {
        let mut cfg = suite.runs[i].clone();
        cfg.seed = seed;
        let pca = suite.emit.pca;
        let source = suite.emit.pca_source;
        let mut pca_files = Vec::new();
        let epochs = cfg.epochs();
        let result = train_with(&cfg, |epoch, params, data| {
            if pca && epoch == epochs {
                let path = dir.join(format!("{}_seed{seed}_pca_{}.csv", cfg.name, source.name()));
                let splits = data.present_splits();
                let mut rows: Vec<Vec<f64>> = Vec::new();
                let mut meta = Vec::new();
                for s in splits {
                    let reps = split_representations(params, data, s, source == PcaSource::Projector)?;
                    let view = data.view(s);
                    for k in 0..view.len() {
                        rows.push(reps.row(k).to_vec());
                        meta.push(DumpMeta {
                            split: s,
                            domain: view.domain[k],
                            group: view.group[k],
                            label: view.y[k],
                        });
                    }
                }
                let proj = pca_project(&Matrix::from_rows(&rows)?, 2)?;
                write_pca_dump(create(&path)?, &meta, &proj.coords)?;
                pca_files.push(path);
            }
            Ok(())
        });
        match result {
            Ok(run) => {
                let h = &run.history;
                if suite.emit.history {
                    let p = history_path(dir, &cfg.name, seed);
                    let mut w = create(&p)?;
                    h.write_csv(&mut w)?;
                    w.flush()?;
                    outcome.files.push(p);
                }
                let summary = h.summary();
                if suite.emit.summary {
                    let p = summary_path(dir, &cfg.name, seed);
                    let mut w = create(&p)?;
                    serde_json::to_writer_pretty(&mut w, &summary).map_err(io_err)?;
                    writeln!(w)?;
                    w.flush()?;
                    outcome.files.push(p);
                }
                outcome.files.extend(pca_files);
                outcome.summaries.push(summary);
                outcome.manifest.completed.push((cfg.name.clone(), seed));
            }
            Err(e @ Error::TrainingFault { .. }) => {
                outcome.manifest.failed.push(FailedRun {
                    name: cfg.name.clone(),
                    seed,
                    error: e.to_string(),
                });
            }
            Err(e) => return Err(e),
        }
    }

    let agg = dir.join(AGGREGATE_FILE);
    let mut w = create(&agg)?;
    write_aggregate(&mut w, &outcome.summaries)?;
    w.flush()?;
    outcome.files.push(agg);

    if !outcome.manifest.failed.is_empty() {
        let p = dir.join(MANIFEST_FILE);
        let mut w = create(&p)?;
        serde_json::to_writer_pretty(&mut w, &outcome.manifest).map_err(io_err)?;
        writeln!(w)?;
        outcome.files.push(p);
    }

    if suite.emit.similarity_curves || suite.emit.margin_curves {
        let e = &suite.emit;
        let files = emit_curves(
            dir,
            if e.similarity_curves { &e.kappas } else { &[] },
            if e.margin_curves { &e.kappa_pairs } else { &[] },
            e.resolution,
        )?;
        outcome.files.extend(files);
    }
    Ok(outcome)
}

fn io_err(e: serde_json::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}

/// Mean and sample standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let ss: f64 = values.iter().map(|v| (v - mean) * (v - mean)).sum();
    (mean, (ss / (n - 1) as f64).sqrt())
}

/// Rows `config,split,metric,n,mean,std` over the final-epoch metrics of
/// every completed seed.
pub fn write_aggregate<W: Write>(mut out: W, summaries: &[RunSummary]) -> Result<()> {
    writeln!(out, "config,split,metric,n,mean,std")?;
    let mut table: BTreeMap<(&str, &str, &str), Vec<f64>> = BTreeMap::new();
    let mut order: Vec<&str> = Vec::new();
    for s in summaries {
        if !order.contains(&s.name.as_str()) {
            order.push(&s.name);
        }
        for (split, metrics) in &s.last {
            for (metric, &v) in metrics {
                table.entry((&s.name, split, metric)).or_default().push(v);
            }
        }
    }
    for name in order {
        for ((cfg, split, metric), vals) in table.range((name, "", "")..) {
            if *cfg != name {
                break;
            }
            let (mean, std) = mean_std(vals);
            writeln!(out, "{cfg},{split},{metric},{},{mean},{std}", vals.len())?;
        }
    }
    Ok(())
}

/// Writes `similarity_curves.csv` and `margin_curves.csv` into `dir`, each
/// only when its family is nonempty.
pub fn emit_curves(dir: &Path, kappas: &[f64], pairs: &[[f64; 2]], resolution: usize) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let mut files = Vec::new();
    if !kappas.is_empty() {
        let p = dir.join("similarity_curves.csv");
        let mut w = create(&p)?;
        write_similarity_curves(&mut w, kappas, resolution)?;
        w.flush()?;
        files.push(p);
    }
    if !pairs.is_empty() {
        let pairs: Vec<(f64, f64)> = pairs.iter().map(|&[kp, kn]| (kp, kn)).collect();
        let p = dir.join("margin_curves.csv");
        let mut w = create(&p)?;
        write_margin_curves(&mut w, &pairs, resolution)?;
        w.flush()?;
        files.push(p);
    }
    Ok(files)
}

/// Process exit code for an error: 2 for training faults, 1 otherwise.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::TrainingFault { .. } => 2,
        _ => 1,
    }
}

/// Split name to use in file names and tables.
pub fn split_name(s: Split) -> &'static str {
    s.name()
}
