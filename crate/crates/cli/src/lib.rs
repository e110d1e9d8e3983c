//! Experiment runner: JSON configs with dotted overrides, run orchestration
//! for single/continual runs, ablation grids and sweeps, and artifact
//! emission (checkpoints, JSONL traces and metrics, CSV tables, manifest).

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use corsa::benchmark::{prepare, run_prepared, ExperimentConfig, ExperimentResult, Method, MetricsRecord, Prepared, SweepAxis};
use corsa::curvature::CurvatureReport;
use corsa::model::Checkpoint;
use corsa::optimizer::StepTrace;

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");
/// Overrides `output_dir` from the config when set.
pub const OUTPUT_ROOT_ENV: &str = "CORSA_OUTPUT_ROOT";
pub const MANIFEST: &str = "manifest.json";
pub const STEP_COLUMNS: [&str; 6] = ["step", "logp_new", "logp_old", "margin", "g_dot", "eps_norm"];

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] corsa::Error),
    #[error("config: {0}")]
    Config(String),
    #[error("{0}: missing manifest.json (run incomplete or not a run directory)")]
    MissingManifest(PathBuf),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl CliError {
    /// Stable machine-readable error kind.
    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Core(corsa::Error::PretrainingFailed { .. }) => "pretraining-failed",
            CliError::Core(corsa::Error::NonFiniteLoss { .. }) => "non-finite",
            CliError::Core(corsa::Error::Config(_)) | CliError::Config(_) => "config",
            CliError::Core(_) => "core",
            CliError::MissingManifest(_) => "missing-manifest",
            CliError::Io(_) => "io",
            CliError::Json(_) => "json",
            CliError::Csv(_) => "csv",
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self.kind() {
            "config" | "json" => 2,
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;

/// Printed to stderr (and written as `error.json` when a run directory
/// exists) on failure.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorRecord {
    pub kind: String,
    pub message: String,
    pub config_hash: Option<String>,
}

impl ErrorRecord {
    pub fn new(e: &CliError, config_hash: Option<String>) -> Self {
        Self { kind: e.kind().into(), message: e.to_string(), config_hash }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub name: String,
    pub output_dir: PathBuf,
    #[serde(flatten)]
    pub experiment: ExperimentConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self { name: "run".into(), output_dir: PathBuf::from("runs"), experiment: ExperimentConfig::default() }
    }
}

impl RunConfig {
    /// Hash of the experiment part; output location does not affect it.
    pub fn hash(&self) -> Result<String> {
        Ok(self.experiment.hash()?)
    }

    pub fn output_root(&self) -> PathBuf {
        match std::env::var_os(OUTPUT_ROOT_ENV) {
            Some(v) if !v.is_empty() => PathBuf::from(v),
            _ => self.output_dir.clone(),
        }
    }
}

/// Deep-merges `patch` into `base`; objects merge key by key, anything else
/// replaces. Keys absent from `base` are collected as unknown.
fn merge_into(base: &mut Value, patch: &Value, prefix: &str, unknown: &mut Vec<String>) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (key, v) in p {
                let path = if prefix.is_empty() { key.clone() } else { format!("{prefix}.{key}") };
                match b.get_mut(key) {
                    Some(slot) => merge_into(slot, v, &path, unknown),
                    None => unknown.push(path),
                }
            }
        }
        (slot, v) => *slot = v.clone(),
    }
}

/// Sets `path` (dotted) in `root` to `raw`, parsed as JSON when possible and
/// as a string otherwise. The path must already exist.
pub fn apply_override(root: &mut Value, path: &str, raw: &str) -> Result<()> {
    let mut node = root;
    let parts: Vec<&str> = path.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let obj = node.as_object_mut().ok_or_else(|| CliError::Config(format!("override {path}: {} is not an object", parts[..i].join("."))))?;
        node = obj.get_mut(*part).ok_or_else(|| CliError::Config(format!("override {path}: unknown key {part:?}")))?;
    }
    *node = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    Ok(())
}

/// Parses `text` as a patch over the defaults, rejects unknown keys, then
/// applies `key=value` overrides.
pub fn parse_config(text: &str, overrides: &[String]) -> Result<RunConfig> {
    let input: Value = serde_json::from_str(text)?;
    if !input.is_object() {
        return Err(CliError::Config("config must be a JSON object".into()));
    }
    let mut merged = serde_json::to_value(RunConfig::default())?;
    let mut unknown = vec![];
    merge_into(&mut merged, &input, "", &mut unknown);
    if !unknown.is_empty() {
        return Err(CliError::Config(format!("unknown keys: {}", unknown.join(", "))));
    }
    for o in overrides {
        let (k, v) = o.split_once('=').ok_or_else(|| CliError::Config(format!("override {o:?} is not key=value")))?;
        apply_override(&mut merged, k.trim(), v.trim())?;
    }
    let cfg: RunConfig = serde_json::from_value(merged)?;
    cfg.experiment.optimizer.validate()?;
    Ok(cfg)
}

pub fn load_config(path: &Path, overrides: &[String]) -> Result<RunConfig> {
    parse_config(&fs::read_to_string(path)?, overrides)
}

/// One step of a run's trace stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub config_hash: String,
    pub phase: usize,
    #[serde(flatten)]
    pub trace: StepTrace,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvatureRecord {
    pub config_hash: String,
    pub fact_id: usize,
    #[serde(flatten)]
    pub report: CurvatureReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunStatus {
    pub name: String,
    pub config_hash: String,
    pub status: String,
    pub aborted: Option<String>,
    pub pretrain_fidelity: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config_hash: String,
    pub tool_version: String,
    pub files: Vec<String>,
    pub runs: Vec<RunStatus>,
    pub created_unix: u64,
}

/// A directory whose written files are tracked for the manifest.
pub struct ArtifactDir {
    root: PathBuf,
    files: Vec<String>,
}

impl ArtifactDir {
    pub fn create(root: PathBuf) -> Result<Self> {
        fs::create_dir_all(&root)?;
        let stale = root.join(MANIFEST);
        if stale.exists() {
            fs::remove_file(stale)?;
        }
        Ok(Self { root, files: vec![] })
    }

    pub fn path(&self) -> &Path {
        &self.root
    }

    fn open(&mut self, rel: &str) -> Result<BufWriter<fs::File>> {
        let p = self.root.join(rel);
        if let Some(parent) = p.parent() {
            fs::create_dir_all(parent)?;
        }
        self.files.push(rel.to_string());
        Ok(BufWriter::new(fs::File::create(p)?))
    }

    pub fn write_json<T: Serialize>(&mut self, rel: &str, value: &T) -> Result<()> {
        let mut w = self.open(rel)?;
        serde_json::to_writer_pretty(&mut w, value)?;
        writeln!(w)?;
        w.flush()?;
        Ok(())
    }

    pub fn write_jsonl<T: Serialize>(&mut self, rel: &str, items: impl IntoIterator<Item = T>) -> Result<()> {
        let mut w = self.open(rel)?;
        for item in items {
            serde_json::to_writer(&mut w, &item)?;
            writeln!(w)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_csv(&mut self, rel: &str, header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> Result<()> {
        let mut w = csv::Writer::from_writer(self.open(rel)?);
        w.write_record(header)?;
        for r in rows {
            w.write_record(&r)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_checkpoint(&mut self, rel: &str, ck: &Checkpoint) -> Result<()> {
        self.write_json(rel, ck)
    }

    /// Writes the manifest; nothing may be written after this.
    pub fn finish(self, config_hash: &str, runs: Vec<RunStatus>) -> Result<PathBuf> {
        let created_unix = std::time::SystemTime::now().duration_since(std::time::UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
        let manifest = RunManifest { config_hash: config_hash.into(), tool_version: TOOL_VERSION.into(), files: self.files, runs, created_unix };
        let tmp = self.root.join("manifest.json.tmp");
        fs::write(&tmp, serde_json::to_string_pretty(&manifest)? + "\n")?;
        fs::rename(tmp, self.root.join(MANIFEST))?;
        Ok(self.root)
    }
}

fn fmt(v: f64) -> String {
    format!("{v}")
}

fn metric_rows<'a>(records: &'a [MetricsRecord], prefix: &'a [String]) -> impl Iterator<Item = Vec<String>> + 'a {
    records.iter().flat_map(move |r| {
        r.metric_values().into_iter().map(move |(name, value)| {
            let mut row = prefix.to_vec();
            row.extend([r.phase.to_string(), name.to_string(), fmt(value), r.config_hash.clone()]);
            row
        })
    })
}

/// Writes every artifact of one finished experiment into `dir/prefix`.
fn write_result(dir: &mut ArtifactDir, prefix: &str, cfg: &RunConfig, prepared: &Prepared, result: &ExperimentResult) -> Result<()> {
    let p = |name: &str| if prefix.is_empty() { name.to_string() } else { format!("{prefix}/{name}") };
    let hash = &result.config_hash;
    dir.write_json(&p("config.json"), &serde_json::json!({ "config_hash": hash, "name": cfg.name, "config": cfg.experiment }))?;
    let world = &prepared.world;
    dir.write_jsonl(&p("world.jsonl"), world.fact_records())?;
    for (i, phase) in result.schedule.phases.iter().enumerate() {
        dir.write_jsonl(&p(&format!("edits_phase{i}.jsonl")), world.edit_records(&phase.edits))?;
    }
    let traces =
        result.run.traces.iter().enumerate().flat_map(|(phase, ts)| ts.iter().map(move |t| TraceRecord { config_hash: hash.clone(), phase, trace: t.clone() }));
    dir.write_jsonl(&p("trace.jsonl"), traces)?;
    dir.write_jsonl(&p("metrics.jsonl"), &result.run.records)?;
    dir.write_csv(&p("metrics.csv"), &["phase", "metric", "value", "config_hash"], metric_rows(&result.run.records, &[]))?;
    if !result.curvature.is_empty() {
        let last = result.schedule.phases.get(result.run.adapters.len().saturating_sub(1));
        let ids = last.map(|ph| ph.edits.iter().map(|e| e.fact_id).collect::<Vec<_>>()).unwrap_or_default();
        let recs = result.curvature.iter().zip(ids).map(|(r, fact_id)| CurvatureRecord { config_hash: hash.clone(), fact_id, report: r.clone() });
        dir.write_jsonl(&p("curvature.jsonl"), recs)?;
    }
    dir.write_checkpoint(&p("checkpoints/base.json"), &Checkpoint::base(&prepared.pretrained.base))?;
    for (i, a) in result.run.adapters.iter().enumerate() {
        dir.write_checkpoint(&p(&format!("checkpoints/adapter_phase{i}.json")), &Checkpoint::adapter(a))?;
    }
    Ok(())
}

fn status(name: &str, result: &ExperimentResult) -> RunStatus {
    RunStatus {
        name: name.into(),
        config_hash: result.config_hash.clone(),
        status: if result.run.aborted.is_some() { "aborted".into() } else { "ok".into() },
        aborted: result.run.aborted.clone(),
        pretrain_fidelity: Some(result.pretrain.fidelity),
    }
}

fn run_dir(cfg: &RunConfig, hash: &str, suffix: &str) -> PathBuf {
    cfg.output_root().join(format!("{}-{}{}", cfg.name, &hash[..12], suffix))
}

/// Records the failure next to the partial artifacts before returning it.
fn fail<T>(dir: ArtifactDir, hash: &str, e: CliError) -> Result<T> {
    let mut dir = dir;
    let rec = ErrorRecord::new(&e, Some(hash.to_string()));
    dir.write_json("error.json", &rec)?;
    let runs = vec![RunStatus { name: "run".into(), config_hash: hash.into(), status: format!("error: {}", rec.kind), aborted: None, pretrain_fidelity: None }];
    dir.finish(hash, runs)?;
    Err(e)
}

/// `run`: one experiment; returns its directory.
pub fn run(cfg: &RunConfig) -> Result<PathBuf> {
    let hash = cfg.hash()?;
    let mut dir = ArtifactDir::create(run_dir(cfg, &hash, ""))?;
    let outcome = prepare(&cfg.experiment).and_then(|p| run_prepared(&p, &cfg.experiment).map(|r| (p, r)));
    let (prepared, result) = match outcome {
        Ok(v) => v,
        Err(e) => return fail(dir, &hash, e.into()),
    };
    write_result(&mut dir, "", cfg, &prepared, &result)?;
    dir.finish(&hash, vec![status(&cfg.name, &result)])
}

/// `grid`: the full method and its three single-component ablations on a
/// shared world and base, plus `comparison.csv`.
pub fn grid(cfg: &RunConfig) -> Result<PathBuf> {
    let hash = cfg.hash()?;
    let mut dir = ArtifactDir::create(run_dir(cfg, &hash, "-grid"))?;
    let prepared = match prepare(&cfg.experiment) {
        Ok(p) => p,
        Err(e) => return fail(dir, &hash, e.into()),
    };
    let mut rows = vec![];
    let mut runs = vec![];
    for m in Method::ABLATIONS {
        let mut sub = cfg.clone();
        sub.experiment.optimizer = m.apply(&cfg.experiment.optimizer);
        let result = run_prepared(&prepared, &sub.experiment)?;
        write_result(&mut dir, m.name(), &sub, &prepared, &result)?;
        rows.extend(metric_rows(&result.run.records, &[m.name().to_string()]).collect::<Vec<_>>());
        runs.push(status(m.name(), &result));
    }
    dir.write_csv("comparison.csv", &["method", "phase", "metric", "value", "config_hash"], rows)?;
    dir.finish(&hash, runs)
}

/// `sweep`: one run per value of `axis`, sharing world and base.
pub fn sweep(cfg: &RunConfig, axis: SweepAxis, values: &[f64]) -> Result<PathBuf> {
    if values.is_empty() {
        return Err(CliError::Config("sweep needs at least one value".into()));
    }
    let hash = cfg.hash()?;
    let axis_name = serde_json::to_value(axis)?.as_str().unwrap_or("axis").to_string();
    let mut dir = ArtifactDir::create(run_dir(cfg, &hash, &format!("-sweep-{axis_name}")))?;
    let prepared = match prepare(&cfg.experiment) {
        Ok(p) => p,
        Err(e) => return fail(dir, &hash, e.into()),
    };
    let mut rows = vec![];
    let mut runs = vec![];
    for &v in values {
        let sub = RunConfig { experiment: axis.apply(&cfg.experiment, v), ..cfg.clone() };
        let label = format!("{axis_name}={v}");
        let result = run_prepared(&prepared, &sub.experiment)?;
        write_result(&mut dir, &label, &sub, &prepared, &result)?;
        rows.extend(metric_rows(&result.run.records, &[fmt(v)]).collect::<Vec<_>>());
        runs.push(status(&label, &result));
    }
    dir.write_csv("sweep.csv", &[axis_name.as_str(), "phase", "metric", "value", "config_hash"], rows)?;
    dir.finish(&hash, runs)
}

pub fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let f = BufReader::new(fs::File::open(path)?);
    let mut out = vec![];
    for line in f.lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

/// `export`: tidy CSVs for plotting from a completed run directory.
///
/// `export/steps.csv` has one row per training step (numbered across
/// phases) with probe-set means; `export/metrics_by_phase.csv` is one row
/// per phase.
pub fn export(run_dir: &Path) -> Result<Vec<PathBuf>> {
    if !run_dir.join(MANIFEST).is_file() {
        return Err(CliError::MissingManifest(run_dir.to_path_buf()));
    }
    let traces: Vec<TraceRecord> = read_jsonl(&run_dir.join("trace.jsonl"))?;
    let records: Vec<MetricsRecord> = read_jsonl(&run_dir.join("metrics.jsonl"))?;
    let out = run_dir.join("export");
    fs::create_dir_all(&out)?;

    let steps_path = out.join("steps.csv");
    let mut w = csv::Writer::from_path(&steps_path)?;
    w.write_record(STEP_COLUMNS)?;
    for (i, t) in traces.iter().enumerate() {
        let (new, old) = t.trace.probe.as_ref().map_or((f64::NAN, f64::NAN), |p| (p.mean_logp_new(), p.mean_logp_old()));
        w.write_record([i.to_string(), fmt(new), fmt(old), fmt(new - old), fmt(t.trace.grad_dot), fmt(t.trace.eps_norm)])?;
    }
    w.flush()?;

    let table_path = out.join("metrics_by_phase.csv");
    let mut w = csv::Writer::from_path(&table_path)?;
    let opt = |v: Option<f64>| v.map(fmt).unwrap_or_default();
    w.write_record([
        "phase",
        "edit_success",
        "generality",
        "specificity",
        "update_efficacy",
        "forgetting",
        "forgetting_train_template",
        "retention",
        "activation",
        "margin_positive",
        "mean_margin",
        "mean_logp_new",
        "mean_logp_old",
        "config_hash",
    ])?;
    for r in &records {
        w.write_record([
            r.phase.to_string(),
            fmt(r.edit_success),
            fmt(r.generality),
            opt(r.specificity),
            fmt(r.update_efficacy),
            opt(r.forgetting),
            opt(r.forgetting_train_template),
            fmt(r.retention),
            opt(r.activation),
            fmt(r.margin_positive),
            fmt(r.mean_margin),
            fmt(r.mean_logp_new),
            fmt(r.mean_logp_old),
            r.config_hash.clone(),
        ])?;
    }
    w.flush()?;
    Ok(vec![steps_path, table_path])
}

fn check_jsonl<T: Serialize + for<'de> Deserialize<'de>>(path: &Path) -> std::result::Result<usize, String> {
    let text = fs::read_to_string(path).map_err(|e| e.to_string())?;
    let mut n = 0;
    for (i, line) in text.lines().enumerate() {
        let v: Value = serde_json::from_str(line).map_err(|e| format!("line {}: {e}", i + 1))?;
        let typed: T = serde_json::from_value(v.clone()).map_err(|e| format!("line {}: {e}", i + 1))?;
        if serde_json::to_value(&typed).map_err(|e| e.to_string())? != v {
            return Err(format!("line {}: fields differ from the record schema", i + 1));
        }
        n += 1;
    }
    Ok(n)
}

fn check_csv(path: &Path, header: &[&str], numeric: &[&str]) -> std::result::Result<usize, String> {
    let mut r = csv::Reader::from_path(path).map_err(|e| e.to_string())?;
    let found: Vec<String> = r.headers().map_err(|e| e.to_string())?.iter().map(String::from).collect();
    if !header.is_empty() && found != header {
        return Err(format!("header {found:?}, expected {header:?}"));
    }
    let cols: Vec<usize> = numeric.iter().filter_map(|c| found.iter().position(|f| f == c)).collect();
    let mut n = 0;
    for (i, row) in r.records().enumerate() {
        let row = row.map_err(|e| format!("row {}: {e}", i + 1))?;
        for &c in &cols {
            let cell = &row[c];
            if !cell.is_empty() && cell.parse::<f64>().is_err() {
                return Err(format!("row {}: column {} is not numeric: {cell:?}", i + 1, found[c]));
            }
        }
        n += 1;
    }
    Ok(n)
}

fn check_file(dir: &Path, rel: &str) -> std::result::Result<(), String> {
    let path = dir.join(rel);
    let name = rel.rsplit('/').next().unwrap_or(rel);
    let metric_cols = ["phase", "metric", "value", "config_hash"];
    match name {
        "trace.jsonl" => check_jsonl::<TraceRecord>(&path).map(drop),
        "metrics.jsonl" => check_jsonl::<MetricsRecord>(&path).map(drop),
        "curvature.jsonl" => check_jsonl::<CurvatureRecord>(&path).map(drop),
        "world.jsonl" => check_jsonl::<corsa::benchmark::FactRecord>(&path).map(drop),
        n if n.starts_with("edits_phase") && n.ends_with(".jsonl") => check_jsonl::<corsa::benchmark::FactRecord>(&path).map(drop),
        "metrics.csv" => check_csv(&path, &metric_cols, &["phase", "value"]).map(drop),
        "comparison.csv" => check_csv(&path, &["method", "phase", "metric", "value", "config_hash"], &["phase", "value"]).map(drop),
        "sweep.csv" => check_csv(&path, &[], &["phase", "value"]).map(drop),
        "config.json" => {
            let v: Value = serde_json::from_str(&fs::read_to_string(&path).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
            let cfg: ExperimentConfig = serde_json::from_value(v["config"].clone()).map_err(|e| e.to_string())?;
            let hash = cfg.hash().map_err(|e| e.to_string())?;
            if v["config_hash"] != Value::String(hash) {
                return Err("config_hash does not match the stored config".into());
            }
            Ok(())
        }
        "error.json" => serde_json::from_str::<ErrorRecord>(&fs::read_to_string(&path).map_err(|e| e.to_string())?).map(drop).map_err(|e| e.to_string()),
        n if n.ends_with(".json") && rel.contains("checkpoints/") => {
            let ck = Checkpoint::load(&path).map_err(|e| e.to_string())?;
            match ck.kind.as_str() {
                "base" => ck.into_base().map(drop),
                _ => ck.into_adapter().map(drop),
            }
            .map_err(|e| e.to_string())
        }
        _ => Err("file not covered by any schema".into()),
    }
}

/// Checks every file listed in the manifest (and the export bundle, when
/// present) against its record schema; returns one message per problem.
pub fn validate_run_dir(dir: &Path) -> Result<Vec<String>> {
    let manifest_path = dir.join(MANIFEST);
    if !manifest_path.is_file() {
        return Err(CliError::MissingManifest(dir.to_path_buf()));
    }
    let manifest: RunManifest = serde_json::from_str(&fs::read_to_string(manifest_path)?)?;
    let mut problems = vec![];
    for rel in &manifest.files {
        if let Err(e) = check_file(dir, rel) {
            problems.push(format!("{rel}: {e}"));
        }
    }
    let steps = dir.join("export/steps.csv");
    if steps.is_file() {
        if let Err(e) = check_csv(&steps, &STEP_COLUMNS, &STEP_COLUMNS) {
            problems.push(format!("export/steps.csv: {e}"));
        }
    }
    Ok(problems)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_config_is_all_defaults() {
        let cfg = parse_config("{}", &[]).unwrap();
        assert_eq!(cfg, RunConfig::default());
    }

    #[test]
    fn overrides_apply_before_hashing() {
        let a = parse_config("{}", &[]).unwrap();
        let b = parse_config("{}", &["optimizer.use_sam=false".into(), "schedule.kind=cross-inject".into()]).unwrap();
        assert!(!b.experiment.optimizer.use_sam);
        assert_eq!(b.experiment.schedule.kind, corsa::benchmark::ScheduleKind::CrossInject);
        assert_ne!(a.hash().unwrap(), b.hash().unwrap());
        let c = parse_config(r#"{"optimizer": {"use_sam": false}, "schedule": {"kind": "cross-inject"}}"#, &[]).unwrap();
        assert_eq!(b.hash().unwrap(), c.hash().unwrap());
    }

    #[test]
    fn bad_keys_and_values_rejected() {
        assert!(matches!(parse_config(r#"{"optimiser": {}}"#, &[]), Err(CliError::Config(_))));
        assert!(parse_config("{}", &["optimizer.nope=1".into()]).is_err());
        assert!(parse_config("{}", &["optimizer.rho".into()]).is_err());
        assert!(parse_config("{}", &["optimizer.learning_rate=-1".into()]).is_err());
        assert!(parse_config("{not json", &[]).is_err());
    }

    #[test]
    fn output_dir_does_not_change_hash() {
        let a = parse_config(r#"{"output_dir": "x"}"#, &[]).unwrap();
        let b = parse_config(r#"{"output_dir": "y", "name": "other"}"#, &[]).unwrap();
        assert_eq!(a.hash().unwrap(), b.hash().unwrap());
    }
}
