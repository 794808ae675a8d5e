//! Experiment configuration, orchestration and result files.
//!
//! A run writes into one output directory, owned by the calling thread:
//! `summary.json` (the [`ResultRecord`]), one CSV per table or series,
//! `checkpoint.json` (completed replicas, for resumption) and
//! `timing.json` (wall-clock data, kept apart so that every other file is
//! byte-identical across reruns with the same config).

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::dynamics::{
    default_dt, simulate_replica, InitialCondition, IntegratorSpec, SimulationConfig,
};
use crate::error::{Error, Result};
use crate::harmonic_exact;
use crate::kmp::{kmp_profile_and_flux, KmpSpec};
use crate::lattice::{Lattice, LatticeSpec};
use crate::observables::DEFAULT_BLOCKS;
use crate::pool::parallel_for_each;
use crate::thermostats::{Reservoir, ReservoirSpec};
use crate::transport::{
    assemble_gk, assemble_scan, conductivity_scan, gk_replica, ldf_from_segments, ldf_segments,
    scan_replica, scan_tasks, GkReplica, GkSpec, LdfObservable, LdfSegments, LdfSpec, ReplicaFlux,
    ScanSpec,
};

pub const RESULT_SCHEMA: &str = "nesslab.result.v1";
pub const CHECKPOINT_SCHEMA: &str = "nesslab.checkpoint.v1";

fn one() -> usize {
    1
}

fn one_f64() -> f64 {
    1.0
}

fn blocks() -> usize {
    DEFAULT_BLOCKS
}

fn ten() -> u64 {
    10
}

fn tenth() -> f64 {
    0.1
}

fn bins() -> usize {
    41
}

fn hundred() -> u64 {
    100
}

fn default_output() -> PathBuf {
    PathBuf::from("nesslab-out")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunStudy {
    #[serde(default = "one")]
    pub replicas: usize,
    #[serde(default = "blocks")]
    pub blocks: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepStudy {
    pub lengths: Vec<usize>,
    #[serde(default = "one")]
    pub replicas: usize,
    #[serde(default)]
    pub step_scaling_exponent: f64,
    #[serde(default)]
    pub exclude_smallest: bool,
    #[serde(default = "blocks")]
    pub blocks: usize,
    /// Use the exact harmonic solution instead of simulation.
    #[serde(default)]
    pub oracle: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OracleStudy {
    /// Optional lengths for a conductivity table.
    #[serde(default)]
    pub lengths: Option<Vec<usize>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GkStudy {
    pub temperature: f64,
    pub t_max: f64,
    pub trajectory_time: f64,
    #[serde(default)]
    pub equilibration_time: f64,
    #[serde(default = "ten")]
    pub sample_stride: u64,
    #[serde(default = "one")]
    pub replicas: usize,
    #[serde(default)]
    pub truncated: bool,
    #[serde(default = "tenth")]
    pub plateau_tolerance: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LdfStudy {
    pub segment_samples: usize,
    #[serde(default = "bins")]
    pub bins: usize,
    #[serde(default)]
    pub p_max: Option<f64>,
    #[serde(default)]
    pub normalized: bool,
    #[serde(default = "hundred")]
    pub min_count: u64,
    #[serde(default = "one")]
    pub replicas: usize,
    #[serde(default)]
    pub observable: LdfObservable,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KmpStudy {
    pub sites: usize,
    pub t_left: f64,
    pub t_right: f64,
    #[serde(default = "one_f64")]
    pub gamma_ex: f64,
    #[serde(default = "one_f64")]
    pub gamma_b: f64,
    pub burn_in_time: f64,
    pub run_time: f64,
    #[serde(default = "blocks")]
    pub blocks: usize,
    #[serde(default = "one")]
    pub replicas: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Study {
    Run(RunStudy),
    Sweep(SweepStudy),
    Oracle(OracleStudy),
    Gk(GkStudy),
    Ldf(LdfStudy),
    Kmp(KmpStudy),
}

impl Study {
    pub fn name(&self) -> &'static str {
        match self {
            Study::Run(_) => "run",
            Study::Sweep(_) => "sweep",
            Study::Oracle(_) => "oracle",
            Study::Gk(_) => "gk",
            Study::Ldf(_) => "ldf",
            Study::Kmp(_) => "kmp",
        }
    }

    /// Set the replica count, where the study has one.
    pub fn set_replicas(&mut self, n: usize) {
        match self {
            Study::Run(s) => s.replicas = n,
            Study::Sweep(s) => s.replicas = n,
            Study::Gk(s) => s.replicas = n,
            Study::Ldf(s) => s.replicas = n,
            Study::Kmp(s) => s.replicas = n,
            Study::Oracle(_) => {}
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub lattice: Option<LatticeSpec>,
    #[serde(default)]
    pub reservoir: Option<ReservoirSpec>,
    #[serde(default)]
    pub integrator: Option<IntegratorSpec>,
    #[serde(default)]
    pub initial: InitialCondition,
    pub study: Study,
    #[serde(default = "default_output")]
    pub output: PathBuf,
    /// Master seed; copied into the integrator. Replica `r` uses stream `r`.
    #[serde(default)]
    pub seed: u64,
}

fn config_error(path: impl Into<String>, message: impl Into<String>) -> Error {
    Error::Config {
        path: path.into(),
        message: message.into(),
    }
}

/// Re-root validation errors raised by the library under config paths.
fn at_path(e: Error) -> Error {
    match e {
        Error::InvalidParameter { field, reason } => {
            let path = match field.strip_prefix("kmp.") {
                Some(rest) => format!("study.{rest}"),
                None => field,
            };
            config_error(path, reason)
        }
        other => other,
    }
}

/// Parse, validate and fill defaults (including `integrator.dt`).
pub fn parse_config(text: &str) -> Result<ExperimentConfig> {
    let de = &mut serde_json::Deserializer::from_str(text);
    let mut config: ExperimentConfig = serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        config_error(path, e.into_inner().to_string())
    })?;
    config.resolve()?;
    Ok(config)
}

impl ExperimentConfig {
    fn require<'a, T>(value: &'a Option<T>, path: &str, study: &str) -> Result<&'a T> {
        value
            .as_ref()
            .ok_or_else(|| config_error(path, format!("required by the `{study}` study")))
    }

    /// Validate every part needed by the study and make defaults explicit.
    pub fn resolve(&mut self) -> Result<()> {
        let study = self.study.name();
        let needs_lattice = !matches!(self.study, Study::Kmp(_));
        let needs_reservoir = matches!(
            self.study,
            Study::Run(_) | Study::Sweep(_) | Study::Oracle(_) | Study::Ldf(_)
        );
        let needs_integrator =
            matches!(self.study, Study::Run(_) | Study::Sweep(_) | Study::Ldf(_));
        let lattice = if needs_lattice {
            let spec = Self::require(&self.lattice, "lattice", study)?;
            Some(Lattice::new(spec.clone()).map_err(at_path)?)
        } else {
            None
        };
        if needs_reservoir {
            Self::require(&self.reservoir, "reservoir", study)?;
        }
        if let (Some(lat), Some(res)) = (&lattice, &self.reservoir) {
            Reservoir::new(res.clone(), lat).map_err(at_path)?;
        }
        if needs_integrator {
            Self::require(&self.integrator, "integrator", study)?;
        }
        if let Some(integ) = &mut self.integrator {
            integ.validate().map_err(at_path)?;
            if let (None, Some(lat)) = (integ.dt, &lattice) {
                integ.dt = Some(default_dt(lat));
            }
            integ.seed = self.seed;
        }
        match &self.study {
            Study::Run(s) => {
                if s.replicas == 0 {
                    return Err(config_error("study.replicas", "must be at least 1"));
                }
            }
            Study::Sweep(_) => self.scan_spec()?.validate().map_err(at_path)?,
            Study::Oracle(_) => {
                let lat = lattice.as_ref().expect("checked");
                if !lat.is_quadratic() {
                    return Err(config_error(
                        "lattice",
                        "the oracle needs quadratic potentials",
                    ));
                }
            }
            Study::Gk(_) => self.gk_spec()?.validate().map_err(at_path)?,
            Study::Ldf(s) => {
                if s.bins % 2 == 0 || s.bins < 3 {
                    return Err(config_error("study.bins", "must be odd and at least 3"));
                }
                if s.segment_samples == 0 {
                    return Err(config_error("study.segment_samples", "must be positive"));
                }
                if self
                    .reservoir
                    .as_ref()
                    .and_then(|r| r.temperatures())
                    .is_none()
                {
                    return Err(config_error("reservoir", "needs two reservoirs"));
                }
            }
            Study::Kmp(_) => self.kmp_spec()?.validate().map_err(at_path)?,
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        Sha256::digest(&bytes)
            .iter()
            .fold(String::new(), |mut s, b| {
                let _ = write!(s, "{b:02x}");
                s
            })
    }

    fn simulation_config(&self, blocks: usize) -> Result<SimulationConfig> {
        let study = self.study.name();
        Ok(SimulationConfig {
            lattice: Self::require(&self.lattice, "lattice", study)?.clone(),
            reservoir: Self::require(&self.reservoir, "reservoir", study)?.clone(),
            integrator: Self::require(&self.integrator, "integrator", study)?.clone(),
            initial: self.initial.clone(),
            blocks,
        })
    }

    fn scan_spec(&self) -> Result<ScanSpec> {
        let Study::Sweep(s) = &self.study else {
            return Err(config_error("study.kind", "not a sweep"));
        };
        let sim = self.simulation_config(s.blocks)?;
        Ok(ScanSpec {
            lattice: sim.lattice,
            reservoir: sim.reservoir,
            integrator: sim.integrator,
            lengths: s.lengths.clone(),
            replicas: s.replicas,
            oracle: s.oracle,
            step_scaling_exponent: s.step_scaling_exponent,
            exclude_smallest: s.exclude_smallest,
            initial: self.initial.clone(),
            blocks: s.blocks,
        })
    }

    fn gk_spec(&self) -> Result<GkSpec> {
        let Study::Gk(s) = &self.study else {
            return Err(config_error("study.kind", "not a gk study"));
        };
        Ok(GkSpec {
            lattice: Self::require(&self.lattice, "lattice", "gk")?.clone(),
            reservoir: self.reservoir.clone().unwrap_or(ReservoirSpec::None),
            temperature: s.temperature,
            dt: self.integrator.as_ref().and_then(|i| i.dt),
            sample_stride: s.sample_stride,
            t_max: s.t_max,
            trajectory_time: s.trajectory_time,
            equilibration_time: s.equilibration_time,
            replicas: s.replicas,
            seed: self.seed,
            truncated: s.truncated,
            plateau_tolerance: s.plateau_tolerance,
        })
    }

    fn ldf_spec(&self) -> Result<LdfSpec> {
        let Study::Ldf(s) = &self.study else {
            return Err(config_error("study.kind", "not an ldf study"));
        };
        Ok(LdfSpec {
            simulation: self.simulation_config(DEFAULT_BLOCKS)?,
            segment_samples: s.segment_samples,
            bins: s.bins,
            p_max: s.p_max,
            normalized: s.normalized,
            min_count: s.min_count,
            replicas: s.replicas,
            observable: s.observable,
        })
    }

    fn kmp_spec(&self) -> Result<KmpSpec> {
        let Study::Kmp(s) = &self.study else {
            return Err(config_error("study.kind", "not a kmp study"));
        };
        Ok(KmpSpec {
            sites: s.sites,
            t_left: s.t_left,
            t_right: s.t_right,
            gamma_ex: s.gamma_ex,
            gamma_b: s.gamma_b,
            burn_in_time: s.burn_in_time,
            run_time: s.run_time,
            blocks: s.blocks,
            seed: self.seed,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Ok,
    /// Some replicas failed; the summary uses the others.
    Partial,
    Failed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskStatus {
    pub task: String,
    pub status: Status,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRecord {
    pub schema: String,
    pub config_hash: String,
    /// Config with all defaults explicit.
    pub config: ExperimentConfig,
    pub study: String,
    pub status: Status,
    pub tasks: Vec<TaskStatus>,
    pub summary: Value,
    /// CSV files written next to `summary.json`.
    pub tables: Vec<String>,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
struct Checkpoint {
    schema: String,
    config_hash: String,
    completed: BTreeMap<String, TaskEntry>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct TaskEntry {
    #[serde(default)]
    value: Option<Value>,
    #[serde(default)]
    error: Option<String>,
    /// CSV files the task wrote.
    #[serde(default)]
    files: Vec<String>,
}

/// Owns the output directory: every file is written from this object on the
/// calling thread.
struct Writer {
    dir: PathBuf,
    checkpoint: Checkpoint,
    tables: Vec<String>,
    timing: BTreeMap<String, f64>,
}

impl Writer {
    fn open(dir: &Path, hash: &str) -> Result<Self> {
        fs::create_dir_all(dir)?;
        let path = dir.join("checkpoint.json");
        let checkpoint = match fs::read_to_string(&path) {
            Ok(text) => {
                let cp: Checkpoint = serde_json::from_str(&text)?;
                if cp.schema != CHECKPOINT_SCHEMA || cp.config_hash != hash {
                    return Err(config_error(
                        "output",
                        format!(
                            "{} holds a checkpoint of a different config; use another directory",
                            dir.display()
                        ),
                    ));
                }
                cp
            }
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Checkpoint {
                schema: CHECKPOINT_SCHEMA.into(),
                config_hash: hash.into(),
                completed: BTreeMap::new(),
            },
            Err(e) => return Err(e.into()),
        };
        Ok(Self {
            dir: dir.to_path_buf(),
            checkpoint,
            tables: Vec::new(),
            timing: BTreeMap::new(),
        })
    }

    fn write(&self, name: &str, contents: &str) -> Result<()> {
        let tmp = self.dir.join(format!(".{name}.tmp"));
        fs::write(&tmp, contents)?;
        fs::rename(tmp, self.dir.join(name))?;
        Ok(())
    }

    fn table(&mut self, name: &str, contents: String) -> Result<()> {
        self.write(name, &contents)?;
        if !self.tables.iter().any(|t| t == name) {
            self.tables.push(name.into());
        }
        Ok(())
    }

    fn save_checkpoint(&self) -> Result<()> {
        self.write("checkpoint.json", &to_json(&self.checkpoint)?)
    }
}

fn to_json<T: Serialize>(value: &T) -> Result<String> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    Ok(s)
}

/// Output of one task: a JSON-able value kept in the checkpoint plus CSV
/// files written once when the task completes.
struct TaskOutput<T> {
    value: T,
    files: Vec<(String, String)>,
}

impl<T> From<T> for TaskOutput<T> {
    fn from(value: T) -> Self {
        Self {
            value,
            files: Vec::new(),
        }
    }
}

/// Run the tasks not yet in the checkpoint; returns each task's value or
/// error message, in task order.
fn run_tasks<T, F>(
    writer: &mut Writer,
    keys: &[String],
    jobs: usize,
    f: F,
) -> Result<Vec<std::result::Result<T, String>>>
where
    T: Serialize + DeserializeOwned + Send,
    F: Fn(usize) -> Result<TaskOutput<T>> + Sync,
{
    let pending: Vec<usize> = (0..keys.len())
        .filter(|&i| !writer.checkpoint.completed.contains_key(&keys[i]))
        .collect();
    let mut io_error = None;
    parallel_for_each(
        &pending,
        jobs,
        |_, &i| {
            let start = Instant::now();
            (f(i), start.elapsed().as_secs_f64())
        },
        |k, (out, secs)| {
            let key = keys[pending[k]].clone();
            writer.timing.insert(key.clone(), secs);
            let entry = match out {
                Ok(o) => {
                    for (name, contents) in &o.files {
                        if let Err(e) = writer.table(name, contents.clone()) {
                            io_error.get_or_insert(e);
                        }
                    }
                    TaskEntry {
                        value: Some(serde_json::to_value(&o.value).expect("task value serializes")),
                        error: None,
                        files: o.files.into_iter().map(|(name, _)| name).collect(),
                    }
                }
                Err(e) => TaskEntry {
                    value: None,
                    error: Some(e.to_string()),
                    files: Vec::new(),
                },
            };
            writer.checkpoint.completed.insert(key, entry);
            if let Err(e) = writer.save_checkpoint() {
                io_error.get_or_insert(e);
            }
        },
    );
    if let Some(e) = io_error {
        return Err(e);
    }
    for k in keys {
        for name in &writer.checkpoint.completed[k].files {
            if !writer.tables.contains(name) {
                writer.tables.push(name.clone());
            }
        }
    }
    keys.iter()
        .map(|k| {
            let entry = &writer.checkpoint.completed[k];
            Ok(match (&entry.value, &entry.error) {
                (Some(v), _) => Ok(serde_json::from_value(v.clone())?),
                (None, e) => Err(e.clone().unwrap_or_else(|| "unknown failure".into())),
            })
        })
        .collect()
}

fn statuses<T>(keys: &[String], results: &[std::result::Result<T, String>]) -> Vec<TaskStatus> {
    keys.iter()
        .zip(results)
        .map(|(k, r)| TaskStatus {
            task: k.clone(),
            status: if r.is_ok() {
                Status::Ok
            } else {
                Status::Failed
            },
            error: r.as_ref().err().cloned(),
        })
        .collect()
}

fn overall(tasks: &[TaskStatus]) -> Status {
    let failed = tasks.iter().filter(|t| t.status != Status::Ok).count();
    match failed {
        0 => Status::Ok,
        n if n == tasks.len() => Status::Failed,
        _ => Status::Partial,
    }
}

/// Mean and standard error of a scalar.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub mean: f64,
    pub stderr: f64,
}

impl Estimate {
    pub fn exact(mean: f64) -> Self {
        Self { mean, stderr: 0.0 }
    }

    /// Average of independent estimates.
    pub fn combine(parts: &[Estimate]) -> Self {
        let k = parts.len() as f64;
        Self {
            mean: parts.iter().map(|e| e.mean).sum::<f64>() / k,
            stderr: parts
                .iter()
                .map(|e| e.stderr * e.stderr)
                .sum::<f64>()
                .sqrt()
                / k,
        }
    }
}

/// Stationary-state observables shared by simulated runs and the exact
/// harmonic solution, so their summaries have the same shape.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NessSummary {
    pub flux: Estimate,
    /// `(flux / A) L / (T_L - T_R)`; absent at equal temperatures.
    pub kappa: Option<Estimate>,
    pub heat_left: Estimate,
    pub heat_right: Estimate,
    pub entropy_production: Estimate,
    pub temperature: Vec<Estimate>,
    pub plane_flux: Vec<Estimate>,
    pub replicas: usize,
}

/// Per-replica result of a `run` study.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReplica {
    pub flux: Estimate,
    pub heat_left: Estimate,
    pub heat_right: Estimate,
    pub entropy_production: Estimate,
    pub temperature: Vec<Estimate>,
    pub plane_flux: Vec<Estimate>,
    pub flux_correlated: bool,
    pub plane_disagreement: f64,
    pub samples: usize,
    pub final_time: f64,
}

fn estimates(mean: &[f64], stderr: &[f64]) -> Vec<Estimate> {
    mean.iter()
        .zip(stderr)
        .map(|(&mean, &stderr)| Estimate { mean, stderr })
        .collect()
}

fn profile_csv(index: &str, quantity: &str, values: &[Estimate]) -> String {
    let mut s = format!("{index},{quantity},stderr\n");
    for (i, e) in values.iter().enumerate() {
        let _ = writeln!(s, "{i},{},{}", e.mean, e.stderr);
    }
    s
}

fn combine_profiles(parts: &[&Vec<Estimate>]) -> Vec<Estimate> {
    let n = parts.first().map_or(0, |p| p.len());
    (0..n)
        .map(|i| Estimate::combine(&parts.iter().map(|p| p[i]).collect::<Vec<_>>()))
        .collect()
}

fn kappa_of(flux: Estimate, lattice: &LatticeSpec, reservoir: &ReservoirSpec) -> Option<Estimate> {
    let (tl, tr) = reservoir.temperatures()?;
    if tl == tr {
        return None;
    }
    let f = lattice.length() as f64 / (lattice.cross_section() as f64 * (tl - tr));
    Some(Estimate {
        mean: flux.mean * f,
        stderr: flux.stderr * f.abs(),
    })
}

fn ness_csvs(writer: &mut Writer, s: &NessSummary) -> Result<()> {
    writer.table(
        "temperature_profile.csv",
        profile_csv("layer", "temperature[k_B=1]", &s.temperature),
    )?;
    writer.table(
        "plane_flux.csv",
        profile_csv("plane", "flux[energy/time]", &s.plane_flux),
    )
}

/// What `run_experiment` produced.
#[derive(Clone, Debug)]
pub struct Outcome {
    pub record: ResultRecord,
    pub dir: PathBuf,
}

impl Outcome {
    /// True when at least one replica failed numerically.
    pub fn has_failures(&self) -> bool {
        self.record.status != Status::Ok
    }
}

/// Run the configured study, resuming from `checkpoint.json` when the
/// output directory holds one for the same config.
pub fn run_experiment(config: &ExperimentConfig, jobs: usize) -> Result<Outcome> {
    let mut config = config.clone();
    config.resolve()?;
    let hash = config.hash();
    let dir = config.output.clone();
    let lock = dir.join(".lock");
    fs::create_dir_all(&dir)?;
    fs::OpenOptions::new()
        .write(true)
        .create_new(true)
        .open(&lock)
        .map_err(|_| {
            config_error(
                "output",
                format!(
                    "{} is in use by another run (remove .lock if stale)",
                    dir.display()
                ),
            )
        })?;
    let result = run_locked(&config, &hash, &dir, jobs);
    let _ = fs::remove_file(&lock);
    result
}

fn run_locked(config: &ExperimentConfig, hash: &str, dir: &Path, jobs: usize) -> Result<Outcome> {
    let started = Instant::now();
    let mut writer = Writer::open(dir, hash)?;
    let (tasks, summary) = match &config.study {
        Study::Run(s) => run_study(config, s, &mut writer, jobs)?,
        Study::Sweep(_) => sweep_study(config, &mut writer, jobs)?,
        Study::Oracle(s) => oracle_study(config, s, &mut writer)?,
        Study::Gk(_) => gk_study(config, &mut writer, jobs)?,
        Study::Ldf(_) => ldf_study(config, &mut writer, jobs)?,
        Study::Kmp(s) => kmp_study(config, s, &mut writer, jobs)?,
    };
    writer.tables.sort();
    let record = ResultRecord {
        schema: RESULT_SCHEMA.into(),
        config_hash: hash.into(),
        config: config.clone(),
        study: config.study.name().into(),
        status: overall(&tasks),
        tasks,
        summary,
        tables: writer.tables.clone(),
    };
    writer.write("summary.json", &to_json(&record)?)?;
    writer.save_checkpoint()?;
    let timing = serde_json::json!({
        "wall_seconds": started.elapsed().as_secs_f64(),
        "tasks_run_this_invocation": writer.timing,
    });
    writer.write("timing.json", &to_json(&timing)?)?;
    Ok(Outcome {
        record,
        dir: dir.to_path_buf(),
    })
}

type StudyOutput = (Vec<TaskStatus>, Value);

fn run_study(
    config: &ExperimentConfig,
    s: &RunStudy,
    writer: &mut Writer,
    jobs: usize,
) -> Result<StudyOutput> {
    let sim = config.simulation_config(s.blocks)?;
    let keys: Vec<String> = (0..s.replicas).map(|r| format!("replica_{r}")).collect();
    let results = run_tasks(writer, &keys, jobs, |r| {
        let o = simulate_replica(&sim, r as u64)?;
        let est = |x: &crate::observables::ObservableSeries| Estimate {
            mean: x.mean(),
            stderr: x.stderr(),
        };
        let mut series = String::from(
            "time[natural units],flux[energy/time],heat_left[energy/time],heat_right[energy/time],entropy_production[1/time k_B=1]\n",
        );
        for (k, t) in o.flux.times().enumerate() {
            let _ = writeln!(
                series,
                "{t},{},{},{},{}",
                o.flux.values[k],
                o.heat_left.values[k],
                o.heat_right.values[k],
                o.entropy.values[k]
            );
        }
        Ok(TaskOutput {
            value: RunReplica {
                flux: est(&o.flux),
                heat_left: est(&o.heat_left),
                heat_right: est(&o.heat_right),
                entropy_production: est(&o.entropy),
                temperature: estimates(&o.temperature.mean, &o.temperature.stderr),
                plane_flux: estimates(&o.plane_flux.mean, &o.plane_flux.stderr),
                flux_correlated: o.flux.stats.correlated,
                plane_disagreement: o.plane_disagreement(),
                samples: o.meta.samples,
                final_time: o.meta.final_time,
            },
            files: vec![(format!("series_replica_{r}.csv"), series)],
        })
    })?;
    let tasks = statuses(&keys, &results);
    let ok: Vec<&RunReplica> = results.iter().filter_map(|r| r.as_ref().ok()).collect();
    let mut replicas_csv = String::from(
        "replica,flux[energy/time],flux_stderr,heat_left[energy/time],heat_right[energy/time],entropy_production[1/time k_B=1],entropy_stderr,plane_disagreement[stderr]\n",
    );
    for (key, r) in keys.iter().zip(&results) {
        if let Ok(r) = r {
            let _ = writeln!(
                replicas_csv,
                "{key},{},{},{},{},{},{},{}",
                r.flux.mean,
                r.flux.stderr,
                r.heat_left.mean,
                r.heat_right.mean,
                r.entropy_production.mean,
                r.entropy_production.stderr,
                r.plane_disagreement
            );
        }
    }
    writer.table("replicas.csv", replicas_csv)?;
    if ok.is_empty() {
        return Ok((tasks, Value::Null));
    }
    let pick = |f: fn(&RunReplica) -> Estimate| {
        Estimate::combine(&ok.iter().map(|r| f(r)).collect::<Vec<_>>())
    };
    let flux = pick(|r| r.flux);
    let summary = NessSummary {
        flux,
        kappa: kappa_of(flux, &sim.lattice, &sim.reservoir),
        heat_left: pick(|r| r.heat_left),
        heat_right: pick(|r| r.heat_right),
        entropy_production: pick(|r| r.entropy_production),
        temperature: combine_profiles(&ok.iter().map(|r| &r.temperature).collect::<Vec<_>>()),
        plane_flux: combine_profiles(&ok.iter().map(|r| &r.plane_flux).collect::<Vec<_>>()),
        replicas: ok.len(),
    };
    ness_csvs(writer, &summary)?;
    Ok((tasks, serde_json::to_value(summary)?))
}

fn oracle_study(
    config: &ExperimentConfig,
    s: &OracleStudy,
    writer: &mut Writer,
) -> Result<StudyOutput> {
    let lattice = config.lattice.as_ref().expect("resolved");
    let reservoir = config.reservoir.as_ref().expect("resolved");
    let task = |name: &str, r: &Result<()>| TaskStatus {
        task: name.into(),
        status: if r.is_ok() {
            Status::Ok
        } else {
            Status::Failed
        },
        error: r.as_ref().err().map(|e| e.to_string()),
    };
    let obs = match harmonic_exact::oracle(lattice, reservoir) {
        Ok(o) => o,
        Err(e) if e.is_numerical() => {
            return Ok((vec![task("oracle", &Err(e))], Value::Null));
        }
        Err(e) => return Err(at_path(e)),
    };
    let flux = Estimate::exact(obs.mean_flux);
    let (tl, tr) = reservoir.temperatures().unwrap_or((1.0, 1.0));
    let summary = NessSummary {
        flux,
        kappa: kappa_of(flux, lattice, reservoir),
        heat_left: Estimate::exact(obs.heat_left),
        heat_right: Estimate::exact(obs.heat_right),
        entropy_production: Estimate::exact(obs.heat_left / tl + obs.heat_right / tr),
        temperature: obs
            .temperature
            .iter()
            .map(|&t| Estimate::exact(t))
            .collect(),
        plane_flux: obs.plane_flux.iter().map(|&f| Estimate::exact(f)).collect(),
        replicas: 1,
    };
    ness_csvs(writer, &summary)?;
    let mut tasks = vec![task("oracle", &Ok(()))];
    let mut value = serde_json::to_value(&summary)?;
    if let Some(lengths) = &s.lengths {
        let spec = ScanSpec {
            lattice: lattice.clone(),
            reservoir: reservoir.clone(),
            integrator: IntegratorSpec::new(1.0, 2, 1, 1, config.seed),
            lengths: lengths.clone(),
            replicas: 1,
            oracle: true,
            step_scaling_exponent: 0.0,
            exclude_smallest: false,
            initial: InitialCondition::Zero,
            blocks: DEFAULT_BLOCKS,
        };
        match conductivity_scan(&spec, 1) {
            Ok(scan) => {
                writer.table("kappa_scaling.csv", kappa_csv(&scan))?;
                value["scan"] = serde_json::to_value(&scan)?;
                tasks.push(task("scan", &Ok(())));
            }
            Err(e) if e.is_numerical() => tasks.push(task("scan", &Err(e))),
            Err(e) => return Err(at_path(e)),
        }
    }
    Ok((tasks, value))
}

fn kappa_csv(scan: &crate::transport::ScanResult) -> String {
    let mut s = String::from(
        "length,kappa[k_B=1],kappa_stderr,flux[energy/time],flux_stderr,used_in_fit,runs,excluded_runs,failed_runs\n",
    );
    for r in &scan.rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{},{}",
            r.length,
            r.kappa,
            r.stderr,
            r.flux,
            r.flux_stderr,
            !r.excluded,
            r.runs.len(),
            r.excluded_runs.len(),
            r.failures.len()
        );
    }
    s
}

fn sweep_study(config: &ExperimentConfig, writer: &mut Writer, jobs: usize) -> Result<StudyOutput> {
    let spec = config.scan_spec()?;
    let scan = if spec.oracle {
        match conductivity_scan(&spec, jobs) {
            Ok(scan) => scan,
            Err(e) if e.is_numerical() => {
                let t = TaskStatus {
                    task: "oracle".into(),
                    status: Status::Failed,
                    error: Some(e.to_string()),
                };
                return Ok((vec![t], Value::Null));
            }
            Err(e) => return Err(at_path(e)),
        }
    } else {
        let pairs = scan_tasks(&spec);
        let keys: Vec<String> = pairs
            .iter()
            .map(|(l, r)| format!("length_{l}_replica_{r}"))
            .collect();
        let results = run_tasks(writer, &keys, jobs, |i| {
            let (l, r) = pairs[i];
            scan_replica(&spec, l, r).map(TaskOutput::from)
        })?;
        let tasks = statuses(&keys, &results);
        let joined: Vec<((usize, u64), std::result::Result<ReplicaFlux, String>)> =
            pairs.into_iter().zip(results).collect();
        let scan = assemble_scan(&spec, &joined);
        return finish_sweep(writer, tasks, scan);
    };
    finish_sweep(
        writer,
        vec![TaskStatus {
            task: "oracle".into(),
            status: Status::Ok,
            error: None,
        }],
        scan,
    )
}

fn finish_sweep(
    writer: &mut Writer,
    tasks: Vec<TaskStatus>,
    scan: crate::transport::ScanResult,
) -> Result<StudyOutput> {
    writer.table("kappa_scaling.csv", kappa_csv(&scan))?;
    let mut profiles = String::from("length,layer,temperature[k_B=1]\n");
    for row in &scan.rows {
        for (i, t) in row.temperature.iter().enumerate() {
            let _ = writeln!(profiles, "{},{i},{t}", row.length);
        }
    }
    writer.table("temperature_profiles.csv", profiles)?;
    Ok((tasks, serde_json::to_value(&scan)?))
}

fn gk_study(config: &ExperimentConfig, writer: &mut Writer, jobs: usize) -> Result<StudyOutput> {
    let spec = config.gk_spec()?;
    let keys: Vec<String> = (0..spec.replicas).map(|r| format!("replica_{r}")).collect();
    let results = run_tasks(writer, &keys, jobs, |r| {
        gk_replica(&spec, r as u64).map(TaskOutput::from)
    })?;
    let tasks = statuses(&keys, &results);
    let parts: Vec<GkReplica> = results.into_iter().filter_map(|r| r.ok()).collect();
    if parts.is_empty() {
        return Ok((tasks, Value::Null));
    }
    let gk = assemble_gk(&spec, &parts)?;
    let mut csv =
        String::from("time[natural units],correlation[(energy/time)^2],kappa_integral[k_B=1]\n");
    for ((t, c), (_, i)) in gk.correlation.iter().zip(&gk.integral) {
        let _ = writeln!(csv, "{t},{c},{i}");
    }
    writer.table("gk_correlation.csv", csv)?;
    let mut value = serde_json::to_value(&gk)?;
    if let Some(obj) = value.as_object_mut() {
        obj.remove("correlation");
        obj.remove("integral");
    }
    Ok((tasks, value))
}

fn ldf_study(config: &ExperimentConfig, writer: &mut Writer, jobs: usize) -> Result<StudyOutput> {
    let spec = config.ldf_spec()?;
    let keys: Vec<String> = (0..spec.replicas).map(|r| format!("replica_{r}")).collect();
    let results = run_tasks(writer, &keys, jobs, |r| {
        ldf_segments(&spec, r as u64).map(TaskOutput::from)
    })?;
    let tasks = statuses(&keys, &results);
    let parts: Vec<LdfSegments> = results.into_iter().filter_map(|r| r.ok()).collect();
    if parts.is_empty() {
        return Ok((tasks, Value::Null));
    }
    let sigma: Vec<f64> = parts
        .iter()
        .flat_map(|p| p.segments.iter().copied())
        .collect();
    let mus: Vec<(f64, f64)> = parts
        .iter()
        .map(|p| (p.mu_sigma, p.mu_sigma_stderr))
        .collect();
    let ldf = ldf_from_segments(&spec, parts[0].segment_time, &sigma, &mus).map_err(at_path)?;
    let mut table = String::from("p[1/time k_B=1],count,density,rate[1/time]\n");
    for r in &ldf.table {
        let rate = r.rate.map_or(String::new(), |v| v.to_string());
        let _ = writeln!(table, "{},{},{},{rate}", r.p, r.count, r.density);
    }
    writer.table("rate_function.csv", table)?;
    let mut odd = String::from("p[1/time k_B=1],odd_part[1/time],stderr\n");
    for r in &ldf.odd {
        let _ = writeln!(odd, "{},{},{}", r.p, r.value, r.stderr);
    }
    writer.table("rate_function_odd.csv", odd)?;
    let mut value = serde_json::to_value(&ldf)?;
    if let Some(obj) = value.as_object_mut() {
        obj.remove("table");
        obj.remove("odd");
    }
    Ok((tasks, value))
}

fn kmp_study(
    config: &ExperimentConfig,
    s: &KmpStudy,
    writer: &mut Writer,
    jobs: usize,
) -> Result<StudyOutput> {
    let spec = config.kmp_spec()?;
    let keys: Vec<String> = (0..s.replicas).map(|r| format!("replica_{r}")).collect();
    let results = run_tasks(writer, &keys, jobs, |r| {
        kmp_profile_and_flux(&spec, r as u64).map(TaskOutput::from)
    })?;
    let tasks = statuses(&keys, &results);
    let ok: Vec<_> = results.iter().filter_map(|r| r.as_ref().ok()).collect();
    if ok.is_empty() {
        return Ok((tasks, Value::Null));
    }
    let profiles: Vec<Vec<Estimate>> = ok
        .iter()
        .map(|r| estimates(&r.profile.mean, &r.profile.stderr))
        .collect();
    let profile = combine_profiles(&profiles.iter().collect::<Vec<_>>());
    writer.table(
        "kmp_profile.csv",
        profile_csv("site", "energy[k_B=1]", &profile),
    )?;
    let flux = Estimate::combine(
        &ok.iter()
            .map(|r| Estimate {
                mean: r.flux.mean,
                stderr: r.flux.stderr,
            })
            .collect::<Vec<_>>(),
    );
    let kappa = Estimate::combine(
        &ok.iter()
            .map(|r| Estimate {
                mean: r.kappa,
                stderr: r.kappa_stderr,
            })
            .collect::<Vec<_>>(),
    );
    let summary = serde_json::json!({
        "flux": flux,
        "kappa": kappa,
        "profile": profile,
        "replicas": ok,
    });
    Ok((tasks, summary))
}
