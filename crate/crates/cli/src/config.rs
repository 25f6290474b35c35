//! TOML run configuration.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use voltsim::circuit::CircuitParams;
use voltsim::errmodel::{DimmProfile, Vendor};
use voltsim::memsim::SimConfig;
use voltsim::power::PowerConfig;
use voltsim::timing::{build_latency_table, default_voltages, Guardband, LatencySource, LatencyTable};
use voltsim::voltron::{DvfsThresholds, Policy, PredictorCoefficients};

use crate::CliError;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: Option<u64>,
    pub jobs: Option<usize>,
    pub out_dir: Option<PathBuf>,
    /// Trace files or `builtin:<name>[:<records>]`, one per core.
    pub traces: Vec<String>,
    pub system: SimConfig,
    pub timing: TimingConfig,
    pub power: PowerConfig,
    pub policy: PolicyConfig,
    pub bitline: BitlineConfig,
    pub sweep: SweepConfig,
    pub characterize: CharacterizeConfig,
    pub anova: InputConfig,
    pub fit: FitConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TimingSourceKind {
    #[default]
    Table,
    Model,
    File,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TimingConfig {
    pub source: TimingSourceKind,
    /// Latency-table CSV, for `source = "file"`.
    pub table_file: Option<PathBuf>,
    /// Circuit parameters as JSON, for `source = "model"` and `bitline`.
    pub params_file: Option<PathBuf>,
    pub guardband: Guardband,
    pub voltages: Vec<f64>,
}

impl Default for TimingConfig {
    fn default() -> Self {
        Self {
            source: TimingSourceKind::Table,
            table_file: None,
            params_file: None,
            guardband: Guardband::default(),
            voltages: default_voltages(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PolicyConfig {
    pub name: String,
    /// Percent.
    pub target_loss: f64,
    /// Array voltage of the `fixed` policy.
    pub voltage: f64,
    pub dvfs: DvfsThresholds,
    pub coefficients: PredictorCoefficients,
    /// JSON coefficients, as written by `fit-predictor`.
    pub coefficients_file: Option<PathBuf>,
    /// Run every trace alone at nominal to report weighted speedup.
    pub weighted_speedup: bool,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self {
            name: "fixed".into(),
            target_loss: 5.0,
            voltage: 1.35,
            dvfs: DvfsThresholds::default(),
            coefficients: PredictorCoefficients::default(),
            coefficients_file: None,
            weighted_speedup: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BitlineConfig {
    pub vdd: f64,
    pub cell_stores_one: bool,
    pub t_pre_issue_ns: f64,
    pub dt_ns: f64,
}

impl Default for BitlineConfig {
    fn default() -> Self {
        Self { vdd: 1.35, cell_stores_one: true, t_pre_issue_ns: 40.0, dt_ns: 0.01 }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    /// Array voltages; empty means every table row.
    pub voltages: Vec<f64>,
    /// When non-empty, sweep these policies instead of voltages.
    pub policies: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CharacterizeConfig {
    /// `A`, `B`, `C` or paths to profile JSON files.
    pub profiles: Vec<String>,
    pub rounds: u32,
    pub voltages: Vec<f64>,
}

impl Default for CharacterizeConfig {
    fn default() -> Self {
        Self { profiles: vec!["A".into(), "B".into(), "C".into()], rounds: 30, voltages: default_voltages() }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InputConfig {
    pub input: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitConfig {
    /// Samples CSV; when absent, samples are simulated from the traces.
    pub input: Option<PathBuf>,
    pub mpki_threshold: f64,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self { input: None, mpki_threshold: PredictorCoefficients::default().mpki_threshold }
    }
}

impl RunConfig {
    /// Reads a config file; relative paths inside it are resolved against
    /// its directory.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg: RunConfig =
            toml::from_str(&text).map_err(|e| CliError::Usage(format!("bad config {}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve(base);
        Ok(cfg)
    }

    fn resolve(&mut self, base: &Path) {
        let fix = |p: &mut Option<PathBuf>| {
            if let Some(x) = p {
                if x.is_relative() {
                    *x = base.join(&*x);
                }
            }
        };
        fix(&mut self.timing.table_file);
        fix(&mut self.timing.params_file);
        fix(&mut self.policy.coefficients_file);
        fix(&mut self.anova.input);
        fix(&mut self.fit.input);
        fix(&mut self.out_dir);
        for t in &mut self.traces {
            if !t.starts_with("builtin:") && Path::new(t).is_relative() {
                *t = base.join(&*t).to_string_lossy().into_owned();
            }
        }
        for p in &mut self.characterize.profiles {
            if Path::new(p).extension().is_some() && Path::new(p).is_relative() {
                *p = base.join(&*p).to_string_lossy().into_owned();
            }
        }
    }

    /// Checks values and that referenced files exist.
    pub fn validate(&self) -> Result<(), CliError> {
        let files = [
            &self.timing.table_file,
            &self.timing.params_file,
            &self.policy.coefficients_file,
            &self.anova.input,
            &self.fit.input,
        ];
        for f in files.into_iter().flatten() {
            if !f.is_file() {
                return Err(CliError::Usage(format!("file not found: {}", f.display())));
            }
        }
        for t in self.traces.iter().filter(|t| !t.starts_with("builtin:")) {
            if !Path::new(t).is_file() {
                return Err(CliError::Usage(format!("trace not found: {t}")));
            }
        }
        if self.timing.source == TimingSourceKind::File && self.timing.table_file.is_none() {
            return Err(CliError::Usage("timing source 'file' needs timing.table_file".into()));
        }
        if !(self.policy.target_loss >= 0.0) {
            return Err(CliError::Usage("target loss must be non-negative".into()));
        }
        if self.jobs == Some(0) {
            return Err(CliError::Usage("jobs must be positive".into()));
        }
        self.system.validate()?;
        self.power.validate()?;
        self.policy.dvfs.validate()?;
        Ok(())
    }

    pub fn circuit_params(&self) -> Result<CircuitParams, CliError> {
        match &self.timing.params_file {
            Some(p) => {
                let text = read(p)?;
                serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("bad circuit parameters: {e}")))
            }
            None => Ok(CircuitParams::default()),
        }
    }

    pub fn latency_table(&self) -> Result<LatencyTable, CliError> {
        let t = &self.timing;
        Ok(match t.source {
            TimingSourceKind::Table => build_latency_table(&LatencySource::Published, &t.voltages)?,
            TimingSourceKind::Model => build_latency_table(
                &LatencySource::Model { params: self.circuit_params()?, guardband: t.guardband },
                &t.voltages,
            )?,
            TimingSourceKind::File => {
                let path = t.table_file.as_ref().expect("validated");
                LatencyTable::from_csv(&read(path)?, t.guardband.t_ck_ns)?
            }
        })
    }

    pub fn coefficients(&self) -> Result<PredictorCoefficients, CliError> {
        match &self.policy.coefficients_file {
            Some(p) => {
                let c: PredictorCoefficients = serde_json::from_str(&read(p)?)
                    .map_err(|e| CliError::Usage(format!("bad coefficients file: {e}")))?;
                c.validate()?;
                Ok(c)
            }
            None => Ok(self.policy.coefficients),
        }
    }

    pub fn policy(&self) -> Result<Policy, CliError> {
        let p = match self.policy.name.as_str() {
            "memdvfs" => Policy::Memdvfs { hi: self.policy.dvfs.hi, lo: self.policy.dvfs.lo },
            name => Policy::from_name(name, self.policy.target_loss)?,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn profiles(&self) -> Result<Vec<DimmProfile>, CliError> {
        self.characterize
            .profiles
            .iter()
            .map(|p| match p.to_ascii_uppercase().as_str() {
                "A" => Ok(DimmProfile::bundled(Vendor::A)),
                "B" => Ok(DimmProfile::bundled(Vendor::B)),
                "C" => Ok(DimmProfile::bundled(Vendor::C)),
                _ => Ok(DimmProfile::from_json(&read(Path::new(p))?)?),
            })
            .collect()
    }
}

pub(crate) fn read(path: &Path) -> Result<String, CliError> {
    std::fs::read_to_string(path).map_err(|e| CliError::Usage(format!("cannot read {}: {e}", path.display())))
}
