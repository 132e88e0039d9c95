use std::path::{Path, PathBuf};

use meso_rmt::clt::{BaseFunction, CltOptions, TestFunctionSpec, VarianceOptions};
use meso_rmt::dyson::SolverOptions;
use meso_rmt::ensemble::{EntryLaw, Family, ProfileDocument, ProfileSpec, VarianceProfile};
use meso_rmt::stability::StabilityOptions;
use meso_rmt::C64;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::CliError;

/// Everything a command needs. Reports embed the resolved form of this.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "default_profile")]
    pub profile: ProfileSpec,
    /// Profile document on disk; replaces `profile` and fixes `n`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub profile_file: Option<PathBuf>,
    #[serde(default = "default_n")]
    pub n: usize,
    #[serde(default = "default_law")]
    pub law: EntryLaw,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub solver: SolverOptions,
    #[serde(default)]
    pub density: DensitySection,
    #[serde(default)]
    pub stability: StabilitySection,
    #[serde(default)]
    pub local_law: LocalLawSection,
    #[serde(default)]
    pub clt: CltSection,
    #[serde(default)]
    pub variance: VarianceSection,
}

fn default_profile() -> ProfileSpec {
    ProfileSpec::constant()
}

fn default_n() -> usize {
    1000
}

fn default_law() -> EntryLaw {
    EntryLaw { family: Family::Gaussian, beta: 1 }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DensitySection {
    pub e_min: f64,
    pub e_max: f64,
    pub n_points: usize,
    pub eta_probe: f64,
    pub kappa: f64,
    pub threshold: f64,
}

impl Default for DensitySection {
    fn default() -> Self {
        DensitySection { e_min: -3.0, e_max: 3.0, n_points: 601, eta_probe: 1e-6, kappa: 0.1, threshold: 0.05 }
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Axis {
    pub min: f64,
    pub max: f64,
    pub points: usize,
}

impl Axis {
    pub fn values(&self) -> Vec<f64> {
        if self.points <= 1 {
            return vec![self.min];
        }
        let h = (self.max - self.min) / (self.points - 1) as f64;
        (0..self.points).map(|i| self.min + h * i as f64).collect()
    }
}

/// Grid of pairs (E + i eta_z, E' + i eta_zeta).
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StabilitySection {
    pub re_z: Axis,
    pub re_zeta: Axis,
    pub eta_z: f64,
    pub eta_zeta: f64,
    pub options: StabilityOptions,
    pub kappa: f64,
    pub bulk_threshold: f64,
    /// Pairs with |Re z - Re zeta| up to this are gated in --check mode.
    pub pair_eps: f64,
}

impl Default for StabilitySection {
    fn default() -> Self {
        let axis = Axis { min: -1.5, max: 1.5, points: 7 };
        StabilitySection {
            re_z: axis,
            re_zeta: axis,
            eta_z: 1e-3,
            eta_zeta: -1e-3,
            options: StabilityOptions::default(),
            kappa: 0.1,
            bulk_threshold: 0.05,
            pair_eps: 0.05,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LocalLawSection {
    pub z: C64,
    /// Defaults to the conjugate of z.
    pub zeta: Option<C64>,
    pub n_values: Vec<usize>,
    pub samples_per_n: usize,
    pub random_probes: usize,
    pub bound_slack_exponent: f64,
}

impl Default for LocalLawSection {
    fn default() -> Self {
        LocalLawSection {
            z: C64::new(0.3, 0.1),
            zeta: None,
            n_values: vec![256, 512, 1024, 2048],
            samples_per_n: 20,
            random_probes: 64,
            bound_slack_exponent: 0.1,
        }
    }
}

fn default_test_function() -> TestFunctionSpec {
    TestFunctionSpec { base: BaseFunction::bump(), e0: 0.0, eta0: None, eta0_exponent: 0.3 }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CltSection {
    pub test_function: TestFunctionSpec,
    pub n_samples: usize,
    pub histogram_bins: usize,
    pub options: CltOptions,
}

impl Default for CltSection {
    fn default() -> Self {
        CltSection { test_function: default_test_function(), n_samples: 2000, histogram_bins: 40, options: CltOptions::default() }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VarianceSection {
    pub test_function: TestFunctionSpec,
    pub options: VarianceOptions,
    /// Largest relative discrepancy accepted by --check.
    pub max_discrepancy: f64,
}

impl Default for VarianceSection {
    fn default() -> Self {
        VarianceSection { test_function: default_test_function(), options: VarianceOptions::default(), max_discrepancy: 0.15 }
    }
}

impl Default for RunConfig {
    fn default() -> Self {
        serde_json::from_value(Value::Object(Default::default())).expect("defaults deserialize")
    }
}

impl RunConfig {
    /// Reads the config (defaults when `path` is None), applies dotted-path
    /// overrides and resolves any profile file into the inline form.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<RunConfig, CliError> {
        let mut doc = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?;
                serde_json::from_str::<Value>(&text).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?
            }
            None => Value::Object(Default::default()),
        };
        let defaults = serde_json::to_value(RunConfig::default()).expect("defaults serialize");
        for o in overrides {
            apply_override(&mut doc, &defaults, o)?;
        }
        let mut cfg: RunConfig = serde_json::from_value(doc).map_err(|e| CliError::Config(e.to_string()))?;
        if let Some(file) = cfg.profile_file.take() {
            let base = path.and_then(Path::parent).unwrap_or(Path::new(""));
            let full = if file.is_absolute() { file.clone() } else { base.join(&file) };
            let text = std::fs::read_to_string(&full).map_err(|e| CliError::Config(format!("{}: {e}", full.display())))?;
            let doc: ProfileDocument = serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", full.display())))?;
            VarianceProfile::from_document(&doc).map_err(|e| CliError::Config(format!("{}: {e}", full.display())))?;
            cfg.profile = ProfileSpec { kind: doc.kind, params: doc.params };
            cfg.n = doc.n;
        }
        cfg.law.validate().map_err(|e| CliError::Config(e.to_string()))?;
        if cfg.n < 2 {
            return Err(CliError::Config(format!("n must be at least 2, got {}", cfg.n)));
        }
        Ok(cfg)
    }

    pub fn build_profile(&self) -> Result<VarianceProfile, CliError> {
        self.profile.build(self.n).map_err(|e| CliError::Config(format!("profile: {e}")))
    }
}

/// Applies `a.b.c=value`. The value is parsed as JSON, falling back to a
/// plain string. Missing keys along the path are filled from `defaults`, so a
/// single field of an absent section can be overridden.
pub fn apply_override(doc: &mut Value, defaults: &Value, spec: &str) -> Result<(), CliError> {
    let (path, raw) =
        spec.split_once('=').ok_or_else(|| CliError::Config(format!("override `{spec}` is not of the form key.path=value")))?;
    if path.is_empty() || path.split('.').any(str::is_empty) {
        return Err(CliError::Config(format!("bad override path `{path}`")));
    }
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut cur = doc;
    let mut def = Some(defaults);
    for key in path.split('.') {
        def = def.and_then(|d| match d {
            Value::Array(items) => key.parse::<usize>().ok().and_then(|i| items.get(i)),
            _ => d.get(key),
        });
        cur = match cur {
            Value::Array(items) => {
                let i: usize = key.parse().map_err(|_| CliError::Config(format!("`{key}` in `{path}` indexes an array")))?;
                let len = items.len();
                items.get_mut(i).ok_or_else(|| CliError::Config(format!("index {i} out of range ({len}) in `{path}`")))?
            }
            v => {
                if v.is_null() {
                    *v = Value::Object(Default::default());
                }
                match v {
                    Value::Object(map) => map.entry(key.to_string()).or_insert_with(|| def.cloned().unwrap_or(Value::Null)),
                    _ => return Err(CliError::Config(format!("`{path}` descends into a non-object"))),
                }
            }
        };
    }
    *cur = value;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_create_and_replace() {
        let d = serde_json::json!({"clt": {"options": {"kappa": 0.1, "solver": {"tol": 1.0}}, "n_samples": 5}});
        let mut v = serde_json::json!({"density": {"n_points": 10}, "local_law": {"n_values": [1, 2]}});
        apply_override(&mut v, &d, "density.n_points=64").unwrap();
        apply_override(&mut v, &d, "clt.options.kappa=0.2").unwrap();
        apply_override(&mut v, &d, "local_law.n_values.1=7").unwrap();
        apply_override(&mut v, &d, "law.family=rademacher").unwrap();
        assert_eq!(v["density"]["n_points"], 64);
        assert_eq!(v["clt"]["options"]["kappa"], 0.2);
        assert_eq!(v["clt"]["options"]["solver"]["tol"], 1.0);
        assert_eq!(v["clt"]["n_samples"], 5);
        assert_eq!(v["local_law"]["n_values"][1], 7);
        assert_eq!(v["law"]["family"], "rademacher");
        assert!(apply_override(&mut v, &d, "density.n_points").is_err());
        assert!(apply_override(&mut v, &d, "density.n_points.x=1").is_err());
        assert!(apply_override(&mut v, &d, "local_law.n_values.9=1").is_err());
    }

    #[test]
    fn defaults_round_trip() {
        let c = RunConfig::default();
        let v = serde_json::to_value(&c).unwrap();
        let back: RunConfig = serde_json::from_value(v.clone()).unwrap();
        assert_eq!(serde_json::to_value(&back).unwrap(), v);
        assert_eq!(c.n, 1000);
        assert_eq!(c.law.beta, 1);
    }

    #[test]
    fn unknown_fields_are_rejected() {
        let v = serde_json::json!({"density": {"points": 10}});
        assert!(serde_json::from_value::<RunConfig>(v).is_err());
    }
}
