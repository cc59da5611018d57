//! Campaign configuration: one JSON document, leaf overrides by dotted path.

use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::augment::{build_augmented, AugmentedPlant};
use crate::impedance::{make_msd_spec, make_shaping_filter, make_static_spec, ImpedanceSpec, StiffnessProfile};
use crate::plant::PlantModel;
use crate::poly::PolynomialFn;
use crate::selfsense::{CapacitanceMap, SelfSenseConfig};
use crate::sim::{InitialCondition, SignalSpec, SimConfig};
use crate::synthesis::{Grid, SynthesisProblem, DEFAULT_DESIGN_POINTS, DEFAULT_EPS24, DEFAULT_EPS27, DEFAULT_VALIDATION_POINTS, MAX_DENSIFY_ROUNDS};

use super::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SpecConfig {
    StaticLinear { k_star: f64, y0_star: f64 },
    /// `k_star` holds ascending polynomial coefficients in `y`.
    StaticNonlinear { k_star: Vec<f64>, y0_star: f64 },
    Msd { k_star: f64, tau: f64, delta: f64, y0_star: f64 },
}

impl SpecConfig {
    pub fn y0_star(&self) -> f64 {
        match self {
            SpecConfig::StaticLinear { y0_star, .. }
            | SpecConfig::StaticNonlinear { y0_star, .. }
            | SpecConfig::Msd { y0_star, .. } => *y0_star,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FilterConfig {
    pub omega_s: f64,
    #[serde(default)]
    pub m_s: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthesisConfig {
    pub lambda: f64,
    /// Diagonal of `W`; identity when absent.
    pub w_diag: Option<Vec<f64>>,
    pub design_points: usize,
    pub validation_points: usize,
    pub eps24: f64,
    pub eps27: f64,
    pub max_rounds: usize,
}

impl Default for SynthesisConfig {
    fn default() -> Self {
        Self {
            lambda: 1.0,
            w_diag: None,
            design_points: DEFAULT_DESIGN_POINTS,
            validation_points: DEFAULT_VALIDATION_POINTS,
            eps24: DEFAULT_EPS24,
            eps27: DEFAULT_EPS27,
            max_rounds: MAX_DENSIFY_ROUNDS,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulationConfig {
    pub signal: SignalSpec,
    /// Time-varying `y0*`; the spec's constant value when absent.
    pub set_point: Option<SignalSpec>,
    pub duration: f64,
    pub dt_plant: f64,
    pub dt_control: f64,
    pub record_stride: usize,
    pub initial: InitialCondition,
    /// Trailing window for the steady-state error (s).
    pub tail: f64,
    /// Band for the settling time (mm).
    pub settle_band: f64,
    pub svg: bool,
}

impl Default for SimulationConfig {
    fn default() -> Self {
        let s = SimConfig::default();
        Self {
            signal: SignalSpec::Constant { value: 0.0 },
            set_point: None,
            duration: s.duration,
            dt_plant: s.dt_plant,
            dt_control: s.dt_control,
            record_stride: s.record_stride,
            initial: s.initial,
            tail: 0.5,
            settle_band: 1e-3,
            svg: true,
        }
    }
}

impl SimulationConfig {
    pub fn sim_config(&self) -> SimConfig {
        SimConfig {
            dt_plant: self.dt_plant,
            dt_control: self.dt_control,
            duration: self.duration,
            record_stride: self.record_stride,
            initial: self.initial.clone(),
            ..SimConfig::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SelfSenseCampaign {
    pub enabled: bool,
    pub estimator: SelfSenseConfig,
    /// Two-column CSV `y_mm, C_F`; the synthetic affine map when absent.
    pub map: Option<PathBuf>,
    /// Open-loop run at constant capacitance `c_e` under DC `v_dc`.
    pub open_loop_duration: f64,
    pub v_dc: f64,
    pub c_e: f64,
    /// Relative capacitance drift per second in the open-loop run.
    pub c_e_ramp: f64,
    /// Paired sensor-fed and self-sensed closed-loop runs.
    pub closed_loop: bool,
    /// Forgetting factor used in the closed-loop run.
    pub closed_loop_forgetting: f64,
    /// Estimator samples between trace rows in the closed-loop run.
    pub trace_stride: usize,
}

impl Default for SelfSenseCampaign {
    fn default() -> Self {
        Self {
            enabled: false,
            estimator: SelfSenseConfig::default(),
            map: None,
            open_loop_duration: 1.0,
            v_dc: 0.0,
            c_e: 2e-9,
            c_e_ramp: 0.0,
            closed_loop: false,
            closed_loop_forgetting: 0.99,
            trace_stride: 20,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CampaignConfig {
    pub name: String,
    /// `synthetic_default`, `constant_coefficients` or a plant JSON path.
    #[serde(default = "default_plant")]
    pub plant: String,
    pub spec: SpecConfig,
    pub filter: FilterConfig,
    #[serde(default)]
    pub synthesis: SynthesisConfig,
    #[serde(default)]
    pub simulation: SimulationConfig,
    #[serde(default)]
    pub selfsense: SelfSenseCampaign,
    #[serde(default = "default_output")]
    pub output: PathBuf,
    #[serde(default)]
    pub seed: u64,
    /// Directory against which relative paths resolve; not serialized.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

fn default_plant() -> String {
    "synthetic_default".into()
}

fn default_output() -> PathBuf {
    PathBuf::from("out")
}

/// Sets the leaf at `path` (dot separated) to `raw`, parsed as JSON when it
/// parses and kept as a string otherwise.
pub fn apply_override(doc: &mut Value, path: &str, raw: &str) -> Result<(), CliError> {
    let value = serde_json::from_str::<Value>(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let keys: Vec<&str> = path.split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(CliError::Input(format!("malformed override path {path:?}")));
    }
    let mut node = doc;
    for key in &keys[..keys.len() - 1] {
        node = match node {
            Value::Object(map) => map
                .entry(key.to_string())
                .or_insert_with(|| Value::Object(Default::default())),
            Value::Array(items) => {
                let idx: usize = key
                    .parse()
                    .map_err(|_| CliError::Input(format!("{path}: {key:?} is not an array index")))?;
                items
                    .get_mut(idx)
                    .ok_or_else(|| CliError::Input(format!("{path}: index {idx} out of range")))?
            }
            _ => return Err(CliError::Input(format!("{path}: {key:?} is not a container"))),
        };
    }
    let last = keys[keys.len() - 1];
    match node {
        Value::Object(map) => {
            map.insert(last.to_string(), value);
        }
        Value::Array(items) => {
            let idx: usize = last
                .parse()
                .map_err(|_| CliError::Input(format!("{path}: {last:?} is not an array index")))?;
            *items
                .get_mut(idx)
                .ok_or_else(|| CliError::Input(format!("{path}: index {idx} out of range")))? = value;
        }
        _ => return Err(CliError::Input(format!("{path}: parent is not a container"))),
    }
    Ok(())
}

impl CampaignConfig {
    pub fn from_value(doc: Value, base_dir: &Path) -> Result<Self, CliError> {
        let mut cfg: CampaignConfig =
            serde_json::from_value(doc).map_err(|e| CliError::Input(format!("config: {e}")))?;
        cfg.base_dir = base_dir.to_path_buf();
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads `path` and applies `KEY=VALUE` overrides in order.
    pub fn load(path: &Path, overrides: &[String]) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Input(format!("cannot read {}: {e}", path.display())))?;
        let mut doc: Value =
            serde_json::from_str(&text).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
        for ov in overrides {
            let (k, v) = ov
                .split_once('=')
                .ok_or_else(|| CliError::Input(format!("override {ov:?} is not KEY=VALUE")))?;
            apply_override(&mut doc, k.trim(), v.trim())?;
        }
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::from_value(doc, &base)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |m: String| Err(CliError::Input(m));
        if self.name.is_empty() || self.name.contains(['/', '\\']) {
            return bad(format!("campaign name {:?} must be a plain non-empty word", self.name));
        }
        let s = &self.synthesis;
        if !(s.lambda.is_finite() && s.lambda > 0.0) {
            return bad(format!("synthesis.lambda must be positive, got {}", s.lambda));
        }
        if s.design_points < 2 || s.validation_points < 2 {
            return bad("grids need at least two points".into());
        }
        if let Some(w) = &s.w_diag {
            if w.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
                return bad("synthesis.w_diag entries must be positive".into());
            }
        }
        if !(self.simulation.tail > 0.0 && self.simulation.tail <= self.simulation.duration) {
            return bad("simulation.tail must lie in (0, duration]".into());
        }
        self.simulation.sim_config().substeps().map_err(|e| CliError::Input(e.to_string()))?;
        if let Some(m) = &self.selfsense.map {
            let p = self.resolve(m);
            if !p.exists() {
                return bad(format!("capacitance map {} does not exist", p.display()));
            }
        }
        if !matches!(self.plant.as_str(), "synthetic_default" | "constant_coefficients") {
            let p = self.resolve(Path::new(&self.plant));
            if !p.exists() {
                return bad(format!("plant file {} does not exist", p.display()));
            }
        }
        self.selfsense
            .estimator
            .validate()
            .map_err(|e| CliError::Input(e.to_string()))?;
        Ok(())
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    /// Output directory for this campaign.
    pub fn out_dir(&self) -> PathBuf {
        self.output.join(&self.name)
    }

    pub fn to_value(&self) -> Value {
        serde_json::to_value(self).expect("config serializes")
    }

    /// SHA-256 of the canonical (sorted-key) JSON of the resolved config.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_value().to_string().as_bytes()))
    }

    pub fn plant_model(&self) -> Result<PlantModel, CliError> {
        match self.plant.as_str() {
            "synthetic_default" => Ok(PlantModel::synthetic_default()),
            "constant_coefficients" => Ok(PlantModel::constant_coefficients()),
            path => {
                let p = self.resolve(Path::new(path));
                let text = std::fs::read_to_string(&p)
                    .map_err(|e| CliError::Input(format!("cannot read {}: {e}", p.display())))?;
                PlantModel::from_json(&text).map_err(|e| CliError::Input(e.to_string()))
            }
        }
    }

    pub fn impedance(&self, bounds: (f64, f64)) -> Result<ImpedanceSpec, CliError> {
        let err = |e: crate::impedance::ImpedanceError| CliError::Input(e.to_string());
        match &self.spec {
            SpecConfig::StaticLinear { k_star, y0_star } => {
                make_static_spec(&StiffnessProfile::linear(*k_star, *y0_star), bounds).map_err(err)
            }
            SpecConfig::StaticNonlinear { k_star, y0_star } => {
                let k = PolynomialFn::new(k_star.clone())
                    .ok_or_else(|| CliError::Input("spec.k_star coefficients must be finite and non-empty".into()))?;
                make_static_spec(
                    &StiffnessProfile {
                        k_star: k,
                        y0_star: *y0_star,
                    },
                    bounds,
                )
                .map_err(err)
            }
            SpecConfig::Msd { k_star, tau, delta, .. } => make_msd_spec(*k_star, *tau, *delta).map_err(err),
        }
    }

    pub fn augmented(&self) -> Result<AugmentedPlant, CliError> {
        let plant = self.plant_model()?;
        let spec = self.impedance(plant.y_bounds())?;
        let filt = make_shaping_filter(&spec, self.filter.omega_s, self.filter.m_s)
            .map_err(|e| CliError::Input(e.to_string()))?;
        build_augmented(&plant, &spec, &filt).map_err(|e| CliError::Input(e.to_string()))
    }

    pub fn problem(&self) -> Result<SynthesisProblem<AugmentedPlant>, CliError> {
        let aug = self.augmented()?;
        let n_m = aug.n_m();
        let bounds = aug.plant().y_bounds();
        let w = match &self.synthesis.w_diag {
            None => DMatrix::identity(n_m, n_m),
            Some(d) if d.len() == n_m => DMatrix::from_diagonal(&nalgebra::DVector::from_column_slice(d)),
            Some(d) => {
                return Err(CliError::Input(format!(
                    "synthesis.w_diag has {} entries, expected {n_m}",
                    d.len()
                )))
            }
        };
        let mut prob =
            SynthesisProblem::new(aug, self.synthesis.lambda, w).map_err(|e| CliError::Input(e.to_string()))?;
        prob.grid = Grid::uniform(bounds, self.synthesis.design_points, self.synthesis.validation_points)
            .map_err(|e| CliError::Input(e.to_string()))?;
        prob.eps24 = self.synthesis.eps24;
        prob.eps27 = self.synthesis.eps27;
        prob.max_rounds = self.synthesis.max_rounds;
        Ok(prob)
    }

    pub fn capacitance_map(&self) -> Result<CapacitanceMap, CliError> {
        match &self.selfsense.map {
            None => Ok(CapacitanceMap::synthetic_default()),
            Some(p) => {
                let p = self.resolve(p);
                let f = std::fs::File::open(&p)
                    .map_err(|e| CliError::Input(format!("cannot open {}: {e}", p.display())))?;
                CapacitanceMap::from_csv(f).map_err(|e| CliError::Input(e.to_string()))
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn base() -> Value {
        json!({
            "name": "t",
            "spec": {"kind": "static_linear", "k_star": 0.2, "y0_star": 2.9},
            "filter": {"omega_s": 15.0, "m_s": 2.0}
        })
    }

    #[test]
    fn defaults_fill_in() {
        let c = CampaignConfig::from_value(base(), Path::new(".")).unwrap();
        assert_eq!(c.plant, "synthetic_default");
        assert_eq!(c.synthesis.lambda, 1.0);
        assert_eq!(c.out_dir(), PathBuf::from("out/t"));
    }

    #[test]
    fn overrides_reach_leaves() {
        let mut v = base();
        apply_override(&mut v, "synthesis.lambda", "0.5").unwrap();
        apply_override(&mut v, "spec.k_star", "0.013").unwrap();
        apply_override(&mut v, "name", "renamed").unwrap();
        let c = CampaignConfig::from_value(v, Path::new(".")).unwrap();
        assert_eq!(c.synthesis.lambda, 0.5);
        assert_eq!(c.spec, SpecConfig::StaticLinear { k_star: 0.013, y0_star: 2.9 });
        assert_eq!(c.name, "renamed");
        let mut v = base();
        assert!(apply_override(&mut v, "name.x", "1").is_err());
        assert!(apply_override(&mut v, "a..b", "1").is_err());
    }

    #[test]
    fn unknown_fields_rejected() {
        let mut v = base();
        v["filter"]["omega"] = json!(1.0);
        assert!(CampaignConfig::from_value(v, Path::new(".")).is_err());
    }

    #[test]
    fn hash_tracks_content() {
        let a = CampaignConfig::from_value(base(), Path::new(".")).unwrap();
        let mut v = base();
        apply_override(&mut v, "seed", "7").unwrap();
        let b = CampaignConfig::from_value(v, Path::new(".")).unwrap();
        assert_eq!(a.hash(), a.clone().hash());
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 64);
    }

    #[test]
    fn missing_plant_file_is_input_error() {
        let mut v = base();
        v["plant"] = json!("nope/plant.json");
        assert!(matches!(CampaignConfig::from_value(v, Path::new(".")), Err(CliError::Input(_))));
    }
}
