//! Fixed-step closed-loop simulation of actuator, impedance model, shaping
//! filter and the static gain `u = -K x_m`.
//!
//! The plant is integrated with classical RK4 at `dt_plant`; the controller
//! runs every `dt_control` and its saturated output is held in between.
//! Saturation excess is fed back into the shaping-filter state.

pub mod export;
pub mod metrics;
pub mod signal;

use nalgebra::RowDVector;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::augment::{build_augmented, AugmentedPlant};
use crate::impedance::{ImpedanceSpec, ShapingFilter};
use crate::plant::{scan_roots, PlantModel, PlantState, Stability};

pub use metrics::{
    empirical_l2_ratio, max_abs_error, overshoot, settling_time, steady_state_error, MetricError,
    SimMetrics,
};
pub use signal::{make_signal, Signal, SignalError, SignalSpec};

pub const DEFAULT_DT_PLANT: f64 = 5e-5;
pub const DEFAULT_DT_CONTROL: f64 = 2e-4;
pub const DEFAULT_RECORD_STRIDE: usize = 20;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("invalid simulation config: {0}")]
    Config(String),
    #[error("gain has length {got}, expected {expected}")]
    GainLength { got: usize, expected: usize },
    #[error("no stable open-loop rest point with f = {f} N")]
    NoRestPoint { f: f64 },
    #[error("closed-loop rest point unavailable: {0}")]
    NoEquilibrium(String),
    #[error("simulation diverged at t = {t} s")]
    Diverged { t: f64, last: Box<Sample> },
    #[error(transparent)]
    Signal(#[from] SignalError),
}

/// Where the run starts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InitialCondition {
    /// Stable `u = 0` rest point nearest `y0*` under `force` (default `f(0)`);
    /// filter state zero.
    OpenLoopRest {
        #[serde(default)]
        force: Option<f64>,
    },
    /// Rest point of the closed loop under `force` (default `f(0)`): `y = y*`,
    /// filter state chosen so that the controller output holds it.
    ClosedLoopRest {
        #[serde(default)]
        force: Option<f64>,
    },
    /// Explicit augmented state `[x_s, x_i, x1, x2, x3]`.
    State { x: Vec<f64> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    pub dt_plant: f64,
    pub dt_control: f64,
    pub duration: f64,
    pub u_min: f64,
    /// Defaults to the plant limit when absent.
    pub u_max: Option<f64>,
    /// Back-calculation gain; `1/dt_control` when absent.
    pub k_aw: Option<f64>,
    /// Plant steps between recorded samples.
    pub record_stride: usize,
    pub initial: InitialCondition,
}

impl Default for InitialCondition {
    fn default() -> Self {
        Self::OpenLoopRest { force: None }
    }
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            dt_plant: DEFAULT_DT_PLANT,
            dt_control: DEFAULT_DT_CONTROL,
            duration: 1.0,
            u_min: 0.0,
            u_max: None,
            k_aw: None,
            record_stride: DEFAULT_RECORD_STRIDE,
            initial: InitialCondition::default(),
        }
    }
}

impl SimConfig {
    pub fn with_duration(duration: f64) -> Self {
        Self {
            duration,
            ..Self::default()
        }
    }

    /// Plant steps per control period.
    pub fn substeps(&self) -> Result<usize, SimError> {
        if !(self.dt_plant > 0.0 && self.dt_control > 0.0 && self.duration > 0.0) {
            return Err(SimError::Config("step sizes and duration must be positive".into()));
        }
        if self.dt_plant > self.dt_control {
            return Err(SimError::Config("dt_plant must not exceed dt_control".into()));
        }
        let ratio = self.dt_control / self.dt_plant;
        if (ratio - ratio.round()).abs() > 1e-9 * ratio {
            return Err(SimError::Config(format!(
                "dt_control = {} is not an integer multiple of dt_plant = {}",
                self.dt_control, self.dt_plant
            )));
        }
        if self.record_stride == 0 {
            return Err(SimError::Config("record_stride must be at least 1".into()));
        }
        Ok(ratio.round() as usize)
    }
}

/// Measurement and actuation path between controller and plant.
pub trait Feedback {
    /// Input reaching the plant at time `t` while the controller holds `u_cmd`.
    fn applied_input(&self, _t: f64, u_cmd: f64) -> f64 {
        u_cmd
    }
    /// Called once with the initial state before the first control tick.
    fn start(&mut self, _x: &PlantState) {}
    /// Called after every plant step with the true state and the held command.
    fn observe(&mut self, _t: f64, _x: &PlantState, _u_cmd: f64) {}
    /// `(x1, x2)` as seen by the controller at a control tick.
    fn measure(&mut self, t: f64, x: &PlantState) -> (f64, f64);
}

/// Ideal position and velocity sensors.
#[derive(Debug, Clone, Copy, Default)]
pub struct SensorFeedback;

impl Feedback for SensorFeedback {
    fn measure(&mut self, _t: f64, x: &PlantState) -> (f64, f64) {
        (x.x1, x.x2)
    }
}

/// One recorded instant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub t: f64,
    pub f: f64,
    pub u_raw: f64,
    pub u: f64,
    pub u_applied: f64,
    pub x1: f64,
    pub x2: f64,
    pub x3: f64,
    pub x_s: f64,
    pub x_i: Vec<f64>,
    pub y_meas: f64,
    pub y0: f64,
    pub y_star: f64,
    pub e_i: f64,
    pub z: f64,
}

/// Uniformly sampled closed-loop channels.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Trajectory {
    pub t: Vec<f64>,
    pub f: Vec<f64>,
    pub u_raw: Vec<f64>,
    pub u: Vec<f64>,
    pub u_applied: Vec<f64>,
    pub x1: Vec<f64>,
    pub x2: Vec<f64>,
    pub x3: Vec<f64>,
    pub x_s: Vec<f64>,
    pub x_i: Vec<Vec<f64>>,
    pub y: Vec<f64>,
    pub y_meas: Vec<f64>,
    pub y0: Vec<f64>,
    pub y_star: Vec<f64>,
    pub e_i: Vec<f64>,
    pub z: Vec<f64>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }

    fn push(&mut self, s: Sample) {
        self.t.push(s.t);
        self.f.push(s.f);
        self.u_raw.push(s.u_raw);
        self.u.push(s.u);
        self.u_applied.push(s.u_applied);
        self.x1.push(s.x1);
        self.y.push(s.x1);
        self.x2.push(s.x2);
        self.x3.push(s.x3);
        self.x_s.push(s.x_s);
        self.x_i.push(s.x_i);
        self.y_meas.push(s.y_meas);
        self.y0.push(s.y0);
        self.y_star.push(s.y_star);
        self.e_i.push(s.e_i);
        self.z.push(s.z);
    }

    pub fn sample(&self, k: usize) -> Sample {
        Sample {
            t: self.t[k],
            f: self.f[k],
            u_raw: self.u_raw[k],
            u: self.u[k],
            u_applied: self.u_applied[k],
            x1: self.x1[k],
            x2: self.x2[k],
            x3: self.x3[k],
            x_s: self.x_s[k],
            x_i: self.x_i[k].clone(),
            y_meas: self.y_meas[k],
            y0: self.y0[k],
            y_star: self.y_star[k],
            e_i: self.e_i[k],
            z: self.z[k],
        }
    }

    /// Sampling interval (zero for fewer than two samples).
    pub fn dt(&self) -> f64 {
        if self.t.len() < 2 {
            0.0
        } else {
            self.t[1] - self.t[0]
        }
    }

    /// Index of the first sample at or after `t`.
    pub fn index_at(&self, t: f64) -> usize {
        self.t.partition_point(|&s| s < t - 1e-12)
    }
}

/// Controller and augmented plant ready to simulate.
#[derive(Debug, Clone)]
pub struct ClosedLoop {
    aug: AugmentedPlant,
    k: RowDVector<f64>,
    y0_star: f64,
    set_point: Option<Signal>,
}

/// Impedance model dynamics with constant matrices cached.
enum ModelDyn {
    Static,
    Msd {
        ai: [[f64; 2]; 2],
        bfi: [f64; 2],
        by0i: [f64; 2],
    },
}

impl ClosedLoop {
    pub fn new(aug: AugmentedPlant, k: &[f64], y0_star: f64) -> Result<Self, SimError> {
        if k.len() != aug.n_m() {
            return Err(SimError::GainLength {
                got: k.len(),
                expected: aug.n_m(),
            });
        }
        if k.iter().any(|v| !v.is_finite()) || !y0_star.is_finite() {
            return Err(SimError::Config("gain and y0* must be finite".into()));
        }
        Ok(Self {
            aug,
            k: RowDVector::from_row_slice(k),
            y0_star,
            set_point: None,
        })
    }

    /// Replaces the constant `y0*` by a time profile.
    pub fn with_set_point(mut self, profile: Signal) -> Self {
        self.set_point = Some(profile);
        self
    }

    /// Set-point at time `t`.
    pub fn y0_at(&self, t: f64) -> f64 {
        self.set_point.as_ref().map_or(self.y0_star, |s| s.eval(t))
    }

    pub fn augmented(&self) -> &AugmentedPlant {
        &self.aug
    }

    pub fn gain(&self) -> &RowDVector<f64> {
        &self.k
    }

    pub fn y0_star(&self) -> f64 {
        self.y0_star
    }

    fn plant(&self) -> &PlantModel {
        self.aug.plant()
    }

    fn spec(&self) -> &ImpedanceSpec {
        self.aug.spec()
    }

    fn model_dyn(&self) -> ModelDyn {
        match self.spec() {
            ImpedanceSpec::Msd { .. } => {
                let s = self.spec().eval(self.y0_star);
                ModelDyn::Msd {
                    ai: [[s.ai[(0, 0)], s.ai[(0, 1)]], [s.ai[(1, 0)], s.ai[(1, 1)]]],
                    bfi: [s.bfi[0], s.bfi[1]],
                    by0i: [s.by0i[0], s.by0i[1]],
                }
            }
            _ => ModelDyn::Static,
        }
    }

    fn y_star(&self, x_i: &[f64], f: f64, p: f64, y0: f64) -> f64 {
        match self.spec() {
            ImpedanceSpec::Msd { .. } => x_i[0],
            _ => y0 - f / self.spec().stiffness(p),
        }
    }

    /// Static ideal displacement `y` solving `y = y0* - f/k*(y)`, nearest `y0*`.
    pub fn static_target(&self, f: f64, y0: f64) -> Result<f64, SimError> {
        match self.spec() {
            ImpedanceSpec::StaticLinear { k_star } | ImpedanceSpec::Msd { k_star, .. } => {
                Ok(y0 - f / k_star)
            }
            ImpedanceSpec::StaticNonlinear { k_star } => {
                let (lo, hi) = self.plant().y_bounds();
                let g = |y: f64| y - y0 + f / k_star.eval(y);
                scan_roots(g, lo, hi, 2000, 1e-12)
                    .into_iter()
                    .min_by(|a, b| (a - y0).abs().total_cmp(&(b - y0).abs()))
                    .ok_or_else(|| {
                        SimError::NoEquilibrium(format!("no y in range with y = y0* - f/k*(y), f = {f}"))
                    })
            }
        }
    }

    fn initial_state(&self, init: &InitialCondition, f0: f64) -> Result<Vec<f64>, SimError> {
        let n = self.aug.n_a();
        let i1 = self.aug.x1_index();
        let mut x = vec![0.0; n];
        let y0 = self.y0_at(0.0);
        match init {
            InitialCondition::State { x: given } => {
                if given.len() != n || given.iter().any(|v| !v.is_finite()) {
                    return Err(SimError::Config(format!("initial state must have {n} finite entries")));
                }
                return Ok(given.clone());
            }
            InitialCondition::OpenLoopRest { force } => {
                let f0 = force.unwrap_or(f0);
                let rest_i = self.spec().rest_state(f0, y0);
                let eq = self
                    .plant()
                    .find_equilibria(0.0, f0)
                    .map_err(|e| SimError::Config(e.to_string()))?;
                let best = eq
                    .iter()
                    .filter(|e| e.stability == Stability::Stable)
                    .min_by(|a, b| {
                        (a.y_eq - y0).abs().total_cmp(&(b.y_eq - y0).abs())
                    })
                    .ok_or(SimError::NoRestPoint { f: f0 })?;
                x[i1] = best.y_eq;
                x[i1 + 2] = best.x3_eq;
                x[self.aug.x_i_range()].copy_from_slice(&rest_i);
            }
            InitialCondition::ClosedLoopRest { force } => {
                let f0 = force.unwrap_or(f0);
                let rest_i = self.spec().rest_state(f0, y0);
                let y = self.static_target(f0, y0)?;
                let u = self
                    .plant()
                    .voltage_for_target(y, f0)
                    .map_err(|e| SimError::NoEquilibrium(e.to_string()))?;
                x[i1] = y;
                x[i1 + 2] = self.plant().relaxed_x3(y);
                x[self.aug.x_i_range()].copy_from_slice(&rest_i);
                let k_s = self.k[0];
                if k_s == 0.0 {
                    return Err(SimError::NoEquilibrium("filter-state gain is zero".into()));
                }
                let rest: f64 = (1..self.aug.n_m()).map(|j| self.k[j] * x[j]).sum();
                x[0] = -(u + rest) / k_s;
            }
        }
        Ok(x)
    }

    pub fn simulate(&self, signal: &Signal, config: &SimConfig) -> Result<Trajectory, SimError> {
        self.simulate_with(signal, config, &mut SensorFeedback)
    }

    pub fn simulate_with(
        &self,
        signal: &Signal,
        config: &SimConfig,
        feedback: &mut dyn Feedback,
    ) -> Result<Trajectory, SimError> {
        let n_sub = config.substeps()?;
        let plant = self.plant();
        let u_max = config.u_max.unwrap_or(plant.u_max());
        if !(u_max > config.u_min) {
            return Err(SimError::Config("u_max must exceed u_min".into()));
        }
        let k_aw = config.k_aw.unwrap_or(1.0 / config.dt_control);
        let h = config.dt_plant;
        let n_steps = (config.duration / h).round() as usize;
        let n = self.aug.n_a();
        let n_m = self.aug.n_m();
        let i1 = self.aug.x1_index();
        let xi = self.aug.x_i_range();
        let filt: &ShapingFilter = self.aug.filter();
        let (a_s, b_s) = (filt.a_s, filt.b_s);
        let model = self.model_dyn();
        let k_s = self.k[0];
        let (lo, hi) = plant.y_bounds();
        let span = hi - lo;

        // filter driven by the held measurement
        let deriv = |x: &[f64], t: f64, u: f64, ym: f64, aw: f64, out: &mut [f64]| {
            let f = signal.eval(t);
            let y0 = self.y0_at(t);
            let y = x[i1];
            let ys = self.y_star(&x[xi.clone()], f, ym, y0);
            out[0] = a_s * x[0] + b_s * (ym - ys) + aw;
            if let ModelDyn::Msd { ai, bfi, by0i } = &model {
                let (q0, q1) = (x[xi.start], x[xi.start + 1]);
                out[xi.start] = ai[0][0] * q0 + ai[0][1] * q1 + bfi[0] * f + by0i[0] * y0;
                out[xi.start + 1] = ai[1][0] * q0 + ai[1][1] * q1 + bfi[1] * f + by0i[1] * y0;
            }
            let d = plant.derivative(
                &PlantState {
                    x1: y,
                    x2: x[i1 + 1],
                    x3: x[i1 + 2],
                },
                f,
                u,
            );
            out[i1] = d.x1;
            out[i1 + 1] = d.x2;
            out[i1 + 2] = d.x3;
        };

        let mut x = self.initial_state(&config.initial, signal.eval(0.0))?;
        let mut traj = Trajectory::default();
        let (mut k1, mut k2, mut k3, mut k4) = (vec![0.0; n], vec![0.0; n], vec![0.0; n], vec![0.0; n]);
        let mut tmp = vec![0.0; n];
        let (mut u_raw, mut u_sat, mut aw, mut y_meas) = (0.0, 0.0, 0.0, x[i1]);
        feedback.start(&PlantState {
            x1: x[i1],
            x2: x[i1 + 1],
            x3: x[i1 + 2],
        });

        for s in 0..=n_steps {
            let t = s as f64 * h;
            let pstate = PlantState {
                x1: x[i1],
                x2: x[i1 + 1],
                x3: x[i1 + 2],
            };
            if s % n_sub == 0 {
                let (m1, m2) = feedback.measure(t, &pstate);
                y_meas = m1;
                let mut acc = 0.0;
                for j in 0..n_m {
                    let v = if j == i1 {
                        m1
                    } else if j == i1 + 1 {
                        m2
                    } else {
                        x[j]
                    };
                    acc += self.k[j] * v;
                }
                u_raw = -acc;
                u_sat = u_raw.clamp(config.u_min, u_max);
                aw = if k_s != 0.0 && u_sat != u_raw {
                    -k_aw * (u_sat - u_raw) / k_s
                } else {
                    0.0
                };
            }
            if s % config.record_stride == 0 || s == n_steps {
                let f = signal.eval(t);
                let y0 = self.y0_at(t);
                let y = x[i1];
                let ys = self.y_star(&x[xi.clone()], f, y, y0);
                let e = y - ys;
                traj.push(Sample {
                    t,
                    f,
                    u_raw,
                    u: u_sat,
                    u_applied: feedback.applied_input(t, u_sat),
                    x1: y,
                    x2: x[i1 + 1],
                    x3: x[i1 + 2],
                    x_s: x[0],
                    x_i: x[xi.clone()].to_vec(),
                    y_meas,
                    y0,
                    y_star: ys,
                    e_i: e,
                    z: filt.c_s.eval(y) * x[0] + filt.d_s.eval(y) * e,
                });
            }
            if s == n_steps {
                break;
            }

            let ua = feedback.applied_input(t, u_sat);
            let um = feedback.applied_input(t + 0.5 * h, u_sat);
            let ub = feedback.applied_input(t + h, u_sat);
            deriv(&x, t, ua, y_meas, aw, &mut k1);
            for j in 0..n {
                tmp[j] = x[j] + 0.5 * h * k1[j];
            }
            deriv(&tmp, t + 0.5 * h, um, y_meas, aw, &mut k2);
            for j in 0..n {
                tmp[j] = x[j] + 0.5 * h * k2[j];
            }
            deriv(&tmp, t + 0.5 * h, um, y_meas, aw, &mut k3);
            for j in 0..n {
                tmp[j] = x[j] + h * k3[j];
            }
            deriv(&tmp, t + h, ub, y_meas, aw, &mut k4);
            for j in 0..n {
                x[j] += h / 6.0 * (k1[j] + 2.0 * k2[j] + 2.0 * k3[j] + k4[j]);
            }

            let y = x[i1];
            if x.iter().any(|v| !v.is_finite()) || y < lo - span || y > hi + span {
                let last = if traj.is_empty() {
                    return Err(SimError::Config("diverged before the first sample".into()));
                } else {
                    traj.sample(traj.len() - 1)
                };
                return Err(SimError::Diverged {
                    t: t + h,
                    last: Box::new(last),
                });
            }
            feedback.observe(
                t + h,
                &PlantState {
                    x1: y,
                    x2: x[i1 + 1],
                    x3: x[i1 + 2],
                },
                u_sat,
            );
        }
        Ok(traj)
    }
}

/// Builds the augmented plant and runs with ideal sensors.
#[allow(clippy::too_many_arguments)]
pub fn simulate(
    plant: &PlantModel,
    spec: &ImpedanceSpec,
    filter: &ShapingFilter,
    k: &[f64],
    y0_star: f64,
    signal: &Signal,
    config: &SimConfig,
) -> Result<Trajectory, SimError> {
    let aug = build_augmented(plant, spec, filter).map_err(|e| SimError::Config(e.to_string()))?;
    ClosedLoop::new(aug, k, y0_star)?.simulate(signal, config)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::impedance::{make_shaping_filter, make_static_spec, StiffnessProfile};
    use crate::synthesis::SynthesisProblem;
    use nalgebra::DMatrix;

    fn constant_loop() -> ClosedLoop {
        let plant = PlantModel::constant_coefficients();
        let spec = make_static_spec(&StiffnessProfile::linear(0.2, 2.9), plant.y_bounds()).unwrap();
        let filt = make_shaping_filter(&spec, 15.0, Some(2.0)).unwrap();
        let aug = build_augmented(&plant, &spec, &filt).unwrap();
        let res = SynthesisProblem::new(aug.clone(), 1.0, DMatrix::identity(3, 3))
            .unwrap()
            .synthesize()
            .unwrap();
        // constant plant pushes y up by 50·u·m/… ; y0* inside the reachable band
        ClosedLoop::new(aug, &res.k, 0.05).unwrap()
    }

    #[test]
    fn config_validation() {
        let mut c = SimConfig::default();
        assert_eq!(c.substeps().unwrap(), 4);
        c.dt_control = 1.7e-4;
        assert!(c.substeps().is_err());
        c.dt_control = 1e-5;
        assert!(c.substeps().is_err());
        let c = SimConfig {
            duration: 0.0,
            ..SimConfig::default()
        };
        assert!(c.substeps().is_err());
    }

    #[test]
    fn gain_length_checked() {
        let plant = PlantModel::constant_coefficients();
        let spec = make_static_spec(&StiffnessProfile::linear(0.2, 2.9), plant.y_bounds()).unwrap();
        let filt = make_shaping_filter(&spec, 15.0, Some(2.0)).unwrap();
        let aug = build_augmented(&plant, &spec, &filt).unwrap();
        assert!(matches!(
            ClosedLoop::new(aug, &[1.0, 2.0], 2.9),
            Err(SimError::GainLength { got: 2, expected: 3 })
        ));
    }

    #[test]
    fn closed_loop_rest_is_invariant() {
        let cl = constant_loop();
        let sig = make_signal(SignalSpec::Constant { value: 0.0 }).unwrap();
        let cfg = SimConfig {
            duration: 0.5,
            initial: InitialCondition::ClosedLoopRest { force: None },
            ..SimConfig::default()
        };
        let tr = cl.simulate(&sig, &cfg).unwrap();
        let y0 = tr.y[0];
        assert!(tr.y.iter().all(|y| (y - y0).abs() < 1e-6));
        assert!(tr.e_i.iter().all(|e| e.abs() < 1e-6));
        assert!(tr.u.iter().all(|&u| (0.0..=6.25).contains(&u)));
    }

    #[test]
    fn channels_have_equal_length() {
        let cl = constant_loop();
        let sig = make_signal(SignalSpec::Step {
            initial: 0.0,
            final_value: 1e-5,
            at: 0.1,
        })
        .unwrap();
        let tr = cl.simulate(&sig, &SimConfig::with_duration(0.3)).unwrap();
        let n = tr.len();
        assert_eq!(n, 301);
        for c in [&tr.f, &tr.u, &tr.u_raw, &tr.y, &tr.y_star, &tr.e_i, &tr.z, &tr.x_s] {
            assert_eq!(c.len(), n);
        }
        assert_eq!(tr.y, tr.x1);
        assert!((tr.dt() - 1e-3).abs() < 1e-15);
    }
}
