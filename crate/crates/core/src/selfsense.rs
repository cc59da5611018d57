//! Displacement self-sensing from the actuator's electrical port.
//!
//! The actuator is an RC series circuit `v = R_e i + q/C_e`. A small probe
//! sinusoid rides on the actuation voltage; recursive least squares on the
//! differentiated circuit equation tracks `R_e` and `1/C_e`, and a monotone
//! capacitance map turns `C_e` into displacement.

use std::f64::consts::PI;
use std::io::{Read, Write};

use log::warn;
use nalgebra::{Matrix2, Vector2};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::plant::PlantState;
use crate::sim::Feedback;

pub const DEFAULT_SAMPLE_DT: f64 = 5e-5;
pub const DEFAULT_PROBE_AMPLITUDE: f64 = 100.0;
pub const DEFAULT_PROBE_FREQUENCY: f64 = 500.0;
pub const DEFAULT_FORGETTING: f64 = 0.999;
pub const DEFAULT_COVARIANCE: f64 = 1e6;
pub const DEFAULT_THETA0: [f64; 2] = [1e5, 1e9];
pub const DEFAULT_LOWPASS_HZ: f64 = 4000.0;
pub const DEFAULT_R_E: f64 = 5e5;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SelfSenseError {
    #[error("invalid circuit parameters: R_e = {r_e}, C_e = {c_e}")]
    Circuit { r_e: f64, c_e: f64 },
    #[error("invalid capacitance map: {0}")]
    Map(String),
    #[error("invalid estimator config: {0}")]
    Config(String),
}

/// Charge on the actuator capacitance (C).
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct CircuitState {
    pub q: f64,
}

/// Forward-Euler step of `v = R_e i + q/C_e`; returns the new state and `i` (A).
pub fn step_circuit(
    state: CircuitState,
    v: f64,
    r_e: f64,
    c_e: f64,
    dt: f64,
) -> Result<(CircuitState, f64), SelfSenseError> {
    if !(r_e > 0.0 && c_e > 0.0 && r_e.is_finite() && c_e.is_finite()) {
        return Err(SelfSenseError::Circuit { r_e, c_e });
    }
    let i = (v - state.q / c_e) / r_e;
    Ok((CircuitState { q: state.q + i * dt }, i))
}

/// Actuation voltage plus the probe `amp·sin(2π f_ss t)`.
pub fn inject(v_cmd: f64, t: f64, amp: f64, f_ss: f64) -> f64 {
    v_cmd + amp * (2.0 * PI * f_ss * t).sin()
}

/// Exponentially weighted RLS on `v̇ = R_e i̇ + i/C_e`.
#[derive(Debug, Clone, PartialEq)]
pub struct RlsState {
    pub theta: Vector2<f64>,
    pub covariance: Matrix2<f64>,
    pub forgetting: f64,
    theta0: Vector2<f64>,
    p0: Matrix2<f64>,
    resets: usize,
}

impl RlsState {
    pub fn new(theta0: [f64; 2], p0: f64, forgetting: f64) -> Result<Self, SelfSenseError> {
        if !(forgetting > 0.0 && forgetting <= 1.0) {
            return Err(SelfSenseError::Config(format!("forgetting factor {forgetting} outside (0, 1]")));
        }
        if !(p0 > 0.0 && p0.is_finite()) || theta0.iter().any(|v| !v.is_finite()) {
            return Err(SelfSenseError::Config("prior must be finite with positive covariance".into()));
        }
        let theta = Vector2::from(theta0);
        let p = Matrix2::identity() * p0;
        Ok(Self {
            theta,
            covariance: p,
            forgetting,
            theta0: theta,
            p0: p,
            resets: 0,
        })
    }

    pub fn r_e(&self) -> f64 {
        self.theta[0]
    }

    pub fn c_e(&self) -> f64 {
        1.0 / self.theta[1]
    }

    /// Number of covariance resets so far.
    pub fn resets(&self) -> usize {
        self.resets
    }

    /// One update with regressor `[i_dot, i]` and target `v_dot`.
    pub fn update(&mut self, v_dot: f64, i_dot: f64, i: f64) {
        let phi = Vector2::new(i_dot, i);
        let p_phi = self.covariance * phi;
        let denom = self.forgetting + phi.dot(&p_phi);
        let gain = p_phi / denom;
        let err = v_dot - phi.dot(&self.theta);
        self.theta += gain * err;
        let p = (self.covariance - gain * p_phi.transpose()) / self.forgetting;
        self.covariance = 0.5 * (p + p.transpose());
        let (a, b, d) = (self.covariance[(0, 0)], self.covariance[(0, 1)], self.covariance[(1, 1)]);
        let spd = a > 0.0 && a * d - b * b > 0.0 && a.is_finite() && d.is_finite();
        if !spd || !self.theta.iter().all(|v| v.is_finite()) {
            warn!("RLS covariance lost positive definiteness; resetting to prior");
            self.theta = self.theta0;
            self.covariance = self.p0;
            self.resets += 1;
        }
    }
}

/// First-order low-pass, exactly discretized; `None` cutoff passes through.
#[derive(Debug, Clone, PartialEq)]
pub struct LowPass {
    alpha: f64,
    state: Option<f64>,
}

impl LowPass {
    pub fn new(cutoff_hz: Option<f64>, dt: f64) -> Self {
        let alpha = cutoff_hz.map_or(1.0, |fc| 1.0 - (-2.0 * PI * fc * dt).exp());
        Self { alpha, state: None }
    }

    pub fn step(&mut self, x: f64) -> f64 {
        let y = match self.state {
            None => x,
            Some(prev) => prev + self.alpha * (x - prev),
        };
        self.state = Some(y);
        y
    }
}

/// Low-pass followed by a backward difference; the first output is zero.
#[derive(Debug, Clone, PartialEq)]
pub struct Differentiator {
    lp: LowPass,
    prev: Option<f64>,
    dt: f64,
}

impl Differentiator {
    pub fn new(cutoff_hz: Option<f64>, dt: f64) -> Self {
        Self {
            lp: LowPass::new(cutoff_hz, dt),
            prev: None,
            dt,
        }
    }

    /// Returns `(filtered value, derivative)`.
    pub fn step(&mut self, x: f64) -> (f64, f64) {
        let y = self.lp.step(x);
        let d = self.prev.map_or(0.0, |p| (y - p) / self.dt);
        self.prev = Some(y);
        (y, d)
    }
}

pub fn differentiate(samples: &[f64], dt: f64, cutoff_hz: Option<f64>) -> Vec<f64> {
    let mut d = Differentiator::new(cutoff_hz, dt);
    samples.iter().map(|&x| d.step(x).1).collect()
}

/// Second-order notch (unit gain at DC).
#[derive(Debug, Clone, PartialEq)]
pub struct Notch {
    b: [f64; 3],
    a: [f64; 2],
    x: [f64; 2],
    y: [f64; 2],
    primed: bool,
}

impl Notch {
    pub fn new(freq_hz: f64, q: f64, dt: f64) -> Self {
        let w0 = 2.0 * PI * freq_hz * dt;
        let alpha = w0.sin() / (2.0 * q);
        let a0 = 1.0 + alpha;
        let c = -2.0 * w0.cos();
        Self {
            b: [1.0 / a0, c / a0, 1.0 / a0],
            a: [c / a0, (1.0 - alpha) / a0],
            x: [0.0; 2],
            y: [0.0; 2],
            primed: false,
        }
    }

    pub fn step(&mut self, x: f64) -> f64 {
        if !self.primed {
            self.x = [x; 2];
            self.y = [x; 2];
            self.primed = true;
        }
        let y = self.b[0] * x + self.b[1] * self.x[0] + self.b[2] * self.x[1]
            - self.a[0] * self.y[0]
            - self.a[1] * self.y[1];
        self.x = [x, self.x[0]];
        self.y = [y, self.y[0]];
        y
    }
}

/// Strictly monotone samples of `C_e(y)` (mm, F).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CapacitanceMap {
    y: Vec<f64>,
    c: Vec<f64>,
}

impl CapacitanceMap {
    pub fn new(pairs: &[(f64, f64)]) -> Result<Self, SelfSenseError> {
        if pairs.len() < 2 {
            return Err(SelfSenseError::Map("at least two samples are required".into()));
        }
        let mut pairs = pairs.to_vec();
        if pairs.iter().any(|(y, c)| !y.is_finite() || !(c.is_finite() && *c > 0.0)) {
            return Err(SelfSenseError::Map("samples must be finite with positive capacitance".into()));
        }
        pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
        let y: Vec<f64> = pairs.iter().map(|p| p.0).collect();
        let c: Vec<f64> = pairs.iter().map(|p| p.1).collect();
        let inc = y.windows(2).all(|w| w[1] > w[0]) && c.windows(2).all(|w| w[1] > w[0]);
        let dec = y.windows(2).all(|w| w[1] > w[0]) && c.windows(2).all(|w| w[1] < w[0]);
        if !(inc || dec) {
            return Err(SelfSenseError::Map("capacitance must be strictly monotonic in y".into()));
        }
        Ok(Self { y, c })
    }

    /// `C_e = c0 + slope·y` sampled at `n` points on `[y_lo, y_hi]`.
    pub fn affine(c0: f64, slope: f64, y_lo: f64, y_hi: f64, n: usize) -> Result<Self, SelfSenseError> {
        let n = n.max(2);
        let pairs: Vec<(f64, f64)> = (0..n)
            .map(|k| {
                let y = y_lo + (y_hi - y_lo) * k as f64 / (n - 1) as f64;
                (y, c0 + slope * y)
            })
            .collect();
        Self::new(&pairs)
    }

    /// 1.5 nF + 0.3 nF/mm over 0 to 5 mm.
    pub fn synthetic_default() -> Self {
        Self::affine(1.5e-9, 0.3e-9, 0.0, 5.0, 51).expect("valid fixture")
    }

    /// Two-column CSV `y_mm, C_F` with a header row.
    pub fn from_csv<R: Read>(reader: R) -> Result<Self, SelfSenseError> {
        let mut rdr = csv::Reader::from_reader(reader);
        let mut pairs = Vec::new();
        for rec in rdr.records() {
            let rec = rec.map_err(|e| SelfSenseError::Map(e.to_string()))?;
            if rec.len() != 2 {
                return Err(SelfSenseError::Map(format!("expected two columns, found {}", rec.len())));
            }
            let parse = |s: &str| {
                s.trim()
                    .parse::<f64>()
                    .map_err(|e| SelfSenseError::Map(format!("bad number {s:?}: {e}")))
            };
            pairs.push((parse(&rec[0])?, parse(&rec[1])?));
        }
        Self::new(&pairs)
    }

    pub fn samples(&self) -> impl Iterator<Item = (f64, f64)> + '_ {
        self.y.iter().copied().zip(self.c.iter().copied())
    }

    pub fn y_range(&self) -> (f64, f64) {
        (self.y[0], self.y[self.y.len() - 1])
    }

    fn interp(xs: &[f64], ys: &[f64], x: f64) -> (f64, bool) {
        let ascending = xs[xs.len() - 1] > xs[0];
        let (first, last) = (xs[0], xs[xs.len() - 1]);
        let below = if ascending { x <= first } else { x >= first };
        let above = if ascending { x >= last } else { x <= last };
        if below {
            return (ys[0], x != first);
        }
        if above {
            return (ys[ys.len() - 1], x != last);
        }
        let k = if ascending {
            xs.partition_point(|&v| v <= x)
        } else {
            xs.partition_point(|&v| v >= x)
        };
        let (x0, x1, y0, y1) = (xs[k - 1], xs[k], ys[k - 1], ys[k]);
        (y0 + (y1 - y0) * (x - x0) / (x1 - x0), false)
    }

    /// Capacitance at displacement `y`, clamped to the map ends.
    pub fn capacitance(&self, y: f64) -> f64 {
        Self::interp(&self.y, &self.c, y).0
    }

    /// Displacement for capacitance `c_hat` and whether it was clamped.
    pub fn estimate_displacement(&self, c_hat: f64) -> (f64, bool) {
        Self::interp(&self.c, &self.y, c_hat)
    }
}

/// Estimator tuning and circuit fixture.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SelfSenseConfig {
    pub dt: f64,
    pub probe_amplitude: f64,
    pub probe_frequency: f64,
    pub forgetting: f64,
    pub covariance0: f64,
    pub theta0: [f64; 2],
    pub lowpass_hz: Option<f64>,
    pub notch: bool,
    pub notch_q: f64,
    /// Corner of the filtered derivative producing velocity from `ŷ`.
    pub velocity_hz: f64,
    /// True electrode resistance of the simulated circuit (Ω).
    pub r_e: f64,
    /// Estimator run before the loop starts (s).
    pub warmup: f64,
}

impl Default for SelfSenseConfig {
    fn default() -> Self {
        Self {
            dt: DEFAULT_SAMPLE_DT,
            probe_amplitude: DEFAULT_PROBE_AMPLITUDE,
            probe_frequency: DEFAULT_PROBE_FREQUENCY,
            forgetting: DEFAULT_FORGETTING,
            covariance0: DEFAULT_COVARIANCE,
            theta0: DEFAULT_THETA0,
            lowpass_hz: Some(DEFAULT_LOWPASS_HZ),
            notch: false,
            notch_q: 1.0,
            velocity_hz: 50.0,
            r_e: DEFAULT_R_E,
            warmup: 0.5,
        }
    }
}

impl SelfSenseConfig {
    pub fn validate(&self) -> Result<(), SelfSenseError> {
        let pos = |name: &str, v: f64| {
            if v.is_finite() && v > 0.0 {
                Ok(())
            } else {
                Err(SelfSenseError::Config(format!("{name} must be positive, got {v}")))
            }
        };
        pos("dt", self.dt)?;
        pos("probe_frequency", self.probe_frequency)?;
        pos("velocity_hz", self.velocity_hz)?;
        pos("r_e", self.r_e)?;
        pos("notch_q", self.notch_q)?;
        if !(self.probe_amplitude >= 0.0 && self.probe_amplitude.is_finite()) {
            return Err(SelfSenseError::Config("probe amplitude must be non-negative".into()));
        }
        if !(self.warmup >= 0.0) {
            return Err(SelfSenseError::Config("warmup must be non-negative".into()));
        }
        if let Some(fc) = self.lowpass_hz {
            pos("lowpass_hz", fc)?;
        }
        if self.probe_frequency >= 0.5 / self.dt {
            return Err(SelfSenseError::Config("probe frequency must lie below Nyquist".into()));
        }
        Ok(())
    }
}

/// One estimator output sample.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EstimateSample {
    pub t: f64,
    pub v: f64,
    pub i: f64,
    pub r_e_hat: f64,
    pub c_e_hat: f64,
    pub y_hat: f64,
    pub y_true: f64,
    pub saturated: bool,
}

/// Circuit simulation plus streaming estimator.
#[derive(Debug, Clone)]
pub struct Estimator {
    config: SelfSenseConfig,
    map: CapacitanceMap,
    circuit: CircuitState,
    rls: RlsState,
    dv: Differentiator,
    di: Differentiator,
    i_prev: Option<f64>,
    notch: Option<Notch>,
    y_hat: f64,
    saturated: bool,
}

impl Estimator {
    pub fn new(config: SelfSenseConfig, map: CapacitanceMap) -> Result<Self, SelfSenseError> {
        config.validate()?;
        if config.probe_amplitude == 0.0 {
            warn!("probe amplitude is zero: no persistent excitation, estimates are unreliable");
        }
        let rls = RlsState::new(config.theta0, config.covariance0, config.forgetting)?;
        let (y_hat, saturated) = map.estimate_displacement(rls.c_e());
        Ok(Self {
            dv: Differentiator::new(config.lowpass_hz, config.dt),
            di: Differentiator::new(config.lowpass_hz, config.dt),
            notch: config
                .notch
                .then(|| Notch::new(config.probe_frequency, config.notch_q, config.dt)),
            config,
            map,
            circuit: CircuitState::default(),
            rls,
            i_prev: None,
            y_hat,
            saturated,
        })
    }

    pub fn config(&self) -> &SelfSenseConfig {
        &self.config
    }

    pub fn map(&self) -> &CapacitanceMap {
        &self.map
    }

    pub fn rls(&self) -> &RlsState {
        &self.rls
    }

    pub fn y_hat(&self) -> f64 {
        self.y_hat
    }

    /// False when the probe is off and the regression lacks excitation.
    pub fn reliable(&self) -> bool {
        self.config.probe_amplitude > 0.0
    }

    /// Applies terminal voltage `v` for one sample against the true
    /// `(R_e, C_e)` and updates the estimate from the measured `(v, i)`.
    pub fn step(&mut self, t: f64, v: f64, r_e: f64, c_e: f64) -> Result<EstimateSample, SelfSenseError> {
        let (next, i) = step_circuit(self.circuit, v, r_e, c_e, self.config.dt)?;
        self.circuit = next;
        let (_, v_dot) = self.dv.step(v);
        let (i_f, i_dot) = self.di.step(i);
        // forward-Euler charge update pairs i̇_k with i_{k-1}
        if let Some(i_prev) = self.i_prev {
            self.rls.update(v_dot, i_dot, i_prev);
        }
        self.i_prev = Some(i_f);
        let mut c_hat = self.rls.c_e();
        if let Some(n) = self.notch.as_mut() {
            c_hat = n.step(c_hat);
        }
        let (y_hat, saturated) = if c_hat.is_finite() && c_hat > 0.0 {
            self.map.estimate_displacement(c_hat)
        } else {
            (self.y_hat, true)
        };
        self.y_hat = y_hat;
        self.saturated = saturated;
        Ok(EstimateSample {
            t,
            v,
            i,
            r_e_hat: self.rls.r_e(),
            c_e_hat: c_hat,
            y_hat,
            y_true: f64::NAN,
            saturated,
        })
    }
}

/// Runs the estimator open loop for `duration` with `v(t)` the actuation
/// voltage (probe added here) and `c_e(t)` the true capacitance.
pub fn run_open_loop(
    config: SelfSenseConfig,
    map: CapacitanceMap,
    duration: f64,
    v_cmd: impl Fn(f64) -> f64,
    c_e: impl Fn(f64) -> f64,
) -> Result<Vec<EstimateSample>, SelfSenseError> {
    let mut est = Estimator::new(config, map)?;
    let cfg = est.config.clone();
    let n = (duration / cfg.dt).round() as usize;
    let mut out = Vec::with_capacity(n + 1);
    for k in 0..=n {
        let t = k as f64 * cfg.dt;
        let v = inject(v_cmd(t), t, cfg.probe_amplitude, cfg.probe_frequency);
        let c = c_e(t);
        let mut s = est.step(t, v, cfg.r_e, c)?;
        s.y_true = est.map.estimate_displacement(c).0;
        out.push(s);
    }
    Ok(out)
}

/// Writes `t_s, v_V, i_A, r_e_hat_ohm, c_e_hat_F, y_hat_mm, y_true_mm` rows.
pub fn write_trace_csv<W: Write>(trace: &[EstimateSample], out: W) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["t_s", "v_V", "i_A", "r_e_hat_ohm", "c_e_hat_F", "y_hat_mm", "y_true_mm", "saturated"])?;
    for s in trace {
        w.write_record([
            format!("{:e}", s.t),
            format!("{:e}", s.v),
            format!("{:e}", s.i),
            format!("{:e}", s.r_e_hat),
            format!("{:e}", s.c_e_hat),
            format!("{:e}", s.y_hat),
            format!("{:e}", s.y_true),
            (s.saturated as u8).to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Terminal voltage (V) for input `u` (kV²).
pub fn voltage_of(u: f64) -> f64 {
    1000.0 * u.max(0.0).sqrt()
}

/// Ideal sensors, with the probe superimposed on the actuation voltage so
/// that the plant sees the same input as in a self-sensed run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProbeFeedback {
    pub amplitude: f64,
    pub frequency: f64,
}

fn probed_input(u_cmd: f64, t: f64, amp: f64, freq: f64) -> f64 {
    let v = inject(voltage_of(u_cmd), t, amp, freq);
    v * v * 1e-6
}

impl Feedback for ProbeFeedback {
    fn applied_input(&self, t: f64, u_cmd: f64) -> f64 {
        probed_input(u_cmd, t, self.amplitude, self.frequency)
    }

    fn measure(&mut self, _t: f64, x: &PlantState) -> (f64, f64) {
        (x.x1, x.x2)
    }
}

/// Position and velocity reconstructed from the electrical port.
#[derive(Debug, Clone)]
pub struct SelfSensedFeedback {
    estimator: Estimator,
    vel_alpha: f64,
    vel_state: Option<(f64, f64)>,
    v_hat: f64,
    trace: Vec<EstimateSample>,
    trace_stride: usize,
    steps: usize,
}

impl SelfSensedFeedback {
    /// `trace_stride` estimator samples between recorded trace rows (0: none).
    pub fn new(estimator: Estimator, trace_stride: usize) -> Self {
        let cfg = estimator.config();
        let vel_alpha = 1.0 - (-2.0 * PI * cfg.velocity_hz * cfg.dt).exp();
        Self {
            estimator,
            vel_alpha,
            vel_state: None,
            v_hat: 0.0,
            trace: Vec::new(),
            trace_stride,
            steps: 0,
        }
    }

    pub fn estimator(&self) -> &Estimator {
        &self.estimator
    }

    pub fn trace(&self) -> &[EstimateSample] {
        &self.trace
    }

    fn advance(&mut self, t: f64, v: f64, y_true: f64) {
        let c = self.estimator.map.capacitance(y_true);
        let r = self.estimator.config.r_e;
        let mut s = self
            .estimator
            .step(t, v, r, c)
            .expect("map capacitance and configured resistance are positive");
        s.y_true = y_true;
        let dt = self.estimator.config.dt;
        self.v_hat = match self.vel_state {
            None => 0.0,
            Some((y_prev, v_prev)) => v_prev + self.vel_alpha * ((s.y_hat - y_prev) / dt - v_prev),
        };
        self.vel_state = Some((s.y_hat, self.v_hat));
        if self.trace_stride > 0 && self.steps.is_multiple_of(self.trace_stride) {
            self.trace.push(s);
        }
        self.steps += 1;
    }
}

impl Feedback for SelfSensedFeedback {
    fn applied_input(&self, t: f64, u_cmd: f64) -> f64 {
        let c = &self.estimator.config;
        probed_input(u_cmd, t, c.probe_amplitude, c.probe_frequency)
    }

    fn start(&mut self, x: &PlantState) {
        let cfg = self.estimator.config.clone();
        let n = (cfg.warmup / cfg.dt).round() as usize;
        for k in 0..n {
            let t = -cfg.warmup + k as f64 * cfg.dt;
            let v = inject(0.0, t, cfg.probe_amplitude, cfg.probe_frequency);
            self.advance(t, v, x.x1);
        }
    }

    fn observe(&mut self, t: f64, x: &PlantState, u_cmd: f64) {
        let c = &self.estimator.config;
        let v = inject(voltage_of(u_cmd), t, c.probe_amplitude, c.probe_frequency);
        self.advance(t, v, x.x1);
    }

    fn measure(&mut self, _t: f64, _x: &PlantState) -> (f64, f64) {
        (self.estimator.y_hat, self.v_hat)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn circuit_equilibrium_is_fixed() {
        let s = CircuitState { q: 2e-9 * 100.0 };
        let (n, i) = step_circuit(s, 100.0, 5e5, 2e-9, 5e-5).unwrap();
        assert_eq!(i, 0.0);
        assert_eq!(n, s);
        assert!(step_circuit(s, 1.0, 0.0, 2e-9, 1e-5).is_err());
    }

    #[test]
    fn rc_charging_matches_exponential() {
        let (r, c, v, dt) = (5e5, 2e-9, 100.0, 1e-7);
        let tau = r * c;
        let mut s = CircuitState::default();
        let n = (2.0 * tau / dt) as usize;
        for _ in 0..n {
            s = step_circuit(s, v, r, c, dt).unwrap().0;
        }
        let exact = c * v * (1.0 - (-(n as f64) * dt / tau).exp());
        assert!((s.q - exact).abs() / exact < 1e-3);
    }

    #[test]
    fn high_frequency_current_amplitude() {
        let (r, c, dt, f) = (5e5, 2e-9, 1e-7, 20_000.0);
        let mut s = CircuitState::default();
        let mut peak: f64 = 0.0;
        let n = (0.005 / dt) as usize;
        for k in 0..n {
            let t = k as f64 * dt;
            let (ns, i) = step_circuit(s, inject(0.0, t, 100.0, f), r, c, dt).unwrap();
            s = ns;
            if t > 0.004 {
                peak = peak.max(i.abs());
            }
        }
        let exact = 100.0 / (r * r + (1.0 / (2.0 * PI * f * c)).powi(2)).sqrt();
        assert!((peak - exact).abs() / exact < 1e-2);
        assert!((peak - 100.0 / r).abs() / (100.0 / r) < 0.02);
    }

    #[test]
    fn inject_identity_and_zero_phase() {
        assert_eq!(inject(2000.0, 0.37, 0.0, 500.0), 2000.0);
        assert_eq!(inject(2000.0, 0.0, 100.0, 500.0), 2000.0);
    }

    #[test]
    fn zero_regressor_inflates_covariance() {
        let mut r = RlsState::new([1.0, 2.0], 1.0, 0.5).unwrap();
        r.update(3.0, 0.0, 0.0);
        assert_eq!(r.theta, Vector2::new(1.0, 2.0));
        assert!((r.covariance - Matrix2::identity() * 2.0).norm() < 1e-15);
        assert!(RlsState::new([1.0, 1.0], 1.0, 1.5).is_err());
    }

    #[test]
    fn differentiator_cases() {
        assert!(differentiate(&[3.0; 10], 1e-3, Some(100.0)).iter().all(|&d| d == 0.0));
        let ramp: Vec<f64> = (0..10).map(|k| 0.5 * k as f64 * 1e-3).collect();
        let d = differentiate(&ramp, 1e-3, None);
        assert_eq!(d[0], 0.0);
        assert!(d[1..].iter().all(|v| (v - 0.5).abs() < 1e-12));
    }

    #[test]
    fn differentiated_sine_amplitude() {
        let dt = DEFAULT_SAMPLE_DT;
        let a = 100.0;
        let x: Vec<f64> = (0..4000).map(|k| a * (2.0 * PI * 500.0 * k as f64 * dt).sin()).collect();
        let d = differentiate(&x, dt, Some(DEFAULT_LOWPASS_HZ));
        let peak = d[2000..].iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let exact = 2.0 * PI * 500.0 * a;
        assert!((peak - exact).abs() / exact < 0.01, "{peak} vs {exact}");
    }

    #[test]
    fn map_inverse_and_interpolation() {
        let m = CapacitanceMap::new(&[(0.0, 1.0e-9), (1.0, 1.5e-9), (3.0, 2.0e-9)]).unwrap();
        assert_eq!(m.estimate_displacement(1.5e-9), (1.0, false));
        let (y, sat) = m.estimate_displacement(1.75e-9);
        assert!((y - 2.0).abs() < 1e-12 && !sat);
        assert_eq!(m.estimate_displacement(5e-9), (3.0, true));
        assert_eq!(m.estimate_displacement(0.1e-9), (0.0, true));
        let dec = CapacitanceMap::new(&[(0.0, 3e-9), (2.0, 1e-9)]).unwrap();
        assert!((dec.estimate_displacement(2e-9).0 - 1.0).abs() < 1e-12);
        assert!(CapacitanceMap::new(&[(0.0, 1e-9), (1.0, 2e-9), (2.0, 1.5e-9)]).is_err());
        assert!(CapacitanceMap::new(&[(0.0, 1e-9)]).is_err());
    }

    #[test]
    fn map_from_csv() {
        let text = "y_mm,C_F\n0,1.5e-9\n5,3.0e-9\n";
        let m = CapacitanceMap::from_csv(text.as_bytes()).unwrap();
        assert_eq!(m.y_range(), (0.0, 5.0));
        assert!((m.capacitance(2.5) - 2.25e-9).abs() < 1e-21);
        assert!(CapacitanceMap::from_csv("y,c\n0,1\n1,x\n".as_bytes()).is_err());
    }

    #[test]
    fn constant_parameters_converge() {
        let trace = run_open_loop(
            SelfSenseConfig::default(),
            CapacitanceMap::synthetic_default(),
            0.5,
            |_| 0.0,
            |_| 2e-9,
        )
        .unwrap();
        let last = trace.last().unwrap();
        assert!((last.r_e_hat - 5e5).abs() / 5e5 < 0.01, "{}", last.r_e_hat);
        assert!((last.c_e_hat - 2e-9).abs() / 2e-9 < 0.01, "{}", last.c_e_hat);
    }

    #[test]
    fn probe_alone_keeps_charge_bounded() {
        let mut est = Estimator::new(SelfSenseConfig::default(), CapacitanceMap::synthetic_default()).unwrap();
        let n = 40_000;
        let mut sum_i = 0.0;
        for k in 0..n {
            let t = k as f64 * DEFAULT_SAMPLE_DT;
            let s = est.step(t, inject(0.0, t, 100.0, 500.0), 5e5, 2e-9).unwrap();
            if k >= n - 20_000 {
                sum_i += s.i;
            }
            assert!(est.circuit.q.abs() < 2e-9 * 100.0 * 1.01);
        }
        assert!((sum_i / 20_000.0).abs() < 1e-8);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]
        #[test]
        fn covariance_stays_spd(seed in 0u64..1000) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let mut r = RlsState::new(DEFAULT_THETA0, DEFAULT_COVARIANCE, DEFAULT_FORGETTING).unwrap();
            for _ in 0..100_000 {
                r.update(rng.gen_range(-1e5..1e5), rng.gen_range(-1.0..1.0), rng.gen_range(-1e-3..1e-3));
                let p = r.covariance;
                prop_assert!(p[(0, 1)] == p[(1, 0)]);
                prop_assert!(p[(0, 0)] > 0.0 && p[(0, 0)] * p[(1, 1)] - p[(0, 1)] * p[(1, 0)] > 0.0);
            }
        }

        #[test]
        fn map_inverse_is_identity_on_samples(c0 in 0.5e-9f64..3e-9, slope in 0.05e-9f64..1e-9) {
            let m = CapacitanceMap::affine(c0, slope, 0.0, 5.0, 21).unwrap();
            for (y, c) in m.samples() {
                prop_assert_eq!(m.estimate_displacement(c).0, y);
            }
        }
    }
}
