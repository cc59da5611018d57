//! Batch front-end: campaign configs in, CSV/JSON/SVG artifacts out.
//!
//! Every JSON artifact embeds the resolved config and its SHA-256; each
//! command also writes a manifest with the hash of every file it produced.
//! No timestamps are written, so reruns are byte-identical.

pub mod config;

use std::fs;
use std::path::{Path, PathBuf};

use log::{info, warn};
use rayon::prelude::*;
use serde::Serialize;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::selfsense::{run_open_loop, write_trace_csv, Estimator, ProbeFeedback, SelfSenseConfig, SelfSensedFeedback};
use crate::sim::export::{trajectory_svg, write_trajectory_csv};
use crate::sim::{
    make_signal, overshoot, settling_time, steady_state_error, ClosedLoop, SimError, SimMetrics, Trajectory,
};
use crate::synthesis::{SynthesisError, SynthesisResult};

pub use config::{apply_override, CampaignConfig, SpecConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_INPUT: i32 = 1;
pub const EXIT_INFEASIBLE: i32 = 2;
pub const EXIT_DIVERGED: i32 = 3;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Input(String),
    #[error("infeasible: {0}")]
    Infeasible(String),
    #[error("diverged: {0}")]
    Diverged(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Input(_) | CliError::Io(_) => EXIT_INPUT,
            CliError::Infeasible(_) => EXIT_INFEASIBLE,
            CliError::Diverged(_) => EXIT_DIVERGED,
        }
    }
}

impl From<SynthesisError> for CliError {
    fn from(e: SynthesisError) -> Self {
        match &e {
            SynthesisError::InvalidProblem(_) | SynthesisError::Structural(_) => CliError::Input(e.to_string()),
            SynthesisError::Infeasible(rep) => {
                let mut msg = e.to_string();
                for s in &rep.suggestions {
                    msg.push_str("\n  hint: ");
                    msg.push_str(s);
                }
                CliError::Infeasible(msg)
            }
            _ => CliError::Infeasible(e.to_string()),
        }
    }
}

impl From<SimError> for CliError {
    fn from(e: SimError) -> Self {
        match &e {
            SimError::Diverged { last, .. } => CliError::Diverged(format!(
                "{e}\nlast sample: {}",
                serde_json::to_string(last).unwrap_or_default()
            )),
            _ => CliError::Input(e.to_string()),
        }
    }
}

/// A file written by a command.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Artifact {
    pub file: String,
    pub sha256: String,
}

/// Collects artifacts under one campaign directory.
pub struct Writer<'a> {
    cfg: &'a CampaignConfig,
    dir: PathBuf,
    written: Vec<Artifact>,
}

impl<'a> Writer<'a> {
    pub fn new(cfg: &'a CampaignConfig) -> Result<Self, CliError> {
        let dir = cfg.out_dir();
        fs::create_dir_all(&dir)?;
        Ok(Self {
            cfg,
            dir,
            written: Vec::new(),
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn bytes(&mut self, name: &str, data: &[u8]) -> Result<PathBuf, CliError> {
        let path = self.dir.join(name);
        fs::write(&path, data)?;
        self.written.retain(|a| a.file != name);
        self.written.push(Artifact {
            file: name.to_string(),
            sha256: hex::encode(Sha256::digest(data)),
        });
        Ok(path)
    }

    /// JSON with the resolved config and its hash attached.
    pub fn json(&mut self, name: &str, key: &str, body: Value) -> Result<PathBuf, CliError> {
        let doc = json!({
            "config_hash": self.cfg.hash(),
            "config": self.cfg.to_value(),
            key: body,
        });
        let text = serde_json::to_string_pretty(&doc).expect("json value serializes");
        self.bytes(name, text.as_bytes())
    }

    pub fn manifest(mut self, command: &str) -> Result<Vec<Artifact>, CliError> {
        let list = serde_json::to_value(&self.written).expect("artifacts serialize");
        let name = format!("manifest_{command}.json");
        self.json(&name, "artifacts", list)?;
        Ok(self.written)
    }
}

/// Loads a synthesis result written by `synth`, or a bare result JSON.
pub fn load_result(path: &Path) -> Result<SynthesisResult, CliError> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::Input(format!("cannot read result {}: {e}", path.display())))?;
    let doc: Value =
        serde_json::from_str(&text).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
    let body = doc.get("result").cloned().unwrap_or(doc);
    serde_json::from_value(body).map_err(|e| CliError::Input(format!("{}: not a synthesis result: {e}", path.display())))
}

fn margins_csv(res: &SynthesisResult) -> Result<Vec<u8>, CliError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let io = |e: csv::Error| CliError::Input(e.to_string());
    w.write_record(["set", "p_mm", "y_mm", "margin", "equilibrated_margin"]).map_err(io)?;
    for (set, list) in [("design", &res.design_margins), ("validation", &res.validation_margins)] {
        for m in list {
            w.write_record([
                set.to_string(),
                format!("{:e}", m.p),
                format!("{:e}", m.y),
                format!("{:e}", m.margin),
                format!("{:e}", m.equilibrated),
            ])
            .map_err(io)?;
        }
    }
    w.into_inner().map_err(|e| CliError::Input(e.to_string()))
}

pub fn cmd_synth(cfg: &CampaignConfig) -> Result<(SynthesisResult, Vec<Artifact>), CliError> {
    let prob = cfg.problem()?;
    let res = prob.synthesize()?;
    info!("{}: γ = {:e}, K = {:?}", cfg.name, res.gamma, res.k);
    let mut w = Writer::new(cfg)?;
    w.json("synthesis.json", "result", serde_json::to_value(&res).expect("result serializes"))?;
    w.bytes("margins.csv", &margins_csv(&res)?)?;
    Ok((res, w.manifest("synth")?))
}

pub fn cmd_verify(cfg: &CampaignConfig, res: &SynthesisResult) -> Result<Vec<Artifact>, CliError> {
    let prob = cfg.problem()?;
    if res.k.len() != prob.n_m() {
        return Err(CliError::Input(format!(
            "result gain has {} entries, config needs {}",
            res.k.len(),
            prob.n_m()
        )));
    }
    let report = prob.bmi_report(res)?;
    let mut w = Writer::new(cfg)?;
    w.json("verify.json", "report", serde_json::to_value(&report).expect("report serializes"))?;
    let arts = w.manifest("verify")?;
    if !report.passed {
        return Err(CliError::Infeasible(format!(
            "BMI check failed: gain margin {:e}, min eig(P) {:e}",
            report.margin20, report.p_min_eig
        )));
    }
    Ok(arts)
}

fn closed_loop(cfg: &CampaignConfig, res: &SynthesisResult) -> Result<ClosedLoop, CliError> {
    let aug = cfg.augmented()?;
    let mut cl = ClosedLoop::new(aug, &res.k, cfg.spec.y0_star())?;
    if let Some(sp) = &cfg.simulation.set_point {
        cl = cl.with_set_point(make_signal(sp.clone()).map_err(|e| CliError::Input(e.to_string()))?);
    }
    Ok(cl)
}

/// Metrics written next to a trajectory.
#[derive(Debug, Clone, Serialize)]
pub struct SimReport {
    #[serde(flatten)]
    pub metrics: SimMetrics,
    pub settling_time: Option<f64>,
    /// Overshoot after the first set-point jump, when one is configured.
    pub overshoot: Option<f64>,
    pub lambda: f64,
    pub l2_within_lambda: Option<bool>,
}

pub fn sim_report(cfg: &CampaignConfig, cl: &ClosedLoop, tr: &Trajectory) -> Result<SimReport, CliError> {
    let s = &cfg.simulation;
    let u_max = cl.augmented().plant().u_max();
    let metrics = SimMetrics::from_trajectory(tr, s.tail, u_max).map_err(|e| CliError::Input(e.to_string()))?;
    let end = *tr.t.last().unwrap_or(&0.0);
    let overshoot = s.set_point.as_ref().and_then(|sp| {
        let sig = make_signal(sp.clone()).ok()?;
        let t_step = *sig.discontinuities(end).first()?;
        let next = sig.discontinuities(end).get(1).copied().unwrap_or(end);
        let before = tr.index_at(t_step).checked_sub(1)?;
        let target = cl.static_target(tr.f[tr.index_at(t_step)], cl.y0_at(t_step)).ok()?;
        overshoot(tr, t_step, next, tr.y[before], target).ok()
    });
    let lambda = cfg.synthesis.lambda;
    Ok(SimReport {
        settling_time: settling_time(tr, s.settle_band, 0.0, end),
        overshoot,
        lambda,
        l2_within_lambda: metrics.l2_ratio.map(|r| r <= lambda),
        metrics,
    })
}

pub fn cmd_sim(cfg: &CampaignConfig, res: &SynthesisResult) -> Result<Vec<Artifact>, CliError> {
    let cl = closed_loop(cfg, res)?;
    let sig = make_signal(cfg.simulation.signal.clone()).map_err(|e| CliError::Input(e.to_string()))?;
    let tr = cl.simulate(&sig, &cfg.simulation.sim_config())?;
    let report = sim_report(cfg, &cl, &tr)?;
    let mut w = Writer::new(cfg)?;
    let mut csv = Vec::new();
    write_trajectory_csv(&tr, &mut csv).map_err(|e| CliError::Input(e.to_string()))?;
    w.bytes("trajectory.csv", &csv)?;
    w.json("metrics.json", "metrics", serde_json::to_value(&report).expect("metrics serialize"))?;
    if cfg.simulation.svg {
        let svg = trajectory_svg(&tr).map_err(|e| CliError::Input(e.to_string()))?;
        w.bytes("trajectory.svg", svg.as_bytes())?;
    }
    w.manifest("sim")
}

/// Open-loop estimator metrics.
#[derive(Debug, Clone, Serialize)]
pub struct SenseReport {
    pub final_r_e_error: f64,
    pub final_c_e_error: f64,
    /// First time after which both relative errors stay below 1 %.
    pub convergence_time: Option<f64>,
    pub reliable: bool,
    pub closed_loop: Option<PairedRuns>,
}

/// Steady-state error of paired sensor-fed and self-sensed runs.
#[derive(Debug, Clone, Serialize)]
pub struct PairedRuns {
    pub sensor_fed_ss_error: f64,
    pub self_sensed_ss_error: f64,
    pub ratio: f64,
    pub mean_estimate_bias: f64,
}

pub fn paired_runs(
    cfg: &CampaignConfig,
    res: &SynthesisResult,
    est_cfg: SelfSenseConfig,
) -> Result<(PairedRuns, Trajectory, SelfSensedFeedback), CliError> {
    let cl = closed_loop(cfg, res)?;
    let sig = make_signal(cfg.simulation.signal.clone()).map_err(|e| CliError::Input(e.to_string()))?;
    let sim = cfg.simulation.sim_config();
    let mut probe = ProbeFeedback {
        amplitude: est_cfg.probe_amplitude,
        frequency: est_cfg.probe_frequency,
    };
    let base = cl.simulate_with(&sig, &sim, &mut probe)?;
    let est = Estimator::new(est_cfg, cfg.capacitance_map()?).map_err(|e| CliError::Input(e.to_string()))?;
    let mut fb = SelfSensedFeedback::new(est, cfg.selfsense.trace_stride);
    let sensed = cl.simulate_with(&sig, &sim, &mut fb)?;
    let tail = cfg.simulation.tail;
    let e_base = steady_state_error(&base, tail).map_err(|e| CliError::Input(e.to_string()))?;
    let e_self = steady_state_error(&sensed, tail).map_err(|e| CliError::Input(e.to_string()))?;
    let from = sensed.index_at(sensed.t.last().copied().unwrap_or(0.0) - tail);
    let n = (sensed.len() - from) as f64;
    let bias = (from..sensed.len()).map(|k| sensed.y_meas[k] - sensed.y[k]).sum::<f64>() / n;
    Ok((
        PairedRuns {
            sensor_fed_ss_error: e_base,
            self_sensed_ss_error: e_self,
            ratio: e_self / e_base,
            mean_estimate_bias: bias,
        },
        sensed,
        fb,
    ))
}

pub fn cmd_sense(cfg: &CampaignConfig, res: Option<&SynthesisResult>) -> Result<Vec<Artifact>, CliError> {
    let ss = &cfg.selfsense;
    let est = ss.estimator.clone();
    if est.probe_amplitude == 0.0 {
        warn!("probe amplitude is zero: no persistent excitation, estimates flagged unreliable");
    }
    let (c0, ramp, v_dc, r_true) = (ss.c_e, ss.c_e_ramp, ss.v_dc, est.r_e);
    let trace = run_open_loop(est.clone(), cfg.capacitance_map()?, ss.open_loop_duration, move |_| v_dc, move |t| {
        c0 * (1.0 + ramp * t)
    })
    .map_err(|e| CliError::Input(e.to_string()))?;
    let rel = |s: &crate::selfsense::EstimateSample| {
        let c = c0 * (1.0 + ramp * s.t);
        (((s.r_e_hat - r_true) / r_true).abs(), ((s.c_e_hat - c) / c).abs())
    };
    let last = trace.last().expect("non-empty trace");
    let (er, ec) = rel(last);
    let convergence_time = {
        let bad = trace.iter().rposition(|s| {
            let (a, b) = rel(s);
            !(a < 0.01 && b < 0.01)
        });
        match bad {
            None => Some(0.0),
            Some(k) if k + 1 < trace.len() => Some(trace[k + 1].t),
            Some(_) => None,
        }
    };
    let mut w = Writer::new(cfg)?;
    let mut csv = Vec::new();
    write_trace_csv(&trace, &mut csv).map_err(|e| CliError::Input(e.to_string()))?;
    w.bytes("estimator_trace.csv", &csv)?;

    let closed = if ss.closed_loop {
        let owned;
        let res = match res {
            Some(r) => r,
            None => {
                owned = cfg.problem()?.synthesize()?;
                &owned
            }
        };
        let est_cl = SelfSenseConfig {
            forgetting: ss.closed_loop_forgetting,
            ..est.clone()
        };
        let (paired, tr, fb) = paired_runs(cfg, res, est_cl)?;
        let mut csv = Vec::new();
        write_trajectory_csv(&tr, &mut csv).map_err(|e| CliError::Input(e.to_string()))?;
        w.bytes("selfsensed_trajectory.csv", &csv)?;
        let mut csv = Vec::new();
        write_trace_csv(fb.trace(), &mut csv).map_err(|e| CliError::Input(e.to_string()))?;
        w.bytes("selfsensed_estimator_trace.csv", &csv)?;
        Some(paired)
    } else {
        None
    };
    let report = SenseReport {
        final_r_e_error: er,
        final_c_e_error: ec,
        convergence_time,
        reliable: est.probe_amplitude > 0.0,
        closed_loop: closed,
    };
    w.json("selfsense_metrics.json", "metrics", serde_json::to_value(&report).expect("report serializes"))?;
    w.manifest("sense")
}

/// synth, verify, sim and (when enabled) sense for one campaign.
pub fn cmd_all(cfg: &CampaignConfig) -> Result<Vec<Artifact>, CliError> {
    let (res, mut arts) = cmd_synth(cfg)?;
    arts.extend(cmd_verify(cfg, &res)?);
    arts.extend(cmd_sim(cfg, &res)?);
    if cfg.selfsense.enabled {
        arts.extend(cmd_sense(cfg, Some(&res))?);
    }
    Ok(arts)
}

/// Runs independent campaigns in parallel; results keep the input order.
pub fn run_campaigns(cfgs: &[CampaignConfig]) -> Vec<Result<Vec<Artifact>, CliError>> {
    cfgs.par_iter().map(cmd_all).collect()
}
