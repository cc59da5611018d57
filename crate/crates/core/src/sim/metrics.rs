//! Scalar figures of merit computed from a trajectory.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::Trajectory;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricError {
    #[error("trajectory has no samples in [{from}, {to}] s")]
    EmptyWindow { from: f64, to: f64 },
    #[error("force deviation has zero energy")]
    ZeroEnergy,
}

fn window(tr: &Trajectory, from: f64, to: f64) -> Result<std::ops::Range<usize>, MetricError> {
    let a = tr.index_at(from);
    let b = tr.t.partition_point(|&s| s <= to + 1e-12);
    if a >= b {
        return Err(MetricError::EmptyWindow { from, to });
    }
    Ok(a..b)
}

/// Mean `|e_i|` over the trailing `tail` seconds.
pub fn steady_state_error(tr: &Trajectory, tail: f64) -> Result<f64, MetricError> {
    let end = *tr.t.last().ok_or(MetricError::EmptyWindow { from: 0.0, to: 0.0 })?;
    let r = window(tr, end - tail, end)?;
    let n = r.len() as f64;
    Ok(tr.e_i[r].iter().map(|e| e.abs()).sum::<f64>() / n)
}

/// Largest `|e_i|` on `[from, to]`.
pub fn max_abs_error(tr: &Trajectory, from: f64, to: f64) -> Result<f64, MetricError> {
    let r = window(tr, from, to)?;
    Ok(tr.e_i[r].iter().fold(0.0, |m, e| m.max(e.abs())))
}

/// `‖z − z(0)‖₂ / ‖f − f(0)‖₂` by trapezoidal quadrature.
pub fn empirical_l2_ratio(tr: &Trajectory) -> Result<f64, MetricError> {
    if tr.len() < 2 {
        return Err(MetricError::ZeroEnergy);
    }
    let (z0, f0) = (tr.z[0], tr.f[0]);
    let energy = |v: &[f64], v0: f64| -> f64 {
        tr.t.windows(2)
            .zip(v.windows(2))
            .map(|(t, w)| 0.5 * (t[1] - t[0]) * ((w[0] - v0).powi(2) + (w[1] - v0).powi(2)))
            .sum()
    };
    let ef = energy(&tr.f, f0);
    if ef <= 0.0 {
        return Err(MetricError::ZeroEnergy);
    }
    Ok((energy(&tr.z, z0) / ef).sqrt())
}

/// First time `t ≥ from` after which `|e_i| ≤ threshold` holds up to `to`.
pub fn settling_time(tr: &Trajectory, threshold: f64, from: f64, to: f64) -> Option<f64> {
    let r = window(tr, from, to).ok()?;
    let last_bad = r.clone().rev().find(|&k| tr.e_i[k].abs() > threshold);
    match last_bad {
        None => Some(tr.t[r.start]),
        Some(k) if k + 1 < r.end => Some(tr.t[k + 1]),
        Some(_) => None,
    }
}

/// Peak excursion of `y` beyond `y_final` in the direction of the move from
/// `y_initial`, as a fraction of the move, over `[from, to]`.
pub fn overshoot(tr: &Trajectory, from: f64, to: f64, y_initial: f64, y_final: f64) -> Result<f64, MetricError> {
    let r = window(tr, from, to)?;
    let step = y_final - y_initial;
    if step == 0.0 {
        return Ok(0.0);
    }
    let peak = tr.y[r]
        .iter()
        .map(|y| (y - y_final) / step)
        .fold(f64::NEG_INFINITY, f64::max);
    Ok(peak.max(0.0))
}

/// Summary written alongside every simulation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimMetrics {
    pub steady_state_error: f64,
    pub max_abs_error: f64,
    pub l2_ratio: Option<f64>,
    pub u_saturated_fraction: f64,
    pub y_min: f64,
    pub y_max: f64,
}

impl SimMetrics {
    pub fn from_trajectory(tr: &Trajectory, tail: f64, u_max: f64) -> Result<Self, MetricError> {
        let end = *tr.t.last().ok_or(MetricError::EmptyWindow { from: 0.0, to: 0.0 })?;
        let sat = tr
            .u
            .iter()
            .filter(|&&u| u <= 0.0 || u >= u_max)
            .count() as f64
            / tr.len() as f64;
        Ok(Self {
            steady_state_error: steady_state_error(tr, tail)?,
            max_abs_error: max_abs_error(tr, 0.0, end)?,
            l2_ratio: empirical_l2_ratio(tr).ok(),
            u_saturated_fraction: sat,
            y_min: tr.y.iter().copied().fold(f64::INFINITY, f64::min),
            y_max: tr.y.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn synthetic(e: impl Fn(f64) -> f64, z: impl Fn(f64) -> f64, f: impl Fn(f64) -> f64) -> Trajectory {
        let mut tr = Trajectory::default();
        for k in 0..=1000 {
            let t = k as f64 * 1e-3;
            tr.t.push(t);
            tr.e_i.push(e(t));
            tr.y.push(1.0 + e(t));
            tr.z.push(z(t));
            tr.f.push(f(t));
            tr.u.push(1.0);
        }
        tr
    }

    #[test]
    fn l2_ratio_of_scaled_copy() {
        let tr = synthetic(|_| 0.0, |t| 0.5 * (7.0 * t).sin(), |t| (7.0 * t).sin());
        assert!((empirical_l2_ratio(&tr).unwrap() - 0.5).abs() < 1e-12);
        let flat = synthetic(|_| 0.0, |t| t, |_| 0.3);
        assert_eq!(empirical_l2_ratio(&flat), Err(MetricError::ZeroEnergy));
    }

    #[test]
    fn l2_ratio_ignores_offsets() {
        let tr = synthetic(|_| 0.0, |t| 3.0 + 0.25 * t, |t| -2.0 + t);
        assert!((empirical_l2_ratio(&tr).unwrap() - 0.25).abs() < 1e-12);
    }

    #[test]
    fn settling_and_steady_state() {
        let tr = synthetic(|t| 0.01 * (-20.0 * t).exp(), |_| 0.0, |_| 0.0);
        let ts = settling_time(&tr, 1e-3, 0.0, 1.0).unwrap();
        let exact = (10.0f64).ln() / 20.0;
        assert!((ts - exact).abs() <= 1e-3 + 1e-12);
        assert!(steady_state_error(&tr, 0.1).unwrap() < 1e-9);
        assert!(settling_time(&tr, 1e-12, 0.0, 1.0).is_none());
        assert!((max_abs_error(&tr, 0.0, 1.0).unwrap() - 0.01).abs() < 1e-15);
    }

    #[test]
    fn overshoot_of_damped_step() {
        let tr = synthetic(|t| -(-5.0 * t).exp() * (1.0 + 5.0 * t) + 0.2 * (t * 9.0).sin() * (-3.0 * t).exp(), |_| 0.0, |_| 0.0);
        let o = overshoot(&tr, 0.0, 1.0, 0.0, 1.0).unwrap();
        let peak = tr.y.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        assert!((o - (peak - 1.0).max(0.0)).abs() < 1e-12);
        assert!(overshoot(&tr, 0.0, 1.0, 2.0, 2.0).unwrap() == 0.0);
    }

    #[test]
    fn empty_window_reported() {
        let tr = synthetic(|_| 0.0, |_| 0.0, |_| 0.0);
        assert!(max_abs_error(&tr, 2.0, 3.0).is_err());
    }
}
