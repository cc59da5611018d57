//! External force generators.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
#[error("invalid signal parameters: {0}")]
pub struct SignalError(pub String);

/// Force profile parameters (N, Hz, s).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SignalSpec {
    Constant {
        value: f64,
    },
    Sine {
        amplitude: f64,
        frequency: f64,
        #[serde(default)]
        offset: f64,
    },
    Step {
        #[serde(default)]
        initial: f64,
        #[serde(rename = "final")]
        final_value: f64,
        at: f64,
    },
    /// Square wave alternating between `offset` and a plateau
    /// `offset + amplitude·plateaus[k]`, `k` counting periods.
    AmSquare {
        amplitude: f64,
        frequency: f64,
        #[serde(default)]
        offset: f64,
        #[serde(default = "default_plateaus")]
        plateaus: Vec<f64>,
    },
    /// Sum of seeded random sinusoids below `bandwidth` under a Hann window
    /// spanning `[0, duration]`; zero outside the window.
    BandLimitedNoise {
        amplitude: f64,
        bandwidth: f64,
        duration: f64,
        seed: u64,
        #[serde(default)]
        offset: f64,
        #[serde(default = "default_components")]
        components: usize,
    },
}

fn default_plateaus() -> Vec<f64> {
    vec![1.0, 0.6, 0.3, 0.8]
}

fn default_components() -> usize {
    16
}

#[derive(Debug, Clone, PartialEq)]
struct Tone {
    amp: f64,
    freq: f64,
    phase: f64,
}

/// Evaluable force signal.
#[derive(Debug, Clone, PartialEq)]
pub struct Signal {
    spec: SignalSpec,
    tones: Vec<Tone>,
}

fn finite(name: &str, v: f64) -> Result<(), SignalError> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(SignalError(format!("{name} must be finite")))
    }
}

fn positive(name: &str, v: f64) -> Result<(), SignalError> {
    if v.is_finite() && v > 0.0 {
        Ok(())
    } else {
        Err(SignalError(format!("{name} must be positive (got {v})")))
    }
}

pub fn make_signal(spec: SignalSpec) -> Result<Signal, SignalError> {
    let mut tones = Vec::new();
    match &spec {
        SignalSpec::Constant { value } => finite("value", *value)?,
        SignalSpec::Sine {
            amplitude,
            frequency,
            offset,
        } => {
            finite("amplitude", *amplitude)?;
            positive("frequency", *frequency)?;
            finite("offset", *offset)?;
        }
        SignalSpec::Step {
            initial,
            final_value,
            at,
        } => {
            finite("initial", *initial)?;
            finite("final", *final_value)?;
            if !(at.is_finite() && *at >= 0.0) {
                return Err(SignalError("step time must be non-negative".into()));
            }
        }
        SignalSpec::AmSquare {
            amplitude,
            frequency,
            offset,
            plateaus,
        } => {
            finite("amplitude", *amplitude)?;
            positive("frequency", *frequency)?;
            finite("offset", *offset)?;
            if plateaus.is_empty() || plateaus.iter().any(|p| !p.is_finite()) {
                return Err(SignalError("plateau list must be non-empty and finite".into()));
            }
        }
        SignalSpec::BandLimitedNoise {
            amplitude,
            bandwidth,
            duration,
            seed,
            offset,
            components,
        } => {
            finite("amplitude", *amplitude)?;
            positive("bandwidth", *bandwidth)?;
            positive("duration", *duration)?;
            finite("offset", *offset)?;
            if *components == 0 {
                return Err(SignalError("at least one component is required".into()));
            }
            let mut rng = ChaCha8Rng::seed_from_u64(*seed);
            // lowest tone completes a few cycles inside the window
            let f_lo = (4.0 / duration).min(0.5 * bandwidth);
            let amp = amplitude / *components as f64;
            tones = (0..*components)
                .map(|_| Tone {
                    amp,
                    freq: rng.gen_range(f_lo..=*bandwidth),
                    phase: rng.gen_range(0.0..2.0 * PI),
                })
                .collect();
        }
    }
    Ok(Signal { spec, tones })
}

impl Signal {
    pub fn spec(&self) -> &SignalSpec {
        &self.spec
    }

    pub fn eval(&self, t: f64) -> f64 {
        match &self.spec {
            SignalSpec::Constant { value } => *value,
            SignalSpec::Sine {
                amplitude,
                frequency,
                offset,
            } => offset + amplitude * (2.0 * PI * frequency * t).sin(),
            SignalSpec::Step {
                initial,
                final_value,
                at,
            } => {
                if t < *at {
                    *initial
                } else {
                    *final_value
                }
            }
            SignalSpec::AmSquare {
                amplitude,
                frequency,
                offset,
                plateaus,
            } => {
                let cycles = (t * frequency).max(0.0);
                let k = cycles.floor();
                if cycles - k < 0.5 {
                    offset + amplitude * plateaus[k as usize % plateaus.len()]
                } else {
                    *offset
                }
            }
            SignalSpec::BandLimitedNoise {
                duration, offset, ..
            } => {
                if t <= 0.0 || t >= *duration {
                    return *offset;
                }
                let w = (PI * t / duration).sin().powi(2);
                let s: f64 = self
                    .tones
                    .iter()
                    .map(|tn| tn.amp * (2.0 * PI * tn.freq * t + tn.phase).sin())
                    .sum();
                offset + w * s
            }
        }
    }

    /// Times at which the signal jumps, inside `[0, horizon]`.
    pub fn discontinuities(&self, horizon: f64) -> Vec<f64> {
        match &self.spec {
            SignalSpec::Step { at, .. } if *at <= horizon => vec![*at],
            SignalSpec::AmSquare { frequency, .. } => {
                let half = 0.5 / frequency;
                (1..)
                    .map(|k| k as f64 * half)
                    .take_while(|&t| t <= horizon)
                    .collect()
            }
            _ => Vec::new(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sine_at_zero_is_offset() {
        let s = make_signal(SignalSpec::Sine {
            amplitude: 0.05,
            frequency: 0.1,
            offset: 0.05,
        })
        .unwrap();
        assert_eq!(s.eval(0.0), 0.05);
        assert!((s.eval(2.5) - 0.1).abs() < 1e-15);
    }

    #[test]
    fn step_switches_at_time() {
        let s = make_signal(SignalSpec::Step {
            initial: 0.0,
            final_value: 0.1,
            at: 1.0,
        })
        .unwrap();
        assert_eq!(s.eval(0.999), 0.0);
        assert_eq!(s.eval(1.0), 0.1);
        assert_eq!(s.discontinuities(5.0), vec![1.0]);
    }

    #[test]
    fn am_square_reproduces_plateaus() {
        let plateaus = vec![1.0, 0.6, 0.3, 0.8];
        let s = make_signal(SignalSpec::AmSquare {
            amplitude: 0.1,
            frequency: 0.05,
            offset: 0.02,
            plateaus: plateaus.clone(),
        })
        .unwrap();
        for (k, p) in plateaus.iter().enumerate() {
            let mid_high = 20.0 * k as f64 + 5.0;
            let mid_low = 20.0 * k as f64 + 15.0;
            assert!((s.eval(mid_high) - (0.02 + 0.1 * p)).abs() < 1e-15);
            assert_eq!(s.eval(mid_low), 0.02);
        }
        assert!((s.eval(85.0) - 0.12).abs() < 1e-15);
    }

    #[test]
    fn noise_is_seeded_and_windowed() {
        let spec = SignalSpec::BandLimitedNoise {
            amplitude: 0.02,
            bandwidth: 5.0,
            duration: 4.0,
            seed: 9,
            offset: 0.1,
            components: 16,
        };
        let a = make_signal(spec.clone()).unwrap();
        let b = make_signal(spec).unwrap();
        for k in 0..400 {
            let t = k as f64 * 0.0123;
            assert_eq!(a.eval(t).to_bits(), b.eval(t).to_bits());
            assert!((a.eval(t) - 0.1).abs() <= 0.02 + 1e-15);
        }
        assert_eq!(a.eval(0.0), 0.1);
        assert_eq!(a.eval(4.0), 0.1);
        let other = make_signal(SignalSpec::BandLimitedNoise {
            amplitude: 0.02,
            bandwidth: 5.0,
            duration: 4.0,
            seed: 10,
            offset: 0.1,
            components: 16,
        })
        .unwrap();
        assert_ne!(a.eval(1.3), other.eval(1.3));
    }

    #[test]
    fn invalid_parameters_rejected() {
        assert!(make_signal(SignalSpec::Sine {
            amplitude: 1.0,
            frequency: 0.0,
            offset: 0.0
        })
        .is_err());
        assert!(make_signal(SignalSpec::AmSquare {
            amplitude: 1.0,
            frequency: 1.0,
            offset: 0.0,
            plateaus: vec![]
        })
        .is_err());
        assert!(make_signal(SignalSpec::Constant { value: f64::NAN }).is_err());
    }

    #[test]
    fn spec_json_tagged() {
        let s: SignalSpec =
            serde_json::from_str(r#"{"kind":"step","final":0.1,"at":1.0}"#).unwrap();
        assert_eq!(
            s,
            SignalSpec::Step {
                initial: 0.0,
                final_value: 0.1,
                at: 1.0
            }
        );
    }
}
