//! Smoothed-L0 gates.
//!
//! A gate maps its argument `x` to `x^2 / (x^2 + eps)`. The value is exactly
//! zero at `x == 0`, lies in `[0, 1)` everywhere else, and its derivative
//! vanishes both at zero and far from it, which is what lets trained gates
//! settle at the two poles.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ops;

pub fn gate_value(x: f64, epsilon: f64) -> Result<f64> {
    if !(epsilon > 0.0) {
        return Err(Error::NonPositiveEpsilon(epsilon));
    }
    Ok(ops::smooth_l0(x, epsilon))
}

/// Derivative of [`gate_value`] with respect to `x`: `2 x eps / (x^2 + eps)^2`.
pub fn gate_grad(x: f64, epsilon: f64) -> Result<f64> {
    if !(epsilon > 0.0) {
        return Err(Error::NonPositiveEpsilon(epsilon));
    }
    Ok(ops::smooth_l0_grad(x, epsilon))
}

/// What the gate function is applied to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum GateMode {
    /// A dedicated trainable scalar per channel scales the activations.
    #[default]
    IntroducedParam,
    /// The l2 norm of the consumer kernels' input slice acts as the gate argument.
    WeightNorm,
    /// No activation scaling; `g(norm)` only enters a differentiable resource penalty.
    RegularizerOnly,
}

impl std::str::FromStr for GateMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "param" | "introduced_param" => Ok(GateMode::IntroducedParam),
            "weightnorm" | "weight_norm" => Ok(GateMode::WeightNorm),
            "reg" | "regularizer_only" => Ok(GateMode::RegularizerOnly),
            other => Err(Error::Config(format!("unknown gate mode {other:?}"))),
        }
    }
}

/// Smoothing constant: one per vector, or one per gate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Epsilon {
    Shared(f64),
    PerGate(Vec<f64>),
}

impl Epsilon {
    pub fn at(&self, i: usize) -> f64 {
        match self {
            Epsilon::Shared(e) => *e,
            Epsilon::PerGate(v) => v[i],
        }
    }

    /// Values as passed to the tape's smooth-L0 op.
    pub fn as_slice(&self) -> &[f64] {
        match self {
            Epsilon::Shared(e) => std::slice::from_ref(e),
            Epsilon::PerGate(v) => v,
        }
    }

    pub fn scale(&mut self, factor: f64) {
        match self {
            Epsilon::Shared(e) => *e *= factor,
            Epsilon::PerGate(v) => v.iter_mut().for_each(|e| *e *= factor),
        }
    }

    fn validate(&self, len: usize) -> Result<()> {
        match self {
            Epsilon::Shared(e) if !(*e > 0.0) => Err(Error::NonPositiveEpsilon(*e)),
            Epsilon::PerGate(v) if v.len() != len => Err(Error::Misaligned(format!(
                "{} per-gate epsilons for {len} gates",
                v.len()
            ))),
            Epsilon::PerGate(v) => match v.iter().find(|e| !(**e > 0.0)) {
                Some(e) => Err(Error::NonPositiveEpsilon(*e)),
                None => Ok(()),
            },
            Epsilon::Shared(_) => Ok(()),
        }
    }
}

/// Gate state of one share group.
///
/// In [`GateMode::IntroducedParam`] `alpha` holds the trainable gate
/// arguments. In the two norm modes it caches the consumer-kernel slice
/// norms, refreshed by the network after every weight update.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateVector {
    pub alpha: Vec<f64>,
    pub epsilon: Epsilon,
    pub mode: GateMode,
    /// Pins every gate to a fixed value and freezes `alpha`. Test hook.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub forced: Option<f64>,
}

impl GateVector {
    pub fn new(alpha: Vec<f64>, epsilon: Epsilon, mode: GateMode) -> Result<Self> {
        epsilon.validate(alpha.len())?;
        Ok(Self {
            alpha,
            epsilon,
            mode,
            forced: None,
        })
    }

    pub fn len(&self) -> usize {
        self.alpha.len()
    }

    pub fn is_empty(&self) -> bool {
        self.alpha.is_empty()
    }

    /// Effective per-channel scaling applied to activations at every site.
    pub fn values(&self) -> Vec<f64> {
        if let Some(v) = self.forced {
            return vec![v; self.len()];
        }
        match self.mode {
            GateMode::RegularizerOnly => self.alpha.iter().map(|&a| if a == 0.0 { 0.0 } else { 1.0 }).collect(),
            _ => self
                .alpha
                .iter()
                .enumerate()
                .map(|(i, &a)| ops::smooth_l0(a, self.epsilon.at(i)))
                .collect(),
        }
    }

    /// Raw smoothed-L0 values `g_eps(alpha_i)`, regardless of mode.
    pub fn smooth_values(&self) -> Vec<f64> {
        self.alpha
            .iter()
            .enumerate()
            .map(|(i, &a)| ops::smooth_l0(a, self.epsilon.at(i)))
            .collect()
    }

    /// Number of exactly-zero entries. No threshold is applied.
    pub fn zero_gate_count(&self) -> usize {
        self.alpha.iter().filter(|&&a| a == 0.0).count()
    }

    /// `||alpha||_0`, the count of entries that are not exactly zero.
    pub fn l0_norm(&self) -> usize {
        self.len() - self.zero_gate_count()
    }

    pub fn is_zero(&self, i: usize) -> bool {
        self.alpha[i] == 0.0
    }

    pub fn decay_epsilon(&mut self, factor: f64) {
        self.epsilon.scale(factor);
    }
}

pub fn zero_gate_count(gv: &GateVector) -> usize {
    gv.zero_gate_count()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn initial_gate_value() {
        let g = gate_value(1.0, 0.1).unwrap();
        assert!((g - 1.0 / 1.1).abs() < 1e-15);
        assert!((g - 0.909).abs() < 1e-3);
        assert_eq!(gate_value(0.0, 0.1).unwrap(), 0.0);
        assert_eq!(gate_value(0.0, 1e-300).unwrap(), 0.0);
        assert!((gate_value(0.5, 0.01).unwrap() - 0.25 / 0.26).abs() < 1e-15);
        assert!((gate_value(0.5, 0.01).unwrap() - 0.9615).abs() < 1e-4);
    }

    #[test]
    fn gate_grad_values() {
        assert_eq!(gate_grad(0.0, 0.3).unwrap(), 0.0);
        // Central difference with step 1e-6, computed independently of gate_grad.
        let h = 1e-6;
        let fd = (1.0f64 + h).powi(2) / ((1.0f64 + h).powi(2) + 0.1) - (1.0f64 - h).powi(2) / ((1.0f64 - h).powi(2) + 0.1);
        let fd = fd / (2.0 * h);
        let g = gate_grad(1.0, 0.1).unwrap();
        assert!((g - 0.2 / 1.21).abs() < 1e-15);
        assert!((g - fd).abs() / fd.abs() < 1e-6);
        assert!((g - 0.16529).abs() < 1e-5);
        let tail = gate_grad(10.0, 1e-6).unwrap();
        assert!((tail - 1.99999996e-9).abs() < 1e-19, "{tail}");
        assert!(tail < 1e-8);
    }

    #[test]
    fn epsilon_must_be_positive() {
        assert!(matches!(gate_value(1.0, 0.0), Err(Error::NonPositiveEpsilon(_))));
        assert!(matches!(gate_grad(1.0, -0.5), Err(Error::NonPositiveEpsilon(_))));
        assert!(GateVector::new(vec![1.0], Epsilon::Shared(0.0), GateMode::IntroducedParam).is_err());
        assert!(GateVector::new(vec![1.0, 2.0], Epsilon::PerGate(vec![0.1]), GateMode::WeightNorm).is_err());
    }

    #[test]
    fn l0_counts_use_exact_zero() {
        let mk = |a: Vec<f64>| GateVector::new(a, Epsilon::Shared(0.1), GateMode::IntroducedParam).unwrap();
        assert_eq!(mk(vec![0.0, 0.3, 0.0]).l0_norm(), 1);
        assert_eq!(mk(vec![0.2, -0.3, 4.0]).l0_norm(), 3);
        assert_eq!(mk(vec![1e-300, 0.0]).l0_norm(), 1);
        assert_eq!(zero_gate_count(&mk(vec![1e-300, 0.0])), 1);
        assert_eq!(mk(vec![-0.0]).l0_norm(), 0);
    }

    #[test]
    fn mode_names() {
        assert_eq!("param".parse::<GateMode>().unwrap(), GateMode::IntroducedParam);
        assert_eq!("weightnorm".parse::<GateMode>().unwrap(), GateMode::WeightNorm);
        assert_eq!("reg".parse::<GateMode>().unwrap(), GateMode::RegularizerOnly);
        assert!("bn".parse::<GateMode>().is_err());
    }

    proptest! {
        #[test]
        fn gate_in_unit_interval_and_even(a in -1e3f64..1e3, eps in 1e-9f64..10.0) {
            let g = gate_value(a, eps).unwrap();
            prop_assert!((0.0..1.0).contains(&g));
            prop_assert_eq!(g, gate_value(-a, eps).unwrap());
        }

        #[test]
        fn gate_increasing_in_magnitude(a in 1e-3f64..10.0, da in 1e-3f64..1.0, eps in 1e-6f64..1.0) {
            prop_assert!(gate_value(a + da, eps).unwrap() > gate_value(a, eps).unwrap());
        }

        #[test]
        fn gate_tends_to_one(a in 0.1f64..10.0) {
            prop_assert!(gate_value(a, 1e-12).unwrap() > 1.0 - 1e-9);
        }

        #[test]
        fn gate_grad_matches_central_difference(mag in -3.0f64..1.0, eps_exp in -6.0f64..0.0, neg in any::<bool>()) {
            let a = 10f64.powf(mag) * if neg { -1.0 } else { 1.0 };
            let eps = 10f64.powf(eps_exp);
            // Scale the step with both a and eps so truncation and rounding stay small.
            let h = 1e-4 * a.abs().min(eps.sqrt());
            // Difference the form that avoids cancellation: x^2/(x^2+eps) near
            // zero, 1 - eps/(x^2+eps) near one.
            let fd = if a * a < eps {
                let f = |x: f64| x * x / (x * x + eps);
                (f(a + h) - f(a - h)) / (2.0 * h)
            } else {
                let q = |x: f64| eps / (x * x + eps);
                (q(a - h) - q(a + h)) / (2.0 * h)
            };
            let g = gate_grad(a, eps).unwrap();
            let rel = (g - fd).abs() / fd.abs().max(1e-300);
            prop_assert!(rel < 1e-6 || (g - fd).abs() < 1e-12, "a={a} eps={eps} g={g} fd={fd}");
        }
    }
}
