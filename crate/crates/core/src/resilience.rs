//! Closed-form resilience bounds: the longest tolerable anomaly duration and
//! the shortest resting time between two anomalies.

use serde::Serialize;

use crate::backstep::TransformTable;
use crate::error::{config_err, Result};
use crate::plant::{InterconnectedModel, LipschitzBundle};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ResilienceConstants {
    pub l_alpha: f64,
    pub l_beta: f64,
    pub l_pi: f64,
    pub l_omega: f64,
    pub theta_bar: f64,
    pub lambda_bar: f64,
    pub gamma: f64,
    /// Number of subsystems.
    pub m: usize,
    /// Largest subsystem order.
    pub n_m: usize,
    pub b_m: f64,
    pub c_m: f64,
    /// Set when `gamma` is the minimum over heterogeneous per-subsystem gains.
    pub gamma_substituted: bool,
}

impl ResilienceConstants {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("L_alpha", self.l_alpha),
            ("L_beta", self.l_beta),
            ("L_pi", self.l_pi),
            ("L_Omega", self.l_omega),
            ("b_m", self.b_m),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(config_err(format!("{name} must be finite and >= 0 (got {v})")));
            }
        }
        if !(self.theta_bar > 0.0) || !(self.lambda_bar > 0.0) {
            return Err(config_err("theta_bar and lambda_bar must be > 0"));
        }
        if !(self.gamma > 1.0) || !self.gamma.is_finite() {
            return Err(config_err(format!(
                "the bounds require control gain gamma > 1 (got {})",
                self.gamma
            )));
        }
        if self.m == 0 || self.n_m == 0 {
            return Err(config_err("M and n_m must be >= 1"));
        }
        if !(self.c_m >= 1.0) || !self.c_m.is_finite() {
            return Err(config_err(format!("c_m must be >= 1 (got {})", self.c_m)));
        }
        Ok(())
    }

    /// `c_m(λ̄ L_Ω + θ̄ L_π)`: the quadratic coefficient (halved) of the `w3` equation.
    pub fn adaptive_coupling(&self) -> f64 {
        self.c_m * (self.lambda_bar * self.l_omega + self.theta_bar * self.l_pi)
    }

    fn bracket(&self, k: f64) -> f64 {
        self.c_m
            * (self.l_alpha
                + k * self.theta_bar * self.l_pi
                + k * self.lambda_bar * self.l_omega
                + self.m as f64 * self.l_beta)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DurationBound {
    pub w1: f64,
    pub w2: f64,
    pub w3: f64,
    pub t_d_max: f64,
    pub constants: ResilienceConstants,
}

pub fn theorem1_bound(c: &ResilienceConstants) -> Result<DurationBound> {
    c.validate()?;
    let shared = c.bracket(3.0);
    let w1 = shared + 3.0 * c.gamma + 4.0 + c.b_m;
    let w2 = shared + c.gamma + c.b_m;
    // Positive root of 2q w² + w2 w − 1/(M n_m) = 0, q = c_m(λ̄L_Ω + θ̄L_π),
    // in rationalized form so q → 0 reduces to 1/(M n_m w2) without cancellation.
    let q = c.adaptive_coupling();
    let k = 1.0 / (c.m as f64 * c.n_m as f64);
    let w3 = 2.0 * k / (w2 + (w2 * w2 + 8.0 * q * k).sqrt());
    assert!(w1 > w2 && w2 > 0.0 && w3 > 0.0, "bound constants out of range");
    let t_d_max = ((w1 - w2) * w3 / (w2 * w3 + w1)).ln_1p() / (w1 - w2);
    Ok(DurationBound {
        w1,
        w2,
        w3,
        t_d_max,
        constants: c.clone(),
    })
}

/// Right-hand side of the `e_h / Σ z_i` growth bound after `t` seconds of anomaly.
pub fn ratio_envelope(w1: f64, w2: f64, t: f64) -> f64 {
    let g = ((w1 - w2) * t).exp();
    (g - 1.0) / (1.0 - w2 / w1 * g)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RestingInputs {
    pub constants: ResilienceConstants,
    /// Initial `z_i(0)` per subsystem.
    pub z0: Vec<Vec<f64>>,
    /// Compact-set radii `ϑ_i > 0`.
    pub vartheta: Vec<f64>,
    pub t_d: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RestingBound {
    pub rho1: f64,
    pub rho2: f64,
    pub kappa: f64,
    pub s: Vec<f64>,
    /// `2Mθ̄²` and `2Mλ̄²`, the estimator share of the compact-set level.
    pub s_theta: f64,
    pub s_lambda: f64,
    /// Unclamped right-hand side.
    pub raw: f64,
    pub t_r_min: f64,
}

pub fn theorem2_bound(inputs: &RestingInputs) -> Result<RestingBound> {
    let c = &inputs.constants;
    c.validate()?;
    if inputs.z0.len() != c.m || inputs.vartheta.len() != c.m {
        return Err(config_err(format!(
            "resting-time inputs need one z0 and one vartheta per subsystem (M = {})",
            c.m
        )));
    }
    if inputs.vartheta.iter().any(|v| !(*v > 0.0)) {
        return Err(config_err("vartheta entries must be > 0"));
    }
    if !(inputs.t_d >= 0.0) || !inputs.t_d.is_finite() {
        return Err(config_err("anomaly duration must be finite and >= 0"));
    }
    let s: Vec<f64> = inputs
        .z0
        .iter()
        .zip(&inputs.vartheta)
        .map(|(z, &v)| (0.5 * z.iter().map(|x| x * x).sum::<f64>()).max(v))
        .collect();
    let spread: f64 = inputs
        .z0
        .iter()
        .zip(&s)
        .map(|(z, si)| (2.0 * z.len() as f64 * si).sqrt())
        .sum();
    let m = c.m as f64;
    let rho1 = c.bracket(4.0) + 3.0 * c.gamma + c.b_m + 2.0;
    let rho2 = c.c_m * spread * (c.l_alpha + 3.0 * c.theta_bar * c.l_pi + 3.0 * c.lambda_bar * c.l_omega)
        + spread * (c.gamma + c.b_m + m * c.l_beta * c.c_m);
    let kappa = spread + rho2 / rho1;
    let peak = kappa * (rho1 * inputs.t_d).exp() - rho2 / rho1;
    let raw = (0.5 * peak * peak - s.iter().sum::<f64>())
        / (2.0 * c.gamma * inputs.vartheta.iter().sum::<f64>());
    Ok(RestingBound {
        rho1,
        rho2,
        kappa,
        s,
        s_theta: 2.0 * m * c.theta_bar * c.theta_bar,
        s_lambda: 2.0 * m * c.lambda_bar * c.lambda_bar,
        raw,
        t_r_min: raw.max(0.0),
    })
}

/// Maxima over subsystems of the Lipschitz constants and transform coefficients.
pub fn extract_constants(
    model: &InterconnectedModel,
    tables: &[TransformTable],
    bundle: &LipschitzBundle,
) -> Result<ResilienceConstants> {
    let m = model.len();
    if tables.len() != m {
        return Err(config_err(format!(
            "need one transform table per subsystem ({m}), got {}",
            tables.len()
        )));
    }
    bundle.validate(m)?;
    let max = |v: &[f64]| v.iter().copied().fold(0.0, f64::max);
    let gains: Vec<f64> = model.subsystems().iter().map(|s| s.gain()).collect();
    let gamma = gains.iter().copied().fold(f64::INFINITY, f64::min);
    let c = ResilienceConstants {
        l_alpha: max(&bundle.alpha),
        l_beta: max(&bundle.beta),
        l_pi: max(&bundle.pi),
        l_omega: max(&bundle.omega),
        theta_bar: bundle.theta_bar,
        lambda_bar: bundle.lambda_bar,
        gamma,
        m,
        n_m: model.max_order(),
        b_m: tables.iter().map(|t| t.b_im).fold(0.0, f64::max),
        c_m: tables.iter().map(|t| t.c_im).fold(0.0, f64::max),
        gamma_substituted: gains.iter().any(|g| *g != gamma),
    };
    c.validate()?;
    Ok(c)
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn toy() -> ResilienceConstants {
        ResilienceConstants {
            l_alpha: 1.0,
            l_beta: 1.0,
            l_pi: 1.0,
            l_omega: 1.0,
            theta_bar: 1.0,
            lambda_bar: 1.0,
            gamma: 2.0,
            m: 4,
            n_m: 2,
            b_m: 4.0,
            c_m: 3.0,
            gamma_substituted: false,
        }
    }

    #[test]
    fn toy_duration_bound() {
        let b = theorem1_bound(&toy()).unwrap();
        assert_eq!(b.w1, 47.0);
        assert_eq!(b.w2, 39.0);
        let w3_ref = (1527f64.sqrt() - 39.0) / 24.0;
        assert!((b.w3 - w3_ref).abs() < 1e-15);
        assert!((b.w3 - 3.20e-3).abs() < 5e-6);
        // ln((47 w3 + 47)/(39 w3 + 47)) / 8 evaluated independently.
        let td_ref = ((47.0 * w3_ref + 47.0) / (39.0 * w3_ref + 47.0)).ln() / 8.0;
        assert!((b.t_d_max - td_ref).abs() < 1e-15);
        assert!((b.t_d_max - 6.8e-5).abs() < 1e-6);
    }

    #[test]
    fn degenerate_coupling_uses_linear_root() {
        let mut c = toy();
        c.l_pi = 0.0;
        c.l_omega = 0.0;
        let b = theorem1_bound(&c).unwrap();
        assert!((b.w3 - 1.0 / (4.0 * 2.0 * b.w2)).abs() < 1e-18);
        assert!(b.t_d_max > 0.0);
    }

    #[test]
    fn rejects_gamma_at_most_one() {
        let mut c = toy();
        c.gamma = 1.0;
        let err = theorem1_bound(&c).unwrap_err();
        assert!(err.to_string().contains("gamma > 1"));
    }

    #[test]
    fn resting_s_values_and_clamp() {
        let mut c = toy();
        c.m = 1;
        let r = theorem2_bound(&RestingInputs {
            constants: c.clone(),
            z0: vec![vec![3.0, 2.0]],
            vartheta: vec![0.5],
            t_d: 0.1,
        })
        .unwrap();
        assert_eq!(r.s, vec![6.5]);
        assert!(r.t_r_min > 0.0);

        // One first-order subsystem, no anomaly: the numerator vanishes.
        c.n_m = 1;
        let r = theorem2_bound(&RestingInputs {
            constants: c,
            z0: vec![vec![0.0]],
            vartheta: vec![1.0],
            t_d: 0.0,
        })
        .unwrap();
        assert!(r.raw.abs() < 1e-12);
        assert!(r.t_r_min >= 0.0 && r.t_r_min < 1e-12);
    }

    #[test]
    fn kappa_dominates_spread() {
        let r = theorem2_bound(&RestingInputs {
            constants: toy(),
            z0: vec![vec![3.0, 8.0]; 4],
            vartheta: vec![0.5; 4],
            t_d: 0.2,
        })
        .unwrap();
        let spread: f64 = r.s.iter().map(|s| (4.0 * s).sqrt()).sum();
        assert!(r.kappa >= spread);
        assert!((r.kappa - spread - r.rho2 / r.rho1).abs() < 1e-9);
    }
}
