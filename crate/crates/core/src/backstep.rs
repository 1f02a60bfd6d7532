//! Recursive back-stepping transform, distributed control law and adaptive
//! estimator rates.
//!
//! Every virtual control `α_{i,j}` is linear in the local state, so the whole
//! recursion collapses into constant lower-triangular tables computed once per
//! subsystem. Per-step work is then two triangular mat-vec products.

use serde::Serialize;

use crate::error::{config_err, Error, Result};
use crate::plant::ControllerView;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Basis {
    X,
    Z,
}

/// Fixed linear combination over the first `len` coordinates of a basis.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LinearComb {
    pub basis: Basis,
    pub coefficients: Vec<f64>,
}

impl LinearComb {
    fn new(basis: Basis, coefficients: Vec<f64>) -> Self {
        Self {
            basis,
            coefficients,
        }
    }

    pub fn dot(&self, v: &[f64]) -> f64 {
        self.coefficients.iter().zip(v).map(|(c, x)| c * x).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TransformTable {
    pub n: usize,
    pub gamma: f64,
    /// Row `j` gives `x_{j+1}` over `z_1..z_{j+1}`.
    pub x_of_z: Vec<LinearComb>,
    /// Row `j` gives `z_{j+1}` over `x_1..x_{j+1}`.
    pub z_of_x: Vec<LinearComb>,
    /// Row `j` gives the virtual control `α_{j+1}` over `x_1..x_{j+1}`.
    pub alpha_rows: Vec<LinearComb>,
    /// `b_{n,k}`: the feed-forward `Σ_k ∂α_{n−1}/∂x_k · x_{k+1}` over `z_1..z_n`.
    pub b_row: LinearComb,
    /// Column absolute sums of `x_of_z`.
    pub c_bar: Vec<f64>,
    pub c_im: f64,
    pub b_im: f64,
}

/// Expand a row over `x_1..x_len` into full length `n`.
fn padded(row: &[f64], n: usize) -> Vec<f64> {
    let mut v = row.to_vec();
    v.resize(n, 0.0);
    v
}

pub fn build_transform(n: usize, gamma: f64) -> Result<TransformTable> {
    if n == 0 {
        return Err(config_err("back-stepping transform needs order n >= 1"));
    }
    if !(gamma > 1.0) || !gamma.is_finite() {
        return Err(config_err(format!(
            "back-stepping gain must satisfy gamma > 1 (got {gamma})"
        )));
    }

    // z_j = x_j − α_{j−1}, α_0 = 0; all rows stored over x_1..x_n.
    let mut z_rows: Vec<Vec<f64>> = Vec::with_capacity(n);
    let mut alpha: Vec<Vec<f64>> = Vec::with_capacity(n.saturating_sub(1));
    for j in 0..n {
        let mut z = vec![0.0; n];
        z[j] = 1.0;
        if j > 0 {
            for (zk, ak) in z.iter_mut().zip(&alpha[j - 1]) {
                *zk -= ak;
            }
        }
        z_rows.push(z);
        if j + 1 == n {
            break;
        }
        // α_{j+1} = −γ z_{j+1} − z_j + Σ_{k≤j} ∂α_j/∂x_k · x_{k+1}
        let mut a: Vec<f64> = z_rows[j].iter().map(|c| -gamma * c).collect();
        if j > 0 {
            for (ak, zk) in a.iter_mut().zip(&z_rows[j - 1]) {
                *ak -= zk;
            }
            let prev = &alpha[j - 1];
            for k in 0..j {
                a[k + 1] += prev[k];
            }
        }
        alpha.push(a);
    }

    // Inverse of the unit lower-triangular z_of_x by forward substitution:
    // x_j = z_j + α_{j−1}(x_1..x_{j−1}).
    let mut c_rows: Vec<Vec<f64>> = Vec::with_capacity(n);
    for j in 0..n {
        let mut c = vec![0.0; n];
        c[j] = 1.0;
        if j > 0 {
            for k in 0..j {
                let a = alpha[j - 1][k];
                if a != 0.0 {
                    for (cm, ck) in c.iter_mut().zip(&c_rows[k]) {
                        *cm += a * ck;
                    }
                }
            }
        }
        c_rows.push(c);
    }

    // Feed-forward term over x, then re-expressed over z through x = C z.
    let mut ff_x = vec![0.0; n];
    if n >= 2 {
        for k in 0..n - 1 {
            ff_x[k + 1] += alpha[n - 2][k];
        }
    }
    let b: Vec<f64> = (0..n)
        .map(|col| (0..n).map(|j| ff_x[j] * c_rows[j][col]).sum())
        .collect();

    let c_bar: Vec<f64> = (0..n)
        .map(|col| c_rows.iter().map(|r| r[col].abs()).sum())
        .collect();
    let c_im = c_bar.iter().copied().fold(0.0, f64::max);
    let b_im = b.iter().map(|v| v.abs()).fold(0.0, f64::max);

    Ok(TransformTable {
        n,
        gamma,
        x_of_z: c_rows
            .iter()
            .enumerate()
            .map(|(j, r)| LinearComb::new(Basis::Z, r[..=j].to_vec()))
            .collect(),
        z_of_x: z_rows
            .iter()
            .enumerate()
            .map(|(j, r)| LinearComb::new(Basis::X, r[..=j].to_vec()))
            .collect(),
        alpha_rows: alpha
            .iter()
            .enumerate()
            .map(|(j, r)| LinearComb::new(Basis::X, r[..=j].to_vec()))
            .collect(),
        b_row: LinearComb::new(Basis::Z, b),
        c_bar,
        c_im,
        b_im,
    })
}

impl TransformTable {
    pub fn to_z(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_len(x.len())?;
        Ok(self.z_of_x.iter().map(|r| r.dot(x)).collect())
    }

    pub fn to_x(&self, z: &[f64]) -> Result<Vec<f64>> {
        self.check_len(z.len())?;
        Ok(self.x_of_z.iter().map(|r| r.dot(z)).collect())
    }

    /// `z_n` alone.
    pub fn z_last(&self, x: &[f64]) -> f64 {
        self.z_of_x[self.n - 1].dot(x)
    }

    /// Full-width rows of `x_of_z`, convenient for matrix-style checks.
    pub fn c_matrix(&self) -> Vec<Vec<f64>> {
        self.x_of_z.iter().map(|r| padded(&r.coefficients, self.n)).collect()
    }

    pub fn z_matrix(&self) -> Vec<Vec<f64>> {
        self.z_of_x.iter().map(|r| padded(&r.coefficients, self.n)).collect()
    }

    fn check_len(&self, len: usize) -> Result<()> {
        if len != self.n {
            return Err(Error::Dimension {
                expected: self.n,
                got: len,
            });
        }
        Ok(())
    }
}

/// Norm bounds enforced on the parameter estimates by projection.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ProjectionBounds {
    pub theta_bar: f64,
    pub lambda_bar: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EstimatorState {
    pub theta_hat: Vec<f64>,
    pub lambda_hat: f64,
    pub bounds: ProjectionBounds,
}

impl EstimatorState {
    pub fn theta_norm(&self) -> f64 {
        self.theta_hat.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// Radial rescale of `θ̂` onto the `θ̄` ball and clamp of `λ̂` to `[−λ̄, λ̄]`.
pub fn project(est: &EstimatorState) -> EstimatorState {
    let mut out = est.clone();
    project_in_place(&mut out);
    out
}

pub fn project_in_place(est: &mut EstimatorState) {
    let norm = est.theta_norm();
    let bar = est.bounds.theta_bar;
    if norm > bar {
        let mut s = bar / norm;
        let original = est.theta_hat.clone();
        // Rounding can leave the rescaled norm an ulp above the bound.
        loop {
            for (v, o) in est.theta_hat.iter_mut().zip(&original) {
                *v = o * s;
            }
            if est.theta_norm() <= bar {
                break;
            }
            s *= 1.0 - f64::EPSILON;
        }
    }
    est.lambda_hat = est
        .lambda_hat
        .clamp(-est.bounds.lambda_bar, est.bounds.lambda_bar);
}

/// The three additive parts of the control law.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct ControlParts {
    /// Back-stepping feedback with nominal and interconnection cancellation.
    pub u1: f64,
    /// `−θ̂ᵀπ(x)`.
    pub u2: f64,
    /// `−λ̂ Ω(x)`.
    pub u3: f64,
}

impl ControlParts {
    pub fn total(&self) -> f64 {
        self.u1 + self.u2 + self.u3
    }
}

/// Distributed control law evaluated on the signals the controller receives.
pub fn control(
    view: ControllerView<'_>,
    table: &TransformTable,
    x: &[f64],
    beta: f64,
    est: &EstimatorState,
) -> Result<(f64, ControlParts)> {
    let z = table.to_z(x)?;
    let n = table.n;
    let mut u1 = -table.gamma * z[n - 1] - view.nominal().eval(x, 0.0) - beta + table.b_row.dot(&z);
    if n >= 2 {
        u1 -= z[n - 2];
    }
    let u2 = -view.approximator().weighted(&est.theta_hat, x);
    let u3 = -est.lambda_hat * view.bounding().eval(x, 0.0);
    let subsystem = view.index() + 1;
    for (part, v) in [("u1", u1), ("u2", u2), ("u3", u3)] {
        if !v.is_finite() {
            return Err(Error::NonFiniteControl { part, subsystem });
        }
    }
    let parts = ControlParts { u1, u2, u3 };
    Ok((parts.total(), parts))
}

/// Adaptation gains: `Γ = gamma·I` and `ζ`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EstimatorGains {
    pub gamma: f64,
    pub zeta: f64,
}

impl EstimatorGains {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0) || !(self.zeta > 0.0) {
            return Err(config_err("estimator gains must be positive"));
        }
        Ok(())
    }
}

/// `θ̂̇ = Γ z_n π(x)`, `λ̂̇ = ζ z_n Ω(x)` with `z_n` taken from the supplied state.
pub fn estimator_rates(
    view: ControllerView<'_>,
    table: &TransformTable,
    x: &[f64],
    gains: EstimatorGains,
) -> Result<(Vec<f64>, f64)> {
    table.check_len(x.len())?;
    let zn = table.z_last(x);
    let mut theta_rate = view.approximator().basis(x);
    for v in &mut theta_rate {
        *v *= gains.gamma * zn;
    }
    let lambda_rate = gains.zeta * zn * view.bounding().eval(x, 0.0);
    Ok((theta_rate, lambda_rate))
}
