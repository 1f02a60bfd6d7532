//! Interconnected strict-feedback plant.
//!
//! Subsystem `i` is the integrator chain `ẋ_{i,j} = x_{i,j+1}` closed by
//! `ẋ_{i,n} = α_i(x_i) + u_i + η_i(x_i, t) + β_i(x̄_i)`, where the coupling
//! `β_i = Σ_{j∈N_i} χ_{i,j}(x_j)` collects the neighbor terms.

use std::collections::BTreeMap;
use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::approx::RbfConfig;
use crate::error::{config_err, Error, Result};
use crate::expr::Expr;

/// Default half-width of the state box used for sampling and diagnostics.
pub const DEFAULT_BOX: (f64, f64) = (-5.0, 5.0);

/// A parsed expression together with its source text.
#[derive(Clone, PartialEq)]
pub struct ScalarFn {
    src: String,
    expr: Expr,
}

impl ScalarFn {
    pub fn parse(src: &str) -> Result<Self> {
        Ok(Self {
            src: src.trim().to_string(),
            expr: Expr::parse(src)?,
        })
    }

    pub fn eval(&self, x: &[f64], t: f64) -> f64 {
        self.expr.eval(x, t)
    }

    pub fn source(&self) -> &str {
        &self.src
    }

    pub fn expr(&self) -> &Expr {
        &self.expr
    }
}

impl fmt::Debug for ScalarFn {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "ScalarFn({:?})", self.src)
    }
}

impl Serialize for ScalarFn {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.src)
    }
}

#[derive(Debug, Clone)]
pub struct SubsystemSpec {
    index: usize,
    order: usize,
    gain: f64,
    nominal: ScalarFn,
    interconnections: BTreeMap<usize, ScalarFn>,
    true_uncertainty: ScalarFn,
    bounding: ScalarFn,
    approximator: RbfConfig,
}

impl SubsystemSpec {
    /// `index` and neighbor keys are 0-based.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        index: usize,
        order: usize,
        gain: f64,
        nominal: ScalarFn,
        interconnections: BTreeMap<usize, ScalarFn>,
        true_uncertainty: ScalarFn,
        bounding: ScalarFn,
        approximator: RbfConfig,
    ) -> Result<Self> {
        let i = index + 1;
        if order == 0 {
            return Err(config_err(format!("subsystem {i}: order must be >= 1")));
        }
        if !(gain > 1.0) || !gain.is_finite() {
            return Err(config_err(format!(
                "subsystem {i}: gain must satisfy gamma > 1 (got {gain})"
            )));
        }
        for (what, f) in [
            ("nominal", &nominal),
            ("uncertainty", &true_uncertainty),
            ("bounding", &bounding),
        ] {
            if f.expr.arity() > order {
                return Err(config_err(format!(
                    "subsystem {i}: {what} function uses x{} but order is {order}",
                    f.expr.arity()
                )));
            }
        }
        if interconnections.contains_key(&index) {
            return Err(config_err(format!("subsystem {i}: cannot be its own neighbor")));
        }
        approximator.validate()?;
        if approximator.dim() != order {
            return Err(config_err(format!(
                "subsystem {i}: RBF centers have dimension {} but order is {order}",
                approximator.dim()
            )));
        }
        Ok(Self {
            index,
            order,
            gain,
            nominal,
            interconnections,
            true_uncertainty,
            bounding,
            approximator,
        })
    }

    pub fn index(&self) -> usize {
        self.index
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn gain(&self) -> f64 {
        self.gain
    }

    pub fn nominal(&self) -> &ScalarFn {
        &self.nominal
    }

    pub fn interconnections(&self) -> &BTreeMap<usize, ScalarFn> {
        &self.interconnections
    }

    pub fn bounding(&self) -> &ScalarFn {
        &self.bounding
    }

    pub fn approximator(&self) -> &RbfConfig {
        &self.approximator
    }

    /// Simulation ground truth. Controller code works on [`ControllerView`].
    pub fn true_uncertainty(&self) -> &ScalarFn {
        &self.true_uncertainty
    }

    pub fn controller_view(&self) -> ControllerView<'_> {
        ControllerView { spec: self }
    }
}

/// What a distributed controller may know about its subsystem: everything but
/// the true uncertainty `η_i`.
#[derive(Debug, Clone, Copy)]
pub struct ControllerView<'a> {
    spec: &'a SubsystemSpec,
}

impl<'a> ControllerView<'a> {
    pub fn index(&self) -> usize {
        self.spec.index
    }

    pub fn order(&self) -> usize {
        self.spec.order
    }

    pub fn gain(&self) -> f64 {
        self.spec.gain
    }

    pub fn nominal(&self) -> &'a ScalarFn {
        &self.spec.nominal
    }

    pub fn interconnections(&self) -> &'a BTreeMap<usize, ScalarFn> {
        &self.spec.interconnections
    }

    pub fn bounding(&self) -> &'a ScalarFn {
        &self.spec.bounding
    }

    pub fn approximator(&self) -> &'a RbfConfig {
        &self.spec.approximator
    }
}

#[derive(Debug, Clone)]
pub struct InterconnectedModel {
    subsystems: Vec<SubsystemSpec>,
    neighbors: Vec<Vec<usize>>,
    state_box: Vec<Vec<(f64, f64)>>,
}

impl InterconnectedModel {
    pub fn new(subsystems: Vec<SubsystemSpec>) -> Result<Self> {
        let boxes = subsystems
            .iter()
            .map(|s| vec![DEFAULT_BOX; s.order])
            .collect();
        Self::with_box(subsystems, boxes)
    }

    pub fn with_box(subsystems: Vec<SubsystemSpec>, state_box: Vec<Vec<(f64, f64)>>) -> Result<Self> {
        let m = subsystems.len();
        if m == 0 {
            return Err(config_err("model needs at least one subsystem"));
        }
        if state_box.len() != m {
            return Err(config_err("state box must have one entry per subsystem"));
        }
        let mut neighbors = Vec::with_capacity(m);
        for (pos, s) in subsystems.iter().enumerate() {
            if s.index != pos {
                return Err(config_err(format!(
                    "subsystem at position {} carries index {}",
                    pos + 1,
                    s.index + 1
                )));
            }
            if state_box[pos].len() != s.order
                || state_box[pos].iter().any(|(lo, hi)| !(hi > lo))
            {
                return Err(config_err(format!(
                    "subsystem {}: state box must give lo < hi for each of {} coordinates",
                    pos + 1,
                    s.order
                )));
            }
            for (&j, chi) in &s.interconnections {
                if j >= m {
                    return Err(config_err(format!(
                        "subsystem {}: neighbor {} does not exist (M = {m})",
                        pos + 1,
                        j + 1
                    )));
                }
                if chi.expr.arity() > subsystems[j].order {
                    return Err(config_err(format!(
                        "subsystem {}: interconnection from {} uses x{} but that subsystem has order {}",
                        pos + 1,
                        j + 1,
                        chi.expr.arity(),
                        subsystems[j].order
                    )));
                }
            }
            neighbors.push(s.interconnections.keys().copied().collect());
        }
        let model = Self {
            subsystems,
            neighbors,
            state_box,
        };
        model.check_bounding_positive()?;
        Ok(model)
    }

    /// Spot-check Ω_i > 0 on the box corners, center and a seeded sample.
    fn check_bounding_positive(&self) -> Result<()> {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for (s, bx) in self.subsystems.iter().zip(&self.state_box) {
            let mut probes: Vec<Vec<f64>> = vec![bx.iter().map(|(l, h)| 0.5 * (l + h)).collect()];
            probes.push(bx.iter().map(|b| b.0).collect());
            probes.push(bx.iter().map(|b| b.1).collect());
            for _ in 0..64 {
                probes.push(bx.iter().map(|&(l, h)| rng.gen_range(l..h)).collect());
            }
            for p in probes {
                let v = s.bounding.eval(&p, 0.0);
                if !(v > 0.0) {
                    return Err(config_err(format!(
                        "subsystem {}: bounding function must be positive, got {v} at {p:?}",
                        s.index + 1
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.subsystems.len()
    }

    pub fn is_empty(&self) -> bool {
        self.subsystems.is_empty()
    }

    pub fn subsystems(&self) -> &[SubsystemSpec] {
        &self.subsystems
    }

    pub fn subsystem(&self, i: usize) -> &SubsystemSpec {
        &self.subsystems[i]
    }

    /// `N_i`, sorted.
    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.neighbors[i]
    }

    pub fn topology(&self) -> &[Vec<usize>] {
        &self.neighbors
    }

    pub fn state_box(&self, i: usize) -> &[(f64, f64)] {
        &self.state_box[i]
    }

    pub fn max_order(&self) -> usize {
        self.subsystems.iter().map(|s| s.order).max().unwrap_or(0)
    }

    /// Offsets of each subsystem's block in a flattened state vector.
    pub fn offsets(&self) -> Vec<usize> {
        let mut acc = 0;
        self.subsystems
            .iter()
            .map(|s| {
                let o = acc;
                acc += s.order;
                o
            })
            .collect()
    }

    pub fn total_order(&self) -> usize {
        self.subsystems.iter().map(|s| s.order).sum()
    }
}

/// `β_i = Σ_{j∈N_i} χ_{i,j}(x_j)` with `states[j]` holding subsystem j's state.
pub fn eval_interconnection<S: AsRef<[f64]>>(
    model: &InterconnectedModel,
    i: usize,
    states: &[S],
) -> Result<f64> {
    eval_interconnection_with(model.subsystem(i).controller_view(), |j| {
        states.get(j).map(AsRef::as_ref).filter(|s| !s.is_empty())
    })
}

/// Same as [`eval_interconnection`], with neighbor states supplied by a lookup.
pub fn eval_interconnection_with<'s>(
    view: ControllerView<'_>,
    mut lookup: impl FnMut(usize) -> Option<&'s [f64]>,
) -> Result<f64> {
    let mut beta = 0.0;
    for (&j, chi) in view.interconnections() {
        let xj = lookup(j).ok_or(Error::MissingNeighbor {
            subsystem: view.index() + 1,
            neighbor: j + 1,
        })?;
        beta += chi.eval(xj, 0.0);
    }
    Ok(beta)
}

/// Open-loop derivative of one subsystem; writes `n_i` components into `out`.
pub fn subsystem_derivative(
    spec: &SubsystemSpec,
    x: &[f64],
    u: f64,
    beta: f64,
    t: f64,
    out: &mut [f64],
) -> Result<()> {
    let n = spec.order;
    if x.len() != n || out.len() != n {
        return Err(Error::Dimension {
            expected: n,
            got: x.len().min(out.len()),
        });
    }
    out[..n - 1].copy_from_slice(&x[1..]);
    let last = spec.nominal.eval(x, t) + u + spec.true_uncertainty.eval(x, t) + beta;
    if !last.is_finite() {
        return Err(Error::NonFinite {
            what: "dynamics",
            subsystem: spec.index + 1,
            t,
        });
    }
    out[n - 1] = last;
    Ok(())
}

/// Sampled sum-norm Lipschitz estimate of `f` on `bbox`.
///
/// Half of the `samples` pairs are drawn independently over the box, the other
/// half as local perturbations with log-uniform radius so steep regions are
/// probed at small separations.
pub fn estimate_lipschitz(
    f: impl Fn(&[f64]) -> f64,
    bbox: &[(f64, f64)],
    samples: usize,
    seed: u64,
) -> Result<f64> {
    if samples < 2 {
        return Err(config_err("estimate_lipschitz needs at least 2 samples"));
    }
    if bbox.is_empty() || bbox.iter().any(|(lo, hi)| !(hi > lo)) {
        return Err(config_err("estimate_lipschitz needs a non-degenerate box"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dim = bbox.len();
    let width = bbox.iter().map(|(l, h)| h - l).fold(0.0, f64::max);
    let mut x = vec![0.0; dim];
    let mut y = vec![0.0; dim];
    let mut best = 0.0f64;
    for s in 0..samples {
        for (xk, &(lo, hi)) in x.iter_mut().zip(bbox) {
            *xk = rng.gen_range(lo..hi);
        }
        if s % 2 == 0 {
            for (yk, &(lo, hi)) in y.iter_mut().zip(bbox) {
                *yk = rng.gen_range(lo..hi);
            }
        } else {
            let radius = width * 10f64.powf(rng.gen_range(-7.0..0.0));
            for ((yk, xk), &(lo, hi)) in y.iter_mut().zip(&x).zip(bbox) {
                *yk = (xk + radius * rng.gen_range(-1.0..1.0)).clamp(lo, hi);
            }
        }
        let fx = f(&x);
        let fy = f(&y);
        if !fx.is_finite() || !fy.is_finite() {
            return Err(config_err(format!(
                "function is not finite on the sampling box (at {x:?} or {y:?})"
            )));
        }
        let dist: f64 = x.iter().zip(&y).map(|(a, b)| (a - b).abs()).sum();
        if dist > 0.0 {
            best = best.max((fx - fy).abs() / dist);
        }
    }
    Ok(best)
}

/// Lipschitz and norm-bound constants, one entry per subsystem.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LipschitzBundle {
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
    pub pi: Vec<f64>,
    pub omega: Vec<f64>,
    pub theta_bar: f64,
    pub lambda_bar: f64,
    /// Entries obtained by sampling rather than by structural certificate.
    pub estimated: Vec<String>,
}

impl LipschitzBundle {
    pub fn validate(&self, m: usize) -> Result<()> {
        for (name, v) in [
            ("L_alpha", &self.alpha),
            ("L_beta", &self.beta),
            ("L_pi", &self.pi),
            ("L_Omega", &self.omega),
        ] {
            if v.len() != m {
                return Err(config_err(format!(
                    "{name} has {} entries, expected one per subsystem ({m})",
                    v.len()
                )));
            }
            if v.iter().any(|x| !(*x >= 0.0) || !x.is_finite()) {
                return Err(config_err(format!("{name} entries must be finite and >= 0")));
            }
        }
        if !(self.theta_bar > 0.0) || !(self.lambda_bar > 0.0) {
            return Err(config_err("theta_bar and lambda_bar must be > 0"));
        }
        Ok(())
    }

    /// Certificates where the function structure allows, seeded sampling on the
    /// state box otherwise.
    pub fn derive(
        model: &InterconnectedModel,
        theta_bar: f64,
        lambda_bar: f64,
        samples: usize,
        seed: u64,
    ) -> Result<Self> {
        let mut b = Self {
            alpha: Vec::new(),
            beta: Vec::new(),
            pi: Vec::new(),
            omega: Vec::new(),
            theta_bar,
            lambda_bar,
            estimated: Vec::new(),
        };
        for (i, s) in model.subsystems().iter().enumerate() {
            let n = s.order;
            let bx = model.state_box(i);
            let scalar = |f: &ScalarFn, label: String, b: &mut Self| -> Result<f64> {
                match f.expr.lipschitz_certificate(n) {
                    Some(l) => Ok(l),
                    None => {
                        b.estimated.push(label);
                        estimate_lipschitz(|x| f.eval(x, 0.0), bx, samples, seed)
                    }
                }
            };
            let la = scalar(&s.nominal, format!("L_alpha_{}", i + 1), &mut b)?;
            let lo = scalar(&s.bounding, format!("L_Omega_{}", i + 1), &mut b)?;
            b.alpha.push(la);
            b.omega.push(lo);
            b.pi.push(s.approximator.lipschitz());

            let mut lb = 0.0f64;
            let mut sampled = false;
            for (&j, chi) in &s.interconnections {
                let nj = model.subsystem(j).order;
                let l = match chi.expr.lipschitz_certificate(nj) {
                    Some(l) => l,
                    None => {
                        sampled = true;
                        estimate_lipschitz(|x| chi.eval(x, 0.0), model.state_box(j), samples, seed)?
                    }
                };
                lb = lb.max(l);
            }
            if sampled {
                b.estimated.push(format!("L_beta_{}", i + 1));
            }
            b.beta.push(lb);
        }
        b.validate(model.len())?;
        Ok(b)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn f(src: &str) -> ScalarFn {
        ScalarFn::parse(src).unwrap()
    }

    fn simple(index: usize, order: usize, nb: &[(usize, &str)]) -> SubsystemSpec {
        SubsystemSpec::new(
            index,
            order,
            2.0,
            f("0"),
            nb.iter().map(|(j, s)| (*j, f(s))).collect(),
            f("0"),
            f("1"),
            RbfConfig::default_for(order).unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn rejects_invalid_specs() {
        let rbf = RbfConfig::default_for(2).unwrap();
        let mk = |order, gain, nb: BTreeMap<usize, ScalarFn>, idx| {
            SubsystemSpec::new(idx, order, gain, f("0"), nb, f("0"), f("1"), rbf.clone())
        };
        assert!(mk(2, 1.0, BTreeMap::new(), 0).is_err());
        assert!(mk(0, 2.0, BTreeMap::new(), 0).is_err());
        assert!(mk(2, 2.0, [(0, f("x1"))].into(), 0).is_err());
        assert!(SubsystemSpec::new(0, 1, 2.0, f("x2"), BTreeMap::new(), f("0"), f("1"), RbfConfig::default_for(1).unwrap()).is_err());
        // RBF dimension must match order.
        assert!(mk(1, 2.0, BTreeMap::new(), 0).is_err());
    }

    #[test]
    fn model_validation() {
        assert!(InterconnectedModel::new(vec![]).is_err());
        let bad = simple(0, 2, &[(3, "x1")]);
        assert!(InterconnectedModel::new(vec![bad]).is_err());
        let neg = SubsystemSpec::new(0, 1, 2.0, f("0"), BTreeMap::new(), f("0"), f("x1"), RbfConfig::default_for(1).unwrap()).unwrap();
        assert!(InterconnectedModel::new(vec![neg]).is_err());
        let m = InterconnectedModel::new(vec![simple(0, 2, &[(1, "x1")]), simple(1, 1, &[])]).unwrap();
        assert_eq!(m.neighbors(0), &[1]);
        assert_eq!(m.offsets(), vec![0, 2]);
        assert_eq!(m.total_order(), 3);
        // Interconnection that reads beyond the neighbor's order.
        assert!(InterconnectedModel::new(vec![simple(0, 2, &[(1, "x2")]), simple(1, 1, &[])]).is_err());
    }

    #[test]
    fn interconnection_sums_and_reports_missing() {
        let m = InterconnectedModel::new(vec![
            simple(0, 1, &[(1, "2*x1"), (2, "x1 + 1")]),
            simple(1, 1, &[]),
            simple(2, 1, &[]),
        ])
        .unwrap();
        let states = vec![vec![0.0], vec![3.0], vec![4.0]];
        assert_eq!(eval_interconnection(&m, 0, &states).unwrap(), 11.0);
        assert_eq!(eval_interconnection(&m, 1, &states).unwrap(), 0.0);
        let short = vec![vec![0.0], vec![3.0]];
        assert_eq!(
            eval_interconnection(&m, 0, &short),
            Err(Error::MissingNeighbor { subsystem: 1, neighbor: 3 })
        );
    }

    #[test]
    fn derivative_chain_and_overflow() {
        let s = simple(0, 2, &[]);
        let mut out = [0.0; 2];
        subsystem_derivative(&s, &[1.0, 5.0], 0.0, 0.0, 0.0, &mut out).unwrap();
        assert_eq!(out, [5.0, 0.0]);
        let hot = SubsystemSpec::new(0, 1, 2.0, f("exp(x1)"), BTreeMap::new(), f("0"), f("1"), RbfConfig::default_for(1).unwrap()).unwrap();
        let mut o = [0.0];
        assert!(matches!(
            subsystem_derivative(&hot, &[1000.0], 0.0, 0.0, 2.5, &mut o),
            Err(Error::NonFinite { subsystem: 1, t, .. }) if t == 2.5
        ));
        assert!(matches!(
            subsystem_derivative(&s, &[1.0], 0.0, 0.0, 0.0, &mut out),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn lipschitz_estimates() {
        let c = estimate_lipschitz(|_| 3.0, &[(-1.0, 1.0)], 1000, 1).unwrap();
        assert_eq!(c, 0.0);
        let lin = estimate_lipschitz(|x| 2.0 * x[0], &[(-1.0, 1.0)], 1000, 1).unwrap();
        assert!(lin > 0.0 && lin <= 2.0 + 1e-12);
        assert!((lin - 2.0).abs() < 1e-9);
        let pi = std::f64::consts::PI;
        let s = estimate_lipschitz(|x| x[0].sin(), &[(-pi, pi)], 100_000, 7).unwrap();
        assert!((s - 1.0).abs() < 0.05, "{s}");
        assert!(s <= 1.0 + 1e-12);
        assert!(estimate_lipschitz(|x| x[0], &[(-1.0, 1.0)], 1, 0).is_err());
        assert!(estimate_lipschitz(|x| x[0], &[(1.0, 1.0)], 10, 0).is_err());
        assert!(estimate_lipschitz(|_| f64::NAN, &[(-1.0, 1.0)], 10, 0).is_err());
        // Deterministic in the seed.
        let a = estimate_lipschitz(|x| (3.0 * x[0]).cos() * x[1], &[(-1.0, 1.0), (0.0, 2.0)], 5000, 11).unwrap();
        let b = estimate_lipschitz(|x| (3.0 * x[0]).cos() * x[1], &[(-1.0, 1.0), (0.0, 2.0)], 5000, 11).unwrap();
        assert_eq!(a.to_bits(), b.to_bits());
    }

    #[test]
    fn derived_bundle_uses_certificates() {
        let m = InterconnectedModel::new(vec![
            SubsystemSpec::new(0, 2, 2.0, f("-3*sin(x1) - 0.5*x2"), [(1, f("sin(x1)"))].into(), f("0"), f("1 + abs(x1) + abs(x2)"), RbfConfig::default_for(2).unwrap()).unwrap(),
            SubsystemSpec::new(1, 2, 2.0, f("0"), [(0, f("x1*x2"))].into(), f("0"), f("1 + abs(x1) + abs(x2)"), RbfConfig::default_for(2).unwrap()).unwrap(),
        ])
        .unwrap();
        let b = LipschitzBundle::derive(&m, 2.0, 3.0, 2000, 0).unwrap();
        assert_eq!(b.alpha, vec![3.0, 0.0]);
        assert_eq!(b.omega, vec![1.0, 1.0]);
        assert_eq!(b.beta[0], 1.0);
        // x1*x2 on [-5,5]^2 has sum-norm slope up to 5.
        assert!(b.beta[1] > 4.0 && b.beta[1] <= 5.0 + 1e-9);
        assert_eq!(b.estimated, vec!["L_beta_2".to_string()]);
        assert_eq!(b.pi[0], m.subsystem(0).approximator().lipschitz());
    }
}
