//! Fixed-step closed-loop simulation.
//!
//! Plant states advance by classical RK4 with the control held over each
//! control period. Estimates advance by explicit Euler on the rates computed at
//! the last control instant and are projected after every step.

mod history;
mod trajectory;

pub use history::{HistoryBuffer, HistoryRecord, Layout};
pub use trajectory::{diagnostics, mse, EventSummary, Mse, Termination, Trajectory};

use serde::Serialize;

use crate::anomaly::{
    classify, fresh_inputs, route_in_event, AnomalySchedule, EstimatorReplay, FreshSignals,
    Health, HealthPartition,
};
use crate::backstep::{
    build_transform, control, estimator_rates, project_in_place, ControlParts, EstimatorGains,
    EstimatorState, ProjectionBounds, TransformTable,
};
use crate::error::{config_err, Error, Result};
use crate::plant::{eval_interconnection_with, subsystem_derivative, InterconnectedModel};

pub const DEFAULT_DT: f64 = 1e-3;
pub const DEFAULT_DIVERGENCE_THRESHOLD: f64 = 1e6;
/// Guard on `Σ z_i` below which the anomaly ratio is reported as 0.
pub const RATIO_EPS: f64 = 1e-9;

/// Optimal weights of a synthetic scenario; enables the full Lyapunov column `V_M`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct KnownOptimum {
    pub theta: Vec<Vec<f64>>,
    pub lambda: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct SimConfig {
    pub model: InterconnectedModel,
    pub initial_state: Vec<Vec<f64>>,
    pub theta0: Vec<Vec<f64>>,
    pub lambda0: Vec<f64>,
    pub schedule: AnomalySchedule,
    pub dt: f64,
    pub control_period: f64,
    pub t_end: f64,
    pub gains: EstimatorGains,
    pub bounds: ProjectionBounds,
    pub mode: &'static dyn EstimatorReplay,
    pub divergence_threshold: f64,
    pub seed: u64,
    pub known_optimum: Option<KnownOptimum>,
}

/// Snap `x` to the nearest integer when it is within a relative 1e-9 of it.
pub(crate) fn grid_ceil(x: f64) -> f64 {
    let r = x.round();
    if (x - r).abs() <= 1e-9 * x.abs().max(1.0) {
        r
    } else {
        x.ceil()
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        let m = self.model.len();
        if !(self.dt > 0.0) || !self.dt.is_finite() {
            return Err(config_err(format!("dt must be > 0 (got {})", self.dt)));
        }
        if !(self.control_period >= self.dt * (1.0 - 1e-9)) {
            return Err(config_err(format!(
                "control period {} must be >= dt {}",
                self.control_period, self.dt
            )));
        }
        let ratio = self.control_period / self.dt;
        if (ratio - ratio.round()).abs() > 1e-9 * ratio {
            return Err(config_err(format!(
                "control period {} must be a multiple of dt {}",
                self.control_period, self.dt
            )));
        }
        if !(self.t_end > 0.0) || !self.t_end.is_finite() {
            return Err(config_err("t_end must be > 0"));
        }
        if !(self.divergence_threshold > 0.0) {
            return Err(config_err("divergence threshold must be > 0"));
        }
        self.gains.validate()?;
        if !(self.bounds.theta_bar > 0.0) || !(self.bounds.lambda_bar > 0.0) {
            return Err(config_err("theta_bar and lambda_bar must be > 0"));
        }
        self.schedule.check_targets(m)?;
        for (h, e) in self.schedule.events().iter().enumerate() {
            if e.delay < self.dt * (1.0 - 1e-9) {
                return Err(config_err(format!(
                    "anomaly {}: delay {} must be >= dt {}",
                    h + 1,
                    e.delay,
                    self.dt
                )));
            }
        }
        let check = |what: &str, got: usize, want: usize, i: usize| {
            if got != want {
                Err(config_err(format!(
                    "subsystem {}: {what} has length {got}, expected {want}",
                    i + 1
                )))
            } else {
                Ok(())
            }
        };
        if self.initial_state.len() != m || self.theta0.len() != m || self.lambda0.len() != m {
            return Err(config_err(format!(
                "initial state and estimates must be given for all {m} subsystems"
            )));
        }
        for (i, s) in self.model.subsystems().iter().enumerate() {
            check("initial state", self.initial_state[i].len(), s.order(), i)?;
            check("theta0", self.theta0[i].len(), s.approximator().count(), i)?;
        }
        if let Some(k) = &self.known_optimum {
            if k.theta.len() != m || k.lambda.len() != m {
                return Err(config_err("known optimum must cover every subsystem"));
            }
            for (i, s) in self.model.subsystems().iter().enumerate() {
                check("known theta", k.theta[i].len(), s.approximator().count(), i)?;
            }
        }
        Ok(())
    }

    pub fn steps(&self) -> usize {
        grid_ceil(self.t_end / self.dt) as usize
    }

    pub fn control_every(&self) -> usize {
        ((self.control_period / self.dt).round() as usize).max(1)
    }

    /// `[first, last)` step indices of each event window.
    pub fn event_steps(&self) -> Vec<(usize, usize)> {
        self.schedule
            .events()
            .iter()
            .map(|e| {
                (
                    grid_ceil(e.start / self.dt) as usize,
                    grid_ceil(e.end() / self.dt) as usize,
                )
            })
            .collect()
    }

    pub fn history_capacity(&self) -> usize {
        let longest = self
            .schedule
            .events()
            .iter()
            .map(|e| e.delay + e.duration)
            .fold(0.0, f64::max);
        (longest / self.dt).ceil() as usize + 2
    }
}

/// Controller-side evaluation at one control instant.
struct Evaluation {
    u: f64,
    parts: ControlParts,
    theta_rate: Vec<f64>,
    lambda_rate: f64,
    law: f64,
}

struct Runner<'c> {
    cfg: &'c SimConfig,
    tables: Vec<TransformTable>,
    layout: Layout,
    x: Vec<Vec<f64>>,
    est: Vec<EstimatorState>,
    held: Vec<Evaluation>,
    history: HistoryBuffer,
    flat: Vec<f64>,
    scratch: [Vec<f64>; 5],
}

fn first_exceeding(x: &[Vec<f64>], threshold: f64) -> Option<usize> {
    x.iter()
        .position(|xi| xi.iter().any(|v| !v.is_finite() || v.abs() > threshold))
}

impl<'c> Runner<'c> {
    fn new(cfg: &'c SimConfig) -> Result<Self> {
        let model = &cfg.model;
        let tables = model
            .subsystems()
            .iter()
            .map(|s| build_transform(s.order(), s.gain()))
            .collect::<Result<Vec<_>>>()?;
        let orders: Vec<usize> = model.subsystems().iter().map(|s| s.order()).collect();
        let p: Vec<usize> = cfg.theta0.iter().map(Vec::len).collect();
        let layout = Layout::new(&orders, &p);
        let est = cfg
            .theta0
            .iter()
            .zip(&cfg.lambda0)
            .map(|(th, &l)| {
                let mut e = EstimatorState {
                    theta_hat: th.clone(),
                    lambda_hat: l,
                    bounds: cfg.bounds,
                };
                project_in_place(&mut e);
                e
            })
            .collect();
        let width = layout.state_width();
        Ok(Self {
            tables,
            history: HistoryBuffer::new(cfg.dt, cfg.history_capacity(), layout.clone()),
            layout,
            x: cfg.initial_state.clone(),
            est,
            held: Vec::new(),
            flat: vec![0.0; width],
            scratch: std::array::from_fn(|_| vec![0.0; width]),
            cfg,
        })
    }

    fn evaluate(
        &self,
        i: usize,
        inputs: crate::anomaly::ControllerInputs,
        fresh_law: Option<f64>,
    ) -> Result<Evaluation> {
        let spec = self.cfg.model.subsystem(i);
        let view = spec.controller_view();
        let table = &self.tables[i];
        let beta = eval_interconnection_with(view, |j| inputs.neighbor(j))?;
        let est = EstimatorState {
            theta_hat: inputs.theta_hat,
            lambda_hat: inputs.lambda_hat,
            bounds: self.cfg.bounds,
        };
        let (u, parts) = control(view, table, &inputs.local, beta, &est)?;
        let (theta_rate, lambda_rate) = estimator_rates(view, table, &inputs.local, self.cfg.gains)?;
        Ok(Evaluation {
            u,
            parts,
            theta_rate,
            lambda_rate,
            law: fresh_law.unwrap_or(u),
        })
    }

    /// Control law on fresh signals only.
    fn fresh_law(&self, i: usize, fresh: FreshSignals<'_>) -> Result<f64> {
        let inputs = fresh_inputs(self.cfg.model.topology(), i, fresh);
        Ok(self.evaluate(i, inputs, None)?.u)
    }

    fn control_instant(
        &mut self,
        t: f64,
        event: Option<(usize, &HealthPartition)>,
    ) -> Result<()> {
        let theta: Vec<Vec<f64>> = self.est.iter().map(|e| e.theta_hat.clone()).collect();
        let lambda: Vec<f64> = self.est.iter().map(|e| e.lambda_hat).collect();
        let fresh = FreshSignals {
            states: &self.x,
            theta_hat: &theta,
            lambda_hat: &lambda,
        };
        let topology = self.cfg.model.topology();
        let mut held = Vec::with_capacity(self.x.len());
        for i in 0..self.x.len() {
            let ev = match event {
                None => self.evaluate(i, fresh_inputs(topology, i, fresh), None)?,
                Some((h, partition)) => {
                    let e = &self.cfg.schedule.events()[h];
                    let inputs = route_in_event(
                        topology,
                        partition,
                        h,
                        e,
                        i,
                        t,
                        fresh,
                        &self.history,
                        self.cfg.mode,
                    )?;
                    let law = if inputs.class == Health::H2 {
                        None
                    } else {
                        Some(self.fresh_law(i, fresh)?)
                    };
                    self.evaluate(i, inputs, law)?
                }
            };
            held.push(ev);
        }
        self.held = held;
        Ok(())
    }

    fn derivative(&self, t: f64, state: &[f64], u: &[f64], out: &mut [f64]) -> Result<()> {
        let model = &self.cfg.model;
        for (i, spec) in model.subsystems().iter().enumerate() {
            let r = self.layout.state_range(i);
            let beta = eval_interconnection_with(spec.controller_view(), |j| {
                Some(&state[self.layout.state_range(j)])
            })?;
            subsystem_derivative(spec, &state[r.clone()], u[i], beta, t, &mut out[r])?;
        }
        Ok(())
    }

    /// One RK4 step of the plant under the held controls.
    fn advance_plant(&mut self, t: f64) -> Result<()> {
        let dt = self.cfg.dt;
        let u: Vec<f64> = self.held.iter().map(|e| e.u).collect();
        let mut flat = std::mem::take(&mut self.flat);
        for (i, xi) in self.x.iter().enumerate() {
            flat[self.layout.state_range(i)].copy_from_slice(xi);
        }
        let [k1, k2, k3, k4, tmp] = &mut self.scratch;
        let mut k1v = std::mem::take(k1);
        let mut k2v = std::mem::take(k2);
        let mut k3v = std::mem::take(k3);
        let mut k4v = std::mem::take(k4);
        let mut tmpv = std::mem::take(tmp);
        let result = (|| -> Result<()> {
            self.derivative(t, &flat, &u, &mut k1v)?;
            for ((o, x), k) in tmpv.iter_mut().zip(&flat).zip(&k1v) {
                *o = x + 0.5 * dt * k;
            }
            self.derivative(t + 0.5 * dt, &tmpv, &u, &mut k2v)?;
            for ((o, x), k) in tmpv.iter_mut().zip(&flat).zip(&k2v) {
                *o = x + 0.5 * dt * k;
            }
            self.derivative(t + 0.5 * dt, &tmpv, &u, &mut k3v)?;
            for ((o, x), k) in tmpv.iter_mut().zip(&flat).zip(&k3v) {
                *o = x + dt * k;
            }
            self.derivative(t + dt, &tmpv, &u, &mut k4v)?;
            Ok(())
        })();
        if result.is_ok() {
            for (idx, x) in flat.iter_mut().enumerate() {
                *x += dt / 6.0 * (k1v[idx] + 2.0 * k2v[idx] + 2.0 * k3v[idx] + k4v[idx]);
            }
            for (i, xi) in self.x.iter_mut().enumerate() {
                xi.copy_from_slice(&flat[self.layout.state_range(i)]);
            }
        }
        self.scratch = [k1v, k2v, k3v, k4v, tmpv];
        self.flat = flat;
        result
    }

    fn advance_estimates(&mut self) {
        let dt = self.cfg.dt;
        for (e, ev) in self.est.iter_mut().zip(&self.held) {
            for (th, r) in e.theta_hat.iter_mut().zip(&ev.theta_rate) {
                *th += dt * r;
            }
            e.lambda_hat += dt * ev.lambda_rate;
            project_in_place(e);
        }
    }
}

/// Column layout shared by every trajectory of a model.
pub(crate) fn columns(m: usize, orders: &[usize], known: bool) -> (Vec<String>, usize) {
    let mut c = vec!["t".to_string(), "J".to_string()];
    for (i, &n) in orders.iter().enumerate() {
        for k in 0..n {
            c.push(format!("x_{}_{}", i + 1, k + 1));
        }
    }
    for prefix in ["u", "u1", "u2", "u3", "theta_norm", "lambda"] {
        for i in 0..m {
            c.push(format!("{prefix}_{}", i + 1));
        }
    }
    c.extend(["z_sum", "e_h", "ratio", "V_z"].map(String::from));
    let csv = c.len();
    for prefix in ["zsum", "e", "law"] {
        for i in 0..m {
            c.push(format!("{prefix}_{}", i + 1));
        }
    }
    if known {
        c.push("V_M".into());
    }
    (c, csv)
}

/// Run the closed loop to `t_end` or divergence.
pub fn run(cfg: &SimConfig) -> Result<Trajectory> {
    cfg.validate()?;
    let m = cfg.model.len();
    let mut r = Runner::new(cfg)?;
    let orders: Vec<usize> = cfg.model.subsystems().iter().map(|s| s.order()).collect();
    let (cols, csv_columns) = columns(m, &orders, cfg.known_optimum.is_some());
    let mut traj = Trajectory::new(cols, csv_columns, cfg.dt, cfg.control_every());
    let windows = cfg.event_steps();
    let partitions: Vec<HealthPartition> = cfg
        .schedule
        .events()
        .iter()
        .map(|e| classify(cfg.model.topology(), &e.targets))
        .collect();
    let steps = cfg.steps();
    let every = cfg.control_every();
    let mut row = Vec::with_capacity(traj.width());
    let mut z: Vec<Vec<f64>> = vec![Vec::new(); m];

    let mut status = Termination::Completed;
    for k in 0..=steps {
        let t = k as f64 * cfg.dt;
        let active = windows.iter().position(|&(a, b)| k >= a && k < b);
        for ((zi, table), xi) in z.iter_mut().zip(&r.tables).zip(&r.x) {
            *zi = table.to_z(xi)?;
        }
        {
            let (x, est, layout) = (&r.x, &r.est, &r.layout);
            let zr = &z;
            r.history.push_with(k as u64, |rec| {
                for i in 0..m {
                    let sr = layout.state_range(i);
                    rec.states[sr.clone()].copy_from_slice(&x[i]);
                    rec.z[sr].copy_from_slice(&zr[i]);
                    rec.theta[layout.theta_range(i)].copy_from_slice(&est[i].theta_hat);
                    rec.lambda[i] = est[i].lambda_hat;
                }
            });
        }
        if k % every == 0 {
            let event = active.map(|h| (h, &partitions[h]));
            match r.control_instant(t, event) {
                Ok(()) => {}
                Err(Error::NonFiniteControl { subsystem, .. }) => {
                    status = Termination::Diverged {
                        t,
                        subsystem: subsystem - 1,
                    };
                    break;
                }
                Err(e) => return Err(e),
            }
        }
        if let Some(rec) = r.history.last_mut() {
            for (i, ev) in r.held.iter().enumerate() {
                rec.applied[i] = ev.u;
                rec.law[i] = ev.law;
            }
        }

        let zsum: Vec<f64> = z.iter().map(|zi| zi.iter().map(|v| v.abs()).sum()).collect();
        let mut e_i = vec![0.0; m];
        if let Some(h) = active {
            let td = t - cfg.schedule.events()[h].delay;
            for (i, e) in e_i.iter_mut().enumerate() {
                let past = r.history.z(i, td).ok_or(Error::HistoryUnderrun {
                    event: h + 1,
                    needed: td,
                    earliest: crate::anomaly::HistoryView::earliest(&r.history),
                })?;
                *e = z[i].iter().zip(past.iter()).map(|(a, b)| (a - b).abs()).sum();
            }
        }
        let z_total: f64 = zsum.iter().sum();
        let e_h: f64 = e_i.iter().sum();
        let ratio = if z_total > RATIO_EPS { e_h / z_total } else { 0.0 };
        let v_z: f64 = 0.5 * z.iter().flatten().map(|v| v * v).sum::<f64>();

        row.clear();
        row.push(t);
        row.push(if active.is_some() { 1.0 } else { 0.0 });
        row.extend(r.x.iter().flatten());
        row.extend(r.held.iter().map(|e| e.u));
        row.extend(r.held.iter().map(|e| e.parts.u1));
        row.extend(r.held.iter().map(|e| e.parts.u2));
        row.extend(r.held.iter().map(|e| e.parts.u3));
        row.extend(r.est.iter().map(EstimatorState::theta_norm));
        row.extend(r.est.iter().map(|e| e.lambda_hat));
        row.extend([z_total, e_h, ratio, v_z]);
        row.extend(&zsum);
        row.extend(&e_i);
        row.extend(r.held.iter().map(|e| e.law));
        if let Some(opt) = &cfg.known_optimum {
            let mut v = v_z;
            for (i, e) in r.est.iter().enumerate() {
                let dth: f64 = opt.theta[i]
                    .iter()
                    .zip(&e.theta_hat)
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum();
                let dl = opt.lambda[i] - e.lambda_hat;
                v += 0.5 * (dth / cfg.gains.gamma + dl * dl / cfg.gains.zeta);
            }
            row.push(v);
        }
        traj.push_row(&row);

        if k == steps {
            break;
        }
        let t_next = (k + 1) as f64 * cfg.dt;
        match r.advance_plant(t) {
            Ok(()) => {}
            Err(Error::NonFinite { subsystem, .. }) => {
                status = Termination::Diverged {
                    t: t_next,
                    subsystem: subsystem - 1,
                };
                break;
            }
            Err(e) => return Err(e),
        }
        r.advance_estimates();
        if let Some(i) = first_exceeding(&r.x, cfg.divergence_threshold) {
            status = Termination::Diverged {
                t: t_next,
                subsystem: i,
            };
            break;
        }
    }
    traj.finish(status, r.history.lookups(), windows);
    Ok(traj)
}

/// Per-subsystem gains and table constants, handy for metadata.
pub fn transform_tables(model: &InterconnectedModel) -> Result<Vec<TransformTable>> {
    model
        .subsystems()
        .iter()
        .map(|s| build_transform(s.order(), s.gain()))
        .collect()
}
