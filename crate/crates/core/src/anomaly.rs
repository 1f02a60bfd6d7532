//! Replay-anomaly timeline, health classification and signal routing.
//!
//! During the `h`-th event the targeted subsystems receive measurements that
//! were eavesdropped `τ_h` seconds earlier. Each controller then sees a mix of
//! delayed and fresh signals depending on its health class:
//!
//! | class | local state | neighbor `j ∈ G_i` | neighbor `j ∈ F_i` | estimates |
//! |-------|-------------|--------------------|--------------------|-----------|
//! | B1/B2 | delayed     | delayed            | fresh              | per replay mode |
//! | H1    | fresh       | delayed            | fresh              | current   |
//! | H2    | fresh       | -                  | fresh              | current   |

use std::borrow::Cow;
use std::collections::{BTreeMap, BTreeSet};

use serde::Serialize;

use crate::error::{config_err, Error, Result};

/// Indices are 0-based internally.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AnomalyEvent {
    pub start: f64,
    pub duration: f64,
    pub delay: f64,
    pub targets: BTreeSet<usize>,
}

impl AnomalyEvent {
    pub fn end(&self) -> f64 {
        self.start + self.duration
    }

    pub fn contains(&self, t: f64) -> bool {
        t >= self.start && t < self.end()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct AnomalySchedule {
    events: Vec<AnomalyEvent>,
}

impl AnomalySchedule {
    pub fn new(events: Vec<AnomalyEvent>) -> Result<Self> {
        for (h, e) in events.iter().enumerate() {
            let n = h + 1;
            if !(e.duration > 0.0) || !e.duration.is_finite() {
                return Err(config_err(format!("anomaly {n}: duration must be > 0")));
            }
            if !(e.delay > 0.0) || !e.delay.is_finite() {
                return Err(config_err(format!("anomaly {n}: delay must be > 0")));
            }
            if e.delay > e.start {
                return Err(config_err(format!(
                    "anomaly {n}: delay {} exceeds start {}; the eavesdrop window would begin before t = 0",
                    e.delay, e.start
                )));
            }
            if e.targets.is_empty() {
                return Err(config_err(format!("anomaly {n}: target set is empty")));
            }
            if h > 0 {
                let prev = &events[h - 1];
                if !(e.start > prev.end()) {
                    return Err(config_err(format!(
                        "anomaly {n}: starts at {} before anomaly {h} ends at {} (resting time must be > 0)",
                        e.start,
                        prev.end()
                    )));
                }
            }
        }
        Ok(Self { events })
    }

    pub fn empty() -> Self {
        Self::default()
    }

    pub fn events(&self) -> &[AnomalyEvent] {
        &self.events
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    /// The unique event whose half-open window `[t_h, t_h + t_{d,h})` holds `t`.
    pub fn active(&self, t: f64) -> Option<(usize, &AnomalyEvent)> {
        self.events.iter().enumerate().find(|(_, e)| e.contains(t))
    }

    /// Anomaly flag `J(t)`.
    pub fn flag(&self, t: f64) -> u8 {
        u8::from(self.active(t).is_some())
    }

    /// Resting times `t_{r,h} = t_{h+1} − (t_h + t_{d,h})`.
    pub fn resting_times(&self) -> Vec<f64> {
        self.events
            .windows(2)
            .map(|w| w[1].start - w[0].end())
            .collect()
    }

    pub fn max_delay(&self) -> f64 {
        self.events.iter().map(|e| e.delay).fold(0.0, f64::max)
    }

    pub fn check_targets(&self, m: usize) -> Result<()> {
        for (h, e) in self.events.iter().enumerate() {
            if let Some(bad) = e.targets.iter().find(|&&i| i >= m) {
                return Err(config_err(format!(
                    "anomaly {}: target subsystem {} does not exist (M = {m})",
                    h + 1,
                    bad + 1
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Health {
    /// Anomalous, with anomalous neighbors.
    B1,
    /// Anomalous, no anomalous neighbors.
    B2,
    /// Healthy, with anomalous neighbors.
    H1,
    /// Healthy, no anomalous neighbors.
    H2,
}

impl Health {
    pub fn is_anomalous(self) -> bool {
        matches!(self, Health::B1 | Health::B2)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HealthPartition {
    pub b1: BTreeSet<usize>,
    pub b2: BTreeSet<usize>,
    pub h1: BTreeSet<usize>,
    pub h2: BTreeSet<usize>,
    /// `G_i = N_i ∩ B`.
    pub anomalous_neighbors: Vec<BTreeSet<usize>>,
    /// `F_i = N_i ∩ H`.
    pub healthy_neighbors: Vec<BTreeSet<usize>>,
}

impl HealthPartition {
    pub fn class_of(&self, i: usize) -> Health {
        if self.b1.contains(&i) {
            Health::B1
        } else if self.b2.contains(&i) {
            Health::B2
        } else if self.h1.contains(&i) {
            Health::H1
        } else {
            Health::H2
        }
    }
}

/// Split `{0..M}` into B1/B2/H1/H2 given the anomalous set and `N_i` lists.
pub fn classify(topology: &[Vec<usize>], targets: &BTreeSet<usize>) -> HealthPartition {
    let m = topology.len();
    let mut p = HealthPartition {
        b1: BTreeSet::new(),
        b2: BTreeSet::new(),
        h1: BTreeSet::new(),
        h2: BTreeSet::new(),
        anomalous_neighbors: Vec::with_capacity(m),
        healthy_neighbors: Vec::with_capacity(m),
    };
    for (i, nb) in topology.iter().enumerate() {
        let (g, f): (BTreeSet<usize>, BTreeSet<usize>) =
            nb.iter().partition(|j| targets.contains(j));
        let anomalous = targets.contains(&i);
        match (anomalous, g.is_empty()) {
            (true, false) => p.b1.insert(i),
            (true, true) => p.b2.insert(i),
            (false, false) => p.h1.insert(i),
            (false, true) => p.h2.insert(i),
        };
        p.anomalous_neighbors.push(g);
        p.healthy_neighbors.push(f);
    }
    p
}

/// Read access to recorded signals.
pub trait HistoryView {
    /// Earliest time covered by the record.
    fn earliest(&self) -> f64;
    fn state(&self, i: usize, t: f64) -> Option<Cow<'_, [f64]>>;
    fn estimates(&self, i: usize, t: f64) -> Option<(Cow<'_, [f64]>, f64)>;
}

/// Policy for the parameter estimates an anomalous controller uses.
pub trait EstimatorReplay: Send + Sync + std::fmt::Debug {
    fn name(&self) -> &'static str;
    fn description(&self) -> &'static str;

    /// Estimates fed to the control law of an anomalous subsystem `i` when its
    /// measurements are those of time `t_delayed`.
    fn estimates(
        &self,
        i: usize,
        t_delayed: f64,
        current: (&[f64], f64),
        history: &dyn HistoryView,
    ) -> Option<(Vec<f64>, f64)>;
}

/// Recorded `θ̂(t−τ)`, `λ̂(t−τ)` so the whole control law is replayed.
#[derive(Debug)]
pub struct Replayed;

/// Live `θ̂(t)`, `λ̂(t)` combined with the delayed measurements.
#[derive(Debug)]
pub struct Internal;

impl EstimatorReplay for Replayed {
    fn name(&self) -> &'static str {
        "replayed"
    }

    fn description(&self) -> &'static str {
        "anomalous controllers replay recorded estimates theta(t - tau), lambda(t - tau)"
    }

    fn estimates(
        &self,
        i: usize,
        t_delayed: f64,
        _current: (&[f64], f64),
        history: &dyn HistoryView,
    ) -> Option<(Vec<f64>, f64)> {
        history
            .estimates(i, t_delayed)
            .map(|(th, l)| (th.into_owned(), l))
    }
}

impl EstimatorReplay for Internal {
    fn name(&self) -> &'static str {
        "internal"
    }

    fn description(&self) -> &'static str {
        "anomalous controllers keep their live estimates and only see delayed measurements"
    }

    fn estimates(
        &self,
        _i: usize,
        _t_delayed: f64,
        current: (&[f64], f64),
        _history: &dyn HistoryView,
    ) -> Option<(Vec<f64>, f64)> {
        Some((current.0.to_vec(), current.1))
    }
}

static REPLAY_MODES: &[&dyn EstimatorReplay] = &[&Replayed, &Internal];

pub fn replay_modes() -> &'static [&'static dyn EstimatorReplay] {
    REPLAY_MODES
}

pub fn replay_mode(name: &str) -> Result<&'static dyn EstimatorReplay> {
    REPLAY_MODES
        .iter()
        .copied()
        .find(|m| m.name() == name)
        .ok_or_else(|| Error::Unknown {
            kind: "estimator replay mode",
            name: name.to_string(),
            available: REPLAY_MODES
                .iter()
                .map(|m| m.name())
                .collect::<Vec<_>>()
                .join(", "),
        })
}

/// Signals available to every controller at time `t` with no anomaly.
#[derive(Debug, Clone, Copy)]
pub struct FreshSignals<'a> {
    pub states: &'a [Vec<f64>],
    pub theta_hat: &'a [Vec<f64>],
    pub lambda_hat: &'a [f64],
}

/// What controller `i` consumes at one control instant.
#[derive(Debug, Clone, PartialEq)]
pub struct ControllerInputs {
    pub class: Health,
    pub local: Vec<f64>,
    pub local_delayed: bool,
    /// Neighbor states keyed by neighbor index (all of `N_i`).
    pub neighbors: BTreeMap<usize, Vec<f64>>,
    pub delayed_neighbors: BTreeSet<usize>,
    pub theta_hat: Vec<f64>,
    pub lambda_hat: f64,
}

impl ControllerInputs {
    pub fn neighbor(&self, j: usize) -> Option<&[f64]> {
        self.neighbors.get(&j).map(Vec::as_slice)
    }
}

/// Healthy bundle: every signal fresh.
pub fn fresh_inputs(topology: &[Vec<usize>], i: usize, fresh: FreshSignals<'_>) -> ControllerInputs {
    ControllerInputs {
        class: Health::H2,
        local: fresh.states[i].clone(),
        local_delayed: false,
        neighbors: topology[i]
            .iter()
            .map(|&j| (j, fresh.states[j].clone()))
            .collect(),
        delayed_neighbors: BTreeSet::new(),
        theta_hat: fresh.theta_hat[i].clone(),
        lambda_hat: fresh.lambda_hat[i],
    }
}

/// Signal bundle for controller `i` at time `t`.
pub fn route(
    topology: &[Vec<usize>],
    schedule: &AnomalySchedule,
    i: usize,
    t: f64,
    fresh: FreshSignals<'_>,
    history: &dyn HistoryView,
    mode: &dyn EstimatorReplay,
) -> Result<ControllerInputs> {
    let Some((h, event)) = schedule.active(t) else {
        return Ok(fresh_inputs(topology, i, fresh));
    };
    let partition = classify(topology, &event.targets);
    route_in_event(topology, &partition, h, event, i, t, fresh, history, mode)
}

/// [`route`] with the partition for the active event precomputed.
#[allow(clippy::too_many_arguments)]
pub fn route_in_event(
    topology: &[Vec<usize>],
    partition: &HealthPartition,
    h: usize,
    event: &AnomalyEvent,
    i: usize,
    t: f64,
    fresh: FreshSignals<'_>,
    history: &dyn HistoryView,
    mode: &dyn EstimatorReplay,
) -> Result<ControllerInputs> {
    let class = partition.class_of(i);
    let mut inputs = fresh_inputs(topology, i, fresh);
    inputs.class = class;
    if class == Health::H2 {
        return Ok(inputs);
    }
    let td = t - event.delay;
    let underrun = || Error::HistoryUnderrun {
        event: h + 1,
        needed: td,
        earliest: history.earliest(),
    };
    for &j in &partition.anomalous_neighbors[i] {
        let xj = history.state(j, td).ok_or_else(underrun)?;
        inputs.neighbors.insert(j, xj.into_owned());
        inputs.delayed_neighbors.insert(j);
    }
    if class.is_anomalous() {
        inputs.local = history.state(i, td).ok_or_else(underrun)?.into_owned();
        inputs.local_delayed = true;
        let (th, l) = mode
            .estimates(i, td, (&fresh.theta_hat[i], fresh.lambda_hat[i]), history)
            .ok_or_else(underrun)?;
        inputs.theta_hat = th;
        inputs.lambda_hat = l;
    }
    Ok(inputs)
}
