//! Named scenario presets: the four-pendulum benchmark and its anomaly schedules.

use crate::config::{
    AnomalySection, BoundsSection, EstimatorSection, InterconnectionSection, Outcome, RbfSection,
    ScenarioFile, SimSection, SubsystemSection, DEFAULT_LIPSCHITZ_SAMPLES,
};
use crate::error::{Error, Result};

/// Free parameters of the benchmark that the published setup leaves open.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BenchmarkParams {
    pub theta_bar: f64,
    pub lambda_bar: f64,
    /// Gaussian width; `None` keeps the center spacing.
    pub rbf_width: Option<f64>,
    /// Multiplier on `Ω(x) = 1 + |x1| + |x2|`.
    pub omega_scale: f64,
    /// Estimator replay mode name.
    pub mode: &'static str,
}

pub const BENCHMARK: BenchmarkParams = BenchmarkParams {
    theta_bar: 10.0,
    lambda_bar: 5.0,
    rbf_width: None,
    omega_scale: 2.0,
    mode: "internal",
};

/// Recorded in every preset's notes.
pub const CALIBRATION: &str = "benchmark calibration: theta_bar = 10, lambda_bar = 5, \
RBF width = center spacing, Omega = 2*(1 + |x1| + |x2|), estimator replay mode internal";

pub const DELAY: f64 = 0.18;
const MASS: [f64; 4] = [15.0, 10.0, 15.0, 10.0];
const LENGTH: [f64; 4] = [0.5, 0.5, 0.8, 0.5];
const GAIN: [f64; 4] = [2.0, 1.5, 1.5, 2.0];
const UNCERTAINTY: [&str; 4] = ["x1*cos(x2^2)", "0.5*x1*x2", "x1*x2", "x1*x2^2"];

fn links(i: usize) -> Vec<(usize, &'static str)> {
    match i {
        0 => vec![(2, "sin(x1)")],
        1 => vec![(1, "x1*x2"), (3, "cos(0.5*exp(x1))")],
        2 => vec![(2, "x1*x2"), (4, "cos(0.5*exp(x1))")],
        _ => vec![(3, "sin(x1)")],
    }
}

/// Four coupled pendulums with the given anomaly events `(start, duration)`.
pub fn benchmark(
    params: BenchmarkParams,
    events: &[(f64, f64)],
    targets: &[usize],
    t_end: f64,
) -> ScenarioFile {
    let subsystems = (0..4)
        .map(|i| {
            let bounding = if params.omega_scale == 1.0 {
                "1 + abs(x1) + abs(x2)".to_string()
            } else {
                format!("{:?}*(1 + abs(x1) + abs(x2))", params.omega_scale)
            };
            SubsystemSection {
                order: 2,
                gain: GAIN[i],
                initial_state: vec![3.0, 2.0],
                nominal: format!(
                    "-({:?}*10*{:?}/9.81)*sin(x1) - (2/9.81)*x2",
                    MASS[i], LENGTH[i]
                ),
                uncertainty: UNCERTAINTY[i].to_string(),
                bounding: Some(bounding),
                theta0: Some(vec![1.0; 10]),
                lambda0: 1.0,
                state_box: None,
                rbf: params.rbf_width.map(|w| RbfSection {
                    count: Some(10),
                    lo: Some(-1.0),
                    hi: Some(1.0),
                    width: Some(w),
                    centers: None,
                }),
                interconnections: links(i)
                    .into_iter()
                    .map(|(from, expr)| InterconnectionSection {
                        from,
                        expr: expr.to_string(),
                    })
                    .collect(),
            }
        })
        .collect();
    ScenarioFile {
        name: None,
        outcome: None,
        notes: None,
        sim: SimSection {
            t_end,
            ..SimSection::default()
        },
        estimator: EstimatorSection {
            theta_bar: params.theta_bar,
            lambda_bar: params.lambda_bar,
            mode: params.mode.to_string(),
            ..EstimatorSection::default()
        },
        bounds: Some(BoundsSection {
            lipschitz_samples: DEFAULT_LIPSCHITZ_SAMPLES,
            vartheta: None,
            t_d: vec![0.0, 0.63, 0.64, 1.2, 1.85],
            lipschitz: None,
        }),
        subsystems,
        anomalies: events
            .iter()
            .map(|&(start, duration)| AnomalySection {
                start,
                duration,
                delay: Some(DELAY),
                delay_range: None,
                targets: targets.to_vec(),
            })
            .collect(),
        known_optimum: None,
    }
}

pub const A_LONG: [(f64, f64); 6] = [
    (0.72, 0.64),
    (2.56, 0.64),
    (4.01, 0.64),
    (5.68, 0.64),
    (7.62, 0.64),
    (9.08, 0.64),
];
pub const A_BOUNDED: [(f64, f64); 6] = [
    (0.72, 0.63),
    (2.55, 0.63),
    (3.99, 0.63),
    (5.65, 0.63),
    (7.58, 0.63),
    (9.03, 0.63),
];
pub const B_SHORT_REST: [(f64, f64); 2] = [(2.3, 1.2), (9.0, 1.85)];
pub const B_LONG_REST: [(f64, f64); 2] = [(2.3, 1.2), (9.3, 1.85)];

pub const T_END_A: f64 = 12.0;
pub const T_END_B: f64 = 15.0;

#[derive(Debug, Clone, Copy)]
pub struct Preset {
    pub name: &'static str,
    pub outcome: Outcome,
    pub summary: &'static str,
    build: fn() -> ScenarioFile,
}

impl Preset {
    pub fn scenario(&self) -> ScenarioFile {
        let mut f = (self.build)();
        f.name = Some(self.name.to_string());
        f.outcome = Some(self.outcome);
        f.notes = Some(format!("{}; {CALIBRATION}", self.summary));
        f
    }
}

fn nominal() -> ScenarioFile {
    benchmark(BENCHMARK, &[], &[], 10.0)
}
fn a_long() -> ScenarioFile {
    benchmark(BENCHMARK, &A_LONG, &[1, 2, 3], T_END_A)
}
fn a_bounded() -> ScenarioFile {
    benchmark(BENCHMARK, &A_BOUNDED, &[1, 2, 3], T_END_A)
}
fn b_short() -> ScenarioFile {
    benchmark(BENCHMARK, &B_SHORT_REST, &[1, 2, 3, 4], T_END_B)
}
fn b_long() -> ScenarioFile {
    benchmark(BENCHMARK, &B_LONG_REST, &[1, 2, 3, 4], T_END_B)
}

static PRESETS: &[Preset] = &[
    Preset {
        name: "paper-nominal",
        outcome: Outcome::Stable,
        summary: "four coupled pendulums, no anomalies, 10 s",
        build: nominal,
    },
    Preset {
        name: "paper-A-long",
        outcome: Outcome::Bounded,
        summary: "six 0.64 s replay anomalies on subsystems 1-3",
        build: a_long,
    },
    Preset {
        name: "paper-A-bounded",
        outcome: Outcome::Stable,
        summary: "six 0.63 s replay anomalies on subsystems 1-3",
        build: a_bounded,
    },
    Preset {
        name: "paper-B-short-rest",
        outcome: Outcome::Diverges,
        summary: "two replay anomalies on all subsystems, 5.5 s rest",
        build: b_short,
    },
    Preset {
        name: "paper-B-long-rest",
        outcome: Outcome::Bounded,
        summary: "two replay anomalies on all subsystems, 5.8 s rest",
        build: b_long,
    },
];

pub fn presets() -> &'static [Preset] {
    PRESETS
}

pub fn preset(name: &str) -> Result<&'static Preset> {
    PRESETS
        .iter()
        .find(|p| p.name == name)
        .ok_or_else(|| Error::Unknown {
            kind: "preset",
            name: name.to_string(),
            available: PRESETS.iter().map(|p| p.name).collect::<Vec<_>>().join(", "),
        })
}
