//! TOML scenario files.
//!
//! A scenario file describes the model, initial conditions, estimator, anomaly
//! schedule and optional bound inputs. [`ScenarioFile::resolve`] fills every
//! default and returns both the ready-to-run [`SimConfig`] and the fully
//! explicit file, which is what metadata records and `presets dump` prints.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::anomaly::{replay_mode, AnomalyEvent, AnomalySchedule};
use crate::approx::{RbfConfig, DEFAULT_COUNT};
use crate::backstep::{EstimatorGains, ProjectionBounds};
use crate::error::{config_err, Result};
use crate::plant::{InterconnectedModel, LipschitzBundle, ScalarFn, SubsystemSpec, DEFAULT_BOX};
use crate::resilience::{
    extract_constants, theorem1_bound, theorem2_bound, DurationBound, ResilienceConstants,
    RestingBound, RestingInputs,
};
use crate::sim::{transform_tables, KnownOptimum, SimConfig, DEFAULT_DIVERGENCE_THRESHOLD, DEFAULT_DT};

pub const DEFAULT_T_END: f64 = 10.0;
pub const DEFAULT_THETA_BAR: f64 = 10.0;
pub const DEFAULT_LAMBDA_BAR: f64 = 10.0;
pub const DEFAULT_MODE: &str = "replayed";
pub const DEFAULT_LIPSCHITZ_SAMPLES: usize = 20_000;

/// `1 + |x1| + … + |xn|`.
pub fn default_bounding(order: usize) -> String {
    let mut s = String::from("1");
    for k in 1..=order {
        s.push_str(&format!(" + abs(x{k})"));
    }
    s
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Outcome {
    Stable,
    Bounded,
    Diverges,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioFile {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub outcome: Option<Outcome>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub notes: Option<String>,
    #[serde(default)]
    pub sim: SimSection,
    #[serde(default)]
    pub estimator: EstimatorSection,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bounds: Option<BoundsSection>,
    #[serde(rename = "subsystem")]
    pub subsystems: Vec<SubsystemSection>,
    #[serde(default, rename = "anomaly", skip_serializing_if = "Vec::is_empty")]
    pub anomalies: Vec<AnomalySection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub known_optimum: Option<KnownOptimumSection>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimSection {
    #[serde(default = "default_dt")]
    pub dt: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub control_period: Option<f64>,
    #[serde(default = "default_t_end")]
    pub t_end: f64,
    #[serde(default = "default_threshold")]
    pub divergence_threshold: f64,
    #[serde(default)]
    pub seed: u64,
}

impl Default for SimSection {
    fn default() -> Self {
        Self {
            dt: DEFAULT_DT,
            control_period: None,
            t_end: DEFAULT_T_END,
            divergence_threshold: DEFAULT_DIVERGENCE_THRESHOLD,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EstimatorSection {
    /// `Γ = gamma · I`.
    #[serde(default = "one")]
    pub gamma: f64,
    #[serde(default = "one")]
    pub zeta: f64,
    #[serde(default = "default_theta_bar")]
    pub theta_bar: f64,
    #[serde(default = "default_lambda_bar")]
    pub lambda_bar: f64,
    #[serde(default = "default_mode")]
    pub mode: String,
}

impl Default for EstimatorSection {
    fn default() -> Self {
        Self {
            gamma: 1.0,
            zeta: 1.0,
            theta_bar: DEFAULT_THETA_BAR,
            lambda_bar: DEFAULT_LAMBDA_BAR,
            mode: DEFAULT_MODE.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoundsSection {
    #[serde(default = "default_samples")]
    pub lipschitz_samples: usize,
    /// Compact-set radii; defaults to 1 per subsystem.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vartheta: Option<Vec<f64>>,
    /// Anomaly durations at which to evaluate the resting-time bound.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub t_d: Vec<f64>,
    /// Explicit constants; replaces derivation from the model.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lipschitz: Option<LipschitzSection>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LipschitzSection {
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
    pub pi: Vec<f64>,
    pub omega: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SubsystemSection {
    pub order: usize,
    pub gain: f64,
    pub initial_state: Vec<f64>,
    pub nominal: String,
    #[serde(default = "zero_fn")]
    pub uncertainty: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bounding: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub theta0: Option<Vec<f64>>,
    #[serde(default)]
    pub lambda0: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub state_box: Option<Vec<[f64; 2]>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rbf: Option<RbfSection>,
    #[serde(default, rename = "interconnection", skip_serializing_if = "Vec::is_empty")]
    pub interconnections: Vec<InterconnectionSection>,
}

/// Either explicit `centers` (+ `width`) or a diagonal layout `count` on `[lo, hi]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RbfSection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub count: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lo: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hi: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub width: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub centers: Option<Vec<Vec<f64>>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InterconnectionSection {
    /// 1-based index of the neighbor whose state `x1..` the expression reads.
    pub from: usize,
    pub expr: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnomalySection {
    pub start: f64,
    pub duration: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub delay: Option<f64>,
    /// Draw the delay uniformly from `[lo, hi]` with the run seed, snapped to the grid.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub delay_range: Option<[f64; 2]>,
    /// 1-based subsystem indices.
    pub targets: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KnownOptimumSection {
    pub theta: Vec<Vec<f64>>,
    pub lambda: Vec<f64>,
}

fn default_dt() -> f64 {
    DEFAULT_DT
}
fn default_t_end() -> f64 {
    DEFAULT_T_END
}
fn default_threshold() -> f64 {
    DEFAULT_DIVERGENCE_THRESHOLD
}
fn one() -> f64 {
    1.0
}
fn default_theta_bar() -> f64 {
    DEFAULT_THETA_BAR
}
fn default_lambda_bar() -> f64 {
    DEFAULT_LAMBDA_BAR
}
fn default_mode() -> String {
    DEFAULT_MODE.into()
}
fn default_samples() -> usize {
    DEFAULT_LIPSCHITZ_SAMPLES
}
fn zero_fn() -> String {
    "0".into()
}

/// A scenario with every default made explicit, plus its runnable form.
#[derive(Debug, Clone)]
pub struct Resolved {
    pub file: ScenarioFile,
    pub config: SimConfig,
}

impl ScenarioFile {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| config_err(e.to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("scenario files serialize")
    }

    pub fn resolve(&self) -> Result<Resolved> {
        let mut file = self.clone();
        let m = file.subsystems.len();
        if m == 0 {
            return Err(config_err("at least one [[subsystem]] is required"));
        }
        let dt = file.sim.dt;
        file.sim.control_period.get_or_insert(dt);

        let mut specs = Vec::with_capacity(m);
        let mut boxes = Vec::with_capacity(m);
        for (i, s) in file.subsystems.iter_mut().enumerate() {
            let ctx = |e: crate::Error| config_err(format!("subsystem {}: {e}", i + 1));
            let parse = |src: &str| ScalarFn::parse(src).map_err(ctx);
            let bounding = s.bounding.get_or_insert_with(|| default_bounding(s.order)).clone();
            let rbf = resolve_rbf(s.rbf.as_ref(), s.order).map_err(ctx)?;
            s.rbf = Some(RbfSection {
                count: None,
                lo: None,
                hi: None,
                width: Some(rbf.width),
                centers: Some(rbf.centers.clone()),
            });
            s.theta0.get_or_insert_with(|| vec![0.0; rbf.count()]);
            let bx = s
                .state_box
                .get_or_insert_with(|| vec![[DEFAULT_BOX.0, DEFAULT_BOX.1]; s.order])
                .iter()
                .map(|b| (b[0], b[1]))
                .collect();
            boxes.push(bx);
            let mut links = BTreeMap::new();
            for link in &s.interconnections {
                if link.from == 0 || link.from > m {
                    return Err(config_err(format!(
                        "subsystem {}: interconnection from {} is out of range 1..={m}",
                        i + 1,
                        link.from
                    )));
                }
                let f = parse(&link.expr)?;
                if links.insert(link.from - 1, f).is_some() {
                    return Err(config_err(format!(
                        "subsystem {}: duplicate interconnection from {}",
                        i + 1,
                        link.from
                    )));
                }
            }
            specs.push(SubsystemSpec::new(
                i,
                s.order,
                s.gain,
                parse(&s.nominal)?,
                links,
                parse(&s.uncertainty)?,
                parse(&bounding)?,
                rbf,
            )?);
        }
        let model = InterconnectedModel::with_box(specs, boxes)?;

        let mut rng = ChaCha8Rng::seed_from_u64(file.sim.seed);
        let mut events = Vec::with_capacity(file.anomalies.len());
        for (h, a) in file.anomalies.iter_mut().enumerate() {
            let delay = match (a.delay, a.delay_range) {
                (Some(d), None) => d,
                (None, Some([lo, hi])) => {
                    if !(hi >= lo) || !(lo > 0.0) {
                        return Err(config_err(format!(
                            "anomaly {}: delay_range needs 0 < lo <= hi",
                            h + 1
                        )));
                    }
                    let d = if hi > lo { rng.gen_range(lo..=hi) } else { lo };
                    ((d / dt).round().max(1.0)) * dt
                }
                _ => {
                    return Err(config_err(format!(
                        "anomaly {}: give exactly one of delay or delay_range",
                        h + 1
                    )))
                }
            };
            a.delay = Some(delay);
            a.delay_range = None;
            if a.targets.iter().any(|&t| t == 0 || t > m) {
                return Err(config_err(format!(
                    "anomaly {}: targets must lie in 1..={m}",
                    h + 1
                )));
            }
            events.push(AnomalyEvent {
                start: a.start,
                duration: a.duration,
                delay,
                targets: a.targets.iter().map(|t| t - 1).collect(),
            });
        }
        let schedule = AnomalySchedule::new(events)?;
        let mode = replay_mode(&file.estimator.mode)?;

        let config = SimConfig {
            initial_state: file.subsystems.iter().map(|s| s.initial_state.clone()).collect(),
            theta0: file
                .subsystems
                .iter()
                .map(|s| s.theta0.clone().expect("filled"))
                .collect(),
            lambda0: file.subsystems.iter().map(|s| s.lambda0).collect(),
            model,
            schedule,
            dt,
            control_period: file.sim.control_period.expect("filled"),
            t_end: file.sim.t_end,
            gains: EstimatorGains {
                gamma: file.estimator.gamma,
                zeta: file.estimator.zeta,
            },
            bounds: ProjectionBounds {
                theta_bar: file.estimator.theta_bar,
                lambda_bar: file.estimator.lambda_bar,
            },
            mode,
            divergence_threshold: file.sim.divergence_threshold,
            seed: file.sim.seed,
            known_optimum: file.known_optimum.as_ref().map(|k| KnownOptimum {
                theta: k.theta.clone(),
                lambda: k.lambda.clone(),
            }),
        };
        config.validate()?;
        Ok(Resolved { file, config })
    }
}

fn resolve_rbf(section: Option<&RbfSection>, order: usize) -> Result<RbfConfig> {
    let Some(r) = section else {
        return RbfConfig::default_for(order);
    };
    let mut cfg = match &r.centers {
        Some(c) => {
            if r.count.is_some() || r.lo.is_some() || r.hi.is_some() {
                return Err(config_err("rbf: centers excludes count/lo/hi"));
            }
            let width = r
                .width
                .ok_or_else(|| config_err("rbf: explicit centers need a width"))?;
            RbfConfig::new(c.clone(), width)?
        }
        None => RbfConfig::diagonal(
            order,
            r.count.unwrap_or(DEFAULT_COUNT),
            r.lo.unwrap_or(-1.0),
            r.hi.unwrap_or(1.0),
        )?,
    };
    if let Some(w) = r.width {
        cfg.width = w;
        cfg.validate()?;
    }
    Ok(cfg)
}

impl Resolved {
    /// Lipschitz constants: explicit ones from the file, derived from the model otherwise.
    pub fn lipschitz(&self) -> Result<LipschitzBundle> {
        let theta_bar = self.file.estimator.theta_bar;
        let lambda_bar = self.file.estimator.lambda_bar;
        let bounds = self.file.bounds.as_ref();
        if let Some(l) = bounds.and_then(|b| b.lipschitz.as_ref()) {
            let b = LipschitzBundle {
                alpha: l.alpha.clone(),
                beta: l.beta.clone(),
                pi: l.pi.clone(),
                omega: l.omega.clone(),
                theta_bar,
                lambda_bar,
                estimated: Vec::new(),
            };
            b.validate(self.config.model.len())?;
            return Ok(b);
        }
        let samples = bounds.map_or(DEFAULT_LIPSCHITZ_SAMPLES, |b| b.lipschitz_samples);
        LipschitzBundle::derive(
            &self.config.model,
            theta_bar,
            lambda_bar,
            samples,
            self.config.seed,
        )
    }

    pub fn vartheta(&self) -> Vec<f64> {
        self.file
            .bounds
            .as_ref()
            .and_then(|b| b.vartheta.clone())
            .unwrap_or_else(|| vec![1.0; self.config.model.len()])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RestingRow {
    pub t_d: f64,
    #[serde(flatten)]
    pub bound: RestingBound,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BoundsReport {
    pub lipschitz: LipschitzBundle,
    pub constants: ResilienceConstants,
    pub duration: DurationBound,
    pub vartheta: Vec<f64>,
    pub resting: Vec<RestingRow>,
}

impl Resolved {
    /// Both resilience bounds; `t_d` overrides the durations listed in the file.
    pub fn bounds_report(&self, t_d: Option<&[f64]>) -> Result<BoundsReport> {
        let lipschitz = self.lipschitz()?;
        let tables = transform_tables(&self.config.model)?;
        let constants = extract_constants(&self.config.model, &tables, &lipschitz)?;
        let duration = theorem1_bound(&constants)?;
        let z0 = tables
            .iter()
            .zip(&self.config.initial_state)
            .map(|(t, x)| t.to_z(x))
            .collect::<Result<Vec<_>>>()?;
        let vartheta = self.vartheta();
        let listed = self.file.bounds.as_ref().map(|b| b.t_d.clone()).unwrap_or_default();
        let durations = t_d.map_or(listed, <[f64]>::to_vec);
        let resting = durations
            .iter()
            .map(|&t_d| {
                theorem2_bound(&RestingInputs {
                    constants: constants.clone(),
                    z0: z0.clone(),
                    vartheta: vartheta.clone(),
                    t_d,
                })
                .map(|bound| RestingRow { t_d, bound })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(BoundsReport {
            lipschitz,
            constants,
            duration,
            vartheta,
            resting,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
[[subsystem]]
order = 2
gain = 2.0
initial_state = [1.0, 0.0]
nominal = "-sin(x1)"
"#;

    #[test]
    fn defaults_are_filled() {
        let r = ScenarioFile::from_toml(MINIMAL).unwrap().resolve().unwrap();
        let s = &r.file.subsystems[0];
        assert_eq!(s.bounding.as_deref(), Some("1 + abs(x1) + abs(x2)"));
        assert_eq!(s.theta0.as_ref().unwrap().len(), 10);
        assert_eq!(r.file.sim.control_period, Some(1e-3));
        assert_eq!(r.config.mode.name(), "replayed");
        assert_eq!(r.config.t_end, 10.0);
    }

    #[test]
    fn resolved_file_round_trips() {
        let r = ScenarioFile::from_toml(MINIMAL).unwrap().resolve().unwrap();
        let text = r.file.to_toml();
        let again = ScenarioFile::from_toml(&text).unwrap();
        assert_eq!(again, r.file);
        assert_eq!(again.resolve().unwrap().file, r.file);
    }

    #[test]
    fn unknown_field_reports_location() {
        let err = ScenarioFile::from_toml(&format!("{MINIMAL}gian = 3\n"))
            .unwrap_err()
            .to_string();
        assert!(err.contains("gian"), "{err}");
        assert!(err.contains("line"), "{err}");
    }

    #[test]
    fn delay_range_is_seeded_and_snapped() {
        let text = format!(
            "{MINIMAL}[[anomaly]]\nstart = 1.0\nduration = 0.5\ndelay_range = [0.1, 0.3]\ntargets = [1]\n"
        );
        let f = ScenarioFile::from_toml(&text).unwrap();
        let a = f.resolve().unwrap();
        let b = f.resolve().unwrap();
        let d = a.file.anomalies[0].delay.unwrap();
        assert_eq!(Some(d), b.file.anomalies[0].delay);
        assert!((0.1..=0.3).contains(&d));
        assert!(((d / 1e-3) - (d / 1e-3).round()).abs() < 1e-6);
    }

    #[test]
    fn bad_target_rejected() {
        let text = format!(
            "{MINIMAL}[[anomaly]]\nstart = 1.0\nduration = 0.5\ndelay = 0.2\ntargets = [2]\n"
        );
        let err = ScenarioFile::from_toml(&text).unwrap().resolve().unwrap_err();
        assert!(err.to_string().contains("targets"));
    }
}
