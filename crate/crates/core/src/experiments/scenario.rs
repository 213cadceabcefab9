use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{check_dim, AifError, Result};
use crate::genmodel::GprParams;
use crate::simulator::{BrokenChannel, PerturbationSpec, WorldConfig};
use crate::types::{ActionMode, AgentConfig, Channel, PrecisionSet};

/// Gravity used for the second run of the `jupiter` scenario, m/s².
pub const JUPITER_GRAVITY: f64 = 24.79;
pub const EARTH_GRAVITY: f64 = 9.81;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScenarioKind {
    EstimationNoise,
    Reaching,
    VisualShiftAdaptation,
    Jupiter,
    BrokenSensor,
    SelfRecognition,
}

impl ScenarioKind {
    pub const ALL: [ScenarioKind; 6] = [
        ScenarioKind::EstimationNoise,
        ScenarioKind::Reaching,
        ScenarioKind::VisualShiftAdaptation,
        ScenarioKind::Jupiter,
        ScenarioKind::BrokenSensor,
        ScenarioKind::SelfRecognition,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ScenarioKind::EstimationNoise => "estimation-noise",
            ScenarioKind::Reaching => "reaching",
            ScenarioKind::VisualShiftAdaptation => "visual-shift-adaptation",
            ScenarioKind::Jupiter => "jupiter",
            ScenarioKind::BrokenSensor => "broken-sensor",
            ScenarioKind::SelfRecognition => "self-recognition",
        }
    }

    /// Whether the agent's own action command drives the arm.
    pub fn agent_acts(self) -> bool {
        matches!(
            self,
            ScenarioKind::Reaching | ScenarioKind::VisualShiftAdaptation | ScenarioKind::Jupiter
        )
    }
}

impl fmt::Display for ScenarioKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ScenarioKind {
    type Err = AifError;

    fn from_str(s: &str) -> Result<Self> {
        ScenarioKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| AifError::invalid(format!("unknown scenario '{s}'")))
    }
}

/// Agent-side covariances, given as variances.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PrecisionSpec {
    pub proprio_pos: f64,
    pub proprio_vel: f64,
    pub visual: f64,
    /// One variance per generalized order.
    pub dynamics: Vec<f64>,
}

impl PrecisionSpec {
    pub fn build(&self, n_joints: usize) -> Result<PrecisionSet> {
        PrecisionSet::isotropic(
            n_joints,
            self.proprio_pos,
            self.proprio_vel,
            self.visual,
            &self.dynamics,
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SensoryModelKind {
    Analytic,
    Gpr,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SensoryModelSpec {
    pub kind: SensoryModelKind,
    /// Training samples when the GPR is fitted at scenario start.
    #[serde(default = "default_gpr_samples")]
    pub gpr_samples: usize,
    /// Pre-fitted model file; overrides `gpr_samples`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gpr_file: Option<PathBuf>,
    #[serde(default)]
    pub gpr: GprParams,
    /// Margin added around the joint limits when sampling training data, rad.
    #[serde(default = "default_gpr_margin")]
    pub gpr_margin: f64,
}

fn default_gpr_samples() -> usize {
    200
}

fn default_gpr_margin() -> f64 {
    0.3
}

impl Default for SensoryModelSpec {
    fn default() -> Self {
        Self {
            kind: SensoryModelKind::Analytic,
            gpr_samples: default_gpr_samples(),
            gpr_file: None,
            gpr: GprParams::default(),
            gpr_margin: default_gpr_margin(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GoalKind {
    /// No goal: perception only.
    None,
    /// A random reachable target drawn per trial within the joint limits.
    Random,
    /// The arm's initial configuration.
    Current,
    /// The fixed targets below.
    Fixed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GoalSpace {
    Visual,
    Joints,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GoalSpec {
    pub kind: GoalKind,
    /// Which sensory space a random/current goal is expressed in.
    #[serde(default = "default_goal_space")]
    pub space: GoalSpace,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub desired_visual: Option<[f64; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub desired_joints: Option<Vec<f64>>,
    /// Scale of the attractor pull.
    #[serde(default = "default_goal_gain")]
    pub gain: f64,
}

fn default_goal_space() -> GoalSpace {
    GoalSpace::Visual
}

fn default_goal_gain() -> f64 {
    1.0
}

impl GoalSpec {
    pub fn none() -> Self {
        Self {
            kind: GoalKind::None,
            space: GoalSpace::Visual,
            desired_visual: None,
            desired_joints: None,
            gain: 1.0,
        }
    }
}

/// Scenario-specific protocol parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Protocol {
    /// Joint-space box for initial poses and random goals, rad.
    pub joint_lower: Vec<f64>,
    pub joint_upper: Vec<f64>,
    /// Prior offset level: 0 none, 1 small (≤0.2 rad), 2 strong (≤0.8 rad),
    /// 3 random pose.
    #[serde(default)]
    pub prior_level: u8,
    /// Amplitude of the scripted joint-velocity profile, rad/s.
    #[serde(default)]
    pub motion_amplitude: f64,
    /// Frequency of the scripted profile, Hz.
    #[serde(default = "default_motion_frequency")]
    pub motion_frequency: f64,
    /// Gravity of the comparison run (`jupiter`), m/s².
    #[serde(default = "default_comparison_gravity")]
    pub comparison_gravity: f64,
    /// Steps after the visual shift at which compensation is measured.
    #[serde(default = "default_response_steps")]
    pub response_steps: usize,
    /// Evidence window length (`self-recognition`) and error averaging
    /// window (`broken-sensor`), steps.
    #[serde(default = "default_window")]
    pub window: usize,
    /// Calibration runs per label for the self-recognition threshold.
    #[serde(default = "default_calibration_runs")]
    pub calibration_runs: usize,
}

fn default_motion_frequency() -> f64 {
    0.5
}

fn default_comparison_gravity() -> f64 {
    JUPITER_GRAVITY
}

fn default_response_steps() -> usize {
    100
}

fn default_window() -> usize {
    crate::selfhood::DEFAULT_WINDOW
}

fn default_calibration_runs() -> usize {
    20
}

impl Protocol {
    fn two_link() -> Self {
        Self {
            joint_lower: vec![-1.2, 0.3],
            joint_upper: vec![1.2, 2.4],
            prior_level: 0,
            motion_amplitude: 0.0,
            motion_frequency: default_motion_frequency(),
            comparison_gravity: JUPITER_GRAVITY,
            response_steps: default_response_steps(),
            window: default_window(),
            calibration_runs: default_calibration_runs(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub name: ScenarioKind,
    pub trials: usize,
    pub seed: u64,
    /// Steps per trial.
    pub duration: usize,
    pub world: WorldConfig,
    pub agent: AgentConfig,
    pub precisions: PrecisionSpec,
    #[serde(default)]
    pub sensory_model: SensoryModelSpec,
    pub goal: GoalSpec,
    pub protocol: Protocol,
}

impl Scenario {
    /// Default configuration of each scenario family on the 2-link arm.
    pub fn preset(kind: ScenarioKind) -> Self {
        let mut world = WorldConfig::two_link();
        let mut agent = AgentConfig {
            k_z: 5.0,
            k_a: 0.0,
            dt: 0.01,
            n_joints: 2,
            max_order: 1,
            action_mode: ActionMode::Velocity,
            visual_action_channel: false,
            torque_gain: 1.0,
            velocity_limit: world.velocity_limit,
            torque_limit: world.torque_limit,
        };
        let mut precisions = PrecisionSpec {
            proprio_pos: 1.0,
            proprio_vel: 1.0,
            visual: 0.2,
            dynamics: vec![2.0, 2.0],
        };
        let mut goal = GoalSpec::none();
        let mut protocol = Protocol::two_link();
        let (trials, duration) = match kind {
            ScenarioKind::EstimationNoise => {
                protocol.prior_level = 1;
                (50, 500)
            }
            ScenarioKind::Reaching => {
                agent.k_a = 20.0;
                agent.visual_action_channel = true;
                goal.kind = GoalKind::Random;
                // Goals near full extension converge slowly.
                (100, 3000)
            }
            ScenarioKind::VisualShiftAdaptation => {
                agent.k_a = 20.0;
                agent.visual_action_channel = true;
                goal.kind = GoalKind::Current;
                // Start with a bent elbow: near full extension a shift along
                // the arm's own axis only gets a second-order response.
                protocol.joint_lower[1] = 1.2;
                world.perturbation = PerturbationSpec {
                    enabled: true,
                    visual_shift: [0.1, 0.0],
                    shift_step: 200,
                    broken_channels: vec![],
                };
                (50, 400)
            }
            ScenarioKind::Jupiter => {
                world.mode = ActionMode::Torque;
                world.gravity = EARTH_GRAVITY;
                world.link_masses = vec![0.1, 0.1];
                world.damping = 0.2;
                agent.action_mode = ActionMode::Torque;
                agent.k_a = 20.0;
                goal.kind = GoalKind::Random;
                goal.space = GoalSpace::Joints;
                (20, 1500)
            }
            ScenarioKind::BrokenSensor => {
                precisions.visual = 1.0;
                protocol.prior_level = 1;
                protocol.motion_amplitude = 0.3;
                world.perturbation = PerturbationSpec {
                    enabled: true,
                    visual_shift: [0.0, 0.0],
                    shift_step: 0,
                    broken_channels: vec![BrokenChannel {
                        channel: Channel::Visual,
                        step: 500,
                    }],
                };
                (20, 1000)
            }
            ScenarioKind::SelfRecognition => {
                // The static prior would otherwise penalise the scripted motion
                // itself and swamp the visual mismatch.
                precisions = PrecisionSpec {
                    proprio_pos: 0.1,
                    proprio_vel: 0.05,
                    visual: 0.5,
                    dynamics: vec![100.0, 100.0],
                };
                protocol.motion_amplitude = 1.0;
                protocol.window = 200;
                (100, 400)
            }
        };
        Self {
            name: kind,
            trials,
            seed: 1,
            duration,
            world,
            agent,
            precisions,
            sensory_model: SensoryModelSpec::default(),
            goal,
            protocol,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.trials == 0 {
            return Err(AifError::invalid("trials must be >= 1"));
        }
        if self.duration == 0 {
            return Err(AifError::invalid("duration must be >= 1"));
        }
        self.world.validate()?;
        self.agent.validate()?;
        let n = self.world.n_joints();
        check_dim("agent n_joints", n, self.agent.n_joints)?;
        check_dim("dynamics variances", self.agent.max_order + 1, self.precisions.dynamics.len())?;
        self.precisions.build(n)?;
        if self.world.mode != self.agent.action_mode {
            return Err(AifError::invalid("world mode and agent action_mode differ"));
        }
        check_dim("joint_lower", n, self.protocol.joint_lower.len())?;
        check_dim("joint_upper", n, self.protocol.joint_upper.len())?;
        if self
            .protocol
            .joint_lower
            .iter()
            .zip(&self.protocol.joint_upper)
            .any(|(l, u)| !(l < u))
        {
            return Err(AifError::invalid("joint_lower must be below joint_upper"));
        }
        if self.protocol.prior_level > 3 {
            return Err(AifError::invalid("prior_level must be 0..=3"));
        }
        if self.protocol.window == 0 {
            return Err(AifError::invalid("window must be >= 1"));
        }
        let goal = &self.goal;
        if !(goal.gain > 0.0 && goal.gain.is_finite()) {
            return Err(AifError::invalid("goal gain must be > 0"));
        }
        if goal.kind == GoalKind::Fixed {
            if goal.desired_visual.is_none() && goal.desired_joints.is_none() {
                return Err(AifError::invalid("fixed goal needs desired_visual or desired_joints"));
            }
            if let Some(q) = &goal.desired_joints {
                check_dim("desired_joints", n, q.len())?;
            }
        }
        if self.sensory_model.kind == SensoryModelKind::Gpr
            && self.sensory_model.gpr_file.is_none()
            && self.sensory_model.gpr_samples == 0
        {
            return Err(AifError::invalid("gpr_samples must be >= 1"));
        }
        match self.name {
            ScenarioKind::VisualShiftAdaptation => {
                let p = &self.world.perturbation;
                if !p.enabled || p.visual_shift == [0.0, 0.0] {
                    return Err(AifError::invalid("visual-shift-adaptation needs an enabled visual_shift"));
                }
                if p.shift_step as usize + self.protocol.response_steps > self.duration {
                    return Err(AifError::invalid("duration too short to observe the shift response"));
                }
            }
            ScenarioKind::BrokenSensor => {
                let p = &self.world.perturbation;
                if !p.enabled || p.broken_channels.is_empty() {
                    return Err(AifError::invalid("broken-sensor needs a broken channel"));
                }
            }
            ScenarioKind::Jupiter => {
                if self.world.mode != ActionMode::Torque {
                    return Err(AifError::invalid("jupiter runs in torque mode"));
                }
            }
            ScenarioKind::SelfRecognition => {
                if self.protocol.calibration_runs == 0 {
                    return Err(AifError::invalid("calibration_runs must be >= 1"));
                }
                if !self.world.visual_sensing {
                    return Err(AifError::invalid("self-recognition needs the visual channel"));
                }
            }
            ScenarioKind::EstimationNoise | ScenarioKind::Reaching => {}
        }
        if self.name.agent_acts() && self.goal.kind == GoalKind::None {
            return Err(AifError::invalid(format!("{} needs a goal", self.name)));
        }
        Ok(())
    }

    /// Parses a scenario document. Keys absent from the document take the
    /// preset values of the named scenario; unknown keys are errors.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let parse_err = |e: toml::de::Error| AifError::Parse {
            what: "scenario".into(),
            message: e.to_string(),
        };
        let doc: toml::Table = toml::from_str(text).map_err(parse_err)?;
        let name = doc
            .get("name")
            .and_then(|v| v.as_str())
            .ok_or_else(|| AifError::invalid("scenario file needs a 'name' key"))?;
        let kind: ScenarioKind = name.parse()?;
        let preset = toml::Table::try_from(Scenario::preset(kind)).map_err(|e| AifError::Parse {
            what: "scenario preset".into(),
            message: e.to_string(),
        })?;
        let merged = merge_tables(preset, doc);
        let scenario: Scenario = merged.try_into().map_err(parse_err)?;
        scenario.validate()?;
        Ok(scenario)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        Self::from_toml_str(&text).map_err(|e| match e {
            AifError::Parse { message, .. } => AifError::Parse {
                what: path.display().to_string(),
                message,
            },
            other => other,
        })
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| AifError::Parse {
            what: "scenario".into(),
            message: e.to_string(),
        })
    }
}

/// Overlays `top` on `base`, recursing into tables present in both.
fn merge_tables(mut base: toml::Table, top: toml::Table) -> toml::Table {
    for (key, value) in top {
        match (base.remove(&key), value) {
            (Some(toml::Value::Table(b)), toml::Value::Table(t)) => {
                base.insert(key, toml::Value::Table(merge_tables(b, t)));
            }
            (_, v) => {
                base.insert(key, v);
            }
        }
    }
    base
}
