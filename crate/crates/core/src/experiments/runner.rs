use std::f64::consts::TAU;
use std::sync::Arc;

use nalgebra::{DVector, Vector2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::records::{StepRow, TrialRecord, TrialSummary};
use super::scenario::{GoalKind, GoalSpace, Scenario, ScenarioKind, SensoryModelKind};
use crate::agent::Agent;
use crate::error::{AifError, Result};
use crate::genmodel::{
    fk_training_set, AnalyticFk, AttractorDynamics, DynamicsModel, GenerativeModel, GprModel,
    LinearDynamics, SensoryModel,
};
use crate::selfhood::{calibrate_threshold, EvidenceWindow};
use crate::simulator::{ArmWorld, WorldConfig};
use crate::types::{Channel, Goal, PrecisionSet};

/// Final joint error below which an estimation or joint-goal trial counts as
/// converged, rad.
pub const JOINT_TOLERANCE: f64 = 0.1;
/// Final end-effector error below which a reaching trial counts as
/// converged, m.
pub const EE_TOLERANCE: f64 = 0.05;
/// Largest allowed ratio of post-drop to pre-drop estimation error.
pub const DROP_ERROR_RATIO: f64 = 3.0;

/// Steps averaged at each end of the visual-shift response.
const RESPONSE_AVERAGE: usize = 10;

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;
const CALIBRATION_STREAM: u64 = 0xC0FF_EE00;

/// Deterministic per-trial generator, independent of execution order.
fn trial_rng(seed: u64, stream: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ stream.wrapping_mul(GOLDEN));
    rng.set_stream(index as u64);
    rng
}

fn uniform_in(rng: &mut ChaCha8Rng, lower: &[f64], upper: &[f64]) -> DVector<f64> {
    DVector::from_iterator(
        lower.len(),
        lower.iter().zip(upper).map(|(l, u)| rng.random_range(*l..*u)),
    )
}

/// Sinusoidal joint-velocity script `A sin(2π f_j t + φ_j)`.
#[derive(Debug, Clone)]
struct Motion {
    amplitude: f64,
    frequencies: Vec<f64>,
    phases: Vec<f64>,
}

impl Motion {
    fn random(rng: &mut ChaCha8Rng, n: usize, amplitude: f64, frequency: f64, jitter: f64) -> Self {
        Self {
            amplitude,
            frequencies: (0..n)
                .map(|_| frequency * (1.0 + jitter * rng.random_range(-1.0..1.0)))
                .collect(),
            phases: (0..n).map(|_| rng.random_range(0.0..TAU)).collect(),
        }
    }

    fn at(&self, t: f64) -> DVector<f64> {
        DVector::from_iterator(
            self.phases.len(),
            self.frequencies
                .iter()
                .zip(&self.phases)
                .map(|(f, p)| self.amplitude * (TAU * f * t + p).sin()),
        )
    }
}

/// Everything shared by the trials of one scenario.
#[derive(Debug)]
pub struct ScenarioContext {
    scenario: Scenario,
    visual: Arc<dyn SensoryModel>,
    precisions: PrecisionSet,
    fk: AnalyticFk,
}

impl ScenarioContext {
    pub fn new(scenario: &Scenario) -> Result<Self> {
        scenario.validate()?;
        let fk = AnalyticFk::with_links(&scenario.world.link_lengths)?;
        let visual: Arc<dyn SensoryModel> = match scenario.sensory_model.kind {
            SensoryModelKind::Analytic => Arc::new(fk.clone()),
            SensoryModelKind::Gpr => Arc::new(load_or_fit_gpr(scenario, &fk)?),
        };
        if visual.input_dim() != scenario.world.n_joints() {
            return Err(AifError::invalid("sensory model input does not match the arm"));
        }
        Ok(Self {
            scenario: scenario.clone(),
            visual,
            precisions: scenario.precisions.build(scenario.world.n_joints())?,
            fk,
        })
    }

    pub fn scenario(&self) -> &Scenario {
        &self.scenario
    }

    fn build_agent(&self, goal: Option<&Goal>) -> Result<Agent> {
        let s = &self.scenario;
        let dynamics: Arc<dyn DynamicsModel> = match goal {
            Some(g) => Arc::new(AttractorDynamics::with_gain(
                Some(self.visual.clone()),
                g.clone(),
                s.goal.gain,
            )?),
            None => Arc::new(LinearDynamics::zero()),
        };
        let mut cfg = s.agent.clone();
        if !s.name.agent_acts() {
            cfg.k_a = 0.0;
        }
        Agent::new(
            cfg,
            GenerativeModel::new(Some(self.visual.clone()), dynamics),
            self.precisions.clone(),
        )
    }

    fn make_goal(&self, rng: &mut ChaCha8Rng, q0: &DVector<f64>) -> Result<Option<Goal>> {
        let spec = &self.scenario.goal;
        let p = &self.scenario.protocol;
        let in_space = |q: &DVector<f64>| -> Result<Goal> {
            Ok(match spec.space {
                GoalSpace::Visual => Goal::visual(self.fk.predict(q)?),
                GoalSpace::Joints => Goal::joints(q.clone()),
            })
        };
        Ok(match spec.kind {
            GoalKind::None => None,
            GoalKind::Random => Some(in_space(&uniform_in(rng, &p.joint_lower, &p.joint_upper))?),
            GoalKind::Current => Some(in_space(q0)?),
            GoalKind::Fixed => Some(Goal {
                desired_visual: spec.desired_visual.map(|v| Vector2::new(v[0], v[1])),
                desired_joints: spec.desired_joints.as_ref().map(|q| DVector::from_row_slice(q)),
            }),
        })
    }

    fn prior_offset(&self, rng: &mut ChaCha8Rng, q0: &DVector<f64>) -> DVector<f64> {
        let p = &self.scenario.protocol;
        let bounded = |rng: &mut ChaCha8Rng, b: f64| {
            q0 + DVector::from_fn(q0.len(), |_, _| rng.random_range(-b..=b))
        };
        match p.prior_level {
            0 => q0.clone(),
            1 => bounded(rng, 0.2),
            2 => bounded(rng, 0.8),
            _ => uniform_in(rng, &p.joint_lower, &p.joint_upper),
        }
    }
}

fn load_or_fit_gpr(scenario: &Scenario, fk: &AnalyticFk) -> Result<GprModel> {
    let spec = &scenario.sensory_model;
    if let Some(path) = &spec.gpr_file {
        return GprModel::load(path);
    }
    let p = &scenario.protocol;
    let lower: Vec<f64> = p.joint_lower.iter().map(|l| l - spec.gpr_margin).collect();
    let upper: Vec<f64> = p.joint_upper.iter().map(|u| u + spec.gpr_margin).collect();
    let (x, y) = fk_training_set(fk, spec.gpr_samples, &lower, &upper)?;
    GprModel::fit(x, y, spec.gpr)
}

/// What moves the arm during a trial.
enum Driver {
    Agent,
    Script(Motion),
}

/// A second arm whose camera image replaces the agent's own.
struct OtherArm {
    world: ArmWorld,
    motion: Motion,
}

struct Simulation {
    rows: Vec<StepRow>,
    window: Option<EvidenceWindow>,
}

fn simulate(
    agent: &Agent,
    world: &mut ArmWorld,
    prior: &DVector<f64>,
    driver: &Driver,
    mut other: Option<OtherArm>,
    mut window: Option<EvidenceWindow>,
    duration: usize,
) -> Result<Simulation> {
    let dt = agent.config().dt;
    let mut state = agent.initial_state(prior)?;
    let mut rows = Vec::with_capacity(duration);
    for k in 0..duration {
        let mut obs = world.observe();
        if let Some(o) = other.as_mut() {
            let seen = o.world.observe();
            obs.visual = obs.visual.and(seen.visual);
        }
        let perturb_active = world.config().perturbation.active(world.step_index());
        let next = agent.tick(&state, &obs)?;
        let report = next.last_report.as_ref().expect("tick records a report");
        if let Some(w) = window.as_mut() {
            w.update(report)?;
        }
        let command = match driver {
            Driver::Agent => next.a.clone(),
            Driver::Script(m) => m.at(world.time()),
        };
        rows.push(StepRow {
            step: k,
            t: world.time(),
            z0_est: next.z.order(0).iter().copied().collect(),
            q_true: world.q().iter().copied().collect(),
            action: command.iter().copied().collect(),
            vfe: report.value,
            e_proprio: report.sensory_residuals.norm(Channel::ProprioPos).unwrap_or(0.0),
            e_visual: report.sensory_residuals.norm(Channel::Visual),
            perturb_active,
        });
        world.step(&command, dt)?;
        if let Some(o) = other.as_mut() {
            let c = o.motion.at(o.world.time());
            o.world.step(&c, dt)?;
        }
        state = next;
    }
    Ok(Simulation {
        rows,
        window,
    })
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

fn estimation_error(row: &StepRow) -> f64 {
    dist(&row.z0_est, &row.q_true)
}

impl ScenarioContext {
    fn ee(&self, q: &[f64]) -> Vector2<f64> {
        self.fk
            .predict(&DVector::from_row_slice(q))
            .expect("rows match the arm")
    }

    /// Final errors, read off the last logged row: against the goal where
    /// one exists, otherwise the estimation errors.
    fn final_errors(&self, rows: &[StepRow], goal: Option<&Goal>) -> (f64, f64) {
        let last = rows.last().expect("duration >= 1");
        let q = DVector::from_row_slice(&last.q_true);
        let z0 = DVector::from_row_slice(&last.z0_est);
        let joint = match goal.and_then(|g| g.desired_joints.as_ref()) {
            Some(qd) => (&q - qd).norm(),
            None => (&q - &z0).norm(),
        };
        let ee_true = self.ee(&last.q_true);
        let ee = match goal.and_then(|g| g.desired_visual) {
            Some(p) => (ee_true - p).norm(),
            None => (ee_true - self.ee(&last.z0_est)).norm(),
        };
        (joint, ee)
    }

    fn world_for(&self, cfg: WorldConfig, q0: DVector<f64>, rng: &mut ChaCha8Rng) -> Result<ArmWorld> {
        let seed: u64 = rng.random();
        ArmWorld::new(cfg, q0, seed)
    }

    fn motion(&self, rng: &mut ChaCha8Rng) -> Motion {
        let p = &self.scenario.protocol;
        Motion::random(rng, self.scenario.world.n_joints(), p.motion_amplitude, p.motion_frequency, 0.0)
    }

    fn run_standard(&self, index: usize) -> Result<TrialRecord> {
        let s = &self.scenario;
        let p = &s.protocol;
        let mut rng = trial_rng(s.seed, 0, index);
        let q0 = uniform_in(&mut rng, &p.joint_lower, &p.joint_upper);
        let goal = self.make_goal(&mut rng, &q0)?;
        let prior = self.prior_offset(&mut rng, &q0);
        log::debug!("trial {index}: q0 {:?} goal {:?}", q0.as_slice(), goal);
        let motion = self.motion(&mut rng);
        let mut world = self.world_for(s.world.clone(), q0, &mut rng)?;
        let agent = self.build_agent(goal.as_ref())?;
        let driver = if s.name.agent_acts() {
            Driver::Agent
        } else {
            Driver::Script(motion)
        };
        let sim = simulate(&agent, &mut world, &prior, &driver, None, None, s.duration)?;
        let (joint, ee) = self.final_errors(&sim.rows, goal.as_ref());

        let mut summary = TrialSummary::new(index, joint, ee, false);
        match s.name {
            ScenarioKind::EstimationNoise => summary.converged = joint < JOINT_TOLERANCE,
            ScenarioKind::Reaching => summary.converged = ee < EE_TOLERANCE,
            ScenarioKind::VisualShiftAdaptation => {
                let pert = &s.world.perturbation;
                let t0 = pert.shift_step as usize;
                let t1 = t0 + p.response_steps;
                let shift = Vector2::new(pert.visual_shift[0], pert.visual_shift[1]);
                // End-effector position averaged over the steps just before
                // each endpoint, so sensor jitter does not decide the sign.
                let settled = |end: usize| {
                    let rows = &sim.rows[end.saturating_sub(RESPONSE_AVERAGE)..end.max(1)];
                    rows.iter().map(|r| self.ee(&r.q_true)).sum::<Vector2<f64>>() / rows.len() as f64
                };
                let response = (settled(t1.min(sim.rows.len())) - settled(t0)).dot(&shift.normalize());
                summary.shift_response_m = Some(response);
                summary.converged = response < 0.0;
            }
            ScenarioKind::BrokenSensor => {
                let drop = s
                    .world
                    .perturbation
                    .broken_channels
                    .iter()
                    .map(|b| b.step as usize)
                    .min()
                    .unwrap_or(0)
                    .min(sim.rows.len());
                let mean = |rows: &[StepRow]| {
                    rows.iter().map(estimation_error).sum::<f64>() / rows.len().max(1) as f64
                };
                let pre = mean(&sim.rows[drop / 2..drop]);
                let post = mean(&sim.rows[drop..]);
                summary.pre_drop_err_rad = Some(pre);
                summary.post_drop_err_rad = Some(post);
                summary.converged = post < DROP_ERROR_RATIO * pre;
            }
            ScenarioKind::Jupiter | ScenarioKind::SelfRecognition => {
                unreachable!("handled by dedicated runners")
            }
        }
        Ok(TrialRecord {
            n_joints: s.world.n_joints(),
            rows: sim.rows,
            summary,
        })
    }

    /// The same trial at the baseline gravity and at the comparison gravity.
    fn run_jupiter(&self, index: usize) -> Result<Vec<TrialRecord>> {
        let s = &self.scenario;
        let p = &s.protocol;
        [s.world.gravity, p.comparison_gravity]
            .into_iter()
            .map(|gravity| {
                let mut rng = trial_rng(s.seed, 0, index);
                let q0 = uniform_in(&mut rng, &p.joint_lower, &p.joint_upper);
                let goal = self.make_goal(&mut rng, &q0)?;
                let mut cfg = s.world.clone();
                cfg.gravity = gravity;
                let mut world = self.world_for(cfg, q0.clone(), &mut rng)?;
                let agent = self.build_agent(goal.as_ref())?;
                let sim = simulate(&agent, &mut world, &q0, &Driver::Agent, None, None, s.duration)?;
                let (joint, ee) = self.final_errors(&sim.rows, goal.as_ref());
                let reference: Vec<f64> = match goal.as_ref().and_then(|g| g.desired_joints.as_ref()) {
                    Some(qd) => qd.iter().copied().collect(),
                    None => q0.iter().copied().collect(),
                };
                let tracking = sim.rows.iter().map(|r| dist(&r.q_true, &reference)).sum::<f64>()
                    / sim.rows.len() as f64;
                let mut summary = TrialSummary::new(index, joint, ee, joint < JOINT_TOLERANCE);
                summary.variant = Some(format!("g{gravity}"));
                summary.tracking_err_rad = Some(tracking);
                Ok(TrialRecord {
                    n_joints: s.world.n_joints(),
                    rows: sim.rows,
                    summary,
                })
            })
            .collect()
    }

    /// One self/other run: the arm follows a scripted velocity profile while
    /// the camera sees either the same arm or an independent one that starts
    /// at the same pose and moves on its own.
    fn recognition_run(&self, stream: u64, index: usize, is_self: bool, threshold: f64) -> Result<(Simulation, f64)> {
        let s = &self.scenario;
        let p = &s.protocol;
        let mut rng = trial_rng(s.seed, stream, index);
        let q0 = uniform_in(&mut rng, &p.joint_lower, &p.joint_upper);
        let motion = self.motion(&mut rng);
        let other_motion =
            Motion::random(&mut rng, s.world.n_joints(), p.motion_amplitude, p.motion_frequency, 0.5);
        let mut world = self.world_for(s.world.clone(), q0.clone(), &mut rng)?;
        let other_world = self.world_for(s.world.clone(), q0.clone(), &mut rng)?;
        let other = (!is_self).then_some(OtherArm {
            world: other_world,
            motion: other_motion,
        });
        let agent = self.build_agent(None)?;
        let window = EvidenceWindow::new(p.window, threshold)?;
        let sim = simulate(&agent, &mut world, &q0, &Driver::Script(motion), other, Some(window), s.duration)?;
        let mean = sim
            .window
            .as_ref()
            .and_then(EvidenceWindow::mean)
            .ok_or(AifError::EmptyWindow)?;
        Ok((sim, mean))
    }

    /// Midpoint threshold from the calibration runs.
    pub fn calibrate_self_threshold(&self) -> Result<f64> {
        let runs = self.scenario.protocol.calibration_runs;
        let means = |is_self: bool| -> Result<Vec<f64>> {
            let stream = CALIBRATION_STREAM + u64::from(is_self);
            (0..runs)
                .into_par_iter()
                .map(|i| self.recognition_run(stream, i, is_self, f64::INFINITY).map(|(_, m)| m))
                .collect()
        };
        calibrate_threshold(&means(true)?, &means(false)?)
    }

    fn run_recognition_trial(&self, index: usize, threshold: f64) -> Result<TrialRecord> {
        let label = index % 2 == 0;
        let (sim, _) = self.recognition_run(0, index, label, threshold)?;
        let verdict = sim.window.as_ref().ok_or(AifError::EmptyWindow)?.classify()?;
        let last = sim.rows.last().expect("duration >= 1");
        let joint = estimation_error(last);
        let ee = (self.ee(&last.z0_est) - self.ee(&last.q_true)).norm();
        let mut summary = TrialSummary::new(index, joint, ee, verdict.is_self == label);
        summary.label_self = Some(label);
        summary.classified_self = Some(verdict.is_self);
        summary.mean_evidence = Some(verdict.mean_evidence);
        Ok(TrialRecord {
            n_joints: self.scenario.world.n_joints(),
            rows: sim.rows,
            summary,
        })
    }

    /// Runs every trial, in parallel, returning records in trial order.
    pub fn run(&self) -> Result<Vec<TrialRecord>> {
        let threshold = match self.scenario.name {
            ScenarioKind::SelfRecognition => Some(self.calibrate_self_threshold()?),
            _ => None,
        };
        let per_trial: Vec<Result<Vec<TrialRecord>>> = (0..self.scenario.trials)
            .into_par_iter()
            .map(|i| {
                let out = match (self.scenario.name, threshold) {
                    (ScenarioKind::Jupiter, _) => self.run_jupiter(i),
                    (ScenarioKind::SelfRecognition, Some(t)) => self.run_recognition_trial(i, t).map(|r| vec![r]),
                    _ => self.run_standard(i).map(|r| vec![r]),
                };
                out.map_err(|e| AifError::Trial {
                    trial: i,
                    source: Box::new(e),
                })
            })
            .collect();
        let mut records = Vec::new();
        for r in per_trial {
            records.extend(r?);
        }
        Ok(records)
    }
}

/// Executes every trial of `scenario`.
pub fn run_scenario(scenario: &Scenario) -> Result<Vec<TrialRecord>> {
    ScenarioContext::new(scenario)?.run()
}
