//! Acceptance run: one line per criterion, non-zero exit if any fails.

use std::fs;
use std::process::ExitCode;
use std::sync::Arc;
use std::time::{Duration, Instant};

use aif_core::experiments::{
    run_scenario, summarize_by_variant, write_outputs, Scenario, ScenarioKind, TrialRecord,
    EE_TOLERANCE, JOINT_TOLERANCE,
};
use aif_core::genmodel::{
    fk_training_set, AnalyticFk, GenerativeModel, GprModel, GprParams, LinearDynamics, SensoryModel,
};
use aif_core::{
    grad_vfe_latent, grad_vfe_obs, vfe, Agent, AgentConfig, CovarianceBlock, GeneralizedLatent,
    Observation, PrecisionSet,
};
use nalgebra::{DMatrix, DVector, Vector2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const FD_STEP: f64 = 1e-6;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn timed(limit: Option<Duration>, f: impl FnOnce() -> Outcome) -> Outcome {
    let start = Instant::now();
    let mut out = f();
    let took = start.elapsed();
    out.detail = format!("{} [{:.2} s]", out.detail, took.as_secs_f64());
    if let Some(limit) = limit {
        if took > limit {
            out.pass = false;
            out.detail += &format!(" exceeds {} s", limit.as_secs());
        }
    }
    out
}

fn rel_err(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    (a - b).norm() / b.norm().max(1e-8)
}

fn random_spd(rng: &mut ChaCha8Rng, n: usize) -> CovarianceBlock {
    let a = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
    let mut c = &a * a.transpose() + DMatrix::identity(n, n) * rng.random_range(0.1..1.0);
    // Exact symmetry: the product above can differ in the last bit.
    for i in 0..n {
        for j in 0..i {
            c[(i, j)] = c[(j, i)];
        }
    }
    CovarianceBlock::new(c).expect("SPD by construction")
}

fn random_vec(rng: &mut ChaCha8Rng, n: usize, r: f64) -> DVector<f64> {
    DVector::from_fn(n, |_, _| rng.random_range(-r..r))
}

struct Case {
    z: GeneralizedLatent,
    s: Observation,
    model: GenerativeModel,
    p: PrecisionSet,
}

fn random_case(rng: &mut ChaCha8Rng) -> Case {
    let n = 2;
    let fk: Arc<dyn SensoryModel> = Arc::new(AnalyticFk::with_links(&[1.0, 0.8]).unwrap());
    let target = GeneralizedLatent::new(vec![random_vec(rng, n, 1.0), random_vec(rng, n, 0.5)]).unwrap();
    let dynamics = LinearDynamics::new(vec![rng.random_range(0.2..2.0), rng.random_range(0.2..2.0)], Some(target))
        .unwrap();
    let model = GenerativeModel::new(Some(fk), Arc::new(dynamics));
    let p = PrecisionSet::new(
        random_spd(rng, n),
        random_spd(rng, n),
        random_spd(rng, 2),
        vec![random_spd(rng, n), random_spd(rng, n)],
    )
    .unwrap();
    let z = GeneralizedLatent::new(vec![random_vec(rng, n, 1.5), random_vec(rng, n, 1.0)]).unwrap();
    let s = Observation {
        proprio_pos: random_vec(rng, n, 1.5),
        proprio_vel: Some(random_vec(rng, n, 1.0)),
        visual: Some(Vector2::new(rng.random_range(-1.5..1.5), rng.random_range(-1.5..1.5))),
        timestamp: 0.0,
    };
    Case { z, s, model, p }
}

fn central_diff(x: &DVector<f64>, f: impl Fn(&DVector<f64>) -> f64) -> DVector<f64> {
    DVector::from_fn(x.len(), |i, _| {
        let mut hi = x.clone();
        let mut lo = x.clone();
        hi[i] += FD_STEP;
        lo[i] -= FD_STEP;
        (f(&hi) - f(&lo)) / (2.0 * FD_STEP)
    })
}

fn gradient_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst_z: f64 = 0.0;
    let mut worst_s: f64 = 0.0;
    for _ in 0..100 {
        let c = random_case(&mut rng);
        let (n, k) = (c.z.n_joints(), c.z.max_order());

        let flat = c.z.to_flat();
        let fd = central_diff(&flat, |x| {
            let z = GeneralizedLatent::from_flat(n, k, x).unwrap();
            vfe(&z, &c.s, &c.model, &c.p).unwrap().value
        });
        let g = grad_vfe_latent(&c.z, &c.s, &c.model, &c.p).unwrap().to_flat();
        worst_z = worst_z.max(rel_err(&g, &fd));

        // Observation gradient, channels stacked as pos, vel, visual.
        let pack = |s: &Observation| {
            let mut v: Vec<f64> = s.proprio_pos.iter().copied().collect();
            v.extend(s.proprio_vel.as_ref().unwrap().iter());
            v.extend(s.visual.unwrap().iter());
            DVector::from_vec(v)
        };
        let unpack = |v: &DVector<f64>| Observation {
            proprio_pos: v.rows(0, n).into_owned(),
            proprio_vel: Some(v.rows(n, n).into_owned()),
            visual: Some(Vector2::new(v[2 * n], v[2 * n + 1])),
            timestamp: 0.0,
        };
        let fd = central_diff(&pack(&c.s), |x| vfe(&c.z, &unpack(x), &c.model, &c.p).unwrap().value);
        let gs = grad_vfe_obs(&c.z, &c.s, &c.model, &c.p).unwrap();
        let mut g: Vec<f64> = gs.proprio_pos.unwrap().iter().copied().collect();
        g.extend(gs.proprio_vel.unwrap().iter());
        g.extend(gs.visual.unwrap().iter());
        worst_s = worst_s.max(rel_err(&DVector::from_vec(g), &fd));
    }
    outcome(
        worst_z < 1e-5 && worst_s < 1e-5,
        format!("100 configs, worst rel err latent {worst_z:.2e}, obs {worst_s:.2e} (< 1e-5)"),
    )
}

fn jacobian_fd(model: &dyn SensoryModel, q: &DVector<f64>) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(2, q.len());
    for j in 0..q.len() {
        let mut hi = q.clone();
        let mut lo = q.clone();
        hi[j] += FD_STEP;
        lo[j] -= FD_STEP;
        let d = (model.predict(&hi).unwrap() - model.predict(&lo).unwrap()) / (2.0 * FD_STEP);
        out.set_column(j, &d);
    }
    out
}

fn jacobian_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let fk = AnalyticFk::with_links(&[1.0, 1.0]).unwrap();
    let (x, y) = fk_training_set(&fk, 200, &[-1.5, 0.0], &[1.5, 2.7]).unwrap();
    let gpr = GprModel::fit(x, y, GprParams::default()).unwrap();
    let mut fk_worst: f64 = 0.0;
    let mut gpr_worst: f64 = 0.0;
    for _ in 0..100 {
        let q = DVector::from_vec(vec![rng.random_range(-1.5..1.5), rng.random_range(0.0..2.7)]);
        let a = fk.jacobian(&q).unwrap();
        fk_worst = fk_worst.max((DMatrix::from_iterator(2, 2, a.iter().copied()) - jacobian_fd(&fk, &q)).amax());
        let b = gpr.jacobian(&q).unwrap();
        let fd = jacobian_fd(&gpr, &q);
        let b = DMatrix::from_iterator(2, 2, b.iter().copied());
        gpr_worst = gpr_worst.max((&b - &fd).norm() / fd.norm().max(1e-8));
    }
    outcome(
        fk_worst < 1e-6 && gpr_worst < 1e-5,
        format!("100 inputs, FK max abs err {fk_worst:.2e} (< 1e-6), GPR rel err {gpr_worst:.2e} (< 1e-5)"),
    )
}

fn gpr_vs_fk() -> Outcome {
    let s = Scenario::preset(ScenarioKind::Reaching);
    let p = &s.protocol;
    let fk = AnalyticFk::with_links(&s.world.link_lengths).unwrap();
    let margin = s.sensory_model.gpr_margin;
    let lower: Vec<f64> = p.joint_lower.iter().map(|l| l - margin).collect();
    let upper: Vec<f64> = p.joint_upper.iter().map(|u| u + margin).collect();
    let (x, y) = fk_training_set(&fk, 200, &lower, &upper).unwrap();
    let gpr = GprModel::fit(x, y, GprParams::default()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let q = DVector::from_fn(2, |i, _| rng.random_range(p.joint_lower[i]..p.joint_upper[i]));
        worst = worst.max((gpr.predict_mean(&q).unwrap() - fk.predict(&q).unwrap()).norm());
    }
    outcome(worst < 1e-2, format!("200 samples, 100 held-out points, max error {worst:.2e} m (< 1e-2)"))
}

fn descent() -> Outcome {
    let mut violations = 0usize;
    let mut worst_rise: f64 = 0.0;
    for seed in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let fk: Arc<dyn SensoryModel> = Arc::new(AnalyticFk::with_links(&[1.0, 1.0]).unwrap());
        let model = GenerativeModel::new(Some(fk.clone()), Arc::new(LinearDynamics::zero()));
        let p = PrecisionSet::isotropic(2, 1.0, 1.0, 0.5, &[2.0, 2.0]).unwrap();
        let cfg = AgentConfig::new(1.0, 0.0, 0.01, 2, 1).unwrap();
        let agent = Agent::new(cfg, model, p).unwrap();
        let q = DVector::from_vec(vec![rng.random_range(-1.2..1.2), rng.random_range(0.3..2.4)]);
        let s = Observation {
            proprio_pos: &q + random_vec(&mut rng, 2, 0.1),
            proprio_vel: Some(DVector::zeros(2)),
            visual: Some(fk.predict(&q).unwrap() + Vector2::new(0.02, -0.02)),
            timestamp: 0.0,
        };
        let start = &q + random_vec(&mut rng, 2, 0.8);
        let mut state = agent.initial_state(&start).unwrap();
        let mut prev = agent.free_energy(&state.z, &s).unwrap().value;
        for _ in 0..1000 {
            state = agent.tick(&state, &s).unwrap();
            let f = agent.free_energy(&state.z, &s).unwrap().value;
            if f > prev + 1e-12 {
                violations += 1;
                worst_rise = worst_rise.max(f - prev);
            }
            prev = f;
        }
    }
    outcome(
        violations == 0,
        format!("20 seeds x 1000 steps, k_z*dt = 0.01, {violations} violations (worst rise {worst_rise:.2e})"),
    )
}

fn rate(records: &[TrialRecord], ok: impl Fn(&TrialRecord) -> bool) -> f64 {
    records.iter().filter(|r| ok(r)).count() as f64 / records.len() as f64
}

fn estimation() -> Outcome {
    let mut parts = Vec::new();
    let mut pass = true;
    for level in 1..=3u8 {
        let mut s = Scenario::preset(ScenarioKind::EstimationNoise);
        s.protocol.prior_level = level;
        let records = run_scenario(&s).unwrap();
        let r = rate(&records, |t| t.summary.final_joint_err_rad < JOINT_TOLERANCE);
        if level < 3 {
            pass &= r >= 0.95;
            parts.push(format!("level {level} {:.0}% (>= 95%)", 100.0 * r));
        } else {
            parts.push(format!("level {level} {:.0}% (reported)", 100.0 * r));
        }
    }
    outcome(pass, format!("50 trials each, sigma_proprio = 0.05 rad: {}", parts.join(", ")))
}

fn reaching() -> Outcome {
    let records = run_scenario(&Scenario::preset(ScenarioKind::Reaching)).unwrap();
    let r = rate(&records, |t| t.summary.final_ee_err_m < EE_TOLERANCE);
    outcome(r >= 0.9, format!("{} trials, {:.0}% below 0.05 m (>= 90%)", records.len(), 100.0 * r))
}

fn shift_direction() -> Outcome {
    let s = Scenario::preset(ScenarioKind::VisualShiftAdaptation);
    let shift = s.world.perturbation.visual_shift;
    let records = run_scenario(&s).unwrap();
    let r = rate(&records, |t| t.summary.shift_response_m.is_some_and(|d| d < 0.0));
    let weakest = records
        .iter()
        .filter_map(|t| t.summary.shift_response_m)
        .fold(f64::NEG_INFINITY, f64::max);
    outcome(
        r == 1.0 && (shift[0] - 0.1).abs() < 1e-12,
        format!(
            "{} trials, shift {shift:?} m, {:.0}% compensatory within {} steps (weakest {weakest:.4} m)",
            records.len(),
            100.0 * r,
            s.protocol.response_steps
        ),
    )
}

fn jupiter() -> Outcome {
    let s = Scenario::preset(ScenarioKind::Jupiter);
    let records = run_scenario(&s).unwrap();
    let by = summarize_by_variant("jupiter", &records).unwrap();
    let earth = by["g9.81"].mean_tracking_err_rad.unwrap();
    let jupiter = by["g24.79"].mean_tracking_err_rad.unwrap();
    let ratio = jupiter / earth;
    outcome(
        ratio <= 2.0 && s.protocol.comparison_gravity == 24.79 && by["g24.79"].trials == 20,
        format!("20 trials, tracking {earth:.4} rad at 9.81, {jupiter:.4} rad at 24.79, ratio {ratio:.2} (<= 2)"),
    )
}

fn self_recognition() -> Outcome {
    let records = run_scenario(&Scenario::preset(ScenarioKind::SelfRecognition)).unwrap();
    let acc = rate(&records, |t| t.summary.classified_self == t.summary.label_self);
    outcome(acc >= 0.95, format!("{} labelled trials, accuracy {:.0}% (>= 95%)", records.len(), 100.0 * acc))
}

fn csv_bytes(dir: &std::path::Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|e| e == "csv"))
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap()))
        .collect();
    files.sort();
    files
}

fn determinism() -> Outcome {
    let mut checked = 0;
    let mut same = true;
    for kind in ScenarioKind::ALL {
        let mut s = Scenario::preset(kind);
        s.trials = s.trials.min(6);
        s.duration = s.duration.min(400);
        s.protocol.calibration_runs = 4;
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        write_outputs(a.path(), kind.as_str(), &run_scenario(&s).unwrap()).unwrap();
        // Second run on a single thread: scheduling must not matter.
        let serial = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let records = serial.install(|| run_scenario(&s).unwrap());
        write_outputs(b.path(), kind.as_str(), &records).unwrap();
        let (x, y) = (csv_bytes(a.path()), csv_bytes(b.path()));
        checked += x.len();
        same &= !x.is_empty() && x == y;
    }
    outcome(same, format!("6 scenarios, {checked} CSV logs bytewise identical across reruns"))
}

fn main() -> ExitCode {
    let criteria: Vec<(&str, Option<u64>, fn() -> Outcome)> = vec![
        ("gradient oracle", Some(5), gradient_oracle),
        ("jacobian oracles", Some(5), jacobian_oracles),
        ("gpr vs analytic fk", Some(10), gpr_vs_fk),
        ("descent property", None, descent),
        ("estimation robustness", Some(60), estimation),
        ("reaching", Some(120), reaching),
        ("adaptation direction", None, shift_direction),
        ("jupiter", Some(60), jupiter),
        ("self-recognition", Some(60), self_recognition),
        ("determinism", None, determinism),
    ];
    let mut failed = 0;
    for (name, limit, f) in criteria {
        let out = timed(limit.map(Duration::from_secs), f);
        if !out.pass {
            failed += 1;
        }
        println!("{} {name}: {}", if out.pass { "PASS" } else { "FAIL" }, out.detail);
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        ExitCode::FAILURE
    } else {
        println!("all acceptance criteria passed");
        ExitCode::SUCCESS
    }
}
