use std::sync::Arc;

use aif_core::genmodel::{AnalyticFk, AttractorDynamics, GenerativeModel, LinearDynamics, SensoryModel};
use aif_core::{evaluate, CovarianceBlock, GeneralizedLatent, Goal, Observation, PrecisionSet};
use nalgebra::{DMatrix, DVector, Vector2};
use proptest::prelude::*;

fn spd(a: [f64; 4], ridge: f64) -> CovarianceBlock {
    let m = DMatrix::from_row_slice(2, 2, &a);
    let mut c = &m * m.transpose() + DMatrix::identity(2, 2) * ridge;
    c[(1, 0)] = c[(0, 1)];
    CovarianceBlock::new(c).unwrap()
}

fn arb_spd() -> impl Strategy<Value = CovarianceBlock> {
    (prop::array::uniform4(-1.0f64..1.0), 0.1f64..1.0).prop_map(|(a, r)| spd(a, r))
}

fn arb_vec(r: f64) -> impl Strategy<Value = DVector<f64>> {
    prop::array::uniform2(-r..r).prop_map(|v| DVector::from_row_slice(&v))
}

#[derive(Debug, Clone)]
struct Setup {
    z: GeneralizedLatent,
    s: Observation,
    p: PrecisionSet,
    gains: [f64; 2],
    target: GeneralizedLatent,
}

fn arb_setup() -> impl Strategy<Value = Setup> {
    (
        (arb_vec(1.5), arb_vec(1.0), arb_vec(1.5), arb_vec(1.0), arb_vec(1.5)),
        (arb_spd(), arb_spd(), arb_spd(), arb_spd(), arb_spd()),
        (prop::array::uniform2(0.1f64..2.0), arb_vec(1.0), arb_vec(0.5)),
    )
        .prop_map(|((z0, z1, sp, sv, vis), (pp, pv, pvis, d0, d1), (gains, t0, t1))| Setup {
            z: GeneralizedLatent::new(vec![z0, z1]).unwrap(),
            s: Observation {
                proprio_pos: sp,
                proprio_vel: Some(sv),
                visual: Some(Vector2::new(vis[0], vis[1])),
                timestamp: 0.0,
            },
            p: PrecisionSet::new(pp, pv, pvis, vec![d0, d1]).unwrap(),
            gains,
            target: GeneralizedLatent::new(vec![t0, t1]).unwrap(),
        })
}

fn fk() -> AnalyticFk {
    AnalyticFk::with_links(&[1.0, 0.7]).unwrap()
}

fn model(setup: &Setup) -> GenerativeModel {
    let dynamics = LinearDynamics::new(setup.gains.to_vec(), Some(setup.target.clone())).unwrap();
    GenerativeModel::new(Some(Arc::new(fk())), Arc::new(dynamics))
}

/// Straight-line evaluation of the free energy, written independently of the
/// library: every residual stacked into one vector against a block-diagonal
/// precision.
fn oracle_vfe(setup: &Setup, with_visual: bool) -> f64 {
    let z0 = setup.z.order(0);
    let z1 = setup.z.order(1);
    let fk = fk();
    let mut residuals: Vec<(DVector<f64>, &CovarianceBlock)> = vec![
        (&setup.s.proprio_pos - z0, &setup.p.proprio_pos),
        (setup.s.proprio_vel.as_ref().unwrap() - z1, &setup.p.proprio_vel),
    ];
    if with_visual {
        let g = fk.predict(z0).unwrap();
        let e = setup.s.visual.unwrap() - g;
        residuals.push((DVector::from_row_slice(e.as_slice()), &setup.p.visual));
    }
    // Dz: order 0 becomes z1, the top order becomes 0. f = A (target - z).
    let f = |k: usize| {
        DVector::from_fn(2, |i, _| setup.gains[i] * (setup.target.order(k)[i] - setup.z.order(k)[i]))
    };
    residuals.push((z1 - f(0), &setup.p.dynamics[0]));
    residuals.push((-f(1), &setup.p.dynamics[1]));

    let mut total = 0.0;
    for (e, block) in residuals {
        let cov = block.covariance().clone();
        let prec = cov.clone().try_inverse().unwrap();
        total += 0.5 * (e.transpose() * prec * &e)[(0, 0)] + 0.5 * cov.determinant().ln();
    }
    total
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn matches_independent_oracle(setup in arb_setup()) {
        let r = evaluate(&setup.z, &setup.s, &model(&setup), &setup.p).unwrap();
        let expect = oracle_vfe(&setup, true);
        prop_assert!((r.value - expect).abs() <= 1e-12 * expect.abs().max(1.0), "{} vs {}", r.value, expect);
        prop_assert!((r.sensory_term + r.dynamics_term + r.logdet_term - r.value).abs() < 1e-12 * r.value.abs().max(1.0));
    }

    #[test]
    fn dropping_a_channel_removes_exactly_its_terms(setup in arb_setup()) {
        let mut s = setup.s.clone();
        s.visual = None;
        let r = evaluate(&setup.z, &s, &model(&setup), &setup.p).unwrap();
        let expect = oracle_vfe(&setup, false);
        prop_assert!((r.value - expect).abs() <= 1e-12 * expect.abs().max(1.0));
        prop_assert!(r.grad_obs.visual.is_none() && r.sensory_residuals.visual.is_none());
    }

    #[test]
    fn value_bounded_below_by_logdets(setup in arb_setup()) {
        let r = evaluate(&setup.z, &setup.s, &model(&setup), &setup.p).unwrap();
        prop_assert!(r.sensory_term >= 0.0 && r.dynamics_term >= 0.0);
        prop_assert!(r.value >= r.logdet_term - 1e-12);
    }

    #[test]
    fn sharper_precision_raises_the_sensory_term(setup in arb_setup(), c in 0.05f64..1.0) {
        let base = evaluate(&setup.z, &setup.s, &model(&setup), &setup.p).unwrap();
        let mut p = setup.p.clone();
        p.proprio_pos = p.proprio_pos.scaled(c).unwrap();
        p.visual = p.visual.scaled(c).unwrap();
        let sharp = evaluate(&setup.z, &setup.s, &model(&setup), &p).unwrap();
        prop_assert!(sharp.sensory_term >= base.sensory_term - 1e-12);
    }

    #[test]
    fn zero_residuals_leave_only_the_normaliser(setup in arb_setup()) {
        // Put the target where the latent is and make the observation agree.
        let mut setup = setup;
        let z = GeneralizedLatent::new(vec![setup.z.order(0).clone(), DVector::zeros(2)]).unwrap();
        setup.target = z.clone();
        setup.z = z.clone();
        setup.s.proprio_pos = z.order(0).clone();
        setup.s.proprio_vel = Some(DVector::zeros(2));
        setup.s.visual = Some(fk().predict(z.order(0)).unwrap());
        let r = evaluate(&setup.z, &setup.s, &model(&setup), &setup.p).unwrap();
        prop_assert!(r.sensory_term.abs() < 1e-20 && r.dynamics_term.abs() < 1e-20);
        prop_assert!(r.grad_latent.to_flat().amax() < 1e-12);
    }

    #[test]
    fn attractor_gradient_matches_finite_differences(
        setup in arb_setup(),
        goal in prop::array::uniform2(-1.5f64..1.5),
        gain in 0.2f64..2.0,
    ) {
        // The attractor Jacobian is itself a finite difference, so the
        // tolerance is looser than for linear dynamics.
        let visual: Arc<dyn SensoryModel> = Arc::new(fk());
        let dynamics = AttractorDynamics::with_gain(
            Some(visual.clone()),
            Goal::visual(Vector2::new(goal[0], goal[1])),
            gain,
        ).unwrap();
        let m = GenerativeModel::new(Some(visual), Arc::new(dynamics));
        let g = evaluate(&setup.z, &setup.s, &m, &setup.p).unwrap().grad_latent.to_flat();
        let flat = setup.z.to_flat();
        let h = 1e-6;
        let fd = DVector::from_fn(flat.len(), |i, _| {
            let mut hi = flat.clone();
            let mut lo = flat.clone();
            hi[i] += h;
            lo[i] -= h;
            let f = |x: &DVector<f64>| {
                let z = GeneralizedLatent::from_flat(2, 1, x).unwrap();
                evaluate(&z, &setup.s, &m, &setup.p).unwrap().value
            };
            (f(&hi) - f(&lo)) / (2.0 * h)
        });
        prop_assert!((&g - &fd).norm() <= 1e-4 * fd.norm().max(1.0), "{g} vs {fd}");
    }
}
