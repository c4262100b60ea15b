mod common;

use common::{input, loose_bounds, synthetic_log, truth};
use funnel_mpc::learning::{
    check_feasible_params, learn_linear, required_umax_rho, rho_for, LearnOptions, LinearModelParams, ParamBounds, SignalLog,
};

#[test]
fn truth_is_admissible() {
    assert!(check_feasible_params(&truth(), &loose_bounds()).is_ok());
}

#[test]
fn recovers_synthetic_linear_system() {
    let b = loose_bounds();
    let log = synthetic_log(&truth(), 0.4, 3.0, 1e-3, input);
    let start = LinearModelParams::trivial(1, 1, 2, b.sigma());
    let opts = LearnOptions { max_iter: 2000, ..Default::default() };
    let out = learn_linear(&log, 0.0, 3.0, &b, &start, &opts).unwrap();
    assert!(out.residual <= out.residual_before);
    assert!(out.residual <= 1e-6, "residual {}", out.residual);
    assert!(check_feasible_params(&out.params, &b).is_ok());

    // Playback of the learned model on fresh data stays close as well.
    let fresh = synthetic_log(&truth(), 0.4, 3.0, 1e-3, |t| (2.0 * t).cos());
    let learned = synthetic_log(&out.params, 0.4, 3.0, 1e-3, |t| (2.0 * t).cos());
    let dev = fresh.y.iter().zip(&learned.y).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    assert!(dev <= 1e-5, "deviation {dev}");
}

#[test]
fn residual_never_increases_across_learning_steps() {
    let b = loose_bounds();
    let log = synthetic_log(&truth(), -0.2, 2.0, 1e-3, input);
    let mut params = LinearModelParams::trivial(1, 1, 2, b.sigma());
    let mut last = f64::INFINITY;
    for _ in 0..4 {
        let opts = LearnOptions { max_iter: 5, ..Default::default() };
        let out = learn_linear(&log, 0.0, 2.0, &b, &params, &opts).unwrap();
        assert!(out.residual <= out.residual_before + 1e-9);
        assert!(out.residual <= last + 1e-9);
        last = out.residual;
        params = out.params;
    }
}

#[test]
fn no_excitation_keeps_previous_parameters() {
    let b = loose_bounds();
    let mut log = SignalLog::new(1, 1);
    for i in 0..=500 {
        log.push(i as f64 * 1e-3, &[0.0], &[0.0], &[0.0], &[0.0]);
    }
    let mut prev = LinearModelParams::trivial(1, 1, 2, b.sigma());
    prev.r_mats[0][(0, 0)] = -0.5;
    let out = learn_linear(&log, 0.0, 0.5, &b, &prev, &LearnOptions::default()).unwrap();
    assert!(out.degenerate);
    assert_eq!(out.params, prev);
}

#[test]
fn reactor_bounds_admit_input_limit() {
    use funnel_mpc::funnel::{AuxiliaryDesign, ExpFunnel, FunnelSpec};
    use std::sync::Arc;
    let b = ParamBounds { r_bar: 1.3, s_bar: 1.4, gamma_bar: 1.0, d_bar: 2.5, p_bar: 1.0 / 400.0, eta_bar: 0.91, y_bar: 341.4 };
    let spec = FunnelSpec::new(Arc::new(ExpFunnel::new(0.0, 0.0, 40.0)), (0.0, 10.0)).unwrap();
    let design = AuxiliaryDesign::first_order(&spec, 1);
    let (u_req, _) = required_umax_rho(&b, &design, 33.55);
    assert!(u_req <= 600.0, "required {u_req}");
    let rho = rho_for(&b, 1, 600.0);
    assert!(rho <= 1125.0, "rho {rho}");
    let hand = 1.3 * 341.4 + 1.4 * 0.91 + 2.5 + 33.55;
    assert!((u_req - hand).abs() < 1e-9);
}
