use std::f64::consts::PI;
use tomoalign::driver::{compute_metrics, AlignErrorMetrics, StopReason};
use tomoalign::phantom::{make_misalignment, make_phantom, MisalignSpec, PhantomSpec};
use tomoalign::*;

struct Instance {
    proj: Projector<f64>,
    data: ProjectionStack<f64>,
    truth: AlignStack<f64>,
}

/// Consistent data from the bicubic model itself.
fn instance(n: usize, n_proj: usize, shift: f64) -> Instance {
    let u: Volume<f64> = make_phantom(&PhantomSpec { n, n_ellipsoids: 5, ..PhantomSpec::default() });
    let angles = AlignStack::uniform_angles(n_proj, 0.0, PI, false);
    let truth = make_misalignment(&angles, &MisalignSpec::shift_only(shift, 4)).unwrap();
    let proj = Projector::new(u.shape(), angles, InterpScheme::BICUBIC, None).unwrap();
    let data = proj.project(&u, &truth);
    Instance { proj, data, truth }
}

fn shift_fit() -> [bool; N_PARAMS] {
    [true, true, false, false, false, false]
}

#[test]
fn starting_at_the_truth_stops_after_one_iteration() {
    let inst = instance(16, 12, 1.0);
    let cfg = DriverConfig {
        recon: ReconConfig { alpha: 1e-4, max_iter: 2000, ..ReconConfig::default() },
        epsilon_schedule: EpsilonSchedule::Fixed { epsilon: 1e-10 },
        ..DriverConfig::default()
    };
    let rep = run_joint(&inst.proj, &inst.data, &inst.truth, &cfg, None).unwrap();
    assert_eq!(rep.records.len(), 1);
    assert_eq!(rep.stop, StopReason::Increment);
    assert!(rep.records[0].max_increment < 0.05);
}

#[test]
fn metrics_vanish_at_truth_and_ignore_redundant_offsets() {
    let inst = instance(8, 10, 1.0);
    let weights = AlignWeights::for_grid(inst.proj.shape);
    let zero = compute_metrics(&inst.truth, &inst.truth, &weights).unwrap();
    assert_eq!(
        zero,
        AlignErrorMetrics { shift_rms: 0.0, theta_xy_rms: 0.0, theta_yz_rms: 0.0, theta_zx_rms: 0.0, non_tomo_rms: 0.0, weighted_rms: 0.0 }
    );
    let mut estimate = inst.truth.scaled(0.6);
    estimate.params[3].theta_xy += 0.01;
    let base = compute_metrics(&estimate, &inst.truth, &weights).unwrap();
    let mut offset = estimate.clone();
    for p in &mut offset.params {
        p.theta_zx += 0.1;
        p.shift[1] -= 0.7;
    }
    let moved = compute_metrics(&offset, &inst.truth, &weights).unwrap();
    for (x, y) in [
        (base.shift_rms, moved.shift_rms),
        (base.theta_zx_rms, moved.theta_zx_rms),
        (base.non_tomo_rms, moved.non_tomo_rms),
        (base.weighted_rms, moved.weighted_rms),
    ] {
        assert!((x - y).abs() <= 1e-12);
    }
}

#[test]
fn wide_box_prox_matches_smooth_iterates() {
    let inst = instance(12, 8, 1.0);
    let a0 = AlignStack::zeros(inst.truth.nominal_angles.clone());
    let smooth = DriverConfig {
        max_outer: 3,
        fit: shift_fit(),
        recon: ReconConfig { alpha: 1.0, ..ReconConfig::default() },
        ..DriverConfig::default()
    };
    let prox = DriverConfig {
        algorithm: Algorithm::Prox,
        box_lo: Some(AlignParams::from_array([-100.0; N_PARAMS])),
        box_hi: Some(AlignParams::from_array([100.0; N_PARAMS])),
        ..smooth.clone()
    };
    let a = run_joint(&inst.proj, &inst.data, &a0, &smooth, None).unwrap();
    let b = run_joint(&inst.proj, &inst.data, &a0, &prox, None).unwrap();
    assert_eq!(a.records, b.records);
    assert_eq!(a.align, b.align);
}

#[test]
fn tight_box_prox_keeps_iterates_inside() {
    let inst = instance(12, 8, 1.5);
    let a0 = AlignStack::zeros(inst.truth.nominal_angles.clone());
    let lo = AlignParams::from_array([-0.2; N_PARAMS]);
    let hi = AlignParams::from_array([0.2; N_PARAMS]);
    let cfg = DriverConfig {
        algorithm: Algorithm::Prox,
        max_outer: 3,
        fit: shift_fit(),
        box_lo: Some(lo),
        box_hi: Some(hi),
        recon: ReconConfig { alpha: 1.0, ..ReconConfig::default() },
        ..DriverConfig::default()
    };
    let rep = run_joint(&inst.proj, &inst.data, &a0, &cfg, None).unwrap();
    assert!(rep.align.to_flat().iter().all(|v| v.abs() <= 0.2));
}

#[test]
fn optimality_vanishes_at_a_stationary_point() {
    let inst = instance(8, 16, 0.6);
    let cfg = DriverConfig {
        max_outer: 1,
        epsilon_schedule: EpsilonSchedule::Fixed { epsilon: 1e-14 },
        recon: ReconConfig { alpha: 1e-10, max_iter: 10_000, ..ReconConfig::default() },
        ..DriverConfig::default()
    };
    let rep = run_joint(&inst.proj, &inst.data, &inst.truth, &cfg, None).unwrap();
    assert!(rep.records[0].optimality <= 1e-8, "{:.3e}", rep.records[0].optimality);
}

// The tether makes the reduced problem strongly convex; without it the
// nearly redundant shift directions dominate the tail.
#[test]
fn geometric_tolerance_gives_linear_convergence() {
    let inst = instance(8, 6, 0.6);
    let a0 = AlignStack::zeros(inst.truth.nominal_angles.clone());
    let base = DriverConfig {
        stop_increment: 1e-300,
        fit: shift_fit(),
        tether_lambda: 1.0,
        recon: ReconConfig { alpha: 1e-2, max_iter: 10_000, ..ReconConfig::default() },
        ..DriverConfig::default()
    };
    let reference = DriverConfig {
        max_outer: 200,
        epsilon_schedule: EpsilonSchedule::Fixed { epsilon: 1e-14 },
        ..base.clone()
    };
    let f_star = run_joint(&inst.proj, &inst.data, &a0, &reference, None).unwrap().records.last().unwrap().objective;
    let cfg = DriverConfig {
        max_outer: 15,
        epsilon_schedule: EpsilonSchedule::Geometric { epsilon0: 1e-1, ratio: 0.5 },
        ..base
    };
    let rep = run_joint(&inst.proj, &inst.data, &a0, &cfg, None).unwrap();
    let gaps: Vec<f64> = rep.records.iter().map(|r| r.objective - f_star).collect();
    let ys: Vec<f64> = gaps.iter().map(|g| g.abs().ln()).collect();
    let xs: Vec<f64> = (0..ys.len()).map(|k| k as f64).collect();
    let r2 = r_squared(&xs, &ys);
    assert!(gaps.iter().all(|&g| g > 0.0));
    assert!(r2 >= 0.95, "R² {r2:.4}, gaps {gaps:?}");
}

fn r_squared(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let syy: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
    sxy * sxy / (sxx * syy)
}
