use impakt_core::facelift::{facelift_checked, ConvexShift, TerminalGrid};
use impakt_core::grid::UniformGrid;
use impakt_core::hedge::{martingale_check, scaling_exponent, simulate_optimal, Policy, SimConfig};
use impakt_core::hjb::{solve, HjbOptions, SolverGrid, ValueSurface};
use impakt_core::model::ImpactModel;

fn call_surface(f: f64, nx: usize, nt: usize) -> (ImpactModel<f64>, ValueSurface<f64>) {
    let m = ImpactModel::constant(0.2, f).unwrap();
    let space = UniformGrid::new(-0.5, 2.5, nx).unwrap();
    let xs = space.nodes();
    let phi: Vec<f64> = xs.iter().map(|x| (x - 1.0f64).max(0.0)).collect();
    let tg = TerminalGrid::from_model(&m, 1.0, xs, phi, ConvexShift::default()).unwrap();
    let hat = facelift_checked(&tg).unwrap();
    let vs = solve(&m, &hat, &SolverGrid::new(1.0, nt, space).unwrap(), &HjbOptions::default()).unwrap();
    (m, vs)
}

#[test]
fn residual_increments_are_finite_variation() {
    let (m, vs) = call_surface(0.1, 201, 1024);
    let coarse = simulate_optimal(&vs, &m, &SimConfig::new(4000, 64, 5, 1.0)).unwrap();
    let fine = simulate_optimal(&vs, &m, &SimConfig::new(4000, 256, 5, 1.0)).unwrap();
    let b = scaling_exponent(coarse.dt, coarse.mean_abs_b_resid, fine.dt, fine.mean_abs_b_resid);
    let dx = scaling_exponent(coarse.dt, coarse.mean_abs_dx, fine.dt, fine.mean_abs_dx);
    assert!((b - 1.0).abs() < 0.2, "b_resid exponent {b}");
    assert!((dx - 0.5).abs() < 0.1, "dX exponent {dx}");
    assert!(fine.max_tracking() < coarse.max_tracking());
    assert!(coarse.min_cost >= 0.0);
}

#[test]
fn replication_error_decays_at_half_order() {
    let (m, vs) = call_surface(1e-6, 201, 1024);
    let coarse = simulate_optimal(&vs, &m, &SimConfig::new(20_000, 64, 9, 1.0)).unwrap();
    let fine = simulate_optimal(&vs, &m, &SimConfig::new(20_000, 256, 9, 1.0)).unwrap();
    let ratio = coarse.mean_abs_error() / fine.mean_abs_error();
    assert!((1.6..=2.6).contains(&ratio), "{ratio}");
    let z = fine.mean_error() / fine.error_se();
    assert!(z.abs() <= 3.0, "{z}");
}

#[test]
fn constant_overtrading_is_detected() {
    let (m, vs) = call_surface(0.1, 201, 1024);
    let cfg = SimConfig::new(20_000, 128, 2, 1.0);
    let (opt, _) = martingale_check(&vs, &m, &cfg, Policy::Optimal).unwrap();
    let (bad, _) = martingale_check(&vs, &m, &cfg, Policy::Constant(0.4)).unwrap();
    assert!(opt.passes, "{opt:?}");
    assert!(!opt.supermartingale_detected);
    assert!(bad.supermartingale_detected, "{bad:?}");
}
