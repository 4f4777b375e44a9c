use impakt_core::dp::{solve_dp, ControlGrid, DpGrid, DpOptions};
use impakt_core::facelift::{facelift_checked, ConvexShift, TerminalGrid};
use impakt_core::grid::UniformGrid;
use impakt_core::hjb::{solve, HjbOptions, SolverGrid, ValueSurface};
use impakt_core::model::ImpactModel;
use impakt_core::payoff::{PayoffSpec, TerminalPayoff};

fn hjb_call(m: &ImpactModel<f64>, nx: usize, nt: usize) -> ValueSurface<f64> {
    let space = UniformGrid::new(-0.5, 2.5, nx).unwrap();
    let xs = space.nodes();
    let phi: Vec<f64> = xs.iter().map(|x| (x - 1.0f64).max(0.0)).collect();
    let tg = TerminalGrid::from_model(m, 1.0, xs, phi, ConvexShift::default()).unwrap();
    let hat = facelift_checked(&tg).unwrap();
    solve(m, &hat, &SolverGrid::new(1.0, nt, space).unwrap(), &HjbOptions::default()).unwrap()
}

#[test]
fn dp_policy_approaches_hjb_argmax() {
    let m = ImpactModel::constant(0.2, 0.1).unwrap();
    let vs = hjb_call(&m, 401, 4000);
    let payoff = PayoffSpec::Markovian(TerminalPayoff::Call { strike: 1.0 });
    let mut prev = f64::INFINITY;
    for (nx, nt, nf) in [(401, 64, 101), (801, 128, 201)] {
        let grid = DpGrid::new(1.0, nt, UniformGrid::new(-0.5, 2.5, nx).unwrap(), 1).unwrap();
        let controls = ControlGrid::for_model(&m, nf, 80).unwrap();
        let sol = solve_dp(&m, &payoff, &grid, &controls, &DpOptions::default()).unwrap();
        let worst = (0..=100)
            .map(|i| 0.5 + i as f64 * 0.01)
            .map(|x| (sol.policy_at(0, x, 0.0) - vs.control(0, x)).abs())
            .fold(0.0, f64::max);
        assert!(worst <= controls.spacing_below(1.0), "nx={nx}: {worst}");
        assert!(worst < prev);
        prev = worst;
    }
}

#[test]
fn dp_value_close_to_hjb() {
    let m = ImpactModel::constant(0.2, 0.1).unwrap();
    let v_hjb = hjb_call(&m, 401, 4000).value(0, 1.0);
    let payoff = PayoffSpec::Markovian(TerminalPayoff::Call { strike: 1.0 });
    let grid = DpGrid::new(1.0, 64, UniformGrid::new(-0.5, 2.5, 401).unwrap(), 1).unwrap();
    let controls = ControlGrid::for_model(&m, 101, 40).unwrap();
    let sol = solve_dp(&m, &payoff, &grid, &controls, &DpOptions::default()).unwrap();
    assert!((sol.value_at(0, 1.0, 0.0) - v_hjb).abs() <= 1e-2);
    assert_eq!(sol.saturated, 0);
}
