mod common;

use proptest::prelude::*;
use sceq::grid::{ScalarField, SpaceTimeGrid, TimeAxis};
use sceq::model::{effective_terminal, Cost, Drift, ProblemInstance, TerminalLoss};
use sceq::obstacle::*;
use sceq::operators::{implicit_step, Boundary, NodeCoeffs, OperatorStencil};
use sceq::Error;

fn zero_coupling(g: &SpaceTimeGrid) -> ScalarField {
    ScalarField::zeros(*g, TimeAxis::Forward)
}

fn direct_opts() -> ObstacleSolveOptions {
    ObstacleSolveOptions { path: SolverPath::Direct, ..Default::default() }
}

#[test]
fn zero_data_gives_constant_solution_at_every_eps() {
    let (mut inst, g) = common::canonical_coarse();
    inst.running_loss.scale = 0.0;
    inst.terminal_loss = TerminalLoss::Quadratic { scale: 0.0 };
    inst.drift = Drift::MeanReverting { b: 0.25, a: 0.0 };
    for eps in [1e-1, 1e-2, 1e-4] {
        let opts = ObstacleSolveOptions::default().with_eps_final(eps);
        let sol = solve_penalized(&inst, &g, &zero_coupling(&g), &opts).unwrap();
        // the right boundary carries the obstacle value c = 1 and feeds a
        // thin layer; away from it the terminal slope 0 persists
        for m in 0..g.nt {
            for i in (0..g.nx).filter(|&i| g.x(i) < g.x_max - 2.0) {
                assert!(sol.v.get(i, m).abs() < 1e-12, "i = {i}, m = {m}");
            }
        }
    }
}

#[test]
fn canonical_solution_respects_obstacle_and_monotonicity() {
    let (inst, g) = common::canonical();
    let sol = solve(&inst, &g, &zero_coupling(&g), &ObstacleSolveOptions::default()).unwrap();
    let term = effective_terminal(&inst).unwrap();
    let slack = 10.0 * sol.stats.eps_final * sol.stats.penalty_scale;
    for m in 0..g.nt {
        for i in 0..g.nx {
            let v = sol.v.get(i, m);
            assert!(v <= 1.0 + slack, "upper bound at i = {i}, m = {m}");
            assert!(v >= -1e-10);
            if i > 0 {
                assert!(v - sol.v.get(i - 1, m) >= -1e-8);
            }
        }
    }
    // Left of the terminal threshold the terminal slope is a lower bound,
    // except next to the running-loss centre x0 = −0.95 where this instance
    // has L F̃′ + H_x < 0 and v drops below F̃′ immediately.
    for m in 0..g.nt {
        for i in 0..g.nx {
            if g.x(i) <= term.threshold && (g.x(i) + 0.95).abs() > 0.2 {
                let gap = sol.v.get(i, m) - term.slope(g.x(i));
                assert!(gap >= -1e-8, "v − F̃′ = {gap:e} at x = {}, m = {m}", g.x(i));
            }
        }
    }
}

#[test]
fn eps_levels_agree() {
    let (inst, g) = common::canonical();
    let a = solve_penalized(&inst, &g, &zero_coupling(&g), &ObstacleSolveOptions::default().with_eps_final(1e-3)).unwrap();
    let b = solve_penalized(&inst, &g, &zero_coupling(&g), &ObstacleSolveOptions::default().with_eps_final(1e-4)).unwrap();
    let diff = a.v.max_abs_diff(&b.v);
    assert!(diff < 5e-3, "ε study difference {diff:e}");
}

#[test]
fn direct_and_penalty_paths_agree() {
    let (inst, g) = common::canonical();
    let a = solve(&inst, &g, &zero_coupling(&g), &ObstacleSolveOptions::default()).unwrap();
    let b = solve(&inst, &g, &zero_coupling(&g), &direct_opts()).unwrap();
    assert!(a.v.max_abs_diff(&b.v) < 5e-3);
}

#[test]
fn cheap_purchase_binds_inside_the_window() {
    // a·c < max H_x, so the obstacle is reached at interior nodes
    let (mut inst, g) = common::canonical();
    inst.cost = Cost::Constant { c: 0.3 };
    let a = solve(&inst, &g, &zero_coupling(&g), &ObstacleSolveOptions::default()).unwrap();
    let b = solve(&inst, &g, &zero_coupling(&g), &direct_opts()).unwrap();
    let gam = extract_boundary(&b.v, &inst, 1e-9);
    let last = g.nt - 1;
    assert!(gam.values[last] < g.x_max - 1.0, "Γ = {}", gam.values[last]);
    assert!(b.v.values().iter().all(|&v| v <= 0.3));
    // the penalty overshoot is ε·ln(excess / C_n) with the tiny far-left C_n
    assert!(a.v.max_abs_diff(&b.v) < 5e-3);
}

/// Unconstrained implicit march with the same coefficients and boundary data.
fn linear_march(inst: &ProblemInstance, g: &SpaceTimeGrid) -> ScalarField {
    let term = effective_terminal(inst).unwrap();
    let xs = g.xs();
    let mut v = ScalarField::zeros(*g, TimeAxis::Reversed);
    let c_end = inst.cost.value(g.horizon);
    let row0: Vec<f64> = xs.iter().map(|&x| term.slope(x).min(c_end)).collect();
    v.row_mut(0).copy_from_slice(&row0);
    for m in 0..g.nt - 1 {
        let t = g.horizon - g.t(m + 1);
        let coeffs: Vec<NodeCoeffs> = xs
            .iter()
            .map(|&x| {
                let s = inst.volatility.value(x, t);
                NodeCoeffs {
                    diffusion: 0.5 * s * s,
                    advection: s * inst.volatility.dx(x, t) + inst.drift.value(x, t),
                    reaction: inst.drift.dx(x, t),
                    source: inst.running_loss.dx(x, t),
                }
            })
            .collect();
        let prev = v.row(m).to_vec();
        let st = OperatorStencil::assemble(g.dx(), g.dt(), &coeffs, &prev);
        let next = implicit_step(
            &st,
            g.dx(),
            Boundary::Dirichlet(term.slope(g.x_min)),
            Boundary::Dirichlet(inst.cost.value(t)),
        )
        .unwrap();
        v.row_mut(m + 1).copy_from_slice(&next);
    }
    v
}

#[test]
fn inactive_obstacle_reduces_to_linear_solve() {
    let (mut inst, g) = common::canonical_coarse();
    inst.cost = Cost::Constant { c: 50.0 };
    let direct = solve_direct(&inst, &g, &zero_coupling(&g), &direct_opts()).unwrap();
    let linear = linear_march(&inst, &g);
    let diff = direct.v.max_abs_diff(&linear);
    assert!(diff < 1e-9, "difference {diff:e}");
}

#[test]
fn terminal_row_clamps_exactly_to_obstacle() {
    let (inst, g) = common::canonical();
    let term = effective_terminal(&inst).unwrap();
    let sol = solve_direct(&inst, &g, &zero_coupling(&g), &direct_opts()).unwrap();
    for i in 0..g.nx {
        if g.x(i) > term.threshold {
            assert_eq!(sol.v.get(i, 0), 1.0);
        }
    }
    assert!(sol.v.values().iter().all(|&v| v <= 1.0));
}

#[test]
fn coupling_outside_band_names_the_node() {
    let (inst, g) = common::canonical_coarse();
    let bad = ScalarField::from_fn(g, TimeAxis::Forward, |_, _| 1e3);
    match solve(&inst, &g, &bad, &ObstacleSolveOptions::default()) {
        Err(Error::Contract(msg)) => assert!(msg.contains("x = "), "{msg}"),
        other => panic!("expected a contract error, got {other:?}"),
    }
}

#[test]
fn boundary_of_explicit_crossing() {
    let (inst, _) = common::canonical();
    let g = SpaceTimeGrid::new(-1.0, 2.0, 31, inst.horizon, 6, 6).unwrap();
    let v = ScalarField::from_fn(g, TimeAxis::Reversed, |x, _| x.min(1.0));
    let gam = extract_boundary(&v, &inst, 0.0);
    assert!(gam.truncated_rows.is_empty());
    for &b in &gam.values {
        assert!((b - 1.0).abs() < 1e-12);
    }
}

#[test]
fn no_crossing_is_truncated_to_the_right_edge() {
    let (inst, _) = common::canonical();
    let g = SpaceTimeGrid::new(-1.0, 2.0, 31, inst.horizon, 6, 6).unwrap();
    let v = ScalarField::from_fn(g, TimeAxis::Reversed, |_, _| 0.5);
    let gam = extract_boundary(&v, &inst, 0.0);
    assert_eq!(gam.truncated_rows.len(), g.nt);
    assert!(gam.values.iter().all(|&b| b == g.x_max));
    assert_eq!(rows_near_right_edge(&gam, 10.0).len(), g.nt - 1);
}

#[test]
fn integrate_examples() {
    let g = SpaceTimeGrid::new(-1.0, 2.0, 61, 1.0, 3, 3).unwrap();
    let zero = integrate_to_value(&ScalarField::zeros(g, TimeAxis::Reversed)).unwrap();
    assert!(zero.values().iter().all(|&v| v == 0.0));
    let step = ScalarField::from_fn(g, TimeAxis::Reversed, |x, _| if (0.0..=1.0).contains(&x) { 1.0 } else { 0.0 });
    let big_v = integrate_to_value(&step).unwrap();
    for n in 0..g.nt {
        for i in 0..g.nx {
            let x = g.x(i);
            // each jump in the integrand costs the trapezoid rule half a cell
            assert!((big_v.get(i, n) - x.clamp(0.0, 1.0)).abs() <= g.dx() + 1e-12);
        }
    }
}

#[test]
fn integration_flags_left_tail_and_sign() {
    let g = SpaceTimeGrid::new(-1.0, 1.0, 21, 1.0, 3, 3).unwrap();
    let tail = ScalarField::from_fn(g, TimeAxis::Reversed, |_, _| 1.0);
    assert!(matches!(integrate_to_value(&tail), Err(Error::Window(_))));
    let neg = ScalarField::from_fn(g, TimeAxis::Reversed, |x, _| if x > 0.0 { -1.0 } else { 0.0 });
    assert!(matches!(integrate_to_value(&neg), Err(Error::Contract(_))));
}

/// max |V(x, T) − F̃(x)| with V integrated from the left edge.
fn terminal_quadrature_gap(nx: usize) -> f64 {
    let (inst, g0) = common::canonical();
    let g = SpaceTimeGrid::new(g0.x_min, g0.x_max, nx, inst.horizon, g0.nt, g0.ns).unwrap();
    let term = effective_terminal(&inst).unwrap();
    let sol = solve(&inst, &g, &zero_coupling(&g), &ObstacleSolveOptions::default()).unwrap();
    let big_v = integrate_from_left(&sol.v, term.value(g.x_min)).unwrap();
    (0..g.nx).map(|i| (big_v.get(i, g.nt - 1) - term.value(g.x(i))).abs()).fold(0.0, f64::max)
}

#[test]
fn value_meets_the_terminal_loss_to_quadrature_order() {
    let coarse = terminal_quadrature_gap(401);
    let fine = terminal_quadrature_gap(801);
    assert!(coarse < 1e-3, "{coarse:e}");
    assert!(coarse / fine > 3.0, "{coarse:e} → {fine:e}");
}

proptest! {
    #[test]
    fn nondecreasing_integrand_gives_convex_value(incs in proptest::collection::vec(0.0f64..1.0, 40)) {
        let g = SpaceTimeGrid::new(0.0, 1.0, 41, 1.0, 2, 2).unwrap();
        let mut row = vec![0.0];
        for d in &incs {
            row.push(row.last().unwrap() + d);
        }
        let v = ScalarField::from_rows(g, TimeAxis::Reversed, vec![row.clone(), row]).unwrap();
        let big_v = integrate_to_value(&v).unwrap();
        for n in 0..g.nt {
            for i in 1..g.nx - 1 {
                let d2 = big_v.get(i + 1, n) - 2.0 * big_v.get(i, n) + big_v.get(i - 1, n);
                prop_assert!(d2 >= -1e-10);
            }
        }
    }

    #[test]
    fn geometric_schedule_is_decreasing(hi in 1e-3f64..1.0, ratio in 1e-4f64..0.5, levels in 1usize..8) {
        let lo = hi * ratio;
        let s = geometric_schedule(hi, lo, levels);
        prop_assert_eq!(s.len(), levels);
        prop_assert_eq!(*s.last().unwrap(), lo);
        for w in s.windows(2) {
            prop_assert!(w[1] < w[0]);
        }
    }
}
