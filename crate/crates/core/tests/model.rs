mod common;

use approx::assert_relative_eq;
use proptest::prelude::*;
use sceq::grid::SpaceTimeGrid;
use sceq::model::*;
use sceq::Error;

fn with_terminal(loss: TerminalLoss) -> ProblemInstance {
    let (mut inst, _) = common::canonical();
    inst.terminal_loss = loss;
    inst
}

/// min over a ∈ [0, 20] on a 1e−4 grid of F(x − a) + c a.
fn brute_force(loss: &TerminalLoss, c: f64, x: f64) -> (f64, f64) {
    let mut best = (f64::INFINITY, 0.0);
    for k in 0..=200_000 {
        let a = k as f64 * 1e-4;
        let val = loss.value(x - a) + c * a;
        if val < best.0 {
            best = (val, a);
        }
    }
    best
}

#[test]
fn effective_terminal_exponential_matches_brute_force() {
    let loss = TerminalLoss::Exponential { scale: 1.0, exponent: 1.0 };
    let term = effective_terminal(&with_terminal(loss)).unwrap();
    assert!(term.threshold.abs() < 1e-14);
    for x in [-2.0, -0.5, 0.0, 0.3, 1.0, 2.5] {
        let (bf, a) = brute_force(&loss, 1.0, x);
        let expect = if x <= 0.0 { x.exp() } else { 1.0 + x };
        assert_relative_eq!(term.value(x), expect, epsilon = 1e-12);
        assert!((term.value(x) - bf).abs() < 1e-7, "x = {x}");
        assert!((term.purchase(x) - a).abs() < 2e-4);
    }
}

#[test]
fn effective_terminal_scaled_exponential_threshold() {
    let loss = TerminalLoss::Exponential { scale: 2.0, exponent: 2.0 };
    let term = effective_terminal(&with_terminal(loss)).unwrap();
    assert_relative_eq!(term.threshold, -(4.0f64).ln() / 2.0, epsilon = 1e-14);
    for x in [-1.0, -0.7, 0.0, 0.8] {
        let (bf, _) = brute_force(&loss, 1.0, x);
        assert!((term.value(x) - bf).abs() < 1e-7);
    }
}

#[test]
fn effective_terminal_bisection_agrees_with_closed_form() {
    // Softplus with slope bound 3 crosses c = 1 where the logistic equals 1/3.
    let loss = TerminalLoss::Softplus { scale: 3.0, exponent: 2.0 };
    let term = effective_terminal(&with_terminal(loss)).unwrap();
    let expect = -(2.0f64).ln() / 2.0;
    assert!((term.threshold - expect).abs() < 1e-10);
    assert_relative_eq!(term.slope(term.threshold), 1.0, epsilon = 1e-9);
}

#[test]
fn slope_below_cost_everywhere_means_no_purchase() {
    let loss = TerminalLoss::Softplus { scale: 0.5, exponent: 1.0 };
    let term = effective_terminal(&with_terminal(loss)).unwrap();
    assert!(term.threshold.is_infinite());
    for x in [-5.0, 0.0, 50.0] {
        assert_eq!(term.purchase(x), 0.0);
        assert_eq!(term.value(x), loss.value(x));
    }
}

#[test]
fn discount_examples() {
    let e = Discount::Exponential { gamma: 0.5 };
    assert_eq!(e.eval(0.0), (1.0, -0.5));
    let h = Discount::Hyperbolic { k: 1.0 };
    assert_eq!(h.eval(1.0), (0.5, -0.25));
    assert!(Discount::Exponential { gamma: 0.0 }.is_flat());
    assert_eq!(Discount::Exponential { gamma: 0.3 }.exponential_rate(), Some(0.3));
    assert_eq!(Discount::Hyperbolic { k: 1.0 }.exponential_rate(), None);
}

#[test]
fn discount_eval_checks_range() {
    let (inst, _) = common::canonical();
    assert!(inst.discount_eval(0.05).is_ok());
    assert!(matches!(inst.discount_eval(-0.01), Err(Error::Range { .. })));
    assert!(matches!(inst.discount_eval(0.2), Err(Error::Range { .. })));
}

#[test]
fn discount_parse_round_trip() {
    assert_eq!(Discount::parse("hyperbolic:k=1").unwrap(), Discount::Hyperbolic { k: 1.0 });
    assert_eq!(Discount::parse("exponential:gamma=0.3").unwrap(), Discount::Exponential { gamma: 0.3 });
    assert_eq!(
        Discount::parse("mixture:lambda=0.5,gamma1=0.1,gamma2=1").unwrap(),
        Discount::Mixture { lambda: 0.5, gamma1: 0.1, gamma2: 1.0 }
    );
    assert_eq!(Discount::parse("flat").unwrap(), Discount::Exponential { gamma: 0.0 });
    assert!(Discount::parse("hyperbolic").unwrap_err().contains("`k`"));
    assert!(Discount::parse("hyperbolic:k=-1").is_err());
    assert!(Discount::parse("weird:k=1").is_err());
}

#[test]
fn validate_rejects_bad_parameters() {
    let (mut inst, _) = common::canonical();
    inst.volatility = Volatility::Constant { sigma: 0.0 };
    assert!(matches!(inst.validate(), Err(Error::Input(_))));
    let (mut inst, _) = common::canonical();
    inst.cost = Cost::Constant { c: f64::NAN };
    assert!(inst.validate().is_err());
}

#[test]
fn running_loss_is_c1_at_continuation_point() {
    let (inst, _) = common::canonical();
    let h = inst.running_loss;
    let x0 = h.x0;
    for t in [0.0, 0.05, 0.1] {
        assert_relative_eq!(h.value(x0 - 1e-12, t), h.value(x0 + 1e-12, t), epsilon = 1e-9);
        assert_relative_eq!(h.dx(x0 - 1e-12, t), h.dx(x0 + 1e-12, t), epsilon = 1e-9);
        assert_eq!(h.dxx(x0 + 0.1, t), 0.0);
    }
}

#[test]
fn running_loss_jet_matches_finite_differences() {
    let (inst, _) = common::canonical();
    let h = inst.running_loss;
    let e = 1e-5;
    for &(x, t) in &[(-3.0, 0.02), (-1.5, 0.07), (-0.5, 0.05)] {
        let j = h.jet(x, t);
        assert_relative_eq!(j.dx, (h.value(x + e, t) - h.value(x - e, t)) / (2.0 * e), max_relative = 1e-6);
        assert_relative_eq!(j.dt, (h.value(x, t + e) - h.value(x, t - e)) / (2.0 * e), max_relative = 1e-5, epsilon = 1e-9);
        let jp = h.jet(x + e, t);
        let jm = h.jet(x - e, t);
        assert_relative_eq!(j.dxx, (jp.dx - jm.dx) / (2.0 * e), max_relative = 1e-6, epsilon = 1e-9);
        assert_relative_eq!(j.dxxx, (jp.dxx - jm.dxx) / (2.0 * e), max_relative = 1e-6, epsilon = 1e-9);
        assert_relative_eq!(j.dxt, (h.jet(x, t + e).dx - h.jet(x, t - e).dx) / (2.0 * e), max_relative = 1e-5, epsilon = 1e-9);
    }
}

#[test]
fn instance_file_round_trips_through_toml() {
    let f = common::canonical_file();
    let again = InstanceFile::parse(&f.to_toml()).unwrap();
    assert_eq!(again.instance, f.instance);
    assert_eq!(again.grid, f.grid);
}

#[test]
fn missing_key_is_named() {
    let text = common::CANONICAL.replace("horizon = 0.1\n", "");
    match InstanceFile::parse(&text) {
        Err(Error::Config(msg)) => assert!(msg.contains("horizon"), "{msg}"),
        other => panic!("expected a config error, got {other:?}"),
    }
}

#[test]
fn canonical_parameters_pass_the_example_conditions() {
    let (inst, _) = common::canonical();
    let rep = check_remark_example(&ExampleParams::from_instance(&inst).unwrap()).unwrap();
    assert!(rep.all_pass(), "{}", rep.table());
}

#[test]
fn documented_mutations_name_their_inequality() {
    let (inst, _) = common::canonical();
    for m in documented_mutations() {
        let names = m.failures(&inst).unwrap();
        assert!(names.iter().any(|n| n == m.expected), "{}: {names:?}", m.name);
    }
}

#[test]
fn non_finite_parameter_is_an_input_error() {
    let (mut inst, _) = common::canonical();
    inst.kappa.rate = f64::INFINITY;
    let p = ExampleParams::from_instance(&inst).unwrap();
    assert!(matches!(check_remark_example(&p), Err(Error::Input(_))));
}

#[test]
fn linear_drift_and_constant_cost_pass_with_zero_margin() {
    let (inst, g) = common::canonical();
    let probe = SpaceTimeGrid::new(g.x_min, g.x_max, 91, inst.horizon, 11, 11).unwrap();
    let rep = check_assumption_grid(&inst, &probe);
    for name in ["μ_xx ≥ 0", "μ_xxx ≥ 0", "c′ ≤ 0"] {
        let item = rep.find(name).unwrap();
        assert!(item.pass, "{name}");
        assert_eq!(item.margin.abs(), 0.0);
    }
}

proptest! {
    #[test]
    fn discount_derivative_matches_finite_difference(k in 0.0f64..5.0, g in 0.0f64..5.0, lam in 0.0f64..1.0, t in 0.01f64..1.0) {
        let e = 1e-6;
        for d in [
            Discount::Hyperbolic { k },
            Discount::Exponential { gamma: g },
            Discount::Mixture { lambda: lam, gamma1: g, gamma2: k },
        ] {
            let fd = (d.value(t + e) - d.value(t - e)) / (2.0 * e);
            prop_assert!((d.derivative(t) - fd).abs() < 1e-6 * (1.0 + fd.abs()));
            prop_assert!((d.value(0.0) - 1.0).abs() < 1e-15);
            prop_assert!(d.derivative(t) <= 0.0);
        }
    }

    #[test]
    fn effective_terminal_is_below_loss_and_slope_capped(x in -4.0f64..3.0, psi in 1.0f64..6.0, scale in 0.5f64..30.0) {
        let inst = with_terminal(TerminalLoss::Exponential { scale, exponent: psi });
        let term = effective_terminal(&inst).unwrap();
        prop_assert!(term.value(x) <= inst.terminal_loss.value(x) + 1e-12);
        prop_assert!(term.slope(x) <= 1.0 + 1e-12);
        prop_assert!(term.curvature(x) >= 0.0);
    }
}
