//! Method-level order and conservation properties on the benchmark
//! problems: local error slopes, single-step invariant-defect slopes,
//! iteration-count tracking against the reference data, and behaviour of
//! the Casimir-corrected variant.

use nalgebra::DVector;
use phbvm::casimir::{step_with_casimir, step_with_casimir_opts, CasimirOptions};
use phbvm::driver::{convergence_table, fit_slope, integrate, Method, MethodSpec};
use phbvm::poisson::preset;
use phbvm::solve::{step, SolverConfig, SolverKind};
use phbvm::build_tableau;

/// Reference solution of one step: 32 substeps of the (8, 4) method, whose
/// local error is many orders below the methods under test.
fn reference_step(
    sys: &dyn phbvm::poisson::PoissonSystem,
    y0: &DVector<f64>,
    h: f64,
    cfg: &SolverConfig,
) -> DVector<f64> {
    let tab = build_tableau(8, 4).unwrap();
    let mut y = y0.clone();
    for _ in 0..32 {
        y = step(sys, &tab, &y, h / 32.0, cfg).unwrap().y1;
    }
    y
}

fn loglog_slope(hs: &[f64], es: &[f64]) -> f64 {
    let xs: Vec<f64> = hs.iter().map(|h| h.ln()).collect();
    let ys: Vec<f64> = es.iter().map(|e| e.ln()).collect();
    fit_slope(&xs, &ys)
}

#[test]
fn local_error_order_is_2s_plus_1() {
    let p = preset("lv2").unwrap();
    let sys = p.system.as_ref();
    let cfg = SolverConfig::default();
    // (k, s, base step count, expected slope). The s = 1 method needs
    // smaller steps before the h^3 term dominates its local error on this
    // orbit; at coarser steps the observed rate dips toward 2 and recovers.
    for &(k, s, n0) in &[(4usize, 1usize, 3200usize), (4, 2, 200)] {
        let tab = build_tableau(k, s).unwrap();
        let mut hs = Vec::new();
        let mut es = Vec::new();
        for j in 0..3 {
            let h = p.period / (n0 as f64) / 2f64.powi(j);
            let y1 = step(sys, &tab, &p.y0, h, &cfg).unwrap().y1;
            let reference = reference_step(sys, &p.y0, h, &cfg);
            hs.push(h);
            es.push((y1 - reference).amax());
        }
        let slope = loglog_slope(&hs, &es);
        let expect = (2 * s + 1) as f64;
        assert!(
            (slope - expect).abs() < 0.3,
            "(k, s) = ({k}, {s}): local slope {slope:.3}, expected {expect}"
        );
    }
}

#[test]
fn single_step_energy_defect_order_is_2k_plus_1() {
    let p = preset("lv2").unwrap();
    let sys = p.system.as_ref();
    let cfg = SolverConfig {
        solver: SolverKind::Newton,
        ..SolverConfig::default()
    };
    let h_ref = sys.hamiltonian(&p.y0).unwrap();
    for &(k, s) in &[(2usize, 1usize), (3, 1)] {
        let tab = build_tableau(k, s).unwrap();
        let mut hs = Vec::new();
        let mut es = Vec::new();
        for j in 1..4 {
            let h = p.period / 20.0 / 2f64.powi(j);
            let y1 = step(sys, &tab, &p.y0, h, &cfg).unwrap().y1;
            hs.push(h);
            es.push((sys.hamiltonian(&y1).unwrap() - h_ref).abs());
        }
        let slope = loglog_slope(&hs, &es);
        let expect = (2 * k + 1) as f64;
        assert!(
            (slope - expect).abs() < 0.5,
            "(k, s) = ({k}, {s}): energy defect slope {slope:.3}, expected {expect}"
        );
    }
}

#[test]
fn single_step_casimir_defect_order_is_2k_plus_1() {
    // With k = s = 2 the quadrature is under-resolved for the logarithmic
    // Casimir, leaving the O(h^{2k+1}) defect visible.
    let p = preset("lv3").unwrap();
    let sys = p.system.as_ref();
    let cfg = SolverConfig::default();
    let tab = build_tableau(2, 2).unwrap();
    let c_ref = sys.casimir(0, &p.y0).unwrap();
    let mut hs = Vec::new();
    let mut es = Vec::new();
    for j in 1..4 {
        let h = p.period / 20.0 / 2f64.powi(j);
        let r = step_with_casimir(sys, &tab, &p.y0, h, &cfg).unwrap();
        hs.push(h);
        es.push((sys.casimir(0, &r.y1).unwrap() - c_ref).abs());
    }
    let slope = loglog_slope(&hs, &es);
    assert!(
        (slope - 5.0).abs() < 0.5,
        "Casimir defect slope {slope:.3}, expected 5"
    );
}

#[test]
fn blended_iteration_counts_track_reference_data() {
    let cfg = SolverConfig::default();
    let lv2 = preset("lv2").unwrap();
    let spec = MethodSpec::new(Method::Phbvm, 4, 1).unwrap();
    let t = integrate(
        lv2.system.as_ref(),
        &spec,
        &lv2.y0,
        lv2.period / 800.0,
        800,
        &cfg,
        800,
    )
    .unwrap();
    let mean = t.mean_iterations();
    println!("blended PHBVM(4,1), lv2, n=800: mean iterations {mean:.2} (reference 4.3)");
    assert!((mean - 4.3).abs() <= 2.0, "mean {mean:.2} vs 4.3 +- 2");

    let lv3 = preset("lv3").unwrap();
    let t = integrate(
        lv3.system.as_ref(),
        &spec,
        &lv3.y0,
        lv3.period / 50.0,
        50,
        &cfg,
        50,
    )
    .unwrap();
    let mean = t.mean_iterations();
    println!("blended PHBVM(4,1), lv3, n=50: mean iterations {mean:.2} (reference 9.8)");
    assert!((mean - 9.8).abs() <= 3.0, "mean {mean:.2} vs 9.8 +- 3");
}

#[test]
fn fixed_point_iteration_counts_are_reported() {
    // The reference tables count blended iterations; the plain fixed-point
    // sweep needs more. Reported as a sanity bound, not a table match.
    let cfg = SolverConfig {
        solver: SolverKind::FixedPoint,
        ..SolverConfig::default()
    };
    let lv2 = preset("lv2").unwrap();
    let spec = MethodSpec::new(Method::Phbvm, 4, 1).unwrap();
    let t = integrate(
        lv2.system.as_ref(),
        &spec,
        &lv2.y0,
        lv2.period / 800.0,
        800,
        &cfg,
        800,
    )
    .unwrap();
    let mean = t.mean_iterations();
    println!("fixed-point PHBVM(4,1), lv2, n=800: mean iterations {mean:.2}");
    assert!(mean < 15.0, "fixed-point mean iterations {mean:.2} out of range");
}

#[test]
fn enhanced_method_keeps_the_underlying_order() {
    let p = preset("lv3").unwrap();
    let spec = MethodSpec::new(Method::Ephbvm, 4, 1).unwrap();
    let cfg = SolverConfig::default();
    let records = convergence_table(
        p.system.as_ref(),
        &spec,
        &p.y0,
        p.period,
        &[200, 400],
        1,
        &cfg,
    )
    .unwrap();
    let e200 = records[0].e_y;
    assert!(
        e200 > 7.45e-3 / 2.0 && e200 < 7.45e-3 * 2.0,
        "e_y(200) = {e200:.3e} vs reference 7.45e-3"
    );
    let rate = records[1].rate_y.unwrap();
    assert!((rate - 2.0).abs() < 0.3, "rate {rate:.2}");
}

#[test]
fn casimir_correction_does_not_break_energy_conservation() {
    // Quadratic-energy argument: the perturbation is skew, so H stays
    // conserved whatever alpha does. Checked per step at a resolution where
    // the quadrature truncation sits below roundoff.
    let p = preset("lv3").unwrap();
    let sys = p.system.as_ref();
    let tab = build_tableau(6, 3).unwrap();
    let cfg = SolverConfig::default();
    let n = 100;
    let h = p.period / n as f64;
    let custom = {
        let mut b = nalgebra::DMatrix::zeros(3, 3);
        b[(0, 2)] = 1.0;
        b[(2, 0)] = -1.0;
        b
    };
    let variants: [CasimirOptions; 3] = [
        CasimirOptions::default(),
        CasimirOptions {
            btilde: Some(vec![custom]),
            force_alpha_zero: false,
        },
        CasimirOptions {
            btilde: None,
            force_alpha_zero: true,
        },
    ];
    for (idx, opts) in variants.iter().enumerate() {
        let mut y = p.y0.clone();
        let mut worst: f64 = 0.0;
        for _ in 0..n {
            let h_before = sys.hamiltonian(&y).unwrap();
            let r = step_with_casimir_opts(sys, &tab, &y, h, &cfg, opts).unwrap();
            assert!(r.converged);
            let h_after = sys.hamiltonian(&r.y1).unwrap();
            worst = worst.max((h_after - h_before).abs());
            y = r.y1;
        }
        assert!(
            worst < 1e-13,
            "variant {idx}: per-step energy defect {worst:.3e}"
        );
    }
}
