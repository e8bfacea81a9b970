use orbit_langevin::diagnostics::{
    assemble_report, det_constancy, f_constancy_cv, grad_correlation_check, sample_tube_points, DiagnosticsReport,
    ReportSettings,
};
use orbit_langevin::manifold::{Branch, OrbitSpec};
use orbit_langevin::operators::{generate_instance, GenerateOptions, Instance, Variant};
use orbit_langevin::sampler::{init_gradient_descent, run_chains};
use orbit_langevin::{Dims, RngStream, RunConfig, SpectrumSpec};

fn instance(variant: Variant, seed: u64, noiseless: bool) -> Instance {
    let dims = Dims::new(10, 2).unwrap();
    let spectrum = SpectrumSpec::geometric(2, 0.8, 1.6).unwrap();
    let opts = GenerateOptions { noiseless, ..GenerateOptions::default() };
    generate_instance(dims, &spectrum, variant, 1e6, &mut RngStream::new(seed, 0), opts).unwrap()
}

fn tube(spec: &OrbitSpec, beta: f64, n: usize, seed: u64) -> Vec<nalgebra::DMatrix<f64>> {
    let radius = (10.0 * 20.0 / (beta * spec.sigma_min().powi(2))).sqrt();
    let radii: Vec<f64> = (0..n).map(|i| radius * (i as f64 + 0.5) / n as f64).collect();
    sample_tube_points(spec, &radii, &mut RngStream::new(seed, 7)).unwrap()
}

#[test]
fn gradient_correlation_holds_out_of_sample_for_every_variant() {
    let variants = [Variant::Factorization, Variant::Sensing { l: 200 }, Variant::Completion { p: 0.6 }];
    for (i, v) in variants.into_iter().enumerate() {
        let inst = instance(v, 50 + i as u64, false);
        let init = init_gradient_descent(&inst, &mut RngStream::new(50 + i as u64, 1), 1e-10, 1_000_000).unwrap();
        let spec = OrbitSpec::new(init.x, Branch::One).unwrap();
        let g = grad_correlation_check(&inst, &spec, &tube(&spec, inst.beta, 1000, i as u64), 0.01).unwrap();
        assert!(g.violation_fraction <= 0.05, "{v:?}: {g:?}");
        assert!(g.c1 > 0.0);
    }
}

#[test]
fn noiseless_factorization_correlation_is_bounded_below() {
    let inst = instance(Variant::Factorization, 53, true);
    let spec = OrbitSpec::new(inst.x_star.clone(), Branch::One).unwrap();
    let g = grad_correlation_check(&inst, &spec, &tube(&spec, inst.beta, 500, 3), 0.01).unwrap();
    let s2 = spec.sigma_min().powi(2);
    assert!(g.min_ratio >= s2 / 8.0, "min ratio {} vs {}", g.min_ratio, s2 / 8.0);
}

#[test]
fn loss_is_constant_on_level_sets_and_the_determinant_nearly_so() {
    let inst = instance(Variant::Sensing { l: 60 }, 54, false);
    let spec = OrbitSpec::new(inst.x_star.clone(), Branch::One).unwrap();
    let pts = tube(&spec, inst.beta, 10, 4);
    let cv = f_constancy_cv(&inst, &pts, 50, &mut RngStream::new(54, 1)).unwrap();
    assert!(cv < 1e-10, "f cv {cv:e}");
    let (dcv, m) = det_constancy(&spec, &pts).unwrap();
    assert!(dcv < 1e-4 && m > 0.0, "det cv {dcv:e}");
}

fn report(steps: u64) -> DiagnosticsReport {
    let inst = instance(Variant::Factorization, 55, false);
    let init = init_gradient_descent(&inst, &mut RngStream::new(55, 1), 1e-10, 1_000_000).unwrap();
    let spec = OrbitSpec::new(init.x.clone(), Branch::One).unwrap();
    let h = 0.1 / (inst.beta * spec.sigma_max().powi(2));
    let mut cfg = RunConfig::new(inst.beta, h, steps, 2, 55).unwrap();
    cfg.thin = 5;
    let traj = run_chains(&inst, &cfg, &init.x).unwrap();
    let settings = ReportSettings {
        radius: (200.0 / (inst.beta * spec.sigma_min().powi(2))).sqrt(),
        epsilon: 0.01,
        grad_points: 200,
        det_points: 10,
        rotations: 20,
        seed: 55,
    };
    assemble_report(&inst, &spec, &traj, &settings)
}

#[test]
fn healthy_run_reports_every_field_without_notes() {
    let r = report(20_000);
    assert!(r.notes.is_empty(), "{:?}", r.notes);
    assert!(r.nearness_fraction > 0.99 && r.branch_flips == 0);
    assert!(r.ks_uniform_angle.is_some() && r.iact_eta.is_some() && r.iact_angle.is_some());
    assert!(r.cir_fit.is_some() && r.grad_corr_violations.is_some() && r.f_constancy_cv.is_some());
}

#[test]
fn short_run_notes_the_missing_iact_and_report_round_trips() {
    let r = report(2_000);
    assert!(r.iact_eta.is_none());
    assert!(r.notes.iter().any(|n| n.contains("IACT")));
    let bytes = serde_json::to_vec_pretty(&r).unwrap();
    let back: DiagnosticsReport = serde_json::from_slice(&bytes).unwrap();
    assert_eq!(back, r);
    assert_eq!(serde_json::to_vec_pretty(&back).unwrap(), bytes);
}
