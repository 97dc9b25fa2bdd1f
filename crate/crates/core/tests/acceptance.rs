//! Acceptance suite. Each test prints one `criterion N [PASS|FAIL]` line to
//! stderr (uncaptured) and then asserts the threshold.
//!
//! Default desk run: N = 2, homogeneous, V = 6, M = 48, γ = −3, n = 8,
//! ε = 0.05, dt = 1e−3, T = 0.5, f₀ = 0.5·e^{−|v|²} regularized.

use std::io::Write;
use std::sync::{Arc, OnceLock};

use lfd_core::collision_kernel::{run_kernel_suite, KernelSuiteConfig};
use lfd_core::diagnostics::DissipationEvaluator;
use lfd_core::initial_data::FermiDiracParams;
use lfd_core::run_io::criteria::{
    default_ladder_rungs, oracle_equivalence, regularization_ladder, weak_residual_ladder, LadderSetup,
};
use lfd_core::run_io::{read_series, run, RunSummary};
use lfd_core::{
    ConvolutionMethod, CrossSectionSpec, DiagnosticsRecord, GradientRule, InitialFamily, KernelConfig, KernelTable,
    PhaseGrid, Solver, SolverConfig, VelocityGrid,
};

const DEFAULT_RUN: &str = r#"
mode = "homogeneous"
[grid]
dim = 2
v_max = 6.0
v_points = 48
[kernel]
gamma = -3.0
n = 8
[solver]
epsilon = 0.05
dt = 1e-3
t_end = 0.5
[initial]
family = "gaussian"
regularize = true
params = { amplitude = 0.5 }
[output]
snapshot_stride = 100
"#;

const INERTIA_RUN: &str = r#"
mode = "inhomogeneous"
[grid]
v_points = 32
[grid.spatial]
extent = 6.283185307179586
points = 16
topology = "periodic-torus"
[solver]
transport = "spectral"
t_end = 0.25
[initial]
params = { amplitude = 0.5 }
[output]
snapshot_stride = 50
"#;

struct Outcome {
    records: Vec<DiagnosticsRecord>,
    summary: RunSummary,
}

fn execute(config: &str) -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let summary = run(config, dir.path()).unwrap();
    let records = read_series(&dir.path().join("diagnostics.csv")).unwrap();
    Outcome { records, summary }
}

fn default_run() -> &'static Outcome {
    static RUN: OnceLock<Outcome> = OnceLock::new();
    RUN.get_or_init(|| execute(DEFAULT_RUN))
}

fn report(id: u32, name: &str, pass: bool, detail: String) {
    let tag = if pass { "PASS" } else { "FAIL" };
    let _ = writeln!(std::io::stderr(), "criterion {id:>2} [{tag}] {name}: {detail}");
}

fn rel(measured: f64, predicted: f64) -> f64 {
    (measured - predicted).abs() / predicted.abs()
}

#[test]
fn criterion_01_mass_conservation() {
    let r = &default_run().records;
    let m0 = r[0].mass;
    let drift = r.iter().map(|x| (x.mass - m0).abs() / m0).fold(0.0, f64::max);
    let pass = drift <= 1e-8;
    report(1, "mass conservation", pass, format!("max relative drift {drift:e} (≤ 1e-8)"));
    assert!(pass);
}

#[test]
fn criterion_02_momentum_conservation() {
    let r = &default_run().records;
    let m0 = r[0].mass;
    let worst = r
        .iter()
        .map(|x| {
            x.momentum
                .iter()
                .zip(&r[0].momentum)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt()
        })
        .fold(0.0, f64::max)
        / m0;
    let pass = worst <= 1e-8;
    report(2, "momentum conservation", pass, format!("max |Δp|/mass {worst:e} (≤ 1e-8)"));
    assert!(pass);
}

/// `(deviation from 2εt·m, deviation from 2Nεt·m)` at the final time.
fn energy_deviation(records: &[DiagnosticsRecord], eps: f64) -> (f64, f64) {
    let first = &records[0];
    let last = records.last().unwrap();
    let de = last.kinetic_energy - first.kinetic_energy;
    let law = 2.0 * eps * last.time * first.mass;
    let dim = first.momentum.len() as f64;
    (rel(de, law), rel(de, dim * law))
}

#[test]
fn criterion_03_energy_drift_law() {
    let coarse = energy_deviation(&default_run().records, 0.05);
    let refined = DEFAULT_RUN.replace("v_points = 48", "v_points = 96");
    let fine = energy_deviation(&execute(&refined).records, 0.05);
    let pass = coarse.0 <= 0.02 && fine.0 < coarse.0;
    report(
        3,
        "energy drift law",
        pass,
        format!(
            "deviation from 2εt‖f₀‖ at M=48: {:e}, M=96: {:e} (≤ 0.02, decreasing); \
             against 2Nεt‖f₀‖: {:e}, {:e}",
            coarse.0, fine.0, coarse.1, fine.1
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_04_inertia_drift_law() {
    let out = execute(INERTIA_RUN);
    let r = &out.records;
    let first = &r[0];
    let last = r.last().unwrap();
    let di = last.inertia - first.inertia;
    let law = 2.0 * 0.05 * last.time.powi(3) / 3.0 * first.mass;
    let dev = rel(di, law);
    let dev_n = rel(di, 2.0 * law);
    let pass = dev <= 0.05;
    report(
        4,
        "inertia drift law",
        pass,
        format!(
            "ΔI = {di:e} at t = {}; deviation from (2εt³/3)‖f₀‖ {dev:e} (≤ 0.05); against (2Nεt³/3)‖f₀‖ {dev_n:e}",
            last.time
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_05_entropy_inequality() {
    let r = &default_run().records;
    let s0 = r[0].entropy;
    let slack = r
        .iter()
        .map(|x| x.entropy + x.cumulative_dissipation - s0)
        .fold(f64::NEG_INFINITY, f64::max);
    let pass = slack <= 1e-3 * s0.abs() && r.iter().all(|x| x.entropy <= 0.0 && x.dissipation_increment >= 0.0);
    report(
        5,
        "entropy inequality",
        pass,
        format!("max S(t) + ∫D − S(0) = {slack:e} (≤ {:e})", 1e-3 * s0.abs()),
    );
    assert!(pass);
}

#[test]
fn criterion_06_pauli_bound() {
    let out = default_run();
    let lo = out.records.iter().map(|x| x.pauli_min).fold(f64::INFINITY, f64::min);
    let hi = out.records.iter().map(|x| x.pauli_max).fold(f64::NEG_INFINITY, f64::max);
    let clamped = out.summary.totals.clamped_mass;
    let pass = lo >= -1e-8 && hi <= 1.0 + 1e-8 && clamped <= 1e-8;
    report(
        6,
        "pauli bound",
        pass,
        format!("pre-clamp range [{lo:e}, {hi}], clamped mass {clamped:e}"),
    );
    assert!(pass);
}

#[test]
fn criterion_07_equilibrium_stationarity() {
    let vg = VelocityGrid::new(2, 6.0, 48).unwrap();
    let table = Arc::new(KernelTable::build(&vg, CrossSectionSpec::coulomb(2), KernelConfig::new(8).unwrap()).unwrap());
    let grid = Arc::new(PhaseGrid::homogeneous(vg));
    let f0 = InitialFamily::FermiDiracEquilibrium(FermiDiracParams { a: 1.0, b: 1.0, c: 0.0 })
        .sample(grid.clone())
        .unwrap();
    // 1/(1 + e^{1+|v|²}) at every node.
    for (i, &s) in f0.samples().iter().enumerate() {
        let v = grid.velocity().node(i);
        let want = 1.0 / (1.0 + (1.0 + v[0] * v[0] + v[1] * v[1]).exp());
        assert!((s - want).abs() <= 1e-13 * want);
    }
    let evaluator = DissipationEvaluator::new(grid.clone(), table.clone(), ConvolutionMethod::Auto).unwrap();
    let mut d_max = evaluator.evaluate(&f0, GradientRule::Chain).unwrap();
    let cfg = SolverConfig {
        epsilon: 0.0,
        ..Default::default()
    };
    let solver = Solver::new(grid, table, cfg).unwrap();
    let last = solver
        .run_trajectory(f0.clone(), |f, _| {
            d_max = d_max.max(evaluator.evaluate(f, GradientRule::Chain)?);
            Ok(())
        })
        .unwrap();
    let dist = last.l1_distance(&f0).unwrap() / f0.mass();
    let pass = dist <= 1e-3 && d_max <= 1e-6;
    report(
        7,
        "equilibrium stationarity",
        pass,
        format!("‖f(T) − f₀‖/‖f₀‖ {dist:e} (≤ 1e-3), max D {d_max:e} (≤ 1e-6)"),
    );
    assert!(pass);
}

#[test]
fn criterion_08_kernel_suite() {
    let vg = VelocityGrid::new(2, 6.0, 48).unwrap();
    let suite = run_kernel_suite(
        &vg,
        CrossSectionSpec::coulomb(2),
        KernelConfig::new(8).unwrap(),
        &KernelSuiteConfig::default(),
    )
    .unwrap();
    let failures = suite.failures();
    let pass = failures.is_empty() && suite.ellipticity_samples >= 1000;
    report(
        8,
        "kernel suite",
        pass,
        format!(
            "a(z)z {:e}, min eig {:e}, symmetry {:e}, div order {:.3}, sqrt residual {:e}, floor margin {:e} over {} samples{}",
            suite.max_az_residual,
            suite.psd_min_eigenvalue,
            suite.symmetry_residual,
            suite.divergence_fd_order,
            suite.sqrt_residual,
            suite.ellipticity_floor_margin,
            suite.ellipticity_samples,
            if failures.is_empty() { String::new() } else { format!("; {}", failures.join("; ")) }
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_09_oracle_equivalence() {
    let r = oracle_equivalence(2, 6.0, 8, -3.0, 8, 0.05).unwrap();
    let pass = r.convolution <= 1e-12 && r.frozen_entropic <= 1e-12 && r.frozen_upwind <= 1e-12;
    report(
        9,
        "oracle equivalence",
        pass,
        format!(
            "8² grid: convolution {:e}, frozen entropic {:e}, frozen upwind {:e} (≤ 1e-12)",
            r.convolution, r.frozen_entropic, r.frozen_upwind
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_10_weak_form_residual() {
    let w = weak_residual_ladder(&LadderSetup::default(), &[(17, 4e-3), (33, 2e-3), (65, 1e-3)]).unwrap();
    let pass = w.ratios.iter().all(|r| (0.4..=0.6).contains(r));
    report(
        10,
        "weak-form residual",
        pass,
        format!("residuals {:?}, ratios {:?} (each in [0.4, 0.6])", w.residuals, w.ratios),
    );
    assert!(pass);
}

#[test]
fn criterion_11_regularization_ladder() {
    let l = regularization_ladder(&LadderSetup::default(), 32, 1e-3, &default_ladder_rungs(4)).unwrap();
    let d = &l.successive_distances;
    let pass = d.len() == 3 && d.windows(2).all(|w| w[1] < w[0]);
    report(
        11,
        "regularization ladder",
        pass,
        format!("successive L1 distances {d:?} (strictly decreasing)"),
    );
    assert!(pass);
}

#[test]
fn criterion_12_excluded() {
    let _ = writeln!(
        std::io::stderr(),
        "criterion 12 [EXCLUDED] vanishing-viscosity limit: not reproducible at desk scale; 10 and 11 are the consistency evidence"
    );
}
