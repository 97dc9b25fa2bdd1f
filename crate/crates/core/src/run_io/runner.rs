//! Entry points behind the CLI subcommands.
//!
//! A run directory holds `config.toml`, `diagnostics.csv`, `summary.json`
//! and `snapshots/step_XXXXXXXX.lfd`, each snapshot with a `.json` sidecar
//! carrying the run totals at that step.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::collision_kernel::{run_kernel_suite, KernelSuiteConfig, KernelSuiteReport};
use crate::diagnostics::{
    conserved_moments, drift_check, entropy_inequality_check, quantum_entropy, weighted_gradient_norm,
    DiagnosticsRecord, DissipationEvaluator, DriftReport, EntropyReport, Recorder, RecorderConfig, StepTotals,
};
use crate::error::{Error, Result};
use crate::evolution::{Solver, StepReport};
use crate::initial_data::{fit_envelope, regularize_initial_datum, DensityField, EnvelopeSpec, InitialFamily};
use crate::phase_grid::PhaseGrid;

use super::config::{parse_config, Mode, RunConfig};
use super::criteria::{
    default_ladder_rungs, oracle_equivalence, regularization_ladder, weak_residual_ladder, CriterionResult, LadderSetup,
    Status,
};
use super::series::{read_series, SeriesWriter};
use super::snapshot::{read_snapshot, write_snapshot, SnapshotMeta};

pub const CONFIG_FILE: &str = "config.toml";
pub const SERIES_FILE: &str = "diagnostics.csv";
pub const SUMMARY_FILE: &str = "summary.json";
pub const SNAPSHOT_DIR: &str = "snapshots";

pub fn snapshot_path(dir: &Path, step: usize) -> PathBuf {
    dir.join(SNAPSHOT_DIR).join(format!("step_{step:08}.lfd"))
}

fn sidecar_path(snapshot: &Path) -> PathBuf {
    snapshot.with_extension("json")
}

/// Stored snapshots sorted by step.
pub fn list_snapshots(dir: &Path) -> Result<Vec<(usize, PathBuf)>> {
    let sdir = dir.join(SNAPSHOT_DIR);
    if !sdir.is_dir() {
        return Ok(Vec::new());
    }
    let mut out = Vec::new();
    for entry in fs::read_dir(&sdir)? {
        let path = entry?.path();
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or_default();
        if let Some(step) = name
            .strip_prefix("step_")
            .and_then(|s| s.strip_suffix(".lfd"))
            .and_then(|s| s.parse::<usize>().ok())
        {
            out.push((step, path));
        }
    }
    out.sort();
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub steps: usize,
    pub final_time: f64,
    pub initial_mass: f64,
    pub final_mass: f64,
    pub gradient_alpha: f64,
    pub totals: StepTotals,
    pub drift: DriftReport,
    pub entropy: EntropyReport,
}

/// Initial state: a stored snapshot or the sampled family, regularized at
/// the kernel index when requested.
pub fn initial_state(cfg: &RunConfig, grid: Arc<PhaseGrid>) -> Result<DensityField> {
    let f0 = match &cfg.initial.snapshot {
        Some(p) => read_snapshot(p)?.into_field(grid)?.with_time(0.0),
        None => cfg.initial.family.sample(grid)?,
    };
    if cfg.initial.regularize {
        regularize_initial_datum(&f0, cfg.n)
    } else {
        Ok(f0)
    }
}

/// Weight of the gradient norm from the envelope fitted to the initial
/// state; zero when the fit is degenerate.
pub fn gradient_weight(cfg: &RunConfig, f0: &DensityField) -> EnvelopeSpec {
    let alpha = fit_envelope(f0)
        .map(|fit| fit.spec.alpha * cfg.output.gradient_alpha_fraction)
        .unwrap_or(0.0);
    EnvelopeSpec {
        alpha,
        c_lower: 0.0,
        c_upper: 1.0,
    }
}

struct Session<'a> {
    cfg: &'a RunConfig,
    dir: &'a Path,
    writer: SeriesWriter,
    recorder: Recorder,
    next_row: usize,
    last_step: usize,
    prior: StepTotals,
}

impl Session<'_> {
    fn write_rows(&mut self) -> Result<()> {
        let stride = self.cfg.output.diagnostics_stride;
        let last = self.last_step;
        let rows: Vec<DiagnosticsRecord> = self.recorder.drain_new().to_vec();
        for r in rows {
            let step = self.next_row;
            self.next_row += 1;
            if step.is_multiple_of(stride) || step == last {
                self.writer.append(&r)?;
            }
        }
        Ok(())
    }

    fn totals(&self) -> StepTotals {
        merge_totals(&self.prior, self.recorder.totals())
    }

    fn observe(&mut self, f: &DensityField, report: &StepReport) -> Result<()> {
        self.recorder.observe(f, report)?;
        self.write_rows()?;
        let step = report.step;
        if step.is_multiple_of(self.cfg.output.snapshot_stride) || step == self.last_step {
            self.writer.flush()?;
            let meta = SnapshotMeta {
                epsilon: self.cfg.solver.epsilon,
                n: self.cfg.n,
                gamma: self.cfg.gamma,
                step: step as u64,
            };
            let path = snapshot_path(self.dir, step);
            write_snapshot(f, &meta, &path)?;
            let side = serde_json::to_vec_pretty(&self.totals()).map_err(|e| Error::Config(e.to_string()))?;
            fs::write(sidecar_path(&path), side)?;
        }
        Ok(())
    }
}

fn merge_totals(a: &StepTotals, b: &StepTotals) -> StepTotals {
    StepTotals {
        steps: a.steps + b.steps,
        clamped_mass: a.clamped_mass + b.clamped_mass,
        max_clamped_mass: a.max_clamped_mass.max(b.max_clamped_mass),
        leaked_mass: a.leaked_mass + b.leaked_mass,
        max_picard_iters: a.max_picard_iters.max(b.max_picard_iters),
        max_picard_residual: a.max_picard_residual.max(b.max_picard_residual),
    }
}

fn recorder_config(cfg: &RunConfig, weight: EnvelopeSpec) -> RecorderConfig {
    RecorderConfig {
        dissipation_stride: cfg.output.dissipation_stride,
        gradient_rule: cfg.output.gradient_rule,
        gradient_weight: weight,
        keep_states: false,
    }
}

fn summarize(cfg: &RunConfig, dir: &Path, totals: StepTotals, weight: f64) -> Result<RunSummary> {
    let records = read_series(&dir.join(SERIES_FILE))?;
    let first = records.first().ok_or_else(|| Error::Missing("empty diagnostics series".into()))?;
    let last = records.last().expect("non-empty");
    let summary = RunSummary {
        steps: totals.steps,
        final_time: last.time,
        initial_mass: first.mass,
        final_mass: last.mass,
        gradient_alpha: weight,
        totals,
        drift: drift_check(&records, cfg.solver.epsilon)?,
        entropy: entropy_inequality_check(&records)?,
    };
    let text = serde_json::to_string_pretty(&summary).map_err(|e| Error::Config(e.to_string()))?;
    fs::write(dir.join(SUMMARY_FILE), text)?;
    Ok(summary)
}

/// Fresh run into `dir`; `config_text` is stored alongside the outputs.
pub fn run(config_text: &str, dir: &Path) -> Result<RunSummary> {
    let cfg = parse_config(config_text)?;
    fs::create_dir_all(dir.join(SNAPSHOT_DIR))?;
    for (_, p) in list_snapshots(dir)? {
        fs::remove_file(&p)?;
        let _ = fs::remove_file(sidecar_path(&p));
    }
    fs::write(dir.join(CONFIG_FILE), config_text)?;
    let grid = cfg.build_grid()?;
    let table = cfg.build_table(&grid)?;
    let f0 = initial_state(&cfg, grid.clone())?;
    let weight = gradient_weight(&cfg, &f0);
    let solver = Solver::new(grid.clone(), table.clone(), cfg.solver.clone())?;
    let recorder = Recorder::new(grid.clone(), table, cfg.solver.convolution, recorder_config(&cfg, weight))?;
    let (steps, _) = cfg.solver.schedule();
    let mut session = Session {
        cfg: &cfg,
        dir,
        writer: SeriesWriter::create(&dir.join(SERIES_FILE), grid.dim())?,
        recorder,
        next_row: 0,
        last_step: steps,
        prior: StepTotals::default(),
    };
    solver.run_trajectory(f0, |f, r| session.observe(f, r))?;
    session.recorder.finish()?;
    session.write_rows()?;
    session.writer.flush()?;
    let totals = session.totals();
    summarize(&cfg, dir, totals, weight.alpha)
}

/// Continues the run in `dir` from its latest snapshot. `config_text`
/// overrides the stored configuration.
pub fn resume(dir: &Path, config_text: Option<&str>) -> Result<RunSummary> {
    let snaps = list_snapshots(dir)?;
    let (step, path) = snaps
        .last()
        .cloned()
        .ok_or_else(|| Error::Missing(format!("no snapshots under {}", dir.join(SNAPSHOT_DIR).display())))?;
    let text = match config_text {
        Some(t) => t.to_string(),
        None => fs::read_to_string(dir.join(CONFIG_FILE))
            .map_err(|e| Error::Config(format!("cannot read stored config: {e}")))?,
    };
    let cfg = parse_config(&text)?;
    let grid = cfg.build_grid()?;
    let table = cfg.build_table(&grid)?;
    let state = read_snapshot(&path)?.into_field(grid.clone())?;
    let first = read_snapshot(&snaps[0].1)?.into_field(grid.clone())?;
    let weight = gradient_weight(&cfg, &first);
    let prior: StepTotals = match fs::read(sidecar_path(&path)) {
        Ok(bytes) => serde_json::from_slice(&bytes).map_err(|e| Error::MalformedSnapshot(e.to_string()))?,
        Err(_) => StepTotals::default(),
    };

    let series = dir.join(SERIES_FILE);
    let mut records = read_series(&series)?;
    records.retain(|r| r.time <= state.time());
    let anchor = records
        .last()
        .filter(|r| r.time == state.time())
        .cloned()
        .ok_or_else(|| Error::MalformedSeries(format!("no row at snapshot time {}", state.time())))?;

    let (steps, _) = cfg.solver.schedule();
    let mut recorder = Recorder::new(grid.clone(), table.clone(), cfg.solver.convolution, recorder_config(&cfg, weight))?;
    recorder.resume(&state, &anchor)?;
    let solver = Solver::new(grid.clone(), table, cfg.solver.clone())?;
    let mut session = Session {
        cfg: &cfg,
        dir,
        writer: SeriesWriter::rewrite(&series, grid.dim(), &records)?,
        recorder,
        next_row: step + 1,
        last_step: steps,
        prior,
    };
    if step < steps {
        solver.run_from(state, step, &mut |f: &DensityField, r: &StepReport| session.observe(f, r))?;
    }
    session.recorder.finish()?;
    session.write_rows()?;
    session.writer.flush()?;
    let totals = session.totals();
    summarize(&cfg, dir, totals, weight.alpha)
}

/// Kernel invariant suite on the configured velocity grid.
pub fn check_kernel(cfg: &RunConfig) -> Result<KernelSuiteReport> {
    let grid = cfg.build_grid()?;
    run_kernel_suite(grid.velocity(), cfg.cross_section()?, cfg.kernel_config()?, &KernelSuiteConfig::default())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SnapshotDiagnostics {
    pub path: PathBuf,
    pub step: u64,
    pub time: f64,
    pub mass: f64,
    pub momentum: Vec<f64>,
    pub kinetic_energy: f64,
    pub inertia: f64,
    pub entropy: f64,
    pub dissipation: f64,
    pub pauli_min: f64,
    pub pauli_max: f64,
    pub weighted_grad_norm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnoseReport {
    pub snapshots: Vec<SnapshotDiagnostics>,
    /// Max relative difference between recomputed snapshot moments and the
    /// stored series rows at the same times.
    pub series_discrepancy: Option<f64>,
    pub drift: Option<DriftReport>,
    pub entropy: Option<EntropyReport>,
    pub criteria: Vec<CriterionResult>,
}

impl DiagnoseReport {
    pub fn failures(&self) -> Vec<&CriterionResult> {
        self.criteria.iter().filter(|c| c.status == Status::Fail).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct DiagnoseOptions {
    /// Also run the refinement-ladder criteria, which need extra runs.
    pub ladders: bool,
}

fn snapshot_diagnostics(
    path: &Path,
    grid: &Arc<PhaseGrid>,
    evaluator: &DissipationEvaluator,
    cfg: &RunConfig,
    weight: &EnvelopeSpec,
) -> Result<(SnapshotDiagnostics, DensityField)> {
    let snap = read_snapshot(path)?;
    let step = snap.header.step;
    let f = snap.into_field(grid.clone())?;
    let m = conserved_moments(&f, f.time());
    let (lo, hi) = f.pauli_range();
    let d = SnapshotDiagnostics {
        path: path.to_path_buf(),
        step,
        time: f.time(),
        mass: m.mass,
        momentum: m.momentum,
        kinetic_energy: m.energy,
        inertia: m.inertia,
        entropy: quantum_entropy(&f),
        dissipation: evaluator.evaluate(&f, cfg.output.gradient_rule)?,
        pauli_min: lo,
        pauli_max: hi,
        weighted_grad_norm: weighted_gradient_norm(&f, weight),
    };
    Ok((d, f))
}

fn rel(a: f64, b: f64) -> f64 {
    if a == b {
        0.0
    } else {
        (a - b).abs() / b.abs().max(a.abs()).max(f64::MIN_POSITIVE)
    }
}

/// Recomputes diagnostics from the snapshots in `dir` and evaluates every
/// acceptance threshold that applies to the run. With `only`, just that
/// snapshot is examined.
pub fn diagnose(dir: &Path, config_text: Option<&str>, only: Option<&Path>, opts: DiagnoseOptions) -> Result<DiagnoseReport> {
    let text = match config_text {
        Some(t) => t.to_string(),
        None => fs::read_to_string(dir.join(CONFIG_FILE))
            .map_err(|e| Error::Config(format!("cannot read stored config: {e}")))?,
    };
    let cfg = parse_config(&text)?;
    let grid = cfg.build_grid()?;
    let table = cfg.build_table(&grid)?;
    let evaluator = DissipationEvaluator::new(grid.clone(), table, cfg.solver.convolution)?;
    let snaps = list_snapshots(dir)?;

    if let Some(p) = only {
        let f = read_snapshot(p)?.into_field(grid.clone())?;
        let weight = match snaps.first() {
            Some((_, p0)) => gradient_weight(&cfg, &read_snapshot(p0)?.into_field(grid.clone())?),
            None => gradient_weight(&cfg, &f),
        };
        let (d, _) = snapshot_diagnostics(p, &grid, &evaluator, &cfg, &weight)?;
        let ok = d.pauli_min >= 0.0 && d.pauli_max <= 1.0;
        let criteria = vec![CriterionResult::check(
            6,
            "pauli bound",
            d.pauli_min.min(1.0 - d.pauli_max),
            0.0,
            ok,
            "stored samples inside [0, 1]",
        )];
        return Ok(DiagnoseReport {
            snapshots: vec![d],
            series_discrepancy: None,
            drift: None,
            entropy: None,
            criteria,
        });
    }

    if snaps.is_empty() {
        return Err(Error::Missing(format!("no snapshots under {}", dir.join(SNAPSHOT_DIR).display())));
    }
    let records = read_series(&dir.join(SERIES_FILE))?;
    let f0 = read_snapshot(&snaps[0].1)?.into_field(grid.clone())?;
    let weight = gradient_weight(&cfg, &f0);
    let mut snapshots = Vec::new();
    let mut discrepancy = 0.0f64;
    let mut last_state = f0.clone();
    for (_, p) in &snaps {
        let (d, f) = snapshot_diagnostics(p, &grid, &evaluator, &cfg, &weight)?;
        if let Some(r) = records.iter().find(|r| r.time == d.time) {
            discrepancy = discrepancy
                .max(rel(d.mass, r.mass))
                .max(rel(d.kinetic_energy, r.kinetic_energy))
                .max(rel(d.inertia, r.inertia))
                .max(rel(d.entropy, r.entropy));
        }
        snapshots.push(d);
        last_state = f;
    }
    let totals: StepTotals = match fs::read(sidecar_path(&snaps[snaps.len() - 1].1)) {
        Ok(b) => serde_json::from_slice(&b).map_err(|e| Error::MalformedSnapshot(e.to_string()))?,
        Err(_) => StepTotals::default(),
    };
    let drift = drift_check(&records, cfg.solver.epsilon)?;
    let entropy = entropy_inequality_check(&records)?;
    let criteria = evaluate_criteria(&cfg, &records, &drift, &entropy, &totals, &f0, &last_state, opts)?;
    Ok(DiagnoseReport {
        snapshots,
        series_discrepancy: Some(discrepancy),
        drift: Some(drift),
        entropy: Some(entropy),
        criteria,
    })
}

#[allow(clippy::too_many_arguments)]
fn evaluate_criteria(
    cfg: &RunConfig,
    records: &[DiagnosticsRecord],
    drift: &DriftReport,
    entropy: &EntropyReport,
    totals: &StepTotals,
    f0: &DensityField,
    last: &DensityField,
    opts: DiagnoseOptions,
) -> Result<Vec<CriterionResult>> {
    let first = &records[0];
    let m0 = first.mass;
    let mut out = Vec::new();

    let mass_drift = records.iter().map(|r| (r.mass - m0).abs() / m0).fold(0.0, f64::max);
    out.push(CriterionResult::check(1, "mass conservation", mass_drift, 1e-8, mass_drift <= 1e-8, "max relative mass drift"));

    let mom = records
        .iter()
        .map(|r| {
            r.momentum
                .iter()
                .zip(&first.momentum)
                .map(|(a, b)| (a - b).powi(2))
                .sum::<f64>()
                .sqrt()
        })
        .fold(0.0, f64::max)
        / m0;
    out.push(CriterionResult::check(2, "momentum conservation", mom, 1e-8, mom <= 1e-8, "max |Δ momentum| / mass"));

    let e = drift.energy.final_deviation;
    out.push(CriterionResult::check(
        3,
        "energy drift law",
        e,
        0.02,
        e <= 0.02,
        format!(
            "ΔE = {:e} vs 2εt·m = {:e}; with the factor N: deviation {:e}",
            drift.energy.final_measured, drift.energy.final_predicted, drift.energy_dimensional.final_deviation
        ),
    ));

    if cfg.mode == Mode::Inhomogeneous {
        let d = drift.inertia.final_deviation;
        out.push(CriterionResult::check(
            4,
            "inertia drift law",
            d,
            0.05,
            d <= 0.05,
            format!(
                "ΔI = {:e} vs 2εt³m/3 = {:e}; with the factor N: deviation {:e}",
                drift.inertia.final_measured, drift.inertia.final_predicted, drift.inertia_dimensional.final_deviation
            ),
        ));
    } else {
        out.push(CriterionResult::skipped(4, "inertia drift law", "needs an inhomogeneous run"));
    }

    let slack = entropy.relative_slack();
    out.push(CriterionResult::check(
        5,
        "entropy inequality",
        slack,
        1e-3,
        slack <= 1e-3,
        format!("max [S(t) + ∫D − S(0)] = {:e}", entropy.max_slack),
    ));

    let lo = records.iter().map(|r| r.pauli_min).fold(f64::INFINITY, f64::min);
    let hi = records.iter().map(|r| r.pauli_max).fold(f64::NEG_INFINITY, f64::max);
    let pauli_ok = lo >= -1e-8 && hi <= 1.0 + 1e-8 && totals.clamped_mass <= 1e-8;
    out.push(CriterionResult::check(
        6,
        "pauli bound",
        (-lo).max(hi - 1.0).max(totals.clamped_mass),
        1e-8,
        pauli_ok,
        format!("pre-clamp range [{lo:e}, {hi}], clamped mass {:e}", totals.clamped_mass),
    ));

    let equilibrium = matches!(cfg.initial.family, InitialFamily::FermiDiracEquilibrium(_)) && cfg.solver.epsilon == 0.0;
    if equilibrium {
        let dist = last.l1_distance(f0)? / f0.mass();
        let dt = cfg.solver.dt;
        let dmax = records.iter().map(|r| r.dissipation_increment / dt).fold(0.0, f64::max);
        out.push(CriterionResult::check(
            7,
            "equilibrium stationarity",
            dist.max(dmax * 1e-3),
            1e-3,
            dist <= 1e-3 && dmax <= 1e-6,
            format!("relative L1 change {dist:e}, max D {dmax:e}"),
        ));
    } else {
        out.push(CriterionResult::skipped(7, "equilibrium stationarity", "needs ε = 0 and a Fermi-Dirac datum"));
    }

    let suite = check_kernel(cfg)?;
    let fails = suite.failures();
    out.push(CriterionResult::check(
        8,
        "kernel suite",
        fails.len() as f64,
        0.0,
        fails.is_empty(),
        if fails.is_empty() { "all invariants hold".to_string() } else { fails.join("; ") },
    ));

    let oracle = oracle_equivalence(cfg.grid.dim, cfg.grid.v_max, 8, cfg.gamma, cfg.n, cfg.solver.epsilon)?;
    let w = oracle.worst();
    out.push(CriterionResult::check(
        9,
        "oracle equivalence",
        w,
        1e-12,
        w <= 1e-12,
        format!(
            "convolution {:e}, entropic {:e}, upwind {:e}",
            oracle.convolution, oracle.frozen_entropic, oracle.frozen_upwind
        ),
    ));

    if opts.ladders {
        let setup = LadderSetup {
            dim: cfg.grid.dim,
            gamma: cfg.gamma,
            ..Default::default()
        };
        let weak = weak_residual_ladder(&setup, &[(17, 4e-3), (33, 2e-3), (65, 1e-3)])?;
        let ok = weak.ratios.iter().all(|r| (0.4..=0.6).contains(r));
        let worst = weak.ratios.iter().map(|r| (r - 0.5).abs()).fold(0.0, f64::max);
        out.push(CriterionResult::check(
            10,
            "weak-form residual",
            worst,
            0.1,
            ok,
            format!("residuals {:?}, ratios {:?}", weak.residuals, weak.ratios),
        ));
        let ladder = regularization_ladder(&setup, 32, 1e-3, &default_ladder_rungs(4))?;
        out.push(CriterionResult::check(
            11,
            "regularization ladder",
            ladder.successive_distances.last().copied().unwrap_or(f64::NAN),
            0.0,
            ladder.monotone,
            format!("successive distances {:?}", ladder.successive_distances),
        ));
    } else {
        out.push(CriterionResult::skipped(10, "weak-form residual", "pass --ladders to run"));
        out.push(CriterionResult::skipped(11, "regularization ladder", "pass --ladders to run"));
    }
    out.push(CriterionResult::skipped(
        12,
        "vanishing-viscosity limit",
        "not reproducible at desk scale; criteria 10 and 11 are the consistency evidence",
    ));
    Ok(out)
}
