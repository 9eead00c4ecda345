//! Batch commands: forward runs, POD reports, ROM checks and optimizations.

use std::fs;
use std::path::Path;
use std::time::Instant;

use serde::Serialize;

use crate::caseio::{load_case, save_case};
use crate::config::{CaseSource, Command, RunConfig};
use crate::error::{Error, Result};
use crate::fom::{fom_solve, FomRun};
use crate::numfmt::{format17, write_csv, write_json};
use crate::optim::{run_optimization, OuterStop};
use crate::params::{ParameterSet, N_PARAMS, PARAM_NAMES};
use crate::phantom::{generate_phantom, make_target, CaseData, TargetMode};
use crate::pod::{build_pod_array, PodArray};
use crate::rom::{assemble_rom_tensors, rom_sensitivities, rom_solve, RomModel, RomSettings};

/// Exit status when a check command misses its threshold.
pub const EXIT_THRESHOLD: i32 = 4;

/// FD agreement below this is round-off dominated, so halving the step is
/// not expected to improve it.
pub const FD_NOISE_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct RunOutcome {
    pub exit_code: i32,
    pub summary: String,
}

impl RunOutcome {
    fn ok(summary: String) -> Self {
        RunOutcome { exit_code: 0, summary }
    }

    fn checked(pass: bool, summary: String) -> Self {
        RunOutcome {
            exit_code: if pass { 0 } else { EXIT_THRESHOLD },
            summary,
        }
    }
}

/// Relative lumped L2 distance `‖a − b‖_h / ‖b‖_h`.
pub fn relative_l2(weights: &[f64], a: &[f64], b: &[f64]) -> f64 {
    let (mut d, mut n) = (0.0, 0.0);
    for ((&x, &y), &w) in a.iter().zip(b).zip(weights) {
        d += w * (x - y) * (x - y);
        n += w * y * y;
    }
    if n == 0.0 {
        d.sqrt()
    } else {
        (d / n).sqrt()
    }
}

/// Free energy `∫ γ²/2 |∇φ|² + E (c_e ψ1(φ) + ψ2(φ))` with lumped quadrature.
pub fn free_energy(case: &CaseData, p: &ParameterSet, phi: &[f64]) -> f64 {
    let ops = case.operators();
    let grad = 0.5 * p.gamma2 * ops.laplace().bilinear(phi, phi);
    let w = case.mesh().lumped_mass();
    let bulk: f64 = phi
        .iter()
        .zip(w)
        .map(|(&f, &m)| {
            let psi1 = -(1.0 - f).ln();
            let psi2 = -f * f * f / 3.0 - p.c_e * (0.5 * f * f + f);
            m * (p.c_e * psi1 + psi2)
        })
        .sum();
    grad + p.e * bulk
}

/// Case named by the config, with the seed override applied.
pub fn prepare_case(cfg: &RunConfig) -> Result<CaseData> {
    match &cfg.case {
        CaseSource::Phantom(pc) => {
            let mut pc = pc.clone();
            if let Some(seed) = cfg.seed {
                pc.rng_seed = seed;
            }
            generate_phantom(&pc)
        }
        CaseSource::Path(dir) => load_case(dir),
    }
}

pub fn run(cfg: &RunConfig) -> Result<RunOutcome> {
    cfg.validate()?;
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(n) = cfg.thread_count()? {
        pool = pool.num_threads(n);
    }
    let pool = pool
        .build()
        .map_err(|e| Error::InvalidConfig(format!("thread pool: {e}")))?;
    pool.install(|| run_in_pool(cfg))
}

fn run_in_pool(cfg: &RunConfig) -> Result<RunOutcome> {
    let out = cfg.output.as_path();
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    write_json(&out.join("config.json"), cfg)?;
    let case = prepare_case(cfg)?;
    log::info!(
        "case: {} vertices, {} cells, {} steps of {} days",
        case.mesh().n_vertices(),
        case.mesh().n_cells(),
        case.n_steps(),
        case.dt()
    );
    match cfg.command {
        Command::Forward => forward(cfg, &case, out),
        Command::PodReport => pod_report(cfg, &case, out),
        Command::RomFidelity => rom_fidelity(cfg, &case, out),
        Command::SensitivityCheck => sensitivity_check(cfg, &case, out),
        Command::Optimize => optimize(cfg, case, out),
    }
}

/// One row per vertex, one column per time index.
fn columns_csv(path: &Path, prefix: &str, columns: &[Vec<f64>]) -> Result<()> {
    let names: Vec<String> = (0..columns.len()).map(|n| format!("{prefix}{n}")).collect();
    let mut header = vec!["vertex"];
    header.extend(names.iter().map(String::as_str));
    let nv = columns.first().map_or(0, Vec::len);
    let rows: Vec<Vec<f64>> = (0..nv)
        .map(|j| {
            let mut row = vec![j as f64];
            row.extend(columns.iter().map(|c| c[j]));
            row
        })
        .collect();
    write_csv(path, &header, &rows)
}

#[derive(Serialize)]
struct SnapshotMeta {
    #[serde(serialize_with = "crate::numfmt::f17")]
    dt: f64,
    n_steps: usize,
    params: ParameterSet,
    files: [&'static str; 5],
}

fn write_snapshots(dir: &Path, case: &CaseData, p: &ParameterSet, run: &FomRun) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let files = ["phi.csv", "sigma.csv", "n.csv", "psi1p.csv", "psi1pp.csv"];
    for (f, seq) in files.iter().zip(run.snapshots.sequences()) {
        columns_csv(&dir.join(f), "step_", seq)?;
    }
    write_json(
        &dir.join("meta.json"),
        &SnapshotMeta {
            dt: case.dt(),
            n_steps: case.n_steps(),
            params: *p,
            files,
        },
    )
}

#[derive(Serialize)]
struct ForwardSummary {
    vertices: usize,
    steps: usize,
    vi_iterations: usize,
    halved_steps: usize,
    wall_seconds: f64,
    seconds_per_step: f64,
}

fn forward(cfg: &RunConfig, case: &CaseData, out: &Path) -> Result<RunOutcome> {
    let run = fom_solve(case, &cfg.p0, true)?;
    save_case(case, &out.join("case"))?;
    write_snapshots(&out.join("snapshots"), case, &cfg.p0, &run)?;

    let w = case.mesh().lumped_mass();
    let mass = |v: &[f64]| v.iter().zip(w).map(|(a, b)| a * b).sum::<f64>();
    let rows: Vec<Vec<f64>> = (0..run.snapshots.len())
        .map(|n| {
            let phi = &run.snapshots.phi[n];
            vec![
                n as f64,
                case.time(n),
                mass(phi),
                mass(&run.snapshots.n[n]),
                free_energy(case, &cfg.p0, phi),
                phi.iter().copied().fold(f64::INFINITY, f64::min),
                phi.iter().copied().fold(f64::NEG_INFINITY, f64::max),
                case.therapy().rate(case.time(n)),
            ]
        })
        .collect();
    write_csv(
        &out.join("audit.csv"),
        &[
            "step",
            "t_day",
            "mass_phi_mm2",
            "mass_n_mm2",
            "energy_Pa_mm2",
            "min_phi",
            "max_phi",
            "k_T_per_day",
        ],
        &rows,
    )?;
    let secs = run.wall_time.as_secs_f64();
    write_json(
        &out.join("forward.json"),
        &ForwardSummary {
            vertices: case.mesh().n_vertices(),
            steps: case.n_steps(),
            vi_iterations: run.vi_iterations,
            halved_steps: run.halved_steps,
            wall_seconds: secs,
            seconds_per_step: secs / case.n_steps().max(1) as f64,
        },
    )?;
    Ok(RunOutcome::ok(format!(
        "forward: {} steps in {secs:.3} s, final tumour mass {}",
        case.n_steps(),
        format17(rows.last().map_or(0.0, |r| r[2]))
    )))
}

#[derive(Serialize)]
struct PodSummary {
    ic: f64,
    n_pod: usize,
    sequences: Vec<SequenceSummary>,
    deim_nodes: Vec<usize>,
    deim_condition: f64,
}

#[derive(Serialize)]
struct SequenceSummary {
    name: &'static str,
    n_required: usize,
    rank: usize,
    trace: f64,
}

const SEQUENCES: [&str; 5] = ["phi", "sigma", "n", "psi1p", "psi1pp"];

/// Cumulative energy table in percent; the first column is the φ sequence.
pub fn write_pod_report(pods: &PodArray, dir: &Path) -> Result<()> {
    let bases = pods.bases();
    let rows_n = bases.iter().map(|b| b.energy.len()).max().unwrap_or(0);
    let rows: Vec<Vec<f64>> = (0..rows_n)
        .map(|i| {
            let mut row: Vec<f64> = bases
                .iter()
                .map(|b| 100.0 * b.energy.get(i).or(b.energy.last()).copied().unwrap_or(1.0))
                .collect();
            row.push((i + 1) as f64);
            row
        })
        .collect();
    write_csv(
        &dir.join("pod_energy.csv"),
        &[
            "phi_cumulative_pct",
            "sigma_cumulative_pct",
            "n_cumulative_pct",
            "psi1p_cumulative_pct",
            "psi1pp_cumulative_pct",
            "modes",
        ],
        &rows,
    )?;
    for (b, name) in bases.iter().zip(SEQUENCES) {
        columns_csv(&dir.join(format!("basis_{name}.csv")), "mode_", &b.vectors)?;
    }
    let n_eig = bases.iter().map(|b| b.eigenvalues.len()).max().unwrap_or(0);
    let eig_rows: Vec<Vec<f64>> = (0..n_eig)
        .map(|i| {
            let mut row = vec![(i + 1) as f64];
            row.extend(bases.iter().map(|b| b.eigenvalues.get(i).copied().unwrap_or(0.0)));
            row
        })
        .collect();
    write_csv(
        &dir.join("eigenvalues.csv"),
        &["index", "phi", "sigma", "n", "psi1p", "psi1pp"],
        &eig_rows,
    )?;
    write_json(
        &dir.join("pod.json"),
        &PodSummary {
            ic: pods.ic,
            n_pod: pods.n_pod(),
            sequences: bases
                .iter()
                .zip(SEQUENCES)
                .map(|(b, name)| SequenceSummary {
                    name,
                    n_required: b.n_required,
                    rank: b.rank(),
                    trace: b.trace,
                })
                .collect(),
            deim_nodes: pods.deim_psi1pp.nodes.clone(),
            deim_condition: pods.deim_psi1pp.condition,
        },
    )
}

fn pod_report(cfg: &RunConfig, case: &CaseData, out: &Path) -> Result<RunOutcome> {
    let run = fom_solve(case, &cfg.p0, true)?;
    let pods = build_pod_array(&run.snapshots, cfg.objective.ic, case.mesh().lumped_mass())?;
    write_pod_report(&pods, out)?;
    let req: Vec<String> = pods
        .bases()
        .iter()
        .zip(SEQUENCES)
        .map(|(b, s)| format!("{s}={}", b.n_required))
        .collect();
    Ok(RunOutcome::ok(format!(
        "pod-report: N_POD = {} at ic = {} ({})",
        pods.n_pod(),
        cfg.objective.ic,
        req.join(", ")
    )))
}

/// ROM built from `run` at threshold `ic`.
pub fn build_rom(case: &CaseData, run: &FomRun, ic: f64) -> Result<(PodArray, RomModel)> {
    let pods = build_pod_array(&run.snapshots, ic, case.mesh().lumped_mass())?;
    let tensors = assemble_rom_tensors(&pods, case)?;
    let model = RomModel::new(&pods, tensors, case)?;
    Ok((pods, model))
}

#[derive(Serialize)]
struct FidelityLevel {
    ic: f64,
    n_pod: usize,
    final_error_phi: f64,
    final_error_n: f64,
    rom_seconds_per_step: f64,
    offline_seconds: f64,
}

#[derive(Serialize)]
struct FidelitySummary {
    fom_seconds_per_step: f64,
    levels: Vec<FidelityLevel>,
    tolerance: f64,
    pass: bool,
}

fn rom_fidelity(cfg: &RunConfig, case: &CaseData, out: &Path) -> Result<RunOutcome> {
    let p = &cfg.p0;
    let run = fom_solve(case, p, true)?;
    let w = case.mesh().lumped_mass();
    let mut columns: Vec<(Vec<f64>, Vec<f64>)> = Vec::new();
    let mut levels = Vec::new();
    for &ic in &cfg.checks.fidelity_ic {
        let t0 = Instant::now();
        let (pods, model) = build_rom(case, &run, ic)?;
        let offline = t0.elapsed().as_secs_f64();
        let traj = rom_solve(&model, p, &cfg.objective.rom)?;
        let (mut e_phi, mut e_n) = (Vec::new(), Vec::new());
        for (n, s) in traj.states.iter().enumerate() {
            e_phi.push(relative_l2(w, &model.reconstruct_phi(&s.alpha), &run.snapshots.phi[n]));
            e_n.push(relative_l2(w, &pods.n.reconstruct(&s.eta), &run.snapshots.n[n]));
        }
        levels.push(FidelityLevel {
            ic,
            n_pod: pods.n_pod(),
            final_error_phi: *e_phi.last().expect("initial state"),
            final_error_n: *e_n.last().expect("initial state"),
            rom_seconds_per_step: traj.wall_time.as_secs_f64() / case.n_steps().max(1) as f64,
            offline_seconds: offline,
        });
        columns.push((e_phi, e_n));
    }
    let mut header = vec!["step".to_string(), "t_day".to_string()];
    for l in &levels {
        header.push(format!("err_phi_ic{}", l.ic));
        header.push(format!("err_n_ic{}", l.ic));
    }
    let rows: Vec<Vec<f64>> = (0..=case.n_steps())
        .map(|n| {
            let mut row = vec![n as f64, case.time(n)];
            for (a, b) in &columns {
                row.push(a[n]);
                row.push(b[n]);
            }
            row
        })
        .collect();
    let header: Vec<&str> = header.iter().map(String::as_str).collect();
    write_csv(&out.join("fidelity.csv"), &header, &rows)?;

    let first = &levels[0];
    let pass = first.final_error_phi <= cfg.checks.fidelity_tol
        && levels.windows(2).all(|l| l[1].final_error_phi > l[0].final_error_phi);
    let summary = levels
        .iter()
        .map(|l| format!("ic {} -> N_POD {} error {:.3e}", l.ic, l.n_pod, l.final_error_phi))
        .collect::<Vec<_>>()
        .join("; ");
    write_json(
        &out.join("fidelity.json"),
        &FidelitySummary {
            fom_seconds_per_step: run.wall_time.as_secs_f64() / case.n_steps().max(1) as f64,
            levels,
            tolerance: cfg.checks.fidelity_tol,
            pass,
        },
    )?;
    Ok(RunOutcome::checked(pass, format!("rom-fidelity: {summary}")))
}

/// One row of the sensitivity table.
#[derive(Clone, Debug, Serialize)]
pub struct SensitivityRow {
    pub param: &'static str,
    pub linearized_norm: f64,
    pub fd_norm: f64,
    pub rel_error: f64,
    pub rel_error_half_step: f64,
}

impl SensitivityRow {
    pub fn halving_ok(&self) -> bool {
        self.rel_error_half_step <= self.rel_error.max(FD_NOISE_FLOOR)
    }
}

/// Linearized `∂α^N/∂P_m` against central differences with step
/// `h·P_m` and `h·P_m/2`.
pub fn sensitivity_table(model: &RomModel, p: &ParameterSet, h: f64) -> Result<Vec<SensitivityRow>> {
    let tight = RomSettings::tight();
    let traj = rom_solve(model, p, &tight)?;
    let sens = rom_sensitivities(model, p, &traj)?;
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let fd = |m: usize, step: f64| -> Result<Vec<f64>> {
        let ap = rom_solve(model, &p.with(m, p.get(m) + step), &tight)?;
        let am = rom_solve(model, &p.with(m, p.get(m) - step), &tight)?;
        Ok(ap
            .last()
            .alpha
            .iter()
            .zip(&am.last().alpha)
            .map(|(a, b)| (a - b) / (2.0 * step))
            .collect())
    };
    (0..N_PARAMS)
        .map(|m| {
            let lin = sens.final_alpha_for(m).expect("all parameters");
            let step = h * p.get(m);
            let rel = |fd: &[f64]| {
                let diff: Vec<f64> = fd.iter().zip(&lin).map(|(a, b)| a - b).collect();
                norm(&diff) / norm(fd).max(f64::MIN_POSITIVE)
            };
            let f1 = fd(m, step)?;
            let f2 = fd(m, 0.5 * step)?;
            Ok(SensitivityRow {
                param: PARAM_NAMES[m],
                linearized_norm: norm(&lin),
                fd_norm: norm(&f1),
                rel_error: rel(&f1),
                rel_error_half_step: rel(&f2),
            })
        })
        .collect()
}

fn sensitivity_check(cfg: &RunConfig, case: &CaseData, out: &Path) -> Result<RunOutcome> {
    let run = fom_solve(case, &cfg.p0, true)?;
    let (_, model) = build_rom(case, &run, cfg.objective.ic)?;
    let rows = sensitivity_table(&model, &cfg.p0, cfg.checks.fd_step)?;
    let tol = cfg.checks.sensitivity_tol;
    let mut text = String::from("param,linearized_norm,fd_norm,rel_error,rel_error_half_step,pass\n");
    for r in &rows {
        text.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.param,
            format17(r.linearized_norm),
            format17(r.fd_norm),
            format17(r.rel_error),
            format17(r.rel_error_half_step),
            r.rel_error <= tol
        ));
    }
    let path = out.join("sensitivity.csv");
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    let worst = rows.iter().map(|r| r.rel_error).fold(0.0, f64::max);
    let pass = rows.iter().all(|r| r.rel_error <= tol);
    Ok(RunOutcome::checked(
        pass,
        format!("sensitivity-check: worst relative error {worst:.3e} (tolerance {tol:e})"),
    ))
}

fn optimize(cfg: &RunConfig, case: CaseData, out: &Path) -> Result<RunOutcome> {
    let case = match (&cfg.target, case.target().is_some()) {
        (Some(mode), _) => {
            let t = make_target(&case, mode)?;
            case.with_target(t)?
        }
        (None, true) => case,
        (None, false) => {
            let t = make_target(&case, &TargetMode::Synthetic(cfg.p_box.expected))?;
            case.with_target(t)?
        }
    };
    save_case(&case, &out.join("case"))?;
    let trace = run_optimization(&case, &cfg.p0, &cfg.p_box, &cfg.objective)?;
    trace.write(out)?;
    let code = match trace.stop {
        OuterStop::FomFailure(_) | OuterStop::InnerFailure(_) => 3,
        _ => 0,
    };
    Ok(RunOutcome {
        exit_code: code,
        summary: format!(
            "optimize: J {} -> {} after {} outer iterations, stop {:?}",
            format17(trace.initial_j()),
            format17(trace.j_opt),
            trace.outer.len(),
            trace.stop
        ),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_l2_matches_hand_value() {
        let w = [1.0, 3.0];
        let a = [1.0, 1.0];
        let b = [0.0, 2.0];
        // (1 + 3) / 12
        assert!((relative_l2(&w, &a, &b) - (4.0f64 / 12.0).sqrt()).abs() < 1e-15);
    }

    #[test]
    fn halving_check_respects_noise_floor() {
        let row = |a, b| SensitivityRow {
            param: "L",
            linearized_norm: 1.0,
            fd_norm: 1.0,
            rel_error: a,
            rel_error_half_step: b,
        };
        assert!(row(1e-3, 5e-4).halving_ok());
        assert!(!row(1e-3, 2e-3).halving_ok());
        assert!(row(1e-9, 5e-8).halving_ok());
    }
}
