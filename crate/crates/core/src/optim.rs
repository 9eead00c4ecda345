//! Objective, weighted gradient and the alternating full/reduced projected
//! weighted-gradient optimizer.
//!
//! Steps are taken in the scaled coordinates `q = P / dP₀`, where
//! `dP₀ = 10^{−n_w} P₀`; distances in the Armijo test and the stationarity
//! measure are Euclidean in `q`.

use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fom::fom_solve;
use crate::params::{ParameterBox, ParameterSet, IDX_CE, N_PARAMS, PARAM_NAMES};
use crate::phantom::{threshold_indicator, CaseData};
use crate::pod::build_pod_array;
use crate::rom::{assemble_rom_tensors, rom_sensitivities, rom_solve, RomModel, RomSettings, RomTrajectory};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ObjectiveConfig {
    /// Regularization weight.
    pub eta: f64,
    /// Regularization centre; the box's expected values when absent.
    pub p_exp: Option<ParameterSet>,
    pub tol_f: f64,
    pub tol_ra: f64,
    pub tol_rb: f64,
    pub tol_pa: f64,
    pub tol_pr: f64,
    pub n_w: i32,
    pub beta_armijo: f64,
    pub max_backtrack: usize,
    pub max_inner: usize,
    pub max_outer: usize,
    /// POD information content.
    pub ic: f64,
    pub rom: RomSettings,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        ObjectiveConfig {
            eta: 1e-4,
            p_exp: None,
            tol_f: 1e-3,
            tol_ra: 1e-3,
            tol_rb: 1e-3,
            tol_pa: 1e-6,
            tol_pr: 1e-3,
            n_w: 1,
            beta_armijo: 0.5,
            max_backtrack: 40,
            max_inner: 500,
            max_outer: 20,
            ic: 0.9999,
            rom: RomSettings {
                newton_tol: 1e-8,
                ..Default::default()
            },
        }
    }
}

impl ObjectiveConfig {
    pub fn validate(&self) -> Result<()> {
        let tols = [self.tol_f, self.tol_ra, self.tol_rb, self.tol_pa, self.tol_pr];
        if !(self.eta >= 0.0)
            || tols.iter().any(|t| !(*t > 0.0))
            || !(self.beta_armijo > 0.0 && self.beta_armijo < 1.0)
            || self.n_w < 1
            || self.max_backtrack == 0
            || !(self.ic > 0.0 && self.ic <= 1.0)
        {
            return Err(Error::InvalidConfig("objective configuration out of range".into()));
        }
        if let Some(p) = &self.p_exp {
            p.validate()?;
        }
        Ok(())
    }

    pub fn expected(&self, bx: &ParameterBox) -> ParameterSet {
        self.p_exp.unwrap_or(bx.expected)
    }

    /// `dP₀ = 10^{−n_w} P₀`.
    pub fn weights(&self, p0: &ParameterSet) -> [f64; N_PARAMS] {
        p0.to_array().map(|v| v * 10f64.powi(-self.n_w))
    }
}

/// Ramp from 0 at `φ = 0` to 1 at `φ = φ_e/2`.
pub fn regularized_heaviside(phi: f64, phi_e: f64) -> f64 {
    if phi >= 0.5 * phi_e {
        1.0
    } else if phi > 0.0 {
        2.0 * phi / phi_e
    } else {
        0.0
    }
}

/// `dH/dφ`; kinks take the ramp value.
pub fn heaviside_slope(phi: f64, phi_e: f64) -> f64 {
    if (0.0..=0.5 * phi_e).contains(&phi) {
        2.0 / phi_e
    } else {
        0.0
    }
}

/// `∂H/∂c_e` through `φ_e = 1 − c_e`.
pub fn heaviside_ce_partial(phi: f64, phi_e: f64) -> f64 {
    if (0.0..=0.5 * phi_e).contains(&phi) {
        2.0 * phi / (phi_e * phi_e)
    } else {
        0.0
    }
}

fn weighted_norm2(w: &[f64], v: &[f64]) -> f64 {
    w.iter().zip(v).map(|(a, b)| a * b * b).sum()
}

/// `η/2 Σ ((P − P_exp)/P_exp)²`
pub fn regularization(p: &ParameterSet, p_exp: &ParameterSet, eta: f64) -> f64 {
    let (a, b) = (p.to_array(), p_exp.to_array());
    0.5 * eta * (0..N_PARAMS).map(|m| ((a[m] - b[m]) / b[m]).powi(2)).sum::<f64>()
}

/// Normalized misfit of `H(φ)` against the target plus the regularization.
pub fn objective(
    phi: &[f64],
    p: &ParameterSet,
    target: &[f64],
    weights: &[f64],
    p_exp: &ParameterSet,
    eta: f64,
) -> Result<f64> {
    if phi.len() != target.len() || phi.len() != weights.len() {
        return Err(Error::Dimension("objective fields differ in length".into()));
    }
    let t2 = weighted_norm2(weights, target);
    if !(t2 > 0.0) {
        return Err(Error::Normalization);
    }
    let phi_e = p.phi_e();
    let mis: f64 = phi
        .iter()
        .zip(target)
        .zip(weights)
        .map(|((&f, &t), &w)| w * (regularized_heaviside(f, phi_e) - t).powi(2))
        .sum();
    Ok(0.5 * mis / t2 + regularization(p, p_exp, eta))
}

/// Weighted gradient from the final reduced state and its sensitivities.
/// `dphi[m]` is `Φ ∂α^N/∂P_m` on the mesh.
#[allow(clippy::too_many_arguments)]
pub fn weighted_gradient(
    phi: &[f64],
    dphi: &[Vec<f64>],
    p: &ParameterSet,
    target: &[f64],
    weights: &[f64],
    p_exp: &ParameterSet,
    eta: f64,
    dp0: &[f64; N_PARAMS],
) -> Result<[f64; N_PARAMS]> {
    let t2 = weighted_norm2(weights, target);
    if !(t2 > 0.0) {
        return Err(Error::Normalization);
    }
    let phi_e = p.phi_e();
    let res: Vec<f64> = phi
        .iter()
        .zip(target)
        .map(|(&f, &t)| regularized_heaviside(f, phi_e) - t)
        .collect();
    let (pa, pe) = (p.to_array(), p_exp.to_array());
    let mut g = [0.0; N_PARAMS];
    for m in 0..N_PARAMS {
        let mut s: f64 = (0..phi.len())
            .map(|x| weights[x] * res[x] * heaviside_slope(phi[x], phi_e) * dphi[m][x])
            .sum();
        if m == IDX_CE {
            s += (0..phi.len())
                .map(|x| weights[x] * res[x] * heaviside_ce_partial(phi[x], phi_e))
                .sum::<f64>();
        }
        g[m] = s * dp0[m] / t2 + eta * (pa[m] - pe[m]) / (pe[m] * pe[m]) * dp0[m];
    }
    Ok(g)
}

/// `clamp(P − λ g)` componentwise into the box.
pub fn project_params(p: &ParameterSet, lambda: f64, g: &[f64; N_PARAMS], bx: &ParameterBox) -> ParameterSet {
    let a = p.to_array();
    let mut out = [0.0; N_PARAMS];
    for m in 0..N_PARAMS {
        out[m] = a[m] - lambda * g[m];
    }
    ParameterSet::from_array(bx.clamp(out))
}

/// Squared distance in the scaled coordinates.
pub fn scaled_dist2(a: &ParameterSet, b: &ParameterSet, dp0: &[f64; N_PARAMS]) -> f64 {
    let (a, b) = (a.to_array(), b.to_array());
    (0..N_PARAMS).map(|m| ((a[m] - b[m]) / dp0[m]).powi(2)).sum()
}

/// Step direction in parameter units, `dP₀ ⊙ g`.
pub fn direction(g: &[f64; N_PARAMS], dp0: &[f64; N_PARAMS]) -> [f64; N_PARAMS] {
    let mut d = [0.0; N_PARAMS];
    for m in 0..N_PARAMS {
        d[m] = dp0[m] * g[m];
    }
    d
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArmijoStep {
    pub p: ParameterSet,
    pub lambda: f64,
    /// Backtracking exponent `m` of `λ = β^m`.
    pub exponent: usize,
    pub j_old: f64,
    pub j_new: f64,
    /// `|P(λ) − P|²` in scaled coordinates.
    pub dist2: f64,
    pub failed_trials: usize,
}

impl ArmijoStep {
    /// The sufficient decrease test as evaluated.
    pub fn satisfies(&self) -> bool {
        self.j_new - self.j_old <= -1e-4 / self.lambda * self.dist2
    }
}

#[derive(Debug)]
pub enum PwgOutcome<T> {
    Accepted(ArmijoStep, T),
    /// Null projected step or backtracking exhausted.
    Stationary { failed_trials: usize },
}

/// Projected weighted-gradient step with Armijo backtracking `λ = β^m`,
/// `m = 1, 2, …`. Solver failures at a trial point reject that trial.
#[allow(clippy::too_many_arguments)]
pub fn pwg_step<T>(
    p: &ParameterSet,
    j: f64,
    g: &[f64; N_PARAMS],
    dp0: &[f64; N_PARAMS],
    bx: &ParameterBox,
    beta: f64,
    max_backtrack: usize,
    mut eval: impl FnMut(&ParameterSet) -> Result<(f64, T)>,
) -> Result<PwgOutcome<T>> {
    let dir = direction(g, dp0);
    let mut failed = 0;
    for m in 1..=max_backtrack {
        let lambda = beta.powi(m as i32);
        let trial = project_params(p, lambda, &dir, bx);
        let dist2 = scaled_dist2(&trial, p, dp0);
        if dist2 == 0.0 {
            return Ok(PwgOutcome::Stationary { failed_trials: failed });
        }
        match eval(&trial) {
            Ok((jt, payload)) => {
                let step = ArmijoStep {
                    p: trial,
                    lambda,
                    exponent: m,
                    j_old: j,
                    j_new: jt,
                    dist2,
                    failed_trials: failed,
                };
                if step.satisfies() {
                    return Ok(PwgOutcome::Accepted(step, payload));
                }
            }
            Err(e) if e.is_solver_failure() => {
                log::debug!("trial at lambda = {lambda}: {e}");
                failed += 1;
            }
            Err(e) => return Err(e),
        }
    }
    Ok(PwgOutcome::Stationary { failed_trials: failed })
}

/// Objective and gradient evaluation on a reduced model.
pub struct RomObjective<'a> {
    pub model: &'a RomModel,
    pub target: &'a [f64],
    pub weights: &'a [f64],
    pub p_exp: ParameterSet,
    pub eta: f64,
    pub settings: RomSettings,
}

impl RomObjective<'_> {
    pub fn eval(&self, p: &ParameterSet) -> Result<(f64, RomTrajectory)> {
        let traj = rom_solve(self.model, p, &self.settings)?;
        let phi = self.model.reconstruct_phi(&traj.last().alpha);
        let j = objective(&phi, p, self.target, self.weights, &self.p_exp, self.eta)?;
        Ok((j, traj))
    }

    pub fn gradient(&self, p: &ParameterSet, traj: &RomTrajectory, dp0: &[f64; N_PARAMS]) -> Result<[f64; N_PARAMS]> {
        let sens = rom_sensitivities(self.model, p, traj)?;
        let phi = self.model.reconstruct_phi(&traj.last().alpha);
        let fin = sens.final_alpha();
        let dphi: Vec<Vec<f64>> = (0..N_PARAMS)
            .map(|m| {
                let c: Vec<f64> = fin.column(m).iter().copied().collect();
                self.model.reconstruct_phi(&c)
            })
            .collect();
        weighted_gradient(&phi, &dphi, p, self.target, self.weights, &self.p_exp, self.eta, dp0)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InnerRecord {
    pub l: usize,
    pub p: ParameterSet,
    pub j_rom: f64,
    pub gradient: [f64; N_PARAMS],
    /// `|P_l(1) − P_l|` in scaled coordinates.
    pub stationarity: f64,
    pub grad_norm: f64,
    /// Accepted step from this iterate, if any.
    pub step: Option<ArmijoStep>,
    pub criteria: [bool; 3],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InnerStop {
    Converged,
    Stationary,
    Cap,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InnerResult {
    pub p: ParameterSet,
    pub records: Vec<InnerRecord>,
    pub stop: InnerStop,
}

/// Reduced inner loop from `p_k`, stopping when all three criteria hold.
pub fn rom_inner_loop(
    obj: &RomObjective<'_>,
    p_k: &ParameterSet,
    dp0: &[f64; N_PARAMS],
    bx: &ParameterBox,
    cfg: &ObjectiveConfig,
) -> Result<InnerResult> {
    let mut p = *p_k;
    let (mut j, mut traj) = obj.eval(&p)?;
    let mut records: Vec<InnerRecord> = Vec::new();
    let mut j_first: Vec<f64> = vec![j];
    let mut stat0 = 0.0;
    for l in 0..=cfg.max_inner {
        let g = obj.gradient(&p, &traj, dp0)?;
        let unit = project_params(&p, 1.0, &direction(&g, dp0), bx);
        let stat = scaled_dist2(&unit, &p, dp0).sqrt();
        if l == 0 {
            stat0 = stat;
        }
        let mut criteria = [false; 3];
        if let Some(prev) = records.last() {
            let (a, b) = (p.to_array(), prev.p.to_array());
            let ra = (0..N_PARAMS).map(|m| ((a[m] - b[m]) / b[m]).abs()).fold(0.0, f64::max);
            let scale_j = (j_first[1] - j_first[0]).abs();
            let q0 = scaled_dist2(p_k, &ParameterSet::from_array([0.0; N_PARAMS]), dp0).sqrt();
            criteria = [
                ra <= cfg.tol_ra,
                (j - prev.j_rom).abs() <= cfg.tol_rb * scale_j,
                stat <= cfg.tol_pa * q0 + cfg.tol_pr * stat0,
            ];
        }
        let mut rec = InnerRecord {
            l,
            p,
            j_rom: j,
            gradient: g,
            stationarity: stat,
            grad_norm: g.iter().map(|v| v * v).sum::<f64>().sqrt(),
            step: None,
            criteria,
        };
        if criteria.iter().all(|&c| c) {
            records.push(rec);
            return Ok(InnerResult {
                p,
                records,
                stop: InnerStop::Converged,
            });
        }
        if l == cfg.max_inner {
            records.push(rec);
            break;
        }
        match pwg_step(&p, j, &g, dp0, bx, cfg.beta_armijo, cfg.max_backtrack, |t| obj.eval(t))? {
            PwgOutcome::Accepted(step, new_traj) => {
                p = step.p;
                j = step.j_new;
                traj = new_traj;
                if j_first.len() == 1 {
                    j_first.push(j);
                }
                rec.step = Some(step);
                records.push(rec);
            }
            PwgOutcome::Stationary { .. } => {
                records.push(rec);
                return Ok(InnerResult {
                    p,
                    records,
                    stop: InnerStop::Stationary,
                });
            }
        }
    }
    log::warn!("inner loop reached its cap of {} iterations", cfg.max_inner);
    Ok(InnerResult {
        p,
        records,
        stop: InnerStop::Cap,
    })
}

/// Lumped-measure intersection over union of two indicators.
pub fn jaccard_index(a: &[f64], b: &[f64], weights: &[f64]) -> f64 {
    let (mut inter, mut union) = (0.0, 0.0);
    for ((&x, &y), &w) in a.iter().zip(b).zip(weights) {
        let (x, y) = (x > 0.5, y > 0.5);
        if x && y {
            inter += w;
        }
        if x || y {
            union += w;
        }
    }
    if union == 0.0 {
        1.0
    } else {
        inter / union
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StepSeconds {
    pub fom: f64,
    pub pod: f64,
    pub assembly: f64,
    pub inner: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FomEvaluation {
    pub j: f64,
    pub jaccard: f64,
    pub seconds: f64,
    /// FOM wall time divided by the step count.
    pub seconds_per_step: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InnerOutcome {
    pub result: InnerResult,
    pub n_pod: usize,
    pub seconds: StepSeconds,
    /// ROM wall time per step at `P_k`.
    pub rom_seconds_per_step: f64,
}

/// The two expensive stages of one outer iteration.
pub trait OuterModel {
    /// Full order solve at `p` (also refreshing the snapshots).
    fn fom_objective(&mut self, p: &ParameterSet) -> Result<FomEvaluation>;
    /// POD, assembly and the reduced loop from `p`, using the last snapshots.
    fn inner(&mut self, p: &ParameterSet) -> Result<InnerOutcome>;
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OuterRecord {
    pub k: usize,
    pub p: ParameterSet,
    pub j_fom: f64,
    pub jaccard: f64,
    pub fom_seconds_per_step: f64,
    pub inner: Option<InnerOutcome>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OuterStop {
    /// `J_FOM` did not decrease; the previous iterate is returned.
    Increase,
    Plateau,
    Cap,
    FomFailure(String),
    InnerFailure(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizationTrace {
    pub p_opt: ParameterSet,
    pub j_opt: f64,
    pub stop: OuterStop,
    pub outer: Vec<OuterRecord>,
}

impl OptimizationTrace {
    pub fn initial_j(&self) -> f64 {
        self.outer.first().map_or(f64::NAN, |r| r.j_fom)
    }

    /// FOM objective values of the iterates that were kept.
    pub fn accepted_j(&self) -> Vec<f64> {
        let n = match self.stop {
            OuterStop::Increase => self.outer.len() - 1,
            _ => self.outer.len(),
        };
        self.outer[..n].iter().map(|r| r.j_fom).collect()
    }

    /// `trace.json`, `convergence.csv` and `params.csv` in `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        crate::numfmt::write_json(&dir.join("trace.json"), self)?;
        let rows: Vec<Vec<f64>> = self
            .outer
            .iter()
            .map(|r| {
                let s = r.inner.as_ref().map(|i| i.seconds).unwrap_or_default();
                vec![
                    r.k as f64,
                    r.j_fom,
                    r.jaccard,
                    r.inner.as_ref().map_or(f64::NAN, |i| i.n_pod as f64),
                    r.inner.as_ref().map_or(f64::NAN, |i| i.result.records.len() as f64),
                    s.fom,
                    s.pod,
                    s.assembly,
                    s.inner,
                ]
            })
            .collect();
        crate::numfmt::write_csv(
            &dir.join("convergence.csv"),
            &[
                "k",
                "J_fom",
                "jaccard",
                "n_pod",
                "inner_iterations",
                "t_fom_s",
                "t_pod_s",
                "t_assembly_s",
                "t_inner_s",
            ],
            &rows,
        )?;
        let mut header = vec!["k", "l", "J_rom"];
        header.extend(PARAM_NAMES);
        let mut prows = Vec::new();
        for r in &self.outer {
            let mut row = vec![r.k as f64, f64::NAN, f64::NAN];
            row.extend(r.p.to_array());
            prows.push(row);
            if let Some(i) = &r.inner {
                for rec in &i.result.records {
                    let mut row = vec![r.k as f64, rec.l as f64, rec.j_rom];
                    row.extend(rec.p.to_array());
                    prows.push(row);
                }
            }
        }
        crate::numfmt::write_csv(&dir.join("params.csv"), &header, &prows)
    }
}

/// Alternates full order evaluations with reduced inner loops until `J_FOM`
/// increases or stalls relative to its first decrease.
pub fn run_outer(model: &mut dyn OuterModel, p0: &ParameterSet, cfg: &ObjectiveConfig) -> Result<OptimizationTrace> {
    let mut outer: Vec<OuterRecord> = Vec::new();
    let mut p = *p0;
    let finish = |outer: Vec<OuterRecord>, keep: usize, stop: OuterStop| {
        let r = &outer[keep];
        OptimizationTrace {
            p_opt: r.p,
            j_opt: r.j_fom,
            stop,
            outer,
        }
    };
    for k in 0.. {
        let eval = match model.fom_objective(&p) {
            Ok(e) => e,
            Err(e) if k > 0 => {
                let keep = outer.len() - 1;
                return Ok(finish(outer, keep, OuterStop::FomFailure(e.to_string())));
            }
            Err(e) => return Err(e),
        };
        outer.push(OuterRecord {
            k,
            p,
            j_fom: eval.j,
            jaccard: eval.jaccard,
            fom_seconds_per_step: eval.seconds_per_step,
            inner: None,
        });
        if k >= 1 {
            let (jk, jp) = (outer[k].j_fom, outer[k - 1].j_fom);
            if jk >= jp {
                return Ok(finish(outer, k - 1, OuterStop::Increase));
            }
            if (jk - jp).abs() <= cfg.tol_f * (outer[1].j_fom - outer[0].j_fom).abs() {
                return Ok(finish(outer, k, OuterStop::Plateau));
            }
        }
        if k >= cfg.max_outer {
            log::warn!("outer loop reached its cap of {} iterations", cfg.max_outer);
            return Ok(finish(outer, k, OuterStop::Cap));
        }
        match model.inner(&p) {
            Ok(o) => {
                p = o.result.p;
                if let Some(r) = outer.last_mut() {
                    r.inner = Some(InnerOutcome {
                        seconds: StepSeconds {
                            fom: eval.seconds,
                            ..o.seconds
                        },
                        ..o
                    });
                }
            }
            Err(e) => return Ok(finish(outer, k, OuterStop::InnerFailure(e.to_string()))),
        }
    }
    unreachable!("the outer loop returns from inside")
}

/// The full study on a case carrying a target mask.
pub struct PhantomStudy<'a> {
    pub case: &'a CaseData,
    pub bx: ParameterBox,
    pub cfg: ObjectiveConfig,
    pub dp0: [f64; N_PARAMS],
    snapshots: Option<crate::fom::SnapshotSet>,
}

impl<'a> PhantomStudy<'a> {
    pub fn new(case: &'a CaseData, bx: ParameterBox, cfg: ObjectiveConfig, p0: &ParameterSet) -> Result<Self> {
        cfg.validate()?;
        bx.validate()?;
        if case.target().is_none() {
            return Err(Error::InvalidTarget("the case has no target mask".into()));
        }
        Ok(PhantomStudy {
            case,
            bx,
            dp0: cfg.weights(p0),
            cfg,
            snapshots: None,
        })
    }

    fn target(&self) -> &[f64] {
        self.case.target().expect("checked in new")
    }
}

impl OuterModel for PhantomStudy<'_> {
    fn fom_objective(&mut self, p: &ParameterSet) -> Result<FomEvaluation> {
        let run = fom_solve(self.case, p, true)?;
        let w = self.case.mesh().lumped_mass();
        let j = objective(
            &run.state.phi,
            p,
            self.target(),
            w,
            &self.cfg.expected(&self.bx),
            self.cfg.eta,
        )?;
        let mask = threshold_indicator(&run.state.phi, 0.5 * p.phi_e());
        let jaccard = jaccard_index(&mask, self.target(), w);
        let seconds = run.wall_time.as_secs_f64();
        self.snapshots = Some(run.snapshots);
        Ok(FomEvaluation {
            j,
            jaccard,
            seconds,
            seconds_per_step: seconds / self.case.n_steps().max(1) as f64,
        })
    }

    fn inner(&mut self, p: &ParameterSet) -> Result<InnerOutcome> {
        let snaps = self
            .snapshots
            .take()
            .ok_or_else(|| Error::InvalidConfig("inner loop before a full order solve".into()))?;
        let w = self.case.mesh().lumped_mass();
        let t0 = Instant::now();
        let pods = build_pod_array(&snaps, self.cfg.ic, w)?;
        let t_pod = t0.elapsed().as_secs_f64();
        let t1 = Instant::now();
        let tensors = assemble_rom_tensors(&pods, self.case)?;
        let model = RomModel::new(&pods, tensors, self.case)?;
        let t_assembly = t1.elapsed().as_secs_f64();
        let obj = RomObjective {
            model: &model,
            target: self.target(),
            weights: w,
            p_exp: self.cfg.expected(&self.bx),
            eta: self.cfg.eta,
            settings: self.cfg.rom,
        };
        let t2 = Instant::now();
        let probe = rom_solve(&model, p, &self.cfg.rom)?;
        let rom_seconds_per_step = probe.wall_time.as_secs_f64() / model.n_steps.max(1) as f64;
        let result = rom_inner_loop(&obj, p, &self.dp0, &self.bx, &self.cfg)?;
        Ok(InnerOutcome {
            result,
            n_pod: pods.n_pod(),
            seconds: StepSeconds {
                fom: 0.0,
                pod: t_pod,
                assembly: t_assembly,
                inner: t2.elapsed().as_secs_f64(),
            },
            rom_seconds_per_step,
        })
    }
}

/// Runs the alternating optimization on a case with a target.
pub fn run_optimization(
    case: &CaseData,
    p0: &ParameterSet,
    bx: &ParameterBox,
    cfg: &ObjectiveConfig,
) -> Result<OptimizationTrace> {
    if !bx.contains(p0) {
        return Err(Error::InvalidConfig("initial parameters outside the box".into()));
    }
    let mut study = PhantomStudy::new(case, *bx, cfg.clone(), p0)?;
    run_outer(&mut study, p0, cfg)
}
