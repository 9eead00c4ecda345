//! Full order solver: semi-implicit nutrient step followed by the degenerate
//! Cahn–Hilliard variational inequality, with snapshot collection.
//!
//! The inequality is solved with a semismooth Newton method on the nodal
//! complementarity function `min(φ_j, ρ_j)`, where `ρ_j` is the scaled
//! residual of the chemical potential equation at node `j`. Nodes whose
//! mobility vanishes on every adjacent cell carry no flux; there `φ` is
//! fixed by the mass equation and `Σ` by the equality expression.

use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mesh::{CellTensorField, LocalStiffness, Mesh, SimplexMoments};
use crate::params::ParameterSet;
use crate::phantom::CaseData;
use crate::sparse::{pcg, CsrMatrix, SparseLu};

/// Separation guard: `φ ≤ 1 − EPS_SEP` everywhere.
pub const EPS_SEP: f64 = 1e-9;
/// Complementarity tolerance of the inequality solver.
pub const TOL_VI: f64 = 1e-8;
pub const MAX_VI_ITERATIONS: usize = 200;
/// Relative residual of the nutrient conjugate gradient solve.
pub const TOL_NUTRIENT: f64 = 1e-12;
/// Relative floor on cell mobility means.
pub const MOBILITY_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PotentialParams {
    pub e: f64,
    pub c_e: f64,
    pub gamma2: f64,
}

impl PotentialParams {
    pub fn new(e: f64, c_e: f64, gamma2: f64) -> Result<Self> {
        let p = PotentialParams { e, c_e, gamma2 };
        let phi_e = p.phi_e();
        if !(e > 0.0 && gamma2 > 0.0 && phi_e > 0.0 && phi_e < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "potential parameters E = {e}, gamma2 = {gamma2}, phi_e = {phi_e}"
            )));
        }
        Ok(p)
    }

    pub fn from_params(p: &ParameterSet) -> Self {
        PotentialParams {
            e: p.e,
            c_e: p.c_e,
            gamma2: p.gamma2,
        }
    }

    pub fn phi_e(&self) -> f64 {
        1.0 - self.c_e
    }
}

#[inline]
pub fn psi1p(phi: f64) -> f64 {
    1.0 / (1.0 - phi)
}

#[inline]
pub fn psi1pp(phi: f64) -> f64 {
    let s = 1.0 - phi;
    1.0 / (s * s)
}

#[inline]
pub fn psi2p(phi: f64, c_e: f64) -> f64 {
    -phi * phi - c_e * (phi + 1.0)
}

/// `(ψ1′, ψ1″, ψ2′)` of the single-well potential at `φ`.
pub fn potential_derivatives(phi: f64, phi_e: f64) -> Result<(f64, f64, f64)> {
    if !(phi < 1.0) {
        return Err(Error::SeparationViolation(phi));
    }
    Ok((psi1p(phi), psi1pp(phi), psi2p(phi, 1.0 - phi_e)))
}

/// Operators that depend on the case only.
#[derive(Debug)]
pub struct FomOperators {
    pub(crate) local_t: LocalStiffness,
    pub(crate) laplace: CsrMatrix,
    pub(crate) diffusion: CsrMatrix,
    pub(crate) moments: SimplexMoments,
    jac_row_ptr: Vec<usize>,
    jac_col_idx: Vec<usize>,
    jac_lu: SparseLu,
}

impl FomOperators {
    pub fn new(case: &CaseData) -> Result<Self> {
        let mesh = case.mesh();
        let local_t = LocalStiffness::new(mesh, case.mobility_tensor())?;
        let iso = CellTensorField::isotropic(mesh.dim(), mesh.n_cells(), 1.0);
        let laplace = LocalStiffness::new(mesh, &iso)?.assemble(mesh, None);
        let diffusion = LocalStiffness::new(mesh, case.diffusion())?.assemble(mesh, None);
        let moments = SimplexMoments::new(mesh.dim());

        let n = mesh.n_vertices();
        let (rp, ci) = (laplace.row_ptr(), laplace.col_idx());
        let mut jac_row_ptr = vec![0];
        let mut jac_col_idx = Vec::with_capacity(2 * (ci.len() + n));
        for j in 0..n {
            jac_col_idx.push(j);
            jac_col_idx.extend(ci[rp[j]..rp[j + 1]].iter().map(|&l| n + l));
            jac_row_ptr.push(jac_col_idx.len());
        }
        for j in 0..n {
            jac_col_idx.extend_from_slice(&ci[rp[j]..rp[j + 1]]);
            jac_col_idx.push(n + j);
            jac_row_ptr.push(jac_col_idx.len());
        }
        let jac_lu = SparseLu::new(2 * n, &jac_row_ptr, &jac_col_idx)?;
        Ok(FomOperators {
            local_t,
            laplace,
            diffusion,
            moments,
            jac_row_ptr,
            jac_col_idx,
            jac_lu,
        })
    }

    pub fn laplace(&self) -> &CsrMatrix {
        &self.laplace
    }

    pub fn diffusion(&self) -> &CsrMatrix {
        &self.diffusion
    }

    /// Cell means of the degenerate mobility `φ(1−φ)²`, integrated exactly.
    /// Means below `MOBILITY_FLOOR` times the largest one are flushed to zero,
    /// so that nodes carrying only round-off flux are treated as degenerate.
    pub fn mobility_means(&self, mesh: &Mesh, phi: &[f64]) -> Vec<f64> {
        let mut f = [0.0; 4];
        let mut mu: Vec<f64> = (0..mesh.n_cells())
            .map(|k| {
                let cell = mesh.cell(k);
                for (a, &v) in cell.iter().enumerate() {
                    f[a] = phi[v];
                }
                let f = &f[..cell.len()];
                if f.iter().all(|&x| x == 0.0) {
                    return 0.0;
                }
                let m = &self.moments;
                m.mean1(f) - 2.0 * m.mean2(f, f) + m.mean3(f, f, f)
            })
            .collect();
        let floor = MOBILITY_FLOOR * mu.iter().fold(0.0_f64, |a, &b| a.max(b));
        for v in mu.iter_mut() {
            if *v <= floor {
                *v = 0.0;
            }
        }
        mu
    }

    /// `(A_mob, A_chem)`: T-weighted stiffness with cell weights `μ_K` and `χ_K μ_K`.
    pub fn mobility_operators(&self, case: &CaseData, phi: &[f64]) -> (CsrMatrix, CsrMatrix) {
        let mesh = case.mesh();
        let mu = self.mobility_means(mesh, phi);
        let a_mob = self.local_t.assemble(mesh, Some(&mu));
        let chem: Vec<f64> = mu.iter().zip(case.chi()).map(|(m, c)| m * c).collect();
        let a_chem = self.local_t.assemble(mesh, Some(&chem));
        (a_mob, a_chem)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FomState {
    pub phi: Vec<f64>,
    pub sigma: Vec<f64>,
    pub n: Vec<f64>,
    pub t: f64,
    pub step: usize,
}

/// Time snapshots of φ, Σ, n, ψ1′(φ), ψ1″(φ); one column per time level.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SnapshotSet {
    pub phi: Vec<Vec<f64>>,
    pub sigma: Vec<Vec<f64>>,
    pub n: Vec<Vec<f64>>,
    pub psi1p: Vec<Vec<f64>>,
    pub psi1pp: Vec<Vec<f64>>,
}

impl SnapshotSet {
    pub fn len(&self) -> usize {
        self.phi.len()
    }

    pub fn is_empty(&self) -> bool {
        self.phi.is_empty()
    }

    pub fn push(&mut self, state: &FomState) {
        self.phi.push(state.phi.clone());
        self.sigma.push(state.sigma.clone());
        self.n.push(state.n.clone());
        self.psi1p.push(state.phi.iter().map(|&p| psi1p(p)).collect());
        self.psi1pp.push(state.phi.iter().map(|&p| psi1pp(p)).collect());
    }

    /// The five sequences in basis order φ, Σ, n, ψ1′, ψ1″.
    pub fn sequences(&self) -> [&Vec<Vec<f64>>; 5] {
        [&self.phi, &self.sigma, &self.n, &self.psi1p, &self.psi1pp]
    }
}

pub const SEQUENCE_NAMES: [&str; 5] = ["phi", "sigma", "n", "psi1p", "psi1pp"];

#[derive(Clone, Debug)]
pub struct FomRun {
    pub snapshots: SnapshotSet,
    pub state: FomState,
    pub wall_time: Duration,
    pub vi_iterations: usize,
    pub halved_steps: usize,
}

/// Nutrient step with `φ` lagged:
/// `[M/Δt + A_D + (δ_n − S_n) M diag(φ') + S_n M] n = M n'/Δt + S_n M (1 − φ')`.
pub fn solve_nutrient_step(
    case: &CaseData,
    p: &ParameterSet,
    phi_prev: &[f64],
    n_prev: &[f64],
    dt: f64,
) -> Result<Vec<f64>> {
    let mesh = case.mesh();
    mesh.check_nodal("phi_prev", phi_prev)?;
    mesh.check_nodal("n_prev", n_prev)?;
    let ops = case.operators();
    let m = mesh.lumped_mass();
    let mut a = ops.diffusion.clone();
    let diag: Vec<f64> = (0..m.len())
        .map(|j| m[j] * (1.0 / dt + (p.delta_n - p.s_n) * phi_prev[j] + p.s_n))
        .collect();
    a.add_diagonal(&diag);
    let b: Vec<f64> = (0..m.len())
        .map(|j| m[j] * (n_prev[j] / dt + p.s_n * (1.0 - phi_prev[j])))
        .collect();
    let (n, _) = pcg(&a, &b, n_prev, TOL_NUTRIENT, 20 * m.len() + 100)?;
    Ok(n)
}

/// Σ from the equality `γ²(∇φ,∇χ_j) + (E c_e ψ1′(φ) + E ψ2′(φ') − Σ, χ_j)^h = 0`
/// evaluated at every node.
pub fn recover_sigma(case: &CaseData, p: &ParameterSet, phi: &[f64], phi_prev: &[f64]) -> Vec<f64> {
    let ops = case.operators();
    let m = case.mesh().lumped_mass();
    let lap = ops.laplace.matvec(phi);
    (0..m.len())
        .map(|j| {
            p.gamma2 * lap[j] / m[j] + p.e * p.c_e * psi1p(phi[j]) + p.e * psi2p(phi_prev[j], p.c_e)
        })
        .collect()
}

#[derive(Clone, Debug)]
pub struct ChStep {
    pub phi: Vec<f64>,
    /// Σ as produced by the solver (multiplier at contact nodes).
    pub sigma: Vec<f64>,
    pub iterations: usize,
    /// Max over nodes of `|min(φ_j, ρ_j)|` and the mass-equation residual.
    pub residual: f64,
    pub active: usize,
}

struct ChSystem<'a> {
    n: usize,
    m: &'a [f64],
    phi_prev: Vec<f64>,
    a_mob: CsrMatrix,
    laplace: &'a CsrMatrix,
    /// Explicit source of the mass equation, already divided by `m_j`.
    src: Vec<f64>,
    degenerate: Vec<bool>,
    dt: f64,
    /// `Δt L E`: Σ is carried as `s = Σ/E`.
    coupling: f64,
    gamma2_over_e: f64,
    c_e: f64,
}

impl ChSystem<'_> {
    fn residual(&self, phi: &[f64], s: &[f64], rho: &mut [f64], f: &mut [f64]) {
        let n = self.n;
        let flux = self.a_mob.matvec(s);
        let lap = self.laplace.matvec(phi);
        for j in 0..n {
            f[j] = phi[j] - self.phi_prev[j] + self.coupling * flux[j] / self.m[j] - self.dt * self.src[j];
            rho[j] = self.gamma2_over_e * lap[j] / self.m[j] + self.c_e * psi1p(phi[j])
                + psi2p(self.phi_prev[j], self.c_e)
                - s[j];
            f[n + j] = if self.degenerate[j] {
                rho[j]
            } else {
                phi[j].min(rho[j])
            };
        }
    }
}

/// One Cahn–Hilliard step with the nutrient already advanced.
pub fn solve_ch_step(
    case: &CaseData,
    p: &ParameterSet,
    phi_prev: &[f64],
    n_new: &[f64],
    dt: f64,
    k_t: f64,
    sigma_guess: Option<&[f64]>,
) -> Result<ChStep> {
    let mesh = case.mesh();
    mesh.check_nodal("phi_prev", phi_prev)?;
    mesh.check_nodal("n_new", n_new)?;
    let ops = case.operators();
    let n = mesh.n_vertices();
    let m = mesh.lumped_mass();
    let (a_mob, a_chem) = ops.mobility_operators(case, phi_prev);
    let chem = a_chem.matvec(n_new);
    let src: Vec<f64> = (0..n)
        .map(|j| {
            let q = phi_prev[j];
            p.nu * q * (n_new[j] - p.delta) * (1.0 - q) + p.k_n * chem[j] / m[j] - k_t * q
        })
        .collect();
    let degenerate: Vec<bool> = (0..n).map(|j| a_mob.row(j).1.iter().all(|&v| v == 0.0)).collect();
    let sys = ChSystem {
        n,
        m,
        phi_prev: phi_prev.to_vec(),
        a_mob,
        laplace: &ops.laplace,
        src,
        degenerate,
        dt,
        coupling: dt * p.l * p.e,
        gamma2_over_e: p.gamma2 / p.e,
        c_e: p.c_e,
    };

    let mut phi: Vec<f64> = phi_prev.to_vec();
    let mut s: Vec<f64> = match sigma_guess {
        Some(g) => g.iter().map(|v| v / p.e).collect(),
        None => recover_sigma(case, p, phi_prev, phi_prev)
            .iter()
            .map(|v| v / p.e)
            .collect(),
    };
    let mut rho = vec![0.0; n];
    let mut f = vec![0.0; 2 * n];
    sys.residual(&phi, &s, &mut rho, &mut f);
    let mut merit = norm_sq(&f);

    let lap = &ops.laplace;
    let mut jac = vec![0.0; ops.jac_col_idx.len()];
    let mut trial_phi = vec![0.0; n];
    let mut trial_s = vec![0.0; n];
    let mut trial_rho = vec![0.0; n];
    let mut trial_f = vec![0.0; 2 * n];

    for it in 0..MAX_VI_ITERATIONS {
        let res = inf_norm(&f);
        if res <= TOL_VI {
            return finish(&sys, phi, s, p.e, it, res, &rho);
        }
        let rp = &ops.jac_row_ptr;
        for j in 0..n {
            let row = &mut jac[rp[j]..rp[j + 1]];
            row[0] = 1.0;
            let (_, vals) = sys.a_mob.row(j);
            for (dst, a) in row[1..].iter_mut().zip(vals) {
                *dst = sys.coupling * a / m[j];
            }
        }
        for j in 0..n {
            let row = &mut jac[rp[n + j]..rp[n + j + 1]];
            let (cols, vals) = lap.row(j);
            let active = !sys.degenerate[j] && phi[j] <= rho[j];
            if active {
                for (dst, &l) in row.iter_mut().zip(cols) {
                    *dst = if l == j { 1.0 } else { 0.0 };
                }
                *row.last_mut().unwrap() = 0.0;
            } else {
                for ((dst, &l), a) in row.iter_mut().zip(cols).zip(vals) {
                    *dst = sys.gamma2_over_e * a / m[j]
                        + if l == j { sys.c_e * psi1pp(phi[j]) } else { 0.0 };
                }
                *row.last_mut().unwrap() = -1.0;
            }
        }
        let rhs: Vec<f64> = f.iter().map(|v| -v).collect();
        let dx = ops.jac_lu.factor(&jac)?.solve(&rhs)?;
        let (dphi, ds) = dx.split_at(n);

        let mut t = 1.0;
        loop {
            let mut separated = true;
            for j in 0..n {
                trial_phi[j] = phi[j] + t * dphi[j];
                trial_s[j] = s[j] + t * ds[j];
                if trial_phi[j] >= 1.0 - EPS_SEP {
                    separated = false;
                }
            }
            if separated {
                sys.residual(&trial_phi, &trial_s, &mut trial_rho, &mut trial_f);
                let trial_merit = norm_sq(&trial_f);
                if trial_merit <= (1.0 - 1e-4 * t) * merit || t < 1e-6 {
                    merit = trial_merit;
                    break;
                }
            }
            t *= 0.5;
            if t < 1e-12 {
                return Err(Error::SolverFailure(format!(
                    "inequality solver line search stalled at iteration {it}"
                )));
            }
        }
        std::mem::swap(&mut phi, &mut trial_phi);
        std::mem::swap(&mut s, &mut trial_s);
        std::mem::swap(&mut rho, &mut trial_rho);
        std::mem::swap(&mut f, &mut trial_f);
    }
    let res = inf_norm(&f);
    if res <= TOL_VI {
        return finish(&sys, phi, s, p.e, MAX_VI_ITERATIONS, res, &rho);
    }
    Err(Error::SolverFailure(format!(
        "inequality solver: residual {res:e} after {MAX_VI_ITERATIONS} iterations"
    )))
}

fn finish(
    sys: &ChSystem<'_>,
    mut phi: Vec<f64>,
    s: Vec<f64>,
    e: f64,
    iterations: usize,
    residual: f64,
    rho: &[f64],
) -> Result<ChStep> {
    let mut active = 0;
    for j in 0..sys.n {
        if !sys.degenerate[j] && phi[j] <= rho[j] {
            active += 1;
            phi[j] = 0.0;
        } else if phi[j] < 0.0 {
            phi[j] = 0.0;
        }
    }
    let max = phi.iter().fold(0.0_f64, |a, &b| a.max(b));
    if max > 1.0 - EPS_SEP {
        return Err(Error::SeparationViolation(max));
    }
    Ok(ChStep {
        phi,
        sigma: s.iter().map(|v| v * e).collect(),
        iterations,
        residual,
        active,
    })
}

fn norm_sq(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum()
}

fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0_f64, |a, b| a.max(b.abs()))
}

/// One full time step `(φ', n') → (φ, Σ, n)`; returns the inequality iteration count.
pub fn advance(
    case: &CaseData,
    p: &ParameterSet,
    state: &FomState,
    dt: f64,
    k_t: f64,
) -> Result<(FomState, usize)> {
    let n_new = solve_nutrient_step(case, p, &state.phi, &state.n, dt)?;
    let ch = solve_ch_step(case, p, &state.phi, &n_new, dt, k_t, Some(&state.sigma))?;
    let sigma = recover_sigma(case, p, &ch.phi, &state.phi);
    Ok((
        FomState {
            phi: ch.phi,
            sigma,
            n: n_new,
            t: state.t + dt,
            step: state.step + 1,
        },
        ch.iterations,
    ))
}

pub fn initial_state(case: &CaseData, p: &ParameterSet) -> FomState {
    let phi = case.phi0().to_vec();
    let sigma = recover_sigma(case, p, &phi, &phi);
    FomState {
        phi,
        sigma,
        n: case.n0().to_vec(),
        t: 0.0,
        step: 0,
    }
}

/// Runs `N` steps; on a failed step retries once with two half steps.
pub fn fom_solve(case: &CaseData, p: &ParameterSet, collect_snapshots: bool) -> Result<FomRun> {
    p.validate()?;
    let start = Instant::now();
    let dt = case.dt();
    let mut state = initial_state(case, p);
    let mut snapshots = SnapshotSet::default();
    if collect_snapshots {
        snapshots.push(&state);
    }
    let mut vi_iterations = 0;
    let mut halved_steps = 0;
    for step in 1..=case.n_steps() {
        let k_t = case.therapy().rate(case.time(step));
        let next = match advance(case, p, &state, dt, k_t) {
            Ok((s, it)) => {
                vi_iterations += it;
                s
            }
            Err(first) if first.is_solver_failure() => {
                halved_steps += 1;
                log::warn!("step {step}: {first}; retrying with two half steps");
                let half = advance(case, p, &state, 0.5 * dt, k_t)
                    .and_then(|(mid, a)| {
                        advance(case, p, &mid, 0.5 * dt, k_t).map(|(end, b)| (end, a + b))
                    })
                    .map_err(|e| Error::StepFailure {
                        step,
                        reason: e.to_string(),
                    })?;
                vi_iterations += half.1;
                half.0
            }
            Err(e) => return Err(e),
        };
        state = FomState {
            t: case.time(step),
            step,
            ..next
        };
        if collect_snapshots {
            snapshots.push(&state);
        }
    }
    Ok(FomRun {
        snapshots,
        state,
        wall_time: start.elapsed(),
        vi_iterations,
        halved_steps,
    })
}

/// Nodal complementarity residual `max_j |min(φ_j, r_j/(m_j E))|` of a step result.
pub fn complementarity_residual(
    case: &CaseData,
    p: &ParameterSet,
    phi: &[f64],
    sigma: &[f64],
    phi_prev: &[f64],
) -> f64 {
    let ops = case.operators();
    let m = case.mesh().lumped_mass();
    let lap = ops.laplace.matvec(phi);
    (0..m.len())
        .map(|j| {
            let r = (p.gamma2 * lap[j] / m[j] + p.e * p.c_e * psi1p(phi[j])
                + p.e * psi2p(phi_prev[j], p.c_e)
                - sigma[j])
                / p.e;
            phi[j].min(r).abs()
        })
        .fold(0.0, f64::max)
}
