//! Galerkin reduced model on POD bases: exact projection of the polynomial
//! mobility and chemotaxis terms into dense tensors, DEIM for the singular
//! potential, a Newton time stepper and the forward sensitivity recursion.

use std::fmt::Write as _;
use std::path::Path;
use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fom::{psi1p, psi1pp, EPS_SEP};
use crate::mesh::{lumped_dot, Mesh, SimplexMoments};
use crate::params::{
    ParameterSet, IDX_CE, IDX_DELTA, IDX_DELTA_N, IDX_E, IDX_GAMMA2, IDX_KN, IDX_L, IDX_NU,
    IDX_SN, N_PARAMS,
};
use crate::phantom::CaseData;
use crate::pod::PodArray;

/// Dense tensor of equal extent `n` in every index, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    n: usize,
    order: usize,
    data: Vec<f64>,
}

impl Tensor {
    fn zeros(n: usize, order: usize) -> Self {
        Tensor {
            n,
            order,
            data: vec![0.0; n.pow(order as u32)],
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, idx: &[usize]) -> f64 {
        debug_assert_eq!(idx.len(), self.order);
        self.data[idx.iter().fold(0, |a, &i| a * self.n + i)]
    }

    /// `Σ_i a_i T[i, …]`, one order lower.
    pub fn fold(&self, a: &[f64]) -> Tensor {
        debug_assert!(self.order >= 2 && a.len() == self.n);
        let stride = self.data.len() / self.n;
        let mut data = vec![0.0; stride];
        for (i, &ai) in a.iter().enumerate() {
            if ai == 0.0 {
                continue;
            }
            for (d, s) in data.iter_mut().zip(&self.data[i * stride..(i + 1) * stride]) {
                *d += ai * s;
            }
        }
        Tensor {
            n: self.n,
            order: self.order - 1,
            data,
        }
    }

    /// An order-2 tensor as the matrix `M[(m, l)]`.
    pub fn matrix(&self) -> DMatrix<f64> {
        debug_assert_eq!(self.order, 2);
        DMatrix::from_row_slice(self.n, self.n, &self.data)
    }

    /// `Σ_i a_i T[i, m, l]` for an order-3 tensor.
    pub fn contract(&self, a: &[f64]) -> DMatrix<f64> {
        self.fold(a).matrix()
    }

    /// Largest deviation from symmetry under swapping the first `k` indices.
    pub fn symmetry_defect(&self, k: usize) -> f64 {
        let n = self.n;
        let tail = n.pow((self.order - k) as u32);
        let mut worst = 0.0_f64;
        let mut idx = vec![0usize; k];
        for head in 0..n.pow(k as u32) {
            let mut h = head;
            for slot in idx.iter_mut().rev() {
                *slot = h % n;
                h /= n;
            }
            for a in 0..k {
                for b in a + 1..k {
                    let mut sw = idx.clone();
                    sw.swap(a, b);
                    let other = sw.iter().fold(0, |acc, &i| acc * n + i);
                    for t in 0..tail {
                        let d = self.data[head * tail + t] - self.data[other * tail + t];
                        worst = worst.max(d.abs());
                    }
                }
            }
        }
        worst
    }
}

/// The reduced operators. Matrices are indexed `(test m, trial l)`; in the
/// tensors the leading indices carry the expansion coefficients and the
/// last two are `(m, l)` likewise.
#[derive(Clone, Debug, PartialEq)]
pub struct RomTensors {
    pub n: usize,
    /// `(ξ_l^φ, ξ_m^φ)^h`
    pub v1: DMatrix<f64>,
    /// `(ξ_i ξ_j ξ_s T∇ξ_l^Σ, ∇ξ_m^φ)`
    pub v2: Tensor,
    pub v3: Tensor,
    pub v4: Tensor,
    /// `(ξ_i^φ ξ_l^n, ξ_m^φ)^h`
    pub v5: Tensor,
    /// `(ξ_i^φ ξ_j^φ ξ_l^n, ξ_m^φ)^h`
    pub v6: Tensor,
    /// `(ξ_i^φ ξ_l^φ, ξ_m^φ)^h`
    pub v7: Tensor,
    /// χ-weighted `(ξ_i ξ_j ξ_s T∇ξ_l^n, ∇ξ_m^φ)`
    pub v8: Tensor,
    pub v9: Tensor,
    pub v10: Tensor,
    pub u1: DMatrix<f64>,
    /// `(ξ_l^{ψ1′}, ξ_m^Σ)^h`
    pub u2: DMatrix<f64>,
    /// `(ξ_i^φ ξ_l^φ, ξ_m^Σ)^h`
    pub u3: Tensor,
    pub u4: DMatrix<f64>,
    pub u5: DVector<f64>,
    /// `(∇ξ_l^φ, ∇ξ_m^Σ)`
    pub u6: DMatrix<f64>,
    /// `(ξ_i^{ψ1″} ξ_l^φ, ξ_m^Σ)^h`
    pub u7: Tensor,
    pub w1: DMatrix<f64>,
    /// `(D∇ξ_l^n, ∇ξ_m^n)`
    pub w2: DMatrix<f64>,
    /// `(ξ_i^φ ξ_l^n, ξ_m^n)^h`
    pub w3: Tensor,
    pub w4: DVector<f64>,
    pub w5: DMatrix<f64>,
}

impl RomTensors {
    fn named(&self) -> Vec<(&'static str, &[f64])> {
        vec![
            ("V1", self.v1.as_slice()),
            ("V2", self.v2.data()),
            ("V3", self.v3.data()),
            ("V4", self.v4.data()),
            ("V5", self.v5.data()),
            ("V6", self.v6.data()),
            ("V7", self.v7.data()),
            ("V8", self.v8.data()),
            ("V9", self.v9.data()),
            ("V10", self.v10.data()),
            ("U1", self.u1.as_slice()),
            ("U2", self.u2.as_slice()),
            ("U3", self.u3.data()),
            ("U4", self.u4.as_slice()),
            ("U5", self.u5.as_slice()),
            ("U6", self.u6.as_slice()),
            ("U7", self.u7.data()),
            ("W1", self.w1.as_slice()),
            ("W2", self.w2.as_slice()),
            ("W3", self.w3.data()),
            ("W4", self.w4.as_slice()),
            ("W5", self.w5.as_slice()),
        ]
    }

    pub fn all_finite(&self) -> bool {
        self.named()
            .iter()
            .all(|(_, d)| d.iter().all(|v| v.is_finite()))
    }

    /// Debug dump: `tensor,flat_index,value`. Matrices are flattened
    /// column-major, tensors row-major.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut s = String::from("tensor,flat_index,value\n");
        for (name, d) in self.named() {
            for (i, v) in d.iter().enumerate() {
                let _ = writeln!(s, "{name},{i},{}", crate::numfmt::format17(*v));
            }
        }
        std::fs::write(path, s).map_err(|e| Error::io(path, e))
    }
}

fn pairs(n: usize) -> Vec<(usize, usize)> {
    (0..n).flat_map(|i| (i..n).map(move |j| (i, j))).collect()
}

fn triples(n: usize) -> Vec<(usize, usize, usize)> {
    (0..n)
        .flat_map(|i| (i..n).flat_map(move |j| (j..n).map(move |s| (i, j, s))))
        .collect()
}

/// `[i][m][l] = Σ_x w a_i b_m c_l`.
fn lumped3(w: &[f64], a: &[Vec<f64>], b: &[Vec<f64>], c: &[Vec<f64>]) -> Tensor {
    let n = a.len();
    let nv = w.len();
    let lhs = DMatrix::from_fn(nv, n, |x, i| w[x] * a[i][x]);
    let rhs = DMatrix::from_fn(nv, n * n, |x, ml| b[ml / n][x] * c[ml % n][x]);
    let prod = lhs.tr_mul(&rhs);
    let mut t = Tensor::zeros(n, 3);
    for i in 0..n {
        for ml in 0..n * n {
            t.data[i * n * n + ml] = prod[(i, ml)];
        }
    }
    t
}

/// `[i][j][m][l] = Σ_x w a_i a_j b_m c_l`.
fn lumped4(w: &[f64], a: &[Vec<f64>], b: &[Vec<f64>], c: &[Vec<f64>]) -> Tensor {
    let n = a.len();
    let nv = w.len();
    let pr = pairs(n);
    let lhs = DMatrix::from_fn(nv, pr.len(), |x, q| {
        let (i, j) = pr[q];
        w[x] * a[i][x] * a[j][x]
    });
    let rhs = DMatrix::from_fn(nv, n * n, |x, ml| b[ml / n][x] * c[ml % n][x]);
    let prod = lhs.tr_mul(&rhs);
    let mut t = Tensor::zeros(n, 4);
    let n2 = n * n;
    for (q, &(i, j)) in pr.iter().enumerate() {
        for ml in 0..n2 {
            let v = prod[(q, ml)];
            t.data[(i * n + j) * n2 + ml] = v;
            t.data[(j * n + i) * n2 + ml] = v;
        }
    }
    t
}

/// `M[(m, l)] = Σ_x w a_m b_l`.
fn gram(w: &[f64], a: &[Vec<f64>], b: &[Vec<f64>]) -> DMatrix<f64> {
    DMatrix::from_fn(a.len(), b.len(), |m, l| lumped_dot(w, &a[m], &b[l]))
}

type CellRow = (Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>);

struct CellRows {
    m1: DMatrix<f64>,
    m2: DMatrix<f64>,
    m3: DMatrix<f64>,
    g: DMatrix<f64>,
    g_chi: DMatrix<f64>,
}

fn cell_rows(case: &CaseData, phi: &[Vec<f64>], sigma: &[Vec<f64>], nb: &[Vec<f64>]) -> CellRows {
    let mesh = case.mesh();
    let t = case.mobility_tensor();
    let chi = case.chi();
    let moments = SimplexMoments::new(mesh.dim());
    let n = phi.len();
    let d = mesh.dim();
    let pr = pairs(n);
    let tr = triples(n);
    let nc = mesh.n_cells();
    let rows: Vec<CellRow> = (0..nc)
        .into_par_iter()
        .map(|k| {
            let cell = mesh.cell(k);
            let local = |b: &Vec<f64>| cell.iter().map(|&v| b[v]).collect::<Vec<f64>>();
            let grad = |b: &Vec<f64>| {
                let mut g = vec![0.0; d];
                for (a, &v) in cell.iter().enumerate() {
                    for (gi, li) in g.iter_mut().zip(mesh.grad(k, a)) {
                        *gi += b[v] * li;
                    }
                }
                g
            };
            let fv: Vec<Vec<f64>> = phi.iter().map(local).collect();
            let gphi: Vec<Vec<f64>> = phi.iter().map(grad).collect();
            let tk = t.cell(k);
            let vol = mesh.cell_volume(k);
            let tg = |g: Vec<f64>| -> Vec<f64> {
                (0..d)
                    .map(|r| (0..d).map(|c| tk[r * d + c] * g[c]).sum())
                    .collect()
            };
            let tsig: Vec<Vec<f64>> = sigma.iter().map(|b| tg(grad(b))).collect();
            let tn: Vec<Vec<f64>> = nb.iter().map(|b| tg(grad(b))).collect();
            let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
            let mut g = vec![0.0; n * n];
            let mut gc = vec![0.0; n * n];
            for m in 0..n {
                for l in 0..n {
                    g[m * n + l] = vol * dot(&gphi[m], &tsig[l]);
                    gc[m * n + l] = chi[k] * vol * dot(&gphi[m], &tn[l]);
                }
            }
            let m1 = fv.iter().map(|f| moments.mean1(f)).collect();
            let m2 = pr.iter().map(|&(i, j)| moments.mean2(&fv[i], &fv[j])).collect();
            let m3 = tr
                .iter()
                .map(|&(i, j, s)| moments.mean3(&fv[i], &fv[j], &fv[s]))
                .collect();
            (m1, m2, m3, g, gc)
        })
        .collect();
    let build = |w: usize, pick: fn(&CellRow) -> &Vec<f64>| {
        DMatrix::from_fn(nc, w, |k, c| pick(&rows[k])[c])
    };
    CellRows {
        m1: build(n, |r| &r.0),
        m2: build(pr.len(), |r| &r.1),
        m3: build(tr.len(), |r| &r.2),
        g: build(n * n, |r| &r.3),
        g_chi: build(n * n, |r| &r.4),
    }
}

/// Order 3, 4 and 5 tensors `Σ_K moment_K ⊗ G_K`.
fn cubic_tensors(rows: &CellRows, g: &DMatrix<f64>, n: usize) -> (Tensor, Tensor, Tensor) {
    let n2 = n * n;
    let p1 = rows.m1.tr_mul(g);
    let mut t4 = Tensor::zeros(n, 3);
    for i in 0..n {
        for ml in 0..n2 {
            t4.data[i * n2 + ml] = p1[(i, ml)];
        }
    }
    let p2 = rows.m2.tr_mul(g);
    let mut t3 = Tensor::zeros(n, 4);
    for (q, (i, j)) in pairs(n).into_iter().enumerate() {
        for ml in 0..n2 {
            let v = p2[(q, ml)];
            t3.data[(i * n + j) * n2 + ml] = v;
            t3.data[(j * n + i) * n2 + ml] = v;
        }
    }
    let p3 = rows.m3.tr_mul(g);
    let mut t2 = Tensor::zeros(n, 5);
    for (q, (i, j, s)) in triples(n).into_iter().enumerate() {
        for (a, b, c) in [(i, j, s), (i, s, j), (j, i, s), (j, s, i), (s, i, j), (s, j, i)] {
            let off = ((a * n + b) * n + c) * n2;
            for ml in 0..n2 {
                t2.data[off + ml] = p3[(q, ml)];
            }
        }
    }
    (t2, t3, t4)
}

fn stiffness_gram(a: &[Vec<f64>], op: &crate::sparse::CsrMatrix, b: &[Vec<f64>]) -> DMatrix<f64> {
    let ob: Vec<Vec<f64>> = b.iter().map(|v| op.matvec(v)).collect();
    DMatrix::from_fn(a.len(), b.len(), |m, l| {
        a[m].iter().zip(&ob[l]).map(|(x, y)| x * y).sum()
    })
}

/// Projects every operator of the full model onto the POD bases.
pub fn assemble_rom_tensors(pods: &PodArray, case: &CaseData) -> Result<RomTensors> {
    let mesh: &Mesh = case.mesh();
    for b in pods.bases() {
        for v in &b.vectors {
            mesh.check_nodal("basis vector", v)?;
        }
    }
    let n = pods.n_pod();
    let w = mesh.lumped_mass();
    let phi = &pods.phi.vectors;
    let sig = &pods.sigma.vectors;
    let nb = &pods.n.vectors;
    let ops = case.operators();

    let rows = cell_rows(case, phi, sig, nb);
    let (v2, v3, v4) = cubic_tensors(&rows, &rows.g, n);
    let (v8, v9, v10) = cubic_tensors(&rows, &rows.g_chi, n);

    Ok(RomTensors {
        n,
        v1: gram(w, phi, phi),
        v2,
        v3,
        v4,
        v5: lumped3(w, phi, phi, nb),
        v6: lumped4(w, phi, phi, nb),
        v7: lumped3(w, phi, phi, phi),
        v8,
        v9,
        v10,
        u1: gram(w, sig, sig),
        u2: gram(w, sig, &pods.psi1p.vectors),
        u3: lumped3(w, phi, sig, phi),
        u4: gram(w, sig, phi),
        u5: DVector::from_fn(n, |m, _| w.iter().zip(&sig[m]).map(|(a, b)| a * b).sum()),
        u6: stiffness_gram(sig, ops.laplace(), phi),
        u7: lumped3(w, &pods.psi1pp.vectors, sig, phi),
        w1: gram(w, nb, nb),
        w2: stiffness_gram(nb, ops.diffusion(), nb),
        w3: lumped3(w, phi, nb, nb),
        w4: DVector::from_fn(n, |m, _| w.iter().zip(&nb[m]).map(|(a, b)| a * b).sum()),
        w5: gram(w, nb, phi),
    })
}

/// Jacobian of the DEIM potential term used inside the Newton iteration.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NewtonJacobian {
    /// `U22(α)`: the ψ1″ interpolant contracted with U7.
    Interpolated,
    /// Exact derivative of the DEIM approximation of ψ1′.
    Consistent,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RomSettings {
    /// Bound on `‖(dα, dβ)‖` for stopping.
    pub newton_tol: f64,
    pub max_newton: usize,
    pub jacobian: NewtonJacobian,
}

impl Default for RomSettings {
    fn default() -> Self {
        RomSettings {
            newton_tol: 1e-3,
            max_newton: 1000,
            jacobian: NewtonJacobian::Interpolated,
        }
    }
}

impl RomSettings {
    pub fn tight() -> Self {
        RomSettings {
            newton_tol: 1e-12,
            jacobian: NewtonJacobian::Consistent,
            ..Default::default()
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RomState {
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
    pub eta: Vec<f64>,
    pub step: usize,
}

/// Reduced operators together with the case data the time march needs.
#[derive(Clone, Debug)]
pub struct RomModel {
    pub tensors: RomTensors,
    pub alpha0: Vec<f64>,
    pub eta0: Vec<f64>,
    pub dt: f64,
    pub n_steps: usize,
    /// Therapy rate at `t_n`, index `n`.
    pub k_t: Vec<f64>,
    pub nodes: Vec<usize>,
    phi_basis: Vec<Vec<f64>>,
    /// `ξ_i^φ` at the interpolation nodes.
    pphi: DMatrix<f64>,
    /// `U2 (PᵀU_{ψ1′})⁻¹`
    m1: DMatrix<f64>,
    pu2_inv: DMatrix<f64>,
    u1_inv: DMatrix<f64>,
}

impl RomModel {
    pub fn new(pods: &PodArray, tensors: RomTensors, case: &CaseData) -> Result<Self> {
        let n = tensors.n;
        if pods.n_pod() != n {
            return Err(Error::Dimension(format!(
                "{} basis vectors for tensors of size {n}",
                pods.n_pod()
            )));
        }
        let w = case.mesh().lumped_mass();
        let nodes = pods.deim_psi1pp.nodes.clone();
        let pphi = DMatrix::from_fn(n, n, |r, i| pods.phi.vectors[i][nodes[r]]);
        let m1 = &tensors.u2 * &pods.deim_psi1p.pu_inv;
        let u1_inv = tensors
            .u1
            .clone()
            .cholesky()
            .ok_or_else(|| Error::Singular("U1 is not positive definite".into()))?
            .inverse();
        Ok(RomModel {
            alpha0: pods.phi.project(w, case.phi0()),
            eta0: pods.n.project(w, case.n0()),
            dt: case.dt(),
            n_steps: case.n_steps(),
            k_t: (0..=case.n_steps())
                .map(|s| case.therapy().rate(case.time(s)))
                .collect(),
            nodes,
            phi_basis: pods.phi.vectors.clone(),
            pphi,
            m1,
            pu2_inv: pods.deim_psi1pp.pu_inv.clone(),
            u1_inv,
            tensors,
        })
    }

    pub fn n(&self) -> usize {
        self.tensors.n
    }

    /// `Φα` on the full mesh.
    pub fn reconstruct_phi(&self, alpha: &[f64]) -> Vec<f64> {
        crate::pod::combine(&self.phi_basis, alpha)
    }

    pub fn phi_basis(&self) -> &[Vec<f64>] {
        &self.phi_basis
    }

    fn nodal_phi(&self, alpha: &DVector<f64>) -> Result<DVector<f64>> {
        let v = &self.pphi * alpha;
        for (r, &x) in v.iter().enumerate() {
            if !(x < 1.0) {
                return Err(Error::RomSeparation {
                    node: self.nodes[r],
                    value: x,
                });
            }
        }
        Ok(v)
    }

    /// `M1 ψ1′(PΦα)`
    fn potential(&self, at_nodes: &DVector<f64>) -> DVector<f64> {
        &self.m1 * at_nodes.map(psi1p)
    }

    /// `U22(α) = Σ_i c_i U7[i]` with `c = (PᵀU_{ψ1″})⁻¹ ψ1″(PΦα)`.
    fn u22(&self, at_nodes: &DVector<f64>) -> DMatrix<f64> {
        let c = &self.pu2_inv * at_nodes.map(psi1pp);
        self.tensors.u7.contract(c.as_slice())
    }

    /// Derivative of `M1 ψ1′(PΦα)` with respect to `α`.
    fn potential_jacobian(&self, at_nodes: &DVector<f64>) -> DMatrix<f64> {
        let d = DMatrix::from_diagonal(&at_nodes.map(psi1pp));
        &self.m1 * d * &self.pphi
    }

    /// `β` solving the chemical potential equation for given `α` and lagged `α'`.
    pub fn beta_for(&self, p: &ParameterSet, alpha: &[f64], alpha_prev: &[f64]) -> Result<Vec<f64>> {
        let a = DVector::from_column_slice(alpha);
        let lag = Lagged::new(&self.tensors, alpha_prev);
        let at = self.nodal_phi(&a)?;
        let rhs = p.gamma2 * &self.tensors.u6 * &a
            + p.e * p.c_e * self.potential(&at)
            + lag.potential_const(&self.tensors, p);
        Ok((&self.u1_inv * rhs).as_slice().to_vec())
    }

    pub fn initial_state(&self, p: &ParameterSet) -> Result<RomState> {
        Ok(RomState {
            beta: self.beta_for(p, &self.alpha0, &self.alpha0)?,
            alpha: self.alpha0.clone(),
            eta: self.eta0.clone(),
            step: 0,
        })
    }
}

/// Quantities fixed by the lagged coefficients `α'` within one step.
struct Lagged {
    alpha: DVector<f64>,
    /// `Σ_{js} α_j α_s V2[i, j, s]`
    y2: Tensor,
    /// `Σ_j α_j V3[i, j]`
    z3: Tensor,
    y8: Tensor,
    z9: Tensor,
    /// `Σ_j α_j V6[i, j]`
    y6: Tensor,
    b: DMatrix<f64>,
    k: DMatrix<f64>,
    /// `V5(α') − V6(α', α')`
    v56: DMatrix<f64>,
    v7: DMatrix<f64>,
    u3: DMatrix<f64>,
    w3: DMatrix<f64>,
}

impl Lagged {
    fn new(t: &RomTensors, alpha: &[f64]) -> Self {
        let y2 = t.v2.fold(alpha).fold(alpha);
        let z3 = t.v3.fold(alpha);
        let y8 = t.v8.fold(alpha).fold(alpha);
        let z9 = t.v9.fold(alpha);
        let y6 = t.v6.fold(alpha);
        let b = y2.contract(alpha) - 2.0 * z3.contract(alpha) + t.v4.contract(alpha);
        let k = y8.contract(alpha) - 2.0 * z9.contract(alpha) + t.v10.contract(alpha);
        let v56 = t.v5.contract(alpha) - y6.contract(alpha);
        Lagged {
            alpha: DVector::from_column_slice(alpha),
            v7: t.v7.contract(alpha),
            u3: t.u3.contract(alpha),
            w3: t.w3.contract(alpha),
            y2,
            z3,
            y8,
            z9,
            y6,
            b,
            k,
            v56,
        }
    }

    /// `d/dα' B(α')` applied to `a`.
    fn b_prime(&self, t: &RomTensors, a: &[f64]) -> DMatrix<f64> {
        3.0 * self.y2.contract(a) - 4.0 * self.z3.contract(a) + t.v4.contract(a)
    }

    fn k_prime(&self, t: &RomTensors, a: &[f64]) -> DMatrix<f64> {
        3.0 * self.y8.contract(a) - 4.0 * self.z9.contract(a) + t.v10.contract(a)
    }

    /// `E (ψ2′(Φα'), ξ^Σ)^h = −E U3(α')α' − E c_e U4α' − E c_e U5`.
    fn potential_const(&self, t: &RomTensors, p: &ParameterSet) -> DVector<f64> {
        -p.e * (&self.u3 * &self.alpha) - p.e * p.c_e * (&t.u4 * &self.alpha) - p.e * p.c_e * &t.u5
    }

    fn nutrient_matrix(&self, t: &RomTensors, p: &ParameterSet, dt: f64) -> DMatrix<f64> {
        &t.w1 * (1.0 / dt + p.s_n) + &t.w2 + (p.delta_n - p.s_n) * &self.w3
    }
}

fn lu_solve(a: DMatrix<f64>, b: &DVector<f64>, what: &str) -> Result<DVector<f64>> {
    let x = a
        .lu()
        .solve(b)
        .ok_or_else(|| Error::Singular(what.to_string()))?;
    if x.iter().all(|v| v.is_finite()) {
        Ok(x)
    } else {
        Err(Error::Singular(what.to_string()))
    }
}

/// `η` at the new level from `(α', η')`.
pub fn rom_nutrient_init(
    t: &RomTensors,
    p: &ParameterSet,
    alpha_prev: &[f64],
    eta_prev: &[f64],
    dt: f64,
) -> Result<Vec<f64>> {
    let lag_w3 = t.w3.contract(alpha_prev);
    let a = &t.w1 * (1.0 / dt + p.s_n) + &t.w2 + (p.delta_n - p.s_n) * &lag_w3;
    let rhs = &t.w1 * DVector::from_column_slice(eta_prev) / dt + p.s_n * &t.w4
        - p.s_n * (&t.w5 * DVector::from_column_slice(alpha_prev));
    Ok(lu_solve(a, &rhs, "reduced nutrient system")?.as_slice().to_vec())
}

/// One reduced time step from `prev` to `prev.step + 1`.
pub fn rom_newton_solve(
    model: &RomModel,
    p: &ParameterSet,
    prev: &RomState,
    settings: &RomSettings,
) -> Result<(RomState, usize)> {
    let t = &model.tensors;
    let dt = model.dt;
    let step = prev.step + 1;
    let k_t = model.k_t.get(step).copied().unwrap_or(0.0);
    let eta = rom_nutrient_init(t, p, &prev.alpha, &prev.eta, dt)?;
    let eta_v = DVector::from_column_slice(&eta);
    let lag = Lagged::new(t, &prev.alpha);
    let ap = &lag.alpha;

    // R1 = V1 α/Δt + L B β + c1
    let c1 = -(p.k_n * &lag.k * &eta_v) - p.nu * (&lag.v56 * &eta_v)
        + (p.nu * p.delta + k_t - 1.0 / dt) * (&t.v1 * ap)
        - p.nu * p.delta * (&lag.v7 * ap);
    let c2 = lag.potential_const(t, p);
    let lb = p.l * &lag.b;
    let v1dt = &t.v1 / dt;

    let mut alpha = ap.clone();
    let mut beta = DVector::from_column_slice(&prev.beta);
    let mut last = f64::INFINITY;
    for it in 1..=settings.max_newton {
        let at = model.nodal_phi(&alpha)?;
        let r1 = &v1dt * &alpha + &lb * &beta + &c1;
        let d = -(&t.u1 * &beta) + p.gamma2 * (&t.u6 * &alpha) + p.e * p.c_e * model.potential(&at) + &c2;
        let jpot = match settings.jacobian {
            NewtonJacobian::Interpolated => model.u22(&at),
            NewtonJacobian::Consistent => model.potential_jacobian(&at),
        };
        let c = &model.u1_inv * (p.gamma2 * &t.u6 + p.e * p.c_e * jpot);
        let u1d = &model.u1_inv * &d;
        let a = &v1dt + &lb * &c;
        let rhs = -&r1 - &lb * &u1d;
        let da = lu_solve(a, &rhs, "reduced Newton system")?;
        let db = &c * &da + &u1d;

        let mut s = 1.0;
        loop {
            let trial = &alpha + s * &da;
            let v = &model.pphi * &trial;
            if v.iter().all(|&x| x < 1.0 - EPS_SEP) {
                break;
            }
            s *= 0.5;
            if s < 1e-10 {
                let (r, x) = v
                    .iter()
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |b, (r, &x)| if x > b.1 { (r, x) } else { b });
                return Err(Error::RomSeparation {
                    node: model.nodes[r],
                    value: x,
                });
            }
        }
        alpha += s * &da;
        beta += s * &db;
        let inc = s * (da.norm_squared() + db.norm_squared()).sqrt();
        if !inc.is_finite() {
            return Err(Error::NewtonDivergence {
                iterations: it,
                increment: inc,
            });
        }
        last = inc;
        let scale = (alpha.norm_squared() + beta.norm_squared()).sqrt();
        if inc <= settings.newton_tol || inc <= 1e-13 * scale {
            model.nodal_phi(&alpha)?;
            return Ok((
                RomState {
                    alpha: alpha.as_slice().to_vec(),
                    beta: beta.as_slice().to_vec(),
                    eta,
                    step,
                },
                it,
            ));
        }
    }
    Err(Error::NewtonDivergence {
        iterations: settings.max_newton,
        increment: last,
    })
}

#[derive(Clone, Debug)]
pub struct RomTrajectory {
    /// States `0..=N`.
    pub states: Vec<RomState>,
    pub newton_iterations: Vec<usize>,
    pub wall_time: Duration,
}

impl RomTrajectory {
    pub fn last(&self) -> &RomState {
        self.states.last().expect("trajectory holds the initial state")
    }
}

/// Marches the reduced model over all `N` steps.
pub fn rom_solve(model: &RomModel, p: &ParameterSet, settings: &RomSettings) -> Result<RomTrajectory> {
    p.validate()?;
    let start = Instant::now();
    let mut states = Vec::with_capacity(model.n_steps + 1);
    states.push(model.initial_state(p)?);
    let mut newton_iterations = Vec::with_capacity(model.n_steps);
    for step in 1..=model.n_steps {
        let (next, it) = rom_newton_solve(model, p, &states[step - 1], settings).map_err(|e| {
            Error::RomStep {
                step,
                source: Box::new(e),
            }
        })?;
        newton_iterations.push(it);
        states.push(next);
    }
    Ok(RomTrajectory {
        states,
        newton_iterations,
        wall_time: start.elapsed(),
    })
}

/// Derivatives of the reduced trajectory with respect to selected parameters.
/// Column `j` of each matrix belongs to `params[j]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SensitivityBlock {
    pub params: Vec<usize>,
    pub d_alpha: Vec<DMatrix<f64>>,
    pub d_beta: Vec<DMatrix<f64>>,
    pub d_eta: Vec<DMatrix<f64>>,
}

impl SensitivityBlock {
    pub fn final_alpha(&self) -> &DMatrix<f64> {
        self.d_alpha.last().expect("at least the initial level")
    }

    /// `∂α^N/∂P_m`, if `m` was computed.
    pub fn final_alpha_for(&self, m: usize) -> Option<Vec<f64>> {
        let j = self.params.iter().position(|&q| q == m)?;
        Some(self.final_alpha().column(j).iter().copied().collect())
    }

    /// `step,t,param,kind,i,value` rows.
    pub fn write_csv(&self, path: &Path, dt: f64) -> Result<()> {
        let mut s = String::from("step,t,param,kind,i,value\n");
        for (step, ((a, b), e)) in self.d_alpha.iter().zip(&self.d_beta).zip(&self.d_eta).enumerate() {
            for (j, &m) in self.params.iter().enumerate() {
                let name = crate::params::PARAM_NAMES[m];
                for (kind, mat) in [("alpha", a), ("beta", b), ("eta", e)] {
                    for i in 0..mat.nrows() {
                        let _ = writeln!(
                            s,
                            "{step},{},{name},{kind},{i},{}",
                            crate::numfmt::format17(step as f64 * dt),
                            crate::numfmt::format17(mat[(i, j)])
                        );
                    }
                }
            }
        }
        std::fs::write(path, s).map_err(|e| Error::io(path, e))
    }
}

/// All nine sensitivities along a converged trajectory.
pub fn rom_sensitivities(model: &RomModel, p: &ParameterSet, traj: &RomTrajectory) -> Result<SensitivityBlock> {
    let all: Vec<usize> = (0..N_PARAMS).collect();
    sensitivity_march(model, p, traj, &all)
}

/// Sensitivity with respect to parameter `m` alone.
pub fn rom_linearized_solve(
    model: &RomModel,
    m: usize,
    p: &ParameterSet,
    traj: &RomTrajectory,
) -> Result<SensitivityBlock> {
    if m >= N_PARAMS {
        return Err(Error::InvalidConfig(format!("parameter index {m}")));
    }
    sensitivity_march(model, p, traj, &[m])
}

fn sensitivity_march(
    model: &RomModel,
    p: &ParameterSet,
    traj: &RomTrajectory,
    params: &[usize],
) -> Result<SensitivityBlock> {
    let t = &model.tensors;
    let n = t.n;
    let q = params.len();
    let dt = model.dt;
    let zero = DMatrix::zeros(n, q);
    let mut d_alpha = vec![zero.clone()];
    let mut d_beta = vec![zero.clone()];
    let mut d_eta = vec![zero];

    for step in 1..traj.states.len() {
        let prev = &traj.states[step - 1];
        let cur = &traj.states[step];
        let k_t = model.k_t.get(step).copied().unwrap_or(0.0);
        let lag = Lagged::new(t, &prev.alpha);
        let ap = &lag.alpha;
        let alpha = DVector::from_column_slice(&cur.alpha);
        let beta = DVector::from_column_slice(&cur.beta);
        let eta = DVector::from_column_slice(&cur.eta);
        let at = model.nodal_phi(&alpha)?;

        let fail = |j: usize| Error::SensitivityFailure {
            param: params[j],
            step,
        };
        let lu_n = lag.nutrient_matrix(t, p, dt).lu();
        let mut block = DMatrix::zeros(2 * n, 2 * n);
        block.view_mut((0, 0), (n, n)).copy_from(&(&t.v1 / dt));
        block.view_mut((0, n), (n, n)).copy_from(&(p.l * &lag.b));
        block
            .view_mut((n, 0), (n, n))
            .copy_from(&(p.gamma2 * &t.u6 + p.e * p.c_e * model.potential_jacobian(&at)));
        block.view_mut((n, n), (n, n)).copy_from(&(-&t.u1));
        let lu_b = block.lu();

        let psi = model.potential(&at);
        let v1a = &t.v1 * ap;
        let v7aa = &lag.v7 * ap;
        let u4a = &t.u4 * ap;

        let mut na = DMatrix::zeros(n, q);
        let mut nb = DMatrix::zeros(n, q);
        let mut ne = DMatrix::zeros(n, q);
        for (j, &m) in params.iter().enumerate() {
            let a: DVector<f64> = d_alpha[step - 1].column(j).into_owned();
            let e: DVector<f64> = d_eta[step - 1].column(j).into_owned();
            let asl = a.as_slice();

            let mut rn = &t.w1 * &e / dt
                - p.s_n * (&t.w5 * &a)
                - (p.delta_n - p.s_n) * (t.w3.contract(asl) * &eta);
            match m {
                IDX_SN => rn -= (&t.w1 - &lag.w3) * &eta - &t.w4 + &t.w5 * ap,
                IDX_DELTA_N => rn -= &lag.w3 * &eta,
                _ => {}
            }
            let de = lu_n.solve(&rn).ok_or_else(|| fail(j))?;

            let mut f1 = &t.v1 * &a / dt - p.l * (lag.b_prime(t, asl) * &beta)
                + p.k_n * (&lag.k * &de)
                + p.k_n * (lag.k_prime(t, asl) * &eta)
                + p.nu * ((t.v5.contract(asl) - 2.0 * lag.y6.contract(asl)) * &eta)
                + p.nu * (&lag.v56 * &de)
                - (p.nu * p.delta + k_t) * (&t.v1 * &a)
                + 2.0 * p.nu * p.delta * (&lag.v7 * &a);
            let mut f2 = 2.0 * p.e * (&lag.u3 * &a) + p.e * p.c_e * (&t.u4 * &a);
            match m {
                IDX_L => f1 -= &lag.b * &beta,
                IDX_NU => f1 -= -(&lag.v56 * &eta) + p.delta * (&v1a - &v7aa),
                IDX_KN => f1 += &lag.k * &eta,
                IDX_DELTA => f1 -= p.nu * (&v1a - &v7aa),
                IDX_GAMMA2 => f2 -= &t.u6 * &alpha,
                IDX_E => {
                    f2 -= p.c_e * &psi - &lag.u3 * ap - p.c_e * &u4a - p.c_e * &t.u5;
                }
                IDX_CE => f2 -= p.e * &psi - p.e * &u4a - p.e * &t.u5,
                _ => {}
            }
            let mut rhs = DVector::zeros(2 * n);
            rhs.rows_mut(0, n).copy_from(&f1);
            rhs.rows_mut(n, n).copy_from(&f2);
            let x = lu_b.solve(&rhs).ok_or_else(|| fail(j))?;
            if !(x.iter().chain(de.iter()).all(|v| v.is_finite())) {
                return Err(fail(j));
            }
            na.set_column(j, &x.rows(0, n));
            nb.set_column(j, &x.rows(n, n));
            ne.set_column(j, &de);
        }
        d_alpha.push(na);
        d_beta.push(nb);
        d_eta.push(ne);
    }
    Ok(SensitivityBlock {
        params: params.to_vec(),
        d_alpha,
        d_beta,
        d_eta,
    })
}
