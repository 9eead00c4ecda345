//! Proper orthogonal decomposition of snapshot sequences and DEIM node
//! selection for the singular potential terms.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::fom::{psi1p, psi1pp, SnapshotSet, SEQUENCE_NAMES};
use crate::mesh::lumped_dot;

/// Default information content.
pub const DEFAULT_IC: f64 = 0.9999;
/// Eigenvalues below this fraction of the largest count as zero.
pub const EIGEN_CUTOFF: f64 = 1e-14;

/// Orthonormal basis in the lumped inner product with its spectrum.
#[derive(Clone, Debug, PartialEq)]
pub struct PodBasis {
    pub vectors: Vec<Vec<f64>>,
    /// All eigenvalues of the correlation matrix, nonincreasing.
    pub eigenvalues: Vec<f64>,
    /// Cumulative eigenvalue sums divided by the trace.
    pub energy: Vec<f64>,
    pub trace: f64,
    /// Count required by the threshold alone (before padding).
    pub n_required: usize,
}

impl PodBasis {
    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    /// Numerical rank under `EIGEN_CUTOFF`.
    pub fn rank(&self) -> usize {
        let top = self.eigenvalues.first().copied().unwrap_or(0.0);
        self.eigenvalues
            .iter()
            .take_while(|&&l| l > EIGEN_CUTOFF * top)
            .count()
    }

    /// Coefficients `(f, ξ_i)^h`.
    pub fn project(&self, weights: &[f64], f: &[f64]) -> Vec<f64> {
        self.vectors.iter().map(|v| lumped_dot(weights, f, v)).collect()
    }

    /// `Σ_i c_i ξ_i`.
    pub fn reconstruct(&self, c: &[f64]) -> Vec<f64> {
        combine(&self.vectors, c)
    }
}

pub(crate) fn combine(vectors: &[Vec<f64>], c: &[f64]) -> Vec<f64> {
    let n = vectors.first().map_or(0, |v| v.len());
    let mut out = vec![0.0; n];
    for (v, &ci) in vectors.iter().zip(c) {
        for (o, x) in out.iter_mut().zip(v) {
            *o += ci * x;
        }
    }
    out
}

struct Spectrum {
    values: Vec<f64>,
    vectors: DMatrix<f64>,
    trace: f64,
}

fn spectrum(snaps: &[Vec<f64>], weights: &[f64]) -> Result<Spectrum> {
    let k = snaps.len();
    if k == 0 {
        return Err(Error::EmptySnapshots);
    }
    for s in snaps {
        if s.len() != weights.len() {
            return Err(Error::Dimension(format!(
                "snapshot of length {} against {} weights",
                s.len(),
                weights.len()
            )));
        }
    }
    let rows: Vec<Vec<f64>> = (0..k)
        .into_par_iter()
        .map(|a| (0..=a).map(|b| lumped_dot(weights, &snaps[a], &snaps[b])).collect())
        .collect();
    let mut c = DMatrix::zeros(k, k);
    for (a, row) in rows.iter().enumerate() {
        for (b, &v) in row.iter().enumerate() {
            c[(a, b)] = v;
            c[(b, a)] = v;
        }
    }
    let trace = c.trace();
    if !(trace > 0.0) {
        return Err(Error::EmptySnapshots);
    }
    let eig = SymmetricEigen::new(c);
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let values = order.iter().map(|&i| eig.eigenvalues[i].max(0.0)).collect();
    let vectors = DMatrix::from_fn(k, k, |r, c| eig.eigenvectors[(r, order[c])]);
    Ok(Spectrum {
        values,
        vectors,
        trace,
    })
}

fn required_count(energy: &[f64], ic: f64) -> usize {
    energy
        .iter()
        .position(|&e| e >= ic - 1e-12)
        .map_or(energy.len(), |p| p + 1)
}

fn build_basis(
    name: &str,
    snaps: &[Vec<f64>],
    weights: &[f64],
    sp: &Spectrum,
    n_required: usize,
    count: usize,
) -> Result<PodBasis> {
    let top = sp.values[0];
    let rank = sp.values.iter().take_while(|&&l| l > EIGEN_CUTOFF * top).count();
    if count > rank {
        return Err(Error::RankDeficiency {
            sequence: name.to_string(),
            rank,
            required: count,
        });
    }
    let mut vectors: Vec<Vec<f64>> = Vec::with_capacity(count);
    for s in 0..count {
        let coeffs: Vec<f64> = (0..snaps.len())
            .map(|j| sp.vectors[(j, s)] / sp.values[s].sqrt())
            .collect();
        let mut v = combine(snaps, &coeffs);
        // modified Gram–Schmidt, twice
        for _ in 0..2 {
            for u in &vectors {
                let d = lumped_dot(weights, &v, u);
                for (x, y) in v.iter_mut().zip(u) {
                    *x -= d * y;
                }
            }
        }
        let norm = lumped_dot(weights, &v, &v).sqrt();
        if !(norm > 1e-8) {
            return Err(Error::RankDeficiency {
                sequence: name.to_string(),
                rank: s,
                required: count,
            });
        }
        v.iter_mut().for_each(|x| *x /= norm);
        vectors.push(v);
    }
    Ok(PodBasis {
        vectors,
        eigenvalues: sp.values.clone(),
        energy: energy_of(sp),
        trace: sp.trace,
        n_required,
    })
}

fn energy_of(sp: &Spectrum) -> Vec<f64> {
    let mut acc = 0.0;
    sp.values
        .iter()
        .map(|l| {
            acc += l;
            acc / sp.trace
        })
        .collect()
}

/// POD basis of one snapshot sequence at information content `ic`, in the
/// inner product weighted by `weights` (the lumped mass).
pub fn compute_pod(snaps: &[Vec<f64>], ic: f64, weights: &[f64]) -> Result<PodBasis> {
    check_ic(ic)?;
    let sp = spectrum(snaps, weights)?;
    let n = required_count(&energy_of(&sp), ic);
    build_basis("snapshots", snaps, weights, &sp, n, n)
}

/// POD basis with a prescribed number of vectors.
pub fn compute_pod_count(snaps: &[Vec<f64>], count: usize, weights: &[f64]) -> Result<PodBasis> {
    let sp = spectrum(snaps, weights)?;
    build_basis("snapshots", snaps, weights, &sp, count, count)
}

fn check_ic(ic: f64) -> Result<()> {
    if !(ic > 0.0 && ic <= 1.0) {
        return Err(Error::InvalidConfig(format!(
            "information content {ic} outside (0, 1]"
        )));
    }
    Ok(())
}

/// Greedy interpolation nodes for a basis `U` and the inverse of `PᵀU`.
#[derive(Clone, Debug, PartialEq)]
pub struct DeimSelection {
    pub nodes: Vec<usize>,
    /// `(PᵀU)⁻¹`, row-major `n × n`.
    pub pu_inv: DMatrix<f64>,
    pub condition: f64,
}

impl DeimSelection {
    /// Interpolation coefficients `(PᵀU)⁻¹ f(P)` from nodal values at the nodes.
    pub fn coefficients(&self, at_nodes: &[f64]) -> Vec<f64> {
        (&self.pu_inv * DVector::from_column_slice(at_nodes))
            .as_slice()
            .to_vec()
    }

    /// Builds the operator for a basis on already chosen nodes.
    pub fn on_nodes(basis: &[Vec<f64>], nodes: &[usize]) -> Result<Self> {
        let n = nodes.len();
        if basis.len() != n {
            return Err(Error::Dimension(format!(
                "{} basis vectors for {n} nodes",
                basis.len()
            )));
        }
        let pu = DMatrix::from_fn(n, n, |r, c| basis[c][nodes[r]]);
        let svd = pu.clone().svd(false, false);
        let smax = svd.singular_values.max();
        let smin = svd.singular_values.min();
        if !(smin > 1e-13 * smax) {
            return Err(Error::SelectionFailure(n));
        }
        let pu_inv = pu.try_inverse().ok_or(Error::SelectionFailure(n))?;
        Ok(DeimSelection {
            nodes: nodes.to_vec(),
            pu_inv,
            condition: smax / smin,
        })
    }
}

fn argmax_abs(v: &[f64]) -> (usize, f64) {
    let mut best = (0, -1.0);
    for (j, x) in v.iter().enumerate() {
        if x.abs() > best.1 {
            best = (j, x.abs());
        }
    }
    best
}

/// Greedy residual-argmax selection. Ties go to the lowest node index.
pub fn deim_select(basis: &[Vec<f64>]) -> Result<DeimSelection> {
    if basis.is_empty() {
        return Err(Error::SelectionFailure(0));
    }
    let (first, peak) = argmax_abs(&basis[0]);
    if !(peak > 0.0) {
        return Err(Error::SelectionFailure(1));
    }
    let mut nodes = vec![first];
    for (j, u) in basis.iter().enumerate().skip(1) {
        let pu = DMatrix::from_fn(j, j, |r, c| basis[c][nodes[r]]);
        let rhs = DVector::from_fn(j, |r, _| u[nodes[r]]);
        let c = pu.lu().solve(&rhs).ok_or(Error::SelectionFailure(j + 1))?;
        let mut r = u.clone();
        for (k, ck) in c.iter().enumerate() {
            for (ri, bi) in r.iter_mut().zip(&basis[k]) {
                *ri -= ck * bi;
            }
        }
        let (l, rmax) = argmax_abs(&r);
        let scale = argmax_abs(u).1;
        if !(rmax > 1e-14 * scale) || nodes.contains(&l) {
            return Err(Error::SelectionFailure(j + 1));
        }
        nodes.push(l);
    }
    DeimSelection::on_nodes(basis, &nodes)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Nonlinearity {
    Psi1p,
    Psi1pp,
}

/// DEIM coefficients of `ψ1′(Φα)` or `ψ1″(Φα)` from values at the nodes only.
pub fn deim_approx(
    alpha: &[f64],
    sel: &DeimSelection,
    nl: Nonlinearity,
    phi_basis: &[Vec<f64>],
) -> Result<Vec<f64>> {
    let vals = phi_at_nodes(alpha, &sel.nodes, phi_basis)?;
    let f: Vec<f64> = vals
        .iter()
        .map(|&p| match nl {
            Nonlinearity::Psi1p => psi1p(p),
            Nonlinearity::Psi1pp => psi1pp(p),
        })
        .collect();
    Ok(sel.coefficients(&f))
}

/// `(Φα)` at the given nodes; errors when separation fails there.
pub fn phi_at_nodes(alpha: &[f64], nodes: &[usize], phi_basis: &[Vec<f64>]) -> Result<Vec<f64>> {
    nodes
        .iter()
        .map(|&j| {
            let v: f64 = alpha.iter().zip(phi_basis).map(|(a, b)| a * b[j]).sum();
            if v < 1.0 {
                Ok(v)
            } else {
                Err(Error::RomSeparation { node: j, value: v })
            }
        })
        .collect()
}

/// The five bases padded to a common size with the shared DEIM nodes.
#[derive(Clone, Debug, PartialEq)]
pub struct PodArray {
    pub phi: PodBasis,
    pub sigma: PodBasis,
    pub n: PodBasis,
    pub psi1p: PodBasis,
    pub psi1pp: PodBasis,
    pub deim_psi1p: DeimSelection,
    pub deim_psi1pp: DeimSelection,
    pub ic: f64,
}

impl PodArray {
    pub fn n_pod(&self) -> usize {
        self.phi.len()
    }

    pub fn bases(&self) -> [&PodBasis; 5] {
        [&self.phi, &self.sigma, &self.n, &self.psi1p, &self.psi1pp]
    }

    /// Builds an array from explicit bases, selecting DEIM nodes on ψ1″.
    pub fn from_bases(bases: [PodBasis; 5], ic: f64) -> Result<Self> {
        let n = bases[0].len();
        if bases.iter().any(|b| b.len() != n) || n == 0 {
            return Err(Error::Dimension("bases must share a nonzero size".into()));
        }
        let [phi, sigma, nb, psi1p, psi1pp] = bases;
        let deim_psi1pp = deim_select(&psi1pp.vectors)?;
        let deim_psi1p = DeimSelection::on_nodes(&psi1p.vectors, &deim_psi1pp.nodes)?;
        Ok(PodArray {
            phi,
            sigma,
            n: nb,
            psi1p,
            psi1pp,
            deim_psi1p,
            deim_psi1pp,
            ic,
        })
    }
}

/// Five bases at threshold `ic`, padded to `N_POD = max N_θ`.
pub fn build_pod_array(s: &SnapshotSet, ic: f64, weights: &[f64]) -> Result<PodArray> {
    check_ic(ic)?;
    if s.is_empty() {
        return Err(Error::EmptySnapshots);
    }
    let seqs = s.sequences();
    let spectra: Vec<Spectrum> = seqs
        .par_iter()
        .map(|f| spectrum(f, weights))
        .collect::<Result<_>>()?;
    let required: Vec<usize> = spectra
        .iter()
        .map(|sp| required_count(&energy_of(sp), ic))
        .collect();
    let n_pod = *required.iter().max().expect("five sequences");
    let bases: Vec<PodBasis> = (0..5)
        .into_par_iter()
        .map(|i| build_basis(SEQUENCE_NAMES[i], seqs[i], weights, &spectra[i], required[i], n_pod))
        .collect::<Result<_>>()?;
    let bases: [PodBasis; 5] = bases.try_into().expect("five bases");
    PodArray::from_bases(bases, ic)
}
