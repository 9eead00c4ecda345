//! Simplicial meshes and P1 finite element kernels.
//!
//! Everything here is written for simplices of dimension 2 or 3. Cell
//! geometry (volumes, barycentric gradients), the lumped mass vector and the
//! sparsity pattern are computed once at construction.

use std::collections::HashMap;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sparse::CsrMatrix;

#[derive(Clone, Debug)]
pub struct Mesh {
    dim: usize,
    coords: Vec<f64>,
    cells: Vec<usize>,
    boundary_facets: Vec<Vec<usize>>,
    volumes: Vec<f64>,
    grads: Vec<f64>,
    lumped: Vec<f64>,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    cell_slots: Vec<usize>,
}

/// Plain serializable mesh description.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct MeshData {
    pub dim: usize,
    pub vertices: Vec<Vec<f64>>,
    pub cells: Vec<Vec<usize>>,
}

impl Mesh {
    /// `coords` is vertex-major with stride `dim`, `cells` is cell-major with
    /// stride `dim + 1`.
    pub fn new(dim: usize, coords: Vec<f64>, cells: Vec<usize>) -> Result<Mesh> {
        if dim != 2 && dim != 3 {
            return Err(Error::InvalidMesh(format!("dimension {dim} not supported")));
        }
        if coords.len() % dim != 0 || cells.len() % (dim + 1) != 0 {
            return Err(Error::InvalidMesh("ragged coordinate or cell arrays".into()));
        }
        if coords.iter().any(|c| !c.is_finite()) {
            return Err(Error::InvalidMesh("non-finite vertex coordinate".into()));
        }
        let nv = coords.len() / dim;
        let nloc = dim + 1;
        let nc = cells.len() / nloc;
        if nc == 0 {
            return Err(Error::InvalidMesh("mesh has no cells".into()));
        }
        for (k, cell) in cells.chunks(nloc).enumerate() {
            for (a, &v) in cell.iter().enumerate() {
                if v >= nv {
                    return Err(Error::InvalidMesh(format!("cell {k} references vertex {v}")));
                }
                if cell[..a].contains(&v) {
                    return Err(Error::InvalidMesh(format!("cell {k} repeats vertex {v}")));
                }
            }
        }

        let geom: Vec<(f64, Vec<f64>)> = cells
            .par_chunks(nloc)
            .map(|cell| simplex_geometry(dim, &coords, cell))
            .collect();
        let mut volumes = Vec::with_capacity(nc);
        let mut grads = Vec::with_capacity(nc * nloc * dim);
        for (k, (vol, g)) in geom.into_iter().enumerate() {
            if !(vol > 0.0) || !vol.is_finite() {
                return Err(Error::InvalidMesh(format!("cell {k} has volume {vol}")));
            }
            volumes.push(vol);
            grads.extend(g);
        }

        let mut facets: HashMap<Vec<usize>, (usize, Vec<usize>)> = HashMap::new();
        for cell in cells.chunks(nloc) {
            for skip in 0..nloc {
                let f: Vec<usize> = (0..nloc).filter(|&a| a != skip).map(|a| cell[a]).collect();
                let mut key = f.clone();
                key.sort_unstable();
                facets.entry(key).or_insert((0, f)).0 += 1;
            }
        }
        let mut boundary_facets = Vec::new();
        for (key, (count, f)) in &facets {
            if *count > 2 {
                return Err(Error::InvalidMesh(format!(
                    "facet {key:?} shared by {count} cells"
                )));
            }
            if *count == 1 {
                boundary_facets.push(f.clone());
            }
        }
        boundary_facets.sort_unstable_by(|a, b| {
            let mut x = a.clone();
            let mut y = b.clone();
            x.sort_unstable();
            y.sort_unstable();
            x.cmp(&y)
        });

        let mut lumped = vec![0.0; nv];
        for (cell, vol) in cells.chunks(nloc).zip(&volumes) {
            for &v in cell {
                lumped[v] += vol / nloc as f64;
            }
        }

        let mut adj: Vec<Vec<usize>> = vec![Vec::new(); nv];
        for cell in cells.chunks(nloc) {
            for &a in cell {
                adj[a].extend_from_slice(cell);
            }
        }
        let mut row_ptr = Vec::with_capacity(nv + 1);
        row_ptr.push(0);
        let mut col_idx = Vec::new();
        for row in adj.iter_mut() {
            row.sort_unstable();
            row.dedup();
            col_idx.extend_from_slice(row);
            row_ptr.push(col_idx.len());
        }
        let mut cell_slots = Vec::with_capacity(nc * nloc * nloc);
        for cell in cells.chunks(nloc) {
            for &a in cell {
                let cols = &col_idx[row_ptr[a]..row_ptr[a + 1]];
                for &b in cell {
                    let p = cols.binary_search(&b).expect("pattern built from cells");
                    cell_slots.push(row_ptr[a] + p);
                }
            }
        }

        Ok(Mesh {
            dim,
            coords,
            cells,
            boundary_facets,
            volumes,
            grads,
            lumped,
            row_ptr,
            col_idx,
            cell_slots,
        })
    }

    pub fn from_data(data: &MeshData) -> Result<Mesh> {
        let mut coords = Vec::with_capacity(data.vertices.len() * data.dim);
        for v in &data.vertices {
            if v.len() != data.dim {
                return Err(Error::InvalidMesh(format!(
                    "vertex has {} coordinates, expected {}",
                    v.len(),
                    data.dim
                )));
            }
            coords.extend_from_slice(v);
        }
        let mut cells = Vec::with_capacity(data.cells.len() * (data.dim + 1));
        for c in &data.cells {
            if c.len() != data.dim + 1 {
                return Err(Error::InvalidMesh(format!("cell has {} vertices", c.len())));
            }
            cells.extend_from_slice(c);
        }
        Mesh::new(data.dim, coords, cells)
    }

    pub fn to_data(&self) -> MeshData {
        MeshData {
            dim: self.dim,
            vertices: self.coords.chunks(self.dim).map(|c| c.to_vec()).collect(),
            cells: self.cells.chunks(self.dim + 1).map(|c| c.to_vec()).collect(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_vertices(&self) -> usize {
        self.coords.len() / self.dim
    }

    pub fn n_cells(&self) -> usize {
        self.volumes.len()
    }

    /// Vertices per cell.
    pub fn n_local(&self) -> usize {
        self.dim + 1
    }

    pub fn vertex(&self, j: usize) -> &[f64] {
        &self.coords[j * self.dim..(j + 1) * self.dim]
    }

    pub fn coords(&self) -> &[f64] {
        &self.coords
    }

    pub fn cell(&self, k: usize) -> &[usize] {
        let n = self.n_local();
        &self.cells[k * n..(k + 1) * n]
    }

    pub fn cells(&self) -> impl Iterator<Item = &[usize]> {
        self.cells.chunks(self.n_local())
    }

    pub fn boundary_facets(&self) -> &[Vec<usize>] {
        &self.boundary_facets
    }

    pub fn cell_volume(&self, k: usize) -> f64 {
        self.volumes[k]
    }

    pub fn volumes(&self) -> &[f64] {
        &self.volumes
    }

    pub fn total_volume(&self) -> f64 {
        self.volumes.iter().sum()
    }

    /// Gradient of the barycentric coordinate of local vertex `a` on cell `k`.
    pub fn grad(&self, k: usize, a: usize) -> &[f64] {
        let d = self.dim;
        let off = (k * (d + 1) + a) * d;
        &self.grads[off..off + d]
    }

    pub fn centroid(&self, k: usize) -> Vec<f64> {
        let mut c = vec![0.0; self.dim];
        for &v in self.cell(k) {
            for (ci, x) in c.iter_mut().zip(self.vertex(v)) {
                *ci += x;
            }
        }
        let n = self.n_local() as f64;
        c.iter_mut().for_each(|x| *x /= n);
        c
    }

    /// Row-sum lumped mass `m_j = Σ_K |K| / (d+1)`.
    pub fn lumped_mass(&self) -> &[f64] {
        &self.lumped
    }

    /// Typical edge length: `(|Ω| / #cells · d!)^(1/d)`.
    pub fn mesh_size(&self) -> f64 {
        let fact = if self.dim == 2 { 2.0 } else { 6.0 };
        (self.total_volume() / self.n_cells() as f64 * fact).powf(1.0 / self.dim as f64)
    }

    /// Empty matrix on the vertex adjacency pattern.
    pub fn zero_matrix(&self) -> CsrMatrix {
        CsrMatrix::zeros_with_pattern(self.n_vertices(), self.row_ptr.clone(), self.col_idx.clone())
    }

    /// Value slot of local entry `(a, b)` of cell `k` in matrices from [`Mesh::zero_matrix`].
    pub fn cell_slot(&self, k: usize, a: usize, b: usize) -> usize {
        let n = self.n_local();
        self.cell_slots[(k * n + a) * n + b]
    }

    pub fn check_nodal(&self, name: &str, u: &[f64]) -> Result<()> {
        if u.len() != self.n_vertices() {
            return Err(Error::Dimension(format!(
                "{name} has length {}, mesh has {} vertices",
                u.len(),
                self.n_vertices()
            )));
        }
        Ok(())
    }

    pub fn check_cellwise(&self, name: &str, u: &[f64]) -> Result<()> {
        if u.len() != self.n_cells() {
            return Err(Error::Dimension(format!(
                "{name} has length {}, mesh has {} cells",
                u.len(),
                self.n_cells()
            )));
        }
        Ok(())
    }
}

fn simplex_geometry(dim: usize, coords: &[f64], cell: &[usize]) -> (f64, Vec<f64>) {
    let x = |v: usize, i: usize| coords[v * dim + i];
    let mut jac = DMatrix::<f64>::zeros(dim, dim);
    for c in 0..dim {
        for r in 0..dim {
            jac[(r, c)] = x(cell[c + 1], r) - x(cell[0], r);
        }
    }
    let det = jac.determinant();
    let fact = if dim == 2 { 2.0 } else { 6.0 };
    let vol = det.abs() / fact;
    let mut g = vec![0.0; (dim + 1) * dim];
    if let Some(inv) = jac.try_inverse() {
        for a in 1..=dim {
            for i in 0..dim {
                g[a * dim + i] = inv[(a - 1, i)];
                g[i] -= inv[(a - 1, i)];
            }
        }
    }
    (vol, g)
}

/// Nodal values, one per mesh vertex.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NodalField(Vec<f64>);

impl NodalField {
    pub fn new(mesh: &Mesh, values: Vec<f64>) -> Result<Self> {
        mesh.check_nodal("nodal field", &values)?;
        if let Some(j) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Dimension(format!("non-finite nodal value at vertex {j}")));
        }
        Ok(NodalField(values))
    }

    pub fn constant(mesh: &Mesh, c: f64) -> Self {
        NodalField(vec![c; mesh.n_vertices()])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }
}

impl std::ops::Deref for NodalField {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.0
    }
}

/// Symmetric `dim × dim` tensor per cell, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct CellTensorField {
    dim: usize,
    data: Vec<f64>,
}

impl CellTensorField {
    /// Validates symmetry and positive semidefiniteness of every tensor.
    pub fn new(dim: usize, data: Vec<f64>) -> Result<Self> {
        if dim == 0 || data.len() % (dim * dim) != 0 {
            return Err(Error::Dimension("tensor data is not a multiple of dim²".into()));
        }
        let field = CellTensorField { dim, data };
        for k in 0..field.n_cells() {
            field.validate_cell(k)?;
        }
        Ok(field)
    }

    pub fn isotropic(dim: usize, n_cells: usize, value: f64) -> Self {
        let mut data = vec![0.0; n_cells * dim * dim];
        for k in 0..n_cells {
            for i in 0..dim {
                data[k * dim * dim + i * dim + i] = value;
            }
        }
        CellTensorField { dim, data }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_cells(&self) -> usize {
        self.data.len() / (self.dim * self.dim)
    }

    pub fn cell(&self, k: usize) -> &[f64] {
        let s = self.dim * self.dim;
        &self.data[k * s..(k + 1) * s]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Eigenvalues of the tensor on cell `k`, ascending.
    pub fn eigenvalues(&self, k: usize) -> Vec<f64> {
        let d = self.dim;
        let m = DMatrix::from_row_slice(d, d, self.cell(k));
        let mut ev: Vec<f64> = m.symmetric_eigen().eigenvalues.iter().copied().collect();
        ev.sort_by(|a, b| a.total_cmp(b));
        ev
    }

    fn validate_cell(&self, k: usize) -> Result<()> {
        let d = self.dim;
        let t = self.cell(k);
        if t.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidTensor {
                cell: k,
                reason: "non-finite component".into(),
            });
        }
        let scale = t.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
        for i in 0..d {
            for j in 0..i {
                if (t[i * d + j] - t[j * d + i]).abs() > 1e-12 * scale.max(1e-300) {
                    return Err(Error::InvalidTensor {
                        cell: k,
                        reason: format!("not symmetric in ({i},{j})"),
                    });
                }
            }
        }
        if scale > 0.0 {
            let min = self.eigenvalues(k)[0];
            if min < -1e-12 * scale {
                return Err(Error::InvalidTensor {
                    cell: k,
                    reason: format!("negative eigenvalue {min:e}"),
                });
            }
        }
        Ok(())
    }
}

/// Per-cell local stiffness blocks `(K ∇λ_b · ∇λ_a) |K|` for a tensor field.
///
/// Kept separately so that cellwise-weighted stiffness matrices (the
/// degenerate mobility operators) can be re-assembled by a scatter.
#[derive(Clone, Debug)]
pub struct LocalStiffness {
    nloc: usize,
    blocks: Vec<f64>,
}

impl LocalStiffness {
    pub fn new(mesh: &Mesh, k: &CellTensorField) -> Result<Self> {
        if k.n_cells() != mesh.n_cells() || k.dim() != mesh.dim() {
            return Err(Error::Dimension(format!(
                "tensor field has {} cells of dim {}, mesh has {} of dim {}",
                k.n_cells(),
                k.dim(),
                mesh.n_cells(),
                mesh.dim()
            )));
        }
        let d = mesh.dim();
        let nloc = d + 1;
        let blocks: Vec<f64> = (0..mesh.n_cells())
            .into_par_iter()
            .flat_map_iter(|c| {
                let t = k.cell(c);
                let vol = mesh.cell_volume(c);
                let mut out = vec![0.0; nloc * nloc];
                for a in 0..nloc {
                    let ga = mesh.grad(c, a);
                    for b in 0..nloc {
                        let gb = mesh.grad(c, b);
                        let mut s = 0.0;
                        for i in 0..d {
                            for j in 0..d {
                                s += ga[i] * t[i * d + j] * gb[j];
                            }
                        }
                        out[a * nloc + b] = s * vol;
                    }
                }
                out
            })
            .collect();
        Ok(LocalStiffness { nloc, blocks })
    }

    /// Local block of cell `k`, row-major `(a, b)`.
    pub fn block(&self, k: usize) -> &[f64] {
        let s = self.nloc * self.nloc;
        &self.blocks[k * s..(k + 1) * s]
    }

    /// `Σ_K w_K · block_K` scattered into `out` (which must come from `mesh.zero_matrix()`).
    pub fn assemble_into(&self, mesh: &Mesh, weights: Option<&[f64]>, out: &mut CsrMatrix) {
        out.values_mut().iter_mut().for_each(|v| *v = 0.0);
        let n = self.nloc;
        let vals = out.values_mut();
        for c in 0..mesh.n_cells() {
            let w = weights.map_or(1.0, |w| w[c]);
            if w == 0.0 {
                continue;
            }
            let blk = self.block(c);
            for a in 0..n {
                for b in 0..n {
                    vals[mesh.cell_slot(c, a, b)] += w * blk[a * n + b];
                }
            }
        }
    }

    pub fn assemble(&self, mesh: &Mesh, weights: Option<&[f64]>) -> CsrMatrix {
        let mut m = mesh.zero_matrix();
        self.assemble_into(mesh, weights, &mut m);
        m
    }
}

/// Structured triangulation of `[0, Lx] × [0, Ly]` with diagonals alternating
/// in a checkerboard pattern, `(nx+1)(ny+1)` vertices and `2 nx ny` triangles.
pub fn build_structured_mesh(nx: usize, ny: usize, extent: (f64, f64)) -> Result<Mesh> {
    if nx < 2 || ny < 2 {
        return Err(Error::InvalidConfig(format!(
            "structured mesh needs nx, ny >= 2 (got {nx}, {ny})"
        )));
    }
    let (lx, ly) = extent;
    if !(lx > 0.0 && ly > 0.0 && lx.is_finite() && ly.is_finite()) {
        return Err(Error::InvalidConfig(format!(
            "mesh extent must be positive (got {lx}, {ly})"
        )));
    }
    let xs: Vec<f64> = (0..=nx).map(|i| lx * i as f64 / nx as f64).collect();
    let ys: Vec<f64> = (0..=ny).map(|j| ly * j as f64 / ny as f64).collect();
    build_tensor_mesh(&xs, &ys)
}

/// Triangulation of the tensor grid `xs × ys` (strictly increasing lines),
/// same diagonal pattern as [`build_structured_mesh`].
pub fn build_tensor_mesh(xs: &[f64], ys: &[f64]) -> Result<Mesh> {
    let increasing = |v: &[f64]| v.len() >= 2 && v.windows(2).all(|w| w[1] > w[0]);
    if !increasing(xs) || !increasing(ys) {
        return Err(Error::InvalidConfig("grid lines must be strictly increasing".into()));
    }
    let nx = xs.len() - 1;
    let ny = ys.len() - 1;
    let mut coords = Vec::with_capacity(2 * (nx + 1) * (ny + 1));
    for y in ys {
        for x in xs {
            coords.push(*x);
            coords.push(*y);
        }
    }
    let id = |i: usize, j: usize| j * (nx + 1) + i;
    let mut cells = Vec::with_capacity(6 * nx * ny);
    for j in 0..ny {
        for i in 0..nx {
            let (v00, v10, v01, v11) = (id(i, j), id(i + 1, j), id(i, j + 1), id(i + 1, j + 1));
            if (i + j) % 2 == 0 {
                cells.extend_from_slice(&[v00, v10, v11, v00, v11, v01]);
            } else {
                cells.extend_from_slice(&[v00, v10, v01, v10, v11, v01]);
            }
        }
    }
    Mesh::new(2, coords, cells)
}

/// `Σ_j m_j u_j v_j`.
pub fn lumped_inner_product(mesh: &Mesh, u: &[f64], v: &[f64]) -> Result<f64> {
    mesh.check_nodal("u", u)?;
    mesh.check_nodal("v", v)?;
    Ok(lumped_dot(mesh.lumped_mass(), u, v))
}

pub(crate) fn lumped_dot(m: &[f64], u: &[f64], v: &[f64]) -> f64 {
    m.iter().zip(u).zip(v).map(|((m, a), b)| m * a * b).sum()
}

/// Tensor-weighted stiffness `A_ij = Σ_K ∫_K K∇χ_i·∇χ_j`.
pub fn assemble_stiffness(mesh: &Mesh, k: &CellTensorField) -> Result<CsrMatrix> {
    Ok(LocalStiffness::new(mesh, k)?.assemble(mesh, None))
}

/// Consistent P1 mass matrix.
pub fn consistent_mass(mesh: &Mesh) -> CsrMatrix {
    let n = mesh.n_local();
    let denom = (n * (n + 1)) as f64;
    let mut m = mesh.zero_matrix();
    let vals = m.values_mut();
    for c in 0..mesh.n_cells() {
        let vol = mesh.cell_volume(c);
        for a in 0..n {
            for b in 0..n {
                let f = if a == b { 2.0 } else { 1.0 };
                vals[mesh.cell_slot(c, a, b)] += f * vol / denom;
            }
        }
    }
    m
}

/// Nodal interpolation `u_j = f(x_j)`.
pub fn p1_interpolate(mesh: &Mesh, f: impl Fn(&[f64]) -> f64) -> Result<NodalField> {
    let values = (0..mesh.n_vertices()).map(|j| f(mesh.vertex(j))).collect();
    NodalField::new(mesh, values)
}

/// Exact integrals of products of barycentric coordinates over a simplex,
/// relative to its volume: `∫_K Π λ_a^{k_a} / |K| = d! Π k_a! / (d + Σ k_a)!`.
#[derive(Clone, Debug)]
pub struct SimplexMoments {
    nloc: usize,
    pub(crate) second: Vec<f64>,
    pub(crate) third: Vec<f64>,
}

impl SimplexMoments {
    pub fn new(dim: usize) -> Self {
        let nloc = dim + 1;
        let mut second = vec![0.0; nloc * nloc];
        let mut third = vec![0.0; nloc * nloc * nloc];
        for a in 0..nloc {
            for b in 0..nloc {
                second[a * nloc + b] = moment(dim, &[a, b]);
                for c in 0..nloc {
                    third[(a * nloc + b) * nloc + c] = moment(dim, &[a, b, c]);
                }
            }
        }
        SimplexMoments {
            nloc,
            second,
            third,
        }
    }

    /// `∫_K f / |K|` for P1 `f` with vertex values `f`.
    pub fn mean1(&self, f: &[f64]) -> f64 {
        f.iter().sum::<f64>() / self.nloc as f64
    }

    /// `∫_K f g / |K|`.
    pub fn mean2(&self, f: &[f64], g: &[f64]) -> f64 {
        let n = self.nloc;
        let mut s = 0.0;
        for a in 0..n {
            for b in 0..n {
                s += f[a] * g[b] * self.second[a * n + b];
            }
        }
        s
    }

    /// `∫_K f g h / |K|`.
    pub fn mean3(&self, f: &[f64], g: &[f64], h: &[f64]) -> f64 {
        let n = self.nloc;
        let mut s = 0.0;
        for a in 0..n {
            for b in 0..n {
                let fg = f[a] * g[b];
                for c in 0..n {
                    s += fg * h[c] * self.third[(a * n + b) * n + c];
                }
            }
        }
        s
    }
}

fn factorial(n: usize) -> f64 {
    (1..=n).map(|i| i as f64).product()
}

fn moment(dim: usize, idx: &[usize]) -> f64 {
    let mut counts = [0usize; 4];
    for &i in idx {
        counts[i] += 1;
    }
    let num: f64 = factorial(dim) * counts.iter().map(|&k| factorial(k)).product::<f64>();
    num / factorial(dim + idx.len())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn moments_match_known_triangle_values() {
        let m = SimplexMoments::new(2);
        assert!((m.second[0] - 1.0 / 6.0).abs() < 1e-15);
        assert!((m.second[1] - 1.0 / 12.0).abs() < 1e-15);
        assert!((m.third[0] - 1.0 / 10.0).abs() < 1e-15);
        assert!((m.third[1] - 1.0 / 30.0).abs() < 1e-15);
        assert!((m.third[5] - 1.0 / 60.0).abs() < 1e-15);
    }

    #[test]
    fn moments_sum_to_one() {
        for d in [2, 3] {
            let m = SimplexMoments::new(d);
            let s2: f64 = m.second.iter().sum();
            let s3: f64 = m.third.iter().sum();
            assert!((s2 - 1.0).abs() < 1e-14);
            assert!((s3 - 1.0).abs() < 1e-14);
        }
    }

    #[test]
    fn barycentric_gradients_sum_to_zero() {
        let mesh = build_structured_mesh(3, 2, (2.0, 1.0)).unwrap();
        for k in 0..mesh.n_cells() {
            for i in 0..2 {
                let s: f64 = (0..3).map(|a| mesh.grad(k, a)[i]).sum();
                assert!(s.abs() < 1e-12);
            }
        }
    }
}
