//! Synthetic cases: tissue layout, anisotropic tensors, initial tumour and
//! targets.

use std::path::{Path, PathBuf};
use std::sync::{Arc, OnceLock};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fom::{fom_solve, FomOperators};
use crate::mesh::{build_structured_mesh, CellTensorField, Mesh, NodalField};
use crate::params::{equilibrium_volume_fraction, ParameterSet, TherapySchedule};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Tissue {
    #[serde(rename = "WM")]
    White,
    #[serde(rename = "GM")]
    Grey,
    #[serde(rename = "CSF")]
    Csf,
}

impl Tissue {
    pub fn chemotaxis(self) -> f64 {
        match self {
            Tissue::White => 4.0,
            Tissue::Grey | Tissue::Csf => 1.0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct CaseData {
    mesh: Arc<Mesh>,
    tissue: Vec<Tissue>,
    d: CellTensorField,
    t: CellTensorField,
    chi: Vec<f64>,
    phi0: NodalField,
    n0: NodalField,
    target: Option<NodalField>,
    dt: f64,
    n_steps: usize,
    therapy: TherapySchedule,
    ops: OnceLock<Arc<FomOperators>>,
}

impl CaseData {
    /// Validates every case invariant; χ follows the tissue labels.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        mesh: Mesh,
        tissue: Vec<Tissue>,
        d: CellTensorField,
        t: CellTensorField,
        phi0: NodalField,
        n0: NodalField,
        dt: f64,
        n_steps: usize,
        therapy: TherapySchedule,
    ) -> Result<Self> {
        mesh.check_nodal("phi0", &phi0)?;
        mesh.check_nodal("n0", &n0)?;
        if tissue.len() != mesh.n_cells() {
            return Err(Error::Dimension(format!(
                "{} tissue labels for {} cells",
                tissue.len(),
                mesh.n_cells()
            )));
        }
        for (name, k) in [("D", &d), ("T", &t)] {
            if k.n_cells() != mesh.n_cells() || k.dim() != mesh.dim() {
                return Err(Error::Dimension(format!("{name} does not match the mesh")));
            }
        }
        if let Some(j) = phi0.iter().position(|&p| !(0.0..1.0).contains(&p)) {
            return Err(Error::InvalidConfig(format!(
                "phi0 = {} at vertex {j} outside [0, 1)",
                phi0[j]
            )));
        }
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(Error::InvalidConfig(format!("time step {dt} must be positive")));
        }
        therapy.validate()?;
        let chi = tissue.iter().map(|t| t.chemotaxis()).collect();
        Ok(CaseData {
            mesh: Arc::new(mesh),
            tissue,
            d,
            t,
            chi,
            phi0,
            n0,
            target: None,
            dt,
            n_steps,
            therapy,
            ops: OnceLock::new(),
        })
    }

    pub fn mesh(&self) -> &Mesh {
        &self.mesh
    }

    pub fn tissue(&self) -> &[Tissue] {
        &self.tissue
    }

    pub fn diffusion(&self) -> &CellTensorField {
        &self.d
    }

    pub fn mobility_tensor(&self) -> &CellTensorField {
        &self.t
    }

    pub fn chi(&self) -> &[f64] {
        &self.chi
    }

    pub fn phi0(&self) -> &NodalField {
        &self.phi0
    }

    pub fn n0(&self) -> &NodalField {
        &self.n0
    }

    pub fn target(&self) -> Option<&NodalField> {
        self.target.as_ref()
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn n_steps(&self) -> usize {
        self.n_steps
    }

    pub fn t_final(&self) -> f64 {
        self.dt * self.n_steps as f64
    }

    pub fn therapy(&self) -> &TherapySchedule {
        &self.therapy
    }

    /// Time at step `n`.
    pub fn time(&self, n: usize) -> f64 {
        self.dt * n as f64
    }

    pub fn operators(&self) -> Arc<FomOperators> {
        self.ops
            .get_or_init(|| Arc::new(FomOperators::new(self).expect("validated case")))
            .clone()
    }

    pub fn with_target(mut self, target: NodalField) -> Result<Self> {
        self.mesh.check_nodal("target", &target)?;
        if let Some(j) = target.iter().position(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::InvalidTarget(format!(
                "value {} at vertex {j} is not 0 or 1",
                target[j]
            )));
        }
        self.target = Some(target);
        Ok(self)
    }

    pub fn with_time_grid(mut self, dt: f64, n_steps: usize) -> Result<Self> {
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(Error::InvalidConfig(format!("time step {dt} must be positive")));
        }
        self.dt = dt;
        self.n_steps = n_steps;
        Ok(self)
    }

    pub fn with_therapy(mut self, therapy: TherapySchedule) -> Result<Self> {
        therapy.validate()?;
        self.therapy = therapy;
        Ok(self)
    }

    pub fn with_initial(mut self, phi0: NodalField, n0: NodalField) -> Result<Self> {
        self.mesh.check_nodal("phi0", &phi0)?;
        self.mesh.check_nodal("n0", &n0)?;
        if let Some(j) = phi0.iter().position(|&p| !(0.0..1.0).contains(&p)) {
            return Err(Error::InvalidConfig(format!(
                "phi0 = {} at vertex {j} outside [0, 1)",
                phi0[j]
            )));
        }
        self.phi0 = phi0;
        self.n0 = n0;
        Ok(self)
    }

    /// Replace the tissue-derived chemotaxis multipliers. Only for
    /// controlled experiments; generated cases never need this.
    pub fn with_chemotaxis_override(mut self, chi: Vec<f64>) -> Result<Self> {
        self.mesh.check_cellwise("chi", &chi)?;
        if chi.iter().any(|c| !(c.is_finite() && *c >= 0.0)) {
            return Err(Error::InvalidConfig("chi must be finite and >= 0".into()));
        }
        self.chi = chi;
        self.ops = OnceLock::new();
        Ok(self)
    }

    /// Checks that χ follows the tissue labels.
    pub fn chemotaxis_follows_tissue(&self) -> bool {
        self.tissue
            .iter()
            .zip(&self.chi)
            .all(|(t, &c)| c == t.chemotaxis())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Disk {
    pub center: [f64; 2],
    pub radius: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Band {
    pub x_min: f64,
    pub x_max: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EquilibriumInputs {
    pub s_n: f64,
    pub delta: f64,
    pub delta_n: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PhantomConfig {
    pub nx: usize,
    pub ny: usize,
    /// Domain `[0, Lx] × [0, Ly]` in mm.
    pub extent: [f64; 2],
    /// Vertical white-matter band.
    pub white_matter: Option<Band>,
    pub csf: Option<Disk>,
    /// Fibre direction in white matter, degrees from the x axis.
    pub fiber_angle_deg: f64,
    /// Uniform random perturbation amplitude of the fibre angle per cell.
    pub fiber_jitter_deg: f64,
    /// Largest / smallest eigenvalue of T and D in white matter.
    pub anisotropy_wm: f64,
    pub anisotropy_gm: f64,
    /// Largest eigenvalue of D (mm²/day) per tissue.
    pub diffusion_wm: f64,
    pub diffusion_gm: f64,
    pub diffusion_csf: f64,
    pub seed: Disk,
    pub equilibrium: EquilibriumInputs,
    pub dt: f64,
    pub n_steps: usize,
    pub therapy: TherapySchedule,
    pub rng_seed: u64,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        let p = ParameterSet::initial_guess();
        PhantomConfig {
            nx: 40,
            ny: 40,
            extent: [40.0, 40.0],
            white_matter: Some(Band {
                x_min: 22.0,
                x_max: 32.0,
            }),
            csf: None,
            fiber_angle_deg: 90.0,
            fiber_jitter_deg: 0.0,
            anisotropy_wm: 4.0,
            anisotropy_gm: 1.25,
            diffusion_wm: 86.4,
            diffusion_gm: 43.2,
            diffusion_csf: 86.4,
            seed: Disk {
                center: [18.0, 20.0],
                radius: 6.0,
            },
            equilibrium: EquilibriumInputs {
                s_n: p.s_n,
                delta: p.delta,
                delta_n: p.delta_n,
            },
            dt: 0.1225,
            n_steps: 100,
            therapy: TherapySchedule::none(),
            rng_seed: 0,
        }
    }
}

/// Rotated `diag(1, 1/a)` with the major axis at angle `theta`.
fn oriented_tensor(theta: f64, a: f64) -> [f64; 4] {
    let (s, c) = theta.sin_cos();
    let (l1, l2) = (1.0, 1.0 / a);
    [
        l1 * c * c + l2 * s * s,
        (l1 - l2) * c * s,
        (l1 - l2) * c * s,
        l1 * s * s + l2 * c * c,
    ]
}

/// Radial ramp from `peak` (r ≤ R − w/2) to 0 (r ≥ R + w/2).
pub fn smoothed_disk(x: &[f64], seed: &Disk, width: f64, peak: f64) -> f64 {
    let r = ((x[0] - seed.center[0]).powi(2) + (x[1] - seed.center[1]).powi(2)).sqrt();
    let s = ((seed.radius + 0.5 * width - r) / width).clamp(0.0, 1.0);
    peak * s
}

pub fn generate_phantom(cfg: &PhantomConfig) -> Result<CaseData> {
    let mesh = build_structured_mesh(cfg.nx, cfg.ny, (cfg.extent[0], cfg.extent[1]))?;
    let h = (cfg.extent[0] / cfg.nx as f64).max(cfg.extent[1] / cfg.ny as f64);
    let ramp = 2.0 * h;
    let reach = cfg.seed.radius + 0.5 * ramp;
    let [cx, cy] = cfg.seed.center;
    if !(cfg.seed.radius > 0.0)
        || cx - reach < 0.0
        || cy - reach < 0.0
        || cx + reach > cfg.extent[0]
        || cy + reach > cfg.extent[1]
    {
        return Err(Error::InvalidConfig(
            "tumour seed (with its smoothing ramp) leaves the domain".into(),
        ));
    }
    for (name, a) in [("anisotropy_wm", cfg.anisotropy_wm), ("anisotropy_gm", cfg.anisotropy_gm)] {
        if !(a >= 1.0 && a.is_finite()) {
            return Err(Error::InvalidConfig(format!("{name} = {a} must be >= 1")));
        }
    }
    for (name, d) in [
        ("diffusion_wm", cfg.diffusion_wm),
        ("diffusion_gm", cfg.diffusion_gm),
        ("diffusion_csf", cfg.diffusion_csf),
    ] {
        if !(d >= 0.0 && d.is_finite()) {
            return Err(Error::InvalidConfig(format!("{name} = {d} must be >= 0")));
        }
    }
    let eq = &cfg.equilibrium;
    let phi_bar = equilibrium_volume_fraction(eq.s_n, eq.delta, eq.delta_n)?;
    if !(phi_bar > 0.0 && phi_bar < 1.0) {
        return Err(Error::InvalidConfig(format!(
            "equilibrium volume fraction {phi_bar} outside (0, 1)"
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
    let nc = mesh.n_cells();
    let mut tissue = Vec::with_capacity(nc);
    let mut tdata = Vec::with_capacity(4 * nc);
    let mut ddata = Vec::with_capacity(4 * nc);
    for k in 0..nc {
        let c = mesh.centroid(k);
        let in_csf = cfg.csf.is_some_and(|d| {
            (c[0] - d.center[0]).powi(2) + (c[1] - d.center[1]).powi(2) <= d.radius * d.radius
        });
        let in_wm = cfg
            .white_matter
            .is_some_and(|b| b.x_min <= c[0] && c[0] <= b.x_max);
        let jitter = if cfg.fiber_jitter_deg > 0.0 {
            rng.random_range(-1.0..1.0) * cfg.fiber_jitter_deg
        } else {
            0.0
        };
        let theta = (cfg.fiber_angle_deg + jitter).to_radians();
        let (label, a, dmax) = if in_csf {
            (Tissue::Csf, 1.0, cfg.diffusion_csf)
        } else if in_wm {
            (Tissue::White, cfg.anisotropy_wm, cfg.diffusion_wm)
        } else {
            (Tissue::Grey, cfg.anisotropy_gm, cfg.diffusion_gm)
        };
        let t = oriented_tensor(theta, a);
        tissue.push(label);
        tdata.extend_from_slice(&t);
        ddata.extend(t.iter().map(|v| v * dmax));
    }
    let t = CellTensorField::new(2, tdata)?;
    let d = CellTensorField::new(2, ddata)?;
    let phi0 = crate::mesh::p1_interpolate(&mesh, |x| smoothed_disk(x, &cfg.seed, ramp, phi_bar))?;
    let n0 = NodalField::constant(&mesh, 1.0);
    CaseData::new(
        mesh,
        tissue,
        d,
        t,
        phi0,
        n0,
        cfg.dt,
        cfg.n_steps,
        cfg.therapy.clone(),
    )
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetMode {
    Synthetic(ParameterSet),
    File(PathBuf),
}

/// Indicator `1[φ ≥ threshold]`.
pub fn threshold_indicator(phi: &[f64], threshold: f64) -> Vec<f64> {
    phi.iter()
        .map(|&p| if p >= threshold { 1.0 } else { 0.0 })
        .collect()
}

pub fn make_target(case: &CaseData, mode: &TargetMode) -> Result<NodalField> {
    match mode {
        TargetMode::Synthetic(p_true) => {
            let run = fom_solve(case, p_true, false)?;
            let mask = threshold_indicator(&run.state.phi, 0.5 * p_true.phi_e());
            NodalField::new(case.mesh(), mask)
        }
        TargetMode::File(path) => load_mask(case.mesh(), path),
    }
}

#[derive(Serialize, Deserialize)]
struct MaskFile {
    version: String,
    #[serde(serialize_with = "crate::numfmt::vec17")]
    values: Vec<f64>,
}

pub const MASK_VERSION: &str = "tumour-rom-mask/1";

pub fn save_mask(mask: &[f64], path: &Path) -> Result<()> {
    crate::numfmt::write_json(
        path,
        &MaskFile {
            version: MASK_VERSION.into(),
            values: mask.to_vec(),
        },
    )
}

pub fn load_mask(mesh: &Mesh, path: &Path) -> Result<NodalField> {
    let f: MaskFile = crate::numfmt::read_json(path)?;
    if f.version != MASK_VERSION {
        return Err(Error::Schema(format!(
            "mask version {:?}, expected {MASK_VERSION:?}",
            f.version
        )));
    }
    mesh.check_nodal("target mask", &f.values)?;
    if let Some(j) = f.values.iter().position(|&v| v != 0.0 && v != 1.0) {
        return Err(Error::InvalidTarget(format!(
            "value {} at vertex {j} is not 0 or 1",
            f.values[j]
        )));
    }
    NodalField::new(mesh, f.values)
}
