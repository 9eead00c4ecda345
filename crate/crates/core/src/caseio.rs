//! Case directories: one JSON file per concern, floats as 17-digit text.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mesh::{CellTensorField, Mesh, MeshData, NodalField};
use crate::numfmt::{f17, mat17, read_json, vec17, write_json};
use crate::params::{ChemoWindow, TherapySchedule};
use crate::phantom::{CaseData, Tissue};

pub const CASE_VERSION: &str = "tumour-rom-case/1";

#[derive(Serialize, Deserialize)]
struct MeshFile {
    version: String,
    dim: usize,
    #[serde(serialize_with = "mat17")]
    vertices: Vec<Vec<f64>>,
    cells: Vec<Vec<usize>>,
}

#[derive(Serialize, Deserialize)]
struct TensorFile {
    version: String,
    layout: String,
    #[serde(rename = "D", serialize_with = "mat17")]
    d: Vec<Vec<f64>>,
    #[serde(rename = "T", serialize_with = "mat17")]
    t: Vec<Vec<f64>>,
}

#[derive(Serialize, Deserialize)]
struct FieldFile {
    version: String,
    tissue: Vec<Tissue>,
    #[serde(serialize_with = "vec17")]
    chi: Vec<f64>,
    #[serde(serialize_with = "vec17")]
    phi0: Vec<f64>,
    #[serde(serialize_with = "vec17")]
    n0: Vec<f64>,
    #[serde(serialize_with = "crate::numfmt::opt_vec17")]
    target: Option<Vec<f64>>,
}

#[derive(Serialize, Deserialize)]
struct WindowFile {
    #[serde(serialize_with = "f17")]
    start: f64,
    #[serde(serialize_with = "f17")]
    end: f64,
}

#[derive(Serialize, Deserialize)]
struct ChemoFile {
    #[serde(serialize_with = "f17")]
    start: f64,
    #[serde(serialize_with = "f17")]
    end: f64,
    #[serde(serialize_with = "f17")]
    rate: f64,
}

#[derive(Serialize, Deserialize)]
struct ScheduleFile {
    version: String,
    radio_windows: Vec<WindowFile>,
    #[serde(serialize_with = "f17")]
    r_eff: f64,
    chemo_windows: Vec<ChemoFile>,
}

#[derive(Serialize, Deserialize)]
struct Units {
    length: String,
    time: String,
    pressure: String,
}

#[derive(Serialize, Deserialize)]
struct MetaFile {
    version: String,
    #[serde(serialize_with = "f17")]
    dt: f64,
    n_steps: usize,
    #[serde(serialize_with = "f17")]
    t_final: f64,
    units: Units,
}

fn check_version(file: &str, found: &str) -> Result<()> {
    if found != CASE_VERSION {
        return Err(Error::Schema(format!(
            "{file}: version {found:?}, expected {CASE_VERSION:?}"
        )));
    }
    Ok(())
}

fn per_cell(k: &CellTensorField) -> Vec<Vec<f64>> {
    let dd = k.dim() * k.dim();
    k.data().chunks(dd).map(|c| c.to_vec()).collect()
}

fn tensor_field(name: &str, dim: usize, rows: Vec<Vec<f64>>) -> Result<CellTensorField> {
    if let Some(k) = rows.iter().position(|r| r.len() != dim * dim) {
        return Err(Error::Schema(format!(
            "{name} cell {k} has {} components, expected {}",
            rows[k].len(),
            dim * dim
        )));
    }
    CellTensorField::new(dim, rows.concat())
}

pub fn save_case(case: &CaseData, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mesh = case.mesh().to_data();
    write_json(
        &dir.join("mesh.json"),
        &MeshFile {
            version: CASE_VERSION.into(),
            dim: mesh.dim,
            vertices: mesh.vertices,
            cells: mesh.cells,
        },
    )?;
    write_json(
        &dir.join("tensors.json"),
        &TensorFile {
            version: CASE_VERSION.into(),
            layout: "per-cell row-major".into(),
            d: per_cell(case.diffusion()),
            t: per_cell(case.mobility_tensor()),
        },
    )?;
    write_json(
        &dir.join("fields.json"),
        &FieldFile {
            version: CASE_VERSION.into(),
            tissue: case.tissue().to_vec(),
            chi: case.chi().to_vec(),
            phi0: case.phi0().to_vec(),
            n0: case.n0().to_vec(),
            target: case.target().map(|t| t.to_vec()),
        },
    )?;
    let therapy = case.therapy();
    write_json(
        &dir.join("schedule.json"),
        &ScheduleFile {
            version: CASE_VERSION.into(),
            radio_windows: therapy
                .radio_windows
                .iter()
                .map(|w| WindowFile { start: w[0], end: w[1] })
                .collect(),
            r_eff: therapy.r_eff,
            chemo_windows: therapy
                .chemo_windows
                .iter()
                .map(|w| ChemoFile { start: w.start, end: w.end, rate: w.rate })
                .collect(),
        },
    )?;
    write_json(
        &dir.join("meta.json"),
        &MetaFile {
            version: CASE_VERSION.into(),
            dt: case.dt(),
            n_steps: case.n_steps(),
            t_final: case.t_final(),
            units: Units {
                length: "mm".into(),
                time: "day".into(),
                pressure: "Pa".into(),
            },
        },
    )
}

pub fn load_schedule(path: &Path) -> Result<TherapySchedule> {
    let f: ScheduleFile = read_json(path)?;
    check_version("schedule.json", &f.version)?;
    let s = TherapySchedule {
        radio_windows: f.radio_windows.iter().map(|w| [w.start, w.end]).collect(),
        r_eff: f.r_eff,
        chemo_windows: f
            .chemo_windows
            .iter()
            .map(|w| ChemoWindow { start: w.start, end: w.end, rate: w.rate })
            .collect(),
    };
    s.validate()?;
    Ok(s)
}

pub fn load_case(dir: &Path) -> Result<CaseData> {
    let m: MeshFile = read_json(&dir.join("mesh.json"))?;
    check_version("mesh.json", &m.version)?;
    let mesh = Mesh::from_data(&MeshData {
        dim: m.dim,
        vertices: m.vertices,
        cells: m.cells,
    })?;
    let dim = mesh.dim();

    let t: TensorFile = read_json(&dir.join("tensors.json"))?;
    check_version("tensors.json", &t.version)?;
    let d = tensor_field("D", dim, t.d)?;
    let tt = tensor_field("T", dim, t.t)?;

    let f: FieldFile = read_json(&dir.join("fields.json"))?;
    check_version("fields.json", &f.version)?;
    let therapy = load_schedule(&dir.join("schedule.json"))?;

    let meta: MetaFile = read_json(&dir.join("meta.json"))?;
    check_version("meta.json", &meta.version)?;
    let t_final = meta.dt * meta.n_steps as f64;
    if (t_final - meta.t_final).abs() > 1e-12 * meta.t_final.abs().max(1.0) {
        return Err(Error::Schema(format!(
            "meta.json: t_final {} differs from dt * n_steps = {t_final}",
            meta.t_final
        )));
    }

    let phi0 = NodalField::new(&mesh, f.phi0)?;
    let n0 = NodalField::new(&mesh, f.n0)?;
    let mut case = CaseData::new(
        mesh, f.tissue, d, tt, phi0, n0, meta.dt, meta.n_steps, therapy,
    )?;
    if f.chi.as_slice() != case.chi() {
        case = case.with_chemotaxis_override(f.chi)?;
    }
    if let Some(target) = f.target {
        let target = NodalField::new(case.mesh(), target)?;
        case = case.with_target(target)?;
    }
    Ok(case)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phantom::{generate_phantom, PhantomConfig};

    fn small_case() -> CaseData {
        let cfg = PhantomConfig {
            nx: 8,
            ny: 8,
            ..Default::default()
        };
        generate_phantom(&cfg).unwrap()
    }

    #[test]
    fn round_trip_is_bitwise() {
        let case = small_case();
        let mask: Vec<f64> = case.phi0().iter().map(|&p| if p > 0.1 { 1.0 } else { 0.0 }).collect();
        let target = NodalField::new(case.mesh(), mask).unwrap();
        let case = case.with_target(target).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_case(&case, dir.path()).unwrap();
        let back = load_case(dir.path()).unwrap();
        let bits = |v: &[f64]| -> Vec<u64> { v.iter().map(|x| x.to_bits()).collect() };
        assert!(bits(case.mesh().coords()) == bits(back.mesh().coords()));
        assert!(bits(case.diffusion().data()) == bits(back.diffusion().data()));
        assert!(bits(case.mobility_tensor().data()) == bits(back.mobility_tensor().data()));
        assert!(bits(case.phi0()) == bits(back.phi0()));
        assert!(bits(case.n0()) == bits(back.n0()));
        assert!(case.target().map(|t| bits(t)) == back.target().map(|t| bits(t)));
        assert_eq!(case.tissue(), back.tissue());
        assert_eq!(case.dt().to_bits(), back.dt().to_bits());
        assert_eq!(case.n_steps(), back.n_steps());
        assert_eq!(case.therapy(), back.therapy());
    }

    #[test]
    fn chemotaxis_override_survives() {
        let case = small_case();
        let chi = vec![2.5; case.mesh().n_cells()];
        let case = case.with_chemotaxis_override(chi.clone()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_case(&case, dir.path()).unwrap();
        assert_eq!(load_case(dir.path()).unwrap().chi(), chi.as_slice());
    }

    #[test]
    fn overlapping_chemo_windows_are_rejected() {
        let case = small_case();
        let dir = tempfile::tempdir().unwrap();
        save_case(&case, dir.path()).unwrap();
        let path = dir.path().join("schedule.json");
        let bad = serde_json::json!({
            "version": CASE_VERSION,
            "radio_windows": [],
            "r_eff": 0.0,
            "chemo_windows": [
                {"start": 0.0, "end": 8.0, "rate": 0.0196},
                {"start": 5.0, "end": 12.0, "rate": 0.0196}
            ]
        });
        fs::write(&path, bad.to_string()).unwrap();
        assert!(matches!(load_case(dir.path()), Err(Error::Schedule(_))));
    }

    #[test]
    fn wrong_version_is_a_schema_error() {
        let case = small_case();
        let dir = tempfile::tempdir().unwrap();
        save_case(&case, dir.path()).unwrap();
        let path = dir.path().join("meta.json");
        let text = fs::read_to_string(&path).unwrap().replace(CASE_VERSION, "tumour-rom-case/0");
        fs::write(&path, text).unwrap();
        assert!(matches!(load_case(dir.path()), Err(Error::Schema(_))));
    }

    #[test]
    fn default_two_cycle_schedule_round_trips_with_rates() {
        let case = small_case()
            .with_therapy(TherapySchedule::two_chemo_cycles())
            .unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_case(&case, dir.path()).unwrap();
        let s = load_schedule(&dir.path().join("schedule.json")).unwrap();
        for (t, k) in [(0.0, 0.0196), (5.0, 0.0196), (8.0, 0.0196), (20.0, 0.0), (33.0, 0.0196), (38.0, 0.0196), (40.0, 0.0)] {
            assert_eq!(s.rate(t), k, "t = {t}");
        }
    }

    #[test]
    fn non_conforming_mesh_is_rejected() {
        let case = small_case();
        let dir = tempfile::tempdir().unwrap();
        save_case(&case, dir.path()).unwrap();
        let path = dir.path().join("mesh.json");
        let mut v: serde_json::Value = serde_json::from_str(&fs::read_to_string(&path).unwrap()).unwrap();
        v["cells"][0] = serde_json::json!([0, 1]);
        fs::write(&path, v.to_string()).unwrap();
        assert!(load_case(dir.path()).is_err());
    }
}
