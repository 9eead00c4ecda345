//! The nine model parameters, their admissible box and therapy schedules.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const N_PARAMS: usize = 9;

/// Parameter order used by every 9-vector in the crate.
pub const PARAM_NAMES: [&str; N_PARAMS] =
    ["L", "nu", "k_n", "S_n", "delta_n", "gamma2", "E", "delta", "c_e"];

pub const PARAM_UNITS: [&str; N_PARAMS] = [
    "mm^2/(Pa day)",
    "1/day",
    "mm^2/day",
    "1/day",
    "1/day",
    "Pa mm^2",
    "Pa",
    "1",
    "1",
];

pub const IDX_L: usize = 0;
pub const IDX_NU: usize = 1;
pub const IDX_KN: usize = 2;
pub const IDX_SN: usize = 3;
pub const IDX_DELTA_N: usize = 4;
pub const IDX_GAMMA2: usize = 5;
pub const IDX_E: usize = 6;
pub const IDX_DELTA: usize = 7;
pub const IDX_CE: usize = 8;

/// Linear-quadratic radiotherapy constants: fractions per day, dose (Gy),
/// α (1/Gy), β (1/Gy²).
pub const RT_FRACTIONS: f64 = 1.0;
pub const RT_DOSE: f64 = 2.0;
pub const RT_ALPHA: f64 = 0.027;
pub const RT_BETA: f64 = 0.0027;

/// Chemotherapy decay rates (1/day).
pub const K_C1: f64 = 0.00735;
pub const K_C2: f64 = 0.0147;
pub const K_C3: f64 = 0.0196;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParameterSet {
    #[serde(rename = "L")]
    pub l: f64,
    pub nu: f64,
    pub k_n: f64,
    #[serde(rename = "S_n")]
    pub s_n: f64,
    pub delta_n: f64,
    pub gamma2: f64,
    #[serde(rename = "E")]
    pub e: f64,
    pub delta: f64,
    pub c_e: f64,
}

impl ParameterSet {
    pub fn from_array(p: [f64; N_PARAMS]) -> Self {
        ParameterSet {
            l: p[0],
            nu: p[1],
            k_n: p[2],
            s_n: p[3],
            delta_n: p[4],
            gamma2: p[5],
            e: p[6],
            delta: p[7],
            c_e: p[8],
        }
    }

    pub fn to_array(&self) -> [f64; N_PARAMS] {
        [
            self.l,
            self.nu,
            self.k_n,
            self.s_n,
            self.delta_n,
            self.gamma2,
            self.e,
            self.delta,
            self.c_e,
        ]
    }

    pub fn get(&self, m: usize) -> f64 {
        self.to_array()[m]
    }

    pub fn with(&self, m: usize, value: f64) -> Self {
        let mut a = self.to_array();
        a[m] = value;
        Self::from_array(a)
    }

    /// Homeostatic volume fraction `φ_e = 1 − c_e`.
    pub fn phi_e(&self) -> f64 {
        1.0 - self.c_e
    }

    /// Manually tuned starting point.
    pub fn initial_guess() -> Self {
        ParameterSet {
            l: 1.0 / 5000.0,
            nu: 0.08,
            k_n: 2.0,
            s_n: 1.0e4,
            delta_n: 8640.0,
            gamma2: 0.1225,
            e: 694.0,
            delta: 0.3,
            c_e: 0.611,
        }
    }

    /// All components finite and strictly positive, `c_e < 1`.
    pub fn validate(&self) -> Result<()> {
        for (m, v) in self.to_array().iter().enumerate() {
            if !v.is_finite() || *v <= 0.0 {
                return Err(Error::InvalidConfig(format!(
                    "parameter {} = {v} must be positive",
                    PARAM_NAMES[m]
                )));
            }
        }
        if self.c_e >= 1.0 {
            return Err(Error::InvalidConfig(format!(
                "c_e = {} must be < 1",
                self.c_e
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParameterBox {
    pub lower: ParameterSet,
    pub upper: ParameterSet,
    pub expected: ParameterSet,
}

impl ParameterBox {
    pub fn new(lower: ParameterSet, upper: ParameterSet, expected: ParameterSet) -> Result<Self> {
        let b = ParameterBox {
            lower,
            upper,
            expected,
        };
        b.validate()?;
        Ok(b)
    }

    /// Biological ranges with the expected values used for regularization.
    pub fn biological() -> Self {
        ParameterBox {
            lower: ParameterSet {
                l: 1.0 / 5032.2,
                nu: 0.012,
                k_n: 0.007,
                s_n: 1.0e3,
                delta_n: 1.0e3,
                gamma2: 0.0841,
                e: 106.66,
                delta: 0.1,
                c_e: 0.2,
            },
            upper: ParameterSet {
                l: 1.0 / 1377.86,
                nu: 0.5,
                k_n: 90.72,
                s_n: 1.0e5,
                delta_n: 1.0e5,
                gamma2: 0.6084,
                e: 1533.3,
                delta: 0.33,
                c_e: 0.611,
            },
            expected: ParameterSet {
                l: 1.0 / 3991.06,
                nu: 0.06,
                k_n: 2.0,
                s_n: 1.0e4,
                delta_n: 8640.0,
                gamma2: 0.1225,
                e: 694.0,
                delta: 0.3,
                c_e: 0.611,
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.lower.validate()?;
        self.upper.validate()?;
        self.expected.validate()?;
        let (lo, up, ex) = (
            self.lower.to_array(),
            self.upper.to_array(),
            self.expected.to_array(),
        );
        for m in 0..N_PARAMS {
            if !(lo[m] <= ex[m] && ex[m] <= up[m]) {
                return Err(Error::InvalidConfig(format!(
                    "box for {} violates lower <= expected <= upper ({} , {}, {})",
                    PARAM_NAMES[m], lo[m], ex[m], up[m]
                )));
            }
        }
        Ok(())
    }

    pub fn contains(&self, p: &ParameterSet) -> bool {
        let (lo, up, v) = (self.lower.to_array(), self.upper.to_array(), p.to_array());
        (0..N_PARAMS).all(|m| lo[m] <= v[m] && v[m] <= up[m])
    }

    pub fn clamp(&self, p: [f64; N_PARAMS]) -> [f64; N_PARAMS] {
        let (lo, up) = (self.lower.to_array(), self.upper.to_array());
        let mut out = p;
        for m in 0..N_PARAMS {
            out[m] = p[m].max(lo[m]).min(up[m]);
        }
        out
    }
}

/// Homogeneous equilibrium `φ̄ = S_n(1−δ) / (S_n + δ(δ_n − S_n))` at which
/// both the proliferation and the nutrient source vanish with `n = δ`.
pub fn equilibrium_volume_fraction(s_n: f64, delta: f64, delta_n: f64) -> Result<f64> {
    let denom = s_n + delta * (delta_n - s_n);
    if !(denom > 0.0) {
        return Err(Error::DegenerateEquilibrium(denom));
    }
    let phi = s_n * (1.0 - delta) / denom;
    if delta == 0.0 {
        log::warn!("delta = 0 puts the equilibrium on the boundary phi = 1");
    }
    Ok(phi)
}

/// Linear-quadratic effective radiotherapy rate `R_eff = α m d + β m d²` (1/day).
pub fn radiotherapy_rate(alpha: f64, beta: f64, fractions: f64, dose: f64) -> f64 {
    alpha * fractions * dose + beta * fractions * dose * dose
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChemoWindow {
    pub start: f64,
    pub end: f64,
    pub rate: f64,
}

/// Piecewise-constant therapy decay; windows are closed intervals in days.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, Default)]
pub struct TherapySchedule {
    pub radio_windows: Vec<[f64; 2]>,
    pub r_eff: f64,
    pub chemo_windows: Vec<ChemoWindow>,
}

impl TherapySchedule {
    pub fn none() -> Self {
        Self::default()
    }

    /// Two chemotherapy cycles at `K_C3`: days 0–8 and 33–38.
    pub fn two_chemo_cycles() -> Self {
        TherapySchedule {
            radio_windows: Vec::new(),
            r_eff: radiotherapy_rate(RT_ALPHA, RT_BETA, RT_FRACTIONS, RT_DOSE),
            chemo_windows: vec![
                ChemoWindow {
                    start: 0.0,
                    end: 8.0,
                    rate: K_C3,
                },
                ChemoWindow {
                    start: 33.0,
                    end: 38.0,
                    rate: K_C3,
                },
            ],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.r_eff >= 0.0 && self.r_eff.is_finite()) {
            return Err(Error::Schedule(format!("R_eff = {} must be >= 0", self.r_eff)));
        }
        let mut radio: Vec<(f64, f64)> = self.radio_windows.iter().map(|w| (w[0], w[1])).collect();
        check_windows("radio", &mut radio)?;
        let mut chemo: Vec<(f64, f64)> = Vec::new();
        for w in &self.chemo_windows {
            if !(w.rate >= 0.0 && w.rate.is_finite()) {
                return Err(Error::Schedule(format!("chemo rate {} must be >= 0", w.rate)));
            }
            chemo.push((w.start, w.end));
        }
        check_windows("chemo", &mut chemo)
    }

    /// `k_T(t) = R_eff·1[t ∈ radio] + Σ_j k_Cj·1[t ∈ chemo_j]`.
    pub fn rate(&self, t: f64) -> f64 {
        let inside = |a: f64, b: f64| a <= t && t <= b;
        let radio = if self.radio_windows.iter().any(|w| inside(w[0], w[1])) {
            self.r_eff
        } else {
            0.0
        };
        let chemo: f64 = self
            .chemo_windows
            .iter()
            .filter(|w| inside(w.start, w.end))
            .map(|w| w.rate)
            .sum();
        radio + chemo
    }
}

fn check_windows(kind: &str, w: &mut [(f64, f64)]) -> Result<()> {
    for &(a, b) in w.iter() {
        if !(a.is_finite() && b.is_finite() && a <= b) {
            return Err(Error::Schedule(format!("{kind} window [{a}, {b}] is malformed")));
        }
    }
    w.sort_by(|x, y| x.0.total_cmp(&y.0));
    for pair in w.windows(2) {
        if pair[1].0 <= pair[0].1 {
            return Err(Error::Schedule(format!(
                "{kind} windows [{}, {}] and [{}, {}] overlap",
                pair[0].0, pair[0].1, pair[1].0, pair[1].1
            )));
        }
    }
    Ok(())
}

/// `k_T(t)` for a schedule.
pub fn therapy_rate(t: f64, schedule: &TherapySchedule) -> f64 {
    schedule.rate(t)
}
