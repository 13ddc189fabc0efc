//! Conditioning attributes: the 14 named scalars a generated volume is
//! conditioned on, plus their population statistics for z-normalization.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Number of conditioning attributes.
pub const NUM_ATTRIBUTES: usize = 14;

/// Attribute names, in canonical order. This order is the layout of every
/// raw/normalized attribute array in the crate.
pub const ATTRIBUTE_NAMES: [&str; NUM_ATTRIBUTES] = [
    "age",
    "sex",
    "bmi",
    "phase",
    "angle",
    "depth",
    "lv_ed_vol",
    "lv_es_vol",
    "lv_ef",
    "rv_ed_vol",
    "rv_es_vol",
    "rv_ef",
    "myo_es_thickness",
    "myo_ed_thickness",
];

#[derive(Debug, Error, PartialEq)]
pub enum ContextError {
    #[error("unknown attribute `{0}`")]
    UnknownAttribute(String),
    #[error("attribute `{name}` has non-positive std {std}")]
    NonPositiveStd { name: String, std: f64 },
    #[error("ejection fraction inconsistent: {side} EF {ef:.4} vs volumes ({ed:.4}, {es:.4})")]
    EfInconsistent { side: &'static str, ef: f64, ed: f64, es: f64 },
    #[error("phase must be 0 (ED) or 1 (ES), got {0}")]
    BadPhase(f64),
}

/// Cardiac phase of a single volume.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Phase {
    /// End-diastole (phase attribute = 0).
    Ed,
    /// End-systole (phase attribute = 1).
    Es,
}

impl Phase {
    pub fn as_f64(self) -> f64 {
        match self {
            Phase::Ed => 0.0,
            Phase::Es => 1.0,
        }
    }

    pub fn from_f64(v: f64) -> Result<Self, ContextError> {
        if v == 0.0 {
            Ok(Phase::Ed)
        } else if v == 1.0 {
            Ok(Phase::Es)
        } else {
            Err(ContextError::BadPhase(v))
        }
    }
}

/// The 14 conditioning attributes of one volume.
///
/// Volumes are in mL, thicknesses in mm, age in years, angle in degrees,
/// ejection fractions in percent. `depth` counts non-padded slices.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ContextVector {
    pub age: f64,
    pub sex: f64,
    pub bmi: f64,
    pub phase: f64,
    pub angle: f64,
    pub depth: f64,
    pub lv_ed_vol: f64,
    pub lv_es_vol: f64,
    pub lv_ef: f64,
    pub rv_ed_vol: f64,
    pub rv_es_vol: f64,
    pub rv_ef: f64,
    pub myo_es_thickness: f64,
    pub myo_ed_thickness: f64,
}

impl ContextVector {
    /// All-zero attributes; a valid ED record with degenerate volumes.
    pub fn zeroed() -> Self {
        Self::from_raw([0.0; NUM_ATTRIBUTES])
    }

    /// Raw attribute values in canonical order.
    pub fn to_raw(&self) -> [f64; NUM_ATTRIBUTES] {
        [
            self.age,
            self.sex,
            self.bmi,
            self.phase,
            self.angle,
            self.depth,
            self.lv_ed_vol,
            self.lv_es_vol,
            self.lv_ef,
            self.rv_ed_vol,
            self.rv_es_vol,
            self.rv_ef,
            self.myo_es_thickness,
            self.myo_ed_thickness,
        ]
    }

    pub fn from_raw(raw: [f64; NUM_ATTRIBUTES]) -> Self {
        Self {
            age: raw[0],
            sex: raw[1],
            bmi: raw[2],
            phase: raw[3],
            angle: raw[4],
            depth: raw[5],
            lv_ed_vol: raw[6],
            lv_es_vol: raw[7],
            lv_ef: raw[8],
            rv_ed_vol: raw[9],
            rv_es_vol: raw[10],
            rv_ef: raw[11],
            myo_es_thickness: raw[12],
            myo_ed_thickness: raw[13],
        }
    }

    pub fn phase_kind(&self) -> Result<Phase, ContextError> {
        Phase::from_f64(self.phase)
    }

    /// Ejection fraction from end-diastolic and end-systolic volumes.
    pub fn ef_from_volumes(ed: f64, es: f64) -> f64 {
        100.0 * (ed - es) / ed
    }

    /// Checks EF consistency (1e-6 relative) and phase validity.
    pub fn validate(&self) -> Result<(), ContextError> {
        self.phase_kind()?;
        let lv = Self::ef_from_volumes(self.lv_ed_vol, self.lv_es_vol);
        if (lv - self.lv_ef).abs() > 1e-6 * lv.abs().max(1.0) {
            return Err(ContextError::EfInconsistent {
                side: "LV",
                ef: self.lv_ef,
                ed: self.lv_ed_vol,
                es: self.lv_es_vol,
            });
        }
        let rv = Self::ef_from_volumes(self.rv_ed_vol, self.rv_es_vol);
        if (rv - self.rv_ef).abs() > 1e-6 * rv.abs().max(1.0) {
            return Err(ContextError::EfInconsistent {
                side: "RV",
                ef: self.rv_ef,
                ed: self.rv_ed_vol,
                es: self.rv_es_vol,
            });
        }
        Ok(())
    }

    /// The cavity volume attributes for this volume's phase: `(lv, rv)`.
    pub fn phase_volumes(&self) -> Result<(f64, f64), ContextError> {
        Ok(match self.phase_kind()? {
            Phase::Ed => (self.lv_ed_vol, self.rv_ed_vol),
            Phase::Es => (self.lv_es_vol, self.rv_es_vol),
        })
    }

    /// The wall-thickness attribute for this volume's phase.
    pub fn phase_thickness(&self) -> Result<f64, ContextError> {
        Ok(match self.phase_kind()? {
            Phase::Ed => self.myo_ed_thickness,
            Phase::Es => self.myo_es_thickness,
        })
    }
}

/// Per-attribute (mean, std) pairs used for z-normalization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributeStats {
    pub mean: [f64; NUM_ATTRIBUTES],
    pub std: [f64; NUM_ATTRIBUTES],
}

impl AttributeStats {
    pub fn new(mean: [f64; NUM_ATTRIBUTES], std: [f64; NUM_ATTRIBUTES]) -> Result<Self, ContextError> {
        for (i, &s) in std.iter().enumerate() {
            if s <= 0.0 {
                return Err(ContextError::NonPositiveStd { name: ATTRIBUTE_NAMES[i].to_string(), std: s });
            }
        }
        Ok(Self { mean, std })
    }

    /// Population statistics of the UK Biobank short-axis exams this model
    /// family is conditioned on.
    pub fn population() -> Self {
        Self {
            mean: [
                54.88, 0.48, 26.52, 0.50, -0.14, 10.82, 155.70, 67.25, 57.22, 146.90, 60.02, 59.55,
                8.86, 5.70,
            ],
            std: [7.58, 0.50, 4.39, 0.50, 26.12, 1.19, 37.13, 21.17, 6.39, 33.82, 19.32, 6.25, 1.21, 0.78],
        }
    }

    pub fn index_of(name: &str) -> Result<usize, ContextError> {
        ATTRIBUTE_NAMES
            .iter()
            .position(|&n| n == name)
            .ok_or_else(|| ContextError::UnknownAttribute(name.to_string()))
    }
}

/// Z-scores each attribute: `(raw - mean) / std`.
pub fn normalize_context(c: &ContextVector, stats: &AttributeStats) -> [f64; NUM_ATTRIBUTES] {
    let raw = c.to_raw();
    let mut out = [0.0; NUM_ATTRIBUTES];
    for i in 0..NUM_ATTRIBUTES {
        out[i] = (raw[i] - stats.mean[i]) / stats.std[i];
    }
    out
}

/// Inverse of [`normalize_context`].
pub fn denormalize_context(z: &[f64; NUM_ATTRIBUTES], stats: &AttributeStats) -> ContextVector {
    let mut raw = [0.0; NUM_ATTRIBUTES];
    for i in 0..NUM_ATTRIBUTES {
        raw[i] = z[i] * stats.std[i] + stats.mean[i];
    }
    ContextVector::from_raw(raw)
}
