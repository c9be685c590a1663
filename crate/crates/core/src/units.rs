//! Table-driven UCUM unit normalization.
//!
//! Only the codes listed in [`UNIT_TABLE`] are understood. Each dimension has
//! one canonical code; conversion is `canonical = magnitude * scale + offset`.

use serde::{Deserialize, Serialize};

/// Comparison tolerance for decimal magnitudes.
pub const MAGNITUDE_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Dimension {
    Mass,
    Length,
    Temperature,
    Pressure,
    Glucose,
    Rate,
    Volume,
    Flow,
    Fraction,
    Count,
    InsulinDose,
    Duration,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UnitEntry {
    pub code: &'static str,
    pub dimension: Dimension,
    pub canonical: &'static str,
    pub scale: f64,
    pub offset: f64,
}

const fn lin(code: &'static str, dimension: Dimension, canonical: &'static str, scale: f64) -> UnitEntry {
    UnitEntry { code, dimension, canonical, scale, offset: 0.0 }
}

// 1 mm[Hg] = 133.322387415 Pa. Glucose molar mass 180.156 g/mol.
const MMHG_PA: f64 = 133.322387415;

pub const UNIT_TABLE: &[UnitEntry] = &[
    lin("kg", Dimension::Mass, "kg", 1.0),
    lin("g", Dimension::Mass, "kg", 1e-3),
    lin("mg", Dimension::Mass, "kg", 1e-6),
    lin("[lb_av]", Dimension::Mass, "kg", 0.45359237),
    lin("[oz_av]", Dimension::Mass, "kg", 0.028349523125),
    lin("m", Dimension::Length, "m", 1.0),
    lin("cm", Dimension::Length, "m", 1e-2),
    lin("mm", Dimension::Length, "m", 1e-3),
    lin("km", Dimension::Length, "m", 1e3),
    lin("[in_i]", Dimension::Length, "m", 0.0254),
    lin("[ft_i]", Dimension::Length, "m", 0.3048),
    lin("[mi_i]", Dimension::Length, "m", 1609.344),
    lin("Cel", Dimension::Temperature, "Cel", 1.0),
    UnitEntry { code: "[degF]", dimension: Dimension::Temperature, canonical: "Cel", scale: 5.0 / 9.0, offset: -160.0 / 9.0 },
    UnitEntry { code: "K", dimension: Dimension::Temperature, canonical: "Cel", scale: 1.0, offset: -273.15 },
    lin("mm[Hg]", Dimension::Pressure, "mm[Hg]", 1.0),
    lin("kPa", Dimension::Pressure, "mm[Hg]", 1000.0 / MMHG_PA),
    lin("Pa", Dimension::Pressure, "mm[Hg]", 1.0 / MMHG_PA),
    lin("cm[H2O]", Dimension::Pressure, "mm[Hg]", 98.0665 / MMHG_PA),
    lin("mg/dL", Dimension::Glucose, "mg/dL", 1.0),
    lin("g/L", Dimension::Glucose, "mg/dL", 100.0),
    lin("mmol/L", Dimension::Glucose, "mg/dL", 18.0156),
    lin("/min", Dimension::Rate, "/min", 1.0),
    lin("{beats}/min", Dimension::Rate, "/min", 1.0),
    lin("{breaths}/min", Dimension::Rate, "/min", 1.0),
    lin("/s", Dimension::Rate, "/min", 60.0),
    lin("/h", Dimension::Rate, "/min", 1.0 / 60.0),
    lin("L", Dimension::Volume, "L", 1.0),
    lin("mL", Dimension::Volume, "L", 1e-3),
    lin("L/min", Dimension::Flow, "L/min", 1.0),
    lin("L/s", Dimension::Flow, "L/min", 60.0),
    lin("%", Dimension::Fraction, "%", 1.0),
    lin("{steps}", Dimension::Count, "{steps}", 1.0),
    lin("U", Dimension::InsulinDose, "U", 1.0),
    lin("s", Dimension::Duration, "s", 1.0),
    lin("ms", Dimension::Duration, "s", 1e-3),
    lin("min", Dimension::Duration, "s", 60.0),
    lin("h", Dimension::Duration, "s", 3600.0),
];

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum UnitError {
    #[error("unsupported unit {0:?}")]
    Unsupported(String),
}

pub fn lookup(code: &str) -> Option<&'static UnitEntry> {
    UNIT_TABLE.iter().find(|e| e.code == code)
}

/// Expresses `magnitude` in the canonical unit of its dimension.
pub fn normalize_unit(magnitude: f64, unit: &str) -> Result<(f64, &'static str), UnitError> {
    let entry = lookup(unit).ok_or_else(|| UnitError::Unsupported(unit.to_string()))?;
    if entry.code == entry.canonical {
        return Ok((magnitude, entry.canonical));
    }
    Ok((magnitude * entry.scale + entry.offset, entry.canonical))
}

/// Syntactic check for a UCUM code: printable ASCII without spaces, with
/// balanced, non-nested `[...]` and `{...}` groups.
pub fn is_valid_ucum_syntax(code: &str) -> bool {
    if code.is_empty() {
        return false;
    }
    let mut open: Option<u8> = None;
    for b in code.bytes() {
        if !(0x21..=0x7e).contains(&b) {
            return false;
        }
        match (open, b) {
            (None, b'[') => open = Some(b']'),
            (None, b'{') => open = Some(b'}'),
            (None, b']' | b'}') => return false,
            (Some(close), c) if c == close => open = None,
            (Some(_), b'[' | b'{') => return false,
            _ => {}
        }
    }
    open.is_none()
}

pub fn approx_eq(a: f64, b: f64) -> bool {
    (a - b).abs() <= MAGNITUDE_TOLERANCE * a.abs().max(b.abs()).max(1.0)
}
