//! Numeric token scanning and the laboratory unit normalization table.
//!
//! | analyte    | canonical        | accepted                                 |
//! |------------|------------------|------------------------------------------|
//! | PSA        | ng/mL            | ng/mL, µg/L, ug/L                        |
//! | hemoglobin | g/dL             | g/dL, g/L (÷10)                          |
//! | ALP, LDH   | U/L              | U/L, IU/L, µkat/L (×60)                  |
//! | eGFR       | mL/min/1.73m²    | mL/min/1.73m², mL/min/1.73m2, mL/min     |
//! | creatinine | (not stored)     | µmol/L, umol/L, mg/dL                    |
//!
//! A value with no unit token is read in the canonical unit. A value with an
//! unrecognized unit is dropped.

use alloc::string::String;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Analyte {
    Psa,
    Hemoglobin,
    Enzyme,
    Egfr,
    Creatinine,
    Unitless,
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Scale {
    Identity,
    Divide(f64),
    Multiply(f64),
}

fn unit_scale(analyte: Analyte, unit: &str) -> Option<Scale> {
    let u = unit.to_lowercase();
    let u = u.trim_end_matches(['.', ',', ';', ')']);
    let ok = match analyte {
        Analyte::Psa => matches!(u, "ng/ml" | "µg/l" | "μg/l" | "ug/l"),
        Analyte::Hemoglobin => match u {
            "g/dl" => true,
            "g/l" => return Some(Scale::Divide(10.0)),
            _ => false,
        },
        Analyte::Enzyme => match u {
            "u/l" | "iu/l" => true,
            "µkat/l" | "μkat/l" | "ukat/l" => return Some(Scale::Multiply(60.0)),
            _ => false,
        },
        Analyte::Egfr => matches!(
            u,
            "ml/min/1.73m²" | "ml/min/1.73m2" | "ml/min/1.73 m2" | "ml/min/1.73 m²" | "ml/min"
        ),
        Analyte::Creatinine => matches!(u, "µmol/l" | "μmol/l" | "umol/l" | "mg/dl"),
        Analyte::Unitless => false,
    };
    ok.then_some(Scale::Identity)
}

/// Reads a leading decimal number from `s`, returning it and the rest.
pub fn leading_number(s: &str) -> Option<(f64, &str)> {
    let s = s.trim_start();
    let end = s
        .char_indices()
        .take_while(|(i, c)| c.is_ascii_digit() || (*c == '.' && *i > 0))
        .map(|(i, c)| i + c.len_utf8())
        .last()?;
    // a trailing '.' is sentence punctuation, not part of the number
    let num = s[..end].trim_end_matches('.');
    let rest = &s[num.len()..];
    num.parse::<f64>().ok().map(|v| (v, rest))
}

/// Parses `"<number> [unit]"` and converts into the analyte's canonical unit.
///
/// Returns `None` when there is no number or the unit is not in the table.
pub fn parse_quantity(analyte: Analyte, text: &str) -> Option<f64> {
    let (value, rest) = leading_number(text)?;
    let unit = rest.trim_start();
    let token = unit_token(unit);
    if token.is_empty() {
        return (analyte != Analyte::Creatinine).then_some(value);
    }
    if analyte == Analyte::Unitless {
        return None;
    }
    match unit_scale(analyte, token)? {
        Scale::Identity => Some(value),
        Scale::Divide(d) => Some(value / d),
        Scale::Multiply(m) => Some(value * m),
    }
}

/// The unit-like token at the start of `s`: a run containing a '/' (with an
/// optional "1.73 m2" tail), or empty when the next word is not a unit.
fn unit_token(s: &str) -> &str {
    let first_end = s.find(char::is_whitespace).unwrap_or(s.len());
    let first = &s[..first_end];
    if !first.contains('/') {
        return "";
    }
    // "mL/min/1.73 m2" is written with a space by some labs
    if first.to_lowercase().ends_with("/1.73") {
        let tail = s[first_end..].trim_start();
        let tail_end = tail.find(char::is_whitespace).unwrap_or(tail.len());
        let consumed = s.len() - tail.len() + tail_end;
        return &s[..consumed];
    }
    first
}

/// Formats a one-decimal value the way rendered documents print it.
pub fn fmt1(v: f64) -> String {
    alloc::format!("{v:.1}")
}
