use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

/// A quantity normalized to its SI base unit. Single values have `lo == hi`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NumericValue {
    pub lo: f64,
    pub hi: f64,
    pub unit: String,
    pub is_range: bool,
}

impl NumericValue {
    pub fn value(&self) -> f64 {
        self.lo
    }
}

enum Factor {
    Mul(f64),
    Div(f64),
    One,
}

impl Factor {
    // Division keeps milli-prefixed values correctly rounded (10 ms → 0.01 s).
    fn apply(&self, v: f64) -> f64 {
        match self {
            Factor::Mul(k) => v * k,
            Factor::Div(k) => v / k,
            Factor::One => v,
        }
    }
}

fn unit_table(unit: &str) -> Option<(&'static str, Factor)> {
    Some(match unit {
        "V" => ("V", Factor::One),
        "kV" => ("V", Factor::Mul(1e3)),
        "mV" => ("V", Factor::Div(1e3)),
        "A" => ("A", Factor::One),
        "mA" => ("A", Factor::Div(1e3)),
        "kA" => ("A", Factor::Mul(1e3)),
        "Hz" => ("Hz", Factor::One),
        "kHz" => ("Hz", Factor::Mul(1e3)),
        "s" => ("s", Factor::One),
        "ms" => ("s", Factor::Div(1e3)),
        "°C" => ("°C", Factor::One),
        "%" => ("", Factor::Div(1e2)),
        "Ω" => ("Ω", Factor::One),
        "kΩ" => ("Ω", Factor::Mul(1e3)),
        "W" => ("W", Factor::One),
        "kW" => ("W", Factor::Mul(1e3)),
        _ => return None,
    })
}

fn quantity_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(
            r"(?x)
            (?P<lo>-?\d+(?:\.\d+)?)
            (?:\s*(?:–|-|\s+to\s+)\s*(?P<hi>-?\d+(?:\.\d+)?))?
            \s*
            (?P<unit>kV|mV|V|kA|mA|A|kHz|Hz|ms|s|°C|%|kΩ|Ω|kW|W)
            (?:$|[^\p{L}\p{N}])",
        )
        .expect("static regex")
    })
}

/// Finds the first `<number> <unit>` or `<number>–<number> <unit>` quantity
/// in `text` and converts it to SI base units. Percentages become
/// dimensionless fractions. Returns `None` when nothing is recognized.
pub fn normalize_numeric(text: &str) -> Option<NumericValue> {
    let caps = quantity_re().captures(text)?;
    let (unit, factor) = unit_table(caps.name("unit")?.as_str())?;
    let lo: f64 = caps.name("lo")?.as_str().parse().ok()?;
    let hi: Option<f64> = caps.name("hi").and_then(|m| m.as_str().parse().ok());
    let lo = factor.apply(lo);
    Some(match hi {
        Some(hi) => {
            let hi = factor.apply(hi);
            NumericValue {
                lo: lo.min(hi),
                hi: lo.max(hi),
                unit: unit.to_string(),
                is_range: true,
            }
        }
        None => NumericValue {
            lo,
            hi: lo,
            unit: unit.to_string(),
            is_range: false,
        },
    })
}
