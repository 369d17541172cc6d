//! Unit-suffixed quantity strings such as `-1.11um`, `160us` or `9.9e4T/m`.

use crate::error::{Error, Result};

/// Physical dimension a configuration value must carry.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dimension {
    Length,
    Time,
    Mass,
    Field,
    Gradient,
    Density,
    Susceptibility,
    Acceleration,
    Velocity,
    TimeSquared,
}

impl Dimension {
    /// Accepted suffixes and their factor to SI. The first entry is the SI unit.
    fn units(self) -> &'static [(&'static str, f64)] {
        match self {
            Dimension::Length => &[("m", 1.0), ("mm", 1e-3), ("um", 1e-6), ("μm", 1e-6), ("nm", 1e-9)],
            Dimension::Time => &[("s", 1.0), ("ms", 1e-3), ("us", 1e-6), ("μs", 1e-6), ("ns", 1e-9)],
            Dimension::Mass => &[("kg", 1.0), ("g", 1e-3)],
            Dimension::Field => &[("T", 1.0), ("mT", 1e-3), ("uT", 1e-6), ("G", 1e-4)],
            Dimension::Gradient => &[("T/m", 1.0), ("T/mm", 1e3), ("T/um", 1e6)],
            Dimension::Density => &[("kg/m3", 1.0), ("g/cm3", 1e3)],
            Dimension::Susceptibility => &[("m3/kg", 1.0)],
            Dimension::Acceleration => &[("m/s2", 1.0)],
            Dimension::Velocity => &[("m/s", 1.0), ("um/s", 1e-6), ("nm/s", 1e-9)],
            Dimension::TimeSquared => &[("s2", 1.0)],
        }
    }

    pub fn si_unit(self) -> &'static str {
        self.units()[0].0
    }
}

/// Parse `<number><unit>` into SI. Whitespace between the two is allowed.
pub fn parse_quantity(raw: &str, dim: Dimension) -> Result<f64> {
    let s = raw.trim();
    // Longest numeric prefix; scanning from the right keeps `1e-6m` intact.
    let split = (1..=s.len())
        .rev()
        .filter(|&i| s.is_char_boundary(i))
        .find(|&i| s[..i].trim_end().parse::<f64>().is_ok());
    let Some(i) = split else {
        return Err(Error::Parse(format!("`{raw}` does not start with a number")));
    };
    let value: f64 = s[..i].trim_end().parse().expect("checked above");
    let unit = s[i..].trim();
    if unit.is_empty() {
        return Err(Error::Parse(format!(
            "`{raw}` has no unit; expected one of {}",
            unit_list(dim)
        )));
    }
    match dim.units().iter().find(|(u, _)| *u == unit) {
        Some((_, factor)) => Ok(value * factor),
        None => Err(Error::Parse(format!(
            "`{raw}`: unit `{unit}` is not one of {}",
            unit_list(dim)
        ))),
    }
}

fn unit_list(dim: Dimension) -> String {
    dim.units().iter().map(|(u, _)| *u).collect::<Vec<_>>().join(", ")
}

/// SI value with its SI suffix; parses back to the identical `f64`.
pub fn format_quantity(value: f64, dim: Dimension) -> String {
    format!("{value:e}{}", dim.si_unit())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_prefixed_units() {
        assert_eq!(parse_quantity("-1.11um", Dimension::Length).unwrap(), -1.11e-6);
        assert_eq!(parse_quantity("160 us", Dimension::Time).unwrap(), 160.0 * 1e-6);
        assert_eq!(parse_quantity("1e-6m", Dimension::Length).unwrap(), 1e-6);
        assert_eq!(parse_quantity("9.9e4T/m", Dimension::Gradient).unwrap(), 9.9e4);
        assert_eq!(
            parse_quantity("-6.2e-9m3/kg", Dimension::Susceptibility).unwrap(),
            -6.2e-9
        );
        assert_eq!(parse_quantity("20μm", Dimension::Length).unwrap(), 20.0 * 1e-6);
    }

    #[test]
    fn rejects_missing_or_wrong_units() {
        assert!(matches!(parse_quantity("1.5", Dimension::Length), Err(Error::Parse(_))));
        assert!(matches!(
            parse_quantity("1.5T", Dimension::Length),
            Err(Error::Parse(_))
        ));
        assert!(matches!(parse_quantity("um", Dimension::Length), Err(Error::Parse(_))));
    }

    #[test]
    fn format_round_trips() {
        for v in [-1.11e-6, 3.8e-19, 98831.46327, 0.1 + 0.2] {
            let s = format_quantity(v, Dimension::Length);
            assert_eq!(parse_quantity(&s, Dimension::Length).unwrap(), v);
        }
    }
}
