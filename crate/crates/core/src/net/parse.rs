//! Plain-text feeder format.
//!
//! ```text
//! [base]            # optional
//! s_base_kva 1000
//! v_base_kv 4.16
//!
//! [buses]
//! # id kind p_load_kw q_load_kvar [v_set_pu]
//! 0 substation 0 0 1.0
//! 1 der_unity_pf 100 52.5
//!
//! [lines]
//! # id from to r_pu x_pu f_max_kw
//! 1 0 1 0.001 0.002 inf
//!
//! [ders]
//! # bus p_min_kw p_max_kw q_min_kvar q_max_kvar
//! 1 0 100 0 0
//! ```
//!
//! `#` starts a comment anywhere on a line.

use std::path::Path;

use super::{Base, Bus, BusKind, Der, FeederModel, Line, NetError};

#[derive(Clone, Copy, PartialEq)]
enum Section {
    None,
    Base,
    Buses,
    Lines,
    Ders,
}

/// Reads and validates a feeder file.
pub fn load_feeder(path: impl AsRef<Path>) -> Result<FeederModel, NetError> {
    let text = std::fs::read_to_string(path)?;
    parse_feeder(&text)
}

pub fn parse_feeder(text: &str) -> Result<FeederModel, NetError> {
    let mut section = Section::None;
    let mut base = Base::default();
    let mut buses = Vec::new();
    let mut lines = Vec::new();
    let mut ders = Vec::new();

    for (no, raw) in text.lines().enumerate() {
        let line_no = no + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        if let Some(name) = content.strip_prefix('[').and_then(|s| s.strip_suffix(']')) {
            section = match name.trim() {
                "base" => Section::Base,
                "buses" => Section::Buses,
                "lines" => Section::Lines,
                "ders" => Section::Ders,
                other => return Err(perr(line_no, format!("unknown section [{other}]"))),
            };
            continue;
        }
        let fields: Vec<&str> = content.split_whitespace().collect();
        match section {
            Section::None => return Err(perr(line_no, "data before any section header")),
            Section::Base => {
                expect_len(&fields, 2, 2, line_no)?;
                let v = num(fields[1], line_no)?;
                match fields[0] {
                    "s_base_kva" => base.s_base_kva = v,
                    "v_base_kv" => base.v_base_kv = v,
                    other => return Err(perr(line_no, format!("unknown base key {other}"))),
                }
            }
            Section::Buses => {
                expect_len(&fields, 4, 5, line_no)?;
                let kind = match fields[1] {
                    "substation" => BusKind::Substation,
                    "load" => BusKind::Load,
                    "der_unity_pf" => BusKind::DerUnityPf,
                    "der_const_voltage" => BusKind::DerConstVoltage,
                    other => return Err(perr(line_no, format!("unknown bus kind {other}"))),
                };
                buses.push(Bus {
                    id: int(fields[0], line_no)?,
                    kind,
                    p_load_kw: num(fields[2], line_no)?,
                    q_load_kvar: num(fields[3], line_no)?,
                    v_set_pu: fields.get(4).map(|f| num(f, line_no)).transpose()?,
                });
            }
            Section::Lines => {
                expect_len(&fields, 6, 6, line_no)?;
                lines.push(Line {
                    id: int(fields[0], line_no)?,
                    from: int(fields[1], line_no)?,
                    to: int(fields[2], line_no)?,
                    r_pu: num(fields[3], line_no)?,
                    x_pu: num(fields[4], line_no)?,
                    f_max_kw: num(fields[5], line_no)?,
                });
            }
            Section::Ders => {
                expect_len(&fields, 5, 5, line_no)?;
                ders.push(Der {
                    bus: int(fields[0], line_no)?,
                    p_min_kw: num(fields[1], line_no)?,
                    p_max_kw: num(fields[2], line_no)?,
                    q_min_kvar: num(fields[3], line_no)?,
                    q_max_kvar: num(fields[4], line_no)?,
                });
            }
        }
    }
    FeederModel::new(buses, lines, ders, base)
}

fn perr(line: usize, msg: impl Into<String>) -> NetError {
    NetError::Parse {
        line,
        msg: msg.into(),
    }
}

fn expect_len(fields: &[&str], lo: usize, hi: usize, line: usize) -> Result<(), NetError> {
    if fields.len() < lo || fields.len() > hi {
        let want = if lo == hi {
            lo.to_string()
        } else {
            format!("{lo}-{hi}")
        };
        return Err(perr(line, format!("expected {want} fields, found {}", fields.len())));
    }
    Ok(())
}

fn int(s: &str, line: usize) -> Result<usize, NetError> {
    s.parse()
        .map_err(|_| perr(line, format!("expected a non-negative integer, found {s:?}")))
}

fn num(s: &str, line: usize) -> Result<f64, NetError> {
    // `f64::from_str` already accepts "inf" and "infinity".
    let v: f64 = s
        .parse()
        .map_err(|_| perr(line, format!("expected a number, found {s:?}")))?;
    if v.is_nan() {
        return Err(perr(line, "NaN is not allowed"));
    }
    Ok(v)
}

#[cfg(test)]
mod tests {
    use super::*;

    const TWO_BUS: &str = "\
[buses]
0 substation 0 0
1 load 100 0
[lines]
1 0 1 0.01 0.01 inf
";

    #[test]
    fn two_bus_file() {
        let f = parse_feeder(TWO_BUS).unwrap();
        assert_eq!(f.n_buses(), 1);
        assert_eq!(f.n_lines(), 1);
        assert!(f.lines()[0].f_max_kw.is_infinite());
        assert_eq!(f.v_source(), 1.0);
    }

    #[test]
    fn triangle_file_is_not_radial() {
        let text = "\
[buses]
0 substation 0 0
1 load 1 0
2 load 1 0
[lines]
1 0 1 0.01 0.01 inf
2 1 2 0.01 0.01 inf
3 2 0 0.01 0.01 inf
";
        let err = parse_feeder(text).unwrap_err();
        assert!(err.to_string().contains("not radial"), "{err}");
    }

    #[test]
    fn malformed_rows_report_line() {
        let err = parse_feeder("[buses]\n0 substation zero 0\n").unwrap_err();
        assert!(matches!(err, NetError::Parse { line: 2, .. }), "{err}");
        let err = parse_feeder("1 2 3\n").unwrap_err();
        assert!(matches!(err, NetError::Parse { line: 1, .. }), "{err}");
        let err = parse_feeder("[nodes]\n").unwrap_err();
        assert!(matches!(err, NetError::Parse { .. }), "{err}");
    }

    #[test]
    fn const_voltage_needs_setpoint() {
        let text = "\
[buses]
0 substation 0 0
1 der_const_voltage 0 0
[lines]
1 0 1 0.01 0.01 inf
[ders]
1 0 10 -5 5
";
        let err = parse_feeder(text).unwrap_err();
        assert!(err.to_string().contains("set-point"), "{err}");
    }
}
