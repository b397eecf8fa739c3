//! CSV and JSON emission.
//!
//! Every report becomes rows `(t, statistic, value, se, pass)`; floats are written with 17
//! significant digits so parsing the file gives back the exact values. NaN is refused.

use crate::error::{CliError, Result};
use evolab::ConvergenceReport;
use serde::{Deserialize, Serialize};

pub const HEADER: [&str; 5] = ["t", "statistic", "value", "se", "pass"];

/// One CSV row. `t` and `se` are empty for time-less rows (constants, verdicts).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Row {
    pub t: Option<f64>,
    pub statistic: String,
    pub value: f64,
    pub se: Option<f64>,
    pub pass: Option<bool>,
}

impl Row {
    pub fn at(t: f64, statistic: impl Into<String>, value: f64, se: f64) -> Self {
        Self { t: Some(t), statistic: statistic.into(), value, se: Some(se), pass: None }
    }

    pub fn constant(statistic: impl Into<String>, value: f64) -> Self {
        Self { t: None, statistic: statistic.into(), value, se: None, pass: None }
    }

    pub fn verdict(statistic: impl Into<String>, observed: f64, pass: bool) -> Self {
        Self { t: None, statistic: statistic.into(), value: observed, se: None, pass: Some(pass) }
    }
}

/// Series rows in t order, then constants, then verdicts.
pub fn report_rows(r: &ConvergenceReport, prefix: &str) -> Vec<Row> {
    let mut rows = Vec::new();
    for s in &r.series {
        for (i, t) in r.t_grid.iter().enumerate() {
            rows.push(Row::at(*t, format!("{prefix}{}", s.statistic), s.values[i], s.se[i]));
        }
    }
    for (k, v) in &r.constants {
        rows.push(Row::constant(format!("{prefix}const:{k}"), *v));
    }
    for v in &r.verdicts {
        rows.push(Row::verdict(format!("{prefix}verdict:{}", v.tolerance), v.observed, v.pass));
    }
    rows
}

fn fmt(v: f64) -> String {
    format!("{v:.16e}")
}

fn check(v: f64, row: &Row, field: &str) -> Result<()> {
    if v.is_nan() {
        return Err(CliError::Emit {
            what: format!("row '{}'", row.statistic),
            message: format!("{field} is NaN"),
        });
    }
    Ok(())
}

pub fn write_csv(rows: &[Row]) -> Result<Vec<u8>> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(Vec::new());
    let emit_err = |e: csv::Error| CliError::Emit { what: "csv".into(), message: e.to_string() };
    w.write_record(HEADER).map_err(emit_err)?;
    for r in rows {
        check(r.value, r, "value")?;
        if let Some(t) = r.t {
            check(t, r, "t")?;
        }
        if let Some(se) = r.se {
            check(se, r, "se")?;
        }
        w.write_record([
            r.t.map(fmt).unwrap_or_default(),
            r.statistic.clone(),
            fmt(r.value),
            r.se.map(fmt).unwrap_or_default(),
            r.pass.map(|p| p.to_string()).unwrap_or_default(),
        ])
        .map_err(emit_err)?;
    }
    w.into_inner().map_err(|e| CliError::Emit { what: "csv".into(), message: e.to_string() })
}

pub fn parse_csv(bytes: &[u8]) -> Result<Vec<Row>> {
    let bad = |m: String| CliError::Emit { what: "csv".into(), message: m };
    let mut r = csv::ReaderBuilder::new().from_reader(bytes);
    let header = r.headers().map_err(|e| bad(e.to_string()))?;
    if header.iter().collect::<Vec<_>>() != HEADER {
        return Err(bad(format!("unexpected header {header:?}")));
    }
    let num = |s: &str| -> Result<Option<f64>> {
        if s.is_empty() {
            Ok(None)
        } else {
            s.parse().map(Some).map_err(|e| bad(format!("'{s}': {e}")))
        }
    };
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| bad(e.to_string()))?;
        rows.push(Row {
            t: num(&rec[0])?,
            statistic: rec[1].to_string(),
            value: num(&rec[2])?.ok_or_else(|| bad("missing value".into()))?,
            se: num(&rec[3])?,
            pass: match &rec[4] {
                "" => None,
                "true" => Some(true),
                "false" => Some(false),
                other => return Err(bad(format!("bad pass flag '{other}'"))),
            },
        });
    }
    Ok(rows)
}

/// Pretty JSON. The CSV is the exact contract; JSON is the human summary (serde_json
/// writes infinities as `null`).
pub fn write_json<T: Serialize>(value: &T, what: &str) -> Result<Vec<u8>> {
    let mut out = serde_json::to_vec_pretty(value).map_err(|e| CliError::Emit { what: what.into(), message: e.to_string() })?;
    out.push(b'\n');
    Ok(out)
}

/// JSON of a report, refusing NaN anywhere in it.
pub fn write_report_json(r: &ConvergenceReport) -> Result<Vec<u8>> {
    let nan = r.t_grid.iter().any(|v| v.is_nan())
        || r.series.iter().any(|s| s.values.iter().chain(&s.se).any(|v| v.is_nan()))
        || r.constants.values().any(|v| v.is_nan())
        || r.verdicts.iter().any(|v| v.observed.is_nan() || v.threshold.is_nan());
    if nan {
        return Err(CliError::Emit { what: format!("report '{}'", r.experiment), message: "contains NaN".into() });
    }
    write_json(r, "report")
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn empty_report_gives_header_only() {
        let bytes = write_csv(&[]).unwrap();
        assert_eq!(String::from_utf8(bytes.clone()).unwrap(), "t,statistic,value,se,pass\n");
        assert!(parse_csv(&bytes).unwrap().is_empty());
    }

    #[test]
    fn nan_is_refused() {
        let err = write_csv(&[Row::at(1.0, "h", f64::NAN, 0.0)]).unwrap_err();
        assert!(err.to_string().contains("NaN"));
        let mut r = ConvergenceReport::new("x", vec![1.0]);
        r.constants.insert("c".into(), f64::NAN);
        assert!(write_report_json(&r).is_err());
    }

    #[test]
    fn report_rows_cover_series_constants_and_verdicts() {
        let mut r = ConvergenceReport::new("x", vec![1.0, 2.0]);
        r.push_series("h", vec![0.5, 0.25], vec![0.01, 0.02]).unwrap();
        r.constants.insert("slope".into(), -0.5);
        r.judge("decay", "decay_ratio", 0.6, 0.5, false);
        let rows = report_rows(&r, "");
        assert_eq!(rows.len(), 4);
        assert_eq!(rows[3], Row::verdict("verdict:decay_ratio", 0.5, true));
        assert_eq!(parse_csv(&write_csv(&rows).unwrap()).unwrap(), rows);
    }

    fn finite() -> impl Strategy<Value = f64> {
        prop_oneof![any::<f64>().prop_filter("finite", |v| v.is_finite()), Just(f64::INFINITY), Just(0.0), Just(-0.0), Just(f64::MIN_POSITIVE)]
    }

    proptest! {
        #[test]
        fn rows_round_trip_bit_exactly(
            rows in proptest::collection::vec(
                (proptest::option::of(finite()), "[a-z:,\" ()0-9.-]{0,12}", finite(), proptest::option::of(finite()), proptest::option::of(any::<bool>())),
                0..20,
            )
        ) {
            let rows: Vec<Row> = rows.into_iter().map(|(t, statistic, value, se, pass)| Row { t, statistic, value, se, pass }).collect();
            let back = parse_csv(&write_csv(&rows).unwrap()).unwrap();
            prop_assert_eq!(back.len(), rows.len());
            for (a, b) in rows.iter().zip(&back) {
                prop_assert_eq!(a.t.map(f64::to_bits), b.t.map(f64::to_bits));
                prop_assert_eq!(a.value.to_bits(), b.value.to_bits());
                prop_assert_eq!(a.se.map(f64::to_bits), b.se.map(f64::to_bits));
                prop_assert_eq!(&a.statistic, &b.statistic);
                prop_assert_eq!(a.pass, b.pass);
            }
        }
    }
}
