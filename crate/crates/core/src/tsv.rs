//! Small helpers for the tab-separated artifact formats.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub(crate) fn read_to_string(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

pub(crate) fn write_string(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

/// Non-empty lines with their 1-based line numbers; a trailing `\r` is dropped.
pub(crate) fn lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.strip_suffix('\r').unwrap_or(l)))
        .filter(|(_, l)| !l.trim().is_empty())
}

/// Checks that `header` starts with exactly the `expected` column names.
pub(crate) fn expect_header(file: &str, header: Option<&str>, expected: &[&str]) -> Result<()> {
    let header = header.ok_or_else(|| Error::parse(file, 1, "missing header row"))?;
    let found: Vec<&str> = header.split('\t').collect();
    for (position, name) in expected.iter().enumerate() {
        let got = found.get(position).copied().unwrap_or("");
        if got != *name {
            return Err(Error::SchemaMismatch {
                file: file.to_string(),
                position: position + 1,
                expected: name.to_string(),
                found: got.to_string(),
            });
        }
    }
    if found.len() != expected.len() {
        return Err(Error::parse(
            file,
            1,
            format!("expected {} columns, found {}", expected.len(), found.len()),
        ));
    }
    Ok(())
}

pub(crate) fn fields<'a>(file: &str, line_no: usize, line: &'a str, n: usize) -> Result<Vec<&'a str>> {
    let f: Vec<&str> = line.split('\t').collect();
    if f.len() != n {
        return Err(Error::parse(
            file,
            line_no,
            format!("expected {n} fields, found {}", f.len()),
        ));
    }
    Ok(f)
}

pub(crate) fn parse_f64(file: &str, line_no: usize, s: &str) -> Result<f64> {
    s.trim()
        .parse::<f64>()
        .map_err(|_| Error::parse(file, line_no, format!("not a number: `{s}`")))
}

pub(crate) fn parse_usize(file: &str, line_no: usize, s: &str) -> Result<usize> {
    s.trim()
        .parse::<usize>()
        .map_err(|_| Error::parse(file, line_no, format!("not a non-negative integer: `{s}`")))
}

/// Formats with 10 significant digits, `%g` style.
pub fn fmt_sig(x: f64) -> String {
    if x == 0.0 {
        return "0".to_string();
    }
    if x.is_nan() {
        return "NaN".to_string();
    }
    if x.is_infinite() {
        return if x > 0.0 { "inf" } else { "-inf" }.to_string();
    }
    let sci = format!("{:.9e}", x);
    let (mantissa, exp) = sci.split_once('e').expect("scientific format");
    let exp: i32 = exp.parse().expect("exponent");
    if (-5..10).contains(&exp) {
        let rounded: f64 = sci.parse().expect("round trip");
        let decimals = (9 - exp).max(0) as usize;
        let fixed = format!("{:.*}", decimals, rounded);
        trim_zeros(&fixed).to_string()
    } else {
        format!("{}e{}", trim_zeros(mantissa), exp)
    }
}

fn trim_zeros(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn significant_digit_formatting() {
        assert_eq!(fmt_sig(0.5), "0.5");
        assert_eq!(fmt_sig(-2.0), "-2");
        assert_eq!(fmt_sig(1.0 / 3.0), "0.3333333333");
        assert_eq!(fmt_sig(1.23456789012e-7), "1.23456789e-7");
        assert_eq!(fmt_sig(12345678901.0), "1.23456789e10");
        assert_eq!(fmt_sig(0.0001), "0.0001");
        assert_eq!(fmt_sig(f64::INFINITY), "inf");
    }

    #[test]
    fn formatting_keeps_ten_digits() {
        for &x in &[std::f64::consts::PI, 1e-300, -7.123456789123e5, 0.999999999951] {
            let back: f64 = fmt_sig(x).parse().unwrap();
            assert!((back - x).abs() <= 1e-9 * x.abs(), "{x} -> {}", fmt_sig(x));
        }
    }

    #[test]
    fn header_mismatch_names_column() {
        let err = expect_header("f.tsv", Some("gene\tscore"), &["gene", "importance"]).unwrap_err();
        match err {
            Error::SchemaMismatch { position, expected, .. } => {
                assert_eq!(position, 2);
                assert_eq!(expected, "importance");
            }
            other => panic!("unexpected {other:?}"),
        }
    }
}
