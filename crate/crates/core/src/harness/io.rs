use std::io::{self, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::ser::{Formatter, PrettyFormatter};

use crate::attention::{AnchorMask, Heatmap, ValidationRecord};
use crate::error::{Result, VliError};

/// `%.12g`-style rendering: 12 significant digits, trailing zeros trimmed,
/// exponent form outside `[1e-4, 1e12)`.
pub fn format_f64(v: f64) -> String {
    if v == 0.0 {
        return if v.is_sign_negative() {
            "-0".into()
        } else {
            "0".into()
        };
    }
    if !v.is_finite() {
        return format!("{v}");
    }
    let sci = format!("{v:.11e}");
    let (mantissa, exp) = sci.split_once('e').expect("exponent form");
    let exp: i32 = exp.parse().expect("integer exponent");
    if !(-4..12).contains(&exp) {
        let m = trim_fraction(mantissa);
        let sign = if exp < 0 { '-' } else { '+' };
        return format!("{m}e{sign}{:02}", exp.abs());
    }
    let decimals = (11 - exp).max(0) as usize;
    trim_fraction(&format!("{v:.decimals$}")).to_string()
}

fn trim_fraction(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

/// Pretty JSON whose floats go through [`format_f64`].
struct FixedFloats {
    inner: PrettyFormatter<'static>,
}

impl Formatter for FixedFloats {
    fn write_f64<W: ?Sized + Write>(&mut self, w: &mut W, value: f64) -> io::Result<()> {
        w.write_all(format_f64(value).as_bytes())
    }

    fn write_f32<W: ?Sized + Write>(&mut self, w: &mut W, value: f32) -> io::Result<()> {
        self.write_f64(w, f64::from(value))
    }

    fn begin_array<W: ?Sized + Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.inner.begin_array(w)
    }

    fn end_array<W: ?Sized + Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.inner.end_array(w)
    }

    fn begin_array_value<W: ?Sized + Write>(&mut self, w: &mut W, first: bool) -> io::Result<()> {
        self.inner.begin_array_value(w, first)
    }

    fn end_array_value<W: ?Sized + Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.inner.end_array_value(w)
    }

    fn begin_object<W: ?Sized + Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.inner.begin_object(w)
    }

    fn end_object<W: ?Sized + Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.inner.end_object(w)
    }

    fn begin_object_key<W: ?Sized + Write>(&mut self, w: &mut W, first: bool) -> io::Result<()> {
        self.inner.begin_object_key(w, first)
    }

    fn begin_object_value<W: ?Sized + Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.inner.begin_object_value(w)
    }

    fn end_object_value<W: ?Sized + Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.inner.end_object_value(w)
    }
}

/// Deterministic JSON text: declaration-order keys, 12-significant-digit floats.
pub fn to_json_string<T: Serialize>(value: &T) -> Result<String> {
    let mut buf = Vec::new();
    let mut ser = serde_json::Serializer::with_formatter(
        &mut buf,
        FixedFloats {
            inner: PrettyFormatter::new(),
        },
    );
    value.serialize(&mut ser)?;
    buf.push(b'\n');
    Ok(String::from_utf8(buf).expect("serde_json emits UTF-8"))
}

pub fn write_report<T: Serialize>(report: &T, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, to_json_string(report)?)?;
    Ok(())
}

pub fn read_report<T: DeserializeOwned>(path: impl AsRef<Path>) -> Result<T> {
    Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
}

fn grid_csv(values: &[String], cols: usize) -> String {
    let mut out = String::new();
    for row in values.chunks(cols) {
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}

/// Heatmap laid out as `rows` lines of `cols` comma-separated values.
pub fn heatmap_csv(heat: &Heatmap, rows: usize, cols: usize) -> Result<String> {
    if rows * cols != heat.len() || cols == 0 {
        return Err(VliError::shape(format!(
            "heatmap of {} does not fill a {rows}x{cols} grid",
            heat.len()
        )));
    }
    let cells: Vec<String> = heat.weights.iter().map(|&w| format_f64(w)).collect();
    Ok(grid_csv(&cells, cols))
}

pub fn write_heatmap_csv(
    heat: &Heatmap,
    rows: usize,
    cols: usize,
    path: impl AsRef<Path>,
) -> Result<()> {
    std::fs::write(path, heatmap_csv(heat, rows, cols)?)?;
    Ok(())
}

/// Anchor mask as a 0/1 grid.
pub fn mask_csv(mask: &AnchorMask, rows: usize, cols: usize) -> Result<String> {
    if rows * cols != mask.len() || cols == 0 {
        return Err(VliError::shape(format!(
            "mask of {} does not fill a {rows}x{cols} grid",
            mask.len()
        )));
    }
    let cells: Vec<String> = mask.bits.iter().map(|&b| u8::from(b).to_string()).collect();
    Ok(grid_csv(&cells, cols))
}

/// Parse a JSON-lines validation set. Blank lines are skipped; line numbers
/// in errors are 1-based.
pub fn parse_validation_set(text: &str) -> Result<Vec<ValidationRecord>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |reason: String| VliError::Parse {
            line: i + 1,
            reason,
        };
        let rec: ValidationRecord =
            serde_json::from_str(line).map_err(|e| parse_err(e.to_string()))?;
        rec.validate(rec.image.n_patches())
            .map_err(|e| parse_err(e.to_string()))?;
        out.push(rec);
    }
    Ok(out)
}

pub fn read_validation_set(path: impl AsRef<Path>) -> Result<Vec<ValidationRecord>> {
    parse_validation_set(&std::fs::read_to_string(path)?)
}

pub fn write_validation_set(records: &[ValidationRecord], path: impl AsRef<Path>) -> Result<()> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::PatchGrid;

    #[test]
    fn twelve_digit_formatting() {
        let cases = [
            (0.25, "0.25"),
            (1.0, "1"),
            (-3.5, "-3.5"),
            (0.1 + 0.2, "0.3"),
            (1.0 / 3.0, "0.333333333333"),
            (2.0 / 3.0 * 1e6, "666666.666667"),
            (1e-5, "1e-05"),
            (1.5e-7, "1.5e-07"),
            (1e12, "1e+12"),
            (123456789012.0, "123456789012"),
            (0.0001, "0.0001"),
            (0.0, "0"),
            (0.123456789012345, "0.123456789012"),
        ];
        for (v, s) in cases {
            assert_eq!(format_f64(v), s, "{v}");
        }
    }

    #[test]
    fn json_is_deterministic_and_parses_back() {
        #[derive(Serialize, serde::Deserialize, PartialEq, Debug)]
        struct R {
            b: f64,
            a: Vec<f64>,
        }
        let r = R {
            b: 1.0 / 7.0,
            a: vec![0.5, 1e-9],
        };
        let s1 = to_json_string(&r).unwrap();
        assert_eq!(s1, to_json_string(&r).unwrap());
        assert!(s1.find("\"b\"").unwrap() < s1.find("\"a\"").unwrap());
        let back: R = serde_json::from_str(&s1).unwrap();
        assert!((back.b - r.b).abs() < 1e-12);
        assert_eq!(to_json_string(&back).unwrap(), s1);
    }

    #[test]
    fn heatmap_csv_layout() {
        let h = Heatmap {
            weights: vec![0.25; 4],
        };
        assert_eq!(heatmap_csv(&h, 2, 2).unwrap(), "0.25,0.25\n0.25,0.25\n");
        assert!(heatmap_csv(&h, 3, 2).is_err());
        let m = AnchorMask::from_indices(4, &[1, 2]).unwrap();
        assert_eq!(mask_csv(&m, 2, 2).unwrap(), "0,1\n1,0\n");
    }

    fn record_line(region: &[usize]) -> String {
        let rec = ValidationRecord {
            image: PatchGrid::zeros(2, 2, 1),
            prompt: vec![0, 4, 5],
            target_token: 2,
            gt_region: region.to_vec(),
        };
        serde_json::to_string(&rec).unwrap()
    }

    #[test]
    fn validation_set_parsing() {
        assert!(parse_validation_set("").unwrap().is_empty());
        assert_eq!(
            parse_validation_set(&record_line(&[0, 1])).unwrap().len(),
            1
        );
        let text = format!("{}\n{}\n", record_line(&[3]), record_line(&[4]));
        match parse_validation_set(&text) {
            Err(VliError::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
        match parse_validation_set("{not json}\n") {
            Err(VliError::Parse { line, .. }) => assert_eq!(line, 1),
            other => panic!("expected parse error, got {other:?}"),
        }
    }
}
