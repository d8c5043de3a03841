//! ASCII point files: one `x y z` triple per line, `#` comment lines allowed.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

use super::cloud::{Point3, PointCloud};

pub fn parse_xyz(text: &str, origin: &str) -> Result<PointCloud> {
    let mut points = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = trimmed.split_whitespace().collect();
        let err = |message: String| Error::Format {
            path: origin.to_string(),
            line: lineno + 1,
            message,
        };
        if fields.len() != 3 {
            return Err(err(format!("expected 3 fields, found {}", fields.len())));
        }
        let mut p = [0.0; 3];
        for (slot, f) in p.iter_mut().zip(&fields) {
            *slot = f
                .parse::<f64>()
                .map_err(|e| err(format!("bad coordinate {f:?}: {e}")))?;
            if !slot.is_finite() {
                return Err(err(format!("non-finite coordinate {f:?}")));
            }
        }
        points.push(p);
    }
    PointCloud::new(points).map_err(|e| Error::Format {
        path: origin.to_string(),
        line: 0,
        message: e.to_string(),
    })
}

pub fn read_xyz(path: impl AsRef<Path>) -> Result<PointCloud> {
    let path = path.as_ref();
    let text = fs::read_to_string(path)?;
    parse_xyz(&text, &path.display().to_string())
}

pub fn format_xyz(cloud: &PointCloud) -> String {
    let mut out = String::with_capacity(cloud.len() * 40);
    for p in cloud.points() {
        push_point(&mut out, p);
    }
    out
}

fn push_point(out: &mut String, p: &Point3) {
    for (i, v) in p.iter().enumerate() {
        if i > 0 {
            out.push(' ');
        }
        out.push_str(&format_sig(*v, 9));
    }
    out.push('\n');
}

pub fn write_xyz(path: impl AsRef<Path>, cloud: &PointCloud) -> Result<()> {
    fs::write(path, format_xyz(cloud))?;
    Ok(())
}

/// Formats `v` with `digits` significant digits, `%g` style: plain decimal
/// for moderate exponents, scientific otherwise, trailing zeros trimmed.
pub fn format_sig(v: f64, digits: usize) -> String {
    if v == 0.0 {
        return "0".to_string();
    }
    let sci = format!("{:.*e}", digits - 1, v);
    let (mantissa, exp) = sci.split_once('e').expect("scientific format has an exponent");
    let exp: i32 = exp.parse().expect("integer exponent");
    if exp < -5 || exp >= digits as i32 {
        return format!("{}e{}", trim_zeros(mantissa), exp);
    }
    let decimals = (digits as i32 - 1 - exp).max(0) as usize;
    trim_zeros(&format!("{:.*}", decimals, v)).to_string()
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
    fn sig_formatting() {
        assert_eq!(format_sig(1.0, 9), "1");
        assert_eq!(format_sig(-0.5, 9), "-0.5");
        assert_eq!(format_sig(0.123456789123, 9), "0.123456789");
        assert_eq!(format_sig(123456.789012, 9), "123456.789");
        assert_eq!(format_sig(1.5e-7, 9), "1.5e-7");
        assert_eq!(format_sig(2.0e12, 9), "2e12");
    }

    #[test]
    fn f32_values_survive_write_read() {
        let pts: Vec<Point3> = [0.1f32, -1.0 / 3.0, 7.123_456_7, 1e-8]
            .windows(3)
            .map(|w| [w[0] as f64, w[1] as f64, w[2] as f64])
            .collect();
        let c = PointCloud::new(pts).unwrap();
        let back = parse_xyz(&format_xyz(&c), "mem").unwrap();
        for (a, b) in c.points().iter().zip(back.points()) {
            for k in 0..3 {
                assert_eq!(a[k] as f32, b[k] as f32);
            }
        }
    }

    #[test]
    fn comments_and_errors() {
        let c = parse_xyz("# header\n1 2 3\n\n4 5 6\n", "mem").unwrap();
        assert_eq!(c.len(), 2);
        let e = parse_xyz("1 2 3\n1 2\n", "f.xyz").unwrap_err();
        assert!(matches!(e, Error::Format { line: 2, .. }), "{e}");
        assert!(parse_xyz("1 2 3 4\n", "f").is_err());
        assert!(parse_xyz("1 x 3\n", "f").is_err());
        assert!(parse_xyz("# only comments\n", "f").is_err());
    }
}
