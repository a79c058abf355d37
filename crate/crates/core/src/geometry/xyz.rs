//! "XYZ-text" point files: one `x y z` triple per line, `#` comments ignored.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::{Point, PointCloud};
use crate::error::{Error, Result};

/// Renders a cloud. Values use the shortest representation that parses back
/// to the same `f64`, so a write/read cycle is lossless.
pub fn to_string(pc: &PointCloud) -> String {
    let mut s = String::with_capacity(pc.len() * 64);
    for p in pc.points() {
        writeln!(s, "{} {} {}", p[0], p[1], p[2]).unwrap();
    }
    s
}

pub fn parse(text: &str, path: &Path) -> Result<PointCloud> {
    let err = |line: usize, message: String| Error::Parse { path: path.to_path_buf(), line, message };
    let mut points = Vec::new();
    for (i, raw) in text.split('\n').enumerate() {
        let line = raw.trim_end_matches('\r');
        if line.trim().is_empty() || line.trim_start().starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 3 {
            return Err(err(i + 1, format!("expected 3 values, found {}", fields.len())));
        }
        let mut p: Point = [0.0; 3];
        for (k, f) in fields.iter().enumerate() {
            p[k] = f.parse::<f64>().map_err(|e| err(i + 1, format!("bad number `{f}`: {e}")))?;
            if !p[k].is_finite() {
                return Err(err(i + 1, format!("non-finite value `{f}`")));
            }
        }
        points.push(p);
    }
    if points.is_empty() {
        return Err(err(0, "no points".into()));
    }
    PointCloud::new(points)
}

pub fn write(path: &Path, pc: &PointCloud) -> Result<()> {
    fs::write(path, to_string(pc)).map_err(|e| Error::io(path, e))
}

pub fn read(path: &Path) -> Result<PointCloud> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse(&text, path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn comments_and_blank_lines() {
        let pc = parse("# header\n1 2 3\n\n# mid\n4 5 6\n", Path::new("t.xyz")).unwrap();
        assert_eq!(pc.points(), &[[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]]);
    }

    #[test]
    fn truncated_line_reports_line_number() {
        let e = parse("1 2 3\n4 5 6\n7 8\n", Path::new("t.xyz")).unwrap_err();
        match e {
            Error::Parse { line, .. } => assert_eq!(line, 3),
            other => panic!("unexpected {other}"),
        }
        assert!(parse("1 2 3\n4 x 6\n", Path::new("t.xyz")).unwrap_err().to_string().contains("line 2"));
    }

    #[test]
    fn lossless_round_trip() {
        let pc = PointCloud::new(vec![[0.1 + 0.2, -1e-17, 12345.678901234567], [f64::MIN_POSITIVE, -0.0, 1.0 / 3.0]]).unwrap();
        let back = parse(&to_string(&pc), Path::new("t.xyz")).unwrap();
        assert_eq!(back, pc);
    }
}
