use std::fs;
use std::path::{Path, PathBuf};

use super::write_atomic;
use crate::error::{Error, Result};
use crate::geometry::{Point, PointCloud};

/// Text form: optional `# label <int>` line, then `x y z` per line with 17
/// significant digits.
pub fn format_xyz(cloud: &PointCloud) -> String {
    let mut out = String::with_capacity(cloud.len() * 72);
    if let Some(l) = cloud.label {
        out.push_str(&format!("# label {l}\n"));
    }
    for p in &cloud.points {
        out.push_str(&format!("{:.16e} {:.16e} {:.16e}\n", p[0], p[1], p[2]));
    }
    out
}

/// Blank lines and other `#` comments are skipped.
pub fn parse_xyz(text: &str) -> Result<PointCloud> {
    let mut label = None;
    let mut points: Vec<Point> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        if let Some(comment) = line.strip_prefix('#') {
            let mut words = comment.split_whitespace();
            if words.next() == Some("label") {
                let v =
                    words.next().ok_or_else(|| Error::Parse { line: line_no, msg: "label without value".into() })?;
                let l =
                    v.parse::<usize>().map_err(|_| Error::Parse { line: line_no, msg: format!("bad label {v:?}") })?;
                label = Some(l);
            }
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 3 {
            return Err(Error::Parse { line: line_no, msg: format!("expected 3 coordinates, found {}", fields.len()) });
        }
        let mut p = [0.0; 3];
        for (d, f) in fields.iter().enumerate() {
            p[d] = f.parse::<f64>().map_err(|_| Error::Parse { line: line_no, msg: format!("bad number {f:?}") })?;
            if !p[d].is_finite() {
                return Err(Error::Parse { line: line_no, msg: format!("non-finite coordinate {f:?}") });
            }
        }
        points.push(p);
    }
    if points.is_empty() {
        return Err(Error::Parse { line: 0, msg: "no points".into() });
    }
    PointCloud::new(points, label)
}

pub fn read_xyz(path: &Path) -> Result<PointCloud> {
    parse_xyz(&fs::read_to_string(path)?)
}

pub fn write_xyz(path: &Path, cloud: &PointCloud) -> Result<()> {
    write_atomic(path, format_xyz(cloud).as_bytes())
}

/// Writes `<prefix>_<index>.xyz` files; returns their paths in order.
pub fn write_dataset(dir: &Path, prefix: &str, clouds: &[PointCloud]) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    clouds
        .iter()
        .enumerate()
        .map(|(i, c)| {
            let p = dir.join(format!("{prefix}_{i:05}.xyz"));
            write_xyz(&p, c)?;
            Ok(p)
        })
        .collect()
}

/// Every `.xyz` file in `dir`, sorted by file name.
pub fn read_dataset(dir: &Path) -> Result<Vec<PointCloud>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)?.map(|e| e.map(|e| e.path())).collect::<std::io::Result<_>>()?;
    paths.retain(|p| p.extension().is_some_and(|e| e == "xyz"));
    paths.sort();
    if paths.is_empty() {
        return Err(Error::Argument(format!("no .xyz files in {}", dir.display())));
    }
    paths
        .iter()
        .map(|p| {
            read_xyz(p).map_err(|e| match e {
                Error::Parse { line, msg } => Error::Parse { line, msg: format!("{}: {msg}", p.display()) },
                other => other,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    #[test]
    fn round_trip_is_exact() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let pts: Vec<Point> =
            (0..128).map(|_| [rng.random::<f64>() * 10.0 - 5.0, rng.random(), -rng.random::<f64>() * 1e-7]).collect();
        let c = PointCloud::new(pts, Some(4)).unwrap();
        let back = parse_xyz(&format_xyz(&c)).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn short_line_names_line() {
        let err = parse_xyz("# label 1\n0 0 0\n1 2\n").unwrap_err();
        match err {
            Error::Parse { line, .. } => assert_eq!(line, 3),
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn unlabeled_and_comments() {
        let c = parse_xyz("# exported\n\n1 2 3\n").unwrap();
        assert_eq!(c.label, None);
        assert_eq!(c.points, vec![[1.0, 2.0, 3.0]]);
        assert!(parse_xyz("1 2 x\n").is_err());
        assert!(parse_xyz("").is_err());
    }
}
