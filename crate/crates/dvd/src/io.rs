//! ASCII OFF meshes and ASCII PLY point clouds.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use dvd_core::linalg::Vec3;
use dvd_core::{PointCloud, TriangleMesh};

use crate::error::{io_err, Error, Result};

/// Non-empty, non-comment lines with their 1-based line numbers.
struct Lines<'a> {
    path: PathBuf,
    inner: std::iter::Enumerate<std::str::Lines<'a>>,
    last: usize,
}

impl<'a> Lines<'a> {
    fn new(path: &Path, text: &'a str) -> Self {
        Lines { path: path.to_path_buf(), inner: text.lines().enumerate(), last: 0 }
    }

    fn err(&self, line: usize, message: impl Into<String>) -> Error {
        Error::Parse { path: self.path.clone(), line, message: message.into() }
    }

    fn next_line(&mut self, what: &str) -> Result<(usize, &'a str)> {
        for (i, raw) in self.inner.by_ref() {
            self.last = i + 1;
            let l = raw.trim();
            if l.is_empty() || l.starts_with('#') || l.starts_with("comment") || l.starts_with("obj_info") {
                continue;
            }
            return Ok((i + 1, l));
        }
        Err(self.err(self.last + 1, format!("unexpected end of file, expected {what}")))
    }

    fn numbers<T: std::str::FromStr>(&self, line: usize, text: &str, what: &str) -> Result<Vec<T>> {
        text.split_whitespace()
            .map(|t| t.parse::<T>().map_err(|_| self.err(line, format!("invalid {what} `{t}`"))))
            .collect()
    }
}

fn finite3(lines: &Lines<'_>, line: usize, v: &[f64]) -> Result<Vec3> {
    let p = [v[0], v[1], v[2]];
    if p.iter().all(|x| x.is_finite()) {
        Ok(p)
    } else {
        Err(lines.err(line, "non-finite coordinate"))
    }
}

pub fn parse_off(path: &Path, text: &str) -> Result<TriangleMesh> {
    let mut lines = Lines::new(path, text);
    let (ln, header) = lines.next_line("OFF header")?;
    // "OFF" may share its line with the counts
    let counts_text = match header.strip_prefix("OFF") {
        Some(rest) if rest.trim().is_empty() => lines.next_line("counts")?,
        Some(rest) => (ln, rest.trim()),
        None => return Err(lines.err(ln, "missing OFF header")),
    };
    let counts: Vec<usize> = lines.numbers(counts_text.0, counts_text.1, "count")?;
    if counts.len() < 2 {
        return Err(lines.err(counts_text.0, "expected vertex and face counts"));
    }
    let (nv, nf) = (counts[0], counts[1]);
    let mut vertices = Vec::with_capacity(nv);
    for _ in 0..nv {
        let (ln, l) = lines.next_line("vertex")?;
        let v: Vec<f64> = lines.numbers(ln, l, "coordinate")?;
        if v.len() < 3 {
            return Err(lines.err(ln, "vertex needs 3 coordinates"));
        }
        vertices.push(finite3(&lines, ln, &v)?);
    }
    let mut faces = Vec::with_capacity(nf);
    for _ in 0..nf {
        let (ln, l) = lines.next_line("face")?;
        let toks: Vec<&str> = l.split_whitespace().collect();
        let k: usize = toks[0].parse().map_err(|_| lines.err(ln, format!("invalid face size `{}`", toks[0])))?;
        if k < 3 || toks.len() < k + 1 {
            return Err(lines.err(ln, format!("face declares {k} vertices")));
        }
        // anything after the indices (colors) is ignored
        let idx: Vec<usize> = lines.numbers(ln, &toks[1..=k].join(" "), "index")?;
        if let Some(bad) = idx.iter().find(|&&i| i >= nv) {
            return Err(lines.err(ln, format!("vertex index {bad} out of range")));
        }
        for j in 1..k - 1 {
            faces.push([idx[0], idx[j], idx[j + 1]]);
        }
    }
    Ok(TriangleMesh::new(vertices, faces)?)
}

pub fn load_off(path: impl AsRef<Path>) -> Result<TriangleMesh> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    parse_off(path, &text)
}

pub fn parse_ply(path: &Path, text: &str) -> Result<PointCloud> {
    let mut lines = Lines::new(path, text);
    let (ln, magic) = lines.next_line("ply header")?;
    if magic != "ply" {
        return Err(lines.err(ln, "missing `ply` magic"));
    }
    let (ln, format) = lines.next_line("format line")?;
    if !format.starts_with("format ascii") {
        return Err(lines.err(ln, "only `format ascii 1.0` is supported"));
    }
    // element name, count, property names (list properties kept as None)
    let mut elements: Vec<(String, usize, Vec<Option<String>>)> = Vec::new();
    loop {
        let (ln, l) = lines.next_line("end_header")?;
        let toks: Vec<&str> = l.split_whitespace().collect();
        match toks.as_slice() {
            ["end_header"] => break,
            ["element", name, count] => {
                let n = count.parse().map_err(|_| lines.err(ln, format!("invalid element count `{count}`")))?;
                elements.push((name.to_string(), n, Vec::new()));
            }
            ["property", "list", ..] => match elements.last_mut() {
                Some(e) => e.2.push(None),
                None => return Err(lines.err(ln, "property before any element")),
            },
            ["property", _ty, name] => match elements.last_mut() {
                Some(e) => e.2.push(Some(name.to_string())),
                None => return Err(lines.err(ln, "property before any element")),
            },
            _ => return Err(lines.err(ln, format!("unrecognized header line `{l}`"))),
        }
    }
    let mut points = Vec::new();
    let mut normals = Vec::new();
    let mut has_normals = false;
    for (name, count, props) in &elements {
        if name != "vertex" {
            for _ in 0..*count {
                lines.next_line(name)?;
            }
            continue;
        }
        if props.iter().any(Option::is_none) {
            return Err(lines.err(lines.last, "list properties on vertices are not supported"));
        }
        let col = |n: &str| props.iter().position(|p| p.as_deref() == Some(n));
        let (x, y, z) = match (col("x"), col("y"), col("z")) {
            (Some(x), Some(y), Some(z)) => (x, y, z),
            _ => return Err(lines.err(lines.last, "vertex element lacks x, y, z")),
        };
        let nidx = match (col("nx"), col("ny"), col("nz")) {
            (Some(a), Some(b), Some(c)) => Some((a, b, c)),
            _ => None,
        };
        has_normals = nidx.is_some();
        for _ in 0..*count {
            let (ln, l) = lines.next_line("vertex")?;
            let v: Vec<f64> = lines.numbers(ln, l, "value")?;
            if v.len() != props.len() {
                return Err(lines.err(ln, format!("expected {} values, found {}", props.len(), v.len())));
            }
            points.push(finite3(&lines, ln, &[v[x], v[y], v[z]])?);
            if let Some((a, b, c)) = nidx {
                let n = finite3(&lines, ln, &[v[a], v[b], v[c]])?;
                let len = dvd_core::linalg::norm(n);
                if len < 1e-12 {
                    return Err(lines.err(ln, "zero-length normal"));
                }
                // files often store normals rounded or unnormalized
                normals.push(dvd_core::linalg::scale(n, 1.0 / len));
            }
        }
    }
    Ok(PointCloud::new(points, has_normals.then_some(normals))?)
}

pub fn load_ply(path: impl AsRef<Path>) -> Result<PointCloud> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    parse_ply(path, &text)
}

/// `v` with 9 significant digits, trailing zeros trimmed.
pub fn fmt_sig9(v: f64) -> String {
    if v == 0.0 {
        return "0".into();
    }
    let exp = v.abs().log10().floor() as i32;
    if (-5..15).contains(&exp) {
        let decimals = (8 - exp).max(0) as usize;
        let s = format!("{v:.decimals$}");
        let s = if s.contains('.') { s.trim_end_matches('0').trim_end_matches('.').to_string() } else { s };
        if s == "-0" { "0".into() } else { s }
    } else {
        format!("{v:.8e}")
    }
}

pub fn ply_string(cloud: &PointCloud) -> String {
    let mut out = String::new();
    out.push_str("ply\nformat ascii 1.0\n");
    let _ = writeln!(out, "element vertex {}", cloud.len());
    out.push_str("property double x\nproperty double y\nproperty double z\n");
    if cloud.normals().is_some() {
        out.push_str("property double nx\nproperty double ny\nproperty double nz\n");
    }
    out.push_str("end_header\n");
    for (i, p) in cloud.points().iter().enumerate() {
        let _ = write!(out, "{} {} {}", fmt_sig9(p[0]), fmt_sig9(p[1]), fmt_sig9(p[2]));
        if let Some(n) = cloud.normals() {
            let n = n[i];
            let _ = write!(out, " {} {} {}", fmt_sig9(n[0]), fmt_sig9(n[1]), fmt_sig9(n[2]));
        }
        out.push('\n');
    }
    out
}

pub fn save_ply(cloud: &PointCloud, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, ply_string(cloud)).map_err(io_err(path))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn p() -> &'static Path {
        Path::new("test")
    }

    #[test]
    fn off_triangle() {
        let m = parse_off(p(), "OFF\n# c\n3 1 0\n0 0 0\n1 0 0\n0 1 0\n3 0 1 2\n").unwrap();
        assert_eq!(m.vertices().len(), 3);
        assert_eq!(m.faces(), &[[0, 1, 2]]);
        let quad = parse_off(p(), "OFF 4 1 0\n0 0 0\n1 0 0\n1 1 0\n0 1 0\n4 0 1 2 3\n").unwrap();
        assert_eq!(quad.faces().len(), 2);
    }

    #[test]
    fn off_errors_carry_line_numbers() {
        match parse_off(p(), "OFF\n3 1 0\n0 0 0\n1 x 0\n") {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 4),
            other => panic!("{other:?}"),
        }
        match parse_off(p(), "OFF\n3 1 0\n0 0 0\n1 0 0\n0 1 0\n3 0 1 7\n") {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 6),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn ply_with_normals() {
        let text = "ply\nformat ascii 1.0\nelement vertex 2\nproperty float x\nproperty float y\nproperty float z\n\
                    property float nx\nproperty float ny\nproperty float nz\nend_header\n0 0 0 0 0 1\n1 0 0 0 0 1\n";
        let c = parse_ply(p(), text).unwrap();
        assert_eq!(c.len(), 2);
        assert_eq!(c.normals().unwrap()[1], [0.0, 0.0, 1.0]);
    }

    #[test]
    fn sig9() {
        assert_eq!(fmt_sig9(1.0), "1");
        assert_eq!(fmt_sig9(-0.5), "-0.5");
        assert_eq!(fmt_sig9(1.0 / 3.0), "0.333333333");
        assert_eq!(fmt_sig9(123456.789012), "123456.789");
        assert_eq!(fmt_sig9(1e-9).parse::<f64>().unwrap(), 1e-9);
    }
}
