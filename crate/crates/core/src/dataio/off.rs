//! ASCII OFF mesh reader.
//!
//! Accepts the published format: an `OFF` header (counts may share its
//! line), a `V F E` counts line, `V` vertex lines, `F` polygon lines.
//! Blank lines and `#` comments are skipped anywhere. Polygons with more
//! than three vertices are fan-triangulated. Errors carry 1-based line
//! numbers.

use std::path::Path;

use super::mesh::Mesh;
use super::DataError;
use crate::linalg::Vec3;

pub fn load_off(path: &Path) -> Result<Mesh, DataError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| DataError::Io { path: path.display().to_string(), source: e })?;
    parse_off(&text)
}

pub fn parse_off(text: &str) -> Result<Mesh, DataError> {
    let mut lines = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'));
    let mut last_line = 0usize;
    let mut next =
        |last: &mut usize| -> Option<(usize, &str)> {
            let item = lines.next();
            if let Some((n, _)) = item {
                *last = n;
            }
            item
        };

    let (header_no, header) = next(&mut last_line).ok_or(DataError::OffTruncated { line: 1 })?;
    let mut header_tokens = header.split_whitespace();
    if header_tokens.next() != Some("OFF") {
        return Err(DataError::OffHeader { line: header_no });
    }
    let rest: Vec<&str> = header_tokens.collect();
    let (counts_no, counts) = if rest.is_empty() {
        next(&mut last_line).ok_or(DataError::OffTruncated { line: header_no + 1 })?
    } else {
        (header_no, header.split_once(char::is_whitespace).unwrap().1.trim())
    };
    let c: Vec<&str> = counts.split_whitespace().collect();
    if c.len() < 2 || c.len() > 3 {
        return Err(DataError::OffMalformed { line: counts_no, what: "counts line".into() });
    }
    let parse_count = |s: &str| -> Result<usize, DataError> {
        s.parse().map_err(|_| DataError::OffMalformed { line: counts_no, what: "counts line".into() })
    };
    let n_vertices = parse_count(c[0])?;
    let n_faces = parse_count(c[1])?;

    let mut vertices: Vec<Vec3<f64>> = Vec::with_capacity(n_vertices);
    for _ in 0..n_vertices {
        let (no, line) =
            next(&mut last_line).ok_or(DataError::OffTruncated { line: last_line + 1 })?;
        let mut coords = [0.0f64; 3];
        let mut toks = line.split_whitespace();
        for coord in &mut coords {
            *coord = toks
                .next()
                .and_then(|t| t.parse().ok())
                .ok_or_else(|| DataError::OffMalformed { line: no, what: "vertex line".into() })?;
        }
        // Trailing fields (colors) permitted by the format; ignored.
        vertices.push(coords);
    }

    let mut faces: Vec<[usize; 3]> = Vec::new();
    for _ in 0..n_faces {
        let (no, line) =
            next(&mut last_line).ok_or(DataError::OffTruncated { line: last_line + 1 })?;
        let mut toks = line.split_whitespace();
        let arity: usize = toks
            .next()
            .and_then(|t| t.parse().ok())
            .ok_or_else(|| DataError::OffMalformed { line: no, what: "face line".into() })?;
        if arity < 3 {
            return Err(DataError::OffMalformed { line: no, what: "face with < 3 vertices".into() });
        }
        let mut poly = Vec::with_capacity(arity);
        for _ in 0..arity {
            let ix: usize = toks
                .next()
                .and_then(|t| t.parse().ok())
                .ok_or_else(|| DataError::OffMalformed { line: no, what: "face line".into() })?;
            if ix >= n_vertices {
                return Err(DataError::OffIndexRange { line: no, index: ix, vertices: n_vertices });
            }
            poly.push(ix);
        }
        for k in 1..arity - 1 {
            let tri = [poly[0], poly[k], poly[k + 1]];
            if tri[0] == tri[1] || tri[1] == tri[2] || tri[0] == tri[2] {
                return Err(DataError::OffMalformed {
                    line: no,
                    what: "face with repeated vertex".into(),
                });
            }
            faces.push(tri);
        }
    }

    Mesh::new(vertices, faces)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Unit cube spanning [0,1]^3, quads fan-triangulated to 12 faces.
    pub const CUBE_OFF: &str = "\
OFF
# unit cube
8 6 12
0 0 0
1 0 0
1 1 0
0 1 0
0 0 1
1 0 1
1 1 1
0 1 1
4 0 3 2 1
4 4 5 6 7
4 0 1 5 4
4 1 2 6 5
4 2 3 7 6
4 3 0 4 7
";

    #[test]
    fn cube_parses_to_twelve_triangles() {
        let m = parse_off(CUBE_OFF).unwrap();
        assert_eq!(m.vertices.len(), 8);
        assert_eq!(m.faces.len(), 12);
        assert!((m.total_area() - 6.0).abs() < 1e-9);
    }

    #[test]
    fn counts_may_share_the_header_line() {
        let m = parse_off("OFF 3 1 0\n0 0 0\n1 0 0\n0 1 0\n3 0 1 2\n").unwrap();
        assert_eq!(m.vertices.len(), 3);
        assert_eq!(m.faces.len(), 1);
    }

    #[test]
    fn bad_header_names_line() {
        let err = parse_off("# comment\nPLY\n").unwrap_err();
        assert!(matches!(err, DataError::OffHeader { line: 2 }));
    }

    #[test]
    fn out_of_range_index_names_line_and_bounds() {
        let text = "OFF\n3 1 0\n0 0 0\n1 0 0\n0 1 0\n3 0 1 99\n";
        let err = parse_off(text).unwrap_err();
        assert!(matches!(err, DataError::OffIndexRange { line: 6, index: 99, vertices: 3 }));
    }

    #[test]
    fn truncated_file_names_next_line() {
        let err = parse_off("OFF\n8 6 12\n0 0 0\n").unwrap_err();
        assert!(matches!(err, DataError::OffTruncated { line: 4 }));
    }

    #[test]
    fn malformed_vertex_names_line() {
        let err = parse_off("OFF\n3 1 0\n0 0 zero\n1 0 0\n0 1 0\n3 0 1 2\n").unwrap_err();
        assert!(matches!(err, DataError::OffMalformed { line: 3, .. }));
    }
}
