//! Snapshot files in legacy unstructured-grid ASCII (VTK DataFile version
//! 3.0): points, triangle cells, and named point-data scalars. Standard
//! scientific viewers open these directly. A parser is provided so snapshots
//! round-trip byte-identically (floats are printed in Rust's shortest
//! round-trip form).

use crate::geom::Vec2;
use crate::mesh::BackgroundMesh;
use crate::Error;
use std::io::{BufRead, Write};
use std::path::Path;

#[derive(Clone, Debug, PartialEq)]
pub struct Snapshot {
    pub title: String,
    pub points: Vec<Vec2>,
    pub cells: Vec<[usize; 3]>,
    pub point_data: Vec<(String, Vec<f64>)>,
}

impl Snapshot {
    /// Bundles nodal fields on the background mesh into a snapshot.
    pub fn from_fields(
        mesh: &BackgroundMesh,
        title: &str,
        fields: &[(&str, &[f64])],
    ) -> Snapshot {
        Snapshot {
            title: title.to_string(),
            points: mesh.vertices().to_vec(),
            cells: mesh.triangles().to_vec(),
            point_data: fields
                .iter()
                .map(|(name, values)| (name.to_string(), values.to_vec()))
                .collect(),
        }
    }

    pub fn write_to(&self, out: &mut impl Write) -> std::io::Result<()> {
        writeln!(out, "# vtk DataFile Version 3.0")?;
        writeln!(out, "{}", self.title)?;
        writeln!(out, "ASCII")?;
        writeln!(out, "DATASET UNSTRUCTURED_GRID")?;
        writeln!(out, "POINTS {} double", self.points.len())?;
        for p in &self.points {
            writeln!(out, "{} {} 0", p.x, p.y)?;
        }
        writeln!(out, "CELLS {} {}", self.cells.len(), 4 * self.cells.len())?;
        for c in &self.cells {
            writeln!(out, "3 {} {} {}", c[0], c[1], c[2])?;
        }
        writeln!(out, "CELL_TYPES {}", self.cells.len())?;
        for _ in &self.cells {
            writeln!(out, "5")?;
        }
        if !self.point_data.is_empty() {
            writeln!(out, "POINT_DATA {}", self.points.len())?;
            for (name, values) in &self.point_data {
                writeln!(out, "SCALARS {name} double 1")?;
                writeln!(out, "LOOKUP_TABLE default")?;
                for v in values {
                    writeln!(out, "{v}")?;
                }
            }
        }
        Ok(())
    }

    pub fn read_from(input: &mut impl BufRead) -> Result<Snapshot, Error> {
        let mut lines = Vec::new();
        for line in input.lines() {
            lines.push(line?);
        }
        let mut cursor = 0usize;
        let bad = |line: usize, what: &str| {
            Error::Config(format!("snapshot parse error at line {}: {what}", line + 1))
        };
        let expect_line = |cursor: &mut usize, want: &str| -> Result<(), Error> {
            let line = lines.get(*cursor).ok_or_else(|| bad(*cursor, "unexpected end"))?;
            if line.trim() != want {
                return Err(bad(*cursor, &format!("expected `{want}`, found `{line}`")));
            }
            *cursor += 1;
            Ok(())
        };

        expect_line(&mut cursor, "# vtk DataFile Version 3.0")?;
        let title = lines.get(cursor).ok_or_else(|| bad(cursor, "missing title"))?.clone();
        cursor += 1;
        expect_line(&mut cursor, "ASCII")?;
        expect_line(&mut cursor, "DATASET UNSTRUCTURED_GRID")?;

        let header = lines.get(cursor).ok_or_else(|| bad(cursor, "missing POINTS"))?;
        let mut it = header.split_whitespace();
        if it.next() != Some("POINTS") {
            return Err(bad(cursor, "expected POINTS"));
        }
        let np: usize =
            it.next().and_then(|t| t.parse().ok()).ok_or_else(|| bad(cursor, "point count"))?;
        cursor += 1;
        let mut points = Vec::with_capacity(np);
        for _ in 0..np {
            let line = lines.get(cursor).ok_or_else(|| bad(cursor, "missing point"))?;
            let mut t = line.split_whitespace();
            let x: f64 =
                t.next().and_then(|s| s.parse().ok()).ok_or_else(|| bad(cursor, "point x"))?;
            let y: f64 =
                t.next().and_then(|s| s.parse().ok()).ok_or_else(|| bad(cursor, "point y"))?;
            points.push(Vec2::new(x, y));
            cursor += 1;
        }

        let header = lines.get(cursor).ok_or_else(|| bad(cursor, "missing CELLS"))?;
        let mut it = header.split_whitespace();
        if it.next() != Some("CELLS") {
            return Err(bad(cursor, "expected CELLS"));
        }
        let nc: usize =
            it.next().and_then(|t| t.parse().ok()).ok_or_else(|| bad(cursor, "cell count"))?;
        cursor += 1;
        let mut cells = Vec::with_capacity(nc);
        for _ in 0..nc {
            let line = lines.get(cursor).ok_or_else(|| bad(cursor, "missing cell"))?;
            let ids: Vec<usize> =
                line.split_whitespace().filter_map(|t| t.parse().ok()).collect();
            if ids.len() != 4 || ids[0] != 3 {
                return Err(bad(cursor, "expected `3 a b c`"));
            }
            cells.push([ids[1], ids[2], ids[3]]);
            cursor += 1;
        }

        let header = lines.get(cursor).ok_or_else(|| bad(cursor, "missing CELL_TYPES"))?;
        if !header.starts_with("CELL_TYPES") {
            return Err(bad(cursor, "expected CELL_TYPES"));
        }
        cursor += 1 + nc;

        let mut point_data = Vec::new();
        if let Some(header) = lines.get(cursor) {
            if header.starts_with("POINT_DATA") {
                cursor += 1;
                while cursor < lines.len() {
                    let line = &lines[cursor];
                    if line.trim().is_empty() {
                        cursor += 1;
                        continue;
                    }
                    let mut t = line.split_whitespace();
                    if t.next() != Some("SCALARS") {
                        return Err(bad(cursor, "expected SCALARS"));
                    }
                    let name =
                        t.next().ok_or_else(|| bad(cursor, "scalar name"))?.to_string();
                    cursor += 1;
                    expect_line(&mut cursor, "LOOKUP_TABLE default")?;
                    let mut values = Vec::with_capacity(np);
                    for _ in 0..np {
                        let line =
                            lines.get(cursor).ok_or_else(|| bad(cursor, "missing value"))?;
                        values.push(
                            line.trim().parse().map_err(|_| bad(cursor, "scalar value"))?,
                        );
                        cursor += 1;
                    }
                    point_data.push((name, values));
                }
            }
        }

        Ok(Snapshot { title, points, cells, point_data })
    }

    /// Writes via a temporary file and renames into place.
    pub fn write_atomic(&self, path: &Path) -> Result<(), Error> {
        let tmp = path.with_extension("tmp");
        {
            let mut file = std::io::BufWriter::new(std::fs::File::create(&tmp)?);
            self.write_to(&mut file)?;
        }
        std::fs::rename(&tmp, path)?;
        Ok(())
    }
}
