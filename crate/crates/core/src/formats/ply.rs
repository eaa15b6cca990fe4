//! ASCII PLY with `x y z` and an optional integer `label` per vertex
//! (`-1` background, `>= 0` landmark id).

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use nalgebra::Vector3;

use super::FormatError;
use crate::prior::{LabeledPointCloud, PointLabel};

fn err(msg: impl Into<String>) -> FormatError {
    FormatError::Ply(msg.into())
}

pub fn write_ply<W: Write>(cloud: &LabeledPointCloud, mut sink: W) -> Result<(), FormatError> {
    writeln!(sink, "ply")?;
    writeln!(sink, "format ascii 1.0")?;
    writeln!(sink, "element vertex {}", cloud.len())?;
    writeln!(sink, "property double x")?;
    writeln!(sink, "property double y")?;
    writeln!(sink, "property double z")?;
    writeln!(sink, "property int label")?;
    writeln!(sink, "end_header")?;
    for (p, l) in cloud.points().iter().zip(cloud.labels()) {
        // `{:?}` on f64 prints the shortest string that round-trips exactly
        writeln!(sink, "{:?} {:?} {:?} {}", p.x, p.y, p.z, l.code())?;
    }
    sink.flush()?;
    Ok(())
}

pub fn read_ply<R: BufRead>(source: R) -> Result<LabeledPointCloud, FormatError> {
    let mut lines = source.lines();
    let mut next = || -> Result<Option<String>, FormatError> { Ok(lines.next().transpose()?) };

    if next()?.as_deref().map(str::trim) != Some("ply") {
        return Err(err("missing 'ply' magic line"));
    }
    let mut vertex_count: Option<usize> = None;
    let mut in_vertex = false;
    let mut columns: Vec<String> = Vec::new();
    loop {
        let line = next()?.ok_or_else(|| err("header not terminated"))?;
        let words: Vec<&str> = line.split_whitespace().collect();
        match words.as_slice() {
            ["end_header"] => break,
            ["format", "ascii", _] => {}
            ["format", other, ..] => return Err(err(format!("unsupported format '{other}'"))),
            ["comment", ..] | ["obj_info", ..] | [] => {}
            ["element", name, count] => {
                in_vertex = *name == "vertex";
                if in_vertex {
                    vertex_count = Some(count.parse().map_err(|_| err("bad vertex count"))?);
                } else if vertex_count.is_none() {
                    return Err(err("elements before 'vertex' are not supported"));
                }
            }
            ["property", "list", ..] if in_vertex => {
                return Err(err("list properties on vertices"))
            }
            ["property", _ty, name] => {
                if in_vertex {
                    columns.push(name.to_string());
                }
            }
            _ => return Err(err(format!("unexpected header line '{line}'"))),
        }
    }
    let count = vertex_count.ok_or_else(|| err("no vertex element"))?;
    let col = |name: &str| columns.iter().position(|c| c == name);
    let (xi, yi, zi) = match (col("x"), col("y"), col("z")) {
        (Some(x), Some(y), Some(z)) => (x, y, z),
        _ => return Err(err("vertex element lacks x, y, z")),
    };
    let li = col("label");

    let mut points = Vec::with_capacity(count);
    let mut labels = Vec::with_capacity(count);
    for i in 0..count {
        let line = next()?.ok_or_else(|| err(format!("expected {count} vertices, got {i}")))?;
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != columns.len() {
            return Err(err(format!(
                "vertex {i} has {} fields, expected {}",
                fields.len(),
                columns.len()
            )));
        }
        let num = |j: usize| -> Result<f64, FormatError> {
            fields[j]
                .parse()
                .map_err(|_| err(format!("vertex {i}: bad number '{}'", fields[j])))
        };
        points.push(Vector3::new(num(xi)?, num(yi)?, num(zi)?));
        labels.push(match li {
            Some(j) => PointLabel::from_code(
                fields[j]
                    .parse()
                    .map_err(|_| err(format!("vertex {i}: bad label '{}'", fields[j])))?,
            ),
            None => PointLabel::Background,
        });
    }
    Ok(LabeledPointCloud::new(points, labels)?)
}

pub fn save_ply(cloud: &LabeledPointCloud, path: &Path) -> Result<(), FormatError> {
    write_ply(cloud, BufWriter::new(File::create(path)?))
}

pub fn load_ply(path: &Path) -> Result<LabeledPointCloud, FormatError> {
    read_ply(BufReader::new(File::open(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_exact() {
        let cloud = LabeledPointCloud::new(
            vec![
                Vector3::new(0.1, -2.5e-7, 3.0),
                Vector3::new(1.0 / 3.0, 2.0, -0.0),
            ],
            vec![PointLabel::Background, PointLabel::Foreground(4)],
        )
        .unwrap();
        let mut buf = Vec::new();
        write_ply(&cloud, &mut buf).unwrap();
        assert_eq!(read_ply(&buf[..]).unwrap(), cloud);
    }

    #[test]
    fn reads_unlabeled_float_ply() {
        let text = "ply\nformat ascii 1.0\ncomment hi\nelement vertex 2\nproperty float x\nproperty float y\n\
                    property float z\nend_header\n0 0 0\n1 2 3\n";
        let cloud = read_ply(text.as_bytes()).unwrap();
        assert_eq!(cloud.len(), 2);
        assert_eq!(cloud.labels(), &[PointLabel::Background; 2]);
    }

    #[test]
    fn rejects_binary_and_short_bodies() {
        let bin = "ply\nformat binary_little_endian 1.0\nelement vertex 0\nend_header\n";
        assert!(read_ply(bin.as_bytes()).is_err());
        let short = "ply\nformat ascii 1.0\nelement vertex 2\nproperty float x\nproperty float y\n\
                     property float z\nend_header\n0 0 0\n";
        assert!(read_ply(short.as_bytes()).is_err());
    }
}
