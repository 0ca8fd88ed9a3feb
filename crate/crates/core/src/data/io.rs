//! XYZ and ASCII PLY point cloud files.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::geometry::{PointCloud, Vec3};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CloudFormat {
    Xyz,
    Ply,
}

impl CloudFormat {
    pub fn from_path(path: &Path) -> Result<Self> {
        match path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref() {
            Some("xyz") | Some("txt") => Ok(CloudFormat::Xyz),
            Some("ply") => Ok(CloudFormat::Ply),
            _ => Err(Error::Format(format!(
                "{}: expected a .xyz or .ply extension",
                path.display()
            ))),
        }
    }
}

/// 17 significant digits round-trip every finite `f64`.
fn fmt_coord(v: f64) -> String {
    format!("{v:.16e}")
}

pub fn format_xyz(cloud: &PointCloud) -> String {
    let mut out = String::with_capacity(cloud.len() * 72);
    for p in cloud {
        let _ = writeln!(out, "{} {} {}", fmt_coord(p.x), fmt_coord(p.y), fmt_coord(p.z));
    }
    out
}

pub fn format_ply(cloud: &PointCloud) -> String {
    let mut out = format!(
        "ply\nformat ascii 1.0\nelement vertex {}\nproperty double x\nproperty double y\nproperty double z\nend_header\n",
        cloud.len()
    );
    out.push_str(&format_xyz(cloud));
    out
}

fn parse_err(path: &Path, line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        message: message.into(),
    }
}

fn parse_point(path: &Path, line_no: usize, fields: &[&str], cols: [usize; 3]) -> Result<Vec3> {
    let mut c = [0.0f64; 3];
    for (k, &col) in cols.iter().enumerate() {
        let raw = fields
            .get(col)
            .ok_or_else(|| parse_err(path, line_no, format!("expected at least {} values", col + 1)))?;
        c[k] = raw
            .parse()
            .map_err(|_| parse_err(path, line_no, format!("invalid number {raw:?}")))?;
        if !c[k].is_finite() {
            return Err(parse_err(path, line_no, "non-finite coordinate"));
        }
    }
    Ok(Vec3::new(c[0], c[1], c[2]))
}

pub fn parse_xyz(path: &Path, text: &str) -> Result<PointCloud> {
    let mut points = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let t = line.trim();
        if t.is_empty() || t.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = t.split_whitespace().collect();
        points.push(parse_point(path, i + 1, &fields, [0, 1, 2])?);
    }
    PointCloud::new(points)
}

pub fn parse_ply(path: &Path, text: &str) -> Result<PointCloud> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, l)) if l.trim() == "ply" => {}
        _ => return Err(parse_err(path, 1, "missing ply magic")),
    }
    let mut vertex_count = None;
    let mut props: Vec<String> = Vec::new();
    let mut in_vertex = false;
    let mut header_end = None;
    for (i, line) in lines.by_ref() {
        let fields: Vec<&str> = line.split_whitespace().collect();
        match fields.as_slice() {
            ["format", fmt, ..] if *fmt != "ascii" => {
                return Err(Error::Format(format!("{}: only ASCII PLY is supported, got {fmt}", path.display())))
            }
            ["element", name, count] => {
                in_vertex = *name == "vertex";
                if in_vertex {
                    vertex_count = Some(
                        count
                            .parse::<usize>()
                            .map_err(|_| parse_err(path, i + 1, format!("invalid vertex count {count:?}")))?,
                    );
                }
            }
            ["property", .., name] if in_vertex => props.push(name.to_string()),
            ["end_header"] => {
                header_end = Some(i + 1);
                break;
            }
            _ => {}
        }
    }
    let header_end = header_end.ok_or_else(|| parse_err(path, text.lines().count().max(1), "missing end_header"))?;
    let count = vertex_count.ok_or_else(|| parse_err(path, header_end, "no vertex element"))?;
    let col = |name: &str| {
        props
            .iter()
            .position(|p| p == name)
            .ok_or_else(|| parse_err(path, header_end, format!("vertex element lacks property {name}")))
    };
    let cols = [col("x")?, col("y")?, col("z")?];
    let mut points = Vec::with_capacity(count);
    for (i, line) in lines {
        if points.len() == count {
            break;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.is_empty() {
            continue;
        }
        points.push(parse_point(path, i + 1, &fields, cols)?);
    }
    if points.len() < count {
        return Err(parse_err(
            path,
            text.lines().count() + 1,
            format!("file ends after {} of {count} vertices", points.len()),
        ));
    }
    PointCloud::new(points)
}

pub fn read_cloud(path: &Path) -> Result<PointCloud> {
    let format = CloudFormat::from_path(path)?;
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    match format {
        CloudFormat::Xyz => parse_xyz(path, &text),
        CloudFormat::Ply => parse_ply(path, &text),
    }
}

pub fn write_cloud(path: &Path, cloud: &PointCloud) -> Result<()> {
    let text = match CloudFormat::from_path(path)? {
        CloudFormat::Xyz => format_xyz(cloud),
        CloudFormat::Ply => format_ply(cloud),
    };
    fs::write(path, text).map_err(|e| Error::io(path, e))
}
