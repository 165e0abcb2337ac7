//! Point cloud readers and writers for `.xyz`, ascii `.ply` and `.off`.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{invalid, Error, Result};
use crate::geometry::{Point, PointCloud};

fn parse_err(path: &str, line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_string(),
        line,
        msg: msg.into(),
    }
}

fn parse_f32(tok: &str, path: &str, line: usize) -> Result<f32> {
    let v: f32 = tok
        .parse()
        .map_err(|_| parse_err(path, line, format!("non-numeric token `{tok}`")))?;
    if !v.is_finite() {
        return Err(parse_err(path, line, format!("non-finite coordinate `{tok}`")));
    }
    Ok(v)
}

fn finish(points: Vec<Point>, path: &str, line: usize) -> Result<PointCloud> {
    if points.is_empty() {
        return Err(parse_err(path, line, "no points"));
    }
    PointCloud::new(points)
}

/// Lines as `(1-based number, content)`.
fn numbered(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines().enumerate().map(|(i, l)| (i + 1, l.trim()))
}

/// Whitespace-separated coordinates, one point per line. Columns past the
/// third are ignored; blank lines and `#` comments are skipped.
pub fn parse_xyz(text: &str, path: &str) -> Result<PointCloud> {
    let mut points = Vec::new();
    let mut last = 0;
    for (ln, line) in numbered(text) {
        last = ln;
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let toks: Vec<&str> = line.split_whitespace().collect();
        if toks.len() < 3 {
            return Err(parse_err(path, ln, format!("expected 3 coordinates, found {}", toks.len())));
        }
        points.push([
            parse_f32(toks[0], path, ln)?,
            parse_f32(toks[1], path, ln)?,
            parse_f32(toks[2], path, ln)?,
        ]);
    }
    finish(points, path, last)
}

struct PlyElement {
    name: String,
    count: usize,
    props: Vec<String>,
    has_list: bool,
}

/// Ascii PLY. Reads the `x`, `y`, `z` properties of the `vertex` element.
pub fn parse_ply(text: &str, path: &str) -> Result<PointCloud> {
    let mut lines = numbered(text);
    match lines.next() {
        Some((_, "ply")) => {}
        Some((ln, _)) => return Err(parse_err(path, ln, "missing `ply` magic")),
        None => return Err(parse_err(path, 0, "empty file")),
    }
    let mut elements: Vec<PlyElement> = Vec::new();
    let mut header_end = None;
    for (ln, line) in lines.by_ref() {
        let toks: Vec<&str> = line.split_whitespace().collect();
        match toks.as_slice() {
            [] => {}
            ["comment", ..] | ["obj_info", ..] => {}
            ["format", "ascii", _] => {}
            ["format", fmt, ..] => {
                return Err(parse_err(path, ln, format!("unsupported PLY format `{fmt}` (only ascii)")))
            }
            ["element", name, count] => {
                let count = count
                    .parse()
                    .map_err(|_| parse_err(path, ln, format!("bad element count `{count}`")))?;
                elements.push(PlyElement {
                    name: name.to_string(),
                    count,
                    props: Vec::new(),
                    has_list: false,
                });
            }
            ["property", "list", .., name] => {
                let el = elements
                    .last_mut()
                    .ok_or_else(|| parse_err(path, ln, "property before element"))?;
                el.props.push(name.to_string());
                el.has_list = true;
            }
            ["property", _ty, name] => {
                let el = elements
                    .last_mut()
                    .ok_or_else(|| parse_err(path, ln, "property before element"))?;
                el.props.push(name.to_string());
            }
            ["end_header"] => {
                header_end = Some(ln);
                break;
            }
            _ => return Err(parse_err(path, ln, format!("malformed header line `{line}`"))),
        }
    }
    let header_end = header_end.ok_or_else(|| parse_err(path, 0, "missing end_header"))?;
    let vi = elements
        .iter()
        .position(|e| e.name == "vertex")
        .ok_or_else(|| parse_err(path, header_end, "no vertex element"))?;
    let vertex = &elements[vi];
    if vertex.has_list {
        return Err(parse_err(path, header_end, "list properties on vertex are unsupported"));
    }
    let col = |axis: &str| {
        vertex
            .props
            .iter()
            .position(|p| p == axis)
            .ok_or_else(|| parse_err(path, header_end, format!("vertex element lacks property `{axis}`")))
    };
    let (cx, cy, cz) = (col("x")?, col("y")?, col("z")?);
    let skip: usize = elements[..vi].iter().map(|e| e.count).sum();

    let mut body = lines.filter(|(_, l)| !l.is_empty());
    for _ in 0..skip {
        body.next()
            .ok_or_else(|| parse_err(path, header_end, "file ends before vertex data"))?;
    }
    let mut points = Vec::with_capacity(vertex.count);
    let mut last = header_end;
    for i in 0..vertex.count {
        let (ln, line) = body.next().ok_or_else(|| {
            parse_err(
                path,
                last,
                format!("expected {} vertices, found {i}", vertex.count),
            )
        })?;
        last = ln;
        let toks: Vec<&str> = line.split_whitespace().collect();
        if toks.len() != vertex.props.len() {
            return Err(parse_err(
                path,
                ln,
                format!("expected {} vertex properties, found {}", vertex.props.len(), toks.len()),
            ));
        }
        points.push([
            parse_f32(toks[cx], path, ln)?,
            parse_f32(toks[cy], path, ln)?,
            parse_f32(toks[cz], path, ln)?,
        ]);
    }
    finish(points, path, last)
}

/// OFF mesh; only the vertex block is read.
pub fn parse_off(text: &str, path: &str) -> Result<PointCloud> {
    let mut lines = numbered(text).filter(|(_, l)| !l.is_empty() && !l.starts_with('#'));
    let (ln, first) = lines.next().ok_or_else(|| parse_err(path, 0, "empty file"))?;
    let counts_inline = match first.strip_prefix("OFF") {
        Some(rest) if rest.trim().is_empty() => None,
        Some(rest) => Some((ln, rest.trim())),
        None => return Err(parse_err(path, ln, "missing `OFF` magic")),
    };
    let (ln, counts) = match counts_inline {
        Some(c) => c,
        None => lines
            .next()
            .ok_or_else(|| parse_err(path, ln, "missing counts line"))?,
    };
    let nv: usize = counts
        .split_whitespace()
        .next()
        .and_then(|t| t.parse().ok())
        .ok_or_else(|| parse_err(path, ln, format!("malformed counts line `{counts}`")))?;
    let mut points = Vec::with_capacity(nv);
    let mut last = ln;
    for i in 0..nv {
        let (vl, line) = lines
            .next()
            .ok_or_else(|| parse_err(path, last, format!("expected {nv} vertices, found {i}")))?;
        last = vl;
        let toks: Vec<&str> = line.split_whitespace().collect();
        if toks.len() < 3 {
            return Err(parse_err(path, vl, format!("expected {nv} vertices, found {i}")));
        }
        points.push([
            parse_f32(toks[0], path, vl)?,
            parse_f32(toks[1], path, vl)?,
            parse_f32(toks[2], path, vl)?,
        ]);
    }
    finish(points, path, last)
}

/// Reads a cloud, choosing the parser by file extension.
pub fn load_pointcloud(path: &Path) -> Result<PointCloud> {
    let ext = path
        .extension()
        .and_then(|e| e.to_str())
        .map(|e| e.to_ascii_lowercase())
        .unwrap_or_default();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let name = path.display().to_string();
    let text = match String::from_utf8(bytes) {
        Ok(t) => t,
        Err(_) if ext == "ply" => {
            return Err(parse_err(&name, 1, "binary PLY is not supported (only ascii)"))
        }
        Err(_) => return Err(parse_err(&name, 1, "file is not valid UTF-8 text")),
    };
    match ext.as_str() {
        "xyz" => parse_xyz(&text, &name),
        "ply" => parse_ply(&text, &name),
        "off" => parse_off(&text, &name),
        other => Err(invalid!("unsupported point cloud extension `{other}` for {name}")),
    }
}

/// One point per line with nine significant digits, enough to round-trip f32.
pub fn format_xyz(cloud: &PointCloud) -> String {
    let mut s = String::with_capacity(cloud.len() * 48);
    for p in &cloud.points {
        let _ = writeln!(s, "{:.8e} {:.8e} {:.8e}", p[0], p[1], p[2]);
    }
    s
}

/// Ascii PLY with optional per-vertex `red green blue` bytes.
pub fn format_ply(points: &[Point], colors: Option<&[[u8; 3]]>) -> Result<String> {
    if let Some(c) = colors {
        if c.len() != points.len() {
            return Err(invalid!("{} colors for {} points", c.len(), points.len()));
        }
    }
    let mut s = String::new();
    s.push_str("ply\nformat ascii 1.0\n");
    let _ = writeln!(s, "element vertex {}", points.len());
    s.push_str("property float x\nproperty float y\nproperty float z\n");
    if colors.is_some() {
        s.push_str("property uchar red\nproperty uchar green\nproperty uchar blue\n");
    }
    s.push_str("end_header\n");
    for (i, p) in points.iter().enumerate() {
        let _ = write!(s, "{:.8e} {:.8e} {:.8e}", p[0], p[1], p[2]);
        if let Some(c) = colors {
            let _ = write!(s, " {} {} {}", c[i][0], c[i][1], c[i][2]);
        }
        s.push('\n');
    }
    Ok(s)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn write_xyz(path: &Path, cloud: &PointCloud) -> Result<()> {
    write_text(path, &format_xyz(cloud))
}

pub fn write_ply(path: &Path, points: &[Point], colors: Option<&[[u8; 3]]>) -> Result<()> {
    write_text(path, &format_ply(points, colors)?)
}
