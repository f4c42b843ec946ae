//! Binary PPM images and ASCII PLY point clouds.

use std::fmt::Write as _;
use std::path::Path;

use thiserror::Error;

use crate::synthworld::Image;

#[derive(Debug, Error)]
pub enum ExportError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("malformed {kind} file: {detail}")]
    Parse { kind: &'static str, detail: String },
    #[error("cannot tile images of different sizes")]
    Mismatch,
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> ExportError + '_ {
    move |source| ExportError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn encode_ppm(img: &Image) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend(img.data.iter().map(|&v| quantize(v)));
    out
}

pub fn decode_ppm(bytes: &[u8]) -> Result<Image, ExportError> {
    let bad = |d: &str| ExportError::Parse {
        kind: "PPM",
        detail: d.to_string(),
    };
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header"));
        }
        fields.push(
            std::str::from_utf8(&bytes[start..pos])
                .map_err(|_| bad("header"))?
                .to_string(),
        );
    }
    pos += 1;
    if fields[0] != "P6" || fields[3] != "255" {
        return Err(bad("only 8-bit P6 is supported"));
    }
    let w: usize = fields[1].parse().map_err(|_| bad("width"))?;
    let h: usize = fields[2].parse().map_err(|_| bad("height"))?;
    let body = bytes
        .get(pos..pos + w * h * 3)
        .ok_or_else(|| bad("truncated pixels"))?;
    Ok(Image {
        height: h,
        width: w,
        data: body.iter().map(|&b| b as f32 / 255.0).collect(),
    })
}

pub fn write_ppm(path: &Path, img: &Image) -> Result<(), ExportError> {
    std::fs::write(path, encode_ppm(img)).map_err(io(path))
}

pub fn read_ppm(path: &Path) -> Result<Image, ExportError> {
    decode_ppm(&std::fs::read(path).map_err(io(path))?)
}

pub fn encode_ply(points: &[[f32; 3]]) -> String {
    let mut s = String::new();
    writeln!(s, "ply\nformat ascii 1.0\nelement vertex {}", points.len()).unwrap();
    s.push_str("property float x\nproperty float y\nproperty float z\nend_header\n");
    for p in points {
        writeln!(s, "{} {} {}", p[0], p[1], p[2]).unwrap();
    }
    s
}

pub fn decode_ply(text: &str) -> Result<Vec<[f32; 3]>, ExportError> {
    let bad = |d: String| ExportError::Parse {
        kind: "PLY",
        detail: d,
    };
    let mut lines = text.lines();
    if lines.next() != Some("ply") {
        return Err(bad("missing magic".into()));
    }
    let mut count = None;
    for line in lines.by_ref() {
        let t: Vec<&str> = line.split_whitespace().collect();
        match t.as_slice() {
            ["end_header"] => break,
            ["format", f, _] if *f != "ascii" => {
                return Err(bad(format!("unsupported format {f}")))
            }
            ["element", "vertex", n] => {
                count = Some(n.parse::<usize>().map_err(|e| bad(e.to_string()))?)
            }
            _ => {}
        }
    }
    let n = count.ok_or_else(|| bad("no vertex element".into()))?;
    let mut pts = Vec::with_capacity(n);
    for i in 0..n {
        let line = lines
            .next()
            .ok_or_else(|| bad(format!("expected {n} vertices, found {i}")))?;
        let v: Vec<f32> = line
            .split_whitespace()
            .map(|x| x.parse().map_err(|_| bad(format!("vertex {i}"))))
            .collect::<Result<_, _>>()?;
        if v.len() < 3 {
            return Err(bad(format!("vertex {i} has {} values", v.len())));
        }
        pts.push([v[0], v[1], v[2]]);
    }
    Ok(pts)
}

pub fn write_ply(path: &Path, points: &[[f32; 3]]) -> Result<(), ExportError> {
    std::fs::write(path, encode_ply(points)).map_err(io(path))
}

pub fn read_ply(path: &Path) -> Result<Vec<[f32; 3]>, ExportError> {
    decode_ply(&std::fs::read_to_string(path).map_err(io(path))?)
}

/// Tile images into a grid, `rows[r][c]` at row r, column c, separated by a
/// 2-pixel white gutter.
pub fn image_grid(rows: &[Vec<&Image>]) -> Result<Image, ExportError> {
    let first = rows
        .first()
        .and_then(|r| r.first())
        .ok_or(ExportError::Mismatch)?;
    let (h, w) = (first.height, first.width);
    let cols = rows.iter().map(|r| r.len()).max().unwrap_or(0);
    if rows.iter().flatten().any(|i| i.height != h || i.width != w) {
        return Err(ExportError::Mismatch);
    }
    const GAP: usize = 2;
    let gh = rows.len() * (h + GAP) - GAP;
    let gw = cols * (w + GAP) - GAP;
    let mut out = Image {
        height: gh,
        width: gw,
        data: vec![1.0; gh * gw * 3],
    };
    for (r, row) in rows.iter().enumerate() {
        for (c, img) in row.iter().enumerate() {
            for i in 0..h {
                let dst = ((r * (h + GAP) + i) * gw + c * (w + GAP)) * 3;
                out.data[dst..dst + w * 3].copy_from_slice(&img.data[i * w * 3..(i + 1) * w * 3]);
            }
        }
    }
    Ok(out)
}

/// Ground truth on the top row, prediction below, one column per camera.
pub fn comparison_grid(gt: &[Image], pred: &[Image]) -> Result<Image, ExportError> {
    image_grid(&[gt.iter().collect(), pred.iter().collect()])
}
