//! On-disk formats.
//!
//! Binary formats start with a four-byte magic and little-endian `u32`
//! dimensions, followed by little-endian `f32` payloads. Values are stored as
//! `f32`, so a write of in-memory `f64` data is lossy once; after that,
//! read-then-write is byte-identical.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use nalgebra::{Matrix3, Vector3};
use ndarray::{Array2, Array3};

use crate::error::{Error, Result};
use crate::fusion::ImageFeatureMap;
use crate::geometry::{CalibrationRig, PointSet, FILE_ROTATION_TOLERANCE};
use crate::graph::NeighborGraph;
use crate::safa::AttentionParams;
use crate::scene::{GroundTruth, GroundTruthRow};

pub const POINT_CLOUD_MAGIC: &[u8; 4] = b"GAPC";
pub const FEATURE_MAP_MAGIC: &[u8; 4] = b"GAFM";
pub const GRAPH_MAGIC: &[u8; 4] = b"GAGR";
pub const PARAMS_MAGIC: &[u8; 4] = b"GASA";

struct Cursor<'a> {
    name: &'static str,
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn new(name: &'static str, bytes: &'a [u8], magic: &[u8; 4]) -> Result<Self> {
        if bytes.len() < 4 || &bytes[..4] != magic {
            return Err(Error::format(name, "bad magic"));
        }
        Ok(Self { name, bytes, pos: 4 })
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let out = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(out)
            }
            None => Err(Error::format(self.name, "truncated")),
        }
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn f32(&mut self) -> Result<f64> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as f64)
    }

    /// Fails unless exactly `count` payload items of `width` bytes remain.
    fn expect_remaining(&self, count: usize, width: usize) -> Result<()> {
        let need = count.checked_mul(width).ok_or_else(|| Error::format(self.name, "dimensions overflow"))?;
        let have = self.bytes.len() - self.pos;
        if have != need {
            return Err(Error::format(self.name, format!("expected {need} payload bytes, found {have}")));
        }
        Ok(())
    }
}

fn put_u32(out: &mut Vec<u8>, v: usize, name: &'static str) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::format(name, format!("dimension {v} exceeds u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

fn put_f32(out: &mut Vec<u8>, v: f64) {
    out.extend_from_slice(&(v as f32).to_le_bytes());
}

fn read_all(mut r: impl Read, name: &'static str) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    r.read_to_end(&mut buf).map_err(|e| Error::format(name, e.to_string()))?;
    Ok(buf)
}

pub fn encode_point_cloud(points: &PointSet) -> Result<Vec<u8>> {
    let (n, c) = (points.len(), points.channels());
    let mut out = Vec::with_capacity(12 + n * (4 + c) * 4);
    out.extend_from_slice(POINT_CLOUD_MAGIC);
    put_u32(&mut out, n, "GAPC")?;
    put_u32(&mut out, c, "GAPC")?;
    for (i, p) in points.coords().iter().enumerate() {
        for &x in p {
            put_f32(&mut out, x);
        }
        for &f in points.features().row(i) {
            put_f32(&mut out, f);
        }
        put_f32(&mut out, points.labels()[i] as f64);
    }
    Ok(out)
}

pub fn decode_point_cloud(bytes: &[u8]) -> Result<PointSet> {
    let mut cur = Cursor::new("GAPC", bytes, POINT_CLOUD_MAGIC)?;
    let n = cur.u32()? as usize;
    let c = cur.u32()? as usize;
    cur.expect_remaining(n.saturating_mul(c + 4), 4)?;
    let mut coords = Vec::with_capacity(n);
    let mut features = Array2::zeros((n, c));
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        coords.push([cur.f32()?, cur.f32()?, cur.f32()?]);
        for ch in 0..c {
            features[[i, ch]] = cur.f32()?;
        }
        let label = cur.f32()?;
        if label.fract() != 0.0 || label.abs() > i32::MAX as f64 {
            return Err(Error::format("GAPC", format!("row {i}: label {label} is not an integer")));
        }
        labels.push(label as i32);
    }
    PointSet::new(coords, features, labels).map_err(|e| Error::format("GAPC", e.to_string()))
}

pub fn encode_feature_map(fmap: &ImageFeatureMap) -> Result<Vec<u8>> {
    let (h, w, c) = fmap.data().dim();
    let mut out = Vec::with_capacity(16 + h * w * c * 4);
    out.extend_from_slice(FEATURE_MAP_MAGIC);
    put_u32(&mut out, h, "GAFM")?;
    put_u32(&mut out, w, "GAFM")?;
    put_u32(&mut out, c, "GAFM")?;
    // standard layout iterates (row, col, channel)
    for &v in fmap.data().iter() {
        put_f32(&mut out, v);
    }
    Ok(out)
}

pub fn decode_feature_map(bytes: &[u8]) -> Result<ImageFeatureMap> {
    let mut cur = Cursor::new("GAFM", bytes, FEATURE_MAP_MAGIC)?;
    let h = cur.u32()? as usize;
    let w = cur.u32()? as usize;
    let c = cur.u32()? as usize;
    let count = h.checked_mul(w).and_then(|x| x.checked_mul(c)).ok_or_else(|| Error::format("GAFM", "dimensions overflow"))?;
    cur.expect_remaining(count, 4)?;
    let values = (0..count).map(|_| cur.f32()).collect::<Result<Vec<_>>>()?;
    let data = Array3::from_shape_vec((h, w, c), values).map_err(|e| Error::format("GAFM", e.to_string()))?;
    ImageFeatureMap::new(data).map_err(|e| Error::format("GAFM", e.to_string()))
}

pub fn encode_graph(graph: &NeighborGraph) -> Result<Vec<u8>> {
    let (n, k) = (graph.n(), graph.k());
    let mut out = Vec::with_capacity(12 + n * k * 5);
    out.extend_from_slice(GRAPH_MAGIC);
    put_u32(&mut out, n, "GAGR")?;
    put_u32(&mut out, k, "GAGR")?;
    for &i in graph.indices() {
        out.extend_from_slice(&i.to_le_bytes());
    }
    out.extend(graph.valid().iter().map(|&v| v as u8));
    Ok(out)
}

pub fn decode_graph(bytes: &[u8]) -> Result<NeighborGraph> {
    let mut cur = Cursor::new("GAGR", bytes, GRAPH_MAGIC)?;
    let n = cur.u32()? as usize;
    let k = cur.u32()? as usize;
    let cells = n.checked_mul(k).ok_or_else(|| Error::format("GAGR", "dimensions overflow"))?;
    cur.expect_remaining(cells, 5)?;
    let indices = (0..cells).map(|_| cur.u32()).collect::<Result<Vec<_>>>()?;
    let valid = cur
        .take(cells)?
        .iter()
        .map(|&b| match b {
            0 => Ok(false),
            1 => Ok(true),
            other => Err(Error::format("GAGR", format!("validity byte {other}"))),
        })
        .collect::<Result<Vec<_>>>()?;
    NeighborGraph::new(k, indices, valid).map_err(|e| Error::format("GAGR", e.to_string()))
}

pub fn encode_params(params: &AttentionParams) -> Result<Vec<u8>> {
    let c = params.channels();
    let mut out = Vec::with_capacity(12 + 3 * c * c * 4);
    out.extend_from_slice(PARAMS_MAGIC);
    put_u32(&mut out, c, "GASA")?;
    put_u32(&mut out, params.heads(), "GASA")?;
    for v in params.to_flat() {
        put_f32(&mut out, v);
    }
    Ok(out)
}

pub fn decode_params(bytes: &[u8]) -> Result<AttentionParams> {
    let mut cur = Cursor::new("GASA", bytes, PARAMS_MAGIC)?;
    let c = cur.u32()? as usize;
    let h = cur.u32()? as usize;
    let count = c.checked_mul(c).and_then(|x| x.checked_mul(3)).ok_or_else(|| Error::format("GASA", "dimensions overflow"))?;
    cur.expect_remaining(count, 4)?;
    let flat = (0..count).map(|_| cur.f32()).collect::<Result<Vec<_>>>()?;
    AttentionParams::from_flat(c, h, &flat).map_err(|e| Error::format("GASA", e.to_string()))
}

fn join(values: impl IntoIterator<Item = f64>) -> String {
    values.into_iter().map(|v| v.to_string()).collect::<Vec<_>>().join(" ")
}

/// Calibration as `KEY: values` lines. Reals are written in shortest
/// round-trip form, so a parse returns the identical rig.
pub fn encode_calibration(rig: &CalibrationRig) -> String {
    let row_major = |m: &Matrix3<f64>| join((0..3).flat_map(|r| (0..3).map(move |c| m[(r, c)])));
    format!(
        "INTRINSICS: {}\nROTATION: {}\nTRANSLATION: {}\nSCALE: {}\nIMAGE: {} {}\n",
        row_major(rig.intrinsics()),
        row_major(rig.rotation()),
        join(rig.translation().iter().copied()),
        rig.scale(),
        rig.image_width(),
        rig.image_height()
    )
}

/// Parses calibration text. Blank lines and `#` comments are skipped; every
/// key must appear exactly once. Rotations are accepted within 1e-6 of
/// orthonormal.
pub fn decode_calibration(text: &str) -> Result<CalibrationRig> {
    const KEYS: [(&str, usize); 5] = [("INTRINSICS", 9), ("ROTATION", 9), ("TRANSLATION", 3), ("SCALE", 1), ("IMAGE", 2)];
    let mut found: [Option<Vec<f64>>; 5] = Default::default();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let bad = |m: String| Error::Calibration(format!("line {}: {m}", lineno + 1));
        let (key, rest) = line.split_once(':').ok_or_else(|| bad("expected `KEY: values`".into()))?;
        let key = key.trim();
        let slot = KEYS.iter().position(|(k, _)| *k == key).ok_or_else(|| bad(format!("unknown key `{key}`")))?;
        if found[slot].is_some() {
            return Err(bad(format!("duplicate key `{key}`")));
        }
        let values = rest
            .split_whitespace()
            .map(|t| t.parse::<f64>().map_err(|_| bad(format!("`{t}` is not a number"))))
            .collect::<Result<Vec<_>>>()?;
        if values.len() != KEYS[slot].1 {
            return Err(bad(format!("{key} needs {} values, got {}", KEYS[slot].1, values.len())));
        }
        found[slot] = Some(values);
    }
    let mut vals = Vec::with_capacity(5);
    for (slot, (key, _)) in found.into_iter().zip(KEYS) {
        vals.push(slot.ok_or_else(|| Error::Calibration(format!("missing key {key}")))?);
    }
    let intrinsics = Matrix3::from_row_slice(&vals[0]);
    let rotation = Matrix3::from_row_slice(&vals[1]);
    let translation = Vector3::from_row_slice(&vals[2]);
    let dim = |v: f64| {
        if v.fract() == 0.0 && v >= 1.0 && v <= u32::MAX as f64 {
            Ok(v as u32)
        } else {
            Err(Error::Calibration(format!("image dimension {v} is not a positive integer")))
        }
    };
    CalibrationRig::with_tolerance(
        intrinsics,
        rotation,
        translation,
        vals[3][0],
        dim(vals[4][0])?,
        dim(vals[4][1])?,
        FILE_ROTATION_TOLERANCE,
    )
}

pub fn write_ground_truth(gt: &GroundTruth, out: impl Write) -> Result<()> {
    let err = |e: csv::Error| Error::format("ground truth CSV", e.to_string());
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["index", "class", "px", "py"]).map_err(err)?;
    for r in &gt.rows {
        w.write_record([r.index.to_string(), r.class.to_string(), r.px.to_string(), r.py.to_string()])
            .map_err(err)?;
    }
    w.flush().map_err(|e| Error::format("ground truth CSV", e.to_string()))
}

pub fn read_ground_truth(input: impl Read) -> Result<GroundTruth> {
    let fail = |m: String| Error::format("ground truth CSV", m);
    let mut r = csv::Reader::from_reader(input);
    let headers = r.headers().map_err(|e| fail(e.to_string()))?.clone();
    if headers.iter().collect::<Vec<_>>() != ["index", "class", "px", "py"] {
        return Err(fail(format!("unexpected header {headers:?}")));
    }
    let mut rows = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| fail(e.to_string()))?;
        let field = |j: usize| rec.get(j).unwrap_or("");
        let parse_err = |j: usize| fail(format!("row {}: bad field `{}`", i + 1, field(j)));
        rows.push(GroundTruthRow {
            index: field(0).parse().map_err(|_| parse_err(0))?,
            class: field(1).parse().map_err(|_| parse_err(1))?,
            px: field(2).parse().map_err(|_| parse_err(2))?,
            py: field(3).parse().map_err(|_| parse_err(3))?,
        });
    }
    Ok(GroundTruth { rows })
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_point_cloud(path: &Path) -> Result<PointSet> {
    decode_point_cloud(&read_file(path)?)
}

pub fn load_feature_map(path: &Path) -> Result<ImageFeatureMap> {
    decode_feature_map(&read_file(path)?)
}

pub fn load_graph(path: &Path) -> Result<NeighborGraph> {
    decode_graph(&read_file(path)?)
}

pub fn load_params(path: &Path) -> Result<AttentionParams> {
    decode_params(&read_file(path)?)
}

pub fn load_calibration(path: &Path) -> Result<CalibrationRig> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    decode_calibration(&text)
}

pub fn load_ground_truth(path: &Path) -> Result<GroundTruth> {
    read_ground_truth(read_all(fs::File::open(path).map_err(|e| Error::io(path, e))?, "ground truth CSV")?.as_slice())
}

pub fn save_ground_truth(path: &Path, gt: &GroundTruth) -> Result<()> {
    let mut buf = Vec::new();
    write_ground_truth(gt, &mut buf)?;
    write_file(path, &buf)
}
