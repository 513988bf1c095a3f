//! File formats and coordinate preprocessing.
//!
//! Record streams are line-delimited JSON: a header line carrying
//! `schema_version`, the record `kind` and the producing config hash,
//! followed by one record object per line. Fields a reader does not know
//! are carried through unchanged on rewrite.
//!
//! Tensor files are `b"LENSTNSR"`, `u32` version, `u32` rank, `rank` x `u64`
//! dims, then the values as little-endian `f32`, row-major.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::afp::{CenterLabel, DenseTargetMaps, FeatureMap};
use crate::error::{Error, Result};
use crate::geometry::{Box2D, Box3D};

pub const SCHEMA_VERSION: u32 = 1;
pub const TENSOR_MAGIC: &[u8; 8] = b"LENSTNSR";
pub const TENSOR_VERSION: u32 = 1;
const MAX_TENSOR_RANK: u32 = 8;

/// Target in-plane resolution in mm per pixel.
pub const TARGET_PIXEL_SPACING_MM: f64 = 0.8;
/// Target slice interval in mm.
pub const TARGET_SLICE_INTERVAL_MM: f64 = 2.0;

const HU_MIN: f64 = -1024.0;
const HU_MAX: f64 = 3071.0;

/// Identifies one image volume (series) and its lineage.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct VolumeKey {
    pub patient_id: String,
    pub study_id: String,
    pub series_id: String,
    pub volume_id: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VolumeMeta {
    #[serde(flatten)]
    pub key: VolumeKey,
    pub slice_count: usize,
    pub pixel_spacing_mm: f64,
    pub slice_interval_mm: f64,
}

impl VolumeMeta {
    pub fn validate(&self) -> Result<()> {
        let k = &self.key;
        for (name, id) in [
            ("patient_id", &k.patient_id),
            ("study_id", &k.study_id),
            ("series_id", &k.series_id),
            ("volume_id", &k.volume_id),
        ] {
            if id.is_empty() {
                return Err(Error::invalid(format!("{name} must be non-empty")));
            }
        }
        if !(self.pixel_spacing_mm > 0.0 && self.pixel_spacing_mm.is_finite()) {
            return Err(Error::invalid(format!("pixel spacing must be positive, got {}", self.pixel_spacing_mm)));
        }
        if !(self.slice_interval_mm > 0.0 && self.slice_interval_mm.is_finite()) {
            return Err(Error::invalid(format!("slice interval must be positive, got {}", self.slice_interval_mm)));
        }
        Ok(())
    }
}

/// Maps a Hounsfield value linearly from [-1024, 3071] onto [0, 255], clamping outside.
pub fn window_intensity(hu: f64) -> f64 {
    ((hu - HU_MIN) / (HU_MAX - HU_MIN) * 255.0).clamp(0.0, 255.0)
}

/// Rescales coordinates from a volume's native spacing to 0.8 mm pixels and 2 mm slices.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GeometryNormalizer {
    pub xy_scale: f64,
    pub z_scale: f64,
}

impl GeometryNormalizer {
    pub fn for_volume(meta: &VolumeMeta) -> Result<Self> {
        meta.validate()?;
        Ok(GeometryNormalizer {
            xy_scale: meta.pixel_spacing_mm / TARGET_PIXEL_SPACING_MM,
            z_scale: meta.slice_interval_mm / TARGET_SLICE_INTERVAL_MM,
        })
    }

    pub fn box2d(&self, b: &Box2D) -> Box2D {
        let s = self.xy_scale;
        Box2D { cx: b.cx * s, cy: b.cy * s, w: b.w * s, h: b.h * s }
    }

    /// Slice `i` covers `[i, i + 1)` in native units; returns the slice
    /// holding the start of that interval after rescaling.
    pub fn slice(&self, slice: i64) -> i64 {
        (slice as f64 * self.z_scale).floor() as i64
    }

    pub fn box3d(&self, b: &Box3D) -> Box3D {
        let f = self.box2d(&b.footprint());
        let z_min = self.slice(b.z_min);
        let z_max = (((b.z_max + 1) as f64 * self.z_scale).ceil() as i64 - 1).max(z_min);
        Box3D { cx: f.cx, cy: f.cy, w: f.w, h: f.h, z_min, z_max }
    }

    pub fn slice_count(&self, count: usize) -> usize {
        ((count as f64 * self.z_scale).ceil() as usize).max(1)
    }
}

pub fn normalize_geometry(meta: &VolumeMeta, boxes: &[Box3D]) -> Result<(Vec<Box3D>, VolumeMeta)> {
    let n = GeometryNormalizer::for_volume(meta)?;
    let out = boxes.iter().map(|b| n.box3d(b)).collect();
    let meta = VolumeMeta {
        key: meta.key.clone(),
        slice_count: n.slice_count(meta.slice_count),
        pixel_spacing_mm: TARGET_PIXEL_SPACING_MM,
        slice_interval_mm: TARGET_SLICE_INTERVAL_MM,
    };
    Ok((out, meta))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StreamHeader {
    pub schema_version: u32,
    pub kind: String,
    pub config_hash: String,
}

/// A typed record plus any fields the type does not know about.
#[derive(Debug, Clone, PartialEq)]
pub struct Record<T> {
    pub value: T,
    pub extra: BTreeMap<String, Value>,
}

impl<T> Record<T> {
    pub fn new(value: T) -> Self {
        Record { value, extra: BTreeMap::new() }
    }
}

impl<T: Serialize> Record<T> {
    fn to_line(&self) -> Result<String> {
        let mut obj = match serde_json::to_value(&self.value).map_err(|e| Error::format(e.to_string()))? {
            Value::Object(m) => m,
            other => return Err(Error::format(format!("record must serialize to an object, got {other}"))),
        };
        for (k, v) in &self.extra {
            obj.entry(k.clone()).or_insert_with(|| v.clone());
        }
        // sorted keys keep output byte-stable
        let sorted: BTreeMap<String, Value> = obj.into_iter().collect();
        serde_json::to_string(&sorted).map_err(|e| Error::format(e.to_string()))
    }
}

impl<T: Serialize + DeserializeOwned> Record<T> {
    fn from_object(obj: Map<String, Value>) -> std::result::Result<Self, String> {
        let value: T = serde_json::from_value(Value::Object(obj.clone())).map_err(|e| e.to_string())?;
        let known = match serde_json::to_value(&value).map_err(|e| e.to_string())? {
            Value::Object(m) => m,
            _ => Map::new(),
        };
        let extra = obj.into_iter().filter(|(k, _)| !known.contains_key(k)).collect();
        Ok(Record { value, extra })
    }
}

pub fn write_stream<W: Write, T: Serialize>(
    mut out: W,
    kind: &str,
    config_hash: &str,
    records: &[Record<T>],
) -> Result<()> {
    let header = StreamHeader {
        schema_version: SCHEMA_VERSION,
        kind: kind.to_string(),
        config_hash: config_hash.to_string(),
    };
    let header = serde_json::to_value(&header).map_err(|e| Error::format(e.to_string()))?;
    writeln!(out, "{header}")?;
    for r in records {
        writeln!(out, "{}", r.to_line()?)?;
    }
    out.flush()?;
    Ok(())
}

/// Reads a stream, checking the schema version and, when given, the record kind.
pub fn read_stream<R: Read, T: Serialize + DeserializeOwned>(
    input: R,
    expected_kind: Option<&str>,
) -> Result<(StreamHeader, Vec<Record<T>>)> {
    let mut lines = BufReader::new(input).lines();
    let first = lines
        .next()
        .ok_or_else(|| Error::format("missing stream header"))??;
    let header: StreamHeader =
        serde_json::from_str(&first).map_err(|e| Error::format(format!("malformed header: {e}")))?;
    if header.schema_version != SCHEMA_VERSION {
        return Err(Error::format(format!("unknown schema version {}", header.schema_version)));
    }
    if let Some(kind) = expected_kind {
        if header.kind != kind {
            return Err(Error::format(format!("expected '{kind}' records, found '{}'", header.kind)));
        }
    }
    let mut records = Vec::new();
    for (n, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let lineno = n + 2;
        let obj = match serde_json::from_str::<Value>(&line) {
            Ok(Value::Object(m)) => m,
            Ok(_) => return Err(Error::format(format!("line {lineno}: record is not an object"))),
            Err(e) => return Err(Error::format(format!("line {lineno}: {e}"))),
        };
        records.push(Record::from_object(obj).map_err(|e| Error::format(format!("line {lineno}: {e}")))?);
    }
    Ok((header, records))
}

pub fn write_stream_file<T: Serialize + Clone>(path: &Path, kind: &str, config_hash: &str, values: &[T]) -> Result<()> {
    let records: Vec<Record<T>> = values.iter().cloned().map(Record::new).collect();
    let mut buf = Vec::new();
    write_stream(&mut buf, kind, config_hash, &records)?;
    fs::write(path, buf)?;
    Ok(())
}

pub fn read_stream_file<T: Serialize + DeserializeOwned>(path: &Path, kind: &str) -> Result<(StreamHeader, Vec<T>)> {
    let file = fs::File::open(path)?;
    let (header, records) = read_stream(file, Some(kind))?;
    Ok((header, records.into_iter().map(|r| r.value).collect()))
}

/// Dense row-major `f32` array with explicit dimensions.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub dims: Vec<u64>,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn new(dims: Vec<u64>, data: Vec<f32>) -> Result<Self> {
        let expected = dims.iter().try_fold(1u64, |acc, &d| acc.checked_mul(d));
        if expected != Some(data.len() as u64) {
            return Err(Error::invalid(format!("dims {dims:?} do not match {} values", data.len())));
        }
        Ok(Tensor { dims, data })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + 8 * self.dims.len() + 4 * self.data.len());
        out.extend_from_slice(TENSOR_MAGIC);
        out.extend_from_slice(&TENSOR_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.dims.len() as u32).to_le_bytes());
        for d in &self.dims {
            out.extend_from_slice(&d.to_le_bytes());
        }
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cursor = bytes;
        let mut take = |n: usize, what: &str| -> Result<&[u8]> {
            if cursor.len() < n {
                return Err(Error::format(format!("truncated tensor: missing {what}")));
            }
            let (head, rest) = cursor.split_at(n);
            cursor = rest;
            Ok(head)
        };
        if take(8, "magic")? != TENSOR_MAGIC {
            return Err(Error::format("bad tensor magic bytes"));
        }
        let version = u32::from_le_bytes(take(4, "version")?.try_into().unwrap());
        if version != TENSOR_VERSION {
            return Err(Error::format(format!("unknown tensor version {version}")));
        }
        let rank = u32::from_le_bytes(take(4, "rank")?.try_into().unwrap());
        if rank > MAX_TENSOR_RANK {
            return Err(Error::format(format!("tensor rank {rank} exceeds {MAX_TENSOR_RANK}")));
        }
        let mut dims = Vec::with_capacity(rank as usize);
        for _ in 0..rank {
            dims.push(u64::from_le_bytes(take(8, "dims")?.try_into().unwrap()));
        }
        let count = dims
            .iter()
            .try_fold(1u64, |acc, &d| acc.checked_mul(d))
            .filter(|&c| c <= (usize::MAX / 4) as u64)
            .ok_or_else(|| Error::format("tensor dims overflow"))? as usize;
        let payload = take(4 * count, "payload")?;
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if !cursor.is_empty() {
            return Err(Error::format(format!("{} trailing bytes after tensor payload", cursor.len())));
        }
        Ok(Tensor { dims, data })
    }

    pub fn write_file(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn read_file(path: &Path) -> Result<Self> {
        Tensor::from_bytes(&fs::read(path)?)
    }

    fn hw(&self, channels: Option<u64>) -> Result<(usize, usize)> {
        match (self.dims.as_slice(), channels) {
            ([h, w], None) => Ok((*w as usize, *h as usize)),
            ([h, w, c], Some(k)) if *c == k => Ok((*w as usize, *h as usize)),
            _ => Err(Error::format(format!("unexpected tensor shape {:?}", self.dims))),
        }
    }
}

/// `[height, width]` tensor from a scalar map.
pub fn scalar_map_to_tensor(map: &FeatureMap<f64>) -> Tensor {
    Tensor {
        dims: vec![map.height as u64, map.width as u64],
        data: map.data.iter().map(|&v| v as f32).collect(),
    }
}

pub fn tensor_to_scalar_map(t: &Tensor) -> Result<FeatureMap<f64>> {
    let (w, h) = t.hw(None)?;
    FeatureMap::from_vec(w, h, t.data.iter().map(|&v| f64::from(v)).collect())
}

/// `[height, width, 4]` tensor from a regression map.
pub fn box_map_to_tensor(map: &FeatureMap<[f64; 4]>) -> Tensor {
    Tensor {
        dims: vec![map.height as u64, map.width as u64, 4],
        data: map.data.iter().flat_map(|v| v.iter().map(|&x| x as f32)).collect(),
    }
}

pub fn tensor_to_box_map(t: &Tensor) -> Result<FeatureMap<[f64; 4]>> {
    let (w, h) = t.hw(Some(4))?;
    let data = t
        .data
        .chunks_exact(4)
        .map(|c| [f64::from(c[0]), f64::from(c[1]), f64::from(c[2]), f64::from(c[3])])
        .collect();
    FeatureMap::from_vec(w, h, data)
}

/// Target maps as a `[height, width, 6]` tensor: label code, mask, 4 distances.
pub fn targets_to_tensor(t: &DenseTargetMaps) -> Tensor {
    let mut data = Vec::with_capacity(t.width * t.height * 6);
    for i in 0..t.width * t.height {
        data.push(t.centerness.data[i].code());
        data.push(if t.regression_mask.data[i] { 1.0 } else { 0.0 });
        data.extend(t.regression.data[i].iter().map(|&v| v as f32));
    }
    Tensor { dims: vec![t.height as u64, t.width as u64, 6], data }
}

pub fn tensor_to_targets(t: &Tensor, stride: f64) -> Result<DenseTargetMaps> {
    let (w, h) = t.hw(Some(6))?;
    let mut labels = Vec::with_capacity(w * h);
    let mut mask = Vec::with_capacity(w * h);
    let mut reg = Vec::with_capacity(w * h);
    for c in t.data.chunks_exact(6) {
        labels.push(CenterLabel::from_code(c[0]).ok_or_else(|| Error::format(format!("bad label code {}", c[0])))?);
        mask.push(c[1] != 0.0);
        reg.push([f64::from(c[2]), f64::from(c[3]), f64::from(c[4]), f64::from(c[5])]);
    }
    Ok(DenseTargetMaps {
        width: w,
        height: h,
        stride,
        centerness: FeatureMap::from_vec(w, h, labels)?,
        regression: FeatureMap::from_vec(w, h, reg)?,
        regression_mask: FeatureMap::from_vec(w, h, mask)?,
    })
}
