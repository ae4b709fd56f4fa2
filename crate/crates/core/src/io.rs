//! File formats.
//!
//! Point clouds use a line-oriented text table or a little-endian binary
//! variant with the same schema. Everything else is JSON wrapped in a
//! `{"format": ..., "data": ...}` envelope; floats are written in shortest
//! round-trip form so a save/load cycle is bit-exact.

use std::collections::HashSet;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use nalgebra::Vector3;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geom::{self, Plane, Pose};
use crate::projection::{CameraIntrinsics, LidarPoint, LidarProjectionParams, PointCloud, ScanLayout};
use crate::solver::{CalibrationReport, MeasurementPair, SolverConfig};
use crate::synth::SweepTable;
use crate::target::{BoardSpec, CornerSet, PatchSelection, TargetError};

pub const CLOUD_TEXT_HEADER: &str = "# planecal-cloud v1";
pub const CLOUD_BINARY_MAGIC: &[u8; 8] = b"PLCLOUD\x01";

pub const CORNERS_FORMAT: &str = "planecal-corners/1";
pub const MEASUREMENTS_FORMAT: &str = "planecal-measurements/1";
pub const SOLVER_CONFIG_FORMAT: &str = "planecal-solver-config/1";
pub const REPORT_FORMAT: &str = "planecal-report/1";
pub const SWEEP_FORMAT: &str = "planecal-sweep/1";
pub const MANIFEST_FORMAT: &str = "planecal-dataset/1";
pub const GROUND_TRUTH_FORMAT: &str = "planecal-ground-truth/1";

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("{path}: at `{field}`: {message}")]
    Schema {
        path: PathBuf,
        field: String,
        message: String,
    },
    #[error("{path}: expected format `{expected}`, found `{found}`")]
    Format {
        path: PathBuf,
        expected: String,
        found: String,
    },
    #[error("{path}: point cloud is empty")]
    EmptyCloud { path: PathBuf },
    #[error("{path}: points carry no ring ids and the file declares no scan layout")]
    MissingRing { path: PathBuf },
    #[error("{path}: {source}")]
    Target {
        path: PathBuf,
        #[source]
        source: TargetError,
    },
    #[error("{path}: {message}")]
    Invalid { path: PathBuf, message: String },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> IoError + '_ {
    move |source| IoError::Io {
        path: path.to_owned(),
        source,
    }
}

#[derive(Serialize)]
struct EnvelopeOut<'a, T> {
    format: &'a str,
    data: &'a T,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct EnvelopeIn<T> {
    #[serde(rename = "format")]
    _format: String,
    data: T,
}

#[derive(Deserialize)]
struct FormatOnly {
    format: String,
}

/// Serializes `value` into a versioned JSON document.
pub fn to_json_string<T: Serialize>(format: &str, value: &T) -> String {
    serde_json::to_string_pretty(&EnvelopeOut { format, data: value })
        .expect("plain data serializes")
}

/// Parses a versioned JSON document; `path` is used for error messages only.
pub fn from_json_str<T: DeserializeOwned>(path: &Path, format: &str, text: &str) -> Result<T, IoError> {
    let schema = |field: String, e: &serde_json::Error| IoError::Schema {
        path: path.to_owned(),
        field,
        message: e.to_string(),
    };
    let head: FormatOnly = serde_json::from_str(text).map_err(|e| schema("format".into(), &e))?;
    if head.format != format {
        return Err(IoError::Format {
            path: path.to_owned(),
            expected: format.into(),
            found: head.format,
        });
    }
    let de = &mut serde_json::Deserializer::from_str(text);
    let doc: EnvelopeIn<T> = serde_path_to_error::deserialize(de)
        .map_err(|e| schema(e.path().to_string(), e.inner()))?;
    Ok(doc.data)
}

pub fn save_json<T: Serialize>(path: &Path, format: &str, value: &T) -> Result<(), IoError> {
    let mut text = to_json_string(format, value);
    text.push('\n');
    fs::write(path, text).map_err(io_err(path))
}

pub fn load_json<T: DeserializeOwned>(path: &Path, format: &str) -> Result<T, IoError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    from_json_str(path, format, &text)
}

pub fn save_corners(path: &Path, corners: &CornerSet) -> Result<(), IoError> {
    save_json(path, CORNERS_FORMAT, corners)
}

/// Loads a corner set and checks the corner count against the board.
pub fn load_corners(path: &Path) -> Result<CornerSet, IoError> {
    let set: CornerSet = load_json(path, CORNERS_FORMAT)?;
    set.validate().map_err(|source| IoError::Target {
        path: path.to_owned(),
        source,
    })?;
    Ok(set)
}

pub fn save_measurements(path: &Path, pairs: &[MeasurementPair]) -> Result<(), IoError> {
    save_json(path, MEASUREMENTS_FORMAT, &pairs)
}

pub fn load_measurements(path: &Path) -> Result<Vec<MeasurementPair>, IoError> {
    let pairs: Vec<MeasurementPair> = load_json(path, MEASUREMENTS_FORMAT)?;
    let mut ids = HashSet::new();
    for p in &pairs {
        if !ids.insert(p.id.as_str()) {
            return Err(IoError::Invalid {
                path: path.to_owned(),
                message: format!("duplicate measurement id `{}`", p.id),
            });
        }
    }
    Ok(pairs)
}

pub fn save_solver_config(path: &Path, cfg: &SolverConfig) -> Result<(), IoError> {
    save_json(path, SOLVER_CONFIG_FORMAT, cfg)
}

pub fn load_solver_config(path: &Path) -> Result<SolverConfig, IoError> {
    let cfg: SolverConfig = load_json(path, SOLVER_CONFIG_FORMAT)?;
    cfg.validate().map_err(|e| IoError::Invalid {
        path: path.to_owned(),
        message: e.to_string(),
    })?;
    Ok(cfg)
}

pub fn save_report(path: &Path, report: &CalibrationReport) -> Result<(), IoError> {
    save_json(path, REPORT_FORMAT, report)
}

pub fn load_report(path: &Path) -> Result<CalibrationReport, IoError> {
    load_json(path, REPORT_FORMAT)
}

pub fn save_sweep(path: &Path, table: &SweepTable) -> Result<(), IoError> {
    save_json(path, SWEEP_FORMAT, table)
}

pub fn load_sweep(path: &Path) -> Result<SweepTable, IoError> {
    load_json(path, SWEEP_FORMAT)
}

// ---------------------------------------------------------------------------
// point clouds

/// Writes the text cloud format. The ring column is written only when every
/// point carries a ring id.
pub fn write_cloud_text<W: Write>(out: &mut W, cloud: &PointCloud) -> std::io::Result<()> {
    let rings = cloud.has_rings();
    writeln!(out, "{CLOUD_TEXT_HEADER}")?;
    if let Some(layout) = cloud.layout {
        writeln!(out, "width {}", layout.width)?;
        writeln!(out, "n_rings {}", layout.n_rings)?;
    }
    writeln!(out, "fields {}", if rings { "x y z ring intensity" } else { "x y z intensity" })?;
    writeln!(out, "points {}", cloud.len())?;
    for p in &cloud.points {
        let [x, y, z] = [p.position.x, p.position.y, p.position.z];
        match p.ring.filter(|_| rings) {
            Some(r) => writeln!(out, "{x:?} {y:?} {z:?} {r} {:?}", p.intensity)?,
            None => writeln!(out, "{x:?} {y:?} {z:?} {:?}", p.intensity)?,
        }
    }
    Ok(())
}

pub fn write_cloud_binary<W: Write>(out: &mut W, cloud: &PointCloud) -> std::io::Result<()> {
    let rings = cloud.has_rings();
    out.write_all(CLOUD_BINARY_MAGIC)?;
    let flags = u32::from(rings) | (u32::from(cloud.layout.is_some()) << 1);
    out.write_all(&flags.to_le_bytes())?;
    let layout = cloud.layout.unwrap_or(ScanLayout { width: 0, n_rings: 0 });
    out.write_all(&(layout.width as u64).to_le_bytes())?;
    out.write_all(&(layout.n_rings as u64).to_le_bytes())?;
    out.write_all(&(cloud.len() as u64).to_le_bytes())?;
    for p in &cloud.points {
        for c in p.position.iter() {
            out.write_all(&c.to_le_bytes())?;
        }
        if rings {
            out.write_all(&p.ring.unwrap_or(0).to_le_bytes())?;
        }
        out.write_all(&p.intensity.to_le_bytes())?;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CloudEncoding {
    Text,
    Binary,
}

pub fn save_cloud(path: &Path, cloud: &PointCloud, encoding: CloudEncoding) -> Result<(), IoError> {
    let file = fs::File::create(path).map_err(io_err(path))?;
    let mut out = BufWriter::new(file);
    match encoding {
        CloudEncoding::Text => write_cloud_text(&mut out, cloud),
        CloudEncoding::Binary => write_cloud_binary(&mut out, cloud),
    }
    .and_then(|_| out.flush())
    .map_err(io_err(path))
}

/// Loads a text or binary cloud, detected from the first bytes.
///
/// Points without a ring column get `index / width` from the declared layout.
pub fn load_cloud(path: &Path) -> Result<PointCloud, IoError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    parse_cloud(path, &bytes)
}

/// In-memory counterpart of [`load_cloud`]; `path` only labels errors.
pub fn parse_cloud(path: &Path, bytes: &[u8]) -> Result<PointCloud, IoError> {
    let cloud = if bytes.starts_with(CLOUD_BINARY_MAGIC) {
        parse_cloud_binary(path, bytes)?
    } else {
        parse_cloud_text(path, BufReader::new(bytes))?
    };
    finish_cloud(path, cloud)
}

fn finish_cloud(path: &Path, mut cloud: PointCloud) -> Result<PointCloud, IoError> {
    if cloud.is_empty() {
        return Err(IoError::EmptyCloud { path: path.to_owned() });
    }
    if let Some(layout) = cloud.layout {
        if cloud.len() != layout.width * layout.n_rings {
            return Err(IoError::Invalid {
                path: path.to_owned(),
                message: format!(
                    "layout {}x{} does not match {} points",
                    layout.n_rings,
                    layout.width,
                    cloud.len()
                ),
            });
        }
    }
    if !cloud.has_rings() {
        let layout = cloud.layout.ok_or_else(|| IoError::MissingRing { path: path.to_owned() })?;
        for (i, p) in cloud.points.iter_mut().enumerate() {
            p.ring = Some((i / layout.width) as u32);
        }
    }
    Ok(cloud)
}

pub fn parse_cloud_text<R: BufRead>(path: &Path, reader: R) -> Result<PointCloud, IoError> {
    let parse_err = |line: usize, message: String| IoError::Parse {
        path: path.to_owned(),
        line,
        message,
    };
    let mut width = None;
    let mut n_rings = None;
    let mut has_ring = None;
    let mut declared = None;
    let mut points = Vec::new();
    let mut saw_header = false;
    for (i, line) in reader.lines().enumerate() {
        let lineno = i + 1;
        let line = line.map_err(io_err(path))?;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        if !saw_header {
            if line != CLOUD_TEXT_HEADER {
                return Err(parse_err(lineno, format!("expected header `{CLOUD_TEXT_HEADER}`")));
            }
            saw_header = true;
            continue;
        }
        if line.starts_with('#') {
            continue;
        }
        let mut words = line.split_whitespace();
        let key = words.next().unwrap_or_default();
        if declared.is_none() {
            let rest: Vec<&str> = words.collect();
            let count = |rest: &[&str]| -> Result<usize, IoError> {
                match rest {
                    [v] => v.parse().map_err(|_| parse_err(lineno, format!("bad value for `{key}`"))),
                    _ => Err(parse_err(lineno, format!("`{key}` takes one value"))),
                }
            };
            match key {
                "width" => width = Some(count(&rest)?),
                "n_rings" => n_rings = Some(count(&rest)?),
                "fields" => {
                    has_ring = Some(match rest.as_slice() {
                        ["x", "y", "z", "ring", "intensity"] => true,
                        ["x", "y", "z", "intensity"] => false,
                        _ => return Err(parse_err(lineno, "unsupported field list".into())),
                    })
                }
                "points" => {
                    declared = Some(count(&rest)?);
                    points.reserve(declared.unwrap_or(0).min(1 << 24));
                }
                _ => return Err(parse_err(lineno, format!("unknown header key `{key}`"))),
            }
            continue;
        }
        let has_ring = has_ring.ok_or_else(|| parse_err(lineno, "missing `fields` line".into()))?;
        let record = points.len();
        let fields: Vec<&str> = line.split_whitespace().collect();
        let expected = if has_ring { 5 } else { 4 };
        if fields.len() != expected {
            return Err(parse_err(
                lineno,
                format!("record {record}: expected {expected} fields, got {}", fields.len()),
            ));
        }
        let num = |s: &str, name: &str| -> Result<f64, IoError> {
            match s.parse::<f64>() {
                Ok(v) if v.is_finite() => Ok(v),
                _ => Err(parse_err(lineno, format!("record {record}: invalid {name} `{s}`"))),
            }
        };
        let position = Vector3::new(num(fields[0], "x")?, num(fields[1], "y")?, num(fields[2], "z")?);
        let (ring, intensity) = if has_ring {
            let ring = fields[3]
                .parse::<u32>()
                .map_err(|_| parse_err(lineno, format!("record {record}: invalid ring `{}`", fields[3])))?;
            (Some(ring), num(fields[4], "intensity")?)
        } else {
            (None, num(fields[3], "intensity")?)
        };
        points.push(LidarPoint {
            position,
            ring,
            intensity,
        });
    }
    if !saw_header {
        return Ok(PointCloud::default());
    }
    if let Some(n) = declared {
        if n != points.len() {
            return Err(parse_err(0, format!("header declares {n} points, found {}", points.len())));
        }
    }
    let layout = match (width, n_rings) {
        (Some(width), Some(n_rings)) if width > 0 && n_rings > 0 => Some(ScanLayout { width, n_rings }),
        (None, None) => None,
        _ => return Err(parse_err(0, "`width` and `n_rings` must both be positive".into())),
    };
    Ok(PointCloud { points, layout })
}

fn parse_cloud_binary(path: &Path, bytes: &[u8]) -> Result<PointCloud, IoError> {
    let mut reader = &bytes[CLOUD_BINARY_MAGIC.len()..];
    let truncated = |_| IoError::Parse {
        path: path.to_owned(),
        line: 0,
        message: "truncated binary cloud".into(),
    };
    let mut u32_buf = [0u8; 4];
    let mut u64_buf = [0u8; 8];
    reader.read_exact(&mut u32_buf).map_err(truncated)?;
    let flags = u32::from_le_bytes(u32_buf);
    let mut next_u64 = |reader: &mut &[u8]| -> Result<u64, IoError> {
        reader.read_exact(&mut u64_buf).map_err(truncated)?;
        Ok(u64::from_le_bytes(u64_buf))
    };
    let width = next_u64(&mut reader)? as usize;
    let n_rings = next_u64(&mut reader)? as usize;
    let count = next_u64(&mut reader)? as usize;
    let has_ring = flags & 1 != 0;
    let record = 32 + if has_ring { 4 } else { 0 };
    if reader.len() != count.saturating_mul(record) {
        return Err(truncated(std::io::ErrorKind::UnexpectedEof.into()));
    }
    let f64_at = |b: &[u8], o: usize| f64::from_le_bytes(b[o..o + 8].try_into().expect("8 bytes"));
    let mut points = Vec::with_capacity(count);
    for (index, chunk) in reader.chunks_exact(record).enumerate() {
        let position = Vector3::new(f64_at(chunk, 0), f64_at(chunk, 8), f64_at(chunk, 16));
        let (ring, intensity) = if has_ring {
            let r = u32::from_le_bytes(chunk[24..28].try_into().expect("4 bytes"));
            (Some(r), f64_at(chunk, 28))
        } else {
            (None, f64_at(chunk, 24))
        };
        if !position.iter().all(|c| c.is_finite()) || !intensity.is_finite() {
            return Err(IoError::Parse {
                path: path.to_owned(),
                line: 0,
                message: format!("record {index}: non-finite value"),
            });
        }
        points.push(LidarPoint {
            position,
            ring,
            intensity,
        });
    }
    let layout = (flags & 2 != 0).then_some(ScanLayout { width, n_rings });
    if layout.is_some_and(|l| l.width == 0 || l.n_rings == 0) {
        return Err(IoError::Invalid {
            path: path.to_owned(),
            message: "scan layout must be positive".into(),
        });
    }
    Ok(PointCloud { points, layout })
}

// ---------------------------------------------------------------------------
// datasets

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FrameEntry {
    pub id: String,
    /// Relative to the manifest directory.
    pub cloud: String,
    pub corners: String,
    /// Suggested LiDAR seed on the target, if known.
    #[serde(default)]
    pub seed_hint: Option<PatchSelection>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub intrinsics: CameraIntrinsics,
    pub lidar: LidarProjectionParams,
    pub board: BoardSpec,
    pub frames: Vec<FrameEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FrameTruth {
    pub id: String,
    /// Camera-from-board.
    #[serde(with = "geom::serde_pose")]
    pub board_pose: Pose,
    pub lidar_plane: Plane,
    pub camera_plane: Plane,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroundTruth {
    /// Camera-from-LiDAR.
    #[serde(with = "geom::serde_pose")]
    pub extrinsic: Pose,
    pub frames: Vec<FrameTruth>,
}

pub fn save_ground_truth(path: &Path, truth: &GroundTruth) -> Result<(), IoError> {
    save_json(path, GROUND_TRUTH_FORMAT, truth)
}

pub fn load_ground_truth(path: &Path) -> Result<GroundTruth, IoError> {
    load_json(path, GROUND_TRUTH_FORMAT)
}

pub const MANIFEST_FILE: &str = "manifest.json";
pub const GROUND_TRUTH_FILE: &str = "ground_truth.json";

/// A dataset on disk: the manifest and the directory it resolves paths against.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: DatasetManifest,
}

impl Dataset {
    /// Accepts the dataset directory or the manifest file itself. Checks frame
    /// ids are unique and every referenced file parses.
    pub fn open(path: &Path) -> Result<Self, IoError> {
        let manifest_path = if path.is_dir() { path.join(MANIFEST_FILE) } else { path.to_owned() };
        let root = manifest_path
            .parent()
            .map(Path::to_owned)
            .unwrap_or_default();
        let manifest: DatasetManifest = load_json(&manifest_path, MANIFEST_FORMAT)?;
        let invalid = |message: String| IoError::Invalid {
            path: manifest_path.clone(),
            message,
        };
        manifest.intrinsics.validate().map_err(|e| invalid(e.to_string()))?;
        manifest.lidar.validate().map_err(|e| invalid(e.to_string()))?;
        manifest.board.validate().map_err(|e| invalid(e.to_string()))?;
        let mut ids = HashSet::new();
        for f in &manifest.frames {
            if !ids.insert(f.id.as_str()) {
                return Err(invalid(format!("duplicate frame id `{}`", f.id)));
            }
        }
        let dataset = Self { root, manifest };
        for f in &dataset.manifest.frames {
            dataset.load_frame_cloud(&f.id)?;
            let corners = dataset.load_frame_corners(&f.id)?;
            if corners.board != dataset.manifest.board {
                return Err(invalid(format!("frame `{}` uses a different board", f.id)));
            }
        }
        Ok(dataset)
    }

    pub fn frame(&self, id: &str) -> Option<&FrameEntry> {
        self.manifest.frames.iter().find(|f| f.id == id)
    }

    fn entry(&self, id: &str) -> Result<&FrameEntry, IoError> {
        self.frame(id).ok_or_else(|| IoError::Invalid {
            path: self.root.join(MANIFEST_FILE),
            message: format!("no frame `{id}`"),
        })
    }

    pub fn load_frame_cloud(&self, id: &str) -> Result<PointCloud, IoError> {
        load_cloud(&self.root.join(&self.entry(id)?.cloud))
    }

    pub fn load_frame_corners(&self, id: &str) -> Result<CornerSet, IoError> {
        load_corners(&self.root.join(&self.entry(id)?.corners))
    }

    pub fn ground_truth_path(&self) -> PathBuf {
        self.root.join(GROUND_TRUTH_FILE)
    }
}

/// One frame to be written by [`write_dataset`].
#[derive(Debug, Clone)]
pub struct FrameData {
    pub id: String,
    pub cloud: PointCloud,
    pub corners: CornerSet,
    pub seed_hint: Option<PatchSelection>,
}

/// Writes clouds, corner files and the manifest into `dir` (created if
/// missing) and returns the manifest.
pub fn write_dataset(
    dir: &Path,
    intrinsics: CameraIntrinsics,
    lidar: LidarProjectionParams,
    board: BoardSpec,
    frames: &[FrameData],
    encoding: CloudEncoding,
) -> Result<DatasetManifest, IoError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let ext = match encoding {
        CloudEncoding::Text => "txt",
        CloudEncoding::Binary => "bin",
    };
    let mut entries = Vec::with_capacity(frames.len());
    for f in frames {
        let cloud = format!("{}.cloud.{ext}", f.id);
        let corners = format!("{}.corners.json", f.id);
        save_cloud(&dir.join(&cloud), &f.cloud, encoding)?;
        save_corners(&dir.join(&corners), &f.corners)?;
        entries.push(FrameEntry {
            id: f.id.clone(),
            cloud,
            corners,
            seed_hint: f.seed_hint,
        });
    }
    let manifest = DatasetManifest {
        intrinsics,
        lidar,
        board,
        frames: entries,
    };
    save_json(&dir.join(MANIFEST_FILE), MANIFEST_FORMAT, &manifest)?;
    Ok(manifest)
}
