//! Binary formats and the scene manifest.
//!
//! All binary files are little-endian and start with a four-byte magic:
//!
//! | magic  | header                         | payload                 |
//! |--------|--------------------------------|-------------------------|
//! | `PCB1` | u32 N                          | N x (x, y, z) f32       |
//! | `BEV1` | i32 t, u32 cells_x, u32 cells_y| cells_x*cells_y x 2 f32 |
//! | `FLW1` | u32 H, u32 W                   | H*W x (du, dv) f32      |
//! | `MSK1` | u32 N                          | N x u8 (0/1/2)          |
//! | `SEG1` | u32 N, i32 N_r                 | N x i32                 |
//!
//! Real values are stored as f32, so a save/load round trip is exact for
//! values that are representable in f32.
//!
//! The manifest is UTF-8 text with one `key: value` per line; per-camera
//! blocks are introduced by `camera <id>:` and indented by two spaces. Paths
//! are relative to the manifest's directory.
//!
//! ```text
//! bevss-scene: 1
//! grid: -32 32 -32 32 -3 2 0.25
//! frames: -1 1 2
//! frame_interval_s: 0.5
//! cloud 0: clouds/frame_0.pcb
//! gt_field 1: gt/field_1.bev
//! gt_mask 0: gt/mask_0.msk
//! gt_instances 0: gt/instances_0.seg
//! camera 0:
//!   size: 480 240
//!   proj 0: <12 numbers, row-major 3x4>
//!   flow 0: flows/cam0_frame_0.flw
//! ```

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::Matrix3x4;
use thiserror::Error;

use crate::error::{Error, Result};
use crate::grid::{BevGridSpec, BevMotionField, FrameSet, Point3, PointCloud, Vec2};
use crate::masks::{PointStatus, StaticDynamicMask};
use crate::pieces::RigidPieces;
use crate::projection::{CalibratedCamera, FlowImage};
use crate::scene::{CameraRig, GroundTruth, SceneBundle};

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{0}: file not found")]
    NotFound(PathBuf),

    #[error("{path}: bad magic {found:?}, expected {expected:?}")]
    BadMagic {
        path: PathBuf,
        expected: String,
        found: String,
    },

    #[error("{path}: truncated, needed {needed} bytes but found {found}")]
    Truncated {
        path: PathBuf,
        needed: usize,
        found: usize,
    },

    #[error("{path}: inconsistent counts: {detail}")]
    InconsistentCounts { path: PathBuf, detail: String },

    #[error("{path}:{line}: {detail}")]
    Manifest {
        path: PathBuf,
        line: usize,
        detail: String,
    },

    #[error("{path}: {source}")]
    Os {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

fn inconsistent(path: &Path, detail: impl Into<String>) -> Error {
    IoError::InconsistentCounts {
        path: path.to_path_buf(),
        detail: detail.into(),
    }
    .into()
}

pub fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            IoError::NotFound(path.to_path_buf()).into()
        } else {
            IoError::Os {
                path: path.to_path_buf(),
                source: e,
            }
            .into()
        }
    })
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| IoError::Os {
            path: dir.to_path_buf(),
            source: e,
        })?;
    }
    fs::write(path, bytes).map_err(|e| {
        IoError::Os {
            path: path.to_path_buf(),
            source: e,
        }
        .into()
    })
}

// ---------------------------------------------------------------------------
// Byte-level helpers

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn new(bytes: &'a [u8], path: &'a Path, magic: &[u8; 4]) -> Result<Self> {
        if bytes.len() < 4 {
            return Err(IoError::Truncated {
                path: path.to_path_buf(),
                needed: 4,
                found: bytes.len(),
            }
            .into());
        }
        if &bytes[..4] != magic {
            return Err(IoError::BadMagic {
                path: path.to_path_buf(),
                expected: String::from_utf8_lossy(magic).into_owned(),
                found: String::from_utf8_lossy(&bytes[..4]).into_owned(),
            }
            .into());
        }
        Ok(Self { bytes, pos: 4, path })
    }

    /// Fail unless exactly `n` more bytes remain.
    fn expect_remaining(&self, n: usize) -> Result<()> {
        let have = self.bytes.len() - self.pos;
        if have < n {
            return Err(IoError::Truncated {
                path: self.path.to_path_buf(),
                needed: self.pos + n,
                found: self.bytes.len(),
            }
            .into());
        }
        if have > n {
            return Err(inconsistent(self.path, format!("{} trailing bytes after declared payload", have - n)));
        }
        Ok(())
    }

    fn take<const N: usize>(&mut self) -> Result<[u8; N]> {
        if self.bytes.len() - self.pos < N {
            return Err(IoError::Truncated {
                path: self.path.to_path_buf(),
                needed: self.pos + N,
                found: self.bytes.len(),
            }
            .into());
        }
        let mut out = [0u8; N];
        out.copy_from_slice(&self.bytes[self.pos..self.pos + N]);
        self.pos += N;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take()?))
    }

    fn i32(&mut self) -> Result<i32> {
        Ok(i32::from_le_bytes(self.take()?))
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take()?))
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take::<1>()?[0])
    }
}

fn payload_len(path: &Path, count: u64, each: u64) -> Result<usize> {
    count
        .checked_mul(each)
        .and_then(|n| usize::try_from(n).ok())
        .ok_or_else(|| inconsistent(path, "declared size overflows"))
}

fn put_f32(out: &mut Vec<u8>, v: f64) {
    out.extend_from_slice(&(v as f32).to_le_bytes());
}

// ---------------------------------------------------------------------------
// Formats

pub fn encode_cloud(cloud: &PointCloud) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + 12 * cloud.len());
    out.extend_from_slice(b"PCB1");
    out.extend_from_slice(&(cloud.len() as u32).to_le_bytes());
    for p in &cloud.points {
        put_f32(&mut out, p.x);
        put_f32(&mut out, p.y);
        put_f32(&mut out, p.z);
    }
    out
}

pub fn decode_cloud(bytes: &[u8], frame_index: i32, path: &Path) -> Result<PointCloud> {
    let mut r = Reader::new(bytes, path, b"PCB1")?;
    let n = r.u32()? as u64;
    r.expect_remaining(payload_len(path, n, 12)?)?;
    let mut pts = Vec::with_capacity(n as usize);
    for _ in 0..n {
        let (x, y, z) = (r.f32()?, r.f32()?, r.f32()?);
        pts.push(Point3::new(x as f64, y as f64, z as f64));
    }
    PointCloud::new(frame_index, pts)
}

pub fn encode_field(field: &BevMotionField) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + 8 * field.values.len());
    out.extend_from_slice(b"BEV1");
    out.extend_from_slice(&field.time_offset.to_le_bytes());
    out.extend_from_slice(&(field.spec.cells_x as u32).to_le_bytes());
    out.extend_from_slice(&(field.spec.cells_y as u32).to_le_bytes());
    for v in &field.values {
        put_f32(&mut out, v.x);
        put_f32(&mut out, v.y);
    }
    out
}

/// Decode a field whose grid layout must match `spec`.
pub fn decode_field(bytes: &[u8], spec: &BevGridSpec, path: &Path) -> Result<BevMotionField> {
    let mut r = Reader::new(bytes, path, b"BEV1")?;
    let t = r.i32()?;
    let (cx, cy) = (r.u32()? as usize, r.u32()? as usize);
    if cx != spec.cells_x || cy != spec.cells_y {
        return Err(inconsistent(
            path,
            format!("field is {cx}x{cy} cells, grid is {}x{}", spec.cells_x, spec.cells_y),
        ));
    }
    r.expect_remaining(payload_len(path, (cx * cy) as u64, 8)?)?;
    let mut values = Vec::with_capacity(cx * cy);
    for _ in 0..cx * cy {
        let (x, y) = (r.f32()?, r.f32()?);
        values.push(Vec2::new(x as f64, y as f64));
    }
    BevMotionField::from_values(*spec, t, values)
}

pub fn encode_flow(img: &FlowImage) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + 4 * img.data.len());
    out.extend_from_slice(b"FLW1");
    out.extend_from_slice(&img.height.to_le_bytes());
    out.extend_from_slice(&img.width.to_le_bytes());
    for v in &img.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_flow(bytes: &[u8], camera_id: usize, frame: i32, path: &Path) -> Result<FlowImage> {
    let mut r = Reader::new(bytes, path, b"FLW1")?;
    let (h, w) = (r.u32()?, r.u32()?);
    let n = payload_len(path, h as u64 * w as u64, 2)?;
    r.expect_remaining(n * 4)?;
    let mut data = Vec::with_capacity(n);
    for _ in 0..n {
        data.push(r.f32()?);
    }
    FlowImage::from_data(camera_id, frame, frame + 1, w, h, data)
}

pub fn encode_mask(mask: &StaticDynamicMask) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + mask.len());
    out.extend_from_slice(b"MSK1");
    out.extend_from_slice(&(mask.len() as u32).to_le_bytes());
    out.extend(mask.status.iter().map(|&s| s as u8));
    out
}

pub fn decode_mask(bytes: &[u8], frame_index: i32, path: &Path) -> Result<StaticDynamicMask> {
    let mut r = Reader::new(bytes, path, b"MSK1")?;
    let n = r.u32()? as usize;
    r.expect_remaining(n)?;
    let mut status = Vec::with_capacity(n);
    for i in 0..n {
        let b = r.u8()?;
        status.push(PointStatus::from_u8(b).ok_or_else(|| inconsistent(path, format!("status {b} at point {i}")))?);
    }
    Ok(StaticDynamicMask { frame_index, status })
}

/// SEG1 carries any per-point labelling with `-1` for "none"; it stores both
/// rigid pieces and ground-truth instance ids.
pub fn encode_labels(labels: &[i32], count: usize) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + 4 * labels.len());
    out.extend_from_slice(b"SEG1");
    out.extend_from_slice(&(labels.len() as u32).to_le_bytes());
    out.extend_from_slice(&(count as i32).to_le_bytes());
    for l in labels {
        out.extend_from_slice(&l.to_le_bytes());
    }
    out
}

pub fn decode_labels(bytes: &[u8], path: &Path) -> Result<(Vec<i32>, usize)> {
    let mut r = Reader::new(bytes, path, b"SEG1")?;
    let n = r.u32()? as usize;
    let count = r.i32()?;
    if count < 0 {
        return Err(inconsistent(path, format!("negative label count {count}")));
    }
    r.expect_remaining(payload_len(path, n as u64, 4)?)?;
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let l = r.i32()?;
        if l < -1 || l >= count {
            return Err(inconsistent(path, format!("label {l} at point {i} outside -1..{count}")));
        }
        labels.push(l);
    }
    Ok((labels, count as usize))
}

pub fn encode_pieces(p: &RigidPieces) -> Vec<u8> {
    encode_labels(&p.labels, p.piece_count)
}

pub fn decode_pieces(bytes: &[u8], frame_index: i32, path: &Path) -> Result<RigidPieces> {
    let (labels, piece_count) = decode_labels(bytes, path)?;
    Ok(RigidPieces {
        frame_index,
        labels,
        piece_count,
    })
}

pub fn save_cloud(path: &Path, cloud: &PointCloud) -> Result<()> {
    write_file(path, &encode_cloud(cloud))
}

pub fn load_cloud(path: &Path, frame_index: i32) -> Result<PointCloud> {
    decode_cloud(&read_file(path)?, frame_index, path)
}

pub fn save_field(path: &Path, field: &BevMotionField) -> Result<()> {
    write_file(path, &encode_field(field))
}

pub fn load_field(path: &Path, spec: &BevGridSpec) -> Result<BevMotionField> {
    decode_field(&read_file(path)?, spec, path)
}

pub fn save_flow(path: &Path, img: &FlowImage) -> Result<()> {
    write_file(path, &encode_flow(img))
}

pub fn load_flow(path: &Path, camera_id: usize, frame: i32) -> Result<FlowImage> {
    decode_flow(&read_file(path)?, camera_id, frame, path)
}

pub fn save_mask(path: &Path, mask: &StaticDynamicMask) -> Result<()> {
    write_file(path, &encode_mask(mask))
}

pub fn load_mask(path: &Path, frame_index: i32) -> Result<StaticDynamicMask> {
    decode_mask(&read_file(path)?, frame_index, path)
}

pub fn save_pieces(path: &Path, p: &RigidPieces) -> Result<()> {
    write_file(path, &encode_pieces(p))
}

pub fn load_pieces(path: &Path, frame_index: i32) -> Result<RigidPieces> {
    decode_pieces(&read_file(path)?, frame_index, path)
}

// ---------------------------------------------------------------------------
// Manifest

pub const MANIFEST_VERSION: &str = "1";

#[derive(Debug, Clone, PartialEq)]
pub struct CameraEntry {
    pub camera_id: usize,
    pub width: u32,
    pub height: u32,
    pub proj: BTreeMap<i32, Matrix3x4<f64>>,
    pub flows: BTreeMap<i32, PathBuf>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub grid: BevGridSpec,
    pub frame_set: FrameSet,
    pub clouds: BTreeMap<i32, PathBuf>,
    pub cameras: Vec<CameraEntry>,
    pub gt_fields: BTreeMap<i32, PathBuf>,
    pub gt_masks: BTreeMap<i32, PathBuf>,
    pub gt_instances: BTreeMap<i32, PathBuf>,
}

/// Frame index as used in file names: `-1` becomes `m1`.
pub fn frame_tag(t: i32) -> String {
    if t < 0 {
        format!("m{}", -(t as i64))
    } else {
        t.to_string()
    }
}

impl Manifest {
    pub fn to_text(&self) -> String {
        let g = &self.grid;
        let mut s = String::new();
        let _ = writeln!(s, "bevss-scene: {MANIFEST_VERSION}");
        let _ = writeln!(
            s,
            "grid: {} {} {} {} {} {} {}",
            g.x_min, g.x_max, g.y_min, g.y_max, g.z_min, g.z_max, g.cell_size
        );
        let offs: Vec<String> = self.frame_set.offsets.iter().map(|t| t.to_string()).collect();
        let _ = writeln!(s, "frames: {}", offs.join(" "));
        let _ = writeln!(s, "frame_interval_s: {}", self.frame_set.frame_interval_s);
        let paths = |s: &mut String, key: &str, m: &BTreeMap<i32, PathBuf>, indent: &str| {
            for (t, p) in m {
                let _ = writeln!(s, "{indent}{key} {t}: {}", p.display());
            }
        };
        paths(&mut s, "cloud", &self.clouds, "");
        paths(&mut s, "gt_field", &self.gt_fields, "");
        paths(&mut s, "gt_mask", &self.gt_masks, "");
        paths(&mut s, "gt_instances", &self.gt_instances, "");
        for cam in &self.cameras {
            let _ = writeln!(s, "camera {}:", cam.camera_id);
            let _ = writeln!(s, "  size: {} {}", cam.width, cam.height);
            for (t, m) in &cam.proj {
                // row-major
                let nums: Vec<String> = (0..3).flat_map(|r| (0..4).map(move |c| (r, c))).map(|(r, c)| m[(r, c)].to_string()).collect();
                let _ = writeln!(s, "  proj {t}: {}", nums.join(" "));
            }
            paths(&mut s, "flow", &cam.flows, "  ");
        }
        s
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let err = |line: usize, detail: String| -> Error {
            IoError::Manifest {
                path: path.to_path_buf(),
                line,
                detail,
            }
            .into()
        };
        let mut version = None;
        let mut grid = None;
        let mut offsets = None;
        let mut interval = None;
        let mut clouds = BTreeMap::new();
        let mut gt_fields = BTreeMap::new();
        let mut gt_masks = BTreeMap::new();
        let mut gt_instances = BTreeMap::new();
        let mut cameras: Vec<CameraEntry> = Vec::new();

        fn nums<T: std::str::FromStr>(s: &str) -> Option<Vec<T>> {
            s.split_whitespace().map(|x| x.parse().ok()).collect()
        }

        for (i, raw) in text.lines().enumerate() {
            let ln = i + 1;
            if raw.trim().is_empty() || raw.trim_start().starts_with('#') {
                continue;
            }
            let indented = raw.starts_with(' ') || raw.starts_with('\t');
            let (key, value) = raw
                .trim()
                .split_once(':')
                .ok_or_else(|| err(ln, format!("expected `key: value`, got {raw:?}")))?;
            let value = value.trim();
            let mut words = key.split_whitespace();
            let name = words.next().unwrap_or("");
            let index = words.next();
            if words.next().is_some() {
                return Err(err(ln, format!("malformed key {key:?}")));
            }
            let frame = |ln: usize| -> Result<i32> {
                index
                    .and_then(|s| s.parse().ok())
                    .ok_or_else(|| err(ln, format!("`{name}` needs a frame index")))
            };
            if indented {
                let cam = cameras
                    .last_mut()
                    .ok_or_else(|| err(ln, "indented line outside a camera block".into()))?;
                match name {
                    "size" => {
                        let v: Vec<u32> = nums(value).filter(|v: &Vec<u32>| v.len() == 2).ok_or_else(|| err(ln, "size needs two integers".into()))?;
                        cam.width = v[0];
                        cam.height = v[1];
                    }
                    "proj" => {
                        let t = frame(ln)?;
                        let v: Vec<f64> = nums(value)
                            .filter(|v: &Vec<f64>| v.len() == 12)
                            .ok_or_else(|| err(ln, "proj needs 12 numbers".into()))?;
                        if cam.proj.insert(t, Matrix3x4::from_row_slice(&v)).is_some() {
                            return Err(err(ln, format!("duplicate proj for frame {t}")));
                        }
                    }
                    "flow" => {
                        let t = frame(ln)?;
                        if cam.flows.insert(t, PathBuf::from(value)).is_some() {
                            return Err(err(ln, format!("duplicate flow for frame {t}")));
                        }
                    }
                    other => return Err(err(ln, format!("unknown camera key {other:?}"))),
                }
                continue;
            }
            match name {
                "bevss-scene" => version = Some(value.to_string()),
                "grid" => {
                    let v: Vec<f64> = nums(value)
                        .filter(|v: &Vec<f64>| v.len() == 7)
                        .ok_or_else(|| err(ln, "grid needs 7 numbers".into()))?;
                    grid = Some(BevGridSpec::new((v[0], v[1]), (v[2], v[3]), (v[4], v[5]), v[6]).map_err(|e| err(ln, e.to_string()))?);
                }
                "frames" => offsets = Some(nums::<i32>(value).ok_or_else(|| err(ln, "frames needs integers".into()))?),
                "frame_interval_s" => interval = Some(value.parse::<f64>().map_err(|e| err(ln, e.to_string()))?),
                "cloud" | "gt_field" | "gt_mask" | "gt_instances" => {
                    let t = frame(ln)?;
                    let map = match name {
                        "cloud" => &mut clouds,
                        "gt_field" => &mut gt_fields,
                        "gt_mask" => &mut gt_masks,
                        _ => &mut gt_instances,
                    };
                    if map.insert(t, PathBuf::from(value)).is_some() {
                        return Err(err(ln, format!("duplicate {name} for frame {t}")));
                    }
                }
                "camera" => {
                    if !value.is_empty() {
                        return Err(err(ln, "camera header takes no value".into()));
                    }
                    let id: usize = index
                        .and_then(|s| s.parse().ok())
                        .ok_or_else(|| err(ln, "camera needs an integer id".into()))?;
                    if cameras.iter().any(|c| c.camera_id == id) {
                        return Err(err(ln, format!("duplicate camera {id}")));
                    }
                    cameras.push(CameraEntry {
                        camera_id: id,
                        width: 0,
                        height: 0,
                        proj: BTreeMap::new(),
                        flows: BTreeMap::new(),
                    });
                }
                other => return Err(err(ln, format!("unknown key {other:?}"))),
            }
        }
        match version.as_deref() {
            Some(MANIFEST_VERSION) => {}
            Some(v) => return Err(err(1, format!("unsupported manifest version {v:?}"))),
            None => return Err(err(1, "missing `bevss-scene` version line".into())),
        }
        let grid = grid.ok_or_else(|| err(0, "missing `grid`".into()))?;
        let frame_set = FrameSet::new(
            offsets.ok_or_else(|| err(0, "missing `frames`".into()))?,
            interval.ok_or_else(|| err(0, "missing `frame_interval_s`".into()))?,
        )
        .map_err(|e| err(0, e.to_string()))?;
        if let Some(first) = cameras.first() {
            let frames: Vec<i32> = first.proj.keys().copied().collect();
            for c in &cameras {
                if c.width == 0 || c.height == 0 {
                    return Err(err(0, format!("camera {} has no size", c.camera_id)));
                }
                if c.proj.keys().copied().collect::<Vec<_>>() != frames {
                    return Err(inconsistent(
                        path,
                        format!("camera {} is calibrated for different frames than camera {}", c.camera_id, first.camera_id),
                    ));
                }
            }
        }
        Ok(Self {
            grid,
            frame_set,
            clouds,
            cameras,
            gt_fields,
            gt_masks,
            gt_instances,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = read_file(path)?;
        let text = String::from_utf8(bytes).map_err(|_| IoError::Manifest {
            path: path.to_path_buf(),
            line: 0,
            detail: "not UTF-8".into(),
        })?;
        Self::parse(&text, path)
    }
}

/// Resolve `path` against the directory of `manifest` unless absolute.
fn resolve(manifest: &Path, path: &Path) -> PathBuf {
    if path.is_absolute() {
        path.to_path_buf()
    } else {
        manifest.parent().unwrap_or(Path::new(".")).join(path)
    }
}

/// Accept either a manifest file or a directory containing `manifest`.
pub fn manifest_path(path: &Path) -> PathBuf {
    if path.is_dir() {
        path.join("manifest")
    } else {
        path.to_path_buf()
    }
}

pub fn load_scene(path: &Path) -> Result<SceneBundle> {
    let path = manifest_path(path);
    let m = Manifest::load(&path)?;
    let clouds = m
        .clouds
        .iter()
        .map(|(&t, p)| Ok((t, load_cloud(&resolve(&path, p), t)?)))
        .collect::<Result<BTreeMap<_, _>>>()?;
    let mut cameras = Vec::with_capacity(m.cameras.len());
    for c in &m.cameras {
        let calib = c
            .proj
            .iter()
            .map(|(&t, pm)| Ok((t, CalibratedCamera::new(c.camera_id, t, *pm, c.width, c.height)?)))
            .collect::<Result<BTreeMap<_, _>>>()?;
        let mut flows = BTreeMap::new();
        for (&t, p) in &c.flows {
            let full = resolve(&path, p);
            let img = load_flow(&full, c.camera_id, t)?;
            if img.width != c.width || img.height != c.height {
                return Err(inconsistent(
                    &full,
                    format!("flow is {}x{}, camera {} is {}x{}", img.width, img.height, c.camera_id, c.width, c.height),
                ));
            }
            flows.insert(t, img);
        }
        cameras.push(CameraRig {
            camera_id: c.camera_id,
            width: c.width,
            height: c.height,
            calib,
            flows,
        });
    }
    let has_gt = !(m.gt_fields.is_empty() && m.gt_masks.is_empty() && m.gt_instances.is_empty());
    let ground_truth = if has_gt {
        let mut gt = GroundTruth::default();
        for (&t, p) in &m.gt_fields {
            let f = load_field(&resolve(&path, p), &m.grid)?;
            if f.time_offset != t {
                return Err(inconsistent(&resolve(&path, p), format!("field for offset {t} says {}", f.time_offset)));
            }
            gt.fields.insert(t, f);
        }
        for (&t, p) in &m.gt_masks {
            gt.masks.insert(t, load_mask(&resolve(&path, p), t)?);
        }
        for (&t, p) in &m.gt_instances {
            gt.instances.insert(t, decode_labels(&read_file(&resolve(&path, p))?, &resolve(&path, p))?.0);
        }
        Some(gt)
    } else {
        None
    };
    let scene = SceneBundle {
        grid: m.grid,
        frame_set: m.frame_set,
        clouds,
        cameras,
        ground_truth,
    };
    scene.validate().map_err(|e| inconsistent(&path, e.to_string()))?;
    Ok(scene)
}

/// Write every part of `scene` under `dir` and return the manifest path.
pub fn save_scene(scene: &SceneBundle, dir: &Path) -> Result<PathBuf> {
    let mut m = Manifest {
        grid: scene.grid,
        frame_set: scene.frame_set.clone(),
        clouds: BTreeMap::new(),
        cameras: Vec::new(),
        gt_fields: BTreeMap::new(),
        gt_masks: BTreeMap::new(),
        gt_instances: BTreeMap::new(),
    };
    for (&t, c) in &scene.clouds {
        let rel = PathBuf::from(format!("clouds/frame_{}.pcb", frame_tag(t)));
        save_cloud(&dir.join(&rel), c)?;
        m.clouds.insert(t, rel);
    }
    for rig in &scene.cameras {
        let mut entry = CameraEntry {
            camera_id: rig.camera_id,
            width: rig.width,
            height: rig.height,
            proj: rig.calib.iter().map(|(&t, c)| (t, c.proj)).collect(),
            flows: BTreeMap::new(),
        };
        for (&t, f) in &rig.flows {
            let rel = PathBuf::from(format!("flows/cam{}_frame_{}.flw", rig.camera_id, frame_tag(t)));
            save_flow(&dir.join(&rel), f)?;
            entry.flows.insert(t, rel);
        }
        m.cameras.push(entry);
    }
    if let Some(gt) = &scene.ground_truth {
        for (&t, f) in &gt.fields {
            let rel = PathBuf::from(format!("gt/field_{}.bev", frame_tag(t)));
            save_field(&dir.join(&rel), f)?;
            m.gt_fields.insert(t, rel);
        }
        for (&t, mask) in &gt.masks {
            let rel = PathBuf::from(format!("gt/mask_{}.msk", frame_tag(t)));
            save_mask(&dir.join(&rel), mask)?;
            m.gt_masks.insert(t, rel);
        }
        for (&t, ids) in &gt.instances {
            let rel = PathBuf::from(format!("gt/instances_{}.seg", frame_tag(t)));
            let count = ids.iter().map(|&l| l + 1).max().unwrap_or(0).max(0) as usize;
            write_file(&dir.join(&rel), &encode_labels(ids, count))?;
            m.gt_instances.insert(t, rel);
        }
    }
    let manifest = dir.join("manifest");
    write_file(&manifest, m.to_text().as_bytes())?;
    Ok(manifest)
}

/// File name of a predicted or ground-truth field for offset `t`.
pub fn field_file_name(t: i32) -> String {
    format!("field_{}.bev", frame_tag(t))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn p() -> &'static Path {
        Path::new("mem")
    }

    #[test]
    fn bad_magic_and_truncation() {
        let cloud = PointCloud::new(0, vec![Point3::new(1.0, 2.0, 3.0)]).unwrap();
        let mut bytes = encode_cloud(&cloud);
        bytes[..4].copy_from_slice(b"XXXX");
        assert!(matches!(decode_cloud(&bytes, 0, p()), Err(Error::Io(IoError::BadMagic { .. }))));

        let img = FlowImage::zeros(0, 0, 1, 3, 2);
        let bytes = encode_flow(&img);
        let short = &bytes[..bytes.len() - 4];
        assert!(matches!(decode_flow(short, 0, 0, p()), Err(Error::Io(IoError::Truncated { .. }))));

        let mut long = encode_mask(&StaticDynamicMask::uniform(0, 3, PointStatus::Static));
        long.push(0);
        assert!(matches!(decode_mask(&long, 0, p()), Err(Error::Io(IoError::InconsistentCounts { .. }))));

        assert!(matches!(decode_mask(b"MS", 0, p()), Err(Error::Io(IoError::Truncated { .. }))));
    }

    #[test]
    fn missing_file_is_not_found() {
        let e = load_cloud(Path::new("/nonexistent/definitely/here.pcb"), 0).unwrap_err();
        assert!(matches!(e, Error::Io(IoError::NotFound(_))));
    }

    #[test]
    fn field_layout_is_checked() {
        let spec = BevGridSpec::new((0.0, 1.0), (0.0, 2.0), (-1.0, 1.0), 0.5).unwrap();
        let f = BevMotionField::zeros(spec, 1);
        let bytes = encode_field(&f);
        assert_eq!(decode_field(&bytes, &spec, p()).unwrap(), f);
        assert!(decode_field(&bytes, &BevGridSpec::default(), p()).is_err());
    }

    #[test]
    fn segment_labels_are_range_checked() {
        let bytes = encode_labels(&[0, 1, 5], 2);
        assert!(decode_labels(&bytes, p()).is_err());
        assert_eq!(decode_labels(&encode_labels(&[0, -1, 1], 2), p()).unwrap(), (vec![0, -1, 1], 2));
    }

    #[test]
    fn manifest_text_round_trip() {
        let mut proj = BTreeMap::new();
        proj.insert(0, Matrix3x4::from_fn(|r, c| (r * 4 + c) as f64 * 0.1 + 1.0 / 3.0));
        proj.insert(1, Matrix3x4::from_fn(|r, c| -((r + c) as f64) * 1e-7));
        let m = Manifest {
            grid: BevGridSpec::default(),
            frame_set: FrameSet::default(),
            clouds: [(0, PathBuf::from("c0.pcb")), (-1, PathBuf::from("cm1.pcb"))].into_iter().collect(),
            cameras: vec![CameraEntry {
                camera_id: 3,
                width: 64,
                height: 32,
                proj,
                flows: [(0, PathBuf::from("f.flw"))].into_iter().collect(),
            }],
            gt_fields: [(2, PathBuf::from("g.bev"))].into_iter().collect(),
            gt_masks: BTreeMap::new(),
            gt_instances: BTreeMap::new(),
        };
        let text = m.to_text();
        assert_eq!(Manifest::parse(&text, p()).unwrap(), m);
    }

    #[test]
    fn manifest_rejects_mismatched_calibration_counts() {
        let text = "bevss-scene: 1\ngrid: -32 32 -32 32 -3 2 0.25\nframes: 1 2\nframe_interval_s: 0.5\n\
                    camera 0:\n  size: 4 4\n  proj 0: 1 0 0 0 0 1 0 0 0 0 1 0\n\
                    camera 1:\n  size: 4 4\n";
        assert!(matches!(Manifest::parse(text, p()), Err(Error::Io(IoError::InconsistentCounts { .. }))));
        assert!(Manifest::parse("grid: 1\n", p()).is_err());
    }

    proptest! {
        #[test]
        fn cloud_round_trip(raw in prop::collection::vec((any::<f32>(), any::<f32>(), any::<f32>()), 0..200)) {
            let pts: Vec<Point3> = raw.iter().filter(|r| r.0.is_finite() && r.1.is_finite() && r.2.is_finite())
                .map(|r| Point3::new(r.0 as f64, r.1 as f64, r.2 as f64)).collect();
            let c = PointCloud::new(4, pts).unwrap();
            let back = decode_cloud(&encode_cloud(&c), 4, p()).unwrap();
            prop_assert_eq!(&back, &c);
            prop_assert_eq!(encode_cloud(&back), encode_cloud(&c));
        }

        #[test]
        fn flow_round_trip(h in 1u32..6, w in 1u32..6, seed in any::<u32>()) {
            let data: Vec<f32> = (0..h * w * 2).map(|i| (i.wrapping_mul(seed) % 1000) as f32 * 0.37 - 100.0).collect();
            let img = FlowImage::from_data(2, -1, 0, w, h, data).unwrap();
            prop_assert_eq!(decode_flow(&encode_flow(&img), 2, -1, p()).unwrap(), img);
        }

        #[test]
        fn mask_and_piece_round_trip(codes in prop::collection::vec(0u8..3, 0..100), nr in 1i32..10) {
            let m = StaticDynamicMask { frame_index: 2, status: codes.iter().map(|&c| PointStatus::from_u8(c).unwrap()).collect() };
            prop_assert_eq!(decode_mask(&encode_mask(&m), 2, p()).unwrap(), m);
            let pieces = RigidPieces { frame_index: 0, labels: codes.iter().map(|&c| c as i32 % nr - 1).collect(), piece_count: nr as usize };
            prop_assert_eq!(decode_pieces(&encode_pieces(&pieces), 0, p()).unwrap(), pieces);
        }

        #[test]
        fn field_round_trip(vals in prop::collection::vec((-5.0f32..5.0, -5.0f32..5.0), 12), t in -3i32..4) {
            let spec = BevGridSpec::new((0.0, 0.75), (0.0, 1.0), (-1.0, 1.0), 0.25).unwrap();
            let f = BevMotionField::from_values(spec, t, vals.iter().map(|v| Vec2::new(v.0 as f64, v.1 as f64)).collect()).unwrap();
            prop_assert_eq!(decode_field(&encode_field(&f), &spec, p()).unwrap(), f);
        }
    }
}
