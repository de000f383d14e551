//! On-disk dataset formats.
//!
//! Everything is deliberately primitive so any tool can consume it:
//!
//! * geometry / metadata: flat `key=value` text, one pair per line,
//!   `#` comments allowed;
//! * projections: one `proj_#####.raw` per view, row-major IEEE-754
//!   single-precision little-endian, `n_v` rows of `n_u` samples, next to a
//!   `dataset.meta` sidecar;
//! * volumes: one `slice_#####.raw` per z-slice, row-major `n_x` x `n_y`
//!   (x fastest), same sample format, same sidecar scheme.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use fdk_core::backprojection::{Volume, VolumeLayout};
use fdk_core::filtering::{Projection, ProjectionKind};
use fdk_core::geometry::{CbctGeometry, GeometryError};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("missing metadata sidecar {0}")]
    MissingMeta(PathBuf),
    #[error("{path}: expected {expected} bytes ({detail}), found {got}")]
    SizeMismatch {
        path: PathBuf,
        expected: u64,
        got: u64,
        detail: String,
    },
    #[error("{path}: {detail}")]
    Malformed { path: PathBuf, detail: String },
    #[error("dataset is {got}, expected {expected}")]
    WrongKind { expected: String, got: String },
    #[error("volume must be i-major before slicing; reshape it first")]
    NeedsReshape,
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

fn io_err(path: &Path, source: std::io::Error) -> IoError {
    IoError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// What a dataset directory holds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DataKind {
    RawProjections,
    FilteredProjections,
    Volume,
}

impl DataKind {
    fn tags(self) -> (&'static str, &'static str) {
        match self {
            DataKind::RawProjections => ("projections", "raw"),
            DataKind::FilteredProjections => ("projections", "filtered"),
            DataKind::Volume => ("volume", "i-major"),
        }
    }
}

/// Sidecar contents: the full scan geometry plus what the payload is.
/// Samples are always little-endian f32.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetMeta {
    pub geom: CbctGeometry,
    pub kind: DataKind,
}

const META_NAME: &str = "dataset.meta";

fn write_geometry_fields(w: &mut impl Write, g: &CbctGeometry) -> std::io::Result<()> {
    writeln!(w, "n_u={}", g.n_u)?;
    writeln!(w, "n_v={}", g.n_v)?;
    writeln!(w, "d_u={}", g.d_u)?;
    writeln!(w, "d_v={}", g.d_v)?;
    writeln!(w, "n_p={}", g.n_p)?;
    writeln!(w, "n_x={}", g.n_x)?;
    writeln!(w, "n_y={}", g.n_y)?;
    writeln!(w, "n_z={}", g.n_z)?;
    writeln!(w, "d_x={}", g.d_x)?;
    writeln!(w, "d_y={}", g.d_y)?;
    writeln!(w, "d_z={}", g.d_z)?;
    writeln!(w, "d={}", g.d)?;
    writeln!(w, "cap_d={}", g.cap_d)?;
    Ok(())
}

/// Writes a standalone geometry file (same keys the sidecar uses).
pub fn write_geometry(path: &Path, g: &CbctGeometry) -> Result<(), IoError> {
    let mut buf = Vec::new();
    write_geometry_fields(&mut buf, g).expect("write to vec");
    fs::write(path, buf).map_err(|e| io_err(path, e))
}

fn parse_pairs(path: &Path) -> Result<Vec<(String, String)>, IoError> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let mut pairs = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(IoError::Malformed {
                path: path.to_path_buf(),
                detail: format!("line {}: expected key=value, got {line:?}", lineno + 1),
            });
        };
        pairs.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(pairs)
}

fn lookup<'a>(pairs: &'a [(String, String)], key: &str, path: &Path) -> Result<&'a str, IoError> {
    pairs
        .iter()
        .find(|(k, _)| k == key)
        .map(|(_, v)| v.as_str())
        .ok_or_else(|| IoError::Malformed {
            path: path.to_path_buf(),
            detail: format!("missing key {key}"),
        })
}

fn parse_field<T: std::str::FromStr>(
    pairs: &[(String, String)],
    key: &str,
    path: &Path,
) -> Result<T, IoError> {
    let raw = lookup(pairs, key, path)?;
    raw.parse().map_err(|_| IoError::Malformed {
        path: path.to_path_buf(),
        detail: format!("key {key}: cannot parse {raw:?}"),
    })
}

fn geometry_from_pairs(pairs: &[(String, String)], path: &Path) -> Result<CbctGeometry, IoError> {
    let g = CbctGeometry {
        n_u: parse_field(pairs, "n_u", path)?,
        n_v: parse_field(pairs, "n_v", path)?,
        d_u: parse_field(pairs, "d_u", path)?,
        d_v: parse_field(pairs, "d_v", path)?,
        n_p: parse_field(pairs, "n_p", path)?,
        n_x: parse_field(pairs, "n_x", path)?,
        n_y: parse_field(pairs, "n_y", path)?,
        n_z: parse_field(pairs, "n_z", path)?,
        d_x: parse_field(pairs, "d_x", path)?,
        d_y: parse_field(pairs, "d_y", path)?,
        d_z: parse_field(pairs, "d_z", path)?,
        d: parse_field(pairs, "d", path)?,
        cap_d: parse_field(pairs, "cap_d", path)?,
    };
    g.validate()?;
    Ok(g)
}

/// Reads a standalone geometry file.
pub fn read_geometry(path: &Path) -> Result<CbctGeometry, IoError> {
    let pairs = parse_pairs(path)?;
    geometry_from_pairs(&pairs, path)
}

pub fn write_meta(dir: &Path, meta: &DatasetMeta) -> Result<(), IoError> {
    let path = dir.join(META_NAME);
    let (kind, tag) = meta.kind.tags();
    let mut buf = Vec::new();
    writeln!(buf, "kind={kind}").expect("vec");
    match meta.kind {
        DataKind::Volume => writeln!(buf, "layout={tag}").expect("vec"),
        _ => writeln!(buf, "state={tag}").expect("vec"),
    }
    writeln!(buf, "dtype=f32le").expect("vec");
    write_geometry_fields(&mut buf, &meta.geom).expect("vec");
    fs::write(&path, buf).map_err(|e| io_err(&path, e))
}

pub fn read_meta(dir: &Path) -> Result<DatasetMeta, IoError> {
    let path = dir.join(META_NAME);
    if !path.exists() {
        return Err(IoError::MissingMeta(path));
    }
    let pairs = parse_pairs(&path)?;
    let geom = geometry_from_pairs(&pairs, &path)?;
    let kind_tag = lookup(&pairs, "kind", &path)?;
    let kind = match kind_tag {
        "projections" => match lookup(&pairs, "state", &path)? {
            "raw" => DataKind::RawProjections,
            "filtered" => DataKind::FilteredProjections,
            other => {
                return Err(IoError::Malformed {
                    path,
                    detail: format!("unknown projection state {other:?}"),
                })
            }
        },
        "volume" => DataKind::Volume,
        other => {
            return Err(IoError::Malformed {
                path,
                detail: format!("unknown dataset kind {other:?}"),
            })
        }
    };
    let dtype = lookup(&pairs, "dtype", &path)?;
    if dtype != "f32le" {
        return Err(IoError::Malformed {
            path,
            detail: format!("unsupported dtype {dtype:?}"),
        });
    }
    Ok(DatasetMeta { geom, kind })
}

fn samples_to_bytes(samples: &[f32]) -> Vec<u8> {
    let mut bytes = Vec::with_capacity(samples.len() * 4);
    for s in samples {
        bytes.extend_from_slice(&s.to_le_bytes());
    }
    bytes
}

fn read_samples(path: &Path, expected: usize, detail: &str) -> Result<Vec<f32>, IoError> {
    let file = File::open(path).map_err(|e| io_err(path, e))?;
    let len = file.metadata().map_err(|e| io_err(path, e))?.len();
    if len != 4 * expected as u64 {
        return Err(IoError::SizeMismatch {
            path: path.to_path_buf(),
            expected: 4 * expected as u64,
            got: len,
            detail: detail.to_string(),
        });
    }
    let mut reader = BufReader::new(file);
    let mut buf = [0u8; 4];
    let mut samples = Vec::with_capacity(expected);
    for _ in 0..expected {
        reader.read_exact(&mut buf).map_err(|e| io_err(path, e))?;
        samples.push(f32::from_le_bytes(buf));
    }
    Ok(samples)
}

pub fn projection_file_name(index: usize) -> String {
    format!("proj_{index:05}.raw")
}

pub fn slice_file_name(k: usize) -> String {
    format!("slice_{k:05}.raw")
}

/// Writes a full projection stack plus sidecar into `dir` (created if
/// needed). All projections must match the geometry's detector and the
/// declared state.
pub fn write_projections(
    projs: &[Projection],
    meta: &DatasetMeta,
    dir: &Path,
) -> Result<(), IoError> {
    let expected_kind = match meta.kind {
        DataKind::RawProjections => ProjectionKind::Raw,
        DataKind::FilteredProjections => ProjectionKind::Filtered,
        DataKind::Volume => {
            return Err(IoError::WrongKind {
                expected: "projections".into(),
                got: "volume".into(),
            })
        }
    };
    let g = &meta.geom;
    if projs.len() != g.n_p {
        return Err(IoError::WrongKind {
            expected: format!("{} projections", g.n_p),
            got: format!("{}", projs.len()),
        });
    }
    for (i, p) in projs.iter().enumerate() {
        if p.kind != expected_kind || p.width != g.n_u || p.height != g.n_v {
            return Err(IoError::WrongKind {
                expected: format!("{expected_kind:?} {}x{}", g.n_u, g.n_v),
                got: format!("projection {i}: {:?} {}x{}", p.kind, p.width, p.height),
            });
        }
    }
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    write_meta(dir, meta)?;
    for (i, p) in projs.iter().enumerate() {
        let path = dir.join(projection_file_name(i));
        let mut w = BufWriter::new(File::create(&path).map_err(|e| io_err(&path, e))?);
        w.write_all(&samples_to_bytes(&p.samples))
            .map_err(|e| io_err(&path, e))?;
    }
    Ok(())
}

/// Reads one projection of a stack without touching its siblings.
pub fn read_projection(
    dir: &Path,
    meta: &DatasetMeta,
    index: usize,
) -> Result<Projection, IoError> {
    let g = &meta.geom;
    let kind = match meta.kind {
        DataKind::RawProjections => ProjectionKind::Raw,
        DataKind::FilteredProjections => ProjectionKind::Filtered,
        DataKind::Volume => {
            return Err(IoError::WrongKind {
                expected: "projections".into(),
                got: "volume".into(),
            })
        }
    };
    let path = dir.join(projection_file_name(index));
    let samples = read_samples(&path, g.n_u * g.n_v, "4*n_u*n_v")?;
    Ok(Projection {
        width: g.n_u,
        height: g.n_v,
        kind,
        samples,
    })
}

/// Reads the whole stack plus sidecar; inverse of [`write_projections`].
pub fn read_projections(dir: &Path) -> Result<(Vec<Projection>, DatasetMeta), IoError> {
    let meta = read_meta(dir)?;
    let projs = (0..meta.geom.n_p)
        .map(|i| read_projection(dir, &meta, i))
        .collect::<Result<Vec<_>, _>>()?;
    Ok((projs, meta))
}

/// A volume-on-disk descriptor.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SliceSet {
    pub dir: PathBuf,
    pub n_z: usize,
    pub n_x: usize,
    pub n_y: usize,
}

/// Writes an i-major volume as `n_z` slice files plus sidecar.
pub fn write_volume_slices(
    vol: &Volume,
    geom: &CbctGeometry,
    dir: &Path,
) -> Result<SliceSet, IoError> {
    if vol.layout != VolumeLayout::IMajor {
        return Err(IoError::NeedsReshape);
    }
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    write_meta(
        dir,
        &DatasetMeta {
            geom: *geom,
            kind: DataKind::Volume,
        },
    )?;
    let plane = vol.n_x * vol.n_y;
    for k in 0..vol.n_z {
        let path = dir.join(slice_file_name(k));
        let slice = &vol.samples[k * plane..(k + 1) * plane];
        let mut w = BufWriter::new(File::create(&path).map_err(|e| io_err(&path, e))?);
        w.write_all(&samples_to_bytes(slice))
            .map_err(|e| io_err(&path, e))?;
    }
    Ok(SliceSet {
        dir: dir.to_path_buf(),
        n_z: vol.n_z,
        n_x: vol.n_x,
        n_y: vol.n_y,
    })
}

/// Reads a sliced volume back; inverse of [`write_volume_slices`].
pub fn read_volume_slices(dir: &Path) -> Result<(Volume, DatasetMeta), IoError> {
    let meta = read_meta(dir)?;
    if meta.kind != DataKind::Volume {
        return Err(IoError::WrongKind {
            expected: "volume".into(),
            got: "projections".into(),
        });
    }
    let g = &meta.geom;
    let mut vol = Volume::zeros(g.n_x, g.n_y, g.n_z, VolumeLayout::IMajor);
    let plane = g.n_x * g.n_y;
    for k in 0..g.n_z {
        let path = dir.join(slice_file_name(k));
        let samples = read_samples(&path, plane, "4*n_x*n_y")?;
        vol.samples[k * plane..(k + 1) * plane].copy_from_slice(&samples);
    }
    Ok((vol, meta))
}

/// Streams slices into a directory as the pipeline's row roots finish.
/// The directory and sidecar must already exist.
pub struct FileSliceSink {
    dir: PathBuf,
    n_x: usize,
    n_y: usize,
}

impl FileSliceSink {
    pub fn new(dir: &Path, geom: &CbctGeometry) -> Result<Self, IoError> {
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
        write_meta(
            dir,
            &DatasetMeta {
                geom: *geom,
                kind: DataKind::Volume,
            },
        )?;
        Ok(Self {
            dir: dir.to_path_buf(),
            n_x: geom.n_x,
            n_y: geom.n_y,
        })
    }
}

impl crate::pipeline::SliceSink for FileSliceSink {
    fn write_slice(&self, k: usize, plane: &[f32]) -> std::io::Result<()> {
        debug_assert_eq!(plane.len(), self.n_x * self.n_y);
        let path = self.dir.join(slice_file_name(k));
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(&samples_to_bytes(plane))
    }
}
