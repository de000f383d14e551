//! Performance-model parameter files and text reports.
//!
//! A params file is flat `key=value` text. Two forms are accepted:
//!
//! * full machine parameters (`bw_load`, `th_flt`, ..., `r`, `c` plus the
//!   problem sizes) -> the closed-form model is evaluated;
//! * measured stage times (`t_flt`, `t_allgather`, `t_bp`, optional
//!   `t_compute`) -> only the overlap factor is computed.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use fdk_core::backprojection::OpCounter;
use fdk_core::geometry::CbctGeometry;
use fdk_core::perfmodel::{estimate, overlap_delta, PerfBreakdown, PerfParams};

use crate::io::IoError;
use crate::pipeline::PipelineStats;

/// Measured per-stage seconds, as printed by a pipeline run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MeasuredStages {
    pub t_flt: f64,
    pub t_allgather: f64,
    pub t_bp: f64,
    pub t_compute: f64,
}

impl MeasuredStages {
    pub fn delta(&self) -> f64 {
        overlap_delta(self.t_flt, self.t_allgather, self.t_bp, self.t_compute)
    }
}

/// Contents of a params file.
#[derive(Debug, Clone, PartialEq)]
pub enum ParamsFile {
    Model(PerfParams),
    Stages(MeasuredStages),
}

fn get(pairs: &[(String, String)], key: &str) -> Option<String> {
    pairs.iter().find(|(k, _)| k == key).map(|(_, v)| v.clone())
}

fn need<T: std::str::FromStr>(
    pairs: &[(String, String)],
    key: &str,
    path: &Path,
) -> Result<T, IoError> {
    let raw = get(pairs, key).ok_or_else(|| IoError::Malformed {
        path: path.to_path_buf(),
        detail: format!("missing key {key}"),
    })?;
    raw.parse().map_err(|_| IoError::Malformed {
        path: path.to_path_buf(),
        detail: format!("key {key}: cannot parse {raw:?}"),
    })
}

pub fn read_params(path: &Path) -> Result<ParamsFile, IoError> {
    let text = fs::read_to_string(path).map_err(|source| IoError::Io {
        path: path.to_path_buf(),
        source,
    })?;
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

    if get(&pairs, "t_flt").is_some() {
        let t_flt: f64 = need(&pairs, "t_flt", path)?;
        let t_allgather: f64 = need(&pairs, "t_allgather", path)?;
        let t_bp: f64 = need(&pairs, "t_bp", path)?;
        let t_compute = match get(&pairs, "t_compute") {
            Some(_) => need(&pairs, "t_compute", path)?,
            None => t_flt.max(t_allgather).max(t_bp),
        };
        return Ok(ParamsFile::Stages(MeasuredStages {
            t_flt,
            t_allgather,
            t_bp,
            t_compute,
        }));
    }

    let th_trans = match get(&pairs, "th_trans") {
        Some(_) => Some(need(&pairs, "th_trans", path)?),
        None => None,
    };
    Ok(ParamsFile::Model(PerfParams {
        bw_load: need(&pairs, "bw_load", path)?,
        bw_store: need(&pairs, "bw_store", path)?,
        th_flt: need(&pairs, "th_flt", path)?,
        th_bp: need(&pairs, "th_bp", path)?,
        th_allgather: need(&pairs, "th_allgather", path)?,
        th_reduce: need(&pairs, "th_reduce", path)?,
        th_trans,
        bw_pcie: need(&pairs, "bw_pcie", path)?,
        n_pcie: need(&pairs, "n_pcie", path)?,
        n_gpu_per_node: need(&pairs, "n_gpu_per_node", path)?,
        n_cpu_per_node: need(&pairs, "n_cpu_per_node", path)?,
        n_gpus: need(&pairs, "n_gpus", path)?,
        n_nodes: need(&pairs, "n_nodes", path)?,
        n_u: need(&pairs, "n_u", path)?,
        n_v: need(&pairs, "n_v", path)?,
        n_p: need(&pairs, "n_p", path)?,
        n_x: need(&pairs, "n_x", path)?,
        n_y: need(&pairs, "n_y", path)?,
        n_z: need(&pairs, "n_z", path)?,
        r: need(&pairs, "r", path)?,
        c: need(&pairs, "c", path)?,
    }))
}

/// Aligned table plus machine-readable key=value lines for a modeled
/// breakdown.
pub fn format_breakdown(b: &PerfBreakdown) -> String {
    let rows = [
        ("t_load", b.t_load),
        ("t_flt", b.t_flt),
        ("t_allgather", b.t_allgather),
        ("t_h2d", b.t_h2d),
        ("t_bp", b.t_bp),
        ("t_trans", b.t_trans),
        ("t_d2h", b.t_d2h),
        ("t_reduce", b.t_reduce),
        ("t_store", b.t_store),
        ("t_compute", b.t_compute),
        ("t_post", b.t_post),
        ("t_runtime", b.t_runtime),
    ];
    let mut out = String::new();
    writeln!(out, "{:<12} {:>12}", "stage", "seconds").unwrap();
    for (name, secs) in rows {
        writeln!(out, "{name:<12} {secs:>12.3}").unwrap();
    }
    writeln!(out, "{:<12} {:>12.2}", "delta", b.delta).unwrap();
    writeln!(out).unwrap();
    for (name, secs) in rows {
        writeln!(out, "{name}={secs}").unwrap();
    }
    writeln!(out, "delta={:.2}", b.delta).unwrap();
    out
}

pub fn format_stages(s: &MeasuredStages) -> String {
    let mut out = String::new();
    writeln!(out, "{:<12} {:>12}", "stage", "seconds").unwrap();
    writeln!(out, "{:<12} {:>12.3}", "t_flt", s.t_flt).unwrap();
    writeln!(out, "{:<12} {:>12.3}", "t_allgather", s.t_allgather).unwrap();
    writeln!(out, "{:<12} {:>12.3}", "t_bp", s.t_bp).unwrap();
    writeln!(out, "{:<12} {:>12.3}", "t_compute", s.t_compute).unwrap();
    writeln!(out, "{:<12} {:>12.2}", "delta", s.delta()).unwrap();
    writeln!(out).unwrap();
    writeln!(out, "delta={:.2}", s.delta()).unwrap();
    out
}

pub fn evaluate_params(file: &ParamsFile) -> Result<String, fdk_core::perfmodel::ModelError> {
    match file {
        ParamsFile::Model(p) => Ok(format_breakdown(&estimate(p)?)),
        ParamsFile::Stages(s) => Ok(format_stages(s)),
    }
}

/// The `report.txt` written next to every produced volume.
pub struct RunReport {
    pub command: String,
    pub geom: CbctGeometry,
    pub lines: Vec<(String, String)>,
}

impl RunReport {
    pub fn new(command: &str, geom: &CbctGeometry) -> Self {
        Self {
            command: command.to_string(),
            geom: *geom,
            lines: Vec::new(),
        }
    }

    pub fn push(&mut self, key: &str, value: impl std::fmt::Display) {
        self.lines.push((key.to_string(), value.to_string()));
    }

    pub fn push_secs(&mut self, key: &str, secs: f64) {
        self.lines.push((key.to_string(), format!("{secs:.3}")));
    }

    pub fn push_counts(&mut self, counter: &OpCounter, predicted: u64) {
        self.push("inner_products", counter.inner_products);
        self.push("inner_products_predicted", predicted);
    }

    pub fn push_pipeline(&mut self, stats: &PipelineStats) {
        self.push_secs("t_flt", stats.t_flt);
        self.push_secs("t_allgather", stats.t_gather);
        self.push_secs("t_bp", stats.t_bp);
        self.push_secs("t_compute", stats.t_compute);
        self.push_secs("t_reduce", stats.t_reduce);
        self.push_secs("t_store", stats.t_store);
        self.push("delta", format!("{:.2}", stats.delta));
        self.push("filter_workers", stats.filter_workers);
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        writeln!(out, "command={}", self.command).unwrap();
        writeln!(
            out,
            "problem={}x{}x{} -> {}x{}x{}",
            self.geom.n_u,
            self.geom.n_v,
            self.geom.n_p,
            self.geom.n_x,
            self.geom.n_y,
            self.geom.n_z
        )
        .unwrap();
        for (k, v) in &self.lines {
            writeln!(out, "{k}={v}").unwrap();
        }
        out
    }

    pub fn write_to(&self, dir: &Path) -> Result<PathBuf, IoError> {
        let path = dir.join("report.txt");
        fs::write(&path, self.render()).map_err(|source| IoError::Io {
            path: path.clone(),
            source,
        })?;
        Ok(path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    #[test]
    fn stage_file_computes_delta() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("stages.cfg");
        fs::write(
            &path,
            "t_flt=0.7\nt_allgather=15.2\nt_bp=14.0\nt_compute=18.9\n",
        )
        .unwrap();
        match read_params(&path).unwrap() {
            ParamsFile::Stages(s) => {
                assert!((s.delta() - 1.582).abs() < 5e-4);
                let text = format_stages(&s);
                assert!(text.contains("delta=1.58"), "{text}");
            }
            other => panic!("wrong parse: {other:?}"),
        }
    }

    #[test]
    fn model_file_round_trips_through_estimate() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("model.cfg");
        fs::write(
            &path,
            "bw_load=20\nbw_store=28.5\nth_flt=45\nth_bp=30\nth_allgather=14\nth_reduce=3\n\
             bw_pcie=11.9\nn_pcie=2\nn_gpu_per_node=4\nn_cpu_per_node=2\nn_gpus=128\nn_nodes=32\n\
             n_u=2048\nn_v=2048\nn_p=4096\nn_x=4096\nn_y=4096\nn_z=4096\nr=32\nc=4\n",
        )
        .unwrap();
        let parsed = read_params(&path).unwrap();
        let text = evaluate_params(&parsed).unwrap();
        assert!(text.contains("t_store"));
        assert!(text.contains("delta="));
    }

    #[test]
    fn missing_keys_name_themselves() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("broken.cfg");
        fs::write(&path, "bw_load=20\n").unwrap();
        match read_params(&path) {
            Err(IoError::Malformed { detail, .. }) => assert!(detail.contains("bw_store")),
            other => panic!("expected malformed error, got {other:?}"),
        }
    }
}
