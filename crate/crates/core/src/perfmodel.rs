//! Closed-form performance model of the distributed reconstruction
//! pipeline, plus the GUPS throughput metric.
//!
//! Stage times for an `R x C` rank grid over an
//! `n_u x n_v x n_p -> n_x x n_y x n_z` problem:
//!
//! ```text
//! t_load      = 4 n_u n_v n_p / bw_load
//! t_flt       = n_p n_gpu_per_node / (C R th_flt)
//! t_allgather = n_p / (C R th_allgather)
//! t_h2d       = 4 n_gpu_per_node n_u n_v n_p / (C bw_pcie n_pcie)
//! t_bp        = t_h2d + n_p / (C th_bp)
//! t_trans     = 4 n_x n_y n_z / (R th_trans)
//! t_d2h       = 4 n_gpu_per_node n_x n_y n_z / (R bw_pcie n_pcie)
//! t_reduce    = 4 n_x n_y n_z / (R th_reduce)      (zero when C = 1)
//! t_store     = 4 n_x n_y n_z / bw_store
//!
//! t_compute = max(t_load, t_flt, t_allgather, t_bp)
//! t_post    = [t_trans +] t_d2h + t_reduce + t_store
//! t_runtime = t_compute + t_post
//! delta     = (t_flt + t_allgather + t_bp) / t_compute
//! ```
//!
//! Bandwidths are GB/s with GB = 2^30 bytes; `th_flt`, `th_bp` and
//! `th_allgather` are projections/second (per node, per GPU, and per rank
//! group respectively); samples are 4-byte floats throughout. The transpose
//! term is tiny in practice and is only folded into `t_post` when a
//! transpose throughput is actually supplied.
//!
//! The model is idealized: measured systems see extra costs the equations
//! ignore (cold collectives, PCIe switch contention, file-system striping),
//! so modeled and observed stage times can differ even when the trends
//! match.

use thiserror::Error;

/// GB convention used throughout the model (2^30 bytes).
pub const BYTES_PER_GB: f64 = 1073741824.0;

const BYTES_PER_SAMPLE: f64 = 4.0;

/// Measured machine parameters plus the problem and grid shape.
#[derive(Debug, Clone, PartialEq)]
pub struct PerfParams {
    /// Aggregate projection-read bandwidth (GB/s).
    pub bw_load: f64,
    /// Aggregate volume-write bandwidth (GB/s).
    pub bw_store: f64,
    /// Filtering throughput per node (projections/s).
    pub th_flt: f64,
    /// Back-projection throughput per GPU (projections/s).
    pub th_bp: f64,
    /// AllGather throughput (projections/s).
    pub th_allgather: f64,
    /// Reduce throughput (GB/s).
    pub th_reduce: f64,
    /// Volume transpose throughput (GB/s); omitted from t_post when None.
    pub th_trans: Option<f64>,
    /// Per-link host/device copy bandwidth (GB/s).
    pub bw_pcie: f64,
    /// PCIe links per node.
    pub n_pcie: usize,
    pub n_gpu_per_node: usize,
    pub n_cpu_per_node: usize,
    pub n_gpus: usize,
    pub n_nodes: usize,
    pub n_u: usize,
    pub n_v: usize,
    pub n_p: usize,
    pub n_x: usize,
    pub n_y: usize,
    pub n_z: usize,
    /// Rank grid rows (volume split) and columns (projection split).
    pub r: usize,
    pub c: usize,
}

/// Modeled stage times (seconds) and the overlap factor.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PerfBreakdown {
    pub t_load: f64,
    pub t_flt: f64,
    pub t_allgather: f64,
    pub t_h2d: f64,
    pub t_bp: f64,
    pub t_trans: f64,
    pub t_d2h: f64,
    pub t_reduce: f64,
    pub t_store: f64,
    pub t_compute: f64,
    pub t_post: f64,
    pub t_runtime: f64,
    pub delta: f64,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ModelError {
    #[error("{0} must be > 0")]
    NonPositive(&'static str),
    #[error("n_gpus ({n_gpus}) must equal C*R ({c}*{r})")]
    GridMismatch { n_gpus: usize, c: usize, r: usize },
    #[error("n_nodes ({n_nodes}) must equal n_gpus/n_gpu_per_node ({expected})")]
    NodeMismatch { n_nodes: usize, expected: usize },
}

impl PerfParams {
    fn validate(&self) -> Result<(), ModelError> {
        let positive = [
            (self.bw_load, "bw_load"),
            (self.bw_store, "bw_store"),
            (self.th_flt, "th_flt"),
            (self.th_bp, "th_bp"),
            (self.th_allgather, "th_allgather"),
            (self.th_reduce, "th_reduce"),
            (self.bw_pcie, "bw_pcie"),
        ];
        for (v, name) in positive {
            if v.is_nan() || v <= 0.0 {
                return Err(ModelError::NonPositive(name));
            }
        }
        if let Some(t) = self.th_trans {
            if t.is_nan() || t <= 0.0 {
                return Err(ModelError::NonPositive("th_trans"));
            }
        }
        let counts = [
            (self.n_pcie, "n_pcie"),
            (self.n_gpu_per_node, "n_gpu_per_node"),
            (self.n_cpu_per_node, "n_cpu_per_node"),
            (self.n_gpus, "n_gpus"),
            (self.n_nodes, "n_nodes"),
            (self.n_u, "n_u"),
            (self.n_v, "n_v"),
            (self.n_p, "n_p"),
            (self.n_x, "n_x"),
            (self.n_y, "n_y"),
            (self.n_z, "n_z"),
            (self.r, "r"),
            (self.c, "c"),
        ];
        for (v, name) in counts {
            if v == 0 {
                return Err(ModelError::NonPositive(name));
            }
        }
        if self.n_gpus != self.c * self.r {
            return Err(ModelError::GridMismatch {
                n_gpus: self.n_gpus,
                c: self.c,
                r: self.r,
            });
        }
        let expected = self.n_gpus / self.n_gpu_per_node;
        if self.n_nodes != expected {
            return Err(ModelError::NodeMismatch {
                n_nodes: self.n_nodes,
                expected,
            });
        }
        Ok(())
    }
}

/// Evaluates every stage equation and composes compute, post and runtime
/// phases. Pure and deterministic.
pub fn estimate(p: &PerfParams) -> Result<PerfBreakdown, ModelError> {
    p.validate()?;
    let proj_bytes = BYTES_PER_SAMPLE * (p.n_u * p.n_v) as f64 * p.n_p as f64;
    let vol_bytes = BYTES_PER_SAMPLE * (p.n_x * p.n_y) as f64 * p.n_z as f64;
    let (r, c) = (p.r as f64, p.c as f64);
    let gpn = p.n_gpu_per_node as f64;
    let links = (p.n_pcie as f64) * p.bw_pcie * BYTES_PER_GB;

    let t_load = proj_bytes / (p.bw_load * BYTES_PER_GB);
    let t_flt = p.n_p as f64 * gpn / (c * r * p.th_flt);
    let t_allgather = p.n_p as f64 / (c * r * p.th_allgather);
    let t_h2d = gpn * proj_bytes / (c * links);
    let t_bp = t_h2d + p.n_p as f64 / (c * p.th_bp);
    let t_trans = match p.th_trans {
        Some(th) => vol_bytes / (r * th * BYTES_PER_GB),
        None => 0.0,
    };
    let t_d2h = gpn * vol_bytes / (r * links);
    let t_reduce = if p.c == 1 {
        0.0
    } else {
        vol_bytes / (r * p.th_reduce * BYTES_PER_GB)
    };
    let t_store = vol_bytes / (p.bw_store * BYTES_PER_GB);

    let t_compute = t_load.max(t_flt).max(t_allgather).max(t_bp);
    let t_post = t_trans + t_d2h + t_reduce + t_store;
    Ok(PerfBreakdown {
        t_load,
        t_flt,
        t_allgather,
        t_h2d,
        t_bp,
        t_trans,
        t_d2h,
        t_reduce,
        t_store,
        t_compute,
        t_post,
        t_runtime: t_compute + t_post,
        delta: overlap_delta(t_flt, t_allgather, t_bp, t_compute),
    })
}

/// The overlap factor: summed stage times over the overlapped wall time.
/// Values above 1 mean pipelining bought something. Also applicable to
/// measured stage times from a real run.
pub fn overlap_delta(t_flt: f64, t_allgather: f64, t_bp: f64, t_compute: f64) -> f64 {
    (t_flt + t_allgather + t_bp) / t_compute
}

/// Giga-updates per second: `n_x n_y n_z n_p / (t * 2^30)`.
pub fn gups(
    n_x: usize,
    n_y: usize,
    n_z: usize,
    n_p: usize,
    t_seconds: f64,
) -> Result<f64, ModelError> {
    if t_seconds.is_nan() || t_seconds <= 0.0 {
        return Err(ModelError::NonPositive("t_seconds"));
    }
    let updates = (n_x * n_y) as f64 * (n_z * n_p) as f64;
    Ok(updates / (t_seconds * BYTES_PER_GB))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn table_params(n_gpus: usize, r: usize) -> PerfParams {
        PerfParams {
            bw_load: 20.0,
            bw_store: 28.5,
            th_flt: 45.0,
            th_bp: 30.0,
            th_allgather: 14.0,
            th_reduce: 3.0,
            th_trans: None,
            bw_pcie: 11.9,
            n_pcie: 2,
            n_gpu_per_node: 4,
            n_cpu_per_node: 2,
            n_gpus,
            n_nodes: n_gpus / 4,
            n_u: 2048,
            n_v: 2048,
            n_p: 4096,
            n_x: 4096,
            n_y: 4096,
            n_z: 4096,
            r,
            c: n_gpus / r,
        }
    }

    #[test]
    fn store_time_for_reference_volume() {
        let b = estimate(&table_params(128, 32)).unwrap();
        // 4 * 4096^3 bytes at 28.5 GB/s (GB = 2^30) = 8.982 s.
        assert!((b.t_store - 8.982456140350877).abs() < 1e-9);
        assert!((b.t_store - 9.0).abs() / 9.0 < 0.02);
    }

    #[test]
    fn reduce_is_skipped_for_single_column() {
        let p = table_params(32, 32); // C = 1
        let b = estimate(&p).unwrap();
        assert_eq!(b.t_reduce, 0.0);
        let p2 = table_params(64, 32); // C = 2
        let b2 = estimate(&p2).unwrap();
        assert!(b2.t_reduce > 0.0);
        assert!((b.t_post - (b.t_d2h + b.t_store)).abs() < 1e-12);
    }

    #[test]
    fn transpose_only_counts_when_supplied() {
        let mut p = table_params(128, 32);
        let without = estimate(&p).unwrap();
        assert_eq!(without.t_trans, 0.0);
        p.th_trans = Some(100.0);
        let with = estimate(&p).unwrap();
        assert!(with.t_trans > 0.0);
        assert!((with.t_post - without.t_post - with.t_trans).abs() < 1e-12);
    }

    #[test]
    fn doubling_columns_halves_the_overlapped_stages() {
        let a = estimate(&table_params(128, 32)).unwrap();
        let b = estimate(&table_params(256, 32)).unwrap();
        assert_eq!(a.t_flt, 2.0 * b.t_flt);
        assert_eq!(a.t_allgather, 2.0 * b.t_allgather);
        assert_eq!(a.t_bp, 2.0 * b.t_bp);
        // Post-processing does not depend on C.
        assert_eq!(a.t_post, b.t_post);
    }

    #[test]
    fn runtime_never_grows_with_more_gpus() {
        let mut prev = f64::INFINITY;
        for n_gpus in [32, 64, 128, 256, 512] {
            let b = estimate(&table_params(n_gpus, 32)).unwrap();
            assert!(b.t_runtime <= prev + 1e-12);
            prev = b.t_runtime;
        }
    }

    #[test]
    fn composition_invariants() {
        let b = estimate(&table_params(128, 32)).unwrap();
        let max = b.t_load.max(b.t_flt).max(b.t_allgather).max(b.t_bp);
        assert_eq!(b.t_compute, max);
        assert_eq!(b.t_runtime, b.t_compute + b.t_post);
    }

    #[test]
    fn rejects_bad_parameters() {
        let mut p = table_params(128, 32);
        p.th_bp = 0.0;
        assert!(matches!(
            estimate(&p),
            Err(ModelError::NonPositive("th_bp"))
        ));
        let mut p = table_params(128, 32);
        p.n_gpus = 127;
        p.n_nodes = 31;
        assert!(matches!(estimate(&p), Err(ModelError::GridMismatch { .. })));
    }

    #[test]
    fn gups_powers_of_two_cancel() {
        // 1024^3 voxels * 1024 views = 2^40 updates in 1024 s = 1.0 GUPS.
        assert_eq!(gups(1024, 1024, 1024, 1024, 1024.0).unwrap(), 1.0);
        let g1 = gups(512, 512, 512, 360, 7.0).unwrap();
        let g2 = gups(512, 512, 512, 360, 14.0).unwrap();
        assert_eq!(g1, 2.0 * g2);
        assert!(gups(8, 8, 8, 8, 0.0).is_err());
    }

    #[test]
    fn gups_inverts_reference_kernel_entry() {
        // 211.4 GUPS on a 1024^3 x 1024-view run implies t = 4.8439 s.
        let t: f64 = 1024.0 / 211.4;
        assert!((t - 4.84).abs() / 4.84 < 0.005);
        let g = gups(1024, 1024, 1024, 1024, t).unwrap();
        assert!((g - 211.4).abs() < 1e-9);
    }

    #[test]
    fn measured_stage_delta() {
        // A published breakdown row: flt 0.7, allgather 15.2, bp 14.0,
        // compute 18.9 -> delta = 29.9/18.9.
        let d = overlap_delta(0.7, 15.2, 14.0, 18.9);
        assert!((d - 1.582).abs() < 5e-4);
        assert!((d - 1.6).abs() <= 0.05);
    }
}
