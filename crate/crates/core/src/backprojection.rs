//! Voxel-driven back-projection kernels.
//!
//! [`backproject_standard`] is the baseline: for every (view, voxel) it
//! evaluates the full 3x4 projection (three 1x4 inner products), weights the
//! bilinearly interpolated detector sample by the inverse squared depth, and
//! accumulates into an i-major volume.
//!
//! [`backproject_optimized`] exploits the circular-trajectory structure:
//! within a voxel column (fixed i, j) the depth `z` and horizontal detector
//! coordinate `u` are constant over k, and slices k and `n_z-1-k` land on
//! detector rows mirrored around the horizontal center line. So per column
//! it computes x and z once (two inner products), then walks only the lower
//! half of the column with one inner product per k, updating the mirrored
//! voxel via `v' = n_v-1 - v` for free. Projections are transposed and the
//! volume is accumulated k-major so both walk contiguously; the result is
//! reshaped back to i-major at the end. Inner-product counts drop from
//! `3*n_z` to `2 + n_z/2` per column, a factor of ~1/6 for deep volumes.
//!
//! Both kernels do their per-voxel arithmetic in single precision and scale
//! the accumulated volume by the angle step at the end. [`OpCounter`]
//! records the 1x4 inner products actually executed so the cost claim is
//! checkable rather than asserted.

use alloc::vec;
use alloc::vec::Vec;
use thiserror::Error;

use crate::filtering::{Projection, ProjectionKind};
use crate::geometry::{CbctGeometry, ProjectionMatrix};

/// Memory order of volume samples.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VolumeLayout {
    /// `index = k*n_y*n_x + j*n_x + i` (x fastest; natural slice order).
    IMajor,
    /// `index = i*n_y*n_z + j*n_z + k` (z fastest; column-contiguous).
    KMajor,
}

/// A 3-D voxel grid with an explicit layout tag.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    pub n_x: usize,
    pub n_y: usize,
    pub n_z: usize,
    pub layout: VolumeLayout,
    pub samples: Vec<f32>,
}

impl Volume {
    pub fn zeros(n_x: usize, n_y: usize, n_z: usize, layout: VolumeLayout) -> Self {
        Self {
            n_x,
            n_y,
            n_z,
            layout,
            samples: vec![0.0; n_x * n_y * n_z],
        }
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        match self.layout {
            VolumeLayout::IMajor => k * self.n_y * self.n_x + j * self.n_x + i,
            VolumeLayout::KMajor => i * self.n_y * self.n_z + j * self.n_z + k,
        }
    }

    #[inline]
    pub fn at(&self, i: usize, j: usize, k: usize) -> f32 {
        self.samples[self.index(i, j, k)]
    }

    pub fn scale(&mut self, s: f32) {
        for v in self.samples.iter_mut() {
            *v *= s;
        }
    }

    /// Root-mean-square difference against another volume of the same
    /// dimensions (layouts may differ).
    pub fn rmse(&self, other: &Volume) -> f64 {
        assert_eq!(
            (self.n_x, self.n_y, self.n_z),
            (other.n_x, other.n_y, other.n_z)
        );
        let mut acc = 0.0f64;
        for k in 0..self.n_z {
            for j in 0..self.n_y {
                for i in 0..self.n_x {
                    let d = self.at(i, j, k) as f64 - other.at(i, j, k) as f64;
                    acc += d * d;
                }
            }
        }
        libm::sqrt(acc / self.samples.len() as f64)
    }

    pub fn max_abs_diff(&self, other: &Volume) -> f64 {
        assert_eq!(
            (self.n_x, self.n_y, self.n_z),
            (other.n_x, other.n_y, other.n_z)
        );
        let mut m = 0.0f64;
        for k in 0..self.n_z {
            for j in 0..self.n_y {
                for i in 0..self.n_x {
                    let d = libm::fabs(self.at(i, j, k) as f64 - other.at(i, j, k) as f64);
                    if d > m {
                        m = d;
                    }
                }
            }
        }
        m
    }
}

/// Counts the 1x4 inner products a kernel actually executed.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct OpCounter {
    pub inner_products: u64,
}

impl OpCounter {
    pub fn new() -> Self {
        Self::default()
    }

    #[inline]
    pub fn record(&mut self, n: u64) {
        self.inner_products += n;
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum BackprojectError {
    #[error("matrix/projection list length mismatch: {mats} vs {projs}")]
    LengthMismatch { mats: usize, projs: usize },
    #[error("projection {index} is {got:?}, expected {expected:?}")]
    WrongKind {
        index: usize,
        expected: ProjectionKind,
        got: ProjectionKind,
    },
    #[error("projection {index} is {got_w}x{got_h}, expected {want_w}x{want_h}")]
    ShapeMismatch {
        index: usize,
        want_w: usize,
        want_h: usize,
        got_w: usize,
        got_h: usize,
    },
    #[error("optimized kernel requires even n_z, got {0}")]
    OddNz(usize),
    #[error("batch size must be >= 1")]
    ZeroBatch,
    #[error("band [{k_lo}, {k_lo}+{half}) exceeds the lower half of n_z = {n_z}")]
    BandOutOfRange {
        k_lo: usize,
        half: usize,
        n_z: usize,
    },
    #[error("band volume must be k-major with n_z == {expected}, got {got}")]
    BadBandVolume { expected: usize, got: usize },
    #[error("cannot transpose a raw projection")]
    TransposeRaw,
}

/// Bilinear interpolation with sub-pixel precision. `u` runs along the
/// sample rows (width axis), `v` across them. If the 2x2 support reaches
/// outside `[0, width-1] x [0, height-1]` the sample is skipped and 0 is
/// returned; coordinates exactly on the upper edge read the edge texel.
#[inline]
pub fn interp2(x: &Projection, u: f32, v: f32) -> f32 {
    let max_u = (x.width - 1) as f32;
    let max_v = (x.height - 1) as f32;
    // Negated comparison so NaN coordinates also fall out as 0.
    if !(u >= 0.0 && u <= max_u && v >= 0.0 && v <= max_v) {
        return 0.0;
    }
    let iu = u as usize;
    let iv = v as usize;
    let du = u - iu as f32;
    let dv = v - iv as f32;
    let iu1 = (iu + 1).min(x.width - 1);
    let iv1 = (iv + 1).min(x.height - 1);
    let s = &x.samples;
    let r0 = iv * x.width;
    let r1 = iv1 * x.width;
    let t1 = s[r0 + iu] * (1.0 - du) + s[r0 + iu1] * du;
    let t2 = s[r1 + iu] * (1.0 - du) + s[r1 + iu1] * du;
    t1 * (1.0 - dv) + t2 * dv
}

/// Swaps the axes of a filtered projection (width <-> height). Applying it
/// twice restores the original.
pub fn transpose_projection(q: &Projection) -> Result<Projection, BackprojectError> {
    let kind = match q.kind {
        ProjectionKind::Filtered => ProjectionKind::TransposedFiltered,
        ProjectionKind::TransposedFiltered => ProjectionKind::Filtered,
        ProjectionKind::Raw => return Err(BackprojectError::TransposeRaw),
    };
    let mut samples = vec![0.0f32; q.samples.len()];
    for y in 0..q.height {
        let row = y * q.width;
        for x in 0..q.width {
            samples[x * q.height + y] = q.samples[row + x];
        }
    }
    Ok(Projection {
        width: q.height,
        height: q.width,
        kind,
        samples,
    })
}

/// Re-addresses voxels under a different layout; values are untouched.
pub fn reshape_volume(v: &Volume, target: VolumeLayout) -> Volume {
    if v.layout == target {
        return v.clone();
    }
    let mut out = Volume::zeros(v.n_x, v.n_y, v.n_z, target);
    for k in 0..v.n_z {
        for j in 0..v.n_y {
            for i in 0..v.n_x {
                let val = v.samples[v.index(i, j, k)];
                let idx = out.index(i, j, k);
                out.samples[idx] = val;
            }
        }
    }
    out
}

#[inline(always)]
fn dot4(row: &[f32; 4], i: f32, j: f32, k: f32) -> f32 {
    row[0] * i + row[1] * j + row[2] * k + row[3]
}

#[inline]
fn rows_f32(m: &ProjectionMatrix) -> [[f32; 4]; 3] {
    let mut out = [[0.0f32; 4]; 3];
    for (out_row, src_row) in out.iter_mut().zip(m.rows.iter()) {
        for (dst, &v) in out_row.iter_mut().zip(src_row.iter()) {
            *dst = v as f32;
        }
    }
    out
}

fn check_inputs(
    mats: &[ProjectionMatrix],
    projs: &[Projection],
    geom: &CbctGeometry,
    expected: ProjectionKind,
) -> Result<(), BackprojectError> {
    if mats.len() != projs.len() {
        return Err(BackprojectError::LengthMismatch {
            mats: mats.len(),
            projs: projs.len(),
        });
    }
    for (index, p) in projs.iter().enumerate() {
        if p.kind != expected {
            return Err(BackprojectError::WrongKind {
                index,
                expected,
                got: p.kind,
            });
        }
        if p.width != geom.n_u || p.height != geom.n_v {
            return Err(BackprojectError::ShapeMismatch {
                index,
                want_w: geom.n_u,
                want_h: geom.n_v,
                got_w: p.width,
                got_h: p.height,
            });
        }
    }
    Ok(())
}

/// Baseline back-projection: three inner products per (view, voxel),
/// i-major accumulation, final scale by the angle step.
pub fn backproject_standard(
    mats: &[ProjectionMatrix],
    projs: &[Projection],
    geom: &CbctGeometry,
    counter: &mut OpCounter,
) -> Result<Volume, BackprojectError> {
    check_inputs(mats, projs, geom, ProjectionKind::Filtered)?;
    let (nx, ny, nz) = (geom.n_x, geom.n_y, geom.n_z);
    let mut vol = Volume::zeros(nx, ny, nz, VolumeLayout::IMajor);
    let mut ops = 0u64;
    for (mat, q) in mats.iter().zip(projs.iter()) {
        let m = rows_f32(mat);
        let mut idx = 0usize;
        for k in 0..nz {
            let fk = k as f32;
            for j in 0..ny {
                let fj = j as f32;
                for i in 0..nx {
                    let fi = i as f32;
                    let x = dot4(&m[0], fi, fj, fk);
                    let y = dot4(&m[1], fi, fj, fk);
                    let z = dot4(&m[2], fi, fj, fk);
                    ops += 3;
                    let f = 1.0 / z;
                    let w_dis = f * f;
                    let u = x * f;
                    let v = y * f;
                    vol.samples[idx] += w_dis * interp2(q, u, v);
                    idx += 1;
                }
            }
        }
    }
    counter.record(ops);
    vol.scale(geom.theta() as f32);
    Ok(vol)
}

/// A symmetric pair of slice bands: global slices `[k_lo, k_lo+half)` plus
/// their mirrors `[n_z-k_lo-half, n_z-k_lo)`. The whole volume is the band
/// with `k_lo = 0, half = n_z/2`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct KBandPair {
    pub k_lo: usize,
    pub half: usize,
}

impl KBandPair {
    pub fn full(n_z: usize) -> Self {
        Self {
            k_lo: 0,
            half: n_z / 2,
        }
    }

    /// Number of local slices covered (both bands).
    pub fn slices(&self) -> usize {
        2 * self.half
    }

    /// Global slice index of local slice `l` in `[0, 2*half)`.
    pub fn global_k(&self, l: usize, n_z: usize) -> usize {
        if l < self.half {
            self.k_lo + l
        } else {
            n_z - self.k_lo - (self.slices() - l)
        }
    }
}

/// Accumulates one batch of filtered projections into a k-major band volume
/// using the reduced-inner-product scheme. No angle-step scaling is applied;
/// callers batch repeatedly into the same band and scale once at the end.
///
/// Local slice `l < half` holds global slice `k_lo + l`; local `2*half-1-l`
/// holds its mirror, so the symmetric update stays inside the band.
pub fn accumulate_optimized_band(
    mats: &[ProjectionMatrix],
    projs: &[Projection],
    geom: &CbctGeometry,
    band: KBandPair,
    vol: &mut Volume,
    counter: &mut OpCounter,
) -> Result<(), BackprojectError> {
    check_inputs(mats, projs, geom, ProjectionKind::Filtered)?;
    let (nx, ny, nz) = (geom.n_x, geom.n_y, geom.n_z);
    if !nz.is_multiple_of(2) {
        return Err(BackprojectError::OddNz(nz));
    }
    if band.k_lo + band.half > nz / 2 {
        return Err(BackprojectError::BandOutOfRange {
            k_lo: band.k_lo,
            half: band.half,
            n_z: nz,
        });
    }
    let nzl = band.slices();
    if vol.layout != VolumeLayout::KMajor || vol.n_z != nzl || vol.n_x != nx || vol.n_y != ny {
        return Err(BackprojectError::BadBandVolume {
            expected: nzl,
            got: vol.n_z,
        });
    }

    let transposed = projs
        .iter()
        .map(transpose_projection)
        .collect::<Result<Vec<_>, _>>()?;

    let nv1 = (geom.n_v - 1) as f32;
    let mut ops = 0u64;
    for (mat, qt) in mats.iter().zip(transposed.iter()) {
        let m = rows_f32(mat);
        for j in 0..ny {
            let fj = j as f32;
            for i in 0..nx {
                let fi = i as f32;
                let x = dot4(&m[0], fi, fj, 0.0);
                let z = dot4(&m[2], fi, fj, 0.0);
                ops += 2;
                let f = 1.0 / z;
                let u = x * f;
                let w_dis = f * f;
                let col = (i * ny + j) * nzl;
                for l in 0..band.half {
                    let fk = (band.k_lo + l) as f32;
                    let y = dot4(&m[1], fi, fj, fk);
                    ops += 1;
                    let v = y * f;
                    vol.samples[col + l] += w_dis * interp2(qt, v, u);
                    let v_m = nv1 - v;
                    vol.samples[col + nzl - 1 - l] += w_dis * interp2(qt, v_m, u);
                }
            }
        }
    }
    counter.record(ops);
    Ok(())
}

/// Symmetry-optimized back-projection: transposed projections, k-major
/// accumulation over half the column with mirrored updates, processed in
/// batches of `batch` projections, reshaped to i-major at the end.
pub fn backproject_optimized(
    mats: &[ProjectionMatrix],
    projs: &[Projection],
    geom: &CbctGeometry,
    batch: usize,
    counter: &mut OpCounter,
) -> Result<Volume, BackprojectError> {
    if batch == 0 {
        return Err(BackprojectError::ZeroBatch);
    }
    check_inputs(mats, projs, geom, ProjectionKind::Filtered)?;
    if !geom.n_z.is_multiple_of(2) {
        return Err(BackprojectError::OddNz(geom.n_z));
    }
    let band = KBandPair::full(geom.n_z);
    let mut tilde = Volume::zeros(geom.n_x, geom.n_y, geom.n_z, VolumeLayout::KMajor);
    let mut start = 0;
    while start < mats.len() {
        let end = (start + batch).min(mats.len());
        accumulate_optimized_band(
            &mats[start..end],
            &projs[start..end],
            geom,
            band,
            &mut tilde,
            counter,
        )?;
        start = end;
    }
    tilde.scale(geom.theta() as f32);
    Ok(reshape_volume(&tilde, VolumeLayout::IMajor))
}

/// Predicted inner-product count of the baseline kernel.
pub fn standard_op_count(geom: &CbctGeometry, n_views: usize) -> u64 {
    3 * n_views as u64 * (geom.n_x * geom.n_y * geom.n_z) as u64
}

/// Predicted inner-product count of the optimized kernel.
pub fn optimized_op_count(geom: &CbctGeometry, n_views: usize) -> u64 {
    n_views as u64 * (geom.n_x * geom.n_y) as u64 * (2 + geom.n_z as u64 / 2)
}
