//! Cone-beam scan geometry and per-view projection matrices.
//!
//! The scanner is a point X-ray source and a flat panel detector (FPD)
//! rotating together on a circle around the volume's Z axis. For view `i`
//! at gantry angle `beta = i * theta`, a voxel index `(i, j, k)` maps to
//! projective detector coordinates through a 3x4 matrix `P`:
//!
//! ```text
//! [x, y, z]^T = P * [i, j, k, 1]^T
//! [u, v]^T    = [x, y]^T / z
//! ```
//!
//! `P` is the top three rows of `M1 * Mrot * M0`, where `M0` converts voxel
//! indices to physical object coordinates (centered, with the j and k axes
//! flipped), `Mrot` rotates the object by `beta` about Z and moves it in
//! front of the source by the source-to-axis distance `d`, and `M1` is the
//! pinhole projection onto the detector plane at distance `cap_d`, scaled
//! to pixel units.
//!
//! Two structural facts about this trajectory drive the optimized
//! back-projection kernel: for a fixed `(i, j)` column of voxels, `x` and
//! `z` (hence `u` and the distance weight) do not depend on `k`, and the
//! detector rows hit by `k` and `n_z - 1 - k` are mirror images around the
//! detector's horizontal center line (`u` equal, `v` summing to `n_v - 1`).

use thiserror::Error;

/// Scan parameters: detector, volume grid, distances, and trajectory.
///
/// Distances (`d`, `cap_d`) are millimeters; pitches are mm per pixel or
/// mm per voxel. Projected `(u, v)` come out in pixel units.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CbctGeometry {
    /// Detector width in pixels.
    pub n_u: usize,
    /// Detector height in pixels.
    pub n_v: usize,
    /// Detector pixel pitch in U (mm/pixel).
    pub d_u: f64,
    /// Detector pixel pitch in V (mm/pixel).
    pub d_v: f64,
    /// Number of views over the full circle.
    pub n_p: usize,
    /// Volume size in voxels along X, Y, Z.
    pub n_x: usize,
    pub n_y: usize,
    pub n_z: usize,
    /// Voxel pitch along X, Y, Z (mm/voxel).
    pub d_x: f64,
    pub d_y: f64,
    pub d_z: f64,
    /// Source to rotation-axis distance (mm).
    pub d: f64,
    /// Source to detector distance (mm).
    pub cap_d: f64,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum GeometryError {
    #[error("invalid geometry: {0}")]
    Invalid(&'static str),
    #[error("view index {view_index} out of range (n_p = {n_p})")]
    ViewOutOfRange { view_index: usize, n_p: usize },
    #[error("degenerate geometry: projective depth z is ~0")]
    DegenerateDepth,
}

impl CbctGeometry {
    /// Checks the structural invariants: positive dimensions and pitches,
    /// and `cap_d > d > 0` (detector behind the rotation axis, source in
    /// front of it).
    pub fn validate(&self) -> Result<(), GeometryError> {
        if self.n_u < 1 || self.n_v < 1 || self.n_p < 1 {
            return Err(GeometryError::Invalid("detector dims and n_p must be >= 1"));
        }
        if self.n_x < 1 || self.n_y < 1 || self.n_z < 1 {
            return Err(GeometryError::Invalid("volume dims must be >= 1"));
        }
        if !(self.d_u > 0.0 && self.d_v > 0.0 && self.d_x > 0.0 && self.d_y > 0.0 && self.d_z > 0.0)
        {
            return Err(GeometryError::Invalid("pitches must be > 0"));
        }
        if !(self.cap_d > self.d && self.d > 0.0) {
            return Err(GeometryError::Invalid("must have cap_d > d > 0"));
        }
        Ok(())
    }

    /// Angle step between consecutive views: `2*pi / n_p`.
    pub fn theta(&self) -> f64 {
        2.0 * core::f64::consts::PI / self.n_p as f64
    }

    /// Gantry angle of a view.
    pub fn view_angle(&self, view_index: usize) -> f64 {
        view_index as f64 * self.theta()
    }

    /// Volume center in fractional voxel indices.
    pub fn volume_center(&self) -> (f64, f64, f64) {
        (
            (self.n_x as f64 - 1.0) / 2.0,
            (self.n_y as f64 - 1.0) / 2.0,
            (self.n_z as f64 - 1.0) / 2.0,
        )
    }

    /// Detector center in fractional pixel coordinates.
    pub fn detector_center(&self) -> (f64, f64) {
        ((self.n_u as f64 - 1.0) / 2.0, (self.n_v as f64 - 1.0) / 2.0)
    }

    /// Physical object-space position of a (fractional) voxel index, in mm.
    ///
    /// This is exactly the `M0` mapping: centered, j and k axes flipped.
    pub fn voxel_position(&self, i: f64, j: f64, k: f64) -> [f64; 3] {
        let (cx, cy, cz) = self.volume_center();
        [
            self.d_x * (i - cx),
            -self.d_y * (j - cy),
            -self.d_z * (k - cz),
        ]
    }

    /// X-ray source position in object space for gantry angle `beta`, in mm.
    ///
    /// At `beta = 0` the source sits at `(0, -d, 0)`; it travels a circle of
    /// radius `d` in the Z = 0 plane, counter to the object rotation.
    pub fn source_position(&self, beta: f64) -> [f64; 3] {
        let (sb, cb) = (libm::sin(beta), libm::cos(beta));
        [-self.d * sb, -self.d * cb, 0.0]
    }

    /// Object-space position of detector pixel center `(u, v)` for gantry
    /// angle `beta`, in mm. Inverse of the `Mrot`/`M1` chain for points on
    /// the detector plane.
    pub fn detector_pixel_position(&self, beta: f64, u: f64, v: f64) -> [f64; 3] {
        let (cu, cv) = self.detector_center();
        // Camera frame: pixel at ((u-cu)*d_u, (v-cv)*d_v, cap_d); undo the
        // axis swap of Mrot, then rotate back by -beta.
        let rx = (u - cu) * self.d_u;
        let ry = self.cap_d - self.d;
        let rz = -(v - cv) * self.d_v;
        let (sb, cb) = (libm::sin(beta), libm::cos(beta));
        [cb * rx + sb * ry, -sb * rx + cb * ry, rz]
    }
}

/// The 3x4 homogeneous voxel-index -> detector map for one view.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProjectionMatrix {
    /// Row-major rows of the matrix (top three rows of `M1*Mrot*M0`).
    pub rows: [[f64; 4]; 3],
    /// Gantry angle of this view (radians).
    pub beta: f64,
    /// Index of this view in the scan.
    pub view_index: usize,
}

/// A projected point: continuous detector coordinates plus projective depth.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DetectorPoint {
    /// Horizontal detector coordinate (pixels).
    pub u: f64,
    /// Vertical detector coordinate (pixels).
    pub v: f64,
    /// Projective depth (mm); positive for voxels between source and detector.
    pub z: f64,
}

fn mat4_mul(a: &[[f64; 4]; 4], b: &[[f64; 4]; 4]) -> [[f64; 4]; 4] {
    let mut out = [[0.0; 4]; 4];
    for (out_row, a_row) in out.iter_mut().zip(a.iter()) {
        for (c, out_val) in out_row.iter_mut().enumerate() {
            *out_val = (0..4).map(|t| a_row[t] * b[t][c]).sum();
        }
    }
    out
}

/// Builds the projection matrix for one view as the top three rows of
/// `M1 * Mrot * M0`, with `beta = view_index * theta`.
pub fn build_projection_matrix(
    geom: &CbctGeometry,
    view_index: usize,
) -> Result<ProjectionMatrix, GeometryError> {
    geom.validate()?;
    if view_index >= geom.n_p {
        return Err(GeometryError::ViewOutOfRange {
            view_index,
            n_p: geom.n_p,
        });
    }
    let beta = geom.view_angle(view_index);
    let (sb, cb) = (libm::sin(beta), libm::cos(beta));
    let (cx, cy, cz) = geom.volume_center();
    let (cu, cv) = geom.detector_center();

    let m0 = mat4_mul(
        &[
            [geom.d_x, 0.0, 0.0, 0.0],
            [0.0, geom.d_y, 0.0, 0.0],
            [0.0, 0.0, geom.d_z, 0.0],
            [0.0, 0.0, 0.0, 1.0],
        ],
        &[
            [1.0, 0.0, 0.0, -cx],
            [0.0, -1.0, 0.0, cy],
            [0.0, 0.0, -1.0, cz],
            [0.0, 0.0, 0.0, 1.0],
        ],
    );
    let mrot = mat4_mul(
        &[
            [1.0, 0.0, 0.0, 0.0],
            [0.0, 0.0, -1.0, 0.0],
            [0.0, 1.0, 0.0, geom.d],
            [0.0, 0.0, 0.0, 1.0],
        ],
        &[
            [cb, -sb, 0.0, 0.0],
            [sb, cb, 0.0, 0.0],
            [0.0, 0.0, 1.0, 0.0],
            [0.0, 0.0, 0.0, 1.0],
        ],
    );
    let m1 = mat4_mul(
        &[
            [1.0 / geom.d_u, 0.0, 0.0, 0.0],
            [0.0, 1.0 / geom.d_v, 0.0, 0.0],
            [0.0, 0.0, 1.0, 0.0],
            [0.0, 0.0, 0.0, 1.0],
        ],
        &[
            [geom.cap_d, 0.0, cu * geom.d_u, 0.0],
            [0.0, geom.cap_d, cv * geom.d_v, 0.0],
            [0.0, 0.0, 1.0, 0.0],
            [0.0, 0.0, 0.0, 1.0],
        ],
    );

    let full = mat4_mul(&m1, &mat4_mul(&mrot, &m0));
    Ok(ProjectionMatrix {
        rows: [full[0], full[1], full[2]],
        beta,
        view_index,
    })
}

/// Projects a (fractional) voxel index through the matrix: applies the
/// homogeneous map and the perspective divide.
pub fn project_point(
    mat: &ProjectionMatrix,
    i: f64,
    j: f64,
    k: f64,
) -> Result<DetectorPoint, GeometryError> {
    let dot = |row: &[f64; 4]| row[0] * i + row[1] * j + row[2] * k + row[3];
    let x = dot(&mat.rows[0]);
    let y = dot(&mat.rows[1]);
    let z = dot(&mat.rows[2]);
    if libm::fabs(z) < 1e-12 {
        return Err(GeometryError::DegenerateDepth);
    }
    Ok(DetectorPoint {
        u: x / z,
        v: y / z,
        z,
    })
}

/// Closed form for the projective depth of a voxel column:
/// `z = d + sin(beta)*(i - cx)*d_x - cos(beta)*(j - cy)*d_y`.
///
/// Independent of `k`; agrees with the third row of the projection matrix.
pub fn depth_z(geom: &CbctGeometry, beta: f64, i: f64, j: f64) -> f64 {
    let (cx, cy, _) = geom.volume_center();
    geom.d + libm::sin(beta) * (i - cx) * geom.d_x - libm::cos(beta) * (j - cy) * geom.d_y
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_geom() -> CbctGeometry {
        CbctGeometry {
            n_u: 8,
            n_v: 8,
            d_u: 1.0,
            d_v: 1.0,
            n_p: 4,
            n_x: 4,
            n_y: 4,
            n_z: 4,
            d_x: 1.0,
            d_y: 1.0,
            d_z: 1.0,
            d: 10.0,
            cap_d: 20.0,
        }
    }

    #[test]
    fn rejects_bad_parameters() {
        let mut g = small_geom();
        g.cap_d = 5.0; // detector in front of the axis
        assert!(matches!(g.validate(), Err(GeometryError::Invalid(_))));
        let mut g = small_geom();
        g.d_u = 0.0;
        assert!(g.validate().is_err());
        let mut g = small_geom();
        g.n_p = 0;
        assert!(g.validate().is_err());
    }

    #[test]
    fn view_out_of_range() {
        let g = small_geom();
        assert!(matches!(
            build_projection_matrix(&g, 4),
            Err(GeometryError::ViewOutOfRange {
                view_index: 4,
                n_p: 4
            })
        ));
    }

    #[test]
    fn center_voxel_projects_to_detector_center_at_beta_zero() {
        let g = small_geom();
        let p = build_projection_matrix(&g, 0).unwrap();
        let (cx, cy, cz) = g.volume_center();
        let pt = project_point(&p, cx, cy, cz).unwrap();
        let (cu, cv) = g.detector_center();
        assert!((pt.z - g.d).abs() < 1e-12, "z = {}", pt.z);
        assert!((pt.u - cu).abs() < 1e-12);
        assert!((pt.v - cv).abs() < 1e-12);
    }

    // Expected entries come from multiplying the three factor matrices with
    // exact rational arithmetic for beta = pi/2 (sin = 1, cos = 0):
    //   [ 7/2  20   0  -1/4 ]
    //   [ 7/2   0  20  -1/4 ]
    //   [  1    0   0  17/2 ]
    #[test]
    fn matrix_matches_exact_product_at_quarter_turn() {
        let g = small_geom();
        let p = build_projection_matrix(&g, 1).unwrap();
        assert!((p.beta - core::f64::consts::FRAC_PI_2).abs() < 1e-15);
        let expected: [[f64; 4]; 3] = [
            [3.5, 20.0, 0.0, -0.25],
            [3.5, 0.0, 20.0, -0.25],
            [1.0, 0.0, 0.0, 8.5],
        ];
        for (r, row) in expected.iter().enumerate() {
            for (c, &want) in row.iter().enumerate() {
                let got = p.rows[r][c];
                let tol = 1e-12 * want.abs().max(1.0);
                assert!(
                    (got - want).abs() <= tol,
                    "entry ({r},{c}): got {got}, want {want}"
                );
            }
        }
    }

    #[test]
    fn depth_z_closed_form_examples() {
        let g = small_geom();
        let (cx, cy, _) = g.volume_center();
        assert_eq!(depth_z(&g, 0.0, cx, cy), g.d);
        // beta = pi/2, i = cx + 3, d = 10, d_x = 1 -> z = 13 for any j.
        let z = depth_z(&g, core::f64::consts::FRAC_PI_2, cx + 3.0, 0.0);
        assert!((z - 13.0).abs() < 1e-12);
        let z = depth_z(&g, core::f64::consts::FRAC_PI_2, cx + 3.0, 3.0);
        assert!((z - 13.0).abs() < 1e-12);
    }

    #[test]
    fn column_depth_and_u_are_k_invariant() {
        let g = small_geom();
        let p = build_projection_matrix(&g, 3).unwrap();
        let base = project_point(&p, 1.0, 2.0, 0.0).unwrap();
        for k in 1..g.n_z {
            let pt = project_point(&p, 1.0, 2.0, k as f64).unwrap();
            assert!((pt.z - base.z).abs() / base.z < 1e-12);
            assert!((pt.u - base.u).abs() < 1e-9);
        }
    }

    #[test]
    fn mirrored_k_rows_sum_to_detector_height() {
        let g = small_geom();
        for view in 0..g.n_p {
            let p = build_projection_matrix(&g, view).unwrap();
            for k in 0..g.n_z {
                let a = project_point(&p, 3.0, 1.0, k as f64).unwrap();
                let b = project_point(&p, 3.0, 1.0, (g.n_z - 1 - k) as f64).unwrap();
                assert!((a.u - b.u).abs() < 1e-9);
                assert!((a.v + b.v - (g.n_v as f64 - 1.0)).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn build_is_deterministic() {
        let g = small_geom();
        let a = build_projection_matrix(&g, 2).unwrap();
        let b = build_projection_matrix(&g, 2).unwrap();
        assert_eq!(a.rows, b.rows);
    }
}
