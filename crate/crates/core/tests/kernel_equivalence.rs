//! The optimized kernel must reproduce the baseline kernel: same volumes to
//! within single-precision reorder noise, with the predicted reduction in
//! inner-product count.

use fdk_core::backprojection::{
    backproject_optimized, backproject_standard, optimized_op_count, standard_op_count, OpCounter,
};
use fdk_core::filtering::{Projection, ProjectionKind};
use fdk_core::geometry::{build_projection_matrix, CbctGeometry, ProjectionMatrix};
use proptest::prelude::*;
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

fn geom(n_xy: usize, n_z: usize, n_uv: usize, n_p: usize) -> CbctGeometry {
    let radius = 0.75 * n_xy as f64;
    CbctGeometry {
        n_u: n_uv,
        n_v: n_uv,
        d_u: 1.0,
        d_v: 1.0,
        n_p,
        n_x: n_xy,
        n_y: n_xy,
        n_z,
        d_x: 1.0,
        d_y: 1.0,
        d_z: 1.0,
        d: 2.5 * radius,
        cap_d: 5.0 * radius,
    }
}

fn random_stack(g: &CbctGeometry, seed: u64) -> (Vec<ProjectionMatrix>, Vec<Projection>) {
    let mut rng = StdRng::seed_from_u64(seed);
    let mats = (0..g.n_p)
        .map(|s| build_projection_matrix(g, s).unwrap())
        .collect();
    let projs = (0..g.n_p)
        .map(|_| {
            let mut samples: Vec<f32> = (0..g.n_u * g.n_v)
                .map(|_| rng.random_range(-1.0f32..1.0))
                .collect();
            // Dark detector border, as in any scan that keeps the object
            // inside the field of view. The out-of-support cutoff is a step,
            // so edge samples with full magnitude would turn ulp-level u/v
            // differences between the kernels into full-sample differences.
            for v in 0..g.n_v {
                for u in 0..g.n_u {
                    if u < 2 || v < 2 || u + 2 >= g.n_u || v + 2 >= g.n_v {
                        samples[v * g.n_u + u] = 0.0;
                    }
                }
            }
            Projection::new(g.n_u, g.n_v, ProjectionKind::Filtered, samples).unwrap()
        })
        .collect();
    (mats, projs)
}

fn assert_kernels_agree(g: &CbctGeometry, seed: u64) {
    let (mats, projs) = random_stack(g, seed);
    let mut count_std = OpCounter::new();
    let mut count_opt = OpCounter::new();
    let standard = backproject_standard(&mats, &projs, g, &mut count_std).unwrap();
    let optimized = backproject_optimized(&mats, &projs, g, 32, &mut count_opt).unwrap();

    let rmse = optimized.rmse(&standard);
    let max = optimized.max_abs_diff(&standard);
    assert!(rmse < 1e-5, "rmse {rmse} for {g:?}");
    assert!(max < 1e-3, "max diff {max} for {g:?}");

    assert_eq!(count_std.inner_products, standard_op_count(g, g.n_p));
    assert_eq!(count_opt.inner_products, optimized_op_count(g, g.n_p));
}

#[test]
fn kernels_agree_on_a_mid_size_volume() {
    assert_kernels_agree(&geom(64, 64, 96, 24), 7);
}

#[test]
fn op_count_ratio_approaches_one_sixth() {
    // ratio = (2 + n_z/2) / (3 n_z) -> 1/6 from above as n_z grows.
    let mut prev = f64::INFINITY;
    for n_z in [16usize, 64, 256, 768, 4096] {
        let g = geom(8, n_z, 16, 4);
        let ratio = optimized_op_count(&g, g.n_p) as f64 / standard_op_count(&g, g.n_p) as f64;
        assert!(ratio > 1.0 / 6.0 && ratio < prev);
        prev = ratio;
    }
    let g = geom(8, 768, 16, 4);
    let ratio = optimized_op_count(&g, g.n_p) as f64 / standard_op_count(&g, g.n_p) as f64;
    assert!((ratio - 1.0 / 6.0).abs() / (1.0 / 6.0) < 0.01);
}

#[test]
fn backprojection_is_linear_in_the_projections() {
    let g = geom(12, 12, 24, 6);
    let (mats, a) = random_stack(&g, 11);
    let (_, b) = random_stack(&g, 13);
    let sum: Vec<Projection> = a
        .iter()
        .zip(b.iter())
        .map(|(pa, pb)| {
            let samples = pa
                .samples
                .iter()
                .zip(pb.samples.iter())
                .map(|(x, y)| x + y)
                .collect();
            Projection::new(g.n_u, g.n_v, ProjectionKind::Filtered, samples).unwrap()
        })
        .collect();
    let mut c = OpCounter::new();
    let va = backproject_standard(&mats, &a, &g, &mut c).unwrap();
    let vb = backproject_standard(&mats, &b, &g, &mut c).unwrap();
    let vsum = backproject_standard(&mats, &sum, &g, &mut c).unwrap();
    // Random signed data cancels heavily, so measure against the
    // accumulation magnitude rather than the cancelled voxel values.
    let vmax = va
        .samples
        .iter()
        .chain(vb.samples.iter())
        .fold(0.0f64, |m, &s| m.max((s as f64).abs()));
    for idx in 0..vsum.samples.len() {
        let direct = vsum.samples[idx] as f64;
        let split = va.samples[idx] as f64 + vb.samples[idx] as f64;
        let tol = 1e-4 * direct.abs().max(vmax);
        assert!(
            (direct - split).abs() <= tol,
            "idx {idx}: {direct} vs {split} (vmax {vmax})"
        );
    }
}

/// y is affine in k (the k coefficient of the middle matrix row), so an
/// incremental per-k update is interchangeable with the direct dot product.
#[test]
fn incremental_y_matches_direct_dot() {
    let g = geom(10, 16, 20, 9);
    for view in 0..g.n_p {
        let m = build_projection_matrix(&g, view).unwrap();
        for (i, j) in [(0usize, 0usize), (3, 7), (9, 2)] {
            let row = m.rows[1];
            let mut y_inc = row[0] * i as f64 + row[1] * j as f64 + row[3];
            for k in 0..g.n_z {
                let y_dot = row[0] * i as f64 + row[1] * j as f64 + row[2] * k as f64 + row[3];
                let tol = 1e-6 * y_dot.abs().max(1.0);
                assert!((y_inc - y_dot).abs() <= tol, "k={k}: {y_inc} vs {y_dot}");
                y_inc += row[2];
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn kernels_agree_on_random_problems(
        n_xy in 4usize..32,
        half_nz in 2usize..16,
        n_uv in 8usize..48,
        n_p in 1usize..32,
        seed in any::<u64>(),
    ) {
        assert_kernels_agree(&geom(n_xy, 2 * half_nz, n_uv, n_p), seed);
    }
}
