//! Dataset round-trips must be byte-exact, for arbitrary bit patterns.

use fdk::io::{
    read_projections, read_volume_slices, write_projections, write_volume_slices, DataKind,
    DatasetMeta,
};
use fdk_core::backprojection::{Volume, VolumeLayout};
use fdk_core::filtering::{Projection, ProjectionKind};
use fdk_core::geometry::CbctGeometry;
use proptest::prelude::*;
use tempfile::tempdir;

fn geom(n_u: usize, n_v: usize, n_p: usize, n: usize) -> CbctGeometry {
    CbctGeometry {
        n_u,
        n_v,
        d_u: 0.7,
        d_v: 1.3,
        n_p,
        n_x: n,
        n_y: n,
        n_z: n,
        d_x: 1.0,
        d_y: 1.0,
        d_z: 1.0,
        d: 50.0,
        cap_d: 100.0,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn projection_roundtrip_is_bit_identical(
        n_u in 1usize..24,
        n_v in 1usize..24,
        n_p in 1usize..6,
        values in prop::collection::vec(prop::num::f32::ANY, 1..2048),
    ) {
        let g = geom(n_u, n_v, n_p, 4);
        let projs: Vec<Projection> = (0..n_p)
            .map(|p| {
                let samples = (0..n_u * n_v)
                    .map(|i| values[(p * 31 + i * 7) % values.len()])
                    .collect();
                Projection::new(n_u, n_v, ProjectionKind::Raw, samples).unwrap()
            })
            .collect();
        let dir = tempdir().unwrap();
        let meta = DatasetMeta { geom: g, kind: DataKind::RawProjections };
        write_projections(&projs, &meta, dir.path()).unwrap();
        let (back, back_meta) = read_projections(dir.path()).unwrap();
        prop_assert_eq!(back_meta, meta);
        for (a, b) in projs.iter().zip(back.iter()) {
            let ab: Vec<u32> = a.samples.iter().map(|s| s.to_bits()).collect();
            let bb: Vec<u32> = b.samples.iter().map(|s| s.to_bits()).collect();
            prop_assert_eq!(ab, bb);
        }
    }

    #[test]
    fn volume_roundtrip_is_bit_identical(
        n in 1usize..10,
        values in prop::collection::vec(prop::num::f32::ANY, 1..1024),
    ) {
        let g = geom(4, 4, 2, n);
        let mut vol = Volume::zeros(n, n, n, VolumeLayout::IMajor);
        for (i, s) in vol.samples.iter_mut().enumerate() {
            *s = values[i % values.len()];
        }
        let dir = tempdir().unwrap();
        write_volume_slices(&vol, &g, dir.path()).unwrap();
        let (back, meta) = read_volume_slices(dir.path()).unwrap();
        prop_assert_eq!(meta.kind, DataKind::Volume);
        let ab: Vec<u32> = vol.samples.iter().map(|s| s.to_bits()).collect();
        let bb: Vec<u32> = back.samples.iter().map(|s| s.to_bits()).collect();
        prop_assert_eq!(ab, bb);
    }
}

#[test]
fn rewriting_identical_data_gives_identical_bytes() {
    let g = geom(8, 6, 2, 4);
    let projs: Vec<Projection> = (0..2)
        .map(|p| {
            let samples = (0..48).map(|i| (p * 48 + i) as f32 * 0.5 - 7.0).collect();
            Projection::new(8, 6, ProjectionKind::Raw, samples).unwrap()
        })
        .collect();
    let meta = DatasetMeta {
        geom: g,
        kind: DataKind::RawProjections,
    };
    let dir_a = tempdir().unwrap();
    let dir_b = tempdir().unwrap();
    write_projections(&projs, &meta, dir_a.path()).unwrap();
    write_projections(&projs, &meta, dir_b.path()).unwrap();
    for entry in std::fs::read_dir(dir_a.path()).unwrap() {
        let name = entry.unwrap().file_name();
        let a = std::fs::read(dir_a.path().join(&name)).unwrap();
        let b = std::fs::read(dir_b.path().join(&name)).unwrap();
        assert_eq!(a, b, "{name:?} differs between runs");
    }
}
