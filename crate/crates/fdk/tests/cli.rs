//! End-to-end runs of the `fdk` binary: every subcommand, the documented
//! exit codes, and cross-command consistency on a small dataset.

use std::path::PathBuf;
use std::process::{Command, Output};

use fdk::io::{read_volume_slices, write_geometry};
use fdk_core::geometry::CbctGeometry;
use tempfile::TempDir;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_fdk"))
}

fn small_geom() -> CbctGeometry {
    CbctGeometry {
        n_u: 48,
        n_v: 48,
        d_u: 1.5,
        d_v: 1.5,
        n_p: 16,
        n_x: 16,
        n_y: 16,
        n_z: 16,
        d_x: 1.0,
        d_y: 1.0,
        d_z: 1.0,
        d: 60.0,
        cap_d: 120.0,
    }
}

struct Workspace {
    _dir: TempDir,
    root: PathBuf,
    geometry: PathBuf,
}

impl Workspace {
    fn new() -> Self {
        let dir = TempDir::new().unwrap();
        let root = dir.path().to_path_buf();
        let geometry = root.join("geometry.cfg");
        write_geometry(&geometry, &small_geom()).unwrap();
        Self {
            _dir: dir,
            root,
            geometry,
        }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }
}

fn run_ok(args: &[&str]) -> Output {
    let out = bin().args(args).output().unwrap();
    assert!(
        out.status.success(),
        "fdk {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

#[test]
fn full_workflow_and_cross_checks() {
    let ws = Workspace::new();
    let geometry = ws.geometry.to_str().unwrap().to_string();
    let projs = ws.path("projs");
    let recon = ws.path("recon");
    let recon_std = ws.path("recon_std");
    let piped = ws.path("piped");
    let phantom_dir = ws.path("phantom");

    run_ok(&[
        "phantom",
        "--geometry",
        &geometry,
        "--out",
        phantom_dir.to_str().unwrap(),
    ]);
    assert!(phantom_dir.join("slice_00000.raw").exists());
    assert!(phantom_dir.join("report.txt").exists());

    run_ok(&[
        "project",
        "--geometry",
        &geometry,
        "--out",
        projs.to_str().unwrap(),
    ]);
    assert!(projs.join("proj_00015.raw").exists());
    assert!(projs.join("dataset.meta").exists());

    let filtered = ws.path("filtered");
    run_ok(&[
        "filter",
        "--input",
        projs.to_str().unwrap(),
        "--out",
        filtered.to_str().unwrap(),
    ]);
    let meta = std::fs::read_to_string(filtered.join("dataset.meta")).unwrap();
    assert!(meta.contains("state=filtered"), "{meta}");

    let out = run_ok(&[
        "reconstruct",
        "--input",
        projs.to_str().unwrap(),
        "--out",
        recon.to_str().unwrap(),
        "--kernel",
        "optimized",
        "--count-ops",
    ]);
    let text = stdout(&out);
    let g = small_geom();
    let predicted = g.n_p * g.n_x * g.n_y * (2 + g.n_z / 2);
    assert!(
        text.contains(&format!("inner_products={predicted}")),
        "{text}"
    );
    assert!(
        text.contains(&format!("inner_products_predicted={predicted}")),
        "{text}"
    );
    assert!(recon.join("report.txt").exists());

    let out = run_ok(&[
        "reconstruct",
        "--input",
        projs.to_str().unwrap(),
        "--out",
        recon_std.to_str().unwrap(),
        "--kernel",
        "standard",
        "--count-ops",
    ]);
    let text = stdout(&out);
    let predicted_std = 3 * g.n_p * g.n_x * g.n_y * g.n_z;
    assert!(
        text.contains(&format!("inner_products={predicted_std}")),
        "{text}"
    );

    // Reconstructing a pre-filtered dataset takes the same back-projection
    // path and must give the identical volume.
    let recon_pre = ws.path("recon_prefiltered");
    run_ok(&[
        "reconstruct",
        "--input",
        filtered.to_str().unwrap(),
        "--out",
        recon_pre.to_str().unwrap(),
    ]);
    let (a, _) = read_volume_slices(&recon).unwrap();
    let (b, _) = read_volume_slices(&recon_pre).unwrap();
    assert_eq!(a.samples, b.samples);

    run_ok(&[
        "pipeline",
        "--input",
        projs.to_str().unwrap(),
        "--out",
        piped.to_str().unwrap(),
        "--ranks",
        "4",
        "--rows",
        "2",
    ]);
    let (pipe_vol, _) = read_volume_slices(&piped).unwrap();
    let rmse = pipe_vol.rmse(&a);
    assert!(rmse < 1e-5, "pipeline vs reconstruct rmse {rmse}");
    let report = std::fs::read_to_string(piped.join("report.txt")).unwrap();
    assert!(report.contains("grid_rows=2"), "{report}");
    assert!(report.contains("delta="), "{report}");

    // Standard and optimized kernels agree on this small problem too.
    let (std_vol, _) = read_volume_slices(&recon_std).unwrap();
    assert!(std_vol.rmse(&a) < 1e-5);
}

#[test]
fn model_reports_published_breakdown_delta() {
    let ws = Workspace::new();
    let params = ws.path("table_row.cfg");
    std::fs::write(
        &params,
        "t_flt=0.7\nt_allgather=15.2\nt_bp=14.0\nt_compute=18.9\n",
    )
    .unwrap();
    let out = run_ok(&["model", "--params", params.to_str().unwrap()]);
    assert!(stdout(&out).contains("delta=1.58"), "{}", stdout(&out));
}

#[test]
fn model_takes_problem_sizes_from_a_geometry_file() {
    let ws = Workspace::new();
    let params = ws.path("machine.cfg");
    std::fs::write(
        &params,
        "bw_load=20\nbw_store=28.5\nth_flt=45\nth_bp=30\nth_allgather=14\nth_reduce=3\n\
         bw_pcie=11.9\nn_pcie=2\nn_gpu_per_node=4\nn_cpu_per_node=2\nn_gpus=4\nn_nodes=1\n\
         n_u=2048\nn_v=2048\nn_p=4096\nn_x=4096\nn_y=4096\nn_z=4096\nr=2\nc=2\n",
    )
    .unwrap();
    let base = run_ok(&["model", "--params", params.to_str().unwrap()]);
    let overridden = run_ok(&[
        "model",
        "--params",
        params.to_str().unwrap(),
        "--geometry",
        ws.geometry.to_str().unwrap(),
    ]);
    // The small scan's store time must be far below the 4096^3 one.
    assert!(stdout(&base).contains("t_store=8.98"), "{}", stdout(&base));
    assert_ne!(stdout(&base), stdout(&overridden));
    assert!(
        stdout(&overridden).contains("t_store=0.000"),
        "{}",
        stdout(&overridden)
    );
}

#[test]
fn bench_reports_gups_for_both_kernels() {
    let ws = Workspace::new();
    let out = run_ok(&["bench", "--geometry", ws.geometry.to_str().unwrap()]);
    let text = stdout(&out);
    assert!(text.contains("kernel=standard"), "{text}");
    assert!(text.contains("kernel=optimized"), "{text}");
    assert!(text.contains("gups="), "{text}");
}

#[test]
fn exit_codes_follow_the_contract() {
    let ws = Workspace::new();

    // Unknown subcommand -> usage (1).
    let out = bin().arg("frobnicate").output().unwrap();
    assert_eq!(out.status.code(), Some(1));

    // Unknown flag -> usage (1).
    let out = bin().args(["model", "--frobnicate"]).output().unwrap();
    assert_eq!(out.status.code(), Some(1));

    // Missing dataset -> IO error (2).
    let out = bin()
        .args([
            "reconstruct",
            "--input",
            ws.path("nope").to_str().unwrap(),
            "--out",
            ws.path("out").to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert_eq!(
        out.status.code(),
        Some(2),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );

    // Invalid geometry values -> validation error (3).
    let bad = ws.path("bad.cfg");
    let mut g = small_geom();
    g.cap_d = 10.0; // cap_d < d
                    // write_geometry does not validate; the consumer does.
    write_geometry(&bad, &g).unwrap();
    let out = bin()
        .args([
            "phantom",
            "--geometry",
            bad.to_str().unwrap(),
            "--out",
            ws.path("badout").to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert_eq!(
        out.status.code(),
        Some(3),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );

    // Pipeline without a grid shape -> usage (1).
    let out = bin()
        .args([
            "pipeline",
            "--input",
            ws.path("projs").to_str().unwrap(),
            "--out",
            ws.path("p").to_str().unwrap(),
            "--ranks",
            "4",
        ])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));

    // Infeasible grid -> validation (3); needs a real dataset first.
    run_ok(&[
        "project",
        "--geometry",
        ws.geometry.to_str().unwrap(),
        "--out",
        ws.path("projs").to_str().unwrap(),
    ]);
    let out = bin()
        .args([
            "pipeline",
            "--input",
            ws.path("projs").to_str().unwrap(),
            "--out",
            ws.path("p").to_str().unwrap(),
            "--ranks",
            "3",
            "--rows",
            "2",
        ])
        .output()
        .unwrap();
    assert_eq!(
        out.status.code(),
        Some(3),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );

    // --help exits 0.
    let out = bin().arg("--help").output().unwrap();
    assert_eq!(out.status.code(), Some(0));
}

#[test]
fn geometry_override_must_match_dataset() {
    let ws = Workspace::new();
    let projs = ws.path("projs2");
    run_ok(&[
        "project",
        "--geometry",
        ws.geometry.to_str().unwrap(),
        "--out",
        projs.to_str().unwrap(),
    ]);
    let mut g = small_geom();
    g.n_u = 32; // detector no longer matches the files on disk
    let other = ws.path("other.cfg");
    write_geometry(&other, &g).unwrap();
    let out = bin()
        .args([
            "reconstruct",
            "--input",
            projs.to_str().unwrap(),
            "--out",
            ws.path("r").to_str().unwrap(),
            "--geometry",
            other.to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(3));
}
