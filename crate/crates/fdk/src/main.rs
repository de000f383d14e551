use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand, ValueEnum};

use fdk::io::{
    self, read_geometry, read_meta, read_projection, read_projections, write_projections,
    write_volume_slices, DataKind, DatasetMeta, FileSliceSink, IoError,
};
use fdk::pipeline::{self, plan_grid, plan_grid_rows, run_pipeline, RunOptions};
use fdk::report::{evaluate_params, read_params, RunReport};
use fdk_core::backprojection::{
    backproject_optimized, backproject_standard, optimized_op_count, standard_op_count, OpCounter,
};
use fdk_core::filtering::{filter_with_convolver, Projection, ProjectionKind, RowConvolver};
use fdk_core::geometry::{build_projection_matrix, CbctGeometry, ProjectionMatrix};
use fdk_core::perfmodel::gups;
use fdk_core::phantom::{forward_project, sample_volume, shepp_logan_3d};

/// Cone-beam CT reconstruction engine: FDK filtering and back-projection
/// kernels, a desk-scale pipelined rank-grid executor, and the matching
/// performance model.
#[derive(Parser)]
#[command(name = "fdk", version, max_term_width = 100)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum KernelChoice {
    Standard,
    Optimized,
}

#[derive(Subcommand)]
enum Command {
    /// Voxelize the Shepp-Logan phantom into a sliced volume
    Phantom {
        #[arg(long)]
        geometry: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Forward-project the phantom into a raw projection dataset
    Project {
        #[arg(long)]
        geometry: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Cosine-weight and ramp-filter a raw projection dataset
    Filter {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Override the dataset's geometry sidecar (detector fields must match)
        #[arg(long)]
        geometry: Option<PathBuf>,
    },
    /// Monolithic FDK reconstruction of a projection dataset
    Reconstruct {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value_t = KernelChoice::Optimized)]
        kernel: KernelChoice,
        /// Projections per back-projection batch
        #[arg(long, default_value_t = pipeline::DEFAULT_BATCH)]
        batch: usize,
        /// Print measured and predicted inner-product counts
        #[arg(long)]
        count_ops: bool,
        #[arg(long)]
        geometry: Option<PathBuf>,
    },
    /// Reconstruct through the pipelined rank grid
    Pipeline {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Total rank count (grid size R*C)
        #[arg(long)]
        ranks: usize,
        /// Per-rank sub-volume memory budget in bytes (sets R)
        #[arg(long, conflicts_with = "rows")]
        subvol_bytes: Option<usize>,
        /// Explicit grid row count R
        #[arg(long)]
        rows: Option<usize>,
        #[arg(long, default_value_t = pipeline::DEFAULT_BATCH)]
        batch: usize,
        #[arg(long)]
        geometry: Option<PathBuf>,
    },
    /// Evaluate the performance model from a key=value parameter file
    Model {
        #[arg(long)]
        params: PathBuf,
        /// Take the problem sizes from a scan geometry instead of the
        /// params file
        #[arg(long)]
        geometry: Option<PathBuf>,
    },
    /// Timed back-projection runs reporting GUPS
    Bench {
        #[arg(long)]
        geometry: PathBuf,
        #[arg(long, value_enum)]
        kernel: Option<KernelChoice>,
        #[arg(long, default_value_t = pipeline::DEFAULT_BATCH)]
        batch: usize,
        /// Also write a report.txt into this directory
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

enum CliError {
    Usage(String),
    Io(IoError),
    Validation(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Io(_) => 2,
            CliError::Validation(_) => 3,
        }
    }

    fn message(&self) -> String {
        match self {
            CliError::Usage(m) => m.clone(),
            CliError::Io(e) => format!("io error: {e}"),
            CliError::Validation(m) => format!("validation error: {m}"),
        }
    }
}

impl From<IoError> for CliError {
    fn from(e: IoError) -> Self {
        match e {
            IoError::Geometry(g) => CliError::Validation(g.to_string()),
            other => CliError::Io(other),
        }
    }
}

impl From<pipeline::PipelineError> for CliError {
    fn from(e: pipeline::PipelineError) -> Self {
        match e {
            pipeline::PipelineError::Sink { k, source } => CliError::Io(IoError::Io {
                path: PathBuf::from(io::slice_file_name(k)),
                source,
            }),
            other => CliError::Validation(other.to_string()),
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // --help / --version land here and are not errors.
            if e.use_stderr() {
                eprint!("{e}");
                return ExitCode::from(1);
            }
            print!("{e}");
            return ExitCode::SUCCESS;
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("fdk: {}", e.message());
            ExitCode::from(e.code())
        }
    }
}

/// Applies a `--geometry` override on top of a dataset sidecar; the fields
/// describing data already on disk must agree.
fn effective_geometry(
    meta: &DatasetMeta,
    override_path: Option<&Path>,
) -> Result<CbctGeometry, CliError> {
    let Some(path) = override_path else {
        return Ok(meta.geom);
    };
    let g = read_geometry(path)?;
    if g.n_u != meta.geom.n_u || g.n_v != meta.geom.n_v || g.n_p != meta.geom.n_p {
        return Err(CliError::Validation(format!(
            "geometry override {}x{}x{} does not match dataset {}x{}x{}",
            g.n_u, g.n_v, g.n_p, meta.geom.n_u, meta.geom.n_v, meta.geom.n_p
        )));
    }
    Ok(g)
}

fn build_matrices(g: &CbctGeometry) -> Result<Vec<ProjectionMatrix>, CliError> {
    (0..g.n_p)
        .map(|s| build_projection_matrix(g, s).map_err(|e| CliError::Validation(e.to_string())))
        .collect()
}

fn filter_stack(projs: &[Projection], g: &CbctGeometry) -> Result<Vec<Projection>, CliError> {
    let (cos_tab, ramp) = pipeline::scan_filters(g);
    let convolver = RowConvolver::new(&ramp, g.n_u);
    Ok(projs
        .iter()
        .map(|p| filter_with_convolver(p, &cos_tab, &convolver))
        .collect())
}

fn run(command: Command) -> Result<(), CliError> {
    match command {
        Command::Phantom { geometry, out } => {
            let g = read_geometry(&geometry)?;
            let ph = shepp_logan_3d().fitted_to(&g);
            let t0 = Instant::now();
            let vol = sample_volume(&ph, &g);
            let secs = t0.elapsed().as_secs_f64();
            write_volume_slices(&vol, &g, &out)?;
            let mut report = RunReport::new("phantom", &g);
            report.push_secs("t_voxelize", secs);
            report.push("half_extent_mm", ph.half_extent);
            report.write_to(&out)?;
            println!(
                "phantom: {}x{}x{} voxels -> {} ({secs:.3}s)",
                g.n_x,
                g.n_y,
                g.n_z,
                out.display()
            );
            Ok(())
        }

        Command::Project { geometry, out } => {
            let g = read_geometry(&geometry)?;
            let ph = shepp_logan_3d().fitted_to(&g);
            let t0 = Instant::now();
            let projs = (0..g.n_p)
                .map(|view| forward_project(&ph, &g, view))
                .collect::<Result<Vec<_>, _>>()
                .map_err(|e| CliError::Validation(e.to_string()))?;
            let secs = t0.elapsed().as_secs_f64();
            write_projections(
                &projs,
                &DatasetMeta {
                    geom: g,
                    kind: DataKind::RawProjections,
                },
                &out,
            )?;
            println!(
                "project: {} views of {}x{} -> {} ({secs:.3}s)",
                g.n_p,
                g.n_u,
                g.n_v,
                out.display()
            );
            Ok(())
        }

        Command::Filter {
            input,
            out,
            geometry,
        } => {
            let (projs, meta) = read_projections(&input)?;
            if meta.kind != DataKind::RawProjections {
                return Err(CliError::Validation(
                    "input dataset is already filtered".into(),
                ));
            }
            let g = effective_geometry(&meta, geometry.as_deref())?;
            let t0 = Instant::now();
            let filtered = filter_stack(&projs, &g)?;
            let secs = t0.elapsed().as_secs_f64();
            write_projections(
                &filtered,
                &DatasetMeta {
                    geom: g,
                    kind: DataKind::FilteredProjections,
                },
                &out,
            )?;
            println!("filter: {} views ({secs:.3}s)", g.n_p);
            Ok(())
        }

        Command::Reconstruct {
            input,
            out,
            kernel,
            batch,
            count_ops,
            geometry,
        } => {
            let (projs, meta) = read_projections(&input)?;
            let g = effective_geometry(&meta, geometry.as_deref())?;
            let (filtered, t_flt) = match meta.kind {
                DataKind::RawProjections => {
                    let t0 = Instant::now();
                    let f = filter_stack(&projs, &g)?;
                    (f, t0.elapsed().as_secs_f64())
                }
                DataKind::FilteredProjections => (projs, 0.0),
                DataKind::Volume => {
                    return Err(CliError::Validation("input dataset is a volume".into()))
                }
            };
            let mats = build_matrices(&g)?;
            let mut counter = OpCounter::new();
            let t0 = Instant::now();
            let (volume, kernel_name, predicted) = match kernel {
                KernelChoice::Standard => (
                    backproject_standard(&mats, &filtered, &g, &mut counter)
                        .map_err(|e| CliError::Validation(e.to_string()))?,
                    "standard",
                    standard_op_count(&g, g.n_p),
                ),
                KernelChoice::Optimized => (
                    backproject_optimized(&mats, &filtered, &g, batch, &mut counter)
                        .map_err(|e| CliError::Validation(e.to_string()))?,
                    "optimized",
                    optimized_op_count(&g, g.n_p),
                ),
            };
            let t_bp = t0.elapsed().as_secs_f64();
            write_volume_slices(&volume, &g, &out)?;

            let rate = gups(g.n_x, g.n_y, g.n_z, g.n_p, t_bp)
                .map_err(|e| CliError::Validation(e.to_string()))?;
            let mut report = RunReport::new("reconstruct", &g);
            report.push("kernel", kernel_name);
            report.push("batch", batch);
            report.push_secs("t_flt", t_flt);
            report.push_secs("t_bp", t_bp);
            report.push("gups", format!("{rate:.2}"));
            report.push_counts(&counter, predicted);
            report.write_to(&out)?;

            println!(
                "reconstruct: kernel={kernel_name} t_flt={t_flt:.3}s t_bp={t_bp:.3}s gups={rate:.2}"
            );
            if count_ops {
                println!("inner_products={}", counter.inner_products);
                println!("inner_products_predicted={predicted}");
            }
            Ok(())
        }

        Command::Pipeline {
            input,
            out,
            ranks,
            subvol_bytes,
            rows,
            batch,
            geometry,
        } => {
            if subvol_bytes.is_none() && rows.is_none() {
                return Err(CliError::Usage(
                    "pipeline needs --subvol-bytes or --rows".into(),
                ));
            }
            let meta = read_meta(&input)?;
            if meta.kind != DataKind::RawProjections {
                return Err(CliError::Validation(
                    "pipeline wants a raw projection dataset; it filters internally".into(),
                ));
            }
            let g = effective_geometry(&meta, geometry.as_deref())?;
            let mut plan = match (subvol_bytes, rows) {
                (Some(bytes), None) => plan_grid(&g, ranks, bytes)?,
                (None, Some(r)) => plan_grid_rows(&g, ranks, r)?,
                _ => unreachable!("checked above; clap conflicts_with"),
            };
            plan.batch = batch;

            let sink = FileSliceSink::new(&out, &g)?;
            let source =
                |index: usize| read_projection(&input, &meta, index).map_err(|e| e.to_string());
            let run = run_pipeline(&plan, &g, &source, Some(&sink), &RunOptions::default())?;

            let mut report = RunReport::new("pipeline", &g);
            report.push("grid_rows", plan.rows);
            report.push("grid_cols", plan.cols);
            report.push("ranks", plan.n_ranks);
            report.push("proj_per_rank", plan.proj_per_rank);
            report.push("batch", plan.batch);
            report.push("inner_products", run.stats.total_inner_products);
            report.push_pipeline(&run.stats);
            report.write_to(&out)?;

            println!(
                "pipeline: grid {}x{} t_compute={:.3}s delta={:.2} -> {}",
                plan.rows,
                plan.cols,
                run.stats.t_compute,
                run.stats.delta,
                out.display()
            );
            Ok(())
        }

        Command::Model { params, geometry } => {
            let mut file = read_params(&params)?;
            if let Some(path) = geometry {
                let g = read_geometry(&path)?;
                match &mut file {
                    fdk::report::ParamsFile::Model(p) => {
                        p.n_u = g.n_u;
                        p.n_v = g.n_v;
                        p.n_p = g.n_p;
                        p.n_x = g.n_x;
                        p.n_y = g.n_y;
                        p.n_z = g.n_z;
                    }
                    fdk::report::ParamsFile::Stages(_) => {
                        return Err(CliError::Validation(
                            "--geometry has no effect on measured stage times".into(),
                        ))
                    }
                }
            }
            let text = evaluate_params(&file).map_err(|e| CliError::Validation(e.to_string()))?;
            print!("{text}");
            Ok(())
        }

        Command::Bench {
            geometry,
            kernel,
            batch,
            out,
        } => {
            let g = read_geometry(&geometry)?;
            let mats = build_matrices(&g)?;
            // Synthetic filtered data; kernel timing does not depend on
            // sample values.
            let mut state = 0x9E3779B97F4A7C15u64;
            let projs: Vec<Projection> = (0..g.n_p)
                .map(|_| {
                    let samples = (0..g.n_u * g.n_v)
                        .map(|_| {
                            state ^= state << 13;
                            state ^= state >> 7;
                            state ^= state << 17;
                            (state >> 40) as f32 / 16777216.0
                        })
                        .collect();
                    Projection::new(g.n_u, g.n_v, ProjectionKind::Filtered, samples).unwrap()
                })
                .collect();

            let choices: &[KernelChoice] = match kernel {
                Some(KernelChoice::Standard) => &[KernelChoice::Standard],
                Some(KernelChoice::Optimized) => &[KernelChoice::Optimized],
                None => &[KernelChoice::Standard, KernelChoice::Optimized],
            };
            let mut report = RunReport::new("bench", &g);
            for choice in choices {
                let mut counter = OpCounter::new();
                let t0 = Instant::now();
                let name = match choice {
                    KernelChoice::Standard => {
                        backproject_standard(&mats, &projs, &g, &mut counter)
                            .map_err(|e| CliError::Validation(e.to_string()))?;
                        "standard"
                    }
                    KernelChoice::Optimized => {
                        backproject_optimized(&mats, &projs, &g, batch, &mut counter)
                            .map_err(|e| CliError::Validation(e.to_string()))?;
                        "optimized"
                    }
                };
                let secs = t0.elapsed().as_secs_f64();
                let rate = gups(g.n_x, g.n_y, g.n_z, g.n_p, secs)
                    .map_err(|e| CliError::Validation(e.to_string()))?;
                println!(
                    "bench: kernel={name} t={secs:.3}s gups={rate:.2} inner_products={}",
                    counter.inner_products
                );
                report.push(&format!("t_{name}"), format!("{secs:.3}"));
                report.push(&format!("gups_{name}"), format!("{rate:.2}"));
            }
            if let Some(dir) = out {
                std::fs::create_dir_all(&dir).map_err(|source| {
                    CliError::Io(IoError::Io {
                        path: dir.clone(),
                        source,
                    })
                })?;
                report.write_to(&dir)?;
            }
            Ok(())
        }
    }
}
