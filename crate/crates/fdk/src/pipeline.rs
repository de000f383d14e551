//! Desk-scale pipelined executor: a 2-D grid of rank tasks connected by
//! in-process collectives.
//!
//! The grid has `R` rows and `C` columns. Columns partition the projection
//! stack (`n_p/C` views per column, `n_p/(C*R)` loaded and filtered per
//! rank); rows partition the output volume into symmetric slice-band pairs
//! so the optimized kernel's k-mirroring stays rank-local. Each rank runs
//! three stages in parallel, connected by bounded channels:
//!
//! * filtering: a small worker pool loads and filters the rank's share of
//!   raw projections, emitting them in index order;
//! * main: per filtered projection, an AllGather across the rank's column
//!   so every row of the column sees the column's whole share;
//! * back-projection: consumes gathered projections in fixed batches and
//!   accumulates into the rank's slice-band slab.
//!
//! When all projections are consumed, each row sums its `C` partial slabs
//! with a fixed-order Reduce to the row root, which scales by the angle
//! step and streams the slab out slice by slice. Everything after
//! back-projection runs sequentially; only the three stages overlap.
//!
//! All ordering is pinned (emission order, batch boundaries, reduce order),
//! so a run is bit-for-bit reproducible, and a 1x1 grid is bit-identical to
//! the monolithic optimized kernel.

use std::sync::atomic::{AtomicU64, AtomicUsize, Ordering};
use std::sync::mpsc::{sync_channel, Receiver, SyncSender};
use std::sync::{Condvar, Mutex};
use std::time::{Duration, Instant};

use fdk_core::backprojection::{
    accumulate_optimized_band, BackprojectError, KBandPair, OpCounter, Volume, VolumeLayout,
};
use fdk_core::filtering::{
    cosine_table, filter_with_convolver, ramp_kernel, CosineTable, FilterError, Projection,
    RampKernel, RowConvolver,
};
use fdk_core::geometry::{build_projection_matrix, CbctGeometry, GeometryError, ProjectionMatrix};
use fdk_core::perfmodel::overlap_delta;
use thiserror::Error;

/// Depth of the inter-stage circular buffers, in projections.
pub const CHANNEL_DEPTH: usize = 4;

/// Default number of projections per back-projection batch.
pub const DEFAULT_BATCH: usize = 32;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("cannot plan a grid with zero {0}")]
    ZeroParam(&'static str),
    #[error("rows R = {r} exceeds the rank count {n_ranks}")]
    RowsExceedRanks { r: usize, n_ranks: usize },
    #[error("rank count {n_ranks} is not divisible by rows R = {r}")]
    RanksNotDivisible { n_ranks: usize, r: usize },
    #[error("n_p = {n_p} is not divisible by the grid size {n_ranks}")]
    ProjectionsNotDivisible { n_p: usize, n_ranks: usize },
    #[error("n_z/2 = {half_nz} is not divisible by rows R = {r}")]
    SlicesNotDivisible { half_nz: usize, r: usize },
    #[error("grid requires even n_z, got {0}")]
    OddNz(usize),
    #[error("plan was built for another geometry ({detail})")]
    PlanMismatch { detail: String },
    #[error("rank ({row},{col}): projection source failed at index {index}: {message}")]
    Source {
        row: usize,
        col: usize,
        index: usize,
        message: String,
    },
    #[error("rank ({row},{col}): collective timed out waiting for member(s) {missing:?}")]
    CollectiveTimeout {
        row: usize,
        col: usize,
        missing: Vec<usize>,
    },
    #[error("collective shape mismatch: {detail}")]
    CollectiveShape { detail: String },
    #[error("rank ({row},{col}): {stage} stage disconnected")]
    Disconnected {
        row: usize,
        col: usize,
        stage: &'static str,
    },
    #[error("slice sink failed at slice {k}: {source}")]
    Sink {
        k: usize,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Filter(#[from] FilterError),
    #[error(transparent)]
    Backproject(#[from] BackprojectError),
}

/// How a reconstruction problem maps onto the rank grid.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GridPlan {
    pub rows: usize,
    pub cols: usize,
    pub n_ranks: usize,
    pub proj_per_rank: usize,
    /// Slice-band pair owned by each row.
    pub bands: Vec<KBandPair>,
    /// Bytes of one rank's slab (float samples).
    pub sub_vol_bytes: usize,
    /// Projections per back-projection batch.
    pub batch: usize,
}

fn plan_for_rows(
    geom: &CbctGeometry,
    n_ranks: usize,
    rows: usize,
) -> Result<GridPlan, PipelineError> {
    if n_ranks == 0 {
        return Err(PipelineError::ZeroParam("ranks"));
    }
    if rows == 0 {
        return Err(PipelineError::ZeroParam("rows"));
    }
    if rows > n_ranks {
        return Err(PipelineError::RowsExceedRanks { r: rows, n_ranks });
    }
    if !n_ranks.is_multiple_of(rows) {
        return Err(PipelineError::RanksNotDivisible { n_ranks, r: rows });
    }
    if !geom.n_z.is_multiple_of(2) {
        return Err(PipelineError::OddNz(geom.n_z));
    }
    let half_nz = geom.n_z / 2;
    if !half_nz.is_multiple_of(rows) {
        return Err(PipelineError::SlicesNotDivisible { half_nz, r: rows });
    }
    if !geom.n_p.is_multiple_of(n_ranks) {
        return Err(PipelineError::ProjectionsNotDivisible {
            n_p: geom.n_p,
            n_ranks,
        });
    }
    let h = half_nz / rows;
    let bands = (0..rows)
        .map(|r| KBandPair {
            k_lo: r * h,
            half: h,
        })
        .collect();
    Ok(GridPlan {
        rows,
        cols: n_ranks / rows,
        n_ranks,
        proj_per_rank: geom.n_p / n_ranks,
        bands,
        sub_vol_bytes: 4 * geom.n_x * geom.n_y * (geom.n_z / rows),
        batch: DEFAULT_BATCH,
    })
}

/// Plans the grid from a per-rank memory budget: `R` is the number of
/// sub-volumes the full volume must be split into to fit, rounded up to a
/// power of two and kept as small as possible (more columns means shorter
/// per-column workloads).
pub fn plan_grid(
    geom: &CbctGeometry,
    n_ranks: usize,
    sub_vol_bytes: usize,
) -> Result<GridPlan, PipelineError> {
    if sub_vol_bytes == 0 {
        return Err(PipelineError::ZeroParam("sub-volume bytes"));
    }
    let vol_bytes = 4usize * geom.n_x * geom.n_y * geom.n_z;
    let rows = vol_bytes.div_ceil(sub_vol_bytes).next_power_of_two();
    plan_for_rows(geom, n_ranks, rows)
}

/// Plans the grid from an explicit row count.
pub fn plan_grid_rows(
    geom: &CbctGeometry,
    n_ranks: usize,
    rows: usize,
) -> Result<GridPlan, PipelineError> {
    plan_for_rows(geom, n_ranks, rows)
}

impl GridPlan {
    fn check_geometry(&self, geom: &CbctGeometry) -> Result<(), PipelineError> {
        let expected = plan_for_rows(geom, self.n_ranks, self.rows)?;
        if expected.bands != self.bands || expected.proj_per_rank != self.proj_per_rank {
            return Err(PipelineError::PlanMismatch {
                detail: format!(
                    "plan covers {} projections/rank over {} bands, geometry needs {} over {}",
                    self.proj_per_rank,
                    self.bands.len(),
                    expected.proj_per_rank,
                    expected.bands.len()
                ),
            });
        }
        Ok(())
    }
}

/// A synchronous rendezvous collective over one rank group: every member
/// contributes one item per round and leaves with all of them in member
/// order. Rounds pipeline safely; a member cannot lap its peers.
pub struct Collective<T> {
    size: usize,
    timeout: Duration,
    state: Mutex<RoundState<T>>,
    cond: Condvar,
}

struct RoundState<T> {
    items: Vec<Option<T>>,
    contributed: usize,
    taken: usize,
    full: bool,
}

impl<T: Clone> Collective<T> {
    pub fn new(size: usize, timeout: Duration) -> Self {
        Self {
            size,
            timeout,
            state: Mutex::new(RoundState {
                items: (0..size).map(|_| None).collect(),
                contributed: 0,
                taken: 0,
                full: false,
            }),
            cond: Condvar::new(),
        }
    }

    /// Contributes `item` as `member` and blocks for the round to fill.
    /// On timeout, reports which members never showed up.
    pub fn gather(&self, member: usize, item: T) -> Result<Vec<T>, Vec<usize>> {
        assert!(member < self.size);
        let deadline = Instant::now() + self.timeout;
        let mut st = self.state.lock().unwrap();
        // Wait for the previous round to drain before starting a new one.
        while st.full || st.items[member].is_some() {
            let (next, res) = self.wait(st, deadline);
            st = next;
            if res {
                return Err(self.missing(&st));
            }
        }
        st.items[member] = Some(item);
        st.contributed += 1;
        if st.contributed == self.size {
            st.full = true;
            self.cond.notify_all();
        }
        while !st.full {
            let (next, timed_out) = self.wait(st, deadline);
            st = next;
            if timed_out && !st.full {
                return Err(self.missing(&st));
            }
        }
        let out: Vec<T> = st
            .items
            .iter()
            .map(|o| o.as_ref().expect("full round").clone())
            .collect();
        st.taken += 1;
        if st.taken == self.size {
            st.items.iter_mut().for_each(|o| *o = None);
            st.contributed = 0;
            st.taken = 0;
            st.full = false;
            self.cond.notify_all();
        }
        Ok(out)
    }

    fn wait<'a>(
        &'a self,
        st: std::sync::MutexGuard<'a, RoundState<T>>,
        deadline: Instant,
    ) -> (std::sync::MutexGuard<'a, RoundState<T>>, bool) {
        let now = Instant::now();
        if now >= deadline {
            return (st, true);
        }
        let (st, res) = self.cond.wait_timeout(st, deadline - now).unwrap();
        (st, res.timed_out() && Instant::now() >= deadline)
    }

    fn missing(&self, st: &RoundState<T>) -> Vec<usize> {
        st.items
            .iter()
            .enumerate()
            .filter(|(_, o)| o.is_none())
            .map(|(i, _)| i)
            .collect()
    }
}

/// AllGather of one projection per member; every member receives all
/// contributions in member order. Mismatched shapes fail the round for
/// everyone.
pub fn all_gather(
    group: &Collective<Projection>,
    member: usize,
    item: Projection,
) -> Result<Vec<Projection>, PipelineError> {
    let (w, h) = (item.width, item.height);
    let out = group
        .gather(member, item)
        .map_err(|missing| PipelineError::CollectiveTimeout {
            row: member,
            col: 0,
            missing,
        })?;
    if let Some((i, p)) = out
        .iter()
        .enumerate()
        .find(|(_, p)| p.width != w || p.height != h)
    {
        return Err(PipelineError::CollectiveShape {
            detail: format!(
                "member {i} contributed {}x{}, expected {w}x{h}",
                p.width, p.height
            ),
        });
    }
    Ok(out)
}

/// Element-wise sum of identically shaped slabs, accumulated in member
/// order 0..size and delivered to member 0 (`Some` at the root, `None`
/// elsewhere).
pub fn reduce_sum(
    group: &Collective<Volume>,
    member: usize,
    slab: Volume,
) -> Result<Option<Volume>, PipelineError> {
    let shape = (slab.n_x, slab.n_y, slab.n_z);
    let all = group
        .gather(member, slab)
        .map_err(|missing| PipelineError::CollectiveTimeout {
            row: 0,
            col: member,
            missing,
        })?;
    if let Some((i, v)) = all
        .iter()
        .enumerate()
        .find(|(_, v)| (v.n_x, v.n_y, v.n_z) != shape)
    {
        return Err(PipelineError::CollectiveShape {
            detail: format!(
                "member {i} contributed {}x{}x{}, expected {:?}",
                v.n_x, v.n_y, v.n_z, shape
            ),
        });
    }
    if member != 0 {
        return Ok(None);
    }
    let mut iter = all.into_iter();
    let mut acc = iter.next().expect("non-empty group");
    for v in iter {
        for (a, b) in acc.samples.iter_mut().zip(v.samples.iter()) {
            *a += b;
        }
    }
    Ok(Some(acc))
}

/// Receives finished slices as row roots produce them.
pub trait SliceSink: Sync {
    fn write_slice(&self, k: usize, plane: &[f32]) -> std::io::Result<()>;
}

/// Knobs that do not affect results, only scheduling.
#[derive(Debug, Clone)]
pub struct RunOptions {
    /// How long a collective waits for its peers before giving up.
    pub collective_timeout: Duration,
    /// Filtering workers per rank; `None` derives cores/n_ranks - 1.
    pub filter_workers: Option<usize>,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self {
            collective_timeout: Duration::from_secs(60),
            filter_workers: None,
        }
    }
}

/// Stage activity of one rank, in seconds of busy time.
#[derive(Debug, Clone, Copy)]
pub struct RankStats {
    pub row: usize,
    pub col: usize,
    /// Load+filter work divided by the worker-pool width.
    pub t_flt: f64,
    /// Time inside AllGather calls (including peer waits, like any
    /// communication library would report).
    pub t_gather: f64,
    /// Time inside transpose + back-projection kernels.
    pub t_bp: f64,
    pub inner_products: u64,
}

/// Timing summary of a whole run.
#[derive(Debug, Clone)]
pub struct PipelineStats {
    pub ranks: Vec<RankStats>,
    /// Per-stage maxima across ranks.
    pub t_flt: f64,
    pub t_gather: f64,
    pub t_bp: f64,
    /// Wall time of the overlapped phase (start to last back-projection).
    pub t_compute: f64,
    pub t_reduce: f64,
    pub t_store: f64,
    pub delta: f64,
    pub filter_workers: usize,
    pub total_inner_products: u64,
}

pub struct PipelineRun {
    pub volume: Volume,
    pub stats: PipelineStats,
}

/// Shared read-only filter tables for a scan. The CLI's monolithic path
/// uses the same constructor so pipeline and monolithic results match
/// bit for bit.
pub fn scan_filters(geom: &CbctGeometry) -> (CosineTable, RampKernel) {
    (cosine_table(geom), ramp_kernel(geom, geom.n_u - 1))
}

struct RankOutput {
    stats: RankStats,
    bp_done: Instant,
    reduce_secs: f64,
    store_secs: f64,
    /// Final reduced slab, only at row roots.
    slab: Option<Volume>,
}

struct FilterShared {
    queue: Mutex<FilterQueue>,
    cond: Condvar,
    next: AtomicUsize,
    busy_nanos: AtomicU64,
}

struct FilterQueue {
    ready: std::collections::BTreeMap<usize, Result<Projection, PipelineError>>,
    emitted: usize,
    aborted: bool,
}

/// Loads and filters `count` projections starting at `first`, emitting
/// them in index order through `tx` using `workers` parallel workers.
#[allow(clippy::too_many_arguments)]
fn filter_stage<S>(
    row: usize,
    col: usize,
    first: usize,
    count: usize,
    workers: usize,
    source: &S,
    cos_tab: &CosineTable,
    convolver: &RowConvolver,
    tx: SyncSender<Projection>,
) -> Result<f64, PipelineError>
where
    S: Fn(usize) -> Result<Projection, String> + Sync,
{
    let shared = FilterShared {
        queue: Mutex::new(FilterQueue {
            ready: std::collections::BTreeMap::new(),
            emitted: 0,
            aborted: false,
        }),
        cond: Condvar::new(),
        next: AtomicUsize::new(0),
        busy_nanos: AtomicU64::new(0),
    };
    let lookahead = workers + CHANNEL_DEPTH;

    let result = std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let t = shared.next.fetch_add(1, Ordering::Relaxed);
                if t >= count {
                    return;
                }
                let started = Instant::now();
                let item = source(first + t)
                    .map_err(|message| PipelineError::Source {
                        row,
                        col,
                        index: first + t,
                        message,
                    })
                    .map(|raw| filter_with_convolver(&raw, cos_tab, convolver));
                shared
                    .busy_nanos
                    .fetch_add(started.elapsed().as_nanos() as u64, Ordering::Relaxed);
                let mut q = shared.queue.lock().unwrap();
                // Do not run ahead of the emission cursor by more than the
                // lookahead window; bounds the reorder buffer.
                while !q.aborted && t >= q.emitted + lookahead {
                    q = shared.cond.wait(q).unwrap();
                }
                if q.aborted {
                    return;
                }
                q.ready.insert(t, item);
                shared.cond.notify_all();
            });
        }

        // Emit in order from this thread.
        let emit = (|| -> Result<(), PipelineError> {
            for t in 0..count {
                let item = {
                    let mut q = shared.queue.lock().unwrap();
                    while !q.ready.contains_key(&t) {
                        q = shared.cond.wait(q).unwrap();
                    }
                    let item = q.ready.remove(&t).unwrap();
                    q.emitted = t + 1;
                    shared.cond.notify_all();
                    item
                }?;
                tx.send(item).map_err(|_| PipelineError::Disconnected {
                    row,
                    col,
                    stage: "filtering",
                })?;
            }
            Ok(())
        })();
        if emit.is_err() {
            let mut q = shared.queue.lock().unwrap();
            q.aborted = true;
            shared.cond.notify_all();
        }
        emit
    });

    result?;
    let total = shared.busy_nanos.load(Ordering::Relaxed) as f64 * 1e-9;
    Ok(total / workers as f64)
}

/// Consumes gathered `(view, projection)` pairs in fixed batches and
/// accumulates them into the rank's band slab.
fn bp_stage(
    geom: &CbctGeometry,
    mats: &[ProjectionMatrix],
    band: KBandPair,
    batch: usize,
    rx: Receiver<(usize, Projection)>,
) -> Result<(Volume, u64, f64), PipelineError> {
    let mut slab = Volume::zeros(geom.n_x, geom.n_y, band.slices(), VolumeLayout::KMajor);
    let mut counter = OpCounter::new();
    let mut busy = 0.0f64;
    let mut pending_mats: Vec<ProjectionMatrix> = Vec::with_capacity(batch);
    let mut pending: Vec<Projection> = Vec::with_capacity(batch);

    let flush = |pending_mats: &mut Vec<ProjectionMatrix>,
                 pending: &mut Vec<Projection>,
                 slab: &mut Volume,
                 counter: &mut OpCounter,
                 busy: &mut f64|
     -> Result<(), PipelineError> {
        if pending.is_empty() {
            return Ok(());
        }
        let started = Instant::now();
        accumulate_optimized_band(pending_mats, pending, geom, band, slab, counter)?;
        *busy += started.elapsed().as_secs_f64();
        pending_mats.clear();
        pending.clear();
        Ok(())
    };

    while let Ok((view, proj)) = rx.recv() {
        pending_mats.push(mats[view]);
        pending.push(proj);
        if pending.len() == batch {
            flush(
                &mut pending_mats,
                &mut pending,
                &mut slab,
                &mut counter,
                &mut busy,
            )?;
        }
    }
    flush(
        &mut pending_mats,
        &mut pending,
        &mut slab,
        &mut counter,
        &mut busy,
    )?;
    Ok((slab, counter.inner_products, busy))
}

/// Runs the full grid: filtering, column AllGather, banded back-projection,
/// row reduction, and per-slice store, returning the assembled i-major
/// volume and the measured stage breakdown.
pub fn run_pipeline<S>(
    plan: &GridPlan,
    geom: &CbctGeometry,
    source: &S,
    sink: Option<&dyn SliceSink>,
    opts: &RunOptions,
) -> Result<PipelineRun, PipelineError>
where
    S: Fn(usize) -> Result<Projection, String> + Sync,
{
    geom.validate()?;
    plan.check_geometry(geom)?;
    let (rows, cols) = (plan.rows, plan.cols);
    let ppr = plan.proj_per_rank;
    let col_share = geom.n_p / cols;

    let mats: Vec<ProjectionMatrix> = (0..geom.n_p)
        .map(|s| build_projection_matrix(geom, s))
        .collect::<Result<_, _>>()?;
    let (cos_tab, ramp) = scan_filters(geom);
    let convolver = RowConvolver::new(&ramp, geom.n_u);

    let cores = std::thread::available_parallelism().map_or(1, |n| n.get());
    let workers = opts
        .filter_workers
        .unwrap_or((cores / plan.n_ranks).saturating_sub(1))
        .max(1);

    let gather_groups: Vec<Collective<Projection>> = (0..cols)
        .map(|_| Collective::new(rows, opts.collective_timeout))
        .collect();
    let reduce_groups: Vec<Collective<Volume>> = (0..rows)
        .map(|_| Collective::new(cols, opts.collective_timeout))
        .collect();

    let started = Instant::now();
    let mut results: Vec<Option<Result<RankOutput, PipelineError>>> = Vec::new();
    results.resize_with(plan.n_ranks, || None);
    let results_mx = Mutex::new(results);

    std::thread::scope(|scope| {
        for (row, reduce_group) in reduce_groups.iter().enumerate() {
            for (col, gather_group) in gather_groups.iter().enumerate() {
                let mats = &mats;
                let cos_tab = &cos_tab;
                let convolver = &convolver;
                let band = plan.bands[row];
                let results_mx = &results_mx;
                scope.spawn(move || {
                    let out = run_rank(RankTask {
                        row,
                        col,
                        first: col * col_share + row * ppr,
                        ppr,
                        batch: plan.batch,
                        band,
                        geom,
                        mats,
                        cos_tab,
                        convolver,
                        workers,
                        source,
                        sink,
                        gather_group,
                        reduce_group,
                    });
                    results_mx.lock().unwrap()[row * cols + col] = Some(out);
                });
            }
        }
    });

    let results = results_mx.into_inner().unwrap();
    let mut rank_stats = Vec::with_capacity(plan.n_ranks);
    let mut slabs: Vec<Option<Volume>> = (0..rows).map(|_| None).collect();
    let mut bp_last = started;
    let mut t_reduce = 0.0f64;
    let mut t_store = 0.0f64;
    for slot in results {
        let out = slot.expect("every rank reports")?;
        if out.bp_done > bp_last {
            bp_last = out.bp_done;
        }
        t_reduce = t_reduce.max(out.reduce_secs);
        t_store = t_store.max(out.store_secs);
        if let Some(slab) = out.slab {
            slabs[out.stats.row] = Some(slab);
        }
        rank_stats.push(out.stats);
    }
    let t_compute = (bp_last - started).as_secs_f64();

    // Assemble the full i-major volume from the row slabs.
    let mut volume = Volume::zeros(geom.n_x, geom.n_y, geom.n_z, VolumeLayout::IMajor);
    for (row, slab) in slabs.into_iter().enumerate() {
        let slab = slab.expect("row root produced a slab");
        let band = plan.bands[row];
        for l in 0..band.slices() {
            let k = band.global_k(l, geom.n_z);
            for j in 0..geom.n_y {
                for i in 0..geom.n_x {
                    let idx = volume.index(i, j, k);
                    volume.samples[idx] = slab.at(i, j, l);
                }
            }
        }
    }

    let t_flt = rank_stats.iter().fold(0.0f64, |m, r| m.max(r.t_flt));
    let t_gather = rank_stats.iter().fold(0.0f64, |m, r| m.max(r.t_gather));
    let t_bp = rank_stats.iter().fold(0.0f64, |m, r| m.max(r.t_bp));
    let total_inner_products = rank_stats.iter().map(|r| r.inner_products).sum();
    let stats = PipelineStats {
        t_flt,
        t_gather,
        t_bp,
        t_compute,
        t_reduce,
        t_store,
        delta: overlap_delta(t_flt, t_gather, t_bp, t_compute),
        filter_workers: workers,
        total_inner_products,
        ranks: rank_stats,
    };
    Ok(PipelineRun { volume, stats })
}

struct RankTask<'a, S: ?Sized> {
    row: usize,
    col: usize,
    first: usize,
    ppr: usize,
    batch: usize,
    band: KBandPair,
    geom: &'a CbctGeometry,
    mats: &'a [ProjectionMatrix],
    cos_tab: &'a CosineTable,
    convolver: &'a RowConvolver,
    workers: usize,
    source: &'a S,
    sink: Option<&'a dyn SliceSink>,
    gather_group: &'a Collective<Projection>,
    reduce_group: &'a Collective<Volume>,
}

fn run_rank<S>(ctx: RankTask<'_, S>) -> Result<RankOutput, PipelineError>
where
    S: Fn(usize) -> Result<Projection, String> + Sync,
{
    let (flt_tx, flt_rx) = sync_channel::<Projection>(CHANNEL_DEPTH);
    let (bp_tx, bp_rx) = sync_channel::<(usize, Projection)>(CHANNEL_DEPTH);
    let col_share_base = ctx.first - ctx.row * ctx.ppr;

    let (flt_res, main_res, bp_res) = std::thread::scope(|s| {
        let flt_handle = s.spawn(|| {
            filter_stage(
                ctx.row,
                ctx.col,
                ctx.first,
                ctx.ppr,
                ctx.workers,
                ctx.source,
                ctx.cos_tab,
                ctx.convolver,
                flt_tx,
            )
        });
        let bp_handle = s.spawn(|| bp_stage(ctx.geom, ctx.mats, ctx.band, ctx.batch, bp_rx));

        // Main stage: gather one projection per round across the column and
        // stream the results to back-projection in member order.
        let main_res = (|| -> Result<f64, PipelineError> {
            let mut gather_busy = 0.0f64;
            for t in 0..ctx.ppr {
                let proj = flt_rx.recv().map_err(|_| PipelineError::Disconnected {
                    row: ctx.row,
                    col: ctx.col,
                    stage: "filtering",
                })?;
                let g0 = Instant::now();
                let gathered =
                    all_gather(ctx.gather_group, ctx.row, proj).map_err(|e| match e {
                        PipelineError::CollectiveTimeout { missing, .. } => {
                            PipelineError::CollectiveTimeout {
                                row: ctx.row,
                                col: ctx.col,
                                missing,
                            }
                        }
                        other => other,
                    })?;
                gather_busy += g0.elapsed().as_secs_f64();
                for (member, p) in gathered.into_iter().enumerate() {
                    let view = col_share_base + member * ctx.ppr + t;
                    bp_tx
                        .send((view, p))
                        .map_err(|_| PipelineError::Disconnected {
                            row: ctx.row,
                            col: ctx.col,
                            stage: "back-projection",
                        })?;
                }
            }
            Ok(gather_busy)
        })();
        drop(bp_tx);
        // Unblock the filter stage if main bailed early.
        if main_res.is_err() {
            drop(flt_rx);
        }

        (
            flt_handle.join().expect("filter stage must not panic"),
            main_res,
            bp_handle.join().expect("bp stage must not panic"),
        )
    });

    let t_flt = flt_res?;
    let t_gather = main_res?;
    let (slab, inner_products, t_bp) = bp_res?;
    let bp_done = Instant::now();

    // Post phase: row reduction, then the root scales and stores.
    let r0 = Instant::now();
    let reduced = reduce_sum(ctx.reduce_group, ctx.col, slab).map_err(|e| match e {
        PipelineError::CollectiveTimeout { missing, .. } => PipelineError::CollectiveTimeout {
            row: ctx.row,
            col: ctx.col,
            missing,
        },
        other => other,
    })?;
    let reduce_secs = r0.elapsed().as_secs_f64();

    let mut store_secs = 0.0;
    let final_slab = match reduced {
        Some(mut total) => {
            total.scale(ctx.geom.theta() as f32);
            if let Some(sink) = ctx.sink {
                let s0 = Instant::now();
                let mut plane = vec![0.0f32; ctx.geom.n_x * ctx.geom.n_y];
                for l in 0..ctx.band.slices() {
                    let k = ctx.band.global_k(l, ctx.geom.n_z);
                    for j in 0..ctx.geom.n_y {
                        for i in 0..ctx.geom.n_x {
                            plane[j * ctx.geom.n_x + i] = total.at(i, j, l);
                        }
                    }
                    sink.write_slice(k, &plane)
                        .map_err(|source| PipelineError::Sink { k, source })?;
                }
                store_secs = s0.elapsed().as_secs_f64();
            }
            Some(total)
        }
        None => None,
    };
    Ok(RankOutput {
        stats: RankStats {
            row: ctx.row,
            col: ctx.col,
            t_flt,
            t_gather,
            t_bp,
            inner_products,
        },
        bp_done,
        reduce_secs,
        store_secs,
        slab: final_slab,
    })
}
