//! Filtering stage: cosine weighting followed by per-row ramp convolution.
//!
//! Each raw projection is weighted point-wise by the cone-beam cosine table
//! and then every detector row is convolved with a 1-D ramp filter. The
//! convolution runs in the frequency domain: both row and kernel are
//! zero-padded to the next power of two that holds the full linear
//! convolution, multiplied point-wise, and transformed back.
//!
//! Projection data stays in single precision at rest; the transform itself
//! accumulates in f64 so that the FFT route and a direct time-domain
//! convolution agree to well below detector noise.

use alloc::vec;
use alloc::vec::Vec;
use thiserror::Error;

use crate::fft;
use crate::geometry::CbctGeometry;

/// Processing state of a projection's samples.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProjectionKind {
    Raw,
    Filtered,
    /// Filtered and transposed (v runs along rows); the layout the
    /// optimized back-projection kernel consumes.
    TransposedFiltered,
}

/// A 2-D detector image. `width` samples per row, `height` rows,
/// row-major. For `Raw`/`Filtered` the row axis is u (so `width = n_u`);
/// for `TransposedFiltered` the axes are swapped.
#[derive(Debug, Clone, PartialEq)]
pub struct Projection {
    pub width: usize,
    pub height: usize,
    pub kind: ProjectionKind,
    pub samples: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum FilterError {
    #[error("projection is {got:?}, expected {expected:?}")]
    WrongKind {
        expected: ProjectionKind,
        got: ProjectionKind,
    },
    #[error("shape mismatch: projection {proj_w}x{proj_h} vs table {tab_w}x{tab_h}")]
    ShapeMismatch {
        proj_w: usize,
        proj_h: usize,
        tab_w: usize,
        tab_h: usize,
    },
    #[error("sample count {len} does not match {width}x{height}")]
    BadSampleCount {
        len: usize,
        width: usize,
        height: usize,
    },
    #[error("kernel taps must have odd length, got {0}")]
    EvenKernel(usize),
}

impl Projection {
    pub fn new(
        width: usize,
        height: usize,
        kind: ProjectionKind,
        samples: Vec<f32>,
    ) -> Result<Self, FilterError> {
        if samples.len() != width * height {
            return Err(FilterError::BadSampleCount {
                len: samples.len(),
                width,
                height,
            });
        }
        Ok(Self {
            width,
            height,
            kind,
            samples,
        })
    }

    pub fn zeros(width: usize, height: usize, kind: ProjectionKind) -> Self {
        Self {
            width,
            height,
            kind,
            samples: vec![0.0; width * height],
        }
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize) -> f32 {
        self.samples[y * self.width + x]
    }

    pub fn row(&self, y: usize) -> &[f32] {
        &self.samples[y * self.width..(y + 1) * self.width]
    }
}

/// Per-pixel cone-beam obliquity weights `cap_d / sqrt(cap_d^2 + u^2 + v^2)`,
/// with u, v measured in mm from the detector center.
#[derive(Debug, Clone, PartialEq)]
pub struct CosineTable {
    pub n_u: usize,
    pub n_v: usize,
    pub weights: Vec<f32>,
}

pub fn cosine_table(geom: &CbctGeometry) -> CosineTable {
    let (cu, cv) = geom.detector_center();
    let dd = geom.cap_d * geom.cap_d;
    let mut weights = Vec::with_capacity(geom.n_u * geom.n_v);
    for v in 0..geom.n_v {
        let vh = (v as f64 - cv) * geom.d_v;
        for u in 0..geom.n_u {
            let uh = (u as f64 - cu) * geom.d_u;
            weights.push((geom.cap_d / libm::sqrt(dd + uh * uh + vh * vh)) as f32);
        }
    }
    CosineTable {
        n_u: geom.n_u,
        n_v: geom.n_v,
        weights,
    }
}

/// Spatial ramp filter taps, centered at `taps[half_width]`.
#[derive(Debug, Clone, PartialEq)]
pub struct RampKernel {
    pub taps: Vec<f32>,
    /// Tap spacing, i.e. the detector pitch the kernel was built for (mm).
    pub d_u: f64,
}

impl RampKernel {
    /// Wraps an arbitrary odd-length centered tap array.
    pub fn from_taps(taps: Vec<f32>, d_u: f64) -> Result<Self, FilterError> {
        if taps.len().is_multiple_of(2) {
            return Err(FilterError::EvenKernel(taps.len()));
        }
        Ok(Self { taps, d_u })
    }

    pub fn half_width(&self) -> usize {
        self.taps.len() / 2
    }
}

/// The classical band-limited |f| (Ram-Lak) kernel in the spatial domain:
///
/// ```text
/// h[0]      = 1 / (4 du^2)
/// h[n odd]  = -1 / (pi^2 n^2 du^2)
/// h[n even] = 0          (n != 0)
/// ```
///
/// `half_width` should be at least `n_u - 1` so a full detector row lies
/// inside the kernel support. No apodization window is applied; swap in a
/// windowed tap array via [`RampKernel::from_taps`] if ringing matters more
/// than resolution.
pub fn ramp_kernel(geom: &CbctGeometry, half_width: usize) -> RampKernel {
    debug_assert!(half_width + 1 >= geom.n_u, "kernel should span the row");
    let inv_du2 = 1.0 / (geom.d_u * geom.d_u);
    let mut taps = vec![0.0f32; 2 * half_width + 1];
    taps[half_width] = (0.25 * inv_du2) as f32;
    let mut n = 1usize;
    while n <= half_width {
        let h = -inv_du2 / (core::f64::consts::PI * core::f64::consts::PI * (n * n) as f64);
        taps[half_width + n] = h as f32;
        taps[half_width - n] = h as f32;
        n += 2;
    }
    RampKernel {
        taps,
        d_u: geom.d_u,
    }
}

/// Precomputed frequency response of a kernel for rows of a fixed length,
/// so a whole projection (or stack) reuses one kernel transform.
pub struct RowConvolver {
    row_len: usize,
    half_width: usize,
    padded: usize,
    kernel_re: Vec<f64>,
    kernel_im: Vec<f64>,
}

impl RowConvolver {
    pub fn new(kernel: &RampKernel, row_len: usize) -> Self {
        let padded = (row_len + kernel.taps.len() - 1).next_power_of_two();
        let (kernel_re, kernel_im) = fft::real_fft_padded(&kernel.taps, padded);
        Self {
            row_len,
            half_width: kernel.half_width(),
            padded,
            kernel_re,
            kernel_im,
        }
    }

    /// Linear convolution of one row with the kernel, center-aligned and
    /// cropped back to the row length.
    pub fn convolve(&self, row: &[f32]) -> Vec<f32> {
        debug_assert_eq!(row.len(), self.row_len);
        let (mut re, mut im) = fft::real_fft_padded(row, self.padded);
        for idx in 0..self.padded {
            let (ar, ai) = (re[idx], im[idx]);
            let (br, bi) = (self.kernel_re[idx], self.kernel_im[idx]);
            re[idx] = ar * br - ai * bi;
            im[idx] = ar * bi + ai * br;
        }
        fft::fft_in_place(&mut re, &mut im, true);
        // Full linear convolution sits in [0, row_len + taps - 1); the
        // center-aligned window starts at half_width.
        re[self.half_width..self.half_width + self.row_len]
            .iter()
            .map(|&v| v as f32)
            .collect()
    }

    /// Convolves in place over every `width`-sized row of a sample buffer.
    pub fn convolve_rows(&self, samples: &mut [f32], width: usize) {
        debug_assert_eq!(width, self.row_len);
        for row in samples.chunks_mut(width) {
            let out = self.convolve(row);
            row.copy_from_slice(&out);
        }
    }
}

/// One-shot FFT convolution of a single row. See [`RowConvolver`] for the
/// amortized path.
pub fn fft_convolve_row(row: &[f32], kernel: &RampKernel) -> Vec<f32> {
    RowConvolver::new(kernel, row.len()).convolve(row)
}

/// Applies the full per-projection filter: point-wise cosine weighting,
/// then ramp convolution of every row. Returns a `Filtered` projection of
/// the same dimensions.
pub fn filter_projection(
    e: &Projection,
    cos_tab: &CosineTable,
    ramp: &RampKernel,
) -> Result<Projection, FilterError> {
    if e.kind != ProjectionKind::Raw {
        return Err(FilterError::WrongKind {
            expected: ProjectionKind::Raw,
            got: e.kind,
        });
    }
    if e.width != cos_tab.n_u || e.height != cos_tab.n_v {
        return Err(FilterError::ShapeMismatch {
            proj_w: e.width,
            proj_h: e.height,
            tab_w: cos_tab.n_u,
            tab_h: cos_tab.n_v,
        });
    }
    let convolver = RowConvolver::new(ramp, e.width);
    Ok(filter_with_convolver(e, cos_tab, &convolver))
}

/// Same as [`filter_projection`] but with a shared, pre-built convolver;
/// shape checks are the caller's responsibility.
pub fn filter_with_convolver(
    e: &Projection,
    cos_tab: &CosineTable,
    convolver: &RowConvolver,
) -> Projection {
    let mut samples: Vec<f32> = e
        .samples
        .iter()
        .zip(cos_tab.weights.iter())
        .map(|(&s, &w)| s * w)
        .collect();
    convolver.convolve_rows(&mut samples, e.width);
    Projection {
        width: e.width,
        height: e.height,
        kind: ProjectionKind::Filtered,
        samples,
    }
}
