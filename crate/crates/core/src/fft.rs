//! Minimal iterative radix-2 FFT over `(re, im)` pairs, used by the
//! filtering stage for power-of-two linear convolution.

use alloc::vec;
use alloc::vec::Vec;

/// In-place complex FFT of power-of-two length. `inverse` applies the
/// conjugate transform and the 1/n scale.
pub fn fft_in_place(re: &mut [f64], im: &mut [f64], inverse: bool) {
    let n = re.len();
    debug_assert_eq!(n, im.len());
    debug_assert!(n.is_power_of_two());
    if n <= 1 {
        return;
    }

    // Bit-reversal permutation.
    let bits = n.trailing_zeros();
    for i in 0..n {
        let j = i.reverse_bits() >> (usize::BITS - bits);
        if j > i {
            re.swap(i, j);
            im.swap(i, j);
        }
    }

    let sign = if inverse { 1.0 } else { -1.0 };
    let mut len = 2;
    while len <= n {
        let ang = sign * 2.0 * core::f64::consts::PI / len as f64;
        let (wr, wi) = (libm::cos(ang), libm::sin(ang));
        for start in (0..n).step_by(len) {
            let mut cr = 1.0;
            let mut ci = 0.0;
            for off in 0..len / 2 {
                let a = start + off;
                let b = a + len / 2;
                let tr = re[b] * cr - im[b] * ci;
                let ti = re[b] * ci + im[b] * cr;
                re[b] = re[a] - tr;
                im[b] = im[a] - ti;
                re[a] += tr;
                im[a] += ti;
                let ncr = cr * wr - ci * wi;
                ci = cr * wi + ci * wr;
                cr = ncr;
            }
        }
        len <<= 1;
    }

    if inverse {
        let scale = 1.0 / n as f64;
        for v in re.iter_mut() {
            *v *= scale;
        }
        for v in im.iter_mut() {
            *v *= scale;
        }
    }
}

/// Forward transform of a real signal, zero-padded to `padded` samples.
pub fn real_fft_padded(signal: &[f32], padded: usize) -> (Vec<f64>, Vec<f64>) {
    debug_assert!(padded.is_power_of_two() && padded >= signal.len());
    let mut re = vec![0.0f64; padded];
    let im = vec![0.0f64; padded];
    for (dst, &s) in re.iter_mut().zip(signal.iter()) {
        *dst = s as f64;
    }
    let mut im = im;
    fft_in_place(&mut re, &mut im, false);
    (re, im)
}
