//! Radix-2 fast Fourier transform used by the MFCC pipeline.
//!
//! Only power-of-two sizes are needed (frames are zero-padded from 400 to
//! 512 samples), so a plain iterative Cooley-Tukey transform is enough and
//! keeps the dependency surface flat.

/// In-place FFT of a complex signal split into real and imaginary parts.
/// Length must be a power of two.
pub fn fft_in_place(re: &mut [f64], im: &mut [f64]) {
    let n = re.len();
    assert_eq!(n, im.len(), "real and imaginary parts must match");
    assert!(n.is_power_of_two(), "FFT length must be a power of two");
    if n < 2 {
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

    // Butterflies, doubling the transform length each stage.
    let mut len = 2;
    while len <= n {
        let angle = -2.0 * std::f64::consts::PI / len as f64;
        let (w_re, w_im) = (angle.cos(), angle.sin());
        for start in (0..n).step_by(len) {
            let mut cur_re = 1.0;
            let mut cur_im = 0.0;
            for k in 0..len / 2 {
                let a = start + k;
                let b = a + len / 2;
                let t_re = cur_re * re[b] - cur_im * im[b];
                let t_im = cur_re * im[b] + cur_im * re[b];
                re[b] = re[a] - t_re;
                im[b] = im[a] - t_im;
                re[a] += t_re;
                im[a] += t_im;
                let next_re = cur_re * w_re - cur_im * w_im;
                cur_im = cur_re * w_im + cur_im * w_re;
                cur_re = next_re;
            }
        }
        len *= 2;
    }
}

/// Magnitude spectrum of a real signal, zero-padded to `n_fft` points.
/// Returns the `n_fft/2 + 1` nonredundant bins.
pub fn magnitude_spectrum(signal: &[f64], n_fft: usize) -> Vec<f64> {
    assert!(n_fft.is_power_of_two(), "FFT length must be a power of two");
    assert!(signal.len() <= n_fft, "signal longer than the FFT size");
    let mut re = vec![0.0; n_fft];
    let mut im = vec![0.0; n_fft];
    re[..signal.len()].copy_from_slice(signal);
    fft_in_place(&mut re, &mut im);
    (0..=n_fft / 2)
        .map(|k| (re[k] * re[k] + im[k] * im[k]).sqrt())
        .collect()
}
