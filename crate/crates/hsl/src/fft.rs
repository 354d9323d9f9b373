//! 2-D discrete Fourier transforms over row-major `f64` planes.
//!
//! Power-of-two lengths run an iterative radix-2 Cooley–Tukey; other
//! lengths fall back to a table-driven direct DFT. Everything is plain
//! scalar `f64` arithmetic, so transforms are bit-reproducible across
//! platforms and thread counts. The forward transform is unnormalized;
//! the inverse applies the 1/(h·w) factor.

use num_complex::Complex64;

fn bit_reverse_permute(data: &mut [Complex64]) {
    let n = data.len();
    let mut j = 0usize;
    for i in 1..n {
        let mut bit = n >> 1;
        while j & bit != 0 {
            j ^= bit;
            bit >>= 1;
        }
        j |= bit;
        if i < j {
            data.swap(i, j);
        }
    }
}

fn fft_pow2(data: &mut [Complex64], inverse: bool) {
    let n = data.len();
    bit_reverse_permute(data);
    let sign = if inverse { 1.0 } else { -1.0 };
    let mut len = 2;
    while len <= n {
        let ang = sign * std::f64::consts::TAU / len as f64;
        let wlen = Complex64::new(ang.cos(), ang.sin());
        for block in data.chunks_exact_mut(len) {
            let mut w = Complex64::new(1.0, 0.0);
            let (lo, hi) = block.split_at_mut(len / 2);
            for (a, b) in lo.iter_mut().zip(hi.iter_mut()) {
                let t = *b * w;
                *b = *a - t;
                *a += t;
                w *= wlen;
            }
        }
        len <<= 1;
    }
}

fn dft_naive(data: &mut [Complex64], inverse: bool) {
    let n = data.len();
    let sign = if inverse { 1.0 } else { -1.0 };
    let mut table = Vec::with_capacity(n);
    for j in 0..n {
        let ang = sign * std::f64::consts::TAU * j as f64 / n as f64;
        table.push(Complex64::new(ang.cos(), ang.sin()));
    }
    let src = data.to_vec();
    for (k, out) in data.iter_mut().enumerate() {
        let mut acc = Complex64::new(0.0, 0.0);
        for (j, v) in src.iter().enumerate() {
            acc += v * table[(j * k) % n];
        }
        *out = acc;
    }
}

/// In-place 1-D transform, unnormalized in both directions.
pub fn fft_1d(data: &mut [Complex64], inverse: bool) {
    let n = data.len();
    if n <= 1 {
        return;
    }
    if n.is_power_of_two() {
        fft_pow2(data, inverse);
    } else {
        dft_naive(data, inverse);
    }
}

fn transform_2d(buf: &mut [Complex64], height: usize, width: usize, inverse: bool) {
    for row in buf.chunks_exact_mut(width) {
        fft_1d(row, inverse);
    }
    let mut column = vec![Complex64::new(0.0, 0.0); height];
    for x in 0..width {
        for y in 0..height {
            column[y] = buf[y * width + x];
        }
        fft_1d(&mut column, inverse);
        for y in 0..height {
            buf[y * width + x] = column[y];
        }
    }
}

/// Forward 2-D DFT of a real plane.
pub fn fft2_plane(plane: &[f64], height: usize, width: usize) -> Vec<Complex64> {
    debug_assert_eq!(plane.len(), height * width);
    let mut buf: Vec<Complex64> = plane.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    transform_2d(&mut buf, height, width, false);
    buf
}

/// Inverse 2-D DFT; returns the real part scaled by 1/(h·w).
pub fn ifft2_plane(freq: &[Complex64], height: usize, width: usize) -> Vec<f64> {
    debug_assert_eq!(freq.len(), height * width);
    let mut buf = freq.to_vec();
    transform_2d(&mut buf, height, width, true);
    let norm = 1.0 / (height * width) as f64;
    buf.into_iter().map(|z| z.re * norm).collect()
}
