//! Toeplitz-matrix privacy amplification.
//!
//! The matrix has T[i][j] = seed[i − j + n − 1], so y[i] = ⊕_j seed[i + n − 1 − j]·x[j],
//! which is entry i + n − 1 of the linear convolution seed * x.
//!
//! Golden vector: n = 4, m = 2, seed = [1,0,1,1,0], x = [1,0,1,1] gives
//! rows [1,1,0,1] and [0,1,1,0] and y = [0,1].

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ToeplitzError {
    #[error("seed has {got} bits, expected input_len + output_len - 1 = {expected}")]
    SeedLengthMismatch { expected: usize, got: usize },
    #[error("output length {output} exceeds input length {input}")]
    OutputTooLong { output: usize, input: usize },
}

fn check(n: usize, m: usize, seed: &[u8]) -> Result<(), ToeplitzError> {
    if m > n {
        return Err(ToeplitzError::OutputTooLong { output: m, input: n });
    }
    if m == 0 {
        return Ok(());
    }
    let expected = n + m - 1;
    if seed.len() != expected {
        return Err(ToeplitzError::SeedLengthMismatch {
            expected,
            got: seed.len(),
        });
    }
    Ok(())
}

/// Reference implementation: explicit matrix rows, O(n·m).
pub fn extract_naive(x: &[u8], seed: &[u8], m: usize) -> Result<Vec<u8>, ToeplitzError> {
    let n = x.len();
    check(n, m, seed)?;
    Ok((0..m)
        .map(|i| {
            (0..n).fold(0u8, |acc, j| acc ^ (seed[i + n - 1 - j] & x[j] & 1))
        })
        .collect())
}

/// Tile length for the block convolution. Partial sums never exceed this,
/// which keeps the floating-point rounding exact.
const TILE: usize = 1 << 20;

/// Block-convolution evaluation, bit-identical to [`extract_naive`].
pub fn toeplitz_extract(x: &[u8], seed: &[u8], m: usize) -> Result<Vec<u8>, ToeplitzError> {
    let tile = TILE.min(x.len().max(m).next_power_of_two());
    toeplitz_extract_tiled(x, seed, m, tile)
}

/// [`toeplitz_extract`] with an explicit tile length.
pub fn toeplitz_extract_tiled(x: &[u8], seed: &[u8], m: usize, tile: usize) -> Result<Vec<u8>, ToeplitzError> {
    assert!(tile > 0);
    let n = x.len();
    check(n, m, seed)?;
    if m == 0 {
        return Ok(Vec::new());
    }
    let size = (2 * tile).next_power_of_two();
    let mut planner = FftPlanner::<f64>::new();
    let fwd = planner.plan_fft_forward(size);
    let inv = planner.plan_fft_inverse(size);

    // spectra of the input tiles
    let x_tiles: Vec<(usize, Vec<Complex<f64>>)> = (0..n)
        .step_by(tile)
        .map(|j0| {
            let len = tile.min(n - j0);
            let mut buf = vec![Complex::new(0.0, 0.0); size];
            for (k, v) in buf.iter_mut().take(len).enumerate() {
                v.re = (x[j0 + k] & 1) as f64;
            }
            fwd.process(&mut buf);
            (j0, buf)
        })
        .collect();

    let mut y = vec![0u8; m];
    let mut buf = vec![Complex::new(0.0, 0.0); size];
    for i0 in (0..m).step_by(tile) {
        let rows = tile.min(m - i0);
        for (j0, xs) in &x_tiles {
            let cols = tile.min(n - j0);
            // y[i0 + r] gets Σ_k seed[i0 + r + n - 1 - j0 - k]·x[j0 + k];
            // the window w[t] = seed[base + t] with base = i0 + n - j0 - cols
            // turns this into entry r + cols - 1 of w * x_tile.
            let base = i0 + n - j0 - cols;
            let wlen = rows + cols - 1;
            for v in buf.iter_mut() {
                *v = Complex::new(0.0, 0.0);
            }
            for t in 0..wlen {
                buf[t].re = (seed[base + t] & 1) as f64;
            }
            fwd.process(&mut buf);
            for (a, b) in buf.iter_mut().zip(xs) {
                *a *= b;
            }
            inv.process(&mut buf);
            let scale = 1.0 / size as f64;
            for r in 0..rows {
                let v = (buf[r + cols - 1].re * scale).round() as u64;
                y[i0 + r] ^= (v & 1) as u8;
            }
        }
    }
    Ok(y)
}
