//! Discrete Fourier transforms and boundary mirroring for the mode solver.
//!
//! Transforms are unnormalized forward / `1/N` inverse, so that
//! `idft(dft(x)) == x` and `sum |x|^2 == sum |X|^2 / N`.

use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;

use crate::error::{Error, Result};

pub use rustfft::num_complex::Complex64 as Complex;

/// Forward DFT of a complex sequence of any length.
pub fn dft(values: &[Complex64]) -> Vec<Complex64> {
    let mut buf = values.to_vec();
    if !buf.is_empty() {
        FftPlanner::new()
            .plan_fft_forward(buf.len())
            .process(&mut buf);
    }
    buf
}

/// Forward DFT of a real sequence.
pub fn dft_real(values: &[f64]) -> Vec<Complex64> {
    let buf: Vec<Complex64> = values.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    dft(&buf)
}

/// Inverse DFT including the `1/N` factor.
pub fn idft(spectrum: &[Complex64]) -> Vec<Complex64> {
    let mut buf = spectrum.to_vec();
    if buf.is_empty() {
        return buf;
    }
    FftPlanner::new()
        .plan_fft_inverse(buf.len())
        .process(&mut buf);
    let scale = 1.0 / buf.len() as f64;
    for v in &mut buf {
        *v *= scale;
    }
    buf
}

/// Reflects half of the signal onto each side, doubling its length.
///
/// `[1,2,3,4]` becomes `[2,1, 1,2,3,4, 4,3]`. For odd lengths the left
/// reflection takes `n/2` samples and the right one the remaining
/// `n - n/2`. The original occupies `[n/2, n/2 + n)`.
pub fn mirror_extend(signal: &[f64]) -> Result<Vec<f64>> {
    let n = signal.len();
    if n < 2 {
        return Err(Error::TooShort(format!(
            "mirroring needs at least 2 samples, got {n}"
        )));
    }
    let half = n / 2;
    let mut out = Vec::with_capacity(2 * n);
    out.extend(signal[..half].iter().rev());
    out.extend_from_slice(signal);
    out.extend(signal[half..].iter().rev());
    Ok(out)
}

/// Offset of the original signal inside [`mirror_extend`]'s output.
pub fn mirror_offset(n: usize) -> usize {
    n / 2
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    /// Textbook O(N^2) transform.
    fn naive_dft(x: &[Complex64], sign: f64) -> Vec<Complex64> {
        let n = x.len();
        (0..n)
            .map(|k| {
                x.iter()
                    .enumerate()
                    .map(|(t, &v)| {
                        let phase = sign * 2.0 * PI * ((k * t) % n) as f64 / n as f64;
                        v * Complex64::new(phase.cos(), phase.sin())
                    })
                    .sum()
            })
            .collect()
    }

    fn random_signal(n: usize, seed: u64) -> Vec<Complex64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| Complex64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
            .collect()
    }

    fn rel_err(a: &[Complex64], b: &[Complex64]) -> f64 {
        let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y).norm_sqr()).sum();
        let den: f64 = b.iter().map(|y| y.norm_sqr()).sum();
        (num / den).sqrt()
    }

    #[test]
    fn constant_and_impulse() {
        let x = dft_real(&[1.0, 1.0, 1.0, 1.0]);
        let expect = [4.0, 0.0, 0.0, 0.0];
        for (v, e) in x.iter().zip(expect) {
            assert!((v - Complex64::new(e, 0.0)).norm() < 1e-12);
        }
        let x = dft_real(&[1.0, 0.0, 0.0, 0.0, 0.0]);
        assert!(x
            .iter()
            .all(|v| (v - Complex64::new(1.0, 0.0)).norm() < 1e-12));
    }

    #[test]
    fn matches_naive_oracle() {
        for (i, n) in [1usize, 16, 100, 257, 1000].into_iter().enumerate() {
            let x = random_signal(n, i as u64);
            let fast = dft(&x);
            assert!(rel_err(&fast, &naive_dft(&x, -1.0)) < 1e-9, "n={n}");
            let back = idft(&fast);
            assert!(rel_err(&back, &x) < 1e-9, "round trip n={n}");
            let time: f64 = x.iter().map(|v| v.norm_sqr()).sum();
            let freq: f64 = fast.iter().map(|v| v.norm_sqr()).sum::<f64>() / n as f64;
            assert!(((time - freq) / time).abs() < 1e-9, "parseval n={n}");
        }
    }

    #[test]
    fn mirror_examples() {
        assert_eq!(
            mirror_extend(&[1.0, 2.0, 3.0, 4.0]).unwrap(),
            vec![2.0, 1.0, 1.0, 2.0, 3.0, 4.0, 4.0, 3.0]
        );
        let sym = [1.0, 2.0, 3.0, 3.0, 2.0, 1.0];
        let m = mirror_extend(&sym).unwrap();
        let rev: Vec<f64> = m.iter().rev().copied().collect();
        assert_eq!(m, rev);
        assert!(mirror_extend(&[1.0]).is_err());
    }

    #[test]
    fn mirror_center_is_signal() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for n in 2..60 {
            let x: Vec<f64> = (0..n).map(|_| rng.random()).collect();
            let m = mirror_extend(&x).unwrap();
            assert_eq!(m.len(), 2 * n);
            let off = mirror_offset(n);
            assert_eq!(&m[off..off + n], &x[..]);
        }
    }
}
