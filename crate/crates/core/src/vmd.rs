//! Variational mode decomposition.
//!
//! Splits a real signal into `K` band-limited modes, each concentrated
//! around a center frequency, by alternating minimization of the augmented
//! Lagrangian in the frequency domain:
//!
//! * mode update: a Wiener filter centered on the mode's current frequency
//!   applied to the residual left by the other modes plus half the
//!   multiplier,
//! * center update: the power-weighted mean frequency of the new mode,
//! * multiplier update: dual ascent on the reconstruction residual.
//!
//! The signal is mirror-extended to twice its length before transforming,
//! and all updates act on the non-negative half of the spectrum (the
//! analytic signal). Modes are recovered by conjugate-symmetric completion
//! and an inverse transform, then cropped back to the original span.
//!
//! Frequencies are in cycles per sample, so center frequencies live in
//! `[0, 0.5]`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::spectral::{dft_real, idft, mirror_extend, mirror_offset, Complex};

/// Initial placement of the center frequencies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OmegaInit {
    /// `omega_k = 0.5 k / K`, spanning `[0, 0.5 (K-1)/K]`.
    Uniform,
    Zero,
    /// Log-uniform draws between `1/len` and `0.5`, sorted.
    Random(u64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VmdConfig {
    /// Number of modes `K`.
    pub modes: usize,
    /// Bandwidth penalty.
    pub alpha: f64,
    /// Dual ascent step. Zero disables the multiplier (noise slack).
    pub tau: f64,
    /// Threshold on the summed relative change of the mode spectra.
    pub tol: f64,
    pub max_iter: usize,
    pub omega_init: OmegaInit,
    /// Reorder modes by ascending center frequency after solving.
    pub sort_modes: bool,
}

impl Default for VmdConfig {
    fn default() -> Self {
        Self {
            modes: 10,
            alpha: 2000.0,
            tau: 0.0,
            tol: 1e-7,
            max_iter: 500,
            omega_init: OmegaInit::Uniform,
            sort_modes: true,
        }
    }
}

impl VmdConfig {
    pub fn with_modes(modes: usize) -> Self {
        Self {
            modes,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidArgument(msg));
        if self.modes == 0 {
            return bad("vmd.modes must be >= 1".into());
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return bad(format!("vmd.alpha must be > 0, got {}", self.alpha));
        }
        if !(self.tau >= 0.0 && self.tau.is_finite()) {
            return bad(format!("vmd.tau must be >= 0, got {}", self.tau));
        }
        if !(self.tol > 0.0) {
            return bad(format!("vmd.tol must be > 0, got {}", self.tol));
        }
        if self.max_iter == 0 {
            return bad("vmd.max_iter must be >= 1".into());
        }
        Ok(())
    }

    fn initial_omegas(&self, len: usize) -> Vec<f64> {
        let k = self.modes;
        match self.omega_init {
            OmegaInit::Uniform => (0..k).map(|i| 0.5 * i as f64 / k as f64).collect(),
            OmegaInit::Zero => vec![0.0; k],
            OmegaInit::Random(seed) => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let lo = (1.0 / len as f64).ln();
                let hi = 0.5f64.ln();
                let mut w: Vec<f64> = (0..k)
                    .map(|_| (lo + (hi - lo) * rng.random::<f64>()).exp())
                    .collect();
                w.sort_by(f64::total_cmp);
                w
            }
        }
    }
}

/// Output of [`decompose`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VmdResult {
    /// `modes[k][t]`, each the length of the input.
    pub modes: Vec<Vec<f64>>,
    /// Center frequency of each mode, cycles per sample.
    pub omegas: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    /// Convergence residual at the last iteration.
    pub final_residual: f64,
    /// Residual after every iteration.
    pub residual_history: Vec<f64>,
    /// Center frequencies after every iteration, in solver order.
    pub omega_history: Vec<Vec<f64>>,
}

impl VmdResult {
    pub fn n_modes(&self) -> usize {
        self.modes.len()
    }

    /// Pointwise sum of all modes.
    pub fn reconstruction(&self) -> Vec<f64> {
        let n = self.modes.first().map_or(0, Vec::len);
        let mut out = vec![0.0; n];
        for mode in &self.modes {
            for (o, v) in out.iter_mut().zip(mode) {
                *o += v;
            }
        }
        out
    }

    /// Summary without the per-iteration traces or the mode samples.
    pub fn metadata(&self, config: &VmdConfig) -> VmdMetadata {
        VmdMetadata {
            config: config.clone(),
            omegas: self.omegas.clone(),
            iterations: self.iterations,
            converged: self.converged,
            final_residual: self.final_residual,
        }
    }
}

/// Sidecar record written next to an exported decomposition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VmdMetadata {
    pub config: VmdConfig,
    pub omegas: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub final_residual: f64,
}

/// Spectrum of a mirrored signal together with its frequency axis.
///
/// Bin `k` sits at `k / len` cycles per sample; bins at or above `len/2`
/// are the negative frequencies and are zeroed by [`one_sided`](Self::one_sided).
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralBuffer {
    pub spectrum: Vec<Complex>,
    pub freqs: Vec<f64>,
}

impl SpectralBuffer {
    pub fn from_signal(signal: &[f64]) -> Self {
        let spectrum = dft_real(signal);
        let freqs = frequency_axis(spectrum.len());
        Self { spectrum, freqs }
    }

    pub fn len(&self) -> usize {
        self.spectrum.len()
    }

    pub fn is_empty(&self) -> bool {
        self.spectrum.is_empty()
    }

    /// Number of non-negative frequency bins kept by the solver.
    pub fn half_len(&self) -> usize {
        self.len() / 2
    }

    /// Zeroes every bin with frequency `>= 0.5`.
    pub fn one_sided(mut self) -> Self {
        let half = self.half_len();
        for v in &mut self.spectrum[half..] {
            *v = Complex::new(0.0, 0.0);
        }
        self
    }
}

/// `[0, 1/len, ..., (len-1)/len]`.
pub fn frequency_axis(len: usize) -> Vec<f64> {
    (0..len).map(|k| k as f64 / len as f64).collect()
}

/// Wiener-filter mode update:
/// `(f - others + lambda/2) / (1 + 2 alpha (v - omega)^2)` per bin.
pub fn update_mode_spectrum(
    f_hat: &[Complex],
    lambda_hat: &[Complex],
    others_hat: &[Complex],
    omega: f64,
    alpha: f64,
    freqs: &[f64],
) -> Vec<Complex> {
    let mut out = vec![Complex::new(0.0, 0.0); f_hat.len()];
    update_mode_spectrum_into(&mut out, f_hat, lambda_hat, others_hat, omega, alpha, freqs);
    out
}

fn update_mode_spectrum_into(
    out: &mut [Complex],
    f_hat: &[Complex],
    lambda_hat: &[Complex],
    others_hat: &[Complex],
    omega: f64,
    alpha: f64,
    freqs: &[f64],
) {
    for i in 0..out.len() {
        let dv = freqs[i] - omega;
        let num = f_hat[i] - others_hat[i] + lambda_hat[i] * 0.5;
        out[i] = num / (1.0 + 2.0 * alpha * dv * dv);
    }
}

/// Power-weighted mean frequency over bins in `[0, 0.5]`. `None` when the
/// spectrum carries no power there.
pub fn update_omega(spectrum: &[Complex], freqs: &[f64]) -> Option<f64> {
    let (mut num, mut den) = (0.0, 0.0);
    for (s, &v) in spectrum.iter().zip(freqs) {
        if (0.0..=0.5).contains(&v) {
            let p = s.norm_sqr();
            num += v * p;
            den += p;
        }
    }
    if den > 0.0 {
        Some((num / den).clamp(0.0, 0.5))
    } else {
        None
    }
}

/// Dual ascent: `lambda + tau (f - sum_modes)`.
pub fn update_lambda(
    lambda_hat: &[Complex],
    f_hat: &[Complex],
    modes_sum_hat: &[Complex],
    tau: f64,
) -> Vec<Complex> {
    lambda_hat
        .iter()
        .zip(f_hat)
        .zip(modes_sum_hat)
        .map(|((&l, &f), &s)| l + (f - s) * tau)
        .collect()
}

/// `sum_m |next_m - prev_m|^2 / |prev_m|^2`, skipping modes whose previous
/// norm is zero. Convergence additionally needs at least one counted mode,
/// so the first iteration from an all-zero start never stops the solver.
pub fn converged(prev: &[Vec<Complex>], next: &[Vec<Complex>], tol: f64) -> (bool, f64) {
    let mut residual = 0.0;
    let mut counted = 0;
    for (p, q) in prev.iter().zip(next) {
        let norm: f64 = p.iter().map(|v| v.norm_sqr()).sum();
        if norm > 0.0 {
            let diff: f64 = p.iter().zip(q).map(|(a, b)| (b - a).norm_sqr()).sum();
            residual += diff / norm;
            counted += 1;
        }
    }
    (counted > 0 && residual < tol, residual)
}

/// Decomposes `signal` into `config.modes` modes.
///
/// Running out of iterations is not an error; check
/// [`VmdResult::converged`].
pub fn decompose(signal: &[f64], config: &VmdConfig) -> Result<VmdResult> {
    config.validate()?;
    let n = signal.len();
    if let Some(index) = signal.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite { index });
    }
    if n < 2 || n < 2 * config.modes {
        return Err(Error::TooShort(format!(
            "{n} samples cannot resolve {} modes (need >= {})",
            config.modes,
            (2 * config.modes).max(2)
        )));
    }

    let mirrored = mirror_extend(signal)?;
    let buffer = SpectralBuffer::from_signal(&mirrored).one_sided();
    let len = buffer.len();
    let half = buffer.half_len();
    let f_hat = &buffer.spectrum[..half];
    let freqs = &buffer.freqs[..half];
    let k_modes = config.modes;

    let zero = Complex::new(0.0, 0.0);
    let mut omegas = config.initial_omegas(len);
    let mut modes_hat = vec![vec![zero; half]; k_modes];
    let mut prev_hat = modes_hat.clone();
    let mut lambda_hat = vec![zero; half];
    let mut total = vec![zero; half];
    let mut others = vec![zero; half];

    let mut residual_history = Vec::new();
    let mut omega_history = Vec::new();
    let mut is_converged = false;
    let mut residual = 0.0;
    let mut iterations = 0;

    while iterations < config.max_iter {
        iterations += 1;
        for (p, m) in prev_hat.iter_mut().zip(&modes_hat) {
            p.copy_from_slice(m);
        }
        total.fill(zero);
        for m in &modes_hat {
            for (t, v) in total.iter_mut().zip(m) {
                *t += v;
            }
        }
        // Gauss-Seidel sweep: mode k sees the already-updated modes < k.
        for k in 0..k_modes {
            for ((o, t), m) in others.iter_mut().zip(&total).zip(&modes_hat[k]) {
                *o = t - m;
            }
            update_mode_spectrum_into(
                &mut modes_hat[k],
                f_hat,
                &lambda_hat,
                &others,
                omegas[k],
                config.alpha,
                freqs,
            );
            for ((t, o), m) in total.iter_mut().zip(&others).zip(&modes_hat[k]) {
                *t = o + m;
            }
            if let Some(w) = update_omega(&modes_hat[k], freqs) {
                omegas[k] = w;
            }
        }
        if config.tau > 0.0 {
            lambda_hat = update_lambda(&lambda_hat, f_hat, &total, config.tau);
        }

        let (done, r) = converged(&prev_hat, &modes_hat, config.tol);
        if !r.is_finite() {
            return Err(Error::Diverged(format!(
                "mode decomposition residual became {r} at iteration {iterations}"
            )));
        }
        residual = r;
        residual_history.push(r);
        omega_history.push(omegas.clone());
        if done {
            is_converged = true;
            break;
        }
    }

    let offset = mirror_offset(n);
    let mut modes: Vec<Vec<f64>> = modes_hat
        .iter()
        .map(|half_spec| {
            let mut full = vec![zero; len];
            full[..half].copy_from_slice(half_spec);
            for k in 1..half {
                full[len - k] = half_spec[k].conj();
            }
            idft(&full)[offset..offset + n]
                .iter()
                .map(|c| c.re)
                .collect()
        })
        .collect();

    if config.sort_modes {
        let mut order: Vec<usize> = (0..k_modes).collect();
        order.sort_by(|&a, &b| omegas[a].total_cmp(&omegas[b]));
        omegas = order.iter().map(|&i| omegas[i]).collect();
        let mut taken: Vec<Option<Vec<f64>>> = modes.into_iter().map(Some).collect();
        modes = order
            .iter()
            .map(|&i| taken[i].take().expect("permutation"))
            .collect();
    }

    Ok(VmdResult {
        modes,
        omegas,
        iterations,
        converged: is_converged,
        final_residual: residual,
        residual_history,
        omega_history,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthetic::{tones, Tone};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn c(re: f64, im: f64) -> Complex {
        Complex::new(re, im)
    }

    fn norm(x: &[f64]) -> f64 {
        x.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    fn rel_l2(a: &[f64], b: &[f64]) -> f64 {
        let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
        norm(&d) / norm(b)
    }

    #[test]
    fn mode_update_limits() {
        let freqs = [0.0, 0.1, 0.2];
        let f = [c(1.0, 0.0), c(2.0, 1.0), c(-1.0, 3.0)];
        let zeros = [c(0.0, 0.0); 3];
        let out = update_mode_spectrum(&f, &zeros, &zeros, 0.1, 1e12, &freqs);
        assert_eq!(out[1], f[1]);
        assert!(out[0].norm() < 1e-9 && out[2].norm() < 1e-9);

        // Numerator includes half the multiplier and subtracts the other modes.
        let lambda = [c(2.0, 2.0); 3];
        let others = [c(0.5, 0.0); 3];
        let out = update_mode_spectrum(&f, &lambda, &others, 0.1, 50.0, &freqs);
        assert_eq!(out[1], f[1] - c(0.5, 0.0) + c(1.0, 1.0));
        for i in 0..3 {
            let num = f[i] - others[i] + lambda[i] * 0.5;
            assert!(out[i].norm() <= num.norm());
        }
    }

    #[test]
    fn mode_update_single_tone_gain() {
        // K = 1 with a tone at bin 40 of a 400-bin grid and omega = 0.12.
        let len = 400;
        let freqs = frequency_axis(len);
        let mut f = vec![c(0.0, 0.0); len];
        f[40] = c(3.0, -4.0);
        let zeros = vec![c(0.0, 0.0); len];
        let alpha = 500.0;
        let out = update_mode_spectrum(&f, &zeros, &zeros, 0.12, alpha, &freqs);
        // Hand evaluation: dv = 0.1 - 0.12 = -0.02, gain = 1 / (1 + 2*500*0.0004) = 1/1.4.
        let gain = 1.0 / 1.4;
        assert!((out[40] - f[40] * gain).norm() < 1e-12);
        assert!(out
            .iter()
            .enumerate()
            .all(|(i, v)| i == 40 || v.norm() == 0.0));
    }

    #[test]
    fn omega_examples() {
        let freqs = frequency_axis(10);
        let mut s = vec![c(0.0, 0.0); 10];
        s[1] = c(2.0, 0.0);
        assert!((update_omega(&s, &freqs).unwrap() - 0.1).abs() < 1e-15);
        s[3] = c(0.0, 2.0);
        assert!((update_omega(&s, &freqs).unwrap() - 0.2).abs() < 1e-15);
        assert_eq!(update_omega(&[c(0.0, 0.0); 10], &freqs), None);
    }

    #[test]
    fn omega_matches_direct_summation() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for len in [8usize, 64, 301] {
            let freqs = frequency_axis(len);
            let s: Vec<Complex> = (0..len)
                .map(|k| {
                    if k < len / 2 {
                        c(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))
                    } else {
                        c(0.0, 0.0)
                    }
                })
                .collect();
            let mut num = 0.0;
            let mut den = 0.0;
            for k in 0..len / 2 {
                let p = s[k].re * s[k].re + s[k].im * s[k].im;
                num += (k as f64 / len as f64) * p;
                den += p;
            }
            let got = update_omega(&s, &freqs).unwrap();
            assert!(((got - num / den) / (num / den)).abs() < 1e-12);
        }
    }

    #[test]
    fn lambda_examples() {
        let l = vec![c(1.0, 2.0), c(-1.0, 0.5)];
        let f = vec![c(3.0, 0.0), c(0.0, 1.0)];
        let s = vec![c(1.0, 1.0), c(2.0, 0.0)];
        assert_eq!(update_lambda(&l, &f, &s, 0.0), l);
        let zeros = vec![c(0.0, 0.0); 2];
        let r: Vec<Complex> = f.iter().zip(&s).map(|(a, b)| a - b).collect();
        assert_eq!(update_lambda(&zeros, &f, &s, 1.0), r);
        let two = update_lambda(&update_lambda(&l, &f, &s, 0.25), &f, &s, 0.25);
        let one = update_lambda(&l, &f, &s, 0.5);
        for (a, b) in two.iter().zip(&one) {
            assert!((a - b).norm() < 1e-15);
        }
    }

    #[test]
    fn convergence_examples() {
        let a = vec![
            vec![c(1.0, 0.0), c(0.0, 2.0)],
            vec![c(3.0, 1.0), c(1.0, 1.0)],
        ];
        assert_eq!(converged(&a, &a, 1e-9), (true, 0.0));

        let delta = 1e-3;
        let mut b = a.clone();
        for v in &mut b[0] {
            *v *= 1.0 + delta;
        }
        let (_, r) = converged(&a, &b, 1e-9);
        assert!((r - delta * delta).abs() < 1e-15);

        // Zero-norm previous modes are skipped; all-zero start never converges.
        let zero = vec![vec![c(0.0, 0.0); 2]; 2];
        assert_eq!(converged(&zero, &a, 1e-9), (false, 0.0));
    }

    #[test]
    fn convergence_matches_direct_summation() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut draw = |k: usize, len: usize| -> Vec<Vec<Complex>> {
            (0..k)
                .map(|_| {
                    (0..len)
                        .map(|_| c(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
                        .collect()
                })
                .collect()
        };
        let p = draw(4, 50);
        let q = draw(4, 50);
        let mut oracle = 0.0;
        for m in 0..4 {
            let mut diff = 0.0;
            let mut den = 0.0;
            for i in 0..50 {
                let d = q[m][i] - p[m][i];
                diff += d.re * d.re + d.im * d.im;
                den += p[m][i].re * p[m][i].re + p[m][i].im * p[m][i].im;
            }
            oracle += diff / den;
        }
        let (_, r) = converged(&p, &q, 1e-9);
        assert!(((r - oracle) / oracle).abs() < 1e-12);
    }

    #[test]
    fn constant_signal_goes_to_lowest_mode() {
        let signal = vec![3.5; 200];
        let res = decompose(&signal, &VmdConfig::with_modes(2)).unwrap();
        assert!(res.omegas[0].abs() < 1e-9);
        let dc: f64 = res.modes[0]
            .iter()
            .map(|v| (v - 3.5).abs())
            .fold(0.0, f64::max);
        assert!(dc < 1e-9, "dc error {dc}");
        assert!(norm(&res.modes[1]) < 1e-6 * norm(&signal));
        assert!(res.converged);
    }

    #[test]
    fn single_mode_low_pass() {
        let signal = tones(
            1000,
            &[
                Tone {
                    amplitude: 1.0,
                    frequency: 0.004,
                },
                Tone {
                    amplitude: 0.3,
                    frequency: 0.006,
                },
            ],
        );
        let res = decompose(&signal, &VmdConfig::with_modes(1)).unwrap();
        assert_eq!(res.modes.len(), 1);
        let err = rel_l2(&res.modes[0], &signal);
        assert!(err <= 5e-2, "rel err {err}");
    }

    #[test]
    fn rejects_bad_input() {
        assert!(matches!(
            decompose(&[1.0, f64::NAN, 2.0, 3.0], &VmdConfig::with_modes(1)),
            Err(Error::NonFinite { index: 1 })
        ));
        assert!(matches!(
            decompose(&[1.0; 5], &VmdConfig::with_modes(3)),
            Err(Error::TooShort(_))
        ));
        let cfg = VmdConfig {
            alpha: 0.0,
            ..VmdConfig::with_modes(2)
        };
        assert!(decompose(&[1.0; 50], &cfg).is_err());
    }

    #[test]
    fn max_iter_is_not_an_error() {
        let signal = tones(
            300,
            &[Tone {
                amplitude: 1.0,
                frequency: 0.05,
            }],
        );
        let cfg = VmdConfig {
            max_iter: 2,
            ..VmdConfig::with_modes(3)
        };
        let res = decompose(&signal, &cfg).unwrap();
        assert_eq!(res.iterations, 2);
        assert!(!res.converged);
    }

    #[test]
    fn random_init_is_seeded() {
        let signal = tones(
            400,
            &[
                Tone {
                    amplitude: 1.0,
                    frequency: 0.02,
                },
                Tone {
                    amplitude: 1.0,
                    frequency: 0.2,
                },
            ],
        );
        let cfg = VmdConfig {
            omega_init: OmegaInit::Random(4),
            ..VmdConfig::with_modes(2)
        };
        let a = decompose(&signal, &cfg).unwrap();
        let b = decompose(&signal, &cfg).unwrap();
        assert_eq!(a, b);
        assert!(a.omegas.iter().all(|w| (0.0..=0.5).contains(w)));
    }
}
