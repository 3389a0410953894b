//! Per-window preprocessing: instance normalization, patching and the
//! patch embedding.

use serde::{Deserialize, Serialize};

use super::config::patch_count;
use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// Floor applied to the per-window standard deviation.
pub const STD_FLOOR: f64 = 1e-5;

/// Mean and standard deviation of one input window.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InstanceStats {
    pub mean: f64,
    pub std: f64,
}

impl InstanceStats {
    pub fn of(window: &[f64]) -> Self {
        let n = window.len().max(1) as f64;
        let mean = window.iter().sum::<f64>() / n;
        let var = window.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
        Self {
            mean,
            std: var.sqrt().max(STD_FLOOR),
        }
    }
}

/// Centers and scales a window to zero mean and unit (population) variance.
pub fn instance_normalize(window: &[f64]) -> (Vec<f64>, InstanceStats) {
    let stats = InstanceStats::of(window);
    let out = window
        .iter()
        .map(|x| (x - stats.mean) / stats.std)
        .collect();
    (out, stats)
}

/// Maps values from normalized space back to the window's scale.
pub fn instance_denormalize(values: &[f64], stats: InstanceStats) -> Vec<f64> {
    values.iter().map(|y| y * stats.std + stats.mean).collect()
}

/// Appends `stride` copies of the last value to `window` and writes the
/// `N` patches row by row (`[N, P]`) into `out`.
pub(crate) fn patch_rows(window: &[f64], patch_len: usize, stride: usize, out: &mut Vec<f64>) {
    let last = *window.last().expect("non-empty window");
    let n = patch_count(window.len(), patch_len, stride);
    let at = |i: usize| if i < window.len() { window[i] } else { last };
    for j in 0..n {
        out.extend((j * stride..j * stride + patch_len).map(at));
    }
}

/// Splits a window into patches, returned as a `[P, N]` tensor whose
/// column `j` covers padded indices `[j*S, j*S + P)`.
pub fn patchify(window: &[f64], patch_len: usize, stride: usize) -> Result<Tensor> {
    if patch_len == 0 || stride == 0 {
        return Err(Error::InvalidArgument(
            "patch length and stride must be positive".into(),
        ));
    }
    if window.is_empty() || patch_len > window.len() {
        return Err(Error::InvalidArgument(format!(
            "patch length {patch_len} exceeds window length {}",
            window.len()
        )));
    }
    let n = patch_count(window.len(), patch_len, stride);
    let mut rows = Vec::with_capacity(n * patch_len);
    patch_rows(window, patch_len, stride, &mut rows);
    Tensor::new([n, patch_len], rows)?.transposed()
}

/// `W_p * patches + W_pos` for patches `[P, N]`, `W_p: [D, P]`,
/// `W_pos: [D, N]`.
pub fn embed(patches: &Tensor, w_p: &Tensor, w_pos: &Tensor) -> Result<Tensor> {
    let mut out = w_p.matmul(patches)?;
    if out.shape() != w_pos.shape() {
        return Err(Error::shape("embed", out.shape(), w_pos.shape()));
    }
    out.add_scaled(w_pos, 1.0)?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn normalize_centers() {
        let (y, s) = instance_normalize(&[1.0, 2.0, 3.0]);
        assert_eq!(s.mean, 2.0);
        assert!((s.std - (2.0f64 / 3.0).sqrt()).abs() < 1e-15);
        assert!(y.iter().sum::<f64>().abs() < 1e-12);
        let var = y.iter().map(|v| v * v).sum::<f64>() / 3.0;
        assert!((var - 1.0).abs() < 1e-12);
    }

    #[test]
    fn constant_window_uses_floor() {
        let (y, s) = instance_normalize(&[5.0, 5.0, 5.0]);
        assert_eq!(y, vec![0.0; 3]);
        assert_eq!(s.std, STD_FLOOR);
        assert_eq!(instance_denormalize(&y, s), vec![5.0; 3]);
    }

    #[test]
    fn normalize_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..200 {
            let len = rng.random_range(2..64);
            let scale = rng.random_range(0.01..1e4);
            let w: Vec<f64> = (0..len)
                .map(|_| rng.random_range(-1.0..1.0) * scale + 50.0)
                .collect();
            let (y, s) = instance_normalize(&w);
            let back = instance_denormalize(&y, s);
            for (a, b) in w.iter().zip(&back) {
                assert!((a - b).abs() < 1e-10, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn patch_count_spot_value() {
        assert_eq!(patch_count(336, 16, 8), 42);
    }

    #[test]
    fn patchify_pads_with_last_value() {
        let p = patchify(&[1.0, 2.0, 3.0, 4.0], 4, 4).unwrap();
        assert_eq!(p.shape(), &[4, 2]);
        let cols = p.transposed().unwrap();
        assert_eq!(cols.data(), &[1.0, 2.0, 3.0, 4.0, 4.0, 4.0, 4.0, 4.0]);
        assert!(patchify(&[1.0, 2.0], 3, 1).is_err());
    }

    #[test]
    fn patches_cover_window_when_stride_fits() {
        for l in 1..=24 {
            for p in 1..=l {
                for s in 1..=p {
                    let w: Vec<f64> = (0..l).map(|i| i as f64).collect();
                    let patches = patchify(&w, p, s).unwrap();
                    for i in 0..l {
                        assert!(
                            patches.data().contains(&(i as f64)),
                            "L={l} P={p} S={s} misses {i}"
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn embed_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut rand_t = |shape: [usize; 2]| {
            let n = shape[0] * shape[1];
            Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
        };
        let patches = rand_t([3, 5]);
        let w_pos = rand_t([4, 5]);
        let w_p = rand_t([4, 3]);

        assert_eq!(
            embed(&patches, &Tensor::zeros([4, 3]), &w_pos).unwrap(),
            w_pos
        );

        // Identity-like patch columns select columns of W_p.
        let mut basis = Tensor::zeros([3, 3]);
        basis.data_mut()[0] = 1.0; // column 0 = e0
        basis.data_mut()[5] = 1.0; // column 2 = e1
        basis.data_mut()[7] = 1.0; // column 1 = e2
        let x = embed(&basis, &w_p, &Tensor::zeros([4, 3])).unwrap();
        for d in 0..4 {
            assert_eq!(x.data()[d * 3], w_p.data()[d * 3]);
            assert_eq!(x.data()[d * 3 + 1], w_p.data()[d * 3 + 2]);
            assert_eq!(x.data()[d * 3 + 2], w_p.data()[d * 3 + 1]);
        }

        let x = embed(&patches, &w_p, &w_pos).unwrap();
        for d in 0..4 {
            for j in 0..5 {
                let mut acc = w_pos.data()[d * 5 + j];
                for k in 0..3 {
                    acc += w_p.data()[d * 3 + k] * patches.data()[k * 5 + j];
                }
                assert!((x.data()[d * 5 + j] - acc).abs() < 1e-12);
            }
        }
        assert!(embed(&patches, &w_p, &rand_t([4, 4])).is_err());
    }
}
