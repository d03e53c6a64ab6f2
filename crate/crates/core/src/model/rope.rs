//! Rotary position embedding over interleaved pairs `(x[2i], x[2i+1])` with
//! frequency `θ^(-2i/d)`.

use crate::error::{Error, Result};

/// Per-pair rotation frequencies for a head of width `head_dim`.
pub fn rope_frequencies(head_dim: usize, base: f64) -> Result<Vec<f64>> {
    if head_dim == 0 || head_dim % 2 != 0 {
        return Err(Error::Config(format!("RoPE needs an even head_dim, got {head_dim}")));
    }
    if !(base > 0.0 && base.is_finite()) {
        return Err(Error::Config(format!("RoPE base must be positive, got {base}")));
    }
    Ok((0..head_dim / 2)
        .map(|i| base.powf(-2.0 * i as f64 / head_dim as f64))
        .collect())
}

/// Rotates `x` in place for `position` using precomputed `freqs`.
pub fn rope_rotate(x: &mut [f64], position: usize, freqs: &[f64]) {
    for (pair, &f) in x.chunks_exact_mut(2).zip(freqs) {
        let (sin, cos) = (position as f64 * f).sin_cos();
        let (a, b) = (pair[0], pair[1]);
        pair[0] = a * cos - b * sin;
        pair[1] = a * sin + b * cos;
    }
}

pub fn rope_apply(v: &[f64], position: usize, base: f64) -> Result<Vec<f64>> {
    let freqs = rope_frequencies(v.len(), base)?;
    let mut out = v.to_vec();
    rope_rotate(&mut out, position, &freqs);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::dot;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn position_zero_is_identity() {
        let v = [0.3, -1.2, 2.5, 0.0, 7.0, -0.1];
        assert_eq!(rope_apply(&v, 0, 10_000.0).unwrap(), v.to_vec());
    }

    #[test]
    fn single_pair_rotates_by_position() {
        let out = rope_apply(&[1.0, 0.0], 1, 123.0).unwrap();
        assert_abs_diff_eq!(out[0], 1f64.cos(), epsilon = 1e-15);
        assert_abs_diff_eq!(out[1], 1f64.sin(), epsilon = 1e-15);
    }

    #[test]
    fn odd_head_dim_rejected() {
        assert!(matches!(rope_apply(&[1.0, 2.0, 3.0], 4, 1e4), Err(Error::Config(_))));
    }

    #[test]
    fn preserves_norm() {
        let v = [1.0, 2.0, 3.0, 4.0];
        let r = rope_apply(&v, 37, 1e4).unwrap();
        assert_abs_diff_eq!(dot(&r, &r), dot(&v, &v), epsilon = 1e-12);
    }

    #[test]
    fn dot_product_depends_on_offset_only() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for &s in &[1usize, 7, 100] {
            let q: Vec<f64> = (0..16).map(|_| rng.random_range(-1.0..1.0)).collect();
            let k: Vec<f64> = (0..16).map(|_| rng.random_range(-1.0..1.0)).collect();
            let (m, n) = (rng.random_range(0..300), rng.random_range(0..300));
            let a = dot(&rope_apply(&q, m, 1e4).unwrap(), &rope_apply(&k, n, 1e4).unwrap());
            let b = dot(&rope_apply(&q, m + s, 1e4).unwrap(), &rope_apply(&k, n + s, 1e4).unwrap());
            assert_abs_diff_eq!(a, b, epsilon = 1e-9);
        }
    }
}
