//! Sinusoidal positional encoding.
//!
//! Layout for an input of dimension `d` and `L` frequencies:
//! `[x_0..x_d, sin(2^0 π x)_0..d, cos(2^0 π x)_0..d, ..., sin(2^{L-1} π x), cos(2^{L-1} π x)]`.

use std::f64::consts::PI;

pub fn encoded_dim(dim: usize, num_freqs: usize) -> usize {
    dim * (1 + 2 * num_freqs)
}

pub fn positional_encoding(x: &[f64], num_freqs: usize) -> Vec<f64> {
    let mut out = vec![0.0; encoded_dim(x.len(), num_freqs)];
    encode_into(x, num_freqs, &mut out);
    out
}

pub fn encode_into(x: &[f64], num_freqs: usize, out: &mut [f64]) {
    let d = x.len();
    out[..d].copy_from_slice(x);
    for k in 0..num_freqs {
        let freq = (1u64 << k) as f64 * PI;
        let base = d * (1 + 2 * k);
        for (i, &xi) in x.iter().enumerate() {
            let (s, c) = (freq * xi).sin_cos();
            out[base + i] = s;
            out[base + d + i] = c;
        }
    }
}

/// Derivative of each encoded entry with respect to the raw component it is
/// built from (the encoding is separable per component).
pub fn encode_derivative_into(x: &[f64], num_freqs: usize, out: &mut [f64]) {
    let d = x.len();
    out[..d].fill(1.0);
    for k in 0..num_freqs {
        let freq = (1u64 << k) as f64 * PI;
        let base = d * (1 + 2 * k);
        for (i, &xi) in x.iter().enumerate() {
            let (s, c) = (freq * xi).sin_cos();
            out[base + i] = freq * c;
            out[base + d + i] = -freq * s;
        }
    }
}

/// Second derivative, same layout as [`encode_derivative_into`].
pub fn encode_second_derivative_into(x: &[f64], num_freqs: usize, out: &mut [f64]) {
    let d = x.len();
    out[..d].fill(0.0);
    for k in 0..num_freqs {
        let freq = (1u64 << k) as f64 * PI;
        let base = d * (1 + 2 * k);
        for (i, &xi) in x.iter().enumerate() {
            let (s, c) = (freq * xi).sin_cos();
            out[base + i] = -freq * freq * s;
            out[base + d + i] = -freq * freq * c;
        }
    }
}

/// Raw component each encoded entry depends on.
#[inline]
pub fn source_component(encoded_index: usize, dim: usize) -> usize {
    encoded_index % dim
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn origin_encodes_to_zero_sines_and_unit_cosines() {
        let e = positional_encoding(&[0.0, 0.0, 0.0], 2);
        assert_eq!(e.len(), 15);
        assert_eq!(&e[..3], &[0.0; 3]);
        for k in 0..2 {
            assert_eq!(&e[3 + 6 * k..6 + 6 * k], &[0.0; 3]);
            assert_eq!(&e[6 + 6 * k..9 + 6 * k], &[1.0; 3]);
        }
    }

    #[test]
    fn zero_frequencies_is_identity() {
        let x = [0.25, -3.0, 7.5];
        assert_eq!(positional_encoding(&x, 0), x.to_vec());
    }

    #[test]
    fn matches_direct_trigonometry() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            let x: Vec<f64> = (0..3).map(|_| rng.random_range(-2.0..2.0)).collect();
            let e = positional_encoding(&x, 6);
            let mut direct = x.clone();
            for k in 0..6 {
                let f = 2f64.powi(k) * PI;
                direct.extend(x.iter().map(|v| (f * v).sin()));
                direct.extend(x.iter().map(|v| (f * v).cos()));
            }
            for (a, b) in e.iter().zip(&direct) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn derivatives_match_finite_differences() {
        let x = [0.3, -0.7, 0.11];
        let (mut d1, mut d2) = (vec![0.0; 39], vec![0.0; 39]);
        encode_derivative_into(&x, 6, &mut d1);
        encode_second_derivative_into(&x, 6, &mut d2);
        let h = 1e-6;
        for k in 0..39 {
            let c = source_component(k, 3);
            let mut xp = x;
            xp[c] += h;
            let mut xm = x;
            xm[c] -= h;
            let fd = (positional_encoding(&xp, 6)[k] - positional_encoding(&xm, 6)[k]) / (2.0 * h);
            assert!((fd - d1[k]).abs() < 1e-4 * (1.0 + d1[k].abs()));
            let mut g1 = vec![0.0; 39];
            let mut g2 = vec![0.0; 39];
            encode_derivative_into(&xp, 6, &mut g1);
            encode_derivative_into(&xm, 6, &mut g2);
            let fd2 = (g1[k] - g2[k]) / (2.0 * h);
            assert!((fd2 - d2[k]).abs() < 1e-3 * (1.0 + d2[k].abs()));
        }
    }
}
