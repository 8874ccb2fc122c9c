//! Brute-force reference implementations for the test suites.
//!
//! Everything here trades speed for obviousness: central finite differences,
//! a triple-loop convolution, the all-pairs AUC statistic, and direct
//! evaluation of a filter cascade's transfer function on the unit circle.
//! None of it shares code with the implementations it checks, and none of it
//! ships in release artifacts — this crate is only ever a dev-dependency.

use ecgcbam::signal::BiquadCascade;
use ecgcbam::Tensor;
use num_complex::Complex64;

/// Central finite-difference gradient of a scalar function at `x`.
///
/// Truncation error is quadratic in `step`; with f64 and well-scaled
/// functions, `step = 1e-5` gives roughly 1e-10 accuracy.
pub fn fd_gradient(f: impl Fn(&Tensor) -> f64, x: &Tensor, step: f64) -> Tensor {
    let mut grad = vec![0.0; x.numel()];
    let mut probe = x.clone();
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + step;
        let f_plus = f(&probe);
        probe.data_mut()[i] = orig - step;
        let f_minus = f(&probe);
        probe.data_mut()[i] = orig;
        grad[i] = (f_plus - f_minus) / (2.0 * step);
    }
    Tensor::from_vec(x.shape(), grad)
}

/// Largest elementwise relative error between two gradient buffers.
///
/// The denominator is floored at 1.0 so that near-zero entries are compared
/// absolutely, where finite-difference noise (~1e-10) dominates any true
/// signal.
pub fn max_rel_err(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(&x, &y)| (x - y).abs() / x.abs().max(y.abs()).max(1.0))
        .fold(0.0, f64::max)
}

/// Reference 1-D cross-correlation: plain loops over every output element.
///
/// `x: [N, C_in, W]`, `k: [C_out, C_in, K]`, `bias: [C_out]`.
pub fn conv1d_naive(x: &Tensor, k: &Tensor, bias: &Tensor, stride: usize, padding: usize) -> Tensor {
    let (n_batch, c_in, width) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (c_out, kc_in, klen) = (k.shape()[0], k.shape()[1], k.shape()[2]);
    assert_eq!(c_in, kc_in);
    assert_eq!(bias.shape(), &[c_out]);
    let w_out = (width + 2 * padding - klen) / stride + 1;

    let mut out = vec![0.0; n_batch * c_out * w_out];
    for n in 0..n_batch {
        for co in 0..c_out {
            for wo in 0..w_out {
                let mut acc = bias.data()[co];
                for ci in 0..c_in {
                    for kk in 0..klen {
                        let xi = wo * stride + kk;
                        if xi >= padding && xi - padding < width {
                            let xv = x.data()[(n * c_in + ci) * width + (xi - padding)];
                            let kv = k.data()[(co * c_in + ci) * klen + kk];
                            acc += xv * kv;
                        }
                    }
                }
                out[(n * c_out + co) * w_out + wo] = acc;
            }
        }
    }
    Tensor::from_vec(&[n_batch, c_out, w_out], out)
}

/// AUC as the Mann-Whitney pairwise statistic: over all positive/negative
/// pairs, full credit when the positive outscores the negative, half credit
/// on ties.
pub fn auc_pairwise(scores: &[f64], labels: &[u8]) -> f64 {
    assert_eq!(scores.len(), labels.len());
    let mut wins = 0.0f64;
    let mut pairs = 0.0f64;
    for (i, (&si, &yi)) in scores.iter().zip(labels).enumerate() {
        if yi != 1 {
            continue;
        }
        for (j, (&sj, &yj)) in scores.iter().zip(labels).enumerate() {
            if i == j || yj != 0 {
                continue;
            }
            pairs += 1.0;
            if si > sj {
                wins += 1.0;
            } else if si == sj {
                wins += 0.5;
            }
        }
    }
    assert!(pairs > 0.0, "auc_pairwise needs both classes");
    wins / pairs
}

/// Magnitude of the cascade's transfer function at `f_hz`, evaluated
/// analytically at `z = e^{j 2π f / fs}`.
pub fn freq_response(cascade: &BiquadCascade, f_hz: f64, fs: f64) -> f64 {
    let omega = 2.0 * std::f64::consts::PI * f_hz / fs;
    let z_inv = Complex64::from_polar(1.0, -omega);
    let z_inv2 = z_inv * z_inv;
    let mut h = Complex64::new(1.0, 0.0);
    for s in &cascade.sections {
        let num = Complex64::new(s.b[0], 0.0) + s.b[1] * z_inv + s.b[2] * z_inv2;
        let den = Complex64::new(1.0, 0.0) + s.a[0] * z_inv + s.a[1] * z_inv2;
        h *= num / den;
    }
    h.norm()
}
