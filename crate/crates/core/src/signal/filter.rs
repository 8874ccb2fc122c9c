//! Butterworth bandpass design and IIR evaluation.
//!
//! The design path is the textbook one: place the lowpass prototype poles on
//! the unit circle, pre-warp the band edges, apply the lowpass-to-bandpass
//! transform, and map every pole through the bilinear transform into
//! second-order sections. The bandpass numerator contributes exact zeros at
//! DC and Nyquist in every section.

use num_complex::Complex64;
use std::f64::consts::PI;

use super::{FilterSpec, SignalError};

/// One second-order section in direct form II transposed.
///
/// `y[n] = b0 x[n] + s1`, `s1' = b1 x[n] - a1 y[n] + s2`, `s2' = b2 x[n] - a2 y[n]`,
/// with the denominator normalized so its leading coefficient is 1.
#[derive(Debug, Clone, Copy)]
pub struct Biquad {
    pub b: [f64; 3],
    pub a: [f64; 2],
}

impl Biquad {
    /// Largest pole magnitude of this section.
    fn max_pole_magnitude(&self) -> f64 {
        let [a1, a2] = self.a;
        let disc = a1 * a1 - 4.0 * a2;
        if disc >= 0.0 {
            let r = disc.sqrt();
            let p1 = (-a1 + r) / 2.0;
            let p2 = (-a1 - r) / 2.0;
            p1.abs().max(p2.abs())
        } else {
            // Complex pair: |p|^2 = a2.
            a2.sqrt()
        }
    }
}

/// A stable IIR filter realized as cascaded second-order sections.
#[derive(Debug, Clone)]
pub struct BiquadCascade {
    pub sections: Vec<Biquad>,
}

impl BiquadCascade {
    /// Largest pole magnitude across all sections.
    pub fn max_pole_magnitude(&self) -> f64 {
        self.sections
            .iter()
            .map(Biquad::max_pole_magnitude)
            .fold(0.0, f64::max)
    }
}

/// Designs an order-`spec.order` Butterworth bandpass as biquad sections via
/// the bilinear transform with frequency pre-warping.
pub fn design_bandpass(spec: &FilterSpec) -> Result<BiquadCascade, SignalError> {
    spec.validate()?;
    let n_proto = spec.order / 2;
    let k = 2.0 * spec.fs;

    // Pre-warped analog band edges.
    let w_low = k * (PI * spec.low_hz / spec.fs).tan();
    let w_high = k * (PI * spec.high_hz / spec.fs).tan();
    let w0_sq = w_low * w_high;
    let bw = w_high - w_low;

    // Lowpass prototype poles on the unit circle, left half-plane.
    let prototype: Vec<Complex64> = (1..=n_proto)
        .map(|m| {
            let theta = PI * (2 * m + n_proto - 1) as f64 / (2 * n_proto) as f64;
            Complex64::new(theta.cos(), theta.sin())
        })
        .collect();

    // Lowpass-to-bandpass: each prototype pole p yields the two roots of
    // s^2 - p*bw*s + w0^2. Conjugate prototype poles produce conjugate root
    // sets, so walking only the upper half (plus real poles) covers
    // everything once.
    let mut sections = Vec::with_capacity(n_proto);
    for p in prototype {
        let pb = p * bw;
        let disc = (pb * pb - 4.0 * w0_sq).sqrt();
        let q1 = (pb + disc) / 2.0;
        let q2 = (pb - disc) / 2.0;
        if p.im.abs() < 1e-12 {
            // Real prototype pole: q1, q2 are conjugate or both real; either
            // way their product quadratic has real coefficients.
            sections.push(analog_section_to_biquad(
                -(q1 + q2).re,
                (q1 * q2).re,
                bw,
                k,
            ));
        } else if p.im > 0.0 {
            // One section per bandpass pole, paired with its conjugate.
            for q in [q1, q2] {
                sections.push(analog_section_to_biquad(-2.0 * q.re, q.norm_sqr(), bw, k));
            }
        }
    }

    let cascade = BiquadCascade { sections };
    debug_assert!(cascade.max_pole_magnitude() < 1.0);
    Ok(cascade)
}

/// Bilinear transform of one analog section `bw*s / (s^2 + a1 s + a0)`.
fn analog_section_to_biquad(a1: f64, a0: f64, bw: f64, k: f64) -> Biquad {
    let d0 = k * k + a1 * k + a0;
    let d1 = 2.0 * (a0 - k * k);
    let d2 = k * k - a1 * k + a0;
    Biquad {
        b: [bw * k / d0, 0.0, -bw * k / d0],
        a: [d1 / d0, d2 / d0],
    }
}

/// Causal forward pass through the cascade (direct form II transposed),
/// starting from zero state. Output length equals input length.
pub fn filter_forward(cascade: &BiquadCascade, x: &[f64]) -> Result<Vec<f64>, SignalError> {
    if x.is_empty() {
        return Err(SignalError::EmptyInput);
    }
    let mut y = x.to_vec();
    for s in &cascade.sections {
        let (mut s1, mut s2) = (0.0, 0.0);
        for v in y.iter_mut() {
            let xin = *v;
            let out = s.b[0] * xin + s1;
            s1 = s.b[1] * xin - s.a[0] * out + s2;
            s2 = s.b[2] * xin - s.a[1] * out;
            *v = out;
        }
    }
    Ok(y)
}

/// Zero-phase variant: forward pass, time reversal, forward pass, reversal.
/// Squares the magnitude response and cancels the phase; no edge padding is
/// applied.
pub fn filter_zero_phase(cascade: &BiquadCascade, x: &[f64]) -> Result<Vec<f64>, SignalError> {
    let mut y = filter_forward(cascade, x)?;
    y.reverse();
    let mut y = filter_forward(cascade, &y)?;
    y.reverse();
    Ok(y)
}
