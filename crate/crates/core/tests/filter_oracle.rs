//! Filter design checked against the analytic transfer-function oracle.

use ecgcbam::signal::{design_bandpass, filter_forward, FilterSpec};
use ecgcbam_oracles::freq_response;

fn paper_filter() -> FilterSpec {
    FilterSpec::new(4, 1.0, 40.0, 1000.0)
}

#[test]
fn passband_and_stopband_magnitudes() {
    let c = design_bandpass(&paper_filter()).unwrap();
    let h10 = freq_response(&c, 10.0, 1000.0);
    assert!((0.95..=1.0).contains(&h10), "|H(10 Hz)| = {h10}");
    assert_eq!(freq_response(&c, 0.0, 1000.0), 0.0, "DC is a structural zero");
    let nyq = freq_response(&c, 500.0, 1000.0);
    assert!(nyq < 1e-3, "|H(Nyquist)| = {nyq}");
    assert!(c.max_pole_magnitude() < 1.0 - 1e-9);
}

#[test]
fn band_edges_sit_near_half_power() {
    let c = design_bandpass(&paper_filter()).unwrap();
    for edge in [1.0, 40.0] {
        let h = freq_response(&c, edge, 1000.0);
        assert!(
            (h - std::f64::consts::FRAC_1_SQRT_2).abs() < 0.02,
            "|H({edge} Hz)| = {h}, expected ~0.7071"
        );
    }
}

/// DFT of the measured impulse response equals the designed transfer
/// function: ties the runtime filter to the design coefficients.
#[test]
fn impulse_response_spectrum_matches_design() {
    let c = design_bandpass(&paper_filter()).unwrap();
    let n = 1 << 16; // long enough for the 1 Hz-edge tail to die out
    let mut impulse = vec![0.0; n];
    impulse[0] = 1.0;
    let h = filter_forward(&c, &impulse).unwrap();

    for f_hz in [1.0, 2.5, 5.0, 10.0, 20.0, 40.0, 80.0, 200.0, 450.0] {
        let omega = 2.0 * std::f64::consts::PI * f_hz / 1000.0;
        let (mut re, mut im) = (0.0, 0.0);
        for (i, &v) in h.iter().enumerate() {
            let phase = omega * i as f64;
            re += v * phase.cos();
            im -= v * phase.sin();
        }
        let measured = (re * re + im * im).sqrt();
        let designed = freq_response(&c, f_hz, 1000.0);
        assert!(
            (measured - designed).abs() < 1e-6,
            "{f_hz} Hz: impulse DFT {measured} vs analytic {designed}"
        );
    }
}

#[test]
fn sine_in_passband_passes_through() {
    let c = design_bandpass(&paper_filter()).unwrap();
    let fs = 1000.0;
    let x: Vec<f64> = (0..8000)
        .map(|i| (2.0 * std::f64::consts::PI * 10.0 * i as f64 / fs).sin())
        .collect();
    let y = filter_forward(&c, &x).unwrap();
    // Skip the transient, compare steady-state amplitude.
    let tail = &y[4000..];
    let amp = tail.iter().cloned().fold(0.0f64, |m, v| m.max(v.abs()));
    assert!((amp - 1.0).abs() < 0.01, "passband amplitude {amp}");
}

#[test]
fn higher_order_designs_stay_stable() {
    for order in [2usize, 4, 6, 8, 12] {
        let spec = FilterSpec::new(order, 1.0, 40.0, 1000.0);
        let c = design_bandpass(&spec).unwrap();
        assert_eq!(c.sections.len(), order / 2);
        assert!(
            c.max_pole_magnitude() < 1.0 - 1e-9,
            "order {order}: pole magnitude {}",
            c.max_pole_magnitude()
        );
        let h_mid = freq_response(&c, 6.3, 1000.0); // geometric center
        assert!(h_mid > 0.9, "order {order}: |H(center)| = {h_mid}");
    }
}
