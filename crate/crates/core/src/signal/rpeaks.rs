//! R-peak detection on the filtered signal.
//!
//! Pan-Tompkins-style chain: five-point derivative, squaring, 150 ms
//! moving-window integration, adaptive dual-level thresholding with a 200 ms
//! refractory period and RR-based search-back, then refinement of each event
//! to a local maximum of the filtered waveform.

use super::SignalError;

const MWI_SECONDS: f64 = 0.150;
const REFRACTORY_SECONDS: f64 = 0.200;
const REFINE_SECONDS: f64 = 0.050;

/// Detects R-peak sample indices in a filtered ECG.
///
/// Returned indices are strictly increasing, at least 200 ms apart, and each
/// is a local maximum of `x` within a ±50 ms neighborhood. Fails with
/// [`SignalError::NoPeaksFound`] when fewer than two peaks survive.
pub fn detect_r_peaks(x: &[f64], fs: f64) -> Result<Vec<usize>, SignalError> {
    if fs <= 0.0 {
        return Err(SignalError::InvalidSpec(format!("fs must be positive, got {fs}")));
    }
    let n = x.len();
    if (n as f64) < 2.0 * fs {
        return Err(SignalError::RecordingTooShort(format!(
            "detector needs >= 2 s of signal, got {} samples at {fs} Hz",
            n
        )));
    }

    // Derivative emphasizes QRS slope, squaring rectifies and sharpens it,
    // the moving window integrates it to one hump per beat.
    let mut deriv = vec![0.0; n];
    for i in 4..n {
        deriv[i] = (2.0 * x[i] + x[i - 1] - x[i - 3] - 2.0 * x[i - 4]) / 8.0;
    }
    let window = ((MWI_SECONDS * fs).round() as usize).max(1);
    let mut mwi = vec![0.0; n];
    let mut acc = 0.0;
    for i in 0..n {
        acc += deriv[i] * deriv[i];
        if i >= window {
            acc -= deriv[i - window] * deriv[i - window];
        }
        mwi[i] = acc / window as f64;
    }

    // Candidate events: local maxima of the integrated signal.
    let mut cands = Vec::new();
    for i in 1..n - 1 {
        if mwi[i] > mwi[i - 1] && mwi[i] >= mwi[i + 1] && mwi[i] > 0.0 {
            cands.push(i);
        }
    }

    let refractory = (REFRACTORY_SECONDS * fs).round() as usize;

    // Robust initial levels. Among candidates in the first 10 s, keep local
    // maxima at least 300 ms apart (largest first) so each beat contributes
    // one value, then call the median of the top K the beat level, where K
    // is the beat count of the slowest plausible rhythm (40 bpm) so the top
    // group holds only QRS events. The median shrugs off a few outsized
    // artifact beats that would poison a max-based estimate.
    let init_window = ((10.0 * fs) as usize).min(n);
    let sep = (0.3 * fs).round() as usize;
    let mut strongest_first: Vec<usize> = cands
        .iter()
        .copied()
        .take_while(|&i| i < init_window)
        .collect();
    strongest_first.sort_by(|&a, &b| mwi[b].partial_cmp(&mwi[a]).unwrap());
    let mut separated: Vec<f64> = Vec::new();
    let mut kept: Vec<usize> = Vec::new();
    for i in strongest_first {
        if kept.iter().all(|&k| k.abs_diff(i) >= sep) {
            kept.push(i);
            separated.push(mwi[i]); // descending by construction
        }
    }
    let k_beats = ((init_window as f64 / fs * 40.0 / 60.0) as usize).max(3);
    let (mut spki, mut npki) = if separated.is_empty() {
        (0.25 * mwi.iter().cloned().fold(0.0, f64::max), 0.0)
    } else {
        let top = &separated[..separated.len().min(k_beats)];
        let beat_level = top[top.len() / 2];
        let lower = &separated[separated.len() / 2..];
        let noise_level = lower[lower.len() / 2].min(beat_level / 8.0);
        (beat_level, noise_level)
    };

    let mut accepted: Vec<usize> = Vec::new();
    let mut rr_hist: Vec<usize> = Vec::new();
    let mut pending: Vec<usize> = Vec::new(); // sub-threshold candidates since last beat

    let push_beat = |accepted: &mut Vec<usize>, rr_hist: &mut Vec<usize>, c: usize| {
        if let Some(&last) = accepted.last() {
            rr_hist.push(c - last);
            if rr_hist.len() > 8 {
                rr_hist.remove(0);
            }
        }
        accepted.push(c);
    };

    for &c in &cands {
        let thr = npki + 0.25 * (spki - npki);
        let last = accepted.last().copied();
        if let Some(last) = last {
            if c - last < refractory {
                continue;
            }
        }
        if mwi[c] >= thr {
            push_beat(&mut accepted, &mut rr_hist, c);
            pending.clear();
            // Cap the update so one outsized artifact beat cannot raise the
            // signal level estimate past reach of ordinary beats.
            spki = 0.125 * mwi[c].min(8.0 * spki) + 0.875 * spki;
        } else {
            npki = 0.125 * mwi[c] + 0.875 * npki;
            pending.push(c);
            // Search-back: a beat is overdue, so take the strongest skipped
            // candidate that clears either half the threshold or the noise
            // floor. The stronger 0.5 update lets the signal level recover
            // quickly when it was dragged up by an artifact.
            let rr_avg = if rr_hist.is_empty() {
                1.2 * fs
            } else {
                rr_hist.iter().sum::<usize>() as f64 / rr_hist.len() as f64
            };
            let anchor = last.unwrap_or(0);
            if (c - anchor) as f64 > 1.66 * rr_avg {
                let sb_thr = (0.5 * thr).min((4.0 * npki).max(f64::MIN_POSITIVE));
                if let Some(&best) = pending
                    .iter()
                    .filter(|&&p| p >= anchor + refractory && mwi[p] >= sb_thr)
                    .max_by(|&&a, &&b| mwi[a].partial_cmp(&mwi[b]).unwrap())
                {
                    push_beat(&mut accepted, &mut rr_hist, best);
                    pending.clear();
                    spki = 0.5 * mwi[best].min(8.0 * spki) + 0.5 * spki;
                }
            }
        }
    }

    // The integration hump trails the R-peak, so look back one window, then
    // hill-climb to the local maximum of the filtered waveform.
    let refine = (REFINE_SECONDS * fs).round() as usize;
    let mut peaks: Vec<usize> = accepted
        .iter()
        .map(|&c| {
            let lo = c.saturating_sub(window + refine);
            let hi = (c + refine + 1).min(n);
            let mut r = argmax(x, lo, hi);
            loop {
                let lo = r.saturating_sub(refine);
                let hi = (r + refine + 1).min(n);
                let m = argmax(x, lo, hi);
                if x[m] > x[r] {
                    r = m;
                } else {
                    break;
                }
            }
            r
        })
        .collect();

    peaks.sort_unstable();
    peaks.dedup();
    // Refinement can pull two events onto nearby maxima; keep the taller one.
    let mut out: Vec<usize> = Vec::with_capacity(peaks.len());
    for r in peaks {
        match out.last() {
            Some(&prev) if r - prev < refractory => {
                if x[r] > x[prev] {
                    *out.last_mut().unwrap() = r;
                }
            }
            _ => out.push(r),
        }
    }

    if out.len() < 2 {
        return Err(SignalError::NoPeaksFound(format!(
            "{} peak(s) detected in {:.1} s",
            out.len(),
            n as f64 / fs
        )));
    }
    Ok(out)
}

fn argmax(x: &[f64], lo: usize, hi: usize) -> usize {
    let mut best = lo;
    for i in lo..hi {
        if x[i] > x[best] {
            best = i;
        }
    }
    best
}
