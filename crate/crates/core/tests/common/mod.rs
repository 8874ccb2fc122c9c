//! Helpers shared between the integration suites and the acceptance gate.
#![allow(dead_code)]

use ecgcbam::cohort::{synth_cohort, SynthSpec};
use ecgcbam::model::{bind_params, model_forward, ModelConfig, ModelParams};
use ecgcbam::signal::{
    design_bandpass, detect_r_peaks, filter_zero_phase, trim_edges, FilterSpec,
};
use ecgcbam::{Tape, Tensor, Var};
use ecgcbam_oracles::{fd_gradient, max_rel_err};

pub const FD_STEP: f64 = 1e-5;
pub const GRAD_TOL: f64 = 1e-5;

/// Deterministic test values: low-discrepancy sequence pushed away from
/// zero so no value sits near a ReLU kink and no two comparable values tie.
pub fn probe_tensor(shape: &[usize], salt: usize) -> Tensor {
    let n: usize = shape.iter().product();
    let phi = 0.618_033_988_749_894_9_f64;
    let data: Vec<f64> = (0..n)
        .map(|i| {
            let v = (((i + 13 * salt + 1) as f64 * phi).fract() * 2.0 - 1.0) * 0.9;
            v + 0.05 * v.signum()
        })
        .collect();
    Tensor::from_vec(shape, data)
}

/// Fixed weights turning an op output into a scalar, so every output element
/// influences the loss.
pub fn weighted_sum(tape: &Tape, v: Var) -> Var {
    let shape = tape.shape(v);
    let w = probe_tensor(&shape, 7);
    let wl = tape.leaf(&w);
    let prod = tape.mul(v, wl).expect("weight shape matches output");
    tape.sum(prod)
}

/// Checks d(weighted_sum(op(inputs)))/d(inputs[wrt]) against the
/// finite-difference oracle.
pub fn fd_check(name: &str, inputs: &[Tensor], wrt: usize, f: &dyn Fn(&Tape, &[Var]) -> Var) {
    let tape = Tape::new();
    let vars: Vec<Var> = inputs
        .iter()
        .enumerate()
        .map(|(i, t)| {
            let t = if i == wrt { t.clone().requires_grad() } else { t.clone() };
            tape.leaf(&t)
        })
        .collect();
    let loss = weighted_sum(&tape, f(&tape, &vars));
    tape.backward(loss).unwrap();
    let analytic = tape.grad(vars[wrt]).expect("gradient reached the input");

    let recompute = |probe: &Tensor| -> f64 {
        let tape = Tape::new();
        let vars: Vec<Var> = inputs
            .iter()
            .enumerate()
            .map(|(i, t)| tape.leaf(if i == wrt { probe } else { t }))
            .collect();
        let loss = weighted_sum(&tape, f(&tape, &vars));
        tape.scalar_value(loss)
    };
    let numeric = fd_gradient(recompute, &inputs[wrt], FD_STEP);

    let err = max_rel_err(&analytic, numeric.data());
    assert!(err < GRAD_TOL, "{name} (input {wrt}): max relative error {err:.3e}");
}

/// The complete per-operation gradient suite.
pub fn run_op_gradient_suite() {
    let x3 = probe_tensor(&[2, 3, 11], 1);
    let w3 = probe_tensor(&[4, 3, 5], 2);
    let b3 = probe_tensor(&[4], 3);
    for (stride, padding) in [(1, 0), (1, 2), (2, 1)] {
        let f = move |t: &Tape, v: &[Var]| t.conv1d(v[0], v[1], v[2], stride, padding).unwrap();
        for wrt in 0..3 {
            fd_check("conv1d", &[x3.clone(), w3.clone(), b3.clone()], wrt, &f);
        }
    }

    let x = probe_tensor(&[3, 5], 1);
    let w = probe_tensor(&[4, 5], 2);
    let b = probe_tensor(&[4], 3);
    let f = |t: &Tape, v: &[Var]| t.dense(v[0], v[1], v[2]).unwrap();
    for wrt in 0..3 {
        fd_check("dense", &[x.clone(), w.clone(), b.clone()], wrt, &f);
    }

    let x = probe_tensor(&[2, 3, 12], 5);
    fd_check("relu", &[x.clone()], 0, &|t, v| t.relu(v[0]));
    fd_check("sigmoid", &[x.clone()], 0, &|t, v| t.sigmoid(v[0]));
    fd_check("maxpool1d", &[x.clone()], 0, &|t, v| t.maxpool1d(v[0], 2, 2).unwrap());
    fd_check("avgpool1d", &[x.clone()], 0, &|t, v| t.avgpool1d(v[0], 2, 2).unwrap());
    fd_check("global_avgpool_w", &[x.clone()], 0, &|t, v| t.global_avgpool_w(v[0]).unwrap());
    fd_check("global_maxpool_w", &[x.clone()], 0, &|t, v| t.global_maxpool_w(v[0]).unwrap());
    fd_check("channel_avg", &[x.clone()], 0, &|t, v| t.channel_avg(v[0]).unwrap());
    fd_check("channel_max", &[x.clone()], 0, &|t, v| t.channel_max(v[0]).unwrap());

    let y = probe_tensor(&[2, 3, 12], 9);
    let f = |t: &Tape, v: &[Var]| t.concat_channels(v[0], v[1]).unwrap();
    fd_check("concat_channels", &[x.clone(), y.clone()], 0, &f);
    fd_check("concat_channels", &[x.clone(), y.clone()], 1, &f);

    let per_channel = probe_tensor(&[2, 3], 11);
    let per_pos = probe_tensor(&[2, 1, 12], 12);
    let f = |t: &Tape, v: &[Var]| t.mul_broadcast(v[0], v[1]).unwrap();
    for factor in [per_channel, per_pos] {
        fd_check("mul_broadcast", &[x.clone(), factor.clone()], 0, &f);
        fd_check("mul_broadcast", &[x.clone(), factor], 1, &f);
    }

    let f = |t: &Tape, v: &[Var]| t.add(v[0], v[1]).unwrap();
    fd_check("add", &[x.clone(), y.clone()], 0, &f);
    fd_check("add", &[x.clone(), y.clone()], 1, &f);
    let f = |t: &Tape, v: &[Var]| t.mul(v[0], v[1]).unwrap();
    fd_check("mul", &[x.clone(), y.clone()], 0, &f);
    fd_check("mul", &[x.clone(), y], 1, &f);
    fd_check("scale", &[x.clone()], 0, &|t, v| t.scale(v[0], -1.7));
    fd_check("sum", &[x.clone()], 0, &|t, v| {
        let s = t.sum(v[0]);
        t.reshape(s, &[1]).unwrap()
    });
    fd_check("reshape", &[x], 0, &|t, v| t.reshape(v[0], &[4, 18]).unwrap());

    // BCE gets its own loss (it already is scalar).
    let p = Tensor::from_vec(&[5], vec![0.13, 0.42, 0.61, 0.77, 0.95]);
    let labels = [1u8, 0, 1, 1, 0];
    let tape = Tape::new();
    let pv = tape.leaf(&p.clone().requires_grad());
    let loss = tape.bce_loss(pv, &labels).unwrap();
    tape.backward(loss).unwrap();
    let analytic = tape.grad(pv).unwrap();
    let numeric = fd_gradient(
        |probe: &Tensor| {
            let tape = Tape::new();
            let pv = tape.leaf(probe);
            tape.scalar_value(tape.bce_loss(pv, &labels).unwrap())
        },
        &p,
        1e-6,
    );
    let err = max_rel_err(&analytic, numeric.data());
    assert!(err < GRAD_TOL, "bce: max relative error {err:.3e}");
}

/// Finite-difference check of the tiny model with respect to every
/// parameter tensor and the input batch. Returns the largest error seen.
pub fn tiny_model_gradient_check() -> f64 {
    let cfg = ModelConfig::tiny();
    let params = ModelParams::init(&cfg, 42).unwrap();
    let batch = probe_tensor(&[2, 1, 40], 21);
    let labels = [1u8, 0];

    let tape = Tape::new();
    let bound = bind_params(&tape, &params);
    let x = tape.leaf(&batch.clone().requires_grad());
    let p = model_forward(&tape, x, &bound, &cfg).unwrap();
    let loss = tape.bce_loss(p, &labels).unwrap();
    tape.backward(loss).unwrap();
    let analytic: Vec<Vec<f64>> = bound
        .vars()
        .iter()
        .map(|v| tape.grad(*v).expect("all parameters receive gradients"))
        .collect();
    let analytic_x = tape.grad(x).unwrap();

    let run = |replace: Option<(usize, &Tensor)>, input: &Tensor| -> f64 {
        let mut probe_params = params.clone();
        if let Some((i, t)) = replace {
            *probe_params.tensors_mut()[i] = t.clone().requires_grad();
        }
        let tape = Tape::new();
        let bound = bind_params(&tape, &probe_params);
        let x = tape.leaf(input);
        let p = model_forward(&tape, x, &bound, &cfg).unwrap();
        tape.scalar_value(tape.bce_loss(p, &labels).unwrap())
    };

    let named: Vec<(String, Tensor)> = params
        .named_tensors()
        .into_iter()
        .map(|(n, t)| (n, t.clone()))
        .collect();
    let mut worst = 0.0f64;
    for (i, (name, tensor)) in named.iter().enumerate() {
        let numeric = fd_gradient(|t: &Tensor| run(Some((i, t)), &batch), tensor, FD_STEP);
        let err = max_rel_err(&analytic[i], numeric.data());
        assert!(err < GRAD_TOL, "model wrt {name}: max relative error {err:.3e}");
        worst = worst.max(err);
    }
    let numeric_x = fd_gradient(|t: &Tensor| run(None, t), &batch, FD_STEP);
    let err = max_rel_err(&analytic_x, numeric_x.data());
    assert!(err < GRAD_TOL, "model wrt input: max relative error {err:.3e}");
    worst.max(err)
}

const TOL_SAMPLES: i64 = 10; // ±10 ms at 1000 Hz
const TRIM_S: f64 = 2.0;

fn match_counts(truth: &[i64], detected: &[i64]) -> usize {
    let mut matched = 0;
    let mut di = 0usize;
    for &t in truth {
        while di < detected.len() && detected[di] < t - TOL_SAMPLES {
            di += 1;
        }
        if di < detected.len() && (detected[di] - t).abs() <= TOL_SAMPLES {
            matched += 1;
            di += 1;
        }
    }
    matched
}

/// Pooled detector recall and precision over a synthetic cohort, scored at
/// ±10 ms against the generator's ground truth. Zero-phase filtering keeps
/// positions aligned with the raw waveform; a 300 ms boundary margin is
/// excluded from scoring.
pub fn detector_metrics(spec: &SynthSpec) -> (f64, f64) {
    let cohort = synth_cohort(spec).unwrap();
    let (mut tp_recall, mut n_truth) = (0usize, 0usize);
    let (mut tp_prec, mut n_det) = (0usize, 0usize);
    for r in &cohort.recordings {
        let fs = r.rec.fs;
        let trimmed = trim_edges(&r.rec, TRIM_S).unwrap();
        let cascade = design_bandpass(&FilterSpec::new(4, 1.0, 40.0, fs)).unwrap();
        let filtered = filter_zero_phase(&cascade, &trimmed.samples).unwrap();
        let detected: Vec<i64> = match detect_r_peaks(&filtered, fs) {
            Ok(p) => p.iter().map(|&i| i as i64).collect(),
            Err(_) => Vec::new(),
        };

        let offset = (TRIM_S * fs).round() as i64;
        let len = trimmed.samples.len() as i64;
        let margin = (0.3 * fs) as i64;
        let truth_all: Vec<i64> = r
            .truth
            .r_peaks
            .iter()
            .map(|&i| i as i64 - offset)
            .filter(|&t| t >= 0 && t < len)
            .collect();
        let truth_inner: Vec<i64> = truth_all
            .iter()
            .copied()
            .filter(|&t| t >= margin && t < len - margin)
            .collect();
        let detected_inner: Vec<i64> = detected
            .iter()
            .copied()
            .filter(|&t| t >= margin && t < len - margin)
            .collect();

        n_truth += truth_inner.len();
        tp_recall += match_counts(&truth_inner, &detected);
        n_det += detected_inner.len();
        tp_prec += match_counts(&detected_inner, &truth_all);
    }
    (
        tp_recall as f64 / n_truth as f64,
        tp_prec as f64 / n_det as f64,
    )
}
