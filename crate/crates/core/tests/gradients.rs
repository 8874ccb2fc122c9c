//! Finite-difference gradient checks for every differentiable operation and
//! for the full tiny model, against the independent central-difference
//! oracle.

mod common;

use common::{fd_check, probe_tensor};
use ecgcbam::{Tape, Var};

#[test]
fn conv1d_gradients() {
    let x = probe_tensor(&[2, 3, 11], 1);
    let w = probe_tensor(&[4, 3, 5], 2);
    let b = probe_tensor(&[4], 3);
    for (stride, padding) in [(1, 0), (1, 2), (2, 1)] {
        let f = move |t: &Tape, v: &[Var]| t.conv1d(v[0], v[1], v[2], stride, padding).unwrap();
        for wrt in 0..3 {
            fd_check(
                &format!("conv1d s{stride} p{padding}"),
                &[x.clone(), w.clone(), b.clone()],
                wrt,
                &f,
            );
        }
    }
}

#[test]
fn dense_gradients() {
    let x = probe_tensor(&[3, 5], 1);
    let w = probe_tensor(&[4, 5], 2);
    let b = probe_tensor(&[4], 3);
    let f = |t: &Tape, v: &[Var]| t.dense(v[0], v[1], v[2]).unwrap();
    for wrt in 0..3 {
        fd_check("dense", &[x.clone(), w.clone(), b.clone()], wrt, &f);
    }
}

#[test]
fn elementwise_and_pooling_gradients() {
    let x = probe_tensor(&[2, 3, 12], 5);
    fd_check("relu", &[x.clone()], 0, &|t, v| t.relu(v[0]));
    fd_check("sigmoid", &[x.clone()], 0, &|t, v| t.sigmoid(v[0]));
    fd_check("maxpool1d", &[x.clone()], 0, &|t, v| t.maxpool1d(v[0], 3, 2).unwrap());
    fd_check("avgpool1d", &[x.clone()], 0, &|t, v| t.avgpool1d(v[0], 2, 2).unwrap());
    fd_check("global_avgpool_w", &[x.clone()], 0, &|t, v| t.global_avgpool_w(v[0]).unwrap());
    fd_check("global_maxpool_w", &[x.clone()], 0, &|t, v| t.global_maxpool_w(v[0]).unwrap());
    fd_check("channel_avg", &[x.clone()], 0, &|t, v| t.channel_avg(v[0]).unwrap());
    fd_check("channel_max", &[x], 0, &|t, v| t.channel_max(v[0]).unwrap());
}

/// The whole per-op suite in one go (attention application, concatenation,
/// arithmetic plumbing, BCE) plus everything above.
#[test]
fn full_operation_suite() {
    common::run_op_gradient_suite();
}

#[test]
fn tiny_model_end_to_end_gradients() {
    let start = std::time::Instant::now();
    let worst = common::tiny_model_gradient_check();
    println!(
        "tiny model gradients: worst relative error {worst:.3e} in {:.2} s",
        start.elapsed().as_secs_f64()
    );
}

/// The engine's convolution against the oracle's triple loop.
#[test]
fn conv1d_matches_naive_reference() {
    for (salt, (stride, padding)) in [(1, 0), (1, 3), (2, 1), (3, 2)].into_iter().enumerate() {
        let x = probe_tensor(&[3, 4, 17], salt);
        let k = probe_tensor(&[5, 4, 7], salt + 40);
        let b = probe_tensor(&[5], salt + 80);
        let expected = ecgcbam_oracles::conv1d_naive(&x, &k, &b, stride, padding);

        let tape = Tape::new();
        let xv = tape.leaf(&x);
        let kv = tape.leaf(&k);
        let bv = tape.leaf(&b);
        let y = tape.conv1d(xv, kv, bv, stride, padding).unwrap();
        assert_eq!(tape.shape(y), expected.shape());
        for (a, e) in tape.data(y).iter().zip(expected.data()) {
            assert!((a - e).abs() < 1e-12, "conv mismatch: {a} vs {e}");
        }
    }
}
