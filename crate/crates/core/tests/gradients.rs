//! Analytic backward passes against central finite differences.

mod common;

use common::grad::*;

fn assert_layers(kinds: &[&str]) {
    let all = layer_results(SEEDS);
    let mut n = 0;
    for r in all.iter().filter(|r| kinds.contains(&r.kind.as_str())) {
        layer_verdict(r).unwrap();
        n += 1;
    }
    assert_eq!(n as u64, SEEDS * kinds.len() as u64);
}

#[test]
fn conv_backward() {
    assert_layers(&["conv2d", "conv3d"]);
}

#[test]
fn maxpool_backward() {
    assert_layers(&["maxpool2d", "maxpool3d"]);
}

#[test]
fn relu_backward() {
    assert_layers(&["relu"]);
}

#[test]
fn batchnorm_backward() {
    assert_layers(&["batchnorm-train", "batchnorm-infer"]);
}

#[test]
fn dense_and_cross_entropy_backward() {
    assert_layers(&["dense", "cross-entropy"]);
}

#[test]
fn full_architectures_on_reduced_inputs() {
    let all = architecture_results(SEEDS);
    for name in ["2DFrameCNN", "2DSeqCNN", "3DSeqCNN"] {
        let group: Vec<&CaseResult> = all.iter().filter(|r| r.kind == name).collect();
        assert_eq!(group.len() as u64, SEEDS);
        architecture_verdict(&group).unwrap_or_else(|e| panic!("{e}"));
    }
}

#[test]
fn three_layer_network_on_6x6() {
    for (seed, r) in small_network_results(SEEDS).iter().enumerate() {
        assert!(r.max_relative_error < 1e-3, "seed {seed}: {:?}", r.worst());
    }
}

#[test]
fn full_frame_cnn_at_native_resolution() {
    let r = native_frame_result();
    architecture_verdict(&[&r]).unwrap();
}
