mod common;

use common::gradcheck::{self, PrimitiveResult, TOL};

fn assert_close(r: PrimitiveResult) {
    assert!(
        r.worst < TOL,
        "{}: max relative error {:.3e}",
        r.name,
        r.worst
    );
}

#[test]
fn conv1d() {
    assert_close(gradcheck::conv1d());
}

#[test]
fn maxpool() {
    assert_close(gradcheck::maxpool());
}

#[test]
fn avgpool() {
    assert_close(gradcheck::avgpool());
}

#[test]
fn batchnorm() {
    assert_close(gradcheck::batchnorm());
}

#[test]
fn leaky_relu() {
    assert_close(gradcheck::leaky_relu());
}

#[test]
fn linear() {
    assert_close(gradcheck::linear());
}

#[test]
fn gru_step() {
    assert_close(gradcheck::gru_step());
}

#[test]
fn softmax() {
    assert_close(gradcheck::softmax());
}

#[test]
fn sinc_kernels() {
    assert_close(gradcheck::sinc_kernels());
}

#[test]
fn p2s_loss() {
    assert_close(gradcheck::p2s_loss());
}

#[test]
fn elementwise() {
    assert_close(gradcheck::elementwise());
}

#[test]
fn channel_ops() {
    assert_close(gradcheck::channel_ops());
}
