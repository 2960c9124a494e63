//! Finite-difference verification of every differentiable operation.

mod common;

#[test]
fn conv2d_5x5_valid() {
    common::case_conv_5x5_valid();
}

#[test]
fn conv2d_k3_s1_p0() {
    common::case_conv_k3_s1_p0();
}

#[test]
fn conv2d_k3_s2_p1() {
    common::case_conv_k3_s2_p1();
}

#[test]
fn conv_transpose2d() {
    common::case_conv_transpose();
}

#[test]
fn maxpool2x2() {
    common::case_maxpool();
}

#[test]
fn maxpool2x2_with_tie() {
    common::case_maxpool_tie();
}

#[test]
fn relu() {
    common::case_relu();
}

#[test]
fn sigmoid() {
    common::case_sigmoid();
}

#[test]
fn softmax() {
    common::case_softmax();
}

#[test]
fn dense() {
    common::case_dense();
}

#[test]
fn dropout() {
    common::case_dropout();
}

#[test]
fn cross_entropy() {
    common::case_cross_entropy();
}

#[test]
fn softmax_cross_entropy() {
    common::case_softmax_cross_entropy();
}

#[test]
fn add() {
    common::case_add();
}

#[test]
fn sub() {
    common::case_sub();
}

#[test]
fn mul() {
    common::case_mul();
}

#[test]
fn neg() {
    common::case_neg();
}

#[test]
fn scale() {
    common::case_scale();
}

#[test]
fn add_scalar() {
    common::case_add_scalar();
}

#[test]
fn clamp() {
    common::case_clamp();
}

#[test]
fn log() {
    common::case_log();
}

#[test]
fn mean() {
    common::case_mean();
}

#[test]
fn add_n() {
    common::case_add_n();
}

#[test]
fn reshape() {
    common::case_reshape();
}

#[test]
fn concat_flat() {
    common::case_concat_flat();
}

#[test]
fn concat_channels() {
    common::case_concat_channels();
}

#[test]
fn global_avg_pool() {
    common::case_global_avg_pool();
}

#[test]
fn conv_pool_dense_chain() {
    common::case_chain();
}

// Composite losses: the ops above are checked exhaustively, so these
// verify the assembled networks through a subset of parameters whose
// gradient paths traverse every layer.

#[test]
fn gan_generator_objective() {
    common::case_gan_generator_objective();
}

#[test]
fn gan_discriminator_objective() {
    common::case_gan_discriminator_objective();
}

#[test]
fn end_to_end_classifier_loss() {
    // 36 is the smallest patch the three conv/pool stages admit.
    common::case_end_to_end_classifier(36, 2);
}
