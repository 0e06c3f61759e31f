mod common;

#[test]
fn conv3d_backward_matches_finite_differences() {
    common::gradcheck::conv3d_backward_matches_finite_differences();
}

#[test]
fn transposed_conv3d_backward_matches_finite_differences() {
    common::gradcheck::transposed_conv3d_backward_matches_finite_differences();
}

#[test]
fn instance_norm_backward_matches_finite_differences() {
    common::gradcheck::instance_norm_backward_matches_finite_differences();
}

#[test]
fn leaky_relu_backward_matches_finite_differences() {
    common::gradcheck::leaky_relu_backward_matches_finite_differences();
}

#[test]
fn kd_loss_gradient_matches_finite_differences() {
    common::gradcheck::kd_loss_gradient_matches_finite_differences();
}

#[test]
fn seg_loss_gradient_matches_finite_differences() {
    common::gradcheck::seg_loss_gradient_matches_finite_differences();
}

#[test]
fn network_backward_matches_finite_differences_for_every_layer() {
    common::gradcheck::network_backward_matches_finite_differences_for_every_layer();
}
