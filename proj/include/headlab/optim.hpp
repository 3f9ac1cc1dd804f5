#pragma once

#include "headlab/graph.hpp"

#include <functional>

namespace headlab {

// Classic heavy-ball momentum: v <- momentum * v + g; p <- p - lr * v.
struct SgdConfig {
  double learning_rate = 2e-3;
  double momentum = 0.9;
};

void sgd_step(ParameterStore& params, const SgdConfig& config);

struct GradientCheckReport {
  double max_rel_error = 0.0;
  Eigen::Index checked = 0;       // number of parameter elements compared
  std::string worst_parameter;
};

// Central-difference verification of the analytic gradients of an arbitrary
// loss over every element of every parameter in the store.
//
// `loss` must be a pure function of the current parameter values; it is
// called once with `accumulate_grads = true` (after which Parameter::grad
// holds the analytic gradient) and twice per element for the finite
// differences. Throws if the loss is not finite.
GradientCheckReport gradient_check(
    ParameterStore& params,
    const std::function<double(bool accumulate_grads)>& loss,
    double epsilon = 1e-5);

}  // namespace headlab
