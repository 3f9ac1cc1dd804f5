#include "headlab/optim.hpp"

#include <cmath>
#include <stdexcept>

namespace headlab {

void sgd_step(ParameterStore& params, const SgdConfig& config) {
  for (auto& p : params.all()) {
    p->velocity.flat() = config.momentum * p->velocity.flat() + p->grad.flat();
    p->value.flat() -= config.learning_rate * p->velocity.flat();
  }
}

GradientCheckReport gradient_check(
    ParameterStore& params,
    const std::function<double(bool accumulate_grads)>& loss, double epsilon) {
  if (!(epsilon > 0.0 && epsilon <= 1e-2))
    throw std::invalid_argument("gradient_check: epsilon must be in (0, 1e-2]");

  params.zero_grads();
  const double base = loss(true);
  if (!std::isfinite(base))
    throw std::runtime_error("gradient_check: loss is not finite");

  GradientCheckReport report;
  for (auto& p : params.all()) {
    for (Eigen::Index i = 0; i < p->value.size(); ++i) {
      const double saved = p->value[i];
      p->value[i] = saved + epsilon;
      const double up = loss(false);
      p->value[i] = saved - epsilon;
      const double down = loss(false);
      p->value[i] = saved;
      if (!std::isfinite(up) || !std::isfinite(down))
        throw std::runtime_error("gradient_check: loss is not finite");

      const double numeric = (up - down) / (2.0 * epsilon);
      const double analytic = p->grad[i];
      ++report.checked;
      if (std::abs(numeric) < 1e-9 && std::abs(analytic) < 1e-9) continue;
      const double rel = std::abs(analytic - numeric) /
                         std::max({std::abs(analytic), std::abs(numeric), 1e-6});
      if (rel > report.max_rel_error) {
        report.max_rel_error = rel;
        report.worst_parameter = p->name;
      }
    }
  }
  return report;
}

}  // namespace headlab
