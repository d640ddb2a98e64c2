#include "mtl/autodiff.hpp"
#include "mtl/model.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace mtl {

namespace {

double evaluate(const TapeFunction& f, const ParameterVector& theta) {
  Tape tape;
  const auto params = bind(tape, theta);
  const Var loss = f(tape, params);
  const double v = loss.value().item();
  if (!std::isfinite(v)) throw std::domain_error("grad_check: non-finite function value");
  return v;
}

}  // namespace

Vector analytic_gradient(const TapeFunction& f, const ParameterVector& theta) {
  Tape tape;
  const auto params = bind(tape, theta);
  const Var loss = f(tape, params);
  const auto grads = gradients(loss, params);
  Vector out(theta.size());
  for (std::size_t i = 0; i < grads.size(); ++i) {
    const auto& e = theta.layout().entries()[i];
    out.segment(e.offset, e.size) = grads[i].value().data();
  }
  return out;
}

Vector central_difference_gradient(const TapeFunction& f, const ParameterVector& theta, double eps,
                                   std::span<const Index> coords) {
  std::vector<Index> all;
  if (coords.empty()) {
    all.resize(static_cast<std::size_t>(theta.size()));
    for (std::size_t j = 0; j < all.size(); ++j) all[j] = static_cast<Index>(j);
    coords = all;
  }
  Vector out(static_cast<Index>(coords.size()));
  ParameterVector probe = theta;
  for (std::size_t j = 0; j < coords.size(); ++j) {
    const Index c = coords[j];
    const double x = theta.flat()[c];
    probe.flat()[c] = x + eps;
    const double up = evaluate(f, probe);
    probe.flat()[c] = x - eps;
    const double down = evaluate(f, probe);
    probe.flat()[c] = x;
    out[static_cast<Index>(j)] = (up - down) / (2.0 * eps);
  }
  return out;
}

double max_relative_error(const Vector& analytic, const Vector& numeric) {
  if (analytic.size() != numeric.size()) throw std::invalid_argument("max_relative_error: size mismatch");
  double worst = 0.0;
  for (Index j = 0; j < analytic.size(); ++j) {
    if (!std::isfinite(analytic[j]) || !std::isfinite(numeric[j])) {
      throw std::domain_error("grad_check: non-finite gradient entry");
    }
    worst = std::max(worst, std::abs(analytic[j] - numeric[j]) / std::max(1.0, std::abs(numeric[j])));
  }
  return worst;
}

double grad_check(const TapeFunction& f, const ParameterVector& theta, double eps, Index max_coords) {
  const Vector analytic = analytic_gradient(f, theta);
  std::vector<Index> coords;
  if (max_coords > 0 && max_coords < theta.size()) {
    for (Index j = 0; j < max_coords; ++j) coords.push_back(j * theta.size() / max_coords);
  } else {
    for (Index j = 0; j < theta.size(); ++j) coords.push_back(j);
  }
  const Vector numeric = central_difference_gradient(f, theta, eps, coords);
  Vector picked(numeric.size());
  for (std::size_t j = 0; j < coords.size(); ++j) picked[static_cast<Index>(j)] = analytic[coords[j]];
  return max_relative_error(picked, numeric);
}

}  // namespace mtl
