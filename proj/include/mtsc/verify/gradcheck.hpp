#pragma once

// Central finite-difference gradient checking against the autodiff engine.

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "json.hpp"
#include "mtsc/tensor.hpp"

namespace mtsc::verify {

// |ad - fd| / max(1e-8, |ad| + |fd|)
double relative_error(double autodiff, double finite_diff);

// Central differences (f(x+h) - f(x-h)) / 2h for every coordinate of every
// tensor in `params`. The tensors are perturbed in place and restored.
// Throws mtsc::Error naming the coordinate if f is not finite there.
std::vector<std::vector<double>> finite_diff_grad(const std::function<double()>& f, std::vector<Tensor> params,
                                                  double step = 1e-5);

struct GradCheckOptions {
  double step = 1e-5;
  double tolerance = 1e-4;
  // 0 checks every coordinate; otherwise a seeded sample of this many per tensor.
  std::size_t max_coords_per_param = 0;
  std::uint64_t seed = 0;
  // A failing coordinate is classed as non-smooth instead when a ReLU/abs kink
  // inside [x-h, x+h] explains it: the one-sided differences disagree by at
  // least the central discrepancy, and one of them matches autodiff within
  // `one_sided_tolerance`. Both tests use forward evaluations only.
  bool classify_kinks = true;
  double one_sided_tolerance = 1e-3;
};

struct ParamCheck {
  std::string name;
  std::size_t checked = 0;
  double max_rel_error = 0.0;
  std::vector<std::size_t> failing;
  // (autodiff, finite difference) at each failing coordinate.
  std::vector<std::pair<double, double>> failing_values;
  std::vector<std::size_t> nonsmooth;
};

struct GradCheckReport {
  std::vector<ParamCheck> params;
  double step = 0.0;
  double tolerance = 0.0;
  double max_rel_error = 0.0;  // over smooth coordinates
  std::size_t checked = 0;
  std::size_t nonsmooth = 0;
  bool pass = true;

  nlohmann::json to_json() const;
};

// Compares backward() of `loss_fn` with finite differences of the same
// function. loss_fn must be deterministic and return a scalar.
GradCheckReport gradcheck(const std::function<Tensor()>& loss_fn, const std::vector<Parameter>& params,
                          const GradCheckOptions& options = {});

}  // namespace mtsc::verify
