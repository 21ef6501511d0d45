#include "mtsc/verify/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "mtsc/errors.hpp"
#include "mtsc/rng.hpp"

namespace mtsc::verify {

double relative_error(double autodiff, double finite_diff) {
  return std::fabs(autodiff - finite_diff) / std::max(1e-8, std::fabs(autodiff) + std::fabs(finite_diff));
}

namespace {

struct Probe {
  double up, down;
};

Probe evaluate(const std::function<double()>& f, Tensor& t, std::size_t i, double step) {
  auto d = t.mutable_data();
  const double original = d[i];
  d[i] = original + step;
  const double up = f();
  d[i] = original - step;
  const double down = f();
  d[i] = original;
  if (!std::isfinite(up) || !std::isfinite(down))
    throw Error("finite differences: non-finite function value at coordinate " + std::to_string(i));
  return {up, down};
}

double probe(const std::function<double()>& f, Tensor& t, std::size_t i, double step) {
  Probe p = evaluate(f, t, i, step);
  return (p.up - p.down) / (2.0 * step);
}

}  // namespace

std::vector<std::vector<double>> finite_diff_grad(const std::function<double()>& f, std::vector<Tensor> params,
                                                  double step) {
  std::vector<std::vector<double>> grads;
  grads.reserve(params.size());
  for (std::size_t p = 0; p < params.size(); ++p) {
    std::vector<double> g(params[p].numel());
    for (std::size_t i = 0; i < g.size(); ++i) {
      try {
        g[i] = probe(f, params[p], i, step);
      } catch (const Error&) {
        throw Error("finite differences: non-finite function value at tensor " + std::to_string(p) + ", coordinate " +
                    std::to_string(i));
      }
    }
    grads.push_back(std::move(g));
  }
  return grads;
}

nlohmann::json GradCheckReport::to_json() const {
  nlohmann::json j;
  j["step"] = step;
  j["tolerance"] = tolerance;
  j["max_rel_error"] = max_rel_error;
  j["checked"] = checked;
  j["nonsmooth"] = nonsmooth;
  j["pass"] = pass;
  auto& arr = j["params"] = nlohmann::json::array();
  for (const auto& p : params)
    arr.push_back({{"name", p.name},
                   {"checked", p.checked},
                   {"max_rel_error", p.max_rel_error},
                   {"failing", p.failing},
                   {"failing_values", p.failing_values},
                   {"nonsmooth", p.nonsmooth}});
  return j;
}

GradCheckReport gradcheck(const std::function<Tensor()>& loss_fn, const std::vector<Parameter>& params,
                          const GradCheckOptions& options) {
  GradCheckReport report;
  report.step = options.step;
  report.tolerance = options.tolerance;

  for (const auto& p : params) {
    Tensor t = p.tensor;
    t.zero_grad();
  }
  Tensor loss = loss_fn();
  backward(loss);
  const double centre = loss.item();

  auto value = [&]() {
    NoGradGuard guard;
    return loss_fn().item();
  };

  Rng rng(options.seed);
  for (const auto& p : params) {
    Tensor t = p.tensor;
    ParamCheck check;
    check.name = p.name;
    std::vector<double> analytic(t.numel(), 0.0);
    if (t.has_grad()) std::copy(t.grad().begin(), t.grad().end(), analytic.begin());

    std::vector<std::size_t> coords(t.numel());
    std::iota(coords.begin(), coords.end(), 0);
    if (options.max_coords_per_param && coords.size() > options.max_coords_per_param) {
      for (std::size_t i = 0; i < options.max_coords_per_param; ++i)
        std::swap(coords[i], coords[i + rng.below(coords.size() - i)]);
      coords.resize(options.max_coords_per_param);
      std::sort(coords.begin(), coords.end());
    }
    for (auto i : coords) {
      Probe pr;
      try {
        pr = evaluate(value, t, i, options.step);
      } catch (const Error&) {
        throw Error("gradcheck: non-finite loss while probing " + p.name + "[" + std::to_string(i) + "]");
      }
      const double h = options.step;
      const double numeric = (pr.up - pr.down) / (2.0 * h);
      const double err = relative_error(analytic[i], numeric);
      ++check.checked;
      if (err < options.tolerance) {
        check.max_rel_error = std::max(check.max_rel_error, err);
        continue;
      }
      if (options.classify_kinks) {
        const double forward = (pr.up - centre) / h, backward_diff = (centre - pr.down) / h;
        const bool split = std::fabs(forward - backward_diff) >= std::fabs(analytic[i] - numeric);
        const bool one_side = std::min(relative_error(analytic[i], forward), relative_error(analytic[i], backward_diff)) <
                              options.one_sided_tolerance;
        if (split && one_side) {
          check.nonsmooth.push_back(i);
          continue;
        }
      }
      check.max_rel_error = std::max(check.max_rel_error, err);
      check.failing.push_back(i);
      check.failing_values.emplace_back(analytic[i], numeric);
    }
    report.checked += check.checked;
    report.nonsmooth += check.nonsmooth.size();
    report.max_rel_error = std::max(report.max_rel_error, check.max_rel_error);
    if (!check.failing.empty()) report.pass = false;
    report.params.push_back(std::move(check));
  }
  return report;
}

}  // namespace mtsc::verify
