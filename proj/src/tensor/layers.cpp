#include "mtsc/layers.hpp"

#include <cmath>

#include "mtsc/errors.hpp"

namespace mtsc {

void ParamStore::check_unique(const std::string& name) const {
  for (const auto* list : {&parameters_, &buffers_})
    for (const auto& p : *list)
      if (p.name == name) throw UsageError("duplicate parameter name '" + name + "'");
}

Tensor ParamStore::add_parameter(std::string name, Tensor t) {
  check_unique(name);
  t.set_requires_grad(true);
  parameters_.push_back({std::move(name), t});
  return t;
}

Tensor ParamStore::add_buffer(std::string name, Tensor t) {
  check_unique(name);
  buffers_.push_back({std::move(name), t});
  return t;
}

std::size_t ParamStore::parameter_count() const {
  std::size_t n = 0;
  for (const auto& p : parameters_) n += p.tensor.numel();
  return n;
}

void ParamStore::remove_prefix(const std::string& prefix) {
  auto drop = [&](std::vector<Parameter>& list) {
    std::erase_if(list, [&](const Parameter& p) { return p.name.rfind(prefix, 0) == 0; });
  };
  drop(parameters_);
  drop(buffers_);
}

ParamBuilder ParamBuilder::scope(std::string_view name) const { return ParamBuilder(*store_, *rng_, full(name)); }

std::string ParamBuilder::full(std::string_view name) const {
  return prefix_.empty() ? std::string(name) : prefix_ + "." + std::string(name);
}

Tensor ParamBuilder::xavier(std::string_view name, Shape shape, std::size_t fan_in, std::size_t fan_out) {
  const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = rng_->uniform(-limit, limit);
  return store_->add_parameter(full(name), Tensor(std::move(shape), std::move(v)));
}

Tensor ParamBuilder::constant(std::string_view name, Shape shape, double value) {
  return store_->add_parameter(full(name), Tensor::full(std::move(shape), value));
}

Tensor ParamBuilder::buffer(std::string_view name, Shape shape, double value) {
  return store_->add_buffer(full(name), Tensor::full(std::move(shape), value));
}

Dense::Dense(ParamBuilder b, std::size_t in, std::size_t out, bool with_bias) {
  weight = b.xavier("weight", {out, in}, in, out);
  if (with_bias) bias = b.constant("bias", {out}, 0.0);
}

Conv1d::Conv1d(ParamBuilder b, std::size_t in_channels, std::size_t out_channels, std::size_t kernel) {
  weight = b.xavier("weight", {out_channels, in_channels, kernel}, in_channels * kernel, out_channels * kernel);
  bias = b.constant("bias", {out_channels}, 0.0);
}

BatchNorm1d::BatchNorm1d(ParamBuilder b, std::size_t channels) {
  gamma = b.constant("gamma", {channels}, 1.0);
  beta = b.constant("beta", {channels}, 0.0);
  running_mean = b.buffer("running_mean", {channels}, 0.0);
  running_var = b.buffer("running_var", {channels}, 1.0);
}

Tensor BatchNorm1d::forward(const Tensor& x, bool training) const {
  return ops::batch_norm1d(x, gamma, beta, running_mean, running_var,
                           training ? ops::NormMode::train : ops::NormMode::eval);
}

LayerNorm::LayerNorm(ParamBuilder b, std::size_t features) {
  gamma = b.constant("gamma", {features}, 1.0);
  beta = b.constant("beta", {features}, 0.0);
}

}  // namespace mtsc
