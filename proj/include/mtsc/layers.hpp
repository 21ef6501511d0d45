#pragma once

// Parameter registry and the plain layers shared by the attention blocks and
// the classifiers.

#include <string>
#include <string_view>
#include <vector>

#include "mtsc/ops.hpp"
#include "mtsc/rng.hpp"
#include "mtsc/tensor.hpp"

namespace mtsc {

// Ordered, name-unique collection of a model's trainable parameters and its
// non-trainable buffers (batch-norm running statistics).
class ParamStore {
 public:
  Tensor add_parameter(std::string name, Tensor t);
  Tensor add_buffer(std::string name, Tensor t);

  const std::vector<Parameter>& parameters() const { return parameters_; }
  const std::vector<Parameter>& buffers() const { return buffers_; }
  std::size_t parameter_count() const;
  // Drops every parameter and buffer whose name starts with `prefix`.
  void remove_prefix(const std::string& prefix);

 private:
  void check_unique(const std::string& name) const;
  std::vector<Parameter> parameters_;
  std::vector<Parameter> buffers_;
};

// Creates parameters under a dotted name prefix, drawing initial values from a
// shared generator so construction order fixes the values.
class ParamBuilder {
 public:
  ParamBuilder(ParamStore& store, Rng& rng, std::string prefix = {})
      : store_(&store), rng_(&rng), prefix_(std::move(prefix)) {}

  ParamBuilder scope(std::string_view name) const;

  // Uniform on +-sqrt(6 / (fan_in + fan_out)).
  Tensor xavier(std::string_view name, Shape shape, std::size_t fan_in, std::size_t fan_out);
  Tensor constant(std::string_view name, Shape shape, double value);
  Tensor buffer(std::string_view name, Shape shape, double value);

 private:
  std::string full(std::string_view name) const;
  ParamStore* store_;
  Rng* rng_;
  std::string prefix_;
};

class Dense {
 public:
  Dense() = default;
  Dense(ParamBuilder b, std::size_t in, std::size_t out, bool bias = true);
  // [..., in] -> [..., out]
  Tensor forward(const Tensor& x) const { return ops::linear(x, weight, bias); }

  Tensor weight;  // [out, in]
  Tensor bias;    // [out] or undefined
};

class Conv1d {
 public:
  Conv1d() = default;
  Conv1d(ParamBuilder b, std::size_t in_channels, std::size_t out_channels, std::size_t kernel);
  Tensor forward(const Tensor& x) const { return ops::conv1d(x, weight, bias); }

  Tensor weight;  // [out, in, k]
  Tensor bias;    // [out]
};

class BatchNorm1d {
 public:
  BatchNorm1d() = default;
  BatchNorm1d(ParamBuilder b, std::size_t channels);
  Tensor forward(const Tensor& x, bool training) const;

  Tensor gamma, beta;
  // Buffers; batch_norm1d updates them through the handle.
  mutable Tensor running_mean, running_var;
};

class LayerNorm {
 public:
  LayerNorm() = default;
  LayerNorm(ParamBuilder b, std::size_t features);
  Tensor forward(const Tensor& x) const { return ops::layer_norm(x, gamma, beta, 1e-5); }

  Tensor gamma, beta;
};

}  // namespace mtsc
