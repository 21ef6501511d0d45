#pragma once

// Temporal attention blocks for multivariate series.
//
// Conv-side blocks (CtaBlock, GtaBlock) take feature maps F laid out
// [d, N] or [B, d, N] and return O = F * diag(A) with A a 1 x N gate.
// Encoder-side blocks (SelfAttention, PositionalEncoding, Encoder) take
// sequences laid out [N, d] or [B, N, d].

#include <string>
#include <vector>

#include "json.hpp"
#include "mtsc/layers.hpp"

namespace mtsc {

enum class ScalingMode { identity, learnable };
enum class AttentionKind { sa, tps };

std::string to_string(ScalingMode mode);
ScalingMode parse_scaling_mode(const std::string& text);

struct AttentionConfig {
  std::size_t d = 128;     // hidden width
  std::size_t heads = 1;   // must divide d
  std::size_t layers = 1;  // encoder depth
  double b = 1.0;          // spread floor of the pseudo-Gaussian, > 0
  ScalingMode scaling = ScalingMode::identity;
  // Exponent uses (i-j)^2 instead of |i-j|; off by default.
  bool squared_distance = false;
  std::size_t r = 16;  // GTA / CTA reduction factor
  std::size_t ff_multiplier = 4;

  void validate() const;
  nlohmann::json to_json() const;
  static AttentionConfig from_json(const nlohmann::json& j);
};

struct GateResult {
  Tensor out;        // same shape as the input
  Tensor attention;  // [1, N] or [B, 1, N]
};

// Classic temporal attention: softmax over time of W2 relu(W1 F).
class CtaBlock {
 public:
  CtaBlock(ParamBuilder b, std::size_t d, std::size_t r);
  GateResult forward(const Tensor& features) const;

  std::size_t d() const { return d_; }
  std::size_t reduced() const { return reduced_; }

  Tensor w1;  // [d/r, d]
  Tensor w2;  // [1, d/r]

 private:
  std::size_t d_, reduced_;
};

// Global temporal attention: a squeeze over channels followed by a
// bottlenecked mixing over the whole time axis, gated with a sigmoid.
// Built for one sequence length T.
class GtaBlock {
 public:
  GtaBlock(ParamBuilder b, std::size_t d, std::size_t length, std::size_t r = 16);
  GateResult forward(const Tensor& features) const;

  std::size_t length() const { return length_; }
  std::size_t reduced() const { return reduced_; }

  Tensor w1;  // [1, d]
  Tensor w2;  // [T/r, T]
  Tensor w3;  // [T, T/r]

 private:
  std::size_t d_, length_, reduced_;
};

// Everything one attention sublayer produces. For SA, `positional`,
// `sigma_hat` and `sigma` are undefined and `content` equals `attention`.
struct AttentionOutput {
  Tensor out;         // [B, N, d]
  Tensor attention;   // A,  [B, h, N, N]
  Tensor content;     // A1, [B, h, N, N]
  Tensor positional;  // A2, [B, N, N]
  Tensor sigma_hat;   // [B, N], spread towards earlier steps
  Tensor sigma;       // [B, N], spread towards later steps
};

// (|W' v_i| + b, |W v_i| + b) for values [B, N, d]; both results [B, N].
std::pair<Tensor, Tensor> tps_sigma(const Tensor& values, const Tensor& w_hat, const Tensor& w, double b);

// Row i holds exp(-dist(i, j) / (4 s^2)) where s is sigma_hat[i] for j < i and
// sigma[i] for j >= i; dist is |i-j|, or (i-j)^2 when `squared`.
// sigma_hat, sigma: [N] or [B, N]; result [N, N] or [B, N, N].
Tensor tps_pseudo_gaussian(const Tensor& sigma_hat, const Tensor& sigma, bool squared = false);

// Scaled dot-product self-attention over Q/K/V projections of the input.
// In TPS mode the content attention is averaged with the pseudo-Gaussian
// neighbourhood matrix and each row is renormalized to sum to one.
class SelfAttention {
 public:
  SelfAttention(ParamBuilder b, AttentionKind kind, const AttentionConfig& cfg);
  AttentionOutput forward(const Tensor& x) const;

  AttentionKind kind() const { return kind_; }
  const AttentionConfig& config() const { return cfg_; }

  Tensor w_q, w_k, w_v;  // [d, d], applied as x W^T
  Tensor value_bias;     // [d]
  Tensor w_sigma_hat;    // W', [1, d] (TPS only)
  Tensor w_sigma;        // W,  [1, d] (TPS only)
  Tensor log_scale;      // [h] (learnable scaling only)

 private:
  AttentionKind kind_;
  AttentionConfig cfg_;
};

// Learnable absolute position table added to the first N steps.
class PositionalEncoding {
 public:
  PositionalEncoding(ParamBuilder b, std::size_t max_length, std::size_t d);
  Tensor apply(const Tensor& x) const;
  std::size_t max_length() const { return max_length_; }

  Tensor table;  // [max_length, d]

 private:
  std::size_t max_length_;
};

// attention -> add -> layer norm -> feed-forward (ReLU) -> add -> layer norm
class EncoderLayer {
 public:
  EncoderLayer(ParamBuilder b, AttentionKind kind, const AttentionConfig& cfg);
  Tensor forward(const Tensor& x, AttentionOutput* trace = nullptr) const;

  SelfAttention attention;
  LayerNorm norm1;
  Dense ff_in, ff_out;
  LayerNorm norm2;
};

class Encoder {
 public:
  Encoder(ParamBuilder b, AttentionKind kind, const AttentionConfig& cfg);
  // When trace is given, one AttentionOutput per layer is appended.
  Tensor forward(const Tensor& x, std::vector<AttentionOutput>* trace = nullptr) const;

  AttentionKind kind() const { return kind_; }
  std::vector<EncoderLayer> layers;

 private:
  AttentionKind kind_;
};

}  // namespace mtsc
