#include "mtsc/attention.hpp"

#include <algorithm>
#include <cmath>

#include "mtsc/errors.hpp"

namespace mtsc {

std::string to_string(ScalingMode mode) { return mode == ScalingMode::identity ? "identity" : "learnable"; }

ScalingMode parse_scaling_mode(const std::string& text) {
  if (text == "identity") return ScalingMode::identity;
  if (text == "learnable" || text == "learnable-scalar") return ScalingMode::learnable;
  throw UsageError("unknown scaling mode '" + text + "' (expected identity or learnable)");
}

void AttentionConfig::validate() const {
  if (d == 0) throw UsageError("attention width d must be positive");
  if (heads == 0 || d % heads != 0)
    throw UsageError("head count " + std::to_string(heads) + " must divide d = " + std::to_string(d));
  if (layers == 0) throw UsageError("encoder needs at least one layer");
  if (!(b > 0.0) || !std::isfinite(b)) throw UsageError("pseudo-Gaussian bias b must be positive and finite");
  if (r == 0) throw UsageError("reduction factor r must be positive");
  if (ff_multiplier == 0) throw UsageError("feed-forward multiplier must be positive");
}

nlohmann::json AttentionConfig::to_json() const {
  return {{"d", d},
          {"heads", heads},
          {"layers", layers},
          {"b", b},
          {"scaling", to_string(scaling)},
          {"squared_distance", squared_distance},
          {"r", r},
          {"ff_multiplier", ff_multiplier}};
}

AttentionConfig AttentionConfig::from_json(const nlohmann::json& j) {
  AttentionConfig c;
  c.d = j.value("d", c.d);
  c.heads = j.value("heads", c.heads);
  c.layers = j.value("layers", c.layers);
  c.b = j.value("b", c.b);
  c.scaling = parse_scaling_mode(j.value("scaling", to_string(c.scaling)));
  c.squared_distance = j.value("squared_distance", c.squared_distance);
  c.r = j.value("r", c.r);
  c.ff_multiplier = j.value("ff_multiplier", c.ff_multiplier);
  c.validate();
  return c;
}

namespace {

// Lifts [a, b] to [1, a, b]; returns whether the caller must squeeze back.
std::pair<Tensor, bool> batched(const Tensor& x, const char* what) {
  if (x.rank() == 3) return {x, false};
  if (x.rank() == 2) return {ops::reshape(x, {1, x.size(0), x.size(1)}), true};
  throw DimensionError(std::string(what) + ": expected a rank-2 or rank-3 input, got " + shape_str(x.shape()));
}

Tensor squeeze0(const Tensor& t) {
  Shape s(t.shape().begin() + 1, t.shape().end());
  return ops::reshape(t, s);
}

}  // namespace

// ------------------------------------------------------------------------ CTA

CtaBlock::CtaBlock(ParamBuilder b, std::size_t d, std::size_t r) : d_(d), reduced_(std::max<std::size_t>(1, d / r)) {
  if (d == 0 || r == 0) throw UsageError("CTA block needs positive d and r");
  w1 = b.xavier("w1", {reduced_, d}, d, reduced_);
  w2 = b.xavier("w2", {1, reduced_}, reduced_, 1);
}

GateResult CtaBlock::forward(const Tensor& features) const {
  auto [f, squeeze] = batched(features, "CTA");
  if (f.size(1) != d_)
    throw DimensionError("CTA block built for d = " + std::to_string(d_) + ", got input " + shape_str(features.shape()));
  Tensor hidden = ops::relu(ops::matmul(w1, f));                 // [B, d/r, N]
  Tensor attention = ops::softmax(ops::matmul(w2, hidden), -1);  // [B, 1, N]
  Tensor out = ops::mul(f, attention);
  if (squeeze) return {squeeze0(out), squeeze0(attention)};
  return {out, attention};
}

// ------------------------------------------------------------------------ GTA

GtaBlock::GtaBlock(ParamBuilder b, std::size_t d, std::size_t length, std::size_t r)
    : d_(d), length_(length), reduced_(std::max<std::size_t>(1, r ? length / r : 0)) {
  if (d == 0 || length == 0 || r == 0) throw UsageError("GTA block needs positive d, T and r");
  w1 = b.xavier("w1", {1, d}, d, 1);
  w2 = b.xavier("w2", {reduced_, length}, length, reduced_);
  w3 = b.xavier("w3", {length, reduced_}, reduced_, length);
}

GateResult GtaBlock::forward(const Tensor& features) const {
  auto [f, squeeze] = batched(features, "GTA");
  if (f.size(1) != d_)
    throw DimensionError("GTA block built for d = " + std::to_string(d_) + ", got input " + shape_str(features.shape()));
  if (f.size(2) != length_)
    throw DimensionError("GTA block was built for sequence length " + std::to_string(length_) + " but got " +
                         std::to_string(f.size(2)) + "; rebuild the block for this length or pad inputs to " +
                         std::to_string(length_));
  Tensor squeezed = ops::relu(ops::matmul(w1, f));                       // A1: [B, 1, T]
  Tensor bottleneck = ops::relu(ops::linear(squeezed, w2));              // [B, 1, T/r]
  Tensor attention = ops::sigmoid(ops::linear(bottleneck, w3));          // [B, 1, T]
  Tensor out = ops::mul(f, attention);
  if (squeeze) return {squeeze0(out), squeeze0(attention)};
  return {out, attention};
}

// ------------------------------------------------------------------ SA / TPS

std::pair<Tensor, Tensor> tps_sigma(const Tensor& values, const Tensor& w_hat, const Tensor& w, double b) {
  Shape s = values.shape();
  s.pop_back();
  Tensor sigma_hat = ops::add_scalar(ops::abs(ops::reshape(ops::linear(values, w_hat), s)), b);
  Tensor sigma = ops::add_scalar(ops::abs(ops::reshape(ops::linear(values, w), s)), b);
  return {sigma_hat, sigma};
}

Tensor tps_pseudo_gaussian(const Tensor& sigma_hat, const Tensor& sigma, bool squared) {
  if (sigma_hat.shape() != sigma.shape() || sigma.rank() < 1 || sigma.rank() > 2)
    throw DimensionError("pseudo-Gaussian spreads must share a [N] or [B, N] shape, got " +
                         shape_str(sigma_hat.shape()) + " and " + shape_str(sigma.shape()));
  const std::size_t n = sigma.size(-1);
  std::vector<double> before(n * n, 0.0), after(n * n, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      double dist = std::fabs(static_cast<double>(i) - static_cast<double>(j));
      if (squared) dist *= dist;
      (j < i ? before : after)[i * n + j] = dist;
    }
  Tensor dist_before({n, n}, std::move(before));
  Tensor dist_after({n, n}, std::move(after));

  Shape col = sigma.shape();
  col.push_back(1);
  // 1 / (4 s^2) as a column so that row i uses its own spread.
  auto rate = [&](const Tensor& s) {
    return ops::reshape(ops::div(Tensor::scalar(0.25), ops::square(s)), col);
  };
  Tensor exponent = ops::add(ops::mul(dist_before, rate(sigma_hat)), ops::mul(dist_after, rate(sigma)));
  return ops::exp(ops::neg(exponent));
}

SelfAttention::SelfAttention(ParamBuilder b, AttentionKind kind, const AttentionConfig& cfg) : kind_(kind), cfg_(cfg) {
  cfg_.validate();
  const std::size_t d = cfg_.d;
  w_q = b.xavier("w_q", {d, d}, d, d);
  w_k = b.xavier("w_k", {d, d}, d, d);
  w_v = b.xavier("w_v", {d, d}, d, d);
  value_bias = b.constant("value_bias", {d}, 0.0);
  if (kind_ == AttentionKind::tps) {
    w_sigma_hat = b.xavier("w_sigma_hat", {1, d}, d, 1);
    w_sigma = b.xavier("w_sigma", {1, d}, d, 1);
    if (cfg_.scaling == ScalingMode::learnable) log_scale = b.constant("log_scale", {cfg_.heads}, 0.0);
  }
}

AttentionOutput SelfAttention::forward(const Tensor& input) const {
  auto [x, squeeze] = batched(input, "self-attention");
  const std::size_t B = x.size(0), n = x.size(1), d = cfg_.d, h = cfg_.heads, dh = d / h;
  if (x.size(2) != d)
    throw DimensionError("self-attention built for d = " + std::to_string(d) + ", got input " +
                         shape_str(input.shape()));

  auto split = [&](const Tensor& t) { return ops::transpose(ops::reshape(t, {B, n, h, dh}), 1, 2); };
  Tensor q = ops::linear(x, w_q);
  Tensor k = ops::linear(x, w_k);
  Tensor v = ops::linear(x, w_v, value_bias);  // [B, N, d]

  Tensor logits = ops::scale(ops::matmul(split(q), ops::transpose(split(k), -1, -2)), 1.0 / std::sqrt(double(dh)));
  Tensor base = ops::softmax(logits, -1);  // [B, h, N, N]

  AttentionOutput res;
  if (kind_ == AttentionKind::sa) {
    res.content = base;
    res.attention = base;
  } else {
    Tensor content = base;
    if (log_scale.defined()) content = ops::mul(base, ops::reshape(ops::exp(log_scale), {h, 1, 1}));
    auto [sigma_hat, sigma] = tps_sigma(v, w_sigma_hat, w_sigma, cfg_.b);
    Tensor positional = tps_pseudo_gaussian(sigma_hat, sigma, cfg_.squared_distance);  // [B, N, N]
    // The halving cancels under the row normalization.
    Tensor combined = ops::scale(ops::add(content, ops::reshape(positional, {B, 1, n, n})), 0.5);
    res.attention = ops::div(combined, ops::sum(combined, -1, true));
    res.content = content;
    res.positional = positional;
    res.sigma_hat = sigma_hat;
    res.sigma = sigma;
  }
  Tensor out = ops::matmul(res.attention, split(v));             // [B, h, N, dh]
  res.out = ops::reshape(ops::transpose(out, 1, 2), {B, n, d});  // [B, N, d]
  if (squeeze) {
    res.out = squeeze0(res.out);
    res.attention = squeeze0(res.attention);
    res.content = squeeze0(res.content);
    if (res.positional.defined()) {
      res.positional = squeeze0(res.positional);
      res.sigma_hat = squeeze0(res.sigma_hat);
      res.sigma = squeeze0(res.sigma);
    }
  }
  return res;
}

// ------------------------------------------------------------------------- PE

PositionalEncoding::PositionalEncoding(ParamBuilder b, std::size_t max_length, std::size_t d)
    : max_length_(max_length) {
  if (max_length == 0 || d == 0) throw UsageError("positional table needs positive length and width");
  table = b.xavier("table", {max_length, d}, max_length, d);
}

Tensor PositionalEncoding::apply(const Tensor& x) const {
  if (x.rank() < 2 || x.size(-1) != table.size(1))
    throw DimensionError("positional encoding of width " + std::to_string(table.size(1)) + " cannot apply to " +
                         shape_str(x.shape()));
  const std::size_t n = x.size(-2);
  if (n > max_length_)
    throw CapacityError("sequence length " + std::to_string(n) + " exceeds the positional table capacity " +
                        std::to_string(max_length_));
  return ops::add(x, ops::slice(table, 0, 0, n));
}

// -------------------------------------------------------------------- encoder

EncoderLayer::EncoderLayer(ParamBuilder b, AttentionKind kind, const AttentionConfig& cfg)
    : attention(b.scope("attention"), kind, cfg),
      norm1(b.scope("norm1"), cfg.d),
      ff_in(b.scope("ff_in"), cfg.d, cfg.d * cfg.ff_multiplier),
      ff_out(b.scope("ff_out"), cfg.d * cfg.ff_multiplier, cfg.d),
      norm2(b.scope("norm2"), cfg.d) {}

Tensor EncoderLayer::forward(const Tensor& x, AttentionOutput* trace) const {
  AttentionOutput att = attention.forward(x);
  Tensor mid = norm1.forward(ops::add(x, att.out));
  Tensor ff = ff_out.forward(ops::relu(ff_in.forward(mid)));
  if (trace) *trace = std::move(att);
  return norm2.forward(ops::add(mid, ff));
}

Encoder::Encoder(ParamBuilder b, AttentionKind kind, const AttentionConfig& cfg) : kind_(kind) {
  cfg.validate();
  layers.reserve(cfg.layers);
  for (std::size_t i = 0; i < cfg.layers; ++i) layers.emplace_back(b.scope("layer" + std::to_string(i)), kind, cfg);
}

Tensor Encoder::forward(const Tensor& x, std::vector<AttentionOutput>* trace) const {
  Tensor h = x;
  for (const auto& layer : layers) {
    if (trace) {
      trace->emplace_back();
      h = layer.forward(h, &trace->back());
    } else {
      h = layer.forward(h);
    }
  }
  return h;
}

}  // namespace mtsc
