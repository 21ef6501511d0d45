#include "mtsc/verify/oracle.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace mtsc::oracle {

namespace {

double relu(double x) { return x > 0.0 ? x : 0.0; }
double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

// O = F diag(A) for F [d x N] and A [1 x N].
Matrix gate(const Matrix& f, const Matrix& a) {
  Matrix o(f.rows, f.cols);
  for (std::size_t c = 0; c < f.rows; ++c)
    for (std::size_t t = 0; t < f.cols; ++t) o(c, t) = f(c, t) * a(0, t);
  return o;
}

Result cta(const Weights& w, const Matrix& f) {
  const std::size_t d = f.rows, n = f.cols, red = w.w1.rows;
  Matrix logits(1, n);
  // Each time step is scored from its own feature vector only.
  for (std::size_t t = 0; t < n; ++t) {
    double score = 0.0;
    for (std::size_t r = 0; r < red; ++r) {
      double hidden = 0.0;
      for (std::size_t c = 0; c < d; ++c) hidden += w.w1(r, c) * f(c, t);
      score += w.w2(0, r) * relu(hidden);
    }
    logits(0, t) = score;
  }
  double mx = *std::max_element(logits.v.begin(), logits.v.end());
  double total = 0.0;
  for (std::size_t t = 0; t < n; ++t) total += std::exp(logits(0, t) - mx);
  Result res;
  res.attention = Matrix(1, n);
  for (std::size_t t = 0; t < n; ++t) res.attention(0, t) = std::exp(logits(0, t) - mx) / total;
  res.out = gate(f, res.attention);
  return res;
}

Result gta(const Weights& w, const Matrix& f) {
  const std::size_t d = f.rows, n = f.cols, red = w.w2.rows;
  std::vector<double> squeezed(n);
  for (std::size_t t = 0; t < n; ++t) {
    double s = 0.0;
    for (std::size_t c = 0; c < d; ++c) s += w.w1(0, c) * f(c, t);
    squeezed[t] = relu(s);
  }
  std::vector<double> bottleneck(red);
  for (std::size_t r = 0; r < red; ++r) {
    double s = 0.0;
    for (std::size_t t = 0; t < n; ++t) s += w.w2(r, t) * squeezed[t];
    bottleneck[r] = relu(s);
  }
  Result res;
  res.attention = Matrix(1, n);
  for (std::size_t t = 0; t < n; ++t) {
    double s = 0.0;
    for (std::size_t r = 0; r < red; ++r) s += w.w3(t, r) * bottleneck[r];
    res.attention(0, t) = sigmoid(s);
  }
  res.out = gate(f, res.attention);
  return res;
}

// Row vectors q_i = W x_i (+ bias).
Matrix project(const Matrix& w, const Matrix& x, const std::vector<double>* bias) {
  const std::size_t n = x.rows, d = w.rows;
  Matrix out(n, d);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t o = 0; o < d; ++o) {
      double s = bias ? (*bias)[o] : 0.0;
      for (std::size_t c = 0; c < x.cols; ++c) s += w(o, c) * x(i, c);
      out(i, o) = s;
    }
  return out;
}

Result self_attention(const Weights& w, const Matrix& x, bool tps) {
  const std::size_t n = x.rows, d = w.w_q.rows, h = w.heads, dh = d / h;
  Matrix q = project(w.w_q, x, nullptr);
  Matrix k = project(w.w_k, x, nullptr);
  Matrix v = project(w.w_v, x, w.value_bias.empty() ? nullptr : &w.value_bias);

  Result res;
  res.out = Matrix(n, d);
  res.attention = Matrix(h * n, n);
  res.content = Matrix(h * n, n);

  if (tps) {
    res.sigma_hat.resize(n);
    res.sigma.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
      double sh = 0.0, s = 0.0;
      for (std::size_t c = 0; c < d; ++c) {
        sh += w.w_sigma_hat[c] * v(i, c);
        s += w.w_sigma[c] * v(i, c);
      }
      res.sigma_hat[i] = std::fabs(sh) + w.b;
      res.sigma[i] = std::fabs(s) + w.b;
    }
    res.positional = Matrix(n, n);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j) {
        double dist = j < i ? double(i - j) : double(j - i);
        if (w.squared_distance) dist *= dist;
        double spread = j < i ? res.sigma_hat[i] : res.sigma[i];
        res.positional(i, j) = std::exp(-dist / (4.0 * spread * spread));
      }
  }

  for (std::size_t head = 0; head < h; ++head) {
    const std::size_t off = head * dh;
    for (std::size_t i = 0; i < n; ++i) {
      std::vector<double> logits(n);
      for (std::size_t j = 0; j < n; ++j) {
        double s = 0.0;
        for (std::size_t c = 0; c < dh; ++c) s += q(i, off + c) * k(j, off + c);
        logits[j] = s / std::sqrt(double(dh));
      }
      double mx = *std::max_element(logits.begin(), logits.end());
      double total = 0.0;
      for (double l : logits) total += std::exp(l - mx);
      const double scale = w.scale.empty() ? 1.0 : w.scale[head];
      std::vector<double> row(n);
      for (std::size_t j = 0; j < n; ++j) {
        double content = scale * std::exp(logits[j] - mx) / total;
        res.content(head * n + i, j) = content;
        row[j] = tps ? (content + res.positional(i, j)) / 2.0 : content;
      }
      double row_sum = 0.0;
      for (double a : row) row_sum += a;
      for (std::size_t j = 0; j < n; ++j) res.attention(head * n + i, j) = tps ? row[j] / row_sum : row[j];
      for (std::size_t c = 0; c < dh; ++c) {
        double s = 0.0;
        for (std::size_t j = 0; j < n; ++j) s += res.attention(head * n + i, j) * v(j, off + c);
        res.out(i, off + c) = s;
      }
    }
  }
  return res;
}

}  // namespace

Result attention(Kind kind, const Weights& w, const Matrix& input) {
  switch (kind) {
    case Kind::cta:
      return cta(w, input);
    case Kind::gta:
      return gta(w, input);
    case Kind::sa:
      return self_attention(w, input, false);
    case Kind::tps:
      return self_attention(w, input, true);
  }
  throw std::invalid_argument("unknown oracle kind");
}

}  // namespace mtsc::oracle
