#pragma once

// Scalar-loop reference implementations of the attention blocks.
//
// Nothing here depends on the tensor engine: every entry is computed one at a
// time from the defining formulas so the vectorized blocks can be checked
// against an independent route.

#include <cstddef>
#include <vector>

namespace mtsc::oracle {

struct Matrix {
  std::size_t rows = 0, cols = 0;
  std::vector<double> v;  // row-major

  Matrix() = default;
  Matrix(std::size_t r, std::size_t c, double fill = 0.0) : rows(r), cols(c), v(r * c, fill) {}
  Matrix(std::size_t r, std::size_t c, std::vector<double> values) : rows(r), cols(c), v(std::move(values)) {}
  double& operator()(std::size_t i, std::size_t j) { return v[i * cols + j]; }
  double operator()(std::size_t i, std::size_t j) const { return v[i * cols + j]; }
};

enum class Kind { cta, gta, sa, tps };

struct Weights {
  // CTA: w1 [d/r x d], w2 [1 x d/r]. GTA: w1 [1 x d], w2 [T/r x T], w3 [T x T/r].
  Matrix w1, w2, w3;
  // SA / TPS: square projections applied as q_i = W_Q f_i.
  Matrix w_q, w_k, w_v;
  std::vector<double> value_bias;
  // TPS: W' and W as rows of length d.
  std::vector<double> w_sigma_hat, w_sigma;
  double b = 1.0;
  std::size_t heads = 1;
  bool squared_distance = false;
  std::vector<double> scale;  // per head; empty means identity scaling
};

struct Result {
  Matrix out;        // CTA/GTA: d x N.  SA/TPS: N x d.
  Matrix attention;  // CTA/GTA: 1 x N.  SA/TPS: per-head N x N stacked as (h*N) x N.
  Matrix content;    // SA/TPS: A1, stacked like `attention`
  Matrix positional; // TPS: A2, N x N
  std::vector<double> sigma_hat, sigma;
};

// `input` is d x N for CTA/GTA and N x d for SA/TPS.
Result attention(Kind kind, const Weights& w, const Matrix& input);

}  // namespace mtsc::oracle
