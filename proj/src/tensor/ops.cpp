#include "mtsc/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "mtsc/errors.hpp"

namespace mtsc::ops {

namespace {

using Impl = detail::TensorImpl;
using ImplPtr = std::shared_ptr<Impl>;
using Backward = std::function<void(std::span<const double>)>;

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapC = Eigen::Map<const RowMat>;
using Map = Eigen::Map<RowMat>;

bool tracks(std::initializer_list<const Tensor*> inputs) {
  if (!grad_mode_enabled()) return false;
  for (const auto* t : inputs)
    if (t->defined() && t->requires_grad()) return true;
  return false;
}

void attach(Tensor& out, const char* op, std::vector<ImplPtr> inputs, Backward bw) {
  auto node = std::make_shared<Node>();
  node->op = op;
  node->inputs = std::move(inputs);
  node->backward = std::move(bw);
  out.impl()->requires_grad = true;
  out.impl()->grad_fn = std::move(node);
}

void require_defined(const Tensor& t, const char* op) {
  if (!t.defined()) throw UsageError(std::string(op) + ": undefined tensor argument");
}

std::size_t norm_axis(int axis, std::size_t rank, const char* op) {
  int r = static_cast<int>(rank);
  int a = axis < 0 ? axis + r : axis;
  if (a < 0 || a >= r)
    throw DimensionError(std::string(op) + ": axis " + std::to_string(axis) + " invalid for rank " +
                         std::to_string(rank));
  return static_cast<std::size_t>(a);
}

// outer x len x inner decomposition around one axis.
struct AxisSplit {
  std::size_t outer = 1, len = 1, inner = 1;
};

AxisSplit split_at(const Shape& s, std::size_t axis) {
  AxisSplit r;
  for (std::size_t i = 0; i < axis; ++i) r.outer *= s[i];
  r.len = s[axis];
  for (std::size_t i = axis + 1; i < s.size(); ++i) r.inner *= s[i];
  return r;
}

// ---------------------------------------------------------------- broadcasting

struct Broadcast {
  Shape out;
  bool same = false;
  std::vector<std::size_t> ia, ib;  // input offsets per output element
};

Broadcast broadcast(const Shape& a, const Shape& b, const char* op) {
  Broadcast r;
  if (a == b) {
    r.out = a;
    r.same = true;
    return r;
  }
  std::size_t rank = std::max(a.size(), b.size());
  r.out.assign(rank, 1);
  Shape pa(rank, 1), pb(rank, 1);
  std::copy(a.begin(), a.end(), pa.begin() + static_cast<long>(rank - a.size()));
  std::copy(b.begin(), b.end(), pb.begin() + static_cast<long>(rank - b.size()));
  for (std::size_t i = 0; i < rank; ++i) {
    if (pa[i] != pb[i] && pa[i] != 1 && pb[i] != 1)
      throw DimensionError(std::string(op) + ": cannot broadcast " + shape_str(a) + " with " + shape_str(b));
    r.out[i] = pa[i] == 1 ? pb[i] : pa[i];
  }
  std::vector<std::size_t> sa(rank), sb(rank);
  std::size_t ka = 1, kb = 1;
  for (std::size_t i = rank; i-- > 0;) {
    sa[i] = pa[i] == 1 ? 0 : ka;
    sb[i] = pb[i] == 1 ? 0 : kb;
    ka *= pa[i];
    kb *= pb[i];
  }
  std::size_t n = shape_numel(r.out);
  r.ia.resize(n);
  r.ib.resize(n);
  std::vector<std::size_t> idx(rank, 0);
  std::size_t oa = 0, ob = 0;
  for (std::size_t k = 0; k < n; ++k) {
    r.ia[k] = oa;
    r.ib[k] = ob;
    for (std::size_t d = rank; d-- > 0;) {
      if (++idx[d] < r.out[d]) {
        oa += sa[d];
        ob += sb[d];
        break;
      }
      oa -= sa[d] * (r.out[d] - 1);
      ob -= sb[d] * (r.out[d] - 1);
      idx[d] = 0;
    }
  }
  return r;
}

// Shared skeleton for binary elementwise ops. f computes the value,
// da/db compute the partial derivatives given (a, b, out).
template <class F, class DA, class DB>
Tensor binary(const Tensor& a, const Tensor& b, const char* op, F f, DA da, DB db) {
  require_defined(a, op);
  require_defined(b, op);
  auto bc = std::make_shared<Broadcast>(broadcast(a.shape(), b.shape(), op));
  std::size_t n = shape_numel(bc->out);
  std::vector<double> data(n);
  auto ad = a.data();
  auto bd = b.data();
  if (bc->same) {
    for (std::size_t k = 0; k < n; ++k) data[k] = f(ad[k], bd[k]);
  } else {
    for (std::size_t k = 0; k < n; ++k) data[k] = f(ad[bc->ia[k]], bd[bc->ib[k]]);
  }
  Tensor out(bc->out, std::move(data));
  if (tracks({&a, &b})) {
    auto ai = a.impl(), bi = b.impl();
    Impl* o = out.impl().get();
    attach(out, op, {ai, bi}, [ai, bi, o, bc, da, db](std::span<const double> g) {
      const auto& av = ai->data;
      const auto& bv = bi->data;
      const auto& ov = o->data;
      std::size_t n = g.size();
      if (ai->requires_grad) {
        auto& ga = ai->grad_buffer();
        for (std::size_t k = 0; k < n; ++k) {
          std::size_t ia = bc->same ? k : bc->ia[k];
          std::size_t ib = bc->same ? k : bc->ib[k];
          ga[ia] += g[k] * da(av[ia], bv[ib], ov[k]);
        }
      }
      if (bi->requires_grad) {
        auto& gb = bi->grad_buffer();
        for (std::size_t k = 0; k < n; ++k) {
          std::size_t ia = bc->same ? k : bc->ia[k];
          std::size_t ib = bc->same ? k : bc->ib[k];
          gb[ib] += g[k] * db(av[ia], bv[ib], ov[k]);
        }
      }
    });
  }
  return out;
}

// Shared skeleton for unary elementwise ops; d(x, y) is dy/dx.
template <class F, class D>
Tensor unary(const Tensor& x, const char* op, F f, D d) {
  require_defined(x, op);
  auto xd = x.data();
  std::vector<double> data(xd.size());
  for (std::size_t k = 0; k < xd.size(); ++k) data[k] = f(xd[k]);
  Tensor out(x.shape(), std::move(data));
  if (tracks({&x})) {
    auto xi = x.impl();
    Impl* o = out.impl().get();
    attach(out, op, {xi}, [xi, o, d](std::span<const double> g) {
      auto& gx = xi->grad_buffer();
      for (std::size_t k = 0; k < g.size(); ++k) gx[k] += g[k] * d(xi->data[k], o->data[k]);
    });
  }
  return out;
}

void add_into(std::vector<double>& dst, std::span<const double> src) {
  for (std::size_t k = 0; k < src.size(); ++k) dst[k] += src[k];
}

}  // namespace

// ------------------------------------------------------------------ arithmetic

Tensor add(const Tensor& a, const Tensor& b) {
  return binary(
      a, b, "add", [](double x, double y) { return x + y; }, [](double, double, double) { return 1.0; },
      [](double, double, double) { return 1.0; });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return binary(
      a, b, "sub", [](double x, double y) { return x - y; }, [](double, double, double) { return 1.0; },
      [](double, double, double) { return -1.0; });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return binary(
      a, b, "mul", [](double x, double y) { return x * y; }, [](double, double y, double) { return y; },
      [](double x, double, double) { return x; });
}

Tensor div(const Tensor& a, const Tensor& b) {
  return binary(
      a, b, "div", [](double x, double y) { return x / y; }, [](double, double y, double) { return 1.0 / y; },
      [](double, double y, double o) { return -o / y; });
}

Tensor scale(const Tensor& x, double factor) {
  return unary(
      x, "scale", [factor](double v) { return v * factor; }, [factor](double, double) { return factor; });
}

Tensor add_scalar(const Tensor& x, double value) {
  return unary(
      x, "add_scalar", [value](double v) { return v + value; }, [](double, double) { return 1.0; });
}

Tensor neg(const Tensor& x) { return scale(x, -1.0); }

Tensor square(const Tensor& x) {
  return unary(
      x, "square", [](double v) { return v * v; }, [](double v, double) { return 2.0 * v; });
}

Tensor exp(const Tensor& x) {
  return unary(
      x, "exp", [](double v) { return std::exp(v); }, [](double, double y) { return y; });
}

Tensor log(const Tensor& x) {
  return unary(
      x, "log", [](double v) { return std::log(v); }, [](double v, double) { return 1.0 / v; });
}

Tensor abs(const Tensor& x) {
  return unary(
      x, "abs", [](double v) { return std::fabs(v); },
      [](double v, double) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); });
}

Tensor relu(const Tensor& x) {
  return unary(
      x, "relu", [](double v) { return v > 0.0 || std::isnan(v) ? v : 0.0; }, [](double v, double) { return v > 0.0 ? 1.0 : 0.0; });
}

Tensor sigmoid(const Tensor& x) {
  return unary(
      x, "sigmoid",
      [](double v) {
        if (v >= 0) return 1.0 / (1.0 + std::exp(-v));
        double e = std::exp(v);
        return e / (1.0 + e);
      },
      [](double, double y) { return y * (1.0 - y); });
}

// ------------------------------------------------------------------ reductions

Tensor sum(const Tensor& x) {
  require_defined(x, "sum");
  auto xd = x.data();
  double s = std::accumulate(xd.begin(), xd.end(), 0.0);
  Tensor out = Tensor::scalar(s);
  if (tracks({&x})) {
    auto xi = x.impl();
    attach(out, "sum", {xi}, [xi](std::span<const double> g) {
      auto& gx = xi->grad_buffer();
      for (auto& v : gx) v += g[0];
    });
  }
  return out;
}

Tensor mean(const Tensor& x) {
  if (x.numel() == 0) throw DimensionError("mean of an empty tensor");
  return scale(sum(x), 1.0 / static_cast<double>(x.numel()));
}

Tensor sum(const Tensor& x, int axis, bool keepdim) {
  require_defined(x, "sum");
  std::size_t ax = norm_axis(axis, x.rank(), "sum");
  auto sp = split_at(x.shape(), ax);
  Shape shape = x.shape();
  if (keepdim)
    shape[ax] = 1;
  else
    shape.erase(shape.begin() + static_cast<long>(ax));
  std::vector<double> data(sp.outer * sp.inner, 0.0);
  auto xd = x.data();
  for (std::size_t o = 0; o < sp.outer; ++o)
    for (std::size_t l = 0; l < sp.len; ++l) {
      const double* src = xd.data() + (o * sp.len + l) * sp.inner;
      double* dst = data.data() + o * sp.inner;
      for (std::size_t i = 0; i < sp.inner; ++i) dst[i] += src[i];
    }
  Tensor out(shape, std::move(data));
  if (tracks({&x})) {
    auto xi = x.impl();
    attach(out, "sum_axis", {xi}, [xi, sp](std::span<const double> g) {
      auto& gx = xi->grad_buffer();
      for (std::size_t o = 0; o < sp.outer; ++o)
        for (std::size_t l = 0; l < sp.len; ++l) {
          double* dst = gx.data() + (o * sp.len + l) * sp.inner;
          const double* src = g.data() + o * sp.inner;
          for (std::size_t i = 0; i < sp.inner; ++i) dst[i] += src[i];
        }
    });
  }
  return out;
}

Tensor mean(const Tensor& x, int axis, bool keepdim) {
  std::size_t n = x.size(axis);
  if (n == 0) throw DimensionError("mean over an empty axis of " + shape_str(x.shape()));
  return scale(sum(x, axis, keepdim), 1.0 / static_cast<double>(n));
}

Tensor global_avg_pool(const Tensor& x) {
  require_defined(x, "global_avg_pool");
  if (x.rank() < 1 || x.size(-1) == 0)
    throw DimensionError("global_avg_pool needs at least one time step, got " + shape_str(x.shape()));
  return mean(x, -1, false);
}

// -------------------------------------------------------------------- products

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_defined(a, "matmul");
  require_defined(b, "matmul");
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  if (sa.size() < 2 || sb.size() < 2 || sa[sa.size() - 1] != sb[sb.size() - 2])
    throw DimensionError("matmul: incompatible shapes " + shape_str(sa) + " and " + shape_str(sb));
  std::size_t m = sa[sa.size() - 2], k = sa.back(), n = sb.back();
  Shape batch_a(sa.begin(), sa.end() - 2), batch_b(sb.begin(), sb.end() - 2);
  if (!batch_a.empty() && !batch_b.empty() && batch_a != batch_b)
    throw DimensionError("matmul: batch dimensions differ in " + shape_str(sa) + " and " + shape_str(sb));
  Shape batch = batch_a.empty() ? batch_b : batch_a;
  std::size_t nb = shape_numel(batch);
  std::size_t stride_a = batch_a.empty() ? 0 : m * k;
  std::size_t stride_b = batch_b.empty() ? 0 : k * n;

  Shape out_shape = batch;
  out_shape.push_back(m);
  out_shape.push_back(n);
  std::vector<double> data(nb * m * n);
  auto ad = a.data();
  auto bd = b.data();
  if (stride_b == 0 && nb > 1) {
    // Stack the batch into one tall product.
    Map(data.data(), static_cast<long>(nb * m), static_cast<long>(n)).noalias() =
        MapC(ad.data(), static_cast<long>(nb * m), static_cast<long>(k)) *
        MapC(bd.data(), static_cast<long>(k), static_cast<long>(n));
  } else {
    for (std::size_t i = 0; i < nb; ++i)
      Map(data.data() + i * m * n, static_cast<long>(m), static_cast<long>(n)).noalias() =
          MapC(ad.data() + i * stride_a, static_cast<long>(m), static_cast<long>(k)) *
          MapC(bd.data() + i * stride_b, static_cast<long>(k), static_cast<long>(n));
  }
  Tensor out(out_shape, std::move(data));
  if (tracks({&a, &b})) {
    auto ai = a.impl(), bi = b.impl();
    attach(out, "matmul", {ai, bi}, [ai, bi, nb, m, k, n, stride_a, stride_b](std::span<const double> g) {
      const long M = static_cast<long>(m), K = static_cast<long>(k), N = static_cast<long>(n);
      if (ai->requires_grad) {
        auto& ga = ai->grad_buffer();
        for (std::size_t i = 0; i < nb; ++i)
          Map(ga.data() + i * stride_a, M, K).noalias() +=
              MapC(g.data() + i * m * n, M, N) * MapC(bi->data.data() + i * stride_b, K, N).transpose();
      }
      if (bi->requires_grad) {
        auto& gb = bi->grad_buffer();
        for (std::size_t i = 0; i < nb; ++i)
          Map(gb.data() + i * stride_b, K, N).noalias() +=
              MapC(ai->data.data() + i * stride_a, M, K).transpose() * MapC(g.data() + i * m * n, M, N);
      }
    });
  }
  return out;
}

Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias) {
  require_defined(x, "linear");
  require_defined(weight, "linear");
  if (weight.rank() != 2 || x.rank() < 1 || x.size(-1) != weight.size(1))
    throw DimensionError("linear: input " + shape_str(x.shape()) + " does not match weight " +
                         shape_str(weight.shape()));
  std::size_t in = weight.size(1), outf = weight.size(0);
  if (bias.defined() && (bias.rank() != 1 || bias.size(0) != outf))
    throw DimensionError("linear: bias " + shape_str(bias.shape()) + " does not match weight " +
                         shape_str(weight.shape()));
  std::size_t rows = x.numel() / std::max<std::size_t>(in, 1);
  Shape out_shape = x.shape();
  out_shape.back() = outf;
  std::vector<double> data(rows * outf);
  const long R = static_cast<long>(rows), I = static_cast<long>(in), O = static_cast<long>(outf);
  Map y(data.data(), R, O);
  y.noalias() = MapC(x.data().data(), R, I) * MapC(weight.data().data(), O, I).transpose();
  if (bias.defined()) y.rowwise() += Eigen::Map<const Eigen::RowVectorXd>(bias.data().data(), O);
  Tensor out(out_shape, std::move(data));
  if (tracks({&x, &weight, &bias})) {
    auto xi = x.impl(), wi = weight.impl();
    auto bi = bias.defined() ? bias.impl() : nullptr;
    std::vector<ImplPtr> inputs{xi, wi};
    if (bi) inputs.push_back(bi);
    attach(out, "linear", std::move(inputs), [xi, wi, bi, R, I, O](std::span<const double> g) {
      MapC gy(g.data(), R, O);
      if (xi->requires_grad) Map(xi->grad_buffer().data(), R, I).noalias() += gy * MapC(wi->data.data(), O, I);
      if (wi->requires_grad)
        Map(wi->grad_buffer().data(), O, I).noalias() += gy.transpose() * MapC(xi->data.data(), R, I);
      if (bi && bi->requires_grad) {
        auto& gb = bi->grad_buffer();
        for (std::size_t r = 0; r < R; ++r)
          for (std::size_t o = 0; o < O; ++o) gb[o] += g[r * O + o];
      }
    });
  }
  return out;
}

// ----------------------------------------------------------------------- shape

Tensor reshape(const Tensor& x, Shape shape) {
  require_defined(x, "reshape");
  if (shape_numel(shape) != x.numel())
    throw DimensionError("reshape: " + shape_str(x.shape()) + " cannot become " + shape_str(shape));
  Tensor out(std::move(shape), std::vector<double>(x.data().begin(), x.data().end()));
  if (tracks({&x})) {
    auto xi = x.impl();
    attach(out, "reshape", {xi}, [xi](std::span<const double> g) { add_into(xi->grad_buffer(), g); });
  }
  return out;
}

Tensor transpose(const Tensor& x, int axis0, int axis1) {
  require_defined(x, "transpose");
  std::size_t a0 = norm_axis(axis0, x.rank(), "transpose");
  std::size_t a1 = norm_axis(axis1, x.rank(), "transpose");
  if (a0 == a1) return reshape(x, x.shape());
  if (a0 > a1) std::swap(a0, a1);
  const Shape& s = x.shape();
  // View as [outer, n0, mid, n1, inner] and swap n0 and n1.
  std::size_t outer = 1, mid = 1, inner = 1;
  for (std::size_t i = 0; i < a0; ++i) outer *= s[i];
  for (std::size_t i = a0 + 1; i < a1; ++i) mid *= s[i];
  for (std::size_t i = a1 + 1; i < s.size(); ++i) inner *= s[i];
  std::size_t n0 = s[a0], n1 = s[a1];
  Shape out_shape = s;
  std::swap(out_shape[a0], out_shape[a1]);

  // perm[k] = source offset of output element k.
  auto perm = std::make_shared<std::vector<std::size_t>>(x.numel());
  std::size_t k = 0;
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t j = 0; j < n1; ++j)
      for (std::size_t md = 0; md < mid; ++md)
        for (std::size_t i = 0; i < n0; ++i)
          for (std::size_t in = 0; in < inner; ++in)
            (*perm)[k++] = (((o * n0 + i) * mid + md) * n1 + j) * inner + in;
  auto xd = x.data();
  std::vector<double> data(perm->size());
  for (std::size_t q = 0; q < perm->size(); ++q) data[q] = xd[(*perm)[q]];
  Tensor out(out_shape, std::move(data));
  if (tracks({&x})) {
    auto xi = x.impl();
    attach(out, "transpose", {xi}, [xi, perm](std::span<const double> g) {
      auto& gx = xi->grad_buffer();
      for (std::size_t q = 0; q < perm->size(); ++q) gx[(*perm)[q]] += g[q];
    });
  }
  return out;
}

Tensor slice(const Tensor& x, int axis, std::size_t start, std::size_t length) {
  require_defined(x, "slice");
  std::size_t ax = norm_axis(axis, x.rank(), "slice");
  auto sp = split_at(x.shape(), ax);
  if (start + length > sp.len)
    throw DimensionError("slice [" + std::to_string(start) + ", " + std::to_string(start + length) +
                         ") out of range for axis of size " + std::to_string(sp.len));
  Shape shape = x.shape();
  shape[ax] = length;
  std::vector<double> data(sp.outer * length * sp.inner);
  auto xd = x.data();
  for (std::size_t o = 0; o < sp.outer; ++o)
    std::copy_n(xd.data() + (o * sp.len + start) * sp.inner, length * sp.inner,
                data.data() + o * length * sp.inner);
  Tensor out(shape, std::move(data));
  if (tracks({&x})) {
    auto xi = x.impl();
    attach(out, "slice", {xi}, [xi, sp, start, length](std::span<const double> g) {
      auto& gx = xi->grad_buffer();
      for (std::size_t o = 0; o < sp.outer; ++o) {
        double* dst = gx.data() + (o * sp.len + start) * sp.inner;
        const double* src = g.data() + o * length * sp.inner;
        for (std::size_t i = 0; i < length * sp.inner; ++i) dst[i] += src[i];
      }
    });
  }
  return out;
}

Tensor concat(const std::vector<Tensor>& parts, int axis) {
  if (parts.empty()) throw UsageError("concat of zero tensors");
  std::size_t ax = norm_axis(axis, parts[0].rank(), "concat");
  Shape shape = parts[0].shape();
  std::size_t total = 0;
  std::vector<std::size_t> lens;
  for (const auto& p : parts) {
    Shape s = p.shape();
    if (s.size() != shape.size()) throw DimensionError("concat: rank mismatch");
    s[ax] = shape[ax];
    if (s != shape) throw DimensionError("concat: shapes " + shape_str(p.shape()) + " and " + shape_str(parts[0].shape()));
    lens.push_back(p.size(static_cast<int>(ax)));
    total += lens.back();
  }
  shape[ax] = total;
  auto sp = split_at(shape, ax);
  std::vector<double> data(shape_numel(shape));
  std::size_t off = 0;
  for (std::size_t pi = 0; pi < parts.size(); ++pi) {
    auto pd = parts[pi].data();
    for (std::size_t o = 0; o < sp.outer; ++o)
      std::copy_n(pd.data() + o * lens[pi] * sp.inner, lens[pi] * sp.inner,
                  data.data() + (o * total + off) * sp.inner);
    off += lens[pi];
  }
  Tensor out(shape, std::move(data));
  bool any = false;
  for (const auto& p : parts) any = any || tracks({&p});
  if (any) {
    std::vector<ImplPtr> inputs;
    for (const auto& p : parts) inputs.push_back(p.impl());
    attach(out, "concat", inputs, [inputs, lens, sp, total](std::span<const double> g) {
      std::size_t off = 0;
      for (std::size_t pi = 0; pi < inputs.size(); ++pi) {
        if (inputs[pi]->requires_grad) {
          auto& gp = inputs[pi]->grad_buffer();
          for (std::size_t o = 0; o < sp.outer; ++o) {
            const double* src = g.data() + (o * total + off) * sp.inner;
            double* dst = gp.data() + o * lens[pi] * sp.inner;
            for (std::size_t i = 0; i < lens[pi] * sp.inner; ++i) dst[i] += src[i];
          }
        }
        off += lens[pi];
      }
    });
  }
  return out;
}

// --------------------------------------------------------------------- softmax

Tensor softmax(const Tensor& x, int axis) {
  require_defined(x, "softmax");
  std::size_t ax = norm_axis(axis, x.rank(), "softmax");
  auto sp = split_at(x.shape(), ax);
  auto xd = x.data();
  std::vector<double> data(xd.size());
  for (std::size_t o = 0; o < sp.outer; ++o)
    for (std::size_t i = 0; i < sp.inner; ++i) {
      std::size_t base = o * sp.len * sp.inner + i;
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t l = 0; l < sp.len; ++l) mx = std::max(mx, xd[base + l * sp.inner]);
      double s = 0.0;
      for (std::size_t l = 0; l < sp.len; ++l) {
        double e = std::exp(xd[base + l * sp.inner] - mx);
        data[base + l * sp.inner] = e;
        s += e;
      }
      for (std::size_t l = 0; l < sp.len; ++l) data[base + l * sp.inner] /= s;
    }
  Tensor out(x.shape(), std::move(data));
  if (tracks({&x})) {
    auto xi = x.impl();
    Impl* o = out.impl().get();
    attach(out, "softmax", {xi}, [xi, o, sp](std::span<const double> g) {
      auto& gx = xi->grad_buffer();
      const auto& y = o->data;
      for (std::size_t oo = 0; oo < sp.outer; ++oo)
        for (std::size_t i = 0; i < sp.inner; ++i) {
          std::size_t base = oo * sp.len * sp.inner + i;
          double dot = 0.0;
          for (std::size_t l = 0; l < sp.len; ++l) dot += g[base + l * sp.inner] * y[base + l * sp.inner];
          for (std::size_t l = 0; l < sp.len; ++l) {
            std::size_t q = base + l * sp.inner;
            gx[q] += y[q] * (g[q] - dot);
          }
        }
    });
  }
  return out;
}

Tensor log_softmax(const Tensor& x, int axis) {
  require_defined(x, "log_softmax");
  std::size_t ax = norm_axis(axis, x.rank(), "log_softmax");
  auto sp = split_at(x.shape(), ax);
  auto xd = x.data();
  std::vector<double> data(xd.size());
  for (std::size_t o = 0; o < sp.outer; ++o)
    for (std::size_t i = 0; i < sp.inner; ++i) {
      std::size_t base = o * sp.len * sp.inner + i;
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t l = 0; l < sp.len; ++l) mx = std::max(mx, xd[base + l * sp.inner]);
      double s = 0.0;
      for (std::size_t l = 0; l < sp.len; ++l) s += std::exp(xd[base + l * sp.inner] - mx);
      double lse = mx + std::log(s);
      for (std::size_t l = 0; l < sp.len; ++l) data[base + l * sp.inner] = xd[base + l * sp.inner] - lse;
    }
  Tensor out(x.shape(), std::move(data));
  if (tracks({&x})) {
    auto xi = x.impl();
    Impl* o = out.impl().get();
    attach(out, "log_softmax", {xi}, [xi, o, sp](std::span<const double> g) {
      auto& gx = xi->grad_buffer();
      const auto& y = o->data;
      for (std::size_t oo = 0; oo < sp.outer; ++oo)
        for (std::size_t i = 0; i < sp.inner; ++i) {
          std::size_t base = oo * sp.len * sp.inner + i;
          double gs = 0.0;
          for (std::size_t l = 0; l < sp.len; ++l) gs += g[base + l * sp.inner];
          for (std::size_t l = 0; l < sp.len; ++l) {
            std::size_t q = base + l * sp.inner;
            gx[q] += g[q] - std::exp(y[q]) * gs;
          }
        }
    });
  }
  return out;
}

// ----------------------------------------------------------------- convolution

Tensor conv1d(const Tensor& x, const Tensor& kernels, const Tensor& bias) {
  require_defined(x, "conv1d");
  require_defined(kernels, "conv1d");
  if (x.rank() != 2 && x.rank() != 3)
    throw DimensionError("conv1d: input must be [C, N] or [B, C, N], got " + shape_str(x.shape()));
  bool batched = x.rank() == 3;
  std::size_t B = batched ? x.size(0) : 1;
  std::size_t cin = x.size(-2), len = x.size(-1);
  if (len == 0 || cin == 0 || B == 0) throw DimensionError("conv1d: empty input " + shape_str(x.shape()));
  if (kernels.rank() != 3 || kernels.size(1) != cin)
    throw DimensionError("conv1d: kernels " + shape_str(kernels.shape()) + " do not match input " +
                         shape_str(x.shape()));
  std::size_t cout = kernels.size(0), k = kernels.size(2);
  if (k == 0) throw DimensionError("conv1d: zero-width kernel");
  if (bias.defined() && (bias.rank() != 1 || bias.size(0) != cout))
    throw DimensionError("conv1d: bias " + shape_str(bias.shape()) + " does not match " + std::to_string(cout) +
                         " output channels");
  std::size_t pad_left = (k - 1) / 2;
  std::size_t ck = cin * k;

  // im2col: cols[b] is [cin*k, len].
  auto cols = std::make_shared<std::vector<double>>(B * ck * len, 0.0);
  auto xd = x.data();
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t c = 0; c < cin; ++c)
      for (std::size_t t = 0; t < k; ++t) {
        double* row = cols->data() + (b * ck + c * k + t) * len;
        const double* src = xd.data() + (b * cin + c) * len;
        for (std::size_t n = 0; n < len; ++n) {
          long pos = static_cast<long>(n + t) - static_cast<long>(pad_left);
          if (pos >= 0 && pos < static_cast<long>(len)) row[n] = src[pos];
        }
      }
  std::vector<double> data(B * cout * len);
  const long CO = static_cast<long>(cout), CK = static_cast<long>(ck), L = static_cast<long>(len);
  MapC w(kernels.data().data(), CO, CK);
  for (std::size_t b = 0; b < B; ++b) {
    Map y(data.data() + b * cout * len, CO, L);
    y.noalias() = w * MapC(cols->data() + b * ck * len, CK, L);
    if (bias.defined()) y.colwise() += Eigen::Map<const Eigen::VectorXd>(bias.data().data(), CO);
  }
  Shape out_shape = batched ? Shape{B, cout, len} : Shape{cout, len};
  Tensor out(out_shape, std::move(data));
  if (tracks({&x, &kernels, &bias})) {
    auto xi = x.impl(), wi = kernels.impl();
    auto bi = bias.defined() ? bias.impl() : nullptr;
    std::vector<ImplPtr> inputs{xi, wi};
    if (bi) inputs.push_back(bi);
    attach(out, "conv1d", std::move(inputs),
           [xi, wi, bi, cols, B, cin, cout, len, k, ck, pad_left, CO, CK, L](std::span<const double> g) {
             if (wi->requires_grad) {
               Map gw(wi->grad_buffer().data(), CO, CK);
               for (std::size_t b = 0; b < B; ++b)
                 gw.noalias() += MapC(g.data() + b * cout * len, CO, L) *
                                 MapC(cols->data() + b * ck * len, CK, L).transpose();
             }
             if (bi && bi->requires_grad) {
               auto& gb = bi->grad_buffer();
               // Plain loops: Eigen's vectorised reductions sum in an
               // alignment-dependent order, which breaks run-to-run equality.
               for (std::size_t b = 0; b < B; ++b)
                 for (std::size_t c = 0; c < CO; ++c) {
                   const double* row = g.data() + b * cout * len + c * L;
                   double acc = 0.0;
                   for (std::size_t t = 0; t < std::size_t(L); ++t) acc += row[t];
                   gb[c] += acc;
                 }
             }
             if (xi->requires_grad) {
               auto& gx = xi->grad_buffer();
               RowMat dcol(CK, L);
               MapC w(wi->data.data(), CO, CK);
               for (std::size_t b = 0; b < B; ++b) {
                 dcol.noalias() = w.transpose() * MapC(g.data() + b * cout * len, CO, L);
                 for (std::size_t c = 0; c < cin; ++c)
                   for (std::size_t t = 0; t < k; ++t) {
                     const double* row = dcol.data() + (c * k + t) * len;
                     double* dst = gx.data() + (b * cin + c) * len;
                     for (std::size_t n = 0; n < len; ++n) {
                       long pos = static_cast<long>(n + t) - static_cast<long>(pad_left);
                       if (pos >= 0 && pos < static_cast<long>(len)) dst[pos] += row[n];
                     }
                   }
               }
             }
           });
  }
  return out;
}

// --------------------------------------------------------------- normalization

Tensor batch_norm1d(const Tensor& x, const Tensor& gamma, const Tensor& beta, Tensor& running_mean,
                    Tensor& running_var, NormMode mode, double momentum, double eps) {
  if (mode != NormMode::train && mode != NormMode::eval) throw UsageError("batch_norm1d: invalid mode flag");
  require_defined(x, "batch_norm1d");
  if (x.rank() != 2 && x.rank() != 3)
    throw DimensionError("batch_norm1d: input must be [C, N] or [B, C, N], got " + shape_str(x.shape()));
  std::size_t B = x.rank() == 3 ? x.size(0) : 1;
  std::size_t C = x.size(-2), len = x.size(-1);
  for (const Tensor* p : std::initializer_list<const Tensor*>{&gamma, &beta, &running_mean, &running_var})
    if (!p->defined() || p->rank() != 1 || p->size(0) != C)
      throw DimensionError("batch_norm1d: per-channel tensors must have " + std::to_string(C) + " entries");
  std::size_t count = B * len;
  if (count == 0) throw DimensionError("batch_norm1d: empty input");

  auto xd = x.data();
  auto at = [C, len](std::size_t b, std::size_t c) { return (b * C + c) * len; };
  auto mean = std::make_shared<std::vector<double>>(C, 0.0);
  auto invstd = std::make_shared<std::vector<double>>(C, 0.0);
  if (mode == NormMode::train) {
    auto rm = running_mean.mutable_data();
    auto rv = running_var.mutable_data();
    for (std::size_t c = 0; c < C; ++c) {
      double s = 0.0;
      for (std::size_t b = 0; b < B; ++b)
        for (std::size_t n = 0; n < len; ++n) s += xd[at(b, c) + n];
      double mu = s / static_cast<double>(count);
      double ss = 0.0;
      for (std::size_t b = 0; b < B; ++b)
        for (std::size_t n = 0; n < len; ++n) {
          double dlt = xd[at(b, c) + n] - mu;
          ss += dlt * dlt;
        }
      double var = ss / static_cast<double>(count);
      (*mean)[c] = mu;
      (*invstd)[c] = 1.0 / std::sqrt(var + eps);
      // Running variance tracks the unbiased estimate.
      double unbiased = count > 1 ? ss / static_cast<double>(count - 1) : var;
      rm[c] = (1.0 - momentum) * rm[c] + momentum * mu;
      rv[c] = (1.0 - momentum) * rv[c] + momentum * unbiased;
    }
  } else {
    auto rm = running_mean.data();
    auto rv = running_var.data();
    for (std::size_t c = 0; c < C; ++c) {
      (*mean)[c] = rm[c];
      (*invstd)[c] = 1.0 / std::sqrt(rv[c] + eps);
    }
  }
  auto gd = gamma.data();
  auto bd = beta.data();
  std::vector<double> data(xd.size());
  auto xhat = std::make_shared<std::vector<double>>(xd.size());
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t n = 0; n < len; ++n) {
        std::size_t q = at(b, c) + n;
        (*xhat)[q] = (xd[q] - (*mean)[c]) * (*invstd)[c];
        data[q] = (*xhat)[q] * gd[c] + bd[c];
      }
  Tensor out(x.shape(), std::move(data));
  if (tracks({&x, &gamma, &beta})) {
    auto xi = x.impl(), gi = gamma.impl(), bi = beta.impl();
    bool train = mode == NormMode::train;
    attach(out, "batch_norm1d", {xi, gi, bi},
           [xi, gi, bi, xhat, invstd, B, C, len, count, train, at](std::span<const double> g) {
             for (std::size_t c = 0; c < C; ++c) {
               double sg = 0.0, sgx = 0.0;
               for (std::size_t b = 0; b < B; ++b)
                 for (std::size_t n = 0; n < len; ++n) {
                   std::size_t q = at(b, c) + n;
                   sg += g[q];
                   sgx += g[q] * (*xhat)[q];
                 }
               if (gi->requires_grad) gi->grad_buffer()[c] += sgx;
               if (bi->requires_grad) bi->grad_buffer()[c] += sg;
               if (!xi->requires_grad) continue;
               auto& gx = xi->grad_buffer();
               double gam = gi->data[c];
               double is = (*invstd)[c];
               double m = static_cast<double>(count);
               for (std::size_t b = 0; b < B; ++b)
                 for (std::size_t n = 0; n < len; ++n) {
                   std::size_t q = at(b, c) + n;
                   if (train)
                     gx[q] += gam * is * (g[q] - sg / m - (*xhat)[q] * sgx / m);
                   else
                     gx[q] += gam * is * g[q];
                 }
             }
           });
  }
  return out;
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
  require_defined(x, "layer_norm");
  std::size_t D = x.size(-1);
  if (!gamma.defined() || !beta.defined() || gamma.numel() != D || beta.numel() != D)
    throw DimensionError("layer_norm: gamma/beta must have " + std::to_string(D) + " entries");
  std::size_t rows = x.numel() / std::max<std::size_t>(D, 1);
  auto xd = x.data();
  auto gd = gamma.data();
  auto bd = beta.data();
  auto xhat = std::make_shared<std::vector<double>>(xd.size());
  auto invstd = std::make_shared<std::vector<double>>(rows);
  std::vector<double> data(xd.size());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = xd.data() + r * D;
    double mu = 0.0;
    for (std::size_t j = 0; j < D; ++j) mu += row[j];
    mu /= static_cast<double>(D);
    double var = 0.0;
    for (std::size_t j = 0; j < D; ++j) var += (row[j] - mu) * (row[j] - mu);
    var /= static_cast<double>(D);
    double is = 1.0 / std::sqrt(var + eps);
    (*invstd)[r] = is;
    for (std::size_t j = 0; j < D; ++j) {
      double h = (row[j] - mu) * is;
      (*xhat)[r * D + j] = h;
      data[r * D + j] = h * gd[j] + bd[j];
    }
  }
  Tensor out(x.shape(), std::move(data));
  if (tracks({&x, &gamma, &beta})) {
    auto xi = x.impl(), gi = gamma.impl(), bi = beta.impl();
    attach(out, "layer_norm", {xi, gi, bi}, [xi, gi, bi, xhat, invstd, rows, D](std::span<const double> g) {
      std::vector<double> dxh(D);
      for (std::size_t r = 0; r < rows; ++r) {
        double s1 = 0.0, s2 = 0.0;
        for (std::size_t j = 0; j < D; ++j) {
          std::size_t q = r * D + j;
          if (gi->requires_grad) gi->grad_buffer()[j] += g[q] * (*xhat)[q];
          if (bi->requires_grad) bi->grad_buffer()[j] += g[q];
          dxh[j] = g[q] * gi->data[j];
          s1 += dxh[j];
          s2 += dxh[j] * (*xhat)[q];
        }
        if (!xi->requires_grad) continue;
        auto& gx = xi->grad_buffer();
        double m = static_cast<double>(D);
        for (std::size_t j = 0; j < D; ++j) {
          std::size_t q = r * D + j;
          gx[q] += (*invstd)[r] * (dxh[j] - s1 / m - (*xhat)[q] * s2 / m);
        }
      }
    });
  }
  return out;
}

}  // namespace mtsc::ops
