#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "mtsc/data.hpp"
#include "mtsc/errors.hpp"
#include "mtsc/rng.hpp"

namespace mtsc::data {

std::size_t Dataset::max_length() const {
  std::size_t n = 0;
  for (const auto& s : samples) n = std::max(n, s.length);
  return n;
}

bool Dataset::equal_length() const {
  for (const auto& s : samples)
    if (s.length != samples.front().length) return false;
  return true;
}

void Dataset::validate() const {
  if (dims == 0) throw StructureError("dataset has zero dimensions", 0);
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const auto& s = samples[i];
    if (s.length == 0 || s.values.size() != dims * s.length)
      throw StructureError("sample " + std::to_string(i) + " holds " + std::to_string(s.values.size()) +
                               " values, expected " + std::to_string(dims) + " x " + std::to_string(s.length),
                           0);
    if (s.label >= class_names.size())
      throw LabelError("sample " + std::to_string(i) + " has label index " + std::to_string(s.label) + " but only " +
                           std::to_string(class_names.size()) + " classes",
                       0);
  }
}

Dataset znormalize(const Dataset& ds) {
  Dataset out = ds;
  for (auto& s : out.samples)
    for (std::size_t k = 0; k < out.dims; ++k) {
      double* row = s.values.data() + k * s.length;
      double mean = 0.0;
      for (std::size_t t = 0; t < s.length; ++t) mean += row[t];
      mean /= double(s.length);
      double var = 0.0;
      for (std::size_t t = 0; t < s.length; ++t) var += (row[t] - mean) * (row[t] - mean);
      const double sd = std::max(std::sqrt(var / double(s.length)), 1e-8);
      for (std::size_t t = 0; t < s.length; ++t) row[t] = (row[t] - mean) / sd;
    }
  return out;
}

Dataset pad_to(const Dataset& ds, std::size_t length) {
  Dataset out = ds;
  for (std::size_t i = 0; i < out.samples.size(); ++i) {
    auto& s = out.samples[i];
    if (s.length > length)
      throw UsageError("sample " + std::to_string(i) + " has length " + std::to_string(s.length) +
                       ", longer than the padding target " + std::to_string(length));
    std::vector<double> v(out.dims * length, 0.0);
    for (std::size_t k = 0; k < out.dims; ++k)
      std::copy_n(s.values.begin() + std::ptrdiff_t(k * s.length), s.length, v.begin() + std::ptrdiff_t(k * length));
    s.values = std::move(v);
    s.length = length;
  }
  return out;
}

Tensor batch_tensor(const Dataset& ds, const std::vector<std::size_t>& indices) {
  if (indices.empty()) throw UsageError("empty batch");
  const std::size_t n = ds.samples.at(indices.front()).length;
  std::vector<double> v;
  v.reserve(indices.size() * ds.dims * n);
  for (std::size_t i : indices) {
    const auto& s = ds.samples.at(i);
    if (s.length != n)
      throw DimensionError("batch mixes lengths " + std::to_string(n) + " and " + std::to_string(s.length) +
                           "; pad the dataset first");
    v.insert(v.end(), s.values.begin(), s.values.end());
  }
  return Tensor({indices.size(), ds.dims, n}, std::move(v));
}

std::vector<std::size_t> batch_labels(const Dataset& ds, const std::vector<std::size_t>& indices) {
  std::vector<std::size_t> y;
  y.reserve(indices.size());
  for (std::size_t i : indices) y.push_back(ds.samples.at(i).label);
  return y;
}

std::pair<Dataset, Dataset> stratified_holdout(const Dataset& ds, double fraction, std::uint64_t seed) {
  if (!(fraction >= 0.0 && fraction < 1.0)) throw UsageError("holdout fraction must lie in [0, 1)");
  Rng rng(derive_seed(seed, "holdout"));
  std::vector<bool> held(ds.size(), false);
  for (std::size_t c = 0; c < ds.num_classes(); ++c) {
    std::vector<std::size_t> idx;
    for (std::size_t i = 0; i < ds.size(); ++i)
      if (ds.samples[i].label == c) idx.push_back(i);
    if (idx.empty()) continue;
    std::size_t k = static_cast<std::size_t>(std::llround(fraction * double(idx.size())));
    k = std::min(k, idx.size() - 1);
    shuffle(idx, rng);
    for (std::size_t j = 0; j < k; ++j) held[idx[j]] = true;
  }
  Dataset keep = ds, hold = ds;
  keep.samples.clear();
  hold.samples.clear();
  keep.split = "train";
  hold.split = "val";
  for (std::size_t i = 0; i < ds.size(); ++i) (held[i] ? hold : keep).samples.push_back(ds.samples[i]);
  return {std::move(keep), std::move(hold)};
}

std::string to_string(SyntheticKind kind) {
  switch (kind) {
    case SyntheticKind::positioned_bump: return "positioned-bump";
    case SyntheticKind::shifted_pattern: return "shifted-pattern";
    case SyntheticKind::frequency_mix: return "frequency-mix";
  }
  return "?";
}

SyntheticKind parse_synthetic_kind(const std::string& text) {
  for (auto k : {SyntheticKind::positioned_bump, SyntheticKind::shifted_pattern, SyntheticKind::frequency_mix})
    if (to_string(k) == text) return k;
  throw UsageError("unknown synthetic generator '" + text +
                   "' (expected positioned-bump, shifted-pattern or frequency-mix)");
}

void SyntheticSpec::validate() const {
  if (n_samples < 2) throw UsageError("synthetic n_samples must be at least 2");
  if (dims == 0) throw UsageError("synthetic dims must be positive");
  if (n_classes < 2) throw UsageError("synthetic n_classes must be at least 2");
  if (!(noise >= 0.0) || !std::isfinite(noise)) throw UsageError("synthetic noise must be a finite value >= 0");
  if (kind == SyntheticKind::positioned_bump && length < 4 * n_classes)
    throw UsageError("positioned-bump needs length >= 4 * n_classes");
  if (length < 4) throw UsageError("synthetic length must be at least 4");
}

nlohmann::json SyntheticSpec::to_json() const {
  return {{"kind", to_string(kind)}, {"n_samples", n_samples}, {"dims", dims},  {"length", length},
          {"n_classes", n_classes},  {"noise", noise},         {"seed", seed}};
}

SyntheticSpec SyntheticSpec::from_json(const nlohmann::json& j) {
  SyntheticSpec s;
  try {
    if (j.contains("kind")) s.kind = parse_synthetic_kind(j.at("kind").get<std::string>());
    if (j.contains("n_samples")) s.n_samples = j.at("n_samples").get<std::size_t>();
    if (j.contains("dims")) s.dims = j.at("dims").get<std::size_t>();
    if (j.contains("length")) s.length = j.at("length").get<std::size_t>();
    if (j.contains("n_classes")) s.n_classes = j.at("n_classes").get<std::size_t>();
    if (j.contains("noise")) s.noise = j.at("noise").get<double>();
    if (j.contains("seed")) s.seed = j.at("seed").get<std::uint64_t>();
  } catch (const nlohmann::json::exception& e) {
    throw UsageError(std::string("bad synthetic spec: ") + e.what());
  }
  s.validate();
  return s;
}

namespace {

double channel_gain(std::size_t c) { return (c % 2 == 0 ? 1.0 : -1.0) / double(1 + c); }

// Shape of class k's waveform over u in [0, 1].
double pattern(std::size_t k, double u) {
  switch (k % 4) {
    case 0: return std::exp(-0.5 * std::pow((u - 0.5) / 0.15, 2));
    case 1: return u >= 0.25 && u <= 0.75 ? 1.0 : 0.0;
    case 2: return u;
    default: return std::sin(2.0 * M_PI * u);
  }
}

Sample make_sample(const SyntheticSpec& spec, std::size_t label, Rng& rng) {
  const std::size_t N = spec.length, K = spec.n_classes;
  Sample s;
  s.length = s.original_length = N;
  s.label = label;
  s.values.assign(spec.dims * N, 0.0);
  const double amp = rng.uniform(0.75, 1.25);
  switch (spec.kind) {
    case SyntheticKind::positioned_bump: {
      const std::size_t half = N / (2 * K) - 1;
      const std::size_t centre = ((2 * label + 1) * N) / (2 * K);
      const double width = std::max(1.0, double(half) / 2.0);
      for (std::size_t c = 0; c < spec.dims; ++c)
        for (std::size_t t = centre - half; t <= centre + half; ++t) {
          const double u = double(t) - double(centre);
          s.values[c * N + t] = channel_gain(c) * amp * std::exp(-0.5 * u * u / (width * width));
        }
      break;
    }
    case SyntheticKind::shifted_pattern: {
      const std::size_t P = std::max<std::size_t>(4, N / 4);
      const std::size_t offset = rng.below(N - P + 1);
      const double cycles = 1.0 + double(label / 4);
      for (std::size_t c = 0; c < spec.dims; ++c)
        for (std::size_t j = 0; j < P; ++j) {
          const double u = double(j) / double(P - 1);
          const double v = label < 4 ? pattern(label, u) : std::sin(2.0 * M_PI * cycles * u) * pattern(label, u);
          s.values[c * N + offset + j] = channel_gain(c) * amp * v;
        }
      break;
    }
    case SyntheticKind::frequency_mix: {
      const double f = double(label + 1);
      for (std::size_t c = 0; c < spec.dims; ++c) {
        const double phase = rng.uniform(0.0, 2.0 * M_PI);
        for (std::size_t t = 0; t < N; ++t)
          s.values[c * N + t] = channel_gain(c) * amp * std::sin(2.0 * M_PI * f * double(t) / double(N) + phase);
      }
      break;
    }
  }
  if (spec.noise > 0.0)
    for (auto& v : s.values) v += rng.normal(0.0, spec.noise);
  return s;
}

}  // namespace

std::pair<Dataset, Dataset> generate_synthetic(const SyntheticSpec& spec) {
  spec.validate();
  auto make = [&](const char* split, std::size_t count) {
    Dataset ds;
    ds.name = "synthetic-" + to_string(spec.kind);
    ds.split = split;
    ds.dims = spec.dims;
    for (std::size_t k = 0; k < spec.n_classes; ++k) ds.class_names.push_back(std::to_string(k));
    Rng rng(derive_seed(spec.seed, split));
    for (std::size_t i = 0; i < count; ++i) ds.samples.push_back(make_sample(spec, i % spec.n_classes, rng));
    return ds;
  };
  const std::size_t n_test = spec.n_samples / 2;
  return {make("train", spec.n_samples - n_test), make("test", n_test)};
}

double nearest_neighbour_accuracy(const Dataset& train, const Dataset& test) {
  if (train.size() == 0) throw UsageError("nearest neighbour needs a non-empty training set");
  if (test.size() == 0) return 0.0;
  std::size_t correct = 0;
  for (const auto& q : test.samples) {
    double best = std::numeric_limits<double>::infinity();
    std::size_t label = 0;
    for (const auto& s : train.samples) {
      if (s.values.size() != q.values.size()) throw DimensionError("nearest neighbour needs equal-length series");
      double d = 0.0;
      for (std::size_t i = 0; i < q.values.size(); ++i) d += (q.values[i] - s.values[i]) * (q.values[i] - s.values[i]);
      if (d < best) best = d, label = s.label;
    }
    correct += label == q.label;
  }
  return double(correct) / double(test.size());
}

}  // namespace mtsc::data
