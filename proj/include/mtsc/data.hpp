#pragma once

// Labelled multivariate series, the `.ts` text format, preprocessing and the
// synthetic generators.

#include <cstdint>
#include <iosfwd>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"
#include "mtsc/tensor.hpp"

namespace mtsc::data {

struct Sample {
  std::vector<double> values;  // d x length, row-major (one row per dimension)
  std::size_t length = 0;
  std::size_t label = 0;
  std::size_t original_length = 0;  // before any padding

  double at(std::size_t dim, std::size_t t) const { return values[dim * length + t]; }
};

struct Dataset {
  std::string name;
  std::string split;  // "train", "test", "val" or empty
  std::size_t dims = 0;
  std::vector<std::string> class_names;
  std::vector<Sample> samples;

  std::size_t size() const { return samples.size(); }
  std::size_t num_classes() const { return class_names.size(); }
  std::size_t max_length() const;
  bool equal_length() const;
  // Throws StructureError / LabelError when a sample breaks the invariants.
  void validate() const;
};

struct ParseResult {
  Dataset dataset;
  std::vector<std::string> warnings;  // e.g. ignored header tags
};

// Subset of the UEA/sktime `.ts` format; see docs/ts_format.md.
ParseResult parse_ts(std::istream& in);
ParseResult parse_ts_file(const std::string& path);  // IoError if unreadable
void write_ts(std::ostream& out, const Dataset& ds);
void write_ts_file(const std::string& path, const Dataset& ds);
// Shortest text that parses back to exactly `v`.
std::string format_double(double v);

// Per sample and dimension: (x - mean) / max(std, 1e-8).
Dataset znormalize(const Dataset& ds);
// Right-pads every sample with zeros to `length`; UsageError if a sample is longer.
Dataset pad_to(const Dataset& ds, std::size_t length);

// [B, d, N] for the given sample indices; all of them must share one length.
Tensor batch_tensor(const Dataset& ds, const std::vector<std::size_t>& indices);
std::vector<std::size_t> batch_labels(const Dataset& ds, const std::vector<std::size_t>& indices);

// Seeded split keeping class proportions: round(fraction * class size) per
// class go to the second set, never emptying a class of the first.
std::pair<Dataset, Dataset> stratified_holdout(const Dataset& ds, double fraction, std::uint64_t seed);

enum class SyntheticKind { positioned_bump, shifted_pattern, frequency_mix };
std::string to_string(SyntheticKind kind);
SyntheticKind parse_synthetic_kind(const std::string& text);

struct SyntheticSpec {
  SyntheticKind kind = SyntheticKind::positioned_bump;
  std::size_t n_samples = 120;  // split evenly between train and test
  std::size_t dims = 2;
  std::size_t length = 64;
  std::size_t n_classes = 3;
  double noise = 0.0;  // standard deviation of additive Gaussian noise
  std::uint64_t seed = 0;

  void validate() const;
  nlohmann::json to_json() const;
  static SyntheticSpec from_json(const nlohmann::json& j);
};

// positioned-bump: one fixed bump shape whose centre depends only on the class,
//   amplitude jittered per sample, zero elsewhere. Classes are exact time
//   shifts of one another.
// shifted-pattern: a class-specific waveform placed at a random offset.
// frequency-mix: a sinusoid whose frequency is the class, with random phase.
std::pair<Dataset, Dataset> generate_synthetic(const SyntheticSpec& spec);

// Test accuracy of 1-nearest-neighbour under Euclidean distance; equal lengths
// required, ties go to the earliest training sample.
double nearest_neighbour_accuracy(const Dataset& train, const Dataset& test);

}  // namespace mtsc::data
