#pragma once

// Classifiers built from the conv bases, the temporal gates and the encoder.
//
// Every model takes a batch laid out [B, d_dataset, N] (or a single [d, N]
// series) and returns logits [B, num_classes].

#include <cstdint>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "mtsc/attention.hpp"
#include "mtsc/layers.hpp"

namespace mtsc {

enum class ModelVariant {
  fcn,
  fcn_gta,
  fcn_tps,
  fcn_tps_pe,
  resnet,
  resnet_gta,
  resnet_tps,
  resnet_tps_pe,
  sa_standalone,
  sa_pe,
  tps_standalone,
  tps_pe,
};

enum class BaseKind { fcn, resnet, dense };

std::string to_string(ModelVariant v);
// Throws UsageError listing the valid names.
ModelVariant parse_variant(const std::string& name);
const std::vector<ModelVariant>& all_variants();

BaseKind base_of(ModelVariant v);
bool has_gta(ModelVariant v);
bool has_pe(ModelVariant v);
// The encoder kind, if the variant has one.
std::optional<AttentionKind> encoder_of(ModelVariant v);

struct ModelSpec {
  ModelVariant variant = ModelVariant::fcn;
  std::size_t d_dataset = 1;
  std::size_t length = 1;  // N; fixes GTA's T and the positional table size
  std::size_t num_classes = 2;
  AttentionConfig attention;

  void validate() const;
  nlohmann::json to_json() const;
  static ModelSpec from_json(const nlohmann::json& j);
};

// Three conv(128,8)/(256,5)/(128,3) + BN + ReLU stages.
struct FcnBase {
  FcnBase(ParamBuilder b, std::size_t d_dataset);
  std::vector<Conv1d> convs;
  std::vector<BatchNorm1d> norms;
};

struct ResidualBlock {
  ResidualBlock(ParamBuilder b, std::size_t in, std::size_t out);
  Tensor forward(const Tensor& x, bool training) const;

  std::vector<Conv1d> convs;  // kernels 8, 5, 3
  std::vector<BatchNorm1d> norms;
  std::optional<Conv1d> shortcut_conv;  // 1x1, only when the width changes
  BatchNorm1d shortcut_norm;
};

// Feature widths per stage of the two conv bases.
inline constexpr std::size_t kFcnChannels[3] = {128, 256, 128};
inline constexpr std::size_t kResnetChannels[3] = {64, 128, 128};

class Model {
 public:
  Model(Model&&) = default;
  Model& operator=(Model&&) = default;

  // logits [B, C]. When `trace` is given, one entry per encoder layer is appended.
  Tensor forward(const Tensor& x, bool training, std::vector<AttentionOutput>* trace = nullptr) const;

  // Per-sample temporal gates of each GTA block, [B, 1, N] each.
  std::vector<Tensor> gates(const Tensor& x) const;

  const ModelSpec& spec() const { return spec_; }
  ParamStore& store() { return store_; }
  const ParamStore& store() const { return store_; }
  const std::vector<Parameter>& parameters() const { return store_.parameters(); }
  std::size_t parameter_count() const { return store_.parameter_count(); }
  bool has_encoder() const { return encoder_ != nullptr; }
  std::size_t feature_width() const;

 private:
  Model() = default;
  friend Model build_model(const ModelSpec& spec, std::uint64_t seed);
  friend Model build_base(BaseKind base, const ModelSpec& spec, bool gta, Rng& rng);
  friend Model attach_tps(Model base, AttentionKind kind, const AttentionConfig& cfg, bool pe, Rng& rng,
                          std::size_t num_classes);

  // [B, C, N] pre-pooling map of a conv base, gates applied.
  Tensor conv_features(const Tensor& x, bool training, std::vector<Tensor>* gates) const;

  ModelSpec spec_;
  ParamStore store_;
  BaseKind base_ = BaseKind::fcn;
  std::unique_ptr<FcnBase> fcn_;
  std::vector<ResidualBlock> resnet_;
  std::vector<GtaBlock> gta_;
  std::optional<Dense> input_;   // dense base: d_dataset -> d per step
  std::optional<Dense> bridge_;  // conv base width -> encoder width
  std::unique_ptr<PositionalEncoding> pe_;
  std::unique_ptr<Encoder> encoder_;
  Dense head_;
};

Model build_fcn(std::size_t d_dataset, std::size_t length, std::size_t num_classes, bool gta, std::uint64_t seed);
Model build_resnet(std::size_t d_dataset, std::size_t length, std::size_t num_classes, bool gta, std::uint64_t seed);
Model build_tps_standalone(std::size_t d_dataset, std::size_t length, std::size_t num_classes, bool pe,
                           const AttentionConfig& cfg, std::uint64_t seed);

// A conv base with its pooling head, ready for attach_tps or for use alone.
Model build_base(BaseKind base, const ModelSpec& spec, bool gta, Rng& rng);

// Replaces the base's GAP/head with [bridge] -> [PE] -> encoder -> GAP -> head.
// Throws CompositionError if the base has no temporal feature map to feed.
Model attach_tps(Model base, AttentionKind kind, const AttentionConfig& cfg, bool pe, Rng& rng,
                 std::size_t num_classes);

// Any variant; the same (spec, seed) always yields identical parameters.
Model build_model(const ModelSpec& spec, std::uint64_t seed);

struct ParameterCount {
  std::size_t total = 0;
  std::map<std::string, std::size_t> by_name;  // sorted for stable output
};
ParameterCount count_parameters(const Model& model);
ParameterCount count_parameters(const std::vector<Parameter>& params);

// ----------------------------------------------------------------- checkpoint
//
// Binary layout, all integers little-endian:
//   "MTSCCKPT" | u32 version | u64 n | n bytes of metadata JSON
//   | u64 entry count | entries | u32 crc32 of every preceding byte
// entry: u64 name length | name | u8 kind (0 parameter, 1 buffer) | u32 rank
//   | rank x u64 dims | u64 count | count x f64

struct CheckpointEntry {
  std::string name;
  bool buffer = false;
  Shape shape;
  std::vector<double> values;
};

struct Checkpoint {
  nlohmann::json metadata;  // at least {"spec": ModelSpec, "seed": ...}
  std::vector<CheckpointEntry> entries;
};

Checkpoint snapshot(const Model& model, nlohmann::json metadata);
std::string encode_checkpoint(const Checkpoint& ckpt);
// Throws CheckpointError on a bad magic, version, truncation or checksum.
Checkpoint decode_checkpoint(const std::string& bytes);

void save_checkpoint(const std::string& path, const Model& model, nlohmann::json metadata);
// Rebuilds the model from the stored spec and copies every tensor in.
std::pair<Model, nlohmann::json> load_checkpoint(const std::string& path);
// Copies checkpoint values into a model with the same names and shapes.
void restore(Model& model, const Checkpoint& ckpt);

}  // namespace mtsc
