#include "mtsc/models.hpp"

#include <algorithm>

#include "mtsc/errors.hpp"

namespace mtsc {

namespace {

struct VariantInfo {
  ModelVariant variant;
  const char* name;
  BaseKind base;
  bool gta;
  std::optional<AttentionKind> encoder;
  bool pe;
};

const std::vector<VariantInfo>& variant_table() {
  static const std::vector<VariantInfo> table = {
      {ModelVariant::fcn, "fcn", BaseKind::fcn, false, std::nullopt, false},
      {ModelVariant::fcn_gta, "fcn+gta", BaseKind::fcn, true, std::nullopt, false},
      {ModelVariant::fcn_tps, "fcn+tps", BaseKind::fcn, false, AttentionKind::tps, false},
      {ModelVariant::fcn_tps_pe, "fcn+tps+pe", BaseKind::fcn, false, AttentionKind::tps, true},
      {ModelVariant::resnet, "resnet", BaseKind::resnet, false, std::nullopt, false},
      {ModelVariant::resnet_gta, "resnet+gta", BaseKind::resnet, true, std::nullopt, false},
      {ModelVariant::resnet_tps, "resnet+tps", BaseKind::resnet, false, AttentionKind::tps, false},
      {ModelVariant::resnet_tps_pe, "resnet+tps+pe", BaseKind::resnet, false, AttentionKind::tps, true},
      {ModelVariant::sa_standalone, "sa-standalone", BaseKind::dense, false, AttentionKind::sa, false},
      {ModelVariant::sa_pe, "sa+pe", BaseKind::dense, false, AttentionKind::sa, true},
      {ModelVariant::tps_standalone, "tps-standalone", BaseKind::dense, false, AttentionKind::tps, false},
      {ModelVariant::tps_pe, "tps+pe", BaseKind::dense, false, AttentionKind::tps, true},
  };
  return table;
}

const VariantInfo& info(ModelVariant v) {
  for (const auto& i : variant_table())
    if (i.variant == v) return i;
  throw UsageError("unknown model variant");
}

Tensor as_batch(const Tensor& x, std::size_t d_dataset) {
  Tensor b = x.rank() == 2 ? ops::reshape(x, {1, x.size(0), x.size(1)}) : x;
  if (b.rank() != 3 || b.size(1) != d_dataset)
    throw DimensionError("model expects input [B, " + std::to_string(d_dataset) + ", N], got " +
                         shape_str(x.shape()));
  return b;
}

}  // namespace

std::string to_string(ModelVariant v) { return info(v).name; }

ModelVariant parse_variant(const std::string& name) {
  std::string valid;
  for (const auto& i : variant_table()) {
    if (name == i.name) return i.variant;
    valid += (valid.empty() ? "" : ", ") + std::string(i.name);
  }
  throw UsageError("unknown variant '" + name + "'; valid variants: " + valid);
}

const std::vector<ModelVariant>& all_variants() {
  static const std::vector<ModelVariant> all = [] {
    std::vector<ModelVariant> v;
    for (const auto& i : variant_table()) v.push_back(i.variant);
    return v;
  }();
  return all;
}

BaseKind base_of(ModelVariant v) { return info(v).base; }
bool has_gta(ModelVariant v) { return info(v).gta; }
bool has_pe(ModelVariant v) { return info(v).pe; }
std::optional<AttentionKind> encoder_of(ModelVariant v) { return info(v).encoder; }

void ModelSpec::validate() const {
  if (d_dataset == 0 || length == 0) throw UsageError("model needs positive input dimensions and length");
  if (num_classes < 2) throw UsageError("model needs at least two classes");
  attention.validate();
}

nlohmann::json ModelSpec::to_json() const {
  return {{"variant", to_string(variant)},
          {"d_dataset", d_dataset},
          {"length", length},
          {"num_classes", num_classes},
          {"attention", attention.to_json()}};
}

ModelSpec ModelSpec::from_json(const nlohmann::json& j) {
  ModelSpec s;
  s.variant = parse_variant(j.at("variant").get<std::string>());
  s.d_dataset = j.at("d_dataset").get<std::size_t>();
  s.length = j.at("length").get<std::size_t>();
  s.num_classes = j.at("num_classes").get<std::size_t>();
  if (j.contains("attention")) s.attention = AttentionConfig::from_json(j.at("attention"));
  s.validate();
  return s;
}

// ------------------------------------------------------------------ bases

FcnBase::FcnBase(ParamBuilder b, std::size_t d_dataset) {
  static constexpr std::size_t kernels[3] = {8, 5, 3};
  std::size_t in = d_dataset;
  for (int i = 0; i < 3; ++i) {
    std::string idx = std::to_string(i + 1);
    convs.emplace_back(b.scope("conv" + idx), in, kFcnChannels[i], kernels[i]);
    norms.emplace_back(b.scope("bn" + idx), kFcnChannels[i]);
    in = kFcnChannels[i];
  }
}

ResidualBlock::ResidualBlock(ParamBuilder b, std::size_t in, std::size_t out) {
  static constexpr std::size_t kernels[3] = {8, 5, 3};
  std::size_t width = in;
  for (int i = 0; i < 3; ++i) {
    std::string idx = std::to_string(i + 1);
    convs.emplace_back(b.scope("conv" + idx), width, out, kernels[i]);
    norms.emplace_back(b.scope("bn" + idx), out);
    width = out;
  }
  if (in != out) shortcut_conv.emplace(b.scope("shortcut_conv"), in, out, 1);
  shortcut_norm = BatchNorm1d(b.scope("shortcut_bn"), out);
}

Tensor ResidualBlock::forward(const Tensor& x, bool training) const {
  Tensor h = x;
  for (int i = 0; i < 3; ++i) {
    h = norms[i].forward(convs[i].forward(h), training);
    if (i < 2) h = ops::relu(h);
  }
  Tensor shortcut = shortcut_norm.forward(shortcut_conv ? shortcut_conv->forward(x) : x, training);
  return ops::relu(ops::add(h, shortcut));
}

// ------------------------------------------------------------------ model

std::size_t Model::feature_width() const {
  if (encoder_) return spec_.attention.d;
  return base_ == BaseKind::fcn ? kFcnChannels[2] : kResnetChannels[2];
}

Tensor Model::conv_features(const Tensor& x, bool training, std::vector<Tensor>* gates) const {
  Tensor h = x;
  for (std::size_t i = 0; i < 3; ++i) {
    if (base_ == BaseKind::fcn)
      h = ops::relu(fcn_->norms[i].forward(fcn_->convs[i].forward(h), training));
    else
      h = resnet_[i].forward(h, training);
    if (!gta_.empty()) {
      GateResult g = gta_[i].forward(h);
      h = g.out;
      if (gates) gates->push_back(g.attention);
    }
  }
  return h;
}

Tensor Model::forward(const Tensor& input, bool training, std::vector<AttentionOutput>* trace) const {
  Tensor x = as_batch(input, spec_.d_dataset);
  Tensor seq;
  if (base_ == BaseKind::dense) {
    seq = input_->forward(ops::transpose(x, 1, 2));
  } else {
    Tensor features = conv_features(x, training, nullptr);
    if (!encoder_) return head_.forward(ops::mean(features, 2));
    seq = ops::transpose(features, 1, 2);
    if (bridge_) seq = bridge_->forward(seq);
  }
  if (pe_) seq = pe_->apply(seq);
  seq = encoder_->forward(seq, trace);
  return head_.forward(ops::mean(seq, 1));
}

std::vector<Tensor> Model::gates(const Tensor& input) const {
  std::vector<Tensor> out;
  if (base_ != BaseKind::dense) conv_features(as_batch(input, spec_.d_dataset), false, &out);
  return out;
}

Model build_base(BaseKind base, const ModelSpec& spec, bool gta, Rng& rng) {
  if (base == BaseKind::dense) throw CompositionError("the dense projection is not a standalone base");
  Model m;
  m.spec_ = spec;
  m.base_ = base;
  ParamBuilder b(m.store_, rng);
  const std::size_t* widths = base == BaseKind::fcn ? kFcnChannels : kResnetChannels;
  if (base == BaseKind::fcn) {
    m.fcn_ = std::make_unique<FcnBase>(b.scope("base"), spec.d_dataset);
  } else {
    std::size_t in = spec.d_dataset;
    for (int i = 0; i < 3; ++i) {
      m.resnet_.emplace_back(b.scope("base.block" + std::to_string(i + 1)), in, widths[i]);
      in = widths[i];
    }
  }
  if (gta)
    for (int i = 0; i < 3; ++i)
      m.gta_.emplace_back(b.scope("gta." + std::to_string(i + 1)), widths[i], spec.length, spec.attention.r);
  m.head_ = Dense(b.scope("head"), widths[2], spec.num_classes);
  return m;
}

Model attach_tps(Model base, AttentionKind kind, const AttentionConfig& cfg, bool pe, Rng& rng,
                 std::size_t num_classes) {
  if (base.base_ == BaseKind::dense || base.encoder_)
    throw CompositionError("attach_tps needs a conv base exposing its pre-pooling temporal feature map");
  cfg.validate();
  base.store_.remove_prefix("head.");
  ParamBuilder b(base.store_, rng);
  const std::size_t width = base.feature_width();
  if (width != cfg.d) base.bridge_.emplace(b.scope("bridge"), width, cfg.d);
  if (pe) base.pe_ = std::make_unique<PositionalEncoding>(b.scope("pe"), base.spec_.length, cfg.d);
  base.encoder_ = std::make_unique<Encoder>(b.scope("encoder"), kind, cfg);
  base.head_ = Dense(b.scope("head"), cfg.d, num_classes);
  base.spec_.attention = cfg;
  base.spec_.num_classes = num_classes;
  return base;
}

Model build_model(const ModelSpec& spec, std::uint64_t seed) {
  spec.validate();
  Rng rng(seed);
  const VariantInfo& v = info(spec.variant);
  if (v.base == BaseKind::dense) {
    Model m;
    m.spec_ = spec;
    m.base_ = BaseKind::dense;
    ParamBuilder b(m.store_, rng);
    const std::size_t d = spec.attention.d;
    m.input_.emplace(b.scope("input"), spec.d_dataset, d);
    if (v.pe) m.pe_ = std::make_unique<PositionalEncoding>(b.scope("pe"), spec.length, d);
    m.encoder_ = std::make_unique<Encoder>(b.scope("encoder"), *v.encoder, spec.attention);
    m.head_ = Dense(b.scope("head"), d, spec.num_classes);
    return m;
  }
  Model base = build_base(v.base, spec, v.gta, rng);
  base.spec_.variant = spec.variant;
  if (!v.encoder) return base;
  return attach_tps(std::move(base), *v.encoder, spec.attention, v.pe, rng, spec.num_classes);
}

Model build_fcn(std::size_t d_dataset, std::size_t length, std::size_t num_classes, bool gta, std::uint64_t seed) {
  ModelSpec s;
  s.variant = gta ? ModelVariant::fcn_gta : ModelVariant::fcn;
  s.d_dataset = d_dataset;
  s.length = length;
  s.num_classes = num_classes;
  return build_model(s, seed);
}

Model build_resnet(std::size_t d_dataset, std::size_t length, std::size_t num_classes, bool gta, std::uint64_t seed) {
  ModelSpec s;
  s.variant = gta ? ModelVariant::resnet_gta : ModelVariant::resnet;
  s.d_dataset = d_dataset;
  s.length = length;
  s.num_classes = num_classes;
  return build_model(s, seed);
}

Model build_tps_standalone(std::size_t d_dataset, std::size_t length, std::size_t num_classes, bool pe,
                           const AttentionConfig& cfg, std::uint64_t seed) {
  ModelSpec s;
  s.variant = pe ? ModelVariant::tps_pe : ModelVariant::tps_standalone;
  s.d_dataset = d_dataset;
  s.length = length;
  s.num_classes = num_classes;
  s.attention = cfg;
  return build_model(s, seed);
}

ParameterCount count_parameters(const std::vector<Parameter>& params) {
  ParameterCount c;
  for (const auto& p : params) {
    c.by_name[p.name] = p.tensor.numel();
    c.total += p.tensor.numel();
  }
  return c;
}

ParameterCount count_parameters(const Model& model) { return count_parameters(model.parameters()); }

}  // namespace mtsc
